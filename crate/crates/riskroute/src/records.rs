//! Line-delimited JSON artifacts (`*.rljson`).
//!
//! Line 1 is an [`ArtifactHeader`]; every following line is one record. Floats
//! are written with shortest round-trip formatting and read back with
//! `float_roundtrip`, so numeric fields survive bit-exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use riskroute_core::domain::PerturbedEpisode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA: &str = "riskroute/1";

/// Provenance attached to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub schema: String,
    /// Pipeline stage that produced the artifact.
    pub stage: String,
    pub config_hash: String,
    /// Stage-specific extras, e.g. record counts.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

impl ArtifactHeader {
    pub fn new(stage: &str, config_hash: &str) -> Self {
        Self {
            schema: SCHEMA.into(),
            stage: stage.into(),
            config_hash: config_hash.into(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.meta = meta;
        self
    }
}

/// One record as a single JSON line, without the trailing newline.
pub fn encode<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("records serialize to JSON")
}

/// Decode one record; `base` is the byte offset of `bytes` in its file.
pub fn decode<T: DeserializeOwned>(bytes: &[u8], base: usize) -> CliResult<T> {
    serde_json::from_slice(bytes).map_err(|e| CliError::Parse {
        offset: base + error_offset(bytes, &e),
        message: e.to_string(),
    })
}

/// Byte position of a serde_json error within a single-line slice.
fn error_offset(bytes: &[u8], e: &serde_json::Error) -> usize {
    if e.is_eof() {
        return bytes.len();
    }
    // serde_json reports 1-based line and column
    let mut line_start = 0;
    for _ in 1..e.line() {
        match bytes[line_start..].iter().position(|&b| b == b'\n') {
            Some(p) => line_start += p + 1,
            None => break,
        }
    }
    (line_start + e.column().saturating_sub(1)).min(bytes.len())
}

pub fn serialize_episode(episode: &PerturbedEpisode) -> Vec<u8> {
    encode(episode)
}

pub fn deserialize_episode(bytes: &[u8]) -> CliResult<PerturbedEpisode> {
    let e: PerturbedEpisode = decode(bytes, 0)?;
    e.validate()?;
    Ok(e)
}

/// Header line plus one line per record.
pub fn to_bytes<T: Serialize>(header: &ArtifactHeader, records: &[T]) -> Vec<u8> {
    let mut out = encode(header);
    out.push(b'\n');
    for r in records {
        out.extend(encode(r));
        out.push(b'\n');
    }
    out
}

/// Parse a whole artifact. Blank trailing lines are allowed; anything else
/// malformed is reported with its byte offset and nothing is returned.
pub fn from_bytes<T: DeserializeOwned>(bytes: &[u8]) -> CliResult<(ArtifactHeader, Vec<T>)> {
    let mut offset = 0;
    let mut header: Option<ArtifactHeader> = None;
    let mut records = Vec::new();
    for line in bytes.split_inclusive(|&b| b == b'\n') {
        let body = line.strip_suffix(b"\n").unwrap_or(line);
        if !body.iter().all(u8::is_ascii_whitespace) {
            match header {
                None => {
                    let h: ArtifactHeader = decode(body, offset)?;
                    if h.schema != SCHEMA {
                        return Err(CliError::Parse {
                            offset,
                            message: format!("unsupported schema `{}`", h.schema),
                        });
                    }
                    header = Some(h);
                }
                Some(_) => records.push(decode(body, offset)?),
            }
        }
        offset += line.len();
    }
    let header = header.ok_or_else(|| CliError::Parse {
        offset: bytes.len(),
        message: "missing artifact header".into(),
    })?;
    Ok((header, records))
}

pub fn write<T: Serialize>(path: &Path, header: &ArtifactHeader, records: &[T]) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&to_bytes(header, records))
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn read<T: DeserializeOwned>(path: &Path) -> CliResult<(ArtifactHeader, Vec<T>)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        CliError::Parse { offset, message } => CliError::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Single JSON document with the header inline, for small artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonArtifact<T> {
    pub header: ArtifactHeader,
    pub body: T,
}

pub fn write_json<T: Serialize>(path: &Path, header: &ArtifactHeader, body: &T) -> CliResult<()> {
    let doc = JsonArtifact {
        header: header.clone(),
        body,
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("artifact serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<JsonArtifact<T>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Parse {
        offset: json_offset(&bytes, &e),
        message: format!("{}: {e}", path.display()),
    })
}

fn json_offset(bytes: &[u8], e: &serde_json::Error) -> usize {
    if e.is_eof() {
        return bytes.len();
    }
    error_offset(bytes, e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_point_into_the_bad_line() {
        let text = b"{\"schema\":\"riskroute/1\",\"stage\":\"x\",\"config_hash\":\"h\"}\n1\n2\n[oops\n";
        let err = from_bytes::<u32>(text).unwrap_err();
        let CliError::Parse { offset, .. } = err else { panic!("{err}") };
        let bad = text.iter().position(|&b| b == b'[').unwrap();
        assert!(offset >= bad && offset <= text.len(), "{offset} vs {bad}");
    }

    #[test]
    fn missing_header_is_an_error() {
        assert!(from_bytes::<u32>(b"").is_err());
        assert!(from_bytes::<u32>(b"{\"schema\":\"other\",\"stage\":\"x\",\"config_hash\":\"h\"}\n").is_err());
    }

    #[test]
    fn meta_is_optional() {
        let h = ArtifactHeader::new("tasks", "abc");
        let bytes = to_bytes::<u8>(&h, &[1, 2, 3]);
        let (back, recs) = from_bytes::<u8>(&bytes).unwrap();
        assert_eq!(back, h);
        assert_eq!(recs, vec![1, 2, 3]);
        assert!(!String::from_utf8(bytes).unwrap().contains("meta"));
    }
}
