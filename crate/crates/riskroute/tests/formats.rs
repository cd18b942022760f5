use proptest::prelude::*;
use riskroute::checkpoint::Checkpoint;
use riskroute::config::{env_overrides, Config};
use riskroute::records::{self, ArtifactHeader};
use riskroute::CliError;
use riskroute_core::domain::{EnvConfig, PerturbationSeed, TaskId};
use riskroute_core::env::Environment;
use riskroute_core::policy::collect_teacher_trajectories;
use riskroute_core::policy::TeacherPolicy;

fn teacher_episodes(seed: u64) -> Vec<riskroute_core::domain::PerturbedEpisode> {
    let env = Environment::generate(EnvConfig::default(), 3, seed).unwrap();
    let pool = collect_teacher_trajectories(&env, &env.task_ids(), 2, &TeacherPolicy::default(), seed).unwrap();
    pool.expert.into_iter().chain(pool.perturbed).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn episodes_round_trip_bit_exactly(seed in any::<u64>()) {
        for e in teacher_episodes(seed) {
            let bytes = records::serialize_episode(&e);
            prop_assert!(!bytes.contains(&b'\n'));
            prop_assert_eq!(records::deserialize_episode(&bytes).unwrap(), e);
        }
    }

    #[test]
    fn floats_survive_rljson(values in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..50)) {
        let bytes = records::to_bytes(&ArtifactHeader::new("x", "h"), &values);
        let (_, back): (_, Vec<f64>) = records::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.len(), values.len());
        for (a, b) in back.iter().zip(&values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoints_round_trip(arrays in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 0..40), 0..5)) {
        let ck = Checkpoint {
            header: ArtifactHeader::new("train-bc", "abc"),
            arrays: arrays.into_iter().enumerate().map(|(i, v)| (format!("a{i}"), v)).collect(),
        };
        prop_assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn corrupt_lines_fail_with_an_offset_inside_the_file(seed in any::<u64>(), cut in 1usize..200) {
        let episodes = teacher_episodes(seed);
        let mut bytes = records::to_bytes(&ArtifactHeader::new("collect", "h"), &episodes);
        let first_line = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        let second = first_line + bytes[first_line..].iter().position(|&b| b == b'\n').unwrap();
        // chop a record mid-way so it no longer parses
        let at = first_line + cut.min(second - first_line - 1);
        bytes.drain(at..second);
        match records::from_bytes::<riskroute_core::domain::PerturbedEpisode>(&bytes) {
            Err(CliError::Parse { offset, .. }) => prop_assert!(offset >= first_line && offset <= bytes.len()),
            other => prop_assert!(false, "expected a parse error, got {other:?}"),
        }
    }
}

#[test]
fn episode_with_inconsistent_llm_count_is_rejected() {
    let mut e = teacher_episodes(1).remove(0);
    e.llm_calls += 1;
    let bytes = records::serialize_episode(&e);
    assert!(records::deserialize_episode(&bytes).is_err());
}

#[test]
fn seeds_and_tasks_serialize_as_plain_numbers() {
    let text = serde_json::to_string(&(TaskId(3), PerturbationSeed(u64::MAX))).unwrap();
    assert_eq!(text, format!("[3,{}]", u64::MAX));
}

#[test]
fn config_file_round_trips_and_hash_tracks_changes() {
    let cfg = Config::default();
    let back = Config::from_toml_with_overrides(&cfg.to_toml(), &[]).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let changed = Config::from_toml_with_overrides("", &[("router.epochs".into(), "3".into())]).unwrap();
    assert_eq!(changed.router.epochs, 3);
    assert_ne!(changed.hash(), cfg.hash());
}

#[test]
fn environment_overrides_use_the_prefix() {
    let vars = vec![
        ("RISKROUTE__ROUTER__EPOCHS".to_string(), "4".to_string()),
        ("PATH".to_string(), "/bin".to_string()),
    ];
    let o = env_overrides(vars.into_iter());
    assert_eq!(o, vec![("router.epochs".to_string(), "4".to_string())]);
    let cfg = Config::from_toml_with_overrides("", &o).unwrap();
    assert_eq!(cfg.router.epochs, 4);
}

#[test]
fn every_documented_block_parses() {
    let text = r#"
[pipeline]
seed = 1
[env]
horizon = 24
[policy.teacher]
[verifier]
regime = "sharp"
[distill]
lambda_cons = 0.5
[features]
mask = "no_entropy"
[router]
threshold_mode = "bayes"
[router.cvar]
alpha = 0.1
[runtime]
budget = 3
[eval]
bootstrap_seed = 5
"#;
    let cfg = Config::from_toml_with_overrides(text, &[]).unwrap();
    assert_eq!(cfg.env.horizon, 24);
    assert_eq!(cfg.runtime.budget, Some(3));
    assert_eq!(cfg.router.cvar.alpha, 0.1);
}
