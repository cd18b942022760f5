//! Feed-forward risk scorer: two hidden layers with batch normalization, GELU and
//! dropout, a sigmoid output, and a post-hoc temperature. Backprop is by hand.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Stream;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Offsets of each parameter block in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    input: usize,
    h1: usize,
    h2: usize,
}

impl Layout {
    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.w1() + self.h1 * self.input
    }
    fn g1(&self) -> usize {
        self.b1() + self.h1
    }
    fn be1(&self) -> usize {
        self.g1() + self.h1
    }
    fn w2(&self) -> usize {
        self.be1() + self.h1
    }
    fn b2(&self) -> usize {
        self.w2() + self.h2 * self.h1
    }
    fn g2(&self) -> usize {
        self.b2() + self.h2
    }
    fn be2(&self) -> usize {
        self.g2() + self.h2
    }
    fn w3(&self) -> usize {
        self.be2() + self.h2
    }
    fn b3(&self) -> usize {
        self.w3() + self.h2
    }
    fn len(&self) -> usize {
        self.b3() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterNet {
    pub input_dim: usize,
    pub hidden: [usize; 2],
    pub params: Vec<f64>,
    pub running_mean: [Vec<f64>; 2],
    pub running_var: [Vec<f64>; 2],
    pub dropout: f64,
    pub temperature: f64,
}

/// Activations kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    n: usize,
    x: Vec<f64>,
    xhat: [Vec<f64>; 2],
    inv_std: [Vec<f64>; 2],
    pre: [Vec<f64>; 2],
    /// Normal CDF at `pre`, reused by the GELU derivative.
    cdf: [Vec<f64>; 2],
    mask: [Vec<f64>; 2],
    act: [Vec<f64>; 2],
    batch_mean: [Vec<f64>; 2],
    batch_var: [Vec<f64>; 2],
    pub logits: Vec<f64>,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

/// GELU derivative given the normal CDF `cdf` at `x`.
fn gelu_grad_with(x: f64, cdf: f64) -> f64 {
    cdf + x * math::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI)
}

pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_with(x, normal_cdf(x))
}

/// `out[r, c] += Σ_k a[r, k] · b[k, c]`, summing over `k` in order.
///
/// Works on 4×4 register tiles; every output element sees the same
/// summation order as a plain triple loop, so tiling does not change results.
fn matmul_acc(a: &[f64], rows: usize, k: usize, b: &[f64], cols: usize, out: &mut [f64]) {
    // k is walked in slabs so the touched rows of `b` stay in cache
    const SLAB: usize = 128;
    let mut packed = vec![0.0; SLAB * 4];
    for k0 in (0..k).step_by(SLAB) {
        let kl = SLAB.min(k - k0);
        let slab = &b[k0 * cols..(k0 + kl) * cols];
        let mut r = 0;
        while r + 4 <= rows {
            // a[r..r+4, slab] stored k-major so the inner loop reads it contiguously
            for i in 0..4 {
                let row = &a[(r + i) * k + k0..(r + i) * k + k0 + kl];
                for (kk, v) in row.iter().enumerate() {
                    packed[kk * 4 + i] = *v;
                }
            }
            tile_row::<4>(&packed[..kl * 4], r, kl, slab, cols, out);
            r += 4;
        }
        while r < rows {
            tile_row::<1>(&a[r * k + k0..r * k + k0 + kl], r, kl, slab, cols, out);
            r += 1;
        }
    }
}

/// `packed` holds `R` rows of `a` interleaved as `[k][R]`.
fn tile_row<const R: usize>(packed: &[f64], r0: usize, k: usize, b: &[f64], cols: usize, out: &mut [f64]) {
    let mut c = 0;
    while c + 4 <= cols {
        tile::<R, 4>(packed, r0, k, b, cols, c, out);
        c += 4;
    }
    while c < cols {
        tile::<R, 1>(packed, r0, k, b, cols, c, out);
        c += 1;
    }
}

#[inline(always)]
fn tile<const R: usize, const C: usize>(packed: &[f64], r0: usize, k: usize, b: &[f64], cols: usize, c0: usize, out: &mut [f64]) {
    let mut acc = [[0.0; C]; R];
    for (i, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&out[(r0 + i) * cols + c0..][..C]);
    }
    for (av, brow) in packed[..k * R].chunks_exact(R).zip(b.chunks_exact(cols)) {
        let av: &[f64; R] = av.try_into().expect("tile height");
        let bv: &[f64; C] = brow[c0..c0 + C].try_into().expect("tile width");
        for i in 0..R {
            for j in 0..C {
                acc[i][j] += av[i] * bv[j];
            }
        }
    }
    for (i, row) in acc.iter().enumerate() {
        out[(r0 + i) * cols + c0..][..C].copy_from_slice(row);
    }
}

/// Row-major `rows × cols` to `cols × rows`.
fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// `out[n, o] = x[n, :] · w[o, :] + b[o]`.
fn linear(x: &[f64], n: usize, input: usize, w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
    matmul_acc(x, n, input, &transpose(w, out_dim, input), out_dim, &mut out);
    out
}

/// Gradients of a linear layer: accumulates `dW = dzᵀ x`, `db = Σ dz` and
/// returns `dx = dz W` when requested.
fn linear_backward(
    dz: &[f64],
    x: &[f64],
    n: usize,
    input: usize,
    w: &[f64],
    out_dim: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    want_dx: bool,
) -> Vec<f64> {
    for r in 0..n {
        for (g, d) in gb.iter_mut().zip(&dz[r * out_dim..(r + 1) * out_dim]) {
            *g += d;
        }
    }
    matmul_acc(&transpose(dz, n, out_dim), out_dim, n, x, input, gw);
    let mut dx = Vec::new();
    if want_dx {
        dx = vec![0.0; n * input];
        matmul_acc(dz, n, out_dim, w, input, &mut dx);
    }
    dx
}

impl RouterNet {
    /// PyTorch-style init: weights and biases uniform in `±1/sqrt(fan_in)`,
    /// normalization scale 1 and shift 0.
    pub fn new(input_dim: usize, hidden: [usize; 2], dropout: f64, rng: &mut Stream) -> Self {
        let mut net = Self::zeros(input_dim, hidden, dropout);
        let l = net.layout();
        let mut fill = |range: core::ops::Range<usize>, fan_in: usize, params: &mut Vec<f64>| {
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            for p in &mut params[range] {
                *p = rng.gen_range(-bound..bound);
            }
        };
        fill(l.w1()..l.g1(), input_dim, &mut net.params);
        fill(l.w2()..l.g2(), hidden[0], &mut net.params);
        fill(l.w3()..l.len(), hidden[1], &mut net.params);
        for p in &mut net.params[l.g1()..l.be1()] {
            *p = 1.0;
        }
        for p in &mut net.params[l.g2()..l.be2()] {
            *p = 1.0;
        }
        net
    }

    /// All parameters zero, running statistics at their initial values.
    pub fn zeros(input_dim: usize, hidden: [usize; 2], dropout: f64) -> Self {
        let l = Layout {
            input: input_dim,
            h1: hidden[0],
            h2: hidden[1],
        };
        Self {
            input_dim,
            hidden,
            params: vec![0.0; l.len()],
            running_mean: [vec![0.0; hidden[0]], vec![0.0; hidden[1]]],
            running_var: [vec![1.0; hidden[0]], vec![1.0; hidden[1]]],
            dropout,
            temperature: 1.0,
        }
    }

    fn layout(&self) -> Layout {
        Layout {
            input: self.input_dim,
            h1: self.hidden[0],
            h2: self.hidden[1],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, xs: &[f64]) -> Result<usize> {
        if xs.len() % self.input_dim != 0 {
            return Err(Error::InvalidInput(format!(
                "input length {} is not a multiple of {}",
                xs.len(),
                self.input_dim
            )));
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite router input".into()));
        }
        Ok(xs.len() / self.input_dim)
    }

    /// Eval-mode logits (before temperature) of a row-major batch.
    pub fn logits_eval(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let n = self.check_input(xs)?;
        let l = self.layout();
        let p = &self.params;
        let mut h = xs.to_vec();
        let mut width = self.input_dim;
        let specs = [
            (l.w1(), l.b1(), l.g1(), l.be1(), l.h1),
            (l.w2(), l.b2(), l.g2(), l.be2(), l.h2),
        ];
        for (layer, &(w, b, g, be, out)) in specs.iter().enumerate() {
            let mut z = linear(&h, n, width, &p[w..w + out * width], &p[b..b + out], out);
            let scale: Vec<f64> = (0..out)
                .map(|j| p[g + j] / libm::sqrt(self.running_var[layer][j] + BN_EPS))
                .collect();
            for r in 0..n {
                for j in 0..out {
                    let v = &mut z[r * out + j];
                    *v = gelu((*v - self.running_mean[layer][j]) * scale[j] + p[be + j]);
                }
            }
            h = z;
            width = out;
        }
        Ok(linear(&h, n, width, &p[l.w3()..l.b3()], &p[l.b3()..l.len()], 1))
    }

    /// `sigmoid(logit / T)` for each row in eval mode.
    pub fn probs_eval(&self, xs: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .logits_eval(xs)?
            .into_iter()
            .map(|z| math::sigmoid(z / self.temperature))
            .collect())
    }

    /// Probability for a single feature vector. Train mode draws dropout from
    /// `rng` and normalizes with the statistics of this one-row batch.
    pub fn forward(&self, f: &[f64], mode: Mode, rng: &mut Stream) -> Result<f64> {
        match mode {
            Mode::Eval => Ok(self.probs_eval(f)?[0]),
            Mode::Train => {
                self.check_input(f)?;
                let cache = self.forward_train(f, rng);
                Ok(math::sigmoid(cache.logits[0] / self.temperature))
            }
        }
    }

    /// Training-mode pass (batch statistics, dropout); inputs must be finite.
    pub fn forward_train(&self, xs: &[f64], rng: &mut Stream) -> Cache {
        let n = xs.len() / self.input_dim;
        let l = self.layout();
        let p = &self.params;
        let keep = 1.0 - self.dropout;
        let specs = [
            (l.w1(), l.b1(), l.g1(), l.be1(), l.h1),
            (l.w2(), l.b2(), l.g2(), l.be2(), l.h2),
        ];
        let mut cache = Cache {
            n,
            x: xs.to_vec(),
            xhat: [Vec::new(), Vec::new()],
            inv_std: [Vec::new(), Vec::new()],
            pre: [Vec::new(), Vec::new()],
            cdf: [Vec::new(), Vec::new()],
            mask: [Vec::new(), Vec::new()],
            act: [Vec::new(), Vec::new()],
            batch_mean: [Vec::new(), Vec::new()],
            batch_var: [Vec::new(), Vec::new()],
            logits: Vec::new(),
        };
        let mut width = self.input_dim;
        for (layer, &(w, b, g, be, out)) in specs.iter().enumerate() {
            let input = if layer == 0 { &cache.x } else { &cache.act[0] };
            let z = linear(input, n, width, &p[w..w + out * width], &p[b..b + out], out);
            let mut mean = vec![0.0; out];
            let mut var = vec![0.0; out];
            for zr in z.chunks_exact(out) {
                for (m, v) in mean.iter_mut().zip(zr) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= n as f64;
            }
            for zr in z.chunks_exact(out) {
                for ((s, v), m) in var.iter_mut().zip(zr).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            for v in &mut var {
                *v /= n as f64;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
            let mut xhat = vec![0.0; n * out];
            let mut pre = vec![0.0; n * out];
            let mut cdf = vec![0.0; n * out];
            let mut mask = vec![0.0; n * out];
            let mut act = vec![0.0; n * out];
            let (gamma, beta) = (&p[g..g + out], &p[be..be + out]);
            let (mean_s, inv_s) = (&mean[..out], &inv_std[..out]);
            for r in 0..n {
                for j in 0..out {
                    let i = r * out + j;
                    xhat[i] = (z[i] - mean_s[j]) * inv_s[j];
                    pre[i] = gamma[j] * xhat[i] + beta[j];
                    mask[i] = if self.dropout > 0.0 {
                        let u: f64 = rng.gen();
                        if u < self.dropout {
                            0.0
                        } else {
                            1.0 / keep
                        }
                    } else {
                        1.0
                    };
                    cdf[i] = normal_cdf(pre[i]);
                    act[i] = pre[i] * cdf[i] * mask[i];
                }
            }
            cache.xhat[layer] = xhat;
            cache.inv_std[layer] = inv_std;
            cache.pre[layer] = pre;
            cache.cdf[layer] = cdf;
            cache.mask[layer] = mask;
            cache.act[layer] = act;
            cache.batch_mean[layer] = mean;
            cache.batch_var[layer] = var;
            width = out;
        }
        cache.logits = linear(&cache.act[1], n, width, &p[l.w3()..l.b3()], &p[l.b3()..l.len()], 1);
        cache
    }

    /// Gradient of `Σ_n dlogits[n] · logit_n` with respect to all parameters.
    pub fn backward(&self, cache: &Cache, dlogits: &[f64]) -> Vec<f64> {
        let l = self.layout();
        let p = &self.params;
        let n = cache.n;
        let mut grad = vec![0.0; p.len()];
        let (gw3, rest) = grad[l.w3()..].split_at_mut(l.h2);
        let mut d_act = linear_backward(dlogits, &cache.act[1], n, l.h2, &p[l.w3()..l.b3()], 1, gw3, &mut rest[..1], true);

        let specs = [
            (l.w1(), l.b1(), l.g1(), l.be1(), l.input, l.h1),
            (l.w2(), l.b2(), l.g2(), l.be2(), l.h1, l.h2),
        ];
        for layer in (0..2).rev() {
            let (w, b, g, be, input, out) = specs[layer];
            // through dropout and GELU
            let mut dy = d_act;
            for (i, d) in dy.iter_mut().enumerate() {
                *d *= cache.mask[layer][i] * gelu_grad_with(cache.pre[layer][i], cache.cdf[layer][i]);
            }
            // through batch normalization
            let xhat = &cache.xhat[layer];
            let gamma = &p[g..g + out];
            let inv_std = &cache.inv_std[layer][..out];
            let mut dgamma = vec![0.0; out];
            let mut dbeta = vec![0.0; out];
            let mut sum_dxhat = vec![0.0; out];
            let mut sum_dxhat_xhat = vec![0.0; out];
            for (dyr, xr) in dy.chunks_exact(out).zip(xhat.chunks_exact(out)) {
                for j in 0..out {
                    dgamma[j] += dyr[j] * xr[j];
                    dbeta[j] += dyr[j];
                    let dxh = dyr[j] * gamma[j];
                    sum_dxhat[j] += dxh;
                    sum_dxhat_xhat[j] += dxh * xr[j];
                }
            }
            for j in 0..out {
                grad[g + j] += dgamma[j];
                grad[be + j] += dbeta[j];
            }
            let inv_n = 1.0 / n as f64;
            let mut dz = vec![0.0; n * out];
            for ((dzr, dyr), xr) in dz.chunks_exact_mut(out).zip(dy.chunks_exact(out)).zip(xhat.chunks_exact(out)) {
                for j in 0..out {
                    let dxh = dyr[j] * gamma[j];
                    dzr[j] = inv_std[j] * (dxh - inv_n * sum_dxhat[j] - xr[j] * inv_n * sum_dxhat_xhat[j]);
                }
            }
            let input_act = if layer == 0 { &cache.x } else { &cache.act[0] };
            let (gw, gb) = grad[w..b + out].split_at_mut(out * input);
            d_act = linear_backward(&dz, input_act, n, input, &p[w..w + out * input], out, gw, gb, layer > 0);
        }
        grad
    }

    /// Exponential moving update of running statistics from a training batch.
    pub fn update_running_stats(&mut self, cache: &Cache) {
        let n = cache.n as f64;
        let unbias = if cache.n > 1 { n / (n - 1.0) } else { 1.0 };
        for layer in 0..2 {
            for j in 0..self.hidden[layer] {
                let rm = &mut self.running_mean[layer][j];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * cache.batch_mean[layer][j];
                let rv = &mut self.running_var[layer][j];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * cache.batch_var[layer][j] * unbias;
            }
        }
    }

    /// Names and ranges of the parameter blocks, in storage order.
    pub fn blocks(&self) -> Vec<(&'static str, core::ops::Range<usize>)> {
        let l = self.layout();
        vec![
            ("w1", l.w1()..l.b1()),
            ("b1", l.b1()..l.g1()),
            ("bn1_scale", l.g1()..l.be1()),
            ("bn1_shift", l.be1()..l.w2()),
            ("w2", l.w2()..l.b2()),
            ("b2", l.b2()..l.g2()),
            ("bn2_scale", l.g2()..l.be2()),
            ("bn2_shift", l.be2()..l.w3()),
            ("w3", l.w3()..l.b3()),
            ("b3", l.b3()..l.len()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn tiled_matmul_matches_the_triple_loop_bit_for_bit() {
        let mut r = rng::stream(9, &[]);
        // sizes straddle the 4-wide tiles and the k slab
        for &(rows, k, cols) in &[(1, 1, 1), (5, 3, 7), (9, 130, 6), (8, 257, 4), (3, 300, 129)] {
            let a: Vec<f64> = (0..rows * k).map(|_| r.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
            let init: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
            let mut expect = init.clone();
            for i in 0..rows {
                for j in 0..cols {
                    for kk in 0..k {
                        expect[i * cols + j] += a[i * k + kk] * b[kk * cols + j];
                    }
                }
            }
            let mut got = init;
            matmul_acc(&a, rows, k, &b, cols, &mut got);
            assert_eq!(got, expect, "{rows}x{k}x{cols}");
        }
    }

    #[test]
    fn zero_net_outputs_half() {
        let net = RouterNet::zeros(15, [128, 64], 0.2);
        let p = net.probs_eval(&[0.3; 15]).unwrap();
        assert_eq!(p, vec![0.5]);
        assert!(net.param_count() > 10_000 && net.param_count() < 12_000);
    }

    #[test]
    fn temperature_limit() {
        let mut net = RouterNet::new(15, [128, 64], 0.2, &mut rng::stream(1, &[]));
        let b3 = net.layout().b3();
        net.params[b3] = 3.0;
        net.temperature = 1e9;
        let p = net.probs_eval(&[0.7; 15]).unwrap()[0];
        assert!((p - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_finite() {
        let net = RouterNet::zeros(2, [4, 3], 0.0);
        assert!(net.probs_eval(&[f64::NAN, 0.0]).is_err());
        assert!(net.forward(&[0.0, f64::INFINITY], Mode::Train, &mut rng::stream(0, &[])).is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.8, 3.1] {
            assert!(((gelu(x + h) - gelu(x - h)) / (2.0 * h) - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn eval_is_bit_stable() {
        let net = RouterNet::new(15, [16, 8], 0.2, &mut rng::stream(2, &[]));
        let x: Vec<f64> = (0..45).map(|i| libm::sin(i as f64 * 0.37)).collect();
        assert_eq!(net.probs_eval(&x).unwrap(), net.probs_eval(&x).unwrap());
    }
}
