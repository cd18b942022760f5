use riskroute_core::math;
use riskroute_core::rng;
use riskroute_core::router::RouterNet;
use rand::Rng;

/// Central differences of a scalar loss on a few coordinates.
fn finite_difference<F: FnMut(&[f64]) -> f64>(x: &[f64], coords: &[usize], mut f: F) -> Vec<f64> {
    let h = 1e-6;
    let mut x = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn router_backward_matches_finite_differences() {
    let mut r = rng::stream(3, &[]);
    let (n, d) = (16, 5);
    let net = RouterNet::new(d, [12, 6], 0.25, &mut r);
    let xs: Vec<f64> = (0..n * d).map(|_| r.gen_range(-2.0..2.0)).collect();
    let ys: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
    // squared error on sigmoid outputs; the dropout mask is replayed by seed
    let loss = |net: &RouterNet| {
        let cache = net.forward_train(&xs, &mut rng::stream(11, &[]));
        let l: f64 = cache.logits.iter().zip(&ys).map(|(&z, &y)| (math::sigmoid(z) - y).powi(2)).sum();
        (l, cache)
    };
    let (_, cache) = loss(&net);
    let dlogits: Vec<f64> = cache
        .logits
        .iter()
        .zip(&ys)
        .map(|(&z, &y)| {
            let p = math::sigmoid(z);
            2.0 * (p - y) * p * (1.0 - p)
        })
        .collect();
    let grad = net.backward(&cache, &dlogits);
    let coords: Vec<usize> = (0..net.param_count()).step_by(3).collect();
    let mut probe = net.clone();
    let fd = finite_difference(&net.params, &coords, |p| {
        probe.params.copy_from_slice(p);
        loss(&probe).0
    });
    let (mut num, mut den) = (0.0, 0.0);
    for (k, &i) in coords.iter().enumerate() {
        num += (grad[i] - fd[k]).powi(2);
        den += grad[i].powi(2).max(fd[k].powi(2));
    }
    let rel = (num / den).sqrt();
    assert!(rel < 1e-5, "relative error {rel}");
}

#[test]
fn eval_mode_is_deterministic_and_bounded() {
    let mut r = rng::stream(5, &[]);
    let net = RouterNet::new(15, [32, 16], 0.2, &mut r);
    let xs: Vec<f64> = (0..15 * 40).map(|_| r.gen_range(-5.0..5.0)).collect();
    let a = net.probs_eval(&xs).unwrap();
    let b = net.probs_eval(&xs).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
}
