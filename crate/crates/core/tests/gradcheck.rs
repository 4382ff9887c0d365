use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitprobe_core::autodiff::{Graph, NodeId, OpKind};
use unitprobe_core::tensor::Tensor;

const EPS: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Three random layers over the allowed ops, then a scalar reduction. The
/// layer choices depend only on `seed`; `inputs` supplies the values of the
/// differentiable leaves so they can be perturbed.
fn build(seed: u64, inputs: &[Tensor]) -> (Graph, Vec<NodeId>, NodeId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let (x, alpha, y) = (ids[0], ids[1], ids[2]);
    let c = inputs[0].shape()[0];
    let mut cur = x;
    let mut side = y;
    for _ in 0..3 {
        cur = match rng.random_range(0..5) {
            0 => {
                let k = if rng.random_bool(0.5) { 3 } else { 1 };
                let w = random_tensor(&mut rng, &[c, c, k, k]);
                let b: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
                g.conv2d(cur, Arc::new(w), &b).unwrap()
            }
            1 => g.channel_scale(alpha, cur).unwrap(),
            2 => g.add(cur, side).unwrap(),
            3 => g.mul(cur, side).unwrap(),
            _ => {
                let s = g.value(cur).shape().to_vec();
                if s[1] < 8 {
                    let up = g.upsample(cur, s[1] * 2, s[2] * 2).unwrap();
                    side = g.upsample(side, s[1] * 2, s[2] * 2).unwrap();
                    up
                } else {
                    g.scale(cur, rng.random_range(-2.0..2.0)).unwrap()
                }
            }
        };
        if rng.random_bool(0.6) {
            cur = g.relu(cur).unwrap();
        }
    }
    let out = match rng.random_range(0..3) {
        0 => g.mean(cur).unwrap(),
        1 => {
            let n = g.value(cur).len();
            let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            g.masked_mean(cur, Arc::new(mask)).unwrap()
        }
        _ => {
            let n = g.value(cur).len();
            let w = random_tensor(&mut rng, &[3, n]);
            let a = g.affine(cur, Arc::new(w), &[0.1, -0.2, 0.3]).unwrap();
            let r = g.relu(a).unwrap();
            g.mean(r).unwrap()
        }
    };
    (g, ids, out)
}

/// Largest relative error between reverse-mode and central differences, or
/// `None` when every coordinate sat within EPS of a ReLU kink.
fn check(seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let c = rng.random_range(1..4);
    let (h, w) = (rng.random_range(2..5), rng.random_range(2..5));
    let inputs = vec![
        random_tensor(&mut rng, &[c, h, w]),
        random_tensor(&mut rng, &[c]),
        random_tensor(&mut rng, &[c, h, w]),
    ];
    let (g, ids, out) = build(seed, &inputs);
    let grads = g.backward(out).unwrap();
    let pattern = g.relu_pattern();
    let mut worst: Option<f64> = None;
    for (slot, id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(*id, inputs[slot].shape());
        for k in 0..inputs[slot].len() {
            let eval = |delta: f64| {
                let mut p = inputs.clone();
                p[slot].data_mut()[k] += delta;
                let (gp, _, op) = build(seed, &p);
                (gp.value(op).data()[0], gp.relu_pattern())
            };
            let (fp, pp) = eval(EPS);
            let (fm, pm) = eval(-EPS);
            if pp != pattern || pm != pattern {
                continue;
            }
            let numeric = (fp - fm) / (2.0 * EPS);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = Some(worst.map_or(rel, |w: f64| w.max(rel)));
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn reverse_mode_matches_central_differences(seed in any::<u64>()) {
        if let Some(err) = check(seed) {
            prop_assert!(err < 1e-4, "relative error {err}");
        }
    }
}

#[test]
fn fixed_seed_graphs_pass() {
    let mut checked = 0;
    for seed in 0..200 {
        if check(seed).is_some_and(|e| e < 1e-4) {
            checked += 1;
        }
    }
    assert!(checked >= 190, "only {checked} of 200 graphs checked cleanly");
}

#[test]
fn unknown_op_name_is_an_error() {
    assert!("conv3d".parse::<OpKind>().is_err());
    for k in OpKind::ALL {
        assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
    }
}

#[test]
fn non_scalar_seed_rejected() {
    let mut g = Graph::new();
    let a = g.input(Tensor::full(&[2], 1.0));
    assert!(g.backward(a).is_err());
}
