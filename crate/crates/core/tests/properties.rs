use proptest::prelude::*;
use proptest::strategy::ValueTree;
use unitprobe_core::dissect::mask_iou;
use unitprobe_core::quality::{frechet_distance, QualityStats};
use unitprobe_core::segment::{connected_components, part_masks, segment};
use unitprobe_core::tensor::{downsample_stride, threshold, upsample_nearest, BinaryMask, Tensor};
use unitprobe_core::world::World;

fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w).prop_map(move |d| BinaryMask::new(h, w, d).unwrap())
    })
}

fn mask_pair(max: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(any::<bool>(), h * w),
            prop::collection::vec(any::<bool>(), h * w),
        )
            .prop_map(move |(a, b)| (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap()))
    })
}

/// Components by iterative flood fill, as sorted pixel lists.
fn flood_fill(m: &BinaryMask) -> Vec<Vec<usize>> {
    let (h, w) = (m.height(), m.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !m.data()[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (i, j) = (p / w, p % w);
            let mut push = |q: usize| {
                if m.data()[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if i > 0 {
                push(p - w);
            }
            if i + 1 < h {
                push(p + w);
            }
            if j > 0 {
                push(p - 1);
            }
            if j + 1 < w {
                push(p + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn upsample_then_stride_recovers(c in 1usize..3, h in 1usize..5, w in 1usize..5, k in 1usize..4,
                                     data in prop::collection::vec(-5.0f64..5.0, 32)) {
        let t = Tensor::new(vec![c, h, w], data[..c * h * w].to_vec()).unwrap();
        let up = upsample_nearest(&t, h * k, w * k).unwrap();
        prop_assert_eq!(downsample_stride(&up, k).unwrap(), t);
    }

    #[test]
    fn threshold_is_monotone(data in prop::collection::vec(-3.0f64..3.0, 16), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let t = Tensor::new(vec![4, 4], data).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        let (m_lo, m_hi) = (threshold(&t, lo).unwrap(), threshold(&t, hi).unwrap());
        for (x, y) in m_lo.data().iter().zip(m_hi.data()) {
            prop_assert!(!*y || *x);
        }
    }

    #[test]
    fn iou_is_symmetric((a, b) in mask_pair(12)) {
        let ab = mask_iou(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        let ba = mask_iou(std::slice::from_ref(&b), std::slice::from_ref(&a)).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn part_masks_partition_parent(m in mask_strategy(14)) {
        let [t, b, l, r] = part_masks(&m);
        for p in 0..m.data().len() {
            let parent = m.data()[p];
            prop_assert_eq!(t.data()[p] as u8 + b.data()[p] as u8, parent as u8);
            prop_assert_eq!(l.data()[p] as u8 + r.data()[p] as u8, parent as u8);
        }
    }

    #[test]
    fn components_match_flood_fill(m in mask_strategy(16)) {
        let mut ours: Vec<Vec<usize>> = connected_components(&m).into_iter().map(|c| c.pixels).collect();
        let mut oracle = flood_fill(&m);
        ours.sort();
        oracle.sort();
        prop_assert_eq!(ours, oracle);
    }

    #[test]
    fn frechet_is_symmetric(m in 1usize..5, seed in prop::collection::vec(-1.0f64..1.0, 60)) {
        // covariances as A A^T from random factors
        let cov = |off: usize| {
            let a = &seed[off..off + m * m];
            let mut c = vec![0.0; m * m];
            for i in 0..m {
                for j in 0..m {
                    c[i * m + j] = (0..m).map(|k| a[i * m + k] * a[j * m + k]).sum();
                }
            }
            c
        };
        let x = QualityStats::from_moments(seed[50..50 + m].to_vec(), cov(0)).unwrap();
        let y = QualityStats::from_moments(seed[55..55 + m].to_vec(), cov(25)).unwrap();
        let (dxy, dyx) = (frechet_distance(&x, &y).unwrap().distance, frechet_distance(&y, &x).unwrap().distance);
        prop_assert!(dxy >= 0.0);
        prop_assert!((dxy - dyx).abs() < 1e-9, "{} vs {}", dxy, dyx);
    }

    #[test]
    fn frechet_diagonal_closed_form(a in prop::collection::vec(0.0f64..4.0, 4), b in prop::collection::vec(0.0f64..4.0, 4),
                                    mu in prop::collection::vec(-1.0f64..1.0, 8)) {
        let diag = |v: &[f64]| {
            let mut c = vec![0.0; 16];
            for i in 0..4 {
                c[i * 5] = v[i];
            }
            c
        };
        let x = QualityStats::from_moments(mu[..4].to_vec(), diag(&a)).unwrap();
        let y = QualityStats::from_moments(mu[4..].to_vec(), diag(&b)).unwrap();
        let expected: f64 = (0..4)
            .map(|i| (mu[i] - mu[4 + i]).powi(2) + (a[i].sqrt() - b[i].sqrt()).powi(2))
            .sum();
        prop_assert!((frechet_distance(&x, &y).unwrap().distance - expected).abs() < 1e-9);
    }
}

#[test]
fn iou_matches_pixel_count_oracle_on_50_pairs() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    for _ in 0..50 {
        let (a, b) = mask_pair(16).new_tree(&mut runner).unwrap().current();
        let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
        let union = a.data().iter().zip(b.data()).filter(|(x, y)| **x || **y).count();
        let expected = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        let got = mask_iou(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        assert_eq!(got, expected);
    }
}

#[test]
fn frechet_worked_examples() {
    let x = QualityStats::from_moments(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 4.0]).unwrap();
    let y = QualityStats::from_moments(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 1.0]).unwrap();
    assert!((frechet_distance(&x, &y).unwrap().distance - 2.0).abs() < 1e-9);
    let p = QualityStats::from_moments(vec![0.25], vec![3.0]).unwrap();
    let q = QualityStats::from_moments(vec![-0.5], vec![3.0]).unwrap();
    assert!((frechet_distance(&p, &q).unwrap().distance - 0.5625).abs() < 1e-9);
}

#[test]
fn segmenter_matches_painted_labels() {
    let world = World::default_world();
    for seed in 0..40 {
        let t = world.forward(&world.z_for_seed(seed), &[]).unwrap();
        let segs = segment(&t.image, world.spec()).unwrap();
        for c in 0..world.num_concepts() {
            assert_eq!(segs.masks[c], t.visible_mask(c), "seed {seed} concept {c}");
        }
    }
}
