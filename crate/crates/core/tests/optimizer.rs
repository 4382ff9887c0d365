use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitprobe_core::dissect::SeedRange;
use unitprobe_core::intervene::InsertLevel;
use unitprobe_core::optimize::{optimize_alpha, topk_ablation_curve, AlphaConfig, AlphaProblem, Lambda, CURVE_SEEDS};
use unitprobe_core::world::{World, UNIT_LAYER};

fn short(concept_steps: usize, seed: u64) -> AlphaConfig {
    AlphaConfig {
        steps: concept_steps,
        seed,
        ..AlphaConfig::default()
    }
}

#[test]
fn cropped_samples_match_full_generator() {
    let world = World::default_world();
    let p = AlphaProblem::new(&world, UNIT_LAYER, "tree", &InsertLevel::Quantile99).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..6u64 {
        let z = world.z_for_seed(seed);
        let cells = [(rng.random_range(0..8), rng.random_range(0..8))];
        let alpha: Vec<f64> = (0..p.width()).map(|_| rng.random_range(0.0..1.0)).collect();
        let (cropped, _) = p.sample_effect(&alpha, &p.sample(&z, &cells).unwrap()).unwrap();
        let full = p.full_effect(&alpha, &z, &cells).unwrap();
        assert!((cropped - full).abs() < 1e-9, "seed {seed}: {cropped} vs {full}");
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let world = World::default_world();
    let eps = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (point, concept) in ["tree", "cloud", "door", "building", "sky"].iter().cycle().take(10).enumerate() {
        let p = AlphaProblem::new(&world, UNIT_LAYER, concept, &InsertLevel::Quantile99).unwrap();
        let batch: Vec<_> = (0..4).map(|i| p.draw(point as u64, "gradcheck", i).unwrap()).collect();
        let alpha: Vec<f64> = (0..p.width()).map(|_| rng.random_range(0.1..0.9)).collect();
        let lambda = 0.3;
        let (_, analytic) = p.objective(&alpha, &batch, lambda).unwrap();
        let numeric: Vec<f64> = (0..alpha.len())
            .map(|k| {
                let mut hi = alpha.clone();
                let mut lo = alpha.clone();
                hi[k] += eps;
                lo[k] -= eps;
                let f = |a: &[f64]| p.objective(a, &batch, lambda).unwrap().0;
                (f(&hi) - f(&lo)) / (2.0 * eps)
            })
            .collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < 1e-3, "point {point} ({concept}): relative error {}", diff / scale);
    }
}

#[test]
fn huge_lambda_drives_alpha_to_zero() {
    let world = World::default_world();
    let cfg = AlphaConfig {
        lambda: Lambda::Fixed { value: 1e6 },
        steps: 5,
        ..AlphaConfig::default()
    };
    let s = optimize_alpha(&world, UNIT_LAYER, "tree", &cfg).unwrap();
    assert!(s.alpha.iter().map(|a| a * a).sum::<f64>().sqrt() < 1e-3);
}

#[test]
fn same_seed_is_bit_identical() {
    let world = World::default_world();
    let a = optimize_alpha(&world, UNIT_LAYER, "cloud", &short(40, 3)).unwrap();
    let b = optimize_alpha(&world, UNIT_LAYER, "cloud", &short(40, 3)).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.alpha), bits(&b.alpha));
    assert_eq!(bits(&a.trajectory), bits(&b.trajectory));
    let c = optimize_alpha(&world, UNIT_LAYER, "cloud", &short(40, 4)).unwrap();
    assert_ne!(bits(&a.trajectory), bits(&c.trajectory));
}

#[test]
fn alpha_stays_in_unit_box_and_ranking_is_a_permutation() {
    let world = World::default_world();
    let s = optimize_alpha(&world, UNIT_LAYER, "door", &short(60, 0)).unwrap();
    assert!(s.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
    let mut r = s.ranking.clone();
    r.sort();
    assert_eq!(r, (0..64).collect::<Vec<_>>());
    assert_eq!(s.trajectory.len(), 60);
}

#[test]
fn surrogate_and_binary_effects_agree_in_sign() {
    let world = World::default_world();
    let s = optimize_alpha(&world, UNIT_LAYER, "tree", &short(200, 0)).unwrap();
    let p = AlphaProblem::new(&world, UNIT_LAYER, "tree", &InsertLevel::Quantile99).unwrap();
    let seeds = SeedRange::new(600_000_000, 100);
    let binary = p.binary_effect(&s.alpha, seeds).unwrap();
    let batch: Vec<_> = seeds.seeds().map(|i| p.draw(i, "alpha-eval", 0).unwrap()).collect();
    let (soft, _) = p.batch_effect(&s.alpha, &batch).unwrap();
    assert!(binary > 0.0 && soft > 0.0, "binary {binary}, surrogate {soft}");
}

#[test]
fn zero_coverage_concept_is_rejected() {
    let mut spec = unitprobe_core::world::WorldSpec::default_world();
    // a door that can never be present
    let door = spec.concept_index("door").unwrap();
    if let unitprobe_core::world::Placement::Rect { presence: Some(p), .. } = &mut spec.concepts[door].placement {
        p.probability = 0.0;
    }
    let world = World::new(spec).unwrap();
    assert!(optimize_alpha(&world, UNIT_LAYER, "door", &short(1, 0)).is_err());
}

#[test]
fn curve_endpoints() {
    let world = World::default_world();
    let ranking: Vec<usize> = (0..64).collect();
    let seeds = SeedRange::new(CURVE_SEEDS.start, 20);
    let c = topk_ablation_curve(&world, UNIT_LAYER, &ranking, "tree", &[0, 64], seeds).unwrap();
    assert_eq!(c[0].remaining, 1.0);
    assert!(c[1].remaining < 0.01);
    assert!(topk_ablation_curve(&world, UNIT_LAYER, &ranking, "tree", &[65], seeds).is_err());
}
