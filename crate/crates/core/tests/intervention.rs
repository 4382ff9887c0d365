use unitprobe_core::dissect::SeedRange;
use unitprobe_core::intervene::{
    ace, all_locations, apply, channel_magnitudes, conditional_ace, insertion_levels, layer_trace, AceConfig, InsertLevel,
    InterventionSpec, LocationPolicy,
};
use unitprobe_core::segment::segment;
use unitprobe_core::tensor::BinaryMask;
use unitprobe_core::world::{Placement, UnitRole, World, WorldSpec, NUM_LAYERS, UNIT_LAYER};

fn causal(world: &World, concept: &str) -> Vec<usize> {
    world.spec().concepts[world.spec().concept_index(concept).unwrap()].causal_units()
}

fn distractors(world: &World) -> Vec<usize> {
    world
        .roles()
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r, UnitRole::Distractor { .. }))
        .map(|(u, _)| u)
        .collect()
}

fn cfg(count: usize) -> AceConfig {
    AceConfig {
        samples: SeedRange::new(100_000_000, count),
        ..AceConfig::default()
    }
}

#[test]
fn ablating_planted_units_everywhere_removes_the_concept() {
    let world = World::default_world();
    let all = all_locations(&world, UNIT_LAYER).unwrap();
    for (ci, c) in world.spec().concepts.iter().enumerate() {
        let spec = InterventionSpec::ablate(UNIT_LAYER, c.causal_units(), all.clone());
        let (mut before, mut after) = (0, 0);
        for seed in 0..40 {
            let z = world.z_for_seed(seed);
            before += segment(&world.forward(&z, &[]).unwrap().image, world.spec()).unwrap().masks[ci].count();
            after += segment(&apply(&world, &z, &spec).unwrap().image, world.spec()).unwrap().masks[ci].count();
        }
        assert!(before > 0);
        assert!((after as f64) <= 0.01 * before as f64, "{}: {after} of {before} pixels left", c.name);
    }
}

#[test]
fn single_location_insertion_stays_in_its_receptive_field() {
    let world = World::default_world();
    let tree = world.spec().concept_index("tree").unwrap();
    let table = insertion_levels(&world, UNIT_LAYER, &InsertLevel::Quantile99, tree).unwrap().unwrap();
    for (seed, cell) in [(1, (5, 2)), (2, (6, 6)), (3, (4, 4))] {
        let z = world.z_for_seed(seed);
        let spec = InterventionSpec::insert(UNIT_LAYER, causal(&world, "tree"), vec![cell], &table);
        let base = world.forward(&z, &[]).unwrap();
        let edited = apply(&world, &z, &spec).unwrap();
        let rf = world
            .receptive_field(UNIT_LAYER, &BinaryMask::from_fn(8, 8, |i, j| (i, j) == cell))
            .unwrap();
        let before = segment(&base.image, world.spec()).unwrap().masks[tree].clone();
        let after = segment(&edited.image, world.spec()).unwrap().masks[tree].clone();
        for (p, (&a, &b)) in after.data().iter().zip(before.data()).enumerate() {
            if a && !b {
                assert!(rf.data()[p], "new tree pixel {p} outside the receptive field");
            }
        }
        for (p, (x, y)) in base.image.data().chunks_exact(3).zip(edited.image.data().chunks_exact(3)).enumerate() {
            if x != y {
                assert!(rf.data()[p]);
            }
        }
    }
}

#[test]
fn distractors_have_no_effect_while_causal_units_do() {
    let world = World::default_world();
    for d in distractors(&world) {
        let UnitRole::Distractor { concept } = world.roles()[d].clone() else { unreachable!() };
        let name = concept;
        let r = ace(&world, UNIT_LAYER, &[d], &name, &cfg(500)).unwrap();
        assert!(r.ace.unwrap().abs() < 0.02, "distractor {d}: {:?}", r.ace);
        let c = ace(&world, UNIT_LAYER, &causal(&world, &name), &name, &cfg(500)).unwrap();
        assert!(c.ace.unwrap() > 0.5, "{name}: {:?}", c.ace);
    }
}

#[test]
fn no_op_intervention_has_exactly_zero_effect() {
    let world = World::default_world();
    let cfg = AceConfig {
        insert_level: InsertLevel::Current,
        ablate_strength: 0.0,
        ..cfg(50)
    };
    let r = ace(&world, UNIT_LAYER, &causal(&world, "tree"), "tree", &cfg).unwrap();
    assert_eq!(r.raw_difference, 0.0);
    assert_eq!(r.ace, Some(0.0));
}

#[test]
fn subset_never_beats_the_planted_set() {
    let world = World::default_world();
    let units = causal(&world, "cloud");
    let full = ace(&world, UNIT_LAYER, &units, "cloud", &cfg(300)).unwrap().ace.unwrap();
    let part = ace(&world, UNIT_LAYER, &units[..3], "cloud", &cfg(300)).unwrap().ace.unwrap();
    assert!(part <= full, "subset {part} vs full {full}");
}

#[test]
fn absent_concept_flags_undefined_normalization() {
    let mut spec = WorldSpec::default_world();
    let door = spec.concept_index("door").unwrap();
    if let Placement::Rect { presence: Some(p), .. } = &mut spec.concepts[door].placement {
        p.probability = 0.0;
    }
    let world = World::new(spec).unwrap();
    let r = ace(&world, UNIT_LAYER, &causal(&world, "door"), "door", &cfg(20)).unwrap();
    assert!(r.undefined_normalization);
    assert_eq!(r.ace, None);
    let c = conditional_ace(&world, UNIT_LAYER, &causal(&world, "tree"), "tree", "door", &cfg(20)).unwrap();
    assert!(c.empty);
    assert_eq!(c.used_samples, 0);
}

#[test]
fn veto_blocks_door_on_sky_but_not_on_building() {
    let world = World::default_world();
    let units = causal(&world, "door");
    let sky = conditional_ace(&world, UNIT_LAYER, &units, "door", "sky", &cfg(300)).unwrap();
    let building = conditional_ace(&world, UNIT_LAYER, &units, "door", "building", &cfg(300)).unwrap();
    assert!(sky.ace.unwrap() < 0.05, "sky {:?}", sky.ace);
    assert!(building.ace.unwrap() > 0.3, "building {:?}", building.ace);
}

#[test]
fn everywhere_policy_runs() {
    let world = World::default_world();
    let cfg = AceConfig {
        policy: LocationPolicy::Everywhere,
        ..cfg(30)
    };
    let r = ace(&world, UNIT_LAYER, &causal(&world, "tree"), "tree", &cfg).unwrap();
    assert!(r.ace.unwrap() > 0.5);
    assert!(conditional_ace(&world, UNIT_LAYER, &[0], "tree", "sky", &cfg).is_err());
}

#[test]
fn layer_traces() {
    let world = World::default_world();
    let mags = channel_magnitudes(&world, SeedRange::new(0, 20)).unwrap();
    let z = world.z_for_seed(7);

    let mut noop = InterventionSpec::ablate(UNIT_LAYER, vec![40, 41], vec![(5, 5)]);
    noop.strength = 0.0;
    let t = layer_trace(&world, &z, &noop, &mags).unwrap();
    assert!(t.profile.iter().all(|c| c.mean_change == 0.0));

    let spec = InterventionSpec::ablate(UNIT_LAYER, distractors(&world), all_locations(&world, UNIT_LAYER).unwrap());
    let t = layer_trace(&world, &z, &spec, &mags).unwrap();
    assert!(t.profile[0].mean_change > 0.0);
    assert!(t.profile[1..].iter().all(|c| c.mean_change == 0.0));
    assert_eq!(t.profile.len(), NUM_LAYERS - UNIT_LAYER + 1);
    assert_eq!(t.heatmap.len(), t.heatmap_height * t.heatmap_width);
}

#[test]
fn door_trace_on_building_outweighs_sky() {
    let world = World::default_world();
    let door = world.spec().concept_index("door").unwrap();
    let table = insertion_levels(&world, UNIT_LAYER, &InsertLevel::Quantile99, door).unwrap().unwrap();
    let mags = channel_magnitudes(&world, SeedRange::new(0, 20)).unwrap();
    let units = causal(&world, "door");
    let (mut on_building, mut on_sky) = (0.0, 0.0);
    let mut pairs = 0;
    for seed in 0..60 {
        let z = world.z_for_seed(seed);
        let segs = segment(&world.forward(&z, &[]).unwrap().image, world.spec()).unwrap();
        let frac = |name: &str| unitprobe_core::intervene::cell_fractions(&world, UNIT_LAYER, segs.mask(name).unwrap()).unwrap();
        let (b, s) = (frac("building"), frac("sky"));
        let (Some(bc), Some(sc)) = (b.iter().position(|&f| f >= 1.0), s.iter().position(|&f| f >= 1.0)) else {
            continue;
        };
        let final_change = |cell: usize| {
            let spec = InterventionSpec::insert(UNIT_LAYER, units.clone(), vec![(cell / 8, cell % 8)], &table);
            layer_trace(&world, &z, &spec, &mags).unwrap().profile.last().unwrap().mean_change
        };
        on_building += final_change(bc);
        on_sky += final_change(sc);
        pairs += 1;
    }
    assert!(pairs >= 5);
    assert!(on_building > on_sky, "building {on_building}, sky {on_sky}");
}
