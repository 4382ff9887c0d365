//! Forcing units off or on at chosen featuremap locations, average causal
//! effect, and per-layer effect tracing.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dissect::SeedRange;
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::segment::{class_coverage, expand_parts, segment, SegmentationSet};
use crate::stats::mean;
use crate::tensor::{self, BinaryMask};
use crate::world::{Edit, ForwardTrace, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ablate,
    Insert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub layer: usize,
    pub units: Vec<usize>,
    /// `(row, col)` featuremap cells.
    pub locations: Vec<(usize, usize)>,
    pub mode: Mode,
    /// Per-unit insertion level, same order as `units`; ignored when
    /// ablating.
    pub levels: Vec<f64>,
    /// Interpolation weight toward the forced value, in `[0, 1]`.
    pub strength: f64,
}

impl InterventionSpec {
    pub fn ablate(layer: usize, units: Vec<usize>, locations: Vec<(usize, usize)>) -> Self {
        Self {
            layer,
            units,
            locations,
            mode: Mode::Ablate,
            levels: Vec::new(),
            strength: 1.0,
        }
    }

    /// Insert with each unit's level taken from a full-layer table.
    pub fn insert(layer: usize, units: Vec<usize>, locations: Vec<(usize, usize)>, table: &[f64]) -> Self {
        let levels = units.iter().map(|&u| table.get(u).copied().unwrap_or(0.0)).collect();
        Self {
            layer,
            units,
            locations,
            mode: Mode::Insert,
            levels,
            strength: 1.0,
        }
    }

    pub fn validate(&self, world: &World) -> Result<()> {
        let shape = world.layer_shape(self.layer)?;
        if self.units.is_empty() {
            return invalid("intervention needs at least one unit");
        }
        if self.locations.is_empty() {
            return invalid("intervention needs at least one location");
        }
        if let Some(u) = self.units.iter().find(|&&u| u >= shape[0]) {
            return invalid(format!("unit {u} outside layer width {}", shape[0]));
        }
        if let Some(p) = self.locations.iter().find(|p| p.0 >= shape[1] || p.1 >= shape[2]) {
            return invalid(format!("location {p:?} outside {}x{} featuremap", shape[1], shape[2]));
        }
        if self.mode == Mode::Insert && self.levels.len() != self.units.len() {
            return invalid("one insertion level per unit required");
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return invalid(format!("strength {} outside [0, 1]", self.strength));
        }
        Ok(())
    }

    pub fn to_edit(&self, world: &World) -> Result<Edit> {
        self.validate(world)?;
        let shape = world.layer_shape(self.layer)?;
        let mut cells = vec![false; shape[1] * shape[2]];
        for &(i, j) in &self.locations {
            cells[i * shape[2] + j] = true;
        }
        Ok(Edit::Blend {
            layer: self.layer,
            units: self.units.clone(),
            cells,
            target: match self.mode {
                Mode::Ablate => vec![0.0; self.units.len()],
                Mode::Insert => self.levels.clone(),
            },
            strength: self.strength,
        })
    }
}

/// Every cell of a layer.
pub fn all_locations(world: &World, layer: usize) -> Result<Vec<(usize, usize)>> {
    let s = world.layer_shape(layer)?;
    Ok((0..s[1]).flat_map(|i| (0..s[2]).map(move |j| (i, j))).collect())
}

pub fn apply(world: &World, z: &[f64], spec: &InterventionSpec) -> Result<ForwardTrace> {
    world.forward(z, &[spec.to_edit(world)?])
}

/// How the forced value for insertion is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InsertLevel {
    /// Each unit's 99% activation quantile.
    Quantile99,
    /// Each unit's mean activation over cells where the concept covers at
    /// least half of the cell's footprint.
    MeanAtConcept,
    Constant { value: f64 },
    /// Leave activations as they are (a no-op insertion).
    Current,
}

/// Seeds for level tables and class coverage, kept apart from ACE seeds.
pub const LEVEL_SEEDS: SeedRange = SeedRange {
    start: 900_000_000,
    count: 200,
};

/// Per-unit insertion levels for a whole layer. `None` for `Current`.
pub fn insertion_levels(world: &World, layer: usize, level: &InsertLevel, concept: usize) -> Result<Option<Vec<f64>>> {
    let shape = world.layer_shape(layer)?.to_vec();
    match level {
        InsertLevel::Current => Ok(None),
        InsertLevel::Constant { value } => Ok(Some(vec![*value; shape[0]])),
        InsertLevel::Quantile99 => Ok(Some(
            world
                .unit_percentiles(layer, LEVEL_SEEDS.count, LEVEL_SEEDS.start)?
                .iter()
                .map(|p| p[2])
                .collect(),
        )),
        InsertLevel::MeanAtConcept => {
            let (h, w) = (shape[1], shape[2]);
            let mut sums = vec![0.0; shape[0]];
            let mut n = 0usize;
            for s in LEVEL_SEEDS.seeds() {
                let t = world.forward(&world.z_for_seed(s), &[])?;
                let segs = segment(&t.image, world.spec())?;
                let frac = cell_fractions(world, layer, &segs.masks[concept])?;
                let r = t.layer(layer);
                for cell in (0..h * w).filter(|&c| frac[c] >= 0.5) {
                    n += 1;
                    for (u, acc) in sums.iter_mut().enumerate() {
                        *acc += r.data()[u * h * w + cell];
                    }
                }
            }
            if n == 0 {
                return Err(Error::ZeroCoverage(world.spec().concepts[concept].name.clone()));
            }
            Ok(Some(sums.into_iter().map(|s| s / n as f64).collect()))
        }
    }
}

/// Fraction of each cell's pixel footprint covered by `mask`.
pub fn cell_fractions(world: &World, layer: usize, mask: &BinaryMask) -> Result<Vec<f64>> {
    let shape = world.layer_shape(layer)?;
    let (h, w) = (shape[1], shape[2]);
    let (oh, ow) = (mask.height(), mask.width());
    let mut hit = vec![0usize; h * w];
    let mut all = vec![0usize; h * w];
    for i in 0..oh {
        let si = tensor::nearest_source(i, h, oh);
        for j in 0..ow {
            let cell = si * w + tensor::nearest_source(j, w, ow);
            all[cell] += 1;
            hit[cell] += mask.get(i, j) as usize;
        }
    }
    Ok(hit
        .iter()
        .zip(&all)
        .map(|(&a, &b)| if b == 0 { 0.0 } else { a as f64 / b as f64 })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocationPolicy {
    /// One uniformly drawn cell per sample.
    Point,
    /// The square of cells within `radius` of one drawn cell.
    Region { radius: usize },
    /// Every cell of the layer.
    Everywhere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AceConfig {
    pub samples: SeedRange,
    pub policy: LocationPolicy,
    pub insert_level: InsertLevel,
    /// Weight of the ablation arm; 0 leaves it unedited.
    pub ablate_strength: f64,
    /// Root for the location streams.
    pub location_seed: u64,
}

impl Default for AceConfig {
    fn default() -> Self {
        Self {
            samples: SeedRange::new(100_000_000, 500),
            policy: LocationPolicy::Point,
            insert_level: InsertLevel::Quantile99,
            ablate_strength: 1.0,
            location_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AceResult {
    pub concept: String,
    pub units: Vec<usize>,
    pub layer: usize,
    pub policy: LocationPolicy,
    pub context: Option<String>,
    /// Mean presence of the concept inside the intervened footprint, insert arm.
    pub insert_presence: f64,
    /// Same for the ablate arm.
    pub ablate_presence: f64,
    /// Class coverage used for normalization.
    pub coverage: f64,
    pub raw_difference: f64,
    /// `raw_difference / coverage`; `None` when coverage is zero or no
    /// sample qualified.
    pub ace: Option<f64>,
    pub samples: usize,
    /// Samples that contributed (conditional runs skip samples without a
    /// qualifying location).
    pub used_samples: usize,
    pub undefined_normalization: bool,
    pub empty: bool,
}

/// Mean pixel coverage of each base concept over the level seeds.
pub fn base_coverage(world: &World) -> Result<Vec<f64>> {
    let segs: Vec<SegmentationSet> = LEVEL_SEEDS
        .seeds()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&s| segment(&world.forward(&world.z_for_seed(s), &[])?.image, world.spec()))
        .collect::<Result<_>>()?;
    class_coverage(&segs)
}

fn draw_locations(
    world: &World,
    layer: usize,
    policy: LocationPolicy,
    allowed: Option<&[bool]>,
    rng: &mut impl Rng,
) -> Result<Option<Vec<(usize, usize)>>> {
    let shape = world.layer_shape(layer)?;
    let (h, w) = (shape[1], shape[2]);
    if policy == LocationPolicy::Everywhere {
        return Ok(Some(all_locations(world, layer)?));
    }
    let candidates: Vec<usize> = (0..h * w).filter(|&c| allowed.is_none_or(|a| a[c])).collect();
    if candidates.is_empty() {
        return Ok(None);
    }
    let centre = candidates[rng.random_range(0..candidates.len())];
    let (ci, cj) = (centre / w, centre % w);
    let r = match policy {
        LocationPolicy::Region { radius } => radius,
        _ => 0,
    };
    let mut locs = Vec::new();
    for i in ci.saturating_sub(r)..=(ci + r).min(h - 1) {
        for j in cj.saturating_sub(r)..=(cj + r).min(w - 1) {
            if allowed.is_none_or(|a| a[i * w + j]) {
                locs.push((i, j));
            }
        }
    }
    Ok(Some(locs))
}

fn presence(segs: &SegmentationSet, concept: usize, footprint: &BinaryMask) -> f64 {
    let n = footprint.count();
    if n == 0 {
        return 0.0;
    }
    let hit = segs.masks[concept].and(footprint).map(|m| m.count()).unwrap_or(0);
    hit as f64 / n as f64
}

/// Paired insert/ablate estimate of a unit set's effect on one concept.
pub fn ace(world: &World, layer: usize, units: &[usize], concept: &str, cfg: &AceConfig) -> Result<AceResult> {
    ace_inner(world, layer, units, concept, None, cfg)
}

/// As [`ace`], restricted to locations whose pixel footprint lies entirely
/// inside `context` in the unedited segmentation.
pub fn conditional_ace(
    world: &World,
    layer: usize,
    units: &[usize],
    concept: &str,
    context: &str,
    cfg: &AceConfig,
) -> Result<AceResult> {
    ace_inner(world, layer, units, concept, Some(context), cfg)
}

fn ace_inner(
    world: &World,
    layer: usize,
    units: &[usize],
    concept: &str,
    context: Option<&str>,
    cfg: &AceConfig,
) -> Result<AceResult> {
    let ci = world.spec().concept_index(concept)?;
    if cfg.samples.count == 0 {
        return invalid("ACE needs at least one sample");
    }
    if context.is_some() && cfg.policy == LocationPolicy::Everywhere {
        return invalid("conditional ACE needs a point or region location policy");
    }
    let levels = insertion_levels(world, layer, &cfg.insert_level, ci)?;
    let coverage = base_coverage(world)?[ci];
    let seeds: Vec<u64> = cfg.samples.seeds().collect();

    let per_sample: Vec<Option<(f64, f64)>> = seeds
        .par_iter()
        .map(|&seed| {
            let z = world.z_for_seed(seed);
            let base = world.forward(&z, &[])?;
            let allowed = match context {
                Some(name) => {
                    let segs = expand_parts(&segment(&base.image, world.spec())?, world.spec())?;
                    let frac = cell_fractions(world, layer, segs.mask(name)?)?;
                    Some(frac.iter().map(|&f| f >= 1.0).collect::<Vec<bool>>())
                }
                None => None,
            };
            let mut loc_rng = rng::stream(cfg.location_seed, "ace-locations", seed);
            let Some(locs) = draw_locations(world, layer, cfg.policy, allowed.as_deref(), &mut loc_rng)? else {
                return Ok(None);
            };
            let shape = world.layer_shape(layer)?;
            let cells = BinaryMask::from_fn(shape[1], shape[2], |i, j| locs.contains(&(i, j)));
            let footprint = world.footprint(layer, &cells)?;

            let inserted = match &levels {
                Some(table) => {
                    let spec = InterventionSpec::insert(layer, units.to_vec(), locs.clone(), table);
                    world.forward(&z, &[spec.to_edit(world)?])?
                }
                None => base.clone(),
            };
            let mut abl = InterventionSpec::ablate(layer, units.to_vec(), locs);
            abl.strength = cfg.ablate_strength;
            let ablated = world.forward(&z, &[abl.to_edit(world)?])?;
            let si = segment(&inserted.image, world.spec())?;
            let sa = segment(&ablated.image, world.spec())?;
            Ok(Some((presence(&si, ci, &footprint), presence(&sa, ci, &footprint))))
        })
        .collect::<Result<_>>()?;

    let used: Vec<(f64, f64)> = per_sample.into_iter().flatten().collect();
    let ins = mean(&used.iter().map(|p| p.0).collect::<Vec<_>>());
    let abl = mean(&used.iter().map(|p| p.1).collect::<Vec<_>>());
    let raw = ins - abl;
    let empty = used.is_empty();
    Ok(AceResult {
        concept: concept.to_string(),
        units: units.to_vec(),
        layer,
        policy: cfg.policy,
        context: context.map(str::to_string),
        insert_presence: ins,
        ablate_presence: abl,
        coverage,
        raw_difference: raw,
        ace: (coverage > 0.0 && !empty).then(|| raw / coverage),
        samples: seeds.len(),
        used_samples: used.len(),
        undefined_normalization: coverage <= 0.0,
        empty,
    })
}

/// Mean absolute activation per channel for every layer, over `seeds`.
pub fn channel_magnitudes(world: &World, seeds: SeedRange) -> Result<Vec<Vec<f64>>> {
    let mut sums: Vec<Vec<f64>> = (1..=crate::world::NUM_LAYERS)
        .map(|l| Ok(vec![0.0; world.layer_shape(l)?[0]]))
        .collect::<Result<_>>()?;
    for s in seeds.seeds() {
        let t = world.forward(&world.z_for_seed(s), &[])?;
        for (l, acc) in sums.iter_mut().enumerate() {
            let r = &t.layers[l];
            for (c, a) in acc.iter_mut().enumerate() {
                *a += r.channel_slice(c).iter().map(|v| v.abs()).sum::<f64>() / r.channel_slice(c).len() as f64;
            }
        }
    }
    let n = seeds.count.max(1) as f64;
    Ok(sums.into_iter().map(|v| v.into_iter().map(|x| x / n).collect()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerChange {
    pub layer: usize,
    /// Mean over channels and locations of `|edited - original| / magnitude`.
    pub mean_change: f64,
    /// Channels with zero reference magnitude, left out of the mean.
    pub excluded_channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub profile: Vec<LayerChange>,
    /// Per-location normalized change at the last layer, row-major.
    pub heatmap: Vec<f64>,
    pub heatmap_height: usize,
    pub heatmap_width: usize,
}

/// Normalized change of every layer from the edited one onward.
pub fn layer_trace(world: &World, z: &[f64], spec: &InterventionSpec, magnitudes: &[Vec<f64>]) -> Result<LayerTrace> {
    let base = world.forward(z, &[])?;
    let edited = apply(world, z, spec)?;
    let mut profile = Vec::new();
    let mut heatmap = Vec::new();
    let (mut hh, mut hw) = (0, 0);
    for l in spec.layer..=crate::world::NUM_LAYERS {
        let (a, b) = (base.layer(l), edited.layer(l));
        let (c, h, w) = a.dims3()?;
        let mags = &magnitudes[l - 1];
        let excluded: Vec<usize> = (0..c).filter(|&k| mags[k] <= 0.0).collect();
        let mut per_loc = vec![0.0; h * w];
        let kept = c - excluded.len();
        for k in (0..c).filter(|k| !excluded.contains(k)) {
            for (p, acc) in per_loc.iter_mut().enumerate() {
                *acc += (b.data()[k * h * w + p] - a.data()[k * h * w + p]).abs() / mags[k];
            }
        }
        if kept > 0 {
            per_loc.iter_mut().for_each(|v| *v /= kept as f64);
        }
        profile.push(LayerChange {
            layer: l,
            mean_change: mean(&per_loc),
            excluded_channels: excluded,
        });
        if l == crate::world::NUM_LAYERS {
            heatmap = per_loc;
            (hh, hw) = (h, w);
        }
    }
    Ok(LayerTrace {
        profile,
        heatmap,
        heatmap_height: hh,
        heatmap_width: hw,
    })
}

/// Per-unit `(50%, 90%, 99%)` quantiles over the level seeds.
pub fn level_table(world: &World, layer: usize) -> Result<Vec<[f64; 3]>> {
    world.unit_percentiles(layer, LEVEL_SEEDS.count, LEVEL_SEEDS.start)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sets_rejected() {
        let w = World::default_world();
        let z = w.z_for_seed(0);
        assert!(apply(&w, &z, &InterventionSpec::ablate(4, (0..64).collect(), vec![])).is_err());
        assert!(apply(&w, &z, &InterventionSpec::ablate(4, vec![], vec![(0, 0)])).is_err());
        assert!(apply(&w, &z, &InterventionSpec::ablate(4, vec![64], vec![(0, 0)])).is_err());
        assert!(apply(&w, &z, &InterventionSpec::ablate(4, vec![1], vec![(8, 0)])).is_err());
    }

    #[test]
    fn ablation_is_idempotent() {
        let w = World::default_world();
        let z = w.z_for_seed(3);
        let spec = InterventionSpec::ablate(4, (40..46).collect(), all_locations(&w, 4).unwrap());
        let edit = spec.to_edit(&w).unwrap();
        let once = w.forward(&z, std::slice::from_ref(&edit)).unwrap();
        let twice = w.forward(&z, &[edit.clone(), edit]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn cell_fractions_of_full_and_empty_masks() {
        let w = World::default_world();
        assert!(cell_fractions(&w, 4, &BinaryMask::from_fn(32, 32, |_, _| true))
            .unwrap()
            .iter()
            .all(|&f| f == 1.0));
        let half = cell_fractions(&w, 4, &BinaryMask::from_fn(32, 32, |i, _| i % 4 < 2)).unwrap();
        assert!(half.iter().all(|&f| f == 0.5));
    }
}
