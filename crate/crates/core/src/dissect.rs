//! Unit/concept agreement: IQR-chosen thresholds on one seed range, IoU on
//! another, best label per unit.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::segment::{expand_parts, expanded_names, segment};
use crate::tensor::{self, BinaryMask, Tensor};
use crate::world::World;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Quantile levels tried as thresholds: 1%, 2%, ..., 99%.
pub fn quantile_grid() -> Vec<f64> {
    (1..=99).map(|k| k as f64 / 100.0).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Contingency {
    pub both: f64,
    pub a_only: f64,
    pub b_only: f64,
    pub neither: f64,
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

impl Contingency {
    pub fn from_counts(n_a: f64, n_b: f64, n_ab: f64, total: f64) -> Self {
        Self {
            both: n_ab,
            a_only: n_a - n_ab,
            b_only: n_b - n_ab,
            neither: total - n_a - n_b + n_ab,
        }
    }

    fn total(&self) -> f64 {
        self.both + self.a_only + self.b_only + self.neither
    }

    /// Joint entropy `H(A, B)` in nats.
    pub fn joint_entropy(&self) -> f64 {
        let n = self.total();
        if n <= 0.0 {
            return 0.0;
        }
        -[self.both, self.a_only, self.b_only, self.neither]
            .iter()
            .map(|&c| plogp(c / n))
            .sum::<f64>()
    }

    /// Mutual information `I(A; B)` in nats.
    pub fn mutual_information(&self) -> f64 {
        let n = self.total();
        if n <= 0.0 {
            return 0.0;
        }
        let pa = (self.both + self.a_only) / n;
        let pb = (self.both + self.b_only) / n;
        let ha = -(plogp(pa) + plogp(1.0 - pa));
        let hb = -(plogp(pb) + plogp(1.0 - pb));
        (ha + hb - self.joint_entropy()).max(0.0)
    }

    /// `I / H`, or `None` when the joint entropy is zero.
    pub fn iqr(&self) -> Option<f64> {
        let h = self.joint_entropy();
        (h > 0.0).then(|| (self.mutual_information() / h).clamp(0.0, 1.0))
    }

    pub fn iou(&self) -> f64 {
        let union = self.both + self.a_only + self.b_only;
        if union > 0.0 {
            self.both / union
        } else {
            0.0
        }
    }
}

/// Outcome of the threshold search for one unit/class pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub quantile: f64,
    pub iqr: f64,
    /// Joint entropy was zero at every candidate.
    pub degenerate: bool,
}

/// Threshold search over per-image activation maps (already at mask
/// resolution) and masks.
pub fn iqr_threshold(activations: &[Vec<f64>], masks: &[BinaryMask]) -> Result<ThresholdChoice> {
    let pool = Pool::from_pixels(activations, &[masks.to_vec()])?;
    Ok(pool.choose_thresholds(0)[0])
}

/// Pooled IoU of `activation > t` against the masks over all images.
pub fn iou(activations: &[Vec<f64>], masks: &[BinaryMask], t: f64) -> Result<f64> {
    if activations.len() != masks.len() {
        return invalid("one activation map per mask required");
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, m) in activations.iter().zip(masks) {
        if a.len() != m.data().len() {
            return invalid("activation map and mask differ in size");
        }
        for (&v, &b) in a.iter().zip(m.data()) {
            let on = v > t;
            inter += (on && b) as usize;
            union += (on || b) as usize;
        }
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Pooled IoU of two mask sequences.
pub fn mask_iou(a: &[BinaryMask], b: &[BinaryMask]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid("mask sequences differ in length");
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        inter += x.and(y)?.count();
        union += x.or(y)?.count();
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Activation samples for every unit, each entry standing for `weight`
/// pixels, with per-class pixel counts per entry.
struct Pool {
    n_classes: usize,
    weights: Vec<u32>,
    /// `[entry * n_classes + class]`
    class_counts: Vec<u32>,
    /// Per unit, one value per entry.
    values: Vec<Vec<f64>>,
    class_totals: Vec<f64>,
    n_pixels: f64,
}

impl Pool {
    fn empty(n_units: usize, n_classes: usize) -> Self {
        Self {
            n_classes,
            weights: Vec::new(),
            class_counts: Vec::new(),
            values: vec![Vec::new(); n_units],
            class_totals: vec![0.0; n_classes],
            n_pixels: 0.0,
        }
    }

    /// One unit; `masks[class][image]`.
    fn from_pixels(activations: &[Vec<f64>], masks: &[Vec<BinaryMask>]) -> Result<Self> {
        if activations.is_empty() {
            return invalid("empty validation set");
        }
        let mut pool = Pool::empty(1, masks.len());
        for (i, a) in activations.iter().enumerate() {
            for px in 0..a.len() {
                let mut counts = Vec::with_capacity(masks.len());
                for m in masks {
                    let mask = m.get(i).ok_or_else(|| Error::InvalidArgument("one mask per image required".into()))?;
                    if mask.data().len() != a.len() {
                        return invalid("activation map and mask differ in size");
                    }
                    counts.push(mask.data()[px] as u32);
                }
                pool.push(&[a[px]], 1, &counts);
            }
        }
        Ok(pool)
    }

    fn push(&mut self, unit_values: &[f64], weight: u32, counts: &[u32]) {
        for (v, &x) in self.values.iter_mut().zip(unit_values) {
            v.push(x);
        }
        self.weights.push(weight);
        self.class_counts.extend_from_slice(counts);
        for (t, &c) in self.class_totals.iter_mut().zip(counts) {
            *t += c as f64;
        }
        self.n_pixels += weight as f64;
    }

    /// Add one image: a `[d, h, w]` featuremap, pixel-level class masks and
    /// the upsampling rule.
    fn add_image(&mut self, fm: &Tensor, masks: &[BinaryMask], up: Upsampling) -> Result<()> {
        let (d, h, w) = fm.dims3()?;
        let (oh, ow) = (masks[0].height(), masks[0].width());
        match up {
            Upsampling::Nearest => {
                let mut weight = vec![0u32; h * w];
                let mut counts = vec![0u32; h * w * self.n_classes];
                for i in 0..oh {
                    let si = tensor::nearest_source(i, h, oh);
                    for j in 0..ow {
                        let cell = si * w + tensor::nearest_source(j, w, ow);
                        weight[cell] += 1;
                        for (c, m) in masks.iter().enumerate() {
                            counts[cell * self.n_classes + c] += m.get(i, j) as u32;
                        }
                    }
                }
                for cell in 0..h * w {
                    if weight[cell] == 0 {
                        continue;
                    }
                    let vals: Vec<f64> = (0..d).map(|u| fm.data()[u * h * w + cell]).collect();
                    self.push(&vals, weight[cell], &counts[cell * self.n_classes..(cell + 1) * self.n_classes]);
                }
            }
            Upsampling::Bilinear => {
                let upf = tensor::upsample_bilinear(fm, oh, ow)?;
                for px in 0..oh * ow {
                    let vals: Vec<f64> = (0..d).map(|u| upf.data()[u * oh * ow + px]).collect();
                    let counts: Vec<u32> = masks.iter().map(|m| m.data()[px] as u32).collect();
                    self.push(&vals, 1, &counts);
                }
            }
        }
        Ok(())
    }

    fn order_desc(&self, unit: usize) -> Vec<usize> {
        let v = &self.values[unit];
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
        idx
    }

    /// Pixel-population quantiles of a unit's activation at levels `qs`.
    fn quantiles(&self, unit: usize, qs: &[f64]) -> Vec<f64> {
        let v = &self.values[unit];
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut cum = Vec::with_capacity(idx.len());
        let mut acc = 0u64;
        for &e in &idx {
            acc += self.weights[e] as u64;
            cum.push(acc);
        }
        let at = |k: u64| v[idx[cum.partition_point(|&c| c <= k)]];
        qs.iter()
            .map(|&q| {
                let pos = q * (acc.saturating_sub(1)) as f64;
                let (lo, hi) = (pos.floor() as u64, pos.ceil() as u64);
                let (a, b) = (at(lo), at(hi));
                a + (b - a) * (pos - lo as f64)
            })
            .collect()
    }

    /// `(n_a, n_ab per class)` at each threshold, for `activation > t`.
    fn counts_above(&self, unit: usize, thresholds: &[f64]) -> Vec<(f64, Vec<f64>)> {
        let order = self.order_desc(unit);
        let v = &self.values[unit];
        let mut by_t: Vec<usize> = (0..thresholds.len()).collect();
        by_t.sort_by(|&a, &b| thresholds[b].total_cmp(&thresholds[a]));
        let mut out = vec![(0.0, vec![]); thresholds.len()];
        let mut n_a = 0.0;
        let mut n_ab = vec![0.0; self.n_classes];
        let mut k = 0;
        for ti in by_t {
            let t = thresholds[ti];
            while k < order.len() && v[order[k]] > t {
                let e = order[k];
                n_a += self.weights[e] as f64;
                for (c, acc) in n_ab.iter_mut().enumerate() {
                    *acc += self.class_counts[e * self.n_classes + c] as f64;
                }
                k += 1;
            }
            out[ti] = (n_a, n_ab.clone());
        }
        out
    }

    fn choose_thresholds(&self, unit: usize) -> Vec<ThresholdChoice> {
        let grid = quantile_grid();
        let thresholds = self.quantiles(unit, &grid);
        let counts = self.counts_above(unit, &thresholds);
        (0..self.n_classes)
            .map(|c| {
                let mut best: Option<ThresholdChoice> = None;
                for (k, (n_a, n_ab)) in counts.iter().enumerate() {
                    let table = Contingency::from_counts(*n_a, self.class_totals[c], n_ab[c], self.n_pixels);
                    if let Some(r) = table.iqr() {
                        if best.is_none_or(|b| r > b.iqr) {
                            best = Some(ThresholdChoice {
                                threshold: thresholds[k],
                                quantile: grid[k],
                                iqr: r,
                                degenerate: false,
                            });
                        }
                    }
                }
                best.unwrap_or(ThresholdChoice {
                    threshold: thresholds[grid.len() - 1],
                    quantile: grid[grid.len() - 1],
                    iqr: 0.0,
                    degenerate: true,
                })
            })
            .collect()
    }

    /// Best IQR over every distinct activation value (and below the
    /// minimum) as a threshold.
    fn exhaustive_best_iqr(&self, unit: usize, class: usize) -> f64 {
        let mut ts = self.values[unit].clone();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        if let Some(&lo) = ts.first() {
            ts.push(lo - 1.0);
        }
        self.counts_above(unit, &ts)
            .iter()
            .filter_map(|(n_a, n_ab)| {
                Contingency::from_counts(*n_a, self.class_totals[class], n_ab[class], self.n_pixels).iqr()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsampling {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub count: usize,
}

impl SeedRange {
    pub fn new(start: u64, count: usize) -> Self {
        Self { start, count }
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> {
        self.start..self.start + self.count as u64
    }

    fn overlaps(&self, other: &SeedRange) -> bool {
        self.start < other.start + other.count as u64 && other.start < self.start + self.count as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissectConfig {
    /// Seeds used to pick thresholds.
    pub train: SeedRange,
    /// Seeds used to measure IoU.
    pub eval: SeedRange,
    pub iou_floor: f64,
    pub upsampling: Upsampling,
    /// Top-activating evaluation seeds kept per unit.
    pub top_k: usize,
}

impl Default for DissectConfig {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl DissectConfig {
    /// 200 threshold seeds and 200 evaluation seeds, disjoint, offset by
    /// `seed`.
    pub fn with_seed(seed: u64) -> Self {
        let base = seed * 10_000_000;
        Self {
            train: SeedRange::new(base, 200),
            eval: SeedRange::new(base + 5_000_000, 200),
            iou_floor: 0.05,
            upsampling: Upsampling::Nearest,
            top_k: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitLabel {
    pub unit: usize,
    pub concept: String,
    pub iou: f64,
    pub threshold: f64,
    /// Best IoU is at or above the floor.
    pub matched: bool,
    /// IoU per class, in dictionary order.
    pub ious: Vec<f64>,
    /// Threshold per class, in dictionary order.
    pub thresholds: Vec<f64>,
    /// Classes whose threshold search saw zero joint entropy.
    pub degenerate: Vec<String>,
    /// Evaluation seeds with the highest peak activation, descending.
    pub top_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissectionReport {
    pub schema_version: u32,
    pub world: String,
    pub world_hash: String,
    pub layer: usize,
    pub config: DissectConfig,
    pub concepts: Vec<String>,
    pub units: Vec<UnitLabel>,
    /// Matched units per class, every class listed.
    pub concept_counts: BTreeMap<String, usize>,
}

impl DissectionReport {
    pub fn matched_units(&self) -> usize {
        self.units.iter().filter(|u| u.matched).count()
    }

    pub fn distinct_concepts(&self) -> usize {
        self.concept_counts.values().filter(|&&n| n > 0).count()
    }

    pub fn label(&self, unit: usize) -> Option<&UnitLabel> {
        self.units.get(unit)
    }
}

fn build_pool(world: &World, layer: usize, seeds: SeedRange, up: Upsampling) -> Result<(Pool, Vec<Vec<f64>>)> {
    let d = world.layer_shape(layer)?[0];
    let n_classes = expanded_names(world.spec()).len();
    let samples: Vec<(Tensor, Vec<BinaryMask>)> = seeds
        .seeds()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&s| {
            let t = world.forward(&world.z_for_seed(s), &[])?;
            let segs = expand_parts(&segment(&t.image, world.spec())?, world.spec())?;
            Ok((t.layers[layer - 1].clone(), segs.masks))
        })
        .collect::<Result<_>>()?;
    let mut pool = Pool::empty(d, n_classes);
    let mut peaks = vec![Vec::with_capacity(samples.len()); d];
    for (fm, masks) in &samples {
        pool.add_image(fm, masks, up)?;
        for (u, p) in peaks.iter_mut().enumerate() {
            p.push(fm.channel_slice(u).iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    Ok((pool, peaks))
}

/// Label every unit of `layer`.
pub fn dissect_layer(world: &World, layer: usize, cfg: &DissectConfig) -> Result<DissectionReport> {
    world.check_layer(layer)?;
    if cfg.train.count == 0 || cfg.eval.count == 0 {
        return invalid("train and eval seed ranges must be non-empty");
    }
    if cfg.train.overlaps(&cfg.eval) {
        return invalid("threshold and evaluation seed ranges overlap");
    }
    let names = expanded_names(world.spec());
    let (train, _) = build_pool(world, layer, cfg.train, cfg.upsampling)?;
    let (eval, peaks) = build_pool(world, layer, cfg.eval, cfg.upsampling)?;
    let d = train.values.len();

    let units: Vec<UnitLabel> = (0..d)
        .into_par_iter()
        .map(|u| {
            let choices = train.choose_thresholds(u);
            let thresholds: Vec<f64> = choices.iter().map(|c| c.threshold).collect();
            let counts = eval.counts_above(u, &thresholds);
            let ious: Vec<f64> = (0..names.len())
                .map(|c| {
                    let (n_a, n_ab) = &counts[c];
                    Contingency::from_counts(*n_a, eval.class_totals[c], n_ab[c], eval.n_pixels).iou()
                })
                .collect();
            let best = (0..names.len())
                .fold(0, |b, c| if ious[c] > ious[b] { c } else { b });
            let mut order: Vec<usize> = (0..peaks[u].len()).collect();
            order.sort_by(|&a, &b| peaks[u][b].total_cmp(&peaks[u][a]).then(a.cmp(&b)));
            UnitLabel {
                unit: u,
                concept: names[best].clone(),
                iou: ious[best],
                threshold: thresholds[best],
                matched: ious[best] >= cfg.iou_floor,
                degenerate: choices
                    .iter()
                    .zip(&names)
                    .filter(|(c, _)| c.degenerate)
                    .map(|(_, n)| n.clone())
                    .collect(),
                top_seeds: order.iter().take(cfg.top_k).map(|&i| cfg.eval.start + i as u64).collect(),
                ious,
                thresholds,
            }
        })
        .collect();

    let mut concept_counts: BTreeMap<String, usize> = names.iter().map(|n| (n.clone(), 0)).collect();
    for u in units.iter().filter(|u| u.matched) {
        *concept_counts.get_mut(&u.concept).expect("label from dictionary") += 1;
    }
    Ok(DissectionReport {
        schema_version: REPORT_SCHEMA_VERSION,
        world: world.spec().name.clone(),
        world_hash: world.hash().to_string(),
        layer,
        config: cfg.clone(),
        concepts: names,
        units,
        concept_counts,
    })
}

/// Grid-chosen IQR and the exhaustive-scan IQR for one unit/class pair over
/// a seed range; used to check the quantile grid is fine enough.
pub fn grid_vs_exhaustive(world: &World, layer: usize, seeds: SeedRange, unit: usize, class: usize) -> Result<(f64, f64)> {
    let (pool, _) = build_pool(world, layer, seeds, Upsampling::Nearest)?;
    if unit >= pool.values.len() || class >= pool.n_classes {
        return invalid("unit or class out of range");
    }
    Ok((pool.choose_thresholds(unit)[class].iqr, pool.exhaustive_best_iqr(unit, class)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDelta {
    pub concept: String,
    pub count_a: usize,
    pub count_b: usize,
    pub delta: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDiff {
    pub world_a: String,
    pub world_b: String,
    pub concepts: Vec<ConceptDelta>,
    pub distinct_a: usize,
    pub distinct_b: usize,
    pub distinct_delta: i64,
    pub matched_a: usize,
    pub matched_b: usize,
    /// Change in matched units relative to `a`, in percent; `None` when `a`
    /// has no matched units.
    pub percent_change: Option<f64>,
}

pub fn compare_reports(a: &DissectionReport, b: &DissectionReport) -> Result<ReportDiff> {
    if a.concepts != b.concepts {
        return invalid(format!(
            "concept dictionaries differ: {:?} vs {:?}",
            a.concepts, b.concepts
        ));
    }
    let concepts: Vec<ConceptDelta> = a
        .concepts
        .iter()
        .map(|c| {
            let (ca, cb) = (a.concept_counts[c], b.concept_counts[c]);
            ConceptDelta {
                concept: c.clone(),
                count_a: ca,
                count_b: cb,
                delta: cb as i64 - ca as i64,
            }
        })
        .collect();
    let (ma, mb) = (a.matched_units(), b.matched_units());
    Ok(ReportDiff {
        world_a: a.world.clone(),
        world_b: b.world.clone(),
        concepts,
        distinct_a: a.distinct_concepts(),
        distinct_b: b.distinct_concepts(),
        distinct_delta: b.distinct_concepts() as i64 - a.distinct_concepts() as i64,
        matched_a: ma,
        matched_b: mb,
        percent_change: (ma > 0).then(|| 100.0 * (mb as f64 - ma as f64) / ma as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_table_has_zero_iqr() {
        let t = Contingency {
            both: 1.0,
            a_only: 1.0,
            b_only: 1.0,
            neither: 1.0,
        };
        assert_eq!(t.mutual_information(), 0.0);
        assert_eq!(t.iqr(), Some(0.0));
    }

    #[test]
    fn perfect_dependence_has_unit_iqr() {
        let t = Contingency {
            both: 3.0,
            a_only: 0.0,
            b_only: 0.0,
            neither: 5.0,
        };
        assert!((t.iqr().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_table_is_degenerate() {
        let t = Contingency {
            neither: 10.0,
            ..Default::default()
        };
        assert_eq!(t.iqr(), None);
    }

    #[test]
    fn top_half_vs_left_half() {
        let a = BinaryMask::from_fn(4, 4, |i, _| i < 2);
        let b = BinaryMask::from_fn(4, 4, |_, j| j < 2);
        assert!((mask_iou(&[a], &[b]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_edge_cases() {
        let a = BinaryMask::from_fn(2, 2, |i, _| i == 0);
        let b = BinaryMask::from_fn(2, 2, |i, _| i == 1);
        assert_eq!(mask_iou(&[a.clone()], &[a.clone()]).unwrap(), 1.0);
        assert_eq!(mask_iou(&[a], &[b]).unwrap(), 0.0);
        let e = BinaryMask::empty(2, 2);
        assert_eq!(mask_iou(&[e.clone()], &[e]).unwrap(), 0.0);
    }

    #[test]
    fn activation_matching_mask_recovers_it() {
        let mask = BinaryMask::from_fn(8, 8, |i, j| i + j < 5);
        let act: Vec<f64> = mask.data().iter().map(|&b| if b { 0.9 } else { 0.1 }).collect();
        let choice = iqr_threshold(std::slice::from_ref(&act), std::slice::from_ref(&mask)).unwrap();
        assert!((choice.iqr - 1.0).abs() < 1e-12);
        assert_eq!(iou(&[act], &[mask], choice.threshold).unwrap(), 1.0);
    }

    #[test]
    fn empty_validation_set_errors() {
        assert!(iqr_threshold(&[], &[]).is_err());
    }

    #[test]
    fn degenerate_pair_returns_top_quantile() {
        let act = vec![0.0; 16];
        let mask = BinaryMask::empty(4, 4);
        let c = iqr_threshold(&[act], &[mask]).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.quantile, 0.99);
    }

    #[test]
    fn pixel_quantiles_expand_weights() {
        let mut pool = Pool::empty(1, 1);
        pool.push(&[1.0], 3, &[0]);
        pool.push(&[2.0], 1, &[0]);
        // population [1, 1, 1, 2]
        let q = pool.quantiles(0, &[0.0, 0.5, 0.75, 1.0]);
        assert_eq!(q, vec![1.0, 1.0, 1.25, 2.0]);
    }

    #[test]
    fn overlapping_seed_ranges_rejected() {
        let w = World::default_world();
        let cfg = DissectConfig {
            train: SeedRange::new(0, 10),
            eval: SeedRange::new(5, 10),
            ..DissectConfig::default()
        };
        assert!(dissect_layer(&w, 4, &cfg).is_err());
    }
}
