//! Continuous per-unit intervention strengths `alpha` fitted by projected
//! stochastic gradient steps, and ablation curves built from unit rankings.
//!
//! For a sample `(z, P)` with unit-layer featuremap `r` and insertion levels
//! `c`, the two arms are
//!
//! ```text
//! insert: r[u, P] <- alpha[u] * c[u] + (1 - alpha[u]) * r[u, P]
//! ablate: r[u, P] <- (1 - alpha[u]) * r[u, P]
//! ```
//!
//! The effect surrogate is the concept's final-layer intensity averaged over
//! P's pixel footprint, insert minus ablate, divided by class coverage. Each
//! step minimizes `-effect + lambda * ||alpha||_2` with a gradient step on
//! the effect, the proximal map of the norm term, then a clamp to `[0, 1]`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::dissect::SeedRange;
use crate::error::{invalid, Error, Result};
use crate::intervene::{all_locations, base_coverage, insertion_levels, InsertLevel, InterventionSpec};
use crate::rng;
use crate::segment::segment;
use crate::tensor::{BinaryMask, Tensor};
use crate::world::{sample_z, Step, World, NUM_LAYERS, UNIT_LAYER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lambda {
    Fixed { value: f64 },
    /// `lambda = ratio * ||grad effect||` at `alpha = 0.5` on a probe batch.
    Probe { ratio: f64, samples: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaConfig {
    pub lambda: Lambda,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
    pub init: f64,
    pub insert_level: InsertLevel,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        Self {
            lambda: Lambda::Probe {
                ratio: 0.5,
                samples: 64,
            },
            steps: 1000,
            learning_rate: 0.05,
            batch: 16,
            seed: 0,
            init: 0.5,
            insert_level: InsertLevel::Quantile99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSolution {
    pub concept: String,
    pub layer: usize,
    pub alpha: Vec<f64>,
    /// Units by descending alpha, ties by ascending index.
    pub ranking: Vec<usize>,
    /// Minibatch objective `-effect + lambda * ||alpha||` before each step.
    pub trajectory: Vec<f64>,
    /// Resolved regularization weight.
    pub lambda: f64,
    /// Effect-gradient norm measured by the probe, when one ran.
    pub probe_gradient_norm: Option<f64>,
    pub coverage: f64,
    pub config: AlphaConfig,
}

/// One `(z, P)` draw, cropped to the cells that can influence P's footprint.
#[derive(Clone, Debug)]
pub struct CroppedSample {
    /// Unit-layer values inside the crop window.
    r: Tensor,
    /// `c - r` inside P, zero elsewhere.
    insert_delta: Tensor,
    /// `-r` inside P, zero elsewhere.
    ablate_delta: Tensor,
    /// Output mask selecting the concept channel over P's footprint.
    readout: Arc<Vec<bool>>,
}

/// Everything fixed for one concept: world, layer, levels, normalization.
pub struct AlphaProblem<'a> {
    world: &'a World,
    layer: usize,
    concept: usize,
    levels: Vec<f64>,
    coverage: f64,
    steps: Vec<Step>,
}

fn crop(t: &Tensor, r0: usize, r1: usize, c0: usize, c1: usize) -> Tensor {
    let (d, _, w) = t.dims3().expect("featuremap");
    let (h2, w2) = (r1 - r0 + 1, c1 - c0 + 1);
    let mut data = Vec::with_capacity(d * h2 * w2);
    for u in 0..d {
        let plane = t.channel_slice(u);
        for i in r0..=r1 {
            data.extend_from_slice(&plane[i * w + c0..=i * w + c1]);
        }
    }
    Tensor::new(vec![d, h2, w2], data).expect("crop shape")
}

impl<'a> AlphaProblem<'a> {
    pub fn new(world: &'a World, layer: usize, concept: &str, level: &InsertLevel) -> Result<Self> {
        if !(UNIT_LAYER..=NUM_LAYERS).contains(&layer) {
            return invalid(format!("alpha optimization needs a convolutional layer in {UNIT_LAYER}..={NUM_LAYERS}"));
        }
        let ci = world.spec().concept_index(concept)?;
        let coverage = base_coverage(world)?[ci];
        if coverage <= 0.0 {
            return Err(Error::ZeroCoverage(concept.to_string()));
        }
        let levels = insertion_levels(world, layer, level, ci)?
            .ok_or_else(|| Error::InvalidArgument("alpha optimization needs an explicit insertion level".into()))?;
        let mut steps = Vec::new();
        for l in layer + 1..=NUM_LAYERS {
            steps.extend(world.conv_steps(l)?.iter().cloned());
        }
        Ok(Self {
            world,
            layer,
            concept: ci,
            levels,
            coverage,
            steps,
        })
    }

    pub fn width(&self) -> usize {
        self.levels.len()
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    fn scale(&self) -> usize {
        self.steps
            .iter()
            .map(|s| match s {
                Step::Upsample { factor } => *factor,
                _ => 1,
            })
            .product()
    }

    /// Prepare the sample for latent `z` and featuremap cells `cells`.
    pub fn sample(&self, z: &[f64], cells: &[(usize, usize)]) -> Result<CroppedSample> {
        let r = &self.world.featuremap(z, self.layer)?;
        let (d, h, w) = r.dims3()?;
        let cell_mask = BinaryMask::from_fn(h, w, |i, j| cells.contains(&(i, j)));
        let footprint = self.world.footprint(self.layer, &cell_mask)?;
        let cone = self.world.dependency_cells(self.layer, &footprint)?;
        let rows: Vec<usize> = (0..h).filter(|&i| (0..w).any(|j| cone.get(i, j))).collect();
        let cols: Vec<usize> = (0..w).filter(|&j| (0..h).any(|i| cone.get(i, j))).collect();
        let (r0, r1) = (rows[0], *rows.last().expect("non-empty cone"));
        let (c0, c1) = (cols[0], *cols.last().expect("non-empty cone"));

        let rc = crop(r, r0, r1, c0, c1);
        let (_, ch, cw) = rc.dims3()?;
        let mut ins = Tensor::zeros(&[d, ch, cw]);
        let mut abl = Tensor::zeros(&[d, ch, cw]);
        for u in 0..d {
            for &(i, j) in cells {
                let k = u * ch * cw + (i - r0) * cw + (j - c0);
                ins.data_mut()[k] = self.levels[u] - rc.data()[k];
                abl.data_mut()[k] = -rc.data()[k];
            }
        }
        let s = self.scale();
        let channels = self.world.layer_shape(NUM_LAYERS)?[0];
        let (oh, ow) = (ch * s, cw * s);
        let mut readout = vec![false; channels * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                if footprint.get(i + r0 * s, j + c0 * s) {
                    readout[self.concept * oh * ow + i * ow + j] = true;
                }
            }
        }
        Ok(CroppedSample {
            r: rc,
            insert_delta: ins,
            ablate_delta: abl,
            readout: Arc::new(readout),
        })
    }

    /// Draw the `index`-th sample of stream `name` under `seed`: a fresh
    /// latent and one uniformly chosen cell.
    pub fn draw(&self, seed: u64, name: &str, index: u64) -> Result<CroppedSample> {
        let mut g = rng::stream(seed, name, index);
        let z = sample_z(self.world.spec(), &mut g);
        let shape = self.world.layer_shape(self.layer)?;
        let cell = (g.random_range(0..shape[1]), g.random_range(0..shape[2]));
        self.sample(&z, &[cell])
    }

    fn arm(&self, g: &mut Graph, alpha: NodeId, r: NodeId, delta: &Tensor, readout: &Arc<Vec<bool>>) -> Result<NodeId> {
        let dn = g.constant(delta.clone());
        let scaled = g.channel_scale(alpha, dn)?;
        let mut x = g.add(r, scaled)?;
        for step in &self.steps {
            x = match step {
                Step::Conv { weight, bias } => g.conv2d(x, weight.clone(), bias)?,
                Step::Upsample { factor } => {
                    let (h, w) = g.value(x).spatial();
                    g.upsample(x, h * factor, w * factor)?
                }
                Step::Relu => g.relu(x)?,
            };
        }
        g.masked_mean(x, readout.clone())
    }

    /// Surrogate effect of one sample and its gradient with respect to alpha.
    pub fn sample_effect(&self, alpha: &[f64], s: &CroppedSample) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let a = g.input(Tensor::new(vec![alpha.len()], alpha.to_vec())?);
        let r = g.constant(s.r.clone());
        let yi = self.arm(&mut g, a, r, &s.insert_delta, &s.readout)?;
        let ya = self.arm(&mut g, a, r, &s.ablate_delta, &s.readout)?;
        let neg = g.scale(ya, -1.0)?;
        let diff = g.add(yi, neg)?;
        let out = g.scale(diff, 1.0 / self.coverage)?;
        let (value, grads) = g.forward_backward(out)?;
        Ok((value, grads.get_or_zeros(a, &[alpha.len()]).into_data()))
    }

    /// Mean surrogate effect over a batch and its gradient.
    pub fn batch_effect(&self, alpha: &[f64], batch: &[CroppedSample]) -> Result<(f64, Vec<f64>)> {
        let parts: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|s| self.sample_effect(alpha, s))
            .collect::<Result<_>>()?;
        let n = batch.len().max(1) as f64;
        let mut grad = vec![0.0; alpha.len()];
        let mut value = 0.0;
        for (v, g) in parts {
            value += v;
            for (acc, x) in grad.iter_mut().zip(g) {
                *acc += x;
            }
        }
        Ok((value / n, grad.into_iter().map(|x| x / n).collect()))
    }

    /// Objective `-effect + lambda * ||alpha||` and its gradient (the norm's
    /// subgradient is taken as 0 at the origin).
    pub fn objective(&self, alpha: &[f64], batch: &[CroppedSample], lambda: f64) -> Result<(f64, Vec<f64>)> {
        let (effect, g) = self.batch_effect(alpha, batch)?;
        let norm = l2(alpha);
        let grad = g
            .iter()
            .zip(alpha)
            .map(|(&gi, &ai)| -gi + if norm > 0.0 { lambda * ai / norm } else { 0.0 })
            .collect();
        Ok((-effect + lambda * norm, grad))
    }

    /// Same surrogate on the full, uncropped generator; used to check the
    /// crop.
    pub fn full_effect(&self, alpha: &[f64], z: &[f64], cells: &[(usize, usize)]) -> Result<f64> {
        let base = self.world.forward(z, &[])?;
        let r = base.layer(self.layer);
        let (d, h, w) = r.dims3()?;
        let mut fi = r.clone();
        let mut fa = r.clone();
        for u in 0..d {
            for &(i, j) in cells {
                let k = u * h * w + i * w + j;
                fi.data_mut()[k] = alpha[u] * self.levels[u] + (1.0 - alpha[u]) * r.data()[k];
                fa.data_mut()[k] = (1.0 - alpha[u]) * r.data()[k];
            }
        }
        let ti = self.world.forward_from(&base, self.layer, fi)?;
        let ta = self.world.forward_from(&base, self.layer, fa)?;
        let cell_mask = BinaryMask::from_fn(h, w, |i, j| cells.contains(&(i, j)));
        let fp = self.world.footprint(self.layer, &cell_mask)?;
        let read = |t: &crate::world::ForwardTrace| {
            let plane = t.intensities.channel_slice(self.concept);
            let sum: f64 = plane.iter().zip(fp.data()).filter(|(_, &m)| m).map(|(v, _)| v).sum();
            sum / fp.count() as f64
        };
        Ok((read(&ti) - read(&ta)) / self.coverage)
    }

    /// Binary-mask effect of a fixed alpha: presence of the concept in P's
    /// footprint under each arm, difference over coverage, on samples
    /// `seeds` with one uniformly drawn cell each.
    pub fn binary_effect(&self, alpha: &[f64], seeds: SeedRange) -> Result<f64> {
        let effects: Vec<f64> = seeds
            .seeds()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&s| {
                let mut g = rng::stream(s, "alpha-eval", 0);
                let z = sample_z(self.world.spec(), &mut g);
                let shape = self.world.layer_shape(self.layer)?;
                let (i, j) = (g.random_range(0..shape[1]), g.random_range(0..shape[2]));
                let base = self.world.forward(&z, &[])?;
                let r = base.layer(self.layer);
                let (d, h, w) = r.dims3()?;
                let mut fi = r.clone();
                let mut fa = r.clone();
                for u in 0..d {
                    let k = u * h * w + i * w + j;
                    fi.data_mut()[k] = alpha[u] * self.levels[u] + (1.0 - alpha[u]) * r.data()[k];
                    fa.data_mut()[k] = (1.0 - alpha[u]) * r.data()[k];
                }
                let cell_mask = BinaryMask::from_fn(h, w, |a, b| (a, b) == (i, j));
                let fp = self.world.footprint(self.layer, &cell_mask)?;
                let presence = |fm: Tensor| -> Result<f64> {
                    let t = self.world.forward_from(&base, self.layer, fm)?;
                    let m = &segment(&t.image, self.world.spec())?.masks[self.concept];
                    Ok(m.and(&fp)?.count() as f64 / fp.count() as f64)
                };
                Ok(presence(fi)? - presence(fa)?)
            })
            .collect::<Result<_>>()?;
        Ok(crate::stats::mean(&effects) / self.coverage)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Units by descending score, ties by ascending index.
pub fn rank_units(alpha: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..alpha.len()).collect();
    idx.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
    idx
}

/// Fit alpha for one concept at one layer.
pub fn optimize_alpha(world: &World, layer: usize, concept: &str, cfg: &AlphaConfig) -> Result<AlphaSolution> {
    if cfg.batch == 0 {
        return invalid("batch size must be positive");
    }
    if !(cfg.learning_rate > 0.0) {
        return invalid("learning rate must be positive");
    }
    let problem = AlphaProblem::new(world, layer, concept, &cfg.insert_level)?;
    let d = problem.width();
    let (lambda, probe_norm) = match cfg.lambda {
        Lambda::Fixed { value } => {
            if !(value >= 0.0) {
                return invalid("lambda must be non-negative");
            }
            (value, None)
        }
        Lambda::Probe { ratio, samples } => {
            let batch: Vec<CroppedSample> = (0..samples.max(1) as u64)
                .map(|i| problem.draw(cfg.seed, "alpha-probe", i))
                .collect::<Result<_>>()?;
            let (_, g) = problem.batch_effect(&vec![0.5; d], &batch)?;
            let n = l2(&g);
            (ratio * n, Some(n))
        }
    };

    let mut alpha = vec![cfg.init.clamp(0.0, 1.0); d];
    let mut trajectory = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<CroppedSample> = (0..cfg.batch as u64)
            .map(|b| problem.draw(cfg.seed, "alpha-batch", step as u64 * cfg.batch as u64 + b))
            .collect::<Result<_>>()?;
        let (effect, grad) = problem.batch_effect(&alpha, &batch)?;
        let objective = -effect + lambda * l2(&alpha);
        trajectory.push(objective);
        if !objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, trajectory });
        }
        for (a, g) in alpha.iter_mut().zip(&grad) {
            *a += cfg.learning_rate * g;
        }
        let norm = l2(&alpha);
        let shrink = if norm > 0.0 {
            (1.0 - cfg.learning_rate * lambda / norm).max(0.0)
        } else {
            0.0
        };
        for a in alpha.iter_mut() {
            *a = (*a * shrink).clamp(0.0, 1.0);
        }
    }
    Ok(AlphaSolution {
        concept: concept.to_string(),
        layer,
        ranking: rank_units(&alpha),
        alpha,
        trajectory,
        lambda,
        probe_gradient_norm: probe_norm,
        coverage: problem.coverage(),
        config: cfg.clone(),
    })
}

/// A uniformly shuffled unit order.
pub fn random_ranking(d: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..d).collect();
    v.shuffle(&mut rng::stream(seed, "random-ranking", 0));
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    /// Concept area after ablating the top `k` units everywhere, as a
    /// fraction of the unedited area.
    pub remaining: f64,
}

/// Seeds for ablation curves.
pub const CURVE_SEEDS: SeedRange = SeedRange {
    start: 200_000_000,
    count: 100,
};

pub fn topk_ablation_curve(
    world: &World,
    layer: usize,
    ranking: &[usize],
    concept: &str,
    k_grid: &[usize],
    seeds: SeedRange,
) -> Result<Vec<CurvePoint>> {
    let ci = world.spec().concept_index(concept)?;
    let d = world.layer_shape(layer)?[0];
    if let Some(&k) = k_grid.iter().find(|&&k| k > d || k > ranking.len()) {
        return invalid(format!("k = {k} exceeds layer width {d} or ranking length {}", ranking.len()));
    }
    let locations = all_locations(world, layer)?;
    let zs: Vec<Vec<f64>> = seeds.seeds().map(|s| world.z_for_seed(s)).collect();
    let base_area: usize = zs
        .par_iter()
        .map(|z| Ok(segment(&world.forward(z, &[])?.image, world.spec())?.masks[ci].count()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    if base_area == 0 {
        return Err(Error::ZeroCoverage(concept.to_string()));
    }
    k_grid
        .iter()
        .map(|&k| {
            if k == 0 {
                return Ok(CurvePoint { k, remaining: 1.0 });
            }
            let spec = InterventionSpec::ablate(layer, ranking[..k].to_vec(), locations.clone());
            let edit = spec.to_edit(world)?;
            let area: usize = zs
                .par_iter()
                .map(|z| {
                    let t = world.forward(z, std::slice::from_ref(&edit))?;
                    Ok(segment(&t.image, world.spec())?.masks[ci].count())
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum();
            Ok(CurvePoint {
                k,
                remaining: area as f64 / base_area as f64,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalScore {
    pub concept: String,
    pub k: usize,
    /// `1 - remaining` after ablating the ranking's top `k` units.
    pub removed: f64,
    pub scene_defining: bool,
}

/// How much of each concept disappears when its top `k` units are ablated
/// everywhere; `rankings` pairs each concept with its unit order.
pub fn removal_difficulty(
    world: &World,
    layer: usize,
    rankings: &[(String, Vec<usize>)],
    k: usize,
    seeds: SeedRange,
) -> Result<Vec<RemovalScore>> {
    rankings
        .iter()
        .map(|(c, ranking)| {
            let curve = topk_ablation_curve(world, layer, ranking, c, &[k], seeds)?;
            let ci = world.spec().concept_index(c)?;
            Ok(RemovalScore {
                concept: c.clone(),
                k,
                removed: 1.0 - curve[0].remaining,
                scene_defining: world.spec().concepts[ci].scene_defining(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_units(&[0.5, 1.0, 0.5, 1.0, 0.0]), vec![1, 3, 0, 2, 4]);
    }

    #[test]
    fn random_ranking_is_a_permutation() {
        let mut r = random_ranking(64, 3);
        assert_ne!(r, (0..64).collect::<Vec<_>>());
        r.sort();
        assert_eq!(r, (0..64).collect::<Vec<_>>());
    }
}
