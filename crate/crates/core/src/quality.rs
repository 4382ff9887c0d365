//! Image-quality proxy and artifact-unit diagnosis.
//!
//! Each image is summarized by a fixed statistic vector (version
//! [`STATS_VERSION`]): mean red, green and blue; the pixel coverage of every
//! base concept in dictionary order; and high-frequency energy, the mean
//! absolute 4-neighbour Laplacian of the grey image with replicated edges.
//! Two image sets are compared by the Fréchet distance between Gaussian fits
//! of their statistic vectors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dissect::SeedRange;
use crate::error::{invalid, Error, Result};
use crate::intervene::{all_locations, InterventionSpec};
use crate::optimize::random_ranking;
use crate::segment::segment;
use crate::stats::mean;
use crate::tensor::{self, BinaryMask, Tensor};
use crate::world::{Edit, World};

pub const STATS_VERSION: u32 = 1;

/// Grey level (channel mean) of an `[H, W, 3]` image.
pub fn grey(image: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    match *image.shape() {
        [h, w, 3] => Ok((h, w, image.data().chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect())),
        _ => Err(Error::Shape(format!("expected [H, W, 3], got {:?}", image.shape()))),
    }
}

/// Absolute 4-neighbour Laplacian per pixel, edges replicated.
pub fn laplacian_abs(h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let at = |i: isize, j: isize| g[(i.clamp(0, h as isize - 1) as usize) * w + j.clamp(0, w as isize - 1) as usize];
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let l = at(i - 1, j) + at(i + 1, j) + at(i, j - 1) + at(i, j + 1) - 4.0 * at(i, j);
            out.push(l.abs());
        }
    }
    out
}

fn label_at(masks: &[BinaryMask], px: usize) -> Option<usize> {
    masks.iter().position(|m| m.data()[px])
}

/// True when a 4-neighbour carries a different segmentation label.
fn on_label_boundary(masks: &[BinaryMask], h: usize, w: usize, px: usize) -> bool {
    let (i, j) = (px / w, px % w);
    let here = label_at(masks, px);
    [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)]
        .into_iter()
        .filter(|&(a, b)| a < h && b < w)
        .any(|(a, b)| label_at(masks, a * w + b) != here)
}

/// Statistic vector of one image.
pub fn image_stats(world: &World, image: &Tensor) -> Result<Vec<f64>> {
    let (h, w, g) = grey(image)?;
    let n = (h * w) as f64;
    let mut v: Vec<f64> = (0..3)
        .map(|k| image.data().iter().skip(k).step_by(3).sum::<f64>() / n)
        .collect();
    let segs = segment(image, world.spec())?;
    v.extend(segs.masks.iter().map(|m| m.fraction()));
    v.push(mean(&laplacian_abs(h, w, &g)));
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("image statistics".into()));
    }
    Ok(v)
}

/// Gaussian fit of statistic vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityStats {
    pub version: u32,
    pub count: usize,
    pub mean: Vec<f64>,
    /// Row-major `m x m`, symmetric, eigenvalues clamped at zero.
    pub covariance: Vec<f64>,
}

impl QualityStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn fit(vectors: &[Vec<f64>]) -> Result<Self> {
        let m = vectors.first().map_or(0, Vec::len);
        if m == 0 {
            return invalid("no statistic vectors");
        }
        if vectors.len() < m + 1 {
            return invalid(format!("{} vectors cannot fit a {m}-dimensional Gaussian (need {})", vectors.len(), m + 1));
        }
        if vectors.iter().any(|v| v.len() != m) {
            return invalid("statistic vectors differ in length");
        }
        if vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("statistic vectors".into()));
        }
        let n = vectors.len() as f64;
        let mu: Vec<f64> = (0..m).map(|k| vectors.iter().map(|v| v[k]).sum::<f64>() / n).collect();
        let mut cov = DMatrix::<f64>::zeros(m, m);
        for v in vectors {
            let d = DVector::from_iterator(m, v.iter().zip(&mu).map(|(a, b)| a - b));
            cov += &d * d.transpose();
        }
        cov /= n - 1.0;
        let (cov, _) = clamp_psd(&cov);
        Ok(Self {
            version: STATS_VERSION,
            count: vectors.len(),
            mean: mu,
            covariance: cov.transpose().iter().copied().collect(),
        })
    }

    /// Direct construction from moments (the covariance is symmetrized and
    /// clamped).
    pub fn from_moments(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let m = mean.len();
        if covariance.len() != m * m {
            return invalid("covariance must be m x m");
        }
        let c = DMatrix::from_row_slice(m, m, &covariance);
        let (c, _) = clamp_psd(&c);
        Ok(Self {
            version: STATS_VERSION,
            count: 0,
            mean,
            covariance: c.transpose().iter().copied().collect(),
        })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance)
    }
}

/// Symmetrize and clamp negative eigenvalues; returns the number clamped.
fn clamp_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.iter().filter(|&&l| l < 0.0).count();
    let vals = eig.eigenvalues.map(|l| l.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (out, clamped)
}

fn sqrt_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.iter().filter(|&&l| l < 0.0).count();
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    (&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose(), clamped)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frechet {
    pub distance: f64,
    /// Negative eigenvalues set to zero while taking square roots.
    pub clamped_eigenvalues: usize,
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the trace
/// of the root taken from the symmetric `S_a^(1/2) S_b S_a^(1/2)`.
pub fn frechet_distance(a: &QualityStats, b: &QualityStats) -> Result<Frechet> {
    if a.dim() != b.dim() {
        return invalid(format!("statistic dimensions differ: {} vs {}", a.dim(), b.dim()));
    }
    if a.mean.iter().chain(&b.mean).chain(&a.covariance).chain(&b.covariance).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Fréchet inputs".into()));
    }
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let (ra, c1) = sqrt_psd(&sa);
    let (rb, c2) = sqrt_psd(&sb);
    let (root_ab, c3) = sqrt_psd(&(&ra * &sb * &ra));
    let (root_ba, c4) = sqrt_psd(&(&rb * &sa * &rb));
    // both orders give the same trace in exact arithmetic; averaging keeps
    // the result symmetric in floating point
    let cross = 0.5 * (root_ab.trace() + root_ba.trace());
    let dmu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let distance = (dmu + sa.trace() + sb.trace() - 2.0 * cross).max(0.0);
    Ok(Frechet {
        distance,
        clamped_eigenvalues: c1 + c2 + c3 + c4,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitEvidence {
    pub unit: usize,
    pub top_seeds: Vec<u64>,
    /// Mean high-frequency energy inside the unit's strong-activation
    /// region over its top images.
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactFlagSet {
    pub layer: usize,
    pub flagged: Vec<usize>,
    /// Every unit, by descending energy (ties by index).
    pub evidence: Vec<UnitEvidence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagConfig {
    pub seeds: SeedRange,
    pub top_images: usize,
    /// A pixel is in the unit's region when its upsampled activation
    /// exceeds this fraction of the image's peak.
    pub region_fraction: f64,
}

impl Default for FlagConfig {
    fn default() -> Self {
        Self {
            seeds: SeedRange::new(300_000_000, 200),
            top_images: 10,
            region_fraction: 0.5,
        }
    }
}

/// Rank units by the high-frequency energy of their top-activating images
/// and flag the top `n_flag`. Pixels on a segmentation label boundary are
/// left out of the energy, so only texture inside regions counts.
pub fn flag_artifact_units(world: &World, layer: usize, n_flag: usize, cfg: &FlagConfig) -> Result<ArtifactFlagSet> {
    let d = world.layer_shape(layer)?[0];
    if n_flag > d {
        return invalid(format!("cannot flag {n_flag} of {d} units"));
    }
    if cfg.top_images == 0 || cfg.seeds.count == 0 {
        return invalid("flagging needs images");
    }
    let seeds: Vec<u64> = cfg.seeds.seeds().collect();
    let size = world.image_size();
    // per image: featuremap and the Laplacian energy map, with palette
    // boundaries marked NaN so object edges do not count as texture
    let images: Vec<(Tensor, Vec<f64>)> = seeds
        .par_iter()
        .map(|&s| {
            let t = world.forward(&world.z_for_seed(s), &[])?;
            let (h, w, g) = grey(&t.image)?;
            let mut lap = laplacian_abs(h, w, &g);
            let segs = segment(&t.image, world.spec())?;
            for (px, e) in lap.iter_mut().enumerate() {
                if on_label_boundary(&segs.masks, h, w, px) {
                    *e = f64::NAN;
                }
            }
            Ok((t.layers[layer - 1].clone(), lap))
        })
        .collect::<Result<_>>()?;

    let mut evidence: Vec<UnitEvidence> = (0..d)
        .into_par_iter()
        .map(|u| {
            let peaks: Vec<f64> = images
                .iter()
                .map(|(fm, _)| fm.channel_slice(u).iter().copied().fold(0.0, f64::max))
                .collect();
            let mut order: Vec<usize> = (0..seeds.len()).filter(|&i| peaks[i] > 0.0).collect();
            order.sort_by(|&a, &b| peaks[b].total_cmp(&peaks[a]).then(a.cmp(&b)));
            order.truncate(cfg.top_images);
            let mut energies = Vec::with_capacity(order.len());
            for &i in &order {
                let (fm, lap) = &images[i];
                let up = tensor::upsample_nearest(&fm.channel(u), size, size)?;
                let level = cfg.region_fraction * peaks[i];
                let vals: Vec<f64> = up
                    .data()
                    .iter()
                    .zip(lap)
                    .filter(|(&a, l)| a > level && !l.is_nan())
                    .map(|(_, &l)| l)
                    .collect();
                energies.push(mean(&vals));
            }
            Ok(UnitEvidence {
                unit: u,
                top_seeds: order.iter().map(|&i| seeds[i]).collect(),
                energy: mean(&energies),
            })
        })
        .collect::<Result<_>>()?;
    evidence.sort_by(|a, b| b.energy.total_cmp(&a.energy).then(a.unit.cmp(&b.unit)));
    Ok(ArtifactFlagSet {
        layer,
        flagged: evidence.iter().take(n_flag).map(|e| e.unit).collect(),
        evidence,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairConfig {
    /// Images evaluated from the world under repair.
    pub seeds: SeedRange,
    /// Images rendered by the artifact-free twin as the reference.
    pub reference_seeds: SeedRange,
    pub random_draws: usize,
    pub random_seed: u64,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            seeds: SeedRange::new(400_000_000, 200),
            reference_seeds: SeedRange::new(500_000_000, 200),
            random_draws: 10,
            random_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairRow {
    pub method: String,
    pub frechet: f64,
    /// Mean absolute pixel change outside artifact regions, relative to the
    /// original images.
    pub preservation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub layer: usize,
    pub flagged: Vec<usize>,
    pub frechet_original: f64,
    pub frechet_repaired: f64,
    /// One entry per random equal-size ablation.
    pub frechet_random: Vec<f64>,
    pub frechet_random_mean: f64,
    /// `1 - repaired / original`.
    pub reduction: f64,
    /// `random_mean / original - 1`.
    pub random_change: f64,
    pub preservation: f64,
    pub rows: Vec<RepairRow>,
}

struct Rendered {
    stats: Vec<Vec<f64>>,
    images: Vec<Tensor>,
}

fn render_set(world: &World, zs: &[Vec<f64>], edits: &[Edit]) -> Result<Rendered> {
    let out: Vec<(Vec<f64>, Tensor)> = zs
        .par_iter()
        .map(|z| {
            let t = world.forward(z, edits)?;
            Ok((image_stats(world, &t.image)?, t.image))
        })
        .collect::<Result<_>>()?;
    let (stats, images) = out.into_iter().unzip();
    Ok(Rendered { stats, images })
}

/// Ablate `flags` everywhere in `layer` and compare against an artifact-free
/// twin of the world, with random equal-size ablations as the baseline.
pub fn repair(world: &World, layer: usize, flags: &[usize], cfg: &RepairConfig) -> Result<RepairReport> {
    let d = world.layer_shape(layer)?[0];
    if let Some(u) = flags.iter().find(|&&u| u >= d) {
        return invalid(format!("flagged unit {u} outside layer width {d}"));
    }
    let clean = World::new(world.spec().without_artifacts())?;
    let reference_zs: Vec<Vec<f64>> = cfg.reference_seeds.seeds().map(|s| clean.z_for_seed(s)).collect();
    let reference = QualityStats::fit(&render_set(&clean, &reference_zs, &[])?.stats)?;

    let zs: Vec<Vec<f64>> = cfg.seeds.seeds().map(|s| world.z_for_seed(s)).collect();
    let original = render_set(world, &zs, &[])?;
    // pixels the artifact pattern touched in the original renders
    let artifact_regions: Vec<Vec<bool>> = zs
        .par_iter()
        .map(|z| Ok(world.forward(z, &[])?.artifact_intensity().iter().map(|&a| a > 0.0).collect()))
        .collect::<Result<_>>()?;
    let fit = |r: &Rendered| -> Result<f64> { Ok(frechet_distance(&QualityStats::fit(&r.stats)?, &reference)?.distance) };
    let preservation = |r: &Rendered| -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for ((a, b), region) in original.images.iter().zip(&r.images).zip(&artifact_regions) {
            for (px, (pa, pb)) in a.data().chunks_exact(3).zip(b.data().chunks_exact(3)).enumerate() {
                if region[px] {
                    continue;
                }
                total += pa.iter().zip(pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    };
    let ablated = |units: &[usize]| -> Result<Rendered> {
        if units.is_empty() {
            return render_set(world, &zs, &[]);
        }
        let edit = InterventionSpec::ablate(layer, units.to_vec(), all_locations(world, layer)?).to_edit(world)?;
        render_set(world, &zs, &[edit])
    };

    let f_orig = fit(&original)?;
    let repaired = ablated(flags)?;
    let f_rep = fit(&repaired)?;
    let p_rep = preservation(&repaired);
    let mut f_rand = Vec::with_capacity(cfg.random_draws);
    let mut p_rand = Vec::with_capacity(cfg.random_draws);
    for draw in 0..cfg.random_draws {
        let units: Vec<usize> = random_ranking(d, cfg.random_seed.wrapping_add(draw as u64))
            .into_iter()
            .take(flags.len())
            .collect();
        let r = ablated(&units)?;
        f_rand.push(fit(&r)?);
        p_rand.push(preservation(&r));
    }
    let f_rand_mean = mean(&f_rand);
    let ratio = |x: f64| if f_orig > 0.0 { x / f_orig } else { 1.0 };
    Ok(RepairReport {
        layer,
        flagged: flags.to_vec(),
        frechet_original: f_orig,
        frechet_repaired: f_rep,
        frechet_random_mean: f_rand_mean,
        reduction: 1.0 - ratio(f_rep),
        random_change: ratio(f_rand_mean) - 1.0,
        preservation: p_rep,
        rows: vec![
            RepairRow {
                method: "original".into(),
                frechet: f_orig,
                preservation: 0.0,
            },
            RepairRow {
                method: "ablate-flagged".into(),
                frechet: f_rep,
                preservation: p_rep,
            },
            RepairRow {
                method: "ablate-random".into(),
                frechet: f_rand_mean,
                preservation: mean(&p_rand),
            },
        ],
        frechet_random: f_rand,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: Vec<f64>, cov: Vec<f64>) -> QualityStats {
        QualityStats::from_moments(mean, cov).unwrap()
    }

    #[test]
    fn one_d_mean_shift() {
        let a = stats(vec![0.0], vec![2.0]);
        let b = stats(vec![0.3], vec![2.0]);
        assert!((frechet_distance(&a, &b).unwrap().distance - 0.09).abs() < 1e-12);
    }

    #[test]
    fn diagonal_closed_form() {
        let a = stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 4.0]);
        let b = stats(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 1.0]);
        assert!((frechet_distance(&a, &b).unwrap().distance - 2.0).abs() < 1e-9);
    }

    #[test]
    fn identical_is_zero() {
        let a = stats(vec![1.0, 2.0], vec![2.0, 0.5, 0.5, 1.0]);
        assert!(frechet_distance(&a, &a).unwrap().distance.abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch() {
        let a = stats(vec![0.0], vec![1.0]);
        let b = stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
        assert!(frechet_distance(&a, &b).is_err());
    }

    #[test]
    fn fit_needs_enough_vectors() {
        assert!(QualityStats::fit(&[vec![1.0, 2.0], vec![0.0, 1.0]]).is_err());
        assert!(QualityStats::fit(&[vec![1.0], vec![f64::NAN]]).is_err());
    }

    #[test]
    fn laplacian_of_checkerboard() {
        let g: Vec<f64> = (0..16).map(|k| if (k / 4 + k % 4) % 2 == 0 { 0.1 } else { -0.1 }).collect();
        let l = laplacian_abs(4, 4, &g);
        // interior pixel: four opposite neighbours
        assert!((l[5] - 0.8).abs() < 1e-12);
        // constant image has none
        assert!(laplacian_abs(3, 3, &[0.4; 9]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_flags_requested() {
        let w = World::default_world();
        let cfg = FlagConfig {
            seeds: SeedRange::new(0, 20),
            ..FlagConfig::default()
        };
        assert!(flag_artifact_units(&w, 4, 0, &cfg).unwrap().flagged.is_empty());
    }
}
