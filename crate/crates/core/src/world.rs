//! Synthetic layered generator with planted, machine-readable ground truth.
//!
//! The generator has eight layers, numbered from 1:
//!
//! | layer | shape              | computation                                   |
//! |-------|--------------------|-----------------------------------------------|
//! | 1     | `[|z|, 1, 1]`      | the latent vector                             |
//! | 2     | `[P, 1, 1]`        | placement parameters (presence, rectangle)    |
//! | 3     | `[L, g, g]`        | soft layout fields and spatial noise fields   |
//! | 4     | `[d, g, g]`        | unit layer: 1x1 conv + ReLU over the layout   |
//! | 5     | `[C, 2g, 2g]`      | unit-to-concept mix, upsample, blur, ReLU     |
//! | 6     | `[C, 4g, 4g]`      | upsample, blur, ReLU                          |
//! | 7, 8  | `[C, 4g, 4g]`      | blur, ReLU, optional veto mixing              |
//!
//! `C` is one intensity channel per concept plus one artifact channel. The
//! image is painted from layer 8: each pixel takes the palette of the last
//! concept (in declaration order) whose intensity exceeds its threshold, so
//! base-concept masks never overlap. A checkerboard scaled by the artifact
//! channel is added on top.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, shape_err, Error, Result};
use crate::rng;
use crate::stats::{normal_cdf, normal_quantile, quantile_sorted, sorted};
use crate::tensor::{self, BinaryMask, Tensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const NUM_LAYERS: usize = 8;
pub const UNIT_LAYER: usize = 4;
const PARAMS_PER_OBJECT: usize = 5;

/// A placement parameter: `min + (max - min) * Phi(z[z])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Param {
    pub z: usize,
    pub min: f64,
    pub max: f64,
}

impl Param {
    fn eval(&self, z: &[f64]) -> f64 {
        self.min + (self.max - self.min) * normal_cdf(z[self.z])
    }
}

/// Object present when `Phi(z[z]) < probability`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Presence {
    pub z: usize,
    pub probability: f64,
}

/// Where a concept appears, in unit-layer cell coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// Rows `[0, height)`, full width, always present.
    BandTop { height: Param },
    /// Rows `[g - height, g)`, full width, always present.
    BandBottom { height: Param },
    /// Axis-aligned rectangle. With an `anchor`, the centre parameters are
    /// fractions of the anchor's extent, the rectangle is clipped to the
    /// anchor and it is present only when the anchor is.
    Rect {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        presence: Option<Presence>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        anchor: Option<String>,
        center_y: Param,
        center_x: Param,
        half_height: Param,
        half_width: Param,
    },
}

impl Placement {
    fn z_indices(&self) -> Vec<usize> {
        match self {
            Placement::BandTop { height } | Placement::BandBottom { height } => vec![height.z],
            Placement::Rect {
                presence,
                center_y,
                center_x,
                half_height,
                half_width,
                ..
            } => {
                let mut v = vec![center_y.z, center_x.z, half_height.z, half_width.z];
                if let Some(p) = presence {
                    v.push(p.z);
                }
                v
            }
        }
    }

    fn anchor(&self) -> Option<&str> {
        match self {
            Placement::Rect { anchor, .. } => anchor.as_deref(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub name: String,
    pub palette: [f64; 3],
    /// Intensity level above which the concept is painted; also the
    /// palette-match level the segmenter uses.
    pub threshold: f64,
    /// Expand into `-t/-b/-l/-r` part classes during dissection.
    #[serde(default)]
    pub parts: bool,
    /// Contribution of each causal unit to the concept's intensity channel.
    pub unit_weight: f64,
    /// Disjoint groups of causal units; more than one group means the
    /// concept is redundantly wired (scene-defining).
    pub causal_groups: Vec<Vec<usize>>,
    pub placement: Placement,
}

impl ConceptSpec {
    pub fn causal_units(&self) -> Vec<usize> {
        self.causal_groups.iter().flatten().copied().collect()
    }

    pub fn scene_defining(&self) -> bool {
        self.causal_groups.len() > 1
    }
}

/// Unit wired to a concept's layout but with no rendering pathway.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistractorSpec {
    pub unit: usize,
    pub concept: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactSpec {
    pub units: Vec<usize>,
    pub unit_weight: f64,
    pub placement: Placement,
}

/// Suppress `concept` wherever `context` is active, at render layer `layer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VetoSpec {
    pub concept: String,
    pub context: String,
    pub layer: usize,
    pub strength: f64,
}

/// Units not otherwise assigned read spatial noise driven by these latent
/// components and fire on roughly `active_fraction` of locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub z: Vec<usize>,
    pub active_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSpec {
    pub background: [f64; 3],
    /// Palette distance at which the segmenter's soft score reaches 0.
    pub match_radius: f64,
    /// Brightness modulation by intensity, +/- half this value.
    pub shading: f64,
    pub artifact_amplitude: f64,
    /// Unit-layer gains are drawn uniformly from this range.
    pub gain_range: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub schema_version: u32,
    pub name: String,
    pub rng_seed: u64,
    pub latent_dim: usize,
    /// Featuremap side at the unit layer; the image is `4 * grid` square.
    pub grid: usize,
    /// Width of the unit layer.
    pub units: usize,
    pub render: RenderSpec,
    pub concepts: Vec<ConceptSpec>,
    #[serde(default)]
    pub distractors: Vec<DistractorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifacts: Option<ArtifactSpec>,
    #[serde(default)]
    pub vetoes: Vec<VetoSpec>,
    pub noise: NoiseSpec,
}

fn p(z: usize, min: f64, max: f64) -> Param {
    Param { z, min, max }
}

impl WorldSpec {
    /// The default 64-unit world: sky, cloud, ground (redundantly wired),
    /// building and tree (part-bearing), door (anchored to buildings and
    /// vetoed by sky), four distractors, four artifact units, four noise
    /// units.
    pub fn default_world() -> Self {
        let range = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
        WorldSpec {
            schema_version: SCHEMA_VERSION,
            name: "default".into(),
            rng_seed: 2019,
            latent_dim: 40,
            grid: 8,
            units: 64,
            render: RenderSpec {
                background: [0.5, 0.5, 0.5],
                match_radius: 0.5,
                shading: 0.04,
                artifact_amplitude: 0.1,
                gain_range: [0.8, 1.2],
            },
            concepts: vec![
                ConceptSpec {
                    name: "sky".into(),
                    palette: [0.3, 0.55, 1.0],
                    threshold: 0.5,
                    parts: false,
                    unit_weight: 0.4,
                    causal_groups: vec![range(0, 6)],
                    placement: Placement::BandTop {
                        height: p(0, 1.6, 2.6),
                    },
                },
                ConceptSpec {
                    name: "cloud".into(),
                    palette: [0.95, 0.95, 0.95],
                    threshold: 0.5,
                    parts: false,
                    unit_weight: 0.4,
                    causal_groups: vec![range(6, 12)],
                    placement: Placement::Rect {
                        presence: Some(Presence {
                            z: 1,
                            probability: 0.5,
                        }),
                        anchor: None,
                        center_y: p(2, 0.7, 1.3),
                        center_x: p(3, 1.5, 6.5),
                        half_height: p(4, 0.5, 0.7),
                        half_width: p(5, 0.8, 1.4),
                    },
                },
                ConceptSpec {
                    name: "ground".into(),
                    palette: [0.55, 0.9, 0.1],
                    threshold: 0.5,
                    parts: false,
                    unit_weight: 1.2,
                    causal_groups: vec![range(12, 23), range(23, 34)],
                    placement: Placement::BandBottom {
                        height: p(6, 1.6, 2.4),
                    },
                },
                ConceptSpec {
                    name: "building".into(),
                    palette: [0.8, 0.2, 0.15],
                    threshold: 0.5,
                    parts: true,
                    unit_weight: 0.4,
                    causal_groups: vec![range(34, 40)],
                    placement: Placement::Rect {
                        presence: Some(Presence {
                            z: 7,
                            probability: 0.75,
                        }),
                        anchor: None,
                        center_y: p(8, 4.3, 4.8),
                        center_x: p(9, 2.0, 6.0),
                        half_height: p(10, 1.3, 1.7),
                        half_width: p(11, 1.3, 2.0),
                    },
                },
                ConceptSpec {
                    name: "tree".into(),
                    palette: [0.05, 0.35, 0.1],
                    threshold: 0.5,
                    parts: true,
                    unit_weight: 0.4,
                    causal_groups: vec![range(40, 46)],
                    placement: Placement::Rect {
                        presence: Some(Presence {
                            z: 12,
                            probability: 0.6,
                        }),
                        anchor: None,
                        center_y: p(13, 4.0, 5.5),
                        center_x: p(14, 0.8, 7.2),
                        half_height: p(15, 0.8, 1.2),
                        half_width: p(16, 0.6, 1.0),
                    },
                },
                ConceptSpec {
                    name: "door".into(),
                    palette: [1.0, 0.4, 0.9],
                    threshold: 0.5,
                    parts: false,
                    unit_weight: 0.5,
                    causal_groups: vec![range(46, 52)],
                    placement: Placement::Rect {
                        presence: Some(Presence {
                            z: 17,
                            probability: 0.85,
                        }),
                        anchor: Some("building".into()),
                        center_y: p(18, 0.6, 0.75),
                        center_x: p(19, 0.3, 0.7),
                        half_height: p(20, 0.6, 0.8),
                        half_width: p(21, 0.4, 0.55),
                    },
                },
            ],
            distractors: vec![
                DistractorSpec {
                    unit: 52,
                    concept: "building".into(),
                },
                DistractorSpec {
                    unit: 53,
                    concept: "tree".into(),
                },
                DistractorSpec {
                    unit: 54,
                    concept: "cloud".into(),
                },
                DistractorSpec {
                    unit: 55,
                    concept: "door".into(),
                },
            ],
            artifacts: Some(ArtifactSpec {
                units: range(56, 60),
                unit_weight: 1.0,
                placement: Placement::Rect {
                    presence: Some(Presence {
                        z: 22,
                        probability: 0.5,
                    }),
                    anchor: None,
                    center_y: p(23, 1.5, 6.5),
                    center_x: p(24, 1.5, 6.5),
                    half_height: p(25, 0.8, 1.2),
                    half_width: p(26, 0.8, 1.2),
                },
            }),
            vetoes: vec![VetoSpec {
                concept: "door".into(),
                context: "sky".into(),
                layer: 7,
                strength: 4.0,
            }],
            noise: NoiseSpec {
                z: range(27, 40),
                active_fraction: 0.02,
            },
        }
    }

    /// Same world with the artifact pattern switched off.
    pub fn without_artifacts(&self) -> Self {
        let mut s = self.clone();
        s.name = format!("{}-clean", self.name);
        s.render.artifact_amplitude = 0.0;
        s
    }

    /// No artifact units at all: the former artifact units become noise.
    pub fn without_artifact_units(&self) -> Self {
        let mut s = self.clone();
        s.name = format!("{}-no-artifact-units", self.name);
        s.artifacts = None;
        s
    }

    pub fn image_size(&self) -> usize {
        self.grid * 4
    }

    pub fn concept_index(&self, name: &str) -> Result<usize> {
        self.concepts
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }

    pub fn concept_names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: WorldSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).unwrap_or_default();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidWorld(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} (supported: {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.latent_dim == 0 || self.grid == 0 || self.units == 0 {
            return bad("latent_dim, grid and units must be positive".into());
        }
        let mut names = BTreeSet::new();
        for c in &self.concepts {
            if !names.insert(c.name.as_str()) {
                return bad(format!("duplicate concept `{}`", c.name));
            }
            if c.palette.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("palette of `{}` outside [0, 1]", c.name));
            }
            if !(c.threshold > 0.0) {
                return bad(format!("threshold of `{}` must be positive", c.name));
            }
        }
        let mut owner: BTreeMap<usize, String> = BTreeMap::new();
        let mut claim = |u: usize, who: String| -> Result<()> {
            if u >= self.units {
                return Err(Error::InvalidWorld(format!(
                    "unit {u} ({who}) outside layer width {}",
                    self.units
                )));
            }
            if let Some(prev) = owner.insert(u, who.clone()) {
                return Err(Error::InvalidWorld(format!(
                    "unit {u} claimed by both {prev} and {who}"
                )));
            }
            Ok(())
        };
        for c in &self.concepts {
            for u in c.causal_units() {
                claim(u, format!("causal:{}", c.name))?;
            }
        }
        for d in &self.distractors {
            self.concept_index(&d.concept)?;
            claim(d.unit, format!("distractor:{}", d.concept))?;
        }
        if let Some(a) = &self.artifacts {
            for &u in &a.units {
                claim(u, "artifact".into())?;
            }
        }
        let mut placements: Vec<&Placement> = self.concepts.iter().map(|c| &c.placement).collect();
        if let Some(a) = &self.artifacts {
            if a.placement.anchor().is_some() {
                return bad("artifact placement cannot be anchored".into());
            }
            placements.push(&a.placement);
        }
        for pl in placements {
            if let Some(z) = pl.z_indices().into_iter().find(|&z| z >= self.latent_dim) {
                return bad(format!("placement reads z[{z}] but latent_dim is {}", self.latent_dim));
            }
        }
        for (i, c) in self.concepts.iter().enumerate() {
            if let Some(a) = c.placement.anchor() {
                let ai = self.concept_index(a)?;
                if ai >= i {
                    return bad(format!("`{}` anchored to later concept `{a}`", c.name));
                }
            }
        }
        if let Some(z) = self.noise.z.iter().find(|&&z| z >= self.latent_dim) {
            return bad(format!("noise reads z[{z}] but latent_dim is {}", self.latent_dim));
        }
        if !(0.0..1.0).contains(&self.noise.active_fraction) || self.noise.active_fraction == 0.0 {
            return bad("noise.active_fraction must be in (0, 1)".into());
        }
        for v in &self.vetoes {
            self.concept_index(&v.concept)?;
            self.concept_index(&v.context)?;
            if v.layer <= UNIT_LAYER || v.layer > NUM_LAYERS {
                return bad(format!(
                    "veto layer {} must come after the causal layer {UNIT_LAYER} and be at most {NUM_LAYERS}",
                    v.layer
                ));
            }
        }
        Ok(())
    }
}

/// Role of a unit in the unit layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum UnitRole {
    Causal { concept: String, group: usize },
    Distractor { concept: String },
    Artifact,
    Noise,
}

/// One computation step of a convolutional layer.
#[derive(Clone, Debug)]
pub enum Step {
    Conv { weight: Arc<Tensor>, bias: Vec<f64> },
    Upsample { factor: usize },
    Relu,
}

impl Step {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Step::Conv { weight, bias } => tensor::conv2d(x, weight, bias),
            Step::Upsample { factor } => {
                let (h, w) = x.spatial();
                tensor::upsample_nearest(x, h * factor, w * factor)
            }
            Step::Relu => Ok(tensor::relu(x)),
        }
    }
}

#[derive(Clone, Debug)]
enum LayerKind {
    Latent,
    Placement,
    Layout,
    Conv(Vec<Step>),
}

/// A featuremap override applied right after a layer is computed.
#[derive(Clone, Debug, PartialEq)]
pub enum Edit {
    /// Replace the whole featuremap.
    Override { layer: usize, featuremap: Tensor },
    /// `r[u, p] <- strength * target[k] + (1 - strength) * r[u, p]` for the
    /// k-th listed unit `u` and every cell `p` set in `cells`.
    Blend {
        layer: usize,
        units: Vec<usize>,
        cells: Vec<bool>,
        target: Vec<f64>,
        strength: f64,
    },
}

impl Edit {
    pub fn layer(&self) -> usize {
        match self {
            Edit::Override { layer, .. } | Edit::Blend { layer, .. } => *layer,
        }
    }

    fn apply(&self, r: &mut Tensor) -> Result<()> {
        match self {
            Edit::Override { featuremap, .. } => {
                if featuremap.shape() != r.shape() {
                    return shape_err(format!(
                        "override {:?} for featuremap {:?}",
                        featuremap.shape(),
                        r.shape()
                    ));
                }
                *r = featuremap.clone();
            }
            Edit::Blend {
                units,
                cells,
                target,
                strength,
                ..
            } => {
                let (c, h, w) = r.dims3()?;
                if cells.len() != h * w {
                    return shape_err(format!("{} cells for a {h}x{w} featuremap", cells.len()));
                }
                if target.len() != units.len() {
                    return shape_err("one target value per unit required");
                }
                let data = r.data_mut();
                for (&u, &t) in units.iter().zip(target) {
                    if u >= c {
                        return invalid(format!("unit {u} outside layer width {c}"));
                    }
                    let plane = &mut data[u * h * w..(u + 1) * h * w];
                    for (v, &on) in plane.iter_mut().zip(cells) {
                        if on {
                            *v = strength * t + (1.0 - strength) * *v;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Everything computed for one latent sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub z: Vec<f64>,
    /// Featuremaps of layers 1..=8 (index 0 is layer 1).
    pub layers: Vec<Tensor>,
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Post-veto concept intensities, `[concepts, H, W]`.
    pub intensities: Tensor,
    /// Index of the concept painted at each pixel.
    pub labels: Vec<Option<usize>>,
}

impl ForwardTrace {
    pub fn layer(&self, layer: usize) -> &Tensor {
        &self.layers[layer - 1]
    }

    /// Pixels where the generator painted concept `c`.
    pub fn visible_mask(&self, c: usize) -> BinaryMask {
        let (h, w) = self.intensities.spatial();
        BinaryMask::new(h, w, self.labels.iter().map(|&l| l == Some(c)).collect())
            .expect("label map matches image")
    }

    /// Pixels where concept `c`'s own intensity exceeds its threshold,
    /// ignoring occlusion.
    pub fn intensity_support(&self, c: usize, threshold: f64) -> BinaryMask {
        let (h, w) = self.intensities.spatial();
        BinaryMask::new(
            h,
            w,
            self.intensities
                .channel_slice(c)
                .iter()
                .map(|&v| v > threshold)
                .collect(),
        )
        .expect("intensity plane matches image")
    }

    pub fn artifact_intensity(&self) -> &[f64] {
        let last = &self.layers[NUM_LAYERS - 1];
        last.channel_slice(last.channels() - 1)
    }
}

/// A validated spec together with its generated weights.
#[derive(Clone, Debug)]
pub struct World {
    spec: WorldSpec,
    layers: Vec<LayerKind>,
    shapes: Vec<Vec<usize>>,
    roles: Vec<UnitRole>,
    noise_units: Vec<usize>,
    /// Per noise unit: `[g*g, K]` projection of the noise latents.
    noise_proj: Vec<Vec<f64>>,
    hash: String,
}

/// Object rectangle in cell coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Rect {
    present: f64,
    y0: f64,
    y1: f64,
    x0: f64,
    x1: f64,
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn binomial_blur() -> [f64; 9] {
    [1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0].map(|v| v / 16.0)
}

fn mild_blur() -> [f64; 9] {
    [0.0, 1.0, 0.0, 1.0, 4.0, 1.0, 0.0, 1.0, 0.0].map(|v| v / 8.0)
}

fn depthwise(channels: usize, kernel: [f64; 9]) -> Tensor {
    let mut w = Tensor::zeros(&[channels, channels, 3, 3]);
    for c in 0..channels {
        let base = (c * channels + c) * 9;
        w.data_mut()[base..base + 9].copy_from_slice(&kernel);
    }
    w
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let g = spec.grid;
        let n_concepts = spec.concepts.len();
        let channels = n_concepts + 1;

        let mut roles = vec![UnitRole::Noise; spec.units];
        for c in &spec.concepts {
            for (gi, group) in c.causal_groups.iter().enumerate() {
                for &u in group {
                    roles[u] = UnitRole::Causal {
                        concept: c.name.clone(),
                        group: gi,
                    };
                }
            }
        }
        for d in &spec.distractors {
            roles[d.unit] = UnitRole::Distractor {
                concept: d.concept.clone(),
            };
        }
        if let Some(a) = &spec.artifacts {
            for &u in &a.units {
                roles[u] = UnitRole::Artifact;
            }
        }
        let noise_units: Vec<usize> = (0..spec.units)
            .filter(|&u| roles[u] == UnitRole::Noise)
            .collect();

        let k = spec.noise.z.len();
        let mut wrng = rng::stream(spec.rng_seed, "noise-weights", 0);
        let noise_proj: Vec<Vec<f64>> = noise_units
            .iter()
            .map(|_| {
                (0..g * g * k)
                    .map(|_| wrng.sample::<f64, _>(StandardNormal) / (k.max(1) as f64).sqrt())
                    .collect()
            })
            .collect();

        // layer 3 channels: one layout per concept, artifact layout, one noise field per noise unit
        let layout_channels = channels + noise_units.len();
        let mut grng = rng::stream(spec.rng_seed, "unit-gains", 0);
        let [gmin, gmax] = spec.render.gain_range;
        let gain = |r: &mut rand_chacha::ChaCha8Rng| gmin + (gmax - gmin) * r.random::<f64>();

        let mut w4 = Tensor::zeros(&[spec.units, layout_channels, 1, 1]);
        let mut b4 = vec![0.0; spec.units];
        for (ci, c) in spec.concepts.iter().enumerate() {
            for u in c.causal_units() {
                w4.data_mut()[u * layout_channels + ci] = gain(&mut grng);
            }
        }
        for d in &spec.distractors {
            let ci = spec.concept_index(&d.concept)?;
            w4.data_mut()[d.unit * layout_channels + ci] = gain(&mut grng);
        }
        if let Some(a) = &spec.artifacts {
            for &u in &a.units {
                w4.data_mut()[u * layout_channels + n_concepts] = gain(&mut grng);
            }
        }
        let noise_bias = normal_quantile(1.0 - spec.noise.active_fraction);
        for (ni, &u) in noise_units.iter().enumerate() {
            w4.data_mut()[u * layout_channels + channels + ni] = 1.0;
            b4[u] = -noise_bias;
        }

        let mut mix = Tensor::zeros(&[channels, spec.units, 1, 1]);
        for (ci, c) in spec.concepts.iter().enumerate() {
            for u in c.causal_units() {
                mix.data_mut()[ci * spec.units + u] = c.unit_weight;
            }
        }
        if let Some(a) = &spec.artifacts {
            for &u in &a.units {
                mix.data_mut()[n_concepts * spec.units + u] = a.unit_weight;
            }
        }

        let zero_c = vec![0.0; channels];
        let mut render: Vec<Vec<Step>> = vec![
            vec![
                Step::Conv {
                    weight: Arc::new(mix),
                    bias: zero_c.clone(),
                },
                Step::Upsample { factor: 2 },
                Step::Conv {
                    weight: Arc::new(depthwise(channels, binomial_blur())),
                    bias: zero_c.clone(),
                },
                Step::Relu,
            ],
            vec![
                Step::Upsample { factor: 2 },
                Step::Conv {
                    weight: Arc::new(depthwise(channels, binomial_blur())),
                    bias: zero_c.clone(),
                },
                Step::Relu,
            ],
            vec![
                Step::Conv {
                    weight: Arc::new(depthwise(channels, mild_blur())),
                    bias: zero_c.clone(),
                },
                Step::Relu,
            ],
            vec![
                Step::Conv {
                    weight: Arc::new(depthwise(channels, mild_blur())),
                    bias: zero_c.clone(),
                },
                Step::Relu,
            ],
        ];
        for layer in 5..=NUM_LAYERS {
            let here: Vec<&VetoSpec> = spec.vetoes.iter().filter(|v| v.layer == layer).collect();
            if here.is_empty() {
                continue;
            }
            let mut vw = Tensor::zeros(&[channels, channels, 1, 1]);
            for c in 0..channels {
                vw.data_mut()[c * channels + c] = 1.0;
            }
            for v in here {
                let ci = spec.concept_index(&v.concept)?;
                let xi = spec.concept_index(&v.context)?;
                vw.data_mut()[ci * channels + xi] -= v.strength;
            }
            render[layer - 5].push(Step::Conv {
                weight: Arc::new(vw),
                bias: zero_c.clone(),
            });
            render[layer - 5].push(Step::Relu);
        }

        let mut layers = vec![
            LayerKind::Latent,
            LayerKind::Placement,
            LayerKind::Layout,
            LayerKind::Conv(vec![
                Step::Conv {
                    weight: Arc::new(w4),
                    bias: b4,
                },
                Step::Relu,
            ]),
        ];
        layers.extend(render.into_iter().map(LayerKind::Conv));

        let n_params = PARAMS_PER_OBJECT * channels + k;
        let img = spec.image_size();
        let shapes = vec![
            vec![spec.latent_dim, 1, 1],
            vec![n_params, 1, 1],
            vec![layout_channels, g, g],
            vec![spec.units, g, g],
            vec![channels, 2 * g, 2 * g],
            vec![channels, img, img],
            vec![channels, img, img],
            vec![channels, img, img],
        ];
        let hash = spec.hash();
        Ok(Self {
            spec,
            layers,
            shapes,
            roles,
            noise_units,
            noise_proj,
            hash,
        })
    }

    pub fn default_world() -> Self {
        Self::new(WorldSpec::default_world()).expect("default world is valid")
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn roles(&self) -> &[UnitRole] {
        &self.roles
    }

    pub fn noise_units(&self) -> &[usize] {
        &self.noise_units
    }

    pub fn image_size(&self) -> usize {
        self.spec.image_size()
    }

    pub fn num_concepts(&self) -> usize {
        self.spec.concepts.len()
    }

    pub fn layer_shape(&self, layer: usize) -> Result<&[usize]> {
        self.check_layer(layer)?;
        Ok(&self.shapes[layer - 1])
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > NUM_LAYERS {
            return invalid(format!("layer {layer} outside 1..={NUM_LAYERS}"));
        }
        Ok(())
    }

    /// Steps of a convolutional layer (layers 4..=8).
    pub fn conv_steps(&self, layer: usize) -> Result<&[Step]> {
        self.check_layer(layer)?;
        match &self.layers[layer - 1] {
            LayerKind::Conv(steps) => Ok(steps),
            _ => invalid(format!("layer {layer} is procedural, not convolutional")),
        }
    }

    /// Latent for seed `seed` from the world's `z` stream.
    pub fn z_for_seed(&self, seed: u64) -> Vec<f64> {
        sample_z(&self.spec, &mut rng::stream(self.spec.rng_seed, "z", seed))
    }

    pub fn forward(&self, z: &[f64], edits: &[Edit]) -> Result<ForwardTrace> {
        if z.len() != self.spec.latent_dim {
            return shape_err(format!("z has {} entries, expected {}", z.len(), self.spec.latent_dim));
        }
        for e in edits {
            self.check_layer(e.layer())?;
        }
        let mut layers: Vec<Tensor> = Vec::with_capacity(NUM_LAYERS);
        for (li, kind) in self.layers.iter().enumerate() {
            let mut r = match kind {
                LayerKind::Latent => Tensor::new(vec![z.len(), 1, 1], z.to_vec())?,
                LayerKind::Placement => self.placement(layers[0].data()),
                LayerKind::Layout => self.layout(layers[1].data())?,
                LayerKind::Conv(steps) => run_steps(steps, &layers[li - 1])?,
            };
            for e in edits.iter().filter(|e| e.layer() == li + 1) {
                e.apply(&mut r)?;
            }
            layers.push(r);
        }
        let (image, labels, intensities) = self.render(&layers[NUM_LAYERS - 1])?;
        Ok(ForwardTrace {
            z: z.to_vec(),
            layers,
            image,
            intensities,
            labels,
        })
    }

    /// Featuremap of `layer` without edits, skipping everything after it.
    pub fn featuremap(&self, z: &[f64], layer: usize) -> Result<Tensor> {
        self.check_layer(layer)?;
        if z.len() != self.spec.latent_dim {
            return shape_err(format!("z has {} entries, expected {}", z.len(), self.spec.latent_dim));
        }
        let mut r = Tensor::new(vec![z.len(), 1, 1], z.to_vec())?;
        let mut placement = Tensor::zeros(&[0]);
        for (li, kind) in self.layers.iter().enumerate().take(layer) {
            r = match kind {
                LayerKind::Latent => r,
                LayerKind::Placement => {
                    placement = self.placement(z);
                    placement.clone()
                }
                LayerKind::Layout => self.layout(placement.data())?,
                LayerKind::Conv(steps) => run_steps(steps, &r)?,
            };
            debug_assert_eq!(r.shape(), self.shapes[li].as_slice());
        }
        Ok(r)
    }

    /// Recompute layers after `from` given an already-computed trace whose
    /// layer `from` has been replaced by `featuremap`.
    pub fn forward_from(&self, base: &ForwardTrace, from: usize, featuremap: Tensor) -> Result<ForwardTrace> {
        self.check_layer(from)?;
        if featuremap.shape() != base.layers[from - 1].shape() {
            return shape_err("featuremap shape differs from the traced layer");
        }
        let mut layers = base.layers[..from - 1].to_vec();
        layers.push(featuremap);
        for li in from..NUM_LAYERS {
            let r = match &self.layers[li] {
                LayerKind::Latent => unreachable!("latent is layer 1"),
                LayerKind::Placement => self.placement(layers[0].data()),
                LayerKind::Layout => self.layout(layers[1].data())?,
                LayerKind::Conv(steps) => run_steps(steps, &layers[li - 1])?,
            };
            layers.push(r);
        }
        let (image, labels, intensities) = self.render(&layers[NUM_LAYERS - 1])?;
        Ok(ForwardTrace {
            z: base.z.clone(),
            layers,
            image,
            intensities,
            labels,
        })
    }

    fn rect_for(&self, placement: &Placement, z: &[f64], anchor: Option<Rect>) -> Rect {
        let g = self.spec.grid as f64;
        match placement {
            Placement::BandTop { height } => Rect {
                present: 1.0,
                y0: 0.0,
                y1: height.eval(z),
                x0: 0.0,
                x1: g,
            },
            Placement::BandBottom { height } => Rect {
                present: 1.0,
                y0: g - height.eval(z),
                y1: g,
                x0: 0.0,
                x1: g,
            },
            Placement::Rect {
                presence,
                center_y,
                center_x,
                half_height,
                half_width,
                ..
            } => {
                let mut present = presence
                    .as_ref()
                    .map_or(1.0, |p| if normal_cdf(z[p.z]) < p.probability { 1.0 } else { 0.0 });
                let (hh, hw) = (half_height.eval(z), half_width.eval(z));
                let (cy, cx) = match anchor {
                    Some(a) => (
                        a.y0 + center_y.eval(z) * (a.y1 - a.y0),
                        a.x0 + center_x.eval(z) * (a.x1 - a.x0),
                    ),
                    None => (center_y.eval(z), center_x.eval(z)),
                };
                let mut r = Rect {
                    present,
                    y0: cy - hh,
                    y1: cy + hh,
                    x0: cx - hw,
                    x1: cx + hw,
                };
                if let Some(a) = anchor {
                    present *= a.present;
                    r = Rect {
                        present,
                        y0: r.y0.max(a.y0),
                        y1: r.y1.min(a.y1),
                        x0: r.x0.max(a.x0),
                        x1: r.x1.min(a.x1),
                    };
                }
                r
            }
        }
    }

    /// Layer 2 from the latent.
    fn placement(&self, z: &[f64]) -> Tensor {
        let mut rects: Vec<Rect> = Vec::with_capacity(self.spec.concepts.len() + 1);
        for c in &self.spec.concepts {
            let anchor = c
                .placement
                .anchor()
                .and_then(|a| self.spec.concept_index(a).ok())
                .map(|i| rects[i]);
            rects.push(self.rect_for(&c.placement, z, anchor));
        }
        rects.push(match &self.spec.artifacts {
            Some(a) if !a.units.is_empty() => self.rect_for(&a.placement, z, None),
            _ => Rect {
                present: 0.0,
                y0: 0.0,
                y1: 0.0,
                x0: 0.0,
                x1: 0.0,
            },
        });
        let mut data: Vec<f64> = rects
            .iter()
            .flat_map(|r| [r.present, r.y0, r.y1, r.x0, r.x1])
            .collect();
        data.extend(self.spec.noise.z.iter().map(|&k| z[k]));
        let n = data.len();
        Tensor::new(vec![n, 1, 1], data).expect("placement length")
    }

    /// Layer 3 from the placement parameters.
    fn layout(&self, params: &[f64]) -> Result<Tensor> {
        let g = self.spec.grid;
        let channels = self.spec.concepts.len() + 1;
        let k = self.spec.noise.z.len();
        let expected = PARAMS_PER_OBJECT * channels + k;
        if params.len() != expected {
            return shape_err(format!("placement has {} values, expected {expected}", params.len()));
        }
        let mut data = Vec::with_capacity((channels + self.noise_units.len()) * g * g);
        for ch in 0..channels {
            let r = &params[ch * PARAMS_PER_OBJECT..(ch + 1) * PARAMS_PER_OBJECT];
            let (present, y0, y1, x0, x1) = (r[0], r[1], r[2], r[3], r[4]);
            for i in 0..g {
                let oy = overlap(i as f64, i as f64 + 1.0, y0, y1);
                for j in 0..g {
                    data.push(present * oy * overlap(j as f64, j as f64 + 1.0, x0, x1));
                }
            }
        }
        let noise_z = &params[PARAMS_PER_OBJECT * channels..];
        for proj in &self.noise_proj {
            for cell in 0..g * g {
                let row = &proj[cell * k..(cell + 1) * k];
                data.push(row.iter().zip(noise_z).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::new(vec![channels + self.noise_units.len(), g, g], data)
    }

    /// Paint the image from the final layer.
    fn render(&self, last: &Tensor) -> Result<(Tensor, Vec<Option<usize>>, Tensor)> {
        let (ch, h, w) = last.dims3()?;
        let n_concepts = self.spec.concepts.len();
        debug_assert_eq!(ch, n_concepts + 1);
        let rs = &self.spec.render;
        let mut image = vec![0.0; h * w * 3];
        let mut labels = vec![None; h * w];
        let art = last.channel_slice(n_concepts);
        for i in 0..h {
            for j in 0..w {
                let px = i * w + j;
                let mut color = rs.background;
                for (ci, c) in self.spec.concepts.iter().enumerate() {
                    let v = last.data()[ci * h * w + px];
                    if v > c.threshold {
                        labels[px] = Some(ci);
                        let shade = rs.shading * ((v / (4.0 * c.threshold)).min(1.0) - 0.5);
                        color = c.palette.map(|p| p + shade);
                    }
                }
                let a = art[px].clamp(0.0, 1.0);
                if a > 0.0 && rs.artifact_amplitude != 0.0 {
                    let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                    let d = rs.artifact_amplitude * a * sign;
                    color = color.map(|v| v + d);
                }
                for (k, v) in color.iter().enumerate() {
                    image[px * 3 + k] = v.clamp(0.0, 1.0);
                }
            }
        }
        let intensities = Tensor::new(
            vec![n_concepts, h, w],
            last.data()[..n_concepts * h * w].to_vec(),
        )?;
        Ok((Tensor::new(vec![h, w, 3], image)?, labels, intensities))
    }

    /// Image pixels an edit at `cells` of `layer` can influence.
    pub fn receptive_field(&self, layer: usize, cells: &BinaryMask) -> Result<BinaryMask> {
        let shape = self.layer_shape(layer)?;
        let (h, w) = (shape[1], shape[2]);
        if cells.height() != h || cells.width() != w {
            return shape_err(format!("cell mask {}x{} for layer {h}x{w}", cells.height(), cells.width()));
        }
        let img = self.image_size();
        if layer < UNIT_LAYER {
            // placement and layout layers feed every location
            return Ok(if cells.is_empty() {
                BinaryMask::empty(img, img)
            } else {
                BinaryMask::from_fn(img, img, |_, _| true)
            });
        }
        let mut m = cells.clone();
        for li in layer + 1..=NUM_LAYERS {
            for step in self.conv_steps(li)? {
                m = match step {
                    Step::Conv { weight, .. } => dilate(&m, weight.shape()[2] / 2),
                    Step::Upsample { factor } => {
                        let (oh, ow) = (m.height() * factor, m.width() * factor);
                        BinaryMask::from_fn(oh, ow, |i, j| m.get(i / factor, j / factor))
                    }
                    Step::Relu => m,
                };
            }
        }
        Ok(m)
    }

    /// Cells of `layer` that any pixel in `pixels` depends on.
    pub fn dependency_cells(&self, layer: usize, pixels: &BinaryMask) -> Result<BinaryMask> {
        if layer < UNIT_LAYER {
            return invalid("dependency cones are defined for convolutional layers only");
        }
        let mut m = pixels.clone();
        for li in (layer + 1..=NUM_LAYERS).rev() {
            for step in self.conv_steps(li)?.iter().rev() {
                m = match step {
                    Step::Conv { weight, .. } => dilate(&m, weight.shape()[2] / 2),
                    Step::Upsample { factor } => {
                        let (oh, ow) = (m.height() / factor, m.width() / factor);
                        let mut out = BinaryMask::empty(oh, ow);
                        for i in 0..m.height() {
                            for j in 0..m.width() {
                                if m.get(i, j) {
                                    out.set(i / factor, j / factor, true);
                                }
                            }
                        }
                        out
                    }
                    Step::Relu => m,
                };
            }
        }
        Ok(m)
    }

    /// Image pixels covered by featuremap cells of `layer` under
    /// nearest-neighbour upsampling.
    pub fn footprint(&self, layer: usize, cells: &BinaryMask) -> Result<BinaryMask> {
        let shape = self.layer_shape(layer)?;
        let (h, w) = (shape[1], shape[2]);
        if cells.height() != h || cells.width() != w {
            return shape_err("cell mask does not match layer");
        }
        let img = self.image_size();
        Ok(BinaryMask::from_fn(img, img, |i, j| {
            cells.get(tensor::nearest_source(i, h, img), tensor::nearest_source(j, w, img))
        }))
    }

    /// Per-unit activation quantiles `(50%, 90%, 99%)` over `n_samples`
    /// latents drawn from seeds `seed_start..`.
    pub fn unit_percentiles(&self, layer: usize, n_samples: usize, seed_start: u64) -> Result<Vec<[f64; 3]>> {
        if n_samples < 100 {
            return invalid(format!("unit_percentiles needs at least 100 samples, got {n_samples}"));
        }
        let shape = self.layer_shape(layer)?.to_vec();
        let (d, plane) = (shape[0], shape[1] * shape[2]);
        let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(n_samples * plane); d];
        for s in 0..n_samples as u64 {
            let trace = self.forward(&self.z_for_seed(seed_start + s), &[])?;
            let r = trace.layer(layer);
            for (u, vals) in values.iter_mut().enumerate() {
                vals.extend_from_slice(r.channel_slice(u));
            }
        }
        Ok(values.iter().map(|v| percentiles(v)).collect())
    }
}

/// `(50%, 90%, 99%)` quantiles of raw activation values.
pub fn percentiles(values: &[f64]) -> [f64; 3] {
    let s = sorted(values);
    [0.5, 0.9, 0.99].map(|q| quantile_sorted(&s, q))
}

fn run_steps(steps: &[Step], input: &Tensor) -> Result<Tensor> {
    let mut x = input.clone();
    for s in steps {
        x = s.apply(&x)?;
    }
    Ok(x)
}

fn dilate(m: &BinaryMask, r: usize) -> BinaryMask {
    if r == 0 {
        return m.clone();
    }
    let (h, w) = (m.height(), m.width());
    BinaryMask::from_fn(h, w, |i, j| {
        let (i0, i1) = (i.saturating_sub(r), (i + r).min(h - 1));
        let (j0, j1) = (j.saturating_sub(r), (j + r).min(w - 1));
        (i0..=i1).any(|a| (j0..=j1).any(|b| m.get(a, b)))
    })
}

/// `|z|` standard-normal draws.
pub fn sample_z(spec: &WorldSpec, rng: &mut impl Rng) -> Vec<f64> {
    (0..spec.latent_dim).map(|_| rng.sample(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::default_world()
    }

    #[test]
    fn z_is_deterministic_per_seed_and_stream() {
        let spec = WorldSpec::default_world();
        let a = sample_z(&spec, &mut rng::stream(1, "z", 0));
        let b = sample_z(&spec, &mut rng::stream(1, "z", 0));
        let c = sample_z(&spec, &mut rng::stream(1, "other", 0));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn z_coordinates_have_zero_mean() {
        let spec = WorldSpec::default_world();
        let mut r = rng::stream(3, "z-mean", 0);
        let n = 10_000;
        let mut sums = vec![0.0; spec.latent_dim];
        for _ in 0..n {
            for (s, v) in sums.iter_mut().zip(sample_z(&spec, &mut r)) {
                *s += v;
            }
        }
        for s in sums {
            assert!((s / n as f64).abs() < 0.05);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let w = world();
        let z = w.z_for_seed(11);
        let a = w.forward(&z, &[]).unwrap();
        let b = w.forward(&z, &[]).unwrap();
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.image.shape(), &[32, 32, 3]);
    }

    #[test]
    fn layer_shapes_match_declared() {
        let w = world();
        let t = w.forward(&w.z_for_seed(0), &[]).unwrap();
        for l in 1..=NUM_LAYERS {
            assert_eq!(t.layer(l).shape(), w.layer_shape(l).unwrap());
        }
    }

    fn all_cells(g: usize) -> Vec<bool> {
        vec![true; g * g]
    }

    #[test]
    fn zeroing_causal_units_clears_intensity() {
        let w = world();
        for (ci, c) in w.spec().concepts.iter().enumerate() {
            let units = c.causal_units();
            let edit = Edit::Blend {
                layer: 4,
                target: vec![0.0; units.len()],
                units,
                cells: all_cells(8),
                strength: 1.0,
            };
            for seed in 0..5 {
                let t = w.forward(&w.z_for_seed(seed), std::slice::from_ref(&edit)).unwrap();
                assert!(t.intensities.channel_slice(ci).iter().all(|&v| v == 0.0), "{}", c.name);
            }
        }
    }

    #[test]
    fn distractor_edits_leave_image_identical() {
        let w = world();
        let units: Vec<usize> = w.spec().distractors.iter().map(|d| d.unit).collect();
        for seed in 0..5 {
            let z = w.z_for_seed(seed);
            let base = w.forward(&z, &[]).unwrap();
            for target in [0.0, 5.0] {
                let e = Edit::Blend {
                    layer: 4,
                    units: units.clone(),
                    cells: all_cells(8),
                    target: vec![target; units.len()],
                    strength: 1.0,
                };
                let t = w.forward(&z, &[e]).unwrap();
                assert_eq!(t.image, base.image);
            }
        }
    }

    #[test]
    fn override_shape_mismatch_errors() {
        let w = world();
        let e = Edit::Override {
            layer: 4,
            featuremap: Tensor::zeros(&[3, 8, 8]),
        };
        assert!(matches!(w.forward(&w.z_for_seed(0), &[e]), Err(Error::Shape(_))));
    }

    #[test]
    fn edit_leaves_earlier_layers_untouched() {
        let w = world();
        let z = w.z_for_seed(4);
        let base = w.forward(&z, &[]).unwrap();
        let e = Edit::Override {
            layer: 5,
            featuremap: Tensor::zeros(w.layer_shape(5).unwrap()),
        };
        let t = w.forward(&z, &[e]).unwrap();
        for l in 1..5 {
            assert_eq!(t.layer(l), base.layer(l));
        }
        assert!(t.layer(8).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn featuremap_matches_trace() {
        let w = world();
        let z = w.z_for_seed(2);
        let t = w.forward(&z, &[]).unwrap();
        for l in 1..=NUM_LAYERS {
            assert_eq!(&w.featuremap(&z, l).unwrap(), t.layer(l));
        }
    }

    #[test]
    fn forward_from_matches_forward_with_override() {
        let w = world();
        let z = w.z_for_seed(9);
        let base = w.forward(&z, &[]).unwrap();
        let fm = tensor::scale(base.layer(4), 0.5);
        let a = w.forward_from(&base, 4, fm.clone()).unwrap();
        let b = w
            .forward(&z, &[Edit::Override { layer: 4, featuremap: fm }])
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shipped_default_world_file_matches() {
        let text = include_str!("../../../worlds/default.world");
        assert_eq!(WorldSpec::from_toml(text).unwrap(), WorldSpec::default_world());
    }

    #[test]
    fn toml_round_trip() {
        let s = WorldSpec::default_world();
        let back = WorldSpec::from_toml(&s.to_toml().unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
    }

    #[test]
    fn validation_rejects_overlapping_roles() {
        let mut s = WorldSpec::default_world();
        s.distractors[0].unit = 0;
        assert!(matches!(World::new(s), Err(Error::InvalidWorld(_))));
    }

    #[test]
    fn validation_rejects_bad_z_index() {
        let mut s = WorldSpec::default_world();
        s.noise.z.push(99);
        assert!(World::new(s).is_err());
    }

    #[test]
    fn validation_rejects_early_veto() {
        let mut s = WorldSpec::default_world();
        s.vetoes[0].layer = 4;
        assert!(World::new(s).is_err());
    }

    #[test]
    fn validation_rejects_wrong_schema() {
        let mut s = WorldSpec::default_world();
        s.schema_version = 99;
        assert!(World::new(s).is_err());
    }

    #[test]
    fn percentiles_of_dead_and_constant_units() {
        assert_eq!(percentiles(&vec![0.0; 500]), [0.0; 3]);
        assert_eq!(percentiles(&vec![0.75; 500]), [0.75; 3]);
        let mut r = rng::stream(5, "uniform", 0);
        let u: Vec<f64> = (0..20_000).map(|_| r.random::<f64>()).collect();
        assert!((percentiles(&u)[2] - 0.99).abs() < 0.01);
    }

    #[test]
    fn unit_percentiles_requires_samples() {
        assert!(world().unit_percentiles(4, 50, 0).is_err());
    }

    #[test]
    fn receptive_field_contains_all_changes() {
        let w = world();
        let z = w.z_for_seed(21);
        let base = w.forward(&z, &[]).unwrap();
        let mut cells = vec![false; 64];
        cells[3 * 8 + 5] = true;
        let units: Vec<usize> = (0..64).collect();
        let e = Edit::Blend {
            layer: 4,
            units: units.clone(),
            cells: cells.clone(),
            target: vec![3.0; 64],
            strength: 1.0,
        };
        let t = w.forward(&z, &[e]).unwrap();
        let rf = w
            .receptive_field(4, &BinaryMask::new(8, 8, cells).unwrap())
            .unwrap();
        let mut changed = 0;
        for i in 0..32 {
            for j in 0..32 {
                let px = (i * 32 + j) * 3;
                let diff = (0..3).any(|k| t.image.data()[px + k] != base.image.data()[px + k]);
                if diff {
                    changed += 1;
                    assert!(rf.get(i, j), "pixel ({i},{j}) changed outside receptive field");
                }
            }
        }
        assert!(changed > 0);
    }
}
