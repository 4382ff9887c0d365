//! Pixel-only segmenter for rendered images, plus part-class expansion.
//!
//! Each concept's soft score is `max(0, 1 - ||x - palette|| / match_radius)`
//! and its mask is `soft > threshold`. Renders are painted with exactly one
//! palette per pixel (later concepts cover earlier ones), and palettes are
//! far apart relative to the radius, so base-concept masks never overlap on
//! unedited renders.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{BinaryMask, Tensor};
use crate::world::WorldSpec;

pub const PART_SUFFIXES: [&str; 4] = ["t", "b", "l", "r"];

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSet {
    pub names: Vec<String>,
    pub masks: Vec<BinaryMask>,
    /// Soft scores in `[0, 1]`, `[H, W]` each.
    pub soft: Vec<Vec<f64>>,
}

impl SegmentationSet {
    pub fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }

    pub fn mask(&self, name: &str) -> Result<&BinaryMask> {
        Ok(&self.masks[self.index(name)?])
    }
}

/// Segment an `[H, W, 3]` image against the world's concept palettes.
pub fn segment(image: &Tensor, spec: &WorldSpec) -> Result<SegmentationSet> {
    let size = spec.image_size();
    if image.shape() != [size, size, 3] {
        return shape_err(format!("image {:?}, expected [{size}, {size}, 3]", image.shape()));
    }
    let radius = spec.render.match_radius;
    let mut set = SegmentationSet {
        names: Vec::with_capacity(spec.concepts.len()),
        masks: Vec::with_capacity(spec.concepts.len()),
        soft: Vec::with_capacity(spec.concepts.len()),
    };
    for c in &spec.concepts {
        if c.palette.iter().any(|v| !v.is_finite()) {
            return Err(Error::UnknownConcept(format!("{} (palette not finite)", c.name)));
        }
        let soft: Vec<f64> = image
            .data()
            .chunks_exact(3)
            .map(|px| {
                let d2: f64 = px.iter().zip(&c.palette).map(|(a, b)| (a - b).powi(2)).sum();
                (1.0 - d2.sqrt() / radius).max(0.0)
            })
            .collect();
        let mask = BinaryMask::new(size, size, soft.iter().map(|&s| s > c.threshold).collect())?;
        set.names.push(c.name.clone());
        set.masks.push(mask);
        set.soft.push(soft);
    }
    Ok(set)
}

/// A 4-connected component with its inclusive bounding box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<usize>,
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// 4-connected components, ordered by their first pixel in row-major order.
pub fn connected_components(m: &BinaryMask) -> Vec<Component> {
    let (h, w) = (m.height(), m.width());
    let mut parent: Vec<usize> = (0..h * w).collect();
    for i in 0..h {
        for j in 0..w {
            if !m.get(i, j) {
                continue;
            }
            let here = i * w + j;
            for (ni, nj) in [(i.wrapping_sub(1), j), (i, j.wrapping_sub(1))] {
                if ni < h && nj < w && m.get(ni, nj) {
                    let (a, b) = (find(&mut parent, here), find(&mut parent, ni * w + nj));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; h * w];
    let mut out: Vec<Component> = Vec::new();
    for px in 0..h * w {
        if !m.data()[px] {
            continue;
        }
        let root = find(&mut parent, px);
        let (i, j) = (px / w, px % w);
        if slot[root] == usize::MAX {
            slot[root] = out.len();
            out.push(Component {
                pixels: Vec::new(),
                top: i,
                bottom: i,
                left: j,
                right: j,
            });
        }
        let c = &mut out[slot[root]];
        c.pixels.push(px);
        c.top = c.top.min(i);
        c.bottom = c.bottom.max(i);
        c.left = c.left.min(j);
        c.right = c.right.max(j);
    }
    out
}

/// Split a mask into top/bottom/left/right halves of each component's
/// bounding box. With an odd extent the top (left) half takes the extra
/// row (column).
pub fn part_masks(m: &BinaryMask) -> [BinaryMask; 4] {
    let (h, w) = (m.height(), m.width());
    let mut parts = std::array::from_fn(|_| BinaryMask::empty(h, w));
    for comp in connected_components(m) {
        let split_row = comp.top + (comp.bottom - comp.top + 2) / 2;
        let split_col = comp.left + (comp.right - comp.left + 2) / 2;
        for &px in &comp.pixels {
            let (i, j) = (px / w, px % w);
            let [t, b, l, r] = &mut parts;
            if i < split_row { t.set(i, j, true) } else { b.set(i, j, true) }
            if j < split_col { l.set(i, j, true) } else { r.set(i, j, true) }
        }
    }
    parts
}

/// Append `c-t`, `c-b`, `c-l`, `c-r` classes for every concept whose spec
/// sets `parts`. Part soft scores are the parent's score inside the part.
pub fn expand_parts(segs: &SegmentationSet, spec: &WorldSpec) -> Result<SegmentationSet> {
    let mut out = segs.clone();
    for c in spec.concepts.iter().filter(|c| c.parts) {
        let ci = segs.index(&c.name)?;
        for (suffix, mask) in PART_SUFFIXES.iter().zip(part_masks(&segs.masks[ci])) {
            let soft = segs.soft[ci]
                .iter()
                .zip(mask.data())
                .map(|(&s, &on)| if on { s } else { 0.0 })
                .collect();
            out.names.push(format!("{}-{suffix}", c.name));
            out.masks.push(mask);
            out.soft.push(soft);
        }
    }
    Ok(out)
}

/// Class names after part expansion, in the order `expand_parts` emits them.
pub fn expanded_names(spec: &WorldSpec) -> Vec<String> {
    let mut names = spec.concept_names();
    for c in spec.concepts.iter().filter(|c| c.parts) {
        names.extend(PART_SUFFIXES.iter().map(|s| format!("{}-{s}", c.name)));
    }
    names
}

/// Mean pixel fraction of each class over a sample of segmentations.
pub fn class_coverage(segs: &[SegmentationSet]) -> Result<Vec<f64>> {
    let first = segs
        .first()
        .ok_or_else(|| Error::InvalidArgument("class coverage needs at least one sample".into()))?;
    let mut counts = vec![0usize; first.names.len()];
    let mut pixels = 0usize;
    for s in segs {
        if s.names != first.names {
            return Err(Error::InvalidArgument("samples use different class dictionaries".into()));
        }
        for (c, m) in counts.iter_mut().zip(&s.masks) {
            *c += m.count();
        }
        pixels += s.masks.first().map_or(0, |m| m.height() * m.width());
    }
    Ok(counts
        .into_iter()
        .map(|c| if pixels == 0 { 0.0 } else { c as f64 / pixels as f64 })
        .collect())
}
