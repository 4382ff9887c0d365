//! Dense row-major tensors and the fixed set of array kernels the generator
//! and the autodiff graph share.
//!
//! Spatial kernels operate on the trailing two dimensions, so a `[c, h, w]`
//! featuremap and a bare `[h, w]` map go through the same code path.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Row-major 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return shape_err("ragged rows");
        }
        Self::new(vec![h, w], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret as `[c, h, w]`; 2-D tensors are a single channel.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [h, w] => Ok((1, h, w)),
            [c, h, w] => Ok((c, h, w)),
            _ => shape_err(format!("expected 2-D or 3-D tensor, got {:?}", self.shape)),
        }
    }

    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        let (h, w) = self.spatial();
        self.data[(c * h + i) * w + j]
    }

    /// Trailing `(h, w)` pair.
    pub fn spatial(&self) -> (usize, usize) {
        let n = self.shape.len();
        match n {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[n - 2], self.shape[n - 1]),
        }
    }

    pub fn channels(&self) -> usize {
        let (h, w) = self.spatial();
        if h * w == 0 {
            0
        } else {
            self.data.len() / (h * w)
        }
    }

    pub fn channel(&self, c: usize) -> Tensor {
        let (h, w) = self.spatial();
        let start = c * h * w;
        Tensor {
            shape: vec![h, w],
            data: self.data[start..start + h * w].to_vec(),
        }
    }

    pub fn channel_slice(&self, c: usize) -> &[f64] {
        let (h, w) = self.spatial();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Boolean `h × w` mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height * width != data.len() {
            return shape_err(format!(
                "mask {height}x{width} needs {} cells, got {}",
                height * width,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.width + j] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return shape_err(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            ));
        }
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(self.zip_with(other, |a, b| a && b))
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(self.zip_with(other, |a, b| a || b))
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(self.zip_with(other, |a, b| a && !b))
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width],
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }
}

/// Source row (or column) that nearest-neighbour upsampling reads for output
/// index `i`: `floor(i * src / dst)`.
#[inline]
pub fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    i * src / dst
}

/// Nearest-neighbour upsampling of the trailing two dimensions to
/// `target_h × target_w`.
pub fn upsample_nearest(t: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (h, w) = t.spatial();
    if target_h < h || target_w < w {
        return invalid(format!(
            "upsample target {target_h}x{target_w} smaller than source {h}x{w}"
        ));
    }
    let c = t.channels();
    let mut data = Vec::with_capacity(c * target_h * target_w);
    let rows: Vec<usize> = (0..target_h).map(|i| nearest_source(i, h, target_h)).collect();
    let cols: Vec<usize> = (0..target_w).map(|j| nearest_source(j, w, target_w)).collect();
    for ch in 0..c {
        let src = t.channel_slice(ch);
        for &si in &rows {
            for &sj in &cols {
                data.push(src[si * w + sj]);
            }
        }
    }
    let mut shape = t.shape.clone();
    let n = shape.len();
    if n < 2 {
        shape = vec![target_h, target_w];
    } else {
        shape[n - 2] = target_h;
        shape[n - 1] = target_w;
    }
    Tensor::new(shape, data)
}

/// Bilinear upsampling (align-corners off, half-pixel centres, edge clamp).
pub fn upsample_bilinear(t: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (h, w) = t.spatial();
    if target_h < h || target_w < w {
        return invalid(format!(
            "upsample target {target_h}x{target_w} smaller than source {h}x{w}"
        ));
    }
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
        let lo = (x.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, x - lo as f64)
    };
    let c = t.channels();
    let mut data = Vec::with_capacity(c * target_h * target_w);
    for ch in 0..c {
        let src = t.channel_slice(ch);
        for i in 0..target_h {
            let (i0, i1, fy) = coord(i, h, target_h);
            for j in 0..target_w {
                let (j0, j1, fx) = coord(j, w, target_w);
                let top = src[i0 * w + j0] * (1.0 - fx) + src[i0 * w + j1] * fx;
                let bot = src[i1 * w + j0] * (1.0 - fx) + src[i1 * w + j1] * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let mut shape = t.shape.clone();
    let n = shape.len();
    shape[n - 2] = target_h;
    shape[n - 1] = target_w;
    Tensor::new(shape, data)
}

/// Take every `k`-th element of the trailing two dimensions.
pub fn downsample_stride(t: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w) = t.spatial();
    if k == 0 || h % k != 0 || w % k != 0 {
        return invalid(format!("stride {k} does not divide {h}x{w}"));
    }
    let (oh, ow) = (h / k, w / k);
    let mut data = Vec::with_capacity(t.channels() * oh * ow);
    for ch in 0..t.channels() {
        let src = t.channel_slice(ch);
        for i in 0..oh {
            for j in 0..ow {
                data.push(src[i * k * w + j * k]);
            }
        }
    }
    let mut shape = t.shape.clone();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::new(shape, data)
}

/// `mask[p] = t[p] > level`. Accepts `[h, w]` or `[1, h, w]`.
pub fn threshold(t: &Tensor, level: f64) -> Result<BinaryMask> {
    let (c, h, w) = t.dims3()?;
    if c != 1 {
        return shape_err(format!("threshold expects one channel, got {c}"));
    }
    BinaryMask::new(h, w, t.data.iter().map(|&v| v > level).collect())
}

/// 2-D convolution, stride 1, zero padding, odd square kernels.
///
/// `weight` is `[out, in, k, k]`, `input` is `[in, h, w]`. Zero weights are
/// skipped so sparse wiring costs only its nonzero taps.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (cin, h, w) = input.dims3()?;
    let (cout, wcin, k) = conv_dims(weight)?;
    if wcin != cin {
        return shape_err(format!("conv expects {wcin} input channels, got {cin}"));
    }
    if bias.len() != cout {
        return shape_err(format!("conv bias has {} entries for {cout} outputs", bias.len()));
    }
    let r = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * w];
    for co in 0..cout {
        let dst = &mut out[co * h * w..(co + 1) * h * w];
        dst.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let src = input.channel_slice(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight.data[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - r;
                    let dx = kx as isize - r;
                    for i in 0..h {
                        let si = i as isize + dy;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let srow = &src[si as usize * w..(si as usize + 1) * w];
                        let drow = &mut dst[i * w..(i + 1) * w];
                        let j0 = (-dx).max(0) as usize;
                        let j1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        for j in j0..j1 {
                            drow[j] += wv * srow[(j as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, h, w], out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_backward_input(grad_out: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (cout, h, w) = grad_out.dims3()?;
    let (wcout, cin, k) = conv_dims(weight)?;
    if wcout != cout {
        return shape_err("conv backward channel mismatch");
    }
    let r = (k / 2) as isize;
    let mut gin = vec![0.0; cin * h * w];
    for co in 0..cout {
        let g = grad_out.channel_slice(co);
        for ci in 0..cin {
            let dst = &mut gin[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight.data[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - r;
                    let dx = kx as isize - r;
                    for i in 0..h {
                        let si = i as isize + dy;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let grow = &g[i * w..(i + 1) * w];
                        let drow = &mut dst[si as usize * w..(si as usize + 1) * w];
                        let j0 = (-dx).max(0) as usize;
                        let j1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        for j in j0..j1 {
                            drow[(j as isize + dx) as usize] += wv * grow[j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cin, h, w], gin)
}

pub(crate) fn conv_dims(weight: &Tensor) -> Result<(usize, usize, usize)> {
    match *weight.shape() {
        [o, i, k, k2] if k == k2 && k % 2 == 1 => Ok((o, i, k)),
        _ => shape_err(format!(
            "conv weight must be [out, in, k, k] with odd k, got {:?}",
            weight.shape()
        )),
    }
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape != b.shape {
        return shape_err(format!("elementwise {:?} vs {:?}", a.shape, b.shape));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

/// Multiply channel `c` of a `[c, h, w]` tensor by `alpha[c]`.
pub fn channel_scale(alpha: &[f64], t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if alpha.len() != c {
        return shape_err(format!("{} scales for {c} channels", alpha.len()));
    }
    let mut data = t.data.clone();
    for (ch, a) in alpha.iter().enumerate() {
        data[ch * h * w..(ch + 1) * h * w]
            .iter_mut()
            .for_each(|v| *v *= a);
    }
    Tensor::new(t.shape.clone(), data)
}

/// `weight · x + bias` for a flat input; `weight` is `[out, in]`.
pub fn affine(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (o, i) = match *weight.shape() {
        [o, i] => (o, i),
        _ => return shape_err("affine weight must be [out, in]"),
    };
    if x.len() != i || bias.len() != o {
        return shape_err(format!(
            "affine [{o}, {i}] applied to {} values with {} biases",
            x.len(),
            bias.len()
        ));
    }
    let data = (0..o)
        .map(|r| {
            weight.data[r * i..(r + 1) * i]
                .iter()
                .zip(&x.data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + bias[r]
        })
        .collect();
    Tensor::new(vec![o], data)
}
