//! Raster and table encoders.
//!
//! Pixmaps are binary PPM (`P6`, maxval 255) with the header written as
//! `P6 <w> <h> 255\n`. A value `v` in `[0, 1]` becomes the byte
//! `floor(v * 255 + 0.5)`, so halves round up (0.5 -> 128). Values outside
//! `[0, 1]` are rejected rather than clamped.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::tensor::{BinaryMask, Tensor};

pub fn to_byte(v: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Image(format!("pixel value {v} outside [0, 1]")));
    }
    Ok((v * 255.0 + 0.5).floor() as u8)
}

fn rgb_bytes(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = match *image.shape() {
        [h, w, 3] => (h, w),
        [h, w] => (h, w),
        _ => return Err(Error::Shape(format!("expected [H, W, 3] or [H, W], got {:?}", image.shape()))),
    };
    let mut bytes = Vec::with_capacity(h * w * 3);
    if image.shape().len() == 3 {
        for &v in image.data() {
            bytes.push(to_byte(v)?);
        }
    } else {
        for &v in image.data() {
            let b = to_byte(v)?;
            bytes.extend([b, b, b]);
        }
    }
    Ok((h, w, bytes))
}

/// Encode an `[H, W, 3]` image (or an `[H, W]` grey map, replicated to three
/// channels) as binary PPM.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, bytes) = rgb_bytes(image)?;
    let mut out = format!("P6 {w} {h} 255\n").into_bytes();
    out.extend(bytes);
    Ok(out)
}

fn header_fields(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    let mut fields = Vec::with_capacity(count);
    let mut pos = 2;
    while fields.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        fields.push(text.parse().map_err(|_| Error::Image("malformed header".into()))?);
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Image("header not terminated".into()));
    }
    Ok((fields, pos + 1))
}

/// Decode a binary PPM into an `[H, W, 3]` tensor with values `byte / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Image("not a binary PPM".into()));
    }
    let (f, start) = header_fields(bytes, 3)?;
    let (w, h, maxval) = (f[0], f[1], f[2]);
    if maxval != 255 {
        return Err(Error::Image(format!("unsupported maxval {maxval}")));
    }
    let raster = &bytes[start..];
    if raster.len() != w * h * 3 {
        return Err(Error::Image(format!("expected {} raster bytes, found {}", w * h * 3, raster.len())));
    }
    Tensor::new(vec![h, w, 3], raster.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Binary PBM; set pixels are written as 1 (black), rows padded to bytes.
pub fn encode_pbm(mask: &BinaryMask) -> Vec<u8> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = format!("P4 {w} {h}\n").into_bytes();
    for i in 0..h {
        for chunk in 0..w.div_ceil(8) {
            let mut byte = 0u8;
            for bit in 0..8 {
                let j = chunk * 8 + bit;
                if j < w && mask.get(i, j) {
                    byte |= 0x80 >> bit;
                }
            }
            out.push(byte);
        }
    }
    out
}

pub fn decode_pbm(bytes: &[u8]) -> Result<BinaryMask> {
    if !bytes.starts_with(b"P4") {
        return Err(Error::Image("not a binary PBM".into()));
    }
    let (f, start) = header_fields(bytes, 2)?;
    let (w, h) = (f[0], f[1]);
    let stride = w.div_ceil(8);
    let raster = &bytes[start..];
    if raster.len() != stride * h {
        return Err(Error::Image("PBM raster has the wrong length".into()));
    }
    Ok(BinaryMask::from_fn(h, w, |i, j| raster[i * stride + j / 8] & (0x80 >> (j % 8)) != 0))
}

/// Lossless PNG of an `[H, W, 3]` image (or an `[H, W]` grey map).
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, bytes) = rgb_bytes(image)?;
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Image("raster size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// PNG of a mask, set pixels white.
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let data = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data)
        .ok_or_else(|| Error::Image("raster size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(vec![h, w, 3], img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect())
}

/// Tile equally sized `[H, W, 3]` images into rows of `cols`, separated by
/// `pad` pixels of `fill`.
pub fn image_grid(images: &[Tensor], cols: usize, pad: usize, fill: f64) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image grid".into()))?;
    if cols == 0 {
        return invalid("grid needs at least one column");
    }
    let (h, w) = match *first.shape() {
        [h, w, 3] => (h, w),
        _ => return Err(Error::Shape(format!("expected [H, W, 3], got {:?}", first.shape()))),
    };
    if images.iter().any(|t| t.shape() != first.shape()) {
        return Err(Error::Shape("grid images differ in shape".into()));
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad);
    let mut out = Tensor::full(&[gh, gw, 3], fill);
    let data = out.data_mut();
    for (k, img) in images.iter().enumerate() {
        let (oi, oj) = ((k / cols) * (h + pad), (k % cols) * (w + pad));
        for i in 0..h {
            let src = &img.data()[i * w * 3..(i + 1) * w * 3];
            let at = ((oi + i) * gw + oj) * 3;
            data[at..at + w * 3].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Scale a non-negative map into `[0, 1]` by its maximum (all-zero maps stay
/// zero).
pub fn normalize_map(t: &Tensor) -> Result<Tensor> {
    if !t.is_finite() {
        return Err(Error::NonFinite("heatmap".into()));
    }
    let max = t.data().iter().copied().fold(0.0, f64::max);
    Ok(if max > 0.0 { t.map(|v| (v / max).clamp(0.0, 1.0)) } else { t.map(|_| 0.0) })
}

/// CSV text of serializable rows, header from the field names.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Pretty JSON with a trailing newline.
pub fn json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel() {
        let t = Tensor::full(&[1, 1, 3], 1.0);
        assert_eq!(encode_ppm(&t).unwrap(), b"P6 1 1 255\n\xff\xff\xff");
    }

    #[test]
    fn half_rounds_up() {
        assert_eq!(to_byte(0.5).unwrap(), 128);
        assert_eq!(to_byte(0.0).unwrap(), 0);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(encode_ppm(&Tensor::full(&[1, 1, 3], 1.0 + 1e-9)).is_err());
        assert!(encode_ppm(&Tensor::full(&[1, 1, 3], -0.1)).is_err());
        assert!(encode_ppm(&Tensor::full(&[1, 1, 3], f64::NAN)).is_err());
    }

    #[test]
    fn pbm_pads_rows() {
        let m = BinaryMask::from_fn(2, 9, |i, j| i == 0 && (j == 0 || j == 8));
        assert_eq!(encode_pbm(&m), b"P4 9 2\n\x80\x80\x00\x00");
        assert_eq!(decode_pbm(&encode_pbm(&m)).unwrap(), m);
    }

    #[test]
    fn ppm_with_comment_decodes() {
        let t = decode_ppm(b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff").unwrap();
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn truncated_ppm_rejected() {
        assert!(decode_ppm(b"P6 2 2 255\n\x00").is_err());
    }

    #[test]
    fn grid_layout() {
        let a = Tensor::full(&[2, 2, 3], 0.2);
        let b = Tensor::full(&[2, 2, 3], 0.8);
        let g = image_grid(&[a, b.clone(), b], 2, 1, 1.0).unwrap();
        assert_eq!(g.shape(), &[5, 5, 3]);
        assert_eq!(g.data()[0], 0.2);
        assert_eq!(g.data()[(0 * 5 + 2) * 3], 1.0);
        assert_eq!(g.data()[(0 * 5 + 3) * 3], 0.8);
        assert_eq!(g.data()[(3 * 5) * 3], 0.8);
        assert_eq!(g.data()[(3 * 5 + 3) * 3], 1.0);
    }

    #[test]
    fn csv_header_from_fields() {
        #[derive(Serialize)]
        struct Row {
            k: usize,
            v: f64,
        }
        assert_eq!(csv_string(&[Row { k: 1, v: 0.5 }]).unwrap(), "k,v\n1,0.5\n");
    }
}
