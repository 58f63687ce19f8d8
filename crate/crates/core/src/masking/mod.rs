//! Binary hole masks, resizing to latent resolution, and blending.
//!
//! Polarity everywhere: 1 marks the hole to be filled, 0 marks preserved pixels.

mod brush;
mod segment;

use std::fmt;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, ImageFormat, Luma};
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{shape_err, Error, Result};
use crate::raster::Image;

pub use brush::{gen_brush_mask, gen_brush_strokes, BrushConfig};
pub use segment::{gen_seg_mask, Side, MAX_MASK_FRACTION, MIN_MASK_FRACTION};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(shape_err(format!(
                "mask buffer of {} values for {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Parameter("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![1; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn is_hole(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, hole: bool) {
        self.data[y * self.width + x] = hole as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Result<Self> {
        self.zip(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &Mask) -> Result<Self> {
        self.zip(other, |a, b| a & b)
    }

    fn zip(&self, other: &Mask, f: impl Fn(u8, u8) -> u8) -> Result<Self> {
        if self.width != other.width || self.height != other.height {
            return Err(shape_err("mask dimensions differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { width: self.width, height: self.height, data })
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// (1, 1, H, W) float tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.as_f32()).view([1, 1, self.height as i64, self.width as i64])
    }

    /// Grayscale PNG with 255 for hole pixels.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.is_hole(y as usize, x as usize) { 255 } else { 0 }])
        });
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// Any PNG; a pixel is a hole when its luma is at least 128.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(w, h, |y, x| img.get_pixel(x as u32, y as u32).0[0] >= 128))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }
}

/// A continuous-valued single-channel map in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FloatMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// (1, 1, H, W) float tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.data).view([1, 1, self.height as i64, self.width as i64])
    }
}

/// Mask resampled to latent resolution.
pub type ResizedMask = FloatMap;
/// Mask softened for pixel-space blending.
pub type SoftMask = FloatMap;

fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// One axis of bicubic resampling with half-pixel centres and clamped borders.
fn cubic_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = (i as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let ws = [cubic_weight(t + 1.0), cubic_weight(t), cubic_weight(1.0 - t), cubic_weight(2.0 - t)];
            std::array::from_fn(|k| {
                let idx = (base as i64 + k as i64 - 1).clamp(0, n_in as i64 - 1) as usize;
                (idx, ws[k])
            })
        })
        .collect()
}

/// Cubic downsampling by an integer factor, clamped to `[0, 1]`.
pub fn downsample_mask(mask: &Mask, factor: usize) -> Result<ResizedMask> {
    if factor == 0 || mask.width % factor != 0 || mask.height % factor != 0 {
        return Err(Error::Parameter(format!(
            "{}x{} mask is not divisible by factor {factor}",
            mask.width, mask.height
        )));
    }
    let (w, h) = (mask.width / factor, mask.height / factor);
    let xs = cubic_taps(mask.width, w);
    let ys = cubic_taps(mask.height, h);
    // Horizontal pass into an H_in x W_out buffer, then vertical.
    let mut rows = vec![0.0f64; mask.height * w];
    for y in 0..mask.height {
        for (ox, taps) in xs.iter().enumerate() {
            rows[y * w + ox] = taps
                .iter()
                .map(|&(ix, wt)| wt * mask.data[y * mask.width + ix] as f64)
                .sum();
        }
    }
    let mut data = Vec::with_capacity(w * h);
    for taps in &ys {
        for ox in 0..w {
            let v: f64 = taps.iter().map(|&(iy, wt)| wt * rows[iy * w + ox]).sum();
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(FloatMap { width: w, height: h, data })
}

/// Zeroes the hole pixels of `image`.
pub fn make_masked_image(image: &Image, mask: &Mask) -> Result<Image> {
    check_dims(image, mask)?;
    let mut out = image.clone();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.is_hole(y, x) {
                out.set_pixel(y, x, [0.0; 3]);
            }
        }
    }
    Ok(out)
}

fn check_dims(image: &Image, mask: &Mask) -> Result<()> {
    if image.width() != mask.width || image.height() != mask.height {
        return Err(shape_err(format!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width,
            mask.height
        )));
    }
    Ok(())
}

/// `z_gen * m + z_masked * (1 - m)` with `m` broadcast over batch and channels.
pub fn latent_blend(z_gen: &Tensor, z_masked: &Tensor, m: &ResizedMask) -> Result<Tensor> {
    if z_gen.size() != z_masked.size() {
        return Err(shape_err(format!(
            "latent shapes differ: {:?} vs {:?}",
            z_gen.size(),
            z_masked.size()
        )));
    }
    let size = z_gen.size();
    if size.len() != 4 || size[2] != m.height as i64 || size[3] != m.width as i64 {
        return Err(shape_err(format!(
            "latent {:?} does not match {}x{} mask",
            size, m.height, m.width
        )));
    }
    let m = m.to_tensor().to_kind(z_gen.kind());
    Ok(z_gen * &m + z_masked * (1.0 - &m))
}

#[inline]
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let r = i.rem_euclid(period);
    (if r >= n { period - 1 - r } else { r }) as usize
}

/// Gaussian blur truncated to a disk of radius `ceil(4 sigma)` with
/// half-sample symmetric borders. `sigma == 0` returns the mask unchanged.
pub fn blur_mask(mask: &Mask, sigma: f64) -> Result<SoftMask> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Parameter(format!("blur sigma {sigma} must be finite and >= 0")));
    }
    let (w, h) = (mask.width, mask.height);
    if sigma == 0.0 {
        return Ok(FloatMap { width: w, height: h, data: mask.as_f32() });
    }
    let r = (4.0 * sigma).ceil() as i64;
    let mut kernel = Vec::new();
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 <= (r * r) as f64 {
                let k = (-d2 / (2.0 * sigma * sigma)).exp();
                total += k;
                kernel.push((dy, dx, k));
            }
        }
    }
    let mut data = vec![0.0f32; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for &(dy, dx, k) in &kernel {
                let sy = reflect(y + dy, h as i64);
                let sx = reflect(x + dx, w as i64);
                if mask.data[sy * w + sx] == 1 {
                    acc += k;
                }
            }
            data[y as usize * w + x as usize] = (acc / total).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(FloatMap { width: w, height: h, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    /// Return the generated image unchanged.
    None,
    /// Hard paste of generated pixels into the hole.
    Paste,
    /// Paste through a Gaussian-softened mask.
    #[default]
    Blur,
}

impl fmt::Display for BlendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlendMode::None => "none",
            BlendMode::Paste => "paste",
            BlendMode::Blur => "blur",
        })
    }
}

impl FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BlendMode::None),
            "paste" => Ok(BlendMode::Paste),
            "blur" => Ok(BlendMode::Blur),
            other => Err(Error::Parameter(format!("unknown blend mode {other:?}"))),
        }
    }
}

/// Composites `generated` into `original` under the hole mask.
///
/// Where the effective mask is 0 the original pixel is returned bit for bit,
/// where it is 1 the generated pixel is.
pub fn pixel_blend(
    generated: &Image,
    original: &Image,
    mask: &Mask,
    mode: BlendMode,
    sigma: f64,
) -> Result<Image> {
    if !generated.same_dims(original) {
        return Err(shape_err("generated and original images differ in size"));
    }
    check_dims(original, mask)?;
    let soft = match mode {
        BlendMode::None => return Ok(generated.clone()),
        BlendMode::Paste => blur_mask(mask, 0.0)?,
        BlendMode::Blur => blur_mask(mask, sigma)?,
    };
    let mut out = original.clone();
    for y in 0..mask.height {
        for x in 0..mask.width {
            let m = soft.get(y, x);
            if m == 0.0 {
                continue;
            }
            let g = generated.pixel(y, x);
            if m == 1.0 {
                out.set_pixel(y, x, g);
                continue;
            }
            let o = original.pixel(y, x);
            let px = std::array::from_fn(|c| {
                let v = o[c] + m * (g[c] - o[c]);
                v.clamp(o[c].min(g[c]), o[c].max(g[c]))
            });
            out.set_pixel(y, x, px);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_weights_for_factor_four_block() {
        let taps = cubic_taps(8, 2);
        let ws: Vec<f64> = taps[0].iter().map(|t| t.1).collect();
        // Half-pixel sampling at factor 4 lands between source pixels 1 and 2.
        let expect = [cubic_weight(1.5), cubic_weight(0.5), cubic_weight(0.5), cubic_weight(1.5)];
        for (a, b) in ws.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn downsample_uniform_masks() {
        let zero = downsample_mask(&Mask::zeros(64, 64), 4).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let one = downsample_mask(&Mask::ones(64, 64), 4).unwrap();
        assert!(one.data().iter().all(|&v| v == 1.0));
        assert_eq!((one.width(), one.height()), (16, 16));
    }

    #[test]
    fn downsample_rejects_indivisible() {
        assert!(matches!(downsample_mask(&Mask::zeros(10, 8), 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn blur_zero_sigma_is_identity() {
        let m = Mask::from_fn(9, 9, |y, x| y == 4 && x == 4);
        let s = blur_mask(&m, 0.0).unwrap();
        assert_eq!(s.data(), m.as_f32().as_slice());
    }

    #[test]
    fn blend_mode_parsing() {
        assert_eq!("paste".parse::<BlendMode>().unwrap(), BlendMode::Paste);
        assert!("soft".parse::<BlendMode>().is_err());
    }

    #[test]
    fn none_blend_returns_generated() {
        let g = Image::filled(4, 4, [1.0, 0.0, 0.0]);
        let o = Image::filled(4, 4, [0.0, 0.0, 1.0]);
        let out = pixel_blend(&g, &o, &Mask::zeros(4, 4), BlendMode::None, 3.0).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn masked_image_zeroes_hole() {
        let img = Image::filled(4, 4, [0.5, 0.5, 0.5]);
        let m = Mask::from_fn(4, 4, |y, _| y < 2);
        let out = make_masked_image(&img, &m).unwrap();
        assert_eq!(out.pixel(0, 0), [0.0; 3]);
        assert_eq!(out.pixel(3, 3), [0.5; 3]);
    }

    #[test]
    fn mask_png_round_trip() {
        let m = Mask::from_fn(7, 5, |y, x| (x + y) % 3 == 0);
        let back = Mask::from_png_bytes(&m.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
