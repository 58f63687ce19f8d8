//! RGB images in `[0, 1]`, stored channel-major (3 x H x W).

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use tch::{Kind, Tensor};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * width * height {
            return Err(shape_err(format!(
                "image buffer of {} values for {width}x{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat(c.clamp(0.0, 1.0)).take(width * height));
        }
        Self { width, height, data }
    }

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
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v.clamp(0.0, 1.0);
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// (1, 3, H, W) float tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.data).view([1, 3, self.height as i64, self.width as i64])
    }

    /// Accepts (3, H, W) or (1, 3, H, W); values are clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.dim() {
            4 if t.size()[0] == 1 => t.squeeze_dim(0),
            3 => t.shallow_clone(),
            _ => return Err(shape_err(format!("expected one image, got {:?}", t.size()))),
        };
        let size = t.size();
        if size[0] != 3 {
            return Err(shape_err(format!("expected 3 channels, got {:?}", size)));
        }
        let data: Vec<f32> = Vec::try_from(t.to_kind(Kind::Float).clamp(0.0, 1.0).contiguous().view([-1]))?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite pixel".into()));
        }
        Ok(Self {
            width: size[2] as usize,
            height: size[1] as usize,
            data,
        })
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.pixel(y as usize, x as usize);
            Rgb(px.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(w, h, [0.0; 3]);
        for (x, y, px) in img.enumerate_pixels() {
            out.set_pixel(y as usize, x as usize, px.0.map(|v| v as f32 / 255.0));
        }
        out
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }
}

/// Stacks images into one (B, 3, H, W) tensor.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| shape_err("empty image batch"))?;
    if images.iter().any(|im| !im.same_dims(first)) {
        return Err(shape_err("images in a batch must share dimensions"));
    }
    let views: Vec<Tensor> = images.iter().map(|im| im.to_tensor()).collect();
    Ok(Tensor::cat(&views, 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let mut img = Image::filled(5, 4, [0.0, 0.5, 1.0]);
        img.set_pixel(1, 2, [10.0 / 255.0, 200.0 / 255.0, 1.0]);
        let bytes = img.to_png_bytes().unwrap();
        let back = Image::from_png_bytes(&bytes).unwrap();
        assert_eq!(back.to_png_bytes().unwrap(), bytes);
        assert_eq!(back.pixel(1, 2), img.pixel(1, 2));
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::filled(8, 6, [0.25, 0.5, 0.75]);
        let back = Image::from_tensor(&img.to_tensor()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_out_of_range_and_bad_length() {
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
    }
}
