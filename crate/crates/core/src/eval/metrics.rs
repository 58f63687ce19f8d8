use tch::Kind;

use crate::codec::Codec;
use crate::error::{shape_err, Error, Result};
use crate::masking::Mask;
use crate::raster::Image;
use crate::scene::{SceneSpec, IMAGE_SIZE};

/// PSNR reported when the error is exactly zero.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Per-channel tolerance for a pixel to count as the expected palette colour.
pub const PROBE_TOLERANCE: f32 = 0.15;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMetrics {
    pub psnr_db: f64,
    pub mse: f64,
}

/// MSE and PSNR (peak 1.0) over the pixels where `region` is set, all channels.
pub fn region_metrics(generated: &Image, original: &Image, region: &Mask) -> Result<RegionMetrics> {
    if !generated.same_dims(original) || generated.width() != region.width() || generated.height() != region.height() {
        return Err(shape_err("images and region must share dimensions"));
    }
    let count = region.count();
    if count == 0 {
        return Err(Error::Parameter("empty metric region".into()));
    }
    let mut sum = 0.0f64;
    for y in 0..region.height() {
        for x in 0..region.width() {
            if region.is_hole(y, x) {
                for c in 0..3 {
                    let d = generated.get(c, y, x) as f64 - original.get(c, y, x) as f64;
                    sum += d * d;
                }
            }
        }
    }
    let mse = sum / (3 * count) as f64;
    Ok(RegionMetrics { psnr_db: psnr_from_mse(mse), mse })
}

/// Mean over encoder layers of the squared distance between unit-normalized
/// (per position, across channels) activations of `a` and `b`.
pub fn lpips_proxy(a: &Image, b: &Image, codec: &Codec) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(shape_err("images differ in size"));
    }
    tch::no_grad(|| {
        let fa = codec.activations(&a.to_tensor())?;
        let fb = codec.activations(&b.to_tensor())?;
        let mut total = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            let norm = |t: &tch::Tensor| {
                let n = t.square().sum_dim_intlist([1i64].as_slice(), true, Kind::Float).sqrt() + 1e-10;
                t / n
            };
            let d = (norm(x) - norm(y)).square().sum_dim_intlist([1i64].as_slice(), false, Kind::Double);
            total += d.mean(Kind::Double).double_value(&[]);
        }
        Ok(total / fa.len() as f64)
    })
}

/// The region a hole belongs to: an object index, or `None` for the background.
pub fn hole_region(scene: &SceneSpec, hole: &Mask) -> Result<Option<usize>> {
    if hole.count() == 0 {
        return Err(Error::Protocol("empty hole".into()));
    }
    if hole.width() != IMAGE_SIZE || hole.height() != IMAGE_SIZE {
        return Err(shape_err("hole mask does not match the scene size"));
    }
    let labels = scene.label_map();
    let mut region: Option<Option<usize>> = None;
    for (i, &l) in labels.iter().enumerate() {
        if hole.data()[i] == 1 {
            match region {
                None => region = Some(l),
                Some(r) if r != l => {
                    return Err(Error::Protocol("hole covers more than one scene region".into()));
                }
                _ => {}
            }
        }
    }
    Ok(region.expect("hole is non-empty"))
}

/// Fraction of hole pixels within tolerance of the expected palette colour
/// of the single captioned region the hole covers (an object, or the
/// background for outside-inpainting holes).
pub fn caption_probe(image: &Image, scene: &SceneSpec, hole: &Mask) -> Result<f64> {
    let target = match hole_region(scene, hole)? {
        Some(k) => scene.objects[k].color.rgb(),
        None => scene.background.rgb(),
    };
    let mut hits = 0usize;
    for y in 0..hole.height() {
        for x in 0..hole.width() {
            if hole.is_hole(y, x) {
                let px = image.pixel(y, x);
                if px.iter().zip(target).all(|(p, t)| (p - t).abs() <= PROBE_TOLERANCE) {
                    hits += 1;
                }
            }
        }
    }
    Ok(hits as f64 / hole.count() as f64)
}
