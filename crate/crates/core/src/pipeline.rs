//! End-to-end inpainting pipelines over a trained codec and denoiser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::branch::{Branch, DualModel, SingleBranchModel};
use crate::codec::Codec;
use crate::diffusion::{add_noise, sample, Denoiser, NoiseSchedule, SamplerConfig, StepHook, StepInfo};
use crate::error::{shape_err, Error, Result};
use crate::masking::{downsample_mask, latent_blend, make_masked_image, pixel_blend, BlendMode, Mask};
use crate::nn::randn;
use crate::raster::Image;
use crate::unet::DenoiserModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintOptions {
    /// Preservation scale on the injected branch features.
    pub w: f64,
    pub blend: BlendMode,
    pub blur_sigma: f64,
    pub sampler: SamplerConfig,
    pub prompt: String,
}

impl Default for InpaintOptions {
    fn default() -> Self {
        Self { w: 1.0, blend: BlendMode::Blur, blur_sigma: 3.0, sampler: SamplerConfig::default(), prompt: String::new() }
    }
}

impl InpaintOptions {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::Parameter(format!("w = {} outside [0, 1]", self.w)));
        }
        if !self.blur_sigma.is_finite() || self.blur_sigma < 0.0 {
            return Err(Error::Parameter(format!("blur_sigma = {} must be >= 0", self.blur_sigma)));
        }
        self.sampler.validate(schedule)
    }
}

/// Initial latent for a seed: standard normal from the seed's own stream.
pub fn initial_latent(seed: u64, shape: &[i64]) -> Tensor {
    randn(&mut ChaCha8Rng::seed_from_u64(seed), shape, Kind::Float)
}

fn latent_shape(codec: &Codec) -> [i64; 4] {
    let n = codec.config().latent_size();
    [1, codec.config().latent_channels, n, n]
}

fn check_pair(image: &Image, mask: &Mask, codec: &Codec) -> Result<()> {
    let n = codec.config().image_size as usize;
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(shape_err(format!(
            "image {}x{} and mask {}x{} differ",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    if image.width() != n || image.height() != n {
        return Err(shape_err(format!("pipelines take {n}x{n} images")));
    }
    Ok(())
}

/// Inputs shared by every pipeline: masked image, its latent, and the
/// latent-resolution mask.
struct Prepared {
    masked: Image,
    m_resized: Tensor,
}

fn prepare(image: &Image, mask: &Mask, codec: &Codec) -> Result<Prepared> {
    check_pair(image, mask, codec)?;
    let masked = make_masked_image(image, mask)?;
    let factor = (codec.config().image_size / codec.config().latent_size()) as usize;
    let m_resized = downsample_mask(mask, factor)?.to_tensor();
    Ok(Prepared { masked, m_resized })
}

fn run_sampler(
    denoiser: &dyn Denoiser,
    base: &DenoiserModel,
    codec: &Codec,
    schedule: &NoiseSchedule,
    opts: &InpaintOptions,
    hook: Option<&mut StepHook<'_>>,
) -> Result<Image> {
    let cond = base.text().embed(&opts.prompt)?;
    let uncond = base.text().null_embedding();
    let z_start = initial_latent(opts.sampler.seed, &latent_shape(codec));
    let z0 = sample(denoiser, &z_start, &cond, &uncond, &opts.sampler, schedule, hook)?;
    tch::no_grad(|| codec.decode_image(&z0))
}

/// Plain text-to-image sampling with the base model.
pub fn text_to_image(
    base: &DenoiserModel,
    codec: &Codec,
    schedule: &NoiseSchedule,
    opts: &InpaintOptions,
) -> Result<Image> {
    opts.validate(schedule)?;
    run_sampler(base, base, codec, schedule, opts, None)
}

/// Something that fills the hole of an image.
pub trait Inpainter {
    fn name(&self) -> &str;

    fn inpaint_with_hook(
        &self,
        image: &Image,
        mask: &Mask,
        opts: &InpaintOptions,
        hook: Option<&mut StepHook<'_>>,
    ) -> Result<Image>;

    fn inpaint(&self, image: &Image, mask: &Mask, opts: &InpaintOptions) -> Result<Image> {
        self.inpaint_with_hook(image, mask, opts, None)
    }
}

/// Frozen base plus injected branch features.
pub struct BrushNetPipeline<'a> {
    pub name: String,
    pub base: &'a DenoiserModel,
    pub branch: &'a Branch,
    pub codec: &'a Codec,
    pub schedule: &'a NoiseSchedule,
}

impl BrushNetPipeline<'_> {
    /// Noise prediction combining base and branch for one masked image.
    pub fn dual_model(&self, image: &Image, mask: &Mask, w: f64) -> Result<DualModel<'_>> {
        self.branch.check_base(self.base.config())?;
        let p = prepare(image, mask, self.codec)?;
        let z_masked = tch::no_grad(|| self.branch.masked_latent(&p.masked.to_tensor(), self.codec))?;
        Ok(DualModel { base: self.base, branch: self.branch, z_masked, m_resized: p.m_resized, w, paired_batch: true })
    }
}

impl Inpainter for BrushNetPipeline<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn inpaint_with_hook(
        &self,
        image: &Image,
        mask: &Mask,
        opts: &InpaintOptions,
        hook: Option<&mut StepHook<'_>>,
    ) -> Result<Image> {
        opts.validate(self.schedule)?;
        let model = self.dual_model(image, mask, opts.w)?;
        let generated = run_sampler(&model, self.base, self.codec, self.schedule, opts, hook)?;
        pixel_blend(&generated, image, mask, opts.blend, opts.blur_sigma)
    }
}

/// Blended latent diffusion: after every step the preserved region of the
/// latent is overwritten with the noised masked-image latent.
pub struct BldPipeline<'a> {
    pub name: String,
    pub base: &'a DenoiserModel,
    pub codec: &'a Codec,
    pub schedule: &'a NoiseSchedule,
}

/// Per-step latent blending hook: keeps `z_masked` noised to the current
/// step wherever the resized hole mask is 0.
pub fn bld_hook<'h>(
    z_masked: Tensor,
    m_resized: crate::masking::ResizedMask,
    schedule: &'h NoiseSchedule,
    seed: u64,
    mut inner: Option<&'h mut StepHook<'h>>,
) -> impl FnMut(StepInfo, Tensor) -> Result<Tensor> + 'h {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1e2d);
    move |info: StepInfo, z: Tensor| {
        let eps = randn(&mut rng, &z_masked.size(), z_masked.kind());
        let z_known = add_noise(&z_masked, &eps, info.t_prev, schedule)?;
        let blended = latent_blend(&z, &z_known, &m_resized)?;
        match inner.as_mut() {
            Some(h) => h(info, blended),
            None => Ok(blended),
        }
    }
}

impl Inpainter for BldPipeline<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn inpaint_with_hook(
        &self,
        image: &Image,
        mask: &Mask,
        opts: &InpaintOptions,
        hook: Option<&mut StepHook<'_>>,
    ) -> Result<Image> {
        opts.validate(self.schedule)?;
        check_pair(image, mask, self.codec)?;
        let masked = make_masked_image(image, mask)?;
        let factor = (self.codec.config().image_size / self.codec.config().latent_size()) as usize;
        let m_resized = downsample_mask(mask, factor)?;
        let z_masked = tch::no_grad(|| self.codec.encode_image(&masked))?;
        let cond = self.base.text().embed(&opts.prompt)?;
        let uncond = self.base.text().null_embedding();
        let z_start = initial_latent(opts.sampler.seed, &latent_shape(self.codec));
        let generated = match hook {
            Some(inner) => {
                let mut blend = bld_hook(z_masked, m_resized, self.schedule, opts.sampler.seed, None);
                let mut chained = |info: StepInfo, z: Tensor| inner(info, blend(info, z)?);
                let z0 = sample(self.base, &z_start, &cond, &uncond, &opts.sampler, self.schedule, Some(&mut chained))?;
                tch::no_grad(|| self.codec.decode_image(&z0))?
            }
            None => {
                let mut blend = bld_hook(z_masked, m_resized, self.schedule, opts.sampler.seed, None);
                let z0 = sample(self.base, &z_start, &cond, &uncond, &opts.sampler, self.schedule, Some(&mut blend))?;
                tch::no_grad(|| self.codec.decode_image(&z0))?
            }
        };
        pixel_blend(&generated, image, mask, opts.blend, opts.blur_sigma)
    }
}

/// Single network with a widened input convolution, fine-tuned end to end.
pub struct SingleBranchPipeline<'a> {
    pub name: String,
    pub model: &'a DenoiserModel,
    pub codec: &'a Codec,
    pub schedule: &'a NoiseSchedule,
}

impl Inpainter for SingleBranchPipeline<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn inpaint_with_hook(
        &self,
        image: &Image,
        mask: &Mask,
        opts: &InpaintOptions,
        hook: Option<&mut StepHook<'_>>,
    ) -> Result<Image> {
        opts.validate(self.schedule)?;
        if self.model.config().in_channels != 9 {
            return Err(Error::Compatibility("single-branch model needs a 9-channel input".into()));
        }
        let p = prepare(image, mask, self.codec)?;
        let z_masked = tch::no_grad(|| self.codec.encode_image(&p.masked))?;
        let model = SingleBranchModel { model: self.model, z_masked, m_resized: p.m_resized };
        let generated = run_sampler(&model, self.model, self.codec, self.schedule, opts, hook)?;
        pixel_blend(&generated, image, mask, opts.blend, opts.blur_sigma)
    }
}

/// Runs the dual-branch pipeline once.
#[allow(clippy::too_many_arguments)]
pub fn inpaint(
    image: &Image,
    mask: &Mask,
    options: &InpaintOptions,
    base: &DenoiserModel,
    branch: &Branch,
    codec: &Codec,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    BrushNetPipeline { name: "brushnet".into(), base, branch, codec, schedule }.inpaint(image, mask, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branch::AblationAxes;
    use crate::codec::CodecConfig;
    use crate::unet::DenoiserConfig;

    struct Fixture {
        base: DenoiserModel,
        branch: Branch,
        codec: Codec,
        schedule: NoiseSchedule,
    }

    fn fixture() -> Fixture {
        let base = DenoiserModel::random(&DenoiserConfig::default(), 1).unwrap();
        let branch = Branch::init_from_base(&base, AblationAxes::default(), 2).unwrap();
        Fixture { base, branch, codec: Codec::random(&CodecConfig::default(), 3).unwrap(), schedule: NoiseSchedule::default() }
    }

    fn quick(seed: u64) -> InpaintOptions {
        InpaintOptions {
            sampler: SamplerConfig { steps: 3, guidance_scale: 2.0, seed },
            prompt: "a red circle".into(),
            ..Default::default()
        }
    }

    #[test]
    fn empty_mask_paste_returns_input() {
        let f = fixture();
        let img = crate::scene::SceneSampler::default().sample(&mut ChaCha8Rng::seed_from_u64(0)).render();
        let opts = InpaintOptions { blend: BlendMode::Paste, ..quick(4) };
        let out = inpaint(&img, &Mask::zeros(64, 64), &opts, &f.base, &f.branch, &f.codec, &f.schedule).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn zero_scale_matches_text_to_image() {
        let f = fixture();
        let img = Image::filled(64, 64, [0.3, 0.3, 0.3]);
        let mask = Mask::from_fn(64, 64, |y, _| y < 32);
        let opts = InpaintOptions { w: 0.0, blend: BlendMode::None, ..quick(5) };
        let a = inpaint(&img, &mask, &opts, &f.base, &f.branch, &f.codec, &f.schedule).unwrap();
        let b = text_to_image(&f.base, &f.codec, &f.schedule, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn options_are_validated() {
        let f = fixture();
        let img = Image::filled(64, 64, [0.3; 3]);
        let bad = InpaintOptions { w: 1.5, ..quick(0) };
        assert!(inpaint(&img, &Mask::zeros(64, 64), &bad, &f.base, &f.branch, &f.codec, &f.schedule).is_err());
        let small = Image::filled(32, 32, [0.3; 3]);
        assert!(matches!(
            inpaint(&small, &Mask::zeros(32, 32), &quick(0), &f.base, &f.branch, &f.codec, &f.schedule),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bld_is_deterministic() {
        let f = fixture();
        let p = BldPipeline { name: "bld".into(), base: &f.base, codec: &f.codec, schedule: &f.schedule };
        let img = Image::filled(64, 64, [0.2, 0.6, 0.4]);
        let mask = Mask::from_fn(64, 64, |y, x| (20..40).contains(&y) && (20..40).contains(&x));
        let a = p.inpaint(&img, &mask, &quick(9)).unwrap();
        let b = p.inpaint(&img, &mask, &quick(9)).unwrap();
        assert_eq!(a, b);
    }
}
