//! Request and response bodies, and request validation.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use brushnet_core::diffusion::{NoiseSchedule, SamplerConfig};
use brushnet_core::masking::{BlendMode, Mask};
use brushnet_core::pipeline::InpaintOptions;
use brushnet_core::text::tokenize;
use brushnet_core::Image;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Role};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InpaintRequest {
    /// Base64 PNG.
    pub image: String,
    /// Base64 single-channel PNG, 255 = hole.
    pub mask: String,
    #[serde(default)]
    pub prompt: String,
    pub w: Option<f64>,
    pub blend_mode: Option<String>,
    pub blur_sigma: Option<f64>,
    pub steps: Option<usize>,
    pub guidance: Option<f64>,
    pub seed: Option<u64>,
    /// `brushnet` (default) or `bld`.
    pub pipeline: Option<String>,
    pub base: Option<String>,
    pub branch: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineKind {
    Brushnet,
    Bld,
}

/// The options a request resolved to, echoed in the response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedOptions {
    pub prompt: String,
    pub w: f64,
    pub blend_mode: BlendMode,
    pub blur_sigma: f64,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    pub pipeline: PipelineKind,
    pub base: String,
    /// Absent for the latent-blending baseline.
    pub branch: Option<String>,
}

impl ResolvedOptions {
    pub fn inpaint_options(&self) -> InpaintOptions {
        InpaintOptions {
            w: self.w,
            blend: self.blend_mode,
            blur_sigma: self.blur_sigma,
            sampler: SamplerConfig { steps: self.steps, guidance_scale: self.guidance, seed: self.seed },
            prompt: self.prompt.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InpaintResponse {
    /// Base64 PNG with the request's dimensions.
    pub image: String,
    pub timing_ms: u64,
    pub options: ResolvedOptions,
    /// `base+branch`, or the base id alone for the baseline.
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

/// A client mistake tied to one request field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: &'static str,
    pub message: String,
}

fn bad(field: &'static str, message: impl Into<String>) -> FieldError {
    FieldError { field, message: message.into() }
}

pub struct ValidRequest {
    pub image: Image,
    pub mask: Mask,
    pub options: ResolvedOptions,
}

fn decode_b64(field: &'static str, text: &str) -> Result<Vec<u8>, FieldError> {
    B64.decode(text.trim()).map_err(|e| bad(field, format!("invalid base64: {e}")))
}

pub fn encode_png_b64(image: &Image) -> brushnet_core::Result<String> {
    Ok(B64.encode(image.to_png_bytes()?))
}

pub fn validate(
    req: &InpaintRequest,
    catalog: &Catalog,
    image_size: usize,
    seq_len: usize,
    schedule: &NoiseSchedule,
) -> Result<ValidRequest, FieldError> {
    let image = Image::from_png_bytes(&decode_b64("image", &req.image)?)
        .map_err(|e| bad("image", format!("not a decodable PNG: {e}")))?;
    if image.width() != image_size || image.height() != image_size {
        return Err(bad("image", format!("expected {image_size}x{image_size}, got {}x{}", image.width(), image.height())));
    }
    let mask = Mask::from_png_bytes(&decode_b64("mask", &req.mask)?)
        .map_err(|e| bad("mask", format!("not a decodable PNG: {e}")))?;
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(bad(
            "mask",
            format!("mask is {}x{} but image is {}x{}", mask.width(), mask.height(), image.width(), image.height()),
        ));
    }
    tokenize(&req.prompt, seq_len).map_err(|e| bad("prompt", e.to_string()))?;

    let w = req.w.unwrap_or(1.0);
    if !(0.0..=1.0).contains(&w) {
        return Err(bad("w", format!("{w} outside [0, 1]")));
    }
    let blend_mode = match &req.blend_mode {
        None => BlendMode::Blur,
        Some(s) => s.parse().map_err(|_| bad("blend_mode", format!("{s:?} is not one of none, paste, blur")))?,
    };
    let blur_sigma = req.blur_sigma.unwrap_or(3.0);
    if !blur_sigma.is_finite() || blur_sigma < 0.0 {
        return Err(bad("blur_sigma", format!("{blur_sigma} must be >= 0")));
    }
    let steps = req.steps.unwrap_or(DEFAULT_STEPS);
    if steps == 0 || steps > schedule.steps() {
        return Err(bad("steps", format!("{steps} outside [1, {}]", schedule.steps())));
    }
    let guidance = req.guidance.unwrap_or(DEFAULT_GUIDANCE);
    if !guidance.is_finite() || guidance < 0.0 {
        return Err(bad("guidance", format!("{guidance} must be a finite non-negative scale")));
    }
    let pipeline = match req.pipeline.as_deref() {
        None | Some("brushnet") => PipelineKind::Brushnet,
        Some("bld") => PipelineKind::Bld,
        Some(other) => return Err(bad("pipeline", format!("{other:?} is not one of brushnet, bld"))),
    };

    let branch = match pipeline {
        PipelineKind::Bld => None,
        PipelineKind::Brushnet => {
            let entry = match &req.branch {
                Some(id) => catalog.find(id).ok_or_else(|| bad("branch", format!("unknown model id {id:?}")))?,
                None => catalog
                    .first(Role::Branch)
                    .or_else(|| catalog.first(Role::SingleBranch))
                    .ok_or_else(|| bad("branch", "no branch checkpoint is loaded"))?,
            };
            if !matches!(entry.role, Role::Branch | Role::SingleBranch) {
                return Err(bad("branch", format!("{:?} is not a branch", entry.id)));
            }
            Some(entry.clone())
        }
    };
    let base = match &req.base {
        Some(id) => {
            let e = catalog.find(id).ok_or_else(|| bad("base", format!("unknown model id {id:?}")))?;
            if e.role != Role::Base {
                return Err(bad("base", format!("{id:?} is not a base model")));
            }
            e.id.clone()
        }
        None => catalog
            .entries()
            .into_iter()
            .find(|e| e.role == Role::Base && e.tuned_with.is_some() && e.tuned_with == branch.as_ref().map(|b| b.id.clone()))
            .or_else(|| catalog.entries().into_iter().find(|e| e.role == Role::Base && e.tuned_with.is_none()))
            .map(|e| e.id)
            .unwrap_or_default(),
    };
    let needs_base = !matches!(branch.as_ref().map(|b| b.role), Some(Role::SingleBranch));
    if needs_base && base.is_empty() {
        return Err(bad("base", "no base checkpoint is loaded"));
    }

    Ok(ValidRequest {
        image,
        mask,
        options: ResolvedOptions {
            prompt: req.prompt.clone(),
            w,
            blend_mode,
            blur_sigma,
            steps,
            guidance,
            seed: req.seed.unwrap_or(0),
            pipeline,
            base,
            branch: branch.map(|b| b.id),
        },
    })
}
