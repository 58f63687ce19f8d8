//! Flat key-value config file. Command-line flags win over file values,
//! which win over library defaults.

use std::path::Path;

use anyhow::{Context, Result};
use brushnet_core::branch::{AblationAxes, Injection, MaskedEncoder, Presence};
use brushnet_core::codec::CodecTrainConfig;
use brushnet_core::diffusion::SamplerConfig;
use brushnet_core::masking::BlendMode;
use brushnet_core::optim::OptimizerKind;
use brushnet_core::pipeline::InpaintOptions;
use brushnet_core::train::TrainConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    // training
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub freeze_base: Option<bool>,
    pub optimizer: Option<OptimizerKind>,
    pub momentum: Option<f64>,
    pub clip_norm: Option<f64>,
    pub warmup: Option<usize>,
    pub cond_dropout: Option<f64>,
    pub log_every: Option<usize>,
    // branch axes
    pub encoder: Option<MaskedEncoder>,
    pub mask_in_input: Option<Presence>,
    pub cross_attn: Option<Presence>,
    pub injection: Option<Injection>,
    pub blend: Option<BlendMode>,
    // sampling
    pub sample_steps: Option<usize>,
    pub guidance_scale: Option<f64>,
    pub w: Option<f64>,
    pub blur_sigma: Option<f64>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),+) => { $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )+ };
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Values set in `other` replace ours.
    pub fn overlay(mut self, other: &Settings) -> Self {
        let s = &mut self;
        overlay!(s, other; lr, steps, batch_size, seed, freeze_base, optimizer, momentum, clip_norm, warmup,
            cond_dropout, log_every, encoder, mask_in_input, cross_attn, injection, blend, sample_steps,
            guidance_scale, w, blur_sigma);
        self
    }

    pub fn train(&self, defaults: TrainConfig) -> TrainConfig {
        let d = defaults;
        let axes = AblationAxes {
            encoder: self.encoder.unwrap_or(d.axes.encoder),
            mask_in_input: self.mask_in_input.unwrap_or(d.axes.mask_in_input),
            cross_attn: self.cross_attn.unwrap_or(d.axes.cross_attn),
            injection: self.injection.unwrap_or(d.axes.injection),
            blend: self.blend.unwrap_or(d.axes.blend),
        };
        TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            steps: self.steps.unwrap_or(d.steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.seed.unwrap_or(d.seed),
            freeze_base: self.freeze_base.unwrap_or(d.freeze_base),
            axes,
            optimizer: self.optimizer.unwrap_or(d.optimizer),
            momentum: self.momentum.unwrap_or(d.momentum),
            clip_norm: self.clip_norm.unwrap_or(d.clip_norm),
            warmup: self.warmup.unwrap_or(d.warmup),
            cond_dropout: self.cond_dropout.unwrap_or(d.cond_dropout),
            log_every: self.log_every.unwrap_or(d.log_every),
            ..d
        }
    }

    pub fn codec(&self) -> CodecTrainConfig {
        let d = CodecTrainConfig::default();
        let mut optimizer = d.optimizer.clone();
        if let Some(lr) = self.lr {
            optimizer.lr = lr;
        }
        if let Some(k) = self.optimizer {
            optimizer.kind = k;
        }
        CodecTrainConfig {
            steps: self.steps.unwrap_or(d.steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.seed.unwrap_or(d.seed),
            log_every: self.log_every.unwrap_or(d.log_every),
            optimizer,
            ..d
        }
    }

    pub fn inpaint(&self, prompt: String) -> InpaintOptions {
        let d = InpaintOptions::default();
        InpaintOptions {
            w: self.w.unwrap_or(d.w),
            blend: self.blend.unwrap_or(d.blend),
            blur_sigma: self.blur_sigma.unwrap_or(d.blur_sigma),
            sampler: SamplerConfig {
                steps: self.sample_steps.unwrap_or(d.sampler.steps),
                guidance_scale: self.guidance_scale.unwrap_or(d.sampler.guidance_scale),
                seed: self.seed.unwrap_or(d.sampler.seed),
            },
            prompt,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_file_parses_and_flags_win() {
        let file: Settings = toml::from_str(
            "lr = 0.001\nsteps = 300\ninjection = \"half\"\nblend = \"paste\"\nguidance_scale = 5.0\noptimizer = \"sgd\"\n",
        )
        .unwrap();
        let flags = Settings { steps: Some(7), ..Default::default() };
        let s = file.overlay(&flags);
        let t = s.train(TrainConfig::default());
        assert_eq!((t.steps, t.lr, t.axes.injection), (7, 0.001, Injection::Half));
        assert_eq!(t.optimizer, OptimizerKind::Sgd);
        let o = s.inpaint("a red circle".into());
        assert_eq!((o.sampler.guidance_scale, o.sampler.steps, o.blend), (5.0, 50, BlendMode::Paste));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Settings>("learning_rate = 1.0").is_err());
    }
}
