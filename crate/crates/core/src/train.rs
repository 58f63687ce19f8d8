//! Base-model and inpainting training loops.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::branch::{widen_base, AblationAxes, Branch, DualModel, SingleBranchModel};
use crate::codec::Codec;
use crate::data::Sample;
use crate::diffusion::{denoise_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::masking::{downsample_mask, make_masked_image};
use crate::nn::{randn, ParamStore};
use crate::optim::{Ema, Optimizer, OptimizerConfig, OptimizerKind};
use crate::raster::{batch_tensor, Image};
use crate::text::tokenize;
use crate::unet::{DenoiserConfig, DenoiserModel};

/// Dual branch (frozen or tuned base) or a single widened network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    Dual,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_base: bool,
    pub axes: AblationAxes,
    pub architecture: Architecture,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub clip_norm: f64,
    pub warmup: usize,
    /// Probability of replacing a caption by the null sequence.
    pub cond_dropout: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            steps: 10_000,
            batch_size: 8,
            seed: 0,
            freeze_base: true,
            axes: AblationAxes::default(),
            architecture: Architecture::Dual,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            clip_norm: 1.0,
            warmup: 200,
            cond_dropout: 0.1,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("steps and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Parameter(format!("cond_dropout {} outside [0, 1]", self.cond_dropout)));
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            momentum: self.momentum,
            clip_norm: self.clip_norm,
            warmup: self.warmup,
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub seconds: f64,
    /// Raw per-step losses.
    pub losses: Vec<f32>,
    /// Mean of the smoothed loss over the first and last tenth of training.
    pub first_window: f64,
    pub last_window: f64,
}

impl TrainReport {
    fn from_losses(losses: Vec<f32>, seconds: f64) -> Self {
        let mut ema = Ema::new(0.9);
        let smooth: Vec<f64> = losses.iter().map(|&l| ema.update(l as f64)).collect();
        let w = (smooth.len() / 10).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        Self {
            steps: losses.len(),
            seconds,
            first_window: mean(&smooth[..w.min(smooth.len())]),
            last_window: mean(&smooth[smooth.len().saturating_sub(w)..]),
            losses,
        }
    }

    /// Smoothed loss over the last tenth is below 0.9 of the first tenth.
    pub fn loss_decreased(&self) -> bool {
        self.last_window < 0.9 * self.first_window
    }
}

/// Reshuffled-epoch index stream.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), cursor: n }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

fn stack_rows(rows: &Tensor, idx: &[usize]) -> Tensor {
    let idx: Vec<i64> = idx.iter().map(|&i| i as i64).collect();
    rows.index_select(0, &Tensor::from_slice(&idx))
}

fn encode_all(codec: &Codec, images: &[&Image]) -> Result<Tensor> {
    tch::no_grad(|| {
        let parts = images
            .chunks(64)
            .map(|c| codec.encode(&batch_tensor(c)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0))
    })
}

fn trainable(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, t)| t.shallow_clone()).collect()
}

fn sample_timesteps(rng: &mut ChaCha8Rng, n: usize, total: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..=total)).collect()
}

fn drop_conditions(rng: &mut ChaCha8Rng, tokens: &[Option<Vec<i64>>], idx: &[usize], p: f64) -> Vec<Option<Vec<i64>>> {
    idx.iter()
        .map(|&i| if rng.gen_bool(p) { None } else { tokens[i].clone() })
        .collect()
}

fn check_loss(loss: &Tensor, step: usize) -> Result<f32> {
    let v = loss.double_value(&[]);
    if !v.is_finite() {
        return Err(Error::Training { step, loss: v });
    }
    Ok(v as f32)
}

/// Text-to-image pretraining of a fresh base on codec latents of `images`.
pub fn train_base(
    images: &[&Image],
    captions: &[&str],
    codec: &Codec,
    dcfg: &DenoiserConfig,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<(DenoiserModel, TrainReport)> {
    cfg.validate()?;
    if images.is_empty() || images.len() != captions.len() {
        return Err(Error::Parameter("need one caption per image and at least one image".into()));
    }
    let started = Instant::now();
    let model = DenoiserModel::random(dcfg, cfg.seed)?;
    let latents = encode_all(codec, images)?;
    let seq = dcfg.text.seq_len as usize;
    let tokens = captions.iter().map(|c| tokenize(c, seq)).collect::<Result<Vec<_>>>()?;
    let mut opt = Optimizer::new(&cfg.optimizer_config(), trainable(model.params()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba5e);
    let mut batcher = Batcher::new(images.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batcher.next(&mut rng, cfg.batch_size);
        let z0 = stack_rows(&latents, &idx);
        let t = sample_timesteps(&mut rng, idx.len(), schedule.steps());
        let eps = randn(&mut rng, &z0.size(), Kind::Float);
        let rows = drop_conditions(&mut rng, &tokens, &idx, cfg.cond_dropout);
        let text = model.text().embed_tokens(&rows)?;
        let loss = denoise_loss(&model, &z0, &text, &t, &eps, schedule)?;
        losses.push(check_loss(&loss, step)?);
        opt.backward_step(&loss)?;
        log_progress("base", step, cfg, &losses);
    }
    model.params().set_requires_grad(false);
    Ok((model, TrainReport::from_losses(losses, started.elapsed().as_secs_f64())))
}

fn log_progress(what: &str, step: usize, cfg: &TrainConfig, losses: &[f32]) {
    if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
        let tail = &losses[losses.len().saturating_sub(cfg.log_every)..];
        let mean = tail.iter().map(|&v| v as f64).sum::<f64>() / tail.len() as f64;
        log::info!("{what} step {} loss {:.4}", step + 1, mean);
    }
}

/// Result of inpainting training.
pub enum InpaintModel {
    Dual { branch: Branch, tuned_base: Option<DenoiserModel> },
    Single(DenoiserModel),
}

/// Trains the inpainting branch (or single widened network) on masked samples.
/// With `freeze_base` and the dual architecture, `base` is never written.
pub fn train_inpainting(
    samples: &[&Sample],
    base: &DenoiserModel,
    codec: &Codec,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<(InpaintModel, TrainReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Parameter("inpainting training needs samples".into()));
    }
    let started = Instant::now();
    let bcfg = base.config();
    if bcfg.in_channels != 4 {
        return Err(Error::Compatibility("inpainting starts from a 4-channel base".into()));
    }
    let factor = (codec.config().image_size / codec.config().latent_size()) as usize;
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let masked: Vec<Image> = samples.iter().map(|s| make_masked_image(&s.image, &s.mask)).collect::<Result<_>>()?;
    let masked_refs: Vec<&Image> = masked.iter().collect();
    let z0_all = encode_all(codec, &images)?;
    let m_all = Tensor::cat(
        &samples
            .iter()
            .map(|s| Ok(downsample_mask(&s.mask, factor)?.to_tensor()))
            .collect::<Result<Vec<_>>>()?,
        0,
    );
    let seq = bcfg.text.seq_len as usize;
    let tokens = samples.iter().map(|s| tokenize(&s.record.caption, seq)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a9a);
    let mut batcher = Batcher::new(samples.len());
    let mut losses = Vec::with_capacity(cfg.steps);

    match cfg.architecture {
        Architecture::Single => {
            let model = widen_base(base)?;
            let zm_all = encode_all(codec, &masked_refs)?;
            let mut opt = Optimizer::new(&cfg.optimizer_config(), trainable(model.params()))?;
            for step in 0..cfg.steps {
                let idx = batcher.next(&mut rng, cfg.batch_size);
                let z0 = stack_rows(&z0_all, &idx);
                let t = sample_timesteps(&mut rng, idx.len(), schedule.steps());
                let eps = randn(&mut rng, &z0.size(), Kind::Float);
                let rows = drop_conditions(&mut rng, &tokens, &idx, cfg.cond_dropout);
                let text = model.text().embed_tokens(&rows)?;
                let single = SingleBranchModel { model: &model, z_masked: stack_rows(&zm_all, &idx), m_resized: stack_rows(&m_all, &idx) };
                let loss = denoise_loss(&single, &z0, &text, &t, &eps, schedule)?;
                losses.push(check_loss(&loss, step)?);
                opt.backward_step(&loss)?;
                log_progress("single", step, cfg, &losses);
            }
            model.params().set_requires_grad(false);
            Ok((InpaintModel::Single(model), TrainReport::from_losses(losses, started.elapsed().as_secs_f64())))
        }
        Architecture::Dual => {
            let tuned = if cfg.freeze_base {
                None
            } else {
                Some(DenoiserModel::from_params(bcfg, base.params().deep_clone())?)
            };
            let active_base = tuned.as_ref().unwrap_or(base);
            if cfg.freeze_base {
                base.params().set_requires_grad(false);
            }
            let branch = Branch::init_from_base(base, cfg.axes, cfg.seed)?;
            let mut params = trainable(branch.params());
            if let Some(t) = &tuned {
                params.extend(trainable(t.params()));
            }
            let mut opt = Optimizer::new(&cfg.optimizer_config(), params)?;
            let conv_encoder = cfg.axes.encoder == crate::branch::MaskedEncoder::Conv;
            let zm_all = if conv_encoder {
                None
            } else {
                Some(encode_all(codec, &masked_refs)?)
            };
            let masked_px = if conv_encoder { Some(batch_tensor(&masked_refs)?) } else { None };
            // A frozen text encoder lets every caption be embedded once.
            let frozen_text = if cfg.freeze_base {
                Some(tch::no_grad(|| base.text().embed_tokens(&tokens))?)
            } else {
                None
            };
            let null = base.text().null_embedding().detach();
            for step in 0..cfg.steps {
                let idx = batcher.next(&mut rng, cfg.batch_size);
                let z0 = stack_rows(&z0_all, &idx);
                let t = sample_timesteps(&mut rng, idx.len(), schedule.steps());
                let eps = randn(&mut rng, &z0.size(), Kind::Float);
                let text = match &frozen_text {
                    Some(all) => {
                        let rows: Vec<Tensor> = idx
                            .iter()
                            .map(|&i| if rng.gen_bool(cfg.cond_dropout) { null.shallow_clone() } else { all.narrow(0, i as i64, 1) })
                            .collect();
                        Tensor::cat(&rows, 0)
                    }
                    None => {
                        let rows = drop_conditions(&mut rng, &tokens, &idx, cfg.cond_dropout);
                        active_base.text().embed_tokens(&rows)?
                    }
                };
                let z_masked = match (&zm_all, &masked_px) {
                    (Some(z), _) => stack_rows(z, &idx),
                    (None, Some(px)) => branch.masked_latent(&stack_rows(px, &idx), codec)?,
                    _ => unreachable!("one masked-image source is prepared"),
                };
                let dual = DualModel {
                    base: active_base,
                    branch: &branch,
                    z_masked,
                    m_resized: stack_rows(&m_all, &idx),
                    w: 1.0,
                    paired_batch: false,
                };
                let loss = denoise_loss(&dual, &z0, &text, &t, &eps, schedule)?;
                losses.push(check_loss(&loss, step)?);
                opt.backward_step(&loss)?;
                log_progress("branch", step, cfg, &losses);
            }
            branch.params().set_requires_grad(false);
            if let Some(t) = &tuned {
                t.params().set_requires_grad(false);
            }
            Ok((
                InpaintModel::Dual { branch, tuned_base: tuned },
                TrainReport::from_losses(losses, started.elapsed().as_secs_f64()),
            ))
        }
    }
}

impl InpaintModel {
    pub fn branch(&self) -> Option<&Branch> {
        match self {
            InpaintModel::Dual { branch, .. } => Some(branch),
            InpaintModel::Single(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::data::{materialize, synth_dataset, DataKind};

    fn small_cfg() -> DenoiserConfig {
        DenoiserConfig { widths: vec![8, 16, 16], groups: 4, heads: 2, ..Default::default() }
    }

    fn quick() -> TrainConfig {
        TrainConfig { steps: 3, batch_size: 2, warmup: 0, log_every: 0, ..Default::default() }
    }

    #[test]
    fn base_training_is_deterministic() {
        let codec = Codec::random(&CodecConfig::default(), 0).unwrap();
        let recs = synth_dataset(4, 1, DataKind::Brush).unwrap();
        let imgs: Vec<Image> = recs.iter().map(|r| r.render()).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let caps: Vec<&str> = recs.iter().map(|r| r.caption.as_str()).collect();
        let s = NoiseSchedule::default();
        let (a, ra) = train_base(&refs, &caps, &codec, &small_cfg(), &quick(), &s).unwrap();
        let (b, _) = train_base(&refs, &caps, &codec, &small_cfg(), &quick(), &s).unwrap();
        assert!(a.params().bit_equal(b.params()));
        assert_eq!(ra.losses.len(), 3);
    }

    #[test]
    fn frozen_base_is_untouched() {
        let codec = Codec::random(&CodecConfig::default(), 0).unwrap();
        let base = DenoiserModel::random(&small_cfg(), 2).unwrap();
        let before = base.params().deep_clone();
        let samples = materialize(&synth_dataset(3, 4, DataKind::Seg).unwrap()).unwrap();
        let refs: Vec<&Sample> = samples.iter().collect();
        let s = NoiseSchedule::default();
        let (model, _) = train_inpainting(&refs, &base, &codec, &quick(), &s).unwrap();
        assert!(base.params().bit_equal(&before));
        let branch = model.branch().unwrap();
        let zero_sum: f64 = branch
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("zero."))
            .map(|(_, t)| t.abs().sum(Kind::Double).double_value(&[]))
            .sum();
        assert!(zero_sum > 0.0, "zero convolutions should have moved");
    }

    #[test]
    fn nonpositive_steps_are_rejected() {
        let cfg = TrainConfig { steps: 0, ..quick() };
        assert!(cfg.validate().is_err());
    }
}
