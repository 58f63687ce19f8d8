//! Deterministic convolutional autoencoder between 64x64 RGB images and
//! 4x16x16 latents.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Builder, Conv2d, ParamStore};
use crate::optim::{Ema, Optimizer, OptimizerConfig};
use crate::raster::{batch_tensor, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub image_size: i64,
    pub latent_channels: i64,
    pub encoder_widths: [i64; 3],
    pub decoder_widths: [i64; 3],
    /// Multiplies raw encoder outputs so latents have roughly unit spread.
    pub latent_scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            latent_channels: 4,
            encoder_widths: [32, 64, 64],
            decoder_widths: [64, 32, 16],
            latent_scale: 1.0,
        }
    }
}

impl CodecConfig {
    pub const FACTOR: i64 = 4;

    pub fn latent_size(&self) -> i64 {
        self.image_size / Self::FACTOR
    }
}

pub struct Codec {
    cfg: CodecConfig,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    params: ParamStore,
}

impl Codec {
    pub fn random(cfg: &CodecConfig, seed: u64) -> Result<Self> {
        Self::build(Builder::random(seed, Kind::Float), cfg)
    }

    pub fn from_params(cfg: &CodecConfig, params: ParamStore) -> Result<Self> {
        Self::build(Builder::load(params), cfg)
    }

    fn build(mut b: Builder, cfg: &CodecConfig) -> Result<Self> {
        if cfg.image_size % CodecConfig::FACTOR != 0 || !(cfg.latent_scale > 0.0) {
            return Err(Error::Parameter(format!("invalid codec config {cfg:?}")));
        }
        let [e0, e1, e2] = cfg.encoder_widths;
        let [d0, d1, d2] = cfg.decoder_widths;
        let enc = vec![
            Conv2d::new(&mut b, "enc.0", 3, e0, 3, 1)?,
            Conv2d::new(&mut b, "enc.1", e0, e1, 3, 2)?,
            Conv2d::new(&mut b, "enc.2", e1, e2, 3, 2)?,
            Conv2d::new(&mut b, "enc.3", e2, e2, 3, 1)?,
            Conv2d::new(&mut b, "enc.out", e2, cfg.latent_channels, 1, 1)?,
        ];
        let dec = vec![
            Conv2d::new(&mut b, "dec.in", cfg.latent_channels, d0, 1, 1)?,
            Conv2d::new(&mut b, "dec.0", d0, d0, 3, 1)?,
            Conv2d::new(&mut b, "dec.1", d0, d1, 3, 1)?,
            Conv2d::new(&mut b, "dec.2", d1, d2, 3, 1)?,
            Conv2d::new(&mut b, "dec.out", d2, 3, 3, 1)?,
        ];
        Ok(Self { cfg: cfg.clone(), enc, dec, params: b.finish() })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn set_latent_scale(&mut self, scale: f64) {
        self.cfg.latent_scale = scale;
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let s = x.size();
        let n = self.cfg.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(shape_err(format!("codec input {s:?}, expected (B, 3, {n}, {n})")));
        }
        Ok(())
    }

    /// Intermediate encoder activations followed by the unscaled latent.
    pub fn activations(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.check_images(images)?;
        let mut h = images * 2.0 - 1.0;
        let mut acts = Vec::with_capacity(self.enc.len());
        for (i, conv) in self.enc.iter().enumerate() {
            h = conv.forward(&h);
            if i + 1 < self.enc.len() {
                h = h.silu();
            }
            acts.push(h.shallow_clone());
        }
        Ok(acts)
    }

    /// (B, 3, H, W) images in `[0, 1]` to (B, C, H/4, W/4) latents.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let raw = self.activations(images)?.pop().expect("encoder has layers");
        Ok(raw * self.cfg.latent_scale)
    }

    /// Decoder output before clamping, in image units.
    pub fn decode_raw(&self, latents: &Tensor) -> Result<Tensor> {
        let s = latents.size();
        let n = self.cfg.latent_size();
        if s.len() != 4 || s[1] != self.cfg.latent_channels || s[2] != n || s[3] != n {
            return Err(shape_err(format!(
                "latent {s:?}, expected (B, {}, {n}, {n})",
                self.cfg.latent_channels
            )));
        }
        let mut h = self.dec[0].forward(&(latents / self.cfg.latent_scale)).silu();
        h = self.dec[1].forward(&h).silu();
        h = h.upsample_nearest2d([n * 2, n * 2], None, None);
        h = self.dec[2].forward(&h).silu();
        h = h.upsample_nearest2d([n * 4, n * 4], None, None);
        h = self.dec[3].forward(&h).silu();
        Ok((self.dec[4].forward(&h) + 1.0) * 0.5)
    }

    /// Latents to images clamped to `[0, 1]`.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(latents)?.clamp(0.0, 1.0))
    }

    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        self.encode(&image.to_tensor())
    }

    pub fn decode_image(&self, latent: &Tensor) -> Result<Image> {
        let latent = if latent.dim() == 3 { latent.unsqueeze(0) } else { latent.shallow_clone() };
        Image::from_tensor(&self.decode(&latent)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub latent_penalty: f64,
    /// Fraction of images held out for the reported reconstruction error.
    pub holdout: f64,
    pub optimizer: OptimizerConfig,
    pub log_every: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            seed: 0,
            latent_penalty: 1e-4,
            holdout: 0.1,
            optimizer: OptimizerConfig { lr: 2e-3, ..Default::default() },
            log_every: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecReport {
    pub steps: usize,
    pub final_loss_ema: f64,
    pub holdout_mse: f64,
    pub holdout_psnr_db: f64,
    pub holdout_images: usize,
}

/// Mean squared reconstruction error over `images`.
pub fn reconstruction_mse(codec: &Codec, images: &[&Image]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Parameter("no images to evaluate".into()));
    }
    tch::no_grad(|| {
        let mut total = 0.0;
        for chunk in images.chunks(32) {
            let x = batch_tensor(chunk)?;
            let y = codec.decode(&codec.encode(&x)?)?;
            total += (y - &x).square().sum(Kind::Double).double_value(&[]);
        }
        Ok(total / (images.len() * 3 * images[0].width() * images[0].height()) as f64)
    })
}

/// Trains a codec from scratch; the last `holdout` fraction is never seen in
/// training. Sets the latent scale from the training-set latent spread.
pub fn train_codec(images: &[Image], cfg: &CodecConfig, tc: &CodecTrainConfig) -> Result<(Codec, CodecReport)> {
    if images.is_empty() {
        return Err(Error::Parameter("codec training needs at least one image".into()));
    }
    if tc.batch_size == 0 || tc.steps == 0 {
        return Err(Error::Parameter("steps and batch size must be positive".into()));
    }
    let n_hold = ((images.len() as f64 * tc.holdout).round() as usize).min(images.len() - 1);
    let (train, hold) = images.split_at(images.len() - n_hold);
    let mut codec = Codec::random(&CodecConfig { latent_scale: 1.0, ..cfg.clone() }, tc.seed)?;
    let params: Vec<Tensor> = codec.params.iter().map(|(_, t)| t.shallow_clone()).collect();
    let mut opt = Optimizer::new(&tc.optimizer, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_c0de);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut ema = Ema::new(0.98);
    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let x = batch_tensor(&batch)?;
        let z = codec.encode(&x)?;
        let y = codec.decode_raw(&z)?;
        let loss = (y - &x).square().mean(Kind::Float) + z.square().mean(Kind::Float) * tc.latent_penalty;
        let value = loss.double_value(&[]);
        if !value.is_finite() {
            return Err(Error::Training { step, loss: value });
        }
        opt.backward_step(&loss)?;
        let smooth = ema.update(value);
        if tc.log_every > 0 && (step + 1) % tc.log_every == 0 {
            log::info!("codec step {} loss {:.5}", step + 1, smooth);
        }
    }
    codec.params.set_requires_grad(false);
    let spread = tch::no_grad(|| -> Result<f64> {
        let sample: Vec<&Image> = train.iter().take(256).collect();
        let z = codec.encode(&batch_tensor(&sample)?)?;
        Ok(z.std(true).double_value(&[]))
    })?;
    codec.set_latent_scale(if spread > 1e-6 { 1.0 / spread } else { 1.0 });
    let eval: Vec<&Image> = if hold.is_empty() { train.iter().collect() } else { hold.iter().collect() };
    let mse = reconstruction_mse(&codec, &eval)?;
    let report = CodecReport {
        steps: tc.steps,
        final_loss_ema: ema.value().unwrap_or(f64::NAN),
        holdout_mse: mse,
        holdout_psnr_db: crate::eval::psnr_from_mse(mse),
        holdout_images: eval.len(),
    };
    Ok((codec, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_round_trip() {
        let codec = Codec::random(&CodecConfig::default(), 0).unwrap();
        let x = Image::filled(64, 64, [0.2, 0.4, 0.6]).to_tensor();
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.size(), vec![1, 4, 16, 16]);
        let y = codec.decode(&z).unwrap();
        assert_eq!(y.size(), x.size());
        assert!(codec.encode(&x).unwrap().equal(&z));
    }

    #[test]
    fn decode_clamps_random_latents() {
        let codec = Codec::random(&CodecConfig::default(), 0).unwrap();
        let z = crate::nn::randn(&mut ChaCha8Rng::seed_from_u64(1), &[2, 4, 16, 16], Kind::Float) * 50.0;
        let y = codec.decode(&z).unwrap();
        assert!(y.min().double_value(&[]) >= 0.0 && y.max().double_value(&[]) <= 1.0);
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let codec = Codec::random(&CodecConfig::default(), 0).unwrap();
        let bad = Tensor::zeros([1, 3, 32, 32], (Kind::Float, tch::Device::Cpu));
        assert!(matches!(codec.encode(&bad), Err(Error::Shape(_))));
        let bad = Tensor::zeros([1, 3, 16, 16], (Kind::Float, tch::Device::Cpu));
        assert!(matches!(codec.decode(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(train_codec(&[], &CodecConfig::default(), &CodecTrainConfig::default()).is_err());
    }

    #[test]
    fn short_training_is_deterministic() {
        let imgs: Vec<Image> = (0..6).map(|i| Image::filled(64, 64, [i as f32 / 6.0, 0.5, 0.2])).collect();
        let tc = CodecTrainConfig { steps: 3, batch_size: 2, ..Default::default() };
        let (a, _) = train_codec(&imgs, &CodecConfig::default(), &tc).unwrap();
        let (b, _) = train_codec(&imgs, &CodecConfig::default(), &tc).unwrap();
        assert!(a.params().bit_equal(b.params()));
    }
}
