//! The trainable inpainting branch: a clone of the base UNet that reads
//! `[z_t, z_masked, mask]`, has no text path by default, and feeds the base
//! through zero-initialized 1x1 convolutions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::codec::Codec;
use crate::diffusion::Denoiser;
use crate::error::{shape_err, Error, Result};
use crate::masking::BlendMode;
use crate::nn::{Builder, Conv2d, ParamStore};
use crate::unet::{DenoiserConfig, DenoiserModel, Extent, LayerFeatureSet, Site, Unet};

macro_rules! axis_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Parameter(format!(
                        concat!("unknown ", stringify!($name), " value {:?}"), other
                    ))),
                }
            }
        }
    };
}

axis_enum!(
    /// How the masked image reaches latent resolution.
    MaskedEncoder { Conv => "conv", Codec => "codec" }
);
axis_enum!(Presence { With => "with", Without => "without" });
axis_enum!(
    /// Which base insertion points receive branch features.
    Injection { Full => "full", Half => "half", Cn => "cn" }
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationAxes {
    pub encoder: MaskedEncoder,
    pub mask_in_input: Presence,
    pub cross_attn: Presence,
    pub injection: Injection,
    pub blend: BlendMode,
}

impl Default for AblationAxes {
    fn default() -> Self {
        Self {
            encoder: MaskedEncoder::Codec,
            mask_in_input: Presence::With,
            cross_attn: Presence::Without,
            injection: Injection::Full,
            blend: BlendMode::Blur,
        }
    }
}

impl fmt::Display for AblationAxes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "encoder={} mask={} cross_attn={} injection={} blend={}",
            self.encoder, self.mask_in_input, self.cross_attn, self.injection, self.blend
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    /// Geometry of the base this branch was cloned from.
    pub base: DenoiserConfig,
    pub axes: AblationAxes,
}

impl BranchConfig {
    pub fn new(base: &DenoiserConfig, axes: AblationAxes) -> Self {
        Self { base: base.clone(), axes }
    }

    /// Config of the branch's own UNet body.
    pub fn body(&self) -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 2 * self.base.in_channels + (self.axes.mask_in_input == Presence::With) as i64,
            cross_attention: self.axes.cross_attn == Presence::With,
            ..self.base.clone()
        }
    }

    pub fn extent(&self) -> Extent {
        match self.axes.injection {
            Injection::Full | Injection::Half => Extent::PointsOnly,
            Injection::Cn => Extent::EncoderMid,
        }
    }

    /// `(target, source)` pairs: base point `target` receives the branch
    /// activation captured at branch point `source`.
    pub fn routes(&self) -> Vec<(usize, usize)> {
        let sites = self.base.insertion_points();
        match self.axes.injection {
            Injection::Full => (0..sites.len()).map(|i| (i, i)).collect(),
            Injection::Half => sites
                .iter()
                .enumerate()
                .filter(|(_, s)| s.is_decoder())
                .map(|(i, _)| (i, i))
                .collect(),
            Injection::Cn => sites
                .iter()
                .enumerate()
                .filter_map(|(i, s)| {
                    let source = match *s {
                        Site::Mid => Site::Mid,
                        Site::Up { level, block } => Site::Down { level, block: self.base.blocks - 1 - block },
                        _ => return None,
                    };
                    self.base.point_index(source).map(|j| (i, j))
                })
                .collect(),
        }
    }

    pub fn uses_text(&self) -> bool {
        self.axes.cross_attn == Presence::With
    }
}

/// Strided convolution stack mapping a masked image straight to latent size.
struct ConvEncoder {
    convs: Vec<Conv2d>,
}

impl ConvEncoder {
    const WIDTHS: [i64; 3] = [16, 32, 32];

    fn new(b: &mut Builder, latent_channels: i64) -> Result<Self> {
        let [a, c, d] = Self::WIDTHS;
        Ok(Self {
            convs: vec![
                Conv2d::new(b, "cond_enc.0", 3, a, 3, 2)?,
                Conv2d::new(b, "cond_enc.1", a, c, 3, 2)?,
                Conv2d::new(b, "cond_enc.2", c, d, 3, 1)?,
                Conv2d::new(b, "cond_enc.3", d, latent_channels, 3, 1)?,
            ],
        })
    }

    fn forward(&self, images: &Tensor) -> Tensor {
        let mut h = images * 2.0 - 1.0;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h);
            if i + 1 < self.convs.len() {
                h = h.silu();
            }
        }
        h
    }
}

pub struct Branch {
    cfg: BranchConfig,
    unet: Unet,
    cond_enc: Option<ConvEncoder>,
    zero: Vec<(usize, usize, Conv2d)>,
    params: ParamStore,
}

impl Branch {
    /// Clones `base` into a branch. Cross-attention is dropped unless the axes
    /// keep it; the input convolution gains zero-initialized channels for the
    /// masked latent and mask. `seed` initializes the conv encoder, if any.
    pub fn init_from_base(base: &DenoiserModel, axes: AblationAxes, seed: u64) -> Result<Self> {
        let base_cfg = base.config();
        if base_cfg.in_channels != 4 || !base_cfg.cross_attention {
            return Err(Error::Compatibility(format!(
                "branch needs a 4-channel text-conditioned base, got in_channels={} cross_attention={}",
                base_cfg.in_channels, base_cfg.cross_attention
            )));
        }
        let cfg = BranchConfig::new(base_cfg, axes);
        let body = cfg.body();
        let mut store = ParamStore::new();
        for (name, t) in base.params().iter().filter(|(n, _)| !n.starts_with("text.")) {
            store.insert(name.clone(), t.detach().copy());
        }
        let w = store.require("conv_in.weight")?;
        let s = w.size();
        let extra = Tensor::zeros([s[0], body.in_channels - s[1], s[2], s[3]], (w.kind(), w.device()));
        store.insert("conv_in.weight", Tensor::cat(&[w, &extra], 1));

        let mut fresh = Builder::random(seed, Kind::Float);
        let shapes = base_cfg.point_shapes();
        for (target, _) in cfg.routes() {
            Conv2d::zero(&mut fresh, &format!("zero.{target}"), shapes[target][0])?;
        }
        if axes.encoder == MaskedEncoder::Conv {
            ConvEncoder::new(&mut fresh, base_cfg.out_channels)?;
        }
        // Loading through a partial body keeps only the tensors it uses.
        let mut b = Builder::load(store);
        Unet::new(&mut b, &body, cfg.extent())?;
        let mut params = b.finish();
        params.merge(&fresh.finish());
        Self::from_params(&cfg, params)
    }

    pub fn from_params(cfg: &BranchConfig, params: ParamStore) -> Result<Self> {
        let mut b = Builder::load(params);
        let unet = Unet::new(&mut b, &cfg.body(), cfg.extent())?;
        let shapes = cfg.base.point_shapes();
        let zero = cfg
            .routes()
            .into_iter()
            .map(|(target, source)| {
                let conv = Conv2d::zero(&mut b, &format!("zero.{target}"), shapes[target][0])?;
                Ok((target, source, conv))
            })
            .collect::<Result<Vec<_>>>()?;
        let cond_enc = match cfg.axes.encoder {
            MaskedEncoder::Conv => Some(ConvEncoder::new(&mut b, cfg.base.out_channels)?),
            MaskedEncoder::Codec => None,
        };
        Ok(Self { cfg: cfg.clone(), unet, cond_enc, zero, params: b.finish() })
    }

    pub fn config(&self) -> &BranchConfig {
        &self.cfg
    }

    pub fn axes(&self) -> AblationAxes {
        self.cfg.axes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Checks that this branch can drive `base` (same insertion geometry).
    pub fn check_base(&self, base: &DenoiserConfig) -> Result<()> {
        if base.point_shapes() != self.cfg.base.point_shapes() || base.time_dim != self.cfg.base.time_dim {
            return Err(Error::Compatibility("base insertion geometry differs from the branch's".into()));
        }
        if self.cfg.uses_text() && base.text != self.cfg.base.text {
            return Err(Error::Compatibility("text geometry differs from the branch's".into()));
        }
        Ok(())
    }

    /// Latent-resolution view of the masked image, via the codec or the
    /// branch's own convolution stack.
    pub fn masked_latent(&self, masked_images: &Tensor, codec: &Codec) -> Result<Tensor> {
        match &self.cond_enc {
            Some(enc) => {
                let s = masked_images.size();
                let n = self.cfg.base.latent_size * 4;
                if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
                    return Err(shape_err(format!("masked image {s:?}, expected (B, 3, {n}, {n})")));
                }
                Ok(enc.forward(masked_images))
            }
            None => codec.encode(masked_images),
        }
    }

    /// Zero-convolved branch features for every insertion point (points the
    /// injection mode skips are `None`). `text` is used only when the branch
    /// keeps cross-attention.
    pub fn forward(
        &self,
        z_t: &Tensor,
        z_masked: &Tensor,
        m_resized: &Tensor,
        t: &[usize],
        text: Option<&Tensor>,
    ) -> Result<LayerFeatureSet> {
        let batch = z_t.size()[0];
        let fit = |x: &Tensor, what: &str| -> Result<Tensor> {
            let s = x.size();
            let zs = z_t.size();
            if s.len() != 4 || s[2..] != zs[2..] || (s[0] != 1 && s[0] != batch) {
                return Err(shape_err(format!("{what} {s:?} does not match latent {zs:?}")));
            }
            Ok(if s[0] == batch { x.shallow_clone() } else { x.expand([batch, -1, -1, -1], false) })
        };
        let mut inputs = vec![z_t.shallow_clone(), fit(z_masked, "masked latent")?];
        if self.cfg.axes.mask_in_input == Presence::With {
            let m = fit(m_resized, "resized mask")?;
            if m.size()[1] != 1 {
                return Err(shape_err("resized mask must have one channel"));
            }
            inputs.push(m.to_kind(z_t.kind()));
        }
        let x = Tensor::cat(&inputs, 1);
        let ctx = if self.cfg.uses_text() {
            Some(text.ok_or_else(|| Error::Parameter("branch with cross-attention needs a text embedding".into()))?)
        } else {
            None
        };
        let out = self.unet.run(&x, t, ctx, None, None)?;
        let mut features: Vec<Option<Tensor>> = (0..self.cfg.base.n_points()).map(|_| None).collect();
        for (target, source, conv) in &self.zero {
            features[*target] = Some(conv.forward(&out.features[*source]));
        }
        Ok(LayerFeatureSet::new(features))
    }
}

/// Branch features for `[z_t, z_masked, m_resized]` at step `t`.
pub fn branch_forward(
    z_t: &Tensor,
    z_masked: &Tensor,
    m_resized: &Tensor,
    t: &[usize],
    branch: &Branch,
) -> Result<LayerFeatureSet> {
    branch.forward(z_t, z_masked, m_resized, t, None)
}

/// Base plus branch as one noise predictor for a fixed masked image.
pub struct DualModel<'a> {
    pub base: &'a DenoiserModel,
    pub branch: &'a Branch,
    pub z_masked: Tensor,
    pub m_resized: Tensor,
    pub w: f64,
    /// Set when callers stack identical latents (as guidance does); the
    /// branch then runs once on the first half and its features are shared.
    pub paired_batch: bool,
}

impl<'a> DualModel<'a> {
    pub fn features(&self, z_t: &Tensor, t: &[usize], text: &Tensor) -> Result<LayerFeatureSet> {
        let batch = z_t.size()[0];
        if self.paired_batch && !self.branch.cfg.uses_text() && batch % 2 == 0 && t.len() == 1 {
            let half = z_t.narrow(0, 0, batch / 2);
            let zm = if self.z_masked.size()[0] == batch { self.z_masked.narrow(0, 0, batch / 2) } else { self.z_masked.shallow_clone() };
            let m = if self.m_resized.size()[0] == batch { self.m_resized.narrow(0, 0, batch / 2) } else { self.m_resized.shallow_clone() };
            let f = self.branch.forward(&half, &zm, &m, t, None)?;
            let shared = f
                .into_inner()
                .into_iter()
                .map(|o| o.map(|x| if x.size()[0] == 1 { x } else { x.repeat([2, 1, 1, 1]) }))
                .collect();
            return Ok(LayerFeatureSet::new(shared));
        }
        self.branch.forward(z_t, &self.z_masked, &self.m_resized, t, Some(text))
    }
}

impl Denoiser for DualModel<'_> {
    fn predict(&self, z_t: &Tensor, t: &[usize], text: &Tensor) -> Result<Tensor> {
        if self.w == 0.0 {
            return self.base.predict(z_t, t, text);
        }
        let feats = self.features(z_t, t, text)?;
        self.base.forward_injected(z_t, t, text, &feats, self.w)
    }
}

/// Single-network inpainting baseline: the base itself with a widened input
/// convolution, fine-tuned end to end.
pub struct SingleBranchModel<'a> {
    pub model: &'a DenoiserModel,
    pub z_masked: Tensor,
    pub m_resized: Tensor,
}

impl Denoiser for SingleBranchModel<'_> {
    fn predict(&self, z_t: &Tensor, t: &[usize], text: &Tensor) -> Result<Tensor> {
        let batch = z_t.size()[0];
        let fit = |x: &Tensor| if x.size()[0] == batch { x.shallow_clone() } else { x.expand([batch, -1, -1, -1], false) };
        let x = Tensor::cat(&[z_t.shallow_clone(), fit(&self.z_masked), fit(&self.m_resized).to_kind(z_t.kind())], 1);
        self.model.predict(&x, t, text)
    }
}

/// Widens a 4-channel base into the single-network inpainting layout: the
/// extra input channels start at zero so the initial prediction is unchanged.
pub fn widen_base(base: &DenoiserModel) -> Result<DenoiserModel> {
    let cfg = base.config();
    if cfg.in_channels != 4 {
        return Err(Error::Compatibility(format!("base already has {} input channels", cfg.in_channels)));
    }
    let mut store = base.params().deep_clone();
    let w = store.require("conv_in.weight")?;
    let s = w.size();
    let extra = Tensor::zeros([s[0], 5, s[2], s[3]], (w.kind(), w.device()));
    store.insert("conv_in.weight", Tensor::cat(&[w, &extra], 1));
    DenoiserModel::from_params(&DenoiserConfig { in_channels: 9, ..cfg.clone() }, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn base() -> DenoiserModel {
        DenoiserModel::random(&DenoiserConfig::default(), 3).unwrap()
    }

    fn inputs(seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = randn(&mut rng, &[1, 4, 16, 16], Kind::Float);
        let zm = randn(&mut rng, &[1, 4, 16, 16], Kind::Float);
        let m = (randn(&mut rng, &[1, 1, 16, 16], Kind::Float).gt(0.0)).to_kind(Kind::Float);
        (z, zm, m)
    }

    #[test]
    fn routes_per_injection_mode() {
        let base_cfg = DenoiserConfig::default();
        let route = |injection| BranchConfig::new(&base_cfg, AblationAxes { injection, ..Default::default() }).routes();
        assert_eq!(route(Injection::Full).len(), 13);
        assert_eq!(route(Injection::Half), vec![(9, 9), (10, 10), (11, 11), (12, 12)]);
        assert_eq!(route(Injection::Cn), vec![(8, 8), (9, 7), (10, 6), (11, 4), (12, 3)]);
    }

    #[test]
    fn init_structure() {
        let base = base();
        let branch = Branch::init_from_base(&base, AblationAxes::default(), 0).unwrap();
        assert!(branch.params().names().all(|n| !n.contains("cross")));
        let w = branch.params().require("conv_in.weight").unwrap();
        assert_eq!(w.size()[1], 9);
        assert!(w.narrow(1, 0, 4).equal(base.params().require("conv_in.weight").unwrap()));
        assert_eq!(w.narrow(1, 4, 5).abs().max().double_value(&[]), 0.0);
        for name in ["down.1.blocks.0.res.conv1.weight", "mid.attn.self_attn.q.weight"] {
            assert!(branch.params().require(name).unwrap().equal(base.params().require(name).unwrap()));
        }
    }

    #[test]
    fn zero_init_features_are_zero() {
        let base = base();
        let branch = Branch::init_from_base(&base, AblationAxes::default(), 0).unwrap();
        let (z, zm, m) = inputs(1);
        let f = branch_forward(&z, &zm, &m, &[400], &branch).unwrap();
        assert_eq!(f.len(), 13);
        f.check(base.config()).unwrap();
        for x in f.iter() {
            assert_eq!(x.unwrap().abs().max().double_value(&[]), 0.0);
        }
    }

    #[test]
    fn every_axis_value_builds() {
        let base = base();
        let (z, zm, m) = inputs(2);
        let text = base.text().embed("a red circle").unwrap();
        for injection in [Injection::Full, Injection::Half, Injection::Cn] {
            for encoder in [MaskedEncoder::Conv, MaskedEncoder::Codec] {
                for cross_attn in [Presence::With, Presence::Without] {
                    for mask_in_input in [Presence::With, Presence::Without] {
                        let axes = AblationAxes { injection, encoder, cross_attn, mask_in_input, ..Default::default() };
                        let br = Branch::init_from_base(&base, axes, 5).unwrap();
                        let f = br.forward(&z, &zm, &m, &[10], Some(&text)).unwrap();
                        f.check(base.config()).unwrap();
                        let present = f.iter().filter(|x| x.is_some()).count();
                        assert_eq!(present, br.config().routes().len());
                        let rebuilt = Branch::from_params(br.config(), br.params().deep_clone()).unwrap();
                        assert!(rebuilt.params().bit_equal(br.params()));
                    }
                }
            }
        }
    }

    #[test]
    fn widened_base_keeps_prediction() {
        let base = base();
        let wide = widen_base(&base).unwrap();
        let (z, zm, m) = inputs(3);
        let text = base.text().null_embedding();
        let single = SingleBranchModel { model: &wide, z_masked: zm, m_resized: m };
        let a = base.predict(&z, &[100], &text).unwrap();
        let b = single.predict(&z, &[100], &text).unwrap();
        assert!(a.allclose(&b, 1e-5, 1e-6, false));
    }

    #[test]
    fn incompatible_base_is_rejected() {
        let wide = widen_base(&base()).unwrap();
        assert!(matches!(
            Branch::init_from_base(&wide, AblationAxes::default(), 0),
            Err(Error::Compatibility(_))
        ));
    }
}
