//! Text-conditioned UNet noise predictor with enumerated feature insertion points.
//!
//! Points, in order, at the default three-level config:
//! `0, 1` level-0 down blocks, `2` level-0 downsample, `3, 4` level-1 down
//! blocks, `5` level-1 downsample, `6, 7` level-2 down blocks, `8` mid block,
//! `9, 10` level-2 up blocks, `11, 12` level-1 up blocks.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::diffusion::Denoiser;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Attention, Builder, Conv2d, GroupNorm, LayerNorm, Linear, ParamStore};
use crate::text::{TextConfig, TextEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub in_channels: i64,
    pub out_channels: i64,
    pub latent_size: i64,
    pub widths: Vec<i64>,
    pub blocks: usize,
    pub attention: Vec<bool>,
    pub cross_attention: bool,
    pub heads: i64,
    pub groups: i64,
    pub time_freq_dim: i64,
    pub time_dim: i64,
    /// Number of up levels, counted from the coarsest, that carry insertion points.
    pub up_point_levels: usize,
    pub text: TextConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            out_channels: 4,
            latent_size: 16,
            widths: vec![32, 64, 64],
            blocks: 2,
            attention: vec![false, true, true],
            cross_attention: true,
            heads: 4,
            groups: 8,
            time_freq_dim: 32,
            time_dim: 128,
            up_point_levels: 2,
            text: TextConfig::default(),
        }
    }
}

/// Where an insertion point sits in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "site")]
pub enum Site {
    Down { level: usize, block: usize },
    Downsample { level: usize },
    Mid,
    Up { level: usize, block: usize },
}

impl Site {
    pub fn is_decoder(&self) -> bool {
        matches!(self, Site::Up { .. })
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(format!("denoiser config: {m}")));
        let l = self.levels();
        if l == 0 || self.attention.len() != l {
            return bad("widths and attention flags must be non-empty and equal length".into());
        }
        if self.blocks == 0 || self.up_point_levels > l {
            return bad(format!("blocks {} / up_point_levels {}", self.blocks, self.up_point_levels));
        }
        if self.latent_size % (1 << (l - 1)) != 0 {
            return bad(format!("latent size {} not divisible by {}", self.latent_size, 1 << (l - 1)));
        }
        for &w in &self.widths {
            if w % self.groups != 0 || w % self.heads != 0 {
                return bad(format!("width {w} incompatible with groups/heads"));
            }
        }
        if self.time_freq_dim % 2 != 0 {
            return bad("time_freq_dim must be even".into());
        }
        Ok(())
    }

    /// Every insertion point in evaluation order.
    pub fn insertion_points(&self) -> Vec<Site> {
        let l = self.levels();
        let mut sites = Vec::new();
        for level in 0..l {
            for block in 0..self.blocks {
                sites.push(Site::Down { level, block });
            }
            if level + 1 < l {
                sites.push(Site::Downsample { level });
            }
        }
        sites.push(Site::Mid);
        for level in (l - self.up_point_levels..l).rev() {
            for block in 0..self.blocks {
                sites.push(Site::Up { level, block });
            }
        }
        sites
    }

    pub fn n_points(&self) -> usize {
        self.insertion_points().len()
    }

    pub fn point_index(&self, site: Site) -> Option<usize> {
        self.insertion_points().iter().position(|s| *s == site)
    }

    /// (channels, height, width) of the activation at each point.
    pub fn point_shapes(&self) -> Vec<[i64; 3]> {
        let res = |level: usize| self.latent_size >> level;
        let last = self.levels() - 1;
        self.insertion_points()
            .into_iter()
            .map(|s| match s {
                Site::Down { level, .. } | Site::Up { level, .. } => {
                    [self.widths[level], res(level), res(level)]
                }
                Site::Downsample { level } => [self.widths[level], res(level + 1), res(level + 1)],
                Site::Mid => [self.widths[last], res(last), res(last)],
            })
            .collect()
    }
}

/// Per-point features, one optional tensor per insertion point. `None`
/// contributes nothing.
#[derive(Debug, Default)]
pub struct LayerFeatureSet {
    features: Vec<Option<Tensor>>,
}

impl LayerFeatureSet {
    pub fn new(features: Vec<Option<Tensor>>) -> Self {
        Self { features }
    }

    pub fn empty(n: usize) -> Self {
        Self { features: (0..n).map(|_| None).collect() }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Tensor> {
        self.features.get(i).and_then(|f| f.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&Tensor>> {
        self.features.iter().map(|f| f.as_ref())
    }

    pub fn into_inner(self) -> Vec<Option<Tensor>> {
        self.features
    }

    pub fn shallow_clone(&self) -> Self {
        Self { features: self.features.iter().map(|f| f.as_ref().map(|t| t.shallow_clone())).collect() }
    }

    /// True when every slot agrees in presence and bit pattern.
    pub fn bit_equal(&self, other: &LayerFeatureSet) -> bool {
        self.len() == other.len()
            && self.features.iter().zip(&other.features).all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => a.size() == b.size() && a.equal(b),
                _ => false,
            })
    }

    /// Checks length and per-point shapes (batch dimension excluded).
    pub fn check(&self, cfg: &DenoiserConfig) -> Result<()> {
        let shapes = cfg.point_shapes();
        if self.len() != shapes.len() {
            return Err(shape_err(format!("{} features for {} insertion points", self.len(), shapes.len())));
        }
        for (i, (f, s)) in self.features.iter().zip(&shapes).enumerate() {
            if let Some(f) = f {
                let size = f.size();
                if size.len() != 4 || size[1..] != s[..] {
                    return Err(shape_err(format!("feature {i} has shape {size:?}, expected (B, {s:?})")));
                }
            }
        }
        Ok(())
    }
}

/// Activations around each insertion point, captured by a traced forward.
#[derive(Debug, Default)]
pub struct Trace {
    pub pre: Vec<Tensor>,
    pub post: Vec<Tensor>,
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &mut Builder, name: &str, cin: i64, cout: i64, cfg: &DenoiserConfig) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            norm1: GroupNorm::new(b, &n("norm1"), cfg.groups, cin)?,
            conv1: Conv2d::new(b, &n("conv1"), cin, cout, 3, 1)?,
            temb: Linear::new(b, &n("temb"), cfg.time_dim, cout, true)?,
            norm2: GroupNorm::new(b, &n("norm2"), cfg.groups, cout)?,
            conv2: Conv2d::new(b, &n("conv2"), cout, cout, 3, 1)?,
            skip: if cin != cout { Some(Conv2d::new(b, &n("skip"), cin, cout, 1, 1)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Tensor {
        let h = self.conv1.forward(&self.norm1.forward(x).silu());
        let h = h + self.temb.forward(temb).unsqueeze(-1).unsqueeze(-1);
        let h = self.conv2.forward(&self.norm2.forward(&h).silu());
        match &self.skip {
            Some(s) => s.forward(x) + h,
            None => x + h,
        }
    }
}

struct AttnBlock {
    norm: GroupNorm,
    self_norm: LayerNorm,
    self_attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ff_norm: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl AttnBlock {
    fn new(b: &mut Builder, name: &str, ch: i64, cfg: &DenoiserConfig) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        let cross = if cfg.cross_attention {
            Some((
                LayerNorm::new(b, &n("cross_norm"), ch)?,
                Attention::new(b, &n("cross_attn"), ch, cfg.text.dim, cfg.heads)?,
            ))
        } else {
            None
        };
        Ok(Self {
            norm: GroupNorm::new(b, &n("norm"), cfg.groups, ch)?,
            self_norm: LayerNorm::new(b, &n("self_norm"), ch)?,
            self_attn: Attention::new(b, &n("self_attn"), ch, ch, cfg.heads)?,
            cross,
            ff_norm: LayerNorm::new(b, &n("ff_norm"), ch)?,
            ff1: Linear::new(b, &n("ff1"), ch, ch * 2, true)?,
            ff2: Linear::new(b, &n("ff2"), ch * 2, ch, true)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: Option<&Tensor>) -> Tensor {
        let (bsz, c, h, w) = x.size4().expect("rank-4 activation");
        let mut t = self.norm.forward(x).view([bsz, c, h * w]).transpose(1, 2);
        t = &t + self.self_attn.forward(&self.self_norm.forward(&t), None);
        if let (Some((norm, attn)), Some(ctx)) = (&self.cross, ctx) {
            t = &t + attn.forward(&norm.forward(&t), Some(ctx));
        }
        t = &t + self.ff2.forward(&self.ff1.forward(&self.ff_norm.forward(&t)).gelu("none"));
        x + t.transpose(1, 2).contiguous().view([bsz, c, h, w])
    }
}

struct Stage {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

impl Stage {
    fn new(b: &mut Builder, name: &str, cin: i64, cout: i64, attn: bool, cfg: &DenoiserConfig) -> Result<Self> {
        Ok(Self {
            res: ResBlock::new(b, &format!("{name}.res"), cin, cout, cfg)?,
            attn: if attn { Some(AttnBlock::new(b, &format!("{name}.attn"), cout, cfg)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: Option<&Tensor>) -> Tensor {
        let h = self.res.forward(x, temb);
        match &self.attn {
            Some(a) => a.forward(&h, ctx),
            None => h,
        }
    }
}

struct DownLevel {
    stages: Vec<Stage>,
    down: Option<Conv2d>,
}

struct UpLevel {
    level: usize,
    stages: Vec<Stage>,
    upsample: Option<Conv2d>,
}

struct Mid {
    res0: ResBlock,
    attn: Option<AttnBlock>,
    res1: ResBlock,
}

/// How much of the network is instantiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extent {
    /// Everything, including the output head.
    Full,
    /// Encoder, mid block, and only the up levels that carry insertion points.
    PointsOnly,
    /// Encoder and mid block.
    EncoderMid,
}

/// A UNet body. Parameter names do not depend on the extent, so a partial
/// network can be built from a full network's parameters.
pub struct Unet {
    cfg: DenoiserConfig,
    extent: Extent,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    down: Vec<DownLevel>,
    mid: Mid,
    up: Vec<UpLevel>,
    out: Option<(GroupNorm, Conv2d)>,
}

pub(crate) struct RunOutput {
    pub eps: Option<Tensor>,
    pub features: Vec<Tensor>,
}

impl Unet {
    pub fn new(b: &mut Builder, cfg: &DenoiserConfig, extent: Extent) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.levels();
        let w = &cfg.widths;
        let conv_in = Conv2d::new(b, "conv_in", cfg.in_channels, w[0], 3, 1)?;
        let time1 = Linear::new(b, "time.lin1", cfg.time_freq_dim, cfg.time_dim, true)?;
        let time2 = Linear::new(b, "time.lin2", cfg.time_dim, cfg.time_dim, true)?;
        let mut down = Vec::new();
        let mut ch = w[0];
        for level in 0..l {
            let mut stages = Vec::new();
            for block in 0..cfg.blocks {
                stages.push(Stage::new(b, &format!("down.{level}.blocks.{block}"), ch, w[level], cfg.attention[level], cfg)?);
                ch = w[level];
            }
            let down_conv = if level + 1 < l {
                Some(Conv2d::new(b, &format!("down.{level}.down"), ch, ch, 3, 2)?)
            } else {
                None
            };
            down.push(DownLevel { stages, down: down_conv });
        }
        let last = w[l - 1];
        let mid = Mid {
            res0: ResBlock::new(b, "mid.res0", last, last, cfg)?,
            attn: if cfg.attention[l - 1] { Some(AttnBlock::new(b, "mid.attn", last, cfg)?) } else { None },
            res1: ResBlock::new(b, "mid.res1", last, last, cfg)?,
        };
        let lowest_up = match extent {
            Extent::Full => 0,
            Extent::PointsOnly => l - cfg.up_point_levels,
            Extent::EncoderMid => l,
        };
        let mut up = Vec::new();
        let mut ch = last;
        for level in (lowest_up..l).rev() {
            let mut stages = Vec::new();
            for block in 0..cfg.blocks {
                let name = format!("up.{level}.blocks.{block}");
                stages.push(Stage::new(b, &name, ch + w[level], w[level], cfg.attention[level], cfg)?);
                ch = w[level];
            }
            let upsample = if level > lowest_up {
                Some(Conv2d::new(b, &format!("up.{level}.upsample"), ch, ch, 3, 1)?)
            } else {
                None
            };
            up.push(UpLevel { level, stages, upsample });
        }
        let out = if extent == Extent::Full {
            Some((
                GroupNorm::new(b, "out.norm", cfg.groups, w[0])?,
                Conv2d::new(b, "out.conv", w[0], cfg.out_channels, 3, 1)?,
            ))
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), extent, conv_in, time1, time2, down, mid, up, out })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    fn time_embedding(&self, t: &[usize], batch: i64, kind: Kind) -> Result<Tensor> {
        if t.len() != 1 && t.len() as i64 != batch {
            return Err(shape_err(format!("{} timesteps for batch {batch}", t.len())));
        }
        let half = self.cfg.time_freq_dim / 2;
        let mut rows = Vec::with_capacity(t.len() * 2 * half as usize);
        for &step in t {
            let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
            let args: Vec<f64> = freqs.map(|f| step as f64 * f).collect();
            rows.extend(args.iter().map(|a| a.cos()));
            rows.extend(args.iter().map(|a| a.sin()));
        }
        let emb = Tensor::from_slice(&rows).view([t.len() as i64, 2 * half]).to_kind(kind);
        let emb = self.time2.forward(&self.time1.forward(&emb).silu()).silu();
        Ok(if t.len() == 1 { emb.expand([batch, self.cfg.time_dim], false) } else { emb })
    }

    fn check_inputs(&self, x: &Tensor, ctx: Option<&Tensor>) -> Result<i64> {
        let size = x.size();
        let s = self.cfg.latent_size;
        if size.len() != 4 || size[1] != self.cfg.in_channels || size[2] != s || size[3] != s {
            return Err(shape_err(format!(
                "denoiser input {size:?}, expected (B, {}, {s}, {s})",
                self.cfg.in_channels
            )));
        }
        if let Some(ctx) = ctx {
            let c = ctx.size();
            let t = &self.cfg.text;
            if c.len() != 3 || (c[0] != 1 && c[0] != size[0]) || c[1] != t.seq_len || c[2] != t.dim {
                return Err(shape_err(format!(
                    "text embedding {c:?}, expected (B, {}, {})",
                    t.seq_len, t.dim
                )));
            }
        }
        Ok(size[0])
    }

    /// Runs the network, adding `w * injected[i]` at every point `i` that has
    /// a feature (and only when `w != 0`), optionally recording activations.
    pub(crate) fn run(
        &self,
        x: &Tensor,
        t: &[usize],
        ctx: Option<&Tensor>,
        inject: Option<(&LayerFeatureSet, f64)>,
        mut trace: Option<&mut Trace>,
    ) -> Result<RunOutput> {
        let batch = self.check_inputs(x, ctx)?;
        if let Some((f, _)) = inject {
            f.check(&self.cfg)?;
        }
        let ctx_owned = match ctx {
            Some(c) if self.cfg.cross_attention && c.size()[0] != batch => Some(c.expand([batch, -1, -1], false)),
            Some(c) if self.cfg.cross_attention => Some(c.shallow_clone()),
            _ => None,
        };
        let ctx = ctx_owned.as_ref();
        let temb = self.time_embedding(t, batch, x.kind())?;
        let mut features: Vec<Tensor> = Vec::with_capacity(self.cfg.n_points());
        let mut at_point = |h: Tensor, features: &mut Vec<Tensor>| -> Tensor {
            let i = features.len();
            let add = inject.and_then(|(f, w)| f.get(i).filter(|_| w != 0.0).map(|inj| (inj, w)));
            let post = match add {
                Some((inj, w)) => &h + inj * w,
                None => h.shallow_clone(),
            };
            if let Some(tr) = trace.as_mut() {
                tr.pre.push(h);
                tr.post.push(post.shallow_clone());
            }
            features.push(post.shallow_clone());
            post
        };

        let mut h = self.conv_in.forward(x);
        let mut skips: Vec<Tensor> = Vec::new();
        for level in &self.down {
            for stage in &level.stages {
                h = at_point(stage.forward(&h, &temb, ctx), &mut features);
                skips.push(h.shallow_clone());
            }
            if let Some(d) = &level.down {
                h = at_point(d.forward(&h), &mut features);
            }
        }
        h = self.mid.res0.forward(&h, &temb);
        if let Some(a) = &self.mid.attn {
            h = a.forward(&h, ctx);
        }
        h = at_point(self.mid.res1.forward(&h, &temb), &mut features);
        let point_levels = self.cfg.levels() - self.cfg.up_point_levels;
        for level in &self.up {
            for stage in &level.stages {
                let skip = skips.pop().expect("one skip per up stage");
                let out = stage.forward(&Tensor::cat(&[&h, &skip], 1), &temb, ctx);
                h = if level.level >= point_levels { at_point(out, &mut features) } else { out };
            }
            if let Some(u) = &level.upsample {
                h = u.forward(&h.upsample_nearest2d([h.size()[2] * 2, h.size()[3] * 2], None, None));
            }
        }
        let eps = self.out.as_ref().map(|(norm, conv)| conv.forward(&norm.forward(&h).silu()));
        Ok(RunOutput { eps, features })
    }
}

/// Base denoiser: UNet plus the text encoder that produces its condition.
pub struct DenoiserModel {
    unet: Unet,
    text: TextEncoder,
    params: ParamStore,
}

impl DenoiserModel {
    pub fn random(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        Self::build(Builder::random(seed, Kind::Float), cfg)
    }

    pub fn from_params(cfg: &DenoiserConfig, params: ParamStore) -> Result<Self> {
        Self::build(Builder::load(params), cfg)
    }

    fn build(mut b: Builder, cfg: &DenoiserConfig) -> Result<Self> {
        let unet = Unet::new(&mut b, cfg, Extent::Full)?;
        let text = TextEncoder::new(&mut b, "text", &cfg.text)?;
        Ok(Self { unet, text, params: b.finish() })
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.unet.config()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn text(&self) -> &TextEncoder {
        &self.text
    }

    pub fn unet(&self) -> &Unet {
        &self.unet
    }

    /// Noise prediction and the activation at every insertion point.
    pub fn forward_features(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<(Tensor, LayerFeatureSet)> {
        let out = self.unet.run(z_t, t, Some(cond), None, None)?;
        let eps = out.eps.expect("full network has an output head");
        Ok((eps, LayerFeatureSet::new(out.features.into_iter().map(Some).collect())))
    }

    /// Noise prediction with `w * injected[i]` added at every insertion point.
    pub fn forward_injected(
        &self,
        z_t: &Tensor,
        t: &[usize],
        cond: &Tensor,
        injected: &LayerFeatureSet,
        w: f64,
    ) -> Result<Tensor> {
        let out = self.unet.run(z_t, t, Some(cond), Some((injected, w)), None)?;
        Ok(out.eps.expect("full network has an output head"))
    }

    /// Like [`forward_injected`](Self::forward_injected), also returning the
    /// activation before and after injection at every point.
    pub fn forward_traced(
        &self,
        z_t: &Tensor,
        t: &[usize],
        cond: &Tensor,
        injected: &LayerFeatureSet,
        w: f64,
    ) -> Result<(Tensor, Trace)> {
        let mut trace = Trace::default();
        let out = self.unet.run(z_t, t, Some(cond), Some((injected, w)), Some(&mut trace))?;
        Ok((out.eps.expect("full network has an output head"), trace))
    }
}

impl Denoiser for DenoiserModel {
    fn predict(&self, z_t: &Tensor, t: &[usize], text: &Tensor) -> Result<Tensor> {
        Ok(self.unet.run(z_t, t, Some(text), None, None)?.eps.expect("output head"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_has_thirteen_points() {
        let cfg = DenoiserConfig::default();
        assert_eq!(cfg.n_points(), 13);
        let shapes = cfg.point_shapes();
        assert_eq!(shapes[0], [32, 16, 16]);
        assert_eq!(shapes[2], [32, 8, 8]);
        assert_eq!(shapes[5], [64, 4, 4]);
        assert_eq!(shapes[8], [64, 4, 4]);
        assert_eq!(shapes[12], [64, 8, 8]);
        assert_eq!(cfg.point_index(Site::Mid), Some(8));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let model = DenoiserModel::random(&DenoiserConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = randn(&mut rng, &[2, 4, 16, 16], Kind::Float);
        let cond = model.text().embed("a red circle").unwrap();
        let (eps, feats) = model.forward_features(&z, &[500], &cond).unwrap();
        assert_eq!(eps.size(), vec![2, 4, 16, 16]);
        assert_eq!(feats.len(), 13);
        feats.check(model.config()).unwrap();
        let (eps2, _) = model.forward_features(&z, &[500], &cond).unwrap();
        assert!(eps.equal(&eps2));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = DenoiserModel::random(&DenoiserConfig::default(), 1).unwrap();
        let z = Tensor::zeros([1, 3, 16, 16], (Kind::Float, tch::Device::Cpu));
        let cond = model.text().null_embedding();
        assert!(matches!(model.forward_features(&z, &[1], &cond), Err(Error::Shape(_))));
    }

    #[test]
    fn partial_extents_share_names() {
        let cfg = DenoiserConfig::default();
        let mut b = Builder::random(4, Kind::Float);
        Unet::new(&mut b, &cfg, Extent::Full).unwrap();
        let full = b.finish();
        for extent in [Extent::PointsOnly, Extent::EncoderMid] {
            let mut lb = Builder::load(full.deep_clone());
            Unet::new(&mut lb, &cfg, extent).unwrap();
            let part = lb.finish();
            assert!(part.len() < full.len());
            assert!(part.names().all(|n| full.contains(n)));
        }
    }
}
