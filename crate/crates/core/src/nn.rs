//! Minimal parameter store and layer set on top of raw `tch` tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path. Layers hold
//! shallow clones of the store's tensors, so in-place optimizer updates on
//! the store are visible to every layer. All random initialization goes
//! through a seeded ChaCha generator; torch's global RNG is never used.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tch::{Device, Kind, Tensor};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Detached copies of every tensor; the clone shares no storage with `self`.
    pub fn deep_clone(&self) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.detach().copy()))
            .collect();
        ParamStore { tensors }
    }

    pub fn set_requires_grad(&self, requires_grad: bool) {
        for t in self.tensors.values() {
            let _ = t.set_requires_grad(requires_grad);
        }
    }

    pub fn zero_grad(&self) {
        for t in self.tensors.values() {
            let mut g = t.grad();
            if g.defined() {
                let _ = g.zero_();
            }
        }
    }

    /// Tensors whose name starts with `prefix.`, with the prefix stripped.
    pub fn sub_store(&self, prefix: &str) -> ParamStore {
        let dotted = format!("{prefix}.");
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(&dotted)
                    .map(|rest| (rest.to_string(), v.shallow_clone()))
            })
            .collect();
        ParamStore { tensors }
    }

    /// Tensors whose name does not start with `prefix.`.
    pub fn without_prefix(&self, prefix: &str) -> ParamStore {
        let dotted = format!("{prefix}.");
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(&dotted))
            .map(|(k, v)| (k.clone(), v.shallow_clone()))
            .collect();
        ParamStore { tensors }
    }

    /// Adds every tensor of `other` under its own name.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.shallow_clone());
        }
    }

    /// Adds every tensor of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.tensors
                .insert(format!("{prefix}.{k}"), v.shallow_clone());
        }
    }

    /// Exact equality of names, shapes and values.
    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().all(|(k, a)| {
                other
                    .tensors
                    .get(k)
                    .map(|b| a.size() == b.size() && a.equal(b))
                    .unwrap_or(false)
            })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

enum Source {
    Random(ChaCha8Rng),
    Load(ParamStore),
}

/// Creates named parameters, either freshly initialized from a seed or
/// taken from an existing store (strict: missing names are errors).
pub struct Builder {
    store: ParamStore,
    source: Source,
    kind: Kind,
}

impl Builder {
    pub fn random(seed: u64, kind: Kind) -> Self {
        Self {
            store: ParamStore::new(),
            source: Source::Random(ChaCha8Rng::seed_from_u64(seed)),
            kind,
        }
    }

    pub fn load(store: ParamStore) -> Self {
        let kind = store
            .iter()
            .next()
            .map(|(_, t)| t.kind())
            .unwrap_or(Kind::Float);
        Self {
            store: ParamStore::new(),
            source: Source::Load(store),
            kind,
        }
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn var(&mut self, name: &str, shape: &[i64], init: Init) -> Result<Tensor> {
        let tensor = match &mut self.source {
            Source::Random(rng) => {
                let n: i64 = shape.iter().product();
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n as usize],
                    Init::Ones => vec![1.0; n as usize],
                    Init::Uniform(bound) => (0..n)
                        .map(|_| rng.gen_range(-bound..=bound))
                        .collect(),
                    Init::Normal(std) => (0..n)
                        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                        .collect(),
                };
                Tensor::from_slice(&data).view(shape).to_kind(self.kind)
            }
            Source::Load(src) => {
                let t = src
                    .remove(name)
                    .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
                if t.size() != shape {
                    return Err(shape_err(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.size()
                    )));
                }
                t
            }
        };
        self.store.insert(name, tensor.shallow_clone());
        Ok(tensor)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: i64,
    padding: i64,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: i64,
        cout: i64,
        kernel: i64,
        stride: i64,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Self::with_init(b, name, cin, cout, kernel, stride, Init::Uniform(bound))
    }

    /// 1x1 convolution with weights and bias exactly zero.
    pub fn zero(b: &mut Builder, name: &str, channels: i64) -> Result<Self> {
        Self::with_init(b, name, channels, channels, 1, 1, Init::Zeros)
    }

    fn with_init(
        b: &mut Builder,
        name: &str,
        cin: i64,
        cout: i64,
        kernel: i64,
        stride: i64,
        init: Init,
    ) -> Result<Self> {
        let weight = b.var(&format!("{name}.weight"), &[cout, cin, kernel, kernel], init)?;
        let bias_init = match init {
            Init::Uniform(bound) => Init::Uniform(bound),
            other => other,
        };
        let bias = b.var(&format!("{name}.bias"), &[cout], bias_init)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(
            &self.weight,
            Some(&self.bias),
            [self.stride, self.stride],
            [self.padding, self.padding],
            [1, 1],
            1,
        )
    }
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, din: i64, dout: i64, bias: bool) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        let weight = b.var(&format!("{name}.weight"), &[dout, din], Init::Uniform(bound))?;
        let bias = if bias {
            Some(b.var(&format!("{name}.bias"), &[dout], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.linear(&self.weight, self.bias.as_ref())
    }
}

pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: i64,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, name: &str, groups: i64, channels: i64) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::Parameter(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            weight: b.var(&format!("{name}.weight"), &[channels], Init::Ones)?,
            bias: b.var(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.group_norm(self.groups, Some(&self.weight), Some(&self.bias), 1e-5, false)
    }
}

pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    dim: i64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: i64) -> Result<Self> {
        Ok(Self {
            weight: b.var(&format!("{name}.weight"), &[dim], Init::Ones)?,
            bias: b.var(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm([self.dim], Some(&self.weight), Some(&self.bias), 1e-5, false)
    }
}

/// Multi-head attention. Queries come from `x` (B, N, dim); keys and values
/// come from `context` (B, M, context_dim), or from `x` when no context is given.
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: i64,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, dim: i64, context_dim: i64, heads: i64) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Parameter(format!("{dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(b, &format!("{name}.q"), dim, dim, false)?,
            k: Linear::new(b, &format!("{name}.k"), context_dim, dim, false)?,
            v: Linear::new(b, &format!("{name}.v"), context_dim, dim, false)?,
            out: Linear::new(b, &format!("{name}.out"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> Tensor {
        let ctx = context.unwrap_or(x);
        let (bsz, n, dim) = x.size3().expect("attention input must be rank 3");
        let m = ctx.size()[1];
        let head_dim = dim / self.heads;
        let split = |t: Tensor, len: i64| {
            t.view([bsz, len, self.heads, head_dim]).transpose(1, 2)
        };
        let q = split(self.q.forward(x), n);
        let k = split(self.k.forward(ctx), m);
        let v = split(self.v.forward(ctx), m);
        let scores = q.matmul(&k.transpose(-2, -1)) * (1.0 / (head_dim as f64).sqrt());
        let attn = scores.softmax(-1, scores.kind());
        let y = attn
            .matmul(&v)
            .transpose(1, 2)
            .contiguous()
            .view([bsz, n, dim]);
        self.out.forward(&y)
    }
}

/// Standard-normal tensor drawn from a caller-owned generator.
pub fn randn(rng: &mut impl Rng, shape: &[i64], kind: Kind) -> Tensor {
    let n: i64 = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_slice(&data).view(shape).to_kind(kind)
}

pub fn cpu() -> Device {
    Device::Cpu
}

/// Pins torch's intra-op pool to one thread; every entry point calls this so
/// results are bit-reproducible.
pub fn single_threaded() {
    tch::set_num_threads(1);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_builder_is_seed_deterministic() {
        let build = |seed| {
            let mut b = Builder::random(seed, Kind::Float);
            Conv2d::new(&mut b, "c", 3, 8, 3, 1).unwrap();
            b.finish()
        };
        assert!(build(5).bit_equal(&build(5)));
        assert!(!build(5).bit_equal(&build(6)));
    }

    #[test]
    fn zero_conv_is_exactly_zero() {
        let mut b = Builder::random(1, Kind::Float);
        let z = Conv2d::zero(&mut b, "z", 16).unwrap();
        let x = randn(&mut ChaCha8Rng::seed_from_u64(0), &[2, 16, 4, 4], Kind::Float);
        let y = z.forward(&x);
        assert_eq!(y.abs().max().double_value(&[]), 0.0);
    }

    #[test]
    fn load_builder_reports_missing_and_misshaped() {
        let mut b = Builder::random(1, Kind::Float);
        Linear::new(&mut b, "lin", 4, 2, true).unwrap();
        let store = b.finish();

        let mut missing = store.deep_clone();
        missing.remove("lin.bias");
        let mut lb = Builder::load(missing);
        assert!(matches!(
            Linear::new(&mut lb, "lin", 4, 2, true),
            Err(Error::MissingTensor(name)) if name == "lin.bias"
        ));

        let mut lb = Builder::load(store.deep_clone());
        assert!(matches!(Linear::new(&mut lb, "lin", 5, 2, true), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_preserves_shape() {
        let mut b = Builder::random(2, Kind::Float);
        let attn = Attention::new(&mut b, "a", 16, 8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[2, 10, 16], Kind::Float);
        let ctx = randn(&mut rng, &[2, 5, 8], Kind::Float);
        assert_eq!(attn.forward(&x, Some(&ctx)).size(), vec![2, 10, 16]);
    }
}
