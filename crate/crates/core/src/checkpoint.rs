//! Single-file tensor checkpoints.
//!
//! Layout: the 8-byte magic `BRUSHCKP`, a little-endian `u64` header length,
//! a JSON header, then the little-endian `f32` payload. Header offsets are
//! relative to the start of the payload.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::branch::{Branch, BranchConfig};
use crate::codec::{Codec, CodecConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::unet::{DenoiserConfig, DenoiserModel};

pub const MAGIC: &[u8; 8] = b"BRUSHCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<i64>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    pub config: serde_json::Value,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }
}

pub fn to_bytes(params: &ParamStore, config: &impl Serialize) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    for (name, t) in params.iter() {
        let values: Vec<f32> = Vec::try_from(t.detach().to_kind(Kind::Float).contiguous().view([-1]))?;
        let offset = payload.len() as u64;
        for v in &values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.size(),
            dtype: "f32".into(),
            offset,
            nbytes: (values.len() * 4) as u64,
        });
    }
    let header = Header { version: VERSION, tensors: entries, config: serde_json::to_value(config)? };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 {
        return Err(Error::Truncated { needed: 16, found: bytes.len() as u64 });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = 16u64.checked_add(len).ok_or_else(|| Error::Checkpoint("header length overflow".into()))?;
    if (bytes.len() as u64) < end {
        return Err(Error::Truncated { needed: end, found: bytes.len() as u64 });
    }
    let header: Header = serde_json::from_slice(&bytes[16..end as usize])?;
    if header.version != VERSION {
        return Err(Error::CheckpointVersion { found: header.version, expected: VERSION });
    }
    Ok((header, end as usize))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, start) = read_header(bytes)?;
    let payload = &bytes[start..];
    let mut params = ParamStore::new();
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
        }
        let count: i64 = e.shape.iter().product();
        if e.shape.iter().any(|&d| d < 0) || count as u64 * 4 != e.nbytes {
            return Err(Error::Checkpoint(format!("tensor `{}` size disagrees with its shape", e.name)));
        }
        let end = e.offset.checked_add(e.nbytes).ok_or_else(|| Error::Checkpoint("offset overflow".into()))?;
        if end > payload.len() as u64 {
            return Err(Error::Truncated { needed: start as u64 + end, found: bytes.len() as u64 });
        }
        let raw = &payload[e.offset as usize..end as usize];
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if params.contains(&e.name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
        }
        params.insert(e.name.clone(), Tensor::from_slice(&values).view(e.shape.as_slice()));
    }
    Ok(Checkpoint { config: header.config, params })
}

pub fn save(path: impl AsRef<Path>, params: &ParamStore, config: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_bytes(params, config)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

/// What a checkpoint holds, with the config needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Codec { config: CodecConfig },
    Base { config: DenoiserConfig },
    /// When `includes_base`, the file also carries a fine-tuned base under `base.`.
    Branch { config: BranchConfig, includes_base: bool },
    SingleBranch { config: DenoiserConfig },
}

impl ModelSpec {
    pub fn role(&self) -> &'static str {
        match self {
            ModelSpec::Codec { .. } => "codec",
            ModelSpec::Base { .. } => "base",
            ModelSpec::Branch { .. } => "branch",
            ModelSpec::SingleBranch { .. } => "single_branch",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelHeader {
    pub model: ModelSpec,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub enum LoadedModel {
    Codec(Codec),
    Base(DenoiserModel),
    Branch { branch: Branch, base: Option<DenoiserModel> },
    SingleBranch(DenoiserModel),
}

impl LoadedModel {
    pub fn role(&self) -> &'static str {
        match self {
            LoadedModel::Codec(_) => "codec",
            LoadedModel::Base(_) => "base",
            LoadedModel::Branch { .. } => "branch",
            LoadedModel::SingleBranch(_) => "single_branch",
        }
    }
}

pub fn save_codec(path: impl AsRef<Path>, codec: &Codec, meta: serde_json::Value) -> Result<()> {
    save(path, codec.params(), &ModelHeader { model: ModelSpec::Codec { config: codec.config().clone() }, meta })
}

pub fn save_base(path: impl AsRef<Path>, base: &DenoiserModel, meta: serde_json::Value) -> Result<()> {
    save(path, base.params(), &ModelHeader { model: ModelSpec::Base { config: base.config().clone() }, meta })
}

pub fn save_single_branch(path: impl AsRef<Path>, model: &DenoiserModel, meta: serde_json::Value) -> Result<()> {
    save(path, model.params(), &ModelHeader { model: ModelSpec::SingleBranch { config: model.config().clone() }, meta })
}

/// Saves a branch; a fine-tuned base goes into the same file when given.
pub fn save_branch(
    path: impl AsRef<Path>,
    branch: &Branch,
    tuned_base: Option<&DenoiserModel>,
    meta: serde_json::Value,
) -> Result<()> {
    let mut params = ParamStore::new();
    params.merge(branch.params());
    if let Some(base) = tuned_base {
        params.extend_prefixed("base", base.params());
    }
    let spec = ModelSpec::Branch { config: branch.config().clone(), includes_base: tuned_base.is_some() };
    save(path, &params, &ModelHeader { model: spec, meta })
}

pub fn model_from_checkpoint(ckpt: Checkpoint) -> Result<(LoadedModel, ModelHeader)> {
    let header: ModelHeader = ckpt.config_as()?;
    let model = match &header.model {
        ModelSpec::Codec { config } => LoadedModel::Codec(Codec::from_params(config, ckpt.params)?),
        ModelSpec::Base { config } => LoadedModel::Base(DenoiserModel::from_params(config, ckpt.params)?),
        ModelSpec::SingleBranch { config } => LoadedModel::SingleBranch(DenoiserModel::from_params(config, ckpt.params)?),
        ModelSpec::Branch { config, includes_base } => {
            let base = if *includes_base {
                Some(DenoiserModel::from_params(&config.base, ckpt.params.sub_store("base"))?)
            } else {
                None
            };
            let own: ParamStore = ckpt.params.without_prefix("base");
            LoadedModel::Branch { branch: Branch::from_params(config, own)?, base }
        }
    };
    Ok((model, header))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(LoadedModel, ModelHeader)> {
    model_from_checkpoint(load(path)?)
}

fn wrong_kind(path: &Path, want: &str, got: &LoadedModel) -> Error {
    Error::Compatibility(format!("{} holds a {} model, expected {want}", path.display(), got.role()))
}

pub fn load_codec(path: impl AsRef<Path>) -> Result<Codec> {
    match load_model(path.as_ref())?.0 {
        LoadedModel::Codec(c) => Ok(c),
        other => Err(wrong_kind(path.as_ref(), "codec", &other)),
    }
}

pub fn load_base(path: impl AsRef<Path>) -> Result<DenoiserModel> {
    match load_model(path.as_ref())?.0 {
        LoadedModel::Base(m) => Ok(m),
        other => Err(wrong_kind(path.as_ref(), "base", &other)),
    }
}

pub fn load_branch(path: impl AsRef<Path>) -> Result<(Branch, Option<DenoiserModel>)> {
    match load_model(path.as_ref())?.0 {
        LoadedModel::Branch { branch, base } => Ok((branch, base)),
        other => Err(wrong_kind(path.as_ref(), "branch", &other)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Builder, Conv2d};

    fn store() -> ParamStore {
        let mut b = Builder::random(3, Kind::Float);
        Conv2d::new(&mut b, "a", 2, 3, 3, 1).unwrap();
        Conv2d::new(&mut b, "b", 3, 1, 1, 1).unwrap();
        b.finish()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let bytes = to_bytes(&s, &serde_json::json!({"x": 1})).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert!(back.params.bit_equal(&s));
        assert_eq!(back.config["x"], 1);
    }

    #[test]
    fn version_and_truncation_errors_are_distinct() {
        let s = store();
        let bytes = to_bytes(&s, &serde_json::Value::Null).unwrap();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(from_bytes(cut), Err(Error::Truncated { .. })));

        let (mut header, start) = read_header(&bytes).unwrap();
        header.version = 7;
        let json = serde_json::to_vec(&header).unwrap();
        let mut bad = MAGIC.to_vec();
        bad.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bad.extend_from_slice(&json);
        bad.extend_from_slice(&bytes[start..]);
        assert!(matches!(from_bytes(&bad), Err(Error::CheckpointVersion { found: 7, expected: 1 })));

        assert!(matches!(from_bytes(b"NOTACKPT\0\0\0\0\0\0\0\0"), Err(Error::Checkpoint(_))));
    }
}
