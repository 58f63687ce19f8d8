//! Checkpoints the service can serve, kept as serialized bytes so every
//! worker thread can build its own replica.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use brushnet_core::branch::Branch;
use brushnet_core::checkpoint::{from_bytes, model_from_checkpoint, LoadedModel, ModelSpec};
use brushnet_core::codec::Codec;
use brushnet_core::unet::DenoiserModel;
use brushnet_core::{Error, Result};
use serde::Serialize;

pub const CHECKPOINT_EXT: &str = "ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Codec,
    Base,
    Branch,
    SingleBranch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CatalogEntry {
    pub id: String,
    pub role: Role,
    /// Ablation axes of a branch, e.g. `encoder=codec mask=with ...`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axes: Option<String>,
    /// For a base stored inside a branch file: the branch it was tuned with.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tuned_with: Option<String>,
}

#[derive(Clone)]
struct Source {
    entry: CatalogEntry,
    bytes: Arc<Vec<u8>>,
}

/// Immutable set of named checkpoints with exactly one codec.
#[derive(Clone)]
pub struct Catalog {
    codec: Arc<Vec<u8>>,
    sources: Vec<Source>,
    image_size: usize,
    seq_len: usize,
}

impl Catalog {
    /// Loads every `*.ckpt` file in `dir`; ids are file stems.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::Checkpoint(format!("cannot read checkpoint dir {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == CHECKPOINT_EXT))
            .collect();
        paths.sort();
        Self::load_paths(&paths)
    }

    pub fn load_paths(paths: &[PathBuf]) -> Result<Self> {
        let mut named = Vec::with_capacity(paths.len());
        for p in paths {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint file name {}", p.display())))?;
            let bytes = std::fs::read(p).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
            named.push((id.to_string(), bytes));
        }
        Self::from_named_bytes(named)
    }

    /// Validates each checkpoint by loading it once.
    pub fn from_named_bytes(named: Vec<(String, Vec<u8>)>) -> Result<Self> {
        let mut codec = None;
        let mut sources = Vec::new();
        let mut image_size = 0;
        let mut seq_len = None;
        for (id, bytes) in named {
            if sources.iter().any(|s: &Source| s.entry.id == id) {
                return Err(Error::Checkpoint(format!("duplicate model id {id:?}")));
            }
            let (_, header) = model_from_checkpoint(from_bytes(&bytes)?)?;
            let bytes = Arc::new(bytes);
            let entry = |role, axes| CatalogEntry { id: id.clone(), role, axes, tuned_with: None };
            match &header.model {
                ModelSpec::Codec { config } => {
                    image_size = config.image_size as usize;
                    if codec.is_some() {
                        return Err(Error::Checkpoint("more than one codec checkpoint".into()));
                    }
                    codec = Some(bytes.clone());
                    sources.push(Source { entry: entry(Role::Codec, None), bytes });
                }
                ModelSpec::Base { config } => {
                    seq_len.get_or_insert(config.text.seq_len as usize);
                    sources.push(Source { entry: entry(Role::Base, None), bytes })
                }
                ModelSpec::SingleBranch { config } => {
                    seq_len.get_or_insert(config.text.seq_len as usize);
                    sources.push(Source { entry: entry(Role::SingleBranch, None), bytes })
                }
                ModelSpec::Branch { config, includes_base } => {
                    seq_len.get_or_insert(config.base.text.seq_len as usize);
                    sources.push(Source { entry: entry(Role::Branch, Some(config.axes.to_string())), bytes: bytes.clone() });
                    if *includes_base {
                        sources.push(Source {
                            entry: CatalogEntry {
                                id: tuned_base_id(&id),
                                role: Role::Base,
                                axes: None,
                                tuned_with: Some(id.clone()),
                            },
                            bytes,
                        });
                    }
                }
            }
        }
        let codec = codec.ok_or_else(|| Error::Checkpoint("no codec checkpoint".into()))?;
        let seq_len = seq_len.unwrap_or(brushnet_core::text::TextConfig::default().seq_len as usize);
        Ok(Self { codec, sources, image_size, seq_len })
    }

    /// Side length of the images the codec takes.
    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Bases and branches; the codec is implied.
    pub fn entries(&self) -> Vec<CatalogEntry> {
        self.sources.iter().filter(|s| s.entry.role != Role::Codec).map(|s| s.entry.clone()).collect()
    }

    pub fn find(&self, id: &str) -> Option<&CatalogEntry> {
        self.sources.iter().map(|s| &s.entry).find(|e| e.id == id)
    }

    /// First entry of a role, in load order.
    pub fn first(&self, role: Role) -> Option<&CatalogEntry> {
        self.sources.iter().map(|s| &s.entry).find(|e| e.role == role)
    }

    /// Builds an independent copy of every model.
    pub fn replica(&self) -> Result<Replica> {
        let codec = match model_from_checkpoint(from_bytes(&self.codec)?)?.0 {
            LoadedModel::Codec(c) => c,
            _ => unreachable!("codec bytes hold a codec"),
        };
        let mut models = Vec::new();
        for s in &self.sources {
            if s.entry.role == Role::Codec || s.entry.tuned_with.is_some() {
                continue;
            }
            match model_from_checkpoint(from_bytes(&s.bytes)?)?.0 {
                LoadedModel::Base(m) => models.push((s.entry.id.clone(), Model::Base(m))),
                LoadedModel::SingleBranch(m) => models.push((s.entry.id.clone(), Model::Single(m))),
                LoadedModel::Branch { branch, base } => {
                    if let Some(b) = base {
                        models.push((tuned_base_id(&s.entry.id), Model::Base(b)));
                    }
                    models.push((s.entry.id.clone(), Model::Branch(branch)));
                }
                LoadedModel::Codec(_) => {}
            }
        }
        Ok(Replica { codec, models })
    }
}

pub fn tuned_base_id(branch_id: &str) -> String {
    format!("{branch_id}.base")
}

pub enum Model {
    Base(DenoiserModel),
    Branch(Branch),
    Single(DenoiserModel),
}

/// One worker's private copy of the catalog's weights.
pub struct Replica {
    pub codec: Codec,
    models: Vec<(String, Model)>,
}

impl Replica {
    pub fn get(&self, id: &str) -> Option<&Model> {
        self.models.iter().find(|(i, _)| i == id).map(|(_, m)| m)
    }
}
