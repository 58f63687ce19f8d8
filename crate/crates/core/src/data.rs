//! Procedural training and benchmark data with a JSON-lines manifest.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{gen_brush_mask, gen_seg_mask, BrushConfig, Mask, Side};
use crate::raster::Image;
use crate::scene::{SceneSampler, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordSide {
    Inside,
    Outside,
    Brush,
}

impl RecordSide {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordSide::Inside => "inside",
            RecordSide::Outside => "outside",
            RecordSide::Brush => "brush",
        }
    }
}

impl fmt::Display for RecordSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<Side> for RecordSide {
    fn from(s: Side) -> Self {
        match s {
            Side::Inside => RecordSide::Inside,
            Side::Outside => RecordSide::Outside,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Seg,
    Brush,
}

impl FromStr for DataKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(DataKind::Seg),
            "brush" => Ok(DataKind::Brush),
            other => Err(Error::Parameter(format!("unknown dataset kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub side: RecordSide,
    pub object_id: Option<usize>,
    /// Seed the mask was drawn from (the scene seed for segmentation masks).
    pub seed: u64,
    pub scene: SceneSpec,
}

/// One manifest line. `image` and `mask` are paths relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub caption: String,
    pub meta: RecordMeta,
}

impl DatasetRecord {
    pub fn render(&self) -> Image {
        self.meta.scene.render()
    }

    /// Regenerates the hole mask from the record's metadata.
    pub fn regenerate_mask(&self) -> Result<Mask> {
        match self.meta.side {
            RecordSide::Inside | RecordSide::Outside => {
                let side = if self.meta.side == RecordSide::Inside { Side::Inside } else { Side::Outside };
                let obj = self.meta.object_id.ok_or_else(|| Error::Parameter(format!("record {} lacks an object id", self.id)))?;
                gen_seg_mask(&self.meta.scene, obj, side)
            }
            RecordSide::Brush => gen_brush_mask(self.meta.seed, &BrushConfig::default()),
        }
    }
}

/// A record with its pixels resolved.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: DatasetRecord,
    pub image: Image,
    pub mask: Mask,
}

const RESAMPLE_LIMIT: usize = 1000;

/// Deterministic procedural dataset of `count` scenes.
///
/// `Seg` yields an inside and an outside record per scene on the scene's
/// largest visible object; `Brush` pairs each scene with a brush-stroke mask.
pub fn synth_dataset(count: usize, seed: u64, kind: DataKind) -> Result<Vec<DatasetRecord>> {
    if count == 0 {
        return Err(Error::Parameter("dataset needs at least one scene".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = SceneSampler::default();
    let brush = BrushConfig::default();
    let mut records = Vec::with_capacity(count * 2);
    for i in 0..count {
        let image = format!("images/{i:05}.png");
        let mut placed = false;
        for _ in 0..RESAMPLE_LIMIT {
            let scene = sampler.sample(&mut rng);
            let caption = scene.caption();
            let scene_seed: u64 = rng.gen();
            match kind {
                DataKind::Seg => {
                    let largest = (0..scene.objects.len())
                        .max_by_key(|&k| scene.coverage(k).map(|m| m.count()).unwrap_or(0))
                        .expect("scenes hold objects");
                    let inside = gen_seg_mask(&scene, largest, Side::Inside);
                    let outside = gen_seg_mask(&scene, largest, Side::Outside);
                    if inside.is_err() || outside.is_err() {
                        continue;
                    }
                    for side in [Side::Inside, Side::Outside] {
                        records.push(DatasetRecord {
                            id: format!("{i:05}-{side}"),
                            image: image.clone(),
                            mask: format!("masks/{i:05}-{side}.png"),
                            caption: caption.clone(),
                            meta: RecordMeta { side: side.into(), object_id: Some(largest), seed: scene_seed, scene: scene.clone() },
                        });
                    }
                }
                DataKind::Brush => {
                    if gen_brush_mask(scene_seed, &brush).is_err() {
                        continue;
                    }
                    records.push(DatasetRecord {
                        id: format!("{i:05}-brush"),
                        image: image.clone(),
                        mask: format!("masks/{i:05}-brush.png"),
                        caption,
                        meta: RecordMeta { side: RecordSide::Brush, object_id: None, seed: scene_seed, scene },
                    });
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!("scene {i} failed the mask filter {RESAMPLE_LIMIT} times")));
        }
    }
    Ok(records)
}

/// Renders images and masks for in-memory records.
pub fn materialize(records: &[DatasetRecord]) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| Ok(Sample { record: r.clone(), image: r.render(), mask: r.regenerate_mask()? }))
        .collect()
}

/// Writes PNGs and `manifest.jsonl` under `dir`; returns the manifest path.
pub fn write_dataset(records: &[DatasetRecord], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&manifest)?);
    let mut last_image = None;
    for r in records {
        if last_image.as_deref() != Some(r.image.as_str()) {
            r.render().save_png(dir.join(&r.image))?;
            last_image = Some(r.image.clone());
        }
        r.regenerate_mask()?.save_png(dir.join(&r.mask))?;
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}

/// Reads a manifest and the PNGs it references.
pub fn load_samples(manifest: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let manifest = manifest.as_ref();
    let root = manifest.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|record| {
            let image = Image::load_png(root.join(&record.image))?;
            let mask = Mask::load_png(root.join(&record.mask))?;
            if image.width() != mask.width() || image.height() != mask.height() {
                return Err(Error::Shape(format!("record {} has mismatched image and mask", record.id)));
            }
            Ok(Sample { record, image, mask })
        })
        .collect()
}
