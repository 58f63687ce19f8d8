//! Architecture ablations: every variant trains under the same step budget
//! from the same base, then runs the shared benchmark.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{run_benchmark, Aggregate, BenchConfig, MetricReport};
use crate::branch::{AblationAxes, Injection, MaskedEncoder, Presence};
use crate::codec::Codec;
use crate::data::{RecordSide, Sample};
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::masking::BlendMode;
use crate::pipeline::{BrushNetPipeline, InpaintOptions, Inpainter, SingleBranchPipeline};
use crate::train::{train_inpainting, Architecture, InpaintModel, TrainConfig};
use crate::unet::DenoiserModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationTable {
    /// Component ablation over the branch design axes.
    Components,
    /// Single network versus dual branch, frozen or fine-tuned base.
    Architecture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub label: String,
    pub table: AblationTable,
    pub axes: AblationAxes,
    pub architecture: Architecture,
    pub freeze_base: bool,
}

impl AblationVariant {
    fn component(label: &str, encoder: MaskedEncoder, mask: Presence, attn: Presence, inj: Injection, blend: BlendMode) -> Self {
        Self {
            label: label.into(),
            table: AblationTable::Components,
            axes: AblationAxes { encoder, mask_in_input: mask, cross_attn: attn, injection: inj, blend },
            architecture: Architecture::Dual,
            freeze_base: true,
        }
    }

    /// Variants that differ only in evaluation-time blending share weights.
    fn training_key(&self) -> (AblationAxes, Architecture, bool) {
        let mut axes = self.axes;
        axes.blend = BlendMode::None;
        if self.architecture == Architecture::Single {
            axes = AblationAxes { blend: BlendMode::None, ..AblationAxes::default() };
        }
        (axes, self.architecture, self.freeze_base)
    }
}

/// The ten component rows followed by the three architecture rows.
pub fn ablation_grid() -> Vec<AblationVariant> {
    use BlendMode as B;
    use Injection::*;
    use MaskedEncoder::*;
    use Presence::*;
    let c = AblationVariant::component;
    let mut grid = vec![
        c("conv-mask-noattn-full-none", Conv, With, Without, Full, B::None),
        c("codec-nomask-noattn-full-none", Codec, Without, Without, Full, B::None),
        c("codec-mask-attn-full-none", Codec, With, With, Full, B::None),
        c("conv-mask-attn-cn-none", Conv, With, With, Cn, B::None),
        c("codec-mask-attn-cn-none", Codec, With, With, Cn, B::None),
        c("codec-mask-noattn-cn-none", Codec, With, Without, Cn, B::None),
        c("codec-mask-noattn-half-none", Codec, With, Without, Half, B::None),
        c("codec-mask-noattn-full-none", Codec, With, Without, Full, B::None),
        c("codec-mask-noattn-full-paste", Codec, With, Without, Full, B::Paste),
        c("codec-mask-noattn-full-blur", Codec, With, Without, Full, B::Blur),
    ];
    let plain = AblationAxes { blend: BlendMode::None, ..AblationAxes::default() };
    for (label, architecture, freeze_base) in [
        ("single-branch", Architecture::Single, false),
        ("dual-frozen", Architecture::Dual, true),
        ("dual-finetuned", Architecture::Dual, false),
    ] {
        grid.push(AblationVariant { label: label.into(), table: AblationTable::Architecture, axes: plain, architecture, freeze_base });
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationBudget {
    /// Shared by every variant; axes, architecture and freeze flag are
    /// overridden per variant.
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub steps: usize,
    pub train_seconds: f64,
    pub final_loss: Option<f64>,
    /// Aggregates of this variant's benchmark rows, per side then overall.
    pub aggregates: Vec<Aggregate>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn overall(&self) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.side.is_none())
    }

    pub fn side(&self, side: RecordSide) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.side == Some(side))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub trainings: usize,
    pub seconds: f64,
}

pub const ABLATION_CSV_HEADER: &str =
    "label,table,encoder,mask,attn,injection,blend,architecture,freeze_base,steps,psnr_db,mse,lpips_proxy,caption_probe,failed";

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.label == label)
    }

    /// Timing columns are left out so reruns compare byte-for-byte.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(ABLATION_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let v = &r.variant;
            let a = r.overall();
            let table = match v.table {
                AblationTable::Components => "components",
                AblationTable::Architecture => "architecture",
            };
            let arch = match v.architecture {
                Architecture::Dual => "dual",
                Architecture::Single => "single",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                v.label,
                table,
                v.axes.encoder,
                v.axes.mask_in_input,
                v.axes.cross_attn,
                v.axes.injection,
                v.axes.blend,
                arch,
                v.freeze_base,
                r.steps,
                cell(a.and_then(|a| a.psnr_db)),
                cell(a.and_then(|a| a.mse)),
                cell(a.and_then(|a| a.lpips_proxy)),
                cell(a.and_then(|a| a.caption_probe)),
                r.error.is_some() || a.map_or(true, |a| a.failed > 0),
            );
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

struct Trained {
    model: InpaintModel,
    seconds: f64,
    final_loss: Option<f64>,
}

fn evaluate(
    variant: &AblationVariant,
    trained: &Trained,
    base: &DenoiserModel,
    codec: &Codec,
    schedule: &NoiseSchedule,
    bench: &[Sample],
    cfg: &BenchConfig,
) -> MetricReport {
    let cfg = BenchConfig { options: InpaintOptions { blend: variant.axes.blend, ..cfg.options.clone() }, ..cfg.clone() };
    let name = variant.label.clone();
    let pipeline: Box<dyn Inpainter + '_> = match &trained.model {
        InpaintModel::Dual { branch, tuned_base } => Box::new(BrushNetPipeline {
            name,
            base: tuned_base.as_ref().unwrap_or(base),
            branch,
            codec,
            schedule,
        }),
        InpaintModel::Single(model) => Box::new(SingleBranchPipeline { name, model, codec, schedule }),
    };
    run_benchmark(&[pipeline.as_ref()], bench, codec, &cfg)
}

/// Trains and benchmarks every variant of `grid`. Variants that differ only
/// in blending reuse one training. Failures are recorded per row.
pub fn run_ablation(
    base: &DenoiserModel,
    codec: &Codec,
    schedule: &NoiseSchedule,
    train_samples: &[&Sample],
    bench: &[Sample],
    grid: &[AblationVariant],
    budget: &AblationBudget,
) -> AblationReport {
    let started = Instant::now();
    let mut cache: HashMap<(AblationAxes, Architecture, bool), std::result::Result<Trained, String>> = HashMap::new();
    let mut rows = Vec::with_capacity(grid.len());
    for variant in grid {
        let key = variant.training_key();
        let trained = cache.entry(key).or_insert_with(|| {
            let cfg = TrainConfig {
                axes: key.0,
                architecture: variant.architecture,
                freeze_base: variant.freeze_base,
                ..budget.train.clone()
            };
            log::info!("ablation: training {} ({})", variant.label, key.0);
            train_inpainting(train_samples, base, codec, &cfg, schedule)
                .map(|(model, report)| Trained {
                    model,
                    seconds: report.seconds,
                    final_loss: report.losses.last().map(|&l| l as f64),
                })
                .map_err(|e| e.to_string())
        });
        let row = match trained {
            Ok(t) => {
                let report = evaluate(variant, t, base, codec, schedule, bench, &budget.bench);
                AblationRow {
                    variant: variant.clone(),
                    steps: budget.train.steps,
                    train_seconds: t.seconds,
                    final_loss: t.final_loss,
                    aggregates: report.aggregates,
                    error: None,
                }
            }
            Err(e) => AblationRow {
                variant: variant.clone(),
                steps: budget.train.steps,
                train_seconds: 0.0,
                final_loss: None,
                aggregates: Vec::new(),
                error: Some(e.clone()),
            },
        };
        rows.push(row);
    }
    AblationReport { rows, trainings: cache.len(), seconds: started.elapsed().as_secs_f64() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_shape() {
        let g = ablation_grid();
        let comp = g.iter().filter(|v| v.table == AblationTable::Components).count();
        let arch = g.iter().filter(|v| v.table == AblationTable::Architecture).count();
        assert_eq!((comp, arch), (10, 3));
        let keys: std::collections::HashSet<_> = g.iter().map(|v| v.training_key()).collect();
        assert_eq!(keys.len(), 10);
        let labels: std::collections::HashSet<_> = g.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(labels.len(), 13);
    }
}
