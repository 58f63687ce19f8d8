//! `brushnet`: synthesize data, train, inpaint, evaluate, ablate and serve.

mod settings;

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use brushnet_core::branch::Branch;
use brushnet_core::checkpoint::{
    load_base, load_branch, load_codec, load_model, save_base, save_branch, save_codec, save_single_branch, LoadedModel,
};
use brushnet_core::codec::{train_codec, CodecConfig};
use brushnet_core::data::{load_samples, synth_dataset, write_dataset, DataKind, Sample};
use brushnet_core::diffusion::NoiseSchedule;
use brushnet_core::eval::{ablation_grid, run_ablation, run_benchmark, AblationBudget, BenchConfig};
use brushnet_core::masking::Mask;
use brushnet_core::pipeline::{BldPipeline, BrushNetPipeline, Inpainter, SingleBranchPipeline};
use brushnet_core::train::{train_base, train_inpainting, Architecture, InpaintModel, TrainConfig};
use brushnet_core::unet::DenoiserConfig;
use brushnet_core::Image;
use brushnet_service::catalog::Catalog;
use brushnet_service::{AppState, ServiceConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "brushnet", version, about = "Toy-scale dual-branch diffusion inpainting")]
struct Cli {
    /// Seed for data, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat TOML file with training and sampling keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "checkpoints")]
    checkpoint_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Seg,
    Brush,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Arch {
    Dual,
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum PipelineArg {
    Brushnet,
    Bld,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a procedural dataset (PNG images, PNG masks, manifest.jsonl).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, value_enum, default_value = "seg")]
        kind: Kind,
    },
    /// Train the image codec; writes `codec.ckpt`.
    TrainCodec {
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the text-conditioned base denoiser; writes `<name>.ckpt`.
    TrainBase {
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "base")]
        name: String,
    },
    /// Train the inpainting branch against a frozen (or tuned) base.
    TrainBranch {
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "base")]
        base: String,
        #[arg(long, default_value = "branch")]
        name: String,
        #[arg(long, value_enum, default_value = "dual")]
        architecture: Arch,
        /// Fine-tune the base together with the branch.
        #[arg(long)]
        tune_base: bool,
    },
    /// Inpaint one image file.
    Inpaint {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        blend: Option<String>,
        #[arg(long)]
        blur_sigma: Option<f64>,
        #[arg(long)]
        sample_steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long, value_enum, default_value = "brushnet")]
        pipeline: PipelineArg,
        #[arg(long, default_value = "base")]
        base: String,
        #[arg(long, default_value = "branch")]
        branch: String,
    },
    /// Benchmark the branch pipeline and the latent-blending baseline.
    Eval {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "base")]
        base: String,
        #[arg(long, default_value = "branch")]
        branch: String,
        #[arg(long)]
        sample_steps: Option<usize>,
        /// Evaluate only the first N records.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train and benchmark every ablation variant under one step budget.
    Ablate {
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training steps per variant.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "base")]
        base: String,
        #[arg(long)]
        sample_steps: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Serve every checkpoint in the checkpoint directory over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 60)]
        budget_secs: u64,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    brushnet_core::nn::single_threaded();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn ckpt(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}

fn load_all(manifests: &[PathBuf]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for m in manifests {
        out.extend(load_samples(m).with_context(|| format!("loading {}", m.display()))?);
    }
    if out.is_empty() {
        bail!("no samples in {manifests:?}");
    }
    Ok(out)
}

/// One entry per distinct image file (segmentation manifests list each
/// scene twice).
fn unique_images(samples: &[Sample]) -> Vec<&Sample> {
    let mut seen = BTreeSet::new();
    samples.iter().filter(|s| seen.insert(s.record.image.clone())).collect()
}

fn limit(mut samples: Vec<Sample>, n: Option<usize>) -> Vec<Sample> {
    if let Some(n) = n {
        samples.truncate(n);
    }
    samples
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let settings = file.overlay(&Settings { seed: cli.seed, ..Default::default() });
    let seed = settings.seed.unwrap_or(0);
    let dir = cli.checkpoint_dir.as_path();
    let schedule = NoiseSchedule::default();

    match cli.command {
        Command::SynthData { out, count, kind } => {
            let kind = match kind {
                Kind::Seg => DataKind::Seg,
                Kind::Brush => DataKind::Brush,
            };
            let records = synth_dataset(count, seed, kind)?;
            let manifest = write_dataset(&records, &out)?;
            println!("{} records -> {}", records.len(), manifest.display());
        }
        Command::TrainCodec { data, steps } => {
            let samples = load_all(&data)?;
            let images: Vec<Image> = unique_images(&samples).into_iter().map(|s| s.image.clone()).collect();
            let s = settings.overlay(&Settings { steps, ..Default::default() });
            let (codec, report) = train_codec(&images, &CodecConfig::default(), &s.codec())?;
            std::fs::create_dir_all(dir)?;
            save_codec(ckpt(dir, "codec"), &codec, json!({ "report": report, "seed": seed }))?;
            println!("codec: holdout psnr {:.2} dB, mse {:.5}", report.holdout_psnr_db, report.holdout_mse);
        }
        Command::TrainBase { data, steps, name } => {
            let samples = load_all(&data)?;
            let uniq = unique_images(&samples);
            let images: Vec<&Image> = uniq.iter().map(|s| &s.image).collect();
            let captions: Vec<&str> = uniq.iter().map(|s| s.record.caption.as_str()).collect();
            let codec = load_codec(ckpt(dir, "codec"))?;
            let cfg = settings.overlay(&Settings { steps, ..Default::default() }).train(TrainConfig { steps: 20_000, ..Default::default() });
            let (model, report) = train_base(&images, &captions, &codec, &DenoiserConfig::default(), &cfg, &schedule)?;
            save_base(ckpt(dir, &name), &model, json!({ "train": cfg, "first_loss": report.first_window, "last_loss": report.last_window }))?;
            println!(
                "base: loss {:.4} -> {:.4} in {:.0} s{}",
                report.first_window,
                report.last_window,
                report.seconds,
                if report.loss_decreased() { "" } else { " (loss did not decrease)" }
            );
        }
        Command::TrainBranch { data, steps, base, name, architecture, tune_base } => {
            let samples = load_all(&data)?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let codec = load_codec(ckpt(dir, "codec"))?;
            let base_model = load_base(ckpt(dir, &base))?;
            let mut cfg = settings.overlay(&Settings { steps, ..Default::default() }).train(TrainConfig::default());
            cfg.architecture = match architecture {
                Arch::Dual => Architecture::Dual,
                Arch::Single => Architecture::Single,
            };
            if tune_base {
                cfg.freeze_base = false;
            }
            let (model, report) = train_inpainting(&refs, &base_model, &codec, &cfg, &schedule)?;
            let meta = json!({ "train": cfg, "base": base, "first_loss": report.first_window, "last_loss": report.last_window });
            match &model {
                InpaintModel::Dual { branch, tuned_base } => save_branch(ckpt(dir, &name), branch, tuned_base.as_ref(), meta)?,
                InpaintModel::Single(m) => save_single_branch(ckpt(dir, &name), m, meta)?,
            }
            println!("{name}: loss {:.4} -> {:.4} in {:.0} s", report.first_window, report.last_window, report.seconds);
        }
        Command::Inpaint { image, mask, out, prompt, w, blend, blur_sigma, sample_steps, guidance, pipeline, base, branch } => {
            let blend = blend.map(|b| b.parse()).transpose()?;
            let flags = Settings { w, blend, blur_sigma, sample_steps, guidance_scale: guidance, ..Default::default() };
            let opts = settings.overlay(&flags).inpaint(prompt);
            let img = Image::load_png(&image)?;
            let m = Mask::load_png(&mask)?;
            let codec = load_codec(ckpt(dir, "codec"))?;
            let result = match pipeline {
                PipelineArg::Bld => {
                    let base = load_base(ckpt(dir, &base))?;
                    BldPipeline { name: "bld".into(), base: &base, codec: &codec, schedule: &schedule }.inpaint(&img, &m, &opts)?
                }
                PipelineArg::Brushnet => match load_model(ckpt(dir, &branch))?.0 {
                    LoadedModel::SingleBranch(model) => {
                        SingleBranchPipeline { name: branch, model: &model, codec: &codec, schedule: &schedule }.inpaint(&img, &m, &opts)?
                    }
                    LoadedModel::Branch { branch: b, base: tuned } => {
                        let base = match tuned {
                            Some(t) => t,
                            None => load_base(ckpt(dir, &base))?,
                        };
                        BrushNetPipeline { name: branch, base: &base, branch: &b, codec: &codec, schedule: &schedule }
                            .inpaint(&img, &m, &opts)?
                    }
                    other => bail!("{branch} holds a {} model, not a branch", other.role()),
                },
            };
            result.save_png(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval { bench, out, base, branch, sample_steps, limit: n } => {
            let samples = limit(load_samples(&bench)?, n);
            let codec = load_codec(ckpt(dir, "codec"))?;
            let base_model = load_base(ckpt(dir, &base))?;
            let (b, _): (Branch, _) = load_branch(ckpt(dir, &branch))?;
            let brush = BrushNetPipeline { name: "brushnet".into(), base: &base_model, branch: &b, codec: &codec, schedule: &schedule };
            let bld = BldPipeline { name: "bld".into(), base: &base_model, codec: &codec, schedule: &schedule };
            let options = settings.overlay(&Settings { sample_steps, ..Default::default() }).inpaint(String::new());
            let cfg = BenchConfig { options, seed };
            let report = run_benchmark(&[&brush as &dyn Inpainter, &bld], &samples, &codec, &cfg);
            report.write(&out, "benchmark")?;
            for a in &report.aggregates {
                println!(
                    "{:<10} {:<8} psnr {:>7.2} dB  mse {:.5}  lpips {:.4}  probe {}",
                    a.pipeline,
                    a.side.map_or("all".to_string(), |s| s.to_string()),
                    a.psnr_db.unwrap_or(f64::NAN),
                    a.mse.unwrap_or(f64::NAN),
                    a.lpips_proxy.unwrap_or(f64::NAN),
                    a.caption_probe.map_or("-".into(), |p| format!("{p:.3}")),
                );
            }
            let failures = report.failures();
            if !failures.is_empty() {
                for f in &failures {
                    eprintln!("failed: {f}");
                }
                bail!("{} of {} rows failed", failures.len(), report.rows.len());
            }
        }
        Command::Ablate { data, bench, out, steps, base, sample_steps, limit: n } => {
            let samples = load_all(&data)?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let bench = limit(load_samples(&bench)?, n);
            let codec = load_codec(ckpt(dir, "codec"))?;
            let base_model = load_base(ckpt(dir, &base))?;
            let s = settings.overlay(&Settings { steps, sample_steps, ..Default::default() });
            let budget = AblationBudget {
                train: s.train(TrainConfig { steps: 4000, ..Default::default() }),
                bench: BenchConfig { options: s.inpaint(String::new()), seed },
            };
            let report = run_ablation(&base_model, &codec, &schedule, &refs, &bench, &ablation_grid(), &budget);
            report.write(&out, "ablation")?;
            print!("{}", report.to_csv());
            write_json(&out.join("ablation_timing.json"), &json!({ "seconds": report.seconds, "trainings": report.trainings }))?;
            let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                bail!("{failed} ablation variants failed");
            }
        }
        Command::Serve { addr, workers, budget_secs } => {
            let catalog = Catalog::load_dir(dir).with_context(|| format!("loading checkpoints from {}", dir.display()))?;
            let mut config = ServiceConfig { budget: Duration::from_secs(budget_secs), ..Default::default() };
            if let Some(w) = workers {
                config.workers = w;
            }
            let state = AppState::new(catalog, &config)?;
            tokio::runtime::Runtime::new()?.block_on(brushnet_service::serve(addr, state))?;
        }
    }
    Ok(())
}

