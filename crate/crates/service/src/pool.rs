//! Fixed pool of worker threads, each owning a private model replica.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use brushnet_core::diffusion::{NoiseSchedule, StepInfo};
use brushnet_core::pipeline::{BldPipeline, BrushNetPipeline, Inpainter, SingleBranchPipeline};
use brushnet_core::{Error, Image, Result};
use tch::Tensor;
use tokio::sync::oneshot;

use crate::api::{PipelineKind, ValidRequest};
use crate::catalog::{Catalog, Model, Replica};

pub struct Job {
    pub request: ValidRequest,
    pub cancel: Arc<AtomicBool>,
    pub deadline: Instant,
    pub reply: oneshot::Sender<Result<Image>>,
}

pub struct WorkerPool {
    tx: mpsc::Sender<Job>,
    workers: usize,
}

impl WorkerPool {
    /// Starts `workers` threads and waits until every replica has loaded.
    pub fn start(catalog: &Catalog, workers: usize) -> Result<Self> {
        let workers = workers.max(1);
        let (tx, rx) = mpsc::channel::<Job>();
        let rx = Arc::new(Mutex::new(rx));
        let (ready_tx, ready_rx) = mpsc::channel::<Result<()>>();
        for i in 0..workers {
            let catalog = catalog.clone();
            let rx = rx.clone();
            let ready = ready_tx.clone();
            std::thread::Builder::new()
                .name(format!("inpaint-worker-{i}"))
                .spawn(move || {
                    brushnet_core::nn::single_threaded();
                    let replica = match catalog.replica() {
                        Ok(r) => {
                            let _ = ready.send(Ok(()));
                            r
                        }
                        Err(e) => {
                            let _ = ready.send(Err(e));
                            return;
                        }
                    };
                    drop(ready);
                    let schedule = NoiseSchedule::default();
                    loop {
                        let job = match rx.lock() {
                            Ok(guard) => guard.recv(),
                            Err(_) => return,
                        };
                        let Ok(job) = job else { return };
                        let result = run_job(&replica, &schedule, &job);
                        let _ = job.reply.send(result);
                    }
                })
                .map_err(|e| Error::Checkpoint(format!("cannot spawn worker: {e}")))?;
        }
        drop(ready_tx);
        for _ in 0..workers {
            ready_rx
                .recv()
                .map_err(|_| Error::Checkpoint("worker exited during startup".into()))??;
        }
        Ok(Self { tx, workers })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn submit(&self, job: Job) -> Result<()> {
        self.tx.send(job).map_err(|_| Error::Cancelled("worker pool is shut down".into()))
    }
}

fn run_job(replica: &Replica, schedule: &NoiseSchedule, job: &Job) -> Result<Image> {
    let stop = || job.cancel.load(Ordering::Relaxed) || Instant::now() >= job.deadline;
    if stop() {
        return Err(Error::Cancelled("budget exhausted before the job started".into()));
    }
    let mut hook = |info: StepInfo, z: Tensor| -> Result<Tensor> {
        if stop() {
            return Err(Error::Cancelled(format!("stopped at step {}", info.index)));
        }
        Ok(z)
    };
    let req = &job.request;
    let opts = req.options.inpaint_options();
    let codec = &replica.codec;
    let base = || match replica.get(&req.options.base) {
        Some(Model::Base(m)) => Ok(m),
        _ => Err(Error::Compatibility(format!("{:?} is not a loaded base", req.options.base))),
    };
    match (req.options.pipeline, req.options.branch.as_deref().map(|id| replica.get(id))) {
        (PipelineKind::Bld, _) => {
            let p = BldPipeline { name: "bld".into(), base: base()?, codec, schedule };
            p.inpaint_with_hook(&req.image, &req.mask, &opts, Some(&mut hook))
        }
        (PipelineKind::Brushnet, Some(Some(Model::Branch(branch)))) => {
            let p = BrushNetPipeline { name: "brushnet".into(), base: base()?, branch, codec, schedule };
            p.inpaint_with_hook(&req.image, &req.mask, &opts, Some(&mut hook))
        }
        (PipelineKind::Brushnet, Some(Some(Model::Single(model)))) => {
            let p = SingleBranchPipeline { name: "single".into(), model, codec, schedule };
            p.inpaint_with_hook(&req.image, &req.mask, &opts, Some(&mut hook))
        }
        _ => Err(Error::Compatibility("requested branch is not loaded".into())),
    }
}
