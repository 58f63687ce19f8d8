//! First-order optimizers over a fixed list of parameter tensors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Stochastic gradient with heavy-ball momentum.
    Sgd,
    #[default]
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Parameter(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Linear warm-up length in steps.
    pub warmup: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, lr: 1e-3, momentum: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0, warmup: 100 }
    }
}

pub struct Optimizer {
    cfg: OptimizerConfig,
    params: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl Optimizer {
    /// Marks every parameter as requiring gradients.
    pub fn new(cfg: &OptimizerConfig, params: Vec<Tensor>) -> Result<Self> {
        if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::Parameter(format!("invalid optimizer settings {cfg:?}")));
        }
        let params: Vec<Tensor> = params.into_iter().map(|p| p.set_requires_grad(true)).collect();
        let m = params.iter().map(|p| p.zeros_like()).collect();
        let v = params.iter().map(|p| p.zeros_like()).collect();
        Ok(Self { cfg: cfg.clone(), params, m, v, step: 0 })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            let mut g = p.grad();
            if g.defined() {
                let _ = g.detach_().zero_();
            }
        }
    }

    pub fn current_lr(&self) -> f64 {
        let warm = if self.cfg.warmup == 0 { 1.0 } else { ((self.step + 1) as f64 / self.cfg.warmup as f64).min(1.0) };
        self.cfg.lr * warm
    }

    /// Backpropagates `loss` and applies one update.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        self.zero_grad();
        loss.backward();
        self.step_grads()
    }

    fn step_grads(&mut self) -> Result<()> {
        let lr = self.current_lr();
        let grads: Vec<Option<Tensor>> = self
            .params
            .iter()
            .map(|p| {
                let g = p.grad();
                g.defined().then_some(g)
            })
            .collect();
        let scale = if self.cfg.clip_norm > 0.0 {
            let sq: f64 = grads.iter().flatten().map(|g| g.square().sum(tch::Kind::Double).double_value(&[])).sum();
            let norm = sq.sqrt();
            if norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 }
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        tch::no_grad(|| {
            for (i, g) in grads.iter().enumerate() {
                let Some(g) = g else { continue };
                let g = g * scale;
                let p = &mut self.params[i];
                match self.cfg.kind {
                    OptimizerKind::Sgd => {
                        let m = &mut self.m[i];
                        let _ = m.g_mul_scalar_(self.cfg.momentum).g_add_(&g);
                        let _ = p.g_sub_(&(&*m * lr));
                    }
                    OptimizerKind::Adam => {
                        let (b1, b2) = (self.cfg.momentum, self.cfg.beta2);
                        let m = &mut self.m[i];
                        let _ = m.g_mul_scalar_(b1).g_add_(&(&g * (1.0 - b1)));
                        let v = &mut self.v[i];
                        let _ = v.g_mul_scalar_(b2).g_add_(&(g.square() * (1.0 - b2)));
                        let mhat = &self.m[i] / (1.0 - b1.powi(t));
                        let vhat = &self.v[i] / (1.0 - b2.powi(t));
                        let _ = p.g_sub_(&(mhat / (vhat.sqrt() + self.cfg.eps) * lr));
                    }
                }
            }
        });
        Ok(())
    }
}

/// Exponential moving average of a scalar series.
#[derive(Debug, Clone, Copy)]
pub struct Ema {
    decay: f64,
    value: Option<f64>,
}

impl Ema {
    pub fn new(decay: f64) -> Self {
        Self { decay, value: None }
    }

    pub fn update(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(v) => self.decay * v + (1.0 - self.decay) * x,
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Kind;

    fn fit(kind: OptimizerKind) -> f64 {
        let cfg = OptimizerConfig { kind, lr: 0.05, warmup: 0, clip_norm: 0.0, ..Default::default() };
        let w = Tensor::from_slice(&[3.0f32, -2.0]);
        let mut opt = Optimizer::new(&cfg, vec![w]).unwrap();
        for _ in 0..300 {
            let loss = opt.params()[0].square().sum(Kind::Float);
            opt.backward_step(&loss).unwrap();
        }
        opt.params()[0].abs().max().double_value(&[])
    }

    #[test]
    fn both_optimizers_minimise_a_quadratic() {
        assert!(fit(OptimizerKind::Sgd) < 1e-3);
        assert!(fit(OptimizerKind::Adam) < 0.1);
    }

    #[test]
    fn rejects_bad_settings() {
        let cfg = OptimizerConfig { lr: 0.0, ..Default::default() };
        assert!(Optimizer::new(&cfg, vec![]).is_err());
    }

    #[test]
    fn ema_tracks_constant() {
        let mut e = Ema::new(0.9);
        for _ in 0..10 {
            e.update(2.0);
        }
        assert_eq!(e.value(), Some(2.0));
    }
}
