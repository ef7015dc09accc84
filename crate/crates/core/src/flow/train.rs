//! Flow-matching trainer: linear noise path, velocity regression, Adam.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::backprop::loss_and_grad;
use crate::flow::data::{Prompt, ToyImage, PIXELS};
use crate::flow::model::{patchify, ToyModel};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Probability that a training prompt is replaced by the empty prompt.
    pub prompt_drop: f64,
    pub warmup: usize,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 2e-3,
            batch: 32,
            seed: 0,
            prompt_drop: 0.1,
            warmup: 100,
            grad_clip: 1.0,
        }
    }
}

pub const DIVERGENCE_LOSS: f64 = 1e3;

/// One flow-matching training pair: `x_t = (1 − t) x₀ + t ε` and target
/// velocity `ε − x₀`.
#[derive(Clone, Debug)]
pub struct FlowPair {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub target: Vec<f64>,
}

pub fn flow_pair(x0: &[f64], noise: &[f64], t: f64) -> FlowPair {
    let x_t = x0.iter().zip(noise).map(|(&x, &e)| (1.0 - t) * x + t * e).collect();
    let target = x0.iter().zip(noise).map(|(&x, &e)| e - x).collect();
    FlowPair { x_t, t, target }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn mean_window(&self, range: std::ops::Range<usize>) -> f64 {
        let w = &self.losses[range];
        w.iter().sum::<f64>() / w.len() as f64
    }
}

struct Adam {
    m: ToyModel,
    v: ToyModel,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &ToyModel) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut ToyModel, grads: &ToyModel, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let params = model.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        let gs = grads.tensors();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(gs) {
            let (p, m, v, g) = (p.1.data_mut(), m.1.data_mut(), v.1.data_mut(), g.1.data());
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let warm = if cfg.warmup > 0 {
        ((step + 1) as f64 / cfg.warmup as f64).min(1.0)
    } else {
        1.0
    };
    let progress = step as f64 / cfg.steps.max(1) as f64;
    let cosine = 0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr * warm * cosine
}

/// Trains `model` in place and returns the loss curve.
///
/// Per-sample gradients are computed in parallel and summed in batch order,
/// so results are bitwise independent of the thread count.
pub fn train(model: &mut ToyModel, data: &[(ToyImage, Prompt)], cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Contract("training needs at least one example".into()));
    }
    let batch = cfg.batch.max(1);
    let patch = model.config.patch;
    let mut adam = Adam::new(model);
    let mut report = TrainReport::default();
    let empty = Prompt::empty();
    let mut last_loss = f64::NAN;

    for step in 0..cfg.steps {
        let mut rng = Rng::derive(cfg.seed, step as u64 + 1);
        let jobs: Vec<(usize, bool, FlowPair)> = (0..batch)
            .map(|_| {
                let idx = rng.below(data.len());
                let t = rng.uniform();
                let drop = rng.uniform() < cfg.prompt_drop;
                let noise: Vec<f64> = (0..PIXELS).map(|_| rng.normal()).collect();
                (idx, drop, flow_pair(&data[idx].0.pixels, &noise, t))
            })
            .collect();

        let model_ref = &*model;
        let results: Vec<Result<(f64, ToyModel)>> = jobs
            .par_iter()
            .map(|(idx, drop, pair)| {
                let prompt = if *drop { &empty } else { &data[*idx].1 };
                let mut g = model_ref.zeros_like();
                let x = patchify(&pair.x_t, patch);
                let target = patchify(&pair.target, patch);
                let l = loss_and_grad(model_ref, &x, pair.t, prompt, &target, &mut g)?;
                Ok((l, g))
            })
            .collect();

        let mut grads = model.zeros_like();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            for ((_, acc), (_, gi)) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                acc.add_scaled(gi, 1.0)?;
            }
        }
        let inv = 1.0 / batch as f64;
        loss *= inv;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged {
                step,
                loss,
                last_loss,
            });
        }
        last_loss = loss;
        report.losses.push(loss);

        let mut norm_sq = 0.0;
        for (_, g) in grads.tensors_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
            norm_sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let norm = norm_sq.sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            for (_, g) in grads.tensors_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        adam.step(model, &grads, lr_at(cfg, step));
    }
    Ok(report)
}

/// Largest absolute parameter difference between two models of equal shape.
pub fn max_param_diff(a: &ToyModel, b: &ToyModel) -> f64 {
    a.tensors()
        .into_iter()
        .zip(b.tensors())
        .map(|((_, x), (_, y))| x.max_abs_diff(y))
        .fold(0.0, f64::max)
}
