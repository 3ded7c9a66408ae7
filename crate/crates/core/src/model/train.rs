//! AdamW training loop with linear warmup and cosine decay.

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::loss_and_grad_linked;
use super::config::TrainConfig;
use super::forward::StateLink;
use super::params::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// `(step, batch loss)` for every step taken.
    pub losses: Vec<(usize, f64)>,
}

impl TrainLog {
    /// Mean loss over the last `n` recorded steps.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|(_, l)| l).sum::<f64>() / tail.len() as f64)
    }
}

/// Learning rate at `step`: linear warmup, then cosine decay to 10% of peak.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    let peak = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return peak * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    let floor = 0.1 * peak;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        let wd = cfg.weight_decay as f32;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
            if self.decay[i] {
                params[i] -= lr * wd * params[i];
            }
            params[i] -= lr * update;
        }
    }
}

/// One draw from a training sampler: one or more sequences plus links
/// between them, with sequence indices local to this draw.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sample {
    pub seqs: Vec<Vec<u32>>,
    pub links: Vec<StateLink>,
}

impl From<Vec<u32>> for Sample {
    fn from(seq: Vec<u32>) -> Self {
        Sample {
            seqs: vec![seq],
            links: Vec::new(),
        }
    }
}

/// Trains `params` on batches drawn from `sample`. A batch takes draws
/// until it holds at least `cfg.batch_size` sequences.
///
/// With `cfg.steps == 0` the initialization is returned untouched. A
/// non-finite loss or gradient aborts with [`Error::Diverged`].
pub fn train<F>(mut params: ModelParams, cfg: &TrainConfig, mut sample: F) -> Result<(ModelParams, TrainLog)>
where
    F: FnMut(&mut ChaCha8Rng) -> Sample,
{
    cfg.validate()?;
    params.config.validate()?;
    let layout = params.layout();
    let mut opt = AdamW {
        m: vec![0.0; layout.total],
        v: vec![0.0; layout.total],
        decay: layout.decay_mask(),
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let mut batch: Vec<Vec<u32>> = Vec::with_capacity(cfg.batch_size + 1);
        let mut links = Vec::new();
        while batch.len() < cfg.batch_size {
            let draw = sample(&mut rng);
            let base = batch.len();
            links.extend(draw.links.into_iter().map(|k| StateLink {
                source: (k.source.0 + base, k.source.1),
                target: (k.target.0 + base, k.target.1),
                ..k
            }));
            batch.extend(draw.seqs);
        }
        let (loss, mut grad) = loss_and_grad_linked(&params, &batch, &links)?;
        let norm = grad.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if norm > cfg.grad_clip {
            let s = (cfg.grad_clip / norm) as f32;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let lr = learning_rate(cfg, step);
        opt.step(&mut params.data, &grad, lr, cfg);
        log.losses.push((step, loss));
        if step % 100 == 0 || step + 1 == cfg.steps {
            info!("step {step:5} loss {loss:.4} grad_norm {norm:.3} lr {lr:.2e}");
        } else {
            debug!("step {step:5} loss {loss:.4}");
        }
    }
    if !params.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            loss: f64::NAN,
        });
    }
    Ok((params, log))
}
