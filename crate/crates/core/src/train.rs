//! Supervised training: learning-rate schedule, gradient clipping, AdamW and
//! the training loop.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::layers::{Forward, ParamStore};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Intermediate checkpoint period; 0 disables intermediate checkpoints.
    pub eval_every: usize,
    /// Cosine decay to zero after warmup.
    pub cosine: bool,
    /// Restrict the loss to the final state of each window.
    pub last_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 64,
            base_lr: 1e-4,
            warmup_steps: 500,
            weight_decay: 1e-4,
            grad_clip: 0.25,
            seed: 0,
            eval_every: 0,
            cosine: false,
            last_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.steps {
            return Err(Error::InvalidArgument(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::InvalidArgument(
                "base_lr and weight_decay must be nonnegative and grad_clip positive".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup, then constant or cosine-decayed learning rate.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let w = cfg.warmup_steps;
    if step < w {
        return cfg.base_lr * (step + 1) as f64 / w as f64;
    }
    if !cfg.cosine || cfg.steps <= w {
        return cfg.base_lr;
    }
    let progress = ((step + 1 - w) as f64 / (cfg.steps - w) as f64).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the applied factor.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm <= max_norm {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut().flatten() {
        *g *= scale;
    }
    scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, betas: (f64, f64), weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            betas,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Bias-corrected Adam update with decoupled weight decay on parameters
/// flagged for decay.
pub fn adamw_step(opt: &mut OptimizerState, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
    opt.step += 1;
    let (b1, b2) = opt.betas;
    let c1 = 1.0 - b1.powi(opt.step as i32);
    let c2 = 1.0 - b2.powi(opt.step as i32);
    for (i, p) in store.iter_mut().enumerate() {
        let decay = if p.decay { 1.0 - lr * opt.weight_decay } else { 1.0 };
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + opt.eps);
            *w = *w * decay - lr * update;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,lr,loss,grad_norm";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.lr, self.loss, self.grad_norm)
    }
}

/// Receives metrics and checkpoints during training.
pub trait TrainSink {
    fn metric(&mut self, _row: &MetricRow) -> Result<()> {
        Ok(())
    }

    /// Called every `eval_every` steps and once at the end with the number
    /// of completed steps.
    fn checkpoint(&mut self, _step: usize, _model: &Model) -> Result<()> {
        Ok(())
    }
}

impl TrainSink for () {}

/// Streams metrics as CSV rows.
pub struct CsvMetrics<W: Write>(pub W);

impl<W: Write> CsvMetrics<W> {
    pub fn new(mut w: W) -> Result<Self> {
        writeln!(w, "{METRICS_HEADER}")?;
        Ok(Self(w))
    }
}

impl<W: Write> TrainSink for CsvMetrics<W> {
    fn metric(&mut self, row: &MetricRow) -> Result<()> {
        writeln!(self.0, "{}", row.csv())?;
        Ok(())
    }
}

/// Runs `cfg.steps` AdamW steps on batches sampled from `dataset`.
pub fn train(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig, sink: &mut dyn TrainSink) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    let spec = dataset.spec();
    if spec.action_space != model.config.action_space || spec.state_dim != model.config.state_dim {
        return Err(Error::InvalidArgument(format!(
            "dataset env {} does not match the model's state/action spaces",
            dataset.env
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(&model.store, (0.9, 0.95), cfg.weight_decay);
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = lr_at(cfg, step);
        let batch = sample_batch(dataset, model.config.context_length, cfg.batch_size, &mut rng)?;
        let dropout_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let (loss, mut grads) = {
            let mut f = Forward::train(&model.store, dropout_rng);
            let pred = model.forward(&mut f, &batch)?;
            let loss = model.loss(&mut f, pred, &batch, cfg.last_only)?;
            f.graph.backward(loss)?;
            (f.graph.value(loss).data()[0], f.param_grads())
        };
        let norm = grad_norm(&grads);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                loss,
                lr,
                grad_norm: norm,
            });
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        adamw_step(&mut opt, &mut model.store, &grads, lr);
        let row = MetricRow {
            step,
            lr,
            loss,
            grad_norm: norm,
        };
        sink.metric(&row)?;
        rows.push(row);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps {
            sink.checkpoint(step + 1, model)?;
        }
    }
    sink.checkpoint(cfg.steps, model)?;
    Ok(rows)
}
