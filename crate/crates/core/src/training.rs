//! Optimizers, the learning-rate schedule and the epoch loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{check_compatible, gather_inputs, gather_rows, Operator};
use crate::nn::{Params, Tensor};
use crate::oracles::OperatorDataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// How an epoch is cut into batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Samples are shuffled every epoch, then cut into batches.
    #[default]
    Shuffled,
    /// Batches are fixed contiguous runs of samples; only their order is shuffled.
    Blocks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiply the rate by `decay_factor` every `decay_interval` epochs once
    /// `epoch >= decay_start`.
    #[serde(default = "one")]
    pub decay_factor: f64,
    #[serde(default = "one_usize")]
    pub decay_interval: usize,
    #[serde(default)]
    pub decay_start: usize,
    /// 0 means one batch holding the whole dataset.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub batching: Batching,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub adam_eps: f64,
    /// Clamp every parameter into `[lo, hi]` after each step.
    #[serde(default)]
    pub bounds: Option<(f64, f64)>,
    #[serde(default)]
    pub seed: u64,
    /// Samples per work unit. Results do not depend on the thread count,
    /// but they do depend on this value.
    #[serde(default = "chunk")]
    pub chunk_size: usize,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}
fn chunk() -> usize {
    256
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 1e-3,
            decay_factor: 1.0,
            decay_interval: 1,
            decay_start: 0,
            batch_size: 0,
            batching: Batching::Shuffled,
            optimizer: OptimizerKind::Adam,
            beta1: beta1(),
            beta2: beta2(),
            adam_eps: adam_eps(),
            bounds: None,
            seed: 0,
            chunk_size: chunk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay factor must lie in (0, 1]");
        }
        if self.decay_interval == 0 {
            return bad("decay interval must be >= 1");
        }
        if self.chunk_size == 0 {
            return bad("chunk size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("adam needs beta1, beta2 in [0, 1) and eps > 0");
        }
        if let Some((lo, hi)) = self.bounds {
            if !(lo <= hi) {
                return bad("parameter bounds need lo <= hi");
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = if epoch >= self.decay_start {
            (epoch - self.decay_start) / self.decay_interval
        } else {
            0
        };
        self.learning_rate * self.decay_factor.powi(k as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<P: Params>(params: &P) -> Self {
        let z: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.raw_dim()))
            .collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// One descent step, `theta -= lr * direction`, followed by clamping.
pub fn optimizer_step<P: Params>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let grads = grads.tensors();
    if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!(
            "non-finite gradient in parameter block {i}"
        )));
    }
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() || state.m.len() != grads.len() {
        return Err(Error::Contract(
            "gradient and optimizer state do not match the parameters".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.adam_eps);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (i, (p, g)) in tensors.iter_mut().zip(&grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient block {i} has the wrong shape"
            )));
        }
        match cfg.optimizer {
            OptimizerKind::Sgd => p.scaled_add(-lr, g),
            OptimizerKind::Adam => {
                let (m, v) = (&mut state.m[i], &mut state.v[i]);
                ndarray::Zip::from(&mut **p)
                    .and(&mut *m)
                    .and(&mut *v)
                    .and(*g)
                    .for_each(|p, m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
            }
        }
        if let Some((lo, hi)) = cfg.bounds {
            p.mapv_inplace(|x| x.clamp(lo, hi));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
    /// Norm of the last batch gradient of the epoch.
    pub grad_norm: f64,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut text = String::from("epoch,mean_loss,lr,wall_ms,grad_norm\n");
    for r in history {
        text.push_str(&format!(
            "{},{:.16e},{:.16e},{:.3},{:.16e}\n",
            r.epoch, r.mean_loss, r.lr, r.wall_ms, r.grad_norm
        ));
    }
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Independent generator for one unit of work. Streams never collide for
/// fewer than 2^20 batches and chunks per epoch.
pub fn substream(seed: u64, epoch: usize, batch: usize, chunk: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(
        ((epoch as u64) << 40) | (((batch as u64) & 0xF_FFFF) << 20) | (chunk as u64 & 0xF_FFFF),
    );
    r
}

/// Stream reserved for shuffling in a given epoch.
fn shuffle_stream(seed: u64, epoch: usize) -> ChaCha8Rng {
    substream(seed, epoch, 0xF_FFFF, 0xF_FFFF)
}

/// Sample indices of every batch of an epoch, in update order.
pub fn epoch_batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let size = if cfg.batch_size == 0 {
        n
    } else {
        cfg.batch_size.min(n)
    };
    let mut r = shuffle_stream(cfg.seed, epoch);
    match cfg.batching {
        Batching::Shuffled => {
            let mut order: Vec<usize> = (0..n).collect();
            if size < n {
                order.shuffle(&mut r);
            }
            order.chunks(size).map(<[usize]>::to_vec).collect()
        }
        Batching::Blocks => {
            let mut out: Vec<Vec<usize>> = (0..n)
                .collect::<Vec<_>>()
                .chunks(size)
                .map(<[usize]>::to_vec)
                .collect();
            out.shuffle(&mut r);
            out
        }
    }
}

/// Summed loss and gradient of `weight * loss` over `samples`, split into
/// chunks that run in parallel and are reduced in a fixed order.
pub fn batch_gradient<M: Operator>(
    model: &M,
    ds: &OperatorDataset,
    samples: &[usize],
    weight: f64,
    chunk_size: usize,
    seed_of: impl Fn(usize) -> ChaCha8Rng + Sync,
) -> Result<(f64, M::Params)> {
    let parts: Vec<Result<(f64, M::Params)>> = samples
        .par_chunks(chunk_size)
        .enumerate()
        .map(|(c, idx)| {
            let u = gather_inputs(ds, idx, model.input_shape())?;
            let y = gather_rows(&ds.y, idx);
            let t = gather_rows(&ds.noisy, idx);
            model.loss_and_grad(&u, &y, t.view(), weight, &mut seed_of(c), true)
        })
        .collect();
    let mut total = 0.0;
    let mut grads = model.zero_grads();
    for part in parts {
        let (l, g) = part?;
        total += l;
        grads.add_scaled(1.0, &g);
    }
    Ok((total, grads))
}

/// Trains in place against the dataset's noisy targets. `on_epoch` runs after
/// every epoch with the updated model, e.g. for checkpoints.
pub fn train<M: Operator>(
    model: &mut M,
    ds: &OperatorDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &M) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_compatible(model, ds)?;
    if ds.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let mut state = OptimizerState::new(model.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut grad_norm = 0.0;
        for (b, samples) in epoch_batches(ds.len(), cfg, epoch).iter().enumerate() {
            let weight = 1.0 / samples.len() as f64;
            let diverged = |e: Error| match e {
                Error::Numeric(_) => Error::Divergence {
                    epoch,
                    loss: f64::NAN,
                },
                other => other,
            };
            let (l, g) = batch_gradient(model, ds, samples, weight, cfg.chunk_size, |c| {
                substream(cfg.seed, epoch, b, c)
            })
            .map_err(diverged)?;
            loss_sum += l;
            if !loss_sum.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: loss_sum,
                });
            }
            grad_norm = g.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
            optimizer_step(model.params_mut(), &g, &mut state, lr, cfg).map_err(diverged)?;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / ds.len() as f64,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            grad_norm,
        };
        on_epoch(&record, model)?;
        history.push(record);
    }
    Ok(history)
}
