//! Next-token training of the toy model with hand-derived gradients and
//! bias-corrected adaptive-moment updates.

pub mod grad;
pub mod gradcheck;

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{accuracy, run_queries};
use crate::model::{read_header, write_header, push_f32s, ByteReader, ModelConfig, WeightSet};
use crate::numerics::{RealTensor, RngState};
use crate::world::{render_corpus, SynthWorld};

pub use grad::{backward, batch_loss, loss_and_grads};
pub use gradcheck::{gradient_check, GradCheckReport};

pub const OPTIMIZER_MAGIC: &[u8; 8] = b"RLENSOPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Exact-match evaluation every this many steps (0 disables).
    pub eval_every: usize,
    pub docs_per_fact: usize,
    pub init_std: f64,
    /// Stop early once an evaluation reaches this accuracy.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            steps: 3000,
            seed: 1,
            eval_every: 250,
            docs_per_fact: 16,
            init_std: 0.02,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment decays must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.docs_per_fact == 0 {
            return Err(Error::Config("batch_size and docs_per_fact must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub elapsed_secs: f64,
}

/// First and second moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: WeightSet<f32>,
    pub v: WeightSet<f32>,
}

impl AdamState {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        Ok(Self { step: 0, m: WeightSet::zeros(config)?, v: WeightSet::zeros(config)? })
    }

    pub fn update(&mut self, weights: &mut WeightSet<f32>, grads: &WeightSet<f32>, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - (cfg.beta1).powi(self.step as i32);
        let c2 = 1.0 - (cfg.beta2).powi(self.step as i32);
        let lr = cfg.lr as f32;
        let eps = cfg.eps as f32;
        let (c1, c2) = (c1 as f32, c2 as f32);
        for ((((_, w), (_, g)), (_, m)), (_, v)) in weights
            .arrays_mut()
            .into_iter()
            .zip(grads.arrays())
            .zip(self.m.arrays_mut())
            .zip(self.v.arrays_mut())
        {
            let (w, g, m, v) = (w.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Sidecar layout: magic `RLENSOPT`, version, the weight-file config header,
    /// step as u64, then every `m` array and every `v` array in weight-file order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_header(&mut out, OPTIMIZER_MAGIC, &self.m.config);
        out.extend_from_slice(&self.step.to_le_bytes());
        for set in [&self.m, &self.v] {
            for (_, t) in set.arrays() {
                push_f32s(&mut out, t.data());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let config = read_header(&mut r, OPTIMIZER_MAGIC)?;
        let step = r.u64()?;
        let read_set = |r: &mut ByteReader<'_>| -> Result<WeightSet<f32>> {
            let mut failure = None;
            let set = WeightSet::from_fn(&config, |_, shape| {
                let n = shape.iter().product();
                match r.f32s(n).and_then(|d| RealTensor::new(shape.to_vec(), d)) {
                    Ok(t) => t,
                    Err(e) => {
                        failure.get_or_insert(e);
                        RealTensor::zeros(shape.to_vec())
                    }
                }
            })?;
            failure.map_or(Ok(set), Err)
        };
        let m = read_set(&mut r)?;
        let v = read_set(&mut r)?;
        if !r.finished() {
            return Err(Error::Format("trailing bytes in optimizer sidecar".into()));
        }
        Ok(Self { step, m, v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Stateful training loop; the weights stay at their last good value if a step diverges.
pub struct Trainer {
    pub config: TrainConfig,
    weights: WeightSet<f32>,
    optimizer: AdamState,
    corpus: Vec<Vec<u32>>,
    rng: RngState,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, weights: WeightSet<f32>, corpus: Vec<Vec<u32>>) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let longest = corpus.iter().map(Vec::len).max().unwrap_or(0);
        if longest > weights.config.ctx {
            return Err(Error::OverLength { len: longest, ctx: weights.config.ctx });
        }
        let optimizer = AdamState::new(&weights.config)?;
        let rng = RngState::new(config.seed).fork(0x0074_7261_696e);
        Ok(Self { config, weights, optimizer, corpus, rng, step: 0 })
    }

    pub fn weights(&self) -> &WeightSet<f32> {
        &self.weights
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn into_parts(self) -> (WeightSet<f32>, AdamState) {
        (self.weights, self.optimizer)
    }

    pub fn sample_batch(&mut self) -> Vec<Vec<u32>> {
        (0..self.config.batch_size).map(|_| self.corpus[self.rng.below(self.corpus.len())].clone()).collect()
    }

    /// One optimizer step on a freshly sampled batch; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.sample_batch();
        self.step_on(&batch)
    }

    pub fn step_on(&mut self, batch: &[Vec<u32>]) -> Result<f64> {
        let diverged = |step, loss, w: &WeightSet<f32>| Error::Divergence {
            step,
            loss,
            last_good: Some(Box::new(w.clone())),
        };
        let (loss, grads) = match loss_and_grads(&self.weights, batch) {
            Ok(x) => x,
            Err(Error::NumericDomain(_)) => return Err(diverged(self.step, f64::NAN, &self.weights)),
            Err(e) => return Err(e),
        };
        if !grads.is_finite() {
            return Err(diverged(self.step, loss, &self.weights));
        }
        let before = self.weights.clone();
        self.optimizer.update(&mut self.weights, &grads, &self.config);
        if !self.weights.is_finite() {
            self.weights = before;
            return Err(diverged(self.step, loss, &self.weights));
        }
        self.step += 1;
        Ok(loss)
    }
}

/// Trains a fresh toy model on `world`, evaluating exact match every `eval_every` steps.
pub fn train(
    config: &TrainConfig,
    model: &ModelConfig,
    world: &SynthWorld,
) -> Result<(WeightSet<f32>, AdamState, Vec<TrainRecord>)> {
    config.validate()?;
    let corpus = render_corpus(world, config.docs_per_fact, config.seed);
    let weights = WeightSet::init(model, config.seed, config.init_std)?;
    let mut trainer = Trainer::new(config.clone(), weights, corpus)?;
    let started = Instant::now();
    let mut log = Vec::new();
    let mut running = None::<f64>;
    for step in 1..=config.steps {
        let loss = trainer.step()?;
        running = Some(running.map_or(loss, |r| 0.95 * r + 0.05 * loss));
        let evaluate = config.eval_every > 0 && (step % config.eval_every == 0 || step == config.steps);
        let acc = if evaluate {
            let instances = run_queries(trainer.weights(), world)?;
            Some(accuracy(&instances))
        } else {
            None
        };
        if evaluate || step % 50 == 0 || step == 1 {
            log.push(TrainRecord { step, loss, accuracy: acc, elapsed_secs: started.elapsed().as_secs_f64() });
            tracing::info!(step, loss = running.unwrap_or(loss), accuracy = ?acc, "train");
        }
        if let (Some(target), Some(a)) = (config.target_accuracy, acc) {
            if a >= target {
                break;
            }
        }
    }
    let (w, opt) = trainer.into_parts();
    Ok((w, opt, log))
}

pub fn write_log(path: &Path, log: &[TrainRecord]) -> Result<()> {
    let mut text = String::from("step,loss,accuracy,elapsed_secs\n");
    for r in log {
        let acc = r.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        text.push_str(&format!("{},{:.6},{},{:.3}\n", r.step, r.loss, acc, r.elapsed_secs));
    }
    fs::write(path, text)?;
    Ok(())
}
