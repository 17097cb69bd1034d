//! Training loop state: model, optimizer, rng and step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Dataset, Normalizer};
use crate::diffusion::{training_loss_tape, NoiseSchedule};
use crate::dit::DiTModel;
use crate::error::{Error, Result};
use crate::tensor::{adam_step, AdamConfig, AdamState, NdArray, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Cosine decay of the learning rate over `steps` down to this fraction
    /// of `optimizer.lr`; 1 keeps it constant.
    pub decay_to: f64,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            clip_norm: 1.0,
            decay_to: 1.0,
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        }
    }
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub struct Trainer {
    pub model: DiTModel,
    pub norm: Normalizer,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: DiTModel, norm: Normalizer, cfg: TrainConfig, seed: u64) -> Self {
        let adam = AdamState::new(model.params.values());
        Self {
            model,
            norm,
            adam,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        }
    }

    /// Learning rate for the step about to run.
    pub fn current_lr(&self) -> f64 {
        let base = self.cfg.optimizer.lr;
        if self.cfg.decay_to >= 1.0 || self.cfg.steps == 0 {
            return base;
        }
        let progress = (self.step as f64 / self.cfg.steps as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        base * (self.cfg.decay_to + (1.0 - self.cfg.decay_to) * cosine)
    }

    /// Batch indices for the next step: the dataset in order, cycled up to
    /// the batch size, when it fits; otherwise a draw without replacement.
    /// Repeated clips get independent timesteps and noise.
    fn pick(&mut self, n: usize) -> Vec<usize> {
        if self.cfg.batch_size >= n {
            (0..self.cfg.batch_size).map(|i| i % n).collect()
        } else {
            let mut idx = rand::seq::index::sample(&mut self.rng, n, self.cfg.batch_size).into_vec();
            idx.sort_unstable();
            idx
        }
    }

    /// One optimizer step; returns the loss before the update. Steps are
    /// numbered from 1 in errors and logs.
    pub fn train_step(&mut self, dataset: &Dataset, schedule: &NoiseSchedule) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::contract("empty dataset"));
        }
        let idx = self.pick(dataset.len());
        let cap = self.model.cfg.capacity;
        let hist = self.model.cfg.history_len;
        let batch = make_batch(dataset, &idx, &self.norm, schedule, cap, hist, &mut self.rng)?;
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let model = &self.model;
        let loss = training_loss_tape(&mut tape, &batch, schedule, |tape, item, input| {
            model.denoise(tape, &bound, input, item.t, &item.sequence_mask(), &item.cond)
        });
        let step = self.step + 1;
        let loss = loss.map_err(|e| step_error(e, step))?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::numeric(format!("loss is {value} at step {step}")));
        }
        let grads = tape.backward(loss).map_err(|e| step_error(e, step))?;
        let mut grads = bound.gradients(&grads, &self.model.params);
        if self.cfg.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.cfg.clip_norm);
        }
        let optimizer = AdamConfig {
            lr: self.current_lr(),
            ..self.cfg.optimizer
        };
        adam_step(self.model.params.values_mut(), &grads, &mut self.adam, &optimizer)?;
        self.step += 1;
        Ok(value)
    }
}

fn step_error(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::numeric(format!("non-finite value in {op} at step {step}")),
        other => other,
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [NdArray], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
