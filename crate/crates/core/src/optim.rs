//! Adam optimizer and the mini-batch training loop.
//!
//! Training minimizes the mean cross-entropy over the training set. Each
//! step applies Adam to the gradient of the mean loss over one mini-batch;
//! the final partial batch is kept, not dropped, since the training sets
//! here are tiny. All randomness (parameter initialization and epoch
//! shuffling) derives from [`TrainConfig::seed`], so a run is reproducible
//! from its config alone.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed::{mix, rng_from};
use crate::tensor::Tensor3;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive and finite"));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive and finite"));
        }
        Ok(())
    }
}

/// Adam moment estimates, one scalar per model parameter in the canonical
/// flat order.
#[derive(Debug, Clone)]
pub struct AdamState {
    hyper: AdamHyper,
    step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, param_count: usize) -> Result<Self> {
        hyper.validate()?;
        Ok(AdamState {
            hyper,
            step_count: 0,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// One bias-corrected Adam update:
    /// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
    /// `θ ← θ − α·m̂/(√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != self.first_moment.len() {
            return Err(Error::shape(format!(
                "Adam state sized for {} parameters, got {} params and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let h = self.hyper;
        let m_correction = 1.0 - h.beta1.powi(t);
        let v_correction = 1.0 - h.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = h.beta1 * self.first_moment[i] + (1.0 - h.beta1) * g;
            let v = h.beta2 * self.second_moment[i] + (1.0 - h.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / m_correction;
            let v_hat = v / v_correction;
            params[i] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
        }
        Ok(())
    }
}

/// Everything one training run needs beyond the model shape and the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Drives parameter initialization and epoch shuffling.
    pub seed: u64,
    pub shuffle_each_epoch: bool,
    /// Multiplier on the default initialization limits.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            shuffle_each_epoch: true,
            init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(Error::invalid("init_scale must be positive and finite"));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// One labeled training sample: an input patch and its one-hot target.
pub trait TrainSample {
    fn input(&self) -> &Tensor3;
    fn target(&self) -> &[f64];
}

impl TrainSample for (Tensor3, Vec<f64>) {
    fn input(&self) -> &Tensor3 {
        &self.0
    }
    fn target(&self) -> &[f64] {
        &self.1
    }
}

/// A trained model together with its per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainResult<M> {
    pub model: M,
    pub loss_history: Vec<f64>,
}

// Seed streams for the two independent randomness consumers.
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

/// Trains a fresh model. The template supplies shape, activation, and bias
/// choice; its parameters are redrawn from `config.seed` before the first
/// step. Runs `epochs × ⌈N/batch_size⌉` Adam steps on mean batch losses;
/// `loss_history[e]` is the mean training loss over epoch `e`'s samples.
pub fn train<M, S>(template: &M, samples: &[S], config: &TrainConfig) -> Result<TrainResult<M>>
where
    M: Model + Clone,
    S: TrainSample,
{
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut model = template.clone();
    model.init_params(config.init_scale, &mut rng_from(mix(config.seed, &[INIT_STREAM])))?;
    let mut shuffle_rng = rng_from(mix(config.seed, &[SHUFFLE_STREAM]));

    let count = model.param_count();
    let mut params = vec![0.0; count];
    model.write_params(&mut params);
    let mut state = AdamState::new(config.adam(), count)?;
    let mut grad = vec![0.0; count];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if config.shuffle_each_epoch {
            order.shuffle(&mut shuffle_rng);
        }
        let mut epoch_loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.fill(0.0);
            let mut batch_loss_sum = 0.0;
            for &idx in batch {
                let sample = &samples[idx];
                batch_loss_sum +=
                    model.accumulate_loss_grad(sample.input(), sample.target(), &mut grad)?;
            }
            let inv = 1.0 / batch.len() as f64;
            let batch_loss = batch_loss_sum * inv;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("mean batch loss became {batch_loss}"),
                });
            }
            for g in grad.iter_mut() {
                *g *= inv;
            }
            state.step(&mut params, &grad)?;
            model.read_params(&params)?;
            epoch_loss_sum += batch_loss_sum;
        }
        let epoch_loss = epoch_loss_sum / samples.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: format!("mean epoch loss became {epoch_loss}"),
            });
        }
        loss_history.push(epoch_loss);
    }
    Ok(TrainResult { model, loss_history })
}
