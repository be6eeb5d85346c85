//! Training a [`DebiasAdapter`] on frozen group embeddings.

mod adapter;
pub mod gradcheck;
mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adapter::{adapter_apply, DebiasAdapter};
pub use loss::{
    gradients, loss_all, loss_and_gradients, loss_bias, loss_breakdown, loss_rep,
    AdapterGradient, LossBreakdown,
};

use crate::error::{Error, Result};
use crate::math::{estimate_rho_with, GroupEmbeddings, KernelParams, RhoMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    params: AdamParams,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, params: AdamParams, n: usize) -> Self {
        Self {
            lr,
            params,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        let AdamParams { beta1, beta2, eps } = self.params;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Steps between validation checkpoints; the final step is always
    /// validated.
    pub validate_every: usize,
    pub seed: u64,
    pub adam: AdamParams,
    pub rho_mode: RhoMode,
    pub use_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 32,
            epochs: 1,
            validate_every: 500,
            seed: 42,
            adam: AdamParams::default(),
            rho_mode: RhoMode::Std,
            use_bias: false,
        }
    }
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.into()));
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and non-negative");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.validate_every == 0 {
            return bad("batch size, epochs and validation interval must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Training-batch loss before each update.
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    pub best_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// The checkpoint with the lowest validation loss.
    pub adapter: DebiasAdapter,
    pub kernel: KernelParams,
    pub validation_loss: f64,
    pub history: TrainHistory,
}

/// Minimizes `L_bias + beta * L_rep` with Adam, starting from the identity.
///
/// The kernel width is estimated once from `train_set` and held fixed. The
/// training order is shuffled once with `cfg.seed`. When `validation` is
/// empty the training set doubles as validation set.
pub fn train(
    train_set: &[GroupEmbeddings],
    validation: &[GroupEmbeddings],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train_set.first().ok_or(Error::EmptyDataset)?;
    let dim = first.dim();
    for g in train_set.iter().chain(validation) {
        g.check_dim(dim)?;
    }
    let kernel = estimate_rho_with(train_set, cfg.rho_mode)?;
    let validation = if validation.is_empty() {
        train_set
    } else {
        validation
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let mut adapter = DebiasAdapter::identity(dim, cfg.use_bias);
    let mut theta = adapter.params();
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam, theta.len());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, DebiasAdapter)> = None;

    let batches_per_epoch = order.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut batch: Vec<GroupEmbeddings> = Vec::with_capacity(cfg.batch_size);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let (loss, grad) = loss_and_gradients(&batch, &adapter, kernel, cfg.beta)?;
            adam.step(&mut theta, &grad.flatten());
            adapter.set_params(&theta);
            step += 1;
            history.steps.push(StepRecord { step, loss });

            if step % cfg.validate_every == 0 || step == total_steps {
                let val = loss_all(validation, &adapter, kernel, cfg.beta)?;
                log::debug!("step {step}: validation loss {val:.6}");
                history.validations.push(ValidationRecord { step, loss: val });
                if best.as_ref().is_none_or(|(b, _)| val < *b) {
                    history.best_step = step;
                    best = Some((val, adapter.clone()));
                }
            }
        }
    }
    let (validation_loss, adapter) = best.expect("at least one validation");
    if !adapter.params().iter().all(|p| p.is_finite()) {
        return Err(Error::InvalidParameter("training diverged".into()));
    }
    Ok(TrainOutcome {
        adapter,
        kernel,
        validation_loss,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::EmbeddingVector;

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    fn toy_set() -> Vec<GroupEmbeddings> {
        (0..20)
            .map(|i| {
                let c = i as f64 * 0.1;
                GroupEmbeddings::new(
                    format!("g{i}"),
                    vec![v(&[c, 1.0]), v(&[c, 2.0])],
                    v(&[c, 0.0]),
                )
            })
            .collect()
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(0.1, AdamParams::default(), 2);
        let mut theta = vec![1.0, 1.0];
        adam.step(&mut theta, &[3.0, -0.002]);
        assert!((theta[0] - 0.9).abs() < 1e-6);
        assert!((theta[1] - 1.1).abs() < 1e-4);
    }

    #[test]
    fn tiny_learning_rate_keeps_identity() {
        let cfg = TrainConfig {
            learning_rate: 1e-300,
            batch_size: 4,
            ..Default::default()
        };
        let out = train(&toy_set(), &[], &cfg).unwrap();
        assert_eq!(out.adapter, DebiasAdapter::identity(2, false));
        assert_eq!(out.history.steps.len(), 5);
        assert_eq!(out.history.validations.len(), 1);
    }

    #[test]
    fn validates_every_n_steps_and_at_the_end() {
        let cfg = TrainConfig {
            batch_size: 3,
            validate_every: 2,
            epochs: 2,
            ..Default::default()
        };
        let out = train(&toy_set(), &[], &cfg).unwrap();
        // 7 batches per epoch, 14 steps
        let steps: Vec<usize> = out.history.validations.iter().map(|v| v.step).collect();
        assert_eq!(steps, vec![2, 4, 6, 8, 10, 12, 14]);
        let best = out
            .history
            .validations
            .iter()
            .min_by(|a, b| a.loss.total_cmp(&b.loss))
            .unwrap();
        assert_eq!(out.history.best_step, best.step);
        assert_eq!(out.validation_loss, best.loss);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            train(&[], &[], &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
        let mut set = toy_set();
        set.push(GroupEmbeddings::new("x", vec![v(&[1.0]), v(&[2.0])], v(&[0.0])));
        assert!(matches!(
            train(&set, &[], &TrainConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
        let cfg = TrainConfig {
            beta: -1.0,
            ..Default::default()
        };
        assert!(train(&toy_set(), &[], &cfg).is_err());
    }
}
