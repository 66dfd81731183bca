//! Adam and the shared mini-batch loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::GroupedData;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.learning_rate;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Optimizer and schedule settings shared by every trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Approximate number of raw rows per mini-batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    /// Validation loss is recorded every this many epochs (0 disables).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 8192,
            epochs: 800,
            validation_fraction: 0.2,
            eval_every: 400,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidInput(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean mini-batch loss per epoch.
    pub train_loss: Vec<f64>,
    /// `(epoch, loss)` on the validation split.
    pub val_loss: Vec<(usize, f64)>,
}

/// Runs Adam over shuffled mini-batches of `data`.
///
/// `objective` returns `(loss, gradient)` for a batch; `validation` is called
/// every `eval_every` epochs. Returns on the final epoch with no early stop.
pub fn fit<F, V>(
    params: &mut [f64],
    data: &GroupedData,
    cfg: &TrainConfig,
    mut objective: F,
    mut validation: V,
) -> Result<TrainHistory>
where
    F: FnMut(&[f64], &GroupedData) -> Result<(f64, Vec<f64>)>,
    V: FnMut(&[f64]) -> Result<Option<f64>>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut history = TrainHistory::default();
    let single_batch = data.n_obs() + data.n_exp() <= cfg.batch_size as f64;
    for epoch in 1..=cfg.epochs {
        let batches = if single_batch {
            vec![(0..data.len()).collect::<Vec<_>>()]
        } else {
            data.batches(cfg.batch_size, &mut rng)
        };
        let mut total = 0.0;
        for idx in &batches {
            let (loss, grad) = if single_batch {
                objective(params, data)?
            } else {
                objective(params, &data.gather(idx))?
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
            adam.step(params, &grad);
            total += loss;
        }
        history.train_loss.push(total / batches.len() as f64);
        if cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            if let Some(v) = validation(params)? {
                history.val_loss.push((epoch, v));
            }
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut adam = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * p[0], 4.0 * p[1]];
            adam.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2);
    }

    #[test]
    fn first_adam_step_is_learning_rate_sized() {
        let mut p = vec![0.0];
        let mut adam = Adam::new(1, 0.01);
        adam.step(&mut p, &[123.0]);
        assert!((p[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        c = TrainConfig {
            validation_fraction: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
