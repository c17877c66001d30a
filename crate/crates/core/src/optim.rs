//! Full-batch adaptive-moment optimizer with plateau learning-rate halving.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub initial_learning_rate: f64,
    pub plateau_patience: usize,
    pub warmup_epochs_before_scheduling: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            initial_learning_rate: 0.01,
            plateau_patience: 5,
            warmup_epochs_before_scheduling: 10,
            lr_decay_factor: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.plateau_patience == 0 || self.warmup_epochs_before_scheduling == 0 {
            return Err(Error::Parameter("epoch counts must be positive".into()));
        }
        if !(self.initial_learning_rate > 0.0 && self.initial_learning_rate.is_finite()) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::Parameter("lr decay factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Objective at the start of each epoch, plus the objective of the
    /// parameters left after the last step.
    pub epoch_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    /// Objective of the returned parameters.
    pub final_loss: f64,
    pub samples: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.epoch_losses.first().copied().unwrap_or(self.final_loss)
    }
}

/// Learning-rate schedule: after the warmup epochs, multiply the rate by
/// the decay factor whenever the loss has not improved for `patience`
/// consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    best: f64,
    stale: usize,
    epoch: usize,
    patience: usize,
    warmup: usize,
    decay: f64,
}

impl PlateauSchedule {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.initial_learning_rate,
            best: f64::INFINITY,
            stale: 0,
            epoch: 0,
            patience: config.plateau_patience,
            warmup: config.warmup_epochs_before_scheduling,
            decay: config.lr_decay_factor,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record the loss of the epoch that just finished.
    pub fn observe(&mut self, loss: f64) {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        if self.epoch > self.warmup && self.stale >= self.patience {
            self.lr *= self.decay;
            self.stale = 0;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Minimizes `objective` (which returns the loss and writes the gradient)
/// for `config.max_epochs` full-batch steps, leaving the best parameters
/// seen in `params`.
pub fn minimize(
    params: &mut [f64],
    config: &TrainConfig,
    samples: usize,
    mut objective: impl FnMut(&[f64], &mut [f64]) -> f64,
) -> Result<TrainReport> {
    config.validate()?;
    let n = params.len();
    let mut grad = vec![0.0; n];
    let mut adam = Adam::new(n);
    let mut schedule = PlateauSchedule::new(config);
    let mut best_params = params.to_vec();
    let mut best_loss = f64::INFINITY;
    let mut report = TrainReport {
        samples,
        ..TrainReport::default()
    };
    let mut track = |loss: f64, p: &[f64], report: &mut TrainReport| -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Training(format!("objective became non-finite ({loss})")));
        }
        report.epoch_losses.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_params.copy_from_slice(p);
        }
        Ok(())
    };
    for _ in 0..config.max_epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = objective(params, &mut grad);
        track(loss, params, &mut report)?;
        report.learning_rates.push(schedule.lr());
        adam.step(params, &grad, schedule.lr());
        schedule.observe(loss);
    }
    grad.iter_mut().for_each(|g| *g = 0.0);
    let last = objective(params, &mut grad);
    track(last, params, &mut report)?;
    params.copy_from_slice(&best_params);
    report.final_loss = best_loss;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_setup() {
        let c = TrainConfig::default();
        assert_eq!(c.max_epochs, 100);
        assert_eq!(c.initial_learning_rate, 0.01);
        assert_eq!(c.plateau_patience, 5);
        assert_eq!(c.warmup_epochs_before_scheduling, 10);
        assert_eq!(c.lr_decay_factor, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let bad = TrainConfig {
            lr_decay_factor: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            initial_learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn schedule_waits_for_warmup_then_halves() {
        let config = TrainConfig::default();
        let mut s = PlateauSchedule::new(&config);
        s.observe(1.0);
        for _ in 0..9 {
            s.observe(2.0);
        }
        // 10 epochs observed, 9 stale: still within warmup
        assert_eq!(s.lr(), 0.01);
        s.observe(2.0);
        assert_eq!(s.lr(), 0.005);
        for _ in 0..4 {
            s.observe(2.0);
        }
        assert_eq!(s.lr(), 0.005);
        s.observe(2.0);
        assert_eq!(s.lr(), 0.0025);
        s.observe(0.5);
        assert_eq!(s.lr(), 0.0025);
    }

    #[test]
    fn minimize_quadratic() {
        let mut p = vec![3.0, -2.0];
        let config = TrainConfig {
            max_epochs: 2000,
            initial_learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let report = minimize(&mut p, &config, 1, |x, g| {
            g[0] = 2.0 * (x[0] - 1.0);
            g[1] = 2.0 * (x[1] + 0.5);
            (x[0] - 1.0).powi(2) + (x[1] + 0.5).powi(2)
        })
        .unwrap();
        assert!(report.final_loss < 1e-4, "{}", report.final_loss);
        assert!((p[0] - 1.0).abs() < 1e-2 && (p[1] + 0.5).abs() < 1e-2);
        assert!(report.final_loss <= report.initial_loss());
    }
}
