//! Adam optimizer with inverse-time learning-rate decay, and the
//! reduce-on-plateau schedule used by the training loops.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Inverse-time decay: lr_t = lr0 / (1 + decay * t), t counted before
    /// the increment, so the first update uses lr0 unscaled.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, decay: 1e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Optimizer state: moment estimates per parameter array plus a step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    pub config: AdamConfig,
}

impl AdamState {
    /// Moment arrays start at zero, matching `step_count` 0.
    pub fn new(param_sizes: &[usize], config: AdamConfig) -> Self {
        AdamState {
            step_count: 0,
            first_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            config,
        }
    }

    /// One update over all parameter arrays. `lr_scale` multiplies the
    /// decayed learning rate (the plateau schedule feeds it).
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lr_scale: f64,
    ) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam: {} parameter arrays, {} gradient arrays, state holds {}",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::ShapeMismatch(format!(
                    "adam: parameter len {} vs gradient len {} vs state len {}",
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("adam received a non-finite gradient".into()));
            }
        }

        let cfg = self.config;
        let lr = lr_scale * cfg.learning_rate / (1.0 + cfg.decay * self.step_count as f64);
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau: when the observed loss has not decreased for
/// `patience` epochs, the learning-rate scale is divided by `factor`.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    patience: usize,
    factor: f64,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    scale: f64,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            scale: 1.0,
        }
    }

    /// Feed one epoch's validation loss; returns true when the rate dropped.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            return false;
        }
        if self.epoch - self.best_epoch >= self.patience {
            self.scale /= self.factor;
            self.best_epoch = self.epoch;
            return true;
        }
        false
    }

    pub fn lr_scale(&self) -> f64 {
        self.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity_at_every_step() {
        let mut state = AdamState::new(&[3], AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.0; 3];
        for _ in 0..25 {
            let before = p.clone();
            state.step(&mut [&mut p], &[&g], 1.0).unwrap();
            assert_eq!(p, before);
        }
        assert_eq!(state.step_count, 25);
    }

    #[test]
    fn first_step_magnitude_is_close_to_lr() {
        // Bias-corrected first step: |delta| = lr * |g| / (|g| + eps).
        let cfg = AdamConfig { learning_rate: 1e-3, decay: 0.0, ..AdamConfig::default() };
        for &g0 in &[0.5, -3.0, 1e-4] {
            let mut state = AdamState::new(&[1], cfg);
            let mut p = vec![0.0];
            state.step(&mut [&mut p], &[&[g0]], 1.0).unwrap();
            let expected = cfg.learning_rate * g0.abs() / (g0.abs() + cfg.epsilon);
            assert!(
                (p[0].abs() - expected).abs() < 1e-15,
                "step {} vs expected {expected}",
                p[0].abs()
            );
            assert_eq!(p[0].signum(), -g0.signum());
        }
    }

    #[test]
    fn ten_steps_match_reference_recurrence_on_quadratic() {
        // Reference: textbook Adam recurrence written out independently,
        // minimizing f(x) = (x - 3)^2 with gradient 2(x - 3).
        let cfg =
            AdamConfig { learning_rate: 0.05, decay: 1e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        let mut state = AdamState::new(&[1], cfg);
        let mut x = vec![0.0f64];

        let mut x_ref = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=10u32 {
            let g = 2.0 * (x[0] - 3.0);
            state.step(&mut [&mut x], &[&[g]], 1.0).unwrap();

            let g_ref = 2.0 * (x_ref - 3.0);
            let lr = cfg.learning_rate / (1.0 + cfg.decay * (t as f64 - 1.0));
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g_ref;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g_ref * g_ref;
            let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
            let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
            x_ref -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);

            assert!((x[0] - x_ref).abs() < 1e-12, "step {t}: {} vs {}", x[0], x_ref);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut state = AdamState::new(&[1], AdamConfig::default());
        let mut p = vec![0.0];
        assert!(state.step(&mut [&mut p], &[&[f64::NAN]], 1.0).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = AdamState::new(&[2], AdamConfig::default());
        let mut p = vec![0.0];
        assert!(state.step(&mut [&mut p], &[&[1.0]], 1.0).is_err());
    }

    #[test]
    fn plateau_drops_at_epochs_6_and_11_with_patience_5() {
        // Non-decreasing validation losses: first drop after 5 stale epochs.
        let mut sched = PlateauScheduler::new(5, 10.0);
        let mut drops = Vec::new();
        for epoch in 1..=15 {
            if sched.observe(1.0) {
                drops.push(epoch);
            }
        }
        assert_eq!(drops, vec![6, 11]);
        assert!((sched.lr_scale() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn plateau_resets_on_improvement() {
        let mut sched = PlateauScheduler::new(3, 10.0);
        let losses = [1.0, 0.9, 0.8, 0.85, 0.85, 0.7, 0.75, 0.75, 0.75];
        let mut drops = Vec::new();
        for (i, &l) in losses.iter().enumerate() {
            if sched.observe(l) {
                drops.push(i + 1);
            }
        }
        // best at epoch 3 (0.8) -> stale at 4,5; improved at 6 (0.7);
        // stale at 7,8,9 -> drop at 9.
        assert_eq!(drops, vec![9]);
    }
}
