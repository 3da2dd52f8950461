//! Adam with a two-drop step learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    /// Fractions of the total epoch count at which the rate drops.
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            milestones: vec![0.65, 0.9],
            factor: 0.1,
        }
    }
}

impl Schedule {
    /// Learning rate for zero-based `epoch` out of `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let drops = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * epochs as f64).ceil() as usize)
            .count();
        self.base_lr * self.factor.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Returns the update to add to each parameter.
    pub fn step(&mut self, grad: &[f64], lr: f64) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        grad.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                -lr * (*m / c1) / ((*v / c2).sqrt() + self.eps)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_twice() {
        let s = Schedule::default();
        let lrs: Vec<f64> = (0..20).map(|e| s.lr_at(e, 20)).collect();
        assert_eq!(lrs[12], 1e-3);
        assert!((lrs[13] - 1e-4).abs() < 1e-18);
        assert!((lrs[17] - 1e-4).abs() < 1e-18);
        assert!((lrs[18] - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new(3);
        let d = adam.step(&[2.0, -0.5, 0.0], 0.01);
        assert!((d[0] + 0.01).abs() < 1e-9);
        assert!((d[1] - 0.01).abs() < 1e-9);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::new(2);
        let mut x = [3.0, -2.0];
        for _ in 0..3000 {
            let g = [2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)];
            for (xi, d) in x.iter_mut().zip(adam.step(&g, 0.01)) {
                *xi += d;
            }
        }
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
    }
}
