use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.04,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let decay = params.iter().nth(i).map(|p| p.decay).unwrap_or(false);
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            for (mj, &gj) in m.iter_mut().zip(g) {
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
            }
            let v = self.second[i].data_mut();
            for (vj, &gj) in v.iter_mut().zip(g) {
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
            }
            let (m, v) = (self.first[i].data(), self.second[i].data());
            let p = params.get_mut(i).data_mut();
            for j in 0..p.len() {
                if decay {
                    p[j] -= lr * c.weight_decay * p[j];
                }
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to zero.
pub fn warmup_cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if total == 0 {
        return base;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: Vec<f64>, decay: bool) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(v), decay);
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = one_param(vec![1.0, -3.0], true);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&p, cfg);
        opt.step(&mut p, &[Tensor::vector(vec![0.0, 0.0])], 0.1).unwrap();
        assert_eq!(p.get(0).data(), &[1.0, -3.0]);
    }

    #[test]
    fn first_step_matches_hand_calculation() {
        // From zeroed moments: m = (1-b1) g, v = (1-b2) g^2, so mhat = g, vhat = g^2
        // and the step is lr * g / (|g| + eps), then decay shrinks by lr*wd first.
        let mut p = one_param(vec![0.5, -1.0], true);
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut opt = AdamW::new(&p, cfg);
        let g = [2.0, -0.25];
        opt.step(&mut p, &[Tensor::vector(g.to_vec())], 0.01).unwrap();
        let expect = |w: f64, g: f64| {
            let shrunk = w - 0.01 * 0.1 * w;
            shrunk - 0.01 * g / (g.abs() + 1e-8)
        };
        assert!((p.get(0).data()[0] - expect(0.5, 2.0)).abs() < 1e-15);
        assert!((p.get(0).data()[1] - expect(-1.0, -0.25)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_alone_shrinks_multiplicatively() {
        let mut p = one_param(vec![2.0, -4.0], true);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(&p, cfg);
        opt.step(&mut p, &[Tensor::vector(vec![0.0, 0.0])], 0.1).unwrap();
        assert!((p.get(0).data()[0] - 2.0 * 0.95).abs() < 1e-15);
        assert!((p.get(0).data()[1] + 4.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        assert!(warmup_cosine_lr(1.0, 0, 100, 10) < warmup_cosine_lr(1.0, 9, 100, 10));
        assert!((warmup_cosine_lr(1.0, 10, 100, 10) - 1.0).abs() < 1e-12);
        assert!(warmup_cosine_lr(1.0, 99, 100, 10) < 0.01);
    }
}
