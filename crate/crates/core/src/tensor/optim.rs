use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Learning-rate schedule applied on top of the base rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear ramp from `1/warmup` to 1 over the first `warmup` updates, then flat.
    LinearWarmup { warmup: usize },
}

impl LrSchedule {
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::LinearWarmup { warmup } if warmup > 0 => ((step + 1) as f64 / warmup as f64).min(1.0),
            LrSchedule::LinearWarmup { .. } => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay factor.
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.config.schedule.factor(self.step)
    }

    /// Applies one update. Fails without touching anything if a gradient is NaN.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), gr) in params.iter().zip(grads) {
            if p.shape() != gr.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: gr.shape().to_vec(),
                });
            }
            if gr.data().iter().any(|v| v.is_nan()) {
                return Err(Error::NanGradient(name.to_string()));
            }
        }
        let c = self.config;
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w *= 1.0 - lr * c.weight_decay;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_vec(vec![v]));
        ps
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut ps = scalar_params(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        adam.step(&mut ps, &[Tensor::from_vec(vec![1.0])]).unwrap();
        let before = ps.tensors()[0].data()[0];
        let m_before = adam.moments().0[0].data()[0];
        adam.step(&mut ps, &[Tensor::from_vec(vec![0.0])]).unwrap();
        assert!(adam.moments().0[0].data()[0].abs() < m_before.abs());
        let mut fresh = scalar_params(before);
        let mut adam2 = Adam::new(AdamConfig::default(), &fresh);
        adam2.step(&mut fresh, &[Tensor::from_vec(vec![0.0])]).unwrap();
        assert_eq!(fresh.tensors()[0].data()[0], before);
        assert_eq!(adam2.step_count(), 1);
    }

    #[test]
    fn first_step_has_unit_magnitude() {
        let mut ps = scalar_params(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &ps);
        adam.step(&mut ps, &[Tensor::from_vec(vec![1.0])]).unwrap();
        assert!((ps.tensors()[0].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut ps = scalar_params(2.0);
        let cfg = AdamConfig {
            lr: 3e-4,
            weight_decay: 1e-4,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &ps);
        adam.step(&mut ps, &[Tensor::from_vec(vec![0.0])]).unwrap();
        assert_eq!(ps.tensors()[0].data()[0], 2.0 * (1.0 - 3e-4 * 1e-4));
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut ps = scalar_params(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        match adam.step(&mut ps, &[Tensor::from_vec(vec![f64::NAN])]) {
            Err(Error::NanGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn warmup_schedule() {
        let s = LrSchedule::LinearWarmup { warmup: 10_000 };
        assert_eq!(s.factor(0), 1e-4);
        assert_eq!(s.factor(4_999), 0.5);
        assert_eq!(s.factor(9_999), 1.0);
        assert_eq!(s.factor(50_000), 1.0);
    }
}
