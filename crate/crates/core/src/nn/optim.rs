//! SGD with momentum and learning-rate decay, and RMSProp.

use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// `lr_t = lr / (1 + lr_decay * iter)`, `v <- momentum * v - lr_t * g`, `w <- w + v`.
    Sgd {
        learning_rate: f64,
        momentum: f64,
        lr_decay: f64,
    },
    /// `s <- rho * s + (1 - rho) * g^2`, `w <- w - lr * g / (sqrt(s) + epsilon)`.
    RmsProp {
        learning_rate: f64,
        rho: f64,
        epsilon: f64,
    },
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig::Sgd {
            learning_rate,
            momentum: 0.0,
            lr_decay: 0.0,
        }
    }

    pub fn sgd_momentum(learning_rate: f64, momentum: f64, lr_decay: f64) -> Self {
        OptimizerConfig::Sgd {
            learning_rate,
            momentum,
            lr_decay,
        }
    }

    pub fn rmsprop(learning_rate: f64) -> Self {
        OptimizerConfig::RmsProp {
            learning_rate,
            rho: 0.9,
            epsilon: 1e-7,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { learning_rate, .. }
            | OptimizerConfig::RmsProp { learning_rate, .. } => learning_rate,
        }
    }
}

/// Per-parameter optimizer memory: the SGD velocity or the RMSProp mean square.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub buffer: ParamVector<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, params: &ParamVector<T>) -> Self {
        OptimizerState {
            config,
            buffer: params.zeros_like(),
        }
    }

    /// Applies one update in place. `iter` counts updates from zero.
    pub fn step(&mut self, params: &mut ParamVector<T>, grad: &ParamVector<T>, iter: u64) -> Result<()> {
        params.check_layout(grad)?;
        params.check_layout(&self.buffer)?;
        match self.config {
            OptimizerConfig::Sgd {
                learning_rate,
                momentum,
                lr_decay,
            } => {
                let lr_t = T::lit(learning_rate / (1.0 + lr_decay * iter as f64));
                let mu = T::lit(momentum);
                for ((w, v), &g) in params.iter_mut().zip(self.buffer.iter_mut()).zip(grad.iter()) {
                    *v = mu * *v - lr_t * g;
                    *w += *v;
                }
            }
            OptimizerConfig::RmsProp {
                learning_rate,
                rho,
                epsilon,
            } => {
                let lr = T::lit(learning_rate);
                let rho = T::lit(rho);
                let eps = T::lit(epsilon);
                for ((w, s), &g) in params.iter_mut().zip(self.buffer.iter_mut()).zip(grad.iter()) {
                    *s = rho * *s + (T::one() - rho) * g * g;
                    *w -= lr * g / (s.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Layer;

    fn scalar(v: f64) -> ParamVector<f64> {
        ParamVector::new(vec![Layer::new("w", vec![1], vec![v]).unwrap()]).unwrap()
    }

    #[test]
    fn sgd_first_step_has_no_history() {
        let mut w = scalar(0.0);
        let mut st = OptimizerState::new(OptimizerConfig::sgd_momentum(0.1, 0.9, 0.0), &w);
        st.step(&mut w, &scalar(1.0), 0).unwrap();
        assert!((w.flatten()[0] + 0.1).abs() < 1e-15);
        assert!((st.buffer.flatten()[0] + 0.1).abs() < 1e-15);
        // second step accumulates momentum: v = 0.9 * -0.1 - 0.1
        st.step(&mut w, &scalar(1.0), 1).unwrap();
        assert!((st.buffer.flatten()[0] + 0.19).abs() < 1e-15);
    }

    #[test]
    fn sgd_without_decay_uses_constant_rate() {
        let cfg = OptimizerConfig::sgd(0.5);
        for iter in [0, 10, 1000] {
            let mut w = scalar(0.0);
            let mut st = OptimizerState::new(cfg, &w);
            st.step(&mut w, &scalar(1.0), iter).unwrap();
            assert_eq!(w.flatten()[0], -0.5);
        }
    }

    #[test]
    fn sgd_decay_shrinks_rate() {
        let mut w = scalar(0.0);
        let mut st = OptimizerState::new(OptimizerConfig::sgd_momentum(1.0, 0.0, 1.0), &w);
        st.step(&mut w, &scalar(1.0), 3).unwrap();
        assert_eq!(w.flatten()[0], -0.25);
    }

    #[test]
    fn rmsprop_first_step() {
        let mut w = scalar(0.0);
        let mut st = OptimizerState::new(OptimizerConfig::rmsprop(0.001), &w);
        st.step(&mut w, &scalar(1.0), 0).unwrap();
        assert!((st.buffer.flatten()[0] - 0.1).abs() < 1e-15);
        let expected = -0.001 / (0.1f64.sqrt() + 1e-7);
        assert!((w.flatten()[0] - expected).abs() < 1e-15);
        assert!((w.flatten()[0] + 0.0031623).abs() < 1e-7);
    }
}
