//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{ModelSpec, Sample};
use super::optim::{OptimizerConfig, OptimizerState};
use super::params::ParamVector;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

/// Trains `params` on `data`, reshuffling each epoch with a generator seeded by `cfg.seed`.
///
/// The final partial batch of an epoch is kept.
pub fn train<T: Scalar, S: Sample<T>>(
    spec: &ModelSpec,
    params: ParamVector<T>,
    data: &[S],
    cfg: &TrainConfig,
) -> Result<ParamVector<T>> {
    if cfg.batch_size < 1 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let mut params = params;
    if cfg.epochs == 0 {
        return Ok(params);
    }
    let mut state = OptimizerState::new(cfg.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut iter = 0u64;
    let mut batch: Vec<&S> = Vec::with_capacity(cfg.batch_size.min(data.len()));
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &data[i]));
            let grad = spec.gradient(&params, &batch)?;
            state.step(&mut params, &grad, iter)?;
            iter += 1;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{Head, Labeled, Target};

    fn toy() -> (ModelSpec, Vec<Labeled<f64>>) {
        let spec = ModelSpec::mlp1(2, 4, 2, Head::SoftmaxCe);
        let data = (0..12)
            .map(|i| {
                let x = vec![(i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()];
                Labeled::new(x, Target::Class(i % 2))
            })
            .collect();
        (spec, data)
    }

    fn cfg(epochs: usize, batch_size: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size,
            optimizer: OptimizerConfig::sgd_momentum(lr, 0.9, 0.0),
            seed: 11,
        }
    }

    #[test]
    fn zero_epochs_or_zero_rate_is_identity() {
        let (spec, data) = toy();
        let p: ParamVector<f64> = spec.init_params(1);
        assert_eq!(train(&spec, p.clone(), &data, &cfg(0, 4, 0.1)).unwrap(), p);
        assert_eq!(train(&spec, p.clone(), &data, &cfg(3, 4, 0.0)).unwrap(), p);
    }

    #[test]
    fn zero_batch_size_rejected() {
        let (spec, data) = toy();
        let p: ParamVector<f64> = spec.init_params(1);
        assert!(train(&spec, p, &data, &cfg(1, 0, 0.1)).is_err());
    }

    #[test]
    fn full_batch_epoch_is_one_gradient_step() {
        let (spec, data) = toy();
        let p: ParamVector<f64> = spec.init_params(2);
        let c = TrainConfig {
            optimizer: OptimizerConfig::sgd(0.3),
            ..cfg(1, data.len(), 0.3)
        };
        let trained = train(&spec, p.clone(), &data, &c).unwrap();
        let mut expected = p.clone();
        expected.axpy(-0.3, &spec.gradient(&p, &data).unwrap()).unwrap();
        assert!(trained.max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (spec, data) = toy();
        let p: ParamVector<f64> = spec.init_params(3);
        let a = train(&spec, p.clone(), &data, &cfg(50, 4, 0.05)).unwrap();
        let b = train(&spec, p.clone(), &data, &cfg(50, 4, 0.05)).unwrap();
        assert_eq!(a, b);
        assert!(spec.loss(&a, &data).unwrap() < spec.loss(&p, &data).unwrap());
    }
}
