//! Re-identification: map an anonymous delta to a user.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AttackDataset;
#[cfg(test)]
use super::AttackRow;
use crate::error::{Error, Result};
use crate::nn::{train, Head, Labeled, ModelSpec, OptimizerConfig, ParamVector, Target, TrainConfig};
use crate::scalar::{dot, softmax, sq_dist, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReidMethod {
    Chance,
    Knn,
    Svm,
    Mlp,
}

impl ReidMethod {
    pub const ALL: [ReidMethod; 4] = [ReidMethod::Chance, ReidMethod::Knn, ReidMethod::Svm, ReidMethod::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            ReidMethod::Chance => "chance",
            ReidMethod::Knn => "knn",
            ReidMethod::Svm => "svm",
            ReidMethod::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    User(u32),
    /// All users without prior data, collectively.
    Unseen,
}

/// Attack-model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReidConfig {
    pub knn_k: usize,
    pub svm_learning_rate: f64,
    pub svm_epochs: usize,
    pub svm_weight_decay: f64,
    pub mlp_hidden: usize,
    pub mlp_learning_rate: f64,
    pub mlp_momentum: f64,
    pub mlp_lr_decay: f64,
    pub mlp_epochs: usize,
    pub mlp_batch_size: usize,
}

impl Default for ReidConfig {
    fn default() -> Self {
        ReidConfig {
            knn_k: 10,
            svm_learning_rate: 0.01,
            svm_epochs: 200,
            svm_weight_decay: 1e-4,
            mlp_hidden: 128,
            mlp_learning_rate: 0.01,
            mlp_momentum: 0.9,
            mlp_lr_decay: 1e-6,
            mlp_epochs: 100,
            mlp_batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReidState<T> {
    Chance,
    Knn { table: Vec<(Vec<T>, usize)>, k: usize },
    /// One `(weights, bias)` scorer per class.
    Svm { scorers: Vec<(Vec<T>, T)> },
    Mlp { spec: ModelSpec, params: ParamVector<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReidModel<T> {
    pub method: ReidMethod,
    pub classes: Vec<ClassLabel>,
    pub dim: usize,
    pub state: ReidState<T>,
}

impl<T: Scalar> ReidModel<T> {
    pub fn class_index(&self, label: ClassLabel) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    /// Column of a user's own class; `None` if the user is not a class.
    pub fn class_of(&self, user_id: u32) -> Option<usize> {
        self.class_index(ClassLabel::User(user_id))
    }
}

pub fn train_reid<T: Scalar>(ds: &AttackDataset<T>, method: ReidMethod, seed: u64) -> Result<ReidModel<T>> {
    train_reid_with(ds, method, &ReidConfig::default(), seed)
}

pub fn train_reid_with<T: Scalar>(
    ds: &AttackDataset<T>,
    method: ReidMethod,
    cfg: &ReidConfig,
    seed: u64,
) -> Result<ReidModel<T>> {
    let classes: Vec<ClassLabel> = ds.users.iter().map(|&u| ClassLabel::User(u)).collect();
    let rows: Vec<(&[T], usize)> = ds
        .train
        .iter()
        .map(|r| {
            let c = ds
                .users
                .binary_search(&r.user_id)
                .map_err(|_| Error::invalid(format!("train user {} missing from the user list", r.user_id)))?;
            Ok((r.features.as_slice(), c))
        })
        .collect::<Result<_>>()?;
    fit_labeled(classes, &rows, ds.dim(), method, cfg, seed)
}

/// Fits `method` on rows already mapped to indices into `classes`.
pub(crate) fn fit_labeled<T: Scalar>(
    classes: Vec<ClassLabel>,
    rows: &[(&[T], usize)],
    dim: usize,
    method: ReidMethod,
    cfg: &ReidConfig,
    seed: u64,
) -> Result<ReidModel<T>> {
    if classes.is_empty() {
        return Err(Error::Empty("attack classes"));
    }
    if method != ReidMethod::Chance {
        let mut counts = vec![0usize; classes.len()];
        for (x, c) in rows {
            if x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: x.len(),
                });
            }
            counts[*c] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("class {:?} has no training rows", classes[c])));
        }
    }
    let state = match method {
        ReidMethod::Chance => ReidState::Chance,
        ReidMethod::Knn => ReidState::Knn {
            table: rows.iter().map(|(x, c)| (x.to_vec(), *c)).collect(),
            k: cfg.knn_k.min(rows.len()).max(1),
        },
        ReidMethod::Svm => ReidState::Svm {
            scorers: fit_svm(rows, classes.len(), dim, cfg, seed),
        },
        ReidMethod::Mlp => {
            let spec = ModelSpec::mlp1(dim, cfg.mlp_hidden, classes.len(), Head::SoftmaxCe);
            let data: Vec<Labeled<T>> = rows
                .iter()
                .map(|(x, c)| Labeled::new(x.to_vec(), Target::Class(*c)))
                .collect();
            let tc = TrainConfig {
                epochs: cfg.mlp_epochs,
                batch_size: cfg.mlp_batch_size,
                optimizer: OptimizerConfig::sgd_momentum(cfg.mlp_learning_rate, cfg.mlp_momentum, cfg.mlp_lr_decay),
                seed: seed ^ 0x5eed,
            };
            let params = train(&spec, spec.init_params(seed), &data, &tc)?;
            ReidState::Mlp { spec, params }
        }
    };
    Ok(ReidModel {
        method,
        classes,
        dim,
        state,
    })
}

/// One-vs-rest hinge loss with L2 decay, per-row stochastic gradient steps.
fn fit_svm<T: Scalar>(rows: &[(&[T], usize)], k: usize, dim: usize, cfg: &ReidConfig, seed: u64) -> Vec<(Vec<T>, T)> {
    let lr = T::lit(cfg.svm_learning_rate);
    let wd = T::lit(cfg.svm_weight_decay);
    let mut scorers = vec![(vec![T::zero(); dim], T::zero()); k];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..cfg.svm_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (x, c) = rows[i];
            for (class, (w, b)) in scorers.iter_mut().enumerate() {
                let y = if class == c { T::one() } else { -T::one() };
                let margin = y * (dot(w, x) + *b);
                let active = margin < T::one();
                for (wv, &xv) in w.iter_mut().zip(x) {
                    let mut g = wd * *wv;
                    if active {
                        g -= y * xv;
                    }
                    *wv -= lr * g;
                }
                if active {
                    *b += lr * y;
                }
            }
        }
    }
    scorers
}

/// Score vector over `model.classes`; always a probability distribution.
pub fn predict_reid<T: Scalar>(model: &ReidModel<T>, feature: &[T]) -> Result<Vec<T>> {
    if feature.len() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            actual: feature.len(),
        });
    }
    let k = model.classes.len();
    Ok(match &model.state {
        ReidState::Chance => vec![T::one() / T::from_usize_lossy(k); k],
        ReidState::Knn { table, k: nn } => {
            let mut dists: Vec<(T, usize)> = table.iter().map(|(x, c)| (sq_dist(x, feature), *c)).collect();
            // stable: equal distances keep table order
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
            let mut votes = vec![T::zero(); k];
            for &(_, c) in &dists[..*nn] {
                votes[c] += T::one();
            }
            let n = T::from_usize_lossy(*nn);
            votes.iter_mut().for_each(|v| *v /= n);
            votes
        }
        ReidState::Svm { scorers } => {
            let margins: Vec<T> = scorers.iter().map(|(w, b)| dot(w, feature) + *b).collect();
            softmax(&margins)
        }
        ReidState::Mlp { spec, params } => spec.predict(params, feature)?,
    })
}
