//! The adversary: re-identification and matching over logged deltas, their
//! open-world variants, a data-space baseline, and per-class bias profiles.

mod dataspace;
mod matching;
mod openworld;
mod profile;
mod reid;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{DeltaRecord, Role};
use crate::metrics::{chance_mean_ap, increase_over_chance, mean_ap, topk_accuracy, ScoredPredictions};
use crate::scalar::Scalar;
use crate::store::{filter_records, represent_delta, RecordFilter, ReprConfig};

pub use dataspace::{dataspace_reid, mean_sets, DataspaceMode};
pub use matching::{
    balanced_pairs, evaluate_matcher, match_pair, train_matcher, train_matcher_with, MatchMethod, MatchModel,
    MatchScore, Pair, Siamese, SiameseConfig,
};
pub use openworld::{evaluate_openworld, open_world_split, train_reid_openworld, OpenWorldSplit};
pub use profile::{
    bias_consistency, class_bias_profile, consistency_by_user, layer_bias_profile, user_profiles, UserConsistency,
};
pub use reid::{predict_reid, train_reid, train_reid_with, ClassLabel, ReidConfig, ReidMethod, ReidModel, ReidState};

/// One attack row: a represented delta and the user that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow<T> {
    pub features: Vec<T>,
    pub user_id: u32,
    pub round: usize,
}

/// Shadow-prior rows to train on, anonymous rows to attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackDataset<T> {
    pub train: Vec<AttackRow<T>>,
    pub test: Vec<AttackRow<T>>,
    /// Sorted distinct users with training rows.
    pub users: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackFilters {
    pub train: RecordFilter,
    pub test: RecordFilter,
    /// Reject test users that have no training rows.
    pub closed_world: bool,
}

impl Default for AttackFilters {
    fn default() -> Self {
        AttackFilters {
            train: RecordFilter::default(),
            test: RecordFilter::default(),
            closed_world: true,
        }
    }
}

pub fn build_attack_dataset<T: Scalar>(
    log: &[DeltaRecord<T>],
    repr: &ReprConfig,
    filters: &AttackFilters,
) -> Result<AttackDataset<T>> {
    let rows = |role: Role, filter: &RecordFilter| -> Result<Vec<AttackRow<T>>> {
        let f = RecordFilter {
            roles: Some([role].into()),
            ..filter.clone()
        };
        filter_records(log, &f)?
            .iter()
            .map(|r| {
                Ok(AttackRow {
                    features: represent_delta(r, repr)?,
                    user_id: r.user_id,
                    round: r.round,
                })
            })
            .collect()
    };
    let train = rows(Role::ShadowPrior, &filters.train)?;
    let test = rows(Role::Anonymous, &filters.test)?;
    if train.is_empty() {
        return Err(Error::Empty("shadow-prior records"));
    }
    if test.is_empty() {
        return Err(Error::Empty("anonymous records"));
    }
    let users: BTreeSet<u32> = train.iter().map(|r| r.user_id).collect();
    if filters.closed_world {
        if let Some(r) = test.iter().find(|r| !users.contains(&r.user_id)) {
            return Err(Error::invalid(format!(
                "closed world: user {} has anonymous records but no shadow-prior records",
                r.user_id
            )));
        }
    }
    Ok(AttackDataset {
        train,
        test,
        users: users.into_iter().collect(),
    })
}

impl<T: Scalar> AttackDataset<T> {
    pub fn dim(&self) -> usize {
        self.train.first().map_or(0, |r| r.features.len())
    }

    /// Keeps only rows whose round lies in `[lo, hi)`, separately for each side.
    pub fn restrict_rounds(&self, train: (usize, usize), test: (usize, usize)) -> Self {
        let keep = |rows: &[AttackRow<T>], (lo, hi): (usize, usize)| -> Vec<AttackRow<T>> {
            rows.iter().filter(|r| r.round >= lo && r.round < hi).cloned().collect()
        };
        let train = keep(&self.train, train);
        let users: BTreeSet<u32> = train.iter().map(|r| r.user_id).collect();
        AttackDataset {
            train,
            test: keep(&self.test, test),
            users: users.into_iter().collect(),
        }
    }
}

/// Headline numbers for one attack evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub mean_ap: f64,
    pub chance_ap: f64,
    pub increase_over_chance: f64,
    pub top1: f64,
    pub top5: f64,
}

impl AttackScore {
    pub fn from_predictions<T: Scalar>(preds: &ScoredPredictions<T>) -> Result<Self> {
        let n = preds.n_labels();
        let ap = mean_ap(preds, n)?;
        let labels: Vec<usize> = preds.rows.iter().map(|(_, y)| *y).collect();
        let chance = chance_mean_ap(&labels, n);
        Ok(AttackScore {
            mean_ap: ap.mean,
            chance_ap: chance,
            increase_over_chance: increase_over_chance(ap.mean, chance)?,
            top1: topk_accuracy(preds, 1)?,
            top5: topk_accuracy(preds, 5.min(n))?,
        })
    }
}

/// Scores every test row of a closed-world dataset.
pub fn evaluate_reid<T: Scalar>(model: &ReidModel<T>, rows: &[AttackRow<T>]) -> Result<AttackScore> {
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let label = model.class_of(r.user_id).ok_or_else(|| {
            Error::invalid(format!("user {} is not among the model's classes", r.user_id))
        })?;
        out.push((predict_reid(model, &r.features)?, label));
    }
    AttackScore::from_predictions(&ScoredPredictions::new(out)?)
}

/// How the adversary attacks a log: which layer, and the attack-model settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecipe {
    pub repr: ReprConfig,
    pub reid: ReidConfig,
    pub seed: u64,
}

/// Closed-world re-identification of every anonymous record with `method`.
pub fn closed_world_attack<T: Scalar>(
    log: &[DeltaRecord<T>],
    recipe: &AttackRecipe,
    method: ReidMethod,
) -> Result<AttackScore> {
    let ds = build_attack_dataset(log, &recipe.repr, &AttackFilters::default())?;
    let model = train_reid_with(&ds, method, &recipe.reid, recipe.seed)?;
    evaluate_reid(&model, &ds.test)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// `per_user` noisy rows around a user-specific unit direction, on both sides.
    pub fn separable(users: u32, per_user: usize, dim: usize, noise: f64) -> AttackDataset<f64> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, noise).unwrap();
        let mut side = |round0: usize| {
            let mut rows = Vec::new();
            for u in 0..users {
                for i in 0..per_user {
                    let mut x: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
                    x[u as usize % dim] += 1.0;
                    let n = crate::scalar::l2_norm(&x);
                    x.iter_mut().for_each(|v| *v /= n);
                    rows.push(AttackRow {
                        features: x,
                        user_id: u,
                        round: round0 + i,
                    });
                }
            }
            rows
        };
        let train = side(1);
        let test = side(1);
        AttackDataset {
            train,
            test,
            users: (0..users).collect(),
        }
    }
}
