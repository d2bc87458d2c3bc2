//! Open world: some test users have no prior data at the adversary.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reid::{fit_labeled, ClassLabel, ReidConfig, ReidMethod, ReidModel};
use super::{predict_reid, AttackDataset, AttackRow, AttackScore};
use crate::error::{Error, Result};
use crate::metrics::ScoredPredictions;
use crate::scalar::Scalar;

/// Seen users are known to the adversary, unseen users are not, and holdout
/// users stand in for the unseen ones when training the `unseen` class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenWorldSplit {
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
    pub holdout: Vec<u32>,
}

impl OpenWorldSplit {
    /// Test-time label of a user; holdout users never appear at test time.
    pub fn label(&self, user_id: u32) -> Option<ClassLabel> {
        if self.seen.binary_search(&user_id).is_ok() {
            Some(ClassLabel::User(user_id))
        } else if self.unseen.binary_search(&user_id).is_ok() {
            Some(ClassLabel::Unseen)
        } else {
            None
        }
    }
}

pub fn open_world_split(users: &[u32], seen_fraction: f64, seed: u64) -> Result<OpenWorldSplit> {
    let mut all = users.to_vec();
    all.sort_unstable();
    all.dedup();
    if all.len() < 3 {
        return Err(Error::invalid(format!("open world needs at least 3 users, got {}", all.len())));
    }
    if !(0.0..=1.0).contains(&seen_fraction) {
        return Err(Error::invalid(format!("seen_fraction {seen_fraction} outside [0, 1]")));
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_holdout = (all.len() as f64 / 3.0).round() as usize;
    let rest = all.len() - n_holdout;
    let n_seen = (seen_fraction * rest as f64).round() as usize;
    let mut holdout = all[..n_holdout].to_vec();
    let mut seen = all[n_holdout..n_holdout + n_seen].to_vec();
    let mut unseen = all[n_holdout + n_seen..].to_vec();
    holdout.sort_unstable();
    seen.sort_unstable();
    unseen.sort_unstable();
    Ok(OpenWorldSplit { seen, unseen, holdout })
}

/// MLP over the seen users plus one `unseen` class trained on holdout rows.
pub fn train_reid_openworld<T: Scalar>(
    ds: &AttackDataset<T>,
    split: &OpenWorldSplit,
    cfg: &ReidConfig,
    seed: u64,
) -> Result<ReidModel<T>> {
    if split.holdout.is_empty() {
        return Err(Error::Empty("holdout users"));
    }
    let mut classes: Vec<ClassLabel> = split.seen.iter().map(|&u| ClassLabel::User(u)).collect();
    classes.push(ClassLabel::Unseen);
    let unseen_idx = classes.len() - 1;
    let rows: Vec<(&[T], usize)> = ds
        .train
        .iter()
        .filter_map(|r| {
            if let Ok(i) = split.seen.binary_search(&r.user_id) {
                Some((r.features.as_slice(), i))
            } else if split.holdout.binary_search(&r.user_id).is_ok() {
                Some((r.features.as_slice(), unseen_idx))
            } else {
                None
            }
        })
        .collect();
    fit_labeled(classes, &rows, ds.dim(), ReidMethod::Mlp, cfg, seed)
}

/// Scores test rows of seen and unseen users; a row of an unseen user is
/// correct when classified as `unseen`.
pub fn evaluate_openworld<T: Scalar>(
    model: &ReidModel<T>,
    split: &OpenWorldSplit,
    rows: &[AttackRow<T>],
) -> Result<AttackScore> {
    let mut out = Vec::new();
    for r in rows {
        let Some(label) = split.label(r.user_id) else { continue };
        let idx = model
            .class_index(label)
            .ok_or_else(|| Error::invalid(format!("model has no class for {label:?}")))?;
        out.push((predict_reid(model, &r.features)?, idx));
    }
    if out.is_empty() {
        return Err(Error::Empty("open-world test rows"));
    }
    AttackScore::from_predictions(&ScoredPredictions::new(out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::fixtures::separable;

    #[test]
    fn split_arithmetic() {
        let users: Vec<u32> = (0..9).collect();
        let s = open_world_split(&users, 0.5, 1).unwrap();
        assert_eq!((s.holdout.len(), s.seen.len(), s.unseen.len()), (3, 3, 3));
        let s0 = open_world_split(&users, 0.0, 1).unwrap();
        assert!(s0.seen.is_empty());
        let mut all: Vec<u32> = s.seen.iter().chain(&s.unseen).chain(&s.holdout).copied().collect();
        all.sort();
        assert_eq!(all, users);
        assert!(open_world_split(&users[..2], 0.5, 0).is_err());
    }

    #[test]
    fn unseen_class_protocol() {
        let ds = separable(9, 8, 9, 0.05);
        let split = open_world_split(&ds.users, 0.5, 2).unwrap();
        let m = train_reid_openworld(&ds, &split, &ReidConfig::default(), 0).unwrap();
        assert_eq!(m.classes.len(), split.seen.len() + 1);
        assert_eq!(*m.classes.last().unwrap(), ClassLabel::Unseen);
        let u = split.unseen[0];
        assert_eq!(split.label(u), Some(ClassLabel::Unseen));
        assert_eq!(split.label(split.holdout[0]), None);
        let s = evaluate_openworld(&m, &split, &ds.test).unwrap();
        assert!(s.mean_ap.is_finite());
        let empty = OpenWorldSplit {
            holdout: vec![],
            ..split
        };
        assert!(train_reid_openworld(&ds, &empty, &ReidConfig::default(), 0).is_err());
    }
}
