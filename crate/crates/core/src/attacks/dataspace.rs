//! Re-identification from raw example features instead of deltas.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reid::{train_reid_with, ReidConfig, ReidMethod, ReidModel};
use super::{evaluate_reid, AttackDataset, AttackRow, AttackScore};
use crate::data::{DatasetBundle, Example};
use crate::error::{Error, Result};
use crate::fed::mix_seed;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DataspaceMode {
    Single,
    /// Each row is the mean feature of `set_size` examples of one user.
    Set { set_size: usize },
}

/// One row per example: the example itself averaged with `set_size - 1`
/// further examples of the same user, drawn without replacement when the
/// user has enough data and with replacement otherwise.
pub fn mean_sets<T: Scalar>(examples: &[&Example<T>], set_size: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if set_size < 1 {
        return Err(Error::invalid("set_size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = examples.len();
    Ok(examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut sum = e.x.clone();
            let extra = set_size - 1;
            let picks: Vec<usize> = if extra == 0 {
                Vec::new()
            } else if extra < n {
                // others, without replacement
                rand::seq::index::sample(&mut rng, n - 1, extra)
                    .into_iter()
                    .map(|j| if j >= i { j + 1 } else { j })
                    .collect()
            } else {
                (0..extra).map(|_| rng.random_range(0..n)).collect()
            };
            for j in picks {
                for (s, &v) in sum.iter_mut().zip(&examples[j].x) {
                    *s += v;
                }
            }
            let k = T::from_usize_lossy(set_size);
            sum.iter_mut().for_each(|s| *s /= k);
            sum
        })
        .collect())
}

fn rows<'a, T: Scalar>(
    bundle: &'a DatasetBundle<T>,
    pick: impl Fn(usize) -> Vec<&'a Example<T>>,
    set_size: usize,
    seed: u64,
) -> Result<Vec<AttackRow<T>>> {
    let mut out = Vec::new();
    for (k, u) in bundle.users.iter().enumerate() {
        let ex = pick(k);
        for x in mean_sets(&ex, set_size, mix_seed(seed, k as u64, u.user_id() as u64))? {
            out.push(AttackRow {
                features: x,
                user_id: u.user_id(),
                round: 0,
            });
        }
    }
    Ok(out)
}

/// Trains the re-identification MLP on prior examples and attacks the private
/// examples.
pub fn dataspace_reid<T: Scalar>(
    bundle: &DatasetBundle<T>,
    mode: DataspaceMode,
    cfg: &ReidConfig,
    seed: u64,
) -> Result<(ReidModel<T>, AttackScore)> {
    let set_size = match mode {
        DataspaceMode::Single => 1,
        DataspaceMode::Set { set_size } => set_size,
    };
    let train = rows(bundle, |k| bundle.users[k].prior.iter().collect(), set_size, seed)?;
    let test = rows(bundle, |k| bundle.users[k].private.iter().collect(), set_size, seed ^ 0xd5)?;
    let ds = AttackDataset {
        train,
        test,
        users: bundle.user_ids(),
    };
    let model = train_reid_with(&ds, ReidMethod::Mlp, cfg, seed)?;
    let score = evaluate_reid(&model, &ds.test)?;
    Ok((model, score))
}
