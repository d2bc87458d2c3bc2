//! Per-class bias profiles of final-layer deltas.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fed::{DeltaRecord, Role};
use crate::nn::Layer;
use crate::scalar::{cosine, Scalar};

/// Column-wise L2 norms of a row-major `d x k` matrix.
pub fn class_bias_profile<T: Scalar>(delta_fc: &[T], d: usize, k: usize) -> Result<Vec<T>> {
    if delta_fc.len() != d * k {
        return Err(Error::ShapeMismatch(format!(
            "{} values cannot form a {d}x{k} matrix",
            delta_fc.len()
        )));
    }
    Ok((0..k)
        .map(|c| (0..d).map(|r| delta_fc[r * k + c].powi(2)).sum::<T>().sqrt())
        .collect())
}

/// Profile of a stored `[classes, inputs]` weight layer: the norm of each class row.
pub fn layer_bias_profile<T: Scalar>(layer: &Layer<T>) -> Result<Vec<T>> {
    match layer.shape.as_slice() {
        // the transpose of a [k, d] row-major layer is a [d, k] matrix
        &[k, d] => {
            let mut t = vec![T::zero(); d * k];
            for c in 0..k {
                for r in 0..d {
                    t[r * k + c] = layer.values[c * d + r];
                }
            }
            class_bias_profile(&t, d, k)
        }
        s => Err(Error::ShapeMismatch(format!("layer {} has shape {s:?}, expected 2-D", layer.name))),
    }
}

/// Cosine similarity of two profiles.
pub fn bias_consistency<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(cosine(a, b))
}

/// Per-user profile of the summed `layer` deltas of one role.
pub fn user_profiles<T: Scalar>(log: &[DeltaRecord<T>], layer: &str, role: Role) -> Result<BTreeMap<u32, Vec<T>>> {
    let mut sums: BTreeMap<u32, Layer<T>> = BTreeMap::new();
    for r in log.iter().filter(|r| r.role == role) {
        let l = r.delta.layer(layer).ok_or_else(|| Error::UnknownLayer(layer.to_owned()))?;
        match sums.get_mut(&r.user_id) {
            Some(acc) => acc.values.iter_mut().zip(&l.values).for_each(|(a, &v)| *a += v),
            None => {
                sums.insert(r.user_id, l.clone());
            }
        }
    }
    sums.into_iter().map(|(u, l)| Ok((u, layer_bias_profile(&l)?))).collect()
}

/// Consistency between each user's prior and private profiles, next to the
/// mean consistency of the user's prior profile with every other user's
/// private profile.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UserConsistency {
    pub user_id: u32,
    pub own: f64,
    pub cross: f64,
}

pub fn consistency_by_user<T: Scalar>(log: &[DeltaRecord<T>], layer: &str) -> Result<Vec<UserConsistency>> {
    let prior = user_profiles(log, layer, Role::ShadowPrior)?;
    let private = user_profiles(log, layer, Role::Anonymous)?;
    let mut out = Vec::new();
    for (u, p) in &prior {
        let Some(own) = private.get(u) else { continue };
        let others: Vec<f64> = private
            .iter()
            .filter(|(v, _)| *v != u)
            .map(|(_, q)| bias_consistency(p, q).map(|c| c.as_f64()))
            .collect::<Result<_>>()?;
        out.push(UserConsistency {
            user_id: *u,
            own: bias_consistency(p, own)?.as_f64(),
            cross: if others.is_empty() {
                f64::NAN
            } else {
                others.iter().sum::<f64>() / others.len() as f64
            },
        });
    }
    Ok(out)
}
