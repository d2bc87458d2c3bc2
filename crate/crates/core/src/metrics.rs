//! Average precision, mean per-label AP, top-k accuracy and increase over chance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rows of per-label scores with the true label of each row.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoredPredictions<T> {
    pub rows: Vec<(Vec<T>, usize)>,
}

impl<T: Scalar> ScoredPredictions<T> {
    pub fn new(rows: Vec<(Vec<T>, usize)>) -> Result<Self> {
        if let Some((first, _)) = rows.first() {
            let n = first.len();
            for (scores, label) in &rows {
                if scores.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        actual: scores.len(),
                    });
                }
                if *label >= n {
                    return Err(Error::invalid(format!("label {label} out of range 0..{n}")));
                }
            }
        }
        Ok(ScoredPredictions { rows })
    }

    pub fn n_labels(&self) -> usize {
        self.rows.first().map_or(0, |(s, _)| s.len())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Step-wise average precision `sum_n (R_n - R_{n-1}) P_n` over the ranking by
/// descending score. Equal scores keep their original order.
pub fn average_precision<T: Scalar>(scores: &[T], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: positives.len(),
        });
    }
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps index order among ties
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total_pos as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    /// `None` for labels without any positive row.
    pub per_label: Vec<Option<f64>>,
    pub mean: f64,
    pub excluded: Vec<usize>,
}

/// One-vs-rest AP per label from that label's score column, averaged over the
/// labels that have at least one positive row.
pub fn mean_ap<T: Scalar>(preds: &ScoredPredictions<T>, n_labels: usize) -> Result<MeanAp> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if preds.n_labels() != n_labels {
        return Err(Error::DimensionMismatch {
            expected: n_labels,
            actual: preds.n_labels(),
        });
    }
    let mut per_label = Vec::with_capacity(n_labels);
    let mut excluded = Vec::new();
    let mut column = Vec::with_capacity(preds.len());
    let mut truth = Vec::with_capacity(preds.len());
    for label in 0..n_labels {
        column.clear();
        truth.clear();
        for (scores, y) in &preds.rows {
            column.push(scores[label]);
            truth.push(*y == label);
        }
        if truth.iter().any(|&t| t) {
            per_label.push(Some(average_precision(&column, &truth)?));
        } else {
            per_label.push(None);
            excluded.push(label);
        }
    }
    let included: Vec<f64> = per_label.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::invalid("no label has a positive row"));
    }
    let mean = included.iter().sum::<f64>() / included.len() as f64;
    Ok(MeanAp {
        per_label,
        mean,
        excluded,
    })
}

/// Chance-level mean AP: the mean positive prevalence over labels that occur.
pub fn chance_mean_ap(labels: &[usize], n_labels: usize) -> f64 {
    let mut counts = vec![0usize; n_labels];
    for &l in labels {
        counts[l] += 1;
    }
    let present: Vec<f64> = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| c as f64 / labels.len() as f64)
        .collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

/// Fraction of rows whose true label is among the `k` highest scores.
/// Among equal scores the lower label index ranks first.
pub fn topk_accuracy<T: Scalar>(preds: &ScoredPredictions<T>, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let hits = preds
        .rows
        .iter()
        .filter(|(scores, y)| {
            let s = scores[*y];
            let rank = scores
                .iter()
                .enumerate()
                .filter(|&(i, &v)| v > s || (v == s && i < *y))
                .count();
            rank < k
        })
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `ap / chance_ap`, displayed as "N×".
pub fn increase_over_chance(ap: f64, chance_ap: f64) -> Result<f64> {
    if !(chance_ap > 0.0) {
        return Err(Error::invalid("chance AP must be positive"));
    }
    Ok(ap / chance_ap)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct evaluation of `sum_n (R_n - R_{n-1}) P_n` recounting every prefix.
    fn ap_oracle(scores: &[f64], pos: &[bool]) -> f64 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let total = pos.iter().filter(|&&p| p).count() as f64;
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for n in 1..=order.len() {
            let tp = order[..n].iter().filter(|&&i| pos[i]).count() as f64;
            let precision = tp / n as f64;
            let recall = tp / total;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn hand_case() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn all_positive_is_one() {
        assert_eq!(average_precision(&[0.1, 0.5, 0.2], &[true; 3]).unwrap(), 1.0);
    }

    #[test]
    fn zero_positives_rejected() {
        assert!(average_precision(&[0.1, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn ties_keep_original_order() {
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn mean_ap_perfect_and_fixture() {
        let perfect = ScoredPredictions::new(vec![
            (vec![1.0, 0.0], 0),
            (vec![0.0, 1.0], 1),
            (vec![1.0, 0.0], 0),
        ])
        .unwrap();
        assert_eq!(mean_ap(&perfect, 2).unwrap().mean, 1.0);

        // label 0 column [0.6, 0.7, 0.2] with truth [1, 0, 1]: ranking 1,0,2 -> (1/2 + 2/3)/2
        // label 1 column [0.4, 0.3, 0.8] with truth [0, 1, 0]: ranking 2,0,1 -> 1/3
        let fx = ScoredPredictions::new(vec![
            (vec![0.6, 0.4], 0),
            (vec![0.7, 0.3], 1),
            (vec![0.2, 0.8], 0),
        ])
        .unwrap();
        let m = mean_ap(&fx, 2).unwrap();
        let l0 = (0.5 + 2.0 / 3.0) / 2.0;
        let l1 = 1.0 / 3.0;
        assert!((m.per_label[0].unwrap() - l0).abs() < 1e-12);
        assert!((m.per_label[1].unwrap() - l1).abs() < 1e-12);
        assert!((m.mean - (l0 + l1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mean_ap_excludes_absent_labels() {
        let p = ScoredPredictions::new(vec![(vec![0.9, 0.1, 0.0], 0), (vec![0.2, 0.8, 0.0], 1)]).unwrap();
        let m = mean_ap(&p, 3).unwrap();
        assert_eq!(m.excluded, vec![2]);
        assert_eq!(m.mean, 1.0);
    }

    #[test]
    fn constant_scores_give_prevalence_on_average() {
        // with ties broken by row order, constant scores rank rows in order; averaging
        // over labels whose positives are spread uniformly gives roughly the prevalence
        let u = 5;
        let rows: Vec<_> = (0..500).map(|i| (vec![0.0; u], (i * 7) % u)).collect();
        let p = ScoredPredictions::new(rows).unwrap();
        let m = mean_ap(&p, u).unwrap();
        assert!((m.mean - 0.2).abs() < 0.02, "{}", m.mean);
        assert!((chance_mean_ap(&p.rows.iter().map(|r| r.1).collect::<Vec<_>>(), u) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn topk_examples() {
        let p = ScoredPredictions::new(vec![(vec![0.1, 0.5, 0.4], 1)]).unwrap();
        assert_eq!(topk_accuracy(&p, 1).unwrap(), 1.0);
        let p = ScoredPredictions::new(vec![(vec![0.1, 0.5, 0.4], 2)]).unwrap();
        assert_eq!(topk_accuracy(&p, 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&p, 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&p, 3).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&p, 7).unwrap(), 1.0);
        assert!(topk_accuracy(&p, 0).is_err());
    }

    #[test]
    fn increase_over_chance_examples() {
        assert!((increase_over_chance(0.537, 1.0 / 327.0).unwrap() - 175.6).abs() < 0.1);
        assert!((increase_over_chance(0.91, 1.0 / 53.0).unwrap() - 48.2).abs() < 0.1);
        assert_eq!(increase_over_chance(0.2, 0.2).unwrap(), 1.0);
        assert!(increase_over_chance(0.2, 0.0).is_err());
    }

    #[test]
    fn spearman_basic() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matches_direct_oracle(
            rows in prop::collection::vec((0u8..20, any::<bool>()), 1..60)
        ) {
            let scores: Vec<f64> = rows.iter().map(|r| r.0 as f64 / 20.0).collect();
            let mut pos: Vec<bool> = rows.iter().map(|r| r.1).collect();
            pos[0] = true;
            let ap = average_precision(&scores, &pos).unwrap();
            prop_assert!((ap - ap_oracle(&scores, &pos)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn invariant_under_monotone_transform(
            rows in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 1..40)
        ) {
            let scores: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let mut pos: Vec<bool> = rows.iter().map(|r| r.1).collect();
            pos[0] = true;
            let warped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
            let a = average_precision(&scores, &pos).unwrap();
            let b = average_precision(&warped, &pos).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn topk_monotone_in_k(
            rows in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 6), 0usize..6), 1..30)
        ) {
            let p = ScoredPredictions::new(rows).unwrap();
            let accs: Vec<f64> = (1..=6).map(|k| topk_accuracy(&p, k).unwrap()).collect();
            prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(accs[5], 1.0);
        }
    }
}
