//! Matching: decide whether two anonymous deltas come from the same user.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reid::{train_reid_with, ReidConfig, ReidMethod, ReidModel};
use super::{predict_reid, AttackDataset, AttackRow};
use crate::error::{Error, Result};
use crate::fed::mix_seed;
use crate::metrics::{average_precision, increase_over_chance};
use crate::nn::{acc, affine, outer_acc, Head, ModelSpec, OptimizerConfig, OptimizerState, ParamVector, PROB_EPS};
use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    Chance,
    MlpProduct,
    Siamese,
}

impl MatchMethod {
    pub const ALL: [MatchMethod; 3] = [MatchMethod::Chance, MatchMethod::MlpProduct, MatchMethod::Siamese];

    pub fn name(self) -> &'static str {
        match self {
            MatchMethod::Chance => "chance",
            MatchMethod::MlpProduct => "mlp_product",
            MatchMethod::Siamese => "siamese",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiameseConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Balanced pairs drawn afresh every epoch; 0 means twice the training rows.
    pub pairs_per_epoch: usize,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        SiameseConfig {
            hidden: 128,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            pairs_per_epoch: 0,
        }
    }
}

/// Shared encoder `relu(w1 x + b1)`, distance `|e_i - e_j|`, output `sigmoid(w2 d + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Siamese<T> {
    pub dim: usize,
    pub hidden: usize,
    pub params: ParamVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatchModel<T> {
    Chance { seed: u64, dim: usize },
    MlpProduct(ReidModel<T>),
    Siamese(Siamese<T>),
}

impl<T> MatchModel<T> {
    pub fn method(&self) -> MatchMethod {
        match self {
            MatchModel::Chance { .. } => MatchMethod::Chance,
            MatchModel::MlpProduct(_) => MatchMethod::MlpProduct,
            MatchModel::Siamese(_) => MatchMethod::Siamese,
        }
    }
}

/// Indices into a row list plus the ground-truth label of the pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub same: bool,
}

/// `n / 2` same-user pairs and `n - n / 2` cross-user pairs, uniformly over users.
///
/// Positive pairs use two distinct rows when the user has more than one.
pub fn balanced_pairs(users: &[u32], n: usize, seed: u64) -> Result<Vec<Pair>> {
    let mut groups: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &u) in users.iter().enumerate() {
        groups.entry(u).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::invalid(format!(
            "pair sampling needs at least 2 users, got {}",
            groups.len()
        )));
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let multi: Vec<&Vec<usize>> = groups.iter().filter(|g| g.len() > 1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        let g = if multi.is_empty() {
            &groups[rng.random_range(0..groups.len())]
        } else {
            multi[rng.random_range(0..multi.len())]
        };
        let a = rng.random_range(0..g.len());
        let b = if g.len() > 1 {
            (a + rng.random_range(1..g.len())) % g.len()
        } else {
            a
        };
        out.push(Pair {
            i: g[a],
            j: g[b],
            same: true,
        });
    }
    for _ in n / 2..n {
        let ga = rng.random_range(0..groups.len());
        let gb = (ga + rng.random_range(1..groups.len())) % groups.len();
        out.push(Pair {
            i: groups[ga][rng.random_range(0..groups[ga].len())],
            j: groups[gb][rng.random_range(0..groups[gb].len())],
            same: false,
        });
    }
    Ok(out)
}

pub fn train_matcher<T: Scalar>(ds: &AttackDataset<T>, method: MatchMethod, seed: u64) -> Result<MatchModel<T>> {
    train_matcher_with(ds, method, &ReidConfig::default(), &SiameseConfig::default(), seed)
}

pub fn train_matcher_with<T: Scalar>(
    ds: &AttackDataset<T>,
    method: MatchMethod,
    reid: &ReidConfig,
    siamese: &SiameseConfig,
    seed: u64,
) -> Result<MatchModel<T>> {
    if ds.users.len() < 2 {
        return Err(Error::invalid(format!(
            "matching needs at least 2 users, got {}",
            ds.users.len()
        )));
    }
    Ok(match method {
        MatchMethod::Chance => MatchModel::Chance { seed, dim: ds.dim() },
        MatchMethod::MlpProduct => MatchModel::MlpProduct(train_reid_with(ds, ReidMethod::Mlp, reid, seed)?),
        MatchMethod::Siamese => MatchModel::Siamese(train_siamese(&ds.train, siamese, seed)?),
    })
}

fn train_siamese<T: Scalar>(rows: &[AttackRow<T>], cfg: &SiameseConfig, seed: u64) -> Result<Siamese<T>> {
    if cfg.batch_size < 1 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let dim = rows.first().map_or(0, |r| r.features.len());
    let spec = ModelSpec::mlp1(dim, cfg.hidden, 1, Head::SigmoidBce);
    let mut net = Siamese {
        dim,
        hidden: cfg.hidden,
        params: spec.init_params(seed),
    };
    let users: Vec<u32> = rows.iter().map(|r| r.user_id).collect();
    let per_epoch = if cfg.pairs_per_epoch == 0 {
        2 * rows.len()
    } else {
        cfg.pairs_per_epoch
    };
    let mut opt = OptimizerState::new(OptimizerConfig::rmsprop(cfg.learning_rate), &net.params);
    let mut iter = 0u64;
    for epoch in 0..cfg.epochs {
        let pairs = balanced_pairs(&users, per_epoch, mix_seed(seed, epoch as u64, 0x9a17))?;
        for batch in pairs.chunks(cfg.batch_size) {
            let grad = net.gradient(rows, batch);
            opt.step(&mut net.params, &grad, iter)?;
            iter += 1;
        }
    }
    Ok(net)
}

struct Pass<T> {
    pre_i: Vec<T>,
    pre_j: Vec<T>,
    diff: Vec<T>,
    p: T,
}

impl<T: Scalar> Siamese<T> {
    fn layer(&self, name: &str) -> &[T] {
        &self.params.layer(name).expect("siamese layout").values
    }

    fn pass(&self, xi: &[T], xj: &[T]) -> Pass<T> {
        let (w1, b1) = (self.layer("w1"), self.layer("b1"));
        let pre_i = affine(w1, Some(b1), xi, self.hidden);
        let pre_j = affine(w1, Some(b1), xj, self.hidden);
        let diff: Vec<T> = pre_i
            .iter()
            .zip(&pre_j)
            .map(|(&a, &b)| (a.max(T::zero()) - b.max(T::zero())).abs())
            .collect();
        let z = affine(self.layer("w2"), Some(self.layer("b2")), &diff, 1)[0];
        Pass {
            pre_i,
            pre_j,
            diff,
            p: sigmoid(z),
        }
    }

    pub fn probability(&self, xi: &[T], xj: &[T]) -> T {
        self.pass(xi, xj).p
    }

    /// Mean binary cross-entropy over `pairs` of rows.
    pub fn loss(&self, rows: &[AttackRow<T>], pairs: &[Pair]) -> T {
        let eps = T::lit(PROB_EPS);
        let total = pairs.iter().fold(T::zero(), |s, pr| {
            let p = self.pass(&rows[pr.i].features, &rows[pr.j].features).p.max(eps).min(T::one() - eps);
            s - if pr.same { p.ln() } else { (T::one() - p).ln() }
        });
        total / T::from_usize_lossy(pairs.len())
    }

    /// Gradient of [`Siamese::loss`].
    pub fn gradient(&self, rows: &[AttackRow<T>], pairs: &[Pair]) -> ParamVector<T> {
        let mut g = self.params.zeros_like();
        let scale = T::one() / T::from_usize_lossy(pairs.len());
        let w2 = self.layer("w2").to_vec();
        let zero = T::zero();
        for pr in pairs {
            let (xi, xj) = (&rows[pr.i].features, &rows[pr.j].features);
            let f = self.pass(xi, xj);
            let y = if pr.same { T::one() } else { zero };
            let dz = (f.p - y) * scale;
            let mut dpre_i = vec![zero; self.hidden];
            let mut dpre_j = vec![zero; self.hidden];
            for h in 0..self.hidden {
                let (ei, ej) = (f.pre_i[h].max(zero), f.pre_j[h].max(zero));
                let dd = dz * w2[h];
                let s = if ei > ej {
                    T::one()
                } else if ei < ej {
                    -T::one()
                } else {
                    zero
                };
                if f.pre_i[h] > zero {
                    dpre_i[h] = dd * s;
                }
                if f.pre_j[h] > zero {
                    dpre_j[h] = -dd * s;
                }
            }
            let layers = g.layers_mut();
            outer_acc(&mut layers[0].values, &dpre_i, xi);
            outer_acc(&mut layers[0].values, &dpre_j, xj);
            acc(&mut layers[1].values, &dpre_i);
            acc(&mut layers[1].values, &dpre_j);
            outer_acc(&mut layers[2].values, &[dz], &f.diff);
            layers[3].values[0] += dz;
        }
        g
    }
}

/// Match probability of a pair of represented deltas.
pub fn match_pair<T: Scalar>(model: &MatchModel<T>, fi: &[T], fj: &[T]) -> Result<T> {
    let dim = match model {
        MatchModel::Chance { dim, .. } => *dim,
        MatchModel::MlpProduct(m) => m.dim,
        MatchModel::Siamese(s) => s.dim,
    };
    for f in [fi, fj] {
        if f.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: f.len(),
            });
        }
    }
    Ok(match model {
        MatchModel::Chance { seed, .. } => {
            // a seeded hash of the inputs: deterministic, but uniform and unrelated to identity
            let h = fi
                .iter()
                .chain(fj)
                .enumerate()
                .fold(*seed, |h, (k, v)| mix_seed(h, v.as_f64().to_bits(), k as u64));
            T::lit((h >> 11) as f64 / (1u64 << 53) as f64)
        }
        MatchModel::MlpProduct(m) => {
            let (pi, pj) = (predict_reid(m, fi)?, predict_reid(m, fj)?);
            pi.iter().zip(&pj).map(|(&a, &b)| a * b).fold(T::zero(), T::max)
        }
        MatchModel::Siamese(s) => s.probability(fi, fj),
    })
}

/// Matching quality on balanced pairs drawn from `rows`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub ap: f64,
    /// Positive-pair prevalence.
    pub chance_ap: f64,
    pub increase_over_chance: f64,
}

pub fn evaluate_matcher<T: Scalar>(
    model: &MatchModel<T>,
    rows: &[AttackRow<T>],
    n_pairs: usize,
    seed: u64,
) -> Result<MatchScore> {
    let users: Vec<u32> = rows.iter().map(|r| r.user_id).collect();
    let pairs = balanced_pairs(&users, n_pairs, seed)?;
    let scores = pairs
        .iter()
        .map(|p| match_pair(model, &rows[p.i].features, &rows[p.j].features))
        .collect::<Result<Vec<T>>>()?;
    let truth: Vec<bool> = pairs.iter().map(|p| p.same).collect();
    let ap = average_precision(&scores, &truth)?;
    let chance = truth.iter().filter(|&&t| t).count() as f64 / truth.len() as f64;
    Ok(MatchScore {
        ap,
        chance_ap: chance,
        increase_over_chance: increase_over_chance(ap, chance)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::fixtures::separable;

    #[test]
    fn pair_balance() {
        let users: Vec<u32> = (0..50).map(|i| i % 7).collect();
        let pairs = balanced_pairs(&users, 1000, 3).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.same).count(), 500);
        assert_eq!(pairs.len(), 1000);
        for p in &pairs {
            assert_eq!(users[p.i] == users[p.j], p.same);
            if p.same {
                assert_ne!(p.i, p.j);
            }
        }
        assert!(balanced_pairs(&[1, 1, 1], 10, 0).is_err());
    }

    #[test]
    fn product_rule_arithmetic() {
        use crate::attacks::reid::{ReidState, ClassLabel};
        // a chance reid model over two users, with scores injected through the knn table
        let table = vec![(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 1)];
        let m = ReidModel {
            method: ReidMethod::Knn,
            classes: vec![ClassLabel::User(0), ClassLabel::User(1)],
            dim: 2,
            state: ReidState::Knn { table, k: 1 },
        };
        let mm = MatchModel::MlpProduct(m);
        assert_eq!(match_pair(&mm, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(match_pair(&mm, &[1.0, 0.0], &[0.9, 0.2]).unwrap(), 1.0);
        let pi = [0.8f64, 0.2];
        let pj = [0.6f64, 0.4];
        let p = pi.iter().zip(&pj).map(|(a, b)| a * b).fold(0.0, f64::max);
        assert!((p - 0.48).abs() < 1e-12);
    }

    #[test]
    fn chance_matcher_is_deterministic_and_uniform() {
        let ds = separable(6, 20, 6, 0.3);
        let m = train_matcher(&ds, MatchMethod::Chance, 4).unwrap();
        let a = match_pair(&m, &ds.test[0].features, &ds.test[1].features).unwrap();
        assert_eq!(a, match_pair(&m, &ds.test[0].features, &ds.test[1].features).unwrap());
        let s = evaluate_matcher(&m, &ds.test, 2000, 9).unwrap();
        assert!((s.ap - 0.5).abs() < 0.05, "{}", s.ap);
    }

    #[test]
    fn siamese_range_symmetry_and_identity() {
        let ds = separable(4, 10, 5, 0.3);
        let cfg = SiameseConfig {
            epochs: 2,
            ..Default::default()
        };
        let m = train_matcher_with(&ds, MatchMethod::Siamese, &ReidConfig::default(), &cfg, 1).unwrap();
        let MatchModel::Siamese(s) = &m else { unreachable!() };
        let base = sigmoid(s.params.layer("b2").unwrap().values[0]);
        for a in &ds.test {
            for b in ds.test.iter().take(8) {
                let p = match_pair(&m, &a.features, &b.features).unwrap();
                let q = match_pair(&m, &b.features, &a.features).unwrap();
                assert!(p > 0.0 && p < 1.0);
                assert!((p - q).abs() <= 1e-6);
            }
            assert!((match_pair(&m, &a.features, &a.features).unwrap() - base).abs() < 1e-15);
        }
    }

    #[test]
    fn siamese_gradient_matches_finite_differences() {
        let ds = separable(3, 4, 4, 0.5);
        let spec = ModelSpec::mlp1(4, 6, 1, Head::SigmoidBce);
        let mut net = Siamese {
            dim: 4,
            hidden: 6,
            params: spec.init_params::<f64>(5),
        };
        // push the encoder biases away from zero so no relu sits on its kink
        net.params.layer_mut("b1").unwrap().values.iter_mut().for_each(|v| *v = 0.3);
        let users: Vec<u32> = ds.train.iter().map(|r| r.user_id).collect();
        let pairs = balanced_pairs(&users, 8, 2).unwrap();
        let g = net.gradient(&ds.train, &pairs);
        let h = 1e-6;
        for (li, layer) in net.params.layers().iter().enumerate() {
            for k in 0..layer.values.len() {
                let mut plus = net.clone();
                plus.params.layers_mut()[li].values[k] += h;
                let mut minus = net.clone();
                minus.params.layers_mut()[li].values[k] -= h;
                let fd = (plus.loss(&ds.train, &pairs) - minus.loss(&ds.train, &pairs)) / (2.0 * h);
                let an = g.layers()[li].values[k];
                assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()), "{} {k}: {fd} vs {an}", layer.name);
            }
        }
    }

    #[test]
    fn separable_fixture_matches_well() {
        let ds = separable(2, 20, 6, 0.1);
        for method in [MatchMethod::MlpProduct, MatchMethod::Siamese] {
            let m = train_matcher(&ds, method, 2).unwrap();
            let s = evaluate_matcher(&m, &ds.test, 400, 5).unwrap();
            assert!(s.ap >= 0.9, "{method:?}: {}", s.ap);
        }
    }

    #[test]
    fn rejects_single_user_and_bad_dims() {
        let mut ds = separable(2, 3, 4, 0.1);
        let m = train_matcher(&ds, MatchMethod::Chance, 0).unwrap();
        assert!(match_pair(&m, &[1.0], &[1.0, 0.0, 0.0, 0.0]).is_err());
        ds.users.truncate(1);
        assert!(train_matcher(&ds, MatchMethod::Siamese, 0).is_err());
    }
}
