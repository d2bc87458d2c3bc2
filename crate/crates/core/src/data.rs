//! Synthetic selection-biased user world.
//!
//! Every user has a Dirichlet-distributed preference over classes that drifts
//! linearly in time, plus album-level preferences scattered around it. An
//! example of class `c` is the class prototype `mu_c` plus isotropic Gaussian
//! noise, so the only thing distinguishing users is *which* classes they
//! photograph and how often.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Sample, TargetRef};
use crate::scalar::{sq_dist, Scalar};

/// `user_id` carried by background examples.
pub const BACKGROUND_USER: u32 = u32::MAX;
const BACKGROUND_ID_BASE: u64 = 1 << 62;
/// Weight of the album preference in the per-example class mixture.
const ALBUM_WEIGHT: f64 = 0.5;
/// Dirichlet concentration of album preferences around the user preference.
const ALBUM_CONCENTRATION: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example<T> {
    /// Globally unique within a world; used for disjointness checks.
    pub id: u64,
    pub x: Vec<T>,
    pub y: usize,
    pub timestamp: f64,
    pub album_id: u32,
    pub user_id: u32,
}

impl<T> Sample<T> for Example<T> {
    fn features(&self) -> &[T] {
        &self.x
    }
    fn target(&self) -> TargetRef<'_, T> {
        TargetRef::Class(self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: u32,
    pub pref_start: Vec<f64>,
    pub pref_end: Vec<f64>,
    pub drift: f64,
    pub albums: Vec<Vec<f64>>,
}

impl UserProfile {
    /// `(1 - t*drift) * pref_start + t*drift * pref_end`.
    pub fn preference_at(&self, t: f64) -> Vec<f64> {
        let w = t * self.drift;
        self.pref_start
            .iter()
            .zip(&self.pref_end)
            .map(|(&a, &b)| (1.0 - w) * a + w * b)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub users: usize,
    pub classes: usize,
    pub features: usize,
    pub n_per_user: usize,
    /// Dirichlet concentration; small values give strongly biased users.
    pub concentration: f64,
    pub noise: f64,
    pub drift: f64,
    pub albums_per_user: usize,
    pub background_size: usize,
    /// Share of generated examples held out as the global test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            users: 20,
            classes: 10,
            features: 32,
            n_per_user: 200,
            concentration: 0.1,
            noise: 0.3,
            drift: 0.2,
            albums_per_user: 5,
            background_size: 4000,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::invalid(msg)) };
        check(self.users >= 2, "users must be at least 2")?;
        check(self.classes >= 2, "classes must be at least 2")?;
        check(self.features >= 1, "features must be positive")?;
        check(self.n_per_user >= 4, "n_per_user must be at least 4")?;
        check(
            self.concentration > 0.0 && self.concentration.is_finite(),
            "concentration must be positive",
        )?;
        check(self.noise > 0.0 && self.noise.is_finite(), "noise must be positive")?;
        check((0.0..=1.0).contains(&self.drift), "drift must be in [0, 1]")?;
        check(self.albums_per_user >= 1, "albums_per_user must be positive")?;
        check(self.background_size >= 1, "background_size must be positive")?;
        check(
            (0.0..1.0).contains(&self.test_fraction),
            "test_fraction must be in [0, 1)",
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorKind {
    Random,
    Chrono,
    Photoset,
    /// Curated background examples of one class stand in for the user's prior.
    Profile { class: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserData<T> {
    pub profile: UserProfile,
    /// All of the user's own (non-test) examples in generation order.
    pub data: Vec<Example<T>>,
    pub prior: Vec<Example<T>>,
    pub private: Vec<Example<T>>,
}

impl<T> UserData<T> {
    pub fn user_id(&self) -> u32 {
        self.profile.user_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle<T> {
    pub config: WorldConfig,
    pub prototypes: Vec<Vec<T>>,
    pub users: Vec<UserData<T>>,
    pub test: Vec<Example<T>>,
    pub background: Vec<Example<T>>,
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Dirichlet sample built from Gamma draws; falls back to the normalized
/// concentration vector when every draw underflows.
pub(crate) fn dirichlet(rng: &mut impl Rng, alpha: &[f64]) -> Vec<f64> {
    let draws: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            Gamma::new(a.max(1e-12), 1.0)
                .expect("positive gamma shape")
                .sample(rng)
        })
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|d| d / total).collect()
    } else {
        let s: f64 = alpha.iter().sum();
        alpha.iter().map(|a| a / s).collect()
    }
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn emit<T: Scalar>(
    rng: &mut impl Rng,
    prototypes: &[Vec<f64>],
    class: usize,
    noise: f64,
) -> Vec<T> {
    prototypes[class]
        .iter()
        .map(|&m| T::lit(m + noise * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Generates the full world: prototypes, users, a test split, background data,
/// and a default `random` prior split with fraction one half.
pub fn gen_world<T: Scalar>(cfg: &WorldConfig) -> Result<DatasetBundle<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes_f64: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| loop {
            let v = gaussian_vec(&mut rng, cfg.features, 1.0);
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-9 {
                break v.into_iter().map(|a| a / n).collect();
            }
        })
        .collect();

    let n_test =
        ((cfg.n_per_user as f64) * cfg.test_fraction / (1.0 - cfg.test_fraction)).round() as usize;
    let n_total = cfg.n_per_user + n_test;
    let beta = vec![cfg.concentration; cfg.classes];
    let mut next_id = 0u64;
    let mut users = Vec::with_capacity(cfg.users);
    let mut test = Vec::new();

    for u in 0..cfg.users {
        let user_id = u as u32;
        let pref_start = dirichlet(&mut rng, &beta);
        let pref_end = dirichlet(&mut rng, &beta);
        let mut profile = UserProfile {
            user_id,
            pref_start,
            pref_end,
            drift: cfg.drift,
            albums: Vec::with_capacity(cfg.albums_per_user),
        };
        for a in 0..cfg.albums_per_user {
            let mid = (a as f64 + 0.5) / cfg.albums_per_user as f64;
            let center: Vec<f64> = profile
                .preference_at(mid)
                .into_iter()
                .map(|p| ALBUM_CONCENTRATION * p)
                .collect();
            profile.albums.push(dirichlet(&mut rng, &center));
        }

        let mut all = Vec::with_capacity(n_total);
        for i in 0..n_total {
            let t = if n_total > 1 {
                i as f64 / (n_total - 1) as f64
            } else {
                0.0
            };
            let album = (i * cfg.albums_per_user / n_total).min(cfg.albums_per_user - 1);
            let mix: Vec<f64> = profile
                .preference_at(t)
                .iter()
                .zip(&profile.albums[album])
                .map(|(&p, &q)| (1.0 - ALBUM_WEIGHT) * p + ALBUM_WEIGHT * q)
                .collect();
            let y = sample_categorical(&mut rng, &mix);
            all.push(Example {
                id: next_id,
                x: emit(&mut rng, &prototypes_f64, y, cfg.noise),
                y,
                timestamp: t,
                album_id: album as u32,
                user_id,
            });
            next_id += 1;
        }
        let held: BTreeSet<usize> = index::sample(&mut rng, n_total, n_test).into_iter().collect();
        let mut data = Vec::with_capacity(cfg.n_per_user);
        for (i, ex) in all.into_iter().enumerate() {
            if held.contains(&i) {
                test.push(ex);
            } else {
                data.push(ex);
            }
        }
        users.push(UserData {
            profile,
            data,
            prior: Vec::new(),
            private: Vec::new(),
        });
    }

    let prototypes: Vec<Vec<T>> = prototypes_f64
        .iter()
        .map(|p| p.iter().map(|&v| T::lit(v)).collect())
        .collect();
    let background = gen_background(
        cfg.background_size,
        cfg.classes,
        &prototypes,
        cfg.noise,
        cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
    )?;
    let mut bundle = DatasetBundle {
        config: *cfg,
        prototypes,
        users,
        test,
        background,
    };
    bundle.resplit(PriorKind::Random, 0.5, cfg.seed)?;
    Ok(bundle)
}

/// Class-uniform examples from the same prototype/noise process as the users.
pub fn gen_background<T: Scalar>(
    n: usize,
    classes: usize,
    prototypes: &[Vec<T>],
    noise: f64,
    seed: u64,
) -> Result<Vec<Example<T>>> {
    if n == 0 {
        return Err(Error::invalid("background size must be at least 1"));
    }
    if classes == 0 || prototypes.len() != classes {
        return Err(Error::invalid("need one prototype per class"));
    }
    let protos: Vec<Vec<f64>> = prototypes
        .iter()
        .map(|p| p.iter().map(|v| v.as_f64()).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let y = rng.random_range(0..classes);
            Example {
                id: BACKGROUND_ID_BASE + i as u64,
                x: emit(&mut rng, &protos, y, noise),
                y,
                timestamp: 0.0,
                album_id: 0,
                user_id: BACKGROUND_USER,
            }
        })
        .collect())
}

fn prior_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Splits one user's data into adversary prior and on-device private sets.
pub fn split_prior<T: Scalar>(
    data: &[Example<T>],
    kind: PriorKind,
    fraction: f64,
    background: &[Example<T>],
    seed: u64,
) -> Result<(Vec<Example<T>>, Vec<Example<T>>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("prior fraction must be in (0, 1)"));
    }
    if data.len() < 2 {
        return Err(Error::invalid("need at least two examples to split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = prior_count(data.len(), fraction);
    let partition = |in_prior: &dyn Fn(usize) -> bool| {
        let mut prior = Vec::new();
        let mut private = Vec::new();
        for (i, ex) in data.iter().enumerate() {
            if in_prior(i) {
                prior.push(ex.clone());
            } else {
                private.push(ex.clone());
            }
        }
        (prior, private)
    };
    match kind {
        PriorKind::Random => {
            let chosen: BTreeSet<usize> =
                index::sample(&mut rng, data.len(), k).into_iter().collect();
            Ok(partition(&|i| chosen.contains(&i)))
        }
        PriorKind::Chrono => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.sort_by(|&a, &b| data[a].timestamp.total_cmp(&data[b].timestamp));
            let chosen: BTreeSet<usize> = order[..k].iter().copied().collect();
            Ok(partition(&|i| chosen.contains(&i)))
        }
        PriorKind::Photoset => {
            let mut albums: Vec<u32> = data
                .iter()
                .map(|e| e.album_id)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if albums.len() < 2 {
                return Err(Error::invalid(format!(
                    "photoset split needs at least 2 albums, user has {}",
                    albums.len()
                )));
            }
            albums.shuffle(&mut rng);
            let mut chosen = BTreeSet::new();
            let mut taken = 0;
            for &a in &albums[..albums.len() - 1] {
                if taken >= k {
                    break;
                }
                chosen.insert(a);
                taken += data.iter().filter(|e| e.album_id == a).count();
            }
            Ok(partition(&|i| chosen.contains(&data[i].album_id)))
        }
        PriorKind::Profile { class } => {
            let pool: Vec<&Example<T>> = background.iter().filter(|e| e.y == class).collect();
            if pool.is_empty() {
                return Err(Error::invalid(format!(
                    "background has no examples of profile class {class}"
                )));
            }
            let user_id = data[0].user_id;
            let prior = if pool.len() >= k {
                index::sample(&mut rng, pool.len(), k)
                    .into_iter()
                    .map(|i| pool[i].clone())
                    .collect()
            } else {
                (0..k)
                    .map(|_| pool[rng.random_range(0..pool.len())].clone())
                    .collect::<Vec<_>>()
            };
            let prior = prior
                .into_iter()
                .map(|mut e: Example<T>| {
                    e.user_id = user_id;
                    e
                })
                .collect();
            Ok((prior, data.to_vec()))
        }
    }
}

impl<T: Scalar> DatasetBundle<T> {
    /// Re-derives every user's prior/private split.
    pub fn resplit(&mut self, kind: PriorKind, fraction: f64, seed: u64) -> Result<()> {
        for user in &mut self.users {
            let user_seed = seed
                .wrapping_mul(0x100_0000_01b3)
                .wrapping_add(user.user_id() as u64 + 1);
            let (prior, private) =
                split_prior(&user.data, kind, fraction, &self.background, user_seed)?;
            user.prior = prior;
            user.private = private;
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn features(&self) -> usize {
        self.config.features
    }

    pub fn user_ids(&self) -> Vec<u32> {
        self.users.iter().map(UserData::user_id).collect()
    }

    pub fn user(&self, user_id: u32) -> Option<&UserData<T>> {
        self.users.iter().find(|u| u.user_id() == user_id)
    }

    /// Class histogram (normalized) of a set of examples.
    pub fn histogram(&self, examples: &[Example<T>]) -> Vec<f64> {
        class_histogram(examples, self.classes())
    }

    /// Mean KL divergence between each user's class histogram and the pooled histogram.
    pub fn mean_kl_to_global(&self) -> f64 {
        let pooled: Vec<Example<T>> = self.users.iter().flat_map(|u| u.data.clone()).collect();
        let global = self.histogram(&pooled);
        let total: f64 = self
            .users
            .iter()
            .map(|u| {
                self.histogram(&u.data)
                    .iter()
                    .zip(&global)
                    .filter(|(&p, _)| p > 0.0)
                    .map(|(&p, &q)| p * (p / q).ln())
                    .sum::<f64>()
            })
            .sum();
        total / self.users.len() as f64
    }
}

pub fn class_histogram<T>(examples: &[Example<T>], classes: usize) -> Vec<f64> {
    let mut h = vec![0.0; classes];
    for e in examples {
        h[e.y] += 1.0;
    }
    let n = examples.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Replaces every user example by a draw without replacement from the pooled
/// union of all user data, removing per-user bias while keeping device sizes.
pub fn make_iid_control<T: Scalar>(bundle: &DatasetBundle<T>, seed: u64) -> DatasetBundle<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<Example<T>> = bundle
        .users
        .iter()
        .flat_map(|u| u.prior.iter().chain(&u.private).cloned())
        .collect();
    pool.shuffle(&mut rng);
    let mut pool = pool.into_iter();
    let mut out = bundle.clone();
    for user in &mut out.users {
        let uid = user.user_id();
        let mut refill = |slots: &mut Vec<Example<T>>| {
            for slot in slots.iter_mut() {
                let drawn = pool.next().expect("pool size equals slot count");
                slot.id = drawn.id;
                slot.x = drawn.x;
                slot.y = drawn.y;
                slot.user_id = uid;
            }
        };
        refill(&mut user.prior);
        refill(&mut user.private);
        user.data = user.prior.iter().chain(&user.private).cloned().collect();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserDistances {
    pub user_id: u32,
    pub intra_median: f64,
    pub inter_median: f64,
}

fn normalized<T: Scalar>(x: &[T]) -> Vec<f64> {
    let v: Vec<f64> = x.iter().map(|a| a.as_f64()).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.into_iter().map(|a| a / n).collect()
    } else {
        v
    }
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty set");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-user median intra-user distance and median distance to a random global sample.
pub fn intra_inter_distances<T: Scalar>(
    bundle: &DatasetBundle<T>,
    seed: u64,
) -> Result<Vec<UserDistances>> {
    let per_user: Vec<Vec<Vec<f64>>> = bundle
        .users
        .iter()
        .map(|u| u.data.iter().map(|e| normalized(&e.x)).collect())
        .collect();
    if per_user.iter().any(|u| u.len() < 2) {
        return Err(Error::invalid("every user needs at least two examples"));
    }
    let pool: Vec<&Vec<f64>> = per_user.iter().flatten().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample: Vec<&Vec<f64>> = index::sample(&mut rng, pool.len(), pool.len().min(500))
        .into_iter()
        .map(|i| pool[i])
        .collect();
    Ok(bundle
        .users
        .iter()
        .zip(&per_user)
        .map(|(u, xs)| {
            let mut intra = Vec::with_capacity(xs.len() * (xs.len() - 1) / 2);
            for i in 0..xs.len() {
                for j in i + 1..xs.len() {
                    intra.push(sq_dist(&xs[i], &xs[j]).sqrt());
                }
            }
            let mut inter: Vec<f64> = xs
                .iter()
                .flat_map(|x| sample.iter().map(move |s| sq_dist(x, s).sqrt()))
                .collect();
            UserDistances {
                user_id: u.user_id(),
                intra_median: median(&mut intra),
                inter_median: median(&mut inter),
            }
        })
        .collect())
}
