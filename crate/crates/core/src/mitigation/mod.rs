//! Device-side countermeasures and the privacy/utility trade-off.

mod kmeans;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{closed_world_attack, AttackRecipe, ReidMethod};
use crate::data::{DatasetBundle, Example};
use crate::error::{Error, Result};
use crate::fed::{build_devices, mix_seed, run_devices, DeltaHook, DeltaRecord, DeviceState, Role, RoundConfig};
use crate::nn::{ModelSpec, ParamVector};
use crate::scalar::Scalar;

pub use kmeans::{kmeans, Clustering, MAX_ITERATIONS};

/// Default number of background clusters for mode-specific augmentation.
pub const DEFAULT_CLUSTERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Mitigation {
    None,
    /// Zero-mean Gaussian noise of variance `sigma2` on every outgoing delta.
    Noise { sigma2: f64 },
    /// Replace a fraction `alpha ∈ [0, 1]` of the device data with background examples.
    BkgRepl { alpha: f64 },
    /// Append `alpha · |D|` random background examples.
    RandAug { alpha: f64 },
    /// Append `alpha · |D|` examples of one randomly assigned background cluster.
    MmAug { alpha: f64, clusters: usize },
}

impl Mitigation {
    pub fn name(&self) -> &'static str {
        match self {
            Mitigation::None => "none",
            Mitigation::Noise { .. } => "noise",
            Mitigation::BkgRepl { .. } => "bkg_repl",
            Mitigation::RandAug { .. } => "rand_aug",
            Mitigation::MmAug { .. } => "mm_aug",
        }
    }

    /// The strategy's knob: `sigma2` for noise, `alpha` otherwise.
    pub fn parameter(&self) -> f64 {
        match *self {
            Mitigation::None => 0.0,
            Mitigation::Noise { sigma2 } => sigma2,
            Mitigation::BkgRepl { alpha } | Mitigation::RandAug { alpha } | Mitigation::MmAug { alpha, .. } => alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        match *self {
            Mitigation::None => Ok(()),
            Mitigation::Noise { sigma2 } if !(sigma2 >= 0.0 && sigma2.is_finite()) => {
                bad(format!("sigma2 must be a non-negative number, got {sigma2}"))
            }
            Mitigation::BkgRepl { alpha } if !(0.0..=1.0).contains(&alpha) => {
                bad(format!("bkg_repl alpha must lie in [0, 1], got {alpha}"))
            }
            Mitigation::RandAug { alpha } | Mitigation::MmAug { alpha, .. } if !(alpha >= 0.0 && alpha.is_finite()) => {
                bad(format!("alpha must be a non-negative number, got {alpha}"))
            }
            Mitigation::MmAug { clusters, .. } if clusters < 1 => bad("mm_aug needs at least 1 cluster".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MitigationConfig {
    #[serde(flatten)]
    pub mitigation: Mitigation,
    pub seed: u64,
}

/// `delta + N(0, sigma2)` elementwise.
pub fn noise_perturb<T: Scalar>(delta: &ParamVector<T>, sigma2: f64, seed: u64) -> Result<ParamVector<T>> {
    let mut out = delta.clone();
    add_noise(&mut out, sigma2, seed)?;
    Ok(out)
}

fn add_noise<T: Scalar>(delta: &mut ParamVector<T>, sigma2: f64, seed: u64) -> Result<()> {
    if !(sigma2 >= 0.0) {
        return Err(Error::invalid(format!("sigma2 must be non-negative, got {sigma2}")));
    }
    if sigma2 == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma2.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in delta.iter_mut() {
        *v += T::lit(normal.sample(&mut rng));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataStrategy {
    BkgRepl,
    /// Appends draws from the given pool; covers both rand_aug and mm_aug.
    Augment,
}

/// Rewrites one device's data. `pool` is the whole background for bkg_repl and
/// rand_aug, or the device's assigned cluster for mm_aug. Draws are uniform
/// with replacement and take on the device's user id.
pub fn apply_data_strategy<T: Scalar>(
    data: &[Example<T>],
    strategy: DataStrategy,
    alpha: f64,
    pool: &[&Example<T>],
    seed: u64,
) -> Result<Vec<Example<T>>> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be a non-negative number, got {alpha}")));
    }
    if strategy == DataStrategy::BkgRepl && alpha > 1.0 {
        return Err(Error::invalid(format!("bkg_repl alpha must lie in [0, 1], got {alpha}")));
    }
    let count = (alpha * data.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(data.to_vec());
    }
    if pool.is_empty() {
        return Err(Error::Empty("background pool"));
    }
    let user = data.first().map_or(0, |e| e.user_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let mut e = pool[rng.random_range(0..pool.len())].clone();
        e.user_id = user;
        e
    };
    let mut out = data.to_vec();
    match strategy {
        DataStrategy::BkgRepl => {
            let mut slots: Vec<usize> = index::sample(&mut rng, data.len(), count).into_vec();
            slots.sort_unstable();
            for i in slots {
                out[i] = draw(&mut rng);
            }
        }
        DataStrategy::Augment => {
            for _ in 0..count {
                out.push(draw(&mut rng));
            }
        }
    }
    Ok(out)
}

/// Clusters the background features for mode-specific augmentation.
pub fn cluster_background<T: Scalar>(background: &[Example<T>], m: usize, seed: u64) -> Result<Clustering<T>> {
    let pts: Vec<Vec<T>> = background.iter().map(|e| e.x.clone()).collect();
    kmeans(&pts, m, seed)
}

/// Anonymous devices rewritten by a data strategy; shadow devices untouched.
pub fn mitigate_devices<T: Scalar>(
    world: &DatasetBundle<T>,
    cfg: &MitigationConfig,
) -> Result<Vec<DeviceState<T>>> {
    cfg.mitigation.validate()?;
    let mut devices = build_devices(world);
    let all: Vec<&Example<T>> = world.background.iter().collect();
    let (strategy, alpha, pools): (DataStrategy, f64, Option<Vec<Vec<&Example<T>>>>) = match cfg.mitigation {
        Mitigation::None | Mitigation::Noise { .. } => return Ok(devices),
        Mitigation::BkgRepl { alpha } => (DataStrategy::BkgRepl, alpha, None),
        Mitigation::RandAug { alpha } => (DataStrategy::Augment, alpha, None),
        Mitigation::MmAug { alpha, clusters } => {
            let c = cluster_background(&world.background, clusters, mix_seed(cfg.seed, 0xc1, 0))?;
            let pools = (0..clusters)
                .map(|k| c.members(k).into_iter().map(|i| &world.background[i]).collect())
                .collect();
            (DataStrategy::Augment, alpha, Some(pools))
        }
    };
    for d in devices.iter_mut().filter(|d| d.role == Role::Anonymous) {
        let seed = mix_seed(cfg.seed, d.device_id as u64, 0xda7a);
        let pool: &[&Example<T>] = match &pools {
            None => &all,
            Some(p) => {
                // a random non-empty cluster per device
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1, 2));
                let nonempty: Vec<&Vec<&Example<T>>> = p.iter().filter(|c| !c.is_empty()).collect();
                nonempty[rng.random_range(0..nonempty.len())]
            }
        };
        d.data = apply_data_strategy(&d.data, strategy, alpha, pool, seed)?;
    }
    Ok(devices)
}

/// Outcome of one mitigated pipeline run.
#[derive(Debug, Clone)]
pub struct MitigatedRun<T> {
    pub log: Vec<DeltaRecord<T>>,
    pub utility: f64,
}

/// Federated training with the mitigation in place. Noise is added by the
/// anonymous devices to their own outgoing deltas every round.
pub fn run_mitigated<T: Scalar>(
    world: &DatasetBundle<T>,
    spec: &ModelSpec,
    fed: &RoundConfig,
    cfg: &MitigationConfig,
) -> Result<MitigatedRun<T>> {
    let devices = mitigate_devices(world, cfg)?;
    let noise = |sigma2: f64| {
        let seed = cfg.seed;
        move |d: &DeviceState<T>, round: usize, delta: &mut ParamVector<T>| {
            if d.role == Role::Anonymous {
                let s = mix_seed(seed, round as u64, d.device_id as u64 ^ 0x4015e);
                add_noise(delta, sigma2, s).expect("sigma2 validated");
            }
        }
    };
    let out = match cfg.mitigation {
        Mitigation::Noise { sigma2 } => {
            let hook = noise(sigma2);
            run_devices(spec, &devices, &world.test, fed, Some(&hook as &DeltaHook<'_, T>))?
        }
        _ => run_devices(spec, &devices, &world.test, fed, None)?,
    };
    Ok(MitigatedRun {
        utility: out.final_utility(),
        log: out.log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub strategy: String,
    pub parameter: f64,
    /// Attacker increase over chance.
    pub privacy: f64,
    pub attack_ap: f64,
    pub chance_ap: f64,
    /// Task score relative to the unmitigated run.
    pub utility: f64,
    pub raw_utility: f64,
}

/// Runs every grid setting end to end and attacks it with the closed-world MLP.
/// The grid must contain [`Mitigation::None`], which anchors utility at 1.
pub fn tradeoff_curve<T: Scalar>(
    world: &DatasetBundle<T>,
    spec: &ModelSpec,
    fed: &RoundConfig,
    recipe: &AttackRecipe,
    grid: &[MitigationConfig],
) -> Result<Vec<TradeoffPoint>> {
    let anchor = grid
        .iter()
        .position(|g| g.mitigation == Mitigation::None)
        .ok_or_else(|| Error::invalid("mitigation grid lacks the no-mitigation point"))?;
    let runs = grid
        .par_iter()
        .map(|g| {
            let run = run_mitigated(world, spec, fed, g)?;
            let score = closed_world_attack(&run.log, recipe, ReidMethod::Mlp)?;
            Ok((run.utility, score))
        })
        .collect::<Result<Vec<_>>>()?;
    let base = runs[anchor].0;
    Ok(grid
        .iter()
        .zip(&runs)
        .map(|(g, (u, s))| TradeoffPoint {
            strategy: g.mitigation.name().to_owned(),
            parameter: g.mitigation.parameter(),
            privacy: s.increase_over_chance,
            attack_ap: s.mean_ap,
            chance_ap: s.chance_ap,
            utility: if base > 0.0 { u / base } else { f64::NAN },
            raw_utility: *u,
        })
        .collect())
}

/// Noise variances from 1e-2 to 1e2, one per decade.
pub fn noise_grid(seed: u64) -> Vec<MitigationConfig> {
    [1e-2, 1e-1, 1.0, 1e1, 1e2]
        .into_iter()
        .map(|sigma2| MitigationConfig {
            mitigation: Mitigation::Noise { sigma2 },
            seed,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BACKGROUND_USER;
    use crate::nn::Layer;

    fn ex(id: u64, user: u32, x: f64) -> Example<f64> {
        Example {
            id,
            x: vec![x],
            y: 0,
            timestamp: 0.0,
            album_id: 0,
            user_id: user,
        }
    }

    fn user_data() -> Vec<Example<f64>> {
        (0..100).map(|i| ex(i, 3, i as f64)).collect()
    }

    fn bkg() -> Vec<Example<f64>> {
        (0..50).map(|i| ex(1000 + i, BACKGROUND_USER, -(i as f64))).collect()
    }

    #[test]
    fn zero_noise_is_identity_and_moments_match() {
        let d = ParamVector::new(vec![Layer::new("w", vec![2], vec![1.0, -2.0]).unwrap()]).unwrap();
        assert_eq!(noise_perturb(&d, 0.0, 1).unwrap(), d);
        let n = 1_000_000;
        let z = ParamVector::new(vec![Layer::zeros("w", vec![n])]).unwrap();
        let sigma2 = 0.25;
        let out = noise_perturb::<f64>(&z, sigma2, 7).unwrap();
        let mean = out.iter().sum::<f64>() / n as f64;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() <= 4.0 * sigma2.sqrt() / (n as f64).sqrt());
        assert!((var - sigma2).abs() <= 0.05 * sigma2);
        assert!(noise_perturb(&d, -1.0, 1).is_err());
    }

    #[test]
    fn data_strategy_counting() {
        let (data, b) = (user_data(), bkg());
        let pool: Vec<&Example<f64>> = b.iter().collect();
        for s in [DataStrategy::BkgRepl, DataStrategy::Augment] {
            assert_eq!(apply_data_strategy(&data, s, 0.0, &pool, 1).unwrap(), data);
        }
        let repl = apply_data_strategy(&data, DataStrategy::BkgRepl, 1.0, &pool, 1).unwrap();
        assert_eq!(repl.len(), 100);
        assert!(repl.iter().all(|e| e.id >= 1000 && e.user_id == 3));
        let half = apply_data_strategy(&data, DataStrategy::BkgRepl, 0.5, &pool, 1).unwrap();
        assert_eq!(half.iter().filter(|e| e.id >= 1000).count(), 50);
        let aug = apply_data_strategy(&data, DataStrategy::Augment, 2.0, &pool, 1).unwrap();
        assert_eq!(aug.len(), 300);
        assert_eq!(&aug[..100], &data[..]);
        assert!(apply_data_strategy(&data, DataStrategy::BkgRepl, 1.5, &pool, 1).is_err());
        assert!(apply_data_strategy(&data, DataStrategy::Augment, 0.5, &[], 1).is_err());
    }

    #[test]
    fn mm_aug_with_one_cluster_equals_rand_aug() {
        let world = crate::data::gen_world::<f64>(&crate::data::WorldConfig {
            users: 4,
            n_per_user: 20,
            background_size: 60,
            ..Default::default()
        })
        .unwrap();
        let mm = mitigate_devices(
            &world,
            &MitigationConfig {
                mitigation: Mitigation::MmAug { alpha: 1.0, clusters: 1 },
                seed: 3,
            },
        )
        .unwrap();
        let ra = mitigate_devices(
            &world,
            &MitigationConfig {
                mitigation: Mitigation::RandAug { alpha: 1.0 },
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(mm.len(), ra.len());
        for (a, b) in mm.iter().zip(&ra) {
            assert_eq!(a.data, b.data);
        }
        // shadow devices keep the adversary's prior data
        let plain = build_devices(&world);
        for (a, p) in mm.iter().zip(&plain) {
            if a.role == Role::ShadowPrior {
                assert_eq!(a.data, p.data);
            } else {
                assert_eq!(a.data.len(), 2 * p.data.len());
            }
        }
    }

    #[test]
    fn validation() {
        assert!(Mitigation::BkgRepl { alpha: 1.2 }.validate().is_err());
        assert!(Mitigation::Noise { sigma2: -0.1 }.validate().is_err());
        assert!(Mitigation::MmAug { alpha: 1.0, clusters: 0 }.validate().is_err());
        assert!(Mitigation::RandAug { alpha: 2.0 }.validate().is_ok());
        assert_eq!(noise_grid(0).len(), 5);
    }
}
