//! FederatedAveraging over a population of single-user devices.
//!
//! Each round the server samples `max(1, round(C*K))` devices without
//! replacement, every sampled device runs `E` local epochs of mini-batch SGD
//! from the current global weights and reports `delta = w_local - w_global`,
//! and the server adds the `n_k`-weighted mean of the reported deltas. The
//! weights are normalized over the sampled subset so that a round with partial
//! participation still moves the model by a full averaged step.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Example};
use crate::error::{Error, Result};
use crate::metrics::average_precision;
use crate::nn::{train, Head, ModelSpec, OptimizerConfig, ParamVector, Sample, TargetRef, TrainConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Anonymous,
    ShadowPrior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState<T> {
    pub device_id: u32,
    pub user_id: u32,
    pub role: Role,
    pub data: Vec<Example<T>>,
}

impl<T> DeviceState<T> {
    pub fn n_k(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    /// Fraction `C` of devices sampled per round.
    pub fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            fraction: 1.0,
            local_epochs: 1,
            batch_size: 10,
            eta: 0.05,
            rounds: 50,
            seed: 0,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::invalid("fraction must be in (0, 1]"));
        }
        if self.local_epochs < 1 || self.batch_size < 1 || self.rounds < 1 {
            return Err(Error::invalid(
                "local_epochs, batch_size and rounds must be at least 1",
            ));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta must be non-negative"));
        }
        Ok(())
    }

    /// Number of devices sampled per round out of `k`.
    pub fn devices_per_round(&self, k: usize) -> usize {
        ((self.fraction * k as f64).round() as usize).clamp(1, k.max(1))
    }
}

/// One device's parameter delta for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRecord<T> {
    /// 1-based round index.
    pub round: usize,
    pub device_id: u32,
    /// Ground truth, used only for evaluation.
    pub user_id: u32,
    pub role: Role,
    pub n_k: usize,
    pub delta: ParamVector<T>,
}

/// Transformation a device applies to its outgoing delta (e.g. noise).
pub type DeltaHook<'a, T> = dyn Fn(&DeviceState<T>, usize, &mut ParamVector<T>) + Sync + 'a;

pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One anonymous device (private split) and one shadow device (prior split) per user.
///
/// Anonymous devices get ids `0..U`, shadow devices `U..2U`, both in user order.
pub fn build_devices<T: Scalar>(world: &DatasetBundle<T>) -> Vec<DeviceState<T>> {
    let n = world.users.len() as u32;
    let anon = world.users.iter().enumerate().map(|(i, u)| DeviceState {
        device_id: i as u32,
        user_id: u.user_id(),
        role: Role::Anonymous,
        data: u.private.clone(),
    });
    let shadow = world.users.iter().enumerate().map(|(i, u)| DeviceState {
        device_id: n + i as u32,
        user_id: u.user_id(),
        role: Role::ShadowPrior,
        data: u.prior.clone(),
    });
    anon.chain(shadow).collect()
}

/// Local training on one device; returns `w_local - w_t`.
pub fn device_update<T: Scalar>(
    spec: &ModelSpec,
    device: &DeviceState<T>,
    w_t: &ParamVector<T>,
    cfg: &RoundConfig,
    round: usize,
) -> Result<DeltaRecord<T>> {
    if device.data.is_empty() {
        return Err(Error::Empty("device data"));
    }
    let local = train(
        spec,
        w_t.clone(),
        &device.data,
        &TrainConfig {
            epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            optimizer: OptimizerConfig::sgd(cfg.eta),
            seed: mix_seed(cfg.seed, round as u64, device.device_id as u64 + 1),
        },
    )?;
    Ok(DeltaRecord {
        round,
        device_id: device.device_id,
        user_id: device.user_id,
        role: device.role,
        n_k: device.n_k(),
        delta: local.sub(w_t)?,
    })
}

/// One server round: sample, update in parallel, aggregate in ascending device order.
pub fn server_round<T: Scalar>(
    spec: &ModelSpec,
    w_t: &ParamVector<T>,
    devices: &[DeviceState<T>],
    cfg: &RoundConfig,
    round: usize,
    hook: Option<&DeltaHook<'_, T>>,
) -> Result<(ParamVector<T>, Vec<DeltaRecord<T>>)> {
    if devices.is_empty() {
        return Err(Error::Empty("devices"));
    }
    let m = cfg.devices_per_round(devices.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, round as u64, 0));
    let mut sampled: Vec<&DeviceState<T>> = index::sample(&mut rng, devices.len(), m)
        .into_iter()
        .map(|i| &devices[i])
        .collect();
    sampled.sort_by_key(|d| d.device_id);

    let records = sampled
        .par_iter()
        .map(|d| {
            let mut rec = device_update(spec, d, w_t, cfg, round)?;
            if let Some(h) = hook {
                h(d, round, &mut rec.delta);
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;

    let total: usize = records.iter().map(|r| r.n_k).sum();
    let mut w_next = w_t.clone();
    for rec in &records {
        let weight = T::lit(rec.n_k as f64 / total as f64);
        w_next.axpy(weight, &rec.delta)?;
    }
    Ok((w_next, records))
}

#[derive(Debug, Clone)]
pub struct FedOutcome<T> {
    pub initial: ParamVector<T>,
    pub params: ParamVector<T>,
    /// Ordered by `(round, device_id)`.
    pub log: Vec<DeltaRecord<T>>,
    /// Task score on the test split after each round.
    pub utility: Vec<f64>,
}

impl<T> FedOutcome<T> {
    pub fn final_utility(&self) -> f64 {
        self.utility.last().copied().unwrap_or(f64::NAN)
    }
}

/// Runs `cfg.rounds` rounds over explicit devices.
pub fn run_devices<T: Scalar, S: Sample<T> + Sync>(
    spec: &ModelSpec,
    devices: &[DeviceState<T>],
    test: &[S],
    cfg: &RoundConfig,
    hook: Option<&DeltaHook<'_, T>>,
) -> Result<FedOutcome<T>> {
    cfg.validate()?;
    spec.validate()?;
    let initial: ParamVector<T> = spec.init_params(cfg.seed);
    let mut w = initial.clone();
    let mut log = Vec::with_capacity(cfg.rounds * cfg.devices_per_round(devices.len()));
    let mut utility = Vec::with_capacity(cfg.rounds);
    for t in 1..=cfg.rounds {
        let (next, records) = server_round(spec, &w, devices, cfg, t, hook)?;
        w = next;
        log.extend(records);
        if !test.is_empty() {
            utility.push(evaluate_task(spec, &w, test)?);
        }
    }
    Ok(FedOutcome {
        initial,
        params: w,
        log,
        utility,
    })
}

/// Federated training of `spec` on the world's anonymous and shadow devices.
pub fn run_federated<T: Scalar>(
    world: &DatasetBundle<T>,
    spec: &ModelSpec,
    cfg: &RoundConfig,
) -> Result<FedOutcome<T>> {
    let devices = build_devices(world);
    for u in world.user_ids() {
        for role in [Role::Anonymous, Role::ShadowPrior] {
            if !devices
                .iter()
                .any(|d| d.user_id == u && d.role == role && !d.data.is_empty())
            {
                return Err(Error::invalid(format!(
                    "user {u} lacks a non-empty {role:?} device"
                )));
            }
        }
    }
    run_devices(spec, &devices, &world.test, cfg, None)
}

/// Top-1 accuracy (softmax), mean per-class AP (sigmoid) or mean absolute error (mse).
pub fn evaluate_task<T: Scalar, S: Sample<T>>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    test: &[S],
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    match spec.head {
        Head::SoftmaxCe => {
            let mut hits = 0usize;
            for s in test {
                let logits = spec.forward(params, s.features())?;
                let TargetRef::Class(y) = s.target() else {
                    return Err(Error::TargetMismatch("softmax head needs class targets".into()));
                };
                if argmax(&logits) == y {
                    hits += 1;
                }
            }
            Ok(hits as f64 / test.len() as f64)
        }
        Head::SigmoidBce => {
            let k = spec.output_dim;
            let mut scores = vec![Vec::with_capacity(test.len()); k];
            let mut truth = vec![Vec::with_capacity(test.len()); k];
            for s in test {
                let logits = spec.forward(params, s.features())?;
                let TargetRef::Bits(bits) = s.target() else {
                    return Err(Error::TargetMismatch("sigmoid head needs bit targets".into()));
                };
                for c in 0..k {
                    scores[c].push(logits[c].as_f64());
                    truth[c].push(bits[c] == T::one());
                }
            }
            let aps: Vec<f64> = (0..k)
                .filter_map(|c| average_precision(&scores[c], &truth[c]).ok())
                .collect();
            if aps.is_empty() {
                return Err(Error::invalid("no class has a positive test example"));
            }
            Ok(aps.iter().sum::<f64>() / aps.len() as f64)
        }
        Head::IdentityMse => {
            let mut total = 0.0;
            let mut count = 0usize;
            for s in test {
                let out = spec.forward(params, s.features())?;
                let TargetRef::Real(r) = s.target() else {
                    return Err(Error::TargetMismatch("mse head needs real targets".into()));
                };
                for (o, t) in out.iter().zip(r) {
                    total += (o.as_f64() - t.as_f64()).abs();
                    count += 1;
                }
            }
            Ok(total / count as f64)
        }
    }
}

/// Index of the first maximal element.
pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    fn scalar_model() -> (ModelSpec, ParamVector<f64>) {
        let spec = ModelSpec::linear(1, 1, Head::IdentityMse).without_bias();
        let w = ParamVector::new(vec![Layer::new("w", vec![1, 1], vec![1.0]).unwrap()]).unwrap();
        (spec, w)
    }

    /// Wraps a regression pair as a device example via a dedicated sample type.
    #[derive(Clone)]
    struct Reg(Vec<f64>, Vec<f64>);
    impl Sample<f64> for Reg {
        fn features(&self) -> &[f64] {
            &self.0
        }
        fn target(&self) -> TargetRef<'_, f64> {
            TargetRef::Real(&self.1)
        }
    }

    fn reg_update(w: &ParamVector<f64>, x: f64, y: f64, epochs: usize, eta: f64) -> ParamVector<f64> {
        let (spec, _) = scalar_model();
        let local = train(
            &spec,
            w.clone(),
            &[Reg(vec![x], vec![y])],
            &TrainConfig {
                epochs,
                batch_size: 1,
                optimizer: OptimizerConfig::sgd(eta),
                seed: 0,
            },
        )
        .unwrap();
        local.sub(w).unwrap()
    }

    #[test]
    fn hand_computed_local_deltas() {
        let (_, w) = scalar_model();
        let d1 = reg_update(&w, 2.0, 0.0, 1, 0.1);
        assert!((d1.flatten()[0] + 0.4).abs() < 1e-12);
        let d2 = reg_update(&w, 2.0, 0.0, 2, 0.1);
        assert!((d2.flatten()[0] + 0.64).abs() < 1e-12);
        let d0 = reg_update(&w, 2.0, 0.0, 3, 0.0);
        assert_eq!(d0.flatten()[0], 0.0);
    }

    fn device(id: u32, n: usize) -> DeviceState<f64> {
        DeviceState {
            device_id: id,
            user_id: id,
            role: Role::Anonymous,
            data: (0..n)
                .map(|i| Example {
                    id: (id as u64) * 100 + i as u64,
                    x: vec![i as f64 * 0.1, 1.0 - id as f64],
                    y: (i + id as usize) % 2,
                    timestamp: 0.0,
                    album_id: 0,
                    user_id: id,
                })
                .collect(),
        }
    }

    #[test]
    fn device_update_rejects_empty_data() {
        let spec = ModelSpec::linear(2, 2, Head::SoftmaxCe);
        let w = spec.init_params(0);
        let d = device(0, 0);
        assert!(device_update(&spec, &d, &w, &RoundConfig::default(), 1).is_err());
    }

    #[test]
    fn zero_eta_gives_zero_delta_and_fixed_point() {
        let spec = ModelSpec::linear(2, 2, Head::SoftmaxCe);
        let w: ParamVector<f64> = spec.init_params(0);
        let cfg = RoundConfig {
            eta: 0.0,
            ..RoundConfig::default()
        };
        let devices = vec![device(0, 5), device(1, 7)];
        let (next, recs) = server_round(&spec, &w, &devices, &cfg, 1, None).unwrap();
        assert!(recs.iter().all(|r| r.delta.iter().all(|v| *v == 0.0)));
        assert_eq!(next, w);
    }

    #[test]
    fn single_device_full_participation_adopts_local_model() {
        let spec = ModelSpec::linear(2, 2, Head::SoftmaxCe);
        let w: ParamVector<f64> = spec.init_params(0);
        let cfg = RoundConfig::default();
        let devices = vec![device(3, 6)];
        let (next, recs) = server_round(&spec, &w, &devices, &cfg, 1, None).unwrap();
        let local = w.add(&recs[0].delta).unwrap();
        assert!(next.max_abs_diff(&local).unwrap() < 1e-15);
    }

    #[test]
    fn weighted_aggregation_arithmetic() {
        // deltas are injected through the hook: 4 from the n=1 device, 0 from the n=3 device
        let spec = ModelSpec::linear(2, 2, Head::SoftmaxCe).without_bias();
        let w: ParamVector<f64> = ParamVector::zeros(&spec.layout());
        let devices = vec![device(0, 1), device(1, 3)];
        let hook = |d: &DeviceState<f64>, _: usize, delta: &mut ParamVector<f64>| {
            let v = if d.device_id == 0 { 4.0 } else { 0.0 };
            delta.iter_mut().for_each(|x| *x = v);
        };
        let (next, recs) =
            server_round(&spec, &w, &devices, &RoundConfig::default(), 1, Some(&hook)).unwrap();
        assert_eq!(recs.iter().map(|r| r.n_k).collect::<Vec<_>>(), vec![1, 3]);
        assert!(next.iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn sampling_respects_fraction_and_order() {
        let spec = ModelSpec::linear(2, 2, Head::SoftmaxCe);
        let w: ParamVector<f64> = spec.init_params(0);
        let devices: Vec<_> = (0..10).rev().map(|i| device(i, 4)).collect();
        let cfg = RoundConfig {
            fraction: 0.3,
            ..RoundConfig::default()
        };
        let (_, recs) = server_round(&spec, &w, &devices, &cfg, 1, None).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.windows(2).all(|p| p[0].device_id < p[1].device_id));
        let tiny = RoundConfig {
            fraction: 0.01,
            ..RoundConfig::default()
        };
        let (_, recs) = server_round(&spec, &w, &devices, &tiny, 1, None).unwrap();
        assert_eq!(recs.len(), 1);
    }

    #[test]
    fn evaluate_accuracy_fixture() {
        // identity-like linear classifier over 2 classes; fourth sample is misclassified
        let spec = ModelSpec::linear(2, 2, Head::SoftmaxCe);
        let p = ParamVector::new(vec![
            Layer::new("w", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Layer::new("b", vec![2], vec![0.0, 0.0]).unwrap(),
        ])
        .unwrap();
        let ex = |x: [f64; 2], y| crate::nn::Labeled::new(x.to_vec(), crate::nn::Target::Class(y));
        let test = [
            ex([2.0, 1.0], 0),
            ex([0.0, 1.0], 1),
            ex([3.0, -1.0], 0),
            ex([1.0, 0.5], 1),
        ];
        assert_eq!(evaluate_task(&spec, &p, &test).unwrap(), 0.75);
    }

    #[test]
    fn evaluate_mse_and_bce_heads() {
        let spec = ModelSpec::linear(1, 1, Head::IdentityMse);
        let p = ParamVector::new(vec![
            Layer::new("w", vec![1, 1], vec![1.0]).unwrap(),
            Layer::new("b", vec![1], vec![0.0]).unwrap(),
        ])
        .unwrap();
        let t = [Reg(vec![1.0], vec![0.0]), Reg(vec![2.0], vec![2.0])];
        assert_eq!(evaluate_task(&spec, &p, &t).unwrap(), 0.5);

        let spec = ModelSpec::linear(1, 1, Head::SigmoidBce);
        let bits = |x: f64, b: f64| crate::nn::Labeled::new(vec![x], crate::nn::Target::Bits(vec![b]));
        let t = [bits(1.0, 1.0), bits(-1.0, 0.0), bits(0.5, 1.0)];
        assert_eq!(evaluate_task(&spec, &p, &t).unwrap(), 1.0);
    }
}
