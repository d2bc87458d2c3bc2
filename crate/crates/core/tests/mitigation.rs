use fedleak::fed::{build_devices, Role};
use fedleak::harness::{build_world, ExperimentConfig};
use fedleak::mitigation::{mitigate_devices, run_mitigated, tradeoff_curve, Mitigation, MitigationConfig};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        users: 5,
        n_per_user: 40,
        background_size: 200,
        hidden: 8,
        rounds: 3,
        epoch_ranges: 3,
        seed: 9,
        ..ExperimentConfig::default()
    }
}

#[test]
fn shadow_devices_are_never_mitigated() {
    let cfg = small();
    let world = build_world(&cfg).unwrap();
    let plain = build_devices(&world);
    for mitigation in [
        Mitigation::BkgRepl { alpha: 1.0 },
        Mitigation::RandAug { alpha: 2.0 },
        Mitigation::MmAug { alpha: 1.0, clusters: 4 },
    ] {
        let devices = mitigate_devices(&world, &MitigationConfig { mitigation, seed: 1 }).unwrap();
        for (a, b) in devices.iter().zip(&plain) {
            match a.role {
                Role::ShadowPrior => assert_eq!(a, b),
                Role::Anonymous => assert_ne!(a.data, b.data, "{mitigation:?}"),
            }
        }
    }
}

#[test]
fn noise_touches_only_anonymous_deltas() {
    let cfg = small();
    let world = build_world(&cfg).unwrap();
    let run = |mitigation| {
        run_mitigated(&world, &cfg.model_spec(), &cfg.round_config(), &MitigationConfig { mitigation, seed: 1 })
            .unwrap()
            .log
    };
    let clean = run(Mitigation::None);
    let noisy = run(Mitigation::Noise { sigma2: 0.5 });
    // first round starts from the same global model, so shadow deltas must agree exactly
    for (a, b) in clean.iter().zip(&noisy).filter(|(a, _)| a.round == 1) {
        match a.role {
            Role::ShadowPrior => assert_eq!(a.delta, b.delta),
            Role::Anonymous => assert!(a.delta.max_abs_diff(&b.delta).unwrap() > 0.1),
        }
    }
}

#[test]
fn mm_aug_privacy_does_not_grow_with_alpha() {
    let mut votes = 0;
    for seed in 0..3 {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let world = build_world(&cfg).unwrap();
        let grid: Vec<MitigationConfig> = std::iter::once(Mitigation::None)
            .chain([0.5, 1.0, 2.0].map(|alpha| Mitigation::MmAug { alpha, clusters: 10 }))
            .map(|mitigation| MitigationConfig { mitigation, seed })
            .collect();
        let pts = tradeoff_curve(&world, &cfg.model_spec(), &cfg.round_config(), &cfg.recipe(), &grid).unwrap();
        assert_eq!(pts[0].utility, 1.0);
        let privacy: Vec<f64> = pts.iter().map(|p| p.privacy).collect();
        votes += usize::from(privacy.windows(2).all(|w| w[1] <= w[0]));
    }
    assert!(votes >= 2, "privacy grew with alpha in {} of 3 seeds", 3 - votes);
}
