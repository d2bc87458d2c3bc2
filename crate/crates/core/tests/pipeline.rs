use std::path::Path;

use fedleak::attacks::{closed_world_attack, ReidMethod};
use fedleak::fed::build_devices;
use fedleak::harness::{
    build_world, emit_report, federate, parse_config, run_experiment, ConfigError, ExperimentConfig, Family, Report,
    ReportFormat,
};
use fedleak::store::{read_records, write_records, DeltaManifest};
use fedleak::Error;

fn small(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        users: 6,
        n_per_user: 60,
        background_size: 300,
        hidden: 16,
        rounds: 8,
        seed,
        reid_methods: vec![ReidMethod::Chance, ReidMethod::Knn, ReidMethod::Mlp],
        ..ExperimentConfig::default()
    }
}

#[test]
fn small_world_attack_beats_chance() {
    let cfg = small(1);
    let world = build_world(&cfg).unwrap();
    let out = federate(&cfg, &world).unwrap();
    assert_eq!(out.log.len(), 8 * 12);
    assert_eq!(out.utility.len(), 8);
    assert!(out.params.is_finite());
    let s = closed_world_attack(&out.log, &cfg.recipe(), ReidMethod::Mlp).unwrap();
    assert!((s.chance_ap - 1.0 / 6.0).abs() < 1e-12);
    assert!(s.mean_ap > 2.0 * s.chance_ap, "{s:?}");
}

#[test]
fn persisted_log_attacks_like_the_original() {
    let cfg = small(2);
    let world = build_world(&cfg).unwrap();
    let out = federate(&cfg, &world).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = DeltaManifest::new(cfg.model_spec().layout(), cfg.rounds, &build_devices(&world));
    let written = write_records(dir.path(), &manifest, &out.log).unwrap();
    assert_eq!(written.records.len(), out.log.len());
    let (m, back) = read_records::<f64>(dir.path()).unwrap();
    assert_eq!(m, written);
    // f32 storage shifts values by at most one f32 ulp, which the attack ignores
    let a = closed_world_attack(&out.log, &cfg.recipe(), ReidMethod::Knn).unwrap();
    let b = closed_world_attack(&back, &cfg.recipe(), ReidMethod::Knn).unwrap();
    assert!((a.mean_ap - b.mean_ap).abs() < 1e-6);
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_owned).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect();
    (header, rows)
}

#[test]
fn reports_round_trip_through_csv_and_json() {
    let cfg = small(3);
    let report = run_experiment(&cfg, Family::ReidClosed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_report(&report, dir.path(), ReportFormat::Both).unwrap();
    let names: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["reid_closed_reid.csv", "reid_closed_utility.csv", "reid_closed.json"]);

    let back: Report = serde_json::from_str(&std::fs::read_to_string(&paths[2]).unwrap()).unwrap();
    assert_eq!(back, report);
    assert!(back.created.is_none());

    let (header, rows) = read_csv(&paths[0]);
    assert_eq!(header[..2], ["seed", "config_hash"]);
    assert_eq!(header, report.tables[0].columns);
    assert_eq!(rows.len(), 3 * 5);
    for (row, cells) in rows.iter().zip(&report.tables[0].rows) {
        assert_eq!(row[0], "3");
        assert_eq!(row[1], report.config_hash);
        let v: f64 = row[4].parse().unwrap();
        assert_eq!(v, cells[4].as_f64().unwrap());
    }
}

#[test]
fn config_hash_ignores_output_location() {
    let a = small(0);
    let b = ExperimentConfig {
        output_dir: "elsewhere".into(),
        format: ReportFormat::Json,
        ..a.clone()
    };
    let c = ExperimentConfig { rounds: 9, ..a.clone() };
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn flags_override_file_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.yaml");
    std::fs::write(&path, "rounds: 7\nusers: 12\nreid_methods: [knn]\n").unwrap();
    let cfg = parse_config(Some(&path), &["--users", "9", "--eta=0.1"]).unwrap();
    assert_eq!(cfg.rounds, 7);
    assert_eq!(cfg.users, 9);
    assert_eq!(cfg.eta, 0.1);
    assert_eq!(cfg.reid_methods, vec![ReidMethod::Knn]);
    assert_eq!(cfg.classes, ExperimentConfig::default().classes);
}

#[test]
fn config_errors_name_the_key() {
    let none: &[&str] = &[];
    let cases: [(&[&str], &str); 3] = [
        (&["--roundz", "3"], "roundz"),
        (&["--rounds", "many"], "rounds"),
        (&["--rounds", "-2"], "rounds"),
    ];
    for (flags, key) in cases {
        let e = parse_config(None, flags).unwrap_err();
        assert_eq!(e.key(), Some(key), "{e}");
    }
    assert!(matches!(parse_config(None, &["--roundz", "3"]), Err(ConfigError::UnknownKey { .. })));
    assert!(matches!(parse_config(None, &["--rounds", "x"]), Err(ConfigError::TypeError { .. })));
    assert!(matches!(parse_config(None, &["--rounds", "-2"]), Err(ConfigError::RangeViolation { .. })));
    assert!(matches!(
        parse_config(None, &["--client_fraction", "1.5"]),
        Err(ConfigError::RangeViolation { .. })
    ));
    assert!(matches!(
        parse_config(Some(Path::new("/nonexistent/exp.yaml")), none),
        Err(ConfigError::Unreadable { .. })
    ));
}

#[test]
fn experiment_errors_carry_the_family() {
    let bad_layer = ExperimentConfig {
        layer: "w9".into(),
        ..small(0)
    };
    assert!(matches!(
        run_experiment(&bad_layer, Family::ReidClosed),
        Err(Error::Config(ConfigError::RangeViolation { .. }))
    ));
    // a prior holding every example leaves the anonymous devices empty
    let greedy = ExperimentConfig {
        prior_amounts: vec![60],
        ..small(0)
    };
    match run_experiment(&greedy, Family::PriorAmount) {
        Err(Error::Experiment { family, .. }) => assert_eq!(family, "prior_amount"),
        other => panic!("expected an experiment error, got {other:?}"),
    }
}

#[test]
fn every_family_runs_on_a_small_world() {
    let cfg = ExperimentConfig {
        seen_fractions: vec![0.0, 0.5],
        prior_amounts: vec![1, 5],
        train_amounts: vec![1, 4],
        epoch_ranges: 2,
        set_sizes: vec![1, 4],
        noise_grid: vec![0.1],
        alpha_grid: vec![0.5],
        clusters: 3,
        match_pairs: 200,
        ..small(5)
    };
    for family in Family::ALL {
        let r = run_experiment(&cfg, family).unwrap();
        assert_eq!(r.family, family);
        assert!(!r.tables.is_empty());
        for t in &r.tables {
            assert!(!t.rows.is_empty(), "{family} {}", t.name);
            assert!(t.rows.iter().all(|row| row.len() == t.columns.len()));
        }
    }
}
