//! Orchestration of experiment families and machine-readable reports.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::{
    build_attack_dataset, closed_world_attack, consistency_by_user, dataspace_reid, evaluate_matcher,
    evaluate_openworld, evaluate_reid, open_world_split, train_matcher_with, train_reid_openworld, train_reid_with,
    AttackDataset, AttackFilters, AttackRow, AttackScore, DataspaceMode, MatchMethod, ReidMethod, SiameseConfig,
};
use crate::data::{gen_world, intra_inter_distances, make_iid_control, DatasetBundle};
use crate::error::{Error, Result};
use crate::fed::{run_federated, DeltaRecord, FedOutcome};
use crate::mitigation::{tradeoff_curve, Mitigation, MitigationConfig};
use crate::store::{RecordFilter, ReprConfig};

pub use config::{
    parse_config, parse_config_text, parse_flags, read_config_file, resolve, ConfigError, ExperimentConfig,
    ModelName, Overrides, PriorName, ReportFormat, StrategyName,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ReidClosed,
    MatchingClosed,
    OpenWorld,
    PriorAmount,
    TrainAmount,
    LayerSweep,
    EpochGrid,
    IidControl,
    Dataspace,
    BiasProfile,
    Mitigation,
}

impl Family {
    pub const ALL: [Family; 11] = [
        Family::ReidClosed,
        Family::MatchingClosed,
        Family::OpenWorld,
        Family::PriorAmount,
        Family::TrainAmount,
        Family::LayerSweep,
        Family::EpochGrid,
        Family::IidControl,
        Family::Dataspace,
        Family::BiasProfile,
        Family::Mitigation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::ReidClosed => "reid_closed",
            Family::MatchingClosed => "matching_closed",
            Family::OpenWorld => "open_world",
            Family::PriorAmount => "prior_amount",
            Family::TrainAmount => "train_amount",
            Family::LayerSweep => "layer_sweep",
            Family::EpochGrid => "epoch_grid",
            Family::IidControl => "iid_control",
            Family::Dataspace => "dataspace",
            Family::BiasProfile => "bias_profile",
            Family::Mitigation => "mitigation",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s.replace('-', "_"))
            .ok_or_else(|| {
                let names: Vec<&str> = Family::ALL.iter().map(|f| f.name()).collect();
                format!("unknown family `{s}`; expected one of {}", names.join(", "))
            })
    }
}

/// A named result table. The first two columns of every table are the run's
/// seed and config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        let mut cols = vec!["seed".to_owned(), "config_hash".to_owned()];
        cols.extend(columns.iter().map(|c| c.to_string()));
        Table {
            name: name.to_owned(),
            columns: cols,
            rows: Vec::new(),
        }
    }

    /// Column index by name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Numeric values of one column.
    pub fn numbers(&self, name: &str) -> Vec<f64> {
        let Some(i) = self.column(name) else { return Vec::new() };
        self.rows.iter().filter_map(|r| r[i].as_f64()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment_id: String,
    pub family: Family,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Unix seconds; omitted unless requested so reruns stay byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<u64>,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn stamp(&mut self) {
        self.created = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs());
    }
}

struct Builder<'a> {
    cfg: &'a ExperimentConfig,
    hash: String,
    tables: Vec<Table>,
}

impl Builder<'_> {
    fn table(&mut self, name: &str, columns: &[&str]) -> usize {
        self.tables.push(Table::new(name, columns));
        self.tables.len() - 1
    }

    fn finish(self, family: Family) -> Report {
        Report {
            experiment_id: format!("{}-{}", family.name(), &self.hash[..12]),
            family,
            config: self.cfg.clone(),
            config_hash: self.hash,
            seed: self.cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_owned(),
            created: None,
            tables: self.tables,
        }
    }

    fn row(&mut self, table: usize, cells: Vec<Value>) {
        let mut row = vec![Value::from(self.cfg.seed), Value::from(self.hash.clone())];
        row.extend(cells);
        debug_assert_eq!(row.len(), self.tables[table].columns.len());
        self.tables[table].rows.push(row);
    }
}

fn num(v: f64) -> Value {
    // non-finite values have no JSON number form
    serde_json::Number::from_f64(v).map_or_else(|| Value::from(v.to_string()), Value::Number)
}

/// The world described by `cfg`, with the configured prior split.
pub fn build_world(cfg: &ExperimentConfig) -> Result<DatasetBundle<f64>> {
    let mut world = gen_world::<f64>(&cfg.world())?;
    world.resplit(cfg.prior(), cfg.prior_fraction, cfg.seed)?;
    Ok(world)
}

pub fn federate(cfg: &ExperimentConfig, world: &DatasetBundle<f64>) -> Result<FedOutcome<f64>> {
    run_federated(world, &cfg.model_spec(), &cfg.round_config())
}

/// Generate, federate, attack and score one experiment family.
pub fn run_experiment(cfg: &ExperimentConfig, family: Family) -> Result<Report> {
    cfg.validate()?;
    let mut b = Builder {
        cfg,
        hash: cfg.hash(),
        tables: Vec::new(),
    };
    run_family(&mut b, family).map_err(|e| Error::Experiment {
        family: family.name().to_owned(),
        source: Box::new(e),
    })?;
    Ok(b.finish(family))
}

/// Closed-world re-identification report for a log produced elsewhere, e.g.
/// one read back from disk.
pub fn attack_log(cfg: &ExperimentConfig, log: &[DeltaRecord<f64>]) -> Result<Report> {
    cfg.validate()?;
    let mut b = Builder {
        cfg,
        hash: cfg.hash(),
        tables: Vec::new(),
    };
    let t = b.table("reid", &["method", "metric", "value"]);
    let ds = build_attack_dataset(log, &cfg.repr(), &AttackFilters::default())?;
    for (method, s) in reid_scores(&ds, &cfg.reid_methods, cfg)? {
        for (metric, v) in score_metrics(&s) {
            b.row(t, vec![method.name().into(), metric.into(), num(v)]);
        }
    }
    Ok(b.finish(Family::ReidClosed))
}

fn score_metrics(s: &AttackScore) -> [(&'static str, f64); 5] {
    [
        ("ap", s.mean_ap),
        ("chance_ap", s.chance_ap),
        ("ioc", s.increase_over_chance),
        ("top1", s.top1),
        ("top5", s.top5),
    ]
}

fn run_family(b: &mut Builder<'_>, family: Family) -> Result<()> {
    let cfg = b.cfg;
    match family {
        Family::Dataspace => return dataspace(b),
        Family::PriorAmount => return prior_amount(b),
        Family::Mitigation => return mitigation(b),
        _ => {}
    }
    let world = build_world(cfg)?;
    let out = federate(cfg, &world)?;
    let log = &out.log;
    let recipe = cfg.recipe();
    match family {
        Family::ReidClosed => {
            let t = b.table("reid", &["method", "metric", "value"]);
            let ds = build_attack_dataset(log, &recipe.repr, &AttackFilters::default())?;
            for (method, s) in reid_scores(&ds, &cfg.reid_methods, cfg)? {
                for (metric, v) in score_metrics(&s) {
                    b.row(t, vec![method.name().into(), metric.into(), num(v)]);
                }
            }
            let u = b.table("utility", &["round", "utility"]);
            for (i, v) in out.utility.iter().enumerate() {
                b.row(u, vec![(i + 1).into(), num(*v)]);
            }
        }
        Family::MatchingClosed => {
            let t = b.table("matching", &["method", "ap", "chance_ap", "ioc"]);
            let ds = build_attack_dataset(log, &recipe.repr, &AttackFilters::default())?;
            let scores: Vec<_> = cfg
                .match_methods
                .par_iter()
                .map(|&m| {
                    let model = train_matcher_with(&ds, m, &recipe.reid, &SiameseConfig::default(), cfg.seed)?;
                    Ok((m, evaluate_matcher(&model, &ds.test, cfg.match_pairs, cfg.seed ^ 0xe7a1)?))
                })
                .collect::<Result<_>>()?;
            for (m, s) in scores {
                b.row(t, vec![m.name().into(), num(s.ap), num(s.chance_ap), num(s.increase_over_chance)]);
            }
        }
        Family::OpenWorld => {
            let t = b.table(
                "open_world",
                &["seen_fraction", "attack", "ap", "chance_ap", "ioc"],
            );
            let open = AttackFilters {
                closed_world: false,
                ..Default::default()
            };
            let ds = build_attack_dataset(log, &recipe.repr, &open)?;
            let rows: Vec<_> = cfg
                .seen_fractions
                .par_iter()
                .map(|&f| open_world_point(&ds, f, cfg))
                .collect::<Result<_>>()?;
            for (f, reid, matching) in rows {
                b.row(t, vec![num(f), "reid_mlp".into(), num(reid.0), num(reid.1), num(reid.0 / reid.1)]);
                if let Some(m) = matching {
                    b.row(t, vec![num(f), "match_siamese".into(), num(m.0), num(m.1), num(m.0 / m.1)]);
                }
            }
        }
        Family::TrainAmount => {
            let t = b.table("train_amount", &["shadow_deltas_per_user", "method", "ap", "chance_ap", "ioc"]);
            let rows: Vec<_> = cfg
                .train_amounts
                .par_iter()
                .map(|&k| {
                    let f = AttackFilters {
                        train: RecordFilter {
                            max_per_user: Some(k),
                            seed: cfg.seed,
                            ..Default::default()
                        },
                        ..Default::default()
                    };
                    let ds = build_attack_dataset(log, &recipe.repr, &f)?;
                    Ok((k, reid_scores(&ds, &[ReidMethod::Knn, ReidMethod::Mlp], cfg)?))
                })
                .collect::<Result<_>>()?;
            for (k, scores) in rows {
                for (m, s) in scores {
                    b.row(
                        t,
                        vec![k.into(), m.name().into(), num(s.mean_ap), num(s.chance_ap), num(s.increase_over_chance)],
                    );
                }
            }
        }
        Family::LayerSweep => {
            let t = b.table("layer_sweep", &["layer", "values", "ap", "chance_ap", "ioc"]);
            let layout = cfg.model_spec().layout();
            let rows: Vec<_> = layout
                .par_iter()
                .map(|l| {
                    let r = recipe_for_layer(cfg, &l.name);
                    Ok((l.name.clone(), l.len(), closed_world_attack(log, &r, ReidMethod::Mlp)?))
                })
                .collect::<Result<_>>()?;
            for (name, len, s) in rows {
                b.row(t, vec![name.into(), len.into(), num(s.mean_ap), num(s.chance_ap), num(s.increase_over_chance)]);
            }
        }
        Family::EpochGrid => {
            let t = b.table(
                "epoch_grid",
                &["train_range", "eval_range", "train_rounds", "eval_rounds", "ap", "chance_ap", "ioc"],
            );
            let ds = build_attack_dataset(log, &recipe.repr, &AttackFilters::default())?;
            let ranges = round_ranges(cfg.rounds, cfg.epoch_ranges);
            let cells: Vec<(usize, usize)> = (0..ranges.len())
                .flat_map(|i| (0..ranges.len()).map(move |j| (i, j)))
                .collect();
            let scores: Vec<_> = cells
                .par_iter()
                .map(|&(i, j)| {
                    let sub = ds.restrict_rounds(ranges[i], ranges[j]);
                    let m = train_reid_with(&sub, ReidMethod::Mlp, &recipe.reid, cfg.seed)?;
                    evaluate_reid(&m, &sub.test)
                })
                .collect::<Result<_>>()?;
            let fmt = |(lo, hi): (usize, usize)| format!("{lo}-{}", hi - 1);
            for (&(i, j), s) in cells.iter().zip(scores) {
                b.row(
                    t,
                    vec![
                        i.into(),
                        j.into(),
                        fmt(ranges[i]).into(),
                        fmt(ranges[j]).into(),
                        num(s.mean_ap),
                        num(s.chance_ap),
                        num(s.increase_over_chance),
                    ],
                );
            }
        }
        Family::IidControl => {
            let t = b.table("iid_control", &["world", "method", "ap", "chance_ap", "ioc"]);
            let iid = make_iid_control(&world, cfg.seed ^ 0x11d);
            let iid_out = federate(cfg, &iid)?;
            for (name, l) in [("biased", log), ("iid", &iid_out.log)] {
                let ds = build_attack_dataset(l, &recipe.repr, &AttackFilters::default())?;
                for (m, s) in reid_scores(&ds, &cfg.reid_methods, cfg)? {
                    b.row(
                        t,
                        vec![name.into(), m.name().into(), num(s.mean_ap), num(s.chance_ap), num(s.increase_over_chance)],
                    );
                }
            }
        }
        Family::BiasProfile => {
            let d = b.table("distances", &["user", "intra_median", "inter_median"]);
            for u in intra_inter_distances(&world, cfg.seed)? {
                b.row(d, vec![u.user_id.into(), num(u.intra_median), num(u.inter_median)]);
            }
            let c = b.table("consistency", &["user", "own", "cross"]);
            let layer = cfg.model_spec().final_weight_layer();
            for u in consistency_by_user(log, layer)? {
                b.row(c, vec![u.user_id.into(), num(u.own), num(u.cross)]);
            }
        }
        Family::Dataspace | Family::PriorAmount | Family::Mitigation => unreachable!(),
    }
    Ok(())
}

fn recipe_for_layer(cfg: &ExperimentConfig, layer: &str) -> crate::attacks::AttackRecipe {
    let mut r = cfg.recipe();
    r.repr = ReprConfig {
        layer: layer.to_owned(),
        normalize: cfg.normalize,
    };
    r
}

fn reid_scores(
    ds: &AttackDataset<f64>,
    methods: &[ReidMethod],
    cfg: &ExperimentConfig,
) -> Result<Vec<(ReidMethod, AttackScore)>> {
    let recipe = cfg.recipe();
    methods
        .par_iter()
        .map(|&m| {
            let model = train_reid_with(ds, m, &recipe.reid, cfg.seed)?;
            Ok((m, evaluate_reid(&model, &ds.test)?))
        })
        .collect()
}

/// Splits rounds `1..=rounds` into `r` contiguous half-open ranges.
pub fn round_ranges(rounds: usize, r: usize) -> Vec<(usize, usize)> {
    (0..r)
        .map(|i| (1 + i * rounds / r, 1 + (i + 1) * rounds / r))
        .collect()
}

type OpenWorldPoint = (f64, (f64, f64), Option<(f64, f64)>);

fn open_world_point(ds: &AttackDataset<f64>, seen_fraction: f64, cfg: &ExperimentConfig) -> Result<OpenWorldPoint> {
    let recipe = cfg.recipe();
    let split = open_world_split(&ds.users, seen_fraction, cfg.seed)?;
    let model = train_reid_openworld(ds, &split, &recipe.reid, cfg.seed)?;
    let s = evaluate_openworld(&model, &split, &ds.test)?;
    // the matcher learns from the users the adversary holds prior data for,
    // and is tested on the users it may meet
    let known = |u: u32| split.seen.binary_search(&u).is_ok() || split.holdout.binary_search(&u).is_ok();
    let met = |u: u32| split.seen.binary_search(&u).is_ok() || split.unseen.binary_search(&u).is_ok();
    let sub = AttackDataset {
        train: ds.train.iter().filter(|r| known(r.user_id)).cloned().collect(),
        test: ds.test.iter().filter(|r| met(r.user_id)).cloned().collect(),
        users: ds.users.iter().copied().filter(|&u| known(u)).collect(),
    };
    let distinct = |rows: &[AttackRow<f64>]| {
        let mut u: Vec<u32> = rows.iter().map(|r| r.user_id).collect();
        u.sort_unstable();
        u.dedup();
        u.len()
    };
    let matching = if sub.users.len() >= 2 && distinct(&sub.test) >= 2 {
        let m = train_matcher_with(&sub, MatchMethod::Siamese, &recipe.reid, &SiameseConfig::default(), cfg.seed)?;
        let ms = evaluate_matcher(&m, &sub.test, cfg.match_pairs, cfg.seed ^ 0xe7a1)?;
        Some((ms.ap, ms.chance_ap))
    } else {
        None
    };
    Ok((seen_fraction, (s.mean_ap, s.chance_ap), matching))
}

fn dataspace(b: &mut Builder<'_>) -> Result<()> {
    let cfg = b.cfg;
    let world = build_world(cfg)?;
    let recipe = cfg.recipe();
    let t = b.table("dataspace", &["mode", "set_size", "ap", "chance_ap", "ioc", "top1"]);
    let scores: Vec<_> = cfg
        .set_sizes
        .par_iter()
        .map(|&k| {
            let mode = if k == 1 {
                DataspaceMode::Single
            } else {
                DataspaceMode::Set { set_size: k }
            };
            Ok((mode, k, dataspace_reid(&world, mode, &recipe.reid, cfg.seed)?.1))
        })
        .collect::<Result<_>>()?;
    for (mode, k, s) in scores {
        let name = match mode {
            DataspaceMode::Single => "single",
            DataspaceMode::Set { .. } => "set",
        };
        b.row(
            t,
            vec![name.into(), k.into(), num(s.mean_ap), num(s.chance_ap), num(s.increase_over_chance), num(s.top1)],
        );
    }
    Ok(())
}

fn prior_amount(b: &mut Builder<'_>) -> Result<()> {
    let cfg = b.cfg;
    let base = gen_world::<f64>(&cfg.world())?;
    let t = b.table("prior_amount", &["prior_examples_per_user", "ap", "chance_ap", "ioc", "utility"]);
    let rows: Vec<_> = cfg
        .prior_amounts
        .par_iter()
        .map(|&n| {
            let mut world = base.clone();
            world.resplit(cfg.prior(), n as f64 / cfg.n_per_user as f64, cfg.seed)?;
            let out = federate(cfg, &world)?;
            Ok((n, closed_world_attack(&out.log, &cfg.recipe(), ReidMethod::Mlp)?, out.final_utility()))
        })
        .collect::<Result<_>>()?;
    for (n, s, u) in rows {
        b.row(t, vec![n.into(), num(s.mean_ap), num(s.chance_ap), num(s.increase_over_chance), num(u)]);
    }
    Ok(())
}

/// The no-mitigation anchor followed by every configured strategy setting.
pub fn mitigation_grid(cfg: &ExperimentConfig) -> Vec<MitigationConfig> {
    let mut grid = vec![Mitigation::None];
    for s in &cfg.strategies {
        match s {
            StrategyName::Noise => grid.extend(cfg.noise_grid.iter().map(|&sigma2| Mitigation::Noise { sigma2 })),
            StrategyName::BkgRepl => grid.extend(
                cfg.alpha_grid
                    .iter()
                    .filter(|&&a| a <= 1.0)
                    .map(|&alpha| Mitigation::BkgRepl { alpha }),
            ),
            StrategyName::RandAug => grid.extend(cfg.alpha_grid.iter().map(|&alpha| Mitigation::RandAug { alpha })),
            StrategyName::MmAug => grid.extend(cfg.alpha_grid.iter().map(|&alpha| Mitigation::MmAug {
                alpha,
                clusters: cfg.clusters,
            })),
        }
    }
    grid.into_iter()
        .map(|mitigation| MitigationConfig {
            mitigation,
            seed: cfg.seed,
        })
        .collect()
}

fn mitigation(b: &mut Builder<'_>) -> Result<()> {
    let cfg = b.cfg;
    let world = build_world(cfg)?;
    let points = tradeoff_curve(&world, &cfg.model_spec(), &cfg.round_config(), &cfg.recipe(), &mitigation_grid(cfg))?;
    let t = b.table(
        "tradeoff",
        &["strategy", "parameter", "privacy_ioc", "attack_ap", "chance_ap", "utility", "raw_utility"],
    );
    for p in points {
        b.row(
            t,
            vec![
                p.strategy.into(),
                num(p.parameter),
                num(p.privacy),
                num(p.attack_ap),
                num(p.chance_ap),
                num(p.utility),
                num(p.raw_utility),
            ],
        );
    }
    Ok(())
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Writes `<id>_<table>.csv` files and/or `<id>.json` into `dir`; returns the paths.
pub fn emit_report(report: &Report, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let stem = report.family.name();
    if matches!(format, ReportFormat::Csv | ReportFormat::Both) {
        for t in &report.tables {
            let path = dir.join(format!("{stem}_{}.csv", t.name));
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
            w.write_record(&t.columns).map_err(|e| csv_err(&path, e))?;
            for row in &t.rows {
                w.write_record(row.iter().map(cell_text)).map_err(|e| csv_err(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    if matches!(format, ReportFormat::Json | ReportFormat::Both) {
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(report).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serde(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_ranges_partition() {
        let r = round_ranges(50, 5);
        assert_eq!(r, vec![(1, 11), (11, 21), (21, 31), (31, 41), (41, 51)]);
        let r = round_ranges(7, 3);
        assert_eq!(r.first().unwrap().0, 1);
        assert_eq!(r.last().unwrap().1, 8);
        assert!(r.windows(2).all(|w| w[0].1 == w[1].0));
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("nope".parse::<Family>().is_err());
        assert_eq!("epoch-grid".parse::<Family>().unwrap(), Family::EpochGrid);
    }

    #[test]
    fn grid_always_starts_at_anchor() {
        let g = mitigation_grid(&ExperimentConfig::default());
        assert_eq!(g[0].mitigation, Mitigation::None);
        assert_eq!(g.iter().filter(|c| matches!(c.mitigation, Mitigation::Noise { .. })).count(), 5);
        assert!(g.iter().all(|c| c.mitigation.validate().is_ok()));
    }
}
