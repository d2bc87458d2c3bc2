use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use fedleak::fed::build_devices;
use fedleak::harness::{
    attack_log, build_world, emit_report, federate, parse_config, run_experiment, ExperimentConfig, Family, Report,
};
use fedleak::store::{read_records, write_records, DeltaManifest};

/// Federated-learning deanonymization benchmark.
///
/// Every subcommand accepts `--config FILE` plus `--key value` overrides for
/// any config key (flags win over the file, the file wins over defaults).
#[derive(Parser)]
#[command(name = "fedleak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write it as JSON.
    GenWorld(Common),
    /// Run federated averaging and write the delta log.
    Federate(Common),
    /// Attack a delta log (the one in `--log`, or a fresh run) and write a report.
    Attack {
        /// Directory holding a delta log written by `federate`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the mitigation trade-off grid and write a report.
    Mitigate(Common),
    /// Run one experiment family and write its report.
    Report {
        /// One of: reid_closed, matching_closed, open_world, prior_amount,
        /// train_amount, layer_sweep, epoch_grid, iid_control, dataspace,
        /// bias_profile, mitigation.
        #[arg(long)]
        family: Family,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// YAML key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Record the wall-clock time in JSON reports.
    #[arg(long)]
    stamp: bool,
    /// Config overrides as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        Ok(parse_config(self.config.as_deref(), &self.overrides)?)
    }
}

fn write_report(cfg: &ExperimentConfig, mut report: Report, stamp: bool) -> Result<()> {
    if stamp {
        report.stamp();
    }
    let dir = Path::new(&cfg.output_dir);
    for p in emit_report(&report, dir, cfg.format)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld(c) => {
            let cfg = c.resolve()?;
            let world = build_world(&cfg)?;
            std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir))?;
            let path = Path::new(&cfg.output_dir).join("world.json");
            std::fs::write(&path, serde_json::to_string(&world)?).with_context(|| format!("writing {}", path.display()))?;
            println!("{}", path.display());
        }
        Command::Federate(c) => {
            let cfg = c.resolve()?;
            let world = build_world(&cfg)?;
            let out = federate(&cfg, &world)?;
            let manifest = DeltaManifest::new(cfg.model_spec().layout(), cfg.rounds, &build_devices(&world));
            let dir = Path::new(&cfg.output_dir).join("log");
            write_records(&dir, &manifest, &out.log)?;
            println!("{}", dir.display());
            eprintln!("final utility {:.4} over {} records", out.final_utility(), out.log.len());
        }
        Command::Attack { log, common } => {
            let cfg = common.resolve()?;
            let report = match log {
                Some(dir) => {
                    let (_, records) = read_records::<f64>(&dir)?;
                    attack_log(&cfg, &records)?
                }
                None => run_experiment(&cfg, Family::ReidClosed)?,
            };
            write_report(&cfg, report, common.stamp)?;
        }
        Command::Mitigate(c) => {
            let cfg = c.resolve()?;
            write_report(&cfg, run_experiment(&cfg, Family::Mitigation)?, c.stamp)?;
        }
        Command::Report { family, common } => {
            let cfg = common.resolve()?;
            write_report(&cfg, run_experiment(&cfg, family)?, common.stamp)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
