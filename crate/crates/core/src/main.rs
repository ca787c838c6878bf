use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use cbus::harness::config::{load_checked, ExperimentConfig};
use cbus::harness::experiment::run_experiment;
use cbus::harness::fit::fit_scaling_exponent;
use cbus::harness::tradeoff::{check_tradeoff, TradeoffConfig};
use cbus::harness::trajectory::Trajectory;
use cbus::oracle::solve_cbus;
use cbus::protocol::{validate_instance, Instance};
use cbus::{CbusError, Result};

/// Simulation lab for contextual bandits with user-triggered supervision.
#[derive(Parser)]
#[command(name = "cbus", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a replicated experiment from a config file.
    Run { config: PathBuf },
    /// Run a config at several horizons and fit the regret exponent.
    Sweep {
        /// `2^a..2^b` or a comma-separated list.
        #[arg(long)]
        horizons: String,
        config: PathBuf,
        #[arg(long, default_value = "cum_reg_r")]
        column: String,
        #[arg(long)]
        check: bool,
        /// Accepted slope range as `lo:hi`.
        #[arg(long)]
        expect_slope: Option<String>,
    },
    /// List broken invariants of an instance file.
    Validate { instance: PathBuf },
    /// Print the exact ground truth of an instance file.
    Oracle { instance: PathBuf },
    /// Fit the growth exponent of a column over traces of different lengths.
    Fit {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = "cum_reg_r")]
        column: String,
    },
    /// Sweep the hard two-policy instance.
    Tradeoff {
        config: Option<PathBuf>,
        #[arg(long)]
        check: bool,
    },
}

enum Outcome {
    Ok,
    CheckFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CbusError::InvalidConfig(format!("cannot read {}: {e}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_horizon(s: &str) -> Result<usize> {
    let s = s.trim();
    let bad = || CbusError::InvalidArgument(format!("bad horizon `{s}`"));
    match s.strip_prefix("2^") {
        Some(exp) => {
            let e: u32 = exp.parse().map_err(|_| bad())?;
            1usize.checked_shl(e).ok_or_else(bad)
        }
        None => s.parse().map_err(|_| bad()),
    }
}

fn parse_horizons(spec: &str) -> Result<Vec<usize>> {
    if let Some((lo, hi)) = spec.split_once("..") {
        let (lo, hi) = (parse_horizon(lo)?, parse_horizon(hi)?);
        if !lo.is_power_of_two() || !hi.is_power_of_two() || lo > hi {
            return Err(CbusError::InvalidArgument(format!("bad horizon range `{spec}`")));
        }
        let (a, b) = (lo.trailing_zeros(), hi.trailing_zeros());
        return Ok((a..=b).map(|e| 1usize << e).collect());
    }
    spec.split(',').map(parse_horizon).collect()
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || CbusError::InvalidArgument(format!("bad range `{s}`, expected lo:hi"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::from_json(&read(&config)?)?;
            print_json(&run_experiment(&cfg, &base_dir(&config))?)?;
            Ok(Outcome::Ok)
        }
        Command::Sweep { horizons, config, column, check, expect_slope } => {
            let horizons = parse_horizons(&horizons)?;
            let expected = expect_slope.as_deref().map(parse_range).transpose()?;
            if check && expected.is_none() {
                return Err(CbusError::InvalidArgument("--check needs --expect-slope lo:hi".into()));
            }
            let cfg = ExperimentConfig::from_json(&read(&config)?)?;
            let dir = base_dir(&config);
            let mut points = Vec::new();
            for &t in &horizons {
                let mut at_t = cfg.clone();
                at_t.horizon = t;
                at_t.out = cfg.out.join(format!("T_{t}"));
                at_t.validate()?;
                let summary = run_experiment(&at_t, &dir)?;
                let value = match column.as_str() {
                    "cum_reg_r" => summary.cum_reg_r.mean,
                    "cum_reg_c" => summary.cum_reg_c.mean,
                    other => return Err(CbusError::InvalidArgument(format!("cannot sweep column `{other}`"))),
                };
                points.push((t as f64, value));
            }
            let fit = fit_scaling_exponent(&points)?;
            let pass = expected.map(|(lo, hi)| (lo..=hi).contains(&fit.slope));
            print_json(&json!({ "column": column, "points": points, "fit": fit, "pass": pass }))?;
            Ok(if check && pass == Some(false) { Outcome::CheckFailed } else { Outcome::Ok })
        }
        Command::Validate { instance } => {
            let inst = Instance::from_json(&read(&instance)?)?;
            let violations = validate_instance(&inst);
            print_json(&violations)?;
            if violations.is_empty() {
                Ok(Outcome::Ok)
            } else {
                Err(CbusError::InvalidConfig(format!("{} invariant violation(s)", violations.len())))
            }
        }
        Command::Oracle { instance } => {
            let inst = load_checked(&read(&instance)?)?;
            print_json(&solve_cbus(&inst))?;
            Ok(Outcome::Ok)
        }
        Command::Fit { csv, column } => {
            let mut points = Vec::new();
            for path in &csv {
                let file = std::fs::File::open(path)
                    .map_err(|e| CbusError::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
                let tr = Trajectory::read_csv(file)?;
                points.push((tr.len() as f64, tr.final_value(&column)?));
            }
            print_json(&json!({ "column": column, "points": points, "fit": fit_scaling_exponent(&points)? }))?;
            Ok(Outcome::Ok)
        }
        Command::Tradeoff { config, check } => {
            let cfg: TradeoffConfig = match &config {
                Some(path) => serde_json::from_str(&read(path)?)?,
                None => TradeoffConfig::default(),
            };
            let rows = cfg.run()?;
            let verdict = check_tradeoff(&rows, cfg.c, cfg.horizon);
            print_json(&json!({ "rows": rows, "verdict": verdict, "pass": verdict.passed() }))?;
            Ok(if check && !verdict.passed() { Outcome::CheckFailed } else { Outcome::Ok })
        }
    }
}
