//! Replicated runs, trace files and summaries.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corral::run_corral;
use crate::efbo::run_efbo;
use crate::error::{CbusError, Result};
use crate::harness::config::{AlgoSpec, ExperimentConfig};
use crate::harness::trajectory::Trajectory;
use crate::protocol::Instance;
use crate::sampling::rng_from_seed;

/// One seeded run of `algo` on `instance`.
pub fn run_replication(instance: &Instance, algo: &AlgoSpec, horizon: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = rng_from_seed(seed);
    match algo {
        AlgoSpec::Efbo(spec) => {
            let config = spec.resolve(horizon, instance.n_actions(), instance.epsilon)?;
            run_efbo(instance, &config, horizon, &mut rng)
        }
        AlgoSpec::Corral(config) => run_corral(instance, config, horizon, &mut rng),
    }
}

/// Mean with a two-sided 95% Student-t interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    /// Absent with a single replication.
    pub half_width: Option<f64>,
}

impl MeanCi {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Self { mean, half_width: None };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let t = StudentsT::new(0.0, 1.0, n - 1.0).expect("positive degrees of freedom").inverse_cdf(0.975);
        Self { mean, half_width: Some(t * (var / n).sqrt()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub horizon: usize,
    pub seeds: Vec<u64>,
    pub cum_reg_r: MeanCi,
    pub cum_reg_c: MeanCi,
    pub total_z: MeanCi,
    pub total_queries: MeanCi,
}

/// Summary of traces listed in seed order.
pub fn summarize(seeds: &[u64], trajectories: &[Trajectory]) -> Summary {
    let col = |f: &dyn Fn(&Trajectory) -> f64| -> MeanCi {
        MeanCi::from_samples(&trajectories.iter().map(f).collect::<Vec<_>>())
    };
    Summary {
        horizon: trajectories.first().map_or(0, Trajectory::len),
        seeds: seeds.to_vec(),
        cum_reg_r: col(&|t| t.final_cum_reg_r()),
        cum_reg_c: col(&|t| t.final_cum_reg_c()),
        total_z: col(&|t| t.total_z() as f64),
        total_queries: col(&|t| t.total_queries() as f64),
    }
}

/// Thread count from `CBUS_THREADS`, or rayon's default.
pub fn thread_count() -> usize {
    std::env::var("CBUS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Runs `seeds` in parallel and returns traces in the order given.
pub fn run_seeds(instance: &Instance, algo: &AlgoSpec, horizon: usize, seeds: &[u64]) -> Result<Vec<Trajectory>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| CbusError::Internal(e.to_string()))?;
    pool.install(|| seeds.par_iter().map(|&s| run_replication(instance, algo, horizon, s)).collect())
}

pub fn trace_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("rep_{seed}.csv"))
}

/// Runs every replication, writes `rep_<seed>.csv` per run and
/// `summary.json`. Relative paths resolve against `base_dir`.
pub fn run_experiment(config: &ExperimentConfig, base_dir: &Path) -> Result<Summary> {
    config.validate()?;
    let instance = config.instance.load(base_dir)?;
    let out = if config.out.is_absolute() { config.out.clone() } else { base_dir.join(&config.out) };
    std::fs::create_dir_all(&out)?;
    let seeds: Vec<u64> = (0..config.replications as u64).map(|i| config.seed + i).collect();
    let trajectories = run_seeds(&instance, &config.algo, config.horizon, &seeds)?;
    for (seed, tr) in seeds.iter().zip(&trajectories) {
        tr.write_csv(std::fs::File::create(trace_path(&out, *seed))?)?;
    }
    let summary = summarize(&seeds, &trajectories);
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_known_values() {
        let ci = MeanCi::from_samples(&[1.0, 2.0, 3.0]);
        assert_eq!(ci.mean, 2.0);
        // t_{0.975, 2} = 4.302653
        assert!((ci.half_width.unwrap() - 4.302653 * (1.0f64 / 3.0).sqrt()).abs() < 1e-5);
        assert_eq!(MeanCi::from_samples(&[5.0]).half_width, None);
    }
}
