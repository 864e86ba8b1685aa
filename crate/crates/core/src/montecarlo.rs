//! Monte Carlo replication study on the simulation design.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{generate_sample, DgpParams};
use crate::error::{PrteError, Result};
use crate::estimator::{estimate, EstimateResult, EstimationConfig, Z_95};
use crate::kernel::Bandwidths;
use crate::policy::Policy;

/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum McPolicy {
    /// `P* = P + a(1 − P)`.
    Proportional { a: f64 },
    /// `Z* = Z + c` in every coordinate.
    ZTranslation { c: f64 },
}

impl McPolicy {
    pub fn policy(&self) -> Result<Policy> {
        match *self {
            McPolicy::Proportional { a } => Policy::proportional(a),
            McPolicy::ZTranslation { c } => Ok(Policy::z_translation(c)),
        }
    }

    pub fn true_effect(&self, params: &DgpParams) -> Result<f64> {
        match *self {
            McPolicy::Proportional { a } => params.prte(a),
            McPolicy::ZTranslation { c } => params.prte_z_translation(c),
        }
    }
}

#[derive(Debug, Clone)]
pub struct McConfig {
    pub n: usize,
    pub folds: usize,
    pub replications: usize,
    pub policy: McPolicy,
    pub seed: u64,
    pub bw: Bandwidths,
    pub z_quantile: f64,
    pub params: DgpParams,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n: 500,
            folds: 5,
            replications: 1000,
            policy: McPolicy::Proportional { a: 0.5 },
            seed: 20240601,
            bw: Bandwidths::default(),
            z_quantile: Z_95,
            params: DgpParams::default(),
            threads: None,
        }
    }
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    pub prte_hat: f64,
    pub se: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub n: usize,
    #[serde(rename = "L")]
    pub folds: usize,
    pub replications: usize,
    pub true_prte: f64,
    pub mean: f64,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub failures: usize,
    pub wall_time: f64,
    /// Successful replications in index order.
    #[serde(skip)]
    pub replicates: Vec<Replicate>,
}

impl McReport {
    /// Sample variance (denominator R) of the successful estimates.
    pub fn variance(&self) -> f64 {
        let r = self.replicates.len() as f64;
        self.replicates.iter().map(|x| (x.prte_hat - self.mean).powi(2)).sum::<f64>() / r
    }
}

/// RNG of replication `r`: the master seed with stream `r`.
pub fn replication_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

/// Simulates and estimates replication `r`.
pub fn run_replication(config: &McConfig, policy: &Policy, r: usize) -> Result<EstimateResult> {
    let mut rng = replication_rng(config.seed, r);
    let data = generate_sample(&config.params, config.n, &mut rng);
    let est = EstimationConfig {
        folds: config.folds,
        bw: config.bw,
        policy: policy.clone(),
        seed: rng.random(),
        z_quantile: config.z_quantile,
        ..EstimationConfig::new(policy.clone())
    };
    estimate(&data, &est)
}

pub fn run_replications(config: &McConfig) -> Result<McReport> {
    if config.replications == 0 {
        return Err(PrteError::Config("need at least one replication".into()));
    }
    if config.n < 2 * config.folds {
        return Err(PrteError::InsufficientSample {
            n: config.n,
            folds: config.folds,
            needed: 2 * config.folds,
        });
    }
    config.bw.validate()?;
    let policy = config.policy.policy()?;
    let truth = config.policy.true_effect(&config.params)?;
    let start = Instant::now();

    let work = || -> Vec<Result<EstimateResult>> {
        (0..config.replications)
            .into_par_iter()
            .map(|r| run_replication(config, &policy, r))
            .collect()
    };
    let outcomes = match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| PrteError::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut replicates = Vec::with_capacity(outcomes.len());
    let mut failures = 0;
    for (index, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(e) => replicates.push(Replicate {
                index,
                prte_hat: e.prte_hat,
                se: e.se,
                covered: (e.prte_hat - truth).abs() <= config.z_quantile * e.se,
            }),
            Err(_) => failures += 1,
        }
    }
    let ok = replicates.len() as f64;
    let (mean, rmse, coverage) = if replicates.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let mean = replicates.iter().map(|r| r.prte_hat).sum::<f64>() / ok;
        let mse = replicates.iter().map(|r| (r.prte_hat - truth).powi(2)).sum::<f64>() / ok;
        let covered = replicates.iter().filter(|r| r.covered).count() as f64;
        (mean, mse.sqrt(), covered / ok)
    };
    let report = McReport {
        n: config.n,
        folds: config.folds,
        replications: config.replications,
        true_prte: truth,
        mean,
        bias: mean - truth,
        rmse,
        coverage,
        failures,
        wall_time: start.elapsed().as_secs_f64(),
        replicates,
    };
    if failures as f64 > MAX_FAILURE_RATE * config.replications as f64 {
        return Err(PrteError::TooManyFailures {
            failures,
            replications: config.replications,
            report: Box::new(report),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small(reps: usize) -> McConfig {
        McConfig {
            n: 200,
            replications: reps,
            ..McConfig::default()
        }
    }

    fn strip(mut r: McReport) -> McReport {
        r.wall_time = 0.0;
        r
    }

    #[test]
    fn single_replication() {
        let report = run_replications(&small(1)).unwrap();
        assert_eq!(report.replicates.len(), 1);
        assert_eq!(report.mean, report.replicates[0].prte_hat);
        assert_abs_diff_eq!(report.rmse, report.bias.abs(), epsilon = 1e-15);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let one = McConfig {
            threads: Some(1),
            ..small(6)
        };
        let four = McConfig {
            threads: Some(4),
            ..small(6)
        };
        assert_eq!(strip(run_replications(&one).unwrap()), strip(run_replications(&four).unwrap()));
    }

    #[test]
    fn rmse_decomposes() {
        let r = run_replications(&small(8)).unwrap();
        assert_abs_diff_eq!(r.rmse.powi(2), r.bias.powi(2) + r.variance(), epsilon = 1e-14);
        assert!((0.0..=1.0).contains(&r.coverage));
    }

    #[test]
    fn failures_are_counted() {
        // Degenerate covariates make every feature moment matrix singular.
        let params = DgpParams {
            x_vars: [0.0, 0.0],
            ..DgpParams::default()
        };
        let config = McConfig {
            params,
            ..small(3)
        };
        match run_replications(&config) {
            Err(PrteError::TooManyFailures { failures, report, .. }) => {
                assert_eq!(failures, 3);
                assert_eq!(report.failures, 3);
                assert!(report.coverage.is_nan());
            }
            other => panic!("expected failure report, got {other:?}"),
        }
    }

    #[test]
    fn streams_differ_by_index() {
        let a: u64 = replication_rng(1, 0).random();
        let b: u64 = replication_rng(1, 1).random();
        assert_ne!(a, b);
        let c: u64 = replication_rng(1, 0).random();
        assert_eq!(a, c);
    }
}
