//! Out-of-sample replay of a calibrated pair.
//!
//! The leg P is replaced by its hedge-regression fit `p~ = exp(alpha + beta
//! log p)` and normalized to 1 at the start of the test window, so boundaries
//! are solved with `p0 = 1` and profits are in units of that initial price.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::calibration::{
    calibrate, read_price_file, AdfDecision, CalibrationOptions, CalibrationReport, PriceHistory,
    TRADING_DAYS_PER_YEAR,
};
use crate::error::{ensure_positive, Error, Result};
use crate::market::{CostSpec, ModelParams};
use crate::path_sim::{path_rng, PathView};
use crate::scenario::GridSettings;
use crate::solver::{solve, SolveOptions};
use crate::trading::{run_benchmark_strategy, run_optimal_strategy, BenchmarkSettings, BoundaryPolicy, StrategyResult};

pub const DEFAULT_BACKTEST_N_TIME: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub name: String,
    pub p_file: PathBuf,
    pub q_file: PathBuf,
    pub calibration_start: NaiveDate,
    pub calibration_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_costs")]
    pub costs: CostSpec,
    #[serde(default = "default_delta_t")]
    pub delta_t: f64,
    #[serde(default)]
    pub grid: GridSettings,
    #[serde(default)]
    pub calibration: CalibrationOptions,
    #[serde(default)]
    pub benchmark: BenchmarkSettings,
}

fn default_gamma() -> f64 {
    5.0
}
fn default_costs() -> CostSpec {
    CostSpec::uniform(0.0005)
}
fn default_delta_t() -> f64 {
    1.0 / TRADING_DAYS_PER_YEAR
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.calibration_start >= self.calibration_end {
            return Err(Error::invalid("calibration window", "start must precede end"));
        }
        if self.test_start >= self.test_end {
            return Err(Error::invalid("test window", "start must precede end"));
        }
        if self.test_start <= self.calibration_end {
            return Err(Error::invalid("test window", "must start after the calibration window ends"));
        }
        ensure_positive("gamma", self.gamma)?;
        ensure_positive("delta_t", self.delta_t)?;
        self.costs.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum BacktestOutcome {
    Traded {
        params: ModelParams,
        optimal: StrategyResult,
        benchmark: StrategyResult,
        test_days: usize,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct BacktestReport {
    pub pair: String,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
    pub calibration: CalibrationReport,
    pub outcome: BacktestOutcome,
}

pub const SKIP_UNIT_ROOT: &str = "unit root not rejected";

/// Backtest from in-memory series (joined on common dates).
pub fn run_backtest_on_series(
    config: &PairConfig,
    p: &[(NaiveDate, f64)],
    q: &[(NaiveDate, f64)],
) -> Result<BacktestReport> {
    config.validate()?;
    let all = PriceHistory::from_series(p, q, config.delta_t, 1)?;
    let calib = all.window(config.calibration_start, config.calibration_end, config.calibration.min_obs)?;
    let test = all
        .window(config.test_start, config.test_end, 2)
        .map_err(|e| Error::invalid("test window", format!("{} to {}: {e}", config.test_start, config.test_end)))?;
    let report = calibrate(&calib, &config.calibration)?;
    let skip = |reason: String, report: CalibrationReport| BacktestReport {
        pair: config.name.clone(),
        test_start: config.test_start,
        test_end: config.test_end,
        calibration: report,
        outcome: BacktestOutcome::Skipped { reason },
    };
    if report.adf_decision == AdfDecision::NotStationary {
        return Ok(skip(SKIP_UNIT_ROOT.to_string(), report));
    }
    let Some(fitted) = report.params else {
        let why = report.fit_error.clone().unwrap_or_else(|| "no usable fit".into());
        return Ok(skip(why, report));
    };

    let (alpha, beta) = (report.alpha, report.beta);
    let tilde: Vec<f64> = test.p_series.iter().map(|p| (alpha + beta * p.ln()).exp()).collect();
    let spread: Vec<f64> = test
        .q_series
        .iter()
        .zip(&tilde)
        .map(|(q, pt)| q.ln() - pt.ln())
        .collect();
    let scale = tilde[0];
    let p_norm: Vec<f64> = tilde.iter().map(|v| v / scale).collect();
    let n_steps = test.len() - 1;
    let params = ModelParams {
        horizon: n_steps as f64 * config.delta_t,
        ..fitted
    };
    let spec = config.grid.resolve(params.horizon, DEFAULT_BACKTEST_N_TIME);
    let solution = solve(&params, &config.costs, config.gamma, &spec, &SolveOptions::default())?;
    let policy = BoundaryPolicy::new(&solution.lattice, &solution.boundaries);
    let path = PathView {
        delta_t: config.delta_t,
        p: &p_norm,
        x: &spread,
    };
    let optimal = run_optimal_strategy(path, &policy, &config.costs, &params)?;
    let benchmark = run_benchmark_strategy(path, &params, &config.costs, &config.benchmark)?;
    Ok(BacktestReport {
        pair: config.name.clone(),
        test_start: config.test_start,
        test_end: config.test_end,
        calibration: report,
        outcome: BacktestOutcome::Traded {
            params,
            optimal,
            benchmark,
            test_days: test.len(),
        },
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Backtest reading the price files named in `config`; relative paths are
/// taken from `base_dir`.
pub fn run_backtest(config: &PairConfig, base_dir: &Path) -> Result<BacktestReport> {
    let p = read_price_file(&resolve(base_dir, &config.p_file))?;
    let q = read_price_file(&resolve(base_dir, &config.q_file))?;
    run_backtest_on_series(config, &p, &q)
}

pub const BACKTEST_CSV_HEADER: [&str; 11] = [
    "pair", "test_start", "test_end", "status", "N_o", "PL_o", "PS_o", "N_b", "PL_b", "PS_b", "reason",
];

pub fn write_backtest_csv<W: Write>(out: W, reports: &[BacktestReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BACKTEST_CSV_HEADER)?;
    for r in reports {
        let mut rec = vec![r.pair.clone(), r.test_start.to_string(), r.test_end.to_string()];
        match &r.outcome {
            BacktestOutcome::Traded { optimal, benchmark, .. } => {
                rec.push("traded".into());
                for s in [optimal, benchmark] {
                    rec.extend([s.n_trades.to_string(), s.pl.to_string(), s.ps.to_string()]);
                }
                rec.push(String::new());
            }
            BacktestOutcome::Skipped { reason } => {
                rec.push("skipped".into());
                rec.extend(std::iter::repeat_n(String::new(), 6));
                rec.push(reason.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Weekdays starting at `start` (or the next weekday).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

/// How the synthetic spread evolves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticSpread {
    /// Exact OU transitions under the given parameters.
    MeanReverting,
    /// Gaussian random walk with the same per-step volatility `nu`.
    RandomWalk,
}

/// Daily closes of a pair whose log prices satisfy
/// `log q = alpha + beta log p + x`, with `p` a GBM and `x` as requested.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_pair(
    params: &ModelParams,
    alpha: f64,
    beta: f64,
    spread: SyntheticSpread,
    start: NaiveDate,
    n_days: usize,
    delta_t: f64,
    seed: u64,
) -> Result<(Vec<(NaiveDate, f64)>, Vec<(NaiveDate, f64)>)> {
    use rand_distr::{Distribution, StandardNormal};
    params.validate()?;
    ensure_positive("delta_t", delta_t)?;
    let dates = business_days(start, n_days);
    let mut rng = path_rng(seed, 0);
    let (mut p, mut x) = (1.0_f64, params.theta);
    let mut ps = Vec::with_capacity(n_days);
    let mut qs = Vec::with_capacity(n_days);
    for (k, d) in dates.iter().enumerate() {
        if k > 0 {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let (p_next, x_ou) = crate::path_sim::step_exact(p, x, delta_t, params, z1, z2)?;
            x = match spread {
                SyntheticSpread::MeanReverting => x_ou,
                SyntheticSpread::RandomWalk => {
                    let zc = params.rho * z1 + (1.0 - params.rho * params.rho).sqrt() * z2;
                    x + params.nu * delta_t.sqrt() * zc
                }
            };
            p = p_next;
        }
        ps.push((*d, p));
        qs.push((*d, (alpha + beta * p.ln() + x).exp()));
    }
    Ok((ps, qs))
}
