//! Parameter estimation from daily price histories and the unit-root screen.

use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::market::ModelParams;

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;
pub const DEFAULT_MIN_OBS: usize = 250;
const MIN_FIT_LEN: usize = 30;

/// Aligned daily closes of the two legs.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceHistory {
    pub dates: Vec<NaiveDate>,
    pub p_series: Vec<f64>,
    pub q_series: Vec<f64>,
    pub delta_t: f64,
}

impl PriceHistory {
    pub fn new(
        dates: Vec<NaiveDate>,
        p_series: Vec<f64>,
        q_series: Vec<f64>,
        delta_t: f64,
        min_obs: usize,
    ) -> Result<Self> {
        ensure_positive("delta_t", delta_t)?;
        let n = dates.len();
        if p_series.len() != n || q_series.len() != n {
            return Err(Error::invalid("history", "dates and price series have different lengths"));
        }
        if n < min_obs {
            return Err(Error::invalid("history", format!("{n} observations, need at least {min_obs}")));
        }
        if let Some(w) = dates.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::invalid("dates", format!("not strictly increasing at {}", w[1])));
        }
        for (name, s) in [("p_series", &p_series), ("q_series", &q_series)] {
            if let Some((i, v)) = s.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
                return Err(Error::invalid(name, format!("non-positive price {v} at {}", dates[i])));
            }
        }
        Ok(PriceHistory {
            dates,
            p_series,
            q_series,
            delta_t,
        })
    }

    /// Join two `(date, price)` series on their common dates.
    pub fn from_series(p: &[(NaiveDate, f64)], q: &[(NaiveDate, f64)], delta_t: f64, min_obs: usize) -> Result<Self> {
        let (mut i, mut j) = (0, 0);
        let (mut dates, mut ps, mut qs) = (Vec::new(), Vec::new(), Vec::new());
        while i < p.len() && j < q.len() {
            match p[i].0.cmp(&q[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dates.push(p[i].0);
                    ps.push(p[i].1);
                    qs.push(q[j].1);
                    i += 1;
                    j += 1;
                }
            }
        }
        let dropped = p.len() + q.len() - 2 * dates.len();
        if dropped > 0 {
            log::warn!("{dropped} price rows without a matching date in the other leg were dropped");
        }
        PriceHistory::new(dates, ps, qs, delta_t, min_obs)
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Observations with `start <= date <= end`.
    pub fn window(&self, start: NaiveDate, end: NaiveDate, min_obs: usize) -> Result<PriceHistory> {
        let lo = self.dates.partition_point(|d| *d < start);
        let hi = self.dates.partition_point(|d| *d <= end);
        if hi <= lo {
            return Err(Error::invalid("window", format!("no observations between {start} and {end}")));
        }
        PriceHistory::new(
            self.dates[lo..hi].to_vec(),
            self.p_series[lo..hi].to_vec(),
            self.q_series[lo..hi].to_vec(),
            self.delta_t,
            min_obs,
        )
        .map_err(|e| Error::invalid("window", format!("{start}..{end}: {e}")))
    }
}

/// Read a `date,price` CSV (ISO-8601 dates, header required).
pub fn read_price_csv<R: Read>(input: R) -> Result<Vec<(NaiveDate, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        date: NaiveDate,
        price: f64,
    }
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let Row { date, price } = row?;
        out.push((date, price));
    }
    Ok(out)
}

pub fn read_price_file(path: &Path) -> Result<Vec<(NaiveDate, f64)>> {
    let file = std::fs::File::open(path)?;
    read_price_csv(file).map_err(|e| Error::invalid("price file", format!("{}: {e}", path.display())))
}

pub fn write_price_csv<W: Write>(out: W, rows: &[(NaiveDate, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "price"])?;
    for (d, p) in rows {
        w.write_record([d.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

struct Ols {
    coef: Vec<f64>,
    se: Vec<f64>,
    resid: Vec<f64>,
    /// Residual variance with `n - k` degrees of freedom.
    s2: f64,
    xtx_inv: DMatrix<f64>,
}

/// Least squares of `y` on an intercept plus `regressors`.
fn ols(y: &[f64], regressors: &[&[f64]]) -> Result<Ols> {
    let n = y.len();
    let k = regressors.len() + 1;
    if n <= k {
        return Err(Error::invalid("series", format!("{n} observations for {k} coefficients")));
    }
    for (j, col) in regressors.iter().enumerate() {
        if sample_var(col) <= 1e-28 * (1.0 + mean(col).powi(2)) {
            return Err(Error::invalid("series", format!("regressor {j} is constant")));
        }
    }
    let x = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { regressors[j - 1][i] });
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Numerical("singular normal equations".into()))?;
    let coef = chol.solve(&(x.transpose() * &yv));
    let resid = &yv - &x * &coef;
    let s2 = resid.norm_squared() / (n - k) as f64;
    let inv = chol.inverse();
    let se = (0..k).map(|j| (s2 * inv[(j, j)]).max(0.0).sqrt()).collect();
    Ok(Ols {
        coef: coef.iter().copied().collect(),
        se,
        resid: resid.iter().copied().collect(),
        s2,
        xtx_inv: inv,
    })
}

/// Coefficient standard errors when the residuals follow an AR(1) with the
/// lag-one autocorrelation estimated from `fit.resid`:
/// `(X'X)^-1 X' Omega X (X'X)^-1` with `Omega_ij = s2 a^|i-j|`.
fn ar1_robust_se(fit: &Ols, regressors: &[&[f64]]) -> Vec<f64> {
    let e = &fit.resid;
    let n = e.len();
    let num: f64 = e.windows(2).map(|w| w[0] * w[1]).sum();
    let den: f64 = e[..n - 1].iter().map(|v| v * v).sum();
    let a = if den > 0.0 { (num / den).clamp(-0.999_999, 0.999_999) } else { 0.0 };
    let k = regressors.len() + 1;
    let col = |j: usize, i: usize| if j == 0 { 1.0 } else { regressors[j - 1][i] };
    let mut omega_x = DMatrix::zeros(n, k);
    for j in 0..k {
        let mut fwd = vec![0.0; n];
        let mut acc = 0.0;
        for (i, f) in fwd.iter_mut().enumerate() {
            acc = col(j, i) + a * acc;
            *f = acc;
        }
        acc = 0.0;
        for i in (0..n).rev() {
            acc = col(j, i) + a * acc;
            omega_x[(i, j)] = fit.s2 * (fwd[i] + acc - col(j, i));
        }
    }
    let x = DMatrix::from_fn(n, k, |i, j| col(j, i));
    let meat = x.transpose() * omega_x;
    let v = &fit.xtx_inv * meat * &fit.xtx_inv;
    (0..k).map(|j| v[(j, j)].max(0.0).sqrt()).collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len().max(2) - 1) as f64
}

fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::invalid("series", "zero-variance input to correlation"));
    }
    Ok(sab / (saa * sbb).sqrt())
}

fn check_len(name: &str, n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(Error::invalid(name, format!("{n} observations, need at least {min}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgeFit {
    pub alpha: f64,
    pub beta: f64,
    /// Standard errors allow for AR(1) autocorrelation in the residual.
    pub alpha_se: f64,
    pub beta_se: f64,
    pub transformed_p: Vec<f64>,
    pub spread: Vec<f64>,
    pub r_squared: f64,
    pub residual_sd: f64,
}

/// Regress `log q` on `log p`; the fitted values give the transformed price
/// and the residuals the spread.
pub fn hedge_regression(history: &PriceHistory) -> Result<HedgeFit> {
    let lp: Vec<f64> = history.p_series.iter().map(|p| p.ln()).collect();
    let lq: Vec<f64> = history.q_series.iter().map(|q| q.ln()).collect();
    if sample_var(&lp) <= 0.0 {
        return Err(Error::invalid("p_series", "log p is constant; hedge ratio is undefined"));
    }
    let fit = ols(&lq, &[&lp])?;
    let se = ar1_robust_se(&fit, &[&lp]);
    let (alpha, beta) = (fit.coef[0], fit.coef[1]);
    let transformed_p = lp.iter().map(|l| (alpha + beta * l).exp()).collect();
    let spread = lq.iter().zip(&lp).map(|(q, p)| q - alpha - beta * p).collect::<Vec<_>>();
    let tss = sample_var(&lq) * (lq.len() - 1) as f64;
    let ssr: f64 = spread.iter().map(|e| e * e).sum();
    let r_squared = if tss > 0.0 { 1.0 - ssr / tss } else { 1.0 };
    Ok(HedgeFit {
        alpha,
        beta,
        alpha_se: se[0],
        beta_se: se[1],
        transformed_p,
        spread,
        r_squared,
        residual_sd: fit.s2.sqrt(),
    })
}

/// Exact-discretization AR(1) fit of an OU process, with asymptotic
/// standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuFit {
    pub kappa: f64,
    pub theta: f64,
    pub nu: f64,
    pub kappa_se: f64,
    pub theta_se: f64,
    pub nu_se: f64,
    pub slope: f64,
    pub intercept: f64,
    pub residual_sd: f64,
}

pub fn fit_ou(spread: &[f64], delta_t: f64) -> Result<OuFit> {
    ensure_positive("delta_t", delta_t)?;
    check_len("spread_series", spread.len(), MIN_FIT_LEN)?;
    let fit = ols(&spread[1..], &[&spread[..spread.len() - 1]])?;
    let (b, a) = (fit.coef[0], fit.coef[1]);
    if a >= 1.0 {
        return Err(Error::Calibration(format!("AR(1) slope {a:.6} >= 1: no mean reversion")));
    }
    if a <= 0.0 {
        return Err(Error::Calibration(format!("AR(1) slope {a:.6} <= 0: oscillatory spread")));
    }
    let n = (spread.len() - 1) as f64;
    let s = fit.s2.sqrt();
    let la = a.ln();
    let kappa = -la / delta_t;
    let theta = b / (1.0 - a);
    let nu = s * (-2.0 * la / (delta_t * (1.0 - a * a))).sqrt();
    let se_a = ((1.0 - a * a) / n).sqrt();
    let dlog_nu = 1.0 / (2.0 * a * la) + a / (1.0 - a * a);
    Ok(OuFit {
        kappa,
        theta,
        nu,
        kappa_se: se_a / (a * delta_t),
        theta_se: s / ((1.0 - a) * n.sqrt()),
        nu_se: nu * (1.0 / (2.0 * n) + (dlog_nu * se_a).powi(2)).sqrt(),
        slope: a,
        intercept: b,
        residual_sd: s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmFit {
    pub mu: f64,
    pub sigma: f64,
    pub mu_se: f64,
    pub sigma_se: f64,
}

pub fn fit_gbm(p_series: &[f64], delta_t: f64) -> Result<GbmFit> {
    ensure_positive("delta_t", delta_t)?;
    check_len("p_series", p_series.len(), MIN_FIT_LEN)?;
    if let Some(p) = p_series.iter().find(|p| !(**p > 0.0)) {
        return Err(Error::invalid("p_series", format!("non-positive price {p}")));
    }
    let rets = log_returns(p_series);
    let n = rets.len() as f64;
    let sigma = (sample_var(&rets) / delta_t).sqrt();
    let mu = mean(&rets) / delta_t + 0.5 * sigma * sigma;
    let sigma_se = sigma / (2.0 * (n - 1.0)).sqrt();
    let mu_se = (sigma * sigma / (n * delta_t) + (sigma * sigma_se).powi(2)).sqrt();
    Ok(GbmFit {
        mu,
        sigma,
        mu_se,
        sigma_se,
    })
}

fn log_returns(p: &[f64]) -> Vec<f64> {
    p.windows(2).map(|w| (w[1] / w[0]).ln()).collect()
}

/// Correlation of price log-return innovations with AR(1) spread residuals.
pub fn fit_correlation(p_series: &[f64], spread: &[f64], delta_t: f64) -> Result<(f64, f64)> {
    ensure_positive("delta_t", delta_t)?;
    if p_series.len() != spread.len() {
        return Err(Error::invalid("series", "price and spread series have different lengths"));
    }
    check_len("series", spread.len(), MIN_FIT_LEN)?;
    let rets = log_returns(p_series);
    let fit = ols(&spread[1..], &[&spread[..spread.len() - 1]])?;
    let rho = correlation(&rets, &fit.resid)?;
    let se = (1.0 - rho * rho) / (rets.len() as f64).sqrt();
    Ok((rho, se))
}

/// Intercept-case MacKinnon (2010) response-surface coefficients for the 5%
/// Dickey-Fuller critical value: `c0 + c1/n + c2/n^2 + c3/n^3`.
const ADF_CRIT_5PCT_CONST: [f64; 4] = [-2.86154, -2.8903, -4.234, -40.040];

pub fn adf_critical_5pct(nobs: usize) -> f64 {
    let inv = 1.0 / nobs as f64;
    let c = ADF_CRIT_5PCT_CONST;
    c[0] + inv * (c[1] + inv * (c[2] + inv * c[3]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdfResult {
    pub statistic: f64,
    pub critical_value_5pct: f64,
    pub is_stationary: bool,
    pub lag: usize,
    /// Observations in the test regression.
    pub nobs: usize,
}

/// Augmented Dickey-Fuller test with intercept and a fixed lag order.
pub fn adf_test(series: &[f64], max_lag: usize) -> Result<AdfResult> {
    if series.len() <= max_lag + 10 {
        return Err(Error::invalid(
            "series",
            format!("{} observations is too few for an ADF test with {max_lag} lags", series.len()),
        ));
    }
    if sample_var(series) <= 0.0 {
        return Err(Error::invalid("series", "constant series"));
    }
    let dx: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let start = max_lag;
    let y = &dx[start..];
    let level = &series[start..series.len() - 1];
    let lags: Vec<&[f64]> = (1..=max_lag).map(|i| &dx[start - i..dx.len() - i]).collect();
    let mut regs: Vec<&[f64]> = vec![level];
    regs.extend(lags);
    let fit = ols(y, &regs)?;
    let statistic = fit.coef[1] / fit.se[1];
    let nobs = y.len();
    let critical_value_5pct = adf_critical_5pct(nobs);
    Ok(AdfResult {
        statistic,
        critical_value_5pct,
        is_stationary: statistic < critical_value_5pct,
        lag: max_lag,
        nobs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationOptions {
    pub adf_lag: usize,
    pub min_obs: usize,
    /// Risk-free rate carried into the fitted parameters.
    pub r: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            adf_lag: 1,
            min_obs: DEFAULT_MIN_OBS,
            r: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdfDecision {
    Stationary,
    NotStationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    pub mu: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub theta: f64,
    pub nu: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_obs: usize,
    pub delta_t: f64,
    pub alpha: f64,
    pub beta: f64,
    pub r_squared: f64,
    pub residual_sd: f64,
    /// Fitted parameters of the transformed price and the spread; `None`
    /// when the spread shows no mean reversion.
    pub params: Option<ModelParams>,
    pub standard_errors: Option<StandardErrors>,
    pub fit_error: Option<String>,
    pub adf: AdfResult,
    pub adf_decision: AdfDecision,
    pub spread_series: Vec<f64>,
    pub transformed_p: Vec<f64>,
}

impl CalibrationReport {
    /// Stationary spread with a usable mean-reverting fit.
    pub fn is_tradable(&self) -> bool {
        self.adf_decision == AdfDecision::Stationary && self.params.is_some()
    }
}

pub fn calibrate(history: &PriceHistory, options: &CalibrationOptions) -> Result<CalibrationReport> {
    check_len("history", history.len(), options.min_obs)?;
    let hedge = hedge_regression(history)?;
    let adf = adf_test(&hedge.spread, options.adf_lag)?;
    let dt = history.delta_t;
    let fitted = fit_ou(&hedge.spread, dt).and_then(|ou| {
        let gbm = fit_gbm(&hedge.transformed_p, dt)?;
        let (rho, rho_se) = fit_correlation(&hedge.transformed_p, &hedge.spread, dt)?;
        let params = ModelParams {
            mu: gbm.mu,
            sigma: gbm.sigma,
            kappa: ou.kappa,
            theta: ou.theta,
            nu: ou.nu,
            rho,
            r: options.r,
            horizon: 1.0,
        };
        params.validate().map_err(|e| Error::Calibration(format!("fitted parameters invalid: {e}")))?;
        let se = StandardErrors {
            mu: gbm.mu_se,
            sigma: gbm.sigma_se,
            kappa: ou.kappa_se,
            theta: ou.theta_se,
            nu: ou.nu_se,
            rho: rho_se,
        };
        Ok((params, se))
    });
    let (params, standard_errors, fit_error) = match fitted {
        Ok((p, se)) => (Some(p), Some(se), None),
        Err(Error::Calibration(msg)) => (None, None, Some(msg)),
        Err(e) => return Err(e),
    };
    Ok(CalibrationReport {
        n_obs: history.len(),
        delta_t: dt,
        alpha: hedge.alpha,
        beta: hedge.beta,
        r_squared: hedge.r_squared,
        residual_sd: hedge.residual_sd,
        params,
        standard_errors,
        fit_error,
        adf_decision: if adf.is_stationary {
            AdfDecision::Stationary
        } else {
            AdfDecision::NotStationary
        },
        adf,
        spread_series: hedge.spread,
        transformed_p: hedge.transformed_p,
    })
}

pub const CALIBRATION_CSV_HEADER: [&str; 16] = [
    "pair", "n_obs", "alpha", "beta", "r_squared", "residual_sd", "mu", "sigma", "kappa", "theta", "nu", "rho",
    "adf_statistic", "adf_critical_5pct", "stationary", "tradable",
];

pub fn calibration_csv_record(pair: &str, rep: &CalibrationReport) -> Vec<String> {
    let p = rep.params;
    let opt = |f: fn(&ModelParams) -> f64| p.as_ref().map(|p| f(p).to_string()).unwrap_or_default();
    vec![
        pair.to_string(),
        rep.n_obs.to_string(),
        rep.alpha.to_string(),
        rep.beta.to_string(),
        rep.r_squared.to_string(),
        rep.residual_sd.to_string(),
        opt(|p| p.mu),
        opt(|p| p.sigma),
        opt(|p| p.kappa),
        opt(|p| p.theta),
        opt(|p| p.nu),
        opt(|p| p.rho),
        rep.adf.statistic.to_string(),
        rep.adf.critical_value_5pct.to_string(),
        (rep.adf_decision == AdfDecision::Stationary).to_string(),
        rep.is_tradable().to_string(),
    ]
}
