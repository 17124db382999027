//! Correlated `(p, x)` sample paths.
//!
//! Random streams: every path draws from its own ChaCha20 stream
//! (`ChaCha20Rng::seed_from_u64(seed)` with `set_stream(path_id)`), and standard
//! normals come from `rand_distr::StandardNormal`, two per step (`z1` for the
//! price, then `z2` for the spread). Correlation uses the lower-triangular
//! factor `rho z1 + sqrt(1 - rho^2) z2`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::market::ModelParams;

/// Discretization used to advance a path by one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Exact conditional law of GBM and OU over the step.
    #[default]
    Exact,
    /// One draw from the first-order bivariate normal transition.
    Euler,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Scheme::Exact),
            "euler" => Ok(Scheme::Euler),
            other => Err(Error::invalid("scheme", format!("unknown scheme `{other}` (expected exact|euler)"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Exact => "exact",
            Scheme::Euler => "euler",
        })
    }
}

/// Advance `(p, x)` by `dt` using the exact conditional law.
pub fn step_exact(p: f64, x: f64, dt: f64, params: &ModelParams, z1: f64, z2: f64) -> Result<(f64, f64)> {
    ensure_positive("delta_t", dt)?;
    ensure_positive("p", p)?;
    ensure_finite("x", x)?;
    Ok(step_exact_unchecked(p, x, dt, params, z1, z2))
}

#[inline]
fn step_exact_unchecked(p: f64, x: f64, dt: f64, params: &ModelParams, z1: f64, z2: f64) -> (f64, f64) {
    let ModelParams {
        mu,
        sigma,
        kappa,
        theta,
        nu,
        rho,
        ..
    } = *params;
    let p_next = p * ((mu - 0.5 * sigma * sigma) * dt + sigma * dt.sqrt() * z1).exp();
    let decay = (-kappa * dt).exp();
    let mean = x * decay + theta * (1.0 - decay);
    let sd = nu * ((1.0 - (-2.0 * kappa * dt).exp()) / (2.0 * kappa)).sqrt();
    let zc = rho * z1 + (1.0 - rho * rho).max(0.0).sqrt() * z2;
    (p_next, mean + sd * zc)
}

/// Advance `(p, x)` by `dt` with the bivariate normal Euler transition.
pub fn step_euler(p: f64, x: f64, dt: f64, params: &ModelParams, z1: f64, z2: f64) -> Result<(f64, f64)> {
    ensure_positive("delta_t", dt)?;
    ensure_positive("p", p)?;
    ensure_finite("x", x)?;
    if dt * params.kappa >= 1.0 {
        return Err(Error::invalid(
            "delta_t",
            format!("delta_t * kappa = {} must be < 1 for the Euler scheme", dt * params.kappa),
        ));
    }
    Ok(step_euler_unchecked(p, x, dt, params, z1, z2))
}

#[inline]
fn step_euler_unchecked(p: f64, x: f64, dt: f64, params: &ModelParams, z1: f64, z2: f64) -> (f64, f64) {
    let ModelParams {
        mu,
        sigma,
        kappa,
        theta,
        nu,
        rho,
        ..
    } = *params;
    let sq = dt.sqrt();
    let p_next = p * ((mu - 0.5 * sigma * sigma) * dt + sigma * sq * z1).exp();
    let mean = (1.0 - dt * kappa) * x + dt * kappa * theta;
    let zc = rho * z1 + (1.0 - rho * rho).max(0.0).sqrt() * z2;
    (p_next, mean + nu * sq * zc)
}

/// `nu / sqrt(2 kappa)`.
pub fn stationary_spread_sd(params: &ModelParams) -> f64 {
    params.stationary_spread_sd()
}

/// A batch of simulated `(p, x)` paths on a common time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub delta_t: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// `p_series[path][step]`, `step = 0..=n_steps`.
    pub p_series: Vec<Vec<f64>>,
    pub x_series: Vec<Vec<f64>>,
}

/// Borrowed view of one path.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    pub delta_t: f64,
    pub p: &'a [f64],
    pub x: &'a [f64],
}

impl<'a> PathView<'a> {
    pub fn n_steps(&self) -> usize {
        self.p.len() - 1
    }
    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.delta_t
    }
}

impl PathSet {
    pub fn path(&self, i: usize) -> PathView<'_> {
        PathView {
            delta_t: self.delta_t,
            p: &self.p_series[i],
            x: &self.x_series[i],
        }
    }

    pub fn paths(&self) -> impl Iterator<Item = PathView<'_>> {
        (0..self.n_paths).map(move |i| self.path(i))
    }

    /// One row per step per path: `path_id,step,t,p,x`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path_id", "step", "t", "p", "x"])?;
        for (id, (ps, xs)) in self.p_series.iter().zip(&self.x_series).enumerate() {
            for (step, (p, x)) in ps.iter().zip(xs).enumerate() {
                w.write_record([
                    id.to_string(),
                    step.to_string(),
                    (step as f64 * self.delta_t).to_string(),
                    p.to_string(),
                    x.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`PathSet::write_csv`]. Seed and scheme are not part of the
    /// CSV and are supplied by the caller.
    pub fn read_csv<R: Read>(input: R, seed: u64, scheme: Scheme) -> Result<PathSet> {
        #[derive(Deserialize)]
        struct Row {
            path_id: usize,
            step: usize,
            t: f64,
            p: f64,
            x: f64,
        }
        let mut rdr = csv::Reader::from_reader(input);
        let mut p_series: Vec<Vec<f64>> = Vec::new();
        let mut x_series: Vec<Vec<f64>> = Vec::new();
        let mut delta_t = None;
        for row in rdr.deserialize() {
            let row: Row = row?;
            if row.path_id == p_series.len() {
                p_series.push(Vec::new());
                x_series.push(Vec::new());
            } else if row.path_id + 1 != p_series.len() {
                return Err(Error::invalid("path_id", format!("rows out of order at path {}", row.path_id)));
            }
            let ps = p_series.last_mut().expect("pushed above");
            if row.step != ps.len() {
                return Err(Error::invalid("step", format!("rows out of order at path {} step {}", row.path_id, row.step)));
            }
            if row.step == 1 && delta_t.is_none() {
                delta_t = Some(row.t);
            }
            ensure_positive("p", row.p)?;
            ps.push(row.p);
            x_series.last_mut().expect("pushed above").push(row.x);
        }
        let n_paths = p_series.len();
        if n_paths == 0 {
            return Err(Error::invalid("paths", "CSV contains no rows"));
        }
        let n_steps = p_series[0].len() - 1;
        if p_series.iter().any(|s| s.len() != n_steps + 1) {
            return Err(Error::invalid("paths", "paths have different lengths"));
        }
        Ok(PathSet {
            delta_t: delta_t.unwrap_or(0.0),
            n_steps,
            n_paths,
            seed,
            scheme,
            p_series,
            x_series,
        })
    }
}

/// The random stream used for path `path_id` under `seed`.
pub fn path_rng(seed: u64, path_id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(path_id);
    rng
}

/// Simulate `n_paths` paths of `n_steps` steps over the model horizon.
#[allow(clippy::too_many_arguments)]
pub fn simulate_paths(
    params: &ModelParams,
    n_paths: usize,
    n_steps: usize,
    p0: f64,
    x0: f64,
    seed: u64,
    scheme: Scheme,
) -> Result<PathSet> {
    params.validate()?;
    if n_paths == 0 || n_steps == 0 {
        return Err(Error::invalid("n_paths/n_steps", "must both be at least 1"));
    }
    ensure_positive("p0", p0)?;
    ensure_finite("x0", x0)?;
    let dt = params.horizon / n_steps as f64;
    if scheme == Scheme::Euler && dt * params.kappa >= 1.0 {
        return Err(Error::invalid("n_steps", "delta_t * kappa must be < 1 for the Euler scheme"));
    }
    let step = match scheme {
        Scheme::Exact => step_exact_unchecked,
        Scheme::Euler => step_euler_unchecked,
    };
    let (p_series, x_series): (Vec<_>, Vec<_>) = (0..n_paths)
        .into_par_iter()
        .map(|id| {
            let mut rng = path_rng(seed, id as u64);
            let mut ps = Vec::with_capacity(n_steps + 1);
            let mut xs = Vec::with_capacity(n_steps + 1);
            let (mut p, mut x) = (p0, x0);
            ps.push(p);
            xs.push(x);
            for _ in 0..n_steps {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                (p, x) = step(p, x, dt, params, z1, z2);
                ps.push(p);
                xs.push(x);
            }
            (ps, xs)
        })
        .unzip();
    Ok(PathSet {
        delta_t: dt,
        n_steps,
        n_paths,
        seed,
        scheme,
        p_series,
        x_series,
    })
}
