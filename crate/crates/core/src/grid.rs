//! State lattice and the one-step conditional expectation operator.
//!
//! Prices and spreads are gridded in standardized coordinates:
//!
//! ```text
//! p(z) = p0 exp((mu - sigma^2/2) T + z sigma sqrt(T))
//! x(w) = theta + nu / sqrt(2 kappa) * w
//! ```
//!
//! so `z` is the standardized terminal log-price and `w` the standardized
//! stationary spread. Share holdings live on `{-y_max, ..., -xi, 0, xi, ..., y_max}`.
//!
//! The expectation over one time step uses a tensor Gauss-Hermite rule on the
//! bivariate normal transition (log-price drift `(mu - sigma^2/2) delta`,
//! spread mean `(1 - delta kappa) x + delta kappa theta`, covariance
//! `delta [[sigma^2, rho sigma nu], [rho sigma nu, nu^2]]`). Each quadrature point
//! is spread onto the four surrounding lattice nodes with bilinear weights;
//! points outside the lattice are clamped onto its edge.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::market::ModelParams;

/// Largest supported number of Gauss-Hermite nodes per dimension.
pub const MAX_QUAD_NODES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Number of time steps; `delta = T / n_time`.
    pub n_time: usize,
    pub z_half_width: f64,
    pub z_step: f64,
    pub w_half_width: f64,
    pub w_step: f64,
    /// Share increment of one trade action, and the y-grid resolution.
    pub xi: f64,
    pub y_max: f64,
    pub quad_nodes: usize,
}

impl GridSpec {
    /// Defaults: unit steps of `sqrt(delta)` on both standardized axes,
    /// `[-3.5, 3.5]` truncation, `xi = 0.1`, `y_max = 12`, 5x5 quadrature.
    pub fn with_defaults(horizon: f64, n_time: usize) -> Self {
        let step = (horizon / n_time.max(1) as f64).sqrt();
        GridSpec {
            n_time,
            z_half_width: 3.5,
            z_step: step,
            w_half_width: 3.5,
            w_step: step,
            xi: 0.1,
            y_max: 12.0,
            quad_nodes: 5,
        }
    }

    pub fn delta(&self, horizon: f64) -> f64 {
        horizon / self.n_time as f64
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if self.n_time == 0 {
            return Err(Error::invalid("n_time", "must be at least 1"));
        }
        let delta = self.delta(params.horizon);
        if delta * params.kappa >= 1.0 {
            return Err(Error::invalid(
                "n_time",
                format!("delta * kappa = {} must be < 1", delta * params.kappa),
            ));
        }
        ensure_positive("z_step", self.z_step)?;
        ensure_positive("w_step", self.w_step)?;
        ensure_positive("xi", self.xi)?;
        ensure_positive("y_max", self.y_max)?;
        ensure_finite("z_half_width", self.z_half_width)?;
        ensure_finite("w_half_width", self.w_half_width)?;
        if self.z_half_width < self.z_step {
            return Err(Error::invalid("z_half_width", "must be at least one z_step"));
        }
        if self.w_half_width < self.w_step {
            return Err(Error::invalid("w_half_width", "must be at least one w_step"));
        }
        let ratio = self.y_max / self.xi;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::invalid(
                "y_max",
                format!("must be an integer multiple of xi = {}", self.xi),
            ));
        }
        if !(3..=MAX_QUAD_NODES).contains(&self.quad_nodes) {
            return Err(Error::invalid(
                "quad_nodes",
                format!("must lie in [3, {MAX_QUAD_NODES}], got {}", self.quad_nodes),
            ));
        }
        Ok(())
    }

    fn half_count(half_width: f64, step: f64) -> usize {
        (half_width / step + 1e-9).floor() as usize
    }
}

/// Axes of the discretized state space.
#[derive(Debug, Clone)]
pub struct Lattice {
    spec: GridSpec,
    params: ModelParams,
    dt: f64,
    time_points: Vec<f64>,
    z_values: Vec<f64>,
    w_values: Vec<f64>,
    p_values: Vec<f64>,
    x_values: Vec<f64>,
    y_values: Vec<f64>,
    log_price_anchor: f64,
    price_vol_scale: f64,
    spread_scale: f64,
}

/// JSON-friendly description of a lattice for report headers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LatticeSummary {
    pub n_time: usize,
    pub dt: f64,
    pub horizon: f64,
    pub z_count: usize,
    pub z_step: f64,
    pub z_range: [f64; 2],
    pub w_count: usize,
    pub w_step: f64,
    pub w_range: [f64; 2],
    pub p_range: [f64; 2],
    pub x_range: [f64; 2],
    pub y_count: usize,
    pub xi: f64,
    pub y_range: [f64; 2],
    pub quad_nodes: usize,
}

impl Lattice {
    pub fn build(spec: &GridSpec, params: &ModelParams, p0: f64) -> Result<Lattice> {
        params.validate()?;
        spec.validate(params)?;
        ensure_positive("p0", p0)?;

        let dt = spec.delta(params.horizon);
        let time_points = (0..=spec.n_time).map(|i| i as f64 * dt).collect();

        let nz_half = GridSpec::half_count(spec.z_half_width, spec.z_step) as i64;
        let nw_half = GridSpec::half_count(spec.w_half_width, spec.w_step) as i64;
        let ny_half = (spec.y_max / spec.xi).round() as i64;
        let z_values: Vec<f64> = (-nz_half..=nz_half).map(|k| k as f64 * spec.z_step).collect();
        let w_values: Vec<f64> = (-nw_half..=nw_half).map(|k| k as f64 * spec.w_step).collect();
        let y_values: Vec<f64> = (-ny_half..=ny_half).map(|k| k as f64 * spec.xi).collect();

        let log_price_anchor =
            p0.ln() + (params.mu - 0.5 * params.sigma * params.sigma) * params.horizon;
        let price_vol_scale = params.sigma * params.horizon.sqrt();
        let spread_scale = params.stationary_spread_sd();
        let p_values = z_values
            .iter()
            .map(|z| (log_price_anchor + z * price_vol_scale).exp())
            .collect();
        let x_values = w_values.iter().map(|w| params.theta + spread_scale * w).collect();

        Ok(Lattice {
            spec: *spec,
            params: *params,
            dt,
            time_points,
            z_values,
            w_values,
            p_values,
            x_values,
            y_values,
            log_price_anchor,
            price_vol_scale,
            spread_scale,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }
    pub fn params(&self) -> &ModelParams {
        &self.params
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn time_points(&self) -> &[f64] {
        &self.time_points
    }
    pub fn z_values(&self) -> &[f64] {
        &self.z_values
    }
    pub fn w_values(&self) -> &[f64] {
        &self.w_values
    }
    pub fn p_values(&self) -> &[f64] {
        &self.p_values
    }
    pub fn x_values(&self) -> &[f64] {
        &self.x_values
    }
    pub fn y_values(&self) -> &[f64] {
        &self.y_values
    }
    pub fn z_step(&self) -> f64 {
        self.spec.z_step
    }
    pub fn w_step(&self) -> f64 {
        self.spec.w_step
    }
    /// `sigma sqrt(T)`, so that `d log p = price_vol_scale * dz`.
    pub fn price_vol_scale(&self) -> f64 {
        self.price_vol_scale
    }
    /// `nu / sqrt(2 kappa)`, so that `dx = spread_scale * dw`.
    pub fn spread_scale(&self) -> f64 {
        self.spread_scale
    }

    /// `(n_z, n_w, n_y)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.z_values.len(), self.w_values.len(), self.y_values.len())
    }

    pub fn n_nodes(&self) -> usize {
        self.z_values.len() * self.w_values.len()
    }

    #[inline]
    pub fn node_index(&self, iz: usize, iw: usize) -> usize {
        iz * self.w_values.len() + iw
    }

    #[inline]
    pub fn node_coords(&self, node: usize) -> (usize, usize) {
        let nw = self.w_values.len();
        (node / nw, node % nw)
    }

    /// Index into a `(z, w, y)` slice with `y` fastest.
    #[inline]
    pub fn flat_index(&self, iz: usize, iw: usize, iy: usize) -> usize {
        self.node_index(iz, iw) * self.y_values.len() + iy
    }

    pub fn z_of_price(&self, p: f64) -> f64 {
        (p.ln() - self.log_price_anchor) / self.price_vol_scale
    }

    pub fn w_of_spread(&self, x: f64) -> f64 {
        (x - self.params.theta) / self.spread_scale
    }

    fn nearest(axis: &[f64], step: f64, v: f64) -> (usize, bool) {
        let raw = ((v - axis[0]) / step).round();
        let last = (axis.len() - 1) as f64;
        let inside = (0.0..=last).contains(&raw);
        (raw.clamp(0.0, last) as usize, inside)
    }

    /// Nearest `(iz, iw)` node in standardized coordinates, clamped onto the
    /// lattice when the point lies outside it.
    pub fn nearest_node(&self, p: f64, x: f64) -> (usize, usize) {
        let (iz, _) = Self::nearest(&self.z_values, self.spec.z_step, self.z_of_price(p));
        let (iw, _) = Self::nearest(&self.w_values, self.spec.w_step, self.w_of_spread(x));
        (iz, iw)
    }

    /// Nearest node, refusing points whose nearest node is on (or beyond) the
    /// lattice edge.
    pub fn locate_interior(&self, p: f64, x: f64) -> Result<(usize, usize)> {
        ensure_positive("p", p)?;
        ensure_finite("x", x)?;
        let (iz, z_in) = Self::nearest(&self.z_values, self.spec.z_step, self.z_of_price(p));
        let (iw, w_in) = Self::nearest(&self.w_values, self.spec.w_step, self.w_of_spread(x));
        let (nz, nw, _) = self.shape();
        if !z_in || !w_in || iz == 0 || iw == 0 || iz + 1 == nz || iw + 1 == nw {
            return Err(Error::invalid(
                "probe",
                format!(
                    "(p={p}, x={x}) is outside the lattice interior (p in [{:.4}, {:.4}], x in [{:.4}, {:.4}])",
                    self.p_values[1],
                    self.p_values[nz - 2],
                    self.x_values[1],
                    self.x_values[nw - 2]
                ),
            ));
        }
        Ok((iz, iw))
    }

    /// Nearest y-grid index (clamped).
    pub fn nearest_y_index(&self, y: f64) -> usize {
        Self::nearest(&self.y_values, self.spec.xi, y).0
    }

    /// Index of the time slice nearest to `t`.
    pub fn nearest_time_index(&self, t: f64) -> usize {
        let raw = (t / self.dt).round();
        raw.clamp(0.0, self.spec.n_time as f64) as usize
    }

    pub fn summary(&self) -> LatticeSummary {
        let (nz, nw, ny) = self.shape();
        LatticeSummary {
            n_time: self.spec.n_time,
            dt: self.dt,
            horizon: self.params.horizon,
            z_count: nz,
            z_step: self.spec.z_step,
            z_range: [self.z_values[0], self.z_values[nz - 1]],
            w_count: nw,
            w_step: self.spec.w_step,
            w_range: [self.w_values[0], self.w_values[nw - 1]],
            p_range: [self.p_values[0], self.p_values[nz - 1]],
            x_range: [self.x_values[0], self.x_values[nw - 1]],
            y_count: ny,
            xi: self.spec.xi,
            y_range: [self.y_values[0], self.y_values[ny - 1]],
            quad_nodes: self.spec.quad_nodes,
        }
    }
}

/// Gauss-Hermite rule for the standard normal density: nodes and weights
/// with `sum w_i f(u_i) ~ E[f(U)]`, `U ~ N(0, 1)`. Exact for polynomials of
/// degree `< 2n`.
pub fn gauss_hermite_normal(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 || n > MAX_QUAD_NODES {
        return Err(Error::invalid("quad_nodes", format!("unsupported rule size {n}")));
    }
    // Roots of the physicists' Hermite polynomial by Newton iteration on the
    // orthonormal recurrence, then rescaled to the unit normal.
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numerical(format!("Gauss-Hermite root {i} of {n} did not converge")));
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let sqrt2 = std::f64::consts::SQRT_2;
    let norm = std::f64::consts::PI.sqrt();
    let nodes: Vec<f64> = x.iter().rev().map(|v| v * sqrt2).collect();
    let mut weights: Vec<f64> = w.iter().rev().map(|v| v / norm).collect();
    let total: f64 = weights.iter().sum();
    for v in &mut weights {
        *v /= total;
    }
    Ok((nodes, weights))
}

/// Tensor Gauss-Hermite points for `N(mean, cov)` in two dimensions, using the
/// lower-triangular factor of `cov`. Rank-deficient covariances collapse to a
/// one-dimensional rule (or a single point at the mean).
pub fn gaussian_quadrature(
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
    n: usize,
) -> Result<Vec<([f64; 2], f64)>> {
    let (u, wt) = gauss_hermite_normal(n)?;
    let tiny = 1e-300;
    let l11 = cov[0][0].max(0.0).sqrt();
    let (l21, l22) = if l11 > tiny {
        let l21 = cov[1][0] / l11;
        (l21, (cov[1][1] - l21 * l21).max(0.0).sqrt())
    } else {
        (0.0, cov[1][1].max(0.0).sqrt())
    };
    // Treat a factor as absent when negligible relative to the other scales.
    let scale = l11.max(l21.abs()).max(l22);
    if scale <= tiny {
        return Ok(vec![(mean, 1.0)]);
    }
    let rel = 1e-12 * scale;
    let mut out = Vec::with_capacity(n * n);
    if l22 <= rel {
        for (ui, wi) in u.iter().zip(&wt) {
            out.push(([mean[0] + l11 * ui, mean[1] + l21 * ui], *wi));
        }
    } else if l11 <= rel && l21.abs() <= rel {
        for (uj, wj) in u.iter().zip(&wt) {
            out.push(([mean[0], mean[1] + l22 * uj], *wj));
        }
    } else {
        for (ui, wi) in u.iter().zip(&wt) {
            for (uj, wj) in u.iter().zip(&wt) {
                out.push((
                    [mean[0] + l11 * ui, mean[1] + l21 * ui + l22 * uj],
                    wi * wj,
                ));
            }
        }
    }
    Ok(out)
}

/// Moments of the one-step transition in standardized `(z, w)` coordinates.
#[derive(Debug, Clone, Copy)]
struct StepLaw {
    z_drift: f64,
    w_decay: f64,
    cov: [[f64; 2]; 2],
}

impl StepLaw {
    fn new(lattice: &Lattice, params: &ModelParams, delta: f64) -> StepLaw {
        let a = lattice.price_vol_scale();
        let s = lattice.spread_scale();
        let var_z = delta * params.sigma * params.sigma / (a * a);
        let var_w = delta * params.nu * params.nu / (s * s);
        let cov_zw = delta * params.rho * params.sigma * params.nu / (a * s);
        StepLaw {
            z_drift: (params.mu - 0.5 * params.sigma * params.sigma) * delta / a,
            w_decay: 1.0 - delta * params.kappa,
            cov: [[var_z, cov_zw], [cov_zw, var_w]],
        }
    }

    fn mean(&self, z: f64, w: f64) -> [f64; 2] {
        [z + self.z_drift, self.w_decay * w]
    }
}

/// Sparse row-stochastic operator: for each `(z, w)` node the lattice nodes
/// reached in one step and their probabilities.
#[derive(Debug, Clone)]
pub struct TransitionRule {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<f64>,
    clamped: Vec<bool>,
    near_edge: Vec<bool>,
    delta: f64,
    law: StepLaw,
    quad_nodes: usize,
    z0: f64,
    w0: f64,
    z_step: f64,
    w_step: f64,
    nz: usize,
    nw: usize,
}

/// Expectation operator over one step of length `delta`.
pub fn build_transition(lattice: &Lattice, params: &ModelParams, delta: f64) -> Result<TransitionRule> {
    params.validate()?;
    ensure_positive("delta", delta)?;
    if delta * params.kappa >= 1.0 {
        return Err(Error::invalid("delta", format!("delta * kappa = {} must be < 1", delta * params.kappa)));
    }
    let law = StepLaw::new(lattice, params, delta);
    let (nz, nw, _) = lattice.shape();
    let n = lattice.spec().quad_nodes;
    let z0 = lattice.z_values()[0];
    let w0 = lattice.w_values()[0];
    let (hz, hw) = (lattice.z_step(), lattice.w_step());

    let mut offsets = Vec::with_capacity(nz * nw + 1);
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let mut clamped = Vec::with_capacity(nz * nw);
    let mut near_edge = Vec::with_capacity(nz * nw);
    offsets.push(0);

    let sd_z = law.cov[0][0].sqrt();
    let sd_w = law.cov[1][1].sqrt();
    let z_hi = lattice.z_values()[nz - 1];
    let w_hi = lattice.w_values()[nw - 1];

    let mut row: Vec<(u32, f64)> = Vec::with_capacity(4 * n * n);
    for iz in 0..nz {
        for iw in 0..nw {
            let mean = law.mean(lattice.z_values()[iz], lattice.w_values()[iw]);
            let points = gaussian_quadrature(mean, law.cov, n)?;
            row.clear();
            let mut any_clamped = false;
            for ([zq, wq], pw) in points {
                let (fz, cz) = axis_position(zq, z0, hz, nz);
                let (fw, cw) = axis_position(wq, w0, hw, nw);
                any_clamped |= cz || cw;
                let (iz0, tz) = split(fz, nz);
                let (iw0, tw) = split(fw, nw);
                for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                    if wz == 0.0 {
                        continue;
                    }
                    for (dw, ww) in [(0, 1.0 - tw), (1, tw)] {
                        if ww == 0.0 {
                            continue;
                        }
                        let t = ((iz0 + dz) * nw + iw0 + dw) as u32;
                        let wgt = pw * wz * ww;
                        match row.iter_mut().find(|(k, _)| *k == t) {
                            Some(e) => e.1 += wgt,
                            None => row.push((t, wgt)),
                        }
                    }
                }
            }
            row.sort_by_key(|e| e.0);
            let total: f64 = row.iter().map(|e| e.1).sum();
            for (t, wgt) in &row {
                targets.push(*t);
                weights.push(wgt / total);
            }
            offsets.push(targets.len());
            clamped.push(any_clamped);
            near_edge.push(
                mean[0] - 3.0 * sd_z < z0
                    || mean[0] + 3.0 * sd_z > z_hi
                    || mean[1] - 3.0 * sd_w < w0
                    || mean[1] + 3.0 * sd_w > w_hi,
            );
        }
    }

    Ok(TransitionRule {
        offsets,
        targets,
        weights,
        clamped,
        near_edge,
        delta,
        law,
        quad_nodes: n,
        z0,
        w0,
        z_step: hz,
        w_step: hw,
        nz,
        nw,
    })
}

/// Fractional grid position of `v`, clamped into the axis; the flag reports
/// whether clamping happened.
fn axis_position(v: f64, origin: f64, step: f64, count: usize) -> (f64, bool) {
    let f = (v - origin) / step;
    let last = (count - 1) as f64;
    if f < 0.0 {
        (0.0, true)
    } else if f > last {
        (last, true)
    } else {
        (f, false)
    }
}

fn split(f: f64, count: usize) -> (usize, f64) {
    let i = (f.floor() as usize).min(count.saturating_sub(2));
    if count == 1 {
        return (0, 0.0);
    }
    (i, f - i as f64)
}

impl TransitionRule {
    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `(target node, probability)` pairs for a source node.
    pub fn row(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[node]..self.offsets[node + 1];
        self.targets[range.clone()]
            .iter()
            .zip(&self.weights[range])
            .map(|(t, w)| (*t as usize, *w))
    }

    pub(crate) fn row_slices(&self, node: usize) -> (&[u32], &[f64]) {
        let range = self.offsets[node]..self.offsets[node + 1];
        (&self.targets[range.clone()], &self.weights[range])
    }

    pub fn row_sum(&self, node: usize) -> f64 {
        self.row(node).map(|(_, w)| w).sum()
    }

    /// Whether any quadrature point of this node was clamped onto the edge.
    pub fn is_clamped(&self, node: usize) -> bool {
        self.clamped[node]
    }

    /// Whether the node's conditional mean is within three conditional
    /// standard deviations of the lattice boundary.
    pub fn is_near_edge(&self, node: usize) -> bool {
        self.near_edge[node]
    }

    /// Nodes whose rows are affected by edge clamping.
    pub fn clamped_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&n| self.clamped[n]).collect()
    }

    /// Expectation of a field defined on `(z, w)` nodes.
    pub fn expect(&self, node: usize, values: &[f64]) -> f64 {
        self.row(node).map(|(t, w)| w * values[t]).sum()
    }

    /// Exact conditional mean of `(z, w)` under the bivariate normal step.
    pub fn conditional_mean(&self, z: f64, w: f64) -> [f64; 2] {
        self.law.mean(z, w)
    }

    /// Conditional covariance of `(z, w)` over one step.
    pub fn conditional_cov(&self) -> [[f64; 2]; 2] {
        self.law.cov
    }

    /// Raw quadrature points of a node before interpolation onto the lattice.
    pub fn quadrature_points(&self, node: usize) -> Result<Vec<([f64; 2], f64)>> {
        let (iz, iw) = (node / self.nw, node % self.nw);
        let z = self.z0 + iz as f64 * self.z_step;
        let w = self.w0 + iw as f64 * self.w_step;
        gaussian_quadrature(self.law.mean(z, w), self.law.cov, self.quad_nodes)
    }

    pub fn node_coords(&self, node: usize) -> (usize, usize) {
        (node / self.nw, node % self.nw)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nz, self.nw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s1_lattice(n_time: usize) -> Lattice {
        let params = ModelParams::baseline();
        Lattice::build(&GridSpec::with_defaults(1.0, n_time), &params, 1.0).unwrap()
    }

    #[test]
    fn gauss_hermite_moments() {
        for n in 3..=12 {
            let (u, w) = gauss_hermite_normal(n).unwrap();
            // E[U^k] = (k-1)!! for even k, 0 for odd k; exact for k < 2n.
            let mut double_fact = 1.0;
            for k in 0..(2 * n) {
                let m: f64 = u.iter().zip(&w).map(|(x, wt)| wt * x.powi(k as i32)).sum();
                let scale: f64 = u.iter().zip(&w).map(|(x, wt)| wt * x.abs().powi(k as i32)).sum();
                let expected = if k % 2 == 1 {
                    0.0
                } else {
                    if k >= 2 {
                        double_fact *= (k - 1) as f64;
                    }
                    double_fact
                };
                assert!(
                    (m - expected).abs() < 1e-12 * scale.max(1.0),
                    "n={n} k={k}: {m} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn lattice_axes_match_formulas() {
        let lat = s1_lattice(100);
        let (nz, nw, ny) = lat.shape();
        assert_eq!((nz, nw, ny), (71, 71, 241));
        let mid = nz / 2;
        assert!((lat.p_values()[mid] - 0.12_f64.exp()).abs() < 1e-14);
        assert!((lat.x_values()[nw / 2] - 0.1).abs() < 1e-15);
        // w = 1 sits ten steps above the centre.
        let x1 = lat.x_values()[nw / 2 + 10];
        assert!((x1 - (0.1 + 0.106_066_017_177_982_13)).abs() < 1e-12);
        assert!(lat.p_values().windows(2).all(|w| w[1] > w[0] && w[0] > 0.0));
        assert!(lat.x_values().windows(2).all(|w| w[1] > w[0]));
        let y = lat.y_values();
        assert!((y[0] + 12.0).abs() < 1e-12 && (y[ny - 1] - 12.0).abs() < 1e-12);
        assert_eq!(y[ny / 2], 0.0);
    }

    #[test]
    fn spec_validation() {
        let params = ModelParams::baseline();
        let mut spec = GridSpec::with_defaults(1.0, 100);
        spec.y_max = 12.05;
        assert!(spec.validate(&params).is_err());
        let mut spec = GridSpec::with_defaults(1.0, 100);
        spec.quad_nodes = 2;
        assert!(spec.validate(&params).is_err());
        let mut fast = params;
        fast.kappa = 150.0;
        assert!(GridSpec::with_defaults(1.0, 100).validate(&fast).is_err());
        let mut spec = GridSpec::with_defaults(1.0, 100);
        spec.xi = 0.0;
        assert!(spec.validate(&params).is_err());
    }

    #[test]
    fn rows_are_stochastic() {
        let lat = s1_lattice(50);
        let rule = build_transition(&lat, lat.params(), lat.dt()).unwrap();
        for node in 0..rule.n_nodes() {
            assert!((rule.row_sum(node) - 1.0).abs() < 1e-12);
            assert!(rule.row(node).all(|(t, w)| w >= 0.0 && t < lat.n_nodes()));
        }
    }

    #[test]
    fn conditional_spread_mean_is_reproduced() {
        let params = ModelParams::baseline();
        let lat = s1_lattice(100);
        let rule = build_transition(&lat, &params, lat.dt()).unwrap();
        let delta = lat.dt();
        let (nz, nw, _) = lat.shape();
        let x_field: Vec<f64> = (0..lat.n_nodes()).map(|n| lat.x_values()[n % nw]).collect();
        let logp_field: Vec<f64> = (0..lat.n_nodes()).map(|n| lat.p_values()[n / nw].ln()).collect();
        for iz in 10..nz - 10 {
            for iw in 10..nw - 10 {
                let node = lat.node_index(iz, iw);
                assert!(!rule.is_clamped(node));
                let x = lat.x_values()[iw];
                let expect_x = (1.0 - delta * params.kappa) * x + delta * params.kappa * params.theta;
                assert!((rule.expect(node, &x_field) - expect_x).abs() < 1e-12);
                let expect_lp = lat.p_values()[iz].ln()
                    + (params.mu - 0.5 * params.sigma * params.sigma) * delta;
                assert!((rule.expect(node, &logp_field) - expect_lp).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_covariances_collapse() {
        let pts = gaussian_quadrature([0.3, -0.2], [[0.0, 0.0], [0.0, 0.0]], 5).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0], ([0.3, -0.2], 1.0));

        // |rho| = 1: all points on the line w = mean_w + (z - mean_z).
        let pts = gaussian_quadrature([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]], 5).unwrap();
        assert_eq!(pts.len(), 5);
        for ([z, w], _) in &pts {
            assert!((z - w).abs() < 1e-12);
        }
        let total: f64 = pts.iter().map(|p| p.1).sum();
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rule_is_exact_on_monomials_without_interpolation() {
        let mean = [0.4, -0.7];
        let cov = [[0.3, 0.12], [0.12, 0.5]];
        let n = 5;
        let pts = gaussian_quadrature(mean, cov, n).unwrap();
        // Reference moments from the Cholesky representation Z = m + L U:
        // E[Z1^a Z2^b] by expanding in independent normals with a finer rule.
        let fine = gaussian_quadrature(mean, cov, 20).unwrap();
        for a in 0..(2 * n) {
            for b in 0..(2 * n - a) {
                let f = |p: &[f64; 2]| p[0].powi(a as i32) * p[1].powi(b as i32);
                let coarse: f64 = pts.iter().map(|(p, w)| w * f(p)).sum();
                let reference: f64 = fine.iter().map(|(p, w)| w * f(p)).sum();
                assert!(
                    (coarse - reference).abs() < 1e-10 * reference.abs().max(1.0),
                    "degree ({a},{b}): {coarse} vs {reference}"
                );
            }
        }
    }

    #[test]
    fn probes_at_the_edge_are_rejected() {
        let lat = s1_lattice(100);
        assert!(lat.locate_interior(0.845, 0.023).is_ok());
        let p_edge = *lat.p_values().last().unwrap();
        assert!(lat.locate_interior(p_edge, 0.1).is_err());
        assert!(lat.locate_interior(100.0, 0.1).is_err());
        assert!(lat.locate_interior(1.0, 5.0).is_err());
    }
}
