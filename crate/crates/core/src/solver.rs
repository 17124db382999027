//! Backward dynamic programming for the reduced value field `H` and extraction
//! of the buy / sell boundaries.
//!
//! At each time `chi_i` the reduced scheme reads
//!
//! ```text
//! H(i, z, w, y) = min { F_b H(i, z, w, y + xi),
//!                       F_s H(i, z, w, y - xi),
//!                       E[ H(i + 1, z', w', y) ] }
//! F_b = exp( gamma xi A_-(p, x) e^{r (T - chi_i)})
//! F_s = exp(-gamma xi A_+(p, x) e^{r (T - chi_i)})
//! ```
//!
//! with `H(T) = exp(-gamma J)`. All values are held as `log H`. The same-slice
//! terms make each slice a small fixed-point problem per `(z, w)` column; it is
//! resolved by a descending sweep composing buys and an ascending sweep
//! composing sells. Because `F_b F_s >= 1`, mixing the two directions never
//! helps, so the pointwise minimum of the sweeps is the fixed point. That
//! property is re-checked on every slice.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::grid::{build_transition, GridSpec, Lattice, TransitionRule};
use crate::market::{effective_prices_unchecked, CostSpec, ModelParams};

/// Relative tolerance for tie-breaking and for the fixed-point check.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// `(F_b, F_s)` stored as logarithms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlFactors {
    pub log_fb: f64,
    pub log_fs: f64,
}

impl ControlFactors {
    pub fn fb(&self) -> f64 {
        self.log_fb.exp()
    }
    pub fn fs(&self) -> f64 {
        self.log_fs.exp()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn control_factors(
    p: f64,
    x: f64,
    t: f64,
    gamma: f64,
    costs: &CostSpec,
    xi: f64,
    r: f64,
    horizon: f64,
) -> Result<ControlFactors> {
    ensure_positive("p", p)?;
    ensure_finite("x", x)?;
    ensure_finite("t", t)?;
    ensure_positive("gamma", gamma)?;
    ensure_finite("xi", xi)?;
    if xi < 0.0 {
        return Err(Error::invalid("xi", "must be >= 0"));
    }
    let (plus, minus) = effective_prices_unchecked(p, x, costs);
    let growth = (r * (horizon - t)).exp();
    Ok(ControlFactors {
        log_fb: gamma * xi * minus * growth,
        log_fs: -gamma * xi * plus * growth,
    })
}

/// Control factors for every `(z, w)` node of one time slice.
#[derive(Debug, Clone)]
pub struct SliceControls {
    pub log_fb: Vec<f64>,
    pub log_fs: Vec<f64>,
}

impl SliceControls {
    pub fn for_slice(lattice: &Lattice, slice: usize, gamma: f64, costs: &CostSpec) -> SliceControls {
        let params = lattice.params();
        let t = lattice.time_points()[slice];
        let growth = params.growth_to_horizon(t);
        let xi = lattice.spec().xi;
        let (nz, nw, _) = lattice.shape();
        let mut log_fb = Vec::with_capacity(nz * nw);
        let mut log_fs = Vec::with_capacity(nz * nw);
        for &p in lattice.p_values() {
            for &x in lattice.x_values() {
                let (plus, minus) = effective_prices_unchecked(p, x, costs);
                log_fb.push(gamma * xi * minus * growth);
                log_fs.push(-gamma * xi * plus * growth);
            }
        }
        debug_assert_eq!(log_fb.len(), nz * nw);
        SliceControls { log_fb, log_fs }
    }

    pub fn at(&self, node: usize) -> ControlFactors {
        ControlFactors {
            log_fb: self.log_fb[node],
            log_fs: self.log_fs[node],
        }
    }
}

/// Output of one backward step: the fixed point and the continuation values
/// it was built from (both as `log H`, laid out `(z, w, y)` with `y` fastest).
#[derive(Debug, Clone)]
pub struct SliceSolution {
    pub log_h: Vec<f64>,
    pub continuation: Vec<f64>,
}

/// `log E[H(next)]` at every `(z, w, y)`.
pub fn continuation(next: &[f64], transition: &TransitionRule, ny: usize) -> Result<Vec<f64>> {
    let n_nodes = transition.n_nodes();
    if next.len() != n_nodes * ny {
        return Err(Error::invalid(
            "next_slice",
            format!("has {} values, expected {}", next.len(), n_nodes * ny),
        ));
    }
    // Shift each y-column by the midpoint of its range so that exponentials
    // stay comfortably inside f64 range; fall back to log-sum-exp otherwise.
    let mut lo = vec![f64::INFINITY; ny];
    let mut hi = vec![f64::NEG_INFINITY; ny];
    for col in next.chunks_exact(ny) {
        for (iy, &v) in col.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("non-finite log H ({v}) in next slice")));
            }
            lo[iy] = lo[iy].min(v);
            hi[iy] = hi[iy].max(v);
        }
    }
    let wide = lo.iter().zip(&hi).any(|(a, b)| b - a > 1200.0);
    let mut out = vec![0.0; n_nodes * ny];
    if !wide {
        let shift: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let scaled: Vec<f64> = next
            .par_chunks(ny)
            .flat_map_iter(|col| col.iter().zip(&shift).map(|(v, s)| (v - s).exp()).collect::<Vec<_>>())
            .collect();
        out.par_chunks_mut(ny).enumerate().for_each(|(node, acc)| {
            let (targets, weights) = transition.row_slices(node);
            for (&t, &wt) in targets.iter().zip(weights) {
                let src = &scaled[t as usize * ny..(t as usize + 1) * ny];
                for (a, s) in acc.iter_mut().zip(src) {
                    *a += wt * s;
                }
            }
            for (a, s) in acc.iter_mut().zip(&shift) {
                *a = a.ln() + s;
            }
        });
    } else {
        out.par_chunks_mut(ny).enumerate().for_each(|(node, acc)| {
            let (targets, weights) = transition.row_slices(node);
            for (iy, a) in acc.iter_mut().enumerate() {
                let m = targets
                    .iter()
                    .map(|&t| next[t as usize * ny + iy])
                    .fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = targets
                    .iter()
                    .zip(weights)
                    .map(|(&t, &w)| w * (next[t as usize * ny + iy] - m).exp())
                    .sum();
                *a = s.ln() + m;
            }
        });
    }
    if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite continuation value {bad}")));
    }
    Ok(out)
}

/// Resolve the same-slice min over chained trades for one `(z, w)` column.
fn resolve_column(cont: &[f64], ctl: ControlFactors, out: &mut [f64]) {
    let ny = cont.len();
    // Descending sweep: best of "buy up to some y' >= y then continue".
    let mut buy = vec![0.0; ny];
    buy[ny - 1] = cont[ny - 1];
    for iy in (0..ny - 1).rev() {
        buy[iy] = cont[iy].min(ctl.log_fb + buy[iy + 1]);
    }
    // Ascending sweep for sells, merged into the output on the fly.
    let mut sell = cont[0];
    out[0] = buy[0].min(sell);
    for iy in 1..ny {
        sell = cont[iy].min(ctl.log_fs + sell);
        out[iy] = buy[iy].min(sell);
    }
}

/// One step of backward induction.
pub fn backward_step(
    next: &[f64],
    transition: &TransitionRule,
    controls: &SliceControls,
    ny: usize,
) -> Result<SliceSolution> {
    let cont = continuation(next, transition, ny)?;
    let mut log_h = vec![0.0; cont.len()];
    log_h
        .par_chunks_mut(ny)
        .zip(cont.par_chunks(ny))
        .enumerate()
        .for_each(|(node, (out, c))| resolve_column(c, controls.at(node), out));
    let sol = SliceSolution {
        log_h,
        continuation: cont,
    };
    let residual = fixed_point_residual(&sol, controls, ny);
    if !(residual < TIE_TOLERANCE) {
        return Err(Error::Numerical(format!(
            "slice is not a fixed point of the three-way minimum (residual {residual:e})"
        )));
    }
    Ok(sol)
}

/// Largest relative change from re-applying the three-way minimum once.
pub fn fixed_point_residual(sol: &SliceSolution, controls: &SliceControls, ny: usize) -> f64 {
    sol.log_h
        .par_chunks(ny)
        .zip(sol.continuation.par_chunks(ny))
        .enumerate()
        .map(|(node, (h, c))| {
            let ctl = controls.at(node);
            let mut worst = 0.0_f64;
            for iy in 0..ny {
                let mut best = c[iy];
                if iy + 1 < ny {
                    best = best.min(ctl.log_fb + h[iy + 1]);
                }
                if iy > 0 {
                    best = best.min(ctl.log_fs + h[iy - 1]);
                }
                worst = worst.max((best - h[iy]).abs() / h[iy].abs().max(1.0));
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

/// Which branch of the three-way minimum is active at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Branch {
    Buy,
    Sell,
    Hold,
}

/// Branch attribution per `y` for one column. Exact ties go to `Hold`.
pub fn column_branches(h: &[f64], cont: &[f64], ctl: ControlFactors) -> Vec<Branch> {
    let ny = h.len();
    (0..ny)
        .map(|iy| {
            let tol = TIE_TOLERANCE * h[iy].abs().max(1.0);
            if cont[iy] - h[iy] <= tol {
                return Branch::Hold;
            }
            if iy + 1 < ny && (ctl.log_fb + h[iy + 1] - h[iy]).abs() <= tol {
                return Branch::Buy;
            }
            if iy > 0 && (ctl.log_fs + h[iy - 1] - h[iy]).abs() <= tol {
                return Branch::Sell;
            }
            Branch::Hold
        })
        .collect()
}

/// Buy and sell boundaries for every `(z, w)` node of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySlice {
    pub buy: Vec<Option<f64>>,
    pub sell: Vec<Option<f64>>,
}

/// `Y_b` = largest `y` where buying strictly attains the minimum, `Y_s` =
/// smallest `y` where selling does; `None` when the branch never wins.
pub fn extract_boundaries(
    sol: &SliceSolution,
    controls: &SliceControls,
    y_values: &[f64],
) -> BoundarySlice {
    let ny = y_values.len();
    let (buy, sell): (Vec<_>, Vec<_>) = sol
        .log_h
        .par_chunks(ny)
        .zip(sol.continuation.par_chunks(ny))
        .enumerate()
        .map(|(node, (h, c))| {
            let branches = column_branches(h, c, controls.at(node));
            let yb = branches.iter().rposition(|b| *b == Branch::Buy).map(|i| y_values[i]);
            let ys = branches.iter().position(|b| *b == Branch::Sell).map(|i| y_values[i]);
            (yb, ys)
        })
        .unzip();
    BoundarySlice { buy, sell }
}

/// `log H` slices kept from a solve, keyed by time index.
#[derive(Debug, Clone)]
pub struct ValueField {
    shape: (usize, usize, usize),
    times: Vec<f64>,
    slices: BTreeMap<usize, Vec<f64>>,
}

impl ValueField {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    /// `log H` slice at time index `i`, if retained.
    pub fn slice(&self, i: usize) -> Option<&[f64]> {
        self.slices.get(&i).map(Vec::as_slice)
    }
    pub fn retained(&self) -> impl Iterator<Item = usize> + '_ {
        self.slices.keys().copied()
    }
    pub fn log_h(&self, i: usize, iz: usize, iw: usize, iy: usize) -> Option<f64> {
        let (_, nw, ny) = self.shape;
        self.slices.get(&i).map(|s| s[(iz * nw + iw) * ny + iy])
    }
}

/// Boundaries over all decision slices `0..n_time`.
#[derive(Debug, Clone)]
pub struct BoundaryField {
    nz: usize,
    nw: usize,
    times: Vec<f64>,
    slices: Vec<BoundarySlice>,
}

impl BoundaryField {
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }
    pub fn slice(&self, i: usize) -> &BoundarySlice {
        &self.slices[i]
    }
    /// `(Y_b, Y_s)` at time index `i` and node `(iz, iw)`.
    pub fn get(&self, i: usize, iz: usize, iw: usize) -> (Option<f64>, Option<f64>) {
        let node = iz * self.nw + iw;
        let s = &self.slices[i];
        (s.buy[node], s.sell[node])
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.nz, self.nw)
    }
}

/// Which `log H` slices a solve keeps in memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum Retain {
    /// Only the first and terminal slices.
    #[default]
    Endpoints,
    All,
    Slices(Vec<usize>),
}

impl Retain {
    fn keeps(&self, i: usize, n: usize) -> bool {
        match self {
            Retain::Endpoints => i == 0 || i == n,
            Retain::All => true,
            Retain::Slices(v) => v.contains(&i),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub p0: f64,
    pub retain: Retain,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            p0: 1.0,
            retain: Retain::Endpoints,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SolveStats {
    /// Largest fixed-point residual over all slices.
    pub max_fixed_point_residual: f64,
    /// `(slice, node)` pairs whose buy boundary reaches the top of the y-grid
    /// or whose sell boundary reaches the bottom.
    pub edge_touches: usize,
    /// Nodes whose transition rows are affected by edge clamping.
    pub clamped_nodes: usize,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub lattice: Lattice,
    pub transition: TransitionRule,
    pub values: ValueField,
    pub boundaries: BoundaryField,
    pub stats: SolveStats,
}

/// Terminal `log H = -gamma J` over the whole lattice.
pub fn terminal_slice(lattice: &Lattice, gamma: f64, costs: &CostSpec) -> Vec<f64> {
    let (nz, nw, ny) = lattice.shape();
    let mut out = Vec::with_capacity(nz * nw * ny);
    for &p in lattice.p_values() {
        for &x in lattice.x_values() {
            let (plus, minus) = effective_prices_unchecked(p, x, costs);
            for &y in lattice.y_values() {
                let j = if y >= 0.0 { plus * y } else { minus * y };
                out.push(-gamma * j);
            }
        }
    }
    out
}

/// Full backward induction from the terminal condition to `t = 0`.
pub fn solve(
    params: &ModelParams,
    costs: &CostSpec,
    gamma: f64,
    spec: &GridSpec,
    options: &SolveOptions,
) -> Result<Solution> {
    costs.validate()?;
    ensure_positive("gamma", gamma)?;
    let lattice = Lattice::build(spec, params, options.p0)?;
    let transition = build_transition(&lattice, params, lattice.dt())?;
    let n = spec.n_time;
    let (nz, nw, ny) = lattice.shape();

    let mut stats = SolveStats {
        clamped_nodes: transition.clamped_nodes().len(),
        ..SolveStats::default()
    };
    let mut slices = BTreeMap::new();
    let mut boundary_slices = Vec::with_capacity(n);
    let y_values = lattice.y_values().to_vec();
    let y_top = y_values[ny - 1] - spec.xi;
    let y_bottom = y_values[0] + spec.xi;

    let mut next = terminal_slice(&lattice, gamma, costs);
    if options.retain.keeps(n, n) {
        slices.insert(n, next.clone());
    }
    for i in (0..n).rev() {
        let controls = SliceControls::for_slice(&lattice, i, gamma, costs);
        let sol = backward_step(&next, &transition, &controls, ny)?;
        stats.max_fixed_point_residual = stats
            .max_fixed_point_residual
            .max(fixed_point_residual(&sol, &controls, ny));
        let bounds = extract_boundaries(&sol, &controls, &y_values);
        stats.edge_touches += bounds
            .buy
            .iter()
            .zip(&bounds.sell)
            .filter(|(b, s)| {
                b.is_some_and(|v| v >= y_top - 1e-9) || s.is_some_and(|v| v <= y_bottom + 1e-9)
            })
            .count();
        boundary_slices.push(bounds);
        next = sol.log_h;
        if options.retain.keeps(i, n) {
            slices.insert(i, next.clone());
        }
    }
    boundary_slices.reverse();
    if stats.edge_touches > 0 {
        log::warn!(
            "{} (slice, node) boundaries touch the edge of the y-grid (|y| = {})",
            stats.edge_touches,
            spec.y_max
        );
    }

    let times = lattice.time_points().to_vec();
    Ok(Solution {
        values: ValueField {
            shape: (nz, nw, ny),
            times: times.clone(),
            slices,
        },
        boundaries: BoundaryField {
            nz,
            nw,
            times: times[..n].to_vec(),
            slices: boundary_slices,
        },
        lattice,
        transition,
        stats,
    })
}
