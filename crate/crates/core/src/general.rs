//! Dynamic programming on the full state `(t, p, x, y, g)`.
//!
//! This keeps the bond holding as a state variable and maximizes expected
//! CARA utility directly, without factoring out the exponential of `g`. It is
//! exponential in the number of time steps and exists to cross-check the
//! reduced solver on small lattices.

use crate::error::{ensure_finite, Error, Result};
use crate::grid::{build_transition, GridSpec, Lattice, TransitionRule};
use crate::market::{effective_prices_unchecked, CaraUtility, CostSpec, ModelParams};

/// Largest number of terminal evaluations a single `value` call may need.
pub const DEFAULT_WORK_LIMIT: f64 = 5e8;

/// One application of the three-way operator: the best of buying `xi`
/// (moving to `buy`), selling `xi` (moving to `sell`) and holding.
pub fn general_value_step(buy: Option<f64>, sell: Option<f64>, hold: f64) -> f64 {
    let mut v = hold;
    if let Some(b) = buy {
        v = v.max(b);
    }
    if let Some(s) = sell {
        v = v.max(s);
    }
    v
}

#[derive(Debug, Clone)]
pub struct GeneralScheme {
    lattice: Lattice,
    transition: TransitionRule,
    costs: CostSpec,
    utility: CaraUtility,
    growth: f64,
}

impl GeneralScheme {
    pub fn new(params: &ModelParams, costs: &CostSpec, gamma: f64, spec: &GridSpec, p0: f64) -> Result<Self> {
        Self::with_work_limit(params, costs, gamma, spec, p0, DEFAULT_WORK_LIMIT)
    }

    pub fn with_work_limit(
        params: &ModelParams,
        costs: &CostSpec,
        gamma: f64,
        spec: &GridSpec,
        p0: f64,
        work_limit: f64,
    ) -> Result<Self> {
        costs.validate()?;
        let utility = CaraUtility::new(gamma)?;
        let lattice = Lattice::build(spec, params, p0)?;
        let transition = build_transition(&lattice, params, lattice.dt())?;
        let (_, _, ny) = lattice.shape();
        let max_row = (0..transition.n_nodes()).map(|n| transition.row(n).count()).max().unwrap_or(1);
        let work = ((ny * max_row) as f64).powi(spec.n_time as i32) * ny as f64;
        if work > work_limit {
            return Err(Error::SizeGuard(format!(
                "general scheme needs ~{work:.2e} terminal evaluations per value (limit {work_limit:.2e}); \
                 use fewer time steps, y levels or nodes"
            )));
        }
        let growth = (params.r * lattice.dt()).exp();
        Ok(GeneralScheme {
            lattice,
            transition,
            costs: *costs,
            utility,
            growth,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    fn n_time(&self) -> usize {
        self.lattice.spec().n_time
    }

    /// `V(t_i, node, y_iy, g)`.
    pub fn value(&self, i: usize, node: usize, iy: usize, g: f64) -> Result<f64> {
        ensure_finite("g", g)?;
        if i > self.n_time() || node >= self.lattice.n_nodes() || iy >= self.lattice.y_values().len() {
            return Err(Error::invalid("index", format!("({i}, {node}, {iy}) is outside the lattice")));
        }
        Ok(self.value_unchecked(i, node, iy, g))
    }

    fn prices(&self, node: usize) -> (f64, f64) {
        let (iz, iw) = self.lattice.node_coords(node);
        effective_prices_unchecked(self.lattice.p_values()[iz], self.lattice.x_values()[iw], &self.costs)
    }

    fn value_unchecked(&self, i: usize, node: usize, iy: usize, g: f64) -> f64 {
        if i == self.n_time() {
            let (plus, minus) = self.prices(node);
            let y = self.lattice.y_values()[iy];
            let j = if y >= 0.0 { plus * y } else { minus * y };
            return self.utility.utility(g + j);
        }
        // The within-slice fixed point of the three-way operator is reached
        // by a monotone chain of trades followed by holding: a buy followed by
        // a sell returns to the same y with less bond and is never better.
        let (plus, minus) = self.prices(node);
        let xi = self.lattice.spec().xi;
        let ny = self.lattice.y_values().len();
        let mut best = f64::NEG_INFINITY;
        for target in 0..ny {
            let k = target as f64 - iy as f64;
            let g_after = if k >= 0.0 { g - k * xi * minus } else { g - k * xi * plus };
            best = best.max(self.continuation(i, node, target, g_after));
        }
        best
    }

    /// `E[V(t_{i+1}, ., y, g e^{r delta}) | node]`.
    pub fn continuation(&self, i: usize, node: usize, iy: usize, g: f64) -> f64 {
        let g_next = g * self.growth;
        self.transition
            .row(node)
            .map(|(target, w)| w * self.value_unchecked(i + 1, target, iy, g_next))
            .sum()
    }

    /// Largest violation of `V = max{buy, sell, hold}` at `(i, node, ., g)`,
    /// evaluated with `general_value_step` on the computed values.
    pub fn fixed_point_violation(&self, i: usize, node: usize, g: f64) -> Result<f64> {
        if i >= self.n_time() || node >= self.lattice.n_nodes() {
            return Err(Error::invalid("index", format!("({i}, {node}) is not a decision node")));
        }
        ensure_finite("g", g)?;
        let (plus, minus) = self.prices(node);
        let xi = self.lattice.spec().xi;
        let ny = self.lattice.y_values().len();
        let mut worst = 0.0_f64;
        for iy in 0..ny {
            let v = self.value_unchecked(i, node, iy, g);
            let buy = (iy + 1 < ny).then(|| self.value_unchecked(i, node, iy + 1, g - xi * minus));
            let sell = (iy > 0).then(|| self.value_unchecked(i, node, iy - 1, g + xi * plus));
            let hold = self.continuation(i, node, iy, g);
            worst = worst.max((general_value_step(buy, sell, hold) - v).abs());
        }
        Ok(worst)
    }
}
