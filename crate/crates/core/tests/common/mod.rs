#![allow(dead_code)]

use pairtrade_core::general::GeneralScheme;
use pairtrade_core::grid::{build_transition, GridSpec, Lattice};
use pairtrade_core::market::{CaraUtility, CostSpec, ModelParams};
use pairtrade_core::solver::{
    backward_step, column_branches, extract_boundaries, fixed_point_residual, solve, terminal_slice, Branch, Retain,
    SliceControls, Solution, SolveOptions,
};
use rayon::prelude::*;

/// Worst values found by replaying a backward induction slice by slice.
#[derive(Debug, Clone, Default)]
pub struct FieldAudit {
    pub slices: usize,
    pub columns: usize,
    pub max_fixed_point_residual: f64,
    /// Smallest `log F_b + log F_s` over all nodes.
    pub min_round_trip_log: f64,
    /// Columns whose buy set is not a down-set or sell set not an up-set.
    pub shape_violations: usize,
    /// Columns with `Y_b >= Y_s`.
    pub order_violations: usize,
    /// `|log H(y) - log F_b - log H(y + xi)|` for `y <= Y_b`, and the sell analogue.
    pub max_extension_error: f64,
    /// `|log H - log E[H(next)]|` strictly between the boundaries.
    pub max_hold_error: f64,
    /// Most negative relative second difference of the terminal `H` in `y`.
    pub terminal_convexity: f64,
    /// Interior `(slice, z, w, y)` nodes with relative second difference below `-1e-9`.
    pub interior_concave_nodes: usize,
    pub interior_nodes: usize,
    /// Whether boundaries extracted here equal those stored in the solution.
    pub boundaries_match: bool,
    pub all_finite: bool,
}

#[derive(Default)]
struct ColumnAudit {
    shape: usize,
    order: usize,
    ext: f64,
    hold: f64,
    concave: usize,
    interior: usize,
    finite: bool,
}

fn audit_column(h: &[f64], cont: &[f64], ctl: pairtrade_core::solver::ControlFactors) -> ColumnAudit {
    let ny = h.len();
    let br = column_branches(h, cont, ctl);
    let mut out = ColumnAudit {
        finite: h.iter().all(|v| v.is_finite()),
        ..Default::default()
    };
    let last_buy = br.iter().rposition(|b| *b == Branch::Buy);
    let first_sell = br.iter().position(|b| *b == Branch::Sell);
    if let Some(k) = last_buy {
        if br[..=k].iter().any(|b| *b != Branch::Buy) {
            out.shape += 1;
        }
    }
    if let Some(k) = first_sell {
        if br[k..].iter().any(|b| *b != Branch::Sell) {
            out.shape += 1;
        }
    }
    if let (Some(b), Some(s)) = (last_buy, first_sell) {
        if b >= s {
            out.order += 1;
        }
    }
    let lo = last_buy.map_or(0, |k| k + 1);
    let hi = first_sell.unwrap_or(ny);
    for iy in 0..ny {
        let err = if iy < lo {
            (h[iy] - ctl.log_fb - h[iy + 1]).abs()
        } else if iy >= hi {
            (h[iy] - ctl.log_fs - h[iy - 1]).abs()
        } else {
            (h[iy] - cont[iy]).abs()
        };
        let err = err / h[iy].abs().max(1.0);
        if iy < lo || iy >= hi {
            out.ext = out.ext.max(err);
        } else {
            out.hold = out.hold.max(err);
        }
    }
    for iy in 1..ny - 1 {
        let second = (h[iy + 1] - h[iy]).exp() + (h[iy - 1] - h[iy]).exp() - 2.0;
        out.interior += 1;
        if second < -1e-9 {
            out.concave += 1;
        }
    }
    out
}

/// Replays the backward induction with the public building blocks, checking
/// every column of every slice, and compares the boundaries with `solution`.
pub fn audit_field(
    params: &ModelParams,
    costs: &CostSpec,
    gamma: f64,
    spec: &GridSpec,
    solution: Option<&Solution>,
) -> FieldAudit {
    let lattice = Lattice::build(spec, params, 1.0).unwrap();
    let transition = build_transition(&lattice, params, lattice.dt()).unwrap();
    let (_, _, ny) = lattice.shape();
    let mut next = terminal_slice(&lattice, gamma, costs);

    let mut audit = FieldAudit {
        min_round_trip_log: f64::INFINITY,
        boundaries_match: true,
        all_finite: true,
        ..Default::default()
    };
    audit.terminal_convexity = next
        .par_chunks(ny)
        .map(|h| {
            let top = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (1..ny - 1)
                .map(|iy| (h[iy + 1] - top).exp() + (h[iy - 1] - top).exp() - 2.0 * (h[iy] - top).exp())
                .fold(0.0_f64, f64::min)
        })
        .reduce(|| 0.0, f64::min);

    for i in (0..spec.n_time).rev() {
        let controls = SliceControls::for_slice(&lattice, i, gamma, costs);
        let sol = backward_step(&next, &transition, &controls, ny).unwrap();
        audit.slices += 1;
        audit.max_fixed_point_residual = audit.max_fixed_point_residual.max(fixed_point_residual(&sol, &controls, ny));
        for (b, s) in controls.log_fb.iter().zip(&controls.log_fs) {
            audit.min_round_trip_log = audit.min_round_trip_log.min(b + s);
        }
        let cols: Vec<ColumnAudit> = sol
            .log_h
            .par_chunks(ny)
            .zip(sol.continuation.par_chunks(ny))
            .enumerate()
            .map(|(node, (h, c))| audit_column(h, c, controls.at(node)))
            .collect();
        for c in &cols {
            audit.columns += 1;
            audit.shape_violations += c.shape;
            audit.order_violations += c.order;
            audit.max_extension_error = audit.max_extension_error.max(c.ext);
            audit.max_hold_error = audit.max_hold_error.max(c.hold);
            audit.interior_concave_nodes += c.concave;
            audit.interior_nodes += c.interior;
            audit.all_finite &= c.finite;
        }
        if let Some(s) = solution {
            let b = extract_boundaries(&sol, &controls, lattice.y_values());
            audit.boundaries_match &= &b == s.boundaries.slice(i);
        }
        next = sol.log_h;
    }
    audit
}

pub fn tiny_spec() -> GridSpec {
    GridSpec {
        n_time: 2,
        z_half_width: 1.0,
        z_step: 0.5,
        w_half_width: 1.0,
        w_step: 0.5,
        xi: 0.5,
        y_max: 2.5,
        quad_nodes: 5,
    }
}

pub const BOND_GRID: [f64; 7] = [-0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3];

// V = 1 - D with D of order one, so values within a few ulps of zero carry
// only rounding noise; below 1e-6 the 1e-8 tolerance becomes an absolute
// 1e-14.
pub const ROUNDING_FLOOR: f64 = 1e-6;

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ROUNDING_FLOOR)
}

/// Largest relative gap between the general and reduced values over every
/// node and bond level of the tiny lattice.
pub fn max_discrepancy(params: &ModelParams, costs: &CostSpec, gamma: f64) -> f64 {
    let spec = tiny_spec();
    let general = GeneralScheme::new(params, costs, gamma, &spec, 1.0).unwrap();
    let reduced = solve(
        params,
        costs,
        gamma,
        &spec,
        &SolveOptions {
            retain: Retain::All,
            ..Default::default()
        },
    )
    .unwrap();
    let u = CaraUtility::new(gamma).unwrap();
    let lat = &reduced.lattice;
    let (nz, nw, ny) = lat.shape();
    assert_eq!((nz, nw, ny), (5, 5, 11));
    let mut worst = 0.0_f64;
    for i in 0..=spec.n_time {
        let t = lat.time_points()[i];
        let growth = params.growth_to_horizon(t);
        for node in 0..nz * nw {
            let (iz, iw) = lat.node_coords(node);
            for iy in 0..ny {
                let h = reduced.values.log_h(i, iz, iw, iy).unwrap().exp();
                for g in BOND_GRID {
                    let v_red = u.value_from_h(g, growth, h);
                    let v_gen = general.value(i, node, iy, g).unwrap();
                    worst = worst.max(rel(v_gen, v_red));
                }
            }
        }
    }
    worst
}
