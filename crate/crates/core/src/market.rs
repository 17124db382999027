//! Market model: coefficients, proportional-cost arithmetic, the liquidation
//! value of a delta-neutral pair position and the CARA terminal condition.
//!
//! Conventions used throughout the crate:
//!
//! * `p` is the price of stock P, `x = log(q / p)` the log-price spread.
//! * `y` is the signed number of shares of P held; the position in Q is `-y`.
//! * `A_+ = (b_p - a_q e^x) p` is the cash received per share when unwinding a
//!   long-P position, `A_- = (a_p - b_q e^x) p` the cash paid per share when
//!   buying P against Q.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::grid::Lattice;

/// Coefficients of the stock and spread dynamics.
///
/// `dp = mu p dt + sigma p dB`, `dx = kappa (theta - x) dt + nu dW`,
/// `d<B, W> = rho dt`, bond rate `r`, horizon `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub mu: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub theta: f64,
    pub nu: f64,
    pub rho: f64,
    pub r: f64,
    #[serde(rename = "T", alias = "horizon", default = "default_horizon")]
    pub horizon: f64,
}

fn default_horizon() -> f64 {
    1.0
}

impl ModelParams {
    /// Baseline scenario S1.
    pub fn baseline() -> Self {
        ModelParams {
            mu: 0.2,
            sigma: 0.4,
            kappa: 1.0,
            theta: 0.1,
            nu: 0.15,
            rho: 0.5,
            r: 0.01,
            horizon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("mu", self.mu)?;
        ensure_finite("theta", self.theta)?;
        ensure_finite("r", self.r)?;
        ensure_positive("sigma", self.sigma)?;
        ensure_positive("nu", self.nu)?;
        ensure_positive("kappa", self.kappa)?;
        ensure_positive("T", self.horizon)?;
        ensure_finite("rho", self.rho)?;
        if self.rho.abs() > 1.0 {
            return Err(Error::invalid("rho", format!("|rho| must be <= 1, got {}", self.rho)));
        }
        Ok(())
    }

    /// Standard deviation of the stationary spread law `N(theta, nu^2 / (2 kappa))`.
    pub fn stationary_spread_sd(&self) -> f64 {
        self.nu / (2.0 * self.kappa).sqrt()
    }

    /// Compounding factor `e^{r (T - t)}` applied to cash at time `t`.
    pub fn growth_to_horizon(&self, t: f64) -> f64 {
        (self.r * (self.horizon - t)).exp()
    }
}

/// Proportional transaction costs: `zeta_*` on purchases, `eta_*` on sales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub zeta_p: f64,
    pub zeta_q: f64,
    pub eta_p: f64,
    pub eta_q: f64,
}

impl CostSpec {
    /// The same fraction on every leg, as in all of the reference scenarios.
    pub fn uniform(fraction: f64) -> Self {
        CostSpec {
            zeta_p: fraction,
            zeta_q: fraction,
            eta_p: fraction,
            eta_q: fraction,
        }
    }

    pub fn zero() -> Self {
        Self::uniform(0.0)
    }

    /// Each fraction must lie in `[0, 1)`. Zero is accepted so that the
    /// frictionless limit can be evaluated.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("zeta_p", self.zeta_p),
            ("zeta_q", self.zeta_q),
            ("eta_p", self.eta_p),
            ("eta_q", self.eta_q),
        ] {
            ensure_finite(name, v)?;
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(name, format!("must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn a_p(&self) -> f64 {
        1.0 + self.zeta_p
    }
    pub fn a_q(&self) -> f64 {
        1.0 + self.zeta_q
    }
    pub fn b_p(&self) -> f64 {
        1.0 - self.eta_p
    }
    pub fn b_q(&self) -> f64 {
        1.0 - self.eta_q
    }

    pub fn is_frictionless(&self) -> bool {
        self.zeta_p == 0.0 && self.zeta_q == 0.0 && self.eta_p == 0.0 && self.eta_q == 0.0
    }
}

/// Full state of the trading problem at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub t: f64,
    pub p: f64,
    pub x: f64,
    pub y: f64,
    pub g: f64,
}

impl MarketState {
    pub fn new(t: f64, p: f64, x: f64, y: f64, g: f64) -> Result<Self> {
        ensure_finite("t", t)?;
        ensure_positive("p", p)?;
        ensure_finite("x", x)?;
        ensure_finite("y", y)?;
        ensure_finite("g", g)?;
        Ok(MarketState { t, p, x, y, g })
    }

    /// Shares of Q implied by delta neutrality.
    pub fn q_shares(&self) -> f64 {
        -self.y
    }
}

/// `U(z) = 1 - exp(-gamma z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaraUtility {
    pub gamma: f64,
}

impl CaraUtility {
    pub fn new(gamma: f64) -> Result<Self> {
        ensure_positive("gamma", gamma)?;
        Ok(CaraUtility { gamma })
    }

    pub fn utility(&self, wealth: f64) -> f64 {
        -(-self.gamma * wealth).exp_m1()
    }

    /// `V = 1 - exp(-gamma g e^{r (T - t)}) H`, the value function rebuilt from
    /// the reduced field `H` and the bond holding `g`.
    pub fn value_from_h(&self, g: f64, growth: f64, h: f64) -> f64 {
        1.0 - (-self.gamma * g * growth).exp() * h
    }
}

/// Per-share unwind prices `(A_+, A_-)`.
pub fn effective_prices(p: f64, x: f64, costs: &CostSpec) -> Result<(f64, f64)> {
    ensure_positive("p", p)?;
    ensure_finite("x", x)?;
    Ok(effective_prices_unchecked(p, x, costs))
}

#[inline]
pub(crate) fn effective_prices_unchecked(p: f64, x: f64, costs: &CostSpec) -> (f64, f64) {
    let ex = x.exp();
    let plus = (costs.b_p() - costs.a_q() * ex) * p;
    let minus = (costs.a_p() - costs.b_q() * ex) * p;
    (plus, minus)
}

/// Cash realised by unwinding `y` shares of P and `-y` shares of Q.
pub fn liquidation_value(p: f64, x: f64, y: f64, costs: &CostSpec) -> Result<f64> {
    ensure_finite("y", y)?;
    let (plus, minus) = effective_prices(p, x, costs)?;
    Ok(liquidation_from_prices(plus, minus, y))
}

#[inline]
pub(crate) fn liquidation_from_prices(plus: f64, minus: f64, y: f64) -> f64 {
    if y >= 0.0 {
        plus * y
    } else {
        minus * y
    }
}

/// `log H(T, p, x, y) = -gamma J(p, x, y)`.
pub fn terminal_log_h(p: f64, x: f64, y: f64, gamma: f64, costs: &CostSpec) -> Result<f64> {
    ensure_positive("gamma", gamma)?;
    Ok(-gamma * liquidation_value(p, x, y, costs)?)
}

/// `H(T, p, x, y) = exp(-gamma J)`. May overflow for extreme inputs; the
/// solver only ever works with [`terminal_log_h`].
pub fn terminal_h(p: f64, x: f64, y: f64, gamma: f64, costs: &CostSpec) -> Result<f64> {
    terminal_log_h(p, x, y, gamma, costs).map(f64::exp)
}

/// Residuals of the three operators of the reduced variational inequality,
/// each divided by `H` at the node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjbResiduals {
    /// `L_o H / H` (continuation / no-transaction operator).
    pub r_o: f64,
    /// `L_b H / H = H_y / H + gamma e^{r(T-t)} A_-`.
    pub r_b: f64,
    /// `L_s H / H = H_y / H + gamma e^{r(T-t)} A_+`.
    pub r_s: f64,
}

impl HjbResiduals {
    /// `min{L_b H, -L_s H, L_o H} / H`, zero for an exact solution.
    pub fn variational(&self) -> f64 {
        self.r_b.min(-self.r_s).min(self.r_o)
    }
}

/// Three consecutive `log H` slices (`t - dt`, `t`, `t + dt`) on a lattice.
#[derive(Debug, Clone, Copy)]
pub struct ResidualStencil<'a> {
    pub earlier: &'a [f64],
    pub current: &'a [f64],
    pub later: &'a [f64],
    pub t: f64,
    pub dt: f64,
}

/// Central-difference evaluation of the continuous operators at an interior
/// lattice node `(iz, iw, iy)`. Boundary nodes are rejected.
pub fn hjb_residuals(
    stencil: &ResidualStencil<'_>,
    lattice: &Lattice,
    node: (usize, usize, usize),
    params: &ModelParams,
    costs: &CostSpec,
    gamma: f64,
) -> Result<HjbResiduals> {
    let (iz, iw, iy) = node;
    let (nz, nw, ny) = lattice.shape();
    let len = nz * nw * ny;
    for (name, s) in [
        ("earlier", stencil.earlier),
        ("current", stencil.current),
        ("later", stencil.later),
    ] {
        if s.len() != len {
            return Err(Error::invalid(name, format!("slice has {} values, lattice needs {len}", s.len())));
        }
    }
    if iz == 0 || iw == 0 || iy == 0 || iz + 1 >= nz || iw + 1 >= nw || iy + 1 >= ny {
        return Err(Error::invalid(
            "node",
            format!("({iz}, {iw}, {iy}) is not strictly interior to a {nz}x{nw}x{ny} lattice"),
        ));
    }
    ensure_positive("dt", stencil.dt)?;

    let idx = |a: usize, b: usize, c: usize| lattice.flat_index(a, b, c);
    let base = stencil.current[idx(iz, iw, iy)];
    // Values relative to the centre node keep everything O(1).
    let u = |s: &[f64], a: usize, b: usize, c: usize| (s[idx(a, b, c)] - base).exp();
    let cur = stencil.current;

    let hz = lattice.z_step();
    let hw = lattice.w_step();
    let xi = lattice.spec().xi;

    let u_t = (u(stencil.later, iz, iw, iy) - u(stencil.earlier, iz, iw, iy)) / (2.0 * stencil.dt);
    let u_z = (u(cur, iz + 1, iw, iy) - u(cur, iz - 1, iw, iy)) / (2.0 * hz);
    let u_zz = (u(cur, iz + 1, iw, iy) - 2.0 + u(cur, iz - 1, iw, iy)) / (hz * hz);
    let u_w = (u(cur, iz, iw + 1, iy) - u(cur, iz, iw - 1, iy)) / (2.0 * hw);
    let u_ww = (u(cur, iz, iw + 1, iy) - 2.0 + u(cur, iz, iw - 1, iy)) / (hw * hw);
    let u_zw = (u(cur, iz + 1, iw + 1, iy) - u(cur, iz + 1, iw - 1, iy) - u(cur, iz - 1, iw + 1, iy)
        + u(cur, iz - 1, iw - 1, iy))
        / (4.0 * hz * hw);
    let u_y = (u(cur, iz, iw, iy + 1) - u(cur, iz, iw, iy - 1)) / (2.0 * xi);

    // p = exp(c + a z), x = theta + s w
    let a = lattice.price_vol_scale();
    let s = lattice.spread_scale();
    let p = lattice.p_values()[iz];
    let x = lattice.x_values()[iw];

    let u_p = u_z / (a * p);
    let u_pp = (u_zz - a * u_z) / (a * a * p * p);
    let u_x = u_w / s;
    let u_xx = u_ww / (s * s);
    let u_px = u_zw / (a * p * s);

    let ModelParams {
        mu,
        sigma,
        kappa,
        theta,
        nu,
        rho,
        ..
    } = *params;
    let r_o = u_t
        + kappa * (theta - x) * u_x
        + mu * p * u_p
        + 0.5 * nu * nu * u_xx
        + rho * nu * sigma * p * u_px
        + 0.5 * sigma * sigma * p * p * u_pp;

    let (plus, minus) = effective_prices_unchecked(p, x, costs);
    let growth = params.growth_to_horizon(stencil.t);
    Ok(HjbResiduals {
        r_o,
        r_b: u_y + gamma * growth * minus,
        r_s: u_y + gamma * growth * plus,
    })
}
