//! Executing the boundary policy and the threshold benchmark along paths.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::grid::Lattice;
use crate::market::{effective_prices, liquidation_value, CostSpec, MarketState, ModelParams};
use crate::path_sim::PathView;
use crate::solver::BoundaryField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    BuyP,
    SellP,
}

impl Side {
    pub fn as_str(&self) -> &'static str {
        match self {
            Side::BuyP => "buy-P",
            Side::SellP => "sell-P",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub t: f64,
    pub side: Side,
    pub shares: f64,
    pub price_p: f64,
    pub spread: f64,
    /// Signed change of the bond account.
    pub cash_flow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyResult {
    pub trades: Vec<TradeRecord>,
    pub n_trades: usize,
    pub pl: f64,
    pub ps: f64,
    /// Position after the decision at each path step `0..=n_steps`; the last
    /// entry is the position held into liquidation.
    pub y_series: Vec<f64>,
    pub g_terminal: f64,
    pub liquidation: f64,
    pub max_abs_y: f64,
}

fn trade_at(mut state: MarketState, action: f64, costs: &CostSpec) -> Result<(MarketState, Option<TradeRecord>)> {
    ensure_finite("action", action)?;
    if action == 0.0 {
        return Ok((state, None));
    }
    let (plus, minus) = effective_prices(state.p, state.x, costs)?;
    let (side, cash_flow) = if action > 0.0 {
        (Side::BuyP, -minus * action)
    } else {
        (Side::SellP, -plus * action)
    };
    state.g += cash_flow;
    state.y += action;
    let rec = TradeRecord {
        t: state.t,
        side,
        shares: action.abs(),
        price_p: state.p,
        spread: state.x,
        cash_flow,
    };
    Ok((state, Some(rec)))
}

/// Accrue `g` at rate `r` over `delta_t`, then trade `action` shares of P
/// (paired with `-action` shares of Q) at the state's prices.
pub fn accrue_and_trade(
    state: MarketState,
    action: f64,
    costs: &CostSpec,
    r: f64,
    delta_t: f64,
) -> Result<MarketState> {
    let mut s = state;
    s.g *= (r * delta_t).exp();
    Ok(trade_at(s, action, costs)?.0)
}

/// Move `y` to the nearest boundary when it lies outside `[Y_b, Y_s]`.
pub fn optimal_action(y: f64, bounds: (Option<f64>, Option<f64>)) -> f64 {
    match bounds {
        (Some(yb), _) if y < yb => yb - y,
        (_, Some(ys)) if y > ys => ys - y,
        _ => 0.0,
    }
}

/// Boundary lookup on a solved lattice with nearest-node snapping.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryPolicy<'a> {
    pub lattice: &'a Lattice,
    pub boundaries: &'a BoundaryField,
}

impl<'a> BoundaryPolicy<'a> {
    pub fn new(lattice: &'a Lattice, boundaries: &'a BoundaryField) -> Self {
        BoundaryPolicy { lattice, boundaries }
    }

    /// Time slice used for a decision at `t`: the nearest slice, or the last
    /// one for times between it and the horizon. Times more than one lattice
    /// step away from every slice are rejected.
    pub fn slice_for(&self, t: f64) -> Result<usize> {
        let dt = self.lattice.dt();
        let last = self.boundaries.n_slices() - 1;
        let i = self.lattice.nearest_time_index(t).min(last);
        let t_i = self.lattice.time_points()[i];
        if !t.is_finite() || (t - t_i).abs() > dt + 1e-9 {
            return Err(Error::invalid(
                "path",
                format!("decision time {t} does not snap to a boundary slice (lattice dt {dt}, {} slices)", last + 1),
            ));
        }
        Ok(i)
    }

    pub fn bounds(&self, t: f64, p: f64, x: f64) -> Result<(Option<f64>, Option<f64>)> {
        let i = self.slice_for(t)?;
        let (iz, iw) = self.lattice.nearest_node(p, x);
        Ok(self.boundaries.get(i, iz, iw))
    }

    fn snap_y(&self, y: f64) -> f64 {
        let xi = self.lattice.spec().xi;
        (y / xi).round() * xi
    }
}

fn finish(
    state: MarketState,
    trades: Vec<TradeRecord>,
    y_series: Vec<f64>,
    costs: &CostSpec,
) -> Result<StrategyResult> {
    let liquidation = liquidation_value(state.p, state.x, state.y, costs)?;
    let pl = state.g + liquidation;
    let max_abs_y = y_series.iter().fold(0.0_f64, |m, y| m.max(y.abs()));
    let ps = if max_abs_y > 0.0 { pl / max_abs_y } else { 0.0 };
    Ok(StrategyResult {
        n_trades: trades.len(),
        trades,
        pl,
        ps,
        y_series,
        g_terminal: state.g,
        liquidation,
        max_abs_y,
    })
}

/// Drive a path with decisions at steps `1..n_steps` and liquidation at the
/// last step. `decide(step, state)` returns the trade size.
fn run_path<F>(path: PathView<'_>, costs: &CostSpec, params: &ModelParams, mut decide: F) -> Result<StrategyResult>
where
    F: FnMut(usize, &MarketState) -> Result<f64>,
{
    let n = path.n_steps();
    if n < 1 || path.x.len() != n + 1 {
        return Err(Error::invalid("path", "path needs at least one step and matching p/x lengths"));
    }
    let growth = (params.r * path.delta_t).exp();
    let mut state = MarketState::new(0.0, path.p[0], path.x[0], 0.0, 0.0)?;
    let mut trades = Vec::new();
    let mut y_series = vec![0.0];
    for k in 1..=n {
        state.t = path.time(k);
        state.p = path.p[k];
        state.x = path.x[k];
        state.g *= growth;
        if k < n {
            let action = decide(k, &state)?;
            let (s, rec) = trade_at(state, action, costs)?;
            state = s;
            trades.extend(rec);
        }
        y_series.push(state.y);
    }
    finish(state, trades, y_series, costs)
}

/// Follow the solved boundaries along `path`.
pub fn run_optimal_strategy(
    path: PathView<'_>,
    policy: &BoundaryPolicy<'_>,
    costs: &CostSpec,
    params: &ModelParams,
) -> Result<StrategyResult> {
    run_path(path, costs, params, |_, s| {
        let bounds = policy.bounds(s.t, s.p, s.x)?;
        let y = policy.snap_y(s.y);
        let action = optimal_action(y, bounds);
        if action == 0.0 {
            return Ok(0.0);
        }
        Ok(y + action - s.y)
    })
}

/// How the benchmark measures the spread's standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SdMode {
    /// `nu / sqrt(2 kappa)`.
    #[default]
    Stationary,
    /// Sample sd of the spread observed so far on the path (from step 0).
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSettings {
    pub sd_mode: SdMode,
    /// Open when `|x - theta|` exceeds this many sds.
    pub entry_sds: f64,
    /// Position opened on a high spread: `+1` is long P / short Q.
    pub high_spread_position: f64,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        BenchmarkSettings {
            sd_mode: SdMode::Stationary,
            entry_sds: 2.0,
            high_spread_position: 1.0,
        }
    }
}

/// One-share threshold strategy: open beyond `entry_sds` sds, close when the
/// deviation from `theta` changes sign (or touches zero).
pub fn run_benchmark_strategy(
    path: PathView<'_>,
    params: &ModelParams,
    costs: &CostSpec,
    settings: &BenchmarkSettings,
) -> Result<StrategyResult> {
    let theta = params.theta;
    let stationary = params.stationary_spread_sd();
    let mut open_sign = 0.0_f64;
    run_path(path, costs, params, |k, s| {
        let dev = s.x - theta;
        if open_sign != 0.0 {
            if dev * open_sign <= 0.0 {
                open_sign = 0.0;
                return Ok(-s.y);
            }
            return Ok(0.0);
        }
        let sd = match settings.sd_mode {
            SdMode::Stationary => stationary,
            SdMode::Sample => sample_sd(&path.x[..=k]),
        };
        if !(sd > 0.0) {
            return Ok(0.0);
        }
        if dev.abs() > settings.entry_sds * sd {
            open_sign = dev.signum();
            return Ok(open_sign * settings.high_spread_position);
        }
        Ok(0.0)
    })
}

fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// `-C`: each trade's cash flow carried to the horizon plus the terminal
/// liquidation value, computed from the trade log alone.
pub fn discounted_ledger(trades: &[TradeRecord], liquidation: f64, r: f64, horizon: f64) -> f64 {
    trades.iter().map(|t| t.cash_flow * (r * (horizon - t.t)).exp()).sum::<f64>() + liquidation
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Stat> {
        let n = values.len();
        if n == 0 {
            return Err(Error::invalid("results", "cannot summarize an empty list"));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Stat { mean, se })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub n: Stat,
    pub pl: Stat,
    pub ps: Stat,
}

pub fn aggregate_metrics(results: &[StrategyResult]) -> Result<MetricSummary> {
    let pick = |f: fn(&StrategyResult) -> f64| results.iter().map(f).collect::<Vec<_>>();
    Ok(MetricSummary {
        count: results.len(),
        n: Stat::of(&pick(|r| r.n_trades as f64))?,
        pl: Stat::of(&pick(|r| r.pl))?,
        ps: Stat::of(&pick(|r| r.ps))?,
    })
}

/// `path_id,strategy,t,side,shares,price,spread,cash_flow`.
pub fn write_trades_csv<'a, W, I>(out: W, rows: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (usize, &'a str, &'a StrategyResult)>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path_id", "strategy", "t", "side", "shares", "price", "spread", "cash_flow"])?;
    for (id, name, res) in rows {
        for t in &res.trades {
            w.write_record([
                id.to_string(),
                name.to_string(),
                t.t.to_string(),
                t.side.as_str().to_string(),
                t.shares.to_string(),
                t.price_p.to_string(),
                t.spread.to_string(),
                t.cash_flow.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `path_id,strategy,N,PL,PS,g_terminal,liquidation,max_abs_y`.
pub fn write_path_metrics_csv<'a, W, I>(out: W, rows: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (usize, &'a str, &'a StrategyResult)>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path_id", "strategy", "N", "PL", "PS", "g_terminal", "liquidation", "max_abs_y"])?;
    for (id, name, r) in rows {
        w.write_record([
            id.to_string(),
            name.to_string(),
            r.n_trades.to_string(),
            r.pl.to_string(),
            r.ps.to_string(),
            r.g_terminal.to_string(),
            r.liquidation.to_string(),
            r.max_abs_y.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const SUMMARY_HEADER: [&str; 7] = ["strategy", "N_mean", "N_se", "PL_mean", "PL_se", "PS_mean", "PS_se"];

pub fn summary_record(name: &str, m: &MetricSummary) -> [String; 7] {
    [
        name.to_string(),
        m.n.mean.to_string(),
        m.n.se.to_string(),
        m.pl.mean.to_string(),
        m.pl.se.to_string(),
        m.ps.mean.to_string(),
        m.ps.se.to_string(),
    ]
}
