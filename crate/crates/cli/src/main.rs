use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;

use pairtrade_core::backtest::{run_backtest, write_backtest_csv, BacktestOutcome, PairConfig};
use pairtrade_core::calibration::{
    calibrate, calibration_csv_record, read_price_file, CalibrationOptions, PriceHistory, CALIBRATION_CSV_HEADER,
    TRADING_DAYS_PER_YEAR,
};
use pairtrade_core::path_sim::Scheme;
use pairtrade_core::scenario::{
    canonical_hash, comparison_probes, emit_boundary_figures_data, load_scenarios, quantile_probes, run_scenario, simulate_scenario,
    solve_scenario, write_summary_csv, OutputDir, Probe, ScenarioConfig,
};
use pairtrade_core::Error;

const EXIT_OTHER: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_SCREENED: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "pairtrade", version, about = "Optimal pairs trading boundaries, simulation and backtests")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Output directory.
    #[arg(long, global = true, env = "PAIRTRADE_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Override the simulation seed of every selected scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the path simulation scheme.
    #[arg(long, global = true, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Scenario file (a base scenario plus overrides).
    #[arg(long)]
    config: PathBuf,
    /// Scenario names to use; all of them when omitted (first one for
    /// single-scenario commands).
    #[arg(long = "scenario")]
    scenarios: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the boundaries of a scenario and write the full boundary field.
    Solve(ScenarioArgs),
    /// Simulate price/spread paths of a scenario.
    Simulate(ScenarioArgs),
    /// Solve, simulate and evaluate both strategies for each scenario.
    RunScenario(ScenarioArgs),
    /// Boundary values at probe points.
    Probe {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// CSV with columns `probe_id,t,p,x`; the figure presets when omitted.
        #[arg(long)]
        probes: Option<PathBuf>,
    },
    /// Fit model parameters to a pair of price files and run the unit-root
    /// screen.
    Calibrate {
        #[arg(long)]
        p_file: PathBuf,
        #[arg(long)]
        q_file: PathBuf,
        #[arg(long, default_value = "pair")]
        name: String,
        /// JSON file with calibration options (`adf_lag`, `min_obs`, `r`).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Calibrate, screen, solve and replay pairs over their test windows.
    Backtest {
        /// JSON file with one pair config or a list of them.
        #[arg(long)]
        config: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return if err.chain().any(|c| c.downcast_ref::<serde_json::Error>().is_some()) {
            EXIT_VALIDATION
        } else {
            EXIT_OTHER
        };
    };
    match e.root() {
        Error::Validation { .. } | Error::Json(_) | Error::Csv(_) => EXIT_VALIDATION,
        Error::Screened(_) | Error::Calibration(_) => EXIT_SCREENED,
        Error::Numerical(_) | Error::SizeGuard(_) => EXIT_NUMERICAL,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Solve(a) => cmd_solve(g, a),
        Command::Simulate(a) => cmd_simulate(g, a),
        Command::RunScenario(a) => cmd_run_scenario(g, a),
        Command::Probe { scenario, probes } => cmd_probe(g, scenario, probes.as_deref()),
        Command::Calibrate {
            p_file,
            q_file,
            name,
            config,
        } => cmd_calibrate(g, p_file, q_file, name, config.as_deref()),
        Command::Backtest { config } => cmd_backtest(g, config),
    }
}

fn select(g: &GlobalArgs, a: &ScenarioArgs) -> anyhow::Result<Vec<ScenarioConfig>> {
    let all = load_scenarios(&a.config)?;
    let mut picked = if a.scenarios.is_empty() {
        all
    } else {
        a.scenarios
            .iter()
            .map(|name| {
                all.iter()
                    .find(|c| &c.name == name)
                    .cloned()
                    .ok_or_else(|| Error::Validation {
                        field: "scenario".into(),
                        reason: format!("no scenario named `{name}` in {}", a.config.display()),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    for c in &mut picked {
        if let Some(seed) = g.seed {
            c.simulation.seed = seed;
        }
        if let Some(scheme) = g.scheme {
            c.simulation.scheme = scheme;
        }
    }
    Ok(picked)
}

fn select_one(g: &GlobalArgs, a: &ScenarioArgs) -> anyhow::Result<ScenarioConfig> {
    let picked = select(g, a)?;
    if a.scenarios.len() > 1 {
        bail!(Error::Validation {
            field: "scenario".into(),
            reason: "this command takes a single scenario".into(),
        });
    }
    picked.into_iter().next().ok_or_else(|| anyhow!("scenario file is empty"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "none".into())
}

fn cmd_solve(g: &GlobalArgs, a: &ScenarioArgs) -> anyhow::Result<u8> {
    let cfg = select_one(g, a)?;
    let sol = solve_scenario(&cfg)?;
    let mut out = OutputDir::create(&g.out_dir.join(&cfg.name))?;
    out.write("boundary_field.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["slice", "t", "p", "x", "Y_b", "Y_s"])?;
        let lat = &sol.lattice;
        let (nz, nw) = sol.boundaries.shape();
        for i in 0..sol.boundaries.n_slices() {
            let t = lat.time_points()[i].to_string();
            for iz in 0..nz {
                for iw in 0..nw {
                    let (b, s) = sol.boundaries.get(i, iz, iw);
                    c.write_record([
                        i.to_string(),
                        t.clone(),
                        lat.p_values()[iz].to_string(),
                        lat.x_values()[iw].to_string(),
                        opt(b),
                        opt(s),
                    ])?;
                }
            }
        }
        c.flush()?;
        Ok(())
    })?;
    let extra = serde_json::json!({ "lattice": sol.lattice.summary(), "solve_stats": sol.stats });
    out.finish("solve", cfg.config_hash()?, vec![], extra)?;
    log::info!("{}: boundaries written to {}", cfg.name, out_path(g, &cfg.name).display());
    Ok(0)
}

fn out_path(g: &GlobalArgs, name: &str) -> PathBuf {
    g.out_dir.join(name)
}

fn cmd_simulate(g: &GlobalArgs, a: &ScenarioArgs) -> anyhow::Result<u8> {
    let cfg = select_one(g, a)?;
    let paths = simulate_scenario(&cfg)?;
    let mut out = OutputDir::create(&out_path(g, &cfg.name))?;
    out.write("paths.csv", |w| paths.write_csv(w))?;
    out.finish("simulate", cfg.config_hash()?, vec![cfg.simulation.seed], serde_json::Value::Null)?;
    log::info!("{}: {} paths written", cfg.name, paths.n_paths);
    Ok(0)
}

fn cmd_run_scenario(g: &GlobalArgs, a: &ScenarioArgs) -> anyhow::Result<u8> {
    let configs = select(g, a)?;
    let reports = configs
        .par_iter()
        .map(|cfg| {
            log::info!("running {}", cfg.name);
            run_scenario(cfg, &g.out_dir)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (cfg, rep) in configs.iter().zip(reports) {
        for (label, m) in [("optimal", rep.optimal), ("benchmark", rep.benchmark)] {
            if let Some(m) = m {
                log::info!(
                    "{} {label}: N {:.3} ({:.3})  PL {:.4} ({:.4})  PS {:.4} ({:.4})",
                    cfg.name,
                    m.n.mean,
                    m.n.se,
                    m.pl.mean,
                    m.pl.se,
                    m.ps.mean,
                    m.ps.se
                );
                rows.push((cfg.name.clone(), label, m));
            }
        }
    }
    fs::create_dir_all(&g.out_dir)?;
    let file = fs::File::create(g.out_dir.join("summary.csv"))?;
    let borrowed: Vec<_> = rows.iter().map(|(n, l, m)| (n.as_str(), *l, *m)).collect();
    write_summary_csv(file, &borrowed)?;
    Ok(0)
}

#[derive(Deserialize)]
struct ProbeRow {
    probe_id: String,
    t: f64,
    p: f64,
    x: f64,
}

fn cmd_probe(g: &GlobalArgs, a: &ScenarioArgs, probe_file: Option<&Path>) -> anyhow::Result<u8> {
    let cfg = select_one(g, a)?;
    let probes: Vec<Probe> = match probe_file {
        Some(path) => {
            let mut rdr = csv::Reader::from_path(path).map_err(Error::from)?;
            rdr.deserialize::<ProbeRow>()
                .map(|r| {
                    r.map(|r| Probe {
                        id: r.probe_id,
                        t: r.t,
                        p: r.p,
                        x: r.x,
                    })
                    .map_err(Error::from)
                })
                .collect::<Result<_, _>>()?
        }
        None => quantile_probes().into_iter().chain(comparison_probes()).collect(),
    };
    let sol = solve_scenario(&cfg)?;
    let mut out = OutputDir::create(&out_path(g, &cfg.name))?;
    out.write("probes.csv", |w| emit_boundary_figures_data(&sol, &probes, w).map(|_| ()))?;
    out.finish("probe", cfg.config_hash()?, vec![], serde_json::Value::Null)?;
    Ok(0)
}

fn cmd_calibrate(
    g: &GlobalArgs,
    p_file: &Path,
    q_file: &Path,
    name: &str,
    config: Option<&Path>,
) -> anyhow::Result<u8> {
    let options: CalibrationOptions = match config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?).map_err(Error::from)?,
        None => CalibrationOptions::default(),
    };
    let p = read_price_file(p_file)?;
    let q = read_price_file(q_file)?;
    let history = PriceHistory::from_series(&p, &q, 1.0 / TRADING_DAYS_PER_YEAR, options.min_obs)?;
    let report = calibrate(&history, &options)?;
    let mut out = OutputDir::create(&out_path(g, name))?;
    out.write("calibration.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        Ok(w.write_all(b"\n")?)
    })?;
    out.write("calibration.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(CALIBRATION_CSV_HEADER)?;
        c.write_record(calibration_csv_record(name, &report))?;
        c.flush()?;
        Ok(())
    })?;
    out.finish("calibrate", canonical_hash(&options)?, vec![], serde_json::Value::Null)?;
    if report.is_tradable() {
        log::info!("{name}: ADF {:.3} < {:.3}, tradable", report.adf.statistic, report.adf.critical_value_5pct);
        Ok(0)
    } else {
        log::warn!(
            "{name}: not tradable (ADF {:.3}, 5% critical {:.3}{})",
            report.adf.statistic,
            report.adf.critical_value_5pct,
            report.fit_error.as_deref().map(|e| format!("; {e}")).unwrap_or_default()
        );
        Ok(EXIT_SCREENED)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PairConfigs {
    One(PairConfig),
    Many(Vec<PairConfig>),
}

fn cmd_backtest(g: &GlobalArgs, config: &Path) -> anyhow::Result<u8> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let pairs = match serde_json::from_str::<PairConfigs>(&text) {
        Ok(PairConfigs::One(p)) => vec![p],
        Ok(PairConfigs::Many(v)) => v,
        Err(_) => {
            // Re-parse as a single config for a field-level message.
            let err = serde_json::from_str::<PairConfig>(&text).err().map(Error::from);
            return Err(err.unwrap_or_else(|| Error::Validation {
                field: "config".into(),
                reason: "expected a pair config or a list of them".into(),
            })
            .into());
        }
    };
    let base = config.parent().unwrap_or(Path::new("."));
    let mut reports = Vec::new();
    for pair in &pairs {
        let rep = run_backtest(pair, base).with_context(|| format!("pair `{}`", pair.name))?;
        match &rep.outcome {
            BacktestOutcome::Traded { optimal, benchmark, .. } => log::info!(
                "{}: optimal N {} PL {:.4}; benchmark N {} PL {:.4}",
                pair.name,
                optimal.n_trades,
                optimal.pl,
                benchmark.n_trades,
                benchmark.pl
            ),
            BacktestOutcome::Skipped { reason } => log::warn!("{}: skipped ({reason})", pair.name),
        }
        reports.push(rep);
    }
    let mut out = OutputDir::create(&g.out_dir)?;
    out.write("backtest.csv", |w| write_backtest_csv(w, &reports))?;
    for rep in &reports {
        out.write(&format!("{}_calibration.json", rep.pair), |w| {
            serde_json::to_writer_pretty(&mut *w, &rep.calibration)?;
            Ok(w.write_all(b"\n")?)
        })?;
    }
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
    out.finish("backtest", canonical_hash(&raw)?, vec![], serde_json::Value::Null)?;
    let skipped = reports.iter().any(|r| matches!(r.outcome, BacktestOutcome::Skipped { .. }));
    Ok(if skipped { EXIT_SCREENED } else { 0 })
}
