//! Scenario files, the simulation study runner and its report files.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{ensure_positive, Error, Result};
use crate::grid::GridSpec;
use crate::market::{CostSpec, ModelParams};
use crate::path_sim::{simulate_paths, PathSet, Scheme};
use crate::solver::{solve, Solution, SolveOptions};
use crate::trading::{
    aggregate_metrics, run_benchmark_strategy, run_optimal_strategy, summary_record, write_path_metrics_csv,
    write_trades_csv, BenchmarkSettings, BoundaryPolicy, MetricSummary, StrategyResult, SUMMARY_HEADER,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Grid fields left out fall back to [`GridSpec::with_defaults`] for the
/// scenario's horizon and `n_time`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_time: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_half_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_half_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad_nodes: Option<usize>,
}

impl GridSettings {
    pub fn resolve(&self, horizon: f64, default_n_time: usize) -> GridSpec {
        let d = GridSpec::with_defaults(horizon, self.n_time.unwrap_or(default_n_time));
        GridSpec {
            n_time: d.n_time,
            z_half_width: self.z_half_width.unwrap_or(d.z_half_width),
            z_step: self.z_step.unwrap_or(d.z_step),
            w_half_width: self.w_half_width.unwrap_or(d.w_half_width),
            w_step: self.w_step.unwrap_or(d.w_step),
            xi: self.xi.unwrap_or(d.xi),
            y_max: self.y_max.unwrap_or(d.y_max),
            quad_nodes: self.quad_nodes.unwrap_or(d.quad_nodes),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSettings {
    pub n_paths: usize,
    /// Path steps over the horizon; decisions happen at steps `1..n_steps`.
    pub n_steps: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub p0: f64,
    /// Initial spread; `theta` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            n_paths: 1000,
            n_steps: 100,
            seed: 2024,
            scheme: Scheme::Exact,
            p0: 1.0,
            x0: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySettings {
    pub optimal: bool,
    pub benchmark: bool,
    pub benchmark_settings: BenchmarkSettings,
}

impl Default for StrategySettings {
    fn default() -> Self {
        StrategySettings {
            optimal: true,
            benchmark: true,
            benchmark_settings: BenchmarkSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub params: ModelParams,
    pub costs: CostSpec,
    pub gamma: f64,
    #[serde(default)]
    pub grid: GridSettings,
    #[serde(default)]
    pub simulation: SimulationSettings,
    #[serde(default)]
    pub strategies: StrategySettings,
}

impl ScenarioConfig {
    /// The baseline scenario with default grid and simulation settings.
    pub fn baseline() -> Self {
        ScenarioConfig {
            name: "S1".into(),
            params: ModelParams::baseline(),
            costs: CostSpec::uniform(0.0005),
            gamma: 5.0,
            grid: GridSettings::default(),
            simulation: SimulationSettings::default(),
            strategies: StrategySettings::default(),
        }
    }

    /// Solver grid; the time grid defaults to one slice per path step.
    pub fn grid_spec(&self) -> GridSpec {
        self.grid.resolve(self.params.horizon, self.simulation.n_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::invalid("name", "must not be empty"));
        }
        self.params.validate()?;
        self.costs.validate()?;
        ensure_positive("gamma", self.gamma)?;
        self.grid_spec().validate(&self.params)?;
        let sim = &self.simulation;
        if sim.n_paths == 0 || sim.n_steps < 2 {
            return Err(Error::invalid("simulation", "need n_paths >= 1 and n_steps >= 2"));
        }
        ensure_positive("simulation.p0", sim.p0)?;
        let b = &self.strategies.benchmark_settings;
        ensure_positive("benchmark_settings.entry_sds", b.entry_sds)?;
        Ok(())
    }

    pub fn x0(&self) -> f64 {
        self.simulation.x0.unwrap_or(self.params.theta)
    }

    pub fn config_hash(&self) -> Result<String> {
        canonical_hash(self)
    }
}

/// SHA-256 of the canonical JSON form (object keys sorted, no whitespace).
pub fn canonical_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(hex::encode(Sha256::digest(canonical_json(&v).as_bytes())))
}

fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<_> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// On-disk layout: a complete `base` scenario and a list of partial
/// `overrides`, each merged field by field over the base.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub base: Value,
    #[serde(default)]
    pub overrides: Vec<Value>,
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn parse_scenario(v: Value, label: &str) -> Result<ScenarioConfig> {
    let name = v.get("name").and_then(Value::as_str).unwrap_or(label).to_string();
    let wrap = |e: Error| Error::Scenario {
        name: name.clone(),
        source: Box::new(e),
    };
    let cfg: ScenarioConfig = serde_json::from_value(v).map_err(|e| wrap(Error::invalid("config", e.to_string())))?;
    cfg.validate().map_err(wrap)?;
    Ok(cfg)
}

/// Resolve a scenario file: the base first, then each override in order.
pub fn resolve_scenarios(file: &ScenarioFile) -> Result<Vec<ScenarioConfig>> {
    let mut out = vec![parse_scenario(file.base.clone(), "base")?];
    for (i, patch) in file.overrides.iter().enumerate() {
        if !patch.is_object() {
            return Err(Error::invalid(format!("overrides[{i}]"), "must be a JSON object"));
        }
        if patch.get("name").and_then(Value::as_str).is_none() {
            return Err(Error::invalid(format!("overrides[{i}].name"), "every override needs a name"));
        }
        let mut v = file.base.clone();
        merge(&mut v, patch);
        out.push(parse_scenario(v, &format!("overrides[{i}]"))?);
    }
    let mut seen = BTreeSet::new();
    for c in &out {
        if !seen.insert(c.name.as_str()) {
            return Err(Error::invalid("name", format!("duplicate scenario name `{}`", c.name)));
        }
    }
    Ok(out)
}

pub fn parse_scenarios(json: &str) -> Result<Vec<ScenarioConfig>> {
    let file: ScenarioFile = serde_json::from_str(json).map_err(|e| Error::invalid("scenario file", e.to_string()))?;
    resolve_scenarios(&file)
}

pub fn load_scenarios(path: &Path) -> Result<Vec<ScenarioConfig>> {
    let text = fs::read_to_string(path)?;
    parse_scenarios(&text).map_err(|e| match e {
        Error::Validation { field, reason } => Error::Validation {
            field,
            reason: format!("{reason} ({})", path.display()),
        },
        other => other,
    })
}

/// A boundary probe location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub id: String,
    pub t: f64,
    pub p: f64,
    pub x: f64,
}

pub const FIGURE_TIMES: [f64; 4] = [0.05, 0.35, 0.65, 0.95];
pub const QUANTILE_PRICES: [f64; 4] = [0.845, 1.095, 1.400, 2.108];
pub const QUANTILE_SPREADS: [f64; 4] = [0.023, 0.092, 0.157, 0.266];
pub const COMPARISON_POINTS: [(f64, f64); 4] = [(0.9, 0.09), (0.9, 0.12), (1.5, 0.09), (1.5, 0.12)];

/// Every price/spread quantile combination at each figure time.
pub fn quantile_probes() -> Vec<Probe> {
    let mut out = Vec::new();
    for t in FIGURE_TIMES {
        for (ip, p) in QUANTILE_PRICES.iter().enumerate() {
            for (ix, x) in QUANTILE_SPREADS.iter().enumerate() {
                out.push(Probe {
                    id: format!("q-p{}-x{}", ip + 1, ix + 1),
                    t,
                    p: *p,
                    x: *x,
                });
            }
        }
    }
    out
}

/// The four comparison points at each figure time.
pub fn comparison_probes() -> Vec<Probe> {
    let mut out = Vec::new();
    for t in FIGURE_TIMES {
        for (i, (p, x)) in COMPARISON_POINTS.iter().enumerate() {
            out.push(Probe {
                id: format!("point{}", i + 1),
                t,
                p: *p,
                x: *x,
            });
        }
    }
    out
}

/// Boundaries read at one probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReading {
    pub probe: Probe,
    pub slice: usize,
    pub node_p: f64,
    pub node_x: f64,
    pub buy: Option<f64>,
    pub sell: Option<f64>,
}

impl ProbeReading {
    pub fn width(&self) -> Option<f64> {
        Some(self.sell? - self.buy?)
    }
}

/// Snap a probe to its slice and interior node. Probes whose nearest node is
/// on the lattice edge, or whose time is outside the decision slices, fail.
pub fn read_probe(solution: &Solution, probe: &Probe) -> Result<ProbeReading> {
    let lat = &solution.lattice;
    let n = solution.boundaries.n_slices();
    let dt = lat.dt();
    let slice = lat.nearest_time_index(probe.t);
    if probe.t < -1e-12 || slice >= n || (probe.t - lat.time_points()[slice]).abs() > 0.5 * dt + 1e-12 {
        return Err(Error::invalid(
            "probe",
            format!("`{}`: t = {} is outside the decision slices [0, {})", probe.id, probe.t, lat.time_points()[n]),
        ));
    }
    let (iz, iw) = lat
        .locate_interior(probe.p, probe.x)
        .map_err(|e| Error::invalid("probe", format!("`{}`: {e}", probe.id)))?;
    let (buy, sell) = solution.boundaries.get(slice, iz, iw);
    Ok(ProbeReading {
        probe: probe.clone(),
        slice,
        node_p: lat.p_values()[iz],
        node_x: lat.x_values()[iw],
        buy,
        sell,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "none".into())
}

/// Long-format boundary table: `probe_id,t,p,x,Y_b,Y_s`. Missing boundaries
/// are written as `none`.
pub fn emit_boundary_figures_data<W: Write>(solution: &Solution, probes: &[Probe], out: W) -> Result<Vec<ProbeReading>> {
    let readings = probes.iter().map(|p| read_probe(solution, p)).collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["probe_id", "t", "p", "x", "Y_b", "Y_s"])?;
    for r in &readings {
        w.write_record([
            r.probe.id.clone(),
            r.probe.t.to_string(),
            r.probe.p.to_string(),
            r.probe.x.to_string(),
            opt(r.buy),
            opt(r.sell),
        ])?;
    }
    w.flush()?;
    Ok(readings)
}

pub fn solve_scenario(config: &ScenarioConfig) -> Result<Solution> {
    solve(
        &config.params,
        &config.costs,
        config.gamma,
        &config.grid_spec(),
        &SolveOptions {
            p0: config.simulation.p0,
            ..Default::default()
        },
    )
}

pub fn simulate_scenario(config: &ScenarioConfig) -> Result<PathSet> {
    let s = &config.simulation;
    simulate_paths(&config.params, s.n_paths, s.n_steps, s.p0, config.x0(), s.seed, s.scheme)
}

/// Per-path results of both strategies.
#[derive(Debug, Clone)]
pub struct StudyResults {
    pub optimal: Option<Vec<StrategyResult>>,
    pub benchmark: Option<Vec<StrategyResult>>,
}

impl StudyResults {
    pub fn optimal_summary(&self) -> Result<Option<MetricSummary>> {
        self.optimal.as_deref().map(aggregate_metrics).transpose()
    }
    pub fn benchmark_summary(&self) -> Result<Option<MetricSummary>> {
        self.benchmark.as_deref().map(aggregate_metrics).transpose()
    }
}

pub fn run_strategies(config: &ScenarioConfig, solution: Option<&Solution>, paths: &PathSet) -> Result<StudyResults> {
    let optimal = if config.strategies.optimal {
        let sol = solution.ok_or_else(|| Error::invalid("solution", "optimal strategy needs solved boundaries"))?;
        let policy = BoundaryPolicy::new(&sol.lattice, &sol.boundaries);
        let res: Result<Vec<_>> = (0..paths.n_paths)
            .into_par_iter()
            .map(|i| run_optimal_strategy(paths.path(i), &policy, &config.costs, &config.params))
            .collect();
        Some(res?)
    } else {
        None
    };
    let benchmark = if config.strategies.benchmark {
        let b = config.strategies.benchmark_settings;
        let res: Result<Vec<_>> = (0..paths.n_paths)
            .into_par_iter()
            .map(|i| run_benchmark_strategy(paths.path(i), &config.params, &config.costs, &b))
            .collect();
        Some(res?)
    } else {
        None
    };
    Ok(StudyResults { optimal, benchmark })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub files: Vec<OutputFile>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub extra: Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Collects output files in a directory and writes the manifest last.
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<String>,
    started_at: String,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started_at: now(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Create `name` and hand a buffered writer to `body`.
    pub fn write<T, F>(&mut self, name: &str, body: F) -> Result<T>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<T>,
    {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        let out = body(&mut w)?;
        w.flush()?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(out)
    }

    pub fn finish(self, command: &str, config_hash: String, seeds: Vec<u64>, extra: Value) -> Result<RunManifest> {
        let mut files = Vec::new();
        for name in &self.files {
            let data = fs::read(self.dir.join(name))?;
            files.push(OutputFile {
                name: name.clone(),
                bytes: data.len() as u64,
                sha256: hex::encode(Sha256::digest(&data)),
            });
        }
        let manifest = RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            config_hash,
            seeds,
            started_at: self.started_at,
            finished_at: now(),
            files,
            extra,
        };
        let mut w = BufWriter::new(File::create(self.dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(manifest)
    }
}

/// Summary of one scenario run.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub optimal: Option<MetricSummary>,
    pub benchmark: Option<MetricSummary>,
    pub probes: Vec<ProbeReading>,
    pub manifest: RunManifest,
}

pub const SUMMARY_FILE: &str = "summary.csv";

/// `scenario,strategy,N_mean,...` rows for every strategy that ran.
pub fn write_summary_csv<W: Write>(out: W, rows: &[(&str, &str, MetricSummary)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["scenario"];
    header.extend(SUMMARY_HEADER);
    w.write_record(&header)?;
    for (scenario, strategy, m) in rows {
        let mut rec = vec![scenario.to_string()];
        rec.extend(summary_record(strategy, m));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Solve, simulate, run both strategies and write the report files into
/// `out_dir/<name>/`.
pub fn run_scenario(config: &ScenarioConfig, out_dir: &Path) -> Result<ScenarioReport> {
    run_scenario_inner(config, out_dir).map_err(|e| match e {
        e @ Error::Scenario { .. } => e,
        e => Error::Scenario {
            name: config.name.clone(),
            source: Box::new(e),
        },
    })
}

fn run_scenario_inner(config: &ScenarioConfig, out_dir: &Path) -> Result<ScenarioReport> {
    config.validate()?;
    let mut out = OutputDir::create(&out_dir.join(&config.name))?;
    let solution = if config.strategies.optimal {
        Some(solve_scenario(config)?)
    } else {
        None
    };
    let mut probes = Vec::new();
    if let Some(sol) = &solution {
        let mut wanted = quantile_probes();
        wanted.extend(comparison_probes());
        let (usable, dropped): (Vec<Probe>, Vec<Probe>) = wanted.into_iter().partition(|p| read_probe(sol, p).is_ok());
        if !dropped.is_empty() {
            log::warn!("{}: {} preset probes fall outside the lattice interior", config.name, dropped.len());
        }
        probes = out.write("boundaries.csv", |w| emit_boundary_figures_data(sol, &usable, w))?;
    }
    let paths = simulate_scenario(config)?;
    let study = run_strategies(config, solution.as_ref(), &paths)?;
    let mut per_path: Vec<(usize, &str, &StrategyResult)> = Vec::new();
    for (label, set) in [("optimal", &study.optimal), ("benchmark", &study.benchmark)] {
        if let Some(rs) = set {
            per_path.extend(rs.iter().enumerate().map(|(i, r)| (i, label, r)));
        }
    }
    out.write("path_metrics.csv", |w| write_path_metrics_csv(w, per_path.iter().copied()))?;
    out.write("trades.csv", |w| write_trades_csv(w, per_path.iter().copied()))?;
    let optimal = study.optimal_summary()?;
    let benchmark = study.benchmark_summary()?;
    let mut rows = Vec::new();
    if let Some(m) = optimal {
        rows.push((config.name.as_str(), "optimal", m));
    }
    if let Some(m) = benchmark {
        rows.push((config.name.as_str(), "benchmark", m));
    }
    out.write(SUMMARY_FILE, |w| write_summary_csv(w, &rows))?;
    out.write("config.json", |w| {
        serde_json::to_writer_pretty(&mut *w, config)?;
        Ok(w.write_all(b"\n")?)
    })?;
    let extra = match &solution {
        Some(sol) => serde_json::json!({
            "lattice": sol.lattice.summary(),
            "solve_stats": sol.stats,
        }),
        None => Value::Null,
    };
    let manifest = out.finish("run-scenario", config.config_hash()?, vec![config.simulation.seed], extra)?;
    Ok(ScenarioReport {
        name: config.name.clone(),
        optimal,
        benchmark,
        probes,
        manifest,
    })
}
