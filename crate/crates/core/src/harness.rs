//! Batch experiments: every (circuit, cardinality, strategy) cell runs its
//! fault scenarios against the simulation oracle and reports mean cost,
//! mean time and solved counts.
//!
//! Configuration is a TOML document:
//!
//! ```toml
//! name = "heuristics"
//! circuits = ["gen:32,25,5", "bundled:c17", "netlists/mine.bench"]
//! generated = 2              # circuits drawn per generator spec
//! seed = 1
//! cardinalities = [1, 2]
//! scenarios = 50             # per circuit and cardinality
//! exhaustive = false         # one single-fault scenario per gate instead
//! heuristics = ["random", "ew", "fp"]
//! modes = ["flat", "hierarchical", "cloned"]
//! pruning = [false, true]    # bound = the scenario's true cardinality
//! time_limit_seconds = 60    # per cell
//! compile_seconds = 60
//! node_budget = 4000000
//! max_cone_inputs = 8        # optional cone destruction threshold
//! healthy_prior = 0.9
//! jobs = 1                   # worker threads
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundled;
use crate::circuit::{parse_bench_named, Circuit, FaultScenario};
use crate::diagnose::{
    diagnose, DiagnoseError, Heuristic, Mode, ModelOptions, Problem, RunOptions, SimulationOracle, Status,
};
use crate::encode::ModelParams;
use crate::gen::{exhaustive_single_faults, generate_circuit, generate_scenarios, GenSpec, RNG_ALGORITHM};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// How the system is modeled: flat, hierarchical, or hierarchical on the
/// cloned circuit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Flat,
    Hierarchical,
    Cloned,
}

impl Strategy {
    fn name(self) -> &'static str {
        match self {
            Strategy::Flat => "flat",
            Strategy::Hierarchical => "hierarchical",
            Strategy::Cloned => "cloned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub circuits: Vec<String>,
    #[serde(default = "one")]
    pub generated: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cardinalities")]
    pub cardinalities: Vec<usize>,
    #[serde(default)]
    pub scenarios: usize,
    #[serde(default)]
    pub exhaustive: bool,
    #[serde(default = "default_heuristics")]
    pub heuristics: Vec<String>,
    #[serde(default = "default_modes")]
    pub modes: Vec<Strategy>,
    #[serde(default = "default_pruning")]
    pub pruning: Vec<bool>,
    #[serde(default = "default_seconds")]
    pub time_limit_seconds: f64,
    #[serde(default = "default_seconds")]
    pub compile_seconds: f64,
    #[serde(default = "default_budget")]
    pub node_budget: usize,
    #[serde(default)]
    pub max_cone_inputs: Option<usize>,
    #[serde(default = "default_prior")]
    pub healthy_prior: f64,
    #[serde(default = "one")]
    pub jobs: usize,
}

fn default_name() -> String {
    "bench".into()
}
fn one() -> usize {
    1
}
fn default_cardinalities() -> Vec<usize> {
    vec![1]
}
fn default_heuristics() -> Vec<String> {
    vec!["fp".into()]
}
fn default_modes() -> Vec<Strategy> {
    vec![Strategy::Flat]
}
fn default_pruning() -> Vec<bool> {
    vec![false]
}
fn default_seconds() -> f64 {
    60.0
}
fn default_budget() -> usize {
    4_000_000
}
fn default_prior() -> f64 {
    0.9
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<BenchConfig, HarnessError> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<BenchConfig, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.circuits.is_empty() {
            return Err(config_err("no circuits"));
        }
        if self.heuristics.is_empty() || self.modes.is_empty() || self.pruning.is_empty() {
            return Err(config_err("heuristics, modes and pruning must not be empty"));
        }
        for h in &self.heuristics {
            h.parse::<Heuristic>().map_err(config_err)?;
        }
        if self.cardinalities.contains(&0) {
            return Err(config_err("cardinalities must be positive"));
        }
        if self.exhaustive && self.cardinalities != [1] {
            return Err(config_err("exhaustive scenarios require cardinalities = [1]"));
        }
        if !(self.time_limit_seconds > 0.0 && self.compile_seconds > 0.0) {
            return Err(config_err("time budgets must be positive"));
        }
        if self.jobs == 0 {
            return Err(config_err("jobs must be at least 1"));
        }
        ModelParams {
            healthy_prior: self.healthy_prior,
            ..ModelParams::default()
        }
        .validate()
        .map_err(|e| config_err(e.to_string()))?;
        for c in &self.circuits {
            if let Some(spec) = c.strip_prefix("gen:") {
                parse_spec(spec, 0)?;
            }
        }
        Ok(())
    }
}

fn parse_spec(text: &str, seed: u64) -> Result<GenSpec, HarnessError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || config_err(format!("generator spec `{text}` is not N,P,I"));
    let [n, p, i] = parts[..] else { return Err(bad()) };
    let spec = GenSpec::new(
        n.parse().map_err(|_| bad())?,
        p.parse().map_err(|_| bad())?,
        i.parse().map_err(|_| bad())?,
        seed,
    );
    spec.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(spec)
}

/// Resolves circuit entries: `gen:N,P,I` (drawing `generated` circuits with
/// consecutive seeds), `bundled:NAME`, or a `.bench` path relative to `base`.
pub fn load_circuits(cfg: &BenchConfig, base: &Path) -> Result<Vec<Circuit>, HarnessError> {
    let mut out = Vec::new();
    for entry in &cfg.circuits {
        if let Some(spec) = entry.strip_prefix("gen:") {
            for k in 0..cfg.generated as u64 {
                let s = parse_spec(spec, cfg.seed.wrapping_add(k))?;
                let c = generate_circuit(&s).map_err(|e| config_err(e.to_string()))?;
                out.push(c.with_name(s.label()));
            }
        } else if let Some(name) = entry.strip_prefix("bundled:") {
            out.push(bundled::circuit(name).ok_or_else(|| config_err(format!("no bundled circuit `{name}`")))?);
        } else {
            let path = base.join(entry);
            let text = std::fs::read_to_string(&path).map_err(|source| HarnessError::Io {
                path: path.clone(),
                source,
            })?;
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or(entry);
            out.push(parse_bench_named(name, &text).map_err(|e| config_err(format!("{entry}: {e}")))?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    /// Position of the circuit in load order; keeps reports stable.
    pub index: usize,
    pub circuit: String,
    pub cardinality: usize,
    pub strategy: Strategy,
    pub heuristic: usize,
    pub pruning: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub key: CellKey,
    pub heuristic: String,
    pub scenarios: usize,
    /// Finished sessions whose diagnosis passed the soundness check.
    pub solved: usize,
    pub stuck: usize,
    /// Stopped by time, compile budgets or other errors.
    pub unsolved: usize,
    /// Finished sessions whose diagnosis failed the soundness check.
    pub unsound: usize,
    /// Over solved sessions only.
    pub mean_cost: Option<f64>,
    pub mean_seconds: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub name: String,
    pub time_limit_seconds: f64,
    pub rng: String,
    /// (circuit, cardinality, scenarios without an exposing input vector)
    pub skipped: Vec<(String, usize, usize)>,
    pub cells: Vec<Cell>,
}

impl BenchReport {
    pub fn unsound(&self) -> usize {
        self.cells.iter().map(|c| c.unsound).sum()
    }
}

struct Job<'a> {
    key: CellKey,
    heuristic: Heuristic,
    problem: Result<&'a Problem, String>,
    scenarios: &'a [FaultScenario],
}

fn run_cell(cfg: &BenchConfig, job: &Job<'_>) -> Cell {
    let mut cell = Cell {
        key: job.key.clone(),
        heuristic: job.heuristic.to_string(),
        scenarios: job.scenarios.len(),
        solved: 0,
        stuck: 0,
        unsolved: 0,
        unsound: 0,
        mean_cost: None,
        mean_seconds: None,
        error: None,
    };
    let problem = match job.problem {
        Ok(p) => p,
        Err(ref e) => {
            cell.unsolved = job.scenarios.len();
            cell.error = Some(e.clone());
            return cell;
        }
    };
    let c = problem.original();
    let started = Instant::now();
    let (mut cost, mut seconds) = (0usize, 0f64);
    for s in job.scenarios {
        let left = cfg.time_limit_seconds - started.elapsed().as_secs_f64();
        if left <= 0.0 {
            cell.unsolved += 1;
            cell.error.get_or_insert_with(|| DiagnoseError::TimeLimit.to_string());
            continue;
        }
        let run = RunOptions {
            heuristic: job.heuristic,
            bound: job.key.pruning.then_some(s.faulty.len() as u64),
            seed: cfg.seed,
            time_limit_seconds: Some(left),
        };
        let t0 = Instant::now();
        let outcome = SimulationOracle::new(c, &s.faulty, &s.inputs).and_then(|mut oracle| {
            let obs = oracle.observation(c);
            diagnose(problem, &run, &obs, &mut oracle)
        });
        let dt = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(r) if r.status == Status::Stuck => cell.stuck += 1,
            Ok(r) => match problem.verify(&r) {
                Ok(true) => {
                    cell.solved += 1;
                    cost += r.cost;
                    seconds += dt;
                }
                Ok(false) => cell.unsound += 1,
                Err(e) => {
                    cell.unsolved += 1;
                    cell.error.get_or_insert_with(|| e.to_string());
                }
            },
            Err(e) => {
                cell.unsolved += 1;
                cell.error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if cell.solved > 0 {
        cell.mean_cost = Some(cost as f64 / cell.solved as f64);
        cell.mean_seconds = Some(seconds / cell.solved as f64);
    }
    cell
}

/// Runs the configured experiment on already loaded circuits.
pub fn bench_run(cfg: &BenchConfig, circuits: &[Circuit]) -> Result<BenchReport, HarnessError> {
    cfg.validate()?;
    let heuristics: Vec<Heuristic> = cfg.heuristics.iter().map(|h| h.parse().expect("validated")).collect();
    let params = ModelParams {
        healthy_prior: cfg.healthy_prior,
        ..ModelParams::default()
    };
    let mut skipped = Vec::new();
    // Scenarios per (circuit, cardinality), shared by all strategies.
    let mut scenario_sets: Vec<Vec<Vec<FaultScenario>>> = Vec::new();
    for c in circuits {
        let mut per = Vec::new();
        for (k, &card) in cfg.cardinalities.iter().enumerate() {
            let seed = cfg.seed ^ ((k as u64 + 1) << 32);
            let set = if cfg.exhaustive {
                exhaustive_single_faults(c, seed)
            } else {
                generate_scenarios(c, card, cfg.scenarios, seed)
            };
            skipped.push((c.name().to_string(), card, set.skipped));
            per.push(set.scenarios);
        }
        scenario_sets.push(per);
    }
    // Models are compiled once per (circuit, strategy) and shared by cells.
    let mut problems: Vec<Vec<Result<Problem, String>>> = Vec::new();
    for c in circuits {
        let mut per = Vec::new();
        for &strategy in &cfg.modes {
            let mut opts = ModelOptions::new(if strategy == Strategy::Flat {
                Mode::Flat
            } else {
                Mode::Hierarchical
            });
            opts.clone = strategy == Strategy::Cloned;
            opts.simplify = false;
            opts.params = params;
            opts.node_budget = cfg.node_budget;
            opts.compile_seconds = Some(cfg.compile_seconds);
            opts.max_cone_inputs = cfg.max_cone_inputs;
            let p = Problem::new(c.clone(), opts)
                .and_then(|p| p.precompile().map(|_| p))
                .map_err(|e| e.to_string());
            per.push(p);
        }
        problems.push(per);
    }
    let mut jobs = Vec::new();
    for (ci, c) in circuits.iter().enumerate() {
        for (k, &card) in cfg.cardinalities.iter().enumerate() {
            for (si, &strategy) in cfg.modes.iter().enumerate() {
                for (hi, &h) in heuristics.iter().enumerate() {
                    for &pruning in &cfg.pruning {
                        jobs.push(Job {
                            key: CellKey {
                                index: ci,
                                circuit: c.name().to_string(),
                                cardinality: card,
                                strategy,
                                heuristic: hi,
                                pruning,
                            },
                            heuristic: h,
                            problem: problems[ci][si].as_ref().map_err(Clone::clone),
                            scenarios: &scenario_sets[ci][k],
                        });
                    }
                }
            }
        }
    }
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::with_capacity(jobs.len()));
    std::thread::scope(|s| {
        for _ in 0..cfg.jobs.min(jobs.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let cell = run_cell(cfg, job);
                done.lock().expect("results").push(cell);
            });
        }
    });
    let mut cells = done.into_inner().expect("results");
    cells.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(BenchReport {
        name: cfg.name.clone(),
        time_limit_seconds: cfg.time_limit_seconds,
        rng: RNG_ALGORITHM.into(),
        skipped,
        cells,
    })
}

const COLUMNS: [&str; 12] = [
    "circuit",
    "cardinality",
    "mode",
    "heuristic",
    "pruning",
    "scenarios",
    "solved",
    "stuck",
    "unsolved",
    "unsound",
    "mean_cost",
    "mean_seconds",
];

fn row(c: &Cell, with_time: bool) -> Vec<String> {
    let opt = |x: Option<f64>, digits: usize| x.map_or("-".to_string(), |v| format!("{v:.digits$}"));
    let mut r = vec![
        c.key.circuit.clone(),
        c.key.cardinality.to_string(),
        c.key.strategy.name().to_string(),
        c.heuristic.clone(),
        if c.key.pruning { "on" } else { "off" }.to_string(),
        c.scenarios.to_string(),
        c.solved.to_string(),
        c.stuck.to_string(),
        c.unsolved.to_string(),
        c.unsound.to_string(),
        opt(c.mean_cost, 2),
    ];
    if with_time {
        r.push(opt(c.mean_seconds, 3));
    }
    r
}

fn columns(with_time: bool) -> &'static [&'static str] {
    if with_time {
        &COLUMNS
    } else {
        &COLUMNS[..11]
    }
}

/// CSV report. Wall-clock times vary between runs; leave them out for
/// byte-identical output.
pub fn render_csv(report: &BenchReport, with_time: bool) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(columns(with_time)).expect("in-memory write");
    for c in &report.cells {
        w.write_record(row(c, with_time)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 cells")
}

/// Aligned text report with the budget and skip notes in a header.
pub fn render_text(report: &BenchReport, with_time: bool) -> String {
    let head = columns(with_time);
    let rows: Vec<Vec<String>> = report.cells.iter().map(|c| row(c, with_time)).collect();
    let width: Vec<usize> = (0..head.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([head[i].len()]).max().unwrap())
        .collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# {}: time limit {} s per cell, rng {}",
        report.name, report.time_limit_seconds, report.rng
    );
    for (c, k, n) in &report.skipped {
        if *n > 0 {
            let _ = writeln!(out, "# {c} cardinality {k}: {n} scenarios skipped (no exposing input)");
        }
    }
    let fmt = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (s, w))| if i < 5 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let _ = writeln!(out, "{}", fmt(head.to_vec()));
    for r in &rows {
        let _ = writeln!(out, "{}", fmt(r.iter().map(String::as_str).collect()));
    }
    out
}
