//! `seqdiag`: abstraction reports, cloning, encoding, compilation,
//! diagnosis sessions, cost estimates, circuit generation and batch runs.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use seqdiag::abstraction::{render_report, AbstractionView};
use seqdiag::bundled;
use seqdiag::circuit::{parse_bench_named, render_bench, Circuit};
use seqdiag::cloning::minimize_abstraction;
use seqdiag::compile::io::{parse_dimacs, parse_weights, write_dimacs, write_nnf, write_weights};
use seqdiag::compile::{compile_with, CompileOptions, Evidence};
use seqdiag::costmodel::{
    default_thresholds, render_csv as estimate_csv, render_text as estimate_text, select_abstraction,
};
use seqdiag::diagnose::{
    diagnose, parse_observation, sig12, Answer, DiagnoseError, Heuristic, Mode, ModelOptions, Oracle, Problem,
    Proposal, ReplayOracle, Report, RunOptions, SimulationOracle, Snapshot,
};
use seqdiag::encode::{cone_priors, encode_abstraction, encode_flat, ModelParams};
use seqdiag::gen::{generate_circuit, GenSpec, RNG_ALGORITHM};
use seqdiag::harness::{bench_run, load_circuits, render_csv, render_text, BenchConfig};

type Result<T> = std::result::Result<T, String>;

#[derive(Parser)]
#[command(
    name = "seqdiag",
    version,
    about = "Sequential fault diagnosis of combinational circuits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the abstraction and the cone tree.
    Abstract {
        /// .bench path or `bundled:NAME`
        netlist: String,
        /// Destroy cones with more inputs than this.
        #[arg(long)]
        max_cone_inputs: Option<usize>,
    },
    /// Clone gates to shrink the abstraction; writes the netlist and a clone map.
    Clone {
        netlist: String,
        #[arg(long)]
        out: PathBuf,
        /// Clone map (`clone original` per line); defaults to OUT with a .map extension.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Write the weighted CNF encoding as DIMACS plus a weights file.
    Encode {
        netlist: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Flat)]
        mode: ModeArg,
        #[arg(long)]
        cnf: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        healthy_prior: f64,
    },
    /// Compile a DIMACS CNF (and optional weights) into smooth d-DNNF.
    Compile {
        cnf: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Write the graph in c2d .nnf format.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = CompileOptions::default().node_budget)]
        node_budget: usize,
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Run a diagnosis session.
    Diagnose(DiagnoseArgs),
    /// Cost estimates per cone-destruction threshold.
    Estimate {
        netlist: String,
        /// Clone before estimating.
        #[arg(long)]
        clone: bool,
        /// Comma-separated thresholds; defaults to every distinct cone fan-in, then 0.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<usize>,
        #[arg(long)]
        csv: bool,
    },
    /// Generate random circuits and a manifest.
    Gen {
        /// N,P,I: components, cone percentage, maximum fan-in.
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a batch experiment from a TOML configuration.
    Bench {
        config: PathBuf,
        #[arg(long)]
        csv: bool,
        /// Leave out wall-clock times so reruns are byte-identical.
        #[arg(long)]
        no_time: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the configured worker count.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Flat,
    Hierarchical,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Flat => Mode::Flat,
            ModeArg::Hierarchical => Mode::Hierarchical,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HeuristicArg {
    Fp,
    Ew,
    Random,
}

impl From<HeuristicArg> for Heuristic {
    fn from(h: HeuristicArg) -> Heuristic {
        match h {
            HeuristicArg::Fp => Heuristic::Fp,
            HeuristicArg::Ew => Heuristic::Ew,
            HeuristicArg::Random => Heuristic::Random,
        }
    }
}

#[derive(Args)]
struct DiagnoseArgs {
    netlist: String,
    /// `wire=bit` lines for every primary input and some outputs.
    #[arg(long, required_unless_present = "replay")]
    observation: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Flat)]
    mode: ModeArg,
    /// Clone before hierarchical diagnosis.
    #[arg(long)]
    clone: bool,
    #[arg(long, value_enum, default_value_t = HeuristicArg::Fp)]
    heuristic: HeuristicArg,
    /// Fault cardinality bound for pruning.
    #[arg(long)]
    k: Option<u64>,
    /// Answer measurements by simulating these faulty gates (comma-separated);
    /// without it values are read from standard input.
    #[arg(long, value_delimiter = ',')]
    faults: Option<Vec<String>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    time_limit: Option<f64>,
    /// Replay a JSON transcript and check that it reproduces exactly.
    #[arg(long, conflicts_with_all = ["observation", "faults"])]
    replay: Option<PathBuf>,
    /// Write the JSON transcript here.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_netlist(arg: &str) -> Result<Circuit> {
    if let Some(name) = arg.strip_prefix("bundled:") {
        return bundled::circuit(name).ok_or_else(|| {
            let known: Vec<&str> = bundled::names().collect();
            format!("no bundled circuit `{name}` (available: {})", known.join(", "))
        });
    }
    let path = Path::new(arg);
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or(arg);
    parse_bench_named(name, &read(path)?).map_err(|e| format!("{arg}: {e}"))
}

fn fail(e: impl ToString) -> String {
    e.to_string()
}

/// Asks for each proposed value on standard input.
struct Console;

impl Oracle for Console {
    fn answer(&mut self, p: &Proposal, s: &Snapshot) -> std::result::Result<Answer, DiagnoseError> {
        let mut err = io::stderr();
        let scope = s.scope.as_deref().map_or(String::new(), |c| format!(" in cone {c}"));
        let _ = writeln!(
            err,
            "measurement {}{scope}: proposed {} (entropy {})",
            s.cost + 1,
            p.measure,
            p.entropy
        );
        if let (Some(c), Some(q)) = (&p.component, p.component_posterior) {
            let _ = writeln!(err, "  most likely faulty component {c} ({q})");
        }
        loop {
            let _ = write!(err, "value of {} (0/1, or wire=bit): ", p.measure);
            let _ = err.flush();
            let mut line = String::new();
            if io::stdin()
                .lock()
                .read_line(&mut line)
                .map_err(|e| DiagnoseError::Oracle(e.to_string()))?
                == 0
            {
                return Err(DiagnoseError::Oracle("end of input".into()));
            }
            let line = line.trim();
            let (wire, bit) = line.split_once('=').unwrap_or((p.measure.as_str(), line));
            match bit.trim() {
                "0" | "1" => {
                    return Ok(Answer {
                        wire: wire.trim().to_string(),
                        value: bit.trim() == "1",
                    })
                }
                _ => {
                    let _ = writeln!(err, "  expected 0 or 1");
                }
            }
        }
    }
}

fn run_diagnose(a: DiagnoseArgs) -> Result<ExitCode> {
    let c = load_netlist(&a.netlist)?;
    let (model, run, observation, recorded) = match &a.replay {
        Some(path) => {
            let r: Report = serde_json::from_str(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))?;
            (r.model.clone(), r.run.clone(), r.observation.clone(), Some(r))
        }
        None => {
            let observation =
                parse_observation(&read(a.observation.as_deref().expect("required by clap"))?).map_err(fail)?;
            let model = ModelOptions {
                clone: a.clone,
                ..ModelOptions::new(a.mode.into())
            };
            let run = RunOptions {
                bound: a.k,
                seed: a.seed,
                time_limit_seconds: a.time_limit,
                ..RunOptions::new(a.heuristic.into())
            };
            (model, run, observation, None)
        }
    };
    let problem = Problem::new(c.clone(), model).map_err(fail)?;
    let report = match (&recorded, &a.faults) {
        (Some(r), _) => diagnose(&problem, &run, &observation, &mut ReplayOracle::from_report(r)),
        (None, Some(faults)) => {
            let names: Vec<&str> = faults.iter().map(String::as_str).collect();
            let mut oracle = SimulationOracle::from_names(&c, &names, &observation).map_err(fail)?;
            diagnose(&problem, &run, &observation, &mut oracle)
        }
        (None, None) => diagnose(&problem, &run, &observation, &mut Console),
    }
    .map_err(|e| format!("{} ({})", e, e.code()))?;
    print!("{}", report.render());
    if let Some(path) = &a.transcript {
        write(path, &serde_json::to_string_pretty(&report).map_err(fail)?)?;
    }
    if let Some(r) = recorded {
        if r != report {
            eprintln!("replay differs from the recorded transcript");
            return Ok(ExitCode::from(1));
        }
        println!("replay identical to the recorded transcript");
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Abstract {
            netlist,
            max_cone_inputs,
        } => {
            let c = load_netlist(&netlist)?;
            let mut v = AbstractionView::new(&c);
            if let Some(t) = max_cone_inputs {
                v = v.destroy_cones(&c, t);
            }
            print!("{}", render_report(&c, &v));
        }
        Command::Clone { netlist, out, map } => {
            let c = load_netlist(&netlist)?;
            let (cloned, clones, stats) = minimize_abstraction(&c);
            let map = map.unwrap_or_else(|| out.with_extension("map"));
            write(&out, &render_bench(&cloned))?;
            write(&map, &clones.render())?;
            println!(
                "{} clones; abstraction {} -> {}; wrote {} and {}",
                stats.clones,
                stats.abstraction_before,
                stats.abstraction_after,
                out.display(),
                map.display()
            );
        }
        Command::Encode {
            netlist,
            mode,
            cnf,
            weights,
            healthy_prior,
        } => {
            let c = load_netlist(&netlist)?;
            let params = ModelParams {
                healthy_prior,
                ..ModelParams::default()
            };
            let enc = match mode {
                ModeArg::Flat => encode_flat(&c, &params).map_err(fail)?,
                ModeArg::Hierarchical => {
                    let v = AbstractionView::new(&c);
                    let priors = cone_priors(&c, &v, &params).map_err(fail)?;
                    encode_abstraction(&c, &v, &params, &priors).map_err(fail)?
                }
            };
            write(&cnf, &write_dimacs(&enc.cnf))?;
            write(&weights, &write_weights(&enc.weights))?;
            println!("{} variables, {} clauses", enc.cnf.num_vars, enc.cnf.clauses.len());
        }
        Command::Compile {
            cnf,
            weights,
            out,
            node_budget,
            seconds,
        } => {
            let cnf = parse_dimacs(&read(&cnf)?).map_err(fail)?;
            let opts = CompileOptions {
                node_budget,
                time_budget: seconds.map(std::time::Duration::from_secs_f64),
                ..CompileOptions::default()
            };
            let mut d = compile_with(&cnf, &opts).map_err(fail)?;
            println!("{} nodes, {} edges", d.size(), d.edges());
            if let Some(w) = weights {
                let w = parse_weights(&read(&w)?, cnf.num_vars).map_err(fail)?;
                let total = d.evaluate(&w, &Evidence::new(cnf.num_vars));
                println!("weighted count {}", sig12(total));
            }
            if let Some(out) = out {
                write(&out, &write_nnf(&d))?;
            }
        }
        Command::Diagnose(a) => return run_diagnose(a),
        Command::Estimate {
            netlist,
            clone,
            thresholds,
            csv,
        } => {
            let mut c = load_netlist(&netlist)?;
            if clone {
                c = minimize_abstraction(&c).0;
            }
            let thresholds = if thresholds.is_empty() {
                default_thresholds(&AbstractionView::new(&c))
            } else {
                thresholds
            };
            let (_, best, rows) = select_abstraction(&c, &thresholds);
            if csv {
                print!("{}", estimate_csv(&rows));
            } else {
                print!("{}", estimate_text(&rows));
                println!("lowest estimate at threshold {}", rows[best].threshold);
            }
        }
        Command::Gen { spec, count, seed, out } => {
            let parts: Vec<usize> = spec
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format!("spec `{spec}` is not N,P,I"))?;
            let [n, p, i] = parts[..] else {
                return Err(format!("spec `{spec}` is not N,P,I"));
            };
            fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
            let mut manifest = csv::Writer::from_writer(Vec::new());
            manifest
                .write_record([
                    "file",
                    "N",
                    "P",
                    "I",
                    "seed",
                    "rng",
                    "gates",
                    "inputs",
                    "outputs",
                    "abstraction",
                    "clones",
                    "cloned_abstraction",
                    "treewidth",
                ])
                .map_err(fail)?;
            for k in 0..count {
                let s = GenSpec::new(n, u32::try_from(p).map_err(fail)?, i, seed + k);
                let c = generate_circuit(&s).map_err(fail)?;
                let file = format!("{}.bench", s.label());
                write(&out.join(&file), &render_bench(&c))?;
                let (_, _, stats) = minimize_abstraction(&c);
                let row = [
                    file,
                    n.to_string(),
                    p.to_string(),
                    i.to_string(),
                    (seed + k).to_string(),
                    RNG_ALGORITHM.to_string(),
                    c.num_gates().to_string(),
                    c.inputs().len().to_string(),
                    c.outputs().len().to_string(),
                    stats.abstraction_before.to_string(),
                    stats.clones.to_string(),
                    stats.abstraction_after.to_string(),
                    "not computed".to_string(),
                ];
                manifest.write_record(&row).map_err(fail)?;
            }
            let text = String::from_utf8(manifest.into_inner().map_err(fail)?).map_err(fail)?;
            write(&out.join("manifest.csv"), &text)?;
            println!("wrote {count} circuits to {}", out.display());
        }
        Command::Bench {
            config,
            csv,
            no_time,
            out,
            jobs,
        } => {
            let mut cfg = BenchConfig::load(&config).map_err(fail)?;
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            let base = config.parent().unwrap_or(Path::new("."));
            let circuits = load_circuits(&cfg, base).map_err(fail)?;
            let report = bench_run(&cfg, &circuits).map_err(fail)?;
            let text = if csv {
                render_csv(&report, !no_time)
            } else {
                render_text(&report, !no_time)
            };
            match out {
                Some(path) => write(&path, &text)?,
                None => print!("{text}"),
            }
            if report.unsound() > 0 {
                eprintln!("{} unsound diagnoses", report.unsound());
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
