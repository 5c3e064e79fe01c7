//! Sequential diagnosis: proposes one measurement at a time from failure
//! posteriors and wire entropies until the certified faults explain the
//! observation, either on the flat model or hierarchically over cones.

mod engine;
mod live;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{abstraction, cone_subsystem, AbstractionError, AbstractionView};
use crate::circuit::{Circuit, NetlistError, WireId};
use crate::cloning::{minimize_abstraction, CloneMap};
use crate::compile::{compile_with, CompileError, CompileOptions, Ddnnf, Evidence, Lit};
use crate::encode::{cone_priors, encode_abstraction, encode_flat, ConePriors, EncodeError, ModelParams, WeightedCnf};

pub use engine::diagnose;
pub use live::{LiveSession, LiveState, Phase};

/// Posteriors and entropies closer than this count as tied; ties go to
/// the lowest id.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnoseError {
    #[error("no unknown measurement candidate remains")]
    Stuck,
    #[error("the known values have probability zero")]
    Inconsistent,
    #[error("no value for primary input `{0}`")]
    MissingInput(String),
    #[error("unknown wire `{0}`")]
    UnknownWire(String),
    #[error("`{0}` is already known")]
    AlreadyKnown(String),
    #[error("`{0}` is not a measurement candidate")]
    NotCandidate(String),
    #[error("`{0}` is not a primary input or output")]
    NotObservable(String),
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("time limit exceeded")]
    TimeLimit,
    #[error("line {0}: expected `wire=bit`")]
    Malformed(usize),
    #[error("the session is still working")]
    Busy,
    #[error("the session has finished")]
    Finished,
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Netlist(#[from] NetlistError),
    #[error(transparent)]
    Abstraction(#[from] AbstractionError),
}

impl DiagnoseError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            DiagnoseError::Stuck => "stuck",
            DiagnoseError::Inconsistent => "inconsistent",
            DiagnoseError::MissingInput(_) => "missing_input",
            DiagnoseError::UnknownWire(_) => "unknown_wire",
            DiagnoseError::AlreadyKnown(_) => "already_known",
            DiagnoseError::NotCandidate(_) => "not_candidate",
            DiagnoseError::NotObservable(_) => "not_observable",
            DiagnoseError::Oracle(_) => "oracle",
            DiagnoseError::TimeLimit => "time_limit",
            DiagnoseError::Malformed(_) => "malformed",
            DiagnoseError::Busy => "busy",
            DiagnoseError::Finished => "done",
            DiagnoseError::Encode(_) => "encode",
            DiagnoseError::Compile(CompileError::NodeBudget(_) | CompileError::TimeBudget) => "compile_limit",
            DiagnoseError::Compile(_) => "compile",
            DiagnoseError::Netlist(_) => "netlist",
            DiagnoseError::Abstraction(_) => "abstraction",
        }
    }
}

/// Reads `wire=bit` lines; blank lines and `#` comments are skipped.
pub fn parse_observation(text: &str) -> Result<Vec<(String, bool)>, DiagnoseError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (w, b) = line.split_once('=').ok_or(DiagnoseError::Malformed(i + 1))?;
        let b = match b.trim() {
            "0" => false,
            "1" => true,
            _ => return Err(DiagnoseError::Malformed(i + 1)),
        };
        out.push((w.trim().to_string(), b));
    }
    Ok(out)
}

/// Binary entropy in bits, with `0 log 0 = 0`.
pub fn entropy(p: f64) -> f64 {
    let h = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    (h(p) + h(1.0 - p)).max(0.0)
}

/// Twelve significant digits, the precision of every reported probability.
pub fn sig12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Flat,
    Hierarchical,
}

/// Measurement selection rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heuristic {
    /// Most likely faulty component first, then its highest-entropy variable.
    Fp,
    /// Highest-entropy candidate wire.
    Ew,
    /// A fixed random order of wires per session.
    Random,
}

macro_rules! text_enum {
    ($t:ty { $($v:ident => $s:literal),* }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),* })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s { $($s => Ok(Self::$v),)* _ => Err(format!("unknown value `{s}`")) }
            }
        }
    };
}
text_enum!(Mode { Flat => "flat", Hierarchical => "hierarchical" });
text_enum!(Heuristic { Fp => "fp", Ew => "ew", Random => "random" });

/// How the system is modeled and compiled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub mode: Mode,
    /// Minimize the abstraction by cloning before diagnosis.
    pub clone: bool,
    /// Destroy cones with more inputs than this.
    pub max_cone_inputs: Option<usize>,
    /// Compile each (sub)system under its observation instead of once.
    pub simplify: bool,
    pub params: ModelParams,
    pub node_budget: usize,
    pub compile_seconds: Option<f64>,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            mode: Mode::Flat,
            clone: false,
            max_cone_inputs: None,
            simplify: true,
            params: ModelParams::default(),
            node_budget: CompileOptions::default().node_budget,
            compile_seconds: None,
        }
    }
}

impl ModelOptions {
    pub fn new(mode: Mode) -> ModelOptions {
        ModelOptions {
            mode,
            ..ModelOptions::default()
        }
    }
}

/// Per-session choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub heuristic: Heuristic,
    /// Fault cardinality bound for pruning; `None` disables pruning.
    pub bound: Option<u64>,
    /// Seeds the random measurement order.
    pub seed: u64,
    pub time_limit_seconds: Option<f64>,
}

impl RunOptions {
    pub fn new(heuristic: Heuristic) -> RunOptions {
        RunOptions {
            heuristic,
            bound: None,
            seed: 0,
            time_limit_seconds: None,
        }
    }
}

/// A compiled (sub)system encoding.
pub(crate) struct Model {
    pub enc: WeightedCnf,
    pub ddnnf: Ddnnf,
}

/// The system under diagnosis: the original circuit, the circuit used for
/// reasoning (cloned when requested), its abstraction and cone priors, and
/// a cache of observation-independent compilations.
pub struct Problem {
    original: Circuit,
    circuit: Circuit,
    clones: CloneMap,
    view: AbstractionView,
    priors: ConePriors,
    options: ModelOptions,
    cache: Mutex<HashMap<String, Arc<Model>>>,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("circuit", &self.circuit.name())
            .field("options", &self.options)
            .finish()
    }
}

impl Problem {
    pub fn new(original: Circuit, options: ModelOptions) -> Result<Problem, DiagnoseError> {
        options.params.validate()?;
        let (circuit, clones) = if options.mode == Mode::Hierarchical && options.clone {
            let (c, m, _) = minimize_abstraction(&original);
            (c, m)
        } else {
            (original.clone(), CloneMap::default())
        };
        let mut view = abstraction(&circuit);
        if let Some(t) = options.max_cone_inputs {
            view = view.destroy_cones(&circuit, t);
        }
        let priors = match options.mode {
            Mode::Hierarchical => cone_priors(&circuit, &view, &options.params)?,
            Mode::Flat => ConePriors::new(),
        };
        Ok(Problem {
            original,
            circuit,
            clones,
            view,
            priors,
            options,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn original(&self) -> &Circuit {
        &self.original
    }

    /// Circuit used for reasoning; equals the original unless cloned.
    pub fn circuit(&self) -> &Circuit {
        &self.circuit
    }

    pub fn clones(&self) -> &CloneMap {
        &self.clones
    }

    pub fn view(&self) -> &AbstractionView {
        &self.view
    }

    pub fn priors(&self) -> &ConePriors {
        &self.priors
    }

    pub fn options(&self) -> &ModelOptions {
        &self.options
    }

    fn compile_options(&self, assumptions: Vec<Lit>) -> CompileOptions {
        CompileOptions {
            node_budget: self.options.node_budget,
            time_budget: self.options.compile_seconds.map(Duration::from_secs_f64),
            assumptions,
            ..CompileOptions::default()
        }
    }

    /// The system rooted at `scope` (the whole circuit for `None`), its view
    /// and its compiled encoding, conditioned on `u` when simplifying.
    pub(crate) fn model(
        &self,
        scope: Option<&str>,
        u: &BTreeMap<String, bool>,
    ) -> Result<(Circuit, AbstractionView, Arc<Model>), DiagnoseError> {
        let (sys, view) = match scope {
            None => (self.circuit.clone(), self.view.clone()),
            Some(name) => {
                let root = self
                    .circuit
                    .wire(name)
                    .ok_or_else(|| DiagnoseError::UnknownWire(name.into()))?;
                let sub = cone_subsystem(&self.circuit, &self.view, root)?;
                let view = self.view.restrict(&self.circuit, &sub);
                (sub, view)
            }
        };
        let key = scope.unwrap_or("").to_string();
        if !self.options.simplify {
            if let Some(m) = self.cache.lock().expect("model cache").get(&key) {
                return Ok((sys, view, Arc::clone(m)));
            }
        }
        let enc = match self.options.mode {
            Mode::Flat => encode_flat(&sys, &self.options.params)?,
            Mode::Hierarchical => encode_abstraction(&sys, &view, &self.options.params, &self.priors)?,
        };
        let assumptions = if self.options.simplify {
            let values: Vec<(WireId, bool)> = u.iter().filter_map(|(n, &b)| sys.wire(n).map(|w| (w, b))).collect();
            enc.wire_evidence(&values).lits()
        } else {
            Vec::new()
        };
        let ddnnf = compile_with(&enc.cnf, &self.compile_options(assumptions))?;
        let model = Arc::new(Model { enc, ddnnf });
        if !self.options.simplify {
            self.cache.lock().expect("model cache").insert(key, Arc::clone(&model));
        }
        Ok((sys, view, model))
    }

    /// Compiles the top-level model ahead of time (only cached when not
    /// simplifying under observations). Returns its node count.
    pub fn precompile(&self) -> Result<usize, DiagnoseError> {
        let (_, _, m) = self.model(None, &BTreeMap::new())?;
        Ok(m.ddnnf.size())
    }

    /// Independent check of a finished report against the goal condition
    /// of its mode: the flat model evaluation for flat sessions, fault
    /// simulation on the original circuit for hierarchical ones.
    pub fn verify(&self, report: &Report) -> Result<bool, DiagnoseError> {
        let c = &self.original;
        let id = |n: &str| c.wire(n).ok_or_else(|| DiagnoseError::UnknownWire(n.into()));
        let faults = report.faults.iter().map(|f| id(f)).collect::<Result<Vec<_>, _>>()?;
        let observed = report
            .observation
            .iter()
            .map(|(w, b)| Ok((id(w)?, *b)))
            .collect::<Result<Vec<_>, DiagnoseError>>()?;
        match self.options.mode {
            Mode::Hierarchical => meets_criteria_sim(c, &faults, &observed),
            Mode::Flat => {
                let u: BTreeMap<String, bool> = report.observation.iter().cloned().collect();
                let (_, _, m) = self.model(None, &u)?;
                let mut values = observed;
                for (w, b) in report.measurements() {
                    values.push((id(&w)?, b));
                }
                let mut d = m.ddnnf.clone();
                Ok(meets_criteria_flat(
                    &mut d,
                    &m.enc,
                    &faults,
                    &m.enc.wire_evidence(&values),
                ))
            }
        }
    }
}

/// `Pr(okX = 0 for X in faults, okY = 1 for the other health variables,
/// e) > 0`, decided on exact model counts.
pub fn meets_criteria_flat(d: &mut Ddnnf, enc: &WeightedCnf, faults: &[WireId], e: &Evidence) -> bool {
    let mut e = e.clone();
    for g in enc.vars.health_components() {
        let ok = enc.vars.ok_var(g).expect("health component") as Lit;
        let lit = if faults.contains(&g) { -ok } else { ok };
        if e.contradicts(lit) {
            return false;
        }
        e.assert_lit(lit);
    }
    d.evaluate(&enc.weights, &e);
    d.last_count() > 0
}

/// Simulates `faults` from the inputs recorded in `y` and compares every
/// output value recorded there.
pub fn meets_criteria_sim(c: &Circuit, faults: &[WireId], y: &[(WireId, bool)]) -> Result<bool, DiagnoseError> {
    let value = |w: WireId| y.iter().find(|(x, _)| *x == w).map(|&(_, b)| b);
    let inputs = c
        .inputs()
        .iter()
        .map(|&i| value(i).ok_or_else(|| DiagnoseError::MissingInput(c.wire_name(i).into())))
        .collect::<Result<Vec<bool>, _>>()?;
    let sim = c.simulate(&inputs, faults)?;
    Ok(c.outputs().iter().all(|&o| value(o).is_none_or(|b| b == sim[o])))
}

/// A proposed measurement and why it was chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    /// Wire in the reasoning circuit (may be a clone).
    pub wire: String,
    /// Wire of the original circuit that is actually probed.
    pub measure: String,
    pub entropy: f64,
    /// Component the fault-probability rule focused on.
    pub component: Option<String>,
    pub component_posterior: Option<f64>,
}

/// State visible to an oracle when it is asked for a value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Cone being diagnosed, `None` at the top level.
    pub scope: Option<String>,
    /// `Pr(okX = 0 | y)` per health-carrying component of the scope.
    pub failure_posteriors: Vec<(String, f64)>,
    /// Candidate wires (original names) whose value is measured or implied.
    pub known: Vec<(String, bool)>,
    /// Candidate wires (original names) that may still be measured.
    pub candidates: Vec<String>,
    /// Components certified faulty so far (original names).
    pub faults: Vec<String>,
    pub cost: usize,
}

/// A measured value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    /// Original wire name; usually the proposal's `measure`.
    pub wire: String,
    pub value: bool,
}

/// Source of ground-truth wire values.
pub trait Oracle {
    fn answer(&mut self, proposal: &Proposal, state: &Snapshot) -> Result<Answer, DiagnoseError>;
}

/// Answers from a fault simulation of the original circuit.
#[derive(Clone, Debug)]
pub struct SimulationOracle {
    values: BTreeMap<String, bool>,
}

impl SimulationOracle {
    pub fn new(c: &Circuit, faults: &[WireId], inputs: &[bool]) -> Result<SimulationOracle, DiagnoseError> {
        let sim = c.simulate(inputs, faults)?;
        Ok(SimulationOracle {
            values: (0..c.num_wires())
                .map(|w| (c.wire_name(w).to_string(), sim[w]))
                .collect(),
        })
    }

    /// Inputs taken from `observation` (wire name, value), faults by name.
    pub fn from_names(
        c: &Circuit,
        faults: &[&str],
        observation: &[(String, bool)],
    ) -> Result<SimulationOracle, DiagnoseError> {
        let ids = faults
            .iter()
            .map(|f| c.wire(f).ok_or_else(|| DiagnoseError::UnknownWire(f.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let inputs = c
            .inputs()
            .iter()
            .map(|&i| {
                let n = c.wire_name(i);
                observation
                    .iter()
                    .find(|(w, _)| w == n)
                    .map(|&(_, b)| b)
                    .ok_or_else(|| DiagnoseError::MissingInput(n.into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        SimulationOracle::new(c, &ids, &inputs)
    }

    pub fn value(&self, wire: &str) -> Option<bool> {
        self.values.get(wire).copied()
    }

    /// Primary inputs and outputs, the observation of a scenario.
    pub fn observation(&self, c: &Circuit) -> Vec<(String, bool)> {
        c.inputs()
            .iter()
            .chain(c.outputs())
            .map(|&w| (c.wire_name(w).to_string(), self.values[c.wire_name(w)]))
            .collect()
    }
}

impl Oracle for SimulationOracle {
    fn answer(&mut self, p: &Proposal, _: &Snapshot) -> Result<Answer, DiagnoseError> {
        let value = self
            .value(&p.measure)
            .ok_or_else(|| DiagnoseError::UnknownWire(p.measure.clone()))?;
        Ok(Answer {
            wire: p.measure.clone(),
            value,
        })
    }
}

/// Replays recorded answers in order, whatever is proposed.
#[derive(Clone, Debug)]
pub struct ReplayOracle {
    answers: std::collections::VecDeque<Answer>,
}

impl ReplayOracle {
    pub fn new(answers: impl IntoIterator<Item = Answer>) -> ReplayOracle {
        ReplayOracle {
            answers: answers.into_iter().collect(),
        }
    }

    pub fn from_report(r: &Report) -> ReplayOracle {
        ReplayOracle::new(r.steps.iter().map(|s| Answer {
            wire: s.wire.clone(),
            value: s.value,
        }))
    }
}

impl Oracle for ReplayOracle {
    fn answer(&mut self, p: &Proposal, _: &Snapshot) -> Result<Answer, DiagnoseError> {
        self.answers
            .pop_front()
            .ok_or_else(|| DiagnoseError::Oracle(format!("no recorded answer for proposal `{}`", p.measure)))
    }
}

/// One measurement of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub scope: Option<String>,
    pub proposal: Proposal,
    /// Original wire measured and its value.
    pub wire: String,
    pub value: bool,
    /// Failure posteriors when the proposal was made.
    pub posteriors: Vec<(String, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Done,
    Stuck,
}

/// Full session transcript and result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub circuit: String,
    pub model: ModelOptions,
    pub run: RunOptions,
    pub observation: Vec<(String, bool)>,
    pub steps: Vec<Step>,
    /// Top-level diagnosis of the abstraction (hierarchical mode).
    pub abstract_faults: Vec<String>,
    /// Faults in original component names.
    pub faults: Vec<String>,
    pub status: Status,
    pub cost: usize,
}

impl Report {
    pub fn measurements(&self) -> Vec<(String, bool)> {
        self.steps.iter().map(|s| (s.wire.clone(), s.value)).collect()
    }

    /// Human-readable transcript.
    pub fn render(&self) -> String {
        use std::fmt::Write as _;
        let bit = |b: bool| u8::from(b);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "circuit {} mode {} heuristic {} bound {}",
            self.circuit,
            self.model.mode,
            self.run.heuristic,
            self.run.bound.map_or("none".into(), |k| k.to_string())
        );
        let obs: Vec<String> = self
            .observation
            .iter()
            .map(|(w, b)| format!("{w}={}", bit(*b)))
            .collect();
        let _ = writeln!(out, "observation {}", obs.join(" "));
        for (i, s) in self.steps.iter().enumerate() {
            let scope = s.scope.as_deref().map_or(String::new(), |c| format!(" [cone {c}]"));
            let post: Vec<String> = s.posteriors.iter().map(|(c, p)| format!("{c}:{p:.4}")).collect();
            let _ = writeln!(
                out,
                "step {}{scope}: propose {} (entropy {:.4}) -> {}={} | {}",
                i + 1,
                s.proposal.wire,
                s.proposal.entropy,
                s.wire,
                bit(s.value),
                post.join(" ")
            );
        }
        if !self.abstract_faults.is_empty() {
            let _ = writeln!(out, "abstract diagnosis {{{}}}", self.abstract_faults.join(", "));
        }
        let status = match self.status {
            Status::Done => "done",
            Status::Stuck => "stuck",
        };
        let _ = writeln!(
            out,
            "{status}: D = {{{}}} after {} measurements",
            self.faults.join(", "),
            self.cost
        );
        out
    }
}
