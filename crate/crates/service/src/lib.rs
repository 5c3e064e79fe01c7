//! Session-oriented HTTP API over the diagnosis loop.
//!
//! Each session owns a [`LiveSession`] whose worker thread blocks until a
//! measurement is posted. Bodies are JSON; probabilities carry 12
//! significant digits; errors are `{"error": {"code", "message"}}`.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex as AsyncMutex, OwnedMutexGuard};

use seqdiag::abstraction::{AbstractionView, Cone};
use seqdiag::bundled;
use seqdiag::circuit::{parse_bench_named, Circuit};
use seqdiag::diagnose::{
    sig12, DiagnoseError, Heuristic, LiveSession, LiveState, Mode, ModelOptions, Phase, Report, RunOptions,
    SimulationOracle,
};

/// Service tuning.
#[derive(Clone, Debug)]
pub struct Config {
    /// Sessions untouched for this long are dropped.
    pub idle: Duration,
    /// How long a request waits for the engine before answering with the
    /// `compiling` status.
    pub wait: Duration,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            idle: Duration::from_secs(30 * 60),
            wait: Duration::from_secs(5),
        }
    }
}

/// Error body with a machine-readable code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> ApiError {
        ApiError {
            status: status_of(code),
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    fn not_found(id: &str) -> ApiError {
        ApiError::new("not_found", format!("no session `{id}` (unknown or expired)"))
    }
}

impl From<DiagnoseError> for ApiError {
    fn from(e: DiagnoseError) -> ApiError {
        ApiError::new(e.code(), e.to_string())
    }
}

/// HTTP status for an error code.
pub fn status_of(code: &str) -> StatusCode {
    match code {
        "not_found" | "unknown_circuit" => StatusCode::NOT_FOUND,
        "conflict" | "busy" | "done" | "stuck" | "failed" | "already_known" => StatusCode::CONFLICT,
        "internal" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// A bit given as `0`/`1` or `false`/`true`.
#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(untagged)]
pub enum BitIn {
    Bool(bool),
    Num(u64),
}

impl BitIn {
    fn get(self, wire: &str) -> ApiResult<bool> {
        match self {
            BitIn::Bool(b) => Ok(b),
            BitIn::Num(0) => Ok(false),
            BitIn::Num(1) => Ok(true),
            BitIn::Num(n) => Err(ApiError::new(
                "invalid_bit",
                format!("`{wire}`: expected 0 or 1, got {n}"),
            )),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    /// Inline `.bench` netlist.
    pub bench: Option<String>,
    /// Name for an inline netlist (default `inline`).
    pub name: Option<String>,
    /// Bundled circuit name, the alternative to `bench`.
    pub bundled: Option<String>,
    /// Values of primary inputs and outputs.
    pub observation: BTreeMap<String, BitIn>,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub heuristic: Option<String>,
    /// Fault cardinality bound enabling pruning.
    pub k: Option<u64>,
    #[serde(default)]
    pub clone: bool,
    #[serde(default)]
    pub seed: u64,
    /// Scripted faults: the session can then supply simulated readings.
    pub faults: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementRequest {
    pub wire: String,
    /// Omitted to use the scripted fault simulation.
    pub value: Option<BitIn>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub component: String,
    pub posterior: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub wire: String,
    pub value: u8,
}

fn readings(v: &[(String, bool)]) -> Vec<Reading> {
    v.iter()
        .map(|(w, b)| Reading {
            wire: w.clone(),
            value: u8::from(*b),
        })
        .collect()
}

/// Session state as served.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub circuit: String,
    pub mode: Mode,
    pub heuristic: Heuristic,
    pub k: Option<u64>,
    pub clone: bool,
    /// `compiling`, `ready`, `done`, `stuck` or `failed`.
    pub status: Phase,
    /// Cone being diagnosed; `null` at the top level.
    pub scope: Option<String>,
    /// Failure posterior per component of the scope.
    pub posteriors: Vec<Posterior>,
    pub known: Vec<Reading>,
    pub candidates: Vec<String>,
    pub measurements: Vec<Reading>,
    pub faults: Vec<String>,
    pub cost: usize,
    /// Whether the session finished without any measurement; `null` while
    /// compiling.
    pub zero_measurement: Option<bool>,
    /// Whether posted measurements may omit the value.
    pub scripted: bool,
    pub error: Option<ErrorBody>,
    /// Unix milliseconds.
    pub created_at: u64,
    pub last_activity: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalView {
    /// Original wire to probe.
    pub wire: String,
    /// Wire of the reasoning circuit (a clone name when cloning).
    pub reasoning_wire: String,
    pub scope: Option<String>,
    pub component: Option<String>,
    pub component_posterior: Option<f64>,
    pub wire_entropy: f64,
    /// Reading from the scripted faults, when present.
    pub simulated_value: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitSummary {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub gates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeView {
    pub root: String,
    /// Enclosing cone, `null` for top-level cones.
    pub parent: Option<String>,
    pub members: Vec<String>,
    pub inputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitDetail {
    pub name: String,
    pub bench: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub gates: usize,
    pub abstraction: Vec<String>,
    pub cones: Vec<ConeView>,
}

fn summary(c: &Circuit) -> CircuitSummary {
    CircuitSummary {
        name: c.name().into(),
        inputs: c.inputs().len(),
        outputs: c.outputs().len(),
        gates: c.num_gates(),
    }
}

fn detail(c: &Circuit, bench: &str) -> CircuitDetail {
    let view = AbstractionView::new(c);
    let names = |ws: &[usize]| c.names(ws).into_iter().map(String::from).collect::<Vec<_>>();
    fn walk(c: &Circuit, view: &AbstractionView, cone: &Cone, parent: Option<String>, out: &mut Vec<ConeView>) {
        let root = c.wire_name(cone.root).to_string();
        out.push(ConeView {
            root: root.clone(),
            parent,
            members: c.names(&cone.members).into_iter().map(String::from).collect(),
            inputs: c.names(&cone.inputs).into_iter().map(String::from).collect(),
        });
        for inner in view.inner_cones(c, cone.root) {
            walk(c, view, &inner, Some(root.clone()), out);
        }
    }
    let mut cones = Vec::new();
    for cone in view.top_cones() {
        walk(c, &view, &cone, None, &mut cones);
    }
    CircuitDetail {
        name: c.name().into(),
        bench: bench.into(),
        inputs: names(c.inputs()),
        outputs: names(c.outputs()),
        gates: c.num_gates(),
        abstraction: names(view.abstraction()),
        cones,
    }
}

fn unix_ms(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

struct Entry {
    live: LiveSession,
    circuit: Circuit,
    bench: String,
    model: ModelOptions,
    run: RunOptions,
    oracle: Option<SimulationOracle>,
}

struct Slot {
    entry: Arc<AsyncMutex<Entry>>,
    created: SystemTime,
    /// Monotonic and wall-clock time of the last request.
    last: Mutex<(Instant, SystemTime)>,
}

impl Slot {
    fn touch(&self) {
        *self.last.lock().unwrap() = (Instant::now(), SystemTime::now());
    }

    fn idle_for(&self) -> Duration {
        self.last.lock().unwrap().0.elapsed()
    }
}

struct Inner {
    config: Config,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
}

/// Shared service state.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: Config) -> AppState {
        AppState(Arc::new(Inner {
            config,
            sessions: Mutex::new(HashMap::new()),
        }))
    }

    pub fn config(&self) -> &Config {
        &self.0.config
    }

    /// Drops expired sessions and returns how many were removed.
    pub fn sweep(&self) -> usize {
        let idle = self.0.config.idle;
        let mut map = self.0.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, s| s.idle_for() <= idle);
        before - map.len()
    }

    pub fn len(&self) -> usize {
        self.0.sessions.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Finds a live session and marks it active; expired ones are removed.
    fn lookup(&self, id: &str) -> ApiResult<Arc<Slot>> {
        let mut map = self.0.sessions.lock().unwrap();
        let slot = map.get(id).cloned().ok_or_else(|| ApiError::not_found(id))?;
        if slot.idle_for() > self.0.config.idle {
            map.remove(id);
            return Err(ApiError::not_found(id));
        }
        slot.touch();
        Ok(slot)
    }

    fn insert(&self, entry: Entry) -> (String, Arc<Slot>) {
        let now = (Instant::now(), SystemTime::now());
        let slot = Arc::new(Slot {
            entry: Arc::new(AsyncMutex::new(entry)),
            created: now.1,
            last: Mutex::new(now),
        });
        let mut map = self.0.sessions.lock().unwrap();
        let id = loop {
            let id = format!("{:032x}", rand::random::<u128>());
            if !map.contains_key(&id) {
                break id;
            }
        };
        map.insert(id.clone(), slot.clone());
        (id, slot)
    }
}

/// The service router.
pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/circuits", get(list_circuits))
        .route("/circuits/{name}", get(get_circuit))
        .route("/sessions", axum::routing::post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/proposal", get(get_proposal))
        .route("/sessions/{id}/measurements", axum::routing::post(post_measurement))
        .route("/sessions/{id}/transcript", get(get_transcript))
        .route("/sessions/{id}/circuit", get(get_session_circuit))
        .fallback(|| async { ApiError::new("not_found", "no such endpoint") })
        .with_state(state)
}

/// Periodically drops expired sessions.
pub fn spawn_sweeper(state: AppState) -> tokio::task::JoinHandle<()> {
    let period = (state.config().idle / 4).max(Duration::from_millis(10));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            state.sweep();
        }
    })
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new("invalid_body", e.to_string()))
}

fn bundled_circuit(name: &str) -> ApiResult<(Circuit, String)> {
    match (bundled::circuit(name), bundled::text(name)) {
        (Some(c), Some(t)) => Ok((c, t.to_string())),
        _ => Err(ApiError::new("unknown_circuit", format!("no bundled circuit `{name}`"))),
    }
}

async fn list_circuits() -> Json<Vec<CircuitSummary>> {
    Json(
        bundled::names()
            .filter_map(bundled::circuit)
            .map(|c| summary(&c))
            .collect(),
    )
}

async fn get_circuit(Path(name): Path<String>) -> ApiResult<Json<CircuitDetail>> {
    let (c, text) = bundled_circuit(&name)?;
    Ok(Json(detail(&c, &text)))
}

fn view(id: &str, slot: &Slot, e: &Entry) -> SessionView {
    let st: &LiveState = e.live.state();
    let s = &st.snapshot;
    let zero_measurement = match st.phase {
        Phase::Compiling => None,
        Phase::Ready => Some(false),
        _ => Some(st.report.as_ref().is_some_and(|r| r.steps.is_empty())),
    };
    SessionView {
        id: id.into(),
        circuit: e.circuit.name().into(),
        mode: e.model.mode,
        heuristic: e.run.heuristic,
        k: e.run.bound,
        clone: e.model.clone,
        status: st.phase,
        scope: s.scope.clone(),
        posteriors: s
            .failure_posteriors
            .iter()
            .map(|(c, p)| Posterior {
                component: c.clone(),
                posterior: sig12(*p),
            })
            .collect(),
        known: readings(&s.known),
        candidates: s.candidates.clone(),
        measurements: readings(&st.measurements),
        faults: s.faults.clone(),
        cost: s.cost,
        zero_measurement,
        scripted: e.oracle.is_some(),
        error: st.error.as_ref().map(|(code, message)| ErrorBody {
            code: code.clone(),
            message: message.clone(),
        }),
        created_at: unix_ms(slot.created),
        last_activity: unix_ms(slot.last.lock().unwrap().1),
    }
}

/// Runs `f` on the locked entry off the async runtime.
async fn blocking<T: Send + 'static>(
    guard: OwnedMutexGuard<Entry>,
    f: impl FnOnce(&mut Entry) -> T + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(move || {
        let mut guard = guard;
        f(&mut guard)
    })
    .await
    .map_err(|e| ApiError::new("internal", e.to_string()))
}

/// Locks a session's entry and lets the engine catch up for at most `wait`.
async fn settled(slot: &Slot, wait: Duration) -> ApiResult<OwnedMutexGuard<Entry>> {
    let mut guard = slot.entry.clone().lock_owned().await;
    if wait.is_zero() || guard.live.state().phase != Phase::Compiling {
        guard.live.wait(Duration::ZERO);
        return Ok(guard);
    }
    tokio::task::spawn_blocking(move || {
        guard.live.wait(wait);
        guard
    })
    .await
    .map_err(|e| ApiError::new("internal", e.to_string()))
}

fn build_entry(req: CreateRequest) -> ApiResult<Entry> {
    let (circuit, bench) = match (req.bench, req.bundled) {
        (Some(text), None) => {
            let name = req.name.unwrap_or_else(|| "inline".into());
            let c = parse_bench_named(&name, &text).map_err(|e| ApiError::new("netlist", e.to_string()))?;
            (c, text)
        }
        (None, Some(name)) => bundled_circuit(&name)?,
        _ => {
            return Err(ApiError::new(
                "invalid_body",
                "give exactly one of `bench` and `bundled`",
            ))
        }
    };
    let mode = match req.mode.as_deref() {
        None => Mode::Flat,
        Some(m) => m.parse().map_err(|e: String| ApiError::new("invalid_mode", e))?,
    };
    let heuristic = match req.heuristic.as_deref() {
        None => Heuristic::Fp,
        Some(h) => h.parse().map_err(|e: String| ApiError::new("invalid_heuristic", e))?,
    };
    let mut observation = Vec::new();
    for (wire, bit) in req.observation {
        let w = circuit
            .wire(&wire)
            .ok_or_else(|| ApiError::from(DiagnoseError::UnknownWire(wire.clone())))?;
        if !circuit.is_input(w) && !circuit.is_output(w) {
            return Err(DiagnoseError::NotObservable(wire).into());
        }
        let b = bit.get(&wire)?;
        observation.push((wire, b));
    }
    let oracle = match &req.faults {
        Some(faults) => {
            let names: Vec<&str> = faults.iter().map(String::as_str).collect();
            Some(SimulationOracle::from_names(&circuit, &names, &observation)?)
        }
        None => None,
    };
    let model = ModelOptions {
        clone: req.clone,
        ..ModelOptions::new(mode)
    };
    // No time limit: the clock would include the technician's time.
    let run = RunOptions {
        bound: req.k,
        seed: req.seed,
        ..RunOptions::new(heuristic)
    };
    let live = LiveSession::spawn(circuit.clone(), model.clone(), run.clone(), observation);
    Ok(Entry {
        live,
        circuit,
        bench,
        model,
        run,
        oracle,
    })
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: CreateRequest = parse_body(&body)?;
    let entry = build_entry(req)?;
    let (id, slot) = app.insert(entry);
    let guard = settled(&slot, app.config().wait).await?;
    let v = view(&id, &slot, &guard);
    Ok((StatusCode::CREATED, Json(v)).into_response())
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let slot = app.lookup(&id)?;
    let guard = settled(&slot, Duration::ZERO).await?;
    Ok(Json(view(&id, &slot, &guard)))
}

fn require_ready(st: &LiveState) -> ApiResult<()> {
    match st.phase {
        Phase::Ready => Ok(()),
        Phase::Compiling => Err(DiagnoseError::Busy.into()),
        Phase::Done => Err(DiagnoseError::Finished.into()),
        Phase::Stuck => Err(ApiError::new("stuck", "no unknown measurement candidate remains")),
        Phase::Failed => Err(ApiError::new("failed", "the session failed; see its error")),
    }
}

async fn get_proposal(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ProposalView>> {
    let slot = app.lookup(&id)?;
    let guard = settled(&slot, Duration::ZERO).await?;
    let st = guard.live.state();
    require_ready(st)?;
    let p = st.proposal.as_ref().expect("ready sessions have a proposal");
    Ok(Json(ProposalView {
        wire: p.measure.clone(),
        reasoning_wire: p.wire.clone(),
        scope: st.snapshot.scope.clone(),
        component: p.component.clone(),
        component_posterior: p.component_posterior.map(sig12),
        wire_entropy: sig12(p.entropy),
        simulated_value: guard.oracle.as_ref().and_then(|o| o.value(&p.measure)).map(u8::from),
    }))
}

async fn post_measurement(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SessionView>> {
    let slot = app.lookup(&id)?;
    // Posts within a session are serialized; a concurrent one is refused.
    let mut guard = slot
        .entry
        .clone()
        .try_lock_owned()
        .map_err(|_| ApiError::new("conflict", "another request is updating this session"))?;
    let req: MeasurementRequest = parse_body(&body)?;
    let wire = req.wire;
    if guard.circuit.wire(&wire).is_none() {
        return Err(DiagnoseError::UnknownWire(wire).into());
    }
    let value = match req.value {
        Some(b) => b.get(&wire)?,
        None => guard
            .oracle
            .as_ref()
            .and_then(|o| o.value(&wire))
            .ok_or_else(|| ApiError::new("missing_value", "`value` is required without scripted faults"))?,
    };
    guard.live.wait(Duration::ZERO);
    require_ready(guard.live.state())?;
    guard.live.validate(&wire)?;
    let wait = app.config().wait;
    let slot2 = slot.clone();
    let v = blocking(guard, move |e| {
        e.live.submit(&wire, value, wait).map(|_| ())?;
        Ok::<_, ApiError>(view(&id, &slot2, e))
    })
    .await??;
    Ok(Json(v))
}

async fn get_transcript(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Report>> {
    let slot = app.lookup(&id)?;
    let guard = settled(&slot, Duration::ZERO).await?;
    let st = guard.live.state();
    match (&st.report, st.phase) {
        (Some(r), _) => Ok(Json(r.clone())),
        (None, Phase::Failed) => Err(ApiError::new("failed", "the session failed; see its error")),
        _ => Err(ApiError::new(
            "busy",
            "the transcript is available once the session finishes",
        )),
    }
}

async fn get_session_circuit(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<CircuitDetail>> {
    let slot = app.lookup(&id)?;
    let e = slot.entry.lock().await;
    Ok(Json(detail(&e.circuit, &e.bench)))
}

async fn delete_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    app.lookup(&id)?;
    app.0.sessions.lock().unwrap().remove(&id);
    Ok(StatusCode::NO_CONTENT)
}
