use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use seqdiag::bundled;
use seqdiag::diagnose::{diagnose, Problem, ReplayOracle, Report};
use seqdiag_service::{router, AppState, Config, SessionView};

fn app() -> Router {
    router(AppState::new(Config::default()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

async fn create(app: &Router, body: Value) -> SessionView {
    let (s, v) = call(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn post(app: &Router, id: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", &format!("/sessions/{id}/measurements"), Some(body)).await
}

fn code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

fn two_gate() -> Value {
    json!({"bundled": "two_gate_cone", "observation": {"A": 1, "P": 1, "D": 1}})
}

/// Failure posteriors of J = NOT(P), A = AND(J, D) by enumerating health
/// states and broken outputs: healthy prior 0.9, broken output high with
/// probability 0.5.
fn two_gate_posteriors(p: bool, d: bool, a: bool) -> (f64, f64) {
    let (h, b) = (0.9, 0.5);
    let (mut total, mut fj, mut fa) = (0.0, 0.0, 0.0);
    for ok_j in [false, true] {
        for ok_a in [false, true] {
            for j_broken in [false, true] {
                for a_broken in [false, true] {
                    let mut w = if ok_j { h } else { 1.0 - h } * if ok_a { h } else { 1.0 - h };
                    let j = if ok_j { !p } else { j_broken };
                    let out = if ok_a { j && d } else { a_broken };
                    if !ok_j {
                        w *= if j_broken { b } else { 1.0 - b };
                    }
                    if !ok_a {
                        w *= if a_broken { b } else { 1.0 - b };
                    }
                    // Unused broken-value branches of healthy gates repeat
                    // their weight; count each world once.
                    if (ok_j && j_broken) || (ok_a && a_broken) || out != a {
                        continue;
                    }
                    total += w;
                    fj += if ok_j { 0.0 } else { w };
                    fa += if ok_a { 0.0 } else { w };
                }
            }
        }
    }
    (fj / total, fa / total)
}

#[tokio::test]
async fn two_gate_session_runs_to_its_fault() {
    let app = app();
    let s = create(&app, two_gate()).await;
    assert_eq!(s.status, seqdiag::diagnose::Phase::Ready);
    assert_eq!(s.zero_measurement, Some(false));
    let (pj, pa) = two_gate_posteriors(true, true, true);
    assert!((pj - 10.0 / 19.0).abs() < 1e-15);
    let post_of = |c: &str| s.posteriors.iter().find(|p| p.component == c).unwrap().posterior;
    assert_eq!(post_of("J"), seqdiag::diagnose::sig12(pj));
    assert_eq!(post_of("A"), seqdiag::diagnose::sig12(pa));
    assert_eq!(post_of("J"), 0.526315789474);

    let uri = format!("/sessions/{}/proposal", s.id);
    let (st, p1) = call(&app, "GET", &uri, None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(p1["wire"], "J");
    assert_eq!(p1["wire_entropy"], 1.0);
    assert_eq!(p1["simulated_value"], Value::Null);
    // Idempotent until a measurement is posted.
    let (_, p2) = call(&app, "GET", &uri, None).await;
    assert_eq!(p1, p2);

    let (st, v) = post(&app, &s.id, json!({"wire": "J", "value": 1})).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let done: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(done.status, seqdiag::diagnose::Phase::Done);
    assert_eq!(done.faults, vec!["J"]);
    assert_eq!(done.cost, 1);

    let (st, v) = call(&app, "GET", &uri, None).await;
    assert_eq!((st, code(&v)), (StatusCode::CONFLICT, "done"));
    let (st, v) = post(&app, &s.id, json!({"wire": "J", "value": 1})).await;
    assert_eq!((st, code(&v)), (StatusCode::CONFLICT, "done"));
    let (_, got) = call(&app, "GET", &format!("/sessions/{}", s.id), None).await;
    assert_eq!(got["status"], "done");
    assert_eq!(got["faults"], json!(["J"]));
}

#[tokio::test]
async fn normal_observation_needs_no_measurement() {
    let app = app();
    // P=1 gives J=0, so A=0 is the healthy output.
    let s = create(
        &app,
        json!({"bundled": "two_gate_cone", "observation": {"A": 0, "P": 1, "D": 1}}),
    )
    .await;
    assert_eq!(s.status, seqdiag::diagnose::Phase::Done);
    assert!(s.faults.is_empty());
    assert_eq!(s.cost, 0);
    assert_eq!(s.zero_measurement, Some(true));
}

#[tokio::test]
async fn creation_errors_are_coded() {
    let app = app();
    let cases = [
        (
            json!({"bench": "INPUT(a)\nOUTPUT(b)\nb = FOO(a)\n", "observation": {}}),
            400,
            "netlist",
        ),
        (json!({"bundled": "nope", "observation": {}}), 404, "unknown_circuit"),
        (json!({"observation": {}}), 400, "invalid_body"),
        (
            json!({"bundled": "c17", "bench": "", "observation": {}}),
            400,
            "invalid_body",
        ),
        (
            json!({"bundled": "two_gate_cone", "observation": {"Z": 1}}),
            400,
            "unknown_wire",
        ),
        (
            json!({"bundled": "two_gate_cone", "observation": {"J": 1}}),
            400,
            "not_observable",
        ),
        (
            json!({"bundled": "two_gate_cone", "observation": {"A": 2}}),
            400,
            "invalid_bit",
        ),
        (
            json!({"bundled": "two_gate_cone", "observation": {"A": 1}, "mode": "deep"}),
            400,
            "invalid_mode",
        ),
        (
            json!({"bundled": "two_gate_cone", "observation": {"A": 1}, "heuristic": "x"}),
            400,
            "invalid_heuristic",
        ),
        (
            json!({"bundled": "two_gate_cone", "observation": {"A": 1}, "faults": ["J"]}),
            400,
            "missing_input",
        ),
        (
            json!({"bundled": "two_gate_cone", "observation": {}, "colour": 1}),
            400,
            "invalid_body",
        ),
    ];
    for (body, status, want) in cases {
        let (st, v) = call(&app, "POST", "/sessions", Some(body.clone())).await;
        assert_eq!((st.as_u16(), code(&v)), (status, want), "{body}");
        assert!(v["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
    let req = Request::post("/sessions").body(Body::from("{not json")).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    assert_eq!(res.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn measurement_errors_are_coded() {
    let app = app();
    let s = create(&app, two_gate()).await;
    let cases = [
        (json!({"wire": "Z", "value": 1}), 400, "unknown_wire"),
        (json!({"wire": "P", "value": 1}), 409, "already_known"),
        (json!({"wire": "J"}), 400, "missing_value"),
        (json!({"wire": "J", "value": 7}), 400, "invalid_bit"),
        (json!({"value": 1}), 400, "invalid_body"),
    ];
    for (body, status, want) in cases {
        let (st, v) = post(&app, &s.id, body.clone()).await;
        assert_eq!((st.as_u16(), code(&v)), (status, want), "{body}");
    }
    let (st, v) = post(&app, "missing", json!({"wire": "J", "value": 1})).await;
    assert_eq!((st, code(&v)), (StatusCode::NOT_FOUND, "not_found"));
}

#[tokio::test]
async fn implied_wires_are_already_known() {
    let app = app();
    // With at most one fault only {V}, {K} and {A} remain, so J, B, E and
    // D are healthy and their values follow from the inputs.
    let s = create(
        &app,
        json!({"bundled": "paperlike_fig1", "observation": {"P": 1, "Q": 1, "R": 0, "V": 1}, "mode": "flat", "k": 1}),
    )
    .await;
    assert_eq!(s.status, seqdiag::diagnose::Phase::Ready);
    let b = s.known.iter().find(|r| r.wire == "B").expect("B implied");
    assert_eq!(b.value, 0);
    assert!(s.measurements.is_empty());
    let (st, v) = post(&app, &s.id, json!({"wire": "B", "value": 0})).await;
    assert_eq!((st, code(&v)), (StatusCode::CONFLICT, "already_known"));
}

#[tokio::test]
async fn scripted_faults_answer_for_the_technician() {
    let app = app();
    let s = create(
        &app,
        json!({"bundled": "paperlike_fig1", "observation": {"P": 1, "Q": 1, "R": 0, "V": 1}, "faults": ["J", "B"], "mode": "hierarchical"}),
    )
    .await;
    assert!(s.scripted);
    let mut view = s.clone();
    while view.status == seqdiag::diagnose::Phase::Ready {
        let (_, p) = call(&app, "GET", &format!("/sessions/{}/proposal", s.id), None).await;
        assert!(p["simulated_value"].is_u64());
        let (st, v) = post(&app, &s.id, json!({"wire": p["wire"]})).await;
        assert_eq!(st, StatusCode::OK, "{v}");
        view = serde_json::from_value(v).unwrap();
    }
    assert_eq!(view.status, seqdiag::diagnose::Phase::Done);
    assert_eq!(view.faults, vec!["J", "B"]);
    assert_eq!(view.cost, 3);
}

/// Drives a session by answering every proposal from `answer`.
async fn run(app: &Router, body: Value, answer: impl Fn(&str) -> u8) -> (Vec<Value>, Report) {
    let s = create(app, body).await;
    let mut trace = vec![];
    loop {
        let (_, mut v) = call(app, "GET", &format!("/sessions/{}", s.id), None).await;
        for k in ["id", "created_at", "last_activity"] {
            v[k] = Value::Null;
        }
        let ready = v["status"] == "ready";
        trace.push(v);
        if !ready {
            break;
        }
        let (_, p) = call(app, "GET", &format!("/sessions/{}/proposal", s.id), None).await;
        let w = p["wire"].as_str().unwrap().to_string();
        trace.push(p);
        post(app, &s.id, json!({"wire": w, "value": answer(&w)})).await;
    }
    let (st, t) = call(app, "GET", &format!("/sessions/{}/transcript", s.id), None).await;
    assert_eq!(st, StatusCode::OK, "{t}");
    (trace, serde_json::from_value(t).unwrap())
}

#[tokio::test]
async fn sessions_replay_deterministically() {
    let body = json!({"bundled": "paperlike_fig1", "observation": {"P": 1, "Q": 1, "R": 0, "V": 1}, "heuristic": "ew"});
    let answer = |w: &str| u8::from(w != "D" && w != "K");
    let (a, ra) = run(&app(), body.clone(), answer).await;
    let (b, rb) = run(&app(), body, answer).await;
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    // The transcript reproduces through the batch engine.
    let problem = Problem::new(bundled::circuit("paperlike_fig1").unwrap(), ra.model.clone()).unwrap();
    let again = diagnose(&problem, &ra.run, &ra.observation, &mut ReplayOracle::from_report(&ra)).unwrap();
    assert_eq!(again, ra);
}

#[tokio::test]
async fn transcript_waits_for_the_end() {
    let app = app();
    let s = create(&app, two_gate()).await;
    let (st, v) = call(&app, "GET", &format!("/sessions/{}/transcript", s.id), None).await;
    assert_eq!((st, code(&v)), (StatusCode::CONFLICT, "busy"));
}

#[tokio::test]
async fn idle_sessions_expire() {
    let state = AppState::new(Config {
        idle: Duration::from_millis(100),
        ..Config::default()
    });
    let app = router(state.clone());
    let s = create(&app, two_gate()).await;
    let t = create(&app, two_gate()).await;
    tokio::time::sleep(Duration::from_millis(250)).await;
    let (st, v) = post(&app, &s.id, json!({"wire": "J", "value": 1})).await;
    assert_eq!((st, code(&v)), (StatusCode::NOT_FOUND, "not_found"));
    assert_eq!(state.sweep(), 1);
    assert!(state.is_empty());
    let (st, _) = call(&app, "GET", &format!("/sessions/{}", t.id), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn activity_keeps_sessions_alive() {
    let state = AppState::new(Config {
        idle: Duration::from_millis(300),
        ..Config::default()
    });
    let app = router(state.clone());
    let s = create(&app, two_gate()).await;
    for _ in 0..4 {
        tokio::time::sleep(Duration::from_millis(120)).await;
        let (st, _) = call(&app, "GET", &format!("/sessions/{}", s.id), None).await;
        assert_eq!(st, StatusCode::OK);
    }
}

#[tokio::test]
async fn delete_removes_the_session() {
    let app = app();
    let s = create(&app, two_gate()).await;
    let uri = format!("/sessions/{}", s.id);
    let (st, _) = call(&app, "DELETE", &uri, None).await;
    assert_eq!(st, StatusCode::NO_CONTENT);
    let (st, v) = call(&app, "GET", &uri, None).await;
    assert_eq!((st, code(&v)), (StatusCode::NOT_FOUND, "not_found"));
    let (st, _) = call(&app, "DELETE", &uri, None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn session_ids_are_distinct() {
    let app = app();
    let mut ids = std::collections::BTreeSet::new();
    for _ in 0..20 {
        ids.insert(create(&app, two_gate()).await.id);
    }
    assert_eq!(ids.len(), 20);
}

#[tokio::test]
async fn compiling_sessions_become_ready() {
    let app = router(AppState::new(Config {
        wait: Duration::ZERO,
        ..Config::default()
    }));
    let (st, v) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"bundled": "c432", "observation": observe_c432()})),
    )
    .await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    let id = v["id"].as_str().unwrap().to_string();
    let mut status = v["status"].as_str().unwrap().to_string();
    assert!(
        status == "compiling" || status == "ready" || status == "done",
        "{status}"
    );
    for _ in 0..600 {
        if status != "compiling" {
            break;
        }
        let (st, p) = call(&app, "GET", &format!("/sessions/{id}/proposal"), None).await;
        assert!(st == StatusCode::OK || code(&p) == "busy" || code(&p) == "done", "{p}");
        tokio::time::sleep(Duration::from_millis(50)).await;
        let (_, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
        status = v["status"].as_str().unwrap().to_string();
    }
    assert!(status == "ready" || status == "done", "{status}");
}

/// A faulty c432 observation: healthy inputs all zero, first output flipped.
fn observe_c432() -> Value {
    use seqdiag::diagnose::SimulationOracle;
    let c = bundled::circuit("c432").unwrap();
    let inputs = vec![false; c.inputs().len()];
    let healthy = SimulationOracle::new(&c, &[], &inputs).unwrap();
    let mut obs = serde_json::Map::new();
    for (w, b) in healthy.observation(&c) {
        obs.insert(w, json!(u8::from(b)));
    }
    let first = c.wire_name(c.outputs()[0]).to_string();
    let flipped = 1 - obs[&first].as_u64().unwrap();
    obs.insert(first, json!(flipped));
    Value::Object(obs)
}

#[tokio::test]
async fn circuits_are_listed_with_their_cones() {
    let app = app();
    let (st, v) = call(&app, "GET", "/circuits", None).await;
    assert_eq!(st, StatusCode::OK);
    let names: Vec<&str> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"paperlike_fig1"));
    assert!(names.contains(&"two_gate_cone"));
    let fig1 = v
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "paperlike_fig1")
        .unwrap();
    assert_eq!(
        (
            fig1["inputs"].as_u64(),
            fig1["outputs"].as_u64(),
            fig1["gates"].as_u64()
        ),
        (Some(3), Some(1), Some(7))
    );

    let (st, d) = call(&app, "GET", "/circuits/paperlike_fig3", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(d["abstraction"], json!(["B", "A", "D", "K", "V"]));
    let cones = d["cones"].as_array().unwrap();
    assert_eq!(cones.len(), 2);
    assert_eq!(
        (cones[0]["root"].as_str(), cones[0]["parent"].as_str()),
        (Some("A"), None)
    );
    assert_eq!(
        (cones[1]["root"].as_str(), cones[1]["parent"].as_str()),
        (Some("E"), Some("A"))
    );
    assert_eq!(d["bench"].as_str(), bundled::text("paperlike_fig3"));

    let (st, v) = call(&app, "GET", "/circuits/none", None).await;
    assert_eq!((st, code(&v)), (StatusCode::NOT_FOUND, "unknown_circuit"));
    let (st, v) = call(&app, "GET", "/nowhere", None).await;
    assert_eq!((st, code(&v)), (StatusCode::NOT_FOUND, "not_found"));
}

#[tokio::test]
async fn inline_sessions_expose_their_netlist() {
    let app = app();
    let bench = bundled::text("two_gate_cone").unwrap();
    let s = create(
        &app,
        json!({"bench": bench, "name": "demo", "observation": {"A": 1, "P": 1, "D": 1}}),
    )
    .await;
    assert_eq!(s.circuit, "demo");
    let (st, d) = call(&app, "GET", &format!("/sessions/{}/circuit", s.id), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(d["bench"], bench);
    assert_eq!(d["name"], "demo");
}
