//! Sessions answered asynchronously: the diagnosis loop runs on its own
//! thread and blocks on a channel whenever it needs a measurement.

use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{diagnose, Answer, DiagnoseError, Oracle, Problem, Proposal, Report, RunOptions, Snapshot, Status};
use crate::circuit::Circuit;
use crate::diagnose::ModelOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Compiling or reasoning; no proposal yet.
    Compiling,
    /// Waiting for a measurement.
    Ready,
    Done,
    Stuck,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiveState {
    pub phase: Phase,
    pub proposal: Option<Proposal>,
    pub snapshot: Snapshot,
    pub measurements: Vec<(String, bool)>,
    pub report: Option<Report>,
    /// (code, message) when the session failed.
    pub error: Option<(String, String)>,
}

enum Event {
    Proposal(Proposal, Snapshot),
    Finished(Result<Report, DiagnoseError>),
}

struct ChannelOracle {
    events: Sender<Event>,
    answers: Receiver<Answer>,
}

impl Oracle for ChannelOracle {
    fn answer(&mut self, p: &Proposal, s: &Snapshot) -> Result<Answer, DiagnoseError> {
        self.events
            .send(Event::Proposal(p.clone(), s.clone()))
            .map_err(|_| DiagnoseError::Oracle("session closed".into()))?;
        self.answers
            .recv()
            .map_err(|_| DiagnoseError::Oracle("session closed".into()))
    }
}

/// A diagnosis session driven by externally supplied measurements.
/// Dropping it stops the worker at its next question.
pub struct LiveSession {
    state: LiveState,
    answers: Sender<Answer>,
    events: Receiver<Event>,
}

impl LiveSession {
    /// Builds the problem and runs the session on a worker thread.
    pub fn spawn(
        original: Circuit,
        model: ModelOptions,
        run: RunOptions,
        observation: Vec<(String, bool)>,
    ) -> LiveSession {
        Self::launch(move |oracle| {
            let problem = Problem::new(original, model)?;
            diagnose(&problem, &run, &observation, oracle)
        })
    }

    /// Runs a session on an already prepared problem.
    pub fn start(problem: Arc<Problem>, run: RunOptions, observation: Vec<(String, bool)>) -> LiveSession {
        Self::launch(move |oracle| diagnose(&problem, &run, &observation, oracle))
    }

    fn launch<F>(job: F) -> LiveSession
    where
        F: FnOnce(&mut dyn Oracle) -> Result<Report, DiagnoseError> + Send + 'static,
    {
        let (ev_tx, ev_rx) = channel();
        let (ans_tx, ans_rx) = channel();
        std::thread::Builder::new()
            .name("diagnosis".into())
            .spawn(move || {
                let mut oracle = ChannelOracle {
                    events: ev_tx.clone(),
                    answers: ans_rx,
                };
                let result = job(&mut oracle);
                let _ = ev_tx.send(Event::Finished(result));
            })
            .expect("spawn diagnosis thread");
        LiveSession {
            state: LiveState {
                phase: Phase::Compiling,
                proposal: None,
                snapshot: Snapshot::default(),
                measurements: Vec::new(),
                report: None,
                error: None,
            },
            answers: ans_tx,
            events: ev_rx,
        }
    }

    pub fn state(&self) -> &LiveState {
        &self.state
    }

    fn apply(&mut self, ev: Event) {
        match ev {
            Event::Proposal(p, s) => {
                self.state.phase = Phase::Ready;
                self.state.proposal = Some(p);
                self.state.snapshot = s;
            }
            Event::Finished(Ok(r)) => {
                self.state.phase = match r.status {
                    Status::Done => Phase::Done,
                    Status::Stuck => Phase::Stuck,
                };
                self.state.proposal = None;
                self.state.snapshot.faults = r.faults.clone();
                self.state.snapshot.cost = r.cost;
                self.state.report = Some(r);
            }
            Event::Finished(Err(e)) => {
                self.state.phase = Phase::Failed;
                self.state.proposal = None;
                self.state.error = Some((e.code().into(), e.to_string()));
            }
        }
    }

    /// Blocks up to `timeout` for the worker to reach its next question or
    /// finish.
    pub fn wait(&mut self, timeout: Duration) -> &LiveState {
        if self.state.phase == Phase::Compiling {
            match self.events.recv_timeout(timeout) {
                Ok(ev) => self.apply(ev),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    self.state.phase = Phase::Failed;
                    self.state.error = Some(("internal".into(), "diagnosis worker stopped".into()));
                }
            }
        }
        &self.state
    }

    /// Checks a measurement against the current question without sending it.
    pub fn validate(&self, wire: &str) -> Result<(), DiagnoseError> {
        match self.state.phase {
            Phase::Ready => {}
            Phase::Compiling => return Err(DiagnoseError::Busy),
            _ => return Err(DiagnoseError::Finished),
        }
        let s = &self.state.snapshot;
        if s.known.iter().any(|(w, _)| w == wire) || self.state.measurements.iter().any(|(w, _)| w == wire) {
            return Err(DiagnoseError::AlreadyKnown(wire.into()));
        }
        if !s.candidates.iter().any(|w| w == wire) {
            return Err(DiagnoseError::NotCandidate(wire.into()));
        }
        Ok(())
    }

    /// Sends a measured value (any legal candidate, not only the proposal)
    /// and waits up to `timeout` for the next question.
    pub fn submit(&mut self, wire: &str, value: bool, timeout: Duration) -> Result<&LiveState, DiagnoseError> {
        self.validate(wire)?;
        self.answers
            .send(Answer {
                wire: wire.to_string(),
                value,
            })
            .map_err(|_| DiagnoseError::Oracle("diagnosis worker stopped".into()))?;
        self.state.measurements.push((wire.to_string(), value));
        self.state.phase = Phase::Compiling;
        self.state.snapshot.cost = self.state.measurements.len();
        Ok(self.wait(timeout))
    }
}
