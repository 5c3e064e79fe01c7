//! The diagnosis loops: a flat search over one compiled model, and the
//! hierarchical search that diagnoses the abstraction first and recurses
//! into every faulty cone.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    entropy, meets_criteria_flat, sig12, Answer, DiagnoseError, Heuristic, Mode, Model, Oracle, Problem, Proposal,
    Report, RunOptions, Snapshot, Status, Step, TIE_TOLERANCE,
};
use crate::abstraction::AbstractionView;
use crate::circuit::{Circuit, WireId};
use crate::compile::{reduce, Ddnnf, Evidence, Lit, Marginals, Var};
use crate::encode::GateMode;

/// Runs one session: flat diagnosis (the probabilistic sequential loop) or
/// hierarchical diagnosis, depending on the problem's mode.
pub fn diagnose(
    problem: &Problem,
    run: &RunOptions,
    observation: &[(String, bool)],
    oracle: &mut dyn Oracle,
) -> Result<Report, DiagnoseError> {
    let original = problem.original();
    let mut u = BTreeMap::new();
    for (w, b) in observation {
        let id = original.wire(w).ok_or_else(|| DiagnoseError::UnknownWire(w.clone()))?;
        if !original.is_input(id) && !original.is_output(id) {
            return Err(DiagnoseError::NotObservable(w.clone()));
        }
        u.insert(w.clone(), *b);
    }
    if let Some(&i) = original
        .inputs()
        .iter()
        .find(|&&i| !u.contains_key(original.wire_name(i)))
    {
        return Err(DiagnoseError::MissingInput(original.wire_name(i).into()));
    }
    let mut order: Vec<String> = (0..original.num_wires())
        .map(|w| original.wire_name(w).to_string())
        .collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(run.seed));
    let mut e = Engine {
        p: problem,
        run,
        oracle,
        order,
        known: BTreeMap::new(),
        facts: BTreeMap::new(),
        certified: Vec::new(),
        steps: Vec::new(),
        top_abstract: Vec::new(),
        deadline: run
            .time_limit_seconds
            .map(|s| Instant::now() + Duration::from_secs_f64(s)),
    };
    let result = match problem.options().mode {
        Mode::Flat => {
            let mut ctx = e.context(None, &u, run.bound)?;
            let mut b = Vec::new();
            e.psd(&mut ctx, &mut b, true)?
                .then(|| b.iter().map(|&g| ctx.sys.wire_name(g).to_string()).collect())
        }
        Mode::Hierarchical => e.hpsd(None, &u, run.bound)?.map(|(d, _)| d),
    };
    let status = if result.is_some() { Status::Done } else { Status::Stuck };
    let found = result.unwrap_or_else(|| e.certified.clone());
    let mut faults: Vec<String> = Vec::new();
    for f in &found {
        let o = problem.clones().original(f).to_string();
        if !faults.contains(&o) {
            faults.push(o);
        }
    }
    Ok(Report {
        circuit: original.name().to_string(),
        model: problem.options().clone(),
        run: run.clone(),
        observation: observation.to_vec(),
        cost: e.steps.len(),
        steps: e.steps,
        abstract_faults: e.top_abstract,
        faults,
        status,
    })
}

/// One (sub)system being diagnosed.
struct Ctx {
    scope: Option<String>,
    sys: Circuit,
    view: AbstractionView,
    model: Arc<Model>,
    /// Private copy of the compiled model (evaluation caches are mutable).
    base: Ddnnf,
    pruned: Option<Ddnnf>,
    /// Cleared when pruning made the known values impossible.
    prune: bool,
    bound: Option<u64>,
    comps: Vec<WireId>,
    candidate: Vec<bool>,
    /// Original name of every wire.
    orig: Vec<String>,
    y: BTreeMap<WireId, bool>,
    marg: Option<Marginals>,
}

impl Ctx {
    fn ok(&self, g: WireId) -> Var {
        self.model.enc.vars.ok_var(g).expect("health component")
    }

    fn marg(&self) -> &Marginals {
        self.marg.as_ref().expect("evaluated")
    }

    /// Measured or implied value.
    fn value(&self, w: WireId) -> Option<bool> {
        if let Some(&b) = self.y.get(&w) {
            return Some(b);
        }
        let v = self.model.enc.vars.wire_var(w) as Lit;
        let m = self.marg.as_ref()?;
        match (m.possible(v), m.possible(-v)) {
            (false, true) => Some(false),
            (true, false) => Some(true),
            _ => None,
        }
    }

    fn posterior(&self, v: Var) -> f64 {
        self.marg().posterior(v).unwrap_or(0.0)
    }

    fn failure(&self, g: WireId) -> f64 {
        1.0 - self.posterior(self.ok(g))
    }

    fn certain(&self, g: WireId) -> bool {
        let ok = self.ok(g) as Lit;
        !self.marg().possible(ok) || !self.marg().possible(-ok)
    }

    fn wire_entropy(&self, w: WireId) -> f64 {
        entropy(self.posterior(self.model.enc.vars.wire_var(w)))
    }

    fn is_cone(&self, g: WireId) -> bool {
        self.model.enc.vars.mode(g) == Some(GateMode::Cone)
    }
}

struct Engine<'a> {
    p: &'a Problem,
    run: &'a RunOptions,
    oracle: &'a mut dyn Oracle,
    /// Random measurement order over original wire names.
    order: Vec<String>,
    /// Every value measured in the session, by original name.
    known: BTreeMap<String, bool>,
    /// Certified health of original components.
    facts: BTreeMap<String, bool>,
    certified: Vec<String>,
    steps: Vec<Step>,
    top_abstract: Vec<String>,
    deadline: Option<Instant>,
}

/// Index of the largest score, ties (within tolerance) to the first.
fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if s <= scores[b] + TIE_TOLERANCE => {}
            _ => best = Some(i),
        }
    }
    best
}

impl<'a> Engine<'a> {
    fn context(
        &self,
        scope: Option<String>,
        u: &BTreeMap<String, bool>,
        bound: Option<u64>,
    ) -> Result<Ctx, DiagnoseError> {
        let (sys, view, model) = self.p.model(scope.as_deref(), u)?;
        let n = sys.num_wires();
        let mut candidate = vec![false; n];
        match self.p.options().mode {
            Mode::Flat => candidate.iter_mut().for_each(|c| *c = true),
            Mode::Hierarchical => {
                for &w in view.abstraction().iter().chain(sys.inputs()) {
                    candidate[w] = true;
                }
            }
        }
        let orig = (0..n)
            .map(|w| self.p.clones().original(sys.wire_name(w)).to_string())
            .collect();
        let y = u
            .iter()
            .filter_map(|(name, &b)| sys.wire(name).map(|w| (w, b)))
            .collect();
        Ok(Ctx {
            scope,
            base: model.ddnnf.clone(),
            comps: model.enc.vars.health_components(),
            sys,
            view,
            model,
            pruned: None,
            prune: bound.is_some(),
            bound,
            candidate,
            orig,
            y,
            marg: None,
        })
    }

    fn evidence(&self, ctx: &Ctx) -> Evidence {
        let values: Vec<(WireId, bool)> = ctx.y.iter().map(|(&w, &b)| (w, b)).collect();
        let mut e = ctx.model.enc.wire_evidence(&values);
        for &g in &ctx.comps {
            if ctx.model.enc.vars.mode(g) == Some(GateMode::Normal) {
                if let Some(&s) = self.facts.get(&ctx.orig[g]) {
                    e.set(ctx.ok(g), s);
                }
            }
        }
        e
    }

    fn check_deadline(&self) -> Result<(), DiagnoseError> {
        match self.deadline {
            Some(d) if Instant::now() > d => Err(DiagnoseError::TimeLimit),
            _ => Ok(()),
        }
    }

    /// Evaluates and differentiates the current model under the known values.
    fn evaluate(&self, ctx: &mut Ctx) -> Result<(), DiagnoseError> {
        let e = self.evidence(ctx);
        loop {
            let w = &ctx.model.enc.weights;
            let d = ctx.pruned.as_mut().unwrap_or(&mut ctx.base);
            d.evaluate(w, &e);
            let m = d.differentiate()?;
            if m.total_count > 0 {
                ctx.marg = Some(m);
                return Ok(());
            }
            if ctx.pruned.is_none() {
                return Err(DiagnoseError::Inconsistent);
            }
            // The bound excluded the actual faults; fall back to the full model.
            ctx.pruned = None;
            ctx.prune = false;
        }
    }

    /// Prunes models with more than `k - |D|` faults outside `D`.
    fn reduce(&self, ctx: &mut Ctx, d: &[WireId]) {
        let Some(k) = ctx.bound.filter(|_| ctx.prune) else {
            return;
        };
        let health: Vec<Var> = ctx.comps.iter().map(|&g| ctx.ok(g)).collect();
        let exempt: Vec<Var> = d.iter().map(|&g| ctx.ok(g)).collect();
        let bound = k.saturating_sub(d.len() as u64);
        let current = ctx.pruned.as_ref().unwrap_or(&ctx.base);
        match reduce(current, &health, &exempt, bound) {
            Ok(r) => ctx.pruned = Some(r),
            Err(_) => {
                ctx.pruned = None;
                ctx.prune = false;
            }
        }
    }

    /// Adds newly certified faults to `d` and records certified health
    /// states. Returns (D changed, a clone sibling needs the new evidence).
    fn certify(&mut self, ctx: &Ctx, d: &mut Vec<WireId>) -> (bool, bool) {
        let (mut changed, mut refresh) = (false, false);
        for &g in &ctx.comps {
            let ok = ctx.ok(g) as Lit;
            let (pos, neg) = (ctx.marg().possible(ok), ctx.marg().possible(-ok));
            if !pos && !d.contains(&g) {
                d.push(g);
                changed = true;
            }
            if ctx.model.enc.vars.mode(g) != Some(GateMode::Normal) {
                continue;
            }
            let state = if !pos {
                Some(false)
            } else if !neg {
                Some(true)
            } else {
                None
            };
            let name = &ctx.orig[g];
            if let Some(s) = state.filter(|_| !self.facts.contains_key(name)) {
                self.facts.insert(name.clone(), s);
                if !s {
                    self.certified.push(name.clone());
                }
                refresh |= ctx.comps.iter().any(|&h| h != g && ctx.orig[h] == *name);
            }
        }
        (changed, refresh)
    }

    /// Cone diagnoses do not conclude before all cone inputs are known,
    /// unless every member's health is already certain.
    fn complete(&self, ctx: &Ctx) -> bool {
        ctx.scope.is_none()
            || ctx.sys.inputs().iter().all(|&i| ctx.value(i).is_some())
            || ctx.comps.iter().all(|&g| ctx.certain(g))
    }

    /// Reuses values measured elsewhere in the session on candidate wires.
    fn sync_known(&self, ctx: &mut Ctx) {
        for w in 0..ctx.sys.num_wires() {
            if ctx.candidate[w] && !ctx.y.contains_key(&w) {
                if let Some(&b) = self.known.get(&ctx.orig[w]) {
                    ctx.y.insert(w, b);
                }
            }
        }
    }

    fn unknown(&self, ctx: &Ctx, w: WireId) -> bool {
        ctx.candidate[w] && ctx.value(w).is_none() && !self.known.contains_key(&ctx.orig[w])
    }

    fn proposal(&self, ctx: &Ctx, w: WireId, component: Option<(WireId, f64)>) -> Proposal {
        Proposal {
            wire: ctx.sys.wire_name(w).to_string(),
            measure: ctx.orig[w].clone(),
            entropy: sig12(ctx.wire_entropy(w)),
            component: component.map(|(g, _)| ctx.sys.wire_name(g).to_string()),
            component_posterior: component.map(|(_, p)| sig12(p)),
        }
    }

    /// Highest-entropy unknown wire among `wires` (ascending ids).
    fn best_wire(&self, ctx: &Ctx, wires: impl IntoIterator<Item = WireId>) -> Option<WireId> {
        let ws: Vec<WireId> = wires.into_iter().filter(|&w| self.unknown(ctx, w)).collect();
        let scores: Vec<f64> = ws.iter().map(|&w| ctx.wire_entropy(w)).collect();
        argmax(&scores).map(|i| ws[i])
    }

    /// Variables of a component: its inputs (a cone's inputs when it
    /// stands for a cone) and its output; inside a cone also the cone inputs.
    fn component_vars(&self, ctx: &Ctx, g: WireId) -> Vec<WireId> {
        let mut vs: Vec<WireId> = if ctx.is_cone(g) {
            ctx.view.cone_inputs(g).to_vec()
        } else {
            ctx.sys.gate(g).map(|x| x.fanin.clone()).unwrap_or_default()
        };
        vs.push(g);
        if ctx.scope.is_some() {
            vs.extend_from_slice(ctx.sys.inputs());
        }
        vs.sort_unstable();
        vs.dedup();
        vs
    }

    fn propose(&self, ctx: &Ctx) -> Option<Proposal> {
        let all = 0..ctx.sys.num_wires();
        match self.run.heuristic {
            Heuristic::Ew => self.best_wire(ctx, all).map(|w| self.proposal(ctx, w, None)),
            Heuristic::Random => self.order.iter().find_map(|name| {
                (0..ctx.sys.num_wires())
                    .find(|&w| ctx.orig[w] == *name && self.unknown(ctx, w))
                    .map(|w| self.proposal(ctx, w, None))
            }),
            Heuristic::Fp => {
                let mut pool: Vec<(WireId, f64)> = ctx
                    .comps
                    .iter()
                    .filter(|&&g| !ctx.certain(g))
                    .map(|&g| (g, ctx.failure(g)))
                    .collect();
                while let Some(i) = argmax(&pool.iter().map(|x| x.1).collect::<Vec<_>>()) {
                    let (g, pf) = pool.remove(i);
                    if let Some(w) = self.best_wire(ctx, self.component_vars(ctx, g)) {
                        return Some(self.proposal(ctx, w, Some((g, pf))));
                    }
                }
                self.best_wire(ctx, all).map(|w| self.proposal(ctx, w, None))
            }
        }
    }

    fn snapshot(&self, ctx: &Ctx) -> Snapshot {
        let mut known = BTreeMap::new();
        let mut candidates = BTreeSet::new();
        for w in 0..ctx.sys.num_wires() {
            if !ctx.candidate[w] {
                continue;
            }
            match ctx.value(w).or_else(|| self.known.get(&ctx.orig[w]).copied()) {
                Some(b) => {
                    known.insert(ctx.orig[w].clone(), b);
                }
                None => {
                    candidates.insert(ctx.orig[w].clone());
                }
            }
        }
        let mut faults: Vec<String> = Vec::new();
        for f in &self.certified {
            if !faults.contains(f) {
                faults.push(f.clone());
            }
        }
        Snapshot {
            scope: ctx.scope.clone(),
            failure_posteriors: ctx
                .comps
                .iter()
                .map(|&g| (ctx.sys.wire_name(g).to_string(), sig12(ctx.failure(g))))
                .collect(),
            known: known.into_iter().collect(),
            candidates: candidates.into_iter().collect(),
            faults,
            cost: self.steps.len(),
        }
    }

    /// Asks the oracle and records the answer on every copy of the wire.
    fn measure(&mut self, ctx: &mut Ctx, proposal: Proposal) -> Result<(), DiagnoseError> {
        let snap = self.snapshot(ctx);
        let Answer { wire, value } = self.oracle.answer(&proposal, &snap)?;
        if self.p.original().wire(&wire).is_none() {
            return Err(DiagnoseError::UnknownWire(wire));
        }
        let copies: Vec<WireId> = (0..ctx.sys.num_wires()).filter(|&w| ctx.orig[w] == wire).collect();
        if !copies.iter().any(|&w| self.unknown(ctx, w)) {
            return Err(
                if snap.known.iter().any(|(w, _)| *w == wire) || self.known.contains_key(&wire) {
                    DiagnoseError::AlreadyKnown(wire)
                } else {
                    DiagnoseError::NotCandidate(wire)
                },
            );
        }
        for w in copies {
            ctx.y.insert(w, value);
        }
        self.known.insert(wire.clone(), value);
        self.steps.push(Step {
            scope: ctx.scope.clone(),
            proposal,
            wire,
            value,
            posteriors: snap.failure_posteriors,
        });
        Ok(())
    }

    /// The probabilistic sequential loop on one compiled model. `d` holds
    /// the faults certified so far. With `initial` the stopping test runs
    /// before any measurement (covering normal and already-explained
    /// observations); otherwise at least one new fact is required first.
    /// Returns false when no candidate is left.
    fn psd(&mut self, ctx: &mut Ctx, d: &mut Vec<WireId>, initial: bool) -> Result<bool, DiagnoseError> {
        let mut reduce_due = true;
        let mut first = true;
        let mut pending = false;
        loop {
            self.check_deadline()?;
            self.sync_known(ctx);
            if reduce_due {
                self.reduce(ctx, d);
                reduce_due = false;
            }
            self.evaluate(ctx)?;
            let (changed, refresh) = self.certify(ctx, d);
            if changed {
                reduce_due = true;
                pending = true;
            }
            if refresh {
                continue;
            }
            let check = pending || (first && initial) || (!first && ctx.scope.is_some());
            first = false;
            if check {
                pending = false;
                if self.complete(ctx) {
                    let e = self.evidence(ctx);
                    if meets_criteria_flat(&mut ctx.base, &ctx.model.enc, d, &e) {
                        return Ok(true);
                    }
                }
            }
            let Some(proposal) = self.propose(ctx) else {
                return Ok(false);
            };
            self.measure(ctx, proposal)?;
        }
    }

    /// Hierarchical diagnosis of the system rooted at `scope` given its
    /// boundary values `u`. Returns the concrete faults and the updated
    /// boundary values, or `None` when stuck.
    #[allow(clippy::type_complexity)]
    fn hpsd(
        &mut self,
        scope: Option<String>,
        u: &BTreeMap<String, bool>,
        k: Option<u64>,
    ) -> Result<Option<(Vec<String>, BTreeMap<String, bool>)>, DiagnoseError> {
        let mut ctx = self.context(scope, u, k)?;
        let mut b: Vec<WireId> = Vec::new();
        let mut d: Vec<String> = Vec::new();
        let mut i = 0;
        let mut initial = true;
        loop {
            if !self.psd(&mut ctx, &mut b, initial)? {
                return Ok(None);
            }
            initial = false;
            if ctx.scope.is_none() {
                self.top_abstract = b.iter().map(|&g| ctx.sys.wire_name(g).to_string()).collect();
            }
            while i < b.len() {
                let g = b[i];
                let name = ctx.sys.wire_name(g).to_string();
                if ctx.is_cone(g) {
                    if ctx.value(g).is_none() && !self.known.contains_key(&ctx.orig[g]) {
                        // The cone's own output anchors its diagnosis.
                        let p = self.proposal(&ctx, g, Some((g, ctx.failure(g))));
                        self.measure(&mut ctx, p)?;
                        self.evaluate(&mut ctx)?;
                    }
                    self.sync_known(&mut ctx);
                    let mut u_g = BTreeMap::new();
                    for &w in ctx.view.cone_inputs(g).iter().chain([g].iter()) {
                        if let Some(v) = ctx.value(w).or_else(|| self.known.get(&ctx.orig[w]).copied()) {
                            u_g.insert(ctx.sys.wire_name(w).to_string(), v);
                        }
                    }
                    let k_g = k.map(|k| {
                        let k = k as i64;
                        (k - d.len() as i64 - b.len() as i64 + i as i64 + 2).clamp(0, k) as u64
                    });
                    let Some((t, u_out)) = self.hpsd(Some(name), &u_g, k_g)? else {
                        return Ok(None);
                    };
                    for (n, v) in u_out {
                        if let Some(w) = ctx.sys.wire(&n) {
                            ctx.y.insert(w, v);
                        }
                    }
                    for f in t {
                        if !d.contains(&f) {
                            d.push(f);
                        }
                    }
                    self.evaluate(&mut ctx)?;
                } else if !d.contains(&name) {
                    d.push(name);
                }
                i += 1;
            }
            let mut u_out = u.clone();
            for &w in ctx.sys.inputs().iter().chain(ctx.sys.outputs()) {
                if let Some(v) = ctx.value(w) {
                    u_out.insert(ctx.sys.wire_name(w).to_string(), v);
                }
            }
            if self.meets_sim(&ctx, &d)? {
                return Ok(Some((d, u_out)));
            }
        }
    }

    /// Simulation check of `d` (closed under cloning) on the scope's system.
    fn meets_sim(&self, ctx: &Ctx, d: &[String]) -> Result<bool, DiagnoseError> {
        let originals: BTreeSet<&str> = d.iter().map(|n| self.p.clones().original(n)).collect();
        let faults: Vec<WireId> = ctx
            .sys
            .gate_ids()
            .into_iter()
            .filter(|&g| originals.contains(ctx.orig[g].as_str()))
            .collect();
        let mut y = Vec::new();
        for &w in ctx.sys.inputs().iter().chain(ctx.sys.outputs()) {
            if let Some(v) = ctx.value(w) {
                y.push((w, v));
            }
        }
        if ctx.sys.inputs().iter().any(|&i| ctx.value(i).is_none()) {
            // Only reachable through the certain-health exception.
            return Ok(ctx.comps.iter().all(|&g| ctx.certain(g)));
        }
        super::meets_criteria_sim(&ctx.sys, &faults, &y)
    }
}
