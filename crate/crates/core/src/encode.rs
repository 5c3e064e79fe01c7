//! Weighted propositional encodings of circuits.
//!
//! Every wire gets a variable. A gate carrying a health variable `ok`
//! behaves normally when `ok` holds; a broken gate outputs its `theta`
//! variable, a broken cone outputs the complement of its healthy value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{cone_subsystem, AbstractionError, AbstractionView};
use crate::circuit::{Circuit, GateKind, WireId};
use crate::compile::{self, Cnf, CompileError, Evidence, Lit, Var, Weights};

/// Gate fan-in above which a gate is split into a tree of auxiliary gates.
pub const MAX_DIRECT_FANIN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("no prior for cone `{0}`")]
    MissingConePrior(String),
    #[error("invalid model parameter: {0}")]
    Params(String),
    #[error(transparent)]
    Abstraction(#[from] AbstractionError),
    #[error(transparent)]
    Compile(#[from] CompileError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VarRole {
    Input,
    Wire,
    Ok,
    Theta,
    Aux,
}

/// How a gate enters the encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateMode {
    /// Always behaves normally; no health variable.
    Healthy,
    /// Health variable plus a free output when broken.
    Normal,
    /// Cone root: health variable, inverted output when broken.
    Cone,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub healthy_prior: f64,
    pub broken_high: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            healthy_prior: 0.9,
            broken_high: 0.5,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), EncodeError> {
        for (name, p) in [("healthy prior", self.healthy_prior), ("broken-high", self.broken_high)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(EncodeError::Params(format!("{name} {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Failure probability per cone root, keyed by wire name so the same map
/// serves a circuit and its cone subsystems.
pub type ConePriors = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct VarTable {
    /// (role, owning wire) per variable; index 0 is unused.
    info: Vec<(VarRole, WireId)>,
    wire: Vec<Var>,
    ok: Vec<Option<Var>>,
    theta: Vec<Option<Var>>,
    modes: Vec<Option<GateMode>>,
}

impl VarTable {
    pub fn num_vars(&self) -> u32 {
        (self.info.len() - 1) as u32
    }

    pub fn role(&self, v: Var) -> VarRole {
        self.info[v as usize].0
    }

    pub fn owner(&self, v: Var) -> WireId {
        self.info[v as usize].1
    }

    pub fn wire_var(&self, w: WireId) -> Var {
        self.wire[w]
    }

    pub fn ok_var(&self, g: WireId) -> Option<Var> {
        self.ok.get(g).copied().flatten()
    }

    pub fn theta_var(&self, g: WireId) -> Option<Var> {
        self.theta.get(g).copied().flatten()
    }

    pub fn mode(&self, g: WireId) -> Option<GateMode> {
        self.modes.get(g).copied().flatten()
    }

    /// Gates carrying a health variable, ascending ids.
    pub fn health_components(&self) -> Vec<WireId> {
        (0..self.ok.len()).filter(|&g| self.ok[g].is_some()).collect()
    }

    pub fn ok_vars(&self) -> Vec<Var> {
        self.ok.iter().flatten().copied().collect()
    }

    /// Wire owning a wire or input variable.
    pub fn wire_of(&self, v: Var) -> Option<WireId> {
        match self.role(v) {
            VarRole::Wire | VarRole::Input => Some(self.owner(v)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedCnf {
    pub cnf: Cnf,
    pub vars: VarTable,
    pub weights: Weights,
}

impl WeightedCnf {
    /// Evidence fixing the given wires.
    pub fn wire_evidence(&self, values: &[(WireId, bool)]) -> Evidence {
        let mut e = Evidence::new(self.cnf.num_vars);
        for &(w, b) in values {
            e.set(self.vars.wire_var(w), b);
        }
        e
    }
}

struct Encoder {
    clauses: Vec<Vec<Lit>>,
    info: Vec<(VarRole, WireId)>,
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl Encoder {
    fn new() -> Encoder {
        Encoder {
            clauses: Vec::new(),
            info: vec![(VarRole::Aux, usize::MAX)],
            pos: vec![1.0],
            neg: vec![1.0],
        }
    }

    fn var(&mut self, role: VarRole, owner: WireId, pos: f64, neg: f64) -> Var {
        self.info.push((role, owner));
        self.pos.push(pos);
        self.neg.push(neg);
        (self.info.len() - 1) as Var
    }

    fn push(&mut self, guard: Option<Lit>, lits: &[Lit]) {
        let mut clause: Vec<Lit> = guard.map(|g| -g).into_iter().chain(lits.iter().copied()).collect();
        clause.sort_unstable_by_key(|l| (l.unsigned_abs(), *l < 0));
        clause.dedup();
        if clause.windows(2).any(|w| w[0] == -w[1]) {
            return;
        }
        self.clauses.push(clause);
    }

    /// `guard -> (out <-> kind(fanin))`.
    fn define(&mut self, guard: Option<Lit>, out: Lit, kind: GateKind, fanin: &[Lit], owner: WireId) {
        let (core, negate) = kind.decompose();
        let y = if negate { -out } else { out };
        let ops: Vec<Lit> = if fanin.len() > MAX_DIRECT_FANIN {
            let (a, b) = fanin.split_at(fanin.len() / 2);
            vec![self.group(core, a, owner), self.group(core, b, owner)]
        } else {
            fanin.to_vec()
        };
        match core {
            GateKind::And => {
                for &x in &ops {
                    self.push(guard, &[-y, x]);
                }
                let mut big: Vec<Lit> = ops.iter().map(|&x| -x).collect();
                big.push(y);
                self.push(guard, &big);
            }
            GateKind::Or => {
                for &x in &ops {
                    self.push(guard, &[y, -x]);
                }
                let mut big = ops.clone();
                big.push(-y);
                self.push(guard, &big);
            }
            GateKind::Xor => {
                for mask in 0u32..(1 << ops.len()) {
                    let mut clause: Vec<Lit> = ops
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| if mask >> i & 1 == 1 { -x } else { x })
                        .collect();
                    clause.push(if mask.count_ones() % 2 == 1 { y } else { -y });
                    self.push(guard, &clause);
                }
            }
            _ => {
                self.push(guard, &[-y, ops[0]]);
                self.push(guard, &[y, -ops[0]]);
            }
        }
    }

    /// Literal equal to `core` over `lits`, introducing auxiliary gates.
    fn group(&mut self, core: GateKind, lits: &[Lit], owner: WireId) -> Lit {
        if lits.len() == 1 {
            return lits[0];
        }
        let a = self.var(VarRole::Aux, owner, 1.0, 1.0) as Lit;
        self.define(None, a, core, lits, owner);
        a
    }

    /// Encodes `c` with one mode per gate. Input variables are shared when
    /// `inputs` is given (in `c.inputs()` order). Returns the wire variables
    /// and the per-gate ok and theta variables.
    #[allow(clippy::type_complexity)]
    fn circuit(
        &mut self,
        c: &Circuit,
        modes: &[Option<GateMode>],
        params: &ModelParams,
        priors: &ConePriors,
        inputs: Option<&[Var]>,
    ) -> Result<(Vec<Var>, Vec<Option<Var>>, Vec<Option<Var>>), EncodeError> {
        let n = c.num_wires();
        let mut wire = vec![0; n];
        let mut shared_of: Vec<Option<Var>> = vec![None; n];
        if let Some(vars) = inputs {
            for (&w, &v) in c.inputs().iter().zip(vars) {
                shared_of[w] = Some(v);
            }
        }
        for w in 0..n {
            wire[w] = if c.is_input(w) {
                match shared_of[w] {
                    Some(v) => v,
                    None => self.var(VarRole::Input, w, 0.5, 0.5),
                }
            } else {
                self.var(VarRole::Wire, w, 1.0, 1.0)
            };
        }
        let mut ok = vec![None; n];
        let mut theta = vec![None; n];
        for w in 0..n {
            match modes[w] {
                Some(GateMode::Normal) => {
                    let h = params.healthy_prior;
                    ok[w] = Some(self.var(VarRole::Ok, w, h, 1.0 - h));
                    let b = params.broken_high;
                    theta[w] = Some(self.var(VarRole::Theta, w, b, 1.0 - b));
                }
                Some(GateMode::Cone) => {
                    let name = c.wire_name(w);
                    let p = *priors
                        .get(name)
                        .ok_or_else(|| EncodeError::MissingConePrior(name.to_string()))?;
                    ok[w] = Some(self.var(VarRole::Ok, w, 1.0 - p, p));
                }
                _ => {}
            }
        }
        for g in c.gates() {
            let out = wire[g.output] as Lit;
            let fanin: Vec<Lit> = g.fanin.iter().map(|&f| wire[f] as Lit).collect();
            match modes[g.output].unwrap_or(GateMode::Healthy) {
                GateMode::Healthy => self.define(None, out, g.kind, &fanin, g.output),
                GateMode::Normal => {
                    let okv = ok[g.output].unwrap() as Lit;
                    let th = theta[g.output].unwrap() as Lit;
                    self.define(Some(okv), out, g.kind, &fanin, g.output);
                    self.push(Some(-okv), &[-out, th]);
                    self.push(Some(-okv), &[out, -th]);
                }
                GateMode::Cone => {
                    let okv = ok[g.output].unwrap() as Lit;
                    self.define(Some(okv), out, g.kind, &fanin, g.output);
                    self.define(Some(-okv), -out, g.kind, &fanin, g.output);
                }
            }
        }
        Ok((wire, ok, theta))
    }

    fn finish(self, table: VarTable) -> WeightedCnf {
        let num_vars = (self.info.len() - 1) as u32;
        let mut weights = Weights::uniform(num_vars);
        for v in 1..=num_vars {
            weights.set(v, self.pos[v as usize], self.neg[v as usize]);
        }
        WeightedCnf {
            cnf: Cnf {
                num_vars,
                clauses: self.clauses,
            },
            vars: VarTable {
                info: self.info,
                ..table
            },
            weights,
        }
    }
}

/// Mode of every gate under `view`: abstraction members carry health,
/// active cone roots among them fail by inversion, the rest are healthy.
pub fn gate_modes(c: &Circuit, view: &AbstractionView) -> Vec<Option<GateMode>> {
    let mut modes = vec![None; c.num_wires()];
    for g in c.gate_ids() {
        modes[g] = Some(GateMode::Healthy);
    }
    for &g in view.abstraction() {
        modes[g] = Some(if view.is_cone(g) && view.whole_root() != Some(g) {
            GateMode::Cone
        } else {
            GateMode::Normal
        });
    }
    modes
}

pub fn encode_with_modes(
    c: &Circuit,
    modes: &[Option<GateMode>],
    params: &ModelParams,
    priors: &ConePriors,
) -> Result<WeightedCnf, EncodeError> {
    params.validate()?;
    let mut enc = Encoder::new();
    let (wire, ok, theta) = enc.circuit(c, modes, params, priors, None)?;
    Ok(enc.finish(VarTable {
        info: Vec::new(),
        wire,
        ok,
        theta,
        modes: modes.to_vec(),
    }))
}

/// Every gate carries a health variable.
pub fn encode_flat(c: &Circuit, params: &ModelParams) -> Result<WeightedCnf, EncodeError> {
    let mut modes = vec![None; c.num_wires()];
    for g in c.gate_ids() {
        modes[g] = Some(GateMode::Normal);
    }
    encode_with_modes(c, &modes, params, &ConePriors::new())
}

/// Health variables only on abstraction members; cone roots use `priors`.
pub fn encode_abstraction(
    c: &Circuit,
    view: &AbstractionView,
    params: &ModelParams,
    priors: &ConePriors,
) -> Result<WeightedCnf, EncodeError> {
    encode_with_modes(c, &gate_modes(c, view), params, priors)
}

/// Probability that the cone rooted at `root` outputs a wrong value under
/// uniformly random inputs. Inner cones take their priors from `inner`.
pub fn cone_prior(
    c: &Circuit,
    view: &AbstractionView,
    root: WireId,
    params: &ModelParams,
    inner: &ConePriors,
) -> Result<f64, EncodeError> {
    params.validate()?;
    let sub = cone_subsystem(c, view, root)?;
    let sub_view = view.restrict(c, &sub);
    let mut enc = Encoder::new();
    let (faulty, _, _) = enc.circuit(&sub, &gate_modes(&sub, &sub_view), params, inner, None)?;
    let inputs: Vec<Var> = sub.inputs().iter().map(|&w| faulty[w]).collect();
    let healthy_modes: Vec<Option<GateMode>> = (0..sub.num_wires())
        .map(|w| sub.is_gate(w).then_some(GateMode::Healthy))
        .collect();
    let (healthy, _, _) = enc.circuit(&sub, &healthy_modes, params, inner, Some(&inputs))?;
    let out = sub.outputs()[0];
    let x = enc.var(VarRole::Aux, out, 1.0, 1.0);
    enc.define(
        None,
        x as Lit,
        GateKind::Xor,
        &[faulty[out] as Lit, healthy[out] as Lit],
        out,
    );
    let w = enc.finish(VarTable {
        info: Vec::new(),
        wire: faulty,
        ok: Vec::new(),
        theta: Vec::new(),
        modes: Vec::new(),
    });
    let mut d = compile::compile(&w.cnf)?;
    let mut e = Evidence::new(w.cnf.num_vars);
    e.set(x, true);
    Ok(d.evaluate(&w.weights, &e).clamp(0.0, 1.0))
}

/// Priors of every active cone of `view`, inner cones first.
pub fn cone_priors(c: &Circuit, view: &AbstractionView, params: &ModelParams) -> Result<ConePriors, EncodeError> {
    let mut roots = view.all_cones();
    roots.sort_by_key(|&g| (view.members(g).len(), g));
    let mut priors = ConePriors::new();
    for g in roots {
        let p = cone_prior(c, view, g, params, &priors)?;
        priors.insert(c.wire_name(g).to_string(), p);
    }
    Ok(priors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::abstraction;
    use crate::bundled;
    use crate::circuit::parse_bench;
    use crate::testutil::{brute_force, satisfies};

    #[test]
    fn not_gate_encoding() {
        let c = parse_bench("INPUT(p)\nOUTPUT(j)\nj = NOT(p)").unwrap();
        let w = encode_flat(&c, &ModelParams::default()).unwrap();
        assert_eq!(w.cnf.num_vars, 4);
        let (p, j) = (w.vars.wire_var(0) as Lit, w.vars.wire_var(1) as Lit);
        let ok = w.vars.ok_var(1).unwrap() as Lit;
        let th = w.vars.theta_var(1).unwrap() as Lit;
        assert_eq!(w.vars.role(ok as Var), VarRole::Ok);
        // Models: ok -> j = !p, !ok -> j = theta.
        for bits in 0u32..16 {
            let val = |l: Lit| bits >> (l.unsigned_abs() - 1) & 1 == 1;
            let expect = if val(ok) { val(j) != val(p) } else { val(j) == val(th) };
            assert_eq!(satisfies(&w.cnf, bits as u64), expect);
        }
    }

    #[test]
    fn normalized_without_evidence() {
        let c = bundled::circuit("two_gate_cone").unwrap();
        let w = encode_flat(&c, &ModelParams::default()).unwrap();
        let (total, _) = brute_force(&w.cnf, &w.weights, &Evidence::new(w.cnf.num_vars));
        assert!((total - 1.0).abs() < 1e-12);
        for name in ["paperlike_fig1", "c17"] {
            let c = bundled::circuit(name).unwrap();
            let w = encode_flat(&c, &ModelParams::default()).unwrap();
            let mut d = crate::compile::compile(&w.cnf).unwrap();
            let total = d.evaluate(&w.weights, &Evidence::new(w.cnf.num_vars));
            assert!((total - 1.0).abs() < 1e-12, "{name}: {total}");
        }
    }

    #[test]
    fn two_gate_cone_posterior_of_j() {
        let c = bundled::circuit("two_gate_cone").unwrap();
        let w = encode_flat(&c, &ModelParams::default()).unwrap();
        let j = w.vars.wire_var(c.wire("J").unwrap());
        let e = w.wire_evidence(&[(c.wire("P").unwrap(), true)]);
        let (total, m) = brute_force(&w.cnf, &w.weights, &e);
        assert!((m.neg[j as usize] / total - 0.95).abs() < 1e-12);
    }

    #[test]
    fn fig1_abstraction_has_five_health_variables() {
        let c = bundled::circuit("paperlike_fig1").unwrap();
        let v = abstraction(&c);
        let priors = cone_priors(&c, &v, &ModelParams::default()).unwrap();
        let w = encode_abstraction(&c, &v, &ModelParams::default(), &priors).unwrap();
        let names: Vec<&str> = w.vars.health_components().iter().map(|&g| c.wire_name(g)).collect();
        assert_eq!(names, ["B", "A", "D", "K", "V"]);
        assert_eq!(w.vars.mode(c.wire("A").unwrap()), Some(GateMode::Cone));
        assert_eq!(w.vars.theta_var(c.wire("A").unwrap()), None);
        let (total, _) = brute_force(&w.cnf, &w.weights, &Evidence::new(w.cnf.num_vars));
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cone_encoding_inverts_the_root() {
        // J = NOT P inside, A = AND(J, D) the root: J <-> !P always,
        // okA -> A <-> J & D, !okA -> A xor (J & D).
        let c = parse_bench("INPUT(P)\nINPUT(D)\nOUTPUT(Z)\nJ = NOT(P)\nA = AND(J, D)\nZ = OR(A, D)").unwrap();
        let v = abstraction(&c);
        let a = c.wire("A").unwrap();
        assert!(v.is_cone(a));
        let mut priors = ConePriors::new();
        priors.insert("A".into(), 0.2);
        let w = encode_abstraction(&c, &v, &ModelParams::default(), &priors).unwrap();
        let var = |n: &str| w.vars.wire_var(c.wire(n).unwrap());
        let ok = w.vars.ok_var(a).unwrap();
        assert_eq!(w.weights.get(ok), (0.8, 0.2));
        for bits in 0u64..(1 << w.cnf.num_vars) {
            let val = |v: Var| bits >> (v - 1) & 1 == 1;
            if !satisfies(&w.cnf, bits) {
                continue;
            }
            assert_eq!(val(var("J")), !val(var("P")));
            let f = val(var("J")) && val(var("D"));
            assert_eq!(val(var("A")), f == val(ok));
        }
    }

    #[test]
    fn no_cones_matches_flat() {
        let c = bundled::circuit("c17").unwrap();
        let v = abstraction(&c).destroy_cones(&c, 0);
        let flat = encode_flat(&c, &ModelParams::default()).unwrap();
        let abs = encode_abstraction(&c, &v, &ModelParams::default(), &ConePriors::new()).unwrap();
        assert_eq!(flat.cnf, abs.cnf);
        assert_eq!(flat.weights, abs.weights);
    }

    #[test]
    fn missing_prior_is_reported() {
        let c = bundled::circuit("paperlike_fig1").unwrap();
        let v = abstraction(&c);
        let err = encode_abstraction(&c, &v, &ModelParams::default(), &ConePriors::new()).unwrap_err();
        assert_eq!(err, EncodeError::MissingConePrior("A".into()));
    }

    #[test]
    fn wide_gates_use_aux_variables() {
        let c = parse_bench(
            "INPUT(a)\nINPUT(b)\nINPUT(c)\nINPUT(d)\nINPUT(e)\nINPUT(f)\nOUTPUT(o)\no = XOR(a, b, c, d, e, f)",
        )
        .unwrap();
        let w = encode_flat(&c, &ModelParams::default()).unwrap();
        assert!((1..=w.cnf.num_vars).any(|v| w.vars.role(v) == VarRole::Aux));
        assert!(w.cnf.clauses.iter().all(|cl| cl.len() <= 6));
        let (total, _) = brute_force(&w.cnf, &w.weights, &Evidence::new(w.cnf.num_vars));
        assert!((total - 1.0).abs() < 1e-12);
        // With ok asserted the output is the parity of the inputs.
        let ok = w.vars.ok_var(c.wire("o").unwrap()).unwrap();
        let mut e = w.wire_evidence(&[(0, true), (1, true), (2, false), (3, true), (4, false), (5, false)]);
        e.set(ok, true);
        let (t, m) = brute_force(&w.cnf, &w.weights, &e);
        let o = w.vars.wire_var(c.wire("o").unwrap()) as usize;
        assert!((m.pos[o] - t).abs() < 1e-15 && t > 0.0);
    }

    #[test]
    fn cone_priors_of_small_cones() {
        let p = ModelParams::default();
        let single = parse_bench("INPUT(a)\nINPUT(b)\nOUTPUT(g)\ng = AND(a, b)").unwrap();
        let v = abstraction(&single);
        let got = cone_prior(&single, &v, 2, &p, &ConePriors::new()).unwrap();
        assert!((got - 0.05).abs() < 1e-12);

        let c = bundled::circuit("two_gate_cone").unwrap();
        let v = abstraction(&c);
        let got = cone_prior(&c, &v, c.wire("A").unwrap(), &p, &ConePriors::new()).unwrap();
        assert!((got - 0.0725).abs() < 1e-12);

        let sure = ModelParams {
            healthy_prior: 1.0,
            ..p
        };
        let got = cone_prior(&c, &v, c.wire("A").unwrap(), &sure, &ConePriors::new()).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn nested_priors_are_computed_inner_first() {
        let c = bundled::circuit("paperlike_fig3").unwrap();
        let v = abstraction(&c);
        let priors = cone_priors(&c, &v, &ModelParams::default()).unwrap();
        assert_eq!(priors.keys().collect::<Vec<_>>(), ["A", "E"]);
        assert!(priors.values().all(|&p| p > 0.0 && p < 1.0));
    }
}
