//! Smooth d-DNNF: representation, weighted evaluation, differentiation,
//! implication extraction and structural validation.
//!
//! The compiler itself lives in [`dpll`], cardinality pruning in [`reduce`]
//! and the DIMACS / c2d text formats in [`io`].

pub mod dpll;
pub mod io;
pub mod reduce;

use std::collections::HashMap;

use rustc_hash::FxHashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dpll::{compile, compile_with, CompileOptions};
pub use reduce::{reduce, AndRule, ReduceError};

/// Propositional variable, numbered from 1.
pub type Var = u32;
/// Signed DIMACS literal.
pub type Lit = i32;

pub fn var_of(l: Lit) -> Var {
    l.unsigned_abs()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error("node budget of {0} exceeded")]
    NodeBudget(usize),
    #[error("time budget exceeded")]
    TimeBudget,
    #[error("differentiate called before evaluate")]
    NotEvaluated,
    #[error("{0}")]
    Format(String),
    #[error("invalid d-DNNF: {0}")]
    Invalid(String),
}

/// Clauses over `num_vars` variables.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cnf {
    pub num_vars: u32,
    pub clauses: Vec<Vec<Lit>>,
}

/// Per-literal weights indexed by variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl Weights {
    pub fn uniform(num_vars: u32) -> Weights {
        Weights {
            pos: vec![1.0; num_vars as usize + 1],
            neg: vec![1.0; num_vars as usize + 1],
        }
    }

    pub fn set(&mut self, v: Var, pos: f64, neg: f64) {
        self.pos[v as usize] = pos;
        self.neg[v as usize] = neg;
    }

    pub fn get(&self, v: Var) -> (f64, f64) {
        (self.pos[v as usize], self.neg[v as usize])
    }

    pub fn of(&self, l: Lit) -> f64 {
        if l > 0 {
            self.pos[l as usize]
        } else {
            self.neg[(-l) as usize]
        }
    }

    pub fn num_vars(&self) -> u32 {
        (self.pos.len() - 1) as u32
    }

    pub fn grow(&mut self, num_vars: u32) {
        self.pos.resize(num_vars as usize + 1, 1.0);
        self.neg.resize(num_vars as usize + 1, 1.0);
    }
}

/// Partial assignment.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Evidence {
    values: Vec<Option<bool>>,
}

impl Evidence {
    pub fn new(num_vars: u32) -> Evidence {
        Evidence {
            values: vec![None; num_vars as usize + 1],
        }
    }

    pub fn set(&mut self, v: Var, b: bool) {
        if v as usize >= self.values.len() {
            self.values.resize(v as usize + 1, None);
        }
        self.values[v as usize] = Some(b);
    }

    pub fn assert_lit(&mut self, l: Lit) {
        self.set(var_of(l), l > 0);
    }

    pub fn unset(&mut self, v: Var) {
        if let Some(x) = self.values.get_mut(v as usize) {
            *x = None;
        }
    }

    pub fn get(&self, v: Var) -> Option<bool> {
        self.values.get(v as usize).copied().flatten()
    }

    /// True when the evidence rules the literal out.
    pub fn contradicts(&self, l: Lit) -> bool {
        matches!(self.get(var_of(l)), Some(b) if b != (l > 0))
    }

    pub fn lits(&self) -> Vec<Lit> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(v, b)| b.map(|b| if b { v as Lit } else { -(v as Lit) }))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Node {
    True,
    False,
    Lit(Lit),
    And(Vec<u32>),
    /// Decision node on `var` (0 when imported without a decision variable).
    Or {
        var: Var,
        children: Vec<u32>,
    },
}

impl Node {
    pub fn children(&self) -> &[u32] {
        match self {
            Node::And(c) | Node::Or { children: c, .. } => c,
            _ => &[],
        }
    }
}

/// Hash-consing node store used while building graphs.
#[derive(Default)]
pub(crate) struct NodeStore {
    pub nodes: Vec<Node>,
    unique: FxHashMap<Node, u32>,
}

impl NodeStore {
    pub fn add(&mut self, n: Node) -> u32 {
        if let Some(&id) = self.unique.get(&n) {
            return id;
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(n.clone());
        self.unique.insert(n, id);
        id
    }

    pub fn constant(&mut self, b: bool) -> u32 {
        self.add(if b { Node::True } else { Node::False })
    }

    /// Conjunction with constant folding.
    pub fn and(&mut self, mut children: Vec<u32>) -> u32 {
        if children.iter().any(|&c| self.nodes[c as usize] == Node::False) {
            return self.constant(false);
        }
        children.retain(|&c| self.nodes[c as usize] != Node::True);
        match children.len() {
            0 => self.constant(true),
            1 => children[0],
            _ => {
                children.sort_unstable();
                children.dedup();
                self.add(Node::And(children))
            }
        }
    }
}

/// Model counts saturate rather than wrap; zero stays exact.
pub type Count = u128;

/// Per-variable joint probabilities `Pr(V = b, e)` and, independent of
/// floating-point underflow, whether any consistent model has `V = b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    pub total: f64,
    pub total_count: Count,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    pub pos_possible: Vec<bool>,
    pub neg_possible: Vec<bool>,
}

impl Marginals {
    pub fn joint(&self, l: Lit) -> f64 {
        if l > 0 {
            self.pos[l as usize]
        } else {
            self.neg[(-l) as usize]
        }
    }

    pub fn possible(&self, l: Lit) -> bool {
        if l > 0 {
            self.pos_possible[l as usize]
        } else {
            self.neg_possible[(-l) as usize]
        }
    }

    /// `Pr(V = 1 | e)`, or `None` when the evidence is impossible.
    pub fn posterior(&self, v: Var) -> Option<f64> {
        if self.total_count == 0 || self.total <= 0.0 {
            return None;
        }
        if !self.pos_possible[v as usize] {
            return Some(0.0);
        }
        if !self.neg_possible[v as usize] {
            return Some(1.0);
        }
        Some((self.pos[v as usize] / self.total).clamp(0.0, 1.0))
    }

    /// Literals forced by the evidence.
    pub fn implications(&self) -> Vec<Lit> {
        let mut out = Vec::new();
        for v in 1..self.pos.len() {
            let (p, n) = (self.pos_possible[v], self.neg_possible[v]);
            if p && !n {
                out.push(v as Lit);
            } else if n && !p {
                out.push(-(v as Lit));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Ddnnf {
    nodes: Vec<Node>,
    /// Flat copy of the graph for the evaluation passes.
    flat: Flat,
    root: u32,
    num_vars: u32,
    value: Vec<f64>,
    deriv: Vec<f64>,
    count: Vec<Count>,
    /// Whether a node lies in some consistent model (top-down pass).
    support: Vec<bool>,
    evaluated: bool,
}

const TRUE: u8 = 0;
const FALSE: u8 = 1;
const LIT: u8 = 2;
const AND: u8 = 3;
const OR: u8 = 4;

/// Compressed adjacency: node `i` has children `kids[start[i]..start[i + 1]]`.
#[derive(Clone, Debug, Default)]
struct Flat {
    kind: Vec<u8>,
    lit: Vec<Lit>,
    start: Vec<u32>,
    kids: Vec<u32>,
}

impl Flat {
    fn new(nodes: &[Node]) -> Flat {
        let mut f = Flat {
            kind: Vec::with_capacity(nodes.len()),
            lit: Vec::with_capacity(nodes.len()),
            start: Vec::with_capacity(nodes.len() + 1),
            kids: Vec::new(),
        };
        for n in nodes {
            f.start.push(f.kids.len() as u32);
            let (k, l) = match n {
                Node::True => (TRUE, 0),
                Node::False => (FALSE, 0),
                Node::Lit(l) => (LIT, *l),
                Node::And(_) => (AND, 0),
                Node::Or { .. } => (OR, 0),
            };
            f.kind.push(k);
            f.lit.push(l);
            f.kids.extend_from_slice(n.children());
        }
        f.start.push(f.kids.len() as u32);
        f
    }

    fn children(&self, i: usize) -> &[u32] {
        &self.kids[self.start[i] as usize..self.start[i + 1] as usize]
    }
}

impl PartialEq for Ddnnf {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.root == other.root && self.num_vars == other.num_vars
    }
}

impl Ddnnf {
    /// Builds a graph from nodes whose children precede them.
    pub fn from_nodes(nodes: Vec<Node>, root: u32, num_vars: u32) -> Result<Ddnnf, CompileError> {
        for (i, n) in nodes.iter().enumerate() {
            if n.children().iter().any(|&c| c as usize >= i) {
                return Err(CompileError::Invalid(format!("node {i} refers forward")));
            }
            if let Node::Lit(l) = n {
                if *l == 0 || var_of(*l) > num_vars {
                    return Err(CompileError::Invalid(format!("literal {l} out of range")));
                }
            }
        }
        if root as usize >= nodes.len() {
            return Err(CompileError::Invalid("root out of range".into()));
        }
        let n = nodes.len();
        Ok(Ddnnf {
            flat: Flat::new(&nodes),
            nodes,
            root,
            num_vars,
            value: vec![0.0; n],
            deriv: vec![0.0; n],
            count: vec![0; n],
            support: vec![false; n],
            evaluated: false,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> u32 {
        self.root
    }

    pub fn num_vars(&self) -> u32 {
        self.num_vars
    }

    pub fn size(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> usize {
        self.nodes.iter().map(|n| n.children().len()).sum()
    }

    pub fn is_false(&self) -> bool {
        self.nodes[self.root as usize] == Node::False
    }

    /// Bottom-up pass; returns the weight of all models consistent with `e`.
    pub fn evaluate(&mut self, w: &Weights, e: &Evidence) -> f64 {
        let f = &self.flat;
        for i in 0..f.kind.len() {
            let (v, c) = match f.kind[i] {
                TRUE => (1.0, 1),
                FALSE => (0.0, 0),
                LIT => {
                    let l = f.lit[i];
                    let wt = w.of(l);
                    if e.contradicts(l) || wt == 0.0 {
                        (0.0, 0)
                    } else {
                        (wt, 1)
                    }
                }
                AND => f.children(i).iter().fold((1.0, 1 as Count), |(v, c), &k| {
                    (v * self.value[k as usize], c.saturating_mul(self.count[k as usize]))
                }),
                _ => f.children(i).iter().fold((0.0, 0 as Count), |(v, c), &k| {
                    (v + self.value[k as usize], c.saturating_add(self.count[k as usize]))
                }),
            };
            self.value[i] = v;
            self.count[i] = c;
        }
        self.evaluated = true;
        self.value[self.root as usize]
    }

    /// Unweighted count of models consistent with the last evaluation's evidence.
    pub fn last_count(&self) -> Count {
        self.count[self.root as usize]
    }

    /// Top-down pass producing `Pr(V = b, e)` for every literal at once.
    pub fn differentiate(&mut self) -> Result<Marginals, CompileError> {
        if !self.evaluated {
            return Err(CompileError::NotEvaluated);
        }
        let n = self.nodes.len();
        self.deriv.iter_mut().for_each(|d| *d = 0.0);
        self.support.iter_mut().for_each(|s| *s = false);
        self.deriv[self.root as usize] = 1.0;
        self.support[self.root as usize] = self.count[self.root as usize] > 0;
        let nv = self.num_vars as usize + 1;
        let mut m = Marginals {
            total: self.value[self.root as usize],
            total_count: self.count[self.root as usize],
            pos: vec![0.0; nv],
            neg: vec![0.0; nv],
            pos_possible: vec![false; nv],
            neg_possible: vec![false; nv],
        };
        let f = &self.flat;
        let mut ov: Vec<f64> = Vec::new();
        for i in (0..n).rev() {
            let (d, sup) = (self.deriv[i], self.support[i]);
            if d == 0.0 && !sup {
                continue;
            }
            match f.kind[i] {
                OR => {
                    for &k in f.children(i) {
                        self.deriv[k as usize] += d;
                        self.support[k as usize] |= sup && self.count[k as usize] > 0;
                    }
                }
                AND => {
                    let ch = f.children(i);
                    if let [a, b] = *ch {
                        let (a, b) = (a as usize, b as usize);
                        self.deriv[a] += d * self.value[b];
                        self.deriv[b] += d * self.value[a];
                        // A supported and-node has only supported children.
                        self.support[a] |= sup;
                        self.support[b] |= sup;
                        continue;
                    }
                    // others[j] = product over the siblings of child j
                    ov.clear();
                    let mut pv = 1.0;
                    for &k in ch {
                        ov.push(pv);
                        pv *= self.value[k as usize];
                    }
                    let mut sv = 1.0;
                    for (j, &k) in ch.iter().enumerate().rev() {
                        let k = k as usize;
                        self.deriv[k] += d * (ov[j] * sv);
                        self.support[k] |= sup;
                        sv *= self.value[k];
                    }
                }
                LIT => {
                    let l = f.lit[i];
                    let v = var_of(l) as usize;
                    let jv = d * self.value[i];
                    if l > 0 {
                        m.pos[v] += jv;
                        m.pos_possible[v] |= sup;
                    } else {
                        m.neg[v] += jv;
                        m.neg_possible[v] |= sup;
                    }
                }
                _ => {}
            }
        }
        Ok(m)
    }

    /// Node-level derivative of the last differentiation.
    pub fn derivative(&self, node: u32) -> f64 {
        self.deriv[node as usize]
    }

    pub fn value(&self, node: u32) -> f64 {
        self.value[node as usize]
    }

    /// Variables mentioned below each node, as bitsets.
    fn var_sets(&self) -> Vec<Vec<u64>> {
        let words = (self.num_vars as usize + 1).div_ceil(64);
        let mut sets: Vec<Vec<u64>> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let mut s = vec![0u64; words];
            match n {
                Node::Lit(l) => {
                    let v = var_of(*l) as usize;
                    s[v / 64] |= 1 << (v % 64);
                }
                _ => {
                    for &c in n.children() {
                        for (a, b) in s.iter_mut().zip(&sets[c as usize]) {
                            *a |= *b;
                        }
                    }
                }
            }
            sets.push(s);
        }
        sets
    }

    pub fn check_decomposable(&self) -> Result<(), String> {
        let sets = self.var_sets();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Node::And(ch) = n {
                let mut seen = vec![0u64; sets[i].len()];
                for &c in ch {
                    for (a, b) in seen.iter_mut().zip(&sets[c as usize]) {
                        if *a & *b != 0 {
                            return Err(format!("and-node {i} shares variables between children"));
                        }
                        *a |= *b;
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether every model of `node` assigns `l`, checked structurally.
    fn entails(&self, node: u32, l: Lit, memo: &mut HashMap<(u32, Lit), bool>) -> bool {
        if let Some(&r) = memo.get(&(node, l)) {
            return r;
        }
        let r = match &self.nodes[node as usize] {
            Node::False => true,
            Node::True => false,
            Node::Lit(x) => *x == l,
            Node::And(ch) => ch.iter().any(|&c| self.entails(c, l, memo)),
            Node::Or { children, .. } => !children.is_empty() && children.iter().all(|&c| self.entails(c, l, memo)),
        };
        memo.insert((node, l), r);
        r
    }

    /// Every or-node decides its variable: at most one child per phase.
    pub fn check_deterministic(&self) -> Result<(), String> {
        let mut memo = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Node::Or { var, children } = n {
                if children.len() <= 1 {
                    continue;
                }
                if *var == 0 || children.len() > 2 {
                    return Err(format!("or-node {i} is not a decision node"));
                }
                let v = *var as Lit;
                let a = children[0];
                let b = children[1];
                let ok = (self.entails(a, v, &mut memo) && self.entails(b, -v, &mut memo))
                    || (self.entails(a, -v, &mut memo) && self.entails(b, v, &mut memo));
                if !ok {
                    return Err(format!("or-node {i} children are not split on variable {var}"));
                }
            }
        }
        Ok(())
    }

    pub fn check_smooth(&self) -> Result<(), String> {
        let sets = self.var_sets();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Node::Or { children, .. } = n {
                if let Some((&first, rest)) = children.split_first() {
                    if rest.iter().any(|&c| sets[c as usize] != sets[first as usize]) {
                        return Err(format!("or-node {i} children mention different variables"));
                    }
                }
            }
        }
        let root = &sets[self.root as usize];
        let full = (1..=self.num_vars as usize).all(|v| root[v / 64] >> (v % 64) & 1 == 1);
        if !full && !self.is_false() {
            return Err("root does not mention every variable".into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.check_decomposable()?;
        self.check_deterministic()?;
        self.check_smooth()
    }

    /// Inserts `(v or not v)` gadgets so or-children agree on their variables
    /// and the root mentions every variable.
    pub fn smooth(&self) -> Ddnnf {
        let sets = self.var_sets();
        let mut store = NodeStore::default();
        let mut map = vec![0u32; self.nodes.len()];
        let mut gadgets: HashMap<Var, u32> = HashMap::new();
        let mut gadget = |store: &mut NodeStore, v: Var| -> u32 {
            *gadgets.entry(v).or_insert_with(|| {
                let p = store.add(Node::Lit(v as Lit));
                let n = store.add(Node::Lit(-(v as Lit)));
                store.add(Node::Or {
                    var: v,
                    children: vec![p, n],
                })
            })
        };
        let missing = |have: &[u64], want: &[u64]| -> Vec<Var> {
            let mut out = Vec::new();
            for (w, (&h, &x)) in have.iter().zip(want).enumerate() {
                let mut diff = x & !h;
                while diff != 0 {
                    let b = diff.trailing_zeros() as usize;
                    out.push((w * 64 + b) as Var);
                    diff &= diff - 1;
                }
            }
            out
        };
        for (i, n) in self.nodes.iter().enumerate() {
            map[i] = match n {
                Node::True => store.constant(true),
                Node::False => store.constant(false),
                Node::Lit(l) => store.add(Node::Lit(*l)),
                Node::And(ch) => {
                    let c = ch.iter().map(|&c| map[c as usize]).collect();
                    store.and(c)
                }
                Node::Or { var, children } => {
                    let kids: Vec<u32> = children
                        .iter()
                        .filter(|&&c| self.nodes[c as usize] != Node::False)
                        .copied()
                        .collect();
                    let mut out = Vec::with_capacity(kids.len());
                    for &c in &kids {
                        let need = missing(&sets[c as usize], &sets[i]);
                        let mut parts = vec![map[c as usize]];
                        parts.extend(need.into_iter().map(|v| gadget(&mut store, v)));
                        out.push(store.and(parts));
                    }
                    match out.len() {
                        0 => store.constant(false),
                        1 => out[0],
                        _ => store.add(Node::Or {
                            var: *var,
                            children: out,
                        }),
                    }
                }
            };
        }
        let mut root = map[self.root as usize];
        if store.nodes[root as usize] != Node::False {
            let words = sets[0].len();
            let mut all = vec![0u64; words];
            for v in 1..=self.num_vars as usize {
                all[v / 64] |= 1 << (v % 64);
            }
            let need = missing(&sets[self.root as usize], &all);
            if !need.is_empty() {
                let mut parts = vec![root];
                parts.extend(need.into_iter().map(|v| gadget(&mut store, v)));
                root = store.and(parts);
            }
        }
        compact(store.nodes, root, self.num_vars)
    }
}

/// Drops nodes unreachable from `root`, preserving order.
pub(crate) fn compact(nodes: Vec<Node>, root: u32, num_vars: u32) -> Ddnnf {
    let mut live = vec![false; nodes.len()];
    live[root as usize] = true;
    for i in (0..nodes.len()).rev() {
        if live[i] {
            for &c in nodes[i].children() {
                live[c as usize] = true;
            }
        }
    }
    let mut map = vec![u32::MAX; nodes.len()];
    let mut out = Vec::new();
    for (i, n) in nodes.into_iter().enumerate() {
        if !live[i] {
            continue;
        }
        map[i] = out.len() as u32;
        out.push(match n {
            Node::And(ch) => Node::And(ch.iter().map(|&c| map[c as usize]).collect()),
            Node::Or { var, children } => Node::Or {
                var,
                children: children.iter().map(|&c| map[c as usize]).collect(),
            },
            other => other,
        });
    }
    Ddnnf::from_nodes(out, map[root as usize], num_vars).expect("compaction keeps order")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_var_or() -> Ddnnf {
        // (x1 or x2) as a decision on x1, not yet smooth.
        let nodes = vec![
            Node::Lit(1),
            Node::Lit(-1),
            Node::Lit(2),
            Node::And(vec![1, 2]),
            Node::Or {
                var: 1,
                children: vec![0, 3],
            },
        ];
        Ddnnf::from_nodes(nodes, 4, 2).unwrap()
    }

    #[test]
    fn smoothing_adds_gadgets() {
        let d = two_var_or();
        assert!(d.check_smooth().is_err());
        let mut s = d.smooth();
        s.validate().unwrap();
        let total = s.evaluate(&Weights::uniform(2), &Evidence::new(2));
        assert_eq!(total, 3.0);
        assert_eq!(s.last_count(), 3);
    }

    #[test]
    fn marginals_sum_to_total() {
        let mut s = two_var_or().smooth();
        let mut w = Weights::uniform(2);
        w.set(1, 0.3, 0.7);
        w.set(2, 0.6, 0.4);
        let t = s.evaluate(&w, &Evidence::new(2));
        let m = s.differentiate().unwrap();
        for v in 1..=2 {
            assert!((m.pos[v] + m.neg[v] - t).abs() < 1e-12);
        }
        // Pr(x1 or x2) = 1 - 0.7 * 0.4
        assert!((t - 0.72).abs() < 1e-12);
        assert!((m.pos[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn differentiate_requires_evaluate() {
        let mut s = two_var_or().smooth();
        assert_eq!(s.differentiate().unwrap_err(), CompileError::NotEvaluated);
    }

    #[test]
    fn implications_from_counts() {
        let mut s = two_var_or().smooth();
        let mut e = Evidence::new(2);
        e.set(1, false);
        s.evaluate(&Weights::uniform(2), &e);
        let m = s.differentiate().unwrap();
        assert_eq!(m.implications(), vec![-1, 2]);
    }
}
