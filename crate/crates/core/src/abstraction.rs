//! Dominators, cones and the abstraction of a circuit.
//!
//! Dominators are taken on the reversed gate graph rooted at a virtual
//! collector fed by every primary output. A gate's cone is its dominator
//! subtree; the abstraction is the set of gates that no active cone hides.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::circuit::{Circuit, CircuitBuilder, WireId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AbstractionError {
    #[error("`{0}` is not a gate of the circuit")]
    NotAGate(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cone {
    pub root: WireId,
    /// Dominated gates, root included, ascending ids.
    pub members: Vec<WireId>,
    /// Non-member wires feeding members, ascending ids.
    pub inputs: Vec<WireId>,
}

#[derive(Clone, Debug)]
pub struct AbstractionView {
    /// Immediate dominator per wire; `None` is the collector (or a primary input).
    idom: Vec<Option<WireId>>,
    members: Vec<Vec<WireId>>,
    inputs: Vec<Vec<WireId>>,
    active: Vec<bool>,
    /// Single-output root whose cone is the entire system, if any.
    whole: Option<WireId>,
    abstraction: Vec<WireId>,
    depth: Vec<Option<u32>>,
}

/// Immediate dominators on the reversed gate graph. Gates are visited in
/// reverse topological order, which is a topological order of the reversed
/// graph, so a single intersection pass is exact.
pub fn immediate_dominators(c: &Circuit) -> Vec<Option<WireId>> {
    const COLLECTOR: usize = usize::MAX;
    let n = c.num_wires();
    let mut idom: Vec<Option<usize>> = vec![None; n];
    let mut tree_depth = vec![0usize; n];
    let mut reached = vec![false; n];
    let depth_of = |x: usize, td: &Vec<usize>| if x == COLLECTOR { 0 } else { td[x] };
    for g in c.gates().iter().rev() {
        let w = g.output;
        let mut acc: Option<usize> = if c.is_output(w) { Some(COLLECTOR) } else { None };
        for p in c.parents(w) {
            if !reached[p] {
                continue;
            }
            acc = Some(match acc {
                None => p,
                Some(mut a) => {
                    let mut b = p;
                    while a != b {
                        let (da, db) = (depth_of(a, &tree_depth), depth_of(b, &tree_depth));
                        if da >= db {
                            a = idom[a].unwrap_or(COLLECTOR);
                        }
                        if db >= da {
                            b = idom[b].unwrap_or(COLLECTOR);
                        }
                    }
                    a
                }
            });
        }
        // Gates with no route to an output hang off the collector.
        let d = acc.unwrap_or(COLLECTOR);
        reached[w] = acc.is_some();
        if d == COLLECTOR {
            idom[w] = None;
            tree_depth[w] = 1;
        } else {
            idom[w] = Some(d);
            tree_depth[w] = tree_depth[d] + 1;
        }
    }
    idom
}

impl AbstractionView {
    /// The full view: every non-trivial cone is active.
    pub fn new(c: &Circuit) -> AbstractionView {
        let n = c.num_wires();
        let idom = immediate_dominators(c);
        let mut children: Vec<Vec<WireId>> = vec![Vec::new(); n];
        let mut top = Vec::new();
        for g in c.gate_ids() {
            match idom[g] {
                Some(d) => children[d].push(g),
                None => top.push(g),
            }
        }
        // Subtrees, filled children-first: a dominated gate precedes its
        // dominator in topological order.
        let mut members: Vec<Vec<WireId>> = vec![Vec::new(); n];
        for g in c.gates() {
            let w = g.output;
            let mut m = vec![w];
            for &ch in &children[w] {
                m.extend_from_slice(&members[ch]);
            }
            m.sort_unstable();
            members[w] = m;
        }
        let mut inputs: Vec<Vec<WireId>> = vec![Vec::new(); n];
        for g in c.gates() {
            let w = g.output;
            let m = &members[w];
            let set: BTreeSet<WireId> = m
                .iter()
                .flat_map(|&x| c.gate(x).unwrap().fanin.iter().copied())
                .filter(|f| m.binary_search(f).is_err())
                .collect();
            inputs[w] = set.into_iter().collect();
        }
        let active: Vec<bool> = (0..n).map(|w| members[w].len() > 1).collect();
        let whole = if top.len() == 1 && members[top[0]].len() == c.num_gates() {
            Some(top[0])
        } else {
            None
        };
        let mut view = AbstractionView {
            idom,
            members,
            inputs,
            active,
            whole,
            abstraction: Vec::new(),
            depth: c.depth_levels(),
        };
        view.abstraction = view.abstraction_within(c, None);
        view
    }

    /// Abstraction of the whole system (`None`) or of the cone rooted at `scope`.
    pub fn abstraction_within(&self, c: &Circuit, scope: Option<WireId>) -> Vec<WireId> {
        let root = scope.or(self.whole);
        let candidates: Vec<WireId> = match scope {
            Some(r) => self.members[r].clone(),
            None => c.gate_ids(),
        };
        candidates
            .into_iter()
            .filter(|&x| {
                if scope == Some(x) {
                    return true;
                }
                let mut up = self.idom[x];
                while let Some(a) = up {
                    if Some(a) == root {
                        break;
                    }
                    if self.active[a] {
                        return false;
                    }
                    up = self.idom[a];
                }
                true
            })
            .collect()
    }

    pub fn abstraction(&self) -> &[WireId] {
        &self.abstraction
    }

    pub fn idom(&self, g: WireId) -> Option<WireId> {
        self.idom[g]
    }

    /// Dominator subtree of `g` (root included).
    pub fn members(&self, g: WireId) -> &[WireId] {
        &self.members[g]
    }

    pub fn cone_inputs(&self, g: WireId) -> &[WireId] {
        &self.inputs[g]
    }

    /// True when `g` roots an active, non-trivial cone.
    pub fn is_cone(&self, g: WireId) -> bool {
        self.active[g]
    }

    pub fn whole_root(&self) -> Option<WireId> {
        self.whole
    }

    pub fn depth(&self) -> &[Option<u32>] {
        &self.depth
    }

    pub fn cone(&self, g: WireId) -> Cone {
        Cone {
            root: g,
            members: self.members[g].clone(),
            inputs: self.inputs[g].clone(),
        }
    }

    /// Cones treated as black boxes at the top level.
    pub fn top_cones(&self) -> Vec<Cone> {
        self.abstraction
            .iter()
            .filter(|&&g| self.active[g] && Some(g) != self.whole)
            .map(|&g| self.cone(g))
            .collect()
    }

    /// Cones directly below `root` in the cone hierarchy.
    pub fn inner_cones(&self, c: &Circuit, root: WireId) -> Vec<Cone> {
        self.abstraction_within(c, Some(root))
            .into_iter()
            .filter(|&g| g != root && self.active[g])
            .map(|g| self.cone(g))
            .collect()
    }

    /// Every active cone at any depth, excluding the whole-system root.
    pub fn all_cones(&self) -> Vec<WireId> {
        (0..self.active.len())
            .filter(|&g| self.active[g] && Some(g) != self.whole)
            .collect()
    }

    /// Flattens every cone with more than `max_inputs` inputs; surviving
    /// inner cones of a destroyed cone surface at the enclosing level.
    pub fn destroy_cones(&self, c: &Circuit, max_inputs: usize) -> AbstractionView {
        let mut v = self.clone();
        for g in 0..v.active.len() {
            if v.active[g] && v.inputs[g].len() > max_inputs {
                v.active[g] = false;
            }
        }
        v.abstraction = v.abstraction_within(c, None);
        v
    }

    /// View of `sub` (a cone subsystem of `c`) that keeps cones destroyed
    /// in this view destroyed.
    pub fn restrict(&self, c: &Circuit, sub: &Circuit) -> AbstractionView {
        let mut v = AbstractionView::new(sub);
        for g in sub.gate_ids() {
            if let Some(orig) = c.wire(sub.wire_name(g)) {
                v.active[g] = v.active[g] && self.active[orig];
            }
        }
        v.abstraction = v.abstraction_within(sub, None);
        v
    }
}

pub fn abstraction(c: &Circuit) -> AbstractionView {
    AbstractionView::new(c)
}

/// The cone rooted at `root` as a standalone circuit with inputs `I_G`,
/// gates `D_G` and the single output `root`.
pub fn cone_subsystem(c: &Circuit, view: &AbstractionView, root: WireId) -> Result<Circuit, AbstractionError> {
    if root >= c.num_wires() || !c.is_gate(root) {
        let name = if root < c.num_wires() {
            c.wire_name(root).to_string()
        } else {
            root.to_string()
        };
        return Err(AbstractionError::NotAGate(name));
    }
    let mut b = CircuitBuilder::new(format!("{}/{}", c.name(), c.wire_name(root)));
    let mut defs: Vec<WireId> = view.cone_inputs(root).to_vec();
    defs.extend_from_slice(view.members(root));
    defs.sort_unstable();
    let is_member = |w: &WireId| view.members(root).binary_search(w).is_ok();
    for w in defs {
        if is_member(&w) {
            let g = c.gate(w).unwrap();
            b.gate(c.wire_name(w), g.kind, g.fanin.iter().map(|&f| c.wire_name(f)));
        } else {
            b.input(c.wire_name(w));
        }
    }
    b.output(c.wire_name(root));
    Ok(b.build().expect("a cone is a valid circuit"))
}

/// Stable text report: the abstraction, then one line per cone, nested
/// cones indented below their parent.
pub fn render_report(c: &Circuit, view: &AbstractionView) -> String {
    let mut out = String::new();
    let names = c.names(view.abstraction());
    let _ = writeln!(out, "abstraction {}: {}", names.len(), names.join(" "));
    fn walk(c: &Circuit, view: &AbstractionView, cone: &Cone, indent: usize, out: &mut String) {
        let _ = writeln!(
            out,
            "{:indent$}cone {} members={} inputs={}",
            "",
            c.wire_name(cone.root),
            cone.members.len(),
            cone.inputs.len(),
            indent = indent
        );
        for inner in view.inner_cones(c, cone.root) {
            walk(c, view, &inner, indent + 2, out);
        }
    }
    for cone in view.top_cones() {
        walk(c, view, &cone, 0, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::circuit::parse_bench;

    fn names(c: &Circuit, ws: &[WireId]) -> Vec<String> {
        let mut v: Vec<String> = ws.iter().map(|&w| c.wire_name(w).to_string()).collect();
        v.sort();
        v
    }

    #[test]
    fn fig1_abstraction() {
        let c = bundled::circuit("paperlike_fig1").unwrap();
        let v = abstraction(&c);
        assert_eq!(names(&c, v.abstraction()), ["A", "B", "D", "K", "V"]);
        let a = c.wire("A").unwrap();
        let cone = v.cone(a);
        assert_eq!(names(&c, &cone.members), ["A", "E", "J"]);
        assert_eq!(names(&c, &cone.inputs), ["B", "P"]);
    }

    #[test]
    fn fig3_nested_cones() {
        let c = bundled::circuit("paperlike_fig3").unwrap();
        let v = abstraction(&c);
        assert_eq!(names(&c, v.abstraction()), ["A", "B", "D", "K", "V"]);
        let a = c.wire("A").unwrap();
        let inner = v.inner_cones(&c, a);
        assert_eq!(inner.len(), 1);
        assert_eq!(names(&c, &inner[0].members), ["E", "J"]);
        assert_eq!(names(&c, &inner[0].inputs), ["B", "P"]);
        assert_eq!(names(&c, &v.abstraction_within(&c, Some(a))), ["A", "E"]);
    }

    #[test]
    fn cone_subsystem_of_fig1() {
        let c = bundled::circuit("paperlike_fig1").unwrap();
        let v = abstraction(&c);
        let sub = cone_subsystem(&c, &v, c.wire("A").unwrap()).unwrap();
        assert_eq!(names(&sub, sub.inputs()), ["B", "P"]);
        assert_eq!(names(&sub, sub.outputs()), ["A"]);
        assert_eq!(names(&sub, &sub.gate_ids()), ["A", "E", "J"]);
        let trivial = cone_subsystem(&c, &v, c.wire("K").unwrap()).unwrap();
        assert_eq!(trivial.num_gates(), 1);
        assert!(cone_subsystem(&c, &v, c.wire("P").unwrap()).is_err());
    }

    #[test]
    fn single_output_tree() {
        // Everything is dominated by the output; the top level shows the
        // root and the cones directly beneath it.
        let c = parse_bench(
            "INPUT(a)\nINPUT(b)\nINPUT(c)\nINPUT(d)\nOUTPUT(o)\n\
             x = AND(a, b)\ny = OR(c, d)\nz = NOT(y)\no = NAND(x, z)",
        )
        .unwrap();
        let v = abstraction(&c);
        assert_eq!(v.whole_root(), c.wire("o"));
        assert_eq!(names(&c, v.abstraction()), ["o", "x", "z"]);
        let gates = c.num_gates();
        let hidden: usize = v.top_cones().iter().map(|k| k.members.len() - 1).sum();
        assert_eq!(v.abstraction().len() + hidden, gates);
    }

    #[test]
    fn destroy_everything_is_trivial() {
        let c = bundled::circuit("paperlike_fig3").unwrap();
        let v = abstraction(&c).destroy_cones(&c, 0);
        assert_eq!(v.abstraction().len(), c.num_gates());
        let same = abstraction(&c).destroy_cones(&c, 99);
        assert_eq!(same.abstraction(), abstraction(&c).abstraction());
    }

    #[test]
    fn report_lists_nested_cones() {
        let c = bundled::circuit("paperlike_fig3").unwrap();
        let r = render_report(&c, &abstraction(&c));
        assert_eq!(
            r,
            "abstraction 5: B A D K V\ncone A members=3 inputs=2\n  cone E members=2 inputs=2\n"
        );
    }
}
