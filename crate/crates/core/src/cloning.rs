//! Component cloning and abstraction minimization.
//!
//! A candidate is an abstraction member that roots no cone. Its parents are
//! grouped by the top-level cone holding them; every group but the first gets
//! its own copy of the gate, after which each copy sits inside a cone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{abstraction, AbstractionView};
use crate::circuit::{Circuit, CircuitBuilder, WireId};

pub const CLONE_MARK: &str = "__c";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CloneError {
    #[error("`{0}` is not a cloning candidate")]
    NotCandidate(String),
    #[error("parent subset for `{0}` must be a non-empty proper subset of its parents")]
    ImproperSubset(String),
    #[error("malformed clone map line {0}")]
    MalformedMap(usize),
}

/// Clone name to ultimate original name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloneMap {
    to_original: BTreeMap<String, String>,
}

/// Strips a trailing `__c<k>` suffix.
pub fn original_name(name: &str) -> &str {
    if let Some(pos) = name.rfind(CLONE_MARK) {
        let tail = &name[pos + CLONE_MARK.len()..];
        if !tail.is_empty() && tail.bytes().all(|b| b.is_ascii_digit()) {
            return &name[..pos];
        }
    }
    name
}

impl CloneMap {
    /// Recovers the map from clone names alone.
    pub fn from_circuit(c: &Circuit) -> CloneMap {
        let mut m = CloneMap::default();
        for g in c.gates() {
            let n = c.wire_name(g.output);
            let o = original_name(n);
            if o != n {
                m.to_original.insert(n.to_string(), o.to_string());
            }
        }
        m
    }

    pub fn insert(&mut self, clone: &str, original: &str) {
        let root = self.original(original).to_string();
        self.to_original.insert(clone.to_string(), root);
    }

    pub fn original<'a>(&'a self, name: &'a str) -> &'a str {
        self.to_original.get(name).map(String::as_str).unwrap_or(name)
    }

    pub fn is_clone(&self, name: &str) -> bool {
        self.to_original.contains_key(name)
    }

    pub fn clones_of(&self, original: &str) -> Vec<&str> {
        self.to_original
            .iter()
            .filter(|(_, o)| o.as_str() == original)
            .map(|(c, _)| c.as_str())
            .collect()
    }

    /// The original of `name` followed by all of its clones.
    pub fn copies(&self, name: &str) -> Vec<String> {
        let o = self.original(name);
        std::iter::once(o.to_string())
            .chain(self.clones_of(o).into_iter().map(str::to_string))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.to_original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_original.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.to_original.iter().map(|(c, o)| (c.as_str(), o.as_str()))
    }

    /// `clone original` per line.
    pub fn render(&self) -> String {
        self.iter().map(|(c, o)| format!("{c} {o}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<CloneMap, CloneError> {
        let mut m = CloneMap::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(c), Some(o), None) => m.insert(c, o),
                _ => return Err(CloneError::MalformedMap(i + 1)),
            }
        }
        Ok(m)
    }
}

fn in_abstraction(view: &AbstractionView, g: WireId) -> bool {
    view.abstraction().binary_search(&g).is_ok()
}

pub fn is_candidate(c: &Circuit, view: &AbstractionView, g: WireId) -> bool {
    g < c.num_wires()
        && c.is_gate(g)
        && !c.is_output(g)
        && in_abstraction(view, g)
        && !view.is_cone(g)
        && !c.parents(g).is_empty()
}

/// The abstraction member whose cone holds `g` (possibly `g` itself).
fn top_container(view: &AbstractionView, g: WireId) -> WireId {
    let mut x = g;
    while !in_abstraction(view, x) {
        x = view.idom(x).expect("non-abstraction gates have a dominator");
    }
    x
}

/// Groups the parents of `g` by the top-level cone containing them. Groups
/// are ordered by their sorted member names.
pub fn parent_partition(c: &Circuit, view: &AbstractionView, g: WireId) -> Result<Vec<Vec<WireId>>, CloneError> {
    if !is_candidate(c, view, g) {
        let name = if g < c.num_wires() {
            c.wire_name(g).to_string()
        } else {
            g.to_string()
        };
        return Err(CloneError::NotCandidate(name));
    }
    let mut groups: BTreeMap<WireId, Vec<WireId>> = BTreeMap::new();
    for p in c.parents(g) {
        groups.entry(top_container(view, p)).or_default().push(p);
    }
    let mut parts: Vec<Vec<WireId>> = groups.into_values().collect();
    parts.sort_by_cached_key(|s| {
        let mut n: Vec<String> = s.iter().map(|&w| c.wire_name(w).to_string()).collect();
        n.sort();
        n
    });
    Ok(parts)
}

/// Adds a copy of `g` that feeds exactly `subset`; returns the new circuit
/// and the copy's name.
pub fn clone_gate(c: &Circuit, g: WireId, subset: &[WireId]) -> Result<(Circuit, String), CloneError> {
    let name = c.wire_name(g).to_string();
    let parents = c.parents(g);
    if !c.is_gate(g)
        || subset.is_empty()
        || subset.len() >= parents.len()
        || subset.iter().any(|p| parents.binary_search(p).is_err())
    {
        return Err(CloneError::ImproperSubset(name));
    }
    let orig = original_name(&name);
    let next = (0..c.num_wires())
        .filter_map(|w| {
            let n = c.wire_name(w);
            (original_name(n) == orig && n != orig).then(|| n[orig.len() + CLONE_MARK.len()..].parse::<u64>().ok())?
        })
        .max()
        .unwrap_or(0)
        + 1;
    let copy = format!("{orig}{CLONE_MARK}{next}");
    let mut b = CircuitBuilder::new(c.name());
    for w in 0..c.num_wires() {
        match c.gate(w) {
            None => {
                b.input(c.wire_name(w));
            }
            Some(gate) => {
                let fanin: Vec<&str> = gate
                    .fanin
                    .iter()
                    .map(|&f| {
                        if f == g && subset.contains(&w) {
                            copy.as_str()
                        } else {
                            c.wire_name(f)
                        }
                    })
                    .collect();
                b.gate(c.wire_name(w), gate.kind, fanin);
                if w == g {
                    b.gate(copy.as_str(), gate.kind, gate.fanin.iter().map(|&f| c.wire_name(f)));
                }
            }
        }
    }
    for &o in c.outputs() {
        b.output(c.wire_name(o));
    }
    let out = b.build().expect("cloning preserves validity");
    Ok((out, copy))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloningStats {
    pub abstraction_before: usize,
    pub abstraction_after: usize,
    pub clones: usize,
}

/// Clones every candidate until a full pass creates nothing.
pub fn minimize_abstraction(c: &Circuit) -> (Circuit, CloneMap, CloningStats) {
    let mut cur = c.clone();
    let mut map = CloneMap::default();
    let before = abstraction(c).abstraction().len();
    loop {
        let view = abstraction(&cur);
        let candidates: Vec<String> = view
            .abstraction()
            .iter()
            .filter(|&&g| is_candidate(&cur, &view, g))
            .map(|&g| cur.wire_name(g).to_string())
            .collect();
        let mut created = 0;
        for name in candidates {
            let view = abstraction(&cur);
            let g = cur.wire(&name).unwrap();
            let Ok(parts) = parent_partition(&cur, &view, g) else {
                continue;
            };
            if parts.len() < 2 {
                continue;
            }
            let subsets: Vec<Vec<String>> = parts[1..]
                .iter()
                .map(|s| s.iter().map(|&w| cur.wire_name(w).to_string()).collect())
                .collect();
            for s in subsets {
                let g = cur.wire(&name).unwrap();
                let ids: Vec<WireId> = s.iter().map(|n| cur.wire(n).unwrap()).collect();
                let (next, copy) = clone_gate(&cur, g, &ids).expect("partition subsets are proper");
                map.insert(&copy, &name);
                cur = next;
                created += 1;
            }
        }
        if created == 0 {
            break;
        }
    }
    let after = abstraction(&cur).abstraction().len();
    let stats = CloningStats {
        abstraction_before: before,
        abstraction_after: after,
        clones: map.len(),
    };
    (cur, map, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::circuit::parse_bench;

    fn sorted_names(c: &Circuit, ws: &[WireId]) -> Vec<String> {
        let mut v: Vec<String> = ws.iter().map(|&w| c.wire_name(w).to_string()).collect();
        v.sort();
        v
    }

    #[test]
    fn partition_of_b() {
        let c = bundled::circuit("paperlike_fig3").unwrap();
        let v = abstraction(&c);
        let parts = parent_partition(&c, &v, c.wire("B").unwrap()).unwrap();
        let named: Vec<Vec<String>> = parts.iter().map(|p| sorted_names(&c, p)).collect();
        assert_eq!(named, vec![vec!["A", "E"], vec!["D"]]);
    }

    #[test]
    fn cloning_b_per_d_shrinks_abstraction() {
        let c = bundled::circuit("paperlike_fig3").unwrap();
        let (cl, copy) = clone_gate(&c, c.wire("B").unwrap(), &[c.wire("D").unwrap()]).unwrap();
        assert_eq!(copy, "B__c1");
        let v = abstraction(&cl);
        assert_eq!(sorted_names(&cl, v.abstraction()), ["A", "D", "K", "V"]);
        assert_eq!(cl, bundled::circuit("paperlike_fig4").unwrap().with_name(cl.name()));
    }

    #[test]
    fn cloning_a_cone_root_does_not_shrink() {
        let c = bundled::circuit("paperlike_fig4").unwrap();
        let before = abstraction(&c).abstraction().len();
        let (cl, _) = clone_gate(&c, c.wire("D").unwrap(), &[c.wire("K").unwrap()]).unwrap();
        let v = abstraction(&cl);
        assert!(v.abstraction().len() >= before);
        assert!(v.abstraction().contains(&cl.wire("B__c1").unwrap()));
        assert!(parent_partition(&c, &abstraction(&c), c.wire("D").unwrap()).is_err());
    }

    #[test]
    fn naive_bound_with_distinct_cones() {
        // g feeds three parents, each the root of its own output cone.
        let c = parse_bench(
            "INPUT(a)\nINPUT(b)\nOUTPUT(p1)\nOUTPUT(p2)\nOUTPUT(p3)\n\
             g = AND(a, b)\np1 = NOT(g)\np2 = BUFF(g)\np3 = OR(g, a)",
        )
        .unwrap();
        let v = abstraction(&c);
        let parts = parent_partition(&c, &v, c.wire("g").unwrap()).unwrap();
        assert_eq!(parts.len(), 3);
        let (m, map, stats) = minimize_abstraction(&c);
        assert_eq!(
            (stats.clones, stats.abstraction_before, stats.abstraction_after),
            (2, 4, 3)
        );
        assert_eq!(map.clones_of("g").len(), 2);
        assert_eq!(abstraction(&m).abstraction().len(), 3);
    }

    #[test]
    fn single_parent_needs_no_clone() {
        let c = parse_bench("INPUT(a)\nOUTPUT(y)\nOUTPUT(z)\ng = NOT(a)\ny = BUFF(g)\nz = NOT(a)").unwrap();
        let v = abstraction(&c);
        assert!(!is_candidate(&c, &v, c.wire("g").unwrap()));
        let (m, map, _) = minimize_abstraction(&c);
        assert!(map.is_empty());
        assert_eq!(m, c);
    }

    #[test]
    fn clone_map_round_trip() {
        let mut m = CloneMap::default();
        m.insert("B__c1", "B");
        m.insert("B__c2", "B__c1");
        assert_eq!(m.original("B__c2"), "B");
        assert_eq!(CloneMap::parse(&m.render()).unwrap(), m);
        assert_eq!(m.copies("B__c1"), ["B", "B__c1", "B__c2"]);
        assert_eq!(original_name("x__c12"), "x");
        assert_eq!(original_name("x__cy"), "x__cy");
    }

    #[test]
    fn cone_roots_only_is_unchanged() {
        let c = bundled::circuit("c499").unwrap();
        let (m, map, stats) = minimize_abstraction(&c);
        assert_eq!(map.len(), 0);
        assert_eq!(stats.abstraction_before, stats.abstraction_after);
        assert_eq!(m.num_gates(), c.num_gates());
    }
}
