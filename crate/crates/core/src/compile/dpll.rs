//! Exhaustive DPLL search producing decision-DNNF: connected components of
//! the residual clause graph are compiled independently and cached, and
//! every branch becomes an or-node on the branching variable.

use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant};

use rustc_hash::FxHashMap;

use super::{compact, var_of, Cnf, CompileError, Ddnnf, Lit, Node, NodeStore};

/// Which variable a component branches on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Branching {
    /// Latest variable of a min-fill elimination order of the residual
    /// clause graph, so search follows a tree decomposition.
    #[default]
    MinFill,
    /// Most occurrences in the component's open clauses, ties to the lowest id.
    MostFrequent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompileOptions {
    pub branching: Branching,
    /// Maximum node count, checked during search and after smoothing.
    pub node_budget: usize,
    pub time_budget: Option<Duration>,
    /// Literals conditioned on before search (observation simplification).
    pub assumptions: Vec<Lit>,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            branching: Branching::default(),
            node_budget: 4_000_000,
            time_budget: None,
            assumptions: Vec::new(),
        }
    }
}

pub fn compile(cnf: &Cnf) -> Result<Ddnnf, CompileError> {
    compile_with(cnf, &CompileOptions::default())
}

/// Compiles on a dedicated thread with a large stack; search depth grows
/// with the number of variables.
pub fn compile_with(cnf: &Cnf, opts: &CompileOptions) -> Result<Ddnnf, CompileError> {
    std::thread::scope(|s| {
        let handle = std::thread::Builder::new()
            .name("dnnf-compile".into())
            .stack_size(256 << 20)
            .spawn_scoped(s, || run(cnf, opts))
            .expect("spawn compiler thread");
        handle.join().unwrap_or_else(|e| std::panic::resume_unwind(e))
    })
}

fn run(cnf: &Cnf, opts: &CompileOptions) -> Result<Ddnnf, CompileError> {
    let mut clauses = cnf.clauses.clone();
    for &a in &opts.assumptions {
        if a == 0 || var_of(a) > cnf.num_vars {
            return Err(CompileError::Format(format!("assumption {a} out of range")));
        }
        clauses.push(vec![a]);
    }
    let mut c = Compiler::new(cnf.num_vars, clauses, opts);
    let root = c.top()?;
    let d = compact(std::mem::take(&mut c.store.nodes), root, cnf.num_vars).smooth();
    if d.size() > opts.node_budget {
        return Err(CompileError::NodeBudget(opts.node_budget));
    }
    Ok(d)
}

fn lit_index(l: Lit) -> usize {
    2 * l.unsigned_abs() as usize + usize::from(l < 0)
}

struct Compiler<'a> {
    clauses: Vec<Vec<Lit>>,
    occ: Vec<Vec<u32>>,
    value: Vec<i8>,
    trail: Vec<Lit>,
    store: NodeStore,
    cache: FxHashMap<Box<[u32]>, u32>,
    /// Union-find and grouping scratch indexed by variable.
    parent: Vec<u32>,
    seen: Vec<u32>,
    slot: Vec<u32>,
    stamp: u32,
    /// Elimination position per variable; higher branches first.
    rank: Vec<u32>,
    opts: &'a CompileOptions,
    start: Instant,
    calls: u64,
}

impl<'a> Compiler<'a> {
    fn new(num_vars: u32, clauses: Vec<Vec<Lit>>, opts: &'a CompileOptions) -> Self {
        let mut occ = vec![Vec::new(); 2 * num_vars as usize + 2];
        for (i, cl) in clauses.iter().enumerate() {
            for &l in cl {
                occ[lit_index(l)].push(i as u32);
            }
        }
        Compiler {
            clauses,
            occ,
            value: vec![0; num_vars as usize + 1],
            trail: Vec::new(),
            store: NodeStore::default(),
            cache: FxHashMap::default(),
            parent: (0..=num_vars).collect(),
            seen: vec![0; num_vars as usize + 1],
            slot: vec![0; num_vars as usize + 1],
            stamp: 0,
            rank: Vec::new(),
            opts,
            start: Instant::now(),
            calls: 0,
        }
    }

    fn lit_value(&self, l: Lit) -> i8 {
        let v = self.value[l.unsigned_abs() as usize];
        if l > 0 {
            v
        } else {
            -v
        }
    }

    fn assign(&mut self, l: Lit) {
        self.value[l.unsigned_abs() as usize] = if l > 0 { 1 } else { -1 };
        self.trail.push(l);
    }

    fn undo(&mut self, mark: usize) {
        for &l in &self.trail[mark..] {
            self.value[l.unsigned_abs() as usize] = 0;
        }
        self.trail.truncate(mark);
    }

    fn satisfied(&self, cid: u32) -> bool {
        self.clauses[cid as usize].iter().any(|&l| self.lit_value(l) > 0)
    }

    /// Unit propagation of the trail from `from`; false on conflict.
    fn propagate(&mut self, from: usize) -> bool {
        let mut i = from;
        while i < self.trail.len() {
            let falsified = -self.trail[i];
            i += 1;
            let idx = lit_index(falsified);
            for k in 0..self.occ[idx].len() {
                let cid = self.occ[idx][k] as usize;
                let mut open = 0;
                let mut last = 0;
                let mut sat = false;
                for &l in &self.clauses[cid] {
                    match self.lit_value(l) {
                        1 => {
                            sat = true;
                            break;
                        }
                        0 => {
                            open += 1;
                            last = l;
                        }
                        _ => {}
                    }
                }
                if sat {
                    continue;
                }
                match open {
                    0 => return false,
                    1 => self.assign(last),
                    _ => {}
                }
            }
        }
        true
    }

    fn top(&mut self) -> Result<u32, CompileError> {
        if self.clauses.iter().any(|c| c.is_empty()) {
            return Ok(self.store.constant(false));
        }
        for cid in 0..self.clauses.len() {
            if let [l] = self.clauses[cid][..] {
                match self.lit_value(l) {
                    -1 => return Ok(self.store.constant(false)),
                    0 => self.assign(l),
                    _ => {}
                }
            }
        }
        if !self.propagate(0) {
            return Ok(self.store.constant(false));
        }
        let open: Vec<u32> = (0..self.clauses.len() as u32).filter(|&c| !self.satisfied(c)).collect();
        if self.opts.branching == Branching::MinFill {
            self.rank = self.elimination_rank(&open);
        }
        let sub = self.compile_set(open)?;
        let mut parts: Vec<u32> = self
            .trail
            .clone()
            .into_iter()
            .map(|l| self.store.add(Node::Lit(l)))
            .collect();
        parts.push(sub);
        Ok(self.store.and(parts))
    }

    fn check_budget(&mut self) -> Result<(), CompileError> {
        self.calls += 1;
        if self.store.nodes.len() > self.opts.node_budget {
            return Err(CompileError::NodeBudget(self.opts.node_budget));
        }
        if let Some(t) = self.opts.time_budget {
            if self.calls.is_multiple_of(256) && self.start.elapsed() > t {
                return Err(CompileError::TimeBudget);
            }
        }
        Ok(())
    }

    /// Min-fill elimination order over the primal graph of the open clauses
    /// (ties: fewer neighbours, then lower id). Returns each variable's
    /// position; variables outside the graph get 0.
    fn elimination_rank(&self, open: &[u32]) -> Vec<u32> {
        let n = self.value.len();
        let words = n.div_ceil(64);
        let mut adj = vec![vec![0u64; words]; n];
        let mut present = vec![false; n];
        for &cid in open {
            let vs: Vec<usize> = self.clauses[cid as usize]
                .iter()
                .filter(|&&l| self.lit_value(l) == 0)
                .map(|&l| var_of(l) as usize)
                .collect();
            for &a in &vs {
                present[a] = true;
                for &b in &vs {
                    if a != b {
                        adj[a][b / 64] |= 1 << (b % 64);
                    }
                }
            }
        }
        let neighbours = |adj: &Vec<Vec<u64>>, v: usize| -> Vec<usize> {
            let mut out = Vec::new();
            for (w, &bits) in adj[v].iter().enumerate() {
                let mut b = bits;
                while b != 0 {
                    out.push(w * 64 + b.trailing_zeros() as usize);
                    b &= b - 1;
                }
            }
            out
        };
        let score = |adj: &Vec<Vec<u64>>, v: usize| -> (usize, usize, usize) {
            let nb = neighbours(adj, v);
            let mut fill = 0;
            for (i, &a) in nb.iter().enumerate() {
                for &b in &nb[i + 1..] {
                    if adj[a][b / 64] >> (b % 64) & 1 == 0 {
                        fill += 1;
                    }
                }
            }
            (fill, nb.len(), v)
        };
        let mut current = vec![(0, 0, 0); n];
        let mut queue = BTreeSet::new();
        for v in 1..n {
            if present[v] {
                current[v] = score(&adj, v);
                queue.insert(current[v]);
            }
        }
        let mut rank = vec![0u32; n];
        let mut next = 1;
        while let Some(top) = queue.pop_first() {
            let v = top.2;
            rank[v] = next;
            next += 1;
            let nb = neighbours(&adj, v);
            for &a in &nb {
                adj[a][v / 64] &= !(1 << (v % 64));
                for &b in &nb {
                    if a != b {
                        adj[a][b / 64] |= 1 << (b % 64);
                    }
                }
            }
            adj[v].iter_mut().for_each(|w| *w = 0);
            let mut touched: BTreeSet<usize> = nb.iter().copied().collect();
            for &a in &nb {
                touched.extend(neighbours(&adj, a));
            }
            for u in touched {
                if queue.remove(&current[u]) {
                    current[u] = score(&adj, u);
                    queue.insert(current[u]);
                }
            }
        }
        rank
    }

    fn find(&mut self, mut v: u32) -> u32 {
        while self.parent[v as usize] != v {
            let up = self.parent[self.parent[v as usize] as usize];
            self.parent[v as usize] = up;
            v = up;
        }
        v
    }

    /// Compiles the conjunction of the open clauses `cids`.
    fn compile_set(&mut self, cids: Vec<u32>) -> Result<u32, CompileError> {
        if cids.is_empty() {
            return Ok(self.store.constant(true));
        }
        self.check_budget()?;
        self.stamp += 1;
        let stamp = self.stamp;
        let mut vars = Vec::new();
        for &cid in &cids {
            for &l in &self.clauses[cid as usize] {
                let v = var_of(l);
                if self.value[v as usize] == 0 && self.seen[v as usize] != stamp {
                    self.seen[v as usize] = stamp;
                    self.parent[v as usize] = v;
                    vars.push(v);
                }
            }
        }
        vars.sort_unstable();
        for &cid in &cids {
            let mut first = None;
            for k in 0..self.clauses[cid as usize].len() {
                let l = self.clauses[cid as usize][k];
                if self.lit_value(l) != 0 {
                    continue;
                }
                let r = self.find(var_of(l));
                match first {
                    None => first = Some(r),
                    Some(f) if f != r => self.parent[r as usize] = f,
                    _ => {}
                }
            }
        }
        // Group index per union-find root, reusing the scratch slots.
        let mut groups: Vec<(Vec<u32>, Vec<u32>)> = Vec::new();
        for &v in &vars {
            let r = self.find(v) as usize;
            if self.seen[r] != stamp + 1 {
                self.seen[r] = stamp + 1;
                self.slot[r] = groups.len() as u32;
                groups.push((Vec::new(), Vec::new()));
            }
            groups[self.slot[r] as usize].0.push(v);
        }
        self.stamp += 1;
        for &cid in &cids {
            let l = *self.clauses[cid as usize]
                .iter()
                .find(|&&l| self.lit_value(l) == 0)
                .expect("open clause has an unassigned literal");
            let r = self.find(var_of(l)) as usize;
            groups[self.slot[r] as usize].1.push(cid);
        }
        let mut children = Vec::with_capacity(groups.len());
        for (vs, cs) in groups {
            let n = self.compile_component(vs, cs)?;
            if self.store.nodes[n as usize] == Node::False {
                return Ok(n);
            }
            children.push(n);
        }
        Ok(self.store.and(children))
    }

    fn compile_component(&mut self, vars: Vec<u32>, cids: Vec<u32>) -> Result<u32, CompileError> {
        let mut key = vars.clone();
        key.push(u32::MAX);
        key.extend_from_slice(&cids);
        let key = key.into_boxed_slice();
        if let Some(&n) = self.cache.get(&key) {
            return Ok(n);
        }
        let branch = match self.opts.branching {
            Branching::MinFill => *vars
                .iter()
                .max_by_key(|&&v| self.rank[v as usize])
                .expect("component has variables"),
            Branching::MostFrequent => {
                let mut freq: HashMap<u32, u32> = HashMap::new();
                for &cid in &cids {
                    for &l in &self.clauses[cid as usize] {
                        if self.lit_value(l) == 0 {
                            *freq.entry(var_of(l)).or_default() += 1;
                        }
                    }
                }
                vars.iter()
                    .copied()
                    .max_by_key(|v| (freq.get(v).copied().unwrap_or(0), std::cmp::Reverse(*v)))
                    .expect("component has variables")
            }
        };
        let mut kids = [0u32; 2];
        for (slot, lit) in [branch as Lit, -(branch as Lit)].into_iter().enumerate() {
            let mark = self.trail.len();
            self.assign(lit);
            kids[slot] = if self.propagate(mark) {
                let implied: Vec<Lit> = self.trail[mark..].to_vec();
                let open: Vec<u32> = cids.iter().copied().filter(|&c| !self.satisfied(c)).collect();
                let result = self.compile_set(open);
                let sub = match result {
                    Ok(s) => s,
                    Err(e) => {
                        self.undo(mark);
                        return Err(e);
                    }
                };
                let mut parts: Vec<u32> = implied.into_iter().map(|l| self.store.add(Node::Lit(l))).collect();
                parts.push(sub);
                self.store.and(parts)
            } else {
                self.store.constant(false)
            };
            self.undo(mark);
        }
        let is_false = |n: u32, s: &NodeStore| s.nodes[n as usize] == Node::False;
        let node = match (is_false(kids[0], &self.store), is_false(kids[1], &self.store)) {
            (true, _) => kids[1],
            (_, true) => kids[0],
            _ => self.store.add(Node::Or {
                var: branch,
                children: kids.to_vec(),
            }),
        };
        self.cache.insert(key, node);
        Ok(node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compile::{Evidence, Weights};
    use crate::testutil::brute_force;

    fn cnf(num_vars: u32, clauses: &[&[Lit]]) -> Cnf {
        Cnf {
            num_vars,
            clauses: clauses.iter().map(|c| c.to_vec()).collect(),
        }
    }

    #[test]
    fn vacuous_formula_counts_all_models() {
        let mut d = compile(&cnf(2, &[])).unwrap();
        d.validate().unwrap();
        d.evaluate(&Weights::uniform(2), &Evidence::new(2));
        assert_eq!(d.last_count(), 4);
    }

    #[test]
    fn contradiction_compiles_to_false() {
        let mut d = compile(&cnf(1, &[&[1], &[-1]])).unwrap();
        assert!(d.is_false());
        assert_eq!(d.evaluate(&Weights::uniform(1), &Evidence::new(1)), 0.0);
    }

    #[test]
    fn counts_match_enumeration() {
        let f = cnf(5, &[&[1, 2], &[-1, 3], &[-3, -4, 5], &[2, 4]]);
        let mut d = compile(&f).unwrap();
        d.validate().unwrap();
        let mut w = Weights::uniform(5);
        w.set(1, 0.3, 0.7);
        w.set(4, 0.9, 0.1);
        let e = Evidence::new(5);
        let (total, joint) = brute_force(&f, &w, &e);
        assert!((d.evaluate(&w, &e) - total).abs() < 1e-12);
        let m = d.differentiate().unwrap();
        for v in 1..=5 {
            assert!((m.pos[v] - joint.pos[v]).abs() < 1e-12);
            assert!((m.neg[v] - joint.neg[v]).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_parts_become_an_and_node() {
        let d = compile(&cnf(4, &[&[1, 2], &[3, 4]])).unwrap();
        assert!(matches!(d.nodes()[d.root() as usize], Node::And(_)));
    }

    #[test]
    fn assumptions_condition_the_formula() {
        let f = cnf(2, &[&[1, 2]]);
        let opts = CompileOptions {
            assumptions: vec![-1],
            ..CompileOptions::default()
        };
        let mut d = compile_with(&f, &opts).unwrap();
        d.validate().unwrap();
        d.evaluate(&Weights::uniform(2), &Evidence::new(2));
        assert_eq!(d.last_count(), 1);
    }

    #[test]
    fn node_budget_is_reported() {
        let f = cnf(6, &[&[1, 2, 3], &[-1, 4], &[-2, 5], &[-3, 6], &[4, 5, 6]]);
        let opts = CompileOptions {
            node_budget: 3,
            ..CompileOptions::default()
        };
        assert_eq!(compile_with(&f, &opts).unwrap_err(), CompileError::NodeBudget(3));
    }

    #[test]
    fn compilation_is_deterministic() {
        let f = cnf(6, &[&[1, -2, 3], &[-1, 4], &[2, 5, -6], &[-3, 6], &[4, -5]]);
        assert_eq!(compile(&f).unwrap().nodes(), compile(&f).unwrap().nodes());
    }
}
