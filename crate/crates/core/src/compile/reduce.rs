//! Cardinality-based pruning: drop branches whose minimum number of
//! faults exceeds a bound, in two linear passes over the graph.

use thiserror::Error;

use super::{compact, var_of, Ddnnf, Node, NodeStore, Var};

/// How an and-node passes its bound down to a child.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AndRule {
    /// `max(k(p), k(n) - t_p)`, with `t_p` the siblings' minimum cardinality.
    /// Never removes a model within the bound.
    #[default]
    Residual,
    /// `max(k(p), t_p)`. Can remove models within the bound; kept for
    /// comparison only.
    SiblingSum,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReduceError {
    #[error("bound {bound} is below the minimum fault cardinality {minimum}")]
    BelowMinimum { minimum: u64, bound: u64 },
}

const INF: i64 = 1 << 40;

/// Minimum number of non-exempt negated health literals per node.
fn min_cards(d: &Ddnnf, health: &[Var], exempt: &[Var]) -> Vec<i64> {
    let mut counts = vec![false; d.num_vars() as usize + 1];
    for &h in health {
        counts[h as usize] = !exempt.contains(&h);
    }
    let mut mc = vec![0i64; d.size()];
    for (i, n) in d.nodes().iter().enumerate() {
        mc[i] = match n {
            Node::True => 0,
            Node::False => INF,
            Node::Lit(l) => i64::from(*l < 0 && counts[var_of(*l) as usize]),
            Node::And(ch) => ch.iter().map(|&c| mc[c as usize]).sum::<i64>().min(INF),
            Node::Or { children, .. } => children.iter().map(|&c| mc[c as usize]).min().unwrap_or(INF),
        };
    }
    mc
}

/// Fewest non-exempt faults in any model, `None` when there is no model.
pub fn min_cardinality(d: &Ddnnf, health: &[Var], exempt: &[Var]) -> Option<u64> {
    let m = min_cards(d, health, exempt)[d.root() as usize];
    (m < INF).then_some(m as u64)
}

/// Prunes models with more than `bound` faults among `health` variables,
/// ignoring those in `exempt`.
pub fn reduce(d: &Ddnnf, health: &[Var], exempt: &[Var], bound: u64) -> Result<Ddnnf, ReduceError> {
    reduce_with(d, health, exempt, bound, AndRule::Residual)
}

pub fn reduce_with(d: &Ddnnf, health: &[Var], exempt: &[Var], bound: u64, rule: AndRule) -> Result<Ddnnf, ReduceError> {
    let mc = min_cards(d, health, exempt);
    let root = d.root() as usize;
    if mc[root] > bound as i64 {
        return Err(ReduceError::BelowMinimum {
            minimum: mc[root].min(INF) as u64,
            bound,
        });
    }
    let mut k = vec![i64::MIN; d.size()];
    k[root] = bound as i64;
    let mut cut: Vec<Vec<u32>> = vec![Vec::new(); d.size()];
    for i in (0..d.size()).rev() {
        if k[i] == i64::MIN {
            continue;
        }
        match &d.nodes()[i] {
            Node::Or { children, .. } => {
                for &p in children {
                    if mc[p as usize] > k[i] {
                        cut[i].push(p);
                    } else {
                        k[p as usize] = k[p as usize].max(k[i]);
                    }
                }
            }
            Node::And(children) => {
                let total: i64 = children.iter().map(|&c| mc[c as usize]).sum();
                for &p in children {
                    let t = total - mc[p as usize];
                    let pushed = match rule {
                        AndRule::Residual => k[i] - t,
                        AndRule::SiblingSum => t,
                    };
                    k[p as usize] = k[p as usize].max(pushed);
                }
            }
            _ => {}
        }
    }
    let mut store = NodeStore::default();
    let mut map = vec![0u32; d.size()];
    for (i, n) in d.nodes().iter().enumerate() {
        map[i] = match n {
            Node::True => store.constant(true),
            Node::False => store.constant(false),
            Node::Lit(l) => store.add(Node::Lit(*l)),
            Node::And(ch) => {
                let c = ch.iter().map(|&c| map[c as usize]).collect();
                store.and(c)
            }
            Node::Or { var, children } => {
                let kept: Vec<u32> = children
                    .iter()
                    .filter(|c| !cut[i].contains(c))
                    .map(|&c| map[c as usize])
                    .filter(|&c| store.nodes[c as usize] != Node::False)
                    .collect();
                match kept.len() {
                    0 => store.constant(false),
                    1 => kept[0],
                    _ => store.add(Node::Or {
                        var: *var,
                        children: kept,
                    }),
                }
            }
        };
    }
    Ok(compact(store.nodes, map[root], d.num_vars()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compile::{compile, Cnf, Evidence, Weights};

    fn models(d: &mut Ddnnf) -> Vec<u32> {
        let n = d.num_vars();
        (0u32..1 << n)
            .filter(|bits| {
                let mut e = Evidence::new(n);
                for v in 1..=n {
                    e.set(v, bits >> (v - 1) & 1 == 1);
                }
                d.evaluate(&Weights::uniform(n), &e);
                d.last_count() > 0
            })
            .collect()
    }

    #[test]
    fn at_least_one_fault_with_bound_one() {
        // Models: !ok1 ok2, ok1 !ok2, !ok1 !ok2.
        let f = Cnf {
            num_vars: 2,
            clauses: vec![vec![-1, -2]],
        };
        let d = compile(&f).unwrap();
        let mut r = reduce(&d, &[1, 2], &[], 1).unwrap();
        r.validate().unwrap();
        assert_eq!(models(&mut r), [0b01, 0b10]);
    }

    #[test]
    fn generous_bound_keeps_everything() {
        let f = Cnf {
            num_vars: 3,
            clauses: vec![vec![-1, -2, 3]],
        };
        let mut d = compile(&f).unwrap();
        let mut r = reduce(&d, &[1, 2, 3], &[], 3).unwrap();
        assert_eq!(models(&mut r), models(&mut d));
    }

    #[test]
    fn exempt_faults_do_not_count() {
        let f = Cnf {
            num_vars: 2,
            clauses: vec![vec![-1], vec![-2]],
        };
        let d = compile(&f).unwrap();
        assert!(matches!(
            reduce(&d, &[1, 2], &[], 1),
            Err(ReduceError::BelowMinimum { minimum: 2, bound: 1 })
        ));
        assert_eq!(min_cardinality(&d, &[1, 2], &[1]), Some(1));
        assert!(reduce(&d, &[1, 2], &[1], 1).is_ok());
    }

    #[test]
    fn sibling_sum_reading_loses_models_within_the_bound() {
        // Two free health variables under one and-node. With bound 1 the
        // single-fault models must survive (the residual rule is allowed to
        // keep the double fault too); the sibling-sum rule gives each side a
        // bound of 0 and keeps only the all-healthy model.
        let d = compile(&Cnf {
            num_vars: 2,
            clauses: vec![],
        })
        .unwrap();
        let mut sound = reduce_with(&d, &[1, 2], &[], 1, AndRule::Residual).unwrap();
        assert_eq!(models(&mut sound), [0b00, 0b01, 0b10, 0b11]);
        let mut literal = reduce_with(&d, &[1, 2], &[], 1, AndRule::SiblingSum).unwrap();
        assert_eq!(models(&mut literal), [0b11]);
    }
}
