//! Enumeration oracles shared by unit tests.

use crate::compile::{Cnf, Evidence, Weights};

/// Whether the assignment packed into `bits` (bit `v - 1` for variable `v`)
/// satisfies every clause.
pub fn satisfies(cnf: &Cnf, bits: u64) -> bool {
    cnf.clauses
        .iter()
        .all(|cl| cl.iter().any(|&l| (bits >> (l.unsigned_abs() - 1) & 1 == 1) == (l > 0)))
}

pub struct Joint {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

/// Weighted count of models consistent with `e`, plus the per-literal joints.
pub fn brute_force(cnf: &Cnf, w: &Weights, e: &Evidence) -> (f64, Joint) {
    let n = cnf.num_vars as usize;
    assert!(n <= 24, "too many variables to enumerate");
    let mut j = Joint {
        pos: vec![0.0; n + 1],
        neg: vec![0.0; n + 1],
    };
    let mut total = 0.0;
    for bits in 0u64..(1 << n) {
        let consistent = (1..=n).all(|v| e.get(v as u32).is_none_or(|b| b == (bits >> (v - 1) & 1 == 1)));
        if !consistent || !satisfies(cnf, bits) {
            continue;
        }
        let weight: f64 = (1..=n)
            .map(|v| {
                let (p, q) = w.get(v as u32);
                if bits >> (v - 1) & 1 == 1 {
                    p
                } else {
                    q
                }
            })
            .product();
        total += weight;
        for v in 1..=n {
            if bits >> (v - 1) & 1 == 1 {
                j.pos[v] += weight;
            } else {
                j.neg[v] += weight;
            }
        }
    }
    (total, j)
}
