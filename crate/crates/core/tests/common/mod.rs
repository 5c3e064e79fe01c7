//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqdiag::circuit::{parse_bench, Circuit};

const KINDS: [&str; 8] = ["AND", "OR", "NAND", "NOR", "NOT", "BUFF", "XOR", "XNOR"];

/// Random acyclic netlist: each gate reads distinct earlier wires; gates
/// without readers become outputs, plus some extra outputs.
pub fn random_netlist(seed: u64, inputs: usize, gates: usize, max_fanin: usize) -> Circuit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    let mut wires: Vec<String> = (0..inputs).map(|i| format!("i{i}")).collect();
    let mut read = vec![false; inputs + gates];
    let mut defs = Vec::new();
    for g in 0..gates {
        let kind = KINDS[rng.gen_range(0..KINDS.len())];
        let unary = matches!(kind, "NOT" | "BUFF");
        let k = if unary {
            1
        } else {
            rng.gen_range(2..=max_fanin.max(2)).min(wires.len())
        };
        let mut pick = BTreeSet::new();
        while pick.len() < k {
            pick.insert(rng.gen_range(0..wires.len()));
        }
        for &p in &pick {
            read[p] = true;
        }
        let fanin: Vec<&str> = pick.iter().map(|&p| wires[p].as_str()).collect();
        defs.push(format!("g{g} = {kind}({})", fanin.join(", ")));
        wires.push(format!("g{g}"));
    }
    for w in &wires[..inputs] {
        text.push_str(&format!("INPUT({w})\n"));
    }
    for (i, w) in wires.iter().enumerate().skip(inputs) {
        if !read[i] || rng.gen_bool(0.15) {
            text.push_str(&format!("OUTPUT({w})\n"));
        }
    }
    for d in defs {
        text.push_str(&d);
        text.push('\n');
    }
    parse_bench(&text).unwrap()
}

pub fn bits(n: usize, x: u64) -> Vec<bool> {
    (0..n).map(|i| x >> i & 1 == 1).collect()
}
