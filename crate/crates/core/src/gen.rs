//! Random circuits composed from gates and ten-gate cone templates, and
//! random fault scenarios with abnormal test vectors.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundled;
use crate::circuit::{Circuit, CircuitBuilder, FaultScenario, GateKind, NetlistError, WireId};

/// Recorded in manifests so seeded outputs can be reproduced elsewhere.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng/rand_chacha-0.3 seed_from_u64";

/// Input vectors tried per scenario before the fault set is skipped.
pub const MAX_DRAWS: usize = 1000;

pub const GATE_POOL: [GateKind; 6] = [
    GateKind::Or,
    GateKind::Nor,
    GateKind::And,
    GateKind::Nand,
    GateKind::Not,
    GateKind::Buffer,
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GenError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Netlist(#[from] NetlistError),
}

/// `(N, P, I)`: component count, percentage of cones, maximum gate fan-in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenSpec {
    pub components: usize,
    pub cone_percent: u32,
    pub max_fanin: usize,
    pub seed: u64,
}

impl GenSpec {
    pub fn new(components: usize, cone_percent: u32, max_fanin: usize, seed: u64) -> GenSpec {
        GenSpec {
            components,
            cone_percent,
            max_fanin,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.components == 0 {
            return Err(GenError::Spec("N must be at least 1".into()));
        }
        if self.cone_percent > 100 {
            return Err(GenError::Spec("P must lie in 0..=100".into()));
        }
        if self.max_fanin == 0 {
            return Err(GenError::Spec("I must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of cone instances, rounding half up.
    pub fn cones(&self) -> usize {
        (self.cone_percent as usize * self.components + 50) / 100
    }

    /// Gate total when every template has ten gates.
    pub fn expected_gates(&self) -> usize {
        let c = self.cones();
        (self.components - c) + 10 * c
    }

    pub fn label(&self) -> String {
        format!(
            "gen_{}_{}_{}_s{}",
            self.components, self.cone_percent, self.max_fanin, self.seed
        )
    }
}

enum Block {
    Gate(GateKind, usize),
    Cone(usize),
}

/// Generates a circuit from the bundled cone templates.
pub fn generate_circuit(spec: &GenSpec) -> Result<Circuit, GenError> {
    generate_with(spec, &bundled::templates()?)
}

/// Component `i` drives wire `n{i}`; cone internals are `n{i}_{wire}` and
/// primary inputs `i{k}`. Outputs nobody consumes become primary outputs.
pub fn generate_with(spec: &GenSpec, templates: &[Circuit]) -> Result<Circuit, GenError> {
    spec.validate()?;
    let c = spec.cones();
    if c > 0 && templates.is_empty() {
        return Err(GenError::Spec("cones requested but no templates given".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut blocks: Vec<Block> = (0..c).map(|_| Block::Cone(rng.gen_range(0..templates.len()))).collect();
    for _ in c..spec.components {
        let kind = GATE_POOL[rng.gen_range(0..GATE_POOL.len())];
        let arity = if kind.is_unary() || spec.max_fanin < 2 {
            1
        } else {
            rng.gen_range(2..=spec.max_fanin)
        };
        blocks.push(Block::Gate(kind, arity));
    }
    blocks.shuffle(&mut rng);

    let mut primary: Vec<String> = Vec::new();
    let mut used = vec![false; blocks.len()];
    let mut gates: Vec<(String, GateKind, Vec<String>)> = Vec::new();
    for (i, block) in blocks.iter().enumerate() {
        let arity = match block {
            Block::Gate(_, a) => *a,
            Block::Cone(t) => templates[*t].inputs().len(),
        };
        let picks = sample(&mut rng, i, arity.min(i)).into_vec();
        let mut ins: Vec<String> = picks
            .iter()
            .map(|&p| {
                used[p] = true;
                format!("n{p}")
            })
            .collect();
        while ins.len() < arity {
            ins.push(format!("i{}", primary.len()));
            primary.push(ins.last().unwrap().clone());
        }
        match block {
            Block::Gate(kind, _) => gates.push((format!("n{i}"), *kind, ins)),
            Block::Cone(t) => {
                let tmpl = &templates[*t];
                let out = tmpl.outputs()[0];
                let local = |w: WireId| -> String {
                    if let Some(k) = tmpl.inputs().iter().position(|&x| x == w) {
                        ins[k].clone()
                    } else if w == out {
                        format!("n{i}")
                    } else {
                        format!("n{i}_{}", tmpl.wire_name(w))
                    }
                };
                for g in tmpl.gates() {
                    gates.push((local(g.output), g.kind, g.fanin.iter().map(|&f| local(f)).collect()));
                }
            }
        }
    }
    let mut b = CircuitBuilder::new(spec.label());
    for p in &primary {
        b.input(p.as_str());
    }
    for (name, kind, fanin) in &gates {
        b.gate(name.as_str(), *kind, fanin.iter().map(String::as_str));
    }
    for (i, u) in used.iter().enumerate() {
        if !u {
            b.output(format!("n{i}"));
        }
    }
    Ok(b.build()?)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub scenarios: Vec<FaultScenario>,
    /// Fault sets for which no abnormal input vector was found.
    pub skipped: usize,
}

fn abnormal_vector(c: &Circuit, faulty: &[WireId], rng: &mut ChaCha8Rng) -> Option<FaultScenario> {
    for _ in 0..MAX_DRAWS {
        let inputs: Vec<bool> = (0..c.inputs().len()).map(|_| rng.gen()).collect();
        let healthy = c.evaluate(&inputs).ok()?;
        let faulty_vals = c.simulate(&inputs, faulty).ok()?;
        let expected = c.output_values(&faulty_vals);
        if expected != c.output_values(&healthy) {
            return Some(FaultScenario {
                faulty: faulty.to_vec(),
                inputs,
                expected_outputs: expected,
            });
        }
    }
    None
}

/// `count` scenarios, each a uniformly random set of `cardinality` gates
/// with an input vector that exposes them.
pub fn generate_scenarios(c: &Circuit, cardinality: usize, count: usize, seed: u64) -> ScenarioSet {
    let gates = c.gate_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ScenarioSet::default();
    if cardinality > gates.len() {
        set.skipped = count;
        return set;
    }
    for _ in 0..count {
        let mut faulty: Vec<WireId> = sample(&mut rng, gates.len(), cardinality)
            .into_iter()
            .map(|k| gates[k])
            .collect();
        faulty.sort_unstable();
        match abnormal_vector(c, &faulty, &mut rng) {
            Some(s) => set.scenarios.push(s),
            None => set.skipped += 1,
        }
    }
    set
}

/// One single-fault scenario per gate, in gate id order.
pub fn exhaustive_single_faults(c: &Circuit, seed: u64) -> ScenarioSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ScenarioSet::default();
    for g in c.gate_ids() {
        match abnormal_vector(c, &[g], &mut rng) {
            Some(s) => set.scenarios.push(s),
            None => set.skipped += 1,
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{parse_bench, render_bench};

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(GenSpec::new(8, 25, 2, 0).cones(), 2);
        assert_eq!(GenSpec::new(2, 25, 2, 0).cones(), 1);
        assert_eq!(GenSpec::new(1, 49, 2, 0).cones(), 0);
        assert_eq!(GenSpec::new(32, 25, 5, 0).expected_gates(), 104);
    }

    /// Component prefixes (`n{i}`) that were instantiated from a template.
    fn cone_instances(c: &Circuit) -> std::collections::BTreeSet<String> {
        c.gate_ids()
            .iter()
            .filter_map(|&g| c.wire_name(g).split_once('_').map(|(p, _)| p.to_string()))
            .collect()
    }

    fn free_gates(c: &Circuit) -> Vec<WireId> {
        let cones = cone_instances(c);
        c.gate_ids()
            .into_iter()
            .filter(|&g| {
                let n = c.wire_name(g);
                !n.contains('_') && !cones.contains(n)
            })
            .collect()
    }

    #[test]
    fn small_spec_has_two_cones_and_six_gates() {
        let c = generate_circuit(&GenSpec::new(8, 25, 2, 7)).unwrap();
        assert_eq!(cone_instances(&c).len(), 2);
        assert_eq!(free_gates(&c).len(), 6);
        assert_eq!(c.num_gates(), 26);
    }

    #[test]
    fn gate_count_law_and_fanin() {
        for n in [32, 40, 48, 56, 64, 72, 152] {
            let spec = GenSpec::new(n, 25, 5, n as u64);
            let c = generate_circuit(&spec).unwrap();
            assert_eq!(c.num_gates(), spec.expected_gates());
            for g in free_gates(&c) {
                assert!(c.gate(g).unwrap().fanin.len() <= 5);
            }
            for g in c.gates() {
                let mut f = g.fanin.clone();
                f.sort_unstable();
                f.dedup();
                assert_eq!(f.len(), g.fanin.len(), "repeated input on {}", c.wire_name(g.output));
            }
        }
    }

    #[test]
    fn bench_round_trip_and_determinism() {
        let spec = GenSpec::new(20, 25, 4, 3);
        let a = generate_circuit(&spec).unwrap();
        let b = generate_circuit(&spec).unwrap();
        assert_eq!(a, b);
        let text = render_bench(&a);
        let back = parse_bench(&text).unwrap();
        assert_eq!(render_bench(&back), text);
    }

    #[test]
    fn scenarios_are_abnormal_and_replayable() {
        let c = generate_circuit(&GenSpec::new(16, 25, 3, 11)).unwrap();
        let s = generate_scenarios(&c, 2, 20, 5);
        assert_eq!(s, generate_scenarios(&c, 2, 20, 5));
        assert_eq!(s.scenarios.len() + s.skipped, 20);
        for sc in &s.scenarios {
            assert_eq!(sc.faulty.len(), 2);
            let healthy = c.evaluate(&sc.inputs).unwrap();
            assert_ne!(c.output_values(&healthy), sc.expected_outputs);
        }
        let all = exhaustive_single_faults(&c, 1);
        assert_eq!(all.scenarios.len() + all.skipped, c.num_gates());
    }
}
