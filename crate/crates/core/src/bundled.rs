//! Netlists shipped with the crate.

use crate::circuit::{parse_bench_named, Circuit, NetlistError};

/// (name, text) for every bundled circuit.
pub const CIRCUITS: &[(&str, &str)] = &[
    ("paperlike_fig1", include_str!("../data/paperlike_fig1.bench")),
    ("paperlike_fig3", include_str!("../data/paperlike_fig3.bench")),
    ("paperlike_fig4", include_str!("../data/paperlike_fig4.bench")),
    ("two_gate_cone", include_str!("../data/two_gate_cone.bench")),
    ("c17", include_str!("../data/c17.bench")),
    ("c432", include_str!("../data/c432.bench")),
    ("c499", include_str!("../data/c499.bench")),
    ("c1355", include_str!("../data/c1355.bench")),
];

/// Ten-gate single-output cone templates used by the circuit generator.
pub const CONE_TEMPLATES: &[(&str, &str)] = &[
    ("xor_pair", include_str!("../data/templates/t1_xor_pair.bench")),
    ("c17_merge", include_str!("../data/templates/t2_c17_merge.bench")),
    ("parity", include_str!("../data/templates/t3_parity.bench")),
    ("mux", include_str!("../data/templates/t4_mux.bench")),
    ("compare", include_str!("../data/templates/t5_compare.bench")),
    ("priority", include_str!("../data/templates/t6_priority.bench")),
    ("carry", include_str!("../data/templates/t7_carry.bench")),
    ("vote", include_str!("../data/templates/t8_vote.bench")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    CIRCUITS.iter().map(|(n, _)| *n)
}

pub fn text(name: &str) -> Option<&'static str> {
    CIRCUITS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn circuit(name: &str) -> Option<Circuit> {
    text(name).map(|t| parse_bench_named(name, t).expect("bundled netlists are valid"))
}

pub fn templates() -> Result<Vec<Circuit>, NetlistError> {
    CONE_TEMPLATES.iter().map(|(n, t)| parse_bench_named(n, t)).collect()
}
