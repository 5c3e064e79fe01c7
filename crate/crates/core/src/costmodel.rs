//! Structural estimate of the average single-fault diagnostic cost of an
//! abstraction, and selection of the cheapest abstraction among cone
//! destruction thresholds.
//!
//! The isolation cost is the log of the number of unknown measurement
//! points, recursively averaged over abstract components. The abstraction
//! cost is the average overhead of measuring cone boundaries on the way to
//! a fault.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::abstraction::AbstractionView;
use crate::circuit::{Circuit, WireId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// Expected measurements to isolate a fault (bits).
    pub isolation: f64,
    /// Expected measurements spent on cone boundaries.
    pub abstraction: f64,
    pub total: f64,
}

/// Wires observed before diagnosis starts: primary inputs and outputs.
pub fn observed_wires(c: &Circuit) -> Vec<WireId> {
    let mut w: Vec<WireId> = c.inputs().iter().chain(c.outputs()).copied().collect();
    w.sort_unstable();
    w.dedup();
    w
}

fn known_mask(c: &Circuit, observed: &[WireId]) -> Vec<bool> {
    let mut k = vec![false; c.num_wires()];
    for &w in observed {
        k[w] = true;
    }
    k
}

/// Outputs of the abstraction's components whose values are not observed.
pub fn measurement_points(c: &Circuit, view: &AbstractionView, observed: &[WireId]) -> usize {
    let k = known_mask(c, observed);
    view.abstraction_within(c, None).iter().filter(|&&g| !k[g]).count()
}

/// Cones to recurse into from `scope`: active, not the scope itself and
/// not the whole-system cone.
fn sub_cones(c: &Circuit, view: &AbstractionView, scope: Option<WireId>) -> (Vec<WireId>, Vec<WireId>) {
    let abs = view.abstraction_within(c, scope);
    let cones = abs
        .iter()
        .copied()
        .filter(|&g| Some(g) != scope && Some(g) != view.whole_root() && view.is_cone(g))
        .collect();
    (abs, cones)
}

/// `known` plus the inputs and output of cone `g`.
fn with_boundary(view: &AbstractionView, known: &[bool], g: WireId) -> Vec<bool> {
    let mut k = known.to_vec();
    for &w in view.cone_inputs(g) {
        k[w] = true;
    }
    k[g] = true;
    k
}

fn isolation(c: &Circuit, view: &AbstractionView, scope: Option<WireId>, known: &[bool]) -> f64 {
    let (abs, cones) = sub_cones(c, view, scope);
    let mp = abs.iter().filter(|&&g| !known[g]).count();
    let own = if mp > 0 { (mp as f64).log2() } else { 0.0 };
    // fold from +0.0: an empty f64 sum is -0.0.
    let inner = cones
        .iter()
        .map(|&g| isolation(c, view, Some(g), &with_boundary(view, known, g)))
        .fold(0.0, |a, b| a + b);
    own + inner / abs.len().max(1) as f64
}

fn overhead(c: &Circuit, view: &AbstractionView, scope: Option<WireId>, known: &[bool]) -> f64 {
    let n = match scope {
        Some(g) => view.members(g).len(),
        None => c.num_gates(),
    };
    let (_, cones) = sub_cones(c, view, scope);
    let sum = cones
        .iter()
        .map(|&g| {
            let unknown = view.cone_inputs(g).iter().chain([&g]).filter(|&&w| !known[w]).count();
            let inner = overhead(c, view, Some(g), &with_boundary(view, known, g));
            view.members(g).len() as f64 * (unknown as f64 + inner)
        })
        .fold(0.0, |a, b| a + b);
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Isolation cost of the whole system with inputs and outputs observed.
pub fn isolation_cost(c: &Circuit, view: &AbstractionView) -> f64 {
    isolation(c, view, None, &known_mask(c, &observed_wires(c)))
}

/// Abstraction cost of the whole system with inputs and outputs observed.
pub fn abstraction_cost(c: &Circuit, view: &AbstractionView) -> f64 {
    overhead(c, view, None, &known_mask(c, &observed_wires(c)))
}

pub fn edc(c: &Circuit, view: &AbstractionView) -> CostEstimate {
    let isolation = isolation_cost(c, view);
    let abstraction = abstraction_cost(c, view);
    CostEstimate {
        isolation,
        abstraction,
        total: isolation + abstraction,
    }
}

/// Overhead of reaching gate `g`: the unknown wires among the inputs and
/// outputs of every cone containing `g`, `g` itself counted as a trivial
/// cone. Zero when `g` lies in no cone.
pub fn component_overhead(c: &Circuit, view: &AbstractionView, g: WireId) -> usize {
    let known = known_mask(c, &observed_wires(c));
    let mut enclosing = Vec::new();
    let mut up = view.idom(g);
    while let Some(a) = up {
        if Some(a) == view.whole_root() {
            break;
        }
        if view.is_cone(a) {
            enclosing.push(a);
        }
        up = view.idom(a);
    }
    if enclosing.is_empty() {
        return 0;
    }
    let mut wires = vec![false; c.num_wires()];
    for &a in &enclosing {
        for &w in view.cone_inputs(a) {
            wires[w] = true;
        }
        wires[a] = true;
    }
    for &w in &c.gate(g).expect("a gate").fanin {
        wires[w] = true;
    }
    wires[g] = true;
    (0..wires.len()).filter(|&w| wires[w] && !known[w]).count()
}

/// Largest cone fan-in in the view; destroying above it changes nothing.
pub fn max_cone_inputs(view: &AbstractionView) -> usize {
    view.all_cones()
        .iter()
        .map(|&g| view.cone_inputs(g).len())
        .max()
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    /// Cones with more inputs than this are destroyed.
    pub threshold: usize,
    pub components: usize,
    pub abstraction_size: usize,
    pub measurement_points: usize,
    pub estimate: CostEstimate,
}

pub fn estimate_row(c: &Circuit, view: &AbstractionView, threshold: usize) -> EstimateRow {
    EstimateRow {
        threshold,
        components: c.num_gates(),
        abstraction_size: view.abstraction().len(),
        measurement_points: measurement_points(c, view, &observed_wires(c)),
        estimate: edc(c, view),
    }
}

/// Evaluates each threshold on `c` and returns the view with the lowest
/// estimate (earliest on ties) with its index, plus the full table.
/// `thresholds` must not be empty.
pub fn select_abstraction(c: &Circuit, thresholds: &[usize]) -> (AbstractionView, usize, Vec<EstimateRow>) {
    assert!(!thresholds.is_empty(), "at least one threshold");
    let full = AbstractionView::new(c);
    let views: Vec<AbstractionView> = thresholds.iter().map(|&t| full.destroy_cones(c, t)).collect();
    let rows: Vec<EstimateRow> = views
        .iter()
        .zip(thresholds)
        .map(|(v, &t)| estimate_row(c, v, t))
        .collect();
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.estimate.total < rows[best].estimate.total {
            best = i;
        }
    }
    (views.into_iter().nth(best).unwrap(), best, rows)
}

/// Default thresholds: every distinct cone fan-in, descending, then 0.
pub fn default_thresholds(view: &AbstractionView) -> Vec<usize> {
    let mut t: Vec<usize> = view.all_cones().iter().map(|&g| view.cone_inputs(g).len()).collect();
    t.push(0);
    t.sort_unstable_by(|a, b| b.cmp(a));
    t.dedup();
    t
}

const COLUMNS: [&str; 7] = ["threshold", "components", "abstraction", "points", "AC", "IC", "EDC"];

fn cells(r: &EstimateRow) -> [String; 7] {
    [
        r.threshold.to_string(),
        r.components.to_string(),
        r.abstraction_size.to_string(),
        r.measurement_points.to_string(),
        format!("{:.2}", r.estimate.abstraction),
        format!("{:.2}", r.estimate.isolation),
        format!("{:.2}", r.estimate.total),
    ]
}

pub fn render_csv(rows: &[EstimateRow]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&cells(r).join(","));
        out.push('\n');
    }
    out
}

pub fn render_text(rows: &[EstimateRow]) -> String {
    let body: Vec<[String; 7]> = rows.iter().map(cells).collect();
    let width: Vec<usize> = (0..7)
        .map(|i| body.iter().map(|r| r[i].len()).chain([COLUMNS[i].len()]).max().unwrap())
        .collect();
    let mut out = String::new();
    let line = |cols: Vec<&str>, out: &mut String| {
        let s: Vec<String> = cols.iter().zip(&width).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", s.join("  "));
    };
    line(COLUMNS.to_vec(), &mut out);
    for r in &body {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::circuit::parse_bench;
    use crate::cloning::minimize_abstraction;
    use crate::gen::{generate_circuit, GenSpec};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn fig3_without_cones_isolation_is_log6() {
        let c = bundled::circuit("paperlike_fig3").unwrap();
        let v = AbstractionView::new(&c).destroy_cones(&c, 0);
        assert_eq!(measurement_points(&c, &v, &observed_wires(&c)), 6);
        assert!(close(isolation_cost(&c, &v), 6f64.log2(), 1e-12));
        assert_eq!(format!("{:.2}", isolation_cost(&c, &v)), "2.58");
        assert_eq!(abstraction_cost(&c, &v), 0.0);
    }

    #[test]
    fn fig3_fault_in_cone_a_isolates_in_two() {
        let c = bundled::circuit("paperlike_fig3").unwrap();
        let v = AbstractionView::new(&c);
        let known = known_mask(&c, &observed_wires(&c));
        let (top, _) = sub_cones(&c, &v, None);
        let top_mp = top.iter().filter(|&&g| !known[g]).count();
        assert_eq!(top_mp, 4);
        let a = c.wire("A").unwrap();
        let inside = view_mp(&c, &v, a, &with_boundary(&v, &known, a));
        assert_eq!(inside, 1);
        assert_eq!((top_mp as f64).log2() + (inside as f64).log2(), 2.0);
    }

    fn view_mp(c: &Circuit, v: &AbstractionView, g: WireId, known: &[bool]) -> usize {
        v.abstraction_within(c, Some(g)).iter().filter(|&&w| !known[w]).count()
    }

    #[test]
    fn fig3_overhead_of_j_is_four() {
        let c = bundled::circuit("paperlike_fig3").unwrap();
        let v = AbstractionView::new(&c);
        assert_eq!(component_overhead(&c, &v, c.wire("J").unwrap()), 4);
        // Gates outside every cone carry no overhead.
        assert_eq!(component_overhead(&c, &v, c.wire("D").unwrap()), 0);
    }

    #[test]
    fn fig3_hand_computed_estimate() {
        // Cone A (3 gates, B and A unknown) holds cone E (2 gates, E
        // unknown): AC = 3 * (2 + 2 * 1 / 3) / 7 = 8 / 7.
        let c = bundled::circuit("paperlike_fig3").unwrap();
        let v = AbstractionView::new(&c);
        assert!(close(abstraction_cost(&c, &v), 8.0 / 7.0, 1e-12));
        // log2(4) on top plus the average over 5 abstract components of
        // cone A's log2(1) + (cone E's log2(1)) / 2.
        assert!(close(isolation_cost(&c, &v), 2.0, 1e-12));
        let e = edc(&c, &v);
        assert_eq!(e.total, e.isolation + e.abstraction);
    }

    #[test]
    fn all_outputs_observed_gives_no_points() {
        let c = parse_bench("INPUT(a)\nINPUT(b)\nOUTPUT(x)\nOUTPUT(y)\nx = AND(a, b)\ny = OR(a, b)\n").unwrap();
        let v = AbstractionView::new(&c);
        assert_eq!(measurement_points(&c, &v, &observed_wires(&c)), 0);
        assert_eq!(edc(&c, &v).total, 0.0);
    }

    #[test]
    fn nested_chain_by_hand() {
        let c = parse_bench(
            "INPUT(a)\nINPUT(b)\nINPUT(c)\nOUTPUT(o)\nOUTPUT(s)\n\
             g1 = AND(a, b)\ng2 = NOT(g1)\ng3 = OR(g2, c)\no = NOT(g3)\ns = AND(b, c)\n",
        )
        .unwrap();
        let v = AbstractionView::new(&c);
        let o = c.wire("o").unwrap();
        assert!(v.is_cone(o));
        // Cone o (4 gates) has an observed boundary and nests cone g3
        // (3 gates, g3 unknown), which nests cone g2 (2 gates, g2 unknown):
        // AC = 4 * (0 + 3 * (1 + 2 * 1 / 3) / 4) / 5 = 1.
        assert!(close(abstraction_cost(&c, &v), 1.0, 1e-12));
        // Every nested scope leaves a single unknown point.
        assert_eq!(isolation_cost(&c, &v), 0.0);
        let d = v.destroy_cones(&c, 0);
        assert_eq!(abstraction_cost(&c, &d), 0.0);
    }

    #[test]
    fn boundary_count_scales_with_members() {
        // Cone r over {m, r} fed by the unknown wire u: AC = 2 * 1 / n.
        let c = parse_bench(
            "INPUT(a)\nINPUT(b)\nOUTPUT(r)\nOUTPUT(t)\n\
             u = AND(a, b)\nm = NOT(u)\nr = OR(m, a)\nt = NOT(u)\n",
        )
        .unwrap();
        let v = AbstractionView::new(&c);
        let r = c.wire("r").unwrap();
        assert_eq!(c.names(v.members(r)), ["m", "r"]);
        assert!(close(abstraction_cost(&c, &v), 2.0 / 4.0, 1e-12));
    }

    #[test]
    fn trivial_abstraction_has_zero_abstraction_cost() {
        for name in ["c432", "c499", "c1355", "paperlike_fig1"] {
            let c = bundled::circuit(name).unwrap();
            let v = AbstractionView::new(&c).destroy_cones(&c, 0);
            assert_eq!(abstraction_cost(&c, &v), 0.0);
            assert_eq!(v.abstraction().len(), c.num_gates());
        }
    }

    #[test]
    fn measurement_point_identities() {
        for name in ["c499", "c1355"] {
            let c = bundled::circuit(name).unwrap();
            let v = AbstractionView::new(&c);
            assert_eq!(v.abstraction().len(), 58, "{name}");
            assert_eq!(measurement_points(&c, &v, &observed_wires(&c)), 26, "{name}");
        }
        let (c, _, _) = minimize_abstraction(&bundled::circuit("c432").unwrap());
        let v = AbstractionView::new(&c).destroy_cones(&c, 0);
        assert_eq!(measurement_points(&c, &v, &observed_wires(&c)), c.num_gates() - 7);
    }

    #[test]
    fn c432_table() {
        let (c, _, _) = minimize_abstraction(&bundled::circuit("c432").unwrap());
        let full = AbstractionView::new(&c);
        let top = max_cone_inputs(&full);
        let (_, best, rows) = select_abstraction(&c, &[top, 18, 14, 9, 4, 0]);
        let first = &rows[0].estimate;
        assert!(close(first.total, 17.1, 0.5), "{first:?}");
        assert!(close(first.abstraction, 11.51, 0.5), "{first:?}");
        assert!(close(first.isolation, 5.67, 0.5), "{first:?}");
        let last = &rows[5].estimate;
        assert!(close(last.total, 7.5, 0.5), "{last:?}");
        assert_eq!(last.abstraction, 0.0);
        assert_eq!(best, 5);
        assert_eq!(cells(&rows[5])[4], "0.00");
        let text = render_text(&rows);
        assert_eq!(text.lines().count(), 7);
        assert!(render_csv(&rows).starts_with("threshold,components,abstraction,points,AC,IC,EDC\n"));
    }

    #[test]
    fn single_threshold_is_returned() {
        let c = bundled::circuit("paperlike_fig1").unwrap();
        let (v, best, rows) = select_abstraction(&c, &[1]);
        assert_eq!((best, rows.len()), (0, 1));
        assert_eq!(
            v.abstraction(),
            AbstractionView::new(&c).destroy_cones(&c, 1).abstraction()
        );
    }

    #[test]
    fn large_threshold_keeps_the_view() {
        let c = bundled::circuit("c432").unwrap();
        let v = AbstractionView::new(&c);
        let same = v.destroy_cones(&c, max_cone_inputs(&v));
        assert_eq!(same.abstraction(), v.abstraction());
        assert_eq!(edc(&c, &same), edc(&c, &v));
    }

    #[test]
    fn destruction_is_monotone_on_generated_circuits() {
        let mut ac_violations = 0;
        for seed in 0..50 {
            let c = generate_circuit(&GenSpec::new(16, 25, 4, seed)).unwrap();
            let full = AbstractionView::new(&c);
            let mut prev: Option<(usize, f64)> = None;
            for t in (0..=max_cone_inputs(&full)).rev() {
                let v = full.destroy_cones(&c, t);
                let size = v.abstraction().len();
                let ac = abstraction_cost(&c, &v);
                if let Some((ps, pac)) = prev {
                    // Lower thresholds destroy more: the abstraction grows.
                    assert!(size >= ps, "seed {seed} threshold {t}");
                    if ac > pac + 1e-12 {
                        ac_violations += 1;
                    }
                }
                prev = Some((size, ac));
            }
        }
        // Reported, not fatal: the trend is only expected in general.
        eprintln!("abstraction cost increases after destruction: {ac_violations}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn edc_is_additive_and_nonnegative(seed in 0u64..10_000, t in 0usize..12) {
            let c = generate_circuit(&GenSpec::new(12, 50, 3, seed)).unwrap();
            let v = AbstractionView::new(&c).destroy_cones(&c, t);
            let e = edc(&c, &v);
            prop_assert!(e.isolation >= 0.0 && e.abstraction >= 0.0);
            prop_assert_eq!(e.total, e.isolation + e.abstraction);
        }
    }
}
