//! Gate-level circuit model, `.bench` netlist I/O and fault simulation.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense wire index. Wires are numbered in definition order: every `INPUT`
/// line and every gate definition claims the next id.
pub type WireId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GateKind {
    And,
    Or,
    Nand,
    Nor,
    Not,
    Buffer,
    Xor,
    Xnor,
}

impl GateKind {
    pub const ALL: [GateKind; 8] = [
        GateKind::And,
        GateKind::Or,
        GateKind::Nand,
        GateKind::Nor,
        GateKind::Not,
        GateKind::Buffer,
        GateKind::Xor,
        GateKind::Xnor,
    ];

    pub fn from_name(name: &str) -> Option<GateKind> {
        let kind = match name.to_ascii_uppercase().as_str() {
            "AND" => GateKind::And,
            "OR" => GateKind::Or,
            "NAND" => GateKind::Nand,
            "NOR" => GateKind::Nor,
            "NOT" | "INV" => GateKind::Not,
            "BUFF" | "BUF" | "BUFFER" => GateKind::Buffer,
            "XOR" => GateKind::Xor,
            "XNOR" => GateKind::Xnor,
            _ => return None,
        };
        Some(kind)
    }

    pub fn name(self) -> &'static str {
        match self {
            GateKind::And => "AND",
            GateKind::Or => "OR",
            GateKind::Nand => "NAND",
            GateKind::Nor => "NOR",
            GateKind::Not => "NOT",
            GateKind::Buffer => "BUFF",
            GateKind::Xor => "XOR",
            GateKind::Xnor => "XNOR",
        }
    }

    pub fn is_unary(self) -> bool {
        matches!(self, GateKind::Not | GateKind::Buffer)
    }

    /// Splits the kind into an associative core and an output inversion.
    /// The core is one of `And`, `Or`, `Xor` or `Buffer`.
    pub fn decompose(self) -> (GateKind, bool) {
        match self {
            GateKind::And => (GateKind::And, false),
            GateKind::Nand => (GateKind::And, true),
            GateKind::Or => (GateKind::Or, false),
            GateKind::Nor => (GateKind::Or, true),
            GateKind::Xor => (GateKind::Xor, false),
            GateKind::Xnor => (GateKind::Xor, true),
            GateKind::Buffer => (GateKind::Buffer, false),
            GateKind::Not => (GateKind::Buffer, true),
        }
    }

    pub fn eval<I: IntoIterator<Item = bool>>(self, inputs: I) -> bool {
        let (core, negate) = self.decompose();
        let mut it = inputs.into_iter();
        let value = match core {
            GateKind::And => it.all(|b| b),
            GateKind::Or => it.any(|b| b),
            GateKind::Xor => it.fold(false, |acc, b| acc ^ b),
            _ => it.next().unwrap_or(false),
        };
        value ^ negate
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gate {
    pub output: WireId,
    pub kind: GateKind,
    pub fanin: Vec<WireId>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetlistError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("undefined wire `{wire}`{}", line_suffix(*.line))]
    UndefinedWire { wire: String, line: Option<usize> },
    #[error("wire `{wire}` defined twice{}", line_suffix(*.line))]
    DuplicateDefinition { wire: String, line: Option<usize> },
    #[error("combinational cycle through `{wire}`")]
    Cycle { wire: String },
    #[error("gate `{gate}` of kind {kind} cannot take {got} input(s)")]
    Arity { gate: String, kind: GateKind, got: usize },
    #[error("`{0}` is not a gate")]
    UnknownGate(String),
    #[error("expected {expected} input values, got {got}")]
    InputWidth { expected: usize, got: usize },
}

fn line_suffix(line: Option<usize>) -> String {
    line.map(|l| format!(" (line {l})")).unwrap_or_default()
}

/// Collects definitions in textual order and validates them into a [`Circuit`].
#[derive(Default, Debug, Clone)]
pub struct CircuitBuilder {
    name: String,
    defs: Vec<Def>,
    outputs: Vec<(String, Option<usize>)>,
}

#[derive(Debug, Clone)]
struct Def {
    name: String,
    gate: Option<(GateKind, Vec<String>)>,
    line: Option<usize>,
}

impl CircuitBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        CircuitBuilder {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn input(&mut self, name: impl Into<String>) -> &mut Self {
        self.defs.push(Def {
            name: name.into(),
            gate: None,
            line: None,
        });
        self
    }

    pub fn output(&mut self, name: impl Into<String>) -> &mut Self {
        self.outputs.push((name.into(), None));
        self
    }

    pub fn gate<S: Into<String>>(
        &mut self,
        name: impl Into<String>,
        kind: GateKind,
        fanin: impl IntoIterator<Item = S>,
    ) -> &mut Self {
        self.defs.push(Def {
            name: name.into(),
            gate: Some((kind, fanin.into_iter().map(Into::into).collect())),
            line: None,
        });
        self
    }

    fn at_line(&mut self, line: usize) {
        if let Some(d) = self.defs.last_mut() {
            d.line = Some(line);
        }
    }

    pub fn build(&self) -> Result<Circuit, NetlistError> {
        let mut index = HashMap::with_capacity(self.defs.len());
        let mut wire_names = Vec::with_capacity(self.defs.len());
        for def in &self.defs {
            if index.insert(def.name.clone(), wire_names.len()).is_some() {
                return Err(NetlistError::DuplicateDefinition {
                    wire: def.name.clone(),
                    line: def.line,
                });
            }
            wire_names.push(def.name.clone());
        }
        let lookup = |name: &str, line: Option<usize>| {
            index.get(name).copied().ok_or_else(|| NetlistError::UndefinedWire {
                wire: name.to_string(),
                line,
            })
        };

        let mut inputs = Vec::new();
        let mut raw_gates = Vec::new();
        for (id, def) in self.defs.iter().enumerate() {
            match &def.gate {
                None => inputs.push(id),
                Some((kind, fanin)) => {
                    let ok = if kind.is_unary() {
                        fanin.len() == 1
                    } else {
                        !fanin.is_empty()
                    };
                    if !ok {
                        return Err(NetlistError::Arity {
                            gate: def.name.clone(),
                            kind: *kind,
                            got: fanin.len(),
                        });
                    }
                    let fanin = fanin
                        .iter()
                        .map(|w| lookup(w, def.line))
                        .collect::<Result<Vec<_>, _>>()?;
                    raw_gates.push(Gate {
                        output: id,
                        kind: *kind,
                        fanin,
                    });
                }
            }
        }
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for (name, line) in &self.outputs {
            let w = lookup(name, *line)?;
            if !outputs.contains(&w) {
                outputs.push(w);
            }
        }
        Circuit::assemble(self.name.clone(), wire_names, index, inputs, outputs, raw_gates)
    }
}

/// An immutable combinational circuit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Circuit {
    name: String,
    wire_names: Vec<String>,
    index: HashMap<String, WireId>,
    inputs: Vec<WireId>,
    outputs: Vec<WireId>,
    gates: Vec<Gate>,
    driver: Vec<Option<usize>>,
    readers: Vec<Vec<usize>>,
    is_output: Vec<bool>,
}

impl Circuit {
    fn assemble(
        name: String,
        wire_names: Vec<String>,
        index: HashMap<String, WireId>,
        inputs: Vec<WireId>,
        outputs: Vec<WireId>,
        raw_gates: Vec<Gate>,
    ) -> Result<Circuit, NetlistError> {
        let n = wire_names.len();
        let mut slot: Vec<Option<usize>> = vec![None; n];
        for (i, g) in raw_gates.iter().enumerate() {
            slot[g.output] = Some(i);
        }
        // Kahn's algorithm, always releasing the lowest ready wire id so the
        // order is a pure function of the definitions.
        let mut pending = vec![0usize; raw_gates.len()];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, g) in raw_gates.iter().enumerate() {
            for &w in &g.fanin {
                if slot[w].is_some() {
                    pending[i] += 1;
                    users[w].push(i);
                }
            }
        }
        let mut ready = std::collections::BinaryHeap::new();
        for (i, g) in raw_gates.iter().enumerate() {
            if pending[i] == 0 {
                ready.push(std::cmp::Reverse(g.output));
            }
        }
        let mut order = Vec::with_capacity(raw_gates.len());
        while let Some(std::cmp::Reverse(w)) = ready.pop() {
            order.push(slot[w].unwrap());
            for &u in &users[w] {
                pending[u] -= 1;
                if pending[u] == 0 {
                    ready.push(std::cmp::Reverse(raw_gates[u].output));
                }
            }
        }
        if order.len() != raw_gates.len() {
            let stuck = (0..raw_gates.len())
                .filter(|&i| pending[i] > 0)
                .map(|i| raw_gates[i].output)
                .min()
                .unwrap();
            return Err(NetlistError::Cycle {
                wire: wire_names[stuck].clone(),
            });
        }
        let gates: Vec<Gate> = order.into_iter().map(|i| raw_gates[i].clone()).collect();
        let mut driver = vec![None; n];
        let mut readers = vec![Vec::new(); n];
        for (pos, g) in gates.iter().enumerate() {
            driver[g.output] = Some(pos);
            for &w in &g.fanin {
                if readers[w].last() != Some(&pos) {
                    readers[w].push(pos);
                }
            }
        }
        let mut is_output = vec![false; n];
        for &o in &outputs {
            is_output[o] = true;
        }
        Ok(Circuit {
            name,
            wire_names,
            index,
            inputs,
            outputs,
            gates,
            driver,
            readers,
            is_output,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn num_wires(&self) -> usize {
        self.wire_names.len()
    }

    pub fn inputs(&self) -> &[WireId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[WireId] {
        &self.outputs
    }

    /// Gates in topological order.
    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn num_gates(&self) -> usize {
        self.gates.len()
    }

    pub fn wire_name(&self, w: WireId) -> &str {
        &self.wire_names[w]
    }

    pub fn wire(&self, name: &str) -> Option<WireId> {
        self.index.get(name).copied()
    }

    pub fn is_input(&self, w: WireId) -> bool {
        self.driver[w].is_none()
    }

    pub fn is_gate(&self, w: WireId) -> bool {
        self.driver[w].is_some()
    }

    pub fn is_output(&self, w: WireId) -> bool {
        self.is_output[w]
    }

    /// The gate driving wire `w`, if it is not a primary input.
    pub fn gate(&self, w: WireId) -> Option<&Gate> {
        self.driver[w].map(|p| &self.gates[p])
    }

    /// Topological position of the gate driving `w`.
    pub fn position(&self, w: WireId) -> Option<usize> {
        self.driver[w]
    }

    /// Gates reading wire `w`, as output wire ids in ascending order.
    pub fn parents(&self, w: WireId) -> Vec<WireId> {
        let mut p: Vec<WireId> = self.readers[w].iter().map(|&i| self.gates[i].output).collect();
        p.sort_unstable();
        p
    }

    /// Gate output ids in ascending id order.
    pub fn gate_ids(&self) -> Vec<WireId> {
        let mut ids: Vec<WireId> = self.gates.iter().map(|g| g.output).collect();
        ids.sort_unstable();
        ids
    }

    pub fn names<'a>(&'a self, wires: impl IntoIterator<Item = &'a WireId>) -> Vec<&'a str> {
        wires.into_iter().map(|&w| self.wire_name(w)).collect()
    }

    fn check_width(&self, inputs: &[bool]) -> Result<(), NetlistError> {
        if inputs.len() != self.inputs.len() {
            return Err(NetlistError::InputWidth {
                expected: self.inputs.len(),
                got: inputs.len(),
            });
        }
        Ok(())
    }

    /// Healthy evaluation; `inputs` follow [`Circuit::inputs`] order.
    pub fn evaluate(&self, inputs: &[bool]) -> Result<Vec<bool>, NetlistError> {
        self.check_width(inputs)?;
        let mut values = vec![false; self.num_wires()];
        for (&w, &b) in self.inputs.iter().zip(inputs) {
            values[w] = b;
        }
        for g in &self.gates {
            values[g.output] = g.kind.eval(g.fanin.iter().map(|&w| values[w]));
        }
        Ok(values)
    }

    /// Fault simulation: evaluate healthy, then flip each faulty gate in
    /// decreasing depth order (ties by ascending id) and re-propagate.
    ///
    /// A gate flipped earlier keeps producing the complement of its function
    /// while later faults are propagated through it.
    pub fn simulate(&self, inputs: &[bool], faulty: &[WireId]) -> Result<Vec<bool>, NetlistError> {
        let mut values = self.evaluate(inputs)?;
        if faulty.is_empty() {
            return Ok(values);
        }
        for &f in faulty {
            if f >= self.num_wires() || !self.is_gate(f) {
                let name = self.wire_names.get(f).cloned().unwrap_or_else(|| f.to_string());
                return Err(NetlistError::UnknownGate(name));
            }
        }
        let depth = self.depth_levels();
        let mut order: Vec<WireId> = faulty.to_vec();
        order.sort_unstable();
        order.dedup();
        order.sort_by_key(|&w| (std::cmp::Reverse(depth[w].unwrap_or(u32::MAX)), w));
        let mut flipped = vec![false; self.num_wires()];
        for f in order {
            flipped[f] = true;
            let start = self.driver[f].unwrap();
            for g in &self.gates[start..] {
                values[g.output] = g.kind.eval(g.fanin.iter().map(|&w| values[w])) ^ flipped[g.output];
            }
        }
        Ok(values)
    }

    /// Shortest distance to an output gate, counting output gates as level 1.
    /// Primary inputs and gates that reach no output map to `None`.
    pub fn depth_levels(&self) -> Vec<Option<u32>> {
        let mut level = vec![None; self.num_wires()];
        let mut queue = VecDeque::new();
        for &o in &self.outputs {
            if self.is_gate(o) && level[o].is_none() {
                level[o] = Some(1);
                queue.push_back(o);
            }
        }
        while let Some(w) = queue.pop_front() {
            let l = level[w].unwrap();
            for &f in &self.gate(w).unwrap().fanin {
                if self.is_gate(f) && level[f].is_none() {
                    level[f] = Some(l + 1);
                    queue.push_back(f);
                }
            }
        }
        level
    }

    pub fn output_values(&self, values: &[bool]) -> Vec<bool> {
        self.outputs.iter().map(|&o| values[o]).collect()
    }
}

/// A set of faulty gates together with an input vector exhibiting them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultScenario {
    pub faulty: Vec<WireId>,
    pub inputs: Vec<bool>,
    pub expected_outputs: Vec<bool>,
}

/// Parses the classic `.bench` dialect.
pub fn parse_bench(text: &str) -> Result<Circuit, NetlistError> {
    parse_bench_named("", text)
}

pub fn parse_bench_named(name: &str, text: &str) -> Result<Circuit, NetlistError> {
    let mut b = CircuitBuilder::new(name);
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.split('#').next().unwrap_or("");
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let col0 = line.len() - line.trim_start().len();
        let syntax = |offset: usize, message: &str| NetlistError::Syntax {
            line: line_no,
            column: col0 + offset + 1,
            message: message.to_string(),
        };
        if let Some(eq) = trimmed.find('=') {
            let lhs = trimmed[..eq].trim();
            if !is_ident(lhs) {
                return Err(syntax(0, "expected wire name before `=`"));
            }
            let rhs_off = eq + 1 + (trimmed[eq + 1..].len() - trimmed[eq + 1..].trim_start().len());
            let (kind_name, args) = split_call(&trimmed[rhs_off..]).map_err(|(o, m)| syntax(rhs_off + o, m))?;
            let kind = GateKind::from_name(kind_name)
                .ok_or_else(|| syntax(rhs_off, &format!("unknown gate kind `{kind_name}`")))?;
            b.gate(lhs, kind, args);
            b.at_line(line_no);
        } else {
            let (kw, args) = split_call(trimmed).map_err(|(o, m)| syntax(o, m))?;
            if args.len() != 1 {
                return Err(syntax(kw.len(), "expected exactly one wire"));
            }
            match kw.to_ascii_uppercase().as_str() {
                "INPUT" => {
                    b.input(args[0]);
                    b.at_line(line_no);
                }
                "OUTPUT" => b.outputs.push((args[0].to_string(), Some(line_no))),
                _ => return Err(syntax(0, "expected INPUT, OUTPUT or a gate definition")),
            }
        }
    }
    b.build()
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '[' | ']' | '$' | '\''))
}

/// Splits `KIND(a, b, c)` into the head and the trimmed argument list,
/// reporting errors as (byte offset, message).
fn split_call(s: &str) -> Result<(&str, Vec<&str>), (usize, &'static str)> {
    let open = s.find('(').ok_or((s.len(), "expected `(`"))?;
    let head = s[..open].trim();
    if !is_ident(head) {
        return Err((0, "expected a keyword or gate kind"));
    }
    let close = s.rfind(')').ok_or((s.len(), "expected `)`"))?;
    if close < open || !s[close + 1..].trim().is_empty() {
        return Err((close + 1, "unexpected text after `)`"));
    }
    let inner = &s[open + 1..close];
    let mut args = Vec::new();
    let mut offset = open + 1;
    for part in inner.split(',') {
        let a = part.trim();
        if !is_ident(a) {
            return Err((offset, "expected a wire name"));
        }
        args.push(a);
        offset += part.len() + 1;
    }
    Ok((head, args))
}

/// Canonical text form: inputs, outputs, then gates in topological order.
pub fn render_bench(c: &Circuit) -> String {
    let mut out = String::new();
    for &i in c.inputs() {
        out.push_str(&format!("INPUT({})\n", c.wire_name(i)));
    }
    for &o in c.outputs() {
        out.push_str(&format!("OUTPUT({})\n", c.wire_name(o)));
    }
    for g in c.gates() {
        let args: Vec<&str> = c.names(&g.fanin);
        out.push_str(&format!(
            "{} = {}({})\n",
            c.wire_name(g.output),
            g.kind,
            args.join(", ")
        ));
    }
    out
}

/// Wire values as a `name=bit` map for the given wires.
pub fn named_values(c: &Circuit, values: &[bool], wires: &[WireId]) -> Vec<(String, bool)> {
    wires.iter().map(|&w| (c.wire_name(w).to_string(), values[w])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;

    fn fig1() -> Circuit {
        bundled::circuit("paperlike_fig1").unwrap()
    }

    #[test]
    fn smallest_netlist() {
        let c = parse_bench("INPUT(p)\nOUTPUT(j)\nj = NOT(p)").unwrap();
        assert_eq!((c.num_gates(), c.inputs().len(), c.outputs().len()), (1, 1, 1));
    }

    #[test]
    fn undefined_wire_is_reported() {
        let err = parse_bench("OUTPUT(j)\nj = NOT(p)").unwrap_err();
        assert!(
            matches!(err, NetlistError::UndefinedWire { ref wire, line: Some(2) } if wire == "p"),
            "{err}"
        );
    }

    #[test]
    fn duplicate_and_cycle_and_syntax() {
        let dup = parse_bench("INPUT(a)\nb = NOT(a)\nb = BUFF(a)").unwrap_err();
        assert!(matches!(dup, NetlistError::DuplicateDefinition { line: Some(3), .. }));
        let cyc = parse_bench("INPUT(a)\nb = AND(a, c)\nc = NOT(b)\nOUTPUT(c)").unwrap_err();
        assert!(matches!(cyc, NetlistError::Cycle { .. }));
        let syn = parse_bench("INPUT(a)\n  b = FOO(a)").unwrap_err();
        assert_eq!(
            syn,
            NetlistError::Syntax {
                line: 2,
                column: 7,
                message: "unknown gate kind `FOO`".into()
            }
        );
        let arity = parse_bench("INPUT(a)\nINPUT(b)\nc = NOT(a, b)").unwrap_err();
        assert!(matches!(arity, NetlistError::Arity { got: 2, .. }));
    }

    #[test]
    fn kinds_are_case_insensitive_and_comments_ignored() {
        let c = parse_bench("# header\ninput(a) # trailing\nINPUT(b)\nOutput(y)\ny = nand(a, b)\n").unwrap();
        assert_eq!(c.gates()[0].kind, GateKind::Nand);
    }

    #[test]
    fn healthy_simulation_matches_evaluation() {
        let c = fig1();
        for bits in 0..8u32 {
            let v: Vec<bool> = (0..3).map(|i| bits >> i & 1 == 1).collect();
            assert_eq!(c.simulate(&v, &[]).unwrap(), c.evaluate(&v).unwrap());
        }
    }

    #[test]
    fn not_gate_fault_flips_output() {
        let c = parse_bench("INPUT(p)\nOUTPUT(j)\nj = NOT(p)").unwrap();
        let j = c.wire("j").unwrap();
        assert!(c.simulate(&[true], &[j]).unwrap()[j]);
        assert!(!c.simulate(&[true], &[]).unwrap()[j]);
    }

    #[test]
    fn intro_faults_flip_the_output() {
        let c = fig1();
        let w = |n: &str| c.wire(n).unwrap();
        let inputs = [true, true, false];
        let healthy = c.simulate(&inputs, &[]).unwrap();
        let faulty = c.simulate(&inputs, &[w("J"), w("B")]).unwrap();
        assert!(!healthy[w("V")]);
        assert!(faulty[w("V")]);
        // Internal values produced by the flip procedure on the reconstruction.
        for (name, bit) in [
            ("J", true),
            ("B", true),
            ("E", true),
            ("A", true),
            ("D", true),
            ("K", true),
        ] {
            assert_eq!(faulty[w(name)], bit, "{name}");
        }
        for single in ["V", "K", "A"] {
            assert!(c.simulate(&inputs, &[w(single)]).unwrap()[w("V")], "{single}");
        }
    }

    #[test]
    fn fig1_depths() {
        let c = fig1();
        let d = c.depth_levels();
        let at = |n: &str| d[c.wire(n).unwrap()];
        assert_eq!(
            (at("B"), at("J"), at("A"), at("V")),
            (Some(3), Some(3), Some(2), Some(1))
        );
        assert_eq!(at("P"), None);
    }

    #[test]
    fn buffer_chain_depths() {
        let c = parse_bench("INPUT(a)\nOUTPUT(b4)\nb1 = BUFF(a)\nb2 = BUFF(b1)\nb3 = BUFF(b2)\nb4 = BUFF(b3)").unwrap();
        let d = c.depth_levels();
        let got: Vec<_> = ["b4", "b3", "b2", "b1"].iter().map(|n| d[c.wire(n).unwrap()]).collect();
        assert_eq!(got, vec![Some(1), Some(2), Some(3), Some(4)]);
    }

    #[test]
    fn render_is_canonical() {
        let c = fig1();
        let text = render_bench(&c);
        let again = parse_bench(&text).unwrap();
        assert_eq!(render_bench(&again), text);
        assert_eq!(parse_bench(&render_bench(&again)).unwrap(), again);
    }
}
