//! DIMACS CNF with a `w <var> <pos> <neg>` weight sidecar, and the c2d
//! `.nnf` format.

use std::fmt::Write as _;

use super::{var_of, Cnf, CompileError, Ddnnf, Lit, Node, Var, Weights};

fn format_err(line: usize, msg: impl std::fmt::Display) -> CompileError {
    CompileError::Format(format!("line {line}: {msg}"))
}

pub fn write_dimacs(cnf: &Cnf) -> String {
    let mut out = format!("p cnf {} {}\n", cnf.num_vars, cnf.clauses.len());
    for cl in &cnf.clauses {
        for l in cl {
            let _ = write!(out, "{l} ");
        }
        out.push_str("0\n");
    }
    out
}

pub fn parse_dimacs(text: &str) -> Result<Cnf, CompileError> {
    let mut num_vars = None;
    let mut clauses = Vec::new();
    let mut current = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('c') || line.starts_with('%') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('p') {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 3 || f[0] != "cnf" {
                return Err(format_err(i + 1, "expected `p cnf <vars> <clauses>`"));
            }
            num_vars = Some(f[1].parse::<u32>().map_err(|e| format_err(i + 1, e))?);
            continue;
        }
        let n = num_vars.ok_or_else(|| format_err(i + 1, "clause before problem line"))?;
        for tok in line.split_whitespace() {
            let l: Lit = tok.parse().map_err(|e| format_err(i + 1, e))?;
            if l == 0 {
                clauses.push(std::mem::take(&mut current));
            } else if var_of(l) > n {
                return Err(format_err(i + 1, format!("literal {l} exceeds {n} variables")));
            } else {
                current.push(l);
            }
        }
    }
    if !current.is_empty() {
        clauses.push(current);
    }
    Ok(Cnf {
        num_vars: num_vars.ok_or_else(|| format_err(0, "missing problem line"))?,
        clauses,
    })
}

pub fn write_weights(w: &Weights) -> String {
    let mut out = String::new();
    for v in 1..=w.num_vars() {
        let (p, n) = w.get(v);
        let _ = writeln!(out, "w {v} {p} {n}");
    }
    out
}

/// Reads `w` lines; variables not mentioned weigh 1 in both phases.
pub fn parse_weights(text: &str, num_vars: u32) -> Result<Weights, CompileError> {
    let mut w = Weights::uniform(num_vars);
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [] => {}
            [c, ..] if c.starts_with('c') => {}
            ["w", v, p, n] => {
                let v: Var = v.parse().map_err(|e| format_err(i + 1, e))?;
                if v == 0 || v > num_vars {
                    return Err(format_err(i + 1, format!("variable {v} out of range")));
                }
                let p: f64 = p.parse().map_err(|e| format_err(i + 1, e))?;
                let n: f64 = n.parse().map_err(|e| format_err(i + 1, e))?;
                w.set(v, p, n);
            }
            _ => return Err(format_err(i + 1, "expected `w <var> <pos> <neg>`")),
        }
    }
    Ok(w)
}

pub fn write_nnf(d: &Ddnnf) -> String {
    let mut out = format!("nnf {} {} {}\n", d.size(), d.edges(), d.num_vars());
    let ids = |ch: &[u32]| ch.iter().map(|c| format!(" {c}")).collect::<String>();
    for n in d.nodes() {
        let _ = match n {
            Node::True => writeln!(out, "A 0"),
            Node::False => writeln!(out, "O 0 0"),
            Node::Lit(l) => writeln!(out, "L {l}"),
            Node::And(ch) => writeln!(out, "A {}{}", ch.len(), ids(ch)),
            Node::Or { var, children } => writeln!(out, "O {var} {}{}", children.len(), ids(children)),
        };
    }
    out
}

/// Parses c2d output without altering it; the last node is the root.
pub fn parse_nnf(text: &str) -> Result<Ddnnf, CompileError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('c'));
    let (hl, header) = lines.next().ok_or_else(|| format_err(1, "empty file"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 4 || h[0] != "nnf" {
        return Err(format_err(hl + 1, "expected `nnf <nodes> <edges> <vars>`"));
    }
    let num = |s: &str, line: usize| s.parse::<usize>().map_err(|e| format_err(line, e));
    let (count, edges, num_vars) = (num(h[1], hl + 1)?, num(h[2], hl + 1)?, num(h[3], hl + 1)? as u32);
    let mut nodes = Vec::with_capacity(count);
    for (i, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        let children = |from: usize| -> Result<Vec<u32>, CompileError> {
            let c = num(
                f.get(from).ok_or_else(|| format_err(i + 1, "missing child count"))?,
                i + 1,
            )?;
            let ids: Vec<u32> = f[from + 1..]
                .iter()
                .map(|s| s.parse::<u32>().map_err(|e| format_err(i + 1, e)))
                .collect::<Result<_, _>>()?;
            if ids.len() != c {
                return Err(format_err(i + 1, format!("expected {c} children, found {}", ids.len())));
            }
            Ok(ids)
        };
        let node = match f.first().copied() {
            Some("L") => {
                let l: Lit = f
                    .get(1)
                    .ok_or_else(|| format_err(i + 1, "missing literal"))?
                    .parse()
                    .map_err(|e| format_err(i + 1, e))?;
                Node::Lit(l)
            }
            Some("A") => {
                let ch = children(1)?;
                if ch.is_empty() {
                    Node::True
                } else {
                    Node::And(ch)
                }
            }
            Some("O") => {
                let var: Var = f
                    .get(1)
                    .ok_or_else(|| format_err(i + 1, "missing decision variable"))?
                    .parse()
                    .map_err(|e| format_err(i + 1, e))?;
                let ch = children(2)?;
                if ch.is_empty() {
                    Node::False
                } else {
                    Node::Or { var, children: ch }
                }
            }
            _ => return Err(format_err(i + 1, "unknown node kind")),
        };
        nodes.push(node);
    }
    if nodes.len() != count {
        return Err(format_err(
            0,
            format!("header promises {count} nodes, found {}", nodes.len()),
        ));
    }
    if count == 0 {
        return Err(format_err(0, "no nodes"));
    }
    let d = Ddnnf::from_nodes(nodes, (count - 1) as u32, num_vars)?;
    if d.edges() != edges {
        return Err(format_err(
            0,
            format!("header promises {edges} edges, found {}", d.edges()),
        ));
    }
    Ok(d)
}

/// Parses, checks decomposability and decision determinism, then smooths.
pub fn import_nnf(text: &str) -> Result<Ddnnf, CompileError> {
    let d = parse_nnf(text)?;
    d.check_decomposable().map_err(CompileError::Invalid)?;
    d.check_deterministic().map_err(CompileError::Invalid)?;
    let s = d.smooth();
    s.validate().map_err(CompileError::Invalid)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compile::{compile, Evidence};

    #[test]
    fn dimacs_round_trip() {
        let text = "p cnf 3 2\n1 -2 0\n2 3 0\n";
        let cnf = parse_dimacs(text).unwrap();
        assert_eq!(cnf.clauses, vec![vec![1, -2], vec![2, 3]]);
        assert_eq!(write_dimacs(&cnf), text);
        assert!(parse_dimacs("p cnf 1 1\n2 0\n").is_err());
    }

    #[test]
    fn weights_round_trip() {
        let mut w = Weights::uniform(2);
        w.set(1, 0.9, 0.1);
        let text = write_weights(&w);
        assert_eq!(text, "w 1 0.9 0.1\nw 2 1 1\n");
        assert_eq!(parse_weights(&text, 2).unwrap(), w);
    }

    #[test]
    fn nnf_round_trip_is_bit_exact() {
        let cnf = parse_dimacs("p cnf 3 2\n1 2 0\n-1 3 0\n").unwrap();
        let d = compile(&cnf).unwrap();
        let text = write_nnf(&d);
        let back = parse_nnf(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(write_nnf(&back), text);
    }

    #[test]
    fn constants_use_empty_nodes() {
        let t = parse_nnf("nnf 1 0 2\nA 0\n").unwrap();
        assert_eq!(t.nodes(), [Node::True]);
        let f = parse_nnf("nnf 1 0 2\nO 0 0\n").unwrap();
        assert!(f.is_false());
        assert_eq!(write_nnf(&f), "nnf 1 0 2\nO 0 0\n");
    }

    #[test]
    fn import_smooths_c2d_output() {
        // x1 or (not x1 and x2), as c2d would emit it without smoothing.
        let text = "nnf 5 4 2\nL 1\nL -1\nL 2\nA 2 1 2\nO 1 2 0 3\n";
        let mut d = import_nnf(text).unwrap();
        let w = Weights::uniform(2);
        assert_eq!(d.evaluate(&w, &Evidence::new(2)), 3.0);
        assert!(import_nnf("nnf 3 2 1\nL 1\nL 1\nA 2 0 1\n").is_err());
    }
}
