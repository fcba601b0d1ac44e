// SPDX-License-Identifier: Apache-2.0

use std::fmt::{self, Write};

use crate::expr::{fmt_f64, BinOp, Index, Reducer, UnOp};
use crate::loop_ir::print::{decl_line, loop_header, INDENT};

use super::{TileAccess, TileExpr, TileIdx, TileLoop, TileProgram, TileStmt, TileStore};

#[derive(Clone, Copy, PartialEq)]
enum Style {
    Tile,
    Pseudo,
}

pub(crate) fn reducer_symbol(r: Reducer) -> &'static str {
    match r {
        Reducer::Add => "+",
        Reducer::Mul => "*",
        Reducer::Max => "max",
        Reducer::Min => "min",
    }
}

fn prec(e: &TileExpr) -> u8 {
    match e {
        TileExpr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        TileExpr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        TileExpr::Un(UnOp::Neg, _) => 3,
        TileExpr::Lit(v) if v.is_sign_negative() && !v.is_nan() && *v != 0.0 => 3,
        _ => 4,
    }
}

fn index(ix: &Index, style: Style) -> String {
    let s = ix.to_string();
    match style {
        Style::Tile => s,
        Style::Pseudo => s.replace(" * ", "*").replace(" + ", "+").replace(" - ", "-"),
    }
}

fn idx(ix: &TileIdx, style: Style) -> String {
    match ix {
        TileIdx::Point(p) => index(p, style),
        TileIdx::None => "None".into(),
        TileIdx::Slice { lo, len, step } => {
            let hi = lo.add(&Index::constant(*len as i64 * step));
            let (lo, hi) = (index(lo, style), index(&hi, style));
            if *step == 1 {
                format!("{lo} : {hi}")
            } else {
                format!("{lo} : {hi} : {step}")
            }
        }
    }
}

fn access(a: &TileAccess, style: Style) -> String {
    let parts: Vec<String> = a.idx.iter().map(|i| idx(i, style)).collect();
    format!("{}[{}]", a.tensor, parts.join(", "))
}

fn expr(out: &mut String, e: &TileExpr, style: Style) {
    let child = |out: &mut String, c: &TileExpr, paren: bool| {
        if paren {
            out.push('(');
        }
        expr(out, c, style);
        if paren {
            out.push(')');
        }
    };
    match e {
        TileExpr::Lit(v) => out.push_str(&fmt_f64(*v)),
        TileExpr::Var(v) => out.push_str(v),
        TileExpr::Access(a) => out.push_str(&access(a, style)),
        TileExpr::Bin(op @ (BinOp::Max | BinOp::Min), a, b) => {
            out.push_str(if *op == BinOp::Max { "max(" } else { "min(" });
            expr(out, a, style);
            out.push_str(", ");
            expr(out, b, style);
            out.push(')');
        }
        TileExpr::Bin(op, a, b) => {
            let p = prec(e);
            let sym = match op {
                BinOp::Add => " + ",
                BinOp::Sub => " - ",
                BinOp::Mul => " * ",
                _ => " / ",
            };
            child(out, a, prec(a) < p);
            out.push_str(sym);
            child(out, b, prec(b) <= p);
        }
        TileExpr::Un(UnOp::Neg, a) => {
            out.push('-');
            child(out, a, prec(a) < 4 || matches!(**a, TileExpr::Lit(_)));
        }
        TileExpr::Un(op, a) => {
            out.push_str(match op {
                UnOp::Exp => "exp(",
                UnOp::Log => "log(",
                UnOp::Tanh => "tanh(",
                UnOp::Neg => unreachable!(),
            });
            expr(out, a, style);
            out.push(')');
        }
        TileExpr::Select(c, a, b) => {
            out.push_str("select(");
            for (k, (op, l, r)) in c.iter().enumerate() {
                if k > 0 {
                    out.push_str(" and ");
                }
                expr(out, l, style);
                write!(out, " {} ", op.symbol()).unwrap();
                expr(out, r, style);
            }
            out.push_str(", ");
            expr(out, a, style);
            out.push_str(", ");
            expr(out, b, style);
            out.push(')');
        }
        TileExpr::Reduce { op, dim, arg } => {
            let op = reducer_symbol(*op);
            if style == Style::Pseudo {
                write!(out, "reduce({op}, dim={dim}, tile=").unwrap();
                expr(out, arg, style);
            } else {
                write!(out, "reduce({op}, ").unwrap();
                expr(out, arg, style);
                write!(out, ", dim={dim}").unwrap();
            }
            out.push(')');
        }
        TileExpr::Permute { order, arg } => {
            out.push_str("permute(");
            expr(out, arg, style);
            let o: Vec<String> = order.iter().map(|k| k.to_string()).collect();
            let tuple = if o.len() == 1 { format!("({},)", o[0]) } else { format!("({})", o.join(", ")) };
            write!(out, ", order={tuple})").unwrap();
        }
    }
}

impl fmt::Display for TileExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        expr(&mut s, self, Style::Tile);
        f.write_str(&s)
    }
}

impl fmt::Display for TileAccess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&access(self, Style::Tile))
    }
}

fn strided(st: &TileStore) -> bool {
    let mut any = false;
    let mut check = |a: &TileAccess| any |= a.idx.iter().any(|i| matches!(i, TileIdx::Slice { step, .. } if *step != 1));
    check(&st.lhs);
    for a in st.value.accesses() {
        check(a);
    }
    any
}

/// `X[..] = X[..] + G` printed as `X[..] += G`.
fn add_sugar(st: &TileStore) -> Option<&TileExpr> {
    match &st.value {
        TileExpr::Bin(BinOp::Add, a, b) if matches!(a.as_ref(), TileExpr::Access(x) if *x == st.lhs) => Some(b),
        _ => None,
    }
}

fn chain(l: &TileLoop) -> Vec<&TileLoop> {
    let mut out = vec![l];
    let mut cur = l;
    while let [TileStmt::Loop(next)] = cur.body.as_slice() {
        if cur.annotation.is_some() || next.annotation.is_some() {
            break;
        }
        out.push(next);
        cur = next;
    }
    out
}

fn stmts(out: &mut String, body: &[TileStmt], depth: usize, style: Style) {
    let pad = match style {
        Style::Tile => INDENT.repeat(depth),
        Style::Pseudo => "  ".repeat(depth),
    };
    for s in body {
        match s {
            TileStmt::Loop(l) => {
                let c = chain(l);
                let hdr: Vec<(&str, usize)> = c.iter().map(|l| (l.var.as_str(), l.extent)).collect();
                writeln!(out, "{pad}{}", loop_header(&hdr, l.annotation.as_deref())).unwrap();
                stmts(out, &c.last().unwrap().body, depth + 1, style);
            }
            TileStmt::Store(st) => {
                let lhs = access(&st.lhs, style);
                let mut line = String::new();
                match (style, add_sugar(st)) {
                    (Style::Tile, Some(g)) => {
                        write!(line, "{pad}{lhs} += ").unwrap();
                        expr(&mut line, g, style);
                    }
                    _ => {
                        write!(line, "{pad}{lhs} = ").unwrap();
                        expr(&mut line, &st.value, style);
                    }
                }
                if style == Style::Tile {
                    writeln!(out, "{pad}# {}:", st.name).unwrap();
                    if strided(st) {
                        line.push_str("  # strided slice");
                    }
                }
                writeln!(out, "{line}").unwrap();
            }
        }
    }
}

/// Declarations, then the statements with `# name:` labels; the result
/// parses back with [`super::parse_tile`].
pub fn print_tile(p: &TileProgram) -> String {
    let mut out = String::new();
    for t in &p.tensors {
        writeln!(out, "{}", decl_line(t)).unwrap();
    }
    if !p.body.is_empty() {
        out.push('\n');
        stmts(&mut out, &p.body, 0, Style::Tile);
    }
    out
}

/// Statements only, two-space indented, with compact indices and keyword
/// arguments on `reduce`.
pub fn print_pseudo_python(p: &TileProgram) -> String {
    let mut out = String::new();
    stmts(&mut out, &p.body, 0, Style::Pseudo);
    out
}
