// SPDX-License-Identifier: Apache-2.0
//! Parser for the tile text format. Layout, labels and loop headers are
//! shared with the loop-IR parser; only statements differ.

use std::collections::BTreeSet;

use crate::expr::{BinOp, CmpOp, ParseError, Parser, Reducer, Tok, UnOp};
use crate::loop_ir::parse::{logical_lines, parse_body, perr, split_decls, Tree};
use crate::loop_ir::IrError;

use super::{TileAccess, TileError, TileExpr, TileIdx, TileLoop, TileProgram, TileStmt, TileStore};

struct TileParser(Parser);

impl TileParser {
    fn expr(&mut self) -> Result<TileExpr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.0.eat_sym("+") {
                BinOp::Add
            } else if self.0.eat_sym("-") {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            lhs = TileExpr::bin(op, lhs, self.term()?);
        }
    }

    fn term(&mut self) -> Result<TileExpr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.0.eat_sym("*") {
                BinOp::Mul
            } else if self.0.eat_sym("/") {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            lhs = TileExpr::bin(op, lhs, self.unary()?);
        }
    }

    fn unary(&mut self) -> Result<TileExpr, ParseError> {
        if self.0.eat_sym("-") {
            return match self.0.peek() {
                Some(Tok::Num(v)) => {
                    let v = *v;
                    self.0.bump();
                    Ok(TileExpr::Lit(-v))
                }
                Some(Tok::Ident(s)) if s == "inf" => {
                    self.0.bump();
                    Ok(TileExpr::Lit(f64::NEG_INFINITY))
                }
                _ => Ok(TileExpr::Un(UnOp::Neg, Box::new(self.unary()?))),
            };
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<TileExpr, ParseError> {
        match self.0.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.0.bump();
                Ok(TileExpr::Lit(v))
            }
            Some(Tok::Sym("(")) => {
                self.0.bump();
                let e = self.expr()?;
                self.0.expect_sym(")")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.0.bump();
                self.after_ident(name)
            }
            _ => self.0.error("expected expression"),
        }
    }

    fn after_ident(&mut self, name: String) -> Result<TileExpr, ParseError> {
        match name.as_str() {
            "inf" => return Ok(TileExpr::Lit(f64::INFINITY)),
            "nan" | "NaN" => return Ok(TileExpr::Lit(f64::NAN)),
            _ => {}
        }
        if self.0.eat_sym("[") {
            return Ok(TileExpr::Access(self.access_rest(name)?));
        }
        if !self.0.eat_sym("(") {
            return Ok(TileExpr::Var(name));
        }
        let e = match name.as_str() {
            "exp" | "log" | "tanh" => {
                let op = match name.as_str() {
                    "exp" => UnOp::Exp,
                    "log" => UnOp::Log,
                    _ => UnOp::Tanh,
                };
                TileExpr::Un(op, Box::new(self.expr()?))
            }
            "max" | "min" => {
                let op = if name == "max" { BinOp::Max } else { BinOp::Min };
                let mut acc = self.expr()?;
                self.0.expect_sym(",")?;
                loop {
                    acc = TileExpr::bin(op, acc, self.expr()?);
                    if !self.0.eat_sym(",") {
                        break;
                    }
                }
                acc
            }
            "select" => {
                let mut clauses = Vec::new();
                loop {
                    let l = self.expr()?;
                    let op = self.cmp()?;
                    clauses.push((op, l, self.expr()?));
                    if !self.0.eat_ident("and") {
                        break;
                    }
                }
                self.0.expect_sym(",")?;
                let a = self.expr()?;
                self.0.expect_sym(",")?;
                TileExpr::Select(clauses, Box::new(a), Box::new(self.expr()?))
            }
            "reduce" => {
                let op = match self.0.bump() {
                    Some(Tok::Sym("+")) => Reducer::Add,
                    Some(Tok::Sym("*")) => Reducer::Mul,
                    Some(Tok::Ident(s)) if s == "max" => Reducer::Max,
                    Some(Tok::Ident(s)) if s == "min" => Reducer::Min,
                    _ => return self.0.error("expected a reduce operator"),
                };
                self.0.expect_sym(",")?;
                let arg = self.expr()?;
                self.0.expect_sym(",")?;
                self.0.expect_keyword("dim")?;
                self.0.expect_sym("=")?;
                let dim = self.nonneg()?;
                TileExpr::Reduce { op, dim, arg: Box::new(arg) }
            }
            "permute" => {
                let arg = self.expr()?;
                self.0.expect_sym(",")?;
                self.0.expect_keyword("order")?;
                self.0.expect_sym("=")?;
                self.0.expect_sym("(")?;
                let mut order = Vec::new();
                while !self.0.eat_sym(")") {
                    order.push(self.nonneg()?);
                    if !self.0.eat_sym(",") {
                        self.0.expect_sym(")")?;
                        break;
                    }
                }
                TileExpr::Permute { order, arg: Box::new(arg) }
            }
            other => return self.0.error(format!("unknown function `{other}`")),
        };
        self.0.expect_sym(")")?;
        Ok(e)
    }

    fn nonneg(&mut self) -> Result<usize, ParseError> {
        let v = self.0.expect_int()?;
        if v < 0 {
            return self.0.error("expected a non-negative integer");
        }
        Ok(v as usize)
    }

    fn cmp(&mut self) -> Result<CmpOp, ParseError> {
        let op = match self.0.peek() {
            Some(Tok::Sym("<")) => CmpOp::Lt,
            Some(Tok::Sym("<=")) => CmpOp::Le,
            Some(Tok::Sym(">")) => CmpOp::Gt,
            Some(Tok::Sym(">=")) => CmpOp::Ge,
            Some(Tok::Sym("==")) => CmpOp::Eq,
            Some(Tok::Sym("!=")) => CmpOp::Ne,
            _ => return self.0.error("expected comparison"),
        };
        self.0.bump();
        Ok(op)
    }

    fn access_rest(&mut self, tensor: String) -> Result<TileAccess, ParseError> {
        let mut idx = Vec::new();
        if self.0.eat_sym("]") {
            return Ok(TileAccess { tensor, idx });
        }
        loop {
            idx.push(self.tile_idx()?);
            if self.0.eat_sym("]") {
                return Ok(TileAccess { tensor, idx });
            }
            self.0.expect_sym(",")?;
        }
    }

    fn tile_idx(&mut self) -> Result<TileIdx, ParseError> {
        if self.0.eat_ident("None") {
            return Ok(TileIdx::None);
        }
        let lo = self.0.index()?;
        if !self.0.eat_sym(":") {
            return Ok(TileIdx::Point(lo));
        }
        let hi = self.0.index()?;
        let step = if self.0.eat_sym(":") { self.0.expect_int()? } else { 1 };
        let span = hi.add(&lo.scale(-1));
        if !span.terms.is_empty() || step == 0 || span.constant % step != 0 || span.constant / step <= 0 {
            return self.0.error("slice bounds must differ by a positive multiple of the step");
        }
        Ok(TileIdx::Slice { lo, len: (span.constant / step) as usize, step })
    }
}

fn parse_store(code: &str, line: usize, name: String) -> Result<TileStore, IrError> {
    let mut p = TileParser(Parser::new(code).map_err(|e| perr(line, e))?);
    let run = |p: &mut TileParser| -> Result<TileStore, ParseError> {
        let tensor = p.0.expect_ident()?;
        p.0.expect_sym("[")?;
        let lhs = p.access_rest(tensor)?;
        let sugar = p.0.eat_sym("+=");
        if !sugar {
            p.0.expect_sym("=")?;
        }
        let rhs = p.expr()?;
        p.0.expect_end()?;
        let value = if sugar { TileExpr::bin(BinOp::Add, TileExpr::Access(lhs.clone()), rhs) } else { rhs };
        Ok(TileStore { name, lhs, value })
    };
    run(&mut p).map_err(|e| perr(line, e))
}

struct Namer {
    labels: BTreeSet<String>,
    seen: BTreeSet<String>,
    fresh: usize,
}

fn to_stmt(t: Tree<TileStore>, n: &mut Namer) -> Result<TileStmt, IrError> {
    Ok(match t {
        Tree::Leaf(mut s) => {
            if s.name.starts_with('\u{0}') {
                while n.labels.contains(&format!("store{}", n.fresh)) || n.seen.contains(&format!("store{}", n.fresh)) {
                    n.fresh += 1;
                }
                s.name = format!("store{}", n.fresh);
            }
            if !n.seen.insert(s.name.clone()) {
                return Err(IrError::Duplicate(s.name));
            }
            TileStmt::Store(s)
        }
        Tree::Loop(l, body) => TileStmt::Loop(TileLoop {
            var: l.var,
            extent: l.extent,
            annotation: l.annotation,
            body: body.into_iter().map(|t| to_stmt(t, n)).collect::<Result<_, _>>()?,
        }),
    })
}

pub fn parse_tile(src: &str) -> Result<TileProgram, TileError> {
    let (tensors, rest) = split_decls(logical_lines(src)?)?;
    let trees = parse_body(rest, &parse_store)?;
    // Explicit labels claim their names before unlabeled stores are numbered.
    fn labels(t: &Tree<TileStore>, out: &mut BTreeSet<String>) {
        match t {
            Tree::Leaf(s) if !s.name.starts_with('\u{0}') => {
                out.insert(s.name.clone());
            }
            Tree::Leaf(_) => {}
            Tree::Loop(_, b) => b.iter().for_each(|t| labels(t, out)),
        }
    }
    let mut n = Namer { labels: BTreeSet::new(), seen: BTreeSet::new(), fresh: 0 };
    trees.iter().for_each(|t| labels(t, &mut n.labels));
    let body = trees.into_iter().map(|t| to_stmt(t, &mut n)).collect::<Result<_, _>>()?;
    Ok(TileProgram { tensors, body })
}

#[cfg(test)]
pub(crate) mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::expr::Index;
    use crate::loop_ir::{parse_program, Program, Role, TensorDecl};
    use crate::tile_ir::{print_pseudo_python, print_tile, translate};

    #[test]
    fn slices_nones_and_steps() {
        let p = parse_tile("tensor x: f32[8, 8] input\ntensor y: f32[8] output\n# s:\ny[0 : 4] = reduce(max, x[None, i, 6 : 0 : -2], dim=2)\n").unwrap();
        let st = p.store("s").unwrap();
        let TileExpr::Reduce { arg, .. } = &st.value else { panic!("expected reduce") };
        let TileExpr::Access(a) = arg.as_ref() else { panic!("expected access") };
        assert_eq!(a.idx[2], TileIdx::Slice { lo: Index::constant(6), len: 3, step: -2 });
        assert!(matches!(a.idx[0], TileIdx::None));
    }

    #[test]
    fn bad_slices_are_rejected() {
        for src in ["y[0 : i] = 1\n", "y[4 : 0] = 1\n", "y[0 : 3 : 2] = 1\n"] {
            assert!(parse_tile(src).is_err(), "{src}");
        }
    }

    #[test]
    fn unlabeled_stores_get_fresh_names() {
        let p = parse_tile("# store0:\na[0] = 1\na[1] = 2\n").unwrap();
        let names: Vec<&str> = p.stores().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["store0", "store1"]);
    }

    #[test]
    fn pseudo_python_of_the_transpose_example() {
        let p = parse_program(
            "tensor inp: f32[6, 4] input\ntensor exp2d: f32[4, 6] output\nfor i, j in grid(2, 2):\n    for r, c in grid(2, 3):\n        exp2d[i * 2 + r, j * 3 + c] = exp(inp[j * 3 + c, i * 2 + r])\n",
        )
        .unwrap();
        assert_eq!(
            print_pseudo_python(&translate(&p)),
            "for i, j in grid(2, 2):\n  exp2d[i*2 : i*2+2, j*3 : j*3+3] = exp(permute(inp[j*3 : j*3+3, i*2 : i*2+2], order=(1, 0)))\n"
        );
    }

    // Random loop programs over one input: elementwise maps and reductions
    // with affine, occasionally transposed or strided, reads.
    pub(crate) fn random_program() -> impl Strategy<Value = Program> {
        let read = (0usize..4, any::<bool>(), 1i64..=2);
        let stmt = (any::<bool>(), any::<bool>(), proptest::collection::vec(read, 1..=3), 0usize..3);
        proptest::collection::vec(stmt, 1..=3).prop_map(|stmts| {
            let mut p = Program::default();
            p.tensors.push(TensorDecl::new("x", &[8, 8], Role::Input));
            for (k, (reduce, outer_loop, reads, op)) in stmts.into_iter().enumerate() {
                let out = format!("y{k}");
                p.tensors.push(TensorDecl::new(&out, if reduce { &[4] } else { &[4, 4] }, Role::Output));
                let terms: Vec<String> = reads
                    .iter()
                    .map(|(kind, swap, stride)| {
                        let (a, b) = if *swap { ("j", "i") } else { ("i", "j") };
                        match kind {
                            0 => format!("x[{a}, {b}]"),
                            1 => format!("x[{a} * {stride}, {b}]"),
                            2 => format!("x[{a}, 7 - {b}]"),
                            _ => format!("x[{a} + 4, 0]"),
                        }
                    })
                    .collect();
                let body = match op {
                    0 => terms.join(" + "),
                    1 => format!("exp({})", terms.join(" - ")),
                    _ => format!("max({}, 0.5) * 2", terms.join(" * ")),
                };
                let line = if reduce { format!("{out}[i] += {body}") } else { format!("{out}[i, j] = {body}") };
                let src = if outer_loop {
                    format!("for i in range(4):\n    for j in range(4):\n        # b{k}:\n        {line}\n")
                } else {
                    format!("for i, j in grid(4, 4):\n    # b{k}:\n    {line}\n")
                };
                let mut q = parse_program(&format!("tensor x: f32[8, 8] input\ntensor {out}: f32[4{}] output\n{src}", if reduce { "" } else { ", 4" })).unwrap();
                p.body.push(q.body.remove(0));
            }
            p
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn printed_tiles_parse_back(p in random_program()) {
            let t = translate(&p);
            let text = print_tile(&t);
            prop_assert_eq!(parse_tile(&text).unwrap(), t, "{}", text);
        }
    }
}
