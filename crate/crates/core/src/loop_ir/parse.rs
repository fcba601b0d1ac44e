// SPDX-License-Identifier: Apache-2.0
//! Parser for the indentation-based loop syntax.
//!
//! ```text
//! tensor inp: f32[2, 4] input
//! for i, j in grid(2, 4):
//!     # s_max:
//!     xmax[i] = max(xmax[i], inp[i, j])
//! ```
//!
//! A comment line `# name:` labels the next store; a trailing `# name` on a
//! loop or store line does too when no label is pending.

use std::collections::BTreeSet;

use crate::expr::{BinOp, Parser, ScalarExpr};

use super::{DType, IrError, Loop, Program, Role, Stmt, Store, TensorDecl};

/// A logical line: continuation lines inside open brackets are joined.
#[derive(Debug, Clone)]
pub(crate) struct Line {
    pub number: usize,
    pub indent: usize,
    pub code: String,
    pub comment: Option<String>,
}

pub(crate) fn logical_lines(src: &str) -> Result<Vec<Line>, IrError> {
    let mut out: Vec<Line> = Vec::new();
    let mut open: Option<(Line, i32)> = None;
    for (k, raw) in src.lines().enumerate() {
        let (code, comment) = match raw.find('#') {
            Some(p) => (&raw[..p], Some(raw[p + 1..].trim().to_string())),
            None => (raw, None),
        };
        let depth: i32 = code
            .chars()
            .map(|c| match c {
                '(' | '[' => 1,
                ')' | ']' => -1,
                _ => 0,
            })
            .sum();
        if let Some((mut line, d)) = open.take() {
            line.code.push(' ');
            line.code.push_str(code.trim());
            if line.comment.is_none() {
                line.comment = comment;
            }
            let d = d + depth;
            if d > 0 {
                open = Some((line, d));
            } else {
                out.push(line);
            }
            continue;
        }
        if code.trim().is_empty() {
            if let Some(c) = comment {
                out.push(Line { number: k + 1, indent: usize::MAX, code: String::new(), comment: Some(c) });
            }
            continue;
        }
        let indent = code.len() - code.trim_start().len();
        let line = Line { number: k + 1, indent, code: code.trim().to_string(), comment };
        if depth > 0 {
            open = Some((line, depth));
        } else {
            out.push(line);
        }
    }
    if let Some((line, _)) = open {
        return Err(IrError::Parse { line: line.number, msg: "unclosed bracket".into() });
    }
    Ok(out)
}

pub(crate) fn label_of(comment: &str) -> Option<String> {
    let c = comment.trim().trim_end_matches(':').trim();
    let mut chars = c.chars();
    let first = chars.next()?;
    ((first.is_ascii_alphabetic() || first == '_') && c.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '\''))
        .then(|| c.to_string())
}

pub(crate) fn perr(line: usize, e: impl std::fmt::Display) -> IrError {
    IrError::Parse { line, msg: e.to_string() }
}

pub(crate) fn parse_decl(line: &Line) -> Result<TensorDecl, IrError> {
    let n = line.number;
    let mut p = Parser::new(&line.code).map_err(|e| perr(n, e))?;
    p.expect_keyword("tensor").map_err(|e| perr(n, e))?;
    let name = p.expect_ident().map_err(|e| perr(n, e))?;
    p.expect_sym(":").map_err(|e| perr(n, e))?;
    let dtype = match p.expect_ident().map_err(|e| perr(n, e))?.as_str() {
        "f16" => DType::F16,
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(perr(n, format!("unknown dtype `{other}`"))),
    };
    p.expect_sym("[").map_err(|e| perr(n, e))?;
    let mut shape = Vec::new();
    if !p.eat_sym("]") {
        loop {
            let d = p.expect_int().map_err(|e| perr(n, e))?;
            if d <= 0 {
                return Err(perr(n, "tensor extents must be positive"));
            }
            shape.push(d as usize);
            if p.eat_sym("]") {
                break;
            }
            p.expect_sym(",").map_err(|e| perr(n, e))?;
        }
    }
    let mut role = Role::Intermediate;
    let mut scope = None;
    while !p.at_end() {
        if p.eat_sym("@") {
            scope = Some(p.expect_ident().map_err(|e| perr(n, e))?);
            continue;
        }
        role = match p.expect_ident().map_err(|e| perr(n, e))?.as_str() {
            "input" => Role::Input,
            "intermediate" => Role::Intermediate,
            "output" => Role::Output,
            other => return Err(perr(n, format!("unknown role `{other}`"))),
        };
    }
    Ok(TensorDecl { name, dtype, shape, role, scope })
}

/// `[annotation] for a, b in grid(n, m):` or `for a in range(n):`; returns the
/// loops and any code following the colon on the same line.
pub(crate) fn parse_for(line: &Line) -> Result<Option<(Vec<Loop>, String)>, IrError> {
    let n = line.number;
    let Some(for_pos) = find_keyword(&line.code, "for") else { return Ok(None) };
    let annotation = line.code[..for_pos].trim();
    let annotation = (!annotation.is_empty()).then(|| annotation.to_string());
    let rest = &line.code[for_pos..];
    let colon = header_end(rest).unwrap_or(rest.len());
    let header = &rest[..colon];
    let trailing = rest.get(colon + 1..).unwrap_or("").trim().to_string();
    let mut p = Parser::new(header).map_err(|e| perr(n, e))?;
    p.expect_keyword("for").map_err(|e| perr(n, e))?;
    let mut vars = vec![p.expect_ident().map_err(|e| perr(n, e))?];
    while p.eat_sym(",") {
        vars.push(p.expect_ident().map_err(|e| perr(n, e))?);
    }
    p.expect_keyword("in").map_err(|e| perr(n, e))?;
    let kind = p.expect_ident().map_err(|e| perr(n, e))?;
    p.expect_sym("(").map_err(|e| perr(n, e))?;
    let mut extents = Vec::new();
    loop {
        let e = p.expect_int().map_err(|e| perr(n, e))?;
        extents.push(e);
        if p.eat_sym(")") {
            break;
        }
        p.expect_sym(",").map_err(|e| perr(n, e))?;
    }
    p.expect_end().map_err(|e| perr(n, e))?;
    match kind.as_str() {
        "range" if vars.len() == 1 && extents.len() == 1 => {}
        "grid" if vars.len() == extents.len() => {}
        _ => return Err(perr(n, "loop header must be `range(n)` or `grid(n, ...)` matching its variables")),
    }
    let mut loops = Vec::new();
    for (v, e) in vars.into_iter().zip(extents) {
        if e <= 0 {
            return Err(IrError::EmptyLoop(v));
        }
        loops.push(Loop { var: v, extent: e as usize, annotation: None, body: Vec::new() });
    }
    loops[0].annotation = annotation;
    Ok(Some((loops, trailing)))
}

fn find_keyword(code: &str, kw: &str) -> Option<usize> {
    let bytes = code.as_bytes();
    let mut start = 0;
    while let Some(off) = code[start..].find(kw) {
        let p = start + off;
        let before_ok = p == 0 || bytes[p - 1] == b' ';
        let after = p + kw.len();
        let after_ok = after < bytes.len() && bytes[after] == b' ';
        if before_ok && after_ok {
            return Some(p);
        }
        start = p + 1;
    }
    None
}

/// Position of the colon that closes a loop header (outside brackets).
pub(crate) fn header_end(s: &str) -> Option<usize> {
    let mut depth = 0i32;
    for (i, c) in s.char_indices() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            ':' if depth == 0 => return Some(i),
            _ => {}
        }
    }
    None
}

fn parse_store(code: &str, n: usize, name: String) -> Result<Store, IrError> {
    let mut p = Parser::new(code).map_err(|e| perr(n, e))?;
    let tensor = p.expect_ident().map_err(|e| perr(n, e))?;
    p.expect_sym("[").map_err(|e| perr(n, e))?;
    let indices = p.index_list("]").map_err(|e| perr(n, e))?;
    let accumulate = if p.eat_sym("+=") {
        true
    } else {
        p.expect_sym("=").map_err(|e| perr(n, e))?;
        false
    };
    let rhs = p.expr().map_err(|e| perr(n, e))?;
    p.expect_end().map_err(|e| perr(n, e))?;
    let value = if accumulate {
        ScalarExpr::bin(BinOp::Add, ScalarExpr::load(&tensor, indices.clone()), rhs)
    } else {
        rhs
    };
    Ok(Store { name, tensor, indices, value })
}

/// A parsed statement tree whose leaves are produced by a caller-supplied
/// parser; shared by the loop and tile syntaxes.
pub(crate) enum Tree<L> {
    Loop(Loop, Vec<Tree<L>>),
    Leaf(L),
}

pub(crate) type LeafParser<'a, L> = &'a dyn Fn(&str, usize, String) -> Result<L, IrError>;

struct BodyParser<'a, L> {
    lines: Vec<Line>,
    pos: usize,
    pending: Option<String>,
    unnamed: usize,
    leaf: LeafParser<'a, L>,
}

impl<L> BodyParser<'_, L> {
    fn next_code(&mut self) -> Option<usize> {
        while self.pos < self.lines.len() {
            let l = &self.lines[self.pos];
            if l.code.is_empty() {
                if let Some(lbl) = l.comment.as_deref().and_then(label_of) {
                    self.pending = Some(lbl);
                }
                self.pos += 1;
                continue;
            }
            return Some(l.indent);
        }
        None
    }

    fn take_label(&mut self, trailing: Option<&str>) -> String {
        if let Some(l) = self.pending.take() {
            return l;
        }
        if let Some(l) = trailing.and_then(label_of) {
            return l;
        }
        self.unnamed += 1;
        format!("\u{0}{}", self.unnamed)
    }

    fn body(&mut self, indent: usize) -> Result<Vec<Tree<L>>, IrError> {
        let mut out = Vec::new();
        while let Some(ind) = self.next_code() {
            if ind < indent {
                break;
            }
            if ind > indent {
                return Err(perr(self.lines[self.pos].number, "unexpected indentation"));
            }
            out.push(self.stmt()?);
        }
        Ok(out)
    }

    fn stmt(&mut self) -> Result<Tree<L>, IrError> {
        let line = self.lines[self.pos].clone();
        self.pos += 1;
        if let Some((mut loops, trailing)) = parse_for(&line)? {
            let body = if trailing.is_empty() {
                if let Some(l) = line.comment.as_deref().and_then(label_of) {
                    if self.pending.is_none() {
                        self.pending = Some(l);
                    }
                }
                match self.next_code() {
                    Some(ind) if ind > line.indent => self.body(ind)?,
                    _ => return Err(perr(line.number, "loop without body")),
                }
            } else {
                let name = self.take_label(line.comment.as_deref());
                vec![Tree::Leaf((self.leaf)(&trailing, line.number, name)?)]
            };
            let mut inner = body;
            while let Some(l) = loops.pop() {
                inner = vec![Tree::Loop(l, inner)];
            }
            return Ok(inner.pop().unwrap());
        }
        let name = self.take_label(line.comment.as_deref());
        Ok(Tree::Leaf((self.leaf)(&line.code, line.number, name)?))
    }
}

/// Parses indented statements; leaf names left unlabeled start with NUL.
pub(crate) fn parse_body<L>(lines: Vec<Line>, leaf: LeafParser<'_, L>) -> Result<Vec<Tree<L>>, IrError> {
    let mut bp = BodyParser { lines, pos: 0, pending: None, unnamed: 0, leaf };
    let body = match bp.next_code() {
        Some(ind) => bp.body(ind)?,
        None => Vec::new(),
    };
    if bp.pos < bp.lines.len() {
        return Err(perr(bp.lines[bp.pos].number, "inconsistent indentation"));
    }
    Ok(body)
}

/// Declarations first (at indent 0), then everything else.
pub(crate) fn split_decls(lines: Vec<Line>) -> Result<(Vec<TensorDecl>, Vec<Line>), IrError> {
    let mut tensors: Vec<TensorDecl> = Vec::new();
    let mut rest = Vec::new();
    for l in lines {
        if l.indent == 0 && l.code.starts_with("tensor ") {
            let d = parse_decl(&l)?;
            if tensors.iter().any(|t| t.name == d.name) {
                return Err(IrError::Duplicate(d.name));
            }
            tensors.push(d);
        } else {
            rest.push(l);
        }
    }
    Ok((tensors, rest))
}

fn to_stmt(t: Tree<Store>) -> Stmt {
    match t {
        Tree::Leaf(s) => Stmt::Store(s),
        Tree::Loop(mut l, body) => {
            l.body = body.into_iter().map(to_stmt).collect();
            Stmt::Loop(l)
        }
    }
}

pub fn parse_program(src: &str) -> Result<Program, IrError> {
    let (tensors, rest) = split_decls(logical_lines(src)?)?;
    let body = parse_body(rest, &parse_store)?.into_iter().map(to_stmt).collect();
    let mut p = Program { tensors, body };
    name_blocks(&mut p, &mut BTreeSet::new())?;
    Ok(p)
}

// Placeholder names start with NUL; give them `s<k>` names that do not clash.
fn name_blocks(p: &mut Program, names: &mut BTreeSet<String>) -> Result<(), IrError> {
    let mut dup = None;
    p.map_stores(&mut |s| {
        if !s.name.starts_with('\u{0}') && !names.insert(s.name.clone()) {
            dup = Some(s.name.clone());
        }
    });
    if let Some(d) = dup {
        return Err(IrError::Duplicate(d));
    }
    let mut k = 0;
    p.map_stores(&mut |s| {
        if s.name.starts_with('\u{0}') {
            loop {
                k += 1;
                let cand = format!("s{k}");
                if names.insert(cand.clone()) {
                    s.name = cand;
                    break;
                }
            }
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inline_loop_bodies_and_trailing_labels() {
        let src = "\
tensor inputs: f32[2, 4] input
tensor max_l: f32[2, 2]
for i, j0 in grid(2, 2):
    for j1 in range(2): # s_max_local
        max_l[i, j0] = max(max_l[i, j0], inputs[i, j0 * 2 + j1])
";
        let p = parse_program(src).unwrap();
        assert_eq!(p.block_names(), ["s_max_local"]);
        let src2 = "\
tensor inputs: f32[2, 4] input
tensor max_l: f32[2, 2]
for i, j0 in grid(2, 2):
    for j1 in range(2): max_l[i, j0] = max(max_l[i, j0], inputs[i, j0 * 2 + j1])
";
        let q = parse_program(src2).unwrap();
        assert_eq!(q.block_names(), ["s1"]);
        assert_eq!(p.body.len(), 1);
    }

    #[test]
    fn continuation_lines_join() {
        let src = "\
tensor inp: f32[2, 4] input
tensor xexp: f32[2, 4] output
for i, j in grid(2, 4):
    xexp[i, j] = exp(
        inp[i, j] - 1)
";
        let p = parse_program(src).unwrap();
        assert_eq!(p.blocks()[0].store.value.to_string(), "exp(inp[i, j] - 1)");
    }

    #[test]
    fn annotations_and_scopes() {
        let src = "\
tensor q: f32[2] input @shared
tensor o: f32[2] output
blockIdx.x for b in range(2):
    o[b] = q[b]
";
        let p = parse_program(src).unwrap();
        assert_eq!(p.tensors[0].scope.as_deref(), Some("shared"));
        let crate::loop_ir::Stmt::Loop(l) = &p.body[0] else { panic!() };
        assert_eq!(l.annotation.as_deref(), Some("blockIdx.x"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_program("tensor a: f32[2] input\nfor i in range(2):\n    a[i] = = 1\n").unwrap_err();
        assert!(matches!(err, IrError::Parse { line: 3, .. }), "{err}");
        assert!(matches!(parse_program("tensor a: f32[2]\ntensor a: f32[2]\n"), Err(IrError::Duplicate(_))));
    }
}
