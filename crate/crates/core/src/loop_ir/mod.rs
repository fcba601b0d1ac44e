// SPDX-License-Identifier: Apache-2.0
//! Loop-scalar programs: tensor declarations plus a tree of loops and stores.

mod dataflow;
mod equiv;
mod inline;
pub(crate) mod parse;
pub(crate) mod print;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::expr::{BinOp, Index, Load, Reducer, ScalarExpr};

pub use dataflow::{build_dataflow, reduce_predecessors, DataflowGraph, ReducePredecessors};
pub use equiv::equivalent_modulo_names;
pub use inline::inline_nest;
pub use parse::parse_program;
pub use print::print_loop_ir;
pub use validate::validate;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IrError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("duplicate name `{0}`")]
    Duplicate(String),
    #[error("`{tensor}` has rank {expected} but is accessed with {got} indices")]
    RankMismatch { tensor: String, expected: usize, got: usize },
    #[error("access to `{tensor}` dim {dim} spans [{lo}, {hi}] outside [0, {extent})")]
    OutOfBounds { tensor: String, dim: usize, lo: i64, hi: i64, extent: usize },
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("loop `{0}` has zero extent")]
    EmptyLoop(String),
    #[error("cyclic dataflow: `{reader}` reads `{tensor}` before any nest writes it")]
    CyclicDataflow { reader: String, tensor: String },
    #[error("cannot inline: {0}")]
    NotInlinable(String),
    #[error("unknown block `{0}`")]
    UnknownBlock(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F16,
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F16 => "f16",
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Input,
    Intermediate,
    Output,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Input => "input",
            Role::Intermediate => "intermediate",
            Role::Output => "output",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorDecl {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub role: Role,
    pub scope: Option<String>,
}

impl TensorDecl {
    pub fn new(name: &str, shape: &[usize], role: Role) -> Self {
        TensorDecl { name: name.to_string(), dtype: DType::F32, shape: shape.to_vec(), role, scope: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loop {
    pub var: String,
    pub extent: usize,
    pub annotation: Option<String>,
    pub body: Vec<Stmt>,
}

impl Loop {
    pub fn new(var: &str, extent: usize, body: Vec<Stmt>) -> Self {
        Loop { var: var.to_string(), extent, annotation: None, body }
    }
}

/// A single assignment `tensor[indices] = value`; `name` is its block handle.
#[derive(Debug, Clone, PartialEq)]
pub struct Store {
    pub name: String,
    pub tensor: String,
    pub indices: Vec<Index>,
    pub value: ScalarExpr,
}

impl Store {
    pub fn lhs_load(&self) -> Load {
        Load { tensor: self.tensor.clone(), indices: self.indices.clone() }
    }

    /// `X = X f G` (either operand order): returns `f` and `G`.
    pub fn accumulation(&self) -> Option<(Reducer, &ScalarExpr)> {
        let ScalarExpr::Bin(op, a, b) = &self.value else { return None };
        let f = Reducer::from_binop(*op)?;
        let me = self.lhs_load();
        match (a.as_ref(), b.as_ref()) {
            (ScalarExpr::Load(l), g) if *l == me => Some((f, g)),
            (g, ScalarExpr::Load(l)) if *l == me => Some((f, g)),
            _ => None,
        }
    }

    /// Root reducer whose operands include a read of the stored location
    /// anywhere; covers both `X = X f G` and repaired `X = h(X, ..) f G`.
    pub fn accumulating_reducer(&self) -> Option<Reducer> {
        let ScalarExpr::Bin(op, _, _) = &self.value else { return None };
        let f = Reducer::from_binop(*op)?;
        let me = self.lhs_load();
        self.value.loads().iter().any(|l| **l == me).then_some(f)
    }

    pub fn reads(&self) -> BTreeSet<String> {
        self.value.loads().iter().map(|l| l.tensor.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Loop(Loop),
    Store(Store),
}

/// Position of a statement: child indices from the program body downwards.
pub type Path = Vec<usize>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Program {
    pub tensors: Vec<TensorDecl>,
    pub body: Vec<Stmt>,
}

/// A store together with where it sits.
#[derive(Debug, Clone)]
pub struct BlockRef<'a> {
    pub path: Path,
    pub store: &'a Store,
    pub loops: Vec<&'a Loop>,
}

impl BlockRef<'_> {
    pub fn loop_vars(&self) -> Vec<String> {
        self.loops.iter().map(|l| l.var.clone()).collect()
    }

    /// Enclosing loop variables that do not index the stored location.
    pub fn reduce_vars(&self) -> Vec<String> {
        self.loops
            .iter()
            .filter(|l| !self.store.indices.iter().any(|ix| ix.mentions(&l.var)))
            .map(|l| l.var.clone())
            .collect()
    }

    /// Structural reduction: accumulates across at least one loop that does
    /// not index the output.
    pub fn structural_reducer(&self) -> Option<Reducer> {
        let f = self.store.accumulating_reducer()?;
        (!self.reduce_vars().is_empty()).then_some(f)
    }
}

impl Program {
    pub fn decl(&self, name: &str) -> Option<&TensorDecl> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn decl_mut(&mut self, name: &str) -> Option<&mut TensorDecl> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &TensorDecl> {
        self.tensors.iter().filter(|t| t.role == Role::Input)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &TensorDecl> {
        self.tensors.iter().filter(|t| t.role == Role::Output)
    }

    /// Every store in program order.
    pub fn blocks(&self) -> Vec<BlockRef<'_>> {
        fn walk<'a>(body: &'a [Stmt], path: &mut Path, loops: &mut Vec<&'a Loop>, out: &mut Vec<BlockRef<'a>>) {
            for (i, s) in body.iter().enumerate() {
                path.push(i);
                match s {
                    Stmt::Store(st) => out.push(BlockRef { path: path.clone(), store: st, loops: loops.clone() }),
                    Stmt::Loop(l) => {
                        loops.push(l);
                        walk(&l.body, path, loops, out);
                        loops.pop();
                    }
                }
                path.pop();
            }
        }
        let mut out = Vec::new();
        walk(&self.body, &mut Vec::new(), &mut Vec::new(), &mut out);
        out
    }

    pub fn block(&self, name: &str) -> Option<BlockRef<'_>> {
        self.blocks().into_iter().find(|b| b.store.name == name)
    }

    pub fn block_names(&self) -> Vec<String> {
        self.blocks().iter().map(|b| b.store.name.clone()).collect()
    }

    pub fn stmt(&self, path: &[usize]) -> &Stmt {
        let mut body = &self.body;
        for (k, &i) in path.iter().enumerate() {
            if k + 1 == path.len() {
                return &body[i];
            }
            match &body[i] {
                Stmt::Loop(l) => body = &l.body,
                Stmt::Store(_) => panic!("path descends into a store"),
            }
        }
        panic!("empty path")
    }

    pub fn stmt_mut(&mut self, path: &[usize]) -> &mut Stmt {
        let (last, prefix) = path.split_last().expect("empty path");
        &mut self.body_mut(prefix)[*last]
    }

    pub fn loop_at(&self, path: &[usize]) -> &Loop {
        match self.stmt(path) {
            Stmt::Loop(l) => l,
            Stmt::Store(_) => panic!("not a loop"),
        }
    }

    /// The statement list owned by the loop at `path` (or the program body for `[]`).
    pub fn body_mut(&mut self, path: &[usize]) -> &mut Vec<Stmt> {
        let mut body = &mut self.body;
        for &i in path {
            body = match &mut body[i] {
                Stmt::Loop(l) => &mut l.body,
                Stmt::Store(_) => panic!("path descends into a store"),
            };
        }
        body
    }

    pub fn body_at(&self, path: &[usize]) -> &Vec<Stmt> {
        if path.is_empty() {
            &self.body
        } else {
            &self.loop_at(path).body
        }
    }

    /// Path of the loop named `var` enclosing block `block`.
    pub fn loop_of_block(&self, block: &str, var: &str) -> Option<Path> {
        let b = self.block(block)?;
        let depth = b.loops.iter().position(|l| l.var == var)?;
        Some(b.path[..=depth].to_vec())
    }

    /// Removes the statement at `path`, then any loops left empty above it.
    pub fn remove_stmt(&mut self, path: &[usize]) -> Stmt {
        let (last, prefix) = path.split_last().expect("empty path");
        let removed = self.body_mut(prefix).remove(*last);
        let mut p = prefix.to_vec();
        while !p.is_empty() && self.body_at(&p).is_empty() {
            let (l, pre) = p.split_last().unwrap();
            let l = *l;
            let pre = pre.to_vec();
            self.body_mut(&pre).remove(l);
            p = pre;
        }
        removed
    }

    pub fn tensor_names(&self) -> BTreeSet<String> {
        self.tensors.iter().map(|t| t.name.clone()).collect()
    }

    pub fn loop_vars(&self) -> BTreeSet<String> {
        fn walk(body: &[Stmt], out: &mut BTreeSet<String>) {
            for s in body {
                if let Stmt::Loop(l) = s {
                    out.insert(l.var.clone());
                    walk(&l.body, out);
                }
            }
        }
        let mut out = BTreeSet::new();
        walk(&self.body, &mut out);
        out
    }

    pub fn fresh_tensor(&self, base: &str) -> String {
        fresh_name(base, |n| self.decl(n).is_some())
    }

    pub fn fresh_block(&self, base: &str) -> String {
        let names: BTreeSet<String> = self.block_names().into_iter().collect();
        fresh_name(base, |n| names.contains(n))
    }

    /// Stores writing `tensor`, in program order.
    pub fn writers(&self, tensor: &str) -> Vec<BlockRef<'_>> {
        self.blocks().into_iter().filter(|b| b.store.tensor == tensor).collect()
    }

    pub fn readers(&self, tensor: &str) -> Vec<BlockRef<'_>> {
        self.blocks().into_iter().filter(|b| b.store.value.reads_tensor(tensor)).collect()
    }

    /// Renames a tensor everywhere, including its declaration.
    pub fn rename_tensor(&mut self, from: &str, to: &str) {
        if let Some(d) = self.decl_mut(from) {
            d.name = to.to_string();
        }
        let mut map = BTreeMap::new();
        map.insert(from.to_string(), to.to_string());
        self.map_stores(&mut |s| {
            if s.tensor == from {
                s.tensor = to.to_string();
            }
            s.value = s.value.rename_tensors(&map);
        });
    }

    pub fn map_stores(&mut self, f: &mut impl FnMut(&mut Store)) {
        fn walk(body: &mut [Stmt], f: &mut impl FnMut(&mut Store)) {
            for s in body {
                match s {
                    Stmt::Store(st) => f(st),
                    Stmt::Loop(l) => walk(&mut l.body, f),
                }
            }
        }
        walk(&mut self.body, f);
    }

    pub fn store_mut(&mut self, name: &str) -> Option<&mut Store> {
        let path = self.block(name)?.path;
        match self.stmt_mut(&path) {
            Stmt::Store(s) => Some(s),
            Stmt::Loop(_) => None,
        }
    }

    /// Drops declarations of non-output tensors that nothing references.
    pub fn prune_tensors(&mut self) {
        let mut used = BTreeSet::new();
        for b in self.blocks() {
            used.insert(b.store.tensor.clone());
            used.extend(b.store.reads());
        }
        self.tensors.retain(|t| t.role != Role::Intermediate || used.contains(&t.name));
    }
}

pub fn fresh_name(base: &str, taken: impl Fn(&str) -> bool) -> String {
    if !taken(base) {
        return base.to_string();
    }
    (2..).map(|k| format!("{base}_{k}")).find(|n| !taken(n)).unwrap()
}

/// `X[idx] = X[idx] f value`.
pub fn accumulate(f: Reducer, tensor: &str, indices: Vec<Index>, value: ScalarExpr) -> ScalarExpr {
    ScalarExpr::bin(f.binop(), ScalarExpr::load(tensor, indices), value)
}

pub fn store(name: &str, tensor: &str, indices: Vec<Index>, value: ScalarExpr) -> Stmt {
    Stmt::Store(Store { name: name.to_string(), tensor: tensor.to_string(), indices, value })
}

/// Wraps `inner` in loops, outermost first.
pub fn nest(loops: &[(String, usize)], inner: Stmt) -> Stmt {
    loops.iter().rev().fold(inner, |acc, (v, n)| Stmt::Loop(Loop::new(v, *n, vec![acc])))
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_loop_ir(self))
    }
}

pub(crate) fn is_add_sugar(s: &Store) -> Option<&ScalarExpr> {
    match &s.value {
        ScalarExpr::Bin(BinOp::Add, a, b) if **a == ScalarExpr::Load(s.lhs_load()) => Some(b),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG2A: &str = "\
tensor inp: f32[2, 4] input
tensor xmax: f32[2]
tensor xexp: f32[2, 4]
tensor xsum: f32[2] output
for i, j in grid(2, 4):
    # s_max:
    xmax[i] = max(xmax[i], inp[i, j])
for i, j in grid(2, 4):
    # s_exp:
    xexp[i, j] = exp(inp[i, j] - xmax[i])
for i, j in grid(2, 4):
    # s_sum:
    xsum[i] += xexp[i, j]
";

    #[test]
    fn blocks_in_program_order() {
        let p = parse_program(FIG2A).unwrap();
        assert_eq!(p.block_names(), ["s_max", "s_exp", "s_sum"]);
        let b = p.block("s_sum").unwrap();
        assert_eq!(b.reduce_vars(), ["j"]);
        assert_eq!(b.structural_reducer(), Some(Reducer::Add));
        assert_eq!(p.block("s_exp").unwrap().structural_reducer(), None);
    }

    #[test]
    fn remove_prunes_empty_loops() {
        let mut p = parse_program(FIG2A).unwrap();
        let path = p.block("s_exp").unwrap().path;
        p.remove_stmt(&path);
        assert_eq!(p.body.len(), 2);
    }

    #[test]
    fn rename_tensor_everywhere() {
        let mut p = parse_program(FIG2A).unwrap();
        p.rename_tensor("xmax", "m");
        assert!(print_loop_ir(&p).contains("exp(inp[i, j] - m[i])"));
        assert!(p.decl("m").is_some());
    }
}
