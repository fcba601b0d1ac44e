// SPDX-License-Identifier: Apache-2.0
//! Tile IR and the loop-to-tile translator.
//!
//! A tile value keeps the full rank of the tensor it was read from: a point
//! index contributes an axis of size 1, a slice an axis of its length, and
//! `None` inserts a fresh axis of size 1. Elementwise operators broadcast
//! numpy-style (shapes aligned on the right), `reduce` removes one axis, and
//! `permute` reorders axes. A store writes its slice dimensions (points
//! dropped) in row-major order, broadcasting the value onto them.

mod interp;
mod parse;
mod print;
mod relax;
mod translate;

use thiserror::Error;

use crate::expr::{BinOp, CmpOp, Index, Reducer, UnOp};
use crate::loop_ir::{IrError, Program, Stmt, TensorDecl};

pub use interp::interpret_tile;
pub use parse::parse_tile;
pub use print::{print_pseudo_python, print_tile};
pub use relax::{partition_ast, relax_access, Partition, Shrink};
pub use translate::{tensorize, tensorize_report, translate, translate_report, Rejection};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TileError {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("`{tensor}{index:?}` is out of bounds")]
    OutOfBounds { tensor: String, index: Vec<i64> },
    #[error("`{block}` reads `{tensor}{index:?}` before it is written")]
    UninitializedRead { block: String, tensor: String, index: Vec<usize> },
    #[error("missing input `{0}`")]
    MissingInput(String),
    #[error("`{block}`: {msg}")]
    Domain { block: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TileIdx {
    Point(Index),
    /// `len` elements starting at `lo`, `step` apart (`step != 0`).
    Slice { lo: Index, len: usize, step: i64 },
    None,
}

impl TileIdx {
    pub fn extent(&self) -> usize {
        match self {
            TileIdx::Slice { len, .. } => *len,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileAccess {
    pub tensor: String,
    pub idx: Vec<TileIdx>,
}

impl TileAccess {
    pub fn shape(&self) -> Vec<usize> {
        self.idx.iter().map(TileIdx::extent).collect()
    }

    pub fn is_points(&self) -> bool {
        self.idx.iter().all(|ix| matches!(ix, TileIdx::Point(_)))
    }

    /// Tensor coordinates touched, in row-major tile order; `None` axes
    /// contribute no coordinate.
    pub fn elements(&self, env: &impl Fn(&str) -> Option<i64>) -> Option<Vec<Vec<i64>>> {
        let mut out = vec![Vec::new()];
        for ix in &self.idx {
            let vals: Vec<i64> = match ix {
                TileIdx::Point(p) => vec![p.eval(env)?],
                TileIdx::Slice { lo, len, step } => {
                    let lo = lo.eval(env)?;
                    (0..*len as i64).map(|k| lo + k * step).collect()
                }
                TileIdx::None => continue,
            };
            out = out
                .into_iter()
                .flat_map(|pre| {
                    vals.iter().map(move |v| {
                        let mut c = pre.clone();
                        c.push(*v);
                        c
                    })
                })
                .collect();
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TileExpr {
    Lit(f64),
    Var(String),
    Access(TileAccess),
    Bin(BinOp, Box<TileExpr>, Box<TileExpr>),
    Un(UnOp, Box<TileExpr>),
    Select(Vec<(CmpOp, TileExpr, TileExpr)>, Box<TileExpr>, Box<TileExpr>),
    Reduce { op: Reducer, dim: usize, arg: Box<TileExpr> },
    Permute { order: Vec<usize>, arg: Box<TileExpr> },
}

pub(crate) fn broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let at = |s: &[usize], k: usize| if k + s.len() >= n { s[k + s.len() - n] } else { 1 };
    (0..n)
        .map(|k| match (at(a, k), at(b, k)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

impl TileExpr {
    pub fn bin(op: BinOp, a: TileExpr, b: TileExpr) -> Self {
        TileExpr::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn shape(&self) -> Result<Vec<usize>, TileError> {
        let bc = |a: Vec<usize>, b: Vec<usize>| {
            broadcast(&a, &b).ok_or_else(|| TileError::Shape(format!("{a:?} and {b:?} do not broadcast")))
        };
        match self {
            TileExpr::Lit(_) | TileExpr::Var(_) => Ok(Vec::new()),
            TileExpr::Access(a) => Ok(a.shape()),
            TileExpr::Bin(_, a, b) => bc(a.shape()?, b.shape()?),
            TileExpr::Un(_, a) => a.shape(),
            TileExpr::Select(c, a, b) => {
                let mut s = bc(a.shape()?, b.shape()?)?;
                for (_, l, r) in c {
                    s = bc(s, bc(l.shape()?, r.shape()?)?)?;
                }
                Ok(s)
            }
            TileExpr::Reduce { dim, arg, .. } => {
                let mut s = arg.shape()?;
                if *dim >= s.len() {
                    return Err(TileError::Shape(format!("reduce dim {dim} of a rank-{} tile", s.len())));
                }
                s.remove(*dim);
                Ok(s)
            }
            TileExpr::Permute { order, arg } => {
                let s = arg.shape()?;
                let mut seen = order.clone();
                seen.sort_unstable();
                if seen != (0..s.len()).collect::<Vec<_>>() {
                    return Err(TileError::Shape(format!("order {order:?} does not permute rank {}", s.len())));
                }
                Ok(order.iter().map(|&k| s[k]).collect())
            }
        }
    }

    pub fn accesses(&self) -> Vec<&TileAccess> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let TileExpr::Access(a) = e {
                out.push(a);
            }
        });
        out
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a TileExpr)) {
        f(self);
        match self {
            TileExpr::Lit(_) | TileExpr::Var(_) | TileExpr::Access(_) => {}
            TileExpr::Bin(_, a, b) => {
                a.visit(f);
                b.visit(f);
            }
            TileExpr::Un(_, a) | TileExpr::Reduce { arg: a, .. } | TileExpr::Permute { arg: a, .. } => a.visit(f),
            TileExpr::Select(c, a, b) => {
                for (_, l, r) in c {
                    l.visit(f);
                    r.visit(f);
                }
                a.visit(f);
                b.visit(f);
            }
        }
    }

    /// Scalar statement lifted but not yet tensorized: point accesses and
    /// scalar operators only.
    pub fn is_scalar(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |e| match e {
            TileExpr::Access(a) if !a.is_points() => ok = false,
            TileExpr::Reduce { .. } | TileExpr::Permute { .. } => ok = false,
            _ => {}
        });
        ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileStore {
    pub name: String,
    pub lhs: TileAccess,
    pub value: TileExpr,
}

impl TileStore {
    /// Reducer `f` when the store is `X = X f ..`-shaped or `X = reduce(f, ..)`.
    pub fn accumulating_reducer(&self) -> Option<Reducer> {
        match &self.value {
            TileExpr::Reduce { op, .. } => Some(*op),
            TileExpr::Bin(op, _, _) => {
                let f = Reducer::from_binop(*op)?;
                self.value.accesses().iter().any(|a| **a == self.lhs).then_some(f)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileLoop {
    pub var: String,
    pub extent: usize,
    pub annotation: Option<String>,
    pub body: Vec<TileStmt>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TileStmt {
    Loop(TileLoop),
    Store(TileStore),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TileProgram {
    pub tensors: Vec<TensorDecl>,
    pub body: Vec<TileStmt>,
}

impl TileProgram {
    pub fn stores(&self) -> Vec<&TileStore> {
        fn walk<'a>(body: &'a [TileStmt], out: &mut Vec<&'a TileStore>) {
            for s in body {
                match s {
                    TileStmt::Loop(l) => walk(&l.body, out),
                    TileStmt::Store(st) => out.push(st),
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.body, &mut out);
        out
    }

    pub fn store(&self, name: &str) -> Option<&TileStore> {
        self.stores().into_iter().find(|s| s.name == name)
    }
}

fn point_access(tensor: &str, indices: &[Index]) -> TileAccess {
    TileAccess { tensor: tensor.into(), idx: indices.iter().cloned().map(TileIdx::Point).collect() }
}

pub(crate) fn lift_expr(e: &crate::expr::ScalarExpr) -> TileExpr {
    use crate::expr::ScalarExpr as S;
    match e {
        S::Lit(v) => TileExpr::Lit(*v),
        S::Var(v) => TileExpr::Var(v.clone()),
        S::Load(l) => TileExpr::Access(point_access(&l.tensor, &l.indices)),
        S::Bin(op, a, b) => TileExpr::bin(*op, lift_expr(a), lift_expr(b)),
        S::Un(op, a) => TileExpr::Un(*op, Box::new(lift_expr(a))),
        S::Select(c, a, b) => TileExpr::Select(
            c.clauses.iter().map(|(op, l, r)| (*op, lift_expr(l), lift_expr(r))).collect(),
            Box::new(lift_expr(a)),
            Box::new(lift_expr(b)),
        ),
    }
}

/// The loop program with every access as a point: a tile program that has
/// not been tensorized at all.
pub fn lift(p: &Program) -> TileProgram {
    fn stmt(s: &Stmt) -> TileStmt {
        match s {
            Stmt::Loop(l) => TileStmt::Loop(TileLoop {
                var: l.var.clone(),
                extent: l.extent,
                annotation: l.annotation.clone(),
                body: l.body.iter().map(stmt).collect(),
            }),
            Stmt::Store(st) => TileStmt::Store(TileStore {
                name: st.name.clone(),
                lhs: point_access(&st.tensor, &st.indices),
                value: lift_expr(&st.value),
            }),
        }
    }
    TileProgram { tensors: p.tensors.clone(), body: p.body.iter().map(stmt).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_aligns_on_the_right() {
        assert_eq!(broadcast(&[1, 2], &[1]), Some(vec![1, 2]));
        assert_eq!(broadcast(&[4, 1], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast(&[], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast(&[2], &[3]), None);
    }

    #[test]
    fn shapes_of_reduce_and_permute() {
        let a = TileExpr::Access(TileAccess {
            tensor: "x".into(),
            idx: vec![
                TileIdx::Point(Index::var("i")),
                TileIdx::Slice { lo: Index::constant(0), len: 3, step: 1 },
                TileIdx::None,
            ],
        });
        assert_eq!(a.shape().unwrap(), [1, 3, 1]);
        let p = TileExpr::Permute { order: vec![1, 0, 2], arg: Box::new(a.clone()) };
        assert_eq!(p.shape().unwrap(), [3, 1, 1]);
        let r = TileExpr::Reduce { op: Reducer::Add, dim: 1, arg: Box::new(a.clone()) };
        assert_eq!(r.shape().unwrap(), [1, 1]);
        assert!(TileExpr::Permute { order: vec![0, 0, 1], arg: Box::new(a) }.shape().is_err());
    }

    #[test]
    fn strided_elements() {
        let a = TileAccess {
            tensor: "x".into(),
            idx: vec![TileIdx::Point(Index::var("i")), TileIdx::Slice { lo: Index::constant(5), len: 3, step: -2 }],
        };
        let env = |v: &str| (v == "i").then_some(1);
        assert_eq!(a.elements(&env).unwrap(), [vec![1, 5], vec![1, 3], vec![1, 1]]);
    }
}
