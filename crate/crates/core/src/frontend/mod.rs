// SPDX-License-Identifier: Apache-2.0
//! Tensor-expression builder and its lowering to loop IR.
//!
//! A graph is a list of tensors, each either a placeholder or a compute
//! defined by a scalar expression over its axes (and, for reductions, over
//! declared reduce axes). Tensors can only refer to tensors defined before
//! them, so insertion order is a topological order.

mod builtins;
pub mod oracle;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::expr::{Index, Reducer, ScalarExpr};
use crate::loop_ir::{validate, DType, IrError, Loop, Program, Role, Stmt, Store, TensorDecl};

pub use oracle::reference;
pub use builtins::{builtin, builtin_names, AttnVariant, DECODE_SCRIPT, PREFILL_SCRIPT, SOFTMAX_SCRIPT};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrontendError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("`{var}` in `{tensor}` is neither an axis nor a declared reduce axis")]
    UnboundReduceAxis { tensor: String, var: String },
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("duplicate tensor `{0}`")]
    Duplicate(String),
    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReduceAxis {
    pub name: String,
    pub extent: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Placeholder,
    Compute { axes: Vec<String>, body: ScalarExpr },
    Reduce { axes: Vec<String>, reducer: Reducer, over: Vec<ReduceAxis>, body: ScalarExpr },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    /// Name of the loop nest the node lowers to.
    pub block: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub op: Op,
}

/// Handle to a tensor already in the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn at(&self, idx: &[Index]) -> ScalarExpr {
        ScalarExpr::load(&self.name, idx.to_vec())
    }

    pub fn at_vars(&self, vars: &[&str]) -> ScalarExpr {
        ScalarExpr::load_vars(&self.name, vars)
    }
}

pub fn reduce_axis(name: &str, extent: usize) -> ReduceAxis {
    ReduceAxis { name: name.into(), extent }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorExprGraph {
    pub nodes: Vec<Node>,
}

impl TensorExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    fn push(&mut self, node: Node) -> Result<Tensor, FrontendError> {
        if self.node(&node.name).is_some() {
            return Err(FrontendError::Duplicate(node.name));
        }
        let t = Tensor { name: node.name.clone(), shape: node.shape.clone() };
        self.nodes.push(node);
        Ok(t)
    }

    pub fn placeholder(&mut self, name: &str, shape: &[usize], dtype: DType) -> Result<Tensor, FrontendError> {
        if shape.contains(&0) {
            return Err(FrontendError::InvalidShape(format!("`{name}` has a zero dimension")));
        }
        self.push(Node { name: name.into(), block: String::new(), shape: shape.to_vec(), dtype, op: Op::Placeholder })
    }

    fn check(&self, name: &str, shape: &[usize], axes: &[&str], over: &[ReduceAxis], body: &ScalarExpr) -> Result<(), FrontendError> {
        if axes.len() != shape.len() {
            return Err(FrontendError::ShapeMismatch(format!(
                "`{name}` has {} dims but {} axes",
                shape.len(),
                axes.len()
            )));
        }
        let mut bound: BTreeSet<&str> = axes.iter().copied().collect();
        for r in over {
            if !bound.insert(&r.name) {
                return Err(FrontendError::ShapeMismatch(format!("axis `{}` of `{name}` is declared twice", r.name)));
            }
        }
        for l in body.loads() {
            let src = self.node(&l.tensor).ok_or_else(|| FrontendError::UnknownTensor(l.tensor.clone()))?;
            if src.shape.len() != l.indices.len() {
                return Err(FrontendError::ShapeMismatch(format!(
                    "`{}` has rank {} but `{name}` reads it with {} indices",
                    l.tensor,
                    src.shape.len(),
                    l.indices.len()
                )));
            }
        }
        let used = body.index_vars().into_iter().chain(body.free_vars());
        for v in used {
            if !bound.contains(v.as_str()) {
                return Err(FrontendError::UnboundReduceAxis { tensor: name.into(), var: v });
            }
        }
        Ok(())
    }

    /// Elementwise compute lowered to the nest `T_<name>`.
    pub fn compute(&mut self, name: &str, shape: &[usize], axes: &[&str], body: ScalarExpr) -> Result<Tensor, FrontendError> {
        self.compute_as(&format!("T_{name}"), name, shape, axes, body)
    }

    pub fn compute_as(
        &mut self,
        block: &str,
        name: &str,
        shape: &[usize],
        axes: &[&str],
        body: ScalarExpr,
    ) -> Result<Tensor, FrontendError> {
        self.check(name, shape, axes, &[], &body)?;
        let axes = axes.iter().map(|a| a.to_string()).collect();
        self.push(Node { name: name.into(), block: block.into(), shape: shape.to_vec(), dtype: DType::F32, op: Op::Compute { axes, body } })
    }

    /// Reduction over `over`, lowered to the nest `T_<name>`.
    pub fn reduce(
        &mut self,
        name: &str,
        shape: &[usize],
        axes: &[&str],
        reducer: Reducer,
        over: &[ReduceAxis],
        body: ScalarExpr,
    ) -> Result<Tensor, FrontendError> {
        self.reduce_as(&format!("T_{name}"), name, shape, axes, reducer, over, body)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn reduce_as(
        &mut self,
        block: &str,
        name: &str,
        shape: &[usize],
        axes: &[&str],
        reducer: Reducer,
        over: &[ReduceAxis],
        body: ScalarExpr,
    ) -> Result<Tensor, FrontendError> {
        self.check(name, shape, axes, over, &body)?;
        let op = Op::Reduce { axes: axes.iter().map(|a| a.to_string()).collect(), reducer, over: over.to_vec(), body };
        self.push(Node { name: name.into(), block: block.into(), shape: shape.to_vec(), dtype: DType::F32, op })
    }

    /// `out[b, n, i, j] = sum_k a[b, n, i, k] * w[b, n, k, j]`, or with
    /// `w[b, n, j, k]` when `trans_b`.
    pub fn batch_matmul(&mut self, block: &str, name: &str, a: &Tensor, w: &Tensor, trans_b: bool, axes: [&str; 5]) -> Result<Tensor, FrontendError> {
        let [b, n, i, j, k] = axes;
        if a.shape.len() != 4 || w.shape.len() != 4 {
            return Err(FrontendError::ShapeMismatch("batch_matmul takes rank-4 operands".into()));
        }
        let (rows, inner) = (a.shape[2], a.shape[3]);
        let (w_inner, cols) = if trans_b { (w.shape[3], w.shape[2]) } else { (w.shape[2], w.shape[3]) };
        if inner != w_inner || a.shape[..2] != w.shape[..2] {
            return Err(FrontendError::ShapeMismatch(format!("{:?} x {:?}", a.shape, w.shape)));
        }
        let wv = if trans_b { w.at_vars(&[b, n, j, k]) } else { w.at_vars(&[b, n, k, j]) };
        let body = ScalarExpr::bin(crate::expr::BinOp::Mul, a.at_vars(&[b, n, i, k]), wv);
        let shape = [a.shape[0], a.shape[1], rows, cols];
        self.reduce_as(block, name, &shape, &[b, n, i, j], Reducer::Add, &[reduce_axis(k, inner)], body)
    }

    /// One nest per compute node, in definition order. Placeholders become
    /// inputs and computes nobody reads become outputs.
    pub fn lower(&self) -> Result<Program, FrontendError> {
        let read: BTreeSet<String> = self
            .nodes
            .iter()
            .flat_map(|n| match &n.op {
                Op::Placeholder => vec![],
                Op::Compute { body, .. } | Op::Reduce { body, .. } => body.loads().into_iter().map(|l| l.tensor.clone()).collect(),
            })
            .collect();
        let mut p = Program::default();
        for n in &self.nodes {
            let role = match n.op {
                Op::Placeholder => Role::Input,
                _ if read.contains(&n.name) => Role::Intermediate,
                _ => Role::Output,
            };
            let mut d = TensorDecl::new(&n.name, &n.shape, role);
            d.dtype = n.dtype;
            p.tensors.push(d);
            let (axes, over, value) = match &n.op {
                Op::Placeholder => continue,
                Op::Compute { axes, body } => (axes, &[][..], body.clone()),
                Op::Reduce { axes, reducer, over, body } => {
                    let acc = ScalarExpr::load_vars(&n.name, &axes.iter().map(String::as_str).collect::<Vec<_>>());
                    (axes, &over[..], reducer.combine(acc, body.clone()))
                }
            };
            let indices = axes.iter().map(|a| Index::var(a)).collect();
            let mut stmt = Stmt::Store(Store { name: n.block.clone(), tensor: n.name.clone(), indices, value });
            let loops = axes.iter().zip(&n.shape).map(|(a, e)| (a.clone(), *e)).chain(over.iter().map(|r| (r.name.clone(), r.extent)));
            for (v, e) in loops.collect::<Vec<_>>().into_iter().rev() {
                stmt = Stmt::Loop(Loop::new(&v, e, vec![stmt]));
            }
            p.body.push(stmt);
        }
        validate(&p)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    #[test]
    fn placeholder_only_graph_has_empty_body() {
        let mut g = TensorExprGraph::new();
        g.placeholder("a", &[3], DType::F32).unwrap();
        let p = g.lower().unwrap();
        assert!(p.body.is_empty());
        assert_eq!(p.tensors.len(), 1);
    }

    #[test]
    fn unbound_axis_is_reported() {
        let mut g = TensorExprGraph::new();
        let a = g.placeholder("a", &[3, 4], DType::F32).unwrap();
        let e = g.compute("b", &[3], &["i"], a.at_vars(&["i", "j"])).unwrap_err();
        assert_eq!(e, FrontendError::UnboundReduceAxis { tensor: "b".into(), var: "j".into() });
    }

    #[test]
    fn rank_and_axis_mismatches() {
        let mut g = TensorExprGraph::new();
        let a = g.placeholder("a", &[3, 4], DType::F32).unwrap();
        assert!(matches!(g.compute("b", &[3], &["i"], a.at_vars(&["i"])), Err(FrontendError::ShapeMismatch(_))));
        assert!(matches!(g.compute("c", &[3, 4], &["i"], parse_expr("1").unwrap()), Err(FrontendError::ShapeMismatch(_))));
        assert!(matches!(g.compute("d", &[3], &["i"], parse_expr("zz[i]").unwrap()), Err(FrontendError::UnknownTensor(_))));
    }

    #[test]
    fn out_of_range_reads_fail_to_lower() {
        let mut g = TensorExprGraph::new();
        let a = g.placeholder("a", &[3], DType::F32).unwrap();
        g.compute("b", &[4], &["i"], a.at_vars(&["i"])).unwrap();
        assert!(matches!(g.lower(), Err(FrontendError::Ir(IrError::OutOfBounds { .. }))));
    }
}
