// SPDX-License-Identifier: Apache-2.0
//! Producer/consumer relations between blocks.
//!
//! Nodes are stores rather than whole top-level nests so the graph stays
//! meaningful after fusion puts several blocks under one loop. An edge runs
//! from P to Q when P writes a tensor that Q reads and P comes first in
//! program order; a loop-carried read such as the previous-value buffer of a
//! rolling update therefore adds no back edge.

use std::collections::{BTreeMap, BTreeSet};

use super::{BlockRef, IrError, Program, Role};

#[derive(Debug, Clone, PartialEq)]
pub struct DataflowGraph {
    pub nodes: Vec<String>,
    pub writes: Vec<String>,
    pub reads: Vec<BTreeSet<String>>,
    pub edges: BTreeSet<(usize, usize)>,
}

impl DataflowGraph {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == name)
    }

    pub fn producers(&self, q: usize) -> Vec<usize> {
        self.edges.iter().filter(|(_, b)| *b == q).map(|(a, _)| *a).collect()
    }

    pub fn consumers(&self, p: usize) -> Vec<usize> {
        self.edges.iter().filter(|(a, _)| *a == p).map(|(_, b)| *b).collect()
    }

    pub fn edge_names(&self) -> Vec<(String, String)> {
        self.edges.iter().map(|(a, b)| (self.nodes[*a].clone(), self.nodes[*b].clone())).collect()
    }
}

pub fn build_dataflow(p: &Program) -> Result<DataflowGraph, IrError> {
    let blocks = p.blocks();
    let nodes: Vec<String> = blocks.iter().map(|b| b.store.name.clone()).collect();
    let writes: Vec<String> = blocks.iter().map(|b| b.store.tensor.clone()).collect();
    let reads: Vec<BTreeSet<String>> = blocks.iter().map(|b| b.store.reads()).collect();
    let mut edges = BTreeSet::new();
    for (q, rq) in reads.iter().enumerate() {
        for (a, w) in writes.iter().enumerate().take(q) {
            if rq.contains(w) {
                edges.insert((a, q));
            }
        }
    }
    // A top-level nest reading a tensor that only later nests produce would
    // make the nest-level graph cyclic.
    for (q, b) in blocks.iter().enumerate() {
        for t in &reads[q] {
            if p.decl(t).map(|d| d.role == Role::Input).unwrap_or(false) {
                continue;
            }
            let earlier = writes[..q].iter().any(|w| w == t) || writes[q] == *t;
            let later_elsewhere =
                blocks.iter().enumerate().skip(q + 1).any(|(a, o)| writes[a] == *t && o.path[0] != b.path[0]);
            if !earlier && later_elsewhere {
                return Err(IrError::CyclicDataflow { reader: b.store.name.clone(), tensor: t.clone() });
            }
        }
    }
    Ok(DataflowGraph { nodes, writes, reads, edges })
}

/// Result of walking back from a target through map blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReducePredecessors {
    /// Reduce blocks, in program order.
    pub reduce: Vec<String>,
    /// Map blocks lying on some path from a reduce predecessor to the target.
    pub on_path: Vec<String>,
}

/// Whether `consumer` reads `tensor` with some of its loop variables missing
/// from the index, i.e. reads one value across a whole loop.
fn broadcast_read(consumer: &BlockRef<'_>, tensor: &str) -> bool {
    let vars = consumer.loop_vars();
    consumer
        .store
        .value
        .loads()
        .iter()
        .filter(|l| l.tensor == tensor)
        .any(|l| vars.iter().any(|v| !l.indices.iter().any(|ix| ix.mentions(v))))
}

/// Reduce blocks reachable backwards from `target` through map blocks only.
///
/// A reduce block counts when its result is broadcast into the path (the
/// softmax maximum read across a row). A reduce block whose result is read
/// elementwise, like a matmul feeding a scaling step, acts as a constant
/// input and stops the walk.
pub fn reduce_predecessors(
    p: &Program,
    g: &DataflowGraph,
    target: &str,
    is_reduce: impl Fn(&BlockRef<'_>) -> bool,
) -> ReducePredecessors {
    let blocks = p.blocks();
    let Some(t) = g.index(target) else { return ReducePredecessors::default() };
    let mut reduce: BTreeSet<usize> = BTreeSet::new();
    let mut reaches: BTreeMap<usize, bool> = BTreeMap::new();

    fn walk(
        c: usize,
        blocks: &[BlockRef<'_>],
        g: &DataflowGraph,
        is_reduce: &dyn Fn(&BlockRef<'_>) -> bool,
        reduce: &mut BTreeSet<usize>,
        reaches: &mut BTreeMap<usize, bool>,
    ) -> bool {
        let mut any = false;
        for pr in g.producers(c) {
            if is_reduce(&blocks[pr]) {
                if broadcast_read(&blocks[c], &g.writes[pr]) {
                    reduce.insert(pr);
                    any = true;
                }
            } else {
                let r = match reaches.get(&pr) {
                    Some(r) => *r,
                    None => {
                        reaches.insert(pr, false);
                        let r = walk(pr, blocks, g, is_reduce, reduce, reaches);
                        reaches.insert(pr, r);
                        r
                    }
                };
                any |= r;
            }
        }
        any
    }
    walk(t, &blocks, g, &is_reduce, &mut reduce, &mut reaches);
    ReducePredecessors {
        reduce: reduce.iter().map(|i| g.nodes[*i].clone()).collect(),
        on_path: reaches.iter().filter(|(_, r)| **r).map(|(i, _)| g.nodes[*i].clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loop_ir::parse_program;

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

    fn structural(b: &BlockRef<'_>) -> bool {
        b.structural_reducer().is_some()
    }

    #[test]
    fn softmax_chain_edges() {
        let p = parse_program(FIG2A).unwrap();
        let g = build_dataflow(&p).unwrap();
        let e = g.edge_names();
        assert_eq!(
            e,
            vec![("s_max".into(), "s_exp".into()), ("s_exp".into(), "s_sum".into())]
        );
    }

    #[test]
    fn single_nest_has_no_edges() {
        let p = parse_program("tensor a: f32[2] input\ntensor b: f32[2] output\nfor i in range(2):\n    b[i] = a[i]\n").unwrap();
        assert!(build_dataflow(&p).unwrap().edges.is_empty());
    }

    #[test]
    fn sum_depends_on_max_through_exp() {
        let p = parse_program(FIG2A).unwrap();
        let g = build_dataflow(&p).unwrap();
        let r = reduce_predecessors(&p, &g, "s_sum", structural);
        assert_eq!(r.reduce, ["s_max"]);
        assert_eq!(r.on_path, ["s_exp"]);
    }

    #[test]
    fn input_only_target_has_no_predecessors() {
        let p = parse_program(FIG2A).unwrap();
        let g = build_dataflow(&p).unwrap();
        assert_eq!(reduce_predecessors(&p, &g, "s_max", structural), ReducePredecessors::default());
    }

    #[test]
    fn use_before_definition_is_cyclic() {
        let src = "\
tensor a: f32[2] input
tensor b: f32[2]
tensor c: f32[2] output
for i in range(2):
    c[i] = b[i]
for i in range(2):
    b[i] = a[i]
";
        let p = parse_program(src).unwrap();
        assert!(matches!(build_dataflow(&p), Err(IrError::CyclicDataflow { .. })));
    }
}
