// SPDX-License-Identifier: Apache-2.0
//! Lowering of a validated program to slot-indexed form so execution does
//! no name lookups. Bounds were proven by validation, so every access is a
//! single linear form over loop slots.

use std::collections::BTreeMap;

use crate::expr::{eval_binop, eval_unop, BinOp, CmpOp, Index, ScalarExpr, UnOp};
use crate::loop_ir::{Program, Stmt};

use super::{InterpError, TraceEntry};

#[derive(Debug, Clone)]
pub(crate) struct Access {
    slot: usize,
    terms: Vec<(usize, i64)>,
    constant: i64,
}

impl Access {
    #[inline]
    fn offset(&self, vars: &[i64]) -> usize {
        let mut o = self.constant;
        for (v, c) in &self.terms {
            o += vars[*v] * c;
        }
        o as usize
    }
}

#[derive(Debug, Clone)]
enum CExpr {
    Lit(f64),
    Var(usize),
    Load(Access),
    Bin(BinOp, Box<CExpr>, Box<CExpr>),
    Un(UnOp, Box<CExpr>),
    Select(Vec<(CmpOp, CExpr, CExpr)>, Box<CExpr>, Box<CExpr>),
}

#[derive(Debug, Clone)]
enum Op {
    Loop { var: usize, extent: usize, body: Vec<Op> },
    Store { block: usize, dst: Access, value: CExpr, enclosing: Vec<usize> },
    Fill { slot: usize, value: f64 },
}

/// Executable form of a program plus the slot tables it refers to.
#[derive(Debug, Clone)]
pub(crate) struct Plan {
    ops: Vec<Op>,
    pub(crate) tensors: Vec<String>,
    pub(crate) shapes: Vec<Vec<usize>>,
    blocks: Vec<String>,
    loop_names: Vec<String>,
}

/// Reducer identity for tensors that are only ever accumulated into, placed
/// before the first top-level statement touching them. A tensor with any
/// plain store is assumed to be initialized explicitly.
fn auto_inits(p: &Program) -> BTreeMap<usize, Vec<(String, f64)>> {
    let mut first: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut plain = std::collections::BTreeSet::new();
    for b in p.blocks() {
        match b.store.accumulating_reducer() {
            Some(f) => {
                first.entry(b.store.tensor.clone()).or_insert((b.path[0], f.identity()));
            }
            None => {
                plain.insert(b.store.tensor.clone());
            }
        }
    }
    let mut out: BTreeMap<usize, Vec<(String, f64)>> = BTreeMap::new();
    for (t, (at, v)) in first {
        if !plain.contains(&t) {
            out.entry(at).or_default().push((t, v));
        }
    }
    out
}

struct Compiler {
    slots: BTreeMap<String, usize>,
    strides: Vec<Vec<i64>>,
    scope: Vec<(String, usize)>,
    loop_names: Vec<String>,
    blocks: Vec<String>,
}

impl Compiler {
    fn var(&self, name: &str) -> usize {
        self.scope.iter().rev().find(|(n, _)| n == name).map(|(_, s)| *s).expect("validated")
    }

    fn access(&self, tensor: &str, indices: &[Index]) -> Access {
        let slot = self.slots[tensor];
        let mut terms: BTreeMap<usize, i64> = BTreeMap::new();
        let mut constant = 0;
        for (ix, stride) in indices.iter().zip(&self.strides[slot]) {
            constant += ix.constant * stride;
            for (v, c) in &ix.terms {
                *terms.entry(self.var(v)).or_default() += c * stride;
            }
        }
        Access { slot, terms: terms.into_iter().filter(|(_, c)| *c != 0).collect(), constant }
    }

    fn expr(&self, e: &ScalarExpr) -> CExpr {
        match e {
            ScalarExpr::Lit(v) => CExpr::Lit(*v),
            ScalarExpr::Var(v) => CExpr::Var(self.var(v)),
            ScalarExpr::Load(l) => CExpr::Load(self.access(&l.tensor, &l.indices)),
            ScalarExpr::Bin(op, a, b) => CExpr::Bin(*op, Box::new(self.expr(a)), Box::new(self.expr(b))),
            ScalarExpr::Un(op, a) => CExpr::Un(*op, Box::new(self.expr(a))),
            ScalarExpr::Select(c, a, b) => CExpr::Select(
                c.clauses.iter().map(|(op, l, r)| (*op, self.expr(l), self.expr(r))).collect(),
                Box::new(self.expr(a)),
                Box::new(self.expr(b)),
            ),
        }
    }

    fn body(&mut self, body: &[Stmt]) -> Vec<Op> {
        body.iter()
            .map(|s| match s {
                Stmt::Loop(l) => {
                    let var = self.loop_names.len();
                    self.loop_names.push(l.var.clone());
                    self.scope.push((l.var.clone(), var));
                    let inner = self.body(&l.body);
                    self.scope.pop();
                    Op::Loop { var, extent: l.extent, body: inner }
                }
                Stmt::Store(st) => {
                    let block = self.blocks.len();
                    self.blocks.push(st.name.clone());
                    Op::Store {
                        block,
                        dst: self.access(&st.tensor, &st.indices),
                        value: self.expr(&st.value),
                        enclosing: self.scope.iter().map(|(_, s)| *s).collect(),
                    }
                }
            })
            .collect()
    }
}

pub(crate) fn compile(p: &Program) -> Plan {
    let tensors: Vec<String> = p.tensors.iter().map(|t| t.name.clone()).collect();
    let shapes: Vec<Vec<usize>> = p.tensors.iter().map(|t| t.shape.clone()).collect();
    let strides = shapes
        .iter()
        .map(|s| {
            let mut st = vec![1i64; s.len()];
            for d in (0..s.len().saturating_sub(1)).rev() {
                st[d] = st[d + 1] * s[d + 1] as i64;
            }
            st
        })
        .collect();
    let mut c = Compiler {
        slots: tensors.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect(),
        strides,
        scope: Vec::new(),
        loop_names: Vec::new(),
        blocks: Vec::new(),
    };
    let inits = auto_inits(p);
    let mut ops = Vec::new();
    for (k, s) in p.body.iter().enumerate() {
        for (t, v) in inits.get(&k).into_iter().flatten() {
            ops.push(Op::Fill { slot: c.slots[t], value: *v });
        }
        ops.extend(c.body(std::slice::from_ref(s)));
    }
    Plan { ops, tensors, shapes, blocks: c.blocks, loop_names: c.loop_names }
}

/// Mutable execution state: one buffer and one written-flag vector per slot.
pub(crate) struct Machine<'p> {
    plan: &'p Plan,
    pub(crate) data: Vec<Vec<f64>>,
    written: Vec<Vec<bool>>,
    vars: Vec<i64>,
    pub(crate) trace: Option<Vec<TraceEntry>>,
}

impl<'p> Machine<'p> {
    pub(crate) fn new(plan: &'p Plan, inputs: Vec<Option<Vec<f64>>>, trace: bool) -> Self {
        let mut data = Vec::new();
        let mut written = Vec::new();
        for (shape, inp) in plan.shapes.iter().zip(inputs) {
            let n: usize = shape.iter().product();
            match inp {
                Some(v) => {
                    data.push(v);
                    written.push(vec![true; n]);
                }
                None => {
                    data.push(vec![0.0; n]);
                    written.push(vec![false; n]);
                }
            }
        }
        Machine { plan, data, written, vars: vec![0; plan.loop_names.len()], trace: trace.then(Vec::new) }
    }

    pub(crate) fn run(&mut self) -> Result<(), InterpError> {
        let plan = self.plan;
        self.ops(&plan.ops)
    }

    fn ops(&mut self, ops: &'p [Op]) -> Result<(), InterpError> {
        for op in ops {
            match op {
                Op::Loop { var, extent, body } => {
                    for k in 0..*extent {
                        self.vars[*var] = k as i64;
                        self.ops(body)?;
                    }
                }
                Op::Fill { slot, value } => {
                    self.data[*slot].fill(*value);
                    self.written[*slot].fill(true);
                }
                Op::Store { block, dst, value, enclosing } => {
                    let v = self.eval(value).map_err(|e| e.at(&self.plan.blocks[*block]))?;
                    let o = dst.offset(&self.vars);
                    self.data[dst.slot][o] = v;
                    self.written[dst.slot][o] = true;
                    if let Some(t) = &mut self.trace {
                        t.push(TraceEntry {
                            block: self.plan.blocks[*block].clone(),
                            tensor: self.plan.tensors[dst.slot].clone(),
                            index: unflatten(o, &self.plan.shapes[dst.slot]),
                            iteration: enclosing.iter().map(|s| self.vars[*s] as usize).collect(),
                            value: v,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn eval(&self, e: &CExpr) -> Result<f64, Fault<'p>> {
        Ok(match e {
            CExpr::Lit(v) => *v,
            CExpr::Var(s) => self.vars[*s] as f64,
            CExpr::Load(a) => {
                let o = a.offset(&self.vars);
                if !self.written[a.slot][o] {
                    return Err(Fault::Uninit { slot: a.slot, offset: o, plan: self.plan });
                }
                self.data[a.slot][o]
            }
            CExpr::Bin(op, a, b) => eval_binop(*op, self.eval(a)?, self.eval(b)?),
            CExpr::Un(op, a) => eval_unop(*op, self.eval(a)?).map_err(|e| Fault::Domain(e.to_string()))?,
            CExpr::Select(clauses, a, b) => {
                for (op, l, r) in clauses {
                    if !op.holds(self.eval(l)?, self.eval(r)?) {
                        return self.eval(b);
                    }
                }
                self.eval(a)?
            }
        })
    }
}

enum Fault<'p> {
    Uninit { slot: usize, offset: usize, plan: &'p Plan },
    Domain(String),
}

impl Fault<'_> {
    fn at(self, block: &str) -> InterpError {
        match self {
            Fault::Uninit { slot, offset, plan } => InterpError::UninitializedRead {
                block: block.to_string(),
                tensor: plan.tensors[slot].clone(),
                index: unflatten(offset, &plan.shapes[slot]),
            },
            Fault::Domain(msg) => InterpError::DomainError { block: block.to_string(), msg },
        }
    }
}

pub(crate) fn unflatten(mut o: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = o % shape[d];
        o /= shape[d];
    }
    idx
}
