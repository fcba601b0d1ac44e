// SPDX-License-Identifier: Apache-2.0
//! Dense evaluation of tile programs. Outer loops run sequentially; each
//! tile store evaluates its whole value before writing.

use std::collections::{BTreeMap, BTreeSet};

use crate::expr::{eval_binop, eval_unop};
use crate::interpreter::{TensorValue, Tensors};
use crate::loop_ir::Role;

use super::{broadcast, TileAccess, TileError, TileExpr, TileIdx, TileProgram, TileStmt, TileStore};

#[derive(Debug, Clone)]
struct Tile {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

fn unflatten(mut o: usize, shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    for k in (0..shape.len()).rev() {
        out[k] = o % shape[k];
        o /= shape[k];
    }
    out
}

/// Offset into a tile of `shape` for an index into the broadcast shape
/// `out` (both right-aligned).
fn broadcast_offset(idx: &[usize], shape: &[usize], st: &[usize]) -> usize {
    let lead = idx.len() - shape.len();
    shape.iter().enumerate().map(|(k, &n)| if n == 1 { 0 } else { idx[lead + k] * st[k] }).sum()
}

struct Buffer {
    shape: Vec<usize>,
    data: Vec<f64>,
    written: Vec<bool>,
}

struct Machine<'p> {
    p: &'p TileProgram,
    bufs: BTreeMap<String, Buffer>,
    env: Vec<(String, i64)>,
    block: String,
}

impl Machine<'_> {
    fn var(&self, v: &str) -> Option<i64> {
        self.env.iter().rev().find(|(n, _)| n == v).map(|(_, x)| *x)
    }

    fn offsets(&self, a: &TileAccess) -> Result<Vec<usize>, TileError> {
        let buf = self.bufs.get(&a.tensor).ok_or_else(|| crate::loop_ir::IrError::UnknownTensor(a.tensor.clone()))?;
        let dims = a.idx.iter().filter(|i| !matches!(i, TileIdx::None)).count();
        if dims != buf.shape.len() {
            return Err(TileError::Shape(format!("`{a}` indexes a rank-{} tensor", buf.shape.len())));
        }
        let env = |v: &str| self.var(v);
        let elems = a.elements(&env).ok_or_else(|| TileError::Shape(format!("`{a}` uses an unbound variable")))?;
        let st = strides(&buf.shape);
        elems
            .into_iter()
            .map(|c| {
                if c.iter().zip(&buf.shape).any(|(&x, &n)| x < 0 || x >= n as i64) {
                    return Err(TileError::OutOfBounds { tensor: a.tensor.clone(), index: c });
                }
                Ok(c.iter().zip(&st).map(|(&x, &s)| x as usize * s).sum())
            })
            .collect()
    }

    fn elementwise(&self, parts: &[Tile], f: impl Fn(&[f64]) -> Result<f64, TileError>) -> Result<Tile, TileError> {
        let mut shape = Vec::new();
        for t in parts {
            shape = broadcast(&shape, &t.shape)
                .ok_or_else(|| TileError::Shape(format!("{:?} and {:?} do not broadcast", shape, t.shape)))?;
        }
        let n: usize = shape.iter().product();
        let sts: Vec<Vec<usize>> = parts.iter().map(|t| strides(&t.shape)).collect();
        let mut args = vec![0.0; parts.len()];
        let mut data = Vec::with_capacity(n);
        for o in 0..n {
            let idx = unflatten(o, &shape);
            for (k, t) in parts.iter().enumerate() {
                args[k] = t.data[broadcast_offset(&idx, &t.shape, &sts[k])];
            }
            data.push(f(&args)?);
        }
        Ok(Tile { shape, data })
    }

    fn eval(&self, e: &TileExpr) -> Result<Tile, TileError> {
        let domain = |e: crate::expr::EvalError| TileError::Domain { block: self.block.clone(), msg: e.to_string() };
        match e {
            TileExpr::Lit(v) => Ok(Tile { shape: vec![], data: vec![*v] }),
            TileExpr::Var(v) => {
                let x = self.var(v).ok_or_else(|| crate::loop_ir::IrError::UnboundVariable(v.clone()))?;
                Ok(Tile { shape: vec![], data: vec![x as f64] })
            }
            TileExpr::Access(a) => {
                let buf = &self.bufs[&a.tensor];
                let data = self
                    .offsets(a)?
                    .into_iter()
                    .map(|o| {
                        if !buf.written[o] {
                            return Err(TileError::UninitializedRead {
                                block: self.block.clone(),
                                tensor: a.tensor.clone(),
                                index: unflatten(o, &buf.shape),
                            });
                        }
                        Ok(buf.data[o])
                    })
                    .collect::<Result<_, _>>()?;
                Ok(Tile { shape: a.shape(), data })
            }
            TileExpr::Bin(op, a, b) => self.elementwise(&[self.eval(a)?, self.eval(b)?], |x| Ok(eval_binop(*op, x[0], x[1]))),
            TileExpr::Un(op, a) => self.elementwise(&[self.eval(a)?], |x| eval_unop(*op, x[0]).map_err(domain)),
            TileExpr::Select(c, a, b) => {
                let mut parts = vec![self.eval(a)?, self.eval(b)?];
                for (_, l, r) in c {
                    parts.push(self.eval(l)?);
                    parts.push(self.eval(r)?);
                }
                self.elementwise(&parts, |x| {
                    let holds = c.iter().enumerate().all(|(k, (op, _, _))| op.holds(x[2 + 2 * k], x[3 + 2 * k]));
                    Ok(if holds { x[0] } else { x[1] })
                })
            }
            TileExpr::Reduce { op, dim, arg } => {
                let t = self.eval(arg)?;
                if *dim >= t.shape.len() {
                    return Err(TileError::Shape(format!("reduce dim {dim} of a rank-{} tile", t.shape.len())));
                }
                let mut shape = t.shape.clone();
                let n = shape.remove(*dim);
                let st = strides(&t.shape);
                let count: usize = shape.iter().product();
                let data = (0..count)
                    .map(|o| {
                        let mut idx = unflatten(o, &shape);
                        idx.insert(*dim, 0);
                        let base: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
                        (0..n).fold(op.identity(), |acc, k| op.apply(acc, t.data[base + k * st[*dim]]))
                    })
                    .collect();
                Ok(Tile { shape, data })
            }
            TileExpr::Permute { order, arg } => {
                let t = self.eval(arg)?;
                let shape = e.shape_from(&t.shape)?;
                let st = strides(&t.shape);
                let data = (0..t.data.len())
                    .map(|o| {
                        let idx = unflatten(o, &shape);
                        t.data[order.iter().zip(&idx).map(|(&src, &i)| i * st[src]).sum::<usize>()]
                    })
                    .collect();
                Ok(Tile { shape, data })
            }
        }
    }

    fn store(&mut self, st: &TileStore) -> Result<(), TileError> {
        self.block = st.name.clone();
        let v = self.eval(&st.value)?;
        let mut slice_shape = Vec::new();
        for ix in &st.lhs.idx {
            match ix {
                TileIdx::Slice { len, .. } => slice_shape.push(*len),
                TileIdx::Point(_) => {}
                TileIdx::None => return Err(TileError::Shape(format!("`{}` stores through a `None` axis", st.lhs))),
            }
        }
        let mut vs = v.shape.as_slice();
        while vs.len() > slice_shape.len() && vs[0] == 1 {
            vs = &vs[1..];
        }
        if vs.len() > slice_shape.len() || broadcast(vs, &slice_shape).as_deref() != Some(slice_shape.as_slice()) {
            return Err(TileError::Shape(format!("a {:?} value does not fit `{}`", v.shape, st.lhs)));
        }
        let offs = self.offsets(&st.lhs)?;
        let vst = strides(vs);
        let buf = self.bufs.get_mut(&st.lhs.tensor).unwrap();
        for (k, o) in offs.into_iter().enumerate() {
            let idx = unflatten(k, &slice_shape);
            buf.data[o] = v.data[broadcast_offset(&idx, vs, &vst)];
            buf.written[o] = true;
        }
        Ok(())
    }

    fn run(&mut self, body: &[TileStmt]) -> Result<(), TileError> {
        for s in body {
            match s {
                TileStmt::Loop(l) => {
                    for k in 0..l.extent {
                        self.env.push((l.var.clone(), k as i64));
                        let r = self.run(&l.body);
                        self.env.pop();
                        r?;
                    }
                }
                TileStmt::Store(st) => self.store(st)?,
            }
        }
        Ok(())
    }
}

impl TileExpr {
    fn shape_from(&self, arg: &[usize]) -> Result<Vec<usize>, TileError> {
        let TileExpr::Permute { order, .. } = self else { unreachable!() };
        let mut seen = order.clone();
        seen.sort_unstable();
        if seen != (0..arg.len()).collect::<Vec<_>>() {
            return Err(TileError::Shape(format!("order {order:?} does not permute rank {}", arg.len())));
        }
        Ok(order.iter().map(|&k| arg[k]).collect())
    }
}

fn stores_in(s: &TileStmt, out: &mut Vec<TileStore>) {
    match s {
        TileStmt::Loop(l) => l.body.iter().for_each(|b| stores_in(b, out)),
        TileStmt::Store(st) => out.push(st.clone()),
    }
}

/// Output-role tensors after running `p`. Tensors that are only ever
/// accumulated into start at their reducer's identity, set just before the
/// first top-level statement that writes them; everything else must be
/// written before it is read.
pub fn interpret_tile(p: &TileProgram, inputs: &Tensors) -> Result<Tensors, TileError> {
    let mut bufs = BTreeMap::new();
    for d in &p.tensors {
        let n: usize = d.shape.iter().product();
        let buf = if d.role == Role::Input {
            let v = inputs.get(&d.name).ok_or_else(|| TileError::MissingInput(d.name.clone()))?;
            if v.shape != d.shape {
                return Err(TileError::Shape(format!("input `{}` has shape {:?}, expected {:?}", d.name, v.shape, d.shape)));
            }
            Buffer { shape: d.shape.clone(), data: v.data.clone(), written: vec![true; n] }
        } else {
            Buffer { shape: d.shape.clone(), data: vec![0.0; n], written: vec![false; n] }
        };
        bufs.insert(d.name.clone(), buf);
    }

    let mut plain = BTreeSet::new();
    let mut first: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for (k, s) in p.body.iter().enumerate() {
        let mut sts = Vec::new();
        stores_in(s, &mut sts);
        for st in sts {
            match st.accumulating_reducer() {
                Some(f) => {
                    first.entry(st.lhs.tensor.clone()).or_insert((k, f.identity()));
                }
                None => {
                    plain.insert(st.lhs.tensor.clone());
                }
            }
        }
    }
    let mut fills: BTreeMap<usize, Vec<(String, f64)>> = BTreeMap::new();
    for (t, (k, v)) in first {
        if !plain.contains(&t) {
            fills.entry(k).or_default().push((t, v));
        }
    }

    let mut m = Machine { p, bufs, env: Vec::new(), block: String::new() };
    for (k, s) in p.body.iter().enumerate() {
        for (t, v) in fills.get(&k).into_iter().flatten() {
            let b = m.bufs.get_mut(t).ok_or_else(|| crate::loop_ir::IrError::UnknownTensor(t.clone()))?;
            b.data.fill(*v);
            b.written.fill(true);
        }
        m.run(std::slice::from_ref(s))?;
    }
    Ok(m
        .p
        .tensors
        .iter()
        .filter(|d| d.role == Role::Output)
        .map(|d| {
            let b = &m.bufs[&d.name];
            (d.name.clone(), TensorValue::new(&b.shape, b.data.clone()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::interpreter::{interpret, random_inputs};
    use crate::tile_ir::parse::tests::random_program;
    use crate::tile_ir::{parse_tile, translate};

    #[test]
    fn permute_transposes() {
        let p = parse_tile(
            "tensor a: f32[2, 3] input\ntensor b: f32[3, 2] output\n# t:\nb[0 : 3, 0 : 2] = permute(a[0 : 2, 0 : 3], order=(1, 0))\n",
        )
        .unwrap();
        let x = Tensors::from([("a".to_string(), TensorValue::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]))]);
        assert_eq!(interpret_tile(&p, &x).unwrap()["b"].data, [1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn reduce_and_broadcast_store() {
        let p = parse_tile(
            "tensor a: f32[2, 3] input\ntensor s: f32[2] output\ntensor z: f32[2, 3] output\n# r:\ns[0 : 2] = reduce(+, a[0 : 2, 0 : 3], dim=1)\n# z:\nz[0 : 2, 0 : 3] = s[0 : 2, None] * 0 + 7\n",
        )
        .unwrap();
        let x = Tensors::from([("a".to_string(), TensorValue::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]))]);
        let out = interpret_tile(&p, &x).unwrap();
        assert_eq!(out["s"].data, [6., 15.]);
        assert_eq!(out["z"].data, [7.; 6]);
    }

    #[test]
    fn errors_are_reported() {
        let x = Tensors::from([("a".to_string(), TensorValue::new(&[2], vec![1., 2.]))]);
        let oob = parse_tile("tensor a: f32[2] input\ntensor b: f32[3] output\n# s:\nb[0 : 3] = a[0 : 3]\n").unwrap();
        assert!(matches!(interpret_tile(&oob, &x), Err(TileError::OutOfBounds { .. })));
        let bad = parse_tile("tensor a: f32[2] input\ntensor b: f32[3] output\n# s:\nb[0 : 3] = a[0 : 2]\n").unwrap();
        assert!(matches!(interpret_tile(&bad, &x), Err(TileError::Shape(_))));
        let un = parse_tile("tensor a: f32[2] input\ntensor t: f32[2]\ntensor b: f32[2] output\n# s:\nb[0 : 2] = t[0 : 2]\n").unwrap();
        assert!(matches!(interpret_tile(&un, &x), Err(TileError::UninitializedRead { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn translated_programs_compute_the_same_values(p in random_program(), seed in 0u64..4) {
            let x = random_inputs(&p, seed, -1.0, 1.0);
            let t = translate(&p);
            prop_assert_eq!(interpret_tile(&t, &x).unwrap(), interpret(&p, &x).unwrap());
        }
    }
}
