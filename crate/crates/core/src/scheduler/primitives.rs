// SPDX-License-Identifier: Apache-2.0
//! Loop-structure and annotation primitives.

use std::collections::{BTreeMap, BTreeSet};

use crate::expr::{Index, Load, ScalarExpr};
use crate::loop_ir::{fresh_name, inline_nest, Role, Stmt, Store, TensorDecl};

use super::fusion::{loop_vars_in, subst_stmts, wrap};
use super::{LoopRef, ScheduleError, ScheduleState};

impl ScheduleState {
    /// Splits each listed loop `v` into `v0` (extent / size) and `v1`
    /// (size), then puts all outer parts before all inner parts.
    pub fn tile(&mut self, block: &str, vars: &[String], sizes: &[i64]) -> Result<(), ScheduleError> {
        self.transact(|s| {
            let name = s.resolve_block(block)?;
            let invalid = |m: String| Err(ScheduleError::InvalidTile(m));
            if vars.is_empty() || vars.len() != sizes.len() {
                return invalid(format!("{} loops but {} sizes", vars.len(), sizes.len()));
            }
            let b = s.program.block(&name).unwrap();
            let mut pos = Vec::new();
            for v in vars {
                let k = b.loops.iter().position(|l| &l.var == v);
                pos.push(k.ok_or_else(|| ScheduleError::UnknownHandle(format!("{block}.{v}")))?);
            }
            if pos.windows(2).any(|w| w[1] != w[0] + 1) {
                return invalid("the loops must be consecutive and listed outermost first".into());
            }
            let (first, last) = (pos[0], *pos.last().unwrap());
            if b.loops[first..last].iter().any(|l| l.body.len() != 1) {
                return invalid("the loops are not perfectly nested".into());
            }
            let mut outer = Vec::new();
            let mut inner = Vec::new();
            let mut sub = BTreeMap::new();
            let mut taken: BTreeSet<String> = b.loop_vars().into_iter().collect();
            loop_vars_in(&b.loops[last].body, &mut taken);
            for (&k, &size) in pos.iter().zip(sizes) {
                let l = b.loops[k];
                if size <= 0 || size as usize > l.extent || l.extent % size as usize != 0 {
                    return invalid(format!("size {size} for `{}` of extent {}", l.var, l.extent));
                }
                let v0 = fresh_name(&format!("{}0", l.var), |n| taken.contains(n));
                taken.insert(v0.clone());
                let v1 = fresh_name(&format!("{}1", l.var), |n| taken.contains(n));
                taken.insert(v1.clone());
                sub.insert(l.var.clone(), Index::from_terms([(v0.clone(), size), (v1.clone(), 1)], 0));
                outer.push((v0, l.extent / size as usize));
                inner.push((v1, size as usize));
            }
            let body = subst_stmts(&b.loops[last].body, &sub, &BTreeMap::new());
            let at = b.path[..=first].to_vec();
            outer.extend(inner);
            let mut new = wrap(&outer, body);
            *s.program.stmt_mut(&at) = new.remove(0);
            Ok(())
        })
    }

    /// Hoists the initialization of `block`'s accumulator right before loop `var`.
    pub fn decompose_reduction(&mut self, block: &str, var: &str) -> Result<String, ScheduleError> {
        self.transact(|s| {
            let name = s.resolve_block(block)?;
            let b = s.program.block(&name).unwrap();
            let k = b
                .loops
                .iter()
                .position(|l| l.var == var)
                .ok_or_else(|| ScheduleError::UnknownHandle(format!("{block}.{var}")))?;
            let f = b
                .store
                .accumulating_reducer()
                .ok_or_else(|| ScheduleError::Unsupported(format!("`{name}` does not accumulate")))?;
            let mentions = |v: &str| b.store.indices.iter().any(|ix| ix.mentions(v));
            if let Some(l) = b.loops[..k].iter().find(|l| !mentions(&l.var)) {
                return Err(ScheduleError::Unsupported(format!(
                    "`{var}` lies inside the reduction loop `{}`; the initialization would repeat",
                    l.var
                )));
            }
            let mut taken: BTreeSet<String> = b.loop_vars().into_iter().collect();
            let mut loops = Vec::new();
            let mut sub = BTreeMap::new();
            for l in b.loops[k..].iter().filter(|l| mentions(&l.var)) {
                let v = fresh_name(&l.var, |n| taken.contains(n));
                taken.insert(v.clone());
                sub.insert(l.var.clone(), Index::var(&v));
                loops.push((v, l.extent));
            }
            let init = s.program.fresh_block(&format!("{name}_init"));
            let st = Store {
                name: init.clone(),
                tensor: b.store.tensor.clone(),
                indices: b.store.indices.iter().map(|ix| ix.substitute(&sub)).collect(),
                value: ScalarExpr::lit(f.identity()),
            };
            let (parent, at) = (b.path[..k].to_vec(), b.path[k]);
            let stmts = wrap(&loops, vec![Stmt::Store(st)]);
            s.program.body_mut(&parent).splice(at..at, stmts);
            Ok(init)
        })
    }

    pub fn inline(&mut self, producer: &str, consumer: &str) -> Result<(), ScheduleError> {
        self.transact(|s| {
            let (pr, co) = (s.resolve_block(producer)?, s.resolve_block(consumer)?);
            s.program = inline_nest(&s.program, &pr, &co)?;
            Ok(())
        })
    }

    /// Copies the `index`-th tensor `block` reads into a new buffer tagged
    /// with `scope` and redirects `block`'s reads to it. Returns the name of
    /// the copy, which is both its tensor and its block.
    pub fn cache_read(&mut self, block: &str, index: usize, scope: &str) -> Result<String, ScheduleError> {
        self.transact(|s| {
            let name = s.resolve_block(block)?;
            let b = s.program.block(&name).unwrap();
            let mut reads: Vec<String> = Vec::new();
            for l in b.store.value.loads() {
                if !reads.contains(&l.tensor) {
                    reads.push(l.tensor.clone());
                }
            }
            let t = reads.get(index).ok_or_else(|| ScheduleError::UnknownHandle(format!("{block} read #{index}")))?.clone();
            let top = b.path[0];
            let decl = s.program.decl(&t).unwrap().clone();
            let copy = fresh_name(&format!("{t}_{scope}"), |n| {
                s.program.decl(n).is_some() || s.program.block(n).is_some()
            });
            let vars: Vec<String> = (0..decl.shape.len()).map(|d| format!("ax{d}")).collect();
            let idx: Vec<Index> = vars.iter().map(|v| Index::var(v)).collect();
            let st = Store {
                name: copy.clone(),
                tensor: copy.clone(),
                indices: idx.clone(),
                value: ScalarExpr::Load(Load { tensor: t.clone(), indices: idx }),
            };
            let loops: Vec<(String, usize)> = vars.into_iter().zip(decl.shape.iter().copied()).collect();
            let mut nd = TensorDecl::new(&copy, &decl.shape, Role::Intermediate);
            nd.dtype = decl.dtype;
            nd.scope = Some(scope.to_string());
            let at = s.program.tensors.iter().position(|d| d.name == t).unwrap() + 1;
            s.program.tensors.insert(at, nd);
            let map = BTreeMap::from([(t.clone(), copy.clone())]);
            let tensor_name = name.clone();
            s.program.map_stores(&mut |st| {
                if st.name == tensor_name {
                    st.value = st.value.rename_tensors(&map);
                }
            });
            s.program.body.splice(top..top, wrap(&loops, vec![Stmt::Store(st)]));
            Ok(copy)
        })
    }

    pub fn bind_block_idx(&mut self, loops: &[LoopRef], names: &[String]) -> Result<(), ScheduleError> {
        if loops.len() != names.len() {
            return Err(ScheduleError::Unsupported(format!("{} loops but {} names", loops.len(), names.len())));
        }
        self.transact(|s| {
            for (l, n) in loops.iter().zip(names) {
                let path = s.resolve_loop(l)?;
                if let Stmt::Loop(lp) = s.program.stmt_mut(&path) {
                    lp.annotation = Some(n.clone());
                }
            }
            Ok(())
        })
    }

    /// Tags the buffer `block` writes (index 0) with a memory scope.
    pub fn set_scope(&mut self, block: &str, index: usize, scope: &str) -> Result<(), ScheduleError> {
        self.transact(|s| {
            let name = s.resolve_block(block)?;
            if index != 0 {
                return Err(ScheduleError::UnknownHandle(format!("{block} buffer #{index}")));
            }
            let t = s.program.block(&name).unwrap().store.tensor.clone();
            s.program.decl_mut(&t).unwrap().scope = Some(scope.to_string());
            Ok(())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpreter::{interpret, random_inputs};
    use crate::loop_ir::{equivalent_modulo_names, parse_program, print_loop_ir};
    use crate::scheduler::fixtures::softmax;

    fn square() -> crate::loop_ir::Program {
        parse_program(
            "\
tensor a: f32[8, 8] input
tensor b: f32[8, 8] output
for i, j in grid(8, 8):
    # cp:
    b[i, j] = a[i, j] + i
",
        )
        .unwrap()
    }

    #[test]
    fn tile_extents() {
        let mut s = ScheduleState::new(square());
        s.tile("cp", &["i".into(), "j".into()], &[4, 2]).unwrap();
        let b = s.program.block("cp").unwrap();
        let got: Vec<(String, usize)> = b.loops.iter().map(|l| (l.var.clone(), l.extent)).collect();
        assert_eq!(got, [("i0".into(), 2), ("j0".into(), 4), ("i1".into(), 4), ("j1".into(), 2)]);
        let x = random_inputs(&square(), 0, -1.0, 1.0);
        assert_eq!(interpret(&square(), &x).unwrap(), interpret(&s.program, &x).unwrap());
    }

    #[test]
    fn tile_with_full_size_has_one_outer_iteration() {
        let mut s = ScheduleState::new(square());
        s.tile("cp", &["j".into()], &[8]).unwrap();
        let b = s.program.block("cp").unwrap();
        assert_eq!(b.loops[1].extent, 1);
        let x = random_inputs(&square(), 0, -1.0, 1.0);
        assert_eq!(interpret(&square(), &x).unwrap(), interpret(&s.program, &x).unwrap());
    }

    #[test]
    fn bad_tile_sizes() {
        for size in [0, -1, 3, 9] {
            let mut s = ScheduleState::new(square());
            let e = s.tile("cp", &["i".into()], &[size]).unwrap_err();
            assert!(matches!(e, ScheduleError::InvalidTile(_)), "{size}");
            assert_eq!(s.program, square());
        }
    }

    #[test]
    fn decompose_softmax_sum() {
        let mut s = ScheduleState::new(softmax());
        s.decompose_reduction("s_sum", "j").unwrap();
        let want = parse_program(&crate::scheduler::fixtures::SOFTMAX.replace(
            "for i, j in grid(2, 4):\n    # s_sum:\n    xsum[i] += xexp[i, j]",
            "for i in range(2):\n    # s_sum_init:\n    xsum[i] = 0.0\n    for j in range(4):\n        # s_sum:\n        xsum[i] += xexp[i, j]",
        ))
        .unwrap();
        equivalent_modulo_names(&s.program, &want).unwrap();
        let x = random_inputs(&softmax(), 9, -3.0, 3.0);
        assert_eq!(interpret(&softmax(), &x).unwrap(), interpret(&s.program, &x).unwrap());
    }

    #[test]
    fn decompose_inside_reduction_loop_is_rejected() {
        let mut s = ScheduleState::new(softmax());
        s.tile("s_sum", &["j".into()], &[2]).unwrap();
        assert!(s.decompose_reduction("s_sum", "j1").is_err());
    }

    #[test]
    fn annotations_are_metadata() {
        let mut s = ScheduleState::new(softmax());
        let at = |v: &str| LoopRef { block: "s_max".into(), var: v.into() };
        s.bind_block_idx(&[at("i")], &["blockIdx.x".into()]).unwrap();
        s.set_scope("s_exp", 0, "shared").unwrap();
        let text = print_loop_ir(&s.program);
        assert!(text.contains("blockIdx.x for i in range(2):"), "{text}");
        assert!(text.contains("@shared"));
        assert_eq!(parse_program(&text).unwrap(), s.program);
        let x = random_inputs(&softmax(), 2, -1.0, 1.0);
        assert_eq!(interpret(&softmax(), &x).unwrap(), interpret(&s.program, &x).unwrap());
        assert!(matches!(s.set_scope("nope", 0, "shared"), Err(ScheduleError::UnknownHandle(_))));
    }

    #[test]
    fn cache_read_adds_copy() {
        let mut s = ScheduleState::new(softmax());
        let c = s.cache_read("s_exp", 0, "shared").unwrap();
        assert_eq!(c, "inp_shared");
        assert_eq!(s.program.decl(&c).unwrap().scope.as_deref(), Some("shared"));
        assert!(s.program.block("s_exp").unwrap().store.value.reads_tensor(&c));
        assert!(s.program.block("s_max").unwrap().store.value.reads_tensor("inp"));
        let x = random_inputs(&softmax(), 4, -1.0, 1.0);
        assert_eq!(interpret(&softmax(), &x).unwrap(), interpret(&s.program, &x).unwrap());
    }
}
