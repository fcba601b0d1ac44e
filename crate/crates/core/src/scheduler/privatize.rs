// SPDX-License-Identifier: Apache-2.0
//! Splitting a reduction into per-slice partials ("local") and their
//! combination ("global").

use std::collections::{BTreeMap, BTreeSet};

use crate::expr::{Index, ScalarExpr};
use crate::loop_ir::{fresh_name, Loop, Program, Role, Stmt, Store, TensorDecl};

use super::fusion::{loop_vars_in, stores_in, subst_stmts, wrap, Direction};
use super::{is_under, LoopRef, PrivatizedPair, ScheduleError, ScheduleState};

fn partial_decl(p: &Program, tensor: &str, slices: usize) -> TensorDecl {
    let d = p.decl(tensor).unwrap();
    let mut shape = d.shape.clone();
    shape.push(slices);
    let mut nd = TensorDecl::new(&p.fresh_tensor(&format!("{tensor}_l")), &shape, Role::Intermediate);
    nd.dtype = d.dtype;
    nd
}

fn insert_decl_after(p: &mut Program, anchor: &str, d: TensorDecl) {
    let at = p.tensors.iter().position(|t| t.name == anchor).map_or(p.tensors.len(), |k| k + 1);
    p.tensors.insert(at, d);
}

/// Moves the top-level nest holding `block` right after the last writer of
/// anything it reads.
pub(crate) fn place_after_writers(p: &mut Program, block: &str) -> Result<(), ScheduleError> {
    let b = p.block(block).unwrap();
    let top = b.path[0];
    let reads = b.store.reads();
    let written = b.store.tensor.clone();
    let last = p
        .blocks()
        .iter()
        .filter(|x| x.path[0] != top && reads.contains(&x.store.tensor))
        .map(|x| x.path[0])
        .max();
    let stmt = p.body.remove(top);
    let mut at = last.map_or(top, |k| if k > top { k } else { k + 1 });
    at = at.min(p.body.len());
    p.body.insert(at, stmt);
    if let Some(r) = p.blocks().iter().find(|x| x.path[0] < at && x.store.value.reads_tensor(&written)) {
        return Err(ScheduleError::Unsupported(format!(
            "`{}` reads `{written}` before its combination `{block}` can run",
            r.store.name
        )));
    }
    Ok(())
}

impl ScheduleState {
    /// Splits reduction loop `var` of `block` into `k` slices and rewrites the
    /// nest in place: slice partials accumulate into a new tensor, and each
    /// slice is folded into the original output right after it is produced.
    pub fn privatize_reduce(&mut self, block: &str, var: &str, k: i64) -> Result<PrivatizedPair, ScheduleError> {
        self.transact(|s| {
            let name = s.resolve_block(block)?;
            let b = s.program.block(&name).unwrap();
            let pos = b
                .loops
                .iter()
                .position(|l| l.var == var)
                .ok_or_else(|| ScheduleError::UnknownHandle(format!("{block}.{var}")))?;
            let Some((f, g)) = b.store.accumulation() else {
                return Err(ScheduleError::Unsupported(format!("`{name}` is not of the form X = X f G")));
            };
            let (f, g) = (f, g.clone());
            let l = b.loops[pos];
            let idx = b.store.indices.clone();
            if idx.iter().any(|ix| ix.mentions(var)) {
                return Err(ScheduleError::Unsupported(format!("`{var}` is not a reduction loop of `{name}`")));
            }
            if stores_in(&l.body).len() != 1 {
                return Err(ScheduleError::Unsupported(format!("loop `{var}` holds more than `{name}`")));
            }
            if k <= 0 || k as usize > l.extent || l.extent % k as usize != 0 {
                return Err(ScheduleError::InvalidTile(format!("{k} slices for `{var}` of extent {}", l.extent)));
            }
            let (k, inner) = (k as usize, l.extent / k as usize);
            let mut taken: BTreeSet<String> = b.loop_vars().into_iter().collect();
            loop_vars_in(&l.body, &mut taken);
            let l0 = fresh_name(&format!("{var}0"), |n| taken.contains(n));
            taken.insert(l0.clone());
            let l1 = fresh_name(&format!("{var}1"), |n| taken.contains(n));
            taken.insert(l1.clone());

            let x = b.store.tensor.clone();
            let ld = partial_decl(&s.program, &x, k);
            let local_t = ld.name.clone();
            let local_b = s.program.fresh_block(&format!("{name}_local"));
            let global_b = s.program.fresh_block(&format!("{name}_global"));

            let sub = BTreeMap::from([(var.to_string(), Index::from_terms([(l0.clone(), inner as i64), (l1.clone(), 1)], 0))]);
            let mut local_idx: Vec<Index> = idx.iter().map(|ix| ix.substitute(&sub)).collect();
            local_idx.push(Index::var(&l0));
            let mut body = subst_stmts(&l.body, &sub, &BTreeMap::new());
            map_store(&mut body, &name, &mut |st| {
                st.name = local_b.clone();
                st.tensor = local_t.clone();
                st.indices = local_idx.clone();
                st.value = f.combine(ScalarExpr::load(&local_t, local_idx.clone()), g.subst_index_vars(&sub));
            });

            // Map loops between `var` and the store must be repeated around the fold.
            let mut gloops = Vec::new();
            let mut gsub = BTreeMap::new();
            for m in b.loops[pos + 1..].iter().filter(|m| idx.iter().any(|ix| ix.mentions(&m.var))) {
                let v = fresh_name(&m.var, |n| taken.contains(n));
                taken.insert(v.clone());
                gsub.insert(m.var.clone(), Index::var(&v));
                gloops.push((v, m.extent));
            }
            let gidx: Vec<Index> = idx.iter().map(|ix| ix.substitute(&gsub)).collect();
            let mut pidx = gidx.clone();
            pidx.push(Index::var(&l0));
            let fold = Store {
                name: global_b.clone(),
                tensor: x.clone(),
                indices: gidx.clone(),
                value: f.combine(ScalarExpr::load(&x, gidx), ScalarExpr::load(&local_t, pidx)),
            };
            let mut l0_body = vec![Stmt::Loop(Loop::new(&l1, inner, body))];
            l0_body.extend(wrap(&gloops, vec![Stmt::Store(fold)]));
            let path = b.path[..=pos].to_vec();
            *s.program.stmt_mut(&path) = Stmt::Loop(Loop::new(&l0, k, l0_body));
            insert_decl_after(&mut s.program, &x, ld);

            Ok(s.register_pair(&name, local_b, global_b, local_t, x))
        })
    }

    fn register_pair(&mut self, original: &str, local: String, global: String, local_t: String, t: String) -> PrivatizedPair {
        let pair = PrivatizedPair { local_block: local.clone(), global_block: global, local_tensor: local_t, tensor: t };
        self.privatized.push(pair.clone());
        self.aliases.insert(original.to_string(), local);
        pair
    }

    pub(crate) fn fuse_and_privatize_raw(
        &mut self,
        block: &str,
        at: &LoopRef,
        ignore: &BTreeSet<String>,
    ) -> Result<PrivatizedPair, ScheduleError> {
        let name = self.resolve_block(block)?;
        self.fuse_raw(&name, at, Direction::Consumer, false, ignore)?;
        let lpath = self.resolve_loop(at)?;
        let p = &self.program;
        let b = p.block(&name).unwrap();
        if !is_under(&b.path, &lpath) {
            return Err(ScheduleError::FusionIllegal(format!("`{name}` did not end up under `{}`", at.var)));
        }
        let l = p.loop_at(&lpath);
        let (lvar, slices) = (l.var.clone(), l.extent);
        let Some((f, g)) = b.store.accumulation() else {
            return Err(ScheduleError::Unsupported(format!("`{name}` is not of the form X = X f G")));
        };
        let (f, g) = (f, g.clone());
        let idx = b.store.indices.clone();
        if idx.iter().any(|ix| ix.mentions(&lvar)) {
            return Err(ScheduleError::Unsupported(format!("`{lvar}` indexes the output of `{name}`")));
        }
        let x = b.store.tensor.clone();
        let ld = partial_decl(p, &x, slices);
        let local_t = ld.name.clone();
        let local_b = p.fresh_block(&format!("{name}_local"));
        let global_b = p.fresh_block(&format!("{name}_global"));
        let shape = p.decl(&x).unwrap().shape.clone();

        let mut local_idx = idx.clone();
        local_idx.push(Index::var(&lvar));
        let st = self.program.store_mut(&name).unwrap();
        st.name = local_b.clone();
        st.tensor = local_t.clone();
        st.value = f.combine(ScalarExpr::load(&local_t, local_idx.clone()), g);
        st.indices = local_idx;

        let mut vars: Vec<String> = Vec::new();
        for (d, ix) in idx.iter().enumerate() {
            let v = match ix.as_plain_var() {
                Some(u) if !vars.iter().any(|x| x == u) && u != lvar => u.to_string(),
                _ => fresh_name(&format!("ax{d}"), |n| vars.iter().any(|x| x == n) || n == lvar),
            };
            vars.push(v);
        }
        let gidx: Vec<Index> = vars.iter().map(|v| Index::var(v)).collect();
        let mut pidx = gidx.clone();
        pidx.push(Index::var(&lvar));
        let fold = Store {
            name: global_b.clone(),
            tensor: x.clone(),
            indices: gidx.clone(),
            value: f.combine(ScalarExpr::load(&x, gidx), ScalarExpr::load(&local_t, pidx)),
        };
        let mut loops: Vec<(String, usize)> = vars.into_iter().zip(shape).collect();
        loops.push((lvar, slices));
        let nest = wrap(&loops, vec![Stmt::Store(fold)]);
        insert_decl_after(&mut self.program, &x, ld);
        let top = self.program.block(&local_b).unwrap().path[0];
        self.program.body.splice(top + 1..top + 1, nest);
        place_after_writers(&mut self.program, &global_b)?;
        Ok(self.register_pair(&name, local_b, global_b, local_t, x))
    }

    /// Fuses `block` under `at`, then privatizes it over `at`: the partials
    /// stay under the loop and their combination becomes a separate nest.
    pub fn fuse_and_privatize(&mut self, block: &str, at: &LoopRef) -> Result<PrivatizedPair, ScheduleError> {
        self.transact(|s| s.fuse_and_privatize_raw(block, at, &BTreeSet::new()))
    }
}

fn map_store(body: &mut [Stmt], name: &str, f: &mut impl FnMut(&mut Store)) {
    for s in body {
        match s {
            Stmt::Store(st) if st.name == name => f(st),
            Stmt::Store(_) => {}
            Stmt::Loop(l) => map_store(&mut l.body, name, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpreter::{compare, interpret, random_inputs};
    use crate::loop_ir::{equivalent_modulo_names, parse_program};
    use crate::scheduler::fixtures::softmax;

    #[test]
    fn privatized_max_is_exact_for_every_split() {
        for k in [1, 2, 4] {
            let mut s = ScheduleState::new(softmax());
            let pair = s.privatize_reduce("s_max", "j", k).unwrap();
            assert_eq!(pair.local_block, "s_max_local");
            assert_eq!(s.program.decl(&pair.local_tensor).unwrap().shape, [2, k as usize]);
            for seed in 0..10 {
                let x = random_inputs(&softmax(), seed, -3.0, 3.0);
                assert_eq!(interpret(&softmax(), &x).unwrap(), interpret(&s.program, &x).unwrap(), "k={k}");
            }
        }
    }

    #[test]
    fn privatized_sum_within_rounding() {
        let mut s = ScheduleState::new(softmax());
        s.privatize_reduce("s_sum", "j", 2).unwrap();
        for seed in 0..10 {
            let x = random_inputs(&softmax(), seed, -3.0, 3.0);
            let r = compare(&interpret(&s.program, &x).unwrap(), &interpret(&softmax(), &x).unwrap(), 1e-12, 0.0).unwrap();
            assert!(r.pass(), "{r}");
        }
    }

    #[test]
    fn privatize_structure() {
        let mut s = ScheduleState::new(softmax());
        s.privatize_reduce("s_max", "j", 2).unwrap();
        let want = parse_program(&crate::scheduler::fixtures::SOFTMAX.replace(
            "for i, j in grid(2, 4):\n    # s_max:\n    xmax[i] = max(xmax[i], inp[i, j])",
            "for i, j0 in grid(2, 2):\n    for j1 in range(2):\n        # s_max_local:\n        xmax_l[i, j0] = max(xmax_l[i, j0], inp[i, j0 * 2 + j1])\n    # s_max_global:\n    xmax[i] = max(xmax[i], xmax_l[i, j0])",
        ).replace("tensor xmax: f32[2]\n", "tensor xmax: f32[2]\ntensor xmax_l: f32[2, 2]\n"))
        .unwrap();
        equivalent_modulo_names(&s.program, &want).unwrap();
    }

    #[test]
    fn bad_slice_counts() {
        for k in [0, 3, 5] {
            let mut s = ScheduleState::new(softmax());
            assert!(matches!(s.privatize_reduce("s_max", "j", k), Err(ScheduleError::InvalidTile(_))));
            assert_eq!(s.program, softmax());
        }
        let mut s = ScheduleState::new(softmax());
        assert!(s.privatize_reduce("s_max", "i", 2).is_err());
    }

    #[test]
    fn fuse_and_privatize_under_tiled_loop() {
        let mut s = ScheduleState::new(softmax());
        s.tile("s_exp", &["j".into()], &[2]).unwrap();
        let at = LoopRef { block: "s_exp".into(), var: "j0".into() };
        let pair = s.fuse_and_privatize("s_sum", &at).unwrap();
        let local = s.program.block(&pair.local_block).unwrap();
        assert_eq!(local.path[0], 1);
        assert_eq!(s.program.block(&pair.global_block).unwrap().path[0], 2);
        let x = random_inputs(&softmax(), 1, -2.0, 2.0);
        let r = compare(&interpret(&s.program, &x).unwrap(), &interpret(&softmax(), &x).unwrap(), 1e-12, 0.0).unwrap();
        assert!(r.pass(), "{r}\n{}", s.program);
    }
}
