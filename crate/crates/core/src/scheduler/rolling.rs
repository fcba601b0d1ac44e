// SPDX-License-Identifier: Apache-2.0
//! Rolling update: fuse a reduction under the loop of the reductions it
//! depends on, carrying their previous-iteration values and repairing the
//! partial result every iteration.

use std::collections::{BTreeMap, BTreeSet};

use crate::expr::{eval_scalar, Index, Reducer, ScalarExpr};
use crate::loop_ir::{build_dataflow, fresh_name, inline_nest, reduce_predecessors, Role, Stmt, Store, TensorDecl};
use crate::repair_solver::{derive, primed, RepairCertificate};

use super::fusion::{wrap, Direction};
use super::pattern::{match_reduce_pattern, ReducePattern};
use super::{is_under, Diagnostic, LoopRef, RepairBinding, ScheduleError, ScheduleState};

pub(crate) const INLINE: &str = "inline_map_return_reduce";
pub(crate) const FUSE: &str = "naive_loop_fusion";
pub(crate) const MATCH: &str = "match_reduce_pattern";
pub(crate) const SOLVE: &str = "solve_repair_func";
pub(crate) const VALIDATE: &str = "validate_h_commutative";
const CACHE: &str = "cache_reduce_prev_result";
pub(crate) const APPLY: &str = "apply_repair_term";

pub(crate) type StepResult<T> = Result<T, (&'static str, ScheduleError)>;

pub(crate) fn at_step(step: &'static str) -> impl Fn(ScheduleError) -> (&'static str, ScheduleError) {
    move |e| (step, e)
}

/// Solves and validates `h` for a matched pattern.
pub(crate) fn solve_and_validate(pat: &ReducePattern) -> StepResult<RepairCertificate> {
    let cert = derive(pat.f, &pat.g).map_err(|e| (SOLVE, e.into()))?;
    if !cert.commutes {
        return Err((
            VALIDATE,
            ScheduleError::NotCommuting { h: cert.h.to_string(), reason: format!("does not distribute over {}", pat.f) },
        ));
    }
    Ok(cert)
}

/// At the first iteration the accumulator and every previous value hold
/// their reducer identities; the repair must leave the accumulator there.
fn first_iteration_holds(cert: &RepairCertificate, preds: &[Reducer]) -> bool {
    let id = cert.f.identity();
    [-2.5, 0.0, 0.75, 3.0].iter().all(|&x| {
        let mut env: BTreeMap<String, f64> = BTreeMap::from([("t".to_string(), id)]);
        for (k, (r, f)) in cert.r_args.iter().zip(preds).enumerate() {
            env.insert(r.clone(), f.identity());
            env.insert(primed(r), x + 0.37 * k as f64);
        }
        matches!(eval_scalar(&cert.h, &env), Ok(v) if v == id)
    })
}

impl ScheduleState {
    /// Inlines the map nests between `target` and its reduce predecessors
    /// into `target` and returns those predecessors.
    pub fn inline_map_return_reduce(&mut self, target: &str) -> Result<Vec<String>, ScheduleError> {
        loop {
            let g = build_dataflow(&self.program)?;
            let preds = reduce_predecessors(&self.program, &g, target, |b| self.is_reduce(b));
            let t = g.index(target).ok_or_else(|| ScheduleError::UnknownHandle(target.into()))?;
            let next = g.producers(t).into_iter().filter(|q| preds.on_path.contains(&g.nodes[*q])).max();
            match next {
                Some(q) => {
                    let producer = g.nodes[q].clone();
                    self.program = inline_nest(&self.program, &producer, target)?;
                }
                None if preds.reduce.is_empty() => return Err(ScheduleError::NoReducePredecessor(target.into())),
                None => return Ok(preds.reduce),
            }
        }
    }

    fn reducer_of(&self, block: &str) -> Result<Reducer, ScheduleError> {
        if let Some(b) = self.binding_of(block) {
            return Ok(b.reducer);
        }
        let b = self.program.block(block).unwrap();
        b.store
            .accumulating_reducer()
            .ok_or_else(|| ScheduleError::PatternMismatch(format!("`{block}` does not accumulate")))
    }

    /// Checks that `at` advances `target` and each predecessor by exactly one
    /// reduction step per iteration.
    fn check_rolling_loop(&self, target: &str, pattern: &str, preds: &[String], at: &LoopRef) -> Result<(), ScheduleError> {
        let lpath = self.resolve_loop(at)?;
        let host: BTreeSet<String> = (1..=lpath.len()).map(|d| self.program.loop_at(&lpath[..d]).var.clone()).collect();
        let lvar = &self.program.loop_at(&lpath).var;
        for name in preds.iter().chain([&target.to_string(), &pattern.to_string()]) {
            let b = self.program.block(name).unwrap();
            if !is_under(&b.path, &lpath) {
                return Err(ScheduleError::FusionIllegal(format!("`{name}` is not under `{lvar}`")));
            }
        }
        for name in preds.iter().chain([&target.to_string()]) {
            let b = self.program.block(name).unwrap();
            let red = b.reduce_vars();
            if !red.contains(lvar) {
                return Err(ScheduleError::Unsupported(format!("`{lvar}` is not a reduction loop of `{name}`")));
            }
            if let Some(v) = red.iter().find(|v| *v != lvar && host.contains(*v)) {
                return Err(ScheduleError::Unsupported(format!("`{name}` also reduces across the enclosing loop `{v}`")));
            }
        }
        let t = self.program.block(target).unwrap();
        if let Some(v) = t.reduce_vars().iter().find(|v| !host.contains(*v)) {
            return Err(ScheduleError::Unsupported(format!(
                "`{target}` reduces across `{v}` inside the rolling loop; only one step per iteration is supported"
            )));
        }
        Ok(())
    }

    /// Introduces previous/current buffers for predecessor `block` under `at`.
    /// A predecessor that takes one step per iteration reads the previous
    /// buffer directly; others keep accumulating into the current one.
    pub(crate) fn cache_reduce_prev_result(&mut self, block: &str, at: &LoopRef) -> Result<RepairBinding, ScheduleError> {
        if let Some(b) = self.binding_of(block) {
            return Ok(b.clone());
        }
        let reducer = self.reducer_of(block)?;
        let lpath = self.resolve_loop(at)?;
        let p = &self.program;
        let b = p.block(block).unwrap();
        let host: Vec<String> = b.loops[..lpath.len()].iter().map(|l| l.var.clone()).collect();
        let x = b.store.tensor.clone();
        let idx = b.store.indices.clone();
        let decl = p.decl(&x).unwrap().clone();
        let single_step = self.pair_with_global(block).is_none() && b.reduce_vars().iter().all(|v| host.contains(v));
        let mut taken: BTreeSet<String> = b.loop_vars().into_iter().collect();
        let mut loops = Vec::new();
        let mut sub = BTreeMap::new();
        for l in b.loops[lpath.len()..].iter().filter(|l| idx.iter().any(|ix| ix.mentions(&l.var))) {
            let v = fresh_name(&l.var, |n| taken.contains(n));
            taken.insert(v.clone());
            sub.insert(l.var.clone(), Index::var(&v));
            loops.push((v, l.extent));
        }
        let eidx: Vec<Index> = idx.iter().map(|ix| ix.substitute(&sub)).collect();

        let prev = p.fresh_tensor(&format!("{x}_0"));
        let curr = if decl.role == Role::Output { x.clone() } else { p.fresh_tensor(&format!("{x}_1")) };
        let init = p.fresh_block(&format!("{block}_init"));
        let carry = fresh_name(&format!("{block}_carry"), |n| n == init || p.block(n).is_some());

        let mut nd = TensorDecl::new(&prev, &decl.shape, Role::Intermediate);
        nd.dtype = decl.dtype;
        let at_decl = self.program.tensors.iter().position(|t| t.name == x).unwrap();
        self.program.tensors.insert(at_decl, nd);
        if curr != x {
            self.program.rename_tensor(&x, &curr);
        }
        if single_step {
            let st = self.program.store_mut(block).unwrap();
            let Some((f, g)) = st.accumulation() else {
                return Err(ScheduleError::PatternMismatch(format!("`{block}` is not of the form X = X f G")));
            };
            st.value = f.combine(ScalarExpr::load(&prev, idx.clone()), g.clone());
        }

        let init_st = Store { name: init.clone(), tensor: prev.clone(), indices: eidx.clone(), value: ScalarExpr::lit(reducer.identity()) };
        let (parent, pos) = (lpath[..lpath.len() - 1].to_vec(), *lpath.last().unwrap());
        self.program.body_mut(&parent).splice(pos..pos, wrap(&loops, vec![Stmt::Store(init_st)]));
        let carry_st = Store {
            name: carry.clone(),
            tensor: prev.clone(),
            indices: eidx.clone(),
            value: ScalarExpr::load(&curr, eidx),
        };
        let lpath = self.resolve_loop(at)?;
        self.program.body_mut(&lpath).extend(wrap(&loops, vec![Stmt::Store(carry_st)]));

        let binding = RepairBinding { block: block.to_string(), prev, curr, reducer, init, carry };
        self.bindings.push(binding.clone());
        Ok(binding)
    }

    /// `X = X f G` becomes `X = h(X, prev..., curr...) f G`.
    pub(crate) fn apply_repair_term(
        &mut self,
        target: &str,
        pat: &ReducePattern,
        cert: &RepairCertificate,
        bindings: &[RepairBinding],
    ) -> Result<(), ScheduleError> {
        let st = self.program.store_mut(target).unwrap();
        let Some((f, g)) = st.accumulation() else {
            return Err(ScheduleError::PatternMismatch(format!("`{target}` is not of the form X = X f G")));
        };
        let g = g.clone();
        let pairs: Vec<(ScalarExpr, ScalarExpr)> = pat
            .r_args
            .iter()
            .zip(bindings)
            .map(|((_, ld), b)| (ScalarExpr::load(&b.prev, ld.indices.clone()), ScalarExpr::load(&b.curr, ld.indices.clone())))
            .collect();
        let t = ScalarExpr::Load(st.lhs_load());
        st.value = f.combine(cert.apply(t, &pairs), g);
        Ok(())
    }

    fn rolling_steps(&mut self, target: &str, at: &LoopRef) -> StepResult<RepairCertificate> {
        let tgt = self.resolve_block(target).map_err(at_step(INLINE))?;
        // A privatized combination is repaired using the pattern of its slices.
        let pattern = match self.pair_with_global(&tgt) {
            Some(pair) if self.program.block(&tgt).unwrap().store.value.reads_tensor(&pair.local_tensor) => {
                pair.local_block.clone()
            }
            _ => tgt.clone(),
        };
        let preds = self.inline_map_return_reduce(&pattern).map_err(at_step(INLINE))?;

        let none = BTreeSet::new();
        for l in &preds {
            self.fuse_raw(l, at, Direction::Consumer, false, &none).map_err(at_step(FUSE))?;
        }
        self.fuse_raw(&tgt, at, Direction::Consumer, false, &none).map_err(at_step(FUSE))?;
        self.check_rolling_loop(&tgt, &pattern, &preds, at).map_err(at_step(FUSE))?;

        let pat = match_reduce_pattern(&self.program, &pattern, &preds).map_err(at_step(MATCH))?;
        if pattern != tgt {
            let tb = self.program.block(&tgt).unwrap();
            let vars = tb.loop_vars();
            for (_, ld) in &pat.r_args {
                if let Some(v) = ld.indices.iter().flat_map(|ix| ix.vars()).find(|v| !vars.iter().any(|x| x == v)) {
                    return Err((
                        MATCH,
                        ScheduleError::PatternMismatch(format!("`{}` is indexed by `{v}`, which `{tgt}` does not see", ld.tensor)),
                    ));
                }
            }
        }

        let cert = solve_and_validate(&pat)?;
        let reducers: Vec<Reducer> =
            preds.iter().map(|b| self.reducer_of(b)).collect::<Result<_, _>>().map_err(at_step(VALIDATE))?;
        if !first_iteration_holds(&cert, &reducers) {
            return Err((
                VALIDATE,
                ScheduleError::NotCommuting {
                    h: cert.h.to_string(),
                    reason: "the first iteration does not leave the accumulator at its identity".into(),
                },
            ));
        }

        let mut bindings = Vec::new();
        for l in &preds {
            bindings.push(self.cache_reduce_prev_result(l, at).map_err(at_step(CACHE))?);
        }
        self.apply_repair_term(&tgt, &pat, &cert, &bindings).map_err(at_step(APPLY))?;
        Ok(cert)
    }

    /// Fuses `target` under `at` together with its reduce predecessors and
    /// repairs it. On failure the state is left untouched.
    pub fn rolling_update(&mut self, target: &str, at: &LoopRef) -> Result<RepairCertificate, Diagnostic> {
        let diag = |(step, error): (&'static str, ScheduleError)| Diagnostic {
            primitive: "rolling_update".into(),
            target: target.into(),
            step,
            error,
        };
        let mut s = self.clone();
        let cert = s.rolling_steps(target, at).map_err(diag)?;
        crate::loop_ir::validate(&s.program).map_err(|e| diag((APPLY, e.into())))?;
        *self = s;
        Ok(cert)
    }
}
