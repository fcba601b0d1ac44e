// SPDX-License-Identifier: Apache-2.0
//! Split-k rolling update: every slice of the loop reduces independently
//! against its own slice-local predecessors, and the combination step
//! repairs each partial to the final predecessor values.

use std::collections::{BTreeMap, BTreeSet};

use crate::expr::{Index, Load, ScalarExpr};
use crate::loop_ir::validate;
use crate::repair_solver::RepairCertificate;

use super::fusion::Direction;
use super::pattern::match_reduce_pattern;
use super::privatize::place_after_writers;
use super::rolling::{at_step, solve_and_validate, StepResult, APPLY, FUSE, INLINE, MATCH};
use super::{Diagnostic, LoopRef, PrivatizedPair, ScheduleError, ScheduleState};

const PRIVATIZE_PREDS: &str = "fuse_and_privatize_predecessors";
const REPLACE: &str = "replace_tensor_reads";
const PRIVATIZE_TARGET: &str = "fuse_and_privatize_target";

impl ScheduleState {
    fn split_k_steps(&mut self, target: &str, at: &LoopRef) -> StepResult<(PrivatizedPair, RepairCertificate)> {
        let tgt = self.resolve_block(target).map_err(at_step(INLINE))?;
        let preds = self.inline_map_return_reduce(&tgt).map_err(at_step(INLINE))?;
        let lpath = self.resolve_loop(at).map_err(at_step(PRIVATIZE_PREDS))?;
        let lvar = self.program.loop_at(&lpath).var.clone();

        let mut pairs = Vec::new();
        for pr in &preds {
            let pair = match self.pair_with_global(pr) {
                Some(pair) => pair.clone(),
                None => self.fuse_and_privatize_raw(pr, at, &BTreeSet::new()).map_err(at_step(PRIVATIZE_PREDS))?,
            };
            let local = self.program.block(&pair.local_block).unwrap();
            let host = self.resolve_loop(at).map_err(at_step(PRIVATIZE_PREDS))?;
            if !super::is_under(&local.path, &host) || local.store.indices.last() != Some(&Index::var(&lvar)) {
                return Err((
                    PRIVATIZE_PREDS,
                    ScheduleError::FusionIllegal(format!("`{pr}` is not privatized over `{lvar}`")),
                ));
            }
            pairs.push(pair);
        }

        let ignore: BTreeSet<String> = pairs.iter().map(|p| p.tensor.clone()).collect();
        self.fuse_raw(&tgt, at, Direction::Consumer, false, &ignore).map_err(at_step(FUSE))?;

        let st = self.program.store_mut(&tgt).unwrap();
        for pair in &pairs {
            st.value = st.value.map(&mut |e| match e {
                ScalarExpr::Load(l) if l.tensor == pair.tensor => {
                    let mut idx = l.indices;
                    idx.push(Index::var(&lvar));
                    ScalarExpr::load(&pair.local_tensor, idx)
                }
                e => e,
            });
        }
        if let Some(v) = self.program.block(&tgt).unwrap().store.indices.iter().find(|ix| ix.mentions(&lvar)) {
            return Err((REPLACE, ScheduleError::Unsupported(format!("`{tgt}` output is indexed by `{v}`"))));
        }

        let pair = self.fuse_and_privatize_raw(&tgt, at, &ignore).map_err(at_step(PRIVATIZE_TARGET))?;
        let locals: Vec<String> = pairs.iter().map(|p| p.local_block.clone()).collect();
        let pat = match_reduce_pattern(&self.program, &pair.local_block, &locals).map_err(at_step(MATCH))?;
        let cert = solve_and_validate(&pat)?;

        // Local plain index vars name the same element as the global's loop
        // vars at the same position; the slice loop keeps its name.
        let local = self.program.block(&pair.local_block).unwrap();
        let global = self.program.block(&pair.global_block).unwrap();
        let mut sub: BTreeMap<String, Index> = BTreeMap::new();
        for (lix, gix) in local.store.indices.iter().zip(&global.store.indices) {
            if let Some(u) = lix.as_plain_var() {
                sub.insert(u.to_string(), gix.clone());
            }
        }
        sub.insert(lvar.clone(), Index::var(&lvar));
        let gl: BTreeSet<String> = global.loop_vars().into_iter().collect();
        let mut ops = Vec::new();
        for ((_, ld), p) in pat.r_args.iter().zip(&pairs) {
            if let Some(v) = ld.indices.iter().flat_map(|ix| ix.vars()).find(|v| !sub.contains_key(*v)) {
                return Err((
                    APPLY,
                    ScheduleError::PatternMismatch(format!("`{}` is indexed by `{v}`, which the combination cannot see", ld.tensor)),
                ));
            }
            let idx: Vec<Index> = ld.indices.iter().map(|ix| ix.substitute(&sub)).collect();
            debug_assert!(idx.iter().flat_map(|ix| ix.vars()).all(|v| gl.contains(v)));
            let slice = ScalarExpr::load(&p.local_tensor, idx.clone());
            let full = ScalarExpr::load(&p.tensor, idx[..idx.len() - 1].to_vec());
            ops.push((slice, full));
        }
        let gname = pair.global_block.clone();
        let st = self.program.store_mut(&gname).unwrap();
        let Some((f, ScalarExpr::Load(part))) = st.accumulation().map(|(f, g)| (f, g.clone())) else {
            return Err((APPLY, ScheduleError::PatternMismatch(format!("`{gname}` is not a plain combination"))));
        };
        let part: Load = part;
        st.value = f.combine(ScalarExpr::Load(st.lhs_load()), cert.apply(ScalarExpr::Load(part), &ops));
        place_after_writers(&mut self.program, &gname).map_err(at_step(APPLY))?;
        Ok((pair, cert))
    }

    /// Privatizes `target` and its reduce predecessors over `at` and
    /// repairs the slice partials when combining them. On failure the state
    /// is left untouched.
    pub fn split_k_update(&mut self, target: &str, at: &LoopRef) -> Result<(PrivatizedPair, RepairCertificate), Diagnostic> {
        let diag = |(step, error): (&'static str, ScheduleError)| Diagnostic {
            primitive: "split_k_update".into(),
            target: target.into(),
            step,
            error,
        };
        let mut s = self.clone();
        let out = s.split_k_steps(target, at).map_err(diag)?;
        validate(&s.program).map_err(|e| diag((APPLY, e.into())))?;
        *self = s;
        Ok(out)
    }
}
