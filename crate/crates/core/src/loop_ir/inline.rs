// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use crate::expr::{Index, ScalarExpr};

use super::{IrError, Program, Role, Stmt};

/// Replaces `consumer`'s reads of `producer`'s tensor with the producer's
/// value expression. The producer goes away once nothing else reads its
/// tensor (outputs are always kept).
pub fn inline_nest(p: &Program, producer: &str, consumer: &str) -> Result<Program, IrError> {
    let blocks = p.blocks();
    let pi = blocks.iter().position(|b| b.store.name == producer).ok_or_else(|| IrError::UnknownBlock(producer.into()))?;
    let ci = blocks.iter().position(|b| b.store.name == consumer).ok_or_else(|| IrError::UnknownBlock(consumer.into()))?;
    let pb = &blocks[pi];
    let st = pb.store;
    let t = st.tensor.as_str();
    let fail = |why: String| Err(IrError::NotInlinable(format!("`{producer}` into `{consumer}`: {why}")));

    if !pb.reduce_vars().is_empty() || st.value.reads_tensor(t) {
        return fail("producer is a reduction".into());
    }
    if pi >= ci {
        return fail("producer does not precede the consumer".into());
    }
    if !blocks[ci].store.value.reads_tensor(t) {
        return fail(format!("consumer does not read `{t}`"));
    }
    if p.writers(t).len() != 1 {
        return fail(format!("`{t}` has several writers"));
    }
    // Every producer loop must index the output through a distinct plain
    // variable so that a consumer index maps back to one producer iteration.
    let mut dims = Vec::new();
    for ix in &st.indices {
        match ix.as_plain_var() {
            Some(v) if pb.loops.iter().any(|l| l.var == v) && !dims.contains(&v) => dims.push(v),
            _ => return fail(format!("store index `{ix}` is not a distinct loop variable")),
        }
    }
    let reads = st.reads();
    for (k, b) in blocks.iter().enumerate().take(ci + 1).skip(pi + 1) {
        if reads.contains(&b.store.tensor) {
            return fail(format!("`{}` overwrites `{}` in between", blocks[k].store.name, b.store.tensor));
        }
    }

    let value = st.value.clone();
    let mut out = p.clone();
    let cpath = blocks[ci].path.clone();
    drop(blocks);
    let Stmt::Store(cs) = out.stmt_mut(&cpath) else { unreachable!() };
    cs.value = cs.value.map(&mut |e| match e {
        ScalarExpr::Load(l) if l.tensor == t => {
            let map: BTreeMap<String, Index> =
                dims.iter().zip(&l.indices).map(|(v, ix)| (v.to_string(), ix.clone())).collect();
            value.subst_index_vars(&map)
        }
        other => other,
    });

    let keep = out.decl(t).map(|d| d.role == Role::Output).unwrap_or(false) || !out.readers(t).is_empty();
    if !keep {
        let path = out.block(producer).unwrap().path;
        out.remove_stmt(&path);
        let only = BTreeSet::from([t.to_string()]);
        out.tensors.retain(|d| !only.contains(&d.name));
    }
    Ok(out)
}
