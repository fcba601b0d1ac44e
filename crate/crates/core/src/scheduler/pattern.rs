// SPDX-License-Identifier: Apache-2.0

use crate::expr::{Cond, Load, Reducer, ScalarExpr};
use crate::loop_ir::Program;

use super::ScheduleError;

/// `X = X f G` with `G` abstracted into `g(r..., c...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducePattern {
    pub f: Reducer,
    pub g: ScalarExpr,
    /// Argument name and the load it stands for, one per predecessor, in
    /// the order the predecessors were given.
    pub r_args: Vec<(String, Load)>,
    /// Constant arguments: maximal subtrees free of predecessor reads.
    pub c_args: Vec<(String, ScalarExpr)>,
}

fn r_names(k: usize) -> Vec<String> {
    match k {
        1 => vec!["x".to_string()],
        _ if k < 10 => (1..=k).map(|i| format!("x{i}")).collect(),
        _ => (1..=k).map(|i| format!("x{i:03}")).collect(),
    }
}

fn has_operand(e: &ScalarExpr) -> bool {
    let mut found = false;
    e.visit(&mut |x| found |= matches!(x, ScalarExpr::Load(_) | ScalarExpr::Var(_)));
    found
}

fn abstract_expr(e: &ScalarExpr, rs: &[(String, Load)], cs: &mut Vec<(String, ScalarExpr)>) -> ScalarExpr {
    if let ScalarExpr::Load(l) = e {
        if let Some((n, _)) = rs.iter().find(|(_, x)| x == l) {
            return ScalarExpr::var(n);
        }
    }
    let mut has_r = false;
    e.for_each_load(&mut |l| has_r |= rs.iter().any(|(_, x)| x == l));
    if !has_r {
        if !has_operand(e) {
            return e.clone();
        }
        if let Some((n, _)) = cs.iter().find(|(_, x)| x == e) {
            return ScalarExpr::var(n);
        }
        let n = format!("c{}", cs.len() + 1);
        cs.push((n.clone(), e.clone()));
        return ScalarExpr::var(&n);
    }
    match e {
        ScalarExpr::Bin(op, a, b) => ScalarExpr::bin(*op, abstract_expr(a, rs, cs), abstract_expr(b, rs, cs)),
        ScalarExpr::Un(op, a) => ScalarExpr::un(*op, abstract_expr(a, rs, cs)),
        ScalarExpr::Select(c, a, b) => {
            let cond = Cond {
                clauses: c
                    .clauses
                    .iter()
                    .map(|(op, l, r)| (*op, abstract_expr(l, rs, cs), abstract_expr(r, rs, cs)))
                    .collect(),
            };
            ScalarExpr::select(cond, abstract_expr(a, rs, cs), abstract_expr(b, rs, cs))
        }
        ScalarExpr::Lit(_) | ScalarExpr::Var(_) | ScalarExpr::Load(_) => e.clone(),
    }
}

/// Matches `block`'s store against `X = X f g(r..., c...)`, where every
/// `r` is a read of one of `preds`' outputs at a location that does not
/// depend on the reduction loops of `block`.
pub fn match_reduce_pattern(p: &Program, block: &str, preds: &[String]) -> Result<ReducePattern, ScheduleError> {
    let mismatch = |m: String| Err(ScheduleError::PatternMismatch(m));
    let b = p.block(block).ok_or_else(|| ScheduleError::UnknownHandle(block.into()))?;
    let Some((f, g)) = b.store.accumulation() else {
        return mismatch(format!("`{block}` is not of the form X = X f G with a known reducer"));
    };
    if g.reads_tensor(&b.store.tensor) {
        return mismatch(format!("`{}` appears on the right of the reducer", b.store.tensor));
    }
    if preds.is_empty() {
        return mismatch(format!("`{block}` has no predecessor to supply an r argument"));
    }
    let reduce = b.reduce_vars();
    let names = r_names(preds.len());
    let mut r_args = Vec::new();
    for (pred, name) in preds.iter().zip(names) {
        let t = &p.block(pred).ok_or_else(|| ScheduleError::UnknownHandle(pred.clone()))?.store.tensor;
        let loads: Vec<&Load> = g.loads().into_iter().filter(|l| &l.tensor == t).collect();
        let Some(first) = loads.first() else {
            return mismatch(format!("`{block}` does not read `{t}` directly"));
        };
        if loads.iter().any(|l| l != first) {
            return mismatch(format!("`{t}` is read at several locations"));
        }
        if let Some(v) = reduce.iter().find(|v| first.indices.iter().any(|ix| ix.mentions(v))) {
            return mismatch(format!("`{t}` is indexed by the reduction loop `{v}`"));
        }
        r_args.push((name, (*first).clone()));
    }
    let mut c_args = Vec::new();
    let ga = abstract_expr(g, &r_args, &mut c_args);
    Ok(ReducePattern { f, g: ga, r_args, c_args })
}
