// SPDX-License-Identifier: Apache-2.0
//! Tensorization: each store's inner loop chain is replaced by one tile
//! store, shrinking the chain from the outside until the store fits.
//!
//! Dimension order is reconciled against the target layout `T`: the inner
//! variables of the stored tile in its dimension order, then the reduced
//! inner variables. Every read becomes a tile whose point axes come first
//! and whose slice axes follow `T`, with `None` axes standing in for target
//! variables it does not depend on; reductions then act on the trailing
//! axes.

use std::collections::{BTreeMap, HashMap};

use crate::expr::{Index, Load, Reducer, ScalarExpr};
use crate::loop_ir::{Program, Store};

use super::relax::{chain_start, with_stores, Enclosing};
use super::{lift, lift_expr, relax_access, Shrink, TileAccess, TileExpr, TileIdx, TileLoop, TileProgram, TileStmt, TileStore};

/// Largest number of written elements enumerated when checking whether a
/// stored tile overlaps across outer iterations.
const OVERLAP_LIMIT: usize = 1 << 22;

/// Why a store kept some of its inner loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub store: String,
    /// Loops kept as loops, outermost first.
    pub kept: Vec<String>,
    pub reason: String,
}

struct Ctx {
    writers: BTreeMap<String, usize>,
}

type Attempt<T> = Result<T, (usize, String)>;

fn scalar(e: &TileExpr) -> ScalarExpr {
    let b = |e: &TileExpr| Box::new(scalar(e));
    match e {
        TileExpr::Lit(v) => ScalarExpr::Lit(*v),
        TileExpr::Var(v) => ScalarExpr::Var(v.clone()),
        TileExpr::Access(a) => ScalarExpr::Load(Load { tensor: a.tensor.clone(), indices: points(a) }),
        TileExpr::Bin(op, x, y) => ScalarExpr::Bin(*op, b(x), b(y)),
        TileExpr::Un(op, x) => ScalarExpr::Un(*op, b(x)),
        TileExpr::Select(c, x, y) => ScalarExpr::Select(
            Box::new(crate::expr::Cond { clauses: c.iter().map(|(op, l, r)| (*op, scalar(l), scalar(r))).collect() }),
            b(x),
            b(y),
        ),
        TileExpr::Reduce { .. } | TileExpr::Permute { .. } => unreachable!("only scalar stores are tensorized"),
    }
}

fn points(a: &TileAccess) -> Vec<Index> {
    a.idx
        .iter()
        .map(|ix| match ix {
            TileIdx::Point(p) => p.clone(),
            _ => unreachable!("only scalar stores are tensorized"),
        })
        .collect()
}

/// Inner variable of each dimension of a relaxed access.
fn dim_vars(l: &Load, inner: &[(String, usize)]) -> Vec<Option<String>> {
    l.indices.iter().map(|ix| inner.iter().find(|(v, _)| ix.mentions(v)).map(|(v, _)| v.clone())).collect()
}

/// `l` as a tile laid out per `target`; `start` is the first target
/// position it must carry an axis for.
fn reconcile(l: &Load, inner: &[(String, usize)], target: &[String], start: Option<usize>) -> TileExpr {
    let mut t = relax_access(l, inner).expect("relaxed before reconciling");
    let tpos = |v: &str| target.iter().position(|u| u == v).unwrap();
    let mut keys: Vec<Option<usize>> = dim_vars(l, inner).iter().map(|v| v.as_deref().map(tpos)).collect();
    let first = keys.iter().flatten().min().copied().unwrap_or(target.len());
    let from = start.unwrap_or(first).min(first);
    for q in from..target.len() {
        if keys.contains(&Some(q)) {
            continue;
        }
        let at = keys.iter().position(|k| matches!(k, Some(p) if *p > q)).unwrap_or(keys.len());
        keys.insert(at, Some(q));
        t.idx.insert(at, TileIdx::None);
    }
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&k| (keys[k].is_some(), keys[k]));
    let access = TileExpr::Access(t);
    if order.iter().enumerate().all(|(k, &o)| k == o) {
        access
    } else {
        TileExpr::Permute { order, arg: Box::new(access) }
    }
}

fn map_loads(e: &ScalarExpr, f: &mut impl FnMut(&Load) -> TileExpr) -> TileExpr {
    let mut b = |e: &ScalarExpr| Box::new(map_loads(e, f));
    match e {
        ScalarExpr::Load(l) => f(l),
        ScalarExpr::Lit(v) => TileExpr::Lit(*v),
        ScalarExpr::Var(v) => TileExpr::Var(v.clone()),
        ScalarExpr::Bin(op, x, y) => {
            let x = b(x);
            TileExpr::Bin(*op, x, b(y))
        }
        ScalarExpr::Un(op, x) => TileExpr::Un(*op, b(x)),
        ScalarExpr::Select(c, x, y) => {
            let clauses = c.clauses.iter().map(|(op, l, r)| (*op, map_loads(l, f), map_loads(r, f))).collect();
            let x = Box::new(map_loads(x, f));
            TileExpr::Select(clauses, x, Box::new(map_loads(y, f)))
        }
    }
}

/// Distinct outer iterations write disjoint elements, and (when any outer
/// loop is annotated) no element is written under two parallel iterations.
/// `None` when enumeration would exceed [`OVERLAP_LIMIT`].
fn overlaps(lhs: &TileAccess, outer: &[Enclosing]) -> Option<(bool, bool)> {
    let tile: usize = lhs.shape().iter().product();
    let iters: usize = outer.iter().map(|l| l.extent).product();
    if iters.saturating_mul(tile) > OVERLAP_LIMIT {
        return None;
    }
    let mut seen: HashMap<Vec<i64>, Vec<i64>> = HashMap::new();
    let (mut any, mut parallel) = (false, false);
    for n in 0..iters {
        let mut rest = n;
        let mut at = vec![0i64; outer.len()];
        for k in (0..outer.len()).rev() {
            at[k] = (rest % outer[k].extent) as i64;
            rest /= outer[k].extent;
        }
        let env = |v: &str| outer.iter().position(|l| l.var == v).map(|k| at[k]);
        let par: Vec<i64> = outer.iter().zip(&at).filter(|(l, _)| l.annotated).map(|(_, a)| *a).collect();
        for e in lhs.elements(&env)? {
            if let Some(prev) = seen.insert(e, par.clone()) {
                any = true;
                parallel |= prev != par;
            }
        }
    }
    Some((any, parallel))
}

fn shrink_err(inner: &[(String, usize)], what: String) -> impl FnOnce(Shrink) -> (usize, String) + '_ {
    move |Shrink(vs)| (vs.len(), format!("{what} is not a tile over {}", join(&inner[..vs.len()])))
}

fn join(v: &[(String, usize)]) -> String {
    v.iter().map(|(n, _)| format!("`{n}`")).collect::<Vec<_>>().join(", ")
}

fn attempt(s: &Store, outer: &[Enclosing], inner: &[(String, usize)], ctx: &Ctx) -> Attempt<TileStore> {
    let pos = |v: &str| inner.iter().position(|(u, _)| u == v);
    if let Some(k) = s.value.free_vars().iter().filter_map(|v| pos(v)).max() {
        return Err((k + 1, format!("`{}` is used as a value", inner[k].0)));
    }
    let me = s.lhs_load();
    let lhs = relax_access(&me, inner).map_err(shrink_err(inner, me.to_string()))?;
    for l in s.value.loads() {
        relax_access(l, inner).map_err(shrink_err(inner, l.to_string()))?;
    }
    let lvars: Vec<String> = dim_vars(&me, inner).into_iter().flatten().collect();
    let reduced: Vec<String> = inner.iter().map(|(v, _)| v.clone()).filter(|v| !lvars.contains(v)).collect();
    let target: Vec<String> = lvars.iter().chain(&reduced).cloned().collect();
    let last_reduced = reduced.iter().filter_map(|v| pos(v)).max().map(|k| k + 1).unwrap_or(0);

    let annotated = outer.iter().any(|l| l.annotated);
    let ov = overlaps(&lhs, outer);
    if annotated && ov.map_or(true, |(_, p)| p) {
        return Err((inner.len(), format!("`{}` tiles overlap across parallel iterations", s.tensor)));
    }

    if reduced.is_empty() {
        if s.value.loads().iter().any(|l| l.tensor == s.tensor && **l != me) {
            return Err((inner.len(), format!("reads `{}` at another element", s.tensor)));
        }
        let value = map_loads(&s.value, &mut |l| reconcile(l, inner, &target, None));
        return Ok(TileStore { name: s.name.clone(), lhs, value });
    }

    let Some((f, g)) = s.accumulation().filter(|(_, g)| !g.reads_tensor(&s.tensor) && !g.loads().is_empty()) else {
        return Err((last_reduced, format!("loops over {} do not accumulate into `{}`", join_names(&reduced), s.tensor)));
    };
    // Summing over a loop no read depends on would count each term once.
    if !matches!(f, Reducer::Max | Reducer::Min) {
        let read: Vec<String> = g.loads().iter().flat_map(|l| dim_vars(l, inner).into_iter().flatten()).collect();
        if let Some(k) = reduced.iter().filter(|v| !read.contains(v)).filter_map(|v| pos(v)).max() {
            return Err((k + 1, format!("no read of the `{}` reduction depends on `{}`", s.tensor, inner[k].0)));
        }
    }
    // Reads with no slice over the target's leading positions would leave the
    // reduced axes out of the broadcast; the first such read carries them.
    let first_of = |l: &Load| {
        dim_vars(l, inner).iter().flatten().map(|v| target.iter().position(|u| u == v).unwrap()).min().unwrap_or(target.len())
    };
    let lead = g.loads().into_iter().min_by_key(|l| first_of(l)).cloned();
    let mut extended = false;
    let tiled = map_loads(g, &mut |l| {
        let start = (!extended && Some(l) == lead.as_ref()).then(|| {
            extended = true;
            0
        });
        reconcile(l, inner, &target, start)
    });
    let rank = tiled.shape().map_err(|e| (inner.len(), e.to_string()))?.len();
    let mut value = tiled;
    for (q, _) in reduced.iter().enumerate().rev() {
        let dim = rank - target.len() + lvars.len() + q;
        value = TileExpr::Reduce { op: f, dim, arg: Box::new(value) };
    }
    let sole = ctx.writers.get(&s.tensor) == Some(&1) && ov == Some((false, false));
    if !sole {
        value = TileExpr::bin(f.binop(), TileExpr::Access(lhs.clone()), value);
    }
    Ok(TileStore { name: s.name.clone(), lhs, value })
}

fn join_names(v: &[String]) -> String {
    v.iter().map(|n| format!("`{n}`")).collect::<Vec<_>>().join(", ")
}

/// Tile store for `st` and the number of chain loops it had to keep.
fn tensorize_store(st: &TileStore, outer: &[Enclosing], chain: &[Enclosing], ctx: &Ctx, rej: &mut Vec<Rejection>) -> (TileStore, usize) {
    let s = Store { name: st.name.clone(), tensor: st.lhs.tensor.clone(), indices: points(&st.lhs), value: scalar(&st.value) };
    let mut cut = 0;
    let mut reasons = Vec::new();
    while cut < chain.len() {
        let mut o = outer.to_vec();
        o.extend_from_slice(&chain[..cut]);
        let inner: Vec<(String, usize)> = chain[cut..].iter().map(|l| (l.var.clone(), l.extent)).collect();
        match attempt(&s, &o, &inner, ctx) {
            Ok(t) => {
                push_rejection(rej, st, chain, cut, reasons);
                return (t, cut);
            }
            Err((k, why)) => {
                cut += k.max(1);
                reasons.push(why);
            }
        }
    }
    push_rejection(rej, st, chain, cut, reasons);
    (TileStore { name: s.name.clone(), lhs: st.lhs.clone(), value: lift_expr(&s.value) }, cut)
}

fn push_rejection(rej: &mut Vec<Rejection>, st: &TileStore, chain: &[Enclosing], cut: usize, reasons: Vec<String>) {
    if cut > 0 {
        rej.push(Rejection { store: st.name.clone(), kept: chain[..cut].iter().map(|l| l.var.clone()).collect(), reason: reasons.join("; ") });
    }
}

/// Loops of a tensorizable chain starting at `l`, and the store at its end.
fn chain_from(l: &TileLoop) -> Option<(Vec<&TileLoop>, &TileStore)> {
    let mut loops = vec![l];
    let mut cur = l;
    loop {
        if cur.annotation.is_some() || cur.body.len() != 1 {
            return None;
        }
        match &cur.body[0] {
            TileStmt::Store(st) => return Some((loops, st)),
            TileStmt::Loop(next) => {
                loops.push(next);
                cur = next;
            }
        }
    }
}

fn enclosing(l: &TileLoop) -> Enclosing {
    Enclosing { var: l.var.clone(), extent: l.extent, annotated: l.annotation.is_some(), single: l.body.len() == 1 }
}

fn walk(body: &[TileStmt], outer: &mut Vec<Enclosing>, ctx: &Ctx, rej: &mut Vec<Rejection>) -> Vec<TileStmt> {
    body.iter()
        .map(|s| match s {
            TileStmt::Store(st) => TileStmt::Store(st.clone()),
            TileStmt::Loop(l) => match chain_from(l) {
                Some((loops, st)) if st.value.is_scalar() && st.lhs.is_points() => {
                    let chain: Vec<Enclosing> = loops.iter().map(|l| enclosing(l)).collect();
                    debug_assert_eq!(chain_start(&chain), 0);
                    let (t, cut) = tensorize_store(st, outer, &chain, ctx, rej);
                    let mut stmt = TileStmt::Store(t);
                    for l in loops[..cut].iter().rev() {
                        stmt = TileStmt::Loop(TileLoop { var: l.var.clone(), extent: l.extent, annotation: None, body: vec![stmt] });
                    }
                    stmt
                }
                _ => {
                    outer.push(enclosing(l));
                    let body = walk(&l.body, outer, ctx, rej);
                    outer.pop();
                    TileStmt::Loop(TileLoop { body, ..l.clone() })
                }
            },
        })
        .collect()
}

/// Tensorizes every scalar store of `p`, with the stores that kept loops.
pub fn tensorize_report(p: &TileProgram) -> (TileProgram, Vec<Rejection>) {
    let mut writers = BTreeMap::new();
    with_stores(p, &mut |_, st| *writers.entry(st.lhs.tensor.clone()).or_insert(0) += 1);
    let ctx = Ctx { writers };
    let mut rej = Vec::new();
    let body = walk(&p.body, &mut Vec::new(), &ctx, &mut rej);
    (TileProgram { tensors: p.tensors.clone(), body }, rej)
}

pub fn tensorize(p: &TileProgram) -> TileProgram {
    tensorize_report(p).0
}

pub fn translate(p: &Program) -> TileProgram {
    tensorize(&lift(p))
}

/// [`translate`] together with the stores that could not drop all their
/// inner loops.
pub fn translate_report(p: &Program) -> (TileProgram, Vec<Rejection>) {
    tensorize_report(&lift(p))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::frontend::oracle::softmax_denom;
    use crate::interpreter::{compare, interpret, random_inputs, Tensors};
    use crate::loop_ir::parse_program;
    use crate::tile_ir::{interpret_tile, print_tile};

    pub(crate) const PRIVATIZED: &str = include_str!("../../tests/fixtures/privatized.ir");

    const PRIVATIZED_TILE: &str = include_str!("../../tests/fixtures/privatized.tile");

    const TRANSPOSE: &str = include_str!("../../tests/fixtures/transpose.ir");

    // The row maximum accumulates across `j`, so the stored tile keeps its
    // own previous value as an operand.
    const TRANSPOSE_TILE: &str = include_str!("../../tests/fixtures/transpose.tile");

    fn agree(src: &str, seeds: u64) -> TileProgram {
        let p = parse_program(src).unwrap();
        let t = translate(&p);
        for seed in 0..seeds {
            let x = random_inputs(&p, seed, -3.0, 3.0);
            let r = compare(&interpret_tile(&t, &x).unwrap(), &interpret(&p, &x).unwrap(), 1e-12, 1e-12).unwrap();
            assert!(r.pass(), "{r}");
        }
        t
    }

    #[test]
    fn privatized_softmax_tensorizes_to_reduce_stores() {
        let t = agree(PRIVATIZED, 3);
        assert_eq!(print_tile(&t), PRIVATIZED_TILE);
    }

    #[test]
    fn privatized_softmax_matches_the_dense_formula() {
        let p = parse_program(PRIVATIZED).unwrap();
        let x = random_inputs(&p, 7, -5.0, 5.0);
        let want = Tensors::from([("xsum".to_string(), softmax_denom(&x["inp"]))]);
        let r = compare(&interpret_tile(&translate(&p), &x).unwrap(), &want, 1e-14, 0.0).unwrap();
        assert!(r.pass(), "{r}");
    }

    #[test]
    fn transposed_read_gets_a_permute() {
        let t = agree(TRANSPOSE, 3);
        assert_eq!(print_tile(&t), TRANSPOSE_TILE);
    }

    #[test]
    fn translation_is_idempotent() {
        for src in [PRIVATIZED, TRANSPOSE] {
            let t = translate(&parse_program(src).unwrap());
            assert_eq!(tensorize(&t), t);
        }
    }

    #[test]
    fn annotated_program_is_unchanged() {
        let p = parse_program(
            "tensor a: f32[4, 2] input\ntensor b: f32[4, 2] output\nblockIdx.x for i in range(4):\n    vectorized for j in range(2):\n        b[i, j] = a[i, j]\n",
        )
        .unwrap();
        assert_eq!(translate(&p), lift(&p));
    }

    #[test]
    fn elementwise_nest_becomes_one_store() {
        let p = parse_program(
            "tensor a: f32[4, 3] input\ntensor b: f32[3, 4] output\nfor i, j in grid(4, 3):\n    # t:\n    b[j, i] = a[i, j] * 2\n",
        )
        .unwrap();
        let t = agree(&crate::loop_ir::print_loop_ir(&p), 2);
        assert_eq!(t.body.len(), 1);
        let TileStmt::Store(st) = &t.body[0] else { panic!("expected a single store") };
        assert_eq!(st.value.to_string(), "permute(a[0 : 4, 0 : 3], order=(1, 0)) * 2");
    }

    #[test]
    fn recurrence_and_scalar_uses_keep_loops() {
        let src = "\
tensor a: f32[4] input
tensor s: f32[4] output
tensor m: f32[4, 4] output
for i in range(4):
    # scan:
    s[i] = a[i] * 0.5
for i in range(3):
    # shift:
    s[i + 1] = s[i + 1] + s[i]
for i, j in grid(4, 4):
    # mask:
    m[i, j] = select(j <= i, a[j], 0)
";
        let p = parse_program(src).unwrap();
        let (t, rej) = translate_report(&p);
        let names: Vec<&str> = rej.iter().map(|r| r.store.as_str()).collect();
        assert_eq!(names, ["shift", "mask"]);
        assert_eq!(rej[0].kept, ["i"]);
        assert_eq!(rej[1].kept, ["i", "j"]);
        assert!(rej[1].reason.contains("`j` is used as a value"));
        for seed in 0..2 {
            let x = random_inputs(&p, seed, -1.0, 1.0);
            assert_eq!(interpret_tile(&t, &x).unwrap(), interpret(&p, &x).unwrap());
        }
    }

    #[test]
    fn accumulation_across_outer_iterations_keeps_the_operand() {
        let src = "\
tensor a: f32[4, 6] input
tensor s: f32[4] output
for j0 in range(2):
    for i, j1 in grid(4, 3):
        # acc:
        s[i] += a[i, j0 * 3 + j1]
";
        let t = agree(src, 2);
        assert_eq!(t.store("acc").unwrap().value.to_string(), "s[0 : 4] + reduce(+, a[0 : 4, j0 * 3 : j0 * 3 + 3], dim=1)");
    }

    #[test]
    fn reads_missing_leading_target_axes_are_broadcast() {
        let src = "\
tensor a: f32[3] input
tensor s: f32[4] output
for i, j in grid(4, 3):
    # acc:
    s[i] += a[j]
for i, j in grid(4, 3):
    # cst:
    s[i] += 2
";
        let t = agree(src, 2);
        assert_eq!(t.store("acc").unwrap().value.to_string(), "s[0 : 4] + reduce(+, a[None, 0 : 3], dim=1)");
    }
}
