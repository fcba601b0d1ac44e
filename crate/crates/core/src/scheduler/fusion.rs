// SPDX-License-Identifier: Apache-2.0
//! Moving a whole top-level nest under a loop of another nest.
//!
//! The moved nest's loops are matched against the host by aligning one
//! access both nests make to the same tensor: a moved loop variable whose
//! index equals a dense combination of host loops at or above the target is
//! replaced by that combination (plus a fresh remainder loop when the host
//! walks part of the range below the target). Everything else about the
//! move is a memory-location check; the temporal checks are optional.

use std::collections::{BTreeMap, BTreeSet};

use crate::expr::Index;
use crate::loop_ir::{fresh_name, BlockRef, Loop, Program, Stmt, Store};

use super::{is_under, LoopRef, ScheduleError, ScheduleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    /// The moved nest runs after the host and lands at the end of the loop body.
    Consumer,
    /// The moved nest runs before the host and lands at the start of the loop body.
    Producer,
}

pub(crate) struct FuseOpts<'a> {
    pub dir: Direction,
    pub temporal: bool,
    pub ignore: &'a BTreeSet<String>,
    pub carries: &'a [String],
}

#[derive(Debug, Clone, PartialEq)]
enum BindTo {
    Host(Index),
    /// Host part plus a remainder loop mirroring the named host inner loop.
    HostRem(Index, String, usize),
}

#[derive(Debug, Clone, Default)]
struct Binding {
    map: BTreeMap<String, BindTo>,
    corr: BTreeMap<String, String>,
}

impl Binding {
    fn bind(&mut self, u: &str, to: BindTo) -> Option<()> {
        match self.map.get(u) {
            Some(prev) if *prev != to => None,
            _ => {
                self.map.insert(u.to_string(), to);
                Some(())
            }
        }
    }

    fn relate(&mut self, h: &str, u: &str) -> Option<()> {
        match self.corr.get(h) {
            Some(prev) if prev != u => None,
            _ => {
                self.corr.insert(h.to_string(), u.to_string());
                Some(())
            }
        }
    }
}

struct Ctx<'a> {
    chain: &'a BTreeSet<String>,
    m_ext: BTreeMap<String, usize>,
    host: &'a BTreeMap<String, usize>,
    inner: BTreeMap<String, usize>,
}

impl Ctx<'_> {
    fn ext(&self, v: &str) -> Option<usize> {
        self.host.get(v).or_else(|| self.inner.get(v)).copied()
    }
}

fn bind_access(mi: &[Index], hi: &[Index], cx: &Ctx<'_>) -> Option<Binding> {
    if mi.len() != hi.len() {
        return None;
    }
    let mut b = Binding::default();
    for (em, eh) in mi.iter().zip(hi) {
        if let Some(u) = em.as_plain_var() {
            let mu = *cx.m_ext.get(u)?;
            if eh.constant != 0 {
                return None;
            }
            let (hostp, innerp): (Vec<_>, Vec<_>) = eh.terms.iter().cloned().partition(|(v, _)| cx.host.contains_key(v));
            if hostp.is_empty() {
                let [(h, 1)] = innerp.as_slice() else { return None };
                if cx.inner.get(h) != Some(&mu) {
                    return None;
                }
                b.relate(h, u)?;
                continue;
            }
            if !cx.chain.contains(u) || innerp.len() > 1 {
                return None;
            }
            // The host combination must enumerate u's range exactly once.
            let mut terms: Vec<(i64, usize)> = eh.terms.iter().map(|(v, c)| Some((*c, cx.ext(v)?))).collect::<Option<_>>()?;
            terms.sort();
            let mut radix = 1i64;
            for (c, n) in terms {
                if c != radix {
                    return None;
                }
                radix *= n as i64;
            }
            if radix != mu as i64 {
                return None;
            }
            let host_ix = Index::from_terms(hostp, 0);
            let to = match innerp.first() {
                None => BindTo::Host(host_ix),
                Some((h, 1)) => BindTo::HostRem(host_ix, h.clone(), cx.inner[h]),
                Some(_) => return None,
            };
            b.bind(u, to)?;
        } else {
            if em.constant != eh.constant || em.terms.len() != eh.terms.len() {
                return None;
            }
            for (u, c) in &em.terms {
                let mu = *cx.m_ext.get(u)?;
                let same: Vec<&(String, i64)> = eh.terms.iter().filter(|(_, d)| d == c).collect();
                let [(h, _)] = same.as_slice() else { return None };
                if em.terms.iter().filter(|(_, d)| d == c).count() != 1 {
                    return None;
                }
                if let Some(&n) = cx.host.get(h) {
                    if !cx.chain.contains(u) || mu != n {
                        return None;
                    }
                    b.bind(u, BindTo::Host(Index::var(h)))?;
                } else {
                    if cx.inner.get(h) != Some(&mu) {
                        return None;
                    }
                    b.relate(h, u)?;
                }
            }
        }
    }
    let mut used = BTreeSet::new();
    for to in b.map.values() {
        let (BindTo::Host(ix) | BindTo::HostRem(ix, _, _)) = to;
        for v in ix.vars() {
            if !used.insert(v.to_string()) {
                return None;
            }
        }
        if let BindTo::HostRem(_, h, _) = to {
            if b.corr.contains_key(h) {
                return None;
            }
        }
    }
    if b.corr.values().any(|u| b.map.contains_key(u)) {
        return None;
    }
    Some(b)
}

fn accesses(st: &Store) -> Vec<(&str, &[Index])> {
    let mut out = vec![(st.tensor.as_str(), st.indices.as_slice())];
    for l in st.value.loads() {
        out.push((l.tensor.as_str(), l.indices.as_slice()));
    }
    out
}

pub(crate) fn subst_store(st: &Store, sub: &BTreeMap<String, Index>) -> Store {
    Store {
        name: st.name.clone(),
        tensor: st.tensor.clone(),
        indices: st.indices.iter().map(|ix| ix.substitute(sub)).collect(),
        value: st.value.subst_index_vars(sub),
    }
}

pub(crate) fn subst_stmts(body: &[Stmt], sub: &BTreeMap<String, Index>, rename: &BTreeMap<String, String>) -> Vec<Stmt> {
    body.iter()
        .map(|s| match s {
            Stmt::Loop(l) => Stmt::Loop(Loop {
                var: rename.get(&l.var).cloned().unwrap_or_else(|| l.var.clone()),
                extent: l.extent,
                annotation: l.annotation.clone(),
                body: subst_stmts(&l.body, sub, rename),
            }),
            Stmt::Store(st) => Stmt::Store(subst_store(st, sub)),
        })
        .collect()
}

pub(crate) fn stores_in(body: &[Stmt]) -> Vec<&Store> {
    let mut out = Vec::new();
    for s in body {
        match s {
            Stmt::Store(st) => out.push(st),
            Stmt::Loop(l) => out.extend(stores_in(&l.body)),
        }
    }
    out
}

pub(crate) fn loop_vars_in(body: &[Stmt], out: &mut BTreeSet<String>) {
    for s in body {
        if let Stmt::Loop(l) = s {
            out.insert(l.var.clone());
            loop_vars_in(&l.body, out);
        }
    }
}

/// Wraps a statement list in loops, outermost first.
pub(crate) fn wrap(loops: &[(String, usize)], body: Vec<Stmt>) -> Vec<Stmt> {
    loops.iter().rev().fold(body, |acc, (v, n)| vec![Stmt::Loop(Loop::new(v, *n, acc))])
}

/// Whether `s` holds only blocks from `names` (a carry and its copy loops).
fn only_blocks(s: &Stmt, names: &[String]) -> bool {
    stores_in(std::slice::from_ref(s)).iter().all(|st| names.contains(&st.name))
}

/// Tensor a store pair both touch with at least one of them writing it.
fn conflict(a: &Store, bw: &BTreeSet<String>, br: &BTreeSet<String>, ignore: &BTreeSet<String>) -> Option<String> {
    let ar = a.reads();
    if !ignore.contains(&a.tensor) && (bw.contains(&a.tensor) || br.contains(&a.tensor)) {
        return Some(a.tensor.clone());
    }
    ar.intersection(bw).find(|t| !ignore.contains(*t)).cloned()
}

pub(crate) fn fuse_block(
    p: &Program,
    block: &str,
    l: &[usize],
    o: &FuseOpts<'_>,
) -> Result<Program, ScheduleError> {
    let illegal = |msg: String| Err(ScheduleError::FusionIllegal(msg));
    let blocks = p.blocks();
    let b = blocks.iter().find(|b| b.store.name == block).ok_or_else(|| ScheduleError::UnknownHandle(block.into()))?;
    if is_under(&b.path, l) {
        return Ok(p.clone());
    }
    let (m, h) = (b.path[0], l[0]);
    if m == h {
        return illegal(format!("`{block}` shares the target's nest but lies outside the target loop"));
    }
    match o.dir {
        Direction::Consumer if m < h => return illegal(format!("`{block}` precedes the target nest")),
        Direction::Producer if m > h => return illegal(format!("`{block}` follows the target nest")),
        _ => {}
    }
    let Stmt::Loop(top) = &p.body[m] else {
        return Err(ScheduleError::Unsupported(format!("`{block}` is not inside a loop")));
    };
    let mut chain: Vec<(String, usize)> = Vec::new();
    let mut cur = top;
    loop {
        chain.push((cur.var.clone(), cur.extent));
        match cur.body.as_slice() {
            [Stmt::Loop(next)] => cur = next,
            _ => break,
        }
    }
    let chain_set: BTreeSet<String> = chain.iter().map(|c| c.0.clone()).collect();
    let host: Vec<(String, usize)> = (1..=l.len())
        .map(|d| {
            let lp = p.loop_at(&l[..d]);
            (lp.var.clone(), lp.extent)
        })
        .collect();
    let host_ext: BTreeMap<String, usize> = host.iter().cloned().collect();

    let mblocks: Vec<&BlockRef<'_>> = blocks.iter().filter(|x| x.path[0] == m).collect();
    let hblocks: Vec<&BlockRef<'_>> = blocks.iter().filter(|x| x.path[0] == h).collect();
    let hin: Vec<&BlockRef<'_>> = hblocks.iter().copied().filter(|x| is_under(&x.path, l)).collect();
    let hbefore: Vec<&BlockRef<'_>> =
        hblocks.iter().copied().filter(|x| !is_under(&x.path, l) && x.path.as_slice() < l).collect();
    let hafter: Vec<&BlockRef<'_>> =
        hblocks.iter().copied().filter(|x| !is_under(&x.path, l) && x.path.as_slice() > l).collect();

    let mut best: Option<(usize, Binding)> = None;
    for mb in &mblocks {
        for hb in &hin {
            let cx = Ctx {
                chain: &chain_set,
                m_ext: mb.loops.iter().map(|x| (x.var.clone(), x.extent)).collect(),
                host: &host_ext,
                inner: hb.loops[l.len()..].iter().map(|x| (x.var.clone(), x.extent)).collect(),
            };
            for (t, mi) in accesses(mb.store) {
                for (t2, hi) in accesses(hb.store) {
                    if t != t2 {
                        continue;
                    }
                    if let Some(bd) = bind_access(mi, hi, &cx) {
                        let score = bd.map.len();
                        if best.as_ref().map_or(true, |(s, _)| score > *s) {
                            best = Some((score, bd));
                        }
                    }
                }
            }
        }
    }
    let bind = match best {
        Some((s, b)) if s > 0 => b,
        _ => return illegal(format!("no access of `{block}` lines up with the loops around the target")),
    };

    let mut used: BTreeSet<String> = BTreeSet::new();
    for to in bind.map.values() {
        let (BindTo::Host(ix) | BindTo::HostRem(ix, _, _)) = to;
        used.extend(ix.vars().map(str::to_string));
    }
    if let Some((v, _)) = host.iter().find(|(v, _)| !used.contains(v)) {
        if mblocks.iter().any(|b| b.store.accumulating_reducer().is_some()) {
            return illegal(format!("`{block}` accumulates and would be repeated across `{v}`"));
        }
    }

    // Loop variables: bound ones disappear, remainders are fresh, kept ones
    // are renamed only when they would shadow a host loop.
    let scope: BTreeSet<String> = host.iter().map(|h| h.0.clone()).collect();
    let mut all_m = BTreeSet::new();
    loop_vars_in(std::slice::from_ref(&p.body[m]), &mut all_m);
    let mut taken: BTreeSet<String> = scope.clone();
    taken.extend(all_m.iter().filter(|v| !bind.map.contains_key(*v)).cloned());
    let mut sub: BTreeMap<String, Index> = BTreeMap::new();
    let mut rename: BTreeMap<String, String> = BTreeMap::new();
    let mut corr = bind.corr.clone();
    let mut new_loops: Vec<(String, usize)> = Vec::new();
    for (u, n) in &chain {
        match bind.map.get(u) {
            Some(BindTo::Host(ix)) => {
                sub.insert(u.clone(), ix.clone());
            }
            Some(BindTo::HostRem(ix, hv, ext)) => {
                let r = fresh_name(u, |x| taken.contains(x));
                taken.insert(r.clone());
                sub.insert(u.clone(), ix.add(&Index::var(&r)));
                corr.insert(hv.clone(), r.clone());
                new_loops.push((r, *ext));
            }
            None => {
                let r = if scope.contains(u) { fresh_name(u, |x| taken.contains(x)) } else { u.clone() };
                taken.insert(r.clone());
                if r != *u {
                    sub.insert(u.clone(), Index::var(&r));
                }
                new_loops.push((r, *n));
            }
        }
    }
    for v in all_m.iter().filter(|v| !chain_set.contains(*v) && scope.contains(*v)) {
        let r = fresh_name(v, |x| taken.contains(x));
        taken.insert(r.clone());
        rename.insert(v.clone(), r.clone());
        sub.insert(v.clone(), Index::var(&r));
        for c in corr.values_mut() {
            if c == v {
                *c = r.clone();
            }
        }
    }
    let moved_body = wrap(&new_loops, subst_stmts(&cur.body, &sub, &rename));

    let moved = stores_in(&moved_body);
    let mw: BTreeSet<String> = moved.iter().map(|s| s.tensor.clone()).filter(|t| !o.ignore.contains(t)).collect();
    let mr: BTreeSet<String> =
        moved.iter().flat_map(|s| s.reads()).filter(|t| !o.ignore.contains(t)).collect();

    for s in blocks.iter().filter(|x| x.path[0] > m.min(h) && x.path[0] < m.max(h)) {
        if let Some(t) = conflict(s.store, &mw, &mr, o.ignore) {
            return illegal(format!("`{}` lies in between and also touches `{t}`", s.store.name));
        }
    }
    let renamed = |ix: &[Index]| -> Vec<Index> { ix.iter().map(|i| i.rename(&corr)).collect() };
    match o.dir {
        Direction::Consumer => {
            for hb in &hafter {
                if let Some(t) = conflict(hb.store, &mw, &mr, o.ignore) {
                    return illegal(format!("`{}` runs after the target loop and touches `{t}`", hb.store.name));
                }
            }
            for hb in hin.iter().chain(&hbefore) {
                let hw = &hb.store.tensor;
                let hr = hb.store.reads();
                if let Some(t) = mw.iter().find(|t| *t == hw || hr.contains(*t)) {
                    return illegal(format!("`{block}` writes `{t}`, which `{}` uses in the same iteration", hb.store.name));
                }
                if !mr.contains(hw) {
                    continue;
                }
                let want = renamed(&hb.store.indices);
                for st in &moved {
                    for ld in st.value.loads().into_iter().filter(|x| x.tensor == *hw) {
                        if ld.indices != want {
                            return illegal(format!(
                                "`{}` reads `{hw}` at a different location than `{}` writes it",
                                st.name, hb.store.name
                            ));
                        }
                    }
                }
                if o.temporal {
                    for lp in hb.loops.iter().filter(|x| host_ext.contains_key(&x.var)) {
                        if !hb.store.indices.iter().any(|ix| ix.mentions(&lp.var)) {
                            return illegal(format!(
                                "`{}` is still accumulating `{hw}` across `{}`",
                                hb.store.name, lp.var
                            ));
                        }
                    }
                }
            }
        }
        Direction::Producer => {
            for hb in &hblocks {
                if mr.contains(&hb.store.tensor) {
                    return illegal(format!("`{block}` reads `{}`, which `{}` writes", hb.store.tensor, hb.store.name));
                }
            }
            for hb in hbefore.iter().chain(&hafter) {
                if let Some(t) = conflict(hb.store, &mw, &BTreeSet::new(), o.ignore) {
                    return illegal(format!("`{}` uses `{t}` outside the target loop", hb.store.name));
                }
            }
            for hb in &hin {
                if mw.contains(&hb.store.tensor) {
                    return illegal(format!("`{}` also writes `{}`", hb.store.name, hb.store.tensor));
                }
                for ld in hb.store.value.loads().into_iter().filter(|x| mw.contains(&x.tensor)) {
                    let got = renamed(&ld.indices);
                    for st in moved.iter().filter(|s| s.tensor == ld.tensor) {
                        if st.indices != got {
                            return illegal(format!(
                                "`{}` reads `{}` at a different location than `{}` writes it",
                                hb.store.name, ld.tensor, st.name
                            ));
                        }
                    }
                }
            }
            if o.temporal {
                for mb in mblocks.iter().filter(|b| b.store.accumulating_reducer().is_some()) {
                    if let Some(v) = mb.reduce_vars().iter().find(|v| bind.map.contains_key(*v)) {
                        return illegal(format!("`{}` would be split across the target loop at `{v}`", mb.store.name));
                    }
                }
            }
        }
    }
    drop(moved);

    let mut out = p.clone();
    let mut lpath = l.to_vec();
    out.body.remove(m);
    if m < h {
        lpath[0] -= 1;
    }
    let body = out.body_mut(&lpath);
    let pos = match o.dir {
        Direction::Producer => 0,
        Direction::Consumer => body.iter().position(|s| only_blocks(s, o.carries)).unwrap_or(body.len()),
    };
    body.splice(pos..pos, moved_body);
    Ok(out)
}

impl ScheduleState {
    pub(crate) fn fuse_raw(
        &mut self,
        block: &str,
        at: &LoopRef,
        dir: Direction,
        temporal: bool,
        ignore: &BTreeSet<String>,
    ) -> Result<(), ScheduleError> {
        let block = self.resolve_block(block)?;
        let l = self.resolve_loop(at)?;
        let carries = self.carry_blocks();
        let opts = FuseOpts { dir, temporal, ignore, carries: &carries };
        self.program = fuse_block(&self.program, &block, &l, &opts)?;
        Ok(())
    }

    /// Naive loop fusion: memory-location checks only.
    pub fn fuse(&mut self, block: &str, at: &LoopRef) -> Result<(), ScheduleError> {
        self.transact(|s| s.fuse_raw(block, at, Direction::Consumer, false, &BTreeSet::new()))
    }

    /// Moves a producer nest to the start of `at`'s body, keeping every dependence.
    pub fn compute_at(&mut self, block: &str, at: &LoopRef) -> Result<(), ScheduleError> {
        self.transact(|s| s.fuse_raw(block, at, Direction::Producer, true, &BTreeSet::new()))
    }

    /// Moves a consumer nest to the end of `at`'s body, keeping every dependence.
    pub fn reverse_compute_at(&mut self, block: &str, at: &LoopRef) -> Result<(), ScheduleError> {
        self.transact(|s| s.fuse_raw(block, at, Direction::Consumer, true, &BTreeSet::new()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpreter::{interpret, random_inputs};
    use crate::loop_ir::{equivalent_modulo_names, parse_program};
    use crate::scheduler::fixtures::softmax;

    fn at(b: &str, v: &str) -> LoopRef {
        LoopRef { block: b.into(), var: v.into() }
    }

    #[test]
    fn naive_fusion_of_softmax() {
        let mut s = ScheduleState::new(softmax());
        s.fuse("s_exp", &at("s_max", "j")).unwrap();
        s.fuse("s_sum", &at("s_max", "j")).unwrap();
        let want = parse_program(
            "\
tensor inp: f32[2, 4] input
tensor xmax: f32[2]
tensor xexp: f32[2, 4]
tensor xsum: f32[2] output
for i, j in grid(2, 4):
    # s_max:
    xmax[i] = max(xmax[i], inp[i, j])
    # s_exp:
    xexp[i, j] = exp(inp[i, j] - xmax[i])
    # s_sum:
    xsum[i] += xexp[i, j]
",
        )
        .unwrap();
        equivalent_modulo_names(&s.program, &want).unwrap();
        // Naive fusion really is wrong here: it reads the running maximum.
        let x = random_inputs(&softmax(), 3, -2.0, 2.0);
        let a = interpret(&softmax(), &x).unwrap();
        let b = interpret(&s.program, &x).unwrap();
        assert_ne!(a["xsum"], b["xsum"]);
    }

    #[test]
    fn fusing_twice_is_a_no_op() {
        let mut s = ScheduleState::new(softmax());
        s.fuse("s_exp", &at("s_max", "j")).unwrap();
        let before = s.program.clone();
        s.fuse("s_exp", &at("s_max", "j")).unwrap();
        assert_eq!(s.program, before);
    }

    #[test]
    fn temporal_checks_reject_reading_a_running_reduction() {
        let mut s = ScheduleState::new(softmax());
        let before = s.program.clone();
        let e = s.reverse_compute_at("s_exp", &at("s_max", "j")).unwrap_err();
        assert!(matches!(e, ScheduleError::FusionIllegal(_)), "{e}");
        assert_eq!(s.program, before);
    }

    #[test]
    fn elementwise_consumer_fuses_and_keeps_semantics() {
        let src = "\
tensor a: f32[8, 4] input
tensor b: f32[8, 4]
tensor c: f32[8, 4] output
for i in range(8):
    for j in range(4):
        # mk:
        b[i, j] = a[i, j] * 2
for i in range(8):
    for j in range(4):
        # use:
        c[i, j] = b[i, j] + a[i, j]
";
        let p = parse_program(src).unwrap();
        for var in ["i", "j"] {
            let mut s = ScheduleState::new(p.clone());
            s.reverse_compute_at("use", &at("mk", var)).unwrap();
            assert_eq!(s.program.body.len(), 1);
            let x = random_inputs(&p, 1, -1.0, 1.0);
            assert_eq!(interpret(&p, &x).unwrap(), interpret(&s.program, &x).unwrap());
        }
    }

    #[test]
    fn tiled_host_splits_the_consumer_range() {
        let src = "\
tensor a: f32[8] input
tensor b: f32[8]
tensor c: f32[8] output
for i0, i1 in grid(2, 4):
    # mk:
    b[i0 * 4 + i1] = exp(a[i0 * 4 + i1])
for i in range(8):
    # use:
    c[i] = b[i] * 3
";
        let p = parse_program(src).unwrap();
        let mut s = ScheduleState::new(p.clone());
        s.reverse_compute_at("use", &at("mk", "i0")).unwrap();
        let want = parse_program(
            "\
tensor a: f32[8] input
tensor b: f32[8]
tensor c: f32[8] output
for i0 in range(2):
    for i1 in range(4):
        # mk:
        b[i0 * 4 + i1] = exp(a[i0 * 4 + i1])
    for i in range(4):
        # use:
        c[i0 * 4 + i] = b[i0 * 4 + i] * 3
",
        )
        .unwrap();
        equivalent_modulo_names(&s.program, &want).unwrap();
    }

    #[test]
    fn writer_into_read_location_is_rejected() {
        // `w` overwrites the cell `r` read at another location in the same iteration.
        let src = "\
tensor a: f32[4] input
tensor t: f32[4]
tensor o: f32[4] output
for i in range(4):
    # r:
    o[i] = t[3 - i] + a[i]
for i in range(4):
    # w:
    t[i] = a[i]
";
        let p = parse_program(src).unwrap();
        let mut s = ScheduleState::new(p);
        let e = s.fuse("w", &at("r", "i")).unwrap_err();
        assert!(matches!(e, ScheduleError::FusionIllegal(_)));
    }

    #[test]
    fn compute_at_places_producer_first() {
        let src = "\
tensor a: f32[4, 2] input
tensor s: f32[4, 2]
tensor o: f32[4] output
for i, k in grid(4, 2):
    # cp:
    s[i, k] = a[i, k]
for i in range(4):
    for k in range(2):
        # acc:
        o[i] += s[i, k]
";
        let p = parse_program(src).unwrap();
        let mut s = ScheduleState::new(p.clone());
        s.compute_at("cp", &at("acc", "i")).unwrap();
        assert_eq!(s.program.body.len(), 1);
        assert_eq!(s.program.block("cp").unwrap().path, vec![0, 0, 0]);
        let x = random_inputs(&p, 5, -1.0, 1.0);
        assert_eq!(interpret(&p, &x).unwrap(), interpret(&s.program, &x).unwrap());
    }
}
