// SPDX-License-Identifier: Apache-2.0
//! AST partitioning and access relaxation.

use std::collections::BTreeMap;

use crate::expr::Load;
use crate::loop_ir::Program;

use super::{lift, TileAccess, TileIdx, TileProgram, TileStmt};

/// A store with the loops above it split into outer loops, which stay, and
/// the perfect inner nest a tile store can replace.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub outer: Vec<(String, usize)>,
    pub inner: Vec<(String, usize)>,
    pub store: String,
}

/// Outermost inner loops that have to become outer loops before the access
/// is a tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shrink(pub Vec<String>);

/// Loops around a store, outermost first, with flags needed by the tensorizer.
#[derive(Debug, Clone)]
pub(crate) struct Enclosing {
    pub var: String,
    pub extent: usize,
    pub annotated: bool,
    pub single: bool,
}

/// Start of the inner chain: loops from here on are unannotated and each is
/// the only statement of its parent.
pub(crate) fn chain_start(loops: &[Enclosing]) -> usize {
    let mut k = loops.len();
    while k > 0 && !loops[k - 1].annotated && loops[k - 1].single {
        k -= 1;
    }
    k
}

pub(crate) fn with_stores(p: &TileProgram, f: &mut impl FnMut(&[Enclosing], &super::TileStore)) {
    fn walk(body: &[TileStmt], stack: &mut Vec<Enclosing>, f: &mut impl FnMut(&[Enclosing], &super::TileStore)) {
        for s in body {
            match s {
                TileStmt::Loop(l) => {
                    stack.push(Enclosing {
                        var: l.var.clone(),
                        extent: l.extent,
                        annotated: l.annotation.is_some(),
                        single: l.body.len() == 1,
                    });
                    walk(&l.body, stack, f);
                    stack.pop();
                }
                TileStmt::Store(st) => f(stack, st),
            }
        }
    }
    walk(&p.body, &mut Vec::new(), f);
}

pub fn partition_ast(p: &Program) -> Vec<Partition> {
    let mut out = Vec::new();
    with_stores(&lift(p), &mut |loops, st| {
        let k = chain_start(loops);
        let pair = |l: &Enclosing| (l.var.clone(), l.extent);
        out.push(Partition {
            outer: loops[..k].iter().map(pair).collect(),
            inner: loops[k..].iter().map(pair).collect(),
            store: st.name.clone(),
        });
    });
    out
}

/// Relaxes `load` over the `inner` loops (outermost first). Each inner
/// variable may appear in one dimension and each dimension may hold one
/// inner variable; otherwise the image is not an axis-aligned tile of the
/// same rank, and the shortest prefix of `inner` whose removal fixes that is
/// returned.
pub fn relax_access(load: &Load, inner: &[(String, usize)]) -> Result<TileAccess, Shrink> {
    let pos: BTreeMap<&str, usize> = inner.iter().enumerate().map(|(k, (v, _))| (v.as_str(), k)).collect();
    let mut cut = 0;
    let mut dims_of: BTreeMap<usize, usize> = BTreeMap::new();
    for ix in &load.indices {
        let mut here: Vec<usize> = ix.vars().filter_map(|v| pos.get(v).copied()).collect();
        here.sort_unstable();
        if here.len() > 1 {
            cut = cut.max(here[here.len() - 2] + 1);
        }
        for p in here {
            *dims_of.entry(p).or_default() += 1;
        }
    }
    for (p, n) in dims_of {
        if n > 1 {
            cut = cut.max(p + 1);
        }
    }
    if cut > 0 {
        return Err(Shrink(inner[..cut].iter().map(|(v, _)| v.clone()).collect()));
    }
    let idx = load
        .indices
        .iter()
        .map(|ix| match inner.iter().find(|(v, _)| ix.mentions(v)) {
            Some((v, m)) => TileIdx::Slice { lo: ix.without(|u| pos.contains_key(u)), len: *m, step: ix.coeff(v) },
            None => TileIdx::Point(ix.clone()),
        })
        .collect();
    Ok(TileAccess { tensor: load.tensor.clone(), idx })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;
    use crate::expr::{parse_expr, Index, ScalarExpr};
    use crate::loop_ir::parse_program;

    fn load(src: &str) -> Load {
        match parse_expr(src).unwrap() {
            ScalarExpr::Load(l) => l,
            e => panic!("{e} is not a load"),
        }
    }

    fn inner(v: &[(&str, usize)]) -> Vec<(String, usize)> {
        v.iter().map(|(n, e)| (n.to_string(), *e)).collect()
    }

    #[test]
    fn privatized_read_becomes_a_slice() {
        let t = relax_access(&load("inp[i, j1 * 2 + j2]"), &inner(&[("j2", 2)])).unwrap();
        assert_eq!(
            t.idx,
            [
                TileIdx::Point(Index::var("i")),
                TileIdx::Slice { lo: Index::from_terms([("j1".into(), 2)], 0), len: 2, step: 1 }
            ]
        );
    }

    #[test]
    fn no_inner_loops_gives_points() {
        let t = relax_access(&load("inp[i, j1 * 2 + j2]"), &[]).unwrap();
        assert!(t.is_points());
    }

    #[test]
    fn shared_inner_variable_shrinks() {
        assert_eq!(relax_access(&load("x[i + j2, j2]"), &inner(&[("j2", 4)])), Err(Shrink(vec!["j2".into()])));
        assert_eq!(
            relax_access(&load("x[a * 4 + b, c]"), &inner(&[("a", 2), ("b", 4), ("c", 3)])),
            Err(Shrink(vec!["a".into()]))
        );
    }

    #[test]
    fn partitions_stop_at_sequenced_bodies() {
        let p = parse_program(crate::tile_ir::translate::tests::PRIVATIZED).unwrap();
        let parts = partition_ast(&p);
        let local = parts.iter().find(|q| q.store == "max_local").unwrap();
        assert_eq!(local.outer, [("i".to_string(), 2), ("j1".to_string(), 2)]);
        assert_eq!(local.inner, [("j2".to_string(), 2)]);
        assert!(parts.iter().filter(|q| !q.store.ends_with("_local")).all(|q| q.inner.is_empty()));
    }

    #[test]
    fn annotated_loops_are_never_inner() {
        let p = parse_program(
            "tensor a: f32[4, 2] input\ntensor b: f32[4, 2] output\nblockIdx.x for i in range(4):\n    vectorized for j in range(2):\n        b[i, j] = a[i, j]\n",
        )
        .unwrap();
        assert!(partition_ast(&p).iter().all(|q| q.inner.is_empty()));
    }

    fn access_strategy() -> impl Strategy<Value = (Vec<Index>, Vec<(String, usize)>, Vec<i64>)> {
        let vars = ["o0", "o1", "n0", "n1", "n2"];
        let index = (proptest::collection::vec(-3i64..=3, 5), -4i64..=4).prop_map(move |(cs, c)| {
            Index::from_terms(vars.iter().zip(cs).filter(|(_, c)| *c != 0).map(|(v, c)| (v.to_string(), c)), c)
        });
        (
            proptest::collection::vec(index, 1..=3),
            proptest::collection::vec(1usize..=3, 3),
            proptest::collection::vec(0i64..3, 2),
        )
            .prop_map(|(idx, ext, outer)| {
                let inner = ["n0", "n1", "n2"].iter().zip(ext).map(|(v, e)| (v.to_string(), e)).collect();
                (idx, inner, outer)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        // The tile touches exactly the image of the access over the inner box.
        #[test]
        fn relaxed_tile_equals_the_image((indices, inner, outer) in access_strategy()) {
            let l = Load { tensor: "x".into(), indices };
            let mut inner = inner;
            let t = loop {
                match relax_access(&l, &inner) {
                    Ok(t) => break t,
                    Err(Shrink(vs)) => {
                        prop_assert!(!vs.is_empty() && vs.len() <= inner.len());
                        inner.drain(..vs.len());
                    }
                }
            };
            let mut image = BTreeSet::new();
            let total: usize = inner.iter().map(|(_, e)| e).product();
            for n in 0..total {
                let mut rest = n;
                let mut at = vec![0i64; inner.len()];
                for k in (0..inner.len()).rev() {
                    at[k] = (rest % inner[k].1) as i64;
                    rest /= inner[k].1;
                }
                let env = |v: &str| match v {
                    "o0" => Some(outer[0]),
                    "o1" => Some(outer[1]),
                    _ => Some(inner.iter().position(|(u, _)| u == v).map_or(0, |k| at[k])),
                };
                image.insert(l.indices.iter().map(|ix| ix.eval(&env).unwrap()).collect::<Vec<_>>());
            }
            let env = |v: &str| match v { "o0" => Some(outer[0]), "o1" => Some(outer[1]), _ => Some(0) };
            let got: BTreeSet<Vec<i64>> = t.elements(&env).unwrap().into_iter().collect();
            prop_assert_eq!(got, image);
        }
    }
}
