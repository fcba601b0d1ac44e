// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use crate::expr::{Index, ScalarExpr};

use super::{IrError, Program, Stmt};

/// Inclusive range of an affine index over loop extents.
pub(crate) fn index_range(ix: &Index, extents: &BTreeMap<String, usize>) -> Option<(i64, i64)> {
    let (mut lo, mut hi) = (ix.constant, ix.constant);
    for (v, c) in &ix.terms {
        let n = *extents.get(v)? as i64;
        let span = c * (n - 1);
        if span < 0 {
            lo += span;
        } else {
            hi += span;
        }
    }
    Some((lo, hi))
}

fn check_access(
    p: &Program,
    tensor: &str,
    indices: &[Index],
    extents: &BTreeMap<String, usize>,
) -> Result<(), IrError> {
    let decl = p.decl(tensor).ok_or_else(|| IrError::UnknownTensor(tensor.to_string()))?;
    if decl.shape.len() != indices.len() {
        return Err(IrError::RankMismatch { tensor: tensor.into(), expected: decl.shape.len(), got: indices.len() });
    }
    for (dim, (ix, &n)) in indices.iter().zip(&decl.shape).enumerate() {
        for v in ix.vars() {
            if !extents.contains_key(v) {
                return Err(IrError::UnboundVariable(v.to_string()));
            }
        }
        let (lo, hi) = index_range(ix, extents).unwrap();
        if lo < 0 || hi >= n as i64 {
            return Err(IrError::OutOfBounds { tensor: tensor.into(), dim, lo, hi, extent: n });
        }
    }
    Ok(())
}

/// Declarations, ranks, variable scoping and static bounds.
pub fn validate(p: &Program) -> Result<(), IrError> {
    let mut seen = BTreeSet::new();
    for t in &p.tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(IrError::Duplicate(t.name.clone()));
        }
    }
    let mut names = BTreeSet::new();
    fn walk(
        p: &Program,
        body: &[Stmt],
        extents: &mut BTreeMap<String, usize>,
        names: &mut BTreeSet<String>,
    ) -> Result<(), IrError> {
        for s in body {
            match s {
                Stmt::Loop(l) => {
                    if l.extent == 0 {
                        return Err(IrError::EmptyLoop(l.var.clone()));
                    }
                    if extents.insert(l.var.clone(), l.extent).is_some() {
                        return Err(IrError::Duplicate(l.var.clone()));
                    }
                    walk(p, &l.body, extents, names)?;
                    extents.remove(&l.var);
                }
                Stmt::Store(st) => {
                    if !names.insert(st.name.clone()) {
                        return Err(IrError::Duplicate(st.name.clone()));
                    }
                    check_access(p, &st.tensor, &st.indices, extents)?;
                    let mut err = None;
                    st.value.visit(&mut |e| {
                        if err.is_some() {
                            return;
                        }
                        match e {
                            ScalarExpr::Load(l) => {
                                if let Err(x) = check_access(p, &l.tensor, &l.indices, extents) {
                                    err = Some(x);
                                }
                            }
                            ScalarExpr::Var(v) if !extents.contains_key(v) => {
                                err = Some(IrError::UnboundVariable(v.clone()))
                            }
                            _ => {}
                        }
                    });
                    if let Some(e) = err {
                        return Err(e);
                    }
                }
            }
        }
        Ok(())
    }
    walk(p, &p.body, &mut BTreeMap::new(), &mut names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loop_ir::parse_program;

    #[test]
    fn detects_out_of_bounds_reads() {
        let p = parse_program("tensor a: f32[4] input\ntensor b: f32[4] output\nfor i in range(4):\n    b[i] = a[i + 1]\n").unwrap();
        assert!(matches!(validate(&p), Err(IrError::OutOfBounds { lo: 1, hi: 4, .. })));
    }

    #[test]
    fn detects_undeclared_tensors() {
        let p = parse_program("tensor b: f32[4] output\nfor i in range(4):\n    b[i] = a[i]\n").unwrap();
        assert_eq!(validate(&p), Err(IrError::UnknownTensor("a".into())));
    }

    #[test]
    fn detects_rank_mismatch_and_unbound_vars() {
        let p = parse_program("tensor a: f32[4, 2] input\ntensor b: f32[4] output\nfor i in range(4):\n    b[i] = a[i]\n").unwrap();
        assert!(matches!(validate(&p), Err(IrError::RankMismatch { .. })));
        let q = parse_program("tensor b: f32[4] output\nfor i in range(4):\n    b[i] = k\n").unwrap();
        assert_eq!(validate(&q), Err(IrError::UnboundVariable("k".into())));
    }

    #[test]
    fn tiled_access_is_in_bounds() {
        let p = parse_program("tensor a: f32[8] input\ntensor b: f32[8] output\nfor i0, i1 in grid(4, 2):\n    b[i0 * 2 + i1] = a[7 - i0 * 2 - i1]\n").unwrap();
        assert_eq!(validate(&p), Ok(()));
    }
}
