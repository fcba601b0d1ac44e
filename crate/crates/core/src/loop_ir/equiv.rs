// SPDX-License-Identifier: Apache-2.0
//! Structural equality up to a consistent renaming of tensors, loop
//! variables and blocks.

use std::collections::BTreeMap;

use crate::expr::{canonicalize, Index, ScalarExpr};

use super::{Program, Role, Stmt};

#[derive(Default)]
struct Renaming {
    tensors: BTreeMap<String, String>,
    vars: BTreeMap<String, String>,
}

impl Renaming {
    fn bind_tensor(&mut self, a: &Program, b: &Program, ta: &str, tb: &str) -> Result<(), String> {
        match self.tensors.get(tb) {
            Some(m) if m == ta => return Ok(()),
            Some(m) => return Err(format!("`{tb}` already corresponds to `{m}`, not `{ta}`")),
            None => {}
        }
        if self.tensors.values().any(|v| v == ta) {
            return Err(format!("`{ta}` corresponds to two tensors"));
        }
        let (da, db) = (a.decl(ta), b.decl(tb));
        if let (Some(da), Some(db)) = (da, db) {
            if da.shape != db.shape || da.role != db.role {
                return Err(format!("`{ta}` and `{tb}` differ in shape or role"));
            }
        }
        self.tensors.insert(tb.to_string(), ta.to_string());
        Ok(())
    }

    fn index(&self, ix: &Index) -> Index {
        ix.rename(&self.vars)
    }
}

/// `Ok` when `b` is `a` with renamed tensors, loop variables and blocks.
/// Inputs correspond in declaration order; every other tensor is matched at
/// its first access. Values are compared after canonicalization so that
/// operand order inside commutative operators does not matter.
pub fn equivalent_modulo_names(a: &Program, b: &Program) -> Result<(), String> {
    let mut r = Renaming::default();
    let ia: Vec<_> = a.inputs().collect();
    let ib: Vec<_> = b.inputs().collect();
    if ia.len() != ib.len() {
        return Err(format!("{} inputs vs {}", ia.len(), ib.len()));
    }
    for (x, y) in ia.iter().zip(&ib) {
        r.bind_tensor(a, b, &x.name, &y.name)?;
    }
    body(a, b, &a.body, &b.body, &mut r)?;
    let oa = a.outputs().count();
    let ob = b.outputs().count();
    if oa != ob {
        return Err(format!("{oa} outputs vs {ob}"));
    }
    for o in b.outputs() {
        let m = r.tensors.get(&o.name).ok_or_else(|| format!("output `{}` is never written", o.name))?;
        if a.decl(m).map(|d| d.role) != Some(Role::Output) {
            return Err(format!("output `{}` corresponds to non-output `{m}`", o.name));
        }
    }
    Ok(())
}

fn body(a: &Program, b: &Program, sa: &[Stmt], sb: &[Stmt], r: &mut Renaming) -> Result<(), String> {
    if sa.len() != sb.len() {
        return Err(format!("bodies of {} and {} statements", sa.len(), sb.len()));
    }
    for (x, y) in sa.iter().zip(sb) {
        match (x, y) {
            (Stmt::Loop(la), Stmt::Loop(lb)) => {
                if la.extent != lb.extent || la.annotation != lb.annotation {
                    return Err(format!("loops `{}` and `{}` differ", la.var, lb.var));
                }
                r.vars.insert(lb.var.clone(), la.var.clone());
                body(a, b, &la.body, &lb.body, r)?;
                r.vars.remove(&lb.var);
            }
            (Stmt::Store(xa), Stmt::Store(xb)) => {
                r.bind_tensor(a, b, &xa.tensor, &xb.tensor)?;
                let ib: Vec<Index> = xb.indices.iter().map(|i| r.index(i)).collect();
                if ib != xa.indices {
                    return Err(format!("blocks `{}` and `{}` store to different locations", xa.name, xb.name));
                }
                let (la, lb) = (xa.value.loads(), xb.value.loads());
                if la.len() != lb.len() {
                    return Err(format!("blocks `{}` and `{}` read differently", xa.name, xb.name));
                }
                for (p, q) in la.iter().zip(&lb) {
                    r.bind_tensor(a, b, &p.tensor, &q.tensor)?;
                }
                let vb = rename_value(&xb.value, r);
                if canonicalize(&xa.value) != canonicalize(&vb) {
                    return Err(format!("blocks `{}` and `{}`: `{}` vs `{}`", xa.name, xb.name, xa.value, vb));
                }
            }
            _ => return Err("loop and store at the same position".into()),
        }
    }
    Ok(())
}

fn rename_value(e: &ScalarExpr, r: &Renaming) -> ScalarExpr {
    let vars: BTreeMap<String, Index> = r.vars.iter().map(|(k, v)| (k.clone(), Index::var(v))).collect();
    e.rename_tensors(&r.tensors).subst_index_vars(&vars)
}
