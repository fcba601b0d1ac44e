// SPDX-License-Identifier: Apache-2.0
//! Repair functions for fused reductions.
//!
//! Given the reducer `f` and the combine function `g(r, c)` of a target
//! reduction, the repair `h(t, r, r')` rewrites a partial result `t` that was
//! accumulated against a stale predecessor value `r` into the one that would
//! have been accumulated against the current value `r'`. It is obtained by
//! recovering the constant argument from `t` and re-applying `g`:
//! `h(t, r, r') = g(r', g_c^-1(r, t))`. The result is only usable when `h`
//! also distributes over `f`, which is checked here as well.

use std::collections::BTreeMap;
use std::fmt;

use crate::expr::{canonicalize, invert_in_arg, prove_distributes_in, DomainFlag, Reducer, ScalarExpr, SolveError};

/// A solved repair function and the evidence for it.
#[derive(Debug, Clone, PartialEq)]
pub struct RepairCertificate {
    pub f: Reducer,
    /// `g` over the normalized argument names (`r` or `r1, r2, ...`; `c...`).
    pub g: ScalarExpr,
    /// The constant argument `h` was solved through.
    pub c_arg: String,
    /// `g_c^-1(r, t)`.
    pub g_inv: ScalarExpr,
    pub h: ScalarExpr,
    /// Previous-value arguments of `h`, in order; the current-value argument
    /// of each is the same name with a trailing `'`.
    pub r_args: Vec<String>,
    pub commutes: bool,
    pub domain_flags: Vec<DomainFlag>,
}

pub fn primed(r: &str) -> String {
    format!("{r}'")
}

impl RepairCertificate {
    /// `h` applied to concrete operands: `t`, then `(prev, curr)` per
    /// predecessor in `r_args` order.
    pub fn apply(&self, t: ScalarExpr, pairs: &[(ScalarExpr, ScalarExpr)]) -> ScalarExpr {
        assert_eq!(pairs.len(), self.r_args.len());
        let mut m = BTreeMap::new();
        m.insert("t".to_string(), t);
        for (r, (prev, curr)) in self.r_args.iter().zip(pairs) {
            m.insert(r.clone(), prev.clone());
            m.insert(primed(r), curr.clone());
        }
        self.h.subst_vars(&m)
    }

    pub fn is_identity(&self) -> bool {
        self.h == ScalarExpr::var("t")
    }

    pub fn signature(&self) -> String {
        let mut args = vec!["t".to_string()];
        for r in &self.r_args {
            args.push(r.clone());
            args.push(primed(r));
        }
        format!("h({})", args.join(","))
    }
}

impl fmt::Display for RepairCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}  [commutes: {}]", self.signature(), self.h, if self.commutes { "yes" } else { "no" })?;
        if !self.domain_flags.is_empty() {
            let flags: Vec<String> = self.domain_flags.iter().map(|d| d.to_string()).collect();
            write!(f, "  [assumes: {}]", flags.join(", "))?;
        }
        Ok(())
    }
}

/// Free variables of `g` starting with `c` are constant arguments; all
/// others are predecessor arguments and get renamed to `r` (one) or
/// `r1, r2, ...` (several, in sorted order).
fn normalize_args(g: &ScalarExpr) -> (ScalarExpr, Vec<String>, Vec<String>) {
    let mut vars = g.free_vars();
    vars.sort();
    vars.dedup();
    let (cs, rs): (Vec<String>, Vec<String>) = vars.into_iter().partition(|v| v.starts_with('c'));
    let names: Vec<String> =
        if rs.len() == 1 { vec!["r".to_string()] } else { (1..=rs.len()).map(|k| format!("r{k}")).collect() };
    let m: BTreeMap<String, ScalarExpr> = rs.iter().zip(&names).map(|(a, b)| (a.clone(), ScalarExpr::var(b))).collect();
    (g.subst_vars(&m), names, cs)
}

/// Solves for `h` from `(f, g)` and checks that it distributes over `f`.
/// `commutes == false` means the repair must not be applied.
pub fn derive(f: Reducer, g: &ScalarExpr) -> Result<RepairCertificate, SolveError> {
    let (g, r_args, c_args) = normalize_args(g);
    if c_args.is_empty() {
        return Err(SolveError::NotInvertible { var: "c".into(), reason: "g reads no constant input".into() });
    }
    let mut last = None;
    for c in &c_args {
        let inv = match invert_in_arg(&g, c, "t") {
            Ok(inv) => inv,
            Err(e) => {
                last = Some(e);
                continue;
            }
        };
        let mut m: BTreeMap<String, ScalarExpr> =
            r_args.iter().map(|r| (r.clone(), ScalarExpr::var(&primed(r)))).collect();
        m.insert(c.clone(), inv.expr.clone());
        let h = canonicalize(&g.subst_vars(&m));
        if c_args.iter().any(|k| h.contains_var(k)) {
            last = Some(SolveError::NotInvertible {
                var: c.clone(),
                reason: format!("h = {h} still reads constant inputs"),
            });
            continue;
        }
        let commutes = prove_distributes_in(&h, "t", f);
        return Ok(RepairCertificate {
            f,
            g,
            c_arg: c.clone(),
            g_inv: inv.expr,
            h,
            r_args,
            commutes,
            domain_flags: inv.flags,
        });
    }
    Err(last.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{eval_scalar, parse_expr};

    fn e(s: &str) -> ScalarExpr {
        parse_expr(s).unwrap()
    }

    #[test]
    fn softmax_sum() {
        let cert = derive(Reducer::Add, &e("exp(c - x)")).unwrap();
        assert_eq!(cert.h, canonicalize(&e("exp(r - r') * t")));
        assert!(cert.commutes);
        assert_eq!(cert.to_string(), "h(t,r,r') = exp(r - r') * t  [commutes: yes]  [assumes: t > 0]");
    }

    #[test]
    fn constant_g_gives_identity() {
        let cert = derive(Reducer::Max, &e("c")).unwrap();
        assert!(cert.is_identity());
        assert!(cert.commutes);
    }

    #[test]
    fn difference_does_not_commute_with_sum() {
        let cert = derive(Reducer::Add, &e("c - x")).unwrap();
        assert_eq!(cert.h, canonicalize(&e("t + r - r'")));
        assert!(!cert.commutes);
    }

    #[test]
    fn weighted_values_solve_through_the_score() {
        // exp(c1 - r) * c2: inverting in c1 cancels c2.
        let cert = derive(Reducer::Add, &e("exp(c1 - r) * c2")).unwrap();
        assert_eq!(cert.c_arg, "c1");
        assert_eq!(cert.h, canonicalize(&e("exp(r - r') * t")));
        assert!(cert.commutes);
    }

    #[test]
    fn inverse_round_trips() {
        for g in ["exp(c - x)", "c - x", "c * x", "exp(c1 - x) * c2", "c / exp(x)"] {
            let cert = derive(Reducer::Add, &e(g)).unwrap();
            let back = cert.g.subst_var(&cert.c_arg, &cert.g_inv);
            assert_eq!(canonicalize(&back), e("t"), "{g}");
        }
    }

    #[test]
    fn two_predecessors() {
        let cert = derive(Reducer::Add, &e("exp(c - a) * exp(-b)")).unwrap();
        assert_eq!(cert.r_args, ["r1", "r2"]);
        assert!(cert.commutes);
        let env = [("t", 2.0), ("r1", 0.5), ("r1'", 1.5), ("r2", -1.0), ("r2'", 0.25)];
        let got = eval_scalar(&cert.h, &env).unwrap();
        let want = 2.0 * (0.5f64 - 1.5).exp() * (-1.0f64 - 0.25).exp();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn g_without_constants_is_rejected() {
        assert!(derive(Reducer::Add, &e("exp(-x)")).is_err());
        assert!(derive(Reducer::Add, &e("max(c, x)")).is_err());
    }
}
