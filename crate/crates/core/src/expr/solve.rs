// SPDX-License-Identifier: Apache-2.0
//! Isolating a variable in a single-occurrence chain, and checking that a
//! function distributes over a reducer.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{canonicalize, eval_scalar, BinOp, Reducer, ScalarExpr, UnOp};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("not invertible in `{var}`: {reason}")]
    NotInvertible { var: String, reason: String },
}

/// A side condition the inverse relies on but which is not proven.
#[derive(Debug, Clone, PartialEq)]
pub enum DomainFlag {
    Positive(ScalarExpr),
    NonZero(ScalarExpr),
}

impl fmt::Display for DomainFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainFlag::Positive(e) => write!(f, "{e} > 0"),
            DomainFlag::NonZero(e) => write!(f, "{e} != 0"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub expr: ScalarExpr,
    pub flags: Vec<DomainFlag>,
}

/// Solves `y = g` for `target`, returning an expression in the remaining
/// variables of `g` and `y`. `target` must occur exactly once, reachable
/// through `+ - * /`, `exp`, `log` and negation only.
pub fn invert_in_arg(g: &ScalarExpr, target: &str, y: &str) -> Result<Inversion, SolveError> {
    let fail = |reason: &str| SolveError::NotInvertible { var: target.to_string(), reason: reason.to_string() };
    match g.count_var(target) {
        0 => return Err(fail("does not occur")),
        1 => {}
        _ => return Err(fail("occurs more than once")),
    }
    let mut flags = Vec::new();
    let mut node = g;
    let mut rhs = ScalarExpr::var(y);
    loop {
        match node {
            ScalarExpr::Var(v) if v == target => break,
            ScalarExpr::Bin(op, a, b) => {
                let left = a.contains_var(target);
                let (ca, cb) = (a.as_ref().clone(), b.as_ref().clone());
                rhs = match (op, left) {
                    (BinOp::Add, true) => ScalarExpr::bin(BinOp::Sub, rhs, cb),
                    (BinOp::Add, false) => ScalarExpr::bin(BinOp::Sub, rhs, ca),
                    (BinOp::Sub, true) => ScalarExpr::bin(BinOp::Add, rhs, cb),
                    (BinOp::Sub, false) => ScalarExpr::bin(BinOp::Sub, ca, rhs),
                    (BinOp::Mul, true) => {
                        flags.push(DomainFlag::NonZero(cb.clone()));
                        ScalarExpr::bin(BinOp::Div, rhs, cb)
                    }
                    (BinOp::Mul, false) => {
                        flags.push(DomainFlag::NonZero(ca.clone()));
                        ScalarExpr::bin(BinOp::Div, rhs, ca)
                    }
                    (BinOp::Div, true) => ScalarExpr::bin(BinOp::Mul, rhs, cb),
                    (BinOp::Div, false) => {
                        flags.push(DomainFlag::NonZero(rhs.clone()));
                        ScalarExpr::bin(BinOp::Div, ca, rhs)
                    }
                    (BinOp::Min | BinOp::Max, _) => return Err(fail("occurs under min/max")),
                };
                node = if left { a } else { b };
            }
            ScalarExpr::Un(op, a) => {
                rhs = match op {
                    UnOp::Exp => {
                        flags.push(DomainFlag::Positive(rhs.clone()));
                        ScalarExpr::log(rhs)
                    }
                    UnOp::Log => ScalarExpr::exp(rhs),
                    UnOp::Neg => ScalarExpr::neg(rhs),
                    UnOp::Tanh => return Err(fail("occurs under tanh")),
                };
                node = a;
            }
            ScalarExpr::Select(..) => return Err(fail("occurs under select")),
            _ => return Err(fail("occurs inside a tensor load")),
        }
    }
    Ok(Inversion { expr: canonicalize(&rhs), flags })
}

fn fresh(base: &str, e: &ScalarExpr) -> String {
    let mut name = base.to_string();
    while e.contains_var(&name) {
        name.push('_');
    }
    name
}

/// Searches for a point where `lhs` and `rhs` disagree. Points where either
/// side is undefined or non-finite are skipped, which is how domain
/// conditions are respected.
pub fn numeric_counterexample(
    lhs: &ScalarExpr,
    rhs: &ScalarExpr,
    samples: usize,
    seed: u64,
) -> Option<BTreeMap<String, f64>> {
    let mut vars = lhs.free_vars();
    for v in rhs.free_vars() {
        if !vars.contains(&v) {
            vars.push(v);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let env: BTreeMap<String, f64> = vars
            .iter()
            .map(|v| {
                let x = if rng.gen_bool(0.5) { rng.gen_range(-3.0..3.0) } else { rng.gen_range(0.05..3.0) };
                (v.clone(), x)
            })
            .collect();
        let (Ok(a), Ok(b)) = (eval_scalar(lhs, &env), eval_scalar(rhs, &env)) else { continue };
        if !a.is_finite() || !b.is_finite() {
            continue;
        }
        if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
            return Some(env);
        }
    }
    None
}

pub const FALSIFIER_SAMPLES: usize = 1000;

/// True iff `h(x f y) = h(x) f h(y)` in the first argument `t`, proven by
/// canonical equality and not refuted numerically.
pub fn prove_distributes(h: &ScalarExpr, f: Reducer) -> bool {
    prove_distributes_in(h, "t", f)
}

pub fn prove_distributes_in(h: &ScalarExpr, t: &str, f: Reducer) -> bool {
    let x = fresh("x", h);
    let y = fresh("y", h);
    let (vx, vy) = (ScalarExpr::var(&x), ScalarExpr::var(&y));
    let lhs = h.subst_var(t, &f.combine(vx.clone(), vy.clone()));
    let rhs = f.combine(h.subst_var(t, &vx), h.subst_var(t, &vy));
    let symbolic = canonicalize(&lhs) == canonicalize(&rhs);
    symbolic && numeric_counterexample(&lhs, &rhs, FALSIFIER_SAMPLES, 0x5eed).is_none()
}
