// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{BinOp, Load, ScalarExpr, UnOp};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("no value for load of `{0}`")]
    UnresolvedLoad(String),
    #[error("domain error: {0}")]
    DomainError(String),
}

/// Variable and tensor lookup for [`eval_scalar`].
pub trait Env {
    fn var(&self, name: &str) -> Option<f64>;

    fn load(&self, load: &Load) -> Result<f64, EvalError> {
        Err(EvalError::UnresolvedLoad(load.tensor.clone()))
    }
}

impl Env for BTreeMap<String, f64> {
    fn var(&self, name: &str) -> Option<f64> {
        self.get(name).copied()
    }
}

impl Env for HashMap<String, f64> {
    fn var(&self, name: &str) -> Option<f64> {
        self.get(name).copied()
    }
}

impl Env for [(&str, f64)] {
    fn var(&self, name: &str) -> Option<f64> {
        self.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

impl<const N: usize> Env for [(&str, f64); N] {
    fn var(&self, name: &str) -> Option<f64> {
        self.as_slice().var(name)
    }
}

/// IEEE arithmetic plus one convention: `(-inf) - (-inf) = -inf`, so a row
/// whose scores are all masked keeps its running maximum at `-inf` instead
/// of turning the repair factor into NaN.
pub fn eval_binop(op: BinOp, a: f64, b: f64) -> f64 {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => {
            if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                a - b
            }
        }
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
        BinOp::Min => {
            if a.is_nan() || b.is_nan() {
                f64::NAN
            } else {
                a.min(b)
            }
        }
        BinOp::Max => {
            if a.is_nan() || b.is_nan() {
                f64::NAN
            } else {
                a.max(b)
            }
        }
    }
}

pub fn eval_unop(op: UnOp, a: f64) -> Result<f64, EvalError> {
    Ok(match op {
        UnOp::Exp => a.exp(),
        UnOp::Log => {
            if a <= 0.0 {
                return Err(EvalError::DomainError(format!("log({a})")));
            }
            a.ln()
        }
        UnOp::Neg => -a,
        UnOp::Tanh => a.tanh(),
    })
}

pub fn eval_scalar(e: &ScalarExpr, env: &(impl Env + ?Sized)) -> Result<f64, EvalError> {
    match e {
        ScalarExpr::Lit(v) => Ok(*v),
        ScalarExpr::Var(n) => env.var(n).ok_or_else(|| EvalError::UnboundVariable(n.clone())),
        ScalarExpr::Load(l) => env.load(l),
        ScalarExpr::Bin(op, a, b) => Ok(eval_binop(*op, eval_scalar(a, env)?, eval_scalar(b, env)?)),
        ScalarExpr::Un(op, a) => eval_unop(*op, eval_scalar(a, env)?),
        ScalarExpr::Select(c, a, b) => {
            let mut holds = true;
            for (op, l, r) in &c.clauses {
                if !op.holds(eval_scalar(l, env)?, eval_scalar(r, env)?) {
                    holds = false;
                    break;
                }
            }
            if holds {
                eval_scalar(a, env)
            } else {
                eval_scalar(b, env)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn ev(src: &str, env: &[(&str, f64)]) -> Result<f64, EvalError> {
        eval_scalar(&parse_expr(src).unwrap(), env)
    }

    #[test]
    fn exp_of_minus_infinity_is_zero() {
        assert_eq!(ev("exp(-inf - 5)", &[]).unwrap(), 0.0);
    }

    #[test]
    fn direct_arithmetic() {
        let v = ev("exp(1 - 1) * 3 + exp(2 - 1)", &[]).unwrap();
        assert!((v - (3.0 + std::f64::consts::E)).abs() < 1e-15);
    }

    #[test]
    fn log_of_negative_is_domain_error() {
        assert!(matches!(ev("log(-1)", &[]), Err(EvalError::DomainError(_))));
        assert!(matches!(ev("log(x)", &[("x", 0.0)]), Err(EvalError::DomainError(_))));
    }

    #[test]
    fn unbound_variable() {
        assert_eq!(ev("x + 1", &[]), Err(EvalError::UnboundVariable("x".into())));
    }

    #[test]
    fn max_with_minus_infinity() {
        assert_eq!(ev("max(-inf, x)", &[("x", -2.5)]).unwrap(), -2.5);
    }

    #[test]
    fn masked_row_repair_factor_is_zero() {
        assert_eq!(ev("exp(r - rp) * t", &[("r", f64::NEG_INFINITY), ("rp", f64::NEG_INFINITY), ("t", 0.0)]).unwrap(), 0.0);
    }

    #[test]
    fn select_picks_branch() {
        assert_eq!(ev("select(j <= i, 1, -inf)", &[("i", 1.0), ("j", 2.0)]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(ev("select(j <= i and j > 0, 1, 2)", &[("i", 1.0), ("j", 1.0)]).unwrap(), 1.0);
    }
}
