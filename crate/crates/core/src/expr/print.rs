// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use super::{BinOp, Cond, Index, Load, ScalarExpr, UnOp};

pub(crate) fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}

fn prec(e: &ScalarExpr) -> u8 {
    match e {
        ScalarExpr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        ScalarExpr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        ScalarExpr::Un(UnOp::Neg, _) => 3,
        ScalarExpr::Lit(v) if v.is_sign_negative() && !v.is_nan() && *v != 0.0 => 3,
        _ => 4,
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &ScalarExpr, paren: bool) -> fmt::Result {
    if paren {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for ScalarExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarExpr::Lit(v) => f.write_str(&fmt_f64(*v)),
            ScalarExpr::Var(v) => f.write_str(v),
            ScalarExpr::Load(l) => write!(f, "{l}"),
            ScalarExpr::Bin(op @ (BinOp::Min | BinOp::Max), a, b) => {
                let name = if *op == BinOp::Max { "max" } else { "min" };
                write!(f, "{name}({a}, {b})")
            }
            ScalarExpr::Bin(op, a, b) => {
                let p = prec(self);
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    _ => "/",
                };
                write_child(f, a, prec(a) < p)?;
                write!(f, " {sym} ")?;
                write_child(f, b, prec(b) <= p)
            }
            ScalarExpr::Un(UnOp::Neg, a) => {
                f.write_str("-")?;
                write_child(f, a, prec(a) < 4 || matches!(**a, ScalarExpr::Lit(_)))
            }
            ScalarExpr::Un(op, a) => {
                let name = match op {
                    UnOp::Exp => "exp",
                    UnOp::Log => "log",
                    UnOp::Tanh => "tanh",
                    UnOp::Neg => unreachable!(),
                };
                write!(f, "{name}({a})")
            }
            ScalarExpr::Select(c, a, b) => write!(f, "select({c}, {a}, {b})"),
        }
    }
}

impl fmt::Display for Cond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (op, l, r)) in self.clauses.iter().enumerate() {
            if k > 0 {
                f.write_str(" and ")?;
            }
            write!(f, "{l} {} {r}", op.symbol())?;
        }
        Ok(())
    }
}

impl fmt::Display for Index {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "{}", self.constant);
        }
        for (k, (v, c)) in self.terms.iter().enumerate() {
            let mag = c.abs();
            if k == 0 {
                if *c < 0 {
                    f.write_str("-")?;
                }
            } else {
                f.write_str(if *c < 0 { " - " } else { " + " })?;
            }
            if mag == 1 {
                f.write_str(v)?;
            } else {
                write!(f, "{v} * {mag}")?;
            }
        }
        match self.constant {
            0 => Ok(()),
            c if c < 0 => write!(f, " - {}", -c),
            c => write!(f, " + {c}"),
        }
    }
}

impl fmt::Display for Load {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.tensor)?;
        for (k, ix) in self.indices.iter().enumerate() {
            if k > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{ix}")?;
        }
        f.write_str("]")
    }
}

#[cfg(test)]
mod tests {
    use crate::expr::{parse_expr, parse_index};

    #[test]
    fn prints_fixture_syntax() {
        let src = "exp(xmax_0[i] - xmax_1[i]) * xsum[i] + exp(inp[i, j] - xmax_1[i])";
        assert_eq!(parse_expr(src).unwrap().to_string(), src);
    }

    #[test]
    fn parenthesizes_right_operands() {
        for src in ["a - (b - c)", "a / (b * c)", "(a + b) * c", "a * -2", "-(2) + x", "-(-x)", "a + (b + c)"] {
            let e = parse_expr(src).unwrap();
            assert_eq!(e.to_string(), src);
            assert_eq!(parse_expr(&e.to_string()).unwrap(), e);
        }
    }

    #[test]
    fn index_forms() {
        for src in ["j0 * 2 + j1", "-i + 3", "i - j * 4 - 1", "0", "-2"] {
            assert_eq!(parse_index(src).unwrap().to_string(), src);
        }
    }
}
