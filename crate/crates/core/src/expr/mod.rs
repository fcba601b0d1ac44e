// SPDX-License-Identifier: Apache-2.0
//! Scalar expressions: the arithmetic inside loop bodies and the algebra of
//! reducers, combine functions and repair functions.

mod canon;
mod eval;
mod parse;
mod print;
mod solve;

use std::collections::BTreeMap;
use std::fmt;

pub use canon::canonicalize;
pub use eval::{eval_binop, eval_scalar, eval_unop, EvalError, Env};
pub(crate) use print::fmt_f64;
pub use parse::{parse_expr, parse_index, Lexer, ParseError, Parser, Tok};
pub use solve::{
    invert_in_arg, numeric_counterexample, prove_distributes, prove_distributes_in, DomainFlag, Inversion, SolveError,
    FALSIFIER_SAMPLES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnOp {
    Exp,
    Log,
    Neg,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }

    pub fn holds(self, a: f64, b: f64) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        }
    }
}

/// A conjunction of comparisons. Masks only ever need `and`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cond {
    pub clauses: Vec<(CmpOp, ScalarExpr, ScalarExpr)>,
}

/// Affine index expression `sum(coeff * var) + constant`, kept normalized:
/// terms sorted by variable name, no zero coefficients.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Index {
    pub terms: Vec<(String, i64)>,
    pub constant: i64,
}

impl Index {
    pub fn var(name: &str) -> Self {
        Index { terms: vec![(name.to_string(), 1)], constant: 0 }
    }

    pub fn constant(c: i64) -> Self {
        Index { terms: Vec::new(), constant: c }
    }

    pub fn from_terms(terms: impl IntoIterator<Item = (String, i64)>, constant: i64) -> Self {
        let mut map: BTreeMap<String, i64> = BTreeMap::new();
        for (v, c) in terms {
            *map.entry(v).or_insert(0) += c;
        }
        Index { terms: map.into_iter().filter(|(_, c)| *c != 0).collect(), constant }
    }

    pub fn coeff(&self, var: &str) -> i64 {
        self.terms.iter().find(|(v, _)| v == var).map(|(_, c)| *c).unwrap_or(0)
    }

    pub fn vars(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(|(v, _)| v.as_str())
    }

    pub fn mentions(&self, var: &str) -> bool {
        self.terms.iter().any(|(v, _)| v == var)
    }

    /// The single variable with coefficient one and no offset, if that is all there is.
    pub fn as_plain_var(&self) -> Option<&str> {
        match (self.terms.as_slice(), self.constant) {
            ([(v, 1)], 0) => Some(v),
            _ => None,
        }
    }

    pub fn add(&self, other: &Index) -> Index {
        Index::from_terms(
            self.terms.iter().chain(other.terms.iter()).cloned(),
            self.constant + other.constant,
        )
    }

    pub fn scale(&self, k: i64) -> Index {
        Index::from_terms(self.terms.iter().map(|(v, c)| (v.clone(), c * k)), self.constant * k)
    }

    pub fn substitute(&self, map: &BTreeMap<String, Index>) -> Index {
        let mut out = Index::constant(self.constant);
        for (v, c) in &self.terms {
            match map.get(v) {
                Some(rep) => out = out.add(&rep.scale(*c)),
                None => out = out.add(&Index::from_terms([(v.clone(), *c)], 0)),
            }
        }
        out
    }

    pub fn rename(&self, map: &BTreeMap<String, String>) -> Index {
        Index::from_terms(
            self.terms
                .iter()
                .map(|(v, c)| (map.get(v).cloned().unwrap_or_else(|| v.clone()), *c)),
            self.constant,
        )
    }

    /// Drops the terms whose variables satisfy `pred`.
    pub fn without(&self, pred: impl Fn(&str) -> bool) -> Index {
        Index {
            terms: self.terms.iter().filter(|(v, _)| !pred(v)).cloned().collect(),
            constant: self.constant,
        }
    }

    pub fn eval(&self, env: &impl Fn(&str) -> Option<i64>) -> Option<i64> {
        let mut acc = self.constant;
        for (v, c) in &self.terms {
            acc += c * env(v)?;
        }
        Some(acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Load {
    pub tensor: String,
    pub indices: Vec<Index>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScalarExpr {
    Lit(f64),
    Var(String),
    Load(Load),
    Bin(BinOp, Box<ScalarExpr>, Box<ScalarExpr>),
    Un(UnOp, Box<ScalarExpr>),
    Select(Box<Cond>, Box<ScalarExpr>, Box<ScalarExpr>),
}

/// Associative, commutative reducers with an identity element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reducer {
    Add,
    Max,
    Min,
    Mul,
}

impl Reducer {
    pub const ALL: [Reducer; 4] = [Reducer::Add, Reducer::Max, Reducer::Min, Reducer::Mul];

    pub fn identity(self) -> f64 {
        match self {
            Reducer::Add => 0.0,
            Reducer::Max => f64::NEG_INFINITY,
            Reducer::Min => f64::INFINITY,
            Reducer::Mul => 1.0,
        }
    }

    pub fn binop(self) -> BinOp {
        match self {
            Reducer::Add => BinOp::Add,
            Reducer::Max => BinOp::Max,
            Reducer::Min => BinOp::Min,
            Reducer::Mul => BinOp::Mul,
        }
    }

    pub fn from_binop(op: BinOp) -> Option<Reducer> {
        match op {
            BinOp::Add => Some(Reducer::Add),
            BinOp::Max => Some(Reducer::Max),
            BinOp::Min => Some(Reducer::Min),
            BinOp::Mul => Some(Reducer::Mul),
            BinOp::Sub | BinOp::Div => None,
        }
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        eval_binop(self.binop(), a, b)
    }

    pub fn combine(self, a: ScalarExpr, b: ScalarExpr) -> ScalarExpr {
        ScalarExpr::bin(self.binop(), a, b)
    }

    pub fn name(self) -> &'static str {
        match self {
            Reducer::Add => "+",
            Reducer::Max => "max",
            Reducer::Min => "min",
            Reducer::Mul => "*",
        }
    }

    pub fn parse(s: &str) -> Option<Reducer> {
        match s {
            "+" | "add" | "sum" => Some(Reducer::Add),
            "max" => Some(Reducer::Max),
            "min" => Some(Reducer::Min),
            "*" | "mul" | "prod" => Some(Reducer::Mul),
            _ => None,
        }
    }
}

impl fmt::Display for Reducer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl ScalarExpr {
    pub fn lit(v: f64) -> Self {
        ScalarExpr::Lit(v)
    }

    pub fn var(name: &str) -> Self {
        ScalarExpr::Var(name.to_string())
    }

    pub fn load(tensor: &str, indices: Vec<Index>) -> Self {
        ScalarExpr::Load(Load { tensor: tensor.to_string(), indices })
    }

    /// Load indexed by plain variables, e.g. `load_vars("inp", &["i", "j"])`.
    pub fn load_vars(tensor: &str, vars: &[&str]) -> Self {
        Self::load(tensor, vars.iter().map(|v| Index::var(v)).collect())
    }

    pub fn bin(op: BinOp, a: ScalarExpr, b: ScalarExpr) -> Self {
        ScalarExpr::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn un(op: UnOp, a: ScalarExpr) -> Self {
        ScalarExpr::Un(op, Box::new(a))
    }

    pub fn exp(a: ScalarExpr) -> Self {
        Self::un(UnOp::Exp, a)
    }

    pub fn log(a: ScalarExpr) -> Self {
        Self::un(UnOp::Log, a)
    }

    pub fn neg(a: ScalarExpr) -> Self {
        Self::un(UnOp::Neg, a)
    }

    pub fn tanh(a: ScalarExpr) -> Self {
        Self::un(UnOp::Tanh, a)
    }

    pub fn select(c: Cond, a: ScalarExpr, b: ScalarExpr) -> Self {
        ScalarExpr::Select(Box::new(c), Box::new(a), Box::new(b))
    }

    pub fn for_each_load<'a>(&'a self, f: &mut impl FnMut(&'a Load)) {
        self.visit(&mut |e| {
            if let ScalarExpr::Load(l) = e {
                f(l)
            }
        });
    }

    /// Pre-order traversal over every node, including condition operands.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a ScalarExpr)) {
        f(self);
        match self {
            ScalarExpr::Lit(_) | ScalarExpr::Var(_) | ScalarExpr::Load(_) => {}
            ScalarExpr::Bin(_, a, b) => {
                a.visit(f);
                b.visit(f);
            }
            ScalarExpr::Un(_, a) => a.visit(f),
            ScalarExpr::Select(c, a, b) => {
                for (_, l, r) in &c.clauses {
                    l.visit(f);
                    r.visit(f);
                }
                a.visit(f);
                b.visit(f);
            }
        }
    }

    /// Bottom-up rewrite: `f` sees each node after its children were rebuilt.
    pub fn map(&self, f: &mut impl FnMut(ScalarExpr) -> ScalarExpr) -> ScalarExpr {
        let rebuilt = match self {
            ScalarExpr::Lit(_) | ScalarExpr::Var(_) | ScalarExpr::Load(_) => self.clone(),
            ScalarExpr::Bin(op, a, b) => ScalarExpr::bin(*op, a.map(f), b.map(f)),
            ScalarExpr::Un(op, a) => ScalarExpr::un(*op, a.map(f)),
            ScalarExpr::Select(c, a, b) => ScalarExpr::select(
                Cond {
                    clauses: c
                        .clauses
                        .iter()
                        .map(|(op, l, r)| (*op, l.map(f), r.map(f)))
                        .collect(),
                },
                a.map(f),
                b.map(f),
            ),
        };
        f(rebuilt)
    }

    pub fn loads(&self) -> Vec<&Load> {
        let mut out = Vec::new();
        self.for_each_load(&mut |l| out.push(l));
        out
    }

    pub fn reads_tensor(&self, tensor: &str) -> bool {
        self.loads().iter().any(|l| l.tensor == tensor)
    }

    pub fn free_vars(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        self.visit(&mut |e| {
            if let ScalarExpr::Var(v) = e {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
        });
        out
    }

    /// Index variables referenced by loads, in first-seen order.
    pub fn index_vars(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        self.for_each_load(&mut |l| {
            for ix in &l.indices {
                for v in ix.vars() {
                    if !out.iter().any(|o| o == v) {
                        out.push(v.to_string());
                    }
                }
            }
        });
        out
    }

    pub fn count_var(&self, name: &str) -> usize {
        let mut n = 0;
        self.visit(&mut |e| {
            if matches!(e, ScalarExpr::Var(v) if v == name) {
                n += 1;
            }
        });
        n
    }

    pub fn contains_var(&self, name: &str) -> bool {
        self.count_var(name) > 0
    }

    /// Replaces named variables by expressions.
    pub fn subst_vars(&self, map: &BTreeMap<String, ScalarExpr>) -> ScalarExpr {
        self.map(&mut |e| match &e {
            ScalarExpr::Var(v) => map.get(v).cloned().unwrap_or(e),
            _ => e,
        })
    }

    pub fn subst_var(&self, name: &str, with: &ScalarExpr) -> ScalarExpr {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), with.clone());
        self.subst_vars(&m)
    }

    /// Substitutes loop variables everywhere: inside load indices (affinely)
    /// and where they appear as scalar values.
    pub fn subst_index_vars(&self, map: &BTreeMap<String, Index>) -> ScalarExpr {
        self.map(&mut |e| match e {
            ScalarExpr::Load(l) => ScalarExpr::Load(Load {
                tensor: l.tensor,
                indices: l.indices.iter().map(|ix| ix.substitute(map)).collect(),
            }),
            ScalarExpr::Var(v) => match map.get(&v) {
                Some(ix) => index_to_expr(ix),
                None => ScalarExpr::Var(v),
            },
            other => other,
        })
    }

    pub fn rename_tensors(&self, map: &BTreeMap<String, String>) -> ScalarExpr {
        self.map(&mut |e| match e {
            ScalarExpr::Load(l) => ScalarExpr::Load(Load {
                tensor: map.get(&l.tensor).cloned().unwrap_or(l.tensor),
                indices: l.indices,
            }),
            other => other,
        })
    }

    /// Replaces every load equal to `from` with `to`.
    pub fn replace_load(&self, from: &Load, to: &ScalarExpr) -> ScalarExpr {
        self.map(&mut |e| match &e {
            ScalarExpr::Load(l) if l == from => to.clone(),
            _ => e,
        })
    }

    pub fn as_lit(&self) -> Option<f64> {
        match self {
            ScalarExpr::Lit(v) => Some(*v),
            _ => None,
        }
    }
}

/// Renders an affine index as a scalar expression (used when a loop variable
/// that appears as a value is substituted).
pub fn index_to_expr(ix: &Index) -> ScalarExpr {
    let mut acc: Option<ScalarExpr> = None;
    for (v, c) in &ix.terms {
        let term = if *c == 1 {
            ScalarExpr::var(v)
        } else {
            ScalarExpr::bin(BinOp::Mul, ScalarExpr::var(v), ScalarExpr::lit(*c as f64))
        };
        acc = Some(match acc {
            None => term,
            Some(a) => ScalarExpr::bin(BinOp::Add, a, term),
        });
    }
    match (acc, ix.constant) {
        (None, c) => ScalarExpr::lit(c as f64),
        (Some(a), 0) => a,
        (Some(a), c) => ScalarExpr::bin(BinOp::Add, a, ScalarExpr::lit(c as f64)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_normalizes() {
        let ix = Index::from_terms([("j".into(), 1), ("i".into(), 2), ("j".into(), -1)], 3);
        assert_eq!(ix.terms, vec![("i".to_string(), 2)]);
        assert_eq!(ix.constant, 3);
    }

    #[test]
    fn index_substitution_is_affine() {
        let ix = Index::from_terms([("j".into(), 3)], 1);
        let mut m = BTreeMap::new();
        m.insert("j".to_string(), Index::from_terms([("j0".into(), 2), ("j1".into(), 1)], 0));
        let out = ix.substitute(&m);
        assert_eq!(out, Index::from_terms([("j0".into(), 6), ("j1".into(), 3)], 1));
    }

    #[test]
    fn reducer_identities_are_neutral() {
        for r in Reducer::ALL {
            for x in [-3.5, 0.0, 1.0, 7.25] {
                assert_eq!(r.apply(r.identity(), x), x, "{r}");
            }
        }
    }
}
