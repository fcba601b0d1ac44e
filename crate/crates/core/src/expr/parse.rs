// SPDX-License-Identifier: Apache-2.0
//! Tokenizer and recursive-descent parser for the Python-like scalar syntax.
//! The loop and tile parsers reuse [`Lexer`] and [`Parser`].

use thiserror::Error;

use super::{BinOp, CmpOp, Cond, Index, Load, ScalarExpr, UnOp};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("parse error at column {col}: {msg}")]
pub struct ParseError {
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Num(f64),
    Sym(&'static str),
}

const SYMBOLS: [&str; 21] = [
    "+=", "<=", ">=", "==", "!=", "(", ")", "[", "]", ",", ":", "+", "-", "*", "/", "<", ">", "=",
    ".", "@", "'",
];

pub struct Lexer;

impl Lexer {
    pub fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
        let bytes = src.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                while i < bytes.len() && bytes[i] == b'\'' {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start));
                continue;
            }
            if c.is_ascii_digit() || (c == '.' && i + 1 < bytes.len() && (bytes[i + 1] as char).is_ascii_digit()) {
                let start = i;
                while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut k = i + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && (bytes[k] as char).is_ascii_digit() {
                        i = k;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| ParseError { col: start, msg: format!("bad number `{text}`") })?;
                out.push((Tok::Num(v), start));
                continue;
            }
            match SYMBOLS.iter().find(|s| src[i..].starts_with(**s)) {
                Some(s) => {
                    out.push((Tok::Sym(s), i));
                    i += s.len();
                }
                None => return Err(ParseError { col: i, msg: format!("unexpected character `{c}`") }),
            }
        }
        Ok(out)
    }
}

pub struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end_col: usize,
}

impl Parser {
    pub fn new(src: &str) -> Result<Self, ParseError> {
        Ok(Parser { toks: Lexer::tokenize(src)?, pos: 0, end_col: src.len() })
    }

    pub fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    pub fn peek_at(&self, k: usize) -> Option<&Tok> {
        self.toks.get(self.pos + k).map(|(t, _)| t)
    }

    pub fn col(&self) -> usize {
        self.toks.get(self.pos).map(|(_, c)| *c).unwrap_or(self.end_col)
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    pub fn error<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError { col: self.col(), msg: msg.into() })
    }

    pub fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        self.pos += 1;
        t
    }

    pub fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(x)) if *x == s)
    }

    pub fn is_ident(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(x)) if x == s)
    }

    pub fn eat_sym(&mut self, s: &str) -> bool {
        if self.is_sym(s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    pub fn eat_ident(&mut self, s: &str) -> bool {
        if self.is_ident(s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    pub fn expect_sym(&mut self, s: &str) -> Result<(), ParseError> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            self.error(format!("expected `{s}`"))
        }
    }

    pub fn expect_ident(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.error("expected identifier"),
        }
    }

    pub fn expect_keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.eat_ident(kw) {
            Ok(())
        } else {
            self.error(format!("expected `{kw}`"))
        }
    }

    pub fn expect_int(&mut self) -> Result<i64, ParseError> {
        let neg = self.eat_sym("-");
        match self.peek() {
            Some(Tok::Num(v)) if v.fract() == 0.0 => {
                let v = *v as i64;
                self.pos += 1;
                Ok(if neg { -v } else { v })
            }
            _ => self.error("expected integer"),
        }
    }

    pub fn expect_end(&self) -> Result<(), ParseError> {
        if self.at_end() {
            Ok(())
        } else {
            self.error("unexpected trailing input")
        }
    }

    /// `arith := term (('+' | '-') term)*`
    pub fn expr(&mut self) -> Result<ScalarExpr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat_sym("+") {
                BinOp::Add
            } else if self.eat_sym("-") {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = ScalarExpr::bin(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<ScalarExpr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat_sym("*") {
                BinOp::Mul
            } else if self.eat_sym("/") {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = ScalarExpr::bin(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<ScalarExpr, ParseError> {
        if self.eat_sym("-") {
            match self.peek() {
                Some(Tok::Num(v)) => {
                    let v = *v;
                    self.pos += 1;
                    return Ok(ScalarExpr::Lit(-v));
                }
                Some(Tok::Ident(s)) if s == "inf" => {
                    self.pos += 1;
                    return Ok(ScalarExpr::Lit(f64::NEG_INFINITY));
                }
                _ => return Ok(ScalarExpr::neg(self.unary()?)),
            }
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<ScalarExpr, ParseError> {
        match self.bump() {
            Some(Tok::Num(v)) => Ok(ScalarExpr::Lit(v)),
            Some(Tok::Sym("(")) => {
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => self.after_ident(name),
            _ => {
                self.pos -= 1;
                self.error("expected expression")
            }
        }
    }

    fn after_ident(&mut self, name: String) -> Result<ScalarExpr, ParseError> {
        match name.as_str() {
            "inf" => return Ok(ScalarExpr::Lit(f64::INFINITY)),
            "nan" | "NaN" => return Ok(ScalarExpr::Lit(f64::NAN)),
            _ => {}
        }
        if self.eat_sym("[") {
            let indices = self.index_list("]")?;
            return Ok(ScalarExpr::Load(Load { tensor: name, indices }));
        }
        if !self.eat_sym("(") {
            return Ok(ScalarExpr::Var(name));
        }
        match name.as_str() {
            "exp" | "log" | "tanh" => {
                let a = self.expr()?;
                self.expect_sym(")")?;
                let op = match name.as_str() {
                    "exp" => UnOp::Exp,
                    "log" => UnOp::Log,
                    _ => UnOp::Tanh,
                };
                Ok(ScalarExpr::un(op, a))
            }
            "max" | "min" => {
                let op = if name == "max" { BinOp::Max } else { BinOp::Min };
                let mut acc = self.expr()?;
                self.expect_sym(",")?;
                loop {
                    let next = self.expr()?;
                    acc = ScalarExpr::bin(op, acc, next);
                    if !self.eat_sym(",") {
                        break;
                    }
                }
                self.expect_sym(")")?;
                Ok(acc)
            }
            "select" => {
                let c = self.cond()?;
                self.expect_sym(",")?;
                let a = self.expr()?;
                self.expect_sym(",")?;
                let b = self.expr()?;
                self.expect_sym(")")?;
                Ok(ScalarExpr::select(c, a, b))
            }
            other => self.error(format!("unknown function `{other}`")),
        }
    }

    pub fn cond(&mut self) -> Result<Cond, ParseError> {
        let mut clauses = Vec::new();
        loop {
            let l = self.expr()?;
            let op = match self.bump() {
                Some(Tok::Sym("<")) => CmpOp::Lt,
                Some(Tok::Sym("<=")) => CmpOp::Le,
                Some(Tok::Sym(">")) => CmpOp::Gt,
                Some(Tok::Sym(">=")) => CmpOp::Ge,
                Some(Tok::Sym("==")) => CmpOp::Eq,
                Some(Tok::Sym("!=")) => CmpOp::Ne,
                _ => {
                    self.pos -= 1;
                    return self.error("expected comparison");
                }
            };
            let r = self.expr()?;
            clauses.push((op, l, r));
            if !self.eat_ident("and") {
                return Ok(Cond { clauses });
            }
        }
    }

    /// Comma-separated affine indices up to `close` (consumed).
    pub fn index_list(&mut self, close: &str) -> Result<Vec<Index>, ParseError> {
        let mut out = Vec::new();
        if self.eat_sym(close) {
            return Ok(out);
        }
        loop {
            out.push(self.index()?);
            if self.eat_sym(close) {
                return Ok(out);
            }
            self.expect_sym(",")?;
        }
    }

    pub fn index(&mut self) -> Result<Index, ParseError> {
        let col = self.col();
        let e = self.expr()?;
        expr_to_index(&e).ok_or(ParseError { col, msg: "index is not affine with integer coefficients".into() })
    }
}

fn expr_to_index(e: &ScalarExpr) -> Option<Index> {
    let int = |v: f64| if v.fract() == 0.0 && v.is_finite() { Some(v as i64) } else { None };
    match e {
        ScalarExpr::Lit(v) => Some(Index::constant(int(*v)?)),
        ScalarExpr::Var(v) => Some(Index::var(v)),
        ScalarExpr::Un(UnOp::Neg, a) => Some(expr_to_index(a)?.scale(-1)),
        ScalarExpr::Bin(BinOp::Add, a, b) => Some(expr_to_index(a)?.add(&expr_to_index(b)?)),
        ScalarExpr::Bin(BinOp::Sub, a, b) => Some(expr_to_index(a)?.add(&expr_to_index(b)?.scale(-1))),
        ScalarExpr::Bin(BinOp::Mul, a, b) => {
            let (a, b) = (expr_to_index(a)?, expr_to_index(b)?);
            if a.terms.is_empty() {
                Some(b.scale(a.constant))
            } else if b.terms.is_empty() {
                Some(a.scale(b.constant))
            } else {
                None
            }
        }
        _ => None,
    }
}

pub fn parse_expr(src: &str) -> Result<ScalarExpr, ParseError> {
    let mut p = Parser::new(src)?;
    let e = p.expr()?;
    p.expect_end()?;
    Ok(e)
}

pub fn parse_index(src: &str) -> Result<Index, ParseError> {
    let mut p = Parser::new(src)?;
    let ix = p.index()?;
    p.expect_end()?;
    Ok(ix)
}
