//! Weights `w(x, y) ≥ 0` on incidence relations.
//!
//! Grammar (whitespace ignored, variables 1-based):
//!
//! ```text
//! expr   := term ('+' term)*
//! term   := factor ('*' factor)*
//! factor := atom ('^' number)?
//! atom   := number | 'dxnorm' | 'x' index | 'y' index | '(' expr ')'
//! ```
//!
//! `dxnorm` is `‖d_xπ(x, y)‖` for the standard basis.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum WeightExpr {
    Num(f64),
    DxNorm,
    X(usize),
    Y(usize),
    Add(Box<WeightExpr>, Box<WeightExpr>),
    Mul(Box<WeightExpr>, Box<WeightExpr>),
    Pow(Box<WeightExpr>, f64),
}

/// Values a weight may depend on.
#[derive(Debug, Clone, Copy)]
pub struct WeightContext<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub dxnorm: f64,
}

impl WeightExpr {
    pub fn one() -> Self {
        WeightExpr::Num(1.0)
    }

    pub fn parse(src: &str) -> Result<Self> {
        let mut p = Parser { s: src.as_bytes(), i: 0 };
        let e = p.expr()?;
        p.ws();
        if p.i != p.s.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, c: &WeightContext) -> f64 {
        match self {
            WeightExpr::Num(v) => *v,
            WeightExpr::DxNorm => c.dxnorm,
            WeightExpr::X(i) => c.x.get(*i).copied().unwrap_or(f64::NAN),
            WeightExpr::Y(i) => c.y.get(*i).copied().unwrap_or(f64::NAN),
            WeightExpr::Add(a, b) => a.eval(c) + b.eval(c),
            WeightExpr::Mul(a, b) => a.eval(c) * b.eval(c),
            WeightExpr::Pow(a, e) => a.eval(c).powf(*e),
        }
    }

    /// Largest 1-based variable indices used, `(x, y)`.
    pub fn max_indices(&self) -> (usize, usize) {
        match self {
            WeightExpr::X(i) => (i + 1, 0),
            WeightExpr::Y(i) => (0, i + 1),
            WeightExpr::Add(a, b) | WeightExpr::Mul(a, b) => {
                let (p, q) = (a.max_indices(), b.max_indices());
                (p.0.max(q.0), p.1.max(q.1))
            }
            WeightExpr::Pow(a, _) => a.max_indices(),
            _ => (0, 0),
        }
    }

    pub fn is_constant_one(&self) -> bool {
        matches!(self, WeightExpr::Num(v) if *v == 1.0)
    }
}

impl fmt::Display for WeightExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightExpr::Num(v) => write!(f, "{v}"),
            WeightExpr::DxNorm => write!(f, "dxnorm"),
            WeightExpr::X(i) => write!(f, "x{}", i + 1),
            WeightExpr::Y(i) => write!(f, "y{}", i + 1),
            WeightExpr::Add(a, b) => write!(f, "({a} + {b})"),
            WeightExpr::Mul(a, b) => write!(f, "{a} * {b}"),
            WeightExpr::Pow(a, e) => write!(f, "({a})^{e}"),
        }
    }
}

struct Parser<'a> {
    s: &'a [u8],
    i: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse(format!("weight expression, column {}: {msg}", self.i + 1))
    }

    fn ws(&mut self) {
        while self.i < self.s.len() && self.s[self.i].is_ascii_whitespace() {
            self.i += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.ws();
        if self.s.get(self.i) == Some(&c) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<WeightExpr> {
        let mut e = self.term()?;
        while self.eat(b'+') {
            e = WeightExpr::Add(Box::new(e), Box::new(self.term()?));
        }
        Ok(e)
    }

    fn term(&mut self) -> Result<WeightExpr> {
        let mut e = self.factor()?;
        while self.eat(b'*') {
            e = WeightExpr::Mul(Box::new(e), Box::new(self.factor()?));
        }
        Ok(e)
    }

    fn factor(&mut self) -> Result<WeightExpr> {
        let a = self.atom()?;
        if self.eat(b'^') {
            self.ws();
            let e = self.number()?;
            return Ok(WeightExpr::Pow(Box::new(a), e));
        }
        Ok(a)
    }

    fn number(&mut self) -> Result<f64> {
        let start = self.i;
        while self.i < self.s.len() {
            let c = self.s[self.i];
            let exp_sign = (c == b'-' || c == b'+')
                && self.i > start
                && matches!(self.s[self.i - 1], b'e' | b'E');
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign || (c == b'-' && self.i == start) {
                self.i += 1;
            } else {
                break;
            }
        }
        let txt = std::str::from_utf8(&self.s[start..self.i]).unwrap_or("");
        txt.parse::<f64>().map_err(|_| {
            self.i = start;
            self.err("expected a number")
        })
    }

    fn index(&mut self) -> Result<usize> {
        let start = self.i;
        while self.i < self.s.len() && self.s[self.i].is_ascii_digit() {
            self.i += 1;
        }
        let v: usize = std::str::from_utf8(&self.s[start..self.i])
            .unwrap_or("")
            .parse()
            .map_err(|_| self.err("expected a variable index"))?;
        if v == 0 {
            return Err(self.err("variable indices start at 1"));
        }
        Ok(v - 1)
    }

    fn atom(&mut self) -> Result<WeightExpr> {
        self.ws();
        if self.eat(b'(') {
            let e = self.expr()?;
            if !self.eat(b')') {
                return Err(self.err("expected ')'"));
            }
            return Ok(e);
        }
        let rest = &self.s[self.i..];
        if rest.starts_with(b"dxnorm") {
            self.i += 6;
            return Ok(WeightExpr::DxNorm);
        }
        match rest.first() {
            Some(b'x') => {
                self.i += 1;
                Ok(WeightExpr::X(self.index()?))
            }
            Some(b'y') => {
                self.i += 1;
                Ok(WeightExpr::Y(self.index()?))
            }
            Some(c) if c.is_ascii_digit() || *c == b'.' => Ok(WeightExpr::Num(self.number()?)),
            _ => Err(self.err("expected a number, dxnorm, x<i>, y<i> or '('")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx<'a>(x: &'a [f64], y: &'a [f64]) -> WeightContext<'a> {
        WeightContext { x, y, dxnorm: 2.5 }
    }

    #[test]
    fn parses_and_evaluates() {
        let e = WeightExpr::parse("2 * x1 * (y2 + 1)^2 + dxnorm").unwrap();
        let v = e.eval(&ctx(&[3.0], &[0.0, 1.0]));
        assert_eq!(v, 2.0 * 3.0 * 4.0 + 2.5);
        assert_eq!(e.max_indices(), (1, 2));
    }

    #[test]
    fn scientific_numbers() {
        let e = WeightExpr::parse("1.5e-1 * dxnorm ^ 0.5").unwrap();
        assert!((e.eval(&ctx(&[], &[])) - 0.15 * 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn errors_report_column() {
        let err = WeightExpr::parse("x1 * * 2").unwrap_err();
        assert!(matches!(err, Error::Parse(ref m) if m.contains("column")), "{err}");
        assert!(WeightExpr::parse("x0").is_err());
        assert!(WeightExpr::parse("(x1").is_err());
        assert!(WeightExpr::parse("x1 y1").is_err());
    }

    #[test]
    fn display_round_trips() {
        let e = WeightExpr::parse("(x1 + 2) * y1 ^ 3").unwrap();
        let again = WeightExpr::parse(&e.to_string()).unwrap();
        let c = ctx(&[0.7], &[1.3]);
        assert_eq!(e.eval(&c), again.eval(&c));
    }
}
