//! Arithmetic expressions over the variables `z` (total local population) and
//! `a` (age), entered as text so a config file fully defines an experiment.
//!
//! Grammar:
//!
//! ```text
//! expr   := ('+'|'-')? term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := base ('^' number)?
//! base   := number | 'z' | 'a' | func '(' expr ')' | '(' expr ')'
//! func   := exp | log | sin | cos | sqrt
//! ```
//!
//! Evaluation is deterministic and side-effect free; division by zero and
//! non-finite results are reported at evaluation time, not at parse time.

use crate::error::{Error, EvalErrorKind, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Exp => x.exp(),
            Func::Log => x.ln(),
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Sqrt => x.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Z,
    Age,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr> {
        let mut p = Parser::new(text);
        let e = p.expr()?;
        p.skip_ws();
        if p.pos < p.bytes.len() {
            return Err(Error::Parse {
                position: p.pos,
                message: format!("unexpected trailing input `{}`", &text[p.pos..]),
            });
        }
        Ok(e)
    }

    /// Raw evaluation; callers wanting error context use `CoefficientFn`.
    pub fn eval(&self, z: f64, age: f64) -> std::result::Result<f64, EvalErrorKind> {
        let v = match self {
            Expr::Num(c) => *c,
            Expr::Z => z,
            Expr::Age => age,
            Expr::Neg(e) => -e.eval(z, age)?,
            Expr::Add(l, r) => l.eval(z, age)? + r.eval(z, age)?,
            Expr::Sub(l, r) => l.eval(z, age)? - r.eval(z, age)?,
            Expr::Mul(l, r) => l.eval(z, age)? * r.eval(z, age)?,
            Expr::Div(l, r) => {
                let den = r.eval(z, age)?;
                if den == 0.0 {
                    return Err(EvalErrorKind::DivisionByZero);
                }
                l.eval(z, age)? / den
            }
            Expr::Pow(b, e) => b.eval(z, age)?.powf(*e),
            Expr::Call(f, e) => f.apply(e.eval(z, age)?),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalErrorKind::NonFinite)
        }
    }

    /// True when the expression never reads `z`.
    pub fn is_z_free(&self) -> bool {
        match self {
            Expr::Num(_) | Expr::Age => true,
            Expr::Z => false,
            Expr::Neg(e) | Expr::Call(_, e) => e.is_z_free(),
            Expr::Pow(b, _) => b.is_z_free(),
            Expr::Add(l, r) | Expr::Sub(l, r) | Expr::Mul(l, r) | Expr::Div(l, r) => {
                l.is_z_free() && r.is_z_free()
            }
        }
    }

    // Neg prints at additive precedence: a leading `-` only parses at the
    // start of an expression, so it must be parenthesized in any tighter
    // position and as a right operand.
    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) | Expr::Neg(_) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Pow(..) => 4,
            Expr::Num(_) | Expr::Z | Expr::Age | Expr::Call(..) => 5,
        }
    }

    fn fmt_child(
        &self,
        f: &mut std::fmt::Formatter<'_>,
        parent_prec: u8,
        right_assoc_guard: bool,
    ) -> std::fmt::Result {
        let needs = self.precedence() < parent_prec
            || (right_assoc_guard && self.precedence() == parent_prec);
        if needs {
            write!(f, "(")?;
            write!(f, "{self}")?;
            write!(f, ")")
        } else {
            write!(f, "{self}")
        }
    }
}

/// Pretty-printing preserves the tree structure exactly, so parsing the
/// printed form evaluates bit-identically.
impl std::fmt::Display for Expr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Expr::Num(c) => {
                if *c < 0.0 {
                    write!(f, "({c})")
                } else {
                    write!(f, "{c}")
                }
            }
            Expr::Z => write!(f, "z"),
            Expr::Age => write!(f, "a"),
            Expr::Neg(e) => {
                write!(f, "-")?;
                e.fmt_child(f, 3, true)
            }
            Expr::Add(l, r) => {
                l.fmt_child(f, 1, false)?;
                write!(f, " + ")?;
                r.fmt_child(f, 1, true)
            }
            Expr::Sub(l, r) => {
                l.fmt_child(f, 1, false)?;
                write!(f, " - ")?;
                r.fmt_child(f, 1, true)
            }
            Expr::Mul(l, r) => {
                l.fmt_child(f, 2, false)?;
                write!(f, "*")?;
                r.fmt_child(f, 2, true)
            }
            Expr::Div(l, r) => {
                l.fmt_child(f, 2, false)?;
                write!(f, "/")?;
                r.fmt_child(f, 2, true)
            }
            Expr::Pow(b, e) => {
                b.fmt_child(f, 5, false)?;
                if *e < 0.0 {
                    write!(f, "^({e})")
                } else {
                    write!(f, "^{e}")
                }
            }
            Expr::Call(func, e) => write!(f, "{}({})", func.name(), e),
        }
    }
}

struct Parser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            text,
            bytes: text.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut node = match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Expr::Neg(Box::new(self.term()?))
            }
            Some(b'+') => {
                self.pos += 1;
                self.term()?
            }
            _ => self.term()?,
        };
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    node = Expr::Add(Box::new(node), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    node = Expr::Sub(Box::new(node), Box::new(self.term()?));
                }
                _ => return Ok(node),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut node = self.factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    node = Expr::Mul(Box::new(node), Box::new(self.factor()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    node = Expr::Div(Box::new(node), Box::new(self.factor()?));
                }
                _ => return Ok(node),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        let base = self.base()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let parenthesized = self.bytes.get(self.pos) == Some(&b'(');
            if parenthesized {
                self.pos += 1;
                self.skip_ws();
            }
            let exponent = self.number()?;
            if parenthesized {
                self.skip_ws();
                self.expect(b')')?;
            }
            Ok(Expr::Pow(Box::new(base), exponent))
        } else {
            Ok(base)
        }
    }

    fn base(&mut self) -> Result<Expr> {
        match self.peek() {
            None => Err(Error::Parse {
                position: self.pos,
                message: "unexpected end of input".into(),
            }),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => Ok(Expr::Num(self.number()?)),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.bytes.len()
                    && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let ident = &self.text[start..self.pos];
                match ident {
                    "z" => Ok(Expr::Z),
                    "a" => Ok(Expr::Age),
                    "exp" | "log" | "sin" | "cos" | "sqrt" => {
                        let func = match ident {
                            "exp" => Func::Exp,
                            "log" => Func::Log,
                            "sin" => Func::Sin,
                            "cos" => Func::Cos,
                            _ => Func::Sqrt,
                        };
                        self.expect(b'(')?;
                        let arg = self.expr()?;
                        self.expect(b')')?;
                        Ok(Expr::Call(func, Box::new(arg)))
                    }
                    _ => Err(Error::UnknownIdentifier {
                        name: ident.to_string(),
                        position: start,
                    }),
                }
            }
            Some(c) => Err(Error::Parse {
                position: self.pos,
                message: format!("unexpected character `{}`", c as char),
            }),
        }
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        let mut saw_negative = false;
        if self.bytes.get(self.pos) == Some(&b'-') {
            saw_negative = true;
            self.pos += 1;
        }
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.bytes.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if matches!(self.bytes.get(self.pos), Some(b'e') | Some(b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.bytes.get(self.pos), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            if self
                .bytes
                .get(self.pos)
                .map(|c| c.is_ascii_digit())
                .unwrap_or(false)
            {
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                // `e` was not an exponent marker
                self.pos = mark;
            }
        }
        let slice = &self.text[start..self.pos];
        if slice.is_empty() || (saw_negative && slice.len() == 1) {
            return Err(Error::Parse {
                position: start,
                message: "expected a number".into(),
            });
        }
        slice.parse::<f64>().map_err(|_| Error::Parse {
            position: start,
            message: format!("invalid number `{slice}`"),
        })
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Parse {
                position: self.pos,
                message: format!("expected `{}`", c as char),
            })
        }
    }
}
