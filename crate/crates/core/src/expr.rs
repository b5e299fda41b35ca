//! Predicate expressions over named measures.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! or    := and ("||" and)*
//! and   := cmp ("&&" cmp)*
//! cmp   := sum (("<" | "<=" | ">" | ">=" | "==" | "!=") sum)?
//! sum   := prod (("+" | "-") prod)*
//! prod  := unary (("*" | "/") unary)*
//! unary := ("!" | "-") unary | atom
//! atom  := number | "true" | "false" | ident | ident "(" or ("," or)* ")" | "(" or ")"
//! ```
//!
//! Functions: `min`, `max` (one or more arguments) and `abs`. Both operands
//! of `&&` and `||` are always evaluated.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub type Bindings = BTreeMap<String, f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("at {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("type error: {0}")]
    Type(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::And => "&&",
            BinOp::Or => "||",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Func {
    Min,
    Max,
    Abs,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Bool(bool),
    Var(String),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Val {
    Num(f64),
    Bool(bool),
}

impl Val {
    fn num(self) -> Result<f64, ExprError> {
        match self {
            Val::Num(x) => Ok(x),
            Val::Bool(b) => Err(ExprError::Type(format!("expected a number, got {b}"))),
        }
    }

    fn boolean(self) -> Result<bool, ExprError> {
        match self {
            Val::Bool(b) => Ok(b),
            Val::Num(x) => Err(ExprError::Type(format!("expected a boolean, got {x}"))),
        }
    }
}

impl Expr {
    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn bin(op: BinOp, l: Expr, r: Expr) -> Expr {
        Expr::Bin(op, Box::new(l), Box::new(r))
    }

    /// Variables the expression reads.
    pub fn vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) | Expr::Bool(_) => {}
            Expr::Var(v) => {
                out.insert(v.clone());
            }
            Expr::Neg(e) | Expr::Not(e) => e.collect_vars(out),
            Expr::Bin(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    pub fn eval(&self, env: &Bindings) -> Result<Val, ExprError> {
        Ok(match self {
            Expr::Num(x) => Val::Num(*x),
            Expr::Bool(b) => Val::Bool(*b),
            Expr::Var(v) => Val::Num(*env.get(v).ok_or_else(|| ExprError::Unbound(v.clone()))?),
            Expr::Neg(e) => Val::Num(-e.eval(env)?.num()?),
            Expr::Not(e) => Val::Bool(!e.eval(env)?.boolean()?),
            Expr::Bin(op, l, r) => {
                let (a, b) = (l.eval(env)?, r.eval(env)?);
                match op {
                    BinOp::Add => Val::Num(a.num()? + b.num()?),
                    BinOp::Sub => Val::Num(a.num()? - b.num()?),
                    BinOp::Mul => Val::Num(a.num()? * b.num()?),
                    BinOp::Div => Val::Num(a.num()? / b.num()?),
                    BinOp::Lt => Val::Bool(a.num()? < b.num()?),
                    BinOp::Le => Val::Bool(a.num()? <= b.num()?),
                    BinOp::Gt => Val::Bool(a.num()? > b.num()?),
                    BinOp::Ge => Val::Bool(a.num()? >= b.num()?),
                    BinOp::Eq | BinOp::Ne => {
                        let same = match (a, b) {
                            (Val::Num(x), Val::Num(y)) => x == y,
                            (Val::Bool(x), Val::Bool(y)) => x == y,
                            _ => return Err(ExprError::Type("comparing a number with a boolean".into())),
                        };
                        Val::Bool(same == (*op == BinOp::Eq))
                    }
                    BinOp::And => Val::Bool(a.boolean()? & b.boolean()?),
                    BinOp::Or => Val::Bool(a.boolean()? | b.boolean()?),
                }
            }
            Expr::Call(f, args) => {
                let xs = args.iter().map(|a| a.eval(env)?.num()).collect::<Result<Vec<f64>, _>>()?;
                match f {
                    Func::Min => Val::Num(xs.into_iter().fold(f64::INFINITY, f64::min)),
                    Func::Max => Val::Num(xs.into_iter().fold(f64::NEG_INFINITY, f64::max)),
                    Func::Abs => Val::Num(xs[0].abs()),
                }
            }
        })
    }

    pub fn eval_num(&self, env: &Bindings) -> Result<f64, ExprError> {
        self.eval(env)?.num()
    }

    pub fn eval_bool(&self, env: &Bindings) -> Result<bool, ExprError> {
        self.eval(env)?.boolean()
    }
}

/// Fully parenthesised; parses back to an expression with the same value.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(x) if x.is_sign_negative() => write!(f, "(-{:?})", -x),
            Expr::Num(x) => write!(f, "{x:?}"),
            Expr::Bool(b) => write!(f, "{b}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Not(e) => write!(f, "(!{e})"),
            Expr::Bin(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Call(func, args) => {
                let name = match func {
                    Func::Min => "min",
                    Func::Max => "max",
                    Func::Abs => "abs",
                };
                write!(f, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl FromStr for Expr {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = Parser { src: s.as_bytes(), pos: 0 };
        let e = p.or()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("trailing input"));
        }
        Ok(e)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> ExprError {
        ExprError::Parse { pos: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(tok.as_bytes()) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn or(&mut self) -> Result<Expr, ExprError> {
        let mut e = self.and()?;
        while self.eat("||") {
            e = Expr::bin(BinOp::Or, e, self.and()?);
        }
        Ok(e)
    }

    fn and(&mut self) -> Result<Expr, ExprError> {
        let mut e = self.cmp()?;
        while self.eat("&&") {
            e = Expr::bin(BinOp::And, e, self.cmp()?);
        }
        Ok(e)
    }

    fn cmp(&mut self) -> Result<Expr, ExprError> {
        let l = self.sum()?;
        for (tok, op) in [
            ("<=", BinOp::Le),
            (">=", BinOp::Ge),
            ("==", BinOp::Eq),
            ("!=", BinOp::Ne),
            ("<", BinOp::Lt),
            (">", BinOp::Gt),
        ] {
            if self.eat(tok) {
                return Ok(Expr::bin(op, l, self.sum()?));
            }
        }
        Ok(l)
    }

    fn sum(&mut self) -> Result<Expr, ExprError> {
        let mut e = self.prod()?;
        loop {
            if self.eat("+") {
                e = Expr::bin(BinOp::Add, e, self.prod()?);
            } else if self.eat("-") {
                e = Expr::bin(BinOp::Sub, e, self.prod()?);
            } else {
                return Ok(e);
            }
        }
    }

    fn prod(&mut self) -> Result<Expr, ExprError> {
        let mut e = self.unary()?;
        loop {
            if self.eat("*") {
                e = Expr::bin(BinOp::Mul, e, self.unary()?);
            } else if self.eat("/") {
                e = Expr::bin(BinOp::Div, e, self.unary()?);
            } else {
                return Ok(e);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.peek() == Some(b'!') && self.src.get(self.pos + 1) != Some(&b'=') {
            self.pos += 1;
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        if self.eat("-") {
            return Ok(match self.unary()? {
                Expr::Num(x) => Expr::Num(-x),
                e => Expr::Neg(Box::new(e)),
            });
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.or()?;
                if !self.eat(")") {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || matches!(self.src[self.pos], b'_' | b'.'))
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii identifier");
                match name {
                    "true" => return Ok(Expr::Bool(true)),
                    "false" => return Ok(Expr::Bool(false)),
                    _ => {}
                }
                if self.peek() != Some(b'(') {
                    return Ok(Expr::Var(name.to_string()));
                }
                let func = match name {
                    "min" => Func::Min,
                    "max" => Func::Max,
                    "abs" => Func::Abs,
                    _ => return Err(ExprError::Parse { pos: start, msg: format!("unknown function `{name}`") }),
                };
                self.pos += 1;
                let mut args = vec![self.or()?];
                while self.eat(",") {
                    args.push(self.or()?);
                }
                if !self.eat(")") {
                    return Err(self.error("expected `)`"));
                }
                if func == Func::Abs && args.len() != 1 {
                    return Err(ExprError::Parse { pos: start, msg: "abs takes one argument".into() });
                }
                Ok(Expr::Call(func, args))
            }
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < self.src.len() && matches!(self.src[self.pos], b'e' | b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && matches!(self.src[self.pos], b'+' | b'-') {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if digits == self.pos {
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii number");
        text.parse::<f64>()
            .map(Expr::Num)
            .map_err(|_| ExprError::Parse { pos: start, msg: format!("bad number `{text}`") })
    }
}
