//! Closed-form radial functions `f(r)`.
//!
//! The grammar is deliberately tiny: real literals, the single variable `r`,
//! `+ - * / ^`, unary minus, `exp log sqrt sinh cosh tanh`, `min`, `max` and
//! `piecewise(r0, left, right)` (which is `left` for `r < r0` and `right`
//! otherwise). Precedence is `^` > unary minus > `* /` > `+ -`; `^` is right
//! associative, everything else left associative.
//!
//! Besides plain IEEE evaluation, expressions can be evaluated in signed-log
//! form ([`RadialExpr::eval_log`]) which keeps `r * exp(r^3)` meaningful at
//! radii where the value itself overflows, and they carry a symbolic
//! logarithmic derivative ([`RadialExpr::log_derivative`]) used for `σ'/σ`.

use std::fmt;

use thiserror::Error;

/// Built-in unary functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Sinh,
    Cosh,
    Tanh,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Sinh => "sinh",
            Func::Cosh => "cosh",
            Func::Tanh => "tanh",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "sinh" => Func::Sinh,
            "cosh" => Func::Cosh,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }
}

/// Binary arithmetic operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

/// Expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(f64),
    Var,
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    Piecewise {
        threshold: f64,
        left: Box<Expr>,
        right: Box<Expr>,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("syntax error at byte {offset}: found {found}, expected one of: {}", expected.join(", "))]
    Syntax {
        offset: usize,
        found: String,
        expected: Vec<&'static str>,
    },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("invalid literal `{text}` at byte {offset}")]
    BadLiteral { offset: usize, text: String },
    #[error("piecewise threshold at byte {offset} must be a finite constant >= 0")]
    BadThreshold { offset: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("domain error at r = {r}: {reason} in `{subtree}`")]
pub struct DomainError {
    pub r: f64,
    pub subtree: String,
    pub reason: &'static str,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("cannot differentiate non-smooth node `{subtree}`")]
pub struct NonSmoothError {
    pub subtree: String,
}

/// A value stored as `sign * exp(ln_abs)`.
///
/// `sign` is one of -1, 0, 1; when `sign == 0` the value is exactly zero and
/// `ln_abs` is `-inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogValue {
    pub sign: i8,
    pub ln_abs: f64,
}

impl LogValue {
    pub const ZERO: LogValue = LogValue {
        sign: 0,
        ln_abs: f64::NEG_INFINITY,
    };

    pub fn from_f64(x: f64) -> Self {
        if x == 0.0 {
            Self::ZERO
        } else {
            LogValue {
                sign: if x > 0.0 { 1 } else { -1 },
                ln_abs: x.abs().ln(),
            }
        }
    }

    pub fn positive(ln_abs: f64) -> Self {
        if ln_abs == f64::NEG_INFINITY {
            Self::ZERO
        } else {
            LogValue { sign: 1, ln_abs }
        }
    }

    /// Back to linear space; saturates to `±inf` on overflow.
    pub fn to_f64(self) -> f64 {
        match self.sign {
            0 => 0.0,
            s => f64::from(s) * self.ln_abs.exp(),
        }
    }

    fn neg(self) -> Self {
        LogValue {
            sign: -self.sign,
            ln_abs: self.ln_abs,
        }
    }

    pub fn add(self, other: Self) -> Self {
        if self.sign == 0 {
            return other;
        }
        if other.sign == 0 {
            return self;
        }
        let (big, small) = if self.ln_abs >= other.ln_abs {
            (self, other)
        } else {
            (other, self)
        };
        let d = small.ln_abs - big.ln_abs;
        if big.sign == small.sign {
            LogValue {
                sign: big.sign,
                ln_abs: big.ln_abs + d.exp().ln_1p(),
            }
        } else if d == 0.0 {
            Self::ZERO
        } else {
            LogValue {
                sign: big.sign,
                ln_abs: big.ln_abs + (-d.exp()).ln_1p(),
            }
        }
    }

    pub fn mul(self, other: Self) -> Self {
        if self.sign == 0 || other.sign == 0 {
            return Self::ZERO;
        }
        LogValue {
            sign: self.sign * other.sign,
            ln_abs: self.ln_abs + other.ln_abs,
        }
    }

    /// Total order on the represented reals.
    fn less_than(self, other: Self) -> bool {
        match self.sign.cmp(&other.sign) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => match self.sign {
                0 => false,
                1 => self.ln_abs < other.ln_abs,
                _ => self.ln_abs > other.ln_abs,
            },
        }
    }
}

/// A parsed radial function. Immutable once built; cheap to clone.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialExpr {
    root: Expr,
}

impl RadialExpr {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        Parser::new(text).parse()
    }

    pub fn constant(c: f64) -> Self {
        RadialExpr { root: Expr::Lit(c) }
    }

    pub fn from_expr(root: Expr) -> Self {
        RadialExpr { root }
    }

    pub fn expr(&self) -> &Expr {
        &self.root
    }

    /// `true` if the expression does not mention `r`.
    pub fn is_constant(&self) -> bool {
        !mentions_var(&self.root)
    }

    /// `Some(c)` if the tree is the literal `c`.
    pub fn as_literal(&self) -> Option<f64> {
        match self.root {
            Expr::Lit(c) => Some(c),
            _ => None,
        }
    }

    pub fn eval(&self, r: f64) -> Result<f64, DomainError> {
        eval(&self.root, r)
    }

    /// Signed-log evaluation; never overflows for expressions whose logarithm
    /// is representable.
    pub fn eval_log(&self, r: f64) -> Result<LogValue, DomainError> {
        eval_log(&self.root, r)
    }

    /// Exact symbolic derivative with constant folding.
    pub fn differentiate(&self) -> Result<RadialExpr, NonSmoothError> {
        Ok(RadialExpr {
            root: diff(&self.root)?,
        })
    }

    /// Symbolic `f'/f`, built so that products and exponentials never form
    /// the (possibly overflowing) quotient explicitly: `d/dr log(r*exp(r^3))`
    /// becomes `1/r + 3*r^2`.
    pub fn log_derivative(&self) -> Result<RadialExpr, NonSmoothError> {
        Ok(RadialExpr {
            root: dlog(&self.root)?,
        })
    }

    // Builders used when constructing potentials programmatically.

    pub fn add(self, other: RadialExpr) -> RadialExpr {
        RadialExpr::from_expr(Expr::Bin(BinOp::Add, Box::new(self.root), Box::new(other.root)))
    }

    pub fn mul(self, other: RadialExpr) -> RadialExpr {
        RadialExpr::from_expr(Expr::Bin(BinOp::Mul, Box::new(self.root), Box::new(other.root)))
    }

    pub fn piecewise(threshold: f64, left: RadialExpr, right: RadialExpr) -> RadialExpr {
        assert!(threshold.is_finite() && threshold >= 0.0);
        RadialExpr::from_expr(Expr::Piecewise {
            threshold,
            left: Box::new(left.root),
            right: Box::new(right.root),
        })
    }
}

impl fmt::Display for RadialExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)
    }
}

impl std::str::FromStr for RadialExpr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RadialExpr::parse(s)
    }
}

fn fmt_literal(c: f64) -> String {
    if c < 0.0 || (c == 0.0 && c.is_sign_negative()) {
        format!("(-{:?})", -c)
    } else {
        format!("{c:?}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(c) => f.write_str(&fmt_literal(*c)),
            Expr::Var => f.write_str("r"),
            Expr::Neg(a) => match a.as_ref() {
                // keep `-(2.0)` distinct from the literal `-2.0`
                Expr::Lit(_) => write!(f, "(-({a}))"),
                _ => write!(f, "(-{a})"),
            },
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
            Expr::Min(a, b) => write!(f, "min({a}, {b})"),
            Expr::Max(a, b) => write!(f, "max({a}, {b})"),
            Expr::Piecewise { threshold, left, right } => {
                write!(f, "piecewise({}, {left}, {right})", fmt_literal(*threshold))
            }
        }
    }
}

fn mentions_var(e: &Expr) -> bool {
    match e {
        Expr::Lit(_) => false,
        Expr::Var => true,
        Expr::Neg(a) | Expr::Call(_, a) => mentions_var(a),
        Expr::Bin(_, a, b) | Expr::Min(a, b) | Expr::Max(a, b) => mentions_var(a) || mentions_var(b),
        Expr::Piecewise { left, right, .. } => mentions_var(left) || mentions_var(right),
    }
}

fn domain(r: f64, e: &Expr, reason: &'static str) -> DomainError {
    DomainError {
        r,
        subtree: e.to_string(),
        reason,
    }
}

fn eval(e: &Expr, r: f64) -> Result<f64, DomainError> {
    let v = match e {
        Expr::Lit(c) => *c,
        Expr::Var => r,
        Expr::Neg(a) => -eval(a, r)?,
        Expr::Bin(op, a, b) => {
            let x = eval(a, r)?;
            let y = eval(b, r)?;
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => {
                    if y == 0.0 {
                        return Err(domain(r, e, "division by zero"));
                    }
                    x / y
                }
                BinOp::Pow => {
                    if x == 0.0 && y < 0.0 {
                        return Err(domain(r, e, "zero to a negative power"));
                    }
                    if x < 0.0 && y.fract() != 0.0 {
                        return Err(domain(r, e, "negative base with non-integer exponent"));
                    }
                    x.powf(y)
                }
            }
        }
        Expr::Call(func, a) => {
            let x = eval(a, r)?;
            match func {
                Func::Exp => x.exp(),
                Func::Log => {
                    if x <= 0.0 {
                        return Err(domain(r, e, "log of a nonpositive value"));
                    }
                    x.ln()
                }
                Func::Sqrt => {
                    if x < 0.0 {
                        return Err(domain(r, e, "sqrt of a negative value"));
                    }
                    x.sqrt()
                }
                Func::Sinh => x.sinh(),
                Func::Cosh => x.cosh(),
                Func::Tanh => x.tanh(),
            }
        }
        Expr::Min(a, b) => eval(a, r)?.min(eval(b, r)?),
        Expr::Max(a, b) => eval(a, r)?.max(eval(b, r)?),
        Expr::Piecewise { threshold, left, right } => {
            if r < *threshold {
                eval(left, r)?
            } else {
                eval(right, r)?
            }
        }
    };
    if v.is_nan() {
        return Err(domain(r, e, "not a number"));
    }
    Ok(v)
}

const LN_2: f64 = std::f64::consts::LN_2;

fn eval_log(e: &Expr, r: f64) -> Result<LogValue, DomainError> {
    let v = match e {
        Expr::Lit(c) => LogValue::from_f64(*c),
        Expr::Var => LogValue::from_f64(r),
        Expr::Neg(a) => eval_log(a, r)?.neg(),
        Expr::Bin(op, a, b) => {
            let x = eval_log(a, r)?;
            let y = eval_log(b, r)?;
            match op {
                BinOp::Add => x.add(y),
                BinOp::Sub => x.add(y.neg()),
                BinOp::Mul => x.mul(y),
                BinOp::Div => {
                    if y.sign == 0 {
                        return Err(domain(r, e, "division by zero"));
                    }
                    if x.sign == 0 {
                        LogValue::ZERO
                    } else {
                        LogValue {
                            sign: x.sign * y.sign,
                            ln_abs: x.ln_abs - y.ln_abs,
                        }
                    }
                }
                BinOp::Pow => {
                    let p = y.to_f64();
                    match x.sign {
                        0 => {
                            if p < 0.0 {
                                return Err(domain(r, e, "zero to a negative power"));
                            } else if p == 0.0 {
                                LogValue::from_f64(1.0)
                            } else {
                                LogValue::ZERO
                            }
                        }
                        1 => LogValue::positive(p * x.ln_abs),
                        _ => {
                            if p.fract() != 0.0 {
                                return Err(domain(r, e, "negative base with non-integer exponent"));
                            }
                            let odd = (p % 2.0).abs() == 1.0;
                            LogValue {
                                sign: if odd { -1 } else { 1 },
                                ln_abs: p * x.ln_abs,
                            }
                        }
                    }
                }
            }
        }
        Expr::Call(func, a) => {
            let x = eval_log(a, r)?;
            match func {
                Func::Exp => LogValue::positive(x.to_f64()),
                Func::Log => {
                    if x.sign <= 0 {
                        return Err(domain(r, e, "log of a nonpositive value"));
                    }
                    LogValue::from_f64(x.ln_abs)
                }
                Func::Sqrt => {
                    if x.sign < 0 {
                        return Err(domain(r, e, "sqrt of a negative value"));
                    }
                    if x.sign == 0 {
                        LogValue::ZERO
                    } else {
                        LogValue::positive(0.5 * x.ln_abs)
                    }
                }
                Func::Sinh | Func::Cosh => {
                    let t = x.to_f64();
                    if t.abs() < 20.0 {
                        LogValue::from_f64(if *func == Func::Sinh { t.sinh() } else { t.cosh() })
                    } else {
                        let tail = (-2.0 * t.abs()).exp();
                        let (sign, corr) = if *func == Func::Sinh {
                            (if t > 0.0 { 1 } else { -1 }, (-tail).ln_1p())
                        } else {
                            (1, tail.ln_1p())
                        };
                        LogValue {
                            sign,
                            ln_abs: t.abs() - LN_2 + corr,
                        }
                    }
                }
                Func::Tanh => LogValue::from_f64(x.to_f64().tanh()),
            }
        }
        Expr::Min(a, b) => {
            let (x, y) = (eval_log(a, r)?, eval_log(b, r)?);
            if y.less_than(x) {
                y
            } else {
                x
            }
        }
        Expr::Max(a, b) => {
            let (x, y) = (eval_log(a, r)?, eval_log(b, r)?);
            if x.less_than(y) {
                y
            } else {
                x
            }
        }
        Expr::Piecewise { threshold, left, right } => {
            if r < *threshold {
                eval_log(left, r)?
            } else {
                eval_log(right, r)?
            }
        }
    };
    if v.ln_abs.is_nan() {
        return Err(domain(r, e, "not a number"));
    }
    Ok(v)
}

// Constant-folding constructors.

fn lit(c: f64) -> Expr {
    Expr::Lit(c)
}

fn is_lit(e: &Expr, c: f64) -> bool {
    matches!(e, Expr::Lit(x) if *x == c)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Lit(x), Expr::Lit(y)) => lit(x + y),
        _ if is_lit(&a, 0.0) => b,
        _ if is_lit(&b, 0.0) => a,
        _ => Expr::Bin(BinOp::Add, Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Lit(x), Expr::Lit(y)) => lit(x - y),
        _ if is_lit(&b, 0.0) => a,
        _ if is_lit(&a, 0.0) => neg(b),
        _ => Expr::Bin(BinOp::Sub, Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Lit(x) => lit(-x),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Lit(x), Expr::Lit(y)) => lit(x * y),
        _ if is_lit(&a, 0.0) || is_lit(&b, 0.0) => lit(0.0),
        _ if is_lit(&a, 1.0) => b,
        _ if is_lit(&b, 1.0) => a,
        _ => Expr::Bin(BinOp::Mul, Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Lit(x), Expr::Lit(y)) if *y != 0.0 => lit(x / y),
        _ if is_lit(&a, 0.0) => lit(0.0),
        _ if is_lit(&b, 1.0) => a,
        _ => Expr::Bin(BinOp::Div, Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        _ if is_lit(&b, 1.0) => a,
        _ if is_lit(&b, 0.0) => lit(1.0),
        _ => Expr::Bin(BinOp::Pow, Box::new(a), Box::new(b)),
    }
}

fn call(f: Func, a: Expr) -> Expr {
    Expr::Call(f, Box::new(a))
}

fn non_smooth(e: &Expr) -> NonSmoothError {
    NonSmoothError { subtree: e.to_string() }
}

fn diff(e: &Expr) -> Result<Expr, NonSmoothError> {
    Ok(match e {
        Expr::Lit(_) => lit(0.0),
        Expr::Var => lit(1.0),
        Expr::Neg(a) => neg(diff(a)?),
        Expr::Bin(op, a, b) => {
            let (a, b) = (a.as_ref(), b.as_ref());
            match op {
                BinOp::Add => add(diff(a)?, diff(b)?),
                BinOp::Sub => sub(diff(a)?, diff(b)?),
                BinOp::Mul => add(mul(diff(a)?, b.clone()), mul(a.clone(), diff(b)?)),
                BinOp::Div => div(
                    sub(mul(diff(a)?, b.clone()), mul(a.clone(), diff(b)?)),
                    pow(b.clone(), lit(2.0)),
                ),
                BinOp::Pow => {
                    if !mentions_var(b) {
                        // c * a^(c-1) * a'
                        let c = b.clone();
                        let lowered = match &c {
                            Expr::Lit(x) => lit(x - 1.0),
                            _ => sub(c.clone(), lit(1.0)),
                        };
                        mul(mul(c, pow(a.clone(), lowered)), diff(a)?)
                    } else {
                        // a^b * (b' log a + b a'/a)
                        let inner = add(
                            mul(diff(b)?, call(Func::Log, a.clone())),
                            mul(b.clone(), div(diff(a)?, a.clone())),
                        );
                        mul(e.clone(), inner)
                    }
                }
            }
        }
        Expr::Call(func, a) => {
            let da = diff(a)?;
            let outer = match func {
                Func::Exp => e.clone(),
                Func::Log => div(lit(1.0), a.as_ref().clone()),
                Func::Sqrt => div(lit(0.5), e.clone()),
                Func::Sinh => call(Func::Cosh, a.as_ref().clone()),
                Func::Cosh => call(Func::Sinh, a.as_ref().clone()),
                Func::Tanh => sub(lit(1.0), pow(e.clone(), lit(2.0))),
            };
            mul(outer, da)
        }
        Expr::Min(..) | Expr::Max(..) | Expr::Piecewise { .. } => return Err(non_smooth(e)),
    })
}

fn dlog(e: &Expr) -> Result<Expr, NonSmoothError> {
    Ok(match e {
        Expr::Lit(_) => lit(0.0),
        Expr::Var => div(lit(1.0), Expr::Var),
        Expr::Neg(a) => dlog(a)?,
        Expr::Bin(BinOp::Mul, a, b) => add(dlog(a)?, dlog(b)?),
        Expr::Bin(BinOp::Div, a, b) => sub(dlog(a)?, dlog(b)?),
        Expr::Bin(BinOp::Pow, a, b) => {
            if mentions_var(b) {
                add(
                    mul(diff(b)?, call(Func::Log, a.as_ref().clone())),
                    mul(b.as_ref().clone(), dlog(a)?),
                )
            } else {
                mul(b.as_ref().clone(), dlog(a)?)
            }
        }
        Expr::Call(Func::Exp, a) => diff(a)?,
        Expr::Call(Func::Sqrt, a) => mul(lit(0.5), dlog(a)?),
        Expr::Call(Func::Sinh, a) => div(diff(a)?, call(Func::Tanh, a.as_ref().clone())),
        Expr::Call(Func::Cosh, a) => mul(diff(a)?, call(Func::Tanh, a.as_ref().clone())),
        _ => div(diff(e)?, e.clone()),
    })
}

// Parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Num(x) => format!("number {x}"),
        Tok::Ident(s) => format!("identifier `{s}`"),
        Tok::Plus => "`+`".into(),
        Tok::Minus => "`-`".into(),
        Tok::Star => "`*`".into(),
        Tok::Slash => "`/`".into(),
        Tok::Caret => "`^`".into(),
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::Comma => "`,`".into(),
        Tok::End => "end of input".into(),
    }
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let s = &text[start..i];
                match s.parse::<f64>() {
                    Ok(x) if x.is_finite() => {
                        out.push((start, Tok::Num(x)));
                        continue;
                    }
                    _ => {
                        return Err(ParseError::BadLiteral {
                            offset: start,
                            text: s.to_string(),
                        })
                    }
                }
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Tok::Ident(text[start..i].to_string())));
                continue;
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    offset: start,
                    found: format!("character `{ch}`"),
                    expected: vec!["number", "r", "function", "operator", "`(`", "`)`"],
                });
            }
        };
        out.push((start, tok));
        i += 1;
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

const PRIMARY: &[&str] = &["number", "r", "function name", "`(`", "`-`"];

struct Parser<'a> {
    text: &'a str,
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            text,
            toks: Vec::new(),
            pos: 0,
        }
    }

    fn parse(mut self) -> Result<RadialExpr, ParseError> {
        if self.text.trim().is_empty() {
            return Err(ParseError::Empty);
        }
        self.toks = tokenize(self.text)?;
        let root = self.expr()?;
        if self.peek() != &Tok::End {
            return Err(self.unexpected(vec!["operator", "end of input"]));
        }
        Ok(RadialExpr { root })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].1.clone();
        if t != Tok::End {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, expected: Vec<&'static str>) -> ParseError {
        ParseError::Syntax {
            offset: self.offset(),
            found: describe(self.peek()),
            expected,
        }
    }

    fn expect(&mut self, tok: Tok, name: &'static str) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(vec![name]))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Minus {
            self.bump();
            // `-2.5` is the literal -2.5, but `-2^2` is -(2^2)
            if let Tok::Num(x) = *self.peek() {
                if self.toks[self.pos + 1].1 != Tok::Caret {
                    self.bump();
                    return Ok(Expr::Lit(-x));
                }
            }
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if *self.peek() == Tok::Caret {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn args(&mut self, n: usize) -> Result<Vec<(usize, Expr)>, ParseError> {
        self.expect(Tok::LParen, "`(`")?;
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            if k > 0 {
                self.expect(Tok::Comma, "`,`")?;
            }
            let at = self.offset();
            out.push((at, self.expr()?));
        }
        self.expect(Tok::RParen, "`)`")?;
        Ok(out)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let at = self.offset();
        match self.peek().clone() {
            Tok::Num(x) => {
                self.bump();
                Ok(Expr::Lit(x))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                if name == "r" {
                    return Ok(Expr::Var);
                }
                if let Some(func) = Func::from_name(&name) {
                    let mut a = self.args(1)?;
                    return Ok(Expr::Call(func, Box::new(a.remove(0).1)));
                }
                match name.as_str() {
                    "min" | "max" => {
                        let mut a = self.args(2)?;
                        let b = Box::new(a.remove(1).1);
                        let a = Box::new(a.remove(0).1);
                        Ok(if name == "min" {
                            Expr::Min(a, b)
                        } else {
                            Expr::Max(a, b)
                        })
                    }
                    "piecewise" => {
                        let mut a = self.args(3)?;
                        let right = Box::new(a.remove(2).1);
                        let left = Box::new(a.remove(1).1);
                        let (t_at, t) = a.remove(0);
                        let threshold = if mentions_var(&t) { None } else { eval(&t, 0.0).ok() };
                        match threshold {
                            Some(threshold) if threshold.is_finite() && threshold >= 0.0 => {
                                Ok(Expr::Piecewise { threshold, left, right })
                            }
                            _ => Err(ParseError::BadThreshold { offset: t_at }),
                        }
                    }
                    _ => Err(ParseError::UnknownIdentifier { offset: at, name }),
                }
            }
            _ => Err(self.unexpected(PRIMARY.to_vec())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(text: &str, r: f64) -> f64 {
        RadialExpr::parse(text).unwrap().eval(r).unwrap()
    }

    fn d_at(text: &str, r: f64) -> f64 {
        RadialExpr::parse(text)
            .unwrap()
            .differentiate()
            .unwrap()
            .eval(r)
            .unwrap()
    }

    #[test]
    fn parse_examples() {
        let e1 = std::f64::consts::E.recip();
        assert!((ev("r^2 + exp(-r)", 1.0) - (1.0 + e1)).abs() < 1e-12);
        assert!((ev("r^2 + exp(-r)", 1.0) - 1.3678794412).abs() < 1e-10);
        assert_eq!(RadialExpr::parse("r").unwrap().expr(), &Expr::Var);
        assert_eq!(ev("r", 3.5), 3.5);
        assert!((ev("r*exp(r^3)", 1.0) - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn eval_examples() {
        assert_eq!(ev("1", 17.0), 1.0);
        assert_eq!(ev("min(r, 2)", 3.0), 2.0);
        assert_eq!(ev("r^1.5", 4.0), 8.0);
    }

    #[test]
    fn precedence_and_associativity() {
        for r in [0.0, 1.0, 7.5] {
            assert_eq!(ev("2+3*4^2", r), 50.0);
        }
        assert_eq!(ev("-2^2", 0.0), -4.0);
        assert_eq!(ev("2^3^2", 0.0), 512.0);
        assert_eq!(ev("8-3-2", 0.0), 3.0);
        assert_eq!(ev("64/4/2", 0.0), 8.0);
        assert_eq!(ev("2^-1", 0.0), 0.5);
        assert_eq!(ev("--r", 2.0), 2.0);
    }

    #[test]
    fn piecewise_selects_by_threshold() {
        assert_eq!(ev("piecewise(1, 0, r)", 0.5), 0.0);
        assert_eq!(ev("piecewise(1, 0, r)", 1.0), 1.0);
        assert_eq!(ev("piecewise(2*0.5, 0, r)", 3.0), 3.0);
        assert!(matches!(
            RadialExpr::parse("piecewise(r, 0, 1)"),
            Err(ParseError::BadThreshold { .. })
        ));
        assert!(matches!(
            RadialExpr::parse("piecewise(-1, 0, 1)"),
            Err(ParseError::BadThreshold { .. })
        ));
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(d_at("r^3", 2.0), 12.0);
        let e = std::f64::consts::E;
        assert!((d_at("exp(r^3)", 1.0) - 3.0 * e).abs() < 1e-12);
        assert!((d_at("exp(r^3)", 1.0) - 8.1548454854).abs() < 1e-9);
        let d = RadialExpr::parse("5").unwrap().differentiate().unwrap();
        assert_eq!(d.as_literal(), Some(0.0));
    }

    #[test]
    fn differentiate_rejects_kinks() {
        for text in ["min(r, 1)", "max(r, 1)", "piecewise(1, 0, r)", "r + min(r, 2)"] {
            assert!(RadialExpr::parse(text).unwrap().differentiate().is_err(), "{text}");
        }
    }

    #[test]
    fn syntax_errors_carry_offset_and_expectations() {
        match RadialExpr::parse("r + * 2") {
            Err(ParseError::Syntax { offset, expected, .. }) => {
                assert_eq!(offset, 4);
                assert!(expected.contains(&"number"));
            }
            other => panic!("{other:?}"),
        }
        match RadialExpr::parse("exp(r") {
            Err(ParseError::Syntax { offset, expected, .. }) => {
                assert_eq!(offset, 5);
                assert_eq!(expected, vec!["`)`"]);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            RadialExpr::parse("cos(r)"),
            Err(ParseError::UnknownIdentifier { offset: 0, .. })
        ));
        assert!(matches!(RadialExpr::parse("  "), Err(ParseError::Empty)));
        assert!(matches!(RadialExpr::parse("1e999"), Err(ParseError::BadLiteral { .. })));
        assert!(RadialExpr::parse("r r").is_err());
    }

    #[test]
    fn domain_errors() {
        let err = RadialExpr::parse("log(r)").unwrap().eval(0.0).unwrap_err();
        assert_eq!(err.r, 0.0);
        assert_eq!(err.subtree, "log(r)");
        assert!(RadialExpr::parse("1/r").unwrap().eval(0.0).is_err());
        assert!(RadialExpr::parse("r^(-1)").unwrap().eval(0.0).is_err());
        assert!(RadialExpr::parse("sqrt(r - 1)").unwrap().eval(0.5).is_err());
        assert!(RadialExpr::parse("log(r)").unwrap().eval_log(0.0).is_err());
    }

    #[test]
    fn log_evaluation_survives_overflow() {
        let sigma = RadialExpr::parse("r*exp(r^3)").unwrap();
        let r = 20.0;
        let lv = sigma.eval_log(r).unwrap();
        assert_eq!(lv.sign, 1);
        assert!((lv.ln_abs - (r.ln() + r * r * r)).abs() < 1e-9);
        assert!(sigma.eval(r).unwrap().is_infinite());
        let c = RadialExpr::parse("cosh(r)^2 - 1").unwrap();
        assert!((c.eval_log(1.5).unwrap().to_f64() - 1.5f64.sinh().powi(2)).abs() < 1e-12);
        let big = RadialExpr::parse("log(exp(r^2) + 1)").unwrap();
        assert!((big.eval_log(100.0).unwrap().to_f64() - 1e4).abs() < 1e-9);
    }

    #[test]
    fn log_derivative_avoids_quotient() {
        let sigma = RadialExpr::parse("r*exp(r^3)").unwrap();
        let dl = sigma.log_derivative().unwrap();
        for r in [1e-6, 0.5, 2.0, 1e3, 1e6] {
            let want = 1.0 / r + 3.0 * r * r;
            assert!((dl.eval(r).unwrap() - want).abs() <= 1e-14 * want, "{r}");
        }
        let s = RadialExpr::parse("sinh(r)").unwrap().log_derivative().unwrap();
        assert!((s.eval(800.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((s.eval(0.3).unwrap() - 0.3f64.cosh() / 0.3f64.sinh()).abs() < 1e-12);
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![(-5.0f64..5.0).prop_map(Expr::Lit), Just(Expr::Var),];
        leaf.prop_recursive(5, 40, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (
                    inner.clone(),
                    inner.clone(),
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div),
                        Just(BinOp::Pow)
                    ]
                )
                    .prop_map(|(a, b, op)| Expr::Bin(op, Box::new(a), Box::new(b))),
                (
                    inner.clone(),
                    prop_oneof![
                        Just(Func::Exp),
                        Just(Func::Log),
                        Just(Func::Sqrt),
                        Just(Func::Sinh),
                        Just(Func::Cosh),
                        Just(Func::Tanh)
                    ]
                )
                    .prop_map(|(a, f)| Expr::Call(f, Box::new(a))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Min(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Max(Box::new(a), Box::new(b))),
                (0.0f64..10.0, inner.clone(), inner).prop_map(|(t, a, b)| Expr::Piecewise {
                    threshold: t,
                    left: Box::new(a),
                    right: Box::new(b)
                }),
            ]
        })
    }

    // Smooth, always-defined expressions on r > 0.
    fn arb_smooth() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![(0.1f64..3.0).prop_map(Expr::Lit), Just(Expr::Var)];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| add(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Bin(BinOp::Mul, Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Bin(BinOp::Div, Box::new(a), Box::new(b))),
                (inner.clone(), 0.5f64..2.5).prop_map(|(a, p)| Expr::Bin(
                    BinOp::Pow,
                    Box::new(a),
                    Box::new(Expr::Lit(p))
                )),
                inner.clone().prop_map(|a| Expr::Call(Func::Sqrt, Box::new(a))),
                inner
                    .clone()
                    .prop_map(|a| Expr::Call(Func::Log, Box::new(add(a, Expr::Lit(1.0))))),
                inner.clone().prop_map(|a| Expr::Call(Func::Tanh, Box::new(a))),
                inner
                    .clone()
                    .prop_map(|a| Expr::Call(Func::Exp, Box::new(Expr::Call(Func::Tanh, Box::new(a))))),
                inner.prop_map(|a| Expr::Call(Func::Sinh, Box::new(Expr::Call(Func::Tanh, Box::new(a))))),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let printed = e.to_string();
            let back = RadialExpr::parse(&printed).unwrap();
            prop_assert_eq!(back.expr(), &e);
            let orig = RadialExpr::from_expr(e);
            for k in 0..100 {
                let r = 0.01 + (50.0 - 0.01) * (k as f64) / 99.0;
                match (orig.eval(r), back.eval(r)) {
                    (Ok(a), Ok(b)) => prop_assert!(a == b || (a.is_nan() && b.is_nan())),
                    (Err(_), Err(_)) => {}
                    (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
                }
            }
        }

        #[test]
        fn derivative_matches_central_difference(e in arb_smooth(), rs in proptest::collection::vec(0.1f64..10.0, 50)) {
            let f = RadialExpr::from_expr(e);
            let df = f.differentiate().unwrap();
            let h = 1e-5;
            for r in rs {
                let (Ok(fp), Ok(fm), Ok(d)) = (f.eval(r + h), f.eval(r - h), df.eval(r)) else { continue };
                if !(fp.is_finite() && fm.is_finite() && d.is_finite()) || d.abs() > 1e6 { continue; }
                let fd = (fp - fm) / (2.0 * h);
                prop_assert!((d - fd).abs() <= 1e-5 * (1.0 + d.abs()), "r={} d={} fd={} f={}", r, d, fd, f);
            }
        }

        #[test]
        fn log_derivative_agrees_with_quotient(e in arb_smooth(), r in 0.1f64..10.0) {
            let f = RadialExpr::from_expr(e);
            let q = f.differentiate().unwrap().eval(r).unwrap() / f.eval(r).unwrap();
            let dl = f.log_derivative().unwrap().eval(r).unwrap();
            if q.is_finite() && q.abs() < 1e8 {
                prop_assert!((q - dl).abs() <= 1e-9 * (1.0 + q.abs()), "{} vs {}", q, dl);
            }
        }

        #[test]
        fn log_eval_matches_plain(e in arb_smooth(), r in 0.01f64..20.0) {
            let f = RadialExpr::from_expr(e);
            let plain = f.eval(r).unwrap();
            if plain.is_finite() && plain.abs() < 1e100 && plain.abs() > 1e-100 {
                let lv = f.eval_log(r).unwrap().to_f64();
                prop_assert!((lv - plain).abs() <= 1e-9 * plain.abs(), "{} vs {}", lv, plain);
            }
        }
    }
}
