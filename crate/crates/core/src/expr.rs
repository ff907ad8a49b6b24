//! Scalar expressions over state variables `x1..xn`.
//!
//! Expressions are parsed from text, evaluated in double precision and
//! differentiated exactly. Construction goes through a small set of
//! simplifying constructors (constant folding plus the 0/1 identities), so
//! parsing, printing and re-parsing reproduces the same tree.

use std::fmt;

use thiserror::Error;

/// Elementary functions accepted by the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Tanh,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }

    fn apply(self, a: f64) -> f64 {
        match self {
            Func::Sin => a.sin(),
            Func::Cos => a.cos(),
            Func::Exp => a.exp(),
            Func::Log => a.ln(),
            Func::Sqrt => a.sqrt(),
            Func::Tanh => a.tanh(),
        }
    }

    fn in_domain(self, a: f64) -> bool {
        match self {
            Func::Log => a > 0.0,
            Func::Sqrt => a >= 0.0,
            _ => true,
        }
    }
}

/// Expression tree. Variables are stored zero-based (`Var(0)` prints as `x1`).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown identifier `{name}` at position {position}")]
    UnknownIdentifier { position: usize, name: String },
    #[error("variable x{index} at position {position} is out of range for dimension {dim}")]
    VariableOutOfRange {
        position: usize,
        index: usize,
        dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("domain error in `{subexpr}`: {reason}")]
    Domain { subexpr: String, reason: &'static str },
    #[error("variable x{} not present in a state of dimension {dim}", index + 1)]
    MissingVariable { index: usize, dim: usize },
}

fn is_const(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Const(c) if *c == v)
}

fn fold(v: f64, otherwise: impl FnOnce() -> Expr) -> Expr {
    if v.is_finite() {
        Expr::Const(v)
    } else {
        otherwise()
    }
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn zero() -> Expr {
        Expr::Const(0.0)
    }

    pub fn one() -> Expr {
        Expr::Const(1.0)
    }

    /// The zero-based variable `x{index+1}`.
    pub fn var(index: usize) -> Expr {
        Expr::Var(index)
    }

    pub fn is_zero(&self) -> bool {
        is_const(self, 0.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Const(c) => Expr::Const(-c),
            Expr::Neg(inner) => *inner,
            other => Expr::Neg(Box::new(other)),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Const(x), Expr::Const(y)) => fold(x + y, || Expr::Add(Box::new(a), Box::new(b))),
            _ if a.is_zero() => b,
            _ if b.is_zero() => a,
            _ => Expr::Add(Box::new(a), Box::new(b)),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Const(x), Expr::Const(y)) => fold(x - y, || Expr::Sub(Box::new(a), Box::new(b))),
            _ if b.is_zero() => a,
            _ if a.is_zero() => Expr::neg(b),
            _ => Expr::Sub(Box::new(a), Box::new(b)),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Const(x), Expr::Const(y)) => fold(x * y, || Expr::Mul(Box::new(a), Box::new(b))),
            _ if a.is_zero() || b.is_zero() => Expr::zero(),
            _ if is_const(&a, 1.0) => b,
            _ if is_const(&b, 1.0) => a,
            _ => Expr::Mul(Box::new(a), Box::new(b)),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn div(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Const(x), Expr::Const(y)) if *y != 0.0 => {
                fold(x / y, || Expr::Div(Box::new(a), Box::new(b)))
            }
            _ if is_const(&b, 1.0) => a,
            _ if a.is_zero() && !b.is_zero() => Expr::zero(),
            _ => Expr::Div(Box::new(a), Box::new(b)),
        }
    }

    pub fn pow(a: Expr, k: i32) -> Expr {
        match (&a, k) {
            (_, 0) => Expr::one(),
            (_, 1) => a,
            (Expr::Const(c), _) if !(*c == 0.0 && k < 0) => {
                fold(c.powi(k), || Expr::Pow(Box::new(a), k))
            }
            _ => Expr::Pow(Box::new(a), k),
        }
    }

    pub fn call(f: Func, a: Expr) -> Expr {
        match a {
            Expr::Const(c) if f.in_domain(c) => {
                let v = f.apply(c);
                fold(v, || Expr::Call(f, Box::new(Expr::Const(c))))
            }
            other => Expr::Call(f, Box::new(other)),
        }
    }

    /// Sum of products `Σ aᵢ·bᵢ`, built with the simplifying constructors.
    pub fn dot(a: &[Expr], b: &[Expr]) -> Expr {
        a.iter()
            .zip(b)
            .fold(Expr::zero(), |acc, (x, y)| Expr::add(acc, Expr::mul(x.clone(), y.clone())))
    }

    /// Largest zero-based variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(i) => Some(*i),
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.max_var(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.max_var().max(b.max_var())
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, EvalError> {
        let domain = |reason| EvalError::Domain {
            subexpr: self.to_string(),
            reason,
        };
        let v = match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => *x.get(*i).ok_or(EvalError::MissingVariable {
                index: *i,
                dim: x.len(),
            })?,
            Expr::Neg(a) => -a.eval(x)?,
            Expr::Add(a, b) => a.eval(x)? + b.eval(x)?,
            Expr::Sub(a, b) => a.eval(x)? - b.eval(x)?,
            Expr::Mul(a, b) => a.eval(x)? * b.eval(x)?,
            Expr::Div(a, b) => {
                let num = a.eval(x)?;
                let den = b.eval(x)?;
                if den == 0.0 {
                    return Err(domain("division by zero"));
                }
                num / den
            }
            Expr::Pow(a, k) => {
                let base = a.eval(x)?;
                if base == 0.0 && *k < 0 {
                    return Err(domain("negative power of zero"));
                }
                base.powi(*k)
            }
            Expr::Call(f, a) => {
                let arg = a.eval(x)?;
                if !f.in_domain(arg) {
                    return Err(domain(match f {
                        Func::Log => "logarithm of a nonpositive value",
                        _ => "square root of a negative value",
                    }));
                }
                f.apply(arg)
            }
        };
        if v.is_finite() {
            Ok(v)
        } else if v.is_nan() {
            Err(domain("not a number"))
        } else {
            Err(domain("overflow"))
        }
    }

    /// Exact partial derivative with respect to the zero-based variable `var`.
    pub fn diff(&self, var: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::zero(),
            Expr::Var(i) => {
                if *i == var {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Expr::Neg(a) => Expr::neg(a.diff(var)),
            Expr::Add(a, b) => Expr::add(a.diff(var), b.diff(var)),
            Expr::Sub(a, b) => Expr::sub(a.diff(var), b.diff(var)),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.diff(var), (**b).clone()),
                Expr::mul((**a).clone(), b.diff(var)),
            ),
            Expr::Div(a, b) => {
                let da = a.diff(var);
                let db = b.diff(var);
                if db.is_zero() {
                    Expr::div(da, (**b).clone())
                } else {
                    Expr::div(
                        Expr::sub(
                            Expr::mul(da, (**b).clone()),
                            Expr::mul((**a).clone(), db),
                        ),
                        Expr::pow((**b).clone(), 2),
                    )
                }
            }
            Expr::Pow(a, k) => Expr::mul(
                Expr::mul(Expr::Const(*k as f64), Expr::pow((**a).clone(), k - 1)),
                a.diff(var),
            ),
            Expr::Call(f, a) => {
                let da = a.diff(var);
                if da.is_zero() {
                    return Expr::zero();
                }
                let arg = (**a).clone();
                let outer = match f {
                    Func::Sin => Expr::call(Func::Cos, arg),
                    Func::Cos => Expr::neg(Expr::call(Func::Sin, arg)),
                    Func::Exp => Expr::call(Func::Exp, arg),
                    Func::Log => return Expr::div(da, arg),
                    Func::Sqrt => {
                        return Expr::div(da, Expr::mul(Expr::Const(2.0), Expr::call(Func::Sqrt, arg)))
                    }
                    Func::Tanh => Expr::sub(Expr::one(), Expr::pow(Expr::call(Func::Tanh, arg), 2)),
                };
                Expr::mul(outer, da)
            }
        }
    }

    /// Gradient as `n` partial-derivative expressions.
    pub fn gradient(&self, n: usize) -> Vec<Expr> {
        (0..n).map(|i| self.diff(i)).collect()
    }

    /// Hessian; the upper triangle is differentiated and mirrored so the
    /// evaluated matrix is exactly symmetric.
    pub fn hessian(&self, n: usize) -> Vec<Vec<Expr>> {
        let grad = self.gradient(n);
        let mut rows = vec![vec![Expr::zero(); n]; n];
        for i in 0..n {
            for j in i..n {
                let d = grad[i].diff(j);
                rows[j][i] = d.clone();
                rows[i][j] = d;
            }
        }
        rows
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if c.is_sign_negative() {
                    write!(f, "(-{:?})", -c)
                } else {
                    write!(f, "{c:?}")
                }
            }
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, k) if matches!(**a, Expr::Pow(..)) => write!(f, "({a})^{k}"),
            Expr::Pow(a, k) => write!(f, "{a}^{k}"),
            Expr::Call(func, a) => {
                // `{a}` may already be parenthesized; a second pair is harmless.
                write!(f, "{}({a})", func.name())
            }
        }
    }
}

/// A list of `n` component expressions (drift `f` or an input column `gᵢ`).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    components: Vec<Expr>,
}

impl VectorField {
    pub fn new(components: Vec<Expr>) -> Self {
        Self { components }
    }

    pub fn parse(sources: &[impl AsRef<str>], n: usize) -> Result<Self, ParseError> {
        sources
            .iter()
            .map(|s| parse(s.as_ref(), n))
            .collect::<Result<Vec<_>, _>>()
            .map(Self::new)
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.components.iter().map(|c| c.eval(x)).collect()
    }

    /// `rows[i][j] = ∂fᵢ/∂xⱼ`.
    pub fn jacobian(&self) -> Vec<Vec<Expr>> {
        let n = self.dim();
        self.components.iter().map(|c| c.gradient(n)).collect()
    }
}

/// Evaluate a matrix of expressions.
pub fn eval_matrix(rows: &[Vec<Expr>], x: &[f64]) -> Result<Vec<Vec<f64>>, EvalError> {
    rows.iter()
        .map(|row| row.iter().map(|e| e.eval(x)).collect())
        .collect()
}

pub fn eval_vector(items: &[Expr], x: &[f64]) -> Result<Vec<f64>, EvalError> {
    items.iter().map(|e| e.eval(x)).collect()
}

// ---------------------------------------------------------------------------
// Parser

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(f64),
    Ident(String),
    Op(char),
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(src: &'a str) -> Result<Vec<(usize, Token)>, ParseError> {
        let mut lx = Lexer { src, pos: 0 };
        let mut out = Vec::new();
        while let Some(tok) = lx.next_token()? {
            out.push(tok);
        }
        Ok(out)
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn next_token(&mut self) -> Result<Option<(usize, Token)>, ParseError> {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += self.peek().map_or(0, char::len_utf8);
        }
        let start = self.pos;
        let Some(c) = self.peek() else {
            return Ok(None);
        };
        if c.is_ascii_digit() || c == '.' {
            return self.number(start).map(Some);
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let len = self.src[start..]
                .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_'))
                .unwrap_or(self.src.len() - start);
            self.pos += len;
            return Ok(Some((start, Token::Ident(self.src[start..self.pos].to_string()))));
        }
        if "+-*/^()".contains(c) {
            self.pos += 1;
            return Ok(Some((start, Token::Op(c))));
        }
        Err(ParseError::Syntax {
            position: start,
            message: format!("unexpected character `{c}`"),
        })
    }

    fn number(&mut self, start: usize) -> Result<(usize, Token), ParseError> {
        let bytes = self.src.as_bytes();
        let mut i = start;
        let digits = |i: &mut usize| {
            let s = *i;
            while *i < bytes.len() && bytes[*i].is_ascii_digit() {
                *i += 1;
            }
            *i - s
        };
        let mut mantissa = digits(&mut i);
        if i < bytes.len() && bytes[i] == b'.' {
            i += 1;
            mantissa += digits(&mut i);
        }
        if mantissa == 0 {
            return Err(ParseError::Syntax {
                position: start,
                message: "malformed number".into(),
            });
        }
        if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                j += 1;
            }
            if digits(&mut j) == 0 {
                return Err(ParseError::Syntax {
                    position: i,
                    message: "malformed exponent".into(),
                });
            }
            i = j;
        }
        self.pos = i;
        let text = &self.src[start..i];
        let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
            position: start,
            message: format!("malformed number `{text}`"),
        })?;
        if !value.is_finite() {
            return Err(ParseError::Syntax {
                position: start,
                message: format!("number `{text}` is out of range"),
            });
        }
        Ok((start, Token::Number(value)))
    }
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    idx: usize,
    dim: usize,
    end: usize,
}

impl Parser {
    fn position(&self) -> usize {
        self.tokens.get(self.idx).map_or(self.end, |t| t.0)
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.idx).map(|t| &t.1)
    }

    fn eat_op(&mut self, op: char) -> bool {
        if self.peek() == Some(&Token::Op(op)) {
            self.idx += 1;
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: char) -> Result<(), ParseError> {
        if self.eat_op(op) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("expected `{op}`")))
        }
    }

    fn unexpected(&self, what: &str) -> ParseError {
        let found = match self.peek() {
            None => "end of input".to_string(),
            Some(Token::Number(v)) => format!("number {v}"),
            Some(Token::Ident(s)) => format!("`{s}`"),
            Some(Token::Op(c)) => format!("`{c}`"),
        };
        ParseError::Syntax {
            position: self.position(),
            message: format!("{what}, found {found}"),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.term()?;
        loop {
            if self.eat_op('+') {
                acc = Expr::add(acc, self.term()?);
            } else if self.eat_op('-') {
                acc = Expr::sub(acc, self.term()?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.factor()?;
        loop {
            if self.eat_op('*') {
                acc = Expr::mul(acc, self.factor()?);
            } else if self.eat_op('/') {
                acc = Expr::div(acc, self.factor()?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        let negate = self.eat_op('-');
        let mut base = self.atom()?;
        if self.eat_op('^') {
            base = Expr::pow(base, self.integer()?);
        }
        Ok(if negate { Expr::neg(base) } else { base })
    }

    fn integer(&mut self) -> Result<i32, ParseError> {
        let negative = if self.eat_op('-') {
            true
        } else {
            self.eat_op('+');
            false
        };
        let pos = self.position();
        match self.peek() {
            Some(Token::Number(v)) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => {
                let k = *v as i32;
                self.idx += 1;
                Ok(if negative { -k } else { k })
            }
            Some(Token::Number(_)) => Err(ParseError::Syntax {
                position: pos,
                message: "exponent must be an integer".into(),
            }),
            _ => Err(self.unexpected("expected an integer exponent")),
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.position();
        match self.peek().cloned() {
            Some(Token::Number(v)) => {
                self.idx += 1;
                Ok(Expr::Const(v))
            }
            Some(Token::Op('(')) => {
                self.idx += 1;
                let e = self.expr()?;
                self.expect_op(')')?;
                Ok(e)
            }
            Some(Token::Ident(name)) => {
                self.idx += 1;
                if let Some(func) = Func::from_name(&name) {
                    self.expect_op('(')?;
                    let arg = self.expr()?;
                    self.expect_op(')')?;
                    return Ok(Expr::call(func, arg));
                }
                match name.strip_prefix('x').map(str::parse::<usize>) {
                    Some(Ok(index)) if (1..=self.dim).contains(&index) => Ok(Expr::Var(index - 1)),
                    Some(Ok(index)) => Err(ParseError::VariableOutOfRange {
                        position: pos,
                        index,
                        dim: self.dim,
                    }),
                    _ => Err(ParseError::UnknownIdentifier {
                        position: pos,
                        name,
                    }),
                }
            }
            _ => Err(self.unexpected("expected a number, variable, function or `(`")),
        }
    }
}

/// Parse `source` as an expression over `x1..xn`.
pub fn parse(source: &str, n: usize) -> Result<Expr, ParseError> {
    let tokens = Lexer::tokens(source)?;
    let mut p = Parser {
        tokens,
        idx: 0,
        dim: n,
        end: source.len(),
    };
    let e = p.expr()?;
    if p.idx != p.tokens.len() {
        return Err(p.unexpected("expected an operator or end of input"));
    }
    Ok(e)
}
