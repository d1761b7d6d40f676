//! A small arithmetic expression language for generators and terminal data.
//!
//! Expressions range over the variables `t, s, x, y, z`, numeric literals,
//! the binary operators `+ - * / ^` (with `^` binding tightest and
//! associating to the right), unary minus, and the functions
//! `exp log abs max min sin cos sqrt step pos neg`.
//!
//! `step(u)` is the indicator of `u >= 0`, `pos(u) = max(u, 0)` and
//! `neg(u) = max(-u, 0)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. } | ParseError::UnknownIdentifier { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("log of non-positive argument {0}")]
    LogDomain(f64),
    #[error("sqrt of negative argument {0}")]
    SqrtDomain(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    S,
    X,
    Y,
    Z,
}

impl Var {
    fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::S => "s",
            Var::X => "x",
            Var::Y => "y",
            Var::Z => "z",
        }
    }
}

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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Abs,
    Max,
    Min,
    Sin,
    Cos,
    Sqrt,
    Step,
    Pos,
    Neg,
}

impl Func {
    const ALL: [Func; 11] = [
        Func::Exp,
        Func::Log,
        Func::Abs,
        Func::Max,
        Func::Min,
        Func::Sin,
        Func::Cos,
        Func::Sqrt,
        Func::Step,
        Func::Pos,
        Func::Neg,
    ];

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Max => "max",
            Func::Min => "min",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Step => "step",
            Func::Pos => "pos",
            Func::Neg => "neg",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Max | Func::Min => 2,
            _ => 1,
        }
    }

    fn lookup(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// Parsed expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Variable bindings for evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Point {
    pub t: f64,
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point {
    pub fn new(t: f64, s: f64, x: f64, y: f64, z: f64) -> Self {
        Point { t, s, x, y, z }
    }

    fn get(&self, v: Var) -> f64 {
        match v {
            Var::T => self.t,
            Var::S => self.s,
            Var::X => self.x,
            Var::Y => self.y,
            Var::Z => self.z,
        }
    }
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn eval(&self, p: &Point) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(v) => p.get(*v),
            Expr::Neg(a) => -a.eval(p)?,
            Expr::Bin(op, a, b) => {
                let a = a.eval(p)?;
                let b = b.eval(p)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => pow(a, b),
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(p)?;
                match f {
                    Func::Exp => a.exp(),
                    Func::Log => {
                        if a <= 0.0 {
                            return Err(EvalError::LogDomain(a));
                        }
                        a.ln()
                    }
                    Func::Abs => a.abs(),
                    Func::Max => a.max(args[1].eval(p)?),
                    Func::Min => a.min(args[1].eval(p)?),
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(EvalError::SqrtDomain(a));
                        }
                        a.sqrt()
                    }
                    Func::Step => {
                        if a >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Func::Pos => a.max(0.0),
                    Func::Neg => (-a).max(0.0),
                }
            }
        })
    }

    /// Whether the variable occurs anywhere in the tree.
    pub fn mentions(&self, v: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Neg(a) => a.mentions(v),
            Expr::Bin(_, a, b) => a.mentions(v) || b.mentions(v),
            Expr::Call(_, args) => args.iter().any(|a| a.mentions(v)),
        }
    }
}

// Integer exponents go through powi so that x^2 is exact.
fn pow(a: f64, b: f64) -> f64 {
    if b.fract() == 0.0 && b.abs() <= i32::MAX as f64 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => {
                if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) {
                    write!(f, "(-{})", -v)
                } else {
                    write!(f, "{v}")
                }
            }
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// An expression together with its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    source: String,
    ast: Expr,
}

impl Expression {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let ast = Parser::new(text).parse_all()?;
        Ok(Expression {
            source: text.to_string(),
            ast,
        })
    }

    pub fn from_ast(ast: Expr) -> Self {
        Expression {
            source: ast.to_string(),
            ast,
        }
    }

    pub fn constant(v: f64) -> Self {
        Self::from_ast(Expr::Num(v))
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn ast(&self) -> &Expr {
        &self.ast
    }

    #[inline]
    pub fn eval(&self, p: &Point) -> Result<f64, EvalError> {
        self.ast.eval(p)
    }

    pub fn mentions(&self, v: Var) -> bool {
        self.ast.mentions(v)
    }

    pub fn is_zero_constant(&self) -> bool {
        matches!(self.ast, Expr::Num(v) if v == 0.0)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl FromStr for Expression {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expression::parse(s)
    }
}

impl Serialize for Expression {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Expression {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Expression::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Parses `text` into an expression, reporting byte offsets on failure.
pub fn parse_expression(text: &str) -> Result<Expression, ParseError> {
    Expression::parse(text)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    tok: Tok,
    tok_start: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser {
            src,
            pos: 0,
            tok: Tok::End,
            tok_start: 0,
        }
    }

    fn err(&self, offset: usize, message: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            offset,
            message: message.into(),
        }
    }

    fn bump(&mut self) -> Result<(), ParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        self.tok_start = self.pos;
        if self.pos >= bytes.len() {
            self.tok = Tok::End;
            return Ok(());
        }
        let c = bytes[self.pos];
        self.tok = match c {
            b'0'..=b'9' | b'.' => {
                let start = self.pos;
                while self.pos < bytes.len() && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.') {
                    self.pos += 1;
                }
                if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
                    let mut look = self.pos + 1;
                    if look < bytes.len() && (bytes[look] == b'+' || bytes[look] == b'-') {
                        look += 1;
                    }
                    if look < bytes.len() && bytes[look].is_ascii_digit() {
                        while look < bytes.len() && bytes[look].is_ascii_digit() {
                            look += 1;
                        }
                        self.pos = look;
                    }
                }
                let text = &self.src[start..self.pos];
                let v: f64 = text
                    .parse()
                    .map_err(|_| self.err(start, format!("malformed number `{text}`")))?;
                Tok::Num(v)
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let start = self.pos;
                while self.pos < bytes.len() && (bytes[self.pos].is_ascii_alphanumeric() || bytes[self.pos] == b'_') {
                    self.pos += 1;
                }
                Tok::Ident(self.src[start..self.pos].to_string())
            }
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                self.pos += 1;
                Tok::Op(c as char)
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b',' => {
                self.pos += 1;
                Tok::Comma
            }
            _ => {
                let ch = self.src[self.pos..].chars().next().unwrap_or('?');
                return Err(self.err(self.pos, format!("unexpected character `{ch}`")));
            }
        };
        Ok(())
    }

    fn parse_all(mut self) -> Result<Expr, ParseError> {
        self.bump()?;
        let e = self.parse_sum()?;
        if self.tok != Tok::End {
            return Err(self.err(self.tok_start, "unexpected trailing input"));
        }
        Ok(e)
    }

    fn parse_sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_product()?;
        loop {
            let op = match self.tok {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump()?;
            let rhs = self.parse_product()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn parse_product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_unary()?;
        loop {
            let op = match self.tok {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump()?;
            let rhs = self.parse_unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn parse_unary(&mut self) -> Result<Expr, ParseError> {
        match self.tok {
            Tok::Op('-') => {
                self.bump()?;
                Ok(Expr::Neg(Box::new(self.parse_unary()?)))
            }
            Tok::Op('+') => {
                self.bump()?;
                self.parse_unary()
            }
            _ => self.parse_power(),
        }
    }

    fn parse_power(&mut self) -> Result<Expr, ParseError> {
        let base = self.parse_atom()?;
        if self.tok == Tok::Op('^') {
            self.bump()?;
            // right associative; the exponent may carry its own sign
            let exp = self.parse_unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<Expr, ParseError> {
        let start = self.tok_start;
        match self.tok.clone() {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.bump()?;
                let e = self.parse_sum()?;
                self.expect(Tok::RParen, "expected `)`")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump()?;
                let var = match name.as_str() {
                    "t" => Some(Var::T),
                    "s" => Some(Var::S),
                    "x" => Some(Var::X),
                    "y" => Some(Var::Y),
                    "z" => Some(Var::Z),
                    _ => None,
                };
                if let Some(v) = var {
                    return Ok(Expr::Var(v));
                }
                let Some(func) = Func::lookup(&name) else {
                    return Err(ParseError::UnknownIdentifier { offset: start, name });
                };
                if self.tok != Tok::LParen {
                    return Err(self.err(self.tok_start, format!("expected `(` after `{name}`")));
                }
                self.bump()?;
                let mut args = vec![self.parse_sum()?];
                while self.tok == Tok::Comma {
                    self.bump()?;
                    args.push(self.parse_sum()?);
                }
                self.expect(Tok::RParen, "expected `)` or `,`")?;
                if args.len() != func.arity() {
                    return Err(self.err(
                        start,
                        format!("`{name}` takes {} argument(s), got {}", func.arity(), args.len()),
                    ));
                }
                Ok(Expr::Call(func, args))
            }
            Tok::End => Err(self.err(start, "unexpected end of input")),
            other => Err(self.err(start, format!("unexpected token {other:?}"))),
        }
    }

    fn expect(&mut self, tok: Tok, message: &str) -> Result<(), ParseError> {
        if self.tok != tok {
            return Err(self.err(self.tok_start, message));
        }
        self.bump()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at_x(e: &str, x: f64) -> Result<f64, EvalError> {
        Expression::parse(e).unwrap().eval(&Point {
            x,
            ..Default::default()
        })
    }

    #[test]
    fn square_at_three() {
        assert_eq!(at_x("x^2", 3.0).unwrap(), 9.0);
    }

    #[test]
    fn max_plus_scaled_y() {
        let e = Expression::parse("max(x,0) + 0.5*y").unwrap();
        let v = e.eval(&Point::new(0.0, 0.0, -1.0, 2.0, 0.0)).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn log_domain_error() {
        assert!(matches!(at_x("log(x)", -1.0), Err(EvalError::LogDomain(_))));
        assert!(matches!(at_x("sqrt(x)", -1.0), Err(EvalError::SqrtDomain(_))));
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(at_x("-x^2", 3.0).unwrap(), -9.0);
        assert_eq!(at_x("2^3^2", 0.0).unwrap(), 512.0);
        assert_eq!(at_x("1 - 2 - 3", 0.0).unwrap(), -4.0);
        assert_eq!(at_x("8 / 4 / 2", 0.0).unwrap(), 1.0);
        assert_eq!(at_x("1 + 2 * 3", 0.0).unwrap(), 7.0);
        assert_eq!(at_x("2^-1", 0.0).unwrap(), 0.5);
        assert_eq!(at_x("1.5e2 + 1E-1", 0.0).unwrap(), 150.1);
    }

    #[test]
    fn helper_functions() {
        assert_eq!(at_x("step(x)", 0.0).unwrap(), 1.0);
        assert_eq!(at_x("step(x)", -1e-12).unwrap(), 0.0);
        assert_eq!(at_x("pos(x) - neg(x)", -2.5).unwrap(), -2.5);
        assert_eq!(at_x("abs(x) + min(x, 1)", -2.0).unwrap(), 0.0);
    }

    #[test]
    fn errors_carry_offsets() {
        let e = Expression::parse("x + foo(1)").unwrap_err();
        assert_eq!(
            e,
            ParseError::UnknownIdentifier {
                offset: 4,
                name: "foo".into()
            }
        );
        assert_eq!(Expression::parse("x + * 2").unwrap_err().offset(), 4);
        assert_eq!(Expression::parse("(x + 1").unwrap_err().offset(), 6);
        assert_eq!(Expression::parse("x $ 1").unwrap_err().offset(), 2);
        assert!(Expression::parse("max(x)").is_err());
        assert!(Expression::parse("").is_err());
    }

    #[test]
    fn mentions_tracks_variables() {
        let e = Expression::parse("sin(y) + 0*t").unwrap();
        assert!(e.mentions(Var::Y));
        assert!(e.mentions(Var::T));
        assert!(!e.mentions(Var::Z));
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..1e6).prop_map(Expr::Num),
            prop_oneof![Just(Var::T), Just(Var::S), Just(Var::X), Just(Var::Y), Just(Var::Z)].prop_map(Expr::Var),
        ];
        leaf.prop_recursive(4, 32, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div),
                        Just(BinOp::Pow)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Expr::Bin(op, Box::new(a), Box::new(b))),
                (proptest::sample::select(Func::ALL.to_vec()), inner.clone(), inner).prop_map(|(f, a, b)| {
                    let args = if f.arity() == 2 { vec![a, b] } else { vec![a] };
                    Expr::Call(f, args)
                }),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let printed = e.to_string();
            let reparsed = Expression::parse(&printed).unwrap();
            prop_assert_eq!(reparsed.ast(), &e);
        }
    }
}
