//! Restricted expression language for problem data.
//!
//! Grammar (whitespace insignificant):
//!
//! ```text
//! expr   := term (("+" | "-") term)*
//! term   := factor (("*" | "/") factor)*
//! factor := "-"? power
//! power  := atom ("^" factor)?
//! atom   := number | ident | ident "(" args ")" | "(" expr ")"
//! ```
//!
//! Variables are `x, y, t, u, p, q` (`p`, `q` are the components of the
//! spatial gradient of `u`). The constant `pi` is folded into a literal.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X,
    Y,
    T,
    U,
    P,
    Q,
}

impl Var {
    pub const ALL: [Var; 6] = [Var::X, Var::Y, Var::T, Var::U, Var::P, Var::Q];

    fn from_name(name: &str) -> Option<Var> {
        Some(match name {
            "x" => Var::X,
            "y" => Var::Y,
            "t" => Var::T,
            "u" => Var::U,
            "p" => Var::P,
            "q" => Var::Q,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::Y => "y",
            Var::T => "t",
            Var::U => "u",
            Var::P => "p",
            Var::Q => "q",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
    Min,
    Max,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
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

/// Parsed expression tree. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: expected {expected}")]
    Syntax { offset: usize, expected: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdent { offset: usize, name: String },
    #[error("function `{name}` at offset {offset} takes {expected} argument(s), got {found}")]
    Arity {
        offset: usize,
        name: String,
        expected: usize,
        found: usize,
    },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownIdent { offset, .. }
            | ParseError::Arity { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound variable `{}`", .0.name())]
    Unbound(Var),
    #[error("division by zero in `{0}`")]
    DivisionByZero(String),
    #[error("domain fault in `{0}`")]
    Domain(String),
    #[error("non-finite result in `{0}`")]
    NonFinite(String),
}

/// Variable bindings for [`Expr::eval`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Env {
    slots: [Option<f64>; 6],
}

impl Env {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, var: Var, value: f64) -> Self {
        self.slots[var.index()] = Some(value);
        self
    }

    pub fn set(&mut self, var: Var, value: f64) {
        self.slots[var.index()] = Some(value);
    }

    pub fn get(&self, var: Var) -> Option<f64> {
        self.slots[var.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Num(f64),
    Ident,
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

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    tok: Tok,
    tok_start: usize,
    tok_end: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Result<Self, ParseError> {
        let mut p = Parser {
            src,
            pos: 0,
            tok: Tok::End,
            tok_start: 0,
            tok_end: 0,
        };
        p.advance()?;
        Ok(p)
    }

    fn syntax(&self, expected: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.tok_start,
            expected: expected.to_string(),
        }
    }

    fn advance(&mut self) -> Result<(), ParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && (bytes[self.pos] as char).is_ascii_whitespace() {
            self.pos += 1;
        }
        self.tok_start = self.pos;
        if self.pos >= bytes.len() {
            self.tok = Tok::End;
            self.tok_end = self.pos;
            return Ok(());
        }
        let rest = &self.src[self.pos..];
        let c = rest.chars().next().unwrap_or('\0');
        let single = |t| (t, c.len_utf8());
        let (tok, len) = match c {
            '+' => single(Tok::Plus),
            '-' | '\u{2212}' => single(Tok::Minus),
            '*' => single(Tok::Star),
            '/' => single(Tok::Slash),
            '^' => single(Tok::Caret),
            '(' => single(Tok::LParen),
            ')' => single(Tok::RParen),
            ',' => single(Tok::Comma),
            c if c.is_ascii_digit() || c == '.' => {
                let len = scan_number(rest.as_bytes());
                let lexeme = &rest[..len];
                match lexeme.parse::<f64>() {
                    Ok(v) if v.is_finite() => (Tok::Num(v), len),
                    _ => {
                        return Err(ParseError::Syntax {
                            offset: self.pos,
                            expected: "a finite decimal number".into(),
                        })
                    }
                }
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let len = rest
                    .bytes()
                    .take_while(|b| b.is_ascii_alphanumeric() || *b == b'_')
                    .count();
                (Tok::Ident, len)
            }
            _ => {
                return Err(ParseError::Syntax {
                    offset: self.pos,
                    expected: "a number, identifier, operator or parenthesis".into(),
                })
            }
        };
        self.tok = tok;
        self.pos += len;
        self.tok_end = self.pos;
        Ok(())
    }

    fn lexeme(&self) -> &'a str {
        &self.src[self.tok_start..self.tok_end]
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if self.tok == tok {
            self.advance()
        } else {
            Err(self.syntax(what))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.advance()?;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.advance()?;
            let rhs = self.factor()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.tok == Tok::Minus {
            self.advance()?;
            let inner = self.power()?;
            Ok(Expr::Neg(Box::new(inner)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.tok == Tok::Caret {
            self.advance()?;
            let exp = self.factor()?;
            Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.tok {
            Tok::Num(v) => {
                self.advance()?;
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.advance()?;
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident => {
                let name = self.lexeme();
                let offset = self.tok_start;
                self.advance()?;
                if self.tok == Tok::LParen {
                    let func = Func::from_name(name).ok_or_else(|| ParseError::UnknownIdent {
                        offset,
                        name: name.to_string(),
                    })?;
                    self.advance()?;
                    let mut args = vec![self.expr()?];
                    while self.tok == Tok::Comma {
                        self.advance()?;
                        args.push(self.expr()?);
                    }
                    self.expect(Tok::RParen, "`,` or `)`")?;
                    if args.len() != func.arity() {
                        return Err(ParseError::Arity {
                            offset,
                            name: name.to_string(),
                            expected: func.arity(),
                            found: args.len(),
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                if name == "pi" {
                    return Ok(Expr::Num(std::f64::consts::PI));
                }
                if let Some(v) = Var::from_name(name) {
                    return Ok(Expr::Var(v));
                }
                if Func::from_name(name).is_some() {
                    return Err(ParseError::Syntax {
                        offset: self.tok_start,
                        expected: "`(`".into(),
                    });
                }
                Err(ParseError::UnknownIdent {
                    offset,
                    name: name.to_string(),
                })
            }
            _ => Err(self.syntax("an expression")),
        }
    }
}

/// Length of the longest decimal-number prefix: `digits [. digits] [(e|E) [+-] digits]`.
fn scan_number(b: &[u8]) -> usize {
    let digits = |from: usize| b[from..].iter().take_while(|c| c.is_ascii_digit()).count();
    let mut i = digits(0);
    if i < b.len() && b[i] == b'.' {
        i += 1 + digits(i + 1);
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        let d = digits(j);
        if d > 0 {
            i = j + d;
        }
    }
    i
}

/// Parse `source` into an expression tree.
pub fn parse(source: &str) -> Result<Expr, ParseError> {
    let mut p = Parser::new(source)?;
    let e = p.expr()?;
    if p.tok != Tok::End {
        return Err(p.syntax("an operator or end of input"));
    }
    Ok(e)
}

impl std::str::FromStr for Expr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

impl Expr {
    /// Evaluate in double precision. Faults are reported, never returned as NaN.
    pub fn eval(&self, env: &Env) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Num(v) => return Ok(*v),
            Expr::Var(var) => return env.get(*var).ok_or(EvalError::Unbound(*var)),
            Expr::Neg(e) => -e.eval(env)?,
            Expr::Bin(op, l, r) => {
                let a = l.eval(env)?;
                let b = r.eval(env)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError::DivisionByZero(self.to_string()));
                        }
                        a / b
                    }
                    BinOp::Pow => {
                        let v = a.powf(b);
                        if v.is_nan() {
                            return Err(EvalError::Domain(self.to_string()));
                        }
                        v
                    }
                }
            }
            Expr::Call(func, args) => {
                let a = args[0].eval(env)?;
                match func {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Log => {
                        if a <= 0.0 {
                            return Err(EvalError::Domain(self.to_string()));
                        }
                        a.ln()
                    }
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(EvalError::Domain(self.to_string()));
                        }
                        a.sqrt()
                    }
                    Func::Abs => a.abs(),
                    Func::Tanh => a.tanh(),
                    Func::Min => a.min(args[1].eval(env)?),
                    Func::Max => a.max(args[1].eval(env)?),
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite(self.to_string()))
        }
    }

    /// Whether `var` occurs anywhere in the tree.
    pub fn mentions(&self, var: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(e) => e.mentions(var),
            Expr::Bin(_, l, r) => l.mentions(var) || r.mentions(var),
            Expr::Call(_, args) => args.iter().any(|a| a.mentions(var)),
        }
    }

    fn is_atom(&self) -> bool {
        matches!(self, Expr::Num(_) | Expr::Var(_) | Expr::Call(..))
    }

    fn fmt_operand(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_atom() {
            write!(f, "{self}")
        } else {
            write!(f, "({self})")
        }
    }
}

/// Prints every compound operand in parentheses, so the output re-parses
/// to the identical tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Neg(e) => {
                f.write_str("-")?;
                e.fmt_operand(f)
            }
            Expr::Bin(op, l, r) => {
                l.fmt_operand(f)?;
                write!(f, " {} ", op.symbol())?;
                r.fmt_operand(f)
            }
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
