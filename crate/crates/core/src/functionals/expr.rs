//! A tiny arithmetic language for weights, directions and transports.
//!
//! Grammar (lowest precedence first):
//!
//! ```text
//! cmp   := sum (("<" | "<=" | ">" | ">=" | "==" | "!=") sum)?
//! sum   := prod (("+" | "-") prod)*
//! prod  := unary (("*" | "/") unary)*
//! unary := "-" unary | atom
//! atom  := number | identifier | "(" cmp ")"
//! ```
//!
//! Comparisons evaluate to 1 or 0. Identifiers name dataset columns; `D`
//! additionally refers to the treatment unless a column is called `D`.

use std::fmt;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(String),
    Neg(Box<Node>),
    Bin(Op, Box<Node>, Box<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
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
}

impl Op {
    fn apply(self, a: f64, b: f64) -> f64 {
        let ind = |c: bool| if c { 1.0 } else { 0.0 };
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
            Op::Div => a / b,
            Op::Lt => ind(a < b),
            Op::Le => ind(a <= b),
            Op::Gt => ind(a > b),
            Op::Ge => ind(a >= b),
            Op::Eq => ind(a == b),
            Op::Ne => ind(a != b),
        }
    }
}

/// Parsed expression; serializes as its source text.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Expr {
    source: String,
    root: Node,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl From<Expr> for String {
    fn from(e: Expr) -> String {
        e.source
    }
}

impl TryFrom<String> for Expr {
    type Error = Error;
    fn try_from(s: String) -> Result<Expr> {
        Expr::parse(&s)
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr> {
        let tokens = tokenize(source)?;
        let mut p = Parser { tokens: &tokens, pos: 0 };
        let root = p.cmp()?;
        if p.pos != tokens.len() {
            return Err(Error::Expression(format!("unexpected trailing input in `{source}`")));
        }
        Ok(Expr { source: source.to_string(), root })
    }

    pub fn constant(v: f64) -> Expr {
        Expr { source: format!("{v}"), root: Node::Num(v) }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Names of the variables the expression reads.
    pub fn variables(&self) -> Vec<String> {
        fn walk(n: &Node, out: &mut Vec<String>) {
            match n {
                Node::Num(_) => {}
                Node::Var(v) => {
                    if !out.contains(v) {
                        out.push(v.clone());
                    }
                }
                Node::Neg(a) => walk(a, out),
                Node::Bin(_, a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    /// Resolve variable names against the columns of a `(D, X)` matrix.
    pub fn bind(&self, names: &[String]) -> Result<BoundExpr> {
        fn go(n: &Node, names: &[String]) -> Result<Bound> {
            Ok(match n {
                Node::Num(v) => Bound::Num(*v),
                Node::Var(v) => Bound::Col(resolve(v, names)?),
                Node::Neg(a) => Bound::Neg(Box::new(go(a, names)?)),
                Node::Bin(op, a, b) => Bound::Bin(*op, Box::new(go(a, names)?), Box::new(go(b, names)?)),
            })
        }
        Ok(BoundExpr { root: go(&self.root, names)?, source: self.source.clone() })
    }
}

pub(crate) fn resolve(v: &str, names: &[String]) -> Result<usize> {
    if let Some(i) = names.iter().position(|c| c == v) {
        return Ok(i);
    }
    if v == "D" {
        return Ok(0);
    }
    Err(Error::Expression(format!("unknown column `{v}`")))
}

#[derive(Debug, Clone)]
enum Bound {
    Num(f64),
    Col(usize),
    Neg(Box<Bound>),
    Bin(Op, Box<Bound>, Box<Bound>),
}

impl Bound {
    fn eval(&self, row: ndarray::ArrayView1<f64>) -> f64 {
        match self {
            Bound::Num(v) => *v,
            Bound::Col(i) => row[*i],
            Bound::Neg(a) => -a.eval(row),
            Bound::Bin(op, a, b) => op.apply(a.eval(row), b.eval(row)),
        }
    }

    fn reads(&self, col: usize) -> bool {
        match self {
            Bound::Num(_) => false,
            Bound::Col(i) => *i == col,
            Bound::Neg(a) => a.reads(col),
            Bound::Bin(_, a, b) => a.reads(col) || b.reads(col),
        }
    }
}

/// An expression with column references resolved to indices.
#[derive(Debug, Clone)]
pub struct BoundExpr {
    root: Bound,
    source: String,
}

impl BoundExpr {
    pub fn eval(&self, rows: ArrayView2<f64>) -> Array1<f64> {
        Array1::from_iter(rows.rows().into_iter().map(|r| self.root.eval(r)))
    }

    pub fn reads_column(&self, col: usize) -> bool {
        self.root.reads(col)
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
}

fn tokenize(s: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| Error::Expression(format!("bad number `{text}`")))?;
            out.push(Tok::Num(v));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            let op = match two.as_str() {
                "<=" => Some("<="),
                ">=" => Some(">="),
                "==" => Some("=="),
                "!=" => Some("!="),
                _ => None,
            };
            if let Some(op) = op {
                out.push(Tok::Op(op));
                i += 2;
                continue;
            }
            out.push(match c {
                '+' => Tok::Op("+"),
                '-' => Tok::Op("-"),
                '*' => Tok::Op("*"),
                '/' => Tok::Op("/"),
                '<' => Tok::Op("<"),
                '>' => Tok::Op(">"),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                _ => return Err(Error::Expression(format!("unexpected character `{c}` in `{s}`"))),
            });
            i += 1;
        }
    }
    if out.is_empty() {
        return Err(Error::Expression("empty expression".into()));
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [Tok],
    pos: usize,
}

impl Parser<'_> {
    fn peek_op(&self) -> Option<&'static str> {
        match self.tokens.get(self.pos) {
            Some(Tok::Op(o)) => Some(o),
            _ => None,
        }
    }

    fn cmp(&mut self) -> Result<Node> {
        let lhs = self.sum()?;
        let op = match self.peek_op() {
            Some("<") => Op::Lt,
            Some("<=") => Op::Le,
            Some(">") => Op::Gt,
            Some(">=") => Op::Ge,
            Some("==") => Op::Eq,
            Some("!=") => Op::Ne,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        let rhs = self.sum()?;
        Ok(Node::Bin(op, Box::new(lhs), Box::new(rhs)))
    }

    fn sum(&mut self) -> Result<Node> {
        let mut lhs = self.prod()?;
        loop {
            let op = match self.peek_op() {
                Some("+") => Op::Add,
                Some("-") => Op::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.prod()?));
        }
    }

    fn prod(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek_op() {
                Some("*") => Op::Mul,
                Some("/") => Op::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek_op() == Some("-") {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Node> {
        let tok = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        match tok {
            Some(Tok::Num(v)) => Ok(Node::Num(v)),
            Some(Tok::Ident(name)) => Ok(Node::Var(name)),
            Some(Tok::LParen) => {
                let inner = self.cmp()?;
                match self.tokens.get(self.pos) {
                    Some(Tok::RParen) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => Err(Error::Expression("missing `)`".into())),
                }
            }
            other => Err(Error::Expression(format!("unexpected token {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn names() -> Vec<String> {
        vec!["treat".into(), "age".into(), "inc".into()]
    }

    #[test]
    fn precedence_and_indicators() {
        let rows = array![[1.0, 30.0, 2.0], [0.0, 50.0, -1.0]];
        let e = Expr::parse("1 + 2 * age / 10 - -inc").unwrap().bind(&names()).unwrap();
        assert_eq!(e.eval(rows.view()).to_vec(), vec![1.0 + 6.0 + 2.0, 1.0 + 10.0 - 1.0]);
        let e = Expr::parse("(age >= 40) * 2").unwrap().bind(&names()).unwrap();
        assert_eq!(e.eval(rows.view()).to_vec(), vec![0.0, 2.0]);
        let e = Expr::parse("D + 1.5e1").unwrap().bind(&names()).unwrap();
        assert_eq!(e.eval(rows.view()).to_vec(), vec![16.0, 15.0]);
        assert!(e.reads_column(0));
    }

    #[test]
    fn errors() {
        assert!(Expr::parse("").is_err());
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("(1").is_err());
        assert!(Expr::parse("1 $ 2").is_err());
        assert!(Expr::parse("x").unwrap().bind(&names()).is_err());
    }

    #[test]
    fn serde_as_string() {
        let e: Expr = serde_json::from_str("\"age * 2\"").unwrap();
        assert_eq!(e.variables(), vec!["age".to_string()]);
        assert_eq!(serde_json::to_string(&e).unwrap(), "\"age * 2\"");
        assert!(serde_json::from_str::<Expr>("\"age *\"").is_err());
    }
}
