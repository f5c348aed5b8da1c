//! Kernel expressions.
//!
//! Rate kernels, offspring intensities, and test functions are given in
//! model files as strings over a small closed grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := number | 'u' | 'v' | 'pi' | '(' expr ')' | func '(' expr ')'
//! func   := 'sin' | 'cos' | 'exp' | 'sqrt'
//! ```
//!
//! There is no unary minus; write `0-x`. Numbers accept an optional
//! fraction and exponent (`0.5`, `1e-3`). Expressions are parsed once into
//! a tree and evaluated with plain f64 arithmetic, so evaluation is
//! deterministic across runs and platforms with IEEE doubles.

use crate::error::{Error, Result};

/// Whether an expression may refer to `v` (second torus coordinate).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    Univariate,
    Bivariate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
}

#[derive(Debug, Clone)]
enum Node {
    Num(f64),
    U,
    V,
    Bin(Op, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// A parsed kernel expression together with its source text.
#[derive(Debug, Clone)]
pub struct KernelExpr {
    source: String,
    arity: Arity,
    root: Node,
}

impl KernelExpr {
    pub fn parse(text: &str, arity: Arity) -> Result<Self> {
        let tokens = lex(text)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            arity,
            end: text.len(),
        };
        let root = parser.expr()?;
        if parser.pos < parser.tokens.len() {
            let (at, _) = parser.tokens[parser.pos];
            return Err(Error::Parse {
                position: at,
                message: "unexpected trailing input".into(),
            });
        }
        Ok(KernelExpr {
            source: text.to_string(),
            arity,
            root,
        })
    }

    /// The kernel that is identically zero (stands in for omitted entries).
    pub fn zero(arity: Arity) -> Self {
        KernelExpr {
            source: "0".into(),
            arity,
            root: Node::Num(0.0),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn arity(&self) -> Arity {
        self.arity
    }

    /// Evaluate at (u, v). Univariate expressions ignore `v`.
    pub fn eval2(&self, u: f64, v: f64) -> f64 {
        eval(&self.root, u, v)
    }

    /// Evaluate a univariate expression at u.
    pub fn eval1(&self, u: f64) -> f64 {
        debug_assert_eq!(self.arity, Arity::Univariate);
        eval(&self.root, u, f64::NAN)
    }
}

fn eval(node: &Node, u: f64, v: f64) -> f64 {
    match node {
        Node::Num(c) => *c,
        Node::U => u,
        Node::V => v,
        Node::Bin(op, l, r) => {
            let (a, b) = (eval(l, u, v), eval(r, u, v));
            match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => a / b,
            }
        }
        Node::Call(f, arg) => {
            let x = eval(arg, u, v);
            match f {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Exp => x.exp(),
                Func::Sqrt => x.sqrt(),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push((i, Tok::Plus));
                i += 1;
            }
            '-' => {
                out.push((i, Tok::Minus));
                i += 1;
            }
            '*' => {
                out.push((i, Tok::Star));
                i += 1;
            }
            '/' => {
                out.push((i, Tok::Slash));
                i += 1;
            }
            '(' => {
                out.push((i, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((i, Tok::RParen));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                // Exponent only counts when followed by a well-formed tail,
                // so `2*exp(u)` still lexes `exp` as an identifier.
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let s = &text[start..i];
                let value: f64 = s.parse().map_err(|_| Error::Parse {
                    position: start,
                    message: format!("malformed number '{s}'"),
                })?;
                out.push((start, Tok::Num(value)));
            }
            'a'..='z' | 'A'..='Z' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Tok::Ident(text[start..i].to_string())));
            }
            _ => {
                return Err(Error::Parse {
                    position: i,
                    message: format!("unexpected character '{c}'"),
                })
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
    arity: Arity,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(at, _)| *at)
            .unwrap_or(self.end)
    }

    fn expr(&mut self) -> Result<Node> {
        let mut node = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => Op::Add,
                Some(Tok::Minus) => Op::Sub,
                _ => return Ok(node),
            };
            self.pos += 1;
            let rhs = self.term()?;
            node = Node::Bin(op, Box::new(node), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut node = self.factor()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Star) => Op::Mul,
                Some(Tok::Slash) => Op::Div,
                _ => return Ok(node),
            };
            self.pos += 1;
            let rhs = self.factor()?;
            node = Node::Bin(op, Box::new(node), Box::new(rhs));
        }
    }

    fn factor(&mut self) -> Result<Node> {
        let at = self.here();
        let tok = match self.peek() {
            Some(t) => t.clone(),
            None => {
                return Err(Error::Parse {
                    position: at,
                    message: "unexpected end of input".into(),
                })
            }
        };
        match tok {
            Tok::Num(value) => {
                self.pos += 1;
                Ok(Node::Num(value))
            }
            Tok::LParen => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.pos += 1;
                match name.as_str() {
                    "u" => Ok(Node::U),
                    "v" => {
                        if self.arity == Arity::Univariate {
                            Err(Error::Parse {
                                position: at,
                                message: "'v' is not allowed in a single-variable expression"
                                    .into(),
                            })
                        } else {
                            Ok(Node::V)
                        }
                    }
                    "pi" => Ok(Node::Num(std::f64::consts::PI)),
                    "sin" | "cos" | "exp" | "sqrt" => {
                        let func = match name.as_str() {
                            "sin" => Func::Sin,
                            "cos" => Func::Cos,
                            "exp" => Func::Exp,
                            _ => Func::Sqrt,
                        };
                        match self.peek() {
                            Some(Tok::LParen) => self.pos += 1,
                            _ => {
                                return Err(Error::Parse {
                                    position: self.here(),
                                    message: format!("expected '(' after '{name}'"),
                                })
                            }
                        }
                        let arg = self.expr()?;
                        self.expect_rparen()?;
                        Ok(Node::Call(func, Box::new(arg)))
                    }
                    _ => Err(Error::Parse {
                        position: at,
                        message: format!("unknown identifier '{name}'"),
                    }),
                }
            }
            other => Err(Error::Parse {
                position: at,
                message: format!("unexpected token {other:?}"),
            }),
        }
    }

    fn expect_rparen(&mut self) -> Result<()> {
        match self.peek() {
            Some(Tok::RParen) => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(Error::Parse {
                position: self.here(),
                message: "expected ')'".into(),
            }),
        }
    }
}
