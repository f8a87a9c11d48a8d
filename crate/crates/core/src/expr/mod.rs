//! Residual expressions: parsing, printing and exact differentiation.
//!
//! A residual is written in a small arithmetic language over the decision
//! variables `x1 … xN`:
//!
//! ```text
//! expr    := term (("+" | "-") term)*
//! term    := unary (("*" | "/") unary)*
//! unary   := "-" unary | power
//! power   := primary ("^" unary)?
//! primary := number | "pi" | var | func "(" expr ")" | "(" expr ")"
//! func    := sin | cos | exp | ln | sqrt
//! ```
//!
//! Derivatives come from forward-mode dual numbers; Hessians use one nested
//! forward pass per variable.

mod dual;
mod parse;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
pub use dual::{Dual, Scalar};
pub use parse::{ParseError, ParseErrorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
        }
    }
}

/// Expression tree node. Variables are stored zero-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Pi,
    Var(usize),
    Neg(Box<Node>),
    Binary {
        op: BinOp,
        lhs: Box<Node>,
        rhs: Box<Node>,
        /// For `^`: the exponent when it is a variable-free integer.
        int_exponent: Option<i32>,
    },
    Call(Func, Box<Node>),
}

impl Node {
    fn binary(op: BinOp, lhs: Node, rhs: Node) -> Node {
        let int_exponent = if op == BinOp::Pow {
            rhs.constant_value()
                .filter(|v| v.fract() == 0.0 && v.abs() <= i32::MAX as f64)
                .map(|v| v as i32)
        } else {
            None
        };
        Node::Binary {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
            int_exponent,
        }
    }

    /// Value of a variable-free subtree, if it evaluates cleanly.
    fn constant_value(&self) -> Option<f64> {
        let v = eval_node::<f64>(self, &[]).ok()?;
        v.is_finite().then_some(v)
    }

    fn is_atom(&self) -> bool {
        matches!(
            self,
            Node::Const(_) | Node::Pi | Node::Var(_) | Node::Call(..)
        )
    }

    fn max_var(&self) -> Option<usize> {
        match self {
            Node::Const(_) | Node::Pi => None,
            Node::Var(i) => Some(*i),
            Node::Neg(e) | Node::Call(_, e) => e.max_var(),
            Node::Binary { lhs, rhs, .. } => lhs.max_var().max(rhs.max_var()),
        }
    }

    fn fmt_atom(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_atom() {
            write!(f, "{self}")
        } else {
            write!(f, "({self})")
        }
    }
}

/// Canonical form: every binary operation is parenthesized, so re-parsing
/// the output reproduces the same tree.
impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Const(v) => write!(f, "{v:?}"),
            Node::Pi => f.write_str("pi"),
            Node::Var(i) => write!(f, "x{}", i + 1),
            Node::Neg(e) => {
                f.write_str("-")?;
                e.fmt_atom(f)
            }
            Node::Binary { op, lhs, rhs, .. } => {
                f.write_str("(")?;
                if *op == BinOp::Pow {
                    lhs.fmt_atom(f)?;
                } else {
                    write!(f, "{lhs}")?;
                }
                write!(f, " {} {rhs})", op.symbol())
            }
            Node::Call(func, arg) => write!(f, "{}({arg})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{op} domain error at `{subexpr}` (argument {argument})")]
    Domain {
        op: &'static str,
        subexpr: String,
        argument: f64,
    },
    #[error("expected {expected} variables, got {got}")]
    Dimension { expected: usize, got: usize },
}

fn domain(op: &'static str, node: &Node, argument: f64) -> EvalError {
    EvalError::Domain {
        op,
        subexpr: node.to_string(),
        argument,
    }
}

fn eval_node<T: Scalar>(node: &Node, vars: &[T]) -> Result<T, EvalError> {
    Ok(match node {
        Node::Const(v) => T::constant(*v),
        Node::Pi => T::constant(std::f64::consts::PI),
        Node::Var(i) => vars.get(*i).cloned().ok_or(EvalError::Dimension {
            expected: i + 1,
            got: vars.len(),
        })?,
        Node::Neg(e) => -eval_node(e, vars)?,
        Node::Binary {
            op,
            lhs,
            rhs,
            int_exponent,
        } => {
            let a = eval_node(lhs, vars)?;
            match (op, int_exponent) {
                (BinOp::Pow, Some(k)) => {
                    if *k < 0 && a.re() == 0.0 {
                        return Err(domain("pow", node, a.re()));
                    }
                    a.powi(*k)
                }
                (BinOp::Pow, None) => {
                    if a.re() <= 0.0 {
                        return Err(domain("pow", node, a.re()));
                    }
                    let b = eval_node(rhs, vars)?;
                    (b * a.ln()).exp()
                }
                _ => {
                    let b = eval_node(rhs, vars)?;
                    match op {
                        BinOp::Add => a + b,
                        BinOp::Sub => a - b,
                        BinOp::Mul => a * b,
                        BinOp::Div => {
                            if b.re() == 0.0 {
                                return Err(domain("division", node, 0.0));
                            }
                            a / b
                        }
                        BinOp::Pow => unreachable!(),
                    }
                }
            }
        }
        Node::Call(func, arg) => {
            let a = eval_node(arg, vars)?;
            match func {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Exp => a.exp(),
                Func::Ln => {
                    if a.re() <= 0.0 {
                        return Err(domain("ln", node, a.re()));
                    }
                    a.ln()
                }
                Func::Sqrt => {
                    let v = a.re();
                    if v < 0.0 || (T::DIFFERENTIATES && v == 0.0) {
                        return Err(domain("sqrt", node, v));
                    }
                    a.sqrt()
                }
            }
        }
    })
}

/// Derivative order requested from [`ResidualExpr::eval_dual`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    First,
    Second,
}

/// Value, gradient and optionally Hessian of an expression at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct DualValue {
    pub value: f64,
    pub first: Vec<f64>,
    pub second: Option<Matrix>,
}

/// A parsed residual function `r(x)`. Immutable after parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ResidualSource", into = "ResidualSource")]
pub struct ResidualExpr {
    root: Node,
    n_vars: usize,
    source: String,
}

#[derive(Serialize, Deserialize)]
struct ResidualSource {
    text: String,
    n_vars: usize,
}

impl TryFrom<ResidualSource> for ResidualExpr {
    type Error = ParseError;
    fn try_from(src: ResidualSource) -> Result<Self, ParseError> {
        ResidualExpr::parse(&src.text, src.n_vars)
    }
}

impl From<ResidualExpr> for ResidualSource {
    fn from(e: ResidualExpr) -> Self {
        ResidualSource {
            text: e.source,
            n_vars: e.n_vars,
        }
    }
}

impl ResidualExpr {
    pub fn parse(text: &str, n_vars: usize) -> Result<Self, ParseError> {
        let root = parse::parse_node(text, n_vars)?;
        debug_assert!(root.max_var().is_none_or(|i| i < n_vars));
        Ok(Self {
            root,
            n_vars,
            source: text.to_string(),
        })
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// The text this expression was parsed from.
    pub fn source(&self) -> &str {
        &self.source
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), EvalError> {
        if x.len() != self.n_vars {
            return Err(EvalError::Dimension {
                expected: self.n_vars,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.check_dim(x)?;
        eval_node(&self.root, x)
    }

    /// Generic evaluation over any [`Scalar`], for callers that seed their
    /// own dual numbers.
    pub fn eval_with<T: Scalar>(&self, vars: &[T]) -> Result<T, EvalError> {
        if vars.len() != self.n_vars {
            return Err(EvalError::Dimension {
                expected: self.n_vars,
                got: vars.len(),
            });
        }
        eval_node(&self.root, vars)
    }

    pub fn eval_dual(&self, x: &[f64], order: Order) -> Result<DualValue, EvalError> {
        self.check_dim(x)?;
        let n = self.n_vars;
        match order {
            Order::First => {
                let vars: Vec<Dual<f64>> = x
                    .iter()
                    .enumerate()
                    .map(|(i, &xi)| Dual::variable(xi, i, n))
                    .collect();
                let out = eval_node(&self.root, &vars)?;
                Ok(DualValue {
                    value: out.re,
                    first: padded(out.eps, n),
                    second: None,
                })
            }
            Order::Second => {
                let mut hessian = Matrix::zeros(n, n);
                let mut value = 0.0;
                let mut first = vec![0.0; n];
                if n == 0 {
                    value = eval_node::<f64>(&self.root, &[])?;
                }
                for j in 0..n {
                    let vars: Vec<Dual<Dual<f64>>> = x
                        .iter()
                        .enumerate()
                        .map(|(i, &xi)| {
                            let seed = if i == j { 1.0 } else { 0.0 };
                            Dual::new(Dual::variable(xi, i, n), vec![Dual::constant(seed)])
                        })
                        .collect();
                    let out = eval_node(&self.root, &vars)?;
                    if j == 0 {
                        value = out.re.re;
                        first = padded(out.re.eps, n);
                    }
                    let row = out
                        .eps
                        .into_iter()
                        .next()
                        .map(|d| padded(d.eps, n))
                        .unwrap_or_else(|| vec![0.0; n]);
                    for (k, h) in row.into_iter().enumerate() {
                        hessian[(j, k)] = h;
                    }
                }
                hessian.symmetrize();
                Ok(DualValue {
                    value,
                    first,
                    second: Some(hessian),
                })
            }
        }
    }
}

fn padded(mut v: Vec<f64>, n: usize) -> Vec<f64> {
    v.resize(n, 0.0);
    v
}

impl fmt::Display for ResidualExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)
    }
}
