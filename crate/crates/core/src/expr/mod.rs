//! Expression trees with protected arithmetic.
//!
//! Expressions reference named constants (model parameters resolved through
//! an [`Environment`]) and named variables (state and observed temporal
//! variables). Protected operator semantics keep evaluation total:
//!
//! * `a / b` returns 1.0 when `|b| < 1e-9`;
//! * `log x` evaluates `ln |x|` and returns 0 at `x = 0`;
//! * `exp x` clamps its argument to `[-50, 50]`;
//! * `pow` takes a constant integer exponent and falls back to 1.0 if the
//!   result overflows.
//!
//! The tree-walk evaluator [`eval_tree`] and the compiled evaluator in
//! [`program`] share these kernels and apply operations in the same order,
//! so their results agree bit for bit.

mod cache;
mod program;
mod sexpr;

pub use cache::{canonical_key, quantize_sig12, EvalCache};
pub use program::{compile, eval_program, Instr, Program};
pub use sexpr::parse_sexpr;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnaryOp {
    Log,
    Exp,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
    Pow,
}

impl BinaryOp {
    pub fn is_commutative(self) -> bool {
        matches!(self, BinaryOp::Add | BinaryOp::Mul | BinaryOp::Min | BinaryOp::Max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(f64),
    /// Named model parameter, bound through the environment.
    Const(String),
    Var(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Error, PartialEq)]
#[error("unbound identifier `{id}`")]
pub struct EnvError {
    pub id: String,
}

/// Variable and parameter bindings for one evaluation.
#[derive(Debug, Clone, Default)]
pub struct Environment {
    pub vars: BTreeMap<String, f64>,
    pub params: BTreeMap<String, f64>,
}

impl Environment {
    pub fn var(&self, id: &str) -> Result<f64, EnvError> {
        self.vars.get(id).copied().ok_or_else(|| EnvError { id: id.to_string() })
    }

    pub fn param(&self, id: &str) -> Result<f64, EnvError> {
        self.params.get(id).copied().ok_or_else(|| EnvError { id: id.to_string() })
    }
}

pub const DIV_EPSILON: f64 = 1e-9;
pub const EXP_CLAMP: f64 = 50.0;

#[inline]
pub fn apply_unary(op: UnaryOp, a: f64) -> f64 {
    match op {
        UnaryOp::Log => {
            if a == 0.0 {
                0.0
            } else {
                a.abs().ln()
            }
        }
        UnaryOp::Exp => a.clamp(-EXP_CLAMP, EXP_CLAMP).exp(),
        UnaryOp::Neg => -a,
    }
}

#[inline]
pub fn apply_binary(op: BinaryOp, a: f64, b: f64) -> f64 {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => {
            if b.abs() < DIV_EPSILON {
                1.0
            } else {
                a / b
            }
        }
        BinaryOp::Min => a.min(b),
        BinaryOp::Max => a.max(b),
        BinaryOp::Pow => {
            let r = a.powi(b as i32);
            if r.is_finite() {
                r
            } else {
                1.0
            }
        }
    }
}

impl Expr {
    pub fn literal(v: f64) -> Expr {
        Expr::Literal(v)
    }

    pub fn constant(id: impl Into<String>) -> Expr {
        Expr::Const(id.into())
    }

    pub fn var(id: impl Into<String>) -> Expr {
        Expr::Var(id.into())
    }

    pub fn unary(op: UnaryOp, a: Expr) -> Expr {
        Expr::Unary(op, Box::new(a))
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn to_sexpr(&self) -> String {
        sexpr::print(self)
    }

    /// Identifiers of constants referenced anywhere in the expression.
    pub fn const_ids(&self, out: &mut std::collections::BTreeSet<String>) {
        match self {
            Expr::Const(id) => {
                out.insert(id.clone());
            }
            Expr::Unary(_, a) => a.const_ids(out),
            Expr::Binary(_, a, b) => {
                a.const_ids(out);
                b.const_ids(out);
            }
            _ => {}
        }
    }

    /// Identifiers of variables referenced anywhere in the expression.
    pub fn var_ids(&self, out: &mut std::collections::BTreeSet<String>) {
        match self {
            Expr::Var(id) => {
                out.insert(id.clone());
            }
            Expr::Unary(_, a) => a.var_ids(out),
            Expr::Binary(_, a, b) => {
                a.var_ids(out);
                b.var_ids(out);
            }
            _ => {}
        }
    }

    /// Pow exponents must be constant integer literals; everything else is
    /// arity-correct by construction.
    pub fn check_pow_exponents(&self) -> Result<(), String> {
        match self {
            Expr::Binary(BinaryOp::Pow, a, b) => {
                match **b {
                    Expr::Literal(v) if v.fract() == 0.0 => {}
                    _ => return Err("pow requires a constant integer exponent".to_string()),
                }
                a.check_pow_exponents()
            }
            Expr::Binary(_, a, b) => {
                a.check_pow_exponents()?;
                b.check_pow_exponents()
            }
            Expr::Unary(_, a) => a.check_pow_exponents(),
            _ => Ok(()),
        }
    }
}

/// Recursive evaluation with protected operators. The result may be
/// non-finite when intermediate magnitudes overflow; callers flag that
/// instead of aborting.
pub fn eval_tree(e: &Expr, env: &Environment) -> Result<f64, EnvError> {
    match e {
        Expr::Literal(v) => Ok(*v),
        Expr::Const(id) => env.param(id),
        Expr::Var(id) => env.var(id),
        Expr::Unary(op, a) => Ok(apply_unary(*op, eval_tree(a, env)?)),
        Expr::Binary(op, a, b) => {
            let a = eval_tree(a, env)?;
            let b = eval_tree(b, env)?;
            Ok(apply_binary(*op, a, b))
        }
    }
}

/// Constant folding, identity rules, and canonical ordering of commutative
/// operands. Protected semantics are preserved: folding applies the same
/// kernels as evaluation, and the identity rules hold exactly under them
/// (`x / x` is 1.0 for every x, including the protected branch).
pub fn simplify(e: &Expr) -> Expr {
    match e {
        Expr::Literal(_) | Expr::Const(_) | Expr::Var(_) => e.clone(),
        Expr::Unary(op, a) => {
            let a = simplify(a);
            if let Expr::Literal(v) = a {
                return Expr::Literal(apply_unary(*op, v));
            }
            if *op == UnaryOp::Neg {
                if let Expr::Unary(UnaryOp::Neg, inner) = &a {
                    return (**inner).clone();
                }
            }
            Expr::Unary(*op, Box::new(a))
        }
        Expr::Binary(op, a, b) => {
            let mut a = simplify(a);
            let mut b = simplify(b);
            if op.is_commutative() && a.to_sexpr() > b.to_sexpr() {
                std::mem::swap(&mut a, &mut b);
            }
            if let (Expr::Literal(x), Expr::Literal(y)) = (&a, &b) {
                return Expr::Literal(apply_binary(*op, *x, *y));
            }
            match op {
                BinaryOp::Add => {
                    if a == Expr::Literal(0.0) {
                        return b;
                    }
                    if b == Expr::Literal(0.0) {
                        return a;
                    }
                }
                BinaryOp::Sub => {
                    if b == Expr::Literal(0.0) {
                        return a;
                    }
                    if a == b {
                        return Expr::Literal(0.0);
                    }
                }
                BinaryOp::Mul => {
                    if a == Expr::Literal(0.0) || b == Expr::Literal(0.0) {
                        return Expr::Literal(0.0);
                    }
                    if a == Expr::Literal(1.0) {
                        return b;
                    }
                    if b == Expr::Literal(1.0) {
                        return a;
                    }
                }
                BinaryOp::Div => {
                    if b == Expr::Literal(1.0) {
                        return a;
                    }
                    if a == b {
                        return Expr::Literal(1.0);
                    }
                }
                BinaryOp::Pow => {
                    if b == Expr::Literal(1.0) {
                        return a;
                    }
                    if b == Expr::Literal(0.0) {
                        return Expr::Literal(1.0);
                    }
                }
                _ => {}
            }
            Expr::Binary(*op, Box::new(a), Box::new(b))
        }
    }
}
