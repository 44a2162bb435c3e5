//! Shared helpers for tests and the acceptance suite. Not part of the
//! public API surface.

use crate::expr::{BinaryOp, Environment, Expr, UnaryOp};
use rand::Rng;
use std::collections::BTreeSet;

const TEST_VARS: [&str; 6] = ["V_tmp", "V_lgt", "V_do", "V_ph", "B_Phy", "B_Zoo"];
const TEST_CONSTS: [&str; 4] = ["C_UA", "C_BL", "C_FS", "C_PT"];

/// Random expression of bounded depth over a fixed identifier pool. Pow
/// exponents are always small integer literals.
pub fn random_expr<R: Rng>(rng: &mut R, max_depth: usize) -> Expr {
    if max_depth == 0 || rng.gen_bool(0.3) {
        return match rng.gen_range(0..3) {
            0 => Expr::literal((rng.gen_range(-1000i64..1000) as f64) / 64.0),
            1 => Expr::var(TEST_VARS[rng.gen_range(0..TEST_VARS.len())]),
            _ => Expr::constant(TEST_CONSTS[rng.gen_range(0..TEST_CONSTS.len())]),
        };
    }
    if rng.gen_bool(0.25) {
        let op = [UnaryOp::Log, UnaryOp::Exp, UnaryOp::Neg][rng.gen_range(0..3)];
        return Expr::unary(op, random_expr(rng, max_depth - 1));
    }
    let op = [
        BinaryOp::Add,
        BinaryOp::Sub,
        BinaryOp::Mul,
        BinaryOp::Div,
        BinaryOp::Min,
        BinaryOp::Max,
        BinaryOp::Pow,
    ][rng.gen_range(0..7)];
    if op == BinaryOp::Pow {
        return Expr::binary(
            op,
            random_expr(rng, max_depth - 1),
            Expr::literal(rng.gen_range(0..4) as f64),
        );
    }
    Expr::binary(op, random_expr(rng, max_depth - 1), random_expr(rng, max_depth - 1))
}

/// Environment binding every identifier the expression references to a
/// bounded random value.
pub fn random_env_for<R: Rng>(e: &Expr, rng: &mut R) -> Environment {
    let mut vars = BTreeSet::new();
    let mut consts = BTreeSet::new();
    e.var_ids(&mut vars);
    e.const_ids(&mut consts);
    let mut env = Environment::default();
    for id in vars {
        env.vars.insert(id, rng.gen_range(-100.0..100.0));
    }
    for id in consts {
        env.params.insert(id, rng.gen_range(-10.0..10.0));
    }
    env
}
