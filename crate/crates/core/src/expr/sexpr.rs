//! S-expression rendering and parsing for expressions.
//!
//! Model exports render equations as S-expressions, e.g.
//! `(- (* B_Phy (- mu_Phy gamma_Phy)) (* B_Zoo phi))`. Parsing needs to
//! know which identifiers are constants, so it takes the set of declared
//! constant ids; every other identifier is a variable reference.

use super::{BinaryOp, Expr, UnaryOp};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SexprError {
    #[error("unexpected end of input")]
    Eof,
    #[error("unexpected token `{0}`")]
    Unexpected(String),
    #[error("operator `{op}` expects {expected} operands, got {got}")]
    Arity { op: String, expected: usize, got: usize },
}

pub(super) fn print(e: &Expr) -> String {
    match e {
        Expr::Literal(v) => format_literal(*v),
        Expr::Const(id) | Expr::Var(id) => id.clone(),
        Expr::Unary(op, a) => format!("({} {})", unary_name(*op), print(a)),
        Expr::Binary(op, a, b) => format!("({} {} {})", binary_name(*op), print(a), print(b)),
    }
}

fn format_literal(v: f64) -> String {
    // Shortest round-trip formatting; stable across runs.
    format!("{v}")
}

fn unary_name(op: UnaryOp) -> &'static str {
    match op {
        UnaryOp::Log => "log",
        UnaryOp::Exp => "exp",
        UnaryOp::Neg => "neg",
    }
}

fn binary_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "+",
        BinaryOp::Sub => "-",
        BinaryOp::Mul => "*",
        BinaryOp::Div => "/",
        BinaryOp::Min => "min",
        BinaryOp::Max => "max",
        BinaryOp::Pow => "pow",
    }
}

fn unary_by_name(name: &str) -> Option<UnaryOp> {
    match name {
        "log" => Some(UnaryOp::Log),
        "exp" => Some(UnaryOp::Exp),
        "neg" => Some(UnaryOp::Neg),
        _ => None,
    }
}

fn binary_by_name(name: &str) -> Option<BinaryOp> {
    match name {
        "+" => Some(BinaryOp::Add),
        "-" => Some(BinaryOp::Sub),
        "*" => Some(BinaryOp::Mul),
        "/" => Some(BinaryOp::Div),
        "min" => Some(BinaryOp::Min),
        "max" => Some(BinaryOp::Max),
        "pow" => Some(BinaryOp::Pow),
        _ => None,
    }
}

fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        match c {
            '(' | ')' => {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            }
            c if c.is_whitespace() => {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
            }
            c => current.push(c),
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Parses an S-expression. Identifiers in `const_ids` become constant
/// references; all other identifiers become variable references.
pub fn parse_sexpr(text: &str, const_ids: &BTreeSet<String>) -> Result<Expr, SexprError> {
    let tokens = tokenize(text);
    let mut pos = 0;
    let expr = parse_at(&tokens, &mut pos, const_ids)?;
    if pos != tokens.len() {
        return Err(SexprError::Unexpected(tokens[pos].clone()));
    }
    Ok(expr)
}

fn parse_at(tokens: &[String], pos: &mut usize, const_ids: &BTreeSet<String>) -> Result<Expr, SexprError> {
    let token = tokens.get(*pos).ok_or(SexprError::Eof)?;
    *pos += 1;
    if token == "(" {
        let op = tokens.get(*pos).ok_or(SexprError::Eof)?.clone();
        *pos += 1;
        let mut args = Vec::new();
        loop {
            let next = tokens.get(*pos).ok_or(SexprError::Eof)?;
            if next == ")" {
                *pos += 1;
                break;
            }
            args.push(parse_at(tokens, pos, const_ids)?);
        }
        if let Some(u) = unary_by_name(&op) {
            if args.len() != 1 {
                return Err(SexprError::Arity { op, expected: 1, got: args.len() });
            }
            return Ok(Expr::Unary(u, Box::new(args.pop().unwrap())));
        }
        if let Some(b) = binary_by_name(&op) {
            if args.len() != 2 {
                return Err(SexprError::Arity { op, expected: 2, got: args.len() });
            }
            let rhs = args.pop().unwrap();
            let lhs = args.pop().unwrap();
            return Ok(Expr::Binary(b, Box::new(lhs), Box::new(rhs)));
        }
        Err(SexprError::Unexpected(op))
    } else if token == ")" {
        Err(SexprError::Unexpected(token.clone()))
    } else if let Ok(v) = token.parse::<f64>() {
        Ok(Expr::Literal(v))
    } else if const_ids.contains(token.as_str()) {
        Ok(Expr::Const(token.clone()))
    } else {
        Ok(Expr::Var(token.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_expr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn parse_print_roundtrip_on_random_trees() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let consts: BTreeSet<String> = ["C_UA", "C_BL"].iter().map(|s| s.to_string()).collect();
        for _ in 0..500 {
            let e = random_expr(&mut rng, 7);
            let text = e.to_sexpr();
            let parsed = parse_sexpr(&text, &consts).unwrap();
            assert_eq!(parsed.to_sexpr(), text);
        }
    }

    #[test]
    fn constants_classified_by_table() {
        let consts: BTreeSet<String> = ["C_UA"].iter().map(|s| s.to_string()).collect();
        let e = parse_sexpr("(* C_UA V_tmp)", &consts).unwrap();
        assert_eq!(
            e,
            Expr::Binary(
                BinaryOp::Mul,
                Box::new(Expr::Const("C_UA".into())),
                Box::new(Expr::Var("V_tmp".into()))
            )
        );
    }

    #[test]
    fn arity_errors() {
        let consts = BTreeSet::new();
        assert!(parse_sexpr("(+ 1)", &consts).is_err());
        assert!(parse_sexpr("(log 1 2)", &consts).is_err());
        assert!(parse_sexpr("(?? 1 2)", &consts).is_err());
    }
}
