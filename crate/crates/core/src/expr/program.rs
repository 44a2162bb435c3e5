//! Linear instruction programs.
//!
//! A program is the flattened form of an expression tree: straight-line
//! single-static-assignment code over a flat register file. Inputs and
//! parameters occupy named slots resolved once, so the per-step evaluation
//! loop does no name lookups and touches no state outside its registers.

use super::{apply_binary, apply_unary, BinaryOp, EnvError, Environment, Expr, UnaryOp};

#[derive(Debug, Clone, PartialEq)]
pub enum Instr {
    Const { dst: usize, value: f64 },
    Param { dst: usize, slot: usize },
    Var { dst: usize, slot: usize },
    Unary { dst: usize, op: UnaryOp, a: usize },
    Binary { dst: usize, op: BinaryOp, a: usize, b: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    instrs: Vec<Instr>,
    inputs: Vec<String>,
    params: Vec<String>,
    output: usize,
}

impl Program {
    pub fn instrs(&self) -> &[Instr] {
        &self.instrs
    }

    /// Variable slot names in first-use order.
    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    /// Parameter slot names in first-use order.
    pub fn params(&self) -> &[String] {
        &self.params
    }

    pub fn register_count(&self) -> usize {
        self.instrs.len()
    }

    /// Executes against pre-bound slot values. `regs` is caller-owned
    /// scratch, resized as needed.
    pub fn run(&self, vars: &[f64], params: &[f64], regs: &mut Vec<f64>) -> f64 {
        regs.resize(self.instrs.len(), 0.0);
        for instr in &self.instrs {
            match *instr {
                Instr::Const { dst, value } => regs[dst] = value,
                Instr::Param { dst, slot } => regs[dst] = params[slot],
                Instr::Var { dst, slot } => regs[dst] = vars[slot],
                Instr::Unary { dst, op, a } => regs[dst] = apply_unary(op, regs[a]),
                Instr::Binary { dst, op, a, b } => regs[dst] = apply_binary(op, regs[a], regs[b]),
            }
        }
        regs[self.output]
    }
}

/// Compiles an expression to a program. Deterministic: the same expression
/// always yields the identical instruction sequence.
pub fn compile(e: &Expr) -> Program {
    let mut p = Program { instrs: Vec::new(), inputs: Vec::new(), params: Vec::new(), output: 0 };
    let out = emit(e, &mut p);
    p.output = out;
    p
}

fn slot(names: &mut Vec<String>, id: &str) -> usize {
    match names.iter().position(|n| n == id) {
        Some(i) => i,
        None => {
            names.push(id.to_string());
            names.len() - 1
        }
    }
}

fn emit(e: &Expr, p: &mut Program) -> usize {
    let dst = p.instrs.len();
    match e {
        Expr::Literal(v) => p.instrs.push(Instr::Const { dst, value: *v }),
        Expr::Const(id) => {
            let s = slot(&mut p.params, id);
            p.instrs.push(Instr::Param { dst, slot: s });
        }
        Expr::Var(id) => {
            let s = slot(&mut p.inputs, id);
            p.instrs.push(Instr::Var { dst, slot: s });
        }
        Expr::Unary(op, a) => {
            let a = emit(a, p);
            let dst = p.instrs.len();
            p.instrs.push(Instr::Unary { dst, op: *op, a });
            return dst;
        }
        Expr::Binary(op, a, b) => {
            let a = emit(a, p);
            let b = emit(b, p);
            let dst = p.instrs.len();
            p.instrs.push(Instr::Binary { dst, op: *op, a, b });
            return dst;
        }
    }
    dst
}

/// Evaluates a program against an environment; same protection semantics
/// as [`super::eval_tree`].
pub fn eval_program(p: &Program, env: &Environment) -> Result<f64, EnvError> {
    let vars = p
        .inputs
        .iter()
        .map(|id| env.var(id))
        .collect::<Result<Vec<_>, _>>()?;
    let params = p
        .params
        .iter()
        .map(|id| env.param(id))
        .collect::<Result<Vec<_>, _>>()?;
    let mut regs = Vec::new();
    Ok(p.run(&vars, &params, &mut regs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_env_for, random_expr};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn literal_compiles_to_single_load() {
        let p = compile(&Expr::literal(1.5));
        assert_eq!(p.instrs().len(), 1);
        assert_eq!(eval_program(&p, &Environment::default()).unwrap(), 1.5);
    }

    #[test]
    fn compilation_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..200 {
            let e = random_expr(&mut rng, 6);
            assert_eq!(compile(&e), compile(&e));
        }
    }

    #[test]
    fn compiled_agrees_with_tree_walk() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..1000 {
            let e = random_expr(&mut rng, 8);
            let env = random_env_for(&e, &mut rng);
            let p = compile(&e);
            let a = super::super::eval_tree(&e, &env).unwrap();
            let b = eval_program(&p, &env).unwrap();
            if a.is_finite() {
                let tol = 1e-12 * a.abs().max(1.0);
                assert!((a - b).abs() <= tol, "{a} vs {b} for {}", e.to_sexpr());
            }
        }
    }

    #[test]
    fn unbound_slot_errors() {
        let p = compile(&Expr::var("missing"));
        assert!(eval_program(&p, &Environment::default()).is_err());
    }
}
