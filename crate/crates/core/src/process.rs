//! The biological process: state variables, subprocess response functions,
//! parameter priors, and forward-Euler simulation of compiled models.
//!
//! A process specification is built from a knowledge file. Each equation is
//! either a state derivative (`lhs` of the form `d_<state>`) or a named
//! subprocess referenced by other equations. Subprocess references are
//! inlined, carrying their extension-point annotations along, to produce
//! one annotated tree per state derivative.

use crate::expr::{compile, parse_sexpr, simplify, BinaryOp, Expr, Program, UnaryOp};
use crate::hydrology::EnvSeries;
use crate::knowledge::KnowledgeFile;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Integration step: one day, the cadence of the observed data.
pub const DT_DAYS: f64 = 1.0;

/// Prior knowledge for one constant parameter: expected value and
/// exploration bounds for Gaussian mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterPrior {
    pub id: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    #[serde(default)]
    pub unit: String,
}

/// One temporal variable of the catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableInfo {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("equation `{0}`: {1}")]
    Parse(String, String),
    #[error("unresolved symbol `{symbol}` in equation `{equation}`")]
    Unresolved { equation: String, symbol: String },
    #[error("equation `{equation}` references unknown extension `{id}`")]
    UnknownExtension { equation: String, id: String },
    #[error("extension path {path:?} does not exist in equation `{equation}`")]
    BadExtensionPath { equation: String, path: Vec<usize> },
    #[error("cyclic subprocess reference through `{0}`")]
    Cycle(String),
    #[error("prior `{id}`: {msg}")]
    BadPrior { id: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no value for parameter `{0}`")]
    MissingParameter(String),
    #[error("no series for variable `{0}`")]
    MissingVariable(String),
}

// Subprocess response functions of the initial process. These mirror the
// equations in the bundled knowledge file and serve as fixtures and
// oracles; simulation always goes through the compiled expressions.

/// Light response: `(v/c) * e^(1 - v/c)`. Peaks at exactly 1 when
/// `v_lgt == c_bl`.
pub fn light_response(v_lgt: f64, c_bl: f64) -> f64 {
    let ratio = v_lgt / c_bl;
    ratio * (1.0 - ratio).exp()
}

/// Nutrient limitation: the minimum of three Monod terms, one per nutrient.
pub fn nutrient_limitation(v_n: f64, v_p: f64, v_si: f64, c_n: f64, c_p: f64, c_si: f64) -> f64 {
    let n = v_n / (c_n + v_n);
    let p = v_p / (c_p + v_p);
    let si = v_si / (c_si + v_si);
    n.min(p).min(si)
}

/// Temperature response: the larger of two Gaussian optima (summer
/// cyanobacteria and winter diatoms). Equals 1 at either optimum.
pub fn temperature_response(v_tmp: f64, c_pt: f64, c_btp1: f64, c_btp2: f64) -> f64 {
    let a = (-c_pt * (v_tmp - c_btp1).powi(2)).exp();
    let b = (-c_pt * (v_tmp - c_btp2).powi(2)).exp();
    a.max(b)
}

/// Food limitation for grazing, clamped to [0, 1]. Zero at
/// `b_phy == c_fmin`.
pub fn food_limitation(b_phy: f64, c_fmin: f64, c_fs: f64) -> f64 {
    let raw = (b_phy - c_fmin) / (c_fs + (b_phy - c_fmin));
    raw.clamp(0.0, 1.0)
}

/// Expression tree annotated with extension points: where knowledge-allowed
/// revisions may attach. Subprocess references only exist before inlining.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ATree {
    Lit(f64),
    Const(String),
    Var(String),
    Ref(String),
    Un(UnaryOp, Box<ATree>),
    Bin(BinaryOp, Box<ATree>, Box<ATree>),
    Ext(String, Box<ATree>),
}

impl ATree {
    /// Strips extension markers, producing the plain expression.
    pub(crate) fn to_expr(&self) -> Expr {
        match self {
            ATree::Lit(v) => Expr::Literal(*v),
            ATree::Const(id) => Expr::Const(id.clone()),
            ATree::Var(id) => Expr::Var(id.clone()),
            ATree::Ref(id) => Expr::Var(id.clone()),
            ATree::Un(op, a) => Expr::Unary(*op, Box::new(a.to_expr())),
            ATree::Bin(op, a, b) => Expr::Binary(*op, Box::new(a.to_expr()), Box::new(b.to_expr())),
            ATree::Ext(_, a) => a.to_expr(),
        }
    }

    fn from_expr(e: &Expr, refs: &BTreeSet<String>) -> ATree {
        match e {
            Expr::Literal(v) => ATree::Lit(*v),
            Expr::Const(id) => ATree::Const(id.clone()),
            Expr::Var(id) => {
                if refs.contains(id) {
                    ATree::Ref(id.clone())
                } else {
                    ATree::Var(id.clone())
                }
            }
            Expr::Unary(op, a) => ATree::Un(*op, Box::new(ATree::from_expr(a, refs))),
            Expr::Binary(op, a, b) => ATree::Bin(
                *op,
                Box::new(ATree::from_expr(a, refs)),
                Box::new(ATree::from_expr(b, refs)),
            ),
        }
    }

    fn child_count(&self) -> usize {
        match self {
            ATree::Un(_, _) | ATree::Ext(_, _) => 1,
            ATree::Bin(_, _, _) => 2,
            _ => 0,
        }
    }

    fn child_mut(&mut self, i: usize) -> Option<&mut ATree> {
        match self {
            ATree::Un(_, a) | ATree::Ext(_, a) if i == 0 => Some(a),
            ATree::Bin(_, a, _) if i == 0 => Some(a),
            ATree::Bin(_, _, b) if i == 1 => Some(b),
            _ => None,
        }
    }

    /// Wraps the subtree at `path` in an extension marker.
    fn annotate(&mut self, path: &[usize], ext: &str) -> bool {
        if path.is_empty() {
            let inner = std::mem::replace(self, ATree::Lit(0.0));
            *self = ATree::Ext(ext.to_string(), Box::new(inner));
            return true;
        }
        if path[0] >= self.child_count() {
            return false;
        }
        match self.child_mut(path[0]) {
            Some(child) => child.annotate(&path[1..], ext),
            None => false,
        }
    }

    fn inline(
        &self,
        definitions: &BTreeMap<String, ATree>,
        stack: &mut Vec<String>,
    ) -> Result<ATree, SpecError> {
        Ok(match self {
            ATree::Ref(id) => {
                if stack.contains(id) {
                    return Err(SpecError::Cycle(id.clone()));
                }
                stack.push(id.clone());
                let body = definitions.get(id).ok_or_else(|| SpecError::Unresolved {
                    equation: stack.join("<-"),
                    symbol: id.clone(),
                })?;
                let inlined = body.inline(definitions, stack)?;
                stack.pop();
                inlined
            }
            ATree::Un(op, a) => ATree::Un(*op, Box::new(a.inline(definitions, stack)?)),
            ATree::Bin(op, a, b) => ATree::Bin(
                *op,
                Box::new(a.inline(definitions, stack)?),
                Box::new(b.inline(definitions, stack)?),
            ),
            ATree::Ext(id, a) => ATree::Ext(id.clone(), Box::new(a.inline(definitions, stack)?)),
            other => other.clone(),
        })
    }
}

/// One state derivative with its fully inlined, extension-annotated body.
#[derive(Debug, Clone)]
pub struct StateDerivative {
    pub state: String,
    pub(crate) annotated: ATree,
}

impl StateDerivative {
    pub fn expr(&self) -> Expr {
        self.annotated.to_expr()
    }
}

/// Machine-readable prior knowledge, resolved and inlined: the initial
/// process equations, extension annotations, parameter priors, and the
/// temporal variable catalog.
#[derive(Debug, Clone)]
pub struct ProcessSpec {
    pub derivatives: Vec<StateDerivative>,
    pub priors: Vec<ParameterPrior>,
    pub variables: Vec<VariableInfo>,
    pub knowledge: KnowledgeFile,
}

impl ProcessSpec {
    pub fn from_knowledge(kf: &KnowledgeFile) -> Result<ProcessSpec, SpecError> {
        for prior in &kf.priors {
            if !(prior.min <= prior.mean && prior.mean <= prior.max) {
                return Err(SpecError::BadPrior {
                    id: prior.id.clone(),
                    msg: format!(
                        "requires min <= mean <= max, got {} {} {}",
                        prior.min, prior.mean, prior.max
                    ),
                });
            }
        }
        let const_ids: BTreeSet<String> = kf.priors.iter().map(|p| p.id.clone()).collect();
        let lhs_set: BTreeSet<String> = kf.equations.iter().map(|e| e.lhs.clone()).collect();
        if lhs_set.len() != kf.equations.len() {
            return Err(SpecError::Invalid("duplicate equation lhs".into()));
        }
        let states: Vec<String> = kf
            .equations
            .iter()
            .filter_map(|e| e.lhs.strip_prefix("d_").map(str::to_string))
            .collect();
        if states.is_empty() {
            return Err(SpecError::Invalid("no derivative equation (lhs `d_<state>`)".into()));
        }
        let var_ids: BTreeSet<String> = kf.variables.iter().map(|v| v.id.clone()).collect();
        if var_ids.len() != kf.variables.len() {
            return Err(SpecError::Invalid("duplicate variable id in catalog".into()));
        }
        let ext_ids: BTreeSet<String> = kf.extension_table.iter().map(|x| x.id.clone()).collect();

        let mut definitions: BTreeMap<String, ATree> = BTreeMap::new();
        for eq in &kf.equations {
            let expr = parse_sexpr(&eq.rhs_sexpr, &const_ids)
                .map_err(|e| SpecError::Parse(eq.lhs.clone(), e.to_string()))?;
            expr.check_pow_exponents()
                .map_err(|msg| SpecError::Parse(eq.lhs.clone(), msg))?;
            let mut vars = BTreeSet::new();
            expr.var_ids(&mut vars);
            for v in vars {
                let known =
                    var_ids.contains(&v) || lhs_set.contains(&v) || states.contains(&v);
                if !known {
                    return Err(SpecError::Unresolved { equation: eq.lhs.clone(), symbol: v });
                }
            }
            let mut tree = ATree::from_expr(&expr, &lhs_set);
            for site in &eq.extensions {
                if !ext_ids.contains(&site.id) {
                    return Err(SpecError::UnknownExtension {
                        equation: eq.lhs.clone(),
                        id: site.id.clone(),
                    });
                }
                if !tree.annotate(&site.at_path, &site.id) {
                    return Err(SpecError::BadExtensionPath {
                        equation: eq.lhs.clone(),
                        path: site.at_path.clone(),
                    });
                }
            }
            definitions.insert(eq.lhs.clone(), tree);
        }

        for ext in &kf.extension_table {
            for v in &ext.variables {
                if v != "R" && !var_ids.contains(v) {
                    return Err(SpecError::Unresolved {
                        equation: format!("extension {}", ext.id),
                        symbol: v.clone(),
                    });
                }
            }
        }

        let mut derivatives = Vec::new();
        for state in &states {
            let lhs = format!("d_{state}");
            let tree = definitions[&lhs].clone();
            let mut stack = vec![lhs];
            let annotated = tree.inline(&definitions, &mut stack)?;
            derivatives.push(StateDerivative { state: state.clone(), annotated });
        }

        Ok(ProcessSpec {
            derivatives,
            priors: kf.priors.clone(),
            variables: kf.variables.clone(),
            knowledge: kf.clone(),
        })
    }

    pub fn states(&self) -> Vec<&str> {
        self.derivatives.iter().map(|d| d.state.as_str()).collect()
    }

    /// The observed target state (the first derivative equation).
    pub fn target_state(&self) -> &str {
        &self.derivatives[0].state
    }

    pub fn prior(&self, id: &str) -> Option<&ParameterPrior> {
        self.priors.iter().find(|p| p.id == id)
    }

    pub fn const_ids(&self) -> BTreeSet<String> {
        self.priors.iter().map(|p| p.id.clone()).collect()
    }

    /// Plain derivative expressions of the unrevised initial process.
    pub fn initial_equations(&self) -> Vec<(String, Expr)> {
        self.derivatives.iter().map(|d| (d.state.clone(), d.expr())).collect()
    }
}

/// Biological state at one day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BioState {
    pub b_phy: f64,
    pub b_zoo: f64,
    pub day: usize,
}

impl BioState {
    pub fn new(b_phy: f64, b_zoo: f64, day: usize) -> Self {
        BioState { b_phy, b_zoo, day }
    }
}

enum InputSource {
    State(usize),
    Env(String),
}

struct StateProgram {
    program: Program,
    params: Vec<f64>,
    inputs: Vec<InputSource>,
}

/// A model (one program per state derivative) with parameter values
/// resolved. Immutable and shareable; per-worker scratch lives in
/// [`SimScratch`].
pub struct CompiledModel {
    states: Vec<String>,
    programs: Vec<StateProgram>,
}

/// Reusable evaluation buffers for one simulation worker.
#[derive(Default)]
pub struct SimScratch {
    regs: Vec<f64>,
    inputs: Vec<f64>,
}

impl CompiledModel {
    /// Simplifies and compiles each state equation, resolving constant
    /// parameters from `constants`. Variable references that are not state
    /// variables resolve against the environment series at bind time.
    pub fn build(
        equations: &[(String, Expr)],
        constants: &BTreeMap<String, f64>,
    ) -> Result<CompiledModel, ModelError> {
        let states: Vec<String> = equations.iter().map(|(s, _)| s.clone()).collect();
        let mut programs = Vec::new();
        for (_, expr) in equations {
            let program = compile(&simplify(expr));
            let params = program
                .params()
                .iter()
                .map(|id| {
                    constants
                        .get(id)
                        .copied()
                        .ok_or_else(|| ModelError::MissingParameter(id.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let inputs = program
                .inputs()
                .iter()
                .map(|id| match states.iter().position(|s| s == id) {
                    Some(i) => InputSource::State(i),
                    None => InputSource::Env(id.clone()),
                })
                .collect();
            programs.push(StateProgram { program, params, inputs });
        }
        Ok(CompiledModel { states, programs })
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    /// Resolves environment columns once for a series.
    pub fn bind<'a>(&'a self, series: &'a EnvSeries) -> Result<BoundModel<'a>, ModelError> {
        let mut columns = Vec::new();
        for sp in &self.programs {
            let cols = sp
                .inputs
                .iter()
                .map(|src| match src {
                    InputSource::State(i) => Ok(Slot::State(*i)),
                    InputSource::Env(id) => series
                        .column(id)
                        .map(Slot::Column)
                        .ok_or_else(|| ModelError::MissingVariable(id.clone())),
                })
                .collect::<Result<Vec<_>, _>>()?;
            columns.push(cols);
        }
        Ok(BoundModel { model: self, series, columns })
    }
}

#[derive(Clone, Copy)]
enum Slot {
    State(usize),
    Column(usize),
}

/// A compiled model bound to an environment series.
pub struct BoundModel<'a> {
    model: &'a CompiledModel,
    series: &'a EnvSeries,
    columns: Vec<Vec<Slot>>,
}

impl<'a> BoundModel<'a> {
    /// State derivatives at `state.day`. None when any derivative is
    /// non-finite.
    pub fn derivatives(&self, state: &BioState, scratch: &mut SimScratch) -> Option<(f64, f64)> {
        let values = [state.b_phy, state.b_zoo];
        let mut out = [0.0f64; 2];
        for (i, sp) in self.model.programs.iter().enumerate() {
            scratch.inputs.clear();
            for slot in &self.columns[i] {
                let v = match slot {
                    Slot::State(s) => values[*s],
                    Slot::Column(c) => self.series.value(*c, state.day),
                };
                scratch.inputs.push(v);
            }
            let d = sp.program.run(&scratch.inputs, &sp.params, &mut scratch.regs);
            if !d.is_finite() {
                return None;
            }
            out[i] = d;
        }
        Some((out[0], out[1]))
    }

    /// One forward-Euler update with non-negativity clamping. A non-finite
    /// derivative flags the step invalid; the state is clamped and carried
    /// so callers can decide what to do.
    pub fn step(&self, state: &BioState, dt: f64, scratch: &mut SimScratch) -> (BioState, bool) {
        match self.derivatives(state, scratch) {
            Some((d_phy, d_zoo)) => {
                let next = BioState {
                    b_phy: (state.b_phy + dt * d_phy).max(0.0),
                    b_zoo: (state.b_zoo + dt * d_zoo).max(0.0),
                    day: state.day + 1,
                };
                let finite = next.b_phy.is_finite() && next.b_zoo.is_finite();
                (next, finite)
            }
            None => {
                let next = BioState {
                    b_phy: state.b_phy.max(0.0),
                    b_zoo: state.b_zoo.max(0.0),
                    day: state.day + 1,
                };
                (next, false)
            }
        }
    }

    /// Daily trajectory over `horizon` steps starting from `initial`.
    /// Deterministic; stops early if the state goes non-finite.
    pub fn simulate(&self, initial: BioState, horizon: usize) -> Trajectory {
        let mut scratch = SimScratch::default();
        let mut state = initial;
        let mut b_phy = Vec::with_capacity(horizon);
        let mut b_zoo = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let (next, finite) = self.step(&state, DT_DAYS, &mut scratch);
            if !finite {
                return Trajectory { b_phy, b_zoo, valid: false };
            }
            b_phy.push(next.b_phy);
            b_zoo.push(next.b_zoo);
            state = next;
        }
        Trajectory { b_phy, b_zoo, valid: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub b_phy: Vec<f64>,
    pub b_zoo: Vec<f64>,
    pub valid: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::river_knowledge;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    // Table values used by the fixtures below.
    const C_BL: f64 = 26.78;
    const C_PT: f64 = 0.005;
    const C_BTP1: f64 = 27.0;
    const C_BTP2: f64 = 5.0;
    const C_N: f64 = 0.0351;
    const C_P: f64 = 0.00167;
    const C_SI: f64 = 0.00467;
    const C_FMIN: f64 = 1.0;
    const C_FS: f64 = 5.0;

    #[test]
    fn light_response_fixtures() {
        assert_eq!(light_response(C_BL, C_BL), 1.0);
        assert_eq!(light_response(0.0, C_BL), 0.0);
        let expected = 2.0 * (-1.0f64).exp();
        assert!((light_response(2.0 * C_BL, C_BL) - expected).abs() < 1e-12);
    }

    #[test]
    fn nutrient_limitation_fixtures() {
        // each nutrient exactly at its half-saturation constant
        let g = nutrient_limitation(C_N, C_P, C_SI, C_N, C_P, C_SI);
        assert!((g - 0.5).abs() < 1e-12);
        assert_eq!(nutrient_limitation(0.0, 0.0, 0.0, C_N, C_P, C_SI), 0.0);
        // one nutrient at half-saturation, the others saturated
        let g = nutrient_limitation(C_N, 1e9, 1e9, C_N, C_P, C_SI);
        assert!((g - 0.5).abs() < 1e-9);
    }

    #[test]
    fn temperature_response_fixtures() {
        assert_eq!(temperature_response(C_BTP1, C_PT, C_BTP1, C_BTP2), 1.0);
        assert_eq!(temperature_response(C_BTP2, C_PT, C_BTP1, C_BTP2), 1.0);
        // V_tmp = 16 is equidistant from both optima
        let expected = (-0.605f64).exp();
        assert!((temperature_response(16.0, C_PT, C_BTP1, C_BTP2) - expected).abs() < 1e-12);
    }

    #[test]
    fn food_limitation_fixtures() {
        assert_eq!(food_limitation(C_FMIN, C_FMIN, C_FS), 0.0);
        for i in 0..1000 {
            let b = i as f64 * 0.5;
            let v = food_limitation(b, C_FMIN, C_FS);
            assert!((0.0..=1.0).contains(&v), "λ({b}) = {v}");
        }
    }

    #[test]
    fn responses_stay_in_unit_interval_over_physical_ranges() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let f = light_response(rng.gen_range(0.0..40.0), rng.gen_range(24.0..30.0));
            assert!((0.0..=1.0).contains(&f), "f = {f}");
            let g = nutrient_limitation(
                rng.gen_range(0.0..10.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..10.0),
                rng.gen_range(0.02..0.05),
                rng.gen_range(0.001..0.02),
                rng.gen_range(0.001..0.2),
            );
            assert!((0.0..=1.0).contains(&g), "g = {g}");
            let h = temperature_response(
                rng.gen_range(0.0..40.0),
                rng.gen_range(0.003..0.2),
                rng.gen_range(20.0..34.0),
                rng.gen_range(1.0..20.0),
            );
            assert!((0.0..=1.0).contains(&h), "h = {h}");
            let l = food_limitation(
                rng.gen_range(0.0..500.0),
                rng.gen_range(0.1..1.9),
                rng.gen_range(4.0..6.0),
            );
            assert!((0.0..=1.0).contains(&l), "λ = {l}");
        }
    }

    fn constant_series(days: usize, values: &[(&str, f64)]) -> EnvSeries {
        EnvSeries::new(
            0,
            values.iter().map(|(id, v)| (id.to_string(), vec![*v; days])).collect(),
        )
    }

    #[test]
    fn zero_derivative_model_is_fixed_point() {
        let eqs = vec![
            ("B_Phy".to_string(), Expr::literal(0.0)),
            ("B_Zoo".to_string(), Expr::literal(0.0)),
        ];
        let model = CompiledModel::build(&eqs, &BTreeMap::new()).unwrap();
        let series = constant_series(40, &[]);
        let bound = model.bind(&series).unwrap();
        let t = bound.simulate(BioState::new(3.0, 1.0, 0), 30);
        assert!(t.valid);
        assert_eq!(t.b_phy.len(), 30);
        assert!(t.b_phy.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn growth_step_matches_hand_derivative() {
        // dB_Phy/dt = B_Phy * (C_UA - C_BRA) with Table means: rate 1.869
        let eqs = vec![
            (
                "B_Phy".to_string(),
                Expr::binary(
                    BinaryOp::Mul,
                    Expr::var("B_Phy"),
                    Expr::binary(BinaryOp::Sub, Expr::constant("C_UA"), Expr::constant("C_BRA")),
                ),
            ),
            ("B_Zoo".to_string(), Expr::literal(0.0)),
        ];
        let constants: BTreeMap<String, f64> =
            [("C_UA".to_string(), 1.89), ("C_BRA".to_string(), 0.021)].into();
        let model = CompiledModel::build(&eqs, &constants).unwrap();
        let series = constant_series(5, &[]);
        let bound = model.bind(&series).unwrap();
        let mut scratch = SimScratch::default();
        let state = BioState::new(2.0, 0.0, 0);
        let (d_phy, _) = bound.derivatives(&state, &mut scratch).unwrap();
        assert!((d_phy - 2.0 * 1.869).abs() < 1e-12);
        let (next, finite) = bound.step(&state, DT_DAYS, &mut scratch);
        assert!(finite);
        assert!((next.b_phy - (2.0 + 2.0 * 1.869)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_derivative_flags_invalid_and_clamps() {
        let eqs = vec![
            (
                "B_Phy".to_string(),
                Expr::binary(
                    BinaryOp::Mul,
                    Expr::literal(1e308),
                    Expr::binary(BinaryOp::Mul, Expr::literal(1e308), Expr::var("B_Phy")),
                ),
            ),
            ("B_Zoo".to_string(), Expr::literal(0.0)),
        ];
        let model = CompiledModel::build(&eqs, &BTreeMap::new()).unwrap();
        let series = constant_series(5, &[]);
        let bound = model.bind(&series).unwrap();
        let mut scratch = SimScratch::default();
        let (state, finite) = bound.step(&BioState::new(2.0, -1.0, 0), DT_DAYS, &mut scratch);
        assert!(!finite);
        assert!(state.b_zoo >= 0.0);
    }

    #[test]
    fn euler_tracks_exponential_within_two_percent() {
        let r = 0.02;
        let eqs = vec![
            ("B_Phy".to_string(), Expr::binary(BinaryOp::Mul, Expr::literal(r), Expr::var("B_Phy"))),
            ("B_Zoo".to_string(), Expr::literal(0.0)),
        ];
        let model = CompiledModel::build(&eqs, &BTreeMap::new()).unwrap();
        let series = constant_series(40, &[]);
        let bound = model.bind(&series).unwrap();
        let t = bound.simulate(BioState::new(1.0, 0.0, 0), 30);
        assert!(t.valid);
        for (i, &v) in t.b_phy.iter().enumerate() {
            let exact = (r * (i + 1) as f64).exp();
            assert!(
                ((v - exact) / exact).abs() <= 0.02,
                "day {}: euler {v} vs exact {exact}",
                i + 1
            );
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let kf = river_knowledge();
        let spec = ProcessSpec::from_knowledge(&kf).unwrap();
        let constants: BTreeMap<String, f64> =
            spec.priors.iter().map(|p| (p.id.clone(), p.mean)).collect();
        let model = CompiledModel::build(&spec.initial_equations(), &constants).unwrap();
        let series = constant_series(
            100,
            &[
                ("V_lgt", 20.0),
                ("V_n", 2.0),
                ("V_p", 0.1),
                ("V_si", 2.0),
                ("V_tmp", 18.0),
                ("V_do", 9.0),
                ("V_cd", 300.0),
                ("V_ph", 8.0),
                ("V_alk", 90.0),
                ("V_sd", 1.5),
            ],
        );
        let bound = model.bind(&series).unwrap();
        let a = bound.simulate(BioState::new(5.0, 1.0, 0), 90);
        let b = bound.simulate(BioState::new(5.0, 1.0, 0), 90);
        assert!(a.valid);
        assert_eq!(a, b);
    }

    #[test]
    fn phytoplankton_non_decreasing_when_growth_dominates() {
        let kf = river_knowledge();
        let spec = ProcessSpec::from_knowledge(&kf).unwrap();
        let constants: BTreeMap<String, f64> =
            spec.priors.iter().map(|p| (p.id.clone(), p.mean)).collect();
        let model = CompiledModel::build(&spec.initial_equations(), &constants).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut scratch = SimScratch::default();
        let mut checked = 0;
        for _ in 0..2000 {
            let v_lgt = rng.gen_range(1.0..35.0);
            let v_tmp = rng.gen_range(1.0..35.0);
            let v_n = rng.gen_range(0.0..5.0);
            let v_p = rng.gen_range(0.0..0.5);
            let v_si = rng.gen_range(0.0..5.0);
            let mu = 1.89
                * light_response(v_lgt, C_BL)
                * nutrient_limitation(v_n, v_p, v_si, C_N, C_P, C_SI)
                * temperature_response(v_tmp, C_PT, C_BTP1, C_BTP2);
            if mu < 0.021 {
                continue;
            }
            checked += 1;
            let series = constant_series(
                3,
                &[
                    ("V_lgt", v_lgt),
                    ("V_n", v_n),
                    ("V_p", v_p),
                    ("V_si", v_si),
                    ("V_tmp", v_tmp),
                    ("V_do", 9.0),
                    ("V_cd", 300.0),
                    ("V_ph", 8.0),
                    ("V_alk", 90.0),
                    ("V_sd", 1.5),
                ],
            );
            let bound = model.bind(&series).unwrap();
            let b0 = rng.gen_range(0.0..50.0);
            let (next, finite) = bound.step(&BioState::new(b0, 0.0, 0), DT_DAYS, &mut scratch);
            assert!(finite);
            assert!(next.b_phy >= b0, "B_Phy decreased with mu {mu} at B {b0}");
        }
        assert!(checked > 100);
    }
}
