//! The generational loops and their artifacts.
//!
//! `run_revision` evolves structure and parameters under the revision
//! grammar; `run_calibration` is the baseline that keeps the initial
//! process structure frozen and only moves the constant vector (parameter
//! crossover and Gaussian mutation). Both loops are deterministic for a
//! fixed seed and write the same artifact set:
//!
//! * `best_model.json` — derivation, constants, equations as
//!   S-expressions, and train/test metrics of the best individual;
//! * `history.csv` — `generation,bestRMSE,meanRMSE,cacheHitRate,shortCircuitRate`;
//! * `metrics.json` — train/test RMSE and MAE of the best model.

use super::fitness::{
    EvalBackend, EvalContext, EvalDataset, EvalStats, Evaluator, ScEvent,
    ShortCircuitPolicy,
};
use super::{
    crossover, gaussian_mutation, init_parameters, init_population, local_search, stream,
    subtree_mutation, tournament_select, Individual,
};
use crate::hydrology::{DataError, DataSplit, EnvMode, MeasurementSeries, RiverNetwork};
use crate::knowledge::{build_grammar, DecodeError, KnowledgeError, KnowledgeFile};
use crate::process::{ProcessSpec, SpecError};
use crate::tag::{DerivationTree, Grammar, TagError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("no fully evaluated valid individual was produced")]
    NoValidModel,
    #[error("audit violation: {0}")]
    Audit(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpProbabilities {
    pub crossover: f64,
    pub subtree_mutation: f64,
    pub gaussian_mutation: f64,
    pub replication: f64,
}

impl Default for OpProbabilities {
    fn default() -> Self {
        OpProbabilities { crossover: 0.3, subtree_mutation: 0.3, gaussian_mutation: 0.3, replication: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub generations: usize,
    pub popsize: usize,
    pub elite: usize,
    pub tournament: usize,
    pub local_search_steps: usize,
    pub minsize: usize,
    pub maxsize: usize,
    pub op_probabilities: OpProbabilities,
    pub short_circuit: ShortCircuitPolicy,
    /// σ ramps down linearly over this many final generations.
    pub ramp_down_generations: usize,
    /// σ at the final generation, as a fraction of its initial value.
    pub ramp_floor: f64,
    pub retry_limit: usize,
    pub seed: u64,
    pub b_zoo_init: f64,
    pub b_phy_scale: f64,
    pub backend: EvalBackend,
    pub use_cache: bool,
    /// Validate every individual each generation and keep the evaluation
    /// audit trail.
    pub audit: bool,
    pub mode: EnvMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generations: 100,
            popsize: 200,
            elite: 2,
            tournament: 5,
            local_search_steps: 5,
            minsize: 2,
            maxsize: 50,
            op_probabilities: OpProbabilities::default(),
            short_circuit: ShortCircuitPolicy::default(),
            ramp_down_generations: 20,
            ramp_floor: 0.1,
            retry_limit: 10,
            seed: 42,
            b_zoo_init: 1.0,
            b_phy_scale: 1.0,
            backend: EvalBackend::Compiled,
            use_cache: true,
            audit: false,
            mode: EnvMode::SingleStation,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let p = &self.op_probabilities;
        let sum = p.crossover + p.subtree_mutation + p.gaussian_mutation + p.replication;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(RunError::Config(format!("operator probabilities sum to {sum}, expected 1")));
        }
        if [p.crossover, p.subtree_mutation, p.gaussian_mutation, p.replication]
            .iter()
            .any(|v| *v < 0.0)
        {
            return Err(RunError::Config("operator probabilities must be non-negative".into()));
        }
        if self.popsize == 0 || self.tournament == 0 {
            return Err(RunError::Config("popsize and tournament must be positive".into()));
        }
        if self.elite > self.popsize {
            return Err(RunError::Config("elite exceeds popsize".into()));
        }
        if self.minsize == 0 || self.maxsize < self.minsize {
            return Err(RunError::Config("need 1 <= minsize <= maxsize".into()));
        }
        if !(0.0..=1.0).contains(&self.ramp_floor) {
            return Err(RunError::Config("ramp_floor must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub generation: usize,
    pub best_rmse: f64,
    pub mean_rmse: f64,
    pub cache_hit_rate: f64,
    pub short_circuit_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub train: Metric,
    pub test: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedEquation {
    pub state: String,
    pub sexpr: String,
}

/// Self-contained export of one revised model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedModel {
    pub seed: u64,
    pub derivation: DerivationTree,
    pub constants: BTreeMap<String, f64>,
    pub equations: Vec<ExportedEquation>,
    pub metrics: MetricsReport,
}

impl ExportedModel {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization")
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub best: ExportedModel,
    pub history: Vec<GenStats>,
    pub stats: EvalStats,
    pub audit_events: Option<Vec<ScEvent>>,
    /// Individuals validated while auditing.
    pub audited_individuals: u64,
}

/// Everything a run needs; the caller owns loading and parsing.
pub struct RunInputs<'a> {
    pub knowledge: &'a KnowledgeFile,
    pub network: &'a RiverNetwork,
    pub data: &'a MeasurementSeries,
    pub split: &'a DataSplit,
}

enum Operator {
    Crossover,
    SubtreeMutation,
    GaussianMutation,
    Replication,
}

fn pick_operator<R: Rng>(p: &OpProbabilities, rng: &mut R) -> Operator {
    let draw: f64 = rng.gen();
    if draw < p.crossover {
        Operator::Crossover
    } else if draw < p.crossover + p.subtree_mutation {
        Operator::SubtreeMutation
    } else if draw < p.crossover + p.subtree_mutation + p.gaussian_mutation {
        Operator::GaussianMutation
    } else {
        Operator::Replication
    }
}

struct LoopState {
    history: Vec<GenStats>,
    prev_stats: EvalStats,
    best_ever: Option<Individual>,
    audited: u64,
}

impl LoopState {
    fn new() -> Self {
        LoopState { history: Vec::new(), prev_stats: EvalStats::default(), best_ever: None, audited: 0 }
    }

    fn audit_population(
        &mut self,
        population: &[Individual],
        grammar: &Grammar,
        spec: &ProcessSpec,
        cfg: &RunConfig,
    ) -> Result<(), RunError> {
        for ind in population {
            ind.derivation
                .validate(grammar)
                .map_err(|e| RunError::Audit(e.to_string()))?;
            if !(cfg.minsize..=cfg.maxsize).contains(&ind.size()) {
                return Err(RunError::Audit(format!("individual size {} out of bounds", ind.size())));
            }
            for prior in &spec.priors {
                let state = ind
                    .constants
                    .get(&prior.id)
                    .ok_or_else(|| RunError::Audit(format!("missing constant `{}`", prior.id)))?;
                if !(prior.min..=prior.max).contains(&state.value) {
                    return Err(RunError::Audit(format!(
                        "`{}` = {} outside [{}, {}]",
                        prior.id, state.value, prior.min, prior.max
                    )));
                }
                self.audited += 1;
            }
        }
        Ok(())
    }

    fn close_generation(&mut self, generation: usize, population: &[Individual], ctx: &EvalContext) {
        let finite: Vec<f64> = population
            .iter()
            .map(Individual::rmse)
            .filter(|v| v.is_finite())
            .collect();
        let best = population.iter().map(Individual::rmse).fold(f64::INFINITY, f64::min);
        let mean = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let delta_calls = ctx.stats.calls - self.prev_stats.calls;
        let delta_hits = ctx.stats.cache_hits - self.prev_stats.cache_hits;
        let delta_sc = ctx.stats.short_circuits - self.prev_stats.short_circuits;
        let rate = |num: u64| if delta_calls == 0 { 0.0 } else { num as f64 / delta_calls as f64 };
        self.history.push(GenStats {
            generation,
            best_rmse: best,
            mean_rmse: mean,
            cache_hit_rate: rate(delta_hits),
            short_circuit_rate: rate(delta_sc),
        });
        self.prev_stats = ctx.stats;

        for ind in population {
            let full = ind.fitness.as_ref().map(|f| f.is_full()).unwrap_or(false);
            if !full {
                continue;
            }
            let better = match &self.best_ever {
                Some(best) => ind.rmse() < best.rmse(),
                None => true,
            };
            if better {
                self.best_ever = Some(ind.clone());
            }
        }
    }
}

fn export_best(
    best: &Individual,
    evaluator: &Evaluator<'_>,
    cfg: &RunConfig,
) -> Result<ExportedModel, RunError> {
    let equations = evaluator.model_of(best).ok_or(RunError::NoValidModel)?;
    let constants = best.constant_values();
    let split = &evaluator.dataset.split;
    let train = evaluator
        .full_metrics(&equations, &constants, split.train)
        .ok_or(RunError::NoValidModel)?;
    let test = evaluator
        .full_metrics(&equations, &constants, split.test)
        .unwrap_or((f64::INFINITY, f64::INFINITY));
    Ok(ExportedModel {
        seed: cfg.seed,
        derivation: best.derivation.clone(),
        constants,
        equations: equations
            .into_iter()
            .map(|(state, expr)| ExportedEquation { state, sexpr: expr.to_sexpr() })
            .collect(),
        metrics: MetricsReport {
            train: Metric { rmse: train.0, mae: train.1 },
            test: Metric { rmse: test.0, mae: test.1 },
        },
    })
}

fn elite_order(population: &[Individual]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| {
        population[a]
            .rmse()
            .partial_cmp(&population[b].rmse())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Full knowledge-guided revision: structure and parameters evolve under
/// the TAG grammar.
pub fn run_revision(cfg: &RunConfig, inputs: &RunInputs<'_>) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let spec = ProcessSpec::from_knowledge(inputs.knowledge)?;
    let grammar = build_grammar(&spec)?;
    let dataset = EvalDataset::prepare(
        inputs.network,
        inputs.data,
        inputs.split,
        cfg.mode,
        spec.target_state(),
    )?;
    let evaluator = Evaluator {
        grammar: &grammar,
        spec: &spec,
        dataset: &dataset,
        policy: cfg.short_circuit,
        backend: cfg.backend,
        b_zoo_init: cfg.b_zoo_init,
        b_phy_scale: cfg.b_phy_scale,
    };
    let mut ctx = EvalContext::new(cfg.use_cache, cfg.audit);
    let mut state = LoopState::new();

    let mut population = init_population(&grammar, &spec.priors, cfg, cfg.seed)?;
    for ind in &mut population {
        evaluator.evaluate(ind, &mut ctx);
    }
    if cfg.audit {
        state.audit_population(&population, &grammar, &spec, cfg)?;
    }
    state.close_generation(0, &population, &ctx);

    for generation in 1..=cfg.generations {
        let order = elite_order(&population);
        let mut next: Vec<Individual> =
            order.iter().take(cfg.elite).map(|&i| population[i].clone()).collect();
        let mut slot = next.len() as u64;
        while next.len() < cfg.popsize {
            let mut rng = stream(cfg.seed, generation as u64, slot);
            let mut offspring: Vec<Individual> = Vec::with_capacity(2);
            match pick_operator(&cfg.op_probabilities, &mut rng) {
                Operator::Crossover => {
                    let a = tournament_select(&population, cfg.tournament, &mut rng);
                    let b = tournament_select(&population, cfg.tournament, &mut rng);
                    let (c1, c2) = crossover(&population[a], &population[b], &grammar, cfg, &mut rng);
                    offspring.push(c1);
                    if next.len() + 1 < cfg.popsize {
                        offspring.push(c2);
                    }
                }
                Operator::SubtreeMutation => {
                    let a = tournament_select(&population, cfg.tournament, &mut rng);
                    offspring.push(subtree_mutation(&population[a], &grammar, cfg, &mut rng));
                }
                Operator::GaussianMutation => {
                    let a = tournament_select(&population, cfg.tournament, &mut rng);
                    offspring.push(gaussian_mutation(
                        &population[a],
                        &spec.priors,
                        &grammar,
                        generation,
                        cfg,
                        &mut rng,
                    ));
                }
                Operator::Replication => {
                    let a = tournament_select(&population, cfg.tournament, &mut rng);
                    offspring.push(population[a].clone());
                }
            }
            for mut child in offspring {
                // replication copies arrive with their fitness and skip
                // local search; changed offspring are evaluated and then
                // hill-climbed
                let changed = child.fitness.is_none();
                evaluator.evaluate(&mut child, &mut ctx);
                if changed && cfg.local_search_steps > 0 {
                    child = local_search(
                        child,
                        cfg.local_search_steps,
                        &grammar,
                        &evaluator,
                        &mut ctx,
                        cfg,
                        &mut rng,
                    );
                }
                next.push(child);
                slot += 1;
            }
        }
        population = next;
        if cfg.audit {
            state.audit_population(&population, &grammar, &spec, cfg)?;
        }
        state.close_generation(generation, &population, &ctx);
    }

    let best = state.best_ever.clone().ok_or(RunError::NoValidModel)?;
    let exported = export_best(&best, &evaluator, cfg)?;
    Ok(RunResult {
        best: exported,
        history: state.history,
        stats: ctx.stats,
        audit_events: ctx.audit,
        audited_individuals: state.audited,
    })
}

/// Uniform parameter swap between two constant vectors.
fn parameter_crossover<R: Rng>(a: &Individual, b: &Individual, rng: &mut R) -> (Individual, Individual) {
    let mut c1 = a.clone();
    let mut c2 = b.clone();
    for (id, s1) in c1.constants.iter_mut() {
        if let Some(s2) = c2.constants.get_mut(id) {
            if rng.gen_bool(0.5) {
                std::mem::swap(s1, s2);
            }
        }
    }
    c1.fitness = None;
    c2.fitness = None;
    (c1, c2)
}

/// Calibration baseline: the derivation stays the bare initial process and
/// only parameters move. Subtree mutation has no meaning here, so its
/// probability mass folds into Gaussian mutation; local search (a
/// structural operator) is skipped.
pub fn run_calibration(cfg: &RunConfig, inputs: &RunInputs<'_>) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let spec = ProcessSpec::from_knowledge(inputs.knowledge)?;
    let grammar = build_grammar(&spec)?;
    let dataset = EvalDataset::prepare(
        inputs.network,
        inputs.data,
        inputs.split,
        cfg.mode,
        spec.target_state(),
    )?;
    let evaluator = Evaluator {
        grammar: &grammar,
        spec: &spec,
        dataset: &dataset,
        policy: cfg.short_circuit,
        backend: cfg.backend,
        b_zoo_init: cfg.b_zoo_init,
        b_phy_scale: cfg.b_phy_scale,
    };
    let mut ctx = EvalContext::new(cfg.use_cache, cfg.audit);
    let mut state = LoopState::new();

    let alpha_id = grammar
        .start_alphas()
        .next()
        .map(|t| t.id.clone())
        .ok_or_else(|| RunError::Config("grammar has no initial tree".into()))?;
    let template = Individual {
        derivation: DerivationTree::bare(alpha_id),
        constants: init_parameters(&spec.priors),
        fitness: None,
    };
    let mut population = vec![template; cfg.popsize];
    for ind in &mut population {
        evaluator.evaluate(ind, &mut ctx);
    }
    if cfg.audit {
        state.audit_population(&population, &grammar, &spec, cfg)?;
    }
    state.close_generation(0, &population, &ctx);

    let p = &cfg.op_probabilities;
    let calibration_probs = OpProbabilities {
        crossover: p.crossover,
        subtree_mutation: 0.0,
        gaussian_mutation: p.gaussian_mutation + p.subtree_mutation,
        replication: p.replication,
    };

    for generation in 1..=cfg.generations {
        let order = elite_order(&population);
        let mut next: Vec<Individual> =
            order.iter().take(cfg.elite).map(|&i| population[i].clone()).collect();
        let mut slot = next.len() as u64;
        while next.len() < cfg.popsize {
            let mut rng = stream(cfg.seed, generation as u64, slot);
            let mut offspring: Vec<Individual> = Vec::with_capacity(2);
            match pick_operator(&calibration_probs, &mut rng) {
                Operator::Crossover => {
                    let a = tournament_select(&population, cfg.tournament, &mut rng);
                    let b = tournament_select(&population, cfg.tournament, &mut rng);
                    let (c1, c2) = parameter_crossover(&population[a], &population[b], &mut rng);
                    offspring.push(c1);
                    if next.len() + 1 < cfg.popsize {
                        offspring.push(c2);
                    }
                }
                Operator::GaussianMutation => {
                    let a = tournament_select(&population, cfg.tournament, &mut rng);
                    offspring.push(gaussian_mutation(
                        &population[a],
                        &spec.priors,
                        &grammar,
                        generation,
                        cfg,
                        &mut rng,
                    ));
                }
                Operator::Replication | Operator::SubtreeMutation => {
                    let a = tournament_select(&population, cfg.tournament, &mut rng);
                    offspring.push(population[a].clone());
                }
            }
            for mut child in offspring {
                debug_assert_eq!(child.derivation.size(), 1, "calibration structure is frozen");
                evaluator.evaluate(&mut child, &mut ctx);
                next.push(child);
                slot += 1;
            }
        }
        population = next;
        if cfg.audit {
            state.audit_population(&population, &grammar, &spec, cfg)?;
        }
        state.close_generation(generation, &population, &ctx);
    }

    let best = state.best_ever.clone().ok_or(RunError::NoValidModel)?;
    let exported = export_best(&best, &evaluator, cfg)?;
    Ok(RunResult {
        best: exported,
        history: state.history,
        stats: ctx.stats,
        audit_events: ctx.audit,
        audited_individuals: state.audited,
    })
}

/// Writes `best_model.json`, `history.csv`, and `metrics.json` into `dir`.
pub fn write_artifacts(result: &RunResult, dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir)?;
    let mut model = std::fs::File::create(dir.join("best_model.json"))?;
    model.write_all(result.best.to_json().as_bytes())?;
    model.write_all(b"\n")?;

    let mut history = String::from("generation,bestRMSE,meanRMSE,cacheHitRate,shortCircuitRate\n");
    for row in &result.history {
        history.push_str(&format!(
            "{},{},{},{},{}\n",
            row.generation, row.best_rmse, row.mean_rmse, row.cache_hit_rate, row.short_circuit_rate
        ));
    }
    std::fs::write(dir.join("history.csv"), history)?;

    let metrics = serde_json::to_string_pretty(&result.best.metrics).expect("metrics serialization");
    std::fs::write(dir.join("metrics.json"), metrics + "\n")?;
    Ok(())
}
