//! Fitness evaluation with short-circuiting and caching.
//!
//! Fitness is the RMSE between predicted and observed target biomass over
//! the training fitness cases (one per day). Evaluation is incremental:
//! after each case the running fitness — the accumulated squared error
//! spread over the full horizon, a lower bound on the final RMSE — is
//! compared against `bestPrevFull × threshold`. When the check fires, an
//! extrapolated final fitness is computed; if even that exceeds the best
//! fully evaluated fitness so far, evaluation stops and returns the
//! estimate. `bestPrevFull` is global across the run and only updated by
//! full evaluations.
//!
//! Extrapolations:
//! * `identity` — the running fitness stands as the estimate. Sound and
//!   conservative: it only stops evaluation once the verdict is provable.
//! * `linear` — scales the accumulated squared error to the full number of
//!   fitness cases first, i.e. projects the current per-case error rate.
//!   This is what makes thresholds below 1 terminate earlier.
//!
//! Only full evaluations and deterministic invalid verdicts enter the
//! cache: short-circuited estimates depend on the transient `bestPrevFull`
//! and would not be bit-identical on recomputation.

use crate::expr::{canonical_key, eval_tree, Environment, EvalCache, Expr};
use crate::hydrology::{env_series_at_target, DataError, DataSplit, EnvMode, EnvSeries, MeasurementSeries, RiverNetwork};
use crate::knowledge::decode_model;
use crate::process::{BioState, CompiledModel, ProcessSpec, SimScratch, DT_DAYS};
use crate::tag::{derive, Grammar};
use serde::{Deserialize, Serialize};

use super::Individual;

/// Result of one fitness evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub rmse: f64,
    pub mae: f64,
    pub evaluated_cases: usize,
    pub short_circuited: bool,
}

impl FitnessRecord {
    pub fn invalid(evaluated_cases: usize) -> Self {
        FitnessRecord { rmse: f64::INFINITY, mae: f64::INFINITY, evaluated_cases, short_circuited: false }
    }

    /// True when every fitness case was evaluated and the value is usable
    /// as a best-so-far reference.
    pub fn is_full(&self) -> bool {
        !self.short_circuited && self.rmse.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extrapolation {
    Identity,
    Linear,
}

impl std::str::FromStr for Extrapolation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Extrapolation::Identity),
            "linear" => Ok(Extrapolation::Linear),
            other => Err(format!("unknown extrapolation `{other}` (identity|linear)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShortCircuitPolicy {
    pub threshold: f64,
    pub extrapolation: Extrapolation,
}

impl Default for ShortCircuitPolicy {
    fn default() -> Self {
        ShortCircuitPolicy { threshold: 1.0, extrapolation: Extrapolation::Identity }
    }
}

impl ShortCircuitPolicy {
    /// Never short-circuits.
    pub fn off() -> Self {
        ShortCircuitPolicy { threshold: f64::INFINITY, extrapolation: Extrapolation::Identity }
    }
}

/// Incremental evaluation core. `cases` yields per-case
/// `(absolute error, squared error)`, or `None` when the simulation went
/// non-finite at that case (the individual is invalid).
pub fn evaluate_stream<I>(
    cases: I,
    num_cases: usize,
    policy: &ShortCircuitPolicy,
    best_prev_full: f64,
) -> FitnessRecord
where
    I: IntoIterator<Item = Option<(f64, f64)>>,
{
    debug_assert!(num_cases > 0);
    let n = num_cases as f64;
    let mut sse = 0.0;
    let mut sae = 0.0;
    let mut done = 0usize;
    for case in cases.into_iter().take(num_cases) {
        let Some((abs_err, sq_err)) = case else {
            return FitnessRecord::invalid(done);
        };
        sse += sq_err;
        sae += abs_err;
        done += 1;
        let fitness = (sse / n).sqrt();
        if fitness > best_prev_full * policy.threshold {
            let estimate = match policy.extrapolation {
                Extrapolation::Identity => fitness,
                Extrapolation::Linear => (sse / done as f64).sqrt(),
            };
            if estimate > best_prev_full {
                return FitnessRecord {
                    rmse: estimate,
                    mae: sae / done as f64,
                    evaluated_cases: done,
                    short_circuited: true,
                };
            }
        }
    }
    if done < num_cases {
        return FitnessRecord::invalid(done);
    }
    FitnessRecord { rmse: (sse / n).sqrt(), mae: sae / n, evaluated_cases: num_cases, short_circuited: false }
}

pub fn rmse(predicted: &[f64], observed: &[f64]) -> f64 {
    debug_assert_eq!(predicted.len(), observed.len());
    let n = predicted.len() as f64;
    let sse: f64 = predicted.iter().zip(observed).map(|(p, o)| (p - o) * (p - o)).sum();
    (sse / n).sqrt()
}

pub fn mae(predicted: &[f64], observed: &[f64]) -> f64 {
    debug_assert_eq!(predicted.len(), observed.len());
    let n = predicted.len() as f64;
    predicted.iter().zip(observed).map(|(p, o)| (p - o).abs()).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalBackend {
    /// Simplify, compile to a linear program, evaluate per step.
    Compiled,
    /// Per-node tree walking with name lookups each step.
    TreeWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalKind {
    CacheHit,
    Full,
    ShortCircuit,
    Invalid,
}

/// One audited evaluation outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScEvent {
    pub kind: EvalKind,
    pub value: f64,
    pub best_before: f64,
    pub best_after: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalStats {
    pub calls: u64,
    pub cache_hits: u64,
    pub short_circuits: u64,
    pub full_evaluations: u64,
    pub invalid: u64,
    /// Total fitness cases actually simulated.
    pub total_cases: u64,
}

/// Mutable evaluation state shared across one run: the best fully
/// evaluated fitness, the cache, counters, and the optional audit trail.
pub struct EvalContext {
    pub best_prev_full: f64,
    pub cache: EvalCache<FitnessRecord>,
    pub use_cache: bool,
    pub stats: EvalStats,
    pub audit: Option<Vec<ScEvent>>,
}

impl EvalContext {
    pub fn new(use_cache: bool, audit: bool) -> Self {
        EvalContext {
            best_prev_full: f64::INFINITY,
            cache: EvalCache::new(),
            use_cache,
            stats: EvalStats::default(),
            audit: if audit { Some(Vec::new()) } else { None },
        }
    }

    fn record(&mut self, kind: EvalKind, value: f64, best_before: f64) {
        self.stats.calls += 1;
        match kind {
            EvalKind::CacheHit => self.stats.cache_hits += 1,
            EvalKind::Full => self.stats.full_evaluations += 1,
            EvalKind::ShortCircuit => self.stats.short_circuits += 1,
            EvalKind::Invalid => self.stats.invalid += 1,
        }
        if let Some(events) = &mut self.audit {
            events.push(ScEvent { kind, value, best_before, best_after: self.best_prev_full });
        }
    }
}

/// Prepared data for evaluation: the environment series at the target
/// station and the interpolated observed target series, both covering
/// `[split.train[0], split.test[1]]`.
pub struct EvalDataset {
    pub env: EnvSeries,
    observed: Vec<f64>,
    start_day: usize,
    pub split: DataSplit,
}

impl EvalDataset {
    pub fn prepare(
        network: &RiverNetwork,
        data: &MeasurementSeries,
        split: &DataSplit,
        mode: EnvMode,
        observed_variable: &str,
    ) -> Result<EvalDataset, DataError> {
        split.validate()?;
        let range = (split.train[0], split.test[1]);
        let env = env_series_at_target(network, data, mode, range, observed_variable)?;
        let observed = data.interpolated(&network.target, observed_variable, range)?;
        Ok(EvalDataset { env, observed, start_day: range.0, split: split.clone() })
    }

    pub fn observed_at(&self, day: usize) -> f64 {
        self.observed[day - self.start_day]
    }

    pub fn train_cases(&self) -> usize {
        self.split.train[1] - self.split.train[0]
    }

    pub fn test_cases(&self) -> usize {
        self.split.test[1] - self.split.test[0]
    }
}

/// Immutable evaluation configuration for one run.
pub struct Evaluator<'a> {
    pub grammar: &'a Grammar,
    pub spec: &'a ProcessSpec,
    pub dataset: &'a EvalDataset,
    pub policy: ShortCircuitPolicy,
    pub backend: EvalBackend,
    pub b_zoo_init: f64,
    pub b_phy_scale: f64,
}

impl<'a> Evaluator<'a> {
    /// Decoded state equations of an individual, or None when it does not
    /// derive into a usable model.
    pub fn model_of(&self, individual: &Individual) -> Option<Vec<(String, Expr)>> {
        let derived = derive(&individual.derivation, self.grammar).ok()?;
        decode_model(&derived, self.spec).ok()
    }

    /// Fitness on the training cases, honoring the cache and the
    /// short-circuit policy. Stores the record on the individual.
    pub fn evaluate(&self, individual: &mut Individual, ctx: &mut EvalContext) -> FitnessRecord {
        if let Some(existing) = &individual.fitness {
            return existing.clone();
        }
        let best_before = ctx.best_prev_full;
        let Some(equations) = self.model_of(individual) else {
            let record = FitnessRecord::invalid(0);
            ctx.record(EvalKind::Invalid, record.rmse, best_before);
            individual.fitness = Some(record.clone());
            return record;
        };

        let key = if ctx.use_cache {
            let refs: Vec<&Expr> = equations.iter().map(|(_, e)| e).collect();
            let key = canonical_key(&refs, &individual.params_vec(), &self.dataset.split.train_id());
            if let Some(hit) = ctx.cache.get(&key) {
                ctx.record(EvalKind::CacheHit, hit.rmse, best_before);
                individual.fitness = Some(hit.clone());
                return hit;
            }
            Some(key)
        } else {
            None
        };

        let record = self.run_training_cases(&equations, individual, ctx.best_prev_full);
        ctx.stats.total_cases += record.evaluated_cases as u64;
        let kind = if record.short_circuited {
            EvalKind::ShortCircuit
        } else if record.rmse.is_finite() {
            EvalKind::Full
        } else {
            EvalKind::Invalid
        };
        if record.is_full() && record.rmse < ctx.best_prev_full {
            ctx.best_prev_full = record.rmse;
        }
        ctx.record(kind, record.rmse, best_before);
        if let Some(key) = key {
            // short-circuited estimates are context-dependent; keep them out
            if record.is_full() || !record.rmse.is_finite() {
                ctx.cache.insert(key, record.clone());
            }
        }
        individual.fitness = Some(record.clone());
        record
    }

    fn run_training_cases(
        &self,
        equations: &[(String, Expr)],
        individual: &Individual,
        best_prev_full: f64,
    ) -> FitnessRecord {
        let split = &self.dataset.split;
        let (start, end) = (split.train[0], split.train[1]);
        let num_cases = end - start;
        match self.backend {
            EvalBackend::Compiled => {
                let constants = individual.constant_values();
                let Ok(model) = CompiledModel::build(equations, &constants) else {
                    return FitnessRecord::invalid(0);
                };
                let Ok(bound) = model.bind(&self.dataset.env) else {
                    return FitnessRecord::invalid(0);
                };
                let mut scratch = SimScratch::default();
                let mut state = BioState::new(
                    self.dataset.observed_at(start) * self.b_phy_scale,
                    self.b_zoo_init,
                    start,
                );
                let cases = (0..num_cases).map(|_| {
                    let (next, finite) = bound.step(&state, DT_DAYS, &mut scratch);
                    state = next;
                    if !finite {
                        return None;
                    }
                    let obs = self.dataset.observed_at(state.day) * self.b_phy_scale;
                    let err = state.b_phy - obs;
                    Some((err.abs(), err * err))
                });
                evaluate_stream(cases, num_cases, &self.policy, best_prev_full)
            }
            EvalBackend::TreeWalk => {
                let mut env = Environment::default();
                for (id, state) in &individual.constants {
                    env.params.insert(id.clone(), state.value);
                }
                let columns: Vec<(String, usize)> = self
                    .dataset
                    .env
                    .column_names()
                    .map(|n| (n.to_string(), self.dataset.env.column(n).unwrap()))
                    .collect();
                let mut state = BioState::new(
                    self.dataset.observed_at(start) * self.b_phy_scale,
                    self.b_zoo_init,
                    start,
                );
                let cases = (0..num_cases).map(|_| {
                    for (name, col) in &columns {
                        env.vars.insert(name.clone(), self.dataset.env.value(*col, state.day));
                    }
                    env.vars.insert("B_Phy".to_string(), state.b_phy);
                    env.vars.insert("B_Zoo".to_string(), state.b_zoo);
                    let mut d = [0.0f64; 2];
                    for (i, (_, expr)) in equations.iter().enumerate().take(2) {
                        match eval_tree(expr, &env) {
                            Ok(v) if v.is_finite() => d[i] = v,
                            _ => return None,
                        }
                    }
                    state = BioState {
                        b_phy: (state.b_phy + DT_DAYS * d[0]).max(0.0),
                        b_zoo: (state.b_zoo + DT_DAYS * d[1]).max(0.0),
                        day: state.day + 1,
                    };
                    if !state.b_phy.is_finite() || !state.b_zoo.is_finite() {
                        return None;
                    }
                    let obs = self.dataset.observed_at(state.day) * self.b_phy_scale;
                    let err = state.b_phy - obs;
                    Some((err.abs(), err * err))
                });
                evaluate_stream(cases, num_cases, &self.policy, best_prev_full)
            }
        }
    }

    /// Full (never short-circuited) metrics of a model over an inclusive
    /// day range. None when the simulation goes non-finite.
    pub fn full_metrics(
        &self,
        equations: &[(String, Expr)],
        constants: &std::collections::BTreeMap<String, f64>,
        range: [usize; 2],
    ) -> Option<(f64, f64)> {
        let model = CompiledModel::build(equations, constants).ok()?;
        let bound = model.bind(&self.dataset.env).ok()?;
        let horizon = range[1] - range[0];
        let initial = BioState::new(
            self.dataset.observed_at(range[0]) * self.b_phy_scale,
            self.b_zoo_init,
            range[0],
        );
        let trajectory = bound.simulate(initial, horizon);
        if !trajectory.valid {
            return None;
        }
        let observed: Vec<f64> = (1..=horizon)
            .map(|i| self.dataset.observed_at(range[0] + i) * self.b_phy_scale)
            .collect();
        Some((rmse(&trajectory.b_phy, &observed), mae(&trajectory.b_phy, &observed)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_fixtures() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let r = rmse(&[3.0, 4.0], &[0.0, 0.0]);
        assert!((r - (25.0f64 / 2.0).sqrt()).abs() < 1e-9);
        assert!((r - 3.5355339059327378).abs() < 1e-9);
        assert!((mae(&[3.0, 4.0], &[0.0, 0.0]) - 3.5).abs() < 1e-9);
    }

    fn policy(threshold: f64, extrapolation: Extrapolation) -> ShortCircuitPolicy {
        ShortCircuitPolicy { threshold, extrapolation }
    }

    #[test]
    fn first_evaluation_is_always_full() {
        // bestPrevFull starts at infinity, so the check can never fire
        let cases = vec![Some((5.0, 25.0)); 10];
        let rec = evaluate_stream(cases, 10, &policy(1.0, Extrapolation::Identity), f64::INFINITY);
        assert!(!rec.short_circuited);
        assert_eq!(rec.evaluated_cases, 10);
        assert!((rec.rmse - 5.0).abs() < 1e-12);
        assert!((rec.mae - 5.0).abs() < 1e-12);
    }

    #[test]
    fn infinite_threshold_never_short_circuits() {
        let cases = vec![Some((100.0, 10_000.0)); 10];
        let rec = evaluate_stream(cases, 10, &ShortCircuitPolicy::off(), 0.001);
        assert!(!rec.short_circuited);
        assert_eq!(rec.evaluated_cases, 10);
    }

    #[test]
    fn traced_short_circuit_returns_twelve() {
        // bestPrevFull = 10, threshold = 1.0, identity: one case whose
        // squared error spread over the horizon already gives fitness 12
        let num = 4;
        let first_sq = 12.0f64.powi(2) * num as f64;
        let cases = vec![Some((24.0, first_sq)), Some((0.0, 0.0)), Some((0.0, 0.0)), Some((0.0, 0.0))];
        let rec = evaluate_stream(cases, num, &policy(1.0, Extrapolation::Identity), 10.0);
        assert!(rec.short_circuited);
        assert_eq!(rec.evaluated_cases, 1);
        assert!((rec.rmse - 12.0).abs() < 1e-12);
        assert!(rec.rmse > 10.0);
    }

    #[test]
    fn short_circuit_value_always_exceeds_best() {
        for threshold in [0.5, 0.7, 1.0, 1.3] {
            for extrapolation in [Extrapolation::Identity, Extrapolation::Linear] {
                let cases = (0..100).map(|_| Some((2.0, 4.0)));
                let rec = evaluate_stream(cases, 100, &policy(threshold, extrapolation), 1.0);
                if rec.short_circuited {
                    assert!(rec.rmse > 1.0, "th {threshold} {extrapolation:?}");
                    assert!(rec.evaluated_cases < 100);
                }
            }
        }
    }

    #[test]
    fn linear_extrapolation_stops_earlier_at_lower_thresholds() {
        // constant per-case error 2 against best 1: the linear projection
        // knows the answer immediately; the gate controls when it may act
        let best = 1.0;
        let run = |threshold: f64| {
            let cases = (0..100).map(|_| Some((2.0, 4.0)));
            evaluate_stream(cases, 100, &policy(threshold, Extrapolation::Linear), best)
        };
        let th10 = run(1.0);
        let th07 = run(0.7);
        assert!(th10.short_circuited && th07.short_circuited);
        assert!(
            th07.evaluated_cases < th10.evaluated_cases,
            "{} vs {}",
            th07.evaluated_cases,
            th10.evaluated_cases
        );
        // identity is threshold-insensitive below 1: both stop at proof
        let id10 = {
            let cases = (0..100).map(|_| Some((2.0, 4.0)));
            evaluate_stream(cases, 100, &policy(1.0, Extrapolation::Identity), best)
        };
        let id07 = {
            let cases = (0..100).map(|_| Some((2.0, 4.0)));
            evaluate_stream(cases, 100, &policy(0.7, Extrapolation::Identity), best)
        };
        assert_eq!(id10.evaluated_cases, id07.evaluated_cases);
    }

    #[test]
    fn invalid_case_yields_infinity_sentinel() {
        let cases = vec![Some((1.0, 1.0)), None, Some((1.0, 1.0))];
        let rec = evaluate_stream(cases, 3, &ShortCircuitPolicy::default(), f64::INFINITY);
        assert!(rec.rmse.is_infinite());
        assert!(!rec.short_circuited);
        assert!(!rec.is_full());
        assert_eq!(rec.evaluated_cases, 1);
    }

    #[test]
    fn full_evaluation_matches_plain_rmse() {
        let predicted = [5.0, 7.0, 3.0, 8.0];
        let observed = [4.0, 9.0, 3.5, 6.0];
        let cases: Vec<Option<(f64, f64)>> = predicted
            .iter()
            .zip(&observed)
            .map(|(p, o)| Some(((p - o) as f64, ((p - o) as f64).powi(2))))
            .map(|c| c.map(|(e, s)| (e.abs(), s)))
            .collect();
        let rec = evaluate_stream(cases, 4, &ShortCircuitPolicy::off(), f64::INFINITY);
        assert!((rec.rmse - rmse(&predicted, &observed)).abs() < 1e-12);
        assert!((rec.mae - mae(&predicted, &observed)).abs() < 1e-12);
    }
}
