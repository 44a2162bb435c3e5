//! Generational model revision: individuals, genetic operators, local
//! search, and the run loops.
//!
//! An individual is a derivation tree plus the constant parameter states.
//! Parameterized lexeme values (the `R` constants introduced by revisions)
//! live inside the derivation's lexeme bindings and travel with subtrees
//! through crossover and mutation; the named `C_*` constants live in a
//! per-individual map.
//!
//! Randomness: every stochastic step draws from a stream derived from
//! `(seed, generation, offspring slot)`, so runs are bit-reproducible and
//! offspring creation is order-independent.

mod fitness;
mod run;

pub use fitness::{
    evaluate_stream, mae, rmse, EvalBackend, EvalContext, EvalDataset, EvalKind, EvalStats,
    Evaluator, Extrapolation, FitnessRecord, ScEvent, ShortCircuitPolicy,
};
pub use run::{
    run_calibration, run_revision, write_artifacts, ExportedEquation, ExportedModel, GenStats,
    Metric, MetricsReport, OpProbabilities, RunConfig, RunError, RunInputs, RunResult,
};

use crate::process::ParameterPrior;
use crate::tag::{
    fill_slots, grow_node_random, open_addresses, random_derivation, DerivationNode,
    DerivationTree, Grammar, TagError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Mutation state of one constant: the Gaussian center for the next draw
/// and the value used by the model. A sampled value is clamped to the prior
/// bounds and becomes the new center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussState {
    pub mean: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub derivation: DerivationTree,
    pub constants: BTreeMap<String, GaussState>,
    pub fitness: Option<FitnessRecord>,
}

impl Individual {
    pub fn size(&self) -> usize {
        self.derivation.size()
    }

    pub fn constant_values(&self) -> BTreeMap<String, f64> {
        self.constants.iter().map(|(k, v)| (k.clone(), v.value)).collect()
    }

    pub fn params_vec(&self) -> Vec<(String, f64)> {
        self.constants.iter().map(|(k, v)| (k.clone(), v.value)).collect()
    }

    pub fn rmse(&self) -> f64 {
        self.fitness.as_ref().map(|f| f.rmse).unwrap_or(f64::INFINITY)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Random stream for `(seed, generation, slot)`.
pub fn stream(seed: u64, generation: u64, slot: u64) -> ChaCha12Rng {
    let mixed = splitmix64(splitmix64(splitmix64(seed) ^ generation) ^ slot);
    ChaCha12Rng::seed_from_u64(mixed)
}

/// Constant states at the prior means.
pub fn init_parameters(priors: &[ParameterPrior]) -> BTreeMap<String, GaussState> {
    priors
        .iter()
        .map(|p| (p.id.clone(), GaussState { mean: p.mean, value: p.mean }))
        .collect()
}

/// `popsize` random individuals; sizes uniform in `[minsize, maxsize]`,
/// constants at prior means, parameterized lexemes drawn by the grammar.
pub fn init_population(
    grammar: &Grammar,
    priors: &[ParameterPrior],
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<Individual>, TagError> {
    let mut population = Vec::with_capacity(cfg.popsize);
    for i in 0..cfg.popsize {
        let mut rng = stream(seed, 0, i as u64);
        let derivation = random_derivation(grammar, (cfg.minsize, cfg.maxsize), &mut rng)?;
        population.push(Individual {
            derivation,
            constants: init_parameters(priors),
            fitness: None,
        });
    }
    Ok(population)
}

/// Best of `k` uniform draws with replacement; ties break to the lower
/// population index.
pub fn tournament_select<R: Rng>(population: &[Individual], k: usize, rng: &mut R) -> usize {
    debug_assert!(!population.is_empty() && k >= 1);
    let mut best = rng.gen_range(0..population.len());
    for _ in 1..k {
        let candidate = rng.gen_range(0..population.len());
        let (cf, bf) = (population[candidate].rmse(), population[best].rmse());
        if cf < bf || (cf == bf && candidate < best) {
            best = candidate;
        }
    }
    best
}

fn non_root_paths(d: &DerivationTree) -> Vec<Vec<usize>> {
    d.root.walk().into_iter().map(|(p, _)| p).filter(|p| !p.is_empty()).collect()
}

fn subtree_at<'a>(d: &'a DerivationTree, path: &[usize]) -> &'a DerivationNode {
    d.root.at_path(path).expect("walk paths are valid")
}

fn replace_subtree(d: &mut DerivationTree, path: &[usize], mut replacement: DerivationNode) {
    let target = d.root.at_path_mut(path).expect("walk paths are valid");
    replacement.at = target.at.clone();
    *target = replacement;
}

/// Swaps randomly chosen derivation subtrees between two parents when the
/// subtrees are mutually compatible (their β-trees share a root label, so
/// each can adjoin where the other sat) and both offspring stay within the
/// size bounds. After `retry_limit` failed attempts the parents are
/// replicated unchanged (their cached fitness is kept).
pub fn crossover<R: Rng>(
    a: &Individual,
    b: &Individual,
    grammar: &Grammar,
    cfg: &RunConfig,
    rng: &mut R,
) -> (Individual, Individual) {
    let a_paths = non_root_paths(&a.derivation);
    let b_paths = non_root_paths(&b.derivation);
    if a_paths.is_empty() || b_paths.is_empty() {
        return (a.clone(), b.clone());
    }
    for _ in 0..cfg.retry_limit {
        let pa = &a_paths[rng.gen_range(0..a_paths.len())];
        let pb = &b_paths[rng.gen_range(0..b_paths.len())];
        let na = subtree_at(&a.derivation, pa);
        let nb = subtree_at(&b.derivation, pb);
        let root_a = grammar.tree(&na.tree).map(|t| t.root_label()).unwrap_or_default();
        let root_b = grammar.tree(&nb.tree).map(|t| t.root_label()).unwrap_or_default();
        if root_a != root_b {
            continue;
        }
        let (sa, sb) = (na.node_count(), nb.node_count());
        let new_a = a.size() - sa + sb;
        let new_b = b.size() - sb + sa;
        let in_bounds = |s: usize| (cfg.minsize..=cfg.maxsize).contains(&s);
        if !in_bounds(new_a) || !in_bounds(new_b) {
            continue;
        }
        let (na, nb) = (na.clone(), nb.clone());
        let mut child_a = a.clone();
        let mut child_b = b.clone();
        replace_subtree(&mut child_a.derivation, pa, nb);
        replace_subtree(&mut child_b.derivation, pb, na);
        child_a.fitness = None;
        child_b.fitness = None;
        return (child_a, child_b);
    }
    (a.clone(), b.clone())
}

/// Replaces a random derivation subtree with a freshly grown compatible
/// subtree of similar size (within ±2 nodes). Falls back to a no-op clone
/// after `retry_limit` failed attempts.
pub fn subtree_mutation<R: Rng>(
    a: &Individual,
    grammar: &Grammar,
    cfg: &RunConfig,
    rng: &mut R,
) -> Individual {
    let paths = non_root_paths(&a.derivation);
    if paths.is_empty() {
        return a.clone();
    }
    for _ in 0..cfg.retry_limit {
        let path = &paths[rng.gen_range(0..paths.len())];
        let old = subtree_at(&a.derivation, path);
        let old_size = old.node_count();
        let total = a.size();
        let lo = old_size.saturating_sub(2).max(1).max((cfg.minsize + old_size).saturating_sub(total));
        let hi = (old_size + 2).min(cfg.maxsize + old_size - total);
        if lo > hi {
            continue;
        }
        let target = rng.gen_range(lo..=hi);
        let Ok(beta) = grammar.tree(&old.tree) else { continue };
        let candidates = grammar.betas_for(beta.root_label());
        if candidates.is_empty() {
            continue;
        }
        let pick = candidates[rng.gen_range(0..candidates.len())];
        let new_beta = grammar.tree_by_index(pick);
        let mut fresh = DerivationNode::bare(&new_beta.id);
        if fill_slots(&mut fresh, new_beta, grammar, rng).is_err() {
            continue;
        }
        let mut grown = true;
        while fresh.node_count() < target {
            match grow_node_random(&mut fresh, grammar, rng) {
                Ok(true) => {}
                _ => {
                    grown = false;
                    break;
                }
            }
        }
        if !grown || fresh.node_count() != target {
            continue;
        }
        let mut child = a.clone();
        replace_subtree(&mut child.derivation, path, fresh);
        child.fitness = None;
        return child;
    }
    a.clone()
}

/// Standard deviation for one parameter at `generation` (1-based): a
/// quarter of the prior mean, ramping down linearly over the final
/// `ramp_down_generations` to `ramp_floor` of its initial value.
pub fn mutation_sigma(prior_mean: f64, generation: usize, cfg: &RunConfig) -> f64 {
    let sigma0 = prior_mean.abs() / 4.0;
    let k = cfg.ramp_down_generations.min(cfg.generations);
    if k == 0 || cfg.generations == 0 {
        return sigma0;
    }
    let ramp_start = cfg.generations - k + 1;
    if generation < ramp_start {
        return sigma0;
    }
    let frac = (generation - ramp_start + 1) as f64 / k as f64;
    sigma0 * (1.0 - (1.0 - cfg.ramp_floor) * frac)
}

/// Resamples every constant from a Gaussian centered on its current mean;
/// the clamped sample becomes both the new value and the new mean. Applies
/// to the named constants and to every parameterized lexeme in the
/// derivation.
pub fn gaussian_mutation<R: Rng>(
    a: &Individual,
    priors: &[ParameterPrior],
    grammar: &Grammar,
    generation: usize,
    cfg: &RunConfig,
    rng: &mut R,
) -> Individual {
    let mut child = a.clone();
    for prior in priors {
        let Some(state) = child.constants.get_mut(&prior.id) else { continue };
        let sigma = mutation_sigma(prior.mean, generation, cfg);
        if sigma <= 0.0 {
            continue;
        }
        let sample = Normal::new(state.mean, sigma).expect("sigma > 0").sample(rng);
        let clamped = sample.clamp(prior.min, prior.max);
        state.value = clamped;
        state.mean = clamped;
        debug_assert!((prior.min..=prior.max).contains(&state.value));
    }
    mutate_lexeme_values(&mut child.derivation.root, grammar, generation, cfg, rng);
    child.fitness = None;
    child
}

fn mutate_lexeme_values<R: Rng>(
    node: &mut DerivationNode,
    grammar: &Grammar,
    generation: usize,
    cfg: &RunConfig,
    rng: &mut R,
) {
    for binding in &mut node.lexemes {
        let Some(value) = binding.value.as_mut() else { continue };
        let Ok(tree) = grammar.tree(&binding.lexeme) else { continue };
        let Some(range) = tree.param else { continue };
        let sigma = mutation_sigma(range.mean(), generation, cfg);
        if sigma <= 0.0 {
            continue;
        }
        let sample = Normal::new(*value, sigma).expect("sigma > 0").sample(rng);
        *value = sample.clamp(range.min, range.max);
        debug_assert!((range.min..=range.max).contains(value));
    }
    for child in &mut node.adjunctions {
        mutate_lexeme_values(child, grammar, generation, cfg, rng);
    }
}

/// Stochastic hill climbing: `steps` rounds of insertion or deletion with
/// equal probability, keeping a change only when its evaluated fitness
/// strictly improves. Deletion only removes childless non-root nodes.
pub fn local_search<R: Rng>(
    individual: Individual,
    steps: usize,
    grammar: &Grammar,
    evaluator: &Evaluator<'_>,
    ctx: &mut EvalContext,
    cfg: &RunConfig,
    rng: &mut R,
) -> Individual {
    let mut current = individual;
    if current.fitness.is_none() {
        evaluator.evaluate(&mut current, ctx);
    }
    for _ in 0..steps {
        let candidate = if rng.gen_bool(0.5) {
            insert_random(&current, grammar, cfg, rng)
        } else {
            delete_random(&current, cfg, rng)
        };
        let Some(mut candidate) = candidate else { continue };
        evaluator.evaluate(&mut candidate, ctx);
        if candidate.rmse() < current.rmse() {
            current = candidate;
        }
    }
    current
}

fn insert_random<R: Rng>(
    a: &Individual,
    grammar: &Grammar,
    cfg: &RunConfig,
    rng: &mut R,
) -> Option<Individual> {
    if a.size() + 1 > cfg.maxsize {
        return None;
    }
    let open = open_addresses(&a.derivation, grammar).ok()?;
    let mut options = Vec::new();
    for site in &open {
        for &beta in grammar.betas_for(&site.symbol.name) {
            options.push((site, beta));
        }
    }
    if options.is_empty() {
        return None;
    }
    let (site, beta_idx) = options[rng.gen_range(0..options.len())];
    let beta = grammar.tree_by_index(beta_idx);
    let mut child_node = DerivationNode::bare(&beta.id);
    child_node.at = site.address.clone();
    fill_slots(&mut child_node, beta, grammar, rng).ok()?;
    let mut child = a.clone();
    child.derivation.root.at_path_mut(&site.node_path)?.adjunctions.push(child_node);
    child.fitness = None;
    Some(child)
}

fn delete_random<R: Rng>(a: &Individual, cfg: &RunConfig, rng: &mut R) -> Option<Individual> {
    if a.size() <= cfg.minsize {
        return None;
    }
    let deletable: Vec<Vec<usize>> = a
        .derivation
        .root
        .walk()
        .into_iter()
        .filter(|(p, n)| !p.is_empty() && n.adjunctions.is_empty())
        .map(|(p, _)| p)
        .collect();
    if deletable.is_empty() {
        return None;
    }
    let path = &deletable[rng.gen_range(0..deletable.len())];
    let mut child = a.clone();
    let (parent_path, last) = path.split_at(path.len() - 1);
    child.derivation.root.at_path_mut(parent_path)?.adjunctions.remove(last[0]);
    child.fitness = None;
    Some(child)
}
