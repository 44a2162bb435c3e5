//! Post-hoc ecological analyses over exported models.
//!
//! Selectivity asks how often each catalog variable was picked up by the
//! revisions of the K best models (best by held-out RMSE). A variable
//! counts for a model when one of the model's derivation lexemes binds it;
//! the fixed variables of the initial process do not count, only what the
//! search chose to add. The perturbation response scales one variable
//! series by `1 + delta`, re-simulates, and reports the relative change of
//! the mean predicted target biomass, averaged over the same K models.

use crate::evolve::ExportedModel;
use crate::hydrology::EnvSeries;
use crate::knowledge::lexeme_variable;
use crate::process::{BioState, CompiledModel, ProcessSpec};
use crate::tag::Grammar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {need} models, have {have}")]
    NotEnoughModels { need: usize, have: usize },
    #[error("model `{0}` does not simulate")]
    BadModel(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityEntry {
    pub variable: String,
    /// Share of the top-K models whose revisions reference the variable,
    /// in percent.
    pub selection_pct: f64,
    /// Mean relative change of predicted target biomass under the
    /// perturbation, signed.
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityReport {
    pub k: usize,
    pub delta: f64,
    pub entries: Vec<SelectivityEntry>,
}

/// Variables bound by the revision lexemes of a model.
pub fn revision_variables(model: &ExportedModel, grammar: &Grammar) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (_, node) in model.derivation.root.walk() {
        for binding in &node.lexemes {
            if let Some(var) = lexeme_variable(grammar, &binding.lexeme) {
                out.insert(var);
            }
        }
    }
    out
}

/// Relative change in mean predicted target biomass when `variable` is
/// scaled by `1 + delta`. Zero when the model does not read the variable
/// or when `delta` is zero.
pub fn perturb_correlation(
    model: &ExportedModel,
    spec: &ProcessSpec,
    env: &EnvSeries,
    initial: BioState,
    horizon: usize,
    variable: &str,
    delta: f64,
) -> Result<f64, AnalysisError> {
    let equations: Vec<(String, crate::expr::Expr)> = model
        .equations
        .iter()
        .map(|eq| {
            crate::expr::parse_sexpr(&eq.sexpr, &spec.const_ids())
                .map(|e| (eq.state.clone(), e))
                .map_err(|_| AnalysisError::BadModel(eq.state.clone()))
        })
        .collect::<Result<_, _>>()?;
    let compiled = CompiledModel::build(&equations, &model.constants)
        .map_err(|e| AnalysisError::BadModel(e.to_string()))?;

    let simulate_mean = |series: &EnvSeries| -> Result<f64, AnalysisError> {
        let bound = compiled.bind(series).map_err(|e| AnalysisError::BadModel(e.to_string()))?;
        let t = bound.simulate(initial, horizon);
        if !t.valid || t.b_phy.is_empty() {
            return Err(AnalysisError::BadModel("simulation diverged".into()));
        }
        Ok(t.b_phy.iter().sum::<f64>() / t.b_phy.len() as f64)
    };

    let baseline = simulate_mean(env)?;
    let perturbed_env = env.scaled(variable, 1.0 + delta);
    let perturbed = simulate_mean(&perturbed_env)?;
    Ok((perturbed - baseline) / baseline.abs().max(1e-12))
}

/// Selectivity and perturbation response over the `k` best models by test
/// RMSE.
pub fn selectivity(
    models: &[ExportedModel],
    k: usize,
    delta: f64,
    spec: &ProcessSpec,
    grammar: &Grammar,
    env: &EnvSeries,
    initial: BioState,
    horizon: usize,
) -> Result<SelectivityReport, AnalysisError> {
    if models.len() < k {
        return Err(AnalysisError::NotEnoughModels { need: k, have: models.len() });
    }
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| {
        models[a]
            .metrics
            .test
            .rmse
            .partial_cmp(&models[b].metrics.test.rmse)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let top: Vec<&ExportedModel> = order.iter().take(k).map(|&i| &models[i]).collect();

    let mut entries = Vec::new();
    for variable in &spec.variables {
        let mut selected = 0usize;
        let mut responses = Vec::new();
        for model in &top {
            if revision_variables(model, grammar).contains(&variable.id) {
                selected += 1;
            }
            if let Ok(r) =
                perturb_correlation(model, spec, env, initial, horizon, &variable.id, delta)
            {
                responses.push(r);
            }
        }
        let correlation = if responses.is_empty() {
            0.0
        } else {
            responses.iter().sum::<f64>() / responses.len() as f64
        };
        entries.push(SelectivityEntry {
            variable: variable.id.clone(),
            selection_pct: 100.0 * selected as f64 / k as f64,
            correlation,
        });
    }
    Ok(SelectivityReport { k, delta, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolve::{ExportedEquation, Metric, MetricsReport};
    use crate::knowledge::{build_grammar, river_knowledge};
    use crate::tag::{DerivationNode, DerivationTree, LexemeBinding, NodeAddress};
    use std::collections::BTreeMap;

    fn spec_and_grammar() -> (ProcessSpec, Grammar) {
        let spec = ProcessSpec::from_knowledge(&river_knowledge()).unwrap();
        let grammar = build_grammar(&spec).unwrap();
        (spec, grammar)
    }

    fn constant_env(days: usize) -> EnvSeries {
        EnvSeries::new(
            0,
            [
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
            ]
            .iter()
            .map(|(n, v)| (n.to_string(), vec![*v; days]))
            .collect(),
        )
    }

    fn manual_model(spec: &ProcessSpec, test_rmse: f64, with_lexeme: Option<&str>) -> ExportedModel {
        let mut derivation = DerivationTree::bare("alpha_process");
        if let Some(lexeme) = with_lexeme {
            // attach an Ext5 connector carrying the lexeme, mirroring how a
            // revision would reference a variable
            let grammar = build_grammar(spec).unwrap();
            let alpha = grammar.tree("alpha_process").unwrap();
            let at = alpha
                .interior_addresses()
                .into_iter()
                .find(|(_, s)| s.name == "Ext5c")
                .map(|(a, _)| a)
                .unwrap();
            let mut node = DerivationNode::bare("ext5_con_mul");
            node.at = at;
            node.lexemes.push(LexemeBinding {
                at: NodeAddress(vec![0, 1, 0]),
                lexeme: lexeme.to_string(),
                value: if lexeme.ends_with("_R") { Some(0.5) } else { None },
            });
            derivation.root.adjunctions.push(node);
            derivation.validate(&grammar).unwrap();
        }
        let constants: BTreeMap<String, f64> =
            spec.priors.iter().map(|p| (p.id.clone(), p.mean)).collect();
        let equations = spec
            .initial_equations()
            .into_iter()
            .map(|(state, expr)| ExportedEquation { state, sexpr: expr.to_sexpr() })
            .collect();
        ExportedModel {
            seed: 0,
            derivation,
            constants,
            equations,
            metrics: MetricsReport {
                train: Metric { rmse: 1.0, mae: 1.0 },
                test: Metric { rmse: test_rmse, mae: test_rmse },
            },
        }
    }

    #[test]
    fn selectivity_counts_revision_lexemes() {
        let (spec, grammar) = spec_and_grammar();
        let env = constant_env(40);
        let models = vec![
            manual_model(&spec, 1.0, Some("ext5_lex_V_tmp")),
            manual_model(&spec, 2.0, Some("ext5_lex_V_tmp")),
            manual_model(&spec, 3.0, Some("ext5_lex_V_tmp")),
            manual_model(&spec, 4.0, None),
        ];
        let report = selectivity(
            &models,
            4,
            0.1,
            &spec,
            &grammar,
            &env,
            BioState::new(5.0, 1.0, 0),
            30,
        )
        .unwrap();
        let tmp = report.entries.iter().find(|e| e.variable == "V_tmp").unwrap();
        assert_eq!(tmp.selection_pct, 75.0);
        let sd = report.entries.iter().find(|e| e.variable == "V_sd").unwrap();
        assert_eq!(sd.selection_pct, 0.0);
        assert_eq!(report.entries.len(), 10);
    }

    #[test]
    fn too_few_models_is_an_error() {
        let (spec, grammar) = spec_and_grammar();
        let env = constant_env(10);
        let models = vec![manual_model(&spec, 1.0, None)];
        let err = selectivity(&models, 50, 0.1, &spec, &grammar, &env, BioState::new(5.0, 1.0, 0), 5)
            .unwrap_err();
        assert!(matches!(err, AnalysisError::NotEnoughModels { need: 50, have: 1 }));
    }

    #[test]
    fn perturbation_signs_and_zero_cases() {
        let (spec, grammar) = spec_and_grammar();
        let _ = grammar;
        let env = constant_env(40);
        let model = manual_model(&spec, 1.0, None);
        let initial = BioState::new(5.0, 1.0, 0);
        // light below the optimum: more light, more growth
        let up = perturb_correlation(&model, &spec, &env, initial, 30, "V_lgt", 0.1).unwrap();
        assert!(up > 0.0, "light response {up}");
        // the initial process never reads water transparency
        let none = perturb_correlation(&model, &spec, &env, initial, 30, "V_sd", 0.1).unwrap();
        assert_eq!(none, 0.0);
        // zero perturbation changes nothing
        let zero = perturb_correlation(&model, &spec, &env, initial, 30, "V_lgt", 0.0).unwrap();
        assert_eq!(zero, 0.0);
    }
}
