//! Synthetic scenario generation: desk-scale stand-in datasets.
//!
//! Temporal variables follow seasonal sinusoids inside physically plausible
//! ranges, with a small seeded secondary harmonic so years are not exact
//! copies. Observed phytoplankton biomass comes from simulating a
//! configured ground-truth process (the bundled knowledge optionally
//! rewritten by equation and parameter overrides) plus Gaussian observation
//! noise.

use super::{EnvSeries, MeasurementSeries};
use crate::knowledge::KnowledgeFile;
use crate::process::{BioState, CompiledModel, ModelError, ProcessSpec, SpecError};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationOverride {
    pub lhs: String,
    pub rhs_sexpr: String,
}

/// Configuration for one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub days: usize,
    pub station: String,
    pub noise_sd: f64,
    pub b_phy0: f64,
    pub b_zoo0: f64,
    /// Observation interval for the target variable (1 = daily).
    pub obs_every: usize,
    /// Constant values for the ground truth, overriding prior means.
    pub param_overrides: BTreeMap<String, f64>,
    /// Equation bodies for the ground truth, replacing the knowledge-file
    /// versions. Extension annotations of an overridden equation are
    /// dropped; they only matter for the search, not for data generation.
    pub equation_overrides: Vec<EquationOverride>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            days: 730,
            station: "S1".to_string(),
            noise_sd: 0.0,
            b_phy0: 5.0,
            b_zoo0: 1.0,
            obs_every: 1,
            param_overrides: BTreeMap::new(),
            equation_overrides: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        serde_json::from_str(text).map_err(|e| SynthError::Invalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization")
    }
}

/// Seasonal shape per variable: (base, amplitude, phase day).
const SEASONAL: [(&str, f64, f64, f64); 12] = [
    ("V_lgt", 17.0, 9.0, 100.0),
    ("V_tmp", 16.0, 12.0, 120.0),
    ("V_n", 2.2, 1.2, 300.0),
    ("V_p", 0.10, 0.05, 280.0),
    ("V_si", 2.5, 1.5, 310.0),
    ("V_do", 10.0, 2.5, 330.0),
    ("V_cd", 350.0, 80.0, 20.0),
    ("V_ph", 8.0, 0.5, 150.0),
    ("V_alk", 95.0, 25.0, 200.0),
    ("V_sd", 1.6, 0.8, 140.0),
    ("F", 120.0, 60.0, 200.0),
    ("R", 5.0, 4.0, 200.0),
];

const YEAR_DAYS: f64 = 365.0;

/// Ground-truth state equations for a scenario: the knowledge file with the
/// scenario's equation overrides applied.
pub fn truth_spec(scenario: &Scenario, knowledge: &KnowledgeFile) -> Result<ProcessSpec, SynthError> {
    let mut kf = knowledge.clone();
    for ov in &scenario.equation_overrides {
        let eq = kf
            .equations
            .iter_mut()
            .find(|e| e.lhs == ov.lhs)
            .ok_or_else(|| SynthError::Invalid(format!("override for unknown equation `{}`", ov.lhs)))?;
        eq.rhs_sexpr = ov.rhs_sexpr.clone();
        eq.extensions.clear();
    }
    Ok(ProcessSpec::from_knowledge(&kf)?)
}

/// Ground-truth constant vector: prior means plus scenario overrides.
pub fn truth_constants(scenario: &Scenario, spec: &ProcessSpec) -> Result<BTreeMap<String, f64>, SynthError> {
    let mut constants: BTreeMap<String, f64> =
        spec.priors.iter().map(|p| (p.id.clone(), p.mean)).collect();
    for (id, value) in &scenario.param_overrides {
        if !constants.contains_key(id) {
            return Err(SynthError::Invalid(format!("override for unknown parameter `{id}`")));
        }
        constants.insert(id.clone(), *value);
    }
    Ok(constants)
}

/// Generates the scenario dataset: seasonal temporal variables and the
/// simulated, optionally noisy, observed target series. Deterministic for
/// a given rng stream.
pub fn gen_synthetic<R: Rng>(
    scenario: &Scenario,
    knowledge: &KnowledgeFile,
    rng: &mut R,
) -> Result<MeasurementSeries, SynthError> {
    if scenario.days < 2 || scenario.obs_every == 0 {
        return Err(SynthError::Invalid("need days >= 2 and obs_every >= 1".into()));
    }
    let spec = truth_spec(scenario, knowledge)?;
    let constants = truth_constants(scenario, &spec)?;

    // seeded secondary harmonic per variable
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, base, amp, phase) in SEASONAL {
        let jitter_phase = rng.gen_range(0.0..TAU);
        let jitter_amp = 0.06 * amp;
        let values: Vec<f64> = (0..scenario.days)
            .map(|d| {
                let t = d as f64;
                let seasonal = base + amp * (TAU * (t - phase) / YEAR_DAYS).sin();
                let wiggle = jitter_amp * (2.0 * TAU * t / YEAR_DAYS + jitter_phase).sin();
                (seasonal + wiggle).max(base - 1.2 * amp).max(0.0)
            })
            .collect();
        columns.push((name.to_string(), values));
    }
    let env = EnvSeries::new(0, columns);

    let model = CompiledModel::build(&spec.initial_equations(), &constants)?;
    let bound = model.bind(&env)?;
    let trajectory = bound.simulate(
        BioState::new(scenario.b_phy0, scenario.b_zoo0, 0),
        scenario.days - 1,
    );
    if !trajectory.valid {
        return Err(SynthError::Invalid(
            "ground-truth simulation diverged; adjust the scenario".into(),
        ));
    }

    let noise = if scenario.noise_sd > 0.0 {
        Some(Normal::new(0.0, scenario.noise_sd).map_err(|e| SynthError::Invalid(e.to_string()))?)
    } else {
        None
    };

    let mut out = MeasurementSeries::new();
    out.epoch = chrono::NaiveDate::from_ymd_opt(2000, 1, 1);
    let target = spec.target_state().to_string();
    for day in 0..scenario.days {
        for name in env.column_names() {
            let col = env.column(name).unwrap();
            out.push(&scenario.station, name, day, env.value(col, day));
        }
        if day % scenario.obs_every == 0 {
            let clean = if day == 0 { scenario.b_phy0 } else { trajectory.b_phy[day - 1] };
            let observed = match &noise {
                Some(n) => (clean + n.sample(rng)).max(0.0),
                None => clean,
            };
            out.push(&scenario.station, &target, day, observed);
        }
    }
    Ok(out)
}
