//! Cross-scenario and inner-scenario dispersion of accuracy around `mu`, and
//! the robustness score `1 - (var_cross + var_inner)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::results::ResultTable;

/// Divisor applied to the summed squared deviations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DivisorMode {
    /// Divide by `n`.
    PopulationN,
    /// Divide by `n - 1`; reproduces the published score table.
    #[default]
    SampleNMinus1,
}

impl FromStr for DivisorMode {
    type Err = RobustnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "population" | "population_n" => Ok(DivisorMode::PopulationN),
            "sample" | "sample_n_minus_1" => Ok(DivisorMode::SampleNMinus1),
            other => Err(RobustnessError::UnknownDivisor(other.to_string())),
        }
    }
}

impl fmt::Display for DivisorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DivisorMode::PopulationN => "population_n",
            DivisorMode::SampleNMinus1 => "sample_n_minus_1",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RobustnessError {
    #[error("model {0:?}: no scenarios to score")]
    Empty(String),
    #[error("model {model:?}: sample divisor needs at least 2 scenarios, got {n}")]
    TooFewScenarios { model: String, n: usize },
    #[error("model {0:?}: inner data absent")]
    InnerAbsent(String),
    #[error("unknown divisor mode {0:?}; expected `sample` or `population`")]
    UnknownDivisor(String),
    #[error("no reports to rank")]
    NothingToRank,
    #[error("model {model:?}: squared deviation for {scenario:?} is negative or not finite")]
    BadDeviation { model: String, scenario: String },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub model_name: String,
    pub sigma2_cross: f64,
    pub sigma2_inner: f64,
    pub score: f64,
    pub deviations_cross: BTreeMap<String, f64>,
    pub deviations_inner: BTreeMap<String, f64>,
    pub divisor_mode: DivisorMode,
}

fn divisor(model: &str, n: usize, mode: DivisorMode) -> Result<f64, RobustnessError> {
    match (mode, n) {
        (_, 0) => Err(RobustnessError::Empty(model.to_string())),
        (DivisorMode::SampleNMinus1, 1) => Err(RobustnessError::TooFewScenarios {
            model: model.to_string(),
            n,
        }),
        (DivisorMode::PopulationN, n) => Ok(n as f64),
        (DivisorMode::SampleNMinus1, n) => Ok((n - 1) as f64),
    }
}

/// Sum of squared deviations over the divisor.
pub fn variance_from_deviations(
    model: &str,
    deviations: &BTreeMap<String, f64>,
    mode: DivisorMode,
) -> Result<f64, RobustnessError> {
    for (scenario, d) in deviations {
        if !(d.is_finite() && *d >= 0.0) {
            return Err(RobustnessError::BadDeviation {
                model: model.to_string(),
                scenario: scenario.clone(),
            });
        }
    }
    let d = divisor(model, deviations.len(), mode)?;
    Ok(deviations.values().sum::<f64>() / d)
}

fn squared_deviations(mu: f64, acc: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    acc.iter().map(|(s, &c)| (s.clone(), (c - mu).powi(2))).collect()
}

pub fn variance_cross(table: &ResultTable, mode: DivisorMode) -> Result<f64, RobustnessError> {
    variance_from_deviations(&table.model_name, &squared_deviations(table.mu, &table.cross), mode)
}

pub fn variance_inner(table: &ResultTable, mode: DivisorMode) -> Result<f64, RobustnessError> {
    if table.inner.is_empty() {
        return Err(RobustnessError::InnerAbsent(table.model_name.clone()));
    }
    variance_from_deviations(&table.model_name, &squared_deviations(table.mu, &table.inner), mode)
}

/// Scores a model from its per-scenario squared deviations `(C - mu)^2`.
pub fn score_from_deviations(
    model: &str,
    deviations_cross: BTreeMap<String, f64>,
    deviations_inner: BTreeMap<String, f64>,
    mode: DivisorMode,
) -> Result<RobustnessReport, RobustnessError> {
    if deviations_inner.is_empty() {
        return Err(RobustnessError::InnerAbsent(model.to_string()));
    }
    let sigma2_cross = variance_from_deviations(model, &deviations_cross, mode)?;
    let sigma2_inner = variance_from_deviations(model, &deviations_inner, mode)?;
    Ok(RobustnessReport {
        model_name: model.to_string(),
        sigma2_cross,
        sigma2_inner,
        score: 1.0 - (sigma2_cross + sigma2_inner),
        deviations_cross,
        deviations_inner,
        divisor_mode: mode,
    })
}

pub fn robustness_score(table: &ResultTable, mode: DivisorMode) -> Result<RobustnessReport, RobustnessError> {
    score_from_deviations(
        &table.model_name,
        squared_deviations(table.mu, &table.cross),
        squared_deviations(table.mu, &table.inner),
        mode,
    )
}

/// Descending by score; equal scores fall back to model name.
pub fn rank_models(reports: &[RobustnessReport]) -> Result<Vec<RobustnessReport>, RobustnessError> {
    if reports.is_empty() {
        return Err(RobustnessError::NothingToRank);
    }
    let mut ranked = reports.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.model_name.cmp(&b.model_name))
    });
    Ok(ranked)
}

/// Table-shaped CSV: per model an `external` and an `internal` row with the
/// per-scenario squared deviations, the variance, and the score.
pub fn report_csv(reports: &[RobustnessReport]) -> String {
    let mut scenarios: Vec<&String> = reports
        .iter()
        .flat_map(|r| r.deviations_cross.keys().chain(r.deviations_inner.keys()))
        .collect();
    scenarios.sort();
    scenarios.dedup();

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string(), "setting".to_string()];
    header.extend(scenarios.iter().map(|s| s.to_string()));
    header.extend(["variance".to_string(), "score".to_string(), "divisor".to_string()]);
    w.write_record(&header).expect("in-memory write");
    for r in reports {
        for (setting, devs, var) in [
            ("external", &r.deviations_cross, r.sigma2_cross),
            ("internal", &r.deviations_inner, r.sigma2_inner),
        ] {
            let mut row = vec![r.model_name.clone(), setting.to_string()];
            row.extend(scenarios.iter().map(|s| devs.get(*s).map(|d| format!("{d:.6}")).unwrap_or_default()));
            row.extend([format!("{var:.6}"), format!("{:.6}", r.score), r.divisor_mode.to_string()]);
            w.write_record(&row).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
