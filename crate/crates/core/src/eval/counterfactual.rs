//! Counterfactual fairness metrics on a trained scorer: demographic parity
//! and fairness through unawareness (attribute substitution).

use serde::{Deserialize, Serialize};

use super::predictive::Scorer;
use super::{EvalError, Result};
use crate::data::{Dataset, SfmRoles, Value};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Scores,
    HardLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualMetrics {
    pub ftu: f64,
    pub dp: f64,
    pub ftu_basis: Basis,
    pub dp_basis: Basis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfactualOptions {
    pub threshold: f64,
    pub ftu_basis: Basis,
    pub dp_basis: Basis,
}

impl Default for CounterfactualOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            ftu_basis: Basis::Scores,
            dp_basis: Basis::HardLabels,
        }
    }
}

fn apply_basis(scores: Vec<f64>, basis: Basis, threshold: f64) -> Vec<f64> {
    match basis {
        Basis::Scores => scores,
        Basis::HardLabels => scores
            .into_iter()
            .map(|s| f64::from((s >= threshold) as u8))
            .collect(),
    }
}

/// `|P(yhat = 1 | x1) - P(yhat = 1 | x0)|` on hard labels at `threshold`.
pub fn demographic_parity(scorer: &dyn Scorer, test: &Dataset, roles: &SfmRoles, threshold: f64) -> Result<f64> {
    demographic_parity_on(scorer, test, roles, threshold, Basis::HardLabels)
}

pub fn demographic_parity_on(
    scorer: &dyn Scorer,
    test: &Dataset,
    roles: &SfmRoles,
    threshold: f64,
    basis: Basis,
) -> Result<f64> {
    demographic_parity_from_scores(&scorer.score(test)?, test, roles, threshold, basis)
}

/// Demographic parity of precomputed scores; `groups` supplies the
/// sensitive column row-aligned with `scores`.
pub fn demographic_parity_from_scores(
    scores: &[f64],
    groups: &Dataset,
    roles: &SfmRoles,
    threshold: f64,
    basis: Basis,
) -> Result<f64> {
    if scores.len() != groups.len() {
        return Err(EvalError::ScoreLength {
            expected: groups.len(),
            found: scores.len(),
        });
    }
    let r = roles.resolve(groups)?;
    let preds = apply_basis(scores.to_vec(), basis, threshold);
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for (row, p) in groups.rows().iter().zip(&preds) {
        let side = match row[r.sensitive] {
            v if v == Value::Level(r.x0) => 0,
            v if v == Value::Level(r.x1) => 1,
            _ => continue,
        };
        sums[side] += p;
        counts[side] += 1;
    }
    let names = &groups.schema().columns()[r.sensitive].categories;
    for (side, x) in [r.x0, r.x1].into_iter().enumerate() {
        if counts[side] == 0 {
            return Err(EvalError::MissingLevel(names[x as usize].clone()));
        }
    }
    Ok((sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64).abs())
}

/// Scores every row twice, with the sensitive attribute set to x1 and to
/// x0, and returns `|mean(f(x1)) - mean(f(x0))|`.
pub fn ftu(scorer: &dyn Scorer, test: &Dataset, roles: &SfmRoles) -> Result<f64> {
    ftu_on(scorer, test, roles, Basis::Scores, 0.5)
}

pub fn ftu_on(scorer: &dyn Scorer, test: &Dataset, roles: &SfmRoles, basis: Basis, threshold: f64) -> Result<f64> {
    if !scorer.uses_column(&roles.sensitive) {
        return Err(EvalError::MissingFeature(roles.sensitive.clone()));
    }
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let r = roles.resolve(test)?;
    let spec = test.schema().columns()[r.sensitive].clone();
    let with_level = |x: u32| -> Result<Vec<f64>> {
        let ds = test.map_column(r.sensitive, spec.clone(), std::iter::repeat(Value::Level(x)))?;
        Ok(apply_basis(scorer.score(&ds)?, basis, threshold))
    };
    let s1 = with_level(r.x1)?;
    let s0 = with_level(r.x0)?;
    Ok((stats::mean(&s1) - stats::mean(&s0)).abs())
}

pub fn counterfactual_metrics(
    scorer: &dyn Scorer,
    test: &Dataset,
    roles: &SfmRoles,
    options: &CounterfactualOptions,
) -> Result<CounterfactualMetrics> {
    Ok(CounterfactualMetrics {
        ftu: ftu_on(scorer, test, roles, options.ftu_basis, options.threshold)?,
        dp: demographic_parity_on(scorer, test, roles, options.threshold, options.dp_basis)?,
        ftu_basis: options.ftu_basis,
        dp_basis: options.dp_basis,
    })
}
