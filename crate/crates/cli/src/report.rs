//! Metrics documents and flat CSV tables for external plotting.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use fairsynth_core::data::{split, Dataset, SfmRoles};
use fairsynth_core::derive_seed;
use fairsynth_core::eval::counterfactual::{demographic_parity_from_scores, ftu_on};
use fairsynth_core::eval::predictive::{binary_labels, utility_from_scores, Trainer};
use fairsynth_core::orchestrator::{IterationMetrics, Violation};
use fairsynth_core::{CausalEffects, Engine, GroundTruthEffects, Scorer, UtilityReport};

#[derive(Debug, Serialize)]
pub struct RealSection {
    pub effects: CausalEffects,
}

#[derive(Debug, Serialize)]
pub struct MetricsDocument {
    pub synthetic_path: String,
    pub real: RealSection,
    pub synthetic: IterationMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<GroundTruthEffects>,
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl MetricsDocument {
    pub fn new(
        path: &Path,
        real_effects: CausalEffects,
        metrics: IterationMetrics,
        oracle: Option<GroundTruthEffects>,
        violations: Vec<Violation>,
    ) -> Self {
        let warnings = metrics.warnings.clone();
        Self {
            synthetic_path: path.display().to_string(),
            real: RealSection { effects: real_effects },
            synthetic: metrics,
            oracle,
            violations,
            warnings,
        }
    }
}

fn write_table(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn effect_rows(dataset: &str, e: &CausalEffects) -> Vec<Vec<String>> {
    let sd = e.sd;
    [
        ("tv", e.tv, sd.map(|s| s.tv)),
        ("de", e.de, sd.map(|s| s.de)),
        ("ie", e.ie, sd.map(|s| s.ie)),
        ("se", e.se, sd.map(|s| s.se)),
    ]
    .into_iter()
    .map(|(c, m, s)| vec![dataset.to_string(), c.to_string(), m.to_string(), s.map_or(String::new(), |v| v.to_string())])
    .collect()
}

pub fn write_tables(dir: &Path, doc: &MetricsDocument) -> Result<()> {
    let mut effects = effect_rows("real", &doc.real.effects);
    effects.extend(effect_rows("synthetic", &doc.synthetic.effects));
    if let Some(o) = &doc.oracle {
        for (c, v) in [("tv", o.tv), ("de", o.de), ("ie", o.ie), ("se", o.se)] {
            effects.push(vec!["oracle".into(), c.into(), v.to_string(), String::new()]);
        }
    }
    write_table(&dir.join("effects.csv"), &["dataset", "component", "mean", "sd"], effects)?;

    let m = &doc.synthetic;
    let scalars = vec![
        vec!["dp".to_string(), m.counterfactual.dp.to_string()],
        vec!["ftu".to_string(), m.counterfactual.ftu.to_string()],
        vec!["precision".to_string(), m.utility.precision.to_string()],
        vec!["recall".to_string(), m.utility.recall.to_string()],
        vec!["auroc".to_string(), m.utility.auroc.to_string()],
        vec!["accuracy".to_string(), m.utility.accuracy.to_string()],
    ];
    write_table(&dir.join("fairness_utility.csv"), &["metric", "value"], scalars)?;

    let mut fid: Vec<Vec<String>> = m
        .fidelity
        .categorical_tv
        .iter()
        .map(|(c, v)| vec![c.clone(), "tv".into(), v.to_string()])
        .chain(m.fidelity.numeric_ks.iter().map(|(c, v)| vec![c.clone(), "ks".into(), v.to_string()]))
        .collect();
    fid.push(vec![String::new(), "correlation_max_abs_diff".into(), m.fidelity.correlation_max_abs_diff.to_string()]);
    write_table(&dir.join("fidelity.csv"), &["column", "measure", "value"], fid)?;

    let balance = m
        .balance
        .iter()
        .map(|b| vec![b.column.clone(), b.majority_level.clone(), b.real_share.to_string(), b.synthetic_share.to_string()])
        .collect();
    write_table(&dir.join("balance.csv"), &["column", "majority_level", "real_share", "synthetic_share"], balance)?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct FairnessUtility {
    pub dp: f64,
    /// Absent when the sensitive attribute is not a model input.
    pub ftu: Option<f64>,
    pub utility: UtilityReport,
}

#[derive(Debug, Serialize)]
pub struct MitigationEvaluation {
    pub before: FairnessUtility,
    pub after: FairnessUtility,
    pub warnings: Vec<String>,
}

/// Trains on the training split of `data` and scores its test split; dp is
/// measured against the sensitive column of the aligned `groups` split.
fn fairness_utility(
    engine: &Engine,
    data: &Dataset,
    groups: &Dataset,
    roles: &SfmRoles,
    warnings: &mut Vec<String>,
) -> Result<FairnessUtility> {
    let settings = engine.run_settings()?;
    let ev = &settings.evaluation;
    let seed = derive_seed(settings.seed, 1);
    let (train, test) = split(data, ev.real_test_fraction, seed)?;
    let (_, group_test) = split(groups, ev.real_test_fraction, seed)?;
    let clf = ev.trainer.train(&train, &roles.outcome)?;
    let scores = clf.score(&test)?;
    let labels = binary_labels(&test, &roles.outcome)?;
    let utility = utility_from_scores(&scores, &labels, ev.utility_threshold)?;
    let cf = &ev.counterfactual;
    let dp = demographic_parity_from_scores(&scores, &group_test, roles, cf.threshold, cf.dp_basis)?;
    let ftu = if clf.uses_column(&roles.sensitive) {
        Some(ftu_on(&clf, &test, roles, cf.ftu_basis, cf.threshold)?)
    } else {
        warnings.push("sensitive attribute is not a model input; ftu not computed".into());
        None
    };
    Ok(FairnessUtility { dp, ftu, utility })
}

pub fn mitigation_evaluation(engine: &Engine, original: &Dataset, transformed: &Dataset, roles: &SfmRoles) -> Result<MitigationEvaluation> {
    let mut warnings = Vec::new();
    let before = fairness_utility(engine, original, original, roles, &mut warnings)?;
    let after = fairness_utility(engine, transformed, original, roles, &mut warnings)?;
    Ok(MitigationEvaluation { before, after, warnings })
}
