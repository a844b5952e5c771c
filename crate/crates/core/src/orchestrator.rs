//! The generate, evaluate, refine loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, majority_share, Dataset, Record, SfmRoles};
use crate::derive_seed;
use crate::eval::causal::{repeat_effects, CausalEffects, RepeatOptions};
use crate::eval::counterfactual::{counterfactual_metrics, CounterfactualMetrics, CounterfactualOptions};
use crate::eval::predictive::{
    balance_report, evaluate_utility, fidelity, mixed_training_set, BalanceEntry, FidelityReport, Trainer,
    TrainerConfig, UtilityReport,
};
use crate::eval::EvalError;
use crate::generation::{
    generate_batch, parse_response, Backend, BatchSettings, GenerationDiagnostics, SamplingParams,
};
use crate::prompting::{
    build_prompt, contrastive_pairs, render_rows, select_icl_samples, IclWeighting, PromptError, PromptSpec,
    DEFAULT_CONTRASTIVE_PAIRS,
};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("invalid run settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("cannot write run directory: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = OrchestratorError> = std::result::Result<T, E>;

/// Bounds checked after every iteration. An absent bound is not checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub tv: Option<f64>,
    pub de: Option<f64>,
    pub ie: Option<f64>,
    pub se: Option<f64>,
    pub dp: Option<f64>,
    pub ftu: Option<f64>,
    pub min_precision: Option<f64>,
    pub min_recall: Option<f64>,
    pub min_auroc: Option<f64>,
    /// Bound on every column's fidelity distance (TV for discrete, KS for
    /// numeric columns).
    pub max_fidelity_distance: Option<f64>,
    /// Per-column fidelity bounds, overriding `max_fidelity_distance`.
    pub fidelity_columns: BTreeMap<String, f64>,
    /// Upper bound on the synthetic share of each column's real majority level.
    pub max_majority_share: BTreeMap<String, f64>,
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let uppers = [
            ("tv", self.tv),
            ("de", self.de),
            ("ie", self.ie),
            ("se", self.se),
            ("dp", self.dp),
            ("ftu", self.ftu),
            ("max_fidelity_distance", self.max_fidelity_distance),
        ];
        for (name, v) in uppers {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(OrchestratorError::InvalidThresholds(format!("{name} = {v}")));
                }
            }
        }
        for (name, v) in [
            ("min_precision", self.min_precision),
            ("min_recall", self.min_recall),
            ("min_auroc", self.min_auroc),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(OrchestratorError::InvalidThresholds(format!("{name} = {v} outside [0, 1]")));
                }
            }
        }
        for (col, v) in self.fidelity_columns.iter().chain(&self.max_majority_share) {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(OrchestratorError::InvalidThresholds(format!("{col} = {v}")));
            }
        }
        Ok(())
    }

    pub fn check(&self, m: &IterationMetrics) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut upper = |metric: String, value: f64, bound: Option<f64>| {
            if let Some(b) = bound {
                if !(value <= b) {
                    out.push(Violation::upper(metric, value, b));
                }
            }
        };
        let e = &m.effects;
        for (name, v, b) in [("tv", e.tv, self.tv), ("de", e.de, self.de), ("ie", e.ie, self.ie), ("se", e.se, self.se)] {
            upper(name.to_string(), v.abs(), b);
        }
        upper("dp".into(), m.counterfactual.dp, self.dp);
        upper("ftu".into(), m.counterfactual.ftu, self.ftu);
        let distances = m.fidelity.categorical_tv.iter().chain(&m.fidelity.numeric_ks);
        for (col, d) in distances {
            let bound = self.fidelity_columns.get(col).copied().or(self.max_fidelity_distance);
            upper(format!("fidelity:{col}"), *d, bound);
        }
        for entry in &m.balance {
            upper(
                format!("majority_share:{}", entry.column),
                entry.synthetic_share,
                self.max_majority_share.get(&entry.column).copied(),
            );
        }
        for (name, v, b) in [
            ("precision", m.utility.precision, self.min_precision),
            ("recall", m.utility.recall, self.min_recall),
            ("auroc", m.utility.auroc, self.min_auroc),
        ] {
            if let Some(b) = b {
                if !(v >= b) {
                    out.push(Violation::lower(name.to_string(), v, b));
                }
            }
        }
        out
    }

    /// Columns whose majority share is bounded.
    pub fn balance_columns(&self) -> Vec<String> {
        self.max_majority_share.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub metric: String,
    pub value: f64,
    pub bound: f64,
    pub kind: BoundKind,
    /// Distance past the bound; positive.
    pub margin: f64,
}

impl Violation {
    fn upper(metric: String, value: f64, bound: f64) -> Self {
        Self { metric, value, bound, kind: BoundKind::Max, margin: value - bound }
    }

    fn lower(metric: String, value: f64, bound: f64) -> Self {
        Self { metric, value, bound, kind: BoundKind::Min, margin: bound - value }
    }

    fn is_causal(&self) -> bool {
        matches!(self.metric.as_str(), "tv" | "de" | "ie" | "se")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Real training split plus synthetic rows.
    #[default]
    Mixed,
    SyntheticOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSettings {
    pub repeat: RepeatOptions,
    pub trainer: TrainerConfig,
    pub counterfactual: CounterfactualOptions,
    pub utility_threshold: f64,
    pub training_mode: TrainingMode,
    pub synthetic_weight: f64,
    /// Held-out share of the real data used for dp, ftu and utility.
    pub real_test_fraction: f64,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            repeat: RepeatOptions::default(),
            trainer: TrainerConfig::default(),
            counterfactual: CounterfactualOptions::default(),
            utility_threshold: 0.5,
            training_mode: TrainingMode::Mixed,
            synthetic_weight: 1.0,
            real_test_fraction: 0.3,
        }
    }
}

/// Real data split once per run.
#[derive(Debug, Clone)]
pub struct RealReference {
    pub full: Dataset,
    pub train: Dataset,
    pub test: Dataset,
}

impl RealReference {
    pub fn new(real: Dataset, test_fraction: f64, seed: u64) -> Result<Self> {
        let (train, test) = data::split(&real, test_fraction, seed)?;
        Ok(Self { full: real, train, test })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub effects: CausalEffects,
    pub counterfactual: CounterfactualMetrics,
    pub utility: UtilityReport,
    pub fidelity: FidelityReport,
    pub balance: Vec<BalanceEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Contrast levels fixed from the real data, so that a rebalanced synthetic
/// batch cannot swap x0 and x1.
pub fn pin_roles(roles: &SfmRoles, real: &Dataset) -> Result<SfmRoles> {
    let r = roles.resolve(real)?;
    let names = &real.schema().columns()[r.sensitive].categories;
    Ok(roles.clone().with_levels(&names[r.x0 as usize], &names[r.x1 as usize]))
}

/// Runs every evaluator on one synthetic batch and checks the thresholds.
pub fn evaluate_iteration(
    synthetic: &Dataset,
    real: &RealReference,
    roles: &SfmRoles,
    settings: &EvaluationSettings,
    thresholds: &Thresholds,
    seed: u64,
) -> Result<(IterationMetrics, Vec<Violation>)> {
    if synthetic.schema() != real.full.schema() {
        return Err(data::DataError::SchemaMismatch.into());
    }
    let roles = pin_roles(roles, &real.full)?;
    let effects = repeat_effects(synthetic, &roles, &settings.trainer, &settings.repeat, derive_seed(seed, 1))?;
    let train = match settings.training_mode {
        TrainingMode::Mixed => mixed_training_set(&real.train, synthetic, settings.synthetic_weight)?,
        TrainingMode::SyntheticOnly => synthetic.clone(),
    };
    let classifier = settings.trainer.train(&train, &roles.outcome)?;
    let counterfactual = counterfactual_metrics(&classifier, &real.test, &roles, &settings.counterfactual)?;
    let utility = evaluate_utility(&classifier, &real.test, &roles.outcome, settings.utility_threshold)?;
    let fidelity = fidelity(&real.full, synthetic)?;
    let mut balance_columns = thresholds.balance_columns();
    if !balance_columns.contains(&roles.sensitive) {
        balance_columns.insert(0, roles.sensitive.clone());
    }
    let balance = balance_report(&real.full, synthetic, &balance_columns)?;
    let mut warnings = Vec::new();
    let scalars = [
        ("tv", effects.tv),
        ("de", effects.de),
        ("ie", effects.ie),
        ("se", effects.se),
        ("dp", counterfactual.dp),
        ("ftu", counterfactual.ftu),
        ("precision", utility.precision),
        ("recall", utility.recall),
        ("auroc", utility.auroc),
    ];
    for (name, v) in scalars {
        if !v.is_finite() {
            warnings.push(format!("{name} is not finite"));
        }
    }
    let metrics = IterationMetrics { effects, counterfactual, utility, fidelity, balance, warnings };
    let violations = thresholds.check(&metrics);
    Ok((metrics, violations))
}

fn directive_for(violations: &[Violation], round: usize) -> String {
    let mut text = format!("Refinement {round}: the previous batch violated these targets:");
    for (i, v) in violations.iter().enumerate() {
        let sep = if i == 0 { " " } else { "; " };
        let relation = match v.kind {
            BoundKind::Max => "must be at most",
            BoundKind::Min => "must be at least",
        };
        let _ = write!(text, "{sep}{} = {:.4} ({relation} {:.4})", v.metric, v.value, v.bound);
    }
    text.push_str(". Generate rows that meet every listed target.");
    text
}

/// Applies the refinement rules in order: rebalance the examples on a causal
/// or dp violation, add one directive listing every violation, and inject
/// contrastive pairs on a dp or ftu violation.
pub fn refine(
    spec: &PromptSpec,
    violations: &[Violation],
    real: &Dataset,
    roles: &SfmRoles,
    contrastive_k: usize,
    seed: u64,
) -> Result<PromptSpec> {
    if violations.is_empty() {
        return Ok(spec.clone());
    }
    let mut out = spec.clone();
    let dp = violations.iter().any(|v| v.metric == "dp");
    let ftu = violations.iter().any(|v| v.metric == "ftu");
    if dp || violations.iter().any(Violation::is_causal) {
        out.icl_weighting = IclWeighting::GroupBalanced;
        out.icl_round += 1;
    }
    let round = out.extra_directives.len() + 1;
    out = crate::prompting::add_refinement(&out, &directive_for(violations, round))?;
    if (dp || ftu) && contrastive_k > 0 {
        out.contrastive_rows = contrastive_pairs(real, roles, contrastive_k, seed)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopSettings {
    pub max_iterations: usize,
    pub contrastive_pairs: usize,
}

impl Default for LoopSettings {
    fn default() -> Self {
        Self { max_iterations: 5, contrastive_pairs: DEFAULT_CONTRASTIVE_PAIRS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    pub target_n: usize,
    /// Maximum backend requests per iteration.
    pub request_budget: usize,
    pub max_in_flight: usize,
    pub retain_raw: bool,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self { target_n: 1000, request_budget: 10, max_in_flight: 2, retain_raw: true }
    }
}

#[derive(Debug, Clone)]
pub struct RunSettings {
    pub roles: SfmRoles,
    pub prompt: PromptSpec,
    pub sampling: SamplingParams,
    pub generation: GenerationSettings,
    pub evaluation: EvaluationSettings,
    pub thresholds: Thresholds,
    pub loop_settings: LoopSettings,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    BudgetExhausted,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub prompt_fingerprint: String,
    pub icl_weighting: IclWeighting,
    pub directives: usize,
    pub contrastive_rows: usize,
    pub diagnostics: GenerationDiagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<IterationMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation_error: Option<String>,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: RunStatus,
    pub seed: u64,
    pub iterations: Vec<IterationRecord>,
    /// File name of the final dataset inside the run directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub final_dataset: Option<Dataset>,
}

pub const REPORT_FILE: &str = "report.json";
pub const SYNTHETIC_FILE: &str = "synthetic.csv";

/// Runs the loop. When `run_dir` is given, per-iteration prompts and raw
/// responses, the final dataset and the report are written there, including
/// after a backend error.
pub fn run(
    settings: &RunSettings,
    backend: &dyn Backend,
    real: &Dataset,
    run_dir: Option<&Path>,
) -> Result<RunOutcome> {
    settings.thresholds.validate()?;
    if settings.loop_settings.max_iterations == 0 {
        return Err(OrchestratorError::InvalidSettings("max_iterations must be at least 1".into()));
    }
    let schema = real.schema();
    let spec0 = settings.prompt.clone().bind(schema)?;
    let roles = pin_roles(&settings.roles, real)?;
    let reference = RealReference::new(real.clone(), settings.evaluation.real_test_fraction, derive_seed(settings.seed, 1))?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
    }

    let mut spec = spec0;
    let mut iterations = Vec::new();
    let mut final_dataset = None;
    let mut status = RunStatus::BudgetExhausted;
    let mut error = None;
    for it in 0..settings.loop_settings.max_iterations {
        let number = it + 1;
        let icl_idx = select_icl_samples(&reference.train, &spec, derive_seed(settings.seed, 2))?;
        let icl_lines = render_rows(&reference.train, &icl_idx);
        let prompt = build_prompt(&spec, &icl_lines)?;
        let mut shown: Vec<Record> = icl_idx.iter().map(|&i| reference.train.rows()[i].clone()).collect();
        if !spec.contrastive_rows.is_empty() {
            shown.extend(parse_response(&spec.contrastive_rows.join("\n"), schema).0);
        }
        let iter_dir = run_dir.map(|d| d.join(format!("iteration_{number:02}")));
        if let Some(dir) = &iter_dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("prompt.txt"), format!("{}\n\n{}\n", prompt.system_role, prompt.user_body))?;
        }
        let batch = generate_batch(
            backend,
            &prompt,
            &settings.sampling,
            schema,
            &shown,
            &BatchSettings {
                target_n: settings.generation.target_n,
                budget: settings.generation.request_budget,
                max_in_flight: settings.generation.max_in_flight,
                seed: derive_seed(settings.seed, 1000 + it as u64),
                refinement_count: spec.extra_directives.len(),
                retain_raw: settings.generation.retain_raw,
            },
        );
        let batch = match batch {
            Ok(b) => b,
            Err(e) => {
                log::error!("iteration {number}: {e}");
                status = RunStatus::BackendError;
                error = Some(format!("iteration {number}: {e}"));
                break;
            }
        };
        if let Some(dir) = &iter_dir {
            for (i, raw) in batch.raw_responses.iter().enumerate() {
                fs::write(dir.join(format!("response_{:02}.txt", i + 1)), raw)?;
            }
        }
        let evaluated = evaluate_iteration(
            &batch.dataset,
            &reference,
            &roles,
            &settings.evaluation,
            &settings.thresholds,
            derive_seed(settings.seed, 2000 + it as u64),
        );
        let (metrics, violations, evaluation_error) = match evaluated {
            Ok((m, v)) => (Some(m), v, None),
            Err(e) => {
                log::warn!("iteration {number}: evaluation failed: {e}");
                let v = Violation::lower("evaluable".to_string(), 0.0, 1.0);
                (None, vec![v], Some(e.to_string()))
            }
        };
        log::info!(
            "iteration {number}: {} rows, {} violations",
            batch.dataset.len(),
            violations.len()
        );
        iterations.push(IterationRecord {
            iteration: number,
            prompt_fingerprint: prompt.fingerprint(),
            icl_weighting: spec.icl_weighting,
            directives: spec.extra_directives.len(),
            contrastive_rows: spec.contrastive_rows.len(),
            diagnostics: batch.diagnostics,
            metrics,
            evaluation_error,
            violations: violations.clone(),
        });
        final_dataset = Some(batch.dataset);
        if violations.is_empty() {
            status = RunStatus::Converged;
            break;
        }
        if number < settings.loop_settings.max_iterations {
            spec = refine(
                &spec,
                &violations,
                &reference.train,
                &roles,
                settings.loop_settings.contrastive_pairs,
                derive_seed(settings.seed, 3000 + it as u64),
            )?;
        }
    }

    let report = RunReport {
        status,
        seed: settings.seed,
        iterations,
        final_dataset: final_dataset.as_ref().map(|_| SYNTHETIC_FILE.to_string()),
        error,
    };
    if let Some(dir) = run_dir {
        if let Some(ds) = &final_dataset {
            data::save_csv(ds, dir.join(SYNTHETIC_FILE))?;
        }
        fs::write(dir.join(REPORT_FILE), report_json(&report)?)?;
    }
    Ok(RunOutcome { report, final_dataset })
}

/// Pretty JSON with a trailing newline.
pub fn report_json(report: &RunReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Synthetic share of the real majority level of `column`, per iteration.
pub fn majority_trace(report: &RunReport, column: &str) -> Vec<f64> {
    report
        .iterations
        .iter()
        .filter_map(|it| it.metrics.as_ref())
        .filter_map(|m| m.balance.iter().find(|b| b.column == column).map(|b| b.synthetic_share))
        .collect()
}

/// Majority share of a discrete column, for reporting outside the loop.
pub fn column_majority_share(dataset: &Dataset, column: &str) -> Result<Option<f64>> {
    let col = dataset.schema().require(column)?;
    Ok(majority_share(dataset, col).map(|(_, s)| s))
}
