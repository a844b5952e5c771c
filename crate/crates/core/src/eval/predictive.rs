//! In-repo classifiers (logistic regression and boosted stumps), utility
//! metrics, statistical fidelity and the distribution-balance report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::data::{self, ColumnKind, ColumnSpec, Dataset, Value};
use crate::stats::{self, sigmoid};

/// Anything that maps dataset rows to scores in `[0, 1]`.
pub trait Scorer: Sync {
    fn score(&self, dataset: &Dataset) -> Result<Vec<f64>>;

    /// Whether the named column feeds the model.
    fn uses_column(&self, name: &str) -> bool;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "snake_case")]
pub enum FeatureBlock {
    /// One indicator per listed level.
    Indicator { column: String, levels: Vec<String> },
    Standardized { column: String, mean: f64, scale: f64 },
}

impl FeatureBlock {
    pub fn column(&self) -> &str {
        match self {
            FeatureBlock::Indicator { column, .. } | FeatureBlock::Standardized { column, .. } => {
                column
            }
        }
    }

    fn width(&self) -> usize {
        match self {
            FeatureBlock::Indicator { levels, .. } => levels.len(),
            FeatureBlock::Standardized { .. } => 1,
        }
    }
}

/// Feature encoding fixed at fit time: binary columns become one indicator
/// of the positive level, categoricals a full one-hot, numerics are
/// standardized with training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    blocks: Vec<FeatureBlock>,
}

impl FeatureEncoder {
    pub fn fit(dataset: &Dataset, exclude: &[&str]) -> Self {
        let blocks = dataset
            .schema()
            .columns()
            .iter()
            .enumerate()
            .filter(|(_, c)| !exclude.contains(&c.name.as_str()))
            .map(|(i, c)| match c.kind {
                ColumnKind::Binary => FeatureBlock::Indicator {
                    column: c.name.clone(),
                    levels: vec![c.categories[1].clone()],
                },
                ColumnKind::Categorical => FeatureBlock::Indicator {
                    column: c.name.clone(),
                    levels: c.categories.clone(),
                },
                ColumnKind::Numeric => {
                    let v = dataset.column_f64(i);
                    let mean = stats::mean(&v);
                    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                        / v.len().max(1) as f64;
                    let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                    FeatureBlock::Standardized {
                        column: c.name.clone(),
                        mean,
                        scale,
                    }
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn blocks(&self) -> &[FeatureBlock] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(FeatureBlock::width).sum()
    }

    /// Offset of the first encoded dimension belonging to `column`.
    pub fn offset_of(&self, column: &str) -> Option<usize> {
        let mut off = 0;
        for b in &self.blocks {
            if b.column() == column {
                return Some(off);
            }
            off += b.width();
        }
        None
    }

    /// Row-major encoded matrix of shape `len x dim`.
    pub fn encode(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        let schema = dataset.schema();
        let mut plan = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let col = schema.require(b.column())?;
            let spec = &schema.columns()[col];
            let levels: Option<Vec<u32>> = match b {
                FeatureBlock::Indicator { levels, .. } => {
                    if !spec.is_discrete() {
                        return Err(EvalError::IncompatibleColumn {
                            column: spec.name.clone(),
                        });
                    }
                    let idx = levels
                        .iter()
                        .map(|l| spec.level_index(l))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| EvalError::IncompatibleColumn {
                            column: spec.name.clone(),
                        })?;
                    Some(idx)
                }
                FeatureBlock::Standardized { .. } => {
                    if spec.kind != ColumnKind::Numeric {
                        return Err(EvalError::IncompatibleColumn {
                            column: spec.name.clone(),
                        });
                    }
                    None
                }
            };
            plan.push((col, levels));
        }
        let dim = self.dim();
        let mut out = Vec::with_capacity(dataset.len() * dim);
        for row in dataset.rows() {
            for (b, (col, levels)) in self.blocks.iter().zip(&plan) {
                match (b, levels) {
                    (FeatureBlock::Standardized { mean, scale, .. }, _) => {
                        out.push((row[*col].as_f64() - mean) / scale)
                    }
                    (FeatureBlock::Indicator { .. }, Some(levels)) => {
                        let v = row[*col].level();
                        out.extend(levels.iter().map(|l| f64::from(u8::from(v == Some(*l)))));
                    }
                    (FeatureBlock::Indicator { .. }, None) => unreachable!(),
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    LogisticRegression,
    BoostedStumps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    /// Added to the logit when `x[feature] <= threshold`.
    pub left: f64,
    pub right: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Model {
    Logistic { bias: f64, weights: Vec<f64> },
    Stumps { base: f64, stumps: Vec<Stump> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    encoder: FeatureEncoder,
    model: Model,
}

impl Classifier {
    /// Assembles a logistic model from explicit parameters.
    pub fn logistic_from_parts(encoder: FeatureEncoder, bias: f64, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != encoder.dim() {
            return Err(EvalError::InvalidParam(format!(
                "{} weights for {} encoded features",
                weights.len(),
                encoder.dim()
            )));
        }
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(EvalError::InvalidParam("non-finite logistic weight".into()));
        }
        Ok(Self {
            encoder,
            model: Model::Logistic { bias, weights },
        })
    }

    pub fn kind(&self) -> ClassifierKind {
        match self.model {
            Model::Logistic { .. } => ClassifierKind::LogisticRegression,
            Model::Stumps { .. } => ClassifierKind::BoostedStumps,
        }
    }

    pub fn encoder(&self) -> &FeatureEncoder {
        &self.encoder
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    fn logit(&self, x: &[f64]) -> f64 {
        match &self.model {
            Model::Logistic { bias, weights } => {
                bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            }
            Model::Stumps { base, stumps } => {
                base + stumps
                    .iter()
                    .map(|s| if x[s.feature] <= s.threshold { s.left } else { s.right })
                    .sum::<f64>()
            }
        }
    }
}

impl Scorer for Classifier {
    fn score(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        let d = self.encoder.dim();
        let x = self.encoder.encode(dataset)?;
        if d == 0 {
            return Ok(vec![sigmoid(self.logit(&[])); dataset.len()]);
        }
        Ok(x.chunks(d).map(|row| sigmoid(self.logit(row))).collect())
    }

    fn uses_column(&self, name: &str) -> bool {
        self.encoder.offset_of(name).is_some()
    }
}

/// Binary labels (positive = second level) of `label`.
pub fn binary_labels(dataset: &Dataset, label: &str) -> Result<Vec<bool>> {
    let col = dataset.schema().require(label)?;
    if dataset.schema().columns()[col].kind != ColumnKind::Binary {
        return Err(EvalError::NonBinaryLabel(label.to_string()));
    }
    Ok(dataset
        .rows()
        .iter()
        .map(|r| r[col] == Value::Level(1))
        .collect())
}

fn training_inputs(train: &Dataset, label: &str) -> Result<(FeatureEncoder, Vec<f64>, Vec<f64>, Vec<f64>)> {
    if train.is_empty() {
        return Err(EvalError::Empty);
    }
    let labels = binary_labels(train, label)?;
    if labels.iter().all(|l| *l) || labels.iter().all(|l| !*l) {
        return Err(EvalError::SingleClass);
    }
    let encoder = FeatureEncoder::fit(train, &[label]);
    let x = encoder.encode(train)?;
    let y = labels.iter().map(|&l| f64::from(l as u8)).collect();
    let w = (0..train.len()).map(|i| train.weight(i)).collect();
    Ok((encoder, x, y, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticParams {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            max_iters: 300,
            tol: 1e-6,
        }
    }
}

/// Weighted mean log-loss and its gradient. `theta[0]` is the bias and
/// `theta[1..]` the weights; `x` is row-major with `theta.len() - 1` columns.
pub fn logistic_loss_grad(x: &[f64], y: &[f64], w: &[f64], theta: &[f64]) -> (f64, Vec<f64>) {
    let d = theta.len() - 1;
    let total_w: f64 = w.iter().sum();
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    for (i, (yi, wi)) in y.iter().zip(w).enumerate() {
        let row = &x[i * d..(i + 1) * d];
        let z = theta[0] + row.iter().zip(&theta[1..]).map(|(a, b)| a * b).sum::<f64>();
        // log(1 + e^z) - y z, computed stably.
        let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        loss += wi * (softplus - yi * z);
        let r = wi * (sigmoid(z) - yi);
        grad[0] += r;
        for (g, a) in grad[1..].iter_mut().zip(row) {
            *g += r * a;
        }
    }
    for g in &mut grad {
        *g /= total_w;
    }
    (loss / total_w, grad)
}

/// Batch gradient descent with step halving on loss increase.
pub fn fit_logistic(train: &Dataset, label: &str, params: &LogisticParams) -> Result<Classifier> {
    if !(params.learning_rate > 0.0) {
        return Err(EvalError::InvalidParam("learning rate must be positive".into()));
    }
    let (encoder, x, y, w) = training_inputs(train, label)?;
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(EvalError::InvalidParam("all training weights are zero".into()));
    }
    let mut theta = vec![0.0; encoder.dim() + 1];
    let (mut loss, mut grad) = logistic_loss_grad(&x, &y, &w, &theta);
    let mut lr = params.learning_rate;
    'outer: for _ in 0..params.max_iters {
        if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < params.tol {
            break;
        }
        let mut halvings = 0;
        loop {
            let candidate: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - lr * g).collect();
            let (c_loss, c_grad) = logistic_loss_grad(&x, &y, &w, &candidate);
            if c_loss <= loss {
                theta = candidate;
                loss = c_loss;
                grad = c_grad;
                break;
            }
            halvings += 1;
            if halvings > 20 {
                break 'outer;
            }
            lr *= 0.5;
        }
    }
    Classifier::logistic_from_parts(encoder, theta[0], theta[1..].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StumpParams {
    pub n_rounds: usize,
    pub shrinkage: f64,
}

impl Default for StumpParams {
    fn default() -> Self {
        Self {
            n_rounds: 100,
            shrinkage: 0.3,
        }
    }
}

const MAX_LEAF: f64 = 8.0;

/// Gradient boosting on log-loss with depth-1 trees. Splits minimize the
/// weighted squared error of the residuals; leaves take a Newton step.
pub fn fit_boosted_stumps(train: &Dataset, label: &str, params: &StumpParams) -> Result<Classifier> {
    if params.n_rounds < 1 {
        return Err(EvalError::InvalidParam("n_rounds must be at least 1".into()));
    }
    if !(params.shrinkage > 0.0 && params.shrinkage <= 1.0) {
        return Err(EvalError::InvalidParam("shrinkage must lie in (0, 1]".into()));
    }
    let (encoder, x, y, w) = training_inputs(train, label)?;
    let n = y.len();
    let d = encoder.dim();
    let total_w: f64 = w.iter().sum();
    if total_w <= 0.0 {
        return Err(EvalError::InvalidParam("all training weights are zero".into()));
    }
    let p0 = (y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / total_w).clamp(1e-6, 1.0 - 1e-6);
    let base = (p0 / (1.0 - p0)).ln();
    let mut f = vec![base; n];

    let order: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[a * d + j].total_cmp(&x[b * d + j]));
            idx
        })
        .collect();

    let mut stumps = Vec::with_capacity(params.n_rounds);
    let mut r = vec![0.0; n];
    let mut h = vec![0.0; n];
    for _ in 0..params.n_rounds {
        for i in 0..n {
            let p = sigmoid(f[i]);
            r[i] = y[i] - p;
            h[i] = p * (1.0 - p);
        }
        let sum_wr: f64 = r.iter().zip(&w).map(|(a, b)| a * b).sum();
        // (gain, feature, threshold); gain = S_L^2/W_L + S_R^2/W_R.
        let mut best: Option<(f64, usize, f64)> = None;
        for (j, idx) in order.iter().enumerate() {
            let (mut sl, mut wl) = (0.0, 0.0);
            for k in 0..n - 1 {
                let i = idx[k];
                sl += w[i] * r[i];
                wl += w[i];
                let (a, b) = (x[i * d + j], x[idx[k + 1] * d + j]);
                if a == b {
                    continue;
                }
                let wr = total_w - wl;
                if wl <= 0.0 || wr <= 0.0 {
                    continue;
                }
                let sr = sum_wr - sl;
                let gain = sl * sl / wl + sr * sr / wr;
                if best.is_none_or(|(g, _, _)| gain > g + 1e-15) {
                    best = Some((gain, j, 0.5 * (a + b)));
                }
            }
        }
        let Some((_, j, threshold)) = best else { break };
        let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            if x[i * d + j] <= threshold {
                gl += w[i] * r[i];
                hl += w[i] * h[i];
            } else {
                gr += w[i] * r[i];
                hr += w[i] * h[i];
            }
        }
        let leaf = |g: f64, h: f64| (g / h.max(1e-12)).clamp(-MAX_LEAF, MAX_LEAF) * params.shrinkage;
        let stump = Stump {
            feature: j,
            threshold,
            left: leaf(gl, hl),
            right: leaf(gr, hr),
        };
        for i in 0..n {
            f[i] += if x[i * d + j] <= threshold { stump.left } else { stump.right };
        }
        stumps.push(stump);
    }
    Ok(Classifier {
        encoder,
        model: Model::Stumps { base, stumps },
    })
}

/// Training recipe used wherever a classifier must be refit (repeats,
/// mixed training, mitigation re-evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainerConfig {
    LogisticRegression(LogisticParams),
    BoostedStumps(StumpParams),
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig::LogisticRegression(LogisticParams::default())
    }
}

pub trait Trainer: Sync {
    fn train(&self, data: &Dataset, label: &str) -> Result<Classifier>;
}

impl Trainer for TrainerConfig {
    fn train(&self, data: &Dataset, label: &str) -> Result<Classifier> {
        match self {
            TrainerConfig::LogisticRegression(p) => fit_logistic(data, label, p),
            TrainerConfig::BoostedStumps(p) => fit_boosted_stumps(data, label, p),
        }
    }
}

/// Tie-aware AUROC: (concordant + 0.5 * tied) / (positives * negatives).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::ScoreLength {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut concordant = 0.0;
    let mut neg_below = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        let (mut gp, mut gn) = (0.0, 0.0);
        while end < idx.len() && scores[idx[end]] == scores[idx[k]] {
            if labels[idx[end]] {
                gp += 1.0;
            } else {
                gn += 1.0;
            }
            end += 1;
        }
        concordant += gp * neg_below + 0.5 * gp * gn;
        neg_below += gn;
        k = end;
    }
    Ok(concordant / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub precision: f64,
    pub recall: f64,
    pub auroc: f64,
    pub accuracy: f64,
    pub threshold: f64,
}

/// Utility metrics from raw scores. A score at or above `threshold` is a
/// positive prediction; precision with no positive predictions is 0.
pub fn utility_from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Result<UtilityReport> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let auroc = auroc(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0.0, 0.0, 0.0, 0.0);
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= threshold, *l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fneg += 1.0,
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    Ok(UtilityReport {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        auroc,
        accuracy: (tp + tn) / scores.len() as f64,
        threshold,
    })
}

pub fn evaluate_utility(
    scorer: &dyn Scorer,
    test: &Dataset,
    label: &str,
    threshold: f64,
) -> Result<UtilityReport> {
    let labels = binary_labels(test, label)?;
    let scores = scorer.score(test)?;
    utility_from_scores(&scores, &labels, threshold)
}

/// Real training rows followed by synthetic rows weighted by `synthetic_weight`.
pub fn mixed_training_set(real_train: &Dataset, synthetic: &Dataset, synthetic_weight: f64) -> Result<Dataset> {
    if !(synthetic_weight >= 0.0 && synthetic_weight.is_finite()) {
        return Err(EvalError::InvalidParam("synthetic weight must be finite and >= 0".into()));
    }
    Ok(real_train.concat(synthetic, synthetic_weight)?)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Total-variation distance per discrete column.
    pub categorical_tv: BTreeMap<String, f64>,
    /// Two-sample KS statistic per numeric column.
    pub numeric_ks: BTreeMap<String, f64>,
    /// Max |corr_real - corr_synthetic| over numeric and binary columns.
    pub correlation_max_abs_diff: f64,
}

pub fn fidelity(real: &Dataset, synthetic: &Dataset) -> Result<FidelityReport> {
    if real.schema() != synthetic.schema() {
        return Err(EvalError::Data(data::DataError::SchemaMismatch));
    }
    if real.is_empty() || synthetic.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut report = FidelityReport::default();
    let mut corr_cols = Vec::new();
    for (i, c) in real.schema().columns().iter().enumerate() {
        match c.kind {
            ColumnKind::Numeric => {
                report
                    .numeric_ks
                    .insert(c.name.clone(), stats::ks_statistic(&real.column_f64(i), &synthetic.column_f64(i)));
                corr_cols.push(i);
            }
            _ => {
                report
                    .categorical_tv
                    .insert(c.name.clone(), tv_distance(real, synthetic, i));
                if c.kind == ColumnKind::Binary {
                    corr_cols.push(i);
                }
            }
        }
    }
    let real_cols: Vec<Vec<f64>> = corr_cols.iter().map(|&i| real.column_f64(i)).collect();
    let syn_cols: Vec<Vec<f64>> = corr_cols.iter().map(|&i| synthetic.column_f64(i)).collect();
    let mut max_diff: f64 = 0.0;
    for a in 0..corr_cols.len() {
        for b in a + 1..corr_cols.len() {
            let diff = (stats::pearson(&real_cols[a], &real_cols[b])
                - stats::pearson(&syn_cols[a], &syn_cols[b]))
            .abs();
            max_diff = max_diff.max(diff);
        }
    }
    report.correlation_max_abs_diff = max_diff;
    Ok(report)
}

fn tv_distance(a: &Dataset, b: &Dataset, col: usize) -> f64 {
    let ca = a.level_counts(col);
    let cb = b.level_counts(col);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    0.5 * ca
        .iter()
        .zip(&cb)
        .map(|(x, y)| (*x as f64 / na - *y as f64 / nb).abs())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceEntry {
    pub column: String,
    /// Majority level in the real data.
    pub majority_level: String,
    pub real_share: f64,
    pub synthetic_share: f64,
}

pub fn balance_report(real: &Dataset, synthetic: &Dataset, columns: &[String]) -> Result<Vec<BalanceEntry>> {
    columns
        .iter()
        .map(|name| {
            let col = real.schema().require(name)?;
            let spec: &ColumnSpec = &real.schema().columns()[col];
            if !spec.is_discrete() {
                return Err(EvalError::InvalidParam(format!(
                    "balance report needs a categorical column, `{name}` is numeric"
                )));
            }
            let syn_col = synthetic.schema().require(name)?;
            if synthetic.schema().columns()[syn_col] != *spec {
                return Err(EvalError::IncompatibleColumn { column: name.clone() });
            }
            let (level, real_share) = data::majority_share(real, col).ok_or(EvalError::Empty)?;
            Ok(BalanceEntry {
                column: name.clone(),
                majority_level: spec.categories[level as usize].clone(),
                real_share,
                synthetic_share: data::level_share(synthetic, syn_col, level),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Schema, Value};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (si, li) in scores.iter().zip(labels) {
            for (sj, lj) in scores.iter().zip(labels) {
                if *li && !*lj {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_fixtures() {
        let s = [0.9, 0.8, 0.3, 0.2];
        assert_eq!(auroc(&s, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&s, &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.4; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&s, &[true; 4]), Err(EvalError::SingleClass)));
    }

    #[test]
    fn auroc_matches_pair_count_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(2..60);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auroc(&scores, &labels).unwrap();
            assert!((a - brute_auroc(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn utility_hand_confusion_matrix() {
        let u = utility_from_scores(&[0.9, 0.6, 0.4], &[true, false, false], 0.5).unwrap();
        assert_eq!(u.precision, 0.5);
        assert_eq!(u.recall, 1.0);
        assert!((u.accuracy - 2.0 / 3.0).abs() < 1e-12);
        let perfect = utility_from_scores(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.auroc), (1.0, 1.0, 1.0));
        let flat = utility_from_scores(&[0.5; 4], &[true, false, true, false], 0.5).unwrap();
        assert_eq!(flat.auroc, 0.5);
    }

    fn toy(points: &[(f64, f64, bool)]) -> Dataset {
        let schema = Schema::new(vec![
            ColumnSpec::numeric("a"),
            ColumnSpec::numeric("b"),
            ColumnSpec::binary("y", "0", "1"),
        ])
        .unwrap();
        Dataset::new(
            schema,
            points
                .iter()
                .map(|(a, b, y)| vec![Value::Number(*a), Value::Number(*b), Value::Level(*y as u32)])
                .collect(),
        )
        .unwrap()
    }

    fn accuracy(c: &Classifier, ds: &Dataset) -> f64 {
        evaluate_utility(c, ds, "y", 0.5).unwrap().accuracy
    }

    #[test]
    fn logistic_separates_linear_toy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<(f64, f64, bool)> = (0..200)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let margin = a + 0.5 * b;
                let shift = if margin >= 0.0 { 0.2 } else { -0.2 };
                (a + shift, b, margin >= 0.0)
            })
            .collect();
        let ds = toy(&pts);
        let params = LogisticParams {
            max_iters: 500,
            ..LogisticParams::default()
        };
        let c = fit_logistic(&ds, "y", &params).unwrap();
        assert_eq!(accuracy(&c, &ds), 1.0);
    }

    #[test]
    fn logistic_rejects_single_class() {
        let ds = toy(&[(0.0, 1.0, true), (1.0, 0.0, true)]);
        assert!(matches!(
            fit_logistic(&ds, "y", &LogisticParams::default()),
            Err(EvalError::SingleClass)
        ));
        assert!(matches!(
            fit_logistic(&ds, "a", &LogisticParams::default()),
            Err(EvalError::NonBinaryLabel(_))
        ));
    }

    #[test]
    fn one_stump_learns_threshold_concept() {
        let pts: Vec<(f64, f64, bool)> = (0..40).map(|i| (i as f64, 0.0, i >= 20)).collect();
        let ds = toy(&pts);
        let c = fit_boosted_stumps(&ds, "y", &StumpParams { n_rounds: 1, shrinkage: 1.0 }).unwrap();
        assert_eq!(accuracy(&c, &ds), 1.0);
        assert!(fit_boosted_stumps(&ds, "y", &StumpParams { n_rounds: 1, shrinkage: 0.0 }).is_err());
        assert!(fit_boosted_stumps(&ds, "y", &StumpParams { n_rounds: 0, shrinkage: 0.5 }).is_err());
    }

    #[test]
    fn stumps_fit_diagonal_concept() {
        // a + b > 1 on the unit square: no single stump separates it.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<(f64, f64, bool)> = (0..400)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.gen(), rng.gen());
                (a, b, a + b > 1.0)
            })
            .collect();
        let ds = toy(&pts);
        let one = fit_boosted_stumps(&ds, "y", &StumpParams { n_rounds: 1, shrinkage: 1.0 }).unwrap();
        assert!(accuracy(&one, &ds) < 0.9);
        let many = fit_boosted_stumps(&ds, "y", &StumpParams { n_rounds: 50, shrinkage: 0.5 }).unwrap();
        assert!(accuracy(&many, &ds) > 0.9, "{}", accuracy(&many, &ds));
    }

    #[test]
    fn fidelity_extremes() {
        let a = toy(&[(0.0, 1.0, true), (1.0, 2.0, false), (2.0, 0.5, true)]);
        let f = fidelity(&a, &a).unwrap();
        assert!(f.numeric_ks.values().all(|v| *v == 0.0));
        assert!(f.categorical_tv.values().all(|v| *v == 0.0));
        assert_eq!(f.correlation_max_abs_diff, 0.0);

        let shifted = toy(&[(1e6, 1.0, false), (1e6 + 1.0, 2.0, false), (1e6 + 2.0, 0.5, false)]);
        let f = fidelity(&a, &shifted).unwrap();
        assert_eq!(f.numeric_ks["a"], 1.0);
        let all_pos = toy(&[(0.0, 1.0, true), (0.0, 1.0, true)]);
        let all_neg = toy(&[(0.0, 1.0, false)]);
        assert_eq!(fidelity(&all_pos, &all_neg).unwrap().categorical_tv["y"], 1.0);
    }

    #[test]
    fn balance_report_identity_and_numeric_error() {
        let a = toy(&[(0.0, 1.0, true), (1.0, 2.0, false), (2.0, 0.5, true)]);
        let r = balance_report(&a, &a, &["y".to_string()]).unwrap();
        assert_eq!(r[0].majority_level, "1");
        assert_eq!(r[0].real_share, r[0].synthetic_share);
        assert!(balance_report(&a, &a, &["a".to_string()]).is_err());
    }
}
