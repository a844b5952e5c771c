//! Plug-in estimation of total variation and its direct / indirect /
//! spurious decomposition over the standard fairness model.
//!
//! All quantities are cell estimates over discretized `(x, z, w)`:
//! `mu(x, z, w) = E[y | x, z, w]`, `P(z | x, w)` and `P(w | x)`. With
//! `A(w) = sum_z P(z | x1, w) mu(x1, z, w)`:
//!
//! ```text
//! de = sum_w P(w|x0) sum_z P(z|x0,w) [mu(x1,z,w) - mu(x0,z,w)]
//! ie = sum_w P(w|x0) sum_z [P(z|x0,w) - P(z|x1,w)] mu(x1,z,w)
//! se = sum_w [P(w|x0) - P(w|x1)] A(w)
//! tv = de - ie - se
//! ```
//!
//! The last line telescopes to `E[y|x1] - E[y|x0]` under the plug-ins, so
//! the decomposition identity holds by construction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::predictive::{Scorer, Trainer};
use super::{EvalError, Result};
use crate::data::{self, BinningPolicy, Dataset, SfmRoles};
use crate::stats;

/// Largest joint (z, w) space the estimator accepts.
pub const MAX_CELLS: usize = 1_000_000;

pub const DEFAULT_SMOOTHING: f64 = 0.5;

/// What the effects are measured on.
#[derive(Debug, Clone, PartialEq)]
pub enum EffectTarget {
    /// The binary outcome column itself.
    Outcome,
    /// Per-row scores in `[0, 1]`, e.g. classifier probabilities.
    Scores(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectModel {
    x_levels: usize,
    nz: usize,
    nw: usize,
    smoothing: f64,
    /// `[x][w]`
    p_w_given_x: Vec<f64>,
    /// `[x][w][z]`
    p_z_given_xw: Vec<f64>,
    /// `[x][w][z]`
    mu: Vec<f64>,
    /// Weighted support per `[x][w][z]` cell.
    support: Vec<f64>,
    x_mass: Vec<f64>,
    group_means: Vec<f64>,
    global_mean: f64,
    level_names: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSd {
    pub tv: f64,
    pub de: f64,
    pub ie: f64,
    pub se: f64,
    pub raw_tv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalEffects {
    pub tv: f64,
    pub de: f64,
    pub ie: f64,
    pub se: f64,
    /// Difference of empirical group means of the target.
    pub raw_tv: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd: Option<EffectSd>,
}

impl EffectModel {
    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// `(mediator cells, confounder cells)`.
    pub fn cells(&self) -> (usize, usize) {
        (self.nz, self.nw)
    }

    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }

    fn xw(&self, x: usize, w: usize) -> usize {
        x * self.nw + w
    }

    fn xwz(&self, x: usize, w: usize, z: usize) -> usize {
        (x * self.nw + w) * self.nz + z
    }

    pub fn p_w_given_x(&self, x: u32, w: usize) -> f64 {
        self.p_w_given_x[self.xw(x as usize, w)]
    }

    pub fn p_z_given_xw(&self, x: u32, w: usize, z: usize) -> f64 {
        self.p_z_given_xw[self.xwz(x as usize, w, z)]
    }

    pub fn mu(&self, x: u32, w: usize, z: usize) -> f64 {
        self.mu[self.xwz(x as usize, w, z)]
    }

    pub fn support(&self, x: u32, w: usize, z: usize) -> f64 {
        self.support[self.xwz(x as usize, w, z)]
    }
}

/// Fits cell estimates with Laplace smoothing `smoothing` on the
/// conditionals and shrinkage of `mu` toward the global target mean with
/// weight `smoothing / (n_cell + smoothing)`.
pub fn fit_effect_model(
    dataset: &Dataset,
    roles: &SfmRoles,
    target: &EffectTarget,
    binning: &BinningPolicy,
    smoothing: f64,
) -> Result<EffectModel> {
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(EvalError::InvalidParam("smoothing must be finite and >= 0".into()));
    }
    if dataset.is_empty() {
        return Err(EvalError::Empty);
    }
    let resolved = roles.resolve(dataset)?;
    let binned = data::discretize(dataset, binning)?;
    let schema = binned.schema();
    let sens_spec = &schema.columns()[resolved.sensitive];
    let x_counts = binned.level_counts(resolved.sensitive);
    for x in [resolved.x0, resolved.x1] {
        if x_counts[x as usize] == 0 {
            return Err(EvalError::MissingLevel(sens_spec.categories[x as usize].clone()));
        }
    }
    let cards = |cols: &[usize]| -> Result<Vec<usize>> {
        cols.iter()
            .map(|&c| {
                let spec = &schema.columns()[c];
                if spec.is_discrete() {
                    Ok(spec.cardinality())
                } else {
                    Err(EvalError::Unbinned(spec.name.clone()))
                }
            })
            .collect()
    };
    let z_cards = cards(&resolved.mediators)?;
    let w_cards = cards(&resolved.confounders)?;
    let nz = z_cards.iter().try_fold(1usize, |a, c| a.checked_mul(*c));
    let nw = w_cards.iter().try_fold(1usize, |a, c| a.checked_mul(*c));
    let (nz, nw) = match (nz, nw) {
        (Some(z), Some(w)) if z.checked_mul(w).is_some_and(|c| c <= MAX_CELLS) => (z, w),
        _ => return Err(EvalError::TooManyCells(nz.unwrap_or(usize::MAX).saturating_mul(nw.unwrap_or(usize::MAX)))),
    };

    let y: Vec<f64> = match target {
        EffectTarget::Outcome => super::predictive::binary_labels(&binned, &roles.outcome)?
            .into_iter()
            .map(|b| f64::from(b as u8))
            .collect(),
        EffectTarget::Scores(s) => {
            if s.len() != binned.len() {
                return Err(EvalError::ScoreLength {
                    expected: binned.len(),
                    found: s.len(),
                });
            }
            if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(EvalError::InvalidParam("scores must lie in [0, 1]".into()));
            }
            s.clone()
        }
    };

    let x_levels = sens_spec.cardinality();
    let mut n_xw = vec![0.0; x_levels * nw];
    let mut n_xwz = vec![0.0; x_levels * nw * nz];
    let mut s_xwz = vec![0.0; x_levels * nw * nz];
    let mut x_mass = vec![0.0; x_levels];
    let mut x_sum = vec![0.0; x_levels];
    let (mut total_w, mut total_s) = (0.0, 0.0);
    for (i, row) in binned.rows().iter().enumerate() {
        let wt = binned.weight(i);
        let x = row[resolved.sensitive].level().expect("discrete") as usize;
        let index = |cols: &[usize], cards: &[usize]| {
            cols.iter()
                .zip(cards)
                .fold(0usize, |a, (&c, &k)| a * k + row[c].level().expect("discrete") as usize)
        };
        let w = index(&resolved.confounders, &w_cards);
        let z = index(&resolved.mediators, &z_cards);
        n_xw[x * nw + w] += wt;
        n_xwz[(x * nw + w) * nz + z] += wt;
        s_xwz[(x * nw + w) * nz + z] += wt * y[i];
        x_mass[x] += wt;
        x_sum[x] += wt * y[i];
        total_w += wt;
        total_s += wt * y[i];
    }
    if total_w <= 0.0 {
        return Err(EvalError::InvalidParam("total weight is zero".into()));
    }
    let global_mean = total_s / total_w;

    let mut warnings = Vec::new();
    let mut p_w_given_x = vec![0.0; x_levels * nw];
    for x in 0..x_levels {
        let den = x_mass[x] + smoothing * nw as f64;
        for w in 0..nw {
            p_w_given_x[x * nw + w] = if den > 0.0 {
                (n_xw[x * nw + w] + smoothing) / den
            } else {
                1.0 / nw as f64
            };
        }
    }
    let mut empty_conditionals = 0usize;
    let mut empty_means = 0usize;
    let mut p_z_given_xw = vec![0.0; x_levels * nw * nz];
    let mut mu = vec![0.0; x_levels * nw * nz];
    for x in 0..x_levels {
        for w in 0..nw {
            let den = n_xw[x * nw + w] + smoothing * nz as f64;
            if den <= 0.0 && x_mass[x] > 0.0 {
                empty_conditionals += 1;
            }
            for z in 0..nz {
                let c = (x * nw + w) * nz + z;
                p_z_given_xw[c] = if den > 0.0 {
                    (n_xwz[c] + smoothing) / den
                } else {
                    1.0 / nz as f64
                };
                let m_den = n_xwz[c] + smoothing;
                mu[c] = if m_den > 0.0 {
                    (s_xwz[c] + smoothing * global_mean) / m_den
                } else {
                    if x_mass[x] > 0.0 {
                        empty_means += 1;
                    }
                    global_mean
                };
            }
        }
    }
    if empty_conditionals > 0 {
        let msg = format!("{empty_conditionals} empty (x, w) cells: P(z | x, w) set uniform");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    if empty_means > 0 {
        let msg = format!("{empty_means} empty (x, z, w) cells: target mean set to the global mean");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let group_means = x_sum
        .iter()
        .zip(&x_mass)
        .map(|(s, m)| if *m > 0.0 { s / m } else { global_mean })
        .collect();

    Ok(EffectModel {
        x_levels,
        nz,
        nw,
        smoothing,
        p_w_given_x,
        p_z_given_xw,
        mu,
        support: n_xwz,
        x_mass,
        group_means,
        global_mean,
        level_names: sens_spec.categories.clone(),
        warnings,
    })
}

/// Decomposes the contrast `x1` vs `x0` (level indices of the sensitive column).
pub fn estimate_effects(model: &EffectModel, x0: u32, x1: u32) -> Result<CausalEffects> {
    for x in [x0, x1] {
        if x as usize >= model.x_levels || model.x_mass[x as usize] <= 0.0 {
            let name = model
                .level_names
                .get(x as usize)
                .cloned()
                .unwrap_or_else(|| format!("#{x}"));
            return Err(EvalError::MissingLevel(name));
        }
    }
    let (mut de, mut ie, mut se) = (0.0, 0.0, 0.0);
    // Plug-in E[y | x1] and E[y | x0], accumulated separately from the
    // components so the identity tv = de - ie - se is a real check.
    let (mut total1, mut total0) = (0.0, 0.0);
    for w in 0..model.nw {
        let a0 = model.p_w_given_x(x0, w);
        let a1 = model.p_w_given_x(x1, w);
        let (mut de_w, mut ie_w, mut inner1, mut inner0) = (0.0, 0.0, 0.0, 0.0);
        for z in 0..model.nz {
            let pz0 = model.p_z_given_xw(x0, w, z);
            let pz1 = model.p_z_given_xw(x1, w, z);
            let mu1 = model.mu(x1, w, z);
            let mu0 = model.mu(x0, w, z);
            de_w += pz0 * (mu1 - mu0);
            ie_w += (pz0 - pz1) * mu1;
            inner1 += pz1 * mu1;
            inner0 += pz0 * mu0;
        }
        de += a0 * de_w;
        ie += a0 * ie_w;
        se += (a0 - a1) * inner1;
        total1 += a1 * inner1;
        total0 += a0 * inner0;
    }
    Ok(CausalEffects {
        tv: total1 - total0,
        de,
        ie,
        se,
        raw_tv: model.group_means[x1 as usize] - model.group_means[x0 as usize],
        sd: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Classifier scores on the held-out split.
    #[default]
    Scores,
    /// The outcome column of the held-out split.
    Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepeatOptions {
    pub n_repeats: usize,
    pub test_fraction: f64,
    pub smoothing: f64,
    pub binning: BinningPolicy,
    pub target: TargetKind,
    /// Reuse one split for every repeat.
    pub fixed_split: bool,
}

impl Default for RepeatOptions {
    fn default() -> Self {
        Self {
            n_repeats: 5,
            test_fraction: 0.3,
            smoothing: DEFAULT_SMOOTHING,
            binning: BinningPolicy::default(),
            target: TargetKind::Scores,
            fixed_split: false,
        }
    }
}

/// Repeats split / train / score / estimate with per-repeat seeds and
/// returns the componentwise mean with sample standard deviations.
pub fn repeat_effects(
    dataset: &Dataset,
    roles: &SfmRoles,
    trainer: &dyn Trainer,
    options: &RepeatOptions,
    seed: u64,
) -> Result<CausalEffects> {
    if options.n_repeats < 2 {
        return Err(EvalError::InvalidParam("n_repeats must be at least 2".into()));
    }
    // Pin the contrast levels on the full data so every repeat agrees.
    let resolved = roles.resolve(dataset)?;
    let sens = &dataset.schema().columns()[resolved.sensitive];
    let pinned = roles.clone().with_levels(
        &sens.categories[resolved.x0 as usize],
        &sens.categories[resolved.x1 as usize],
    );

    let runs: Vec<Result<CausalEffects>> = (0..options.n_repeats)
        .into_par_iter()
        .map(|r| {
            let split_seed = if options.fixed_split {
                seed
            } else {
                crate::derive_seed(seed, r as u64)
            };
            let (train, test) = data::split(dataset, options.test_fraction, split_seed)?;
            let target = match options.target {
                TargetKind::Outcome => EffectTarget::Outcome,
                TargetKind::Scores => {
                    let clf = trainer.train(&train, &roles.outcome)?;
                    EffectTarget::Scores(clf.score(&test)?)
                }
            };
            let model = fit_effect_model(&test, &pinned, &target, &options.binning, options.smoothing)?;
            estimate_effects(&model, resolved.x0, resolved.x1)
        })
        .collect();

    let mut effects = Vec::with_capacity(runs.len());
    for (r, run) in runs.into_iter().enumerate() {
        effects.push(run.map_err(|e| EvalError::Repeat {
            repeat: r,
            source: Box::new(e),
        })?);
    }
    let pick = |f: fn(&CausalEffects) -> f64| -> (f64, f64) {
        let v: Vec<f64> = effects.iter().map(f).collect();
        (stats::mean(&v), stats::sample_sd(&v))
    };
    let (de, de_sd) = pick(|e| e.de);
    let (ie, ie_sd) = pick(|e| e.ie);
    let (se, se_sd) = pick(|e| e.se);
    let (raw_tv, raw_sd) = pick(|e| e.raw_tv);
    let (_, tv_sd) = pick(|e| e.tv);
    Ok(CausalEffects {
        // The mean of the identity is the identity of the means.
        tv: de - ie - se,
        de,
        ie,
        se,
        raw_tv,
        sd: Some(EffectSd {
            tv: tv_sd,
            de: de_sd,
            ie: ie_sd,
            se: se_sd,
            raw_tv: raw_sd,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnSpec, Schema, Value};
    use crate::eval::predictive::TrainerConfig;
    use crate::scm::DiscreteScm;

    const NO_W: &str = r#"
        [[variables]]
        name = "x"
        role = "sensitive"
        levels = ["0", "1"]
        cpt = [[0.5, 0.5]]
        [[variables]]
        name = "z"
        role = "mediator"
        levels = ["0", "1"]
        parents = ["x"]
        cpt = [[0.8, 0.2], [0.2, 0.8]]
        [[variables]]
        name = "y"
        role = "outcome"
        levels = ["0", "1"]
        parents = ["x", "z"]
        cpt = [[0.9, 0.1], [0.6, 0.4], [0.4, 0.6], [0.1, 0.9]]
    "#;

    fn tiny() -> (Dataset, SfmRoles) {
        let schema = Schema::new(vec![
            ColumnSpec::binary("x", "0", "1"),
            ColumnSpec::binary("z", "0", "1"),
            ColumnSpec::binary("y", "0", "1"),
        ])
        .unwrap();
        let rows = [
            (0, 0, 0),
            (0, 0, 1),
            (0, 1, 1),
            (1, 1, 1),
            (1, 1, 0),
            (1, 1, 1),
            (0, 0, 0),
        ];
        let ds = Dataset::new(
            schema,
            rows.iter()
                .map(|(x, z, y)| vec![Value::Level(*x), Value::Level(*z), Value::Level(*y)])
                .collect(),
        )
        .unwrap();
        (ds, SfmRoles::new("x", &["z"], "y").with_levels("0", "1"))
    }

    #[test]
    fn zero_smoothing_gives_empirical_means() {
        let (ds, roles) = tiny();
        let m = fit_effect_model(&ds, &roles, &EffectTarget::Outcome, &BinningPolicy::default(), 0.0).unwrap();
        assert!((m.mu(0, 0, 0) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.mu(0, 0, 1), 1.0);
        assert!((m.mu(1, 0, 1) - 2.0 / 3.0).abs() < 1e-12);
        // (x=1, z=0) is empty: documented fallbacks.
        assert_eq!(m.mu(1, 0, 0), m.global_mean());
        assert!(!m.warnings.is_empty());
        assert!((m.p_z_given_xw(0, 0, 0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_cell_mean_shrinks_to_global_mean() {
        let (ds, roles) = tiny();
        let m = fit_effect_model(&ds, &roles, &EffectTarget::Outcome, &BinningPolicy::default(), 0.5).unwrap();
        assert!((m.mu(1, 0, 0) - m.global_mean()).abs() < 1e-12);
        let total: f64 = (0..2).map(|z| m.p_z_given_xw(1, 0, z)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_smoothing_full_support_matches_raw_tv() {
        let scm = DiscreteScm::from_toml_str(NO_W).unwrap();
        let ds = scm.sample(2000, 4).unwrap();
        let m = fit_effect_model(&ds, &scm.roles(), &EffectTarget::Outcome, &BinningPolicy::default(), 0.0).unwrap();
        let e = estimate_effects(&m, 0, 1).unwrap();
        assert!((e.tv - e.raw_tv).abs() < 1e-9);
        assert!((e.tv - (e.de - e.ie - e.se)).abs() < 1e-12);
    }

    #[test]
    fn inert_pathways_give_zero() {
        let (ds, roles) = tiny();
        // Constant scores: mu independent of x; the remaining terms cancel.
        let scores = EffectTarget::Scores(vec![0.3; ds.len()]);
        let m = fit_effect_model(&ds, &roles, &scores, &BinningPolicy::default(), 0.5).unwrap();
        let e = estimate_effects(&m, 0, 1).unwrap();
        for v in [e.tv, e.de, e.ie, e.se] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn missing_level_and_bad_scores() {
        let (ds, roles) = tiny();
        let only0 = ds.select(&[0, 1, 2]);
        assert!(matches!(
            fit_effect_model(&only0, &roles, &EffectTarget::Outcome, &BinningPolicy::default(), 0.5),
            Err(EvalError::MissingLevel(_))
        ));
        assert!(fit_effect_model(&ds, &roles, &EffectTarget::Scores(vec![2.0; 7]), &BinningPolicy::default(), 0.5).is_err());
    }

    #[test]
    fn numeric_confounder_requires_binning() {
        let schema = Schema::new(vec![
            ColumnSpec::binary("x", "0", "1"),
            ColumnSpec::numeric("age"),
            ColumnSpec::binary("y", "0", "1"),
        ])
        .unwrap();
        let rows = (0..20)
            .map(|i| vec![Value::Level(i % 2), Value::Number(i as f64), Value::Level((i / 3) % 2)])
            .collect();
        let ds = Dataset::new(schema, rows).unwrap();
        let roles = SfmRoles::new("x", &[], "y").with_levels("0", "1");
        assert!(matches!(
            fit_effect_model(&ds, &roles, &EffectTarget::Outcome, &BinningPolicy::default(), 0.5),
            Err(EvalError::Unbinned(_))
        ));
        let binning = BinningPolicy::new(data::BinStrategy::Quantile).with_column("age", data::BinSpec::Count(4));
        let m = fit_effect_model(&ds, &roles, &EffectTarget::Outcome, &binning, 0.5).unwrap();
        assert_eq!(m.cells(), (1, 4));
    }

    #[test]
    fn repeats_need_two() {
        let scm = DiscreteScm::from_toml_str(NO_W).unwrap();
        let ds = scm.sample(500, 1).unwrap();
        let opts = RepeatOptions {
            n_repeats: 1,
            ..RepeatOptions::default()
        };
        assert!(repeat_effects(&ds, &scm.roles(), &TrainerConfig::default(), &opts, 1).is_err());
    }

    #[test]
    fn fixed_split_deterministic_classifier_has_zero_sd() {
        let scm = DiscreteScm::from_toml_str(NO_W).unwrap();
        let ds = scm.sample(2000, 1).unwrap();
        let opts = RepeatOptions {
            n_repeats: 3,
            fixed_split: true,
            ..RepeatOptions::default()
        };
        let e = repeat_effects(&ds, &scm.roles(), &TrainerConfig::default(), &opts, 9).unwrap();
        let sd = e.sd.unwrap();
        assert_eq!((sd.tv, sd.de, sd.ie, sd.se), (0.0, 0.0, 0.0, 0.0));
    }
}
