//! Preprocessing bias mitigation: suppression, correlation remover,
//! disparate impact remover and reweighing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ColumnKind, DataError, Dataset, SfmRoles, Value};
use crate::stats;

pub const DEFAULT_SUPPRESSION_THRESHOLD: f64 = 0.45;

#[derive(Debug, Error)]
pub enum MitigationError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("suppression would leave no feature columns")]
    NoFeaturesLeft,
    #[error("no numeric feature columns to transform")]
    NoNumericFeatures,
    #[error("sensitive indicators are rank deficient (fewer than two observed levels)")]
    RankDeficient,
    #[error("group `{group}` has {rows} rows; quantile repair needs at least 2")]
    SmallGroup { group: String, rows: usize },
    #[error("no rows with {sensitive} = `{level}` and outcome = `{label}`")]
    EmptyCell {
        sensitive: String,
        level: String,
        label: String,
    },
    #[error("outcome has a single class")]
    SingleClass,
    #[error("unknown mitigation method `{0}` (valid: sup, cor, dir, rw)")]
    UnknownMethod(String),
}

pub type Result<T, E = MitigationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sup,
    Cor,
    Dir,
    Rw,
}

impl FromStr for Method {
    type Err = MitigationError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sup" => Ok(Method::Sup),
            "cor" => Ok(Method::Cor),
            "dir" => Ok(Method::Dir),
            "rw" => Ok(Method::Rw),
            _ => Err(MitigationError::UnknownMethod(s.to_string())),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sup => "sup",
            Method::Cor => "cor",
            Method::Dir => "dir",
            Method::Rw => "rw",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnAssociation {
    pub column: String,
    /// Association with the sensitive column; absent for the sensitive
    /// column itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub association: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationAudit {
    pub method: Method,
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<ColumnAssociation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub altered: Vec<String>,
    /// Reweighing: weight per `sensitive=level,outcome=label` cell.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub cell_weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MitigationOutcome {
    pub dataset: Dataset,
    pub audit: MitigationAudit,
}

fn feature_columns(dataset: &Dataset, roles: &SfmRoles) -> Vec<usize> {
    dataset
        .schema()
        .columns()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.name != roles.sensitive && c.name != roles.outcome)
        .map(|(i, _)| i)
        .collect()
}

fn sensitive_levels(dataset: &Dataset, roles: &SfmRoles) -> Result<(usize, Vec<u32>, usize)> {
    roles.validate(dataset.schema())?;
    let col = dataset.schema().require(&roles.sensitive)?;
    let k = dataset.schema().columns()[col].cardinality();
    Ok((col, dataset.column_levels(col), k))
}

/// Association of a feature column with the sensitive column: correlation
/// ratio for numeric features, Cramér's V for discrete ones.
pub fn association(dataset: &Dataset, roles: &SfmRoles, column: &str) -> Result<f64> {
    let (_, s, k) = sensitive_levels(dataset, roles)?;
    let col = dataset.schema().require(column)?;
    let spec = &dataset.schema().columns()[col];
    Ok(match spec.kind {
        ColumnKind::Numeric => stats::correlation_ratio(&s, k, &dataset.column_f64(col)),
        _ => stats::cramers_v(&s, k, &dataset.column_levels(col), spec.cardinality()),
    })
}

/// Drops the sensitive column and every feature whose association with it
/// strictly exceeds `threshold`.
pub fn suppress(dataset: &Dataset, roles: &SfmRoles, threshold: f64) -> Result<MitigationOutcome> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(MitigationError::InvalidParam(format!(
            "suppression threshold {threshold} outside (0, 1]"
        )));
    }
    let features = feature_columns(dataset, roles);
    let mut dropped = vec![ColumnAssociation {
        column: roles.sensitive.clone(),
        association: None,
    }];
    for &c in &features {
        let name = &dataset.schema().columns()[c].name;
        let a = association(dataset, roles, name)?;
        if a > threshold {
            dropped.push(ColumnAssociation {
                column: name.clone(),
                association: Some(a),
            });
        }
    }
    if features.len() + 1 == dropped.len() {
        return Err(MitigationError::NoFeaturesLeft);
    }
    let names: Vec<&str> = dropped.iter().map(|d| d.column.as_str()).collect();
    let out = dataset.drop_columns(&names)?;
    Ok(MitigationOutcome {
        dataset: out,
        audit: MitigationAudit {
            method: Method::Sup,
            params: BTreeMap::from([("threshold".into(), threshold)]),
            dropped,
            altered: Vec::new(),
            cell_weights: BTreeMap::new(),
        },
    })
}

/// Residualizes each numeric feature on the centered sensitive indicators:
/// `v' = v - alpha * S beta`, `beta` the least-squares fit of centered `v`.
pub fn correlation_remover(dataset: &Dataset, roles: &SfmRoles, alpha: f64) -> Result<MitigationOutcome> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MitigationError::InvalidParam(format!("alpha {alpha} outside [0, 1]")));
    }
    let numeric: Vec<usize> = feature_columns(dataset, roles)
        .into_iter()
        .filter(|&c| dataset.schema().columns()[c].kind == ColumnKind::Numeric)
        .collect();
    if numeric.is_empty() {
        return Err(MitigationError::NoNumericFeatures);
    }
    let (_, s, k) = sensitive_levels(dataset, roles)?;
    let counts = {
        let mut c = vec![0usize; k];
        for l in &s {
            c[*l as usize] += 1;
        }
        c
    };
    // Indicators for every observed level but the first.
    let observed: Vec<u32> = (0..k as u32).filter(|l| counts[*l as usize] > 0).collect();
    if observed.len() < 2 {
        return Err(MitigationError::RankDeficient);
    }
    let n = dataset.len();
    let kept = &observed[1..];
    let mut sm = DMatrix::<f64>::zeros(n, kept.len());
    for (j, level) in kept.iter().enumerate() {
        let mean = counts[*level as usize] as f64 / n as f64;
        for i in 0..n {
            sm[(i, j)] = f64::from(u8::from(s[i] == *level)) - mean;
        }
    }
    let gram = sm.transpose() * &sm;
    let chol = gram.cholesky().ok_or(MitigationError::RankDeficient)?;

    let mut out = dataset.clone();
    let mut altered = Vec::new();
    for c in numeric {
        let v = dataset.column_f64(c);
        let m = stats::mean(&v);
        let centered = DVector::from_iterator(n, v.iter().map(|x| x - m));
        let beta = chol.solve(&(sm.transpose() * centered));
        let fitted = &sm * beta;
        let spec = dataset.schema().columns()[c].clone();
        altered.push(spec.name.clone());
        let values: Vec<Value> = v
            .iter()
            .zip(fitted.iter())
            .map(|(x, f)| {
                // Skipping a zero shift keeps the sign of -0.0.
                let shift = alpha * f;
                Value::Number(if shift == 0.0 { *x } else { x - shift })
            })
            .collect();
        out = out.map_column(c, spec, values)?;
    }
    Ok(MitigationOutcome {
        dataset: out,
        audit: MitigationAudit {
            method: Method::Cor,
            params: BTreeMap::from([("alpha".into(), alpha)]),
            dropped: Vec::new(),
            altered,
            cell_weights: BTreeMap::new(),
        },
    })
}

/// Rank-preserving quantile repair: each value `x` of group `g` maps to
/// `(1 - lambda) x + lambda Q(F_g(x))` with `Q` the median over groups of
/// the group quantile functions.
pub fn disparate_impact_remover(dataset: &Dataset, roles: &SfmRoles, repair_level: f64) -> Result<MitigationOutcome> {
    if !(0.0..=1.0).contains(&repair_level) {
        return Err(MitigationError::InvalidParam(format!(
            "repair level {repair_level} outside [0, 1]"
        )));
    }
    let (sens_col, s, k) = sensitive_levels(dataset, roles)?;
    let level_names = &dataset.schema().columns()[sens_col].categories;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, l) in s.iter().enumerate() {
        members[*l as usize].push(i);
    }
    for (g, rows) in members.iter().enumerate() {
        if rows.len() == 1 {
            return Err(MitigationError::SmallGroup {
                group: level_names[g].clone(),
                rows: 1,
            });
        }
    }
    let groups: Vec<usize> = (0..k).filter(|g| !members[*g].is_empty()).collect();

    let mut out = dataset.clone();
    let mut altered = Vec::new();
    for c in feature_columns(dataset, roles) {
        let spec = dataset.schema().columns()[c].clone();
        if spec.kind != ColumnKind::Numeric {
            continue;
        }
        let v = dataset.column_f64(c);
        let sorted: Vec<Vec<f64>> = (0..k)
            .map(|g| {
                let mut s: Vec<f64> = members[g].iter().map(|&i| v[i]).collect();
                s.sort_by(f64::total_cmp);
                s
            })
            .collect();
        let median_quantile = |q: f64| -> f64 {
            let mut qs: Vec<f64> = groups
                .iter()
                .map(|&g| stats::quantile_sorted(&sorted[g], q))
                .collect();
            qs.sort_by(f64::total_cmp);
            let m = qs.len();
            if m % 2 == 1 {
                qs[m / 2]
            } else {
                0.5 * (qs[m / 2 - 1] + qs[m / 2])
            }
        };
        let mut repaired = v.clone();
        for &g in &groups {
            let sg = &sorted[g];
            let last = (sg.len() - 1) as f64;
            for &i in &members[g] {
                let x = v[i];
                // Mid-rank of x within its group, so ties share one quantile.
                let first = sg.partition_point(|y| *y < x);
                let end = sg.partition_point(|y| *y <= x);
                let q = 0.5 * (first + end - 1) as f64 / last;
                repaired[i] = (1.0 - repair_level) * x + repair_level * median_quantile(q);
            }
        }
        altered.push(spec.name.clone());
        out = out.map_column(c, spec, repaired.into_iter().map(Value::Number))?;
    }
    Ok(MitigationOutcome {
        dataset: out,
        audit: MitigationAudit {
            method: Method::Dir,
            params: BTreeMap::from([("repair_level".into(), repair_level)]),
            dropped: Vec::new(),
            altered,
            cell_weights: BTreeMap::new(),
        },
    })
}

/// Attaches weights `P(a) P(y) / P(a, y)` so that the weighted sample has
/// attribute-label independence.
pub fn reweigh(dataset: &Dataset, roles: &SfmRoles) -> Result<MitigationOutcome> {
    let (sens_col, s, k) = sensitive_levels(dataset, roles)?;
    let y_col = dataset.schema().require(&roles.outcome)?;
    let y = dataset.column_levels(y_col);
    let n = dataset.len();
    let mut n_a = vec![0usize; k];
    let mut n_y = [0usize; 2];
    let mut n_ay = vec![[0usize; 2]; k];
    for (a, yy) in s.iter().zip(&y) {
        n_a[*a as usize] += 1;
        n_y[*yy as usize] += 1;
        n_ay[*a as usize][*yy as usize] += 1;
    }
    if n_y[0] == 0 || n_y[1] == 0 {
        return Err(MitigationError::SingleClass);
    }
    let sens_spec = &dataset.schema().columns()[sens_col];
    let y_spec = &dataset.schema().columns()[y_col];
    let mut cell_weights = BTreeMap::new();
    let mut table = vec![[0.0f64; 2]; k];
    for a in (0..k).filter(|a| n_a[*a] > 0) {
        for yy in 0..2 {
            if n_ay[a][yy] == 0 {
                return Err(MitigationError::EmptyCell {
                    sensitive: roles.sensitive.clone(),
                    level: sens_spec.categories[a].clone(),
                    label: y_spec.categories[yy].clone(),
                });
            }
            let w = (n_a[a] as f64 * n_y[yy] as f64) / (n as f64 * n_ay[a][yy] as f64);
            table[a][yy] = w;
            cell_weights.insert(
                format!(
                    "{}={},{}={}",
                    roles.sensitive, sens_spec.categories[a], roles.outcome, y_spec.categories[yy]
                ),
                w,
            );
        }
    }
    let weights = s
        .iter()
        .zip(&y)
        .map(|(a, yy)| table[*a as usize][*yy as usize])
        .collect();
    Ok(MitigationOutcome {
        dataset: dataset.clone().with_weights(weights)?,
        audit: MitigationAudit {
            method: Method::Rw,
            params: BTreeMap::new(),
            dropped: Vec::new(),
            altered: Vec::new(),
            cell_weights,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnSpec, Schema};

    fn ay_dataset(counts: [[usize; 2]; 2]) -> Dataset {
        let schema = Schema::new(vec![
            ColumnSpec::binary("a", "0", "1"),
            ColumnSpec::numeric("f"),
            ColumnSpec::binary("y", "0", "1"),
        ])
        .unwrap();
        let mut rows = Vec::new();
        for (a, row) in counts.iter().enumerate() {
            for (y, &c) in row.iter().enumerate() {
                for i in 0..c {
                    rows.push(vec![Value::Level(a as u32), Value::Number(i as f64), Value::Level(y as u32)]);
                }
            }
        }
        Dataset::new(schema, rows).unwrap()
    }

    fn roles() -> SfmRoles {
        SfmRoles::new("a", &[], "y").with_levels("0", "1")
    }

    #[test]
    fn reweigh_fixture_weights() {
        let ds = ay_dataset([[30, 10], [20, 40]]);
        let out = reweigh(&ds, &roles()).unwrap();
        let w = &out.audit.cell_weights;
        assert!((w["a=0,y=0"] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w["a=0,y=1"] - 2.0).abs() < 1e-12);
        assert!((w["a=1,y=0"] - 1.5).abs() < 1e-12);
        assert!((w["a=1,y=1"] - 0.75).abs() < 1e-12);
        assert_eq!(out.dataset.weights().unwrap().len(), 100);
    }

    #[test]
    fn reweigh_independent_sample_has_unit_weights() {
        let out = reweigh(&ay_dataset([[10, 30], [5, 15]]), &roles()).unwrap();
        assert!(out.dataset.weights().unwrap().iter().all(|w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn reweigh_errors() {
        assert!(matches!(
            reweigh(&ay_dataset([[10, 0], [5, 0]]), &roles()),
            Err(MitigationError::SingleClass)
        ));
        assert!(matches!(
            reweigh(&ay_dataset([[10, 0], [5, 3]]), &roles()),
            Err(MitigationError::EmptyCell { .. })
        ));
    }

    fn with_feature(s: &[u32], f: &[f64]) -> Dataset {
        let schema = Schema::new(vec![
            ColumnSpec::binary("a", "0", "1"),
            ColumnSpec::numeric("f"),
            ColumnSpec::numeric("g"),
            ColumnSpec::binary("y", "0", "1"),
        ])
        .unwrap();
        let rows = s
            .iter()
            .zip(f)
            .enumerate()
            .map(|(i, (a, v))| {
                vec![
                    Value::Level(*a),
                    Value::Number(*v),
                    Value::Number(((i * 7919) % 101) as f64),
                    Value::Level((i % 2) as u32),
                ]
            })
            .collect();
        Dataset::new(schema, rows).unwrap()
    }

    #[test]
    fn suppression_thresholds() {
        let s: Vec<u32> = (0..100).map(|i| (i % 2) as u32).collect();
        let copy: Vec<f64> = s.iter().map(|x| *x as f64).collect();
        let ds = with_feature(&s, &copy);
        let out = suppress(&ds, &roles(), 1.0).unwrap();
        assert_eq!(out.audit.dropped.len(), 1);
        assert_eq!(out.dataset.schema().len(), 3);
        let out = suppress(&ds, &roles(), 0.5).unwrap();
        let names: Vec<&str> = out.audit.dropped.iter().map(|d| d.column.as_str()).collect();
        assert_eq!(names, vec!["a", "f"]);
        // `g` is a scrambled index, nearly unrelated to the alternating `a`.
        assert!(association(&ds, &roles(), "g").unwrap() < 0.5);
        assert!(out.dataset.schema().index_of("g").is_some());
        assert!(suppress(&ds, &roles(), 0.0).is_err());
    }

    #[test]
    fn suppression_cannot_drop_everything() {
        let schema = Schema::new(vec![ColumnSpec::binary("a", "0", "1"), ColumnSpec::binary("y", "0", "1")]).unwrap();
        let ds = Dataset::new(schema, vec![vec![Value::Level(0), Value::Level(1)], vec![Value::Level(1), Value::Level(0)]]).unwrap();
        assert!(matches!(suppress(&ds, &roles(), 0.5), Err(MitigationError::NoFeaturesLeft)));
    }

    #[test]
    fn correlation_remover_projection() {
        let s: Vec<u32> = (0..50).map(|i| u32::from(i % 3 == 0)).collect();
        let copy: Vec<f64> = s.iter().map(|x| *x as f64).collect();
        let ds = with_feature(&s, &copy);
        assert_eq!(correlation_remover(&ds, &roles(), 0.0).unwrap().dataset, ds);
        let out = correlation_remover(&ds, &roles(), 1.0).unwrap().dataset;
        let f = out.column_f64(1);
        assert!(f.iter().all(|v| (v - f[0]).abs() < 1e-12));
        assert_eq!(out.column_levels(0), ds.column_levels(0));
    }

    #[test]
    fn correlation_remover_needs_two_levels() {
        let s = vec![1u32; 10];
        let ds = with_feature(&s, &[1.0; 10]);
        assert!(matches!(correlation_remover(&ds, &roles(), 1.0), Err(MitigationError::RankDeficient)));
    }

    #[test]
    fn dir_median_quantile_fixture() {
        let ds = with_feature(&[0, 0, 0, 1, 1, 1], &[1.0, 2.0, 3.0, 11.0, 12.0, 13.0]);
        assert_eq!(disparate_impact_remover(&ds, &roles(), 0.0).unwrap().dataset, ds);
        let out = disparate_impact_remover(&ds, &roles(), 1.0).unwrap().dataset;
        let f = out.column_f64(1);
        for (got, want) in f.iter().zip([6.0, 7.0, 8.0, 6.0, 7.0, 8.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn dir_rejects_singleton_group() {
        let ds = with_feature(&[0, 0, 1], &[1.0, 2.0, 3.0]);
        assert!(matches!(
            disparate_impact_remover(&ds, &roles(), 0.5),
            Err(MitigationError::SmallGroup { .. })
        ));
    }

    #[test]
    fn method_parsing() {
        assert_eq!("RW".parse::<Method>().unwrap(), Method::Rw);
        let err = "xyz".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("sup, cor, dir, rw"));
    }
}
