//! Discrete structural causal models: sampling, exact path-specific effects
//! by enumeration, and knob-controlled generation for the offline backend.
//!
//! # Definition file
//!
//! Models are written in TOML:
//!
//! ```toml
//! baseline = "0"          # x0 level of the sensitive variable (optional)
//! comparison = "1"        # x1 level (optional)
//!
//! [[knobs]]
//! name = "balance"
//! default = 0.0
//!
//! [[variables]]
//! name = "x"
//! role = "sensitive"      # sensitive | mediator | confounder | outcome
//! levels = ["0", "1"]
//! parents = []
//! cpt = [[{ biased = 0.8, fair = 0.5, knob = "balance" },
//!         { biased = 0.2, fair = 0.5, knob = "balance" }]]
//! ```
//!
//! `cpt` has one row per parent configuration, enumerated in mixed-radix
//! order with the first parent most significant. A row entry is either a
//! probability or `{ biased, fair, knob }`, which evaluates to
//! `(1 - k) * biased + k * fair` for knob value `k`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ColumnSpec, DataError, Dataset, Schema, SfmRoles, Value};

/// Largest joint (W, Z) space the exact enumeration accepts.
pub const MAX_ENUMERATION_CELLS: usize = 1_000_000;

const ROW_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("unknown knob `{0}`")]
    UnknownKnob(String),
    #[error("knob `{name}` = {value} outside [0, 1]")]
    KnobOutOfRange { name: String, value: f64 },
    #[error("variable `{variable}`, cpt row {row}: {reason}")]
    InvalidRow {
        variable: String,
        row: usize,
        reason: String,
    },
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error("joint (W, Z) space of {0} cells exceeds the enumeration limit")]
    TooLarge(usize),
    #[error("conditioning event {0} has zero probability")]
    ZeroProbabilityCell(String),
    #[error("failed to parse model definition: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScmRole {
    Sensitive,
    Mediator,
    Confounder,
    Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CptEntry {
    Fixed(f64),
    Knobbed { biased: f64, fair: f64, knob: String },
}

impl CptEntry {
    fn eval(&self, knobs: &BTreeMap<String, f64>) -> f64 {
        match self {
            CptEntry::Fixed(p) => *p,
            CptEntry::Knobbed { biased, fair, knob } => {
                let k = knobs[knob];
                (1.0 - k) * biased + k * fair
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmVariable {
    pub name: String,
    pub role: ScmRole,
    pub levels: Vec<String>,
    #[serde(default)]
    pub parents: Vec<String>,
    pub cpt: Vec<Vec<CptEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knob {
    pub name: String,
    #[serde(default)]
    pub default: f64,
}

/// Serialized form of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmDefinition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<String>,
    #[serde(default)]
    pub knobs: Vec<Knob>,
    pub variables: Vec<ScmVariable>,
}

/// A validated discrete SCM.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteScm {
    def: ScmDefinition,
    parent_idx: Vec<Vec<usize>>,
    sensitive: usize,
    outcome: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEffects {
    pub tv: f64,
    pub de: f64,
    pub ie: f64,
    pub se: f64,
}

impl DiscreteScm {
    pub fn new(def: ScmDefinition) -> Result<Self, ScmError> {
        let invalid = |m: String| Err(ScmError::Invalid(m));
        if def.variables.is_empty() {
            return invalid("no variables".into());
        }
        let mut knob_names = HashSet::new();
        for k in &def.knobs {
            if !knob_names.insert(k.name.as_str()) {
                return invalid(format!("duplicate knob `{}`", k.name));
            }
            check_knob(&k.name, k.default)?;
        }
        let mut parent_idx = Vec::with_capacity(def.variables.len());
        let mut referenced = HashSet::new();
        for (i, v) in def.variables.iter().enumerate() {
            if v.levels.len() < 2 {
                return invalid(format!("`{}` needs at least two levels", v.name));
            }
            if def.variables[..i].iter().any(|u| u.name == v.name) {
                return invalid(format!("duplicate variable `{}`", v.name));
            }
            let mut parents = Vec::with_capacity(v.parents.len());
            for p in &v.parents {
                match def.variables[..i].iter().position(|u| &u.name == p) {
                    Some(j) => parents.push(j),
                    None => {
                        return invalid(format!(
                            "parent `{p}` of `{}` is not declared before it",
                            v.name
                        ))
                    }
                }
            }
            let expected_rows: usize = parents
                .iter()
                .map(|&j| def.variables[j].levels.len())
                .product();
            if v.cpt.len() != expected_rows {
                return invalid(format!(
                    "`{}` has {} cpt rows, expected {expected_rows}",
                    v.name,
                    v.cpt.len()
                ));
            }
            for (r, row) in v.cpt.iter().enumerate() {
                if row.len() != v.levels.len() {
                    return Err(ScmError::InvalidRow {
                        variable: v.name.clone(),
                        row: r,
                        reason: format!("{} entries for {} levels", row.len(), v.levels.len()),
                    });
                }
                for e in row {
                    if let CptEntry::Knobbed { knob, .. } = e {
                        if !knob_names.contains(knob.as_str()) {
                            return Err(ScmError::UnknownKnob(knob.clone()));
                        }
                        referenced.insert(knob.clone());
                    }
                }
            }
            parent_idx.push(parents);
        }
        if let Some(k) = def.knobs.iter().find(|k| !referenced.contains(&k.name)) {
            return invalid(format!("knob `{}` is not referenced by any cpt", k.name));
        }
        let find_role = |role: ScmRole| -> Result<usize, ScmError> {
            let hits: Vec<usize> = def
                .variables
                .iter()
                .enumerate()
                .filter(|(_, v)| v.role == role)
                .map(|(i, _)| i)
                .collect();
            match hits.as_slice() {
                [one] => Ok(*one),
                _ => Err(ScmError::Invalid(format!(
                    "expected exactly one {role:?} variable, found {}",
                    hits.len()
                ))),
            }
        };
        let sensitive = find_role(ScmRole::Sensitive)?;
        let outcome = find_role(ScmRole::Outcome)?;
        if def.variables[outcome].levels.len() != 2 {
            return invalid("outcome must have exactly two levels".into());
        }
        let scm = Self {
            def,
            parent_idx,
            sensitive,
            outcome,
        };
        scm.roles().validate(&scm.schema()?)?;
        scm.resolve_cpts(&scm.default_knobs())?;
        Ok(scm)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScmError> {
        Self::new(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScmError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn definition(&self) -> &ScmDefinition {
        &self.def
    }

    pub fn variables(&self) -> &[ScmVariable] {
        &self.def.variables
    }

    pub fn knobs(&self) -> &[Knob] {
        &self.def.knobs
    }

    pub fn default_knobs(&self) -> BTreeMap<String, f64> {
        self.def
            .knobs
            .iter()
            .map(|k| (k.name.clone(), k.default))
            .collect()
    }

    /// Dataset schema: one discrete column per variable, in model order.
    pub fn schema(&self) -> Result<Schema, ScmError> {
        let cols = self
            .def
            .variables
            .iter()
            .map(|v| {
                if v.levels.len() == 2 {
                    ColumnSpec::binary(v.name.clone(), &v.levels[0], &v.levels[1])
                } else {
                    ColumnSpec::categorical(v.name.clone(), &v.levels)
                }
            })
            .collect();
        Ok(Schema::new(cols)?)
    }

    pub fn roles(&self) -> SfmRoles {
        let vars = &self.def.variables;
        let sens = &vars[self.sensitive];
        SfmRoles {
            sensitive: sens.name.clone(),
            baseline: Some(
                self.def
                    .baseline
                    .clone()
                    .unwrap_or_else(|| sens.levels[0].clone()),
            ),
            comparison: Some(
                self.def
                    .comparison
                    .clone()
                    .unwrap_or_else(|| sens.levels[1].clone()),
            ),
            mediators: vars
                .iter()
                .filter(|v| v.role == ScmRole::Mediator)
                .map(|v| v.name.clone())
                .collect(),
            outcome: vars[self.outcome].name.clone(),
            aggregate_rest: false,
        }
    }

    fn resolve_cpts(&self, knobs: &BTreeMap<String, f64>) -> Result<Vec<Vec<Vec<f64>>>, ScmError> {
        self.def
            .variables
            .iter()
            .map(|v| {
                v.cpt
                    .iter()
                    .enumerate()
                    .map(|(r, row)| {
                        let probs: Vec<f64> = row.iter().map(|e| e.eval(knobs)).collect();
                        let bad = |reason: String| ScmError::InvalidRow {
                            variable: v.name.clone(),
                            row: r,
                            reason,
                        };
                        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                            return Err(bad(format!("probability {p} outside [0, 1]")));
                        }
                        let sum: f64 = probs.iter().sum();
                        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                            return Err(bad(format!("row sums to {sum}")));
                        }
                        Ok(probs)
                    })
                    .collect()
            })
            .collect()
    }

    fn merged_knobs(&self, overrides: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>, ScmError> {
        let mut knobs = self.default_knobs();
        for (name, value) in overrides {
            if !knobs.contains_key(name) {
                return Err(ScmError::UnknownKnob(name.clone()));
            }
            check_knob(name, *value)?;
            knobs.insert(name.clone(), *value);
        }
        Ok(knobs)
    }

    fn parent_row(&self, var: usize, assignment: &[u32]) -> usize {
        self.parent_idx[var].iter().fold(0, |acc, &p| {
            acc * self.def.variables[p].levels.len() + assignment[p] as usize
        })
    }

    /// Draws `n` i.i.d. rows with knobs at their defaults.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset, ScmError> {
        self.mock_generate(&BTreeMap::new(), n, seed)
    }

    /// Draws `n` rows after overriding the given knobs.
    pub fn mock_generate(
        &self,
        knob_values: &BTreeMap<String, f64>,
        n: usize,
        seed: u64,
    ) -> Result<Dataset, ScmError> {
        if n == 0 {
            return Err(ScmError::EmptySample);
        }
        let knobs = self.merged_knobs(knob_values)?;
        let cpts = self.resolve_cpts(&knobs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nvars = self.def.variables.len();
        let mut rows = Vec::with_capacity(n);
        let mut assignment = vec![0u32; nvars];
        for _ in 0..n {
            for var in 0..nvars {
                let probs = &cpts[var][self.parent_row(var, &assignment)];
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut level = probs.len() - 1;
                for (l, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        level = l;
                        break;
                    }
                }
                // Never land on a zero-probability level through rounding.
                while probs[level] == 0.0 && level > 0 {
                    level -= 1;
                }
                assignment[var] = level as u32;
            }
            rows.push(assignment.iter().map(|&l| Value::Level(l)).collect());
        }
        Ok(Dataset::new(self.schema()?, rows)?)
    }

    /// Full joint distribution at the given knob values, indexed in
    /// mixed-radix order of the variables (first variable most significant).
    pub fn joint(&self, knob_values: &BTreeMap<String, f64>) -> Result<Vec<f64>, ScmError> {
        let cpts = self.resolve_cpts(&self.merged_knobs(knob_values)?)?;
        let cards: Vec<usize> = self.def.variables.iter().map(|v| v.levels.len()).collect();
        let total: usize = cards.iter().product();
        let mut joint = vec![0.0; total];
        let mut assignment = vec![0u32; cards.len()];
        for (cell, p_out) in joint.iter_mut().enumerate() {
            let mut rem = cell;
            for i in (0..cards.len()).rev() {
                assignment[i] = (rem % cards[i]) as u32;
                rem /= cards[i];
            }
            *p_out = (0..cards.len())
                .map(|v| cpts[v][self.parent_row(v, &assignment)][assignment[v] as usize])
                .product();
        }
        Ok(joint)
    }

    /// Exact TV/DE/IE/SE between sensitive levels `x0` and `x1` by
    /// enumeration of the joint at default knobs.
    pub fn exact_effects(&self, x0: &str, x1: &str) -> Result<GroundTruthEffects, ScmError> {
        self.exact_effects_with(&BTreeMap::new(), x0, x1)
    }

    pub fn exact_effects_with(
        &self,
        knob_values: &BTreeMap<String, f64>,
        x0: &str,
        x1: &str,
    ) -> Result<GroundTruthEffects, ScmError> {
        let vars = &self.def.variables;
        let level = |name: &str| -> Result<usize, ScmError> {
            vars[self.sensitive]
                .levels
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| ScmError::Invalid(format!("`{name}` is not a sensitive level")))
        };
        let (x0, x1) = (level(x0)?, level(x1)?);
        if x0 == x1 {
            return Err(ScmError::Invalid("contrast levels coincide".into()));
        }
        let cards: Vec<usize> = vars.iter().map(|v| v.levels.len()).collect();
        let w_vars: Vec<usize> = (0..vars.len())
            .filter(|&i| vars[i].role == ScmRole::Confounder)
            .collect();
        let z_vars: Vec<usize> = (0..vars.len())
            .filter(|&i| vars[i].role == ScmRole::Mediator)
            .collect();
        let nw: usize = w_vars.iter().map(|&i| cards[i]).product();
        let nz: usize = z_vars.iter().map(|&i| cards[i]).product();
        if nw.saturating_mul(nz) > MAX_ENUMERATION_CELLS {
            return Err(ScmError::TooLarge(nw.saturating_mul(nz)));
        }

        let joint = self.joint(knob_values)?;
        // Accumulate P(x, w), P(x, z, w) and P(x, z, w, y = 1) for x in {x0, x1}.
        let mut p_xw = vec![[0.0f64; 2]; nw];
        let mut p_xzw = vec![[0.0f64; 2]; nw * nz];
        let mut p_y_xzw = vec![[0.0f64; 2]; nw * nz];
        let mut assignment = vec![0usize; cards.len()];
        for (cell, &p) in joint.iter().enumerate() {
            let mut rem = cell;
            for i in (0..cards.len()).rev() {
                assignment[i] = rem % cards[i];
                rem /= cards[i];
            }
            let x = assignment[self.sensitive];
            let side = if x == x0 {
                0
            } else if x == x1 {
                1
            } else {
                continue;
            };
            let w = w_vars.iter().fold(0, |a, &i| a * cards[i] + assignment[i]);
            let z = z_vars.iter().fold(0, |a, &i| a * cards[i] + assignment[i]);
            p_xw[w][side] += p;
            p_xzw[w * nz + z][side] += p;
            if assignment[self.outcome] == 1 {
                p_y_xzw[w * nz + z][side] += p;
            }
        }
        let p_x = [
            p_xw.iter().map(|c| c[0]).sum::<f64>(),
            p_xw.iter().map(|c| c[1]).sum::<f64>(),
        ];
        if p_x[0] <= 0.0 || p_x[1] <= 0.0 {
            return Err(ScmError::ZeroProbabilityCell("P(X = x) for a contrast level".into()));
        }
        let p_z = |side: usize, w: usize, z: usize| -> Result<f64, ScmError> {
            if p_xw[w][side] <= 0.0 {
                return Err(ScmError::ZeroProbabilityCell(format!("(x{side}, w={w})")));
            }
            Ok(p_xzw[w * nz + z][side] / p_xw[w][side])
        };
        let mu = |side: usize, w: usize, z: usize| -> Result<f64, ScmError> {
            let d = p_xzw[w * nz + z][side];
            if d <= 0.0 {
                return Err(ScmError::ZeroProbabilityCell(format!("(x{side}, z={z}, w={w})")));
            }
            Ok(p_y_xzw[w * nz + z][side] / d)
        };

        let (mut de, mut ie, mut se) = (0.0, 0.0, 0.0);
        for w in 0..nw {
            let a0 = p_xw[w][0] / p_x[0];
            let a1 = p_xw[w][1] / p_x[1];
            if a0 == 0.0 && a1 == 0.0 {
                continue;
            }
            let mut inner1 = 0.0;
            let mut de_w = 0.0;
            let mut ie_w = 0.0;
            for z in 0..nz {
                let pz1 = p_z(1, w, z)?;
                let pz0 = if a0 > 0.0 { p_z(0, w, z)? } else { 0.0 };
                if pz1 == 0.0 && pz0 == 0.0 {
                    continue;
                }
                let mu1 = mu(1, w, z)?;
                inner1 += pz1 * mu1;
                ie_w += (pz0 - pz1) * mu1;
                if pz0 > 0.0 {
                    de_w += pz0 * (mu1 - mu(0, w, z)?);
                }
            }
            de += a0 * de_w;
            ie += a0 * ie_w;
            se += (a0 - a1) * inner1;
        }
        Ok(GroundTruthEffects {
            tv: de - ie - se,
            de,
            ie,
            se,
        })
    }
}

fn check_knob(name: &str, value: f64) -> Result<(), ScmError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(ScmError::KnobOutOfRange {
            name: name.to_string(),
            value,
        });
    }
    Ok(())
}
