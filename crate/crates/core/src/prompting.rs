//! Generation prompt construction, in-context example selection and
//! refinement directives.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DataError, Dataset, Schema, SfmRoles, Value};
use crate::derive_seed;

pub const SYSTEM_ROLE: &str = "You are a tabular synthetic data generation model.";

pub const ANTI_COPY_CLAUSE: &str = "DO NOT COPY THE EXAMPLES but generate realistic but new AND diverse samples which have the correct label conditioned on the features.";

/// Heading of the contrastive block, placed between the examples and the
/// anti-copy clause.
pub const CONTRASTIVE_HEADING: &str =
    "contrastive pairs (identical except for the sensitive attribute, same label):";

pub const DEFAULT_CONTRASTIVE_PAIRS: usize = 4;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid prompt spec: {0}")]
    InvalidSpec(String),
    #[error("prompt slot `{0}` is empty")]
    EmptySlot(&'static str),
    #[error("expected {expected} example rows, got {found}")]
    RowCount { expected: usize, found: usize },
    #[error("dataset has {available} rows but {needed} examples were requested")]
    TooSmall { needed: usize, available: usize },
    #[error("directive must be non-empty")]
    EmptyDirective,
}

pub type Result<T, E = PromptError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IclWeighting {
    #[default]
    Uniform,
    GroupBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub dataset_description: String,
    pub sensitive_feature: String,
    #[serde(default)]
    pub mediators: Vec<String>,
    pub label: String,
    /// Rendered schema header; filled from the schema when empty.
    #[serde(default)]
    pub header: String,
    pub ic_count: usize,
    #[serde(default)]
    pub extra_directives: Vec<String>,
    #[serde(default)]
    pub icl_weighting: IclWeighting,
    /// Rendered contrastive rows, consecutive pairs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contrastive_rows: Vec<String>,
    /// Bumped whenever the examples must be redrawn.
    #[serde(default)]
    pub icl_round: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub system_role: String,
    pub user_body: String,
}

impl PromptText {
    /// Hex SHA-256 over the system role and body.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_role.as_bytes());
        h.update([0u8]);
        h.update(self.user_body.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl PromptSpec {
    pub fn new(description: &str, schema: &Schema, roles: &SfmRoles, ic_count: usize) -> Self {
        Self {
            dataset_description: description.to_string(),
            sensitive_feature: roles.sensitive.clone(),
            mediators: roles.mediators.clone(),
            label: roles.outcome.clone(),
            header: schema.header_line(),
            ic_count,
            extra_directives: Vec::new(),
            icl_weighting: IclWeighting::Uniform,
            contrastive_rows: Vec::new(),
            icl_round: 0,
        }
    }

    /// Checks the spec against a schema, filling an empty header.
    pub fn bind(mut self, schema: &Schema) -> Result<Self> {
        if self.header.is_empty() {
            self.header = schema.header_line();
        }
        self.validate(schema)?;
        Ok(self)
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if self.ic_count == 0 {
            return Err(PromptError::InvalidSpec("ic_count must be at least 1".into()));
        }
        let named = std::iter::once(&self.sensitive_feature)
            .chain(&self.mediators)
            .chain(std::iter::once(&self.label));
        for name in named {
            if schema.index_of(name).is_none() {
                return Err(PromptError::InvalidSpec(format!("unknown column `{name}`")));
            }
        }
        if self.header != schema.header_line() {
            return Err(PromptError::InvalidSpec(format!(
                "header `{}` does not match the schema",
                self.header
            )));
        }
        if self.extra_directives.iter().any(|d| d.trim().is_empty()) {
            return Err(PromptError::EmptyDirective);
        }
        Ok(())
    }
}

/// Returns a copy with `directive` appended.
pub fn add_refinement(spec: &PromptSpec, directive: &str) -> Result<PromptSpec> {
    if directive.trim().is_empty() {
        return Err(PromptError::EmptyDirective);
    }
    let mut out = spec.clone();
    out.extra_directives.push(directive.to_string());
    Ok(out)
}

/// Draws `ic_count` distinct row indices, in draw order.
///
/// Group-balanced draws weight each remaining row by the inverse of its
/// (sensitive, outcome) cell's remaining size, renormalized after every
/// draw: a non-empty cell is chosen uniformly, then a row within it. If any
/// cell of observed sensitive levels by observed outcome levels is empty the
/// draw is uniform instead.
pub fn select_icl_samples(dataset: &Dataset, spec: &PromptSpec, seed: u64) -> Result<Vec<usize>> {
    let n = dataset.len();
    if n < spec.ic_count {
        return Err(PromptError::TooSmall {
            needed: spec.ic_count,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, spec.icl_round));
    if spec.icl_weighting == IclWeighting::GroupBalanced {
        if let Some(cells) = balanced_cells(dataset, spec)? {
            return Ok(draw_from_cells(cells, spec.ic_count, &mut rng));
        }
        log::warn!(
            "a ({} x {}) cell is empty; drawing examples uniformly",
            spec.sensitive_feature,
            spec.label
        );
    }
    Ok(index::sample(&mut rng, n, spec.ic_count).into_vec())
}

/// Row indices per observed (sensitive, outcome) cell, or `None` when some
/// cell of the observed grid is empty.
fn balanced_cells(dataset: &Dataset, spec: &PromptSpec) -> Result<Option<Vec<Vec<usize>>>> {
    let s_col = dataset.schema().require(&spec.sensitive_feature)?;
    let y_col = dataset.schema().require(&spec.label)?;
    let ks = dataset.schema().columns()[s_col].cardinality();
    let ky = dataset.schema().columns()[y_col].cardinality();
    if ks == 0 || ky == 0 {
        return Err(PromptError::InvalidSpec(
            "group-balanced selection needs discrete sensitive and label columns".into(),
        ));
    }
    let s = dataset.column_levels(s_col);
    let y = dataset.column_levels(y_col);
    let mut cells = vec![Vec::new(); ks * ky];
    for (i, (a, b)) in s.iter().zip(&y).enumerate() {
        cells[*a as usize * ky + *b as usize].push(i);
    }
    let s_seen: Vec<usize> = (0..ks).filter(|a| s.contains(&(*a as u32))).collect();
    let y_seen: Vec<usize> = (0..ky).filter(|b| y.contains(&(*b as u32))).collect();
    let mut grid = Vec::new();
    for a in &s_seen {
        for b in &y_seen {
            let cell = std::mem::take(&mut cells[a * ky + b]);
            if cell.is_empty() {
                return Ok(None);
            }
            grid.push(cell);
        }
    }
    Ok(Some(grid))
}

fn draw_from_cells(mut cells: Vec<Vec<usize>>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let c = rng.gen_range(0..cells.len());
        let j = rng.gen_range(0..cells[c].len());
        out.push(cells[c].swap_remove(j));
        if cells[c].is_empty() {
            cells.remove(c);
        }
    }
    out
}

/// Renders the selected rows as CSV lines.
pub fn render_rows(dataset: &Dataset, indices: &[usize]) -> Vec<String> {
    indices
        .iter()
        .map(|&i| dataset.schema().render_row(&dataset.rows()[i]))
        .collect()
}

/// Picks `k` real rows and pairs each with a copy whose sensitive level is
/// flipped between `x0` and `x1`; the label is kept. Rows at other sensitive
/// levels are not eligible.
pub fn contrastive_pairs(dataset: &Dataset, roles: &SfmRoles, k: usize, seed: u64) -> Result<Vec<String>> {
    let r = roles.resolve(dataset)?;
    let eligible: Vec<usize> = (0..dataset.len())
        .filter(|&i| {
            let v = dataset.rows()[i][r.sensitive];
            v == Value::Level(r.x0) || v == Value::Level(r.x1)
        })
        .collect();
    let k = k.min(eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, eligible.len(), k);
    let schema = dataset.schema();
    let mut out = Vec::with_capacity(2 * k);
    for p in picks.iter() {
        let row = &dataset.rows()[eligible[p]];
        let mut flipped = row.clone();
        flipped[r.sensitive] = if row[r.sensitive] == Value::Level(r.x0) {
            Value::Level(r.x1)
        } else {
            Value::Level(r.x0)
        };
        out.push(schema.render_row(row));
        out.push(schema.render_row(&flipped));
    }
    Ok(out)
}

/// Renders the generation prompt. Pure in its inputs.
pub fn build_prompt(spec: &PromptSpec, icl_rows: &[String]) -> Result<PromptText> {
    if icl_rows.len() != spec.ic_count {
        return Err(PromptError::RowCount {
            expected: spec.ic_count,
            found: icl_rows.len(),
        });
    }
    let slots = [
        ("dataset_description", spec.dataset_description.trim()),
        ("sensitive_feature", spec.sensitive_feature.trim()),
        ("label", spec.label.trim()),
        ("header", spec.header.trim()),
    ];
    for (name, value) in slots {
        if value.is_empty() {
            return Err(PromptError::EmptySlot(name));
        }
    }
    if spec.mediators.iter().all(|m| m.trim().is_empty()) {
        return Err(PromptError::EmptySlot("mediators"));
    }
    if icl_rows.iter().any(|r| r.trim().is_empty()) {
        return Err(PromptError::EmptySlot("examples"));
    }
    if spec.extra_directives.iter().any(|d| d.trim().is_empty()) {
        return Err(PromptError::EmptyDirective);
    }

    let mut body = format!(
        "You are a synthetic data generator.\n\
         Your goal is to produce data which mirrors the given examples in causal fairness within a structural causal model (SCM) framework and feature and label distributions but also produce as diverse samples as possible. I will give you real examples first.\n\
         \n\
         Context: Leverage your knowledge about {desc} and causal fairness to generate realistic but diverse samples. Generated data should consider {sens} as the sensitive attribute (X), {med} as the mediators (Z), {label} as the target variable/Outcome (Y), and the rest of the features as the confounder attribute (W).\n\
         \n\
         Generated data must be structured to allow evaluation of fairness through causal pathways, capturing both direct and indirect effects of the sensitive attribute on the target variable, as well as possible confounding influences.\n\
         \n\
         The output should be a markdown code snippet formatted in the following schema:\n\
         {header}\n\
         \n\
         example date:\n",
        desc = spec.dataset_description.trim(),
        sens = spec.sensitive_feature,
        med = spec.mediators.join(", "),
        label = spec.label,
        header = spec.header,
    );
    for row in icl_rows {
        body.push_str(row);
        body.push('\n');
    }
    if !spec.contrastive_rows.is_empty() {
        body.push('\n');
        body.push_str(CONTRASTIVE_HEADING);
        body.push('\n');
        for row in &spec.contrastive_rows {
            body.push_str(row);
            body.push('\n');
        }
    }
    body.push('\n');
    body.push_str(ANTI_COPY_CLAUSE);
    for d in &spec.extra_directives {
        body.push('\n');
        body.push_str(d);
    }
    Ok(PromptText {
        system_role: SYSTEM_ROLE.to_string(),
        user_body: body,
    })
}
