//! Typed tabular data: schemas, role assignment, CSV I/O, splitting and
//! discretization.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

/// Name of the optional trailing CSV column carrying per-row weights.
pub const WEIGHT_COLUMN: &str = "sample_weight";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("header mismatch: expected `{expected}`, found `{found}`")]
    HeaderMismatch { expected: String, found: String },
    #[error("row {row}: expected {expected} values, found {found}")]
    Arity {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column `{column}`: cannot parse `{value}` as {kind}")]
    Parse {
        row: usize,
        column: String,
        value: String,
        kind: ColumnKind,
    },
    #[error("row {row}, column `{column}`: unknown level `{value}`")]
    UnknownLevel {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },
    #[error("row {row}: value does not conform to column `{column}`")]
    Domain { row: usize, column: String },
    #[error("row {row}: invalid weight {weight}")]
    InvalidWeight { row: usize, weight: f64 },
    #[error("weights length {found} does not match row count {expected}")]
    WeightLength { expected: usize, found: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("test fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("split of {rows} rows at fraction {fraction} leaves one side empty")]
    DegenerateSplit { rows: usize, fraction: f64 },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("invalid roles: {0}")]
    InvalidRoles(String),
    #[error("invalid binning: {0}")]
    InvalidBinning(String),
    #[error("column `{column}`: value {value} outside bin edges [{low}, {high}]")]
    OutOfRange {
        column: String,
        value: f64,
        low: f64,
        high: f64,
    },
    #[error("schemas differ")]
    SchemaMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Binary,
    Categorical,
    Numeric,
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnKind::Binary => "binary",
            ColumnKind::Categorical => "categorical",
            ColumnKind::Numeric => "numeric",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Ordered levels for binary/categorical columns. For binary columns the
    /// second level is the positive class.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
    /// Decimal places used when rendering a numeric column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<usize>,
}

impl ColumnSpec {
    pub fn binary(name: impl Into<String>, negative: &str, positive: &str) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Binary,
            categories: vec![negative.to_string(), positive.to_string()],
            units: None,
            precision: None,
        }
    }

    pub fn categorical<S: AsRef<str>>(name: impl Into<String>, levels: &[S]) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            categories: levels.iter().map(|s| s.as_ref().to_string()).collect(),
            units: None,
            precision: None,
        }
    }

    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
            categories: Vec::new(),
            units: None,
            precision: None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.kind != ColumnKind::Numeric
    }

    pub fn level_index(&self, label: &str) -> Option<u32> {
        self.categories
            .iter()
            .position(|c| c == label)
            .map(|i| i as u32)
    }

    pub fn cardinality(&self) -> usize {
        self.categories.len()
    }

    fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(DataError::InvalidSchema("empty column name".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.categories {
            if c.is_empty() || !seen.insert(c.as_str()) {
                return Err(DataError::InvalidSchema(format!(
                    "column `{}` has empty or duplicate level `{c}`",
                    self.name
                )));
            }
        }
        match self.kind {
            ColumnKind::Binary if self.categories.len() != 2 => Err(DataError::InvalidSchema(
                format!("binary column `{}` needs exactly 2 categories", self.name),
            )),
            ColumnKind::Categorical if self.categories.len() < 2 => {
                Err(DataError::InvalidSchema(format!(
                    "categorical column `{}` needs at least 2 categories",
                    self.name
                )))
            }
            ColumnKind::Numeric if !self.categories.is_empty() => Err(DataError::InvalidSchema(
                format!("numeric column `{}` cannot declare categories", self.name),
            )),
            _ => Ok(()),
        }
    }

    /// Parses one CSV field. `row` is only used for error reporting.
    pub fn parse_field(&self, text: &str, row: usize) -> Result<Value> {
        let text = text.trim();
        if text.is_empty() {
            return Err(DataError::MissingValue {
                row,
                column: self.name.clone(),
            });
        }
        match self.kind {
            ColumnKind::Numeric => match text.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Value::Number(v)),
                _ => Err(DataError::Parse {
                    row,
                    column: self.name.clone(),
                    value: text.to_string(),
                    kind: self.kind,
                }),
            },
            _ => self
                .level_index(text)
                .map(Value::Level)
                .ok_or_else(|| DataError::UnknownLevel {
                    row,
                    column: self.name.clone(),
                    value: text.to_string(),
                }),
        }
    }

    pub fn render_field(&self, value: Value) -> String {
        match value {
            Value::Level(i) => self.categories[i as usize].clone(),
            Value::Number(v) => match self.precision {
                Some(p) => format!("{v:.p$}"),
                None => format!("{v}"),
            },
        }
    }

    pub fn accepts(&self, value: Value) -> bool {
        match (self.kind, value) {
            (ColumnKind::Numeric, Value::Number(v)) => v.is_finite(),
            (ColumnKind::Numeric, Value::Level(_)) => false,
            (_, Value::Level(i)) => (i as usize) < self.categories.len(),
            (_, Value::Number(_)) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        if columns.is_empty() {
            return Err(DataError::InvalidSchema("schema has no columns".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &columns {
            c.validate()?;
            if !seen.insert(c.name.as_str()) {
                return Err(DataError::InvalidSchema(format!(
                    "duplicate column `{}`",
                    c.name
                )));
            }
        }
        Ok(Self { columns })
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// Comma-joined column names, as written in a CSV header.
    pub fn header_line(&self) -> String {
        self.names().collect::<Vec<_>>().join(",")
    }

    pub fn render_row(&self, row: &[Value]) -> String {
        let mut wtr = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let fields: Vec<String> = self
            .columns
            .iter()
            .zip(row)
            .map(|(c, v)| c.render_field(*v))
            .collect();
        wtr.write_record(&fields).expect("in-memory write");
        let mut out = String::from_utf8(wtr.into_inner().expect("in-memory flush"))
            .expect("fields are utf-8");
        out.truncate(out.trim_end_matches('\n').len());
        out
    }

    fn with_column_replaced(&self, idx: usize, spec: ColumnSpec) -> Result<Schema> {
        let mut columns = self.columns.clone();
        columns[idx] = spec;
        Schema::new(columns)
    }
}

/// One cell value. Discrete columns hold an index into the column's levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Level(u32),
    Number(f64),
}

impl Value {
    pub fn level(self) -> Option<u32> {
        match self {
            Value::Level(l) => Some(l),
            Value::Number(_) => None,
        }
    }

    /// Numeric view: levels map to their index.
    pub fn as_f64(self) -> f64 {
        match self {
            Value::Level(l) => l as f64,
            Value::Number(v) => v,
        }
    }

    /// Bit-level key used for exact row comparison (`-0.0` folds onto `0.0`).
    pub fn key(self) -> u64 {
        match self {
            Value::Level(l) => l as u64,
            Value::Number(v) => {
                let v = if v == 0.0 { 0.0 } else { v };
                v.to_bits()
            }
        }
    }
}

pub type Record = Vec<Value>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    rows: Vec<Record>,
    weights: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(schema: Schema, rows: Vec<Record>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            check_row(&schema, row, i + 1)?;
        }
        Ok(Self {
            schema,
            rows,
            weights: None,
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.rows.len() {
            return Err(DataError::WeightLength {
                expected: self.rows.len(),
                found: weights.len(),
            });
        }
        if let Some((i, &w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(DataError::InvalidWeight {
                row: i + 1,
                weight: w,
            });
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn without_weights(mut self) -> Self {
        self.weights = None;
        self
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Record] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn weight(&self, row: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[row])
    }

    pub fn value(&self, row: usize, col: usize) -> Value {
        self.rows[row][col]
    }

    pub fn column_f64(&self, col: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[col].as_f64()).collect()
    }

    pub fn column_levels(&self, col: usize) -> Vec<u32> {
        self.rows
            .iter()
            .map(|r| r[col].level().expect("discrete column"))
            .collect()
    }

    /// Unweighted count of rows at each level of a discrete column.
    pub fn level_counts(&self, col: usize) -> Vec<usize> {
        let mut counts = vec![0; self.schema.columns[col].cardinality()];
        for r in &self.rows {
            if let Value::Level(l) = r[col] {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            weights: self
                .weights
                .as_ref()
                .map(|w| indices.iter().map(|&i| w[i]).collect()),
        }
    }

    /// Appends `other`'s rows. Rows of `other` get `other_weight` times their
    /// own weight; if neither side is weighted and `other_weight` is 1 the
    /// result stays unweighted.
    pub fn concat(&self, other: &Dataset, other_weight: f64) -> Result<Dataset> {
        if self.schema != other.schema {
            return Err(DataError::SchemaMismatch);
        }
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        let out = Dataset {
            schema: self.schema.clone(),
            rows,
            weights: None,
        };
        if self.weights.is_none() && other.weights.is_none() && other_weight == 1.0 {
            return Ok(out);
        }
        let weights = (0..self.len())
            .map(|i| self.weight(i))
            .chain((0..other.len()).map(|i| other.weight(i) * other_weight))
            .collect();
        out.with_weights(weights)
    }

    /// Returns a copy with one column's values replaced.
    pub fn map_column(
        &self,
        col: usize,
        spec: ColumnSpec,
        values: impl IntoIterator<Item = Value>,
    ) -> Result<Dataset> {
        let schema = self.schema.with_column_replaced(col, spec)?;
        let mut rows = self.rows.clone();
        for (row, v) in rows.iter_mut().zip(values) {
            row[col] = v;
        }
        let mut out = Dataset::new(schema, rows)?;
        out.weights = self.weights.clone();
        Ok(out)
    }

    /// Returns a copy without the named columns.
    pub fn drop_columns(&self, names: &[&str]) -> Result<Dataset> {
        let mut keep = Vec::new();
        for (i, c) in self.schema.columns.iter().enumerate() {
            if !names.contains(&c.name.as_str()) {
                keep.push(i);
            }
        }
        for n in names {
            self.schema.require(n)?;
        }
        let schema = Schema::new(keep.iter().map(|&i| self.schema.columns[i].clone()).collect())?;
        let rows = self
            .rows
            .iter()
            .map(|r| keep.iter().map(|&i| r[i]).collect())
            .collect();
        Ok(Dataset {
            schema,
            rows,
            weights: self.weights.clone(),
        })
    }
}

fn check_row(schema: &Schema, row: &[Value], row_no: usize) -> Result<()> {
    if row.len() != schema.len() {
        return Err(DataError::Arity {
            row: row_no,
            expected: schema.len(),
            found: row.len(),
        });
    }
    for (c, v) in schema.columns.iter().zip(row) {
        if !c.accepts(*v) {
            return Err(DataError::Domain {
                row: row_no,
                column: c.name.clone(),
            });
        }
    }
    Ok(())
}

/// Parses one already-split record under `schema`.
pub fn parse_record<S: AsRef<str>>(schema: &Schema, fields: &[S], row: usize) -> Result<Record> {
    if fields.len() != schema.len() {
        return Err(DataError::Arity {
            row,
            expected: schema.len(),
            found: fields.len(),
        });
    }
    schema
        .columns
        .iter()
        .zip(fields)
        .map(|(c, f)| c.parse_field(f.as_ref(), row))
        .collect()
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Reads CSV with a header row. A trailing `sample_weight` column, if
/// present, becomes the dataset's weights.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let expected: Vec<&str> = schema.names().collect();
    let weighted = header.len() == expected.len() + 1
        && header.last().map(String::as_str) == Some(WEIGHT_COLUMN)
        && header[..expected.len()] == expected[..];
    if !weighted && header != expected {
        return Err(DataError::HeaderMismatch {
            expected: expected.join(","),
            found: header.join(","),
        });
    }
    let width = header.len();
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row_no = i + 1;
        let rec = rec?;
        if rec.len() != width {
            return Err(DataError::Arity {
                row: row_no,
                expected: width,
                found: rec.len(),
            });
        }
        let fields: Vec<&str> = rec.iter().collect();
        rows.push(parse_record(schema, &fields[..schema.len()], row_no)?);
        if weighted {
            let text = fields[schema.len()].trim();
            let w = text.parse::<f64>().map_err(|_| DataError::Parse {
                row: row_no,
                column: WEIGHT_COLUMN.to_string(),
                value: text.to_string(),
                kind: ColumnKind::Numeric,
            })?;
            weights.push(w);
        }
    }
    let ds = Dataset::new(schema.clone(), rows)?;
    if weighted {
        ds.with_weights(weights)
    } else {
        Ok(ds)
    }
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(dataset, file)
}

pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header: Vec<String> = dataset.schema.names().map(str::to_string).collect();
    if dataset.weights.is_some() {
        header.push(WEIGHT_COLUMN.to_string());
    }
    wtr.write_record(&header)?;
    for (i, row) in dataset.rows.iter().enumerate() {
        let mut fields: Vec<String> = dataset
            .schema
            .columns
            .iter()
            .zip(row)
            .map(|(c, v)| c.render_field(*v))
            .collect();
        if let Some(w) = &dataset.weights {
            fields.push(format!("{}", w[i]));
        }
        wtr.write_record(&fields)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Seeded random partition into (train, test). Both sides keep source order.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidFraction(test_fraction));
    }
    let n = dataset.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(DataError::DegenerateSplit {
            rows: n,
            fraction: test_fraction,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, train) = idx.split_at_mut(n_test);
    test.sort_unstable();
    train.sort_unstable();
    Ok((dataset.select(train), dataset.select(test)))
}

/// Binarizes a numeric column: values strictly above `threshold` become the
/// positive level `"1"`.
pub fn binarize(dataset: &Dataset, column: &str, threshold: f64) -> Result<Dataset> {
    let col = dataset.schema.require(column)?;
    let spec = &dataset.schema.columns[col];
    if spec.kind != ColumnKind::Numeric {
        return Err(DataError::InvalidSchema(format!(
            "cannot binarize non-numeric column `{column}`"
        )));
    }
    let new_spec = ColumnSpec::binary(column, "0", "1");
    let values: Vec<Value> = dataset
        .rows
        .iter()
        .map(|r| Value::Level(u32::from(r[col].as_f64() > threshold)))
        .collect();
    dataset.map_column(col, new_spec, values)
}

// ---------------------------------------------------------------------------
// Roles

/// Standard-fairness-model role partition. Confounders are every column not
/// named here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfmRoles {
    pub sensitive: String,
    /// Baseline level (x0). Defaults to the most frequent level other than the
    /// comparison level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    /// Comparison level (x1). Defaults to the majority level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<String>,
    #[serde(default)]
    pub mediators: Vec<String>,
    pub outcome: String,
    /// Collapse every level other than the comparison level into one
    /// baseline level before evaluation.
    #[serde(default)]
    pub aggregate_rest: bool,
}

/// Roles resolved to column indices and level indices for one schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedRoles {
    pub sensitive: usize,
    pub x0: u32,
    pub x1: u32,
    pub mediators: Vec<usize>,
    pub confounders: Vec<usize>,
    pub outcome: usize,
}

impl SfmRoles {
    pub fn new(sensitive: &str, mediators: &[&str], outcome: &str) -> Self {
        Self {
            sensitive: sensitive.to_string(),
            baseline: None,
            comparison: None,
            mediators: mediators.iter().map(|s| s.to_string()).collect(),
            outcome: outcome.to_string(),
            aggregate_rest: false,
        }
    }

    pub fn with_levels(mut self, baseline: &str, comparison: &str) -> Self {
        self.baseline = Some(baseline.to_string());
        self.comparison = Some(comparison.to_string());
        self
    }

    pub fn confounders<'a>(&'a self, schema: &'a Schema) -> impl Iterator<Item = &'a str> + 'a {
        schema.names().filter(move |n| {
            *n != self.sensitive && *n != self.outcome && !self.mediators.iter().any(|m| m == n)
        })
    }

    /// Structural checks that need only the schema.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let s = schema
            .column(&self.sensitive)
            .ok_or_else(|| DataError::UnknownColumn(self.sensitive.clone()))?;
        if !s.is_discrete() {
            return Err(DataError::InvalidRoles(format!(
                "sensitive column `{}` must be binary or categorical",
                self.sensitive
            )));
        }
        let y = schema
            .column(&self.outcome)
            .ok_or_else(|| DataError::UnknownColumn(self.outcome.clone()))?;
        if y.kind != ColumnKind::Binary {
            return Err(DataError::InvalidRoles(format!(
                "outcome column `{}` must be binary",
                self.outcome
            )));
        }
        if self.sensitive == self.outcome {
            return Err(DataError::InvalidRoles(
                "sensitive and outcome columns coincide".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.mediators {
            schema.require(m)?;
            if *m == self.sensitive || *m == self.outcome || !seen.insert(m) {
                return Err(DataError::InvalidRoles(format!(
                    "mediator `{m}` overlaps another role"
                )));
            }
        }
        for level in self.baseline.iter().chain(self.comparison.iter()) {
            if s.level_index(level).is_none() {
                return Err(DataError::InvalidRoles(format!(
                    "`{level}` is not a level of `{}`",
                    self.sensitive
                )));
            }
        }
        if self.baseline.is_some() && self.baseline == self.comparison {
            return Err(DataError::InvalidRoles(
                "baseline and comparison levels coincide".into(),
            ));
        }
        Ok(())
    }

    /// Resolves roles against a dataset; missing contrast levels are filled
    /// from observed frequencies.
    pub fn resolve(&self, dataset: &Dataset) -> Result<ResolvedRoles> {
        let schema = dataset.schema();
        self.validate(schema)?;
        let sensitive = schema.require(&self.sensitive)?;
        let spec = &schema.columns[sensitive];
        let counts = dataset.level_counts(sensitive);
        let by_freq = {
            let mut order: Vec<usize> = (0..counts.len()).collect();
            order.sort_by(|a, b| counts[*b].cmp(&counts[*a]).then(a.cmp(b)));
            order
        };
        let x1 = match &self.comparison {
            Some(l) => spec.level_index(l).expect("validated"),
            None => by_freq[0] as u32,
        };
        let x0 = match &self.baseline {
            Some(l) => spec.level_index(l).expect("validated"),
            None => by_freq
                .iter()
                .map(|&i| i as u32)
                .find(|&i| i != x1)
                .expect("at least two levels"),
        };
        if x0 == x1 {
            return Err(DataError::InvalidRoles(
                "baseline and comparison levels coincide".into(),
            ));
        }
        let mediators = self
            .mediators
            .iter()
            .map(|m| schema.require(m))
            .collect::<Result<Vec<_>>>()?;
        let confounders = self
            .confounders(schema)
            .map(|c| schema.require(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(ResolvedRoles {
            sensitive,
            x0,
            x1,
            mediators,
            confounders,
            outcome: schema.require(&self.outcome)?,
        })
    }
}

/// Collapses every sensitive level except the comparison level into a single
/// `rest_label` level, producing a binary sensitive column.
pub fn aggregate_sensitive(
    dataset: &Dataset,
    roles: &SfmRoles,
    rest_label: &str,
) -> Result<(Dataset, SfmRoles)> {
    let resolved = roles.resolve(dataset)?;
    let col = resolved.sensitive;
    let spec = &dataset.schema.columns[col];
    let x1_label = spec.categories[resolved.x1 as usize].clone();
    if x1_label == rest_label {
        return Err(DataError::InvalidRoles(format!(
            "aggregate label `{rest_label}` collides with the comparison level"
        )));
    }
    let new_spec = ColumnSpec::binary(spec.name.clone(), rest_label, &x1_label);
    let values: Vec<Value> = dataset
        .rows
        .iter()
        .map(|r| Value::Level(u32::from(r[col] == Value::Level(resolved.x1))))
        .collect();
    let out = dataset.map_column(col, new_spec, values)?;
    let mut roles = roles.clone();
    roles.baseline = Some(rest_label.to_string());
    roles.comparison = Some(x1_label);
    roles.aggregate_rest = false;
    Ok((out, roles))
}

// ---------------------------------------------------------------------------
// Discretization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinStrategy {
    #[default]
    EqualWidth,
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BinSpec {
    Count(usize),
    Edges(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningPolicy {
    #[serde(default)]
    pub strategy: BinStrategy,
    #[serde(default)]
    pub columns: BTreeMap<String, BinSpec>,
    /// Clamp values outside explicit edges into the outermost bins instead
    /// of rejecting them.
    #[serde(default = "default_true")]
    pub clamp: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BinningPolicy {
    fn default() -> Self {
        Self {
            strategy: BinStrategy::EqualWidth,
            columns: BTreeMap::new(),
            clamp: true,
        }
    }
}

impl BinningPolicy {
    pub fn new(strategy: BinStrategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn with_column(mut self, name: &str, spec: BinSpec) -> Self {
        self.columns.insert(name.to_string(), spec);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, spec) in &self.columns {
            match spec {
                BinSpec::Count(k) if *k < 2 => {
                    return Err(DataError::InvalidBinning(format!(
                        "`{name}`: bin count must be at least 2"
                    )))
                }
                BinSpec::Edges(e) => check_edges(name, e)?,
                _ => {}
            }
        }
        Ok(())
    }

    /// Bin edges for `column` fitted to the observed values.
    pub fn edges_for(&self, column: &str, values: &[f64]) -> Result<Vec<f64>> {
        let spec = self
            .columns
            .get(column)
            .ok_or_else(|| DataError::InvalidBinning(format!("no bins for `{column}`")))?;
        match spec {
            BinSpec::Edges(e) => {
                check_edges(column, e)?;
                Ok(e.clone())
            }
            BinSpec::Count(k) => {
                if *k < 2 {
                    return Err(DataError::InvalidBinning(format!(
                        "`{column}`: bin count must be at least 2"
                    )));
                }
                if values.is_empty() {
                    return Err(DataError::EmptyDataset);
                }
                let mut sorted = values.to_vec();
                sorted.sort_by(f64::total_cmp);
                let edges = match self.strategy {
                    BinStrategy::EqualWidth => equal_width_edges(&sorted, *k),
                    BinStrategy::Quantile => {
                        let mut e: Vec<f64> = (0..=*k)
                            .map(|i| stats::quantile_sorted(&sorted, i as f64 / *k as f64))
                            .collect();
                        e.dedup();
                        if e.len() < 3 {
                            equal_width_edges(&sorted, *k)
                        } else {
                            e
                        }
                    }
                };
                Ok(edges)
            }
        }
    }
}

fn check_edges(name: &str, edges: &[f64]) -> Result<()> {
    if edges.len() < 3 {
        return Err(DataError::InvalidBinning(format!(
            "`{name}`: need at least 3 edges (2 bins)"
        )));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DataError::InvalidBinning(format!(
            "`{name}`: edges must be finite and strictly increasing"
        )));
    }
    Ok(())
}

fn equal_width_edges(sorted: &[f64], k: usize) -> Vec<f64> {
    let (mut lo, mut hi) = (sorted[0], sorted[sorted.len() - 1]);
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / k as f64;
    let mut edges: Vec<f64> = (0..k).map(|i| lo + width * i as f64).collect();
    edges.push(hi);
    edges
}

/// Bin index under half-open bins `[e_i, e_{i+1})`, the last bin closed.
fn bin_index(edges: &[f64], v: f64) -> usize {
    let interior = &edges[1..edges.len() - 1];
    interior.partition_point(|e| *e <= v)
}

pub fn bin_labels(count: usize) -> Vec<String> {
    (0..count).map(|i| format!("b{i}")).collect()
}

/// Replaces every numeric column named in `policy` by categorical bin labels
/// `b0, b1, ...`. Other columns pass through untouched.
pub fn discretize(dataset: &Dataset, policy: &BinningPolicy) -> Result<Dataset> {
    policy.validate()?;
    let mut out = dataset.clone();
    for name in policy.columns.keys() {
        let col = dataset.schema.require(name)?;
        let spec = &dataset.schema.columns[col];
        if spec.kind != ColumnKind::Numeric {
            continue;
        }
        let values = dataset.column_f64(col);
        let edges = policy.edges_for(name, &values)?;
        let (lo, hi) = (edges[0], edges[edges.len() - 1]);
        let mut binned = Vec::with_capacity(values.len());
        for v in values {
            if (v < lo || v > hi) && !policy.clamp {
                return Err(DataError::OutOfRange {
                    column: name.clone(),
                    value: v,
                    low: lo,
                    high: hi,
                });
            }
            binned.push(Value::Level(bin_index(&edges, v) as u32));
        }
        let new_spec = ColumnSpec::categorical(name.clone(), &bin_labels(edges.len() - 1));
        out = out.map_column(col, new_spec, binned)?;
    }
    Ok(out)
}

/// Exact-row index used for memorization checks.
pub fn row_key(row: &[Value]) -> Vec<u64> {
    row.iter().map(|v| v.key()).collect()
}

/// Majority level and its share for a discrete column.
pub fn majority_share(dataset: &Dataset, col: usize) -> Option<(u32, f64)> {
    if dataset.is_empty() {
        return None;
    }
    let counts = dataset.level_counts(col);
    let (level, count) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    Some((level as u32, *count as f64 / dataset.len() as f64))
}

pub(crate) fn level_share(dataset: &Dataset, col: usize, level: u32) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let counts = dataset.level_counts(col);
    counts.get(level as usize).copied().unwrap_or(0) as f64 / dataset.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema4() -> Schema {
        Schema::new(vec![
            ColumnSpec::categorical("race", &["a", "b", "c"]),
            ColumnSpec::numeric("age"),
            ColumnSpec::binary("sex", "f", "m"),
            ColumnSpec::binary("y", "0", "1"),
        ])
        .unwrap()
    }

    #[test]
    fn schema_invariants() {
        assert!(Schema::new(vec![]).is_err());
        assert!(Schema::new(vec![ColumnSpec::categorical("a", &["x"])]).is_err());
        let mut bad = ColumnSpec::binary("b", "0", "1");
        bad.categories.push("2".into());
        assert!(Schema::new(vec![bad]).is_err());
        assert!(Schema::new(vec![ColumnSpec::numeric("a"), ColumnSpec::numeric("a")]).is_err());
    }

    #[test]
    fn load_two_rows() {
        let text = "race,age,sex,y\na,20.5,f,0\nc,31,m,1\n";
        let ds = read_csv(text.as_bytes(), &schema4()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.value(1, 0), Value::Level(2));
        assert_eq!(ds.value(0, 1), Value::Number(20.5));
    }

    #[test]
    fn load_rejects_short_row() {
        let text = "race,age,sex,y\na,20,f,0\nb,31,m\n";
        match read_csv(text.as_bytes(), &schema4()) {
            Err(DataError::Arity {
                row: 2,
                expected: 4,
                found: 3,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_unknown_level() {
        let text = "race,age,sex,y\na,20,f,maybe\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &schema4()),
            Err(DataError::UnknownLevel { row: 1, .. })
        ));
    }

    #[test]
    fn load_rejects_header_and_missing_and_unparseable() {
        let s = schema4();
        assert!(matches!(
            read_csv("race,sex,age,y\n".as_bytes(), &s),
            Err(DataError::HeaderMismatch { .. })
        ));
        assert!(matches!(
            read_csv("race,age,sex,y\na,,f,0\n".as_bytes(), &s),
            Err(DataError::MissingValue { row: 1, .. })
        ));
        assert!(matches!(
            read_csv("race,age,sex,y\na,old,f,0\n".as_bytes(), &s),
            Err(DataError::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn weights_round_trip_through_csv() {
        let ds = read_csv("race,age,sex,y\na,20,f,0\nb,30,m,1\n".as_bytes(), &schema4())
            .unwrap()
            .with_weights(vec![0.25, 2.0])
            .unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("race,age,sex,y,sample_weight\n"));
        let back = read_csv(text.as_bytes(), &schema4()).unwrap();
        assert_eq!(back, ds);
    }

    fn numbered(n: usize) -> Dataset {
        let schema = Schema::new(vec![ColumnSpec::numeric("v")]).unwrap();
        Dataset::new(schema, (0..n).map(|i| vec![Value::Number(i as f64)]).collect()).unwrap()
    }

    #[test]
    fn split_is_deterministic_partition() {
        let ds = numbered(10);
        let (train, test) = split(&ds, 0.3, 7).unwrap();
        assert_eq!((train.len(), test.len()), (7, 3));
        let again = split(&ds, 0.3, 7).unwrap();
        assert_eq!(again, (train.clone(), test.clone()));
        let mut all: Vec<f64> = train
            .column_f64(0)
            .into_iter()
            .chain(test.column_f64(0))
            .collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, ds.column_f64(0));
    }

    #[test]
    fn split_preconditions() {
        assert!(matches!(
            split(&numbered(10), 0.0, 1),
            Err(DataError::InvalidFraction(_))
        ));
        assert!(matches!(
            split(&numbered(1), 0.5, 1),
            Err(DataError::DegenerateSplit { .. })
        ));
        assert!(matches!(
            split(&numbered(0), 0.5, 1),
            Err(DataError::EmptyDataset)
        ));
    }

    #[test]
    fn discretize_explicit_edges() {
        let schema = Schema::new(vec![ColumnSpec::numeric("age")]).unwrap();
        let ds = Dataset::new(
            schema,
            [20.0, 35.0, 60.0].iter().map(|v| vec![Value::Number(*v)]).collect(),
        )
        .unwrap();
        let policy = BinningPolicy::default()
            .with_column("age", BinSpec::Edges(vec![0.0, 30.0, 50.0, 100.0]));
        let out = discretize(&ds, &policy).unwrap();
        assert_eq!(out.column_levels(0), vec![0, 1, 2]);
        assert_eq!(out.schema().columns()[0].categories, vec!["b0", "b1", "b2"]);
    }

    #[test]
    fn discretize_out_of_range() {
        let schema = Schema::new(vec![ColumnSpec::numeric("age")]).unwrap();
        let ds = Dataset::new(schema, vec![vec![Value::Number(120.0)]]).unwrap();
        let mut policy =
            BinningPolicy::default().with_column("age", BinSpec::Edges(vec![0.0, 50.0, 100.0]));
        assert_eq!(discretize(&ds, &policy).unwrap().column_levels(0), vec![1]);
        policy.clamp = false;
        assert!(matches!(
            discretize(&ds, &policy),
            Err(DataError::OutOfRange { .. })
        ));
    }

    #[test]
    fn discretize_without_numeric_columns_is_identity() {
        let schema = Schema::new(vec![ColumnSpec::binary("s", "0", "1")]).unwrap();
        let ds = Dataset::new(schema, vec![vec![Value::Level(1)], vec![Value::Level(0)]]).unwrap();
        let policy = BinningPolicy::new(BinStrategy::Quantile).with_column("s", BinSpec::Count(3));
        assert_eq!(discretize(&ds, &policy).unwrap(), ds);
    }

    #[test]
    fn quantile_two_bins_split_at_median() {
        let schema = Schema::new(vec![ColumnSpec::numeric("v")]).unwrap();
        let ds = Dataset::new(
            schema,
            (1..=10).map(|i| vec![Value::Number(i as f64)]).collect(),
        )
        .unwrap();
        let policy = BinningPolicy::new(BinStrategy::Quantile).with_column("v", BinSpec::Count(2));
        // Median of 1..=10 is 5.5.
        assert_eq!(
            policy.edges_for("v", &ds.column_f64(0)).unwrap(),
            vec![1.0, 5.5, 10.0]
        );
        let levels = discretize(&ds, &policy).unwrap().column_levels(0);
        assert_eq!(levels, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn binning_policy_rejects_bad_edges() {
        let p = BinningPolicy::default().with_column("v", BinSpec::Edges(vec![0.0, 0.0, 1.0]));
        assert!(p.validate().is_err());
        let p = BinningPolicy::default().with_column("v", BinSpec::Count(1));
        assert!(p.validate().is_err());
    }

    #[test]
    fn roles_resolution_defaults_to_majority() {
        let text = "race,age,sex,y\na,1,f,0\nb,1,f,1\nb,1,m,0\nc,2,m,1\nb,3,f,1\na,3,f,1\n";
        let ds = read_csv(text.as_bytes(), &schema4()).unwrap();
        let roles = SfmRoles::new("race", &["sex"], "y");
        let r = roles.resolve(&ds).unwrap();
        assert_eq!((r.x1, r.x0), (1, 0));
        assert_eq!(r.mediators, vec![2]);
        assert_eq!(r.confounders, vec![1]);
        let bad = SfmRoles::new("race", &["y"], "y");
        assert!(bad.validate(ds.schema()).is_err());
        let bad = SfmRoles::new("age", &[], "y");
        assert!(bad.validate(ds.schema()).is_err());
    }

    #[test]
    fn aggregate_rest_collapses_levels() {
        let text = "race,age,sex,y\na,1,f,0\nb,1,f,1\nb,1,m,0\nc,2,m,1\n";
        let ds = read_csv(text.as_bytes(), &schema4()).unwrap();
        let roles = SfmRoles::new("race", &["sex"], "y");
        let (out, roles) = aggregate_sensitive(&ds, &roles, "other").unwrap();
        assert_eq!(out.column_levels(0), vec![0, 1, 1, 0]);
        assert_eq!(roles.comparison.as_deref(), Some("b"));
        assert_eq!(out.schema().columns()[0].kind, ColumnKind::Binary);
    }

    #[test]
    fn binarize_threshold() {
        let ds = numbered(5);
        let out = binarize(&ds, "v", 2.0).unwrap();
        assert_eq!(out.column_levels(0), vec![0, 0, 0, 1, 1]);
    }
}
