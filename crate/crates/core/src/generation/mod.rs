//! Generator backends, response parsing, memorization filtering and batch
//! accumulation.

mod mock;
mod remote;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{row_key, DataError, Dataset, Record, Schema};
use crate::derive_seed;
use crate::prompting::PromptText;
use crate::scm::ScmError;

pub use mock::{KnobRamp, MockBackend};
pub use remote::{HttpResponse, RemoteBackend, RemoteConfig, RetryPolicy, Transport, UreqTransport};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("credential environment variable `{0}` is not set")]
    MissingCredential(String),
    #[error("invalid generation settings: {0}")]
    InvalidParams(String),
    #[error("HTTP status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {cause}")]
    RetriesExhausted { attempts: u32, cause: String },
    #[error("malformed completion body: {0}")]
    MalformedResponse(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = GenerationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub model_id: String,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.9,
            top_p: 1.0,
            max_tokens: 4096,
            model_id: "gpt-4o".to_string(),
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GenerationError::InvalidParams(format!("temperature {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GenerationError::InvalidParams(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(GenerationError::InvalidParams("max_tokens must be positive".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(GenerationError::InvalidParams("model_id is empty".into()));
        }
        Ok(())
    }
}

/// One call to a backend.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub prompt: &'a PromptText,
    pub params: &'a SamplingParams,
    /// Number of refinement directives in the prompt.
    pub refinement_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawResponse {
    pub text: String,
    pub retries: u32,
}

/// Text generator. Must be callable from several threads at once.
pub trait Backend: Send + Sync {
    fn generate_raw(&self, request: &GenerationRequest<'_>) -> Result<RawResponse>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub text: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    pub parsed_ok: usize,
    pub rejected: Vec<RejectedRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStatus {
    Complete,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestDiagnostics {
    pub parsed_ok: usize,
    pub rejected: usize,
    pub copied_dropped: usize,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationDiagnostics {
    /// Target row count.
    pub requested: usize,
    pub requests: usize,
    pub retries: u32,
    pub parsed_ok: usize,
    pub rejected: Vec<RejectedRow>,
    pub copied_dropped: usize,
    /// Valid rows beyond the target, discarded.
    pub surplus_dropped: usize,
    pub raw_responses_retained: bool,
    pub per_request: Vec<RequestDiagnostics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub status: BatchStatus,
}

const REJECT_ARITY: &str = "arity";

fn reject_reason(err: &DataError) -> String {
    match err {
        DataError::Arity { .. } => REJECT_ARITY.to_string(),
        DataError::Parse { column, .. } => format!("parse:{column}"),
        DataError::UnknownLevel { column, .. } => format!("unknown_level:{column}"),
        DataError::MissingValue { column, .. } => format!("missing_value:{column}"),
        DataError::Domain { column, .. } => format!("domain:{column}"),
        other => other.to_string(),
    }
}

/// Lines of the first fenced block, or of the whole text if it has none.
fn block_lines(raw: &str) -> Vec<&str> {
    let mut lines = raw.lines();
    let mut fenced = Vec::new();
    let mut inside = false;
    for line in lines.by_ref() {
        let t = line.trim();
        if t.starts_with("```") {
            if inside {
                return fenced;
            }
            inside = true;
            continue;
        }
        if inside {
            fenced.push(line);
        }
    }
    if inside {
        fenced
    } else {
        raw.lines().collect()
    }
}

fn split_fields(line: &str) -> Option<Vec<String>> {
    if !line.contains('"') {
        return Some(line.split(',').map(|f| f.trim().to_string()).collect());
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(line.as_bytes());
    let rec = rdr.records().next()?.ok()?;
    Some(rec.iter().map(|f| f.trim().to_string()).collect())
}

/// Parses generated text into schema-valid rows. Every candidate line is
/// either accepted or listed in the diagnostics.
pub fn parse_response(raw: &str, schema: &Schema) -> (Vec<Record>, ParseDiagnostics) {
    let header: Vec<&str> = schema.names().collect();
    let mut diag = ParseDiagnostics::default();
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (i, line) in block_lines(raw).into_iter().enumerate() {
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let fields = split_fields(text);
        if !header_seen {
            if let Some(f) = &fields {
                if f.iter().map(String::as_str).eq(header.iter().copied()) {
                    header_seen = true;
                    continue;
                }
            }
        }
        match fields {
            Some(f) if f.len() > 1 || schema.len() == 1 => {
                match crate::data::parse_record(schema, &f, i + 1) {
                    Ok(r) => {
                        rows.push(r);
                        diag.parsed_ok += 1;
                    }
                    Err(e) => diag.rejected.push(RejectedRow {
                        text: text.to_string(),
                        reason: reject_reason(&e),
                    }),
                }
            }
            _ => diag.rejected.push(RejectedRow {
                text: text.to_string(),
                reason: "not_delimited".to_string(),
            }),
        }
    }
    if diag.parsed_ok == 0 {
        diag.notes.push("no tabular content".to_string());
    }
    (rows, diag)
}

/// Renders rows as the fenced CSV snippet the parser accepts.
pub fn render_snippet(schema: &Schema, rows: &[Record]) -> String {
    let mut out = String::from("```csv\n");
    out.push_str(&schema.header_line());
    out.push('\n');
    for r in rows {
        out.push_str(&schema.render_row(r));
        out.push('\n');
    }
    out.push_str("```\n");
    out
}

/// Drops rows exactly equal to any in-context example.
pub fn filter_memorized(rows: Vec<Record>, icl_rows: &[Record]) -> (Vec<Record>, usize) {
    let seen: HashSet<Vec<u64>> = icl_rows.iter().map(|r| row_key(r)).collect();
    let before = rows.len();
    let kept: Vec<Record> = rows.into_iter().filter(|r| !seen.contains(&row_key(r))).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

#[derive(Debug, Clone)]
pub struct BatchSettings {
    pub target_n: usize,
    /// Maximum number of backend requests.
    pub budget: usize,
    pub max_in_flight: usize,
    pub seed: u64,
    pub refinement_count: usize,
    pub retain_raw: bool,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub dataset: Dataset,
    pub diagnostics: GenerationDiagnostics,
    /// Raw completions in request order when retained.
    pub raw_responses: Vec<String>,
}

/// A hard backend error with the diagnostics gathered before it.
#[derive(Debug, Error)]
#[error("request {request} failed: {source}")]
pub struct BatchError {
    pub request: usize,
    #[source]
    pub source: GenerationError,
    pub partial: Box<GenerationDiagnostics>,
}

/// Requests completions until `target_n` new valid rows are collected or the
/// request budget runs out. Requests run in waves of at most
/// `max_in_flight`; results are merged in request order.
pub fn generate_batch(
    backend: &dyn Backend,
    prompt: &PromptText,
    params: &SamplingParams,
    schema: &Schema,
    icl_rows: &[Record],
    settings: &BatchSettings,
) -> Result<BatchOutput, BatchError> {
    let mut diag = GenerationDiagnostics {
        requested: settings.target_n,
        requests: 0,
        retries: 0,
        parsed_ok: 0,
        rejected: Vec::new(),
        copied_dropped: 0,
        surplus_dropped: 0,
        raw_responses_retained: settings.retain_raw,
        per_request: Vec::new(),
        notes: Vec::new(),
        status: BatchStatus::BudgetExhausted,
    };
    let fail = |request: usize, source: GenerationError, diag: &GenerationDiagnostics| BatchError {
        request,
        source,
        partial: Box::new(diag.clone()),
    };
    if settings.target_n == 0 || settings.budget == 0 || settings.max_in_flight == 0 {
        return Err(fail(
            0,
            GenerationError::InvalidParams("target_n, budget and max_in_flight must be at least 1".into()),
            &diag,
        ));
    }
    if let Err(e) = params.validate() {
        return Err(fail(0, e, &diag));
    }

    let mut rows: Vec<Record> = Vec::with_capacity(settings.target_n);
    let mut raw_kept = Vec::new();
    let mut accepted_per_request = 0.0f64;
    while rows.len() < settings.target_n && diag.requests < settings.budget {
        let remaining = settings.target_n - rows.len();
        // Size the wave from the observed yield; the first wave is one request.
        let wanted = if diag.requests == 0 {
            1
        } else if accepted_per_request > 0.0 {
            (remaining as f64 / accepted_per_request).ceil() as usize
        } else {
            settings.max_in_flight
        };
        let wave = wanted.clamp(1, settings.max_in_flight).min(settings.budget - diag.requests);
        let first = diag.requests;
        let results: Vec<Result<RawResponse>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (first..first + wave)
                .map(|idx| {
                    let request = GenerationRequest {
                        prompt,
                        params,
                        refinement_count: settings.refinement_count,
                        seed: derive_seed(settings.seed, idx as u64),
                    };
                    scope.spawn(move || backend.generate_raw(&request))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(GenerationError::Backend("backend thread panicked".into()))))
                .collect()
        });
        for (offset, result) in results.into_iter().enumerate() {
            let idx = first + offset;
            let raw = result.map_err(|e| fail(idx, e, &diag))?;
            diag.requests += 1;
            diag.retries += raw.retries;
            let (parsed, pd) = parse_response(&raw.text, schema);
            let (kept, copied) = filter_memorized(parsed, icl_rows);
            diag.parsed_ok += pd.parsed_ok;
            diag.copied_dropped += copied;
            diag.per_request.push(RequestDiagnostics {
                parsed_ok: pd.parsed_ok,
                rejected: pd.rejected.len(),
                copied_dropped: copied,
                retries: raw.retries,
            });
            diag.rejected.extend(pd.rejected);
            for note in pd.notes {
                diag.notes.push(format!("request {idx}: {note}"));
            }
            let room = settings.target_n - rows.len();
            diag.surplus_dropped += kept.len().saturating_sub(room);
            rows.extend(kept.into_iter().take(room));
            if settings.retain_raw {
                raw_kept.push(raw.text);
            }
        }
        accepted_per_request = (rows.len() + diag.surplus_dropped) as f64 / diag.requests as f64;
    }
    if rows.len() >= settings.target_n {
        diag.status = BatchStatus::Complete;
    }
    let dataset = Dataset::new(schema.clone(), rows).map_err(|e| fail(diag.requests, e.into(), &diag))?;
    Ok(BatchOutput {
        dataset,
        diagnostics: diag,
        raw_responses: raw_kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnSpec, Value};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn schema() -> Schema {
        Schema::new(vec![
            ColumnSpec::binary("s", "a", "b"),
            ColumnSpec::numeric("f"),
            ColumnSpec::binary("y", "0", "1"),
        ])
        .unwrap()
    }

    fn prompt() -> PromptText {
        PromptText {
            system_role: "sys".into(),
            user_body: "body".into(),
        }
    }

    #[test]
    fn fenced_block_with_header() {
        let raw = "Here you go:\n```csv\ns,f,y\na,1.5,0\nb,2,1\n```\ntrailing, prose";
        let (rows, d) = parse_response(raw, &schema());
        assert_eq!(rows.len(), 2);
        assert!(d.rejected.is_empty());
        assert_eq!(rows[1], vec![Value::Level(1), Value::Number(2.0), Value::Level(1)]);
    }

    #[test]
    fn wrong_arity_is_rejected_not_dropped() {
        let raw = "```\na,1,0\nb,2\nb,3,1\n```";
        let (rows, d) = parse_response(raw, &schema());
        assert_eq!(rows.len(), 2);
        assert_eq!(d.rejected.len(), 1);
        assert_eq!(d.rejected[0].reason, "arity");
        assert_eq!(d.rejected[0].text, "b,2");
    }

    #[test]
    fn prose_only_response() {
        let (rows, d) = parse_response("I cannot help with that request.", &schema());
        assert!(rows.is_empty());
        assert_eq!(d.notes, vec!["no tabular content".to_string()]);
        assert_eq!(d.rejected.len(), 1);
    }

    #[test]
    fn unterminated_fence_and_bad_levels() {
        let (rows, d) = parse_response("```\ns,f,y\nc,1,0\na,x,1\na,1,1", &schema());
        assert_eq!(rows.len(), 1);
        let reasons: Vec<&str> = d.rejected.iter().map(|r| r.reason.as_str()).collect();
        assert_eq!(reasons, vec!["unknown_level:s", "parse:f"]);
    }

    #[test]
    fn snippet_round_trip() {
        let rows = vec![
            vec![Value::Level(0), Value::Number(-0.125), Value::Level(1)],
            vec![Value::Level(1), Value::Number(1e-7), Value::Level(0)],
        ];
        let (back, d) = parse_response(&render_snippet(&schema(), &rows), &schema());
        assert_eq!(back, rows);
        assert!(d.rejected.is_empty() && d.notes.is_empty());
    }

    #[test]
    fn memorization_is_exact_match() {
        let icl = vec![vec![Value::Level(0), Value::Number(1.0), Value::Level(1)]];
        let near = vec![Value::Level(0), Value::Number(1.5), Value::Level(1)];
        let (kept, dropped) = filter_memorized(vec![icl[0].clone(), near.clone()], &icl);
        assert_eq!((kept, dropped), (vec![near.clone()], 1));
        let (kept, dropped) = filter_memorized(vec![near.clone()], &[]);
        assert_eq!((kept.len(), dropped), (1, 0));
    }

    /// Emits `n` rows per call, every other one malformed when `half_bad`.
    struct Scripted {
        n: usize,
        half_bad: bool,
        calls: AtomicUsize,
    }

    impl Backend for Scripted {
        fn generate_raw(&self, request: &GenerationRequest<'_>) -> Result<RawResponse> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let mut text = String::from("```\n");
            for i in 0..self.n {
                if self.half_bad && i % 2 == 1 {
                    text.push_str("a,1\n");
                } else {
                    text.push_str(&format!("a,{}.{},0\n", request.seed % 1000, i));
                }
            }
            text.push_str("```");
            Ok(RawResponse { text, retries: 0 })
        }
    }

    fn settings(target_n: usize, budget: usize) -> BatchSettings {
        BatchSettings {
            target_n,
            budget,
            max_in_flight: 2,
            seed: 5,
            refinement_count: 0,
            retain_raw: true,
        }
    }

    #[test]
    fn one_request_suffices() {
        let b = Scripted { n: 1200, half_bad: false, calls: AtomicUsize::new(0) };
        let out = generate_batch(&b, &prompt(), &SamplingParams::default(), &schema(), &[], &settings(1000, 10)).unwrap();
        assert_eq!(out.dataset.len(), 1000);
        assert_eq!(out.diagnostics.requests, 1);
        assert_eq!(out.diagnostics.surplus_dropped, 200);
        assert_eq!(out.diagnostics.status, BatchStatus::Complete);
        assert_eq!(out.raw_responses.len(), 1);
    }

    #[test]
    fn accumulates_across_requests_with_rejects() {
        let b = Scripted { n: 20, half_bad: true, calls: AtomicUsize::new(0) };
        let out = generate_batch(&b, &prompt(), &SamplingParams::default(), &schema(), &[], &settings(35, 10)).unwrap();
        assert_eq!(out.dataset.len(), 35);
        assert_eq!(out.diagnostics.requests, 4);
        assert!(out.diagnostics.per_request.iter().all(|r| r.rejected == 10));
        assert_eq!(b.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn budget_exhaustion_is_a_status() {
        let b = Scripted { n: 10, half_bad: false, calls: AtomicUsize::new(0) };
        let out = generate_batch(&b, &prompt(), &SamplingParams::default(), &schema(), &[], &settings(1000, 1)).unwrap();
        assert_eq!(out.dataset.len(), 10);
        assert_eq!(out.diagnostics.status, BatchStatus::BudgetExhausted);
    }

    struct Failing;

    impl Backend for Failing {
        fn generate_raw(&self, _: &GenerationRequest<'_>) -> Result<RawResponse> {
            Err(GenerationError::Http { status: 401, body: "denied".into() })
        }
    }

    #[test]
    fn hard_errors_propagate() {
        let err = generate_batch(&Failing, &prompt(), &SamplingParams::default(), &schema(), &[], &settings(5, 3)).unwrap_err();
        assert_eq!(err.request, 0);
        assert!(matches!(err.source, GenerationError::Http { status: 401, .. }));
    }

    #[test]
    fn sampling_params_validation() {
        assert!(SamplingParams::default().validate().is_ok());
        let p = SamplingParams { top_p: 0.0, ..SamplingParams::default() };
        assert!(p.validate().is_err());
    }
}
