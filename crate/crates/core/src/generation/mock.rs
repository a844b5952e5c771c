use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_snippet, Backend, GenerationError, GenerationRequest, RawResponse, Result};
use crate::data::Schema;
use crate::derive_seed;
use crate::scm::DiscreteScm;

/// A knob that moves by `step` per refinement directive, clamped to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnobRamp {
    pub knob: String,
    pub step: f64,
}

/// Samples rows from a discrete SCM instead of calling a language model.
/// Knob values follow the ramps as refinements accumulate.
#[derive(Debug, Clone)]
pub struct MockBackend {
    scm: DiscreteScm,
    schema: Schema,
    ramps: Vec<KnobRamp>,
    rows_per_request: usize,
    corrupt_fraction: f64,
    fail_at_refinement: Option<usize>,
}

impl MockBackend {
    pub fn new(scm: DiscreteScm, rows_per_request: usize) -> Result<Self> {
        if rows_per_request == 0 {
            return Err(GenerationError::InvalidParams("rows_per_request must be positive".into()));
        }
        let schema = scm.schema()?;
        Ok(Self {
            scm,
            schema,
            ramps: Vec::new(),
            rows_per_request,
            corrupt_fraction: 0.0,
            fail_at_refinement: None,
        })
    }

    pub fn with_ramps(mut self, ramps: Vec<KnobRamp>) -> Result<Self> {
        let defaults = self.scm.default_knobs();
        for r in &ramps {
            if !defaults.contains_key(&r.knob) {
                return Err(GenerationError::InvalidParams(format!("unknown knob `{}`", r.knob)));
            }
            if !r.step.is_finite() {
                return Err(GenerationError::InvalidParams(format!("knob `{}` step is not finite", r.knob)));
            }
        }
        self.ramps = ramps;
        Ok(self)
    }

    /// Replaces this fraction of emitted rows with malformed lines.
    pub fn with_corruption(mut self, fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(GenerationError::InvalidParams(format!("corrupt fraction {fraction} outside [0, 1]")));
        }
        self.corrupt_fraction = fraction;
        Ok(self)
    }

    /// Fails every request once the prompt carries this many refinements.
    pub fn failing_at_refinement(mut self, refinements: Option<usize>) -> Self {
        self.fail_at_refinement = refinements;
        self
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn scm(&self) -> &DiscreteScm {
        &self.scm
    }

    /// Knob values after `refinements` directives.
    pub fn knobs_at(&self, refinements: usize) -> BTreeMap<String, f64> {
        let mut knobs = self.scm.default_knobs();
        for r in &self.ramps {
            if let Some(v) = knobs.get_mut(&r.knob) {
                *v = (*v + r.step * refinements as f64).clamp(0.0, 1.0);
            }
        }
        knobs
    }
}

impl Backend for MockBackend {
    fn generate_raw(&self, request: &GenerationRequest<'_>) -> Result<RawResponse> {
        if self.fail_at_refinement.is_some_and(|k| request.refinement_count >= k) {
            return Err(GenerationError::Backend(format!(
                "scripted failure at refinement {}",
                request.refinement_count
            )));
        }
        let knobs = self.knobs_at(request.refinement_count);
        let ds = self.scm.mock_generate(&knobs, self.rows_per_request, request.seed)?;
        let mut text = render_snippet(&self.schema, ds.rows());
        if self.corrupt_fraction > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(request.seed, 0xC0));
            let lines: Vec<String> = text
                .lines()
                .enumerate()
                .map(|(i, l)| {
                    let is_row = i >= 2 && !l.starts_with("```");
                    if is_row && rng.gen_bool(self.corrupt_fraction) {
                        // One field too many: an arity error.
                        format!("{l},?")
                    } else {
                        l.to_string()
                    }
                })
                .collect();
            text = lines.join("\n");
        }
        Ok(RawResponse { text, retries: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{parse_response, SamplingParams};
    use crate::prompting::PromptText;

    const KNOBBED: &str = r#"
        [[knobs]]
        name = "balance"
        default = 0.0

        [[variables]]
        name = "x"
        role = "sensitive"
        levels = ["minority", "majority"]
        cpt = [[{ biased = 0.2, fair = 0.5, knob = "balance" },
                { biased = 0.8, fair = 0.5, knob = "balance" }]]

        [[variables]]
        name = "y"
        role = "outcome"
        levels = ["0", "1"]
        parents = ["x"]
        cpt = [[0.7, 0.3], [0.4, 0.6]]
    "#;

    fn raw(b: &MockBackend, refinements: usize, seed: u64) -> Result<RawResponse> {
        let prompt = PromptText { system_role: String::new(), user_body: String::new() };
        let params = SamplingParams::default();
        b.generate_raw(&GenerationRequest { prompt: &prompt, params: &params, refinement_count: refinements, seed })
    }

    fn backend(rows: usize) -> MockBackend {
        MockBackend::new(DiscreteScm::from_toml_str(KNOBBED).unwrap(), rows).unwrap()
    }

    #[test]
    fn emits_parseable_rows() {
        let b = backend(10);
        let text = raw(&b, 0, 1).unwrap().text;
        let (rows, d) = parse_response(&text, b.schema());
        assert_eq!(rows.len(), 10);
        assert!(d.rejected.is_empty());
        assert_eq!(text, raw(&b, 0, 1).unwrap().text);
    }

    #[test]
    fn ramp_schedule_clamps() {
        let b = backend(1)
            .with_ramps(vec![KnobRamp { knob: "balance".into(), step: 0.25 }])
            .unwrap();
        let at = |r| b.knobs_at(r)["balance"];
        assert_eq!([at(0), at(1), at(2), at(4), at(9)], [0.0, 0.25, 0.5, 1.0, 1.0]);
        assert!(backend(1).with_ramps(vec![KnobRamp { knob: "nope".into(), step: 0.1 }]).is_err());
    }

    #[test]
    fn corruption_and_scripted_failure() {
        let b = backend(200).with_corruption(0.5).unwrap();
        let (rows, d) = parse_response(&raw(&b, 0, 3).unwrap().text, b.schema());
        assert_eq!(rows.len() + d.rejected.len(), 200);
        assert!(d.rejected.len() > 60 && d.rejected.len() < 140);
        assert!(d.rejected.iter().all(|r| r.reason == "arity"));
        let f = backend(5).failing_at_refinement(Some(1));
        assert!(raw(&f, 0, 0).is_ok());
        assert!(matches!(raw(&f, 1, 0), Err(GenerationError::Backend(_))));
    }
}
