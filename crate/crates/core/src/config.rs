//! Engine configuration: one TOML document drives every command.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"        # relative paths resolve against this file
//!
//! [data]
//! scm = "model.toml"              # discrete SCM; required by the mock backend
//! real_csv = "real.csv"           # optional; sampled from the SCM when absent
//! real_sample_size = 5000
//! outcome_threshold = 0.5         # binarizes a numeric outcome column
//!
//! [[schema]]                      # optional when `data.scm` is set
//! name = "x"
//! kind = "binary"
//! categories = ["0", "1"]
//!
//! [roles]
//! sensitive = "x"
//! mediators = ["z"]
//! outcome = "y"
//!
//! [prompt]
//! dataset_description = "a lending dataset"
//! ic_count = 40
//!
//! [backend]
//! kind = "mock"                   # or "remote"
//! rows_per_request = 500
//! ramps = [{ knob = "balance", step = 0.25 }]
//! ```
//!
//! Remaining sections: `binning`, `sampling`, `generation`, `evaluation`,
//! `thresholds`, `orchestrator`, `mitigation`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, BinningPolicy, ColumnKind, ColumnSpec, DataError, Dataset, Schema, SfmRoles};
use crate::derive_seed;
use crate::generation::{
    Backend, GenerationError, KnobRamp, MockBackend, RemoteBackend, RemoteConfig, SamplingParams, UreqTransport,
};
use crate::mitigation::DEFAULT_SUPPRESSION_THRESHOLD;
use crate::orchestrator::{EvaluationSettings, GenerationSettings, LoopSettings, RunSettings, Thresholds};
use crate::prompting::{IclWeighting, PromptError, PromptSpec};
use crate::scm::{DiscreteScm, ScmError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Orchestrator(#[from] crate::orchestrator::OrchestratorError),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub scm: Option<PathBuf>,
    pub real_csv: Option<PathBuf>,
    pub real_sample_size: Option<usize>,
    pub outcome_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub dataset_description: String,
    pub ic_count: usize,
    #[serde(default)]
    pub icl_weighting: IclWeighting,
    #[serde(default)]
    pub extra_directives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSection {
    Mock {
        #[serde(default = "default_rows_per_request")]
        rows_per_request: usize,
        #[serde(default)]
        ramps: Vec<KnobRamp>,
        #[serde(default)]
        corrupt_fraction: f64,
        #[serde(default)]
        fail_at_refinement: Option<usize>,
    },
    Remote(RemoteConfig),
}

fn default_rows_per_request() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationSection {
    pub suppression_threshold: f64,
    pub cor_alpha: f64,
    pub dir_repair_level: f64,
}

impl Default for MitigationSection {
    fn default() -> Self {
        Self { suppression_threshold: DEFAULT_SUPPRESSION_THRESHOLD, cor_alpha: 1.0, dir_repair_level: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub schema: Vec<ColumnSpec>,
    pub roles: SfmRoles,
    #[serde(default)]
    pub binning: BinningPolicy,
    pub prompt: PromptSection,
    pub backend: BackendSection,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default)]
    pub generation: GenerationSettings,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub orchestrator: LoopSettings,
    #[serde(default)]
    pub mitigation: MitigationSection,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A loaded config with its resolved schema and optional SCM.
#[derive(Debug, Clone)]
pub struct Engine {
    pub config: EngineConfig,
    pub schema: Schema,
    pub scm: Option<DiscreteScm>,
    /// Raw text of the config file, kept as the run snapshot.
    pub source: String,
}

impl EngineConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: EngineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: base_dir.to_path_buf(),
            source: Box::new(e),
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(self.output_dir.as_deref().unwrap_or(Path::new("out")))
    }
}

impl Engine {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let config = EngineConfig::from_toml_str(&text, &base).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse { path: path.to_path_buf(), source },
            other => other,
        })?;
        Self::from_config(config, text)
    }

    /// Cross-validates every section against the schema.
    pub fn from_config(config: EngineConfig, source: String) -> Result<Self> {
        let scm = match &config.data.scm {
            Some(p) => Some(DiscreteScm::load(config.resolve(p))?),
            None => None,
        };
        let schema = match (&scm, config.schema.is_empty()) {
            (_, false) => Schema::new(config.schema.clone())?,
            (Some(scm), true) => scm.schema()?,
            (None, true) => return Err(ConfigError::Invalid("no schema given and no SCM to derive one from".into())),
        };
        if let (Some(scm), false) = (&scm, config.schema.is_empty()) {
            if scm.schema()? != schema {
                return Err(ConfigError::Invalid("explicit schema differs from the SCM's variables".into()));
            }
        }
        if matches!(config.backend, BackendSection::Mock { .. }) && scm.is_none() {
            return Err(ConfigError::Invalid("the mock backend needs `data.scm`".into()));
        }
        if config.data.real_csv.is_none() && scm.is_none() {
            return Err(ConfigError::Invalid("set `data.real_csv` or `data.scm`".into()));
        }
        let mut eval_schema = schema.clone();
        if let Some(thr) = config.data.outcome_threshold {
            let col = schema.require(&config.roles.outcome)?;
            if schema.columns()[col].kind != ColumnKind::Numeric {
                return Err(ConfigError::Invalid("outcome_threshold needs a numeric outcome column".into()));
            }
            if !thr.is_finite() {
                return Err(ConfigError::Invalid("outcome_threshold must be finite".into()));
            }
            let mut cols = schema.columns().to_vec();
            cols[col] = ColumnSpec::binary(cols[col].name.clone(), "0", "1");
            eval_schema = Schema::new(cols)?;
        }
        config.roles.validate(&eval_schema)?;
        config.binning.validate()?;
        for name in config.binning.columns.keys() {
            schema.require(name)?;
        }
        config.sampling.validate()?;
        config.thresholds.validate()?;
        for col in config.thresholds.fidelity_columns.keys().chain(config.thresholds.max_majority_share.keys()) {
            schema.require(col)?;
        }
        if config.orchestrator.max_iterations == 0 {
            return Err(ConfigError::Invalid("orchestrator.max_iterations must be at least 1".into()));
        }
        let g = &config.generation;
        if g.target_n == 0 || g.request_budget == 0 || g.max_in_flight == 0 {
            return Err(ConfigError::Invalid("generation target_n, request_budget and max_in_flight must be at least 1".into()));
        }
        let engine = Self { config, schema, scm, source };
        engine.prompt_spec()?.validate(&engine.schema)?;
        Ok(engine)
    }

    pub fn prompt_spec(&self) -> Result<PromptSpec> {
        let p = &self.config.prompt;
        let mut spec = PromptSpec::new(&p.dataset_description, &self.schema, &self.config.roles, p.ic_count);
        spec.icl_weighting = p.icl_weighting;
        spec.extra_directives = p.extra_directives.clone();
        Ok(spec)
    }

    /// Real data: the configured CSV, or a sample from the SCM at its default
    /// knobs. A numeric outcome is binarized when a threshold is set.
    pub fn real_data(&self) -> Result<Dataset> {
        let raw = match (&self.config.data.real_csv, &self.scm) {
            (Some(p), _) => data::load_csv(self.config.resolve(p), &self.schema)?,
            (None, Some(scm)) => {
                let n = self.config.data.real_sample_size.unwrap_or(5000);
                scm.sample(n, derive_seed(self.config.seed, 0xDA7A))?
            }
            (None, None) => unreachable!("checked at load"),
        };
        self.prepare(raw)
    }

    /// Loads a dataset under the configured schema and applies the same
    /// outcome binarization as the real data.
    pub fn load_dataset(&self, path: &Path) -> Result<Dataset> {
        self.prepare(data::load_csv(path, &self.schema)?)
    }

    pub fn prepare(&self, dataset: Dataset) -> Result<Dataset> {
        match self.config.data.outcome_threshold {
            Some(t) if dataset.schema().columns()[dataset.schema().require(&self.config.roles.outcome)?].kind
                == ColumnKind::Numeric =>
            {
                Ok(data::binarize(&dataset, &self.config.roles.outcome, t)?)
            }
            _ => Ok(dataset),
        }
    }

    /// Schema after outcome binarization.
    pub fn evaluation_schema(&self) -> Result<Schema> {
        Ok(match self.config.data.outcome_threshold {
            Some(_) => {
                let col = self.schema.require(&self.config.roles.outcome)?;
                let mut cols = self.schema.columns().to_vec();
                cols[col] = ColumnSpec::binary(cols[col].name.clone(), "0", "1");
                Schema::new(cols)?
            }
            None => self.schema.clone(),
        })
    }

    /// Builds the configured backend. The remote backend reads its
    /// credential here, before any request is made.
    pub fn backend(&self) -> Result<Box<dyn Backend>> {
        match &self.config.backend {
            BackendSection::Mock { rows_per_request, ramps, corrupt_fraction, fail_at_refinement } => {
                let scm = self.scm.clone().expect("checked at load");
                let b = MockBackend::new(scm, *rows_per_request)?
                    .with_ramps(ramps.clone())?
                    .with_corruption(*corrupt_fraction)?
                    .failing_at_refinement(*fail_at_refinement);
                Ok(Box::new(b))
            }
            BackendSection::Remote(remote) => {
                let transport = UreqTransport::new(Duration::from_secs(remote.timeout_secs));
                Ok(Box::new(RemoteBackend::from_env(remote.clone(), Box::new(transport))?))
            }
        }
    }

    pub fn run_settings(&self) -> Result<RunSettings> {
        let mut evaluation = self.config.evaluation.clone();
        evaluation.repeat.binning = self.config.binning.clone();
        Ok(RunSettings {
            roles: self.config.roles.clone(),
            prompt: self.prompt_spec()?,
            sampling: self.config.sampling.clone(),
            generation: self.config.generation.clone(),
            evaluation,
            thresholds: self.config.thresholds.clone(),
            loop_settings: self.config.orchestrator.clone(),
            seed: self.config.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCM: &str = r#"
        [[variables]]
        name = "x"
        role = "sensitive"
        levels = ["0", "1"]
        cpt = [[0.3, 0.7]]

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

    fn write_scm(dir: &Path) {
        std::fs::write(dir.join("model.toml"), SCM).unwrap();
    }

    const BASE: &str = r#"
        seed = 4
        [data]
        scm = "model.toml"
        real_sample_size = 400
        [roles]
        sensitive = "x"
        mediators = ["z"]
        outcome = "y"
        [prompt]
        dataset_description = "toy"
        ic_count = 10
        [backend]
        kind = "mock"
        rows_per_request = 50
    "#;

    #[test]
    fn loads_mock_config_with_scm_schema() {
        let dir = tempfile::tempdir().unwrap();
        write_scm(dir.path());
        let path = dir.path().join("engine.toml");
        std::fs::write(&path, BASE).unwrap();
        let engine = Engine::load(&path).unwrap();
        assert_eq!(engine.schema.header_line(), "x,z,y");
        assert_eq!(engine.real_data().unwrap().len(), 400);
        assert_eq!(engine.real_data().unwrap(), engine.real_data().unwrap());
        assert!(engine.backend().is_ok());
        assert_eq!(engine.config.output_dir(), dir.path().join("out"));
    }

    #[test]
    fn rejects_unknown_role_column_and_two_backends() {
        let dir = tempfile::tempdir().unwrap();
        write_scm(dir.path());
        let bad = BASE.replace("outcome = \"y\"", "outcome = \"nope\"");
        let cfg = EngineConfig::from_toml_str(&bad, dir.path()).unwrap();
        assert!(Engine::from_config(cfg, bad).is_err());
        let two = format!("{BASE}\nendpoint = \"http://x\"");
        assert!(EngineConfig::from_toml_str(&two, dir.path()).is_err());
    }

    #[test]
    fn remote_without_credential_fails_naming_variable() {
        let dir = tempfile::tempdir().unwrap();
        write_scm(dir.path());
        let text = BASE.replace(
            "kind = \"mock\"\n        rows_per_request = 50",
            "kind = \"remote\"\n        api_key_env = \"FAIRSYNTH_CONFIG_TEST_UNSET_KEY\"",
        );
        let cfg = EngineConfig::from_toml_str(&text, dir.path()).unwrap();
        let engine = Engine::from_config(cfg, text).unwrap();
        let err = engine.backend().err().unwrap().to_string();
        assert!(err.contains("FAIRSYNTH_CONFIG_TEST_UNSET_KEY"), "{err}");
    }
}
