//! Fairness-constrained synthetic tabular data generation and evaluation.

pub mod config;
pub mod data;
pub mod eval;
pub mod generation;
pub mod mitigation;
pub mod orchestrator;
pub mod prompting;
pub mod scm;
pub(crate) mod stats;

pub use config::{ConfigError, Engine, EngineConfig};
pub use data::{
    BinSpec, BinStrategy, BinningPolicy, ColumnKind, ColumnSpec, DataError, Dataset, Record,
    ResolvedRoles, Schema, SfmRoles, Value,
};
pub use eval::causal::{CausalEffects, EffectModel};
pub use eval::counterfactual::CounterfactualMetrics;
pub use eval::predictive::{Classifier, FidelityReport, Scorer, TrainerConfig, UtilityReport};
pub use eval::EvalError;
pub use generation::{Backend, BatchStatus, GenerationDiagnostics, GenerationError, MockBackend, RemoteBackend, SamplingParams};
pub use mitigation::{Method as MitigationMethod, MitigationAudit, MitigationError, MitigationOutcome};
pub use orchestrator::{RunReport, RunStatus, Thresholds, Violation};
pub use prompting::{IclWeighting, PromptError, PromptSpec, PromptText};
pub use scm::{DiscreteScm, GroundTruthEffects, ScmError};

/// Derives an independent child seed (splitmix64 over the pair).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
