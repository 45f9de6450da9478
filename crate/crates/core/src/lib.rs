//! Core library for a dual-role Questioner–Solver translation pipeline:
//! corpus preprocessing, LLM gateway, compile/run sandbox, the sample state
//! machine, the dataset store, and the evaluation metric suite.

pub mod corpus;
pub mod eval;
pub mod gateway;
pub mod pipeline;
pub mod sandbox;
pub mod store;

pub use corpus::{PreprocessConfig, SourceLanguage, SourceUnit};
pub use eval::{CodeBleuScore, EvalRecord, MetricReport};
pub use gateway::{BackendConfig, DialogueMemory, LlmGateway, ReplayBackend};
pub use pipeline::{PipelineConfig, RunManifest, SampleResult, SampleStatus, Stage};
pub use sandbox::{CompileOutcome, DuoMode, RunOutcome, Sandbox, SandboxConfig, Toolchain};
pub use store::{CodePair, Dialogue, DialogueTurn, QSPair, SplitSpec};
