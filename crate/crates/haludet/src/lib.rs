//! Tool-augmented detection of hallucinations in model responses.
//!
//! The pipeline splits a response into sentences, verifies each sentence
//! with an appropriate tool (search, exact arithmetic, a code sandbox,
//! word counting, or a semantic judge), then reflects on the collected
//! verdicts before reporting sentence-level labels and evidence. Sessions
//! can be driven by a live model endpoint, a scripted turn queue, or a
//! recorded replay, and every session leaves behind a trajectory that can
//! be filtered and exported as fine-tuning data.

pub mod action;
pub mod backend;
pub mod engine;
pub mod eval;
pub mod forge;
pub mod toolbox;
pub mod types;

pub use action::{
    parse_step, serialize_step, ActionParseError, AgentStep, ArgValue, Observation,
    ObservationSource, ToolCall,
};
pub use backend::{
    build_backend, BackendConfig, BackendError, BackendKind, ChatMessage, ModelBackend,
    ReplayBackend, ReplayFixture, ReplayTurn, Role, ScriptedBackend,
};
pub use engine::{
    Engine, EngineConfig, SegmentationMode, SessionError, SessionFailure, SessionOutcome,
};
pub use eval::{
    align_claims, evaluate_response, evaluate_sentence, load_claim_dataset, load_qa_dataset,
    response_metrics, sentence_metrics, ClaimGroup, ClaimRecord, ConfusionMatrix, EvalError,
    EvalLevel, EvalReport,
};
pub use forge::{
    export_finetune, load_trajectories, save_trajectories, synthesize, validate_trajectory,
    FinetuneExample, FinetuneMessage, RejectionReason, StoredTrajectory, SynthesisResult,
    Trajectory, TrajectoryStep, YieldReport,
};
pub use toolbox::{SandboxConfig, ToolError, ToolKind, ToolSpec, Toolbox, ToolboxDeps};
pub use types::{
    aggregate_response_label, detect_language, DetectionInput, DetectionReport, Label, Language,
    SentenceVerdict, TaskType,
};
