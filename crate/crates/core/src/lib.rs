//! Data preparation and adapter planning for instruction-tuned chat models.

pub mod budget;
pub mod corpus;
pub mod filters;
pub mod lora;
pub mod pipeline;
pub mod prompts;
pub mod rng;
pub mod scoring;

pub use budget::{BudgetConfig, BudgetError, Tokenizer, TokenizerKind};
pub use corpus::{ConversationPath, CorpusError, Dataset, Message, Payload, Record, RecordKind, Role};
pub use filters::FilterVerdict;
pub use lora::{ArchSpec, LoraConfig, LoraError, LoraPlan};
pub use prompts::{PromptError, PromptScheme};
pub use rng::Lcg64;
pub use scoring::{OnScorerError, ScoreError, Scorer};
pub use pipeline::{PipelineConfig, PipelineError, PipelineReport, Problem};
