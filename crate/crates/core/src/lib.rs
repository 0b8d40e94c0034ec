//! Attention-based detection and mitigation of object hallucination in
//! vision-language decoders, at desk scale.
//!
//! The crate pairs two decoder backends — a genuine micro-transformer and a
//! scripted oracle with planted hallucinatory image tokens — with the
//! analysis (OL-VAR, layer profiling, top-K candidate selection), the
//! zero-out detection/mitigation pipeline, evaluation metrics (CHAIR, POPE,
//! detection confusion metrics, ROC/PR curves), and a binary trace container
//! for interchange with real-model dumps.

pub mod analysis;
pub mod config;
pub mod extraction;
pub mod image;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scenario;
pub mod seeds;
pub mod trace;
pub mod vocab;

pub use analysis::{LayerProfile, OlvarOutcome, TextToImageRow, ZeroOutSet};
pub use config::ModelConfig;
pub use extraction::ObjectMention;
pub use image::{ImageSpec, PatchSet, PlacedObject};
pub use model::{
    AttentionRow, AttentionTensor, DecodeParams, GenerationRecord, InterventionSpec, ModelBackend,
    PopeAnswer, Stage, Strategy,
};
pub use pipeline::{
    DetectionMode, DetectionOutcome, MentionAggregation, MitigationOutcome, PipelineConfig,
    Verdict,
};
pub use scenario::{Corpus, CorpusConfig, PlantedHit, Scenario};
pub use vocab::{ClassId, ObjectVocabulary, TokenId, Tokenizer};
