//! Decoder backends: shared record types, the backend contract, and the
//! image-token intervention machinery.
//!
//! Two backends implement the contract: a genuine micro-transformer
//! ([`micro::MicroBackend`]) for numeric invariants, and a deterministic
//! scripted oracle ([`scripted::ScriptedBackend`]) whose emissions follow a
//! stated rule exactly.

pub mod intervention;
pub mod micro;
pub mod scripted;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig};
use crate::vocab::{ClassId, TokenId};

pub use intervention::{apply_intervention, InterventionReport};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("sequence length {len} exceeds configured maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("position {position} out of range for sequence length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("layer {layer} out of range 1..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("token id {0} out of range for vocabulary")]
    TokenOutOfRange(u32),
    #[error("intervention position {position} out of range for {n} image tokens")]
    InterventionOutOfRange { position: usize, n: usize },
    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),
    #[error("record has no per-step token probabilities")]
    StepProbsMissing,
    #[error("layer {0} was not captured in this record")]
    LayerNotCaptured(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Replacement strategy for selected image tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Replace with the all-zeros vector.
    Zero,
    /// Replace with the arithmetic mean of all original image entries.
    Average,
    /// Replace with a seeded uniform copy of a non-selected entry.
    Random,
    /// Replace with the first existing non-selected grid neighbor
    /// (left, right, up, down); falls back to zero.
    Neighbor,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Zero,
        Strategy::Average,
        Strategy::Random,
        Strategy::Neighbor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Zero => "zero",
            Strategy::Average => "average",
            Strategy::Random => "random",
            Strategy::Neighbor => "neighbor",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Strategy::Zero => 0,
            Strategy::Average => 1,
            Strategy::Random => 2,
            Strategy::Neighbor => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Strategy::ALL.into_iter().find(|s| s.code() == code)
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(Strategy::Zero),
            "average" => Ok(Strategy::Average),
            "random" => Ok(Strategy::Random),
            "neighbor" => Ok(Strategy::Neighbor),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pipeline stage at which the replacement is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Decoder input space, after projection.
    InputToken,
    /// After the encoder sublayer, before projection.
    EncoderOutput,
    /// Raw patch feature block.
    ImagePatch,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::InputToken, Stage::EncoderOutput, Stage::ImagePatch];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::InputToken => "input-token",
            Stage::EncoderOutput => "encoder-output",
            Stage::ImagePatch => "image-patch",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Stage::InputToken => 0,
            Stage::EncoderOutput => 1,
            Stage::ImagePatch => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Stage::ALL.into_iter().find(|s| s.code() == code)
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "input-token" => Ok(Stage::InputToken),
            "encoder-output" => Ok(Stage::EncoderOutput),
            "image-patch" => Ok(Stage::ImagePatch),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which image-token positions are replaced, how, and where in the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionSpec {
    /// 0-based positions within the image block.
    pub positions: BTreeSet<usize>,
    pub strategy: Strategy,
    pub stage: Stage,
    /// Seed for the random strategy's source sampling.
    pub seed: u64,
}

impl InterventionSpec {
    pub fn zero(positions: BTreeSet<usize>) -> Self {
        InterventionSpec {
            positions,
            strategy: Strategy::Zero,
            stage: Stage::InputToken,
            seed: 0,
        }
    }

    pub fn validate(&self, n_image_tokens: usize) -> Result<(), ModelError> {
        for &p in &self.positions {
            if p >= n_image_tokens {
                return Err(ModelError::InterventionOutOfRange {
                    position: p,
                    n: n_image_tokens,
                });
            }
        }
        Ok(())
    }
}

/// Greedy-decoding parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_new: usize,
    /// Recorded for reproducibility bookkeeping; greedy decoding itself is
    /// deterministic.
    pub seed: u64,
}

/// One attention row: the head-averaged scores from `query_pos` over keys
/// `0..=query_pos`. Future (causal-masked) positions are not stored and are
/// exactly zero by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub query_pos: usize,
    pub scores: Vec<f32>,
}

impl AttentionRow {
    pub fn validate(&self) -> Result<(), String> {
        if self.scores.len() != self.query_pos + 1 {
            return Err(format!(
                "row at {} has {} scores, expected {}",
                self.query_pos,
                self.scores.len(),
                self.query_pos + 1
            ));
        }
        let mut sum = 0.0f64;
        for &s in &self.scores {
            if !(0.0..=1.0).contains(&s) {
                return Err(format!("score {s} outside [0, 1] at row {}", self.query_pos));
            }
            sum += f64::from(s);
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("row {} sums to {sum}", self.query_pos));
        }
        Ok(())
    }

    pub fn score(&self, key_pos: usize) -> f32 {
        self.scores.get(key_pos).copied().unwrap_or(0.0)
    }
}

/// Head-averaged causal attention scores for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTensor {
    /// 1-based layer index.
    pub layer: usize,
    /// Rows in strictly increasing `query_pos` order.
    pub rows: Vec<AttentionRow>,
}

impl AttentionTensor {
    pub fn validate(&self) -> Result<(), String> {
        if self.layer == 0 {
            return Err("layer indices are 1-based".into());
        }
        let mut prev = None;
        for row in &self.rows {
            row.validate()?;
            if let Some(p) = prev {
                if row.query_pos <= p {
                    return Err("rows not in increasing query order".into());
                }
            }
            prev = Some(row.query_pos);
        }
        Ok(())
    }

    pub fn row_for(&self, query_pos: usize) -> Option<&AttentionRow> {
        self.rows
            .binary_search_by_key(&query_pos, |r| r.query_pos)
            .ok()
            .map(|i| &self.rows[i])
    }
}

/// Everything captured from one inference: the token sequences, the
/// requested attention snapshots, and the intervention that was applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// Image placeholder tokens (a contiguous prefix of `image_len`)
    /// followed by the text prompt.
    pub input_tokens: Vec<TokenId>,
    /// Image-token block length `N`.
    pub image_len: usize,
    pub output_tokens: Vec<TokenId>,
    /// Probability of each emitted token at its decode step. Present for
    /// native generations; absent on imported traces.
    pub step_probs: Option<Vec<f32>>,
    /// Captured layer -> attention rows for every generated position.
    pub captured: BTreeMap<usize, AttentionTensor>,
    pub intervention: Option<InterventionSpec>,
    pub backend_id: String,
    pub decode: DecodeParams,
    /// Set when an imported trace declared unnormalized rows and they were
    /// renormalized on the way in.
    pub renormalized_on_import: bool,
}

impl GenerationRecord {
    pub fn input_len(&self) -> usize {
        self.input_tokens.len()
    }

    /// Absolute sequence position of output index `i`.
    pub fn output_position(&self, i: usize) -> usize {
        self.input_len() + i
    }

    pub fn total_len(&self) -> usize {
        self.input_len() + self.output_tokens.len()
    }

    pub fn tensor(&self, layer: usize) -> Result<&AttentionTensor, ModelError> {
        self.captured
            .get(&layer)
            .ok_or(ModelError::LayerNotCaptured(layer))
    }

    /// Full token sequence, input then output.
    pub fn sequence(&self) -> Vec<TokenId> {
        let mut seq = self.input_tokens.clone();
        seq.extend_from_slice(&self.output_tokens);
        seq
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), String> {
        if self.image_len > self.input_tokens.len() {
            return Err("image block longer than input".into());
        }
        if self.output_tokens.len() > config.max_new {
            return Err(format!(
                "output length {} exceeds budget {}",
                self.output_tokens.len(),
                config.max_new
            ));
        }
        for (layer, tensor) in &self.captured {
            if *layer != tensor.layer {
                return Err("captured map key disagrees with tensor layer".into());
            }
            if *layer == 0 || *layer > config.layers {
                return Err(format!("captured layer {layer} outside 1..={}", config.layers));
            }
            tensor.validate()?;
        }
        if let Some(probs) = &self.step_probs {
            if probs.len() != self.output_tokens.len() {
                return Err("step_probs length disagrees with output".into());
            }
        }
        Ok(())
    }
}

/// Yes/no answer from a presence probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PopeAnswer {
    Yes,
    No,
    /// The backend produced something that parses as neither.
    Unparseable,
}

/// Behavioral contract every decoder backend satisfies: deterministic under
/// fixed seed and inputs, and attention capture never alters outputs.
pub trait ModelBackend: Send + Sync {
    fn config(&self) -> &ModelConfig;

    fn backend_id(&self) -> &'static str;

    /// Greedy decode with optional image-token intervention, capturing
    /// head-averaged attention rows for generated positions at the
    /// requested layers.
    fn generate(
        &self,
        intervention: Option<&InterventionSpec>,
        params: &DecodeParams,
        capture_layers: &BTreeSet<usize>,
    ) -> Result<GenerationRecord, ModelError>;

    /// Project the hidden state at (`position`, `layer`) through the output
    /// unembedding and return the `top_k` vocabulary entries by probability,
    /// ties broken by lower token id. `top_k` is clamped to the vocabulary.
    fn logit_lens(
        &self,
        record: &GenerationRecord,
        position: usize,
        layer: usize,
        top_k: usize,
    ) -> Result<Vec<(TokenId, f64)>, ModelError>;

    /// Answer a yes/no presence probe about `class` under an optional
    /// intervention. `prompt` carries the rendered question tokens.
    fn answer_presence(
        &self,
        class: ClassId,
        prompt: &[TokenId],
        intervention: Option<&InterventionSpec>,
    ) -> Result<PopeAnswer, ModelError>;
}

/// Rank a probability distribution: top-k by probability, ties broken by
/// lower token id, k clamped to the vocabulary size.
pub fn rank_top_k(dist: &[f64], top_k: usize) -> Vec<(TokenId, f64)> {
    let k = top_k.min(dist.len());
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| (TokenId(i as u32), dist[i]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_and_stage_codes_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::from_code(s.code()), Some(s));
            assert_eq!(s.as_str().parse::<Strategy>(), Ok(s));
        }
        for s in Stage::ALL {
            assert_eq!(Stage::from_code(s.code()), Some(s));
            assert_eq!(s.as_str().parse::<Stage>(), Ok(s));
        }
    }

    #[test]
    fn attention_row_validation() {
        let good = AttentionRow {
            query_pos: 2,
            scores: vec![0.25, 0.25, 0.5],
        };
        assert!(good.validate().is_ok());

        let short = AttentionRow {
            query_pos: 2,
            scores: vec![0.5, 0.5],
        };
        assert!(short.validate().is_err());

        let unnormalized = AttentionRow {
            query_pos: 1,
            scores: vec![0.4, 0.4],
        };
        assert!(unnormalized.validate().is_err());
    }

    #[test]
    fn rank_top_k_breaks_ties_by_lower_id() {
        let dist = vec![0.25, 0.25, 0.25, 0.25];
        let ranked = rank_top_k(&dist, 2);
        assert_eq!(ranked[0].0, TokenId(0));
        assert_eq!(ranked[1].0, TokenId(1));
    }

    #[test]
    fn rank_top_k_clamps() {
        let dist = vec![0.7, 0.3];
        assert_eq!(rank_top_k(&dist, 10).len(), 2);
    }

    #[test]
    fn intervention_positions_validated() {
        let spec = InterventionSpec::zero([3, 9].into_iter().collect());
        assert!(spec.validate(10).is_ok());
        assert_eq!(
            spec.validate(9),
            Err(ModelError::InterventionOutOfRange { position: 9, n: 9 })
        );
    }
}
