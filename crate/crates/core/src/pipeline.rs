//! Detection and mitigation by zeroing out candidate hallucinatory image
//! tokens, plus removal-fraction sweeps and the baseline detection scorers.
//!
//! Detection: extract object mentions from an initial generation, select
//! each mention's top-K attended image tokens at the selection layer, zero
//! them, regenerate, and call a mention hallucinated iff its class is absent
//! from the regeneration. Grouped mode zeroes the union of every mention's
//! candidates in one pass; iterative mode checks each mention in isolation.
//!
//! Mitigation: union the candidate sets of the detected hallucinations and
//! regenerate once with that final set zeroed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    max_pooled_row, select_topk_hits, text_to_image_rows, AnalysisError, ZeroOutSet,
};
use crate::extraction::{contains_class, extract_object_mentions, ExtractionError, ObjectMention};
use crate::model::{
    DecodeParams, GenerationRecord, InterventionSpec, ModelBackend, ModelError, Stage, Strategy,
};
use crate::scenario::Scenario;
use crate::vocab::{ClassId, ObjectVocabulary, TokenId};

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
}

/// One joint pass for all mentions, or one pass per mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionMode {
    Grouped,
    Iterative,
}

impl FromStr for DetectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grouped" => Ok(DetectionMode::Grouped),
            "iterative" => Ok(DetectionMode::Iterative),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl fmt::Display for DetectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectionMode::Grouped => "grouped",
            DetectionMode::Iterative => "iterative",
        })
    }
}

/// How a multi-subtoken mention's rows combine before selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MentionAggregation {
    /// Union of each subtoken's top-K set (default).
    TopKUnion,
    /// Element-wise max over subtoken rows, then one top-K.
    MaxPooled,
}

impl FromStr for MentionAggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "top-k-union" | "union" => Ok(MentionAggregation::TopKUnion),
            "max-pooled" => Ok(MentionAggregation::MaxPooled),
            other => Err(format!("unknown aggregation `{other}`")),
        }
    }
}

/// Full pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Candidate-HIT count per mention subtoken.
    pub k: usize,
    /// 1-based selection layer.
    pub layer: usize,
    pub strategy: Strategy,
    pub stage: Stage,
    pub mode: DetectionMode,
    pub aggregation: MentionAggregation,
    /// Seed recorded into the intervention spec (random strategy sampling).
    pub intervention_seed: u64,
    pub decode: DecodeParams,
}

impl PipelineConfig {
    /// Reference defaults: top-5 selection, grouped detection, zero-out at
    /// the input-token stage. The layer is expected to come from layer
    /// profiling.
    pub fn with_layer(layer: usize) -> Self {
        PipelineConfig {
            k: 5,
            layer,
            strategy: Strategy::Zero,
            stage: Stage::InputToken,
            mode: DetectionMode::Grouped,
            aggregation: MentionAggregation::TopKUnion,
            intervention_seed: 0,
            decode: DecodeParams {
                max_new: 64,
                seed: 0,
            },
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 {
            return Err(PipelineError::InvalidConfig("K must be >= 1".into()));
        }
        if self.layer == 0 {
            return Err(PipelineError::InvalidConfig("layer is 1-based".into()));
        }
        Ok(())
    }

    fn spec(&self, positions: ZeroOutSet) -> InterventionSpec {
        InterventionSpec {
            positions,
            strategy: self.strategy,
            stage: self.stage,
            seed: self.intervention_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Real,
    Hallucinated,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Real => "real",
            Verdict::Hallucinated => "hallucinated",
        })
    }
}

/// Verdict for one extracted mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionVerdict {
    pub mention: ObjectMention,
    pub zero_out: ZeroOutSet,
    pub verdict: Verdict,
    /// Index into [`DetectionOutcome::regenerations`] of the output used
    /// for this mention's absence check.
    pub regeneration: usize,
}

/// Everything produced by one detection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub initial: GenerationRecord,
    pub mentions: Vec<MentionVerdict>,
    pub regenerations: Vec<GenerationRecord>,
    pub mode: DetectionMode,
}

impl DetectionOutcome {
    pub fn detected_classes(&self) -> BTreeSet<ClassId> {
        self.mentions
            .iter()
            .filter(|m| m.verdict == Verdict::Hallucinated)
            .map(|m| m.mention.class)
            .collect()
    }

    pub fn verdict_for_class(&self, class: ClassId) -> Option<Verdict> {
        self.mentions
            .iter()
            .find(|m| m.mention.class == class)
            .map(|m| m.verdict)
    }
}

/// Candidate zero-out set for one mention from the initial record.
pub fn mention_zero_out(
    record: &GenerationRecord,
    mention: &ObjectMention,
    config: &PipelineConfig,
) -> Result<ZeroOutSet, PipelineError> {
    let positions: BTreeSet<usize> = mention
        .output_span()
        .map(|i| record.output_position(i))
        .collect();
    let rows = text_to_image_rows(record, config.layer, &positions)?;
    let set = match config.aggregation {
        MentionAggregation::TopKUnion => select_topk_hits(&rows, config.k)?,
        MentionAggregation::MaxPooled => {
            let pooled = max_pooled_row(&rows)?;
            select_topk_hits(std::slice::from_ref(&pooled), config.k)?
        }
    };
    Ok(set)
}

/// Run detection. No mentions in the initial output is an empty outcome,
/// not an error.
pub fn detect(
    backend: &dyn ModelBackend,
    vocab: &ObjectVocabulary,
    config: &PipelineConfig,
) -> Result<DetectionOutcome, PipelineError> {
    config.validate()?;
    if config.layer > backend.config().layers {
        return Err(PipelineError::InvalidConfig(format!(
            "layer {} outside 1..={}",
            config.layer,
            backend.config().layers
        )));
    }
    let capture: BTreeSet<usize> = [config.layer].into_iter().collect();
    let initial = backend.generate(None, &config.decode, &capture)?;
    let mentions = extract_object_mentions(&initial.output_tokens, vocab);
    if mentions.is_empty() {
        return Ok(DetectionOutcome {
            initial,
            mentions: Vec::new(),
            regenerations: Vec::new(),
            mode: config.mode,
        });
    }

    let zero_outs: Vec<ZeroOutSet> = mentions
        .iter()
        .map(|m| mention_zero_out(&initial, m, config))
        .collect::<Result<_, _>>()?;

    let mut regenerations = Vec::new();
    let mut verdicts = Vec::new();
    match config.mode {
        DetectionMode::Grouped => {
            let joint: ZeroOutSet = zero_outs.iter().flatten().copied().collect();
            let regen = backend.generate(
                Some(&config.spec(joint)),
                &config.decode,
                &BTreeSet::new(),
            )?;
            for (mention, zero_out) in mentions.into_iter().zip(zero_outs) {
                let present = contains_class(&regen.output_tokens, mention.class, vocab)?;
                verdicts.push(MentionVerdict {
                    mention,
                    zero_out,
                    verdict: if present { Verdict::Real } else { Verdict::Hallucinated },
                    regeneration: 0,
                });
            }
            regenerations.push(regen);
        }
        DetectionMode::Iterative => {
            for (mention, zero_out) in mentions.into_iter().zip(zero_outs) {
                let regen = backend.generate(
                    Some(&config.spec(zero_out.clone())),
                    &config.decode,
                    &BTreeSet::new(),
                )?;
                let present = contains_class(&regen.output_tokens, mention.class, vocab)?;
                verdicts.push(MentionVerdict {
                    mention,
                    zero_out,
                    verdict: if present { Verdict::Real } else { Verdict::Hallucinated },
                    regeneration: regenerations.len(),
                });
                regenerations.push(regen);
            }
        }
    }
    Ok(DetectionOutcome {
        initial,
        mentions: verdicts,
        regenerations,
        mode: config.mode,
    })
}

/// Outcome of detection followed by the final zero-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationOutcome {
    pub detection: DetectionOutcome,
    /// Union of the detected hallucinations' candidate sets.
    pub z_final: ZeroOutSet,
    pub detected_classes: BTreeSet<ClassId>,
    pub final_output: Vec<TokenId>,
    /// |Z_final| and its ratio to the image-token count.
    pub zeroed_count: usize,
    pub zeroed_ratio: f64,
}

/// Run detection, then regenerate once with the union of the detected
/// hallucinations' candidate sets zeroed. With nothing detected the initial
/// output is returned unchanged.
pub fn mitigate(
    backend: &dyn ModelBackend,
    vocab: &ObjectVocabulary,
    config: &PipelineConfig,
) -> Result<MitigationOutcome, PipelineError> {
    let detection = detect(backend, vocab, config)?;
    let mut z_final = ZeroOutSet::new();
    for m in &detection.mentions {
        if m.verdict == Verdict::Hallucinated {
            z_final.extend(m.zero_out.iter().copied());
        }
    }
    let detected_classes = detection.detected_classes();
    let final_output = if z_final.is_empty() {
        detection.initial.output_tokens.clone()
    } else {
        backend
            .generate(
                Some(&config.spec(z_final.clone())),
                &config.decode,
                &BTreeSet::new(),
            )?
            .output_tokens
    };
    let n = backend.config().image_tokens;
    Ok(MitigationOutcome {
        detection,
        zeroed_count: z_final.len(),
        zeroed_ratio: z_final.len() as f64 / n as f64,
        z_final,
        detected_classes,
        final_output,
    })
}

/// One point of a removal-fraction sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalPoint {
    pub k: usize,
    pub hallucinated_removed: f64,
    pub real_removed: f64,
    pub hallucinated_total: usize,
    pub real_total: usize,
}

/// For each K, zero each mention's own top-K candidates in isolation and
/// count how many expected-real versus expected-hallucinated classes
/// disappear from the per-mention regeneration.
pub fn removal_fraction_sweep<'a, F>(
    corpus: &'a [Scenario],
    make_backend: F,
    vocab: &ObjectVocabulary,
    base: &PipelineConfig,
    ks: &[usize],
) -> Result<Vec<RemovalPoint>, PipelineError>
where
    F: Fn(&'a Scenario) -> Result<Box<dyn ModelBackend + 'a>, ModelError>,
{
    if ks.is_empty() {
        return Err(PipelineError::InvalidConfig("empty K range".into()));
    }
    if corpus.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    base.validate()?;
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 {
            return Err(PipelineError::InvalidConfig("K must be >= 1".into()));
        }
        let mut removed = BTreeMap::from([(false, 0usize), (true, 0usize)]);
        let mut total = BTreeMap::from([(false, 0usize), (true, 0usize)]);
        for scenario in corpus {
            let backend = make_backend(scenario)?;
            let config = PipelineConfig { k, ..base.clone() };
            let capture: BTreeSet<usize> = [config.layer].into_iter().collect();
            let initial = backend.generate(None, &config.decode, &capture)?;
            let mentions = extract_object_mentions(&initial.output_tokens, vocab);
            let mut seen = BTreeSet::new();
            for mention in mentions {
                if !seen.insert(mention.class) {
                    continue;
                }
                let hallucinated = if scenario.expected_hallucinated.contains(&mention.class) {
                    true
                } else if scenario.expected_real.contains(&mention.class) {
                    false
                } else {
                    continue;
                };
                let zero_out = mention_zero_out(&initial, &mention, &config)?;
                let regen = backend.generate(
                    Some(&config.spec(zero_out)),
                    &config.decode,
                    &BTreeSet::new(),
                )?;
                *total.get_mut(&hallucinated).expect("keyed") += 1;
                if !contains_class(&regen.output_tokens, mention.class, vocab)? {
                    *removed.get_mut(&hallucinated).expect("keyed") += 1;
                }
            }
        }
        let frac = |hallucinated: bool| {
            let t = total[&hallucinated];
            if t == 0 {
                0.0
            } else {
                removed[&hallucinated] as f64 / t as f64
            }
        };
        points.push(RemovalPoint {
            k,
            hallucinated_removed: frac(true),
            real_removed: frac(false),
            hallucinated_total: total[&true],
            real_total: total[&false],
        });
    }
    Ok(points)
}

/// Uncertainty and internal-confidence scores for one mention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    /// Negative log probability of the mention's first subtoken at its
    /// generation step. Higher means more uncertain.
    pub uncertainty: f64,
    /// Max over layers of the logit-lens probability of that subtoken at
    /// its position. Higher means more confident.
    pub internal_confidence: f64,
}

/// Saturation cap for `-ln p` when the recorded probability is zero.
pub const UNCERTAINTY_CAP: f64 = 1e3;

/// Compute the two training-free baseline detection scores for a mention.
pub fn baseline_scores(
    record: &GenerationRecord,
    mention: &ObjectMention,
    backend: &dyn ModelBackend,
    cap: f64,
) -> Result<BaselineScores, PipelineError> {
    let probs = record
        .step_probs
        .as_ref()
        .ok_or(ModelError::StepProbsMissing)?;
    let p = f64::from(*probs.get(mention.start).ok_or(ModelError::PositionOutOfRange {
        position: mention.start,
        len: probs.len(),
    })?);
    let uncertainty = if p > 0.0 { (-p.ln()).min(cap) } else { cap };

    let token = record.output_tokens[mention.start];
    let position = record.output_position(mention.start);
    let layers = backend.config().layers;
    let vocab_size = backend.config().vocab_size;
    let mut best = 0.0f64;
    for layer in 1..=layers {
        let ranked = backend.logit_lens(record, position, layer, vocab_size)?;
        let p = ranked
            .iter()
            .find(|(t, _)| *t == token)
            .map(|&(_, p)| p)
            .unwrap_or(0.0);
        best = best.max(p);
    }
    Ok(BaselineScores {
        uncertainty,
        internal_confidence: best,
    })
}

/// Score of one mention for threshold sweeps: the smallest K' at which the
/// class disappears under its own zero-out, divided by `k_max`; 1.0 when it
/// never disappears. Real objects thus score high.
pub fn disappearance_score(
    backend: &dyn ModelBackend,
    vocab: &ObjectVocabulary,
    initial: &GenerationRecord,
    mention: &ObjectMention,
    base: &PipelineConfig,
    k_max: usize,
) -> Result<f64, PipelineError> {
    for k_prime in 1..=k_max {
        let config = PipelineConfig { k: k_prime, ..base.clone() };
        let zero_out = mention_zero_out(initial, mention, &config)?;
        let regen = backend.generate(
            Some(&config.spec(zero_out)),
            &config.decode,
            &BTreeSet::new(),
        )?;
        if !contains_class(&regen.output_tokens, mention.class, vocab)? {
            return Ok(k_prime as f64 / k_max as f64);
        }
    }
    Ok(1.0)
}
