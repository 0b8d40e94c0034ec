//! Binary trace container and experiment results.
//!
//! One file holds one payload. Layout, all integers little-endian:
//!
//! ```text
//! 0..4   magic "HITS"
//! 4..6   format version (u16, currently 1)
//! 6      endianness tag (u8, 0x01 = little-endian; the canonical form)
//! 7      payload kind (u8): 1 record, 2 scenario, 3 experiment, 4 corpus
//! 8..    kind-specific body
//! -4..   CRC32 (IEEE) of every preceding byte
//! ```
//!
//! Record body: flags (u8: bit0 rows-normalized, bit1 step-probs present,
//! bit2 renormalized-on-import), model config (7 x u32: layers, heads,
//! d_model, vocab, image tokens, prompt length, generation budget), image
//! block offset (u32), decode params (u32 max_new, u64 seed), backend id
//! (u16 length + UTF-8), captured layer list (u16 count + u32 each,
//! ascending), optional intervention (u8 present; strategy u8, stage u8,
//! seed u64, u32 count + u32 positions), input tokens (u32 count + u32
//! each), output tokens (same), optional step probabilities (f32 per output
//! token), then per captured layer and per generated position `j` one
//! attention row of `input_len + j + 1` f32 scores. Token ids are 32-bit
//! unsigned; attention scores 32-bit floats, so write -> read is exact.
//!
//! Scenario bodies are binary; experiment and corpus bodies are canonical
//! JSON (length-prefixed). Readers are total: malformed input yields a
//! typed [`TraceError`], never a panic, and every declared count is bounds
//! checked against the remaining payload before allocation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::image::{ImageSpec, PlacedObject};
use crate::metrics::{chair, detection_metrics, CaptionEval, ChairResult, DetectionMetrics};
use crate::model::{
    AttentionRow, AttentionTensor, DecodeParams, GenerationRecord, InterventionSpec, Stage,
    Strategy,
};
use crate::pipeline::{PipelineConfig, Verdict};
use crate::scenario::{Corpus, PlantedHit, Scenario};
use crate::vocab::{ClassId, TokenId};

pub const TRACE_MAGIC: [u8; 4] = *b"HITS";
pub const TRACE_VERSION: u16 = 1;
pub const LITTLE_ENDIAN_TAG: u8 = 0x01;

const KIND_RECORD: u8 = 1;
const KIND_SCENARIO: u8 = 2;
const KIND_EXPERIMENT: u8 = 3;
const KIND_CORPUS: u8 = 4;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported endianness tag {0:#04x}")]
    UnsupportedEndianness(u8),
    #[error("unknown payload kind {0}")]
    UnknownKind(u8),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid payload: {0}")]
    Invalid(String),
    #[error("trace does not capture required layer {0}")]
    MissingLayer(usize),
    #[error("unmappable token ids: {0:?}")]
    UnmappableTokens(Vec<u32>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Byte-level reader/writer
// ---------------------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TraceError> {
        if self.remaining() < n {
            return Err(TraceError::ShapeMismatch(format!(
                "need {n} bytes at offset {}, only {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, TraceError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TraceError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("len 2")))
    }

    fn u32(&mut self) -> Result<u32, TraceError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("len 4")))
    }

    fn u64(&mut self) -> Result<u64, TraceError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("len 8")))
    }

    fn f32(&mut self) -> Result<f32, TraceError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("len 4")))
    }

    /// Element count declared in the stream, bounds-checked against the
    /// remaining bytes so hostile counts cannot trigger huge allocations.
    fn count(&mut self, elem_size: usize, what: &str) -> Result<usize, TraceError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_size) > self.remaining() {
            return Err(TraceError::ShapeMismatch(format!(
                "{what} count {n} exceeds remaining payload"
            )));
        }
        Ok(n)
    }

    fn u32_vec(&mut self, what: &str) -> Result<Vec<u32>, TraceError> {
        let n = self.count(4, what)?;
        (0..n).map(|_| self.u32()).collect()
    }

    fn f32_exact(&mut self, n: usize) -> Result<Vec<f32>, TraceError> {
        if n.saturating_mul(4) > self.remaining() {
            return Err(TraceError::ShapeMismatch(format!(
                "{n} floats exceed remaining payload"
            )));
        }
        (0..n).map(|_| self.f32()).collect()
    }

    fn string(&mut self) -> Result<String, TraceError> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| TraceError::Invalid(e.to_string()))
    }

    fn finish(&self) -> Result<(), TraceError> {
        if self.remaining() != 0 {
            return Err(TraceError::ShapeMismatch(format!(
                "{} trailing bytes after payload",
                self.remaining()
            )));
        }
        Ok(())
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: u8) -> Self {
        let mut buf = Vec::with_capacity(256);
        buf.extend_from_slice(&TRACE_MAGIC);
        buf.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        buf.push(LITTLE_ENDIAN_TAG);
        buf.push(kind);
        Writer { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize32(&mut self, v: usize, what: &str) -> Result<(), TraceError> {
        let v: u32 = v
            .try_into()
            .map_err(|_| TraceError::Invalid(format!("{what} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    fn string(&mut self, s: &str) -> Result<(), TraceError> {
        let len: u16 = s
            .len()
            .try_into()
            .map_err(|_| TraceError::Invalid("string longer than u16".into()))?;
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn token_seq(&mut self, tokens: &[TokenId], what: &str) -> Result<(), TraceError> {
        self.usize32(tokens.len(), what)?;
        for t in tokens {
            self.u32(t.0);
        }
        Ok(())
    }

    fn patch_set(&mut self, set: &BTreeSet<usize>, what: &str) -> Result<(), TraceError> {
        self.usize32(set.len(), what)?;
        for &p in set {
            self.usize32(p, what)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Vec<u8> {
        let checksum = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&checksum.to_le_bytes());
        self.buf
    }
}

// ---------------------------------------------------------------------------
// Record payload
// ---------------------------------------------------------------------------

/// A record as stored in a trace file. Native files always use image block
/// offset 0 and normalized rows; external dumps may declare otherwise and
/// go through [`import_external_trace`] to become native records.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalRecord {
    pub config: ModelConfig,
    /// Position of the image block within the input sequence.
    pub image_block_offset: usize,
    /// Whether attention rows are declared softmax-normalized.
    pub rows_normalized: bool,
    pub record: GenerationRecord,
}

impl ExternalRecord {
    pub fn native(record: GenerationRecord, config: ModelConfig) -> Self {
        ExternalRecord {
            config,
            image_block_offset: 0,
            rows_normalized: true,
            record,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, TraceError> {
        let r = &self.record;
        if self.image_block_offset + r.image_len > r.input_tokens.len() {
            return Err(TraceError::Invalid(
                "image block exceeds input sequence".into(),
            ));
        }
        let mut w = Writer::new(KIND_RECORD);
        let mut flags = 0u8;
        if self.rows_normalized {
            flags |= 1;
        }
        if r.step_probs.is_some() {
            flags |= 2;
        }
        if r.renormalized_on_import {
            flags |= 4;
        }
        w.u8(flags);
        for dim in [
            self.config.layers,
            self.config.heads,
            self.config.d_model,
            self.config.vocab_size,
            self.config.image_tokens,
            self.config.prompt_len,
            self.config.max_new,
        ] {
            w.usize32(dim, "model config")?;
        }
        w.usize32(self.image_block_offset, "image block offset")?;
        w.usize32(r.decode.max_new, "decode budget")?;
        w.u64(r.decode.seed);
        w.string(&r.backend_id)?;

        let layers: Vec<usize> = r.captured.keys().copied().collect();
        w.u16(layers
            .len()
            .try_into()
            .map_err(|_| TraceError::Invalid("too many captured layers".into()))?);
        for &l in &layers {
            w.usize32(l, "captured layer")?;
        }

        match &r.intervention {
            None => w.u8(0),
            Some(spec) => {
                w.u8(1);
                w.u8(spec.strategy.code());
                w.u8(spec.stage.code());
                w.u64(spec.seed);
                w.patch_set(&spec.positions, "intervention positions")?;
            }
        }

        w.token_seq(&r.input_tokens, "input tokens")?;
        w.token_seq(&r.output_tokens, "output tokens")?;
        if let Some(probs) = &r.step_probs {
            if probs.len() != r.output_tokens.len() {
                return Err(TraceError::Invalid(
                    "step probabilities disagree with output length".into(),
                ));
            }
            for &p in probs {
                w.f32(p);
            }
        }

        let input_len = r.input_tokens.len();
        for &layer in &layers {
            let tensor = &r.captured[&layer];
            if tensor.rows.len() != r.output_tokens.len() {
                return Err(TraceError::Invalid(format!(
                    "layer {layer} has {} rows for {} generated tokens",
                    tensor.rows.len(),
                    r.output_tokens.len()
                )));
            }
            for (j, row) in tensor.rows.iter().enumerate() {
                let expect = input_len + j;
                if row.query_pos != expect || row.scores.len() != expect + 1 {
                    return Err(TraceError::Invalid(format!(
                        "layer {layer} row {j} is not the canonical generated-position row"
                    )));
                }
                for &s in &row.scores {
                    w.f32(s);
                }
            }
        }
        Ok(w.finish())
    }

    /// Treat as native: requires offset 0 and normalized rows.
    pub fn into_native(self) -> Result<(GenerationRecord, ModelConfig), TraceError> {
        if self.image_block_offset != 0 {
            return Err(TraceError::Invalid(
                "record stores a non-prefix image block; use the import path".into(),
            ));
        }
        if !self.rows_normalized {
            return Err(TraceError::Invalid(
                "record rows are declared unnormalized; use the import path".into(),
            ));
        }
        Ok((self.record, self.config))
    }
}

fn decode_record(r: &mut Reader) -> Result<ExternalRecord, TraceError> {
    let flags = r.u8()?;
    let rows_normalized = flags & 1 != 0;
    let has_probs = flags & 2 != 0;
    let renormalized_on_import = flags & 4 != 0;

    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        layers: dims[0],
        heads: dims[1],
        d_model: dims[2],
        vocab_size: dims[3],
        image_tokens: dims[4],
        prompt_len: dims[5],
        max_new: dims[6],
    };
    let image_block_offset = r.u32()? as usize;
    let decode = DecodeParams {
        max_new: r.u32()? as usize,
        seed: r.u64()?,
    };
    let backend_id = r.string()?;

    let n_layers = r.u16()? as usize;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        layers.push(r.u32()? as usize);
    }
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TraceError::Invalid("captured layers not ascending".into()));
    }

    let intervention = match r.u8()? {
        0 => None,
        1 => {
            let strategy = Strategy::from_code(r.u8()?)
                .ok_or_else(|| TraceError::Invalid("unknown strategy code".into()))?;
            let stage = Stage::from_code(r.u8()?)
                .ok_or_else(|| TraceError::Invalid("unknown stage code".into()))?;
            let seed = r.u64()?;
            let positions: BTreeSet<usize> = r
                .u32_vec("intervention positions")?
                .into_iter()
                .map(|p| p as usize)
                .collect();
            Some(InterventionSpec {
                positions,
                strategy,
                stage,
                seed,
            })
        }
        other => {
            return Err(TraceError::Invalid(format!(
                "invalid intervention presence byte {other}"
            )))
        }
    };

    let input_tokens: Vec<TokenId> = r.u32_vec("input tokens")?.into_iter().map(TokenId).collect();
    let output_tokens: Vec<TokenId> =
        r.u32_vec("output tokens")?.into_iter().map(TokenId).collect();
    let image_len = config.image_tokens;
    if image_block_offset + image_len > input_tokens.len() {
        return Err(TraceError::ShapeMismatch(
            "declared image block exceeds input sequence".into(),
        ));
    }

    let step_probs = if has_probs {
        Some(r.f32_exact(output_tokens.len())?)
    } else {
        None
    };

    let input_len = input_tokens.len();
    let mut captured = BTreeMap::new();
    for layer in layers {
        let rows: Vec<AttentionRow> = (0..output_tokens.len())
            .map(|j| {
                let query_pos = input_len + j;
                Ok(AttentionRow {
                    query_pos,
                    scores: r.f32_exact(query_pos + 1)?,
                })
            })
            .collect::<Result<_, TraceError>>()?;
        captured.insert(layer, AttentionTensor { layer, rows });
    }

    Ok(ExternalRecord {
        config,
        image_block_offset,
        rows_normalized,
        record: GenerationRecord {
            input_tokens,
            image_len,
            output_tokens,
            step_probs,
            captured,
            intervention,
            backend_id,
            decode,
            renormalized_on_import,
        },
    })
}

// ---------------------------------------------------------------------------
// Scenario payload
// ---------------------------------------------------------------------------

fn encode_scenario_body(w: &mut Writer, s: &Scenario) -> Result<(), TraceError> {
    w.u64(s.seed);
    w.usize32(s.image.grid_w, "grid width")?;
    w.usize32(s.image.grid_h, "grid height")?;
    w.token_seq(&s.prompt, "prompt")?;
    w.usize32(s.image.objects.len(), "object count")?;
    for obj in &s.image.objects {
        w.u32(obj.class.0);
        w.patch_set(&obj.patches, "object box")?;
    }
    w.usize32(s.planted_hits.len(), "planted hit count")?;
    for hit in &s.planted_hits {
        w.u32(hit.class.0);
        w.u32(hit.attractor.0);
        w.patch_set(&hit.patches, "hit patches")?;
    }
    w.usize32(s.expected_real.len(), "expected real count")?;
    for c in &s.expected_real {
        w.u32(c.0);
    }
    w.usize32(s.expected_hallucinated.len(), "expected hallucinated count")?;
    for c in &s.expected_hallucinated {
        w.u32(c.0);
    }
    Ok(())
}

fn decode_scenario_body(r: &mut Reader) -> Result<Scenario, TraceError> {
    let seed = r.u64()?;
    let grid_w = r.u32()? as usize;
    let grid_h = r.u32()? as usize;
    let prompt: Vec<TokenId> = r.u32_vec("prompt")?.into_iter().map(TokenId).collect();
    let n_objects = r.count(9, "objects")?;
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class = ClassId(r.u32()?);
        let patches: BTreeSet<usize> = r
            .u32_vec("object box")?
            .into_iter()
            .map(|p| p as usize)
            .collect();
        objects.push(PlacedObject { class, patches });
    }
    let n_hits = r.count(13, "planted hits")?;
    let mut planted_hits = Vec::with_capacity(n_hits);
    for _ in 0..n_hits {
        let class = ClassId(r.u32()?);
        let attractor = ClassId(r.u32()?);
        let patches: BTreeSet<usize> = r
            .u32_vec("hit patches")?
            .into_iter()
            .map(|p| p as usize)
            .collect();
        planted_hits.push(PlantedHit {
            class,
            patches,
            attractor,
        });
    }
    let expected_real: BTreeSet<ClassId> = r
        .u32_vec("expected real")?
        .into_iter()
        .map(ClassId)
        .collect();
    let expected_hallucinated: BTreeSet<ClassId> = r
        .u32_vec("expected hallucinated")?
        .into_iter()
        .map(ClassId)
        .collect();
    let scenario = Scenario {
        image: ImageSpec {
            grid_w,
            grid_h,
            objects,
        },
        prompt,
        planted_hits,
        expected_real,
        expected_hallucinated,
        seed,
    };
    scenario
        .validate()
        .map_err(|e| TraceError::Invalid(e.to_string()))?;
    Ok(scenario)
}

// ---------------------------------------------------------------------------
// Experiment results
// ---------------------------------------------------------------------------

/// Per-scenario pipeline outcome, carrying enough raw parts that every
/// aggregate can be recomputed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub scenario_index: usize,
    pub seed: u64,
    pub n_image_tokens: usize,
    /// Classes mentioned by the initial generation, in caption order.
    pub mention_classes: Vec<ClassId>,
    /// Classes mentioned after mitigation, when mitigation ran.
    pub final_mention_classes: Option<Vec<ClassId>>,
    /// Ground-truth present classes.
    pub ground_truth: BTreeSet<ClassId>,
    /// Per mentioned class: the pipeline verdict.
    pub verdicts: Vec<(ClassId, Verdict)>,
    /// Per mentioned class: the expected label, when known.
    pub labels: Vec<(ClassId, Verdict)>,
    pub zeroed_count: usize,
}

/// Zeroed-token statistics and aggregate metrics over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentAggregate {
    /// Mean zeroed image tokens per scenario.
    pub mean_zeroed: f64,
    /// Mean ratio of zeroed tokens to the image-token count.
    pub zeroed_ratio: f64,
    pub detection: Option<DetectionMetrics>,
    pub chair_initial: Option<ChairResult>,
    pub chair_final: Option<ChairResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: PipelineConfig,
    pub backend_id: String,
    pub per_scenario: Vec<ScenarioOutcome>,
    pub aggregate: ExperimentAggregate,
}

impl ExperimentResult {
    /// Recompute the aggregate from the per-scenario parts.
    pub fn aggregate_from(per_scenario: &[ScenarioOutcome]) -> ExperimentAggregate {
        let n = per_scenario.len().max(1) as f64;
        let mean_zeroed = per_scenario.iter().map(|s| s.zeroed_count as f64).sum::<f64>() / n;
        let zeroed_ratio = per_scenario
            .iter()
            .map(|s| s.zeroed_count as f64 / s.n_image_tokens.max(1) as f64)
            .sum::<f64>()
            / n;
        let verdicts: Vec<Verdict> = per_scenario
            .iter()
            .flat_map(|s| s.verdicts.iter().map(|&(_, v)| v))
            .collect();
        let labels: Vec<Verdict> = per_scenario
            .iter()
            .flat_map(|s| s.labels.iter().map(|&(_, v)| v))
            .collect();
        let detection = if !verdicts.is_empty() && verdicts.len() == labels.len() {
            detection_metrics(&verdicts, &labels).ok()
        } else {
            None
        };
        let captions: Vec<CaptionEval> = per_scenario
            .iter()
            .map(|s| CaptionEval {
                mention_classes: s.mention_classes.clone(),
                ground_truth: s.ground_truth.clone(),
            })
            .collect();
        let chair_initial = (!captions.is_empty()).then(|| chair(&captions));
        let chair_final = if per_scenario.iter().all(|s| s.final_mention_classes.is_some())
            && !per_scenario.is_empty()
        {
            let finals: Vec<CaptionEval> = per_scenario
                .iter()
                .map(|s| CaptionEval {
                    mention_classes: s.final_mention_classes.clone().expect("checked"),
                    ground_truth: s.ground_truth.clone(),
                })
                .collect();
            Some(chair(&finals))
        } else {
            None
        };
        ExperimentAggregate {
            mean_zeroed,
            zeroed_ratio,
            detection,
            chair_initial,
            chair_final,
        }
    }

    pub fn new(
        config: PipelineConfig,
        backend_id: String,
        per_scenario: Vec<ScenarioOutcome>,
    ) -> Self {
        let aggregate = Self::aggregate_from(&per_scenario);
        ExperimentResult {
            config,
            backend_id,
            per_scenario,
            aggregate,
        }
    }

    /// Check that the stored aggregate equals recomputation from parts.
    pub fn verify(&self) -> Result<(), TraceError> {
        let recomputed = Self::aggregate_from(&self.per_scenario);
        if recomputed != self.aggregate {
            return Err(TraceError::Invalid(
                "stored aggregate disagrees with recomputation from per-scenario parts".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Top-level encode / decode
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum TracePayload {
    Record(Box<ExternalRecord>),
    Scenario(Box<Scenario>),
    Experiment(Box<ExperimentResult>),
    Corpus(Box<Corpus>),
}

pub fn encode_record(record: &GenerationRecord, config: &ModelConfig) -> Result<Vec<u8>, TraceError> {
    ExternalRecord::native(record.clone(), config.clone()).encode()
}

pub fn encode_scenario(scenario: &Scenario) -> Result<Vec<u8>, TraceError> {
    let mut w = Writer::new(KIND_SCENARIO);
    encode_scenario_body(&mut w, scenario)?;
    Ok(w.finish())
}

fn encode_json_body(kind: u8, value: &impl Serialize) -> Result<Vec<u8>, TraceError> {
    let json = serde_json::to_vec(value).map_err(|e| TraceError::Invalid(e.to_string()))?;
    let mut w = Writer::new(kind);
    w.usize32(json.len(), "json body")?;
    w.buf.extend_from_slice(&json);
    Ok(w.finish())
}

pub fn encode_experiment(result: &ExperimentResult) -> Result<Vec<u8>, TraceError> {
    encode_json_body(KIND_EXPERIMENT, result)
}

pub fn encode_corpus(corpus: &Corpus) -> Result<Vec<u8>, TraceError> {
    encode_json_body(KIND_CORPUS, corpus)
}

/// Decode a trace from raw bytes.
pub fn decode(bytes: &[u8]) -> Result<TracePayload, TraceError> {
    if bytes.len() < 4 || bytes[0..4] != TRACE_MAGIC {
        return Err(TraceError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(TraceError::ShapeMismatch("file too short".into()));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().expect("len 2"));
    if version != TRACE_VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    let endianness = bytes[6];
    if endianness != LITTLE_ENDIAN_TAG {
        return Err(TraceError::UnsupportedEndianness(endianness));
    }
    let kind = bytes[7];

    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("len 4"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(TraceError::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader::new(&bytes[8..body_end]);
    let payload = match kind {
        KIND_RECORD => TracePayload::Record(Box::new(decode_record(&mut r)?)),
        KIND_SCENARIO => TracePayload::Scenario(Box::new(decode_scenario_body(&mut r)?)),
        KIND_EXPERIMENT => {
            let n = r.count(1, "json body")?;
            let body = r.take(n)?;
            let result: ExperimentResult =
                serde_json::from_slice(body).map_err(|e| TraceError::Invalid(e.to_string()))?;
            result.verify()?;
            TracePayload::Experiment(Box::new(result))
        }
        KIND_CORPUS => {
            let n = r.count(1, "json body")?;
            let body = r.take(n)?;
            let corpus: Corpus =
                serde_json::from_slice(body).map_err(|e| TraceError::Invalid(e.to_string()))?;
            for s in &corpus.scenarios {
                s.validate().map_err(|e| TraceError::Invalid(e.to_string()))?;
            }
            TracePayload::Corpus(Box::new(corpus))
        }
        other => return Err(TraceError::UnknownKind(other)),
    };
    r.finish()?;
    Ok(payload)
}

pub fn write_trace(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), TraceError> {
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<TracePayload, TraceError> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

/// Read a corpus payload from a file, rejecting other payload kinds.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus, TraceError> {
    match read_trace(path)? {
        TracePayload::Corpus(c) => Ok(*c),
        _ => Err(TraceError::Invalid("expected a corpus payload".into())),
    }
}

// ---------------------------------------------------------------------------
// External import
// ---------------------------------------------------------------------------

/// Token remapping for external dumps: external text-token id to native id.
pub type TokenMap = BTreeMap<u32, TokenId>;

/// Import an externally dumped record: remap text tokens through the
/// supplied map (image-block positions become `image_token`), rotate the
/// image block to the front when it is not already a prefix, renormalize
/// attention rows only when the dump declares them unnormalized (flagged on
/// the result), and require `required_layer` to be captured.
pub fn import_external_record(
    external: ExternalRecord,
    token_map: &TokenMap,
    image_token: TokenId,
    required_layer: Option<usize>,
) -> Result<GenerationRecord, TraceError> {
    let ExternalRecord {
        config,
        image_block_offset,
        rows_normalized,
        mut record,
    } = external;

    if let Some(layer) = required_layer {
        if !record.captured.contains_key(&layer) {
            return Err(TraceError::MissingLayer(layer));
        }
    }

    let n = config.image_tokens;
    let input_len = record.input_tokens.len();
    let off = image_block_offset;

    // Remap text tokens; abort listing every unmappable id.
    let mut unmappable = BTreeSet::new();
    let map_text = |tok: TokenId, unmappable: &mut BTreeSet<u32>| -> TokenId {
        match token_map.get(&tok.0) {
            Some(&t) => t,
            None => {
                unmappable.insert(tok.0);
                TokenId(0)
            }
        }
    };
    let mut new_input: Vec<TokenId> = Vec::with_capacity(input_len);
    new_input.extend(std::iter::repeat(image_token).take(n));
    for (i, &tok) in record.input_tokens.iter().enumerate() {
        if i >= off && i < off + n {
            continue;
        }
        new_input.push(map_text(tok, &mut unmappable));
    }
    let new_output: Vec<TokenId> = record
        .output_tokens
        .iter()
        .map(|&t| map_text(t, &mut unmappable))
        .collect();
    if !unmappable.is_empty() {
        return Err(TraceError::UnmappableTokens(unmappable.into_iter().collect()));
    }

    // Column permutation moving the image block to the front. Text columns
    // keep their relative order; generated columns are untouched.
    let new_column = |old: usize| -> usize {
        if old >= input_len {
            old
        } else if old >= off && old < off + n {
            old - off
        } else if old < off {
            n + old
        } else {
            // Text after the block: n block slots plus off + (old - off - n)
            // earlier text slots, which is the same absolute index.
            old
        }
    };

    let mut renormalized = false;
    for tensor in record.captured.values_mut() {
        for row in &mut tensor.rows {
            let mut scores = vec![0.0f32; row.scores.len()];
            for (old, &s) in row.scores.iter().enumerate() {
                scores[new_column(old)] = s;
            }
            if !rows_normalized {
                let sum: f64 = scores.iter().map(|&s| f64::from(s)).sum();
                if sum <= 0.0 {
                    return Err(TraceError::Invalid(format!(
                        "attention row at {} has non-positive mass",
                        row.query_pos
                    )));
                }
                for s in &mut scores {
                    *s = (f64::from(*s) / sum) as f32;
                }
                renormalized = true;
            }
            row.scores = scores;
        }
        tensor
            .validate()
            .map_err(TraceError::Invalid)?;
    }

    record.input_tokens = new_input;
    record.output_tokens = new_output;
    record.image_len = n;
    record.renormalized_on_import = renormalized;
    Ok(record)
}

/// File-level wrapper over [`import_external_record`].
pub fn import_external_trace(
    path: impl AsRef<Path>,
    token_map: &TokenMap,
    image_token: TokenId,
    required_layer: Option<usize>,
) -> Result<GenerationRecord, TraceError> {
    match read_trace(path)? {
        TracePayload::Record(external) => {
            import_external_record(*external, token_map, image_token, required_layer)
        }
        _ => Err(TraceError::Invalid("expected a record payload".into())),
    }
}
