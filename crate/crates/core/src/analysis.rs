//! Text-to-image attention analysis: OL-VAR, layer profiling, top-K
//! candidate-HIT selection, and heatmap export.

use std::collections::BTreeSet;

use ndarray::Array2;
use thiserror::Error;

use crate::extraction::extract_object_mentions;
use crate::image::PatchSet;
use crate::model::{GenerationRecord, ModelError};
use crate::scenario::Scenario;
use crate::vocab::ObjectVocabulary;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("no attention rows supplied")]
    EmptyRows,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("box patch {patch} out of range for {n} image tokens")]
    BoxOutOfRange { patch: usize, n: usize },
    #[error("K must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Restriction of one attention row to the image block: `scores[j]` is the
/// query position's attention on image token `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextToImageRow {
    pub query_pos: usize,
    pub scores: Vec<f64>,
}

impl TextToImageRow {
    pub fn n_image_tokens(&self) -> usize {
        self.scores.len()
    }
}

/// Extract the image-block rows for the given absolute query positions at
/// one captured layer.
pub fn text_to_image_rows(
    record: &GenerationRecord,
    layer: usize,
    query_positions: &BTreeSet<usize>,
) -> Result<Vec<TextToImageRow>, AnalysisError> {
    let tensor = record.tensor(layer)?;
    let n = record.image_len;
    let mut rows = Vec::with_capacity(query_positions.len());
    for &pos in query_positions {
        let row = tensor.row_for(pos).ok_or(ModelError::PositionOutOfRange {
            position: pos,
            len: record.total_len(),
        })?;
        rows.push(TextToImageRow {
            query_pos: pos,
            scores: (0..n).map(|j| f64::from(row.score(j))).collect(),
        });
    }
    Ok(rows)
}

/// An OL-VAR value plus how many query rows were degenerate (zero total
/// image attention, contributing 0 by convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OlvarOutcome {
    pub value: f64,
    pub degenerate_rows: usize,
}

/// OL-VAR over pre-extracted rows: per row, attention summed over the box
/// divided by attention summed over all image tokens; averaged over rows.
pub fn olvar_rows(rows: &[TextToImageRow], object_box: &PatchSet) -> Result<OlvarOutcome, AnalysisError> {
    if rows.is_empty() {
        return Err(AnalysisError::EmptyRows);
    }
    let n = rows[0].n_image_tokens();
    for &p in object_box {
        if p >= n {
            return Err(AnalysisError::BoxOutOfRange { patch: p, n });
        }
    }
    let mut total = 0.0;
    let mut degenerate = 0;
    for row in rows {
        let image_sum: f64 = row.scores.iter().sum();
        if image_sum <= 0.0 {
            degenerate += 1;
            continue;
        }
        let box_sum: f64 = object_box.iter().map(|&p| row.scores[p]).sum();
        total += box_sum / image_sum;
    }
    Ok(OlvarOutcome {
        value: total / rows.len() as f64,
        degenerate_rows: degenerate,
    })
}

/// OL-VAR for a mention in a captured record.
pub fn olvar(
    record: &GenerationRecord,
    layer: usize,
    query_positions: &BTreeSet<usize>,
    object_box: &PatchSet,
) -> Result<OlvarOutcome, AnalysisError> {
    let rows = text_to_image_rows(record, layer, query_positions)?;
    olvar_rows(&rows, object_box)
}

/// Mean OL-VAR per layer over a corpus of (scenario, record) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    /// `per_layer[l - 1]` is the mean OL-VAR at 1-based layer `l`.
    pub per_layer: Vec<f64>,
    /// 1-based layer with the highest mean; ties resolve to the lowest.
    pub argmax_layer: usize,
    /// Number of (image, real object) pairs aggregated.
    pub pairs: usize,
}

impl LayerProfile {
    pub fn mean_at(&self, layer: usize) -> Option<f64> {
        self.per_layer.get(layer.checked_sub(1)?).copied()
    }
}

/// Profile object grounding across layers: for every real-object mention in
/// every record, OL-VAR of the mention's rows against the object's anchor
/// box, averaged per layer.
///
/// Records must be captured at every layer in `1..=layers`.
pub fn profile_layers(
    corpus: &[(&Scenario, &GenerationRecord)],
    vocab: &ObjectVocabulary,
    layers: usize,
) -> Result<LayerProfile, AnalysisError> {
    if corpus.is_empty() || layers == 0 {
        return Err(AnalysisError::EmptyCorpus);
    }
    let mut sums = vec![0.0f64; layers];
    let mut pairs = 0usize;
    for (scenario, record) in corpus {
        let grounding = scenario.grounding_map();
        let mentions = extract_object_mentions(&record.output_tokens, vocab);
        for mention in mentions {
            let Some(object_box) = grounding.get(&mention.class) else {
                continue;
            };
            let positions: BTreeSet<usize> = mention
                .output_span()
                .map(|i| record.output_position(i))
                .collect();
            pairs += 1;
            for layer in 1..=layers {
                let outcome = olvar(record, layer, &positions, object_box)?;
                sums[layer - 1] += outcome.value;
            }
        }
    }
    if pairs == 0 {
        return Err(AnalysisError::EmptyCorpus);
    }
    let per_layer: Vec<f64> = sums.into_iter().map(|s| s / pairs as f64).collect();
    let mut argmax = 0;
    for (i, &v) in per_layer.iter().enumerate() {
        if v > per_layer[argmax] {
            argmax = i;
        }
    }
    Ok(LayerProfile {
        per_layer,
        argmax_layer: argmax + 1,
        pairs,
    })
}

/// Image-token positions selected for zero-out.
pub type ZeroOutSet = BTreeSet<usize>;

/// Top-K image positions of a single row: exactly `min(K, N)` positions with
/// the largest scores, ties broken by lower position index.
pub fn top_k_row(scores: &[f64], k: usize) -> Vec<usize> {
    let take = k.min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(take);
    order
}

/// Candidate HITs for one mention: the union of each subtoken row's top-K
/// set (a single-subtoken mention yields exactly `min(K, N)` positions).
pub fn select_topk_hits(rows: &[TextToImageRow], k: usize) -> Result<ZeroOutSet, AnalysisError> {
    if rows.is_empty() {
        return Err(AnalysisError::EmptyRows);
    }
    if k == 0 {
        return Err(AnalysisError::ZeroK);
    }
    let mut out = ZeroOutSet::new();
    for row in rows {
        out.extend(top_k_row(&row.scores, k));
    }
    Ok(out)
}

/// Element-wise max over subtoken rows, pooling a multi-subtoken mention
/// into a single row before top-K selection. Alternative aggregation for
/// the multi-subtoken over-removal failure mode.
pub fn max_pooled_row(rows: &[TextToImageRow]) -> Result<TextToImageRow, AnalysisError> {
    let first = rows.first().ok_or(AnalysisError::EmptyRows)?;
    let mut scores = first.scores.clone();
    for row in &rows[1..] {
        for (slot, &v) in scores.iter_mut().zip(&row.scores) {
            if v > *slot {
                *slot = v;
            }
        }
    }
    Ok(TextToImageRow {
        query_pos: first.query_pos,
        scores,
    })
}

/// Dense generated-tokens x image-tokens attention matrix at one layer.
/// Row `g` is the image restriction of generated position `g`'s row.
pub fn export_heatmap(record: &GenerationRecord, layer: usize) -> Result<Array2<f64>, AnalysisError> {
    let tensor = record.tensor(layer)?;
    let n = record.image_len;
    let g = record.output_tokens.len();
    let mut matrix = Array2::zeros((g, n));
    for (i, row) in tensor.rows.iter().enumerate().take(g) {
        for j in 0..n {
            matrix[[i, j]] = f64::from(row.score(j));
        }
    }
    Ok(matrix)
}

/// Render a heatmap as CSV, one generated position per line.
pub fn heatmap_csv(matrix: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in matrix.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Render a heatmap as an ASCII PGM (P2) image, scores in [0,1] scaled to
/// 0..=255. `comment` lines are embedded after the header.
pub fn heatmap_pgm(matrix: &Array2<f64>, comment: &str) -> String {
    let (rows, cols) = matrix.dim();
    let mut out = String::from("P2\n");
    for line in comment.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(&format!("{} {}\n255\n", cols.max(1), rows.max(1)));
    if rows == 0 || cols == 0 {
        out.push_str("0\n");
        return out;
    }
    for row in matrix.rows() {
        let line: Vec<String> = row
            .iter()
            .map(|v| format!("{}", (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
