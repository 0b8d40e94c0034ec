//! Evaluation metrics: CHAIR rates, binary detection metrics, ROC/PR
//! curves, and the yes/no object-presence probing harness with its three
//! negative-sampling modes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InterventionSpec, ModelBackend, ModelError, PopeAnswer};
use crate::pipeline::Verdict;
use crate::seeds::derive_seed;
use crate::vocab::{ClassId, ObjectVocabulary, Tokenizer, VocabError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("verdicts and labels have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("curve computation needs at least one positive and one negative label")]
    SingleClassLabels,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

// ---------------------------------------------------------------------------
// CHAIR
// ---------------------------------------------------------------------------

/// One caption's extracted mention classes plus the image's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEval {
    pub mention_classes: Vec<ClassId>,
    pub ground_truth: BTreeSet<ClassId>,
}

/// CHAIR rates. `instance_rate` is hallucinated mentions over all mentions;
/// `sentence_rate` is captions containing a hallucination over all captions.
/// In the customary reporting convention CHAIR_S is the per-caption
/// (sentence) rate and CHAIR_I the per-mention (instance) rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairResult {
    pub instance_rate: f64,
    pub sentence_rate: f64,
    pub hallucinated_mentions: usize,
    pub total_mentions: usize,
    pub captions_with_hallucination: usize,
    pub total_captions: usize,
}

/// Compute CHAIR over evaluated captions. A mention is hallucinated iff its
/// class is not in the image's ground truth; zero-denominator rates are 0.
pub fn chair(captions: &[CaptionEval]) -> ChairResult {
    let mut hallucinated_mentions = 0;
    let mut total_mentions = 0;
    let mut captions_with_hallucination = 0;
    for caption in captions {
        let mut any = false;
        for class in &caption.mention_classes {
            total_mentions += 1;
            if !caption.ground_truth.contains(class) {
                hallucinated_mentions += 1;
                any = true;
            }
        }
        if any {
            captions_with_hallucination += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    ChairResult {
        instance_rate: ratio(hallucinated_mentions, total_mentions),
        sentence_rate: ratio(captions_with_hallucination, captions.len()),
        hallucinated_mentions,
        total_mentions,
        captions_with_hallucination,
        total_captions: captions.len(),
    }
}

// ---------------------------------------------------------------------------
// Binary detection metrics
// ---------------------------------------------------------------------------

/// Confusion metrics with real objects as the positive class. PR(OH) is the
/// precision of the negative (hallucinated) class. Zero-denominator values
/// are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub precision_real: f64,
    pub precision_hallucinated: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn detection_metrics(
    verdicts: &[Verdict],
    labels: &[Verdict],
) -> Result<DetectionMetrics, MetricsError> {
    if verdicts.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if verdicts.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(verdicts.len(), labels.len()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (v, l) in verdicts.iter().zip(labels) {
        match (v, l) {
            (Verdict::Real, Verdict::Real) => tp += 1,
            (Verdict::Real, Verdict::Hallucinated) => fp += 1,
            (Verdict::Hallucinated, Verdict::Real) => fn_ += 1,
            (Verdict::Hallucinated, Verdict::Hallucinated) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision_real = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    // Harmonic mean in single-ratio form, exact under correctly rounded
    // division.
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    Ok(DetectionMetrics {
        accuracy: ratio(tp + tn, verdicts.len()),
        precision_real,
        precision_hallucinated: ratio(tn, tn + fn_),
        recall,
        f1,
        tp,
        fp,
        fn_,
        tn,
    })
}

// ---------------------------------------------------------------------------
// ROC / PR curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (false positive rate, true positive rate), threshold descending.
    pub points: Vec<(f64, f64)>,
    /// Trapezoidal area.
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// (recall, precision), threshold descending.
    pub points: Vec<(f64, f64)>,
    /// Right-continuous step interpolation: sum of precision times recall
    /// increment, no linear segments.
    pub auc: f64,
}

/// Threshold sweep over distinct score values, ties grouped at one
/// threshold. Higher scores mean the positive class.
pub fn roc_pr_curves(scores: &[f64], labels: &[bool]) -> Result<(RocCurve, PrCurve), MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    let total_pos = labels.iter().filter(|&&l| l).count();
    let total_neg = labels.len() - total_pos;
    if total_pos == 0 || total_neg == 0 {
        return Err(MetricsError::SingleClassLabels);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut roc_points = vec![(0.0, 0.0)];
    let mut pr_points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc_points.push((fp as f64 / total_neg as f64, tp as f64 / total_pos as f64));
        pr_points.push((tp as f64 / total_pos as f64, tp as f64 / (tp + fp) as f64));
    }

    let mut roc_auc = 0.0;
    for w in roc_points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        roc_auc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    let mut pr_auc = 0.0;
    let mut prev_recall = 0.0;
    for &(recall, precision) in &pr_points {
        pr_auc += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    Ok((
        RocCurve {
            points: roc_points,
            auc: roc_auc,
        },
        PrCurve {
            points: pr_points,
            auc: pr_auc,
        },
    ))
}

// ---------------------------------------------------------------------------
// POPE
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopeMode {
    Random,
    Popular,
    Adversarial,
}

impl PopeMode {
    pub const ALL: [PopeMode; 3] = [PopeMode::Random, PopeMode::Popular, PopeMode::Adversarial];

    pub fn as_str(self) -> &'static str {
        match self {
            PopeMode::Random => "random",
            PopeMode::Popular => "popular",
            PopeMode::Adversarial => "adversarial",
        }
    }
}

impl FromStr for PopeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(PopeMode::Random),
            "popular" => Ok(PopeMode::Popular),
            "adversarial" => Ok(PopeMode::Adversarial),
            other => Err(format!("unknown sampling mode `{other}`")),
        }
    }
}

impl fmt::Display for PopeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeQuestion {
    pub image: usize,
    pub class: ClassId,
    pub expected_yes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeQuestionSet {
    pub mode: PopeMode,
    pub questions: Vec<PopeQuestion>,
    /// Images where fewer absent classes were available than needed for a
    /// balanced set.
    pub shortfall_images: usize,
}

/// Symmetric class co-occurrence counts over a ground-truth corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrence {
    counts: BTreeMap<(ClassId, ClassId), usize>,
}

impl CoOccurrence {
    pub fn from_ground_truth(ground_truth: &[BTreeSet<ClassId>]) -> Self {
        let mut counts = BTreeMap::new();
        for gt in ground_truth {
            let classes: Vec<ClassId> = gt.iter().copied().collect();
            for (i, &a) in classes.iter().enumerate() {
                for &b in &classes[i + 1..] {
                    *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                }
            }
        }
        CoOccurrence { counts }
    }

    pub fn count(&self, a: ClassId, b: ClassId) -> usize {
        self.counts.get(&(a.min(b), a.max(b))).copied().unwrap_or(0)
    }
}

/// Classes observed anywhere in the corpus ground truth, with frequencies.
fn class_frequencies(ground_truth: &[BTreeSet<ClassId>]) -> BTreeMap<ClassId, usize> {
    let mut freq = BTreeMap::new();
    for gt in ground_truth {
        for &c in gt {
            *freq.entry(c).or_insert(0) += 1;
        }
    }
    freq
}

/// Observed classes in frequency order (descending, ties by class id).
fn frequency_order(freq: &BTreeMap<ClassId, usize>) -> Vec<ClassId> {
    let mut order: Vec<ClassId> = freq.keys().copied().collect();
    order.sort_by(|a, b| freq[b].cmp(&freq[a]).then(a.cmp(b)));
    order
}

/// Build the question set for one sampling mode.
///
/// Per image: one yes-question per present class, and an equal number of
/// no-questions about absent classes chosen by the mode rule — uniform
/// seeded sampling (random), the globally top-`floor(n/2)` most frequent
/// classes in frequency order (popular, `n` = observed class count), or the
/// classes most co-occurrent with the image's present classes (adversarial).
pub fn build_pope_questions(
    ground_truth: &[BTreeSet<ClassId>],
    mode: PopeMode,
    co_occurrence: &CoOccurrence,
    seed: u64,
) -> Result<PopeQuestionSet, MetricsError> {
    if ground_truth.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let freq = class_frequencies(ground_truth);
    let universe: BTreeSet<ClassId> = freq.keys().copied().collect();
    let by_frequency = frequency_order(&freq);
    let popular_pool: Vec<ClassId> = by_frequency
        .iter()
        .copied()
        .take(universe.len() / 2)
        .collect();

    let mut questions = Vec::new();
    let mut shortfall_images = 0;
    for (image, present) in ground_truth.iter().enumerate() {
        let yes: Vec<ClassId> = present.iter().copied().collect();
        let absent: Vec<ClassId> = universe.difference(present).copied().collect();
        let want = yes.len();
        let negatives: Vec<ClassId> = match mode {
            PopeMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, image as u64));
                let take = want.min(absent.len());
                rand::seq::index::sample(&mut rng, absent.len(), take)
                    .iter()
                    .map(|i| absent[i])
                    .collect()
            }
            PopeMode::Popular => popular_pool
                .iter()
                .copied()
                .filter(|c| !present.contains(c))
                .take(want)
                .collect(),
            PopeMode::Adversarial => {
                let mut ranked = absent.clone();
                ranked.sort_by(|a, b| {
                    let score = |c: ClassId| {
                        present
                            .iter()
                            .map(|&g| co_occurrence.count(c, g))
                            .sum::<usize>()
                    };
                    score(*b).cmp(&score(*a)).then(a.cmp(b))
                });
                ranked.into_iter().take(want).collect()
            }
        };
        if negatives.len() < want {
            shortfall_images += 1;
        }
        for class in yes {
            questions.push(PopeQuestion {
                image,
                class,
                expected_yes: true,
            });
        }
        for class in negatives {
            questions.push(PopeQuestion {
                image,
                class,
                expected_yes: false,
            });
        }
    }
    Ok(PopeQuestionSet {
        mode,
        questions,
        shortfall_images,
    })
}

/// Result of probing one question set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeModeResult {
    pub mode: PopeMode,
    pub accuracy: f64,
    pub f1: f64,
    pub correct: usize,
    pub total: usize,
    /// Answers that parsed as neither yes nor no; counted as wrong.
    pub unparseable: usize,
}

/// Probe every question against its image's backend. `items[i]` is the
/// backend (and optional intervention) answering questions about image `i`.
pub fn pope_eval(
    items: &[(&dyn ModelBackend, Option<&InterventionSpec>)],
    questions: &PopeQuestionSet,
    template: &str,
    vocab: &ObjectVocabulary,
    tokenizer: &Tokenizer,
) -> Result<PopeModeResult, MetricsError> {
    if questions.questions.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    let mut unparseable = 0;
    for q in &questions.questions {
        let (backend, intervention) = items
            .get(q.image)
            .ok_or(MetricsError::LengthMismatch(items.len(), q.image + 1))?;
        let name = vocab
            .class(q.class)
            .map(|c| c.canonical.clone())
            .unwrap_or_default();
        let prompt = tokenizer.tokenize(&template.replace("{object}", &name))?;
        let answer = backend.answer_presence(q.class, &prompt, *intervention)?;
        let said_yes = match answer {
            PopeAnswer::Yes => Some(true),
            PopeAnswer::No => Some(false),
            PopeAnswer::Unparseable => {
                unparseable += 1;
                None
            }
        };
        // Unparseable answers count as wrong on both accuracy and F1.
        match (q.expected_yes, said_yes) {
            (true, Some(true)) => tp += 1,
            (true, _) => fn_ += 1,
            (false, Some(false)) => tn += 1,
            (false, _) => fp += 1,
        }
    }
    let total = questions.questions.len();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    Ok(PopeModeResult {
        mode: questions.mode,
        accuracy: ratio(tp + tn, total),
        f1,
        correct: tp + tn,
        total,
        unparseable,
    })
}

/// Per-mode results plus their macro average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    pub per_mode: Vec<PopeModeResult>,
    pub macro_accuracy: f64,
    pub macro_f1: f64,
}

impl PopeReport {
    pub fn from_modes(per_mode: Vec<PopeModeResult>) -> Self {
        let n = per_mode.len().max(1) as f64;
        let macro_accuracy = per_mode.iter().map(|m| m.accuracy).sum::<f64>() / n;
        let macro_f1 = per_mode.iter().map(|m| m.f1).sum::<f64>() / n;
        PopeReport {
            per_mode,
            macro_accuracy,
            macro_f1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class(i: u32) -> ClassId {
        ClassId(i)
    }

    #[test]
    fn chair_clean_corpus_is_zero() {
        let captions = vec![CaptionEval {
            mention_classes: vec![class(0), class(1)],
            ground_truth: [class(0), class(1)].into_iter().collect(),
        }];
        let r = chair(&captions);
        assert_eq!(r.instance_rate, 0.0);
        assert_eq!(r.sentence_rate, 0.0);
    }

    #[test]
    fn chair_hand_enumeration() {
        // One caption with 1 hallucinated of 3 mentions, one clean with 2.
        let captions = vec![
            CaptionEval {
                mention_classes: vec![class(0), class(1), class(9)],
                ground_truth: [class(0), class(1)].into_iter().collect(),
            },
            CaptionEval {
                mention_classes: vec![class(2), class(3)],
                ground_truth: [class(2), class(3)].into_iter().collect(),
            },
        ];
        let r = chair(&captions);
        assert!((r.instance_rate - 0.2).abs() < 1e-12);
        assert!((r.sentence_rate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn chair_empty_caption_counts_in_denominator() {
        let captions = vec![
            CaptionEval {
                mention_classes: vec![],
                ground_truth: BTreeSet::new(),
            },
            CaptionEval {
                mention_classes: vec![class(9)],
                ground_truth: BTreeSet::new(),
            },
        ];
        let r = chair(&captions);
        assert_eq!(r.total_captions, 2);
        assert!((r.sentence_rate - 0.5).abs() < 1e-12);
        assert!((r.instance_rate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detection_metrics_hand_confusion() {
        use Verdict::{Hallucinated as H, Real as R};
        let verdicts = [R, R, R, H, H, H];
        let labels = [R, R, H, R, H, H];
        let m = detection_metrics(&verdicts, &labels).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (2, 1, 1, 2));
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-12);
        assert!((m.precision_real - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.precision_hallucinated - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn detection_metrics_all_correct_and_degenerate() {
        use Verdict::{Hallucinated as H, Real as R};
        let m = detection_metrics(&[R, H], &[R, H]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
        // No predicted-real with positives present: precision and recall 0.
        let m = detection_metrics(&[H, H], &[R, H]).unwrap();
        assert_eq!(m.precision_real, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
        assert!(detection_metrics(&[], &[]).is_err());
    }

    #[test]
    fn roc_perfect_separation_is_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        let (roc, pr) = roc_pr_curves(&scores, &labels).unwrap();
        assert!((roc.auc - 1.0).abs() < 1e-12);
        assert!((pr.auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_all_ties_is_half() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let labels = [true, false, true, false];
        let (roc, pr) = roc_pr_curves(&scores, &labels).unwrap();
        assert!((roc.auc - 0.5).abs() < 1e-12);
        // Single threshold step: PR AUC equals prevalence.
        assert!((pr.auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_labels_rejected() {
        assert_eq!(
            roc_pr_curves(&[0.1, 0.2], &[true, true]),
            Err(MetricsError::SingleClassLabels)
        );
    }

    /// Mann-Whitney rank statistic with half-credit ties.
    fn rank_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if !labels[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn roc_auc_matches_rank_statistic_on_tied_fixture() {
        let scores = [0.9, 0.8, 0.8, 0.7, 0.6, 0.5, 0.5, 0.2];
        let labels = [true, true, false, true, false, true, false, false];
        let (roc, _) = roc_pr_curves(&scores, &labels).unwrap();
        let expected = rank_auc(&scores, &labels);
        assert!((expected - 0.75).abs() < 1e-12);
        assert!((roc.auc - expected).abs() < 1e-9);
    }

    #[test]
    fn permutation_invariance() {
        let scores = [0.9, 0.1, 0.7, 0.4, 0.6, 0.3];
        let labels = [true, false, true, false, true, false];
        let (roc_a, pr_a) = roc_pr_curves(&scores, &labels).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let scores_p: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let labels_p: Vec<bool> = perm.iter().map(|&i| labels[i]).collect();
        let (roc_b, pr_b) = roc_pr_curves(&scores_p, &labels_p).unwrap();
        assert_eq!(roc_a, roc_b);
        assert_eq!(pr_a, pr_b);
    }

    fn four_class_corpus() -> Vec<BTreeSet<ClassId>> {
        // Class 3 ("d") appears most often; image 0 lacks it.
        vec![
            [class(0), class(1)].into_iter().collect(),
            [class(1), class(3)].into_iter().collect(),
            [class(2), class(3)].into_iter().collect(),
            [class(0), class(3)].into_iter().collect(),
        ]
    }

    #[test]
    fn popular_mode_asks_most_frequent_absent_first() {
        let gt = four_class_corpus();
        let co = CoOccurrence::from_ground_truth(&gt);
        let set = build_pope_questions(&gt, PopeMode::Popular, &co, 0).unwrap();
        let first_no = set
            .questions
            .iter()
            .find(|q| q.image == 0 && !q.expected_yes)
            .unwrap();
        assert_eq!(first_no.class, class(3));
        // Pool of floor(4/2) = 2 classes cannot balance 2 yes-questions on
        // any of these images; the shortfall flag must say so.
        assert_eq!(set.shortfall_images, 4);
    }

    #[test]
    fn random_mode_is_seed_deterministic() {
        let gt = four_class_corpus();
        let co = CoOccurrence::from_ground_truth(&gt);
        let a = build_pope_questions(&gt, PopeMode::Random, &co, 11).unwrap();
        let b = build_pope_questions(&gt, PopeMode::Random, &co, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn yes_questions_come_from_ground_truth() {
        let gt = four_class_corpus();
        let co = CoOccurrence::from_ground_truth(&gt);
        for mode in PopeMode::ALL {
            let set = build_pope_questions(&gt, mode, &co, 3).unwrap();
            for q in &set.questions {
                if q.expected_yes {
                    assert!(gt[q.image].contains(&q.class));
                } else {
                    assert!(!gt[q.image].contains(&q.class));
                }
            }
        }
    }

    #[test]
    fn adversarial_prefers_co_occurring_classes() {
        // Class 1 co-occurs with class 0 twice; class 2 never does.
        let gt: Vec<BTreeSet<ClassId>> = vec![
            [class(0), class(1)].into_iter().collect(),
            [class(0), class(1)].into_iter().collect(),
            [class(2)].into_iter().collect(),
            [class(0)].into_iter().collect(),
        ];
        let co = CoOccurrence::from_ground_truth(&gt);
        let set = build_pope_questions(&gt, PopeMode::Adversarial, &co, 0).unwrap();
        let first_no = set
            .questions
            .iter()
            .find(|q| q.image == 3 && !q.expected_yes)
            .unwrap();
        assert_eq!(first_no.class, class(1));
    }

    #[test]
    fn macro_average_is_plain_mean() {
        let report = PopeReport::from_modes(vec![
            PopeModeResult {
                mode: PopeMode::Random,
                accuracy: 1.0,
                f1: 1.0,
                correct: 4,
                total: 4,
                unparseable: 0,
            },
            PopeModeResult {
                mode: PopeMode::Popular,
                accuracy: 0.5,
                f1: 0.4,
                correct: 2,
                total: 4,
                unparseable: 0,
            },
        ]);
        assert!((report.macro_accuracy - 0.75).abs() < 1e-12);
        assert!((report.macro_f1 - 0.7).abs() < 1e-12);
    }
}
