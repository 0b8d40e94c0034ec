//! Deterministic synthetic scenarios: ground-truth objects on a grid plus
//! planted hallucinatory image tokens with known expected outcomes.
//!
//! A corpus generated here is the desk-scale oracle: every scenario knows
//! which classes are real, which are hallucinated, and which image tokens
//! drive each hallucination, so pipeline behavior can be checked exactly.

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{rect_patches, ImageError, ImageSpec, PatchSet, PlacedObject};
use crate::seeds::derive_seed;
use crate::vocab::{ClassId, ObjectVocabulary, TokenId, Tokenizer, DEFAULT_PROMPT};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("vocabulary has {available} classes but {needed} are needed per image")]
    VocabularyTooSmall { needed: usize, available: usize },
    #[error("grid {grid_w}x{grid_h} too small to place requested boxes")]
    GridTooSmall { grid_w: usize, grid_h: usize },
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("scenario invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// A hallucination planted into a scenario: the class that will be
/// hallucinated, the image tokens that drive it, and the real object's box
/// those tokens sit inside.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedHit {
    pub class: ClassId,
    /// Hallucinatory image tokens; non-empty, disjoint across plants.
    pub patches: PatchSet,
    /// Real class whose box attracts this hallucination's attention.
    pub attractor: ClassId,
}

/// One synthetic image with its prompt and expected outcomes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub image: ImageSpec,
    pub prompt: Vec<TokenId>,
    pub planted_hits: Vec<PlantedHit>,
    pub expected_real: BTreeSet<ClassId>,
    pub expected_hallucinated: BTreeSet<ClassId>,
    pub seed: u64,
}

impl Scenario {
    /// Anchor box per real class (derived from the image's objects).
    pub fn grounding_map(&self) -> BTreeMap<ClassId, &PatchSet> {
        self.image
            .objects
            .iter()
            .map(|o| (o.class, &o.patches))
            .collect()
    }

    /// Patch set grounding a class: anchor box for real classes, planted
    /// HIT set for hallucinated ones.
    pub fn class_patches(&self, class: ClassId) -> Option<&PatchSet> {
        if let Some(b) = self.image.object_box(class) {
            return Some(b);
        }
        self.planted_hits
            .iter()
            .find(|h| h.class == class)
            .map(|h| &h.patches)
    }

    pub fn n_image_tokens(&self) -> usize {
        self.image.n_patches()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.image.validate()?;
        let n = self.image.n_patches();
        let mut claimed = PatchSet::new();
        for hit in &self.planted_hits {
            if hit.patches.is_empty() {
                return Err(ScenarioError::Invariant(format!(
                    "planted HIT set for class {} is empty",
                    hit.class
                )));
            }
            for &p in &hit.patches {
                if p >= n {
                    return Err(ScenarioError::Invariant(format!(
                        "HIT patch {p} out of range for {n} image tokens"
                    )));
                }
                if !claimed.insert(p) {
                    return Err(ScenarioError::Invariant(format!(
                        "HIT patch {p} claimed by two hallucinations"
                    )));
                }
            }
            if !self.expected_hallucinated.contains(&hit.class) {
                return Err(ScenarioError::Invariant(format!(
                    "planted class {} not in expected_hallucinated",
                    hit.class
                )));
            }
        }
        if !self
            .expected_real
            .is_disjoint(&self.expected_hallucinated)
        {
            return Err(ScenarioError::Invariant(
                "expected_real and expected_hallucinated overlap".into(),
            ));
        }
        for class in &self.expected_hallucinated {
            if !self.planted_hits.iter().any(|h| h.class == *class) {
                return Err(ScenarioError::Invariant(format!(
                    "expected hallucination {class} has no planted HIT set"
                )));
            }
        }
        Ok(())
    }
}

/// Knobs for [`generate_corpus`]. Defaults mirror the reference corpus:
/// 200 images averaging 333 real objects and 284 hallucinations overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_images: usize,
    /// Mean real objects per image.
    pub mean_real: f64,
    /// Mean planted hallucinations per image.
    pub mean_hallucinated: f64,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Planted HIT set size range (inclusive).
    pub hit_size_min: usize,
    pub hit_size_max: usize,
    /// Real-object box size range in patches (inclusive).
    pub box_min: usize,
    pub box_max: usize,
    /// Lowest-index patches kept object-free. Tie-broken top-K filler and
    /// the layer-sink pattern land here instead of inside object boxes.
    pub background_margin: usize,
    /// Plant one single-patch real object in the corpus (the small-object
    /// failure case).
    pub small_object: bool,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_images: 200,
            mean_real: 333.0 / 200.0,
            mean_hallucinated: 284.0 / 200.0,
            grid_w: 12,
            grid_h: 12,
            hit_size_min: 1,
            hit_size_max: 3,
            box_min: 22,
            box_max: 28,
            background_margin: 24,
            small_object: true,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.hit_size_min == 0 {
            return Err(ScenarioError::InvalidConfig("HIT set size must be >= 1".into()));
        }
        if self.hit_size_min > self.hit_size_max {
            return Err(ScenarioError::InvalidConfig("hit_size_min > hit_size_max".into()));
        }
        if self.box_min == 0 || self.box_min > self.box_max {
            return Err(ScenarioError::InvalidConfig("invalid box size range".into()));
        }
        if self.mean_real < 0.0 || self.mean_hallucinated < 0.0 {
            return Err(ScenarioError::InvalidConfig("negative mean".into()));
        }
        if self.grid_w == 0 || self.grid_h == 0 {
            return Err(ScenarioError::InvalidConfig("empty grid".into()));
        }
        Ok(())
    }

    /// Worst-case distinct classes needed for one image.
    fn max_classes_per_image(&self) -> usize {
        let real = self.mean_real.floor() as usize + 1;
        let hall = self.mean_hallucinated.floor() as usize + 1;
        real + hall + usize::from(self.small_object)
    }
}

/// Corpus: the shareable fixture bundling scenarios with the vocabulary
/// and tokenizer they were generated against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub tokenizer: Tokenizer,
    pub vocab: ObjectVocabulary,
    pub scenarios: Vec<Scenario>,
}

/// Draw a count with the given mean: `floor(mean)` plus a Bernoulli trial
/// on the fractional part.
fn draw_count(mean: f64, rng: &mut ChaCha8Rng) -> usize {
    let base = mean.floor() as usize;
    let frac = mean - mean.floor();
    base + usize::from(rng.gen::<f64>() < frac)
}

fn margin_rows(config: &CorpusConfig) -> usize {
    config.background_margin.div_ceil(config.grid_w)
}

/// Place a non-overlapping rectangle of `min..=max` patches below the
/// reserved margin rows.
fn place_box(
    config: &CorpusConfig,
    occupied: &PatchSet,
    min: usize,
    max: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PatchSet, ScenarioError> {
    let top = margin_rows(config);
    if top >= config.grid_h {
        return Err(ScenarioError::GridTooSmall {
            grid_w: config.grid_w,
            grid_h: config.grid_h,
        });
    }
    for _ in 0..400 {
        let w = rng.gen_range(1..=config.grid_w);
        let h = rng.gen_range(1..=(config.grid_h - top));
        let area = w * h;
        if area < min || area > max {
            continue;
        }
        let x = rng.gen_range(0..=(config.grid_w - w));
        let y = rng.gen_range(top..=(config.grid_h - h));
        let patches = rect_patches(x, y, w, h, config.grid_w);
        if patches.is_disjoint(occupied) {
            return Ok(patches);
        }
    }
    Err(ScenarioError::GridTooSmall {
        grid_w: config.grid_w,
        grid_h: config.grid_h,
    })
}

fn generate_scenario(
    config: &CorpusConfig,
    vocab: &ObjectVocabulary,
    prompt: &[TokenId],
    index: usize,
    plant_small: bool,
) -> Result<Scenario, ScenarioError> {
    let seed = derive_seed(config.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_hall = draw_count(config.mean_hallucinated, &mut rng);
    let mut n_real = draw_count(config.mean_real, &mut rng);
    if n_hall > 0 {
        // Hallucinations need a real attractor box.
        n_real = n_real.max(1);
    }
    let n_small = usize::from(plant_small);

    let n_classes = vocab.n_classes();
    let needed = n_real + n_hall + n_small;
    if needed > n_classes {
        return Err(ScenarioError::VocabularyTooSmall {
            needed,
            available: n_classes,
        });
    }
    let picks = rand::seq::index::sample(&mut rng, n_classes, needed);
    let classes: Vec<ClassId> = picks.iter().map(|i| ClassId(i as u32)).collect();
    let (real_classes, rest) = classes.split_at(n_real + n_small);
    let hall_classes = rest;

    let mut occupied = PatchSet::new();
    let mut objects = Vec::new();
    for (j, &class) in real_classes.iter().enumerate() {
        let small = plant_small && j == 0;
        let (lo, hi) = if small {
            (1, 1)
        } else {
            (config.box_min, config.box_max)
        };
        let patches = place_box(config, &occupied, lo, hi, &mut rng)?;
        occupied.extend(patches.iter().copied());
        objects.push(PlacedObject { class, patches });
    }

    // Round-robin over full-size boxes so two hallucinations share an
    // attractor only when they outnumber the real objects. Single-patch
    // boxes never attract: a HIT there would be the whole object.
    let mut attractor_order: Vec<usize> = objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.patches.len() >= config.box_min)
        .map(|(i, _)| i)
        .collect();
    attractor_order.shuffle(&mut rng);

    let mut claimed = PatchSet::new();
    let mut planted = Vec::new();
    for (hi, &class) in hall_classes.iter().enumerate() {
        let mut placed = false;
        for attempt in 0..attractor_order.len() {
            let oi = attractor_order[(hi + attempt) % attractor_order.len()];
            let candidates: Vec<usize> = objects[oi]
                .patches
                .iter()
                .copied()
                .filter(|p| !claimed.contains(p))
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let want = rng.gen_range(config.hit_size_min..=config.hit_size_max);
            let take = want.min(candidates.len());
            let picks = rand::seq::index::sample(&mut rng, candidates.len(), take);
            let patches: PatchSet = picks.iter().map(|i| candidates[i]).collect();
            claimed.extend(patches.iter().copied());
            planted.push(PlantedHit {
                class,
                patches,
                attractor: objects[oi].class,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(ScenarioError::GridTooSmall {
                grid_w: config.grid_w,
                grid_h: config.grid_h,
            });
        }
    }

    let scenario = Scenario {
        expected_real: objects.iter().map(|o| o.class).collect(),
        expected_hallucinated: planted.iter().map(|h| h.class).collect(),
        image: ImageSpec {
            grid_w: config.grid_w,
            grid_h: config.grid_h,
            objects,
        },
        prompt: prompt.to_vec(),
        planted_hits: planted,
        seed,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Generate a corpus of scenarios. Reproducible for a given seed; each
/// scenario draws from its own derived sub-stream, so generation order
/// (or parallelism) cannot change the result.
pub fn generate_corpus(
    config: &CorpusConfig,
    tokenizer: &Tokenizer,
    vocab: &ObjectVocabulary,
) -> Result<Vec<Scenario>, ScenarioError> {
    config.validate()?;
    if config.max_classes_per_image() > vocab.n_classes() {
        return Err(ScenarioError::VocabularyTooSmall {
            needed: config.max_classes_per_image(),
            available: vocab.n_classes(),
        });
    }
    let prompt = tokenizer
        .tokenize(DEFAULT_PROMPT)
        .map_err(|e| ScenarioError::InvalidConfig(format!("prompt not tokenizable: {e}")))?;
    (0..config.n_images)
        .map(|i| {
            let plant_small = config.small_object && i == 0;
            generate_scenario(config, vocab, &prompt, i, plant_small)
        })
        .collect()
}

/// Generate a full [`Corpus`] with the builtin vocabulary.
pub fn generate_builtin_corpus(config: &CorpusConfig) -> Result<Corpus, ScenarioError> {
    let (tokenizer, vocab) = crate::vocab::builtin_vocabulary();
    let scenarios = generate_corpus(config, &tokenizer, &vocab)?;
    Ok(Corpus {
        config: config.clone(),
        tokenizer,
        vocab,
        scenarios,
    })
}
