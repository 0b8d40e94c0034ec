//! Deterministic scripted oracle backend.
//!
//! Captions follow a stated emission rule over the scenario's planted
//! geometry, so every pipeline decision has a knowable ground truth:
//!
//! - a real class is mentioned iff at least 50% of its anchor-box evidence
//!   survives the intervention;
//! - a hallucinated class is mentioned iff at least one patch worth of its
//!   planted HIT evidence survives.
//!
//! Replacement strategies differ in how much evidence a replaced patch
//! carries: zero destroys it, average carries `|patches|/N` of every class,
//! random/neighbor carry whatever their source patch held. Zeroing is
//! therefore never worse at removing hallucinations than the alternatives.
//!
//! Attention is scripted: at the grounding layer an object token puts 0.8
//! of its mass uniformly on its anchor/HIT patches and 0.2 uniformly on the
//! rest of the image; every other layer is a single-patch attention sink on
//! patch 0.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::image::PatchSet;
use crate::scenario::Scenario;
use crate::seeds::derive_seed;
use crate::vocab::{ClassId, ObjectVocabulary, TokenId, Tokenizer};

use super::intervention::{neighbor_source, random_source};
use super::{
    rank_top_k, AttentionRow, AttentionTensor, DecodeParams, GenerationRecord, InterventionSpec,
    ModelBackend, ModelError, PopeAnswer, Strategy,
};

/// Anchor share of an object token's image attention at the grounding layer.
pub const ANCHOR_MASS: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedConfig {
    /// Layer count of the pretend decoder.
    pub layers: usize,
    /// 1-based layer at which object tokens ground to their patches.
    pub grounding_layer: usize,
    /// Generation budget; raised automatically to fit the longest caption.
    pub max_new: usize,
    /// Diagnostic mode: hallucinated tokens attend to background patches
    /// instead of their HITs, so top-K selection misses them.
    pub divert_hallucination_attention: bool,
}

impl Default for ScriptedConfig {
    fn default() -> Self {
        ScriptedConfig {
            layers: 4,
            grounding_layer: 2,
            max_new: 48,
            divert_hallucination_attention: false,
        }
    }
}

#[derive(Debug, Clone)]
struct ClassInfo {
    tokens: Vec<TokenId>,
    /// Anchor box for real classes, planted HIT set for hallucinated ones.
    patches: PatchSet,
    hallucinated: bool,
    /// Probability band for emitted subtokens (uncertainty baseline signal).
    step_prob: f64,
    /// Peak lens confidence at the grounding layer (internal-confidence
    /// baseline signal).
    lens_conf: f64,
}

/// Oracle backend bound to one scenario.
pub struct ScriptedBackend {
    config: ModelConfig,
    scenario: Scenario,
    classes: BTreeMap<ClassId, ClassInfo>,
    grounding_layer: usize,
    divert: bool,
    a_token: TokenId,
    and_token: TokenId,
    end_token: TokenId,
    img_token: TokenId,
}

fn unit_from_seed(seed: u64) -> f64 {
    (seed >> 11) as f64 / (1u64 << 53) as f64
}

impl ScriptedBackend {
    pub fn for_scenario(
        scenario: &Scenario,
        vocab: &ObjectVocabulary,
        tokenizer: &Tokenizer,
        cfg: &ScriptedConfig,
    ) -> Result<Self, ModelError> {
        if cfg.grounding_layer == 0 || cfg.grounding_layer > cfg.layers {
            return Err(ModelError::LayerOutOfRange {
                layer: cfg.grounding_layer,
                layers: cfg.layers,
            });
        }
        let a_token = tokenizer
            .lookup_word("a")
            .ok_or_else(|| ModelError::InvalidIntervention("tokenizer lacks `a`".into()))?;
        let and_token = tokenizer
            .lookup_word("and")
            .ok_or_else(|| ModelError::InvalidIntervention("tokenizer lacks `and`".into()))?;

        let mut classes = BTreeMap::new();
        let mut caption_budget = 1; // end token
        for (&class, hallucinated) in scenario
            .expected_real
            .iter()
            .map(|c| (c, false))
            .chain(scenario.expected_hallucinated.iter().map(|c| (c, true)))
        {
            let info = vocab.class(class).ok_or_else(|| {
                ModelError::InvalidIntervention(format!("class {class} missing from vocabulary"))
            })?;
            let patches = scenario
                .class_patches(class)
                .ok_or_else(|| {
                    ModelError::InvalidIntervention(format!("class {class} has no patches"))
                })?
                .clone();
            let u_step = unit_from_seed(derive_seed(scenario.seed, 0x5700 + u64::from(class.0)));
            let u_lens = unit_from_seed(derive_seed(scenario.seed, 0x1e50 + u64::from(class.0)));
            let (step_prob, lens_conf) = if hallucinated {
                (0.50 + 0.30 * u_step, 0.35 + 0.30 * u_lens)
            } else {
                (0.78 + 0.17 * u_step, 0.80 + 0.15 * u_lens)
            };
            caption_budget += 2 + info.canonical_tokens.len();
            classes.insert(
                class,
                ClassInfo {
                    tokens: info.canonical_tokens.clone(),
                    patches,
                    hallucinated,
                    step_prob,
                    lens_conf,
                },
            );
        }

        let config = ModelConfig {
            layers: cfg.layers,
            heads: 1,
            d_model: 8,
            vocab_size: tokenizer.len(),
            image_tokens: scenario.n_image_tokens(),
            prompt_len: scenario.prompt.len(),
            max_new: cfg.max_new.max(caption_budget),
        };
        Ok(ScriptedBackend {
            config,
            scenario: scenario.clone(),
            classes,
            grounding_layer: cfg.grounding_layer,
            divert: cfg.divert_hallucination_attention,
            a_token,
            and_token,
            end_token: tokenizer.end_token(),
            img_token: tokenizer.img_token(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn grounding_layer(&self) -> usize {
        self.grounding_layer
    }

    /// Evidence for a patch set surviving an intervention, in patch
    /// equivalents. Untouched patches count 1; replaced patches count the
    /// share of the set their replacement content carries.
    fn evidence(&self, patches: &PatchSet, spec: Option<&InterventionSpec>) -> f64 {
        let Some(spec) = spec else {
            return patches.len() as f64;
        };
        let n = self.config.image_tokens;
        let untouched = patches
            .iter()
            .filter(|p| !spec.positions.contains(p))
            .count() as f64;
        if spec.strategy == Strategy::Zero {
            return untouched;
        }
        let non_selected: Vec<usize> = (0..n).filter(|p| !spec.positions.contains(p)).collect();
        let mut carried = 0.0;
        for &p in &spec.positions {
            carried += match spec.strategy {
                Strategy::Zero => 0.0,
                Strategy::Average => patches.len() as f64 / n as f64,
                Strategy::Random => match random_source(spec.seed, p, &non_selected) {
                    Some(src) if patches.contains(&src) => 1.0,
                    _ => 0.0,
                },
                Strategy::Neighbor => {
                    let (w, h) = (self.scenario.image.grid_w, self.scenario.image.grid_h);
                    match neighbor_source(p, w, h, &spec.positions) {
                        Some(src) if patches.contains(&src) => 1.0,
                        _ => 0.0,
                    }
                }
            };
        }
        untouched + carried
    }

    /// Classes the caption mentions under an intervention.
    pub fn mentioned_classes(&self, spec: Option<&InterventionSpec>) -> BTreeSet<ClassId> {
        self.classes
            .iter()
            .filter(|(_, info)| {
                let ev = self.evidence(&info.patches, spec);
                if info.hallucinated {
                    ev >= 1.0 - 1e-9
                } else {
                    2.0 * ev + 1e-9 >= info.patches.len() as f64
                }
            })
            .map(|(&c, _)| c)
            .collect()
    }

    /// Caption tokens plus, per token, the class it belongs to.
    fn caption(&self, mentioned: &BTreeSet<ClassId>) -> (Vec<TokenId>, Vec<Option<ClassId>>) {
        let mut tokens = Vec::new();
        let mut owners = Vec::new();
        for (i, class) in mentioned.iter().enumerate() {
            if i > 0 {
                tokens.push(self.and_token);
                owners.push(None);
            }
            tokens.push(self.a_token);
            owners.push(None);
            for &t in &self.classes[class].tokens {
                tokens.push(t);
                owners.push(Some(*class));
            }
        }
        tokens.push(self.end_token);
        owners.push(None);
        (tokens, owners)
    }

    /// Patches an object token attends to at the grounding layer.
    fn anchor_patches(&self, class: ClassId) -> PatchSet {
        let info = &self.classes[&class];
        if self.divert && info.hallucinated {
            // Diagnostic misdirection: same-size set of background patches.
            let want = info.patches.len();
            return (0..self.config.image_tokens)
                .filter(|p| !info.patches.contains(p))
                .take(want)
                .collect();
        }
        info.patches.clone()
    }

    /// Image-block attention profile for one generated token at one layer.
    fn image_profile(&self, owner: Option<ClassId>, layer: usize) -> Vec<f64> {
        let n = self.config.image_tokens;
        let mut row = vec![0.0; n];
        match owner {
            Some(class) if layer == self.grounding_layer => {
                let anchors = self.anchor_patches(class);
                if anchors.len() >= n {
                    row.fill(1.0 / n as f64);
                } else {
                    let on = ANCHOR_MASS / anchors.len() as f64;
                    let off = (1.0 - ANCHOR_MASS) / (n - anchors.len()) as f64;
                    for (p, slot) in row.iter_mut().enumerate() {
                        *slot = if anchors.contains(&p) { on } else { off };
                    }
                }
            }
            _ => {
                // Attention-sink pattern.
                row[0] = 1.0;
            }
        }
        row
    }

    fn step_prob(&self, owner: Option<ClassId>, token: TokenId) -> f64 {
        match owner {
            Some(class) => self.classes[&class].step_prob,
            None if token == self.end_token => 0.99,
            None => 0.97,
        }
    }

    fn peaked(&self, token: TokenId, peak: f64) -> Vec<f64> {
        let v = self.config.vocab_size;
        let rest = (1.0 - peak) / (v - 1) as f64;
        let mut dist = vec![rest; v];
        dist[token.index()] = peak;
        dist
    }
}

impl ModelBackend for ScriptedBackend {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn backend_id(&self) -> &'static str {
        "scripted"
    }

    fn generate(
        &self,
        intervention: Option<&InterventionSpec>,
        params: &DecodeParams,
        capture_layers: &BTreeSet<usize>,
    ) -> Result<GenerationRecord, ModelError> {
        for &l in capture_layers {
            if l == 0 || l > self.config.layers {
                return Err(ModelError::LayerOutOfRange {
                    layer: l,
                    layers: self.config.layers,
                });
            }
        }
        if let Some(spec) = intervention {
            spec.validate(self.config.image_tokens)?;
        }
        let mentioned = self.mentioned_classes(intervention);
        let (mut tokens, mut owners) = self.caption(&mentioned);
        let budget = params.max_new.min(self.config.max_new);
        tokens.truncate(budget);
        owners.truncate(budget);

        let n = self.config.image_tokens;
        let input_len = n + self.scenario.prompt.len();
        let step_probs: Vec<f32> = tokens
            .iter()
            .zip(&owners)
            .map(|(&t, &o)| self.step_prob(o, t) as f32)
            .collect();

        let mut captured = BTreeMap::new();
        if !tokens.is_empty() {
            for &layer in capture_layers {
                let rows = owners
                    .iter()
                    .enumerate()
                    .map(|(j, &owner)| {
                        let pos = input_len + j;
                        let profile = self.image_profile(owner, layer);
                        let mut scores = vec![0.0f32; pos + 1];
                        for (p, &v) in profile.iter().enumerate() {
                            scores[p] = v as f32;
                        }
                        AttentionRow {
                            query_pos: pos,
                            scores,
                        }
                    })
                    .collect();
                captured.insert(layer, AttentionTensor { layer, rows });
            }
        }

        let mut input_tokens = vec![self.img_token; n];
        input_tokens.extend_from_slice(&self.scenario.prompt);
        Ok(GenerationRecord {
            input_tokens,
            image_len: n,
            output_tokens: tokens,
            step_probs: Some(step_probs),
            captured,
            intervention: intervention.cloned(),
            backend_id: self.backend_id().to_string(),
            decode: *params,
            renormalized_on_import: false,
        })
    }

    fn logit_lens(
        &self,
        record: &GenerationRecord,
        position: usize,
        layer: usize,
        top_k: usize,
    ) -> Result<Vec<(TokenId, f64)>, ModelError> {
        if layer == 0 || layer > self.config.layers {
            return Err(ModelError::LayerOutOfRange {
                layer,
                layers: self.config.layers,
            });
        }
        let total = record.total_len();
        if position >= total {
            return Err(ModelError::PositionOutOfRange {
                position,
                len: total,
            });
        }
        let n = self.config.image_tokens;
        let uniform = vec![1.0 / self.config.vocab_size as f64; self.config.vocab_size];
        let layer_factor = if layer == self.grounding_layer { 1.0 } else { 0.5 };

        let dist = if position < n {
            // Image token: at the grounding layer the lens reads out the
            // class whose patches (HITs or anchor box) contain it.
            if layer != self.grounding_layer {
                uniform
            } else {
                let hit_class = self
                    .scenario
                    .planted_hits
                    .iter()
                    .find(|h| h.patches.contains(&position))
                    .map(|h| h.class)
                    .or_else(|| {
                        self.scenario
                            .image
                            .objects
                            .iter()
                            .find(|o| o.patches.contains(&position))
                            .map(|o| o.class)
                    });
                match hit_class.and_then(|c| self.classes.get(&c)) {
                    Some(info) => self.peaked(info.tokens[0], 0.85),
                    None => uniform,
                }
            }
        } else if position < record.input_len() {
            uniform
        } else {
            let j = position - record.input_len();
            let token = record.output_tokens[j];
            let owner = self
                .classes
                .iter()
                .find(|(_, info)| info.tokens.contains(&token))
                .map(|(&c, _)| c);
            let peak = match owner {
                Some(c) => self.classes[&c].lens_conf,
                None if token == self.end_token => 0.95,
                None => 0.90,
            } * layer_factor;
            self.peaked(token, peak)
        };
        Ok(rank_top_k(&dist, top_k))
    }

    fn answer_presence(
        &self,
        class: ClassId,
        _prompt: &[TokenId],
        intervention: Option<&InterventionSpec>,
    ) -> Result<PopeAnswer, ModelError> {
        if let Some(spec) = intervention {
            spec.validate(self.config.image_tokens)?;
        }
        if self.mentioned_classes(intervention).contains(&class) {
            Ok(PopeAnswer::Yes)
        } else {
            Ok(PopeAnswer::No)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{ImageSpec, PlacedObject};
    use crate::scenario::PlantedHit;
    use crate::vocab::builtin_vocabulary;

    /// 3x3 grid: real object box {3,4,6,7}, hallucination with HITs {4,7}
    /// riding on it, plus a 1-patch real object at {8}.
    pub(crate) fn tiny_scenario(tok: &Tokenizer, vocab: &ObjectVocabulary) -> Scenario {
        let cat = vocab.class_by_name("cat").unwrap();
        let dog = vocab.class_by_name("dog").unwrap();
        let kiwi = vocab.class_by_name("kiwi").unwrap();
        Scenario {
            image: ImageSpec {
                grid_w: 3,
                grid_h: 3,
                objects: vec![
                    PlacedObject {
                        class: cat,
                        patches: [3, 4, 6, 7].into_iter().collect(),
                    },
                    PlacedObject {
                        class: kiwi,
                        patches: [8].into_iter().collect(),
                    },
                ],
            },
            prompt: tok.tokenize("please describe this image in detail").unwrap(),
            planted_hits: vec![PlantedHit {
                class: dog,
                patches: [4, 7].into_iter().collect(),
                attractor: cat,
            }],
            expected_real: [cat, kiwi].into_iter().collect(),
            expected_hallucinated: [dog].into_iter().collect(),
            seed: 99,
        }
    }

    fn setup() -> (ScriptedBackend, Scenario, Tokenizer, ObjectVocabulary) {
        let (tok, vocab) = builtin_vocabulary();
        let scenario = tiny_scenario(&tok, &vocab);
        let backend =
            ScriptedBackend::for_scenario(&scenario, &vocab, &tok, &ScriptedConfig::default())
                .unwrap();
        (backend, scenario, tok, vocab)
    }

    fn zero(positions: &[usize]) -> InterventionSpec {
        InterventionSpec::zero(positions.iter().copied().collect())
    }

    #[test]
    fn no_intervention_mentions_everything() {
        let (backend, scenario, ..) = setup();
        let mentioned = backend.mentioned_classes(None);
        let expected: BTreeSet<ClassId> = scenario
            .expected_real
            .union(&scenario.expected_hallucinated)
            .copied()
            .collect();
        assert_eq!(mentioned, expected);
    }

    #[test]
    fn zeroing_all_hits_removes_the_hallucination_only() {
        let (backend, scenario, _, vocab) = setup();
        let dog = vocab.class_by_name("dog").unwrap();
        let mentioned = backend.mentioned_classes(Some(&zero(&[4, 7])));
        assert!(!mentioned.contains(&dog));
        for real in &scenario.expected_real {
            assert!(mentioned.contains(real), "real class {real} vanished");
        }
    }

    #[test]
    fn one_surviving_hit_keeps_the_hallucination() {
        let (backend, _, _, vocab) = setup();
        let dog = vocab.class_by_name("dog").unwrap();
        let mentioned = backend.mentioned_classes(Some(&zero(&[4])));
        assert!(mentioned.contains(&dog));
    }

    #[test]
    fn small_object_box_fully_zeroed_disappears() {
        let (backend, _, _, vocab) = setup();
        let kiwi = vocab.class_by_name("kiwi").unwrap();
        let mentioned = backend.mentioned_classes(Some(&zero(&[8])));
        assert!(!mentioned.contains(&kiwi));
    }

    #[test]
    fn emission_matches_rule_for_every_subset() {
        // Exhaustive faithfulness over all 2^9 zero-out subsets.
        let (backend, scenario, ..) = setup();
        let n = scenario.n_image_tokens();
        for mask in 0u32..(1 << n) {
            let positions: BTreeSet<usize> = (0..n).filter(|p| mask & (1 << p) != 0).collect();
            let spec = InterventionSpec::zero(positions.clone());
            let mentioned = backend.mentioned_classes(Some(&spec));
            for obj in &scenario.image.objects {
                let live = obj.patches.iter().filter(|p| !positions.contains(p)).count();
                let expect = 2 * live >= obj.patches.len();
                assert_eq!(mentioned.contains(&obj.class), expect, "mask {mask:b}");
            }
            for hit in &scenario.planted_hits {
                let live = hit.patches.iter().filter(|p| !positions.contains(p)).count();
                assert_eq!(mentioned.contains(&hit.class), live >= 1, "mask {mask:b}");
            }
        }
    }

    #[test]
    fn caption_is_deterministic_and_grounded() {
        let (backend, scenario, tok, _) = setup();
        let params = DecodeParams { max_new: 48, seed: 0 };
        let layers: BTreeSet<usize> = (1..=backend.config().layers).collect();
        let a = backend.generate(None, &params, &layers).unwrap();
        let b = backend.generate(None, &params, &layers).unwrap();
        assert_eq!(a, b);
        a.validate(backend.config()).unwrap();
        assert!(a.output_tokens.contains(&tok.lookup_word("cat").unwrap()));

        // Grounding-layer rows of object tokens put 0.8 on their patches.
        let tensor = a.tensor(backend.grounding_layer()).unwrap();
        let cat_tokens = &backend.classes[&scenario.image.objects[0].class].tokens;
        let j = a
            .output_tokens
            .iter()
            .position(|t| cat_tokens.contains(t))
            .unwrap();
        let row = tensor.row_for(a.output_position(j)).unwrap();
        let on_box: f64 = scenario.image.objects[0]
            .patches
            .iter()
            .map(|&p| f64::from(row.score(p)))
            .sum();
        assert!((on_box - ANCHOR_MASS).abs() < 1e-6);

        // Non-grounding layers are an attention sink on patch 0.
        let other_layer = if backend.grounding_layer() == 1 { 2 } else { 1 };
        let sink = a.tensor(other_layer).unwrap().row_for(a.output_position(j)).unwrap();
        assert!((f64::from(sink.score(0)) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_dominates_other_strategies() {
        let (backend, _, _, vocab) = setup();
        let dog = vocab.class_by_name("dog").unwrap();
        for strategy in Strategy::ALL {
            let spec = InterventionSpec {
                positions: [4, 7].into_iter().collect(),
                strategy,
                stage: super::super::Stage::InputToken,
                seed: 3,
            };
            let removed_by_zero = !backend
                .mentioned_classes(Some(&zero(&[4, 7])))
                .contains(&dog);
            let removed = !backend.mentioned_classes(Some(&spec)).contains(&dog);
            assert!(removed_by_zero || !removed);
        }
    }

    #[test]
    fn neighbor_replacement_can_preserve_the_hallucination() {
        // HITs {4,7} sit inside the cat box {3,4,6,7}; neighbor sources are
        // box patches, but those carry cat evidence, not dog evidence, unless
        // the source is itself a HIT. With both HITs selected the sources are
        // 3 and 6, so the dog evidence dies just like zero.
        let (backend, _, _, vocab) = setup();
        let dog = vocab.class_by_name("dog").unwrap();
        let spec = InterventionSpec {
            positions: [4].into_iter().collect(),
            strategy: Strategy::Neighbor,
            stage: super::super::Stage::InputToken,
            seed: 0,
        };
        // Patch 4's left neighbor is 3 (not selected, not a HIT): carries no
        // dog evidence. But HIT 7 is untouched, so the dog survives anyway.
        assert!(backend.mentioned_classes(Some(&spec)).contains(&dog));
    }

    #[test]
    fn presence_answers_follow_emission() {
        let (backend, _, tok, vocab) = setup();
        let dog = vocab.class_by_name("dog").unwrap();
        let q = tok.tokenize("is there a dog in the image").unwrap();
        assert_eq!(
            backend.answer_presence(dog, &q, None).unwrap(),
            PopeAnswer::Yes
        );
        assert_eq!(
            backend.answer_presence(dog, &q, Some(&zero(&[4, 7]))).unwrap(),
            PopeAnswer::No
        );
    }

    #[test]
    fn lens_reads_hit_patches_as_the_hallucinated_class() {
        let (backend, scenario, ..) = setup();
        let params = DecodeParams { max_new: 48, seed: 0 };
        let rec = backend.generate(None, &params, &BTreeSet::new()).unwrap();
        let dog_first = backend.classes[&scenario.planted_hits[0].class].tokens[0];
        let top = backend
            .logit_lens(&rec, 4, backend.grounding_layer(), 1)
            .unwrap();
        assert_eq!(top[0].0, dog_first);
        // Away from the grounding layer the lens is uninformative.
        let other_layer = if backend.grounding_layer() == 1 { 2 } else { 1 };
        let flat = backend.logit_lens(&rec, 4, other_layer, 2).unwrap();
        assert!((flat[0].1 - flat[1].1).abs() < 1e-12);
    }

    #[test]
    fn diverted_attention_misses_hits() {
        let (_, scenario, tok, vocab) = setup();
        let cfg = ScriptedConfig {
            divert_hallucination_attention: true,
            ..ScriptedConfig::default()
        };
        let backend = ScriptedBackend::for_scenario(&scenario, &vocab, &tok, &cfg).unwrap();
        let anchors = backend.anchor_patches(scenario.planted_hits[0].class);
        assert!(anchors.is_disjoint(&scenario.planted_hits[0].patches));
    }
}
