//! Token vocabulary and object-class vocabulary.
//!
//! The toy tokenizer is whitespace word-level over a closed vocabulary:
//! words are lowercased, punctuation is stripped, and every word must be
//! interned before a sequence that uses it can be tokenized. Object classes
//! map surface forms (token sequences, possibly multi-token) to class ids;
//! plural folding is handled by a designated plural suffix on the last word
//! of a form.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into the closed token vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index into the object-class list of an [`ObjectVocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub u32);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("duplicate class name `{0}`")]
    DuplicateClass(String),
    #[error("surface form `{form}` registered for both `{first}` and `{second}`")]
    SynonymCollision {
        form: String,
        first: String,
        second: String,
    },
    #[error("class `{0}` has an empty synonym")]
    EmptySynonym(String),
    #[error("word `{0}` is not in the closed vocabulary")]
    UnknownWord(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("vocabulary config line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Reserved end-of-sequence token, always id 0.
pub const END_WORD: &str = "<end>";
/// Reserved image-position placeholder, always id 1.
pub const IMG_WORD: &str = "<img>";
/// Plural marker appended to the last word of a surface form.
pub const PLURAL_SUFFIX: char = 's';

/// Whitespace word-level tokenizer over a closed vocabulary.
///
/// Normalization lowercases and drops everything except ASCII alphanumerics
/// and interior hyphens, so `"Image?"` and `"image"` are the same word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Tokenizer {
    /// Empty tokenizer holding only the reserved special tokens.
    pub fn new() -> Self {
        let mut t = Tokenizer {
            words: Vec::new(),
            index: BTreeMap::new(),
        };
        t.intern_raw(END_WORD);
        t.intern_raw(IMG_WORD);
        t
    }

    pub fn end_token(&self) -> TokenId {
        TokenId(0)
    }

    pub fn img_token(&self) -> TokenId {
        TokenId(1)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Normalize a raw word: lowercase, keep alphanumerics and hyphens.
    pub fn normalize(word: &str) -> String {
        word.chars()
            .filter(|c| c.is_ascii_alphanumeric() || *c == '-')
            .flat_map(|c| c.to_lowercase())
            .collect()
    }

    fn intern_raw(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = TokenId(self.words.len() as u32);
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    /// Add a word (normalized) to the vocabulary, returning its id.
    pub fn intern(&mut self, word: &str) -> TokenId {
        let norm = Self::normalize(word);
        self.intern_raw(&norm)
    }

    /// Add every whitespace-separated word of `text`.
    pub fn intern_text(&mut self, text: &str) {
        for w in text.split_whitespace() {
            let norm = Self::normalize(w);
            if !norm.is_empty() {
                self.intern_raw(&norm);
            }
        }
    }

    pub fn lookup_word(&self, word: &str) -> Option<TokenId> {
        self.index.get(&Self::normalize(word)).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id.index()).map(String::as_str)
    }

    /// Tokenize against the closed vocabulary; unknown words are an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            let norm = Self::normalize(w);
            if norm.is_empty() {
                continue;
            }
            match self.index.get(&norm) {
                Some(&id) => out.push(id),
                None => return Err(VocabError::UnknownWord(norm)),
            }
        }
        Ok(out)
    }

    /// Render a token sequence back to a space-joined string.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter_map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

/// One object class: canonical name plus every registered surface form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectClass {
    pub id: ClassId,
    pub canonical: String,
    /// Canonical name as a token sequence.
    pub canonical_tokens: Vec<TokenId>,
}

/// Serialize token-sequence keyed maps as pair lists so JSON works.
mod form_map_serde {
    use super::{ClassId, TokenId};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<Vec<TokenId>, ClassId>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        map.iter().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<Vec<TokenId>, ClassId>, D::Error> {
        let pairs: Vec<(Vec<TokenId>, ClassId)> = Vec::deserialize(d)?;
        Ok(pairs.into_iter().collect())
    }
}

/// Closed object-class vocabulary with surface-form lookup.
///
/// Explicit surface forms come from canonical names and synonyms. Plural
/// variants (last word + plural suffix) are derived at build time and map
/// to the same class, so `cats` resolves to the `cat` class without being
/// counted as an explicit surface form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectVocabulary {
    classes: Vec<ObjectClass>,
    #[serde(with = "form_map_serde")]
    forms: BTreeMap<Vec<TokenId>, ClassId>,
    #[serde(with = "form_map_serde")]
    derived_plurals: BTreeMap<Vec<TokenId>, ClassId>,
    max_form_len: usize,
}

impl ObjectVocabulary {
    pub fn classes(&self) -> &[ObjectClass] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, id: ClassId) -> Option<&ObjectClass> {
        self.classes.get(id.index())
    }

    pub fn class_by_name(&self, name: &str) -> Option<ClassId> {
        let name = name.trim().to_lowercase();
        self.classes
            .iter()
            .find(|c| c.canonical == name)
            .map(|c| c.id)
    }

    /// Number of explicit surface forms (derived plurals excluded).
    pub fn n_surface_forms(&self) -> usize {
        self.forms.len()
    }

    pub fn surface_forms(&self) -> impl Iterator<Item = (&Vec<TokenId>, ClassId)> {
        self.forms.iter().map(|(k, &v)| (k, v))
    }

    /// Longest registered surface form, in tokens.
    pub fn max_form_len(&self) -> usize {
        self.max_form_len
    }

    /// Resolve a token sequence to a class: explicit forms first, then
    /// derived plural forms.
    pub fn lookup_form(&self, tokens: &[TokenId]) -> Option<ClassId> {
        if let Some(&c) = self.forms.get(tokens) {
            return Some(c);
        }
        self.derived_plurals.get(tokens).copied()
    }
}

/// Build an [`ObjectVocabulary`] from `(canonical, synonyms)` entries.
///
/// Every canonical name and synonym is interned into `tokenizer` and
/// registered as a surface form; plural variants of each form are interned
/// and added as derived lookups when they do not collide with an explicit
/// form of another class.
pub fn build_vocabulary(
    entries: &[(String, Vec<String>)],
    tokenizer: &mut Tokenizer,
) -> Result<ObjectVocabulary, VocabError> {
    let mut classes: Vec<ObjectClass> = Vec::new();
    let mut forms: BTreeMap<Vec<TokenId>, ClassId> = BTreeMap::new();

    for (canonical, synonyms) in entries {
        let canonical_norm = canonical
            .split_whitespace()
            .map(Tokenizer::normalize)
            .filter(|w| !w.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        if canonical_norm.is_empty() {
            return Err(VocabError::Parse {
                line: 0,
                msg: "empty class name".into(),
            });
        }
        if classes.iter().any(|c| c.canonical == canonical_norm) {
            return Err(VocabError::DuplicateClass(canonical_norm));
        }
        let id = ClassId(classes.len() as u32);
        tokenizer.intern_text(&canonical_norm);
        let canonical_tokens = tokenizer
            .tokenize(&canonical_norm)
            .expect("canonical words were just interned");

        let register =
            |form_tokens: Vec<TokenId>, forms: &mut BTreeMap<Vec<TokenId>, ClassId>| {
                if form_tokens.is_empty() {
                    return Err(VocabError::EmptySynonym(canonical_norm.clone()));
                }
                match forms.get(&form_tokens) {
                    Some(&existing) if existing != id => Err(VocabError::SynonymCollision {
                        form: form_tokens
                            .iter()
                            .map(|t| t.to_string())
                            .collect::<Vec<_>>()
                            .join(" "),
                        first: classes[existing.index()].canonical.clone(),
                        second: canonical_norm.clone(),
                    }),
                    _ => {
                        forms.insert(form_tokens, id);
                        Ok(())
                    }
                }
            };

        register(canonical_tokens.clone(), &mut forms)?;
        for syn in synonyms {
            if syn.trim().is_empty() {
                return Err(VocabError::EmptySynonym(canonical_norm.clone()));
            }
            tokenizer.intern_text(syn);
            let syn_tokens = tokenizer.tokenize(syn)?;
            register(syn_tokens, &mut forms)?;
        }

        classes.push(ObjectClass {
            id,
            canonical: canonical_norm,
            canonical_tokens,
        });
    }

    // Derived plural lookups: append the plural suffix to the last word of
    // every explicit form. Explicit registrations always win; colliding
    // derivations are dropped.
    let mut derived: BTreeMap<Vec<TokenId>, ClassId> = BTreeMap::new();
    let explicit: Vec<(Vec<TokenId>, ClassId)> =
        forms.iter().map(|(k, &v)| (k.clone(), v)).collect();
    for (form, class) in explicit {
        let last = form.last().copied().expect("forms are non-empty");
        let last_word = tokenizer.word(last).expect("interned").to_string();
        let plural_word = format!("{last_word}{PLURAL_SUFFIX}");
        let plural_id = tokenizer.intern(&plural_word);
        let mut plural_form = form.clone();
        *plural_form.last_mut().expect("non-empty") = plural_id;
        if forms.contains_key(&plural_form) {
            continue;
        }
        match derived.get(&plural_form) {
            Some(&existing) if existing != class => {
                derived.remove(&plural_form);
            }
            Some(_) => {}
            None => {
                derived.insert(plural_form, class);
            }
        }
    }

    let max_form_len = forms
        .keys()
        .chain(derived.keys())
        .map(Vec::len)
        .max()
        .unwrap_or(0);

    Ok(ObjectVocabulary {
        classes,
        forms,
        derived_plurals: derived,
        max_form_len,
    })
}

/// Parse the plain-text vocabulary config: one class per line,
/// `canonical: syn1, syn2, ...`. `#` starts a comment.
pub fn parse_vocab_config(text: &str) -> Result<Vec<(String, Vec<String>)>, VocabError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (canonical, rest) = match line.split_once(':') {
            Some((c, r)) => (c.trim(), r.trim()),
            None => (line, ""),
        };
        if canonical.is_empty() {
            return Err(VocabError::Parse {
                line: i + 1,
                msg: "missing class name before `:`".into(),
            });
        }
        let synonyms: Vec<String> = rest
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        entries.push((canonical.to_string(), synonyms));
    }
    Ok(entries)
}

/// Build a vocabulary straight from config text.
pub fn vocabulary_from_config(
    text: &str,
    tokenizer: &mut Tokenizer,
) -> Result<ObjectVocabulary, VocabError> {
    let entries = parse_vocab_config(text)?;
    build_vocabulary(&entries, tokenizer)
}

/// Default object classes for generated corpora and demos.
pub const BUILTIN_VOCAB: &str = "\
# canonical: synonyms
person
cat
dog
bird
banana
apple
orange
kiwi
papaya
baseball
baseball glove: glove
baseball bat
cup
bottle
chair
bed
laptop
television: tv
microwave
toilet
car: automobile
truck
boat
clock
book
ball
couch: sofa
cell phone
dining table
teddy bear
";

/// Filler words used by prompts, captions, and probing templates.
pub const FILLER_WORDS: &[&str] = &[
    "a", "an", "the", "and", "in", "on", "is", "there", "image", "please", "describe", "this",
    "detail", "yes", "no",
];

/// Default open-ended description prompt.
pub const DEFAULT_PROMPT: &str = "please describe this image in detail";

/// Yes/no presence-probing template; `{object}` is replaced by the class name.
pub const PRESENCE_TEMPLATE: &str = "Is there a {object} in the image?";

/// Tokenizer plus builtin vocabulary with filler words pre-interned.
pub fn builtin_vocabulary() -> (Tokenizer, ObjectVocabulary) {
    let mut tok = Tokenizer::new();
    for w in FILLER_WORDS {
        tok.intern(w);
    }
    let vocab = vocabulary_from_config(BUILTIN_VOCAB, &mut tok)
        .expect("builtin vocabulary config is valid");
    (tok, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(list: &[(&str, &[&str])]) -> Vec<(String, Vec<String>)> {
        list.iter()
            .map(|(c, syns)| (c.to_string(), syns.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    #[test]
    fn two_classes_three_surface_forms() {
        let mut tok = Tokenizer::new();
        let vocab =
            build_vocabulary(&entries(&[("cat", &["cats"]), ("dog", &[])]), &mut tok).unwrap();
        assert_eq!(vocab.n_classes(), 2);
        assert_eq!(vocab.n_surface_forms(), 3);
    }

    #[test]
    fn duplicate_class_rejected() {
        let mut tok = Tokenizer::new();
        let err = build_vocabulary(&entries(&[("cat", &[]), ("cat", &[])]), &mut tok).unwrap_err();
        assert_eq!(err, VocabError::DuplicateClass("cat".into()));
    }

    #[test]
    fn synonym_collision_rejected() {
        let mut tok = Tokenizer::new();
        let err = build_vocabulary(
            &entries(&[("cat", &["kitty"]), ("dog", &["kitty"])]),
            &mut tok,
        )
        .unwrap_err();
        assert!(matches!(err, VocabError::SynonymCollision { .. }));
    }

    #[test]
    fn multi_token_synonym_accepted() {
        let mut tok = Tokenizer::new();
        let vocab = build_vocabulary(
            &entries(&[("glove", &["baseball glove"]), ("baseball", &[])]),
            &mut tok,
        )
        .unwrap();
        let form = tok.tokenize("baseball glove").unwrap();
        assert_eq!(form.len(), 2);
        assert_eq!(vocab.lookup_form(&form), vocab.class_by_name("glove"));
    }

    #[test]
    fn derived_plural_resolves_to_singular() {
        let mut tok = Tokenizer::new();
        let vocab = build_vocabulary(&entries(&[("kiwi", &[]), ("dog", &[])]), &mut tok).unwrap();
        let kiwis = tok.tokenize("kiwis").unwrap();
        assert_eq!(vocab.lookup_form(&kiwis), vocab.class_by_name("kiwi"));
        // Derived forms are not counted as explicit surface forms.
        assert_eq!(vocab.n_surface_forms(), 2);
    }

    #[test]
    fn explicit_plural_beats_derived() {
        let mut tok = Tokenizer::new();
        // `cats` is its own class; the derived plural of `cat` must not
        // shadow it.
        let vocab = build_vocabulary(&entries(&[("cats", &[]), ("cat", &[])]), &mut tok).unwrap();
        let cats = tok.tokenize("cats").unwrap();
        assert_eq!(vocab.lookup_form(&cats), vocab.class_by_name("cats"));
    }

    #[test]
    fn lookup_is_a_function() {
        let (tok, vocab) = builtin_vocabulary();
        let mut seen: BTreeMap<Vec<TokenId>, ClassId> = BTreeMap::new();
        for (form, class) in vocab.surface_forms() {
            assert!(seen.insert(form.clone(), class).is_none());
        }
        // Every explicit form resolves to its registered class.
        for (form, class) in vocab.surface_forms() {
            assert_eq!(vocab.lookup_form(form), Some(class));
        }
        drop(tok);
    }

    #[test]
    fn normalization_strips_punctuation() {
        let mut tok = Tokenizer::new();
        tok.intern("image");
        assert_eq!(tok.tokenize("Image?").unwrap(), tok.tokenize("image").unwrap());
    }

    #[test]
    fn unknown_word_is_error() {
        let tok = Tokenizer::new();
        assert!(matches!(
            tok.tokenize("zebra"),
            Err(VocabError::UnknownWord(_))
        ));
    }

    #[test]
    fn config_parse_roundtrip() {
        let entries = parse_vocab_config("cat: cats, kitty\ndog\n# comment\n\n").unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].0, "cat");
        assert_eq!(entries[0].1, vec!["cats".to_string(), "kitty".to_string()]);
        assert!(entries[1].1.is_empty());
    }

    #[test]
    fn builtin_is_consistent() {
        let (tok, vocab) = builtin_vocabulary();
        assert!(vocab.n_classes() >= 20);
        assert!(tok.tokenize(DEFAULT_PROMPT).is_ok());
        let q = PRESENCE_TEMPLATE.replace("{object}", "cat");
        assert!(tok.tokenize(&q).is_ok());
    }
}
