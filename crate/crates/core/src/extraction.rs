//! Object-mention extraction from generated token sequences.
//!
//! Greedy left-to-right longest-match against the vocabulary's surface
//! forms (plural folding included), so `baseball glove` never fires as a
//! bare `baseball`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{ClassId, ObjectVocabulary, TokenId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExtractionError {
    #[error("class {0} is not registered")]
    UnknownClass(ClassId),
}

/// One extracted mention: a class plus its subtoken span in the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMention {
    pub class: ClassId,
    /// Start index within the output token sequence.
    pub start: usize,
    /// Span length in subtokens.
    pub len: usize,
}

impl ObjectMention {
    /// Output indices covered by the mention.
    pub fn output_span(&self) -> impl Iterator<Item = usize> {
        self.start..self.start + self.len
    }
}

/// Extract mentions by greedy longest-match. Spans never overlap; repeated
/// mentions of one class stay distinct.
pub fn extract_object_mentions(
    output: &[TokenId],
    vocab: &ObjectVocabulary,
) -> Vec<ObjectMention> {
    let mut mentions = Vec::new();
    let max_len = vocab.max_form_len().max(1);
    let mut i = 0;
    while i < output.len() {
        let mut matched = None;
        let longest = max_len.min(output.len() - i);
        for len in (1..=longest).rev() {
            if let Some(class) = vocab.lookup_form(&output[i..i + len]) {
                matched = Some((class, len));
                break;
            }
        }
        match matched {
            Some((class, len)) => {
                mentions.push(ObjectMention {
                    class,
                    start: i,
                    len,
                });
                i += len;
            }
            None => i += 1,
        }
    }
    mentions
}

/// Whether any mention of `class` appears in the output (synonyms and
/// plural forms count).
pub fn contains_class(
    output: &[TokenId],
    class: ClassId,
    vocab: &ObjectVocabulary,
) -> Result<bool, ExtractionError> {
    if vocab.class(class).is_none() {
        return Err(ExtractionError::UnknownClass(class));
    }
    Ok(extract_object_mentions(output, vocab)
        .iter()
        .any(|m| m.class == class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocabulary, builtin_vocabulary, Tokenizer};

    #[test]
    fn simple_caption_yields_two_mentions() {
        let (tok, vocab) = builtin_vocabulary();
        let output = tok.tokenize("a cat and a dog").unwrap();
        let mentions = extract_object_mentions(&output, &vocab);
        assert_eq!(mentions.len(), 2);
        assert_eq!(mentions[0].class, vocab.class_by_name("cat").unwrap());
        assert_eq!(mentions[1].class, vocab.class_by_name("dog").unwrap());
    }

    #[test]
    fn plural_resolves_to_singular_class() {
        let (tok, vocab) = builtin_vocabulary();
        let output = tok.tokenize("cats").unwrap();
        let mentions = extract_object_mentions(&output, &vocab);
        assert_eq!(mentions.len(), 1);
        assert_eq!(mentions[0].class, vocab.class_by_name("cat").unwrap());
    }

    #[test]
    fn longest_match_wins() {
        let mut tok = Tokenizer::new();
        let vocab = build_vocabulary(
            &[
                ("baseball".to_string(), vec![]),
                ("baseball glove".to_string(), vec![]),
            ],
            &mut tok,
        )
        .unwrap();
        let output = tok.tokenize("baseball glove").unwrap();
        let mentions = extract_object_mentions(&output, &vocab);
        assert_eq!(mentions.len(), 1);
        assert_eq!(
            mentions[0].class,
            vocab.class_by_name("baseball glove").unwrap()
        );
        assert_eq!(mentions[0].len, 2);

        // A bare `baseball` still matches the shorter class.
        let output = tok.tokenize("baseball").unwrap();
        let mentions = extract_object_mentions(&output, &vocab);
        assert_eq!(mentions[0].class, vocab.class_by_name("baseball").unwrap());
    }

    #[test]
    fn contains_class_consistent_with_extraction() {
        let (tok, vocab) = builtin_vocabulary();
        let kiwi = vocab.class_by_name("kiwi").unwrap();
        let baseball = vocab.class_by_name("baseball").unwrap();
        let output = tok.tokenize("kiwis and a baseball glove").unwrap();
        assert!(contains_class(&output, kiwi, &vocab).unwrap());
        // `baseball glove` must not register as `baseball`.
        assert!(!contains_class(&output, baseball, &vocab).unwrap());
        assert!(!contains_class(&[], kiwi, &vocab).unwrap());
    }

    #[test]
    fn unknown_class_rejected() {
        let (_, vocab) = builtin_vocabulary();
        assert!(contains_class(&[], ClassId(9999), &vocab).is_err());
    }

    #[test]
    fn render_then_extract_roundtrip() {
        let (tok, vocab) = builtin_vocabulary();
        let caption = "a cat and a baseball glove and a kiwi";
        let output = tok.tokenize(caption).unwrap();
        let mentions = extract_object_mentions(&output, &vocab);
        assert_eq!(mentions.len(), 3);
        // Duplicates stay distinct.
        let output = tok.tokenize("a cat and a cat").unwrap();
        assert_eq!(extract_object_mentions(&output, &vocab).len(), 2);
    }
}
