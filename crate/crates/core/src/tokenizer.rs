//! Word-level tokenization and the encoder input layouts.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::kg::{KnowledgeGraph, TextCatalog};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Positions every sequence budget keeps free for special tokens.
pub const RESERVED_SPECIALS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from `texts`; words are added in sorted order after
    /// the four reserved specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens)
    }

    /// Vocabulary over the texts of entities and relations that occur in
    /// training triples.
    pub fn from_train(kg: &KnowledgeGraph) -> Self {
        let mut ents = BTreeSet::new();
        let mut rels = BTreeSet::new();
        for t in kg.train() {
            ents.insert(t.head);
            ents.insert(t.tail);
            rels.insert(t.rel);
        }
        let texts = kg.texts();
        Self::build(
            ents.iter()
                .map(|&e| texts.entity(e))
                .chain(rels.iter().map(|&r| texts.relation(r))),
        )
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// Lowercased words, split on whitespace and punctuation.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Token ids of `text`, truncated so that the sequence plus
/// [`RESERVED_SPECIALS`] special tokens fits in `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    let budget = max_len.saturating_sub(RESERVED_SPECIALS);
    words(text)
        .take(budget)
        .map(|w| vocab.id(&w).unwrap_or(UNK))
        .collect()
}

/// Token ids plus per-position segment ids (0 = entity, 1 = relation).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderInput {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `[CLS] h [SEP] r [SEP]`; when too long the head span is cut first.
pub fn build_context_hr(head: &[u32], rel: &[u32], max_len: usize) -> EncoderInput {
    let budget = max_len.saturating_sub(3);
    let keep_h = head.len().min(budget.saturating_sub(rel.len()));
    let keep_r = rel.len().min(budget - keep_h);
    let mut ids = Vec::with_capacity(3 + keep_h + keep_r);
    let mut segments = Vec::with_capacity(ids.capacity());
    ids.push(CLS);
    ids.extend_from_slice(&head[..keep_h]);
    ids.push(SEP);
    segments.resize(ids.len(), 0);
    ids.extend_from_slice(&rel[..keep_r]);
    ids.push(SEP);
    segments.resize(ids.len(), 1);
    EncoderInput { ids, segments }
}

/// `[CLS] t [SEP]`, all segment 0.
pub fn build_context_t(tail: &[u32], max_len: usize) -> EncoderInput {
    let keep = tail.len().min(max_len.saturating_sub(2));
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(CLS);
    ids.extend_from_slice(&tail[..keep]);
    ids.push(SEP);
    let segments = vec![0; ids.len()];
    EncoderInput { ids, segments }
}

/// `[CLS] h [SEP] r [SEP] t [SEP]` for a cross-encoder. The relation is kept
/// whole when possible and the two entity spans share what is left in
/// proportion to their lengths.
pub fn build_context_triple(
    head: &[u32],
    rel: &[u32],
    tail: &[u32],
    max_len: usize,
) -> EncoderInput {
    let budget = max_len.saturating_sub(4);
    let keep_r = rel.len().min(budget);
    let room = budget - keep_r;
    let (mut keep_h, mut keep_t) = (head.len(), tail.len());
    if keep_h + keep_t > room {
        keep_h = room * head.len() / (head.len() + tail.len());
        keep_t = (room - keep_h).min(tail.len());
        keep_h = (room - keep_t).min(head.len());
    }
    let mut ids = vec![CLS];
    ids.extend_from_slice(&head[..keep_h]);
    ids.push(SEP);
    let mut segments = vec![0u8; ids.len()];
    ids.extend_from_slice(&rel[..keep_r]);
    ids.push(SEP);
    segments.resize(ids.len(), 1);
    ids.extend_from_slice(&tail[..keep_t]);
    ids.push(SEP);
    segments.resize(ids.len(), 0);
    EncoderInput { ids, segments }
}

/// Token ids of every entity and relation text, untruncated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedTexts {
    entities: Vec<Vec<u32>>,
    relations: Vec<Vec<u32>>,
}

impl TokenizedTexts {
    pub fn new(texts: &TextCatalog, vocab: &Vocabulary) -> Self {
        let tok = |s: &String| tokenize(s, vocab, usize::MAX);
        TokenizedTexts {
            entities: texts.entities().iter().map(tok).collect(),
            relations: texts.relations().iter().map(tok).collect(),
        }
    }

    pub fn entity(&self, index: usize) -> &[u32] {
        &self.entities[index]
    }

    pub fn relation(&self, index: usize) -> &[u32] {
        &self.relations[index]
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["World War II", "a b c"])
    }

    #[test]
    fn specials_are_fixed() {
        let v = vocab();
        assert_eq!(v.id("[PAD]"), Some(PAD));
        assert_eq!(v.id("[UNK]"), Some(UNK));
        assert_eq!(v.id("[CLS]"), Some(CLS));
        assert_eq!(v.id("[SEP]"), Some(SEP));
    }

    #[test]
    fn tokenize_cases() {
        let v = vocab();
        assert!(tokenize("", &v, 64).is_empty());
        let ids = tokenize("World War II", &v, 64);
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| i != UNK));
        assert_eq!(tokenize("zebra", &v, 64), vec![UNK]);
        let long = vec!["a"; 500].join(" ");
        assert_eq!(tokenize(&long, &v, 64).len(), 61);
    }

    #[test]
    fn punctuation_splits_words() {
        let w: Vec<String> = words("acquired_abnormality, Part-of").collect();
        assert_eq!(w, vec!["acquired", "abnormality", "part", "of"]);
    }

    #[test]
    fn hr_layout_and_segments() {
        let inp = build_context_hr(&[10, 11], &[12], 32);
        assert_eq!(inp.ids, vec![CLS, 10, 11, SEP, 12, SEP]);
        assert_eq!(inp.segments, vec![0, 0, 0, 0, 1, 1]);
        let empty_rel = build_context_hr(&[10, 11], &[], 32);
        assert_eq!(empty_rel.ids, vec![CLS, 10, 11, SEP, SEP]);
    }

    #[test]
    fn hr_truncates_entity_first() {
        let head: Vec<u32> = (100..120).collect();
        let inp = build_context_hr(&head, &[7, 8], 10);
        assert_eq!(inp.len(), 10);
        // 10 - 3 specials - 2 relation tokens = 5 head tokens
        assert_eq!(&inp.ids[1..6], &[100, 101, 102, 103, 104]);
        assert_eq!(&inp.ids[6..], &[SEP, 7, 8, SEP]);
    }

    #[test]
    fn t_layout_and_truncation() {
        assert_eq!(build_context_t(&[5], 8).ids, vec![CLS, 5, SEP]);
        assert_eq!(build_context_t(&[], 8).ids, vec![CLS, SEP]);
        let tail: Vec<u32> = (100..150).collect();
        let inp = build_context_t(&tail, 16);
        assert_eq!(inp.len(), 16);
        assert!(inp.segments.iter().all(|&s| s == 0));
    }

    #[test]
    fn triple_layout_truncates_entities_proportionally() {
        let inp = build_context_triple(&[1, 2], &[3], &[4], 32);
        assert_eq!(inp.ids, vec![CLS, 1, 2, SEP, 3, SEP, 4, SEP]);
        assert_eq!(inp.segments, vec![0, 0, 0, 0, 1, 1, 0, 0]);
        let h: Vec<u32> = (100..130).collect();
        let t: Vec<u32> = (200..210).collect();
        let inp = build_context_triple(&h, &[3], &t, 24);
        assert_eq!(inp.len(), 24);
        let heads = inp.ids.iter().filter(|&&i| (100..130).contains(&i)).count();
        let tails = inp.ids.iter().filter(|&&i| (200..210).contains(&i)).count();
        assert_eq!(heads + tails, 19);
        assert!(heads > tails);
    }
}
