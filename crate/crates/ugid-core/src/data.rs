//! Synthetic few-shot intervention corpus.
//!
//! A closed ~50-word vocabulary over templated sentences. Ten occupations
//! carry a stereotyped pronoun in the pretraining corpus (80%+ co-occurrence)
//! and form the counterfactual target pairs; six definitional anchor pairs
//! (king/queen, ...) always carry their semantically correct pronoun. Four
//! further occupations are pretrained with stereotypes but held out of the
//! intervention set, and two extra sentence frames provide out-of-distribution
//! paraphrases for evaluation.
//!
//! Word-level tokenization keeps every pronoun a single token, so the
//! sensitive position of a pair is always exactly one index.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use thiserror::Error;

use crate::rng::Rng;
use crate::stability_loss::{PronounPair, SensitiveMask};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("word not in vocabulary: {0}")]
    OutOfVocabulary(String),
    #[error("duplicate word in vocabulary: {0}")]
    DuplicateWord(String),
    #[error("token id {0} out of vocabulary range")]
    IdOutOfRange(TokenId),
    #[error("corpus document invalid: {0}")]
    InvalidDoc(String),
}

/// Closed word list with a bijective word ↔ id mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self, DataError> {
        let mut index = HashMap::with_capacity(words.len());
        for (id, w) in words.iter().enumerate() {
            if index.insert(w.clone(), id).is_some() {
                return Err(DataError::DuplicateWord(w.clone()));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<TokenId, DataError> {
        self.index.get(word).copied().ok_or_else(|| DataError::OutOfVocabulary(word.into()))
    }

    pub fn word(&self, id: TokenId) -> Result<&str, DataError> {
        self.words.get(id).map(String::as_str).ok_or(DataError::IdOutOfRange(id))
    }

    /// Whitespace word-level tokenization. The empty string tokenizes to an
    /// empty sequence.
    pub fn tokenize(&self, sentence: &str) -> Result<Vec<TokenId>, DataError> {
        sentence.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, DataError> {
        let words: Result<Vec<&str>, DataError> = ids.iter().map(|&id| self.word(id)).collect();
        Ok(words?.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Target,
    Anchor,
}

/// Token sequences differing only at sensitive positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterfactualPair {
    pub x: Vec<TokenId>,
    pub xp: Vec<TokenId>,
    /// Index of the pronoun inside `x` (same index in `xp`).
    pub pronoun_pos: usize,
    pub sensitive_positions: BTreeSet<usize>,
    pub kind: PairKind,
    /// For anchors: the definitionally correct pronoun of the `x` side.
    pub gold_pronoun: Option<TokenId>,
}

impl CounterfactualPair {
    /// Exchange the two sides. The pronoun index is recomputed for the new
    /// `x` (templates align, so it lands on the same position) and the gold
    /// pronoun follows the new `x` side.
    pub fn swapped(&self) -> Self {
        CounterfactualPair {
            x: self.xp.clone(),
            xp: self.x.clone(),
            pronoun_pos: self.pronoun_pos,
            sensitive_positions: self.sensitive_positions.clone(),
            kind: self.kind,
            gold_pronoun: self.gold_pronoun.map(|_| self.xp[self.pronoun_pos]),
        }
    }

    pub fn sensitive_mask(&self) -> SensitiveMask {
        SensitiveMask::from_positions(self.x.len(), self.sensitive_positions.iter().copied())
    }

    /// Reference position for the saliency weights: the last sensitive
    /// position, whose attention row spans every position the pair differs
    /// at.
    pub fn saliency_pos(&self) -> usize {
        self.sensitive_positions.iter().next_back().copied().unwrap_or(self.pronoun_pos)
    }
}

/// One occupation with its corpus-level stereotype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occupation {
    pub word: String,
    pub token: TokenId,
    pub stereotyped_male: bool,
    /// In the intervention (target-pair) set, or held out for OOD eval.
    pub in_intervention: bool,
}

/// Prompt that elicits a pronoun with a definitionally correct answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorPrompt {
    pub prompt: Vec<TokenId>,
    pub gold: TokenId,
    pub foil: TokenId,
    pub sentence: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub pronouns: PronounPair,
    pub occupations: Vec<Occupation>,
    pub target_pairs: Vec<CounterfactualPair>,
    pub anchor_pairs: Vec<CounterfactualPair>,
    pub pretrain: Vec<Vec<TokenId>>,
    pub heldout: Vec<Vec<TokenId>>,
    pub id_templates: Vec<Vec<TokenId>>,
    pub ood_templates: Vec<Vec<TokenId>>,
    pub anchor_prompts: Vec<AnchorPrompt>,
}

const TRAIN_OCCUPATIONS: [(&str, bool); 10] = [
    ("doctor", true),
    ("nurse", false),
    ("engineer", true),
    ("teacher", false),
    ("lawyer", true),
    ("secretary", false),
    ("pilot", true),
    ("librarian", false),
    ("mechanic", true),
    ("florist", false),
];

const HELD_OUT_OCCUPATIONS: [(&str, bool); 4] =
    [("farmer", true), ("scientist", true), ("dancer", false), ("singer", false)];

const ANCHOR_PAIRS: [(&str, &str, &str); 6] = [
    ("king", "queen", "rule"),
    ("father", "mother", "work"),
    ("brother", "sister", "rest"),
    ("uncle", "aunt", "speak"),
    ("waiter", "waitress", "serve"),
    ("actor", "actress", "act"),
];

const ADJECTIVES: [&str; 4] = ["tired", "busy", "happy", "late"];

fn word_list() -> Vec<String> {
    let mut words: Vec<&str> = vec![
        "<pad>", ".", "the", "said", "that", "was", "would", "why", "because", "explained",
        "smiled", "yesterday", "tired", "busy", "happy", "late", "ready", "he", "she", "rule",
        "work", "rest", "speak", "serve", "act",
    ];
    words.extend(TRAIN_OCCUPATIONS.iter().map(|(w, _)| *w));
    words.extend(HELD_OUT_OCCUPATIONS.iter().map(|(w, _)| *w));
    for (m, f, _) in ANCHOR_PAIRS {
        words.push(m);
        words.push(f);
    }
    words.into_iter().map(String::from).collect()
}

/// Sentence frames. The pronoun slot index is fixed per frame.
fn frame_a(occ: &str, pron: &str, adj: &str) -> String {
    format!("the {occ} said that {pron} was {adj} .")
}

fn frame_b(occ: &str, pron: &str, adj: &str) -> String {
    format!("the {occ} explained why {pron} was {adj} .")
}

fn frame_c(occ: &str, pron: &str, adj: &str) -> String {
    format!("yesterday the {occ} smiled because {pron} was {adj} .")
}

fn anchor_frame(noun: &str, pron: &str, verb: &str) -> String {
    format!("the {noun} said that {pron} would {verb} .")
}

/// `(render, pronoun slot, prompt render)` for each frame.
type Frame = (fn(&str, &str, &str) -> String, usize, fn(&str) -> String);

const FRAMES: [Frame; 3] = [
    (frame_a, 4, |occ| format!("the {occ} said that")),
    (frame_b, 4, |occ| format!("the {occ} explained why")),
    (frame_c, 5, |occ| format!("yesterday the {occ} smiled because")),
];

/// Frame used for each intervention occupation's target pair: mostly the
/// base frame, with both paraphrase frames represented so the intervention
/// is not tied to a single syntax.
fn training_frame(occupation_index: usize) -> usize {
    match occupation_index {
        6 | 7 => 1,
        8 | 9 => 2,
        _ => 0,
    }
}

const ANCHOR_PRONOUN: usize = 4;

/// Build the full corpus: target pairs, anchors, a stereotypically skewed
/// pretraining set, a pronoun-balanced held-out set, and the ID/OOD
/// evaluation templates. Deterministic in the seed.
pub fn build_corpus(seed: u64) -> Corpus {
    let vocab = Vocabulary::new(word_list()).expect("static word list has no duplicates");
    let tok = |s: &str| vocab.tokenize(s).expect("corpus words are all in the vocabulary");
    let pronouns =
        PronounPair { male: vocab.id("he").unwrap(), female: vocab.id("she").unwrap() };

    let mut occupations = Vec::new();
    for (word, male) in TRAIN_OCCUPATIONS {
        occupations.push(Occupation {
            word: word.into(),
            token: vocab.id(word).unwrap(),
            stereotyped_male: male,
            in_intervention: true,
        });
    }
    for (word, male) in HELD_OUT_OCCUPATIONS {
        occupations.push(Occupation {
            word: word.into(),
            token: vocab.id(word).unwrap(),
            stereotyped_male: male,
            in_intervention: false,
        });
    }

    // Pretraining corpus: per occupation, 13 stereotyped vs 3 counter
    // sentences across the three frames (skew 13/16 ≥ 0.8).
    let mut pretrain: Vec<Vec<TokenId>> = Vec::new();
    for occ in &occupations {
        let (stereo, counter) =
            if occ.stereotyped_male { ("he", "she") } else { ("she", "he") };
        let mut adj_index = 0usize;
        let mut sentences = Vec::new();
        for (frame, count) in [(0usize, 8usize), (1, 4), (2, 4)] {
            for i in 0..count {
                // One counter-stereotyped sentence per frame block.
                let pron = if i == count - 1 { counter } else { stereo };
                let render = FRAMES[frame].0;
                sentences.push(render(&occ.word, pron, ADJECTIVES[adj_index % 4]));
                adj_index += 1;
            }
        }
        pretrain.extend(sentences.iter().map(|s| tok(s)));
    }
    // Anchors always carry the definitional pronoun; "ready" gets its
    // exposure here so the held-out set contains no unseen word.
    for (m, f, verb) in ANCHOR_PAIRS {
        for (noun, pron) in [(m, "he"), (f, "she")] {
            pretrain.push(tok(&anchor_frame(noun, pron, verb)));
            pretrain.push(tok(&anchor_frame(noun, pron, verb)));
            pretrain.push(tok(&format!("the {noun} explained why {pron} would {verb} .")));
            pretrain.push(tok(&format!("the {noun} said that {pron} was ready .")));
        }
    }
    let mut order = Rng::new(seed).fork("corpus-order");
    // Fisher-Yates so the pretraining stream is not grouped by occupation.
    for i in (1..pretrain.len()).rev() {
        let j = order.index(i + 1);
        pretrain.swap(i, j);
    }

    // Held-out, pronoun-balanced: unseen (occupation, "ready") combinations.
    let mut heldout = Vec::new();
    for occ in &occupations {
        heldout.push(tok(&frame_a(&occ.word, "he", "ready")));
        heldout.push(tok(&frame_a(&occ.word, "she", "ready")));
    }

    // Counterfactual target pairs over the intervention occupations, each
    // rendered in its training frame.
    let target_pairs: Vec<CounterfactualPair> = occupations
        .iter()
        .filter(|o| o.in_intervention)
        .enumerate()
        .map(|(i, occ)| {
            let (render, pronoun_pos, _) = FRAMES[training_frame(i)];
            CounterfactualPair {
                x: tok(&render(&occ.word, "he", "tired")),
                xp: tok(&render(&occ.word, "she", "tired")),
                pronoun_pos,
                sensitive_positions: [pronoun_pos].into(),
                kind: PairKind::Target,
                gold_pronoun: None,
            }
        })
        .collect();

    // Definitional anchor pairs: noun and pronoun both flip.
    let anchor_pairs: Vec<CounterfactualPair> = ANCHOR_PAIRS
        .iter()
        .map(|(m, f, verb)| CounterfactualPair {
            x: tok(&anchor_frame(m, "he", verb)),
            xp: tok(&anchor_frame(f, "she", verb)),
            pronoun_pos: ANCHOR_PRONOUN,
            sensitive_positions: [1, ANCHOR_PRONOUN].into(),
            kind: PairKind::Anchor,
            gold_pronoun: Some(pronouns.male),
        })
        .collect();

    // ID templates: each training pair's frame cut right before the
    // pronoun slot.
    let intervention: Vec<&Occupation> =
        occupations.iter().filter(|o| o.in_intervention).collect();
    let id_templates: Vec<Vec<TokenId>> = intervention
        .iter()
        .enumerate()
        .map(|(i, occ)| tok(&FRAMES[training_frame(i)].2(&occ.word)))
        .collect();

    // OOD templates: each intervention occupation in a frame it was not
    // trained in, plus the base frame over held-out occupations.
    let mut ood_templates = Vec::new();
    for (i, occ) in intervention.iter().enumerate() {
        let other = (training_frame(i) + 1 + i % 2) % FRAMES.len();
        ood_templates.push(tok(&FRAMES[other].2(&occ.word)));
    }
    for occ in occupations.iter().filter(|o| !o.in_intervention) {
        ood_templates.push(tok(&FRAMES[0].2(&occ.word)));
    }

    let anchor_prompts: Vec<AnchorPrompt> = ANCHOR_PAIRS
        .iter()
        .flat_map(|(m, f, verb)| {
            let mk = |noun: &str, pron: &str| AnchorPrompt {
                prompt: tok(&format!("the {noun} said that")),
                gold: vocab.id(if pron == "he" { "he" } else { "she" }).unwrap(),
                foil: vocab.id(if pron == "he" { "she" } else { "he" }).unwrap(),
                sentence: tok(&anchor_frame(noun, pron, verb)),
            };
            [mk(m, "he"), mk(f, "she")]
        })
        .collect();

    Corpus {
        vocab,
        pronouns,
        occupations,
        target_pairs,
        anchor_pairs,
        pretrain,
        heldout,
        id_templates,
        ood_templates,
        anchor_prompts,
    }
}

impl Corpus {
    /// Empirical `P(stereotyped pronoun | occupation)` over the pretraining
    /// corpus, by counting.
    pub fn stereotype_skew(&self) -> Vec<(String, f64)> {
        let he = self.pronouns.male;
        let she = self.pronouns.female;
        self.occupations
            .iter()
            .map(|occ| {
                let mut with_stereo = 0usize;
                let mut total = 0usize;
                for s in &self.pretrain {
                    if !s.contains(&occ.token) {
                        continue;
                    }
                    let pron = if occ.stereotyped_male { he } else { she };
                    let other = if occ.stereotyped_male { she } else { he };
                    if s.contains(&pron) {
                        with_stereo += 1;
                        total += 1;
                    } else if s.contains(&other) {
                        total += 1;
                    }
                }
                (occ.word.clone(), with_stereo as f64 / total.max(1) as f64)
            })
            .collect()
    }

    pub fn max_sequence_len(&self) -> usize {
        self.pretrain
            .iter()
            .chain(&self.heldout)
            .map(Vec::len)
            .chain(self.target_pairs.iter().map(|p| p.x.len()))
            .chain(self.anchor_pairs.iter().map(|p| p.x.len()))
            .max()
            .unwrap_or(0)
    }

    pub fn to_doc(&self) -> CorpusDoc {
        let detok = |ids: &[TokenId]| self.vocab.detokenize(ids).expect("corpus ids are valid");
        let pair_doc = |p: &CounterfactualPair| PairDoc {
            text_x: detok(&p.x),
            text_xp: detok(&p.xp),
            ids_x: p.x.clone(),
            ids_xp: p.xp.clone(),
            pronoun_pos: p.pronoun_pos,
            sensitive_positions: p.sensitive_positions.iter().copied().collect(),
            kind: p.kind,
            gold_pronoun: p.gold_pronoun.map(|id| self.vocab.word(id).unwrap().to_string()),
        };
        CorpusDoc {
            words: self.vocab.words().to_vec(),
            pronouns: ["he".into(), "she".into()],
            occupations: self.occupations.clone(),
            target_pairs: self.target_pairs.iter().map(pair_doc).collect(),
            anchor_pairs: self.anchor_pairs.iter().map(pair_doc).collect(),
            pretrain: self.pretrain.iter().map(|s| detok(s)).collect(),
            heldout: self.heldout.iter().map(|s| detok(s)).collect(),
            id_templates: self.id_templates.iter().map(|s| detok(s)).collect(),
            ood_templates: self.ood_templates.iter().map(|s| detok(s)).collect(),
        }
    }
}

/// Serialized corpus: raw text plus ids for every pair, inspectable and
/// sufficient to reproduce a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusDoc {
    pub words: Vec<String>,
    pub pronouns: [String; 2],
    pub occupations: Vec<Occupation>,
    pub target_pairs: Vec<PairDoc>,
    pub anchor_pairs: Vec<PairDoc>,
    pub pretrain: Vec<String>,
    pub heldout: Vec<String>,
    pub id_templates: Vec<String>,
    pub ood_templates: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairDoc {
    pub text_x: String,
    pub text_xp: String,
    pub ids_x: Vec<TokenId>,
    pub ids_xp: Vec<TokenId>,
    pub pronoun_pos: usize,
    pub sensitive_positions: Vec<usize>,
    pub kind: PairKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_pronoun: Option<String>,
}

impl CorpusDoc {
    /// Rebuild a usable corpus, validating that every ids list matches its
    /// text under the document's own vocabulary.
    pub fn to_corpus(&self) -> Result<Corpus, DataError> {
        let vocab = Vocabulary::new(self.words.clone())?;
        let pronouns = PronounPair {
            male: vocab.id(&self.pronouns[0])?,
            female: vocab.id(&self.pronouns[1])?,
        };
        let pair = |d: &PairDoc| -> Result<CounterfactualPair, DataError> {
            let x = vocab.tokenize(&d.text_x)?;
            let xp = vocab.tokenize(&d.text_xp)?;
            if x != d.ids_x || xp != d.ids_xp {
                return Err(DataError::InvalidDoc(format!(
                    "ids do not match text for pair `{}`",
                    d.text_x
                )));
            }
            if x.len() != xp.len() {
                return Err(DataError::InvalidDoc(format!(
                    "pair sides differ in length: `{}`",
                    d.text_x
                )));
            }
            let gold = match &d.gold_pronoun {
                Some(w) => Some(vocab.id(w)?),
                None => None,
            };
            Ok(CounterfactualPair {
                x,
                xp,
                pronoun_pos: d.pronoun_pos,
                sensitive_positions: d.sensitive_positions.iter().copied().collect(),
                kind: d.kind,
                gold_pronoun: gold,
            })
        };
        let target_pairs: Result<Vec<_>, _> = self.target_pairs.iter().map(pair).collect();
        let anchor_pairs: Result<Vec<_>, _> = self.anchor_pairs.iter().map(pair).collect();
        let seqs = |texts: &[String]| -> Result<Vec<Vec<TokenId>>, DataError> {
            texts.iter().map(|t| vocab.tokenize(t)).collect()
        };
        let anchor_pairs = anchor_pairs?;
        let he = pronouns.male;
        let she = pronouns.female;
        let anchor_prompts: Vec<AnchorPrompt> = anchor_pairs
            .iter()
            .flat_map(|p| {
                let mk = |side: &Vec<TokenId>, gold: TokenId, foil: TokenId| AnchorPrompt {
                    prompt: side[..p.pronoun_pos].to_vec(),
                    gold,
                    foil,
                    sentence: side.clone(),
                };
                [mk(&p.x, he, she), mk(&p.xp, she, he)]
            })
            .collect();
        let id_templates = seqs(&self.id_templates)?;
        let pretrain = seqs(&self.pretrain)?;
        let heldout = seqs(&self.heldout)?;
        let ood_templates = seqs(&self.ood_templates)?;
        Ok(Corpus {
            vocab,
            pronouns,
            occupations: self.occupations.clone(),
            target_pairs: target_pairs?,
            anchor_pairs,
            pretrain,
            heldout,
            id_templates,
            ood_templates,
            anchor_prompts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_round_trips_every_corpus_sentence() {
        let corpus = build_corpus(1);
        for s in corpus.pretrain.iter().chain(&corpus.heldout) {
            let text = corpus.vocab.detokenize(s).unwrap();
            assert_eq!(corpus.vocab.tokenize(&text).unwrap(), *s);
        }
        assert!(corpus.vocab.tokenize("").unwrap().is_empty());
    }

    #[test]
    fn tokenize_names_the_unknown_word() {
        let corpus = build_corpus(1);
        let err = corpus.vocab.tokenize("the astronaut said").unwrap_err();
        assert_eq!(err.to_string(), "word not in vocabulary: astronaut");
    }

    #[test]
    fn frozen_prefix_ids_are_stable() {
        // The emitted vocabulary pins "the doctor" to fixed ids.
        let corpus = build_corpus(7);
        let ids = corpus.vocab.tokenize("the doctor").unwrap();
        assert_eq!(ids, vec![corpus.vocab.id("the").unwrap(), corpus.vocab.id("doctor").unwrap()]);
    }

    #[test]
    fn corpus_counts_match_design() {
        let corpus = build_corpus(3);
        assert_eq!(corpus.target_pairs.len(), 10);
        assert_eq!(corpus.anchor_pairs.len(), 6);
        assert_eq!(corpus.id_templates.len(), 10);
        assert_eq!(corpus.ood_templates.len(), 14);
        assert_eq!(corpus.anchor_prompts.len(), 12);
        assert!(corpus.vocab.len() <= 64);
        assert!(corpus.max_sequence_len() <= 16);
    }

    #[test]
    fn pairs_differ_exactly_at_sensitive_positions() {
        let corpus = build_corpus(3);
        for p in corpus.target_pairs.iter().chain(&corpus.anchor_pairs) {
            assert_eq!(p.x.len(), p.xp.len());
            for (i, (a, b)) in p.x.iter().zip(&p.xp).enumerate() {
                let differs = a != b;
                assert_eq!(
                    differs,
                    p.sensitive_positions.contains(&i),
                    "mismatch at {i} for {:?}",
                    corpus.vocab.detokenize(&p.x)
                );
            }
            assert!(p.sensitive_positions.contains(&p.pronoun_pos));
            let mask = p.sensitive_mask();
            assert!(mask.is_sensitive(p.pronoun_pos));
        }
    }

    #[test]
    fn anchor_gold_pronouns_are_definitional() {
        let corpus = build_corpus(3);
        for p in &corpus.anchor_pairs {
            assert_eq!(p.gold_pronoun, Some(corpus.pronouns.male));
            assert_eq!(p.x[p.pronoun_pos], corpus.pronouns.male);
            assert_eq!(p.xp[p.pronoun_pos], corpus.pronouns.female);
        }
    }

    #[test]
    fn swap_is_an_involution_and_updates_gold() {
        let corpus = build_corpus(3);
        for p in corpus.target_pairs.iter().chain(&corpus.anchor_pairs) {
            let twice = p.swapped().swapped();
            assert_eq!(&twice, p);
        }
        let anchor = &corpus.anchor_pairs[0];
        let swapped = anchor.swapped();
        assert_eq!(swapped.gold_pronoun, Some(corpus.pronouns.female));
    }

    #[test]
    fn pretrain_skew_is_at_least_eighty_percent() {
        let corpus = build_corpus(3);
        for (word, skew) in corpus.stereotype_skew() {
            assert!(skew >= 0.8, "occupation {word} skew {skew}");
        }
    }

    #[test]
    fn every_token_is_inside_the_vocabulary() {
        let corpus = build_corpus(5);
        let limit = corpus.vocab.len();
        for s in corpus
            .pretrain
            .iter()
            .chain(&corpus.heldout)
            .chain(&corpus.id_templates)
            .chain(&corpus.ood_templates)
        {
            assert!(s.iter().all(|&t| t < limit));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(build_corpus(9), build_corpus(9));
        assert_ne!(build_corpus(9).pretrain, build_corpus(10).pretrain);
    }

    #[test]
    fn doc_round_trip_preserves_the_corpus() {
        let corpus = build_corpus(4);
        let doc = corpus.to_doc();
        let json = serde_json::to_string(&doc).unwrap();
        let parsed: CorpusDoc = serde_json::from_str(&json).unwrap();
        let rebuilt = parsed.to_corpus().unwrap();
        assert_eq!(corpus, rebuilt);
    }

    #[test]
    fn target_pairs_cover_all_three_frames() {
        let corpus = build_corpus(4);
        let lens: std::collections::BTreeSet<usize> =
            corpus.target_pairs.iter().map(|p| p.x.len()).collect();
        // Frames A and B are 8 tokens, frame C is 9.
        assert_eq!(lens, [8, 9].into());
        let positions: std::collections::BTreeSet<usize> =
            corpus.target_pairs.iter().map(|p| p.pronoun_pos).collect();
        assert_eq!(positions, [4, 5].into());
        for p in &corpus.target_pairs {
            assert_eq!(p.sensitive_positions.len(), 1);
            assert_eq!(p.saliency_pos(), p.pronoun_pos);
        }
    }
}
