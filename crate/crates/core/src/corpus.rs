//! Behavior corpora: (question, positive answer, negative answer) triples
//! over the toy vocabulary, a seeded grammar that synthesizes them, and
//! JSONL persistence.
//!
//! Grammar structure: questions are random draws from a neutral token pool
//! terminated by the SPACE separator; answers walk a cyclic successor
//! pattern inside one behavior lexicon and end with EOS. The cyclic pattern
//! gives the trained model confident mid-answer predictions, which the
//! token-distribution analyses rely on.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::toymodel::{BOS_TOKEN, EOS_TOKEN, RESERVED_TOKENS, SPACE_TOKEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub question: Vec<u32>,
    pub pos: Vec<u32>,
    pub neg: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorCorpus {
    pub behavior_name: String,
    pub items: Vec<CorpusItem>,
}

impl BehaviorCorpus {
    pub fn validate(&self, max_seq: usize) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Input("behavior corpus has no items".to_string()));
        }
        for (i, item) in self.items.iter().enumerate() {
            if item.pos.is_empty() || item.neg.is_empty() {
                return Err(Error::Input(format!("item {i} has an empty answer")));
            }
            let longest = item.pos.len().max(item.neg.len());
            // +1 for the BOS prepended at model input.
            if 1 + item.question.len() + longest > max_seq {
                return Err(Error::Input(format!(
                    "item {i} exceeds max_seq {max_seq} when question and answer are concatenated"
                )));
            }
        }
        Ok(())
    }

    /// Flat training sequences: `[BOS] question pos` and `[BOS] question neg`
    /// for every item.
    pub fn training_sequences(&self) -> Vec<Vec<u32>> {
        let mut out = Vec::with_capacity(self.items.len() * 2);
        for item in &self.items {
            for answer in [&item.pos, &item.neg] {
                let mut seq = Vec::with_capacity(1 + item.question.len() + answer.len());
                seq.push(BOS_TOKEN);
                seq.extend_from_slice(&item.question);
                seq.extend_from_slice(answer);
                out.push(seq);
            }
        }
        out
    }

    /// Sha-256 of the canonical JSONL serialization.
    pub fn content_hash(&self) -> String {
        crate::pipeline::sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(item).expect("corpus items serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path, behavior_name: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut items = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: CorpusItem = serde_json::from_str(line).map_err(|e| {
                Error::Format(format!(
                    "{}:{}: not a corpus triple: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            items.push(item);
        }
        Ok(BehaviorCorpus {
            behavior_name: behavior_name.to_string(),
            items,
        })
    }
}

/// Plain token-sequence corpus: JSONL with one token-id array per line.
pub fn save_sequences_jsonl(sequences: &[Vec<u32>], path: &Path) -> Result<()> {
    let mut out = String::new();
    for seq in sequences {
        out.push_str(&serde_json::to_string(seq).expect("token arrays serialize"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Character-level demo mapping: space -> SPACE, 'a'..'z' -> 8..34,
/// '0'..'9' -> 40..50.
pub fn chars_to_tokens(text: &str) -> Result<Vec<u32>> {
    text.chars()
        .map(|c| match c {
            ' ' => Ok(SPACE_TOKEN),
            'a'..='z' => Ok(8 + (c as u32 - 'a' as u32)),
            '0'..='9' => Ok(40 + (c as u32 - '0' as u32)),
            other => Err(Error::Input(format!(
                "character '{other}' has no token mapping (use a-z, 0-9, space)"
            ))),
        })
        .collect()
}

/// Each line is either a token-id array or a string (character-mapped).
pub fn load_sequences_jsonl(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| {
            Error::Format(format!(
                "{}:{}: not a token array or string: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        let seq = match value {
            serde_json::Value::String(text) => chars_to_tokens(&text)?,
            other => serde_json::from_value::<Vec<u32>>(other).map_err(|e| {
                Error::Format(format!(
                    "{}:{}: not a token array: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?,
        };
        out.push(seq);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Grammar
// ---------------------------------------------------------------------------

/// Token pools, length ranges, and answer styles that synthesize a
/// two-behavior corpus.
///
/// Answers come in two verbosity styles: verbose answers walk the lexicon
/// cycle in steps of `verbose_step` and run long; terse answers use
/// `terse_step` and stop early. Any adjacent token pair reveals the style,
/// which makes answer length content-predictable — the hook the
/// reasoning-length analyses rely on. A SPACE lands after every `word_len`
/// answer tokens, so behavior identity has to be carried through space
/// positions (the prompt-conversion read site).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarSpec {
    pub behavior_name: String,
    pub n_items: usize,
    pub vocab_size: usize,
    /// Neutral question pool.
    pub question_tokens: Vec<u32>,
    /// Inclusive question length range (separator excluded).
    pub question_len: (usize, usize),
    /// Lexicon A: positive-behavior answer tokens.
    pub positive_tokens: Vec<u32>,
    /// Lexicon B: negative-behavior answer tokens.
    pub negative_tokens: Vec<u32>,
    /// Inclusive content-token length range of verbose answers.
    pub verbose_answer_len: (usize, usize),
    /// Inclusive content-token length range of terse answers.
    pub terse_answer_len: (usize, usize),
    /// Cycle stride of verbose answers.
    pub verbose_step: usize,
    /// Cycle stride of terse answers.
    pub terse_step: usize,
    /// Content tokens per word; a SPACE follows each full word (0 disables).
    pub word_len: usize,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        GrammarSpec {
            behavior_name: "lexicon-a-vs-b".to_string(),
            n_items: 64,
            vocab_size: 64,
            question_tokens: (32..56).collect(),
            question_len: (4, 7),
            positive_tokens: (8..20).collect(),
            negative_tokens: (20..32).collect(),
            verbose_answer_len: (8, 12),
            terse_answer_len: (1, 2),
            verbose_step: 1,
            terse_step: 3,
            word_len: 3,
        }
    }
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(Error::Input("n_items must be at least 1".to_string()));
        }
        if self.question_tokens.is_empty()
            || self.positive_tokens.is_empty()
            || self.negative_tokens.is_empty()
        {
            return Err(Error::Input("all token pools must be nonempty".to_string()));
        }
        let pos: BTreeSet<u32> = self.positive_tokens.iter().copied().collect();
        let neg: BTreeSet<u32> = self.negative_tokens.iter().copied().collect();
        if pos.intersection(&neg).next().is_some() {
            return Err(Error::Input(
                "positive and negative lexicons overlap".to_string(),
            ));
        }
        for pool in [
            &self.question_tokens,
            &self.positive_tokens,
            &self.negative_tokens,
        ] {
            for &t in pool {
                if (t as usize) < RESERVED_TOKENS {
                    return Err(Error::Input(format!(
                        "token id {t} is reserved (PAD/BOS/EOS/SPACE)"
                    )));
                }
                if t as usize >= self.vocab_size {
                    return Err(Error::Input(format!(
                        "token id {t} outside vocabulary of size {}",
                        self.vocab_size
                    )));
                }
            }
        }
        if self.question_len.0 > self.question_len.1
            || self.verbose_answer_len.0 > self.verbose_answer_len.1
            || self.terse_answer_len.0 > self.terse_answer_len.1
        {
            return Err(Error::Input("length ranges must be lo <= hi".to_string()));
        }
        if self.terse_answer_len.0 == 0 {
            return Err(Error::Input("answers must have at least 1 token".to_string()));
        }
        if self.verbose_step == 0 || self.terse_step == 0 {
            return Err(Error::Input("cycle steps must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// One answer: walk the lexicon cycle from `start` in strides of `step`,
/// inserting a SPACE after every `word_len` content tokens, terminated by
/// EOS.
fn patterned_answer(lexicon: &[u32], start: usize, len: usize, step: usize, word_len: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(len + len / word_len.max(1) + 1);
    for k in 0..len {
        out.push(lexicon[(start + k * step) % lexicon.len()]);
        let word_done = word_len > 0 && (k + 1) % word_len == 0;
        if word_done && k + 1 < len {
            out.push(SPACE_TOKEN);
        }
    }
    out.push(EOS_TOKEN);
    out
}

/// Style draw shared by both answer sides.
fn styled_answer(
    rng: &mut crate::rng::Rng,
    lexicon: &[u32],
    spec: &GrammarSpec,
) -> Vec<u32> {
    let verbose = rng.random_range(0..2u8) == 0;
    let (range, step) = if verbose {
        (spec.verbose_answer_len, spec.verbose_step)
    } else {
        (spec.terse_answer_len, spec.terse_step)
    };
    let len = rng.random_range(range.0..=range.1);
    let start = rng.random_range(0..lexicon.len());
    patterned_answer(lexicon, start, len, step, spec.word_len)
}

/// Deterministically synthesize a corpus and the matching behavior lexicon.
pub fn generate_behavior_corpus(
    spec: &GrammarSpec,
    seed: u64,
) -> Result<(BehaviorCorpus, crate::eval::BehaviorLexicon)> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut items = Vec::with_capacity(spec.n_items);
    for _ in 0..spec.n_items {
        let q_len = rng.random_range(spec.question_len.0..=spec.question_len.1);
        let mut question: Vec<u32> = (0..q_len)
            .map(|_| spec.question_tokens[rng.random_range(0..spec.question_tokens.len())])
            .collect();
        question.push(SPACE_TOKEN);

        let pos = styled_answer(&mut rng, &spec.positive_tokens, spec);
        let neg = styled_answer(&mut rng, &spec.negative_tokens, spec);
        items.push(CorpusItem { question, pos, neg });
    }
    let lexicon = crate::eval::BehaviorLexicon::new(
        spec.positive_tokens.iter().copied().collect(),
        spec.negative_tokens.iter().copied().collect(),
    )?;
    Ok((
        BehaviorCorpus {
            behavior_name: spec.behavior_name.clone(),
            items,
        },
        lexicon,
    ))
}

/// Evaluation prompts: fresh questions from the same grammar, as complete
/// model inputs (`[BOS] question`, separator included).
pub fn generate_eval_prompts(spec: &GrammarSpec, seed: u64, count: usize) -> Result<Vec<Vec<u32>>> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut prompts = Vec::with_capacity(count);
    for _ in 0..count {
        let q_len = rng.random_range(spec.question_len.0..=spec.question_len.1);
        let mut prompt = Vec::with_capacity(q_len + 2);
        prompt.push(BOS_TOKEN);
        for _ in 0..q_len {
            prompt.push(spec.question_tokens[rng.random_range(0..spec.question_tokens.len())]);
        }
        prompt.push(SPACE_TOKEN);
        prompts.push(prompt);
    }
    Ok(prompts)
}

/// A behavior-side demonstration prompt: a run of positive-lexicon tokens
/// (no BOS, no separator), used by prompt-to-vector conversion.
pub fn positive_demonstration(spec: &GrammarSpec, seed: u64, len: usize) -> Result<Vec<u32>> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let start = rng.random_range(0..spec.positive_tokens.len());
    let mut out = patterned_answer(
        &spec.positive_tokens,
        start,
        len,
        spec.verbose_step,
        spec.word_len,
    );
    out.pop(); // demonstration carries no EOS
    Ok(out)
}

/// The longest and shortest positive answers of a corpus, as the single
/// (long, short) contrast pair for reasoning-length steering, with the
/// question of the long item.
pub fn length_contrast_pair(corpus: &BehaviorCorpus) -> Result<(Vec<u32>, Vec<u32>, Vec<u32>)> {
    let long = corpus
        .items
        .iter()
        .max_by_key(|i| i.pos.len())
        .ok_or_else(|| Error::Input("empty corpus".to_string()))?;
    let short = corpus
        .items
        .iter()
        .min_by_key(|i| i.pos.len())
        .ok_or_else(|| Error::Input("empty corpus".to_string()))?;
    if long.pos == short.pos {
        return Err(Error::Degenerate(
            "corpus has no length contrast among positive answers".to_string(),
        ));
    }
    Ok((long.question.clone(), long.pos.clone(), short.pos.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = GrammarSpec::default();
        let (c1, l1) = generate_behavior_corpus(&spec, 5).unwrap();
        let (c2, l2) = generate_behavior_corpus(&spec, 5).unwrap();
        let (c3, _) = generate_behavior_corpus(&spec, 6).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(l1, l2);
        assert_ne!(c1, c3);
        assert_eq!(c1.to_jsonl(), c2.to_jsonl());
    }

    #[test]
    fn generated_corpus_is_well_formed() {
        let spec = GrammarSpec::default();
        let (corpus, lexicon) = generate_behavior_corpus(&spec, 1).unwrap();
        corpus.validate(64).unwrap();
        assert_eq!(corpus.items.len(), 64);
        for item in &corpus.items {
            assert_eq!(*item.question.last().unwrap(), SPACE_TOKEN);
            assert_eq!(*item.pos.last().unwrap(), EOS_TOKEN);
            assert_eq!(*item.neg.last().unwrap(), EOS_TOKEN);
            for t in &item.pos[..item.pos.len() - 1] {
                assert!(*t == SPACE_TOKEN || lexicon.positive_tokens.contains(t));
            }
            for t in &item.neg[..item.neg.len() - 1] {
                assert!(*t == SPACE_TOKEN || lexicon.negative_tokens.contains(t));
            }
        }
    }

    #[test]
    fn overlapping_lexicons_are_rejected() {
        let spec = GrammarSpec {
            positive_tokens: vec![8, 9, 10],
            negative_tokens: vec![10, 11],
            ..GrammarSpec::default()
        };
        assert!(matches!(
            generate_behavior_corpus(&spec, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn empty_corpus_request_is_rejected() {
        let spec = GrammarSpec {
            n_items: 0,
            ..GrammarSpec::default()
        };
        assert!(generate_behavior_corpus(&spec, 0).is_err());
    }

    #[test]
    fn reserved_token_in_pool_is_rejected() {
        let spec = GrammarSpec {
            question_tokens: vec![2, 33],
            ..GrammarSpec::default()
        };
        assert!(generate_behavior_corpus(&spec, 0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let (corpus, _) = generate_behavior_corpus(&GrammarSpec::default(), 2).unwrap();
        corpus.save_jsonl(&path).unwrap();
        let loaded = BehaviorCorpus::load_jsonl(&path, &corpus.behavior_name).unwrap();
        assert_eq!(corpus, loaded);

        let seqs = corpus.training_sequences();
        let seq_path = dir.path().join("train.jsonl");
        save_sequences_jsonl(&seqs, &seq_path).unwrap();
        assert_eq!(load_sequences_jsonl(&seq_path).unwrap(), seqs);
    }

    #[test]
    fn string_lines_map_characters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.jsonl");
        std::fs::write(&path, "[1,8,9]
"ab 01"
").unwrap();
        let seqs = load_sequences_jsonl(&path).unwrap();
        assert_eq!(seqs[0], vec![1, 8, 9]);
        assert_eq!(seqs[1], vec![8, 9, SPACE_TOKEN, 40, 41]);
        assert!(chars_to_tokens("?").is_err());
    }

    #[test]
    fn length_contrast_pair_spans_styles() {
        let (corpus, _) = generate_behavior_corpus(&GrammarSpec::default(), 4).unwrap();
        let (question, long, short) = length_contrast_pair(&corpus).unwrap();
        assert!(long.len() > short.len());
        assert_eq!(*question.last().unwrap(), SPACE_TOKEN);
        assert_eq!(*long.last().unwrap(), EOS_TOKEN);
        assert_eq!(*short.last().unwrap(), EOS_TOKEN);
    }

    #[test]
    fn training_sequences_have_bos_and_structure() {
        let (corpus, _) = generate_behavior_corpus(&GrammarSpec::default(), 3).unwrap();
        let seqs = corpus.training_sequences();
        assert_eq!(seqs.len(), corpus.items.len() * 2);
        for seq in &seqs {
            assert_eq!(seq[0], BOS_TOKEN);
            assert_eq!(*seq.last().unwrap(), EOS_TOKEN);
            assert!(seq.len() <= 64);
        }
    }
}
