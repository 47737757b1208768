//! Data model, JSONL I/O and the synthetic planted-evidence corpus generator.
//!
//! The dataset format is one JSON record per line with fields
//! `id`/`passage`/`question`/`options`/`label`, where `label` is the integer
//! index of the gold option.
//!
//! The synthetic generator plants, mid-passage, exactly one evidence clause
//! whose words uniquely determine the gold option: the clause carries the
//! question's words plus the gold option's two words, while each distractor
//! option shares one surface word with a non-evidence sentence. Passage-level
//! models therefore see support for every option, and only evidence-level
//! reading isolates the gold one.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mix_seed;
use crate::segmentation::StopwordPolicy;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: invalid example: {message}")]
    InvalidExample { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("vocab too small to build {needed} distinct options (filler words available: {available})")]
    VocabTooSmall { needed: usize, available: usize },
}

/// One passage/question/options/gold-label record; the unit of all pipelines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrcExample {
    pub id: String,
    pub passage: String,
    pub question: String,
    pub options: Vec<String>,
    #[serde(rename = "label")]
    pub gold_index: usize,
}

impl MrcExample {
    /// Number of options (U).
    pub fn num_options(&self) -> usize {
        self.options.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.passage.trim().is_empty() {
            return Err("passage is empty".into());
        }
        if self.options.len() < 2 {
            return Err(format!("need at least 2 options, got {}", self.options.len()));
        }
        if self.options.iter().any(|o| o.trim().is_empty()) {
            return Err("options contain an empty string".into());
        }
        if self.gold_index >= self.options.len() {
            return Err(format!(
                "gold_index out of range: label {} with {} options",
                self.gold_index,
                self.options.len()
            ));
        }
        Ok(())
    }
}

/// Load a JSONL dataset, validating every record and rejecting duplicate ids.
pub fn load_jsonl(path: &Path) -> Result<Vec<MrcExample>, CorpusError> {
    let file = File::open(path)?;
    read_jsonl(BufReader::new(file))
}

/// Reader-based variant of [`load_jsonl`].
pub fn read_jsonl<R: Read>(reader: BufReader<R>) -> Result<Vec<MrcExample>, CorpusError> {
    let mut examples = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let example: MrcExample = serde_json::from_str(&line)
            .map_err(|e| CorpusError::MalformedLine { line: line_no, message: e.to_string() })?;
        example
            .validate()
            .map_err(|message| CorpusError::InvalidExample { line: line_no, message })?;
        if !seen.insert(example.id.clone()) {
            return Err(CorpusError::DuplicateId { line: line_no, id: example.id });
        }
        examples.push(example);
    }
    Ok(examples)
}

/// Write a dataset as JSONL: one record per line, UTF-8, no trailing
/// whitespace.
pub fn write_jsonl(path: &Path, examples: &[MrcExample]) -> Result<(), CorpusError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(|e| CorpusError::MalformedLine {
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters of the synthetic planted-evidence corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_examples: usize,
    pub vocab_size: usize,
    pub passage_sentences: usize,
    pub options_per_question: usize,
    pub evidence_words: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_examples: 2500,
            vocab_size: 160,
            passage_sentences: 5,
            options_per_question: 3,
            evidence_words: 3,
            noise_level: 0.1,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.num_examples < 1 {
            return Err(CorpusError::InvalidSpec("num_examples must be >= 1".into()));
        }
        if self.vocab_size < 1 {
            return Err(CorpusError::InvalidSpec("vocab_size must be >= 1".into()));
        }
        if self.passage_sentences < 3 {
            return Err(CorpusError::InvalidSpec(
                "passage_sentences must be >= 3 so evidence is never first or last".into(),
            ));
        }
        if self.options_per_question < 2 {
            return Err(CorpusError::InvalidSpec("options_per_question must be >= 2".into()));
        }
        if self.evidence_words < 1 {
            return Err(CorpusError::InvalidSpec("evidence_words must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(CorpusError::InvalidSpec("noise_level must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Word pools shared by every corpus with the same `vocab_size`, so corpora
/// generated from different seeds keep a common evidence mechanism while
/// mixing different filler vocabulary. That is what makes seed-to-seed
/// transfer evaluation meaningful.
#[derive(Debug, Clone)]
pub struct WordPools {
    pub concepts: Vec<String>,
    pub query: Vec<String>,
    pub fillers: Vec<String>,
}

const SYLLABLE_ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "ch", "dr", "gr",
    "kl", "pl", "st", "tr",
];
const SYLLABLE_VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou"];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(SYLLABLE_ONSETS[rng.gen_range(0..SYLLABLE_ONSETS.len())]);
        w.push_str(SYLLABLE_VOWELS[rng.gen_range(0..SYLLABLE_VOWELS.len())]);
    }
    w
}

/// Build the word pools for a vocabulary size. Depends only on `vocab_size`.
pub fn word_pools(vocab_size: usize, options_per_question: usize, evidence_words: usize) -> Result<WordPools, CorpusError> {
    let u = options_per_question;
    let policy = StopwordPolicy::default_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(vocab_size as u64, "word-pools"));
    let mut seen = BTreeSet::new();
    let mut vocab = Vec::with_capacity(vocab_size);
    while vocab.len() < vocab_size {
        let w = pseudo_word(&mut rng);
        // Segmenter-neutral vocabulary: no generated word may collide with a
        // divider stopword or the planted connective "of".
        if w == "of" || policy.is_splitter(&w) || !seen.insert(w.clone()) {
            continue;
        }
        vocab.push(w);
    }
    let concept_count = (vocab_size / 8).clamp(u, 32).min(vocab_size);
    let query_count = (vocab_size / 6).clamp(evidence_words, 32);
    if concept_count + query_count >= vocab_size {
        return Err(CorpusError::VocabTooSmall { needed: u, available: 0 });
    }
    let fillers: Vec<String> = vocab.split_off(concept_count + query_count);
    let query: Vec<String> = vocab.split_off(concept_count);
    let concepts = vocab;
    // Each example consumes U support words plus a few sentence fillers.
    if fillers.len() < u + 6 {
        return Err(CorpusError::VocabTooSmall { needed: u, available: fillers.len() });
    }
    Ok(WordPools { concepts, query, fillers })
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn sample_distinct<'a>(rng: &mut ChaCha8Rng, pool: &'a [String], n: usize) -> Vec<&'a String> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    idx.into_iter().take(n).map(|i| &pool[i]).collect()
}

/// Generate a deterministic synthetic corpus. For a fixed spec the output is
/// byte-identical across calls.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<MrcExample>, CorpusError> {
    spec.validate()?;
    let u = spec.options_per_question;
    let pools = word_pools(spec.vocab_size, u, spec.evidence_words)?;
    if pools.concepts.len() < u {
        return Err(CorpusError::VocabTooSmall { needed: u, available: pools.concepts.len() });
    }
    let k = spec.evidence_words.min(pools.query.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, "synth"));
    // Per-corpus filler dialect: a subset of the filler pool, so corpora from
    // different seeds share mechanism but mix different surface vocabulary.
    let dialect_size = (pools.fillers.len() * 3 / 4).max(u + 6);
    let dialect: Vec<String> =
        sample_distinct(&mut rng, &pools.fillers, dialect_size).into_iter().cloned().collect();

    let mut examples = Vec::with_capacity(spec.num_examples);
    for i in 0..spec.num_examples {
        let s = spec.passage_sentences;
        let evidence_pos = rng.gen_range(1..s - 1);
        let qwords: Vec<&String> = sample_distinct(&mut rng, &pools.query, k);
        let concepts: Vec<&String> = sample_distinct(&mut rng, &pools.concepts, u);
        let supports: Vec<&String> = sample_distinct(&mut rng, &dialect, u);
        let gold = rng.gen_range(0..u);

        let safe_filler = |rng: &mut ChaCha8Rng, supports: &[&String]| -> String {
            loop {
                let w = &dialect[rng.gen_range(0..dialect.len())];
                if !supports.contains(&w) {
                    return w.clone();
                }
            }
        };

        // Map each distractor option to a non-evidence sentence that will
        // carry its support word.
        let mut noise_positions: Vec<usize> = (0..s).filter(|&p| p != evidence_pos).collect();
        noise_positions.shuffle(&mut rng);
        let mut planted_support: Vec<Option<&String>> = vec![None; s];
        let mut pos_iter = 0usize;
        for (opt, support) in supports.iter().enumerate() {
            if opt == gold {
                continue;
            }
            let p = noise_positions[pos_iter % noise_positions.len()];
            pos_iter += 1;
            planted_support[p] = Some(support);
        }

        let mut sentences = Vec::with_capacity(s);
        for pos in 0..s {
            if pos == evidence_pos {
                let lead_len = rng.gen_range(2..=3);
                let mut lead: Vec<String> =
                    (0..lead_len).map(|_| safe_filler(&mut rng, &supports)).collect();
                lead[0] = capitalize(&lead[0]);
                let fragment: Vec<String> = qwords
                    .iter()
                    .map(|w| (*w).clone())
                    .chain(["of".to_string()])
                    .chain([concepts[gold].clone(), supports[gold].clone()])
                    .collect();
                sentences.push(format!("{}, {}.", lead.join(" "), fragment.join(" ")));
            } else {
                let len = rng.gen_range(4..=6);
                let mut body: Vec<String> =
                    (0..len).map(|_| safe_filler(&mut rng, &supports)).collect();
                if let Some(support) = planted_support[pos] {
                    let at = rng.gen_range(0..=body.len());
                    body.insert(at, support.clone());
                }
                if rng.gen_bool(spec.noise_level) {
                    // Confusable-but-not-matching noise: a query-pool word
                    // that is not part of this example's question.
                    let w = loop {
                        let w = &pools.query[rng.gen_range(0..pools.query.len())];
                        if !qwords.contains(&w) {
                            break w.clone();
                        }
                    };
                    let at = rng.gen_range(0..=body.len());
                    body.insert(at, w);
                }
                body[0] = capitalize(&body[0]);
                sentences.push(format!("{}.", body.join(" ")));
            }
        }

        let options: Vec<String> =
            (0..u).map(|o| format!("{} {}", concepts[o], supports[o])).collect();
        let question = format!("{}?", qwords.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" "));
        examples.push(MrcExample {
            id: format!("synth-{}-{:05}", spec.seed, i),
            passage: sentences.join(" "),
            question,
            options,
            gold_index: gold,
        });
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{split_sentences, words_of};
    use std::io::Cursor;

    fn read_str(s: &str) -> Result<Vec<MrcExample>, CorpusError> {
        read_jsonl(BufReader::new(Cursor::new(s.to_string())))
    }

    #[test]
    fn load_single_record() {
        let examples = read_str(
            r#"{"id":"d1","passage":"A. B.","question":"Q?","options":["x","y"],"label":1}"#,
        )
        .unwrap();
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].num_options(), 2);
        assert_eq!(examples[0].gold_index, 1);
    }

    #[test]
    fn load_empty_file() {
        assert!(read_str("").unwrap().is_empty());
    }

    #[test]
    fn load_rejects_out_of_range_label() {
        let err = read_str(
            r#"{"id":"d1","passage":"A.","question":"Q?","options":["x","y"],"label":5}"#,
        )
        .unwrap_err();
        match err {
            CorpusError::InvalidExample { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("gold_index out of range"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_rejects_missing_field_with_line_number() {
        let err = read_str(
            "{\"id\":\"a\",\"passage\":\"A.\",\"question\":\"Q?\",\"options\":[\"x\",\"y\"],\"label\":0}\n{\"id\":\"b\",\"passage\":\"A.\",\"options\":[\"x\",\"y\"],\"label\":0}",
        )
        .unwrap_err();
        match err {
            CorpusError::MalformedLine { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("question"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_rejects_duplicate_id() {
        let err = read_str(
            "{\"id\":\"a\",\"passage\":\"A.\",\"question\":\"Q?\",\"options\":[\"x\",\"y\"],\"label\":0}\n{\"id\":\"a\",\"passage\":\"B.\",\"question\":\"Q?\",\"options\":[\"x\",\"y\"],\"label\":0}",
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { line: 2, .. }));
    }

    #[test]
    fn jsonl_round_trip_is_identity() {
        let spec = SynthSpec { num_examples: 25, ..SynthSpec::default() };
        let examples = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_jsonl(&path, &examples).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(examples, loaded);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec { num_examples: 12, seed: 7, ..SynthSpec::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generation_single_example() {
        let spec = SynthSpec { num_examples: 1, ..SynthSpec::default() };
        assert_eq!(generate_synthetic(&spec).unwrap().len(), 1);
    }

    #[test]
    fn generation_rejects_zero_examples() {
        let spec = SynthSpec { num_examples: 0, ..SynthSpec::default() };
        assert!(matches!(generate_synthetic(&spec), Err(CorpusError::InvalidSpec(_))));
    }

    #[test]
    fn generation_rejects_tiny_vocab() {
        let spec = SynthSpec { vocab_size: 6, ..SynthSpec::default() };
        assert!(matches!(generate_synthetic(&spec), Err(CorpusError::VocabTooSmall { .. })));
    }

    /// Brute-force scan: the gold option's distinguishing word must appear
    /// inside the planted mid-passage fragment and in no other sentence, and
    /// every distractor must share a surface word with a non-evidence
    /// sentence.
    #[test]
    fn planted_evidence_scan() {
        let spec = SynthSpec { num_examples: 60, seed: 11, ..SynthSpec::default() };
        let examples = generate_synthetic(&spec).unwrap();
        for ex in &examples {
            let sentences = split_sentences(&ex.passage);
            let gold_words: Vec<String> =
                ex.options[ex.gold_index].split_whitespace().map(str::to_lowercase).collect();
            let concept = &gold_words[0];
            let holding: Vec<usize> = sentences
                .iter()
                .enumerate()
                .filter(|(_, s)| words_of(&ex.passage, **s).iter().any(|w| w == concept))
                .map(|(i, _)| i)
                .collect();
            assert_eq!(holding.len(), 1, "{}: concept {concept} in {holding:?}", ex.id);
            let pos = holding[0];
            assert!(pos > 0 && pos < sentences.len() - 1, "{}: evidence at edge", ex.id);
            // Inside the fragment: the evidence clause follows the comma.
            let sentence_text = sentences[pos].slice(&ex.passage).unwrap();
            let clause = sentence_text.split(',').nth(1).expect("evidence sentence has a clause");
            assert!(clause.to_lowercase().contains(concept.as_str()));
            // The gold support word is also unique to the evidence sentence.
            let support = &gold_words[1];
            let support_holding = sentences
                .iter()
                .filter(|s| words_of(&ex.passage, **s).iter().any(|w| w == support))
                .count();
            assert_eq!(support_holding, 1, "{}: support {support}", ex.id);
            // Distractors share a surface word with some non-evidence sentence.
            for (o, option) in ex.options.iter().enumerate() {
                if o == ex.gold_index {
                    continue;
                }
                let support = option.split_whitespace().nth(1).unwrap().to_lowercase();
                let found = sentences.iter().enumerate().any(|(i, s)| {
                    i != pos && words_of(&ex.passage, *s).contains(&support)
                });
                assert!(found, "{}: distractor {o} support {support} not planted", ex.id);
            }
        }
    }

    #[test]
    fn hundred_seed_validation_sweep() {
        for seed in 0..100 {
            let spec = SynthSpec { num_examples: 4, seed, ..SynthSpec::default() };
            let examples = generate_synthetic(&spec).unwrap();
            for ex in &examples {
                ex.validate().unwrap();
            }
        }
    }

    #[test]
    fn pools_depend_only_on_vocab_size() {
        let a = word_pools(160, 3, 3).unwrap();
        let b = word_pools(160, 3, 3).unwrap();
        assert_eq!(a.concepts, b.concepts);
        assert_eq!(a.query, b.query);
        assert_eq!(a.fillers, b.fillers);
    }
}
