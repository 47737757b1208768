//! Evidence bundle assembly: pick the fragment, derive the containing
//! sentence run, filter phrases, and produce the degraded variants (damaged
//! boundaries, fixed-length sliding windows).
//!
//! Extraction over examples is embarrassingly parallel: every function here
//! is pure and the scorer state is read-only.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::MrcExample;
use crate::encoder::{embed_text, EncoderParams};
use crate::mix_seed;
use crate::scoring::{
    argmax, embed_score, embed_score_normalized, tf_only_score, tfidf_fit, tfidf_score,
    threshold_filter, ScoredSegment, ScoringError,
};
use crate::segmentation::{
    clause_candidates, divide_phrases, sliding_windows, split_sentences, tokenize,
    truncate_to_words, SegmentationError, Span, StopwordPolicy, TokenKind,
};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("passage is empty")]
    EmptyPassage,
    #[error("fragment {0} overlaps no sentence span")]
    NoSentenceOverlap(Span),
    #[error("embedding scorer requires encoder parameters")]
    MissingEncoder,
    #[error("invalid evidence bundle: {0}")]
    InvalidBundle(String),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar line {line}: {message}")]
    Sidecar { line: usize, message: String },
}

/// The three granularities of evidence for one example, as spans into the
/// passage. Phrases nest inside the fragment, which nests inside the union of
/// the (consecutive) sentence spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceBundle {
    pub fragment: Span,
    pub sentences: Vec<Span>,
    pub phrases: Vec<Span>,
}

impl EvidenceBundle {
    /// Check the nesting invariants against a passage.
    pub fn validate(&self, passage: &str) -> Result<(), ExtractionError> {
        self.validate_spans(passage)?;
        if self.sentences.is_empty() {
            return Err(ExtractionError::InvalidBundle("sentence set is empty".into()));
        }
        for pair in self.sentences.windows(2) {
            if pair[0].end > pair[1].start {
                return Err(ExtractionError::InvalidBundle(format!(
                    "sentence spans out of order: {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        let union = Span::new(self.sentences[0].start, self.sentences.last().unwrap().end);
        if !union.contains(&self.fragment) {
            return Err(ExtractionError::InvalidBundle(format!(
                "fragment {} escapes sentence union {}",
                self.fragment, union
            )));
        }
        for (i, p) in self.phrases.iter().enumerate() {
            if !self.fragment.contains(p) {
                return Err(ExtractionError::InvalidBundle(format!(
                    "phrase {} {} escapes fragment {}",
                    i, p, self.fragment
                )));
            }
        }
        for pair in self.phrases.windows(2) {
            if pair[0].overlaps(&pair[1]) || pair[0].start > pair[1].start {
                return Err(ExtractionError::InvalidBundle(format!(
                    "phrase spans overlap or are out of order: {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(())
    }

    /// Weaker check used for damaged bundles: every span must still be a
    /// valid span of the passage; nesting is not required.
    pub fn validate_spans(&self, passage: &str) -> Result<(), ExtractionError> {
        let all = std::iter::once(&self.fragment).chain(&self.sentences).chain(&self.phrases);
        for span in all {
            span.slice(passage)?;
        }
        Ok(())
    }
}

/// Which relevance scorer drives an extraction stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    TfIdf,
    /// TF-IDF with inverse document frequency disabled; the deliberately
    /// degraded scorer used by the weakened-extractor ablation.
    TfOnly,
    /// Dot-product correlation of encoder embeddings.
    Embedding,
    /// Cosine variant of the embedding correlation.
    EmbeddingNormalized,
}

impl ScorerKind {
    pub fn parse(s: &str) -> Option<ScorerKind> {
        match s {
            "tfidf" => Some(ScorerKind::TfIdf),
            "tf_only" | "tfonly" => Some(ScorerKind::TfOnly),
            "embedding" => Some(ScorerKind::Embedding),
            "embedding_normalized" => Some(ScorerKind::EmbeddingNormalized),
            _ => None,
        }
    }
}

/// Query construction per extraction stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    QuestionOnly,
    QuestionPlusOptions,
}

/// Extraction configuration: scorers, threshold, per-granularity word caps
/// and the divider's stopword policy.
#[derive(Debug, Clone)]
pub struct ExtractorConfig {
    pub fragment_scorer: ScorerKind,
    pub phrase_scorer: ScorerKind,
    pub theta: f64,
    pub max_passage_words: usize,
    pub max_sentence_words: usize,
    pub max_fragment_words: usize,
    pub max_phrase_words: usize,
    pub stopword_policy: StopwordPolicy,
    pub fragment_query: QueryMode,
    pub phrase_query: QueryMode,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            fragment_scorer: ScorerKind::TfIdf,
            phrase_scorer: ScorerKind::TfIdf,
            theta: 0.8,
            max_passage_words: 512,
            max_sentence_words: 128,
            max_fragment_words: 32,
            max_phrase_words: 32,
            stopword_policy: StopwordPolicy::default_policy(),
            fragment_query: QueryMode::QuestionOnly,
            phrase_query: QueryMode::QuestionPlusOptions,
        }
    }
}

/// External scorer state: encoder parameters when an embedding scorer is
/// configured. TF-IDF models are fitted per example on its sentences.
#[derive(Clone, Copy, Default)]
pub struct ScorerState<'a> {
    pub encoder: Option<&'a EncoderParams>,
}

fn query_text(example: &MrcExample, mode: QueryMode) -> String {
    match mode {
        QueryMode::QuestionOnly => example.question.clone(),
        QueryMode::QuestionPlusOptions => {
            let mut q = example.question.clone();
            for o in &example.options {
                q.push(' ');
                q.push_str(o);
            }
            q
        }
    }
}

fn score_spans(
    passage: &str,
    sentence_texts: &[&str],
    spans: &[Span],
    query: &str,
    kind: ScorerKind,
    state: ScorerState<'_>,
) -> Result<Vec<ScoredSegment>, ExtractionError> {
    match kind {
        ScorerKind::TfIdf | ScorerKind::TfOnly => {
            let model = tfidf_fit(sentence_texts)?;
            spans
                .iter()
                .map(|&span| {
                    let text = span.slice(passage)?;
                    let score = match kind {
                        ScorerKind::TfIdf => tfidf_score(&model, text, query),
                        _ => tf_only_score(&model, text, query),
                    };
                    Ok(ScoredSegment { span, score })
                })
                .collect()
        }
        ScorerKind::Embedding | ScorerKind::EmbeddingNormalized => {
            let params = state.encoder.ok_or(ExtractionError::MissingEncoder)?;
            let q = embed_text(params, query)?;
            spans
                .iter()
                .map(|&span| {
                    let p = embed_text(params, span.slice(passage)?)?;
                    let score = match kind {
                        ScorerKind::Embedding => embed_score(&q, &p)?,
                        _ => embed_score_normalized(&q, &p)?,
                    };
                    Ok(ScoredSegment { span, score })
                })
                .collect()
        }
    }
}

/// Select the fragment evidence: the top-scoring pause-punctuation clause
/// over all sentences, scored against the question, truncated to the
/// fragment word cap. Ties resolve to the lowest candidate index.
pub fn extract_fragment(
    example: &MrcExample,
    config: &ExtractorConfig,
    state: ScorerState<'_>,
) -> Result<Span, ExtractionError> {
    let passage = example.passage.as_str();
    let sentences = split_sentences(passage);
    if sentences.is_empty() {
        return Err(ExtractionError::EmptyPassage);
    }
    let sentence_texts: Vec<&str> =
        sentences.iter().map(|s| s.slice(passage)).collect::<Result<_, _>>()?;
    let mut candidates = Vec::new();
    for s in &sentences {
        candidates.extend(clause_candidates(passage, *s));
    }
    let query = query_text(example, config.fragment_query);
    let scored = score_spans(
        passage,
        &sentence_texts,
        &candidates,
        &query,
        config.fragment_scorer,
        state,
    )?;
    let best = argmax(&scored).ok_or(ExtractionError::EmptyPassage)?;
    Ok(truncate_to_words(passage, scored[best].span, config.max_fragment_words))
}

/// Minimal consecutive run of sentence spans whose union contains the
/// fragment.
pub fn derive_sentences(
    fragment: Span,
    sentence_spans: &[Span],
) -> Result<Vec<Span>, ExtractionError> {
    let overlapping: Vec<Span> =
        sentence_spans.iter().filter(|s| s.overlaps(&fragment)).copied().collect();
    if overlapping.is_empty() {
        return Err(ExtractionError::NoSentenceOverlap(fragment));
    }
    let union = Span::new(overlapping[0].start, overlapping.last().unwrap().end);
    if !union.contains(&fragment) {
        return Err(ExtractionError::NoSentenceOverlap(fragment));
    }
    Ok(overlapping)
}

/// Divide the fragment into phrases, score them against the question plus
/// options, and keep those above the threshold. A fragment the divider
/// cannot split falls back to a single whole-fragment phrase.
pub fn extract_phrases(
    example: &MrcExample,
    fragment: Span,
    config: &ExtractorConfig,
    state: ScorerState<'_>,
) -> Result<Vec<Span>, ExtractionError> {
    let passage = example.passage.as_str();
    let mut phrases = divide_phrases(passage, fragment, &config.stopword_policy);
    if phrases.is_empty() {
        log::debug!("{}: divider produced no phrases, using whole fragment", example.id);
        phrases.push(fragment);
    }
    let phrases: Vec<Span> = phrases
        .into_iter()
        .map(|p| truncate_to_words(passage, p, config.max_phrase_words))
        .collect();
    let sentences = split_sentences(passage);
    let sentence_texts: Vec<&str> =
        sentences.iter().map(|s| s.slice(passage)).collect::<Result<_, _>>()?;
    let query = query_text(example, config.phrase_query);
    let scored =
        score_spans(passage, &sentence_texts, &phrases, &query, config.phrase_scorer, state)?;
    let kept = threshold_filter(&scored, config.theta)?;
    Ok(kept.into_iter().map(|s| s.span).collect())
}

/// Full extraction: fragment, its sentence run, and the filtered phrases.
pub fn extract_bundle(
    example: &MrcExample,
    config: &ExtractorConfig,
    state: ScorerState<'_>,
) -> Result<EvidenceBundle, ExtractionError> {
    let fragment = extract_fragment(example, config, state)?;
    let sentences = derive_sentences(fragment, &split_sentences(&example.passage))?;
    let phrases = extract_phrases(example, fragment, config, state)?;
    let bundle = EvidenceBundle { fragment, sentences, phrases };
    bundle.validate(&example.passage)?;
    Ok(bundle)
}

fn damage_span(
    span: Span,
    amount: usize,
    words: &[Span],
    rng: &mut ChaCha8Rng,
) -> Span {
    let inside: Vec<usize> =
        (0..words.len()).filter(|&i| span.contains(&words[i])).collect();
    let (extend_front, extend_back) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
    let (Some(&first), Some(&last)) = (inside.first(), inside.last()) else {
        return span;
    };
    let new_first = if extend_front {
        first.saturating_sub(amount) // clamped at the passage front
    } else {
        (first + amount).min(last)
    };
    let new_last = if extend_back {
        (last + amount).min(words.len() - 1) // clamped at the passage back
    } else {
        last.saturating_sub(amount).max(new_first)
    };
    Span::new(words[new_first].start, words[new_last].end)
}

/// Randomly damage every evidence span at both boundaries: extend or shrink
/// by two words (one for phrases), clamped to the passage and to at least one
/// remaining word. Deterministic per seed.
pub fn damage_bundle(bundle: &EvidenceBundle, passage: &str, seed: u64) -> EvidenceBundle {
    let words: Vec<Span> = tokenize(passage)
        .into_iter()
        .filter(|t| t.kind == TokenKind::Word)
        .map(|t| t.span)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "damage"));
    let fragment = damage_span(bundle.fragment, 2, &words, &mut rng);
    let sentences =
        bundle.sentences.iter().map(|s| damage_span(*s, 2, &words, &mut rng)).collect();
    let phrases = bundle.phrases.iter().map(|p| damage_span(*p, 1, &words, &mut rng)).collect();
    EvidenceBundle { fragment, sentences, phrases }
}

/// Three-level sliding-window extraction: the top-scoring coarse window over
/// the passage, the top middle window inside it, the top fine window inside
/// that. Regions shorter than a window become the window's whole candidate.
pub fn windowed_bundle(
    example: &MrcExample,
    lengths: (usize, usize, usize),
    config: &ExtractorConfig,
    state: ScorerState<'_>,
) -> Result<EvidenceBundle, ExtractionError> {
    let passage = example.passage.as_str();
    let chars: Vec<char> = passage.chars().collect();
    let start = chars.iter().position(|c| !c.is_whitespace()).ok_or(ExtractionError::EmptyPassage)?;
    let end = chars.len() - chars.iter().rev().position(|c| !c.is_whitespace()).unwrap();
    let region = Span::new(start, end);
    let sentences = split_sentences(passage);
    let sentence_texts: Vec<&str> =
        sentences.iter().map(|s| s.slice(passage)).collect::<Result<_, _>>()?;
    let query = query_text(example, QueryMode::QuestionPlusOptions);
    let pick = |region: Span, window: usize| -> Result<Span, ExtractionError> {
        let spans = sliding_windows(passage, region, window)?;
        let scored = score_spans(
            passage,
            &sentence_texts,
            &spans,
            &query,
            config.fragment_scorer,
            state,
        )?;
        Ok(scored[argmax(&scored).expect("non-empty windows")].span)
    };
    let coarse = pick(region, lengths.0)?;
    let middle = pick(coarse, lengths.1)?;
    let fine = pick(middle, lengths.2)?;
    Ok(EvidenceBundle { fragment: middle, sentences: vec![coarse], phrases: vec![fine] })
}

/// Sliding-window presets: trigram/bigram/word, and the averaged evidence
/// lengths preset.
pub const WINDOW_PRESET_TRI: (usize, usize, usize) = (3, 2, 1);
pub const WINDOW_PRESET_AVG: (usize, usize, usize) = (11, 6, 4);

/// One line of the evidence sidecar file: spans as `[start, end]` pairs of
/// scalar-value offsets into the stored passage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub id: String,
    pub fragment: (usize, usize),
    pub sentences: Vec<(usize, usize)>,
    pub phrases: Vec<(usize, usize)>,
}

impl EvidenceRecord {
    pub fn from_bundle(id: &str, bundle: &EvidenceBundle) -> Self {
        EvidenceRecord {
            id: id.to_string(),
            fragment: (bundle.fragment.start, bundle.fragment.end),
            sentences: bundle.sentences.iter().map(|s| (s.start, s.end)).collect(),
            phrases: bundle.phrases.iter().map(|s| (s.start, s.end)).collect(),
        }
    }

    pub fn to_bundle(&self) -> EvidenceBundle {
        EvidenceBundle {
            fragment: Span::new(self.fragment.0, self.fragment.1),
            sentences: self.sentences.iter().map(|&(s, e)| Span::new(s, e)).collect(),
            phrases: self.phrases.iter().map(|&(s, e)| Span::new(s, e)).collect(),
        }
    }
}

/// Stream an evidence sidecar to disk, one record per line.
pub fn write_sidecar(path: &Path, records: &[EvidenceRecord]) -> Result<(), ExtractionError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)
            .map_err(|e| ExtractionError::Sidecar { line: 0, message: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_sidecar(path: &Path) -> Result<Vec<EvidenceRecord>, ExtractionError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EvidenceRecord = serde_json::from_str(&line)
            .map_err(|e| ExtractionError::Sidecar { line: idx + 1, message: e.to_string() })?;
        if !seen.insert(record.id.clone()) {
            return Err(ExtractionError::Sidecar {
                line: idx + 1,
                message: format!("duplicate id {:?}", record.id),
            });
        }
        out.push(record);
    }
    Ok(out)
}
