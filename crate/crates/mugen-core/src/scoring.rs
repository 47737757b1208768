//! Relevance scorers for ranking candidate text segments against a query:
//! TF-IDF cosine similarity, encoder dot-product correlation, and the
//! threshold filter that keeps candidates close to the maximum score.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::segmentation::{words, Span};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("cannot fit a model on an empty document collection")]
    NoDocuments,
    #[error("all documents are empty after tokenization")]
    AllDocumentsEmpty,
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("threshold filter requires a non-empty candidate list")]
    NoCandidates,
    #[error("theta must lie in (0, 1], got {0}")]
    InvalidTheta(f64),
}

/// Fitted TF-IDF model: dense lexicographic vocabulary with smoothed
/// natural-log inverse document frequencies.
#[derive(Debug, Clone)]
pub struct TfidfModel {
    vocabulary: BTreeMap<String, usize>,
    idf: Vec<f64>,
    document_count: usize,
}

impl TfidfModel {
    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn document_count(&self) -> usize {
        self.document_count
    }

    pub fn idf_of(&self, word: &str) -> Option<f64> {
        self.vocabulary.get(&word.to_lowercase()).map(|&i| self.idf[i])
    }
}

/// Fit a TF-IDF model: `tf(w,d) = count / doc length`,
/// `idf(w) = ln((1 + N) / (1 + df(w))) + 1`.
pub fn tfidf_fit(documents: &[&str]) -> Result<TfidfModel, ScoringError> {
    if documents.is_empty() {
        return Err(ScoringError::NoDocuments);
    }
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    let mut any_words = false;
    for doc in documents {
        let mut seen: BTreeMap<String, ()> = BTreeMap::new();
        for w in words(doc) {
            any_words = true;
            seen.entry(w).or_insert(());
        }
        for (w, ()) in seen {
            *df.entry(w).or_insert(0) += 1;
        }
    }
    if !any_words {
        return Err(ScoringError::AllDocumentsEmpty);
    }
    let n = documents.len();
    // BTreeMap iteration gives the lexicographic vocabulary order.
    let mut vocabulary = BTreeMap::new();
    let mut idf = Vec::with_capacity(df.len());
    for (i, (w, d)) in df.into_iter().enumerate() {
        vocabulary.insert(w, i);
        idf.push(((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0);
    }
    Ok(TfidfModel { vocabulary, idf, document_count: n })
}

fn tfidf_vector(model: &TfidfModel, text: &str, use_idf: bool) -> Vec<(usize, f64)> {
    let tokens = words(text);
    if tokens.is_empty() {
        return Vec::new();
    }
    let total = tokens.len() as f64;
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for w in tokens {
        if let Some(&i) = model.vocabulary.get(&w) {
            *counts.entry(i).or_insert(0.0) += 1.0;
        }
    }
    counts
        .into_iter()
        .map(|(i, c)| {
            let tf = c / total;
            (i, if use_idf { tf * model.idf[i] } else { tf })
        })
        .collect()
}

fn cosine(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let norm =
        |v: &[(usize, f64)]| v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let mut dot = 0.0;
    let mut j = 0;
    for &(i, x) in a {
        while j < b.len() && b[j].0 < i {
            j += 1;
        }
        if j < b.len() && b[j].0 == i {
            dot += x * b[j].1;
        }
    }
    dot / (na * nb)
}

/// Cosine similarity of the TF-IDF vectors of two texts. Out-of-vocabulary
/// words contribute zero; either zero vector scores 0.
pub fn tfidf_score(model: &TfidfModel, segment: &str, query: &str) -> f64 {
    cosine(&tfidf_vector(model, segment, true), &tfidf_vector(model, query, true))
}

/// Degraded variant with inverse document frequency disabled (raw term
/// frequency cosine). Used by the weakened-extractor ablation.
pub fn tf_only_score(model: &TfidfModel, segment: &str, query: &str) -> f64 {
    cosine(&tfidf_vector(model, segment, false), &tfidf_vector(model, query, false))
}

/// Raw dot-product correlation of two embeddings, no normalization.
pub fn embed_score(query_embedding: &[f64], segment_embedding: &[f64]) -> Result<f64, ScoringError> {
    if query_embedding.len() != segment_embedding.len() {
        return Err(ScoringError::DimensionMismatch {
            left: query_embedding.len(),
            right: segment_embedding.len(),
        });
    }
    Ok(query_embedding.iter().zip(segment_embedding).map(|(a, b)| a * b).sum())
}

/// Cosine variant of the embedding correlation, exposed as a configuration
/// choice; zero vectors score 0.
pub fn embed_score_normalized(
    query_embedding: &[f64],
    segment_embedding: &[f64],
) -> Result<f64, ScoringError> {
    let dot = embed_score(query_embedding, segment_embedding)?;
    let nq = query_embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ns = segment_embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nq == 0.0 || ns == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (nq * ns))
}

/// A candidate segment with its relevance score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSegment {
    pub span: Span,
    pub score: f64,
}

/// Index of the maximum score, lowest index on ties.
pub fn argmax(candidates: &[ScoredSegment]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if c.score > candidates[b].score => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Retain candidates scoring at least `theta` times the maximum, preserving
/// order. The closed inequality keeps the maximum itself at `theta = 1`.
/// When the maximum score is non-positive the scaling flips direction, so
/// only the argmax is retained.
pub fn threshold_filter(
    candidates: &[ScoredSegment],
    theta: f64,
) -> Result<Vec<ScoredSegment>, ScoringError> {
    if candidates.is_empty() {
        return Err(ScoringError::NoCandidates);
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(ScoringError::InvalidTheta(theta));
    }
    let best = argmax(candidates).expect("non-empty");
    let s_max = candidates[best].score;
    if s_max <= 0.0 {
        return Ok(vec![candidates[best]]);
    }
    Ok(candidates.iter().filter(|c| c.score >= theta * s_max).copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(start: usize, score: f64) -> ScoredSegment {
        ScoredSegment { span: Span::new(start, start + 1), score }
    }

    #[test]
    fn idf_matches_hand_computation() {
        let model = tfidf_fit(&["a a b", "a c"]).unwrap();
        assert_eq!(model.document_count(), 2);
        assert!((model.idf_of("a").unwrap() - 1.0).abs() < 1e-12);
        let expected = (3.0f64 / 2.0).ln() + 1.0;
        assert!((model.idf_of("b").unwrap() - expected).abs() < 1e-9);
        assert!((model.idf_of("c").unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn single_document_idf_is_one() {
        let model = tfidf_fit(&["x y z"]).unwrap();
        for w in ["x", "y", "z"] {
            assert!((model.idf_of(w).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn refit_is_deterministic() {
        let a = tfidf_fit(&["a a b", "a c"]).unwrap();
        let b = tfidf_fit(&["a a b", "a c"]).unwrap();
        assert_eq!(a.vocabulary, b.vocabulary);
        assert_eq!(a.idf, b.idf);
    }

    #[test]
    fn fit_rejects_empty_input() {
        assert!(matches!(tfidf_fit(&[]), Err(ScoringError::NoDocuments)));
        assert!(matches!(tfidf_fit(&["", "  "]), Err(ScoringError::AllDocumentsEmpty)));
    }

    #[test]
    fn identical_texts_score_one() {
        let model = tfidf_fit(&["a a b", "a c"]).unwrap();
        let s = tfidf_score(&model, "a b", "a b");
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn disjoint_vocabulary_scores_zero() {
        let model = tfidf_fit(&["a a b", "a c"]).unwrap();
        assert_eq!(tfidf_score(&model, "a", "c"), 0.0);
        assert_eq!(tfidf_score(&model, "zzz", "a"), 0.0); // fully out of vocabulary
    }

    /// Independent brute-force oracle: build dense tf-idf vectors by hand and
    /// take the cosine.
    fn oracle_tfidf_cosine(docs: &[&str], segment: &str, query: &str) -> f64 {
        use std::collections::BTreeMap;
        let tok = |t: &str| -> Vec<String> {
            crate::segmentation::words(t)
        };
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for d in docs {
            let mut seen: Vec<String> = tok(d);
            seen.sort();
            seen.dedup();
            for w in seen {
                *df.entry(w).or_insert(0) += 1;
            }
        }
        let n = docs.len() as f64;
        let vec_of = |t: &str| -> BTreeMap<String, f64> {
            let ws = tok(t);
            let total = ws.len() as f64;
            let mut counts: BTreeMap<String, f64> = BTreeMap::new();
            for w in ws {
                *counts.entry(w).or_insert(0.0) += 1.0;
            }
            counts
                .into_iter()
                .filter_map(|(w, c)| {
                    df.get(&w).map(|&d| {
                        let idf = ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0;
                        (w, (c / total) * idf)
                    })
                })
                .collect()
        };
        let (a, b) = (vec_of(segment), vec_of(query));
        let dot: f64 = a.iter().filter_map(|(w, x)| b.get(w).map(|y| x * y)).sum();
        let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let docs = ["a a b", "a c"];
        let model = tfidf_fit(&docs).unwrap();
        for (seg, query) in [("a b", "b"), ("a b", "a c"), ("c", "a a b c"), ("b c", "c b")] {
            let got = tfidf_score(&model, seg, query);
            let want = oracle_tfidf_cosine(&docs, seg, query);
            assert!((got - want).abs() < 1e-12, "{seg:?} vs {query:?}: {got} != {want}");
        }
    }

    #[test]
    fn tfidf_score_symmetric_and_bounded() {
        let docs = ["red fish blue fish", "one fish two fish", "old boat new boat"];
        let model = tfidf_fit(&docs).unwrap();
        for (a, b) in [("red fish", "blue boat"), ("one two", "two one one"), ("boat", "fish")] {
            let ab = tfidf_score(&model, a, b);
            let ba = tfidf_score(&model, b, a);
            assert!((ab - ba).abs() < 1e-12);
            assert!((0.0..=1.0 + 1e-12).contains(&ab));
        }
    }

    #[test]
    fn embed_score_examples() {
        assert_eq!(embed_score(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(embed_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(embed_score(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), 1.0);
        assert!(embed_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn embed_score_normalized_unit_range() {
        let s = embed_score_normalized(&[3.0, 0.0], &[6.0, 0.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(embed_score_normalized(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn threshold_example_from_rule() {
        let c = [seg(0, 10.0), seg(1, 8.5), seg(2, 7.9)];
        let kept = threshold_filter(&c, 0.8).unwrap();
        let scores: Vec<f64> = kept.iter().map(|s| s.score).collect();
        assert_eq!(scores, vec![10.0, 8.5]);
    }

    #[test]
    fn threshold_one_keeps_exactly_the_max() {
        let c = [seg(0, 3.0), seg(1, 5.0), seg(2, 4.0)];
        let kept = threshold_filter(&c, 1.0).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 5.0);
    }

    #[test]
    fn threshold_all_equal_keeps_all() {
        let c = [seg(0, 2.0), seg(1, 2.0), seg(2, 2.0)];
        for theta in [0.1, 0.5, 1.0] {
            assert_eq!(threshold_filter(&c, theta).unwrap().len(), 3);
        }
    }

    #[test]
    fn threshold_negative_scores_keep_argmax_only() {
        let c = [seg(0, -5.0), seg(1, -1.0), seg(2, -3.0)];
        let kept = threshold_filter(&c, 0.8).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].span.start, 1);
    }

    #[test]
    fn threshold_rejects_empty_and_bad_theta() {
        assert!(matches!(threshold_filter(&[], 0.8), Err(ScoringError::NoCandidates)));
        let c = [seg(0, 1.0)];
        assert!(threshold_filter(&c, 0.0).is_err());
        assert!(threshold_filter(&c, 1.5).is_err());
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let c = [seg(0, 1.0), seg(1, 3.0), seg(2, 3.0)];
        assert_eq!(argmax(&c), Some(1));
    }
}
