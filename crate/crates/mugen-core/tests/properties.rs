//! Property tests over the library's structural invariants.

use proptest::prelude::*;

use mugen_core::corpus::{generate_synthetic, read_jsonl, write_jsonl, MrcExample, SynthSpec};
use mugen_core::extraction::EvidenceBundle;
use mugen_core::scoring::embed_score;
use mugen_core::segmentation::{
    divide_phrases, sliding_windows, split_sentences, tokenize, Span, StopwordPolicy, TokenKind,
};
use mugen_core::tagging::{insert_tags, parse_tags};

fn non_ws_chars(text: &str) -> Vec<char> {
    text.chars().filter(|c| !c.is_whitespace()).collect()
}

proptest! {
    /// Token spans cover exactly the non-whitespace scalars, in order.
    #[test]
    fn tokens_reslice_to_the_text(text in "\\PC{0,120}") {
        let tokens = tokenize(&text);
        let mut covered = Vec::new();
        for t in &tokens {
            covered.extend(t.span.slice(&text).unwrap().chars());
        }
        prop_assert_eq!(covered, non_ws_chars(&text));
    }

    /// Sentence spans tile every non-whitespace scalar exactly once.
    #[test]
    fn sentences_tile_non_whitespace(text in "\\PC{0,120}") {
        let spans = split_sentences(&text);
        let mut seen = vec![false; text.chars().count()];
        for s in &spans {
            for flag in &mut seen[s.start..s.end] {
                prop_assert!(!*flag);
                *flag = true;
            }
        }
        for (i, c) in text.chars().enumerate() {
            if !c.is_whitespace() {
                prop_assert!(seen[i], "scalar {} uncovered", i);
            }
        }
    }

    /// Phrase spans are disjoint, ordered, and contain no splitter token.
    #[test]
    fn divided_phrases_are_disjoint_and_splitter_free(
        words in proptest::collection::vec("[a-z]{1,8}", 1..14),
    ) {
        let text = words.join(" ");
        let policy = StopwordPolicy::default_policy();
        let fragment = Span::new(0, text.chars().count());
        let phrases = divide_phrases(&text, fragment, &policy);
        for pair in phrases.windows(2) {
            prop_assert!(pair[0].end <= pair[1].start);
        }
        for p in &phrases {
            for t in tokenize(&text) {
                if p.contains(&t.span) && t.kind == TokenKind::Word {
                    let w = t.span.slice(&text).unwrap();
                    prop_assert!(!policy.is_splitter(w), "splitter {:?} inside phrase", w);
                }
            }
        }
    }

    /// Window count equals max(1, words - window + 1).
    #[test]
    fn sliding_window_count_matches_formula(
        words in proptest::collection::vec("[a-z]{1,6}", 0..20),
        window in 1usize..8,
    ) {
        let text = if words.is_empty() { "x".to_string() } else { words.join(" ") };
        let n_words = text.split_whitespace().count();
        let region = Span::new(0, text.chars().count());
        let spans = sliding_windows(&text, region, window).unwrap();
        let expected = if n_words >= window { n_words - window + 1 } else { 1 };
        prop_assert_eq!(spans.len(), expected.max(1));
    }

    /// Writing then reading a JSONL dataset is the identity, including over
    /// multibyte text.
    #[test]
    fn jsonl_round_trip_identity(
        passages in proptest::collection::vec("[a-zA-Z0-9 éßñ中.!?]{1,60}", 1..6),
        gold in 0usize..2,
    ) {
        let examples: Vec<MrcExample> = passages
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.trim().is_empty())
            .map(|(i, p)| MrcExample {
                id: format!("ex-{i}"),
                passage: p.clone(),
                question: format!("q {i}?"),
                options: vec!["alpha one".into(), "beta two".into()],
                gold_index: gold,
            })
            .collect();
        prop_assume!(!examples.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&path, &examples).unwrap();
        let loaded = read_jsonl(std::io::BufReader::new(std::fs::File::open(&path).unwrap()))
            .unwrap();
        prop_assert_eq!(examples, loaded);
    }

    /// Raw dot-product correlation is bilinear: scaling the query scales the
    /// score exactly (within 1e-12 at H <= 256).
    #[test]
    fn embed_score_is_bilinear(
        h in 2usize..=256,
        scale in -3.0f64..3.0,
        seed in 0u64..1000,
    ) {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = embed_score(&q, &p).unwrap();
        let scaled_q: Vec<f64> = q.iter().map(|x| x * scale).collect();
        let scaled = embed_score(&scaled_q, &p).unwrap();
        prop_assert!((scaled - scale * base).abs() < 1e-12);
    }
}

/// One thousand generated passages re-slice through the tokenizer exactly.
#[test]
fn synthetic_passages_reslice_exactly() {
    let spec = SynthSpec { num_examples: 1000, seed: 77, ..SynthSpec::default() };
    let corpus = generate_synthetic(&spec).unwrap();
    for ex in &corpus {
        let tokens = tokenize(&ex.passage);
        let mut covered = Vec::new();
        for t in &tokens {
            covered.extend(t.span.slice(&ex.passage).unwrap().chars());
        }
        assert_eq!(covered, non_ws_chars(&ex.passage), "{}", ex.id);
    }
}

/// Tagging a fragment that straddles two consecutive sentences still round
/// trips losslessly, with the sentence region covering both.
#[test]
fn multi_sentence_fragment_round_trips() {
    let passage = "Opening filler sentence. The fragment starts here and it \
                   continues onward. It finally ends in this one. Closing filler.";
    let sentences = split_sentences(passage);
    assert_eq!(sentences.len(), 4);
    let frag_text = "it continues onward. It finally ends";
    let byte = passage.find(frag_text).unwrap();
    let start = passage[..byte].chars().count();
    let fragment = Span::new(start, start + frag_text.chars().count());
    let phr_text = "finally ends";
    let byte = passage.find(phr_text).unwrap();
    let pstart = passage[..byte].chars().count();
    let bundle = EvidenceBundle {
        fragment,
        sentences: vec![sentences[1], sentences[2]],
        phrases: vec![Span::new(pstart, pstart + phr_text.chars().count())],
    };
    let tagged = insert_tags(passage, &bundle).unwrap();
    assert!(tagged.text.contains("<sos> The fragment"));
    assert!(tagged.text.contains("one. <eos> Closing"));
    let (recovered, parsed) = parse_tags(&tagged.text).unwrap();
    assert_eq!(recovered, passage);
    assert_eq!(parsed, bundle);
}

/// Permuting an example's options (and its gold index) permutes the
/// predicted probabilities identically, for every head.
#[test]
fn option_permutation_invariance() {
    use mugen_core::harness::{prepare_all, TrainConfig};
    use mugen_core::model::{batch_run, LossContext, ModelConfig, ModelParams};
    use mugen_core::Mode;
    let spec = SynthSpec { num_examples: 6, seed: 55, options_per_question: 3, ..SynthSpec::default() };
    let corpus = generate_synthetic(&spec).unwrap();
    let mut permuted = corpus.clone();
    let perm = [2usize, 0, 1]; // new position of old option i
    for ex in permuted.iter_mut() {
        let old = ex.options.clone();
        for (i, &to) in perm.iter().enumerate() {
            ex.options[to] = old[i].clone();
        }
        ex.gold_index = perm[ex.gold_index];
    }
    for mode in Mode::all() {
        let config = TrainConfig { mode, hidden: 8, v_hash: 256, ..TrainConfig::default() };
        let params = ModelParams::init(&ModelConfig::new(mode, 8, 256, 5)).unwrap();
        let base = prepare_all(&corpus, &config).unwrap();
        let shuffled = prepare_all(&permuted, &config).unwrap();
        let base_refs: Vec<_> = base.iter().collect();
        let shuf_refs: Vec<_> = shuffled.iter().collect();
        let (out_a, _) = batch_run(&params, &base_refs, &LossContext::eval(), false).unwrap();
        let (out_b, _) = batch_run(&params, &shuf_refs, &LossContext::eval(), false).unwrap();
        for (pa, pb) in out_a.probs.iter().zip(&out_b.probs) {
            for (i, &to) in perm.iter().enumerate() {
                assert!(
                    (pa[i] - pb[to]).abs() < 1e-9,
                    "{mode:?}: p[{i}]={} vs permuted p[{to}]={}",
                    pa[i],
                    pb[to]
                );
            }
        }
        // Summation order inside the softmax changes with the permutation,
        // so allow last-ulp float differences.
        assert!(
            (out_a.loss - out_b.loss).abs() < 1e-12,
            "{mode:?}: loss must be permutation-invariant ({} vs {})",
            out_a.loss,
            out_b.loss
        );
    }
}
