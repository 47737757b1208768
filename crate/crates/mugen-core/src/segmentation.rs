//! Text segmentation: tokenization, sentence splitting, the phrase divider,
//! pause-punctuation clause candidates and sliding-window enumeration.
//!
//! Every operation returns [`Span`]s of Unicode scalar-value offsets into the
//! original text, so downstream consumers (tagging, extraction sidecars) stay
//! encoding-stable. Byte offsets never leak out of this module.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("span {start}..{end} out of bounds for text of {len} scalar values")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("splitter and retained word lists overlap on {0:?}")]
    PolicyOverlap(String),
    #[error("stopword policy is missing a [split] section")]
    PolicyMissingSplitSection,
    #[error("unknown stopword policy section {0:?}")]
    PolicyUnknownSection(String),
    #[error("sliding window length must be at least 1")]
    ZeroWindow,
}

/// Half-open range of Unicode scalar values within a source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start < end, "span must be non-empty: {start}..{end}");
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: start < end
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// Validate the span against a text and slice it out.
    pub fn slice<'t>(&self, text: &'t str) -> Result<&'t str, SegmentationError> {
        slice_scalars(text, self.start, self.end)
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Slice a text by scalar-value offsets.
pub fn slice_scalars(text: &str, start: usize, end: usize) -> Result<&str, SegmentationError> {
    if start >= end {
        return Err(SegmentationError::SpanOutOfBounds { start, end, len: text.chars().count() });
    }
    let mut byte_start = None;
    let mut byte_end = None;
    let mut count = 0usize;
    for (i, (b, _)) in text.char_indices().enumerate() {
        if i == start {
            byte_start = Some(b);
        }
        if i == end {
            byte_end = Some(b);
        }
        count = i + 1;
    }
    if end == count && byte_end.is_none() {
        byte_end = Some(text.len());
    }
    match (byte_start, byte_end) {
        (Some(s), Some(e)) => Ok(&text[s..e]),
        _ => Err(SegmentationError::SpanOutOfBounds { start, end, len: count }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Word,
    Punct,
}

/// One token with its location in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub span: Span,
    pub kind: TokenKind,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

fn is_word_connector(c: char) -> bool {
    // Apostrophes keep contractions together; hyphens stay word-internal
    // unless space-surrounded (dash usage), which the scanner handles by
    // requiring alphanumerics on both sides.
    matches!(c, '\'' | '\u{2019}' | '-')
}

/// Tokenize into word and punctuation tokens. Spans are ordered,
/// non-overlapping and cover every non-whitespace scalar. Runs of `-` merge
/// into a single dash token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if is_word_char(c) {
            let start = i;
            i += 1;
            while i < chars.len() {
                if is_word_char(chars[i]) {
                    i += 1;
                } else if is_word_connector(chars[i])
                    && i + 1 < chars.len()
                    && is_word_char(chars[i + 1])
                {
                    i += 2;
                } else {
                    break;
                }
            }
            tokens.push(Token { span: Span::new(start, i), kind: TokenKind::Word });
        } else if c == '-' {
            let start = i;
            while i < chars.len() && chars[i] == '-' {
                i += 1;
            }
            tokens.push(Token { span: Span::new(start, i), kind: TokenKind::Punct });
        } else {
            tokens.push(Token { span: Span::new(i, i + 1), kind: TokenKind::Punct });
            i += 1;
        }
    }
    tokens
}

/// Split into sentence spans. A terminator run (`.`, `!`, `?`) ends a
/// sentence when followed by whitespace plus an uppercase letter or digit, or
/// by end of text. Deliberately simple and deterministic; abbreviations like
/// "Mr." split early, which the golden file pins as known behavior.
pub fn split_sentences(text: &str) -> Vec<Span> {
    let chars: Vec<char> = text.chars().collect();
    let mut spans = Vec::new();
    let mut start = None;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if start.is_none() {
            start = Some(i);
        }
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j], '.' | '!' | '?') {
                j += 1;
            }
            let mut k = j;
            while k < chars.len() && chars[k].is_whitespace() {
                k += 1;
            }
            let at_end = k == chars.len();
            let capital_next =
                k > j && k < chars.len() && (chars[k].is_uppercase() || chars[k].is_numeric());
            if at_end || capital_next {
                spans.push(Span::new(start.take().unwrap(), j));
                i = k;
                continue;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        // No trailing terminator: close the final sentence at the last
        // non-whitespace scalar.
        let mut end = chars.len();
        while end > s && chars[end - 1].is_whitespace() {
            end -= 1;
        }
        spans.push(Span::new(s, end));
    }
    spans
}

/// Stopword policy for the phrase divider: words that split fragments, and
/// prepositions exempted from splitting because they carry phrase-internal
/// meaning.
#[derive(Debug, Clone)]
pub struct StopwordPolicy {
    splitters: BTreeSet<String>,
    retained: BTreeSet<String>,
}

/// Default word-list asset: prepositions, pronouns, conjunctions and
/// interjections, with `from` and `across` retained.
pub const DEFAULT_STOPWORDS: &str = include_str!("../assets/stopwords_default.txt");

impl StopwordPolicy {
    pub fn new<I, J>(splitters: I, retained: J) -> Result<Self, SegmentationError>
    where
        I: IntoIterator<Item = String>,
        J: IntoIterator<Item = String>,
    {
        let splitters: BTreeSet<String> = splitters.into_iter().map(|w| w.to_lowercase()).collect();
        let retained: BTreeSet<String> = retained.into_iter().map(|w| w.to_lowercase()).collect();
        if let Some(w) = splitters.intersection(&retained).next() {
            return Err(SegmentationError::PolicyOverlap(w.clone()));
        }
        Ok(StopwordPolicy { splitters, retained })
    }

    /// Parse the policy file format: `[split]` and `[retain]` sections, one
    /// lowercase word per line, `#` comments allowed.
    pub fn parse(contents: &str) -> Result<Self, SegmentationError> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Split,
            Retain,
        }
        let mut section = Section::None;
        let mut splitters = Vec::new();
        let mut retained = Vec::new();
        for line in contents.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[split]" => section = Section::Split,
                "[retain]" => section = Section::Retain,
                w if w.starts_with('[') => {
                    return Err(SegmentationError::PolicyUnknownSection(w.to_string()))
                }
                w => match section {
                    Section::Split => splitters.push(w.to_string()),
                    Section::Retain => retained.push(w.to_string()),
                    Section::None => return Err(SegmentationError::PolicyMissingSplitSection),
                },
            }
        }
        if splitters.is_empty() {
            return Err(SegmentationError::PolicyMissingSplitSection);
        }
        Self::new(splitters, retained)
    }

    pub fn default_policy() -> Self {
        Self::parse(DEFAULT_STOPWORDS).expect("bundled stopword asset is valid")
    }

    /// True when a (lowercased) word splits phrases.
    pub fn is_splitter(&self, word: &str) -> bool {
        let w = word.to_lowercase();
        self.splitters.contains(&w) && !self.retained.contains(&w)
    }

    pub fn splitter_count(&self) -> usize {
        self.splitters.len()
    }
}

/// Divide a fragment into phrases: maximal runs of tokens that are neither
/// splitter stopwords nor punctuation. Retained prepositions never split.
pub fn divide_phrases(text: &str, fragment: Span, policy: &StopwordPolicy) -> Vec<Span> {
    let tokens: Vec<Token> = tokenize(text)
        .into_iter()
        .filter(|t| fragment.contains(&t.span))
        .collect();
    let mut phrases = Vec::new();
    let mut run: Option<(usize, usize)> = None;
    for tok in &tokens {
        let splits = match tok.kind {
            TokenKind::Punct => true,
            TokenKind::Word => {
                let word = tok.span.slice(text).expect("token span valid");
                policy.is_splitter(word)
            }
        };
        if splits {
            if let Some((s, e)) = run.take() {
                phrases.push(Span::new(s, e));
            }
        } else {
            run = Some(match run {
                Some((s, _)) => (s, tok.span.end),
                None => (tok.span.start, tok.span.end),
            });
        }
    }
    if let Some((s, e)) = run {
        phrases.push(Span::new(s, e));
    }
    phrases
}

fn is_pause_token(text: &str, tok: &Token) -> bool {
    if tok.kind != TokenKind::Punct {
        return false;
    }
    let s = tok.span.slice(text).expect("token span valid");
    if s.chars().all(|c| c == '-') {
        return true; // single hyphen token (space-surrounded) or -- dash
    }
    matches!(s, "," | ";" | ":" | "(" | ")" | "\u{2013}" | "\u{2014}")
}

/// Split a sentence into clause candidates at pause punctuation (comma,
/// semicolon, colon, dash, parenthesis). A sentence without pause punctuation
/// yields itself.
pub fn clause_candidates(text: &str, sentence: Span) -> Vec<Span> {
    let tokens: Vec<Token> = tokenize(text)
        .into_iter()
        .filter(|t| sentence.contains(&t.span))
        .collect();
    if tokens.is_empty() {
        return vec![sentence];
    }
    let mut clauses = Vec::new();
    let mut run: Option<(usize, usize)> = None;
    for tok in &tokens {
        if is_pause_token(text, tok) {
            if let Some((s, e)) = run.take() {
                clauses.push(Span::new(s, e));
            }
        } else {
            run = Some(match run {
                Some((s, _)) => (s, tok.span.end),
                None => (tok.span.start, tok.span.end),
            });
        }
    }
    if let Some((s, e)) = run {
        clauses.push(Span::new(s, e));
    }
    if clauses.is_empty() {
        vec![sentence]
    } else {
        clauses
    }
}

/// Enumerate word-aligned sliding windows of `window_words` words over a
/// region, stride one word. A region with fewer words than the window yields
/// the whole region as the single candidate.
pub fn sliding_windows(
    text: &str,
    region: Span,
    window_words: usize,
) -> Result<Vec<Span>, SegmentationError> {
    if window_words == 0 {
        return Err(SegmentationError::ZeroWindow);
    }
    let words: Vec<Token> = tokenize(text)
        .into_iter()
        .filter(|t| t.kind == TokenKind::Word && region.contains(&t.span))
        .collect();
    if words.len() < window_words {
        return Ok(vec![region]);
    }
    let count = words.len() - window_words + 1;
    let mut spans = Vec::with_capacity(count);
    for i in 0..count {
        spans.push(Span::new(words[i].span.start, words[i + window_words - 1].span.end));
    }
    Ok(spans)
}

/// Word tokens of a span, as lowercased strings. Shared convenience for
/// scoring and encoding.
pub fn words_of(text: &str, span: Span) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.kind == TokenKind::Word && span.contains(&t.span))
        .map(|t| t.span.slice(text).unwrap().to_lowercase())
        .collect()
}

/// All lowercased word tokens of a text.
pub fn words(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.kind == TokenKind::Word)
        .map(|t| t.span.slice(text).unwrap().to_lowercase())
        .collect()
}

/// Truncate a span to its first `max_words` word tokens (keep the head).
/// Spans with no word tokens or at most the cap are returned unchanged.
pub fn truncate_to_words(text: &str, span: Span, max_words: usize) -> Span {
    let words: Vec<Token> = tokenize(text)
        .into_iter()
        .filter(|t| t.kind == TokenKind::Word && span.contains(&t.span))
        .collect();
    if words.len() <= max_words || max_words == 0 || words.is_empty() {
        return span;
    }
    Span::new(span.start, words[max_words - 1].span.end)
}
