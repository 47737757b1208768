//! Inline evidence tagging: wrap the three evidence granularities in six
//! tags (`<sos> <eos> <sof> <eof> <sop> <eop>`) and parse them back
//! losslessly.
//!
//! Spacing rule: an opening tag is written as tag-plus-one-space immediately
//! before its span, a closing tag as one-space-plus-tag immediately after it.
//! Removing exactly those substrings restores the original passage byte for
//! byte. At a shared offset, outer opening tags come first and inner closing
//! tags come first, so a fragment ending at a phrase boundary renders as
//! `... <eop> <eof>. <eos>`.

use thiserror::Error;

use crate::extraction::EvidenceBundle;
use crate::segmentation::{split_sentences, Span};

pub const TAG_SOS: &str = "<sos>";
pub const TAG_EOS: &str = "<eos>";
pub const TAG_SOF: &str = "<sof>";
pub const TAG_EOF: &str = "<eof>";
pub const TAG_SOP: &str = "<sop>";
pub const TAG_EOP: &str = "<eop>";

const ALL_TAGS: [&str; 6] = [TAG_SOS, TAG_EOS, TAG_SOF, TAG_EOF, TAG_SOP, TAG_EOP];

#[derive(Debug, Error)]
pub enum TaggingError {
    #[error("bundle is invalid against the passage: {0}")]
    InvalidBundle(String),
    #[error("passage already contains the tag {0:?}")]
    TagCollision(String),
    #[error("sentence spans do not match the passage's sentence segmentation")]
    SentencesNotAligned,
    #[error("tag {tag} at offset {offset}: {problem}")]
    BadTag { tag: String, offset: usize, problem: String },
    #[error("missing tag {0}")]
    MissingTag(String),
}

/// Passage text with the six evidence tags inserted. Stripping the tags
/// reproduces the original passage exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedPassage {
    pub text: String,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum InsertKind {
    // Variant order defines priority at a shared offset: closings
    // (innermost first), then openings (outermost first).
    ClosePhrase,
    CloseFragment,
    CloseSentence,
    OpenSentence,
    OpenFragment,
    OpenPhrase,
}

impl InsertKind {
    fn render(self) -> String {
        match self {
            InsertKind::OpenSentence => format!("{TAG_SOS} "),
            InsertKind::OpenFragment => format!("{TAG_SOF} "),
            InsertKind::OpenPhrase => format!("{TAG_SOP} "),
            InsertKind::CloseSentence => format!(" {TAG_EOS}"),
            InsertKind::CloseFragment => format!(" {TAG_EOF}"),
            InsertKind::ClosePhrase => format!(" {TAG_EOP}"),
        }
    }
}

/// Insert the six evidence tags around a bundle's spans.
///
/// The bundle must satisfy its nesting invariants and its sentence list must
/// be a consecutive run of the passage's actual sentences; that is what makes
/// [`parse_tags`] a true inverse.
pub fn insert_tags(passage: &str, bundle: &EvidenceBundle) -> Result<TaggedPassage, TaggingError> {
    bundle.validate(passage).map_err(|e| TaggingError::InvalidBundle(e.to_string()))?;
    for tag in ALL_TAGS {
        if passage.contains(tag) {
            return Err(TaggingError::TagCollision(tag.to_string()));
        }
    }
    let actual = split_sentences(passage);
    let run_ok = actual
        .windows(bundle.sentences.len().max(1))
        .any(|w| w == bundle.sentences.as_slice());
    if !run_ok {
        return Err(TaggingError::SentencesNotAligned);
    }

    let sentence_union =
        Span::new(bundle.sentences[0].start, bundle.sentences.last().unwrap().end);
    let mut inserts: Vec<(usize, InsertKind)> = vec![
        (sentence_union.start, InsertKind::OpenSentence),
        (sentence_union.end, InsertKind::CloseSentence),
        (bundle.fragment.start, InsertKind::OpenFragment),
        (bundle.fragment.end, InsertKind::CloseFragment),
    ];
    for p in &bundle.phrases {
        inserts.push((p.start, InsertKind::OpenPhrase));
        inserts.push((p.end, InsertKind::ClosePhrase));
    }
    inserts.sort();

    let mut out = String::with_capacity(passage.len() + inserts.len() * 7);
    let mut next = inserts.iter().peekable();
    for (i, c) in passage.chars().enumerate() {
        while let Some(&&(at, kind)) = next.peek() {
            if at == i {
                out.push_str(&kind.render());
                next.next();
            } else {
                break;
            }
        }
        out.push(c);
    }
    for &(_, kind) in next {
        out.push_str(&kind.render());
    }
    Ok(TaggedPassage { text: out })
}

/// Strip the tags, returning only the recovered passage.
pub fn strip_tags(tagged_text: &str) -> Result<String, TaggingError> {
    parse_tags(tagged_text).map(|(passage, _)| passage)
}

struct TagHit {
    tag: &'static str,
    /// Scalar offset in the tagged text (for error messages).
    offset: usize,
}

/// Parse a tagged passage back into the original text and the evidence
/// bundle, validating balance and nesting. Span offsets refer to the
/// recovered passage.
pub fn parse_tags(tagged_text: &str) -> Result<(String, EvidenceBundle), TaggingError> {
    let chars: Vec<char> = tagged_text.chars().collect();
    let tag_chars: Vec<(Vec<char>, &'static str)> =
        ALL_TAGS.iter().map(|t| (t.chars().collect(), *t)).collect();

    let mut out: Vec<char> = Vec::with_capacity(chars.len());
    let mut events: Vec<(usize, TagHit)> = Vec::new(); // (original offset, tag)
    let mut i = 0;
    while i < chars.len() {
        let hit = tag_chars
            .iter()
            .find(|(pat, _)| chars[i..].starts_with(pat))
            .map(|(pat, tag)| (pat.len(), *tag));
        match hit {
            Some((len, tag)) => {
                let offset = i;
                let opening = tag.as_bytes()[1] == b's'; // <sXX>
                if opening {
                    // Must be followed by exactly one space, which belongs to
                    // the insertion.
                    if chars.get(i + len) != Some(&' ') {
                        return Err(TaggingError::BadTag {
                            tag: tag.into(),
                            offset,
                            problem: "opening tag not followed by a space".into(),
                        });
                    }
                    events.push((out.len(), TagHit { tag, offset }));
                    i += len + 1;
                } else {
                    // The space before a closing tag belongs to the
                    // insertion; it was already copied, so take it back.
                    if out.last() != Some(&' ') {
                        return Err(TaggingError::BadTag {
                            tag: tag.into(),
                            offset,
                            problem: "closing tag not preceded by a space".into(),
                        });
                    }
                    out.pop();
                    events.push((out.len(), TagHit { tag, offset }));
                    i += len;
                }
            }
            None => {
                out.push(chars[i]);
                i += 1;
            }
        }
    }
    let passage: String = out.into_iter().collect();

    // Balance and nesting: one sentence pair, one fragment pair inside it,
    // non-overlapping phrase pairs inside the fragment.
    let mut sos = None;
    let mut eos = None;
    let mut sof = None;
    let mut eof = None;
    let mut phrase_open: Option<(usize, usize)> = None; // (orig offset, tagged offset)
    let mut phrases: Vec<Span> = Vec::new();
    for (at, hit) in &events {
        let bad = |problem: &str| TaggingError::BadTag {
            tag: hit.tag.into(),
            offset: hit.offset,
            problem: problem.into(),
        };
        match hit.tag {
            TAG_SOS if sos.is_none() => sos = Some(*at),
            TAG_SOS => return Err(bad("second sentence opening")),
            TAG_EOS
                if sos.is_some()
                    && eos.is_none()
                    && phrase_open.is_none()
                    && sof.is_some() == eof.is_some() =>
            {
                eos = Some(*at)
            }
            TAG_EOS => return Err(bad("sentence closing misnested")),
            TAG_SOF if sos.is_some() && eos.is_none() && sof.is_none() => sof = Some(*at),
            TAG_SOF => return Err(bad("fragment opening outside an open sentence")),
            TAG_EOF
                if sof.is_some() && eof.is_none() && eos.is_none() && phrase_open.is_none() =>
            {
                eof = Some(*at)
            }
            TAG_EOF => return Err(bad("fragment closing misnested")),
            TAG_SOP if sof.is_some() && eof.is_none() && phrase_open.is_none() => {
                phrase_open = Some((*at, hit.offset))
            }
            TAG_SOP => return Err(bad("phrase opening outside an open fragment")),
            TAG_EOP => match phrase_open.take() {
                Some((start, _)) if start < *at => phrases.push(Span::new(start, *at)),
                Some(_) => return Err(bad("empty phrase span")),
                None => return Err(bad("phrase closing without matching opening")),
            },
            _ => unreachable!("scanner only emits known tags"),
        }
    }
    if let Some((_, offset)) = phrase_open {
        return Err(TaggingError::BadTag {
            tag: TAG_SOP.into(),
            offset,
            problem: "phrase never closed".into(),
        });
    }
    let (Some(sos), Some(eos)) = (sos, eos) else {
        return Err(TaggingError::MissingTag(if sos.is_none() { TAG_SOS } else { TAG_EOS }.into()));
    };
    let (Some(sof), Some(eof)) = (sof, eof) else {
        return Err(TaggingError::MissingTag(if sof.is_none() { TAG_SOF } else { TAG_EOF }.into()));
    };
    if !(sos < eos && sof < eof) {
        return Err(TaggingError::MissingTag("non-empty tagged regions".into()));
    }

    let region = Span::new(sos, eos);
    let fragment = Span::new(sof, eof);
    let sentences: Vec<Span> =
        split_sentences(&passage).into_iter().filter(|s| region.contains(s)).collect();
    if sentences.is_empty() {
        return Err(TaggingError::InvalidBundle(
            "tagged sentence region holds no sentence".into(),
        ));
    }
    let bundle = EvidenceBundle { fragment, sentences, phrases };
    bundle.validate(&passage).map_err(|e| TaggingError::InvalidBundle(e.to_string()))?;
    Ok((passage, bundle))
}

/// Number of tags [`insert_tags`] adds for a bundle.
pub fn tag_count(bundle: &EvidenceBundle) -> usize {
    4 + 2 * bundle.phrases.len()
}
