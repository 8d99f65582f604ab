//! Rule-based field extraction.
//!
//! A [`Ruleset`] maps each field type to a list of regex patterns. Every
//! candidate span (1..5 tokens, joined with single spaces) is tested against
//! every pattern with full-string anchoring. A pattern may carry one capture
//! group to narrow the mention to part of the span — e.g. `port (\d{1,5})`
//! matched against the span "port 22" yields a mention covering only "22".
//! Narrowing applies only when the capture lands exactly on token
//! boundaries; otherwise the whole span is the mention.
//!
//! Overlapping candidates are resolved longest-match first, then leftmost,
//! then by [`FieldType`] declaration order.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;

use super::{
    enumerate_spans, select_non_overlapping, span_text, tokenize_fields, FieldMention, FieldType,
    MentionScore,
};
use crate::error::{Error, Result};

/// Compiled per-type patterns, kept alongside their source strings so the
/// set can be re-serialized exactly as loaded.
#[derive(Clone, Debug)]
pub struct Ruleset {
    /// One entry per field type that has any patterns, in declaration order.
    entries: Vec<(FieldType, Vec<CompiledPattern>)>,
}

#[derive(Clone, Debug)]
struct CompiledPattern {
    source: String,
    regex: Regex,
}

impl Ruleset {
    /// Compiles a pattern table. Patterns are anchored to the whole span
    /// text at compile time.
    ///
    /// # Errors
    /// [`Error::Data`] naming the field type and pattern when a pattern
    /// fails to compile.
    pub fn from_patterns<I, S>(patterns: I) -> Result<Ruleset>
    where
        I: IntoIterator<Item = (FieldType, Vec<S>)>,
        S: Into<String>,
    {
        let mut by_type: BTreeMap<FieldType, Vec<CompiledPattern>> = BTreeMap::new();
        for (field_type, pats) in patterns {
            let slot = by_type.entry(field_type).or_default();
            for pat in pats {
                let source = pat.into();
                let regex = Regex::new(&format!("^(?:{source})$")).map_err(|e| {
                    Error::data(format!(
                        "invalid pattern for {}: {source:?}: {e}",
                        field_type.name()
                    ))
                })?;
                slot.push(CompiledPattern { source, regex });
            }
        }
        // BTreeMap iteration follows FieldType declaration order because the
        // enum derives Ord.
        Ok(Ruleset {
            entries: by_type.into_iter().collect(),
        })
    }

    /// The built-in ruleset described in the book's extraction chapter.
    ///
    /// Fixed-syntax types get shape patterns; user_name, service, and
    /// server are keyword-anchored and deliberately narrow.
    pub fn default_rules() -> Ruleset {
        let table: Vec<(FieldType, Vec<&str>)> = vec![
            (FieldType::Ip, vec![r"(?:\d{1,3}\.){3}\d{1,3}"]),
            (
                FieldType::Email,
                vec![r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}"],
            ),
            (FieldType::Pid, vec![r"pid = (\d+)", r"pid (\d+)"]),
            (FieldType::Uid, vec![r"uid = (\d+)", r"uid (\d+)"]),
            (
                FieldType::UserName,
                vec![r"user (\w+)", r"user = (\w+)", r"(?i)login for (\w+)"],
            ),
            (
                FieldType::Timestamp,
                vec![
                    r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(?:\.\d+)?(?:Z|[+-]\d{2}:?\d{2})?",
                    r"\d{4}-\d{2}-\d{2} \d{2}:\d{2}:\d{2}",
                ],
            ),
            (
                FieldType::Service,
                vec![
                    r"service ([\w.-]+)",
                    r"service = ([\w.-]+)",
                    r"daemon ([\w.-]+)",
                    r"[\w-]+\.service",
                ],
            ),
            (
                FieldType::Server,
                vec![
                    r"(?i)server ([\w.:/-]+)",
                    r"(?i)to ([a-z][a-z0-9+.-]*://\S*)",
                ],
            ),
            (FieldType::FilePath, vec![r"/[\w.+-]+(?:/[\w.+-]*)*"]),
            (FieldType::Url, vec![r"[a-z][a-z0-9+.-]*://\S+"]),
            (
                FieldType::Port,
                vec![r"port (\d{1,5})", r"port = (\d{1,5})"],
            ),
            (
                FieldType::Session,
                vec![r"session ([\w-]+)", r"session = ([\w-]+)"],
            ),
            (
                FieldType::Duration,
                vec![
                    r"\d+(?:\.\d+)?(?:ns|us|ms|s|m|h)",
                    r"\d+(?:\.\d+)? (?:ns|us|ms|s)",
                ],
            ),
            (
                FieldType::Domain,
                vec![
                    r"(?:[a-z0-9](?:[a-z0-9-]*[a-z0-9])?\.)+(?:com|net|org|io|dev|local|internal|example)",
                ],
            ),
            (FieldType::Version, vec![r"v?\d+\.\d+(?:\.\d+)*(?:-[\w.]+)?"]),
        ];
        Ruleset::from_patterns(
            table
                .into_iter()
                .map(|(t, ps)| (t, ps.into_iter().map(str::to_string).collect::<Vec<_>>())),
        )
        .expect("built-in patterns compile")
    }

    /// Loads a ruleset from a JSON file mapping field type name → list of
    /// pattern strings.
    ///
    /// # Errors
    /// [`Error::Io`] on read failure; [`Error::Data`] on malformed JSON,
    /// unknown field type names, or invalid patterns.
    pub fn load(path: &Path) -> Result<Ruleset> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading ruleset {}", path.display()), e))?;
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("malformed ruleset {}: {e}", path.display())))?;
        let mut typed = Vec::new();
        for (name, pats) in raw {
            let field_type = serde_json::from_value(serde_json::Value::String(name.clone()))
                .map_err(|_| {
                    Error::data(format!(
                        "unknown field type {name:?} in ruleset {}",
                        path.display()
                    ))
                })?;
            typed.push((field_type, pats));
        }
        Ruleset::from_patterns(typed)
    }

    /// Writes the ruleset as JSON in the same shape [`Ruleset::load`] reads.
    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: BTreeMap<&str, Vec<&str>> = self
            .entries
            .iter()
            .map(|(t, pats)| {
                (
                    t.name(),
                    pats.iter().map(|p| p.source.as_str()).collect::<Vec<_>>(),
                )
            })
            .collect();
        let text = serde_json::to_string_pretty(&raw)
            .map_err(|e| Error::data(format!("serializing ruleset: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| Error::io(format!("writing ruleset {}", path.display()), e))
    }
}

/// Extracts all non-overlapping rule matches from a message.
///
/// Overlaps are resolved longest-match first, then leftmost, then by field
/// type declaration order; the result is sorted by span start.
pub fn extract_rules(message: &str, ruleset: &Ruleset) -> Vec<FieldMention> {
    let tokens = tokenize_fields(message);
    let mut candidates: Vec<FieldMention> = Vec::new();
    for span in enumerate_spans(tokens.len(), 5) {
        let text = span_text(&tokens, span);
        for (field_type, patterns) in &ruleset.entries {
            for pattern in patterns {
                let Some(caps) = pattern.regex.captures(&text) else {
                    continue;
                };
                let mention_span = caps
                    .get(1)
                    .and_then(|m| narrow_to_tokens(&tokens, span, m.start(), m.end()))
                    .unwrap_or(span);
                let mention = FieldMention {
                    span: mention_span,
                    text: span_text(&tokens, mention_span),
                    field_type: *field_type,
                    score: MentionScore::RuleMax,
                };
                if !candidates.contains(&mention) {
                    candidates.push(mention);
                }
                break; // first matching pattern of a type decides its mention
            }
        }
    }
    candidates.sort_by(|a, b| {
        let len_a = a.span.1 - a.span.0;
        let len_b = b.span.1 - b.span.0;
        len_b
            .cmp(&len_a)
            .then(a.span.0.cmp(&b.span.0))
            .then(a.field_type.cmp(&b.field_type))
    });
    select_non_overlapping(candidates)
}

/// Maps a capture byte range within the joined span text back to token
/// indices. Returns `None` unless both ends land exactly on token
/// boundaries.
fn narrow_to_tokens(
    tokens: &[String],
    span: (usize, usize),
    byte_start: usize,
    byte_end: usize,
) -> Option<(usize, usize)> {
    if byte_start >= byte_end {
        return None;
    }
    let mut offset = 0;
    let mut tok_start = None;
    let mut tok_end = None;
    for (i, token) in tokens[span.0..span.1].iter().enumerate() {
        if offset == byte_start {
            tok_start = Some(span.0 + i);
        }
        offset += token.len();
        if offset == byte_end {
            tok_end = Some(span.0 + i + 1);
            break;
        }
        offset += 1; // joining space
    }
    Some((tok_start?, tok_end?))
}
