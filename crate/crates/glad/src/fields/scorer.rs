//! Prompt-scored field extraction.
//!
//! The neural scorer lives behind the [`FieldScorer`] trait: anything that
//! maps a prompt string to a log-probability can drive extraction. The
//! repository ships [`TableScorer`], a lookup table with a default score,
//! which serves both the CLI scorer backend and the tests.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    build_prompt, enumerate_spans, select_non_overlapping, span_text, tokenize_fields,
    FieldMention, FieldType, MentionScore, Polarity, PromptTemplate,
};
use crate::error::{Error, Result};

/// Scores a prompt string on a log-probability scale (higher = more
/// plausible). Must be total over prompt strings.
pub trait FieldScorer {
    fn score(&self, prompt: &str) -> Result<f64>;
}

/// A scorer backed by an explicit prompt → score table with a default for
/// absent prompts. Loadable from JSON: `{"default": -10.0, "scores": {...}}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableScorer {
    pub default: f64,
    #[serde(default)]
    pub scores: HashMap<String, f64>,
}

impl TableScorer {
    pub fn new(default: f64) -> TableScorer {
        TableScorer {
            default,
            scores: HashMap::new(),
        }
    }

    pub fn with_score(mut self, prompt: &str, score: f64) -> TableScorer {
        self.scores.insert(prompt.to_string(), score);
        self
    }

    /// # Errors
    /// [`Error::Io`] on read failure, [`Error::Data`] on malformed JSON.
    pub fn load(path: &Path) -> Result<TableScorer> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading scorer table {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("malformed scorer table {}: {e}", path.display())))
    }
}

impl FieldScorer for TableScorer {
    fn score(&self, prompt: &str) -> Result<f64> {
        Ok(self.scores.get(prompt).copied().unwrap_or(self.default))
    }
}

impl<F> FieldScorer for F
where
    F: Fn(&str) -> f64,
{
    fn score(&self, prompt: &str) -> Result<f64> {
        Ok(self(prompt))
    }
}

/// Extracts fields by scoring, for every candidate span, the 15 positive
/// prompts plus the negative prompt and assigning the argmax. A span whose
/// best prompt is the negative one yields nothing. Ties go to the negative
/// prompt, then to earlier field types. Overlaps are resolved by higher
/// winning score, then longest span, then leftmost; the result is sorted by
/// span start.
///
/// # Errors
/// A scorer failure or non-finite score comes back wrapped with the span's
/// text for context.
pub fn extract_with_scorer<S: FieldScorer + ?Sized>(
    message: &str,
    scorer: &S,
    template: PromptTemplate,
) -> Result<Vec<FieldMention>> {
    let tokens = tokenize_fields(message);
    let mut candidates: Vec<FieldMention> = Vec::new();
    for span in enumerate_spans(tokens.len(), 5) {
        let text = span_text(&tokens, span);
        let negative = build_prompt(&text, None, template, Polarity::Negative)?;
        let mut best_score = score_prompt(scorer, &negative, span, &text)?;
        let mut best_type: Option<FieldType> = None;
        for field_type in FieldType::ALL {
            let prompt = build_prompt(&text, Some(field_type), template, Polarity::Positive)?;
            let score = score_prompt(scorer, &prompt, span, &text)?;
            // Strict inequality: the negative prompt and earlier types win
            // ties.
            if score > best_score {
                best_score = score;
                best_type = Some(field_type);
            }
        }
        if let Some(field_type) = best_type {
            candidates.push(FieldMention {
                span,
                text,
                field_type,
                score: MentionScore::LogProb(best_score),
            });
        }
    }
    candidates.sort_by(|a, b| {
        let (sa, sb) = (a.score.rank(), b.score.rank());
        let len_a = a.span.1 - a.span.0;
        let len_b = b.span.1 - b.span.0;
        sb.partial_cmp(&sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(len_b.cmp(&len_a))
            .then(a.span.0.cmp(&b.span.0))
    });
    Ok(select_non_overlapping(candidates))
}

fn score_prompt<S: FieldScorer + ?Sized>(
    scorer: &S,
    prompt: &str,
    span: (usize, usize),
    text: &str,
) -> Result<f64> {
    let score = scorer.score(prompt).map_err(|e| {
        Error::data(format!(
            "scorer failed on span {}..{} ({text:?}): {e}",
            span.0, span.1
        ))
    })?;
    if score.is_nan() {
        return Err(Error::numeric(format!(
            "scorer returned NaN on span {}..{} ({text:?})",
            span.0, span.1
        )));
    }
    Ok(score)
}
