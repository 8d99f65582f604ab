//! Typed field extraction from log messages.
//!
//! A message is tokenized, candidate spans of 1..5 tokens are enumerated,
//! and each span is either matched against a per-type regex ruleset
//! ([`rules`]) or scored through prompt templates against a pluggable scorer
//! ([`scorer`]). Both paths produce non-overlapping [`FieldMention`]s. The
//! same prompt templates also generate positive/negative training pairs for
//! fine-tuning an external extraction model.
//!
//! Field tokenization differs from the template miner's plain whitespace
//! split: `key=value` tokens are split around `=` and surrounding
//! quote/bracket/comma punctuation is stripped, so that mention spans can
//! cover exactly the value part of `uid=0` and friends. Mention spans always
//! refer to this module's token list.

pub mod rules;
pub mod scorer;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::LogRecord;

pub use rules::{extract_rules, Ruleset};
pub use scorer::{extract_with_scorer, FieldScorer, TableScorer};

/// The closed set of 15 field types, in tie-breaking declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    Ip,
    Email,
    Pid,
    Uid,
    UserName,
    Timestamp,
    Service,
    Server,
    FilePath,
    Url,
    Port,
    Session,
    Duration,
    Domain,
    Version,
}

impl FieldType {
    /// Every field type, in declaration order.
    pub const ALL: [FieldType; 15] = [
        FieldType::Ip,
        FieldType::Email,
        FieldType::Pid,
        FieldType::Uid,
        FieldType::UserName,
        FieldType::Timestamp,
        FieldType::Service,
        FieldType::Server,
        FieldType::FilePath,
        FieldType::Url,
        FieldType::Port,
        FieldType::Session,
        FieldType::Duration,
        FieldType::Domain,
        FieldType::Version,
    ];

    /// The type's name as used inside prompts and serialized artifacts.
    pub fn name(self) -> &'static str {
        match self {
            FieldType::Ip => "ip",
            FieldType::Email => "email",
            FieldType::Pid => "pid",
            FieldType::Uid => "uid",
            FieldType::UserName => "user_name",
            FieldType::Timestamp => "timestamp",
            FieldType::Service => "service",
            FieldType::Server => "server",
            FieldType::FilePath => "file_path",
            FieldType::Url => "url",
            FieldType::Port => "port",
            FieldType::Session => "session",
            FieldType::Duration => "duration",
            FieldType::Domain => "domain",
            FieldType::Version => "version",
        }
    }

    /// Indefinite article for prompts: "an" before vowel-initial type names.
    fn article(self) -> &'static str {
        match self.name().as_bytes()[0] {
            b'a' | b'e' | b'i' | b'o' | b'u' => "an",
            _ => "a",
        }
    }
}

/// How a mention was scored: rule hits outrank any finite scorer output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum MentionScore {
    /// Produced by the rule backend; acts as a +infinity sentinel.
    RuleMax,
    /// Log-probability from a scorer backend.
    LogProb(f64),
}

impl MentionScore {
    /// Comparable value: rule hits rank above any finite log-probability.
    pub(crate) fn rank(self) -> f64 {
        match self {
            MentionScore::RuleMax => f64::INFINITY,
            MentionScore::LogProb(v) => v,
        }
    }
}

/// One extracted field occurrence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMention {
    /// Token range `[start, end)` over the field tokenization of the
    /// message; 1..=5 tokens long.
    pub span: (usize, usize),
    /// Joined tokens of the span.
    pub text: String,
    pub field_type: FieldType,
    pub score: MentionScore,
}

/// Prompt template family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptTemplate {
    /// "`span` is a/an `type` entity" / "`span` is not a named entity"
    #[default]
    P1,
    /// "`type` = `span`" / "`span` = none"
    P2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// A (message, prompt) pair for external fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub message: String,
    pub prompt: String,
    pub polarity: Polarity,
    /// Token range of the candidate span the prompt talks about.
    pub span: (usize, usize),
    /// Present exactly on positive pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_type: Option<FieldType>,
}

/// A log record resolved to its template plus extracted field mentions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedLog {
    #[serde(flatten)]
    pub record: LogRecord,
    pub template_id: String,
    #[serde(default)]
    pub mentions: Vec<FieldMention>,
}

/// Tokenizes a message for field extraction: whitespace split, `=` broken
/// out as its own token, and surrounding quote/bracket/comma punctuation
/// stripped. Internal punctuation (dots, colons, slashes) is preserved so
/// IPs, URLs, paths, and timestamps stay whole.
pub fn tokenize_fields(message: &str) -> Vec<String> {
    const STRIP: &[char] = &[',', ';', '\'', '"', '(', ')', '[', ']', '<', '>'];
    let mut tokens = Vec::new();
    for raw in message.split_whitespace() {
        for piece in split_keeping_eq(raw) {
            let trimmed = piece.trim_matches(STRIP);
            if !trimmed.is_empty() {
                tokens.push(trimmed.to_string());
            }
        }
    }
    tokens
}

fn split_keeping_eq(raw: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = raw;
    while let Some(pos) = rest.find('=') {
        if pos > 0 {
            out.push(&rest[..pos]);
        }
        out.push("=");
        rest = &rest[pos + 1..];
    }
    if !rest.is_empty() {
        out.push(rest);
    }
    out
}

/// All contiguous token spans of length 1..=max_n as `[start, end)` pairs,
/// grouped shortest-first and left-to-right within each length.
pub fn enumerate_spans(token_count: usize, max_n: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    for n in 1..=max_n {
        if n > token_count {
            break;
        }
        for start in 0..=(token_count - n) {
            spans.push((start, start + n));
        }
    }
    spans
}

/// Renders a prompt for a candidate span.
///
/// # Errors
/// Fails if a positive prompt is requested without a field type.
pub fn build_prompt(
    text: &str,
    field_type: Option<FieldType>,
    template: PromptTemplate,
    polarity: Polarity,
) -> Result<String> {
    match (polarity, template) {
        (Polarity::Positive, t) => {
            let ft = field_type.ok_or_else(|| {
                Error::usage("positive prompts require a field type")
            })?;
            Ok(match t {
                PromptTemplate::P1 => {
                    format!("{text} is {} {} entity", ft.article(), ft.name())
                }
                PromptTemplate::P2 => format!("{} = {text}", ft.name()),
            })
        }
        (Polarity::Negative, PromptTemplate::P1) => Ok(format!("{text} is not a named entity")),
        (Polarity::Negative, PromptTemplate::P2) => Ok(format!("{text} = none")),
    }
}

/// Joined text of a token span.
pub fn span_text(tokens: &[String], span: (usize, usize)) -> String {
    tokens[span.0..span.1].join(" ")
}

/// Builds prompt training pairs for one message: a positive pair per gold
/// mention plus up to `ratio` times as many negatives, sampled uniformly
/// without replacement from candidate spans that equal no gold span.
/// Deterministic under `seed`.
pub fn generate_training_pairs(
    message: &str,
    gold: &[FieldMention],
    template: PromptTemplate,
    ratio: usize,
    seed: u64,
) -> Result<Vec<PromptPair>> {
    let tokens = tokenize_fields(message);
    let mut pairs = Vec::new();
    for mention in gold {
        pairs.push(PromptPair {
            message: message.to_string(),
            prompt: build_prompt(
                &mention.text,
                Some(mention.field_type),
                template,
                Polarity::Positive,
            )?,
            polarity: Polarity::Positive,
            span: mention.span,
            field_type: Some(mention.field_type),
        });
    }
    if gold.is_empty() {
        return Ok(pairs);
    }

    let mut candidates: Vec<(usize, usize)> = enumerate_spans(tokens.len(), 5)
        .into_iter()
        .filter(|span| gold.iter().all(|g| g.span != *span))
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let wanted = ratio * gold.len();
    for span in candidates.into_iter().take(wanted) {
        let text = span_text(&tokens, span);
        pairs.push(PromptPair {
            message: message.to_string(),
            prompt: build_prompt(&text, None, template, Polarity::Negative)?,
            polarity: Polarity::Negative,
            span,
            field_type: None,
        });
    }
    Ok(pairs)
}

/// Keeps a non-overlapping subset of candidate mentions. Candidates are
/// taken best-first in the order given (callers sort by their resolution
/// rule first); a candidate is dropped when it overlaps one already kept.
/// The survivors come back sorted by span start.
fn select_non_overlapping(ordered: Vec<FieldMention>) -> Vec<FieldMention> {
    let mut kept: Vec<FieldMention> = Vec::new();
    for cand in ordered {
        let overlaps = kept
            .iter()
            .any(|k| cand.span.0 < k.span.1 && k.span.0 < cand.span.1);
        if !overlaps {
            kept.push(cand);
        }
    }
    kept.sort_by_key(|m| m.span);
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_token_yields_one_span() {
        assert_eq!(enumerate_spans(1, 5), vec![(0, 1)]);
    }

    #[test]
    fn three_tokens_yield_six_spans() {
        let spans = enumerate_spans(3, 5);
        assert_eq!(spans.len(), 6);
        assert_eq!(
            spans,
            vec![(0, 1), (1, 2), (2, 3), (0, 2), (1, 3), (0, 3)]
        );
    }

    #[test]
    fn ten_tokens_yield_forty_spans() {
        // 10 + 9 + 8 + 7 + 6 spans of lengths 1..5.
        assert_eq!(enumerate_spans(10, 5).len(), 40);
    }

    #[test]
    fn p1_positive_prompt_matches_worked_example() {
        let p = build_prompt(
            "imap://localhost/",
            Some(FieldType::Server),
            PromptTemplate::P1,
            Polarity::Positive,
        )
        .unwrap();
        assert_eq!(p, "imap://localhost/ is a server entity");
    }

    #[test]
    fn p1_negative_prompt() {
        let p = build_prompt("foo bar", None, PromptTemplate::P1, Polarity::Negative).unwrap();
        assert_eq!(p, "foo bar is not a named entity");
    }

    #[test]
    fn p2_prompts() {
        let pos = build_prompt(
            "192.168.0.1",
            Some(FieldType::Ip),
            PromptTemplate::P2,
            Polarity::Positive,
        )
        .unwrap();
        assert_eq!(pos, "ip = 192.168.0.1");
        let neg = build_prompt("stray", None, PromptTemplate::P2, Polarity::Negative).unwrap();
        assert_eq!(neg, "stray = none");
    }

    #[test]
    fn vowel_initial_type_names_take_an() {
        let p = build_prompt(
            "10.0.0.1",
            Some(FieldType::Ip),
            PromptTemplate::P1,
            Polarity::Positive,
        )
        .unwrap();
        assert_eq!(p, "10.0.0.1 is an ip entity");
        let q = build_prompt(
            "a@b.com",
            Some(FieldType::Email),
            PromptTemplate::P1,
            Polarity::Positive,
        )
        .unwrap();
        assert_eq!(q, "a@b.com is an email entity");
    }

    #[test]
    fn positive_prompt_without_type_is_a_usage_error() {
        let err = build_prompt("x", None, PromptTemplate::P1, Polarity::Positive).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn tokenizer_splits_key_value_and_strips_punctuation() {
        assert_eq!(
            tokenize_fields("user root uid=0"),
            vec!["user", "root", "uid", "=", "0"]
        );
        assert_eq!(
            tokenize_fields("warn: (disk) [sda1], 'full'"),
            vec!["warn:", "disk", "sda1", "full"]
        );
        assert_eq!(
            tokenize_fields("FAILED LOGIN for della to imap://localhost/"),
            vec!["FAILED", "LOGIN", "for", "della", "to", "imap://localhost/"]
        );
    }

    fn gold(span: (usize, usize), text: &str, ft: FieldType) -> FieldMention {
        FieldMention {
            span,
            text: text.to_string(),
            field_type: ft,
            score: MentionScore::RuleMax,
        }
    }

    #[test]
    fn pair_generation_honors_the_three_to_one_ratio() {
        let msg = "login from 192.168.1.5 port 22 by admin now";
        let mentions = vec![
            gold((2, 3), "192.168.1.5", FieldType::Ip),
            gold((4, 5), "22", FieldType::Port),
        ];
        let pairs = generate_training_pairs(msg, &mentions, PromptTemplate::P1, 3, 11).unwrap();
        let positives = pairs.iter().filter(|p| p.polarity == Polarity::Positive).count();
        let negatives = pairs.iter().filter(|p| p.polarity == Polarity::Negative).count();
        assert_eq!(positives, 2);
        assert_eq!(negatives, 6);
    }

    #[test]
    fn no_gold_fields_no_pairs() {
        let pairs = generate_training_pairs("hello world", &[], PromptTemplate::P1, 3, 1).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn same_seed_gives_identical_pairs() {
        let msg = "session abc123 opened by user root from 10.0.0.9";
        let mentions = vec![gold((1, 2), "abc123", FieldType::Session)];
        let a = generate_training_pairs(msg, &mentions, PromptTemplate::P1, 3, 7).unwrap();
        let b = generate_training_pairs(msg, &mentions, PromptTemplate::P1, 3, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negatives_never_reuse_a_gold_span() {
        let msg = "a b c";
        let mentions = vec![gold((0, 1), "a", FieldType::Service)];
        for seed in 0..50 {
            let pairs =
                generate_training_pairs(msg, &mentions, PromptTemplate::P1, 3, seed).unwrap();
            for p in pairs.iter().filter(|p| p.polarity == Polarity::Negative) {
                assert_ne!(p.span, (0, 1));
            }
        }
    }

    proptest::proptest! {
        /// Negative counts are min(ratio * positives, available non-gold
        /// spans), and negatives never collide with gold spans.
        #[test]
        fn pair_counts_and_span_rules_hold(
            n_tokens in 1usize..8,
            ratio in 0usize..5,
            seed in 0u64..1000,
        ) {
            let words: Vec<String> = (0..n_tokens).map(|i| format!("w{i}")).collect();
            let msg = words.join(" ");
            let mentions = vec![gold((0, 1), "w0", FieldType::Service)];
            let pairs = generate_training_pairs(&msg, &mentions, PromptTemplate::P1, ratio, seed).unwrap();
            let available = enumerate_spans(n_tokens, 5).len() - 1;
            let negatives = pairs.iter().filter(|p| p.polarity == Polarity::Negative).count();
            proptest::prop_assert_eq!(negatives, available.min(ratio));
            for p in &pairs {
                let len = p.span.1 - p.span.0;
                proptest::prop_assert!((1..=5).contains(&len));
            }
        }
    }
}
