//! Log ingestion: reading raw log files, normalizing timestamps and labels,
//! and segmenting the record stream into fixed tumbling time windows.
//!
//! Two input shapes are supported: JSONL (one object per line with
//! configurable field names) and plain text (a regex with named capture
//! groups). Records are sorted by timestamp, stable on ties, and windows are
//! half-open intervals `[k*interval, (k+1)*interval)` anchored at the first
//! record's timestamp. Windows with no records are still emitted — they
//! become empty graphs downstream and are skipped during training.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth label attached to a single log record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordLabel {
    Normal,
    /// Serialized as `"anomaly"` to match the input convention.
    #[serde(rename = "anomaly", alias = "anomalous")]
    Anomalous,
    #[default]
    Unlabeled,
}

/// Label of a whole window, derived from its records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowLabel {
    Normal,
    Anomalous,
}

/// One normalized log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Raw message text, non-empty after trimming.
    #[serde(rename = "msg")]
    pub raw_text: String,
    /// Epoch milliseconds, never negative.
    #[serde(rename = "ts")]
    pub timestamp: i64,
    /// Emitting host or component; empty when the input has none.
    #[serde(rename = "src", default, skip_serializing_if = "String::is_empty")]
    pub source_id: String,
    #[serde(default)]
    pub label: RecordLabel,
}

/// A fixed-interval window over the record stream.
#[derive(Clone, Debug)]
pub struct LogWindow {
    /// Position in the window sequence, 0-based.
    pub window_index: usize,
    pub start_ms: i64,
    /// Exclusive upper bound; `end_ms - start_ms` equals the configured
    /// interval.
    pub end_ms: i64,
    /// Records with `start_ms <= timestamp < end_ms`, sorted by timestamp.
    pub records: Vec<LogRecord>,
}

/// Input file shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    #[default]
    Jsonl,
    Text,
}

/// How timestamp strings convert to epoch milliseconds.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampFormat {
    /// Integer epoch milliseconds, or an RFC-3339 string — whichever parses.
    #[default]
    Auto,
    EpochMs,
    Rfc3339,
    /// A chrono strftime pattern; naive datetimes are taken as UTC.
    Pattern(String),
}

/// Ingestion settings; field names apply to JSONL, the capture pattern to
/// plain text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub format: LogFormat,
    /// Abort on the first malformed line instead of skipping and counting.
    pub strict: bool,
    pub ts_field: String,
    pub msg_field: String,
    pub label_field: String,
    pub src_field: String,
    /// Regex for text mode with named groups `ts`, `msg` and optional
    /// `label`, `src`.
    pub text_pattern: Option<String>,
    pub ts_format: TimestampFormat,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            format: LogFormat::Jsonl,
            strict: false,
            ts_field: "ts".to_string(),
            msg_field: "msg".to_string(),
            label_field: "label".to_string(),
            src_field: "src".to_string(),
            text_pattern: None,
            ts_format: TimestampFormat::Auto,
        }
    }
}

/// Result of reading a file: the accepted records plus how many lines were
/// rejected (always 0 in strict mode, which errors instead).
#[derive(Clone, Debug)]
pub struct ReadOutcome {
    pub records: Vec<LogRecord>,
    pub rejected: usize,
}

fn parse_ts_str(s: &str, fmt: &TimestampFormat) -> Option<i64> {
    match fmt {
        TimestampFormat::Auto => s
            .parse::<i64>()
            .ok()
            .or_else(|| parse_ts_str(s, &TimestampFormat::Rfc3339)),
        TimestampFormat::EpochMs => s.parse::<i64>().ok(),
        TimestampFormat::Rfc3339 => DateTime::parse_from_rfc3339(s)
            .ok()
            .map(|dt| dt.timestamp_millis()),
        TimestampFormat::Pattern(p) => NaiveDateTime::parse_from_str(s, p)
            .ok()
            .map(|dt| dt.and_utc().timestamp_millis()),
    }
}

fn parse_label(s: &str) -> Option<RecordLabel> {
    match s {
        "normal" => Some(RecordLabel::Normal),
        "anomaly" | "anomalous" => Some(RecordLabel::Anomalous),
        "unlabeled" => Some(RecordLabel::Unlabeled),
        _ => None,
    }
}

/// Why a line was rejected; feeds the strict-mode error message.
fn check_record(raw_text: &str, timestamp: i64) -> std::result::Result<(), String> {
    if raw_text.trim().is_empty() {
        return Err("empty message".to_string());
    }
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    Ok(())
}

fn parse_jsonl_line(line: &str, config: &IngestConfig) -> std::result::Result<LogRecord, String> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("line is not a JSON object")?;
    let ts_value = obj
        .get(&config.ts_field)
        .ok_or_else(|| format!("missing field `{}`", config.ts_field))?;
    let timestamp = match ts_value {
        serde_json::Value::Number(n) => n
            .as_i64()
            .ok_or_else(|| format!("timestamp {n} is not an integer"))?,
        serde_json::Value::String(s) => parse_ts_str(s, &config.ts_format)
            .ok_or_else(|| format!("unparsable timestamp {s:?}"))?,
        other => return Err(format!("timestamp has unsupported type: {other}")),
    };
    let raw_text = obj
        .get(&config.msg_field)
        .and_then(|v| v.as_str())
        .ok_or_else(|| format!("missing or non-string field `{}`", config.msg_field))?
        .to_string();
    let label = match obj.get(&config.label_field) {
        None | Some(serde_json::Value::Null) => RecordLabel::Unlabeled,
        Some(serde_json::Value::String(s)) => {
            parse_label(s).ok_or_else(|| format!("unknown label {s:?}"))?
        }
        Some(other) => return Err(format!("label has unsupported type: {other}")),
    };
    let source_id = obj
        .get(&config.src_field)
        .and_then(|v| v.as_str())
        .unwrap_or("")
        .to_string();
    check_record(&raw_text, timestamp)?;
    Ok(LogRecord {
        raw_text,
        timestamp,
        source_id,
        label,
    })
}

/// Reads and normalizes a log file, sorting records by timestamp (stable on
/// ties). In lenient mode malformed lines are skipped and counted; in strict
/// mode the first malformed line aborts with its line number.
///
/// # Errors
/// Fails if the file cannot be read, if text mode lacks a capture pattern,
/// or on the first malformed line when `strict` is set.
pub fn read_logs(path: &Path, config: &IngestConfig) -> Result<ReadOutcome> {
    let file =
        File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let reader = BufReader::new(file);

    let text_re = match config.format {
        LogFormat::Text => {
            let pattern = config.text_pattern.as_ref().ok_or_else(|| {
                Error::usage("text format requires a capture pattern (ingest.text_pattern)")
            })?;
            let re = regex::Regex::new(pattern)
                .map_err(|e| Error::usage(format!("bad text pattern: {e}")))?;
            for group in ["ts", "msg"] {
                if !re.capture_names().flatten().any(|n| n == group) {
                    return Err(Error::usage(format!(
                        "text pattern must define a named group `{group}`"
                    )));
                }
            }
            Some(re)
        }
        LogFormat::Jsonl => None,
    };

    let mut records = Vec::new();
    let mut rejected = 0usize;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match &text_re {
            None => parse_jsonl_line(&line, config),
            Some(re) => parse_text_line(&line, re, config),
        };
        match parsed {
            Ok(record) => records.push(record),
            Err(reason) => {
                if config.strict {
                    return Err(Error::data(format!(
                        "{}:{}: {reason}",
                        path.display(),
                        line_no + 1
                    )));
                }
                rejected += 1;
            }
        }
    }
    records.sort_by_key(|r| r.timestamp);
    Ok(ReadOutcome { records, rejected })
}

fn parse_text_line(
    line: &str,
    re: &regex::Regex,
    config: &IngestConfig,
) -> std::result::Result<LogRecord, String> {
    let caps = re.captures(line).ok_or("line does not match pattern")?;
    let ts_str = caps.name("ts").ok_or("pattern matched without `ts`")?;
    let timestamp = parse_ts_str(ts_str.as_str(), &config.ts_format)
        .ok_or_else(|| format!("unparsable timestamp {:?}", ts_str.as_str()))?;
    let raw_text = caps
        .name("msg")
        .ok_or("pattern matched without `msg`")?
        .as_str()
        .to_string();
    let label = match caps.name("label") {
        None => RecordLabel::Unlabeled,
        Some(m) => parse_label(m.as_str()).ok_or_else(|| format!("unknown label {:?}", m.as_str()))?,
    };
    let source_id = caps.name("src").map_or("", |m| m.as_str()).to_string();
    check_record(&raw_text, timestamp)?;
    Ok(LogRecord {
        raw_text,
        timestamp,
        source_id,
        label,
    })
}

/// Splits sorted records into tumbling half-open windows anchored at the
/// first record's timestamp. Gaps produce empty windows, so for nonempty
/// input the window count is `ceil((max_ts - min_ts + 1) / interval_ms)`.
///
/// # Errors
/// Fails if `interval_ms <= 0` or the records are not sorted by timestamp.
pub fn window_segment(records: &[LogRecord], interval_ms: i64) -> Result<Vec<LogWindow>> {
    if interval_ms <= 0 {
        return Err(Error::usage(format!(
            "window interval must be positive, got {interval_ms}"
        )));
    }
    if records.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
        return Err(Error::usage("records must be sorted by timestamp"));
    }
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let anchor = first.timestamp;
    let span = records.last().unwrap().timestamp - anchor + 1;
    let count = usize::try_from((span + interval_ms - 1) / interval_ms).unwrap_or(0);
    let mut windows: Vec<LogWindow> = (0..count)
        .map(|i| LogWindow {
            window_index: i,
            start_ms: anchor + (i as i64) * interval_ms,
            end_ms: anchor + (i as i64 + 1) * interval_ms,
            records: Vec::new(),
        })
        .collect();
    for record in records {
        let idx = ((record.timestamp - anchor) / interval_ms) as usize;
        windows[idx].records.push(record.clone());
    }
    Ok(windows)
}

/// A window is anomalous exactly when it contains at least one record
/// labeled anomalous; unlabeled records count as normal.
pub fn label_window(window: &LogWindow) -> WindowLabel {
    if window
        .records
        .iter()
        .any(|r| r.label == RecordLabel::Anomalous)
    {
        WindowLabel::Anomalous
    } else {
        WindowLabel::Normal
    }
}
