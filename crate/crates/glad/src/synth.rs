//! Synthetic coordinator/worker workload with injected relation anomalies,
//! for end-to-end exercise of the whole pipeline against known ground
//! truth.
//!
//! Every window carries a balanced base load: each worker receives a
//! handful of dispatch requests and the coordinator runs one rotating
//! status check. A configured fraction of windows (deterministic rounding,
//! so 200 windows at 5% is exactly 10) is made anomalous in one of two
//! ways, alternating:
//!
//! * **count inflation** — one worker's request count is multiplied ×10
//!   within the window by injecting extra copies of its dispatch line;
//! * **novel edge** — a single request goes to a ghost worker that appears
//!   nowhere else, creating an (event, field) pair no normal window has.
//!
//! Only the injected lines are labeled anomalous; the base load keeps its
//! normal labels. Output is the same JSONL shape the ingest stage reads,
//! and the whole corpus is a pure function of the config and seed.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LogRecord, RecordLabel};

/// Scenario shape: window count, entity pool, anomaly rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub windows: usize,
    /// Fraction of windows made anomalous, in [0, 1]. The count rounds to
    /// the nearest whole window.
    #[serde(default = "default_rate")]
    pub rate: f64,
    /// RNG seed; the corpus is a pure function of config and seed.
    pub seed: u64,
    /// Worker pool size.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Base dispatch requests per worker per window are drawn uniformly
    /// from 1..=this.
    #[serde(default = "default_max_requests")]
    pub max_requests: u64,
    /// Window length in milliseconds.
    #[serde(default = "default_window_ms")]
    pub window_ms: i64,
}

fn default_rate() -> f64 {
    0.05
}
fn default_workers() -> usize {
    3
}
fn default_max_requests() -> u64 {
    3
}
fn default_window_ms() -> i64 {
    60_000
}

impl SynthConfig {
    pub fn new(windows: usize, rate: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            windows,
            rate,
            seed,
            workers: default_workers(),
            max_requests: default_max_requests(),
            window_ms: default_window_ms(),
        }
    }

    /// # Errors
    /// [`Error::Usage`] when any value is out of range.
    pub fn validate(&self) -> Result<()> {
        if self.windows == 0 {
            return Err(Error::usage("at least one window is required"));
        }
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::usage(format!(
                "anomaly rate must lie in [0, 1], got {}",
                self.rate
            )));
        }
        if self.workers < 2 {
            return Err(Error::usage("the worker pool needs at least 2 workers"));
        }
        if self.max_requests == 0 {
            return Err(Error::usage("max_requests must be at least 1"));
        }
        if self.window_ms <= 0 {
            return Err(Error::usage("window length must be positive"));
        }
        Ok(())
    }

    /// How many windows come out anomalous: rate × windows, rounded to the
    /// nearest whole window.
    pub fn anomalous_window_count(&self) -> usize {
        ((self.rate * self.windows as f64).round() as usize).min(self.windows)
    }
}

/// The two injected anomaly shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AnomalyKind {
    CountInflation,
    NovelEdge,
}

fn dispatch_line(worker: &str) -> String {
    format!("dispatch request to service worker-{worker}")
}

fn status_line(worker: usize) -> String {
    format!("coordinator status check service worker-{worker}")
}

/// Generates the labeled corpus. Deterministic: the same config (seed
/// included) always produces the same records in the same order.
///
/// # Errors
/// [`Error::Usage`] for an invalid config.
pub fn generate(config: &SynthConfig) -> Result<Vec<LogRecord>> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    // Pick which windows are anomalous: a partial shuffle keeps the draw
    // exact and deterministic.
    let n_anom = config.anomalous_window_count();
    let mut indices: Vec<usize> = (0..config.windows).collect();
    for k in 0..n_anom {
        let pick = rng.random_range(k..indices.len());
        indices.swap(k, pick);
    }
    let mut anomalous: Vec<usize> = indices[..n_anom].to_vec();
    anomalous.sort_unstable();
    // Alternate the two kinds over the anomalous windows in time order.
    let kind_of = |t: usize| -> Option<AnomalyKind> {
        anomalous.binary_search(&t).ok().map(|pos| {
            if pos % 2 == 0 {
                AnomalyKind::CountInflation
            } else {
                AnomalyKind::NovelEdge
            }
        })
    };

    let mut records = Vec::new();
    for t in 0..config.windows {
        let start = t as i64 * config.window_ms;
        let mut lines: Vec<(String, RecordLabel)> = Vec::new();

        // Balanced base load, all normal.
        let mut base_counts = vec![0u64; config.workers + 1];
        for (w, slot) in base_counts.iter_mut().enumerate().skip(1) {
            let count = rng.random_range(1..=config.max_requests);
            *slot = count;
            for _ in 0..count {
                lines.push((dispatch_line(&w.to_string()), RecordLabel::Normal));
            }
        }
        lines.push((status_line(1 + t % config.workers), RecordLabel::Normal));

        match kind_of(t) {
            Some(AnomalyKind::CountInflation) => {
                // One worker's request count becomes 10× its base: inject
                // nine extra copies per base request.
                let w = rng.random_range(1..=config.workers);
                for _ in 0..base_counts[w] * 9 {
                    lines.push((dispatch_line(&w.to_string()), RecordLabel::Anomalous));
                }
            }
            Some(AnomalyKind::NovelEdge) => {
                // A request to a worker that exists in no normal window.
                lines.push((dispatch_line("ghost"), RecordLabel::Anomalous));
            }
            None => {}
        }

        // Spread the lines over the window, preserving emission order.
        let step = (config.window_ms / lines.len() as i64).max(1);
        for (idx, (msg, label)) in lines.into_iter().enumerate() {
            let offset = (idx as i64 * step).min(config.window_ms - 1);
            records.push(LogRecord {
                raw_text: msg,
                timestamp: start + offset,
                source_id: "coordinator".to_string(),
                label,
            });
        }
    }
    Ok(records)
}

/// Writes records as JSONL in the shape the ingest stage reads.
pub fn write_jsonl(path: &Path, records: &[LogRecord]) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut out = std::io::BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::data(format!("encoding synthetic record: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::io("writing synthetic corpus", e))?;
    }
    out.flush().map_err(|e| Error::io("flushing synthetic corpus", e))
}
