//! Turning scores into verdicts and metrics under two protocols:
//! edge-level (anomalous relations) and interval-level (anomalous windows).
//!
//! The window sequence splits 6:1:3 chronologically — train, validation,
//! test, no shuffling — and the training slice is additionally filtered to
//! normal windows before it reaches the trainer. Edge scoring forwards the
//! test sequence causally from a cold start at its first window; the edge
//! threshold is the one maximizing validation F-1 (ties toward higher
//! precision). Interval scoring is the squared distance of each window's
//! maxpooled representation from the trained hypersphere center, with the
//! squared radius as the verdict threshold. Ranking metrics are AUC
//! (Mann–Whitney rank statistic, ties counting ½) and AUPR (average
//! precision over descending scores, ties kept in input order).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeLabel, GraphSnapshot};
use crate::ingest::WindowLabel;
use crate::model::{edge_score, temporal_encode, ModelParams};
use crate::train::{center_dist_sq, graph_repr, radius_sq};

/// Which kind of anomaly a report is about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Anomalous relations: one verdict per graph edge.
    Edge,
    /// Anomalous windows: one verdict per time interval.
    Interval,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Edge => write!(f, "edge"),
            Protocol::Interval => write!(f, "interval"),
        }
    }
}

/// Threshold metrics plus ranking metrics over one scored list. The
/// ranking metrics are `None` when the labels are degenerate (no positives
/// or no negatives — there is no ranking to measure).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub aupr: Option<f64>,
    /// Scores strictly above this are flagged anomalous.
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// A metrics report tagged with its protocol — the JSON artifact `glad
/// eval` writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub protocol: Protocol,
    pub metrics: MetricsReport,
}

impl Report {
    /// Plain-text rendering for terminals.
    pub fn text_table(&self) -> String {
        let m = &self.metrics;
        let fmt_opt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "undefined".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!("protocol   {}\n", self.protocol));
        out.push_str(&format!("threshold  {:.6}\n", m.threshold));
        out.push_str(&format!("precision  {:.4}\n", m.precision));
        out.push_str(&format!("recall     {:.4}\n", m.recall));
        out.push_str(&format!("f1         {:.4}\n", m.f1));
        out.push_str(&format!("auc        {}\n", fmt_opt(m.auc)));
        out.push_str(&format!("aupr       {}\n", fmt_opt(m.aupr)));
        out.push_str(&format!("positives  {}\n", m.n_pos));
        out.push_str(&format!("negatives  {}\n", m.n_neg));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("encoding report: {e}")))?;
        text.push('\n');
        std::fs::write(path, text)
            .map_err(|e| Error::io(format!("writing report {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Report> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading report {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("malformed report {}: {e}", path.display())))
    }
}

/// Chronological, contiguous 6:1:3 views into one window sequence.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub train: &'a [GraphSnapshot],
    pub val: &'a [GraphSnapshot],
    pub test: &'a [GraphSnapshot],
}

/// Splits a chronologically ordered window sequence 60% / 10% / 30%,
/// contiguous and in order — the temporal model must never see the future.
/// Slice sizes truncate downward for train and validation; test takes the
/// remainder.
///
/// # Errors
/// [`Error::Data`] with fewer than 10 windows — every slice must be
/// non-empty.
pub fn split_sequences(windows: &[GraphSnapshot]) -> Result<Split<'_>> {
    let n = windows.len();
    if n < 10 {
        return Err(Error::data(format!(
            "need at least 10 windows to split 6:1:3, got {n}"
        )));
    }
    let n_train = n * 6 / 10;
    let n_val = n / 10;
    Ok(Split {
        train: &windows[..n_train],
        val: &windows[n_train..n_train + n_val],
        test: &windows[n_train + n_val..],
    })
}

/// The training view the trainer actually sees: anomalous windows dropped
/// (training is one-class, normal only). Window indices stay global, so
/// positions are unaffected.
pub fn normal_windows(windows: &[GraphSnapshot]) -> Vec<GraphSnapshot> {
    windows
        .iter()
        .filter(|s| s.window_label != Some(WindowLabel::Anomalous))
        .cloned()
        .collect()
}

/// One scored test edge — a line of the `glad score` artifact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredEdge {
    /// Window index.
    pub t: usize,
    pub i: usize,
    pub j: usize,
    pub w: u64,
    pub score: f64,
    /// Ground truth: true when the edge is labeled anomalous.
    pub anomalous: bool,
}

/// Scores every edge of a labeled sequence with one causal forward pass
/// (cold start at the sequence's first window; positions stay the global
/// window indices).
///
/// # Errors
/// [`Error::Data`] when a window carries edges but no edge labels.
pub fn edge_scores(params: &ModelParams, snapshots: &[GraphSnapshot]) -> Result<Vec<ScoredEdge>> {
    let hs = temporal_encode(snapshots, params)?;
    let mut scored = Vec::new();
    for (snap, h) in snapshots.iter().zip(&hs) {
        if snap.edges.is_empty() {
            continue;
        }
        let Some(labels) = &snap.edge_labels else {
            return Err(Error::data(format!(
                "window {} has edges but no edge labels; evaluation needs ground truth",
                snap.t
            )));
        };
        for (edge, label) in snap.edges.iter().zip(labels) {
            let score = edge_score(h, *edge, &params.w1, &params.w2, params.config.mu)?;
            scored.push(ScoredEdge {
                t: snap.t,
                i: edge.i(),
                j: edge.j(),
                w: edge.weight(),
                score,
                anomalous: *label == EdgeLabel::Anomalous,
            });
        }
    }
    Ok(scored)
}

/// One scored window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalScore {
    pub t: usize,
    /// Squared distance of the window's representation from the center;
    /// 0 for empty windows, which carry no representation.
    pub score: f64,
    /// Anomalous iff score > R². Empty windows get a neutral normal
    /// verdict.
    pub verdict: WindowLabel,
    /// Ground truth, when the window has one.
    pub label: Option<WindowLabel>,
    /// True for windows with no nodes; they are skipped by the metrics.
    pub empty: bool,
}

/// Scores every window of a sequence as its squared hypersphere distance
/// ‖maxpool(H_t) − c‖², verdict anomalous iff the distance exceeds the
/// trained squared radius. Empty windows are recorded with a neutral
/// normal verdict and skipped downstream.
///
/// # Errors
/// [`Error::Data`] when the model has no trained center.
pub fn interval_scores(
    params: &ModelParams,
    snapshots: &[GraphSnapshot],
) -> Result<Vec<IntervalScore>> {
    if params.center.as_slice().iter().all(|v| *v == 0.0) && params.radius_sq == 0.0 {
        return Err(Error::data(
            "model has no trained hypersphere; train before interval scoring",
        ));
    }
    let hs = temporal_encode(snapshots, params)?;
    let mut scored = Vec::with_capacity(snapshots.len());
    for (snap, h) in snapshots.iter().zip(&hs) {
        if h.rows() == 0 {
            scored.push(IntervalScore {
                t: snap.t,
                score: 0.0,
                verdict: WindowLabel::Normal,
                label: snap.window_label,
                empty: true,
            });
            continue;
        }
        let score = center_dist_sq(&graph_repr(h)?, &params.center)?;
        let verdict = if score > params.radius_sq {
            WindowLabel::Anomalous
        } else {
            WindowLabel::Normal
        };
        scored.push(IntervalScore {
            t: snap.t,
            score,
            verdict,
            label: snap.window_label,
            empty: false,
        });
    }
    Ok(scored)
}

/// The selected edge threshold and how it was found.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    /// True when validation had no positive labels and the threshold fell
    /// back to the score percentile matching the anomaly prior; callers
    /// should warn.
    pub fallback: bool,
}

/// Picks the verdict threshold from labeled validation scores: the value
/// maximizing F-1 (verdict = score strictly above threshold), ties broken
/// toward higher precision, then toward the higher threshold. Candidates
/// are every observed score plus a sentinel below the minimum, so both
/// "flag nothing" and "flag everything" are reachable. Without any
/// positive label there is no F-1 to maximize; the threshold falls back to
/// the (1 − prior) percentile of the scores and the choice is marked.
///
/// # Errors
/// [`Error::Data`] on an empty score list; [`Error::Usage`] for a prior
/// outside [0, 1].
pub fn choose_threshold(scored: &[(f64, bool)], anomaly_prior: f64) -> Result<ThresholdChoice> {
    if scored.is_empty() {
        return Err(Error::data("cannot choose a threshold from zero scores"));
    }
    if !(0.0..=1.0).contains(&anomaly_prior) {
        return Err(Error::usage(format!(
            "anomaly prior must lie in [0, 1], got {anomaly_prior}"
        )));
    }
    let n_pos = scored.iter().filter(|(_, a)| *a).count();
    if n_pos == 0 {
        let scores: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
        let threshold = if anomaly_prior >= 1.0 {
            min_score(&scores) - 1.0
        } else {
            radius_sq(&scores, 1.0 - anomaly_prior)?
        };
        return Ok(ThresholdChoice {
            threshold,
            fallback: true,
        });
    }

    let mut candidates: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    candidates.push(min_score(&candidates) - 1.0);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut best: Option<(f64, f64, f64)> = None;
    for &t in &candidates {
        let (precision, recall, f1) = threshold_prf(scored, t);
        let _ = recall;
        let better = match best {
            None => true,
            Some((bf, bp, bt)) => {
                f1 > bf || (f1 == bf && (precision > bp || (precision == bp && t > bt)))
            }
        };
        if better {
            best = Some((f1, precision, t));
        }
    }
    let (_, _, threshold) = best.expect("candidates are non-empty");
    Ok(ThresholdChoice {
        threshold,
        fallback: false,
    })
}

fn min_score(scores: &[f64]) -> f64 {
    scores.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Precision/recall/F-1 with verdict = score strictly above the threshold.
fn threshold_prf(scored: &[(f64, bool)], threshold: f64) -> (f64, f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for &(score, anomalous) in scored {
        let flagged = score > threshold;
        match (flagged, anomalous) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Threshold metrics plus ranking metrics over a scored list. Ranking
/// metrics need at least one positive and one negative; degenerate label
/// sets report them as `None`.
pub fn compute_metrics(scored: &[(f64, bool)], threshold: f64) -> MetricsReport {
    let n_pos = scored.iter().filter(|(_, a)| *a).count();
    let n_neg = scored.len() - n_pos;
    let (precision, recall, f1) = threshold_prf(scored, threshold);
    let (auc, aupr) = if n_pos > 0 && n_neg > 0 {
        (Some(rank_auc(scored)), Some(average_precision(scored)))
    } else {
        (None, None)
    };
    MetricsReport {
        precision,
        recall,
        f1,
        auc,
        aupr,
        threshold,
        n_pos,
        n_neg,
    }
}

/// AUC as the Mann–Whitney rank statistic with midranks, so tied
/// positive/negative pairs contribute ½. Caller guarantees at least one
/// positive and one negative.
fn rank_auc(scored: &[(f64, bool)]) -> f64 {
    let n = scored.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && scored[order[end]].0 == scored[order[start]].0 {
            end += 1;
        }
        // 1-based midrank of the tie group [start, end).
        let midrank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            if scored[idx].1 {
                rank_sum_pos += midrank;
            }
        }
        start = end;
    }
    let n_pos = scored.iter().filter(|(_, a)| *a).count() as f64;
    let n_neg = n as f64 - n_pos;
    (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// AUPR as average precision: walk the list in descending score order
/// (ties keep input order — ids are positions), summing the precision at
/// every positive, divided by the number of positives. Caller guarantees
/// at least one positive.
fn average_precision(scored: &[(f64, bool)]) -> f64 {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    // Stable sort: equal scores stay in input (id) order.
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let n_pos = scored.iter().filter(|(_, a)| *a).count();
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &idx) in order.iter().enumerate() {
        if scored[idx].1 {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    sum / n_pos as f64
}

/// Everything the edge protocol produces: the report, the per-edge scores
/// it was computed from, and whether the threshold came from the
/// no-positives fallback.
#[derive(Clone, Debug)]
pub struct EdgeEvaluation {
    pub report: Report,
    pub scores: Vec<ScoredEdge>,
    pub threshold_fallback: bool,
}

/// Runs the edge protocol: score validation (cold start), choose the
/// threshold there, score test (cold start), measure.
///
/// `anomaly_prior` feeds the fallback threshold when validation has no
/// positive labels.
pub fn evaluate_edges(
    params: &ModelParams,
    val: &[GraphSnapshot],
    test: &[GraphSnapshot],
    anomaly_prior: f64,
) -> Result<EdgeEvaluation> {
    let val_scored = edge_scores(params, val)?;
    let val_pairs: Vec<(f64, bool)> = val_scored.iter().map(|s| (s.score, s.anomalous)).collect();
    let choice = choose_threshold(&val_pairs, anomaly_prior)?;
    let scores = edge_scores(params, test)?;
    let test_pairs: Vec<(f64, bool)> = scores.iter().map(|s| (s.score, s.anomalous)).collect();
    let metrics = compute_metrics(&test_pairs, choice.threshold);
    Ok(EdgeEvaluation {
        report: Report {
            protocol: Protocol::Edge,
            metrics,
        },
        scores,
        threshold_fallback: choice.fallback,
    })
}

/// Everything the interval protocol produces.
#[derive(Clone, Debug)]
pub struct IntervalEvaluation {
    pub report: Report,
    pub scores: Vec<IntervalScore>,
}

/// Runs the interval protocol on the test windows: hypersphere distances
/// against the trained radius. Empty windows are skipped; labeled,
/// non-empty windows feed the metrics.
///
/// # Errors
/// [`Error::Data`] when no non-empty test window carries a label.
pub fn evaluate_intervals(
    params: &ModelParams,
    test: &[GraphSnapshot],
) -> Result<IntervalEvaluation> {
    let scores = interval_scores(params, test)?;
    let pairs: Vec<(f64, bool)> = scores
        .iter()
        .filter(|s| !s.empty)
        .filter_map(|s| s.label.map(|l| (s.score, l == WindowLabel::Anomalous)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::data(
            "no labeled non-empty test window; interval metrics need ground truth",
        ));
    }
    let metrics = compute_metrics(&pairs, params.radius_sq);
    Ok(IntervalEvaluation {
        report: Report {
            protocol: Protocol::Interval,
            metrics,
        },
        scores,
    })
}
