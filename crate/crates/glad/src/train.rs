//! One-class training: Bernoulli negative edge sampling, selective pair
//! filtering, a margin edge loss, a soft-boundary hypersphere loss over
//! maxpooled graph representations, L2 weight regularization, and an
//! adaptive-moment optimizer.
//!
//! Each epoch forwards the whole training sequence, samples one negative
//! per positive edge, discards pairs the model already separates (positive
//! score strictly above the negative's), and takes a single optimizer step
//! on the accumulated loss. The hypersphere center is the mean of the
//! warm-up (first) epoch's graph representations and stays frozen; the
//! squared radius is re-derived at the end of every epoch as a nearest-rank
//! percentile of the squared center distances, never gradient-trained.
//! Optionally the sequence can be split into contiguous `batch_windows`
//! chunks with one step each; windows then attend only within their chunk.
//!
//! Everything is deterministic given the config seed: same seed, same
//! per-epoch loss trajectory, same final parameters.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, EdgeLabel, GraphSnapshot};
use crate::model::{
    edge_score, edge_scores_on_tape, forward_on_tape, temporal_encode, ModelConfig, ModelParams,
    ModelVars, ParamKind,
};
use crate::numeric::{Matrix, Tape, Var};

/// Optimization hyperparameters. Config file keys mirror these fields
/// exactly; only `seed` has no default and must always be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Adam learning rate.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Margin γ of the pairwise edge loss.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Scoring offset μ, copied into the model.
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Weight α of the hypersphere loss in the total.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// L2 weight-decay coefficient λ, applied through the loss.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Short-term attention band in windows, copied into the model.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Nearest-rank percentile fixing the squared radius each epoch.
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    /// Slack weight C of the soft-boundary hypersphere loss.
    #[serde(default = "default_svdd_c_weight")]
    pub svdd_c_weight: f64,
    /// RNG seed for parameter init and negative sampling. Mandatory.
    pub seed: u64,
    /// Long-term attention band in windows, copied into the model.
    #[serde(default = "default_history_budget")]
    pub history_budget: usize,
    /// When set, each epoch steps once per contiguous chunk of this many
    /// windows instead of once for the whole sequence.
    #[serde(default)]
    pub batch_windows: Option<usize>,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    100
}
fn default_gamma() -> f64 {
    0.5
}
fn default_mu() -> f64 {
    0.3
}
fn default_alpha() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    5e-7
}
fn default_k() -> usize {
    5
}
fn default_percentile() -> f64 {
    0.95
}
fn default_svdd_c_weight() -> f64 {
    1.0
}
fn default_history_budget() -> usize {
    64
}

impl TrainConfig {
    /// Spec defaults with the given seed.
    pub fn for_seed(seed: u64) -> TrainConfig {
        TrainConfig {
            lr: default_lr(),
            epochs: default_epochs(),
            gamma: default_gamma(),
            mu: default_mu(),
            alpha: default_alpha(),
            lambda: default_lambda(),
            k: default_k(),
            percentile: default_percentile(),
            svdd_c_weight: default_svdd_c_weight(),
            seed,
            history_budget: default_history_budget(),
            batch_windows: None,
        }
    }

    /// # Errors
    /// [`Error::Usage`] when any value is out of its documented range.
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::usage(format!(
                "margin gamma must lie strictly between 0 and 1, got {}",
                self.gamma
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::usage(format!(
                "weight decay lambda must be a nonnegative finite number, got {}",
                self.lambda
            )));
        }
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return Err(Error::usage(format!(
                "radius percentile must lie in (0, 1], got {}",
                self.percentile
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::usage(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::usage("at least one training epoch is required"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::usage(format!(
                "sphere loss weight alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        if !(self.svdd_c_weight >= 0.0 && self.svdd_c_weight.is_finite()) {
            return Err(Error::usage(format!(
                "slack weight must be nonnegative, got {}",
                self.svdd_c_weight
            )));
        }
        if !self.mu.is_finite() {
            return Err(Error::usage("scoring offset mu must be finite"));
        }
        if self.k == 0 || self.history_budget == 0 {
            return Err(Error::usage("attention bands must be at least 1 window"));
        }
        if self.batch_windows == Some(0) {
            return Err(Error::usage("batch_windows must be at least 1 when set"));
        }
        Ok(())
    }

    /// Canonical JSON rendering of the full config, recorded in the model
    /// file so an evaluation can tell which run produced it.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// A corrupted counterpart of one positive edge: one endpoint replaced,
/// weight carried over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NegativeEdge {
    pub i: usize,
    pub j: usize,
    pub w: u64,
    /// True when every retry collided with a real edge or a self-pair and
    /// the last attempt was kept anyway.
    pub flagged: bool,
    /// Which endpoint the final attempt replaced (the Bernoulli outcome).
    pub replaced_i: bool,
}

/// Retries after a candidate duplicates a real edge or degenerates into a
/// self-pair.
const SAMPLE_RETRIES: usize = 10;

/// Degree table and undirected edge set of one snapshot, precomputed so
/// per-edge sampling is O(retries).
struct SampleContext {
    degrees: Vec<f64>,
    edges: HashSet<(usize, usize)>,
}

impl SampleContext {
    fn new(snapshot: &GraphSnapshot) -> SampleContext {
        let mut degrees = vec![0.0; snapshot.node_count()];
        let mut edges = HashSet::with_capacity(snapshot.edges.len());
        for e in &snapshot.edges {
            degrees[e.i()] += e.weight() as f64;
            degrees[e.j()] += e.weight() as f64;
            edges.insert((e.i().min(e.j()), e.i().max(e.j())));
        }
        SampleContext { degrees, edges }
    }

    /// Caller guarantees the snapshot has at least 3 nodes.
    fn sample(&self, edge: Edge, rng: &mut impl Rng) -> NegativeEdge {
        let n = self.degrees.len();
        let (i, j, w) = (edge.i(), edge.j(), edge.weight());
        let total = self.degrees[i] + self.degrees[j];
        let p = if total > 0.0 {
            self.degrees[i] / total
        } else {
            0.5
        };
        let mut last = None;
        for _ in 0..=SAMPLE_RETRIES {
            let replaced_i = rng.random_bool(p);
            let (a, b) = if replaced_i {
                (random_other(rng, n, i), j)
            } else {
                (i, random_other(rng, n, j))
            };
            let candidate = NegativeEdge {
                i: a,
                j: b,
                w,
                flagged: false,
                replaced_i,
            };
            if a != b && !self.edges.contains(&(a.min(b), a.max(b))) {
                return candidate;
            }
            last = Some(NegativeEdge {
                flagged: true,
                ..candidate
            });
        }
        last.expect("at least one attempt was made")
    }
}

/// Uniform draw over `0..n` excluding `excluded`.
fn random_other(rng: &mut impl Rng, n: usize, excluded: usize) -> usize {
    let idx = rng.random_range(0..n - 1);
    if idx >= excluded {
        idx + 1
    } else {
        idx
    }
}

/// Corrupts one endpoint of `edge`: node i with probability
/// d_i / (d_i + d_j) (weighted degrees, no self-loops), node j otherwise.
/// Candidates that duplicate a real undirected edge or collapse into a
/// self-pair are redrawn up to 10 times; if every attempt collides the last
/// one is kept and flagged. Returns `None` when the snapshot has fewer than
/// 3 nodes — there is no meaningful replacement to draw.
pub fn sample_negative(
    edge: Edge,
    snapshot: &GraphSnapshot,
    rng: &mut impl Rng,
) -> Option<NegativeEdge> {
    if snapshot.node_count() < 3 {
        return None;
    }
    Some(SampleContext::new(snapshot).sample(edge, rng))
}

/// Selective filtering plus the margin loss over one batch of
/// (positive score, negative score) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairOutcome {
    /// Indices into the input of the pairs kept for the loss.
    pub retained: Vec<usize>,
    /// Hinge loss per retained pair, aligned with `retained`.
    pub losses: Vec<f64>,
    /// Sum of the retained losses.
    pub total: f64,
}

/// Drops every pair whose positive already scores strictly above its
/// negative (the model needs no push there), then charges the rest the
/// margin hinge max(0, γ + f_pos − f_neg).
pub fn pair_losses(pairs: &[(f64, f64)], gamma: f64) -> PairOutcome {
    let mut retained = Vec::new();
    let mut losses = Vec::new();
    let mut total = 0.0;
    for (idx, &(pos, neg)) in pairs.iter().enumerate() {
        if pos > neg {
            continue;
        }
        let loss = ((pos + gamma) - neg).max(0.0);
        retained.push(idx);
        losses.push(loss);
        total += loss;
    }
    PairOutcome {
        retained,
        losses,
        total,
    }
}

/// Maxpooled graph representation: the column-wise maximum over a window's
/// node rows.
///
/// # Errors
/// [`Error::Data`] on an empty window — there is nothing to pool, callers
/// skip such windows.
pub fn graph_repr(h_t: &Matrix) -> Result<Matrix> {
    if h_t.rows() == 0 {
        return Err(Error::data(
            "graph representation of an empty window is undefined",
        ));
    }
    h_t.maxpool_cols()
}

/// Arithmetic mean of a set of 1×d representations.
///
/// # Errors
/// [`Error::Data`] on an empty set; shape mismatches propagate.
pub fn mean_repr(reprs: &[Matrix]) -> Result<Matrix> {
    let Some(first) = reprs.first() else {
        return Err(Error::data("mean of zero representations is undefined"));
    };
    let mut acc = first.clone();
    for r in &reprs[1..] {
        acc.add_assign(r)?;
    }
    Ok(acc.scale(1.0 / reprs.len() as f64))
}

/// Squared Euclidean distance from a representation to the sphere center.
pub fn center_dist_sq(repr: &Matrix, center: &Matrix) -> Result<f64> {
    Ok(repr.sub(center)?.l2_norm_sq())
}

/// Nearest-rank percentile of squared distances: the value at rank
/// ⌈p·n⌉ (1-based) of the ascending sort.
///
/// # Errors
/// [`Error::Data`] on an empty sample, [`Error::Usage`] for a percentile
/// outside (0, 1].
pub fn radius_sq(dists_sq: &[f64], percentile: f64) -> Result<f64> {
    if dists_sq.is_empty() {
        return Err(Error::data("radius over zero distances is undefined"));
    }
    if !(percentile > 0.0 && percentile <= 1.0) {
        return Err(Error::usage(format!(
            "radius percentile must lie in (0, 1], got {percentile}"
        )));
    }
    let mut sorted = dists_sq.to_vec();
    sorted.sort_by(f64::total_cmp);
    let raw = percentile * sorted.len() as f64;
    // The epsilon keeps products like 0.1 · 30 (= 3.0000000000000004 in
    // f64) from rounding the rank up past the mathematical ⌈p·n⌉.
    let rank = ((raw - 1e-9).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Warm-up summary of the hypersphere: center = mean representation,
/// squared radius = nearest-rank percentile of the squared center
/// distances.
pub fn svdd_state(reprs: &[Matrix], percentile: f64) -> Result<(Matrix, f64)> {
    let center = mean_repr(reprs)?;
    let dists: Vec<f64> = reprs
        .iter()
        .map(|r| center_dist_sq(r, &center))
        .collect::<Result<_>>()?;
    let r = radius_sq(&dists, percentile)?;
    Ok((center, r))
}

/// Soft-boundary hypersphere loss R² + C · mean_t max(0, ‖r_t − c‖² − R²).
/// Only the slack term carries gradient; the radius is re-derived from the
/// percentile rule, never trained.
///
/// # Errors
/// [`Error::Data`] on an empty set of representations.
pub fn svdd_loss(
    reprs: &[Matrix],
    center: &Matrix,
    radius_sq: f64,
    c_weight: f64,
) -> Result<f64> {
    if reprs.is_empty() {
        return Err(Error::data("sphere loss over zero representations"));
    }
    let mut slack_sum = 0.0;
    for r in reprs {
        let d2 = center_dist_sq(r, center)?;
        slack_sum += (d2 - radius_sq).max(0.0);
    }
    Ok(c_weight / reprs.len() as f64 * slack_sum + radius_sq)
}

/// Canonical parameter indices that participate in weight decay: every
/// weight matrix the configured forward pass actually reads. Biases are
/// exempt, and with the transformer disabled the (unused) attention
/// parameters drop out as well.
fn decayed_param_indices(params: &ModelParams) -> Vec<usize> {
    let gcn_n = params.gcn.len();
    let attn_n = (params.attn_long.len() + params.attn_short.len()) * 9;
    params
        .param_kinds()
        .iter()
        .enumerate()
        .filter(|(idx, kind)| {
            if **kind != ParamKind::Weight {
                return false;
            }
            let in_attn = *idx >= gcn_n && *idx < gcn_n + attn_n;
            params.config.use_transformer || !in_attn
        })
        .map(|(idx, _)| idx)
        .collect()
}

/// Combined objective ℒ_e + α·ℒ_g + (λ/2)·Σ‖W‖², the decay sum running
/// over the weight matrices the forward pass reads (biases exempt).
pub fn total_loss(
    loss_edge: f64,
    loss_sphere: f64,
    params: &ModelParams,
    alpha: f64,
    lambda: f64,
) -> f64 {
    let mats = params.param_matrices();
    let mut reg = 0.0;
    for idx in decayed_param_indices(params) {
        reg += mats[idx].l2_norm_sq();
    }
    loss_edge + alpha * loss_sphere + lambda / 2.0 * reg
}

/// Adam over the canonical parameter list, with bias-corrected moment
/// estimates. Weight decay is *not* applied here — λ lives in the loss, so
/// the decay gradient arrives with everything else and is never counted
/// twice.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, params: &ModelParams) -> Adam {
        let zeros: Vec<Matrix> = params
            .param_matrices()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `grads` aligns with [`ModelParams::param_matrices`];
    /// `None` entries (parameters the loss never touched) are left alone.
    ///
    /// # Errors
    /// [`Error::Numeric`] on a gradient list or shape mismatch.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Matrix>]) -> Result<()> {
        let mats = params.param_matrices_mut();
        if grads.len() != mats.len() {
            return Err(Error::numeric(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                mats.len()
            )));
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (idx, (param, grad)) in mats.into_iter().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if grad.rows() != param.rows() || grad.cols() != param.cols() {
                return Err(Error::numeric(format!(
                    "gradient {idx} is {}x{}, parameter is {}x{}",
                    grad.rows(),
                    grad.cols(),
                    param.rows(),
                    param.cols()
                )));
            }
            let m = self.m[idx].as_mut_slice();
            let v = self.v[idx].as_mut_slice();
            let p = param.as_mut_slice();
            for ((g, (m, v)), p) in grad.as_slice().iter().zip(m.iter_mut().zip(v)).zip(p) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One line of the training log. All values are pure functions of the data
/// and the seed — no wall-clock — so two identical runs write identical
/// logs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Summed retained-pair hinge loss.
    pub loss_edge: f64,
    /// Sphere loss R² + C·mean slack against the radius in force during
    /// the epoch; 0 for the warm-up epoch (no center exists yet). Logged
    /// even when α = 0 keeps it out of the optimized total.
    pub loss_sphere: f64,
    /// The loss the optimizer actually stepped on (summed over chunks).
    pub loss_total: f64,
    /// Mean squared center distance of the epoch's representations.
    pub mean_center_dist: f64,
    /// End-of-epoch squared radius (nearest-rank percentile rule).
    pub radius_sq: f64,
    /// Best edge F-1 on the validation split at any threshold, measured
    /// after the epoch's update; null without labeled validation edges.
    pub val_f1: Option<f64>,
}

/// Everything `train` produces: the final parameters (center and radius
/// filled in) plus the per-epoch records that also went to the log file.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epochs: Vec<EpochRecord>,
}

/// Trains the model on a normal-only window sequence.
///
/// `model` supplies the architecture; its `mu`, `k`, and `history_budget`
/// are overwritten from `config` so the optimization config stays the
/// single source of truth for them. When `val` is given and carries
/// anomalous edge labels, each record reports the best achievable edge F-1
/// on it. When `log_path` is given the file is created fresh and one JSON
/// line appended per epoch.
///
/// # Errors
/// [`Error::Usage`] for bad config values, [`Error::Data`] when every
/// training window is empty, [`Error::Numeric`] when the loss goes
/// non-finite (divergence guard).
pub fn train(
    snapshots: &[GraphSnapshot],
    val: Option<&[GraphSnapshot]>,
    model: &ModelConfig,
    config: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut cfg = model.clone();
    cfg.mu = config.mu;
    cfg.k = config.k;
    cfg.history_budget = config.history_budget;
    if !snapshots.iter().any(|s| s.node_count() > 0) {
        return Err(Error::data("every training window is empty"));
    }

    let mut params = ModelParams::init(cfg, config.seed)?;
    params.fingerprint = config.fingerprint();
    let kinds_in_decay = decayed_param_indices(&params);
    let contexts: Vec<SampleContext> = snapshots.iter().map(SampleContext::new).collect();
    let chunks = chunk_ranges(snapshots.len(), config.batch_windows);
    let val_seq = prepare_val(val);

    let mut log_file = match log_path {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| {
            Error::io(format!("creating {}", p.display()), e)
        })?)),
        None => None,
    };

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.lr, &params);
    let mut center: Option<Matrix> = None;
    let mut radius = 0.0;
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut epoch_reprs: Vec<Matrix> = Vec::new();
        let mut loss_edge = 0.0;
        let mut loss_total = 0.0;

        for chunk in &chunks {
            let snaps = &snapshots[chunk.clone()];
            if snaps.iter().all(|s| s.node_count() == 0) {
                continue;
            }
            let mut tape = Tape::new();
            let vars = ModelVars::declare(&mut tape, &params, true);
            let plan = forward_on_tape(&mut tape, &vars, &params, snaps)?;

            // Row spans of the chunk's non-empty windows, and their
            // maxpooled representations as plain values for the
            // center/radius bookkeeping.
            let mut spans: Vec<(usize, usize)> = Vec::new();
            for &(start, len) in &plan.row_ranges {
                if len > 0 {
                    spans.push((start, len));
                }
            }
            {
                let h_val = tape.value(plan.h);
                for &(start, len) in &spans {
                    epoch_reprs.push(graph_repr(&h_val.slice_rows(start, len)?)?);
                }
            }

            // One resampled negative per positive edge; windows under 3
            // nodes yield no pairs.
            let mut rows_i = Vec::new();
            let mut rows_j = Vec::new();
            let mut weights = Vec::new();
            let mut neg_i = Vec::new();
            let mut neg_j = Vec::new();
            for (local, snap) in snaps.iter().enumerate() {
                if snap.node_count() < 3 {
                    continue;
                }
                let (start, _) = plan.row_ranges[local];
                let ctx = &contexts[chunk.start + local];
                for &e in &snap.edges {
                    let neg = ctx.sample(e, &mut rng);
                    rows_i.push(start + e.i());
                    rows_j.push(start + e.j());
                    weights.push(e.weight() as f64);
                    neg_i.push(start + neg.i);
                    neg_j.push(start + neg.j);
                }
            }

            let mut terms: Vec<Var> = Vec::new();
            if !rows_i.is_empty() {
                let pos =
                    edge_scores_on_tape(&mut tape, plan.h, &vars, config.mu, &rows_i, &rows_j, &weights)?;
                let neg =
                    edge_scores_on_tape(&mut tape, plan.h, &vars, config.mu, &neg_i, &neg_j, &weights)?;
                let pairs: Vec<(f64, f64)> = {
                    let pv = tape.value(pos);
                    let nv = tape.value(neg);
                    pv.as_slice()
                        .iter()
                        .zip(nv.as_slice())
                        .map(|(&a, &b)| (a, b))
                        .collect()
                };
                let outcome = pair_losses(&pairs, config.gamma);
                loss_edge += outcome.total;
                if !outcome.retained.is_empty() {
                    let pr = tape.gather_rows(pos, &outcome.retained)?;
                    let nr = tape.gather_rows(neg, &outcome.retained)?;
                    let shifted = tape.affine(pr, 1.0, config.gamma);
                    let margins = tape.sub(shifted, nr)?;
                    let hinge = tape.relu(margins);
                    terms.push(tape.sum(hinge));
                }
            }

            // Sphere slack, once a center exists and α keeps it in play.
            if config.alpha > 0.0 && !spans.is_empty() {
                if let Some(c) = &center {
                    let c_var = tape.constant(c.clone());
                    let mut slack_sum: Option<Var> = None;
                    for &(start, len) in &spans {
                        let rows = tape.slice_rows(plan.h, start, len)?;
                        let r = tape.maxpool_cols(rows)?;
                        let diff = tape.sub(r, c_var)?;
                        let d2 = tape.l2_norm_sq(diff);
                        let shifted = tape.affine(d2, 1.0, -radius);
                        let slack = tape.relu(shifted);
                        slack_sum = Some(match slack_sum {
                            None => slack,
                            Some(s) => tape.add(s, slack)?,
                        });
                    }
                    let sum = slack_sum.expect("spans is non-empty");
                    let lg = tape.affine(sum, config.svdd_c_weight / spans.len() as f64, radius);
                    terms.push(tape.affine(lg, config.alpha, 0.0));
                }
            }

            if config.lambda > 0.0 {
                let all = vars.all();
                let mut reg: Option<Var> = None;
                for &idx in &kinds_in_decay {
                    let n = tape.l2_norm_sq(all[idx]);
                    reg = Some(match reg {
                        None => n,
                        Some(r) => tape.add(r, n)?,
                    });
                }
                if let Some(r) = reg {
                    terms.push(tape.affine(r, config.lambda / 2.0, 0.0));
                }
            }

            let mut loss_var: Option<Var> = None;
            for term in terms {
                loss_var = Some(match loss_var {
                    None => term,
                    Some(l) => tape.add(l, term)?,
                });
            }
            let Some(loss_var) = loss_var else { continue };
            let loss_val = tape.value(loss_var).item()?;
            loss_total += loss_val;
            if !loss_val.is_finite() {
                return Err(Error::numeric(format!(
                    "training diverged at epoch {epoch}: loss is not finite"
                )));
            }
            let mut grads = tape.backward(loss_var)?;
            let grad_list: Vec<Option<Matrix>> =
                vars.all().iter().map(|v| grads.take(*v)).collect();
            drop(tape);
            adam.step(&mut params, &grad_list)?;
        }

        // End of epoch: freeze the center after warm-up, re-derive the
        // radius, and log.
        let first_epoch = center.is_none();
        if first_epoch {
            let (c, r) = svdd_state(&epoch_reprs, config.percentile)?;
            center = Some(c);
            radius = r;
        }
        let c = center.as_ref().expect("center set after warm-up");
        let loss_sphere = if first_epoch {
            0.0
        } else {
            let v = svdd_loss(&epoch_reprs, c, radius, config.svdd_c_weight)?;
            let dists: Vec<f64> = epoch_reprs
                .iter()
                .map(|r| center_dist_sq(r, c))
                .collect::<Result<_>>()?;
            radius = radius_sq(&dists, config.percentile)?;
            v
        };
        let dists: Vec<f64> = epoch_reprs
            .iter()
            .map(|r| center_dist_sq(r, c))
            .collect::<Result<_>>()?;
        let mean_center_dist = dists.iter().sum::<f64>() / dists.len() as f64;

        let val_f1 = match &val_seq {
            Some(seq) => {
                let hs = temporal_encode(seq, &params)?;
                val_edge_f1(&hs, seq, &params)?
            }
            None => None,
        };

        let record = EpochRecord {
            epoch,
            loss_edge,
            loss_sphere,
            loss_total,
            mean_center_dist,
            radius_sq: radius,
            val_f1,
        };
        if let Some(f) = &mut log_file {
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::data(format!("encoding train log line: {e}")))?;
            writeln!(f, "{line}").map_err(|e| Error::io("writing train log", e))?;
            f.flush().map_err(|e| Error::io("flushing train log", e))?;
        }
        records.push(record);
    }

    params.center = center.expect("at least one epoch ran");
    params.radius_sq = radius;
    Ok(TrainOutcome {
        params,
        epochs: records,
    })
}

fn chunk_ranges(n: usize, batch_windows: Option<usize>) -> Vec<Range<usize>> {
    let step = batch_windows.unwrap_or(n).max(1);
    (0..n)
        .step_by(step)
        .map(|s| s..(s + step).min(n))
        .collect()
}

/// Keeps the validation sequence for the per-epoch F-1 probe. Validation
/// is scored exactly like the test protocol: forwarded causally from a
/// cold start at its first window (positions stay the global window
/// indices). Returns `None` when validation has no anomalous edge labels —
/// best F-1 would be undefined.
fn prepare_val(val: Option<&[GraphSnapshot]>) -> Option<Vec<GraphSnapshot>> {
    let val = val?;
    let labeled = val
        .iter()
        .any(|s| s.edge_labels.iter().flatten().any(|l| *l == EdgeLabel::Anomalous));
    if !labeled {
        return None;
    }
    if val.iter().all(|s| s.node_count() == 0) {
        return None;
    }
    Some(val.to_vec())
}

/// Best achievable F-1 over all thresholds on the validation edges, or
/// `None` when no edge is labeled anomalous.
fn val_edge_f1(
    hs: &[Matrix],
    val: &[GraphSnapshot],
    params: &ModelParams,
) -> Result<Option<f64>> {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (snap, h) in val.iter().zip(hs) {
        let Some(labels) = &snap.edge_labels else {
            continue;
        };
        for (e, label) in snap.edges.iter().zip(labels) {
            let s = edge_score(h, *e, &params.w1, &params.w2, params.config.mu)?;
            scored.push((s, *label == EdgeLabel::Anomalous));
        }
    }
    Ok(best_f1(&mut scored))
}

/// Maximum F-1 over "anomalous iff score ≥ t" for every threshold t.
fn best_f1(scored: &mut [(f64, bool)]) -> Option<f64> {
    let positives = scored.iter().filter(|(_, a)| *a).count();
    if positives == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = 0.0;
    let mut tp = 0usize;
    for k in 1..=scored.len() {
        if scored[k - 1].1 {
            tp += 1;
        }
        // A threshold can only separate distinct scores.
        if k < scored.len() && scored[k].0 == scored[k - 1].0 {
            continue;
        }
        let precision = tp as f64 / k as f64;
        let recall = tp as f64 / positives as f64;
        if precision + recall > 0.0 {
            let f1 = 2.0 * precision * recall / (precision + recall);
            if f1 > best {
                best = f1;
            }
        }
    }
    Some(best)
}
