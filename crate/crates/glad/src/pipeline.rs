//! End-to-end orchestration: parse → extract → build-graphs → split →
//! train → eval, with every stage writing its artifact to disk before the
//! next one starts.
//!
//! Stage artifacts live on disk between steps so a run is inspectable and
//! partially re-runnable: a re-run skips any stage whose outputs already
//! exist unless `force` is set (after a config change, pass `force` — the
//! cache check is existence-based, not content-based). Given the same
//! inputs, config, and seed, every artifact comes out byte-identical.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_edges, evaluate_intervals, normal_windows, split_sequences, Report,
};
use crate::fields::rules::{extract_rules, Ruleset};
use crate::fields::ParsedLog;
use crate::graph::{load_snapshots, save_snapshot};
use crate::ingest::{read_logs, window_segment, IngestConfig};
use crate::model::{load_model, save_model, ModelConfig};
use crate::template::{load_templates, save_templates, MinerConfig, TemplateMiner};
use crate::train::{train, TrainConfig};

/// Node-attribute embedding settings: feature-hashed vectors by default,
/// or precomputed vectors loaded from a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Embedding width; must match the model's input width.
    pub d: usize,
    /// Optional JSONL file of precomputed node-text vectors.
    pub vectors: Option<PathBuf>,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            d: 768,
            vectors: None,
        }
    }
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Anomaly prior feeding the no-positives threshold fallback.
    pub anomaly_prior: f64,
    /// Run the edge protocol.
    pub edge: bool,
    /// Run the interval protocol.
    pub interval: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            anomaly_prior: 0.05,
            edge: true,
            interval: true,
        }
    }
}

/// The whole pipeline in one config file. Only `input` and `[train]`
/// (which needs its seed) are mandatory; everything else has defaults.
/// The file round-trips through serialization unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Raw log file the pipeline starts from.
    pub input: PathBuf,
    /// Mined templates artifact (parse output).
    #[serde(default = "default_templates_path")]
    pub templates: PathBuf,
    /// Records resolved to templates (parse output).
    #[serde(default = "default_parsed_path")]
    pub parsed: PathBuf,
    /// Field extraction ruleset; omitted means the built-in rules.
    #[serde(default)]
    pub ruleset: Option<PathBuf>,
    /// Records with extracted mentions (extract output).
    #[serde(default = "default_extracted_path")]
    pub extracted: PathBuf,
    /// Graph snapshot directory (build-graphs output).
    #[serde(default = "default_graphs_path")]
    pub graphs: PathBuf,
    /// Trained model file.
    #[serde(default = "default_model_path")]
    pub model: PathBuf,
    /// Per-epoch training log.
    #[serde(default = "default_train_log_path")]
    pub train_log: PathBuf,
    /// Directory for reports and score lists.
    #[serde(default = "default_reports_path")]
    pub reports: PathBuf,
    /// Tumbling window length in milliseconds.
    #[serde(default = "default_window_ms")]
    pub window_ms: i64,
    #[serde(default)]
    pub ingest: IngestConfig,
    #[serde(default)]
    pub miner: MinerConfig,
    #[serde(default)]
    pub embed: EmbedConfig,
    /// Model architecture; width must agree with `embed.d`.
    #[serde(default, rename = "model_config")]
    pub model_config: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_templates_path() -> PathBuf {
    PathBuf::from("artifacts/templates.json")
}
fn default_parsed_path() -> PathBuf {
    PathBuf::from("artifacts/parsed.jsonl")
}
fn default_extracted_path() -> PathBuf {
    PathBuf::from("artifacts/extracted.jsonl")
}
fn default_graphs_path() -> PathBuf {
    PathBuf::from("artifacts/graphs")
}
fn default_model_path() -> PathBuf {
    PathBuf::from("artifacts/model.bin")
}
fn default_train_log_path() -> PathBuf {
    PathBuf::from("artifacts/train_log.jsonl")
}
fn default_reports_path() -> PathBuf {
    PathBuf::from("artifacts/reports")
}
fn default_window_ms() -> i64 {
    60_000
}

impl PipelineConfig {
    /// Defaults around an input path and a seed.
    pub fn new(input: impl Into<PathBuf>, seed: u64) -> PipelineConfig {
        PipelineConfig {
            input: input.into(),
            templates: default_templates_path(),
            parsed: default_parsed_path(),
            ruleset: None,
            extracted: default_extracted_path(),
            graphs: default_graphs_path(),
            model: default_model_path(),
            train_log: default_train_log_path(),
            reports: default_reports_path(),
            window_ms: default_window_ms(),
            ingest: IngestConfig::default(),
            miner: MinerConfig::default(),
            embed: EmbedConfig::default(),
            model_config: ModelConfig::default(),
            train: TrainConfig::for_seed(seed),
            eval: EvalConfig::default(),
        }
    }

    /// Re-anchors every artifact path under a directory, leaving `input`
    /// and an explicit ruleset alone.
    pub fn with_artifact_dir(mut self, dir: &Path) -> PipelineConfig {
        self.templates = dir.join("templates.json");
        self.parsed = dir.join("parsed.jsonl");
        self.extracted = dir.join("extracted.jsonl");
        self.graphs = dir.join("graphs");
        self.model = dir.join("model.bin");
        self.train_log = dir.join("train_log.jsonl");
        self.reports = dir.join("reports");
        self
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        toml::from_str(&text)
            .map_err(|e| Error::usage(format!("malformed config {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::data(format!("encoding config: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| Error::io(format!("writing config {}", path.display()), e))
    }

    /// Checks value ranges and that every referenced path resolves, before
    /// any stage runs.
    ///
    /// # Errors
    /// [`Error::Usage`] naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if !self.input.is_file() {
            return Err(Error::usage(format!(
                "input {} does not exist",
                self.input.display()
            )));
        }
        if let Some(ruleset) = &self.ruleset {
            if !ruleset.is_file() {
                return Err(Error::usage(format!(
                    "ruleset {} does not exist",
                    ruleset.display()
                )));
            }
        }
        if let Some(vectors) = &self.embed.vectors {
            if !vectors.is_file() {
                return Err(Error::usage(format!(
                    "embedding vectors {} do not exist",
                    vectors.display()
                )));
            }
        }
        if self.window_ms <= 0 {
            return Err(Error::usage("window_ms must be positive"));
        }
        if self.embed.d == 0 {
            return Err(Error::usage("embedding width must be at least 1"));
        }
        if self.embed.d != self.model_config.d_in {
            return Err(Error::usage(format!(
                "embedding width {} must match the model input width {}",
                self.embed.d, self.model_config.d_in
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.anomaly_prior) {
            return Err(Error::usage(format!(
                "anomaly prior must lie in [0, 1], got {}",
                self.eval.anomaly_prior
            )));
        }
        self.train.validate()?;
        Ok(())
    }

    /// The configured ruleset, or the built-in rules when none is named.
    pub fn ruleset(&self) -> Result<Ruleset> {
        match &self.ruleset {
            Some(path) => Ruleset::load(path),
            None => Ok(Ruleset::default_rules()),
        }
    }

    /// The configured embedder: file-backed vectors or feature hashing.
    pub fn embedder(&self) -> Result<Embedder> {
        match &self.embed.vectors {
            Some(path) => Embedder::from_file(path, self.embed.d),
            None => Embedder::hash(self.embed.d),
        }
    }
}

/// What a pipeline run did: which stages executed or were reused, the
/// reports it produced, and any warnings (currently only the threshold
/// fallback).
#[derive(Clone, Debug, Default)]
pub struct PipelineOutcome {
    /// Stage names that actually ran, in order.
    pub ran: Vec<String>,
    /// Stage names skipped because their outputs already existed.
    pub cached: Vec<String>,
    pub reports: Vec<Report>,
    pub warnings: Vec<String>,
}

/// Prefixes an error with the stage it happened in, keeping its class
/// (and exit code) intact.
fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::Usage(m) => Error::Usage(format!("stage {stage}: {m}")),
        Error::Data(m) => Error::Data(format!("stage {stage}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("stage {stage}: {m}")),
        Error::Io { context, source } => Error::Io {
            context: format!("stage {stage}: {context}"),
            source,
        },
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
    }
    Ok(())
}

/// Writes one serializable value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T], what: &str) -> Result<()> {
    ensure_parent(path)?;
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::data(format!("encoding {what}: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::io(format!("writing {what}"), e))?;
    }
    out.flush().map_err(|e| Error::io(format!("flushing {what}"), e))
}

/// Reads one deserializable value per non-empty line, naming the line on
/// failure.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<Vec<T>> {
    let file =
        File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut items = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!(
                "{}: malformed {what} on line {}: {e}",
                path.display(),
                idx + 1
            ))
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Resolves every record to a final template id with converged mining:
/// pass 1 mines (merges can rewrite earlier templates), pass 2 is a
/// read-only lookup assigning stable ids. Writes the template set and the
/// resolved records; returns how many malformed input lines were skipped.
pub fn parse_stage(
    input: &Path,
    ingest: &IngestConfig,
    miner_config: &MinerConfig,
    templates_out: &Path,
    parsed_out: &Path,
) -> Result<usize> {
    let outcome = read_logs(input, ingest)?;
    if outcome.records.is_empty() {
        return Err(Error::data(format!("{} holds no records", input.display())));
    }
    let mut miner = TemplateMiner::new(miner_config.clone());
    for record in &outcome.records {
        miner.parse_message(&record.raw_text)?;
    }
    let parsed: Vec<ParsedLog> = outcome
        .records
        .into_iter()
        .map(|record| {
            let template_id = miner.lookup(&record.raw_text).ok_or_else(|| {
                Error::data(format!("no template for message: {}", record.raw_text))
            })?;
            Ok(ParsedLog {
                record,
                template_id,
                mentions: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    ensure_parent(templates_out)?;
    save_templates(templates_out, &miner.templates())?;
    write_jsonl(parsed_out, &parsed, "parsed log")?;
    Ok(outcome.rejected)
}

/// Runs rule-based field extraction over every parsed record.
pub fn extract_stage(parsed: &Path, ruleset: &Ruleset, extracted_out: &Path) -> Result<()> {
    let mut logs: Vec<ParsedLog> = read_jsonl(parsed, "parsed log")?;
    for log in &mut logs {
        log.mentions = extract_rules(&log.record.raw_text, ruleset);
    }
    write_jsonl(extracted_out, &logs, "extracted log")
}

/// Segments records into windows and builds one attributed graph snapshot
/// per window.
pub fn build_graphs_stage(
    extracted: &Path,
    templates: &Path,
    window_ms: i64,
    embedder: &Embedder,
    graphs_out: &Path,
) -> Result<()> {
    let parsed: Vec<ParsedLog> = read_jsonl(extracted, "extracted log")?;
    let template_map: HashMap<String, String> = load_templates(templates)?
        .iter()
        .map(|t| (t.template_id.clone(), t.text()))
        .collect();
    let records: Vec<_> = parsed.iter().map(|p| p.record.clone()).collect();
    let windows = window_segment(&records, window_ms)?;

    std::fs::create_dir_all(graphs_out)
        .map_err(|e| Error::io(format!("creating {}", graphs_out.display()), e))?;
    // Windows partition the chronologically sorted records, and the
    // extracted file is already in that order, so a cursor aligns them.
    let mut cursor = 0usize;
    for window in &windows {
        let slice = &parsed[cursor..cursor + window.records.len()];
        cursor += window.records.len();
        let snapshot = crate::graph::build_snapshot(window, slice, &template_map, embedder)?;
        save_snapshot(graphs_out, &snapshot)?;
    }
    Ok(())
}

/// Splits chronologically, trains on the normal training windows, saves
/// the model and the per-epoch log.
pub fn train_stage(
    graphs: &Path,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    model_out: &Path,
    log_out: &Path,
) -> Result<()> {
    let snapshots = load_snapshots(graphs)?;
    let split = split_sequences(&snapshots)?;
    let train_windows = normal_windows(split.train);
    ensure_parent(model_out)?;
    ensure_parent(log_out)?;
    let outcome = train(
        &train_windows,
        Some(split.val),
        model_config,
        train_config,
        Some(log_out),
    )?;
    save_model(model_out, &outcome.params)
}

/// Scores the held-out splits and writes reports plus score lists.
/// Returns the reports and any warnings (threshold fallback).
pub fn eval_stage(
    model: &Path,
    graphs: &Path,
    eval: &EvalConfig,
    reports_dir: &Path,
) -> Result<(Vec<Report>, Vec<String>)> {
    let params = load_model(model)?;
    let snapshots = load_snapshots(graphs)?;
    let split = split_sequences(&snapshots)?;
    std::fs::create_dir_all(reports_dir)
        .map_err(|e| Error::io(format!("creating {}", reports_dir.display()), e))?;

    let mut reports = Vec::new();
    let mut warnings = Vec::new();
    if eval.edge {
        let outcome = evaluate_edges(&params, split.val, split.test, eval.anomaly_prior)?;
        if outcome.threshold_fallback {
            warnings.push(format!(
                "validation has no anomalous edges; edge threshold fell back to the {} percentile of validation scores",
                1.0 - eval.anomaly_prior
            ));
        }
        outcome.report.save(&reports_dir.join("edge_report.json"))?;
        write_jsonl(
            &reports_dir.join("edge_scores.jsonl"),
            &outcome.scores,
            "edge score",
        )?;
        reports.push(outcome.report);
    }
    if eval.interval {
        let outcome = evaluate_intervals(&params, split.test)?;
        outcome
            .report
            .save(&reports_dir.join("interval_report.json"))?;
        write_jsonl(
            &reports_dir.join("interval_scores.jsonl"),
            &outcome.scores,
            "interval score",
        )?;
        reports.push(outcome.report);
    }
    Ok((reports, warnings))
}

fn outputs_exist(paths: &[&Path]) -> bool {
    paths.iter().all(|p| p.exists())
}

/// Runs the whole pipeline. Each stage is skipped when its outputs already
/// exist, unless `force` reruns everything; evaluation reports are
/// reloaded rather than recomputed when cached.
///
/// # Errors
/// Any stage error, prefixed with the stage name; config problems surface
/// before any stage runs.
pub fn run_pipeline(config: &PipelineConfig, force: bool) -> Result<PipelineOutcome> {
    config.validate()?;
    let mut outcome = PipelineOutcome::default();

    let run = |name: &str,
                   cached: bool,
                   outcome: &mut PipelineOutcome,
                   f: &mut dyn FnMut() -> Result<()>|
     -> Result<()> {
        if cached && !force {
            outcome.cached.push(name.to_string());
            return Ok(());
        }
        f().map_err(|e| stage_error(name, e))?;
        outcome.ran.push(name.to_string());
        Ok(())
    };

    run(
        "parse",
        outputs_exist(&[&config.templates, &config.parsed]),
        &mut outcome,
        &mut || {
            parse_stage(
                &config.input,
                &config.ingest,
                &config.miner,
                &config.templates,
                &config.parsed,
            )
            .map(|_| ())
        },
    )?;
    run(
        "extract",
        outputs_exist(&[&config.extracted]),
        &mut outcome,
        &mut || extract_stage(&config.parsed, &config.ruleset()?, &config.extracted),
    )?;
    run(
        "build-graphs",
        config.graphs.join("window_00000.json").exists(),
        &mut outcome,
        &mut || {
            build_graphs_stage(
                &config.extracted,
                &config.templates,
                config.window_ms,
                &config.embedder()?,
                &config.graphs,
            )
        },
    )?;
    run(
        "train",
        outputs_exist(&[&config.model, &config.train_log]),
        &mut outcome,
        &mut || {
            train_stage(
                &config.graphs,
                &config.model_config,
                &config.train,
                &config.model,
                &config.train_log,
            )
        },
    )?;

    let edge_report = config.reports.join("edge_report.json");
    let interval_report = config.reports.join("interval_report.json");
    let mut expected: Vec<&Path> = Vec::new();
    if config.eval.edge {
        expected.push(&edge_report);
    }
    if config.eval.interval {
        expected.push(&interval_report);
    }
    if !expected.is_empty() {
        if outputs_exist(&expected) && !force {
            outcome.cached.push("eval".to_string());
            for path in expected {
                outcome.reports.push(Report::load(path)?);
            }
        } else {
            let (reports, warnings) =
                eval_stage(&config.model, &config.graphs, &config.eval, &config.reports)
                    .map_err(|e| stage_error("eval", e))?;
            outcome.ran.push("eval".to_string());
            outcome.reports = reports;
            outcome.warnings = warnings;
        }
    }
    Ok(outcome)
}
