//! Command-line entry point: each pipeline stage as a subcommand, plus
//! synthetic corpus generation and the end-to-end `pipeline` command.
//!
//! Every subcommand is deterministic: the same inputs, config, and seed
//! produce byte-identical outputs. Seeds are never defaulted from the
//! clock — where one is needed it is a required flag or config key.
//! Exit codes: 0 success, 2 usage, 3 data, 4 numeric.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use glad::embed::Embedder;
use glad::error::{Error, Result};
use glad::eval::interval_scores;
use glad::fields::rules::Ruleset;
use glad::fields::scorer::{extract_with_scorer, TableScorer};
use glad::fields::{generate_training_pairs, ParsedLog, Polarity, PromptTemplate};
use glad::graph::load_snapshots;
use glad::ingest::{IngestConfig, LogFormat};
use glad::model::{edge_score, load_model, temporal_encode, ModelConfig};
use glad::pipeline::{
    build_graphs_stage, eval_stage, extract_stage, parse_stage, read_jsonl, run_pipeline,
    train_stage, write_jsonl, EvalConfig, PipelineConfig,
};
use glad::synth::{generate, write_jsonl as write_synth_jsonl, SynthConfig};
use glad::template::MinerConfig;
use glad::train::TrainConfig;

#[derive(Parser)]
#[command(
    name = "glad",
    version,
    about = "Log anomaly detection over per-window event/field graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine event templates and resolve every record to one
    Parse(ParseArgs),
    /// Extract typed field mentions from parsed records
    Extract(ExtractArgs),
    /// Export prompt training pairs for fine-tuning an external scorer
    GenPrompts(GenPromptsArgs),
    /// Build one attributed graph snapshot per time window
    BuildGraphs(BuildGraphsArgs),
    /// Train the one-class model on the normal training windows
    Train(TrainArgs),
    /// Score every window's edges or intervals with a trained model
    Score(ScoreArgs),
    /// Evaluate a trained model on the chronological split
    Eval(EvalArgs),
    /// Generate a labeled synthetic coordinator/worker corpus
    Synth(SynthArgs),
    /// Run parse through eval from one config file
    Pipeline(PipelineArgs),
    /// Configuration helpers
    Config(ConfigArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Jsonl,
    Text,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    /// Regex rules per field type
    Rules,
    /// Prompt scoring against a score-table file
    Scorer,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PromptArg {
    /// "<span> is a/an <type> entity"
    P1,
    /// "<type> = <span>"
    P2,
}

impl From<PromptArg> for PromptTemplate {
    fn from(arg: PromptArg) -> PromptTemplate {
        match arg {
            PromptArg::P1 => PromptTemplate::P1,
            PromptArg::P2 => PromptTemplate::P2,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    /// Per-edge anomaly scores
    Edge,
    /// Per-window distances from the hypersphere center
    Interval,
}

#[derive(Args)]
struct ParseArgs {
    /// Raw log file
    #[arg(long)]
    input: PathBuf,
    /// Where to write the mined templates
    #[arg(long, default_value = "templates.json")]
    templates_out: PathBuf,
    /// Where to write template-resolved records
    #[arg(long, default_value = "parsed.jsonl")]
    parsed_out: PathBuf,
    /// Input format
    #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
    format: FormatArg,
    /// Abort on the first malformed line instead of skipping it
    #[arg(long)]
    strict: bool,
    /// Regex with named groups ts, msg and optional label, src (text format)
    #[arg(long)]
    text_pattern: Option<String>,
    /// Template-tree depth
    #[arg(long, default_value_t = MinerConfig::default().depth)]
    depth: usize,
    /// Token similarity threshold for joining an existing template
    #[arg(long, default_value_t = MinerConfig::default().sim_threshold)]
    sim_threshold: f64,
}

#[derive(Args)]
struct ExtractArgs {
    /// Parsed records (output of `glad parse`)
    #[arg(long)]
    input: PathBuf,
    /// Where to write records with extracted mentions
    #[arg(long, default_value = "extracted.jsonl")]
    out: PathBuf,
    /// Extraction backend
    #[arg(long, value_enum, default_value_t = BackendArg::Rules)]
    backend: BackendArg,
    /// Ruleset JSON for the rules backend; omitted means the built-in rules
    #[arg(long)]
    ruleset: Option<PathBuf>,
    /// Prompt-score table JSON; required by the scorer backend
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Prompt family for the scorer backend
    #[arg(long, value_enum, default_value_t = PromptArg::P1)]
    prompt: PromptArg,
}

#[derive(Args)]
struct GenPromptsArgs {
    /// Extracted records whose mentions serve as gold spans
    #[arg(long)]
    input: PathBuf,
    /// Where to write the prompt pairs
    #[arg(long, default_value = "prompts.jsonl")]
    out: PathBuf,
    /// Negative-sampling seed
    #[arg(long)]
    seed: u64,
    /// Prompt family
    #[arg(long, value_enum, default_value_t = PromptArg::P1)]
    prompt: PromptArg,
    /// Negative pairs per positive pair
    #[arg(long, default_value_t = 3)]
    ratio: usize,
}

#[derive(Args)]
struct BuildGraphsArgs {
    /// Extracted records (output of `glad extract`)
    #[arg(long)]
    parsed: PathBuf,
    /// Mined templates (output of `glad parse`)
    #[arg(long, default_value = "templates.json")]
    templates: PathBuf,
    /// Directory for the graph snapshots
    #[arg(long, default_value = "graphs")]
    out: PathBuf,
    /// Tumbling window length in milliseconds
    #[arg(long, default_value_t = 60_000)]
    window_ms: i64,
    /// Node attribute embedding width
    #[arg(long, default_value_t = 768)]
    dim: usize,
    /// Precomputed node-text vectors (JSONL); omitted means feature hashing
    #[arg(long)]
    vectors: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of graph snapshots
    #[arg(long)]
    graphs: PathBuf,
    /// Training config: a [train] table (seed required) plus an optional
    /// [model] table
    #[arg(long)]
    config: PathBuf,
    /// Where to write the trained model
    #[arg(long, default_value = "model.bin")]
    out: PathBuf,
    /// Where to write per-epoch metrics
    #[arg(long, default_value = "train_log.jsonl")]
    log: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Directory of graph snapshots; every window is scored
    #[arg(long)]
    graphs: PathBuf,
    /// What to score
    #[arg(long, value_enum)]
    protocol: ProtocolArg,
    /// Where to write the score lines
    #[arg(long, default_value = "scores.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Directory of graph snapshots; split 6:1:3 chronologically
    #[arg(long)]
    graphs: PathBuf,
    /// Protocol to run; omitted runs both
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Expected anomaly fraction, used only when validation has no
    /// anomalous edges
    #[arg(long, default_value_t = 0.05)]
    prior: f64,
    /// Directory for reports and score lists
    #[arg(long, default_value = "reports")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of windows to generate
    #[arg(long)]
    windows: usize,
    /// Fraction of windows carrying an injected anomaly
    #[arg(long, default_value_t = 0.05)]
    rate: f64,
    /// Generator seed
    #[arg(long)]
    seed: u64,
    /// Where to write the corpus
    #[arg(long)]
    out: PathBuf,
    /// Worker pool size
    #[arg(long, default_value_t = 3)]
    workers: usize,
    /// Maximum dispatch requests per worker per window
    #[arg(long, default_value_t = 3)]
    max_requests: u64,
    /// Window length in milliseconds
    #[arg(long, default_value_t = 60_000)]
    window_ms: i64,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline config file
    #[arg(long)]
    config: PathBuf,
    /// Rerun every stage even when its outputs already exist
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    #[command(subcommand)]
    action: ConfigAction,
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Check a pipeline config file: schema, value ranges, referenced paths
    Validate {
        /// Pipeline config file
        #[arg(long)]
        config: PathBuf,
    },
}

/// The `glad train` config file: the `[train]` and `[model]` sections of
/// the pipeline schema, standalone.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    model: ModelConfig,
    train: TrainConfig,
}

/// One exported prompt pair.
#[derive(Serialize)]
struct PromptRow<'a> {
    message: &'a str,
    prompt: &'a str,
    polarity: Polarity,
}

/// One scored edge; ground truth rides along when the snapshots carry it.
#[derive(Serialize)]
struct EdgeScoreRow {
    t: usize,
    i: usize,
    j: usize,
    node_i: String,
    node_j: String,
    w: u64,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    anomalous: Option<bool>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("glad: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Prints a line to stdout, shrugging off a closed pipe so that
/// `glad ... | head` ends quietly instead of panicking.
fn say(text: impl AsRef<str>) {
    use std::io::Write;
    let mut out = std::io::stdout();
    let _ = out.write_all(text.as_ref().as_bytes());
    let _ = out.write_all(b"\n");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Parse(args) => cmd_parse(args),
        Command::Extract(args) => cmd_extract(args),
        Command::GenPrompts(args) => cmd_gen_prompts(args),
        Command::BuildGraphs(args) => cmd_build_graphs(args),
        Command::Train(args) => cmd_train(args),
        Command::Score(args) => cmd_score(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Pipeline(args) => cmd_pipeline(args),
        Command::Config(args) => match args.action {
            ConfigAction::Validate { config } => cmd_config_validate(config),
        },
    }
}

fn cmd_parse(args: ParseArgs) -> Result<()> {
    let ingest = IngestConfig {
        format: match args.format {
            FormatArg::Jsonl => LogFormat::Jsonl,
            FormatArg::Text => LogFormat::Text,
        },
        strict: args.strict,
        text_pattern: args.text_pattern,
        ..IngestConfig::default()
    };
    let miner = MinerConfig {
        depth: args.depth,
        sim_threshold: args.sim_threshold,
        ..MinerConfig::default()
    };
    let rejected = parse_stage(
        &args.input,
        &ingest,
        &miner,
        &args.templates_out,
        &args.parsed_out,
    )?;
    if rejected > 0 {
        eprintln!("warning: skipped {rejected} malformed input lines");
    }
    say(format!(
        "parse: templates -> {}, records -> {}",
        args.templates_out.display(),
        args.parsed_out.display()
    ));
    Ok(())
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    match args.backend {
        BackendArg::Rules => {
            let ruleset = match &args.ruleset {
                Some(path) => Ruleset::load(path)?,
                None => Ruleset::default_rules(),
            };
            extract_stage(&args.input, &ruleset, &args.out)?;
        }
        BackendArg::Scorer => {
            let scores = args.scores.as_ref().ok_or_else(|| {
                Error::usage("the scorer backend needs --scores with a score-table file")
            })?;
            let scorer = TableScorer::load(scores)?;
            let mut logs: Vec<ParsedLog> = read_jsonl(&args.input, "parsed log")?;
            for log in &mut logs {
                log.mentions =
                    extract_with_scorer(&log.record.raw_text, &scorer, args.prompt.into())?;
            }
            write_jsonl(&args.out, &logs, "extracted log")?;
        }
    }
    say(format!("extract: records -> {}", args.out.display()));
    Ok(())
}

fn cmd_gen_prompts(args: GenPromptsArgs) -> Result<()> {
    let logs: Vec<ParsedLog> = read_jsonl(&args.input, "extracted log")?;
    let mut pairs = Vec::new();
    // One sub-seed per record keeps negative sampling independent across
    // messages while staying reproducible.
    for (idx, log) in logs.iter().enumerate() {
        pairs.extend(generate_training_pairs(
            &log.record.raw_text,
            &log.mentions,
            args.prompt.into(),
            args.ratio,
            args.seed.wrapping_add(idx as u64),
        )?);
    }
    let rows: Vec<PromptRow> = pairs
        .iter()
        .map(|p| PromptRow {
            message: &p.message,
            prompt: &p.prompt,
            polarity: p.polarity,
        })
        .collect();
    write_jsonl(&args.out, &rows, "prompt pair")?;
    say(format!("gen-prompts: {} pairs -> {}", rows.len(), args.out.display()));
    Ok(())
}

fn cmd_build_graphs(args: BuildGraphsArgs) -> Result<()> {
    let embedder = match &args.vectors {
        Some(path) => Embedder::from_file(path, args.dim)?,
        None => Embedder::hash(args.dim)?,
    };
    build_graphs_stage(
        &args.parsed,
        &args.templates,
        args.window_ms,
        &embedder,
        &args.out,
    )?;
    say(format!("build-graphs: snapshots -> {}", args.out.display()));
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::io(format!("reading config {}", args.config.display()), e))?;
    let file: TrainFile = toml::from_str(&text)
        .map_err(|e| Error::usage(format!("malformed config {}: {e}", args.config.display())))?;
    train_stage(&args.graphs, &file.model, &file.train, &args.out, &args.log)?;
    say(format!(
        "train: model -> {}, epochs -> {}",
        args.out.display(),
        args.log.display()
    ));
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let params = load_model(&args.model)?;
    let snapshots = load_snapshots(&args.graphs)?;
    match args.protocol {
        ProtocolArg::Edge => {
            let hs = temporal_encode(&snapshots, &params)?;
            let mut rows = Vec::new();
            for (snap, h) in snapshots.iter().zip(&hs) {
                for (idx, edge) in snap.edges.iter().enumerate() {
                    let score =
                        edge_score(h, *edge, &params.w1, &params.w2, params.config.mu)?;
                    rows.push(EdgeScoreRow {
                        t: snap.t,
                        i: edge.i(),
                        j: edge.j(),
                        node_i: snap.nodes[edge.i()].text.clone(),
                        node_j: snap.nodes[edge.j()].text.clone(),
                        w: edge.weight(),
                        score,
                        anomalous: snap.edge_labels.as_ref().map(|labels| {
                            labels[idx] == glad::graph::EdgeLabel::Anomalous
                        }),
                    });
                }
            }
            write_jsonl(&args.out, &rows, "edge score")?;
            say(format!("score: {} edges -> {}", rows.len(), args.out.display()));
        }
        ProtocolArg::Interval => {
            let rows = interval_scores(&params, &snapshots)?;
            write_jsonl(&args.out, &rows, "interval score")?;
            say(format!("score: {} windows -> {}", rows.len(), args.out.display()));
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let eval = EvalConfig {
        anomaly_prior: args.prior,
        edge: !matches!(args.protocol, Some(ProtocolArg::Interval)),
        interval: !matches!(args.protocol, Some(ProtocolArg::Edge)),
    };
    let (reports, warnings) = eval_stage(&args.model, &args.graphs, &eval, &args.out)?;
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }
    for report in &reports {
        say(report.text_table().trim_end());
    }
    say(format!("eval: reports -> {}", args.out.display()));
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        windows: args.windows,
        rate: args.rate,
        seed: args.seed,
        workers: args.workers,
        max_requests: args.max_requests,
        window_ms: args.window_ms,
    };
    let records = generate(&config)?;
    write_synth_jsonl(&args.out, &records)?;
    say(format!(
        "synth: {} windows ({} anomalous), {} records -> {}",
        config.windows,
        config.anomalous_window_count(),
        records.len(),
        args.out.display()
    ));
    Ok(())
}

fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    let config = PipelineConfig::load(&args.config)?;
    let outcome = run_pipeline(&config, args.force)?;
    for stage in &outcome.ran {
        say(format!("stage {stage}: ran"));
    }
    for stage in &outcome.cached {
        say(format!("stage {stage}: cached"));
    }
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    for report in &outcome.reports {
        say(report.text_table().trim_end());
    }
    say(format!("pipeline: reports -> {}", config.reports.display()));
    Ok(())
}

fn cmd_config_validate(path: PathBuf) -> Result<()> {
    let config = PipelineConfig::load(&path)?;
    config.validate()?;
    say(format!("config ok: {}", path.display()));
    Ok(())
}
