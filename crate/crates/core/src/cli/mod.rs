//! The `dynoframe` command line.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 internal error.
//! Every failure prints one JSON line such as
//! `{"error":"missing-flag","exit":1,"flag":"--catalog"}` on stderr before the
//! human-readable message. Each run also emits a manifest (inputs with
//! sha256, outputs, seed, version, timing) to `--manifest` or, failing that,
//! as a single `{"manifest":...}` line on stderr.

mod commands;
pub mod pipeline;

use std::ffi::OsString;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::io::{self, IoError};
use crate::par;

#[derive(Debug, Parser)]
#[command(name = "dynoframe", version, about = "Semantic-frame structured text, augmentation checks and scene-understanding metrics")]
pub struct Cli {
    /// Worker threads for per-item work (0 = all cores).
    #[arg(long, global = true, env = "DYNOFRAME_JOBS", default_value_t = 0)]
    pub jobs: usize,
    /// Write the run manifest here instead of stderr.
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse structured strings (one per line) into frames.
    Parse(ParseArgs),
    /// Serialize frames (one JSON object per line) into structured strings.
    Serialize(SerializeArgs),
    /// Situation recognition metrics.
    EvalSir(EvalSituationArgs),
    /// Grounded situation recognition metrics.
    EvalGsr(EvalSituationArgs),
    /// HOI detection mAP over full / rare / non-rare classes.
    EvalHoi(EvalHoiArgs),
    /// Human-human interaction caption scores.
    EvalHhi(EvalHhiArgs),
    /// Fit a linear verb probe on embeddings.
    Probe(ProbeArgs),
    /// Pearson and Spearman correlation between two CSV columns.
    Correlate(CorrelateArgs),
    /// Train the demo decoder on frames and embeddings.
    DemoTrain(DemoTrainArgs),
    /// Generate structured strings with a trained decoder.
    DemoGenerate(DemoGenerateArgs),
    /// Run the attention augmentation invariant checks.
    AugmentCheck(AugmentCheckArgs),
    /// Write a synthetic world to JSONL files.
    GenWorld(GenWorldArgs),
    /// gen-world, demo-train, demo-generate, tolerant parse and eval-sir in one go.
    Pipeline(PipelineArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Parse(_) => "parse",
            Command::Serialize(_) => "serialize",
            Command::EvalSir(_) => "eval-sir",
            Command::EvalGsr(_) => "eval-gsr",
            Command::EvalHoi(_) => "eval-hoi",
            Command::EvalHhi(_) => "eval-hhi",
            Command::Probe(_) => "probe",
            Command::Correlate(_) => "correlate",
            Command::DemoTrain(_) => "demo-train",
            Command::DemoGenerate(_) => "demo-generate",
            Command::AugmentCheck(_) => "augment-check",
            Command::GenWorld(_) => "gen-world",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

#[derive(Debug, Args)]
pub struct ReportOut {
    /// Write the JSON report here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Write per-item / per-class rows as CSV here.
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    #[arg(long, value_name = "PATH")]
    pub lexicon: PathBuf,
    #[arg(long, default_value = "strict", value_parser = ["strict", "tolerant"])]
    pub mode: String,
    /// Input file (stdin if absent).
    #[arg(long = "in", value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Input is JSONL `{id, text}` records instead of plain lines.
    #[arg(long)]
    pub jsonl: bool,
    /// Emit SiR prediction records; unparseable lines become empty predictions.
    #[arg(long)]
    pub as_sir_pred: bool,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SerializeArgs {
    #[arg(long, value_name = "PATH")]
    pub lexicon: PathBuf,
    /// JSON frames, one per line (stdin if absent).
    #[arg(long = "in", value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalSituationArgs {
    #[arg(long, value_name = "PATH")]
    pub gt: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub pred: PathBuf,
    #[arg(long, default_value = "top1", value_parser = ["top1", "top5", "gtverb"])]
    pub scenario: String,
    #[arg(long, default_value = "per-role", value_parser = ["any", "per-role"])]
    pub value_mode: String,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Args)]
pub struct EvalHoiArgs {
    #[arg(long, value_name = "PATH")]
    pub gt: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub det: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub catalog: PathBuf,
    /// Count classes without ground truth as AP 0 instead of leaving them out.
    #[arg(long)]
    pub zero_gt_as_zero: bool,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Args)]
pub struct EvalHhiArgs {
    #[arg(long, value_name = "PATH")]
    pub gt: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub pred: PathBuf,
    /// exact | f1 | verbsim | exec:<program>
    #[arg(long, default_value = "exact")]
    pub scorer: String,
    /// Lexicon for the verbsim scorer.
    #[arg(long, value_name = "PATH")]
    pub lexicon: Option<PathBuf>,
    /// Verb embeddings (JSON object verb -> vector) for the verbsim scorer.
    #[arg(long, value_name = "PATH")]
    pub verb_embeddings: Option<PathBuf>,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_name = "PATH")]
    pub embeddings: PathBuf,
    /// train,val,test ratios
    #[arg(long, default_value = "0.7,0.15,0.15")]
    pub split: String,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// CSV file with a header row.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long)]
    pub x: String,
    #[arg(long)]
    pub y: String,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    /// LoRA rank; 0 trains every weight directly.
    #[arg(long, default_value_t = 0)]
    pub lora_rank: usize,
    #[arg(long, default_value_t = 256.0)]
    pub lora_alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lora_dropout: f64,
}

impl TrainFlags {
    pub fn to_config(&self, seed: u64) -> crate::toylm::TrainConfig {
        crate::toylm::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            hidden: self.hidden,
            heads: self.heads,
            lora: (self.lora_rank > 0).then_some(crate::toylm::LoraSettings {
                rank: self.lora_rank,
                alpha: self.lora_alpha,
                dropout: self.lora_dropout,
            }),
            seed,
            ..crate::toylm::TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct DemoTrainArgs {
    /// Frame records (as written by gen-world).
    #[arg(long, value_name = "PATH")]
    pub frames: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub embeddings: PathBuf,
    /// Lexicon whose gerunds and roles seed the vocabulary.
    #[arg(long, value_name = "PATH")]
    pub lexicon: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub model_out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Write the loss trace as JSON here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoGenerateArgs {
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    /// Prompt each item with `VERB <gerund>` of its ground-truth verb, read
    /// from these frame records (needs --lexicon).
    #[arg(long, value_name = "PATH", requires = "lexicon")]
    pub gt_verb_from: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub lexicon: Option<PathBuf>,
    /// Emit bare strings, one per line, instead of `{id, text}` records.
    #[arg(long)]
    pub plain: bool,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentCheckArgs {
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 49)]
    pub kb: usize,
    #[arg(long, default_value_t = 32)]
    pub kv: usize,
    #[arg(long, default_value_t = 256)]
    pub features: usize,
    #[arg(long, default_value_t = 768)]
    pub vl_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value = "augment", value_parser = ["augment", "replace"])]
    pub mode: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    /// World spec JSON; the built-in demo world if absent.
    #[arg(long, value_name = "PATH")]
    pub spec: Option<PathBuf>,
    /// Override the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Output files are named `<prefix>frames.jsonl` and so on.
    #[arg(long, value_name = "PREFIX")]
    pub out_prefix: String,
    /// Also write the effective world spec as `<prefix>world.json`.
    #[arg(long)]
    pub write_spec: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// World spec JSON; the built-in demo world if absent.
    #[arg(long, value_name = "PATH")]
    pub world: Option<PathBuf>,
    /// World and training seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub train_items: usize,
    #[arg(long, default_value_t = 200)]
    pub test_items: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value = "per-role", value_parser = ["any", "per-role"])]
    pub value_mode: String,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Keep intermediate files in this directory.
    #[arg(long, value_name = "DIR")]
    pub workdir: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

/// A failure with its machine-readable code and exit status.
#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub exit: i32,
    pub message: String,
    pub extra: Map<String, Value>,
}

impl CliError {
    pub fn validation(code: &str, message: impl Into<String>) -> Self {
        CliError { code: code.into(), exit: 1, message: message.into(), extra: Map::new() }
    }

    pub fn internal(code: &str, message: impl Into<String>) -> Self {
        CliError { code: code.into(), exit: 2, message: message.into(), extra: Map::new() }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.extra.insert(key.into(), value.into());
        self
    }

    fn json_line(&self) -> String {
        let mut obj = Map::new();
        obj.insert("error".into(), self.code.clone().into());
        obj.insert("exit".into(), self.exit.into());
        obj.extend(self.extra.clone());
        Value::Object(obj).to_string()
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::validation(e.code(), e.to_string())
    }
}

impl From<crate::metrics::EvalError> for CliError {
    fn from(e: crate::metrics::EvalError) -> Self {
        CliError::validation(e.code(), e.to_string())
    }
}

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    args: Vec<String>,
    seed: Option<u64>,
    jobs: usize,
    parallel: bool,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    exit: i32,
    started_unix_ms: u128,
    elapsed_ms: u128,
}

/// Collects manifest entries while a command runs.
pub struct RunContext {
    seed: Option<u64>,
    inputs: Vec<FileHash>,
    outputs: Vec<PathBuf>,
}

impl RunContext {
    fn new() -> Self {
        RunContext { seed: None, inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    /// Checks that `path` is a readable file and records its hash.
    pub fn input(&mut self, path: &Path, flag: &str) -> Result<PathBuf, CliError> {
        let sha = io::sha256_file(path).map_err(|e| {
            CliError::validation("missing-input", format!("{flag}: {e}")).with("flag", flag).with("path", path.display().to_string())
        })?;
        self.inputs.push(FileHash { path: path.display().to_string(), sha256: sha });
        Ok(path.to_path_buf())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `text` to `path`, recording it as an output.
    pub fn write(&mut self, path: &Path, text: &str) -> Result<(), CliError> {
        io::write_text(path, text).map_err(|e| CliError::internal("write-failed", e.to_string()))?;
        self.output(path);
        Ok(())
    }

    /// Writes to `path` if given, else stdout.
    pub fn emit(&mut self, path: Option<&Path>, text: &str) -> Result<(), CliError> {
        match path {
            Some(p) => self.write(p, text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn clap_error(e: clap::Error) -> i32 {
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
            let _ = e.print();
            0
        }
        kind => {
            let err = if kind == ErrorKind::MissingRequiredArgument {
                let flag = match e.get(ContextKind::InvalidArg) {
                    Some(ContextValue::Strings(v)) => v.first().cloned().unwrap_or_default(),
                    Some(ContextValue::String(s)) => s.clone(),
                    _ => String::new(),
                };
                let flag = flag.split_whitespace().next().unwrap_or("").to_string();
                CliError::validation("missing-flag", "").with("flag", flag)
            } else {
                let code = match kind {
                    ErrorKind::InvalidSubcommand => "unknown-subcommand",
                    ErrorKind::UnknownArgument => "unknown-flag",
                    ErrorKind::InvalidValue | ErrorKind::ValueValidation => "invalid-value",
                    _ => "usage",
                };
                CliError::validation(code, "")
            };
            eprintln!("{}", err.json_line());
            let _ = e.print();
            1
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => return clap_error(e),
    };
    let Some(command) = cli.command else {
        eprintln!("{}", CliError::validation("usage", "").json_line());
        let mut cmd = <Cli as clap::CommandFactory>::command();
        eprintln!("{}", cmd.render_help());
        return 1;
    };

    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let clock = Instant::now();
    let name = command.name();
    let mut ctx = RunContext::new();
    let outcome = par::with_jobs(cli.jobs, || catch_unwind(AssertUnwindSafe(|| commands::dispatch(command, &mut ctx))));
    let result = match outcome {
        Ok(r) => r,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(CliError::internal("internal", msg))
        }
    };
    let exit = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.json_line());
            eprintln!("dynoframe {name}: {}", e.message);
            e.exit
        }
    };

    let outputs = ctx
        .outputs
        .iter()
        .map(|p| FileHash { path: p.display().to_string(), sha256: io::sha256_file(p).unwrap_or_default() })
        .collect();
    let manifest = Manifest {
        tool: "dynoframe",
        version: env!("CARGO_PKG_VERSION"),
        command: name.to_string(),
        args: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        seed: ctx.seed,
        jobs: cli.jobs,
        parallel: par::is_parallel(),
        inputs: ctx.inputs,
        outputs,
        exit,
        started_unix_ms: started,
        elapsed_ms: clock.elapsed().as_millis(),
    };
    match &cli.manifest {
        Some(path) => {
            let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            text.push('\n');
            if let Err(e) = io::write_text(path, &text) {
                eprintln!("{}", CliError::internal("write-failed", "").json_line());
                eprintln!("manifest: {e}");
                return 2;
            }
        }
        None => eprintln!("{}", json!({ "manifest": manifest })),
    }
    exit
}
