//! The `melkit` command line.
//!
//! Exit status: 0 on success, 1 when a pipeline stage fails, 2 for usage
//! and configuration errors.

pub mod config;
mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use melkit_core::gateway::{Backend, MockSelection};
use melkit_core::kb::Split;
use melkit_core::pipeline::{Ablation, Restrict};
use serde_json::{json, Map, Value};

pub use config::ConfigError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "melkit", version, about = "Multimodal entity linking with LLM augmentation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// TOML configuration file.
    #[arg(long, global = true, env = "MELKIT_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub entities: Option<PathBuf>,
    #[arg(long, global = true)]
    pub mentions: Option<PathBuf>,
    #[arg(long, global = true)]
    pub splits: Option<PathBuf>,
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Base directory for relative image paths in mention records.
    #[arg(long, global = true)]
    pub image_root: Option<PathBuf>,
    /// Backend for all three model endpoints.
    #[arg(long, global = true)]
    pub backend: Option<Backend>,
    /// Selection behaviour of the mock backend.
    #[arg(long, global = true)]
    pub mock_selection: Option<MockSelection>,
    /// Fuzzy candidates kept per mention before the embedding rerank.
    #[arg(long, global = true)]
    pub coarse_n: Option<usize>,
    /// Pipeline variant: none, selection, retrieval, entity-aug, mention-aug,
    /// em-aug, visual or visual-selection.
    #[arg(long, global = true)]
    pub ablate: Option<Ablation>,
    /// Seed for splits and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads, capped by each endpoint's in-flight limit.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate entity and mention files, write canonical copies and split labels.
    Ingest(IngestArgs),
    /// Generate entity summaries with the text model.
    AugmentEntities(AugmentArgs),
    /// Generate mention descriptions with the multimodal model.
    AugmentMentions(AugmentArgs),
    /// Embed entity representations and write the vector index.
    BuildIndex,
    /// Show the candidate set for mentions.
    Retrieve(RetrieveArgs),
    /// Link one mention end to end.
    Link(LinkArgs),
    /// Write instruction-tuning records for the selection stage.
    ExportFinetune(ExportArgs),
    /// Link a split and report Top-k accuracy.
    Evaluate(EvaluateArgs),
    /// Run the whole pipeline on a built-in synthetic dataset with the mock backend.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Source entity file (defaults to the configured entities path).
    #[arg(long)]
    pub from_entities: Option<PathBuf>,
    #[arg(long)]
    pub from_mentions: Option<PathBuf>,
    /// Train/val/test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub ratios: Vec<f64>,
    /// Drop mentions whose gold entity is not in the knowledge base.
    #[arg(long)]
    pub drop_unlinkable: bool,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Keep records that already carry generated text.
    #[arg(long)]
    pub skip_existing: bool,
    /// Text-only mention prompts even when an image is present.
    #[arg(long)]
    pub no_visual: bool,
    /// Augment at most N records.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Output file (defaults to rewriting the input).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_k(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("k must be at least 1".into()),
        Ok(k) => Ok(k),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Candidates per mention.
    #[arg(long, value_parser = parse_k)]
    pub k: Option<usize>,
    #[arg(long)]
    pub restrict: Option<Restrict>,
    /// Only this mention (default: all).
    #[arg(long)]
    pub mention_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct LinkArgs {
    #[arg(long)]
    pub mention_id: String,
    #[arg(long, value_parser = parse_k)]
    pub k: Option<usize>,
    #[arg(long)]
    pub restrict: Option<Restrict>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    All,
    Only(Split),
}

fn parse_split(s: &str) -> Result<SplitArg, String> {
    if s == "all" {
        return Ok(SplitArg::All);
    }
    s.parse::<Split>().map(SplitArg::Only).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, default_value = "train", value_parser = parse_split)]
    pub split: SplitArg,
    /// Sample at most N mentions (seeded by --seed).
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, value_parser = parse_k)]
    pub k: Option<usize>,
    #[arg(long, default_value = "finetune.jsonl")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: SplitArg,
    /// Top-k cutoffs to report.
    #[arg(long, value_delimiter = ',', value_parser = parse_k, default_values_t = [1, 5, 10, 20])]
    pub k: Vec<usize>,
    /// Candidates passed to the selection stage.
    #[arg(long, value_parser = parse_k)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub restrict: Option<Restrict>,
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Working directory for the generated data (default: a temporary one).
    #[arg(long)]
    pub dir: Option<PathBuf>,
    /// Where to write report.json (default: the working directory).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl Cli {
    /// Command-line options shaped like the config tree, holding only the
    /// options that were given.
    pub fn flag_overlay(&self) -> Value {
        let g = &self.global;
        let mut root = Map::new();
        let mut paths = Map::new();
        for (key, v) in [
            ("entities", &g.entities),
            ("mentions", &g.mentions),
            ("splits", &g.splits),
            ("index", &g.index),
            ("cache_dir", &g.cache_dir),
            ("image_root", &g.image_root),
        ] {
            if let Some(p) = v {
                paths.insert(key.into(), json!(p));
            }
        }
        if !paths.is_empty() {
            root.insert("paths".into(), Value::Object(paths));
        }
        let mut gateway = Map::new();
        if let Some(b) = g.backend {
            gateway.insert("backend".into(), json!(b));
        }
        for name in ["llm", "mllm", "embedder"] {
            if !gateway.is_empty() {
                root.insert(name.into(), Value::Object(gateway.clone()));
            }
        }
        if let Some(m) = g.mock_selection {
            let llm = root.entry("llm").or_insert_with(|| json!({}));
            llm["mock_selection"] = json!(m);
        }
        let mut put = |k: &str, v: Value| {
            root.insert(k.into(), v);
        };
        if let Some(n) = g.coarse_n {
            put("coarse_n", json!(n));
        }
        if let Some(a) = g.ablate {
            put("ablation", json!(a));
        }
        if let Some(s) = g.seed {
            put("seed", json!(s));
        }
        if let Some(j) = g.jobs {
            put("jobs", json!(j));
        }
        let (k, restrict) = match &self.command {
            Command::Retrieve(a) => (a.k, a.restrict),
            Command::Link(a) => (a.k, a.restrict),
            Command::ExportFinetune(a) => (a.k, None),
            Command::Evaluate(a) => (a.candidates, a.restrict),
            _ => (None, None),
        };
        if let Some(k) = k {
            put("k", json!(k));
        }
        if let Some(r) = restrict {
            put("restrict", json!(r));
        }
        Value::Object(root)
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let env = env_logger::Env::default().filter_or("MELKIT_LOG", level);
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.global.verbose);
    match commands::dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_DOMAIN
            }
        }
    }
}
