use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use melkit_core::augment::{self, AugmentOptions, BatchStats};
use melkit_core::cache::AugmentCache;
use melkit_core::eval::evaluate;
use melkit_core::gateway::{ModelGateway, MockSelection};
use melkit_core::kb::{self, Dataset, Mention};
use melkit_core::pipeline::{Gateways, Pipeline, PipelineConfig};
use melkit_core::retrieval::build_index;
use melkit_core::synthetic;

use crate::config::{self, ConfigError};
use crate::{AugmentArgs, Cli, Command, DemoArgs, EvaluateArgs, ExportArgs, IngestArgs, LinkArgs, RetrieveArgs, SplitArg};

pub(crate) fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::Demo(args) = &cli.command {
        return demo(cli, args);
    }
    let config = config::resolve(cli.global.config.as_deref(), std::env::vars(), &cli.flag_overlay())?;
    log::debug!("config fingerprint {}", config.fingerprint());
    match &cli.command {
        Command::Ingest(a) => ingest(&config, a),
        Command::AugmentEntities(a) => augment_entities(&config, a),
        Command::AugmentMentions(a) => augment_mentions(&config, a),
        Command::BuildIndex => build(&config),
        Command::Retrieve(a) => retrieve(&config, a),
        Command::Link(a) => link(&config, a),
        Command::ExportFinetune(a) => export(&config, a),
        Command::Evaluate(a) => eval(&config, a),
        Command::Demo(_) => unreachable!(),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} file {} does not exist", path.display());
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_dataset(config: &PipelineConfig) -> Result<Dataset> {
    let p = &config.paths;
    require_file(&p.entities, "entities")?;
    require_file(&p.mentions, "mentions")?;
    let mut data = Dataset::new(kb::load_entities(&p.entities)?, kb::load_mentions(&p.mentions)?);
    if p.splits.is_file() {
        data = data.with_split_labels(kb::load_split_labels(&p.splits)?)?;
    }
    Ok(data)
}

fn select<'a>(data: &'a Dataset, split: SplitArg, config: &PipelineConfig) -> Result<Vec<&'a Mention>> {
    match split {
        SplitArg::All => Ok(data.mentions.iter().collect()),
        SplitArg::Only(s) => {
            if data.split_labels.is_none() {
                bail!(
                    "no split labels at {}; run `melkit ingest` first or pass --split all",
                    config.paths.splits.display()
                );
            }
            Ok(data.mentions_in(Some(s)))
        }
    }
}

fn open_cache(config: &PipelineConfig) -> Result<AugmentCache> {
    let path = config.paths.cache_dir.join("augment-cache.jsonl");
    AugmentCache::open(&path).with_context(|| format!("opening cache {}", path.display()))
}

fn open_pipeline(config: &PipelineConfig, data: &Dataset) -> Result<Pipeline> {
    let gateways = Gateways::connect(config, &data.entities, &data.mentions)?;
    Ok(Pipeline::open(config.clone(), data.entities.clone(), gateways)?)
}

fn find_mention<'a>(data: &'a Dataset, id: &str) -> Result<&'a Mention> {
    data.mentions
        .iter()
        .find(|m| m.id == id)
        .ok_or_else(|| anyhow!("unknown mention id {id:?}"))
}

fn report_telemetry(name: &str, g: &dyn ModelGateway) {
    let t = g.telemetry();
    println!(
        "{name}: {} requests, {} retries, {} failures, {} tokens",
        t.requests, t.retries, t.failures, t.tokens
    );
}

fn ingest(config: &PipelineConfig, args: &IngestArgs) -> Result<()> {
    let ratios: [f64; 3] = args.ratios[..].try_into().map_err(|_| anyhow!(ConfigError("--ratios needs three values".into())))?;
    kb::split_sizes(0, ratios).map_err(|e| anyhow!(ConfigError(e.to_string())))?;
    let p = &config.paths;
    let src_e = args.from_entities.as_ref().unwrap_or(&p.entities);
    let src_m = args.from_mentions.as_ref().unwrap_or(&p.mentions);
    require_file(src_e, "entities")?;
    require_file(src_m, "mentions")?;
    let mut data = Dataset::new(kb::load_entities(src_e)?, kb::load_mentions(src_m)?);
    if args.drop_unlinkable {
        let n = data.drop_unlinkable();
        println!("dropped {n} mentions with gold entities outside the knowledge base");
    }
    let labels = kb::split_dataset(&data.mentions, ratios, config.seed)?;
    for path in [&p.entities, &p.mentions, &p.splits] {
        ensure_parent(path)?;
    }
    kb::save_entities(&p.entities, &data.entities)?;
    kb::save_mentions(&p.mentions, &data.mentions)?;
    kb::save_split_labels(&p.splits, &labels)?;
    let count = |s| labels.values().filter(|&&v| v == s).count();
    println!(
        "{} entities, {} mentions (train {}, val {}, test {})",
        data.entities.len(),
        data.mentions.len(),
        count(kb::Split::Train),
        count(kb::Split::Val),
        count(kb::Split::Test)
    );
    Ok(())
}

fn augment_options(config: &PipelineConfig, args: &AugmentArgs) -> AugmentOptions {
    AugmentOptions {
        skip_existing: args.skip_existing,
        no_visual: args.no_visual,
        limit: args.limit,
        image_root: config.paths.image_root.clone(),
        jobs: config.jobs,
    }
}

fn print_batch(stats: BatchStats, output: &Path) {
    println!(
        "{} of {} records augmented, {} unchanged -> {}",
        stats.augmented,
        stats.total,
        stats.skipped,
        output.display()
    );
}

fn augment_entities(config: &PipelineConfig, args: &AugmentArgs) -> Result<()> {
    let input = &config.paths.entities;
    require_file(input, "entities")?;
    let output = args.output.clone().unwrap_or_else(|| input.clone());
    ensure_parent(&output)?;
    let llm = config.llm.connect()?;
    let cache = open_cache(config)?;
    let stats = augment::augment_entity_file(input, &output, llm.as_ref(), Some(&cache), &augment_options(config, args))?;
    print_batch(stats, &output);
    report_telemetry("llm", llm.as_ref());
    Ok(())
}

fn augment_mentions(config: &PipelineConfig, args: &AugmentArgs) -> Result<()> {
    let input = &config.paths.mentions;
    require_file(input, "mentions")?;
    let output = args.output.clone().unwrap_or_else(|| input.clone());
    ensure_parent(&output)?;
    let llm = config.llm.connect()?;
    let mllm = config.mllm.connect()?;
    let cache = open_cache(config)?;
    let stats = augment::augment_mention_file(
        input,
        &output,
        llm.as_ref(),
        mllm.as_ref(),
        Some(&cache),
        &augment_options(config, args),
    )?;
    print_batch(stats, &output);
    report_telemetry("llm", llm.as_ref());
    report_telemetry("mllm", mllm.as_ref());
    Ok(())
}

fn build(config: &PipelineConfig) -> Result<()> {
    require_file(&config.paths.entities, "entities")?;
    let entities = kb::load_entities(&config.paths.entities)?;
    let embedder = config.embedder.connect()?;
    let text = config.ablation.toggles().entity_text();
    let index = build_index(&entities, embedder.as_ref(), text)
        .context("building index (run `melkit augment-entities` first if summaries are missing)")?;
    let path: PathBuf = config.index_path();
    ensure_parent(&path)?;
    index.write(&path)?;
    println!("{} rows of dim {} -> {}", index.len(), index.dim(), path.display());
    report_telemetry("embedder", embedder.as_ref());
    Ok(())
}

fn retrieve(config: &PipelineConfig, args: &RetrieveArgs) -> Result<()> {
    let data = load_dataset(config)?;
    let pipeline = open_pipeline(config, &data)?;
    let mentions: Vec<&Mention> = match &args.mention_id {
        Some(id) => vec![find_mention(&data, id)?],
        None => data.mentions.iter().collect(),
    };
    for m in mentions {
        let (_, set) = pipeline.candidates(m)?;
        println!("{}", serde_json::to_string(&set)?);
    }
    Ok(())
}

fn link(config: &PipelineConfig, args: &LinkArgs) -> Result<()> {
    let data = load_dataset(config)?;
    let m = find_mention(&data, &args.mention_id)?;
    let pipeline = open_pipeline(config, &data)?;
    let result = pipeline.link(m)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn export(config: &PipelineConfig, args: &ExportArgs) -> Result<()> {
    let data = load_dataset(config)?;
    let mentions = select(&data, args.split, config)?;
    let pipeline = open_pipeline(config, &data)?;
    let (records, skipped) = pipeline.export_finetune(&mentions, args.sample)?;
    ensure_parent(&args.output)?;
    kb::write_jsonl(&args.output, &records)?;
    println!(
        "{} records -> {} ({skipped} mentions skipped: gold outside the top-{} candidates or unlabeled)",
        records.len(),
        args.output.display(),
        config.k
    );
    Ok(())
}

fn eval(config: &PipelineConfig, args: &EvaluateArgs) -> Result<()> {
    let data = load_dataset(config)?;
    let mentions = select(&data, args.split, config)?;
    let pipeline = open_pipeline(config, &data)?;
    let tag = config
        .paths
        .entities
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let report = evaluate(&pipeline, &mentions, &args.k, &tag)?;
    ensure_parent(&args.report)?;
    std::fs::write(&args.report, report.to_json())
        .with_context(|| format!("writing {}", args.report.display()))?;
    print!("{}", report.to_table());
    Ok(())
}

fn demo(cli: &Cli, args: &DemoArgs) -> Result<()> {
    let g = &cli.global;
    let selection = g.mock_selection.unwrap_or(MockSelection::AlwaysGold);
    let ablation = g.ablate.unwrap_or_default();
    let jobs = g.jobs.unwrap_or(4);
    if jobs == 0 {
        bail!(ConfigError("--jobs must be at least 1".into()));
    }
    let tmp;
    let dir = match &args.dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.clone()
        }
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let report = synthetic::run_demo(&dir, selection, ablation, jobs)?;
    if let Some(path) = args.report.as_ref().or(args.dir.as_ref().map(|_| &dir)) {
        let path = if path.is_dir() { path.join("report.json") } else { path.clone() };
        ensure_parent(&path)?;
        std::fs::write(&path, report.to_json())?;
    }
    print!("{}", report.to_table());
    Ok(())
}
