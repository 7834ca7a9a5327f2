use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use igt_core::config::RunConfig;
use igt_core::encoder::WordVectors;
use igt_core::eval::{evaluate, sample_diagnostics, EvalConfig, EvalReport};
use igt_core::fusion::EmbeddingCache;
use igt_core::kg::{Dataset, TextCatalog, Triple};
use igt_core::model::{Model, ModelResources};
use igt_core::positions::{build_distance_matrix, build_distinction_matrix, format_grid, named_token_labels};
use igt_core::sampler::{derive_seed, extract_subgraph, rng_for};
use igt_core::synthetic::{toy_dataset, write_tsv_splits};
use igt_core::train::{read_log, train, TrainOutputs, TrainSummary, BEST_CHECKPOINT, LAST_CHECKPOINT};

const RUN_CONFIG: &str = "config.txt";
const RUN_RESOURCES: &str = "resources.json";
const RUN_LOG: &str = "log.jsonl";
const RUN_SUMMARY: &str = "summary.json";

#[derive(Parser)]
#[command(name = "igt", version, about = "Subgraph transformer toolkit for knowledge graph completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read TSV splits and write a binary graph snapshot.
    Ingest(IngestArgs),
    /// Write the pinned synthetic toy graph as TSV splits.
    ToyData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one subgraph and print it, optionally with its P and D matrices.
    Sample(SampleArgs),
    /// Train a model and write checkpoints, the step log and a summary.
    Train(TrainArgs),
    /// Rank a split with a trained model.
    Eval(EvalArgs),
    /// Subgraph size and layout statistics without a model.
    Diagnostics(DiagnosticsArgs),
    /// Collect a run directory into one JSON report.
    ExportReport {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Configuration sources shared by every model-building command.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, base: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match self.config.as_deref().or(base) {
            Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
            cfg.set(k, v)?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Side inputs a model may need; stored with a run so evaluation rebuilds the same model.
#[derive(Args, Clone, Default, Serialize, Deserialize)]
struct ResourceArgs {
    /// `name<TAB>description` per entity.
    #[arg(long)]
    entity_text: Option<PathBuf>,
    /// `name<TAB>description` per relation.
    #[arg(long)]
    relation_text: Option<PathBuf>,
    /// Whitespace-separated word vectors for embedding initialisation.
    #[arg(long)]
    word_vectors: Option<PathBuf>,
    /// `IGTEMB1` embedding cache for the cache provider.
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl ResourceArgs {
    fn or(&self, other: &ResourceArgs) -> ResourceArgs {
        ResourceArgs {
            entity_text: self.entity_text.clone().or_else(|| other.entity_text.clone()),
            relation_text: self.relation_text.clone().or_else(|| other.relation_text.clone()),
            word_vectors: self.word_vectors.clone().or_else(|| other.word_vectors.clone()),
            cache: self.cache.clone().or_else(|| other.cache.clone()),
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    head: String,
    /// Relation name; prefix with `inverse of ` for a head query.
    #[arg(long)]
    relation: String,
    /// Known tail, excluded from the subgraph as during training.
    #[arg(long)]
    tail: Option<String>,
    /// Print the distance and distinction matrices.
    #[arg(long)]
    inspect: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, log and summary.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    resources: ResourceArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory; supplies the configuration, resources and best checkpoint.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Raw instead of filtered ranking.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    max_queries: Option<usize>,
    /// Keep per-query ranks and score digests in the JSON report.
    #[arg(long)]
    rankings: bool,
    /// Write the JSON report here (defaults to `eval_<split>.json` in the run directory).
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    resources: ResourceArgs,
}

#[derive(Args)]
struct DiagnosticsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 10_000)]
    max_queries: usize,
    #[arg(long)]
    entity_text: Option<PathBuf>,
    #[arg(long)]
    relation_text: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::ToyData { out } => {
            write_tsv_splits(&toy_dataset()?, &out)?;
            println!("wrote toy splits to {}", out.display());
            Ok(())
        }
        Command::Sample(a) => sample(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Diagnostics(a) => diagnostics(a),
        Command::ExportReport { run, out } => export_report(&run, out.as_deref()),
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::read_snapshot(path).with_context(|| format!("reading snapshot {}", path.display()))
}

fn ingest(a: IngestArgs) -> Result<()> {
    let data = Dataset::from_files(&a.train, a.valid.as_deref(), a.test.as_deref())?;
    data.write_snapshot(&a.out)?;
    println!(
        "entities {}  relations {}  train {}  valid {}  test {}",
        data.num_entities(),
        data.train.num_relations(),
        data.train.len() / 2,
        data.valid.len(),
        data.test.len()
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let cfg = a.config.resolve(None)?;
    let data = load_data(&a.data)?;
    let kg = &data.train;
    let h = kg.resolve_entity(&a.head)?;
    let r = kg.resolve_relation(&a.relation)?;
    let gold = a.tail.as_deref().map(|t| kg.resolve_entity(t)).transpose()?;
    let mut rng = rng_for(derive_seed(cfg.train.seed, &[h.0 as u64, r.raw() as u64]));
    let sub = extract_subgraph(kg, h, r, gold, &cfg.train.sampler, &mut rng)?;
    print!("{}", sub.dump(kg));
    if sub.underfilled {
        println!("# underfilled: fewer triples than the budget were available");
    }
    if a.inspect {
        let labels = named_token_labels(&sub, kg);
        let p = build_distance_matrix(&sub);
        let d = build_distinction_matrix(&sub, &p, cfg.model.encoder.shared_g2g)?;
        println!("\nP");
        print!("{}", format_grid(&labels, p.size(), |i, j| p.get(i, j)));
        println!("\nD");
        print!("{}", format_grid(&labels, d.size(), |i, j| d.get(i, j)));
    }
    Ok(())
}

struct LoadedResources {
    catalog: Option<TextCatalog>,
    words: Option<WordVectors>,
    cache: Option<EmbeddingCache>,
}

fn load_resources(cfg: &RunConfig, r: &ResourceArgs, data: &Dataset) -> Result<LoadedResources> {
    let model = cfg.model_config();
    let needs_catalog = r.entity_text.is_some()
        || r.relation_text.is_some()
        || r.word_vectors.is_some()
        || model.fusion.as_ref().is_some_and(|f| f.provider == igt_core::fusion::ProviderKind::Stub);
    let catalog = if needs_catalog {
        Some(TextCatalog::load(&data.train, r.entity_text.as_deref(), r.relation_text.as_deref())?)
    } else {
        None
    };
    let words = r.word_vectors.as_deref().map(WordVectors::load).transpose()?;
    let cache = match (&model.fusion, &r.cache) {
        (Some(f), Some(p)) if f.provider == igt_core::fusion::ProviderKind::Cache => Some(EmbeddingCache::read(p)?),
        (Some(f), None) if f.provider == igt_core::fusion::ProviderKind::Cache => {
            bail!("fusion = cache needs --cache")
        }
        _ => None,
    };
    Ok(LoadedResources { catalog, words, cache })
}

fn build_model(cfg: &RunConfig, res: LoadedResources, data: &Dataset) -> Result<Model<f32>> {
    let resources =
        ModelResources { catalog: res.catalog.as_ref(), word_vectors: res.words.as_ref(), cache: res.cache };
    Ok(Model::new(cfg.model_config(), data.num_entities(), data.train.relation_slots(), resources, cfg.train.seed)?)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve(None)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let data = load_data(&a.data)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(RUN_CONFIG), cfg.to_text())?;
    fs::write(a.out.join(RUN_RESOURCES), serde_json::to_string_pretty(&a.resources)?)?;
    let res = load_resources(&cfg, &a.resources, &data)?;
    let mut model = build_model(&cfg, res, &data)?;
    log::info!(
        "training {} parameters on {} triples for {} epochs",
        model.store.num_scalars(),
        data.train.len(),
        cfg.train.epochs
    );
    let mut log_file = BufWriter::new(fs::File::create(a.out.join(RUN_LOG))?);
    let outputs = TrainOutputs { dir: Some(a.out.clone()) };
    let summary = train(&mut model, &data, &cfg.train, &outputs, &mut log_file)?;
    log_file.flush()?;
    fs::write(a.out.join(RUN_SUMMARY), serde_json::to_string_pretty(&summary)?)?;
    println!("steps {}", summary.steps);
    for e in &summary.epochs {
        match &e.valid {
            Some(m) => println!("epoch {:>4}  loss {:.4}  valid MRR {:.4}  Hits@10 {:.4}", e.epoch, e.mean_total, m.mrr, m.hits10),
            None => println!("epoch {:>4}  loss {:.4}", e.epoch, e.mean_total),
        }
    }
    if let (Some(b), Some(m)) = (summary.best_epoch, summary.best_valid_mrr) {
        println!("best epoch {b} (valid MRR {m:.4})");
    }
    println!("run written to {}", a.out.display());
    Ok(())
}

fn split<'a>(data: &'a Dataset, name: &str) -> Result<&'a [Triple]> {
    match name {
        "test" => Ok(&data.test),
        "valid" => Ok(&data.valid),
        other => bail!("unknown split {other:?} (expected test or valid)"),
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let run_config = a.run.as_ref().map(|r| r.join(RUN_CONFIG));
    let cfg = a.config.resolve(run_config.as_deref())?;
    let stored = match &a.run {
        Some(r) if r.join(RUN_RESOURCES).exists() => serde_json::from_str(&fs::read_to_string(r.join(RUN_RESOURCES))?)?,
        _ => ResourceArgs::default(),
    };
    let resources = a.resources.or(&stored);
    let checkpoint = match (&a.checkpoint, &a.run) {
        (Some(c), _) => c.clone(),
        (None, Some(r)) if r.join(BEST_CHECKPOINT).exists() => r.join(BEST_CHECKPOINT),
        (None, Some(r)) => r.join(LAST_CHECKPOINT),
        (None, None) => bail!("eval needs --run or --checkpoint"),
    };
    let data = load_data(&a.data)?;
    let res = load_resources(&cfg, &resources, &data)?;
    let mut model = build_model(&cfg, res, &data)?;
    model.load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let triples = split(&data, &a.split)?;
    let ec = EvalConfig {
        filtered: !a.raw,
        sampler: cfg.train.sampler.clone(),
        seed: cfg.train.seed,
        max_queries: a.max_queries,
        keep_rankings: a.rankings,
    };
    let report = evaluate(&model, &data.train, triples, &data.known_true(), &ec, &a.split)?;
    print!("{}", report.table());
    let json_path = a.json.clone().or_else(|| a.run.as_ref().map(|r| r.join(format!("eval_{}.json", a.split))));
    if let Some(p) = json_path {
        fs::write(&p, report.to_json())?;
        println!("report written to {}", p.display());
    }
    Ok(())
}

fn diagnostics(a: DiagnosticsArgs) -> Result<()> {
    let cfg = a.config.resolve(None)?;
    let data = load_data(&a.data)?;
    let kg = &data.train;
    let catalog = TextCatalog::load(kg, a.entity_text.as_deref(), a.relation_text.as_deref())?;
    let queries: Vec<Triple> = match a.split.as_str() {
        "train" => kg.triples().to_vec(),
        other => split(&data, other)?.iter().flat_map(|t| [*t, t.inverse()]).collect(),
    };
    if queries.is_empty() || a.max_queries == 0 {
        bail!("split {} has no queries", a.split);
    }
    let d = sample_diagnostics(
        kg,
        &queries,
        a.max_queries,
        &cfg.train.sampler,
        cfg.train.seed,
        &cfg.model.encoder.buckets,
        Some(&catalog),
    )?;
    println!("queries          {}", d.inputs);
    println!("saturated        {}", d.saturated);
    println!("A.IT             {:.2}", d.a_it);
    println!("A.IT saturated   {:.2}", d.a_it_saturated);
    println!("A.IL             {:.2}", d.a_il);
    println!("A.BBR            {:.2}", d.a_bbr);
    if let Some(t) = d.a_il_text {
        println!("A.IL text        {t:.2}");
    }
    println!("{}", serde_json::to_string(&d)?);
    Ok(())
}

fn export_report(run: &Path, out: Option<&Path>) -> Result<()> {
    let config = fs::read_to_string(run.join(RUN_CONFIG)).with_context(|| format!("no {RUN_CONFIG} in {}", run.display()))?;
    let summary: Option<TrainSummary> = match fs::read_to_string(run.join(RUN_SUMMARY)) {
        Ok(s) => Some(serde_json::from_str(&s)?),
        Err(_) => None,
    };
    let steps = if run.join(RUN_LOG).exists() { read_log(&run.join(RUN_LOG))? } else { Vec::new() };
    let mut evals = serde_json::Map::new();
    let mut names: Vec<_> = fs::read_dir(run)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.starts_with("eval_") && n.ends_with(".json"))
        .collect();
    names.sort();
    for n in names {
        let report: EvalReport = serde_json::from_str(&fs::read_to_string(run.join(&n))?)?;
        evals.insert(n.trim_end_matches(".json").trim_start_matches("eval_").to_string(), serde_json::to_value(report)?);
    }
    let config_map: serde_json::Map<String, serde_json::Value> = config
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), json!(v.trim())))
        .collect();
    let last = steps.last();
    let report = json!({
        "config": config_map,
        "steps": steps.len(),
        "final_step": last,
        "summary": summary,
        "evaluations": evals,
    });
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => {
            fs::write(p, &text)?;
            println!("report written to {}", p.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}
