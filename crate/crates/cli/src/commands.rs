use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, Context, Result};
use mocoll_core::backends::{load_embedding_index, ChatBackend, EmbeddingIndex, RemoteBackend};
use mocoll_core::corpus::{apply_vocab_filter, load_corpus, split_corpus, CaptionedCase, Corpus, ManifestFormat, VocabFilter};
use mocoll_core::curation::{
    curate, emit_dataset, read_memories, read_vqa_jsonl, DatasetFormat, EmitOptions, MemoryCheckpoint,
    SelectionStrategy, VqaExample,
};
use mocoll_core::metrics::{score_all, MetricsReport, TokenSequence};
use mocoll_core::orchestrator::{
    read_conversation_log, run_batch_with, write_conversation_log, Backends, Conversation, ExamplePool,
};
use mocoll_core::retrieval::FewShotStrategy;
use mocoll_core::simharness::{generate_world, run_ablation, sim_backends, AblationKind, SimWorld};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{BackendKind, RunConfig, AGENT_KEY_ENV, VQA_KEY_ENV};
use crate::run::Run;

/// Settings shared by every subcommand.
pub struct Ctx {
    pub config: RunConfig,
    pub resume: bool,
    pub trace: bool,
    pub run_dir: Option<PathBuf>,
}

impl Ctx {
    fn run(&self, command: &'static str, args: Value, inputs: &[&Path]) -> Result<Run> {
        Run::create(
            command,
            &self.config.output_dir,
            self.run_dir.as_deref(),
            self.config.snapshot(),
            args,
            inputs,
        )
    }
}

/// Corpus plus whatever the backends need to serve it.
struct Loaded {
    corpus: Corpus,
    index: Option<EmbeddingIndex>,
    world: Option<Arc<SimWorld>>,
    inputs: Vec<PathBuf>,
}

fn load_inputs(config: &RunConfig) -> Result<Loaded> {
    if config.corpus.simulated {
        let world = generate_world(&config.simulation.world(), config.simulation.n_cases)?;
        let corpus = split_corpus(&world.corpus(), config.corpus.train_ratio, config.seed)?;
        return Ok(Loaded {
            corpus,
            index: Some(world.index.clone()),
            world: Some(Arc::new(world)),
            inputs: Vec::new(),
        });
    }
    let manifest = config
        .corpus
        .manifest
        .clone()
        .context("no corpus: set corpus.manifest (see `mocoll ingest`) or corpus.simulated")?;
    let (corpus, report) = load_corpus(&manifest, ManifestFormat::from_path(&manifest))?;
    if report.dropped() > 0 {
        log::warn!("{}: dropped {} records", manifest.display(), report.dropped());
    }
    let mut inputs = vec![manifest];
    let index = match &config.corpus.embeddings {
        Some(p) => {
            inputs.push(p.clone());
            Some(load_embedding_index(p)?)
        }
        None => None,
    };
    Ok(Loaded {
        corpus,
        index,
        world: None,
        inputs,
    })
}

fn build_backends(config: &RunConfig, world: Option<Arc<SimWorld>>, trace: bool) -> Result<Backends> {
    match config.backends.kind {
        BackendKind::Sim => {
            let world = world.context("sim backends need the simulated corpus")?;
            Ok(sim_backends(world, &config.simulation.sim_config()?))
        }
        BackendKind::Remote => {
            let b = &config.backends;
            let agent_key = std::env::var(AGENT_KEY_ENV).ok();
            let vqa_key = std::env::var(VQA_KEY_ENV).ok();
            let remote = |role: &str, ep: &crate::config::Endpoint, key: Option<String>, vision: bool| -> Result<Arc<dyn ChatBackend>> {
                Ok(Arc::new(RemoteBackend::new(ep.remote_config(role, key, vision, trace)?)))
            };
            let agent = remote("agent", &b.agent, agent_key.clone(), false)?;
            let caption_agent = match &b.caption_agent {
                Some(ep) => remote("caption_agent", ep, agent_key.clone(), false)?,
                None => agent.clone(),
            };
            let select_agent = match &b.select_agent {
                Some(ep) => remote("select_agent", ep, agent_key, false)?,
                None => agent.clone(),
            };
            Ok(Backends {
                question_agent: agent,
                caption_agent,
                select_agent,
                vqa: remote("vqa", &b.vqa, vqa_key, true)?,
            })
        }
    }
}

fn path_refs(paths: &[PathBuf]) -> Vec<&Path> {
    paths.iter().map(PathBuf::as_path).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

fn cases_in(corpus: &Corpus, split: SplitChoice) -> Vec<CaptionedCase> {
    match split {
        SplitChoice::Train => corpus.train(),
        SplitChoice::Test => corpus.test(),
        SplitChoice::All => corpus.cases.clone(),
    }
}

#[derive(Debug, clap::Args, Serialize)]
pub struct IngestArgs {
    /// Raw JSONL or CSV manifest (defaults to corpus.manifest).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_parser = ["jsonl", "csv"])]
    pub format: Option<String>,
    /// Rare-word cutoff (3 for IU-Xray, 10 for MIMIC-CXR, 0 disables).
    #[arg(long)]
    pub min_frequency: Option<usize>,
    #[arg(long)]
    pub train_ratio: Option<f64>,
    /// Keep the split labels found in the input instead of re-splitting.
    #[arg(long)]
    pub keep_splits: bool,
}

pub fn ingest(ctx: &Ctx, args: &IngestArgs) -> Result<PathBuf> {
    let input = args
        .input
        .clone()
        .or_else(|| ctx.config.corpus.manifest.clone())
        .context("ingest needs --input or corpus.manifest")?;
    let format = match args.format.as_deref() {
        Some("csv") => ManifestFormat::Csv,
        Some(_) => ManifestFormat::Jsonl,
        None => ManifestFormat::from_path(&input),
    };
    let ratio = args.train_ratio.unwrap_or(ctx.config.corpus.train_ratio);
    let min_frequency = args.min_frequency.unwrap_or(ctx.config.corpus.min_frequency);
    let (mut corpus, report) = load_corpus(&input, format)?;
    if !args.keep_splits {
        corpus = split_corpus(&corpus, ratio, ctx.config.seed)?;
    }
    let corpus = apply_vocab_filter(&corpus, &VocabFilter::new(min_frequency));

    let mut run = ctx.run("ingest", serde_json::to_value(args)?, &[&input])?;
    corpus.write_manifest(&run.path("manifest.jsonl"))?;
    run.output("manifest.jsonl");
    let summary = json!({
        "load": report,
        "n_train": corpus.train().len(),
        "n_test": corpus.test().len(),
        "min_frequency": min_frequency,
    });
    run.write_json("ingest_report.json", &summary)?;
    println!(
        "loaded {} of {} records ({} without images, {} without report); {} train / {} test",
        report.n_loaded,
        report.n_records,
        report.dropped_missing_images,
        report.dropped_missing_report,
        corpus.train().len(),
        corpus.test().len()
    );
    run.finish()
}

#[derive(Debug, clap::Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub max_questions: Option<usize>,
    /// Few-shot example count.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_parser = ["random", "similarity"])]
    pub few_shot: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
}

#[derive(Serialize, Deserialize)]
struct CaptionRecord {
    case_id: String,
    caption: String,
}

fn few_shot_strategy(s: &str) -> FewShotStrategy {
    if s == "random" {
        FewShotStrategy::Random
    } else {
        FewShotStrategy::Similarity
    }
}

pub fn infer(ctx: &Ctx, args: &InferArgs) -> Result<PathBuf> {
    let config = &ctx.config;
    let loaded = load_inputs(config)?;
    let cases = cases_in(&loaded.corpus, args.split);
    if cases.is_empty() {
        bail!("no cases in the {:?} split; run `mocoll ingest` to assign splits or pass --split all", args.split);
    }
    let mut orch = config.orchestrator.clone();
    orch.few_shot.seed = config.seed;
    if let Some(m) = args.max_questions {
        orch.max_questions = m;
    }
    if let Some(k) = args.k {
        orch.few_shot.k = k;
    }
    if let Some(s) = &args.few_shot {
        orch.few_shot.strategy = few_shot_strategy(s);
    }
    orch.validate()?;
    let backends = build_backends(config, loaded.world.clone(), ctx.trace)?;
    let pool = ExamplePool::new(loaded.corpus.train(), loaded.index.clone());

    let mut run = ctx.run("infer", serde_json::to_value(args)?, &path_refs(&loaded.inputs))?;
    let partial = run.path("conversations.partial.jsonl");
    let mut done: HashMap<String, Conversation> = HashMap::new();
    if ctx.resume && partial.exists() {
        for conv in read_conversation_log(&partial)? {
            if !conv.failed() {
                done.insert(conv.case_id.clone(), conv);
            }
        }
        log::info!("resuming: {} cases already done", done.len());
    }
    // rewrite the checkpoint with only the records being kept
    let kept: Vec<Conversation> = cases.iter().filter_map(|c| done.get(&c.case_id).cloned()).collect();
    write_conversation_log(&partial, &kept)?;
    let remaining: Vec<CaptionedCase> = cases.iter().filter(|c| !done.contains_key(&c.case_id)).cloned().collect();

    let sink = Mutex::new(std::fs::OpenOptions::new().append(true).open(&partial)?);
    let sink_error = Mutex::new(None);
    let fresh = run_batch_with(&remaining, &orch, &backends, &pool, config.parallelism, |conv| {
        let line = serde_json::to_string(conv).expect("conversation serializes");
        let mut f = sink.lock().unwrap();
        if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
            sink_error.lock().unwrap().get_or_insert(e);
        }
    })?;
    if let Some(e) = sink_error.into_inner().unwrap() {
        return Err(e).context("writing conversation checkpoint");
    }
    for conv in fresh {
        done.insert(conv.case_id.clone(), conv);
    }
    let convs: Vec<Conversation> = cases
        .iter()
        .map(|c| done.remove(&c.case_id).expect("every case has a conversation"))
        .collect();

    write_conversation_log(&run.path("conversations.jsonl"), &convs)?;
    run.output("conversations.jsonl");
    let mut captions = String::new();
    for conv in &convs {
        let rec = CaptionRecord {
            case_id: conv.case_id.clone(),
            caption: conv.caption.clone().unwrap_or_default(),
        };
        captions.push_str(&serde_json::to_string(&rec)?);
        captions.push('\n');
    }
    run.write_text("captions.jsonl", &captions)?;
    let failed = convs.iter().filter(|c| c.failed()).count();
    let mut stop_reasons: BTreeMap<String, usize> = BTreeMap::new();
    for conv in &convs {
        let key = serde_json::to_value(conv.stop_reason)?.as_str().unwrap_or("").to_string();
        *stop_reasons.entry(key).or_default() += 1;
    }
    let report = json!({
        "n_cases": convs.len(),
        "failed_cases": failed,
        "stop_reasons": stop_reasons,
        "max_questions": orch.max_questions,
        "few_shot": orch.few_shot,
        "mean_turns": convs.iter().map(|c| c.turns.len()).sum::<usize>() as f64 / convs.len() as f64,
    });
    run.write_json("infer_report.json", &report)?;
    std::fs::remove_file(&partial).ok();
    println!("cases: {}, failed_cases: {failed}", convs.len());
    run.finish()
}

#[derive(Debug, clap::Args, Serialize)]
pub struct CurateArgs {
    /// none, top-r=<fraction> or agent.
    #[arg(long)]
    pub strategy: Option<SelectionStrategy>,
    #[arg(long)]
    pub max_questions: Option<usize>,
    #[arg(long, value_parser = ["vqa_jsonl", "chat_sft_jsonl"])]
    pub format: Option<String>,
}

fn dataset_file(format: DatasetFormat) -> &'static str {
    match format {
        DatasetFormat::VqaJsonl => "dataset.vqa.jsonl",
        DatasetFormat::ChatSftJsonl => "dataset.chat_sft.jsonl",
    }
}

fn emit_options(config: &RunConfig, strategy: SelectionStrategy) -> EmitOptions {
    let mut options = EmitOptions {
        strategy,
        ..EmitOptions::default()
    };
    if let Some(p) = &config.curation.system_prompt {
        options.system_prompt = p.clone();
    }
    options
}

pub fn curate_cmd(ctx: &Ctx, args: &CurateArgs) -> Result<PathBuf> {
    let config = &ctx.config;
    let strategy = args.strategy.unwrap_or(config.curation.strategy);
    let format = match &args.format {
        Some(f) => f.parse::<DatasetFormat>().map_err(|e| anyhow!(e))?,
        None => config.curation.format,
    };
    let loaded = load_inputs(config)?;
    let train = loaded.corpus.train();
    if train.is_empty() {
        bail!("the corpus has no training cases");
    }
    let mut orch = config.orchestrator.clone();
    orch.few_shot.seed = config.seed;
    orch.few_shot.strategy = FewShotStrategy::Random;
    orch.agent_params = config.curation.params;
    orch.vqa_params = config.curation.params;
    if let Some(m) = args.max_questions {
        orch.max_questions = m;
    }
    let backends = build_backends(config, loaded.world.clone(), ctx.trace)?;
    let pool = ExamplePool::new(train.clone(), loaded.index.clone());

    let mut run = ctx.run("curate", serde_json::to_value(args)?, &path_refs(&loaded.inputs))?;
    let partial = run.path("memories.partial.jsonl");
    if !ctx.resume && partial.exists() {
        std::fs::remove_file(&partial)?;
    }
    let (checkpoint, done) = MemoryCheckpoint::open(&partial)?;
    if !done.is_empty() {
        log::info!("resuming: {} cases in checkpoint", done.len());
    }
    let curated = curate(
        &train,
        &orch,
        strategy,
        &backends,
        &pool,
        &config.curation.params,
        config.parallelism,
        &done,
        Some(&checkpoint),
    )?;
    drop(checkpoint);

    mocoll_core::curation::write_memories(&run.path("memories.jsonl"), &curated.memories)?;
    run.output("memories.jsonl");
    run.write_json("curation_report.json", &curated.report)?;
    let r = &curated.report;
    println!(
        "strategy: {strategy}, memories: {}, selected: {}, selection_ratio: {:.4}, failed_cases: {}",
        r.n_memories, r.n_selected, r.selection_ratio, r.failed_cases
    );
    if curated.selected.is_empty() {
        run.finish()?;
        bail!("selection kept no examples; no dataset written");
    }
    let name = dataset_file(format);
    let manifest = emit_dataset(&curated.selected, &run.path(name), format, &emit_options(config, strategy))?;
    run.output(name);
    run.write_json("dataset_manifest.json", &manifest)?;
    std::fs::remove_file(&partial).ok();
    run.finish()
}

#[derive(Debug, clap::Args, Serialize)]
pub struct EmitArgs {
    /// Selected examples (VQA JSONL) or raw memories JSONL.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = ["vqa_jsonl", "chat_sft_jsonl"], default_value = "chat_sft_jsonl")]
    pub format: String,
    /// Strategy recorded in the manifest.
    #[arg(long, default_value = "none")]
    pub strategy: SelectionStrategy,
}

pub fn emit(ctx: &Ctx, args: &EmitArgs) -> Result<PathBuf> {
    let format: DatasetFormat = args.format.parse().map_err(|e: String| anyhow!(e))?;
    let examples: Vec<VqaExample> = match read_vqa_jsonl(&args.input) {
        Ok(ex) => ex,
        Err(_) => read_memories(&args.input)
            .with_context(|| format!("{} holds neither VQA examples nor memories", args.input.display()))?
            .iter()
            .map(VqaExample::from)
            .collect(),
    };
    let mut run = ctx.run("emit", serde_json::to_value(args)?, &[&args.input])?;
    let name = dataset_file(format);
    let manifest = emit_dataset(&examples, &run.path(name), format, &emit_options(&ctx.config, args.strategy))?;
    run.output(name);
    run.write_json("dataset_manifest.json", &manifest)?;
    println!("examples: {}, sha256: {}", manifest.n_examples, manifest.content_sha256);
    run.finish()
}

#[derive(Debug, clap::Args, Serialize)]
pub struct EvaluateArgs {
    /// JSONL with `case_id` and `caption`.
    #[arg(long)]
    pub candidates: PathBuf,
    /// Corpus manifest, or JSONL with `case_id` and `caption`/`report`.
    #[arg(long)]
    pub references: PathBuf,
    /// Restrict manifest references to one split.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitChoice,
}

fn read_caption_file(path: &Path, text_keys: &[&str]) -> Result<Vec<(String, String)>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let id = v["case_id"]
            .as_str()
            .with_context(|| format!("{}:{}: missing case_id", path.display(), i + 1))?;
        let text = text_keys
            .iter()
            .find_map(|k| v[*k].as_str())
            .with_context(|| format!("{}:{}: missing {}", path.display(), i + 1, text_keys.join("/")))?;
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

fn is_manifest(path: &Path) -> Result<bool> {
    if ManifestFormat::from_path(path) == ManifestFormat::Csv {
        return Ok(true);
    }
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)?;
        return Ok(["images", "finding", "impression"].iter().any(|k| v.get(k).is_some()));
    }
    Ok(false)
}

fn id_list(ids: &[&String]) -> String {
    let shown: Vec<&str> = ids.iter().take(10).map(|s| s.as_str()).collect();
    let more = ids.len().saturating_sub(shown.len());
    if more > 0 {
        format!("{} (and {more} more)", shown.join(", "))
    } else {
        shown.join(", ")
    }
}

/// Pairs candidates with references by case id, sorted by id.
pub fn align_by_case_id(
    candidates: Vec<(String, String)>,
    references: Vec<(String, String)>,
) -> Result<Vec<(String, String, String)>> {
    let mut cands: BTreeMap<String, String> = BTreeMap::new();
    for (id, text) in candidates {
        if cands.insert(id.clone(), text).is_some() {
            bail!("duplicate candidate case_id {id}");
        }
    }
    let mut refs: BTreeMap<String, String> = BTreeMap::new();
    for (id, text) in references {
        if refs.insert(id.clone(), text).is_some() {
            bail!("duplicate reference case_id {id}");
        }
    }
    let no_ref: Vec<&String> = cands.keys().filter(|id| !refs.contains_key(*id)).collect();
    let no_cand: Vec<&String> = refs.keys().filter(|id| !cands.contains_key(*id)).collect();
    if !no_ref.is_empty() || !no_cand.is_empty() {
        let mut msg = String::from("case_id mismatch between candidates and references");
        if !no_ref.is_empty() {
            msg.push_str(&format!("; missing from references: {}", id_list(&no_ref)));
        }
        if !no_cand.is_empty() {
            msg.push_str(&format!("; missing from candidates: {}", id_list(&no_cand)));
        }
        bail!(msg);
    }
    Ok(cands
        .into_iter()
        .map(|(id, c)| {
            let r = refs[&id].clone();
            (id, c, r)
        })
        .collect())
}

pub fn evaluate(ctx: &Ctx, args: &EvaluateArgs) -> Result<PathBuf> {
    let candidates = read_caption_file(&args.candidates, &["caption"])?;
    let references = if is_manifest(&args.references)? {
        let (corpus, _) = load_corpus(&args.references, ManifestFormat::from_path(&args.references))?;
        cases_in(&corpus, args.split)
            .into_iter()
            .map(|c| (c.case_id, c.report_text))
            .collect()
    } else {
        read_caption_file(&args.references, &["caption", "report", "report_text"])?
    };
    let aligned = align_by_case_id(candidates, references)?;
    let (c, r): (Vec<TokenSequence>, Vec<TokenSequence>) = aligned
        .iter()
        .map(|(_, c, r)| (TokenSequence::from_text(c), TokenSequence::from_text(r)))
        .unzip();
    let report = score_all(&c, &r)?;

    let mut run = ctx.run("evaluate", serde_json::to_value(args)?, &[&args.candidates, &args.references])?;
    run.write_json("metrics.json", &report)?;
    let csv = format!("{}\n{}\n", MetricsReport::CSV_HEADER.join(","), report.csv_row().join(","));
    run.write_text("metrics.csv", &csv)?;
    run.write_text("metrics.txt", &report.to_table())?;
    print!("{}", report.to_table());
    run.finish()
}

#[derive(Debug, clap::Args, Serialize)]
pub struct SimulateArgs {
    /// Ablations to run (default: simulation.ablations).
    #[arg(long = "kind", value_parser = parse_kind)]
    pub kinds: Vec<AblationKind>,
    /// Comma-separated grid; only with a single --kind.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub n_cases: Option<usize>,
    #[arg(long)]
    pub policy: Option<String>,
}

fn parse_kind(s: &str) -> Result<AblationKind, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = AblationKind::ALL.iter().map(|k| k.as_str()).collect();
        format!("unknown ablation {s:?} (expected one of {})", names.join(", "))
    })
}

pub fn simulate(ctx: &Ctx, args: &SimulateArgs) -> Result<PathBuf> {
    let mut sim = ctx.config.simulation.clone();
    if let Some(e) = args.epsilon {
        sim.epsilon = e;
    }
    if let Some(n) = args.n_cases {
        sim.n_cases = n;
    }
    if let Some(p) = &args.policy {
        sim.policy = p.clone();
    }
    let kinds = if args.kinds.is_empty() { sim.ablations.clone() } else { args.kinds.clone() };
    if kinds.is_empty() {
        bail!("no ablations selected");
    }
    let unique: HashSet<AblationKind> = kinds.iter().copied().collect();
    if unique.len() != kinds.len() {
        bail!("an ablation kind was given twice");
    }
    if !args.grid.is_empty() && kinds.len() != 1 {
        bail!("--grid needs exactly one --kind");
    }
    let ablation = sim.ablation_config(ctx.config.parallelism)?;
    let world = generate_world(&ablation.world, ablation.n_cases)?;

    let mut run = ctx.run("simulate", serde_json::to_value(args)?, &[])?;
    world.corpus().write_manifest(&run.path("world_manifest.jsonl"))?;
    run.output("world_manifest.jsonl");
    world.index.write_jsonl(&run.path("world_embeddings.jsonl"))?;
    run.output("world_embeddings.jsonl");
    for kind in kinds {
        let grid = if args.grid.is_empty() { sim.grid(kind) } else { args.grid.clone() };
        log::info!("running {kind} over {grid:?}");
        let table = run_ablation(kind, &grid, &ablation)?;
        table.write(&run.dir, kind.as_str())?;
        run.output(&format!("{kind}.csv"));
        run.output(&format!("{kind}.json"));
        println!("{}", render_table(&table));
    }
    run.finish()
}

fn render_table(table: &mocoll_core::simharness::AblationTable) -> String {
    let mut out = format!("{:<20}", table.kind.as_str());
    for c in &table.columns {
        out.push_str(&format!(" {c:>20}"));
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(&format!("{:<20}", row.value));
        for v in &row.values {
            out.push_str(&format!(" {v:>20.4}"));
        }
        out.push('\n');
    }
    out
}
