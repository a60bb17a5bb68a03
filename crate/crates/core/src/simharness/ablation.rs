//! Ablation sweeps over the simulated world: few-shot count, conversation
//! length, selection strategy and training-set size.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{generate_world, sentences, sim_backends, FindingWorld, SimConfig, SimError, SimWorld};
use crate::backends::GenerationParams;
use crate::corpus::{split_corpus, CaptionedCase, DEFAULT_TRAIN_RATIO};
use crate::curation::{generate_memories, select, CaseMemories, SelectionStrategy};
use crate::metrics::{score_all, TokenSequence};
use crate::orchestrator::{run_batch, Conversation, ExamplePool, OrchestratorConfig};
use crate::retrieval::{FewShotConfig, FewShotStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    IclCount,
    ConversationLength,
    SelectionStrategy,
    DataSize,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        AblationKind::IclCount,
        AblationKind::ConversationLength,
        AblationKind::SelectionStrategy,
        AblationKind::DataSize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::IclCount => "icl_count",
            AblationKind::ConversationLength => "conversation_length",
            AblationKind::SelectionStrategy => "selection_strategy",
            AblationKind::DataSize => "data_size",
        }
    }

    /// Grid used when none is given.
    pub fn default_grid(self) -> Vec<String> {
        let g: &[&str] = match self {
            AblationKind::IclCount => &["0", "1", "3", "5"],
            AblationKind::ConversationLength => &["1", "2", "3", "4", "5", "6"],
            AblationKind::SelectionStrategy => &["none", "top-r=0.5", "top-r=0.25", "top-r=0.125", "agent"],
            AblationKind::DataSize => &["25", "50", "100", "200"],
        };
        g.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| SimError::BadGridValue(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub world: FindingWorld,
    pub n_cases: usize,
    pub sim: SimConfig,
    /// Question budget for every kind except `conversation_length`.
    pub max_questions: usize,
    /// Few-shot count for every kind except `icl_count`.
    pub few_shot_k: usize,
    /// Strategy used by the `data_size` sweep.
    pub strategy: SelectionStrategy,
    pub parallelism: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            world: FindingWorld::default(),
            n_cases: 200,
            sim: SimConfig::default(),
            max_questions: 4,
            few_shot_k: 0,
            strategy: SelectionStrategy::AgentBased,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Grid point, echoed as given.
    pub value: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    fn new(kind: AblationKind, columns: &[&str]) -> Self {
        AblationTable {
            kind,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, value: &str, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push(AblationRow {
            value: value.to_string(),
            values,
        });
    }

    /// Value of `column` in the row for grid point `value`.
    pub fn get(&self, value: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.value == value).map(|r| r.values[c])
    }

    pub fn column(&self, column: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|x| x == column)?;
        Some(self.rows.iter().map(|r| r.values[c]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{}\n", self.kind, self.columns.join(","));
        for r in &self.rows {
            let cells: Vec<String> = r.values.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!("{},{}\n", r.value, cells.join(",")));
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut m = Map::new();
                m.insert(self.kind.to_string(), Value::String(r.value.clone()));
                for (c, v) in self.columns.iter().zip(&r.values) {
                    m.insert(c.clone(), json!(v));
                }
                Value::Object(m)
            })
            .collect();
        json!({ "kind": self.kind, "columns": self.columns, "rows": rows })
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        let json = serde_json::to_string_pretty(&self.to_json()).expect("table serializes");
        std::fs::write(dir.join(format!("{stem}.json")), json + "\n")
    }
}

fn pipeline<E: fmt::Display>(e: E) -> SimError {
    SimError::Pipeline(e.to_string())
}

fn parse_count(s: &str) -> Result<usize, SimError> {
    s.trim().parse().map_err(|_| SimError::BadGridValue(s.to_string()))
}

fn orchestrator_config(max_questions: usize, k: usize, strategy: FewShotStrategy, seed: u64, params: GenerationParams) -> OrchestratorConfig {
    OrchestratorConfig {
        max_questions,
        few_shot: FewShotConfig { k, strategy, seed },
        agent_params: params,
        vqa_params: params,
        ..OrchestratorConfig::default()
    }
}

/// Test-split queries and a train-split example pool.
fn evaluation_split(world: &SimWorld) -> Result<(Vec<CaptionedCase>, ExamplePool), SimError> {
    let corpus = world.corpus();
    let (test, train) = if corpus.cases.len() < 2 {
        (corpus.cases.clone(), Vec::new())
    } else {
        let split = split_corpus(&corpus, DEFAULT_TRAIN_RATIO, world.params.seed).map_err(pipeline)?;
        (split.test(), split.train())
    };
    Ok((test, ExamplePool::new(train, Some(world.index.clone()))))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

struct InferenceScores {
    turns: f64,
    recall: f64,
    bleu1: f64,
    rouge_l: f64,
    failed: f64,
}

fn score_inference(world: &SimWorld, queries: &[CaptionedCase], convs: &[Conversation]) -> InferenceScores {
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for (case, conv) in queries.iter().zip(convs) {
        cands.push(TokenSequence::from_text(conv.caption.as_deref().unwrap_or("")));
        refs.push(TokenSequence::from_text(&case.report_text));
    }
    let (bleu1, rouge_l) = match score_all(&cands, &refs) {
        Ok(r) => (r.bleu1, r.rouge_l),
        Err(_) => (0.0, 0.0),
    };
    InferenceScores {
        turns: mean(convs.iter().map(|c| c.turns.len() as f64)),
        recall: mean(
            convs
                .iter()
                .map(|c| world.finding_recall(&c.case_id, c.caption.as_deref().unwrap_or(""))),
        ),
        bleu1,
        rouge_l,
        failed: convs.iter().filter(|c| c.failed()).count() as f64,
    }
}

/// Fraction of the query's finding sentences that occur in some example.
fn example_overlap(world: &SimWorld, conv: &Conversation) -> f64 {
    let Some(case) = world.get(&conv.case_id) else { return 0.0 };
    let ids = conv.example_ids();
    if ids.is_empty() {
        return 0.0;
    }
    let example_sentences: Vec<String> = ids
        .iter()
        .filter_map(|id| world.get(id))
        .flat_map(|c| sentences(&c.case.report_text))
        .collect();
    let hit = case
        .findings
        .iter()
        .filter(|f| example_sentences.contains(&f.sentence()))
        .count();
    hit as f64 / case.findings.len() as f64
}

fn memories_for(world: &SimWorld, config: &AblationConfig, with_captions: bool) -> Result<Vec<CaseMemories>, SimError> {
    let shared = Arc::new(world.clone());
    let backends = sim_backends(shared, &config.sim);
    let cases = world.captioned_cases();
    let pool = ExamplePool::new(cases.clone(), Some(world.index.clone()));
    let orch = orchestrator_config(
        config.max_questions,
        config.few_shot_k,
        FewShotStrategy::Random,
        config.sim.seed,
        GenerationParams::curation(),
    );
    generate_memories(&cases, &orch, &backends, &pool, config.parallelism, with_captions, &[], None).map_err(pipeline)
}

const SELECTION_COLUMNS: [&str; 5] = ["n_memories", "n_selected", "selection_ratio", "precision", "incorrect_selected"];

fn selection_row(world: &SimWorld, config: &AblationConfig, cases: Vec<CaseMemories>, strategy: SelectionStrategy) -> Result<Vec<f64>, SimError> {
    let backends = sim_backends(Arc::new(world.clone()), &config.sim);
    let curated = select(
        cases,
        strategy,
        backends.select_agent.as_ref(),
        &OrchestratorConfig::default().prompts,
        &GenerationParams::curation(),
        config.parallelism,
    )
    .map_err(pipeline)?;
    let incorrect = curated
        .selected
        .iter()
        .filter(|e| !world.answer_is_correct(&e.case_id, &e.answer))
        .count();
    Ok(vec![
        curated.report.n_memories as f64,
        curated.report.n_selected as f64,
        curated.report.selection_ratio,
        world.precision(&curated.selected),
        incorrect as f64,
    ])
}

/// Runs one sweep. Every row is a pure function of the config and its grid
/// point, so tables are reproducible under any parallelism.
pub fn run_ablation(kind: AblationKind, grid: &[String], config: &AblationConfig) -> Result<AblationTable, SimError> {
    if grid.is_empty() {
        return Err(SimError::EmptyGrid);
    }
    config.sim.validate()?;
    if config.max_questions == 0 {
        return Err(SimError::BadGridValue("max_questions = 0".into()));
    }
    match kind {
        AblationKind::ConversationLength => {
            let ms = grid.iter().map(|g| parse_count(g)).collect::<Result<Vec<_>, _>>()?;
            if ms.contains(&0) {
                return Err(SimError::BadGridValue("0".into()));
            }
            let world = generate_world(&config.world, config.n_cases)?;
            let (queries, pool) = evaluation_split(&world)?;
            let backends = sim_backends(Arc::new(world.clone()), &config.sim);
            let mut table = AblationTable::new(kind, &["mean_turns", "finding_recall", "bleu1", "rouge_l", "failed_cases"]);
            for (g, m) in grid.iter().zip(ms) {
                let orch = orchestrator_config(m, config.few_shot_k, FewShotStrategy::Similarity, config.sim.seed, GenerationParams::evaluation());
                let convs = run_batch(&queries, &orch, &backends, &pool, config.parallelism).map_err(pipeline)?;
                let s = score_inference(&world, &queries, &convs);
                table.push(g, vec![s.turns, s.recall, s.bleu1, s.rouge_l, s.failed]);
            }
            Ok(table)
        }
        AblationKind::IclCount => {
            let ks = grid.iter().map(|g| parse_count(g)).collect::<Result<Vec<_>, _>>()?;
            let world = generate_world(&config.world, config.n_cases)?;
            let (queries, pool) = evaluation_split(&world)?;
            let backends = sim_backends(Arc::new(world.clone()), &config.sim);
            let mut table = AblationTable::new(
                kind,
                &["examples_injected", "similarity_overlap", "random_overlap", "finding_recall", "rouge_l"],
            );
            for (g, k) in grid.iter().zip(ks) {
                let run = |strategy| {
                    let orch = orchestrator_config(config.max_questions, k, strategy, config.sim.seed, GenerationParams::evaluation());
                    run_batch(&queries, &orch, &backends, &pool, config.parallelism).map_err(pipeline)
                };
                let sim_convs = run(FewShotStrategy::Similarity)?;
                let rnd_convs = run(FewShotStrategy::Random)?;
                let s = score_inference(&world, &queries, &sim_convs);
                table.push(
                    g,
                    vec![
                        mean(sim_convs.iter().map(|c| c.example_ids().len() as f64)),
                        mean(sim_convs.iter().map(|c| example_overlap(&world, c))),
                        mean(rnd_convs.iter().map(|c| example_overlap(&world, c))),
                        s.recall,
                        s.rouge_l,
                    ],
                );
            }
            Ok(table)
        }
        AblationKind::SelectionStrategy => {
            let strategies = grid
                .iter()
                .map(|g| g.parse::<SelectionStrategy>().map_err(|_| SimError::BadGridValue(g.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            let world = generate_world(&config.world, config.n_cases)?;
            let captions = strategies.iter().any(SelectionStrategy::needs_captions);
            let cases = memories_for(&world, config, captions)?;
            let mut table = AblationTable::new(kind, &SELECTION_COLUMNS);
            for (g, s) in grid.iter().zip(strategies) {
                table.push(g, selection_row(&world, config, cases.clone(), s)?);
            }
            Ok(table)
        }
        AblationKind::DataSize => {
            let sizes = grid.iter().map(|g| parse_count(g)).collect::<Result<Vec<_>, _>>()?;
            let largest = sizes.iter().copied().max().unwrap_or(0);
            if sizes.contains(&0) {
                return Err(SimError::NoCases);
            }
            let full = generate_world(&config.world, largest)?;
            let mut columns = vec!["n_cases"];
            columns.extend(SELECTION_COLUMNS);
            let mut table = AblationTable::new(kind, &columns);
            for (g, n) in grid.iter().zip(sizes) {
                let world = full.truncated(n);
                let cases = memories_for(&world, config, config.strategy.needs_captions())?;
                let mut row = vec![n as f64];
                row.extend(selection_row(&world, config, cases, config.strategy)?);
                table.push(g, row);
            }
            Ok(table)
        }
    }
}
