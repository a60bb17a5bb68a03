//! Synthetic VQA data curation: run the question loop over training cases to
//! collect (images, question, answer, ground truth) memories, filter them with
//! a selection strategy, and hand the survivors to an external trainer.

mod emit;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backends::{chat, BackendError, ChatBackend, ChatMessage, GenerationParams};
use crate::corpus::CaptionedCase;
use crate::metrics::{rouge_l_case, TokenSequence};
use crate::orchestrator::prompts::{render, SELECT_REPROMPT};
use crate::orchestrator::{
    extract_json_object, finish_with_caption, parallel_map, run_questions, Backends, ExamplePool,
    OrchestratorConfig, OrchestratorError, PromptSet, StopReason,
};

pub use emit::{
    advisory_hparams, emit_dataset, read_vqa_jsonl, validate_chat_sft_record, AdvisoryHparams, DatasetFormat,
    DatasetManifest, EmitOptions,
};

/// Fraction of memories kept by agent-based selection on real radiology
/// data (IU-Xray scale). Reference point only; never asserted.
pub const REFERENCE_AGENT_SELECTION_RATIO: f64 = 0.141;

/// Top-r grid commonly compared against agent-based selection.
pub const TOP_R_GRID: [f64; 3] = [0.5, 0.25, 0.125];

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("no memories were generated")]
    NoMemories,
    #[error("no caption for case {0}; top-r selection needs one per case")]
    MissingCaption(String),
    #[error("invalid selection strategy: {0}")]
    InvalidStrategy(String),
    #[error("cannot emit an empty dataset")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record on line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

impl CurationError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CurationError + '_ {
        move |source| CurationError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One answered question, with everything needed to judge and reuse it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub case_id: String,
    #[serde(rename = "images")]
    pub image_refs: Vec<String>,
    #[serde(rename = "q")]
    pub question: String,
    #[serde(rename = "a")]
    pub answer: String,
    pub ground_truth: String,
}

/// A selected training triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaExample {
    pub case_id: String,
    #[serde(rename = "images")]
    pub image_refs: Vec<String>,
    pub question: String,
    pub answer: String,
}

impl From<&MemoryEntry> for VqaExample {
    fn from(m: &MemoryEntry) -> Self {
        VqaExample {
            case_id: m.case_id.clone(),
            image_refs: m.image_refs.clone(),
            question: m.question.clone(),
            answer: m.answer.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionStrategy {
    None,
    /// Keep every memory of the best `r` fraction of cases by caption ROUGE-L.
    TopRRouge(f64),
    AgentBased,
}

impl SelectionStrategy {
    pub fn validate(&self) -> Result<(), CurationError> {
        match self {
            SelectionStrategy::TopRRouge(r) if !(*r > 0.0 && *r <= 1.0) => {
                Err(CurationError::InvalidStrategy(format!("r must be in (0, 1], got {r}")))
            }
            _ => Ok(()),
        }
    }

    pub fn needs_captions(&self) -> bool {
        matches!(self, SelectionStrategy::TopRRouge(_))
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionStrategy::None => f.write_str("none"),
            SelectionStrategy::TopRRouge(r) => write!(f, "top-r={r}"),
            SelectionStrategy::AgentBased => f.write_str("agent"),
        }
    }
}

impl FromStr for SelectionStrategy {
    type Err = CurationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let strategy = match s {
            "none" => SelectionStrategy::None,
            "agent" | "agent_based" | "agent-based" => SelectionStrategy::AgentBased,
            _ => {
                let r = s
                    .strip_prefix("top-r=")
                    .or_else(|| s.strip_prefix("top_r="))
                    .ok_or_else(|| CurationError::InvalidStrategy(s.to_string()))?;
                let r: f64 = r
                    .trim_end_matches('%')
                    .parse()
                    .map_err(|_| CurationError::InvalidStrategy(s.to_string()))?;
                SelectionStrategy::TopRRouge(if s.ends_with('%') { r / 100.0 } else { r })
            }
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl Serialize for SelectionStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SelectionStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything the question loop produced for one training case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMemories {
    pub case_id: String,
    pub stop_reason: StopReason,
    pub memories: Vec<MemoryEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Append-only per-case checkpoint so an interrupted run can resume.
pub struct MemoryCheckpoint {
    path: PathBuf,
    file: Mutex<File>,
}

impl MemoryCheckpoint {
    /// Opens (creating if needed) the checkpoint and returns the cases it
    /// already holds. Truncated trailing lines are ignored.
    pub fn open(path: &Path) -> Result<(Self, Vec<CaseMemories>), CurationError> {
        let mut done = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(CurationError::io(path))?);
            for line in reader.lines() {
                let line = line.map_err(CurationError::io(path))?;
                if let Ok(rec) = serde_json::from_str::<CaseMemories>(&line) {
                    done.push(rec);
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(CurationError::io(path))?;
        Ok((
            MemoryCheckpoint {
                path: path.to_path_buf(),
                file: Mutex::new(file),
            },
            done,
        ))
    }

    pub fn append(&self, rec: &CaseMemories) -> Result<(), CurationError> {
        let line = serde_json::to_string(rec).expect("checkpoint record serializes");
        let mut f = self.file.lock().unwrap();
        writeln!(f, "{line}").and_then(|_| f.flush()).map_err(CurationError::io(&self.path))
    }
}

/// Runs the question loop (no captioning unless `with_captions`) over the
/// training cases. Cases already in `done` are reused as-is.
#[allow(clippy::too_many_arguments)]
pub fn generate_memories(
    train_cases: &[CaptionedCase],
    config: &OrchestratorConfig,
    backends: &Backends,
    pool: &ExamplePool,
    parallelism: usize,
    with_captions: bool,
    done: &[CaseMemories],
    checkpoint: Option<&MemoryCheckpoint>,
) -> Result<Vec<CaseMemories>, CurationError> {
    config.validate()?;
    let previous: HashMap<&str, &CaseMemories> = done
        .iter()
        // failed cases are retried; a resumed top-r run also needs captions
        // the earlier run may not have made
        .filter(|d| d.stop_reason != StopReason::Error)
        .filter(|d| !with_captions || d.caption.is_some() || d.memories.is_empty())
        .map(|d| (d.case_id.as_str(), d))
        .collect();
    let counter = AtomicUsize::new(0);
    let total = train_cases.len();
    let checkpoint_error = Mutex::new(None);
    let results = parallel_map(
        train_cases,
        parallelism.max(1),
        |case| {
            if let Some(prev) = previous.get(case.case_id.as_str()) {
                return ((*prev).clone(), true);
            }
            let (mut conv, examples) = run_questions(case, config, backends, pool);
            if with_captions && !conv.turns.is_empty() {
                finish_with_caption(&mut conv, &examples, config, backends);
            }
            let memories = conv
                .turns
                .iter()
                .map(|t| MemoryEntry {
                    case_id: case.case_id.clone(),
                    image_refs: case.image_refs.clone(),
                    question: t.question.clone(),
                    answer: t.answer.clone(),
                    ground_truth: case.report_text.clone(),
                })
                .collect();
            (
                CaseMemories {
                    case_id: conv.case_id,
                    stop_reason: conv.stop_reason,
                    memories,
                    caption: conv.caption,
                    error: conv.error,
                },
                false,
            )
        },
        |(rec, reused)| {
            let n = counter.fetch_add(1, Ordering::Relaxed) + 1;
            if !reused {
                log::info!("[{n}/{total}] {}: {} memories", rec.case_id, rec.memories.len());
                if let Some(cp) = checkpoint {
                    if let Err(e) = cp.append(rec) {
                        checkpoint_error.lock().unwrap().get_or_insert(e);
                    }
                }
            }
        },
    );
    if let Some(e) = checkpoint_error.into_inner().unwrap() {
        return Err(e);
    }
    Ok(results.into_iter().map(|(rec, _)| rec).collect())
}

/// Why an entry did not survive agent-based selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectVerdict {
    Keep,
    Reject,
    /// Reply unparseable even after a re-prompt.
    ParseDrop,
    /// Backend call failed.
    BackendDrop(String),
}

fn parse_keep(reply: &str) -> Option<bool> {
    extract_json_object(reply)?.get("keep")?.as_bool()
}

/// Asks the selection agent whether an answer agrees with the ground truth.
pub fn select_agent_based(
    agent: &dyn ChatBackend,
    entry: &MemoryEntry,
    prompts: &PromptSet,
    params: &GenerationParams,
) -> SelectVerdict {
    let vars = [
        ("question", entry.question.as_str()),
        ("answer", entry.answer.as_str()),
        ("ground_truth", entry.ground_truth.as_str()),
        ("case_id", entry.case_id.as_str()),
    ];
    let mut messages = vec![
        ChatMessage::system(render(&prompts.select_system, &vars)),
        ChatMessage::user(render(&prompts.select_user, &vars)),
    ];
    let ask = |msgs: &[ChatMessage]| -> Result<String, BackendError> { chat(agent, msgs, params) };
    let reply = match ask(&messages) {
        Ok(r) => r,
        Err(e) => return SelectVerdict::BackendDrop(e.to_string()),
    };
    let keep = match parse_keep(&reply) {
        Some(k) => Some(k),
        None => {
            messages.push(ChatMessage::assistant(reply));
            messages.push(ChatMessage::user(SELECT_REPROMPT));
            match ask(&messages) {
                Ok(r) => parse_keep(&r),
                Err(e) => return SelectVerdict::BackendDrop(e.to_string()),
            }
        }
    };
    match keep {
        Some(true) => SelectVerdict::Keep,
        Some(false) => SelectVerdict::Reject,
        None => SelectVerdict::ParseDrop,
    }
}

/// Number of cases kept by top-r selection: `ceil(r * n)`, with a small
/// tolerance so that e.g. `0.3 * 10` keeps 3, not 4.
pub fn top_r_count(r: f64, n_cases: usize) -> usize {
    (((r * n_cases as f64) - 1e-9).ceil().max(0.0) as usize).min(n_cases)
}

/// Scores each case's caption against its ground truth with ROUGE-L and keeps
/// all memories of the best `ceil(r * n)` cases (ties by case id). Returns the
/// kept memories (input order) and the per-case scores.
pub fn select_top_r_rouge(
    cases: &[CaseMemories],
    r: f64,
) -> Result<(Vec<MemoryEntry>, HashMap<String, f64>), CurationError> {
    SelectionStrategy::TopRRouge(r).validate()?;
    let mut scored = Vec::new();
    for case in cases.iter().filter(|c| !c.memories.is_empty()) {
        let caption = case
            .caption
            .as_deref()
            .ok_or_else(|| CurationError::MissingCaption(case.case_id.clone()))?;
        let truth = &case.memories[0].ground_truth;
        let score = rouge_l_case(&TokenSequence::from_text(caption), &TokenSequence::from_text(truth));
        scored.push((case.case_id.as_str(), score));
    }
    let scores: HashMap<String, f64> = scored.iter().map(|(id, s)| (id.to_string(), *s)).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let keep: HashSet<&str> = scored
        .iter()
        .take(top_r_count(r, scored.len()))
        .map(|(id, _)| *id)
        .collect();
    let kept = cases
        .iter()
        .filter(|c| keep.contains(c.case_id.as_str()))
        .flat_map(|c| c.memories.iter().cloned())
        .collect();
    Ok((kept, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseCuration {
    pub case_id: String,
    pub stop_reason: StopReason,
    pub n_memories: usize,
    pub n_selected: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub strategy: SelectionStrategy,
    pub n_cases: usize,
    pub n_memories: usize,
    pub n_selected: usize,
    /// `n_selected / n_memories`. Agent-based selection kept roughly
    /// [`REFERENCE_AGENT_SELECTION_RATIO`] of memories on real chest X-ray data.
    pub selection_ratio: f64,
    /// Cases whose question loop ended in an error.
    pub failed_cases: usize,
    /// Cases where the agent asked nothing.
    pub empty_cases: usize,
    /// Agent-based selection: entries judged incorrect.
    pub rejected: usize,
    /// Agent-based selection: replies that never parsed (dropped).
    pub parse_drops: usize,
    /// Agent-based selection: backend failures (dropped).
    pub backend_drops: usize,
    pub per_case: Vec<CaseCuration>,
}

/// Output of a curation run.
#[derive(Debug, Clone)]
pub struct Curated {
    pub memories: Vec<MemoryEntry>,
    pub selected: Vec<VqaExample>,
    pub report: CurationReport,
    pub cases: Vec<CaseMemories>,
}

/// Applies `strategy` to generated memories. Selection only filters; it never
/// edits a question or an answer.
pub fn select(
    cases: Vec<CaseMemories>,
    strategy: SelectionStrategy,
    select_agent: &dyn ChatBackend,
    prompts: &PromptSet,
    select_params: &GenerationParams,
    parallelism: usize,
) -> Result<Curated, CurationError> {
    strategy.validate()?;
    let memories: Vec<MemoryEntry> = cases.iter().flat_map(|c| c.memories.iter().cloned()).collect();
    if memories.is_empty() {
        return Err(CurationError::NoMemories);
    }
    let mut rejected = 0;
    let mut parse_drops = 0;
    let mut backend_drops = 0;
    let mut rouge_scores = HashMap::new();
    let keep_mask: Vec<bool> = match strategy {
        SelectionStrategy::None => vec![true; memories.len()],
        SelectionStrategy::TopRRouge(r) => {
            let (kept, scores) = select_top_r_rouge(&cases, r)?;
            rouge_scores = scores;
            let kept_cases: HashSet<&str> = kept.iter().map(|m| m.case_id.as_str()).collect();
            memories.iter().map(|m| kept_cases.contains(m.case_id.as_str())).collect()
        }
        SelectionStrategy::AgentBased => {
            let verdicts = parallel_map(
                &memories,
                parallelism.max(1),
                |m| select_agent_based(select_agent, m, prompts, select_params),
                |_| {},
            );
            verdicts
                .into_iter()
                .map(|v| match v {
                    SelectVerdict::Keep => true,
                    SelectVerdict::Reject => {
                        rejected += 1;
                        false
                    }
                    SelectVerdict::ParseDrop => {
                        parse_drops += 1;
                        false
                    }
                    SelectVerdict::BackendDrop(e) => {
                        log::warn!("selection call failed: {e}");
                        backend_drops += 1;
                        false
                    }
                })
                .collect()
        }
    };

    let mut selected_per_case: HashMap<&str, usize> = HashMap::new();
    let mut selected = Vec::new();
    for (m, keep) in memories.iter().zip(&keep_mask) {
        if *keep {
            *selected_per_case.entry(m.case_id.as_str()).or_default() += 1;
            selected.push(VqaExample::from(m));
        }
    }
    let per_case = cases
        .iter()
        .map(|c| CaseCuration {
            case_id: c.case_id.clone(),
            stop_reason: c.stop_reason,
            n_memories: c.memories.len(),
            n_selected: selected_per_case.get(c.case_id.as_str()).copied().unwrap_or(0),
            caption_rouge_l: rouge_scores.get(&c.case_id).copied(),
            error: c.error.clone(),
        })
        .collect();
    let report = CurationReport {
        strategy,
        n_cases: cases.len(),
        n_memories: memories.len(),
        n_selected: selected.len(),
        selection_ratio: selected.len() as f64 / memories.len() as f64,
        failed_cases: cases.iter().filter(|c| c.stop_reason == StopReason::Error).count(),
        empty_cases: cases.iter().filter(|c| c.memories.is_empty()).count(),
        rejected,
        parse_drops,
        backend_drops,
        per_case,
    };
    Ok(Curated {
        memories,
        selected,
        report,
        cases,
    })
}

/// Memory generation followed by selection.
#[allow(clippy::too_many_arguments)]
pub fn curate(
    train_cases: &[CaptionedCase],
    config: &OrchestratorConfig,
    strategy: SelectionStrategy,
    backends: &Backends,
    pool: &ExamplePool,
    select_params: &GenerationParams,
    parallelism: usize,
    done: &[CaseMemories],
    checkpoint: Option<&MemoryCheckpoint>,
) -> Result<Curated, CurationError> {
    strategy.validate()?;
    let cases = generate_memories(
        train_cases,
        config,
        backends,
        pool,
        parallelism,
        strategy.needs_captions(),
        done,
        checkpoint,
    )?;
    select(
        cases,
        strategy,
        backends.select_agent.as_ref(),
        &config.prompts,
        select_params,
        parallelism,
    )
}

/// Writes memories as JSONL (`case_id, images, q, a, ground_truth`).
pub fn write_memories(path: &Path, memories: &[MemoryEntry]) -> Result<(), CurationError> {
    let mut out = std::io::BufWriter::new(File::create(path).map_err(CurationError::io(path))?);
    for m in memories {
        writeln!(out, "{}", serde_json::to_string(m).expect("memory serializes")).map_err(CurationError::io(path))?;
    }
    out.flush().map_err(CurationError::io(path))
}

pub fn read_memories(path: &Path) -> Result<Vec<MemoryEntry>, CurationError> {
    let reader = BufReader::new(File::open(path).map_err(CurationError::io(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(CurationError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CurationError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Compact JSON summary used in logs.
pub fn summary(report: &CurationReport) -> serde_json::Value {
    json!({
        "strategy": report.strategy,
        "n_memories": report.n_memories,
        "n_selected": report.n_selected,
        "selection_ratio": report.selection_ratio,
        "failed_cases": report.failed_cases,
    })
}
