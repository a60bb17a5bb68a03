//! A synthetic world whose ground truth is a short list of discrete findings,
//! plus scripted agent, VQA and selector backends with tunable error rates.
//! Because every report is rendered from known findings, claims about
//! coverage and selection precision can be checked exactly.

mod ablation;
mod agents;

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::EmbeddingIndex;
use crate::corpus::{CaptionedCase, Corpus, Split};
use crate::curation::{MemoryEntry, VqaExample};
use crate::seed::keyed_rng;

pub use ablation::{run_ablation, AblationConfig, AblationKind, AblationRow, AblationTable};
pub use agents::{sim_backends, SimCaptionAgent, SimQuestionAgent, SimSelector, SimVqa};

/// VQA reply when a question names no finding of the case.
pub const CANNOT_ANSWER: &str = "cannot answer.";

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("n_cases must be at least 1")]
    NoCases,
    #[error("vocabulary needs at least {min} findings, got {got}")]
    VocabularyTooSmall { min: usize, got: usize },
    #[error("invalid findings-per-case range {0}..={1}")]
    BadRange(usize, usize),
    #[error("{name} must lie in [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("empty ablation grid")]
    EmptyGrid,
    #[error("invalid grid value {0:?}")]
    BadGridValue(String),
    #[error("{0}")]
    Pipeline(String),
}

pub const MIN_VOCABULARY: usize = 8;

pub fn default_vocabulary() -> Vec<String> {
    [
        "pleural effusion",
        "pneumothorax",
        "focal consolidation",
        "cardiomegaly",
        "pulmonary edema",
        "atelectasis",
        "hiatal hernia",
        "aortic tortuosity",
        "spine osteophytes",
        "rib fracture",
        "pleural thickening",
        "calcified granuloma",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

/// Recipe for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FindingWorld {
    pub vocabulary: Vec<String>,
    pub min_findings: usize,
    pub max_findings: usize,
    /// Probability that a finding is present rather than absent.
    pub present_probability: f64,
    pub max_images: usize,
    pub seed: u64,
}

impl Default for FindingWorld {
    fn default() -> Self {
        FindingWorld {
            vocabulary: default_vocabulary(),
            min_findings: 4,
            max_findings: 4,
            present_probability: 0.5,
            max_images: 2,
            seed: 1,
        }
    }
}

impl FindingWorld {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.vocabulary.len() < MIN_VOCABULARY {
            return Err(SimError::VocabularyTooSmall {
                min: MIN_VOCABULARY,
                got: self.vocabulary.len(),
            });
        }
        if self.min_findings == 0 || self.min_findings > self.max_findings || self.max_findings > self.vocabulary.len() {
            return Err(SimError::BadRange(self.min_findings, self.max_findings));
        }
        check_probability("present_probability", self.present_probability)?;
        if !(1..=crate::corpus::MAX_IMAGES_PER_CASE).contains(&self.max_images) {
            return Err(SimError::BadRange(1, self.max_images));
        }
        Ok(())
    }
}

pub(crate) fn check_probability(name: &'static str, value: f64) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(SimError::Probability { name, value })
    }
}

/// One finding and whether it is present.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Finding {
    pub name: String,
    pub present: bool,
}

impl Finding {
    pub fn sentence(&self) -> String {
        sentence(&self.name, self.present)
    }
}

pub fn sentence(name: &str, present: bool) -> String {
    if present {
        format!("there is {name}.")
    } else {
        format!("there is no {name}.")
    }
}

/// Reports are rendered one sentence per finding, in order.
pub fn render_report(findings: &[Finding]) -> String {
    findings.iter().map(Finding::sentence).collect::<Vec<_>>().join(" ")
}

/// Sentences of a rendered text, each with its trailing period.
pub fn sentences(text: &str) -> Vec<String> {
    text.split('.')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| format!("{s}."))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCase {
    pub case: CaptionedCase,
    pub findings: Vec<Finding>,
}

impl SimCase {
    pub fn finding(&self, name: &str) -> Option<&Finding> {
        self.findings.iter().find(|f| f.name == name)
    }
}

/// A generated dataset with its hidden state and embeddings.
#[derive(Debug, Clone)]
pub struct SimWorld {
    pub params: FindingWorld,
    pub cases: Vec<SimCase>,
    /// One-hot over (finding, value): slot `2i` present, `2i + 1` absent.
    pub index: EmbeddingIndex,
    by_id: HashMap<String, usize>,
}

impl SimWorld {
    pub fn get(&self, case_id: &str) -> Option<&SimCase> {
        self.by_id.get(case_id).map(|&i| &self.cases[i])
    }

    pub fn captioned_cases(&self) -> Vec<CaptionedCase> {
        self.cases.iter().map(|c| c.case.clone()).collect()
    }

    pub fn corpus(&self) -> Corpus {
        Corpus::new(format!("sim-{}", self.params.seed), self.captioned_cases()).expect("simulated cases are valid")
    }

    /// First `n` cases with the same hidden states and embeddings.
    pub fn truncated(&self, n: usize) -> SimWorld {
        build(self.params.clone(), self.cases.iter().take(n).cloned().collect())
    }

    /// Longest vocabulary entry mentioned in `text`.
    pub fn finding_named_in(&self, text: &str) -> Option<&str> {
        let lower = text.to_lowercase();
        self.params
            .vocabulary
            .iter()
            .filter(|name| lower.contains(name.as_str()))
            .max_by_key(|name| name.len())
            .map(String::as_str)
    }

    /// Whether an answer states the true value of a finding of this case.
    pub fn answer_is_correct(&self, case_id: &str, answer: &str) -> bool {
        self.get(case_id)
            .is_some_and(|c| is_supported(answer, &c.case.report_text))
    }

    /// Fraction of selected examples whose answers are true.
    pub fn precision(&self, examples: &[VqaExample]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let correct = examples
            .iter()
            .filter(|e| self.answer_is_correct(&e.case_id, &e.answer))
            .count();
        correct as f64 / examples.len() as f64
    }

    /// Fraction of the case's findings whose true sentence appears in `caption`.
    pub fn finding_recall(&self, case_id: &str, caption: &str) -> f64 {
        let Some(case) = self.get(case_id) else { return 0.0 };
        let said = sentences(caption);
        let hit = case.findings.iter().filter(|f| said.contains(&f.sentence())).count();
        hit as f64 / case.findings.len() as f64
    }
}

fn build(params: FindingWorld, cases: Vec<SimCase>) -> SimWorld {
    let dim = 2 * params.vocabulary.len();
    let slot: HashMap<&str, usize> = params.vocabulary.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut index = EmbeddingIndex::new(dim);
    for c in &cases {
        let mut v = vec![0.0; dim];
        for f in &c.findings {
            v[2 * slot[f.name.as_str()] + usize::from(!f.present)] = 1.0;
        }
        index.insert(c.case.case_id.clone(), v).expect("one-hot vectors share a dimension");
    }
    let by_id = cases.iter().enumerate().map(|(i, c)| (c.case.case_id.clone(), i)).collect();
    SimWorld {
        params,
        cases,
        index,
        by_id,
    }
}

/// Generates `n_cases` cases. Case `i` depends only on the seed and `i`.
pub fn generate_world(world: &FindingWorld, n_cases: usize) -> Result<SimWorld, SimError> {
    world.validate()?;
    if n_cases == 0 {
        return Err(SimError::NoCases);
    }
    let width = n_cases.to_string().len().max(4);
    let cases = (0..n_cases)
        .map(|i| {
            let case_id = format!("sim-{i:0width$}");
            let mut rng = keyed_rng(world.seed, &["world", &case_id]);
            let n = rng.random_range(world.min_findings..=world.max_findings);
            let mut names: Vec<&String> = world.vocabulary.iter().collect();
            names.shuffle(&mut rng);
            let findings: Vec<Finding> = names[..n]
                .iter()
                .map(|name| Finding {
                    name: (*name).clone(),
                    present: rng.random_bool(world.present_probability),
                })
                .collect();
            let n_images = rng.random_range(1..=world.max_images);
            let image_refs = (0..n_images).map(|k| format!("sim://{case_id}/view{k}")).collect();
            SimCase {
                case: CaptionedCase {
                    case_id,
                    image_refs,
                    report_text: render_report(&findings),
                    split: Split::Train,
                },
                findings,
            }
        })
        .collect();
    Ok(build(world.clone(), cases))
}

/// Case id encoded in a `sim://<case_id>/...` image reference.
pub fn case_id_from_image_ref(image_ref: &str) -> Option<&str> {
    image_ref.strip_prefix("sim://")?.split('/').next()
}

/// Behaviour of the scripted questioning agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentPolicy {
    /// Asks about each of the case's findings once, then stops.
    Coverage,
    /// Asks about random not-yet-asked vocabulary entries.
    Random,
    /// Coverage, but stops after this many questions.
    StopAfter(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Probability that the VQA model negates a finding.
    pub vqa_error_rate: f64,
    pub agent_policy: AgentPolicy,
    /// Probability that the scripted selector judges correctly.
    pub selector_fidelity: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            vqa_error_rate: 0.0,
            agent_policy: AgentPolicy::Coverage,
            selector_fidelity: 1.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        check_probability("vqa_error_rate", self.vqa_error_rate)?;
        check_probability("selector_fidelity", self.selector_fidelity)
    }
}

/// Noisy VQA oracle: the true sentence with probability `1 - error_rate`,
/// the negated one otherwise. The draw is keyed by (seed, case, question).
pub fn scripted_vqa(world: &SimWorld, case: &SimCase, question: &str, error_rate: f64, seed: u64) -> String {
    let Some(finding) = world.finding_named_in(question).and_then(|n| case.finding(n)) else {
        return CANNOT_ANSWER.to_string();
    };
    let mut rng = keyed_rng(seed, &["vqa", &case.case.case_id, question.trim()]);
    let wrong = rng.random::<f64>() < error_rate;
    sentence(&finding.name, finding.present != wrong)
}

/// True when `answer` is one of the sentences of `ground_truth`.
pub fn is_supported(answer: &str, ground_truth: &str) -> bool {
    let answer = sentences(answer);
    !answer.is_empty() && {
        let truth = sentences(ground_truth);
        answer.iter().all(|s| truth.contains(s))
    }
}

/// Exact selector: keeps an entry iff its answer matches the ground truth.
pub fn scripted_selector(entry: &MemoryEntry) -> bool {
    is_supported(&entry.answer, &entry.ground_truth)
}

/// Shared handle used by the scripted backends.
pub type SharedWorld = Arc<SimWorld>;

#[cfg(test)]
mod tests;
