//! TOML run configuration. Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use mocoll_core::backends::{GenerationParams, RemoteConfig, RetryPolicy};
use mocoll_core::curation::{DatasetFormat, SelectionStrategy};
use mocoll_core::orchestrator::OrchestratorConfig;
use mocoll_core::simharness::{default_vocabulary, AblationConfig, AblationKind, AgentPolicy, FindingWorld, SimConfig};
use serde::{Deserialize, Serialize};

pub const AGENT_KEY_ENV: &str = "MOCOLL_AGENT_KEY";
pub const VQA_KEY_ENV: &str = "MOCOLL_VQA_KEY";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub parallelism: usize,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub orchestrator: OrchestratorConfig,
    pub curation: CurationSection,
    pub backends: BackendsSection,
    pub simulation: SimulationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            parallelism: 1,
            output_dir: PathBuf::from("runs"),
            corpus: CorpusSection::default(),
            orchestrator: OrchestratorConfig::default(),
            curation: CurationSection::default(),
            backends: BackendsSection::default(),
            simulation: SimulationSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// JSONL or CSV manifest. Unused when `simulated` is set.
    pub manifest: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Use the world described by `[simulation]` as the corpus.
    pub simulated: bool,
    pub train_ratio: f64,
    /// 3 is the usual cutoff for IU-Xray, 10 for MIMIC-CXR; 0 disables.
    pub min_frequency: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            manifest: None,
            embeddings: None,
            simulated: false,
            train_ratio: mocoll_core::corpus::DEFAULT_TRAIN_RATIO,
            min_frequency: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationSection {
    pub strategy: SelectionStrategy,
    pub format: DatasetFormat,
    pub system_prompt: Option<String>,
    /// Sampling for the question loop and the selection agent.
    pub params: GenerationParams,
}

impl Default for CurationSection {
    fn default() -> Self {
        CurationSection {
            strategy: SelectionStrategy::AgentBased,
            format: DatasetFormat::ChatSftJsonl,
            system_prompt: None,
            params: GenerationParams::curation(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Remote,
    Sim,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsSection {
    pub kind: BackendKind,
    pub agent: Endpoint,
    pub vqa: Endpoint,
    /// Defaults to `agent`.
    pub caption_agent: Option<Endpoint>,
    /// Defaults to `agent`.
    pub select_agent: Option<Endpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Endpoint {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub retry_base_delay_ms: u64,
    pub max_in_flight: usize,
}

impl Default for Endpoint {
    fn default() -> Self {
        Endpoint {
            base_url: String::new(),
            model: String::new(),
            timeout_secs: 300,
            max_retries: RetryPolicy::default().max_retries,
            retry_base_delay_ms: RetryPolicy::default().base_delay.as_millis() as u64,
            max_in_flight: 8,
        }
    }
}

impl Endpoint {
    pub fn remote_config(&self, role: &str, api_key: Option<String>, vision: bool, trace: bool) -> Result<RemoteConfig> {
        if self.base_url.is_empty() || self.model.is_empty() {
            bail!("backends.{role} needs base_url and model");
        }
        let mut rc = RemoteConfig::new(&self.base_url, &self.model);
        rc.api_key = api_key;
        rc.vision = vision;
        rc.retry = RetryPolicy {
            max_retries: self.max_retries,
            base_delay: Duration::from_millis(self.retry_base_delay_ms),
        };
        rc.timeout = Duration::from_secs(self.timeout_secs);
        rc.max_in_flight = self.max_in_flight;
        rc.trace = trace;
        Ok(rc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl GridValue {
    pub fn render(&self) -> String {
        match self {
            GridValue::Int(i) => i.to_string(),
            GridValue::Float(f) => f.to_string(),
            GridValue::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    /// Finding names; empty means the built-in list.
    pub vocabulary: Vec<String>,
    pub min_findings: usize,
    pub max_findings: usize,
    pub present_probability: f64,
    pub max_images: usize,
    pub n_cases: usize,
    /// VQA error rate.
    pub epsilon: f64,
    /// `coverage`, `random` or `stop_after=<j>`.
    pub policy: String,
    pub selector_fidelity: f64,
    /// World seed; also drives the simulated models unless `sim_seed` is set.
    pub seed: u64,
    pub sim_seed: Option<u64>,
    pub max_questions: usize,
    pub few_shot_k: usize,
    /// Strategy used by the data_size sweep.
    pub strategy: SelectionStrategy,
    pub ablations: Vec<AblationKind>,
    pub grids: BTreeMap<String, Vec<GridValue>>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let world = FindingWorld::default();
        SimulationSection {
            vocabulary: default_vocabulary(),
            min_findings: world.min_findings,
            max_findings: world.max_findings,
            present_probability: world.present_probability,
            max_images: world.max_images,
            n_cases: 200,
            epsilon: 0.0,
            policy: "coverage".into(),
            selector_fidelity: 1.0,
            seed: world.seed,
            sim_seed: None,
            max_questions: 4,
            few_shot_k: 0,
            strategy: SelectionStrategy::AgentBased,
            ablations: AblationKind::ALL.to_vec(),
            grids: BTreeMap::new(),
        }
    }
}

pub fn parse_policy(s: &str) -> Result<AgentPolicy> {
    let s = s.trim();
    match s {
        "coverage" => Ok(AgentPolicy::Coverage),
        "random" => Ok(AgentPolicy::Random),
        _ => {
            let j = s
                .strip_prefix("stop_after")
                .map(|r| r.trim_start_matches(['=', ':', '(']).trim_end_matches(')'))
                .and_then(|r| r.parse().ok())
                .with_context(|| format!("unknown agent policy {s:?} (coverage, random, stop_after=<j>)"))?;
            Ok(AgentPolicy::StopAfter(j))
        }
    }
}

impl SimulationSection {
    pub fn world(&self) -> FindingWorld {
        FindingWorld {
            vocabulary: if self.vocabulary.is_empty() { default_vocabulary() } else { self.vocabulary.clone() },
            min_findings: self.min_findings,
            max_findings: self.max_findings,
            present_probability: self.present_probability,
            max_images: self.max_images,
            seed: self.seed,
        }
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let sim = SimConfig {
            vqa_error_rate: self.epsilon,
            agent_policy: parse_policy(&self.policy)?,
            selector_fidelity: self.selector_fidelity,
            seed: self.sim_seed.unwrap_or(self.seed),
        };
        sim.validate()?;
        Ok(sim)
    }

    pub fn ablation_config(&self, parallelism: usize) -> Result<AblationConfig> {
        Ok(AblationConfig {
            world: self.world(),
            n_cases: self.n_cases,
            sim: self.sim_config()?,
            max_questions: self.max_questions,
            few_shot_k: self.few_shot_k,
            strategy: self.strategy,
            parallelism,
        })
    }

    pub fn grid(&self, kind: AblationKind) -> Vec<String> {
        match self.grids.get(kind.as_str()) {
            Some(values) => values.iter().map(GridValue::render).collect(),
            None => kind.default_grid(),
        }
    }

    fn validate(&self) -> Result<()> {
        self.world().validate()?;
        self.sim_config()?;
        for key in self.grids.keys() {
            key.parse::<AblationKind>()
                .map_err(|_| anyhow::anyhow!("simulation.grids: unknown ablation {key:?}"))?;
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if !(self.corpus.train_ratio > 0.0 && self.corpus.train_ratio < 1.0) {
            bail!("corpus.train_ratio must lie in (0, 1)");
        }
        for (key, path) in [("corpus.manifest", &self.corpus.manifest), ("corpus.embeddings", &self.corpus.embeddings)] {
            if let Some(p) = path {
                if !p.exists() {
                    bail!("{key}: {} does not exist", p.display());
                }
            }
        }
        if self.backends.kind == BackendKind::Sim && !self.corpus.simulated {
            bail!("sim backends only understand the simulated corpus; set corpus.simulated = true");
        }
        self.orchestrator.validate()?;
        self.curation.strategy.validate()?;
        self.simulation.validate()
    }

    /// Settings that determine outputs. Parallelism and output location are
    /// left out so that they never change what gets written.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("parallelism");
            obj.remove("output_dir");
        }
        v
    }
}
