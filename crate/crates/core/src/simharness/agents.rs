//! Scripted backends that read everything they need from the request text,
//! so they behave like remote models and stay deterministic under any
//! call interleaving.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::json;

use super::{
    case_id_from_image_ref, is_supported, scripted_vqa, sentences, AgentPolicy, SharedWorld, SimConfig, CANNOT_ANSWER,
};
use crate::backends::{BackendError, ChatBackend, ChatMessage, GenerationParams, Role};
use crate::orchestrator::prompts::{field_line, parse_case_id, parse_transcript};
use crate::orchestrator::Backends;
use crate::seed::keyed_rng;

fn user_text(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .filter(|m| m.role == Role::User)
        .map(ChatMessage::text_content)
        .collect::<Vec<_>>()
        .join("\n")
}

fn missing(what: &str) -> BackendError {
    BackendError::Other(format!("simulated backend: request has no {what}"))
}

/// Question text used by the scripted agent for a finding.
pub fn question_for(name: &str) -> String {
    format!("Is there any evidence of {name}?")
}

pub struct SimQuestionAgent {
    world: SharedWorld,
    policy: AgentPolicy,
    seed: u64,
}

impl SimQuestionAgent {
    pub fn new(world: SharedWorld, config: &SimConfig) -> Self {
        SimQuestionAgent {
            world,
            policy: config.agent_policy,
            seed: config.seed,
        }
    }

    fn decide(&self, text: &str) -> Result<Option<String>, BackendError> {
        let case_id = parse_case_id(text).ok_or_else(|| missing("case id"))?;
        let case = self
            .world
            .get(case_id)
            .ok_or_else(|| BackendError::Other(format!("unknown simulated case {case_id}")))?;
        let transcript = parse_transcript(text);
        let asked: HashSet<&str> = transcript
            .iter()
            .filter_map(|(q, _)| self.world.finding_named_in(q))
            .collect();
        let next_coverage = || {
            case.findings
                .iter()
                .map(|f| f.name.as_str())
                .find(|n| !asked.contains(n))
        };
        let next = match self.policy {
            AgentPolicy::Coverage => next_coverage(),
            AgentPolicy::StopAfter(j) if transcript.len() >= j => None,
            AgentPolicy::StopAfter(_) => next_coverage(),
            AgentPolicy::Random => {
                let open: Vec<&str> = self
                    .world
                    .params
                    .vocabulary
                    .iter()
                    .map(String::as_str)
                    .filter(|n| !asked.contains(n))
                    .collect();
                let turn = transcript.len().to_string();
                let mut rng = keyed_rng(self.seed, &["agent", case_id, &turn]);
                open.choose(&mut rng).copied()
            }
        };
        Ok(next.map(question_for))
    }
}

impl ChatBackend for SimQuestionAgent {
    fn model_name(&self) -> &str {
        "sim-question-agent"
    }

    fn supports_vision(&self) -> bool {
        false
    }

    fn complete(&self, messages: &[ChatMessage], _: &GenerationParams) -> Result<String, BackendError> {
        let reply = match self.decide(&user_text(messages))? {
            Some(q) => json!({"action": "ask", "question": q}),
            None => json!({"action": "stop"}),
        };
        Ok(reply.to_string())
    }
}

/// Writes the report as the answered sentences, in question order.
pub struct SimCaptionAgent;

impl ChatBackend for SimCaptionAgent {
    fn model_name(&self) -> &str {
        "sim-caption-agent"
    }

    fn supports_vision(&self) -> bool {
        false
    }

    fn complete(&self, messages: &[ChatMessage], _: &GenerationParams) -> Result<String, BackendError> {
        let said: Vec<String> = parse_transcript(&user_text(messages))
            .into_iter()
            .filter(|(_, a)| a.trim() != CANNOT_ANSWER)
            .flat_map(|(_, a)| sentences(&a))
            .collect();
        if said.is_empty() {
            return Ok("no findings gathered.".into());
        }
        Ok(said.join(" "))
    }
}

pub struct SimVqa {
    world: SharedWorld,
    error_rate: f64,
    seed: u64,
}

impl SimVqa {
    pub fn new(world: SharedWorld, config: &SimConfig) -> Self {
        SimVqa {
            world,
            error_rate: config.vqa_error_rate,
            seed: config.seed,
        }
    }
}

impl ChatBackend for SimVqa {
    fn model_name(&self) -> &str {
        "sim-vqa"
    }

    fn supports_vision(&self) -> bool {
        true
    }

    fn complete(&self, messages: &[ChatMessage], _: &GenerationParams) -> Result<String, BackendError> {
        let case_id = messages
            .iter()
            .flat_map(ChatMessage::image_refs)
            .find_map(case_id_from_image_ref)
            .ok_or_else(|| missing("sim:// image"))?;
        let case = self
            .world
            .get(case_id)
            .ok_or_else(|| BackendError::Other(format!("unknown simulated case {case_id}")))?;
        Ok(scripted_vqa(&self.world, case, &user_text(messages), self.error_rate, self.seed))
    }
}

/// Judges answers against the ground truth; each judgement is flipped with
/// probability `1 - fidelity`.
pub struct SimSelector {
    fidelity: f64,
    seed: u64,
}

impl SimSelector {
    pub fn new(config: &SimConfig) -> Self {
        SimSelector {
            fidelity: config.selector_fidelity,
            seed: config.seed,
        }
    }
}

impl ChatBackend for SimSelector {
    fn model_name(&self) -> &str {
        "sim-selector"
    }

    fn supports_vision(&self) -> bool {
        false
    }

    fn complete(&self, messages: &[ChatMessage], _: &GenerationParams) -> Result<String, BackendError> {
        let text = user_text(messages);
        let question = field_line(&text, "Question: ").unwrap_or("");
        let answer = field_line(&text, "Answer: ").ok_or_else(|| missing("answer"))?;
        let truth = field_line(&text, "Ground truth: ").ok_or_else(|| missing("ground truth"))?;
        let mut keep = is_supported(answer, truth);
        if self.fidelity < 1.0 {
            let mut rng = keyed_rng(self.seed, &["select", question, answer, truth]);
            if rng.random::<f64>() >= self.fidelity {
                keep = !keep;
            }
        }
        Ok(json!({ "keep": keep }).to_string())
    }
}

/// All four roles wired to one simulated world.
pub fn sim_backends(world: SharedWorld, config: &SimConfig) -> Backends {
    Backends {
        question_agent: Arc::new(SimQuestionAgent::new(world.clone(), config)),
        caption_agent: Arc::new(SimCaptionAgent),
        select_agent: Arc::new(SimSelector::new(config)),
        vqa: Arc::new(SimVqa::new(world, config)),
    }
}
