//! The collaboration loop: a text-only agent asks up to `M` questions, a VQA
//! model answers each from the images, and the agent then writes the report
//! from the transcript.

pub mod prompts;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::{chat, BackendError, ChatBackend, ChatMessage, EmbeddingIndex, GenerationParams};
use crate::corpus::CaptionedCase;
use crate::retrieval::{select_examples, ExampleSet, FewShotConfig, RetrievalError};
pub use prompts::PromptSet;
use prompts::{render, render_examples, render_transcript, QUESTION_REPROMPT};

/// Question budget for within-dataset evaluation.
pub const WITHIN_DATASET_MAX_QUESTIONS: usize = 6;
/// Question budget for cross-dataset generalization.
pub const CROSS_DATASET_MAX_QUESTIONS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("agent reply could not be parsed: {0:?}")]
    Unparseable(String),
    #[error("question is empty")]
    EmptyQuestion,
    #[error("VQA model returned an empty answer")]
    EmptyAnswer,
    #[error("agent returned an empty caption")]
    EmptyCaption,
    #[error("few-shot selection failed: {0}")]
    Retrieval(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("all {0} cases failed")]
    AllFailed(usize),
}

impl From<RetrievalError> for OrchestratorError {
    fn from(e: RetrievalError) -> Self {
        OrchestratorError::Retrieval(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrchestratorConfig {
    pub max_questions: usize,
    pub few_shot: FewShotConfig,
    pub agent_params: GenerationParams,
    pub vqa_params: GenerationParams,
    pub prompts: PromptSet,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            max_questions: WITHIN_DATASET_MAX_QUESTIONS,
            few_shot: FewShotConfig::default(),
            agent_params: GenerationParams::evaluation(),
            vqa_params: GenerationParams::evaluation(),
            prompts: PromptSet::default(),
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.max_questions == 0 {
            return Err(OrchestratorError::InvalidConfig("max_questions must be >= 1".into()));
        }
        self.prompts.validate().map_err(OrchestratorError::InvalidConfig)
    }
}

/// The four model roles. The agent roles may share one endpoint.
#[derive(Clone)]
pub struct Backends {
    pub question_agent: Arc<dyn ChatBackend>,
    pub caption_agent: Arc<dyn ChatBackend>,
    pub select_agent: Arc<dyn ChatBackend>,
    pub vqa: Arc<dyn ChatBackend>,
}

impl Backends {
    pub fn model_meta(&self) -> BTreeMap<String, Value> {
        [
            ("question_agent", self.question_agent.model_name()),
            ("caption_agent", self.caption_agent.model_name()),
            ("select_agent", self.select_agent.model_name()),
            ("vqa", self.vqa.model_name()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), Value::String(v.to_string())))
        .collect()
    }
}

/// Where few-shot captions come from: the training cases plus, for the
/// similarity strategy, their image embeddings.
#[derive(Debug, Clone, Default)]
pub struct ExamplePool {
    pub cases: Vec<CaptionedCase>,
    pub index: Option<EmbeddingIndex>,
}

impl ExamplePool {
    pub fn new(cases: Vec<CaptionedCase>, index: Option<EmbeddingIndex>) -> Self {
        ExamplePool { cases, index }
    }

    pub fn examples_for(&self, case: &CaptionedCase, config: &FewShotConfig) -> Result<ExampleSet, RetrievalError> {
        select_examples(case, &self.cases, config, self.index.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    #[serde(rename = "i")]
    pub index: usize,
    #[serde(rename = "q")]
    pub question: String,
    #[serde(rename = "a")]
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AgentStop,
    MaxQuestions,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentDecision {
    Ask(String),
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub case_id: String,
    pub turns: Vec<ConversationTurn>,
    pub caption: Option<String>,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub model_meta: BTreeMap<String, Value>,
}

impl Conversation {
    fn new(case_id: &str) -> Self {
        Conversation {
            case_id: case_id.to_string(),
            turns: Vec::new(),
            caption: None,
            stop_reason: StopReason::Error,
            error: None,
            model_meta: BTreeMap::new(),
        }
    }

    fn fail(&mut self, err: &OrchestratorError) {
        self.stop_reason = StopReason::Error;
        self.error = Some(err.to_string());
    }

    pub fn failed(&self) -> bool {
        self.stop_reason == StopReason::Error
    }

    pub fn example_ids(&self) -> Vec<String> {
        match self.model_meta.get("example_ids") {
            Some(Value::Array(ids)) => ids.iter().filter_map(|v| v.as_str().map(String::from)).collect(),
            _ => Vec::new(),
        }
    }
}

/// Pulls the first `{...}` object out of a reply, tolerating code fences and
/// surrounding prose.
pub(crate) fn extract_json_object(reply: &str) -> Option<Value> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end < start {
        return None;
    }
    serde_json::from_str(&reply[start..=end]).ok()
}

fn parse_decision(reply: &str) -> Option<AgentDecision> {
    let value = extract_json_object(reply)?;
    match value.get("action")?.as_str()?.trim().to_ascii_lowercase().as_str() {
        "stop" => Some(AgentDecision::Stop),
        "ask" => {
            let q = value.get("question")?.as_str()?.trim();
            (!q.is_empty()).then(|| AgentDecision::Ask(q.to_string()))
        }
        _ => None,
    }
}

fn agent_messages(
    system_template: &str,
    user_template: &str,
    case_id: &str,
    transcript: &[ConversationTurn],
    examples: &ExampleSet,
    prompts: &PromptSet,
) -> Vec<ChatMessage> {
    let examples = render_examples(examples);
    let transcript = render_transcript(transcript);
    let vars = [
        ("instruction", prompts.instruction.as_str()),
        ("examples", examples.as_str()),
        ("transcript", transcript.as_str()),
        ("case_id", case_id),
    ];
    vec![
        ChatMessage::system(render(system_template, &vars)),
        ChatMessage::user(render(user_template, &vars)),
    ]
}

/// Asks the agent for its next move. One re-prompt on an unparseable reply.
pub fn next_question(
    agent: &dyn ChatBackend,
    case_id: &str,
    transcript: &[ConversationTurn],
    examples: &ExampleSet,
    prompts: &PromptSet,
    params: &GenerationParams,
) -> Result<AgentDecision, OrchestratorError> {
    let mut messages = agent_messages(
        &prompts.question_system,
        &prompts.question_user,
        case_id,
        transcript,
        examples,
        prompts,
    );
    let reply = chat(agent, &messages, params)?;
    if let Some(decision) = parse_decision(&reply) {
        return Ok(decision);
    }
    log::debug!("{case_id}: unparseable agent reply {reply:?}, re-prompting");
    messages.push(ChatMessage::assistant(reply));
    messages.push(ChatMessage::user(QUESTION_REPROMPT));
    let retry = chat(agent, &messages, params)?;
    parse_decision(&retry).ok_or(OrchestratorError::Unparseable(retry))
}

/// Sends one question plus the case images to the VQA model.
pub fn answer_question(
    vqa: &dyn ChatBackend,
    question: &str,
    image_refs: &[String],
    params: &GenerationParams,
) -> Result<String, OrchestratorError> {
    if question.trim().is_empty() {
        return Err(OrchestratorError::EmptyQuestion);
    }
    let reply = chat(vqa, &[ChatMessage::user_with_images(question, image_refs)], params)?;
    let answer = reply.trim();
    if answer.is_empty() {
        return Err(OrchestratorError::EmptyAnswer);
    }
    Ok(answer.to_string())
}

/// Has the agent write the report from the transcript (which may be empty).
pub fn compose_caption(
    agent: &dyn ChatBackend,
    case_id: &str,
    transcript: &[ConversationTurn],
    examples: &ExampleSet,
    prompts: &PromptSet,
    params: &GenerationParams,
) -> Result<String, OrchestratorError> {
    let messages = agent_messages(
        &prompts.caption_system,
        &prompts.caption_user,
        case_id,
        transcript,
        examples,
        prompts,
    );
    let caption = chat(agent, &messages, params)?;
    let caption = caption.trim();
    if caption.is_empty() {
        return Err(OrchestratorError::EmptyCaption);
    }
    Ok(caption.to_string())
}

/// Runs the question/answer loop only; `caption` stays `None`.
pub fn run_questions(
    case: &CaptionedCase,
    config: &OrchestratorConfig,
    backends: &Backends,
    pool: &ExamplePool,
) -> (Conversation, ExampleSet) {
    let mut conv = Conversation::new(&case.case_id);
    conv.model_meta = backends.model_meta();
    let examples = match pool.examples_for(case, &config.few_shot) {
        Ok(ex) => ex,
        Err(e) => {
            conv.fail(&e.into());
            return (conv, ExampleSet::empty(config.few_shot.strategy));
        }
    };
    conv.model_meta.insert(
        "example_ids".into(),
        Value::Array(examples.examples.iter().map(|e| Value::String(e.case_id.clone())).collect()),
    );

    for j in 1..=config.max_questions {
        let decision = next_question(
            backends.question_agent.as_ref(),
            &case.case_id,
            &conv.turns,
            &examples,
            &config.prompts,
            &config.agent_params,
        );
        let question = match decision {
            Ok(AgentDecision::Stop) => {
                conv.stop_reason = StopReason::AgentStop;
                return (conv, examples);
            }
            Ok(AgentDecision::Ask(q)) => q,
            Err(e) => {
                conv.fail(&e);
                return (conv, examples);
            }
        };
        match answer_question(backends.vqa.as_ref(), &question, &case.image_refs, &config.vqa_params) {
            Ok(answer) => conv.turns.push(ConversationTurn {
                index: j,
                question,
                answer,
            }),
            Err(e) => {
                conv.fail(&e);
                return (conv, examples);
            }
        }
    }
    conv.stop_reason = StopReason::MaxQuestions;
    (conv, examples)
}

/// Adds the caption to a finished question loop. No-op for failed loops.
pub fn finish_with_caption(
    conv: &mut Conversation,
    examples: &ExampleSet,
    config: &OrchestratorConfig,
    backends: &Backends,
) {
    if conv.failed() {
        return;
    }
    match compose_caption(
        backends.caption_agent.as_ref(),
        &conv.case_id,
        &conv.turns,
        examples,
        &config.prompts,
        &config.agent_params,
    ) {
        Ok(caption) => conv.caption = Some(caption),
        Err(e) => conv.fail(&e),
    }
}

/// Full loop for one case: questions, answers, then the caption.
pub fn run_conversation(
    case: &CaptionedCase,
    config: &OrchestratorConfig,
    backends: &Backends,
    pool: &ExamplePool,
) -> Conversation {
    let (mut conv, examples) = run_questions(case, config, backends, pool);
    finish_with_caption(&mut conv, &examples, config, backends);
    conv
}

/// Applies `work` to every case on a pool of `parallelism` threads, keeping
/// input order. `on_done` sees each result as it completes.
pub(crate) fn parallel_map<T, R, F, D>(items: &[T], parallelism: usize, work: F, on_done: D) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
    D: Fn(&R) + Sync,
{
    let run = || items.par_iter().map(|item| {
        let r = work(item);
        on_done(&r);
        r
    }).collect();
    if parallelism <= 1 {
        return items.iter().map(|item| {
            let r = work(item);
            on_done(&r);
            r
        }).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
        Ok(pool) => pool.install(run),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}); running on the global pool");
            run()
        }
    }
}

/// Runs many conversations concurrently. Per-case failures are recorded in
/// the returned conversations; only a batch where every case fails is an error.
pub fn run_batch(
    cases: &[CaptionedCase],
    config: &OrchestratorConfig,
    backends: &Backends,
    pool: &ExamplePool,
    parallelism: usize,
) -> Result<Vec<Conversation>, OrchestratorError> {
    run_batch_with(cases, config, backends, pool, parallelism, |_| {})
}

pub fn run_batch_with<D>(
    cases: &[CaptionedCase],
    config: &OrchestratorConfig,
    backends: &Backends,
    pool: &ExamplePool,
    parallelism: usize,
    on_done: D,
) -> Result<Vec<Conversation>, OrchestratorError>
where
    D: Fn(&Conversation) + Sync,
{
    config.validate()?;
    let done = AtomicUsize::new(0);
    let total = cases.len();
    let convs = parallel_map(
        cases,
        parallelism.max(1),
        |case| run_conversation(case, config, backends, pool),
        |conv| {
            let n = done.fetch_add(1, Ordering::Relaxed) + 1;
            if let Some(err) = &conv.error {
                log::warn!("{}: {err}", conv.case_id);
            }
            log::info!("[{n}/{total}] {} ({:?}, {} turns)", conv.case_id, conv.stop_reason, conv.turns.len());
            on_done(conv);
        },
    );
    if !convs.is_empty() && convs.iter().all(Conversation::failed) {
        return Err(OrchestratorError::AllFailed(convs.len()));
    }
    Ok(convs)
}

/// One JSON object per line, in the given order.
pub fn write_conversation_log(path: &Path, conversations: &[Conversation]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for conv in conversations {
        writeln!(out, "{}", serde_json::to_string(conv).map_err(std::io::Error::other)?)?;
    }
    out.flush()
}

pub fn read_conversation_log(path: &Path) -> std::io::Result<Vec<Conversation>> {
    let mut convs = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // a truncated final line from an interrupted run is skipped
        match serde_json::from_str(&line) {
            Ok(conv) => convs.push(conv),
            Err(e) => log::warn!("{}: skipping unreadable record: {e}", path.display()),
        }
    }
    Ok(convs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{FnBackend, RecordingBackend, ScriptedBackend};
    use crate::corpus::Split;
    use crate::retrieval::FewShotStrategy;

    fn case(id: &str) -> CaptionedCase {
        CaptionedCase::new(id, vec![format!("{id}.png")], format!("report for {id}."), Split::Test).unwrap()
    }

    fn no_examples() -> OrchestratorConfig {
        OrchestratorConfig {
            few_shot: FewShotConfig { k: 0, strategy: FewShotStrategy::Random, seed: 0 },
            ..Default::default()
        }
    }

    fn ask(q: &str) -> String {
        serde_json::json!({"action": "ask", "question": q}).to_string()
    }

    fn backends(agent: Arc<dyn ChatBackend>, caption: Arc<dyn ChatBackend>, vqa: Arc<dyn ChatBackend>) -> Backends {
        Backends {
            question_agent: agent.clone(),
            caption_agent: caption,
            select_agent: agent,
            vqa,
        }
    }

    #[test]
    fn stop_sentinel() {
        let agent = ScriptedBackend::new("a", [r#"{"action":"stop"}"#]);
        let d = next_question(&agent, "c", &[], &ExampleSet::empty(FewShotStrategy::Random), &PromptSet::default(), &GenerationParams::default());
        assert_eq!(d.unwrap(), AgentDecision::Stop);
    }

    #[test]
    fn ask_is_parsed_even_inside_fences() {
        let reply = format!("```json\n{}\n```", ask("Can you provide details about the lung fields?"));
        let agent = ScriptedBackend::new("a", [reply]);
        let d = next_question(&agent, "c", &[], &ExampleSet::empty(FewShotStrategy::Random), &PromptSet::default(), &GenerationParams::default());
        assert_eq!(d.unwrap(), AgentDecision::Ask("Can you provide details about the lung fields?".into()));
    }

    #[test]
    fn one_reprompt_then_error() {
        let agent = RecordingBackend::new(ScriptedBackend::new("a", ["ok", "ok"]));
        let d = next_question(&agent, "c", &[], &ExampleSet::empty(FewShotStrategy::Random), &PromptSet::default(), &GenerationParams::default());
        assert_eq!(d.unwrap_err(), OrchestratorError::Unparseable("ok".into()));
        let calls = agent.calls();
        assert_eq!(calls.len(), 2);
        assert_eq!(calls[1].len(), 4);
        assert_eq!(calls[1][3].text_content(), QUESTION_REPROMPT);

        let agent = ScriptedBackend::new("a", ["ok".to_string(), ask("better?")]);
        let d = next_question(&agent, "c", &[], &ExampleSet::empty(FewShotStrategy::Random), &PromptSet::default(), &GenerationParams::default());
        assert_eq!(d.unwrap(), AgentDecision::Ask("better?".into()));
    }

    #[test]
    fn ask_with_blank_question_is_unparseable() {
        let agent = ScriptedBackend::new("a", [ask("  "), ask("")]);
        let d = next_question(&agent, "c", &[], &ExampleSet::empty(FewShotStrategy::Random), &PromptSet::default(), &GenerationParams::default());
        assert!(matches!(d, Err(OrchestratorError::Unparseable(_))));
    }

    #[test]
    fn answer_is_trimmed_and_checked() {
        let vqa = ScriptedBackend::new("v", ["  the lungs are clear with no signs of consolidation or hyperinflation.\n"]).with_vision(true);
        let a = answer_question(&vqa, "Any consolidation?", &["x.png".into()], &GenerationParams::default()).unwrap();
        assert_eq!(a, "the lungs are clear with no signs of consolidation or hyperinflation.");
        assert_eq!(
            answer_question(&vqa, " ", &["x.png".into()], &GenerationParams::default()),
            Err(OrchestratorError::EmptyQuestion)
        );
        let blank = ScriptedBackend::new("v", ["  "]).with_vision(true);
        assert_eq!(
            answer_question(&blank, "q", &["x.png".into()], &GenerationParams::default()),
            Err(OrchestratorError::EmptyAnswer)
        );
    }

    #[test]
    fn runs_to_max_questions() {
        let agent = Arc::new(ScriptedBackend::new("a", [ask("q1"), ask("q2"), ask("q3")]));
        let caption = Arc::new(ScriptedBackend::new("c", ["final report."]));
        let vqa = Arc::new(ScriptedBackend::new("v", ["a1", "a2", "a3"]).with_vision(true));
        let mut config = no_examples();
        config.max_questions = 3;
        let conv = run_conversation(&case("x"), &config, &backends(agent.clone(), caption, vqa), &ExamplePool::default());
        assert_eq!(conv.stop_reason, StopReason::MaxQuestions);
        assert_eq!(conv.turns.len(), 3);
        assert_eq!(conv.turns[2], ConversationTurn { index: 3, question: "q3".into(), answer: "a3".into() });
        assert_eq!(conv.caption.as_deref(), Some("final report."));
        assert_eq!(agent.remaining(), 0);
    }

    #[test]
    fn immediate_stop_still_captions() {
        let agent = Arc::new(ScriptedBackend::new("a", [r#"{"action":"stop"}"#]));
        let caption = Arc::new(RecordingBackend::new(ScriptedBackend::new("c", ["no acute disease."])));
        let vqa = Arc::new(ScriptedBackend::new("v", Vec::<String>::new()).with_vision(true));
        let conv = run_conversation(&case("x"), &no_examples(), &backends(agent, caption.clone(), vqa), &ExamplePool::default());
        assert_eq!(conv.stop_reason, StopReason::AgentStop);
        assert!(conv.turns.is_empty());
        assert_eq!(conv.caption.as_deref(), Some("no acute disease."));
        let prompt = caption.calls()[0][1].text_content();
        assert!(prompt.contains(prompts::EMPTY_TRANSCRIPT));
    }

    #[test]
    fn backend_failure_keeps_partial_transcript() {
        let agent = Arc::new(ScriptedBackend::new("a", [ask("q1"), ask("q2")]));
        let caption = Arc::new(ScriptedBackend::new("c", ["unused"]));
        let vqa = Arc::new(
            ScriptedBackend::from_results("v", [Ok("a1".to_string()), Err(BackendError::Transport("reset".into()))])
                .with_vision(true),
        );
        let conv = run_conversation(&case("x"), &no_examples(), &backends(agent, caption, vqa), &ExamplePool::default());
        assert_eq!(conv.stop_reason, StopReason::Error);
        assert_eq!(conv.turns.len(), 1);
        assert!(conv.caption.is_none());
        assert!(conv.error.unwrap().contains("reset"));
    }

    #[test]
    fn caption_receives_exact_transcript() {
        let agent = Arc::new(ScriptedBackend::new("a", [ask("q1"), ask("q2"), r#"{"action":"stop"}"#.to_string()]));
        let caption = Arc::new(RecordingBackend::new(ScriptedBackend::new("c", ["r"])));
        let vqa = Arc::new(ScriptedBackend::new("v", ["a1", "a2"]).with_vision(true));
        let conv = run_conversation(&case("x"), &no_examples(), &backends(agent, caption.clone(), vqa), &ExamplePool::default());
        let prompt = caption.calls()[0][1].text_content();
        assert!(prompt.ends_with("Q1: q1\nA1: a1\nQ2: q2\nA2: a2"));
        let parsed = prompts::parse_transcript(&prompt);
        let turns: Vec<_> = conv.turns.iter().map(|t| (t.question.clone(), t.answer.clone())).collect();
        assert_eq!(parsed, turns);
    }

    #[test]
    fn agent_never_sees_images() {
        let agent = Arc::new(RecordingBackend::new(ScriptedBackend::new("a", [ask("q1"), r#"{"action":"stop"}"#.to_string()])));
        let caption = Arc::new(ScriptedBackend::new("c", ["r"]));
        let vqa = Arc::new(RecordingBackend::new(ScriptedBackend::new("v", ["a1"]).with_vision(true)));
        run_conversation(&case("x"), &no_examples(), &backends(agent.clone(), caption, vqa.clone()), &ExamplePool::default());
        assert!(agent.calls().iter().flatten().all(|m| !m.has_images()));
        assert_eq!(vqa.calls()[0][0].image_refs().collect::<Vec<_>>(), vec!["x.png"]);
    }

    #[test]
    fn batch_preserves_order_and_isolates_failures() {
        // the agent fails for case c3 only
        let agent: Arc<dyn ChatBackend> = Arc::new(FnBackend::new("a", false, |m, _| {
            let user = m[1].text_content();
            if user.contains("Case: c3") {
                return Err(BackendError::Other("boom".into()));
            }
            if prompts::parse_transcript(&user).len() < 2 {
                Ok(serde_json::json!({"action":"ask","question":"next?"}).to_string())
            } else {
                Ok(r#"{"action":"stop"}"#.into())
            }
        }));
        let caption: Arc<dyn ChatBackend> = Arc::new(FnBackend::new("c", false, |m, _| {
            Ok(format!("report for {}", prompts::parse_case_id(&m[1].text_content()).unwrap()))
        }));
        let vqa: Arc<dyn ChatBackend> = Arc::new(FnBackend::new("v", true, |m, _| Ok(format!("seen {}", m[0].image_refs().next().unwrap()))));
        let b = backends(agent, caption, vqa);
        let cases: Vec<_> = (0..10).map(|i| case(&format!("c{i}"))).collect();
        let serial = run_batch(&cases, &no_examples(), &b, &ExamplePool::default(), 1).unwrap();
        let parallel = run_batch(&cases, &no_examples(), &b, &ExamplePool::default(), 4).unwrap();
        assert_eq!(serial, parallel);
        let ids: Vec<_> = parallel.iter().map(|c| c.case_id.clone()).collect();
        assert_eq!(ids, cases.iter().map(|c| c.case_id.clone()).collect::<Vec<_>>());
        assert_eq!(parallel.iter().filter(|c| c.failed()).count(), 1);
        assert!(parallel[3].failed());
        assert_eq!(parallel[0].caption.as_deref(), Some("report for c0"));
        assert_eq!(parallel[0].turns[1].answer, "seen c0.png");
    }

    #[test]
    fn batch_where_everything_fails_is_an_error() {
        let dead: Arc<dyn ChatBackend> = Arc::new(FnBackend::new("d", true, |_, _| Err(BackendError::Other("down".into()))));
        let b = backends(dead.clone(), dead.clone(), dead);
        let cases = vec![case("a"), case("b")];
        assert_eq!(
            run_batch(&cases, &no_examples(), &b, &ExamplePool::default(), 2).unwrap_err(),
            OrchestratorError::AllFailed(2)
        );
    }

    #[test]
    fn zero_question_budget_is_rejected() {
        let mut config = no_examples();
        config.max_questions = 0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn log_round_trip_and_field_names() {
        let conv = Conversation {
            case_id: "x".into(),
            turns: vec![ConversationTurn { index: 1, question: "q".into(), answer: "a".into() }],
            caption: Some("c".into()),
            stop_reason: StopReason::AgentStop,
            error: None,
            model_meta: BTreeMap::new(),
        };
        let line = serde_json::to_value(&conv).unwrap();
        assert_eq!(line["turns"][0], serde_json::json!({"i": 1, "q": "q", "a": "a"}));
        assert_eq!(line["stop_reason"], "agent_stop");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_conversation_log(&path, std::slice::from_ref(&conv)).unwrap();
        assert_eq!(read_conversation_log(&path).unwrap(), vec![conv]);
    }
}
