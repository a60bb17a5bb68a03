//! Prompt templates for the agent roles. Placeholders are `{name}`; any other
//! brace text (such as the JSON reply formats) is left alone.

use serde::{Deserialize, Serialize};

use super::ConversationTurn;
use crate::retrieval::ExampleSet;

/// Task instruction for report generation.
pub const DEFAULT_INSTRUCTION: &str = "Provide a diagnostic report based on the given image(s).";

/// Transcript text used before any question has been answered.
pub const EMPTY_TRANSCRIPT: &str = "No findings gathered.";

const QUESTION_SYSTEM: &str = "You are an expert radiologist who cannot see the study yourself. \
A visual question answering assistant can look at the image(s) and answers one question at a time. \
Your task: {instruction}\n\
Ask short, specific questions that gather the information the report needs. \
Do not repeat questions that were already answered.\n\
{examples}\
Reply with exactly one JSON object and nothing else: \
{\"action\":\"ask\",\"question\":\"<next question>\"} to ask another question, \
or {\"action\":\"stop\"} when you have enough information.";

const QUESTION_USER: &str = "Case: {case_id}\nConversation so far:\n{transcript}";

const CAPTION_SYSTEM: &str = "You are an expert radiologist writing the final report for a study. \
Your task: {instruction}\n\
Write the report from the conversation with the visual assistant below, \
in the style of the example reports when they are given.\n\
{examples}\
Reply with the report text only.";

const CAPTION_USER: &str = "Case: {case_id}\nConversation:\n{transcript}";

const SELECT_SYSTEM: &str = "You review synthetic question-answer pairs produced by a visual assistant. \
Keep a pair only if the answer is consistent with the ground-truth report. \
Reply with exactly one JSON object and nothing else: {\"keep\": true} or {\"keep\": false}.";

const SELECT_USER: &str = "Question: {question}\nAnswer: {answer}\nGround truth: {ground_truth}";

/// Re-prompt appended after an agent reply that did not parse.
pub const QUESTION_REPROMPT: &str = "Your reply could not be parsed. Reply with exactly one JSON object: \
{\"action\":\"ask\",\"question\":\"...\"} or {\"action\":\"stop\"}.";

pub const SELECT_REPROMPT: &str =
    "Your reply could not be parsed. Reply with exactly one JSON object: {\"keep\": true} or {\"keep\": false}.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSet {
    pub question_system: String,
    pub question_user: String,
    pub caption_system: String,
    pub caption_user: String,
    pub select_system: String,
    pub select_user: String,
    pub instruction: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            question_system: QUESTION_SYSTEM.into(),
            question_user: QUESTION_USER.into(),
            caption_system: CAPTION_SYSTEM.into(),
            caption_user: CAPTION_USER.into(),
            select_system: SELECT_SYSTEM.into(),
            select_user: SELECT_USER.into(),
            instruction: DEFAULT_INSTRUCTION.into(),
        }
    }
}

impl PromptSet {
    /// Checks that each role's templates mention the placeholders it needs.
    pub fn validate(&self) -> Result<(), String> {
        let require = |role: &str, text: String, names: &[&str]| {
            for name in names {
                if !text.contains(&format!("{{{name}}}")) {
                    return Err(format!("{role} prompt lacks {{{name}}}"));
                }
            }
            Ok(())
        };
        require(
            "question",
            format!("{}{}", self.question_system, self.question_user),
            &["examples", "transcript"],
        )?;
        require(
            "caption",
            format!("{}{}", self.caption_system, self.caption_user),
            &["examples", "transcript"],
        )?;
        require(
            "select",
            format!("{}{}", self.select_system, self.select_user),
            &["question", "answer", "ground_truth"],
        )
    }
}

/// Substitutes `{key}` occurrences. Unknown placeholders are kept verbatim.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Numbered example block, or the empty string when there are no examples.
pub fn render_examples(examples: &ExampleSet) -> String {
    if examples.is_empty() {
        return String::new();
    }
    let mut block = String::from("Example reports:\n");
    for (i, ex) in examples.examples.iter().enumerate() {
        block.push_str(&format!("{}. {}\n", i + 1, ex.caption.trim()));
    }
    block
}

/// `Q1:`/`A1:` lines in turn order.
pub fn render_transcript(turns: &[ConversationTurn]) -> String {
    if turns.is_empty() {
        return EMPTY_TRANSCRIPT.to_string();
    }
    turns
        .iter()
        .map(|t| format!("Q{i}: {q}\nA{i}: {a}", i = t.index, q = t.question, a = t.answer))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Inverse of [`render_transcript`], used by scripted agents that only see
/// the prompt text.
pub fn parse_transcript(text: &str) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    let mut pending: Option<String> = None;
    for line in text.lines() {
        if let Some(rest) = strip_numbered(line, 'Q') {
            pending = Some(rest.to_string());
        } else if let Some(rest) = strip_numbered(line, 'A') {
            if let Some(q) = pending.take() {
                pairs.push((q, rest.to_string()));
            }
        }
    }
    pairs
}

fn strip_numbered(line: &str, tag: char) -> Option<&str> {
    let rest = line.strip_prefix(tag)?;
    let digits = rest.find(|c: char| !c.is_ascii_digit())?;
    if digits == 0 {
        return None;
    }
    rest[digits..].strip_prefix(": ")
}

/// Value of a `Case: <id>` header line, if any.
pub fn parse_case_id(text: &str) -> Option<&str> {
    text.lines().find_map(|l| l.strip_prefix("Case: ")).map(str::trim)
}

/// First line starting with `label` (e.g. `"Answer: "`), without the label.
pub fn field_line<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(label))
}
