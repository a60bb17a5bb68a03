//! Fine-tuning dataset files and their manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{CurationError, SelectionStrategy, VqaExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `{"case_id","images","question","answer"}` per line.
    VqaJsonl,
    /// `{"id","images","messages":[system, user, assistant]}` per line.
    ChatSftJsonl,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vqa_jsonl" | "vqa" => Ok(DatasetFormat::VqaJsonl),
            "chat_sft_jsonl" | "chat" | "sft" => Ok(DatasetFormat::ChatSftJsonl),
            other => Err(format!("unknown dataset format {other:?}")),
        }
    }
}

/// Trainer settings recorded alongside the dataset. Advisory only: nothing
/// here trains a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisoryHparams {
    pub learning_rate: f64,
    pub lr_scheduler: String,
    pub warmup_ratio: f64,
    pub epochs_within_dataset: u32,
    pub epochs_cross_dataset: u32,
    pub max_length: u32,
    pub per_device_batch_size: u32,
    pub gradient_accumulation_steps: u32,
    pub frozen_modules: Vec<String>,
    pub loss: String,
}

pub fn advisory_hparams() -> AdvisoryHparams {
    AdvisoryHparams {
        learning_rate: 3e-7,
        lr_scheduler: "cosine".into(),
        warmup_ratio: 0.03,
        epochs_within_dataset: 5,
        epochs_cross_dataset: 1,
        max_length: 4096,
        per_device_batch_size: 4,
        gradient_accumulation_steps: 2,
        frozen_modules: vec!["vision_encoder".into()],
        loss: "autoregressive with weighted KL penalty".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_examples: usize,
    pub format: DatasetFormat,
    pub strategy: SelectionStrategy,
    pub dataset_file: String,
    pub content_sha256: String,
    pub advisory_hparams: AdvisoryHparams,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<(), CurationError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(CurationError::io(path))
    }
}

#[derive(Debug, Clone)]
pub struct EmitOptions {
    pub strategy: SelectionStrategy,
    /// System message of chat-format records.
    pub system_prompt: String,
}

impl Default for EmitOptions {
    fn default() -> Self {
        EmitOptions {
            strategy: SelectionStrategy::None,
            system_prompt: "You are a radiology assistant. Answer the question about the given image(s).".into(),
        }
    }
}

fn chat_record(index: usize, ex: &VqaExample, system_prompt: &str) -> Value {
    let mut user = "<image>\n".repeat(ex.image_refs.len());
    user.push_str(&ex.question);
    json!({
        "id": format!("{}#{index}", ex.case_id),
        "images": ex.image_refs,
        "messages": [
            {"role": "system", "content": system_prompt},
            {"role": "user", "content": user},
            {"role": "assistant", "content": ex.answer},
        ],
    })
}

/// Writes the dataset and returns its manifest (hash of the written bytes).
pub fn emit_dataset(
    examples: &[VqaExample],
    out_path: &Path,
    format: DatasetFormat,
    options: &EmitOptions,
) -> Result<DatasetManifest, CurationError> {
    if examples.is_empty() {
        return Err(CurationError::EmptyDataset);
    }
    let mut buf = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let line = match format {
            DatasetFormat::VqaJsonl => serde_json::to_string(ex),
            DatasetFormat::ChatSftJsonl => serde_json::to_string(&chat_record(i, ex, &options.system_prompt)),
        }
        .expect("record serializes");
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
    }
    let mut file = File::create(out_path).map_err(CurationError::io(out_path))?;
    file.write_all(&buf).map_err(CurationError::io(out_path))?;
    Ok(DatasetManifest {
        n_examples: examples.len(),
        format,
        strategy: options.strategy,
        dataset_file: out_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        content_sha256: hex_sha256(&buf),
        advisory_hparams: advisory_hparams(),
    })
}

pub(crate) fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_vqa_jsonl(path: &Path) -> Result<Vec<VqaExample>, CurationError> {
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

/// Checks one chat-format record: exactly `id`, `images`, `messages`; messages
/// are system, user, assistant with non-empty string content; the user turn
/// carries one `<image>` marker per image.
pub fn validate_chat_sft_record(record: &Value) -> Result<(), String> {
    let obj = record.as_object().ok_or("record is not an object")?;
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    if keys != ["id", "images", "messages"] {
        return Err(format!("unexpected keys {keys:?}"));
    }
    if obj["id"].as_str().is_none_or(str::is_empty) {
        return Err("id must be a non-empty string".into());
    }
    let images = obj["images"].as_array().ok_or("images must be an array")?;
    if images.is_empty() || images.len() > crate::corpus::MAX_IMAGES_PER_CASE {
        return Err(format!("images must hold 1..=4 entries, got {}", images.len()));
    }
    if !images.iter().all(|i| i.as_str().is_some_and(|s| !s.is_empty())) {
        return Err("image entries must be non-empty strings".into());
    }
    let messages = obj["messages"].as_array().ok_or("messages must be an array")?;
    let roles: Vec<&str> = messages
        .iter()
        .map(|m| m.get("role").and_then(Value::as_str).unwrap_or(""))
        .collect();
    if roles != ["system", "user", "assistant"] {
        return Err(format!("roles must be system, user, assistant; got {roles:?}"));
    }
    for m in messages {
        let m = m.as_object().ok_or("message is not an object")?;
        if m.len() != 2 {
            return Err("messages carry exactly role and content".into());
        }
        if m.get("content").and_then(Value::as_str).is_none_or(|c| c.trim().is_empty()) {
            return Err("message content must be a non-empty string".into());
        }
    }
    let user = messages[1]["content"].as_str().unwrap_or("");
    if user.matches("<image>").count() != images.len() {
        return Err("user turn must contain one <image> marker per image".into());
    }
    Ok(())
}
