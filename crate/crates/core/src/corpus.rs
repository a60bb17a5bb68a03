//! Image/report datasets: manifest loading, report composition, train/test
//! splitting and the word-frequency cut-off filter.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::keyed_rng;
use crate::text::{collapse_whitespace, tokenize};

/// Most images a single report may be paired with.
pub const MAX_IMAGES_PER_CASE: usize = 4;
/// Word cut-off frequency conventionally used for IU-Xray.
pub const IU_XRAY_MIN_FREQUENCY: usize = 3;
/// Word cut-off frequency conventionally used for MIMIC-CXR.
pub const MIMIC_CXR_MIN_FREQUENCY: usize = 10;
/// Default train fraction for datasets without an official split.
pub const DEFAULT_TRAIN_RATIO: f64 = 0.8;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record #{index}: {reason}")]
    Malformed { index: usize, reason: String },
    #[error("case {case_id} has {count} images (allowed 1..={MAX_IMAGES_PER_CASE})")]
    TooManyImages { case_id: String, count: usize },
    #[error("duplicate case_id {0}")]
    DuplicateCaseId(String),
    #[error("zero surviving cases")]
    NoSurvivingCases,
    #[error("need at least 2 cases to split, got {0}")]
    TooFewCases(usize),
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("finding and impression are both empty")]
    EmptyReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestFormat {
    Jsonl,
    Csv,
}

impl ManifestFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => ManifestFormat::Csv,
            _ => ManifestFormat::Jsonl,
        }
    }
}

/// One study: 1 to 4 image references plus its ground-truth report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionedCase {
    pub case_id: String,
    pub image_refs: Vec<String>,
    pub report_text: String,
    pub split: Split,
}

impl CaptionedCase {
    pub fn new(
        case_id: impl Into<String>,
        image_refs: Vec<String>,
        report_text: impl Into<String>,
        split: Split,
    ) -> Result<Self, CorpusError> {
        let case = CaptionedCase {
            case_id: case_id.into(),
            image_refs,
            report_text: report_text.into(),
            split,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let n = self.image_refs.len();
        if n == 0 || n > MAX_IMAGES_PER_CASE {
            return Err(CorpusError::TooManyImages {
                case_id: self.case_id.clone(),
                count: n,
            });
        }
        if self.report_text.trim().is_empty() {
            return Err(CorpusError::EmptyReport);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub cases: Vec<CaptionedCase>,
    pub vocab_cutoff: usize,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate ids and invalid cases.
    pub fn new(name: impl Into<String>, cases: Vec<CaptionedCase>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for case in &cases {
            case.validate()?;
            if !seen.insert(case.case_id.as_str()) {
                return Err(CorpusError::DuplicateCaseId(case.case_id.clone()));
            }
        }
        if cases.is_empty() {
            return Err(CorpusError::NoSurvivingCases);
        }
        Ok(Corpus {
            name: name.into(),
            cases,
            vocab_cutoff: 0,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaptionedCase> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn train(&self) -> Vec<CaptionedCase> {
        self.split(Split::Train).cloned().collect()
    }

    pub fn test(&self) -> Vec<CaptionedCase> {
        self.split(Split::Test).cloned().collect()
    }

    pub fn get(&self, case_id: &str) -> Option<&CaptionedCase> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    /// Writes the corpus back out as a JSONL manifest (report in `finding`).
    pub fn write_manifest(&self, path: &Path) -> Result<(), CorpusError> {
        let io = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
        for case in &self.cases {
            let record = ManifestRecord {
                case_id: Some(case.case_id.clone()),
                images: Some(case.image_refs.clone()),
                finding: Some(case.report_text.clone()),
                impression: Some(String::new()),
                split: Some(case.split),
            };
            let line = serde_json::to_string(&record).expect("manifest record serializes");
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Why records were dropped during loading.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub n_records: usize,
    pub n_loaded: usize,
    pub dropped_missing_images: usize,
    pub dropped_missing_report: usize,
}

impl LoadReport {
    pub fn dropped(&self) -> usize {
        self.dropped_missing_images + self.dropped_missing_report
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ManifestRecord {
    #[serde(default)]
    case_id: Option<String>,
    #[serde(default)]
    images: Option<Vec<String>>,
    #[serde(default)]
    finding: Option<String>,
    #[serde(default)]
    impression: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Debug, Deserialize)]
struct CsvRecord {
    case_id: Option<String>,
    images: Option<String>,
    finding: Option<String>,
    impression: Option<String>,
    split: Option<String>,
}

impl CsvRecord {
    fn into_manifest(self, index: usize) -> Result<ManifestRecord, CorpusError> {
        let images = match self.images.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) if s.starts_with('[') => {
                Some(serde_json::from_str(s).map_err(|e| CorpusError::Malformed {
                    index,
                    reason: format!("images column: {e}"),
                })?)
            }
            Some(s) => Some(
                s.split(';')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(String::from)
                    .collect(),
            ),
        };
        let split = match self.split.as_deref().map(str::trim) {
            None | Some("") => None,
            Some("train") => Some(Split::Train),
            Some("test") => Some(Split::Test),
            Some(other) => {
                return Err(CorpusError::Malformed {
                    index,
                    reason: format!("unknown split {other:?}"),
                })
            }
        };
        Ok(ManifestRecord {
            case_id: self.case_id,
            images,
            finding: self.finding,
            impression: self.impression,
            split,
        })
    }
}

/// Joins finding and impression with a single space. A missing side counts as
/// empty; both empty is an error.
pub fn compose_report(finding: &str, impression: &str) -> Result<String, CorpusError> {
    let parts: Vec<&str> = [finding.trim(), impression.trim()]
        .into_iter()
        .filter(|p| !p.is_empty())
        .collect();
    if parts.is_empty() {
        return Err(CorpusError::EmptyReport);
    }
    Ok(parts.join(" "))
}

/// Loads a manifest. Records without images or without report text are
/// dropped and counted; structural problems are errors.
pub fn load_corpus(
    manifest_path: &Path,
    format: ManifestFormat,
) -> Result<(Corpus, LoadReport), CorpusError> {
    let io = |source| CorpusError::Io {
        path: manifest_path.to_path_buf(),
        source,
    };
    let file = File::open(manifest_path).map_err(io)?;
    let records: Vec<ManifestRecord> = match format {
        ManifestFormat::Jsonl => {
            let mut records = Vec::new();
            for (index, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let record = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                    index,
                    reason: e.to_string(),
                })?;
                records.push(record);
            }
            records
        }
        ManifestFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
            let mut records = Vec::new();
            for (index, row) in reader.deserialize::<CsvRecord>().enumerate() {
                let row = row.map_err(|e| CorpusError::Malformed {
                    index,
                    reason: e.to_string(),
                })?;
                records.push(row.into_manifest(index)?);
            }
            records
        }
    };

    let mut report = LoadReport {
        n_records: records.len(),
        ..Default::default()
    };
    let mut cases = Vec::with_capacity(records.len());
    let mut seen = HashSet::new();
    for (index, record) in records.into_iter().enumerate() {
        let case_id = match record.case_id.map(|s| s.trim().to_string()) {
            Some(id) if !id.is_empty() => id,
            _ => {
                return Err(CorpusError::Malformed {
                    index,
                    reason: "missing case_id".into(),
                })
            }
        };
        let images: Vec<String> = record
            .images
            .unwrap_or_default()
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if images.len() > MAX_IMAGES_PER_CASE {
            return Err(CorpusError::TooManyImages {
                case_id,
                count: images.len(),
            });
        }
        if images.is_empty() {
            log::debug!("dropping {case_id}: no images");
            report.dropped_missing_images += 1;
            continue;
        }
        let report_text = match compose_report(
            record.finding.as_deref().unwrap_or(""),
            record.impression.as_deref().unwrap_or(""),
        ) {
            Ok(text) => text,
            Err(_) => {
                log::debug!("dropping {case_id}: no report text");
                report.dropped_missing_report += 1;
                continue;
            }
        };
        if !seen.insert(case_id.clone()) {
            return Err(CorpusError::DuplicateCaseId(case_id));
        }
        cases.push(CaptionedCase {
            case_id,
            image_refs: images,
            report_text,
            split: record.split.unwrap_or_default(),
        });
    }
    report.n_loaded = cases.len();
    if report.dropped() > 0 {
        log::info!(
            "{}: dropped {} of {} records ({} without images, {} without report)",
            manifest_path.display(),
            report.dropped(),
            report.n_records,
            report.dropped_missing_images,
            report.dropped_missing_report
        );
    }
    let name = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus")
        .to_string();
    let corpus = Corpus::new(name, cases)?;
    Ok((corpus, report))
}

/// Randomly reassigns splits so that `round(ratio * n)` cases land in train.
/// Case order is preserved; only the split labels change.
pub fn split_corpus(corpus: &Corpus, ratio: f64, seed: u64) -> Result<Corpus, CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    let n = corpus.cases.len();
    if n < 2 {
        return Err(CorpusError::TooFewCases(n));
    }
    let n_train = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, &["split", &corpus.name]));
    let mut out = corpus.clone();
    for (rank, &idx) in order.iter().enumerate() {
        out.cases[idx].split = if rank < n_train {
            Split::Train
        } else {
            Split::Test
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabFilter {
    pub min_frequency: usize,
    pub unknown_token: String,
}

impl VocabFilter {
    pub fn new(min_frequency: usize) -> Self {
        VocabFilter {
            min_frequency,
            unknown_token: "<unk>".into(),
        }
    }
}

impl Default for VocabFilter {
    fn default() -> Self {
        VocabFilter::new(0)
    }
}

/// Replaces rare words with the unknown token. Frequencies are counted over
/// the train split only; every split is rewritten. `min_frequency == 0`
/// leaves report texts untouched.
pub fn apply_vocab_filter(corpus: &Corpus, filter: &VocabFilter) -> Corpus {
    let mut out = corpus.clone();
    out.vocab_cutoff = filter.min_frequency;
    if filter.min_frequency == 0 {
        return out;
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for case in corpus.split(Split::Train) {
        for tok in tokenize(&case.report_text) {
            *freq.entry(tok).or_default() += 1;
        }
    }
    for case in &mut out.cases {
        let filtered: Vec<&str> = tokenize(&case.report_text)
            .iter()
            .map(|tok| {
                if freq.get(tok).copied().unwrap_or(0) >= filter.min_frequency {
                    freq.get_key_value(tok).map(|(k, _)| k.as_str()).unwrap()
                } else {
                    filter.unknown_token.as_str()
                }
            })
            .collect();
        let text = collapse_whitespace(&filtered.join(" "));
        // a report made only of punctuation tokenizes to nothing
        case.report_text = if text.is_empty() {
            filter.unknown_token.clone()
        } else {
            text
        };
    }
    out
}
