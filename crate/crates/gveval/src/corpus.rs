//! Corpus loading, run persistence, and report emission.
//!
//! The canonical corpus format is JSON Lines, one record per line with
//! alphabetically ordered keys. Dataset adapters translate the common
//! benchmark layouts into the same records at load time, so the rest of
//! the pipeline never branches on where data came from. Evaluation runs
//! persist an outcomes file plus a manifest that snapshots everything
//! needed to audit or resume the run.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    CandidateCaption, CorpusRecord, EvalConfig, EvalOutcome, HumanJudgment, HumanKind,
    ReferenceSet, ScoreDistribution, VisualHandle, VisualKind,
};
use crate::prompt::template_checksums;
use crate::stats::CorrelationEntry;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("nothing to report")]
    EmptyReport,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Source layouts understood by `load_corpus`. All are JSON Lines; the
/// per-format field sets are documented on the adapter functions below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    Canonical,
    Flickr8kExpert,
    Flickr8kCf,
    VatexEval,
    MsvdEvalAccr,
    FoilPairs,
}

// ---------------------------------------------------------------------------
// Canonical lines
// ---------------------------------------------------------------------------

/// Canonical record shape. Fields are declared alphabetically so the
/// serialized key order is stable for byte-level round-trips.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CanonicalLine {
    caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    human: Option<HumanJudgment>,
    id: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    visual: Option<VisualHandle>,
}

impl From<CanonicalLine> for CorpusRecord {
    fn from(line: CanonicalLine) -> CorpusRecord {
        CorpusRecord {
            candidate: CandidateCaption {
                id: line.id.clone(),
                text: line.caption,
                visual_id: line.visual.as_ref().map(|v| v.path.clone()),
            },
            id: line.id,
            references: ReferenceSet::new(line.references),
            visual: line.visual,
            human: line.human,
            metrics: line.metrics,
        }
    }
}

impl From<&CorpusRecord> for CanonicalLine {
    fn from(record: &CorpusRecord) -> CanonicalLine {
        CanonicalLine {
            caption: record.candidate.text.clone(),
            human: record.human.clone(),
            id: record.id.clone(),
            metrics: record.metrics.clone(),
            references: record.references.captions.clone(),
            visual: record.visual.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Adapter line shapes
// ---------------------------------------------------------------------------

/// `{id, image, caption, references, expert_scores: [1..4, ...]}`
#[derive(Deserialize)]
struct ExpertLine {
    id: String,
    image: String,
    caption: String,
    #[serde(default)]
    references: Vec<String>,
    expert_scores: Vec<f64>,
}

/// `{id, image, caption, references, yes_votes, total_votes}`
#[derive(Deserialize)]
struct CrowdLine {
    id: String,
    image: String,
    caption: String,
    #[serde(default)]
    references: Vec<String>,
    yes_votes: u64,
    total_votes: u64,
}

/// `{id, video, caption, references, human_score: 1..5}`
#[derive(Deserialize)]
struct VatexLine {
    id: String,
    video: String,
    caption: String,
    #[serde(default)]
    references: Vec<String>,
    human_score: f64,
}

/// `{id, video, caption, references, accuracy, completeness, conciseness,
/// relevance}`, each dimension 0..100.
#[derive(Deserialize)]
struct MsvdLine {
    id: String,
    video: String,
    caption: String,
    #[serde(default)]
    references: Vec<String>,
    accuracy: f64,
    completeness: f64,
    conciseness: f64,
    relevance: f64,
}

/// `{id, image, true_caption, foil_caption, references}`; expands to two
/// records, `<id>#true` and `<id>#foil`, sharing the image.
#[derive(Deserialize)]
struct FoilLine {
    id: String,
    image: String,
    true_caption: String,
    foil_caption: String,
    #[serde(default)]
    references: Vec<String>,
}

fn record_for(
    id: String,
    caption: String,
    references: Vec<String>,
    visual: VisualHandle,
    human: Option<HumanJudgment>,
) -> CorpusRecord {
    CorpusRecord {
        candidate: CandidateCaption {
            id: id.clone(),
            text: caption,
            visual_id: Some(visual.path.clone()),
        },
        id,
        references: ReferenceSet::new(references),
        visual: Some(visual),
        human,
        metrics: BTreeMap::new(),
    }
}

fn adapt_line(
    format: CorpusFormat,
    line_no: usize,
    line: &str,
) -> Result<Vec<CorpusRecord>, CorpusError> {
    let parse = |message: String| CorpusError::Parse {
        line: line_no,
        message,
    };
    let schema = |message: String| CorpusError::SchemaViolation {
        line: line_no,
        message,
    };

    let records = match format {
        CorpusFormat::Canonical => {
            let parsed: CanonicalLine =
                serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
            vec![CorpusRecord::from(parsed)]
        }
        CorpusFormat::Flickr8kExpert => {
            let parsed: ExpertLine =
                serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
            if parsed.expert_scores.is_empty() {
                return Err(schema(format!("{}: no expert scores", parsed.id)));
            }
            let mean = parsed.expert_scores.iter().sum::<f64>() / parsed.expert_scores.len() as f64;
            let human = HumanJudgment {
                kind: HumanKind::ExpertMean { value: mean },
                raw: Some(parsed.expert_scores),
            };
            vec![record_for(
                parsed.id,
                parsed.caption,
                parsed.references,
                VisualHandle {
                    kind: VisualKind::Image,
                    path: parsed.image,
                },
                Some(human),
            )]
        }
        CorpusFormat::Flickr8kCf => {
            let parsed: CrowdLine = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
            if parsed.total_votes == 0 || parsed.yes_votes > parsed.total_votes {
                return Err(schema(format!(
                    "{}: impossible vote counts {}/{}",
                    parsed.id, parsed.yes_votes, parsed.total_votes
                )));
            }
            let human = HumanJudgment {
                kind: HumanKind::CrowdProportion {
                    value: parsed.yes_votes as f64 / parsed.total_votes as f64,
                },
                raw: None,
            };
            vec![record_for(
                parsed.id,
                parsed.caption,
                parsed.references,
                VisualHandle {
                    kind: VisualKind::Image,
                    path: parsed.image,
                },
                Some(human),
            )]
        }
        CorpusFormat::VatexEval => {
            let parsed: VatexLine = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
            let human = HumanJudgment {
                kind: HumanKind::Vatex {
                    value: parsed.human_score,
                },
                raw: None,
            };
            vec![record_for(
                parsed.id,
                parsed.caption,
                parsed.references,
                VisualHandle {
                    kind: VisualKind::Video,
                    path: parsed.video,
                },
                Some(human),
            )]
        }
        CorpusFormat::MsvdEvalAccr => {
            let parsed: MsvdLine = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
            let human = HumanJudgment {
                kind: HumanKind::Accr {
                    value: [
                        parsed.accuracy,
                        parsed.completeness,
                        parsed.conciseness,
                        parsed.relevance,
                    ],
                },
                raw: None,
            };
            vec![record_for(
                parsed.id,
                parsed.caption,
                parsed.references,
                VisualHandle {
                    kind: VisualKind::Video,
                    path: parsed.video,
                },
                Some(human),
            )]
        }
        CorpusFormat::FoilPairs => {
            let parsed: FoilLine = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
            let visual = VisualHandle {
                kind: VisualKind::Image,
                path: parsed.image,
            };
            vec![
                record_for(
                    format!("{}#true", parsed.id),
                    parsed.true_caption,
                    parsed.references.clone(),
                    visual.clone(),
                    None,
                ),
                record_for(
                    format!("{}#foil", parsed.id),
                    parsed.foil_caption,
                    parsed.references,
                    visual,
                    None,
                ),
            ]
        }
    };
    Ok(records)
}

/// Reads a corpus file in the named format. Records come back in file
/// order; ids must be unique and human judgments must sit inside their
/// declared scale.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<CorpusRecord>, CorpusError> {
    let file = File::open(path)?;
    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = index + 1;
        for record in adapt_line(format, line_no, &line)? {
            if record.id.trim().is_empty() {
                return Err(CorpusError::SchemaViolation {
                    line: line_no,
                    message: "record id is empty".to_string(),
                });
            }
            if let Some(human) = &record.human {
                if !human.in_scale() {
                    return Err(CorpusError::SchemaViolation {
                        line: line_no,
                        message: format!("{}: human judgment outside its scale", record.id),
                    });
                }
            }
            if !seen.insert(record.id.clone()) {
                return Err(CorpusError::DuplicateId(record.id));
            }
            records.push(record);
        }
    }
    Ok(records)
}

/// Serializes records as canonical JSON Lines, trailing newline included.
pub fn canonical_jsonl(records: &[CorpusRecord]) -> String {
    let mut out = String::new();
    for record in records {
        let line = CanonicalLine::from(record);
        out.push_str(&serde_json::to_string(&line).expect("canonical lines always serialize"));
        out.push('\n');
    }
    out
}

/// Hex digest of the raw corpus file bytes, recorded in run manifests.
pub fn corpus_digest(path: &Path) -> Result<String, CorpusError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

// ---------------------------------------------------------------------------
// Outcome persistence
// ---------------------------------------------------------------------------

/// One line of an outcomes file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeLine {
    pub id: String,
    pub raw_score: i64,
    pub expected_score: f64,
    pub distribution: ScoreDistribution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accr: Option<[i64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accr_expected: Option<[f64; 4]>,
    pub reason: String,
    pub cache_hit: bool,
    pub distribution_truncated: bool,
}

impl From<&EvalOutcome> for OutcomeLine {
    fn from(outcome: &EvalOutcome) -> OutcomeLine {
        OutcomeLine {
            id: outcome.record_id.clone(),
            raw_score: outcome.raw_score,
            expected_score: outcome.expected_score,
            distribution: outcome.distribution.clone(),
            accr: outcome.accr.as_ref().map(|a| a.raw),
            accr_expected: outcome.accr.as_ref().map(|a| a.expected),
            reason: outcome.reason.clone(),
            cache_hit: outcome.cache_hit,
            distribution_truncated: outcome.distribution_truncated,
        }
    }
}

/// Ids already present in an outcomes file; empty when the file does not
/// exist yet. Resumed runs skip these.
pub fn existing_outcome_ids(path: &Path) -> Result<HashSet<String>, CorpusError> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    read_outcomes(path).map(|lines| lines.into_iter().map(|l| l.id).collect())
}

/// Reads a full outcomes file.
pub fn read_outcomes(path: &Path) -> Result<Vec<OutcomeLine>, CorpusError> {
    let file = File::open(path)?;
    let mut outcomes = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: OutcomeLine = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: index + 1,
            message: e.to_string(),
        })?;
        outcomes.push(parsed);
    }
    Ok(outcomes)
}

/// Append-mode writer for outcome lines, flushed per line so a killed
/// run loses at most the line in flight.
pub struct OutcomeWriter {
    file: File,
}

impl OutcomeWriter {
    pub fn append(path: &Path) -> Result<OutcomeWriter, CorpusError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(OutcomeWriter { file })
    }

    pub fn write(&mut self, line: &OutcomeLine) -> Result<(), CorpusError> {
        let mut encoded = serde_json::to_string(line).map_err(|e| CorpusError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        encoded.push('\n');
        self.file.write_all(encoded.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureNote {
    pub id: String,
    pub error: String,
}

/// Snapshot of one evaluation run: everything needed to audit, compare,
/// or resume it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: EvalConfig,
    pub model_id: String,
    pub corpus_path: String,
    pub corpus_digest: String,
    pub template_checksums: BTreeMap<String, String>,
    pub outcomes_file: String,
    pub total_records: usize,
    pub evaluated: usize,
    pub skipped: usize,
    pub failures: Vec<FailureNote>,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
}

impl RunManifest {
    pub fn begin(
        config: EvalConfig,
        model_id: impl Into<String>,
        corpus_path: impl Into<String>,
        corpus_digest: impl Into<String>,
        outcomes_file: impl Into<String>,
        total_records: usize,
    ) -> RunManifest {
        RunManifest {
            config,
            model_id: model_id.into(),
            corpus_path: corpus_path.into(),
            corpus_digest: corpus_digest.into(),
            template_checksums: template_checksums(),
            outcomes_file: outcomes_file.into(),
            total_records,
            evaluated: 0,
            skipped: 0,
            failures: Vec::new(),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: None,
        }
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(chrono::Utc::now().to_rfc3339());
    }

    /// A complete run accounts for every input record, as an outcome, a
    /// skip, or a named failure.
    pub fn accounts_for_all_records(&self) -> bool {
        self.evaluated + self.skipped + self.failures.len() == self.total_records
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut encoded = serde_json::to_vec_pretty(self).map_err(|e| CorpusError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        encoded.push(b'\n');
        std::fs::write(path, encoded)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            line: 0,
            message: e.to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportStyle {
    Markdown,
    Csv,
    /// Correlations multiplied by 100 and shown with one decimal, the
    /// convention benchmark tables use.
    ScaledTable,
}

fn csv_field(value: &str) -> String {
    if value.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

/// Renders correlation entries in the requested style. Rows are ordered
/// by dataset, then metric name; stored values keep full precision and
/// rounding happens only here.
pub fn emit_report(
    entries: &[CorrelationEntry],
    style: ReportStyle,
) -> Result<String, CorpusError> {
    if entries.is_empty() {
        return Err(CorpusError::EmptyReport);
    }
    let mut sorted: Vec<&CorrelationEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| {
        (a.dataset.as_deref().unwrap_or(""), &a.metric)
            .cmp(&(b.dataset.as_deref().unwrap_or(""), &b.metric))
    });

    let mut out = String::new();
    match style {
        ReportStyle::Markdown => {
            out.push_str("| Dataset | Metric | tau_b | tau_c | n |\n");
            out.push_str("| --- | --- | --- | --- | --- |\n");
            for entry in sorted {
                out.push_str(&format!(
                    "| {} | {} | {:.4} | {:.4} | {} |\n",
                    entry.dataset.as_deref().unwrap_or("-"),
                    entry.metric,
                    entry.tau_b,
                    entry.tau_c,
                    entry.n
                ));
            }
        }
        ReportStyle::Csv => {
            out.push_str("dataset,metric,tau_b,tau_c,n\r\n");
            for entry in sorted {
                out.push_str(&format!(
                    "{},{},{},{},{}\r\n",
                    csv_field(entry.dataset.as_deref().unwrap_or("")),
                    csv_field(&entry.metric),
                    entry.tau_b,
                    entry.tau_c,
                    entry.n
                ));
            }
        }
        ReportStyle::ScaledTable => {
            out.push_str("| Dataset | Metric | tau_b x100 | tau_c x100 | n |\n");
            out.push_str("| --- | --- | --- | --- | --- |\n");
            for entry in sorted {
                out.push_str(&format!(
                    "| {} | {} | {:.1} | {:.1} | {} |\n",
                    entry.dataset.as_deref().unwrap_or("-"),
                    entry.metric,
                    entry.tau_b * 100.0,
                    entry.tau_c * 100.0,
                    entry.n
                ));
            }
        }
    }
    Ok(out)
}
