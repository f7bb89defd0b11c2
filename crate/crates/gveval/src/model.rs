//! Domain types shared across the pipeline.

use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How much context the judge sees alongside the candidate caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    RefOnly,
    RefFree,
    Combined,
}

impl EvalMode {
    pub fn needs_references(self) -> bool {
        matches!(self, EvalMode::RefOnly | EvalMode::Combined)
    }

    pub fn needs_visual(self) -> bool {
        matches!(self, EvalMode::RefFree | EvalMode::Combined)
    }
}

/// Numeric range the judge is asked to score on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// Integers 0 to 100.
    Scoring,
    /// Integers 1 to 5.
    Rating,
}

impl ScoreScale {
    pub fn min(self) -> i64 {
        match self {
            ScoreScale::Scoring => 0,
            ScoreScale::Rating => 1,
        }
    }

    pub fn max(self) -> i64 {
        match self {
            ScoreScale::Scoring => 100,
            ScoreScale::Rating => 5,
        }
    }

    pub fn contains(self, value: i64) -> bool {
        (self.min()..=self.max()).contains(&value)
    }
}

/// Single overall score, or the four-dimension video rubric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimensionality {
    Overall,
    Accr,
}

/// One axis of the four-dimension rubric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Accuracy,
    Completeness,
    Conciseness,
    Relevance,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Accuracy,
        Dimension::Completeness,
        Dimension::Conciseness,
        Dimension::Relevance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Accuracy => "Accuracy",
            Dimension::Completeness => "Completeness",
            Dimension::Conciseness => "Conciseness",
            Dimension::Relevance => "Relevance",
        }
    }
}

impl std::fmt::Display for Dimension {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Evaluation configuration
// ---------------------------------------------------------------------------

/// Switches that select the judging setup for a run.
///
/// The boolean trio mirrors the ablation axes: `use_expected_score` replaces
/// the raw integer with its probability-weighted expectation,
/// `include_cot_steps` keeps the Evaluation Steps section in the prompt, and
/// `require_reason` asks the judge to explain before scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub scale: ScoreScale,
    pub dimensionality: Dimensionality,
    pub use_expected_score: bool,
    pub include_cot_steps: bool,
    pub require_reason: bool,
    pub top_k_logprobs: u32,
    pub temperature: f64,
    pub max_retries: u32,
    pub parallelism: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::RefOnly,
            scale: ScoreScale::Scoring,
            dimensionality: Dimensionality::Overall,
            use_expected_score: true,
            include_cot_steps: true,
            require_reason: true,
            top_k_logprobs: 20,
            temperature: 0.0,
            max_retries: 3,
            parallelism: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.scale == ScoreScale::Rating && self.dimensionality == Dimensionality::Accr {
            return Err(ConfigError::UnsupportedCombination(
                "the four-dimension rubric is only defined on the 0-100 scale",
            ));
        }
        if self.use_expected_score && self.top_k_logprobs < 1 {
            return Err(ConfigError::InvalidTopK(self.top_k_logprobs));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ConfigError::InvalidTemperature(self.temperature));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::InvalidParallelism);
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unsupported combination: {0}")]
    UnsupportedCombination(&'static str),
    #[error("top_k_logprobs must be at least 1 when expected scores are enabled, got {0}")]
    InvalidTopK(u32),
    #[error("temperature must be finite and non-negative, got {0}")]
    InvalidTemperature(f64),
    #[error("parallelism must be at least 1")]
    InvalidParallelism,
}

// ---------------------------------------------------------------------------
// Corpus records
// ---------------------------------------------------------------------------

/// A caption under evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateCaption {
    pub id: String,
    pub text: String,
    /// Id of the visual the caption describes, when the corpus carries one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_id: Option<String>,
}

/// Ground-truth captions for one visual. May be empty only in ref-free runs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReferenceSet {
    pub captions: Vec<String>,
}

impl ReferenceSet {
    pub fn new(captions: Vec<String>) -> Self {
        ReferenceSet { captions }
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualKind {
    Image,
    Video,
}

/// Pointer to the pixels on disk; loading happens at evaluation time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualHandle {
    pub kind: VisualKind,
    pub path: String,
}

/// Human quality judgment attached to a record, one of four source shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanJudgment {
    #[serde(flatten)]
    pub kind: HumanKind,
    /// Original per-annotator values when the source provides them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HumanKind {
    /// Mean of expert scores on the 1-4 scale.
    ExpertMean { value: f64 },
    /// Fraction of crowd yes-votes in [0, 1].
    CrowdProportion { value: f64 },
    /// Annotator score on the 1-5 scale.
    Vatex { value: f64 },
    /// Accuracy, completeness, conciseness, relevance, each 0-100.
    Accr { value: [f64; 4] },
}

impl HumanJudgment {
    /// The scalar a judgment naturally projects to (ACCR projects to its mean).
    pub fn natural_scalar(&self) -> f64 {
        match &self.kind {
            HumanKind::ExpertMean { value } => *value,
            HumanKind::CrowdProportion { value } => *value,
            HumanKind::Vatex { value } => *value,
            HumanKind::Accr { value } => value.iter().sum::<f64>() / 4.0,
        }
    }

    /// Checks the value against the declared scale of its kind.
    pub fn in_scale(&self) -> bool {
        match &self.kind {
            HumanKind::ExpertMean { value } => (1.0..=4.0).contains(value),
            HumanKind::CrowdProportion { value } => (0.0..=1.0).contains(value),
            HumanKind::Vatex { value } => (1.0..=5.0).contains(value),
            HumanKind::Accr { value } => value.iter().all(|v| (0.0..=100.0).contains(v)),
        }
    }
}

/// One line of a canonical corpus: a caption, its context, and any
/// precomputed metric scores to compare against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub candidate: CandidateCaption,
    #[serde(default)]
    pub references: ReferenceSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual: Option<VisualHandle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human: Option<HumanJudgment>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

/// Confirms a record carries everything the configured mode needs.
pub fn validate_record(record: &CorpusRecord, config: &EvalConfig) -> Result<(), ValidateError> {
    if record.candidate.text.trim().is_empty() {
        return Err(ValidateError::EmptyCaption(record.id.clone()));
    }
    if record
        .references
        .captions
        .iter()
        .any(|c| c.trim().is_empty())
    {
        return Err(ValidateError::EmptyReference(record.id.clone()));
    }
    if config.mode.needs_references() && record.references.is_empty() {
        return Err(ValidateError::MissingReferences(record.id.clone()));
    }
    if config.mode.needs_visual() && record.visual.is_none() {
        return Err(ValidateError::MissingVisual(record.id.clone()));
    }
    Ok(())
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValidateError {
    #[error("record {0}: mode requires reference captions but none are present")]
    MissingReferences(String),
    #[error("record {0}: mode requires a visual but none is attached")]
    MissingVisual(String),
    #[error("record {0}: candidate caption is empty")]
    EmptyCaption(String),
    #[error("record {0}: reference list contains an empty caption")]
    EmptyReference(String),
}

// ---------------------------------------------------------------------------
// Score distributions and outcomes
// ---------------------------------------------------------------------------

/// Discrete distribution over integer scores, kept normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreDistribution {
    entries: Vec<(i64, f64)>,
}

impl ScoreDistribution {
    /// Builds a distribution from unnormalized positive weights. Duplicate
    /// scores are merged by summing their mass; entries are sorted by score.
    pub fn from_weights<I>(weights: I) -> Result<ScoreDistribution, DistributionError>
    where
        I: IntoIterator<Item = (i64, f64)>,
    {
        let mut merged: BTreeMap<i64, f64> = BTreeMap::new();
        for (score, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(DistributionError::BadWeight(score, w));
            }
            *merged.entry(score).or_insert(0.0) += w;
        }
        merged.retain(|_, w| *w > 0.0);
        let total: f64 = merged.values().sum();
        if merged.is_empty() || total <= 0.0 {
            return Err(DistributionError::EmptySupport);
        }
        Ok(ScoreDistribution {
            entries: merged.into_iter().map(|(s, w)| (s, w / total)).collect(),
        })
    }

    /// All mass on a single score.
    pub fn point_mass(score: i64) -> ScoreDistribution {
        ScoreDistribution {
            entries: vec![(score, 1.0)],
        }
    }

    /// Equal-weight mixture of several distributions over the merged support.
    pub fn mixture(parts: &[ScoreDistribution]) -> Result<ScoreDistribution, DistributionError> {
        if parts.is_empty() {
            return Err(DistributionError::EmptySupport);
        }
        ScoreDistribution::from_weights(
            parts
                .iter()
                .flat_map(|d| d.entries.iter().copied())
                .collect::<Vec<_>>(),
        )
    }

    /// Probability-weighted mean of the support.
    pub fn expectation(&self) -> f64 {
        self.entries.iter().map(|(s, p)| *s as f64 * p).sum()
    }

    pub fn entries(&self) -> &[(i64, f64)] {
        &self.entries
    }

    pub fn probability_of(&self, score: i64) -> f64 {
        self.entries
            .iter()
            .find(|(s, _)| *s == score)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DistributionError {
    #[error("no positive-mass entries to build a distribution from")]
    EmptySupport,
    #[error("weight for score {0} is not a finite non-negative number: {1}")]
    BadWeight(i64, f64),
}

/// Log-probability evidence for the tokens that carried a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvidence {
    pub token: String,
    pub logprob: f64,
    pub alternatives: Vec<(String, f64)>,
}

/// Per-dimension results of a rubric evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccrScores {
    /// Integers as printed by the judge, rubric order.
    pub raw: [i64; 4],
    /// Probability-weighted expectations, rubric order.
    pub expected: [f64; 4],
}

/// Everything the pipeline records about one judged caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub record_id: String,
    pub raw_score: i64,
    pub expected_score: f64,
    pub distribution: ScoreDistribution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accr: Option<AccrScores>,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_evidence: Vec<TokenEvidence>,
    pub cache_hit: bool,
    pub distribution_truncated: bool,
}

/// PNG bytes ready to attach to a chat request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub png: Vec<u8>,
}

impl ImagePayload {
    pub fn new(png: Vec<u8>) -> ImagePayload {
        ImagePayload { png }
    }

    /// Content digest used for cache keys, hex-encoded sha256.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(&self.png))
    }
}

/// Pixels loaded in memory, either one image or an ordered frame list.
#[derive(Debug, Clone)]
pub struct VisualContent {
    pub id: String,
    pub kind: VisualKind,
    image: Option<RgbImage>,
    frames: Option<Vec<TimedFrame>>,
}

/// One decoded video frame and its source timestamp in seconds.
#[derive(Debug, Clone)]
pub struct TimedFrame {
    pub image: RgbImage,
    pub timestamp: f64,
}

impl VisualContent {
    pub fn image(id: impl Into<String>, image: RgbImage) -> VisualContent {
        VisualContent {
            id: id.into(),
            kind: VisualKind::Image,
            image: Some(image),
            frames: None,
        }
    }

    pub fn video(id: impl Into<String>, frames: Vec<TimedFrame>) -> VisualContent {
        VisualContent {
            id: id.into(),
            kind: VisualKind::Video,
            image: None,
            frames: Some(frames),
        }
    }

    pub fn as_image(&self) -> Option<&RgbImage> {
        self.image.as_ref()
    }

    pub fn as_frames(&self) -> Option<&[TimedFrame]> {
        self.frames.as_deref()
    }
}
