//! Rank agreement between metric scores and human judgments.
//!
//! Tallies are exact integer counts over all n(n-1)/2 pairs; floats only
//! appear in the final division. The quadratic scan is fine at the corpus
//! sizes this tool targets (a few thousand captions).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CorpusRecord, HumanKind};

/// Classification of every observation pair of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTally {
    pub concordant: u64,
    pub discordant: u64,
    /// Pairs tied in x, whether or not also tied in y.
    pub ties_x: u64,
    /// Pairs tied in y, whether or not also tied in x.
    pub ties_y: u64,
    pub ties_both: u64,
    pub total_pairs: u64,
}

impl PairTally {
    /// Signed concordance excess C - D.
    pub fn excess(&self) -> i64 {
        self.concordant as i64 - self.discordant as i64
    }
}

fn check_paired(x: &[f64], y: &[f64]) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            x_len: x.len(),
            y_len: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(StatsError::DegenerateInput("fewer than two observations"));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

/// Counts concordant, discordant, and tied pairs with one quadratic pass.
pub fn pair_tally(x: &[f64], y: &[f64]) -> Result<PairTally, StatsError> {
    check_paired(x, y)?;
    let n = x.len();
    let mut tally = PairTally {
        concordant: 0,
        discordant: 0,
        ties_x: 0,
        ties_y: 0,
        ties_both: 0,
        total_pairs: (n as u64) * (n as u64 - 1) / 2,
    };
    for i in 0..n {
        for j in (i + 1)..n {
            let tie_x = x[i] == x[j];
            let tie_y = y[i] == y[j];
            match (tie_x, tie_y) {
                (true, true) => {
                    tally.ties_x += 1;
                    tally.ties_y += 1;
                    tally.ties_both += 1;
                }
                (true, false) => tally.ties_x += 1,
                (false, true) => tally.ties_y += 1,
                (false, false) => {
                    let same_order = (x[i] < x[j]) == (y[i] < y[j]);
                    if same_order {
                        tally.concordant += 1;
                    } else {
                        tally.discordant += 1;
                    }
                }
            }
        }
    }
    Ok(tally)
}

/// Kendall's tau-b: (C - D) / sqrt((n0 - n1)(n0 - n2)), tie-corrected on
/// both margins.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    let t = pair_tally(x, y)?;
    let nx = t.total_pairs - t.ties_x;
    let ny = t.total_pairs - t.ties_y;
    if nx == 0 || ny == 0 {
        return Err(StatsError::DegenerateInput("a variable is constant"));
    }
    Ok(t.excess() as f64 / ((nx as f64) * (ny as f64)).sqrt())
}

fn distinct_count(values: &[f64]) -> usize {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    sorted.len()
}

/// Stuart's tau-c: 2m(C - D) / (n^2 (m - 1)) with m the smaller number of
/// distinct values on either margin. Suited to margins with unequal
/// category counts, e.g. a 0-100 metric against 1-4 expert means.
pub fn kendall_tau_c(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    let t = pair_tally(x, y)?;
    let m = distinct_count(x).min(distinct_count(y));
    if m < 2 {
        return Err(StatsError::DegenerateCategories);
    }
    let n = x.len() as f64;
    Ok(2.0 * m as f64 * t.excess() as f64 / (n * n * (m as f64 - 1.0)))
}

/// Fraction of (true, foil) score pairs where the true caption wins, with
/// half credit for exact ties.
pub fn foil_pairwise_accuracy(pairs: &[(f64, f64)]) -> Result<f64, StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::EmptyPairs);
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut credit = 0.0;
    for (true_score, foil_score) in pairs {
        if true_score > foil_score {
            credit += 1.0;
        } else if true_score == foil_score {
            credit += 0.5;
        }
    }
    Ok(credit / pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// Corpus-level correlation
// ---------------------------------------------------------------------------

/// How a human judgment becomes the scalar on the y axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanProjection {
    /// Each judgment kind maps to its natural scalar.
    Auto,
    ExpertMean,
    CrowdProportion,
    Vatex,
    AccrMean,
    Accuracy,
    Completeness,
    Conciseness,
    Relevance,
    /// One row per annotator instead of the per-caption mean.
    RawJudgments,
}

/// Correlation of one metric column against the projected judgments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub tau_b: f64,
    pub tau_c: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub entries: Vec<CorrelationEntry>,
}

fn accr_component(record: &CorpusRecord, index: usize) -> Result<Vec<f64>, StatsError> {
    match &record.human.as_ref().unwrap().kind {
        HumanKind::Accr { value } => Ok(vec![value[index]]),
        _ => Err(StatsError::ProjectionMismatch {
            record_id: record.id.clone(),
            expected: "accr",
        }),
    }
}

/// Projects one record's judgment to the row values it contributes.
fn project(record: &CorpusRecord, projection: HumanProjection) -> Result<Vec<f64>, StatsError> {
    let human = record
        .human
        .as_ref()
        .ok_or_else(|| StatsError::MissingHuman(record.id.clone()))?;
    let expect = |kind: &'static str, ok: bool, value: f64| {
        if ok {
            Ok(vec![value])
        } else {
            Err(StatsError::ProjectionMismatch {
                record_id: record.id.clone(),
                expected: kind,
            })
        }
    };
    match projection {
        HumanProjection::Auto => Ok(vec![human.natural_scalar()]),
        HumanProjection::ExpertMean => expect(
            "expert_mean",
            matches!(human.kind, HumanKind::ExpertMean { .. }),
            human.natural_scalar(),
        ),
        HumanProjection::CrowdProportion => expect(
            "crowd_proportion",
            matches!(human.kind, HumanKind::CrowdProportion { .. }),
            human.natural_scalar(),
        ),
        HumanProjection::Vatex => expect(
            "vatex",
            matches!(human.kind, HumanKind::Vatex { .. }),
            human.natural_scalar(),
        ),
        HumanProjection::AccrMean => expect(
            "accr",
            matches!(human.kind, HumanKind::Accr { .. }),
            human.natural_scalar(),
        ),
        HumanProjection::Accuracy => accr_component(record, 0),
        HumanProjection::Completeness => accr_component(record, 1),
        HumanProjection::Conciseness => accr_component(record, 2),
        HumanProjection::Relevance => accr_component(record, 3),
        HumanProjection::RawJudgments => Ok(match &human.raw {
            Some(raw) if !raw.is_empty() => raw.clone(),
            _ => vec![human.natural_scalar()],
        }),
    }
}

/// Correlates one precomputed metric column against human judgments over a
/// corpus. With `RawJudgments` the metric value is repeated once per
/// annotator row.
pub fn correlate_corpus(
    records: &[CorpusRecord],
    metric_column: &str,
    projection: HumanProjection,
) -> Result<CorrelationEntry, StatsError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for record in records {
        let metric =
            *record
                .metrics
                .get(metric_column)
                .ok_or_else(|| StatsError::MissingColumn {
                    record_id: record.id.clone(),
                    column: metric_column.to_string(),
                })?;
        for human_value in project(record, projection)? {
            xs.push(metric);
            ys.push(human_value);
        }
    }
    Ok(CorrelationEntry {
        metric: metric_column.to_string(),
        dataset: None,
        tau_b: kendall_tau_b(&xs, &ys)?,
        tau_c: kendall_tau_c(&xs, &ys)?,
        n: xs.len(),
    })
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("paired samples differ in length: {x_len} vs {y_len}")]
    LengthMismatch { x_len: usize, y_len: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("fewer than two distinct categories on a margin")]
    DegenerateCategories,
    #[error("no score pairs to evaluate")]
    EmptyPairs,
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("record {record_id} has no value for metric column {column}")]
    MissingColumn { record_id: String, column: String },
    #[error("record {0} has no human judgment")]
    MissingHuman(String),
    #[error("record {record_id}: judgment kind does not match projection (expected {expected})")]
    ProjectionMismatch {
        record_id: String,
        expected: &'static str,
    },
}
