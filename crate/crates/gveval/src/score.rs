//! Turning judge replies into scores.
//!
//! A well-formed overall reply ends with a sentence like "The final score
//! is $85$."; rubric replies wrap their four integers in Greek letter
//! pairs (α, β, ψ, δ). Parsing always takes the last occurrence of a
//! pattern so score-like fragments inside the reasoning do not interfere.
//!
//! When the backend reports token log-probabilities, the raw integer is
//! replaced by the expectation of the score distribution read off the
//! first score token's alternative list. That single reply carries the
//! judge's residual uncertainty, so no repeat sampling is needed; the
//! variance estimator exists to check that assumption on a given setup.

use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Dimension, ScoreDistribution, ScoreScale};
use crate::oracle::BackendResponse;

static FINAL_SCORE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\$[ \t]*(\d+)[ \t]*\$").unwrap());

static ACCR_SCORES: LazyLock<[Regex; 4]> = LazyLock::new(|| {
    DIMENSION_WRAPPERS
        .map(|(_, wrapper)| Regex::new(&format!(r"{wrapper}[ \t]*(\d+)[ \t]*{wrapper}")).unwrap())
});

/// Location of a score literal inside a reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreSpan {
    /// Byte range of the integer literal in the reply text.
    pub char_range: Range<usize>,
    /// Token index range covering the literal; empty until mapped against
    /// a tokenized response.
    pub token_positions: Range<usize>,
    /// The digits as they appeared, without wrappers.
    pub literal: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("reply contains no wrapped integer score")]
    NoScoreFound,
    #[error("score {0} falls outside the active scale")]
    ScoreOutOfRange(i64),
    #[error("reply is missing a wrapped {0} score")]
    MissingDimension(Dimension),
    #[error("response carries no token alternatives for the score position")]
    NoTokenEvidence,
    #[error("candidate filtering left an empty score distribution")]
    DegenerateDistribution,
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("span does not match the response text")]
    InvalidSpan,
}

fn last_wrapped_integer(
    text: &str,
    re: &Regex,
    min: i64,
    max: i64,
) -> Option<Result<(i64, ScoreSpan), ScoreError>> {
    let captures = re.captures_iter(text).last()?;
    let digits = captures.get(1).expect("pattern has one capture group");
    let value = digits.as_str().parse::<i64>().unwrap_or(i64::MAX);
    if value < min || value > max {
        return Some(Err(ScoreError::ScoreOutOfRange(value)));
    }
    Some(Ok((
        value,
        ScoreSpan {
            char_range: digits.start()..digits.end(),
            token_positions: 0..0,
            literal: digits.as_str().to_string(),
        },
    )))
}

/// Finds the last `$<integer>$` occurrence and checks it against the
/// scale. Padding spaces inside the wrappers are tolerated.
pub fn extract_final_score(text: &str, scale: ScoreScale) -> Result<(i64, ScoreSpan), ScoreError> {
    last_wrapped_integer(text, &FINAL_SCORE, scale.min(), scale.max())
        .ok_or(ScoreError::NoScoreFound)?
}

/// The four rubric scores with their spans, rubric order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccrExtraction {
    pub values: [i64; 4],
    pub spans: [ScoreSpan; 4],
}

const DIMENSION_WRAPPERS: [(Dimension, char); 4] = [
    (Dimension::Accuracy, 'α'),
    (Dimension::Completeness, 'β'),
    (Dimension::Conciseness, 'ψ'),
    (Dimension::Relevance, 'δ'),
];

/// Finds the last Greek-wrapped integer for each rubric dimension. Rubric
/// scores are always on the 0-100 scale.
pub fn extract_accr(text: &str) -> Result<AccrExtraction, ScoreError> {
    let mut values = [0i64; 4];
    let mut spans: [Option<ScoreSpan>; 4] = [None, None, None, None];
    for (index, (dimension, _)) in DIMENSION_WRAPPERS.iter().enumerate() {
        let (value, span) = last_wrapped_integer(text, &ACCR_SCORES[index], 0, 100)
            .ok_or(ScoreError::MissingDimension(*dimension))??;
        values[index] = value;
        spans[index] = Some(span);
    }
    Ok(AccrExtraction {
        values,
        spans: spans.map(|s| s.expect("all four dimensions filled above")),
    })
}

/// A probability-weighted score with the evidence that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedScore {
    pub value: f64,
    pub distribution: ScoreDistribution,
    /// True when the realized literal spanned more than one token, so the
    /// alternative list only approximates the full integer distribution.
    pub truncated: bool,
    /// Tokens of the response that cover the literal.
    pub token_positions: Range<usize>,
}

fn token_cover(response: &BackendResponse, span: &ScoreSpan) -> Result<Range<usize>, ScoreError> {
    if response.tokens.is_empty() || !response.tokens_match_text() {
        return Err(ScoreError::NoTokenEvidence);
    }
    let mut first = None;
    let mut last = None;
    let mut offset = 0;
    for (index, token) in response.tokens.iter().enumerate() {
        let start = offset;
        offset += token.text.len();
        if start < span.char_range.end && offset > span.char_range.start {
            first.get_or_insert(index);
            last = Some(index);
        }
    }
    match (first, last) {
        (Some(first), Some(last)) => Ok(first..last + 1),
        _ => Err(ScoreError::InvalidSpan),
    }
}

/// Computes the expectation of the score distribution at a span.
///
/// Candidates come from the alternative list of the first token covering
/// the literal: every alternative that strips to an integer within the
/// scale stands for the score it spells, and the realized token stands
/// for the full realized literal so multi-token literals keep their
/// value. Weights are the exponentiated log-probabilities, renormalized
/// over the kept set.
pub fn expected_score(
    response: &BackendResponse,
    span: &ScoreSpan,
    scale: ScoreScale,
) -> Result<ExpectedScore, ScoreError> {
    if span.char_range.end > response.text.len()
        || response.text.get(span.char_range.clone()) != Some(span.literal.as_str())
    {
        return Err(ScoreError::InvalidSpan);
    }
    let positions = token_cover(response, span)?;
    let first_token = &response.tokens[positions.start];
    if first_token.alternatives.is_empty() {
        return Err(ScoreError::NoTokenEvidence);
    }
    let realized_value: i64 = span.literal.parse().map_err(|_| ScoreError::InvalidSpan)?;

    let mut candidates: Vec<(i64, f64)> = vec![(realized_value, first_token.logprob.exp())];
    for (alt_text, logprob) in &first_token.alternatives {
        if *alt_text == first_token.text {
            continue;
        }
        if let Ok(value) = alt_text.trim().parse::<i64>() {
            if scale.contains(value) {
                candidates.push((value, logprob.exp()));
            }
        }
    }
    let distribution = ScoreDistribution::from_weights(candidates)
        .map_err(|_| ScoreError::DegenerateDistribution)?;
    Ok(ExpectedScore {
        value: distribution.expectation(),
        truncated: positions.len() > 1,
        token_positions: positions,
        distribution,
    })
}

/// Per-dimension expectations for a rubric reply. Dimensions fail
/// independently: a span without token evidence yields an error in its
/// slot while the others still resolve.
pub fn expected_accr(
    response: &BackendResponse,
    spans: &[ScoreSpan; 4],
) -> [Result<ExpectedScore, ScoreError>; 4] {
    [
        expected_score(response, &spans[0], ScoreScale::Scoring),
        expected_score(response, &spans[1], ScoreScale::Scoring),
        expected_score(response, &spans[2], ScoreScale::Scoring),
        expected_score(response, &spans[3], ScoreScale::Scoring),
    ]
}

/// Spread of repeat-sampled expected scores for one fixed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub n: usize,
    pub mean: f64,
    /// Population variance (divide by n).
    pub variance: f64,
    pub samples: Vec<f64>,
}

/// Mean and population variance of repeated samples.
pub fn estimate_variance(samples: &[f64]) -> Result<VarianceReport, ScoreError> {
    if samples.len() < 2 {
        return Err(ScoreError::TooFewSamples(samples.len()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let variance = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(VarianceReport {
        n: samples.len(),
        mean,
        variance,
        samples: samples.to_vec(),
    })
}
