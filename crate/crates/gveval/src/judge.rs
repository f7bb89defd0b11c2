//! One record end to end: prompt, backend call, score extraction.

use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::model::{
    validate_record, AccrScores, CorpusRecord, Dimensionality, EvalConfig, EvalOutcome,
    ImagePayload, ScoreDistribution, TokenEvidence, ValidateError, VisualHandle, VisualKind,
};
use crate::oracle::{BackendRequest, BackendResponse, Client, OracleError};
use crate::prompt::{build_prompt, PromptError};
use crate::score::{self, ScoreError};
use crate::vision::{extract_frames, image_file_payload, strip_from_frames, VisionError};

/// Generous ceiling for judge replies; reasoning plus a score sentence
/// fits comfortably.
pub const MAX_OUTPUT_TOKENS: u32 = 1024;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error(transparent)]
    Invalid(#[from] ValidateError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Visual(#[from] VisionError),
    #[error(transparent)]
    Backend(#[from] OracleError),
    #[error("record {record_id}: could not score reply: {source}")]
    Score {
        record_id: String,
        #[source]
        source: ScoreError,
    },
}

/// Loads the pixels a record points at, ready to attach. Images load
/// directly; videos are decoded, sampled, and composited into the labeled
/// three-frame strip.
pub fn prepare_attachment(
    visual: &VisualHandle,
    corpus_root: &Path,
    decoder_cmd: Option<&str>,
) -> Result<ImagePayload, VisionError> {
    let path = corpus_root.join(&visual.path);
    match visual.kind {
        VisualKind::Image => image_file_payload(&path),
        VisualKind::Video => {
            let frames = extract_frames(&path, decoder_cmd)?;
            strip_from_frames(&frames)?.to_payload()
        }
    }
}

fn evidence_at(response: &BackendResponse, positions: &Range<usize>) -> Vec<TokenEvidence> {
    response.tokens[positions.clone()]
        .iter()
        .map(|t| TokenEvidence {
            token: t.text.clone(),
            logprob: t.logprob,
            alternatives: t.alternatives.clone(),
        })
        .collect()
}

struct Resolved {
    expected: f64,
    distribution: ScoreDistribution,
    truncated: bool,
    evidence: Vec<TokenEvidence>,
}

/// Expected score for one span, falling back to certainty at the printed
/// integer when the backend sent no usable alternatives.
fn resolve_span(
    response: &BackendResponse,
    span: &score::ScoreSpan,
    config: &EvalConfig,
    raw: i64,
) -> Result<Resolved, ScoreError> {
    if !config.use_expected_score {
        return Ok(Resolved {
            expected: raw as f64,
            distribution: ScoreDistribution::point_mass(raw),
            truncated: false,
            evidence: Vec::new(),
        });
    }
    match score::expected_score(response, span, config.scale) {
        Ok(es) => Ok(Resolved {
            expected: es.value,
            truncated: es.truncated,
            evidence: evidence_at(response, &es.token_positions),
            distribution: es.distribution,
        }),
        Err(ScoreError::NoTokenEvidence) => Ok(Resolved {
            expected: raw as f64,
            distribution: ScoreDistribution::point_mass(raw),
            truncated: false,
            evidence: Vec::new(),
        }),
        Err(other) => Err(other),
    }
}

/// Evaluates one record: builds the prompt, queries the judge through
/// the cache, and turns the reply into an outcome.
///
/// The caller supplies the attachment so that records sharing a visual
/// can share the load-and-composite work.
pub fn judge_record(
    client: &Client,
    config: &EvalConfig,
    model_id: &str,
    kind: VisualKind,
    record: &CorpusRecord,
    attachment: Option<ImagePayload>,
) -> Result<EvalOutcome, JudgeError> {
    validate_record(record, config)?;
    let bundle = build_prompt(
        config,
        kind,
        &record.candidate,
        &record.references,
        attachment,
    )?;
    let request = BackendRequest {
        model_id: model_id.to_string(),
        prompt_text: bundle.text,
        attachments: bundle.attachments,
        temperature: config.temperature,
        top_k_logprobs: config.top_k_logprobs,
        max_output_tokens: MAX_OUTPUT_TOKENS,
    };
    let (response, cache_hit) = client.cached_complete(&request)?;
    let score_err = |source| JudgeError::Score {
        record_id: record.id.clone(),
        source,
    };

    match config.dimensionality {
        Dimensionality::Overall => {
            let (raw, span) =
                score::extract_final_score(&response.text, config.scale).map_err(score_err)?;
            let resolved = resolve_span(&response, &span, config, raw).map_err(score_err)?;
            Ok(EvalOutcome {
                record_id: record.id.clone(),
                raw_score: raw,
                expected_score: resolved.expected,
                distribution: resolved.distribution,
                accr: None,
                reason: response.text.clone(),
                token_evidence: resolved.evidence,
                cache_hit,
                distribution_truncated: resolved.truncated,
            })
        }
        Dimensionality::Accr => {
            let extraction = score::extract_accr(&response.text).map_err(score_err)?;
            let raw = extraction.values;
            let mut expected = [0.0f64; 4];
            let mut parts = Vec::with_capacity(4);
            let mut truncated = false;
            let mut evidence = Vec::new();
            for (index, span) in extraction.spans.iter().enumerate() {
                let resolved =
                    resolve_span(&response, span, config, raw[index]).map_err(score_err)?;
                expected[index] = resolved.expected;
                truncated |= resolved.truncated;
                evidence.extend(resolved.evidence);
                parts.push(resolved.distribution);
            }
            let distribution = ScoreDistribution::mixture(&parts)
                .expect("four normalized distributions always mix");
            Ok(EvalOutcome {
                record_id: record.id.clone(),
                raw_score: ((raw.iter().sum::<i64>() as f64) / 4.0).round() as i64,
                expected_score: distribution.expectation(),
                distribution,
                accr: Some(AccrScores { raw, expected }),
                reason: response.text.clone(),
                token_evidence: evidence,
                cache_hit,
                distribution_truncated: truncated,
            })
        }
    }
}
