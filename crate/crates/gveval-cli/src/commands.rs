//! The smaller subcommands: correlate, compose, foil, variance.

use std::collections::BTreeSet;
use std::path::Path;

use gveval::corpus::{emit_report, load_corpus, read_outcomes, CorpusFormat, OutcomeLine};
use gveval::judge::prepare_attachment;
use gveval::model::{CorpusRecord, EvalConfig, ScoreScale, VisualKind};
use gveval::oracle::BackendRequest;
use gveval::prompt::build_prompt;
use gveval::score::{estimate_variance, expected_score, extract_final_score};
use gveval::stats::{correlate_corpus, foil_pairwise_accuracy, CorrelationEntry};
use gveval::vision::{extract_frames, image_file_payload, sample_indices, strip_from_frames};

use crate::backend::build_client;
use crate::{
    CliError, ComposeArgs, CorrelateArgs, FoilArgs, KindArg, ModeArg, ScaleArg, VarianceArgs,
};

/// Column name the evaluated scores are filed under when correlating.
const METRIC_COLUMN: &str = "G-VEval";

// ---------------------------------------------------------------------------
// correlate
// ---------------------------------------------------------------------------

pub fn cmd_correlate(args: &CorrelateArgs) -> Result<(), CliError> {
    let records = load_corpus(&args.corpus, args.format.into())
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.corpus.display())))?;
    let outcomes = read_outcomes(&args.outcomes)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.outcomes.display())))?;
    if outcomes.is_empty() {
        return Err(CliError::Usage(format!(
            "{} holds no outcomes",
            args.outcomes.display()
        )));
    }

    let joined = join_outcomes(&records, &outcomes, &args.corpus)?;
    let dataset = args.dataset.clone().or_else(|| {
        args.corpus
            .file_stem()
            .map(|stem| stem.to_string_lossy().into_owned())
    });

    let mut entries: Vec<CorrelationEntry> = Vec::new();
    for column in metric_columns(&joined) {
        let mut entry = correlate_corpus(&joined, &column, args.human.into())
            .map_err(|e| CliError::Usage(format!("column {column}: {e}")))?;
        entry.dataset = dataset.clone();
        entries.push(entry);
    }

    let report =
        emit_report(&entries, args.style.into()).map_err(|e| CliError::Usage(e.to_string()))?;
    print!("{report}");
    Ok(())
}

/// Files each outcome's expected score into its record's metric columns.
/// Only records with an outcome take part; an outcome whose id is not in
/// the corpus is an error.
fn join_outcomes(
    records: &[CorpusRecord],
    outcomes: &[OutcomeLine],
    corpus: &Path,
) -> Result<Vec<CorpusRecord>, CliError> {
    let mut joined = Vec::new();
    for outcome in outcomes {
        let Some(record) = records.iter().find(|r| r.id == outcome.id) else {
            return Err(CliError::Usage(format!(
                "outcome {} has no record in {}",
                outcome.id,
                corpus.display()
            )));
        };
        let mut record = record.clone();
        record
            .metrics
            .insert(METRIC_COLUMN.to_string(), outcome.expected_score);
        joined.push(record);
    }
    Ok(joined)
}

/// The evaluated column plus any precomputed metric present on every
/// joined record.
fn metric_columns(records: &[CorpusRecord]) -> Vec<String> {
    let mut columns = vec![METRIC_COLUMN.to_string()];
    let Some(first) = records.first() else {
        return columns;
    };
    let shared: BTreeSet<&String> = first
        .metrics
        .keys()
        .filter(|k| k.as_str() != METRIC_COLUMN)
        .filter(|k| records.iter().all(|r| r.metrics.contains_key(*k)))
        .collect();
    columns.extend(shared.into_iter().cloned());
    columns
}

// ---------------------------------------------------------------------------
// compose
// ---------------------------------------------------------------------------

pub fn cmd_compose(args: &ComposeArgs) -> Result<(), CliError> {
    let kind = match args.input_kind {
        KindArg::Image => VisualKind::Image,
        KindArg::Video => VisualKind::Video,
        KindArg::Auto => infer_kind(&args.input),
    };

    match kind {
        VisualKind::Image => {
            let payload =
                image_file_payload(&args.input).map_err(|e| CliError::Usage(e.to_string()))?;
            std::fs::write(&args.output, &payload.png)
                .map_err(|e| CliError::Usage(format!("{}: {e}", args.output.display())))?;
            println!("image input, copied to {}", args.output.display());
        }
        VisualKind::Video => {
            let frames = extract_frames(&args.input, args.decoder_cmd.as_deref())
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let (a, b, c) =
                sample_indices(frames.len()).map_err(|e| CliError::Usage(e.to_string()))?;
            println!("frames: {}, sampled indices: {a}, {b}, {c}", frames.len());
            let strip = strip_from_frames(&frames).map_err(|e| CliError::Usage(e.to_string()))?;
            let payload = strip
                .to_payload()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            std::fs::write(&args.output, &payload.png)
                .map_err(|e| CliError::Usage(format!("{}: {e}", args.output.display())))?;
            println!("strip: {}", args.output.display());
        }
    }
    Ok(())
}

fn infer_kind(input: &Path) -> VisualKind {
    if input.is_dir() {
        return VisualKind::Video;
    }
    match input.extension().and_then(|e| e.to_str()) {
        Some(ext) if ["png", "jpg", "jpeg", "bmp"].contains(&ext.to_ascii_lowercase().as_str()) => {
            VisualKind::Image
        }
        _ => VisualKind::Video,
    }
}

// ---------------------------------------------------------------------------
// foil
// ---------------------------------------------------------------------------

pub fn cmd_foil(args: &FoilArgs) -> Result<(), CliError> {
    let records = load_corpus(&args.pairs, CorpusFormat::FoilPairs)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.pairs.display())))?;
    let outcomes = read_outcomes(&args.scores)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.scores.display())))?;

    let score_of = |id: &str| -> Result<f64, CliError> {
        outcomes
            .iter()
            .find(|o| o.id == id)
            .map(|o| o.expected_score)
            .ok_or_else(|| {
                CliError::Usage(format!("no score for {id} in {}", args.scores.display()))
            })
    };

    let mut pairs = Vec::new();
    for record in &records {
        let Some(base) = record.id.strip_suffix("#true") else {
            continue;
        };
        pairs.push((score_of(&record.id)?, score_of(&format!("{base}#foil"))?));
    }

    let accuracy = foil_pairwise_accuracy(&pairs).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("{:.1}", accuracy * 100.0);
    Ok(())
}

// ---------------------------------------------------------------------------
// variance
// ---------------------------------------------------------------------------

pub fn cmd_variance(args: &VarianceArgs) -> Result<(), CliError> {
    if args.repeats < 2 {
        return Err(CliError::Usage("--repeats must be at least 2".to_string()));
    }
    let settings = crate::config::resolve(&args.backend, None, Some(&args.corpus), |key| {
        std::env::var(key).ok()
    })?;
    let records = load_corpus(&args.corpus, args.format.into())
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.corpus.display())))?;
    let record = crate::runner::find_record(&records, &args.id, &args.corpus)?;

    let config = EvalConfig {
        mode: match args.mode {
            ModeArg::RefOnly => gveval::model::EvalMode::RefOnly,
            ModeArg::RefFree => gveval::model::EvalMode::RefFree,
            ModeArg::Combined => gveval::model::EvalMode::Combined,
        },
        scale: match args.scale {
            ScaleArg::Scoring => ScoreScale::Scoring,
            ScaleArg::Rating => ScoreScale::Rating,
        },
        ..EvalConfig::default()
    };
    gveval::model::validate_record(record, &config).map_err(|e| CliError::Usage(e.to_string()))?;

    let kind = args.kind.resolve(record.visual.as_ref().map(|v| v.kind));
    let attachment = match (&record.visual, config.mode.needs_visual()) {
        (Some(visual), true) => Some(
            prepare_attachment(
                visual,
                &settings.corpus_root,
                settings.decoder_cmd.as_deref(),
            )
            .map_err(|e| CliError::Usage(e.to_string()))?,
        ),
        _ => None,
    };

    let bundle = build_prompt(
        &config,
        kind,
        &record.candidate,
        &record.references,
        attachment,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let request = BackendRequest {
        model_id: settings.model_id.clone(),
        prompt_text: bundle.text,
        attachments: bundle.attachments,
        temperature: config.temperature,
        top_k_logprobs: config.top_k_logprobs,
        max_output_tokens: 1024,
    };

    let client = build_client(&settings)?;
    let mut samples = Vec::with_capacity(args.repeats);
    for _ in 0..args.repeats {
        // Straight to the backend; cached replies would make every
        // repeat identical and the variance meaningless.
        let response = client
            .complete(&request)
            .map_err(|e| CliError::Backend(e.to_string()))?;
        let (raw, span) = extract_final_score(&response.text, config.scale)
            .map_err(|e| CliError::Partial(format!("record {}: {e}", record.id)))?;
        let expected = match expected_score(&response, &span, config.scale) {
            Ok(expected) => expected.value,
            Err(gveval::score::ScoreError::NoTokenEvidence) => raw as f64,
            Err(e) => return Err(CliError::Partial(format!("record {}: {e}", record.id))),
        };
        samples.push(expected);
    }

    let report = estimate_variance(&samples).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("n: {}", report.n);
    println!("mean: {:.12}", report.mean);
    println!("variance: {:.12}", report.variance);
    let rendered: Vec<String> = report.samples.iter().map(|s| format!("{s:.12}")).collect();
    println!("samples: {}", rendered.join(", "));
    Ok(())
}
