//! The evaluate run: validate everything first, guard the budget, then
//! judge records on a small worker pool and persist outcomes in input
//! order.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use gveval::corpus::{
    corpus_digest, existing_outcome_ids, load_corpus, CorpusError, FailureNote, OutcomeLine,
    OutcomeWriter, RunManifest,
};
use gveval::judge::{judge_record, prepare_attachment};
use gveval::model::{validate_record, CorpusRecord, EvalConfig, ImagePayload};
use gveval::oracle::Client;

use crate::backend::{build_client, fatal_backend_error};
use crate::config::Settings;
use crate::{CliError, EvaluateArgs};

const SMOKE_LIMIT: usize = 10;
/// Rough size of an instantiated template in characters, before the
/// caption and references are spliced in.
const TEMPLATE_CHAR_ESTIMATE: usize = 3_500;
const CHARS_PER_TOKEN: usize = 4;

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let settings =
        crate::config::resolve(&args.backend, args.parallel, Some(&args.corpus), |key| {
            std::env::var(key).ok()
        })?;
    let config = args.eval_config(settings.parallel);
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let mut records = load_corpus(&args.corpus, args.format.into())
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.corpus.display())))?;
    if args.smoke {
        records.truncate(SMOKE_LIMIT);
    }
    if records.is_empty() {
        return Err(CliError::Usage(format!(
            "{} holds no records",
            args.corpus.display()
        )));
    }

    reject_invalid_records(&records, &config)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", args.out.display())))?;
    let outcomes_path = args.out.join("outcomes.jsonl");
    let manifest_path = args.out.join("manifest.json");

    let done = existing_outcome_ids(&outcomes_path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", outcomes_path.display())))?;
    let (worklist, skipped): (Vec<&CorpusRecord>, Vec<&CorpusRecord>) =
        records.iter().partition(|r| !done.contains(&r.id));

    if settings.mock_fixture.is_none() {
        guard_budget(&worklist, args.yes, settings.budget_max_tokens)?;
    }

    let digest = corpus_digest(&args.corpus)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.corpus.display())))?;
    let mut manifest = RunManifest::begin(
        config.clone(),
        settings.model_id.clone(),
        args.corpus.display().to_string(),
        digest,
        outcomes_path.display().to_string(),
        records.len(),
    );
    manifest.skipped = skipped.len();
    manifest
        .save(&manifest_path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", manifest_path.display())))?;

    let client = build_client(&settings)?;
    let attachments = prepare_attachments(&worklist, &config, &settings, args);
    let writer = OutcomeWriter::append(&outcomes_path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", outcomes_path.display())))?;

    let outcome = run_pool(
        &client,
        &config,
        &settings,
        args,
        &worklist,
        &attachments,
        writer,
    );

    manifest.evaluated = outcome.written;
    manifest.failures = outcome.failures;
    manifest.finish();
    manifest
        .save(&manifest_path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", manifest_path.display())))?;

    if let Some(message) = outcome.fatal {
        return Err(CliError::Backend(message));
    }

    println!(
        "evaluated {} of {} records ({} skipped, {} failed)",
        manifest.evaluated,
        manifest.total_records,
        manifest.skipped,
        manifest.failures.len()
    );
    println!("outcomes: {}", outcomes_path.display());
    println!("manifest: {}", manifest_path.display());

    if manifest.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial(format!(
            "{} of {} records failed; the manifest lists them",
            manifest.failures.len(),
            manifest.total_records
        )))
    }
}

/// Checks every record against the configured mode before anything else
/// runs, so a mismatched corpus never costs a backend call.
fn reject_invalid_records(records: &[CorpusRecord], config: &EvalConfig) -> Result<(), CliError> {
    let bad: Vec<String> = records
        .iter()
        .filter_map(|record| {
            validate_record(record, config)
                .err()
                .map(|e| format!("  {}: {e}", record.id))
        })
        .collect();
    if bad.is_empty() {
        return Ok(());
    }
    Err(CliError::Usage(format!(
        "{} record(s) failed validation:\n{}",
        bad.len(),
        bad.join("\n")
    )))
}

/// Upfront cost gate for live runs. The estimate is deliberately crude,
/// template size plus record text at four characters per token.
fn guard_budget(
    worklist: &[&CorpusRecord],
    accepted: bool,
    max_tokens: u64,
) -> Result<(), CliError> {
    let chars: usize = worklist
        .iter()
        .map(|r| {
            TEMPLATE_CHAR_ESTIMATE
                + r.candidate.text.len()
                + r.references.captions.iter().map(String::len).sum::<usize>()
        })
        .sum();
    let estimate = (chars / CHARS_PER_TOKEN) as u64;
    println!(
        "estimated prompt volume: ~{estimate} tokens across {} records",
        worklist.len()
    );
    if estimate > max_tokens && !accepted {
        return Err(CliError::Usage(format!(
            "estimate exceeds the {max_tokens} token budget; pass --yes to proceed"
        )));
    }
    Ok(())
}

/// Pixels for every distinct visual the run needs, loaded once up front.
/// A visual that fails to load marks its records as failures instead of
/// sinking the run.
fn prepare_attachments(
    worklist: &[&CorpusRecord],
    config: &EvalConfig,
    settings: &Settings,
    args: &EvaluateArgs,
) -> HashMap<String, Result<ImagePayload, String>> {
    let mut prepared = HashMap::new();
    if !config.mode.needs_visual() {
        return prepared;
    }
    for record in worklist {
        let Some(visual) = &record.visual else {
            continue;
        };
        if prepared.contains_key(&visual.path) {
            continue;
        }
        let mut handle = visual.clone();
        handle.kind = args.kind.resolve(Some(visual.kind));
        let loaded = prepare_attachment(
            &handle,
            &settings.corpus_root,
            settings.decoder_cmd.as_deref(),
        )
        .map_err(|e| e.to_string());
        prepared.insert(visual.path.clone(), loaded);
    }
    prepared
}

// ---------------------------------------------------------------------------
// worker pool
// ---------------------------------------------------------------------------

struct PoolOutcome {
    written: usize,
    failures: Vec<FailureNote>,
    fatal: Option<String>,
}

/// Buffers out-of-order results and flushes them to the outcome file in
/// input order, so reruns produce identical files at any parallelism. A
/// failed record releases its slot without writing a line.
struct OrderedSink {
    writer: OutcomeWriter,
    pending: BTreeMap<usize, Option<OutcomeLine>>,
    next: usize,
    written: usize,
}

impl OrderedSink {
    fn push(&mut self, ordinal: usize, line: Option<OutcomeLine>) -> Result<(), CorpusError> {
        self.pending.insert(ordinal, line);
        while let Some(slot) = self.pending.remove(&self.next) {
            if let Some(line) = slot {
                self.writer.write(&line)?;
                self.written += 1;
            }
            self.next += 1;
        }
        Ok(())
    }
}

fn run_pool(
    client: &Client,
    config: &EvalConfig,
    settings: &Settings,
    args: &EvaluateArgs,
    worklist: &[&CorpusRecord],
    attachments: &HashMap<String, Result<ImagePayload, String>>,
    writer: OutcomeWriter,
) -> PoolOutcome {
    let next = AtomicUsize::new(0);
    let fatal: Mutex<Option<String>> = Mutex::new(None);
    let sink = Mutex::new(OrderedSink {
        writer,
        pending: BTreeMap::new(),
        next: 0,
        written: 0,
    });
    let failures: Mutex<Vec<(usize, FailureNote)>> = Mutex::new(Vec::new());
    let workers = (settings.parallel as usize).min(worklist.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if fatal.lock().unwrap().is_some() {
                    break;
                }
                let ordinal = next.fetch_add(1, Ordering::SeqCst);
                if ordinal >= worklist.len() {
                    break;
                }
                let record = worklist[ordinal];
                match judge_one(client, config, settings, args, record, attachments) {
                    Ok(line) => {
                        let mut sink = sink.lock().unwrap();
                        if let Err(e) = sink.push(ordinal, Some(line)) {
                            *fatal.lock().unwrap() = Some(format!("outcome write: {e}"));
                            break;
                        }
                    }
                    Err(RecordError::Fatal(message)) => {
                        *fatal.lock().unwrap() = Some(message);
                        break;
                    }
                    Err(RecordError::Failed(error)) => {
                        failures.lock().unwrap().push((
                            ordinal,
                            FailureNote {
                                id: record.id.clone(),
                                error,
                            },
                        ));
                        let mut sink = sink.lock().unwrap();
                        if let Err(e) = sink.push(ordinal, None) {
                            *fatal.lock().unwrap() = Some(format!("outcome write: {e}"));
                            break;
                        }
                    }
                }
            });
        }
    });

    let mut ordered_failures = failures.into_inner().unwrap();
    ordered_failures.sort_by_key(|(ordinal, _)| *ordinal);
    PoolOutcome {
        written: sink.into_inner().unwrap().written,
        failures: ordered_failures.into_iter().map(|(_, note)| note).collect(),
        fatal: fatal.into_inner().unwrap(),
    }
}

enum RecordError {
    /// This record failed; the run carries on.
    Failed(String),
    /// The backend is gone; stop the run.
    Fatal(String),
}

fn judge_one(
    client: &Client,
    config: &EvalConfig,
    settings: &Settings,
    args: &EvaluateArgs,
    record: &CorpusRecord,
    attachments: &HashMap<String, Result<ImagePayload, String>>,
) -> Result<OutcomeLine, RecordError> {
    let kind = args.kind.resolve(record.visual.as_ref().map(|v| v.kind));
    let attachment = match record
        .visual
        .as_ref()
        .and_then(|v| attachments.get(&v.path))
    {
        Some(Ok(payload)) => Some(payload.clone()),
        Some(Err(message)) => return Err(RecordError::Failed(format!("visual: {message}"))),
        None => None,
    };
    match judge_record(client, config, &settings.model_id, kind, record, attachment) {
        Ok(outcome) => Ok(OutcomeLine::from(&outcome)),
        Err(err) if fatal_backend_error(&err) => Err(RecordError::Fatal(err.to_string())),
        Err(err) => Err(RecordError::Failed(err.to_string())),
    }
}

// ---------------------------------------------------------------------------

/// Shared by the variance probe, which judges a single known record.
pub fn find_record<'a>(
    records: &'a [CorpusRecord],
    id: &str,
    corpus: &PathBuf,
) -> Result<&'a CorpusRecord, CliError> {
    records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| CliError::Usage(format!("record {id} not found in {}", corpus.display())))
}
