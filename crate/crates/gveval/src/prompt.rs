//! Prompt assembly from the shipped template files.
//!
//! One template exists per (visual kind, mode, dimensionality) combination
//! under `prompts/`, embedded at compile time together with a checksum
//! manifest. The checksums are verified before first use: judged scores
//! are only comparable across runs when the prompt bytes are identical,
//! so silent template edits must surface as errors, not as drift.
//!
//! Templates are reproduced verbatim from the source material, including
//! their grammatical rough edges. Editing them would change the very
//! thing being measured.

use std::collections::HashMap;
use std::sync::LazyLock;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    CandidateCaption, Dimensionality, EvalConfig, EvalMode, ImagePayload, ReferenceSet, ScoreScale,
    VisualKind,
};

// ---------------------------------------------------------------------------
// Embedded resources
// ---------------------------------------------------------------------------

const CHECKSUM_MANIFEST: &str = include_str!("../prompts/checksums.txt");

const TEMPLATES: [(&str, &str); 9] = [
    (
        "image/ref-only/overall.txt",
        include_str!("../prompts/image/ref-only/overall.txt"),
    ),
    (
        "image/ref-free/overall.txt",
        include_str!("../prompts/image/ref-free/overall.txt"),
    ),
    (
        "image/combined/overall.txt",
        include_str!("../prompts/image/combined/overall.txt"),
    ),
    (
        "video/ref-only/overall.txt",
        include_str!("../prompts/video/ref-only/overall.txt"),
    ),
    (
        "video/ref-free/overall.txt",
        include_str!("../prompts/video/ref-free/overall.txt"),
    ),
    (
        "video/combined/overall.txt",
        include_str!("../prompts/video/combined/overall.txt"),
    ),
    (
        "video/ref-only/accr.txt",
        include_str!("../prompts/video/ref-only/accr.txt"),
    ),
    (
        "video/ref-free/accr.txt",
        include_str!("../prompts/video/ref-free/accr.txt"),
    ),
    (
        "video/combined/accr.txt",
        include_str!("../prompts/video/combined/accr.txt"),
    ),
];

/// Section markers that delimit template blocks. Ablation surgery cuts
/// from one marker to the next, so every marker a template uses must be
/// listed here.
const SECTION_MARKERS: [&str; 8] = [
    "Evaluation Criteria:",
    "Evaluation Dimensions:",
    "Evaluation Steps:",
    "Reference captions:",
    "Generated captions:",
    "Image is attached",
    "Video Frames are attached",
    "Response Format:",
];

const OVERALL_SCORE_ONLY: &str = "Response Format:\n\n\
    Reply with only the final score: an integer from 0 to 100 wrapped in the dollar \
    signs ($), and nothing else.\n";

const ACCR_SCORE_ONLY: &str = "Response Format:\n\n\
    Reply with only the four scores, each an integer from 0 to 100, and nothing else.\n\
    Wrap Accuracy score in α\n\
    Wrap Completeness score in β\n\
    Wrap Conciseness score in ψ\n\
    Wrap Relevance score in δ\n";

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("no template for this combination: {0}")]
    UnsupportedCombination(&'static str),
    #[error("template integrity failure: {0}")]
    TemplateMissing(String),
    #[error("this mode needs reference captions but none were given")]
    EmptyReferenceSet,
    #[error("this mode needs a visual attachment but none was given")]
    MissingAttachment,
}

// ---------------------------------------------------------------------------
// Template store
// ---------------------------------------------------------------------------

fn verify_checksums(manifest: &str, templates: &[(&str, &str)]) -> Result<(), String> {
    let mut listed = HashMap::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some(digest), Some(path)) => {
                listed.insert(path.to_string(), digest.to_string());
            }
            _ => return Err(format!("unreadable checksum line: {line:?}")),
        }
    }
    if listed.len() != templates.len() {
        return Err(format!(
            "checksum manifest lists {} templates, expected {}",
            listed.len(),
            templates.len()
        ));
    }
    for (path, body) in templates {
        let expected = listed
            .get(*path)
            .ok_or_else(|| format!("{path} has no checksum entry"))?;
        let actual = hex::encode(Sha256::digest(body.as_bytes()));
        if actual != *expected {
            return Err(format!("{path} does not match its recorded checksum"));
        }
    }
    Ok(())
}

static INTEGRITY: LazyLock<Result<(), String>> =
    LazyLock::new(|| verify_checksums(CHECKSUM_MANIFEST, &TEMPLATES));

/// The shipped template checksums, keyed by template path. Run manifests
/// embed these so any two runs can be compared for prompt drift.
pub fn template_checksums() -> std::collections::BTreeMap<String, String> {
    CHECKSUM_MANIFEST
        .lines()
        .filter(|line| !line.trim().is_empty())
        .filter_map(|line| {
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some(digest), Some(path)) => Some((path.to_string(), digest.to_string())),
                _ => None,
            }
        })
        .collect()
}

fn template_path(
    kind: VisualKind,
    mode: EvalMode,
    dimensionality: Dimensionality,
) -> Result<&'static str, PromptError> {
    let kind_dir = match kind {
        VisualKind::Image => {
            if dimensionality == Dimensionality::Accr {
                return Err(PromptError::UnsupportedCombination(
                    "per-dimension rubrics are only defined for video captions",
                ));
            }
            "image"
        }
        VisualKind::Video => "video",
    };
    let mode_dir = match mode {
        EvalMode::RefOnly => "ref-only",
        EvalMode::RefFree => "ref-free",
        EvalMode::Combined => "combined",
    };
    let file = match dimensionality {
        Dimensionality::Overall => "overall.txt",
        Dimensionality::Accr => "accr.txt",
    };
    Ok(match (kind_dir, mode_dir, file) {
        ("image", "ref-only", "overall.txt") => "image/ref-only/overall.txt",
        ("image", "ref-free", "overall.txt") => "image/ref-free/overall.txt",
        ("image", "combined", "overall.txt") => "image/combined/overall.txt",
        ("video", "ref-only", "overall.txt") => "video/ref-only/overall.txt",
        ("video", "ref-free", "overall.txt") => "video/ref-free/overall.txt",
        ("video", "combined", "overall.txt") => "video/combined/overall.txt",
        ("video", "ref-only", "accr.txt") => "video/ref-only/accr.txt",
        ("video", "ref-free", "accr.txt") => "video/ref-free/accr.txt",
        ("video", "combined", "accr.txt") => "video/combined/accr.txt",
        _ => unreachable!("all reachable combinations are enumerated"),
    })
}

fn verified_template(path: &'static str) -> Result<&'static str, PromptError> {
    INTEGRITY
        .as_ref()
        .map_err(|message| PromptError::TemplateMissing(message.clone()))?;
    TEMPLATES
        .iter()
        .find(|(p, _)| *p == path)
        .map(|(_, body)| *body)
        .ok_or_else(|| PromptError::TemplateMissing(format!("{path} is not embedded")))
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// How the judge was instructed to format its reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseGrammar {
    /// A final `$<integer>$` sentence.
    DollarWrapped,
    /// Four Greek-wrapped integers, one per rubric dimension.
    GreekWrappedAccr,
    /// A plain integer with no wrapper. No shipped template asks for
    /// this; callers may use it for lenient re-parsing experiments.
    BareScore,
}

/// A ready-to-send prompt with its attachments.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub text: String,
    pub attachments: Vec<ImagePayload>,
    pub expected_response_grammar: ResponseGrammar,
}

/// Joins reference captions into a numbered block, one per line,
/// original order.
pub fn join_references(references: &ReferenceSet) -> Result<String, PromptError> {
    if references.is_empty() {
        return Err(PromptError::EmptyReferenceSet);
    }
    Ok(references
        .captions
        .iter()
        .enumerate()
        .map(|(index, caption)| format!("{}. {}", index + 1, caption))
        .collect::<Vec<_>>()
        .join("\n"))
}

/// Deletes one marked section: everything from the marker up to the next
/// known marker (or the end of the text). Unknown markers are left alone.
fn strip_section(text: &str, marker: &str) -> String {
    let Some(start) = text.find(marker) else {
        return text.to_string();
    };
    let tail_offset = start + marker.len();
    let next = SECTION_MARKERS
        .iter()
        .filter(|m| **m != marker)
        .filter_map(|m| text[tail_offset..].find(m).map(|i| i + tail_offset))
        .min();
    match next {
        Some(next) => format!("{}{}", &text[..start], &text[next..]),
        None => text[..start].to_string(),
    }
}

/// Replaces everything from "Response Format:" to the end of the text.
fn replace_response_format(text: &str, replacement: &str) -> String {
    match text.find("Response Format:") {
        Some(start) => format!("{}{}", &text[..start], replacement),
        None => text.to_string(),
    }
}

/// Builds the full prompt for one candidate caption.
///
/// The visual kind picks the template family; the config picks mode,
/// dimensionality, scale, and ablation surgery. The attachment is the
/// original image or the composited frame strip; it is required by the
/// modes that look at pixels and ignored by the one that does not.
pub fn build_prompt(
    config: &EvalConfig,
    kind: VisualKind,
    candidate: &CandidateCaption,
    references: &ReferenceSet,
    visual_attachment: Option<ImagePayload>,
) -> Result<PromptBundle, PromptError> {
    if config.scale == ScoreScale::Rating && config.dimensionality == Dimensionality::Accr {
        return Err(PromptError::UnsupportedCombination(
            "the 1 to 5 scale is only defined for overall scores",
        ));
    }
    let path = template_path(kind, config.mode, config.dimensionality)?;
    let mut text = verified_template(path)?.to_string();

    if !config.include_cot_steps {
        text = strip_section(&text, "Evaluation Steps:");
    }
    if !config.require_reason {
        let replacement = match config.dimensionality {
            Dimensionality::Overall => OVERALL_SCORE_ONLY,
            Dimensionality::Accr => ACCR_SCORE_ONLY,
        };
        text = replace_response_format(&text, replacement);
    }
    if config.scale == ScoreScale::Rating {
        text = text.replace("from 0 to 100", "from 1 to 5");
    }

    if config.mode.needs_references() {
        let joined = join_references(references)?;
        text = text.replace("{{Reference}}", &joined);
    }
    text = text.replace("{{Caption}}", &candidate.text);

    let attachments = if config.mode.needs_visual() {
        match visual_attachment {
            Some(payload) => vec![payload],
            None => return Err(PromptError::MissingAttachment),
        }
    } else {
        Vec::new()
    };

    let expected_response_grammar = match config.dimensionality {
        Dimensionality::Overall => ResponseGrammar::DollarWrapped,
        Dimensionality::Accr => ResponseGrammar::GreekWrappedAccr,
    };

    Ok(PromptBundle {
        text,
        attachments,
        expected_response_grammar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dimensionality::{Accr, Overall};
    use crate::model::EvalMode::{Combined, RefFree, RefOnly};
    use crate::model::VisualKind::{Image, Video};

    fn candidate() -> CandidateCaption {
        CandidateCaption {
            id: "c1".to_string(),
            text: "a dog chases a ball".to_string(),
            visual_id: Some("v1".to_string()),
        }
    }

    fn references() -> ReferenceSet {
        ReferenceSet::new(vec![
            "a dog runs across the lawn".to_string(),
            "a puppy plays fetch".to_string(),
        ])
    }

    fn config(mode: EvalMode, dimensionality: Dimensionality) -> EvalConfig {
        EvalConfig {
            mode,
            dimensionality,
            ..EvalConfig::default()
        }
    }

    fn payload() -> ImagePayload {
        ImagePayload {
            png: vec![0x89, 0x50, 0x4e, 0x47],
        }
    }

    const ALL_COMBINATIONS: [(VisualKind, EvalMode, Dimensionality); 9] = [
        (Image, RefOnly, Overall),
        (Image, RefFree, Overall),
        (Image, Combined, Overall),
        (Video, RefOnly, Overall),
        (Video, RefFree, Overall),
        (Video, Combined, Overall),
        (Video, RefOnly, Accr),
        (Video, RefFree, Accr),
        (Video, Combined, Accr),
    ];

    fn build(kind: VisualKind, config: &EvalConfig) -> PromptBundle {
        let attachment = config.mode.needs_visual().then(payload);
        build_prompt(config, kind, &candidate(), &references(), attachment).unwrap()
    }

    #[test]
    fn default_output_is_the_template_with_placeholders_filled() {
        for (kind, mode, dimensionality) in ALL_COMBINATIONS {
            let bundle = build(kind, &config(mode, dimensionality));
            let template =
                verified_template(template_path(kind, mode, dimensionality).unwrap()).unwrap();
            let mut expected = template.replace("{{Caption}}", &candidate().text);
            if mode.needs_references() {
                expected =
                    expected.replace("{{Reference}}", &join_references(&references()).unwrap());
            }
            assert_eq!(
                bundle.text, expected,
                "{kind:?} {mode:?} {dimensionality:?}"
            );
            assert!(!bundle.text.contains("{{"));
        }
    }

    #[test]
    fn ref_only_image_overall_keeps_its_anchor_lines() {
        let bundle = build(Image, &config(RefOnly, Overall));
        assert!(bundle.text.contains("Evaluation Criteria"));
        assert!(bundle.text.contains("The final score is"));
        assert_eq!(
            bundle.expected_response_grammar,
            ResponseGrammar::DollarWrapped
        );
    }

    #[test]
    fn combined_video_accr_names_its_wrappers() {
        let bundle = build(Video, &config(Combined, Accr));
        assert!(bundle.text.contains("Wrap Accuracy score in α"));
        assert!(bundle.text.contains("Wrap Relevance score in δ"));
        assert_eq!(
            bundle.expected_response_grammar,
            ResponseGrammar::GreekWrappedAccr
        );
    }

    #[test]
    fn video_templates_explain_the_three_frame_strip() {
        for (mode, dimensionality) in [(RefFree, Overall), (Combined, Overall), (RefFree, Accr)] {
            let bundle = build(Video, &config(mode, dimensionality));
            assert!(
                bundle.text.contains("Frame 1, Frame 2, and Frame 3"),
                "{mode:?} {dimensionality:?}"
            );
        }
    }

    #[test]
    fn reference_block_is_numbered_in_order() {
        let bundle = build(Image, &config(RefOnly, Overall));
        assert!(bundle
            .text
            .contains("1. a dog runs across the lawn\n2. a puppy plays fetch"));
    }

    #[test]
    fn ref_free_ignores_references_entirely() {
        let bundle = build(Image, &config(RefFree, Overall));
        assert!(!bundle.text.contains("a dog runs across the lawn"));
        assert!(!bundle.text.contains("Reference captions"));

        let empty = ReferenceSet::new(Vec::new());
        let ok = build_prompt(
            &config(RefFree, Overall),
            Image,
            &candidate(),
            &empty,
            Some(payload()),
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn join_references_numbering() {
        let single = ReferenceSet::new(vec!["a dog runs".to_string()]);
        assert_eq!(join_references(&single).unwrap(), "1. a dog runs");

        let three = ReferenceSet::new(vec!["a".to_string(), "b".to_string(), "c".to_string()]);
        assert_eq!(join_references(&three).unwrap(), "1. a\n2. b\n3. c");

        let empty = ReferenceSet::new(Vec::new());
        assert_eq!(join_references(&empty), Err(PromptError::EmptyReferenceSet));
    }

    #[test]
    fn empty_references_fail_modes_that_need_them() {
        let empty = ReferenceSet::new(Vec::new());
        for mode in [RefOnly, Combined] {
            let attachment = mode.needs_visual().then(payload);
            let result = build_prompt(
                &config(mode, Overall),
                Image,
                &candidate(),
                &empty,
                attachment,
            );
            assert_eq!(result, Err(PromptError::EmptyReferenceSet));
        }
    }

    #[test]
    fn attachment_counts_follow_the_mode() {
        assert_eq!(build(Image, &config(RefOnly, Overall)).attachments.len(), 0);
        assert_eq!(build(Image, &config(RefFree, Overall)).attachments.len(), 1);
        assert_eq!(
            build(Video, &config(Combined, Overall)).attachments.len(),
            1
        );

        let ignored = build_prompt(
            &config(RefOnly, Overall),
            Image,
            &candidate(),
            &references(),
            Some(payload()),
        )
        .unwrap();
        assert!(ignored.attachments.is_empty());

        let missing = build_prompt(
            &config(RefFree, Overall),
            Image,
            &candidate(),
            &references(),
            None,
        );
        assert_eq!(missing, Err(PromptError::MissingAttachment));
    }

    #[test]
    fn removing_cot_steps_removes_only_that_section() {
        let mut cfg = config(RefOnly, Overall);
        cfg.include_cot_steps = false;
        let bundle = build(Image, &cfg);
        assert!(!bundle.text.contains("Evaluation Steps"));
        assert!(bundle.text.contains("Evaluation Criteria:"));
        assert!(bundle.text.contains("Reference captions:"));
        assert!(bundle.text.contains("Response Format:"));

        let mut accr = config(Combined, Accr);
        accr.include_cot_steps = false;
        let bundle = build(Video, &accr);
        assert!(!bundle.text.contains("Evaluation Steps"));
        assert!(bundle.text.contains("Evaluation Dimensions:"));
    }

    #[test]
    fn score_only_replies_drop_the_reasoning_request() {
        let mut cfg = config(RefOnly, Overall);
        cfg.require_reason = false;
        let bundle = build(Image, &cfg);
        assert!(!bundle.text.contains("detailed reason"));
        assert!(bundle.text.contains("from 0 to 100"));
        assert!(bundle.text.contains("dollar"));

        let mut accr = config(RefFree, Accr);
        accr.require_reason = false;
        let bundle = build(Video, &accr);
        assert!(!bundle.text.contains("detailed reason"));
        assert!(bundle.text.contains("Wrap Accuracy score in α"));
    }

    #[test]
    fn rating_scale_rewrites_every_range_mention() {
        let mut cfg = config(RefOnly, Overall);
        cfg.scale = ScoreScale::Rating;
        let bundle = build(Image, &cfg);
        assert!(!bundle.text.contains("from 0 to 100"));
        assert!(bundle.text.contains("from 1 to 5"));

        let plain = build(Image, &config(RefOnly, Overall));
        assert_eq!(
            bundle.text.matches("from 1 to 5").count(),
            plain.text.matches("from 0 to 100").count()
        );
    }

    #[test]
    fn unsupported_combinations_are_refused() {
        let mut rating_accr = config(Combined, Accr);
        rating_accr.scale = ScoreScale::Rating;
        let result = build_prompt(
            &rating_accr,
            Video,
            &candidate(),
            &references(),
            Some(payload()),
        );
        assert!(matches!(
            result,
            Err(PromptError::UnsupportedCombination(_))
        ));

        let image_accr = config(Combined, Accr);
        let result = build_prompt(
            &image_accr,
            Image,
            &candidate(),
            &references(),
            Some(payload()),
        );
        assert!(matches!(
            result,
            Err(PromptError::UnsupportedCombination(_))
        ));
    }

    #[test]
    fn building_twice_yields_identical_bytes() {
        let first = build(Video, &config(Combined, Accr));
        let second = build(Video, &config(Combined, Accr));
        assert_eq!(first, second);
    }

    #[test]
    fn no_placeholder_survives_any_switch_combination() {
        for (kind, mode, dimensionality) in ALL_COMBINATIONS {
            for include_cot_steps in [true, false] {
                for require_reason in [true, false] {
                    let cfg = EvalConfig {
                        mode,
                        dimensionality,
                        include_cot_steps,
                        require_reason,
                        ..EvalConfig::default()
                    };
                    let bundle = build(kind, &cfg);
                    assert!(
                        !bundle.text.contains("{{"),
                        "{kind:?} {mode:?} {dimensionality:?}"
                    );
                    assert!(!bundle.text.contains("{{Reference}}"));
                    assert!(!bundle.text.contains("{{Caption}}"));
                }
            }
        }
    }

    #[test]
    fn checksum_drift_is_reported() {
        assert!(verify_checksums(CHECKSUM_MANIFEST, &TEMPLATES).is_ok());

        let stale = CHECKSUM_MANIFEST.replacen('a', "b", 1);
        let result = verify_checksums(&stale, &TEMPLATES);
        assert!(result.is_err());

        let missing = "0000  only/one/entry.txt\n";
        assert!(verify_checksums(missing, &TEMPLATES).is_err());
    }
}
