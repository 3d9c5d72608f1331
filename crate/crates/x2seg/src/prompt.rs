//! Instruction and target rendering for the 14 segmentation tasks, plus the
//! inverse parser that recovers (phrase, `<SEG>`) alignments from generated
//! token sequences.
//!
//! Special token string forms are fixed and byte-exact: `<p>`, `</p>`,
//! `<SEG>`, `<region>`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, X2Error};

pub const TOK_P_OPEN: &str = "<p>";
pub const TOK_P_CLOSE: &str = "</p>";
pub const TOK_SEG: &str = "<SEG>";
pub const TOK_REGION: &str = "<region>";

/// The 14 task identifiers, stratified into image- and video-based modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    IGen,
    IOv,
    IRef,
    IRea,
    IGcg,
    IInt,
    IVgd,
    VGen,
    VOv,
    VRef,
    VRea,
    VGcg,
    VObj,
    VVgd,
}

pub const ALL_TASKS: [TaskId; 14] = [
    TaskId::IGen,
    TaskId::IOv,
    TaskId::IRef,
    TaskId::IRea,
    TaskId::IGcg,
    TaskId::IInt,
    TaskId::IVgd,
    TaskId::VGen,
    TaskId::VOv,
    TaskId::VRef,
    TaskId::VRea,
    TaskId::VGcg,
    TaskId::VObj,
    TaskId::VVgd,
];

impl TaskId {
    pub fn is_video(self) -> bool {
        matches!(
            self,
            TaskId::VGen
                | TaskId::VOv
                | TaskId::VRef
                | TaskId::VRea
                | TaskId::VGcg
                | TaskId::VObj
                | TaskId::VVgd
        )
    }

    pub fn is_gcg(self) -> bool {
        matches!(self, TaskId::IGcg | TaskId::VGcg)
    }

    /// Tasks whose conditions are visual-prompt regions.
    pub fn is_region_task(self) -> bool {
        matches!(self, TaskId::IInt | TaskId::IVgd | TaskId::VObj | TaskId::VVgd)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::IGen => "I-Gen",
            TaskId::IOv => "I-OV",
            TaskId::IRef => "I-Ref",
            TaskId::IRea => "I-Rea",
            TaskId::IGcg => "I-GCG",
            TaskId::IInt => "I-Int",
            TaskId::IVgd => "I-VGD",
            TaskId::VGen => "V-Gen",
            TaskId::VOv => "V-OV",
            TaskId::VRef => "V-Ref",
            TaskId::VRea => "V-Rea",
            TaskId::VGcg => "V-GCG",
            TaskId::VObj => "V-Obj",
            TaskId::VVgd => "V-VGD",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_TASKS
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| X2Error::Prompt(format!("unknown task id `{s}`")))
    }
}

/// One object condition of a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    CategoryName(String),
    FreeText(String),
    /// Reference into the sample's visual prompt list; carries no text payload.
    RegionPlaceholder { prompt_ref: usize },
}

impl Condition {
    /// The text that appears inside the `<p>...</p>` span.
    pub fn span_text(&self) -> &str {
        match self {
            Condition::CategoryName(s) | Condition::FreeText(s) => s,
            Condition::RegionPlaceholder { .. } => TOK_REGION,
        }
    }
}

/// A rendered instruction with its conditions and expected `<SEG>` count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub task: TaskId,
    pub instruction_text: String,
    pub conditions: Vec<Condition>,
    pub seg_count: usize,
}

fn span(text: &str) -> String {
    format!("{TOK_P_OPEN}{text}{TOK_P_CLOSE}")
}

fn joined_spans(conditions: &[Condition]) -> String {
    conditions
        .iter()
        .map(|c| span(c.span_text()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn check_conditions(task: TaskId, conditions: &[Condition]) -> Result<()> {
    if task.is_gcg() {
        if !conditions.is_empty() {
            return Err(X2Error::Prompt(format!(
                "{} takes zero conditions at prompt time",
                task.name()
            )));
        }
        return Ok(());
    }
    if conditions.is_empty() {
        return Err(X2Error::Prompt(format!("{} requires at least one condition", task.name())));
    }
    for c in conditions {
        let region = matches!(c, Condition::RegionPlaceholder { .. });
        if task.is_region_task() && !region {
            return Err(X2Error::Prompt(format!(
                "{} conditions must be region placeholders, got a text payload",
                task.name()
            )));
        }
        if !task.is_region_task() && region {
            return Err(X2Error::Prompt(format!(
                "{} conditions must carry text, got a region placeholder",
                task.name()
            )));
        }
    }
    let single = matches!(task, TaskId::IRef | TaskId::VRef | TaskId::IRea | TaskId::VRea)
        || matches!(task, TaskId::IInt | TaskId::VObj);
    if single && conditions.len() != 1 {
        return Err(X2Error::Prompt(format!(
            "{} takes exactly one condition, got {}",
            task.name(),
            conditions.len()
        )));
    }
    Ok(())
}

/// Render the task instruction with each condition wrapped in `<p>...</p>`.
pub fn render_prompt(task: TaskId, conditions: &[Condition]) -> Result<PromptRecord> {
    check_conditions(task, conditions)?;
    let cs = joined_spans(conditions);
    let instruction_text = match task {
        TaskId::IGen => format!(
            "Can you segment the image based on the following categories: {cs}? \
             Please output the segmentation masks."
        ),
        TaskId::VGen => format!(
            "Can you provide segmentation masks for this video based on these categories: {cs}? \
             Please provide the segmentation masks."
        ),
        TaskId::IOv => format!(
            "Can you provide segmentation masks for this image based on these categories: {cs}? \
             Please provide the segmentation masks."
        ),
        TaskId::VOv => format!(
            "Could you create segmentation masks for this video according to the specified \
             categories: {cs}? Please create the segmentation masks."
        ),
        TaskId::IRef => format!("Please identify and segment the {cs} in this image."),
        TaskId::VRef => format!(
            "What is {cs} in this video? Please output the corresponding segmentation mask."
        ),
        TaskId::IRea => format!("{cs}? Please segment the image."),
        TaskId::VRea => format!("{cs}? Please segment the video."),
        TaskId::IGcg => "Can you provide a brief description of this image? Please output \
                         interleaved segmentation masks for the corresponding phrases."
            .to_string(),
        TaskId::VGcg => "Could you give me a brief explanation of this video? Please respond \
                         with interleaved segmentation masks for the corresponding phrases."
            .to_string(),
        TaskId::IInt => format!(
            "Can you segment the image based on the following regions: {cs}? \
             Please output the corresponding segmentation mask."
        ),
        TaskId::VObj => format!(
            "Could you create segmentation masks for this video according to the specified \
             regions: {cs}? Please create the segmentation masks."
        ),
        TaskId::IVgd => format!(
            "Can you provide segmentation masks for this video based on these regions: {cs}? \
             Please provide the segmentation masks."
        ),
        TaskId::VVgd => format!(
            "Could you output segmentation masks for this video that highlight the following \
             regions: {cs}? Please output the segmentation masks."
        ),
    };
    Ok(PromptRecord {
        task,
        instruction_text,
        conditions: conditions.to_vec(),
        seg_count: conditions.len(),
    })
}

/// Render the target response. Each segmentation target contributes one
/// `<p>...</p>` span immediately followed by its `<SEG>` marker.
///
/// For GCG tasks `phrases` supplies the grounded caption phrases; for all
/// other tasks the condition span text is echoed and `phrases` must be empty.
pub fn render_target(task: TaskId, conditions: &[Condition], phrases: &[String]) -> Result<String> {
    check_conditions(task, conditions)?;
    if task.is_gcg() {
        if phrases.is_empty() {
            return Err(X2Error::Prompt(format!(
                "{} target requires at least one grounded phrase",
                task.name()
            )));
        }
        let medium = if task == TaskId::IGcg { "image" } else { "video" };
        let parts = phrases
            .iter()
            .map(|p| format!("{}{TOK_SEG}", span(p)))
            .collect::<Vec<_>>()
            .join(" and ");
        return Ok(format!("The {medium} shows {parts} ."));
    }
    if !phrases.is_empty() {
        return Err(X2Error::Prompt(format!(
            "{} target takes no extra phrases, got {}",
            task.name(),
            phrases.len()
        )));
    }
    let parts = conditions
        .iter()
        .map(|c| format!("{}{TOK_SEG}", span(c.span_text())))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(format!("Sure, the segmentation result is {parts} ."))
}

/// One recovered phrase/<SEG> alignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTarget {
    pub phrase: String,
    /// Token index of the `<SEG>` marker in the parsed sequence.
    pub seg_index: usize,
}

/// A structural violation found while parsing a generated sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseViolation {
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseOutcome {
    pub targets: Vec<ParsedTarget>,
    pub violations: Vec<ParseViolation>,
}

/// Parse a token sequence into (phrase, seg position) pairs.
///
/// All well-formed `<p>...</p><SEG>` groups are recovered in order of
/// appearance; malformed structure (unclosed `<p>`, orphan `<SEG>`, nested
/// spans) is reported in `violations` rather than dropped silently.
pub fn parse_response<S: AsRef<str>>(tokens: &[S]) -> ParseOutcome {
    let mut out = ParseOutcome::default();
    // Phrase closed by `</p>` and awaiting its `<SEG>`, with span start position.
    let mut pending: Option<(Vec<String>, usize)> = None;
    // Span currently open with `<p>`.
    let mut open: Option<(Vec<String>, usize)> = None;
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        match tok {
            TOK_P_OPEN => {
                if let Some((_, start)) = open.take() {
                    out.violations.push(ParseViolation {
                        position: i,
                        message: format!("nested <p> (previous span opened at {start} not closed)"),
                    });
                }
                pending = None;
                open = Some((Vec::new(), i));
            }
            TOK_P_CLOSE => match open.take() {
                Some((words, start)) => pending = Some((words, start)),
                None => out.violations.push(ParseViolation {
                    position: i,
                    message: "</p> without matching <p>".into(),
                }),
            },
            TOK_SEG => match pending.take() {
                Some((words, _)) => out.targets.push(ParsedTarget {
                    phrase: words.join(" "),
                    seg_index: i,
                }),
                None => out.violations.push(ParseViolation {
                    position: i,
                    message: "orphan <SEG> without a preceding <p>...</p> span".into(),
                }),
            },
            _ => {
                if let Some((words, _)) = open.as_mut() {
                    words.push(tok.to_string());
                }
                // Plain text between `</p>` and `<SEG>` breaks the adjacency
                // convention, so the pending span is no longer SEG-eligible.
                if pending.is_some() {
                    pending = None;
                }
            }
        }
    }
    if let Some((_, start)) = open {
        out.violations.push(ParseViolation {
            position: start,
            message: "unclosed <p> span at end of sequence".into(),
        });
    }
    out
}

/// First violation of a sequence, as a parse error. Convenience for callers
/// that want strict parsing.
pub fn parse_response_strict<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<ParsedTarget>> {
    let out = parse_response(tokens);
    if let Some(v) = out.violations.first() {
        return Err(X2Error::Prompt(format!(
            "invalid sequence at token {}: {}",
            v.position, v.message
        )));
    }
    Ok(out.targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::split_tokens;

    fn cats(names: &[&str]) -> Vec<Condition> {
        names.iter().map(|n| Condition::CategoryName(n.to_string())).collect()
    }

    #[test]
    fn i_ref_template_matches_table() {
        let rec = render_prompt(
            TaskId::IRef,
            &[Condition::FreeText("the right man".into())],
        )
        .unwrap();
        assert_eq!(
            rec.instruction_text,
            "Please identify and segment the <p>the right man</p> in this image."
        );
        assert_eq!(rec.seg_count, 1);
    }

    #[test]
    fn gcg_prompt_has_no_spans() {
        let rec = render_prompt(TaskId::IGcg, &[]).unwrap();
        assert!(rec.instruction_text.contains("brief description of this image"));
        assert!(!rec.instruction_text.contains(TOK_P_OPEN));
        assert_eq!(rec.seg_count, 0);
    }

    #[test]
    fn template_fidelity_substrings() {
        // Invariant substrings of each task's canonical template.
        let one_cat = cats(&["person"]);
        let one_txt = vec![Condition::FreeText("the right man".into())];
        let one_reg = vec![Condition::RegionPlaceholder { prompt_ref: 0 }];
        let two_reg = vec![
            Condition::RegionPlaceholder { prompt_ref: 0 },
            Condition::RegionPlaceholder { prompt_ref: 1 },
        ];
        let cases: Vec<(TaskId, &[Condition], &str)> = vec![
            (TaskId::IGen, &one_cat, "segment the image based on the following categories:"),
            (TaskId::VGen, &one_cat, "segmentation masks for this video based on these categories:"),
            (TaskId::IOv, &one_cat, "segmentation masks for this image based on these categories:"),
            (TaskId::VOv, &one_cat, "according to the specified categories:"),
            (TaskId::IRef, &one_txt, "Please identify and segment the"),
            (TaskId::VRef, &one_txt, "Please output the corresponding segmentation mask."),
            (TaskId::IRea, &one_txt, "? Please segment the image."),
            (TaskId::VRea, &one_txt, "? Please segment the video."),
            (TaskId::IGcg, &[], "brief description of this image"),
            (TaskId::VGcg, &[], "brief explanation of this video"),
            (TaskId::IInt, &one_reg, "based on the following regions:"),
            (TaskId::VObj, &one_reg, "according to the specified regions:"),
            (TaskId::IVgd, &two_reg, "based on these regions:"),
            (TaskId::VVgd, &two_reg, "that highlight the following regions:"),
        ];
        assert_eq!(cases.len(), 14);
        for (task, conds, sub) in cases {
            let rec = render_prompt(task, conds).unwrap();
            assert!(
                rec.instruction_text.contains(sub),
                "{}: `{}` missing `{sub}`",
                task.name(),
                rec.instruction_text
            );
        }
    }

    #[test]
    fn vgd_prompt_has_one_region_span_per_condition() {
        let conds = vec![
            Condition::RegionPlaceholder { prompt_ref: 0 },
            Condition::RegionPlaceholder { prompt_ref: 1 },
        ];
        let rec = render_prompt(TaskId::VVgd, &conds).unwrap();
        let needle = "<p><region></p>";
        assert_eq!(rec.instruction_text.matches(needle).count(), 2);
    }

    #[test]
    fn region_condition_rejected_for_text_tasks() {
        let err = render_prompt(TaskId::IRef, &[Condition::RegionPlaceholder { prompt_ref: 0 }]);
        assert!(err.is_err());
        let err = render_prompt(TaskId::IInt, &[Condition::CategoryName("person".into())]);
        assert!(err.is_err());
    }

    #[test]
    fn marker_conservation_all_tasks() {
        for task in ALL_TASKS {
            let (conds, phrases): (Vec<Condition>, Vec<String>) = if task.is_gcg() {
                (vec![], vec!["a man".into(), "a dog".into()])
            } else if task.is_region_task() {
                let n = if matches!(task, TaskId::IInt | TaskId::VObj) { 1 } else { 3 };
                ((0..n).map(|i| Condition::RegionPlaceholder { prompt_ref: i }).collect(), vec![])
            } else if matches!(task, TaskId::IRef | TaskId::VRef | TaskId::IRea | TaskId::VRea) {
                (vec![Condition::FreeText("the small red square".into())], vec![])
            } else {
                (cats(&["square", "circle", "triangle"]), vec![])
            };
            let expected = if task.is_gcg() { phrases.len() } else { conds.len() };
            let target = render_target(task, &conds, &phrases).unwrap();
            assert_eq!(
                target.matches(TOK_SEG).count(),
                expected,
                "{}: {target}",
                task.name()
            );
        }
    }

    #[test]
    fn gcg_target_interleaves_phrases() {
        let t = render_target(
            TaskId::IGcg,
            &[],
            &["a man".to_string(), "a dog".to_string()],
        )
        .unwrap();
        assert_eq!(t.matches("<p>").count(), 2);
        assert_eq!(t.matches(TOK_SEG).count(), 2);
        assert!(t.find("a man").unwrap() < t.find("a dog").unwrap());
    }

    #[test]
    fn parse_round_trip_all_tasks() {
        for task in ALL_TASKS {
            let (conds, phrases): (Vec<Condition>, Vec<String>) = if task.is_gcg() {
                (vec![], vec!["a red square".into(), "a blue circle".into()])
            } else if task.is_region_task() {
                let n = if matches!(task, TaskId::IInt | TaskId::VObj) { 1 } else { 2 };
                ((0..n).map(|i| Condition::RegionPlaceholder { prompt_ref: i }).collect(), vec![])
            } else if matches!(task, TaskId::IRef | TaskId::VRef | TaskId::IRea | TaskId::VRea) {
                (vec![Condition::FreeText("the large green triangle".into())], vec![])
            } else {
                (cats(&["circle", "square"]), vec![])
            };
            let target = render_target(task, &conds, &phrases).unwrap();
            let tokens = split_tokens(&target);
            let out = parse_response(&tokens);
            assert!(out.violations.is_empty(), "{}: {:?}", task.name(), out.violations);
            let expected: Vec<String> = if task.is_gcg() {
                phrases
            } else {
                conds.iter().map(|c| c.span_text().to_string()).collect()
            };
            let got: Vec<String> = out.targets.iter().map(|t| t.phrase.clone()).collect();
            assert_eq!(got, expected, "{}", task.name());
        }
    }

    #[test]
    fn orphan_seg_is_reported() {
        let toks = ["hello", TOK_SEG, "world"];
        let out = parse_response(&toks);
        assert!(out.targets.is_empty());
        assert_eq!(out.violations.len(), 1);
        assert_eq!(out.violations[0].position, 1);
        assert!(parse_response_strict(&toks).is_err());
    }

    #[test]
    fn empty_sequence_parses_to_empty() {
        let out = parse_response::<&str>(&[]);
        assert!(out.targets.is_empty() && out.violations.is_empty());
    }

    #[test]
    fn unclosed_span_reported_but_good_pairs_kept() {
        let toks = [TOK_P_OPEN, "cat", TOK_P_CLOSE, TOK_SEG, TOK_P_OPEN, "dog"];
        let out = parse_response(&toks);
        assert_eq!(out.targets.len(), 1);
        assert_eq!(out.targets[0].phrase, "cat");
        assert_eq!(out.violations.len(), 1);
        assert_eq!(out.violations[0].position, 4);
    }
}
