//! Knowledge-probing tasks, prompt construction (vanilla / rephrase / ICN),
//! the iterative navigation loop, and first-token correctness.

mod run;
mod session;

pub use run::{
    first_token_correctness, navigate, run_probe, ExploredEntry, NavigateOutcome, NavigateSpec,
    NavigatedPath, ProbeInterrupted, ProbeOptions,
};
pub use session::{append_provenance, read_session, write_session};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CATEGORY_SLOT: &str = "[CATEGORY]";

/// How a probed answer is judged correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Validator {
    /// Ask a chat-capable judge model.
    LlmJudge,
    /// The answer's first alphabetic character must match.
    CharStart(char),
    /// The answer must appear in a fixed list (case-insensitive, trimmed).
    CustomList(Vec<String>),
}

/// One probing task: a category slotted into a prompt template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub category: String,
    pub template: String,
    pub validator: Validator,
    #[serde(default)]
    pub paraphrases: Vec<String>,
}

impl ProbeTask {
    pub fn knowledge(category: &str) -> Self {
        Self {
            category: category.to_string(),
            template: "Please show me some [CATEGORY]".to_string(),
            validator: Validator::LlmJudge,
            paraphrases: Vec::new(),
        }
    }

    pub fn template_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.template.as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Substitute the category into the template. The template must contain the
/// `[CATEGORY]` slot exactly once; the category is trimmed first.
pub fn build_probe_prompt(task: &ProbeTask) -> Result<String> {
    substitute_category(&task.template, &task.category)
}

fn substitute_category(template: &str, category: &str) -> Result<String> {
    let slots = template.matches(CATEGORY_SLOT).count();
    if slots != 1 {
        return Err(Error::InvalidArgument(format!(
            "template must contain exactly one {CATEGORY_SLOT} slot, found {slots}"
        )));
    }
    Ok(template.replace(CATEGORY_SLOT, category.trim()))
}

/// Resolve a paraphrase: templates with a slot get the category substituted,
/// anything else is taken verbatim.
pub fn resolve_paraphrase(paraphrase: &str, category: &str) -> Result<String> {
    if paraphrase.contains(CATEGORY_SLOT) {
        substitute_category(paraphrase, category)
    } else {
        Ok(paraphrase.to_string())
    }
}

/// The in-context-navigation wording. The default asks the model to avoid
/// the explored answers and produce a different one; all three pieces are
/// overridable per run so wordings can be A/B tested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcnTemplate {
    pub header: String,
    pub bullet: String,
    pub footer: String,
}

impl Default for IcnTemplate {
    fn default() -> Self {
        Self {
            header: "Do not include the following explored answers:".to_string(),
            bullet: "- ".to_string(),
            footer: "A different answer is:".to_string(),
        }
    }
}

/// The ICN context: base prompt plus a bullet list of explored answers and
/// an instruction to answer differently. With nothing explored this is
/// exactly the base prompt.
pub fn build_icn_prompt(task: &ProbeTask, explored: &[String], template: &IcnTemplate) -> Result<String> {
    let base = build_probe_prompt(task)?;
    Ok(build_icn_context(&base, explored, template))
}

pub fn build_icn_context(base_prompt: &str, explored: &[String], template: &IcnTemplate) -> String {
    if explored.is_empty() {
        return base_prompt.to_string();
    }
    let mut out = String::with_capacity(base_prompt.len() + 64 * explored.len());
    out.push_str(base_prompt);
    out.push('\n');
    out.push_str(&template.header);
    for answer in explored {
        out.push('\n');
        out.push_str(&template.bullet);
        out.push_str(answer);
    }
    out.push('\n');
    out.push_str(&template.footer);
    out
}

/// True iff the first alphabetic character of the trimmed answer matches
/// `c`, case-insensitively. Empty answers are false.
pub fn char_start_validate(answer: &str, c: char) -> bool {
    answer
        .trim()
        .chars()
        .find(|ch| ch.is_alphabetic())
        .map(|ch| ch.to_lowercase().eq(c.to_lowercase()))
        .unwrap_or(false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Vanilla,
    Rephrase,
    Rerank,
    Icn,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Rephrase => "rephrase",
            Strategy::Rerank => "rerank",
            Strategy::Icn => "icn",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "rephrase" => Ok(Strategy::Rephrase),
            "rerank" => Ok(Strategy::Rerank),
            "icn" => Ok(Strategy::Icn),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy {other:?}; expected vanilla|rephrase|rerank|icn"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectnessMode {
    /// Judge the single greedy answer.
    Greedy,
    /// Judge `k` sampled answers per first-token.
    Mc(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Correct,
    Incorrect,
    Unknown,
}

impl Verdict {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Verdict::Correct
        } else {
            Verdict::Incorrect
        }
    }
}

/// Correctness of one probed path, in either approximation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correctness {
    Greedy(Verdict),
    Mc(Vec<Verdict>),
}

impl Correctness {
    /// Fraction of judged samples that are correct; `None` when every label
    /// is unknown (such paths drop out of accuracy denominators).
    pub fn fraction(&self) -> Option<f64> {
        match self {
            Correctness::Greedy(Verdict::Correct) => Some(1.0),
            Correctness::Greedy(Verdict::Incorrect) => Some(0.0),
            Correctness::Greedy(Verdict::Unknown) => None,
            Correctness::Mc(verdicts) => {
                let known = verdicts
                    .iter()
                    .filter(|v| **v != Verdict::Unknown)
                    .count();
                if known == 0 {
                    return None;
                }
                let correct = verdicts.iter().filter(|v| **v == Verdict::Correct).count();
                Some(correct as f64 / known as f64)
            }
        }
    }

    /// Probing-success label: greedy verdict, or any correct sample in MC
    /// mode. `None` when unknown.
    pub fn is_correct(&self) -> Option<bool> {
        self.fraction().map(|f| f > 0.0)
    }
}

/// One explored decoding path in a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbedPath {
    pub first_token: String,
    /// Greedy continuation decoded from `base prompt + first_token`.
    pub answer: String,
    pub correct: Correctness,
    /// 1-based iteration that produced this path.
    pub iteration: usize,
    /// 1-based rank among the keys kept in that iteration.
    pub within_query_rank: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub judge_raw: Vec<String>,
    /// Sampled answers in MC mode, in seed order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mc_answers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub iteration: usize,
    pub kept: usize,
}

/// One probing run: configuration, per-iteration contexts, and the probed
/// paths in `(iteration, within_query_rank)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcnSession {
    pub category: String,
    pub strategy: Strategy,
    pub n_query: usize,
    pub n_key: usize,
    pub template_hash: String,
    pub correctness_mode: CorrectnessMode,
    pub seed: u64,
    pub backend_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clustering_ref: Option<String>,
    pub queries: Vec<String>,
    pub paths: Vec<ProbedPath>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shortfalls: Vec<Shortfall>,
    /// Resumable cursor: iterations fully committed so far.
    pub iterations_done: usize,
}

impl IcnSession {
    pub fn completed(&self) -> bool {
        self.iterations_done == self.n_query
    }

    /// Ordered correctness flags for ranking metrics; unknown labels are
    /// skipped.
    pub fn correctness_flags(&self) -> Vec<bool> {
        self.paths
            .iter()
            .filter_map(|p| p.correct.is_correct())
            .collect()
    }

    pub fn unknown_count(&self) -> usize {
        self.paths
            .iter()
            .filter(|p| p.correct.is_correct().is_none())
            .count()
    }
}

#[derive(Debug, Deserialize)]
struct TaskFileMany {
    task: Vec<ProbeTask>,
}

#[derive(Debug, Deserialize)]
struct TaskFileOne {
    task: ProbeTask,
}

/// Parse a TOML task config holding one `[task]` or many `[[task]]` blocks.
pub fn parse_tasks(raw: &str) -> Result<Vec<ProbeTask>> {
    if let Ok(many) = toml::from_str::<TaskFileMany>(raw) {
        return Ok(many.task);
    }
    match toml::from_str::<TaskFileOne>(raw) {
        Ok(one) => Ok(vec![one.task]),
        Err(e) => Err(Error::Config(format!("task config: {e}"))),
    }
}

pub fn load_tasks(path: &std::path::Path) -> Result<Vec<ProbeTask>> {
    parse_tasks(&std::fs::read_to_string(path)?)
}

/// The bundled ProbeSet: 12 categories, each with 4 sub-categories.
pub fn bundled_probe_set() -> Vec<ProbeTask> {
    parse_tasks(include_str!("../../assets/probeset.toml")).expect("bundled probeset parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_substitution() {
        let task = ProbeTask::knowledge("Computer Scientist");
        assert_eq!(
            build_probe_prompt(&task).unwrap(),
            "Please show me some Computer Scientist"
        );
    }

    #[test]
    fn category_whitespace_is_trimmed() {
        let task = ProbeTask::knowledge("  Coastal City ");
        assert_eq!(
            build_probe_prompt(&task).unwrap(),
            "Please show me some Coastal City"
        );
    }

    #[test]
    fn template_without_slot_is_an_error() {
        let mut task = ProbeTask::knowledge("City");
        task.template = "Please show me some cities".into();
        assert!(build_probe_prompt(&task).is_err());
        task.template = "[CATEGORY] and [CATEGORY]".into();
        assert!(build_probe_prompt(&task).is_err());
    }

    #[test]
    fn icn_prompt_empty_explored_equals_base() {
        let task = ProbeTask::knowledge("Computer Scientist");
        let t = IcnTemplate::default();
        assert_eq!(
            build_icn_prompt(&task, &[], &t).unwrap(),
            build_probe_prompt(&task).unwrap()
        );
    }

    #[test]
    fn icn_prompt_lists_explored_answers_in_order() {
        let task = ProbeTask::knowledge("Computer Scientist");
        let t = IcnTemplate::default();
        let one = build_icn_prompt(&task, &["Alan Turing".into()], &t).unwrap();
        assert!(one.contains("\n- Alan Turing\n"));
        assert!(one.starts_with("Please show me some Computer Scientist\n"));
        assert!(one.ends_with("A different answer is:"));

        let many: Vec<String> = (0..10).map(|i| format!("answer {i}")).collect();
        let prompt = build_icn_prompt(&task, &many, &t).unwrap();
        let bullet_lines: Vec<&str> = prompt
            .lines()
            .filter(|l| l.starts_with("- "))
            .collect();
        assert_eq!(bullet_lines.len(), 10);
        for (i, line) in bullet_lines.iter().enumerate() {
            assert_eq!(*line, format!("- answer {i}"));
        }
    }

    #[test]
    fn char_start_rule() {
        assert!(char_start_validate("Panda", 'P'));
        assert!(char_start_validate(" panda", 'P'));
        assert!(!char_start_validate("Quail", 'P'));
        assert!(!char_start_validate("", 'P'));
        assert!(char_start_validate("\"Pelican\"", 'P'));
        assert!(!char_start_validate("123", 'P'));
    }

    #[test]
    fn correctness_fractions() {
        use Verdict::*;
        let mc = Correctness::Mc(vec![Correct, Correct, Incorrect, Correct, Incorrect]);
        assert_eq!(mc.fraction(), Some(0.6));
        assert_eq!(mc.is_correct(), Some(true));
        let none = Correctness::Mc(vec![Unknown, Unknown]);
        assert_eq!(none.fraction(), None);
        assert_eq!(none.is_correct(), None);
        let g = Correctness::Greedy(Incorrect);
        assert_eq!(g.is_correct(), Some(false));
    }

    #[test]
    fn task_toml_single_and_many() {
        let raw = r#"
[task]
category = "Planet"
template = "Please show me some [CATEGORY]"
validator = "llm-judge"
paraphrases = ["Name a few [CATEGORY]"]
"#;
        let tasks = parse_tasks(raw).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].category, "Planet");
        assert_eq!(tasks[0].paraphrases.len(), 1);

        let raw = r#"
[[task]]
category = "A"
template = "x [CATEGORY]"
validator = { char-start = "P" }

[[task]]
category = "B"
template = "y [CATEGORY]"
validator = { custom-list = ["one", "two"] }
"#;
        let tasks = parse_tasks(raw).unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[0].validator, Validator::CharStart('P'));
        assert_eq!(
            tasks[1].validator,
            Validator::CustomList(vec!["one".into(), "two".into()])
        );
    }

    #[test]
    fn bundled_probe_set_has_sixty_categories() {
        let tasks = bundled_probe_set();
        assert_eq!(tasks.len(), 60);
        for t in &tasks {
            assert!(build_probe_prompt(t).is_ok());
            assert_eq!(t.validator, Validator::LlmJudge);
        }
        assert!(tasks.iter().any(|t| t.category == "Computer Scientist"));
        assert!(tasks.iter().any(|t| t.category == "Infective Disease"));
    }
}
