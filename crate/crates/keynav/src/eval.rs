//! Evaluation: ranking metrics (MAP@K / precision@K), the unique-n-gram
//! diversity ratio, the LLM judge adapter, chain-of-thought answer
//! extraction, and self-consistency voting.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backend::{fetch_candidates_capped, Backend, ChatMessage, CompletionParams};
use crate::error::{Error, Result};
use crate::probing::{
    navigate, ExploredEntry, IcnTemplate, NavigateSpec, Strategy, Verdict,
};

/// MAP@K over an ordered correctness list, as a percentage.
///
/// Over the first `k` items, the average of precision@i at each correct
/// position i, divided by the number of correct items in the window; zero
/// when the window has no correct item.
pub fn map_at_k(flags: &[bool], k: usize) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::InvalidArgument("empty flag list".into()));
    }
    if k < 1 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let window = &flags[..k.min(flags.len())];
    let mut correct = 0usize;
    let mut sum = 0.0;
    for (i, &flag) in window.iter().enumerate() {
        if flag {
            correct += 1;
            sum += correct as f64 / (i + 1) as f64;
        }
    }
    if correct == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * sum / correct as f64)
}

/// Precision@K as a percentage. The denominator is `k` even when fewer
/// items are available.
pub fn precision_at_k(flags: &[bool], k: usize) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::InvalidArgument("empty flag list".into()));
    }
    if k < 1 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let correct = flags[..k.min(flags.len())].iter().filter(|&&f| f).count();
    Ok(100.0 * correct as f64 / k as f64)
}

/// Lowercase, strip punctuation, split on whitespace.
fn ung_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Per-n unique-n-gram ratios (distinct / total across the corpus).
pub fn unique_ngram_ratios(texts: &[String], n_low: usize, n_high: usize) -> Result<Vec<f64>> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if n_low < 1 || n_low > n_high {
        return Err(Error::InvalidArgument(format!(
            "bad n-gram range {n_low}..={n_high}"
        )));
    }
    let tokenized: Vec<Vec<String>> = texts.iter().map(|t| ung_tokens(t)).collect();
    let mut ratios = Vec::with_capacity(n_high - n_low + 1);
    for n in n_low..=n_high {
        let mut total = 0usize;
        let mut distinct: std::collections::HashSet<String> = std::collections::HashSet::new();
        for tokens in &tokenized {
            if tokens.len() < n {
                continue;
            }
            for window in tokens.windows(n) {
                total += 1;
                distinct.insert(window.join("\u{1f}"));
            }
        }
        if total == 0 {
            return Err(Error::InvalidArgument(format!(
                "corpus has no {n}-grams; need at least one text with {n_high} words"
            )));
        }
        ratios.push(distinct.len() as f64 / total as f64);
    }
    Ok(ratios)
}

/// Unique-n-gram ratio averaged over n in `[n_low, n_high]`, as a
/// percentage.
pub fn unique_ngram_ratio(texts: &[String], n_low: usize, n_high: usize) -> Result<f64> {
    let ratios = unique_ngram_ratios(texts, n_low, n_high)?;
    Ok(100.0 * ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Ask the judge whether `answer` counts as correct for `category`.
///
/// Sends the evaluation prompt verbatim and accepts any reply whose first
/// word starts with yes/no (case-insensitive); anything else is an error so
/// the caller can record the label as unknown.
pub fn judge_answer(category: &str, answer: &str, judge: &dyn Backend) -> Result<bool> {
    let prompt = format!(
        "Please show me some {category}. Is '{answer}' considered as among the correct answers? \
         Answer only 'Yes' or 'No'."
    );
    let params = CompletionParams {
        temperature: 0.0,
        top_p: 1.0,
        max_tokens: 8,
        stop: Vec::new(),
        seed: None,
    };
    let reply = judge.chat(&[ChatMessage::user(&prompt)], &params)?;
    let lowered = reply.trim().to_lowercase();
    if lowered.starts_with("yes") {
        Ok(true)
    } else if lowered.starts_with("no") {
        Ok(false)
    } else {
        Err(Error::JudgeUnparseable(reply))
    }
}

/// Caches judge verdicts per `(category, answer)` within a run so duplicate
/// answers are judged once.
pub struct JudgeCache<'a> {
    judge: &'a dyn Backend,
    cache: Mutex<HashMap<(String, String), (Verdict, String)>>,
}

impl<'a> JudgeCache<'a> {
    pub fn new(judge: &'a dyn Backend) -> Self {
        Self {
            judge,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Judge failures are demoted to `Unknown` with the raw reply (or the
    /// error text) preserved.
    pub fn judge(&self, category: &str, answer: &str) -> (Verdict, String) {
        let key = (category.to_string(), answer.to_string());
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return hit.clone();
        }
        let result = match judge_answer(category, answer, self.judge) {
            Ok(true) => (Verdict::Correct, "Yes".to_string()),
            Ok(false) => (Verdict::Incorrect, "No".to_string()),
            Err(Error::JudgeUnparseable(raw)) => (Verdict::Unknown, raw),
            Err(e) => (Verdict::Unknown, format!("judge error: {e}")),
        };
        self.cache.lock().unwrap().insert(key, result.clone());
        result
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerKind {
    Numeric,
    Choice,
}

const NUMERIC_SUFFIX: &str = " **Final Answer (Only Number):**";
const CHOICE_SUFFIX: &str = " **Final Answer (A, B, C, D, E):**";

/// Canonical rendering of a numeric answer: commas and whitespace stripped,
/// parsed as a decimal, shortest round-trip formatting ("60.0" -> "60").
pub fn normalize_numeric(raw: &str) -> Result<String> {
    let cleaned: String = raw.trim().replace(',', "");
    let cleaned = cleaned.split_whitespace().collect::<String>();
    if let Ok(v) = cleaned.parse::<f64>() {
        if v.is_finite() {
            return Ok(format!("{v}"));
        }
    }
    let re = regex::Regex::new(r"[-+]?\d*\.?\d+").expect("static regex");
    if let Some(m) = re.find(&cleaned) {
        if let Ok(v) = m.as_str().parse::<f64>() {
            if v.is_finite() {
                return Ok(format!("{v}"));
            }
        }
    }
    Err(Error::ExtractionFailed(raw.to_string()))
}

pub fn normalize_choice(raw: &str) -> Result<String> {
    let c = raw
        .trim()
        .chars()
        .find(|c| c.is_alphabetic())
        .map(|c| c.to_ascii_uppercase())
        .ok_or_else(|| Error::ExtractionFailed(raw.to_string()))?;
    if ('A'..='E').contains(&c) {
        Ok(c.to_string())
    } else {
        Err(Error::ExtractionFailed(raw.to_string()))
    }
}

/// Extract the final answer from a chain of thought by appending the
/// matching extraction suffix and asking the backend for a short completion.
pub fn extract_answer(cot: &str, kind: AnswerKind, backend: &dyn Backend) -> Result<String> {
    let suffix = match kind {
        AnswerKind::Numeric => NUMERIC_SUFFIX,
        AnswerKind::Choice => CHOICE_SUFFIX,
    };
    let prompt = format!("{cot}{suffix}");
    let params = CompletionParams {
        temperature: 0.0,
        top_p: 1.0,
        max_tokens: 8,
        stop: vec!["\n".into()],
        seed: None,
    };
    let reply = backend.complete(&prompt, "", &params)?;
    match kind {
        AnswerKind::Numeric => normalize_numeric(&reply),
        AnswerKind::Choice => normalize_choice(&reply),
    }
}

/// Majority-vote outcome over extracted answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    /// Successfully extracted answers in path order.
    pub answers: Vec<String>,
    pub counts: BTreeMap<String, usize>,
    pub winner: String,
    /// True when more than one answer had the maximal count; the earliest
    /// path wins.
    pub tie_broken: bool,
    pub extraction_failures: usize,
    /// The generated chains of thought, in path order.
    pub cots: Vec<String>,
}

/// Pure majority vote: winner is the most frequent answer, ties broken by
/// earliest occurrence.
pub fn vote(answers: &[String]) -> Result<(String, BTreeMap<String, usize>, bool)> {
    if answers.is_empty() {
        return Err(Error::ExtractionFailed("no answers to vote on".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a.clone()).or_insert(0) += 1;
    }
    let max = *counts.values().max().expect("non-empty");
    let tied: Vec<String> = counts
        .iter()
        .filter(|(_, &c)| c == max)
        .map(|(a, _)| a.clone())
        .collect();
    let winner = answers
        .iter()
        .find(|a| tied.contains(a))
        .expect("a tied answer occurs")
        .clone();
    Ok((winner, counts, tied.len() > 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScStrategy {
    /// Independent sampled chains of thought.
    Sample,
    /// Branch on the top `n_paths` first-tokens of one context.
    Top,
    /// Iterative navigation with explored chains listed in the context.
    Icn,
}

impl std::str::FromStr for ScStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(ScStrategy::Sample),
            "top" => Ok(ScStrategy::Top),
            "icn" => Ok(ScStrategy::Icn),
            other => Err(Error::InvalidArgument(format!(
                "unknown self-consistency strategy {other:?}; expected sample|top|icn"
            ))),
        }
    }
}

const COT_INSTRUCTION: &str = " Please show me some different ways to solve this problem.";

/// Generate `n_paths` chains of thought for a question, extract their
/// answers, and majority-vote. Every chain is decoded from the base
/// question context regardless of strategy.
pub fn self_consistency(
    question: &str,
    n_paths: usize,
    strategy: ScStrategy,
    backend: &dyn Backend,
    kind: AnswerKind,
) -> Result<VoteResult> {
    if n_paths < 1 {
        return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
    }
    let base_prompt = format!("{question}{COT_INSTRUCTION}");

    let cots: Vec<String> = match strategy {
        ScStrategy::Sample => {
            let mut cots = Vec::with_capacity(n_paths);
            for seed in 0..n_paths as u64 {
                let params = CompletionParams {
                    temperature: 1.0,
                    top_p: 1.0,
                    max_tokens: 512,
                    stop: Vec::new(),
                    seed: Some(seed),
                };
                cots.push(backend.complete(&base_prompt, "", &params)?);
            }
            cots
        }
        ScStrategy::Top => {
            let set = fetch_candidates_capped(backend, &base_prompt, n_paths)?;
            let params = CompletionParams::greedy_cot();
            set.candidates
                .iter()
                .take(n_paths)
                .map(|c| backend.complete(&base_prompt, &c.text, &params))
                .collect::<Result<_>>()?
        }
        ScStrategy::Icn => {
            let spec = NavigateSpec {
                base_prompt: base_prompt.clone(),
                strategy: Strategy::Icn,
                n_query: n_paths,
                n_key: 1,
                paraphrases: Vec::new(),
                clustering: None,
                icn_template: IcnTemplate::default(),
                decode_params: CompletionParams::greedy_cot(),
                // Listing whole chains would leak answers into the context;
                // only the first line of each explored chain is shown.
                explored_entry: ExploredEntry::FirstLine,
                mc_samples: None,
            };
            let outcome = navigate(&spec, backend, None);
            if let Some(e) = outcome.error {
                return Err(e);
            }
            outcome.paths.into_iter().map(|p| p.answer).collect()
        }
    };

    let mut answers = Vec::new();
    let mut failures = 0usize;
    for cot in &cots {
        match extract_answer(cot, kind, backend) {
            Ok(answer) => answers.push(answer),
            Err(_) => failures += 1,
        }
    }
    if answers.is_empty() {
        return Err(Error::ExtractionFailed(
            "every path failed answer extraction".into(),
        ));
    }
    let (winner, counts, tie_broken) = vote(&answers)?;
    Ok(VoteResult {
        answers,
        counts,
        winner,
        tie_broken,
        extraction_failures: failures,
        cots,
    })
}

/// One row of the probing metric report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub category: String,
    pub strategy: String,
    #[serde(rename = "MAP@50")]
    pub map_at_50: f64,
    #[serde(rename = "PREC@50")]
    pub prec_at_50: f64,
    pub n_paths: usize,
    pub judge_model: String,
    pub seed: u64,
}

pub fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        writer.serialize(row).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UngRow {
    pub dataset: String,
    pub class: String,
    #[serde(rename = "UNG")]
    pub ung: f64,
    pub n_texts: usize,
}

pub fn write_ung_csv(path: &Path, rows: &[UngRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        writer.serialize(row).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FixtureBackend, FixtureData};
    use rand::{RngExt, SeedableRng};
    use rand_pcg::Pcg64;

    #[test]
    fn map_hand_cases() {
        assert_eq!(map_at_k(&[true; 50], 50).unwrap(), 100.0);
        assert_eq!(map_at_k(&[false; 50], 50).unwrap(), 0.0);
        let v = map_at_k(&[true, false, true], 3).unwrap();
        assert!((v - 250.0 / 3.0).abs() < 1e-12);
        assert!((v - 83.33).abs() < 0.005);
        assert!(map_at_k(&[true], 0).is_err());
    }

    #[test]
    fn map_matches_brute_force_definition() {
        let mut rng = Pcg64::seed_from_u64(31);
        for _ in 0..300 {
            let len = rng.random_range(1..80usize);
            let k = rng.random_range(1..80usize);
            let flags: Vec<bool> = (0..len).map(|_| rng.random::<bool>()).collect();
            let got = map_at_k(&flags, k).unwrap();

            // Brute force: recompute precision@i by rescanning the prefix.
            let window = &flags[..k.min(len)];
            let r = window.iter().filter(|&&f| f).count();
            let expect = if r == 0 {
                0.0
            } else {
                let mut sum = 0.0;
                for i in 0..window.len() {
                    if window[i] {
                        let hits = window[..=i].iter().filter(|&&f| f).count();
                        sum += hits as f64 / (i + 1) as f64;
                    }
                }
                100.0 * sum / r as f64
            };
            assert!((got - expect).abs() < 1e-12);

            let p = precision_at_k(&flags, k).unwrap();
            let expect_p = 100.0 * window.iter().filter(|&&f| f).count() as f64 / k as f64;
            assert!((p - expect_p).abs() < 1e-12);
            assert!((0.0..=100.0).contains(&got));
            assert!((0.0..=100.0).contains(&p));
        }
    }

    #[test]
    fn precision_hand_cases() {
        assert_eq!(
            precision_at_k(&[true, true, false, false], 4).unwrap(),
            50.0
        );
        assert_eq!(precision_at_k(&[true, false], 1).unwrap(), 100.0);
    }

    #[test]
    fn ung_hand_cases() {
        assert_eq!(
            unique_ngram_ratio(&["a b c d".to_string()], 1, 4).unwrap(),
            100.0
        );
        let v = unique_ngram_ratio(&["a a a a".to_string()], 1, 4).unwrap();
        let expect = 100.0 * (0.25 + 1.0 / 3.0 + 0.5 + 1.0) / 4.0;
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 52.08).abs() < 0.01);
    }

    #[test]
    fn ung_duplication_halves_each_ratio() {
        let corpus = vec![
            "the quick brown fox jumps".to_string(),
            "pack my box with five dozen jugs".to_string(),
        ];
        let mut doubled = corpus.clone();
        doubled.extend(corpus.clone());
        let once = unique_ngram_ratios(&corpus, 1, 4).unwrap();
        let twice = unique_ngram_ratios(&doubled, 1, 4).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((b - a / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ung_tokenization_strips_punctuation_and_case() {
        assert_eq!(ung_tokens("Hello, World! it's 42."), vec!["hello", "world", "its", "42"]);
    }

    fn judge_fixture(reply: &str) -> FixtureBackend {
        let mut data = FixtureData::default();
        let prompt = "Please show me some Infective Disease. Is 'Malaria' considered as among \
                      the correct answers? Answer only 'Yes' or 'No'.";
        data.script_chat(&format!("user: {prompt}"), reply);
        FixtureBackend::new(data).unwrap()
    }

    #[test]
    fn judge_parses_yes_no_and_rejects_other() {
        assert!(judge_answer("Infective Disease", "Malaria", &judge_fixture("Yes")).unwrap());
        assert!(!judge_answer("Infective Disease", "Malaria", &judge_fixture("No.")).unwrap());
        assert!(matches!(
            judge_answer("Infective Disease", "Malaria", &judge_fixture("Maybe")),
            Err(Error::JudgeUnparseable(_))
        ));
    }

    #[test]
    fn judge_cache_reuses_verdicts() {
        let backend = judge_fixture("Yes");
        let cache = JudgeCache::new(&backend);
        assert_eq!(cache.judge("Infective Disease", "Malaria").0, Verdict::Correct);
        // Second call is served from cache (the fixture would also answer,
        // but an unknown pair proves the cache path).
        assert_eq!(cache.judge("Infective Disease", "Malaria").0, Verdict::Correct);
        let (v, _) = cache.judge("Infective Disease", "Cholera");
        assert_eq!(v, Verdict::Unknown);
    }

    #[test]
    fn numeric_and_choice_normalization() {
        assert_eq!(normalize_numeric("  60.0 ").unwrap(), "60");
        assert_eq!(normalize_numeric("1,234").unwrap(), "1234");
        assert_eq!(normalize_numeric("44.4").unwrap(), "44.4");
        assert_eq!(normalize_numeric("answer: 42").unwrap(), "42");
        assert!(normalize_numeric("none").is_err());
        assert_eq!(normalize_choice("b").unwrap(), "B");
        assert_eq!(normalize_choice(" (C)").unwrap(), "C");
        assert!(normalize_choice("Z").is_err());
    }

    #[test]
    fn extraction_appends_suffix_and_normalizes() {
        let cot = "All total she has removed 300 Junebugs over 5 days, on average 300/5 = 60";
        let mut data = FixtureData::default();
        data.script_greedy(&format!("{cot}{NUMERIC_SUFFIX}"), " 60.0");
        let backend = FixtureBackend::new(data).unwrap();
        assert_eq!(extract_answer(cot, AnswerKind::Numeric, &backend).unwrap(), "60");
    }

    #[test]
    fn vote_majority_and_tie_rules() {
        let (w, counts, tie) = vote(&[
            "44.4".to_string(),
            "60".to_string(),
            "60".to_string(),
            "60".to_string(),
        ])
        .unwrap();
        assert_eq!(w, "60");
        assert_eq!(counts["60"], 3);
        assert!(!tie);

        let (w, _, tie) = vote(&vec!["44.4".to_string(); 4]).unwrap();
        assert_eq!(w, "44.4");
        assert!(!tie);

        let (w, _, tie) = vote(&[
            "60".to_string(),
            "60".to_string(),
            "44.4".to_string(),
            "44.4".to_string(),
        ])
        .unwrap();
        assert_eq!(w, "60");
        assert!(tie);
    }

    #[test]
    fn metric_csv_writes_expected_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metric_csv(
            &path,
            &[MetricRow {
                category: "City".into(),
                strategy: "icn".into(),
                map_at_50: 96.38,
                prec_at_50: 93.2,
                n_paths: 50,
                judge_model: "fixture".into(),
                seed: 0,
            }],
        )
        .unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(raw.starts_with("category,strategy,MAP@50,PREC@50,n_paths,judge_model,seed\n"));
        assert!(raw.contains("City,icn,96.38,93.2,50,fixture,0"));
    }
}
