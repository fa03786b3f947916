//! The iterative probing loop shared by knowledge probing, open-ended
//! generation and chain-of-thought navigation.
//!
//! Each iteration encodes one context (the base prompt, a paraphrase, or the
//! ICN context listing everything explored so far), fetches candidates,
//! skips first-tokens probed in earlier iterations, keeps the top `n_key`
//! new ones, and decodes each kept path from the *base* prompt so the
//! generation space stays identical across strategies. Only fully completed
//! iterations are committed, which is what makes a run resumable.

use std::collections::BTreeSet;
use std::collections::HashMap;

use crate::backend::{fetch_candidates_capped, Backend, Candidate, CandidateSet, CompletionParams};
use crate::cluster::{rerank_by_cluster, Clustering};
use crate::error::{Error, Result};
use crate::eval::JudgeCache;
use crate::keyspace::{NtpRanking, RankedToken};
use crate::probing::{
    build_icn_context, build_probe_prompt, resolve_paraphrase, Correctness, CorrectnessMode,
    IcnSession, IcnTemplate, ProbeTask, ProbedPath, Shortfall, Strategy, Validator, Verdict,
};

/// What gets appended to the ICN context for an explored path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExploredEntry {
    /// The whole decoded answer (entity probing).
    FullAnswer,
    /// Only the first line (chain-of-thought, so answers aren't copied).
    FirstLine,
}

impl ExploredEntry {
    fn extract(&self, answer: &str) -> String {
        match self {
            ExploredEntry::FullAnswer => answer.trim().to_string(),
            ExploredEntry::FirstLine => answer.trim().lines().next().unwrap_or("").to_string(),
        }
    }
}

/// Inputs of one navigation run.
pub struct NavigateSpec<'a> {
    pub base_prompt: String,
    pub strategy: Strategy,
    pub n_query: usize,
    pub n_key: usize,
    /// Fully resolved contexts for iterations 2..=n_query of the rephrase
    /// strategy.
    pub paraphrases: Vec<String>,
    pub clustering: Option<&'a Clustering>,
    pub icn_template: IcnTemplate,
    pub decode_params: CompletionParams,
    pub explored_entry: ExploredEntry,
    /// `Some(k)`: additionally decode k sampled answers per path.
    pub mc_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavigatedPath {
    pub iteration: usize,
    pub within_query_rank: usize,
    pub first_token: String,
    pub answer: String,
    pub mc_answers: Vec<String>,
}

/// Result of a navigation run. `error` is set when the backend failed
/// mid-run; everything up to the last fully committed iteration is kept so
/// the caller can persist and later resume.
#[derive(Debug, Default)]
pub struct NavigateOutcome {
    pub queries: Vec<String>,
    pub paths: Vec<NavigatedPath>,
    pub shortfalls: Vec<Shortfall>,
    pub iterations_done: usize,
    pub error: Option<Error>,
}

fn rerank_candidates(set: &CandidateSet, clustering: &Clustering) -> Result<Vec<Candidate>> {
    let mut by_id: HashMap<u32, &Candidate> = HashMap::new();
    let mut entries = Vec::with_capacity(set.candidates.len());
    for (i, cand) in set.candidates.iter().enumerate() {
        let id = cand.token_id.ok_or_else(|| {
            Error::InvalidArgument("rerank strategy requires candidate token ids".into())
        })?;
        if by_id.insert(id, cand).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate candidate token id {id}"
            )));
        }
        entries.push(RankedToken {
            token_id: id,
            logit: cand.logprob,
            probability: cand.logprob.exp(),
            rank: (i + 1) as u32,
        });
    }
    let ranking = NtpRanking {
        context: set.context.clone(),
        entries,
        truncated_at: Some(set.candidates.len()),
    };
    let reranked = rerank_by_cluster(&ranking, clustering)?;
    Ok(reranked
        .entries
        .iter()
        .map(|e| (*by_id[&e.token_id]).clone())
        .collect())
}

/// Run the navigation loop. See the module docs for the per-iteration
/// contract; this function performs no correctness labeling.
pub fn navigate(
    spec: &NavigateSpec,
    backend: &dyn Backend,
    resume: Option<NavigateOutcome>,
) -> NavigateOutcome {
    let mut outcome = resume.unwrap_or_default();
    outcome.error = None;

    let mut probed: BTreeSet<String> = outcome
        .paths
        .iter()
        .map(|p| p.first_token.clone())
        .collect();
    let mut explored: Vec<String> = outcome
        .paths
        .iter()
        .map(|p| spec.explored_entry.extract(&p.answer))
        .collect();

    let window = (spec.n_key * 4).max(50);

    for iteration in outcome.iterations_done + 1..=spec.n_query {
        let context = match spec.strategy {
            Strategy::Vanilla | Strategy::Rerank => spec.base_prompt.clone(),
            Strategy::Rephrase => {
                if iteration == 1 {
                    spec.base_prompt.clone()
                } else {
                    spec.paraphrases[iteration - 2].clone()
                }
            }
            Strategy::Icn => build_icn_context(&spec.base_prompt, &explored, &spec.icn_template),
        };

        let candidates = match fetch_candidates_capped(backend, &context, window) {
            Ok(set) => {
                if spec.strategy == Strategy::Rerank {
                    match rerank_candidates(&set, spec.clustering.expect("validated")) {
                        Ok(c) => c,
                        Err(e) => {
                            outcome.error = Some(e);
                            return outcome;
                        }
                    }
                } else {
                    set.candidates
                }
            }
            Err(e) => {
                outcome.error = Some(e);
                return outcome;
            }
        };

        let kept: Vec<&Candidate> = candidates
            .iter()
            .filter(|c| !probed.contains(&c.text))
            .take(spec.n_key)
            .collect();

        // Decode every kept path concurrently; the backend gates its own
        // in-flight limit. Results are committed in within_query_rank order.
        let decoded: Vec<Result<(String, Vec<String>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = kept
                .iter()
                .map(|cand| {
                    let first_token = cand.text.clone();
                    let base = &spec.base_prompt;
                    let params = &spec.decode_params;
                    let mc = spec.mc_samples;
                    scope.spawn(move || -> Result<(String, Vec<String>)> {
                        let answer = backend.complete(base, &first_token, params)?;
                        let mut samples = Vec::new();
                        if let Some(k) = mc {
                            for seed in 0..k as u64 {
                                let sample_params = CompletionParams {
                                    temperature: 1.0,
                                    top_p: 1.0,
                                    seed: Some(seed),
                                    ..params.clone()
                                };
                                samples.push(backend.complete(base, &first_token, &sample_params)?);
                            }
                        }
                        Ok((answer, samples))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });

        // An iteration commits atomically: any decode failure drops the
        // whole iteration (greedy decodes are idempotent to redo).
        let mut iteration_paths = Vec::with_capacity(kept.len());
        for (rank0, (cand, result)) in kept.iter().zip(decoded).enumerate() {
            match result {
                Ok((answer, mc_answers)) => iteration_paths.push(NavigatedPath {
                    iteration,
                    within_query_rank: rank0 + 1,
                    first_token: cand.text.clone(),
                    answer,
                    mc_answers,
                }),
                Err(e) => {
                    outcome.error = Some(e);
                    return outcome;
                }
            }
        }

        outcome.queries.push(context);
        if iteration_paths.len() < spec.n_key {
            outcome.shortfalls.push(Shortfall {
                iteration,
                kept: iteration_paths.len(),
            });
        }
        for path in iteration_paths {
            probed.insert(path.first_token.clone());
            explored.push(spec.explored_entry.extract(&path.answer));
            outcome.paths.push(path);
        }
        outcome.iterations_done = iteration;
    }
    outcome
}

/// Label one probed path with the task validator.
///
/// Greedy mode judges the single decoded answer; MC mode judges each sampled
/// answer. Judge failures become `Unknown` labels (recorded, excluded from
/// accuracy denominators) rather than aborting the run.
pub fn first_token_correctness(
    task: &ProbeTask,
    answer: &str,
    mc_answers: &[String],
    mode: CorrectnessMode,
    judge: Option<&JudgeCache<'_>>,
) -> (Correctness, Vec<String>) {
    let mut raws = Vec::new();
    let mut verdict_of = |text: &str| -> Verdict {
        match &task.validator {
            Validator::CharStart(c) => Verdict::from_bool(super::char_start_validate(text, *c)),
            Validator::CustomList(list) => {
                let needle = text.trim().to_lowercase();
                Verdict::from_bool(list.iter().any(|x| x.trim().to_lowercase() == needle))
            }
            Validator::LlmJudge => match judge {
                Some(cache) => {
                    let (verdict, raw) = cache.judge(&task.category, text.trim());
                    raws.push(raw);
                    verdict
                }
                None => Verdict::Unknown,
            },
        }
    };
    let correctness = match mode {
        CorrectnessMode::Greedy => Correctness::Greedy(verdict_of(answer)),
        CorrectnessMode::Mc(_) => {
            Correctness::Mc(mc_answers.iter().map(|a| verdict_of(a)).collect())
        }
    };
    (correctness, raws)
}

/// Run-level knobs for [`run_probe`].
#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub strategy: Strategy,
    pub n_query: usize,
    pub n_key: usize,
    pub correctness: CorrectnessMode,
    pub icn_template: IcnTemplate,
    pub decode_params: CompletionParams,
    pub seed: u64,
    pub clustering_ref: Option<String>,
}

impl ProbeOptions {
    pub fn new(strategy: Strategy, n_query: usize, n_key: usize) -> Self {
        Self {
            strategy,
            n_query,
            n_key,
            correctness: CorrectnessMode::Greedy,
            icn_template: IcnTemplate::default(),
            decode_params: CompletionParams::greedy_entity(),
            seed: 0,
            clustering_ref: None,
        }
    }
}

/// A probing run that stopped early. `partial` carries every fully
/// committed iteration and serializes like any other session, so the run
/// can resume from its cursor.
#[derive(Debug)]
pub struct ProbeInterrupted {
    pub partial: Option<Box<IcnSession>>,
    pub source: Error,
}

impl std::fmt::Display for ProbeInterrupted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.partial {
            Some(s) => write!(
                f,
                "probe interrupted after {} of {} iterations: {}",
                s.iterations_done, s.n_query, self.source
            ),
            None => write!(f, "probe rejected: {}", self.source),
        }
    }
}

impl std::error::Error for ProbeInterrupted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

fn validate_probe(
    task: &ProbeTask,
    opts: &ProbeOptions,
    judge: Option<&dyn Backend>,
    clustering: Option<&Clustering>,
    resume: Option<&IcnSession>,
) -> Result<()> {
    if opts.n_query < 1 || opts.n_key < 1 {
        return Err(Error::InvalidArgument(
            "n_query and n_key must be >= 1".into(),
        ));
    }
    if opts.strategy == Strategy::Vanilla && opts.n_query != 1 {
        return Err(Error::InvalidArgument(
            "vanilla strategy probes a single query; use icn or rephrase for more".into(),
        ));
    }
    if opts.strategy == Strategy::Rephrase && task.paraphrases.len() + 1 < opts.n_query {
        return Err(Error::InvalidArgument(format!(
            "rephrase strategy with n_query = {} needs at least {} paraphrases, task has {}",
            opts.n_query,
            opts.n_query - 1,
            task.paraphrases.len()
        )));
    }
    if opts.strategy == Strategy::Rerank && clustering.is_none() {
        return Err(Error::InvalidArgument(
            "rerank strategy requires a clustering".into(),
        ));
    }
    if task.validator == Validator::LlmJudge && judge.is_none() {
        return Err(Error::Config(
            "task uses the llm-judge validator but no judge backend was given".into(),
        ));
    }
    if let Some(prev) = resume {
        let hash = task.template_hash();
        if prev.category != task.category
            || prev.strategy != opts.strategy
            || prev.n_query != opts.n_query
            || prev.n_key != opts.n_key
            || prev.template_hash != hash
        {
            return Err(Error::InvalidArgument(
                "resume session does not match this task/run configuration".into(),
            ));
        }
    }
    Ok(())
}

/// Run one probing session end to end: navigate, decode, label.
pub fn run_probe(
    task: &ProbeTask,
    opts: &ProbeOptions,
    backend: &dyn Backend,
    judge: Option<&dyn Backend>,
    clustering: Option<&Clustering>,
    resume: Option<IcnSession>,
) -> std::result::Result<IcnSession, ProbeInterrupted> {
    let reject = |source: Error| ProbeInterrupted {
        partial: None,
        source,
    };
    validate_probe(task, opts, judge, clustering, resume.as_ref()).map_err(reject)?;
    let base_prompt = build_probe_prompt(task).map_err(reject)?;
    let paraphrases: Vec<String> = task
        .paraphrases
        .iter()
        .map(|p| resolve_paraphrase(p, &task.category))
        .collect::<Result<_>>()
        .map_err(reject)?;

    let mc_samples = match opts.correctness {
        CorrectnessMode::Greedy => None,
        CorrectnessMode::Mc(k) => Some(k),
    };
    let spec = NavigateSpec {
        base_prompt,
        strategy: opts.strategy,
        n_query: opts.n_query,
        n_key: opts.n_key,
        paraphrases,
        clustering,
        icn_template: opts.icn_template.clone(),
        decode_params: opts.decode_params.clone(),
        explored_entry: ExploredEntry::FullAnswer,
        mc_samples,
    };

    // Convert a resumed session back into loop state; labels for resumed
    // paths are kept as-is.
    let mut labeled: Vec<ProbedPath> = Vec::new();
    let resume_state = resume.map(|session| {
        let paths = session
            .paths
            .iter()
            .map(|p| NavigatedPath {
                iteration: p.iteration,
                within_query_rank: p.within_query_rank,
                first_token: p.first_token.clone(),
                answer: p.answer.clone(),
                mc_answers: p.mc_answers.clone(),
            })
            .collect();
        labeled = session.paths;
        NavigateOutcome {
            queries: session.queries,
            paths,
            shortfalls: session.shortfalls,
            iterations_done: session.iterations_done,
            error: None,
        }
    });

    let outcome = navigate(&spec, backend, resume_state);

    let cache = judge.map(JudgeCache::new);
    for path in &outcome.paths[labeled.len()..] {
        let (correct, judge_raw) = first_token_correctness(
            task,
            &path.answer,
            &path.mc_answers,
            opts.correctness,
            cache.as_ref(),
        );
        labeled.push(ProbedPath {
            first_token: path.first_token.clone(),
            answer: path.answer.clone(),
            correct,
            iteration: path.iteration,
            within_query_rank: path.within_query_rank,
            judge_raw,
            mc_answers: path.mc_answers.clone(),
        });
    }

    let session = IcnSession {
        category: task.category.clone(),
        strategy: opts.strategy,
        n_query: opts.n_query,
        n_key: opts.n_key,
        template_hash: task.template_hash(),
        correctness_mode: opts.correctness,
        seed: opts.seed,
        backend_name: backend.name(),
        judge_model: judge.map(|j| j.name()),
        clustering_ref: opts.clustering_ref.clone(),
        queries: outcome.queries,
        paths: labeled,
        shortfalls: outcome.shortfalls,
        iterations_done: outcome.iterations_done,
    };

    match outcome.error {
        None => Ok(session),
        Some(source) => Err(ProbeInterrupted {
            partial: Some(Box::new(session)),
            source,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FixtureBackend, FixtureCandidate, FixtureData, TraceLog, TracedBackend};
    use crate::cluster::clustering_from_assignment;
    use crate::probing::build_icn_context;

    fn cand(text: &str, logprob: f64) -> FixtureCandidate {
        FixtureCandidate {
            text: text.to_string(),
            logprob,
            id: None,
        }
    }

    /// Fixture with tokens " t00".." t59" as candidates for the base prompt.
    /// Decoding from `base + " tNN"` continues to " is answer NN", so the
    /// full answer reads " tNN is answer NN".
    fn simple_fixture(base: &str, n: usize) -> FixtureData {
        let mut data = FixtureData::default();
        let cands: Vec<FixtureCandidate> = (0..n)
            .map(|i| cand(&format!(" t{i:02}"), -(i as f64) / 10.0))
            .collect();
        data.script_candidates(base, cands);
        for i in 0..n {
            data.script_greedy(&format!("{base} t{i:02}"), &format!(" is answer {i:02}"));
        }
        data
    }

    fn answer_of(i: usize) -> String {
        format!("t{i:02} is answer {i:02}")
    }

    fn char_task(category: &str) -> ProbeTask {
        ProbeTask {
            category: category.to_string(),
            template: "Please show me some [CATEGORY]".to_string(),
            validator: Validator::CharStart('t'),
            paraphrases: Vec::new(),
        }
    }

    #[test]
    fn vanilla_takes_top_candidates_in_order() {
        let task = char_task("things");
        let base = build_probe_prompt(&task).unwrap();
        let backend = FixtureBackend::new(simple_fixture(&base, 60)).unwrap();
        let opts = ProbeOptions::new(Strategy::Vanilla, 1, 5);
        let session = run_probe(&task, &opts, &backend, None, None, None).unwrap();
        assert_eq!(session.paths.len(), 5);
        for (i, p) in session.paths.iter().enumerate() {
            assert_eq!(p.first_token, format!(" t{i:02}"));
            assert_eq!(p.iteration, 1);
            assert_eq!(p.within_query_rank, i + 1);
            assert_eq!(p.answer, format!(" t{i:02} is answer {i:02}"));
            // " tNN ..." starts with 't' -> correct by the char rule.
            assert_eq!(p.correct, Correctness::Greedy(Verdict::Correct));
        }
        assert!(session.completed());
    }

    #[test]
    fn probed_tokens_are_skipped_in_later_iterations() {
        let task = char_task("things");
        let base = build_probe_prompt(&task).unwrap();
        let mut data = simple_fixture(&base, 60);
        // ICN context after exploring the first two answers re-ranks " t00"
        // on top again; it must be skipped.
        let explored = vec![answer_of(0), answer_of(1)];
        let ctx2 = build_icn_context(&base, &explored, &IcnTemplate::default());
        data.script_candidates(
            &ctx2,
            vec![cand(" t00", -0.01), cand(" t07", -0.5), cand(" t08", -0.9)],
        );
        let backend = FixtureBackend::new(data).unwrap();
        let opts = ProbeOptions::new(Strategy::Icn, 2, 2);
        let session = run_probe(&task, &opts, &backend, None, None, None).unwrap();
        let tokens: Vec<&str> = session.paths.iter().map(|p| p.first_token.as_str()).collect();
        assert_eq!(tokens, vec![" t00", " t01", " t07", " t08"]);
    }

    #[test]
    fn fairness_rule_every_answer_decoded_from_base_prompt() {
        let task = char_task("things");
        let base = build_probe_prompt(&task).unwrap();
        let mut data = simple_fixture(&base, 60);
        let explored = vec![answer_of(0), answer_of(1), answer_of(2)];
        let ctx2 = build_icn_context(&base, &explored, &IcnTemplate::default());
        data.script_candidates(
            &ctx2,
            vec![cand(" t10", -0.1), cand(" t11", -0.2), cand(" t12", -0.3)],
        );
        let log = TraceLog::new();
        let backend = TracedBackend::new(Box::new(FixtureBackend::new(data).unwrap()), log.clone());
        let opts = ProbeOptions::new(Strategy::Icn, 2, 3);
        let session = run_probe(&task, &opts, &backend, None, None, None).unwrap();
        assert_eq!(session.paths.len(), 6);

        let mut complete_calls = 0;
        for event in log.events() {
            if event.op == "complete" {
                complete_calls += 1;
                assert_eq!(event.request["context"].as_str().unwrap(), base);
            }
        }
        assert_eq!(complete_calls, 6);
    }

    #[test]
    fn candidate_exhaustion_records_a_shortfall() {
        let task = char_task("things");
        let base = build_probe_prompt(&task).unwrap();
        let data = simple_fixture(&base, 3);
        let backend = FixtureBackend::new(data).unwrap();
        let opts = ProbeOptions::new(Strategy::Vanilla, 1, 5);
        let session = run_probe(&task, &opts, &backend, None, None, None).unwrap();
        assert_eq!(session.paths.len(), 3);
        assert_eq!(
            session.shortfalls,
            vec![Shortfall {
                iteration: 1,
                kept: 3
            }]
        );
        assert!(session.completed());
    }

    #[test]
    fn backend_failure_mid_run_keeps_committed_iterations() {
        let task = char_task("things");
        let base = build_probe_prompt(&task).unwrap();
        // Only the base context is scripted; the ICN context of iteration 2
        // misses and interrupts the run.
        let backend = FixtureBackend::new(simple_fixture(&base, 60)).unwrap();
        let opts = ProbeOptions::new(Strategy::Icn, 3, 2);
        let err = run_probe(&task, &opts, &backend, None, None, None).unwrap_err();
        let partial = err.partial.expect("partial session");
        assert_eq!(partial.iterations_done, 1);
        assert_eq!(partial.paths.len(), 2);
        assert!(!partial.completed());

        // Resume with the missing context scripted now.
        let mut data = simple_fixture(&base, 60);
        let explored = vec![answer_of(0), answer_of(1)];
        let ctx2 = build_icn_context(&base, &explored, &IcnTemplate::default());
        data.script_candidates(&ctx2, vec![cand(" t05", -0.1), cand(" t06", -0.2)]);
        let explored3 = vec![answer_of(0), answer_of(1), answer_of(5), answer_of(6)];
        let ctx3 = build_icn_context(&base, &explored3, &IcnTemplate::default());
        data.script_candidates(&ctx3, vec![cand(" t09", -0.1), cand(" t03", -0.2)]);
        let backend = FixtureBackend::new(data).unwrap();
        let session = run_probe(&task, &opts, &backend, None, None, Some(*partial)).unwrap();
        assert!(session.completed());
        let tokens: Vec<&str> = session.paths.iter().map(|p| p.first_token.as_str()).collect();
        assert_eq!(tokens, vec![" t00", " t01", " t05", " t06", " t09", " t03"]);
    }

    #[test]
    fn rerank_strategy_applies_cluster_penalty_to_candidates() {
        let task = char_task("things");
        let base = build_probe_prompt(&task).unwrap();
        let mut data = FixtureData::default();
        // Five candidates with token ids 0..5 and clusters [1,1,1,2,2]; the
        // worked penalty example swaps positions 3 and 4.
        data.script_candidates(
            &base,
            (0..5)
                .map(|i| FixtureCandidate {
                    text: format!(" t{i}"),
                    logprob: -(i as f64),
                    id: Some(i as u32),
                })
                .collect(),
        );
        for i in 0..5 {
            data.script_greedy(&format!("{base} t{i}"), &format!("answer {i}"));
        }
        let backend = FixtureBackend::new(data).unwrap();
        let clustering = clustering_from_assignment(vec![1, 1, 1, 2, 2], 3, 1);
        let opts = ProbeOptions::new(Strategy::Rerank, 1, 5);
        let session =
            run_probe(&task, &opts, &backend, None, Some(&clustering), None).unwrap();
        let tokens: Vec<&str> = session.paths.iter().map(|p| p.first_token.as_str()).collect();
        assert_eq!(tokens, vec![" t0", " t1", " t3", " t2", " t4"]);
    }

    #[test]
    fn rephrase_uses_paraphrases_after_the_first_iteration() {
        let mut task = char_task("things");
        task.paraphrases = vec!["List some [CATEGORY], please".to_string()];
        let base = build_probe_prompt(&task).unwrap();
        let mut data = simple_fixture(&base, 60);
        data.script_candidates(
            "List some things, please",
            vec![cand(" t20", -0.1), cand(" t21", -0.2)],
        );
        let backend = FixtureBackend::new(data).unwrap();
        let opts = ProbeOptions::new(Strategy::Rephrase, 2, 2);
        let session = run_probe(&task, &opts, &backend, None, None, None).unwrap();
        assert_eq!(session.queries[0], base);
        assert_eq!(session.queries[1], "List some things, please");
        let tokens: Vec<&str> = session.paths.iter().map(|p| p.first_token.as_str()).collect();
        assert_eq!(tokens, vec![" t00", " t01", " t20", " t21"]);
    }

    #[test]
    fn validation_rejects_bad_configurations() {
        let task = char_task("things");
        let base = build_probe_prompt(&task).unwrap();
        let backend = FixtureBackend::new(simple_fixture(&base, 10)).unwrap();

        let opts = ProbeOptions::new(Strategy::Vanilla, 2, 5);
        assert!(run_probe(&task, &opts, &backend, None, None, None).is_err());

        let opts = ProbeOptions::new(Strategy::Rephrase, 3, 2);
        assert!(run_probe(&task, &opts, &backend, None, None, None).is_err());

        let opts = ProbeOptions::new(Strategy::Rerank, 1, 2);
        assert!(run_probe(&task, &opts, &backend, None, None, None).is_err());

        let mut judged = char_task("things");
        judged.validator = Validator::LlmJudge;
        let opts = ProbeOptions::new(Strategy::Vanilla, 1, 2);
        assert!(run_probe(&judged, &opts, &backend, None, None, None).is_err());
    }

    #[test]
    fn mc_mode_samples_and_labels_each_variant() {
        let task = char_task("things");
        let base = build_probe_prompt(&task).unwrap();
        let mut data = FixtureData::default();
        data.script_candidates(&base, vec![cand(" P", -0.1)]);
        let key = format!("{base} P");
        data.script_greedy(&key, "anda answer");
        data.script_samples(
            &key,
            vec![
                "apple".into(),
                "apricot".into(),
                "quail".into(),
                "acorn".into(),
                "quince".into(),
            ],
        );
        let backend = FixtureBackend::new(data).unwrap();
        let mut opts = ProbeOptions::new(Strategy::Vanilla, 1, 1);
        opts.correctness = CorrectnessMode::Mc(5);
        let session = run_probe(&task, &opts, &backend, None, None, None).unwrap();
        let path = &session.paths[0];
        assert_eq!(path.mc_answers.len(), 5);
        // Samples start with the forced prefix " P", so none begin with 'a'.
        assert_eq!(path.correct.fraction(), Some(0.0));
    }
}
