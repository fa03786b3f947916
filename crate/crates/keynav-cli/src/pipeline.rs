//! Experiment orchestration behind the CLI subcommands. Every pipeline
//! writes only inside the configured output directory, embeds the config
//! hash and seed in everything it emits, and produces byte-identical
//! outputs when rerun with the same inputs and seeds.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::json;

use keynav::backend::{
    open_backend, Backend, BackendConfig, CompletionParams, TraceLog, TracedBackend,
};
use keynav::cluster::{
    clustering_from_assignment, group_metrics, kmeans_mode, load_clustering, partition_in_out_top,
    rerank_by_cluster, save_clustering, InOutPartition, KmeansMode,
};
use keynav::drift::{drift_report, group_probability_shift, write_drift_csv};
use keynav::eval::{
    self_consistency, unique_ngram_ratio, AnswerKind, MetricRow, ScStrategy, UngRow,
};
use keynav::keyspace::{load_key_space, load_vocab, KeySpace, NtpRanking, QueryVector, RankedToken};
use keynav::probing::{
    bundled_probe_set, load_tasks, navigate, read_session, run_probe, write_session,
    ExploredEntry, IcnSession, IcnTemplate, NavigateSpec, ProbeOptions, ProbeTask, Strategy,
};
use keynav::Error;

use crate::config::RunConfig;
use crate::project::{project_2d, ProjectedPoint};
use crate::report::{
    csv_provenance, provenance_footer, render_group_table, render_strategy_table, GroupRow,
    StrategyCell,
};
use crate::CliError;

fn ensure_out(cfg: &RunConfig, sub: Option<&str>) -> Result<PathBuf, CliError> {
    let mut dir = cfg.output_dir.clone();
    if let Some(sub) = sub {
        dir.push(sub);
    }
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Failure(format!("cannot create {dir:?}: {e}")))?;
    Ok(dir)
}

fn slug(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { '-' })
        .collect()
}

fn write_manifest(cfg: &RunConfig, command: &str, files: &[PathBuf]) -> Result<(), CliError> {
    let out = ensure_out(cfg, None)?;
    let mut names: Vec<String> = files
        .iter()
        .map(|p| p.strip_prefix(&cfg.output_dir).unwrap_or(p).display().to_string())
        .collect();
    names.sort();
    let manifest = json!({
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "files": names,
    });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(format!("io error: {e}"))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            Error::Backend { .. } => CliError::Unreachable(e.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

/// Open the configured backend, wrapping it in a tracer when tracing is on.
fn open_traced(
    cfg: &BackendConfig,
    trace: Option<&TraceLog>,
) -> Result<Box<dyn Backend>, CliError> {
    let inner = open_backend(cfg)?;
    Ok(match trace {
        Some(log) => Box::new(TracedBackend::new(inner, log.clone())),
        None => inner,
    })
}

fn load_keyspace_from(cfg: &RunConfig) -> Result<KeySpace, CliError> {
    let tensor = cfg
        .paths
        .tensor_file
        .as_ref()
        .ok_or_else(|| CliError::Config("paths.tensor_file is required".into()))?;
    let name = cfg
        .paths
        .tensor_name
        .as_deref()
        .ok_or_else(|| CliError::Config("paths.tensor_name is required".into()))?;
    let vocab = cfg
        .paths
        .vocab_file
        .as_ref()
        .ok_or_else(|| CliError::Config("paths.vocab_file is required".into()))?;
    Ok(load_key_space(tensor, name, vocab)?)
}

// ---------------------------------------------------------------------------
// cluster
// ---------------------------------------------------------------------------

pub fn cmd_cluster(
    cfg: &RunConfig,
    k: usize,
    balanced: bool,
    max_iters: usize,
    tol: f64,
) -> Result<(), CliError> {
    let ks = load_keyspace_from(cfg)?;
    let mode = if balanced {
        KmeansMode::Balanced
    } else {
        KmeansMode::Lloyd
    };
    let clustering = kmeans_mode(&ks, k, cfg.seed, max_iters, tol, mode)?;
    let out = ensure_out(cfg, None)?;
    let path = out.join("clusters.kncl");
    save_clustering(&path, &clustering)?;

    // Stamp the sidecar with the run provenance; the loader tolerates the
    // extra field.
    let sidecar_path = {
        let mut os = path.as_os_str().to_owned();
        os.push(".json");
        PathBuf::from(os)
    };
    let mut sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)
            .map_err(|e| CliError::Failure(e.to_string()))?;
    sidecar["config_hash"] = json!(cfg.config_hash());
    std::fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )?;

    let md = format!(
        "# Key-space clustering\n\n| k | vocab | dim | seed | mode | inertia | iterations |\n\
         |---|---|---|---|---|---|---|\n| {} | {} | {} | {} | {:?} | {:.6} | {} |\n{}",
        clustering.k,
        clustering.assignment.len(),
        clustering.dim,
        clustering.seed,
        clustering.mode,
        clustering.inertia,
        clustering.iterations_run,
        provenance_footer(&cfg.config_hash(), cfg.seed)
    );
    let md_path = out.join("cluster_report.md");
    std::fs::write(&md_path, md)?;
    write_manifest(cfg, "cluster", &[path, md_path])?;
    Ok(())
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

fn load_probe_tasks(cfg: &RunConfig, categories: &[String]) -> Result<Vec<ProbeTask>, CliError> {
    let mut tasks = match &cfg.paths.tasks {
        Some(path) => load_tasks(path)?,
        None => bundled_probe_set(),
    };
    if !categories.is_empty() {
        tasks.retain(|t| categories.iter().any(|c| c == &t.category));
        if tasks.is_empty() {
            return Err(CliError::Config(format!(
                "no task matches the requested categories {categories:?}"
            )));
        }
    }
    Ok(tasks)
}

fn session_flags(session: &IcnSession) -> Vec<bool> {
    session.correctness_flags()
}

pub fn cmd_probe(cfg: &RunConfig, categories: &[String]) -> Result<(), CliError> {
    let backend_cfg = cfg.backend_required()?;
    let judge_cfg = cfg.judge.as_ref().unwrap_or(backend_cfg);
    let trace_log = cfg.trace.then(TraceLog::new);
    let backend = open_traced(backend_cfg, trace_log.as_ref())?;
    let judge = open_traced(judge_cfg, trace_log.as_ref())?;
    let tasks = load_probe_tasks(cfg, categories)?;

    let clustering = match &cfg.paths.clustering {
        Some(path) => Some(load_clustering(path)?),
        None => None,
    };
    if cfg.probe.strategy == Strategy::Rerank && clustering.is_none() {
        return Err(CliError::Config(
            "rerank strategy requires paths.clustering".into(),
        ));
    }

    let sessions_dir = ensure_out(cfg, Some("sessions"))?;
    let mut files = Vec::new();
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut any_paths = false;
    let mut backend_down = false;

    for task in &tasks {
        let session_path =
            sessions_dir.join(format!("{}--{}.ndjson", slug(&task.category), cfg.probe.strategy));
        // A completed prior session makes the rerun a no-op; a partial one
        // resumes from its cursor.
        let resume = if session_path.exists() {
            Some(read_session(&session_path)?)
        } else {
            None
        };

        let mut opts = ProbeOptions::new(cfg.probe.strategy, cfg.probe.n_query, cfg.probe.n_key);
        opts.correctness = cfg.probe.correctness;
        opts.seed = cfg.seed;
        opts.clustering_ref = cfg
            .paths
            .clustering
            .as_ref()
            .map(|p| p.display().to_string());

        let session = match run_probe(
            task,
            &opts,
            backend.as_ref(),
            Some(judge.as_ref()),
            clustering.as_ref(),
            resume,
        ) {
            Ok(session) => session,
            Err(interrupted) => {
                if let Some(partial) = interrupted.partial {
                    if !partial.paths.is_empty() {
                        any_paths = true;
                    }
                    write_session(&session_path, &partial)?;
                    keynav::probing::append_provenance(&session_path, &cfg.config_hash(), cfg.seed)?;
                    files.push(session_path.clone());
                    warnings.push(format!(
                        "{}: interrupted after {} iterations ({}); session persisted, rerun to resume",
                        task.category, partial.iterations_done, interrupted.source
                    ));
                } else {
                    warnings.push(format!("{}: {}", task.category, interrupted.source));
                }
                if matches!(interrupted.source, Error::Backend { .. }) {
                    backend_down = true;
                }
                continue;
            }
        };

        any_paths = any_paths || !session.paths.is_empty();
        write_session(&session_path, &session)?;
        keynav::probing::append_provenance(&session_path, &cfg.config_hash(), cfg.seed)?;
        files.push(session_path);

        let flags = session_flags(&session);
        if !flags.is_empty() {
            let map50 = keynav::eval::map_at_k(&flags, 50)?;
            let prec50 = keynav::eval::precision_at_k(&flags, 50)?;
            rows.push(MetricRow {
                category: task.category.clone(),
                strategy: cfg.probe.strategy.to_string(),
                map_at_50: map50,
                prec_at_50: prec50,
                n_paths: session.paths.len(),
                judge_model: session.judge_model.clone().unwrap_or_default(),
                seed: cfg.seed,
            });
            cells.push(StrategyCell {
                category: task.category.clone(),
                strategy: cfg.probe.strategy.to_string(),
                map: map50,
                prec: prec50,
            });
        }
    }

    if !any_paths && backend_down {
        return Err(CliError::Unreachable(
            "backend produced no candidates for any task".into(),
        ));
    }

    let out = ensure_out(cfg, None)?;
    if !rows.is_empty() {
        let csv_path = out.join("metrics.csv");
        write_csv_with_provenance(&csv_path, cfg, |path| {
            keynav::eval::write_metric_csv(path, &rows)
        })?;
        files.push(csv_path);
    }

    let mut md = String::from("# Probing report\n\n");
    md.push_str(&render_strategy_table(&cells));
    if !warnings.is_empty() {
        md.push_str("\n## Warnings\n\n");
        for w in &warnings {
            md.push_str(&format!("- {w}\n"));
        }
    }
    md.push_str(&provenance_footer(&cfg.config_hash(), cfg.seed));
    let md_path = out.join("probe_report.md");
    std::fs::write(&md_path, md)?;
    files.push(md_path);

    if let Some(log) = &trace_log {
        let trace_path = out.join("trace.ndjson");
        log.write_ndjson(&trace_path)?;
        files.push(trace_path);
    }
    write_manifest(cfg, "probe", &files)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

/// Write a CSV through `body`, then prepend the provenance comment line.
fn write_csv_with_provenance(
    path: &Path,
    cfg: &RunConfig,
    body: impl FnOnce(&Path) -> keynav::Result<()>,
) -> Result<(), CliError> {
    body(path)?;
    let existing = std::fs::read_to_string(path)?;
    let mut out = std::fs::File::create(path)?;
    out.write_all(csv_provenance(&cfg.config_hash(), cfg.seed).as_bytes())?;
    out.write_all(existing.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// Rebuild a pseudo-ranking from a session's path order. Path order equals
/// NTP rank order for vanilla sessions, which is what the InTop/OutTop
/// analysis expects.
fn ranking_from_session(
    session: &IcnSession,
    text_to_id: &HashMap<String, u32>,
) -> Result<(NtpRanking, HashMap<u32, bool>, usize), CliError> {
    let mut entries = Vec::with_capacity(session.paths.len());
    let mut correctness = HashMap::new();
    let mut unknown = 0usize;
    for (i, path) in session.paths.iter().enumerate() {
        let id = *text_to_id.get(&path.first_token).ok_or_else(|| {
            CliError::Failure(format!(
                "first token {:?} not present in the vocab file",
                path.first_token
            ))
        })?;
        entries.push(RankedToken {
            token_id: id,
            logit: -(i as f64),
            probability: 0.0,
            rank: (i + 1) as u32,
        });
        match path.correct.is_correct() {
            Some(flag) => {
                correctness.insert(id, flag);
            }
            None => unknown += 1,
        }
    }
    Ok((
        NtpRanking {
            context: session.queries.first().cloned().unwrap_or_default(),
            entries,
            truncated_at: None,
        },
        correctness,
        unknown,
    ))
}

/// Drop tokens without a known correctness label from both sides of the
/// partition so unknowns stay out of every accuracy denominator.
fn filter_partition(
    partition: &InOutPartition,
    known: &HashMap<u32, bool>,
) -> (InOutPartition, usize) {
    let keep = |ids: &[u32]| -> Vec<u32> {
        ids.iter().copied().filter(|id| known.contains_key(id)).collect()
    };
    let in_top = keep(&partition.in_top);
    let out_top = keep(&partition.out_top);
    let dropped = partition.in_top.len() + partition.out_top.len() - in_top.len() - out_top.len();
    (
        InOutPartition {
            in_top,
            out_top,
            k_top: partition.k_top,
            n_top: partition.n_top,
        },
        dropped,
    )
}

pub fn cmd_metrics(
    cfg: &RunConfig,
    session_paths: &[PathBuf],
    k_top: usize,
    n_top: usize,
) -> Result<(), CliError> {
    let clustering_path = cfg
        .paths
        .clustering
        .as_ref()
        .ok_or_else(|| CliError::Config("paths.clustering is required for metrics".into()))?;
    let clustering = load_clustering(clustering_path)?;
    let vocab_path = cfg
        .paths
        .vocab_file
        .as_ref()
        .ok_or_else(|| CliError::Config("paths.vocab_file is required for metrics".into()))?;
    let vocab = load_vocab(vocab_path)?;
    let text_to_id: HashMap<String, u32> =
        vocab.iter().map(|t| (t.text.clone(), t.id)).collect();

    let mut paths: Vec<PathBuf> = if session_paths.is_empty() {
        let dir = cfg.output_dir.join("sessions");
        std::fs::read_dir(&dir)
            .map_err(|e| CliError::Config(format!("no session files given and {dir:?}: {e}")))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "ndjson"))
            .collect()
    } else {
        session_paths.to_vec()
    };
    paths.sort();

    let mut group_rows = Vec::new();
    let mut csv_lines = vec!["category,group,accuracy,avg_rank,proportion,members,unknown".to_string()];
    let mut warnings = Vec::new();

    for path in &paths {
        let session = read_session(path)?;
        if session.paths.len() < n_top {
            warnings.push(format!(
                "{}: only {} paths, need n_top = {n_top}; skipped",
                session.category,
                session.paths.len()
            ));
            continue;
        }
        let (ranking, correctness, unknown) = ranking_from_session(&session, &text_to_id)?;
        let partition = partition_in_out_top(&ranking, &clustering, k_top, n_top)?;
        let (filtered, dropped) = filter_partition(&partition, &correctness);
        let (in_rep, out_rep) = group_metrics(&filtered, &correctness, &ranking)?;
        let fmt_o = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        csv_lines.push(format!(
            "{},InTop,{},{},{:.4},{},{}",
            session.category,
            fmt_o(in_rep.accuracy),
            fmt_o(in_rep.avg_rank),
            in_rep.proportion,
            in_rep.member_count,
            unknown + dropped
        ));
        csv_lines.push(format!(
            "{},OutTop,{},{},{:.4},{},{}",
            session.category,
            fmt_o(out_rep.accuracy),
            fmt_o(out_rep.avg_rank),
            out_rep.proportion,
            out_rep.member_count,
            unknown + dropped
        ));
        group_rows.push(GroupRow {
            category: session.category.clone(),
            in_top: in_rep,
            out_top: out_rep,
            unknown: unknown + dropped,
        });
    }

    let out = ensure_out(cfg, None)?;
    let md_path = out.join("group_report.md");
    let mut md = String::from("# InTop / OutTop report\n\n");
    md.push_str(&render_group_table(&group_rows));
    if !warnings.is_empty() {
        md.push_str("\n## Warnings\n\n");
        for w in &warnings {
            md.push_str(&format!("- {w}\n"));
        }
    }
    md.push_str(&provenance_footer(&cfg.config_hash(), cfg.seed));
    std::fs::write(&md_path, md)?;

    let csv_path = out.join("group_metrics.csv");
    let mut body = csv_provenance(&cfg.config_hash(), cfg.seed);
    body.push_str(&csv_lines.join("\n"));
    body.push('\n');
    std::fs::write(&csv_path, body)?;

    write_manifest(cfg, "metrics", &[md_path, csv_path])?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// rerank-demo
// ---------------------------------------------------------------------------

pub fn cmd_rerank_demo(
    cfg: &RunConfig,
    dump: Option<&Path>,
    context: Option<&str>,
    top_n: usize,
) -> Result<(), CliError> {
    let (ranking, clustering) = match (dump, context) {
        (Some(dump_path), Some(context)) => {
            let clustering_path = cfg.paths.clustering.as_ref().ok_or_else(|| {
                CliError::Config("paths.clustering is required to rerank a dump".into())
            })?;
            let clustering = load_clustering(clustering_path)?;
            let backend = keynav::backend::LogitDumpBackend::load(dump_path)?;
            let mut ranking = backend.ranking(context)?;
            ranking.entries.truncate(top_n);
            ranking.truncated_at = Some(top_n);
            (ranking, clustering)
        }
        _ => {
            // The worked example: five ranks with clusters [1,1,1,2,2].
            let logits: Vec<f64> = (0..5).map(|i| (5 - i) as f64).collect();
            let ranking = NtpRanking::from_logits("demo", &logits, None)?;
            (ranking, clustering_from_assignment(vec![1, 1, 1, 2, 2], 3, 1))
        }
    };

    let reranked = rerank_by_cluster(&ranking, &clustering)?;
    let mut md = String::from("# Cluster-penalty rerank\n\n");
    md.push_str("| original rank | token | cluster | in-cluster rank | added rank | new rank |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    let mut seen: HashMap<u32, u32> = HashMap::new();
    let mut added_ranks = Vec::new();
    for (i, e) in ranking.entries.iter().enumerate() {
        let cluster = clustering.cluster_of(e.token_id)?;
        let c = seen.entry(cluster).or_insert(0);
        *c += 1;
        let added = (i + 1) as u32 + *c;
        added_ranks.push(added);
        let new_rank = reranked
            .entries
            .iter()
            .position(|r| r.token_id == e.token_id)
            .expect("permutation")
            + 1;
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            i + 1,
            e.token_id,
            cluster,
            c,
            added,
            new_rank
        ));
    }
    md.push_str(&provenance_footer(&cfg.config_hash(), cfg.seed));
    println!("{md}");

    let out = ensure_out(cfg, None)?;
    let md_path = out.join("rerank_demo.md");
    std::fs::write(&md_path, md)?;
    write_manifest(cfg, "rerank-demo", &[md_path])?;
    Ok(())
}

// ---------------------------------------------------------------------------
// drift
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ShiftRecord {
    before_context: String,
    after_context: String,
    trained_token: u32,
    #[serde(default)]
    correct: Vec<u32>,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_drift(
    cfg: &RunConfig,
    tensor_a: &Path,
    tensor_b: &Path,
    n_pairs: usize,
    n_tokens: usize,
    before_dump: Option<&Path>,
    after_dump: Option<&Path>,
    shift_spec: Option<&Path>,
    window: usize,
    session: Option<&Path>,
    queries_dump: Option<&Path>,
    top_keys: usize,
) -> Result<(), CliError> {
    let name = cfg
        .paths
        .tensor_name
        .as_deref()
        .ok_or_else(|| CliError::Config("paths.tensor_name is required".into()))?;
    let vocab = cfg
        .paths
        .vocab_file
        .as_ref()
        .ok_or_else(|| CliError::Config("paths.vocab_file is required".into()))?;
    let a = load_key_space(tensor_a, name, vocab)?;
    let b = load_key_space(tensor_b, name, vocab)?;

    let report = drift_report(&a, &b, n_pairs, n_tokens, cfg.seed)?;
    let out = ensure_out(cfg, None)?;
    let csv_path = out.join("drift.csv");
    write_csv_with_provenance(&csv_path, cfg, |p| write_drift_csv(p, &report))?;

    let summary_path = out.join("drift_summary.json");
    let summary = json!({
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "token_similarity": keynav::drift::summarize(&report.token_similarity)?,
        "pair_delta": keynav::drift::summarize(&report.pair_delta)?,
        "rank_correlation": keynav::drift::summarize(&report.rank_correlation)?,
        "n_pairs": report.n_pairs,
        "n_tokens": report.n_tokens,
        "pair_sampling": report.pair_sampling,
    });
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary).unwrap())?;
    let mut files = vec![csv_path, summary_path];

    if let (Some(before), Some(after), Some(spec)) = (before_dump, after_dump, shift_spec) {
        files.push(run_probability_shift(cfg, before, after, spec, window, &out)?);
    }
    if let (Some(session), Some(dump)) = (session, queries_dump) {
        files.push(run_query_drift(cfg, &a, session, dump, top_keys, &out)?);
    }
    write_manifest(cfg, "drift", &files)?;
    Ok(())
}

/// Per-iteration query/key drift for a recorded session: each iteration's
/// query is recovered by least squares from a full-logit dump of that
/// context, then compared against the first query and its top keys.
fn run_query_drift(
    cfg: &RunConfig,
    ks: &KeySpace,
    session_path: &Path,
    queries_dump: &Path,
    top_keys: usize,
    out: &Path,
) -> Result<PathBuf, CliError> {
    use keynav::backend::{recover_query, LogitDumpBackend, LogitObservations};
    use keynav::drift::query_key_drift;

    let session = read_session(session_path)?;
    if session.queries.is_empty() {
        return Err(CliError::Config("session has no recorded queries".into()));
    }
    let dump = LogitDumpBackend::load(queries_dump)?;

    let mut recovered = Vec::with_capacity(session.queries.len());
    for context in &session.queries {
        let ranking = dump.ranking(context)?;
        let pairs: Vec<(u32, f64)> = ranking
            .entries
            .iter()
            .map(|e| (e.token_id, e.logit))
            .collect();
        recovered.push(recover_query(&LogitObservations::Logits(pairs), ks)?.query);
    }

    let original = recovered[0].clone();
    let original_ranking = dump.ranking(&session.queries[0])?;
    let key_rows: Vec<Vec<f64>> = original_ranking
        .entries
        .iter()
        .take(top_keys)
        .map(|e| ks.key(e.token_id).to_vec())
        .collect();

    let drift = query_key_drift(&original, &key_rows, &recovered)?;
    let csv_path = out.join("query_drift.csv");
    let mut body = csv_provenance(&cfg.config_hash(), cfg.seed);
    body.push_str("iteration,cos_to_original,mean_cos_to_top_keys\n");
    for sample in &drift {
        body.push_str(&format!(
            "{},{},{}\n",
            sample.index, sample.cos_to_original, sample.mean_cos_to_top_keys
        ));
    }
    std::fs::write(&csv_path, body)?;
    Ok(csv_path)
}

/// The fine-tuning probability-shift metric over externally produced
/// before/after NTP dumps. Reports the per-record deltas plus both
/// aggregations (by prompt and by trained token).
fn run_probability_shift(
    cfg: &RunConfig,
    before_dump: &Path,
    after_dump: &Path,
    shift_spec: &Path,
    window: usize,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let clustering_path = cfg
        .paths
        .clustering
        .as_ref()
        .ok_or_else(|| CliError::Config("paths.clustering is required for the shift metric".into()))?;
    let clustering = load_clustering(clustering_path)?;
    let before = keynav::backend::LogitDumpBackend::load(before_dump)?;
    let after = keynav::backend::LogitDumpBackend::load(after_dump)?;

    let mut rows = Vec::new();
    let raw = std::fs::read_to_string(shift_spec)?;
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ShiftRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Config(format!("shift spec line {}: {e}", lineno + 1)))?;
        let before_ranking = before.ranking(&record.before_context)?;
        let after_ranking = after.ranking(&record.after_context)?;
        let correct: HashSet<u32> = record.correct.iter().copied().collect();
        let (d_cluster, d_correct) = group_probability_shift(
            &before_ranking,
            &after_ranking,
            record.trained_token,
            &clustering,
            &correct,
            window,
        )?;
        rows.push((record, d_cluster, d_correct));
    }

    let csv_path = out.join("probability_shift.csv");
    let mut body = csv_provenance(&cfg.config_hash(), cfg.seed);
    body.push_str("before_context,trained_token,delta_in_cluster,delta_correct\n");
    for (record, d_cluster, d_correct) in &rows {
        body.push_str(&format!(
            "{:?},{},{},{}\n",
            record.before_context, record.trained_token, d_cluster, d_correct
        ));
    }
    std::fs::write(&csv_path, body)?;

    // Both aggregations: per prompt and per trained token.
    let mut by_prompt: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut by_token: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for (record, d_cluster, d_correct) in &rows {
        by_prompt
            .entry(record.before_context.clone())
            .or_default()
            .push((*d_cluster, *d_correct));
        by_token
            .entry(record.trained_token)
            .or_default()
            .push((*d_cluster, *d_correct));
    }
    let mean = |deltas: &[(f64, f64)]| {
        let n = deltas.len() as f64;
        json!({
            "delta_in_cluster": deltas.iter().map(|d| d.0).sum::<f64>() / n,
            "delta_correct": deltas.iter().map(|d| d.1).sum::<f64>() / n,
            "n": deltas.len(),
        })
    };
    let all: Vec<(f64, f64)> = rows.iter().map(|(_, a, b)| (*a, *b)).collect();
    let summary = json!({
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "window": window,
        "overall": mean(&all),
        "by_prompt": by_prompt.iter().map(|(k, v)| (k.clone(), mean(v))).collect::<BTreeMap<_, _>>(),
        "by_trained_token": by_token.iter().map(|(k, v)| (k.to_string(), mean(v))).collect::<BTreeMap<_, _>>(),
    });
    std::fs::write(
        out.join("probability_shift_summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    Ok(csv_path)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub fn cmd_gen(
    cfg: &RunConfig,
    class: &str,
    domain: &str,
    n_query: usize,
    n_key: usize,
    strategy: Strategy,
) -> Result<(), CliError> {
    let backend_cfg = cfg.backend_required()?;
    let trace_log = cfg.trace.then(TraceLog::new);
    let backend = open_traced(backend_cfg, trace_log.as_ref())?;

    let base_prompt = format!("Please show me some {class} {domain}.");
    let spec = NavigateSpec {
        base_prompt,
        strategy,
        n_query,
        n_key,
        paraphrases: Vec::new(),
        clustering: None,
        icn_template: IcnTemplate::default(),
        decode_params: CompletionParams::greedy_sentence(),
        explored_entry: ExploredEntry::FullAnswer,
        mc_samples: None,
    };
    let outcome = navigate(&spec, backend.as_ref(), None);
    let texts: Vec<String> = outcome
        .paths
        .iter()
        .map(|p| p.answer.trim().to_string())
        .collect();
    if let Some(e) = outcome.error {
        if texts.is_empty() {
            return Err(e.into());
        }
        eprintln!("warning: generation stopped early: {e}");
    }

    let out = ensure_out(cfg, Some("gen"))?;
    let corpus_path = out.join(format!("{}--{}.txt", slug(class), slug(domain)));
    std::fs::write(&corpus_path, texts.join("\n") + "\n")?;

    let ung = unique_ngram_ratio(&texts, 1, 4)?;
    let csv_path = cfg.output_dir.join("ung.csv");
    write_csv_with_provenance(&csv_path, cfg, |p| {
        keynav::eval::write_ung_csv(
            p,
            &[UngRow {
                dataset: domain.to_string(),
                class: class.to_string(),
                ung,
                n_texts: texts.len(),
            }],
        )
    })?;
    write_manifest(cfg, "gen", &[corpus_path, csv_path])?;
    Ok(())
}

// ---------------------------------------------------------------------------
// cot
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CotQuestion {
    question: String,
    #[serde(default = "default_kind")]
    kind: AnswerKind,
    #[serde(default)]
    gold: Option<String>,
}

fn default_kind() -> AnswerKind {
    AnswerKind::Numeric
}

pub fn cmd_cot(
    cfg: &RunConfig,
    questions: &Path,
    strategy: ScStrategy,
    n_paths: usize,
) -> Result<(), CliError> {
    let backend_cfg = cfg.backend_required()?;
    let trace_log = cfg.trace.then(TraceLog::new);
    let backend = open_traced(backend_cfg, trace_log.as_ref())?;

    let raw = std::fs::read_to_string(questions)?;
    let out = ensure_out(cfg, None)?;
    let votes_path = out.join("votes.ndjson");
    let mut votes_file = std::fs::File::create(&votes_path)?;
    let header = json!({
        "kind": "header",
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "strategy": strategy,
        "n_paths": n_paths,
    });
    serde_json::to_writer(&mut votes_file, &header)
        .map_err(|e| CliError::Failure(e.to_string()))?;
    votes_file.write_all(b"\n")?;

    let mut total = 0usize;
    let mut correct = 0usize;
    let mut graded = 0usize;
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: CotQuestion = serde_json::from_str(line)
            .map_err(|e| CliError::Config(format!("questions line {}: {e}", lineno + 1)))?;
        let vote = self_consistency(&q.question, n_paths, strategy, backend.as_ref(), q.kind)?;
        total += 1;
        if let Some(gold) = &q.gold {
            graded += 1;
            if &vote.winner == gold {
                correct += 1;
            }
        }
        let line = json!({
            "question": q.question,
            "strategy": strategy,
            "winner": vote.winner,
            "counts": vote.counts,
            "answers": vote.answers,
            "tie_broken": vote.tie_broken,
            "extraction_failures": vote.extraction_failures,
            "gold": q.gold,
        });
        serde_json::to_writer(&mut votes_file, &line)
            .map_err(|e| CliError::Failure(e.to_string()))?;
        votes_file.write_all(b"\n")?;
    }

    let summary = json!({
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "strategy": strategy,
        "n_paths": n_paths,
        "questions": total,
        "graded": graded,
        "accuracy": if graded > 0 { Some(100.0 * correct as f64 / graded as f64) } else { None },
    });
    let summary_path = out.join("cot_summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary).unwrap())?;
    write_manifest(cfg, "cot", &[votes_path, summary_path])?;
    Ok(())
}

// ---------------------------------------------------------------------------
// project
// ---------------------------------------------------------------------------

pub fn cmd_project(
    cfg: &RunConfig,
    ids: &[u32],
    query_file: Option<&Path>,
) -> Result<(), CliError> {
    let ks = load_keyspace_from(cfg)?;
    let query = match query_file {
        Some(path) => {
            let raw = std::fs::read_to_string(path)?;
            let values: Vec<f64> = serde_json::from_str(&raw)
                .map_err(|e| CliError::Config(format!("query file {path:?}: {e}")))?;
            Some(QueryVector::synthetic(values))
        }
        None => None,
    };
    let points = project_2d(&ks, ids, query.as_ref())?;

    let out = ensure_out(cfg, None)?;
    let csv_path = out.join("projection.csv");
    let mut body = csv_provenance(&cfg.config_hash(), cfg.seed);
    body.push_str("token_id,label,x,y,is_query\n");
    for ProjectedPoint {
        token_id,
        label,
        x,
        y,
        is_query,
    } in &points
    {
        body.push_str(&format!(
            "{},{:?},{x},{y},{is_query}\n",
            token_id.map(|i| i.to_string()).unwrap_or_default(),
            label
        ));
    }
    std::fs::write(&csv_path, body)?;
    write_manifest(cfg, "project", &[csv_path])?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use keynav::backend::{write_dump, DumpRecord, FixtureBackend, FixtureCandidate, FixtureData};
    use keynav::keyspace::{cosine_similarity, Token};
    use keynav::probing::{build_icn_context, CorrectnessMode};
    use keynav::tensor::Matrix;

    fn write_toy_keyspace(dir: &Path, n: usize, dim: usize) -> (PathBuf, PathBuf, KeySpace) {
        let values: Vec<f64> = (0..n * dim)
            .map(|i| ((i * 2654435761) % 97) as f64 / 97.0 - 0.5)
            .collect();
        let tokens: Vec<Token> = (0..n)
            .map(|i| Token {
                id: i as u32,
                text: format!("t{i}"),
            })
            .collect();
        let ks = KeySpace::new(
            tokens.clone(),
            Matrix {
                rows: n,
                cols: dim,
                values,
            },
        )
        .unwrap();
        let tensor_path = dir.join("keys.tensors");
        ks.save_matrix(&tensor_path, "unembed").unwrap();
        let vocab_path = dir.join("vocab.json");
        let texts: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
        std::fs::write(&vocab_path, serde_json::to_string(&texts).unwrap()).unwrap();
        (tensor_path, vocab_path, ks)
    }

    #[test]
    fn drift_pipeline_recovers_session_queries() {
        let dir = tempfile::tempdir().unwrap();
        let (tensor_path, vocab_path, ks) = write_toy_keyspace(dir.path(), 30, 4);

        // Three scripted queries: the second is orthogonal to the first,
        // the third equals the first.
        let queries = [
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
        ];
        let contexts = ["ctx0", "ctx1", "ctx2"];
        let records: Vec<DumpRecord> = contexts
            .iter()
            .zip(&queries)
            .map(|(ctx, q)| DumpRecord::Logits {
                context: ctx.to_string(),
                logits: (0..30u32)
                    .map(|id| ks.key(id).iter().zip(q).map(|(a, b)| a * b).sum())
                    .collect(),
            })
            .collect();
        let dump_path = dir.path().join("queries.ndjson");
        write_dump(&dump_path, &records).unwrap();

        let session = IcnSession {
            category: "toy".into(),
            strategy: Strategy::Icn,
            n_query: 3,
            n_key: 1,
            template_hash: "x".into(),
            correctness_mode: CorrectnessMode::Greedy,
            seed: 0,
            backend_name: "fixture".into(),
            judge_model: None,
            clustering_ref: None,
            queries: contexts.iter().map(|c| c.to_string()).collect(),
            paths: Vec::new(),
            shortfalls: Vec::new(),
            iterations_done: 3,
        };
        let session_path = dir.path().join("session.ndjson");
        write_session(&session_path, &session).unwrap();

        let cfg = RunConfig {
            paths: crate::config::PathsConfig {
                tensor_name: Some("unembed".into()),
                vocab_file: Some(vocab_path),
                ..Default::default()
            },
            output_dir: dir.path().join("out"),
            ..Default::default()
        };
        cmd_drift(
            &cfg,
            &tensor_path,
            &tensor_path,
            100,
            5,
            None,
            None,
            None,
            100,
            Some(&session_path),
            Some(&dump_path),
            10,
        )
        .unwrap();

        let csv = std::fs::read_to_string(cfg.output_dir.join("query_drift.csv")).unwrap();
        let rows: Vec<Vec<f64>> = csv
            .lines()
            .skip(2)
            .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 3);
        assert!((rows[0][0] - 1.0).abs() < 1e-9, "original vs itself");
        assert!(rows[1][0].abs() < 1e-9, "orthogonal query");
        assert!((rows[2][0] - 1.0).abs() < 1e-9, "identical query");

        // Mean similarity to the original's top-10 keys, hand-computed.
        let ranking = keynav::keyspace::ntp_from_query(
            &QueryVector::synthetic(queries[0].clone()),
            &ks,
            Some(10),
            "ctx0",
        )
        .unwrap();
        let expect: f64 = ranking
            .entries
            .iter()
            .map(|e| cosine_similarity(&queries[0], ks.key(e.token_id)).unwrap())
            .sum::<f64>()
            / 10.0;
        assert!((rows[0][1] - expect).abs() < 1e-6);
        assert!((rows[2][1] - expect).abs() < 1e-6);
    }

    #[test]
    fn gen_pipeline_emits_corpus_and_ung() {
        let dir = tempfile::tempdir().unwrap();
        let base = "Please show me some positive movie reviews.";
        let mut data = FixtureData::default();
        let cand = |text: &str, lp: f64| FixtureCandidate {
            text: text.into(),
            logprob: lp,
            id: None,
        };
        data.script_candidates(base, vec![cand(" The", -0.1), cand(" A", -0.2)]);
        data.script_greedy(&format!("{base} The"), " film is a joy to watch");
        data.script_greedy(&format!("{base} A"), " warm and funny story");
        let explored = vec![
            "The film is a joy to watch".to_string(),
            "A warm and funny story".to_string(),
        ];
        let ctx2 = build_icn_context(base, &explored, &IcnTemplate::default());
        data.script_candidates(&ctx2, vec![cand(" Every", -0.1), cand(" What", -0.15)]);
        data.script_greedy(&format!("{base} Every"), " scene lands perfectly");
        data.script_greedy(&format!("{base} What"), " a delightful surprise");
        let fixture = dir.path().join("fixture.json");
        FixtureBackend::save(&data, &fixture).unwrap();

        let cfg = RunConfig {
            backend: Some(keynav::backend::BackendConfig::fixture(fixture)),
            output_dir: dir.path().join("out"),
            ..Default::default()
        };
        cmd_gen(&cfg, "positive", "movie reviews", 2, 2, Strategy::Icn).unwrap();

        let corpus = std::fs::read_to_string(
            cfg.output_dir.join("gen/positive--movie-reviews.txt"),
        )
        .unwrap();
        assert_eq!(corpus.lines().count(), 4);
        assert!(corpus.contains("Every scene lands perfectly"));

        let ung = std::fs::read_to_string(cfg.output_dir.join("ung.csv")).unwrap();
        assert!(ung.contains("dataset,class,UNG,n_texts"));
        assert!(ung.contains("movie reviews,positive,"));
        assert!(ung.contains(",4\n"));
    }
}
