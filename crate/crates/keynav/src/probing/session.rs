//! Session NDJSON: a header line with run metadata, one line per query
//! context, one line per probed path, shortfall lines, and a trailing
//! cursor line. Reading a written file reconstructs the session exactly.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probing::{Correctness, CorrectnessMode, IcnSession, ProbedPath, Shortfall, Strategy};

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum SessionLine {
    Header {
        category: String,
        strategy: Strategy,
        n_query: usize,
        n_key: usize,
        template_hash: String,
        correctness_mode: CorrectnessMode,
        seed: u64,
        backend_name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        judge_model: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clustering_ref: Option<String>,
    },
    Query {
        iteration: usize,
        context: String,
    },
    Path {
        category: String,
        strategy: Strategy,
        iteration: usize,
        within_query_rank: usize,
        first_token: String,
        answer: String,
        correct: Correctness,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        judge_raw: Vec<String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        mc_answers: Vec<String>,
    },
    Shortfall {
        iteration: usize,
        kept: usize,
    },
    Cursor {
        iterations_done: usize,
        completed: bool,
    },
    /// Run-provenance trailer appended by pipelines; carries no session
    /// state and is ignored on read.
    Provenance {
        config_hash: String,
        seed: u64,
    },
}

/// Append a provenance trailer to a written session file.
pub fn append_provenance(path: &Path, config_hash: &str, seed: u64) -> Result<()> {
    let mut file = std::fs::OpenOptions::new().append(true).open(path)?;
    serde_json::to_writer(
        &mut file,
        &SessionLine::Provenance {
            config_hash: config_hash.to_string(),
            seed,
        },
    )?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn write_session(path: &Path, session: &IcnSession) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    let mut emit = |line: &SessionLine| -> Result<()> {
        serde_json::to_writer(&mut out, line)?;
        out.write_all(b"\n")?;
        Ok(())
    };

    emit(&SessionLine::Header {
        category: session.category.clone(),
        strategy: session.strategy,
        n_query: session.n_query,
        n_key: session.n_key,
        template_hash: session.template_hash.clone(),
        correctness_mode: session.correctness_mode,
        seed: session.seed,
        backend_name: session.backend_name.clone(),
        judge_model: session.judge_model.clone(),
        clustering_ref: session.clustering_ref.clone(),
    })?;

    for iteration in 1..=session.iterations_done {
        if let Some(context) = session.queries.get(iteration - 1) {
            emit(&SessionLine::Query {
                iteration,
                context: context.clone(),
            })?;
        }
        for p in session.paths.iter().filter(|p| p.iteration == iteration) {
            emit(&SessionLine::Path {
                category: session.category.clone(),
                strategy: session.strategy,
                iteration: p.iteration,
                within_query_rank: p.within_query_rank,
                first_token: p.first_token.clone(),
                answer: p.answer.clone(),
                correct: p.correct.clone(),
                judge_raw: p.judge_raw.clone(),
                mc_answers: p.mc_answers.clone(),
            })?;
        }
        for s in session.shortfalls.iter().filter(|s| s.iteration == iteration) {
            emit(&SessionLine::Shortfall {
                iteration: s.iteration,
                kept: s.kept,
            })?;
        }
    }

    emit(&SessionLine::Cursor {
        iterations_done: session.iterations_done,
        completed: session.completed(),
    })?;
    Ok(())
}

pub fn read_session(path: &Path) -> Result<IcnSession> {
    let file = std::fs::File::open(path)?;
    let mut session: Option<IcnSession> = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SessionLine = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("session line {}: {e}", lineno + 1)))?;
        match parsed {
            SessionLine::Header {
                category,
                strategy,
                n_query,
                n_key,
                template_hash,
                correctness_mode,
                seed,
                backend_name,
                judge_model,
                clustering_ref,
            } => {
                session = Some(IcnSession {
                    category,
                    strategy,
                    n_query,
                    n_key,
                    template_hash,
                    correctness_mode,
                    seed,
                    backend_name,
                    judge_model,
                    clustering_ref,
                    queries: Vec::new(),
                    paths: Vec::new(),
                    shortfalls: Vec::new(),
                    iterations_done: 0,
                });
            }
            other => {
                let session = session
                    .as_mut()
                    .ok_or_else(|| Error::InvalidArgument("session file has no header line".into()))?;
                match other {
                    SessionLine::Header { .. } => unreachable!(),
                    SessionLine::Query { context, .. } => session.queries.push(context),
                    SessionLine::Path {
                        iteration,
                        within_query_rank,
                        first_token,
                        answer,
                        correct,
                        judge_raw,
                        mc_answers,
                        ..
                    } => session.paths.push(ProbedPath {
                        first_token,
                        answer,
                        correct,
                        iteration,
                        within_query_rank,
                        judge_raw,
                        mc_answers,
                    }),
                    SessionLine::Shortfall { iteration, kept } => {
                        session.shortfalls.push(Shortfall { iteration, kept })
                    }
                    SessionLine::Cursor {
                        iterations_done, ..
                    } => session.iterations_done = iterations_done,
                    SessionLine::Provenance { .. } => {}
                }
            }
        }
    }
    session.ok_or_else(|| Error::InvalidArgument("empty session file".into()))
}
