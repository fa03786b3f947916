//! Uniform language-model access: next-token candidates, forced-prefix
//! continuation, and chat. Three implementations share the contract — an
//! OpenAI-compatible HTTP client, an offline logit-dump reader, and a
//! deterministic fixture for tests and desk runs.

mod dump;
mod fixture;
mod http;
mod recover;
mod trace;

pub use dump::{read_dump, write_dump, DumpRecord, LogitDumpBackend};
pub use fixture::{FixtureBackend, FixtureCandidate, FixtureCompletion, FixtureData};
pub use http::HttpBackend;
pub use recover::{recover_query, LogitObservations, RecoveredQuery};
pub use trace::{render_messages, ReplayBackend, TraceEvent, TraceLog, TracedBackend};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Http,
    LogitDump,
    Fixture,
}

/// How to reach a model. `api_key_env` names an environment variable; the
/// key itself never appears in config files or reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Path of the dump or fixture file for the offline kinds.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub retries: usize,
}

fn default_timeout() -> u64 {
    60
}
fn default_max_in_flight() -> usize {
    4
}
fn default_retries() -> usize {
    2
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight < 1 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        match self.kind {
            BackendKind::Http => {
                if self.endpoint_url.is_none() {
                    return Err(Error::Config("http backend requires endpoint_url".into()));
                }
            }
            BackendKind::LogitDump | BackendKind::Fixture => {
                if self.path.is_none() {
                    return Err(Error::Config(format!(
                        "{:?} backend requires a file path",
                        self.kind
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn fixture(path: PathBuf) -> Self {
        Self {
            kind: BackendKind::Fixture,
            endpoint_url: None,
            model: "fixture".into(),
            api_key_env: None,
            path: Some(path),
            timeout_secs: default_timeout(),
            max_in_flight: default_max_in_flight(),
            retries: default_retries(),
        }
    }

    pub fn http(endpoint_url: &str, model: &str) -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint_url: Some(endpoint_url.to_string()),
            model: model.to_string(),
            api_key_env: None,
            path: None,
            timeout_secs: default_timeout(),
            max_in_flight: default_max_in_flight(),
            retries: default_retries(),
        }
    }
}

/// Decoding controls passed through to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub stop: Vec<String>,
    pub seed: Option<u64>,
}

impl CompletionParams {
    /// Greedy decode for short entity answers: stop at newline or period,
    /// at most 24 tokens.
    pub fn greedy_entity() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 24,
            stop: vec!["\n".into(), ".".into()],
            seed: None,
        }
    }

    /// Greedy decode for chain-of-thought generations.
    pub fn greedy_cot() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 512,
            stop: Vec::new(),
            seed: None,
        }
    }

    /// Sentence-level decode for open-ended generation.
    pub fn greedy_sentence() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 64,
            stop: vec!["\n".into()],
            seed: None,
        }
    }

    /// Monte-Carlo sampling profile: temperature 1.0, top_p 1.0, pinned seed.
    pub fn sampling(seed: u64) -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 24,
            stop: vec!["\n".into(), ".".into()],
            seed: Some(seed),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_stop(mut self, stop: Vec<String>) -> Self {
        self.stop = stop;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: &str) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn system(content: &str) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }
}

/// One next-token candidate as observed from a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_id: Option<u32>,
    pub logprob: f64,
}

/// The observable slice of a next-token distribution for one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub context: String,
    /// Ordered by non-increasing logprob; texts are distinct.
    pub candidates: Vec<Candidate>,
    /// True iff the candidates cover the full vocabulary.
    pub complete: bool,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<()> {
        for pair in self.candidates.windows(2) {
            if pair[1].logprob > pair[0].logprob {
                return Err(Error::InvalidArgument(
                    "candidate logprobs must be non-increasing".into(),
                ));
            }
        }
        let mut texts: Vec<&str> = self.candidates.iter().map(|c| c.text.as_str()).collect();
        texts.sort_unstable();
        texts.dedup();
        if texts.len() != self.candidates.len() {
            return Err(Error::InvalidArgument(
                "candidate texts must be distinct".into(),
            ));
        }
        Ok(())
    }
}

/// The language-model access contract. Implementations are safe for
/// concurrent calls; temperature-0 calls are idempotent.
pub trait Backend: Send + Sync {
    /// The top `top_n` next-token candidates for a context, in descending
    /// logprob order.
    fn next_token_candidates(&self, context: &str, top_n: usize) -> Result<CandidateSet>;

    /// Continuation of `context` with `forced_prefix` concatenated before
    /// generation. The returned text begins with `forced_prefix`.
    fn complete(&self, context: &str, forced_prefix: &str, params: &CompletionParams)
        -> Result<String>;

    /// Assistant reply for a chat exchange.
    fn chat(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String>;

    fn name(&self) -> String;
}

/// Build a backend from its config.
pub fn open_backend(cfg: &BackendConfig) -> Result<Box<dyn Backend>> {
    cfg.validate()?;
    match cfg.kind {
        BackendKind::Fixture => Ok(Box::new(FixtureBackend::load(
            cfg.path.as_ref().expect("validated"),
        )?)),
        BackendKind::LogitDump => Ok(Box::new(LogitDumpBackend::load(
            cfg.path.as_ref().expect("validated"),
        )?)),
        BackendKind::Http => Ok(Box::new(HttpBackend::new(cfg.clone())?)),
    }
}

/// Fetch up to `top_n` candidates, falling back to the backend's reported
/// maximum when the request overshoots what it can serve.
pub fn fetch_candidates_capped(
    backend: &dyn Backend,
    context: &str,
    top_n: usize,
) -> Result<CandidateSet> {
    match backend.next_token_candidates(context, top_n) {
        Err(Error::InsufficientCandidates { available, .. }) if available > 0 => {
            backend.next_token_candidates(context, available)
        }
        other => other,
    }
}
