//! OpenAI-compatible HTTP backend.
//!
//! Talks to `{endpoint}/v1/completions` and `{endpoint}/v1/chat/completions`.
//! Requests are retried with exponential backoff on transport errors and
//! 429/5xx responses, and an in-process gate keeps at most `max_in_flight`
//! requests on the wire at once.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use crate::backend::{Backend, BackendConfig, Candidate, CandidateSet, ChatMessage, CompletionParams};
use crate::error::{Error, Result};

/// Counting semaphore; std has none and this needs ~20 lines.
struct Gate {
    slots: Mutex<usize>,
    cond: Condvar,
}

impl Gate {
    fn new(slots: usize) -> Self {
        Self {
            slots: Mutex::new(slots),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut slots = self.slots.lock().unwrap();
        while *slots == 0 {
            slots = self.cond.wait(slots).unwrap();
        }
        *slots -= 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.gate.slots.lock().unwrap() += 1;
        self.gate.cond.notify_one();
    }
}

pub struct HttpBackend {
    cfg: BackendConfig,
    base_url: String,
    client: reqwest::blocking::Client,
    gate: Gate,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self> {
        cfg.validate()?;
        let base_url = cfg
            .endpoint_url
            .clone()
            .expect("validated")
            .trim_end_matches('/')
            .to_string();
        let api_key = cfg
            .api_key_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Backend {
                attempts: 0,
                message: format!("client build failed: {e}"),
            })?;
        let gate = Gate::new(cfg.max_in_flight);
        Ok(Self {
            cfg,
            base_url,
            client,
            gate,
            api_key,
        })
    }

    /// POST with retry/backoff. Returns the parsed JSON body.
    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = format!("{}{path}", self.base_url);
        let attempts = self.cfg.retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 << (attempt - 1).min(6)));
            }
            let _slot = self.gate.acquire();
            let mut request = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return response.json().map_err(|e| Error::Backend {
                            attempts: attempt + 1,
                            message: format!("invalid JSON response: {e}"),
                        });
                    }
                    let text = response.text().unwrap_or_default();
                    last_error = format!("{status}: {}", text.chars().take(300).collect::<String>());
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable {
                        return Err(Error::Backend {
                            attempts: attempt + 1,
                            message: last_error,
                        });
                    }
                }
                Err(e) => {
                    last_error = e.to_string();
                }
            }
        }
        Err(Error::Backend {
            attempts,
            message: last_error,
        })
    }

    fn completion_body(
        &self,
        prompt: &str,
        params: &CompletionParams,
        logprobs: Option<usize>,
    ) -> Value {
        let mut body = json!({
            "model": self.cfg.model,
            "prompt": prompt,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
        });
        if !params.stop.is_empty() {
            body["stop"] = json!(params.stop);
        }
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        if let Some(n) = logprobs {
            body["logprobs"] = json!(n);
        }
        body
    }
}

impl Backend for HttpBackend {
    fn next_token_candidates(&self, context: &str, top_n: usize) -> Result<CandidateSet> {
        if top_n < 1 {
            return Err(Error::InvalidArgument("top_n must be >= 1".into()));
        }
        let params = CompletionParams {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 1,
            stop: Vec::new(),
            seed: None,
        };
        let body = self.completion_body(context, &params, Some(top_n));
        let reply = self.post("/v1/completions", &body)?;
        let top = reply["choices"][0]["logprobs"]["top_logprobs"][0]
            .as_object()
            .ok_or_else(|| Error::Backend {
                attempts: 1,
                message: "response carries no top_logprobs".into(),
            })?;
        let mut candidates: Vec<Candidate> = top
            .iter()
            .map(|(text, lp)| Candidate {
                text: text.clone(),
                token_id: None,
                logprob: lp.as_f64().unwrap_or(f64::NEG_INFINITY),
            })
            .collect();
        candidates.sort_by(|a, b| {
            b.logprob
                .partial_cmp(&a.logprob)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.text.cmp(&b.text))
        });
        if candidates.len() < top_n {
            return Err(Error::InsufficientCandidates {
                requested: top_n,
                available: candidates.len(),
            });
        }
        candidates.truncate(top_n);
        Ok(CandidateSet {
            context: context.to_string(),
            candidates,
            complete: false,
        })
    }

    fn complete(
        &self,
        context: &str,
        forced_prefix: &str,
        params: &CompletionParams,
    ) -> Result<String> {
        // First-token forcing over the wire is plain string concatenation of
        // the candidate's surface text; only the offline kinds force exact
        // token ids.
        let prompt = format!("{context}{forced_prefix}");
        let body = self.completion_body(&prompt, params, None);
        let reply = self.post("/v1/completions", &body)?;
        let text = reply["choices"][0]["text"].as_str().ok_or_else(|| Error::Backend {
            attempts: 1,
            message: "response carries no text".into(),
        })?;
        Ok(format!("{forced_prefix}{text}"))
    }

    fn chat(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String> {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
        });
        if !params.stop.is_empty() {
            body["stop"] = json!(params.stop);
        }
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        let reply = self.post("/v1/chat/completions", &body)?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Backend {
                attempts: 1,
                message: "response carries no message content".into(),
            })
    }

    fn name(&self) -> String {
        format!("http:{}", self.cfg.model)
    }
}
