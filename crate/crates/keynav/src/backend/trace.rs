//! Request/response tracing and trace replay.
//!
//! A [`TracedBackend`] records every call as a JSON event; the event list
//! serializes to NDJSON and a [`ReplayBackend`] built from it reproduces the
//! same responses for the same requests, so a traced run can be replayed
//! offline with identical downstream results.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::{Backend, CandidateSet, ChatMessage, CompletionParams};
use crate::error::{Error, Result};

/// Render chat messages to a stable string key ("role: content" lines).
pub fn render_messages(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| format!("{}: {}", m.role, m.content))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub op: String,
    pub request: Value,
    pub response: Value,
}

/// Shared, append-only call log.
#[derive(Debug, Clone, Default)]
pub struct TraceLog {
    events: Arc<Mutex<Vec<TraceEvent>>>,
}

impl TraceLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, event: TraceEvent) {
        self.events.lock().unwrap().push(event);
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        let mut out = std::fs::File::create(path)?;
        for event in self.events() {
            serde_json::to_writer(&mut out, &event)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_ndjson(path: &Path) -> Result<Vec<TraceEvent>> {
        let file = std::fs::File::open(path)?;
        let mut events = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line)?);
        }
        Ok(events)
    }
}

/// Wraps any backend and records its traffic into a [`TraceLog`].
pub struct TracedBackend {
    inner: Box<dyn Backend>,
    log: TraceLog,
}

impl TracedBackend {
    pub fn new(inner: Box<dyn Backend>, log: TraceLog) -> Self {
        Self { inner, log }
    }

    pub fn log(&self) -> TraceLog {
        self.log.clone()
    }
}

fn params_value(params: &CompletionParams) -> Value {
    serde_json::to_value(params).unwrap_or(Value::Null)
}

impl Backend for TracedBackend {
    fn next_token_candidates(&self, context: &str, top_n: usize) -> Result<CandidateSet> {
        let request = json!({"context": context, "top_n": top_n});
        let result = self.inner.next_token_candidates(context, top_n);
        let response = match &result {
            Ok(set) => serde_json::to_value(set).unwrap_or(Value::Null),
            Err(e) => json!({"error": e.to_string()}),
        };
        self.log.record(TraceEvent {
            op: "candidates".into(),
            request,
            response,
        });
        result
    }

    fn complete(
        &self,
        context: &str,
        forced_prefix: &str,
        params: &CompletionParams,
    ) -> Result<String> {
        let request = json!({
            "context": context,
            "forced_prefix": forced_prefix,
            "params": params_value(params),
        });
        let result = self.inner.complete(context, forced_prefix, params);
        let response = match &result {
            Ok(text) => json!({"text": text}),
            Err(e) => json!({"error": e.to_string()}),
        };
        self.log.record(TraceEvent {
            op: "complete".into(),
            request,
            response,
        });
        result
    }

    fn chat(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String> {
        let request = json!({
            "messages": serde_json::to_value(messages).unwrap_or(Value::Null),
            "params": params_value(params),
        });
        let result = self.inner.chat(messages, params);
        let response = match &result {
            Ok(text) => json!({"text": text}),
            Err(e) => json!({"error": e.to_string()}),
        };
        self.log.record(TraceEvent {
            op: "chat".into(),
            request,
            response,
        });
        result
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}

/// Serves recorded responses back for identical requests. Repeated identical
/// requests consume recorded responses in order and stick to the last one
/// once exhausted.
pub struct ReplayBackend {
    by_request: Mutex<HashMap<(String, String), VecDeque<Value>>>,
}

impl ReplayBackend {
    pub fn from_events(events: Vec<TraceEvent>) -> Self {
        let mut by_request: HashMap<(String, String), VecDeque<Value>> = HashMap::new();
        for event in events {
            let key = (event.op.clone(), event.request.to_string());
            by_request.entry(key).or_default().push_back(event.response);
        }
        Self {
            by_request: Mutex::new(by_request),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_events(TraceLog::read_ndjson(path)?))
    }

    fn lookup(&self, op: &str, request: &Value) -> Result<Value> {
        let key = (op.to_string(), request.to_string());
        let mut map = self.by_request.lock().unwrap();
        let queue = map
            .get_mut(&key)
            .ok_or_else(|| Error::FixtureMiss(format!("trace miss for {op} {request}")))?;
        let value = if queue.len() > 1 {
            queue.pop_front().unwrap()
        } else {
            queue.front().cloned().unwrap()
        };
        if let Some(message) = value.get("error").and_then(Value::as_str) {
            return Err(Error::Backend {
                attempts: 1,
                message: message.to_string(),
            });
        }
        Ok(value)
    }
}

impl Backend for ReplayBackend {
    fn next_token_candidates(&self, context: &str, top_n: usize) -> Result<CandidateSet> {
        let request = json!({"context": context, "top_n": top_n});
        let value = self.lookup("candidates", &request)?;
        Ok(serde_json::from_value(value)?)
    }

    fn complete(
        &self,
        context: &str,
        forced_prefix: &str,
        params: &CompletionParams,
    ) -> Result<String> {
        let request = json!({
            "context": context,
            "forced_prefix": forced_prefix,
            "params": params_value(params),
        });
        let value = self.lookup("complete", &request)?;
        value["text"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::FixtureMiss("trace event carries no text".into()))
    }

    fn chat(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String> {
        let request = json!({
            "messages": serde_json::to_value(messages).unwrap_or(Value::Null),
            "params": params_value(params),
        });
        let value = self.lookup("chat", &request)?;
        value["text"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::FixtureMiss("trace event carries no text".into()))
    }

    fn name(&self) -> String {
        "replay".into()
    }
}
