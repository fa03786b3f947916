//! Deterministic fixture backend: scripted candidates, continuations and
//! chat replies keyed by exact context strings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{render_messages, Backend, Candidate, CandidateSet, ChatMessage, CompletionParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureCandidate {
    pub text: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
}

/// Scripted continuations for one `context + forced_prefix` key: one greedy
/// variant and up to five sampled variants.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FixtureCompletion {
    #[serde(default)]
    pub greedy: Option<String>,
    #[serde(default)]
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FixtureData {
    /// context -> ordered candidate list.
    #[serde(default)]
    pub candidates: BTreeMap<String, Vec<FixtureCandidate>>,
    /// context + forced prefix -> scripted continuations.
    #[serde(default)]
    pub completions: BTreeMap<String, FixtureCompletion>,
    /// rendered chat messages -> reply.
    #[serde(default)]
    pub chat: BTreeMap<String, String>,
}

impl FixtureData {
    pub fn script_candidates(&mut self, context: &str, cands: Vec<FixtureCandidate>) {
        self.candidates.insert(context.to_string(), cands);
    }

    pub fn script_greedy(&mut self, key: &str, continuation: &str) {
        self.completions
            .entry(key.to_string())
            .or_default()
            .greedy = Some(continuation.to_string());
    }

    pub fn script_samples(&mut self, key: &str, samples: Vec<String>) {
        self.completions.entry(key.to_string()).or_default().samples = samples;
    }

    pub fn script_chat(&mut self, rendered: &str, reply: &str) {
        self.chat.insert(rendered.to_string(), reply.to_string());
    }
}

pub struct FixtureBackend {
    data: FixtureData,
}

impl FixtureBackend {
    pub fn new(data: FixtureData) -> Result<Self> {
        for (context, cands) in &data.candidates {
            let set = CandidateSet {
                context: context.clone(),
                candidates: cands
                    .iter()
                    .map(|c| Candidate {
                        text: c.text.clone(),
                        token_id: c.id,
                        logprob: c.logprob,
                    })
                    .collect(),
                complete: false,
            };
            set.validate()?;
        }
        Ok(Self { data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let data: FixtureData = serde_json::from_str(&raw)?;
        Self::new(data)
    }

    pub fn save(data: &FixtureData, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(data)?)?;
        Ok(())
    }
}

/// Truncate `text` at the first occurrence of any stop string.
fn apply_stops(text: &str, stops: &[String]) -> String {
    let mut cut = text.len();
    for stop in stops {
        if stop.is_empty() {
            continue;
        }
        if let Some(pos) = text.find(stop.as_str()) {
            cut = cut.min(pos);
        }
    }
    text[..cut].to_string()
}

impl Backend for FixtureBackend {
    fn next_token_candidates(&self, context: &str, top_n: usize) -> Result<CandidateSet> {
        if top_n < 1 {
            return Err(Error::InvalidArgument("top_n must be >= 1".into()));
        }
        let cands = self
            .data
            .candidates
            .get(context)
            .ok_or_else(|| Error::FixtureMiss(format!("no candidates for context {context:?}")))?;
        if cands.len() < top_n {
            return Err(Error::InsufficientCandidates {
                requested: top_n,
                available: cands.len(),
            });
        }
        Ok(CandidateSet {
            context: context.to_string(),
            candidates: cands[..top_n]
                .iter()
                .map(|c| Candidate {
                    text: c.text.clone(),
                    token_id: c.id,
                    logprob: c.logprob,
                })
                .collect(),
            complete: false,
        })
    }

    fn complete(
        &self,
        context: &str,
        forced_prefix: &str,
        params: &CompletionParams,
    ) -> Result<String> {
        let key = format!("{context}{forced_prefix}");
        let scripted = self
            .data
            .completions
            .get(&key)
            .ok_or_else(|| Error::FixtureMiss(format!("no completion for {key:?}")))?;
        let continuation = if params.temperature == 0.0 {
            scripted
                .greedy
                .as_ref()
                .ok_or_else(|| Error::FixtureMiss(format!("no greedy variant for {key:?}")))?
                .clone()
        } else {
            if scripted.samples.is_empty() {
                return Err(Error::FixtureMiss(format!("no sampled variants for {key:?}")));
            }
            let i = params.seed.unwrap_or(0) as usize % scripted.samples.len();
            scripted.samples[i].clone()
        };
        Ok(format!(
            "{forced_prefix}{}",
            apply_stops(&continuation, &params.stop)
        ))
    }

    fn chat(&self, messages: &[ChatMessage], _params: &CompletionParams) -> Result<String> {
        let rendered = render_messages(messages);
        self.data
            .chat
            .get(&rendered)
            .cloned()
            .ok_or_else(|| Error::FixtureMiss(format!("no chat reply for {rendered:?}")))
    }

    fn name(&self) -> String {
        "fixture".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend() -> FixtureBackend {
        let mut data = FixtureData::default();
        data.script_candidates(
            "Please show me some cities",
            vec![
                FixtureCandidate {
                    text: " Paris".into(),
                    logprob: -0.1,
                    id: None,
                },
                FixtureCandidate {
                    text: " P".into(),
                    logprob: -0.5,
                    id: None,
                },
                FixtureCandidate {
                    text: " Q".into(),
                    logprob: -2.0,
                    id: None,
                },
            ],
        );
        data.script_greedy("base P", "anda");
        data.script_samples(
            "base P",
            vec!["anda".into(), "aris".into(), "ost".into(), "ear".into(), "ine".into()],
        );
        data.script_chat("user: judge this", "Yes");
        FixtureBackend::new(data).unwrap()
    }

    #[test]
    fn candidates_are_a_table_lookup() {
        let b = backend();
        let set = b
            .next_token_candidates("Please show me some cities", 2)
            .unwrap();
        assert_eq!(set.candidates.len(), 2);
        assert_eq!(set.candidates[0].text, " Paris");
        assert_eq!(set.candidates[1].text, " P");
    }

    #[test]
    fn too_many_candidates_is_an_error() {
        let b = backend();
        match b.next_token_candidates("Please show me some cities", 4) {
            Err(Error::InsufficientCandidates {
                requested: 4,
                available: 3,
            }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn forced_prefix_is_prepended() {
        let b = backend();
        let out = b
            .complete("base", " P", &CompletionParams::greedy_entity())
            .unwrap();
        assert_eq!(out, " Panda");
    }

    #[test]
    fn greedy_is_deterministic_and_seed_picks_variant() {
        let b = backend();
        let p = CompletionParams::greedy_entity();
        assert_eq!(
            b.complete("base", " P", &p).unwrap(),
            b.complete("base", " P", &p).unwrap()
        );
        for i in 0..5u64 {
            let out = b.complete("base", " P", &CompletionParams::sampling(i)).unwrap();
            let expect = [" Panda", " Paris", " Post", " Pear", " Pine"][i as usize];
            assert_eq!(out, expect);
        }
    }

    #[test]
    fn stop_strings_truncate_continuations() {
        let mut data = FixtureData::default();
        data.script_greedy("q", "Panda. Also bears");
        let b = FixtureBackend::new(data).unwrap();
        assert_eq!(
            b.complete("q", "", &CompletionParams::greedy_entity()).unwrap(),
            "Panda"
        );
    }

    #[test]
    fn chat_scripted_and_miss() {
        let b = backend();
        let msg = [ChatMessage::user("judge this")];
        assert_eq!(
            b.chat(&msg, &CompletionParams::greedy_entity()).unwrap(),
            "Yes"
        );
        let miss = [ChatMessage::user("something else")];
        assert!(matches!(
            b.chat(&miss, &CompletionParams::greedy_entity()),
            Err(Error::FixtureMiss(_))
        ));
    }
}
