//! Offline logit-dump backend: NDJSON records of full logit vectors or
//! top-k (text, logprob) lists, keyed by exact context.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Candidate, CandidateSet, ChatMessage, CompletionParams};
use crate::error::{Error, Result};
use crate::keyspace::{NtpRanking, Token};

/// One dump line: either the full logit vector over the vocabulary or an
/// already-truncated top list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DumpRecord {
    Logits { context: String, logits: Vec<f64> },
    Top {
        context: String,
        top: Vec<(String, f64)>,
    },
}

impl DumpRecord {
    pub fn context(&self) -> &str {
        match self {
            DumpRecord::Logits { context, .. } | DumpRecord::Top { context, .. } => context,
        }
    }
}

pub fn read_dump(path: &Path) -> Result<Vec<DumpRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DumpRecord = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidArgument(format!("dump line {}: {e}", lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_dump(path: &Path, records: &[DumpRecord]) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub struct LogitDumpBackend {
    records: HashMap<String, DumpRecord>,
    vocab: Option<Vec<Token>>,
}

impl LogitDumpBackend {
    pub fn load(path: &Path) -> Result<Self> {
        let records = read_dump(path)?
            .into_iter()
            .map(|r| (r.context().to_string(), r))
            .collect();
        Ok(Self {
            records,
            vocab: None,
        })
    }

    /// Attach a vocabulary so full-logit records report token texts instead
    /// of placeholder ids.
    pub fn with_vocab(mut self, vocab: Vec<Token>) -> Self {
        self.vocab = Some(vocab);
        self
    }

    fn token_text(&self, id: u32) -> String {
        match &self.vocab {
            Some(v) => v
                .get(id as usize)
                .map(|t| t.text.clone())
                .unwrap_or_else(|| format!("<{id}>")),
            None => format!("<{id}>"),
        }
    }

    /// The full NTP ranking for a context; only available for full-logit
    /// records.
    pub fn ranking(&self, context: &str) -> Result<NtpRanking> {
        match self.records.get(context) {
            Some(DumpRecord::Logits { logits, .. }) => {
                NtpRanking::from_logits(context, logits, None)
            }
            Some(DumpRecord::Top { .. }) => Err(Error::InvalidArgument(format!(
                "dump record for {context:?} has no full logits"
            ))),
            None => Err(Error::DumpMiss(context.to_string())),
        }
    }
}

impl Backend for LogitDumpBackend {
    fn next_token_candidates(&self, context: &str, top_n: usize) -> Result<CandidateSet> {
        if top_n < 1 {
            return Err(Error::InvalidArgument("top_n must be >= 1".into()));
        }
        let record = self
            .records
            .get(context)
            .ok_or_else(|| Error::DumpMiss(context.to_string()))?;
        match record {
            DumpRecord::Logits { logits, .. } => {
                if logits.len() < top_n {
                    return Err(Error::InsufficientCandidates {
                        requested: top_n,
                        available: logits.len(),
                    });
                }
                let ranking = NtpRanking::from_logits(context, logits, Some(top_n))?;
                let candidates = ranking
                    .entries
                    .iter()
                    .map(|e| Candidate {
                        text: self.token_text(e.token_id),
                        token_id: Some(e.token_id),
                        logprob: e.probability.ln(),
                    })
                    .collect();
                Ok(CandidateSet {
                    context: context.to_string(),
                    candidates,
                    complete: top_n == logits.len(),
                })
            }
            DumpRecord::Top { top, .. } => {
                if top.len() < top_n {
                    return Err(Error::InsufficientCandidates {
                        requested: top_n,
                        available: top.len(),
                    });
                }
                Ok(CandidateSet {
                    context: context.to_string(),
                    candidates: top[..top_n]
                        .iter()
                        .map(|(text, logprob)| Candidate {
                            text: text.clone(),
                            token_id: None,
                            logprob: *logprob,
                        })
                        .collect(),
                    complete: false,
                })
            }
        }
    }

    fn complete(&self, _: &str, _: &str, _: &CompletionParams) -> Result<String> {
        Err(Error::Unsupported("logit-dump backend cannot generate text"))
    }

    fn chat(&self, _: &[ChatMessage], _: &CompletionParams) -> Result<String> {
        Err(Error::Unsupported("logit-dump backend cannot chat"))
    }

    fn name(&self) -> String {
        "logit-dump".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ndjson");
        let p2 = dir.path().join("b.ndjson");
        let records = vec![
            DumpRecord::Logits {
                context: "ctx a".into(),
                logits: vec![1.5, -2.0, 0.25],
            },
            DumpRecord::Top {
                context: "ctx b".into(),
                top: vec![(" P".into(), -0.5), (" Q".into(), -1.5)],
            },
        ];
        write_dump(&p1, &records).unwrap();
        let loaded = read_dump(&p1).unwrap();
        assert_eq!(loaded, records);
        write_dump(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn full_logit_records_rank_like_the_keyspace_math() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndjson");
        let logits = vec![0.3, 2.0, 2.0, -1.0];
        write_dump(
            &path,
            &[DumpRecord::Logits {
                context: "c".into(),
                logits: logits.clone(),
            }],
        )
        .unwrap();
        let backend = LogitDumpBackend::load(&path).unwrap();
        let set = backend.next_token_candidates("c", 4).unwrap();
        let ranking = NtpRanking::from_logits("c", &logits, None).unwrap();
        let got: Vec<u32> = set.candidates.iter().map(|c| c.token_id.unwrap()).collect();
        assert_eq!(got, ranking.token_ids());
        assert!(set.complete);
        // Logprobs match full-softmax probabilities.
        for (cand, entry) in set.candidates.iter().zip(&ranking.entries) {
            assert!((cand.logprob - entry.probability.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_context_and_unsupported_ops() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndjson");
        write_dump(&path, &[]).unwrap();
        let backend = LogitDumpBackend::load(&path).unwrap();
        assert!(matches!(
            backend.next_token_candidates("nope", 1),
            Err(Error::DumpMiss(_))
        ));
        assert!(matches!(
            backend.complete("a", "b", &CompletionParams::greedy_entity()),
            Err(Error::Unsupported(_))
        ));
    }
}
