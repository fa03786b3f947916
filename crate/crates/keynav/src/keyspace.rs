//! The vocabulary key space: token vocabulary plus the |V| x D key matrix,
//! and the dot-product/softmax next-token-prediction math on top of it.
//!
//! Logits are pure dot products between a query vector and the key rows (no
//! bias term); probabilities come from a softmax over the full vocabulary.
//! Ties in any ranking are broken by ascending token id so reports are
//! deterministic.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{self, Matrix};

/// One vocabulary entry. `text` is the raw surface string from the vocab
/// file; byte-level markers are only translated for display.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub text: String,
}

impl Token {
    /// Surface text with byte-level BPE markers decoded (e.g. "Ġ" becomes a
    /// leading space, "Ċ" a newline). The stored `text` is never modified.
    pub fn display_text(&self) -> String {
        decode_byte_markers(&self.text)
    }
}

/// Translate the shifted code points of the GPT-2 byte alphabet back to the
/// bytes they stand for. Code point 256+i maps to the i-th byte excluded
/// from the printable alphabet (0..=32, 127..=160, 173); anything else is
/// left untouched.
pub fn decode_byte_markers(text: &str) -> String {
    fn excluded_byte(index: u32) -> u8 {
        if index < 33 {
            index as u8
        } else if index < 67 {
            (127 + index - 33) as u8
        } else {
            173
        }
    }
    text.chars()
        .map(|c| {
            let cp = c as u32;
            if (256..256 + 68).contains(&cp) {
                char::from(excluded_byte(cp - 256))
            } else {
                c
            }
        })
        .collect()
}

/// Token vocabulary plus the |V| x D key (unembedding) matrix. Immutable
/// after load and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySpace {
    pub tokens: Vec<Token>,
    pub matrix: Matrix,
}

impl KeySpace {
    pub fn new(tokens: Vec<Token>, matrix: Matrix) -> Result<Self> {
        if matrix.rows != tokens.len() {
            return Err(Error::VocabSizeMismatch {
                vocab: tokens.len(),
                rows: matrix.rows,
            });
        }
        if matrix.cols == 0 {
            return Err(Error::InvalidArgument("key dimension must be > 0".into()));
        }
        if matrix.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("key matrix".into()));
        }
        for (i, t) in tokens.iter().enumerate() {
            if t.id as usize != i {
                return Err(Error::VocabFormat(format!(
                    "token ids must be contiguous from 0; found id {} at position {i}",
                    t.id
                )));
            }
        }
        Ok(Self { tokens, matrix })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols
    }

    /// Key row of token `id`.
    pub fn key(&self, id: u32) -> &[f64] {
        self.matrix.row(id as usize)
    }

    pub fn token_id(&self, text: &str) -> Option<u32> {
        self.tokens.iter().find(|t| t.text == text).map(|t| t.id)
    }

    /// Persist the key matrix as a tensor-container file.
    pub fn save_matrix(&self, path: &Path, tensor_name: &str) -> Result<()> {
        tensor::write_matrix_file(path, tensor_name, &self.matrix)
    }
}

/// Where a query vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuerySource {
    HiddenState,
    RecoveredFromLogits,
    Synthetic,
}

/// A length-D vector to be dotted against the key rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryVector {
    pub values: Vec<f64>,
    pub source: QuerySource,
}

impl QueryVector {
    pub fn synthetic(values: Vec<f64>) -> Self {
        Self {
            values,
            source: QuerySource::Synthetic,
        }
    }
}

/// One ranked next-token candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub token_id: u32,
    pub logit: f64,
    pub probability: f64,
    /// 1-based rank in the full ordering.
    pub rank: u32,
}

/// A context's ranked next-token candidates. Entries are sorted by logit
/// descending with ties broken by ascending token id; probabilities are
/// always softmax over the full vocabulary, even when the entry list is
/// truncated to the top N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtpRanking {
    pub context: String,
    pub entries: Vec<RankedToken>,
    /// `None` means the full vocabulary is listed.
    pub truncated_at: Option<usize>,
}

impl NtpRanking {
    /// Build a ranking from raw logits over the full vocabulary.
    pub fn from_logits(context: &str, logits: &[f64], top_n: Option<usize>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidArgument("empty logit vector".into()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        if let Some(n) = top_n {
            if n < 1 || n > logits.len() {
                return Err(Error::InvalidArgument(format!(
                    "top_n {n} out of range 1..={}",
                    logits.len()
                )));
            }
        }

        // Softmax over the full vocabulary, max-shifted for stability.
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();

        let mut order: Vec<u32> = (0..logits.len() as u32).collect();
        order.sort_by(|&a, &b| {
            logits[b as usize]
                .partial_cmp(&logits[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });

        let keep = top_n.unwrap_or(logits.len());
        let entries = order
            .iter()
            .take(keep)
            .enumerate()
            .map(|(i, &id)| RankedToken {
                token_id: id,
                logit: logits[id as usize],
                probability: exps[id as usize] / total,
                rank: (i + 1) as u32,
            })
            .collect();
        Ok(Self {
            context: context.to_string(),
            entries,
            truncated_at: top_n,
        })
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.token_id).collect()
    }
}

/// Standard cosine similarity. Symmetric and scale-invariant.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = linalg::norm(a);
    let nb = linalg::norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((linalg::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Next-token prediction for a query: logit_i = dot(query, key_i), softmax
/// over the full vocabulary, entries truncated to `top_n` when given.
pub fn ntp_from_query(
    query: &QueryVector,
    ks: &KeySpace,
    top_n: Option<usize>,
    context: &str,
) -> Result<NtpRanking> {
    if query.values.len() != ks.dim() {
        return Err(Error::DimensionMismatch {
            expected: ks.dim(),
            got: query.values.len(),
        });
    }
    let logits: Vec<f64> = (0..ks.len())
        .map(|i| linalg::dot(&query.values, ks.matrix.row(i)))
        .collect();
    NtpRanking::from_logits(context, &logits, top_n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMetric {
    Dot,
    Cosine,
}

/// The `top_n` token ids nearest to `query` under the chosen metric, with
/// the same descending-score / ascending-id ordering as [`NtpRanking`].
pub fn nearest_keys(
    query: &QueryVector,
    ks: &KeySpace,
    top_n: usize,
    metric: SimilarityMetric,
) -> Result<Vec<u32>> {
    if query.values.len() != ks.dim() {
        return Err(Error::DimensionMismatch {
            expected: ks.dim(),
            got: query.values.len(),
        });
    }
    if top_n < 1 || top_n > ks.len() {
        return Err(Error::InvalidArgument(format!(
            "top_n {top_n} out of range 1..={}",
            ks.len()
        )));
    }
    let scores: Vec<f64> = match metric {
        SimilarityMetric::Dot => (0..ks.len())
            .map(|i| linalg::dot(&query.values, ks.matrix.row(i)))
            .collect(),
        SimilarityMetric::Cosine => (0..ks.len())
            .map(|i| cosine_similarity(&query.values, ks.matrix.row(i)))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut order: Vec<u32> = (0..ks.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(top_n);
    Ok(order)
}

/// Load a key space from a tensor-container file plus a vocab file.
///
/// The vocab file is either a JSON object mapping surface string to token id
/// (tokenizer-style) or a JSON array of strings indexed by id; the form is
/// auto-detected.
pub fn load_key_space(tensor_file: &Path, tensor_name: &str, vocab_file: &Path) -> Result<KeySpace> {
    let matrix = tensor::read_matrix(tensor_file, tensor_name)?;
    let tokens = load_vocab(vocab_file)?;
    KeySpace::new(tokens, matrix)
}

pub fn load_vocab(vocab_file: &Path) -> Result<Vec<Token>> {
    let raw = std::fs::read_to_string(vocab_file)?;
    parse_vocab(&raw)
}

fn parse_vocab(raw: &str) -> Result<Vec<Token>> {
    let value: serde_json::Value = serde_json::from_str(raw)
        .map_err(|e| Error::VocabFormat(format!("not valid JSON: {e}")))?;
    match value {
        serde_json::Value::Array(items) => {
            let mut tokens = Vec::with_capacity(items.len());
            for (i, item) in items.into_iter().enumerate() {
                let text = item
                    .as_str()
                    .ok_or_else(|| Error::VocabFormat(format!("entry {i} is not a string")))?
                    .to_string();
                tokens.push(Token { id: i as u32, text });
            }
            Ok(tokens)
        }
        serde_json::Value::Object(map) => {
            let mut by_id: BTreeMap<u64, String> = BTreeMap::new();
            for (text, id_value) in map {
                let id = id_value
                    .as_u64()
                    .ok_or_else(|| Error::VocabFormat(format!("id for {text:?} is not an integer")))?;
                if by_id.insert(id, text.clone()).is_some() {
                    return Err(Error::VocabFormat(format!("duplicate token id {id}")));
                }
            }
            let mut tokens = Vec::with_capacity(by_id.len());
            for (expect, (id, text)) in by_id.into_iter().enumerate() {
                if id != expect as u64 {
                    return Err(Error::VocabFormat(format!(
                        "token ids must be contiguous from 0; missing id {expect}"
                    )));
                }
                tokens.push(Token {
                    id: id as u32,
                    text,
                });
            }
            Ok(tokens)
        }
        _ => Err(Error::VocabFormat(
            "expected a JSON object or array".into(),
        )),
    }
}
