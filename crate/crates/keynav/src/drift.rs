//! Key-space drift: statistics comparing two key spaces over the same
//! vocabulary (typically before and after fine-tuning), query/key drift
//! along a navigation session, and the group probability-shift metric over
//! before/after NTP dumps.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::cluster::Clustering;
use crate::error::{Error, Result};
use crate::keyspace::{cosine_similarity, KeySpace, NtpRanking, QueryVector};

fn check_same_vocab(a: &KeySpace, b: &KeySpace) -> Result<()> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(Error::VocabSizeMismatch {
            vocab: a.len(),
            rows: b.len(),
        });
    }
    for (ta, tb) in a.tokens.iter().zip(&b.tokens) {
        if ta.text != tb.text {
            return Err(Error::VocabFormat(format!(
                "token {} differs between key spaces: {:?} vs {:?}",
                ta.id, ta.text, tb.text
            )));
        }
    }
    Ok(())
}

/// Cosine similarity between the two key rows of every token.
pub fn token_similarity(a: &KeySpace, b: &KeySpace) -> Result<Vec<f64>> {
    check_same_vocab(a, b)?;
    (0..a.len() as u32)
        .map(|id| cosine_similarity(a.key(id), b.key(id)))
        .collect()
}

/// The seeded pair stream used by [`pair_similarity_difference`]: `i != j`
/// within each pair, pairs sampled with replacement across draws.
pub fn sample_pairs(vocab: usize, n_pairs: usize, seed: u64) -> Result<Vec<(u32, u32)>> {
    if vocab < 2 {
        return Err(Error::InvalidArgument(
            "pair sampling needs at least 2 tokens".into(),
        ));
    }
    if n_pairs < 1 {
        return Err(Error::InvalidArgument("n_pairs must be >= 1".into()));
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let i = rng.random_range(0..vocab as u32);
        let j = loop {
            let j = rng.random_range(0..vocab as u32);
            if j != i {
                break j;
            }
        };
        pairs.push((i, j));
    }
    Ok(pairs)
}

/// For seeded random pairs (i, j): cos(a_i, a_j) - cos(b_i, b_j).
pub fn pair_similarity_difference(
    a: &KeySpace,
    b: &KeySpace,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_same_vocab(a, b)?;
    sample_pairs(a.len(), n_pairs, seed)?
        .into_iter()
        .map(|(i, j)| {
            Ok(cosine_similarity(a.key(i), a.key(j))? - cosine_similarity(b.key(i), b.key(j))?)
        })
        .collect()
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let mut end = pos + 1;
        while end < n && values[order[end]] == values[order[pos]] {
            end += 1;
        }
        // Positions pos..end hold equal values; their 1-based ranks average.
        let avg = (pos + 1 + end) as f64 / 2.0;
        for &idx in &order[pos..end] {
            ranks[idx] = avg;
        }
        pos = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument(
            "zero variance in correlation input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument(
            "spearman needs at least 3 observations".into(),
        ));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Distinct seeded token sample for [`similarity_rank_correlation`]. All
/// tokens, in id order, when `n_tokens` covers the vocabulary.
pub fn sample_tokens(vocab: usize, n_tokens: usize, seed: u64) -> Vec<u32> {
    if n_tokens >= vocab {
        return (0..vocab as u32).collect();
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut pool: Vec<u32> = (0..vocab as u32).collect();
    for i in 0..n_tokens {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(n_tokens);
    pool
}

/// For each sampled token: the similarity distribution against the whole
/// vocabulary in `a` and in `b`, reduced to one Spearman coefficient.
pub fn similarity_rank_correlation(
    a: &KeySpace,
    b: &KeySpace,
    n_tokens: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_same_vocab(a, b)?;
    if a.len() < 3 {
        return Err(Error::InvalidArgument(
            "rank correlation needs at least 3 tokens".into(),
        ));
    }
    let mut out = Vec::new();
    for t in sample_tokens(a.len(), n_tokens, seed) {
        let sims_a: Vec<f64> = (0..a.len() as u32)
            .map(|v| cosine_similarity(a.key(t), a.key(v)))
            .collect::<Result<_>>()?;
        let sims_b: Vec<f64> = (0..b.len() as u32)
            .map(|v| cosine_similarity(b.key(t), b.key(v)))
            .collect::<Result<_>>()?;
        out.push(spearman(&sims_a, &sims_b)?);
    }
    Ok(out)
}

/// One navigated query compared against the original query and its top keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryKeyDrift {
    /// Position of the query in the session (0 = the original).
    pub index: usize,
    pub cos_to_original: f64,
    pub mean_cos_to_top_keys: f64,
}

/// Per navigated query: cosine to the original query and mean cosine to the
/// original top keys, emitted as distribution samples for plotting.
pub fn query_key_drift(
    original: &QueryVector,
    original_top_keys: &[Vec<f64>],
    new_queries: &[QueryVector],
) -> Result<Vec<QueryKeyDrift>> {
    if original_top_keys.is_empty() {
        return Err(Error::InvalidArgument("no top keys given".into()));
    }
    if new_queries.is_empty() {
        return Err(Error::InvalidArgument("no navigated queries given".into()));
    }
    let mean_to_keys = |q: &QueryVector| -> Result<f64> {
        let mut sum = 0.0;
        for key in original_top_keys {
            sum += cosine_similarity(&q.values, key)?;
        }
        Ok(sum / original_top_keys.len() as f64)
    };
    new_queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            Ok(QueryKeyDrift {
                index: i + 1,
                cos_to_original: cosine_similarity(&q.values, &original.values)?,
                mean_cos_to_top_keys: mean_to_keys(q)?,
            })
        })
        .collect()
}

/// Probability-mass shift of two token groups between a before and an after
/// distribution.
///
/// Over the top-`window` tokens of `before` (the trained token excluded):
/// the group sharing the trained token's cluster, and the group in
/// `correct_set`. Each delta is the after-minus-before sum of
/// probabilities. Both rankings must cover the full vocabulary.
pub fn group_probability_shift(
    before: &NtpRanking,
    after: &NtpRanking,
    trained_token: u32,
    clustering: &Clustering,
    correct_set: &HashSet<u32>,
    window: usize,
) -> Result<(f64, f64)> {
    if before.truncated_at.is_some() || after.truncated_at.is_some() {
        return Err(Error::InvalidArgument(
            "group probability shift needs full-vocabulary rankings".into(),
        ));
    }
    if before.entries.len() != after.entries.len() {
        return Err(Error::VocabSizeMismatch {
            vocab: before.entries.len(),
            rows: after.entries.len(),
        });
    }
    let vocab = before.entries.len();
    let mut after_prob = vec![f64::NAN; vocab];
    for e in &after.entries {
        after_prob[e.token_id as usize] = e.probability;
    }
    let trained_cluster = clustering.cluster_of(trained_token)?;

    let mut delta_in_cluster = 0.0;
    let mut delta_correct = 0.0;
    for e in before.entries.iter().take(window) {
        if e.token_id == trained_token {
            continue;
        }
        let delta = after_prob[e.token_id as usize] - e.probability;
        if clustering.cluster_of(e.token_id)? == trained_cluster {
            delta_in_cluster += delta;
        }
        if correct_set.contains(&e.token_id) {
            delta_correct += delta;
        }
    }
    Ok((delta_in_cluster, delta_correct))
}

/// The three paired-key-space comparison distributions plus the sampling
/// parameters that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReport {
    pub token_similarity: Vec<f64>,
    pub pair_delta: Vec<f64>,
    pub rank_correlation: Vec<f64>,
    pub n_pairs: usize,
    pub n_tokens: usize,
    pub seed: u64,
    /// How pairs were drawn; recorded because the deltas are a sample.
    pub pair_sampling: String,
}

pub fn drift_report(
    a: &KeySpace,
    b: &KeySpace,
    n_pairs: usize,
    n_tokens: usize,
    seed: u64,
) -> Result<DriftReport> {
    Ok(DriftReport {
        token_similarity: token_similarity(a, b)?,
        pair_delta: pair_similarity_difference(a, b, n_pairs, seed)?,
        rank_correlation: similarity_rank_correlation(a, b, n_tokens, seed.wrapping_add(1))?,
        n_pairs,
        n_tokens,
        seed,
        pair_sampling: "with-replacement, i != j".to_string(),
    })
}

/// One row per sample: metric, sample index, value.
pub fn write_drift_csv(path: &Path, report: &DriftReport) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "metric,index,value")?;
    for (name, values) in [
        ("token_similarity", &report.token_similarity),
        ("pair_delta", &report.pair_delta),
        ("rank_correlation", &report.rank_correlation),
    ] {
        for (i, v) in values.iter().enumerate() {
            writeln!(out, "{name},{i},{v}")?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub p05: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Result<DistributionSummary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty distribution".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |p: f64| -> f64 {
        let idx = ((p / 100.0) * (sorted.len() - 1) as f64).round() as usize;
        sorted[idx]
    };
    Ok(DistributionSummary {
        n: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        min: sorted[0],
        p05: pct(5.0),
        p25: pct(25.0),
        p50: pct(50.0),
        p75: pct(75.0),
        p95: pct(95.0),
        max: sorted[sorted.len() - 1],
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftSummary {
    pub token_similarity: DistributionSummary,
    pub pair_delta: DistributionSummary,
    pub rank_correlation: DistributionSummary,
    pub n_pairs: usize,
    pub n_tokens: usize,
    pub seed: u64,
    pub pair_sampling: String,
}

pub fn write_drift_summary(path: &Path, report: &DriftReport) -> Result<()> {
    let summary = DriftSummary {
        token_similarity: summarize(&report.token_similarity)?,
        pair_delta: summarize(&report.pair_delta)?,
        rank_correlation: summarize(&report.rank_correlation)?,
        n_pairs: report.n_pairs,
        n_tokens: report.n_tokens,
        seed: report.seed,
        pair_sampling: report.pair_sampling.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}
