//! Key-space clustering and the in-top-cluster / out-of-top-cluster
//! analysis built on it.
//!
//! The clusterer is Lloyd's algorithm with k-means++ seeding driven by a
//! seeded PCG generator, so a `(inputs, seed)` pair always reproduces the
//! same assignment. An optional balanced mode caps cluster sizes with a
//! greedy assignment pass. Middle-ranked tokens (ranks K+1..N of a ranking)
//! are split by whether they share a cluster with any top-K token, and a
//! cluster-penalty rerank adds each token's in-cluster rank to its own.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyspace::{KeySpace, NtpRanking, RankedToken};

const MAGIC: &[u8; 4] = b"KNCL";
const FORMAT_VERSION: u16 = 1;

/// Points per parallel chunk in the assignment step. Chunk partials are
/// combined in index order so parallel and serial runs are bit-identical.
const ASSIGN_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KmeansMode {
    Lloyd,
    Balanced,
}

impl KmeansMode {
    fn to_u8(self) -> u8 {
        match self {
            KmeansMode::Lloyd => 0,
            KmeansMode::Balanced => 1,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(KmeansMode::Lloyd),
            1 => Ok(KmeansMode::Balanced),
            other => Err(Error::InvalidArgument(format!("unknown kmeans mode {other}"))),
        }
    }
}

/// A partition of the vocabulary into `k` clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    /// Cluster id per token, indexed by token id.
    pub assignment: Vec<u32>,
    /// k x dim row-major centroid matrix.
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub seed: u64,
    pub inertia: f64,
    pub iterations_run: usize,
    pub mode: KmeansMode,
    /// Inertia after each assignment step, for convergence inspection.
    /// Not persisted.
    pub inertia_trace: Vec<f64>,
}

impl Clustering {
    pub fn cluster_of(&self, token_id: u32) -> Result<u32> {
        self.assignment
            .get(token_id as usize)
            .copied()
            .ok_or(Error::UnassignedToken(token_id))
    }

    pub fn centroid(&self, cluster: usize) -> &[f64] {
        &self.centroids[cluster * self.dim..(cluster + 1) * self.dim]
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// k-means++ seeding: first centroid uniform, the rest sampled with
/// probability proportional to squared distance from the nearest chosen one.
fn plus_plus_init(ks: &KeySpace, k: usize, rng: &mut Pcg64) -> Vec<f64> {
    let n = ks.len();
    let dim = ks.dim();
    let mut centroids = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; n];

    let first = rng.random_range(0..n);
    centroids.extend_from_slice(ks.matrix.row(first));
    chosen[first] = true;

    let mut dist2: Vec<f64> = (0..n)
        .map(|i| squared_distance(ks.matrix.row(i), ks.matrix.row(first)))
        .collect();

    for _ in 1..k {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            // All remaining mass is zero (duplicate points); take the first
            // index not yet chosen.
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        let row = ks.matrix.row(pick);
        centroids.extend_from_slice(row);
        for (i, d2) in dist2.iter_mut().enumerate() {
            let d = squared_distance(ks.matrix.row(i), row);
            if d < *d2 {
                *d2 = d;
            }
        }
    }
    centroids
}

struct ChunkPartial {
    assignment: Vec<u32>,
    sums: Vec<f64>,
    counts: Vec<usize>,
    inertia: f64,
}

/// Nearest-centroid assignment over fixed chunks; ties go to the lower
/// cluster index. Returns `(assignment, per-cluster sums, counts, inertia)`.
fn assign_points(
    ks: &KeySpace,
    centroids: &[f64],
    k: usize,
) -> (Vec<u32>, Vec<f64>, Vec<usize>, f64) {
    let n = ks.len();
    let dim = ks.dim();
    let chunk_ranges: Vec<(usize, usize)> = (0..n)
        .step_by(ASSIGN_CHUNK)
        .map(|start| (start, (start + ASSIGN_CHUNK).min(n)))
        .collect();

    let partials: Vec<ChunkPartial> = chunk_ranges
        .par_iter()
        .map(|&(start, end)| {
            let mut assignment = Vec::with_capacity(end - start);
            let mut sums = vec![0.0; k * dim];
            let mut counts = vec![0usize; k];
            let mut inertia = 0.0;
            for i in start..end {
                let row = ks.matrix.row(i);
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for c in 0..k {
                    let d = squared_distance(row, &centroids[c * dim..(c + 1) * dim]);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                assignment.push(best as u32);
                counts[best] += 1;
                inertia += best_d;
                for (s, v) in sums[best * dim..(best + 1) * dim].iter_mut().zip(row) {
                    *s += v;
                }
            }
            ChunkPartial {
                assignment,
                sums,
                counts,
                inertia,
            }
        })
        .collect();

    // Combine in chunk index order for bit-identical reductions.
    let mut assignment = Vec::with_capacity(n);
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    let mut inertia = 0.0;
    for p in partials {
        assignment.extend_from_slice(&p.assignment);
        for (s, v) in sums.iter_mut().zip(&p.sums) {
            *s += v;
        }
        for (c, v) in counts.iter_mut().zip(&p.counts) {
            *c += v;
        }
        inertia += p.inertia;
    }
    (assignment, sums, counts, inertia)
}

/// Capacity-limited greedy assignment for balanced mode: points in token-id
/// order go to the nearest centroid that still has room (ceil(n/k) slots).
fn assign_balanced(
    ks: &KeySpace,
    centroids: &[f64],
    k: usize,
) -> (Vec<u32>, Vec<f64>, Vec<usize>, f64) {
    let n = ks.len();
    let dim = ks.dim();
    let cap = n.div_ceil(k);
    let mut assignment = Vec::with_capacity(n);
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    let mut inertia = 0.0;
    for i in 0..n {
        let row = ks.matrix.row(i);
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            if counts[c] >= cap {
                continue;
            }
            let d = squared_distance(row, &centroids[c * dim..(c + 1) * dim]);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignment.push(best as u32);
        counts[best] += 1;
        inertia += best_d;
        for (s, v) in sums[best * dim..(best + 1) * dim].iter_mut().zip(row) {
            *s += v;
        }
    }
    (assignment, sums, counts, inertia)
}

/// Lloyd's k-means over the key space.
///
/// Stops when the inertia improvement between assignment steps drops below
/// `tol` or after `max_iters` iterations. Empty clusters are re-seeded with
/// the point currently farthest from its own centroid.
pub fn kmeans(ks: &KeySpace, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<Clustering> {
    kmeans_mode(ks, k, seed, max_iters, tol, KmeansMode::Lloyd)
}

pub fn kmeans_mode(
    ks: &KeySpace,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
    mode: KmeansMode,
) -> Result<Clustering> {
    let n = ks.len();
    let dim = ks.dim();
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cluster count {k} out of range 2..={n}"
        )));
    }
    if max_iters < 1 {
        return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
    }
    if tol.is_nan() || tol < 0.0 {
        return Err(Error::InvalidArgument("tol must be >= 0".into()));
    }
    if ks.matrix.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("key matrix".into()));
    }

    let mut rng = Pcg64::seed_from_u64(seed);
    let mut centroids = plus_plus_init(ks, k, &mut rng);

    let mut assignment = Vec::new();
    let mut inertia = f64::INFINITY;
    let mut trace = Vec::new();
    let mut iterations = 0;

    for iter in 0..max_iters {
        let (mut assign, mut sums, mut counts, step_inertia) = match mode {
            KmeansMode::Lloyd => assign_points(ks, &centroids, k),
            KmeansMode::Balanced => assign_balanced(ks, &centroids, k),
        };

        // Re-seed empty clusters with the globally farthest point.
        let mut moved = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = None;
            let mut far_d = -1.0;
            for i in 0..n {
                if moved[i] || counts[assign[i] as usize] <= 1 {
                    continue;
                }
                let d = squared_distance(
                    ks.matrix.row(i),
                    &centroids[assign[i] as usize * dim..(assign[i] as usize + 1) * dim],
                );
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                let old = assign[i] as usize;
                counts[old] -= 1;
                counts[c] += 1;
                for (j, v) in ks.matrix.row(i).iter().enumerate() {
                    sums[old * dim + j] -= v;
                    sums[c * dim + j] += v;
                }
                assign[i] = c as u32;
                moved[i] = true;
            }
        }

        assignment = assign;
        iterations = iter + 1;
        trace.push(step_inertia);

        let improved = inertia - step_inertia;
        let converged = improved.is_finite() && improved < tol;
        inertia = step_inertia;

        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] * inv;
                }
            }
        }

        if converged {
            break;
        }
    }

    Ok(Clustering {
        k,
        assignment,
        centroids,
        dim,
        seed,
        inertia,
        iterations_run: iterations,
        mode,
        inertia_trace: trace,
    })
}

/// The middle-rank partition of a ranking: token ids at ranks `(k_top, n_top]`
/// split by whether they share a cluster with any top-`k_top` token. Both
/// lists preserve rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InOutPartition {
    pub in_top: Vec<u32>,
    pub out_top: Vec<u32>,
    pub k_top: usize,
    pub n_top: usize,
}

pub fn partition_in_out_top(
    ranking: &NtpRanking,
    clustering: &Clustering,
    k_top: usize,
    n_top: usize,
) -> Result<InOutPartition> {
    if ranking.entries.len() < n_top {
        return Err(Error::InvalidArgument(format!(
            "ranking has {} entries, need at least n_top = {n_top}",
            ranking.entries.len()
        )));
    }
    if k_top >= n_top {
        return Err(Error::InvalidArgument(format!(
            "k_top {k_top} must be smaller than n_top {n_top}"
        )));
    }
    let mut top_clusters = Vec::with_capacity(k_top);
    for entry in &ranking.entries[..k_top] {
        top_clusters.push(clustering.cluster_of(entry.token_id)?);
    }
    let mut in_top = Vec::new();
    let mut out_top = Vec::new();
    for entry in &ranking.entries[k_top..n_top] {
        let c = clustering.cluster_of(entry.token_id)?;
        if top_clusters.contains(&c) {
            in_top.push(entry.token_id);
        } else {
            out_top.push(entry.token_id);
        }
    }
    Ok(InOutPartition {
        in_top,
        out_top,
        k_top,
        n_top,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    InTop,
    OutTop,
}

/// Accuracy / rank / proportion summary for one side of the partition.
/// Accuracy and average rank are absent for an empty group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: GroupKind,
    pub accuracy: Option<f64>,
    pub avg_rank: Option<f64>,
    pub proportion: f64,
    pub member_count: usize,
}

pub fn group_metrics(
    partition: &InOutPartition,
    correctness: &HashMap<u32, bool>,
    ranking: &NtpRanking,
) -> Result<(GroupReport, GroupReport)> {
    let rank_of: HashMap<u32, u32> = ranking
        .entries
        .iter()
        .map(|e| (e.token_id, e.rank))
        .collect();
    let window = (partition.n_top - partition.k_top) as f64;

    let report = |group: GroupKind, members: &[u32]| -> Result<GroupReport> {
        let mut correct = 0usize;
        let mut rank_sum = 0.0;
        for &id in members {
            let ok = correctness
                .get(&id)
                .copied()
                .ok_or(Error::MissingCorrectness(id))?;
            if ok {
                correct += 1;
            }
            rank_sum += f64::from(*rank_of.get(&id).ok_or(Error::UnassignedToken(id))?);
        }
        let count = members.len();
        Ok(GroupReport {
            group,
            accuracy: (count > 0).then(|| 100.0 * correct as f64 / count as f64),
            avg_rank: (count > 0).then(|| rank_sum / count as f64),
            proportion: 100.0 * count as f64 / window,
            member_count: count,
        })
    };
    Ok((
        report(GroupKind::InTop, &partition.in_top)?,
        report(GroupKind::OutTop, &partition.out_top)?,
    ))
}

/// Cluster-penalty rerank: a token at original rank `r` whose 1-based rank
/// among same-cluster tokens (in original order) is `c` gets added rank
/// `r + c`; the list is re-sorted ascending by added rank with the original
/// rank breaking ties. Logits and probabilities ride along unchanged.
pub fn rerank_by_cluster(ranking: &NtpRanking, clustering: &Clustering) -> Result<NtpRanking> {
    let mut seen_per_cluster: HashMap<u32, u32> = HashMap::new();
    let mut keyed: Vec<(u64, u32, RankedToken)> = Vec::with_capacity(ranking.entries.len());
    for (i, entry) in ranking.entries.iter().enumerate() {
        let cluster = clustering.cluster_of(entry.token_id)?;
        let in_cluster = seen_per_cluster.entry(cluster).or_insert(0);
        *in_cluster += 1;
        let original_rank = (i + 1) as u64;
        let added = original_rank + u64::from(*in_cluster);
        keyed.push((added, original_rank as u32, entry.clone()));
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let entries = keyed
        .into_iter()
        .enumerate()
        .map(|(i, (_, _, mut e))| {
            e.rank = (i + 1) as u32;
            e
        })
        .collect();
    Ok(NtpRanking {
        context: ranking.context.clone(),
        entries,
        truncated_at: ranking.truncated_at,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    k: usize,
    vocab_size: usize,
    dim: usize,
    seed: u64,
    mode: KmeansMode,
    inertia: f64,
    iterations_run: usize,
}

/// Write the binary clustering file plus its JSON sidecar (`<path>.json`).
pub fn save_clustering(path: &Path, clustering: &Clustering) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(clustering.k as u32).to_le_bytes());
    out.extend_from_slice(&(clustering.assignment.len() as u64).to_le_bytes());
    out.extend_from_slice(&(clustering.dim as u32).to_le_bytes());
    out.extend_from_slice(&clustering.seed.to_le_bytes());
    out.push(clustering.mode.to_u8());
    for a in &clustering.assignment {
        out.extend_from_slice(&a.to_le_bytes());
    }
    for c in &clustering.centroids {
        out.extend_from_slice(&c.to_le_bytes());
    }
    std::fs::write(path, out)?;

    let sidecar = Sidecar {
        k: clustering.k,
        vocab_size: clustering.assignment.len(),
        dim: clustering.dim,
        seed: clustering.seed,
        mode: clustering.mode,
        inertia: clustering.inertia,
        iterations_run: clustering.iterations_run,
    };
    let sidecar_path = sidecar_path(path);
    std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

pub fn load_clustering(path: &Path) -> Result<Clustering> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    drop(file);

    let bad = |msg: &str| Error::InvalidArgument(format!("clustering file {path:?}: {msg}"));
    if bytes.len() < 31 || &bytes[..4] != MAGIC {
        return Err(bad("missing KNCL magic"));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let k = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let vocab = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[18..22].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(bytes[22..30].try_into().unwrap());
    let mode = KmeansMode::from_u8(bytes[30])?;

    let mut offset = 31;
    let need = offset + vocab * 4 + k * dim * 8;
    if bytes.len() != need {
        return Err(bad(&format!("expected {need} bytes, found {}", bytes.len())));
    }
    let mut assignment = Vec::with_capacity(vocab);
    for _ in 0..vocab {
        let a = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
        if a as usize >= k {
            return Err(bad(&format!("assignment {a} out of range for k = {k}")));
        }
        assignment.push(a);
        offset += 4;
    }
    let mut centroids = Vec::with_capacity(k * dim);
    for _ in 0..k * dim {
        centroids.push(f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()));
        offset += 8;
    }

    let (inertia, iterations_run) = match std::fs::read_to_string(sidecar_path(path)) {
        Ok(raw) => {
            let sc: Sidecar = serde_json::from_str(&raw)?;
            (sc.inertia, sc.iterations_run)
        }
        Err(_) => (0.0, 0),
    };

    Ok(Clustering {
        k,
        assignment,
        centroids,
        dim,
        seed,
        inertia,
        iterations_run,
        mode,
        inertia_trace: Vec::new(),
    })
}

/// Test/desk constructor for a clustering from just an assignment vector.
/// Centroids are left at zero; metrics that only need the assignment work
/// unchanged.
pub fn clustering_from_assignment(assignment: Vec<u32>, k: usize, dim: usize) -> Clustering {
    Clustering {
        k,
        assignment,
        centroids: vec![0.0; k * dim],
        dim,
        seed: 0,
        inertia: 0.0,
        iterations_run: 0,
        mode: KmeansMode::Lloyd,
        inertia_trace: Vec::new(),
    }
}
