//! Query recovery from observed logits or logprobs.
//!
//! When only model outputs are available over the wire, the query vector is
//! reconstructed as the least-squares solution of `key_i . q = logit_i`.
//! Logprobs determine logits only up to an additive constant, so that case
//! solves the centered system (equivalently, fits an intercept), which is
//! why one extra observation beyond the dimension is required.

use crate::error::{Error, Result};
use crate::keyspace::{KeySpace, QuerySource, QueryVector};
use crate::linalg;

#[derive(Debug, Clone)]
pub enum LogitObservations {
    /// Exact (token id, logit) pairs.
    Logits(Vec<(u32, f64)>),
    /// (token id, logprob) pairs; centered before solving.
    Logprobs(Vec<(u32, f64)>),
}

#[derive(Debug, Clone)]
pub struct RecoveredQuery {
    pub query: QueryVector,
    /// Root-mean-square residual of the fitted logits.
    pub residual_rms: f64,
}

pub fn recover_query(observations: &LogitObservations, ks: &KeySpace) -> Result<RecoveredQuery> {
    let (pairs, centered) = match observations {
        LogitObservations::Logits(pairs) => (pairs, false),
        LogitObservations::Logprobs(pairs) => (pairs, true),
    };
    let dim = ks.dim();
    let usable: Vec<(u32, f64)> = pairs
        .iter()
        .filter(|(id, value)| (*id as usize) < ks.len() && value.is_finite())
        .copied()
        .collect();
    if usable.len() < dim + 1 {
        return Err(Error::Underdetermined {
            needed: dim + 1,
            got: usable.len(),
        });
    }

    let n = usable.len();
    let mut key_mean = vec![0.0; dim];
    let mut value_mean = 0.0;
    if centered {
        for (id, value) in &usable {
            for (m, v) in key_mean.iter_mut().zip(ks.key(*id)) {
                *m += v;
            }
            value_mean += value;
        }
        for m in &mut key_mean {
            *m /= n as f64;
        }
        value_mean /= n as f64;
    }

    // Normal equations over (possibly centered) rows.
    let mut normal = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    let mut row = vec![0.0; dim];
    for (id, value) in &usable {
        let key = ks.key(*id);
        for j in 0..dim {
            row[j] = key[j] - if centered { key_mean[j] } else { 0.0 };
        }
        let y = value - if centered { value_mean } else { 0.0 };
        for i in 0..dim {
            rhs[i] += row[i] * y;
            for j in i..dim {
                normal[i * dim + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            normal[i * dim + j] = normal[j * dim + i];
        }
    }

    let solution = linalg::cholesky_solve(&mut normal, &rhs, dim)?;

    // Residual over the original observations; the intercept for the
    // centered case falls out of the means.
    let intercept = if centered {
        value_mean - linalg::dot(&key_mean, &solution)
    } else {
        0.0
    };
    let mut sq_sum = 0.0;
    for (id, value) in &usable {
        let fit = linalg::dot(ks.key(*id), &solution) + intercept;
        let r = fit - value;
        sq_sum += r * r;
    }

    Ok(RecoveredQuery {
        query: QueryVector {
            values: solution,
            source: QuerySource::RecoveredFromLogits,
        },
        residual_rms: (sq_sum / n as f64).sqrt(),
    })
}
