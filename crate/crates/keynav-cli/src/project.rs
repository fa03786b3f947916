//! Deterministic 2-D PCA projection of key rows for external plotting.

use serde::{Deserialize, Serialize};

use keynav::keyspace::{KeySpace, QueryVector};
use keynav::linalg::symmetric_eigen;
use keynav::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub token_id: Option<u32>,
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub is_query: bool,
}

/// Project the key rows of `token_subset` (plus the query, when given) onto
/// their top two principal components.
///
/// Coordinates come from the exact eigendecomposition of the centered
/// scatter matrix, using the Gram-matrix route when there are fewer points
/// than dimensions. Output is deterministic; component variance is
/// non-increasing.
pub fn project_2d(
    ks: &KeySpace,
    token_subset: &[u32],
    query: Option<&QueryVector>,
) -> Result<Vec<ProjectedPoint>> {
    if token_subset.len() < 3 {
        return Err(Error::InvalidArgument(
            "projection needs a subset of at least 3 tokens".into(),
        ));
    }
    let dim = ks.dim();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(token_subset.len() + 1);
    let mut meta: Vec<(Option<u32>, String, bool)> = Vec::new();
    for &id in token_subset {
        if id as usize >= ks.len() {
            return Err(Error::UnassignedToken(id));
        }
        rows.push(ks.key(id).to_vec());
        meta.push((Some(id), ks.tokens[id as usize].display_text(), false));
    }
    if let Some(q) = query {
        if q.values.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: q.values.len(),
            });
        }
        rows.push(q.values.clone());
        meta.push((None, "query".to_string(), true));
    }

    let n = rows.len();
    let mut mean = vec![0.0; dim];
    for row in &rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let coords = if n <= dim {
        // Gram route: scores are sqrt(lambda) times the Gram eigenvectors.
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let g: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                gram[i * n + j] = g;
                gram[j * n + i] = g;
            }
        }
        let (values, vectors) = symmetric_eigen(&gram, n);
        check_nondegenerate(&values)?;
        let score = |k: usize| -> Vec<f64> {
            let scale = values[k].max(0.0).sqrt();
            vectors[k].iter().map(|u| u * scale).collect()
        };
        (score(0), score(1))
    } else {
        let mut scatter = vec![0.0; dim * dim];
        for row in &centered {
            for i in 0..dim {
                for j in i..dim {
                    scatter[i * dim + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                scatter[i * dim + j] = scatter[j * dim + i];
            }
        }
        let (values, vectors) = symmetric_eigen(&scatter, dim);
        check_nondegenerate(&values)?;
        let project = |k: usize| -> Vec<f64> {
            centered
                .iter()
                .map(|row| row.iter().zip(&vectors[k]).map(|(a, b)| a * b).sum())
                .collect()
        };
        (project(0), project(1))
    };

    Ok(meta
        .into_iter()
        .enumerate()
        .map(|(i, (token_id, label, is_query))| ProjectedPoint {
            token_id,
            label,
            x: coords.0[i],
            y: coords.1[i],
            is_query,
        })
        .collect())
}

fn check_nondegenerate(eigenvalues: &[f64]) -> Result<()> {
    if eigenvalues.first().copied().unwrap_or(0.0) <= 1e-12 {
        return Err(Error::InvalidArgument(
            "degenerate covariance: all points identical".into(),
        ));
    }
    Ok(())
}

pub fn variance(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use keynav::keyspace::Token;
    use keynav::tensor::Matrix;

    fn keyspace(rows: Vec<Vec<f64>>) -> KeySpace {
        let n = rows.len();
        let cols = rows[0].len();
        let tokens = (0..n)
            .map(|i| Token {
                id: i as u32,
                text: format!("t{i}"),
            })
            .collect();
        KeySpace::new(
            tokens,
            Matrix {
                rows: n,
                cols,
                values: rows.into_iter().flatten().collect(),
            },
        )
        .unwrap()
    }

    #[test]
    fn collinear_points_have_zero_second_component() {
        let ks = keyspace(vec![
            vec![0.0, 0.0, 0.0],
            vec![1.0, 2.0, 3.0],
            vec![2.0, 4.0, 6.0],
            vec![3.0, 6.0, 9.0],
        ]);
        let pts = project_2d(&ks, &[0, 1, 2, 3], None).unwrap();
        for p in &pts {
            assert!(p.y.abs() < 1e-9, "second component should vanish, got {}", p.y);
        }
        let xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
        assert!(variance(&xs) > 0.1);
    }

    #[test]
    fn rotation_preserves_coordinates_up_to_sign() {
        let base = vec![
            vec![1.0, 0.0, 0.0],
            vec![-0.5, 2.0, 0.0],
            vec![0.25, -1.0, 0.0],
            vec![2.0, 1.5, 0.0],
            vec![-1.0, -0.5, 0.0],
        ];
        // Rotate all points by 90 degrees in the (x, z) plane.
        let rotated: Vec<Vec<f64>> = base
            .iter()
            .map(|p| vec![-p[2], p[1], p[0]])
            .collect();
        let a = project_2d(&keyspace(base), &[0, 1, 2, 3, 4], None).unwrap();
        let b = project_2d(&keyspace(rotated), &[0, 1, 2, 3, 4], None).unwrap();
        let sign_x = (a[0].x * b[0].x).signum();
        let sign_y = (a[0].y * b[0].y).signum();
        for (pa, pb) in a.iter().zip(&b) {
            assert!((pa.x - sign_x * pb.x).abs() < 1e-9);
            assert!((pa.y - sign_y * pb.y).abs() < 1e-9);
        }
    }

    #[test]
    fn first_component_carries_the_most_variance() {
        let ks = keyspace(vec![
            vec![10.0, 0.1, 0.0],
            vec![-10.0, -0.1, 0.2],
            vec![5.0, 0.3, -0.1],
            vec![-5.0, -0.2, 0.1],
            vec![0.0, 0.15, 0.05],
        ]);
        let pts = project_2d(&ks, &[0, 1, 2, 3, 4], None).unwrap();
        let xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.y).collect();
        assert!(variance(&xs) >= variance(&ys));
    }

    #[test]
    fn identical_points_are_degenerate() {
        let ks = keyspace(vec![vec![1.0, 1.0]; 4]);
        assert!(project_2d(&ks, &[0, 1, 2, 3], None).is_err());
    }

    #[test]
    fn query_is_appended_and_flagged() {
        let ks = keyspace(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
        ]);
        let q = QueryVector::synthetic(vec![0.5, 0.5]);
        let pts = project_2d(&ks, &[0, 1, 2], Some(&q)).unwrap();
        assert_eq!(pts.len(), 4);
        assert!(pts[3].is_query);
        assert_eq!(pts[3].label, "query");
        assert!(pts[..3].iter().all(|p| !p.is_query));
    }

    #[test]
    fn gram_and_covariance_routes_agree() {
        // 5 points in 3 dims uses the Gram route; duplicating dims to make
        // n > dim exercises the covariance route on the same geometry.
        let pts3: Vec<Vec<f64>> = vec![
            vec![1.0, 2.0, 0.5],
            vec![-1.0, 0.5, 1.5],
            vec![2.0, -1.0, 0.0],
            vec![0.0, 0.0, -2.0],
            vec![1.5, 1.5, 1.0],
        ];
        let pts2: Vec<Vec<f64>> = pts3.iter().map(|p| vec![p[0], p[1]]).collect();
        let a = project_2d(&keyspace(pts2), &[0, 1, 2, 3, 4], None).unwrap();
        // n = 5 > dim = 2 -> covariance route; compare against Gram route
        // via the 3-dim embedding with the third coordinate zeroed.
        let embedded: Vec<Vec<f64>> = pts3.iter().map(|p| vec![p[0], p[1], 0.0]).collect();
        let b = project_2d(&keyspace(embedded), &[0, 1, 2, 3, 4], None).unwrap();
        let sign_x = (a[0].x * b[0].x).signum();
        let sign_y = (a[0].y * b[0].y).signum();
        for (pa, pb) in a.iter().zip(&b) {
            assert!((pa.x - sign_x * pb.x).abs() < 1e-8);
            assert!((pa.y - sign_y * pb.y).abs() < 1e-8);
        }
    }
}
