//! 2-d projection of embeddings onto principal components.
//!
//! The covariance matrices here are tiny (embedding dimension by embedding
//! dimension), so a cyclic Jacobi sweep is plenty: it converges to machine
//! precision and keeps the crate free of a linear-algebra dependency.

use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Eigenvalues (descending) and matching unit eigenvectors of a symmetric
/// matrix, via cyclic Jacobi rotations.
pub fn symmetric_eigen<F: Real>(matrix: &[Vec<F>]) -> Result<(Vec<F>, Vec<Vec<F>>)> {
    let n = matrix.len();
    if n == 0 {
        return Err(Error::EmptyInput("matrix"));
    }
    for row in matrix {
        if row.len() != n {
            return Err(Error::ShapeMismatch("matrix must be square".into()));
        }
    }
    let mut a: Vec<Vec<F>> = matrix.to_vec();
    let mut v = vec![vec![F::zero(); n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = F::one();
    }

    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(F::zero(), |acc, &x| acc.max(x.abs()))
        .max(F::one());
    let tol = scale * real::<F>(1e-15);

    for _sweep in 0..100 {
        let mut off = F::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= tol * real(1e-3) {
                    continue;
                }
                // Rotation angle zeroing a[p][q].
                let diff = a[q][q] - a[p][p];
                let theta = if diff.abs() < a[p][q].abs() * real(1e-36) {
                    F::FRAC_PI_4()
                } else {
                    (real::<F>(2.0) * a[p][q] / diff).atan() / real(2.0)
                };
                let c = theta.cos();
                let s = theta.sin();
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j][j]
            .partial_cmp(&a[i][i])
            .expect("eigenvalues finite")
            .then(i.cmp(&j))
    });
    let eigenvalues = order.iter().map(|&i| a[i][i]).collect();
    let eigenvectors = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row][col]).collect())
        .collect();
    Ok((eigenvalues, eigenvectors))
}

/// Project points onto the top-2 principal components of the centered data.
///
/// Eigenvector signs are fixed so the component with the largest magnitude is
/// positive, making the output deterministic.
pub fn project_2d<F: Real>(embeddings: &[Vec<F>]) -> Result<Vec<[F; 2]>> {
    if embeddings.len() < 3 {
        return Err(Error::InsufficientSamples(
            "projection needs at least 3 points",
        ));
    }
    let dim = embeddings[0].len();
    if dim < 2 {
        return Err(Error::ShapeMismatch(
            "projection needs at least 2 dimensions".into(),
        ));
    }
    for e in embeddings {
        if e.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: e.len(),
            });
        }
    }

    let n = embeddings.len();
    let inv_n = F::one() / real::<F>(n as f64);
    let mut mean = vec![F::zero(); dim];
    for e in embeddings {
        for (m, &x) in mean.iter_mut().zip(e) {
            *m += x * inv_n;
        }
    }
    let centered: Vec<Vec<F>> = embeddings
        .iter()
        .map(|e| e.iter().zip(&mean).map(|(&x, &m)| x - m).collect())
        .collect();

    let denom = real::<F>((n - 1) as f64);
    let mut cov = vec![vec![F::zero(); dim]; dim];
    for row in &centered {
        for i in 0..dim {
            for j in i..dim {
                cov[i][j] += row[i] * row[j] / denom;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }

    let total_variance: F = (0..dim).map(|i| cov[i][i]).sum();
    if total_variance <= real(1e-24) {
        return Err(Error::DegenerateRank("all points identical"));
    }

    let (_, vectors) = symmetric_eigen(&cov)?;
    let mut axes = [vectors[0].clone(), vectors[1].clone()];
    for axis in &mut axes {
        let lead = axis
            .iter()
            .cloned()
            .fold(F::zero(), |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < F::zero() {
            for x in axis.iter_mut() {
                *x = -*x;
            }
        }
    }

    Ok(centered
        .iter()
        .map(|row| {
            [
                crate::embedding::dot(row, &axes[0]),
                crate::embedding::dot(row, &axes[1]),
            ]
        })
        .collect())
}
