//! Dense eigensolver oracle for the 2-d projection: the hand-rolled Jacobi
//! routine must agree with nalgebra's symmetric eigendecomposition.

mod common;

use common::*;
use nalgebra::DMatrix;
use rand::Rng;
use uniret_core::pca::{project_2d, symmetric_eigen};

fn random_symmetric(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut m = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = r.gen_range(-2.0..2.0);
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    m
}

#[test]
fn jacobi_matches_nalgebra_eigenvalues() {
    for seed in 0..20u64 {
        let n = 2 + (seed as usize % 5); // 2..=6
        let m = random_symmetric(seed, n);
        let (vals, vecs) = symmetric_eigen(&m).unwrap();

        let flat: Vec<f64> = m.iter().flatten().copied().collect();
        let na = DMatrix::from_row_slice(n, n, &flat);
        let mut oracle: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().copied().collect();
        oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());

        for (ours, theirs) in vals.iter().zip(&oracle) {
            assert!((ours - theirs).abs() < 1e-9, "seed {seed}: {ours} vs {theirs}");
        }

        // Each eigenvector must satisfy A v = lambda v.
        for (lambda, v) in vals.iter().zip(&vecs) {
            for i in 0..n {
                let av: f64 = (0..n).map(|j| m[i][j] * v[j]).sum();
                assert!((av - lambda * v[i]).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn projection_variance_matches_top_two_eigenvalues() {
    let mut r = rng(33);
    let n = 40;
    let dim = 6;
    let pts: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, dim)).collect();
    let proj = project_2d(&pts).unwrap();

    // Covariance via nalgebra.
    let mean: Vec<f64> = (0..dim)
        .map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![0.0f64; dim * dim];
    for p in &pts {
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += (p[i] - mean[i]) * (p[j] - mean[j]) / (n - 1) as f64;
            }
        }
    }
    let na = DMatrix::from_row_slice(dim, dim, &cov);
    let mut eig: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let var = |axis: usize| {
        let m = proj.iter().map(|p| p[axis]).sum::<f64>() / n as f64;
        proj.iter().map(|p| (p[axis] - m).powi(2)).sum::<f64>() / (n - 1) as f64
    };
    assert!((var(0) - eig[0]).abs() < 1e-9, "{} vs {}", var(0), eig[0]);
    assert!((var(1) - eig[1]).abs() < 1e-9, "{} vs {}", var(1), eig[1]);
}
