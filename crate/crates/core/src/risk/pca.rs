//! Principal components through a cyclic Jacobi eigensolver on the sample
//! covariance. Feature widths here are a few hundred columns at most.

use super::FeatureMatrix;
use crate::error::{ensure, MindError, Result};

/// Eigenvalues in descending order and matching unit eigenvectors (one per
/// entry of the second vector) of a symmetric `n × n` row-major matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    ensure!(a.len() == n * n, "matrix data has {} entries, expected {}", a.len(), n * n);
    let mut m = a.to_vec();
    for i in 0..n {
        for j in 0..i {
            ensure!((m[i * n + j] - m[j * n + i]).abs() <= 1e-12 * (1.0 + m[i * n + j].abs()), "matrix is not symmetric");
        }
    }
    // v holds eigenvectors as columns
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = m.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * n + p], m[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b * n + b].total_cmp(&m[a * n + a]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    Ok((values, vectors))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit directions, largest variance first. The largest-magnitude entry
    /// of each is positive.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues of the kept components.
    pub variances: Vec<f64>,
    /// Share of the total variance per kept component.
    pub explained: Vec<f64>,
    /// Row coordinates in the kept components.
    pub points: Vec<Vec<f64>>,
}

impl Pca {
    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.iter().zip(row).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum()).collect()
    }
}

/// The top `k` principal components of the rows of `x`.
pub fn pca(x: &FeatureMatrix, k: usize) -> Result<Pca> {
    let (n, d) = (x.rows(), x.cols);
    ensure!(n >= 3, "PCA needs at least 3 rows, got {n}");
    ensure!(d >= 2, "PCA needs at least 2 columns, got {d}");
    ensure!(k >= 1 && k <= d, "component count {k} outside 1..={d}");
    let mut mean = vec![0.0; d];
    for row in x.data.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in x.data.chunks_exact(d) {
        centered.iter_mut().zip(row.iter().zip(&mean)).for_each(|(c, (v, m))| *c = v - m);
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let out = &mut cov[i * d..(i + 1) * d];
            for j in i..d {
                out[j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let c = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = c;
            cov[j * d + i] = c;
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !(trace > 0.0) {
        return Err(MindError::Degenerate("all rows are identical; covariance has rank 0".into()));
    }
    let (values, mut vectors) = symmetric_eigen(&cov, d)?;
    vectors.truncate(k);
    for c in &mut vectors {
        let lead = c.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let variances: Vec<f64> = values[..k].iter().map(|&v| v.max(0.0)).collect();
    let explained = variances.iter().map(|v| v / trace).collect();
    let mut out = Pca { mean, components: vectors, variances, explained, points: Vec::with_capacity(n) };
    out.points = x.data.chunks_exact(d).map(|r| out.project(r)).collect();
    Ok(out)
}

/// Two-component PCA.
pub fn pca_2d(x: &FeatureMatrix) -> Result<Pca> {
    pca(x, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_eigenpairs() {
        let (vals, vecs) = symmetric_eigen(&[1.0, 0.0, 0.0, 3.0], 2).unwrap();
        assert_eq!(vals, vec![3.0, 1.0]);
        assert_eq!(vecs[0], vec![0.0, 1.0]);
    }

    #[test]
    fn two_by_two_rotation() {
        let (vals, vecs) = symmetric_eigen(&[2.0, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((vecs[0][0].abs() - r).abs() < 1e-14 && (vecs[0][1].abs() - r).abs() < 1e-14);
    }

    #[test]
    fn asymmetric_rejected() {
        assert!(symmetric_eigen(&[1.0, 2.0, 0.0, 1.0], 2).is_err());
    }
}
