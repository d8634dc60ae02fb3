//! PCA against an independent eigensolver, and the probe's null behaviour.

use mind_core::numerics::Rng;
use mind_core::risk::{fit_risk_probe, pca, permutation_null, FeatureMatrix, ProbeConfig};
use nalgebra::{DMatrix, SymmetricEigen};

use super::Check;

fn random_matrix(rng: &mut Rng, n: usize, d: usize) -> FeatureMatrix {
    let mut x = FeatureMatrix::new(d);
    for i in 0..n {
        let row: Vec<f64> = (0..d).map(|j| rng.normal() * (1.0 + j as f64)).collect();
        x.push(&row, i % 2 == 0, 0, i).unwrap();
    }
    x
}

/// Covariance eigenpairs via nalgebra, sorted by descending eigenvalue.
fn oracle(x: &FeatureMatrix) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = (x.rows(), x.cols);
    let m = DMatrix::from_row_slice(n, d, &x.data);
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = order.iter().map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
    (vals, vecs)
}

pub fn pca_oracle_suite() -> Vec<Check> {
    let mut rng = Rng::new(0x9ca);
    let mut worst_dir = 0.0f64;
    let mut worst_var = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut worst_mean = 0.0f64;
    for _ in 0..50 {
        let n = rng.inclusive(5, 12);
        let d = rng.inclusive(3, 6);
        let x = random_matrix(&mut rng, n, d);
        let p = pca(&x, d).unwrap();
        let (vals, vecs) = oracle(&x);
        let total: f64 = vals.iter().sum();
        // rank is at most n - 1; directions of zero-variance components are arbitrary
        for k in 0..d.min(n - 1) {
            let dot: f64 = p.components[k].iter().zip(&vecs[k]).map(|(a, b)| a * b).sum();
            let sign = dot.signum();
            let e = p.components[k].iter().zip(&vecs[k]).map(|(a, b)| (a - sign * b).abs()).fold(0.0, f64::max);
            worst_dir = worst_dir.max(e);
            worst_var = worst_var.max((p.explained[k] - vals[k] / total).abs());
        }
        worst_sum = worst_sum.max((p.explained.iter().sum::<f64>() - 1.0).abs());
        let origin = p.project(&p.mean);
        worst_mean = worst_mean.max(origin.iter().map(|v| v.abs()).fold(0.0, f64::max));
    }
    vec![
        Check::new(
            "PCA matches independent eigendecomposition",
            worst_dir <= 1e-8 && worst_var <= 1e-8,
            format!("50 matrices; direction error {worst_dir:.2e}, explained-variance error {worst_var:.2e}"),
        ),
        Check::new("explained fractions sum to 1", worst_sum <= 1e-8, format!("{worst_sum:.2e}")),
        Check::new("mean projects to origin", worst_mean <= 1e-10, format!("{worst_mean:.2e}")),
    ]
}

/// Two well separated Gaussian clusters, one row per group.
pub fn clusters(rng: &mut Rng, n: usize, d: usize, gap: f64) -> FeatureMatrix {
    let mut x = FeatureMatrix::new(d);
    for i in 0..n {
        let label = i % 2 == 0;
        let shift = if label { gap } else { -gap };
        let row: Vec<f64> = (0..d).map(|j| rng.normal() + if j == 0 { shift } else { 0.0 }).collect();
        x.push(&row, label, i % 4, i).unwrap();
    }
    x
}

pub fn probe_suite() -> Vec<Check> {
    let mut rng = Rng::new(0x9b0be);
    let cfg = ProbeConfig { iterations: 200, ..ProbeConfig::default() };
    let sep = clusters(&mut rng, 80, 6, 10.0);
    let m = fit_risk_probe(&sep, &cfg).unwrap();
    let noisy = clusters(&mut rng, 200, 6, 0.5);
    let null = permutation_null(&noisy, 20, &cfg).unwrap();
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    vec![
        Check::new("separable clusters give AUC 1", m.auc == 1.0, format!("AUC {}", m.auc)),
        Check::new(
            "permutation null AUC",
            (0.4..=0.6).contains(&mean),
            format!("mean {mean:.3} over 20 shuffles (range {:.3}..{:.3})", null.iter().copied().fold(1.0, f64::min), null.iter().copied().fold(0.0, f64::max)),
        ),
    ]
}
