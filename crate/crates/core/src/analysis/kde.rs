//! Entropy of embedding clouds under a Gaussian kernel density estimate in a
//! PCA-reduced space.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{argument, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdeConfig {
    pub pca_dims: usize,
    /// Fixed kernel width; Scott's rule on the reduced data when `None`.
    pub bandwidth: Option<f64>,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self {
            pca_dims: 2,
            bandwidth: None,
        }
    }
}

/// Projection of the centred rows onto the top `k` principal axes.
pub fn pca(x: &Mat, k: usize) -> Result<Mat> {
    let (n, d) = x.dim();
    if k == 0 || k > n.min(d) {
        return Err(argument(format!("pca_dims {k} must lie in 1..={}", n.min(d))));
    }
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let c = x - &mean;
    let cov = c.t().dot(&c) / (n as f64 - 1.0);
    let cov = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let basis = Mat::from_shape_fn((d, k), |(i, j)| eig.eigenvectors[(i, order[j])]);
    Ok(c.dot(&basis))
}

/// Scott's rule on already-reduced data.
pub fn scott_bandwidth(z: &Mat) -> f64 {
    let (n, d) = z.dim();
    let var = z.mapv(|v| v * v).sum() / ((n as f64 - 1.0) * d as f64);
    (n as f64).powf(-1.0 / (d as f64 + 4.0)) * var.sqrt()
}

/// Density estimate at each of the points themselves.
pub fn kde_at_points(z: &Mat, h: f64) -> Vec<f64> {
    let (n, d) = z.dim();
    let norm = 1.0 / (n as f64 * h.powi(d as i32) * (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0));
    (0..n)
        .map(|j| {
            let s: f64 = (0..n)
                .map(|i| {
                    let r2: f64 = z.row(j).iter().zip(z.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-0.5 * r2 / (h * h)).exp()
                })
                .sum();
            norm * s
        })
        .collect()
}

/// `H = −Σ f(z_i) log f(z_i)` over the sample points.
pub fn kde_entropy(x: &Mat, cfg: &KdeConfig) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(argument("KDE entropy needs at least two points"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("embeddings contain non-finite values".into()));
    }
    let z = pca(x, cfg.pca_dims)?;
    let spread = z.mapv(|v| v * v).sum() / (n as f64 * cfg.pca_dims as f64);
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if spread.sqrt() <= 1e-9 * scale {
        return Err(Error::Degenerate("embeddings have (near) zero variance".into()));
    }
    let h = match cfg.bandwidth {
        Some(h) if h.is_finite() && h > 0.0 => h,
        Some(h) => return Err(argument(format!("bandwidth must be positive, got {h}"))),
        None => scott_bandwidth(&z),
    };
    Ok(kde_at_points(&z, h).into_iter().map(|f| -f * f.ln()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn density_of_two_points_in_one_dim() {
        let z = array![[0.0], [1.0]];
        let f = kde_at_points(&z, 1.0);
        let k0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let expect = 0.5 * (k0 + k0 * (-0.5f64).exp());
        assert!((f[0] - expect).abs() < 1e-15 && (f[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn entropy_with_fixed_bandwidth_matches_formula() {
        let x = array![[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]];
        let cfg = KdeConfig {
            pca_dims: 2,
            bandwidth: Some(0.7),
        };
        // PCA is a rigid motion when keeping every dimension, so pairwise
        // distances and hence densities are unchanged.
        let f = kde_at_points(&x, 0.7);
        let expect: f64 = f.iter().map(|v| -v * v.ln()).sum();
        assert!((kde_entropy(&x, &cfg).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(kde_entropy(&array![[1.0, 2.0]], &KdeConfig::default()).is_err());
        let same = Mat::from_elem((5, 3), 0.25);
        assert!(matches!(kde_entropy(&same, &KdeConfig::default()), Err(Error::Degenerate(_))));
        let x = array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]];
        let cfg = KdeConfig {
            pca_dims: 3,
            bandwidth: None,
        };
        assert!(kde_entropy(&x, &cfg).is_err());
    }
}
