//! Principal component analysis of difference vectors.
//!
//! Covariance of the mean-centered data, eigen-decomposed with cyclic Jacobi
//! rotations. Explained-variance fractions come out nonincreasing and sum to
//! one; a 2-d projection onto the top two components is emitted for plotting.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug)]
pub struct PcaReport {
    /// Explained-variance fractions, nonincreasing, summing to 1.
    pub fractions: Vec<f64>,
    /// Sample coordinates in the top-2 component plane.
    pub projection: Vec<[f64; 2]>,
    /// Top-2 component directions (unit vectors in input space).
    pub components: [Vec<f64>; 2],
}

impl PcaReport {
    pub fn top_k_fraction(&self, k: usize) -> f64 {
        self.fractions.iter().take(k).sum()
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi sweeps.
/// Returns (eigenvalues, eigenvectors as rows), unsorted.
fn jacobi_eigen(mat: &Tensor, max_sweeps: usize) -> (Vec<f64>, Tensor) {
    let n = mat.rows();
    let mut a = mat.data().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += a[p * n + q] * a[p * n + q];
            }
        }
        s
    };
    let eps = 1e-24 * (tensor::sum_all(&tensor::mul(mat, mat).expect("square")) + 1e-300);
    for _ in 0..max_sweeps {
        if off(&a) <= eps {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vpk = v[p * n + k];
                    let vqk = v[q * n + k];
                    v[p * n + k] = c * vpk - s * vqk;
                    v[q * n + k] = s * vpk + c * vqk;
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[i * n + i]).collect();
    (vals, Tensor::new(vec![n, n], v).expect("square"))
}

/// PCA of the rows of `diffs` (`[n, d]`).
pub fn pca_report(diffs: &Tensor) -> Result<PcaReport> {
    let (n, d) = (diffs.rows(), diffs.cols());
    if n < 2 || d < 2 {
        return Err(Error::InvalidArgument(format!(
            "pca wants at least 2 samples and 2 dims, got {}x{}",
            n, d
        )));
    }
    // mean-center
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(diffs.row(i).iter()) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut centered = Vec::with_capacity(n * d);
    for i in 0..n {
        for (j, &x) in diffs.row(i).iter().enumerate() {
            centered.push(x - mean[j]);
        }
    }
    let centered = Tensor::new(vec![n, d], centered)?;

    // covariance = X^T X / (n - 1)
    let cov = tensor::scale(
        &tensor::matmul(&tensor::transpose(&centered), &centered)?,
        1.0 / (n as f64 - 1.0),
    );
    let total: f64 = (0..d).map(|i| cov.data()[i * d + i]).sum();
    if total <= 1e-30 {
        return Err(Error::Numeric(
            "rank-0 data: all difference vectors identical, variance fractions undefined".into(),
        ));
    }

    let (vals, vecs) = jacobi_eigen(&cov, 64);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).expect("finite eigenvalues"));

    let clamped: Vec<f64> = order.iter().map(|&i| vals[i].max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    let fractions: Vec<f64> = clamped.iter().map(|x| x / sum).collect();

    // top-2 components, sign fixed so the largest-magnitude entry is positive
    let mut components: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    for (slot, &ei) in components.iter_mut().zip(order.iter().take(2)) {
        let mut comp: Vec<f64> = (0..d).map(|k| vecs.data()[k * d + ei]).collect();
        let lead = comp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
            .map(|(i, _)| i)
            .expect("nonempty");
        if comp[lead] < 0.0 {
            for c in comp.iter_mut() {
                *c = -*c;
            }
        }
        *slot = comp;
    }

    let projection = (0..n)
        .map(|i| {
            let row = centered.row(i);
            [
                tensor::dot(row, &components[0]),
                tensor::dot(row, &components[1]),
            ]
        })
        .collect();

    Ok(PcaReport {
        fractions,
        projection,
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn two_dim_subspace_concentrates_variance() {
        let mut rng = crate::rng::stream(5, "pca", &[]);
        let d = 6;
        let n = 400;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let a: f64 = rng.gen::<f64>() - 0.5;
            let b: f64 = rng.gen::<f64>() - 0.5;
            // data lives in span(e0 + e1, e2)
            let mut row = vec![0.0; d];
            row[0] = a;
            row[1] = a;
            row[2] = b;
            data.extend(row);
        }
        let report = pca_report(&Tensor::new(vec![n, d], data).unwrap()).unwrap();
        assert!((report.top_k_fraction(2) - 1.0).abs() < 1e-9);
        // fractions nonincreasing, nonnegative, sum 1
        let mut prev = f64::INFINITY;
        for &f in &report.fractions {
            assert!(f >= -1e-15 && f <= prev + 1e-15);
            prev = f;
        }
        assert!((report.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn isotropic_cloud_spreads_fractions() {
        let mut rng = crate::rng::stream(6, "pca-iso", &[]);
        let d = 8;
        let n = 10_000;
        let data = Tensor::randn(&[n, d], 1.0, &mut rng);
        let report = pca_report(&data).unwrap();
        for &f in &report.fractions {
            assert!((f - 1.0 / d as f64).abs() < 0.02, "fraction {}", f);
        }
    }

    #[test]
    fn rank_zero_reported() {
        let data = Tensor::new(vec![4, 3], vec![1.0, 2.0, 3.0].repeat(4)).unwrap();
        assert!(matches!(pca_report(&data), Err(Error::Numeric(_))));
    }

    #[test]
    fn projection_matches_component_dot() {
        let mut rng = crate::rng::stream(7, "pca-proj", &[]);
        let data = Tensor::randn(&[50, 5], 1.0, &mut rng);
        let report = pca_report(&data).unwrap();
        assert_eq!(report.projection.len(), 50);
        // components are unit-norm
        for c in &report.components {
            assert!((tensor::l2_norm(c) - 1.0).abs() < 1e-9);
        }
    }
}
