//! Lloyd's k-means with k-means++ seeding.
//!
//! Deterministic given the seed. Empty clusters are re-seeded from the point
//! farthest from its assigned centroid. Multiple restarts keep the best
//! within-cluster sum of squares.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Tensor,
    /// Within-cluster sum of squares at convergence.
    pub wcss: f64,
    pub iterations: usize,
    /// WCSS after each Lloyd assignment step (nonincreasing).
    pub wcss_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        s += d * d;
    }
    s
}

fn plus_plus_init(data: &Tensor, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = data.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.gen::<usize>() % n);
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i), data.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a centroid; pick round-robin
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        } else {
            let mut dart = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                dart -= w;
                if dart <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        chosen.push(next);
        for (i, slot) in d2.iter_mut().enumerate() {
            let d = sq_dist(data.row(i), data.row(next));
            if d < *slot {
                *slot = d;
            }
        }
    }
    chosen
}

fn lloyd(
    data: &Tensor,
    k: usize,
    seed_points: &[usize],
    max_iters: usize,
    tol: f64,
) -> KmeansResult {
    let (n, d) = (data.rows(), data.cols());
    let mut centroids: Vec<f64> = seed_points
        .iter()
        .flat_map(|&i| data.row(i).to_vec())
        .collect();
    let mut assignments = vec![0usize; n];
    let mut wcss_history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        // assignment step
        let mut wcss = 0.0;
        for i in 0..n {
            let row = data.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(row, &centroids[c * d..(c + 1) * d]);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assignments[i] = best;
            wcss += best_d;
        }
        wcss_history.push(wcss);

        // update step
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(data.row(i).iter()) {
                *s += x;
            }
        }
        // empty cluster: re-seed from the point farthest from its centroid
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(data.row(a), &centroids[assignments[a] * d..(assignments[a] + 1) * d]);
                        let db = sq_dist(data.row(b), &centroids[assignments[b] * d..(assignments[b] + 1) * d]);
                        da.partial_cmp(&db).expect("finite distances")
                    })
                    .expect("nonempty data");
                counts[c] = 1;
                sums[c * d..(c + 1) * d].copy_from_slice(data.row(far));
                assignments[far] = c;
            }
        }

        let mut movement: f64 = 0.0;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let old = centroids[c * d..(c + 1) * d].to_vec();
            for (j, slot) in centroids[c * d..(c + 1) * d].iter_mut().enumerate() {
                *slot = sums[c * d + j] * inv;
            }
            movement = movement.max(sq_dist(&old, &centroids[c * d..(c + 1) * d]).sqrt());
        }
        if movement < tol {
            break;
        }
    }

    // final assignment against converged centroids
    let mut wcss = 0.0;
    for i in 0..n {
        let row = data.row(i);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let dist = sq_dist(row, &centroids[c * d..(c + 1) * d]);
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        assignments[i] = best;
        wcss += best_d;
    }
    wcss_history.push(wcss);

    KmeansResult {
        assignments,
        centroids: Tensor::new(vec![k, d], centroids).expect("centroid shape"),
        wcss,
        iterations,
        wcss_history,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KmeansOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for KmeansOptions {
    fn default() -> Self {
        KmeansOptions {
            max_iters: 300,
            tol: 1e-6,
            restarts: 5,
        }
    }
}

/// Cluster the rows of `data` into `k` groups.
pub fn kmeans(data: &Tensor, k: usize, seed: u64, opts: &KmeansOptions) -> Result<KmeansResult> {
    let n = data.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {} must lie in [1, {} samples]",
            k, n
        )));
    }
    let mut best: Option<KmeansResult> = None;
    for r in 0..opts.restarts.max(1) {
        let mut stream = rng::stream(seed, "kmeans-restart", &[r as u64]);
        let seeds = plus_plus_init(data, k, &mut stream);
        let res = lloyd(data, k, &seeds, opts.max_iters, opts.tol);
        if best.as_ref().map_or(true, |b| res.wcss < b.wcss) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Fraction of samples whose cluster's majority label matches their own.
pub fn purity(assignments: &[usize], labels: &[usize], k: usize) -> f64 {
    let n_labels = labels.iter().max().map(|&m| m + 1).unwrap_or(0);
    let mut counts = vec![vec![0usize; n_labels]; k];
    for (&a, &l) in assignments.iter().zip(labels.iter()) {
        counts[a][l] += 1;
    }
    let hits: usize = counts
        .iter()
        .map(|c| c.iter().max().copied().unwrap_or(0))
        .sum();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn single_cluster_centroid_is_mean() {
        let data = Tensor::new(vec![4, 2], vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
        let res = kmeans(&data, 1, 0, &KmeansOptions::default()).unwrap();
        assert!(res.assignments.iter().all(|&a| a == 0));
        assert_eq!(res.centroids.data(), &[1.0, 1.0]);
    }

    #[test]
    fn two_masses_recovered_exactly() {
        let mut rng = crate::rng::stream(9, "km", &[]);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let base = if i % 2 == 0 { -5.0 } else { 5.0 };
            labels.push(i % 2);
            rows.extend([base + 0.01 * rng.gen::<f64>(), base - 0.01 * rng.gen::<f64>()]);
        }
        let data = Tensor::new(vec![60, 2], rows).unwrap();
        let res = kmeans(&data, 2, 3, &KmeansOptions::default()).unwrap();
        assert!((purity(&res.assignments, &labels, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wcss_nonincreasing_and_deterministic() {
        let mut rng = crate::rng::stream(10, "km2", &[]);
        let data = Tensor::randn(&[100, 4], 1.0, &mut rng);
        let a = kmeans(&data, 5, 7, &KmeansOptions::default()).unwrap();
        let b = kmeans(&data, 5, 7, &KmeansOptions::default()).unwrap();
        assert_eq!(a.assignments, b.assignments);
        for w in a.wcss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "wcss increased: {:?}", w);
        }
    }

    #[test]
    fn k_larger_than_n_rejected() {
        let data = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(kmeans(&data, 3, 0, &KmeansOptions::default()).is_err());
    }

    #[test]
    fn duplicate_heavy_data_separates_distinct_locations() {
        // coincident points force k-means++ fallbacks and empty-cluster
        // reseeding; three distinct locations must end up in three clusters
        let mut rows = vec![0.0; 2 * 5];
        rows.extend([9.0, 9.0, -9.0, 3.0]);
        let data = Tensor::new(vec![7, 2], rows).unwrap();
        let res = kmeans(&data, 3, 1, &KmeansOptions::default()).unwrap();
        assert_eq!(res.assignments.len(), 7);
        let a_dup = res.assignments[0];
        assert!(res.assignments[..5].iter().all(|&a| a == a_dup));
        assert_ne!(res.assignments[5], a_dup);
        assert_ne!(res.assignments[6], a_dup);
        assert_ne!(res.assignments[5], res.assignments[6]);
        assert!(res.wcss < 1e-9, "three exact locations: wcss {}", res.wcss);

        // degenerate case (fewer distinct points than k) still terminates
        let degen = Tensor::new(vec![9, 2], {
            let mut r = vec![0.0; 16];
            r.extend([9.0, 9.0]);
            r
        })
        .unwrap();
        let res = kmeans(&degen, 3, 1, &KmeansOptions::default()).unwrap();
        assert_eq!(res.assignments.len(), 9);
    }
}
