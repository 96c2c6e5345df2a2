//! Steering-vector elicitation.
//!
//! Contrastive activation pairs are harvested from filtered rigorous/sloppy
//! generations, their differences analyzed (PCA, cosine structure), clustered
//! with k-means, and the normalized cluster centroids packaged as the
//! primitive library the router composes at inference.

mod kmeans;
mod pca;

pub use kmeans::{kmeans, purity, KmeansOptions, KmeansResult};
pub use pca::{pca_report, PcaReport};

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{generate, FrozenModel, Sampling};
use crate::rng;
use crate::tasks::{self, ContrastPair, Skill, TaskInstance, Token};
use crate::tensor::{self, Tensor};

/// One accepted contrastive activation pair at the intervention layer.
#[derive(Clone, Debug)]
pub struct DifferencePair {
    pub h_plus: Vec<f64>,
    pub h_minus: Vec<f64>,
    pub skill: Skill,
    pub instance_seed: u64,
}

impl DifferencePair {
    pub fn diff(&self) -> Vec<f64> {
        self.h_plus
            .iter()
            .zip(self.h_minus.iter())
            .map(|(a, b)| a - b)
            .collect()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub accepted: usize,
    pub rejected_positive: usize,
    pub rejected_gap: usize,
    pub rejected_parity: usize,
}

impl FilterStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.accepted as f64 / self.total as f64
        }
    }
}

/// Generate under both framings, filter for a real reasoning gap, and record
/// the last-token hiddens of both prompts at layer `l`.
pub fn collect_pairs(
    model: &FrozenModel,
    pairs: &[ContrastPair],
    l: usize,
    length_band: (f64, f64),
) -> Result<(Vec<DifferencePair>, FilterStats)> {
    let results: Vec<Result<Option<DifferencePair>>> = pairs
        .par_iter()
        .map(|pair| {
            let max_steps = pair.instance.gold.len() + 2;
            let mut rng = rng::stream(0, "collect-pos", &[pair.instance.seed]);
            let pos = generate(
                model,
                &pair.positive_prompt,
                None,
                l,
                max_steps,
                Sampling::Greedy,
                tasks::EOS,
                &mut rng,
            )?;
            let neg = generate(
                model,
                &pair.negative_prompt,
                None,
                l,
                max_steps,
                Sampling::Greedy,
                tasks::EOS,
                &mut rng,
            )?;
            match tasks::quality_filter(&pos.tokens, &neg.tokens, &pair.instance, length_band) {
                tasks::FilterOutcome::Accept => {
                    let h_plus = model.forward_to_layer(&pair.positive_prompt, l)?.hidden;
                    let h_minus = model.forward_to_layer(&pair.negative_prompt, l)?.hidden;
                    Ok(Some(DifferencePair {
                        h_plus,
                        h_minus,
                        skill: pair.instance.skill,
                        instance_seed: pair.instance.seed,
                    }))
                }
                tasks::FilterOutcome::Reject(_) => Ok(None),
            }
        })
        .collect();

    let mut stats = FilterStats {
        total: pairs.len(),
        ..Default::default()
    };
    let mut accepted = Vec::new();
    for (pair, res) in pairs.iter().zip(results) {
        match res? {
            Some(dp) => {
                stats.accepted += 1;
                accepted.push(dp);
            }
            None => {
                // classify the rejection once, sequentially (cheap re-check)
                let max_steps = pair.instance.gold.len() + 2;
                let mut rng = rng::stream(0, "collect-pos", &[pair.instance.seed]);
                let pos = generate(model, &pair.positive_prompt, None, l, max_steps, Sampling::Greedy, tasks::EOS, &mut rng)?;
                let neg = generate(model, &pair.negative_prompt, None, l, max_steps, Sampling::Greedy, tasks::EOS, &mut rng)?;
                match tasks::quality_filter(&pos.tokens, &neg.tokens, &pair.instance, length_band) {
                    tasks::FilterOutcome::Reject("positive generation not verified") => {
                        stats.rejected_positive += 1
                    }
                    tasks::FilterOutcome::Reject("no reasoning gap") => stats.rejected_gap += 1,
                    _ => stats.rejected_parity += 1,
                }
            }
        }
    }
    if accepted.is_empty() {
        return Err(Error::EmptyAccepted(format!(
            "all {} pairs rejected (positive-failed {}, no-gap {}, parity {})",
            stats.total, stats.rejected_positive, stats.rejected_gap, stats.rejected_parity
        )));
    }
    Ok((accepted, stats))
}

/// Stack difference vectors as rows of a tensor.
pub fn diff_matrix(pairs: &[DifferencePair]) -> Tensor {
    let d = pairs[0].h_plus.len();
    let mut data = Vec::with_capacity(pairs.len() * d);
    for p in pairs {
        data.extend(p.diff());
    }
    Tensor::new(vec![pairs.len(), d], data).expect("uniform dims")
}

/// The elicited library: unit-norm steering directions plus provenance.
#[derive(Clone, Debug)]
pub struct PrimitiveLibrary {
    /// `[K, d]`, each row L2-normalized (and f32-quantized, matching disk).
    pub vectors: Tensor,
    pub k: usize,
    pub layer: usize,
    /// Cluster index of every retained pair, in input order.
    pub assignments: Vec<usize>,
    /// Pre-normalization centroid norms (difference magnitudes per cluster).
    pub raw_norms: Vec<f64>,
    /// Fingerprint of the model the activations came from.
    pub model_fingerprint: [u8; 32],
}

impl PrimitiveLibrary {
    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Content hash binding routers to the library they were trained against.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update((self.k as u32).to_le_bytes());
        hasher.update((self.dim() as u32).to_le_bytes());
        hasher.update((self.layer as u32).to_le_bytes());
        hasher.update(self.model_fingerprint);
        for &x in self.vectors.data() {
            hasher.update((x as f32).to_le_bytes());
        }
        hasher.finalize().into()
    }
}

/// Normalized cluster centroids of the difference vectors.
pub fn build_library(
    pairs: &[DifferencePair],
    assignments: &[usize],
    k: usize,
    layer: usize,
    model_fingerprint: [u8; 32],
) -> Result<PrimitiveLibrary> {
    if pairs.is_empty() || assignments.len() != pairs.len() {
        return Err(Error::InvalidArgument(format!(
            "assignments ({}) must cover pairs ({})",
            assignments.len(),
            pairs.len()
        )));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
        return Err(Error::InvalidArgument(format!(
            "assignment {} out of range for k = {}",
            bad, k
        )));
    }
    let d = pairs[0].h_plus.len();
    let mut vectors = Vec::with_capacity(k * d);
    let mut raw_norms = Vec::with_capacity(k);
    for c in 0..k {
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for (p, &a) in pairs.iter().zip(assignments.iter()) {
            if a == c {
                for (s, x) in sum.iter_mut().zip(p.diff().iter()) {
                    *s += x;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InvalidArgument(format!("cluster {} is empty", c)));
        }
        for s in sum.iter_mut() {
            *s /= count as f64;
        }
        let norm = tensor::l2_norm(&sum);
        if norm < 1e-12 {
            return Err(Error::Numeric(format!(
                "cluster {} centroid has zero norm ({} members cancel out)",
                c, count
            )));
        }
        raw_norms.push(norm);
        vectors.extend(sum.iter().map(|x| x / norm));
    }
    // quantize like every other persisted artifact
    let vectors: Vec<f64> = vectors.iter().map(|&x| x as f32 as f64).collect();
    Ok(PrimitiveLibrary {
        vectors: Tensor::new(vec![k, d], vectors)?,
        k,
        layer,
        assignments: assignments.to_vec(),
        raw_norms,
        model_fingerprint,
    })
}

/// Pairwise cosine similarities of the library vectors.
pub fn cosine_matrix(library: &PrimitiveLibrary) -> Tensor {
    let k = library.k;
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            out[i * k + j] = tensor::cosine(library.vector(i), library.vector(j));
        }
    }
    Tensor::new(vec![k, k], out).expect("square")
}

/// Mean absolute off-diagonal cosine similarity.
pub fn mean_abs_off_diagonal(cos: &Tensor) -> f64 {
    let k = cos.rows();
    if k < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                acc += cos.data()[i * k + j].abs();
            }
        }
    }
    acc / (k * (k - 1)) as f64
}

/// Exact maximum-cosine matching between two same-size vector sets
/// (assignment problem by bitmask DP; fine for k <= 20).
pub fn match_centroids(a: &Tensor, b: &Tensor) -> Vec<(usize, usize, f64)> {
    let k = a.rows();
    assert_eq!(k, b.rows());
    assert!(k <= 20, "bitmask matching limited to k <= 20");
    let mut cos = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            cos[i * k + j] = tensor::cosine(a.row(i), b.row(j));
        }
    }
    let full = (1usize << k) - 1;
    let mut best = vec![f64::NEG_INFINITY; 1 << k];
    let mut choice = vec![usize::MAX; 1 << k];
    best[0] = 0.0;
    for mask in 0..full {
        if best[mask] == f64::NEG_INFINITY {
            continue;
        }
        let i = mask.count_ones() as usize;
        for j in 0..k {
            if mask & (1 << j) == 0 {
                let nm = mask | (1 << j);
                let score = best[mask] + cos[i * k + j];
                if score > best[nm] {
                    best[nm] = score;
                    choice[nm] = j;
                }
            }
        }
    }
    // reconstruct
    let mut pairs = Vec::with_capacity(k);
    let mut mask = full;
    while mask != 0 {
        let j = choice[mask];
        let i = mask.count_ones() as usize - 1;
        pairs.push((i, j, cos[i * k + j]));
        mask &= !(1 << j);
    }
    pairs.reverse();
    pairs
}

/// Synthesize planted-structure difference pairs: `k` random orthonormal unit
/// directions in `d` dimensions, `per` samples each, plus an isotropic
/// Gaussian noise vector of expected norm `sigma` (per-coordinate std
/// `sigma / sqrt(d)`). Returns the pairs, their planted labels, and the
/// planted directions as rows.
pub fn planted_difference_pairs(
    seed: u64,
    k: usize,
    per: usize,
    d: usize,
    sigma: f64,
) -> (Vec<DifferencePair>, Vec<usize>, Tensor) {
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rng::stream(seed, "planted-dirs", &[]);
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    while dirs.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
        for u in &dirs {
            let proj = tensor::dot(&v, u);
            for (x, y) in v.iter_mut().zip(u.iter()) {
                *x -= proj * y;
            }
        }
        let n = tensor::l2_norm(&v);
        if n > 1e-6 {
            for x in v.iter_mut() {
                *x /= n;
            }
            dirs.push(v);
        }
    }
    let noise = Normal::new(0.0, sigma / (d as f64).sqrt()).expect("positive sigma");
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for (c, dir) in dirs.iter().enumerate() {
        for _ in 0..per {
            let h_plus: Vec<f64> = dir.iter().map(|&x| x + noise.sample(&mut rng)).collect();
            pairs.push(DifferencePair {
                h_plus,
                h_minus: vec![0.0; d],
                skill: Skill::ModularArithmetic,
                instance_seed: labels.len() as u64,
            });
            labels.push(c);
        }
    }
    let mut dirm = Vec::with_capacity(k * d);
    for dir in &dirs {
        dirm.extend(dir.iter().cloned());
    }
    (
        pairs,
        labels,
        Tensor::new(vec![k, d], dirm).expect("direction matrix"),
    )
}

// -- static steering sweep ---------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub vector: usize,
    pub alpha: f64,
    pub skill: String,
    pub accuracy: f64,
    pub mean_tokens: f64,
}

/// Accuracy of single-vector steering at each strength, per family. The
/// alpha = 0 rows reproduce baseline accuracy exactly.
pub fn static_sweep(
    model: &FrozenModel,
    library: &PrimitiveLibrary,
    tasks_by_family: &[(Skill, Vec<TaskInstance>)],
    alphas: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let l = library.layer;
    let mut rows = Vec::new();
    for vec_idx in 0..library.k {
        for &alpha in alphas {
            let v: Vec<f64> = library.vector(vec_idx).iter().map(|x| x * alpha).collect();
            for (skill, instances) in tasks_by_family {
                let (hits, tokens) = eval_steered(model, instances, Some(&v), l, seed)?;
                rows.push(SweepRow {
                    vector: vec_idx,
                    alpha,
                    skill: skill.name().to_string(),
                    accuracy: hits as f64 / instances.len() as f64,
                    mean_tokens: tokens as f64 / instances.len() as f64,
                });
            }
        }
    }
    Ok(rows)
}

pub(crate) fn eval_steered(
    model: &FrozenModel,
    instances: &[TaskInstance],
    steer: Option<&[f64]>,
    l: usize,
    seed: u64,
) -> Result<(usize, usize)> {
    let results: Vec<Result<(usize, usize)>> = instances
        .par_iter()
        .map(|inst| {
            let mut rng = rng::stream(seed, "sweep-eval", &[inst.seed]);
            let out = generate(
                model,
                &inst.prompt,
                steer,
                l,
                inst.gold.len() + 2,
                Sampling::Greedy,
                tasks::EOS,
                &mut rng,
            )?;
            Ok((tasks::verify(&out.tokens, inst) as usize, out.token_count))
        })
        .collect();
    let mut hits = 0;
    let mut tokens = 0;
    for r in results {
        let (h, t) = r?;
        hits += h;
        tokens += t;
    }
    Ok((hits, tokens))
}

// -- library file -------------------------------------------------------------

const LIB_MAGIC: &[u8; 8] = b"SLLIB\0\0\0";
const LIB_VERSION: u32 = 1;

/// Sidecar metadata written next to the binary library file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LibraryMeta {
    pub k: usize,
    pub dim: usize,
    pub layer: usize,
    pub model_fingerprint: String,
    pub assignment_histogram: Vec<usize>,
    /// Per-cluster counts of source skill families.
    pub skill_histogram: Vec<std::collections::BTreeMap<String, usize>>,
    pub cosine: Vec<Vec<f64>>,
    pub mean_abs_off_diagonal: f64,
    pub pca_fractions: Vec<f64>,
    pub raw_norms: Vec<f64>,
    pub filter: FilterStats,
}

pub fn save_library(library: &PrimitiveLibrary, path: &Path) -> Result<()> {
    let p = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&p, e))?;
    f.write_all(LIB_MAGIC).map_err(|e| Error::io(&p, e))?;
    for v in [
        LIB_VERSION,
        library.k as u32,
        library.dim() as u32,
        library.layer as u32,
    ] {
        f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&p, e))?;
    }
    f.write_all(&library.model_fingerprint).map_err(|e| Error::io(&p, e))?;
    let mut blob = Vec::with_capacity(library.vectors.len() * 4);
    for &x in library.vectors.data() {
        blob.extend_from_slice(&(x as f32).to_le_bytes());
    }
    f.write_all(&blob).map_err(|e| Error::io(&p, e))?;
    let digest: [u8; 32] = Sha256::digest(&blob).into();
    f.write_all(&digest).map_err(|e| Error::io(&p, e))?;
    // assignments ride along (u32 count + u32 entries)
    f.write_all(&(library.assignments.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(&p, e))?;
    for &a in &library.assignments {
        f.write_all(&(a as u32).to_le_bytes()).map_err(|e| Error::io(&p, e))?;
    }
    for &n in &library.raw_norms {
        f.write_all(&n.to_le_bytes()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Load a library; when `expect_model` is given, a fingerprint mismatch is
/// rejected unless `allow_mismatch` overrides it.
pub fn load_library(
    path: &Path,
    expect_model: Option<&[u8; 32]>,
    allow_mismatch: bool,
) -> Result<PrimitiveLibrary> {
    let p = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(&p, e))?;
    let fmt = |detail: &str| Error::Format {
        path: p.clone(),
        detail: detail.to_string(),
    };
    if buf.len() < 8 + 16 + 32 {
        return Err(fmt("file too short"));
    }
    if &buf[..8] != LIB_MAGIC {
        return Err(fmt("bad magic"));
    }
    let rd_u32 = |off: usize| u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
    if rd_u32(8) != LIB_VERSION as usize {
        return Err(fmt("unsupported version"));
    }
    let k = rd_u32(12);
    let d = rd_u32(16);
    let layer = rd_u32(20);
    let mut model_fingerprint = [0u8; 32];
    model_fingerprint.copy_from_slice(&buf[24..56]);

    let blob_start = 56;
    let blob_end = blob_start + k * d * 4;
    if buf.len() < blob_end + 32 + 4 {
        return Err(fmt("truncated vector blob"));
    }
    let blob = &buf[blob_start..blob_end];
    let digest: [u8; 32] = Sha256::digest(blob).into();
    if digest != buf[blob_end..blob_end + 32] {
        return Err(fmt("vector hash mismatch"));
    }
    if let Some(expect) = expect_model {
        if *expect != model_fingerprint && !allow_mismatch {
            return Err(Error::Provenance(format!(
                "library was elicited from model {}, expected {}",
                hex::encode(model_fingerprint),
                hex::encode(expect)
            )));
        }
    }
    let vectors: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();

    let n_assign = rd_u32(blob_end + 32);
    let assign_start = blob_end + 36;
    let assign_end = assign_start + n_assign * 4;
    let norms_end = assign_end + k * 8;
    if buf.len() != norms_end {
        return Err(fmt("trailing metadata length mismatch"));
    }
    let assignments: Vec<usize> = (0..n_assign)
        .map(|i| rd_u32(assign_start + i * 4))
        .collect();
    let raw_norms: Vec<f64> = (0..k)
        .map(|i| {
            f64::from_le_bytes(
                buf[assign_end + i * 8..assign_end + (i + 1) * 8]
                    .try_into()
                    .unwrap(),
            )
        })
        .collect();

    Ok(PrimitiveLibrary {
        vectors: Tensor::new(vec![k, d], vectors)?,
        k,
        layer,
        assignments,
        raw_norms,
        model_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn planted_pairs(seed: u64, k: usize, per: usize, d: usize, sigma: f64) -> (Vec<DifferencePair>, Vec<usize>, Tensor) {
        let (pairs, labels, dirs) = crate::elicit::planted_difference_pairs(seed, k, per, d, sigma);
        (pairs, labels, dirs)
    }

    #[test]
    fn identical_cluster_vectors_give_unit_centroid() {
        let u = vec![3.0, 0.0, 4.0, 0.0];
        let pairs: Vec<DifferencePair> = (0..5)
            .map(|i| DifferencePair {
                h_plus: u.clone(),
                h_minus: vec![0.0; 4],
                skill: Skill::Ordering,
                instance_seed: i,
            })
            .collect();
        let lib = build_library(&pairs, &[0; 5], 1, 2, [0; 32]).unwrap();
        let v = lib.vector(0);
        assert!((v[0] - 0.6).abs() < 1e-6);
        assert!((v[2] - 0.8).abs() < 1e-6);
        assert!((tensor::l2_norm(v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cancelling_cluster_rejected() {
        let pairs = vec![
            DifferencePair {
                h_plus: vec![1.0, 0.0],
                h_minus: vec![0.0, 0.0],
                skill: Skill::Ordering,
                instance_seed: 0,
            },
            DifferencePair {
                h_plus: vec![-1.0, 0.0],
                h_minus: vec![0.0, 0.0],
                skill: Skill::Ordering,
                instance_seed: 1,
            },
        ];
        let err = build_library(&pairs, &[0, 0], 1, 2, [0; 32]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn planted_structure_recovered() {
        let (pairs, labels, dirs) = planted_pairs(3, 6, 200, 128, 0.2);
        let diffs = diff_matrix(&pairs);

        let report = pca_report(&diffs).unwrap();
        assert!(
            report.top_k_fraction(6) >= 0.85,
            "top-6 fraction {}",
            report.top_k_fraction(6)
        );

        let res = kmeans(&diffs, 6, 0, &KmeansOptions::default()).unwrap();
        assert!(purity(&res.assignments, &labels, 6) >= 0.95);

        let lib = build_library(&pairs, &res.assignments, 6, 5, [1; 32]).unwrap();
        let matching = match_centroids(&lib.vectors, &dirs);
        for (_, _, cos) in &matching {
            assert!(*cos >= 0.95, "centroid cosine {}", cos);
        }
        let cosm = cosine_matrix(&lib);
        assert!(mean_abs_off_diagonal(&cosm) < 0.1);
        for i in 0..6 {
            assert!((cosm.data()[i * 6 + i] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn centroid_identity_recompute_bitwise() {
        let (pairs, _, _) = planted_pairs(9, 3, 40, 16, 0.3);
        let res = kmeans(&diff_matrix(&pairs), 3, 1, &KmeansOptions::default()).unwrap();
        let lib = build_library(&pairs, &res.assignments, 3, 4, [2; 32]).unwrap();
        let lib2 = build_library(&pairs, &res.assignments, 3, 4, [2; 32]).unwrap();
        assert_eq!(lib.vectors.data(), lib2.vectors.data());
        assert_eq!(lib.raw_norms, lib2.raw_norms);
    }

    #[test]
    fn seed_stability_on_planted_data() {
        let (pairs, _, _) = planted_pairs(21, 6, 120, 64, 0.2);
        let diffs = diff_matrix(&pairs);
        let base = kmeans(&diffs, 6, 0, &KmeansOptions::default()).unwrap();
        for seed in 1..5u64 {
            let other = kmeans(&diffs, 6, seed, &KmeansOptions::default()).unwrap();
            let matching = match_centroids(&base.centroids, &other.centroids);
            for (_, _, cos) in matching {
                assert!(cos >= 0.9, "seed {} centroid cosine {}", seed, cos);
            }
        }
    }

    #[test]
    fn orthonormal_library_cosines() {
        let pairs: Vec<DifferencePair> = (0..3)
            .map(|i| {
                let mut h = vec![0.0; 4];
                h[i] = 2.5;
                DifferencePair {
                    h_plus: h,
                    h_minus: vec![0.0; 4],
                    skill: Skill::ParityLogic,
                    instance_seed: i as u64,
                }
            })
            .collect();
        let lib = build_library(&pairs, &[0, 1, 2], 3, 1, [0; 32]).unwrap();
        let cosm = cosine_matrix(&lib);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((cosm.data()[i * 3 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn library_round_trip_and_binding() {
        let (pairs, _, _) = planted_pairs(4, 4, 30, 32, 0.25);
        let res = kmeans(&diff_matrix(&pairs), 4, 2, &KmeansOptions::default()).unwrap();
        let lib = build_library(&pairs, &res.assignments, 4, 3, [7; 32]).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("library.bin");
        save_library(&lib, &path).unwrap();
        let back = load_library(&path, Some(&[7; 32]), false).unwrap();
        assert_eq!(back.vectors.data(), lib.vectors.data());
        assert_eq!(back.assignments, lib.assignments);
        assert_eq!(back.content_hash(), lib.content_hash());

        // wrong model fingerprint rejected unless overridden
        assert!(matches!(
            load_library(&path, Some(&[8; 32]), false),
            Err(Error::Provenance(_))
        ));
        assert!(load_library(&path, Some(&[8; 32]), true).is_ok());

        // truncation rejected
        let bytes = std::fs::read(&path).unwrap();
        let trunc = dir.path().join("trunc.bin");
        std::fs::write(&trunc, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_library(&trunc, None, false), Err(Error::Format { .. })));
    }
}
