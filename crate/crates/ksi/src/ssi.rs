//! Semantic integration: PCA-compressed modality features, per-epoch
//! negative pools, and the InfoNCE feature-retrieval loss.
//!
//! The retrieval task scores an item's propagated embedding against its own
//! reduced feature vector (positive) and K randomly drawn feature vectors of
//! other items (negatives), with raw dot-product similarity and temperature
//! scaling. Pools are redrawn before every epoch.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::FeatureMatrix;
use crate::error::{KsiError, Result};
use crate::linalg;

/// PCA-reduced modality features plus the fitted transform for provenance.
#[derive(Debug, Clone)]
pub struct ReducedFeatures {
    pub modality: String,
    /// N_I x d reduced matrix.
    pub reduced: Array2<f64>,
    /// d_m x d orthonormal basis (columns), sign-fixed.
    pub basis: Array2<f64>,
    /// Per-input-dimension mean used for centering.
    pub mean: Array1<f64>,
    /// Fraction of total variance captured by each component.
    pub explained_variance_ratio: Vec<f64>,
}

/// Fit PCA on the full feature matrix and project to `dim` components.
///
/// Centering, covariance (denominator N-1), leading eigenvectors. The sign
/// of each basis column is fixed so its largest-magnitude entry is positive,
/// making the output reproducible bit-for-bit. Components beyond the data
/// rank come out as zero vectors with a warning.
pub fn pca_reduce(features: &FeatureMatrix, dim: usize) -> Result<ReducedFeatures> {
    let n = features.n_items();
    let d_m = features.dim();
    if dim == 0 {
        return Err(KsiError::Config("PCA target dim must be >= 1".to_string()));
    }
    if dim > d_m {
        return Err(KsiError::Config(format!(
            "target dim exceeds feature dim ({dim} > {d_m})"
        )));
    }
    if dim > n {
        return Err(KsiError::Config(format!(
            "target dim exceeds item count ({dim} > {n})"
        )));
    }

    // Column means in f64.
    let mut mean = Array1::<f64>::zeros(d_m);
    for row in features.values.rows() {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += *v as f64;
        }
    }
    mean /= n as f64;

    // Covariance accumulated over row blocks; each block is centered before
    // the rank-update so no full centered copy is materialized.
    let block = 1024usize;
    let mut cov = Array2::<f64>::zeros((d_m, d_m));
    for start in (0..n).step_by(block) {
        let end = (start + block).min(n);
        let mut centered = Array2::<f64>::zeros((end - start, d_m));
        for (bi, i) in (start..end).enumerate() {
            for j in 0..d_m {
                centered[[bi, j]] = features.values[[i, j]] as f64 - mean[j];
            }
        }
        cov += &centered.t().dot(&centered);
    }
    cov /= n as f64 - 1.0;
    let total_variance: f64 = (0..d_m).map(|i| cov[[i, i]]).sum();

    let (eigvals, mut basis) = linalg::top_eigenpairs(&cov, dim)?;

    // Rank handling and the deterministic sign convention.
    let lambda_max = eigvals.iter().cloned().fold(0.0f64, f64::max);
    let rank_tol = lambda_max * 1e-10;
    let mut zeroed = 0usize;
    for j in 0..dim {
        if eigvals[j] <= rank_tol {
            for r in 0..d_m {
                basis[[r, j]] = 0.0;
            }
            zeroed += 1;
            continue;
        }
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for r in 0..d_m {
            let a = basis[[r, j]].abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if basis[[best, j]] < 0.0 {
            for r in 0..d_m {
                basis[[r, j]] = -basis[[r, j]];
            }
        }
    }
    if zeroed > 0 {
        log::warn!(
            "PCA for modality '{}': {zeroed} of {dim} components exceed the data rank and are zero",
            features.modality
        );
    }

    let explained_variance_ratio: Vec<f64> = eigvals
        .iter()
        .map(|l| {
            if total_variance > 0.0 {
                (l / total_variance).max(0.0)
            } else {
                0.0
            }
        })
        .collect();

    // Projection, again block-streamed.
    let mut reduced = Array2::<f64>::zeros((n, dim));
    for start in (0..n).step_by(block) {
        let end = (start + block).min(n);
        let mut centered = Array2::<f64>::zeros((end - start, d_m));
        for (bi, i) in (start..end).enumerate() {
            for j in 0..d_m {
                centered[[bi, j]] = features.values[[i, j]] as f64 - mean[j];
            }
        }
        let proj = centered.dot(&basis);
        for (bi, i) in (start..end).enumerate() {
            for j in 0..dim {
                reduced[[i, j]] = proj[[bi, j]];
            }
        }
    }

    Ok(ReducedFeatures {
        modality: features.modality.clone(),
        reduced,
        basis,
        mean,
        explained_variance_ratio,
    })
}

/// Default negative pool size: `max(1, N_I / 512)`.
pub fn default_pool_size(n_items: usize) -> usize {
    (n_items / 512).max(1)
}

/// Per-item, per-modality negative sample indices, redrawn each epoch.
#[derive(Debug, Clone)]
pub struct NegativePool {
    n_items: usize,
    k: usize,
    /// `per_modality[m][i * k + j]` is the j-th negative of item i.
    per_modality: Vec<Vec<u32>>,
}

impl NegativePool {
    /// Draw K distinct negatives per (modality, item), never including the
    /// item itself, uniformly without replacement.
    pub fn sample(
        n_items: usize,
        n_modalities: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if k >= n_items {
            return Err(KsiError::Config(format!(
                "negative pool size {k} must be smaller than the item count {n_items}"
            )));
        }
        if k == 0 {
            return Err(KsiError::Config("negative pool size must be >= 1".to_string()));
        }
        let mut per_modality = Vec::with_capacity(n_modalities);
        for _ in 0..n_modalities {
            let mut pool = Vec::with_capacity(n_items * k);
            for i in 0..n_items as u32 {
                sample_distinct_excluding(n_items as u32, k, i, rng, &mut pool);
            }
            per_modality.push(pool);
        }
        Ok(NegativePool {
            n_items,
            k,
            per_modality,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn negatives(&self, modality: usize, item: usize) -> &[u32] {
        let lo = item * self.k;
        &self.per_modality[modality][lo..lo + self.k]
    }
}

/// Uniform sample of `k` distinct values from `{0..n} \ {exclude}`,
/// appended to `out`. Rejection sampling when the pool is sparse relative to
/// the range, partial Fisher-Yates over the complement otherwise.
fn sample_distinct_excluding(n: u32, k: usize, exclude: u32, rng: &mut ChaCha8Rng, out: &mut Vec<u32>) {
    let legal = (n - 1) as usize;
    if k * 2 <= legal {
        let start = out.len();
        while out.len() - start < k {
            let cand = rng.gen_range(0..n);
            if cand == exclude || out[start..].contains(&cand) {
                continue;
            }
            out.push(cand);
        }
    } else {
        let mut complement: Vec<u32> = (0..n).filter(|v| *v != exclude).collect();
        for j in 0..k {
            let pick = rng.gen_range(j..complement.len());
            complement.swap(j, pick);
            out.push(complement[j]);
        }
    }
}

/// InfoNCE retrieval loss.
///
/// Returns the weighted total and the per-modality term sums (the gradient
/// of the loss with respect to each modality weight).
pub fn infonce_loss(
    tops: &[&Array2<f64>],
    reduced: &[&Array2<f64>],
    pool: &NegativePool,
    weights: &[f64],
    tau: f64,
    item_subset: Option<&[u32]>,
) -> Result<(f64, Vec<f64>)> {
    let (total, per_modality, _) = infonce_inner(tops, reduced, pool, weights, tau, item_subset, false)?;
    Ok((total, per_modality))
}

/// InfoNCE loss with gradients.
///
/// The third element holds dLoss/dH^{m,(L)} per modality (modality weight
/// already applied); the reduced features are constants and receive no
/// gradient.
pub fn infonce_loss_with_grads(
    tops: &[&Array2<f64>],
    reduced: &[&Array2<f64>],
    pool: &NegativePool,
    weights: &[f64],
    tau: f64,
    item_subset: Option<&[u32]>,
) -> Result<(f64, Vec<f64>, Vec<Array2<f64>>)> {
    let (total, per_modality, grads) =
        infonce_inner(tops, reduced, pool, weights, tau, item_subset, true)?;
    Ok((total, per_modality, grads))
}

fn infonce_inner(
    tops: &[&Array2<f64>],
    reduced: &[&Array2<f64>],
    pool: &NegativePool,
    weights: &[f64],
    tau: f64,
    item_subset: Option<&[u32]>,
    want_grads: bool,
) -> Result<(f64, Vec<f64>, Vec<Array2<f64>>)> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(KsiError::Config(format!("temperature must be positive, got {tau}")));
    }
    let n_mod = tops.len();
    if reduced.len() != n_mod || weights.len() != n_mod {
        return Err(KsiError::Shape(
            "modality counts of embeddings, features and weights differ".to_string(),
        ));
    }

    let mut per_modality = Vec::with_capacity(n_mod);
    let mut grads = Vec::with_capacity(n_mod);
    let mut total = 0.0;

    for m in 0..n_mod {
        let top = tops[m];
        let feats = reduced[m];
        if top.nrows() != pool.n_items || feats.nrows() != pool.n_items {
            return Err(KsiError::Shape(format!(
                "modality {m}: embeddings ({}) / features ({}) rows must equal item count {}",
                top.nrows(),
                feats.nrows(),
                pool.n_items
            )));
        }
        if top.ncols() != feats.ncols() {
            return Err(KsiError::Shape(format!(
                "modality {m}: embedding dim {} != reduced feature dim {}",
                top.ncols(),
                feats.ncols()
            )));
        }
        let d = top.ncols();

        let items: Vec<u32> = match item_subset {
            Some(subset) => subset.to_vec(),
            None => (0..pool.n_items as u32).collect(),
        };

        // Per-item terms computed independently, reduced in item order.
        let results: Vec<(f64, Option<Vec<f64>>)> = items
            .par_iter()
            .map(|&iu| {
                let i = iu as usize;
                let h = top.row(i);
                let negs = pool.negatives(m, i);
                // Candidate logits: positive first, then the pool.
                let mut logits = Vec::with_capacity(negs.len() + 1);
                let dot = |j: usize| -> f64 {
                    h.iter().zip(feats.row(j).iter()).map(|(a, b)| a * b).sum::<f64>() / tau
                };
                logits.push(dot(i));
                for &npos in negs {
                    logits.push(dot(npos as usize));
                }
                // Log-sum-exp with max-shift for stability. The subtraction
                // is ordered so equal logits give exactly ln(K+1).
                let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = logits.iter().map(|z| (z - max_logit).exp()).sum();
                let lse = max_logit + sum_exp.ln();
                let term = (max_logit - logits[0]) + sum_exp.ln();

                let grad_row = if want_grads {
                    // d term / d h_i = (1/tau) * (sum_j p_j e_j - e_i)
                    let mut row = vec![0.0f64; d];
                    let p0 = (logits[0] - lse).exp();
                    for (g, e) in row.iter_mut().zip(feats.row(i).iter()) {
                        *g += (p0 - 1.0) * e;
                    }
                    for (idx, &npos) in negs.iter().enumerate() {
                        let p = (logits[idx + 1] - lse).exp();
                        for (g, e) in row.iter_mut().zip(feats.row(npos as usize).iter()) {
                            *g += p * e;
                        }
                    }
                    for g in row.iter_mut() {
                        *g /= tau;
                    }
                    Some(row)
                } else {
                    None
                };
                (term, grad_row)
            })
            .collect();

        let mut modality_sum = 0.0;
        let mut grad = Array2::<f64>::zeros((pool.n_items, d));
        for (&iu, (term, grad_row)) in items.iter().zip(results.iter()) {
            modality_sum += term;
            if let Some(row) = grad_row {
                let i = iu as usize;
                for (j, g) in row.iter().enumerate() {
                    grad[[i, j]] = weights[m] * g;
                }
            }
        }
        total += weights[m] * modality_sum;
        per_modality.push(modality_sum);
        if want_grads {
            grads.push(grad);
        }
    }
    Ok((total, per_modality, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn feat(rows: Vec<Vec<f32>>) -> FeatureMatrix {
        let ncols = rows[0].len();
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        FeatureMatrix::new(
            "v",
            Array2::from_shape_vec((rows.len(), ncols), flat).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn pca_rank_one_explains_everything() {
        let f = feat(vec![
            vec![1.0, 2.0, -1.0],
            vec![2.0, 4.0, -2.0],
            vec![-1.0, -2.0, 1.0],
            vec![0.5, 1.0, -0.5],
        ]);
        let r = pca_reduce(&f, 1).unwrap();
        assert_abs_diff_eq!(r.explained_variance_ratio[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn pca_output_variance_matches_eigenvalue_oracle() {
        // Oracle: eigenvalues of the covariance via power iteration with
        // deflation, independent of the production eigensolver.
        let mut rng = crate::seed::rng_for(41, "test");
        let n = 30;
        let d_m = 7;
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d_m).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect())
            .collect();
        let f = feat(rows);
        let dim = 4;
        let r = pca_reduce(&f, dim).unwrap();

        // Sum of output column sample variances.
        let mut var_sum = 0.0;
        for j in 0..dim {
            let col = r.reduced.column(j);
            let mean = col.sum() / n as f64;
            var_sum += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        }

        // Oracle covariance.
        let mut mean = vec![0.0f64; d_m];
        for row in f.values.rows() {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += *v as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut cov = vec![vec![0.0f64; d_m]; d_m];
        for row in f.values.rows() {
            for a in 0..d_m {
                for b in 0..d_m {
                    cov[a][b] +=
                        (row[a] as f64 - mean[a]) * (row[b] as f64 - mean[b]) / (n as f64 - 1.0);
                }
            }
        }
        let eigs = power_iteration_eigenvalues(&cov, dim);
        let eig_sum: f64 = eigs.iter().sum();
        assert_abs_diff_eq!(var_sum, eig_sum, epsilon = 1e-8);
    }

    /// Power iteration with deflation; test-only oracle.
    fn power_iteration_eigenvalues(cov: &[Vec<f64>], k: usize) -> Vec<f64> {
        let n = cov.len();
        let mut a: Vec<Vec<f64>> = cov.to_vec();
        let mut out = Vec::new();
        for comp in 0..k {
            let mut v: Vec<f64> = (0..n)
                .map(|i| ((i + 3 * comp + 1) as f64).sin())
                .collect();
            let mut lambda = 0.0;
            for _ in 0..20_000 {
                let mut w = vec![0.0f64; n];
                for r in 0..n {
                    for c in 0..n {
                        w[r] += a[r][c] * v[c];
                    }
                }
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-300 {
                    lambda = 0.0;
                    break;
                }
                for x in w.iter_mut() {
                    *x /= norm;
                }
                lambda = norm;
                v = w;
            }
            out.push(lambda);
            for r in 0..n {
                for c in 0..n {
                    a[r][c] -= lambda * v[r] * v[c];
                }
            }
        }
        out
    }

    #[test]
    fn pca_full_dim_preserves_pairwise_distances() {
        let mut rng = crate::seed::rng_for(42, "test");
        let n = 12;
        let d_m = 5;
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d_m).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect())
            .collect();
        let f = feat(rows);
        let r = pca_reduce(&f, d_m).unwrap();
        for i in 0..n {
            for j in (i + 1)..n {
                let orig: f64 = (0..d_m)
                    .map(|c| {
                        let diff = f.values[[i, c]] as f64 - f.values[[j, c]] as f64;
                        diff * diff
                    })
                    .sum::<f64>()
                    .sqrt();
                let proj: f64 = (0..d_m)
                    .map(|c| {
                        let diff = r.reduced[[i, c]] - r.reduced[[j, c]];
                        diff * diff
                    })
                    .sum::<f64>()
                    .sqrt();
                assert_abs_diff_eq!(orig, proj, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn pca_beyond_rank_produces_zero_components() {
        // Rank-1 data, ask for 2 components.
        let f = feat(vec![
            vec![1.0, 1.0],
            vec![2.0, 2.0],
            vec![3.0, 3.0],
        ]);
        let r = pca_reduce(&f, 2).unwrap();
        for i in 0..3 {
            assert_eq!(r.reduced[[i, 1]], 0.0);
        }
    }

    #[test]
    fn pca_basis_is_orthonormal_and_sign_fixed() {
        let mut rng = crate::seed::rng_for(43, "test");
        let rows: Vec<Vec<f32>> = (0..20)
            .map(|_| (0..6).map(|_| rng.gen::<f32>() - 0.5).collect())
            .collect();
        let f = feat(rows);
        let r = pca_reduce(&f, 3).unwrap();
        let gram = r.basis.t().dot(&r.basis);
        for ((i, j), v) in gram.indexed_iter() {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(*v, expect, epsilon = 1e-8);
        }
        for j in 0..3 {
            let col = r.basis.column(j);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(b.abs()));
            let has_max_positive = col.iter().any(|v| (v.abs() - max).abs() < 1e-15 && *v > 0.0);
            assert!(has_max_positive, "column {j} not sign-fixed");
        }
        // Bit-identical refits.
        let r2 = pca_reduce(&f, 3).unwrap();
        assert_eq!(r.basis, r2.basis);
        assert_eq!(r.reduced, r2.reduced);
    }

    #[test]
    fn pca_dim_validation() {
        let f = feat(vec![vec![1.0, 2.0], vec![0.5, 0.1], vec![0.3, 0.9]]);
        assert!(pca_reduce(&f, 3).is_err()); // > d_m
        assert!(pca_reduce(&f, 0).is_err());
    }

    #[test]
    fn pool_excludes_self_and_duplicates() {
        let mut rng = crate::seed::rng_for(44, "ssi-pool");
        let pool = NegativePool::sample(3, 1, 1, &mut rng).unwrap();
        let negs = pool.negatives(0, 0);
        assert_eq!(negs.len(), 1);
        assert!(negs[0] == 1 || negs[0] == 2);
        for i in 0..3 {
            let negs = pool.negatives(0, i);
            assert!(!negs.contains(&(i as u32)));
        }
    }

    #[test]
    fn pool_size_rule() {
        assert_eq!(default_pool_size(23_033), 44);
        assert_eq!(default_pool_size(100), 1);
        assert_eq!(default_pool_size(512), 1);
        assert_eq!(default_pool_size(1024), 2);
    }

    #[test]
    fn pool_rejects_k_not_below_n() {
        let mut rng = crate::seed::rng_for(45, "ssi-pool");
        assert!(NegativePool::sample(3, 1, 3, &mut rng).is_err());
    }

    #[test]
    fn pool_draws_are_uniform() {
        // N=5, K=2: each non-self item should appear with frequency 1/2.
        let n_draws = 10_000;
        let mut counts = [0usize; 5];
        let mut rng = crate::seed::rng_for(46, "ssi-pool");
        for _ in 0..n_draws {
            let pool = NegativePool::sample(5, 1, 2, &mut rng).unwrap();
            for &v in pool.negatives(0, 0) {
                counts[v as usize] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        let sigma = (n_draws as f64 * 0.5 * 0.5).sqrt();
        for &c in &counts[1..] {
            assert!(
                (c as f64 - n_draws as f64 / 2.0).abs() < 3.0 * sigma,
                "count {c} outside 3 sigma"
            );
        }
    }

    #[test]
    fn infonce_equal_logits_gives_ln2() {
        // One negative whose logit equals the positive's.
        let top = array![[1.0, 0.0], [1.0, 0.0]];
        let feats = array![[0.5, 0.0], [0.5, 0.0]];
        let mut rng = crate::seed::rng_for(47, "ssi-pool");
        let pool = NegativePool::sample(2, 1, 1, &mut rng).unwrap();
        let (loss, sums) =
            infonce_loss(&[&top], &[&feats], &pool, &[1.0], 1.0, None).unwrap();
        assert_abs_diff_eq!(loss, 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(sums[0], loss, epsilon = 1e-12);
    }

    #[test]
    fn infonce_saturated_positive_vanishes() {
        let top = array![[10.0, 0.0], [0.0, 10.0]];
        let feats = array![[10.0, 0.0], [0.0, 10.0]];
        let mut rng = crate::seed::rng_for(48, "ssi-pool");
        let pool = NegativePool::sample(2, 1, 1, &mut rng).unwrap();
        let (loss, _) = infonce_loss(&[&top], &[&feats], &pool, &[1.0], 0.1, None).unwrap();
        assert!(loss < 1e-12, "saturated loss should vanish, got {loss}");
        let (_, _, grads) =
            infonce_loss_with_grads(&[&top], &[&feats], &pool, &[1.0], 0.1, None).unwrap();
        for g in grads[0].iter() {
            assert!(g.abs() < 1e-10);
        }
    }

    #[test]
    fn infonce_direct_two_candidate_evaluation() {
        // pos logit 1.0, neg logit 0.5 at tau = 1: term = ln(1 + e^{-0.5}).
        let top = array![[1.0], [9.9]];
        let feats = array![[1.0], [0.5]];
        let mut rng = crate::seed::rng_for(49, "ssi-pool");
        let pool = NegativePool::sample(2, 1, 1, &mut rng).unwrap();
        let (_, sums) = infonce_loss(&[&top], &[&feats], &pool, &[1.0], 1.0, Some(&[0])).unwrap();
        assert_abs_diff_eq!(sums[0], (1.0 + (-0.5f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(sums[0], 0.474076984, epsilon = 1e-8);
    }

    #[test]
    fn infonce_terms_are_nonnegative_and_shift_invariant() {
        let mut rng = crate::seed::rng_for(50, "test");
        let n = 6;
        let d = 3;
        let top = Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() - 0.5);
        let feats = Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() - 0.5);
        let mut pool_rng = crate::seed::rng_for(50, "ssi-pool");
        let pool = NegativePool::sample(n, 1, 2, &mut pool_rng).unwrap();

        for i in 0..n as u32 {
            let (_, sums) =
                infonce_loss(&[&top], &[&feats], &pool, &[1.0], 0.5, Some(&[i])).unwrap();
            assert!(sums[0] >= 0.0, "per-item term must be nonnegative");
        }

        // All candidates equal -> ln(K+1) exactly.
        let const_feats = Array2::from_elem((n, d), 0.25);
        let (_, sums) =
            infonce_loss(&[&top], &[&const_feats], &pool, &[1.0], 0.5, Some(&[2])).unwrap();
        assert_eq!(sums[0], (pool.k() as f64 + 1.0).ln());

        // Softmax shift invariance: adding a constant to every logit of one
        // item leaves that item's term unchanged. Shifting all candidate
        // feature vectors by a fixed vector shifts item 1's logits by
        // h_1 . v / tau uniformly.
        let item = 1u32;
        let (_, base) = infonce_loss(&[&top], &[&feats], &pool, &[1.0], 0.5, Some(&[item])).unwrap();
        let shift = ndarray::Array1::from_vec(vec![0.7, -0.3, 0.2]);
        let shifted = &feats + &shift.broadcast((n, d)).unwrap();
        let (_, moved) =
            infonce_loss(&[&top], &[&shifted], &pool, &[1.0], 0.5, Some(&[item])).unwrap();
        assert_abs_diff_eq!(base[0], moved[0], epsilon = 1e-10);
    }

    #[test]
    fn infonce_gradients_match_finite_differences() {
        let mut rng = crate::seed::rng_for(51, "test");
        let n = 4;
        let d = 3;
        let top = Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() - 0.5);
        let feats = Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() - 0.5);
        let mut pool_rng = crate::seed::rng_for(51, "ssi-pool");
        let pool = NegativePool::sample(n, 2, 2, &mut pool_rng).unwrap();
        let feats2 = Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() - 0.5);
        let top2 = Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() - 0.5);
        let weights = [0.4, 0.6];
        let tau = 0.3;

        let (_, _, grads) = infonce_loss_with_grads(
            &[&top, &top2],
            &[&feats, &feats2],
            &pool,
            &weights,
            tau,
            None,
        )
        .unwrap();

        let eps = 1e-6;
        for m in 0..2 {
            for r in 0..n {
                for c in 0..d {
                    let mut tp = if m == 0 { top.clone() } else { top2.clone() };
                    tp[[r, c]] += eps;
                    let mut tm = if m == 0 { top.clone() } else { top2.clone() };
                    tm[[r, c]] -= eps;
                    let args_p: Vec<&Array2<f64>> = if m == 0 {
                        vec![&tp, &top2]
                    } else {
                        vec![&top, &tp]
                    };
                    let args_m: Vec<&Array2<f64>> = if m == 0 {
                        vec![&tm, &top2]
                    } else {
                        vec![&top, &tm]
                    };
                    let (lp, _) =
                        infonce_loss(&args_p, &[&feats, &feats2], &pool, &weights, tau, None)
                            .unwrap();
                    let (lm, _) =
                        infonce_loss(&args_m, &[&feats, &feats2], &pool, &weights, tau, None)
                            .unwrap();
                    let fd = (lp - lm) / (2.0 * eps);
                    let g = grads[m][[r, c]];
                    let denom = g.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        ((g - fd) / denom).abs() < 1e-6,
                        "modality {m} grad mismatch at ({r},{c}): {g} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn infonce_tau_scaling_relation() {
        // With logits doubled and tau doubled the probabilities match, and
        // the chain rule halves the gradients.
        let mut rng = crate::seed::rng_for(52, "test");
        let n = 4;
        let d = 2;
        let top = Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() - 0.5);
        let feats = Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() - 0.5);
        let mut pool_rng = crate::seed::rng_for(52, "ssi-pool");
        let pool = NegativePool::sample(n, 1, 2, &mut pool_rng).unwrap();

        let (loss_a, _, grads_a) =
            infonce_loss_with_grads(&[&top], &[&feats], &pool, &[1.0], 0.5, None).unwrap();
        let top_doubled = &top * 2.0;
        let (loss_b, _, grads_b) =
            infonce_loss_with_grads(&[&top_doubled], &[&feats], &pool, &[1.0], 1.0, None).unwrap();
        assert_abs_diff_eq!(loss_a, loss_b, epsilon = 1e-12);
        for (a, b) in grads_a[0].iter().zip(grads_b[0].iter()) {
            assert_abs_diff_eq!(*a, 2.0 * b, epsilon = 1e-10);
        }
    }
}
