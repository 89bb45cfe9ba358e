//! All-rank top-K evaluation: Recall@K, Precision@K, NDCG@K averaged over
//! users with a nonempty target set.
//!
//! Candidates are all items minus the user's masked history (train items
//! when scoring the validation split; train plus validation items when
//! scoring the test split). Ties in scores break by ascending item index so
//! results are platform-independent.

use ndarray::Array2;
use rayon::prelude::*;

use crate::data::InteractionTable;
use crate::error::{KsiError, Result};

/// Which held-out split supplies targets, and therefore what is masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    /// Targets: valid items. Mask: train items.
    Valid,
    /// Targets: test items. Mask: train and valid items.
    Test,
}

/// Mean metrics at each requested cutoff.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RankingResult {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub ndcg: Vec<f64>,
    /// Users with a nonempty target set (the metric denominators).
    pub n_users_evaluated: usize,
    /// All users in the table, for reference.
    pub n_users_total: usize,
}

impl RankingResult {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|x| *x == k).map(|i| self.recall[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|x| *x == k).map(|i| self.ndcg[i])
    }

    pub fn precision_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|x| *x == k).map(|i| self.precision[i])
    }
}

/// Full ranking of unmasked items by descending score, ties by ascending
/// item index. `mask` must be sorted.
pub fn rank_items(scores: &[f64], mask: &[u32]) -> Vec<u32> {
    let mut items: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| mask.binary_search(i).is_err())
        .collect();
    items.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .expect("scores must be finite")
            .then(a.cmp(&b))
    });
    items
}

/// Top `k` of [`rank_items`] without sorting the whole candidate list.
fn rank_items_topk(scores: &[f64], mask: &[u32], k: usize) -> Vec<u32> {
    let mut items: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| mask.binary_search(i).is_err())
        .collect();
    let cmp = |a: &u32, b: &u32| {
        scores[*b as usize]
            .partial_cmp(&scores[*a as usize])
            .expect("scores must be finite")
            .then(a.cmp(b))
    };
    if items.len() > k && k > 0 {
        items.select_nth_unstable_by(k - 1, cmp);
        items.truncate(k);
    }
    items.sort_by(cmp);
    items
}

/// Hits in the top-K: recall = hits / |targets|, precision = hits / K.
pub fn recall_precision_at_k(ranked: &[u32], targets: &[u32], k: usize) -> (f64, f64) {
    if targets.is_empty() || k == 0 {
        return (0.0, 0.0);
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| targets.binary_search(i).is_ok())
        .count() as f64;
    (hits / targets.len() as f64, hits / k as f64)
}

/// NDCG@K with binary relevance: DCG sums `1/log2(p+1)` over hit positions
/// `p` (1-based), IDCG over the first `min(K, |targets|)` positions.
pub fn ndcg_at_k(ranked: &[u32], targets: &[u32], k: usize) -> f64 {
    if targets.is_empty() || k == 0 {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if targets.binary_search(item).is_ok() {
            dcg += 1.0 / ((pos as f64 + 2.0).log2());
        }
    }
    let ideal_len = k.min(targets.len());
    let idcg: f64 = (0..ideal_len).map(|p| 1.0 / ((p as f64 + 2.0).log2())).sum();
    dcg / idcg
}

/// Evaluate scoring embeddings over a split.
///
/// `user_emb` rows are the refined user embeddings, `item_emb` rows the
/// enhanced item embeddings; scores are their dot products. Users without
/// targets are skipped and excluded from the denominators.
pub fn evaluate_embeddings(
    user_emb: &Array2<f64>,
    item_emb: &Array2<f64>,
    table: &InteractionTable,
    ks: &[usize],
    split: EvalSplit,
) -> Result<RankingResult> {
    if ks.is_empty() {
        return Err(KsiError::Config("evaluation needs at least one K".to_string()));
    }
    if ks.iter().any(|k| *k == 0) {
        return Err(KsiError::Config("evaluation cutoffs must be >= 1".to_string()));
    }
    if user_emb.nrows() != table.n_users() {
        return Err(KsiError::Shape(format!(
            "user embedding has {} rows but the dataset has {} users",
            user_emb.nrows(),
            table.n_users()
        )));
    }
    if item_emb.nrows() != table.n_items() {
        return Err(KsiError::Shape(format!(
            "item embedding has {} rows but the dataset has {} items",
            item_emb.nrows(),
            table.n_items()
        )));
    }
    if user_emb.ncols() != item_emb.ncols() {
        return Err(KsiError::Shape(
            "user/item embedding dimensions differ".to_string(),
        ));
    }

    let max_k = *ks.iter().max().unwrap();
    let n_items = table.n_items();

    // Per-user metric rows, computed in parallel, reduced in user order.
    let per_user: Vec<Option<Vec<(f64, f64, f64)>>> = (0..table.n_users() as u32)
        .into_par_iter()
        .map(|u| {
            let targets = match split {
                EvalSplit::Valid => table.valid_items(u),
                EvalSplit::Test => table.test_items(u),
            };
            if targets.is_empty() {
                return None;
            }
            let mut mask: Vec<u32> = table.train_items(u).to_vec();
            if split == EvalSplit::Test {
                mask.extend_from_slice(table.valid_items(u));
                mask.sort_unstable();
            }
            let ue = user_emb.row(u as usize);
            let mut scores = vec![0.0f64; n_items];
            for (i, s) in scores.iter_mut().enumerate() {
                *s = ue
                    .iter()
                    .zip(item_emb.row(i).iter())
                    .map(|(a, b)| a * b)
                    .sum();
            }
            let ranked = rank_items_topk(&scores, &mask, max_k);
            let metrics = ks
                .iter()
                .map(|&k| {
                    let (r, p) = recall_precision_at_k(&ranked, targets, k);
                    let n = ndcg_at_k(&ranked, targets, k);
                    (r, p, n)
                })
                .collect();
            Some(metrics)
        })
        .collect();

    let mut recall = vec![0.0f64; ks.len()];
    let mut precision = vec![0.0f64; ks.len()];
    let mut ndcg = vec![0.0f64; ks.len()];
    let mut evaluated = 0usize;
    for row in per_user.into_iter().flatten() {
        evaluated += 1;
        for (i, (r, p, n)) in row.into_iter().enumerate() {
            recall[i] += r;
            precision[i] += p;
            ndcg[i] += n;
        }
    }
    if evaluated > 0 {
        let inv = 1.0 / evaluated as f64;
        for i in 0..ks.len() {
            recall[i] *= inv;
            precision[i] *= inv;
            ndcg[i] *= inv;
        }
    }

    Ok(RankingResult {
        ks: ks.to_vec(),
        recall,
        precision,
        ndcg,
        n_users_evaluated: evaluated,
        n_users_total: table.n_users(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::data::Split;

    #[test]
    fn rank_items_sorts_and_masks() {
        let scores = [0.1, 0.9, 0.5];
        assert_eq!(rank_items(&scores, &[]), vec![1, 2, 0]);
        assert_eq!(rank_items(&scores, &[1]), vec![2, 0]);
        let equal = [0.5, 0.5, 0.5];
        assert_eq!(rank_items(&equal, &[]), vec![0, 1, 2]);
    }

    #[test]
    fn topk_ranking_matches_full_sort_prefix() {
        let mut rng = crate::seed::rng_for(61, "test");
        use rand::Rng;
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let mask: Vec<u32> = (0..n as u32).filter(|_| rng.gen::<f64>() < 0.2).collect();
            let k = rng.gen_range(1..10);
            let full = rank_items(&scores, &mask);
            let top = rank_items_topk(&scores, &mask, k);
            assert_eq!(&full[..top.len().min(k)], &top[..]);
        }
    }

    #[test]
    fn recall_precision_examples() {
        // 2 targets, both inside the top 20.
        let ranked: Vec<u32> = (0..30).collect();
        let (r, p) = recall_precision_at_k(&ranked, &[3, 7], 20);
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p, 0.1, epsilon = 1e-15);
        // No hits.
        let (r, p) = recall_precision_at_k(&ranked, &[40, 41], 20);
        assert_eq!((r, p), (0.0, 0.0));
        // One hit at K = 20.
        let (_, p) = recall_precision_at_k(&ranked, &[5, 40, 41, 42], 20);
        assert_abs_diff_eq!(p, 0.05, epsilon = 1e-15);
    }

    #[test]
    fn ndcg_examples() {
        let ranked: Vec<u32> = vec![9, 8, 7, 6, 5];
        assert_abs_diff_eq!(ndcg_at_k(&ranked, &[9], 10), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ndcg_at_k(&ranked, &[7], 10), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(ndcg_at_k(&ranked, &[8, 9], 10), 1.0, epsilon = 1e-15);
    }

    fn toy_table() -> InteractionTable {
        InteractionTable::from_records(vec![
            ("u0".into(), "i0".into(), Some(Split::Train)),
            ("u0".into(), "i1".into(), Some(Split::Test)),
            ("u1".into(), "i1".into(), Some(Split::Train)),
            ("u1".into(), "i2".into(), Some(Split::Valid)),
        ])
        .unwrap()
    }

    #[test]
    fn single_user_perfect_hit() {
        // u0 has test target i1; craft embeddings that rank i1 first.
        let table = toy_table();
        let user = ndarray::array![[1.0, 0.0], [0.0, 0.0]];
        let item = ndarray::array![[0.1, 0.0], [0.9, 0.0], [0.2, 0.0]];
        let result =
            evaluate_embeddings(&user, &item, &table, &[10], EvalSplit::Test).unwrap();
        assert_eq!(result.n_users_evaluated, 1); // u1 has no test items
        assert_abs_diff_eq!(result.recall[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(result.precision[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(result.ndcg[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn metrics_are_scale_invariant_and_monotone() {
        let mut rng = crate::seed::rng_for(62, "test");
        use rand::Rng;
        let mut recs = Vec::new();
        for u in 0..8 {
            for i in 0..20 {
                let roll = rng.gen::<f64>();
                if roll < 0.3 {
                    let split = if roll < 0.2 { Split::Train } else { Split::Test };
                    recs.push((format!("u{u}"), format!("i{i}"), Some(split)));
                }
            }
            recs.push((format!("u{u}"), format!("anchor{u}"), Some(Split::Train)));
        }
        let table = InteractionTable::from_records(recs).unwrap();
        let d = 4;
        let user = Array2::from_shape_fn((table.n_users(), d), |_| rng.gen::<f64>() - 0.5);
        let item = Array2::from_shape_fn((table.n_items(), d), |_| rng.gen::<f64>() - 0.5);
        let ks = vec![1, 5, 10];
        let base = evaluate_embeddings(&user, &item, &table, &ks, EvalSplit::Test).unwrap();
        let scaled =
            evaluate_embeddings(&(&user * 7.0), &item, &table, &ks, EvalSplit::Test).unwrap();
        for i in 0..ks.len() {
            assert_abs_diff_eq!(base.recall[i], scaled.recall[i], epsilon = 1e-15);
            assert_abs_diff_eq!(base.ndcg[i], scaled.ndcg[i], epsilon = 1e-15);
        }
        for i in 1..ks.len() {
            assert!(base.recall[i] >= base.recall[i - 1] - 1e-15);
        }
    }

    #[test]
    fn ndcg_is_monotone_in_k_for_single_target_users() {
        // With one target the ideal DCG is 1 at every K, so NDCG can only
        // grow as the cutoff widens. (With several targets the truncated
        // ideal grows too and NDCG@K need not be monotone.)
        let ranked: Vec<u32> = (0..30).collect();
        let mut prev = 0.0;
        for k in 1..=30 {
            let v = ndcg_at_k(&ranked, &[17], k);
            assert!(v >= prev - 1e-15);
            prev = v;
        }
    }
}
