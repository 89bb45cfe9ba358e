//! Seeded synthetic dataset with planted group structure.
//!
//! Users and items belong to latent groups; every user interacts only with
//! items of their own group, and each modality's features are the item's
//! group centroid plus Gaussian noise. A recommender that picks up either
//! the interaction structure or the feature structure should rank same-group
//! items highly.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{FeatureMatrix, InteractionTable};
use crate::error::Result;
use crate::seed;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_groups: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub items_per_user: usize,
    /// Feature noise standard deviation around the group centroid.
    pub noise: f64,
    /// One feature dimensionality per modality.
    pub modality_dims: Vec<usize>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_groups: 4,
            n_users: 200,
            n_items: 100,
            items_per_user: 12,
            noise: 0.3,
            modality_dims: vec![32, 16],
            seed: 7,
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate interactions (unsplit, all train) and per-modality features.
pub fn grouped_dataset(spec: &SyntheticSpec) -> Result<(InteractionTable, Vec<FeatureMatrix>)> {
    let mut rng = seed::rng_for(spec.seed, "synthetic");
    let items_per_group = spec.n_items / spec.n_groups;
    assert!(items_per_group >= spec.items_per_user, "groups too small");

    // Items in contiguous group chunks; users round-robin over groups.
    let mut records = Vec::with_capacity(spec.n_users * spec.items_per_user);
    for u in 0..spec.n_users {
        let group = u % spec.n_groups;
        let lo = group * items_per_group;
        let mut pool: Vec<usize> = (lo..lo + items_per_group).collect();
        for j in 0..spec.items_per_user {
            let pick = rng.gen_range(j..pool.len());
            pool.swap(j, pick);
            records.push((format!("u{u}"), format!("i{}", pool[j]), None));
        }
    }
    let table = InteractionTable::from_records(records)?;

    let mut features = Vec::with_capacity(spec.modality_dims.len());
    for (m, &dim) in spec.modality_dims.iter().enumerate() {
        let centroids: Vec<Vec<f64>> = (0..spec.n_groups)
            .map(|_| (0..dim).map(|_| standard_normal(&mut rng)).collect())
            .collect();
        let mut values = Array2::<f32>::zeros((spec.n_items, dim));
        for label_idx in 0..spec.n_items {
            // Feature row order must match the table's item indexing, which
            // follows first appearance of "i{idx}" labels.
            let item_label = format!("i{label_idx}");
            let row = table
                .encode_item(&item_label)
                .expect("every item appears in the interactions") as usize;
            let group = label_idx / items_per_group;
            for c in 0..dim {
                let v = centroids[group][c] + spec.noise * standard_normal(&mut rng);
                values[[row, c]] = v as f32;
            }
        }
        features.push(FeatureMatrix::new(format!("m{m}"), values)?);
    }

    Ok((table, features))
}
