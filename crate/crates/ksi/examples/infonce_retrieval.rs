//! The feature-retrieval loss in isolation: item embeddings learn to point
//! at their own (reduced) modality features against sampled negatives.
//!
//! Run with: cargo run --release -p ksi --example infonce_retrieval

use ndarray::Array2;
use rand::Rng;

use ksi::seed::{derive_seed, rng_for};
use ksi::ssi::{infonce_loss, infonce_loss_with_grads, NegativePool};

fn main() -> ksi::Result<()> {
    let n_items = 60;
    let d = 8;
    let tau = 0.1;
    let k = 5;
    let seed = 77;

    let mut rng = rng_for(seed, "infonce-demo");
    let features = Array2::from_shape_fn((n_items, d), |_| rng.gen::<f64>() * 2.0 - 1.0);
    let mut embeddings = Array2::from_shape_fn((n_items, d), |_| (rng.gen::<f64>() - 0.5) * 0.2);
    let weights = [1.0];

    // Retrieval accuracy: how often the positive outranks every pooled
    // negative under the dot-product score.
    let accuracy = |emb: &Array2<f64>, pool: &NegativePool| -> f64 {
        let mut hits = 0usize;
        for i in 0..n_items {
            let score = |j: usize| -> f64 {
                (0..d).map(|c| emb[[i, c]] * features[[j, c]]).sum()
            };
            let pos = score(i);
            if pool.negatives(0, i).iter().all(|&n| score(n as usize) < pos) {
                hits += 1;
            }
        }
        hits as f64 / n_items as f64
    };

    println!("epoch  loss      retrieval-accuracy");
    for epoch in 1..=12 {
        // Fresh negatives each epoch, seed xor epoch index.
        let mut pool_rng = rand::SeedableRng::seed_from_u64(
            derive_seed(seed, "ssi-pool") ^ epoch as u64,
        );
        let pool = NegativePool::sample(n_items, 1, k, &mut pool_rng)?;

        let (loss, _) = infonce_loss(
            &[&embeddings],
            &[&features],
            &pool,
            &weights,
            tau,
            None,
        )?;
        println!(
            "{epoch:>5}  {loss:>8.3}  {:>6.1}%",
            accuracy(&embeddings, &pool) * 100.0
        );

        // A few descent steps per epoch on the retrieval loss alone.
        for _ in 0..20 {
            let (_, _, grads) = infonce_loss_with_grads(
                &[&embeddings],
                &[&features],
                &pool,
                &weights,
                tau,
                None,
            )?;
            embeddings.scaled_add(-0.05, &grads[0]);
        }
    }
    Ok(())
}
