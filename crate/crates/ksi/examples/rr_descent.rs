//! Minimize the redundancy-reduction penalty by plain gradient descent.
//!
//! The penalty pushes the sample covariance of the (max-row-norm scaled)
//! matrix toward the identity. The scaling caps the total variance at
//! roughly 1, so with d > 1 the loss settles at a structural floor rather
//! than zero, and the off-diagonal structure decays slowly: the descent
//! trades diagonal shortfall against correlations. As a regularizer inside
//! the full objective this pressure is what matters, not the minimum.
//!
//! Run with: cargo run --release -p ksi --example rr_descent

use ndarray::Array2;
use rand::Rng;

use ksi::rgnn::{rr_loss, rr_loss_with_grad, scaled_covariance};
use ksi::seed::rng_for;

fn main() -> ksi::Result<()> {
    let mut rng = rng_for(42, "rr-descent");
    // A deliberately redundant start: dimension 3 copies dimension 0.
    let n = 128;
    let d = 8;
    let mut h = Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() * 2.0 - 1.0);
    for i in 0..n {
        h[[i, 3]] = h[[i, 0]] * 0.95 + 0.05 * h[[i, 3]];
    }

    let report = |tag: &str, h: &Array2<f64>| -> ksi::Result<()> {
        let loss = rr_loss(&h.view())?;
        let c = scaled_covariance(&h.view())?;
        let mut max_off: f64 = 0.0;
        for ((i, j), v) in c.indexed_iter() {
            if i != j {
                max_off = max_off.max(v.abs());
            }
        }
        println!("{tag}: loss {loss:.5}, max |off-diagonal covariance| {max_off:.5}");
        Ok(())
    };

    report("start   ", &h)?;
    let step = 0.05;
    for iter in 1..=2000 {
        let (_, grad) = rr_loss_with_grad(&h.view())?;
        h.scaled_add(-step, &grad);
        if iter % 400 == 0 {
            report(&format!("iter {iter:>4}"), &h)?;
        }
    }

    let c = scaled_covariance(&h.view())?;
    println!();
    println!("final scaled covariance (d x d):");
    for i in 0..d {
        let row: Vec<String> = (0..d).map(|j| format!("{:+.3}", c[[i, j]])).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
