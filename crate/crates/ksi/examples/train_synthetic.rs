//! End-to-end training on a synthetic grouped dataset.
//!
//! Generates four latent groups of users and items, builds the modality
//! graphs and reduced features, trains the full model, and compares its
//! test ranking quality against the plain backbone and against the
//! random-ranking baseline.
//!
//! Run with: cargo run --release -p ksi --example train_synthetic

use ksi::data::Split;
use ksi::eval::{evaluate_embeddings, EvalSplit};
use ksi::graph::{build_modality_graph, GraphBuildOptions};
use ksi::seed::rng_for;
use ksi::ssi::pca_reduce;
use ksi::synthetic::{grouped_dataset, SyntheticSpec};
use ksi::train::{train_run, StepModel, TrainConfig, TrainHooks};

fn main() -> ksi::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let spec = SyntheticSpec::default();
    let (table, features) = grouped_dataset(&spec)?;
    let mut split_rng = rng_for(spec.seed, "data-split");
    let table = table.split_dataset((0.8, 0.1, 0.1), &mut split_rng)?;
    println!(
        "dataset: {} users, {} items, {} train / {} valid / {} test records",
        table.n_users(),
        table.n_items(),
        table.n_records_in(Split::Train),
        table.n_records_in(Split::Valid),
        table.n_records_in(Split::Test),
    );

    let cfg = TrainConfig {
        d: 16,
        epochs: 30,
        seed: spec.seed,
        ..TrainConfig::default()
    };

    let graphs: Vec<_> = features
        .iter()
        .map(|f| build_modality_graph(f, cfg.k, &GraphBuildOptions::default()))
        .collect::<ksi::Result<_>>()?;
    let reduced: Vec<_> = features
        .iter()
        .map(|f| pca_reduce(f, cfg.d).map(|r| r.reduced))
        .collect::<ksi::Result<_>>()?;

    // Full model.
    let outcome = train_run(
        &cfg,
        &table,
        &graphs,
        reduced.iter().collect(),
        &mut TrainHooks::default(),
    )?;
    let first = &outcome.reports[0];
    let last = outcome.reports.last().unwrap();
    println!(
        "bpr loss: epoch 1 = {:.4}, epoch {} = {:.4}",
        first.loss_bpr, last.epoch, last.loss_bpr
    );

    let model = StepModel::new(&cfg, &table, &graphs, reduced.iter().collect())?;
    let (ue, ie) = model.forward_embeddings(&outcome.final_params)?;
    let full = evaluate_embeddings(&ue, &ie, &table, &[10, 20], EvalSplit::Test)?;

    // Plain backbone: both modules off, same split and seed.
    let plain_cfg = TrainConfig {
        use_sei: false,
        use_ssi: false,
        ..cfg.clone()
    };
    let plain_outcome = train_run(&plain_cfg, &table, &[], Vec::new(), &mut TrainHooks::default())?;
    let plain_model = StepModel::new(&plain_cfg, &table, &[], Vec::new())?;
    let (pue, pie) = plain_model.forward_embeddings(&plain_outcome.final_params)?;
    let plain = evaluate_embeddings(&pue, &pie, &table, &[10, 20], EvalSplit::Test)?;

    // Random-ranking expectation for recall@20 on this split.
    let mut expectation = 0.0;
    let mut counted = 0usize;
    for u in 0..table.n_users() as u32 {
        if table.test_items(u).is_empty() {
            continue;
        }
        let masked = table.train_items(u).len() + table.valid_items(u).len();
        let candidates = table.n_items() - masked;
        let hits_expected = 20.0f64.min(candidates as f64) / candidates as f64
            * table.test_items(u).len() as f64;
        expectation += hits_expected / table.test_items(u).len() as f64;
        counted += 1;
    }
    expectation /= counted as f64;

    println!();
    println!("{:<22} {:>10} {:>10}", "model", "recall@20", "ndcg@20");
    println!(
        "{:<22} {:>10.4} {:>10.4}",
        "full (both modules)",
        full.recall_at(20).unwrap(),
        full.ndcg_at(20).unwrap()
    );
    println!(
        "{:<22} {:>10.4} {:>10.4}",
        "plain backbone",
        plain.recall_at(20).unwrap(),
        plain.ndcg_at(20).unwrap()
    );
    println!("{:<22} {:>10.4}", "random expectation", expectation);
    Ok(())
}
