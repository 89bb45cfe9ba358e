//! Variant grid on the synthetic dataset: plain backbone, structure
//! injection only, retrieval task only, and both modules, for both
//! backbones.
//!
//! Run with: cargo run --release -p ksi --example ablation_grid

use ksi::eval::{evaluate_embeddings, EvalSplit};
use ksi::graph::{build_modality_graph, GraphBuildOptions};
use ksi::model::Backbone;
use ksi::seed::rng_for;
use ksi::ssi::pca_reduce;
use ksi::synthetic::{grouped_dataset, SyntheticSpec};
use ksi::train::{train_run, StepModel, TrainConfig, TrainHooks};

fn main() -> ksi::Result<()> {
    let spec = SyntheticSpec::default();
    let (table, features) = grouped_dataset(&spec)?;
    let mut split_rng = rng_for(spec.seed, "data-split");
    let table = table.split_dataset((0.8, 0.1, 0.1), &mut split_rng)?;

    let base = TrainConfig {
        d: 16,
        epochs: 30,
        seed: spec.seed,
        ..TrainConfig::default()
    };
    let graphs: Vec<_> = features
        .iter()
        .map(|f| build_modality_graph(f, base.k, &GraphBuildOptions::default()))
        .collect::<ksi::Result<_>>()?;
    let reduced: Vec<_> = features
        .iter()
        .map(|f| pca_reduce(f, base.d).map(|r| r.reduced))
        .collect::<ksi::Result<_>>()?;

    println!(
        "{:<12} {:<18} {:>10} {:>10} {:>10}",
        "backbone", "variant", "recall@20", "ndcg@20", "prec@20"
    );
    for backbone in [Backbone::Mf, Backbone::LightGcn] {
        for (label, use_sei, use_ssi) in [
            ("plain", false, false),
            ("+structure", true, false),
            ("+retrieval", false, true),
            ("+both", true, true),
        ] {
            let cfg = TrainConfig {
                backbone,
                use_sei,
                use_ssi,
                ..base.clone()
            };
            let g: &[ksi::graph::SparseGraph] = if use_sei { &graphs } else { &[] };
            let r: Vec<&ndarray::Array2<f64>> = if use_ssi {
                reduced.iter().collect()
            } else {
                Vec::new()
            };
            let outcome = train_run(&cfg, &table, g, r.clone(), &mut TrainHooks::default())?;
            let model = StepModel::new(&cfg, &table, g, r)?;
            let (ue, ie) = model.forward_embeddings(&outcome.final_params)?;
            let result = evaluate_embeddings(&ue, &ie, &table, &[20], EvalSplit::Test)?;
            println!(
                "{:<12} {:<18} {:>10.4} {:>10.4} {:>10.4}",
                backbone.to_string(),
                label,
                result.recall_at(20).unwrap(),
                result.ndcg_at(20).unwrap(),
                result.precision_at(20).unwrap(),
            );
        }
    }
    Ok(())
}
