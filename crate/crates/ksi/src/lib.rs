//! KSI: a training and evaluation engine for graph-based multimodal
//! recommendation.
//!
//! The pipeline turns implicit-feedback interactions plus per-item content
//! features (visual, textual, ...) into top-K rankings:
//!
//! 1. [`ssi::pca_reduce`] compresses each modality's raw features to the
//!    model dimension.
//! 2. [`graph::build_modality_graph`] builds a normalized k-NN item graph
//!    per modality from feature cosine similarity.
//! 3. [`train::train_run`] fits user/item embeddings with a BPR ranking
//!    loss on an MF or LightGCN backbone, augmented by two auxiliary
//!    objectives: an InfoNCE retrieval task that pulls an item's propagated
//!    embedding toward its own reduced feature vector
//!    ([`ssi::infonce_loss`]), and a redundancy-reduction penalty that
//!    decorrelates embedding dimensions ([`rgnn::rr_loss`]).
//! 4. [`eval::evaluate_embeddings`] reports all-rank Recall/Precision/NDCG.
//!
//! Gradients are analytic end to end; every source of randomness derives
//! from one seed, and repeated runs produce bit-identical checkpoints on
//! the same platform.
//!
//! Start with the runnable examples (`cargo run --release -p ksi --example
//! train_synthetic`) or the `ksi` binary, which exposes the pipeline as
//! `preprocess`, `build-graph`, `train` and `evaluate` subcommands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod manifest;
pub mod model;
pub mod rgnn;
pub mod seed;
pub mod ssi;
pub mod synthetic;
pub mod train;

pub use error::{KsiError, Result};
