//! Objective composition, optimization and the epoch loop.
//!
//! The total objective is
//!
//! ```text
//! L = L_bpr + alpha * L_q + beta * (L_r_user + L_r_item)
//! ```
//!
//! computed per step over a sampled BPR batch, with the retrieval and
//! redundancy terms evaluated over the full item/user sets (optionally a
//! subsample on large data). Gradients are analytic throughout; no autodiff.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BprBatch, BprSampler, InteractionTable, Split};
use crate::error::{KsiError, Result};
use crate::eval::{self, RankingResult};
use crate::graph::SparseGraph;
use crate::model::{self, Backbone, BackboneOutput, Gradients, Parameters};
use crate::rgnn;
use crate::seed;
use crate::ssi::{self, NegativePool};

/// Hyperparameters and variant toggles for one run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Embedding dimension.
    pub d: usize,
    /// k-NN neighbours per item graph row.
    pub k: usize,
    /// Propagation depth L of the item graphs.
    pub layers: usize,
    pub backbone: Backbone,
    /// LightGCN propagation depth.
    pub backbone_layers: usize,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Retrieval-loss weight.
    pub alpha: f64,
    /// Redundancy-reduction weight.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Structure-injection toggle: propagation, RR terms and fused
    /// enhancement.
    pub use_sei: bool,
    /// Retrieval-task toggle.
    pub use_ssi: bool,
    /// Negative pool size override; `None` uses `max(1, N_I / 512)`.
    pub k_negatives: Option<usize>,
    /// Sum (default) or mean reduction for the BPR batch loss.
    pub bpr_mean: bool,
    /// When > 0, the RR/retrieval terms are evaluated on this many sampled
    /// items per step instead of all items (an approximation for large
    /// catalogues).
    pub rr_ssi_subsample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            k: 10,
            layers: 1,
            backbone: Backbone::LightGcn,
            backbone_layers: 2,
            tau: 0.1,
            alpha: 0.05,
            beta: 1.0,
            lr: 5e-4,
            batch_size: 1024,
            epochs: 50,
            seed: 42,
            use_sei: true,
            use_ssi: true,
            k_negatives: None,
            bpr_mean: false,
            rr_ssi_subsample: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(KsiError::Config(msg.to_string()))
            }
        };
        check(self.d >= 1, "d must be >= 1")?;
        check(self.k >= 1, "k must be >= 1")?;
        check(self.tau > 0.0 && self.tau.is_finite(), "tau must be > 0")?;
        check(self.alpha >= 0.0 && self.alpha.is_finite(), "alpha must be >= 0")?;
        check(self.beta >= 0.0 && self.beta.is_finite(), "beta must be >= 0")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr must be > 0")?;
        check(self.batch_size >= 1, "batch_size must be >= 1")?;
        Ok(())
    }

    /// Propagation depth after variant toggles: disabling SEI forces L = 0.
    pub fn effective_layers(&self) -> usize {
        if self.use_sei {
            self.layers
        } else {
            0
        }
    }

    /// The fused-enhancement path is active when either module is on; with
    /// both off the model degenerates to the plain backbone.
    pub fn enhancement_active(&self) -> bool {
        self.use_sei || self.use_ssi
    }
}

/// Xavier-uniform initialization on `[-b, b]`, `b = sqrt(6 / (rows+cols))`.
pub fn xavier_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

/// Freshly initialized parameters: Xavier embeddings, zero logits (uniform
/// modality weights).
pub fn init_parameters(
    n_users: usize,
    n_items: usize,
    d: usize,
    n_modalities: usize,
    master_seed: u64,
) -> Parameters {
    let mut rng = seed::rng_for(master_seed, "init");
    let user_emb = xavier_init(n_users, d, &mut rng);
    let item_emb = xavier_init(n_items, d, &mut rng);
    Parameters {
        user_emb,
        item_emb,
        modality_logits: Array1::zeros(n_modalities),
    }
}

/// Adam optimizer state for the three parameter groups.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        AdamState {
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
        }
    }
}

fn adam_update_array<D: ndarray::Dimension>(
    theta: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: usize,
    name: &str,
) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(KsiError::Runtime(format!(
            "non-finite gradient for parameter {name} at step {t}"
        )));
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    ndarray::Zip::from(theta)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|th, &g, m, v| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *th -= lr * m_hat / (v_hat.sqrt() + epsilon);
        });
    Ok(())
}

/// One bias-corrected Adam step over all parameter groups.
pub fn adam_step(
    params: &mut Parameters,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let (b1, b2, eps, t) = (state.beta1, state.beta2, state.epsilon, state.t);
    adam_update_array(
        &mut params.user_emb,
        &grads.user_emb,
        &mut state.m.user_emb,
        &mut state.v.user_emb,
        lr,
        b1,
        b2,
        eps,
        t,
        "user_emb",
    )?;
    adam_update_array(
        &mut params.item_emb,
        &grads.item_emb,
        &mut state.m.item_emb,
        &mut state.v.item_emb,
        lr,
        b1,
        b2,
        eps,
        t,
        "item_emb",
    )?;
    adam_update_array(
        &mut params.modality_logits,
        &grads.modality_logits,
        &mut state.m.modality_logits,
        &mut state.v.modality_logits,
        lr,
        b1,
        b2,
        eps,
        t,
        "modality_logits",
    )?;
    Ok(())
}

/// Additive loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossParts {
    pub bpr: f64,
    pub ssi: f64,
    pub rr_user: f64,
    pub rr_item: f64,
}

impl LossParts {
    pub fn total(&self, alpha: f64, beta: f64) -> f64 {
        self.bpr + alpha * self.ssi + beta * (self.rr_user + self.rr_item)
    }
}

/// Exact weighted sum of the loss components (the objective the optimizer
/// sees). Disabled modules contribute exact zeros, not epsilon residues.
pub fn total_loss(parts: &LossParts, alpha: f64, beta: f64) -> f64 {
    parts.total(alpha, beta)
}

/// Immutable per-run model inputs: graphs, reduced features, bipartite
/// adjacency, configuration.
pub struct StepModel<'a> {
    pub cfg: &'a TrainConfig,
    pub graphs: &'a [SparseGraph],
    graphs_t: Vec<SparseGraph>,
    pub reduced: Vec<&'a Array2<f64>>,
    pub bipartite: Option<SparseGraph>,
    n_items: usize,
}

impl<'a> StepModel<'a> {
    pub fn new(
        cfg: &'a TrainConfig,
        table: &InteractionTable,
        graphs: &'a [SparseGraph],
        reduced: Vec<&'a Array2<f64>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let n_items = table.n_items();
        let needs_graphs = cfg.enhancement_active() && cfg.effective_layers() > 0;
        if needs_graphs {
            if graphs.is_empty() {
                return Err(KsiError::Config(
                    "propagation depth > 0 requires modality graphs".to_string(),
                ));
            }
            for g in graphs {
                if g.n() != n_items {
                    return Err(KsiError::Shape(format!(
                        "graph '{}' has {} nodes but the dataset has {n_items} items",
                        g.modality,
                        g.n()
                    )));
                }
            }
        }
        if cfg.use_ssi {
            if reduced.is_empty() {
                return Err(KsiError::Config(
                    "the retrieval loss requires reduced features per modality".to_string(),
                ));
            }
            for r in &reduced {
                if r.nrows() != n_items {
                    return Err(KsiError::Shape(format!(
                        "reduced features have {} rows but the dataset has {n_items} items",
                        r.nrows()
                    )));
                }
                if r.ncols() != cfg.d {
                    return Err(KsiError::Shape(format!(
                        "reduced features have dim {} but d = {}",
                        r.ncols(),
                        cfg.d
                    )));
                }
            }
        }
        let graphs_t = if needs_graphs {
            graphs.iter().map(|g| g.transpose()).collect()
        } else {
            Vec::new()
        };
        let bipartite = match cfg.backbone {
            Backbone::LightGcn => Some(model::build_bipartite_adj(table)?),
            Backbone::Mf => None,
        };
        Ok(StepModel {
            cfg,
            graphs,
            graphs_t,
            reduced,
            bipartite,
            n_items,
        })
    }

    pub fn n_modalities(&self) -> usize {
        self.graphs.len().max(self.reduced.len()).max(1)
    }

    fn backbone_forward(&self, params: &Parameters) -> Result<BackboneOutput> {
        match self.cfg.backbone {
            Backbone::Mf => Ok(model::backbone_mf(params)),
            Backbone::LightGcn => model::backbone_lightgcn(
                params,
                self.bipartite.as_ref().expect("built in new()"),
                self.cfg.backbone_layers,
            ),
        }
    }

    fn backbone_backward(
        &self,
        d_user: Array2<f64>,
        d_item: Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        match self.cfg.backbone {
            Backbone::Mf => Ok((d_user, d_item)),
            Backbone::LightGcn => model::backbone_lightgcn_backward(
                self.bipartite.as_ref().expect("built in new()"),
                self.cfg.backbone_layers,
                &d_user,
                &d_item,
            ),
        }
    }

    /// Propagate and fuse, returning the stack, the fused matrix (with its
    /// max-row-norm scale and argmax row; `None` when the enhancement path
    /// is off), the backbone output and the enhanced item embeddings.
    #[allow(clippy::type_complexity)]
    fn forward_common(
        &self,
        params: &Parameters,
    ) -> Result<(
        Option<rgnn::LayerStack>,
        Option<(Array2<f64>, f64, usize)>,
        BackboneOutput,
        Array2<f64>,
    )> {
        let backbone = self.backbone_forward(params)?;
        if !self.cfg.enhancement_active() {
            let enhanced = backbone.item_emb.clone();
            return Ok((None, None, backbone, enhanced));
        }
        let weights = params.modality_weights();
        let n_layers = self.cfg.effective_layers();
        let graphs: &[SparseGraph] = if n_layers > 0 { self.graphs } else { &[] };
        let stack = if n_layers > 0 {
            rgnn::propagate(graphs, &params.item_emb, n_layers)?
        } else {
            // Layer-0 only stacks; one per modality weight.
            rgnn::LayerStack {
                layers: vec![vec![params.item_emb.clone()]; weights.len()],
            }
        };
        let tops: Vec<&Array2<f64>> = (0..stack.n_modalities()).map(|m| stack.top(m)).collect();
        let fused = model::fuse(&tops, &weights)?;
        let (enhanced, scale, argmax) = model::enhance(&backbone.item_emb, &fused)?;
        Ok((Some(stack), Some((fused, scale, argmax)), backbone, enhanced))
    }

    /// Scoring embeddings for evaluation: (refined users, enhanced items).
    pub fn forward_embeddings(&self, params: &Parameters) -> Result<(Array2<f64>, Array2<f64>)> {
        let (_, _, backbone, enhanced) = self.forward_common(params)?;
        Ok((backbone.user_emb, enhanced))
    }

    /// Item subset for the RR/retrieval terms, when subsampling is on.
    fn rr_ssi_items(&self, rng: &mut ChaCha8Rng) -> Option<Vec<u32>> {
        let s = self.cfg.rr_ssi_subsample;
        if s == 0 || s >= self.n_items {
            return None;
        }
        let mut all: Vec<u32> = (0..self.n_items as u32).collect();
        for j in 0..s {
            let pick = rng.gen_range(j..all.len());
            all.swap(j, pick);
        }
        all.truncate(s);
        all.sort_unstable();
        Some(all)
    }

    /// Full objective at the current parameters.
    pub fn objective(
        &self,
        params: &Parameters,
        batch: &BprBatch,
        pool: Option<&NegativePool>,
        subsample: Option<&[u32]>,
    ) -> Result<LossParts> {
        let cfg = self.cfg;
        let weights = params.modality_weights();
        let (stack, _, backbone, enhanced) = self.forward_common(params)?;

        let (pos, neg) = model::batch_scores(&backbone.user_emb, &enhanced, batch);
        let mut bpr = model::bpr_loss(&pos, &neg)?;
        if cfg.bpr_mean && !batch.is_empty() {
            bpr /= batch.len() as f64;
        }

        let mut parts = LossParts {
            bpr,
            ssi: 0.0,
            rr_user: 0.0,
            rr_item: 0.0,
        };

        if cfg.use_ssi {
            let pool = pool.ok_or_else(|| {
                KsiError::Config("retrieval loss requires a negative pool".to_string())
            })?;
            let stack = stack.as_ref().expect("enhancement active");
            let tops: Vec<&Array2<f64>> = (0..stack.n_modalities()).map(|m| stack.top(m)).collect();
            let (lq, _) = ssi::infonce_loss(&tops, &self.reduced, pool, &weights, cfg.tau, subsample)?;
            parts.ssi = self.scale_subsample(lq, subsample);
        }

        if cfg.use_sei {
            let stack = stack.as_ref().expect("enhancement active");
            parts.rr_item = self.item_rr_forward(stack, &weights, subsample)?;
            parts.rr_user = rgnn::user_rr(&params.user_emb.view())?;
        }

        Ok(parts)
    }

    fn scale_subsample(&self, value: f64, subsample: Option<&[u32]>) -> f64 {
        match subsample {
            Some(items) if !items.is_empty() => value * self.n_items as f64 / items.len() as f64,
            _ => value,
        }
    }

    fn item_rr_forward(
        &self,
        stack: &rgnn::LayerStack,
        weights: &[f64],
        subsample: Option<&[u32]>,
    ) -> Result<f64> {
        match subsample {
            None => rgnn::item_rr_aggregate(stack, weights),
            Some(items) => {
                let rows = |h: &Array2<f64>| -> Array2<f64> {
                    let mut sub = Array2::zeros((items.len(), h.ncols()));
                    for (r, &i) in items.iter().enumerate() {
                        sub.row_mut(r).assign(&h.row(i as usize));
                    }
                    sub
                };
                let n_layers = stack.n_layers();
                let layer0 = rgnn::rr_loss(&rows(&stack.layers[0][0]).view())?;
                let wsum: f64 = weights.iter().sum();
                let mut total = layer0 * wsum;
                for (m, layers) in stack.layers.iter().enumerate() {
                    for h in layers.iter().skip(1) {
                        total += weights[m] * rgnn::rr_loss(&rows(h).view())?;
                    }
                }
                Ok(total / (n_layers as f64 + 1.0))
            }
        }
    }

    /// Objective plus analytic gradients for every parameter.
    pub fn objective_with_grads(
        &self,
        params: &Parameters,
        batch: &BprBatch,
        pool: Option<&NegativePool>,
        subsample: Option<&[u32]>,
    ) -> Result<(LossParts, Gradients)> {
        let cfg = self.cfg;
        let weights = params.modality_weights();
        let n_mod = weights.len();
        let (stack, fusion, backbone, enhanced) = self.forward_common(params)?;

        // --- BPR term and its score gradients -------------------------------
        let (pos, neg) = model::batch_scores(&backbone.user_emb, &enhanced, batch);
        let mut bpr = model::bpr_loss(&pos, &neg)?;
        let mut d_margin = model::bpr_margin_grads(&pos, &neg);
        if cfg.bpr_mean && !batch.is_empty() {
            let inv = 1.0 / batch.len() as f64;
            bpr *= inv;
            for g in d_margin.iter_mut() {
                *g *= inv;
            }
        }

        let mut d_user_hat = Array2::<f64>::zeros(backbone.user_emb.raw_dim());
        let mut d_item_enhanced = Array2::<f64>::zeros(enhanced.raw_dim());
        model::accumulate_score_grads(
            &backbone.user_emb,
            &enhanced,
            batch,
            &d_margin,
            &mut d_user_hat,
            &mut d_item_enhanced,
        );

        let mut parts = LossParts {
            bpr,
            ssi: 0.0,
            rr_user: 0.0,
            rr_item: 0.0,
        };
        let mut d_weights = vec![0.0f64; n_mod];

        // Per-layer stack gradients to pull back through propagation.
        let n_layers = cfg.effective_layers();
        let mut stack_grads: Vec<Vec<Option<Array2<f64>>>> =
            vec![(0..=n_layers).map(|_| None).collect(); if stack.is_some() { n_mod } else { 0 }];
        let add_top_grad = |m: usize, g: Array2<f64>, grads: &mut Vec<Vec<Option<Array2<f64>>>>| {
            let slot = &mut grads[m][n_layers];
            *slot = match slot.take() {
                None => Some(g),
                Some(acc) => Some(acc + g),
            };
        };

        // --- Enhancement / fusion backward ----------------------------------
        let d_item_hat = d_item_enhanced.clone();
        if let (Some(stack_ref), Some((fused, scale, argmax))) = (&stack, &fusion) {
            let d_fused = model::enhance_backward(&d_item_enhanced, fused, *scale, *argmax);
            for m in 0..n_mod {
                // dL/da_m from the fusion path.
                let top = stack_ref.top(m);
                let mut dot = 0.0;
                for (a, b) in top.iter().zip(d_fused.iter()) {
                    dot += a * b;
                }
                d_weights[m] += dot;
                add_top_grad(m, &d_fused * weights[m], &mut stack_grads);
            }
        }

        // --- Retrieval term --------------------------------------------------
        if cfg.use_ssi {
            let pool = pool.ok_or_else(|| {
                KsiError::Config("retrieval loss requires a negative pool".to_string())
            })?;
            let stack_ref = stack.as_ref().expect("enhancement active");
            let tops: Vec<&Array2<f64>> =
                (0..stack_ref.n_modalities()).map(|m| stack_ref.top(m)).collect();
            let (lq, per_modality, d_tops) = ssi::infonce_loss_with_grads(
                &tops,
                &self.reduced,
                pool,
                &weights,
                cfg.tau,
                subsample,
            )?;
            let scale_up = self.scale_subsample(1.0, subsample);
            parts.ssi = lq * scale_up;
            for m in 0..n_mod {
                d_weights[m] += cfg.alpha * per_modality[m] * scale_up;
                add_top_grad(m, &d_tops[m] * (cfg.alpha * scale_up), &mut stack_grads);
            }
        }

        // --- Redundancy-reduction terms --------------------------------------
        if cfg.use_sei {
            let stack_ref = stack.as_ref().expect("enhancement active");
            let coeff = cfg.beta / (n_layers as f64 + 1.0);
            match subsample {
                None => {
                    // Layer 0 is shared; compute once with the summed weight.
                    let (rr0, g0) = rgnn::rr_loss_with_grad(&stack_ref.layers[0][0].view())?;
                    let wsum: f64 = weights.iter().sum();
                    let mut rr_total = rr0 * wsum;
                    for m in 0..n_mod {
                        d_weights[m] += coeff * rr0;
                        // Layer 0 doubles as the top layer when L = 0, so
                        // merge rather than assign.
                        stack_grads[m][0] = match stack_grads[m][0].take() {
                            None => Some(&g0 * (coeff * weights[m])),
                            Some(acc) => Some(acc + &g0 * (coeff * weights[m])),
                        };
                        for l in 1..=n_layers {
                            let (val, grad) =
                                rgnn::rr_loss_with_grad(&stack_ref.layers[m][l].view())?;
                            rr_total += weights[m] * val;
                            d_weights[m] += coeff * val;
                            stack_grads[m][l] = match stack_grads[m][l].take() {
                                None => Some(&grad * (coeff * weights[m])),
                                Some(acc) => Some(acc + &grad * (coeff * weights[m])),
                            };
                        }
                    }
                    parts.rr_item = rr_total / (n_layers as f64 + 1.0);
                }
                Some(items) => {
                    // Subsampled RR: per-layer penalty on the sampled rows
                    // only; gradients scatter back to those rows.
                    let gather = |h: &Array2<f64>| -> Array2<f64> {
                        let mut sub = Array2::zeros((items.len(), h.ncols()));
                        for (r, &i) in items.iter().enumerate() {
                            sub.row_mut(r).assign(&h.row(i as usize));
                        }
                        sub
                    };
                    let scatter = |g_sub: &Array2<f64>, shape: (usize, usize)| -> Array2<f64> {
                        let mut full = Array2::zeros(shape);
                        for (r, &i) in items.iter().enumerate() {
                            full.row_mut(i as usize).assign(&g_sub.row(r));
                        }
                        full
                    };
                    let shape = (self.n_items, cfg.d);
                    let (rr0, g0_sub) =
                        rgnn::rr_loss_with_grad(&gather(&stack_ref.layers[0][0]).view())?;
                    let g0 = scatter(&g0_sub, shape);
                    let wsum: f64 = weights.iter().sum();
                    let mut rr_total = rr0 * wsum;
                    for m in 0..n_mod {
                        d_weights[m] += coeff * rr0;
                        stack_grads[m][0] = match stack_grads[m][0].take() {
                            None => Some(&g0 * (coeff * weights[m])),
                            Some(acc) => Some(acc + &g0 * (coeff * weights[m])),
                        };
                        for l in 1..=n_layers {
                            let (val, grad_sub) =
                                rgnn::rr_loss_with_grad(&gather(&stack_ref.layers[m][l]).view())?;
                            let grad = scatter(&grad_sub, shape);
                            rr_total += weights[m] * val;
                            d_weights[m] += coeff * val;
                            stack_grads[m][l] = match stack_grads[m][l].take() {
                                None => Some(&grad * (coeff * weights[m])),
                                Some(acc) => Some(acc + &grad * (coeff * weights[m])),
                            };
                        }
                    }
                    parts.rr_item = rr_total / (n_layers as f64 + 1.0);
                }
            }
        }

        // --- Pull stack gradients back to the item ID embedding --------------
        let mut d_item_from_stack = Array2::<f64>::zeros(params.item_emb.raw_dim());
        if stack.is_some() {
            let graphs_t: &[SparseGraph] = &self.graphs_t;
            if n_layers > 0 {
                d_item_from_stack =
                    rgnn::backprop_stack(graphs_t, stack_grads, (self.n_items, cfg.d))?;
            } else {
                // No propagation: layer 0 grads apply directly.
                for per_mod in stack_grads {
                    if let Some(g) = per_mod.into_iter().next().flatten() {
                        d_item_from_stack += &g;
                    }
                }
            }
        }

        // --- Backbone backward -----------------------------------------------
        let (mut d_user, mut d_item) = self.backbone_backward(d_user_hat, d_item_hat)?;
        d_item += &d_item_from_stack;

        // --- User RR ----------------------------------------------------------
        if cfg.use_sei {
            let (rr_user, g_user) = rgnn::rr_loss_with_grad(&params.user_emb.view())?;
            parts.rr_user = rr_user;
            d_user.scaled_add(cfg.beta, &g_user);
        }

        // --- Modality weights back through the softmax ------------------------
        let d_logits = model::softmax_backward(&weights, &d_weights);

        let grads = Gradients {
            user_emb: d_user,
            item_emb: d_item,
            modality_logits: Array1::from_vec(d_logits),
        };
        Ok((parts, grads))
    }
}

/// Per-epoch record written to `report.jsonl`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss_bpr: f64,
    pub loss_ssi: f64,
    pub loss_rr_user: f64,
    pub loss_rr_item: f64,
    pub loss_total: f64,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<BTreeMap<String, f64>>,
}

/// Everything a finished run hands back.
pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    pub final_params: Parameters,
    /// Best-on-validation snapshot: (epoch, recall@K, params).
    pub best: Option<(usize, f64, Parameters)>,
}

/// Options that control evaluation cadence and persistence during training.
pub struct TrainHooks<'a> {
    /// Evaluate on the validation split every this many epochs (0 = never).
    pub eval_every: usize,
    /// Cutoffs used for validation metrics.
    pub eval_ks: Vec<usize>,
    /// K used for model selection (best validation recall).
    pub select_k: usize,
    /// When set, report lines are appended here as they are produced.
    pub report_sink: Option<&'a mut dyn Write>,
    /// When set, receives the last parameters known to be finite; on an
    /// abort the caller can persist them as a recovery checkpoint.
    pub last_good: Option<&'a mut Option<Parameters>>,
}

impl Default for TrainHooks<'_> {
    fn default() -> Self {
        TrainHooks {
            eval_every: 1,
            eval_ks: vec![10, 20],
            select_k: 20,
            report_sink: None,
            last_good: None,
        }
    }
}

/// Run the optimization loop.
///
/// Per epoch: draw fresh negative pools, then take one Adam step per BPR
/// batch, each step evaluating the full objective. Validation metrics are
/// recorded according to the hooks; the best-on-validation parameters are
/// retained. A non-finite loss aborts with a runtime error (callers persist
/// the last good snapshot).
pub fn train_run(
    cfg: &TrainConfig,
    table: &InteractionTable,
    graphs: &[SparseGraph],
    reduced: Vec<&Array2<f64>>,
    hooks: &mut TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = StepModel::new(cfg, table, graphs, reduced)?;
    let n_modalities = model.n_modalities();

    let mut params = init_parameters(table.n_users(), table.n_items(), cfg.d, n_modalities, cfg.seed);
    let mut adam = AdamState::new(&params);
    let mut sampler = BprSampler::new(table, seed::rng_for(cfg.seed, "bpr-sampler"))?;
    let mut subsample_rng = seed::rng_for(cfg.seed, "rr-subsample");

    let n_train = table.n_records_in(Split::Train);
    let steps_per_epoch = n_train.div_ceil(cfg.batch_size).max(1);
    let pool_k = cfg
        .k_negatives
        .unwrap_or_else(|| ssi::default_pool_size(table.n_items()));

    if let Some(slot) = hooks.last_good.as_mut() {
        **slot = Some(params.clone());
    }
    let mut reports: Vec<EpochReport> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Parameters)> = None;

    for epoch in 1..=cfg.epochs {
        let epoch_start = std::time::Instant::now();

        // Fresh pools each epoch, derived seed XOR epoch index. Pools are
        // drawn even when the retrieval loss is disabled so that loss
        // trajectories of ablation variants stay comparable step for step.
        let pool = if table.n_items() > pool_k {
            let mut pool_rng = ChaCha8Rng::seed_from_u64(
                seed::derive_seed(cfg.seed, "ssi-pool") ^ epoch as u64,
            );
            Some(NegativePool::sample(
                table.n_items(),
                n_modalities,
                pool_k,
                &mut pool_rng,
            )?)
        } else if cfg.use_ssi {
            return Err(KsiError::Config(format!(
                "negative pool size {pool_k} must be smaller than the item count {}",
                table.n_items()
            )));
        } else {
            None
        };

        let mut sums = LossParts {
            bpr: 0.0,
            ssi: 0.0,
            rr_user: 0.0,
            rr_item: 0.0,
        };
        for _ in 0..steps_per_epoch {
            let batch = sampler.sample(cfg.batch_size.min(n_train.max(1)));
            let subsample = model.rr_ssi_items(&mut subsample_rng);
            let (parts, grads) =
                model.objective_with_grads(&params, &batch, pool.as_ref(), subsample.as_deref())?;
            let total = parts.total(cfg.alpha, cfg.beta);
            if !total.is_finite() {
                return Err(KsiError::Runtime(format!(
                    "non-finite total loss at epoch {epoch} (components: {parts:?})"
                )));
            }
            adam_step(&mut params, &grads, &mut adam, cfg.lr)?;
            sums.bpr += parts.bpr;
            sums.ssi += parts.ssi;
            sums.rr_user += parts.rr_user;
            sums.rr_item += parts.rr_item;
        }
        params.assert_finite()?;

        let inv = 1.0 / steps_per_epoch as f64;
        let mean_parts = LossParts {
            bpr: sums.bpr * inv,
            ssi: sums.ssi * inv,
            rr_user: sums.rr_user * inv,
            rr_item: sums.rr_item * inv,
        };

        let valid = if hooks.eval_every > 0
            && epoch % hooks.eval_every == 0
            && table.n_records_in(Split::Valid) > 0
        {
            let (user_emb, item_emb) = model.forward_embeddings(&params)?;
            let result = eval::evaluate_embeddings(
                &user_emb,
                &item_emb,
                table,
                &hooks.eval_ks,
                eval::EvalSplit::Valid,
            )?;
            let select = result.recall_at(hooks.select_k).unwrap_or(0.0);
            let better = match &best {
                None => true,
                Some((_, best_recall, _)) => select > *best_recall,
            };
            if better {
                best = Some((epoch, select, params.clone()));
            }
            Some(metrics_map(&result))
        } else {
            None
        };

        let report = EpochReport {
            epoch,
            loss_bpr: mean_parts.bpr,
            loss_ssi: mean_parts.ssi,
            loss_rr_user: mean_parts.rr_user,
            loss_rr_item: mean_parts.rr_item,
            loss_total: mean_parts.total(cfg.alpha, cfg.beta),
            wall_time_s: epoch_start.elapsed().as_secs_f64(),
            valid,
        };
        log::info!(
            "epoch {:>3}: total {:.6} (bpr {:.6}, ssi {:.6}, rr_u {:.6}, rr_i {:.6})",
            report.epoch,
            report.loss_total,
            report.loss_bpr,
            report.loss_ssi,
            report.loss_rr_user,
            report.loss_rr_item
        );
        if let Some(sink) = hooks.report_sink.as_mut() {
            let line = serde_json::to_string(&report)
                .map_err(|e| KsiError::Runtime(format!("report serialization: {e}")))?;
            writeln!(sink, "{line}").map_err(|e| KsiError::io("report.jsonl", e))?;
        }
        reports.push(report);
        if let Some(slot) = hooks.last_good.as_mut() {
            **slot = Some(params.clone());
        }
    }

    Ok(TrainOutcome {
        reports,
        final_params: params,
        best,
    })
}

fn metrics_map(result: &RankingResult) -> BTreeMap<String, f64> {
    let mut map = BTreeMap::new();
    for (i, k) in result.ks.iter().enumerate() {
        map.insert(format!("recall@{k}"), result.recall[i]);
        map.insert(format!("precision@{k}"), result.precision[i]);
        map.insert(format!("ndcg@{k}"), result.ndcg[i]);
    }
    map.insert("n_users_evaluated".to_string(), result.n_users_evaluated as f64);
    map
}
