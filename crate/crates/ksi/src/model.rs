//! Trainable parameters, CF backbones, modality fusion, item enhancement,
//! scoring, and the pairwise ranking loss.

use ndarray::{Array1, Array2, Axis};

use crate::data::{BprBatch, InteractionTable, Split};
use crate::error::{KsiError, Result};
use crate::graph::SparseGraph;

/// Which collaborative-filtering backbone refines the ID embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Backbone {
    Mf,
    LightGcn,
}

impl std::str::FromStr for Backbone {
    type Err = KsiError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf" => Ok(Backbone::Mf),
            "lightgcn" => Ok(Backbone::LightGcn),
            other => Err(KsiError::Config(format!(
                "unknown backbone {other:?} (expected mf|lightgcn)"
            ))),
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Backbone::Mf => write!(f, "mf"),
            Backbone::LightGcn => write!(f, "lightgcn"),
        }
    }
}

/// All trainable state: user/item ID embeddings and modality-weight logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub user_emb: Array2<f64>,
    pub item_emb: Array2<f64>,
    pub modality_logits: Array1<f64>,
}

impl Parameters {
    pub fn d(&self) -> usize {
        self.user_emb.ncols()
    }

    pub fn n_modalities(&self) -> usize {
        self.modality_logits.len()
    }

    /// Softmax of the logits: positive weights summing to 1.
    pub fn modality_weights(&self) -> Vec<f64> {
        softmax(self.modality_logits.as_slice().unwrap())
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, ok) in [
            ("user_emb", self.user_emb.iter().all(|v| v.is_finite())),
            ("item_emb", self.item_emb.iter().all(|v| v.is_finite())),
            (
                "modality_logits",
                self.modality_logits.iter().all(|v| v.is_finite()),
            ),
        ] {
            if !ok {
                return Err(KsiError::Runtime(format!(
                    "parameter {name} contains non-finite values"
                )));
            }
        }
        Ok(())
    }
}

/// Gradients with the same shapes as [`Parameters`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub user_emb: Array2<f64>,
    pub item_emb: Array2<f64>,
    pub modality_logits: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        Gradients {
            user_emb: Array2::zeros(params.user_emb.raw_dim()),
            item_emb: Array2::zeros(params.item_emb.raw_dim()),
            modality_logits: Array1::zeros(params.modality_logits.raw_dim()),
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Adjoint of the softmax: maps dLoss/dweights to dLoss/dlogits.
pub fn softmax_backward(weights: &[f64], d_weights: &[f64]) -> Vec<f64> {
    let dot: f64 = weights.iter().zip(d_weights).map(|(a, g)| a * g).sum();
    weights
        .iter()
        .zip(d_weights)
        .map(|(a, g)| a * (g - dot))
        .collect()
}

/// CF-refined user/item embeddings.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub user_emb: Array2<f64>,
    pub item_emb: Array2<f64>,
}

/// MF backbone: the ID embeddings are the model.
pub fn backbone_mf(params: &Parameters) -> BackboneOutput {
    BackboneOutput {
        user_emb: params.user_emb.clone(),
        item_emb: params.item_emb.clone(),
    }
}

/// Symmetric-normalized user-item bipartite adjacency over the train split.
/// Nodes 0..N_U are users; N_U..N_U+N_I are items.
pub fn build_bipartite_adj(table: &InteractionTable) -> Result<SparseGraph> {
    let n_users = table.n_users();
    let n_items = table.n_items();
    let n = n_users + n_items;
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    let mut n_train = 0usize;
    for (u, i, s) in table.records() {
        if s != Split::Train {
            continue;
        }
        n_train += 1;
        rows[u as usize].push(((n_users as u32) + i, 1.0));
        rows[n_users + i as usize].push((u, 1.0));
    }
    if n_train == 0 {
        return Err(KsiError::Validation(
            "bipartite train graph is empty".to_string(),
        ));
    }
    let adj = SparseGraph::from_rows(n, rows, "bipartite")?;
    Ok(crate::graph::normalize(&adj))
}

/// LightGCN backbone: propagate the stacked `[X_U; X_I]` embedding over the
/// normalized bipartite graph and average layers 0..layers.
pub fn backbone_lightgcn(
    params: &Parameters,
    adj: &SparseGraph,
    layers: usize,
) -> Result<BackboneOutput> {
    let n_users = params.user_emb.nrows();
    let n_items = params.item_emb.nrows();
    if adj.n() != n_users + n_items {
        return Err(KsiError::Shape(format!(
            "bipartite graph has {} nodes, expected {}",
            adj.n(),
            n_users + n_items
        )));
    }
    let d = params.d();
    let mut current = Array2::<f64>::zeros((n_users + n_items, d));
    current.slice_mut(ndarray::s![..n_users, ..]).assign(&params.user_emb);
    current.slice_mut(ndarray::s![n_users.., ..]).assign(&params.item_emb);

    let mut mean = current.clone();
    for _ in 0..layers {
        current = adj.spmm(&current.view())?;
        mean += &current;
    }
    mean /= layers as f64 + 1.0;

    Ok(BackboneOutput {
        user_emb: mean.slice(ndarray::s![..n_users, ..]).to_owned(),
        item_emb: mean.slice(ndarray::s![n_users.., ..]).to_owned(),
    })
}

/// Adjoint of [`backbone_lightgcn`]: pull output gradients back to the ID
/// embeddings. The normalized bipartite adjacency is symmetric, so the
/// transpose propagation reuses the forward operator.
pub fn backbone_lightgcn_backward(
    adj: &SparseGraph,
    layers: usize,
    d_user: &Array2<f64>,
    d_item: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n_users = d_user.nrows();
    let n_items = d_item.nrows();
    let d = d_user.ncols();
    let mut g = Array2::<f64>::zeros((n_users + n_items, d));
    g.slice_mut(ndarray::s![..n_users, ..]).assign(d_user);
    g.slice_mut(ndarray::s![n_users.., ..]).assign(d_item);
    g /= layers as f64 + 1.0;

    let mut acc = g.clone();
    let mut current = g;
    for _ in 0..layers {
        current = adj.spmm(&current.view())?;
        acc += &current;
    }
    Ok((
        acc.slice(ndarray::s![..n_users, ..]).to_owned(),
        acc.slice(ndarray::s![n_users.., ..]).to_owned(),
    ))
}

/// Weighted fusion of per-modality top-layer representations.
pub fn fuse(tops: &[&Array2<f64>], weights: &[f64]) -> Result<Array2<f64>> {
    if tops.is_empty() || tops.len() != weights.len() {
        return Err(KsiError::Shape(
            "fusion needs one weight per modality".to_string(),
        ));
    }
    let mut fused = Array2::<f64>::zeros(tops[0].raw_dim());
    for (top, w) in tops.iter().zip(weights) {
        if top.raw_dim() != fused.raw_dim() {
            return Err(KsiError::Shape(
                "fusion inputs must share a shape".to_string(),
            ));
        }
        fused.scaled_add(*w, top);
    }
    Ok(fused)
}

/// Enhancement: add the fused representation, scaled down by its maximum
/// row norm, to the backbone item embeddings. Returns the enhanced matrix,
/// the scale, and the argmax row (smallest index on ties). A zero scale
/// skips the addition.
pub fn enhance(item_emb: &Array2<f64>, fused: &Array2<f64>) -> Result<(Array2<f64>, f64, usize)> {
    if item_emb.raw_dim() != fused.raw_dim() {
        return Err(KsiError::Shape(
            "enhancement inputs must share a shape".to_string(),
        ));
    }
    let mut best = f64::NEG_INFINITY;
    let mut argmax = 0usize;
    for (i, row) in fused.axis_iter(Axis(0)).enumerate() {
        let norm_sq: f64 = row.iter().map(|v| v * v).sum();
        if norm_sq > best {
            best = norm_sq;
            argmax = i;
        }
    }
    let scale = best.max(0.0).sqrt();
    if scale > 0.0 {
        let enhanced = item_emb + &(fused / scale);
        Ok((enhanced, scale, argmax))
    } else {
        Ok((item_emb.clone(), 0.0, argmax))
    }
}

/// Scores for one user against a list of items, through the enhancement
/// step: `y_ui = x_u . (x_i + h_i / max_j ||h_j||)`.
pub fn enhance_and_score(
    backbone: &BackboneOutput,
    fused: &Array2<f64>,
    user: u32,
    items: &[u32],
) -> Result<Vec<f64>> {
    let (enhanced, _, _) = enhance(&backbone.item_emb, fused)?;
    let u = backbone.user_emb.row(user as usize);
    Ok(items
        .iter()
        .map(|&i| {
            u.iter()
                .zip(enhanced.row(i as usize).iter())
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect())
}

/// Numerically stable softplus, `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Pairwise ranking loss: `sum_b softplus(-(pos_b - neg_b))`.
pub fn bpr_loss(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    if scores_pos.len() != scores_neg.len() {
        return Err(KsiError::Shape(
            "positive/negative score lengths differ".to_string(),
        ));
    }
    Ok(scores_pos
        .iter()
        .zip(scores_neg)
        .map(|(p, n)| softplus(-(p - n)))
        .sum())
}

/// Per-triple gradient of the BPR loss with respect to the margin:
/// `d softplus(-m) / dm = sigma(m) - 1`.
pub fn bpr_margin_grads(scores_pos: &[f64], scores_neg: &[f64]) -> Vec<f64> {
    scores_pos
        .iter()
        .zip(scores_neg)
        .map(|(p, n)| {
            let margin = p - n;
            // sigma(m) - 1 computed via the stable complement.
            -1.0 / (1.0 + margin.exp())
        })
        .collect()
}

/// Batch scores through the enhanced item matrix.
pub fn batch_scores(
    user_emb: &Array2<f64>,
    enhanced_items: &Array2<f64>,
    batch: &BprBatch,
) -> (Vec<f64>, Vec<f64>) {
    let dot = |u: u32, i: u32| -> f64 {
        user_emb
            .row(u as usize)
            .iter()
            .zip(enhanced_items.row(i as usize).iter())
            .map(|(a, b)| a * b)
            .sum()
    };
    let pos: Vec<f64> = batch
        .users
        .iter()
        .zip(&batch.pos_items)
        .map(|(&u, &i)| dot(u, i))
        .collect();
    let neg: Vec<f64> = batch
        .users
        .iter()
        .zip(&batch.neg_items)
        .map(|(&u, &i)| dot(u, i))
        .collect();
    (pos, neg)
}

/// Scatter batch score gradients into dense user/item gradient matrices.
///
/// `d_margin[b]` multiplies `+1` on the positive triple and `-1` on the
/// negative one.
pub fn accumulate_score_grads(
    user_emb: &Array2<f64>,
    enhanced_items: &Array2<f64>,
    batch: &BprBatch,
    d_margin: &[f64],
    d_user: &mut Array2<f64>,
    d_items: &mut Array2<f64>,
) {
    for b in 0..batch.len() {
        let g = d_margin[b];
        let u = batch.users[b] as usize;
        let pos = batch.pos_items[b] as usize;
        let neg = batch.neg_items[b] as usize;
        for c in 0..user_emb.ncols() {
            let xu = user_emb[[u, c]];
            d_user[[u, c]] += g * (enhanced_items[[pos, c]] - enhanced_items[[neg, c]]);
            d_items[[pos, c]] += g * xu;
            d_items[[neg, c]] -= g * xu;
        }
    }
}

/// Adjoint of [`enhance`]: split the gradient on the enhanced matrix into
/// the backbone-item part (identity) and the fused part (scaled, with the
/// max-norm subgradient on the argmax row).
pub fn enhance_backward(
    d_enhanced: &Array2<f64>,
    fused: &Array2<f64>,
    scale: f64,
    argmax: usize,
) -> Array2<f64> {
    if scale == 0.0 {
        return Array2::zeros(fused.raw_dim());
    }
    let mut d_fused = d_enhanced / scale;
    // d scale / d fused_argmax = fused_argmax / scale; the scale divides the
    // whole matrix, so dL/dscale = -<d_enhanced, fused> / scale^2.
    let mut dl_dscale = 0.0;
    for (g, h) in d_enhanced.iter().zip(fused.iter()) {
        dl_dscale += g * h;
    }
    dl_dscale = -dl_dscale / (scale * scale);
    for c in 0..fused.ncols() {
        d_fused[[argmax, c]] += (fused[[argmax, c]] / scale) * dl_dscale;
    }
    d_fused
}
