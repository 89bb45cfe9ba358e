//! Modality-aware k-NN item graphs.
//!
//! Pipeline: cosine similarity over item features, negative entries clipped
//! to zero, per-row top-k sparsification, then symmetric degree
//! normalization. The similarity matrix is never materialized in full; rows
//! are processed in blocks.
//!
//! All similarity arithmetic runs in f64 even for f32 features so that the
//! selected top-k sets are stable across platforms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::data::FeatureMatrix;
use crate::error::{KsiError, Result};

pub const GRAPH_MAGIC: &[u8; 4] = b"KSIG";
pub const GRAPH_VERSION: u32 = 1;

/// Item-item adjacency in compressed sparse row form.
///
/// Column indices are sorted ascending within each row; this is the
/// canonical form for bit-exact serialization and deterministic kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    weights: Vec<f64>,
    pub modality: String,
}

impl SparseGraph {
    /// Assemble from per-row `(col, weight)` lists. Rows are sorted by
    /// column index here, so callers may pass entries in any order.
    pub fn from_rows(
        n: usize,
        mut rows: Vec<Vec<(u32, f64)>>,
        modality: impl Into<String>,
    ) -> Result<Self> {
        if rows.len() != n {
            return Err(KsiError::Shape(format!(
                "expected {n} rows, got {}",
                rows.len()
            )));
        }
        let mut row_offsets = Vec::with_capacity(n + 1);
        row_offsets.push(0usize);
        let mut col_indices = Vec::new();
        let mut weights = Vec::new();
        for row in rows.iter_mut() {
            row.sort_unstable_by_key(|(c, _)| *c);
            for &(c, w) in row.iter() {
                if c as usize >= n {
                    return Err(KsiError::Shape(format!(
                        "column index {c} out of bounds for n={n}"
                    )));
                }
                if !w.is_finite() || w < 0.0 {
                    return Err(KsiError::Validation(format!(
                        "edge weight {w} must be finite and nonnegative"
                    )));
                }
                col_indices.push(c);
                weights.push(w);
            }
            row_offsets.push(col_indices.len());
        }
        Ok(SparseGraph {
            n,
            row_offsets,
            col_indices,
            weights,
            modality: modality.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let lo = self.row_offsets[i];
        let hi = self.row_offsets[i + 1];
        (&self.col_indices[lo..hi], &self.weights[lo..hi])
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    /// Row sums of the adjacency (the degrees used for normalization).
    pub fn degrees(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).1.iter().sum())
            .collect()
    }

    /// Realize as a dense matrix; intended for small graphs in tests and
    /// oracles.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            let (cols, ws) = self.row(i);
            for (c, w) in cols.iter().zip(ws) {
                out[[i, *c as usize]] = *w;
            }
        }
        out
    }

    /// Transposed graph (used to pull gradients back through propagation).
    pub fn transpose(&self) -> SparseGraph {
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); self.n];
        for i in 0..self.n {
            let (cols, ws) = self.row(i);
            for (c, w) in cols.iter().zip(ws) {
                rows[*c as usize].push((i as u32, *w));
            }
        }
        // Entries are pushed in ascending source order, already sorted.
        SparseGraph::from_rows(self.n, rows, self.modality.clone()).expect("transpose is valid")
    }

    /// Sparse-dense product `out[i] = sum_j G_ij * H[j]`.
    ///
    /// Each output row accumulates in ascending column order, so the result
    /// is identical regardless of how many worker threads run.
    pub fn spmm(&self, h: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if h.nrows() != self.n {
            return Err(KsiError::Shape(format!(
                "spmm: graph has {} nodes but matrix has {} rows",
                self.n,
                h.nrows()
            )));
        }
        let d = h.ncols();
        let mut out = Array2::<f64>::zeros((self.n, d));
        let out_slice = out.as_slice_mut().expect("freshly allocated is contiguous");
        out_slice
            .par_chunks_mut(d.max(1))
            .enumerate()
            .for_each(|(i, out_row)| {
                let (cols, ws) = self.row(i);
                for (c, w) in cols.iter().zip(ws) {
                    let src = h.row(*c as usize);
                    for (o, v) in out_row.iter_mut().zip(src.iter()) {
                        *o += w * v;
                    }
                }
            });
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let path_s = path.display().to_string();
        let file = File::create(path).map_err(|e| KsiError::io(path_s.clone(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| KsiError::io(path.display().to_string(), e);
        w.write_all(GRAPH_MAGIC).map_err(io_err)?;
        w.write_all(&GRAPH_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.n as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.nnz() as u64).to_le_bytes()).map_err(io_err)?;
        for off in &self.row_offsets {
            w.write_all(&(*off as u64).to_le_bytes()).map_err(io_err)?;
        }
        for c in &self.col_indices {
            w.write_all(&(*c as u64).to_le_bytes()).map_err(io_err)?;
        }
        for v in &self.weights {
            w.write_all(&v.to_bits().to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn read(path: &Path, modality: impl Into<String>) -> Result<Self> {
        let path_s = path.display().to_string();
        let file = File::open(path).map_err(|e| KsiError::io(path_s.clone(), e))?;
        let mut r = BufReader::new(file);
        let fmt = |msg: String| KsiError::format(path_s.clone(), msg);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fmt("truncated header".into()))?;
        if &magic != GRAPH_MAGIC {
            return Err(fmt(format!("magic mismatch: {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| fmt("truncated header".into()))?;
        let version = u32::from_le_bytes(b4);
        if version != GRAPH_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| fmt("truncated header".into()))?;
        let n = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(|_| fmt("truncated header".into()))?;
        let nnz = u64::from_le_bytes(b8) as usize;

        let mut read_u64s = |count: usize, what: &str| -> Result<Vec<u64>> {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)
                .map_err(|_| KsiError::format(path_s.clone(), format!("truncated {what}")))?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };

        let offsets = read_u64s(n + 1, "row offsets")?;
        let cols = read_u64s(nnz, "column indices")?;
        let raw_weights = read_u64s(nnz, "weights")?;

        if offsets.first() != Some(&0) || offsets.last() != Some(&(nnz as u64)) {
            return Err(fmt("row offsets do not span the edge list".into()));
        }
        let mut row_offsets = Vec::with_capacity(n + 1);
        for pair in offsets.windows(2) {
            if pair[1] < pair[0] {
                return Err(fmt("row offsets are not monotone".into()));
            }
        }
        for off in &offsets {
            row_offsets.push(*off as usize);
        }
        let mut col_indices = Vec::with_capacity(nnz);
        for c in cols {
            if c as usize >= n {
                return Err(fmt(format!("column index {c} out of bounds")));
            }
            col_indices.push(c as u32);
        }
        let weights: Vec<f64> = raw_weights.into_iter().map(f64::from_bits).collect();
        for w in &weights {
            if !w.is_finite() || *w < 0.0 {
                return Err(fmt(format!("invalid edge weight {w}")));
            }
        }
        for i in 0..n {
            let row = &col_indices[row_offsets[i]..row_offsets[i + 1]];
            if row.windows(2).any(|p| p[0] >= p[1]) {
                return Err(fmt(format!("row {i} columns not strictly ascending")));
            }
        }

        Ok(SparseGraph {
            n,
            row_offsets,
            col_indices,
            weights,
            modality: modality.into(),
        })
    }
}

/// Options for graph construction.
#[derive(Debug, Clone)]
pub struct GraphBuildOptions {
    /// Rows per block in the blocked similarity computation.
    pub block_size: usize,
    /// Drop the diagonal before top-k selection (ablation flag).
    pub exclude_self_loop: bool,
}

impl Default for GraphBuildOptions {
    fn default() -> Self {
        GraphBuildOptions {
            block_size: 1024,
            exclude_self_loop: false,
        }
    }
}

fn row_norms_f64(features: &ArrayView2<f32>) -> Vec<f64> {
    features
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt())
        .collect()
}

fn dot_f64(a: ndarray::ArrayView1<f32>, b: ndarray::ArrayView1<f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
}

fn similarity_row_into(
    features: &ArrayView2<f32>,
    norms: &[f64],
    i: usize,
    out: &mut [f64],
) {
    let n = features.nrows();
    debug_assert_eq!(out.len(), n);
    if norms[i] == 0.0 {
        out.fill(0.0);
        return;
    }
    let fi = features.row(i);
    for j in 0..n {
        out[j] = if norms[j] == 0.0 {
            0.0
        } else {
            dot_f64(fi, features.row(j)) / (norms[i] * norms[j])
        };
    }
    // The self-cosine is 1 by definition; spell it out so top-k selection
    // never depends on rounding of dot(e_i, e_i) / ||e_i||^2.
    out[i] = 1.0;
}

/// Cosine similarity of item `i` against every item. Rows with zero norm
/// yield similarity 0 by convention.
pub fn cosine_similarity_row(features: &FeatureMatrix, i: usize) -> Vec<f64> {
    let view = features.values.view();
    let norms = row_norms_f64(&view);
    let mut out = vec![0.0; features.n_items()];
    similarity_row_into(&view, &norms, i, &mut out);
    out
}

/// Select the kept entries of one similarity row.
///
/// Negative entries are clipped to zero first, then the k largest remaining
/// entries are kept (ties broken by smaller item index). The self entry is
/// maximal by construction and is always retained; a zero-norm row keeps a
/// conventional zero-weight self edge so the node stays addressable.
fn select_row_topk(row: &[f64], i: usize, k: usize, exclude_self: bool) -> Vec<(u32, f64)> {
    let mut candidates: Vec<(u32, f64)> = Vec::new();
    for (j, &s) in row.iter().enumerate() {
        if j == i || s <= 0.0 {
            continue;
        }
        candidates.push((j as u32, s));
    }
    let budget = if exclude_self {
        k
    } else if row[i] > 0.0 {
        k - 1
    } else {
        // Zero-norm row: similarity is 0 everywhere, keep only the
        // conventional self entry.
        return vec![(i as u32, 0.0)];
    };

    let cmp = |a: &(u32, f64), b: &(u32, f64)| {
        b.1.partial_cmp(&a.1)
            .expect("similarities are finite")
            .then(a.0.cmp(&b.0))
    };
    if candidates.len() > budget {
        if budget > 0 {
            candidates.select_nth_unstable_by(budget - 1, cmp);
        }
        candidates.truncate(budget);
    }
    candidates.sort_unstable_by(cmp);

    let mut kept = Vec::with_capacity(budget + 1);
    if !exclude_self {
        kept.push((i as u32, row[i]));
    }
    kept.extend(candidates);
    kept
}

/// Per-row top-k sparsification of a dense similarity matrix (unnormalized
/// adjacency). `k >= n` keeps every positive entry of each row.
pub fn topk_sparsify(similarities: &ArrayView2<f64>, k: usize, exclude_self: bool) -> Result<SparseGraph> {
    if k == 0 {
        return Err(KsiError::Config("top-k requires k >= 1".to_string()));
    }
    let n = similarities.nrows();
    if similarities.ncols() != n {
        return Err(KsiError::Shape(format!(
            "similarity matrix must be square, got {}x{}",
            n,
            similarities.ncols()
        )));
    }
    let rows: Vec<Vec<(u32, f64)>> = (0..n)
        .map(|i| {
            let row = similarities.row(i);
            let row_slice: Vec<f64> = row.iter().copied().collect();
            select_row_topk(&row_slice, i, k, exclude_self)
        })
        .collect();
    SparseGraph::from_rows(n, rows, "")
}

/// Symmetric degree normalization `D^{-1/2} S D^{-1/2}` with row-sum
/// degrees. Zero-degree rows keep a zero scaling factor, so isolated nodes
/// propagate nothing. The sparsity pattern is unchanged.
pub fn normalize(adj: &SparseGraph) -> SparseGraph {
    let degrees = adj.degrees();
    let inv_sqrt: Vec<f64> = degrees
        .iter()
        .map(|d| if *d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut out = adj.clone();
    for i in 0..out.n {
        let lo = out.row_offsets[i];
        let hi = out.row_offsets[i + 1];
        for idx in lo..hi {
            let j = out.col_indices[idx] as usize;
            out.weights[idx] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    out
}

/// Build the normalized modality graph from raw features.
///
/// Rows are processed `block_size` at a time; within a block each row is
/// independent, so worker count never changes the output.
pub fn build_modality_graph(
    features: &FeatureMatrix,
    k: usize,
    opts: &GraphBuildOptions,
) -> Result<SparseGraph> {
    if k == 0 {
        return Err(KsiError::Config("k-NN graph requires k >= 1".to_string()));
    }
    if opts.block_size == 0 {
        return Err(KsiError::Config("block size must be >= 1".to_string()));
    }
    let view = features.values.view();
    let n = view.nrows();
    let norms = row_norms_f64(&view);

    let mut rows: Vec<Vec<(u32, f64)>> = Vec::with_capacity(n);
    for block_start in (0..n).step_by(opts.block_size) {
        let block_end = (block_start + opts.block_size).min(n);
        let mut block_rows: Vec<Vec<(u32, f64)>> = (block_start..block_end)
            .into_par_iter()
            .map_init(
                || vec![0.0f64; n],
                |scratch, i| {
                    similarity_row_into(&view, &norms, i, scratch);
                    select_row_topk(scratch, i, k, opts.exclude_self_loop)
                },
            )
            .collect();
        rows.append(&mut block_rows);
    }

    let unnormalized = SparseGraph::from_rows(n, rows, features.modality.clone())?;
    Ok(normalize(&unnormalized))
}
