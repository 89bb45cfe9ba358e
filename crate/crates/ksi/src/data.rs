//! Interaction data and modality feature matrices.
//!
//! Raw user/item ids are re-indexed densely on load; the original labels are
//! kept so results can be reported in terms of the input ids.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KsiError, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// User-item implicit feedback with per-record split labels.
///
/// Invariants upheld by construction:
/// - every `(user, item, split)` triple is unique and a `(user, item)` pair
///   appears in at most one split,
/// - all indices are in bounds,
/// - every user has at least one `Train` record (users without one are
///   dropped with a warning at load time).
#[derive(Debug, Clone)]
pub struct InteractionTable {
    user_ids: Vec<u32>,
    item_ids: Vec<u32>,
    splits: Vec<Split>,
    n_users: usize,
    n_items: usize,
    user_labels: Vec<String>,
    item_labels: Vec<String>,
    // Per-user sorted item lists, rebuilt whenever splits change.
    train_by_user: Vec<Vec<u32>>,
    valid_by_user: Vec<Vec<u32>>,
    test_by_user: Vec<Vec<u32>>,
}

impl InteractionTable {
    /// Build a table from raw (user label, item label, split) records.
    ///
    /// Records with `None` splits default to `Train` (splitting is then
    /// expected to happen through [`InteractionTable::split_dataset`]).
    pub fn from_records(records: Vec<(String, String, Option<Split>)>) -> Result<Self> {
        let had_split_column = records.iter().any(|(_, _, s)| s.is_some());

        // Dense re-indexing by first appearance. Items keep every label seen
        // in the input so feature-file rows stay aligned even if a user drop
        // removes an item's last record.
        let mut user_index: HashMap<String, u32> = HashMap::new();
        let mut item_index: HashMap<String, u32> = HashMap::new();
        let mut user_labels: Vec<String> = Vec::new();
        let mut item_labels: Vec<String> = Vec::new();
        let mut rows: Vec<(u32, u32, Split)> = Vec::with_capacity(records.len());

        for (user, item, split) in records {
            let u = *user_index.entry(user.clone()).or_insert_with(|| {
                user_labels.push(user.clone());
                (user_labels.len() - 1) as u32
            });
            let i = *item_index.entry(item.clone()).or_insert_with(|| {
                item_labels.push(item.clone());
                (item_labels.len() - 1) as u32
            });
            rows.push((u, i, split.unwrap_or(Split::Train)));
        }

        // Reject duplicate (user, item, split) triples and (user, item)
        // pairs that appear in more than one split; either would break the
        // train/eval disjointness the pipeline relies on.
        let mut seen: HashMap<(u32, u32), Split> = HashMap::new();
        let mut dup_triples = 0usize;
        let mut cross_split = 0usize;
        for &(u, i, s) in &rows {
            match seen.insert((u, i), s) {
                None => {}
                Some(prev) if prev == s => dup_triples += 1,
                Some(_) => cross_split += 1,
            }
        }
        if dup_triples > 0 {
            return Err(KsiError::Validation(format!(
                "{dup_triples} duplicate (user, item, split) record(s)"
            )));
        }
        if cross_split > 0 {
            return Err(KsiError::Validation(format!(
                "{cross_split} (user, item) pair(s) appear in more than one split"
            )));
        }

        // Drop users without any train record (only possible when the input
        // carried explicit split labels).
        if had_split_column {
            let mut has_train = vec![false; user_labels.len()];
            for &(u, _, s) in &rows {
                if s == Split::Train {
                    has_train[u as usize] = true;
                }
            }
            let dropped = has_train.iter().filter(|t| !**t).count();
            if dropped > 0 {
                log::warn!("dropping {dropped} user(s) without any train record");
                let mut remap: Vec<Option<u32>> = vec![None; user_labels.len()];
                let mut kept_labels = Vec::with_capacity(user_labels.len() - dropped);
                for (old, label) in user_labels.iter().enumerate() {
                    if has_train[old] {
                        remap[old] = Some(kept_labels.len() as u32);
                        kept_labels.push(label.clone());
                    }
                }
                rows.retain(|(u, _, _)| remap[*u as usize].is_some());
                for row in &mut rows {
                    row.0 = remap[row.0 as usize].unwrap();
                }
                user_labels = kept_labels;
            }
        }

        if rows.is_empty() {
            return Err(KsiError::Validation(
                "no interaction records after validation".to_string(),
            ));
        }

        let n_users = user_labels.len();
        let n_items = item_labels.len();
        let mut table = InteractionTable {
            user_ids: rows.iter().map(|r| r.0).collect(),
            item_ids: rows.iter().map(|r| r.1).collect(),
            splits: rows.iter().map(|r| r.2).collect(),
            n_users,
            n_items,
            user_labels,
            item_labels,
            train_by_user: Vec::new(),
            valid_by_user: Vec::new(),
            test_by_user: Vec::new(),
        };
        table.rebuild_user_lists();
        Ok(table)
    }

    /// Load interactions from a delimited text file.
    ///
    /// Each line is `user<delim>item[<delim>{train|valid|test}]`. The split
    /// column must be present on all lines or on none.
    pub fn load(path: &Path, delimiter: char) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KsiError::io(path.display().to_string(), e))?;
        let path_s = path.display().to_string();

        let mut records: Vec<(String, String, Option<Split>)> = Vec::new();
        let mut n_fields: Option<usize> = None;
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(delimiter).collect();
            let parse_err = |msg: String| KsiError::Parse {
                path: path_s.clone(),
                line: line_no,
                msg,
            };
            if fields.len() != 2 && fields.len() != 3 {
                return Err(parse_err(format!(
                    "expected 2 or 3 fields, found {}",
                    fields.len()
                )));
            }
            match n_fields {
                None => n_fields = Some(fields.len()),
                Some(n) if n != fields.len() => {
                    return Err(parse_err(format!(
                        "inconsistent field count: file uses {n} fields, this line has {}",
                        fields.len()
                    )));
                }
                Some(_) => {}
            }
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(parse_err("empty user or item id".to_string()));
            }
            let split = if fields.len() == 3 {
                Some(match fields[2] {
                    "train" => Split::Train,
                    "valid" => Split::Valid,
                    "test" => Split::Test,
                    other => {
                        return Err(parse_err(format!(
                            "unknown split label {other:?} (expected train|valid|test)"
                        )))
                    }
                })
            } else {
                None
            };
            records.push((fields[0].to_string(), fields[1].to_string(), split));
        }
        if records.is_empty() {
            return Err(KsiError::Validation(format!("{path_s}: no records")));
        }
        Self::from_records(records)
    }

    fn rebuild_user_lists(&mut self) {
        let mut train = vec![Vec::new(); self.n_users];
        let mut valid = vec![Vec::new(); self.n_users];
        let mut test = vec![Vec::new(); self.n_users];
        for idx in 0..self.user_ids.len() {
            let u = self.user_ids[idx] as usize;
            let i = self.item_ids[idx];
            match self.splits[idx] {
                Split::Train => train[u].push(i),
                Split::Valid => valid[u].push(i),
                Split::Test => test[u].push(i),
            }
        }
        for list in train.iter_mut().chain(valid.iter_mut()).chain(test.iter_mut()) {
            list.sort_unstable();
        }
        self.train_by_user = train;
        self.valid_by_user = valid;
        self.test_by_user = test;
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_records(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_records_in(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }

    /// Record view: (user, item, split) triples in input order.
    pub fn records(&self) -> impl Iterator<Item = (u32, u32, Split)> + '_ {
        (0..self.user_ids.len()).map(move |i| (self.user_ids[i], self.item_ids[i], self.splits[i]))
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn train_items(&self, user: u32) -> &[u32] {
        &self.train_by_user[user as usize]
    }

    pub fn valid_items(&self, user: u32) -> &[u32] {
        &self.valid_by_user[user as usize]
    }

    pub fn test_items(&self, user: u32) -> &[u32] {
        &self.test_by_user[user as usize]
    }

    pub fn is_train_interaction(&self, user: u32, item: u32) -> bool {
        self.train_by_user[user as usize].binary_search(&item).is_ok()
    }

    pub fn user_label(&self, user: u32) -> &str {
        &self.user_labels[user as usize]
    }

    pub fn item_label(&self, item: u32) -> &str {
        &self.item_labels[item as usize]
    }

    pub fn encode_user(&self, label: &str) -> Option<u32> {
        self.user_labels.iter().position(|l| l == label).map(|p| p as u32)
    }

    pub fn encode_item(&self, label: &str) -> Option<u32> {
        self.item_labels.iter().position(|l| l == label).map(|p| p as u32)
    }

    /// Re-partition all records into train/valid/test, per user, at the
    /// given ratios. Deterministic for a fixed seed. Users with fewer than 3
    /// records keep everything in train.
    pub fn split_dataset(&self, ratios: (f64, f64, f64), rng: &mut ChaCha8Rng) -> Result<Self> {
        let (rt, rv, rte) = ratios;
        for (name, r) in [("train", rt), ("valid", rv), ("test", rte)] {
            if !(0.0..=1.0).contains(&r) || !r.is_finite() {
                return Err(KsiError::Config(format!(
                    "split ratio {name}={r} out of [0, 1]"
                )));
            }
        }
        if (rt + rv + rte - 1.0).abs() > 1e-9 {
            return Err(KsiError::Config(format!(
                "split ratios must sum to 1, got {}",
                rt + rv + rte
            )));
        }

        // Record indices per user, in input order.
        let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); self.n_users];
        for (idx, &u) in self.user_ids.iter().enumerate() {
            per_user[u as usize].push(idx);
        }

        let mut new_splits = vec![Split::Train; self.user_ids.len()];
        let mut small_users = 0usize;
        for indices in per_user.iter_mut() {
            let n = indices.len();
            if n < 3 {
                small_users += 1;
                continue; // all records stay Train
            }
            let n_valid = (rv * n as f64).floor() as usize;
            let n_test = (rte * n as f64).floor() as usize;
            let n_train = n - n_valid - n_test;
            if n_train == 0 {
                small_users += 1;
                continue;
            }
            indices.shuffle(rng);
            for (pos, &rec) in indices.iter().enumerate() {
                new_splits[rec] = if pos < n_train {
                    Split::Train
                } else if pos < n_train + n_valid {
                    Split::Valid
                } else {
                    Split::Test
                };
            }
        }
        if small_users > 0 {
            log::warn!("{small_users} user(s) kept all records in train (too few interactions)");
        }

        let mut out = self.clone();
        out.splits = new_splits;
        out.rebuild_user_lists();
        Ok(out)
    }
}

/// Dense per-modality item features, one row per item index.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub modality: String,
    pub values: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(modality: impl Into<String>, values: Array2<f32>) -> Result<Self> {
        for ((r, c), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(KsiError::Validation(format!(
                    "feature matrix contains non-finite value {v} at row {r}, col {c}"
                )));
            }
        }
        let any_nonzero = values.rows().into_iter().any(|row| row.iter().any(|v| *v != 0.0));
        if !any_nonzero {
            return Err(KsiError::Validation(
                "feature matrix has no nonzero row".to_string(),
            ));
        }
        Ok(FeatureMatrix {
            modality: modality.into(),
            values,
        })
    }

    pub fn load(path: &Path, modality: impl Into<String>) -> Result<Self> {
        let values = io::read_tensor_f32(path)?;
        Self::new(modality, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_tensor_f32(path, &self.values)
    }

    pub fn n_items(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn validate_against(&self, table: &InteractionTable) -> Result<()> {
        if self.n_items() != table.n_items() {
            return Err(KsiError::Shape(format!(
                "feature matrix '{}' has {} rows but the dataset has {} items",
                self.modality,
                self.n_items(),
                table.n_items()
            )));
        }
        Ok(())
    }
}

/// Aligned (user, positive item, negative item) index arrays.
#[derive(Debug, Clone)]
pub struct BprBatch {
    pub users: Vec<u32>,
    pub pos_items: Vec<u32>,
    pub neg_items: Vec<u32>,
}

impl BprBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Samples BPR triples: (user, pos) uniform over train records, neg uniform
/// over items the user has not trained on.
pub struct BprSampler<'a> {
    table: &'a InteractionTable,
    train_records: Vec<(u32, u32)>,
    rng: ChaCha8Rng,
}

impl<'a> BprSampler<'a> {
    pub fn new(table: &'a InteractionTable, rng: ChaCha8Rng) -> Result<Self> {
        let train_records: Vec<(u32, u32)> = table
            .records()
            .filter(|(_, _, s)| *s == Split::Train)
            .map(|(u, i, _)| (u, i))
            .collect();
        if train_records.is_empty() {
            return Err(KsiError::Validation("no train records to sample".to_string()));
        }
        for u in 0..table.n_users() as u32 {
            if table.train_items(u).len() >= table.n_items() {
                return Err(KsiError::Config(format!(
                    "user {} ({}) has trained on every item; negative sampling is impossible",
                    u,
                    table.user_label(u)
                )));
            }
        }
        Ok(BprSampler {
            table,
            train_records,
            rng,
        })
    }

    pub fn sample(&mut self, batch_size: usize) -> BprBatch {
        let n_items = self.table.n_items() as u32;
        let mut users = Vec::with_capacity(batch_size);
        let mut pos_items = Vec::with_capacity(batch_size);
        let mut neg_items = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let rec = self.rng.gen_range(0..self.train_records.len());
            let (u, pos) = self.train_records[rec];
            let neg = self.sample_negative(u, n_items);
            users.push(u);
            pos_items.push(pos);
            neg_items.push(neg);
        }
        BprBatch {
            users,
            pos_items,
            neg_items,
        }
    }

    fn sample_negative(&mut self, user: u32, n_items: u32) -> u32 {
        // Rejection sampling, then a linear scan over the complement if a
        // heavy train set keeps rejecting (cap 100).
        for _ in 0..100 {
            let cand = self.rng.gen_range(0..n_items);
            if !self.table.is_train_interaction(user, cand) {
                return cand;
            }
        }
        let complement: Vec<u32> = (0..n_items)
            .filter(|i| !self.table.is_train_interaction(user, *i))
            .collect();
        // Non-empty by the constructor check.
        complement[self.rng.gen_range(0..complement.len())]
    }
}
