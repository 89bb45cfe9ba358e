//! Run configuration: flat `key = value` text files with `#` comments.
//! Unknown keys are errors. `--set key=value` overrides reuse the same
//! parser, so scripted ablation grids need no extra config files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{KsiError, Result};
use crate::model::Backbone;
use crate::train::TrainConfig;

/// Everything `train` needs: hyperparameters plus file locations.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub train: TrainConfig,
    /// Modality tags in declaration order.
    pub modalities: Vec<String>,
    pub interactions: PathBuf,
    /// Per-modality raw feature files (used by preprocess/build-graph).
    pub features: BTreeMap<String, PathBuf>,
    /// Per-modality graph files.
    pub graphs: BTreeMap<String, PathBuf>,
    /// Per-modality reduced feature files.
    pub reduced: BTreeMap<String, PathBuf>,
    pub out_dir: PathBuf,
    pub split_ratios: (f64, f64, f64),
    pub eval_every: usize,
    pub eval_ks: Vec<usize>,
    /// Worker threads (0 = all cores). Results are identical regardless.
    pub threads: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            train: TrainConfig::default(),
            modalities: vec!["v".to_string(), "t".to_string()],
            interactions: PathBuf::new(),
            features: BTreeMap::new(),
            graphs: BTreeMap::new(),
            reduced: BTreeMap::new(),
            out_dir: PathBuf::from("run"),
            split_ratios: (0.8, 0.1, 0.1),
            eval_every: 1,
            eval_ks: vec![10, 20],
            threads: 0,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(KsiError::Config(format!(
            "key {key}: expected a boolean, got {other:?}"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| KsiError::Config(format!("key {key}: cannot parse {value:?}")))
}

fn parse_ks(key: &str, value: &str) -> Result<Vec<usize>> {
    let ks: Result<Vec<usize>> = value
        .split(',')
        .map(|p| parse_num::<usize>(key, p.trim()))
        .collect();
    let ks = ks?;
    if ks.is_empty() || ks.iter().any(|k| *k == 0) {
        return Err(KsiError::Config(format!("key {key}: cutoffs must be >= 1")));
    }
    Ok(ks)
}

impl RunSpec {
    /// Parse a config file. Later keys override earlier ones.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KsiError::io(path.display().to_string(), e))?;
        let mut spec = RunSpec::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| KsiError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            spec.apply(key.trim(), value.trim()).map_err(|e| KsiError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(spec)
    }

    /// Apply one `key=value` assignment (also the `--set` override format).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d" => self.train.d = parse_num(key, value)?,
            "k" => self.train.k = parse_num(key, value)?,
            "layers" => self.train.layers = parse_num(key, value)?,
            "backbone" => self.train.backbone = value.parse::<Backbone>()?,
            "backbone_layers" => self.train.backbone_layers = parse_num(key, value)?,
            "tau" => self.train.tau = parse_num(key, value)?,
            "alpha" => self.train.alpha = parse_num(key, value)?,
            "beta" => self.train.beta = parse_num(key, value)?,
            "lr" => self.train.lr = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "seed" => self.train.seed = parse_num(key, value)?,
            "use_sei" => self.train.use_sei = parse_bool(key, value)?,
            "use_ssi" => self.train.use_ssi = parse_bool(key, value)?,
            "k_negatives" => {
                self.train.k_negatives = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "bpr_mean" => self.train.bpr_mean = parse_bool(key, value)?,
            "rr_ssi_subsample" => self.train.rr_ssi_subsample = parse_num(key, value)?,
            "modalities" => {
                self.modalities = value
                    .split(',')
                    .map(|m| m.trim().to_string())
                    .filter(|m| !m.is_empty())
                    .collect();
                if self.modalities.is_empty() {
                    return Err(KsiError::Config("modalities must be nonempty".to_string()));
                }
            }
            "interactions" => self.interactions = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "train_ratio" => self.split_ratios.0 = parse_num(key, value)?,
            "valid_ratio" => self.split_ratios.1 = parse_num(key, value)?,
            "test_ratio" => self.split_ratios.2 = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "eval_ks" => self.eval_ks = parse_ks(key, value)?,
            "threads" => self.threads = parse_num(key, value)?,
            dotted => {
                let (prefix, modality) = dotted.split_once('.').ok_or_else(|| {
                    KsiError::Config(format!("unknown config key {key:?}"))
                })?;
                let map = match prefix {
                    "features" => &mut self.features,
                    "graph" => &mut self.graphs,
                    "reduced" => &mut self.reduced,
                    _ => return Err(KsiError::Config(format!("unknown config key {key:?}"))),
                };
                map.insert(modality.to_string(), PathBuf::from(value));
            }
        }
        Ok(())
    }

    /// Validate cross-field constraints for a training run.
    pub fn validate_for_train(&self) -> Result<()> {
        self.train.validate()?;
        if self.interactions.as_os_str().is_empty() {
            return Err(KsiError::Config("interactions path is required".to_string()));
        }
        for m in &self.modalities {
            let needs_graph =
                self.train.enhancement_active() && self.train.effective_layers() > 0;
            if needs_graph && !self.graphs.contains_key(m) {
                return Err(KsiError::Config(format!(
                    "graph.{m} is required (build it with `ksi build-graph`)"
                )));
            }
            if self.train.use_ssi && !self.reduced.contains_key(m) {
                return Err(KsiError::Config(format!(
                    "reduced.{m} is required (produce it with `ksi preprocess`)"
                )));
            }
        }
        for (name, map) in [("graph", &self.graphs), ("reduced", &self.reduced), ("features", &self.features)] {
            for m in map.keys() {
                if !self.modalities.contains(m) {
                    return Err(KsiError::Config(format!(
                        "{name}.{m} does not match any declared modality {:?}",
                        self.modalities
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fully resolved `key = value` map (defaults expanded); the manifest
    /// stores this and the config hash is computed over its canonical text.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let t = &self.train;
        map.insert("d".into(), t.d.to_string());
        map.insert("k".into(), t.k.to_string());
        map.insert("layers".into(), t.layers.to_string());
        map.insert("backbone".into(), t.backbone.to_string());
        map.insert("backbone_layers".into(), t.backbone_layers.to_string());
        map.insert("tau".into(), format!("{}", t.tau));
        map.insert("alpha".into(), format!("{}", t.alpha));
        map.insert("beta".into(), format!("{}", t.beta));
        map.insert("lr".into(), format!("{}", t.lr));
        map.insert("batch_size".into(), t.batch_size.to_string());
        map.insert("epochs".into(), t.epochs.to_string());
        map.insert("seed".into(), t.seed.to_string());
        map.insert("use_sei".into(), t.use_sei.to_string());
        map.insert("use_ssi".into(), t.use_ssi.to_string());
        map.insert(
            "k_negatives".into(),
            t.k_negatives.map(|k| k.to_string()).unwrap_or_else(|| "auto".into()),
        );
        map.insert("bpr_mean".into(), t.bpr_mean.to_string());
        map.insert("rr_ssi_subsample".into(), t.rr_ssi_subsample.to_string());
        map.insert("modalities".into(), self.modalities.join(","));
        map.insert("interactions".into(), self.interactions.display().to_string());
        map.insert("out_dir".into(), self.out_dir.display().to_string());
        map.insert("train_ratio".into(), format!("{}", self.split_ratios.0));
        map.insert("valid_ratio".into(), format!("{}", self.split_ratios.1));
        map.insert("test_ratio".into(), format!("{}", self.split_ratios.2));
        map.insert("eval_every".into(), self.eval_every.to_string());
        map.insert(
            "eval_ks".into(),
            self.eval_ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
        );
        map.insert("threads".into(), self.threads.to_string());
        for (m, p) in &self.features {
            map.insert(format!("features.{m}"), p.display().to_string());
        }
        for (m, p) in &self.graphs {
            map.insert(format!("graph.{m}"), p.display().to_string());
        }
        for (m, p) in &self.reduced {
            map.insert(format!("reduced.{m}"), p.display().to_string());
        }
        map
    }

    /// Canonical text of the resolved config.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.resolved() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Rebuild a RunSpec from a resolved map (used when evaluating a
    /// checkpoint).
    pub fn from_resolved(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut spec = RunSpec::default();
        spec.features.clear();
        spec.graphs.clear();
        spec.reduced.clear();
        for (k, v) in map {
            spec.apply(k, v)?;
        }
        Ok(spec)
    }
}
