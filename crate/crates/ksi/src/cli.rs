//! Command-line surface: preprocess -> build-graph -> train -> evaluate.
//!
//! Exit codes: 0 success, 2 usage/validation, 3 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::checkpoint::{self, CheckpointManifest};
use crate::config::RunSpec;
use crate::data::{FeatureMatrix, InteractionTable, Split};
use crate::error::{KsiError, Result};
use crate::eval::{self, EvalSplit};
use crate::graph::{self, GraphBuildOptions, SparseGraph};
use crate::io;
use crate::manifest::{self, RunManifest};
use crate::model::Parameters;
use crate::seed;
use crate::ssi;
use crate::train::{self, TrainHooks};

#[derive(Parser)]
#[command(
    name = "ksi",
    version,
    about = "Multimodal recommender training and evaluation"
)]
struct Cli {
    /// Worker threads (0 = all cores). Output is identical for any value.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reduce raw modality features to the model dimension with PCA.
    Preprocess(PreprocessArgs),
    /// Build a normalized k-NN item graph from modality features.
    BuildGraph(BuildGraphArgs),
    /// Train from a config file.
    Train(TrainArgs),
    /// Rank and score a checkpoint on the test split.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Raw feature tensor (f32 KSIT file).
    #[arg(long)]
    features: PathBuf,
    /// Target dimension.
    #[arg(long)]
    dim: usize,
    /// Output tensor path; sidecar files are derived from it.
    #[arg(long)]
    out: PathBuf,
    /// Modality tag recorded in the sidecar.
    #[arg(long, default_value = "m")]
    modality: String,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[arg(long)]
    features: PathBuf,
    /// Neighbours kept per row.
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    /// Rows per similarity block.
    #[arg(long, default_value_t = 1024)]
    block: usize,
    /// Drop the diagonal before top-k selection.
    #[arg(long)]
    exclude_self_loop: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Override single keys, e.g. --set use_ssi=false (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory written by `ksi train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Interactions file with split labels (or unsplit; then the split
    /// config stored in the checkpoint is replayed).
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, default_value = "10,20")]
    k: String,
    /// Where to write the machine-readable metrics
    /// (default: <checkpoint>/metrics.txt).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point used by the binary; parses real process arguments.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Parse and execute; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/usage; version/help requests exit 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot build thread pool: {e}");
            return 3;
        }
    };
    let result = pool.install(|| dispatch(cli.command));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::BuildGraph(args) => cmd_build_graph(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(KsiError::Validation(format!(
            "input file not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    require_file(&args.features)?;
    let features = FeatureMatrix::load(&args.features, args.modality.clone())?;
    let reduced = ssi::pca_reduce(&features, args.dim)?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| KsiError::io(parent.display().to_string(), e))?;
        }
    }
    io::write_tensor_f64(&args.out, &reduced.reduced)?;
    let basis_path = sibling(&args.out, "basis.kst");
    let mean_path = sibling(&args.out, "mean.kst");
    io::write_tensor_f64(&basis_path, &reduced.basis)?;
    let mean2d = reduced
        .mean
        .clone()
        .into_shape_with_order((1, reduced.mean.len()))
        .expect("1 x d_m reshape");
    io::write_tensor_f64(&mean_path, &mean2d)?;

    let sidecar = serde_json::json!({
        "modality": reduced.modality,
        "input": args.features.display().to_string(),
        "input_sha256": manifest::sha256_file(&args.features)?,
        "rows": features.n_items(),
        "input_dim": features.dim(),
        "output_dim": args.dim,
        "basis": basis_path.display().to_string(),
        "mean": mean_path.display().to_string(),
        "explained_variance_ratio": reduced.explained_variance_ratio,
        "tool_version": manifest::tool_version(),
    });
    let meta_path = sibling(&args.out, "meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&sidecar).unwrap())
        .map_err(|e| KsiError::io(meta_path.display().to_string(), e))?;

    let captured: f64 = reduced.explained_variance_ratio.iter().sum();
    println!(
        "reduced {} x {} -> {} dims; explained variance {:.4}",
        features.n_items(),
        features.dim(),
        args.dim,
        captured
    );
    for (i, r) in reduced.explained_variance_ratio.iter().take(8).enumerate() {
        println!("  component {:>2}: {:.5}", i, r);
    }
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".to_string());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn cmd_build_graph(args: BuildGraphArgs) -> Result<()> {
    require_file(&args.features)?;
    let modality = args
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    let features = FeatureMatrix::load(&args.features, modality)?;
    let opts = GraphBuildOptions {
        block_size: args.block,
        exclude_self_loop: args.exclude_self_loop,
    };
    let g = graph::build_modality_graph(&features, args.k, &opts)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| KsiError::io(parent.display().to_string(), e))?;
        }
    }
    g.write(&args.out)?;
    let max_nnz = (0..g.n()).map(|i| g.row_nnz(i)).max().unwrap_or(0);
    println!(
        "graph: {} nodes, {} edges, max row nnz {} (k = {})",
        g.n(),
        g.nnz(),
        max_nnz,
        args.k
    );
    Ok(())
}

fn parse_set(expr: &str) -> Result<(String, String)> {
    let (k, v) = expr.split_once('=').ok_or_else(|| {
        KsiError::Config(format!("--set expects KEY=VALUE, got {expr:?}"))
    })?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Load interactions and apply the configured split when the file carries no
/// split labels.
fn load_table(spec: &RunSpec) -> Result<InteractionTable> {
    require_file(&spec.interactions)?;
    let table = InteractionTable::load(&spec.interactions, '\t')?;
    if table.n_records_in(Split::Valid) == 0 && table.n_records_in(Split::Test) == 0 {
        log::info!(
            "no split labels in {}; splitting {:?} with seed {}",
            spec.interactions.display(),
            spec.split_ratios,
            spec.train.seed
        );
        let mut rng = seed::rng_for(spec.train.seed, "data-split");
        table.split_dataset(spec.split_ratios, &mut rng)
    } else {
        Ok(table)
    }
}

fn load_graphs(spec: &RunSpec, n_items: usize) -> Result<Vec<SparseGraph>> {
    let mut graphs = Vec::new();
    for m in &spec.modalities {
        let path = spec.graphs.get(m).ok_or_else(|| {
            KsiError::Config(format!("graph.{m} missing from the configuration"))
        })?;
        require_file(path)?;
        let g = SparseGraph::read(path, m.clone())?;
        if g.n() != n_items {
            return Err(KsiError::Shape(format!(
                "graph {} has {} nodes but the dataset has {n_items} items",
                path.display(),
                g.n()
            )));
        }
        graphs.push(g);
    }
    Ok(graphs)
}

fn load_reduced(spec: &RunSpec, n_items: usize) -> Result<Vec<Array2<f64>>> {
    let mut out = Vec::new();
    for m in &spec.modalities {
        let path = spec.reduced.get(m).ok_or_else(|| {
            KsiError::Config(format!("reduced.{m} missing from the configuration"))
        })?;
        require_file(path)?;
        let r = io::read_tensor_f64(path)?;
        if r.nrows() != n_items {
            return Err(KsiError::Shape(format!(
                "reduced features {} have {} rows but the dataset has {n_items} items",
                path.display(),
                r.nrows()
            )));
        }
        out.push(r);
    }
    Ok(out)
}

fn input_hashes(spec: &RunSpec) -> Result<BTreeMap<String, String>> {
    let mut hashes = BTreeMap::new();
    let mut add = |p: &Path| -> Result<()> {
        if p.is_file() {
            hashes.insert(p.display().to_string(), manifest::sha256_file(p)?);
        }
        Ok(())
    };
    add(&spec.interactions)?;
    for p in spec.graphs.values() {
        add(p)?;
    }
    for p in spec.reduced.values() {
        add(p)?;
    }
    Ok(hashes)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    require_file(&args.config)?;
    let mut spec = RunSpec::from_file(&args.config)?;
    for set in &args.sets {
        let (k, v) = parse_set(set)?;
        spec.apply(&k, &v)?;
    }
    spec.validate_for_train()?;

    // The config's threads key narrows the pool for this run; results are
    // identical for any value.
    if spec.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.threads)
            .build()
            .map_err(|e| KsiError::Runtime(format!("cannot build thread pool: {e}")))?;
        return pool.install(|| run_train(spec));
    }
    run_train(spec)
}

fn run_train(spec: RunSpec) -> Result<()> {
    let table = load_table(&spec)?;
    let needs_graphs = spec.train.enhancement_active() && spec.train.effective_layers() > 0;
    let graphs = if needs_graphs {
        load_graphs(&spec, table.n_items())?
    } else {
        Vec::new()
    };
    let reduced_owned = if spec.train.use_ssi {
        load_reduced(&spec, table.n_items())?
    } else {
        Vec::new()
    };
    let reduced: Vec<&Array2<f64>> = reduced_owned.iter().collect();

    std::fs::create_dir_all(&spec.out_dir)
        .map_err(|e| KsiError::io(spec.out_dir.display().to_string(), e))?;
    write_id_maps(&spec.out_dir, &table)?;
    let resolved = spec.resolved();
    let config_sha = manifest::sha256_hex(spec.resolved_text().as_bytes());
    let mut run_manifest = RunManifest {
        tool_version: manifest::tool_version(),
        seed: spec.train.seed,
        resolved_config: resolved.clone(),
        config_sha256: config_sha.clone(),
        input_hashes: input_hashes(&spec)?,
        started_at: manifest::now_rfc3339(),
        finished_at: None,
    };
    run_manifest.write(&spec.out_dir.join("manifest.json"))?;

    let report_path = spec.out_dir.join("report.jsonl");
    let mut report_file = std::fs::File::create(&report_path)
        .map_err(|e| KsiError::io(report_path.display().to_string(), e))?;
    let mut last_good: Option<Parameters> = None;
    let mut hooks = TrainHooks {
        eval_every: spec.eval_every,
        eval_ks: spec.eval_ks.clone(),
        select_k: *spec.eval_ks.iter().max().unwrap_or(&20),
        report_sink: Some(&mut report_file),
        last_good: Some(&mut last_good),
    };

    let outcome = train::train_run(&spec.train, &table, &graphs, reduced, &mut hooks);

    let ckpt_manifest = |epoch: usize, history: Vec<BTreeMap<String, f64>>| CheckpointManifest {
        format: "ksi-checkpoint".to_string(),
        version: 1,
        epoch,
        seed: spec.train.seed,
        d: spec.train.d,
        n_users: table.n_users(),
        n_items: table.n_items(),
        modalities: spec.modalities.clone(),
        config_sha256: config_sha.clone(),
        resolved_config: resolved.clone(),
        metric_history: history,
        created_at: manifest::now_rfc3339(),
    };

    match outcome {
        Ok(outcome) => {
            let history: Vec<BTreeMap<String, f64>> = outcome
                .reports
                .iter()
                .filter_map(|r| r.valid.clone())
                .collect();
            checkpoint::write(
                &spec.out_dir.join("final"),
                &outcome.final_params,
                &ckpt_manifest(outcome.reports.len(), history.clone()),
            )?;
            if let Some((epoch, recall, params)) = &outcome.best {
                checkpoint::write(
                    &spec.out_dir.join("best"),
                    params,
                    &ckpt_manifest(*epoch, history),
                )?;
                println!(
                    "best validation recall@{} = {:.4} at epoch {}",
                    hooks.select_k, recall, epoch
                );
            }
            run_manifest.finished_at = Some(manifest::now_rfc3339());
            run_manifest.write(&spec.out_dir.join("manifest.json"))?;
            println!(
                "trained {} epochs; outputs in {}",
                outcome.reports.len(),
                spec.out_dir.display()
            );
            Ok(())
        }
        Err(e) => {
            // Persist the last finite parameters for post-mortems.
            if let Some(params) = last_good {
                let _ = checkpoint::write(
                    &spec.out_dir.join("last_good"),
                    &params,
                    &ckpt_manifest(0, Vec::new()),
                );
                eprintln!(
                    "training aborted; last good checkpoint written to {}",
                    spec.out_dir.join("last_good").display()
                );
            }
            Err(e)
        }
    }
}

/// Dense index -> raw id maps, so run outputs can be reported in the
/// dataset's own ids.
fn write_id_maps(dir: &Path, table: &InteractionTable) -> Result<()> {
    let mut users = String::new();
    for u in 0..table.n_users() as u32 {
        users.push_str(&format!("{u}\t{}\n", table.user_label(u)));
    }
    let mut items = String::new();
    for i in 0..table.n_items() as u32 {
        items.push_str(&format!("{i}\t{}\n", table.item_label(i)));
    }
    let upath = dir.join("user_ids.tsv");
    std::fs::write(&upath, users).map_err(|e| KsiError::io(upath.display().to_string(), e))?;
    let ipath = dir.join("item_ids.tsv");
    std::fs::write(&ipath, items).map_err(|e| KsiError::io(ipath.display().to_string(), e))?;
    Ok(())
}

fn parse_k_list(expr: &str) -> Result<Vec<usize>> {
    let ks: Result<Vec<usize>> = expr
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| KsiError::Config(format!("bad cutoff {p:?}")))
        })
        .collect();
    let ks = ks?;
    if ks.is_empty() || ks.iter().any(|k| *k == 0) {
        return Err(KsiError::Config("cutoffs must be >= 1".to_string()));
    }
    Ok(ks)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let ks = parse_k_list(&args.k)?;
    require_file(&args.data)?;
    let (params, ckpt) = checkpoint::read(&args.checkpoint)?;
    let mut spec = RunSpec::from_resolved(&ckpt.resolved_config)?;
    spec.interactions = args.data.clone();

    let table = load_table(&spec)?;
    if table.n_items() != ckpt.n_items || table.n_users() != ckpt.n_users {
        return Err(KsiError::Validation(format!(
            "checkpoint was trained on {} users / {} items but the dataset has {} / {}",
            ckpt.n_users,
            ckpt.n_items,
            table.n_users(),
            table.n_items()
        )));
    }
    if params.d() != spec.train.d {
        return Err(KsiError::Validation(format!(
            "checkpoint dimension {} differs from config d = {}",
            params.d(),
            spec.train.d
        )));
    }

    let needs_graphs = spec.train.enhancement_active() && spec.train.effective_layers() > 0;
    let graphs = if needs_graphs {
        load_graphs(&spec, table.n_items())?
    } else {
        Vec::new()
    };
    // Scoring never needs the reduced features; the retrieval loss is a
    // training-time objective.
    let mut eval_cfg = spec.train.clone();
    eval_cfg.use_ssi = false;
    if !eval_cfg.use_sei && spec.train.use_ssi {
        // Keep the enhancement path that training used.
        eval_cfg.use_sei = true;
        eval_cfg.layers = 0;
    }
    let model = train::StepModel::new(&eval_cfg, &table, &graphs, Vec::new())?;
    let (user_emb, item_emb) = model.forward_embeddings(&params)?;
    let result = eval::evaluate_embeddings(&user_emb, &item_emb, &table, &ks, EvalSplit::Test)?;

    println!(
        "evaluated {} of {} users (masking train+valid items)",
        result.n_users_evaluated, result.n_users_total
    );
    println!("{:>6} {:>10} {:>12} {:>10}", "K", "Recall", "Precision", "NDCG");
    for (i, k) in result.ks.iter().enumerate() {
        println!(
            "{:>6} {:>10.4} {:>12.4} {:>10.4}",
            k, result.recall[i], result.precision[i], result.ndcg[i]
        );
    }

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.join("metrics.txt"));
    let mut text = String::new();
    for (i, k) in result.ks.iter().enumerate() {
        text.push_str(&format!("recall@{k} = {}\n", result.recall[i]));
        text.push_str(&format!("precision@{k} = {}\n", result.precision[i]));
        text.push_str(&format!("ndcg@{k} = {}\n", result.ndcg[i]));
    }
    text.push_str(&format!("n_users_evaluated = {}\n", result.n_users_evaluated));
    text.push_str(&format!("n_users_total = {}\n", result.n_users_total));
    std::fs::write(&out, text).map_err(|e| KsiError::io(out.display().to_string(), e))?;
    println!("metrics written to {}", out.display());
    Ok(())
}
