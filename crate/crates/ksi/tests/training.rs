//! Training-loop behavior: variant toggles, subsampled auxiliary terms, and
//! reporting invariants.

use ndarray::Array2;
use rand::Rng;

use ksi::data::{BprSampler, FeatureMatrix, InteractionTable, Split};
use ksi::graph::{build_modality_graph, GraphBuildOptions};
use ksi::seed::rng_for;
use ksi::ssi::{pca_reduce, NegativePool};
use ksi::synthetic::{grouped_dataset, SyntheticSpec};
use ksi::train::{init_parameters, train_run, StepModel, TrainConfig, TrainHooks};

fn small_dataset() -> (InteractionTable, Vec<FeatureMatrix>) {
    let spec = SyntheticSpec {
        n_users: 40,
        n_items: 40,
        items_per_user: 10,
        modality_dims: vec![12, 9],
        seed: 5,
        ..SyntheticSpec::default()
    };
    let (table, features) = grouped_dataset(&spec).unwrap();
    let mut rng = rng_for(5, "data-split");
    let table = table.split_dataset((0.8, 0.1, 0.1), &mut rng).unwrap();
    (table, features)
}

fn build_inputs(
    features: &[FeatureMatrix],
    k: usize,
    d: usize,
) -> (Vec<ksi::graph::SparseGraph>, Vec<Array2<f64>>) {
    let graphs = features
        .iter()
        .map(|f| build_modality_graph(f, k, &GraphBuildOptions::default()).unwrap())
        .collect();
    let reduced = features
        .iter()
        .map(|f| pca_reduce(f, d).unwrap().reduced)
        .collect();
    (graphs, reduced)
}

#[test]
fn disabling_ssi_is_loss_exact_against_alpha_zero() {
    let (table, features) = small_dataset();
    let (graphs, reduced) = build_inputs(&features, 4, 8);

    let base = TrainConfig {
        d: 8,
        k: 4,
        epochs: 3,
        batch_size: 64,
        seed: 17,
        ..TrainConfig::default()
    };
    let alpha_zero = TrainConfig {
        alpha: 0.0,
        ..base.clone()
    };
    let ssi_off = TrainConfig {
        use_ssi: false,
        ..base.clone()
    };

    let run_a = train_run(
        &alpha_zero,
        &table,
        &graphs,
        reduced.iter().collect(),
        &mut TrainHooks::default(),
    )
    .unwrap();
    let run_b = train_run(
        &ssi_off,
        &table,
        &graphs,
        reduced.iter().collect(),
        &mut TrainHooks::default(),
    )
    .unwrap();

    for (a, b) in run_a.reports.iter().zip(run_b.reports.iter()) {
        assert_eq!(a.loss_bpr, b.loss_bpr, "epoch {}", a.epoch);
        assert_eq!(a.loss_rr_item, b.loss_rr_item);
        // The disabled run reports an exact zero, not a multiplied-out term.
        assert_eq!(b.loss_ssi, 0.0);
    }
    for (x, y) in run_a
        .final_params
        .item_emb
        .iter()
        .zip(run_b.final_params.item_emb.iter())
    {
        assert_eq!(x, y);
    }
}

#[test]
fn disabling_sei_drops_rr_terms_exactly() {
    let (table, features) = small_dataset();
    let (graphs, reduced) = build_inputs(&features, 4, 8);
    let cfg = TrainConfig {
        d: 8,
        k: 4,
        epochs: 2,
        batch_size: 64,
        seed: 23,
        use_sei: false,
        ..TrainConfig::default()
    };
    let outcome = train_run(
        &cfg,
        &table,
        &graphs,
        reduced.iter().collect(),
        &mut TrainHooks::default(),
    )
    .unwrap();
    for r in &outcome.reports {
        assert_eq!(r.loss_rr_item, 0.0);
        assert_eq!(r.loss_rr_user, 0.0);
        assert!(r.loss_ssi > 0.0);
        assert!((r.loss_total - (r.loss_bpr + cfg.alpha * r.loss_ssi)).abs() < 1e-9);
    }
}

#[test]
fn report_total_matches_weighted_composition() {
    let (table, features) = small_dataset();
    let (graphs, reduced) = build_inputs(&features, 4, 8);
    let cfg = TrainConfig {
        d: 8,
        k: 4,
        epochs: 3,
        batch_size: 64,
        seed: 29,
        alpha: 0.07,
        beta: 0.9,
        ..TrainConfig::default()
    };
    let outcome = train_run(
        &cfg,
        &table,
        &graphs,
        reduced.iter().collect(),
        &mut TrainHooks::default(),
    )
    .unwrap();
    for r in &outcome.reports {
        let composed =
            r.loss_bpr + cfg.alpha * r.loss_ssi + cfg.beta * (r.loss_rr_user + r.loss_rr_item);
        assert!((r.loss_total - composed).abs() < 1e-9);
        assert!(r.valid.is_some(), "validation metrics recorded every epoch");
    }
    assert!(outcome.best.is_some());
}

#[test]
fn zero_epochs_is_a_no_op_run() {
    let (table, features) = small_dataset();
    let (graphs, reduced) = build_inputs(&features, 4, 8);
    let cfg = TrainConfig {
        d: 8,
        k: 4,
        epochs: 0,
        seed: 31,
        ..TrainConfig::default()
    };
    let outcome = train_run(
        &cfg,
        &table,
        &graphs,
        reduced.iter().collect(),
        &mut TrainHooks::default(),
    )
    .unwrap();
    assert!(outcome.reports.is_empty());
    let init = init_parameters(table.n_users(), table.n_items(), cfg.d, 2, cfg.seed);
    assert_eq!(outcome.final_params, init);
}

#[test]
fn full_subsample_matches_exact_auxiliary_terms() {
    // rr_ssi_subsample = n_items must reproduce the untruncated objective.
    let (table, features) = small_dataset();
    let (graphs, reduced) = build_inputs(&features, 4, 8);
    let cfg = TrainConfig {
        d: 8,
        k: 4,
        seed: 37,
        ..TrainConfig::default()
    };
    let model = StepModel::new(&cfg, &table, &graphs, reduced.iter().collect()).unwrap();
    let params = init_parameters(table.n_users(), table.n_items(), cfg.d, 2, cfg.seed);
    let mut sampler = BprSampler::new(&table, rng_for(cfg.seed, "bpr-sampler")).unwrap();
    let batch = sampler.sample(32);
    let mut pool_rng = rng_for(cfg.seed, "ssi-pool");
    let pool = NegativePool::sample(table.n_items(), 2, 2, &mut pool_rng).unwrap();

    let exact = model.objective(&params, &batch, Some(&pool), None).unwrap();
    let all_items: Vec<u32> = (0..table.n_items() as u32).collect();
    let sub = model
        .objective(&params, &batch, Some(&pool), Some(&all_items))
        .unwrap();
    assert!((exact.ssi - sub.ssi).abs() < 1e-10);
    assert!((exact.rr_item - sub.rr_item).abs() < 1e-10);
    assert_eq!(exact.bpr, sub.bpr);
}

#[test]
fn subsampled_gradients_match_finite_differences() {
    // The gather/scatter gradient path for subsampled auxiliary terms.
    let (table, features) = small_dataset();
    let (graphs, reduced) = build_inputs(&features, 4, 8);
    let cfg = TrainConfig {
        d: 8,
        k: 4,
        seed: 41,
        alpha: 0.4,
        beta: 0.8,
        tau: 0.3,
        ..TrainConfig::default()
    };
    let model = StepModel::new(&cfg, &table, &graphs, reduced.iter().collect()).unwrap();
    let params = init_parameters(table.n_users(), table.n_items(), cfg.d, 2, cfg.seed);
    let mut sampler = BprSampler::new(&table, rng_for(cfg.seed, "bpr-sampler")).unwrap();
    let batch = sampler.sample(16);
    let mut pool_rng = rng_for(cfg.seed, "ssi-pool");
    let pool = NegativePool::sample(table.n_items(), 2, 2, &mut pool_rng).unwrap();
    let subset: Vec<u32> = vec![0, 3, 5, 6, 10, 11, 17, 20];

    let (_, grads) = model
        .objective_with_grads(&params, &batch, Some(&pool), Some(&subset))
        .unwrap();
    let loss_at = |p: &ksi::model::Parameters| {
        model
            .objective(p, &batch, Some(&pool), Some(&subset))
            .unwrap()
            .total(cfg.alpha, cfg.beta)
    };
    let h = 1e-5;
    let mut rng = rng_for(43, "fd-probe");
    for _ in 0..40 {
        let r = rng.gen_range(0..table.n_items());
        let c = rng.gen_range(0..cfg.d);
        let mut p = params.clone();
        p.item_emb[[r, c]] += h;
        let up = loss_at(&p);
        p.item_emb[[r, c]] -= 2.0 * h;
        let down = loss_at(&p);
        let fd = (up - down) / (2.0 * h);
        let g = grads.item_emb[[r, c]];
        let denom = g.abs().max(fd.abs()).max(1e-6);
        assert!(
            ((g - fd) / denom).abs() < 1e-4,
            "item_emb[{r},{c}]: analytic {g} vs fd {fd}"
        );
    }
}

#[test]
fn gradients_match_fd_across_the_variant_grid() {
    // Finite-difference check over configurations not covered by the main
    // acceptance gradient test: single modules, zero propagation depth with
    // structure injection on, and the mean-reduced batch loss.
    let (table, features) = small_dataset();
    let (graphs, reduced) = build_inputs(&features, 4, 8);
    let variants: Vec<TrainConfig> = vec![
        TrainConfig {
            use_ssi: false,
            ..TrainConfig::default()
        },
        TrainConfig {
            use_sei: false,
            ..TrainConfig::default()
        },
        TrainConfig {
            layers: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            bpr_mean: true,
            ..TrainConfig::default()
        },
        TrainConfig {
            backbone: ksi::model::Backbone::Mf,
            layers: 2,
            ..TrainConfig::default()
        },
    ];
    for (vi, mut cfg) in variants.into_iter().enumerate() {
        cfg.d = 8;
        cfg.k = 4;
        cfg.seed = 61 + vi as u64;
        cfg.alpha = 0.4;
        cfg.beta = 0.7;
        cfg.tau = 0.25;
        let model = StepModel::new(&cfg, &table, &graphs, reduced.iter().collect()).unwrap();
        let params = init_parameters(table.n_users(), table.n_items(), cfg.d, 2, cfg.seed);
        let mut sampler = BprSampler::new(&table, rng_for(cfg.seed, "bpr-sampler")).unwrap();
        let batch = sampler.sample(12);
        let mut pool_rng = rng_for(cfg.seed, "ssi-pool");
        let pool = NegativePool::sample(table.n_items(), 2, 3, &mut pool_rng).unwrap();

        let (_, grads) = model
            .objective_with_grads(&params, &batch, Some(&pool), None)
            .unwrap();
        let loss_at = |p: &ksi::model::Parameters| {
            model
                .objective(p, &batch, Some(&pool), None)
                .unwrap()
                .total(cfg.alpha, cfg.beta)
        };
        let h = 1e-5;
        let mut probe_rng = rng_for(100 + vi as u64, "fd-probe");
        let mut check = |analytic: f64, up: f64, down: f64, label: String| {
            let fd = (up - down) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-4,
                "variant {vi} {label}: analytic {analytic} vs fd {fd}"
            );
        };
        for _ in 0..10 {
            let r = probe_rng.gen_range(0..table.n_items());
            let c = probe_rng.gen_range(0..cfg.d);
            let mut p = params.clone();
            p.item_emb[[r, c]] += h;
            let up = loss_at(&p);
            p.item_emb[[r, c]] -= 2.0 * h;
            let down = loss_at(&p);
            check(grads.item_emb[[r, c]], up, down, format!("item[{r},{c}]"));
        }
        for _ in 0..6 {
            let r = probe_rng.gen_range(0..table.n_users());
            let c = probe_rng.gen_range(0..cfg.d);
            let mut p = params.clone();
            p.user_emb[[r, c]] += h;
            let up = loss_at(&p);
            p.user_emb[[r, c]] -= 2.0 * h;
            let down = loss_at(&p);
            check(grads.user_emb[[r, c]], up, down, format!("user[{r},{c}]"));
        }
        for m in 0..2 {
            let mut p = params.clone();
            p.modality_logits[m] += h;
            let up = loss_at(&p);
            p.modality_logits[m] -= 2.0 * h;
            let down = loss_at(&p);
            check(grads.modality_logits[m], up, down, format!("logit[{m}]"));
        }
    }
}

#[test]
fn flags_off_gradients_equal_hand_rolled_mf_bpr() {
    // With both modules off and the MF backbone, the analytic gradients
    // must coincide with the plain pairwise-ranking gradients written out
    // by hand: d/dx_u = g (x_i - x_j), d/dx_i = g x_u, d/dx_j = -g x_u
    // with g = sigma(margin) - 1.
    let (table, _) = small_dataset();
    let cfg = TrainConfig {
        d: 8,
        seed: 53,
        use_sei: false,
        use_ssi: false,
        backbone: ksi::model::Backbone::Mf,
        ..TrainConfig::default()
    };
    let model = StepModel::new(&cfg, &table, &[], Vec::new()).unwrap();
    let params = init_parameters(table.n_users(), table.n_items(), cfg.d, 1, cfg.seed);
    let mut sampler = BprSampler::new(&table, rng_for(cfg.seed, "bpr-sampler")).unwrap();
    let batch = sampler.sample(48);
    let (_, grads) = model.objective_with_grads(&params, &batch, None, None).unwrap();

    let mut du = Array2::<f64>::zeros(params.user_emb.raw_dim());
    let mut di = Array2::<f64>::zeros(params.item_emb.raw_dim());
    for b in 0..batch.len() {
        let (u, i, j) = (
            batch.users[b] as usize,
            batch.pos_items[b] as usize,
            batch.neg_items[b] as usize,
        );
        let mut margin = 0.0;
        for c in 0..cfg.d {
            margin += params.user_emb[[u, c]] * (params.item_emb[[i, c]] - params.item_emb[[j, c]]);
        }
        let g = 1.0 / (1.0 + (-margin).exp()) - 1.0;
        for c in 0..cfg.d {
            du[[u, c]] += g * (params.item_emb[[i, c]] - params.item_emb[[j, c]]);
            di[[i, c]] += g * params.user_emb[[u, c]];
            di[[j, c]] -= g * params.user_emb[[u, c]];
        }
    }
    for (a, b) in grads.user_emb.iter().zip(du.iter()) {
        assert!((a - b).abs() < 1e-12, "user grad {a} vs hand {b}");
    }
    for (a, b) in grads.item_emb.iter().zip(di.iter()) {
        assert!((a - b).abs() < 1e-12, "item grad {a} vs hand {b}");
    }
    for g in grads.modality_logits.iter() {
        assert_eq!(*g, 0.0, "no modality path, no logit gradient");
    }
}

#[test]
fn shifting_modality_logits_leaves_gradients_unchanged() {
    let (table, features) = small_dataset();
    let (graphs, reduced) = build_inputs(&features, 4, 8);
    let cfg = TrainConfig {
        d: 8,
        k: 4,
        seed: 59,
        alpha: 0.3,
        beta: 0.6,
        ..TrainConfig::default()
    };
    let model = StepModel::new(&cfg, &table, &graphs, reduced.iter().collect()).unwrap();
    let mut params = init_parameters(table.n_users(), table.n_items(), cfg.d, 2, cfg.seed);
    params.modality_logits[0] = 0.4;
    params.modality_logits[1] = -0.9;
    let mut sampler = BprSampler::new(&table, rng_for(cfg.seed, "bpr-sampler")).unwrap();
    let batch = sampler.sample(24);
    let mut pool_rng = rng_for(cfg.seed, "ssi-pool");
    let pool = NegativePool::sample(table.n_items(), 2, 2, &mut pool_rng).unwrap();

    let (parts_a, grads_a) = model
        .objective_with_grads(&params, &batch, Some(&pool), None)
        .unwrap();
    let mut shifted = params.clone();
    shifted.modality_logits += 7.5;
    let (parts_b, grads_b) = model
        .objective_with_grads(&shifted, &batch, Some(&pool), None)
        .unwrap();

    assert!((parts_a.total(cfg.alpha, cfg.beta) - parts_b.total(cfg.alpha, cfg.beta)).abs() < 1e-9);
    for (a, b) in grads_a
        .modality_logits
        .iter()
        .zip(grads_b.modality_logits.iter())
    {
        assert!((a - b).abs() < 1e-9, "logit grads differ under shift: {a} vs {b}");
    }
}

#[test]
fn default_config_carries_the_reference_hyperparameters() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.d, 64);
    assert_eq!(cfg.k, 10);
    assert_eq!(cfg.layers, 1);
    assert_eq!(cfg.tau, 0.1);
    assert_eq!(cfg.lr, 5e-4);
    assert_eq!(cfg.batch_size, 1024);
    assert_eq!(cfg.epochs, 50);
    assert_eq!(cfg.beta, 1.0);
    assert!(cfg.use_sei && cfg.use_ssi);
}

#[test]
fn aborts_on_divergence_with_last_good_params() {
    // An absurd learning rate drives the loss to NaN within a few steps;
    // the run must abort with a runtime error and hand back finite params.
    let (table, features) = small_dataset();
    let (graphs, reduced) = build_inputs(&features, 4, 8);
    let cfg = TrainConfig {
        d: 8,
        k: 4,
        epochs: 50,
        batch_size: 64,
        seed: 47,
        lr: 1e200,
        ..TrainConfig::default()
    };
    let mut last_good = None;
    let mut hooks = TrainHooks {
        last_good: Some(&mut last_good),
        ..TrainHooks::default()
    };
    let err = match train_run(&cfg, &table, &graphs, reduced.iter().collect(), &mut hooks) {
        Err(e) => e,
        Ok(_) => panic!("divergent run unexpectedly succeeded"),
    };
    assert_eq!(err.exit_code(), 3, "divergence is a runtime failure: {err}");
    let snapshot = last_good.expect("last good parameters retained");
    snapshot.assert_finite().unwrap();
}

#[test]
fn validation_split_feeds_model_selection() {
    let (table, _) = small_dataset();
    assert!(table.n_records_in(Split::Valid) > 0);
    assert!(table.n_records_in(Split::Test) > 0);
}
