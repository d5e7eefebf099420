mod common;

use robust_adapt::adapter::{supcon_loss_packed, AdapterParams, Mode};
use robust_adapt::checkpoint::Checkpoint;
use robust_adapt::dataio::generate_synthetic;
use robust_adapt::sampling::{build_contrastive_batches, SamplingConfig};
use robust_adapt::trainer::{
    hyperparameter_sweep, train, Components, Method, Model, SweepGrid, TrainConfig, TrainReport,
};
use robust_adapt::zeroshot::{pseudolabels, ZeroShotHead};
use robust_adapt::{presets, EmbeddingBundle, Error, Matrix, Rng, ShiftSpec, Split};

fn small_spec() -> ShiftSpec {
    ShiftSpec {
        n_train: 600,
        n_val: 200,
        n_test: 200,
        dim: 16,
        ..presets::s1()
    }
}

fn small_config(seed: u64) -> TrainConfig {
    let mut cfg = presets::desk_train_config(seed);
    cfg.max_epochs = 3;
    cfg.hidden_dim = 8;
    cfg.updates_per_epoch = Some(5);
    cfg.sampling.num_positives = 8;
    cfg.sampling.num_negatives = 8;
    cfg.sampling.num_neighbors = 16;
    cfg
}

fn setup() -> (EmbeddingBundle, ZeroShotHead) {
    let b = generate_synthetic(&small_spec()).unwrap();
    let head = ZeroShotHead::from_bundle(&b, 0.01).unwrap();
    (b, head)
}

#[test]
fn separable_probe_fits_train_set() {
    let mut b = common::random_bundle(9, 120, 4, 2, 1);
    // Push the classes apart along the first coordinate.
    for i in 0..b.n_samples() {
        let v = b.samples.get(i, 0).abs() + 0.5;
        b.samples.set(i, 0, if b.class_labels[i] == 0 { v } else { -v });
    }
    let head = ZeroShotHead::from_bundle(&b, 0.01).unwrap();
    let cfg = TrainConfig {
        method: Method::LinearProbe,
        max_epochs: 50,
        learning_rate: 0.5,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let run = train(&b, &head, &cfg).unwrap();
    let tr = b.split_view(Split::Train);
    let pred = run.model.predict(&head, &b.samples.select_rows(&tr)).unwrap();
    assert!(tr.iter().zip(&pred).all(|(&i, &p)| b.class_labels[i] == p));
}

#[test]
fn identical_seeds_give_identical_reports_and_checkpoints() {
    let (b, head) = setup();
    for method in [Method::LinearProbe, Method::AdapterErm, Method::AdapterContrastive] {
        let cfg = TrainConfig { method, ..small_config(4) };
        let x = train(&b, &head, &cfg).unwrap();
        let y = train(&b, &head, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&x.report).unwrap(),
            serde_json::to_string(&y.report).unwrap()
        );
        assert_eq!(x.model.to_checkpoint().encode(), y.model.to_checkpoint().encode());
    }
}

#[test]
fn report_and_checkpoint_round_trip() {
    let (b, head) = setup();
    let run = train(&b, &head, &small_config(1)).unwrap();
    let json = serde_json::to_string(&run.report).unwrap();
    let back: TrainReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, run.report);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    run.model.to_checkpoint().save(&path).unwrap();
    let model = Model::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(model, run.model);
    let test = b.split_view(Split::Test);
    let x = b.samples.select_rows(&test);
    assert_eq!(model.predict(&head, &x).unwrap(), run.model.predict(&head, &x).unwrap());
}

#[test]
fn epoch_budget_is_respected() {
    let (b, head) = setup();
    let one = train(&b, &head, &TrainConfig { max_epochs: 1, ..small_config(0) }).unwrap();
    assert_eq!(one.report.epochs.len(), 1);
    assert_eq!(one.report.best_epoch, 1);
    let zero = train(&b, &head, &TrainConfig { max_epochs: 0, ..small_config(0) });
    assert!(matches!(zero, Err(Error::Config(_))));
}

#[test]
fn test_metrics_come_from_best_validation_epoch() {
    let (b, head) = setup();
    let run = train(&b, &head, &TrainConfig { max_epochs: 6, ..small_config(2) }).unwrap();
    let best = run
        .report
        .epochs
        .iter()
        .fold(None::<&robust_adapt::trainer::EpochRecord>, |acc, e| match acc {
            Some(a) if a.val.worst_group_accuracy >= e.val.worst_group_accuracy => Some(a),
            _ => Some(e),
        })
        .unwrap();
    assert_eq!(run.report.best_epoch, best.epoch);
    assert_eq!(run.report.best_val_worst_group_accuracy, best.val.worst_group_accuracy);
}

#[test]
fn perfect_zero_shot_falls_back_to_erm() {
    let mut b = common::random_bundle(0, 80, 4, 2, 2);
    for i in 0..b.n_samples() {
        let row = b.class_embeds.row(b.class_labels[i]).to_vec();
        b.samples.row_mut(i).copy_from_slice(&row);
    }
    let head = ZeroShotHead::from_bundle(&b, 0.01).unwrap();
    let run = train(&b, &head, &small_config(0)).unwrap();
    assert!(run.report.fallback.is_some());
    assert_eq!(run.report.n_anchors, Some(0));
}

#[test]
fn empty_validation_split_is_rejected() {
    let (mut b, head) = setup();
    for s in b.splits.iter_mut() {
        if *s == Split::Val {
            *s = Split::Train;
        }
    }
    let err = train(&b, &head, &small_config(0)).unwrap_err();
    assert!(matches!(err, Error::TooFewSamples(_)), "{err}");
}

#[test]
fn one_point_grid_equals_direct_training() {
    let (b, head) = setup();
    let cfg = small_config(3);
    let grid = SweepGrid {
        learning_rates: vec![cfg.learning_rate],
        weight_decays: vec![cfg.weight_decay],
    };
    let sweep = hyperparameter_sweep(&b, &head, &cfg, &grid, 1).unwrap();
    let direct = train(&b, &head, &cfg).unwrap();
    assert_eq!(sweep.best.report, direct.report);
    assert_eq!(sweep.cells.len(), 1);
}

#[test]
fn diverging_cell_is_recorded_and_skipped() {
    let (b, head) = setup();
    let cfg = TrainConfig {
        method: Method::LinearProbe,
        ..small_config(0)
    };
    let grid = SweepGrid {
        learning_rates: vec![1e30, 0.1],
        weight_decays: vec![0.0],
    };
    let sweep = hyperparameter_sweep(&b, &head, &cfg, &grid, 2).unwrap();
    assert!(sweep.cells[0].error.is_some(), "{:?}", sweep.cells[0]);
    assert_eq!(sweep.best_cell, 1);
}

#[test]
fn selection_is_argmax_of_table_and_independent_of_jobs() {
    let (b, head) = setup();
    let cfg = TrainConfig {
        method: Method::AdapterErm,
        ..small_config(5)
    };
    let grid = SweepGrid {
        learning_rates: vec![1e-2, 1e-3],
        weight_decays: vec![5e-5, 5e-4],
    };
    let serial = hyperparameter_sweep(&b, &head, &cfg, &grid, 1).unwrap();
    let parallel = hyperparameter_sweep(&b, &head, &cfg, &grid, 3).unwrap();
    assert_eq!(serial.cells, parallel.cells);
    assert_eq!(serial.best_cell, parallel.best_cell);
    let mut want = 0;
    for (k, c) in serial.cells.iter().enumerate() {
        if c.val_worst_group_accuracy > serial.cells[want].val_worst_group_accuracy {
            want = k;
        }
    }
    assert_eq!(serial.best_cell, want);
}

#[test]
fn first_epoch_lowers_contrastive_loss_on_its_batches() {
    let b = generate_synthetic(&presets::s1()).unwrap();
    let head = ZeroShotHead::from_bundle(&b, 0.01).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        learning_rate: 1e-4,
        updates_per_epoch: None,
        components: Components::ContrastiveOnly,
        ..presets::desk_train_config(0)
    };
    let run = train(&b, &head, &cfg).unwrap();
    let Model::Adapter(trained) = &run.model else { panic!("expected an adapter") };

    let tr = b.split_view(Split::Train);
    let pseudo = pseudolabels(&b, &head, &tr, cfg.pseudo_source, cfg.seed).unwrap();
    let sampling = SamplingConfig {
        seed: Rng::derive(cfg.seed, cfg.sampling.seed).next_u64(),
        ..cfg.sampling.clone()
    };
    let batches = build_contrastive_batches(&b, &tr, &pseudo, &sampling).unwrap();
    let initial = AdapterParams::init(b.dim(), cfg.hidden_dim, cfg.batchnorm, &mut Rng::derive(cfg.seed, 1));
    let mean_loss = |p: &AdapterParams| {
        let mut total = 0.0;
        for batch in &batches {
            let mut idx = vec![batch.anchor];
            idx.extend(&batch.positives);
            idx.extend(&batch.negatives);
            let x: Matrix = b.samples.select_rows(&idx);
            let out = supcon_loss_packed(p, &x, batch.positives.len(), batch.negatives.len(), &cfg.loss_config(), Mode::Train)
                .unwrap();
            total += out.loss;
        }
        total / batches.len() as f64
    };
    let (before, after) = (mean_loss(&initial), mean_loss(trained));
    assert!(after < before, "{after} !< {before}");
}
