use ddnas_core::config::{ablate, Ablation};
use ddnas_core::model::{Batch, ModelSpec};
use ddnas_core::optim::Adam;
use ddnas_core::params::ParamGroup;
use ddnas_core::synthetic::keyword_corpus;
use ddnas_core::trainer::{self, Phase};
use ddnas_core::{Classifier, Error, OpFamily, TrainConfig};

const GROUPS: [ParamGroup; 6] = [
    ParamGroup::Embedding,
    ParamGroup::Operation,
    ParamGroup::Alpha,
    ParamGroup::Head,
    ParamGroup::Projection,
    ParamGroup::Output,
];

fn small() -> TrainConfig {
    TrainConfig {
        dim: 8,
        n_nodes: 2,
        k: 4,
        l_max: 16,
        batch_size: 16,
        search_epochs: 2,
        retrain_epochs: 2,
        n_seeds: 2,
        n_repeats: 2,
        ..TrainConfig::desk()
    }
}

fn data(cfg: &TrainConfig) -> trainer::Prepared {
    trainer::prepare(&keyword_corpus(160, 3), cfg).unwrap()
}

fn checksums(model: &Classifier) -> Vec<u64> {
    GROUPS.iter().map(|&g| model.store.checksum(g)).collect()
}

#[test]
fn phases_touch_disjoint_groups() {
    let cfg = small();
    let d = data(&cfg);
    let mut model = Classifier::new(&ModelSpec::search(d.vocab.len(), 2, &cfg), 1).unwrap();
    let mut adam = Adam::new(trainer::adam_config(&cfg), &model.store);
    let batch = Batch::from_examples(&d.train[..16]).unwrap();
    let alpha = GROUPS.iter().position(|&g| g == ParamGroup::Alpha).unwrap();

    let before = checksums(&model);
    trainer::weight_step(&mut model, &mut adam, &batch, &cfg).unwrap();
    let after = checksums(&model);
    for (i, g) in GROUPS.iter().enumerate() {
        if i == alpha {
            assert_eq!(before[i], after[i], "weight step moved {g:?}");
        } else {
            assert_ne!(before[i], after[i], "weight step left {g:?}");
        }
    }

    let vb = Batch::from_examples(&d.val).unwrap();
    trainer::alpha_step(&mut model, &mut adam, &vb, &cfg).unwrap();
    let last = checksums(&model);
    for (i, g) in GROUPS.iter().enumerate() {
        if i == alpha {
            assert_ne!(after[i], last[i]);
        } else {
            assert_eq!(after[i], last[i], "alpha step moved {g:?}");
        }
    }
}

#[test]
fn search_is_deterministic() {
    let cfg = small();
    let d = data(&cfg);
    let a = trainer::search(&d.train, &d.val, d.vocab.len(), 2, &cfg, 9).unwrap();
    let b = trainer::search(&d.train, &d.val, d.vocab.len(), 2, &cfg, 9).unwrap();
    assert_eq!(a, b);
    let c = trainer::search(&d.train, &d.val, d.vocab.len(), 2, &cfg, 10).unwrap();
    assert_ne!(a.alpha, c.alpha);
}

#[test]
fn lambda_changes_the_search() {
    let cfg = small();
    let d = data(&cfg);
    let run = |lambda| {
        let cfg = TrainConfig {
            lambda,
            ..cfg.clone()
        };
        trainer::search(&d.train, &d.val, d.vocab.len(), 2, &cfg, 4)
            .unwrap()
            .alpha
    };
    let (a, b) = (run(0.9), run(0.5));
    let diff = a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn step_log_alternates_phases() {
    let cfg = small();
    let d = data(&cfg);
    let run = trainer::search(&d.train, &d.val, d.vocab.len(), 2, &cfg, 2).unwrap();
    let per_epoch = d.train.len().div_ceil(cfg.batch_size);
    assert_eq!(run.steps.len(), 2 * per_epoch * cfg.search_epochs);
    for pair in run.steps.chunks(2) {
        assert_eq!(pair[0].phase, Phase::Weights);
        assert_eq!(pair[1].phase, Phase::Architecture);
        assert_eq!(pair[0].step, pair[1].step);
    }
    assert_eq!(run.epochs.len(), cfg.search_epochs);
    assert_eq!(
        run.best_val_acc,
        run.epochs
            .iter()
            .map(|e| e.val_acc)
            .fold(f64::MIN, f64::max)
    );
}

#[test]
fn many_steps_stay_finite() {
    let cfg = TrainConfig {
        dim: 4,
        n_nodes: 2,
        k: 3,
        l_max: 8,
        batch_size: 4,
        search_epochs: 30,
        lr: 3e-3,
        ..TrainConfig::desk()
    };
    let d = trainer::prepare(&keyword_corpus(90, 5), &cfg).unwrap();
    let run = trainer::search(&d.train, &d.val, d.vocab.len(), 2, &cfg, 0).unwrap();
    assert!(run.steps.len() >= 1000, "{}", run.steps.len());
    assert!(run
        .steps
        .iter()
        .all(|s| s.j.is_finite() && s.j_c.is_finite() && s.j_d.is_finite()));
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let cfg = small();
    let d = data(&cfg);
    let mut model = Classifier::new(&ModelSpec::search(d.vocab.len(), 2, &cfg), 1).unwrap();
    let emb = model.store.find("embedding").unwrap();
    model.store.get_mut(emb).data_mut()[cfg.dim * 3] = f64::NAN;
    let before = checksums(&model);
    let mut adam = Adam::new(trainer::adam_config(&cfg), &model.store);
    let mut ex = d.train[0].clone();
    ex.token_ids[0] = 3;
    let batch = Batch::from_examples(&[ex]).unwrap();
    let err = trainer::weight_step(&mut model, &mut adam, &batch, &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert_eq!(before, checksums(&model));
}

#[test]
fn dropping_discretization_logs_j_as_j_c() {
    let cfg = ablate(&small(), Ablation::Discretization).unwrap();
    let d = data(&cfg);
    let run = trainer::search(&d.train, &d.val, d.vocab.len(), 2, &cfg, 1).unwrap();
    assert!(run.steps.iter().all(|s| s.j == s.j_c));
    let re = trainer::retrain(
        &run.architecture,
        &d.train,
        &d.val,
        d.vocab.len(),
        2,
        &cfg,
        1,
    )
    .unwrap();
    assert!(re.steps.iter().all(|s| s.j == s.j_c));
}

#[test]
fn dropping_pooling_leaves_seven_candidates() {
    let cfg = ablate(&small(), Ablation::Family(OpFamily::Pooling)).unwrap();
    let d = data(&cfg);
    let run = trainer::search(&d.train, &d.val, d.vocab.len(), 2, &cfg, 1).unwrap();
    assert!(run.alpha.iter().all(|a| a.len() == 7));
    assert!(run
        .architecture
        .edges
        .iter()
        .all(|e| e.kind.family() != OpFamily::Pooling));
}

#[test]
fn protocol_isolates_test_and_repeats_exactly() {
    let cfg = small();
    let ds = keyword_corpus(160, 3);
    let report = trainer::select_and_retrain(&ds, &cfg).unwrap();
    assert!(report.audit.test_is_isolated());
    assert_eq!(report.searches.len(), cfg.n_seeds);
    assert_eq!(report.repeats.len(), cfg.n_repeats);
    let best = report
        .searches
        .iter()
        .map(|s| s.best_val_acc)
        .fold(f64::MIN, f64::max);
    let chosen = report
        .searches
        .iter()
        .find(|s| s.seed == report.selected_seed)
        .unwrap();
    assert_eq!(chosen.best_val_acc, best);
    assert_eq!(report, trainer::select_and_retrain(&ds, &cfg).unwrap());
}

#[test]
fn retrain_starts_fresh_for_each_seed() {
    let cfg = small();
    let d = data(&cfg);
    let run = trainer::search(&d.train, &d.val, d.vocab.len(), 2, &cfg, 1).unwrap();
    let a = trainer::retrain(
        &run.architecture,
        &d.train,
        &d.val,
        d.vocab.len(),
        2,
        &cfg,
        5,
    )
    .unwrap();
    let b = trainer::retrain(
        &run.architecture,
        &d.train,
        &d.val,
        d.vocab.len(),
        2,
        &cfg,
        5,
    )
    .unwrap();
    assert_eq!(a.model.store.entries(), b.model.store.entries());
    assert_eq!(a.model.store.group_size(ParamGroup::Alpha), 0);
    assert!(a.consumed.iter().all(|i| !d.splits.test.contains(i)));
}
