//! Alternating search of weights and architecture logits, retraining of a
//! derived architecture from scratch, and the multi-seed selection protocol.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dag::DerivedArchitecture;
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, MetricsReport};
use crate::model::{Batch, Classifier, LossSettings, ModelSpec};
use crate::ops::OpKind;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamGroup;
use crate::rng;
use crate::text::{build_vocab, split, Dataset, Example, SplitSpec, Splits, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Everything except the architecture logits, on a training batch.
    Weights,
    /// Only the architecture logits, on a validation batch.
    Architecture,
    /// All parameters of a frozen architecture.
    Retrain,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Weights => "weights",
            Phase::Architecture => "architecture",
            Phase::Retrain => "retrain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    #[serde(rename = "J_C")]
    pub j_c: f64,
    #[serde(rename = "J_D")]
    pub j_d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub j: f64,
    pub j_c: f64,
    pub j_d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRun {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub candidates: Vec<OpKind>,
    /// Final logits per edge, in edge order.
    pub alpha: Vec<Vec<f64>>,
    pub architecture: DerivedArchitecture,
    pub best_val_acc: f64,
    /// Ids of every example the run read, sorted.
    pub consumed: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RetrainRun {
    pub seed: u64,
    pub model: Classifier,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub consumed: Vec<usize>,
}

pub fn adam_config(config: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: config.lr,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps,
    }
}

fn is_weight(g: ParamGroup) -> bool {
    g != ParamGroup::Alpha
}

fn is_alpha(g: ParamGroup) -> bool {
    g == ParamGroup::Alpha
}

/// One optimizer step on the groups accepted by `groups`. Fails before touching
/// any parameter if the loss is not finite.
pub fn train_step(
    model: &mut Classifier,
    adam: &mut Adam,
    batch: &Batch,
    losses: LossSettings,
    groups: impl Fn(ParamGroup) -> bool + Copy,
    at: (usize, usize, Phase),
) -> Result<StepRecord> {
    let mut graph = model.graph(batch, losses, groups)?;
    let out = graph.output();
    let (epoch, step, phase) = at;
    if !(out.j.is_finite() && out.j_c.is_finite() && out.j_d.is_finite()) {
        return Err(Error::NonFinite {
            epoch,
            step,
            phase: phase.name(),
            j: out.j,
            j_c: out.j_c,
            j_d: out.j_d,
        });
    }
    graph.tape.backward(graph.j)?;
    adam.step(&mut model.store, &graph.tape, &graph.bindings, groups)?;
    Ok(StepRecord {
        epoch,
        step,
        phase,
        j: out.j,
        j_c: out.j_c,
        j_d: out.j_d,
    })
}

/// Phase (a): every group but the architecture logits, minimizing `J`.
pub fn weight_step(
    model: &mut Classifier,
    adam: &mut Adam,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<StepRecord> {
    train_step(
        model,
        adam,
        batch,
        LossSettings::from_config(config),
        is_weight,
        (0, 0, Phase::Weights),
    )
}

/// Phase (b): only the architecture logits.
pub fn alpha_step(
    model: &mut Classifier,
    adam: &mut Adam,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<StepRecord> {
    train_step(
        model,
        adam,
        batch,
        val_losses(config),
        is_alpha,
        (0, 0, Phase::Architecture),
    )
}

fn val_losses(config: &TrainConfig) -> LossSettings {
    let mut l = LossSettings::from_config(config);
    l.discretization &= config.discretization_on_val;
    l
}

/// Mean loss and accuracy over `examples`.
pub fn evaluate(
    model: &Classifier,
    examples: &[Example],
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let losses = LossSettings::from_config(config);
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in examples.chunks(config.batch_size) {
        let batch = Batch::from_examples(chunk)?;
        let out = model.forward_batch(&batch, losses)?;
        loss += out.j * chunk.len() as f64;
        let c = model.spec().n_classes;
        for (p, ex) in out.class_probs.data().chunks(c).zip(chunk) {
            correct += usize::from(crate::model::argmax(p) == ex.label);
        }
    }
    let n = examples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn epoch_record(epoch: usize, steps: &[StepRecord], val: (f64, f64)) -> EpochRecord {
    let train: Vec<_> = steps
        .iter()
        .filter(|s| s.epoch == epoch && s.phase != Phase::Architecture)
        .collect();
    EpochRecord {
        epoch,
        train_loss: mean(train.iter().map(|s| s.j)),
        val_loss: val.0,
        val_acc: val.1,
        j_c: mean(train.iter().map(|s| s.j_c)),
        j_d: mean(train.iter().map(|s| s.j_d)),
    }
}

fn shuffled_batches<'a>(
    examples: &'a [Example],
    size: usize,
    rng: &mut impl rand::Rng,
) -> Vec<Vec<&'a Example>> {
    let mut order: Vec<&Example> = examples.iter().collect();
    order.shuffle(rng);
    order.chunks(size).map(<[&Example]>::to_vec).collect()
}

fn check_inputs(train: &[Example], val: &[Example], config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(
            "search needs nonempty training and validation splits",
        ));
    }
    Ok(())
}

/// Alternates a weight step on each training batch with an architecture step on
/// the next validation batch, cycling through validation as needed.
pub fn search(
    train: &[Example],
    val: &[Example],
    vocab_size: usize,
    n_classes: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<SearchRun> {
    check_inputs(train, val, config)?;
    let mut model = Classifier::new(&ModelSpec::search(vocab_size, n_classes, config), seed)?;
    let mut w_adam = Adam::new(adam_config(config), &model.store);
    let mut a_adam = Adam::new(adam_config(config), &model.store);
    let mut order_rng = rng::stream(seed, 0x0b5);
    let val_batch = config.batch_size.min(val.len());
    let mut val_cursor = 0;

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut step = 0;
    for epoch in 1..=config.search_epochs {
        for chunk in shuffled_batches(train, config.batch_size, &mut order_rng) {
            let batch = Batch::new(&chunk)?;
            let losses = LossSettings::from_config(config);
            steps.push(train_step(
                &mut model,
                &mut w_adam,
                &batch,
                losses,
                is_weight,
                (epoch, step, Phase::Weights),
            )?);

            let vb: Vec<&Example> = (0..val_batch)
                .map(|i| &val[(val_cursor + i) % val.len()])
                .collect();
            val_cursor = (val_cursor + val_batch) % val.len();
            let batch = Batch::new(&vb)?;
            steps.push(train_step(
                &mut model,
                &mut a_adam,
                &batch,
                val_losses(config),
                is_alpha,
                (epoch, step, Phase::Architecture),
            )?);
            step += 1;
        }
        let rec = epoch_record(epoch, &steps, evaluate(&model, val, config)?);
        log::info!(
            "search seed {seed} epoch {epoch}: train {:.4} val {:.4} acc {:.3}",
            rec.train_loss,
            rec.val_loss,
            rec.val_acc
        );
        best_val_acc = best_val_acc.max(rec.val_acc);
        epochs.push(rec);
    }
    if epochs.is_empty() {
        best_val_acc = evaluate(&model, val, config)?.1;
    }
    let dag = model.search_dag().expect("search model");
    let consumed: BTreeSet<usize> = train.iter().chain(val).map(|e| e.id).collect();
    Ok(SearchRun {
        seed,
        epochs,
        steps,
        candidates: dag.candidates().to_vec(),
        alpha: dag.alphas(&model.store),
        architecture: dag.derive(&model.store),
        best_val_acc,
        consumed: consumed.into_iter().collect(),
    })
}

/// Trains `arch` from freshly initialized parameters, updating every group.
/// `val` only feeds the epoch logs.
pub fn retrain(
    arch: &DerivedArchitecture,
    train: &[Example],
    val: &[Example],
    vocab_size: usize,
    n_classes: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<RetrainRun> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("retraining needs a nonempty training split"));
    }
    let mut model = Classifier::from_architecture(arch, vocab_size, n_classes, config, seed)?;
    let mut adam = Adam::new(adam_config(config), &model.store);
    let mut order_rng = rng::stream(seed, 0x0b5);
    let losses = LossSettings::from_config(config);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 1..=config.retrain_epochs {
        for chunk in shuffled_batches(train, config.batch_size, &mut order_rng) {
            let batch = Batch::new(&chunk)?;
            steps.push(train_step(
                &mut model,
                &mut adam,
                &batch,
                losses,
                |_| true,
                (epoch, step, Phase::Retrain),
            )?);
            step += 1;
        }
        let v = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            evaluate(&model, val, config)?
        };
        let rec = epoch_record(epoch, &steps, v);
        log::info!(
            "retrain seed {seed} epoch {epoch}: train {:.4} val acc {:.3}",
            rec.train_loss,
            rec.val_acc
        );
        epochs.push(rec);
    }
    let consumed: BTreeSet<usize> = train.iter().chain(val).map(|e| e.id).collect();
    Ok(RetrainRun {
        seed,
        model,
        epochs,
        steps,
        consumed: consumed.into_iter().collect(),
    })
}

/// A dataset split, a vocabulary built from the training portion, and the encoded splits.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub splits: Splits,
    pub vocab: Vocabulary,
    pub label_names: Vec<String>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn prepare(dataset: &Dataset, config: &TrainConfig) -> Result<Prepared> {
    if dataset.n_classes() < 2 {
        return Err(Error::invalid("dataset needs at least two labels"));
    }
    let spec = SplitSpec::new(config.train_fraction, config.val_fraction, config.seed);
    let splits = split(&dataset.labels, &spec)?;
    let vocab = build_vocab(
        splits.train.iter().map(|&i| dataset.texts[i].as_str()),
        config.min_freq,
    )?;
    Ok(Prepared {
        train: dataset.encode_indices(&splits.train, &vocab, config.l_max),
        val: dataset.encode_indices(&splits.val, &vocab, config.l_max),
        test: dataset.encode_indices(&splits.test, &vocab, config.l_max),
        label_names: dataset.label_names.clone(),
        vocab,
        splits,
    })
}

/// Which dataset indices each protocol stage read.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolAudit {
    pub test: Vec<usize>,
    pub search_inputs: Vec<usize>,
    pub selection_inputs: Vec<usize>,
    pub retrain_inputs: Vec<usize>,
}

impl ProtocolAudit {
    /// True when no test index reached search, selection or retraining.
    pub fn test_is_isolated(&self) -> bool {
        let test: BTreeSet<_> = self.test.iter().collect();
        self.search_inputs
            .iter()
            .chain(&self.selection_inputs)
            .chain(&self.retrain_inputs)
            .all(|i| !test.contains(i))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub seed: u64,
    pub best_val_acc: f64,
    pub architecture: DerivedArchitecture,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub seed: u64,
    pub metrics: MetricsReport,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub searches: Vec<SearchSummary>,
    pub selected_seed: u64,
    pub architecture: DerivedArchitecture,
    pub repeats: Vec<RepeatResult>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub audit: ProtocolAudit,
}

/// Sample standard deviation; zero for fewer than two values.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs.iter().copied());
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, var.sqrt())
}

/// Best run by validation accuracy; the earliest run wins ties.
pub fn select(runs: &[SearchRun]) -> Result<&SearchRun> {
    let mut best: Option<&SearchRun> = None;
    for r in runs {
        if best.is_none_or(|b| r.best_val_acc > b.best_val_acc) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::invalid("no search runs to select from"))
}

/// Searches with `n_seeds` seeds, keeps the best architecture by validation
/// accuracy, then retrains it from scratch `n_repeats` times and scores each
/// retrained model on the test split.
pub fn select_and_retrain(dataset: &Dataset, config: &TrainConfig) -> Result<ProtocolReport> {
    config.validate()?;
    let data = prepare(dataset, config)?;
    let (vocab_size, n_classes) = (data.vocab.len(), data.label_names.len());

    let runs: Vec<SearchRun> = (0..config.n_seeds as u64)
        .into_par_iter()
        .map(|i| {
            search(
                &data.train,
                &data.val,
                vocab_size,
                n_classes,
                config,
                config.seed + i,
            )
        })
        .collect::<Result<_>>()?;
    let chosen = select(&runs)?;
    log::info!(
        "selected seed {} at validation accuracy {:.3}",
        chosen.seed,
        chosen.best_val_acc
    );
    let arch = chosen.architecture.clone();

    let retrains: Vec<(RetrainRun, MetricsReport)> = (0..config.n_repeats as u64)
        .into_par_iter()
        .map(|r| {
            let run = retrain(
                &arch,
                &data.train,
                &data.val,
                vocab_size,
                n_classes,
                config,
                config.seed + 1000 + r,
            )?;
            let preds = run.model.predict(&data.test, config.batch_size)?;
            let labels: Vec<usize> = data.test.iter().map(|e| e.label).collect();
            let metrics = compute_metrics(&preds, &labels, n_classes)?;
            Ok((run, metrics))
        })
        .collect::<Result<_>>()?;

    let accs: Vec<f64> = retrains.iter().map(|(_, m)| m.accuracy).collect();
    let f1s: Vec<f64> = retrains.iter().map(|(_, m)| m.f1).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let (mean_f1, std_f1) = mean_std(&f1s);

    let union = |sets: &mut dyn Iterator<Item = &Vec<usize>>| -> Vec<usize> {
        sets.flatten()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    };
    let audit = ProtocolAudit {
        test: data.splits.test.clone(),
        search_inputs: union(&mut runs.iter().map(|r| &r.consumed)),
        selection_inputs: data.splits.val.clone(),
        retrain_inputs: union(&mut retrains.iter().map(|(r, _)| &r.consumed)),
    };
    Ok(ProtocolReport {
        searches: runs
            .iter()
            .map(|r| SearchSummary {
                seed: r.seed,
                best_val_acc: r.best_val_acc,
                architecture: r.architecture.clone(),
                epochs: r.epochs.clone(),
            })
            .collect(),
        selected_seed: chosen.seed,
        architecture: arch,
        repeats: retrains
            .into_iter()
            .map(|(run, metrics)| RepeatResult {
                seed: run.seed,
                metrics,
                epochs: run.epochs,
            })
            .collect(),
        mean_accuracy,
        std_accuracy,
        mean_f1,
        std_f1,
        audit,
    })
}

/// One JSON object per line.
pub fn epoch_log(epochs: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for e in epochs {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}
