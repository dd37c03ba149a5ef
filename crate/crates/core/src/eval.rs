//! Metrics, discretization state histograms, and model checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{argmax, Batch, Classifier, ModelSpec};
use crate::params::ParamEntry;
use crate::text::{Example, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Positive-class (index 1) F1 for two classes, macro-F1 otherwise.
    pub f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Fraction of each class's examples predicted correctly.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(Error::invalid(format!(
                "class index out of range for {n_classes} classes"
            )));
        }
        confusion[y][p] += 1;
    }
    let total = labels.len() as f64;
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut per_class_f1 = Vec::with_capacity(n_classes);
    let mut per_class_accuracy = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class_f1.push(f1);
        per_class_accuracy.push(recall);
    }
    let f1 = if n_classes == 2 {
        per_class_f1[1]
    } else {
        per_class_f1.iter().sum::<f64>() / n_classes as f64
    };
    Ok(MetricsReport {
        accuracy: correct as f64 / total,
        f1,
        per_class_f1,
        per_class_accuracy,
        confusion,
    })
}

/// Per node, how many words fall in each argmax state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateHistogram {
    pub k: usize,
    pub counts: Vec<Vec<u64>>,
    /// Per node, whether every word landed in the same state.
    pub degenerate: Vec<bool>,
}

impl StateHistogram {
    fn empty(n_nodes: usize, k: usize) -> Self {
        StateHistogram {
            k,
            counts: vec![vec![0; k]; n_nodes],
            degenerate: vec![false; n_nodes],
        }
    }

    fn finish(mut self) -> Self {
        self.degenerate = self
            .counts
            .iter()
            .map(|c| c.iter().filter(|&&n| n > 0).count() <= 1)
            .collect();
        self
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate.iter().all(|&d| d)
    }

    /// Counts of one node scaled to sum to one (all zeros if it saw no words).
    pub fn distribution(&self, node: usize) -> Vec<f64> {
        let total: u64 = self.counts[node].iter().sum();
        self.counts[node]
            .iter()
            .map(|&c| {
                if total == 0 {
                    0.0
                } else {
                    c as f64 / total as f64
                }
            })
            .collect()
    }

    /// `node,state,count` rows with 1-based node numbers.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,state,count\n");
        for (n, row) in self.counts.iter().enumerate() {
            for (s, c) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{s},{c}", n + 1);
            }
        }
        out
    }
}

/// One histogram per example.
pub fn document_histograms(
    model: &Classifier,
    examples: &[Example],
    batch_size: usize,
) -> Result<Vec<StateHistogram>> {
    let spec = model.spec();
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::from_examples(chunk)?;
        let probs = model.forward_batch(&batch, crate::model::EVAL_LOSSES)?;
        let mut hists: Vec<StateHistogram> = (0..chunk.len())
            .map(|_| StateHistogram::empty(spec.n_nodes, spec.k))
            .collect();
        for (node, p) in probs.node_state_probs.iter().enumerate() {
            let rows = p.data();
            for &r in &batch.word_rows {
                let state = argmax(&rows[r * spec.k..(r + 1) * spec.k]);
                hists[r / batch.length].counts[node][state] += 1;
            }
        }
        out.extend(hists.into_iter().map(StateHistogram::finish));
    }
    Ok(out)
}

/// Pooled histogram over all examples.
pub fn state_histogram(
    model: &Classifier,
    examples: &[Example],
    batch_size: usize,
) -> Result<StateHistogram> {
    let spec = model.spec();
    let mut total = StateHistogram::empty(spec.n_nodes, spec.k);
    for h in document_histograms(model, examples, batch_size)? {
        for (acc, row) in total.counts.iter_mut().zip(&h.counts) {
            acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    Ok(total.finish())
}

/// Mean of per-document state distributions at `node`, per class.
pub fn class_mean_distributions(
    model: &Classifier,
    examples: &[Example],
    node: usize,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let spec = model.spec();
    if node >= spec.n_nodes {
        return Err(Error::invalid(format!("node {node} out of range")));
    }
    let hists = document_histograms(model, examples, batch_size)?;
    let mut sums = vec![vec![0.0; spec.k]; spec.n_classes];
    let mut counts = vec![0usize; spec.n_classes];
    for (h, ex) in hists.iter().zip(examples) {
        if h.counts[node].iter().sum::<u64>() == 0 {
            continue;
        }
        counts[ex.label] += 1;
        sums[ex.label]
            .iter_mut()
            .zip(h.distribution(node))
            .for_each(|(s, d)| *s += d);
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Ok(sums)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// A trained model with everything needed to run it on raw text.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: ModelSpec,
    pub params: Vec<ParamEntry>,
    pub vocab: Vocabulary,
    pub label_names: Vec<String>,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn new(
        model: &Classifier,
        vocab: &Vocabulary,
        label_names: &[String],
        config: &TrainConfig,
    ) -> Self {
        Checkpoint {
            version: Self::VERSION,
            spec: model.spec().clone(),
            params: model.store.entries().to_vec(),
            vocab: vocab.clone(),
            label_names: label_names.to_vec(),
            config: config.clone(),
        }
    }

    pub fn model(&self) -> Result<Classifier> {
        let mut model = Classifier::new(&self.spec, 0)?;
        model.store.load(&self.params)?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != Self::VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct() {
        let m = compute_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn binary_hand_count() {
        // TP=2 FP=1 FN=1 TN=6 with class 1 positive.
        let labels = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        let preds = [1, 1, 0, 1, 0, 0, 0, 0, 0, 0];
        let m = compute_metrics(&preds, &labels, 2).unwrap();
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.accuracy - 0.8).abs() < 1e-12);
        assert_eq!(m.confusion, vec![vec![6, 1], vec![1, 2]]);
    }

    #[test]
    fn constant_predictions_on_balanced_data() {
        let labels = [0, 1, 0, 1];
        let m = compute_metrics(&[0; 4], &labels, 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.f1, 0.0);
        assert!((m.per_class_f1[0] - 2.0 / 3.0).abs() < 1e-12);
        let macro3 = compute_metrics(&[0; 4], &[0, 1, 0, 1], 3).unwrap();
        assert!((macro3.f1 - (2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_inputs_fail() {
        assert!(compute_metrics(&[], &[], 2).is_err());
        assert!(compute_metrics(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn csv_layout() {
        let h = StateHistogram {
            k: 2,
            counts: vec![vec![3, 0]],
            degenerate: vec![true],
        };
        assert_eq!(h.to_csv(), "node,state,count\n1,0,3\n1,1,0\n");
        assert!((total_variation(&[1.0, 0.0], &[0.5, 0.5]) - 0.5).abs() < 1e-15);
    }
}
