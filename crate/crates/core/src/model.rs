//! The end-to-end classifier: embedding lookup, DAG backbone, per-word
//! projection summed over the words of a document, and a softmax output layer.
//! Every DAG node also feeds a discretization head whose objective joins the
//! classification loss.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::config::{LossKind, TrainConfig};
use crate::dag::{DerivedArchitecture, FixedDag, SearchDag};
use crate::discretization::{self, DiscretizationHead, JdComplement, LOG_EPS};
use crate::error::{Error, Result};
use crate::ops::OpKind;
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::rng;
use crate::text::{Example, PAD};

/// Everything needed to rebuild a classifier's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub k: usize,
    pub n_nodes: usize,
    pub candidates: Vec<OpKind>,
    /// Present for a frozen architecture, absent for the search space.
    pub architecture: Option<DerivedArchitecture>,
}

impl ModelSpec {
    pub fn search(vocab_size: usize, n_classes: usize, config: &TrainConfig) -> Self {
        ModelSpec {
            vocab_size,
            n_classes,
            dim: config.dim,
            k: config.k,
            n_nodes: config.n_nodes,
            candidates: config.candidates.clone(),
            architecture: None,
        }
    }

    pub fn fixed(
        arch: &DerivedArchitecture,
        vocab_size: usize,
        n_classes: usize,
        config: &TrainConfig,
    ) -> Self {
        ModelSpec {
            n_nodes: arch.n_nodes,
            architecture: Some(arch.clone()),
            ..ModelSpec::search(vocab_size, n_classes, config)
        }
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Search(SearchDag),
    Fixed(FixedDag),
}

impl Backbone {
    fn forward(&self, tape: &mut Tape, params: &Bindings, x0: Var) -> Result<Vec<Var>> {
        match self {
            Backbone::Search(d) => d.forward(tape, params, x0),
            Backbone::Fixed(d) => d.forward(tape, params, x0),
        }
    }
}

/// Token ids and masks for a batch of equally long examples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub batch: usize,
    pub length: usize,
    pub token_ids: Vec<usize>,
    pub labels: Vec<usize>,
    /// Flattened `batch * length` positions holding real words.
    pub word_rows: Vec<usize>,
}

impl Batch {
    pub fn new(examples: &[&Example]) -> Result<Self> {
        let Some(first) = examples.first() else {
            return Err(Error::invalid("empty batch"));
        };
        let length = first.token_ids.len();
        if length == 0 {
            return Err(Error::invalid("examples have zero length"));
        }
        let mut token_ids = Vec::with_capacity(examples.len() * length);
        let mut word_rows = Vec::new();
        for (b, ex) in examples.iter().enumerate() {
            if ex.token_ids.len() != length {
                return Err(Error::invalid(format!(
                    "example {} has length {}, batch length is {length}",
                    ex.id,
                    ex.token_ids.len()
                )));
            }
            for (t, &id) in ex.token_ids.iter().enumerate() {
                if id != PAD {
                    word_rows.push(b * length + t);
                }
            }
            token_ids.extend_from_slice(&ex.token_ids);
        }
        Ok(Batch {
            batch: examples.len(),
            length,
            token_ids,
            labels: examples.iter().map(|e| e.label).collect(),
            word_rows,
        })
    }

    pub fn from_examples(examples: &[Example]) -> Result<Self> {
        Batch::new(&examples.iter().collect::<Vec<_>>())
    }

    /// `(batch, length, dim)` mask: one at word positions, zero at PAD.
    fn mask(&self, dim: usize) -> Tensor {
        let mut data = vec![0.0; self.token_ids.len() * dim];
        for &r in &self.word_rows {
            data[r * dim..(r + 1) * dim].fill(1.0);
        }
        Tensor::new(vec![self.batch, self.length, dim], data).expect("mask shape")
    }
}

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutput {
    pub class_probs: Tensor,
    /// Per node, `(batch, length, K)` state probabilities.
    pub node_state_probs: Vec<Tensor>,
    pub j_c: f64,
    pub j_d: f64,
    pub j: f64,
}

/// A forward pass still on its tape, ready for `backward`.
pub struct Graph {
    pub tape: Tape,
    pub bindings: Bindings,
    pub class_probs: Var,
    pub node_state_probs: Vec<Var>,
    pub j_c: Var,
    pub j_d: Var,
    pub j: Var,
}

impl Graph {
    pub fn output(&self) -> BatchOutput {
        let scalar = |v: Var| self.tape.value(v).item().expect("scalar loss");
        BatchOutput {
            class_probs: self.tape.value(self.class_probs).clone(),
            node_state_probs: self
                .node_state_probs
                .iter()
                .map(|&v| self.tape.value(v).clone())
                .collect(),
            j_c: scalar(self.j_c),
            j_d: scalar(self.j_d),
            j: scalar(self.j),
        }
    }
}

/// How the losses are combined on a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub lambda: f64,
    pub loss: LossKind,
    /// When false `J = J_C` and the heads receive no gradient.
    pub discretization: bool,
    pub complement: JdComplement,
}

impl LossSettings {
    pub fn from_config(config: &TrainConfig) -> Self {
        LossSettings {
            lambda: config.lambda,
            loss: config.loss,
            discretization: config.discretization,
            complement: config.jd_complement,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub store: ParamStore,
    spec: ModelSpec,
    embedding: ParamId,
    backbone: Backbone,
    heads: Vec<DiscretizationHead>,
    w1: ParamId,
    b1: ParamId,
    wt: ParamId,
    bt: ParamId,
}

impl Classifier {
    /// Fresh parameters for `spec`, all drawn from one stream of `seed`.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.n_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                spec.n_classes
            )));
        }
        if spec.vocab_size == 0 || spec.dim == 0 {
            return Err(Error::invalid("vocabulary size and dim must be positive"));
        }
        let (d, c) = (spec.dim, spec.n_classes);
        let mut rng = rng::stream(seed, 0x3d01);
        let mut store = ParamStore::new();
        let embedding = store.add(
            "embedding",
            ParamGroup::Embedding,
            rng::uniform(&mut rng, &[spec.vocab_size, d], (3.0 / d as f64).sqrt()),
        );
        let backbone = match &spec.architecture {
            None => Backbone::Search(SearchDag::new(
                spec.n_nodes,
                d,
                &spec.candidates,
                &mut store,
                &mut rng,
            )?),
            Some(arch) => {
                if arch.n_nodes != spec.n_nodes {
                    return Err(Error::invalid(
                        "architecture node count disagrees with model spec",
                    ));
                }
                Backbone::Fixed(FixedDag::new(arch, d, &mut store, &mut rng)?)
            }
        };
        let heads = (1..=spec.n_nodes)
            .map(|j| DiscretizationHead::new(d, spec.k, &format!("head.{j}"), &mut store, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let w1 = store.add(
            "w1",
            ParamGroup::Projection,
            rng::uniform(&mut rng, &[d, d], rng::fan_bound(d, d)),
        );
        let b1 = store.add("b1", ParamGroup::Projection, Tensor::zeros(&[d]));
        let wt = store.add(
            "wt",
            ParamGroup::Output,
            rng::uniform(&mut rng, &[d, c], rng::fan_bound(d, c)),
        );
        let bt = store.add("bt", ParamGroup::Output, Tensor::zeros(&[c]));
        Ok(Classifier {
            store,
            spec: spec.clone(),
            embedding,
            backbone,
            heads,
            w1,
            b1,
            wt,
            bt,
        })
    }

    pub fn from_architecture(
        arch: &DerivedArchitecture,
        vocab_size: usize,
        n_classes: usize,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        Classifier::new(&ModelSpec::fixed(arch, vocab_size, n_classes, config), seed)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn heads(&self) -> &[DiscretizationHead] {
        &self.heads
    }

    pub fn search_dag(&self) -> Option<&SearchDag> {
        match &self.backbone {
            Backbone::Search(d) => Some(d),
            Backbone::Fixed(_) => None,
        }
    }

    /// The frozen architecture, or the current argmax derivation during search.
    pub fn architecture(&self) -> DerivedArchitecture {
        match &self.backbone {
            Backbone::Search(d) => d.derive(&self.store),
            Backbone::Fixed(d) => d.architecture().clone(),
        }
    }

    /// Records a forward pass and its losses. Groups rejected by `trainable` enter as constants.
    pub fn graph(
        &self,
        batch: &Batch,
        losses: LossSettings,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<Graph> {
        if !(0.0..=1.0).contains(&losses.lambda) {
            return Err(Error::invalid(format!(
                "lambda must lie in [0, 1], got {}",
                losses.lambda
            )));
        }
        if let Some(&bad) = batch.token_ids.iter().find(|&&t| t >= self.spec.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside the embedding table of {} rows",
                self.spec.vocab_size
            )));
        }
        let d = self.spec.dim;
        let (b, l) = (batch.batch, batch.length);
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, trainable);

        let mask = tape.constant(batch.mask(d));
        let emb = tape.gather_rows(p.var(self.embedding), &batch.token_ids)?;
        let emb = tape.reshape(emb, &[b, l, d])?;
        let x0 = tape.mul(emb, mask)?;

        let nodes = self.backbone.forward(&mut tape, &p, x0)?;
        let last = *nodes.last().expect("at least one node");
        let words = tape.affine(last, p.var(self.w1), p.var(self.b1))?;
        let words = tape.mul(words, mask)?;
        let x_t = tape.sum(words, 1)?;
        let logits = tape.affine(x_t, p.var(self.wt), p.var(self.bt))?;
        let class_probs = tape.softmax(logits, 1)?;

        let mut node_state_probs = Vec::with_capacity(nodes.len());
        let mut node_j = Vec::with_capacity(nodes.len());
        for (head, &node) in self.heads.iter().zip(&nodes) {
            let probs = head.categorize(&mut tape, &p, node)?;
            if !batch.word_rows.is_empty() {
                node_j.push(discretization::node_j_d(
                    &mut tape,
                    probs,
                    Some(&batch.word_rows),
                    losses.complement,
                )?);
            }
            node_state_probs.push(probs);
        }
        let j_d = match node_j.split_first() {
            None => tape.constant(Tensor::scalar(0.0)),
            Some((&first, rest)) => {
                let mut total = first;
                for &v in rest {
                    total = tape.add(total, v)?;
                }
                tape.scalar_mul(total, 1.0 / node_j.len() as f64)
            }
        };

        let j_c = j_c(&mut tape, class_probs, &batch.labels, losses.loss)?;
        let j = if losses.discretization {
            joint_loss(&mut tape, j_c, j_d, losses.lambda)?
        } else {
            j_c
        };
        Ok(Graph {
            tape,
            bindings: p,
            class_probs,
            node_state_probs,
            j_c,
            j_d,
            j,
        })
    }

    pub fn forward_batch(&self, batch: &Batch, losses: LossSettings) -> Result<BatchOutput> {
        Ok(self.graph(batch, losses, |_| false)?.output())
    }

    /// Class probabilities for each example, evaluated in chunks of `batch_size`.
    pub fn class_probs(&self, examples: &[Example], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let c = self.spec.n_classes;
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let batch = Batch::from_examples(chunk)?;
            let probs = self.forward_batch(&batch, EVAL_LOSSES)?.class_probs;
            out.extend(probs.data().chunks(c).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Argmax class per example, lowest index on ties.
    pub fn predict(&self, examples: &[Example], batch_size: usize) -> Result<Vec<usize>> {
        Ok(self
            .class_probs(examples, batch_size)?
            .iter()
            .map(|p| argmax(p))
            .collect())
    }
}

pub(crate) const EVAL_LOSSES: LossSettings = LossSettings {
    lambda: 0.5,
    loss: LossKind::BinaryPerClass,
    discretization: true,
    complement: JdComplement::Add,
};

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Classification loss averaged over the batch. The binary form sums the
/// per-class binary cross-entropy against one-hot targets.
pub fn j_c(tape: &mut Tape, class_probs: Var, labels: &[usize], kind: LossKind) -> Result<Var> {
    let shape = tape.shape(class_probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "j_c",
            left: shape,
            right: vec![labels.len()],
        });
    }
    let (n, c) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let y = tape.constant(Tensor::new(vec![n, c], onehot.clone())?);
    let log_p = tape.clamp_min(class_probs, LOG_EPS);
    let log_p = tape.log(log_p);
    let mut total = tape.mul(y, log_p)?;
    if kind == LossKind::BinaryPerClass {
        let not_y = tape.constant(Tensor::new(
            vec![n, c],
            onehot.iter().map(|v| 1.0 - v).collect(),
        )?);
        let q = tape.scalar_mul(class_probs, -1.0);
        let q = tape.add_scalar(q, 1.0);
        let log_q = tape.clamp_min(q, LOG_EPS);
        let log_q = tape.log(log_q);
        let neg = tape.mul(not_y, log_q)?;
        total = tape.add(total, neg)?;
    }
    let total = tape.sum_all(total);
    Ok(tape.scalar_mul(total, -1.0 / n as f64))
}

/// `lambda * J_D + (1 - lambda) * J_C`.
pub fn joint_loss(tape: &mut Tape, j_c: Var, j_d: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let a = tape.scalar_mul(j_d, lambda);
    let b = tape.scalar_mul(j_c, 1.0 - lambda);
    tape.add(a, b)
}

pub fn joint_loss_value(j_c: f64, j_d: f64, lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (c, d) = (
        tape.constant(Tensor::scalar(j_c)),
        tape.constant(Tensor::scalar(j_d)),
    );
    let j = joint_loss(&mut tape, c, d, lambda)?;
    Ok(tape.value(j).item().expect("scalar"))
}
