//! The macro search space: nodes `x_1..x_n` over an input `x_0`, with one edge
//! per ordered pair `i < j`. During search each edge mixes all candidate
//! operations under a softmax of its architecture logits; derivation keeps the
//! argmax operation per edge.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ops::{OpKind, OpSettings, Operation};
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};

/// Edges in evaluation order: grouped by target node, then by source.
pub fn edge_pairs(n_nodes: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..=n_nodes).flat_map(|to| (0..to).map(move |from| (from, to)))
}

fn edge_index(from: usize, to: usize) -> usize {
    to * (to - 1) / 2 + from
}

#[derive(Clone, Debug)]
pub struct SearchEdge {
    pub from: usize,
    pub to: usize,
    pub alpha: ParamId,
    pub ops: Vec<Operation>,
}

#[derive(Clone, Debug)]
pub struct SearchDag {
    n_nodes: usize,
    candidates: Vec<OpKind>,
    edges: Vec<SearchEdge>,
}

impl SearchDag {
    /// Builds the full DAG with zero logits. `candidates` are sorted into canonical order.
    pub fn new(
        n_nodes: usize,
        dim: usize,
        candidates: &[OpKind],
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::invalid("search DAG needs at least one node"));
        }
        let mut candidates = candidates.to_vec();
        candidates.sort();
        candidates.dedup();
        if candidates.is_empty() {
            return Err(Error::invalid(
                "search DAG needs at least one candidate operation",
            ));
        }
        let edges = edge_pairs(n_nodes)
            .map(|(from, to)| {
                let alpha = store.add(
                    format!("alpha.{from}-{to}"),
                    ParamGroup::Alpha,
                    Tensor::zeros(&[candidates.len()]),
                );
                let ops = candidates
                    .iter()
                    .map(|&k| Operation::init(k, dim, &format!("edge.{from}-{to}.{k}"), store, rng))
                    .collect();
                SearchEdge {
                    from,
                    to,
                    alpha,
                    ops,
                }
            })
            .collect();
        Ok(SearchDag {
            n_nodes,
            candidates,
            edges,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn candidates(&self) -> &[OpKind] {
        &self.candidates
    }

    pub fn edges(&self) -> &[SearchEdge] {
        &self.edges
    }

    pub fn edge(&self, from: usize, to: usize) -> Result<&SearchEdge> {
        if from >= to || to > self.n_nodes {
            return Err(Error::invalid(format!(
                "no edge ({from},{to}) in a {}-node DAG",
                self.n_nodes
            )));
        }
        Ok(&self.edges[edge_index(from, to)])
    }

    /// Softmax-weighted sum of every candidate operation on edge `(from, to)`.
    pub fn mixed_edge(
        &self,
        tape: &mut Tape,
        params: &Bindings,
        edge: (usize, usize),
        x: Var,
    ) -> Result<Var> {
        let e = self.edge(edge.0, edge.1)?;
        let weights = tape.softmax(params.var(e.alpha), 0)?;
        let outs = e
            .ops
            .iter()
            .map(|op| op.apply(tape, params, x))
            .collect::<Result<Vec<_>>>()?;
        tape.weighted_sum(weights, &outs)
    }

    /// Returns `x_1..x_n` with `x_j = relu(sum_{i<j} mixed_edge(i, j, x_i))`.
    pub fn forward(&self, tape: &mut Tape, params: &Bindings, x0: Var) -> Result<Vec<Var>> {
        let mut nodes = vec![x0];
        for to in 1..=self.n_nodes {
            let mut total: Option<Var> = None;
            for (from, &x) in nodes.iter().enumerate() {
                let out = self.mixed_edge(tape, params, (from, to), x)?;
                total = Some(match total {
                    Some(t) => tape.add(t, out)?,
                    None => out,
                });
            }
            nodes.push(tape.relu(total.expect("every node has a predecessor")));
        }
        nodes.remove(0);
        Ok(nodes)
    }

    /// Current logits per edge, in edge order.
    pub fn alphas(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        self.edges
            .iter()
            .map(|e| store.get(e.alpha).data().to_vec())
            .collect()
    }

    /// Keeps the highest-logit operation per edge (lowest canonical index on ties).
    pub fn derive(&self, store: &ParamStore) -> DerivedArchitecture {
        let edges = self
            .edges
            .iter()
            .map(|e| {
                let logits = store.get(e.alpha).data();
                let mut best = 0;
                for (i, &v) in logits.iter().enumerate() {
                    if v > logits[best] {
                        best = i;
                    }
                }
                DerivedEdge::new(e.from, e.to, self.candidates[best])
            })
            .collect();
        DerivedArchitecture {
            n_nodes: self.n_nodes,
            edges,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedEdge {
    pub from: usize,
    pub to: usize,
    pub kind: OpKind,
    pub settings: OpSettings,
    /// Set when the edge carries the zero map and forwards nothing.
    pub absent: bool,
}

impl DerivedEdge {
    pub fn new(from: usize, to: usize, kind: OpKind) -> Self {
        DerivedEdge {
            from,
            to,
            kind,
            settings: kind.settings(),
            absent: kind == OpKind::None,
        }
    }
}

/// One operation per edge, frozen after search.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedArchitecture {
    pub n_nodes: usize,
    pub edges: Vec<DerivedEdge>,
}

impl DerivedArchitecture {
    /// Checks that the edge list is exactly the full DAG in evaluation order with
    /// settings consistent with each kind.
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::invalid("architecture has no nodes"));
        }
        let expected: Vec<_> = edge_pairs(self.n_nodes).collect();
        let found: Vec<_> = self.edges.iter().map(|e| (e.from, e.to)).collect();
        if expected != found {
            return Err(Error::invalid(format!(
                "architecture edges {found:?} do not cover a {}-node DAG",
                self.n_nodes
            )));
        }
        for e in &self.edges {
            if e.settings != e.kind.settings() || e.absent != (e.kind == OpKind::None) {
                return Err(Error::invalid(format!(
                    "edge ({},{}): settings do not match {}",
                    e.from, e.to, e.kind
                )));
            }
        }
        Ok(())
    }

    pub fn present_edges(&self) -> impl Iterator<Item = &DerivedEdge> {
        self.edges.iter().filter(|e| !e.absent)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let arch: DerivedArchitecture = serde_json::from_str(text)?;
        arch.validate()?;
        Ok(arch)
    }

    /// Graphviz rendering listing only the edges that forward information.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph ddnas {\n  rankdir=LR;\n  node [shape=box];\n");
        for i in 0..=self.n_nodes {
            let _ = writeln!(out, "  x{i} [label=\"x{i}\"];");
        }
        for e in self.present_edges() {
            let _ = writeln!(out, "  x{} -> x{} [label=\"{}\"];", e.from, e.to, e.kind);
        }
        out.push_str("}\n");
        out
    }
}

#[derive(Clone, Debug)]
pub struct FixedEdge {
    pub from: usize,
    pub to: usize,
    pub op: Option<Operation>,
}

/// A derived architecture instantiated with its own parameters. No logits exist here.
#[derive(Clone, Debug)]
pub struct FixedDag {
    architecture: DerivedArchitecture,
    edges: Vec<FixedEdge>,
}

impl FixedDag {
    pub fn new(
        architecture: &DerivedArchitecture,
        dim: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        architecture.validate()?;
        let edges = architecture
            .edges
            .iter()
            .map(|e| FixedEdge {
                from: e.from,
                to: e.to,
                op: (!e.absent).then(|| {
                    Operation::init(
                        e.kind,
                        dim,
                        &format!("edge.{}-{}.{}", e.from, e.to, e.kind),
                        store,
                        rng,
                    )
                }),
            })
            .collect();
        Ok(FixedDag {
            architecture: architecture.clone(),
            edges,
        })
    }

    pub fn architecture(&self) -> &DerivedArchitecture {
        &self.architecture
    }

    pub fn n_nodes(&self) -> usize {
        self.architecture.n_nodes
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bindings, x0: Var) -> Result<Vec<Var>> {
        let mut nodes = vec![x0];
        let mut edges = self.edges.iter().peekable();
        for to in 1..=self.n_nodes() {
            let mut total: Option<Var> = None;
            while let Some(e) = edges.next_if(|e| e.to == to) {
                let Some(op) = &e.op else { continue };
                let out = op.apply(tape, params, nodes[e.from])?;
                total = Some(match total {
                    Some(t) => tape.add(t, out)?,
                    None => out,
                });
            }
            let total = match total {
                Some(t) => t,
                None => {
                    let shape = tape.shape(x0).to_vec();
                    tape.constant(Tensor::zeros(&shape))
                }
            };
            nodes.push(tape.relu(total));
        }
        nodes.remove(0);
        Ok(nodes)
    }
}
