//! Soft categorization of node representations into `K` latent states and the
//! mutual-information objective that trains it.
//!
//! A head maps every position of a node tensor to `L(x) = softmax(x W + b)`.
//! With expectations taken over the rows of a batch, the state marginal is
//! `p(z=k) = E[L_k(x)]` and the objective is
//!
//! ```text
//! J_D = -E[sum_k L_k log L_k]
//!       - sum_k [ (1/K) log E[L_k] - ((K-1)/K) log(1 - E[L_k]) ]
//! ```
//!
//! Every logarithm reads its argument clamped below at [`LOG_EPS`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::rng;

pub const LOG_EPS: f64 = 1e-8;

/// Sign of the `log(1 - E[L_k])` term. `Add` is the objective as stated above;
/// `Subtract` makes the whole marginal part a cross-entropy against the uniform
/// state distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum JdComplement {
    #[default]
    Add,
    Subtract,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscretizationHead {
    pub k: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DiscretizationHead {
    pub fn new(
        dim: usize,
        k: usize,
        name: &str,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!(
                "discretization needs K >= 2, got {k}"
            )));
        }
        let weight = store.add(
            format!("{name}.weight"),
            ParamGroup::Head,
            rng::uniform(rng, &[dim, k], rng::fan_bound(dim, k)),
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamGroup::Head,
            Tensor::zeros(&[k]),
        );
        Ok(DiscretizationHead { k, weight, bias })
    }

    /// State probabilities over the last axis: `(..., dim) -> (..., K)`.
    pub fn categorize(&self, tape: &mut Tape, params: &Bindings, x: Var) -> Result<Var> {
        let logits = tape.affine(x, params.var(self.weight), params.var(self.bias))?;
        let axis = tape.shape(logits).len() - 1;
        tape.softmax(logits, axis)
    }
}

fn rows_and_states(shape: &[usize]) -> Result<(usize, usize)> {
    let Some((&k, lead)) = shape.split_last() else {
        return Err(Error::InvalidShape {
            op: "discretization",
            msg: "probabilities must have a state axis".into(),
        });
    };
    Ok((lead.iter().product(), k))
}

/// Empirical `E_x[sum_k L_k log(L_k / E_x[L_k])]`, the mean KL divergence from
/// each row to the marginal. Rows are every position of `probs` along all but the
/// last axis.
pub fn mi_estimate(probs: &Tensor) -> Result<f64> {
    let stats = DiscretizationBatchStats::from_probs(probs)?;
    let k = stats.mean_state_probs.len();
    let log_marginal: Vec<f64> = stats
        .mean_state_probs
        .iter()
        .map(|p| p.max(LOG_EPS).ln())
        .collect();
    let rows = probs.len() / k;
    let total: f64 = probs
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .zip(&log_marginal)
                .map(|(&l, &lm)| l * (l.max(LOG_EPS).ln() - lm))
                .sum::<f64>()
        })
        .sum();
    Ok(total / rows as f64)
}

/// The discretization objective on the tape, flattening all leading axes into rows.
pub fn j_d(tape: &mut Tape, probs: Var) -> Result<Var> {
    j_d_with(tape, probs, JdComplement::Add)
}

pub fn j_d_with(tape: &mut Tape, probs: Var, complement: JdComplement) -> Result<Var> {
    let (rows, k) = rows_and_states(tape.shape(probs))?;
    let kf = k as f64;
    let flat = tape.reshape(probs, &[rows, k])?;

    let log_l = tape.clamp_min(flat, LOG_EPS);
    let log_l = tape.log(log_l);
    let plogp = tape.mul(flat, log_l)?;
    let neg_entropy = tape.sum_all(plogp);
    let entropy = tape.scalar_mul(neg_entropy, -1.0 / rows as f64);

    let marginal = tape.mean(flat, 0)?;
    let log_m = tape.clamp_min(marginal, LOG_EPS);
    let log_m = tape.log(log_m);
    let log_m = tape.sum_all(log_m);
    let cross = tape.scalar_mul(log_m, -1.0 / kf);

    let one_minus = tape.scalar_mul(marginal, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let log_c = tape.clamp_min(one_minus, LOG_EPS);
    let log_c = tape.log(log_c);
    let log_c = tape.sum_all(log_c);
    let sign = match complement {
        JdComplement::Add => 1.0,
        JdComplement::Subtract => -1.0,
    };
    let complement = tape.scalar_mul(log_c, sign * (kf - 1.0) / kf);

    let partial = tape.add(entropy, cross)?;
    tape.add(partial, complement)
}

pub fn j_d_value(probs: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let j = j_d(&mut tape, p)?;
    Ok(tape.value(j).item().expect("scalar objective"))
}

/// `j_d` at the uniform distribution with `K` states.
pub fn uniform_j_d(k: usize) -> f64 {
    let kf = k as f64;
    2.0 * kf.ln() + (kf - 1.0) * ((kf - 1.0) / kf).ln()
}

/// Mean of the per-node objectives. When `rows` is given, only those rows of
/// each node's flattened `(positions, K)` output enter the expectations.
pub fn aggregate_j_d(
    tape: &mut Tape,
    params: &Bindings,
    heads: &[DiscretizationHead],
    nodes: &[Var],
    rows: Option<&[usize]>,
) -> Result<Var> {
    if heads.len() != nodes.len() || heads.is_empty() {
        return Err(Error::invalid(format!(
            "{} discretization heads for {} nodes",
            heads.len(),
            nodes.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (head, &node) in heads.iter().zip(nodes) {
        let probs = head.categorize(tape, params, node)?;
        let j = node_j_d(tape, probs, rows, JdComplement::Add)?;
        total = Some(match total {
            Some(t) => tape.add(t, j)?,
            None => j,
        });
    }
    Ok(tape.scalar_mul(total.unwrap(), 1.0 / heads.len() as f64))
}

pub(crate) fn node_j_d(
    tape: &mut Tape,
    probs: Var,
    rows: Option<&[usize]>,
    complement: JdComplement,
) -> Result<Var> {
    let (n, k) = rows_and_states(tape.shape(probs))?;
    let flat = tape.reshape(probs, &[n, k])?;
    let selected = match rows {
        Some(r) => tape.gather_rows(flat, r)?,
        None => flat,
    };
    j_d_with(tape, selected, complement)
}

/// Row statistics of a head output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationBatchStats {
    /// Mean over rows of the state probabilities; the estimate of `p(z=k)`.
    pub mean_state_probs: Vec<f64>,
    /// Per leading-axis sample, the mean over its remaining positions.
    pub per_sample_probs: Vec<Vec<f64>>,
}

impl DiscretizationBatchStats {
    pub fn from_probs(probs: &Tensor) -> Result<Self> {
        let (rows, k) = rows_and_states(probs.shape())?;
        let samples = if probs.rank() >= 2 {
            probs.shape()[0]
        } else {
            1
        };
        let per_sample_rows = rows / samples;
        let mut mean = vec![0.0; k];
        let mut per_sample = vec![vec![0.0; k]; samples];
        for (r, row) in probs.data().chunks(k).enumerate() {
            let s = r / per_sample_rows;
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v;
                per_sample[s][j] += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= rows as f64);
        for s in &mut per_sample {
            s.iter_mut().for_each(|v| *v /= per_sample_rows as f64);
        }
        Ok(DiscretizationBatchStats {
            mean_state_probs: mean,
            per_sample_probs: per_sample,
        })
    }
}
