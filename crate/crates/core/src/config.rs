//! Training configuration, its flat `key = value` file format, and ablations.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::discretization::JdComplement;
use crate::error::{Error, Result};
use crate::ops::{OpFamily, OpKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// Per-class binary cross-entropy against one-hot targets, summed over classes.
    BinaryPerClass,
    /// Standard categorical cross-entropy.
    Categorical,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" | "binary-per-class" | "bce" => Ok(LossKind::BinaryPerClass),
            "categorical" | "ce" => Ok(LossKind::Categorical),
            _ => Err(Error::invalid(format!("unknown loss {s:?}"))),
        }
    }
}

impl LossKind {
    fn key(self) -> &'static str {
        match self {
            LossKind::BinaryPerClass => "binary",
            LossKind::Categorical => "categorical",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dim: usize,
    pub n_nodes: usize,
    pub k: usize,
    pub l_max: usize,
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub search_epochs: usize,
    pub retrain_epochs: usize,
    pub seed: u64,
    pub min_freq: usize,
    pub loss: LossKind,
    /// Whether the architecture update on validation batches includes `J_D`.
    pub discretization_on_val: bool,
    /// When false the heads are detached and `J = J_C`.
    pub discretization: bool,
    pub jd_complement: JdComplement,
    pub candidates: Vec<OpKind>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub n_seeds: usize,
    pub n_repeats: usize,
}

impl Default for TrainConfig {
    /// The full-scale experimental setting.
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            dim: 256,
            n_nodes: 5,
            k: 64,
            l_max: 384,
            lambda: 0.5,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            search_epochs: 30,
            retrain_epochs: 50,
            seed: 0,
            min_freq: 2,
            loss: LossKind::BinaryPerClass,
            discretization_on_val: true,
            discretization: true,
            jd_complement: JdComplement::Add,
            candidates: OpKind::ALL.to_vec(),
            train_fraction: 0.8,
            val_fraction: 0.05,
            n_seeds: 10,
            n_repeats: 20,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("expected on/off, got {v:?}"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    /// Sizes small enough to search on one CPU core in minutes.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            dim: 32,
            n_nodes: 3,
            k: 8,
            l_max: 32,
            n_seeds: 3,
            n_repeats: 3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("dim", self.dim),
            ("n_nodes", self.n_nodes),
            ("l_max", self.l_max),
            ("min_freq", self.min_freq),
            ("n_seeds", self.n_seeds),
            ("n_repeats", self.n_repeats),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.k < 2 {
            return Err(Error::invalid("k must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.lr > 0.0 && self.eps > 0.0) {
            return Err(Error::invalid("lr and eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.candidates.is_empty() {
            return Err(Error::invalid("no candidate operations left"));
        }
        Ok(())
    }

    /// Sets one field from its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "dim" => self.dim = parse_num(key, v)?,
            "n_nodes" => self.n_nodes = parse_num(key, v)?,
            "k" | "K" => self.k = parse_num(key, v)?,
            "l_max" => self.l_max = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "eps" => self.eps = parse_num(key, v)?,
            "search_epochs" => self.search_epochs = parse_num(key, v)?,
            "retrain_epochs" => self.retrain_epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "min_freq" => self.min_freq = parse_num(key, v)?,
            "loss" => self.loss = v.parse()?,
            "discretization_on_val" | "discretization-on-val" => {
                self.discretization_on_val = parse_bool(v)?
            }
            "discretization" => self.discretization = parse_bool(v)?,
            "jd_complement" => {
                self.jd_complement = match v.to_ascii_lowercase().as_str() {
                    "add" => JdComplement::Add,
                    "subtract" => JdComplement::Subtract,
                    _ => {
                        return Err(Error::invalid(format!(
                            "jd_complement: expected add or subtract, got {v:?}"
                        )))
                    }
                }
            }
            "candidates" => {
                self.candidates = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?;
                self.candidates.sort();
                self.candidates.dedup();
            }
            "train_fraction" => self.train_fraction = parse_num(key, v)?,
            "val_fraction" => self.val_fraction = parse_num(key, v)?,
            "n_seeds" => self.n_seeds = parse_num(key, v)?,
            "n_repeats" => self.n_repeats = parse_num(key, v)?,
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over `self`. `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str, source: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: lineno + 1,
                    msg: "expected `key = value`".into(),
                });
            };
            self.set(key, value).map_err(|e| Error::Parse {
                path: source.to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Desk defaults overlaid with the file at `path`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = TrainConfig::desk();
        cfg.apply_kv(&std::fs::read_to_string(path)?, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let candidates: Vec<&str> = self.candidates.iter().map(|k| k.name()).collect();
        let onoff = |b: bool| if b { "on" } else { "off" };
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "dim = {}", self.dim);
        let _ = writeln!(out, "n_nodes = {}", self.n_nodes);
        let _ = writeln!(out, "k = {}", self.k);
        let _ = writeln!(out, "l_max = {}", self.l_max);
        let _ = writeln!(out, "lambda = {}", self.lambda);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "beta1 = {}", self.beta1);
        let _ = writeln!(out, "beta2 = {}", self.beta2);
        let _ = writeln!(out, "eps = {}", self.eps);
        let _ = writeln!(out, "search_epochs = {}", self.search_epochs);
        let _ = writeln!(out, "retrain_epochs = {}", self.retrain_epochs);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "min_freq = {}", self.min_freq);
        let _ = writeln!(out, "loss = {}", self.loss.key());
        let _ = writeln!(
            out,
            "discretization_on_val = {}",
            onoff(self.discretization_on_val)
        );
        let _ = writeln!(out, "discretization = {}", onoff(self.discretization));
        let complement = match self.jd_complement {
            JdComplement::Add => "add",
            JdComplement::Subtract => "subtract",
        };
        let _ = writeln!(out, "jd_complement = {complement}");
        let _ = writeln!(out, "candidates = {}", candidates.join(","));
        let _ = writeln!(out, "train_fraction = {}", self.train_fraction);
        let _ = writeln!(out, "val_fraction = {}", self.val_fraction);
        let _ = writeln!(out, "n_seeds = {}", self.n_seeds);
        let _ = writeln!(out, "n_repeats = {}", self.n_repeats);
        out
    }

    /// `J` weight on `J_D` actually used in training.
    pub fn effective_lambda(&self) -> f64 {
        if self.discretization {
            self.lambda
        } else {
            0.0
        }
    }
}

/// What an ablation removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    Family(OpFamily),
    Discretization,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("discretization") {
            return Ok(Ablation::Discretization);
        }
        s.parse::<OpFamily>().map(Ablation::Family).map_err(|_| {
            Error::invalid(format!(
                "cannot ablate {s:?}; expected Conv, DilatedConv, Pooling, None or discretization"
            ))
        })
    }
}

/// Removes an operation family from the candidate set or detaches the heads.
pub fn ablate(config: &TrainConfig, drop: Ablation) -> Result<TrainConfig> {
    let mut out = config.clone();
    match drop {
        Ablation::Family(family) => {
            out.candidates.retain(|k| k.family() != family);
            if out.candidates.is_empty() {
                return Err(Error::invalid(format!(
                    "dropping {} leaves no candidate operations",
                    family.name()
                )));
            }
        }
        Ablation::Discretization => {
            out.lambda = 0.0;
            out.discretization = false;
        }
    }
    Ok(out)
}
