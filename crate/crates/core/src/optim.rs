//! Adam with bias correction and a per-parameter step count.

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// One update of `param` from `grad`.
pub fn adam_step(
    config: &AdamConfig,
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: vec![param.len()],
            right: vec![grad.len()],
        });
    }
    if state.m.is_empty() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    state.t += 1;
    let c1 = 1.0 - config.beta1.powi(state.t as i32);
    let c2 = 1.0 - config.beta2.powi(state.t as i32);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

/// Adam over a whole [`ParamStore`], one state per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            states: vec![AdamState::default(); store.len()],
        }
    }

    /// Steps every parameter whose group passes `update`, reading gradients off `tape`.
    /// Parameters without a recorded gradient are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        tape: &Tape,
        bindings: &Bindings,
        update: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !update(store.entry(id).group) {
                continue;
            }
            let Some(grad) = tape.grad(bindings.var(id)) else {
                continue;
            };
            let param: &mut Tensor = store.get_mut(id);
            adam_step(
                &self.config,
                param.data_mut(),
                grad,
                &mut self.states[id.index()],
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.5, -1.0];
        let mut s = AdamState::default();
        adam_step(&AdamConfig::default(), &mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        for g in [3.0, -0.02] {
            let mut p = vec![1.0];
            let mut s = AdamState::default();
            adam_step(&cfg, &mut p, &[g], &mut s).unwrap();
            // m_hat = g, v_hat = g^2 after bias correction.
            let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
            assert!(((1.0 - p[0]).abs() - cfg.lr).abs() < 1e-8);
        }
    }

    #[test]
    fn identical_runs_match() {
        let run = || {
            let mut p = vec![0.1, 0.2, 0.3];
            let mut s = AdamState::default();
            for i in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x + i as f64 * 1e-3).collect();
                adam_step(&AdamConfig::default(), &mut p, &g, &mut s).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn length_mismatch_errors() {
        let mut s = AdamState::default();
        assert!(adam_step(&AdamConfig::default(), &mut [0.0], &[1.0, 2.0], &mut s).is_err());
    }
}
