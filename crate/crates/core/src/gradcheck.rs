//! Central finite differences for checking tape gradients.
//!
//! The helpers only ever evaluate the function being checked, never its
//! gradient path, so they are an independent reference for [`crate::Tape::backward`].

use crate::autograd::{Tape, Tensor, Var};
use crate::error::Result;
use crate::model::{Batch, Classifier, LossSettings};

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, falling back to the absolute error when both
/// vectors are numerically zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Worst relative error between tape gradients and central differences of the
/// scalar built by `build`, over every input.
pub fn tape_gradient_error(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map_or_else(|| vec![0.0; input.len()], <[f64]>::to_vec);
        let numeric = central_difference(
            |x| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        if j == i {
                            t.constant(
                                Tensor::new(v.shape().to_vec(), x.to_vec()).expect("same shape"),
                            )
                        } else {
                            t.constant(v.clone())
                        }
                    })
                    .collect();
                let r = build(&mut t, &vs).expect("build succeeded once");
                t.value(r).item().expect("scalar")
            },
            input.data(),
            h,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Per named parameter, the relative error between the tape gradient of `J`
/// and central differences of `J` with the parameter perturbed in the store.
pub fn model_gradient_errors(
    model: &Classifier,
    batch: &Batch,
    losses: LossSettings,
    h: f64,
) -> Result<Vec<(String, f64)>> {
    let mut graph = model.graph(batch, losses, |_| true)?;
    graph.tape.backward(graph.j)?;
    let mut probe = model.clone();
    let mut out = Vec::new();
    for id in model.store.ids() {
        let analytic = graph
            .tape
            .grad(graph.bindings.var(id))
            .expect("all groups trainable")
            .to_vec();
        let base = model.store.get(id).data().to_vec();
        let numeric = central_difference(
            |x| {
                probe.store.get_mut(id).data_mut().copy_from_slice(x);
                probe
                    .forward_batch(batch, losses)
                    .expect("forward succeeded once")
                    .j
            },
            &base,
            h,
        );
        probe.store.get_mut(id).data_mut().copy_from_slice(&base);
        out.push((
            model.store.entry(id).name.clone(),
            relative_error(&analytic, &numeric),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let g = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_scales() {
        assert!(relative_error(&[1.0, 0.0], &[1.0, 0.0]) == 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-12);
        assert!(relative_error(&[0.0], &[1e-12]) < 1e-11);
    }
}
