//! Finite-difference validation of the backward pass.

use crate::error::Result;
use crate::tensor::Tensor;

use super::{Gradients, Graph, NodeId};

/// Default step for central differences.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares analytic gradients against central finite differences for a
/// scalar-valued computation, using step `h`.
///
/// `build` receives a fresh graph plus one parameter node per entry of
/// `inputs` (bound under the given names, in order) and must return the
/// scalar loss node. The result is the worst relative error
/// `|analytic - numeric| / max(1, |analytic|)` over every coordinate of
/// every input.
pub fn grad_check(
    inputs: &[(&str, Tensor)],
    h: f64,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
) -> Result<f64> {
    let eval = |tensors: &[Tensor]| -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .zip(tensors)
            .map(|((name, _), t)| g.param(name, t.clone()))
            .collect();
        let loss = build(&mut g, &ids)?;
        let value = g.value(loss).item()?;
        let grads = g.backward(loss)?;
        Ok((value, grads))
    };

    if !(h.is_finite() && h > 0.0) {
        return Err(crate::error::Error::param(format!("step must be positive and finite, got {h}")));
    }
    let base: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (_, grads) = eval(&base)?;

    let mut worst = 0.0f64;
    for (i, (name, tensor)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(name)
            .expect("backward returns a gradient for every parameter leaf");
        for j in 0..tensor.numel() {
            let probe = |delta: f64| -> Result<f64> {
                let mut data = tensor.data().to_vec();
                data[j] += delta;
                let mut tensors = base.clone();
                tensors[i] = Tensor::new(tensor.shape(), data)?;
                Ok(eval(&tensors)?.0)
            };
            let plus = probe(h)?;
            let minus = probe(-h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
