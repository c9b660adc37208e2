//! Differentiable computation: tensors, recorded graphs with reverse- and
//! forward-mode derivatives, and the optimizers used by the trainers.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Bindings, Execution, Graph, NodeId, Op};
pub use optim::{clip_global_norm, Adam, AdamConfig, LrSchedule};
pub use params::ParamSet;
pub use tensor::{matmul_t, Tensor};

use std::collections::BTreeMap;

use crate::error::{KklError, Result};
use crate::scalar::Scalar;

fn output_of<S: Scalar>(graph: &Graph<S>) -> Result<NodeId> {
    graph
        .output()
        .ok_or_else(|| KklError::Dimension("graph has no output node".into()))
}

fn leaf_of<S: Scalar>(graph: &Graph<S>, name: &str) -> Result<NodeId> {
    graph
        .leaf_id(name)
        .ok_or_else(|| KklError::UnboundLeaf(name.to_string()))
}

/// Evaluates the graph's output under `bindings`.
pub fn evaluate<S: Scalar>(graph: &Graph<S>, bindings: &Bindings<S>) -> Result<Tensor<S>> {
    let out = output_of(graph)?;
    let exec = graph.forward(&[bindings], &[out])?;
    Ok(exec.value(out).clone())
}

/// Reverse-mode gradient of a scalar output with respect to named leaves.
pub fn gradient<S: Scalar>(
    graph: &Graph<S>,
    bindings: &Bindings<S>,
    wrt: &[&str],
) -> Result<BTreeMap<String, Tensor<S>>> {
    let out = output_of(graph)?;
    let ids = wrt
        .iter()
        .map(|n| leaf_of(graph, n))
        .collect::<Result<Vec<_>>>()?;
    let exec = graph.forward(&[bindings], &[out])?;
    let grads = exec.gradients(out, &ids)?;
    Ok(wrt
        .iter()
        .zip(grads)
        .map(|(n, g)| {
            // Leaves the output does not reach get a zero gradient of their bound shape.
            let g = match bindings.get(*n) {
                Some(b) if g.shape() != b.shape() => Tensor::zeros(b.shape().to_vec()),
                _ => g,
            };
            (n.to_string(), g)
        })
        .collect())
}

const DIRECTION_LEAF: &str = "__jvp_direction";

/// Forward-mode directional derivative of the output with respect to leaf
/// `wrt` along `direction`.
pub fn jvp<S: Scalar>(
    graph: &Graph<S>,
    bindings: &Bindings<S>,
    wrt: &str,
    direction: &Tensor<S>,
) -> Result<Tensor<S>> {
    let seed = leaf_of(graph, wrt)?;
    let bound = bindings
        .get(wrt)
        .ok_or_else(|| KklError::UnboundLeaf(wrt.to_string()))?;
    if bound.shape() != direction.shape() {
        return Err(KklError::ShapeMismatch {
            context: format!("jvp direction for `{wrt}`"),
            expected: bound.shape().to_vec(),
            got: direction.shape().to_vec(),
        });
    }
    let out = output_of(graph)?;
    let mut g = graph.clone();
    let dir = g.leaf(DIRECTION_LEAF);
    let tangent = g.push_jvp(out, &[(seed, dir)])?;
    let mut extra = Bindings::new();
    extra.insert(DIRECTION_LEAF.to_string(), direction.clone());
    let exec = g.forward(&[bindings, &extra], &[tangent])?;
    Ok(exec.value(tangent).clone())
}

/// Gradient of a scalar loss whose graph contains tangent nodes produced by
/// [`Graph::push_jvp`]. Tangent nodes are ordinary primitives, so this is
/// reverse mode applied over forward mode.
pub fn gradient_through_jvp<S: Scalar>(
    graph: &Graph<S>,
    bindings: &Bindings<S>,
    wrt: &[&str],
) -> Result<BTreeMap<String, Tensor<S>>> {
    gradient(graph, bindings, wrt)
}
