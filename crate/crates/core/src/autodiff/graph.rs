use std::collections::{HashMap, HashSet};

use super::tensor::Tensor;
use crate::error::{CastError, Result};

/// Tensors reachable from `root` through recorded operations, inputs before
/// the tensors that consume them.
///
/// Fails if the recorded graph contains a cycle, which construction through
/// the public API cannot produce.
pub fn topo_order(root: &Tensor) -> Result<Vec<Tensor>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    let mut marks: HashMap<u64, Mark> = HashMap::new();
    let mut order = Vec::new();
    // (tensor, next input index to visit)
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    marks.insert(root.id(), Mark::Open);
    while let Some((t, idx)) = stack.pop() {
        let inputs = t.node().map(|n| n.inputs.as_slice()).unwrap_or(&[]);
        if idx < inputs.len() {
            let child = inputs[idx].clone();
            stack.push((t, idx + 1));
            if !child.requires_grad() {
                continue;
            }
            match marks.get(&child.id()) {
                Some(Mark::Open) => {
                    return Err(CastError::InvalidArgument(format!(
                        "cycle through tensor #{} in computation graph",
                        child.id()
                    )))
                }
                Some(Mark::Done) => {}
                None => {
                    marks.insert(child.id(), Mark::Open);
                    stack.push((child, 0));
                }
            }
        } else {
            marks.insert(t.id(), Mark::Done);
            order.push(t);
        }
    }
    Ok(order)
}

/// Reverse-mode gradients of a scalar `output` w.r.t. each of `inputs`.
///
/// With `build_graph` set, the backward pass is itself recorded, so the
/// returned gradients are grad-tracking whenever they depend on tracked
/// values and can be differentiated again.
pub fn grad(output: &Tensor, inputs: &[&Tensor], build_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(CastError::NonScalar(output.shape().to_vec()));
    }
    for t in inputs {
        if !t.requires_grad() {
            return Err(CastError::NotInGraph(t.id()));
        }
    }
    if !output.requires_grad() {
        return Err(CastError::NotInGraph(inputs.first().map_or(0, |t| t.id())));
    }

    let order = topo_order(output)?;
    let wanted: HashSet<u64> = inputs.iter().map(|t| t.id()).collect();

    // A tensor needs a gradient if it is requested or lies above one.
    let mut needed: HashSet<u64> = HashSet::new();
    for t in &order {
        let above = t
            .node()
            .map(|n| n.inputs.iter().any(|i| needed.contains(&i.id())))
            .unwrap_or(false);
        if above || wanted.contains(&t.id()) {
            needed.insert(t.id());
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(output.id(), Tensor::ones(output.shape()));

    for t in order.iter().rev() {
        let Some(node) = t.node() else { continue };
        if !needed.contains(&t.id()) {
            continue;
        }
        let Some(g) = grads.get(&t.id()).cloned() else {
            continue;
        };
        let needs: Vec<bool> = node
            .inputs
            .iter()
            .map(|i| i.requires_grad() && needed.contains(&i.id()))
            .collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let input_grads = if build_graph {
            node.op.backward(&node.inputs, &g, &needs)?
        } else {
            let detached: Vec<Tensor> = node.inputs.iter().map(Tensor::detach).collect();
            node.op.backward(&detached, &g.detach(), &needs)?
        };
        for ((input, ig), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
            let (true, Some(ig)) = (*need, ig) else { continue };
            let ig = if build_graph { ig } else { ig.detach() };
            let acc = match grads.remove(&input.id()) {
                Some(prev) => prev.add(&ig)?,
                None => ig,
            };
            grads.insert(input.id(), acc);
        }
    }

    inputs
        .iter()
        .map(|t| grads.get(&t.id()).cloned().ok_or(CastError::NotInGraph(t.id())))
        .collect()
}
