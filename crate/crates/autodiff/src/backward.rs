use crate::error::{AutodiffError, Result};
use crate::ops::vjp;
use crate::tape::NodeId;
use crate::tensor::Tensor;

/// Gradient of a scalar with respect to one tensor.
#[derive(Debug, Clone)]
pub struct Gradient {
    /// Node the gradient was taken against; `None` for a detached tensor.
    pub wrt: Option<NodeId>,
    pub value: Tensor,
}

/// Reverse-mode gradients of the scalar `output` with respect to each tensor in
/// `wrt`, returned in the same order.
///
/// With `create_graph` the backward pass is itself recorded on the tape, so the
/// returned gradients can be differentiated again. Tensors that `output` does
/// not depend on receive zeros.
pub fn backward(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Gradient>> {
    if output.numel() != 1 {
        return Err(AutodiffError::NonScalarOutput(output.shape().to_vec()));
    }
    let tape = output.tape().ok_or(AutodiffError::DetachedOutput)?.clone();
    let out_id = output.node_id().expect("taped tensor has a node");
    for w in wrt {
        if let Some(t) = w.tape() {
            if !t.same(&tape) {
                return Err(AutodiffError::TapeMismatch);
            }
        }
    }
    let _guard = tape.begin_pass(create_graph)?;

    let n = out_id.0 + 1;
    let mut needed = vec![false; n];
    for w in wrt {
        if let Some(id) = w.node_id() {
            if id.0 < n {
                needed[id.0] = true;
            }
        }
    }
    {
        let inner = tape.inner.borrow();
        for i in 0..n {
            if !needed[i] {
                needed[i] = inner.nodes[i].inputs.iter().any(|j| needed[j.0]);
            }
        }
    }

    let seed = Tensor::ones(output.shape());
    let seed = if create_graph { tape.constant(&seed) } else { seed };
    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[out_id.0] = Some(seed);

    for id in (0..n).rev() {
        if !needed[id] {
            continue;
        }
        let Some(g) = grads[id].clone() else { continue };
        let (op, inputs) = {
            let inner = tape.inner.borrow();
            let node = &inner.nodes[id];
            (node.op.clone(), node.inputs.clone())
        };
        let needs: Vec<bool> = inputs.iter().map(|j| needed[j.0]).collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let fetch = |j: NodeId| {
            if create_graph {
                tape.tensor_at(j)
            } else {
                tape.detached_at(j)
            }
        };
        let xs: Vec<Tensor> = inputs.iter().map(|&j| fetch(j)).collect();
        let y = fetch(NodeId(id));
        let contributions = vjp(&op, &xs, &y, &g, &needs)?;
        for (j, c) in inputs.iter().zip(contributions) {
            let Some(c) = c else { continue };
            if !needed[j.0] {
                continue;
            }
            grads[j.0] = Some(match grads[j.0].take() {
                Some(acc) => acc.add(&c)?,
                None => c,
            });
        }
    }

    Ok(wrt
        .iter()
        .map(|w| {
            let value = w
                .node_id()
                .filter(|id| id.0 < n)
                .and_then(|id| grads[id.0].clone())
                .unwrap_or_else(|| Tensor::zeros(w.shape()));
            Gradient {
                wrt: w.node_id(),
                value,
            }
        })
        .collect())
}

/// Convenience: gradient with respect to a single tensor.
pub fn grad(output: &Tensor, wrt: &Tensor, create_graph: bool) -> Result<Tensor> {
    Ok(backward(output, &[wrt], create_graph)?.remove(0).value)
}

/// Dense Jacobian of `output` (k values) with respect to `input` (D values),
/// shaped `(k, D)`; row `i` is the gradient of the `i`-th flat output.
#[derive(Debug, Clone)]
pub struct Jacobian {
    pub value: Tensor,
    /// Set when `input` is not an ancestor of `output`; the value is then zero.
    pub disconnected: bool,
}

pub fn jacobian(output: &Tensor, input: &Tensor) -> Result<Jacobian> {
    let (k, d) = (output.numel(), input.numel());
    let connected = match (output.tape(), output.node_id(), input.tape(), input.node_id()) {
        (Some(to), Some(o), Some(ti), Some(i)) => {
            if !to.same(ti) {
                return Err(AutodiffError::TapeMismatch);
            }
            to.depends_on(o, i)
        }
        _ => false,
    };
    if !connected {
        return Ok(Jacobian {
            value: Tensor::zeros(&[k, d]),
            disconnected: true,
        });
    }
    let mut rows = Vec::with_capacity(k * d);
    for i in 0..k {
        let gi = grad(&output.element(i)?, input, false)?;
        rows.extend_from_slice(gi.data());
    }
    Ok(Jacobian {
        value: Tensor::new(rows, &[k, d])?,
        disconnected: false,
    })
}
