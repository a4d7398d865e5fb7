//! Forward and backward passes through a stack of dense layers followed by a
//! linear output head. The caller supplies already-composed weights, so the
//! same code serves decomposed models, the plain baseline and test oracles.

use crate::error::{ApdError, Result};
use crate::numeric::{softmax_cross_entropy, Activation, Matrix};
use crate::params::Dense;

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each hidden layer and, last, the input to the head.
    pub inputs: Vec<Matrix>,
    /// Pre-activations of each hidden layer.
    pub pre: Vec<Matrix>,
    pub logits: Matrix,
}

fn affine(x: &Matrix, layer: &Dense) -> Result<Matrix> {
    let mut z = x.matmul(&layer.weight)?;
    let cols = z.cols();
    if layer.bias.len() != cols {
        return Err(ApdError::ShapeMismatch(format!(
            "bias of length {} for {} outputs",
            layer.bias.len(),
            cols
        )));
    }
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}

pub fn forward(
    layers: &[Dense],
    head: &Dense,
    activation: Activation,
    x: &Matrix,
) -> Result<ForwardCache> {
    let mut inputs = Vec::with_capacity(layers.len() + 1);
    let mut pre = Vec::with_capacity(layers.len());
    let mut h = x.clone();
    for layer in layers {
        if h.cols() != layer.weight.rows() {
            return Err(ApdError::DimensionMismatch {
                op: "forward",
                left_rows: h.rows(),
                left_cols: h.cols(),
                right_rows: layer.weight.rows(),
                right_cols: layer.weight.cols(),
            });
        }
        let z = affine(&h, layer)?;
        let next = z.map(|v| activation.apply(v));
        inputs.push(h);
        pre.push(z);
        h = next;
    }
    if h.cols() != head.weight.rows() {
        return Err(ApdError::DimensionMismatch {
            op: "forward(head)",
            left_rows: h.rows(),
            left_cols: h.cols(),
            right_rows: head.weight.rows(),
            right_cols: head.weight.cols(),
        });
    }
    let logits = affine(&h, head)?;
    inputs.push(h);
    Ok(ForwardCache {
        inputs,
        pre,
        logits,
    })
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn mean_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(ApdError::ShapeMismatch(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let n = labels.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (r, &y) in labels.iter().enumerate() {
        let (l, g) = softmax_cross_entropy(logits.row(r), y)?;
        total += l;
        for (o, v) in grad.row_mut(r).iter_mut().zip(g) {
            *o = v / n;
        }
    }
    Ok((total / n, grad))
}

fn dense_grad(input: &Matrix, dz: &Matrix) -> Result<Dense> {
    let weight = input.t_matmul(dz)?;
    let mut bias = vec![0.0; dz.cols()];
    for r in 0..dz.rows() {
        for (b, v) in bias.iter_mut().zip(dz.row(r)) {
            *b += v;
        }
    }
    Ok(Dense { weight, bias })
}

/// Gradients of a scalar loss w.r.t. every hidden layer and the head, given
/// `dlogits = dLoss/dlogits`.
pub fn backward(
    layers: &[Dense],
    head: &Dense,
    activation: Activation,
    cache: &ForwardCache,
    dlogits: &Matrix,
) -> Result<(Vec<Dense>, Dense)> {
    let last = cache.inputs.len() - 1;
    let head_grad = dense_grad(&cache.inputs[last], dlogits)?;
    let mut upstream = dlogits.matmul_t(&head.weight)?;
    let mut grads = vec![Dense::zeros(0, 0); layers.len()];
    for l in (0..layers.len()).rev() {
        let z = &cache.pre[l];
        let mut dz = upstream;
        for (d, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
            *d *= activation.derivative(zv);
        }
        grads[l] = dense_grad(&cache.inputs[l], &dz)?;
        upstream = if l > 0 {
            dz.matmul_t(&layers[l].weight)?
        } else {
            Matrix::zeros(0, 0)
        };
    }
    Ok((grads, head_grad))
}
