use crate::error::{Error, Result};

use super::{Scalar, Tensor};

const LANES: usize = 8;

/// Dot product with eight independent accumulators so the loop vectorizes.
/// Summation order is fixed, so results are reproducible bit for bit.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..LANES {
            acc[j] = acc[j] + x[j] * y[j];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

/// `y += alpha · x`
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

fn check_dense<T: Scalar>(weights: &Tensor<T>, bias: &Tensor<T>, input: &Tensor<T>) -> Result<()> {
    weights.check_matrix("dense weights")?;
    input.check_matrix("dense input")?;
    if bias.shape() != [weights.rows()] {
        return Err(Error::Dimension {
            op: "dense bias",
            left: weights.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    if weights.cols() != input.cols() {
        return Err(Error::Dimension {
            op: "dense",
            left: weights.shape().to_vec(),
            right: input.shape().to_vec(),
        });
    }
    Ok(())
}

/// `output[b, o] = Σ_i weights[o, i] · input[b, i] + bias[o]`
pub fn dense_forward<T: Scalar>(weights: &Tensor<T>, bias: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    check_dense(weights, bias, input)?;
    let (batch, outs) = (input.rows(), weights.rows());
    let mut out = Vec::with_capacity(batch * outs);
    let bias = bias.data();
    for b in 0..batch {
        let x = input.row(b);
        for o in 0..outs {
            out.push(dot(weights.row(o), x) + bias[o]);
        }
    }
    Tensor::matrix(batch, outs, out)
}

/// Backward pass of [`dense_forward`].
///
/// Accumulates `∂L/∂W` and `∂L/∂b` into `grad_weights` / `grad_bias` and
/// returns `∂L/∂input` when `want_input_grad` is set.
pub fn dense_backward<T: Scalar>(
    weights: &Tensor<T>,
    input: &Tensor<T>,
    grad_output: &Tensor<T>,
    grad_weights: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
    want_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    weights.check_matrix("dense_backward weights")?;
    if grad_output.shape() != [input.rows(), weights.rows()] || weights.cols() != input.cols() {
        return Err(Error::Dimension {
            op: "dense_backward",
            left: weights.shape().to_vec(),
            right: grad_output.shape().to_vec(),
        });
    }
    if grad_weights.shape() != weights.shape() || grad_bias.shape() != [weights.rows()] {
        return Err(Error::Dimension {
            op: "dense_backward grads",
            left: weights.shape().to_vec(),
            right: grad_weights.shape().to_vec(),
        });
    }
    let (batch, outs, ins) = (input.rows(), weights.rows(), weights.cols());
    for b in 0..batch {
        let x = input.row(b);
        let dy = grad_output.row(b);
        for o in 0..outs {
            let g = dy[o];
            grad_bias.data_mut()[o] = grad_bias.data()[o] + g;
            axpy(g, x, grad_weights.row_mut(o));
        }
    }
    if !want_input_grad {
        return Ok(None);
    }
    let mut dx = Tensor::zeros(&[batch, ins]);
    for b in 0..batch {
        let dy = grad_output.row(b);
        let row = dx.row_mut(b);
        for o in 0..outs {
            axpy(dy[o], weights.row(o), row);
        }
    }
    Ok(Some(dx))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub(crate) fn relu_in_place<T: Scalar>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Masks `grad_output` where the pre-activation was not positive.
pub fn relu_backward<T: Scalar>(pre_activation: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    if pre_activation.shape() != grad_output.shape() {
        return Err(Error::Dimension {
            op: "relu_backward",
            left: pre_activation.shape().to_vec(),
            right: grad_output.shape().to_vec(),
        });
    }
    let mut dx = grad_output.clone();
    for (g, z) in dx.data_mut().iter_mut().zip(pre_activation.data()) {
        if !(*z > T::zero()) {
            *g = T::zero();
        }
    }
    Ok(dx)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
///
/// The loss is accumulated in `f64`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    logits.check_matrix("softmax_xent")?;
    let (batch, k) = (logits.rows(), logits.cols());
    if labels.len() != batch {
        return Err(Error::Dimension {
            op: "softmax_xent labels",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::input(format!("label {bad} out of range for {k} classes")));
    }
    let inv_batch = 1.0 / batch as f64;
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(batch * k);
    let mut probs = vec![0.0f64; k];
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b);
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64().unwrap()));
        let mut sum = 0.0;
        for (p, v) in probs.iter_mut().zip(row) {
            *p = (v.to_f64().unwrap() - m).exp();
            sum += *p;
        }
        loss -= (row[label].to_f64().unwrap() - m) - sum.ln();
        for (j, p) in probs.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(T::from((p / sum - onehot) * inv_batch).unwrap());
        }
    }
    Ok((loss * inv_batch, Tensor::matrix(batch, k, grad)?))
}

/// Index of the largest logit per row (first wins on ties).
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|b| {
            let row = logits.row(b);
            let mut best = 0;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
