//! Forward and backward kernels for the dense layers.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Gradients produced by [`affine_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn check_affine(input: &Tensor, weight: &Tensor, bias_len: usize) -> Result<(usize, usize, usize)> {
    if input.shape().len() != 2 || weight.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "affine expects matrices, got input {:?} and weight {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    let (batch, d_in) = (input.shape()[0], input.shape()[1]);
    let (w_in, d_out) = (weight.shape()[0], weight.shape()[1]);
    if d_in != w_in {
        return Err(Error::Dimension(format!(
            "input axis 1 ({d_in}) != weight axis 0 ({w_in})"
        )));
    }
    if bias_len != d_out {
        return Err(Error::Dimension(format!(
            "bias axis 0 ({bias_len}) != weight axis 1 ({d_out})"
        )));
    }
    Ok((batch, d_in, d_out))
}

/// `out[b, j] = sum_i input[b, i] * weight[i, j] + bias[j]`.
pub fn affine_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, _, d_out) = check_affine(input, weight, bias.len())?;
    let w = weight.values();
    let mut out = Vec::with_capacity(batch * d_out);
    for b in 0..batch {
        let start = out.len();
        out.extend_from_slice(bias.values());
        let acc = &mut out[start..];
        for (i, &x) in input.row(b).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let w_row = &w[i * d_out..(i + 1) * d_out];
            for (o, &wij) in acc.iter_mut().zip(w_row) {
                *o += x * wij;
            }
        }
    }
    Tensor::matrix(batch, d_out, out)
}

/// Backward pass of [`affine_forward`] given `upstream = dL/dout`.
pub fn affine_backward(input: &Tensor, weight: &Tensor, upstream: &Tensor) -> Result<AffineGrads> {
    let d_out = weight.shape().get(1).copied().unwrap_or(0);
    let (batch, d_in, d_out) = check_affine(input, weight, d_out)?;
    if upstream.shape() != [batch, d_out] {
        return Err(Error::Dimension(format!(
            "upstream {:?} != expected [{batch}, {d_out}]",
            upstream.shape()
        )));
    }
    let w = weight.values();
    let mut grad_input = vec![0.0; batch * d_in];
    let mut grad_weight = vec![0.0; d_in * d_out];
    let mut grad_bias = vec![0.0; d_out];
    for b in 0..batch {
        let up = upstream.row(b);
        for (gb, &u) in grad_bias.iter_mut().zip(up) {
            *gb += u;
        }
        let x = input.row(b);
        let gi = &mut grad_input[b * d_in..(b + 1) * d_in];
        for i in 0..d_in {
            let w_row = &w[i * d_out..(i + 1) * d_out];
            gi[i] = w_row.iter().zip(up).map(|(a, c)| a * c).sum();
            let xi = x[i];
            if xi != 0.0 {
                let gw_row = &mut grad_weight[i * d_out..(i + 1) * d_out];
                for (g, &u) in gw_row.iter_mut().zip(up) {
                    *g += xi * u;
                }
            }
        }
    }
    Ok(AffineGrads {
        input: Tensor::matrix(batch, d_in, grad_input)?,
        weight: Tensor::matrix(d_in, d_out, grad_weight)?,
        bias: Tensor::vector(grad_bias),
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if input.shape() != upstream.shape() {
        return Err(Error::Dimension(format!(
            "relu_backward: input {:?} vs upstream {:?}",
            input.shape(),
            upstream.shape()
        )));
    }
    let values = input
        .values()
        .iter()
        .zip(upstream.values())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), values)
}

/// Max-shifted softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise softmax of a `batch x classes` matrix.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for b in 0..logits.rows() {
        let p = softmax(logits.row(b));
        out.row_mut(b).copy_from_slice(&p);
    }
    out
}

/// Max-shifted log-softmax of one logit vector.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}
