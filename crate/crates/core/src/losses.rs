//! Training objectives: label-smoothed cross-entropy, the negative-cosine
//! stability regularizer and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MIN_NORM;
use crate::numcore::{dot, log_softmax, softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Label smoothing mass spread uniformly over all classes.
    pub epsilon: f64,
    /// Weight of the stability term.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.1,
            alpha: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in [0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the loss input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Tensor,
}

/// Mean over the batch of `-sum_c t_c log softmax(z)_c` with
/// `t = (1 - eps) * onehot + eps / N`. Gradient is `(softmax - t) / batch`.
pub fn label_smoothed_ce(logits: &Tensor, labels: &[usize], epsilon: f64) -> Result<LossGrad> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (batch, n) = (logits.rows(), logits.cols());
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= n) {
        return Err(Error::InvalidArgument(format!(
            "label {y} at position {i} out of range for {n} classes"
        )));
    }
    let off = epsilon / n as f64;
    let on = 1.0 - epsilon + off;
    let inv_b = 1.0 / batch as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(&[batch, n]);
    for (b, &y) in labels.iter().enumerate() {
        let z = logits.row(b);
        let logp = log_softmax(z);
        let p = softmax(z);
        let mut sample = 0.0;
        for (c, (&lp, &pc)) in logp.iter().zip(&p).enumerate() {
            let t = if c == y { on } else { off };
            sample -= t * lp;
            grad.row_mut(b)[c] = (pc - t) * inv_b;
        }
        total += sample;
    }
    Ok(LossGrad {
        loss: total * inv_b,
        grad,
    })
}

/// Stability regularization result; `skipped` counts degenerate rows left out
/// by [`stability_regularization_lenient`].
#[derive(Debug, Clone, PartialEq)]
pub struct SrLoss {
    pub loss: f64,
    pub grad: Tensor,
    pub skipped: usize,
}

fn check_pair(f_ref: &Tensor, f_tuned: &Tensor) -> Result<()> {
    if f_ref.shape() != f_tuned.shape() || f_ref.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "reference features {:?} vs tuned features {:?}",
            f_ref.shape(),
            f_tuned.shape()
        )));
    }
    if f_ref.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

fn sr_core(f_ref: &Tensor, f_tuned: &Tensor, strict: bool) -> Result<SrLoss> {
    check_pair(f_ref, f_tuned)?;
    let batch = f_ref.rows();
    let mut valid = Vec::with_capacity(batch);
    for b in 0..batch {
        let (rr, tt) = (dot(f_ref.row(b), f_ref.row(b)), dot(f_tuned.row(b), f_tuned.row(b)));
        let (nr, nt) = (rr.sqrt(), tt.sqrt());
        let ok = nr >= MIN_NORM && nt >= MIN_NORM;
        if !ok && strict {
            let which = if nr < MIN_NORM { "reference" } else { "tuned" };
            return Err(Error::Degenerate(format!("{which} feature row {b} has zero norm")));
        }
        valid.push(ok.then_some((rr, tt)));
    }
    let kept = valid.iter().filter(|v| v.is_some()).count();
    let mut grad = Tensor::zeros(f_tuned.shape());
    if kept == 0 {
        return Ok(SrLoss {
            loss: 0.0,
            grad,
            skipped: batch,
        });
    }
    let inv_b = 1.0 / kept as f64;
    let mut total = 0.0;
    for (b, norms) in valid.iter().enumerate() {
        let Some((rr, tt)) = *norms else { continue };
        let (nr, nt) = (rr.sqrt(), tt.sqrt());
        let r = f_ref.row(b);
        let t = f_tuned.row(b);
        // sqrt(fl(d * d)) == d in binary floating point, so parallel rows give
        // exactly 1 here; the clamp absorbs rounding elsewhere.
        let cos = (dot(r, t) / (rr * tt).sqrt()).clamp(-1.0, 1.0);
        total -= cos;
        // d(-cos)/dt = -(r/|r| - cos * t/|t|) / |t|
        let scale = inv_b / nt;
        for ((g, &ri), &ti) in grad.row_mut(b).iter_mut().zip(r).zip(t) {
            *g = -scale * (ri / nr - cos * ti / nt);
        }
    }
    Ok(SrLoss {
        loss: total * inv_b,
        grad,
        skipped: batch - kept,
    })
}

/// Mean negative cosine similarity between reference and tuned features.
/// The gradient is taken with respect to `f_tuned` only; zero-norm rows are
/// an error.
pub fn stability_regularization(f_ref: &Tensor, f_tuned: &Tensor) -> Result<LossGrad> {
    let r = sr_core(f_ref, f_tuned, true)?;
    Ok(LossGrad {
        loss: r.loss,
        grad: r.grad,
    })
}

/// Like [`stability_regularization`] but zero-norm rows are skipped and
/// counted; the mean runs over the remaining rows.
pub fn stability_regularization_lenient(f_ref: &Tensor, f_tuned: &Tensor) -> Result<SrLoss> {
    sr_core(f_ref, f_tuned, false)
}

/// `L_C + alpha * L_S`.
pub fn combined_loss(ce_loss: f64, sr_loss: f64, alpha: f64) -> f64 {
    ce_loss + alpha * sr_loss
}
