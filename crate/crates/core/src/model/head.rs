use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{dot, norm, Param, Tensor};

pub const DEFAULT_SCALE: f64 = 10.0;

/// Rows with a smaller Euclidean norm are degenerate.
pub const MIN_NORM: f64 = 1e-12;

/// Cosine classifier: `logit[b, c] = s * cos(feature_b, w_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineHead {
    /// `n_classes x d_feat`; rows are normalized on the fly, never in place.
    pub weights: Param,
    pub scale: f64,
}

/// Intermediate values of a head forward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub logits: Tensor,
    /// Raw cosines, `batch x classes`.
    pub cosines: Tensor,
    unit_features: Tensor,
    feature_norms: Vec<f64>,
    unit_weights: Tensor,
    weight_norms: Vec<f64>,
}

fn normalize_rows(t: &Tensor, what: &str) -> Result<(Tensor, Vec<f64>)> {
    let mut unit = t.clone();
    let mut norms = Vec::with_capacity(t.rows());
    for r in 0..t.rows() {
        let n = norm(t.row(r));
        if !(n >= MIN_NORM) {
            return Err(Error::Degenerate(format!("{what} row {r} has norm {n:e}")));
        }
        unit.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((unit, norms))
}

impl CosineHead {
    /// Fresh head with rows drawn from `U(-1/sqrt(d), 1/sqrt(d))`.
    pub fn init<R: Rng>(n_classes: usize, dim: usize, scale: f64, rng: &mut R) -> Result<Self> {
        if n_classes == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "head needs positive class count and width, got {n_classes} x {dim}"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "head scale must be positive, got {scale}"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mut values = Vec::with_capacity(n_classes * dim);
        for _ in 0..n_classes {
            loop {
                let row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-bound..bound)).collect();
                if norm(&row) >= MIN_NORM {
                    values.extend(row);
                    break;
                }
            }
        }
        Ok(CosineHead {
            weights: Param::new(Tensor::matrix(n_classes, dim, values)?),
            scale,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.weights.value.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.value.cols()
    }

    pub fn forward(&self, features: &Tensor) -> Result<HeadTrace> {
        if features.shape().len() != 2 || features.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "features {:?} do not match head width {}",
                features.shape(),
                self.dim()
            )));
        }
        let (unit_features, feature_norms) = normalize_rows(features, "feature")?;
        let (unit_weights, weight_norms) = normalize_rows(&self.weights.value, "head weight")?;
        let (batch, classes) = (features.rows(), self.n_classes());
        let mut cos = Vec::with_capacity(batch * classes);
        for b in 0..batch {
            let u = unit_features.row(b);
            for c in 0..classes {
                cos.push(dot(u, unit_weights.row(c)).clamp(-1.0, 1.0));
            }
        }
        let cosines = Tensor::matrix(batch, classes, cos)?;
        let mut logits = cosines.clone();
        logits.values_mut().iter_mut().for_each(|v| *v *= self.scale);
        Ok(HeadTrace {
            logits,
            cosines,
            unit_features,
            feature_norms,
            unit_weights,
            weight_norms,
        })
    }

    /// Scaled cosine logits, `batch x classes`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.forward(features)?.logits)
    }

    /// Given `dL/dlogits`, accumulates `scale * dL/dW` into the head gradient
    /// (when learnable) and returns `dL/dfeatures`.
    pub fn backward(&mut self, trace: &HeadTrace, grad_logits: &Tensor, scale: f64) -> Result<Tensor> {
        if grad_logits.shape() != trace.logits.shape() {
            return Err(Error::Dimension(format!(
                "logit gradient {:?} vs logits {:?}",
                grad_logits.shape(),
                trace.logits.shape()
            )));
        }
        let (batch, classes, dim) = (trace.logits.rows(), self.n_classes(), self.dim());
        let s = self.scale;
        let mut grad_features = Tensor::zeros(&[batch, dim]);
        let mut grad_weights = Tensor::zeros(&[classes, dim]);
        for b in 0..batch {
            let u = trace.unit_features.row(b);
            let inv_f = 1.0 / trace.feature_norms[b];
            for c in 0..classes {
                let g = grad_logits.get(b, c);
                if g == 0.0 {
                    continue;
                }
                let v = trace.unit_weights.row(c);
                let cos = dot(u, v);
                let gf = g * s * inv_f;
                let gw = g * s / trace.weight_norms[c];
                for ((df, &ui), &vi) in grad_features.row_mut(b).iter_mut().zip(u).zip(v) {
                    *df += gf * (vi - cos * ui);
                }
                for ((dw, &ui), &vi) in grad_weights.row_mut(c).iter_mut().zip(u).zip(v) {
                    *dw += gw * (ui - cos * vi);
                }
            }
        }
        if !self.weights.frozen {
            self.weights.accumulate(&grad_weights, scale)?;
        }
        Ok(grad_features)
    }
}
