//! Finite-difference audit of the full backbone + head + loss composition.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::losses::{label_smoothed_ce, stability_regularization};
use crate::model::{init_model, set_adaptability, AdaptabilityLevel, BackboneConfig, BackboneModel, CosineHead};
use crate::numcore::{finite_diff_check, richardson_check, GradCheckReport, Param, Tensor};
use crate::rng;

/// Minimum distance of any pre-activation from zero in a generated case.
pub const KINK_MARGIN: f64 = 1e-3;

/// Which scalar the audit differentiates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Label-smoothed cross-entropy on the labeled batch.
    Ce,
    /// Stability term on the unlabeled batch.
    Sr,
    /// `CE + alpha * SR`.
    Combined { alpha: f64 },
}

/// Size ranges and perturbation scales for [`GradCase::random_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct CaseShape {
    pub max_groups: usize,
    pub widths: (usize, usize),
    pub input_dims: (usize, usize),
    pub max_layers_per_group: usize,
    pub batch: (usize, usize),
    pub classes: (usize, usize),
    /// Standard deviation of the noise added to every backbone parameter.
    pub jitter: f64,
    /// Extra noise separating the reference network from the tuned one.
    pub reference_jitter: f64,
}

impl Default for CaseShape {
    fn default() -> Self {
        CaseShape {
            max_groups: 3,
            widths: (3, 6),
            input_dims: (2, 5),
            max_layers_per_group: 2,
            batch: (2, 4),
            classes: (2, 4),
            jitter: 0.3,
            reference_jitter: 0.3,
        }
    }
}

/// One randomly drawn model, batch and reference network.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub backbone: BackboneModel,
    pub head: CosineHead,
    /// Frozen network the stability term compares against.
    pub reference: BackboneModel,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub sr_x: Tensor,
    pub epsilon: f64,
}

fn normal_tensor<R: Rng>(rows: usize, cols: usize, r: &mut R) -> Tensor {
    let v = (0..rows * cols).map(|_| r.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, v).expect("sized")
}

fn jitter<R: Rng>(p: &mut Param, sd: f64, r: &mut R) {
    for v in p.value.values_mut() {
        *v += sd * r.sample::<f64, _>(StandardNormal);
    }
}

impl GradCase {
    /// Small random configuration: 1-3 groups of width 3-6, batch of 2-4,
    /// 2-4 classes, random adaptability level, jittered biases, and a
    /// reference network that differs from the tuned one.
    ///
    /// Draws are repeated until the case is smooth: every pre-activation sits
    /// at least [`KINK_MARGIN`] away from the relu kink, and every feature row
    /// has two or more active units. A row with a single active unit makes
    /// both cosine losses exactly flat along that unit, which central
    /// differences can only resolve down to rounding noise.
    pub fn random(seed: u64) -> Result<Self> {
        Self::random_with(seed, &CaseShape::default())
    }

    pub fn random_with(seed: u64, shape: &CaseShape) -> Result<Self> {
        for attempt in 0..1000 {
            let case = Self::draw(seed, attempt, shape)?;
            if case.kink_margin()? >= KINK_MARGIN && case.min_active_units()? >= 2 {
                return Ok(case);
            }
        }
        Err(Error::Degenerate(format!(
            "no smooth gradient-check case for seed {seed}"
        )))
    }

    /// Fewest nonzero coordinates in any feature row of either network.
    pub fn min_active_units(&self) -> Result<usize> {
        let mut fewest = usize::MAX;
        for net in [&self.backbone, &self.reference] {
            for x in [&self.x, &self.sr_x] {
                let f = net.forward(x)?;
                for i in 0..f.rows() {
                    fewest = fewest.min(f.row(i).iter().filter(|&&v| v != 0.0).count());
                }
            }
        }
        Ok(fewest)
    }

    fn draw(seed: u64, attempt: u64, shape: &CaseShape) -> Result<Self> {
        let mut r = rng::stream(seed, "gradcheck-case", &[attempt]);
        let groups = r.gen_range(1..=shape.max_groups);
        let config = BackboneConfig {
            input_dim: r.gen_range(shape.input_dims.0..=shape.input_dims.1),
            group_dims: (0..groups)
                .map(|_| r.gen_range(shape.widths.0..=shape.widths.1))
                .collect(),
            layers_per_group: r.gen_range(1..=shape.max_layers_per_group),
        };
        let n_classes = r.gen_range(shape.classes.0..=shape.classes.1);
        let (mut backbone, mut head) =
            init_model(&config, n_classes, rng::derive_seed(seed, "gradcheck-init", &[attempt]))?;
        for p in backbone.params_mut() {
            jitter(p, shape.jitter, &mut r);
        }
        let mut reference = backbone.clone();
        for p in reference.params_mut() {
            jitter(p, shape.reference_jitter, &mut r);
        }
        let level = AdaptabilityLevel(r.gen_range(1..=groups));
        set_adaptability(&mut backbone, &mut head, level)?;
        let batch = r.gen_range(shape.batch.0..=shape.batch.1);
        let x = normal_tensor(batch, config.input_dim, &mut r);
        let labels = (0..batch).map(|_| r.gen_range(0..n_classes)).collect();
        let sr_x = normal_tensor(r.gen_range(shape.batch.0..=shape.batch.1), config.input_dim, &mut r);
        Ok(GradCase {
            backbone,
            head,
            reference,
            x,
            labels,
            sr_x,
            epsilon: 0.1,
        })
    }

    fn weights(objective: Objective) -> (f64, f64) {
        match objective {
            Objective::Ce => (1.0, 0.0),
            Objective::Sr => (0.0, 1.0),
            Objective::Combined { alpha } => (1.0, alpha),
        }
    }

    /// Loss value only, as the finite differences see it.
    pub fn loss(&self, backbone: &BackboneModel, head: &CosineHead, objective: Objective) -> Result<f64> {
        let (w_ce, w_sr) = Self::weights(objective);
        let mut total = 0.0;
        if w_ce != 0.0 {
            let logits = head.logits(&backbone.forward(&self.x)?)?;
            total += w_ce * label_smoothed_ce(&logits, &self.labels, self.epsilon)?.loss;
        }
        if w_sr != 0.0 {
            let f_ref = self.reference.forward(&self.sr_x)?;
            total += w_sr * stability_regularization(&f_ref, &backbone.forward(&self.sr_x)?)?.loss;
        }
        Ok(total)
    }

    /// Fills `backbone` and `head` gradients analytically; returns the loss.
    pub fn backprop(&self, backbone: &mut BackboneModel, head: &mut CosineHead, objective: Objective) -> Result<f64> {
        let (w_ce, w_sr) = Self::weights(objective);
        backbone.params_mut().for_each(Param::zero_grad);
        head.weights.zero_grad();
        let mut total = 0.0;
        if w_ce != 0.0 {
            let trace = backbone.forward_trace(0, &self.x)?;
            let ht = head.forward(trace.output())?;
            let ce = label_smoothed_ce(&ht.logits, &self.labels, self.epsilon)?;
            let g_feat = head.backward(&ht, &ce.grad, w_ce)?;
            backbone.backward(&trace, &g_feat, 1.0)?;
            total += w_ce * ce.loss;
        }
        if w_sr != 0.0 {
            let f_ref = self.reference.forward(&self.sr_x)?;
            let trace = backbone.forward_trace(0, &self.sr_x)?;
            let sr = stability_regularization(&f_ref, trace.output())?;
            backbone.backward(&trace, &sr.grad, w_sr)?;
            total += w_sr * sr.loss;
        }
        Ok(total)
    }

    /// Max relative error between analytic and central-difference gradients
    /// over every learnable coordinate of backbone and head.
    pub fn check(&self, objective: Objective, h: f64) -> Result<GradCheckReport> {
        self.run(objective, |f, ps| finite_diff_check(f, ps, h))
    }

    /// Same comparison through [`richardson_check`]; a maximum of at most 1
    /// means every coordinate is within `rtol` relative or `atol` absolute.
    pub fn check_richardson(&self, objective: Objective, h: f64, rtol: f64, atol: f64) -> Result<GradCheckReport> {
        self.run(objective, |f, ps| richardson_check(f, ps, h, rtol, atol))
    }

    fn run<C>(&self, objective: Objective, checker: C) -> Result<GradCheckReport>
    where
        C: FnOnce(&mut dyn FnMut(&[Param]) -> Result<f64>, &mut [Param]) -> Result<GradCheckReport>,
    {
        let mut backbone = self.backbone.clone();
        let mut head = self.head.clone();
        self.backprop(&mut backbone, &mut head, objective)?;
        let mut params: Vec<Param> = backbone.params().cloned().collect();
        params.push(head.weights.clone());
        let n_bb = params.len() - 1;
        let mut loss = |ps: &[Param]| {
            let mut bb = backbone.clone();
            for (dst, src) in bb.params_mut().zip(&ps[..n_bb]) {
                dst.value = src.value.clone();
            }
            let mut hd = head.clone();
            hd.weights.value = ps[n_bb].value.clone();
            self.loss(&bb, &hd, objective)
        };
        checker(&mut loss, &mut params)
    }

    /// Distance of the closest pre-activation to a relu kink on any batch.
    pub fn kink_margin(&self) -> Result<f64> {
        let mut margin = f64::INFINITY;
        for x in [&self.x, &self.sr_x] {
            let mut a = x.clone();
            for g in self.backbone.groups() {
                for layer in &g.layers {
                    let pre = crate::numcore::affine_forward(&a, &layer.weight.value, &layer.bias.value)?;
                    margin = pre.values().iter().fold(margin, |m, v| m.min(v.abs()));
                    a = crate::numcore::relu(&pre);
                }
            }
        }
        if margin.is_nan() {
            return Err(Error::NonFinite("pre-activation".into()));
        }
        Ok(margin)
    }
}
