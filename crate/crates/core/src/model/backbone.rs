use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{affine_backward, affine_forward, relu, relu_backward, Param, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    /// Output width of each group, input side first.
    pub group_dims: Vec<usize>,
    pub layers_per_group: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_dim: 32,
            group_dims: vec![64; 5],
            layers_per_group: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be >= 1".into()));
        }
        if self.group_dims.is_empty() {
            return Err(Error::InvalidArgument("backbone needs at least one group".into()));
        }
        if let Some(i) = self.group_dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("group {i} has width 0")));
        }
        if self.layers_per_group == 0 {
            return Err(Error::InvalidArgument("layers_per_group must be >= 1".into()));
        }
        Ok(())
    }
}

/// One affine + relu layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Param,
    pub bias: Param,
}

impl Layer {
    fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        // He-uniform: U(-b, b) with b = sqrt(6 / fan_in)
        let bound = (6.0 / d_in as f64).sqrt();
        let w: Vec<f64> = (0..d_in * d_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Layer {
            weight: Param::new(Tensor::matrix(d_in, d_out, w).expect("sized")),
            bias: Param::bias(Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(relu(&affine_forward(x, &self.weight.value, &self.bias.value)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    config: BackboneConfig,
    groups: Vec<Group>,
    group_frozen: Vec<bool>,
}

/// Activations recorded by [`BackboneModel::forward_trace`] for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    start_group: usize,
    /// `(group, layer, layer input, pre-activation)` in forward order.
    steps: Vec<(usize, usize, Tensor, Tensor)>,
    output: Tensor,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn start_group(&self) -> usize {
        self.start_group
    }
}

impl BackboneModel {
    pub(crate) fn init<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut d_in = config.input_dim;
        let mut groups = Vec::with_capacity(config.group_dims.len());
        for &d_out in &config.group_dims {
            let mut layers = Vec::with_capacity(config.layers_per_group);
            for l in 0..config.layers_per_group {
                let fan_in = if l == 0 { d_in } else { d_out };
                layers.push(Layer::init(fan_in, d_out, rng));
            }
            groups.push(Group { layers });
            d_in = d_out;
        }
        let group_frozen = vec![false; groups.len()];
        Ok(BackboneModel {
            config,
            groups,
            group_frozen,
        })
    }

    /// Rebuilds a model from explicit layers, checking every shape.
    pub fn from_groups(config: BackboneConfig, groups: Vec<Group>) -> Result<Self> {
        config.validate()?;
        if groups.len() != config.group_dims.len() {
            return Err(Error::Dimension(format!(
                "{} groups supplied, config declares {}",
                groups.len(),
                config.group_dims.len()
            )));
        }
        let mut d_in = config.input_dim;
        for (gi, (g, &d_out)) in groups.iter().zip(&config.group_dims).enumerate() {
            if g.layers.len() != config.layers_per_group {
                return Err(Error::Dimension(format!(
                    "group {gi} has {} layers, expected {}",
                    g.layers.len(),
                    config.layers_per_group
                )));
            }
            for (li, l) in g.layers.iter().enumerate() {
                let fan_in = if li == 0 { d_in } else { d_out };
                if l.weight.value.shape() != [fan_in, d_out] || l.bias.value.shape() != [d_out] {
                    return Err(Error::Dimension(format!(
                        "group {gi} layer {li}: weight {:?} bias {:?}, expected [{fan_in}, {d_out}] and [{d_out}]",
                        l.weight.value.shape(),
                        l.bias.value.shape()
                    )));
                }
            }
            d_in = d_out;
        }
        let group_frozen = vec![false; groups.len()];
        Ok(BackboneModel {
            config,
            groups,
            group_frozen,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_frozen(&self) -> &[bool] {
        &self.group_frozen
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.group_dims.last().expect("validated")
    }

    /// Input width expected by group `g` (`g == G` gives the feature width).
    pub fn boundary_dim(&self, g: usize) -> usize {
        if g == 0 {
            self.config.input_dim
        } else {
            self.config.group_dims[g - 1]
        }
    }

    pub fn set_group_frozen(&mut self, g: usize, frozen: bool) {
        self.group_frozen[g] = frozen;
        for l in &mut self.groups[g].layers {
            l.weight.frozen = frozen;
            l.bias.frozen = frozen;
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.groups
            .iter()
            .flat_map(|g| g.layers.iter())
            .flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.groups
            .iter_mut()
            .flat_map(|g| g.layers.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Parameters of one group.
    pub fn group_params(&self, g: usize) -> impl Iterator<Item = &Param> {
        self.groups[g].layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn bit_eq(&self, other: &BackboneModel) -> bool {
        self.config == other.config
            && self.params().count() == other.params().count()
            && self.params().zip(other.params()).all(|(a, b)| a.value.bit_eq(&b.value))
    }

    fn check_width(&self, start: usize, x: &Tensor) -> Result<()> {
        let want = self.boundary_dim(start);
        if x.shape().len() != 2 || x.shape()[1] != want {
            return Err(Error::Dimension(format!(
                "batch {:?} entering group {start} must have width {want}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Full forward pass producing `batch x d_feat` features.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_range(0, self.num_groups(), x)
    }

    /// Applies groups `start..end` to activations entering group `start`.
    pub fn forward_range(&self, start: usize, end: usize, x: &Tensor) -> Result<Tensor> {
        if start > end || end > self.num_groups() {
            return Err(Error::InvalidArgument(format!(
                "group range {start}..{end} outside 0..{}",
                self.num_groups()
            )));
        }
        self.check_width(start, x)?;
        let mut h = x.clone();
        for g in &self.groups[start..end] {
            for l in &g.layers {
                h = l.forward(&h)?;
            }
        }
        Ok(h)
    }

    /// Forward pass from group `start` to the output, keeping what backprop needs.
    pub fn forward_trace(&self, start: usize, x: &Tensor) -> Result<ForwardTrace> {
        if start > self.num_groups() {
            return Err(Error::InvalidArgument(format!(
                "start group {start} outside 0..={}",
                self.num_groups()
            )));
        }
        self.check_width(start, x)?;
        let mut steps = Vec::new();
        let mut h = x.clone();
        for (gi, g) in self.groups.iter().enumerate().skip(start) {
            for (li, l) in g.layers.iter().enumerate() {
                let pre = affine_forward(&h, &l.weight.value, &l.bias.value)?;
                let next = relu(&pre);
                steps.push((gi, li, h, pre));
                h = next;
            }
        }
        Ok(ForwardTrace {
            start_group: start,
            steps,
            output: h,
        })
    }

    /// Backpropagates `grad_out = dL/d(output)` through the traced layers,
    /// adding `scale * dL/dparam` into every learnable parameter's gradient.
    /// Propagation stops once only frozen layers remain below.
    pub fn backward(&mut self, trace: &ForwardTrace, grad_out: &Tensor, scale: f64) -> Result<()> {
        if grad_out.shape() != trace.output.shape() {
            return Err(Error::Dimension(format!(
                "feature gradient {:?} vs traced output {:?}",
                grad_out.shape(),
                trace.output.shape()
            )));
        }
        let lowest_learnable = (trace.start_group..self.num_groups()).find(|&g| !self.group_frozen[g]);
        let Some(lowest_learnable) = lowest_learnable else {
            return Ok(());
        };
        let mut upstream = grad_out.clone();
        for (gi, li, input, pre) in trace.steps.iter().rev() {
            if *gi < lowest_learnable {
                break;
            }
            let layer = &mut self.groups[*gi].layers[*li];
            let g_pre = relu_backward(pre, &upstream)?;
            let grads = affine_backward(input, &layer.weight.value, &g_pre)?;
            if !layer.weight.frozen {
                layer.weight.accumulate(&grads.weight, scale)?;
            }
            if !layer.bias.frozen {
                layer.bias.accumulate(&grads.bias, scale)?;
            }
            upstream = grads.input;
        }
        Ok(())
    }
}
