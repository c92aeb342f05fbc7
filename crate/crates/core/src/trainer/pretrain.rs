use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetStore, Split};
use crate::error::{Error, Result};
use crate::losses::label_smoothed_ce;
use crate::model::{init_model, BackboneConfig, BackboneModel, CosineHead};
use crate::numcore::{sgd_step, SgdConfig, Tensor};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub epsilon: f64,
    pub head_scale: f64,
    /// Leading groups to keep frozen; pretraining always trains everything,
    /// so anything other than 0 is rejected.
    pub frozen_groups: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 64,
            sgd: SgdConfig {
                learning_rate: 0.01,
                weight_decay: 5e-4,
                momentum: 0.9,
                decay_biases: true,
            },
            epsilon: 0.1,
            head_scale: 10.0,
            frozen_groups: 0,
        }
    }
}

/// Pretrained backbone plus the base-class head it was trained with.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub backbone: BackboneModel,
    pub base_head: CosineHead,
    /// Mean training loss of the final epoch.
    pub final_loss: f64,
}

/// Supervised pretraining on the base split with a cosine head and
/// label-smoothed cross-entropy.
pub fn pretrain(
    store: &DatasetStore,
    backbone: &BackboneConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Pretrained> {
    store.check_trainable()?;
    cfg.sgd.validate()?;
    if cfg.frozen_groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "pretraining trains all groups; {} frozen groups requested",
            cfg.frozen_groups
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "pretraining needs epochs >= 1 and batch_size >= 1".into(),
        ));
    }
    if backbone.input_dim != store.input_dim() {
        return Err(Error::Dimension(format!(
            "backbone input_dim {} != dataset feature dim {}",
            backbone.input_dim,
            store.input_dim()
        )));
    }
    let base_classes = store.classes_in(Split::Base);
    let mut local = vec![usize::MAX; store.n_classes()];
    for (i, &c) in base_classes.iter().enumerate() {
        local[c] = i;
    }
    let samples = store.samples_in(Split::Base);
    let (mut model, mut head) = init_model(backbone, base_classes.len(), seed)?;
    head.scale = cfg.head_scale;

    let mut order = samples.clone();
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(seed, "pretrain-shuffle", &[epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = store.rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| local[store.labels()[i]]).collect();
            let loss = train_step(&mut model, &mut head, &x, &labels, cfg)
                .map_err(|e| e.context(format!("pretrain epoch {epoch} step {step}")))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    context: format!("pretrain epoch {epoch} step {step}"),
                    loss,
                });
            }
            total += loss;
            batches += 1;
        }
        final_loss = total / batches as f64;
    }
    Ok(Pretrained {
        backbone: model,
        base_head: head,
        final_loss,
    })
}

fn train_step(
    model: &mut BackboneModel,
    head: &mut CosineHead,
    x: &Tensor,
    labels: &[usize],
    cfg: &PretrainConfig,
) -> Result<f64> {
    let trace = model.forward_trace(0, x)?;
    let head_trace = head.forward(trace.output())?;
    let ce = label_smoothed_ce(&head_trace.logits, labels, cfg.epsilon)?;
    let grad_features = head.backward(&head_trace, &ce.grad, 1.0)?;
    model.backward(&trace, &grad_features, 1.0)?;
    sgd_step(model.params_mut().chain([&mut head.weights]), &cfg.sgd);
    Ok(ce.loss)
}

/// Top-1 accuracy of `head` on the given samples (labels already local).
pub fn classification_accuracy(model: &BackboneModel, head: &CosineHead, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = head.logits(&model.forward(x)?)?;
    let correct = (0..labels.len())
        .filter(|&b| super::evaluate::argmax(logits.row(b)) == labels[b])
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Training accuracy over the whole base split.
pub fn base_accuracy(store: &DatasetStore, p: &Pretrained) -> Result<f64> {
    let base_classes = store.classes_in(Split::Base);
    let samples = store.samples_in(Split::Base);
    let labels: Vec<usize> = samples
        .iter()
        .map(|&i| base_classes.binary_search(&store.labels()[i]).expect("base sample"))
        .collect();
    classification_accuracy(&p.backbone, &p.base_head, &store.rows(&samples), &labels)
}
