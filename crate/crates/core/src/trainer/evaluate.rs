use crate::data::{DatasetStore, EpisodeSpec};
use crate::error::{Error, Result};
use crate::model::MIN_NORM;
use crate::numcore::{norm, softmax, Tensor};

use super::finetune::FittedModel;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Class probabilities of one member for every row of `x`. A query whose
/// feature collapses to zero gets the uniform distribution.
pub fn member_probabilities(model: &FittedModel, x: &Tensor) -> Result<(Tensor, usize)> {
    let features = model.backbone.forward(x)?;
    let n = model.head.n_classes();
    let mut probs = Tensor::zeros(&[x.rows(), n]);
    let live: Vec<usize> = (0..features.rows())
        .filter(|&b| norm(features.row(b)) >= MIN_NORM)
        .collect();
    let degenerate = features.rows() - live.len();
    if !live.is_empty() {
        let logits = model.head.logits(&features.select_rows(&live))?;
        for (i, &b) in live.iter().enumerate() {
            probs.row_mut(b).copy_from_slice(&softmax(logits.row(i)));
        }
    }
    for b in 0..features.rows() {
        if !live.contains(&b) {
            probs.row_mut(b).fill(1.0 / n as f64);
        }
    }
    Ok((probs, degenerate))
}

/// Arithmetic mean of the members' probability rows.
pub fn average_probabilities(per_member: &[Tensor]) -> Result<Tensor> {
    let first = per_member
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble has no members".into()))?;
    let mut sum = Tensor::zeros(first.shape());
    for (m, p) in per_member.iter().enumerate() {
        if p.shape() != first.shape() {
            return Err(Error::Dimension(format!(
                "member {m} produced {:?}, member 0 produced {:?}",
                p.shape(),
                first.shape()
            )));
        }
        sum.add_scaled(p, 1.0)?;
    }
    let inv = 1.0 / per_member.len() as f64;
    sum.values_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeEval {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Query evaluations (summed over members) with a zero-norm feature.
    pub degenerate_queries: usize,
}

/// Averages member probabilities per query and scores the argmax against the
/// episode-local labels.
pub fn evaluate_episode_detailed(
    models: &[FittedModel],
    episode: &EpisodeSpec,
    store: &DatasetStore,
) -> Result<EpisodeEval> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no models to evaluate".into()));
    }
    if let Some((m, f)) = models
        .iter()
        .enumerate()
        .find(|(_, f)| f.head.n_classes() != episode.n_way())
    {
        return Err(Error::Dimension(format!(
            "member {m} has {} classes, episode has {}",
            f.head.n_classes(),
            episode.n_way()
        )));
    }
    let (query_idx, labels) = episode.query_set();
    let x = store.rows(&query_idx);
    let mut per_member = Vec::with_capacity(models.len());
    let mut degenerate = 0;
    for m in models {
        let (p, d) = member_probabilities(m, &x)?;
        per_member.push(p);
        degenerate += d;
    }
    let avg = average_probabilities(&per_member)?;
    let correct = (0..labels.len()).filter(|&b| argmax(avg.row(b)) == labels[b]).count();
    Ok(EpisodeEval {
        accuracy: correct as f64 / labels.len() as f64,
        correct,
        total: labels.len(),
        degenerate_queries: degenerate,
    })
}

pub fn evaluate_episode(models: &[FittedModel], episode: &EpisodeSpec, store: &DatasetStore) -> Result<f64> {
    Ok(evaluate_episode_detailed(models, episode, store)?.accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[1.0]), 0);
    }

    #[test]
    fn averaged_two_members() {
        let a = Tensor::from_rows(&[[0.6, 0.4]]).unwrap();
        let b = Tensor::from_rows(&[[0.2, 0.8]]).unwrap();
        let avg = average_probabilities(&[a, b]).unwrap();
        assert!((avg.get(0, 0) - 0.4).abs() < 1e-15);
        assert!((avg.get(0, 1) - 0.6).abs() < 1e-15);
        assert_eq!(argmax(avg.row(0)), 1);
    }

    #[test]
    fn member_shape_mismatch() {
        let a = Tensor::zeros(&[1, 2]);
        let b = Tensor::zeros(&[1, 3]);
        assert!(average_probabilities(&[a, b]).is_err());
        assert!(average_probabilities(&[]).is_err());
    }
}
