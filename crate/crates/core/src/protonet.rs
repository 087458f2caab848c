//! Prototypes, distance-based class log-probabilities and the episode loss.
//!
//! For a query `x` with true class `n` the per-query loss is
//! `-log p(y = n | x)` where `p` is the softmax of negative distances to the
//! class prototypes; equivalently `d(x, c_n) + log sum_k exp(-d(x, c_k))`.
//! Both forms are evaluated and required to agree.

use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::models::{Bound, Encoder};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Squared,
    Euclidean,
}

/// How per-query losses combine into the task loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    #[default]
    Sum,
    Mean,
}

/// Class centroids, row `n` is the mean support embedding of label `n`.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeSet<'t, T> {
    pub prototypes: Var<'t, T>,
}

/// Means of the support embeddings per label; every label in `0..way` must
/// occur equally often.
pub fn compute_prototypes<'t, T: Scalar>(support: Var<'t, T>, labels: &[usize], way: usize) -> Result<PrototypeSet<'t, T>> {
    let shape = support.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("compute_prototypes", &shape, &[labels.len()]));
    }
    if way == 0 || !labels.len().is_multiple_of(way) {
        return Err(Error::InvalidArgument(format!("{} support rows cannot split into {way} classes", labels.len())));
    }
    let shot = labels.len() / way;
    let mut counts = vec![0usize; way];
    for &l in labels {
        if l >= way {
            return Err(Error::LabelCount { label: l, found: 1, expected: 0 });
        }
        counts[l] += 1;
    }
    if let Some((label, &found)) = counts.iter().enumerate().find(|(_, &c)| c != shot) {
        return Err(Error::LabelCount { label, found, expected: shot });
    }
    let inv = T::one() / T::from_usize(shot).unwrap();
    let mut avg = vec![T::zero(); way * labels.len()];
    for (i, &l) in labels.iter().enumerate() {
        avg[l * labels.len() + i] = inv;
    }
    let avg = support.tape().constant(Tensor::new(vec![way, labels.len()], avg)?);
    Ok(PrototypeSet {
        prototypes: avg.matmul(support)?,
    })
}

/// Distances `[m, n]` between query rows and prototypes.
pub fn distances<'t, T: Scalar>(query: Var<'t, T>, protos: &PrototypeSet<'t, T>, metric: DistanceMetric) -> Result<Var<'t, T>> {
    let sq = query.sq_dist(protos.prototypes)?;
    match metric {
        DistanceMetric::Squared => Ok(sq),
        DistanceMetric::Euclidean => sq.sqrt(),
    }
}

/// `log_softmax(-d)` row-wise: `[m, e] -> [m, n]`.
pub fn class_log_probs<'t, T: Scalar>(query: Var<'t, T>, protos: &PrototypeSet<'t, T>, metric: DistanceMetric) -> Result<Var<'t, T>> {
    distances(query, protos, metric)?.neg()?.log_softmax()
}

/// Index of the smallest element, lowest index on ties.
pub fn argmin<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v < row[best] {
            best = i;
        }
    }
    best
}

/// Index of the largest element, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-episode loss summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLoss {
    /// `-log p(y | x)` for each query, in query order.
    pub per_query_losses: Vec<f64>,
    /// Sum (or mean, per [`LossReduction`]) of `per_query_losses`.
    pub task_loss: f64,
    pub accuracy: f64,
    /// Predicted episode label per query.
    pub predictions: Vec<usize>,
}

/// Tape handles of one prototypical forward pass.
#[derive(Debug)]
pub struct ProtoForward<'t, T> {
    pub distances: Var<'t, T>,
    pub log_probs: Var<'t, T>,
    /// Scalar task loss on the tape.
    pub task_loss: Var<'t, T>,
    pub summary: EpisodeLoss,
}

/// Prototypical loss on precomputed embeddings.
#[allow(clippy::too_many_arguments)]
pub fn prototypical_loss<'t, T: Scalar>(
    support: Var<'t, T>,
    support_labels: &[usize],
    query: Var<'t, T>,
    query_labels: &[usize],
    way: usize,
    metric: DistanceMetric,
    reduction: LossReduction,
) -> Result<ProtoForward<'t, T>> {
    let protos = compute_prototypes(support, support_labels, way)?;
    let dist = distances(query, &protos, metric)?;
    let log_probs = dist.neg()?.log_softmax()?;
    if query_labels.len() != query.shape()[0] || query_labels.iter().any(|&l| l >= way) {
        return Err(Error::InvalidArgument("one query label in 0..way per query row".into()));
    }
    let nll = log_probs.pick(query_labels)?.neg()?;
    let task_loss = match reduction {
        LossReduction::Sum => nll.sum()?,
        LossReduction::Mean => nll.mean()?,
    };

    let per_query_losses: Vec<f64> = nll.value().data().iter().map(|v| v.as_f64()).collect();
    let mut predictions = Vec::with_capacity(query_labels.len());
    {
        let d = dist.value();
        let lp = log_probs.value();
        for (m, &y) in query_labels.iter().enumerate() {
            let drow = &d.data()[m * way..(m + 1) * way];
            // distance form: d_y + log sum_k exp(-d_k), with max shift
            let dmin = drow.iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
            let lse = -dmin + drow.iter().map(|v| (dmin - v.as_f64()).exp()).sum::<f64>().ln();
            let distance_form = drow[y].as_f64() + lse;
            let nll_m = per_query_losses[m];
            let tol = T::epsilon().as_f64() * 1e4 * (1.0 + nll_m.abs());
            if (distance_form - nll_m).abs() > tol {
                return Err(Error::LossIdentity { nll: nll_m, distance_form });
            }
            let pred = argmin(drow);
            debug_assert_eq!(pred, argmax(&lp.data()[m * way..(m + 1) * way]));
            predictions.push(pred);
        }
    }
    let correct = predictions.iter().zip(query_labels).filter(|(p, y)| p == y).count();
    let summary = EpisodeLoss {
        task_loss: task_loss.item().as_f64(),
        per_query_losses,
        accuracy: correct as f64 / query_labels.len() as f64,
        predictions,
    };
    Ok(ProtoForward {
        distances: dist,
        log_probs,
        task_loss,
        summary,
    })
}

/// Embeddings of one episode: support rows first, then query rows.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeEmbeddings<'t, T> {
    pub images: Var<'t, T>,
    pub all: Var<'t, T>,
    pub support: Var<'t, T>,
    pub query: Var<'t, T>,
}

/// Encodes support and query images in one batch.
pub fn embed_episode<'t, T: Scalar>(
    tape: &'t Tape<T>,
    encoder: &Encoder<T>,
    params: &Bound<'t, T>,
    episode: &Episode<T>,
) -> Result<EpisodeEmbeddings<'t, T>> {
    let images = tape.constant(episode.stacked_images()?);
    let all = encoder.forward(params, images)?;
    let ns = episode.support.len();
    let nq = episode.query.len();
    let support = all.select_rows(&(0..ns).collect::<Vec<_>>())?;
    let query = all.select_rows(&(ns..ns + nq).collect::<Vec<_>>())?;
    Ok(EpisodeEmbeddings { images, all, support, query })
}

/// Loss of an episode under the encoder, on a tape owned by the caller.
pub fn episode_forward<'t, T: Scalar>(
    tape: &'t Tape<T>,
    encoder: &Encoder<T>,
    params: &Bound<'t, T>,
    episode: &Episode<T>,
    metric: DistanceMetric,
    reduction: LossReduction,
) -> Result<(EpisodeEmbeddings<'t, T>, ProtoForward<'t, T>)> {
    let emb = embed_episode(tape, encoder, params, episode)?;
    let fwd = prototypical_loss(
        emb.support,
        &episode.support_labels(),
        emb.query,
        &episode.query_labels(),
        episode.shape.way,
        metric,
        reduction,
    )?;
    Ok((emb, fwd))
}

/// Loss summary of an episode, without gradients.
pub fn episode_loss<T: Scalar>(
    episode: &Episode<T>,
    encoder: &Encoder<T>,
    metric: DistanceMetric,
    reduction: LossReduction,
) -> Result<EpisodeLoss> {
    let tape = Tape::new();
    let params = encoder.params().bind_frozen(&tape);
    let (_, fwd) = episode_forward(&tape, encoder, &params, episode, metric, reduction)?;
    Ok(fwd.summary)
}
