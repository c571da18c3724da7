//! Mini-batch training loop.
//!
//! Per batch: refit cluster centers from the pool (full variant only),
//! forward every sequence onto one tape, take the mean binary
//! cross-entropy, backpropagate, clip the global gradient norm, step the
//! optimizer, and only then push the batch's learning states into the
//! pool — so a batch can never influence its own centers. Held-out
//! metrics run once per epoch against the centers frozen by the last
//! batch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::numerics::{AdamW, ParameterStore, Tape};
use crate::rng::{stream_rng, Stream};
use crate::state_attention::{kmeans_fit, ClusterModel, StatePool, LLOYD_ITERATIONS};

use super::{bce_loss, evaluate, Ablation, Model, SequenceForward, GRAD_CLIP_NORM};

/// One epoch's training loss and held-out metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_acc: f64,
    pub val_rmse: f64,
    pub val_mae: f64,
}

/// Borrowed view of everything worth persisting at an epoch boundary.
pub struct EpochSnapshot<'a> {
    pub model: &'a Model,
    pub optimizer: &'a AdamW,
    pub pool: &'a StatePool,
    pub clusters: &'a ClusterModel,
    pub history: &'a [EpochRow],
}

/// Final state of a completed run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRow>,
    pub final_metrics: MetricsReport,
    pub optimizer: AdamW,
    pub pool: StatePool,
    pub clusters: ClusterModel,
}

fn norm_summary(store: &ParameterStore) -> String {
    let mut value_sq = 0.0;
    for id in store.ids() {
        value_sq += store.value(id).data().iter().map(|v| v * v).sum::<f64>();
    }
    format!(
        "parameter norm {:.6e}, gradient norm {:.6e}",
        value_sq.sqrt(),
        store.grad_global_norm()
    )
}

/// Trains `model` in place, calling `on_epoch` after each epoch's
/// validation pass (checkpoint writers hook in here).
pub fn train<F>(
    model: &mut Model,
    train_seqs: &[Sequence],
    val_seqs: &[Sequence],
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochSnapshot<'_>) -> Result<()>,
{
    if train_seqs.is_empty() {
        return Err(Error::Data("no training sequences".into()));
    }
    if val_seqs.is_empty() {
        return Err(Error::Data("no held-out sequences".into()));
    }
    let config = model.config.clone();
    let clustered = config.ablation == Ablation::Full;

    let mut shuffle_rng = stream_rng(config.seed, Stream::Shuffle);
    let mut dropout_rng = stream_rng(config.seed, Stream::Dropout);
    let mut guess_rng = stream_rng(config.seed, Stream::Guess);
    let mut kmeans_rng = stream_rng(config.seed, Stream::KMeans);

    let mut optimizer = AdamW::new(&model.store, config.lr, config.weight_decay);
    let mut pool = StatePool::new(config.pool_capacity);
    let mut clusters = ClusterModel::unfitted(config.clusters);
    let mut history: Vec<EpochRow> = Vec::new();
    let mut final_metrics = None;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_weighted = 0.0;
        let mut target_total = 0usize;
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            if clustered {
                clusters = kmeans_fit(&pool, config.clusters, LLOYD_ITERATIONS, &mut kmeans_rng)?;
            }
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut outputs: Vec<SequenceForward> = Vec::with_capacity(chunk.len());
            for &index in chunk {
                outputs.push(model.forward_sequence(
                    &mut tape,
                    &bound,
                    &train_seqs[index],
                    &clusters,
                    true,
                    &mut dropout_rng,
                    &mut guess_rng,
                    None,
                )?);
            }
            let (loss, targets) = bce_loss(&mut tape, &outputs)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::NumericalAbort {
                    epoch,
                    batch: batch_index,
                    detail: format!("loss {loss_value}; {}", norm_summary(&model.store)),
                });
            }
            tape.backward(loss, &mut model.store)?;
            model.store.clip_grad_norm(GRAD_CLIP_NORM);
            optimizer.step(&mut model.store)?;
            model.store.zero_grads();

            if clustered {
                let states: Vec<_> = outputs
                    .iter()
                    .filter_map(|out| out.learning_state)
                    .map(|node| tape.value(node).clone())
                    .collect();
                pool.update(states);
            }
            loss_weighted += loss_value * targets as f64;
            target_total += targets;
        }

        let train_loss = loss_weighted / target_total as f64;
        let report = evaluate(model, val_seqs, &clusters)?;
        history.push(EpochRow {
            epoch,
            train_loss,
            val_auc: report.auc,
            val_acc: report.acc,
            val_rmse: report.rmse,
            val_mae: report.mae,
        });
        final_metrics = Some(report);
        on_epoch(&EpochSnapshot {
            model,
            optimizer: &optimizer,
            pool: &pool,
            clusters: &clusters,
            history: &history,
        })?;
    }

    Ok(TrainOutcome {
        history,
        final_metrics: final_metrics.expect("at least one epoch"),
        optimizer,
        pool,
        clusters,
    })
}
