//! Finite-difference audit of the whole model's gradient.
//!
//! A tiny self-generated batch runs in eval mode with pinned cluster
//! labels (data-dependent labels would make the loss discontinuous under
//! parameter perturbations), then every parameter element is perturbed
//! both ways and the central difference is compared against the recorded
//! gradient. Element relative errors are aggregated per parameter group.

use rand::Rng;
use serde::Serialize;

use crate::data::{build_sequences, synth_generate, SynthSpec};
use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::rng::{stream_rng, Stream};
use crate::state_attention::ClusterModel;

use super::{bce_loss, Model, ModelConfig, SequenceForward};

/// Largest relative error accepted from any parameter element.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Upper bounds keeping the audit under a minute.
pub const GRADCHECK_MAX_DIM: usize = 16;
pub const GRADCHECK_MAX_LEN: usize = 16;

/// Worst relative error across one parameter's elements.
#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_err: f64,
    /// Elements where either gradient was large enough to compare.
    pub compared: usize,
}

/// Per-group results and the overall verdict.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn batch_loss(
    model: &Model,
    sequences: &[crate::data::Sequence],
    labels: &[Vec<usize>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let clusters = ClusterModel::unfitted(model.config.clusters);
    let mut idle_a = stream_rng(0, Stream::Dropout);
    let mut idle_b = stream_rng(0, Stream::Guess);
    let mut outputs: Vec<SequenceForward> = Vec::with_capacity(sequences.len());
    for (seq, pinned) in sequences.iter().zip(labels) {
        outputs.push(model.forward_sequence(
            &mut tape,
            &bound,
            seq,
            &clusters,
            false,
            &mut idle_a,
            &mut idle_b,
            Some(pinned),
        )?);
    }
    let (loss, _) = bce_loss(&mut tape, &outputs)?;
    tape.value(loss).item()
}

/// Audits every trainable parameter of the configured model against
/// central finite differences on a self-generated tiny batch.
///
/// Parameters are first jittered to a generic point: the difficulty
/// scalars initialize to exactly zero, where the gradients they gate are
/// structurally zero and errors would hide behind vacuous comparisons.
///
/// `corrupt_group` deliberately scales one group's recorded gradient by
/// 1.5 before comparison — a negative control proving the audit can fail.
pub fn gradcheck(config: &ModelConfig, corrupt_group: Option<&str>) -> Result<GradCheckReport> {
    config.validate()?;
    if config.embed_dim > GRADCHECK_MAX_DIM || config.seq_len > GRADCHECK_MAX_LEN {
        return Err(Error::Config(format!(
            "gradcheck requires a tiny configuration \
             (embed_dim <= {GRADCHECK_MAX_DIM}, seq_len <= {GRADCHECK_MAX_LEN}); \
             got embed_dim {} and seq_len {}",
            config.embed_dim, config.seq_len
        )));
    }
    if config.dropout > 0.0 {
        return Err(Error::Config(
            "gradcheck requires deterministic mode: set dropout to 0".into(),
        ));
    }

    let spec = SynthSpec {
        n_learners: config.batch_size,
        n_concepts: 4,
        n_exercises: 10,
        steps: config.seq_len,
        seed: config.seed,
        ..SynthSpec::default()
    };
    let records = synth_generate(&spec)?;
    let set = build_sequences(&records, config.seq_len)?;
    let mut model = Model::new(
        config,
        set.vocabulary.n_concepts(),
        set.vocabulary.n_exercises(),
    )?;

    let mut audit_rng = stream_rng(config.seed, Stream::GradCheck);
    for id in model.store.ids().collect::<Vec<_>>() {
        for v in model.store.value_mut(id).data_mut() {
            *v += audit_rng.gen_range(-0.05..0.05);
        }
    }
    let labels: Vec<Vec<usize>> = set
        .sequences
        .iter()
        .map(|s| (0..s.valid_len).map(|_| audit_rng.gen_range(0..config.clusters)).collect())
        .collect();

    // Recorded gradient from one reverse pass.
    model.store.zero_grads();
    {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let clusters = ClusterModel::unfitted(config.clusters);
        let mut idle_a = stream_rng(0, Stream::Dropout);
        let mut idle_b = stream_rng(0, Stream::Guess);
        let mut outputs = Vec::with_capacity(set.sequences.len());
        for (seq, pinned) in set.sequences.iter().zip(&labels) {
            outputs.push(model.forward_sequence(
                &mut tape,
                &bound,
                seq,
                &clusters,
                false,
                &mut idle_a,
                &mut idle_b,
                Some(pinned),
            )?);
        }
        let (loss, _) = bce_loss(&mut tape, &outputs)?;
        tape.backward(loss, &mut model.store)?;
    }

    if let Some(group) = corrupt_group {
        let id = model
            .store
            .find(group)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{group}`")))?;
        for g in model.store.grad_mut(id).data_mut() {
            *g *= 1.5;
        }
    }

    let ids: Vec<_> = model.store.ids().collect();
    let analytic: Vec<Vec<f64>> =
        ids.iter().map(|&id| model.store.grad(id).data().to_vec()).collect();

    let mut groups = Vec::new();
    let mut overall: f64 = 0.0;
    for (&id, grads) in ids.iter().zip(&analytic) {
        if !model.store.trainable(id) {
            continue;
        }
        let name = model.store.name(id).to_string();
        let mut max_rel: f64 = 0.0;
        let mut compared = 0usize;
        for i in 0..grads.len() {
            let original = model.store.value(id).data()[i];
            model.store.value_mut(id).data_mut()[i] = original + FD_STEP;
            let plus = batch_loss(&model, &set.sequences, &labels)?;
            model.store.value_mut(id).data_mut()[i] = original - FD_STEP;
            let minus = batch_loss(&model, &set.sequences, &labels)?;
            model.store.value_mut(id).data_mut()[i] = original;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let denom = grads[i].abs().max(fd.abs());
            if denom > 1e-6 {
                compared += 1;
                max_rel = max_rel.max((grads[i] - fd).abs() / denom);
            }
        }
        overall = overall.max(max_rel);
        groups.push(GroupReport { group: name, max_rel_err: max_rel, compared });
    }
    model.store.zero_grads();

    Ok(GradCheckReport { groups, max_rel_err: overall, passed: overall <= GRADCHECK_TOLERANCE })
}
