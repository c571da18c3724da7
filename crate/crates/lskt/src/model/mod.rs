//! The assembled predictor: feature embeddings, convolutional learning
//! state, cluster-masked attention, fusion, and the sigmoid response head,
//! plus the training loop, evaluation, checkpointing, and a
//! finite-difference audit of the whole computation graph.
//!
//! Sequences are processed on their valid prefixes only, so physical
//! padding never reaches an operation. The prediction for position `t+1`
//! reads the fused state at `t` and the exercise features of `t+1`;
//! position 1 has no prediction.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::embeddings::{
    embed_exercise, embed_interactions, sample_guess_draws, EmbeddingNodes, EmbeddingTables,
    IrtLevel,
};
use crate::error::{Error, Result};
use crate::lse::{lse_forward, LseNodes, LseParams};
use crate::metrics::MetricsReport;
use crate::numerics::{NodeId, ParamId, ParameterStore, Tape, Tensor};
use crate::rng::{stream_rng, Stream};
use crate::state_attention::{
    assign_labels, combined_attention, exercise_attention, knowledge_state, state_similarity,
    ClusterModel,
};

mod checkpoint;
mod gradcheck;
mod train;

pub use checkpoint::{history_to_csv, load_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use gradcheck::{gradcheck, GradCheckReport, GroupReport, FD_STEP, GRADCHECK_TOLERANCE};
pub use train::{train, EpochRow, EpochSnapshot, TrainOutcome};

/// Largest probability clamp applied before the loss logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Global gradient-norm ceiling applied before every optimizer step.
pub const GRAD_CLIP_NORM: f64 = 5.0;

/// Architectural variant: the full model or one component removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Every component enabled.
    #[serde(rename = "full")]
    Full,
    /// No convolutional learning state: attention reduces to the causal
    /// exercise softmax and the knowledge state feeds the head directly.
    #[serde(rename = "RLS")]
    Rls,
    /// Learning state kept for fusion, but attention ignores it: no
    /// clustering, exercise softmax only.
    #[serde(rename = "RLE")]
    Rle,
    /// Prediction from the learning state alone: no attention, no
    /// knowledge state, no fusion.
    #[serde(rename = "RKS")]
    Rks,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::Rls, Ablation::Rle, Ablation::Rks];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Ablation::Full),
            "rls" => Ok(Ablation::Rls),
            "rle" => Ok(Ablation::Rle),
            "rks" => Ok(Ablation::Rks),
            other => Err(Error::Config(format!(
                "unknown ablation variant `{other}`; expected full, RLS, RLE, or RKS"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Rls => "RLS",
            Ablation::Rle => "RLE",
            Ablation::Rks => "RKS",
        }
    }
}

/// Every knob of the model and its training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub seq_len: usize,
    pub kernel_size: usize,
    pub pool_capacity: usize,
    pub clusters: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub irt_level: IrtLevel,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 128,
            seq_len: 200,
            kernel_size: 3,
            pool_capacity: 16,
            clusters: 4,
            lr: 0.001,
            batch_size: 16,
            dropout: 0.2,
            epochs: 30,
            weight_decay: 0.01,
            seed: 0,
            irt_level: IrtLevel::ThreePl,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 5] = [
            ("embed_dim", self.embed_dim),
            ("kernel_size", self.kernel_size),
            ("pool_capacity", self.pool_capacity),
            ("clusters", self.clusters),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.seq_len < 2 {
            return Err(Error::Config(
                "seq_len must be at least 2 (one input, one target)".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !self.dropout.is_finite() || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// The wired model: parameter store plus the ids needed to rebuild the
/// graph on any tape.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub tables: EmbeddingTables,
    pub lse: LseParams,
    pub w7: ParamId,
    pub w8: ParamId,
    pub n_concepts: usize,
    pub n_exercises: usize,
}

impl Model {
    /// Registers every parameter (all variants share one layout, so
    /// checkpoints stay interchangeable and disabled components are
    /// observable through their zero gradients).
    pub fn new(config: &ModelConfig, n_concepts: usize, n_exercises: usize) -> Result<Self> {
        config.validate()?;
        if n_concepts < 2 || n_exercises < 2 {
            return Err(Error::Config(format!(
                "vocabulary must hold at least one real concept and exercise \
                 beyond padding, got {n_concepts} concept rows and {n_exercises} exercise rows"
            )));
        }
        let mut store = ParameterStore::new();
        let mut rng = stream_rng(config.seed, Stream::ParamInit);
        let d = config.embed_dim;
        let tables =
            EmbeddingTables::register(&mut store, n_concepts, n_exercises, d, &mut rng)?;
        let lse = LseParams::register(&mut store, d, config.kernel_size, &mut rng)?;
        let w7 = store.register_uniform("model.w7", vec![2 * d, d], 2 * d, &mut rng)?;
        let w8 = store.register_uniform("model.w8", vec![2 * d, 1], 2 * d, &mut rng)?;
        Ok(Model {
            config: config.clone(),
            store,
            tables,
            lse,
            w7,
            w8,
            n_concepts,
            n_exercises,
        })
    }

    /// Puts every parameter on the tape once per batch.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            embeddings: self.tables.bind(tape, &self.store),
            lse: self.lse.bind(tape, &self.store),
            w7: tape.param(&self.store, self.w7),
            w8: tape.param(&self.store, self.w8),
        }
    }

    /// Runs one sequence's valid prefix through the configured variant.
    ///
    /// `label_override` pins the cluster labels (used by the gradient
    /// audit, where data-dependent labels would make the loss
    /// discontinuous under parameter perturbations).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_sequence(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        seq: &Sequence,
        clusters: &ClusterModel,
        train_mode: bool,
        dropout_rng: &mut ChaCha8Rng,
        guess_rng: &mut ChaCha8Rng,
        label_override: Option<&[usize]>,
    ) -> Result<SequenceForward> {
        let lv = seq.valid_len;
        let total = seq.exercises.len();
        if seq.concepts.len() != total || seq.responses.len() != total {
            return Err(Error::Contract(format!(
                "ragged sequence for learner {}: {} exercises, {} concepts, {} responses",
                seq.learner,
                total,
                seq.concepts.len(),
                seq.responses.len()
            )));
        }
        if lv == 0 || lv > total {
            return Err(Error::Contract(format!(
                "valid length {lv} outside 1..={total} for learner {}",
                seq.learner
            )));
        }
        let exercises = &seq.exercises[..lv];
        let concepts = &seq.concepts[..lv];
        let responses = &seq.responses[..lv];
        let mut next_concepts: Vec<usize> = concepts[1..].to_vec();
        next_concepts.push(concepts[lv - 1]);

        let level = self.config.irt_level;
        let x = embed_exercise(tape, &bound.embeddings, level, concepts, exercises)?;
        let draws;
        let guess = if train_mode && level == IrtLevel::ThreePl {
            draws = sample_guess_draws(lv, guess_rng);
            Some(&draws[..])
        } else {
            None
        };
        let y = embed_interactions(
            tape,
            &bound.embeddings,
            level,
            concepts,
            exercises,
            responses,
            &next_concepts,
            guess,
        )?;

        let dropout = self.config.dropout;
        let mut learning_state = None;
        let mut knowledge = None;
        let mut attention = None;
        let mut state_branch = None;
        let mut labels = Vec::new();
        let fused = match self.config.ablation {
            Ablation::Full => {
                let yhat = lse_forward(tape, y, &bound.lse, dropout, train_mode, dropout_rng)?;
                labels = match label_override {
                    Some(pinned) => {
                        if pinned.len() < lv {
                            return Err(Error::Contract(format!(
                                "label override covers {} positions, sequence has {lv}",
                                pinned.len()
                            )));
                        }
                        pinned[..lv].to_vec()
                    }
                    None if clusters.fitted => {
                        assign_labels(tape.value(yhat), clusters, &vec![true; lv])?
                    }
                    // Cold start: one shared label, so the sparse mask
                    // keeps every causal slot.
                    None => vec![0; lv],
                };
                let beta = state_similarity(tape, yhat)?;
                let parts = combined_attention(tape, x, beta, &labels)?;
                let h = knowledge_state(tape, parts.combined, y)?;
                let cat = tape.concat_cols(h, yhat)?;
                let z = tape.matmul(cat, bound.w7)?;
                learning_state = Some(yhat);
                knowledge = Some(h);
                attention = Some(parts.combined);
                state_branch = Some(parts.state);
                z
            }
            Ablation::Rls => {
                let gamma = exercise_attention(tape, x)?;
                let h = knowledge_state(tape, gamma, y)?;
                knowledge = Some(h);
                attention = Some(gamma);
                h
            }
            Ablation::Rle => {
                let yhat = lse_forward(tape, y, &bound.lse, dropout, train_mode, dropout_rng)?;
                let gamma = exercise_attention(tape, x)?;
                let h = knowledge_state(tape, gamma, y)?;
                let cat = tape.concat_cols(h, yhat)?;
                let z = tape.matmul(cat, bound.w7)?;
                learning_state = Some(yhat);
                knowledge = Some(h);
                attention = Some(gamma);
                z
            }
            Ablation::Rks => {
                let yhat = lse_forward(tape, y, &bound.lse, dropout, train_mode, dropout_rng)?;
                learning_state = Some(yhat);
                yhat
            }
        };

        let (probs, targets) = if lv >= 2 {
            let fused_head = tape.slice_rows(fused, 0, lv - 1)?;
            let next_x = tape.slice_rows(x, 1, lv)?;
            let cat = tape.concat_cols(fused_head, next_x)?;
            let logits = tape.matmul(cat, bound.w8)?;
            let probs = tape.sigmoid(logits);
            let targets = responses[1..].iter().map(|&r| f64::from(r)).collect();
            (Some(probs), targets)
        } else {
            (None, Vec::new())
        };

        Ok(SequenceForward {
            probs,
            targets,
            exercise_features: x,
            learning_state,
            knowledge,
            fused,
            attention,
            state_branch,
            labels,
            valid_len: lv,
        })
    }
}

/// Parameter nodes shared by every sequence recorded on one tape.
#[derive(Debug)]
pub struct BoundModel {
    pub embeddings: EmbeddingNodes,
    pub lse: LseNodes,
    pub w7: NodeId,
    pub w8: NodeId,
}

/// Everything one sequence's forward pass produced. Node values live on
/// the tape that ran the pass.
#[derive(Debug)]
pub struct SequenceForward {
    /// `[valid_len - 1, 1]` probabilities for positions 2..; `None` for a
    /// single-interaction sequence, which has no target.
    pub probs: Option<NodeId>,
    /// Observed responses aligned to `probs`.
    pub targets: Vec<f64>,
    /// Exercise features `x`, `[valid_len, D]`.
    pub exercise_features: NodeId,
    /// Convolutional learning state, absent under the RLS variant.
    pub learning_state: Option<NodeId>,
    /// Attention-aggregated knowledge state, absent under RKS.
    pub knowledge: Option<NodeId>,
    /// Head input `z`, `[valid_len, D]`.
    pub fused: NodeId,
    /// Attention weights: two-branch (row mass 2) in the full model,
    /// exercise-only (row mass 1) under RLS/RLE, absent under RKS.
    pub attention: Option<NodeId>,
    /// The cluster-masked branch alone (full model only).
    pub state_branch: Option<NodeId>,
    /// Cluster labels per valid position (full model only).
    pub labels: Vec<usize>,
    pub valid_len: usize,
}

/// Mean binary cross-entropy over every target in the batch, as a tape
/// node. Returns the node and the target count.
pub fn bce_loss(tape: &mut Tape, outputs: &[SequenceForward]) -> Result<(NodeId, usize)> {
    let mut per_seq: Vec<NodeId> = Vec::new();
    let mut total = 0usize;
    for out in outputs {
        let Some(probs) = out.probs else { continue };
        let count = out.targets.len();
        total += count;
        let target = tape.constant(Tensor::new(vec![count, 1], out.targets.clone())?);
        let flipped: Vec<f64> = out.targets.iter().map(|t| 1.0 - t).collect();
        let target_flipped = tape.constant(Tensor::new(vec![count, 1], flipped)?);

        let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let ln_p = tape.ln(p);
        let neg_p = tape.scale(p, -1.0);
        let one_minus_p = tape.add_const(neg_p, 1.0);
        let ln_one_minus_p = tape.ln(one_minus_p);

        let hit = tape.mul(target, ln_p)?;
        let miss = tape.mul(target_flipped, ln_one_minus_p)?;
        let sum = tape.add(hit, miss)?;
        per_seq.push(tape.sum(sum));
    }
    if total == 0 {
        return Err(Error::Contract(
            "loss requires at least one valid target position".into(),
        ));
    }
    let mut acc = per_seq[0];
    for &node in &per_seq[1..] {
        acc = tape.add(acc, node)?;
    }
    Ok((tape.scale(acc, -1.0 / total as f64), total))
}

/// Deterministic forward pass over `sequences` in eval mode, returning
/// flattened probabilities and labels in sequence order.
pub fn predict_all(
    model: &Model,
    sequences: &[Sequence],
    clusters: &ClusterModel,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut idle_dropout = stream_rng(model.config.seed, Stream::Dropout);
    let mut idle_guess = stream_rng(model.config.seed, Stream::Guess);
    for chunk in sequences.chunks(model.config.batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        for seq in chunk {
            let out = model.forward_sequence(
                &mut tape,
                &bound,
                seq,
                clusters,
                false,
                &mut idle_dropout,
                &mut idle_guess,
                None,
            )?;
            if let Some(probs) = out.probs {
                scores.extend_from_slice(tape.value(probs).data());
                labels.extend(out.targets.iter().map(|&t| t as u8));
            }
        }
    }
    Ok((scores, labels))
}

/// Held-out metrics in eval mode against frozen cluster centers.
pub fn evaluate(
    model: &Model,
    sequences: &[Sequence],
    clusters: &ClusterModel,
) -> Result<MetricsReport> {
    let (scores, labels) = predict_all(model, sequences, clusters)?;
    MetricsReport::compute(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_sequences, synth_generate, SynthSpec};
    use crate::state_attention::StatePool;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 6,
            seq_len: 10,
            kernel_size: 3,
            pool_capacity: 4,
            clusters: 2,
            lr: 0.01,
            batch_size: 4,
            dropout: 0.0,
            epochs: 2,
            weight_decay: 0.0,
            seed: 7,
            irt_level: IrtLevel::ThreePl,
            ablation: Ablation::Full,
        }
    }

    pub(crate) fn tiny_dataset(learners: usize, steps: usize, seed: u64) -> crate::data::SequenceSet {
        let spec = SynthSpec {
            n_learners: learners,
            n_concepts: 3,
            n_exercises: 8,
            steps,
            seed,
            ..SynthSpec::default()
        };
        let records = synth_generate(&spec).unwrap();
        build_sequences(&records, 10).unwrap()
    }

    fn forward_once(
        model: &Model,
        seq: &Sequence,
        train_mode: bool,
    ) -> (Tape, SequenceForward) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut dr = stream_rng(3, Stream::Dropout);
        let mut gr = stream_rng(3, Stream::Guess);
        let out = model
            .forward_sequence(
                &mut tape,
                &bound,
                seq,
                &ClusterModel::unfitted(model.config.clusters),
                train_mode,
                &mut dr,
                &mut gr,
                None,
            )
            .unwrap();
        (tape, out)
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = ModelConfig::default();
        c.dropout = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.seq_len = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.lr = -0.1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.lr = 0.0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn ablation_names_round_trip_and_reject_unknown() {
        for v in Ablation::ALL {
            assert_eq!(Ablation::parse(v.name()).unwrap(), v);
        }
        assert_eq!(Ablation::parse("rks").unwrap(), Ablation::Rks);
        assert!(matches!(Ablation::parse("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_weights_predict_one_half() {
        let set = tiny_dataset(2, 8, 0);
        let mut model = Model::new(
            &tiny_config(),
            set.vocabulary.n_concepts(),
            set.vocabulary.n_exercises(),
        )
        .unwrap();
        let w8 = model.w8;
        for v in model.store.value_mut(w8).data_mut() {
            *v = 0.0;
        }
        let (tape, out) = forward_once(&model, &set.sequences[0], false);
        let probs = tape.value(out.probs.unwrap());
        assert_eq!(probs.rows(), set.sequences[0].valid_len - 1);
        assert!(probs.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn identity_fusion_rows_pass_knowledge_through() {
        let set = tiny_dataset(2, 8, 1);
        let mut model = Model::new(
            &tiny_config(),
            set.vocabulary.n_concepts(),
            set.vocabulary.n_exercises(),
        )
        .unwrap();
        let d = model.config.embed_dim;
        let w7 = model.w7;
        {
            let w = model.store.value_mut(w7);
            for r in 0..2 * d {
                for c in 0..d {
                    *w.at_mut(r, c) = f64::from(u8::from(r == c));
                }
            }
        }
        let (tape, out) = forward_once(&model, &set.sequences[0], false);
        let z = tape.value(out.fused);
        let h = tape.value(out.knowledge.unwrap());
        assert_eq!(z.data(), h.data());
    }

    #[test]
    fn single_interaction_sequence_emits_no_prediction() {
        let set = tiny_dataset(2, 8, 2);
        let model = Model::new(
            &tiny_config(),
            set.vocabulary.n_concepts(),
            set.vocabulary.n_exercises(),
        )
        .unwrap();
        let mut seq = set.sequences[0].clone();
        seq.valid_len = 1;
        let (_, out) = forward_once(&model, &seq, false);
        assert!(out.probs.is_none());
        assert!(out.targets.is_empty());
    }

    #[test]
    fn predictions_ignore_physical_padding() {
        let set = tiny_dataset(3, 6, 3);
        let model = Model::new(
            &tiny_config(),
            set.vocabulary.n_concepts(),
            set.vocabulary.n_exercises(),
        )
        .unwrap();
        let seq = &set.sequences[0];
        let mut padded = seq.clone();
        padded.exercises.extend([0; 5]);
        padded.concepts.extend([0; 5]);
        padded.responses.extend([0; 5]);

        let (tape_a, out_a) = forward_once(&model, seq, false);
        let (tape_b, out_b) = forward_once(&model, &padded, false);
        let a = tape_a.value(out_a.probs.unwrap());
        let b = tape_b.value(out_b.probs.unwrap());
        assert_eq!(a.data().len(), b.data().len());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn future_response_flips_leave_earlier_predictions_bitwise_unchanged() {
        let set = tiny_dataset(4, 9, 4);
        for ablation in Ablation::ALL {
            for level in IrtLevel::ALL {
                let config = ModelConfig {
                    ablation,
                    irt_level: level,
                    ..tiny_config()
                };
                let model = Model::new(
                    &config,
                    set.vocabulary.n_concepts(),
                    set.vocabulary.n_exercises(),
                )
                .unwrap();
                let seq = &set.sequences[0];
                let lv = seq.valid_len;
                assert!(lv >= 4);
                let flip_at = lv - 2;
                let mut flipped = seq.clone();
                flipped.responses[flip_at] ^= 1;

                let (tape_a, out_a) = forward_once(&model, seq, false);
                let (tape_b, out_b) = forward_once(&model, &flipped, false);
                let a = tape_a.value(out_a.probs.unwrap());
                let b = tape_b.value(out_b.probs.unwrap());
                // Prediction index i targets position i+1; flipping the
                // response at `flip_at` may only move targets after it.
                for i in 0..flip_at {
                    assert_eq!(
                        a.data()[i].to_bits(),
                        b.data()[i].to_bits(),
                        "{} {} leaked at index {i}",
                        ablation.name(),
                        level.name()
                    );
                }
                assert_ne!(
                    a.data()[lv - 2].to_bits(),
                    b.data()[lv - 2].to_bits(),
                    "{} {} ignored the flipped response entirely",
                    ablation.name(),
                    level.name()
                );
            }
        }
    }

    #[test]
    fn disabled_components_receive_exactly_zero_gradient() {
        let set = tiny_dataset(4, 8, 5);
        let expectations: [(Ablation, &[&str]); 3] = [
            (Ablation::Rls, &["lse.", "model.w7"]),
            (Ablation::Rle, &[]),
            (Ablation::Rks, &["model.w7"]),
        ];
        for (ablation, disabled_prefixes) in expectations {
            let config = ModelConfig { ablation, ..tiny_config() };
            let mut model = Model::new(
                &config,
                set.vocabulary.n_concepts(),
                set.vocabulary.n_exercises(),
            )
            .unwrap();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut dr = stream_rng(5, Stream::Dropout);
            let mut gr = stream_rng(5, Stream::Guess);
            let outs: Vec<SequenceForward> = set
                .sequences
                .iter()
                .take(4)
                .map(|s| {
                    model
                        .forward_sequence(
                            &mut tape,
                            &bound,
                            s,
                            &ClusterModel::unfitted(config.clusters),
                            true,
                            &mut dr,
                            &mut gr,
                            None,
                        )
                        .unwrap()
                })
                .collect();
            let (loss, _) = bce_loss(&mut tape, &outs).unwrap();
            tape.backward(loss, &mut model.store).unwrap();

            for id in model.store.ids().collect::<Vec<_>>() {
                let name = model.store.name(id).to_string();
                let grad_norm: f64 =
                    model.store.grad(id).data().iter().map(|g| g * g).sum::<f64>();
                let disabled = disabled_prefixes.iter().any(|p| name.starts_with(p));
                if disabled {
                    assert_eq!(
                        grad_norm,
                        0.0,
                        "{} expected zero gradient under {}",
                        name,
                        ablation.name()
                    );
                }
            }
            let w8_norm: f64 =
                model.store.grad(model.w8).data().iter().map(|g| g * g).sum::<f64>();
            assert!(w8_norm > 0.0, "head gradient vanished under {}", ablation.name());
        }
    }

    #[test]
    fn full_variant_attention_rows_sum_to_two() {
        let set = tiny_dataset(3, 9, 6);
        let model = Model::new(
            &tiny_config(),
            set.vocabulary.n_concepts(),
            set.vocabulary.n_exercises(),
        )
        .unwrap();
        let (tape, out) = forward_once(&model, &set.sequences[0], false);
        let gamma = tape.value(out.attention.unwrap());
        let lv = out.valid_len;
        for t in 0..lv {
            let mass: f64 = (0..lv).map(|tau| gamma.at(t, tau)).sum();
            assert!((mass - 2.0).abs() < 1e-9);
            for tau in t + 1..lv {
                assert_eq!(gamma.at(t, tau), 0.0);
            }
        }
    }

    #[test]
    fn bce_matches_elementwise_oracle() {
        use rand::Rng;
        let mut tape = Tape::new();
        let mut rng = stream_rng(11, Stream::GradCheck);
        let mut outs = Vec::new();
        let mut expected_terms = Vec::new();
        for _ in 0..3 {
            let count = rng.gen_range(2..6);
            let logits: Vec<f64> = (0..count).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let targets: Vec<f64> =
                (0..count).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
            let logit_node = tape.constant(Tensor::new(vec![count, 1], logits.clone()).unwrap());
            let probs = tape.sigmoid(logit_node);
            for (l, t) in logits.iter().zip(&targets) {
                let p = (1.0 / (1.0 + (-l).exp())).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                expected_terms.push(-(t * p.ln() + (1.0 - t) * (1.0 - p).ln()));
            }
            outs.push(SequenceForward {
                probs: Some(probs),
                targets,
                exercise_features: logit_node,
                learning_state: None,
                knowledge: None,
                fused: logit_node,
                attention: None,
                state_branch: None,
                labels: Vec::new(),
                valid_len: count + 1,
            });
        }
        let (loss, total) = bce_loss(&mut tape, &outs).unwrap();
        assert_eq!(total, expected_terms.len());
        let want = expected_terms.iter().sum::<f64>() / expected_terms.len() as f64;
        assert!((tape.value(loss).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn bce_hand_values() {
        let mut tape = Tape::new();
        let zero_logits = tape.constant(Tensor::zeros(vec![4, 1]));
        let probs = tape.sigmoid(zero_logits);
        let outs = vec![SequenceForward {
            probs: Some(probs),
            targets: vec![1.0, 0.0, 1.0, 0.0],
            exercise_features: zero_logits,
            learning_state: None,
            knowledge: None,
            fused: zero_logits,
            attention: None,
            state_branch: None,
            labels: Vec::new(),
            valid_len: 5,
        }];
        let (loss, _) = bce_loss(&mut tape, &outs).unwrap();
        assert!((tape.value(loss).item().unwrap() - 2.0f64.ln()).abs() < 1e-12);

        // A saturated correct prediction costs only the clamp epsilon.
        let mut tape = Tape::new();
        let hot = tape.constant(Tensor::full(vec![1, 1], 30.0));
        let probs = tape.sigmoid(hot);
        assert!((tape.value(probs).data()[0] - 1.0).abs() < 1e-9);
        let outs = vec![SequenceForward {
            probs: Some(probs),
            targets: vec![1.0],
            exercise_features: hot,
            learning_state: None,
            knowledge: None,
            fused: hot,
            attention: None,
            state_branch: None,
            labels: Vec::new(),
            valid_len: 2,
        }];
        let (loss, _) = bce_loss(&mut tape, &outs).unwrap();
        let value = tape.value(loss).item().unwrap();
        assert!(value > 0.0 && value < 2e-7);
    }

    #[test]
    fn bce_requires_targets() {
        let mut tape = Tape::new();
        let node = tape.constant(Tensor::zeros(vec![1, 1]));
        let outs = vec![SequenceForward {
            probs: None,
            targets: Vec::new(),
            exercise_features: node,
            learning_state: None,
            knowledge: None,
            fused: node,
            attention: None,
            state_branch: None,
            labels: Vec::new(),
            valid_len: 1,
        }];
        assert!(matches!(bce_loss(&mut tape, &outs), Err(Error::Contract(_))));
    }

    #[test]
    fn fitted_clusters_change_the_state_mask() {
        let set = tiny_dataset(2, 9, 8);
        let model = Model::new(
            &tiny_config(),
            set.vocabulary.n_concepts(),
            set.vocabulary.n_exercises(),
        )
        .unwrap();
        let seq = &set.sequences[0];

        // Find this sequence's learning states, then build centers that
        // split the positions into two labels.
        let (tape, out) = forward_once(&model, seq, false);
        let states = tape.value(out.learning_state.unwrap()).clone();
        let first: Vec<f64> = (0..states.cols()).map(|c| states.at(0, c)).collect();
        let last: Vec<f64> =
            (0..states.cols()).map(|c| states.at(states.rows() - 1, c)).collect();
        let clusters = ClusterModel { centers: vec![first, last], n: 2, fitted: true };

        let mut tape2 = Tape::new();
        let bound = model.bind(&mut tape2);
        let mut dr = stream_rng(3, Stream::Dropout);
        let mut gr = stream_rng(3, Stream::Guess);
        let out2 = model
            .forward_sequence(&mut tape2, &bound, seq, &clusters, false, &mut dr, &mut gr, None)
            .unwrap();
        assert_eq!(out2.labels.len(), seq.valid_len);
        assert!(out2.labels.iter().any(|&l| l == 0));
        assert!(out2.labels.iter().any(|&l| l == 1));
        let expected = assign_labels(&states, &clusters, &vec![true; seq.valid_len]).unwrap();
        assert_eq!(out2.labels, expected);
    }

    #[test]
    fn evaluate_is_deterministic_and_batch_size_invariant() {
        let set = tiny_dataset(6, 9, 9);
        let config = tiny_config();
        let model = Model::new(
            &config,
            set.vocabulary.n_concepts(),
            set.vocabulary.n_exercises(),
        )
        .unwrap();
        let clusters = ClusterModel::unfitted(config.clusters);
        let (a, _) = predict_all(&model, &set.sequences, &clusters).unwrap();
        let (b, _) = predict_all(&model, &set.sequences, &clusters).unwrap();
        assert_eq!(a, b);

        let mut narrow = Model::new(
            &ModelConfig { batch_size: 1, ..config },
            set.vocabulary.n_concepts(),
            set.vocabulary.n_exercises(),
        )
        .unwrap();
        // Same parameters, different batching.
        for id in model.store.ids().collect::<Vec<_>>() {
            let src = model.store.value(id).clone();
            *narrow.store.value_mut(id) = src;
        }
        let (c, _) = predict_all(&narrow, &set.sequences, &clusters).unwrap();
        for (x, y) in a.iter().zip(&c) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn pool_survives_round_trip_through_update() {
        // Guards the train-loop assumption that pooled tensors are plain
        // values: mutating the store later must not affect them.
        let mut pool = StatePool::new(2);
        let t = Tensor::full(vec![2, 2], 1.5);
        pool.update(vec![t]);
        assert_eq!(pool.total_points(), 2);
    }
}
