//! Exercise and interaction feature construction.
//!
//! Four schemes of increasing psychometric detail:
//!
//! - `NI`: raw concept embeddings, no item parameters;
//! - `1PL`: a per-exercise difficulty scalar scales the concept-variation
//!   embedding before a learned projection;
//! - `2PL`: adds a per-exercise latent vector (discrimination) that, with
//!   the difficulty, modulates the variation embedding elementwise;
//! - `3PL`: additionally perturbs interactions with a random guessing term
//!   during training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{NodeId, ParamId, ParameterStore, Tape};

/// Feature scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IrtLevel {
    #[serde(rename = "NI")]
    Ni,
    #[serde(rename = "1PL")]
    OnePl,
    #[serde(rename = "2PL")]
    TwoPl,
    #[serde(rename = "3PL")]
    ThreePl,
}

impl IrtLevel {
    pub const ALL: [IrtLevel; 4] = [IrtLevel::Ni, IrtLevel::OnePl, IrtLevel::TwoPl, IrtLevel::ThreePl];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NI" => Ok(IrtLevel::Ni),
            "1PL" => Ok(IrtLevel::OnePl),
            "2PL" => Ok(IrtLevel::TwoPl),
            "3PL" => Ok(IrtLevel::ThreePl),
            other => Err(Error::Config(format!(
                "unknown irt_level {other:?} (expected NI, 1PL, 2PL, or 3PL)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            IrtLevel::Ni => "NI",
            IrtLevel::OnePl => "1PL",
            IrtLevel::TwoPl => "2PL",
            IrtLevel::ThreePl => "3PL",
        }
    }
}

/// Handles to every embedding parameter. All tables exist regardless of the
/// active scheme, so disabled ones verifiably receive zero gradient.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub concept: ParamId,
    pub concept_var: ParamId,
    pub response: ParamId,
    pub response_var: ParamId,
    pub guess_response: ParamId,
    pub difficulty: ParamId,
    pub latent: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub w4: ParamId,
    pub w5: ParamId,
    pub w6: ParamId,
    pub dim: usize,
}

impl EmbeddingTables {
    /// Registers all tables. `n_concepts` and `n_exercises` include the
    /// padding row at index 0. Difficulty scalars start at zero; everything
    /// else is fan-in-scaled uniform.
    pub fn register(
        store: &mut ParameterStore,
        n_concepts: usize,
        n_exercises: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        use crate::numerics::Tensor;
        let d = dim;
        Ok(EmbeddingTables {
            concept: store.register_uniform("embed.concept", vec![n_concepts, d], d, rng)?,
            concept_var: store.register_uniform("embed.concept_var", vec![n_concepts, d], d, rng)?,
            response: store.register_uniform("embed.response", vec![2, d], d, rng)?,
            response_var: store.register_uniform("embed.response_var", vec![2, d], d, rng)?,
            guess_response: store.register_uniform("embed.guess_response", vec![2, d], d, rng)?,
            difficulty: store.register("embed.difficulty", Tensor::zeros(vec![n_exercises, 1]), true)?,
            latent: store.register_uniform("embed.latent", vec![n_exercises, d], d, rng)?,
            w1: store.register_uniform("embed.w1", vec![2 * d, d], 2 * d, rng)?,
            w2: store.register_uniform("embed.w2", vec![2 * d, d], 2 * d, rng)?,
            w3: store.register_uniform("embed.w3", vec![d, d], d, rng)?,
            w4: store.register_uniform("embed.w4", vec![2 * d, d], 2 * d, rng)?,
            w5: store.register_uniform("embed.w5", vec![2 * d, d], 2 * d, rng)?,
            w6: store.register_uniform("embed.w6", vec![2 * d, d], 2 * d, rng)?,
            dim,
        })
    }

    /// Puts every table on a tape once; the returned nodes are shared by all
    /// sequences recorded on that tape.
    pub fn bind(&self, tape: &mut Tape, store: &ParameterStore) -> EmbeddingNodes {
        EmbeddingNodes {
            concept: tape.param(store, self.concept),
            concept_var: tape.param(store, self.concept_var),
            response: tape.param(store, self.response),
            response_var: tape.param(store, self.response_var),
            guess_response: tape.param(store, self.guess_response),
            difficulty: tape.param(store, self.difficulty),
            latent: tape.param(store, self.latent),
            w1: tape.param(store, self.w1),
            w2: tape.param(store, self.w2),
            w3: tape.param(store, self.w3),
            w4: tape.param(store, self.w4),
            w5: tape.param(store, self.w5),
            w6: tape.param(store, self.w6),
            dim: self.dim,
        }
    }
}

/// Tape nodes for one forward pass over the tables.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingNodes {
    pub concept: NodeId,
    pub concept_var: NodeId,
    pub response: NodeId,
    pub response_var: NodeId,
    pub guess_response: NodeId,
    pub difficulty: NodeId,
    pub latent: NodeId,
    pub w1: NodeId,
    pub w2: NodeId,
    pub w3: NodeId,
    pub w4: NodeId,
    pub w5: NodeId,
    pub w6: NodeId,
    pub dim: usize,
}

/// Outcome of the per-position guessing coins: whether the guess term fires
/// and, if so, which response row it injects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuessDraw {
    pub apply: bool,
    pub response: usize,
}

/// Two independent fair coins per position: no guess with probability 1/2,
/// otherwise a uniformly random response row.
pub fn sample_guess_draws(len: usize, rng: &mut ChaCha8Rng) -> Vec<GuessDraw> {
    (0..len)
        .map(|_| {
            let apply = rng.gen_bool(0.5);
            let response = usize::from(rng.gen_bool(0.5));
            GuessDraw { apply, response }
        })
        .collect()
}

fn responses_to_indices(responses: &[u8]) -> Result<Vec<usize>> {
    responses
        .iter()
        .map(|&r| {
            if r > 1 {
                Err(Error::Contract(format!("response must be 0 or 1, got {r}")))
            } else {
                Ok(r as usize)
            }
        })
        .collect()
}

/// Difficulty column for the given exercises, broadcast to `[len, D]`.
fn difficulty_wide(tape: &mut Tape, nodes: &EmbeddingNodes, exercises: &[usize]) -> Result<NodeId> {
    let alpha = tape.gather_rows(nodes.difficulty, exercises)?;
    tape.repeat_cols(alpha, nodes.dim)
}

/// `[alpha ∥ W3·d]` modulation input rows for the given exercises.
fn modulation_input(
    tape: &mut Tape,
    nodes: &EmbeddingNodes,
    exercises: &[usize],
) -> Result<NodeId> {
    let alpha_wide = difficulty_wide(tape, nodes, exercises)?;
    let d_rows = tape.gather_rows(nodes.latent, exercises)?;
    let w3_t = tape.transpose(nodes.w3)?;
    let d_proj = tape.matmul(d_rows, w3_t)?;
    tape.concat_cols(alpha_wide, d_proj)
}

/// Exercise features `x` for one sequence, `[len, D]`.
///
/// - NI: `x = c`
/// - 1PL: `x = [c ∥ alpha·c'] W1`
/// - 2PL/3PL: `x = c + ([alpha ∥ W3·d] W4) .* c'`
pub fn embed_exercise(
    tape: &mut Tape,
    nodes: &EmbeddingNodes,
    level: IrtLevel,
    concepts: &[usize],
    exercises: &[usize],
) -> Result<NodeId> {
    if concepts.len() != exercises.len() {
        return Err(Error::Contract(format!(
            "concept/exercise sequences differ in length: {} vs {}",
            concepts.len(),
            exercises.len()
        )));
    }
    let c = tape.gather_rows(nodes.concept, concepts)?;
    match level {
        IrtLevel::Ni => Ok(c),
        IrtLevel::OnePl => {
            let c_var = tape.gather_rows(nodes.concept_var, concepts)?;
            let alpha_wide = difficulty_wide(tape, nodes, exercises)?;
            let scaled_var = tape.mul(alpha_wide, c_var)?;
            let cat = tape.concat_cols(c, scaled_var)?;
            tape.matmul(cat, nodes.w1)
        }
        IrtLevel::TwoPl | IrtLevel::ThreePl => {
            let c_var = tape.gather_rows(nodes.concept_var, concepts)?;
            let mod_in = modulation_input(tape, nodes, exercises)?;
            let modulation = tape.matmul(mod_in, nodes.w4)?;
            let scaled_var = tape.mul(modulation, c_var)?;
            tape.add(c, scaled_var)
        }
    }
}

/// Interaction features `y` for one sequence, `[len, D]`.
///
/// All IRT levels build on `g = c + r` and `g' = c' + r'`:
///
/// - NI: `y = c + r`
/// - 1PL: `y = [g ∥ alpha·g'] W2`
/// - 2PL: `y = g + ([alpha ∥ W3·d] W5) .* g'`
/// - 3PL: `y = f + g + ([alpha ∥ W3·d] W6) .* g'` where
///   `f = c_next + G` and `G` is the sampled guess-response row (zero when
///   the guess coin says no, and always zero in eval mode).
///
/// `next_concepts[t]` is the concept answered at `t+1`; the caller supplies
/// the current concept again at the final position, where no successor
/// exists. `guess` must be `Some` exactly in train mode at the 3PL level.
pub fn embed_interactions(
    tape: &mut Tape,
    nodes: &EmbeddingNodes,
    level: IrtLevel,
    concepts: &[usize],
    exercises: &[usize],
    responses: &[u8],
    next_concepts: &[usize],
    guess: Option<&[GuessDraw]>,
) -> Result<NodeId> {
    let len = concepts.len();
    if exercises.len() != len || responses.len() != len {
        return Err(Error::Contract(format!(
            "interaction sequences differ in length: {len} concepts, {} exercises, {} responses",
            exercises.len(),
            responses.len()
        )));
    }
    let response_ix = responses_to_indices(responses)?;
    let c = tape.gather_rows(nodes.concept, concepts)?;
    let r = tape.gather_rows(nodes.response, &response_ix)?;

    if level == IrtLevel::Ni {
        return tape.add(c, r);
    }

    let c_var = tape.gather_rows(nodes.concept_var, concepts)?;
    let r_var = tape.gather_rows(nodes.response_var, &response_ix)?;
    let g = tape.add(c, r)?;
    let g_var = tape.add(c_var, r_var)?;

    match level {
        IrtLevel::Ni => unreachable!("handled above"),
        IrtLevel::OnePl => {
            let alpha_wide = difficulty_wide(tape, nodes, exercises)?;
            let scaled = tape.mul(alpha_wide, g_var)?;
            let cat = tape.concat_cols(g, scaled)?;
            tape.matmul(cat, nodes.w2)
        }
        IrtLevel::TwoPl => {
            let mod_in = modulation_input(tape, nodes, exercises)?;
            let modulation = tape.matmul(mod_in, nodes.w5)?;
            let scaled = tape.mul(modulation, g_var)?;
            tape.add(g, scaled)
        }
        IrtLevel::ThreePl => {
            if next_concepts.len() != len {
                return Err(Error::Contract(format!(
                    "next-concept sequence has length {}, expected {len}",
                    next_concepts.len()
                )));
            }
            let mod_in = modulation_input(tape, nodes, exercises)?;
            let modulation = tape.matmul(mod_in, nodes.w6)?;
            let scaled = tape.mul(modulation, g_var)?;
            let base = tape.add(g, scaled)?;

            let mut f = tape.gather_rows(nodes.concept, next_concepts)?;
            if let Some(draws) = guess {
                if draws.len() != len {
                    return Err(Error::Contract(format!(
                        "guess draws have length {}, expected {len}",
                        draws.len()
                    )));
                }
                use crate::numerics::Tensor;
                let mask = Tensor::new(
                    vec![len, 1],
                    draws.iter().map(|d| f64::from(u8::from(d.apply))).collect(),
                )?;
                let rows: Vec<usize> = draws.iter().map(|d| d.response).collect();
                let mask_node = tape.constant(mask);
                let mask_wide = tape.repeat_cols(mask_node, nodes.dim)?;
                let picked = tape.gather_rows(nodes.guess_response, &rows)?;
                let g_term = tape.mul(mask_wide, picked)?;
                f = tape.add(f, g_term)?;
            }
            tape.add(f, base)
        }
    }
}
