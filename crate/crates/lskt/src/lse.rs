//! Learning State Extraction: three causal residual blocks at dilations
//! 1, 2, and 4 read the interaction sequence at increasing receptive
//! fields; their outputs are concatenated and projected back to `D`
//! channels. Everything is strictly causal: position `t` of the output
//! never depends on inputs after `t`.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{NodeId, ParamId, ParameterStore, Tape};

pub const DILATIONS: [usize; 3] = [1, 2, 4];

/// One block's parameters: a weight-normed conv kernel (direction plus
/// scalar magnitude) at a fixed dilation.
#[derive(Debug, Clone, Copy)]
pub struct ResidualBlockParams {
    pub kernel_dir: ParamId,
    pub kernel_mag: ParamId,
    pub dilation: usize,
}

/// All learning-state parameters: three blocks, the two inter-block
/// normalizations, and the fusion projection `[3D, D]`.
#[derive(Debug, Clone)]
pub struct LseParams {
    pub blocks: Vec<ResidualBlockParams>,
    pub norm_gains: Vec<ParamId>,
    pub norm_biases: Vec<ParamId>,
    pub fusion: ParamId,
    pub dim: usize,
    pub kernel_size: usize,
}

impl LseParams {
    /// Registers all parameters. Kernel directions are fan-in-scaled
    /// uniform with magnitude initialized to the direction's norm, so the
    /// effective kernel starts equal to its direction; norm gains start at
    /// 1 and biases at 0.
    pub fn register(
        store: &mut ParameterStore,
        dim: usize,
        kernel_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        use crate::numerics::Tensor;
        let mut blocks = Vec::new();
        for (i, dilation) in DILATIONS.into_iter().enumerate() {
            let dir_name = format!("lse.block{}.kernel_dir", i + 1);
            let kernel_dir = store.register_uniform(
                &dir_name,
                vec![kernel_size * dim, dim],
                kernel_size * dim,
                rng,
            )?;
            let norm = store
                .value(kernel_dir)
                .data()
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let kernel_mag = store.register(
                &format!("lse.block{}.kernel_mag", i + 1),
                Tensor::scalar(norm),
                true,
            )?;
            blocks.push(ResidualBlockParams { kernel_dir, kernel_mag, dilation });
        }
        let mut norm_gains = Vec::new();
        let mut norm_biases = Vec::new();
        for i in 1..=2 {
            norm_gains.push(store.register(
                &format!("lse.norm{i}.gain"),
                Tensor::full(vec![dim], 1.0),
                true,
            )?);
            norm_biases.push(store.register(
                &format!("lse.norm{i}.bias"),
                Tensor::zeros(vec![dim]),
                true,
            )?);
        }
        let fusion = store.register_uniform("lse.fusion", vec![3 * dim, dim], 3 * dim, rng)?;
        Ok(LseParams { blocks, norm_gains, norm_biases, fusion, dim, kernel_size })
    }

    /// Every parameter id, for gradient-flow assertions.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            ids.push(b.kernel_dir);
            ids.push(b.kernel_mag);
        }
        ids.extend(&self.norm_gains);
        ids.extend(&self.norm_biases);
        ids.push(self.fusion);
        ids
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParameterStore) -> LseNodes {
        LseNodes {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockNodes {
                    kernel_dir: tape.param(store, b.kernel_dir),
                    kernel_mag: tape.param(store, b.kernel_mag),
                    dilation: b.dilation,
                })
                .collect(),
            norm_gains: self.norm_gains.iter().map(|&id| tape.param(store, id)).collect(),
            norm_biases: self.norm_biases.iter().map(|&id| tape.param(store, id)).collect(),
            fusion: tape.param(store, self.fusion),
        }
    }
}

/// Tape bindings for one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub kernel_dir: NodeId,
    pub kernel_mag: NodeId,
    pub dilation: usize,
}

/// Tape bindings for the whole module.
#[derive(Debug, Clone)]
pub struct LseNodes {
    pub blocks: Vec<BlockNodes>,
    pub norm_gains: Vec<NodeId>,
    pub norm_biases: Vec<NodeId>,
    pub fusion: NodeId,
}

/// `out = y + dropout(relu(causal_conv(y, weight_norm(kernel), dilation)))`.
pub fn residual_block(
    tape: &mut Tape,
    y: NodeId,
    block: &BlockNodes,
    dropout_rate: f64,
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let kernel = tape.weight_norm(block.kernel_dir, block.kernel_mag)?;
    let conv = tape.causal_conv1d(y, kernel, block.dilation)?;
    let active = tape.relu(conv);
    let dropped = tape.dropout(active, dropout_rate, train_mode, rng)?;
    tape.add(y, dropped)
}

/// Full extraction pass: block 1, layer norm, block 2, layer norm, block 3,
/// then fusion of the three block outputs down to `D` channels.
pub fn lse_forward(
    tape: &mut Tape,
    y: NodeId,
    nodes: &LseNodes,
    dropout_rate: f64,
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let b1 = residual_block(tape, y, &nodes.blocks[0], dropout_rate, train_mode, rng)?;
    let n1 = tape.layer_norm(b1, nodes.norm_gains[0], nodes.norm_biases[0])?;
    let b2 = residual_block(tape, n1, &nodes.blocks[1], dropout_rate, train_mode, rng)?;
    let n2 = tape.layer_norm(b2, nodes.norm_gains[1], nodes.norm_biases[1])?;
    let b3 = residual_block(tape, n2, &nodes.blocks[2], dropout_rate, train_mode, rng)?;
    let b12 = tape.concat_cols(b1, b2)?;
    let all = tape.concat_cols(b12, b3)?;
    tape.matmul(all, nodes.fusion)
}
