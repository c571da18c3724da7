//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every forward operation appends one node holding its output value and
//! enough saved state to run its gradient rule. The node vector is in
//! execution order, so a single reverse sweep from the loss visits each
//! node exactly once and accumulates leaf gradients into the
//! [`ParameterStore`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParameterStore};
use crate::numerics::tensor::Tensor;

/// Handle to one node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatCols(NodeId, NodeId),
    GatherRows { src: NodeId, indices: Vec<usize> },
    SliceRows { src: NodeId, start: usize },
    RepeatCols { src: NodeId },
    Sum(NodeId),
    Ln(NodeId),
    Clamp { src: NodeId, lo: f64, hi: f64 },
    Relu(NodeId),
    Sigmoid(NodeId),
    Dropout { src: NodeId, scale: Vec<f64> },
    MaskedSoftmax { src: NodeId, mask: Vec<bool> },
    CausalConv1d { input: NodeId, kernel: NodeId, dilation: usize },
    LayerNorm { src: NodeId, gain: NodeId, bias: NodeId, mean: Vec<f64>, inv_std: Vec<f64> },
    WeightNorm { direction: NodeId, magnitude: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Recorded computation graph. Build it forward with the methods below,
/// then call [`Tape::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const WEIGHT_NORM_EPS_SQ: f64 = 1e-24;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input: gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf { param: None })
    }

    /// Trainable input: copies the parameter's current value onto the tape
    /// and routes its gradient back into the store on `backward`.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> NodeId {
        let value = store.value(id).clone();
        let needs_grad = store.trainable(id);
        self.push(value, needs_grad, Op::Leaf { param: Some(id) })
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add(a, b)))
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Mul(a, b)))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, needs, Op::Scale(a, factor))
    }

    /// Adds a constant to every element.
    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, needs, Op::AddConst(a))
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        let (da, db) = (va.data(), vb.data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Matmul(a, b)))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::Contract(format!(
                "transpose needs a rank-2 tensor, got {:?}",
                va.shape()
            )));
        }
        let (r, c) = (va.rows(), va.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::Transpose(a)))
    }

    /// Concatenation along the last axis. Both inputs must share rank and
    /// leading dimension (two vectors, or two matrices with equal rows).
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: "concat_cols",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        let value = match (va.rank(), vb.rank()) {
            (1, 1) => {
                let mut data = va.data().to_vec();
                data.extend_from_slice(vb.data());
                Tensor::vector(data)
            }
            (2, 2) => {
                if va.rows() != vb.rows() {
                    return Err(mismatch());
                }
                let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
                let mut data = Vec::with_capacity(r * (ca + cb));
                for i in 0..r {
                    data.extend_from_slice(&va.data()[i * ca..(i + 1) * ca]);
                    data.extend_from_slice(&vb.data()[i * cb..(i + 1) * cb]);
                }
                Tensor::new(vec![r, ca + cb], data)?
            }
            _ => return Err(mismatch()),
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::ConcatCols(a, b)))
    }

    /// Row lookup from a rank-2 tensor: `out[i] = src[indices[i]]`.
    /// Duplicate indices are allowed; their gradients accumulate.
    pub fn gather_rows(&mut self, src: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vs = self.value(src);
        if vs.rank() != 2 {
            return Err(Error::Contract(format!(
                "gather_rows needs a rank-2 source, got {:?}",
                vs.shape()
            )));
        }
        let cols = vs.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            if ix >= vs.rows() {
                return Err(Error::Vocabulary(format!(
                    "row index {ix} out of range for table with {} rows",
                    vs.rows()
                )));
            }
            data.extend_from_slice(&vs.data()[ix * cols..(ix + 1) * cols]);
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        let needs = self.needs(src);
        Ok(self.push(value, needs, Op::GatherRows { src, indices: indices.to_vec() }))
    }

    /// Contiguous row range `src[start..end]` of a rank-2 tensor.
    pub fn slice_rows(&mut self, src: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let vs = self.value(src);
        if vs.rank() != 2 || start > end || end > vs.rows() {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{end} invalid for shape {:?}",
                vs.shape()
            )));
        }
        let cols = vs.cols();
        let data = vs.data()[start * cols..end * cols].to_vec();
        let value = Tensor::new(vec![end - start, cols], data)?;
        let needs = self.needs(src);
        Ok(self.push(value, needs, Op::SliceRows { src, start }))
    }

    /// Broadcasts a column `[n,1]` across `cols` columns to `[n,cols]`.
    pub fn repeat_cols(&mut self, src: NodeId, cols: usize) -> Result<NodeId> {
        let vs = self.value(src);
        if vs.rank() != 2 || vs.cols() != 1 {
            return Err(Error::Contract(format!(
                "repeat_cols needs shape [n,1], got {:?}",
                vs.shape()
            )));
        }
        let n = vs.rows();
        let mut data = Vec::with_capacity(n * cols);
        for i in 0..n {
            data.extend(std::iter::repeat(vs.data()[i]).take(cols));
        }
        let value = Tensor::new(vec![n, cols], data)?;
        let needs = self.needs(src);
        Ok(self.push(value, needs, Op::RepeatCols { src }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), needs, Op::Sum(a))
    }

    /// Natural logarithm, elementwise. Inputs must be positive (clamp first).
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.ln()).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, needs, Op::Ln(a))
    }

    /// Clamps every element into `[lo, hi]`. Gradient passes only through
    /// strictly interior elements.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.clamp(lo, hi)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, needs, Op::Clamp { src: a, lo, hi })
    }

    /// max(0, x), elementwise.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, needs, Op::Relu(a))
    }

    /// 1/(1+e^(-x)), elementwise.
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, needs, Op::Sigmoid(a))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1-rate); in eval
    /// mode (or at rate 0) the input node is returned unchanged.
    pub fn dropout(
        &mut self,
        a: NodeId,
        rate: f64,
        train_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0,1)")));
        }
        if !train_mode || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&scale)
            .map(|(x, s)| x * s)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::Dropout { src: a, scale }))
    }

    /// Numerically stable softmax with a boolean keep-mask.
    ///
    /// Rank-1 input normalizes the whole vector; rank-2 normalizes each row
    /// independently. `mask[i] = false` forces output exactly 0 at `i` and
    /// excludes it from the normalization. Every (row of the) input must
    /// keep at least one position.
    pub fn masked_softmax(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let va = self.value(a);
        if mask.len() != va.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: va.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let width = if va.rank() == 2 { va.cols() } else { va.len() };
        let mut out = vec![0.0; va.len()];
        for (r, chunk) in va.data().chunks(width).enumerate() {
            let row_mask = &mask[r * width..(r + 1) * width];
            let mut max = f64::NEG_INFINITY;
            for (v, &keep) in chunk.iter().zip(row_mask) {
                if keep && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyAttentionWindow);
            }
            let mut z = 0.0;
            let row_out = &mut out[r * width..(r + 1) * width];
            for ((o, v), &keep) in row_out.iter_mut().zip(chunk).zip(row_mask) {
                if keep {
                    *o = (v - max).exp();
                    z += *o;
                }
            }
            for o in row_out.iter_mut() {
                *o /= z;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::MaskedSoftmax { src: a, mask: mask.to_vec() }))
    }

    /// Causal 1-D convolution along the row (time) axis.
    ///
    /// `input` is `[L, Din]`; `kernel` is `[M*Din, Dout]` holding M taps of
    /// `[Din, Dout]` stacked along rows. The output is
    /// `out[t] = sum_m input[t - m*dilation] . tap[M-1-m]`, with
    /// out-of-range inputs treated as zero (left zero padding), so `out[t]`
    /// never reads positions after `t`.
    pub fn causal_conv1d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        dilation: usize,
    ) -> Result<NodeId> {
        let (vi, vk) = (self.value(input), self.value(kernel));
        if vi.rank() != 2 || vk.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "causal_conv1d",
                lhs: vi.shape().to_vec(),
                rhs: vk.shape().to_vec(),
            });
        }
        let (len, din, dout) = (vi.rows(), vi.cols(), vk.cols());
        if dilation == 0 || din == 0 || vk.rows() % din != 0 || vk.rows() == 0 {
            return Err(Error::Contract(format!(
                "causal_conv1d kernel shape {:?} incompatible with {din} input channels \
                 (dilation {dilation})",
                vk.shape()
            )));
        }
        let taps = vk.rows() / din;
        let mut out = vec![0.0; len * dout];
        let (di, dk) = (vi.data(), vk.data());
        for t in 0..len {
            let orow = &mut out[t * dout..(t + 1) * dout];
            for m in 0..taps {
                let offset = m * dilation;
                if offset > t {
                    break;
                }
                let src = t - offset;
                let tap = taps - 1 - m;
                let irow = &di[src * din..(src + 1) * din];
                for (i, &x) in irow.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    let krow = &dk[(tap * din + i) * dout..(tap * din + i + 1) * dout];
                    for j in 0..dout {
                        orow[j] += x * krow[j];
                    }
                }
            }
        }
        let value = Tensor::new(vec![len, dout], out)?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(value, needs, Op::CausalConv1d { input, kernel, dilation }))
    }

    /// Last-axis layer normalization with learnable gain and bias.
    ///
    /// Each row is shifted to mean 0 and scaled to unit variance (epsilon
    /// 1e-5 inside the square root), then mapped through `gain .* x + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let width = if vx.rank() == 2 { vx.cols() } else { vx.len() };
        if vg.shape() != [width] || vb.shape() != [width] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let rows = vx.len() / width.max(1);
        let mut out = vec![0.0; vx.len()];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        for (r, chunk) in vx.data().chunks(width).enumerate() {
            let mean = chunk.iter().sum::<f64>() / width as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            means.push(mean);
            inv_stds.push(inv_std);
            let row_out = &mut out[r * width..(r + 1) * width];
            for (j, (o, v)) in row_out.iter_mut().zip(chunk).enumerate() {
                *o = vg.data()[j] * (v - mean) * inv_std + vb.data()[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            value,
            needs,
            Op::LayerNorm { src: x, gain, bias, mean: means, inv_std: inv_stds },
        ))
    }

    /// Reparameterizes a kernel as `magnitude * direction / ||direction||`,
    /// with the L2 norm taken over every element and guarded against zero.
    pub fn weight_norm(&mut self, direction: NodeId, magnitude: NodeId) -> Result<NodeId> {
        if self.value(magnitude).len() != 1 {
            return Err(Error::Contract(format!(
                "weight_norm magnitude must be a single scalar, got {:?}",
                self.value(magnitude).shape()
            )));
        }
        let vd = self.value(direction);
        let norm = (vd.data().iter().map(|v| v * v).sum::<f64>() + WEIGHT_NORM_EPS_SQ).sqrt();
        let mag = self.value(magnitude).data()[0];
        let factor = mag / norm;
        let data = vd.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(vd.shape().to_vec(), data)?;
        let needs = self.needs(direction) || self.needs(magnitude);
        Ok(self.push(value, needs, Op::WeightNorm { direction, magnitude }))
    }

    /// Reverse sweep from a scalar loss node. Gradients of parameter leaves
    /// are **added** into the store (callers zero them between steps).
    pub fn backward(&self, loss: NodeId, store: &mut ParameterStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads, store);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParameterStore,
    ) {
        match &self.nodes[id].op {
            Op::Leaf { param } => {
                if let Some(pid) = param {
                    for (slot, d) in store.grad_mut(*pid).data_mut().iter_mut().zip(g.data()) {
                        *slot += d;
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect())
                    .expect("same shape");
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(vb.data()).map(|(gv, bv)| gv * bv).collect(),
                )
                .expect("same shape");
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(va.data()).map(|(gv, av)| gv * av).collect(),
                )
                .expect("same shape");
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, factor) => {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|v| v * factor).collect(),
                )
                .expect("same shape");
                self.accumulate(grads, *a, da);
            }
            Op::AddConst(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = g . B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.data()[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gij * vb.data()[p * n + j];
                        }
                    }
                }
                // dB = A^T . g
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = va.data()[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * g.data()[i * n + j];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, k], da).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(vec![k, n], db).expect("shape"));
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![c, r], da).expect("shape"));
            }
            Op::ConcatCols(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if va.rank() == 1 {
                    let da = Tensor::vector(g.data()[..va.len()].to_vec());
                    let db = Tensor::vector(g.data()[va.len()..].to_vec());
                    self.accumulate(grads, *a, da);
                    self.accumulate(grads, *b, db);
                } else {
                    let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
                    let mut da = Vec::with_capacity(r * ca);
                    let mut db = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        let row = &g.data()[i * (ca + cb)..(i + 1) * (ca + cb)];
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![r, ca], da).expect("shape"));
                    self.accumulate(grads, *b, Tensor::new(vec![r, cb], db).expect("shape"));
                }
            }
            Op::GatherRows { src, indices } => {
                let vs = self.value(*src);
                let cols = vs.cols();
                let mut da = vec![0.0; vs.len()];
                for (i, &ix) in indices.iter().enumerate() {
                    for j in 0..cols {
                        da[ix * cols + j] += g.data()[i * cols + j];
                    }
                }
                self.accumulate(
                    grads,
                    *src,
                    Tensor::new(vs.shape().to_vec(), da).expect("shape"),
                );
            }
            Op::SliceRows { src, start } => {
                let vs = self.value(*src);
                let cols = vs.cols();
                let mut da = vec![0.0; vs.len()];
                da[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(
                    grads,
                    *src,
                    Tensor::new(vs.shape().to_vec(), da).expect("shape"),
                );
            }
            Op::RepeatCols { src } => {
                let n = self.value(*src).rows();
                let cols = g.cols();
                let mut da = vec![0.0; n];
                for i in 0..n {
                    da[i] = g.data()[i * cols..(i + 1) * cols].iter().sum();
                }
                self.accumulate(grads, *src, Tensor::new(vec![n, 1], da).expect("shape"));
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                let da = Tensor::full(va.shape().to_vec(), g.data()[0]);
                self.accumulate(grads, *a, da);
            }
            Op::Ln(a) => {
                let va = self.value(*a);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(va.data()).map(|(gv, x)| gv / x).collect(),
                )
                .expect("same shape");
                self.accumulate(grads, *a, da);
            }
            Op::Clamp { src, lo, hi } => {
                let vs = self.value(*src);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(vs.data())
                        .map(|(gv, x)| if *x > *lo && *x < *hi { *gv } else { 0.0 })
                        .collect(),
                )
                .expect("same shape");
                self.accumulate(grads, *src, da);
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )
                .expect("same shape");
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let s = &self.nodes[id].value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(s.data())
                        .map(|(gv, sv)| gv * sv * (1.0 - sv))
                        .collect(),
                )
                .expect("same shape");
                self.accumulate(grads, *a, da);
            }
            Op::Dropout { src, scale } => {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(scale).map(|(gv, s)| gv * s).collect(),
                )
                .expect("same shape");
                self.accumulate(grads, *src, da);
            }
            Op::MaskedSoftmax { src, mask } => {
                let s = &self.nodes[id].value;
                let width = if s.rank() == 2 { s.cols() } else { s.len() };
                let mut da = vec![0.0; s.len()];
                for r in 0..s.len() / width {
                    let srow = &s.data()[r * width..(r + 1) * width];
                    let grow = &g.data()[r * width..(r + 1) * width];
                    let mrow = &mask[r * width..(r + 1) * width];
                    let dot: f64 = srow
                        .iter()
                        .zip(grow)
                        .zip(mrow)
                        .filter(|&(_, &keep)| keep)
                        .map(|((sv, gv), _)| sv * gv)
                        .sum();
                    let drow = &mut da[r * width..(r + 1) * width];
                    for j in 0..width {
                        if mrow[j] {
                            drow[j] = srow[j] * (grow[j] - dot);
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *src,
                    Tensor::new(s.shape().to_vec(), da).expect("shape"),
                );
            }
            Op::CausalConv1d { input, kernel, dilation } => {
                let (vi, vk) = (self.value(*input), self.value(*kernel));
                let (len, din, dout) = (vi.rows(), vi.cols(), vk.cols());
                let taps = vk.rows() / din;
                let mut dinput = vec![0.0; vi.len()];
                let mut dkernel = vec![0.0; vk.len()];
                for t in 0..len {
                    let grow = &g.data()[t * dout..(t + 1) * dout];
                    for m in 0..taps {
                        let offset = m * dilation;
                        if offset > t {
                            break;
                        }
                        let src = t - offset;
                        let tap = taps - 1 - m;
                        for i in 0..din {
                            let x = vi.data()[src * din + i];
                            let krow = &vk.data()[(tap * din + i) * dout..(tap * din + i + 1) * dout];
                            let mut acc = 0.0;
                            for j in 0..dout {
                                acc += grow[j] * krow[j];
                                dkernel[(tap * din + i) * dout + j] += x * grow[j];
                            }
                            dinput[src * din + i] += acc;
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *input,
                    Tensor::new(vi.shape().to_vec(), dinput).expect("shape"),
                );
                self.accumulate(
                    grads,
                    *kernel,
                    Tensor::new(vk.shape().to_vec(), dkernel).expect("shape"),
                );
            }
            Op::LayerNorm { src, gain, bias, mean, inv_std } => {
                let (vs, vg) = (self.value(*src), self.value(*gain));
                let width = vg.len();
                let rows = vs.len() / width;
                let mut dx = vec![0.0; vs.len()];
                let mut dgain = vec![0.0; width];
                let mut dbias = vec![0.0; width];
                for r in 0..rows {
                    let xrow = &vs.data()[r * width..(r + 1) * width];
                    let grow = &g.data()[r * width..(r + 1) * width];
                    let (mu, istd) = (mean[r], inv_std[r]);
                    let mut sum_gg = 0.0;
                    let mut sum_ggx = 0.0;
                    for j in 0..width {
                        let xhat = (xrow[j] - mu) * istd;
                        let gg = grow[j] * vg.data()[j];
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    let inv_w = 1.0 / width as f64;
                    let drow = &mut dx[r * width..(r + 1) * width];
                    for j in 0..width {
                        let xhat = (xrow[j] - mu) * istd;
                        let gg = grow[j] * vg.data()[j];
                        drow[j] = istd * (gg - sum_gg * inv_w - xhat * sum_ggx * inv_w);
                    }
                }
                self.accumulate(
                    grads,
                    *src,
                    Tensor::new(vs.shape().to_vec(), dx).expect("shape"),
                );
                self.accumulate(grads, *gain, Tensor::vector(dgain));
                self.accumulate(grads, *bias, Tensor::vector(dbias));
            }
            Op::WeightNorm { direction, magnitude } => {
                let vd = self.value(*direction);
                let mag = self.value(*magnitude).data()[0];
                let norm =
                    (vd.data().iter().map(|v| v * v).sum::<f64>() + WEIGHT_NORM_EPS_SQ).sqrt();
                let gv_dot: f64 = g.data().iter().zip(vd.data()).map(|(gv, v)| gv * v).sum();
                let factor = mag / norm;
                let shrink = gv_dot / (norm * norm);
                let dd = Tensor::new(
                    vd.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(vd.data())
                        .map(|(gv, v)| factor * (gv - v * shrink))
                        .collect(),
                )
                .expect("same shape");
                self.accumulate(grads, *direction, dd);
                self.accumulate(grads, *magnitude, Tensor::scalar(gv_dot / norm));
            }
        }
    }
}
