use std::str::FromStr;
use std::sync::Arc;

use indexmap::IndexMap;

use super::kernels::{self, Strides, Window};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a primitive, independent of its attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    Scale,
    BiasAdd,
    MatMul,
    LayerNorm,
    BatchNorm,
    Softmax,
    Gelu,
    Relu,
    Conv2d,
    ConvTranspose2d,
    AdaptiveAvgPool2d,
    ResizeBilinear,
    Dropout,
    Concat,
    Reshape,
    Permute,
    IndexSelect,
    ScatterRows,
    Sum,
    Mean,
    WeightedCrossEntropy,
    Mse,
    MaskedRmse,
}

const PRIMITIVE_NAMES: &[(&str, PrimitiveKind)] = &[
    ("add", PrimitiveKind::Add),
    ("sub", PrimitiveKind::Sub),
    ("mul", PrimitiveKind::Mul),
    ("scale", PrimitiveKind::Scale),
    ("bias_add", PrimitiveKind::BiasAdd),
    ("matmul", PrimitiveKind::MatMul),
    ("layer_norm", PrimitiveKind::LayerNorm),
    ("batch_norm", PrimitiveKind::BatchNorm),
    ("softmax", PrimitiveKind::Softmax),
    ("gelu", PrimitiveKind::Gelu),
    ("relu", PrimitiveKind::Relu),
    ("conv2d", PrimitiveKind::Conv2d),
    ("conv_transpose2d", PrimitiveKind::ConvTranspose2d),
    ("adaptive_avg_pool2d", PrimitiveKind::AdaptiveAvgPool2d),
    ("resize_bilinear", PrimitiveKind::ResizeBilinear),
    ("dropout", PrimitiveKind::Dropout),
    ("concat", PrimitiveKind::Concat),
    ("reshape", PrimitiveKind::Reshape),
    ("permute", PrimitiveKind::Permute),
    ("index_select", PrimitiveKind::IndexSelect),
    ("scatter_rows", PrimitiveKind::ScatterRows),
    ("sum", PrimitiveKind::Sum),
    ("mean", PrimitiveKind::Mean),
    ("weighted_cross_entropy", PrimitiveKind::WeightedCrossEntropy),
    ("mse", PrimitiveKind::Mse),
    ("masked_rmse", PrimitiveKind::MaskedRmse),
];

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        PRIMITIVE_NAMES
            .iter()
            .find(|(_, k)| *k == self)
            .map(|(n, _)| *n)
            .unwrap_or("?")
    }

    pub fn all() -> impl Iterator<Item = PrimitiveKind> {
        PRIMITIVE_NAMES.iter().map(|(_, k)| *k)
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PRIMITIVE_NAMES
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, k)| *k)
            .ok_or_else(|| Error::UnknownPrimitive(s.to_string()))
    }
}

/// A primitive together with its attributes.
#[derive(Clone, Debug)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// Adds a rank-1 bias broadcast along `axis`.
    BiasAdd { axis: usize },
    /// Batched product over the last two axes; a rank-2 right operand is
    /// broadcast across the batch.
    MatMul { trans_a: bool, trans_b: bool },
    /// Normalises the last axis; operands `x, gamma, beta`.
    LayerNorm { eps: f64 },
    /// Per-channel normalisation of `[B, C, ...]`; operands `x, gamma, beta`.
    /// `running = None` uses batch statistics.
    BatchNorm {
        eps: f64,
        running: Option<(Arc<Vec<f64>>, Arc<Vec<f64>>)>,
    },
    Softmax,
    Gelu,
    Relu,
    /// Operands `x [B,Ci,H,W], w [Co,Ci,kh,kw]` and optional bias `[Co]`.
    Conv2d { stride: usize, padding: usize },
    /// Operands `x [B,Ci,H,W], w [Ci,Co,kh,kw]` and optional bias `[Co]`.
    ConvTranspose2d { stride: usize, padding: usize },
    AdaptiveAvgPool2d { out_h: usize, out_w: usize },
    /// Half-pixel bilinear resampling of `[B, C, H, W]`.
    ResizeBilinear { out_h: usize, out_w: usize },
    /// Inverted dropout; identity outside training mode.
    Dropout { rate: f64 },
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    Permute { perm: Vec<usize> },
    /// Gathers rows (axis 0).
    IndexSelect { indices: Arc<Vec<usize>> },
    /// Places row `i` of the operand at row `indices[i]` of a zero tensor
    /// with `rows` rows.
    ScatterRows { indices: Arc<Vec<usize>>, rows: usize },
    Sum,
    Mean,
    /// Logits `[B, K, ...]`; mean of per-position cross-entropy weighted by
    /// the target class weight, normalised by the applied weight total.
    WeightedCrossEntropy {
        targets: Arc<Vec<i64>>,
        weights: Vec<f64>,
        ignore: i64,
    },
    Mse,
    /// Per-image RMSE over pixels whose target is non-zero, averaged over
    /// images that have at least one such pixel. Operand `[B, ...]`.
    MaskedRmse { targets: Arc<Vec<f64>> },
}

impl Op {
    pub fn kind(&self) -> PrimitiveKind {
        use PrimitiveKind as K;
        match self {
            Op::Add => K::Add,
            Op::Sub => K::Sub,
            Op::Mul => K::Mul,
            Op::Scale(_) => K::Scale,
            Op::BiasAdd { .. } => K::BiasAdd,
            Op::MatMul { .. } => K::MatMul,
            Op::LayerNorm { .. } => K::LayerNorm,
            Op::BatchNorm { .. } => K::BatchNorm,
            Op::Softmax => K::Softmax,
            Op::Gelu => K::Gelu,
            Op::Relu => K::Relu,
            Op::Conv2d { .. } => K::Conv2d,
            Op::ConvTranspose2d { .. } => K::ConvTranspose2d,
            Op::AdaptiveAvgPool2d { .. } => K::AdaptiveAvgPool2d,
            Op::ResizeBilinear { .. } => K::ResizeBilinear,
            Op::Dropout { .. } => K::Dropout,
            Op::Concat { .. } => K::Concat,
            Op::Reshape { .. } => K::Reshape,
            Op::Permute { .. } => K::Permute,
            Op::IndexSelect { .. } => K::IndexSelect,
            Op::ScatterRows { .. } => K::ScatterRows,
            Op::Sum => K::Sum,
            Op::Mean => K::Mean,
            Op::WeightedCrossEntropy { .. } => K::WeightedCrossEntropy,
            Op::Mse => K::Mse,
            Op::MaskedRmse { .. } => K::MaskedRmse,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<Var>,
    saved: Vec<Vec<f64>>,
    needs_grad: bool,
}

/// Linear record of primitive applications.
///
/// Nodes are appended in evaluation order, so the node list is always
/// topologically sorted. When recording is stopped, values are still kept
/// (later primitives read them) but no operands, saved buffers or gradient
/// requirements are stored.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    recording: bool,
    training: bool,
    dropout: Option<RngStream>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Recording tape in evaluation mode (dropout off, batch-norm uses
    /// running statistics).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            recording: true,
            training: false,
            dropout: None,
        }
    }

    /// Non-recording tape for pure inference.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    /// Recording tape in training mode; dropout masks come from `stream`.
    pub fn training(stream: RngStream) -> Self {
        Self {
            training: true,
            dropout: Some(stream),
            ..Self::new()
        }
    }

    /// Switches training mode on (with a dropout stream) or off.
    pub fn set_training(&mut self, stream: Option<RngStream>) {
        self.training = stream.is_some();
        self.dropout = stream;
    }

    pub fn record(&mut self) {
        self.recording = true;
    }

    pub fn stop(&mut self) {
        self.recording = false;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Option<Op>, inputs: Vec<Var>, saved: Vec<Vec<f64>>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            saved,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None, Vec::new(), Vec::new(), false)
    }

    /// Leaf tracked as a named parameter.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        let needs = self.recording;
        let v = self.push(t, None, Vec::new(), Vec::new(), needs);
        if needs {
            self.params.push((name.to_string(), v));
        }
        v
    }

    /// Primitive of the most recently appended node, if it was recorded.
    pub fn last_op(&self) -> Option<&Op> {
        self.nodes.last().and_then(|n| n.op.as_ref())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Auxiliary buffers saved by a node (batch-norm records the batch mean
    /// and unbiased variance at indices 2 and 3).
    pub fn saved(&self, v: Var) -> &[Vec<f64>] {
        &self.nodes[v.0].saved
    }

    /// Applies `op` to `inputs`, appending the result to the tape.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Op::Dropout { rate } = op {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
            }
            if !self.training || rate == 0.0 {
                return Ok(inputs[0]);
            }
        }
        let (value, saved) = {
            let operands: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&op, &operands, self.dropout.as_mut())?
        };
        if self.recording {
            let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
            Ok(self.push(value, Some(op), inputs.to_vec(), saved, needs))
        } else {
            // keep batch-norm statistics available even without recording
            let saved = if matches!(op, Op::BatchNorm { .. }) { saved } else { Vec::new() };
            Ok(self.push(value, None, Vec::new(), saved, false))
        }
    }

    /// Applies a primitive looked up by name.
    pub fn apply_named(&mut self, name: &str, op: Op, inputs: &[Var]) -> Result<Var> {
        let kind: PrimitiveKind = name.parse()?;
        if kind != op.kind() {
            return Err(Error::Config(format!(
                "primitive `{name}` given attributes for `{}`",
                op.name()
            )));
        }
        self.apply(op, inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn bias_add(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        self.apply(Op::BiasAdd { axis }, &[x, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul { trans_a: false, trans_b: false }, &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        self.apply(Op::MatMul { trans_a, trans_b }, &[a, b])
    }

    /// `x · w + b` over the last axis, `w` stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let axis = self.shape(y).len() - 1;
        self.bias_add(y, b, axis)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(Arc<Vec<f64>>, Arc<Vec<f64>>)>,
    ) -> Result<Var> {
        self.apply(Op::BatchNorm { eps, running }, &[x, gamma, beta])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(bias);
        self.apply(Op::Conv2d { stride, padding }, &ins)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(bias);
        self.apply(Op::ConvTranspose2d { stride, padding }, &ins)
    }

    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.apply(Op::AdaptiveAvgPool2d { out_h, out_w }, &[x])
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() == 4 && s[2] == out_h && s[3] == out_w {
            return Ok(x);
        }
        self.apply(Op::ResizeBilinear { out_h, out_w }, &[x])
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.apply(Op::Dropout { rate }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Permute { perm: perm.to_vec() }, &[x])
    }

    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.apply(Op::IndexSelect { indices: Arc::new(indices.to_vec()) }, &[x])
    }

    pub fn scatter_rows(&mut self, x: Var, indices: &[usize], rows: usize) -> Result<Var> {
        self.apply(
            Op::ScatterRows {
                indices: Arc::new(indices.to_vec()),
                rows,
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }

    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: Arc<Vec<i64>>, weights: &[f64], ignore: i64) -> Result<Var> {
        self.apply(
            Op::WeightedCrossEntropy {
                targets,
                weights: weights.to_vec(),
                ignore,
            },
            &[logits],
        )
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mse, &[a, b])
    }

    pub fn masked_rmse(&mut self, pred: Var, targets: Arc<Vec<f64>>) -> Result<Var> {
        self.apply(Op::MaskedRmse { targets }, &[pred])
    }

    /// Fails on the first node holding a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: n.op.as_ref().map(|o| o.name()).unwrap_or("leaf"),
                });
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Config("backward on a tape that is not recording".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            let operands: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let gins = backward(op, &operands, &node.value, &node.saved, &gout, &wanted);
            for ((v, g), w) in node.inputs.iter().zip(gins).zip(wanted) {
                let (Some(g), true) = (g, w) else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // parameters keep their gradient; interior nodes are released
            if self.nodes[i].op.is_some() {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            params: self.params.clone(),
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zeros when the loss does not reach it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient for every named parameter, in registration order.
    pub fn params(&self) -> IndexMap<String, Tensor> {
        self.params.iter().map(|(n, v)| (n.clone(), self.wrt(*v))).collect()
    }
}

// ---------------------------------------------------------------------------
// forward

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn arity(op: &Op, n: usize, allowed: &[usize]) -> Result<()> {
    if !allowed.contains(&n) {
        return Err(Error::shape(op.name(), format!("expected {allowed:?} operands, got {n}")));
    }
    Ok(())
}

fn rank4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [B,C,H,W], got {:?}", t.shape()))),
    }
}

struct MatMulGeom {
    batch: usize,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
    sa: Strides,
    sb: Strides,
    a_block: usize,
    b_block: usize,
    out_shape: Vec<usize>,
}

fn matmul_geom(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<MatMulGeom> {
    let (ar, br) = (a.rank(), b.rank());
    if ar < 2 || br < 2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}: operands need rank >= 2", a.shape(), b.shape())));
    }
    let (a0, a1) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (b0, b1) = (b.shape()[br - 2], b.shape()[br - 1]);
    let (m, ka) = if ta { (a1, a0) } else { (a0, a1) };
    let (kb, n) = if tb { (b1, b0) } else { (b0, b1) };
    let a_batch = &a.shape()[..ar - 2];
    let b_batched = br > 2;
    if ka != kb || (b_batched && a_batch != &b.shape()[..br - 2]) {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out_shape = a_batch.to_vec();
    out_shape.extend([m, n]);
    Ok(MatMulGeom {
        batch: a_batch.iter().product(),
        b_batched,
        m,
        k: ka,
        n,
        sa: Strides::stored(a1, ta),
        sb: Strides::stored(b1, tb),
        a_block: a0 * a1,
        b_block: b0 * b1,
        out_shape,
    })
}

fn conv_geom(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize, transposed: bool) -> Result<(Window, usize, usize)> {
    let op = if transposed { "conv_transpose2d" } else { "conv2d" };
    let (_, ci, h, wd) = rank4(op, x)?;
    let ws = w.shape();
    if ws.len() != 4 {
        return Err(Error::shape(op, format!("weight {:?} must be rank 4", ws)));
    }
    if stride == 0 {
        return Err(Error::Config(format!("{op}: stride must be positive")));
    }
    let (w_in, co) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
    if w_in != ci {
        return Err(Error::shape(op, format!("input {:?} vs weight {:?}", x.shape(), ws)));
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape(op, format!("bias {:?} vs {co} output channels", b.shape())));
        }
    }
    let (kh, kw) = (ws[2], ws[3]);
    if transposed {
        let oh = ((h - 1) * stride + kh).checked_sub(2 * pad);
        let ow = ((wd - 1) * stride + kw).checked_sub(2 * pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
                // window over the (larger) output image; its column grid is the input grid
                let g = Window { channels: co, h: oh, w: ow, kh, kw, stride, pad };
                Ok((g, oh, ow))
            }
            _ => Err(Error::shape(op, format!("padding {pad} too large for input {:?}", x.shape()))),
        }
    } else {
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(op, format!("kernel {:?} larger than padded input {:?}", ws, x.shape())));
        }
        let g = Window { channels: ci, h, w: wd, kh, kw, stride, pad };
        Ok((g, g.out_h(), g.out_w()))
    }
}

fn permute_index_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let r = shape.len();
    let mut strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for d in (0..r).rev() {
            idx[d] += 1;
            src += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

type Forward = (Tensor, Vec<Vec<f64>>);

fn forward(op: &Op, x: &[&Tensor], dropout: Option<&mut RngStream>) -> Result<Forward> {
    let name = op.name();
    let unary = |f: &dyn Fn(f64) -> f64| -> Result<Forward> {
        arity(op, x.len(), &[1])?;
        Ok((x[0].map(f), Vec::new()))
    };
    match op {
        Op::Add | Op::Sub | Op::Mul => {
            arity(op, x.len(), &[2])?;
            same_shape(name, x[0], x[1])?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |a, b| a + b,
                Op::Sub => |a, b| a - b,
                _ => |a, b| a * b,
            };
            let data = x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| f(a, b)).collect();
            Ok((Tensor::from_parts(x[0].shape().to_vec(), data), Vec::new()))
        }
        Op::Scale(c) => unary(&|v| v * c),
        Op::Gelu => unary(&|v| 0.5 * v * (1.0 + erf(v / SQRT_2))),
        Op::Relu => unary(&|v| v.max(0.0)),
        Op::BiasAdd { axis } => {
            arity(op, x.len(), &[2])?;
            let (t, b) = (x[0], x[1]);
            if *axis >= t.rank() || b.shape() != [t.shape()[*axis]] {
                return Err(Error::shape(name, format!("{:?} + bias {:?} on axis {axis}", t.shape(), b.shape())));
            }
            let c = t.shape()[*axis];
            let inner: usize = t.shape()[axis + 1..].iter().product();
            let mut out = t.data().to_vec();
            for (i, v) in out.iter_mut().enumerate() {
                *v += b.data()[(i / inner) % c];
            }
            Ok((Tensor::from_parts(t.shape().to_vec(), out), Vec::new()))
        }
        Op::MatMul { trans_a, trans_b } => {
            arity(op, x.len(), &[2])?;
            let g = matmul_geom(x[0], x[1], *trans_a, *trans_b)?;
            let mut out = vec![0.0; g.batch * g.m * g.n];
            for bi in 0..g.batch {
                let a = &x[0].data()[bi * g.a_block..(bi + 1) * g.a_block];
                let bo = if g.b_batched { bi * g.b_block } else { 0 };
                let b = &x[1].data()[bo..bo + g.b_block];
                let c = &mut out[bi * g.m * g.n..(bi + 1) * g.m * g.n];
                kernels::gemm(g.m, g.k, g.n, a, g.sa, b, g.sb, c, Strides::stored(g.n, false), false);
            }
            Ok((Tensor::from_parts(g.out_shape, out), Vec::new()))
        }
        Op::LayerNorm { eps } => {
            arity(op, x.len(), &[3])?;
            let t = x[0];
            let d = *t.shape().last().ok_or_else(|| Error::shape(name, "scalar input"))?;
            if x[1].shape() != [d] || x[2].shape() != [d] {
                return Err(Error::shape(name, format!("{:?} with gamma {:?}, beta {:?}", t.shape(), x[1].shape(), x[2].shape())));
            }
            let rows = t.numel() / d;
            let mut xhat = vec![0.0; t.numel()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; t.numel()];
            for r in 0..rows {
                let row = &t.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * x[1].data()[j] + x[2].data()[j];
                }
            }
            Ok((Tensor::from_parts(t.shape().to_vec(), out), vec![xhat, rstd]))
        }
        Op::BatchNorm { eps, running } => {
            arity(op, x.len(), &[3])?;
            let t = x[0];
            if t.rank() < 2 {
                return Err(Error::shape(name, format!("expected [B,C,...], got {:?}", t.shape())));
            }
            let (b, c) = (t.shape()[0], t.shape()[1]);
            let inner: usize = t.shape()[2..].iter().product();
            if x[1].shape() != [c] || x[2].shape() != [c] {
                return Err(Error::shape(name, format!("{:?} with gamma {:?}, beta {:?}", t.shape(), x[1].shape(), x[2].shape())));
            }
            let m = b * inner;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            match running {
                Some((rm, rv)) => {
                    if rm.len() != c || rv.len() != c {
                        return Err(Error::shape(name, format!("running stats of length {} for {c} channels", rm.len())));
                    }
                    mean.copy_from_slice(rm);
                    var.copy_from_slice(rv);
                }
                None => {
                    for bi in 0..b {
                        for ch in 0..c {
                            let s = &t.data()[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
                            mean[ch] += s.iter().sum::<f64>();
                        }
                    }
                    mean.iter_mut().for_each(|v| *v /= m as f64);
                    for bi in 0..b {
                        for ch in 0..c {
                            let s = &t.data()[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
                            var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= m as f64);
                }
            }
            let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; t.numel()];
            let mut out = vec![0.0; t.numel()];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * inner;
                    for i in base..base + inner {
                        let xh = (t.data()[i] - mean[ch]) * rstd[ch];
                        xhat[i] = xh;
                        out[i] = xh * x[1].data()[ch] + x[2].data()[ch];
                    }
                }
            }
            let unbiased: Vec<f64> = if m > 1 {
                var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect()
            } else {
                var.clone()
            };
            Ok((Tensor::from_parts(t.shape().to_vec(), out), vec![xhat, rstd, mean, unbiased]))
        }
        Op::Softmax => {
            arity(op, x.len(), &[1])?;
            let t = x[0];
            let d = *t.shape().last().ok_or_else(|| Error::shape(name, "scalar input"))?;
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(d) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            Ok((Tensor::from_parts(t.shape().to_vec(), out), Vec::new()))
        }
        Op::Conv2d { stride, padding } | Op::ConvTranspose2d { stride, padding } => {
            arity(op, x.len(), &[2, 3])?;
            let transposed = matches!(op, Op::ConvTranspose2d { .. });
            let (t, w) = (x[0], x[1]);
            let bias = x.get(2).copied();
            let (g, oh, ow) = conv_geom(t, w, bias, *stride, *padding, transposed)?;
            let (b, ci, h, wd) = rank4(name, t)?;
            let co = if transposed { w.shape()[1] } else { w.shape()[0] };
            let mut out = vec![0.0; b * co * oh * ow];
            let mut cols = Vec::new();
            for bi in 0..b {
                let img = &t.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                let dst = &mut out[bi * co * oh * ow..(bi + 1) * co * oh * ow];
                if transposed {
                    // cols [Co·k·k, H·W] = Wᵀ [Co·k·k, Ci] · x [Ci, H·W]
                    let kk = g.col_rows();
                    cols.clear();
                    cols.resize(kk * h * wd, 0.0);
                    kernels::gemm(kk, ci, h * wd, w.data(), Strides::stored(kk, true), img, Strides::stored(h * wd, false), &mut cols, Strides::stored(h * wd, false), false);
                    kernels::col2im(&cols, g, dst);
                } else {
                    kernels::im2col(img, g, &mut cols);
                    let kk = g.col_rows();
                    kernels::gemm(co, kk, oh * ow, w.data(), Strides::stored(kk, false), &cols, Strides::stored(oh * ow, false), dst, Strides::stored(oh * ow, false), false);
                }
                if let Some(bias) = bias {
                    for (ch, plane) in dst.chunks_mut(oh * ow).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bias.data()[ch]);
                    }
                }
            }
            Ok((Tensor::from_parts(vec![b, co, oh, ow], out), Vec::new()))
        }
        Op::AdaptiveAvgPool2d { out_h, out_w } => {
            arity(op, x.len(), &[1])?;
            let (b, c, h, w) = rank4(name, x[0])?;
            if *out_h == 0 || *out_w == 0 || *out_h > h || *out_w > w {
                return Err(Error::shape(name, format!("cannot pool {:?} to {out_h}x{out_w}", x[0].shape())));
            }
            let mut out = vec![0.0; b * c * out_h * out_w];
            for (p, plane) in x[0].data().chunks(h * w).enumerate() {
                for oy in 0..*out_h {
                    let (y0, y1) = kernels::adaptive_bin(oy, h, *out_h);
                    for ox in 0..*out_w {
                        let (x0, x1) = kernels::adaptive_bin(ox, w, *out_w);
                        let mut s = 0.0;
                        for yy in y0..y1 {
                            s += plane[yy * w + x0..yy * w + x1].iter().sum::<f64>();
                        }
                        out[p * out_h * out_w + oy * out_w + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                    }
                }
            }
            Ok((Tensor::from_parts(vec![b, c, *out_h, *out_w], out), Vec::new()))
        }
        Op::ResizeBilinear { out_h, out_w } => {
            arity(op, x.len(), &[1])?;
            let (b, c, h, w) = rank4(name, x[0])?;
            if *out_h == 0 || *out_w == 0 {
                return Err(Error::shape(name, format!("empty target size {out_h}x{out_w}")));
            }
            let ty = kernels::bilinear_taps(h, *out_h);
            let tx = kernels::bilinear_taps(w, *out_w);
            let mut out = vec![0.0; b * c * out_h * out_w];
            for (p, plane) in x[0].data().chunks(h * w).enumerate() {
                let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                        let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                        dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
            Ok((Tensor::from_parts(vec![b, c, *out_h, *out_w], out), Vec::new()))
        }
        Op::Dropout { rate } => {
            arity(op, x.len(), &[1])?;
            let stream = dropout.ok_or_else(|| Error::Config("dropout in training mode needs an rng stream".into()))?;
            let keep = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..x[0].numel()).map(|_| if stream.uniform() < *rate { 0.0 } else { keep }).collect();
            let out = x[0].data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            Ok((Tensor::from_parts(x[0].shape().to_vec(), out), vec![mask]))
        }
        Op::Concat { axis } => {
            if x.is_empty() {
                return Err(Error::shape(name, "no operands"));
            }
            let first = x[0].shape();
            if *axis >= first.len() {
                return Err(Error::shape(name, format!("axis {axis} out of range for {:?}", first)));
            }
            let mut total = 0;
            for t in x {
                let s = t.shape();
                if s.len() != first.len() || s.iter().enumerate().any(|(i, &e)| i != *axis && e != first[i]) {
                    return Err(Error::shape(name, format!("{:?} vs {:?} along axis {axis}", first, s)));
                }
                total += s[*axis];
            }
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in x {
                    let len = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Ok((Tensor::from_parts(shape, out), Vec::new()))
        }
        Op::Reshape { shape } => {
            arity(op, x.len(), &[1])?;
            Ok((x[0].reshape(shape)?.cast(super::DType::F64), Vec::new()))
        }
        Op::Permute { perm } => {
            arity(op, x.len(), &[1])?;
            let s = x[0].shape();
            let mut seen = vec![false; s.len()];
            if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::shape(name, format!("permutation {perm:?} for {:?}", s)));
            }
            let map = permute_index_map(s, perm);
            let out = map.iter().map(|&i| x[0].data()[i]).collect();
            let shape = perm.iter().map(|&p| s[p]).collect();
            Ok((Tensor::from_parts(shape, out), Vec::new()))
        }
        Op::IndexSelect { indices } => {
            arity(op, x.len(), &[1])?;
            let s = x[0].shape();
            if s.is_empty() {
                return Err(Error::shape(name, "scalar input"));
            }
            let row: usize = s[1..].iter().product();
            if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
                return Err(Error::shape(name, format!("index {bad} out of range for {:?}", s)));
            }
            let mut out = Vec::with_capacity(indices.len() * row);
            for &i in indices.iter() {
                out.extend_from_slice(&x[0].data()[i * row..(i + 1) * row]);
            }
            let mut shape = s.to_vec();
            shape[0] = indices.len();
            Ok((Tensor::from_parts(shape, out), Vec::new()))
        }
        Op::ScatterRows { indices, rows } => {
            arity(op, x.len(), &[1])?;
            let s = x[0].shape();
            if s.is_empty() || s[0] != indices.len() || indices.iter().any(|&i| i >= *rows) {
                return Err(Error::shape(name, format!("{:?} rows into {rows} at {} indices", s, indices.len())));
            }
            let row: usize = s[1..].iter().product();
            let mut out = vec![0.0; rows * row];
            for (k, &i) in indices.iter().enumerate() {
                out[i * row..(i + 1) * row].copy_from_slice(&x[0].data()[k * row..(k + 1) * row]);
            }
            let mut shape = s.to_vec();
            shape[0] = *rows;
            Ok((Tensor::from_parts(shape, out), Vec::new()))
        }
        Op::Sum => {
            arity(op, x.len(), &[1])?;
            Ok((Tensor::scalar(x[0].data().iter().sum()), Vec::new()))
        }
        Op::Mean => {
            arity(op, x.len(), &[1])?;
            if x[0].numel() == 0 {
                return Err(Error::shape(name, "empty input"));
            }
            Ok((Tensor::scalar(x[0].data().iter().sum::<f64>() / x[0].numel() as f64), Vec::new()))
        }
        Op::WeightedCrossEntropy { targets, weights, ignore } => {
            arity(op, x.len(), &[1])?;
            let t = x[0];
            if t.rank() < 2 {
                return Err(Error::shape(name, format!("logits {:?} need [B,K,...]", t.shape())));
            }
            let (b, k) = (t.shape()[0], t.shape()[1]);
            let inner: usize = t.shape()[2..].iter().product();
            if targets.len() != b * inner || weights.len() != k {
                return Err(Error::shape(
                    name,
                    format!("logits {:?} with {} targets and {} class weights", t.shape(), targets.len(), weights.len()),
                ));
            }
            let mut probs = vec![0.0; t.numel()];
            let mut total = 0.0;
            let mut wsum = 0.0;
            for bi in 0..b {
                for p in 0..inner {
                    let at = |c: usize| (bi * k + c) * inner + p;
                    let mx = (0..k).map(|c| t.data()[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..k).map(|c| (t.data()[at(c)] - mx).exp()).sum();
                    for c in 0..k {
                        probs[at(c)] = (t.data()[at(c)] - mx).exp() / z;
                    }
                    let y = targets[bi * inner + p];
                    if y == *ignore {
                        continue;
                    }
                    if y < 0 || y as usize >= k {
                        return Err(Error::Data(format!("target class {y} outside 0..{k}")));
                    }
                    let y = y as usize;
                    let nll = -(t.data()[at(y)] - mx - z.ln());
                    total += weights[y] * nll;
                    wsum += weights[y];
                }
            }
            if wsum == 0.0 {
                return Err(Error::Data("weighted cross-entropy: every target is ignored".into()));
            }
            Ok((Tensor::scalar(total / wsum), vec![probs, vec![wsum]]))
        }
        Op::Mse => {
            arity(op, x.len(), &[2])?;
            same_shape(name, x[0], x[1])?;
            if x[0].numel() == 0 {
                return Err(Error::shape(name, "empty input"));
            }
            let s: f64 = x[0].data().iter().zip(x[1].data()).map(|(a, b)| (a - b).powi(2)).sum();
            Ok((Tensor::scalar(s / x[0].numel() as f64), Vec::new()))
        }
        Op::MaskedRmse { targets } => {
            arity(op, x.len(), &[1])?;
            let t = x[0];
            if t.rank() < 1 || targets.len() != t.numel() || t.shape()[0] == 0 {
                return Err(Error::shape(name, format!("prediction {:?} with {} targets", t.shape(), targets.len())));
            }
            let b = t.shape()[0];
            let per = t.numel() / b;
            // saved: per-image rmse (NaN when the image has no valid pixel) and count
            let mut rmse = vec![f64::NAN; b];
            let mut counts = vec![0.0; b];
            for i in 0..b {
                let (mut s, mut n) = (0.0, 0usize);
                for j in i * per..(i + 1) * per {
                    if targets[j] != 0.0 {
                        s += (t.data()[j] - targets[j]).powi(2);
                        n += 1;
                    }
                }
                if n > 0 {
                    rmse[i] = (s / n as f64).sqrt();
                    counts[i] = n as f64;
                }
            }
            let valid: Vec<f64> = rmse.iter().copied().filter(|v| !v.is_nan()).collect();
            if valid.is_empty() {
                return Err(Error::Data("masked rmse: every target pixel is zero".into()));
            }
            let loss = valid.iter().sum::<f64>() / valid.len() as f64;
            Ok((Tensor::scalar(loss), vec![rmse, counts]))
        }
    }
}

// ---------------------------------------------------------------------------
// backward

fn backward(op: &Op, x: &[&Tensor], out: &Tensor, saved: &[Vec<f64>], g: &[f64], want: &[bool]) -> Vec<Option<Vec<f64>>> {
    let elementwise = |f: &dyn Fn(f64, f64) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some(x[0].data().iter().zip(g).map(|(&v, &gv)| f(v, gv)).collect())]
    };
    match op {
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        Op::Mul => vec![
            Some(g.iter().zip(x[1].data()).map(|(a, b)| a * b).collect()),
            Some(g.iter().zip(x[0].data()).map(|(a, b)| a * b).collect()),
        ],
        Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Op::Relu => elementwise(&|v, gv| if v > 0.0 { gv } else { 0.0 }),
        Op::Gelu => elementwise(&|v, gv| {
            let cdf = 0.5 * (1.0 + erf(v / SQRT_2));
            let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
            gv * (cdf + v * pdf)
        }),
        Op::BiasAdd { axis } => {
            let c = x[0].shape()[*axis];
            let inner: usize = x[0].shape()[axis + 1..].iter().product();
            let mut gb = vec![0.0; c];
            for (i, v) in g.iter().enumerate() {
                gb[(i / inner) % c] += v;
            }
            vec![Some(g.to_vec()), Some(gb)]
        }
        Op::MatMul { trans_a, trans_b } => {
            let geo = matmul_geom(x[0], x[1], *trans_a, *trans_b).expect("checked in forward");
            let mut ga = want[0].then(|| vec![0.0; x[0].numel()]);
            let mut gb = want[1].then(|| vec![0.0; x[1].numel()]);
            let sc = Strides::stored(geo.n, false);
            for bi in 0..geo.batch {
                let a = &x[0].data()[bi * geo.a_block..(bi + 1) * geo.a_block];
                let bo = if geo.b_batched { bi * geo.b_block } else { 0 };
                let b = &x[1].data()[bo..bo + geo.b_block];
                let gc = &g[bi * geo.m * geo.n..(bi + 1) * geo.m * geo.n];
                if let Some(ga) = ga.as_mut() {
                    // dA_op = dC · B_opᵀ, written through A's own strides
                    let dst = &mut ga[bi * geo.a_block..(bi + 1) * geo.a_block];
                    kernels::gemm(geo.m, geo.n, geo.k, gc, sc, b, geo.sb.t(), dst, geo.sa, false);
                }
                if let Some(gb) = gb.as_mut() {
                    // dB_op = A_opᵀ · dC, accumulated across a broadcast batch
                    let dst = &mut gb[bo..bo + geo.b_block];
                    kernels::gemm(geo.k, geo.m, geo.n, a, geo.sa.t(), gc, sc, dst, geo.sb, true);
                }
            }
            vec![ga, gb]
        }
        Op::LayerNorm { .. } => {
            let d = *x[0].shape().last().unwrap();
            let (xhat, rstd) = (&saved[0], &saved[1]);
            let gamma = x[1].data();
            let mut gx = vec![0.0; x[0].numel()];
            let mut gg = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for r in 0..rstd.len() {
                let gr = &g[r * d..(r + 1) * d];
                let xr = &xhat[r * d..(r + 1) * d];
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    let dxh = gr[j] * gamma[j];
                    m1 += dxh;
                    m2 += dxh * xr[j];
                    gg[j] += gr[j] * xr[j];
                    gbeta[j] += gr[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    gx[r * d + j] = rstd[r] * (gr[j] * gamma[j] - m1 - xr[j] * m2);
                }
            }
            vec![Some(gx), Some(gg), Some(gbeta)]
        }
        Op::BatchNorm { running, .. } => {
            let (b, c) = (x[0].shape()[0], x[0].shape()[1]);
            let inner: usize = x[0].shape()[2..].iter().product();
            let (xhat, rstd) = (&saved[0], &saved[1]);
            let gamma = x[1].data();
            let m = (b * inner) as f64;
            let mut gg = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * inner;
                    for i in base..base + inner {
                        gg[ch] += g[i] * xhat[i];
                        gbeta[ch] += g[i];
                    }
                }
            }
            let mut gx = vec![0.0; x[0].numel()];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * inner;
                    for i in base..base + inner {
                        gx[i] = if running.is_some() {
                            g[i] * gamma[ch] * rstd[ch]
                        } else {
                            gamma[ch] * rstd[ch] / m * (m * g[i] - gbeta[ch] - xhat[i] * gg[ch])
                        };
                    }
                }
            }
            vec![Some(gx), Some(gg), Some(gbeta)]
        }
        Op::Softmax => {
            let d = *x[0].shape().last().unwrap();
            let mut gx = vec![0.0; g.len()];
            for ((yr, gr), dst) in out.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        }
        Op::Conv2d { stride, padding } | Op::ConvTranspose2d { stride, padding } => {
            let transposed = matches!(op, Op::ConvTranspose2d { .. });
            let (t, w) = (x[0], x[1]);
            let (geo, oh, ow) = conv_geom(t, w, x.get(2).copied(), *stride, *padding, transposed).expect("checked in forward");
            let (b, ci, h, wd) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
            let co = if transposed { w.shape()[1] } else { w.shape()[0] };
            let kk = geo.col_rows();
            let mut gx = want[0].then(|| vec![0.0; t.numel()]);
            let mut gw = want[1].then(|| vec![0.0; w.numel()]);
            let mut cols = Vec::new();
            let mut dcols = Vec::new();
            for bi in 0..b {
                let img = &t.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                let go = &g[bi * co * oh * ow..(bi + 1) * co * oh * ow];
                if transposed {
                    // the output image plays the role of the unfolded input
                    kernels::im2col(go, geo, &mut cols);
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                        kernels::gemm(ci, kk, h * wd, w.data(), Strides::stored(kk, false), &cols, Strides::stored(h * wd, false), dst, Strides::stored(h * wd, false), false);
                    }
                    if let Some(gw) = gw.as_mut() {
                        kernels::gemm(ci, h * wd, kk, img, Strides::stored(h * wd, false), &cols, Strides::stored(h * wd, true), gw, Strides::stored(kk, false), true);
                    }
                } else {
                    if let Some(gw) = gw.as_mut() {
                        kernels::im2col(img, geo, &mut cols);
                        kernels::gemm(co, oh * ow, kk, go, Strides::stored(oh * ow, false), &cols, Strides::stored(oh * ow, true), gw, Strides::stored(kk, false), true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        dcols.clear();
                        dcols.resize(kk * oh * ow, 0.0);
                        kernels::gemm(kk, co, oh * ow, w.data(), Strides::stored(kk, true), go, Strides::stored(oh * ow, false), &mut dcols, Strides::stored(oh * ow, false), false);
                        kernels::col2im(&dcols, geo, &mut gx[bi * ci * h * wd..(bi + 1) * ci * h * wd]);
                    }
                }
            }
            let mut res = vec![gx, gw];
            if x.len() == 3 {
                let mut gbias = vec![0.0; co];
                for (p, plane) in g.chunks(oh * ow).enumerate() {
                    gbias[p % co] += plane.iter().sum::<f64>();
                }
                res.push(Some(gbias));
            }
            res
        }
        Op::AdaptiveAvgPool2d { out_h, out_w } => {
            let (_, _, h, w) = (x[0].shape()[0], x[0].shape()[1], x[0].shape()[2], x[0].shape()[3]);
            let mut gx = vec![0.0; x[0].numel()];
            for (p, plane) in gx.chunks_mut(h * w).enumerate() {
                for oy in 0..*out_h {
                    let (y0, y1) = kernels::adaptive_bin(oy, h, *out_h);
                    for ox in 0..*out_w {
                        let (x0, x1) = kernels::adaptive_bin(ox, w, *out_w);
                        let gv = g[p * out_h * out_w + oy * out_w + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                        for yy in y0..y1 {
                            plane[yy * w + x0..yy * w + x1].iter_mut().for_each(|v| *v += gv);
                        }
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::ResizeBilinear { out_h, out_w } => {
            let (h, w) = (x[0].shape()[2], x[0].shape()[3]);
            let ty = kernels::bilinear_taps(h, *out_h);
            let tx = kernels::bilinear_taps(w, *out_w);
            let mut gx = vec![0.0; x[0].numel()];
            for (p, plane) in gx.chunks_mut(h * w).enumerate() {
                let src = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = src[oy * out_w + ox];
                        plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                        plane[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::Dropout { .. } => vec![Some(g.iter().zip(&saved[0]).map(|(a, m)| a * m).collect())],
        Op::Concat { axis } => {
            let outer: usize = x[0].shape()[..*axis].iter().product();
            let inner: usize = x[0].shape()[axis + 1..].iter().product();
            let total: usize = x.iter().map(|t| t.shape()[*axis]).sum::<usize>() * inner;
            let mut res = Vec::with_capacity(x.len());
            let mut offset = 0;
            for t in x {
                let len = t.shape()[*axis] * inner;
                let mut gt = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    gt.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                }
                offset += len;
                res.push(Some(gt));
            }
            res
        }
        Op::Reshape { .. } => vec![Some(g.to_vec())],
        Op::Permute { perm } => {
            let map = permute_index_map(x[0].shape(), perm);
            let mut gx = vec![0.0; g.len()];
            for (o, &i) in map.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        }
        Op::IndexSelect { indices } => {
            let row: usize = x[0].shape()[1..].iter().product();
            let mut gx = vec![0.0; x[0].numel()];
            for (k, &i) in indices.iter().enumerate() {
                for j in 0..row {
                    gx[i * row + j] += g[k * row + j];
                }
            }
            vec![Some(gx)]
        }
        Op::ScatterRows { indices, .. } => {
            let row: usize = x[0].shape()[1..].iter().product();
            let mut gx = Vec::with_capacity(x[0].numel());
            for &i in indices.iter() {
                gx.extend_from_slice(&g[i * row..(i + 1) * row]);
            }
            vec![Some(gx)]
        }
        Op::Sum => vec![Some(vec![g[0]; x[0].numel()])],
        Op::Mean => vec![Some(vec![g[0] / x[0].numel() as f64; x[0].numel()])],
        Op::WeightedCrossEntropy { targets, weights, ignore } => {
            let (b, k) = (x[0].shape()[0], x[0].shape()[1]);
            let inner: usize = x[0].shape()[2..].iter().product();
            let (probs, wsum) = (&saved[0], saved[1][0]);
            let mut gx = vec![0.0; x[0].numel()];
            for bi in 0..b {
                for p in 0..inner {
                    let y = targets[bi * inner + p];
                    if y == *ignore {
                        continue;
                    }
                    let y = y as usize;
                    let s = g[0] * weights[y] / wsum;
                    for c in 0..k {
                        let at = (bi * k + c) * inner + p;
                        gx[at] = s * (probs[at] - if c == y { 1.0 } else { 0.0 });
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::Mse => {
            let n = x[0].numel() as f64;
            let ga: Vec<f64> = x[0].data().iter().zip(x[1].data()).map(|(a, b)| 2.0 * (a - b) / n * g[0]).collect();
            let gb = ga.iter().map(|v| -v).collect();
            vec![Some(ga), Some(gb)]
        }
        Op::MaskedRmse { targets } => {
            let b = x[0].shape()[0];
            let per = x[0].numel() / b;
            let (rmse, counts) = (&saved[0], &saved[1]);
            let n_valid = rmse.iter().filter(|v| !v.is_nan()).count() as f64;
            let mut gx = vec![0.0; x[0].numel()];
            for i in 0..b {
                if rmse[i].is_nan() || rmse[i] == 0.0 {
                    continue;
                }
                let s = g[0] / n_valid / (counts[i] * rmse[i]);
                for j in i * per..(i + 1) * per {
                    if targets[j] != 0.0 {
                        gx[j] = s * (x[0].data()[j] - targets[j]);
                    }
                }
            }
            vec![Some(gx)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gelu_fixes_zero_and_softmax_is_uniform() {
        let mut tape = Tape::inference();
        let z = tape.constant(Tensor::zeros(&[1]));
        let g = tape.gelu(z).unwrap();
        assert_eq!(tape.value(g).data(), &[0.0]);
        let ones = tape.constant(Tensor::full(&[4], 1.0));
        let s = tape.softmax(ones).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(2.0));
        let p = tape.param("p", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(p).data(), &[0.0; 3]);
        assert_eq!(g.params()["p"].data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let err = tape.apply_named("frobnicate", Op::Sum, &[a]).unwrap_err();
        assert!(matches!(err, Error::UnknownPrimitive(_)));
        assert!("conv2d".parse::<PrimitiveKind>().is_ok());
    }

    #[test]
    fn dropout_identity_outside_training() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[10], 1.5));
        assert_eq!(tape.dropout(x, 0.5).unwrap(), x);
        let mut tape = Tape::training(RngStream::new(0, "dropout"));
        let x = tape.constant(Tensor::full(&[10], 1.5));
        assert_eq!(tape.dropout(x, 0.0).unwrap(), x);
        let y = tape.dropout(x, 0.5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 3.0));
    }

    #[test]
    fn permute_and_reshape_round_trip() {
        let data: Vec<f64> = (0..24).map(|v| v as f64 * 0.1).collect();
        let mut tape = Tape::inference();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
        let r = tape.reshape(x, &[6, 4]).unwrap();
        let r = tape.reshape(r, &[2, 3, 4]).unwrap();
        assert_eq!(tape.value(r).data(), &data[..]);
    }

    #[test]
    fn weighted_ce_examples() {
        let mut tape = Tape::inference();
        // two pixels, uniform logits, weights (2,1)
        let logits = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let l = tape.weighted_cross_entropy(logits, Arc::new(vec![0, 1]), &[2.0, 1.0], -1).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let all_ignored = tape.weighted_cross_entropy(logits, Arc::new(vec![-1, -1]), &[2.0, 1.0], -1);
        assert!(all_ignored.is_err());
    }

    #[test]
    fn transposed_conv_output_size() {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::full(&[1, 3, 4, 4], 1.0));
        let w = tape.constant(Tensor::full(&[3, 2, 2, 2], 0.5));
        let y = tape.conv_transpose2d(x, w, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 8, 8]);
        // every output pixel receives exactly one tap per input channel
        assert!(tape.value(y).data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }
}
