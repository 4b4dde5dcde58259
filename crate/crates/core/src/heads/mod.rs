//! Task heads on top of the encoder: an MLP classifier on the class token,
//! a UNet-style decoder and a UPerNet-style decoder on four tapped layers.

pub mod finetune;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ones, trunc_normal, zeros, Binding, ParamSet};
use crate::rng::RngStream;
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{self, EncoderConfig};

pub const HEAD: &str = "head";
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    MlpClassifier,
    UnetDecoder,
    UpernetDecoder,
    UpernetRegressor,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::MlpClassifier => "mlp-classifier",
            HeadKind::UnetDecoder => "unet-decoder",
            HeadKind::UpernetDecoder => "upernet-decoder",
            HeadKind::UpernetRegressor => "upernet-regressor",
        }
    }

    pub fn is_dense(self) -> bool {
        !matches!(self, HeadKind::MlpClassifier)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [HeadKind::MlpClassifier, HeadKind::UnetDecoder, HeadKind::UpernetDecoder, HeadKind::UpernetRegressor]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown head kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Classes, or output channels for the regressor.
    pub out_channels: usize,
    /// Hidden width of the MLP classifier.
    pub hidden: usize,
    /// Channel widths of the four decoder stages (UPerNet uses the first).
    pub widths: [usize; 4],
    pub dropout: f64,
    pub pool_scales: Vec<usize>,
}

impl HeadSpec {
    pub fn mlp(classes: usize) -> Self {
        Self {
            kind: HeadKind::MlpClassifier,
            out_channels: classes,
            hidden: 256,
            widths: [64; 4],
            dropout: 0.1,
            pool_scales: Vec::new(),
        }
    }

    pub fn unet(classes: usize, width: usize) -> Self {
        Self {
            kind: HeadKind::UnetDecoder,
            out_channels: classes,
            hidden: 0,
            widths: [width; 4],
            dropout: 0.1,
            pool_scales: Vec::new(),
        }
    }

    pub fn upernet(classes: usize, width: usize) -> Self {
        Self {
            kind: HeadKind::UpernetDecoder,
            out_channels: classes,
            hidden: 0,
            widths: [width; 4],
            dropout: 0.1,
            pool_scales: vec![1, 2, 3, 6],
        }
    }

    pub fn regressor(width: usize) -> Self {
        Self {
            kind: HeadKind::UpernetRegressor,
            out_channels: 1,
            ..Self::upernet(1, width)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::Config("head needs at least one output channel".into()));
        }
        if self.kind == HeadKind::UpernetRegressor && self.out_channels != 1 {
            return Err(Error::Config("the regressor emits exactly one channel".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("head dropout {} outside [0,1)", self.dropout)));
        }
        match self.kind {
            HeadKind::MlpClassifier if self.hidden == 0 => Err(Error::Config("MLP hidden width must be positive".into())),
            HeadKind::UpernetDecoder | HeadKind::UpernetRegressor if self.pool_scales.is_empty() || self.pool_scales.contains(&0) => {
                Err(Error::Config(format!("invalid pool scales {:?}", self.pool_scales)))
            }
            _ if self.kind.is_dense() && self.widths.contains(&0) => Err(Error::Config("decoder widths must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// Upsampling factors of the four UNet stages; their product is the patch
/// size, so the last stage lands on the input resolution.
pub fn stage_strides(patch: usize) -> [usize; 4] {
    let mut s = [1; 4];
    let mut rem = patch.max(1);
    for i in (0..4).rev() {
        if rem % 2 == 0 {
            s[i] = 2;
            rem /= 2;
        }
    }
    s[0] *= rem;
    s
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
    trunc_normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn init_conv(p: &mut ParamSet, name: &str, ci: usize, co: usize, k: usize, rng: &mut RngStream) {
    p.insert(format!("{name}.w"), he_normal(&[co, ci, k, k], ci * k * k, rng));
    p.insert(format!("{name}.b"), zeros(&[co]));
}

fn init_conv_t(p: &mut ParamSet, name: &str, ci: usize, co: usize, k: usize, rng: &mut RngStream) {
    p.insert(format!("{name}.w"), he_normal(&[ci, co, k, k], ci, rng));
    p.insert(format!("{name}.b"), zeros(&[co]));
}

fn init_bn(p: &mut ParamSet, name: &str, c: usize) {
    p.insert(format!("{name}.g"), ones(&[c]));
    p.insert(format!("{name}.b"), zeros(&[c]));
    p.insert(format!("{name}.running_mean"), zeros(&[c]));
    p.insert(format!("{name}.running_var"), ones(&[c]));
}

/// Fresh head parameters for an encoder of width `enc.dim`.
pub fn init_head(spec: &HeadSpec, enc: &EncoderConfig, rng: &mut RngStream) -> Result<ParamSet> {
    spec.validate()?;
    let mut p = ParamSet::new();
    let d = enc.dim;
    let k = spec.out_channels;
    match spec.kind {
        HeadKind::MlpClassifier => {
            p.insert(format!("{HEAD}.fc1.w"), he_normal(&[d, spec.hidden], d, rng));
            p.insert(format!("{HEAD}.fc1.b"), zeros(&[spec.hidden]));
            p.insert(format!("{HEAD}.fc2.w"), trunc_normal(&[spec.hidden, k], vit::INIT_STD, rng));
            p.insert(format!("{HEAD}.fc2.b"), zeros(&[k]));
        }
        HeadKind::UnetDecoder => {
            square_grid(enc)?;
            let w = spec.widths;
            let strides = stage_strides(square_patch(enc)?);
            init_conv(&mut p, &format!("{HEAD}.bottleneck"), d, w[0], 1, rng);
            let mut prev = w[0];
            let mut scale = 1;
            for i in 0..3 {
                let s = strides[i];
                scale *= s;
                let pre = format!("{HEAD}.stage{i}");
                init_conv_t(&mut p, &format!("{pre}.up"), prev, w[i], s, rng);
                init_conv(&mut p, &format!("{pre}.skip.proj"), d, w[i], 1, rng);
                if scale > 1 {
                    init_conv_t(&mut p, &format!("{pre}.skip.up"), w[i], w[i], scale, rng);
                }
                init_conv(&mut p, &format!("{pre}.conv1"), 2 * w[i], w[i], 3, rng);
                init_bn(&mut p, &format!("{pre}.bn1"), w[i]);
                init_conv(&mut p, &format!("{pre}.conv2"), w[i], w[i], 3, rng);
                init_bn(&mut p, &format!("{pre}.bn2"), w[i]);
                prev = w[i];
            }
            init_conv_t(&mut p, &format!("{HEAD}.stage3.up"), prev, w[3], strides[3], rng);
            init_conv(&mut p, &format!("{HEAD}.out"), w[3], k, 1, rng);
        }
        HeadKind::UpernetDecoder | HeadKind::UpernetRegressor => {
            let c = spec.widths[0];
            let g = square_grid(enc)?;
            for (j, &s) in spec.pool_scales.iter().enumerate() {
                let pre = format!("{HEAD}.ppm.{j}");
                init_conv(&mut p, &format!("{pre}.conv"), d, c, 1, rng);
                init_bn(&mut p, &format!("{pre}.bn"), c);
                init_conv_t(&mut p, &format!("{pre}.up"), c, c, g.div_ceil(s), rng);
            }
            init_conv(&mut p, &format!("{HEAD}.ppm.fuse"), d + spec.pool_scales.len() * c, c, 3, rng);
            init_bn(&mut p, &format!("{HEAD}.ppm.bn"), c);
            for i in 0..3 {
                init_conv(&mut p, &format!("{HEAD}.lateral{i}"), d, c, 1, rng);
                init_conv(&mut p, &format!("{HEAD}.fpn{i}"), c, c, 3, rng);
                init_bn(&mut p, &format!("{HEAD}.fpn{i}.bn"), c);
            }
            init_conv(&mut p, &format!("{HEAD}.fuse"), 4 * c, c, 3, rng);
            init_bn(&mut p, &format!("{HEAD}.fuse.bn"), c);
            init_conv(&mut p, &format!("{HEAD}.out"), c, k, 1, rng);
        }
    }
    Ok(p)
}

fn square_grid(enc: &EncoderConfig) -> Result<usize> {
    let [gt, gh, gw] = enc.grid();
    if gt != 1 || gh != gw {
        return Err(Error::Config(format!("decoder heads need a square single-frame patch grid, got {:?}", enc.grid())));
    }
    Ok(gh)
}

fn square_patch(enc: &EncoderConfig) -> Result<usize> {
    if enc.patch[1] != enc.patch[2] {
        return Err(Error::Config(format!("decoder heads need square patches, got {:?}", enc.patch)));
    }
    Ok(enc.patch[1])
}

fn conv(tape: &mut Tape, b: &Binding, name: &str, x: Var, pad: usize) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    tape.conv2d(x, w, Some(bias), 1, pad)
}

fn conv_t(tape: &mut Tape, b: &Binding, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    tape.conv_transpose2d(x, w, Some(bias), stride, 0)
}

/// Batch statistics in training mode (noted for the running-stat update),
/// running statistics otherwise.
fn batch_norm(tape: &mut Tape, b: &Binding, name: &str, x: Var) -> Result<Var> {
    let g = b.var(&format!("{name}.g"))?;
    let beta = b.var(&format!("{name}.b"))?;
    if tape.is_training() {
        let y = tape.batch_norm(x, g, beta, BN_EPS, None)?;
        b.note_batch_norm(name, y);
        Ok(y)
    } else {
        let running = (b.buffer(&format!("{name}.running_mean"))?, b.buffer(&format!("{name}.running_var"))?);
        tape.batch_norm(x, g, beta, BN_EPS, Some(running))
    }
}

fn conv_bn_relu(tape: &mut Tape, b: &Binding, conv_name: &str, bn_name: &str, x: Var) -> Result<Var> {
    let y = conv(tape, b, conv_name, x, 1)?;
    let y = batch_norm(tape, b, bn_name, y)?;
    tape.relu(y)
}

/// Drops the class token of `[B, 1+g·g, D]` and lays the patch tokens out
/// as a `[B, D, g, g]` feature map.
pub fn tokens_to_map(tape: &mut Tape, tokens: Var, grid: usize) -> Result<Var> {
    let [bs, s, d] = match *tape.shape(tokens) {
        [bs, s, d] => [bs, s, d],
        _ => return Err(Error::shape("tokens_to_map", format!("expected [B,S,D], got {:?}", tape.shape(tokens)))),
    };
    if s != grid * grid + 1 {
        return Err(Error::shape("tokens_to_map", format!("{} patch tokens do not form a {grid}x{grid} grid", s - 1)));
    }
    let flat = tape.reshape(tokens, &[bs * s, d])?;
    let rows: Vec<usize> = (0..bs).flat_map(|i| (1..s).map(move |j| i * s + j)).collect();
    let x = tape.index_select(flat, &rows)?;
    let x = tape.reshape(x, &[bs, grid, grid, d])?;
    tape.permute(x, &[0, 3, 1, 2])
}

/// Class-token logits `[B, K]` from final tokens `[B, S, D]`.
pub fn mlp_classify(tape: &mut Tape, b: &Binding, spec: &HeadSpec, tokens: Var) -> Result<Var> {
    let [bs, s, d] = match *tape.shape(tokens) {
        [bs, s, d] => [bs, s, d],
        _ => return Err(Error::shape("mlp_classify", format!("expected [B,S,D], got {:?}", tape.shape(tokens)))),
    };
    let w1 = b.var(&format!("{HEAD}.fc1.w"))?;
    if tape.shape(w1)[0] != d {
        return Err(Error::shape("mlp_classify", format!("class token of width {d} for weights {:?}", tape.shape(w1))));
    }
    let flat = tape.reshape(tokens, &[bs * s, d])?;
    let rows: Vec<usize> = (0..bs).map(|i| i * s).collect();
    let cls = tape.index_select(flat, &rows)?;
    let h = vit::linear(tape, b, &format!("{HEAD}.fc1"), cls)?;
    let h = tape.relu(h)?;
    let h = tape.dropout(h, spec.dropout)?;
    vit::linear(tape, b, &format!("{HEAD}.fc2"), h)
}

pub fn unet_decode(tape: &mut Tape, b: &Binding, spec: &HeadSpec, enc: &EncoderConfig, taps: [Var; 4], out: (usize, usize)) -> Result<Var> {
    let g = square_grid(enc)?;
    let strides = stage_strides(square_patch(enc)?);
    let deep = tokens_to_map(tape, taps[3], g)?;
    let mut x = conv(tape, b, &format!("{HEAD}.bottleneck"), deep, 0)?;
    let mut scale = 1;
    for i in 0..3 {
        let pre = format!("{HEAD}.stage{i}");
        scale *= strides[i];
        x = conv_t(tape, b, &format!("{pre}.up"), x, strides[i])?;
        let skip = tokens_to_map(tape, taps[2 - i], g)?;
        let mut skip = conv(tape, b, &format!("{pre}.skip.proj"), skip, 0)?;
        if scale > 1 {
            skip = conv_t(tape, b, &format!("{pre}.skip.up"), skip, scale)?;
        }
        x = tape.concat(&[x, skip], 1)?;
        x = conv_bn_relu(tape, b, &format!("{pre}.conv1"), &format!("{pre}.bn1"), x)?;
        x = conv_bn_relu(tape, b, &format!("{pre}.conv2"), &format!("{pre}.bn2"), x)?;
        x = tape.dropout(x, spec.dropout)?;
    }
    x = conv_t(tape, b, &format!("{HEAD}.stage3.up"), x, strides[3])?;
    let logits = conv(tape, b, &format!("{HEAD}.out"), x, 0)?;
    tape.resize_bilinear(logits, out.0, out.1)
}

/// Pyramid pooling on the top map; returns `[B, c, g, g]`.
fn ppm(tape: &mut Tape, b: &Binding, spec: &HeadSpec, top: Var, g: usize) -> Result<Var> {
    let mut branches = vec![top];
    for (j, &s) in spec.pool_scales.iter().enumerate() {
        let pre = format!("{HEAD}.ppm.{j}");
        let s = s.min(g);
        let p = tape.adaptive_avg_pool2d(top, s, s)?;
        let p = conv(tape, b, &format!("{pre}.conv"), p, 0)?;
        let p = batch_norm(tape, b, &format!("{pre}.bn"), p)?;
        let p = tape.relu(p)?;
        let p = conv_t(tape, b, &format!("{pre}.up"), p, g.div_ceil(s))?;
        branches.push(tape.resize_bilinear(p, g, g)?);
    }
    let cat = tape.concat(&branches, 1)?;
    conv_bn_relu(tape, b, &format!("{HEAD}.ppm.fuse"), &format!("{HEAD}.ppm.bn"), cat)
}

/// Relative resolution of the four pyramid levels (finest first).
const PYRAMID: [usize; 3] = [4, 2, 1];

pub fn upernet_decode(tape: &mut Tape, b: &Binding, spec: &HeadSpec, enc: &EncoderConfig, taps: [Var; 4], out: (usize, usize)) -> Result<Var> {
    let g = square_grid(enc)?;
    let top = tokens_to_map(tape, taps[3], g)?;
    let mut feats = vec![ppm(tape, b, spec, top, g)?];
    // top-down pathway: each lateral adds the upsampled coarser level
    for i in (0..3).rev() {
        let m = tokens_to_map(tape, taps[i], g)?;
        let lat = conv(tape, b, &format!("{HEAD}.lateral{i}"), m, 0)?;
        let r = g * PYRAMID[i];
        let lat = tape.resize_bilinear(lat, r, r)?;
        let coarser = *feats.last().expect("ppm output");
        let up = tape.resize_bilinear(coarser, r, r)?;
        let sum = tape.add(lat, up)?;
        feats.push(conv_bn_relu(tape, b, &format!("{HEAD}.fpn{i}"), &format!("{HEAD}.fpn{i}.bn"), sum)?);
    }
    let common = g * PYRAMID[0];
    let resized: Vec<Var> = feats
        .iter()
        .rev()
        .map(|&f| tape.resize_bilinear(f, common, common))
        .collect::<Result<_>>()?;
    let cat = tape.concat(&resized, 1)?;
    let fused = conv_bn_relu(tape, b, &format!("{HEAD}.fuse"), &format!("{HEAD}.fuse.bn"), cat)?;
    let fused = tape.dropout(fused, spec.dropout)?;
    let logits = conv(tape, b, &format!("{HEAD}.out"), fused, 0)?;
    tape.resize_bilinear(logits, out.0, out.1)
}

/// Runs the head on encoder outputs. Dense heads return `[B, K, H, W]`,
/// the classifier `[B, K]`.
pub fn head_forward(tape: &mut Tape, b: &Binding, spec: &HeadSpec, enc: &EncoderConfig, tokens: Var, taps: [Var; 4]) -> Result<Var> {
    let out = (enc.height, enc.width);
    match spec.kind {
        HeadKind::MlpClassifier => mlp_classify(tape, b, spec, tokens),
        HeadKind::UnetDecoder => unet_decode(tape, b, spec, enc, taps, out),
        HeadKind::UpernetDecoder | HeadKind::UpernetRegressor => upernet_decode(tape, b, spec, enc, taps, out),
    }
}

/// Loss attached to a head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossSpec {
    WeightedCrossEntropy { weights: Vec<f64>, ignore: i64 },
    MaskedRmse,
}

impl LossSpec {
    pub fn weighted(weights: &[f64]) -> Self {
        LossSpec::WeightedCrossEntropy { weights: weights.to_vec(), ignore: -1 }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossSpec::WeightedCrossEntropy { weights, ignore } = self {
            if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
                return Err(Error::Config(format!("class weights {weights:?} must be positive")));
            }
            if *ignore >= 0 && (*ignore as usize) < weights.len() {
                return Err(Error::Config(format!("ignore value {ignore} collides with a class index")));
            }
        }
        Ok(())
    }
}

/// Targets for one batch, flattened in the logits' position order.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Arc<Vec<i64>>),
    Values(Arc<Vec<f64>>),
}

pub fn apply_loss(tape: &mut Tape, spec: &LossSpec, out: Var, targets: &Targets) -> Result<Var> {
    match (spec, targets) {
        (LossSpec::WeightedCrossEntropy { weights, ignore }, Targets::Classes(t)) => {
            tape.weighted_cross_entropy(out, t.clone(), weights, *ignore)
        }
        (LossSpec::MaskedRmse, Targets::Values(t)) => tape.masked_rmse(out, t.clone()),
        _ => Err(Error::Config("loss kind does not match the target kind".into())),
    }
}

/// Weighted cross-entropy of logits `[B, K, ...]` as a plain value.
pub fn weighted_cross_entropy(logits: &Tensor, targets: &[i64], spec: &LossSpec) -> Result<f64> {
    let mut tape = Tape::inference();
    let x = tape.constant(logits.clone());
    let l = apply_loss(&mut tape, spec, x, &Targets::Classes(Arc::new(targets.to_vec())))?;
    Ok(tape.value(l).item())
}

/// Masked RMSE of one `H×W` prediction as a plain value.
pub fn masked_rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("masked_rmse", format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::new(vec![1, pred.len()], pred.to_vec())?);
    let l = tape.masked_rmse(x, Arc::new(target.to_vec()))?;
    Ok(tape.value(l).item())
}

/// Class index per position of `[B, K, ...]` logits; ties go to the lower
/// class.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<i64>> {
    if logits.rank() < 2 {
        return Err(Error::shape("argmax", format!("expected [B,K,...], got {:?}", logits.shape())));
    }
    let (bs, k) = (logits.shape()[0], logits.shape()[1]);
    let inner: usize = logits.shape()[2..].iter().product();
    let d = logits.data();
    let mut out = Vec::with_capacity(bs * inner);
    for i in 0..bs {
        for p in 0..inner {
            let mut best = 0;
            for c in 1..k {
                if d[(i * k + c) * inner + p] > d[(i * k + best) * inner + p] {
                    best = c;
                }
            }
            out.push(best as i64);
        }
    }
    Ok(out)
}
