//! Masked autoencoders and dual-MAE distillation.
//!
//! A frozen teacher MAE runs without masking and its reconstructions become
//! the targets for a narrower student MAE that only sees 25% of the patches.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{trunc_normal, zeros, Adam, Binding, ParamSet, WarmupCosine};
use crate::rng::RngStream;
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{self, EncoderConfig, INIT_STD};

/// Partition of patch indices into masked and visible sets, both sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

/// Masks `round(ratio·n)` patches (ties to even) chosen uniformly without
/// replacement.
pub fn sample_mask(n: usize, ratio: f64, rng: &mut RngStream) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0,1)")));
    }
    let k = (ratio * n as f64).round_ties_even() as usize;
    let perm = rng.permutation(n);
    let mut masked = perm[..k].to_vec();
    let mut visible = perm[k..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan { n, masked, visible })
}

impl MaskPlan {
    pub fn unmasked(n: usize) -> Self {
        Self {
            n,
            masked: Vec::new(),
            visible: (0..n).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl DecoderConfig {
    /// One block of width `D/2` (at least 16).
    pub fn for_encoder(enc: &EncoderConfig) -> Self {
        let dim = (enc.dim / 2).max(16);
        let heads = if dim % enc.heads == 0 { enc.heads } else { 1 };
        Self {
            dim,
            depth: 1,
            heads,
            mlp_ratio: enc.mlp_ratio,
        }
    }
}

/// Encoder plus reconstruction decoder. Parameters live under `encoder.`
/// and `decoder.`.
#[derive(Clone, Debug)]
pub struct Mae {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub params: ParamSet,
}

pub const ENCODER: &str = "encoder";
pub const DECODER: &str = "decoder";

impl Mae {
    pub fn init(encoder: EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        let decoder = DecoderConfig::for_encoder(&encoder);
        let mut params = vit::init_encoder(&encoder, ENCODER, rng)?;
        let (d, dd) = (encoder.dim, decoder.dim);
        params.insert(format!("{DECODER}.embed.w"), trunc_normal(&[d, dd], INIT_STD, rng));
        params.insert(format!("{DECODER}.embed.b"), zeros(&[dd]));
        params.insert(format!("{DECODER}.mask_token"), trunc_normal(&[dd], INIT_STD, rng));
        vit::init_blocks(&mut params, DECODER, dd, decoder.depth, decoder.mlp_ratio, rng);
        params.insert(format!("{DECODER}.pred.w"), trunc_normal(&[dd, encoder.patch_dim()], INIT_STD, rng));
        params.insert(format!("{DECODER}.pred.b"), zeros(&[encoder.patch_dim()]));
        Ok(Self { encoder, decoder, params })
    }

    /// The encoder half, which is what distillation keeps.
    pub fn encoder_params(&self) -> ParamSet {
        self.params.with_prefix(&format!("{ENCODER}."))
    }
}

/// Reconstructs all `N` patches of each sample: `[B, N, patch_dim]`.
///
/// The encoder only receives the visible patches of each plan; mask tokens
/// fill the masked positions before the decoder, which adds its own
/// positional encoding to every row.
pub fn mae_forward(tape: &mut Tape, b: &Binding, mae: &Mae, patches: Var, plans: &[MaskPlan]) -> Result<Var> {
    let enc = &mae.encoder;
    let n = enc.num_patches();
    let bs = plans.len();
    if plans.iter().any(|p| p.n != n) {
        return Err(Error::shape("mae_forward", format!("mask plan size does not match {n} patches")));
    }
    let nv = plans.first().map_or(0, |p| p.visible.len());
    if plans.iter().any(|p| p.visible.len() != nv) {
        return Err(Error::shape("mae_forward", "plans in one batch must keep the same number of patches"));
    }
    let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
    let out = vit::encode_patches(tape, b, enc, ENCODER, patches, Some(&visible))?;
    let dd = mae.decoder.dim;
    let x = vit::linear(tape, b, &format!("{DECODER}.embed"), out.tokens)?;
    let x = tape.reshape(x, &[bs * (nv + 1), dd])?;
    // rows of the full (class + N) sequence that the encoder produced
    let seq = n + 1;
    let mut kept = Vec::with_capacity(bs * (nv + 1));
    let mut holes = Vec::new();
    for (i, p) in plans.iter().enumerate() {
        kept.push(i * seq);
        kept.extend(p.visible.iter().map(|&j| i * seq + 1 + j));
        holes.extend(p.masked.iter().map(|&j| i * seq + 1 + j));
    }
    let mut full = tape.scatter_rows(x, &kept, bs * seq)?;
    if !holes.is_empty() {
        let tok = b.var(&format!("{DECODER}.mask_token"))?;
        let tok = tape.reshape(tok, &[1, dd])?;
        let toks = tape.index_select(tok, &vec![0; holes.len()])?;
        let filled = tape.scatter_rows(toks, &holes, bs * seq)?;
        full = tape.add(full, filled)?;
    }
    let full = tape.reshape(full, &[bs, seq, dd])?;
    let pos = vit::sincos_posenc_3d(enc.grid(), dd)?;
    let pos = tape.constant(vit::tile_batch(&pos, bs));
    let mut h = tape.add(full, pos)?;
    for i in 0..mae.decoder.depth {
        h = vit::transformer_block(tape, b, &format!("{DECODER}.blocks.{i}"), h, mae.decoder.heads, enc.dropout)?.tokens;
    }
    let h = vit::layer_norm(tape, b, &format!("{DECODER}.norm"), h)?;
    let rec = vit::linear(tape, b, &format!("{DECODER}.pred"), h)?;
    let pd = enc.patch_dim();
    let rec = tape.reshape(rec, &[bs * seq, pd])?;
    let rows: Vec<usize> = (0..bs).flat_map(|i| (1..seq).map(move |j| i * seq + j)).collect();
    let rec = tape.index_select(rec, &rows)?;
    tape.reshape(rec, &[bs, n, pd])
}

/// Mean squared error over the masked rows of every sample.
pub fn distill_loss(tape: &mut Tape, student: Var, teacher: &Tensor, plans: &[MaskPlan]) -> Result<Var> {
    let shape = tape.shape(student).to_vec();
    if shape != teacher.shape() || shape.len() != 3 || shape[0] != plans.len() {
        return Err(Error::shape("distill_loss", format!("student {:?} vs teacher {:?}", shape, teacher.shape())));
    }
    let (n, pd) = (shape[1], shape[2]);
    let rows: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.masked.iter().map(move |&j| i * n + j))
        .collect();
    if rows.is_empty() {
        return Err(Error::Data("distillation loss is undefined without masked patches".into()));
    }
    let s = tape.reshape(student, &[shape[0] * n, pd])?;
    let s = tape.index_select(s, &rows)?;
    let mut target = Vec::with_capacity(rows.len() * pd);
    for &r in &rows {
        target.extend_from_slice(&teacher.data()[r * pd..(r + 1) * pd]);
    }
    let t = tape.constant(Tensor::new(vec![rows.len(), pd], target)?);
    tape.mse(s, t)
}

/// Inference-mode reconstruction of whole cubes with nothing masked.
pub fn reconstruct(mae: &Mae, cubes: &[&Tensor]) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let b = Binding::new(&mut tape, &mae.params, &[]);
    let x = tape.constant(vit::patch_batch(cubes, &mae.encoder)?);
    let plans = vec![MaskPlan::unmasked(mae.encoder.num_patches()); cubes.len()];
    let rec = mae_forward(&mut tape, &b, mae, x, &plans)?;
    Ok(tape.value(rec).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub student_mask_ratio: f64,
    pub teacher_mask_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            student_mask_ratio: 0.75,
            teacher_mask_ratio: 0.0,
            steps: 200,
            batch_size: 8,
            lr: 1e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.teacher_mask_ratio != 0.0 {
            return Err(Error::Config("the teacher runs without masking (ratio 0)".into()));
        }
        if !(0.0..1.0).contains(&self.student_mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0,1)", self.student_mask_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_history_csv(history: &[StepRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "step,loss,learning_rate")?;
    for r in history {
        writeln!(w, "{},{:.9e},{:.9e}", r.step, r.loss, r.lr)?;
    }
    Ok(())
}

/// What a training run optimises against.
pub enum Target<'a> {
    /// Reconstructions of a frozen teacher, indexed like the cubes.
    Teacher(&'a [Tensor]),
    /// The raw patches themselves (plain MAE).
    Pixels,
}

/// Trains `student` in place and returns the per-step loss history.
///
/// Each step draws `batch_size` cubes (a fresh permutation per pass) and a
/// fresh mask per cube; the loss is MSE at the masked rows.
pub fn train_mae(student: &mut Mae, cubes: &[Tensor], target: Target, cfg: &DistillConfig) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if cubes.is_empty() && cfg.steps > 0 {
        return Err(Error::Data("no training cubes".into()));
    }
    let patches: Vec<Tensor> = cubes
        .iter()
        .map(|c| vit::patch_batch(&[c], &student.encoder))
        .collect::<Result<_>>()?;
    let targets: Vec<Tensor> = match target {
        Target::Teacher(t) => {
            if t.len() != cubes.len() {
                return Err(Error::Data(format!("{} teacher targets for {} cubes", t.len(), cubes.len())));
            }
            t.to_vec()
        }
        Target::Pixels => patches.clone(),
    };
    let root = RngStream::new(cfg.seed, "distill");
    let mut order_rng = root.child("order");
    let mut mask_rng = root.child("mask");
    let schedule = WarmupCosine::new(cfg.lr, cfg.warmup_fraction, cfg.steps)?;
    let mut opt = Adam::with_weight_decay(cfg.weight_decay);
    let n = student.encoder.num_patches();
    let pd = student.encoder.patch_dim();
    let bs = cfg.batch_size.min(cubes.len().max(1));
    let mut order = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut pick = Vec::with_capacity(bs);
        while pick.len() < bs {
            if order.is_empty() {
                order = order_rng.permutation(cubes.len());
            }
            pick.push(order.pop().expect("refilled"));
        }
        let plans: Vec<MaskPlan> = (0..bs)
            .map(|_| sample_mask(n, cfg.student_mask_ratio, &mut mask_rng))
            .collect::<Result<_>>()?;
        let mut xb = Vec::with_capacity(bs * n * pd);
        let mut tb = Vec::with_capacity(bs * n * pd);
        for &i in &pick {
            xb.extend_from_slice(patches[i].data());
            tb.extend_from_slice(targets[i].data());
        }
        let mut tape = Tape::training(root.child(&format!("dropout/{step}")));
        let b = Binding::new(&mut tape, &student.params, &[""]);
        let x = tape.constant(Tensor::new(vec![bs, n, pd], xb)?);
        let rec = mae_forward(&mut tape, &b, student, x, &plans)?;
        let loss = distill_loss(&mut tape, rec, &Tensor::new(vec![bs, n, pd], tb)?, &plans)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { stage: "step", index: step });
        }
        let grads = tape.backward(loss)?.params();
        let lr = schedule.lr(step);
        drop(b);
        opt.step(&mut student.params, &grads, lr)?;
        history.push(StepRecord { step, loss: value, lr });
    }
    Ok(history)
}

/// Dual-MAE distillation: caches the frozen teacher's unmasked
/// reconstructions, then trains the student against them at masked rows.
pub fn train_distill(teacher: &Mae, student: &mut Mae, cubes: &[Tensor], cfg: &DistillConfig) -> Result<Vec<StepRecord>> {
    if teacher.encoder.cube_shape() != student.encoder.cube_shape() || teacher.encoder.patch != student.encoder.patch {
        return Err(Error::Config("teacher and student must accept the same cubes and patches".into()));
    }
    let mut targets = Vec::with_capacity(cubes.len());
    for c in cubes {
        let rec = reconstruct(teacher, &[c])?;
        targets.push(rec);
    }
    train_mae(student, cubes, Target::Teacher(&targets), cfg)
}

/// Mean of the last `window` losses.
pub fn smoothed_tail(history: &[StepRecord], window: usize) -> Option<f64> {
    let w = window.min(history.len());
    (w > 0).then(|| history[history.len() - w..].iter().map(|r| r.loss).sum::<f64>() / w as f64)
}
