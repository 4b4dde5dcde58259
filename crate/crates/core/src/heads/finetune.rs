//! Head fine-tuning on top of a frozen (or trainable) encoder.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use super::{apply_loss, head_forward, init_head, HeadKind, HeadSpec, LossSpec, Targets, BN_MOMENTUM, HEAD};
use crate::error::{Error, Result};
use crate::mae::ENCODER;
use crate::params::{Adam, Binding, ParamSet, WarmupCosine};
use crate::rng::RngStream;
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{self, EncoderConfig, Encoded};

/// Downstream tasks with their head, loss and schedule defaults.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    CloudClassification,
    CloudSegmentation,
    Flood,
    Landslide,
    Biomass,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::CloudClassification, Task::CloudSegmentation, Task::Flood, Task::Landslide, Task::Biomass];

    pub fn name(self) -> &'static str {
        match self {
            Task::CloudClassification => "cloud-classification",
            Task::CloudSegmentation => "cloud-segmentation",
            Task::Flood => "flood",
            Task::Landslide => "landslide",
            Task::Biomass => "biomass",
        }
    }

    pub fn head(self, width: usize) -> HeadSpec {
        match self {
            Task::CloudClassification => HeadSpec::mlp(2),
            Task::CloudSegmentation | Task::Landslide => HeadSpec::unet(2, width),
            Task::Flood => HeadSpec::upernet(2, width),
            Task::Biomass => HeadSpec::regressor(width),
        }
    }

    pub fn loss(self) -> LossSpec {
        match self {
            Task::CloudClassification | Task::CloudSegmentation => LossSpec::weighted(&[2.0, 1.0]),
            Task::Flood | Task::Landslide => LossSpec::weighted(&[1.0, 4.0]),
            Task::Biomass => LossSpec::MaskedRmse,
        }
    }

    /// Full-scale epochs and batch size divided by `scale` (at least one
    /// epoch and a batch of one).
    pub fn train_config(self, scale: f64) -> TrainConfig {
        let (epochs, batch, restarts) = match self {
            Task::CloudClassification => (300, 128, 1),
            Task::CloudSegmentation => (60, 32, 1),
            Task::Flood => (300, 32, 1),
            Task::Landslide => (150, 32, 4),
            Task::Biomass => (200, 20, 4),
        };
        let s = scale.max(1.0);
        TrainConfig {
            epochs: ((epochs as f64 / s).round() as usize).max(1),
            batch_size: ((batch as f64 / s).round() as usize).max(1),
            restarts,
            ..TrainConfig::default()
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    /// Cosine cycles after warmup; more than one gives warm restarts.
    pub restarts: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub patience: usize,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            warmup_fraction: 0.1,
            restarts: 1,
            weight_decay: 0.0,
            seed: 0,
            patience: 10,
            hflip: true,
            vflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0,1)", self.warmup_fraction)));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    /// Encoder weights are untouched; features are computed once per
    /// sample and flip and reused.
    Frozen,
    Trainable,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(i64),
    /// `H×W` classes, `-1` where missing.
    Mask(Arc<Vec<i64>>),
    /// `H×W` regression targets, zero where missing.
    Values(Arc<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, T, H, W]`.
    pub cube: Tensor,
    pub label: Label,
}

/// Per-epoch draw order over the training set.
#[derive(Clone, Debug, PartialEq)]
pub enum Sampler {
    /// A fresh permutation each epoch.
    Shuffle,
    /// As many draws with replacement as there are samples, proportional to
    /// the weights. Epochs are counted over the resampled stream.
    Weighted(Vec<f64>),
}

impl Sampler {
    pub fn epoch(&self, n: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
        match self {
            Sampler::Shuffle => Ok(rng.permutation(n)),
            Sampler::Weighted(w) => {
                if w.len() != n {
                    return Err(Error::Data(format!("{} sampling weights for {n} samples", w.len())));
                }
                let dist = WeightedIndex::new(w).map_err(|e| Error::Data(format!("sampling weights: {e}")))?;
                Ok((0..n).map(|_| dist.sample(rng.inner())).collect())
            }
        }
    }
}

/// Encoder plus head. Encoder tensors live under `encoder.`, head tensors
/// under `head.`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub encoder: EncoderConfig,
    pub head: HeadSpec,
    pub params: ParamSet,
}

impl TaskModel {
    pub fn new(encoder: EncoderConfig, encoder_params: ParamSet, head: HeadSpec, rng: &mut RngStream) -> Result<Self> {
        encoder.validate()?;
        let mut params = encoder_params.with_prefix(&format!("{ENCODER}."));
        if params.is_empty() {
            return Err(Error::Config("no encoder tensors found".into()));
        }
        params.extend(init_head(&head, &encoder, rng)?);
        Ok(Self { encoder, head, params })
    }

    /// Random encoder and random head.
    pub fn random(encoder: EncoderConfig, head: HeadSpec, rng: &mut RngStream) -> Result<Self> {
        let enc = vit::init_encoder(&encoder, ENCODER, &mut rng.child("encoder"))?;
        Self::new(encoder, enc, head, &mut rng.child("head"))
    }

    pub fn encoder_params(&self) -> ParamSet {
        self.params.with_prefix(&format!("{ENCODER}."))
    }

    pub fn head_params(&self) -> ParamSet {
        self.params.with_prefix(&format!("{HEAD}."))
    }

    /// Replaces the head tensors, e.g. with a head trained elsewhere.
    pub fn set_head_params(&mut self, head: ParamSet) -> Result<()> {
        for (name, t) in self.head_params().iter() {
            let new = head.get(name)?;
            if new.shape() != t.shape() {
                return Err(Error::shape("set_head", format!("{name}: {:?} for {:?}", new.shape(), t.shape())));
            }
        }
        self.params.extend(head.with_prefix(&format!("{HEAD}.")));
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, patches: Var) -> Result<Var> {
        let out = vit::encode_patches(tape, b, &self.encoder, ENCODER, patches, None)?;
        head_forward(tape, b, &self.head, &self.encoder, out.tokens, out.taps)
    }

    /// Inference outputs for `cubes`: `[B, K]` for the classifier,
    /// `[B, K, H, W]` for dense heads.
    pub fn predict(&self, cubes: &[&Tensor]) -> Result<Tensor> {
        let mut shape = Vec::new();
        let mut data = Vec::new();
        for chunk in cubes.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::inference();
            let b = Binding::new(&mut tape, &self.params, &[]);
            let x = tape.constant(vit::patch_batch(chunk, &self.encoder)?);
            let y = self.forward(&mut tape, &b, x)?;
            let t = tape.value(y);
            shape = t.shape().to_vec();
            data.extend_from_slice(t.data());
        }
        if cubes.is_empty() {
            return Ok(Tensor::zeros(&[0]));
        }
        shape[0] = cubes.len();
        Tensor::new(shape, data)
    }
}

const PREDICT_CHUNK: usize = 16;

/// Flips the last two axes of a `[..., H, W]` buffer.
fn flip_buffer<T: Copy>(data: &[T], h: usize, w: usize, hflip: bool, vflip: bool) -> Vec<T> {
    let plane = h * w;
    let mut out = Vec::with_capacity(data.len());
    for p in data.chunks(plane) {
        for y in 0..h {
            let sy = if vflip { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if hflip { w - 1 - x } else { x };
                out.push(p[sy * w + sx]);
            }
        }
    }
    out
}

/// Flips a sample's cube and label together.
pub fn flip_sample(s: &Sample, hflip: bool, vflip: bool) -> Result<Sample> {
    if !hflip && !vflip {
        return Ok(s.clone());
    }
    let shape = s.cube.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let cube = Tensor::new(shape.to_vec(), flip_buffer(s.cube.data(), h, w, hflip, vflip))?;
    let label = match &s.label {
        Label::Class(c) => Label::Class(*c),
        Label::Mask(m) => Label::Mask(Arc::new(flip_buffer(m, h, w, hflip, vflip))),
        Label::Values(v) => Label::Values(Arc::new(flip_buffer(v, h, w, hflip, vflip))),
    };
    Ok(Sample { cube, label })
}

fn batch_targets(samples: &[&Sample], kind: HeadKind) -> Result<Targets> {
    match samples.first().map(|s| &s.label) {
        Some(Label::Class(_)) if kind == HeadKind::MlpClassifier => Ok(Targets::Classes(Arc::new(
            samples
                .iter()
                .map(|s| match s.label {
                    Label::Class(c) => Ok(c),
                    _ => Err(Error::Data("mixed label kinds in one batch".into())),
                })
                .collect::<Result<_>>()?,
        ))),
        Some(Label::Mask(_)) if kind.is_dense() => {
            let mut t = Vec::new();
            for s in samples {
                match &s.label {
                    Label::Mask(m) => t.extend_from_slice(m),
                    _ => return Err(Error::Data("mixed label kinds in one batch".into())),
                }
            }
            Ok(Targets::Classes(Arc::new(t)))
        }
        Some(Label::Values(_)) if kind.is_dense() => {
            let mut t = Vec::new();
            for s in samples {
                match &s.label {
                    Label::Values(v) => t.extend_from_slice(v),
                    _ => return Err(Error::Data("mixed label kinds in one batch".into())),
                }
            }
            Ok(Targets::Values(Arc::new(t)))
        }
        Some(_) => Err(Error::Data(format!("labels do not fit a {} head", kind))),
        None => Err(Error::Data("empty batch".into())),
    }
}

fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub selected: bool,
}

pub fn write_history_csv(history: &[EpochRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "epoch,train_loss,val_loss,lr,selected")?;
    for r in history {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr, u8::from(r.selected))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Model with the head from the best validation epoch.
    pub model: TaskModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Encoder features keyed by (sample, hflip, vflip).
struct FeatureCache<'a> {
    model: &'a TaskModel,
    samples: &'a [Sample],
    cache: HashMap<(usize, bool, bool), Encoded>,
}

impl<'a> FeatureCache<'a> {
    fn new(model: &'a TaskModel, samples: &'a [Sample]) -> Self {
        Self {
            model,
            samples,
            cache: HashMap::new(),
        }
    }

    fn fill(&mut self, keys: &[(usize, bool, bool)]) -> Result<()> {
        let missing: Vec<_> = keys.iter().filter(|k| !self.cache.contains_key(k)).copied().collect();
        let flipped: Vec<Sample> = missing
            .iter()
            .map(|&(i, h, v)| flip_sample(&self.samples[i], h, v))
            .collect::<Result<_>>()?;
        for (chunk_keys, chunk) in missing.chunks(PREDICT_CHUNK).zip(flipped.chunks(PREDICT_CHUNK)) {
            let cubes: Vec<&Tensor> = chunk.iter().map(|s| &s.cube).collect();
            let enc = vit::encode(&cubes, &self.model.encoder, &self.model.params, ENCODER)?;
            for (k, e) in chunk_keys.iter().zip(enc) {
                self.cache.insert(*k, e);
            }
        }
        Ok(())
    }

    /// Token and tap constants for the batch.
    fn batch(&mut self, tape: &mut Tape, keys: &[(usize, bool, bool)]) -> Result<(Var, [Var; 4])> {
        self.fill(keys)?;
        let enc: Vec<&Encoded> = keys.iter().map(|k| &self.cache[k]).collect();
        let tokens = tape.constant(stack(&enc.iter().map(|e| &e.tokens).collect::<Vec<_>>())?);
        let mut taps = [tokens; 4];
        for (j, tap) in taps.iter_mut().enumerate() {
            *tap = tape.constant(stack(&enc.iter().map(|e| &e.taps[j]).collect::<Vec<_>>())?);
        }
        Ok((tokens, taps))
    }
}

struct Trainer<'a> {
    mode: EncoderMode,
    loss: &'a LossSpec,
    val: &'a [Sample],
}

impl Trainer<'_> {
    /// Forward pass to the loss for one batch.
    fn batch_loss(
        &self,
        tape: &mut Tape,
        b: &Binding,
        model: &TaskModel,
        cache: Option<&mut FeatureCache>,
        samples: &[Sample],
        keys: &[(usize, bool, bool)],
    ) -> Result<Var> {
        let flipped: Vec<Sample>;
        let labelled: Vec<&Sample> = if keys.iter().all(|&(_, h, v)| !h && !v) {
            keys.iter().map(|k| &samples[k.0]).collect()
        } else {
            flipped = keys.iter().map(|&(i, h, v)| flip_sample(&samples[i], h, v)).collect::<Result<_>>()?;
            flipped.iter().collect()
        };
        let out = match cache {
            Some(cache) => {
                let (tokens, taps) = cache.batch(tape, keys)?;
                head_forward(tape, b, &model.head, &model.encoder, tokens, taps)?
            }
            None => {
                let cubes: Vec<&Tensor> = labelled.iter().map(|s| &s.cube).collect();
                let x = tape.constant(vit::patch_batch(&cubes, &model.encoder)?);
                model.forward(tape, b, x)?
            }
        };
        let targets = batch_targets(&labelled, model.head.kind)?;
        apply_loss(tape, self.loss, out, &targets)
    }

    fn val_loss(&self, model: &TaskModel, cache: Option<&mut FeatureCache>, batch_size: usize) -> Result<f64> {
        let keys: Vec<_> = (0..self.val.len()).map(|i| (i, false, false)).collect();
        let mut total = 0.0;
        let mut cache = cache;
        for chunk in keys.chunks(batch_size) {
            let mut tape = Tape::inference();
            let trainable: &[&str] = &[];
            let b = Binding::new(&mut tape, &model.params, trainable);
            let l = self.batch_loss(&mut tape, &b, model, cache.as_deref_mut(), self.val, chunk)?;
            total += tape.value(l).item() * chunk.len() as f64;
        }
        Ok(total / self.val.len() as f64)
    }
}

/// Trains the head (and the encoder when `mode` is trainable) and returns
/// the model from the epoch with the lowest validation loss.
pub fn finetune(
    model: &TaskModel,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    loss: &LossSpec,
    sampler: &Sampler,
    mode: EncoderMode,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    loss.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("fine-tuning needs non-empty training and validation sets".into()));
    }
    for s in train.iter().chain(val) {
        if s.cube.shape() != model.encoder.cube_shape() {
            return Err(Error::Data(format!(
                "tile {:?} does not match the encoder input {:?}",
                s.cube.shape(),
                model.encoder.cube_shape()
            )));
        }
    }
    let trainer = Trainer { mode, loss, val };
    let frozen = trainer.mode == EncoderMode::Frozen;
    let reference = model.clone();
    let mut train_cache = FeatureCache::new(&reference, train);
    let mut val_cache = FeatureCache::new(&reference, val);
    let prefixes: Vec<String> = match mode {
        EncoderMode::Frozen => vec![format!("{HEAD}.")],
        EncoderMode::Trainable => vec![String::new()],
    };
    let prefixes: Vec<&str> = prefixes.iter().map(String::as_str).collect();

    let root = RngStream::new(cfg.seed, "finetune");
    let mut order_rng = root.child("order");
    let mut flip_rng = root.child("flip");
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = WarmupCosine::new(cfg.lr, cfg.warmup_fraction, cfg.epochs * steps_per_epoch)?.with_restarts(cfg.restarts);
    let mut opt = Adam::with_weight_decay(cfg.weight_decay);

    let mut current = model.clone();
    let mut best = (f64::INFINITY, 0usize, current.params.clone());
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut since_best = 0;
    let mut step = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let order = sampler.epoch(train.len(), &mut order_rng)?;
        let mut total = 0.0;
        let mut lr = schedule.lr(step);
        for chunk in order.chunks(cfg.batch_size) {
            let keys: Vec<_> = chunk
                .iter()
                .map(|&i| (i, cfg.hflip && flip_rng.bernoulli(0.5), cfg.vflip && flip_rng.bernoulli(0.5)))
                .collect();
            let mut tape = Tape::training(root.child(&format!("dropout/{step}")));
            let b = Binding::new(&mut tape, &current.params, &prefixes);
            let cache = frozen.then_some(&mut train_cache);
            let l = trainer.batch_loss(&mut tape, &b, &current, cache, train, &keys)?;
            let value = tape.value(l).item();
            if !value.is_finite() {
                return Err(Error::Diverged { stage: "epoch", index: epoch });
            }
            total += value * chunk.len() as f64;
            let grads = tape.backward(l)?.params();
            let stats = b.running_stat_updates(&tape, BN_MOMENTUM)?;
            drop(b);
            lr = schedule.lr(step);
            opt.step(&mut current.params, &grads, lr)?;
            for (name, t) in stats {
                current.params.insert(name, t);
            }
            step += 1;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = trainer.val_loss(&current, frozen.then_some(&mut val_cache), cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { stage: "epoch", index: epoch });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            selected: false,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, current.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    if let Some(r) = history.get_mut(best.1) {
        r.selected = true;
    }
    current.params = best.2;
    Ok(FinetuneOutcome {
        model: current,
        history,
        best_epoch: best.1,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::argmax_classes;

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            channels: 2,
            height: 16,
            width: 16,
            patch: [1, 4, 4],
            dim: 16,
            depth: 4,
            heads: 2,
            ..EncoderConfig::toy_student()
        }
    }

    /// Left half water (channel 0 high) with a random split column.
    fn water_sample(rng: &mut RngStream) -> Sample {
        let (h, w) = (16, 16);
        let split = 4 + rng.below(9);
        let mut cube = Vec::with_capacity(2 * h * w);
        let mut mask = Vec::with_capacity(h * w);
        for c in 0..2 {
            for _ in 0..h {
                for x in 0..w {
                    let water = x < split;
                    let v = if water == (c == 0) { 0.8 } else { 0.2 };
                    cube.push(v + 0.02 * rng.normal());
                    if c == 0 {
                        mask.push(i64::from(water));
                    }
                }
            }
        }
        Sample {
            cube: Tensor::new(vec![2, 1, h, w], cube).unwrap(),
            label: Label::Mask(Arc::new(mask)),
        }
    }

    fn dataset(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = RngStream::new(seed, "water");
        (0..n).map(|_| water_sample(&mut rng)).collect()
    }

    #[test]
    fn flips_are_joint_involutions() {
        let s = dataset(1, 3).remove(0);
        let f = flip_sample(&s, true, false).unwrap();
        assert_ne!(f, s);
        assert_eq!(flip_sample(&f, true, false).unwrap(), s);
        let Label::Mask(m) = &f.label else { unreachable!() };
        // channel 0 stays high exactly where the flipped mask says water
        for (i, &y) in m.iter().enumerate() {
            assert_eq!(f.cube.data()[i] > 0.5, y == 1);
        }
    }

    #[test]
    fn joint_flip_of_symmetric_data_keeps_the_loss() {
        let enc = tiny_encoder();
        let model = TaskModel::random(enc.clone(), HeadSpec::unet(2, 4), &mut RngStream::new(1, "m")).unwrap();
        let (h, w) = (16, 16);
        let mut cube = Vec::new();
        let mut mask = Vec::new();
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let r = (x.min(w - 1 - x) + y.min(h - 1 - y)) as f64;
                    cube.push(0.1 * r + c as f64);
                    if c == 0 {
                        mask.push(i64::from(r > 6.0));
                    }
                }
            }
        }
        let s = Sample {
            cube: Tensor::new(vec![2, 1, h, w], cube).unwrap(),
            label: Label::Mask(Arc::new(mask)),
        };
        let loss = |s: &Sample| {
            let mut tape = Tape::inference();
            let b = Binding::new(&mut tape, &model.params, &[]);
            let x = tape.constant(vit::patch_batch(&[&s.cube], &enc).unwrap());
            let y = model.forward(&mut tape, &b, x).unwrap();
            let t = batch_targets(&[s], HeadKind::UnetDecoder).unwrap();
            let l = apply_loss(&mut tape, &LossSpec::weighted(&[1.0, 1.0]), y, &t).unwrap();
            tape.value(l).item()
        };
        let base = loss(&s);
        for (hf, vf) in [(true, false), (false, true), (true, true)] {
            assert_eq!(loss(&flip_sample(&s, hf, vf).unwrap()), base);
        }
    }

    #[test]
    fn frozen_finetune_learns_and_keeps_encoder() {
        let enc = tiny_encoder();
        let model = TaskModel::random(enc, HeadSpec::unet(2, 8), &mut RngStream::new(2, "m")).unwrap();
        let before = model.encoder_params().checksum();
        let train = dataset(12, 0);
        let val = dataset(4, 1);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 4,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let out = finetune(&model, &train, &val, &cfg, &LossSpec::weighted(&[1.0, 1.0]), &Sampler::Shuffle, EncoderMode::Frozen).unwrap();
        assert_eq!(out.model.encoder_params().checksum(), before);
        assert_eq!(out.history.len(), 5);
        assert_eq!(out.history.iter().filter(|r| r.selected).count(), 1);
        assert!(out.history[out.best_epoch].val_loss <= out.history[0].val_loss);
        assert_ne!(out.model.head_params().checksum(), model.head_params().checksum());
        let mut csv = Vec::new();
        write_history_csv(&out.history, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("epoch,train_loss,val_loss,lr,selected\n0,"));
    }

    #[test]
    fn patience_stops_early_with_best_head() {
        let enc = tiny_encoder();
        let model = TaskModel::random(enc, HeadSpec::unet(2, 4), &mut RngStream::new(2, "m")).unwrap();
        let train = dataset(4, 0);
        let val = dataset(2, 1);
        // an absurd learning rate makes validation loss stop improving
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 2,
            lr: 5.0,
            warmup_fraction: 0.0,
            patience: 2,
            ..TrainConfig::default()
        };
        let out = finetune(&model, &train, &val, &cfg, &LossSpec::weighted(&[1.0, 1.0]), &Sampler::Shuffle, EncoderMode::Frozen);
        match out {
            Ok(out) => {
                assert!(out.stopped_early && out.history.len() < 40);
                let best = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
                assert_eq!(out.history[out.best_epoch].val_loss, best);
                assert!(out.history[out.best_epoch].selected);
            }
            Err(Error::Diverged { stage, .. }) => assert_eq!(stage, "epoch"),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn trainable_mode_updates_encoder() {
        let enc = tiny_encoder();
        let model = TaskModel::random(enc, HeadSpec::mlp(2), &mut RngStream::new(4, "m")).unwrap();
        let mut rng = RngStream::new(0, "cls");
        let samples: Vec<Sample> = (0..6)
            .map(|i| Sample {
                cube: Tensor::full(&[2, 1, 16, 16], 0.1 + 0.1 * (i % 2) as f64 + 0.01 * rng.normal()),
                label: Label::Class((i % 2) as i64),
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let out = finetune(&model, &samples, &samples, &cfg, &LossSpec::weighted(&[1.0, 1.0]), &Sampler::Shuffle, EncoderMode::Trainable).unwrap();
        assert_ne!(out.model.encoder_params().checksum(), model.encoder_params().checksum());
        let logits = out.model.predict(&samples.iter().map(|s| &s.cube).collect::<Vec<_>>()).unwrap();
        assert_eq!(logits.shape(), &[6, 2]);
        assert_eq!(argmax_classes(&logits).unwrap().len(), 6);
    }

    #[test]
    fn weighted_sampler_balances() {
        let mut w = vec![1.0; 90];
        w.extend(vec![9.0; 10]);
        let s = Sampler::Weighted(w);
        let mut rng = RngStream::new(0, "s");
        let mut pos = 0;
        for _ in 0..100 {
            pos += s.epoch(100, &mut rng).unwrap().iter().filter(|&&i| i >= 90).count();
        }
        assert!((pos as f64 / 10_000.0 - 0.5).abs() < 0.02);
        assert!(Sampler::Weighted(vec![1.0]).epoch(2, &mut rng).is_err());
    }

    #[test]
    fn task_defaults_scale() {
        let c = Task::CloudClassification.train_config(10.0);
        assert_eq!((c.epochs, c.batch_size), (30, 13));
        assert_eq!(Task::Biomass.train_config(1.0).restarts, 4);
        assert_eq!("flood".parse::<Task>().unwrap(), Task::Flood);
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
