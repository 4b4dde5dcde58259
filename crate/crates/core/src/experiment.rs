//! Model evaluation and the label-fraction experiment grid.

use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::finetune::{finetune, EncoderMode, Label, Sample, Sampler, TaskModel, TrainConfig};
use crate::heads::{argmax_classes, HeadKind, HeadSpec, LossSpec};
use crate::metrics::{accumulate_confusion, classification_metrics, rmse_metric, segmentation_metrics, ConfusionMatrix, MetricReport, RMSE};
use crate::params::ParamSet;
use crate::pipeline::subsample_labels;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::vit::EncoderConfig;

/// Scores raw head outputs (`[B,K]` or `[B,K,H,W]`) against sample labels.
pub fn score_outputs(task: &str, kind: HeadKind, outputs: &Tensor, samples: &[Sample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    if outputs.shape().first() != Some(&samples.len()) {
        return Err(Error::shape("score", format!("{:?} outputs for {} samples", outputs.shape(), samples.len())));
    }
    match kind {
        HeadKind::UpernetRegressor => {
            let per = outputs.numel() / samples.len();
            let preds: Vec<&[f64]> = outputs.data().chunks(per).collect();
            let targets = samples
                .iter()
                .map(|s| match &s.label {
                    Label::Values(v) => Ok(v.as_slice()),
                    _ => Err(Error::Data("regression head needs value labels".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            let mut r = MetricReport::new(task);
            r.insert(RMSE, rmse_metric(&preds, &targets)?);
            Ok(r)
        }
        _ => {
            let k = outputs.shape()[1];
            let preds = argmax_classes(outputs)?;
            let mut targets = Vec::with_capacity(preds.len());
            for s in samples {
                match &s.label {
                    Label::Class(c) => targets.push(*c),
                    Label::Mask(m) => targets.extend_from_slice(m),
                    Label::Values(_) => return Err(Error::Data("classification head given value labels".into())),
                }
            }
            let cm = accumulate_confusion(&preds, &targets, k, Some(-1))?;
            if kind == HeadKind::MlpClassifier {
                classification_metrics(task, &cm)
            } else {
                segmentation_metrics(task, &cm)
            }
        }
    }
}

pub fn evaluate(model: &TaskModel, samples: &[Sample], task: &str) -> Result<MetricReport> {
    let cubes: Vec<&Tensor> = samples.iter().map(|s| &s.cube).collect();
    score_outputs(task, model.head.kind, &model.predict(&cubes)?, samples)
}

/// Confusion matrix of a dense or tile classifier over `samples`.
pub fn confusion(model: &TaskModel, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let cubes: Vec<&Tensor> = samples.iter().map(|s| &s.cube).collect();
    let out = model.predict(&cubes)?;
    let preds = argmax_classes(&out)?;
    let mut targets = Vec::new();
    for s in samples {
        match &s.label {
            Label::Class(c) => targets.push(*c),
            Label::Mask(m) => targets.extend_from_slice(m),
            Label::Values(_) => return Err(Error::Data("value labels have no confusion matrix".into())),
        }
    }
    accumulate_confusion(&preds, &targets, out.shape()[1], Some(-1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    RandomRandom,
    GeofmRandom,
    GeofmPretrained,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::RandomRandom, Arm::GeofmRandom, Arm::GeofmPretrained];

    pub fn name(self) -> &'static str {
        match self {
            Arm::RandomRandom => "random-random",
            Arm::GeofmRandom => "geofm-random",
            Arm::GeofmPretrained => "geofm-pretrained",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}` (random-random, geofm-random, geofm-pretrained)")))
    }
}

pub struct ExperimentSetup {
    pub task: String,
    pub encoder: EncoderConfig,
    pub head: HeadSpec,
    pub loss: LossSpec,
    pub train: TrainConfig,
    /// Distilled encoder tensors under `encoder.`.
    pub geofm_encoder: Option<ParamSet>,
    /// Head tensors under `head.` trained on another dataset.
    pub pretrained_head: Option<ParamSet>,
}

pub struct ExperimentData<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub test: &'a [Sample],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub arm: Arm,
    pub fraction: f64,
    pub runs: Vec<MetricReport>,
    pub mean: IndexMap<String, f64>,
    /// Sample standard deviation; 0 for a single seed.
    pub std: IndexMap<String, f64>,
}

impl GridCell {
    fn new(arm: Arm, fraction: f64, runs: Vec<MetricReport>) -> Self {
        let n = runs.len() as f64;
        let mut mean = IndexMap::new();
        let mut std = IndexMap::new();
        for name in runs[0].metrics.keys() {
            let vals: Vec<f64> = runs.iter().map(|r| r.metrics[name]).collect();
            let m = vals.iter().sum::<f64>() / n;
            let var = if runs.len() > 1 {
                vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            mean.insert(name.clone(), m);
            std.insert(name.clone(), var.sqrt());
        }
        Self { arm, fraction, runs, mean, std }
    }
}

/// Progress callback: `(arm, fraction, seed, report)`.
pub type Progress<'a> = &'a mut dyn FnMut(Arm, f64, u64, &MetricReport);

/// Fine-tunes every (arm, fraction, seed) combination and evaluates it on
/// the test set. Arms run in the given order, sequentially.
pub fn run_data_efficiency_experiment(
    setup: &ExperimentSetup,
    data: &ExperimentData,
    arms: &[Arm],
    fractions: &[f64],
    seeds: &[u64],
    mut progress: Option<Progress>,
) -> Result<Vec<GridCell>> {
    if arms.is_empty() || fractions.is_empty() || seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one arm, fraction and seed".into()));
    }
    for &arm in arms {
        if arm != Arm::RandomRandom && setup.geofm_encoder.is_none() {
            return Err(Error::Config(format!("arm {} needs a pretrained encoder", arm.name())));
        }
        if arm == Arm::GeofmPretrained && setup.pretrained_head.is_none() {
            return Err(Error::Config(format!("arm {} needs a pretrained head", arm.name())));
        }
    }
    let mut grid = Vec::new();
    for &arm in arms {
        for &fraction in fractions {
            let mut runs = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let r = run_one(setup, data, arm, fraction, seed)?;
                if let Some(p) = progress.as_mut() {
                    p(arm, fraction, seed, &r);
                }
                runs.push(r);
            }
            grid.push(GridCell::new(arm, fraction, runs));
        }
    }
    Ok(grid)
}

fn run_one(setup: &ExperimentSetup, data: &ExperimentData, arm: Arm, fraction: f64, seed: u64) -> Result<MetricReport> {
    let keep = subsample_labels(data.train.len(), fraction, seed)?;
    let train: Vec<Sample> = keep.iter().map(|&i| data.train[i].clone()).collect();
    let mut rng = RngStream::new(seed, &format!("experiment/{}", arm.name()));
    let (model, mode) = match arm {
        Arm::RandomRandom => (TaskModel::random(setup.encoder.clone(), setup.head.clone(), &mut rng)?, EncoderMode::Trainable),
        Arm::GeofmRandom | Arm::GeofmPretrained => {
            let enc = setup.geofm_encoder.clone().expect("checked above");
            let mut m = TaskModel::new(setup.encoder.clone(), enc, setup.head.clone(), &mut rng)?;
            if arm == Arm::GeofmPretrained {
                m.set_head_params(setup.pretrained_head.clone().expect("checked above"))?;
            }
            (m, EncoderMode::Frozen)
        }
    };
    let cfg = TrainConfig { seed, ..setup.train.clone() };
    let out = finetune(&model, &train, data.val, &cfg, &setup.loss, &Sampler::Shuffle, mode)?;
    evaluate(&out.model, data.test, &setup.task)
}

pub fn write_grid_csv(grid: &[GridCell], mut w: impl Write) -> Result<()> {
    writeln!(w, "arm,fraction,metric,mean,std,seeds")?;
    for cell in grid {
        for (name, m) in &cell.mean {
            writeln!(w, "{},{},{},{:.4},{:.4},{}", cell.arm.name(), cell.fraction, name, m, cell.std[name], cell.runs.len())?;
        }
    }
    Ok(())
}
