use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use geofm::deploy::{self, equivalence_report, quantize_fp16, read_bundle, run_inference, write_bundle, ModelBundle};
use geofm::experiment::{evaluate, run_data_efficiency_experiment, write_grid_csv, Arm, ExperimentData, ExperimentSetup};
use geofm::formats::{read_mask, write_cube, write_mask, RawCube};
use geofm::heads::finetune::{finetune, write_history_csv, EncoderMode, Sample, Sampler, Task, TaskModel, TrainConfig};
use geofm::heads::{argmax_classes, HeadKind};
use geofm::labelling::{generate_mask, MaskTask};
use geofm::mae::{self, train_distill, train_mae, DistillConfig, Mae, Target};
use geofm::metrics::{domain_gap_report, write_gap_csv, write_metrics_csv, MetricRow};
use geofm::pipeline::{ingest_file, make_sampling_plan, select_bands, tile_cube, tile_mask, Mask, Normalization, Strategy, TileRecord, CLOUDY_FRACTION};
use geofm::synthetic::{cloud_tile, raw_scene, textured_cubes, water_tile, Domain, SCENE_HEIGHT, SCENE_WIDTH};
use geofm::vit::{default_taps, EncoderConfig};
use geofm::{DType, RngStream, Tensor};
use indexmap::IndexMap;

use crate::data::{load_samples, load_tiles, read_entries, to_raw_mask, write_dataset, TileOut};
use crate::run::Run;
use crate::{Cli, Command, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn dispatch(cli: &Cli, config: IndexMap<String, String>) -> Result<()> {
    let name = match &cli.command {
        Command::Fixtures(_) => "fixtures",
        Command::Ingest(_) => "ingest",
        Command::Label(_) => "label",
        Command::PretrainDistill(_) => "pretrain-distill",
        Command::Finetune(_) => "finetune",
        Command::Infer(_) => "infer",
        Command::Quantize(_) => "quantize",
        Command::Eval(_) => "eval",
        Command::Profile(_) => "profile",
        Command::Experiment(_) => "experiment",
        Command::Report(_) => "report",
    };
    let dir = cli.run_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    let mut run = Run::start(dir, name, cli.seed, config)?;
    let seed = cli.seed;
    match &cli.command {
        Command::Fixtures(a) => fixtures(a, &mut run, seed)?,
        Command::Ingest(a) => ingest(a, &mut run)?,
        Command::Label(a) => label(a, &mut run)?,
        Command::PretrainDistill(a) => pretrain_distill(a, &mut run, seed)?,
        Command::Finetune(a) => finetune_cmd(a, &mut run, seed)?,
        Command::Infer(a) => infer(a, &mut run)?,
        Command::Quantize(a) => quantize(a, &mut run)?,
        Command::Eval(a) => eval(a, &mut run)?,
        Command::Profile(a) => profile(a, &mut run)?,
        Command::Experiment(a) => experiment(a, &mut run, seed)?,
        Command::Report(a) => report(a, &mut run)?,
    }
    run.finish()
}

fn parse_norm(s: &str) -> Result<Normalization> {
    match s {
        "minmax" => Ok(Normalization::MinMax),
        _ => match s.strip_prefix("scale:").map(str::parse::<f64>) {
            Some(Ok(v)) => Ok(Normalization::FixedScale(v)),
            _ => Err(usage(format!("normalisation `{s}`: expected minmax or scale:<value>"))),
        },
    }
}

fn parse_task(s: &str) -> Result<Task> {
    s.parse::<Task>().map_err(|e| usage(e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn fixtures(a: &crate::FixturesArgs, run: &mut Run, seed: u64) -> Result<()> {
    if a.tile == 0 || a.patch == 0 || a.tile % a.patch != 0 {
        return Err(usage(format!("tile {} is not a multiple of patch {}", a.tile, a.patch)));
    }
    let shape = [4, 1, a.tile, a.tile];
    let root = RngStream::new(seed, "fixtures");

    let cubes = textured_cubes(a.pretrain, shape, seed);
    let tiles: Vec<TileOut> = cubes
        .iter()
        .enumerate()
        .map(|(i, c)| TileOut { cube: c, mask: None, label: None, product_id: format!("pretrain-{}", i / 8) })
        .collect();
    let m = write_dataset(&run.dir.join("pretrain"), &tiles)?;
    run.record(m);

    let splits = [("train", a.train, Domain::SOURCE), ("val", a.val, Domain::SOURCE), ("test", a.test, Domain::SOURCE), ("target", a.test, Domain::TARGET)];
    for (split, n, domain) in splits {
        let mut rng = root.child(&format!("water/{split}"));
        let made: Vec<(Tensor, Vec<i64>)> = (0..n).map(|_| water_tile(shape, a.patch, domain, &mut rng)).collect();
        let tiles: Vec<TileOut> = made
            .iter()
            .enumerate()
            .map(|(i, (c, m))| TileOut { cube: c, mask: Some(m), label: None, product_id: format!("water-{split}-{}", i / 8) })
            .collect();
        let m = write_dataset(&run.dir.join("water").join(split), &tiles)?;
        run.record(m);

        let mut rng = root.child(&format!("cloud/{split}"));
        let made: Vec<(Tensor, Vec<i64>)> = (0..n)
            .map(|_| {
                let f = rng.uniform();
                cloud_tile(shape, a.patch, f, domain, &mut rng)
            })
            .collect();
        let labels: Vec<i64> = made
            .iter()
            .map(|(_, m)| i64::from(m.iter().filter(|&&v| v == 1).count() as f64 / m.len() as f64 > CLOUDY_FRACTION))
            .collect();
        let tiles: Vec<TileOut> = made
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, ((c, m), &l))| TileOut { cube: c, mask: Some(m), label: Some(l), product_id: format!("cloud-{split}-{}", i / 8) })
            .collect();
        let m = write_dataset(&run.dir.join("cloud").join(split), &tiles)?;
        run.record(m);
    }

    if !a.skip_scene {
        let path = run.output("scene.eocube")?;
        write_cube(&path, &raw_scene(SCENE_HEIGHT, SCENE_WIDTH, seed))?;
    }
    println!("fixtures written to {}", run.dir.display());
    Ok(())
}

fn ingest(a: &crate::IngestArgs, run: &mut Run) -> Result<()> {
    run.input(&a.cube)?;
    let mut cube = ingest_file(&a.cube, parse_norm(&a.norm)?)?;
    if !a.bands.is_empty() {
        cube = select_bands(&cube, &a.bands)?;
    }
    let tiling = tile_cube(&cube, a.tile)?;
    for w in &tiling.warnings {
        eprintln!("warning: {w}");
    }
    let mut records = tiling.records;
    if let Some(mp) = &a.mask {
        run.input(mp)?;
        let mask = Mask::from_raw(read_mask(mp)?)?;
        let [_, _, h, w] = cube.shape();
        if (mask.height, mask.width) != (h, w) {
            bail!(geofm::Error::Data(format!("mask {}x{} for a {h}x{w} cube", mask.height, mask.width)));
        }
        let masks = tile_mask(&mask, a.tile)?;
        records = records.into_iter().zip(masks).map(|(r, m)| r.with_mask(m)).collect::<geofm::Result<_>>()?;
    }
    let masks: Vec<Option<Vec<i64>>> = records.iter().map(|r| r.mask.as_ref().map(|m| m.data.clone())).collect();
    let tiles: Vec<TileOut> = records
        .iter()
        .zip(&masks)
        .map(|(r, m)| TileOut { cube: &r.tile, mask: m.as_deref(), label: r.label, product_id: r.product_id.clone() })
        .collect();
    let manifest = write_dataset(&run.dir, &tiles)?;
    run.record(manifest);
    println!("{} tiles of {}x{}", records.len(), a.tile, a.tile);
    Ok(())
}

fn label(a: &crate::LabelArgs, run: &mut Run) -> Result<()> {
    let task = match a.task.as_str() {
        "water" => MaskTask::Water,
        "cloud" => MaskTask::Cloud,
        other => return Err(usage(format!("label task `{other}`: expected water or cloud"))),
    };
    run.input(&a.cube)?;
    let cube = ingest_file(&a.cube, parse_norm(&a.norm)?)?;
    let mask = generate_mask(&cube, task)?;
    write_mask(&run.output("mask.eomask")?, &mask.to_raw()?)?;
    println!("positive fraction {:.4}", mask.positive_fraction()?);
    Ok(())
}

fn encoder_for(tile: &Tensor, dim: usize, depth: usize, heads: usize, patch: usize) -> Result<EncoderConfig> {
    let [c, t, h, w] = tile.shape()[..] else {
        bail!(geofm::Error::Data(format!("expected [C,T,H,W] tiles, got {:?}", tile.shape())));
    };
    let cfg = EncoderConfig {
        channels: c,
        frames: t,
        height: h,
        width: w,
        patch: [1, patch, patch],
        dim,
        depth,
        heads,
        mlp_ratio: 4,
        dropout: 0.0,
        taps: default_taps(depth),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain_distill(a: &crate::DistillArgs, run: &mut Run, seed: u64) -> Result<()> {
    run.input(&a.data)?;
    let cubes = load_tiles(&a.data)?;
    let Some(first) = cubes.first() else {
        bail!(geofm::Error::Data("no pretraining tiles".into()));
    };
    let cfg = DistillConfig {
        student_mask_ratio: a.mask_ratio,
        steps: a.steps,
        batch_size: a.batch,
        lr: a.lr,
        seed,
        ..DistillConfig::default()
    };
    let root = RngStream::new(seed, "pretrain");
    let mut student = Mae::init(encoder_for(first, a.student_dim, a.depth, a.heads, a.patch)?, &mut root.child("student"))?;
    let history = if a.plain {
        train_mae(&mut student, &cubes, Target::Pixels, &cfg)?
    } else {
        let teacher = match &a.teacher {
            Some(p) => {
                run.input(p)?;
                read_bundle(p)?.mae()?
            }
            None => {
                let mut t = Mae::init(encoder_for(first, a.teacher_dim, a.depth, a.heads, a.patch)?, &mut root.child("teacher"))?;
                let tcfg = DistillConfig { steps: a.teacher_steps, seed: seed.wrapping_add(1), ..cfg.clone() };
                let th = train_mae(&mut t, &cubes, Target::Pixels, &tcfg)?;
                mae::write_history_csv(&th, create(&run.output("teacher_history.csv")?)?)?;
                write_bundle(&run.output("teacher.eofm")?, &ModelBundle::from_mae("teacher", &t))?;
                t
            }
        };
        train_distill(&teacher, &mut student, &cubes, &cfg)?
    };
    mae::write_history_csv(&history, create(&run.output("history.csv")?)?)?;
    write_bundle(&run.output("student-mae.eofm")?, &ModelBundle::from_mae("student", &student))?;
    write_bundle(&run.output("student.eofm")?, &ModelBundle::encoder_only("student", &student))?;
    if let (Some(f), Some(l)) = (history.first(), mae::smoothed_tail(&history, 10)) {
        println!("masked MSE {:.6} -> {:.6} over {} steps", f.loss, l, history.len());
    }
    Ok(())
}

struct Hyper {
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: f64,
    patience: usize,
    scale: f64,
}

fn train_config(task: Task, h: &Hyper, seed: u64) -> TrainConfig {
    let base = task.train_config(h.scale);
    TrainConfig {
        epochs: h.epochs.unwrap_or(base.epochs),
        batch_size: h.batch.unwrap_or(base.batch_size),
        lr: h.lr,
        patience: h.patience,
        seed,
        ..base
    }
}

fn sampling(kind: &str, train: &[Sample], manifest: &Path, seed: u64) -> Result<(Vec<usize>, Sampler)> {
    let strategy = match kind {
        "shuffle" => return Ok(((0..train.len()).collect(), Sampler::Shuffle)),
        "weighted-1to1" => Strategy::Weighted1to1,
        "downsample-clear" => Strategy::DownsampleClear,
        other => return Err(usage(format!("sampling `{other}`: expected shuffle, weighted-1to1 or downsample-clear"))),
    };
    let (_, entries) = read_entries(manifest)?;
    let records: Vec<TileRecord> = entries
        .iter()
        .zip(train)
        .enumerate()
        .map(|(i, (e, s))| TileRecord {
            tile: s.cube.clone(),
            mask: None,
            label: e.label.or(Some(i64::from(e.cloud_ratio > CLOUDY_FRACTION))),
            cloud_ratio: e.cloud_ratio,
            product_id: e.product_id.clone(),
            position: (i, 0),
        })
        .collect();
    let plan = make_sampling_plan(&records, strategy, seed)?;
    Ok((plan.kept(), plan.sampler()))
}

fn finetune_cmd(a: &crate::FinetuneArgs, run: &mut Run, seed: u64) -> Result<()> {
    let task = parse_task(&a.task)?;
    run.input(&a.train)?;
    run.input(&a.val)?;
    let train = load_samples(&a.train, task)?;
    let val = load_samples(&a.val, task)?;
    let head = task.head(a.width);
    let mut rng = RngStream::new(seed, "finetune/init");
    let mut model = match &a.encoder {
        Some(p) => {
            run.input(p)?;
            let b = read_bundle(p)?;
            TaskModel::new(b.encoder.clone(), b.encoder_params(), head, &mut rng)?
        }
        None => TaskModel::random(encoder_for(&train[0].cube, a.dim, a.depth, a.heads, a.patch)?, head, &mut rng)?,
    };
    if let Some(p) = &a.init_head {
        run.input(p)?;
        model.set_head_params(read_bundle(p)?.model()?.head_params())?;
    }
    let mode = match (a.mode.as_deref(), a.encoder.is_some()) {
        (Some("frozen"), _) | (None, true) => EncoderMode::Frozen,
        (Some("trainable"), _) | (None, false) => EncoderMode::Trainable,
        (Some(other), _) => return Err(usage(format!("mode `{other}`: expected frozen or trainable"))),
    };
    let hyper = Hyper { epochs: a.epochs, batch: a.batch, lr: a.lr, patience: a.patience, scale: a.scale };
    let mut cfg = train_config(task, &hyper, seed);
    if a.no_flip {
        (cfg.hflip, cfg.vflip) = (false, false);
    }
    let (kept, sampler) = sampling(&a.sampling, &train, &a.train, seed)?;
    let train: Vec<Sample> = kept.iter().map(|&i| train[i].clone()).collect();
    let out = finetune(&model, &train, &val, &cfg, &task.loss(), &sampler, mode)?;
    write_history_csv(&out.history, create(&run.output("history.csv")?)?)?;
    write_bundle(&run.output("model.eofm")?, &ModelBundle::from_model(task.name(), &out.model))?;
    let r = evaluate(&out.model, &val, task.name())?;
    println!(
        "best epoch {} of {}{}; val {}",
        out.best_epoch,
        out.history.len(),
        if out.stopped_early { " (stopped early)" } else { "" },
        r.metrics.iter().map(|(k, v)| format!("{k} {v:.2}")).collect::<Vec<_>>().join(", ")
    );
    Ok(())
}

fn infer(a: &crate::InferArgs, run: &mut Run) -> Result<()> {
    run.input(&a.model)?;
    run.input(&a.data)?;
    let bundle = read_bundle(&a.model)?;
    let kind = bundle.head_spec()?.kind;
    let tiles = load_tiles(&a.data)?;
    let refs: Vec<&Tensor> = tiles.iter().collect();
    let out = run_inference(&bundle, &refs, kind)?;
    if tiles.is_empty() {
        return Ok(());
    }
    let (h, w) = (bundle.encoder.height, bundle.encoder.width);
    match kind {
        HeadKind::MlpClassifier => {
            let mut f = create(&run.output("predictions.csv")?)?;
            writeln!(f, "tile,class")?;
            for (i, c) in argmax_classes(&out)?.iter().enumerate() {
                writeln!(f, "{i},{c}")?;
            }
        }
        HeadKind::UpernetRegressor => {
            for (i, chunk) in out.data().chunks(h * w).enumerate() {
                let raw = RawCube { shape: [1, 1, h, w], wavelengths: None, data: chunk.iter().map(|&v| v as f32).collect() };
                write_cube(&run.output(&format!("pred/{i:04}.eocube"))?, &raw)?;
            }
        }
        _ => {
            for (i, chunk) in argmax_classes(&out)?.chunks(h * w).enumerate() {
                write_mask(&run.output(&format!("pred/{i:04}.eomask"))?, &to_raw_mask(h, w, chunk)?)?;
            }
        }
    }
    println!("{} tiles predicted", tiles.len());
    Ok(())
}

fn quantize(a: &crate::QuantizeArgs, run: &mut Run) -> Result<()> {
    run.input(&a.input)?;
    let b = read_bundle(&a.input)?;
    write_bundle(&a.out, &quantize_fp16(&b))?;
    let (n32, n16) = (std::fs::metadata(&a.input)?.len(), std::fs::metadata(&a.out)?.len());
    println!("{n32} -> {n16} bytes ({:.3}x)", n16 as f64 / n32 as f64);
    Ok(())
}

fn precision(b: &ModelBundle) -> &'static str {
    match b.dtype() {
        DType::F16 => "FP16",
        _ => "FP32",
    }
}

fn eval(a: &crate::EvalArgs, run: &mut Run) -> Result<()> {
    run.input(&a.model)?;
    run.input(&a.data)?;
    let bundle = read_bundle(&a.model)?;
    let task = parse_task(&bundle.task)?;
    let test = load_samples(&a.data, task)?;
    let report = evaluate(&bundle.model()?, &test, task.name())?;
    let mut rows = vec![MetricRow { environment: a.environment.clone(), precision: precision(&bundle).into(), report: report.clone() }];
    if let Some(p) = &a.fp16 {
        run.input(p)?;
        let b16 = read_bundle(p)?;
        let parity = equivalence_report(&bundle, &b16, &test, a.tolerance)?;
        parity.write_csv(create(&run.output("parity.csv")?)?)?;
        rows.push(MetricRow {
            environment: a.environment.clone(),
            precision: precision(&b16).into(),
            report: evaluate(&b16.model()?, &test, task.name())?,
        });
        println!(
            "max |FP32 - FP16| {:.4} pp{}",
            parity.max_abs_delta(),
            parity.agreement.map(|g| format!(", argmax agreement {:.4}", g)).unwrap_or_default()
        );
        if !parity.passed() {
            eprintln!("warning: deltas above {} pp", a.tolerance);
        }
    }
    if let Some(p) = &a.target_data {
        run.input(p)?;
        let target = evaluate(&bundle.model()?, &load_samples(p, task)?, task.name())?;
        write_gap_csv(&domain_gap_report(&report, &target)?, create(&run.output("gap.csv")?)?)?;
    }
    write_metrics_csv(&rows, create(&run.output("metrics.csv")?)?)?;
    for r in &rows {
        println!("{} {}: {}", r.report.task, r.precision, r.report.metrics.iter().map(|(k, v)| format!("{k} {v:.2}")).collect::<Vec<_>>().join(", "));
    }
    Ok(())
}

fn profile(a: &crate::ProfileArgs, run: &mut Run) -> Result<()> {
    run.input(&a.model)?;
    let bundle = read_bundle(&a.model)?;
    let r = deploy::profile(&bundle, &a.cube, parse_norm(&a.norm)?, &a.environment)?;
    r.write_csv(create(&run.output("profile.csv")?)?)?;
    println!(
        "{} tiles, {:.4} s per tile, {:.2} s total, peak {:.1} MB",
        r.per_tile.len(),
        r.mean_tile_time(),
        r.runtime,
        r.peak_memory_mb
    );
    Ok(())
}

fn experiment(a: &crate::ExperimentArgs, run: &mut Run, seed: u64) -> Result<()> {
    let task = parse_task(&a.task)?;
    let arms = a.arms.iter().map(|s| s.parse::<Arm>().map_err(|e| usage(e.to_string()))).collect::<Result<Vec<_>>>()?;
    if a.seeds == 0 {
        return Err(usage("at least one seed is needed"));
    }
    for p in [&a.train, &a.val, &a.test] {
        run.input(p)?;
    }
    let train = load_samples(&a.train, task)?;
    let val = load_samples(&a.val, task)?;
    let test = load_samples(&a.test, task)?;
    let (encoder, geofm_encoder) = match &a.encoder {
        Some(p) => {
            run.input(p)?;
            let b = read_bundle(p)?;
            (b.encoder.clone(), Some(b.encoder_params()))
        }
        None => (encoder_for(&train[0].cube, a.dim, a.depth, a.heads, a.patch)?, None),
    };
    let pretrained_head = match &a.pretrained_head {
        Some(p) => {
            run.input(p)?;
            Some(read_bundle(p)?.model()?.head_params())
        }
        None => None,
    };
    let hyper = Hyper { epochs: a.epochs, batch: a.batch, lr: a.lr, patience: a.patience, scale: a.scale };
    let setup = ExperimentSetup {
        task: task.name().to_string(),
        encoder,
        head: task.head(a.width),
        loss: task.loss(),
        train: train_config(task, &hyper, seed),
        geofm_encoder,
        pretrained_head,
    };
    let seeds: Vec<u64> = (0..a.seeds).map(|i| seed + i).collect();
    let mut runs = create(&run.output("runs.csv")?)?;
    writeln!(runs, "arm,fraction,seed,metric,value")?;
    let mut log = |arm: Arm, f: f64, s: u64, r: &geofm::metrics::MetricReport| {
        for (k, v) in &r.metrics {
            let _ = writeln!(runs, "{},{f},{s},{k},{v:.4}", arm.name());
        }
        eprintln!("{} {:.2} seed {s}: {}", arm.name(), f, r.metrics.iter().take(1).map(|(k, v)| format!("{k} {v:.2}")).collect::<String>());
    };
    let data = ExperimentData { train: &train, val: &val, test: &test };
    let grid = run_data_efficiency_experiment(&setup, &data, &arms, &a.fractions, &seeds, Some(&mut log))?;
    drop(log);
    runs.flush()?;
    write_grid_csv(&grid, create(&run.output("grid.csv")?)?)?;
    println!("{} cells x {} seeds", grid.len(), seeds.len());
    Ok(())
}

fn report(a: &crate::ReportArgs, run: &mut Run) -> Result<()> {
    let mut out = create(&run.output("report.md")?)?;
    for p in &a.inputs {
        run.input(p)?;
        let text = std::fs::read_to_string(p)?;
        let mut lines = text.lines();
        let Some(header) = lines.next() else {
            bail!(geofm::Error::Data(format!("{} is empty", p.display())));
        };
        let cols = header.split(',').count();
        writeln!(out, "## {}\n", p.display())?;
        writeln!(out, "| {} |", header.split(',').collect::<Vec<_>>().join(" | "))?;
        writeln!(out, "|{}", "---|".repeat(cols))?;
        for line in lines {
            writeln!(out, "| {} |", line.split(',').collect::<Vec<_>>().join(" | "))?;
        }
        writeln!(out)?;
    }
    Ok(())
}
