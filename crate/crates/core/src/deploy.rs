//! `.eofm` model bundles, FP16 quantization, inference, FP32/FP16 parity
//! and resource profiling.
//!
//! ```text
//! @key=value                  architecture lines: task, then encoder,
//!                             decoder and head configs as JSON
//! name|dtype|d0,d1,...|offset one line per tensor, offsets into the blob
//! <blank line>
//! EOW1<blob>                  little-endian f32 or f16 values
//! ```

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use half::f16;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::score_outputs;
use crate::heads::finetune::{Sample, TaskModel};
use crate::heads::{argmax_classes, HeadKind, HeadSpec};
use crate::mae::{DecoderConfig, Mae, ENCODER};
use crate::metrics::MetricReport;
use crate::params::ParamSet;
use crate::pipeline::{ingest_file, tile_cube, Normalization};
use crate::tensor::{DType, Tensor};
use crate::vit::EncoderConfig;

pub const BLOB_MAGIC: &[u8; 4] = b"EOW1";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub task: String,
    pub encoder: EncoderConfig,
    /// Present for full masked-autoencoder checkpoints.
    pub decoder: Option<DecoderConfig>,
    /// Present for task models.
    pub head: Option<HeadSpec>,
    pub params: ParamSet,
}

impl ModelBundle {
    pub fn from_model(task: &str, model: &TaskModel) -> Self {
        Self {
            task: task.to_string(),
            encoder: model.encoder.clone(),
            decoder: None,
            head: Some(model.head.clone()),
            params: model.params.clone(),
        }
    }

    pub fn from_mae(task: &str, mae: &Mae) -> Self {
        Self {
            task: task.to_string(),
            encoder: mae.encoder.clone(),
            decoder: Some(mae.decoder.clone()),
            head: None,
            params: mae.params.clone(),
        }
    }

    /// Encoder tensors only, as kept after distillation.
    pub fn encoder_only(task: &str, mae: &Mae) -> Self {
        Self {
            task: task.to_string(),
            encoder: mae.encoder.clone(),
            decoder: None,
            head: None,
            params: mae.encoder_params(),
        }
    }

    pub fn head_spec(&self) -> Result<&HeadSpec> {
        self.head.as_ref().ok_or_else(|| Error::Config(format!("bundle `{}` has no task head", self.task)))
    }

    pub fn model(&self) -> Result<TaskModel> {
        Ok(TaskModel {
            encoder: self.encoder.clone(),
            head: self.head_spec()?.clone(),
            params: self.params.clone(),
        })
    }

    pub fn mae(&self) -> Result<Mae> {
        let decoder = self.decoder.clone().ok_or_else(|| Error::Config(format!("bundle `{}` has no decoder", self.task)))?;
        Ok(Mae {
            encoder: self.encoder.clone(),
            decoder,
            params: self.params.clone(),
        })
    }

    pub fn encoder_params(&self) -> ParamSet {
        self.params.with_prefix(&format!("{ENCODER}."))
    }

    /// `F16` when every tensor is half precision, `F32` otherwise.
    pub fn dtype(&self) -> DType {
        if !self.params.is_empty() && self.params.iter().all(|(_, t)| t.dtype() == DType::F16) {
            DType::F16
        } else {
            DType::F32
        }
    }
}

fn bad(name: &str, reason: impl Into<String>) -> Error {
    Error::Bundle {
        name: name.to_string(),
        reason: reason.into(),
    }
}

fn stored_dtype(t: &Tensor) -> DType {
    if t.dtype() == DType::F16 {
        DType::F16
    } else {
        DType::F32
    }
}

pub fn save_bundle(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut head = String::new();
    head.push_str(&format!("@task={}\n", bundle.task));
    head.push_str(&format!("@encoder={}\n", to_json(&bundle.encoder)?));
    if let Some(d) = &bundle.decoder {
        head.push_str(&format!("@decoder={}\n", to_json(d)?));
    }
    if let Some(h) = &bundle.head {
        head.push_str(&format!("@head={}\n", to_json(h)?));
    }
    let mut blob = Vec::new();
    for (name, t) in bundle.params.iter() {
        if name.contains(['|', '\n']) || name.starts_with('@') || name.is_empty() {
            return Err(bad(name, "name cannot be stored in a manifest line"));
        }
        if !t.is_finite() {
            return Err(bad(name, "non-finite values"));
        }
        let dtype = stored_dtype(t);
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        head.push_str(&format!("{name}|{dtype}|{}|{}\n", dims.join(","), blob.len()));
        for &v in t.data() {
            match dtype {
                DType::F16 => blob.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
                _ => blob.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    head.push('\n');
    let mut out = head.into_bytes();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Data(e.to_string()))
}

struct Descriptor {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

pub fn load_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("<manifest>", "no blank line ends the manifest"))?;
    let manifest = std::str::from_utf8(&bytes[..split + 1]).map_err(|e| bad("<manifest>", format!("not UTF-8: {e}")))?;
    let rest = &bytes[split + 2..];
    if rest.len() < 4 || &rest[..4] != BLOB_MAGIC {
        return Err(bad("<blob>", "missing EOW1 magic"));
    }
    let blob = &rest[4..];

    let (mut task, mut encoder, mut decoder, mut head) = (None, None, None, None);
    let mut descs: Vec<Descriptor> = Vec::new();
    for line in manifest.lines() {
        if let Some(kv) = line.strip_prefix('@') {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("<manifest>", format!("header line `{line}`")))?;
            let parse_err = |e: serde_json::Error| bad("<manifest>", format!("@{k}: {e}"));
            match k {
                "task" => task = Some(v.to_string()),
                "encoder" => encoder = Some(serde_json::from_str::<EncoderConfig>(v).map_err(parse_err)?),
                "decoder" => decoder = Some(serde_json::from_str::<DecoderConfig>(v).map_err(parse_err)?),
                "head" => head = Some(serde_json::from_str::<HeadSpec>(v).map_err(parse_err)?),
                _ => return Err(bad("<manifest>", format!("unknown header key `{k}`"))),
            }
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        let [name, dtype, dims, offset] = fields[..] else {
            return Err(bad("<manifest>", format!("descriptor `{line}` needs 4 fields")));
        };
        let dtype = match DType::parse(dtype) {
            Some(d @ (DType::F32 | DType::F16)) => d,
            _ => return Err(bad(name, format!("unsupported dtype `{dtype}`"))),
        };
        let shape = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',').map(str::parse).collect::<std::result::Result<Vec<usize>, _>>().map_err(|e| bad(name, format!("dims `{dims}`: {e}")))?
        };
        let offset: usize = offset.parse().map_err(|e| bad(name, format!("offset `{offset}`: {e}")))?;
        if descs.iter().any(|d| d.name == name) {
            return Err(bad(name, "duplicate tensor"));
        }
        descs.push(Descriptor { name: name.to_string(), dtype, shape, offset });
    }

    let mut params = ParamSet::new();
    let mut expected = 0usize;
    for d in &descs {
        if d.offset != expected {
            return Err(bad(&d.name, format!("offset {} where {} was expected", d.offset, expected)));
        }
        let n: usize = d.shape.iter().product();
        let size = n * d.dtype.byte_size();
        let Some(bytes) = blob.get(d.offset..d.offset + size) else {
            return Err(bad(&d.name, format!("blob of {} bytes ends inside the tensor", blob.len())));
        };
        let data: Vec<f64> = match d.dtype {
            DType::F16 => bytes.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64()).collect(),
            _ => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
        };
        let t = Tensor::new(d.shape.clone(), data)?;
        if !t.is_finite() {
            return Err(bad(&d.name, "non-finite values"));
        }
        params.insert(d.name.clone(), t.cast(d.dtype));
        expected += size;
    }
    if expected != blob.len() {
        return Err(bad("<blob>", format!("{} trailing bytes", blob.len() - expected)));
    }
    let bundle = ModelBundle {
        task: task.ok_or_else(|| bad("<manifest>", "missing @task"))?,
        encoder: encoder.ok_or_else(|| bad("<manifest>", "missing @encoder"))?,
        decoder,
        head,
        params,
    };
    bundle.encoder.validate()?;
    if let Some(h) = &bundle.head {
        h.validate()?;
    }
    Ok(bundle)
}

pub fn read_bundle(path: &Path) -> Result<ModelBundle> {
    load_bundle(&std::fs::read(path)?)
}

pub fn write_bundle(path: &Path, bundle: &ModelBundle) -> Result<()> {
    Ok(std::fs::write(path, save_bundle(bundle)?)?)
}

/// Hex SHA-256 of the serialized bundle.
pub fn bundle_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Casts every tensor to binary16. FP16 input comes back unchanged.
pub fn quantize_fp16(bundle: &ModelBundle) -> ModelBundle {
    ModelBundle {
        params: bundle.params.cast(DType::F16),
        ..bundle.clone()
    }
}

/// Deterministic inference with dropout off: `[B,K]` or `[B,K,H,W]`.
pub fn run_inference(bundle: &ModelBundle, tiles: &[&Tensor], kind: HeadKind) -> Result<Tensor> {
    let head = bundle.head_spec()?;
    if kind != head.kind {
        return Err(Error::Config(format!("bundle holds a {} head, not {}", head.kind.name(), kind.name())));
    }
    for t in tiles {
        if t.shape() != bundle.encoder.cube_shape() {
            return Err(Error::Data(format!("tile {:?} does not match the bundle input {:?}", t.shape(), bundle.encoder.cube_shape())));
        }
    }
    if tiles.is_empty() {
        return Ok(Tensor::zeros(&[0]));
    }
    bundle.model()?.predict(tiles)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityRow {
    pub metric: String,
    pub fp32: f64,
    pub fp16: f64,
    /// `fp32 − fp16` in percentage points.
    pub delta: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub task: String,
    pub tolerance: f64,
    pub rows: Vec<ParityRow>,
    /// Fraction of pixels (or tiles) with equal argmax; `None` for
    /// regression.
    pub agreement: Option<f64>,
}

impl ParityReport {
    pub fn from_reports(a: &MetricReport, b: &MetricReport, tolerance: f64) -> Result<Self> {
        if a.task != b.task || !a.metrics.keys().eq(b.metrics.keys()) {
            return Err(Error::Data(format!("reports for {} and {} are not comparable", a.task, b.task)));
        }
        let rows = a
            .metrics
            .iter()
            .map(|(m, &x)| {
                let y = b.metrics[m];
                ParityRow {
                    metric: m.clone(),
                    fp32: x,
                    fp16: y,
                    delta: x - y,
                    flagged: (x - y).abs() > tolerance,
                }
            })
            .collect();
        Ok(Self { task: a.task.clone(), tolerance, rows, agreement: None })
    }

    pub fn max_abs_delta(&self) -> f64 {
        self.rows.iter().map(|r| r.delta.abs()).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| !r.flagged)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "task,metric,fp32,fp16,delta,flagged")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:.4},{:.4},{:.4},{}", self.task, r.metric, r.fp32, r.fp16, r.delta, u8::from(r.flagged))?;
        }
        Ok(())
    }
}

/// Runs both bundles on the test set and compares the full metric sets.
pub fn equivalence_report(b32: &ModelBundle, b16: &ModelBundle, test: &[Sample], tolerance: f64) -> Result<ParityReport> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    if b32.encoder != b16.encoder || b32.head != b16.head || b32.task != b16.task {
        return Err(Error::Config("bundles do not share an architecture".into()));
    }
    let cubes: Vec<&Tensor> = test.iter().map(|s| &s.cube).collect();
    let kind = b32.head_spec()?.kind;
    let o32 = run_inference(b32, &cubes, kind)?;
    let o16 = run_inference(b16, &cubes, kind)?;
    let r32 = score_outputs(&b32.task, kind, &o32, test)?;
    let r16 = score_outputs(&b16.task, kind, &o16, test)?;
    let mut report = ParityReport::from_reports(&r32, &r16, tolerance)?;
    if kind != HeadKind::UpernetRegressor {
        let (a, b) = (argmax_classes(&o32)?, argmax_classes(&o16)?);
        report.agreement = Some(a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64);
    }
    Ok(report)
}

pub const PROFILE_HEADER: &str =
    "Environment,Inf time per tile (s),Runtime (s),Peak Memory (MB),Peak Power (W),Avg Power (W),Energy (Wh),Baseline Memory (MB),Tiles,Per-tile times (s)";

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub environment: String,
    pub per_tile: Vec<f64>,
    /// Wall clock from opening the cube to the last prediction.
    pub runtime: f64,
    pub peak_memory_mb: f64,
    pub baseline_memory_mb: f64,
}

impl ProfileReport {
    pub fn mean_tile_time(&self) -> f64 {
        self.per_tile.iter().sum::<f64>() / self.per_tile.len().max(1) as f64
    }

    pub fn tiles_per_second(&self) -> f64 {
        self.per_tile.len() as f64 / self.runtime
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{PROFILE_HEADER}")?;
        let times: Vec<String> = self.per_tile.iter().map(|t| t.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},,,,{},{},{}",
            self.environment,
            self.mean_tile_time(),
            self.runtime,
            self.peak_memory_mb,
            self.baseline_memory_mb,
            self.per_tile.len(),
            times.join(";")
        )?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(PROFILE_HEADER) {
            return Err(Error::Data("profile CSV header does not match".into()));
        }
        let row = lines.next().ok_or_else(|| Error::Data("profile CSV has no row".into()))?;
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 10 {
            return Err(Error::Data(format!("profile row has {} fields", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Data(format!("profile value `{s}`: {e}")));
        let per_tile = f[9].split(';').filter(|s| !s.is_empty()).map(num).collect::<Result<Vec<_>>>()?;
        if f[8].parse::<usize>().ok() != Some(per_tile.len()) {
            return Err(Error::Data("tile count does not match the per-tile series".into()));
        }
        Ok(Self {
            environment: f[0].to_string(),
            per_tile,
            runtime: num(f[2])?,
            peak_memory_mb: num(f[3])?,
            baseline_memory_mb: num(f[7])?,
        })
    }
}

/// Resident set size of this process in MB, where the platform exposes it.
pub fn resident_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

/// Samples resident memory every 20 ms until dropped.
struct MemoryWatcher {
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<f64>>,
}

impl MemoryWatcher {
    fn start() -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            let mut peak = resident_mb().unwrap_or(0.0);
            while !flag.load(Ordering::Relaxed) {
                std::thread::sleep(Duration::from_millis(20));
                peak = peak.max(resident_mb().unwrap_or(0.0));
            }
            peak
        });
        Self { stop, handle: Some(handle) }
    }

    fn finish(mut self) -> f64 {
        self.stop.store(true, Ordering::Relaxed);
        let peak = self.handle.take().map(|h| h.join().unwrap_or(0.0)).unwrap_or(0.0);
        peak.max(resident_mb().unwrap_or(0.0))
    }
}

/// Ingests the cube at `path`, tiles it to the bundle input size in
/// row-major order and times inference tile by tile on one thread.
pub fn profile(bundle: &ModelBundle, path: &Path, norm: Normalization, environment: &str) -> Result<ProfileReport> {
    let enc = &bundle.encoder;
    if enc.height != enc.width {
        return Err(Error::Config(format!("profiling needs square tiles, bundle takes {}x{}", enc.height, enc.width)));
    }
    let baseline = resident_mb().unwrap_or(0.0);
    let watcher = MemoryWatcher::start();
    let start = Instant::now();
    let result = (|| {
        let cube = ingest_file(path, norm)?;
        let tiles = tile_cube(&cube, enc.height)?.records;
        if tiles.is_empty() {
            return Err(Error::Data(format!("cube {:?} yields no {}x{} tiles", cube.shape(), enc.height, enc.width)));
        }
        let model = bundle.model()?;
        let mut per_tile = Vec::with_capacity(tiles.len());
        for r in &tiles {
            if r.tile.shape() != enc.cube_shape() {
                return Err(Error::Data(format!("tile {:?} does not match the bundle input {:?}", r.tile.shape(), enc.cube_shape())));
            }
            let t0 = Instant::now();
            model.predict(&[&r.tile])?;
            per_tile.push(t0.elapsed().as_secs_f64());
        }
        Ok(per_tile)
    })();
    let runtime = start.elapsed().as_secs_f64();
    let peak = watcher.finish();
    Ok(ProfileReport {
        environment: environment.to_string(),
        per_tile: result?,
        runtime,
        peak_memory_mb: peak.max(baseline),
        baseline_memory_mb: baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{write_cube, RawCube};
    use crate::heads::finetune::Label;
    use crate::rng::RngStream;
    use crate::synthetic::{water_tile, Domain};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            height: 16,
            width: 16,
            depth: 1,
            heads: 2,
            taps: [1, 1, 1, 1],
            ..EncoderConfig::toy(16)
        }
    }

    fn bundle() -> ModelBundle {
        let m = TaskModel::random(tiny(), HeadSpec::unet(2, 4), &mut RngStream::new(1, "b")).unwrap();
        ModelBundle::from_model("flood", &m)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let b = bundle();
        let bytes = save_bundle(&b).unwrap();
        let back = load_bundle(&bytes).unwrap();
        assert_eq!(save_bundle(&back).unwrap(), bytes);
        assert_eq!(back.params.checksum(), b.params.checksum());
        let text = String::from_utf8_lossy(&bytes[..200]).to_string();
        assert!(text.starts_with("@task=flood\n@encoder={"));
    }

    #[test]
    fn mae_and_encoder_bundles() {
        let mae = Mae::init(tiny(), &mut RngStream::new(4, "mae")).unwrap();
        let full = load_bundle(&save_bundle(&ModelBundle::from_mae("teacher", &mae)).unwrap()).unwrap();
        assert_eq!(full.mae().unwrap().params, mae.params);
        assert!(full.model().is_err());
        let enc = load_bundle(&save_bundle(&ModelBundle::encoder_only("student", &mae)).unwrap()).unwrap();
        assert!(enc.mae().is_err());
        assert_eq!(enc.params, mae.encoder_params());
    }

    #[test]
    fn corruption_names_the_tensor() {
        let b = bundle();
        let bytes = save_bundle(&b).unwrap();
        let last = b.params.iter().last().unwrap().0.clone();
        match load_bundle(&bytes[..bytes.len() - 2]) {
            Err(Error::Bundle { name, .. }) => assert_eq!(name, last),
            other => panic!("{other:?}"),
        }
        // swap the first two descriptor lines
        let split = bytes.windows(2).position(|w| w == b"\n\n").unwrap();
        let manifest = std::str::from_utf8(&bytes[..split]).unwrap();
        let mut lines: Vec<&str> = manifest.lines().collect();
        lines.swap(3, 4);
        let mut swapped = lines.join("\n").into_bytes();
        swapped.extend_from_slice(&bytes[split..]);
        assert!(matches!(load_bundle(&swapped), Err(Error::Bundle { .. })));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(load_bundle(&trailing).is_err());
    }

    #[test]
    fn non_finite_weights_are_refused() {
        let mut b = bundle();
        let (name, t) = b.params.iter().next().map(|(n, t)| (n.clone(), t.clone())).unwrap();
        b.params.insert(name.clone(), t.map(|_| f64::NAN));
        assert!(matches!(save_bundle(&b), Err(Error::Bundle { name: n, .. }) if n == name));
    }

    #[test]
    fn quantization_halves_and_is_idempotent() {
        let b = bundle();
        let q = quantize_fp16(&b);
        assert_eq!(q.dtype(), DType::F16);
        let (s32, s16) = (save_bundle(&b).unwrap(), save_bundle(&q).unwrap());
        let blob = |s: &[u8]| s.len() - s.windows(5).position(|w| w == b"\n\nEOW").unwrap() - 6;
        assert_eq!(blob(&s32), 2 * blob(&s16));
        assert_eq!(save_bundle(&quantize_fp16(&q)).unwrap(), s16);
        assert_eq!(load_bundle(&s16).unwrap(), q);
    }

    #[test]
    fn powers_of_two_survive_quantization() {
        let mut b = bundle();
        let names: Vec<String> = b.params.iter().map(|(n, _)| n.clone()).collect();
        for (i, n) in names.iter().enumerate() {
            let t = b.params.get(n).unwrap().map(|v| if v < 0.0 { -(2f64.powi(-(i as i32 % 10))) } else { 2f64.powi(i as i32 % 5) });
            b.params.insert(n.clone(), t.cast(DType::F32));
        }
        let q = quantize_fp16(&b);
        for ((_, a), (_, c)) in b.params.iter().zip(q.params.iter()) {
            assert_eq!(a.data(), c.data());
        }
    }

    #[test]
    fn inference_is_deterministic_and_checked() {
        let b = bundle();
        let mut rng = RngStream::new(2, "t");
        let tiles: Vec<Tensor> = (0..3).map(|_| water_tile([4, 1, 16, 16], 8, Domain::SOURCE, &mut rng).0).collect();
        let refs: Vec<&Tensor> = tiles.iter().collect();
        let a = run_inference(&b, &refs, HeadKind::UnetDecoder).unwrap();
        assert_eq!(a, run_inference(&b, &refs, HeadKind::UnetDecoder).unwrap());
        assert_eq!(a.shape(), &[3, 2, 16, 16]);
        assert_eq!(run_inference(&b, &[], HeadKind::UnetDecoder).unwrap().numel(), 0);
        assert!(run_inference(&b, &refs, HeadKind::MlpClassifier).is_err());
        assert!(run_inference(&b, &[&Tensor::zeros(&[4, 1, 8, 8])], HeadKind::UnetDecoder).is_err());
    }

    #[test]
    fn parity_report_rows() {
        let b = bundle();
        let mut rng = RngStream::new(3, "t");
        let test: Vec<Sample> = (0..4)
            .map(|_| {
                let (cube, m) = water_tile([4, 1, 16, 16], 8, Domain::SOURCE, &mut rng);
                Sample { cube, label: Label::Mask(Arc::new(m)) }
            })
            .collect();
        let same = equivalence_report(&b, &b, &test, 0.25).unwrap();
        assert!(same.rows.iter().all(|r| r.delta == 0.0) && same.passed());
        assert_eq!(same.agreement, Some(1.0));
        assert!(equivalence_report(&b, &b, &[], 0.25).is_err());

        let mut fp32 = MetricReport::new("cloud-classification");
        fp32.insert("Acc", 97.22);
        fp32.insert("FP", 0.76);
        fp32.insert("F1", 95.22);
        let mut fp16 = MetricReport::new("cloud-classification");
        fp16.insert("Acc", 97.10);
        fp16.insert("FP", 0.88);
        fp16.insert("F1", 95.01);
        let r = ParityReport::from_reports(&fp32, &fp16, 0.25).unwrap();
        assert!((r.rows[0].delta - 0.12).abs() < 1e-9);
        assert!((r.max_abs_delta() - 0.21).abs() < 1e-9);
        let back = ParityReport::from_reports(&fp16, &fp32, 0.25).unwrap();
        assert!(r.rows.iter().zip(&back.rows).all(|(x, y)| x.delta == -y.delta));
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().nth(1).unwrap(), "cloud-classification,Acc,97.2200,97.1000,0.1200,0");
    }

    #[test]
    fn profile_counts_tiles_and_round_trips() {
        let b = bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.eocube");
        let data: Vec<f32> = (0..4 * 32 * 48).map(|i| (i % 97) as f32).collect();
        write_cube(&path, &RawCube { shape: [4, 1, 32, 48], wavelengths: None, data }).unwrap();
        let r = profile(&b, &path, Normalization::MinMax, "desk").unwrap();
        assert_eq!(r.per_tile.len(), 6);
        assert!(r.runtime >= r.per_tile.iter().sum::<f64>());
        assert!(r.peak_memory_mb >= r.baseline_memory_mb);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(ProfileReport::parse_csv(&text).unwrap(), r);
        assert!(text.lines().nth(1).unwrap().contains(",,,,"));
    }
}
