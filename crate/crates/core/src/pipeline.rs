//! Cube ingestion, band selection, tiling, splits and class-balance
//! sampling.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{RawCube, RawMask};
use crate::heads::finetune::{Label, Sample, Sampler};
use crate::rng::RngStream;
use crate::tensor::{DType, Tensor};

/// Raw value marking a missing measurement.
pub const MISSING: f64 = 32767.0;
/// Largest distance (µm) between a requested and a matched band centre.
pub const BAND_TOLERANCE: f64 = 0.05;
/// Tiles above this cloud fraction are labelled cloudy.
pub const CLOUDY_FRACTION: f64 = 0.70;
/// Cloud ratio below which a tile counts as clear.
pub const NEAR_ZERO_CLOUD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct DataCube {
    /// `[C, T, H, W]` values held at FP32 precision.
    pub data: Tensor,
    /// Band centres in µm, one per channel (empty when unknown).
    pub wavelengths: Vec<f64>,
    pub product_id: String,
}

impl DataCube {
    pub fn new(data: Tensor, wavelengths: Vec<f64>, product_id: impl Into<String>) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::shape("cube", format!("expected [C,T,H,W], got {:?}", data.shape())));
        }
        if !wavelengths.is_empty() && wavelengths.len() != data.shape()[0] {
            return Err(Error::Data(format!("{} wavelengths for {} bands", wavelengths.len(), data.shape()[0])));
        }
        Ok(Self {
            data: data.cast(DType::F32),
            wavelengths,
            product_id: product_id.into(),
        })
    }

    pub fn from_raw(raw: RawCube, product_id: impl Into<String>) -> Result<Self> {
        let data = Tensor::new(raw.shape.to_vec(), raw.data.iter().map(|&v| f64::from(v)).collect())?;
        let wl = raw.wavelengths.map(|w| w.iter().map(|&v| f64::from(v)).collect()).unwrap_or_default();
        Self::new(data, wl, product_id)
    }

    pub fn to_raw(&self) -> RawCube {
        let s = self.data.shape();
        RawCube {
            shape: [s[0], s[1], s[2], s[3]],
            wavelengths: (!self.wavelengths.is_empty()).then(|| self.wavelengths.iter().map(|&v| v as f32).collect()),
            data: self.data.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// One `H×W` plane.
    pub fn band(&self, c: usize, t: usize) -> &[f64] {
        let [_, nt, h, w] = self.shape();
        let start = (c * nt + t) * h * w;
        &self.data.data()[start..start + h * w]
    }

    /// Index of the band nearest `wavelength`, within the tolerance.
    pub fn band_index(&self, wavelength: f64) -> Result<usize> {
        if self.wavelengths.is_empty() {
            return Err(Error::Data("cube has no wavelength table".into()));
        }
        let (i, d) = self
            .wavelengths
            .iter()
            .enumerate()
            .map(|(i, w)| (i, (w - wavelength).abs()))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        if d > BAND_TOLERANCE {
            return Err(Error::Data(format!(
                "no band within {BAND_TOLERANCE} µm of {wavelength} µm (nearest is {:.3} µm)",
                self.wavelengths[i]
            )));
        }
        Ok(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Normalization {
    /// Per-band min-max over the whole cube.
    MinMax,
    /// Divide by a fixed reflectance scale, then clamp to `[0, 1]`.
    FixedScale(f64),
}

/// Clips negatives to zero, zeroes the missing-value sentinel, then
/// normalises each band to `[0, 1]`.
pub fn ingest(cube: &DataCube, norm: Normalization) -> Result<DataCube> {
    let [c, t, h, w] = cube.shape();
    let plane = t * h * w;
    let mut data = Vec::with_capacity(c * plane);
    for band in cube.data.data().chunks(plane.max(1)).take(c) {
        let clean: Vec<f64> = band.iter().map(|&v| if v < 0.0 || v == MISSING { 0.0 } else { v }).collect();
        match norm {
            Normalization::MinMax => {
                let lo = clean.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = clean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let span = hi - lo;
                data.extend(clean.iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }));
            }
            Normalization::FixedScale(s) => {
                if !(s > 0.0) {
                    return Err(Error::Config(format!("reflectance scale {s} must be positive")));
                }
                data.extend(clean.iter().map(|v| (v / s).clamp(0.0, 1.0)));
            }
        }
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Data("cube holds non-finite values".into()));
    }
    DataCube::new(Tensor::new(vec![c, t, h, w], data)?, cube.wavelengths.clone(), cube.product_id.clone())
}

pub fn ingest_file(path: &Path, norm: Normalization) -> Result<DataCube> {
    let raw = crate::formats::read_cube(path)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ingest(&DataCube::from_raw(raw, id)?, norm)
}

/// Nearest band per target wavelength, in target order.
pub fn select_bands(cube: &DataCube, targets: &[f64]) -> Result<DataCube> {
    let [_, t, h, w] = cube.shape();
    let idx: Vec<usize> = targets.iter().map(|&wl| cube.band_index(wl)).collect::<Result<_>>()?;
    let plane = t * h * w;
    let mut data = Vec::with_capacity(idx.len() * plane);
    for &i in &idx {
        data.extend_from_slice(&cube.data.data()[i * plane..(i + 1) * plane]);
    }
    DataCube::new(
        Tensor::new(vec![idx.len(), t, h, w], data)?,
        idx.iter().map(|&i| cube.wavelengths[i]).collect(),
        cube.product_id.clone(),
    )
}

/// Integer-valued raster, `-1` where missing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<i64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<i64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", format!("{} values for {height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_raw(raw: RawMask) -> Result<Self> {
        Self::new(raw.height, raw.width, raw.data.iter().map(|&v| i64::from(v)).collect())
    }

    pub fn to_raw(&self) -> Result<RawMask> {
        let data = self
            .data
            .iter()
            .map(|&v| i16::try_from(v).map_err(|_| Error::Data(format!("mask value {v} exceeds i16"))))
            .collect::<Result<_>>()?;
        Ok(RawMask {
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Fraction of pixels equal to 1.
    pub fn positive_fraction(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::Data("empty mask".into()));
        }
        Ok(self.data.iter().filter(|&&v| v == 1).count() as f64 / self.data.len() as f64)
    }
}

/// 1 iff the positive fraction strictly exceeds `threshold`.
pub fn tile_label(mask: &Mask, threshold: f64) -> Result<i64> {
    Ok(i64::from(mask.positive_fraction()? > threshold))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileRecord {
    /// `[C, T, s, s]`.
    pub tile: Tensor,
    pub mask: Option<Mask>,
    pub label: Option<i64>,
    pub cloud_ratio: f64,
    pub product_id: String,
    /// Tile grid position (row, column).
    pub position: (usize, usize),
}

impl TileRecord {
    /// Sets the mask, its cloud ratio and the derived tile label.
    pub fn with_mask(mut self, mask: Mask) -> Result<Self> {
        let s = self.tile.shape();
        if (mask.height, mask.width) != (s[2], s[3]) {
            return Err(Error::shape("tile", format!("mask {}x{} for tile {:?}", mask.height, mask.width, s)));
        }
        self.cloud_ratio = mask.positive_fraction()?;
        self.label = Some(tile_label(&mask, CLOUDY_FRACTION)?);
        self.mask = Some(mask);
        Ok(self)
    }

    /// Training sample with a mask or class label.
    pub fn sample(&self) -> Result<Sample> {
        let label = match (&self.mask, self.label) {
            (Some(m), _) => Label::Mask(Arc::new(m.data.clone())),
            (None, Some(c)) => Label::Class(c),
            (None, None) => return Err(Error::Data(format!("tile {:?} of {} is unlabelled", self.position, self.product_id))),
        };
        Ok(Sample { cube: self.tile.clone(), label })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tiling {
    pub records: Vec<TileRecord>,
    pub warnings: Vec<String>,
}

/// Disjoint `s×s` tiles in row-major order; partial edges are dropped.
pub fn tile_cube(cube: &DataCube, s: usize) -> Result<Tiling> {
    if s == 0 {
        return Err(Error::Config("tile size must be at least 1".into()));
    }
    let [c, t, h, w] = cube.shape();
    let (rows, cols) = (h / s, w / s);
    let mut warnings = Vec::new();
    if rows * cols == 0 {
        warnings.push(format!("{}: {h}x{w} cube yields no {s}x{s} tiles", cube.product_id));
    } else if h % s != 0 || w % s != 0 {
        warnings.push(format!("{}: dropping {} edge rows and {} edge columns", cube.product_id, h % s, w % s));
    }
    let src = cube.data.data();
    let mut records = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for q in 0..cols {
            let mut data = Vec::with_capacity(c * t * s * s);
            for ct in 0..c * t {
                for y in r * s..(r + 1) * s {
                    let start = (ct * h + y) * w + q * s;
                    data.extend_from_slice(&src[start..start + s]);
                }
            }
            records.push(TileRecord {
                tile: Tensor::new(vec![c, t, s, s], data)?.cast(DType::F32),
                mask: None,
                label: None,
                cloud_ratio: 0.0,
                product_id: cube.product_id.clone(),
                position: (r, q),
            });
        }
    }
    Ok(Tiling { records, warnings })
}

/// Cuts a scene mask with the same grid as `tile_cube`.
pub fn tile_mask(mask: &Mask, s: usize) -> Result<Vec<Mask>> {
    if s == 0 {
        return Err(Error::Config("tile size must be at least 1".into()));
    }
    let mut out = Vec::new();
    for r in 0..mask.height / s {
        for q in 0..mask.width / s {
            let mut data = Vec::with_capacity(s * s);
            for y in r * s..(r + 1) * s {
                data.extend_from_slice(&mask.data[y * mask.width + q * s..y * mask.width + (q + 1) * s]);
            }
            out.push(Mask::new(s, s, data)?);
        }
    }
    Ok(out)
}

/// Assigns whole products to the test split. The test product count is
/// `round(test_fraction · P)` clamped to `1..P`.
pub fn split_by_product(records: &[TileRecord], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let products: Vec<&str> = records.iter().map(|r| r.product_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    if products.len() < 2 {
        return Err(Error::Data(format!("product split needs at least 2 products, got {}", products.len())));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0,1)")));
    }
    let n_test = ((test_fraction * products.len() as f64).round() as usize).clamp(1, products.len() - 1);
    let mut order = products.clone();
    RngStream::new(seed, "split").shuffle(&mut order);
    let test: BTreeSet<&str> = order[..n_test].iter().copied().collect();
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        if test.contains(r.product_id.as_str()) {
            te.push(i);
        } else {
            tr.push(i);
        }
    }
    Ok((tr, te))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Weighted1to1,
    DownsampleClear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    pub strategy: Strategy,
    /// Per-record draw weight (all ones for downsampling).
    pub weights: Vec<f64>,
    /// Per-record keep flag (all true for weighting).
    pub keep: Vec<bool>,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn kept(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    /// Sampler over the kept records.
    pub fn sampler(&self) -> Sampler {
        match self.strategy {
            Strategy::Weighted1to1 => Sampler::Weighted(self.kept().iter().map(|&i| self.weights[i]).collect()),
            Strategy::DownsampleClear => Sampler::Shuffle,
        }
    }
}

pub fn make_sampling_plan(records: &[TileRecord], strategy: Strategy, seed: u64) -> Result<SamplingPlan> {
    let n = records.len();
    match strategy {
        Strategy::Weighted1to1 => {
            let labels: Vec<i64> = records
                .iter()
                .map(|r| r.label.ok_or_else(|| Error::Data(format!("tile {:?} of {} has no label", r.position, r.product_id))))
                .collect::<Result<_>>()?;
            let pos = labels.iter().filter(|&&l| l == 1).count();
            if pos == 0 {
                return Err(Error::Data("no positive tiles to balance".into()));
            }
            let w = (n - pos) as f64 / pos as f64;
            Ok(SamplingPlan {
                strategy,
                weights: labels.iter().map(|&l| if l == 1 { w } else { 1.0 }).collect(),
                keep: vec![true; n],
                seed,
            })
        }
        Strategy::DownsampleClear => {
            let high = records.iter().filter(|r| r.cloud_ratio >= CLOUDY_FRACTION).count();
            if high == 0 {
                return Err(Error::Data("no high-cloud tiles to match".into()));
            }
            let mut clear: Vec<usize> = (0..n).filter(|&i| records[i].cloud_ratio < NEAR_ZERO_CLOUD).collect();
            RngStream::new(seed, "downsample-clear").shuffle(&mut clear);
            let mut keep = vec![true; n];
            for &i in clear.iter().skip(high) {
                keep[i] = false;
            }
            Ok(SamplingPlan {
                strategy,
                weights: vec![1.0; n],
                keep,
                seed,
            })
        }
    }
}

/// Uniform subset without replacement. Subsets of one seed are nested:
/// the 25 % subset lies inside the 50 % subset.
pub fn subsample_labels(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} outside (0,1]")));
    }
    let k = (fraction * n as f64).round() as usize;
    if k == 0 {
        return Err(Error::Data(format!("fraction {fraction} of {n} records leaves none")));
    }
    let mut idx = RngStream::new(seed, "subsample").permutation(n);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// One line of a tile manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub tile: String,
    pub mask: Option<String>,
    pub label: Option<i64>,
    pub cloud_ratio: f64,
    pub product_id: String,
}

pub fn write_manifest(entries: &[ManifestEntry], mut w: impl Write) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut w, e).map_err(|err| Error::Data(err.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_manifest(r: impl BufRead) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_oneof, proptest, Just};

    fn cube(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> DataCube {
        DataCube::new(
            Tensor::new(vec![c, 1, h, w], (0..c * h * w).map(f).collect()).unwrap(),
            (0..c).map(|i| 0.45 + 0.01 * i as f64).collect(),
            "p",
        )
        .unwrap()
    }

    fn record(product: &str, label: Option<i64>, ratio: f64) -> TileRecord {
        TileRecord {
            tile: Tensor::zeros(&[1, 1, 1, 1]),
            mask: None,
            label,
            cloud_ratio: ratio,
            product_id: product.into(),
            position: (0, 0),
        }
    }

    #[test]
    fn ingest_order_of_operations() {
        let raw = DataCube::new(Tensor::new(vec![1, 1, 1, 4], vec![-5.0, 32767.0, 5000.0, 2500.0]).unwrap(), vec![], "p").unwrap();
        let out = ingest(&raw, Normalization::MinMax).unwrap();
        assert_eq!(out.data.data(), &[0.0, 0.0, 1.0, 0.5]);
        let fixed = ingest(&raw, Normalization::FixedScale(10000.0)).unwrap();
        assert_eq!(fixed.data.data(), &[0.0, 0.0, 0.5, 0.25]);
        assert_eq!(ingest(&out, Normalization::MinMax).unwrap(), out);
    }

    #[test]
    fn band_selection() {
        let c = cube(50, 2, 2, |i| i as f64);
        let wl = vec![0.49, 0.60, 0.66, 0.87];
        let c = DataCube {
            wavelengths: (0..50).map(|i| 0.45 + 0.01 * i as f64).collect(),
            ..c
        };
        let s = select_bands(&c, &wl).unwrap();
        assert_eq!(s.shape(), [4, 1, 2, 2]);
        assert_eq!(s.band(0, 0), c.band(4, 0));
        assert_eq!(s.band(3, 0), c.band(42, 0));
        assert!(select_bands(&c, &[2.2]).is_err());
        let same = select_bands(&c, &c.wavelengths.clone()).unwrap();
        assert_eq!(same.data, c.data);
    }

    #[test]
    fn tiling_counts_and_contents() {
        let c = cube(1, 5, 7, |i| i as f64);
        let t = tile_cube(&c, 2).unwrap();
        assert_eq!(t.records.len(), 6);
        assert_eq!(t.records[4].position, (1, 1));
        assert_eq!(t.records[4].tile.data(), &[16.0, 17.0, 23.0, 24.0]);
        assert_eq!(t.warnings.len(), 1);
        let small = cube(1, 223, 223, |_| 0.0);
        let t = tile_cube(&small, 224).unwrap();
        assert!(t.records.is_empty() && !t.warnings.is_empty());
        assert_eq!(tile_cube(&cube(1, 224, 224, |_| 0.0), 224).unwrap().records.len(), 1);
        let m = Mask::new(5, 7, (0..35).collect()).unwrap();
        assert_eq!(tile_mask(&m, 2).unwrap()[4].data, vec![16, 17, 23, 24]);
    }

    #[test]
    fn tile_label_is_strict() {
        let frac = |k: usize| Mask::new(10, 10, (0..100).map(|i| i64::from(i < k)).collect()).unwrap();
        assert_eq!(tile_label(&frac(71), 0.70).unwrap(), 1);
        assert_eq!(tile_label(&frac(70), 0.70).unwrap(), 0);
        assert_eq!(tile_label(&frac(0), 0.70).unwrap(), 0);
        assert!(tile_label(&Mask::new(0, 0, vec![]).unwrap(), 0.7).is_err());
    }

    #[test]
    fn product_split() {
        let recs: Vec<_> = (0..40).flat_map(|p| (0..3).map(move |_| record(&format!("p{p:02}"), None, 0.0))).collect();
        let (tr, te) = split_by_product(&recs, 0.2, 7).unwrap();
        let prods = |ix: &[usize]| ix.iter().map(|&i| recs[i].product_id.clone()).collect::<BTreeSet<_>>();
        assert_eq!(prods(&te).len(), 8);
        assert_eq!(prods(&tr).len(), 32);
        assert!(prods(&tr).is_disjoint(&prods(&te)));
        assert_eq!(split_by_product(&recs, 0.2, 7).unwrap(), (tr, te));
        assert!(split_by_product(&recs[..3], 0.2, 7).is_err());
    }

    #[test]
    fn sampling_plans() {
        let mut recs: Vec<_> = (0..90).map(|_| record("a", Some(0), 0.0)).collect();
        recs.extend((0..10).map(|_| record("a", Some(1), 0.9)));
        let plan = make_sampling_plan(&recs, Strategy::Weighted1to1, 0).unwrap();
        assert_eq!(plan.weights[95], 9.0);
        assert_eq!(plan.weights[0], 1.0);
        let balanced: Vec<_> = (0..10).map(|i| record("a", Some(i % 2), 0.0)).collect();
        let p = make_sampling_plan(&balanced, Strategy::Weighted1to1, 0).unwrap();
        assert!(p.weights.iter().all(|&w| w == 1.0));
        assert!(make_sampling_plan(&recs[..90], Strategy::Weighted1to1, 0).is_err());

        let mut recs: Vec<_> = (0..12).map(|_| record("a", None, 0.8)).collect();
        recs.extend((0..40).map(|_| record("a", None, 0.0)));
        recs.extend((0..5).map(|_| record("a", None, 0.3)));
        let plan = make_sampling_plan(&recs, Strategy::DownsampleClear, 3).unwrap();
        let kept = plan.kept();
        assert_eq!(kept.iter().filter(|&&i| recs[i].cloud_ratio < NEAR_ZERO_CLOUD).count(), 12);
        assert_eq!(kept.len(), 12 + 12 + 5);
    }

    #[test]
    fn subsets() {
        assert_eq!(subsample_labels(200, 0.5, 1).unwrap().len(), 100);
        assert_eq!(subsample_labels(200, 1.0, 1).unwrap(), (0..200).collect::<Vec<_>>());
        assert!(subsample_labels(2, 0.1, 1).is_err());
        assert!(subsample_labels(2, 0.0, 1).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let e = vec![
            ManifestEntry { tile: "t0.eocube".into(), mask: Some("t0.eomask".into()), label: Some(1), cloud_ratio: 0.75, product_id: "p".into() },
            ManifestEntry { tile: "t1.eocube".into(), mask: None, label: None, cloud_ratio: 0.0, product_id: "q".into() },
        ];
        let mut buf = Vec::new();
        write_manifest(&e, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 2);
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), e);
    }

    proptest! {
        #[test]
        fn ingest_is_idempotent(vals in proptest::collection::vec(prop_oneof![Just(-5.0), Just(32767.0), 0.0..5000.0f64], 1..40)) {
            let n = vals.len();
            let raw = DataCube::new(Tensor::new(vec![1, 1, 1, n], vals).unwrap(), vec![], "p").unwrap();
            let once = ingest(&raw, Normalization::MinMax).unwrap();
            prop_assert!(once.data.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(ingest(&once, Normalization::MinMax).unwrap(), once);
        }

        #[test]
        fn tiles_are_disjoint_and_in_bounds(h in 1usize..30, w in 1usize..30, s in 1usize..8) {
            let c = cube(1, h, w, |i| i as f64);
            let t = tile_cube(&c, s).unwrap();
            prop_assert_eq!(t.records.len(), (h / s) * (w / s));
            let mut seen = BTreeSet::new();
            for r in &t.records {
                for &v in r.tile.data() {
                    let i = v as usize;
                    prop_assert!(i / w < (h / s) * s && i % w < (w / s) * s);
                    prop_assert!(seen.insert(i));
                }
            }
        }

        #[test]
        fn splits_never_share_products(seed in any::<u64>(), p in 2usize..12, frac in 0.0..0.9f64) {
            let recs: Vec<_> = (0..p * 2).map(|i| record(&format!("p{}", i % p), None, 0.0)).collect();
            let (tr, te) = split_by_product(&recs, frac, seed).unwrap();
            let a: BTreeSet<_> = tr.iter().map(|&i| &recs[i].product_id).collect();
            let b: BTreeSet<_> = te.iter().map(|&i| &recs[i].product_id).collect();
            prop_assert!(a.is_disjoint(&b));
            prop_assert_eq!(tr.len() + te.len(), recs.len());
        }

        #[test]
        fn label_subsets_nest(seed in any::<u64>(), n in 4usize..300) {
            let full = subsample_labels(n, 1.0, seed).unwrap();
            let half = subsample_labels(n, 0.5, seed).unwrap();
            let quarter = subsample_labels(n, 0.25, seed).unwrap();
            prop_assert!(quarter.iter().all(|i| half.contains(i)));
            prop_assert!(half.iter().all(|i| full.contains(i)));
        }
    }
}
