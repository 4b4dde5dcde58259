//! Proxy labels from spectral indices: NDWI water masks and HOT cloud masks,
//! both thresholded with Otsu's method.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{DataCube, Mask};

pub const OTSU_BINS: usize = 256;
/// Fraction of darkest-blue pixels forming the clear-sky candidate set.
pub const CANDIDATE_FRACTION: f64 = 0.0015;
pub const CANDIDATE_BINS: usize = 20;
pub const PER_BIN: usize = 20;

pub const BLUE: f64 = 0.49;
pub const GREEN: f64 = 0.60;
pub const RED: f64 = 0.66;
pub const NIR: f64 = 0.87;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Ndwi,
    Hot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexImage {
    pub kind: IndexKind,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("bands of {} and {} pixels", a.len(), b.len())));
    }
    Ok(())
}

/// `(g − n)/(g + n)`, zero where both bands are zero.
pub fn ndwi(green: &[f64], nir: &[f64]) -> Result<Vec<f64>> {
    same_len("ndwi", green, nir)?;
    Ok(green
        .iter()
        .zip(nir)
        .map(|(g, n)| if g + n == 0.0 { 0.0 } else { (g - n) / (g + n) })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClearSkyLine {
    pub m: f64,
    pub b: f64,
}

/// Fits `red = m · blue + b` on the brightest-red pixels of the darkest-blue
/// candidates.
///
/// Candidates are the `⌈0.15 %⌉` valid pixels (either band non-zero) with
/// the lowest blue. They are split into 20 equal-width blue bins; each bin
/// keeps its 20 highest-red pixels, or all of them when it holds fewer.
pub fn fit_clear_sky_line(blue: &[f64], red: &[f64]) -> Result<ClearSkyLine> {
    Ok(clear_sky_points(blue, red)?.1)
}

/// Regression points and the fitted line.
pub fn clear_sky_points(blue: &[f64], red: &[f64]) -> Result<(Vec<(f64, f64)>, ClearSkyLine)> {
    same_len("clear_sky_line", blue, red)?;
    let mut valid: Vec<usize> = (0..blue.len()).filter(|&i| blue[i] != 0.0 || red[i] != 0.0).collect();
    if valid.is_empty() {
        return Err(Error::Data("no valid pixels for the clear-sky line".into()));
    }
    let k = (CANDIDATE_FRACTION * valid.len() as f64).ceil() as usize;
    valid.sort_by(|&a, &b| blue[a].total_cmp(&blue[b]).then(a.cmp(&b)));
    let cand = &valid[..k];
    let lo = blue[cand[0]];
    let hi = blue[cand[k - 1]];
    if hi <= lo {
        return Err(Error::Data("darkest pixels share one blue value; the clear-sky line is undetermined".into()));
    }
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); CANDIDATE_BINS];
    for &i in cand {
        let j = (((blue[i] - lo) / (hi - lo)) * CANDIDATE_BINS as f64) as usize;
        bins[j.min(CANDIDATE_BINS - 1)].push(i);
    }
    let mut pts = Vec::new();
    for mut bin in bins {
        bin.sort_by(|&a, &b| red[b].total_cmp(&red[a]).then(a.cmp(&b)));
        pts.extend(bin.iter().take(PER_BIN).map(|&i| (blue[i], red[i])));
    }
    let line = least_squares(&pts)?;
    Ok((pts, line))
}

fn least_squares(pts: &[(f64, f64)]) -> Result<ClearSkyLine> {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Data("regression points need at least two distinct blue values".into()));
    }
    let m = sxy / sxx;
    if !m.is_finite() {
        return Err(Error::Data("clear-sky slope is not finite".into()));
    }
    Ok(ClearSkyLine { m, b: my - m * mx })
}

/// `|m · blue − red| + b/√(1 + m²)`.
pub fn hot(blue: &[f64], red: &[f64], line: ClearSkyLine) -> Result<Vec<f64>> {
    same_len("hot", blue, red)?;
    let offset = line.b / (1.0 + line.m * line.m).sqrt();
    Ok(blue.iter().zip(red).map(|(bl, r)| (line.m * bl - r).abs() + offset).collect())
}

/// 256-bin histogram over `[min, max]` of finite values.
pub fn histogram(values: &[f64]) -> Result<(Vec<u64>, f64, f64)> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("index image holds non-finite values".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Data("constant image has no Otsu threshold".into()));
    }
    let mut h = vec![0u64; OTSU_BINS];
    for v in values {
        h[bin_of(*v, lo, hi)] += 1;
    }
    Ok((h, lo, hi))
}

fn bin_of(v: f64, lo: f64, hi: f64) -> usize {
    (((v - lo) / (hi - lo) * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

/// 256-bit product of two u128, as (high, low).
fn wide_mul(a: u128, b: u128) -> (u128, u128) {
    let mask = u64::MAX as u128;
    let (a1, a0) = (a >> 64, a & mask);
    let (b1, b0) = (b >> 64, b & mask);
    let lo = a0 * b0;
    let mid1 = a1 * b0;
    let mid2 = a0 * b1;
    let (mid, carry) = mid1.overflowing_add(mid2);
    let (low, c2) = lo.overflowing_add((mid & mask) << 64);
    let high = a1 * b1 + (mid >> 64) + ((carry as u128) << 64) + c2 as u128;
    (high, low)
}

/// Bin index `t` splitting the histogram into bins `< t` and `≥ t` that
/// maximises between-class variance. Scores are compared exactly as
/// `(S₀N₁ − S₁N₀)² / (N₀N₁)` with bin indices as values; ties keep the
/// lowest `t`.
pub fn otsu_from_histogram(hist: &[u64]) -> Result<usize> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Data("histogram needs two occupied bins".into()));
    }
    let n: u128 = hist.iter().map(|&c| c as u128).sum();
    let s: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let (mut n0, mut s0) = (0u128, 0u128);
    let mut best: Option<(usize, u128, u128)> = None;
    for t in 1..hist.len() {
        n0 += hist[t - 1] as u128;
        s0 += (t - 1) as u128 * hist[t - 1] as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // S₀N₁ − S₁N₀ = S₀N − S N₀
        let d = (s0 * n).abs_diff(s * n0);
        let num = d * d;
        let den = n0 * n1;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => wide_mul(num, bd) > wide_mul(bn, den),
        };
        if better {
            best = Some((t, num, den));
        }
    }
    Ok(best.expect("two occupied bins give a split").0)
}

/// Otsu threshold at the winning bin edge; the mask marks values strictly
/// above it.
pub fn otsu_threshold(values: &[f64]) -> Result<(f64, Vec<bool>)> {
    let (hist, lo, hi) = histogram(values)?;
    let t = otsu_from_histogram(&hist)?;
    let thr = lo + (hi - lo) * t as f64 / OTSU_BINS as f64;
    Ok((thr, values.iter().map(|&v| v > thr).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskTask {
    Water,
    Cloud,
}

fn band<'a>(cube: &'a DataCube, wavelength: f64, name: &str) -> Result<&'a [f64]> {
    let i = cube
        .band_index(wavelength)
        .map_err(|_| Error::Data(format!("{name} band near {wavelength} µm is missing")))?;
    Ok(cube.band(i, 0))
}

/// Binary water or cloud mask of the first frame.
pub fn generate_mask(cube: &DataCube, task: MaskTask) -> Result<Mask> {
    let [_, _, h, w] = cube.shape();
    let index = match task {
        MaskTask::Water => ndwi(band(cube, GREEN, "green")?, band(cube, NIR, "NIR")?)?,
        MaskTask::Cloud => {
            let (b, r) = (band(cube, BLUE, "blue")?, band(cube, RED, "red")?);
            hot(b, r, fit_clear_sky_line(b, r)?)?
        }
    };
    let (_, mask) = otsu_threshold(&index)?;
    Mask::new(h, w, mask.into_iter().map(i64::from).collect())
}
