//! Synthetic fixtures standing in for real sensor data.

use crate::formats::RawCube;
use crate::pipeline::MISSING;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Smooth multi-band texture with a strong per-cube band offset, so masked
/// patches are largely predictable from visible ones.
pub fn textured_cube(shape: [usize; 4], rng: &mut RngStream) -> Tensor {
    let [c, t, h, w] = shape;
    let offsets: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.2, 0.8)).collect();
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            let theta = rng.uniform_range(0.0, std::f64::consts::PI);
            let freq = rng.uniform_range(0.05, 0.25);
            [freq * theta.cos(), freq * theta.sin(), rng.uniform_range(0.0, 6.283), rng.uniform_range(0.03, 0.08)]
        })
        .collect();
    let gains: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.5, 1.5)).collect();
    let mut data = Vec::with_capacity(c * t * h * w);
    for ci in 0..c {
        for _ in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let tex: f64 = waves
                        .iter()
                        .map(|[fx, fy, ph, a]| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                        .sum();
                    let noise = 0.005 * rng.normal();
                    data.push((offsets[ci] + gains[ci] * tex + noise).clamp(0.0, 1.0));
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), data).expect("extent matches")
}

pub fn textured_cubes(n: usize, shape: [usize; 4], seed: u64) -> Vec<Tensor> {
    let root = RngStream::new(seed, "synthetic/textured");
    (0..n).map(|i| textured_cube(shape, &mut root.child(&i.to_string()))).collect()
}

/// Toy band centres (µm) of the four-band fixtures: blue, green, red, NIR.
pub const TOY_WAVELENGTHS: [f64; 4] = [0.49, 0.60, 0.66, 0.87];

const WATER: [f64; 4] = [0.08, 0.10, 0.05, 0.03];
const LAND: [f64; 4] = [0.06, 0.09, 0.08, 0.35];
const CLOUD: [f64; 4] = [0.75, 0.78, 0.80, 0.72];

/// Acquisition conditions; the target domain is darker, hazier and noisier
/// than the source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Domain {
    pub gain: f64,
    pub haze: f64,
    pub noise: f64,
}

impl Domain {
    pub const SOURCE: Domain = Domain { gain: 1.0, haze: 0.0, noise: 0.01 };
    pub const TARGET: Domain = Domain { gain: 0.8, haze: 0.04, noise: 0.02 };
}

/// Random rectangle `[y0, y1) × [x0, x1)` in grid cells.
fn cell_rect(grid: (usize, usize), rng: &mut RngStream) -> (usize, usize, usize, usize) {
    let (gh, gw) = grid;
    let h = 1 + rng.below(gh);
    let w = 1 + rng.below(gw);
    let y0 = rng.below(gh - h + 1);
    let x0 = rng.below(gw - w + 1);
    (y0, y0 + h, x0, x0 + w)
}

/// Fills a `[C,T,H,W]` cube from a per-pixel class map and class spectra.
fn render(shape: [usize; 4], classes: &[usize], spectra: &[[f64; 4]], domain: Domain, rng: &mut RngStream) -> Tensor {
    let [c, t, h, w] = shape;
    let mut data = Vec::with_capacity(c * t * h * w);
    let tex = (rng.uniform_range(0.0, 6.283), rng.uniform_range(0.1, 0.3));
    for ci in 0..c {
        for _ in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let base = spectra[classes[y * w + x]][ci % 4];
                    let ripple = 0.01 * (tex.1 * (x + y) as f64 + tex.0).sin();
                    let v = domain.gain * (base + ripple) + domain.haze + domain.noise * rng.normal();
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), data).expect("extent matches")
}

/// Water tile whose water body is a union of one or two rectangles aligned
/// to `patch`-sized cells, so each patch is pure. Returns the cube and the
/// 0/1 mask.
pub fn water_tile(shape: [usize; 4], patch: usize, domain: Domain, rng: &mut RngStream) -> (Tensor, Vec<i64>) {
    let [_, _, h, w] = shape;
    let grid = (h / patch, w / patch);
    let mut classes = vec![0usize; h * w];
    for _ in 0..1 + rng.below(2) {
        let (y0, y1, x0, x1) = cell_rect(grid, rng);
        for y in y0 * patch..y1 * patch {
            for x in x0 * patch..x1 * patch {
                classes[y * w + x] = 1;
            }
        }
    }
    let cube = render(shape, &classes, &[LAND, WATER], domain, rng);
    (cube, classes.into_iter().map(|c| c as i64).collect())
}

/// Cloud tile with `round(fraction · cells)` cloudy patch cells.
pub fn cloud_tile(shape: [usize; 4], patch: usize, fraction: f64, domain: Domain, rng: &mut RngStream) -> (Tensor, Vec<i64>) {
    let [_, _, h, w] = shape;
    let (gh, gw) = (h / patch, w / patch);
    let cloudy = (fraction.clamp(0.0, 1.0) * (gh * gw) as f64).round() as usize;
    let cells = rng.permutation(gh * gw);
    let mut classes = vec![0usize; h * w];
    for &cell in &cells[..cloudy] {
        let (cy, cx) = (cell / gw, cell % gw);
        for y in cy * patch..(cy + 1) * patch {
            for x in cx * patch..(cx + 1) * patch {
                classes[y * w + x] = 1;
            }
        }
    }
    let cube = render(shape, &classes, &[LAND, CLOUD], domain, rng);
    (cube, classes.into_iter().map(|c| c as i64).collect())
}

/// Blue and red bands of a hazy scene plus the haze truth mask.
#[derive(Clone, Debug)]
pub struct HazeScene {
    pub blue: Vec<f64>,
    pub red: Vec<f64>,
    pub haze: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

/// Clear pixels follow `red = slope · blue` plus Gaussian noise. A dark ramp
/// of `0.2 %` of the pixels spreads blue over `[0.01, 0.09]` so the darkest
/// candidates span a usable range; `haze_fraction` of the remaining pixels
/// get blue raised by `U(0.1, 0.2)`.
pub fn haze_scene(h: usize, w: usize, slope: f64, noise: f64, haze_fraction: f64, rng: &mut RngStream) -> HazeScene {
    let n = h * w;
    let ramp = (0.002 * n as f64).ceil() as usize;
    let order = rng.permutation(n);
    let mut blue = vec![0.0; n];
    let mut haze = vec![false; n];
    for (k, &i) in order.iter().enumerate() {
        if k < ramp {
            blue[i] = 0.01 + 0.08 * k as f64 / ramp as f64;
        } else {
            blue[i] = rng.uniform_range(0.1, 0.3);
        }
    }
    let hazy = (haze_fraction * (n - ramp) as f64).round() as usize;
    for &i in &order[ramp..ramp + hazy] {
        haze[i] = true;
    }
    let red: Vec<f64> = blue.iter().map(|b| slope * b + noise * rng.normal()).collect();
    for (i, b) in blue.iter_mut().enumerate() {
        if haze[i] {
            *b += rng.uniform_range(0.1, 0.2);
        }
    }
    HazeScene { blue, red, haze, height: h, width: w }
}

/// Scene dimensions that cut into 8 × 11 tiles of 224 pixels.
pub const SCENE_HEIGHT: usize = 1792;
pub const SCENE_WIDTH: usize = 2464;

/// Raw four-band scene in scaled reflectance (`0..10000`) with about 0.1 %
/// of values set to the missing sentinel and 0.1 % negative.
pub fn raw_scene(height: usize, width: usize, seed: u64) -> RawCube {
    let mut rng = RngStream::new(seed, "synthetic/raw-scene");
    let n = height * width;
    let mut data = Vec::with_capacity(4 * n);
    for (c, &wl) in TOY_WAVELENGTHS.iter().enumerate() {
        let phase = rng.uniform_range(0.0, 6.283);
        for y in 0..height {
            for x in 0..width {
                let v = 2000.0 + 500.0 * c as f64 + 1500.0 * ((x as f64 * 0.01 + y as f64 * 0.013) * wl + phase).sin();
                data.push(v as f32);
            }
        }
    }
    for _ in 0..data.len() / 1000 {
        let i = rng.below(data.len());
        data[i] = MISSING as f32;
        let j = rng.below(data.len());
        data[j] = -rng.uniform_range(1.0, 100.0) as f32;
    }
    RawCube {
        shape: [4, 1, height, width],
        wavelengths: Some(TOY_WAVELENGTHS.iter().map(|&w| w as f32).collect()),
        data,
    }
}
