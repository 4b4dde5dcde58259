//! ViT encoder: patchify, class token, 3-D sine-cosine positions and
//! pre-norm transformer blocks with per-layer feature taps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ones, trunc_normal, zeros, Binding, ParamSet};
use crate::rng::RngStream;
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Patch extents `(t, h, w)`.
    pub patch: [usize; 3],
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// 1-based block indices whose outputs feed decoder skips.
    pub taps: [usize; 4],
}

/// Evenly spaced taps `(⌈L/4⌉, ⌈L/2⌉, ⌈3L/4⌉, L)`.
pub fn default_taps(depth: usize) -> [usize; 4] {
    [depth.div_ceil(4), depth.div_ceil(2), (3 * depth).div_ceil(4), depth]
}

impl EncoderConfig {
    /// Desk-scale encoder on 4-band 64×64 tiles with 8×8 patches.
    pub fn toy(dim: usize) -> Self {
        Self {
            channels: 4,
            frames: 1,
            height: 64,
            width: 64,
            patch: [1, 8, 8],
            dim,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            dropout: 0.0,
            taps: default_taps(4),
        }
    }

    pub fn toy_teacher() -> Self {
        Self::toy(64)
    }

    pub fn toy_student() -> Self {
        Self::toy(16)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("embedding dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.depth == 0 {
            return bad("encoder needs at least one block".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.taps.iter().any(|&t| t == 0 || t > self.depth) || self.taps.windows(2).any(|w| w[0] > w[1]) {
            return bad(format!("tap layers {:?} must be non-decreasing within 1..={}", self.taps, self.depth));
        }
        check_divisible([self.channels, self.frames, self.height, self.width], self.patch)?;
        Ok(())
    }

    pub fn grid(&self) -> [usize; 3] {
        [self.frames / self.patch[0], self.height / self.patch[1], self.width / self.patch[2]]
    }

    pub fn num_patches(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.iter().product::<usize>() * self.channels
    }

    pub fn cube_shape(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }
}

fn check_divisible(shape: [usize; 4], patch: [usize; 3]) -> Result<()> {
    for (axis, (&n, &p)) in ["T", "H", "W"].iter().zip(shape[1..].iter().zip(&patch)) {
        if p == 0 || n % p != 0 || n == 0 {
            return Err(Error::Config(format!("axis {axis} of extent {n} is not divisible by patch extent {p}")));
        }
    }
    Ok(())
}

fn cube_dims(cube: &Tensor) -> Result<[usize; 4]> {
    match *cube.shape() {
        [c, t, h, w] => Ok([c, t, h, w]),
        _ => Err(Error::shape("patchify", format!("expected [C,T,H,W], got {:?}", cube.shape()))),
    }
}

/// Flattens a `[C,T,H,W]` cube into `N × (C·pt·ph·pw)` patch rows.
///
/// Patches are numbered row-major over the `(t, h, w)` grid and each row is
/// laid out in `(C, t, h, w)` order.
pub fn patchify(cube: &Tensor, patch: [usize; 3]) -> Result<Tensor> {
    let [c, t, h, w] = cube_dims(cube)?;
    check_divisible([c, t, h, w], patch)?;
    let [pt, ph, pw] = patch;
    let (gt, gh, gw) = (t / pt, h / ph, w / pw);
    let row = c * pt * ph * pw;
    let src = cube.data();
    let mut out = Vec::with_capacity(src.len());
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                for ci in 0..c {
                    for dt in 0..pt {
                        for dh in 0..ph {
                            let base = ((ci * t + it * pt + dt) * h + ih * ph + dh) * w + iw * pw;
                            out.extend_from_slice(&src[base..base + pw]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![gt * gh * gw, row], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, shape: [usize; 4], patch: [usize; 3]) -> Result<Tensor> {
    let [c, t, h, w] = shape;
    check_divisible(shape, patch)?;
    let [pt, ph, pw] = patch;
    let (gt, gh, gw) = (t / pt, h / ph, w / pw);
    if patches.shape() != [gt * gh * gw, c * pt * ph * pw] {
        return Err(Error::shape("unpatchify", format!("{:?} for cube {:?}", patches.shape(), shape)));
    }
    let mut out = vec![0.0; c * t * h * w];
    let mut rows = patches.data().chunks(pw);
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                for ci in 0..c {
                    for dt in 0..pt {
                        for dh in 0..ph {
                            let base = ((ci * t + it * pt + dt) * h + ih * ph + dh) * w + iw * pw;
                            out[base..base + pw].copy_from_slice(rows.next().expect("extent checked"));
                        }
                    }
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn sincos_1d(pos: f64, channels: usize, out: &mut [f64]) {
    let half = channels / 2;
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[i] = (pos * omega).sin();
        out[half + i] = (pos * omega).cos();
    }
}

/// Channel split `(t, h, w)` of the 3-D encoding: sixteenths of `d` in the
/// ratio 4:6:6, so every share is even; leftover channels stay zero.
pub fn posenc_split(d: usize) -> Result<[usize; 3]> {
    if d < 16 {
        return Err(Error::Config(format!("positional encoding needs D >= 16, got {d}")));
    }
    let unit = d / 16;
    Ok([4 * unit, 6 * unit, 6 * unit])
}

/// Fixed 3-D sine-cosine encoding of shape `(N+1) × D`; row 0 (class token)
/// is zero and rows `1..` follow the row-major patch grid.
pub fn sincos_posenc_3d(grid: [usize; 3], d: usize) -> Result<Tensor> {
    let [ct, ch, cw] = posenc_split(d)?;
    let n: usize = grid.iter().product();
    let mut out = vec![0.0; (n + 1) * d];
    let mut row = d;
    for t in 0..grid[0] {
        for h in 0..grid[1] {
            for w in 0..grid[2] {
                let r = &mut out[row..row + d];
                sincos_1d(t as f64, ct, &mut r[..ct]);
                sincos_1d(h as f64, ch, &mut r[ct..ct + ch]);
                sincos_1d(w as f64, cw, &mut r[ct + ch..ct + ch + cw]);
                row += d;
            }
        }
    }
    Tensor::new(vec![n + 1, d], out)
}

fn init_block(p: &mut ParamSet, prefix: &str, d: usize, hidden: usize, rng: &mut RngStream) {
    p.insert(format!("{prefix}.norm1.g"), ones(&[d]));
    p.insert(format!("{prefix}.norm1.b"), zeros(&[d]));
    p.insert(format!("{prefix}.attn.qkv.w"), trunc_normal(&[d, 3 * d], INIT_STD, rng));
    p.insert(format!("{prefix}.attn.qkv.b"), zeros(&[3 * d]));
    p.insert(format!("{prefix}.attn.proj.w"), trunc_normal(&[d, d], INIT_STD, rng));
    p.insert(format!("{prefix}.attn.proj.b"), zeros(&[d]));
    p.insert(format!("{prefix}.norm2.g"), ones(&[d]));
    p.insert(format!("{prefix}.norm2.b"), zeros(&[d]));
    p.insert(format!("{prefix}.mlp.fc1.w"), trunc_normal(&[d, hidden], INIT_STD, rng));
    p.insert(format!("{prefix}.mlp.fc1.b"), zeros(&[hidden]));
    p.insert(format!("{prefix}.mlp.fc2.w"), trunc_normal(&[hidden, d], INIT_STD, rng));
    p.insert(format!("{prefix}.mlp.fc2.b"), zeros(&[d]));
}

/// Parameters of a stack of `depth` blocks of width `d` under `prefix`.
pub fn init_blocks(p: &mut ParamSet, prefix: &str, d: usize, depth: usize, mlp_ratio: usize, rng: &mut RngStream) {
    for i in 0..depth {
        init_block(p, &format!("{prefix}.blocks.{i}"), d, d * mlp_ratio, rng);
    }
    p.insert(format!("{prefix}.norm.g"), ones(&[d]));
    p.insert(format!("{prefix}.norm.b"), zeros(&[d]));
}

/// Fresh encoder parameters under `prefix`.
pub fn init_encoder(cfg: &EncoderConfig, prefix: &str, rng: &mut RngStream) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    p.insert(format!("{prefix}.patch_embed.w"), trunc_normal(&[cfg.patch_dim(), cfg.dim], INIT_STD, rng));
    p.insert(format!("{prefix}.patch_embed.b"), zeros(&[cfg.dim]));
    p.insert(format!("{prefix}.cls_token"), trunc_normal(&[cfg.dim], INIT_STD, rng));
    init_blocks(&mut p, prefix, cfg.dim, cfg.depth, cfg.mlp_ratio, rng);
    Ok(p)
}

pub(crate) fn linear(tape: &mut Tape, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{prefix}.w"))?;
    let bias = b.var(&format!("{prefix}.b"))?;
    tape.linear(x, w, bias)
}

pub(crate) fn layer_norm(tape: &mut Tape, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let g = b.var(&format!("{prefix}.g"))?;
    let beta = b.var(&format!("{prefix}.b"))?;
    tape.layer_norm(x, g, beta, LN_EPS)
}

pub struct BlockOutput {
    pub tokens: Var,
    /// Attention weights `[B·heads, S, S]`.
    pub attention: Var,
}

/// Multi-head self-attention over `x: [B, S, D]`.
fn attention(tape: &mut Tape, b: &Binding, prefix: &str, x: Var, heads: usize) -> Result<(Var, Var)> {
    let [bs, s, d] = match *tape.shape(x) {
        [bs, s, d] => [bs, s, d],
        _ => return Err(Error::shape("attention", format!("expected [B,S,D], got {:?}", tape.shape(x)))),
    };
    if d % heads != 0 {
        return Err(Error::Config(format!("embedding dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let qkv = linear(tape, b, &format!("{prefix}.qkv"), x)?;
    let qkv = tape.reshape(qkv, &[bs, s, 3, heads, dh])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = tape.reshape(qkv, &[3, bs * heads * s * dh])?;
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let p = tape.index_select(qkv, &[i])?;
        parts.push(tape.reshape(p, &[bs * heads, s, dh])?);
    }
    let scores = tape.matmul_t(parts[0], parts[1], false, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = tape.softmax(scores)?;
    let ctx = tape.matmul(attn, parts[2])?;
    let ctx = tape.reshape(ctx, &[bs, heads, s, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[bs, s, d])?;
    Ok((linear(tape, b, &format!("{prefix}.proj"), ctx)?, attn))
}

/// Pre-norm block: `x + drop(attn(ln(x)))`, then `y + mlp(ln(y))` with
/// dropout after each of the two MLP layers.
pub fn transformer_block(tape: &mut Tape, b: &Binding, prefix: &str, x: Var, heads: usize, dropout: f64) -> Result<BlockOutput> {
    let h = layer_norm(tape, b, &format!("{prefix}.norm1"), x)?;
    let (a, attention) = attention(tape, b, &format!("{prefix}.attn"), h, heads)?;
    let a = tape.dropout(a, dropout)?;
    let y = tape.add(x, a)?;
    let h = layer_norm(tape, b, &format!("{prefix}.norm2"), y)?;
    let h = linear(tape, b, &format!("{prefix}.mlp.fc1"), h)?;
    let h = tape.gelu(h)?;
    let h = tape.dropout(h, dropout)?;
    let h = linear(tape, b, &format!("{prefix}.mlp.fc2"), h)?;
    let h = tape.dropout(h, dropout)?;
    Ok(BlockOutput {
        tokens: tape.add(y, h)?,
        attention,
    })
}

/// Copies a `[rows, D]` table `batch` times into `[batch, rows, D]`.
pub(crate) fn tile_batch(t: &Tensor, batch: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.numel() * batch);
    for _ in 0..batch {
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(t.shape());
    Tensor::new(shape, data).expect("extent matches")
}

pub struct EncoderOutput {
    /// Normalised final tokens `[B, 1+n, D]`.
    pub tokens: Var,
    /// Block outputs at the tap layers, each `[B, 1+n, D]`.
    pub taps: [Var; 4],
}

/// Encodes patch rows `[B, N, patch_dim]`.
///
/// With `visible = Some(rows)`, sample `i` keeps only patch rows `rows[i]`
/// (all samples must keep the same count) after embedding and positional
/// encoding, so masked content never reaches the blocks.
pub fn encode_patches(
    tape: &mut Tape,
    b: &Binding,
    cfg: &EncoderConfig,
    prefix: &str,
    patches: Var,
    visible: Option<&[Vec<usize>]>,
) -> Result<EncoderOutput> {
    let n = cfg.num_patches();
    let bs = match *tape.shape(patches) {
        [bs, rows, pd] if rows == n && pd == cfg.patch_dim() => bs,
        _ => {
            return Err(Error::shape(
                "encode",
                format!("patches {:?} for {} patches of width {}", tape.shape(patches), n, cfg.patch_dim()),
            ))
        }
    };
    let d = cfg.dim;
    let emb = linear(tape, b, &format!("{prefix}.patch_embed"), patches)?;
    let pos = sincos_posenc_3d(cfg.grid(), d)?;
    let pos = tape.constant(tile_batch(&pos.rows(1, n + 1), bs));
    let mut x = tape.add(emb, pos)?;
    let mut kept = n;
    if let Some(rows) = visible {
        if rows.len() != bs {
            return Err(Error::shape("encode", format!("{} visibility lists for batch {bs}", rows.len())));
        }
        kept = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(bs * kept);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != kept || r.iter().any(|&j| j >= n) {
                return Err(Error::shape("encode", format!("visible rows of sample {i} do not match {kept} of {n}")));
            }
            flat.extend(r.iter().map(|&j| i * n + j));
        }
        let f = tape.reshape(x, &[bs * n, d])?;
        let f = tape.index_select(f, &flat)?;
        x = tape.reshape(f, &[bs, kept, d])?;
    }
    // class token; its positional row is zero
    let cls = b.var(&format!("{prefix}.cls_token"))?;
    let cls = tape.reshape(cls, &[1, d])?;
    let cls = tape.index_select(cls, &vec![0; bs])?;
    let cls = tape.reshape(cls, &[bs, 1, d])?;
    x = tape.concat(&[cls, x], 1)?;
    debug_assert_eq!(tape.shape(x), &[bs, kept + 1, d]);
    let mut outs = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        x = transformer_block(tape, b, &format!("{prefix}.blocks.{i}"), x, cfg.heads, cfg.dropout)?.tokens;
        outs.push(x);
    }
    let tokens = layer_norm(tape, b, &format!("{prefix}.norm"), x)?;
    Ok(EncoderOutput {
        tokens,
        taps: cfg.taps.map(|t| outs[t - 1]),
    })
}

/// Inference-mode features of one cube.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub tokens: Tensor,
    pub taps: [Tensor; 4],
}

/// Encodes a batch of `[C,T,H,W]` cubes with dropout off and no tape
/// recording.
pub fn encode(cubes: &[&Tensor], cfg: &EncoderConfig, params: &ParamSet, prefix: &str) -> Result<Vec<Encoded>> {
    cfg.validate()?;
    if cubes.is_empty() {
        return Ok(Vec::new());
    }
    let batch = patch_batch(cubes, cfg)?;
    let mut tape = Tape::inference();
    let b = Binding::new(&mut tape, params, &[]);
    let x = tape.constant(batch);
    let out = encode_patches(&mut tape, &b, cfg, prefix, x, None)?;
    let split = |v: Var| -> Vec<Tensor> {
        let t = tape.value(v);
        let per = t.numel() / cubes.len();
        t.data()
            .chunks(per)
            .map(|c| Tensor::new(t.shape()[1..].to_vec(), c.to_vec()).expect("extent matches"))
            .collect()
    };
    let tokens = split(out.tokens);
    let taps: Vec<Vec<Tensor>> = out.taps.iter().map(|&v| split(v)).collect();
    Ok(tokens
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| Encoded {
            tokens,
            taps: [0, 1, 2, 3].map(|k| taps[k][i].clone()),
        })
        .collect())
}

/// Stacks the patch matrices of several cubes into `[B, N, patch_dim]`.
pub fn patch_batch(cubes: &[&Tensor], cfg: &EncoderConfig) -> Result<Tensor> {
    let mut data = Vec::new();
    for c in cubes {
        if c.shape() != cfg.cube_shape() {
            return Err(Error::shape("encode", format!("cube {:?} for encoder expecting {:?}", c.shape(), cfg.cube_shape())));
        }
        data.extend_from_slice(patchify(c, cfg.patch)?.data());
    }
    Tensor::new(vec![cubes.len(), cfg.num_patches(), cfg.patch_dim()], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed, "cube");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn patch_counts() {
        let big = Tensor::zeros(&[4, 1, 224, 224]);
        assert_eq!(patchify(&big, [1, 16, 16]).unwrap().shape(), &[196, 1024]);
        let toy = Tensor::zeros(&[4, 1, 64, 64]);
        assert_eq!(patchify(&toy, [1, 8, 8]).unwrap().shape(), &[64, 256]);
        let err = patchify(&Tensor::zeros(&[4, 1, 223, 224]), [1, 16, 16]).unwrap_err().to_string();
        assert!(err.contains("axis H"), "{err}");
    }

    #[test]
    fn patch_row_layout() {
        // C=2, 4×4 image, 2×2 patches: patch 1 is the top-right block
        let data: Vec<f64> = (0..32).map(f64::from).collect();
        let c = Tensor::new(vec![2, 1, 4, 4], data).unwrap();
        let p = patchify(&c, [1, 2, 2]).unwrap();
        assert_eq!(&p.data()[8..16], &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
    }

    #[test]
    fn posenc_examples() {
        let pe = sincos_posenc_3d([1, 14, 14], 256).unwrap();
        assert_eq!(pe.shape(), &[197, 256]);
        assert!(pe.data()[..256].iter().all(|&v| v == 0.0));
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // grid position (0,0,0): every sin channel is 0 and every cos channel 1
        let [ct, ch, cw] = posenc_split(256).unwrap();
        let row = &pe.data()[256..512];
        for (start, len) in [(0, ct), (ct, ch), (ct + ch, cw)] {
            assert!(row[start..start + len / 2].iter().all(|&v| v == 0.0));
            assert!(row[start + len / 2..start + len].iter().all(|&v| v == 1.0));
        }
        // (0,0,1) vs (0,1,0)
        assert_ne!(pe.rows(2, 3).data(), pe.rows(15, 16).data());
        assert!(sincos_posenc_3d([1, 2, 2], 8).is_err());
    }

    #[test]
    fn posenc_rows_are_distinct() {
        let pe = sincos_posenc_3d([2, 4, 4], 32).unwrap();
        for i in 1..33 {
            for j in i + 1..33 {
                assert_ne!(pe.rows(i, i + 1).data(), pe.rows(j, j + 1).data(), "rows {i},{j}");
            }
        }
    }

    #[test]
    fn taps_default_and_validation() {
        assert_eq!(default_taps(4), [1, 2, 3, 4]);
        assert_eq!(default_taps(24), [6, 12, 18, 24]);
        let mut cfg = EncoderConfig::toy_student();
        cfg.taps = [1, 1, 2, 2];
        assert!(cfg.validate().is_ok());
        cfg.taps = [2, 1, 3, 4];
        assert!(cfg.validate().is_err());
        cfg.taps = [1, 2, 3, 5];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_weights_leave_positional_encoding() {
        let cfg = EncoderConfig::toy_student();
        let mut p = init_encoder(&cfg, "enc", &mut RngStream::new(0, "init")).unwrap();
        p.insert("enc.patch_embed.w", Tensor::zeros(&[cfg.patch_dim(), cfg.dim]));
        p.insert("enc.cls_token", Tensor::zeros(&[cfg.dim]));
        let mut tape = Tape::inference();
        let b = Binding::new(&mut tape, &p, &[]);
        let x = tape.constant(patch_batch(&[&cube(cfg.cube_shape(), 1)], &cfg).unwrap());
        let emb = linear(&mut tape, &b, "enc.patch_embed", x).unwrap();
        let pe = sincos_posenc_3d(cfg.grid(), cfg.dim).unwrap();
        let pos = tape.constant(tile_batch(&pe.rows(1, 65), 1));
        let sum = tape.add(emb, pos).unwrap();
        assert_eq!(tape.value(sum).data(), pe.rows(1, 65).data());
    }

    #[test]
    fn zero_output_weights_make_block_identity() {
        let d = 16;
        let mut p = ParamSet::new();
        init_blocks(&mut p, "t", d, 1, 4, &mut RngStream::new(0, "init"));
        p.insert("t.blocks.0.attn.proj.w", Tensor::zeros(&[d, d]));
        p.insert("t.blocks.0.mlp.fc2.w", Tensor::zeros(&[4 * d, d]));
        let x = cube([2, 5, d, 1], 3).reshape(&[2, 5, d]).unwrap();
        let mut tape = Tape::inference();
        let b = Binding::new(&mut tape, &p, &[]);
        let xv = tape.constant(x.clone());
        let out = transformer_block(&mut tape, &b, "t.blocks.0", xv, 4, 0.0).unwrap();
        assert_eq!(tape.value(out.tokens).data(), x.data());
        for row in tape.value(out.attention).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_shapes_taps_and_determinism() {
        let mut cfg = EncoderConfig::toy_student();
        cfg.depth = 2;
        cfg.taps = [1, 1, 2, 2];
        let p = init_encoder(&cfg, "enc", &mut RngStream::new(0, "init")).unwrap();
        let c = cube(cfg.cube_shape(), 5);
        let a = encode(&[&c], &cfg, &p, "enc").unwrap();
        let b = encode(&[&c], &cfg, &p, "enc").unwrap();
        assert_eq!(a[0].tokens.shape(), &[65, 16]);
        assert_eq!(a[0].taps[0].data(), a[0].taps[1].data());
        assert_eq!(a[0].taps[2].data(), a[0].taps[3].data());
        assert_eq!(a[0].tokens.data(), b[0].tokens.data());
    }

    #[test]
    fn batched_encode_matches_single() {
        let cfg = EncoderConfig::toy_student();
        let p = init_encoder(&cfg, "enc", &mut RngStream::new(0, "init")).unwrap();
        let c1 = cube(cfg.cube_shape(), 1);
        let c2 = cube(cfg.cube_shape(), 2);
        let both = encode(&[&c1, &c2], &cfg, &p, "enc").unwrap();
        let single = encode(&[&c2], &cfg, &p, "enc").unwrap();
        assert!(both[1].tokens.max_abs_diff(&single[0].tokens) < 1e-12);
    }

    proptest! {
        #[test]
        fn patchify_round_trip(c in 1usize..4, gh in 1usize..4, gw in 1usize..4, ph in 1usize..4, pw in 1usize..4, seed in 0u64..100) {
            let shape = [c, 2, gh * ph, gw * pw];
            let x = cube(shape, seed);
            let p = patchify(&x, [1, ph, pw]).unwrap();
            prop_assert_eq!(p.shape()[0], gh * gw * 2);
            let back = unpatchify(&p, shape, [1, ph, pw]).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }
    }
}
