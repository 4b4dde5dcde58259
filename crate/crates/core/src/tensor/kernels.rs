//! Raw buffer kernels shared by the forward and backward passes.

/// Strided view of a row-major matrix operand for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Strides {
    pub rs: isize,
    pub cs: isize,
}

impl Strides {
    /// Operand stored as `rows x cols`, optionally used transposed.
    pub fn stored(cols: usize, transposed: bool) -> Self {
        if transposed {
            Self { rs: 1, cs: cols as isize }
        } else {
            Self { rs: cols as isize, cs: 1 }
        }
    }

    pub fn t(self) -> Self {
        Self { rs: self.cs, cs: self.rs }
    }
}

/// `c = a·b (+ c when accumulate)` with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    c: &mut [f64],
    sc: Strides,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[(i as isize * sc.rs + j as isize * sc.cs) as usize] = 0.0;
                }
            }
        }
        return;
    }
    debug_assert!(a.len() >= max_index(m, k, sa));
    debug_assert!(b.len() >= max_index(k, n, sb));
    debug_assert!(c.len() >= max_index(m, n, sc));
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the debug assertions above describe the contract; every caller
    // derives strides from buffers whose extents were shape-checked.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.rs,
            sa.cs,
            b.as_ptr(),
            sb.rs,
            sb.cs,
            beta,
            c.as_mut_ptr(),
            sc.rs,
            sc.cs,
        );
    }
}

fn max_index(r: usize, c: usize, s: Strides) -> usize {
    ((r - 1) as isize * s.rs + (c - 1) as isize * s.cs) as usize + 1
}

/// Geometry of a 2-D sliding window over one `channels x h x w` image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `img` into a `(C·kh·kw) x (oh·ow)` column matrix.
pub(crate) fn im2col(img: &[f64], g: Window, cols: &mut Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    cols.clear();
    if g.is_pointwise() {
        cols.extend_from_slice(&img[..g.channels * g.h * g.w]);
        return;
    }
    cols.resize(g.col_rows() * oh * ow, 0.0);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[oy * ow + ox] = src_row[x as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into `img` (accumulating).
pub(crate) fn col2im(cols: &[f64], g: Window, img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    if g.is_pointwise() {
        for (d, s) in img.iter_mut().zip(cols) {
            *d += s;
        }
        return;
    }
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = y as usize * g.w;
                    for ox in 0..ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            plane[base + x as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Input index range `[start, end)` feeding adaptive-pool output cell `i`.
pub(crate) fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Source coordinate taps for half-pixel bilinear resampling of one axis:
/// `(low index, high index, weight of high)` per output position.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, Strides::stored(2, false), &b, Strides::stored(2, false), &mut c, Strides::stored(2, false), false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, Strides::stored(2, true), &b, Strides::stored(2, false), &mut c, Strides::stored(2, false), false);
        // aᵀ·b = [[1,3],[2,4]]·b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Window { channels: 2, h: 5, w: 4, kh: 3, kw: 2, stride: 2, pad: 1 };
        let img: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut cols = Vec::new();
        im2col(&img, g, &mut cols);
        let probe: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&probe).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im(&probe, g, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn adaptive_bins_cover_input() {
        assert_eq!(adaptive_bin(0, 8, 3), (0, 3));
        assert_eq!(adaptive_bin(1, 8, 3), (2, 6));
        assert_eq!(adaptive_bin(2, 8, 3), (5, 8));
        assert_eq!(adaptive_bin(5, 8, 6), (6, 8));
    }
}
