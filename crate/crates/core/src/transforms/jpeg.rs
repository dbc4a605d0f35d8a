//! Differentiable JPEG approximation.
//!
//! Forward: RGB → full-range BT.601 YCbCr → 8×8 orthonormal DCT-II per
//! channel → quantize (round) → dequantize → inverse DCT → RGB → clamp.
//! No chroma subsampling. Rounding uses a straight-through estimator: the
//! forward pass rounds exactly, the backward pass treats it as identity.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::image::{ImageArray, CHANNELS};

pub const BLOCK: usize = 8;

/// Reference luminance quantization table (row-major, natural order).
pub const BASE_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Reference chrominance quantization table.
pub const BASE_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Full-range BT.601 RGB → YCbCr (both on the 0..255 scale, chroma centred).
const RGB_TO_YCC: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    /// Exact rounding forward, identity backward.
    StraightThrough,
    /// No rounding at all; the whole pipeline is smooth.
    Disabled,
}

/// Quality → percentage scale: `5000/q` below 50, else `200 − 2q`.
pub fn quality_scale(quality: u32) -> Result<u32> {
    if !(1..=100).contains(&quality) {
        return Err(Error::BadQuality(quality));
    }
    Ok(if quality < 50 {
        5000 / quality
    } else {
        200 - 2 * quality
    })
}

pub fn scaled_table(base: &[u16; 64], quality: u32) -> Result<[f64; 64]> {
    let s = quality_scale(quality)?;
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((u32::from(b) * s + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(out)
}

/// Orthonormal DCT-II basis: `C[u][x] = α(u)·cos((2x+1)uπ/16)`.
pub fn dct_matrix() -> &'static [[f64; BLOCK]; BLOCK] {
    static M: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    M.get_or_init(|| {
        let mut m = [[0.0; BLOCK]; BLOCK];
        for (u, row) in m.iter_mut().enumerate() {
            let alpha = if u == 0 {
                (1.0 / BLOCK as f64).sqrt()
            } else {
                (2.0 / BLOCK as f64).sqrt()
            };
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha
                    * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / (2 * BLOCK) as f64)
                        .cos();
            }
        }
        m
    })
}

fn ycc_to_rgb() -> &'static [[f64; 3]; 3] {
    static M: OnceLock<[[f64; 3]; 3]> = OnceLock::new();
    M.get_or_init(|| invert3(&RGB_TO_YCC))
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

/// `out = C · block · Cᵀ`.
pub fn dct2(block: &[f64; 64]) -> [f64; 64] {
    separable(block, false)
}

/// `out = Cᵀ · coef · C`.
pub fn idct2(coef: &[f64; 64]) -> [f64; 64] {
    separable(coef, true)
}

fn separable(input: &[f64; 64], inverse: bool) -> [f64; 64] {
    let c = dct_matrix();
    let k = |a: usize, b: usize| if inverse { c[b][a] } else { c[a][b] };
    let mut tmp = [0.0; 64];
    for u in 0..BLOCK {
        for x in 0..BLOCK {
            tmp[u * BLOCK + x] = (0..BLOCK).map(|y| k(u, y) * input[y * BLOCK + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            out[u * BLOCK + v] = (0..BLOCK).map(|x| tmp[u * BLOCK + x] * k(v, x)).sum();
        }
    }
    out
}

/// Row/column index map for reflect padding up to the next multiple of 8.
fn reflect_map(n: usize) -> Vec<usize> {
    let padded = n.div_ceil(BLOCK) * BLOCK;
    (0..padded)
        .map(|i| {
            if i < n {
                i
            } else {
                (2 * n).saturating_sub(2 + i).min(n - 1)
            }
        })
        .collect()
}

struct Padded {
    h: usize,
    w: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl Padded {
    fn new(h: usize, w: usize) -> Self {
        let rows = reflect_map(h);
        let cols = reflect_map(w);
        Self {
            h: rows.len(),
            w: cols.len(),
            rows,
            cols,
        }
    }
}

/// Color-converts a padded RGB image into three centred YCbCr planes.
fn to_ycc(x: &ImageArray, pad: &Padded) -> [Vec<f64>; 3] {
    let n = pad.h * pad.w;
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (py, &sy) in pad.rows.iter().enumerate() {
        for (px, &sx) in pad.cols.iter().enumerate() {
            let rgb = [
                255.0 * x.get(0, sy, sx),
                255.0 * x.get(1, sy, sx),
                255.0 * x.get(2, sy, sx),
            ];
            for (ch, plane) in planes.iter_mut().enumerate() {
                let m = RGB_TO_YCC[ch];
                let v = m[0] * rgb[0] + m[1] * rgb[1] + m[2] * rgb[2];
                plane[py * pad.w + px] = if ch == 0 { v - 128.0 } else { v };
            }
        }
    }
    planes
}

fn for_each_block(h: usize, w: usize, plane: &mut [f64], mut f: impl FnMut(&mut [f64; 64])) {
    let mut block = [0.0; 64];
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            for r in 0..BLOCK {
                block[r * BLOCK..][..BLOCK].copy_from_slice(&plane[(by + r) * w + bx..][..BLOCK]);
            }
            f(&mut block);
            for r in 0..BLOCK {
                plane[(by + r) * w + bx..][..BLOCK].copy_from_slice(&block[r * BLOCK..][..BLOCK]);
            }
        }
    }
}

/// Forward pass before the final clamp; also returns nothing else since the
/// backward pass only needs the pre-clamp values.
fn forward_unclamped(x: &ImageArray, quality: u32, rounding: Rounding) -> Result<ImageArray> {
    let luma = scaled_table(&BASE_LUMA, quality)?;
    let chroma = scaled_table(&BASE_CHROMA, quality)?;
    let pad = Padded::new(x.height(), x.width());
    let mut planes = to_ycc(x, &pad);

    for (ch, plane) in planes.iter_mut().enumerate() {
        let table = if ch == 0 { &luma } else { &chroma };
        for_each_block(pad.h, pad.w, plane, |block| {
            let mut coef = dct2(block);
            if rounding == Rounding::StraightThrough {
                for (c, q) in coef.iter_mut().zip(table) {
                    *c = (*c / q).round() * q;
                }
            }
            *block = idct2(&coef);
        });
    }

    let inv = ycc_to_rgb();
    let mut out = ImageArray::zeros(x.height(), x.width());
    for y in 0..x.height() {
        for xx in 0..x.width() {
            let i = y * pad.w + xx;
            let ycc = [planes[0][i] + 128.0, planes[1][i], planes[2][i]];
            for c in 0..CHANNELS {
                let v = inv[c][0] * ycc[0] + inv[c][1] * ycc[1] + inv[c][2] * ycc[2];
                let idx = out.index(c, y, xx);
                out.data_mut()[idx] = v / 255.0;
            }
        }
    }
    Ok(out)
}

pub fn jpeg_forward(x: &ImageArray, quality: u32, rounding: Rounding) -> Result<ImageArray> {
    Ok(forward_unclamped(x, quality, rounding)?.clamp_unit())
}

/// Vector-Jacobian product of [`jpeg_forward`] at `x`.
pub fn jpeg_backward(
    x: &ImageArray,
    grad_out: &ImageArray,
    quality: u32,
    rounding: Rounding,
) -> Result<ImageArray> {
    x.check_shape(grad_out)?;
    let pre = forward_unclamped(x, quality, rounding)?;
    let pad = Padded::new(x.height(), x.width());
    let inv = ycc_to_rgb();
    let n = pad.h * pad.w;

    // Through clamp, crop, /255 and the inverse colour transform (transposed).
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for y in 0..x.height() {
        for xx in 0..x.width() {
            let mut g = [0.0; 3];
            for (c, gc) in g.iter_mut().enumerate() {
                let i = pre.index(c, y, xx);
                let v = pre.data()[i];
                if (0.0..=1.0).contains(&v) {
                    *gc = grad_out.data()[i] / 255.0;
                }
            }
            for (ch, plane) in planes.iter_mut().enumerate() {
                plane[y * pad.w + xx] = inv[0][ch] * g[0] + inv[1][ch] * g[1] + inv[2][ch] * g[2];
            }
        }
    }

    // Adjoint of idct is dct; straight-through quantization contributes the
    // identity (divide then multiply by the same table entry).
    for plane in planes.iter_mut() {
        for_each_block(pad.h, pad.w, plane, |block| {
            let coef = dct2(block);
            *block = idct2(&coef);
        });
    }

    // Through the forward colour transform and ×255, folding reflected pixels.
    let mut grad_in = ImageArray::zeros(x.height(), x.width());
    for (py, &sy) in pad.rows.iter().enumerate() {
        for (px, &sx) in pad.cols.iter().enumerate() {
            let i = py * pad.w + px;
            let g = [planes[0][i], planes[1][i], planes[2][i]];
            for c in 0..CHANNELS {
                let v = RGB_TO_YCC[0][c] * g[0] + RGB_TO_YCC[1][c] * g[1] + RGB_TO_YCC[2][c] * g[2];
                let idx = grad_in.index(c, sy, sx);
                grad_in.data_mut()[idx] += 255.0 * v;
            }
        }
    }
    Ok(grad_in)
}
