//! Dense 3-channel images and the bilinear resampler shared by ingestion and
//! the resize transforms.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// A 3×H×W image stored channel-major (CHW) with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageArray {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::ShapeMismatch {
                expected: (CHANNELS, height, width),
                actual: (data.len() / (height * width).max(1), height, width),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (CHANNELS, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn check_shape(&self, other: &ImageArray) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp_unit(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ImageArray) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Interprets an 8-bit RGB buffer as `pixel / 255`.
    pub fn from_rgb8(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::zeros(h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                let i = out.index(c, y as usize, x as usize);
                out.data[i] = f64::from(px.0[c]) / 255.0;
            }
        }
        out
    }

    /// Quantizes to 8 bits with round-half-away-from-zero after clamping.
    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let value = self.get(c, y as usize, x as usize).clamp(0.0, 1.0);
                *v = (value * 255.0).round() as u8;
            }
            Rgb(px)
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::Io(io),
                other => Error::Decode {
                    path: path.to_path_buf(),
                    reason: other.to_string(),
                },
            })
    }

    /// Decodes any supported file as 8-bit RGB without resizing.
    pub fn load_rgb8(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingImage(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

/// One output sample of a 1-D linear interpolation: `out = w0·in[i0] + w1·in[i1]`.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Half-pixel-centred bilinear interpolation along one axis, edges clamped.
#[derive(Debug, Clone)]
struct Axis {
    input: usize,
    taps: Vec<Tap>,
}

impl Axis {
    fn new(input: usize, output: usize) -> Self {
        let ratio = input as f64 / output as f64;
        let taps = (0..output)
            .map(|o| {
                if input == output {
                    return Tap {
                        i0: o,
                        i1: o,
                        w0: 1.0,
                        w1: 0.0,
                    };
                }
                let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let frac = src - i0 as f64;
                Tap {
                    i0,
                    i1,
                    w0: 1.0 - frac,
                    w1: frac,
                }
            })
            .collect();
        Self { input, taps }
    }

    fn output(&self) -> usize {
        self.taps.len()
    }
}

/// Separable bilinear resampler between two fixed sizes. Linear in its
/// input, so the backward pass is the transposed operator.
#[derive(Debug, Clone)]
pub struct Bilinear {
    rows: Axis,
    cols: Axis,
}

impl Bilinear {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            rows: Axis::new(in_h, out_h),
            cols: Axis::new(in_w, out_w),
        }
    }

    pub fn forward(&self, x: &ImageArray) -> ImageArray {
        let (ih, iw) = (self.rows.input, self.cols.input);
        let (oh, ow) = (self.rows.output(), self.cols.output());
        debug_assert_eq!((x.height, x.width), (ih, iw));
        let mut out = ImageArray::zeros(oh, ow);
        let mut tmp = vec![0.0; oh * iw];
        for c in 0..CHANNELS {
            let src = x.plane(c);
            for (oy, t) in self.rows.taps.iter().enumerate() {
                let (r0, r1) = (&src[t.i0 * iw..][..iw], &src[t.i1 * iw..][..iw]);
                let row = &mut tmp[oy * iw..][..iw];
                for ((dst, a), b) in row.iter_mut().zip(r0).zip(r1) {
                    *dst = t.w0 * a + t.w1 * b;
                }
            }
            let base = c * oh * ow;
            for oy in 0..oh {
                let row = &tmp[oy * iw..][..iw];
                let dst = &mut out.data[base + oy * ow..][..ow];
                for (d, t) in dst.iter_mut().zip(&self.cols.taps) {
                    *d = t.w0 * row[t.i0] + t.w1 * row[t.i1];
                }
            }
        }
        out
    }

    /// Vector-Jacobian product: maps a gradient on the output back to the input.
    pub fn backward(&self, grad_out: &ImageArray) -> ImageArray {
        let (ih, iw) = (self.rows.input, self.cols.input);
        let (oh, ow) = (self.rows.output(), self.cols.output());
        debug_assert_eq!((grad_out.height, grad_out.width), (oh, ow));
        let mut grad_in = ImageArray::zeros(ih, iw);
        let mut tmp = vec![0.0; oh * iw];
        for c in 0..CHANNELS {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            let g = grad_out.plane(c);
            for oy in 0..oh {
                let src = &g[oy * ow..][..ow];
                let row = &mut tmp[oy * iw..][..iw];
                for (gv, t) in src.iter().zip(&self.cols.taps) {
                    row[t.i0] += t.w0 * gv;
                    row[t.i1] += t.w1 * gv;
                }
            }
            let base = c * ih * iw;
            for (oy, t) in self.rows.taps.iter().enumerate() {
                let row = &tmp[oy * iw..][..iw];
                for (x, gv) in row.iter().enumerate() {
                    grad_in.data[base + t.i0 * iw + x] += t.w0 * gv;
                    grad_in.data[base + t.i1 * iw + x] += t.w1 * gv;
                }
            }
        }
        grad_in
    }
}

/// Bilinear resize of a whole image (no clamping; bilinear weights are convex).
pub fn resize_bilinear(x: &ImageArray, out_h: usize, out_w: usize) -> ImageArray {
    if x.height == out_h && x.width == out_w {
        return x.clone();
    }
    Bilinear::new(x.height, x.width, out_h, out_w).forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_is_adjoint_of_forward() {
        let op = Bilinear::new(9, 7, 4, 12);
        let x = ImageArray::from_vec(9, 7, (0..189).map(|i| ((i * 37) % 11) as f64 / 11.0).collect())
            .unwrap();
        let g = ImageArray::from_vec(4, 12, (0..144).map(|i| ((i * 13) % 7) as f64 - 3.0).collect())
            .unwrap();
        let lhs: f64 = op.forward(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&op.backward(&g).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn same_size_resize_is_identity() {
        let x = ImageArray::from_vec(2, 2, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        assert_eq!(Bilinear::new(2, 2, 2, 2).forward(&x), x);
    }

    #[test]
    fn rgb8_round_trip_is_exact_on_quantized_values() {
        let x = ImageArray::from_vec(2, 3, (0..18).map(|i| (i * 14) as f64 / 255.0).collect()).unwrap();
        assert_eq!(ImageArray::from_rgb8(&x.to_rgb8()), x);
    }
}
