//! Desk-scale convolutional detector with hand-written backpropagation.
//!
//! Architecture: `k` blocks of 3×3 convolution (stride 2, padding 1) + ReLU,
//! global average pooling, one linear logit. Inputs are centred (`x − 0.5`).
//! All parameters live in one flat vector; [`Layout`] maps it to tensors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageArray, CHANNELS};

const K: usize = 3;
const TAPS: usize = K * K;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    pub input_size: usize,
    pub channels: Vec<usize>,
}

impl Default for CnnArch {
    fn default() -> Self {
        Self {
            input_size: 224,
            channels: vec![16, 32, 64, 64],
        }
    }
}

fn conv_out(n: usize) -> usize {
    (n - 1) / 2 + 1
}

#[derive(Debug, Clone, Copy)]
struct ConvShape {
    in_c: usize,
    out_c: usize,
    in_hw: usize,
    out_hw: usize,
    weight: usize,
    bias: usize,
}

impl ConvShape {
    fn cols_rows(&self) -> usize {
        self.in_c * TAPS
    }

    fn out_pixels(&self) -> usize {
        self.out_hw * self.out_hw
    }
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<ConvShape>,
    head_w: usize,
    head_b: usize,
    total: usize,
}

impl Layout {
    fn new(arch: &CnnArch) -> Self {
        let mut convs = Vec::with_capacity(arch.channels.len());
        let (mut in_c, mut hw, mut offset) = (CHANNELS, arch.input_size, 0);
        for &out_c in &arch.channels {
            let weight = offset;
            let bias = weight + out_c * in_c * TAPS;
            offset = bias + out_c;
            convs.push(ConvShape {
                in_c,
                out_c,
                in_hw: hw,
                out_hw: conv_out(hw),
                weight,
                bias,
            });
            in_c = out_c;
            hw = conv_out(hw);
        }
        Self {
            convs,
            head_w: offset,
            head_b: offset + in_c,
            total: offset + in_c + 1,
        }
    }

    fn features(&self) -> usize {
        self.head_b - self.head_w
    }
}

/// `c = alpha·op(a)·op(b) + beta·c`, row-major, `op(a)` is m×k, `op(b)` k×n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the row-major buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], s: &ConvShape, cols: &mut [f64]) {
    let (ih, oh) = (s.in_hw, s.out_hw);
    let np = s.out_pixels();
    for ci in 0..s.in_c {
        let plane = &input[ci * ih * ih..][..ih * ih];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((ci * K + ky) * K + kx) * np..][..np];
                for oy in 0..oh {
                    let iy = (2 * oy + ky) as isize - 1;
                    let dst = &mut row[oy * oh..][..oh];
                    if iy < 0 || iy >= ih as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * ih..][..ih];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (2 * ox + kx) as isize - 1;
                        *d = if ix < 0 || ix >= ih as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], s: &ConvShape, out: &mut [f64]) {
    let (ih, oh) = (s.in_hw, s.out_hw);
    let np = s.out_pixels();
    out.fill(0.0);
    for ci in 0..s.in_c {
        let plane = &mut out[ci * ih * ih..][..ih * ih];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((ci * K + ky) * K + kx) * np..][..np];
                for oy in 0..oh {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * ih..][..ih];
                    for (ox, g) in row[oy * oh..][..oh].iter().enumerate() {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix >= 0 && ix < ih as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Activations kept from a forward pass for the backward pass.
struct Tape {
    cols: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
    features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    arch: CnnArch,
    layout_total: usize,
    params: Vec<f64>,
}

impl Cnn {
    pub fn new(arch: CnnArch, seed: u64) -> Result<Self> {
        if arch.channels.is_empty() || arch.input_size < 8 {
            return Err(Error::InvalidConfig(format!("unusable CNN architecture {arch:?}")));
        }
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &layout.convs {
            let std = (2.0 / (s.in_c * TAPS) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[s.weight..s.bias] {
                *p = normal.sample(&mut rng);
            }
        }
        let head_std = (1.0 / layout.features() as f64).sqrt();
        let normal = Normal::new(0.0, head_std).expect("positive std");
        for p in &mut params[layout.head_w..layout.head_b] {
            *p = normal.sample(&mut rng);
        }
        Ok(Self {
            layout_total: layout.total,
            arch,
            params,
        })
    }

    pub fn from_params(arch: CnnArch, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return Err(Error::InvalidConfig(format!(
                "{} parameters for an architecture needing {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            layout_total: layout.total,
            arch,
            params,
        })
    }

    pub fn arch(&self) -> &CnnArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.layout_total
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.arch)
    }

    /// Zeroes the linear head so every logit is exactly 0.
    pub fn zero_head(&mut self) {
        let l = self.layout();
        self.params[l.head_w..].fill(0.0);
    }

    fn check_input(&self, x: &ImageArray) -> Result<()> {
        let n = self.arch.input_size;
        if x.shape() != (CHANNELS, n, n) {
            return Err(Error::ShapeMismatch {
                expected: (CHANNELS, n, n),
                actual: x.shape(),
            });
        }
        Ok(())
    }

    fn forward(&self, x: &ImageArray, keep: bool) -> Result<(f64, Option<Tape>)> {
        self.check_input(x)?;
        let layout = self.layout();
        let mut act: Vec<f64> = x.data().iter().map(|v| v - 0.5).collect();
        let mut tape = Tape {
            cols: Vec::new(),
            acts: Vec::new(),
            features: Vec::new(),
        };
        for s in &layout.convs {
            let np = s.out_pixels();
            let mut cols = vec![0.0; s.cols_rows() * np];
            im2col(&act, s, &mut cols);
            let mut out = vec![0.0; s.out_c * np];
            for (o, row) in out.chunks_exact_mut(np).enumerate() {
                row.fill(self.params[s.bias + o]);
            }
            let w = &self.params[s.weight..s.bias];
            gemm(s.out_c, s.cols_rows(), np, w, false, &cols, false, &mut out, 1.0);
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            if keep {
                tape.cols.push(cols);
                tape.acts.push(out.clone());
            }
            act = out;
        }
        let last = layout.convs.last().expect("non-empty");
        let np = last.out_pixels() as f64;
        let features: Vec<f64> = act.chunks_exact(last.out_pixels()).map(|c| c.iter().sum::<f64>() / np).collect();
        let head = &self.params[layout.head_w..layout.head_b];
        let logit = features.iter().zip(head).map(|(f, w)| f * w).sum::<f64>() + self.params[layout.head_b];
        tape.features = features;
        Ok((logit, keep.then_some(tape)))
    }

    pub fn logit(&self, x: &ImageArray) -> Result<f64> {
        Ok(self.forward(x, false)?.0)
    }

    /// Backpropagates `dloss/dlogit = upstream` through the network. Fills
    /// `param_grad` (accumulating) when given; returns the input gradient
    /// when `want_input` is set.
    fn backward(
        &self,
        tape: &Tape,
        upstream: f64,
        mut param_grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let layout = self.layout();
        let head = &self.params[layout.head_w..layout.head_b];
        if let Some(g) = param_grad.as_deref_mut() {
            for (gw, f) in g[layout.head_w..layout.head_b].iter_mut().zip(&tape.features) {
                *gw += upstream * f;
            }
            g[layout.head_b] += upstream;
        }

        let last = layout.convs.last().expect("non-empty");
        let np = last.out_pixels();
        let mut grad: Vec<f64> = head
            .iter()
            .flat_map(|w| std::iter::repeat_n(upstream * w / np as f64, np))
            .collect();

        for (li, s) in layout.convs.iter().enumerate().rev() {
            let np = s.out_pixels();
            for (g, a) in grad.iter_mut().zip(&tape.acts[li]) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            if let Some(pg) = param_grad.as_deref_mut() {
                gemm(
                    s.out_c,
                    np,
                    s.cols_rows(),
                    &grad,
                    false,
                    &tape.cols[li],
                    true,
                    &mut pg[s.weight..s.bias],
                    1.0,
                );
                for (o, row) in grad.chunks_exact(np).enumerate() {
                    pg[s.bias + o] += row.iter().sum::<f64>();
                }
            }
            if li == 0 && !want_input {
                return None;
            }
            let w = &self.params[s.weight..s.bias];
            let mut dcols = vec![0.0; s.cols_rows() * np];
            gemm(s.cols_rows(), s.out_c, np, w, true, &grad, false, &mut dcols, 0.0);
            let mut prev = vec![0.0; s.in_c * s.in_hw * s.in_hw];
            col2im(&dcols, s, &mut prev);
            grad = prev;
        }
        Some(grad)
    }

    /// Logit and its gradient with respect to the input pixels.
    pub fn logit_and_input_grad(&self, x: &ImageArray) -> Result<(f64, ImageArray)> {
        let (logit, tape) = self.forward(x, true)?;
        let g = self
            .backward(&tape.expect("kept"), 1.0, None, true)
            .expect("input gradient requested");
        Ok((logit, ImageArray::from_vec(x.height(), x.width(), g)?))
    }

    /// Logit, plus `upstream · dlogit/dθ` accumulated into `param_grad`.
    pub fn accumulate_param_grad(
        &self,
        x: &ImageArray,
        upstream: impl FnOnce(f64) -> f64,
        param_grad: &mut [f64],
    ) -> Result<f64> {
        let (logit, tape) = self.forward(x, true)?;
        self.backward(&tape.expect("kept"), upstream(logit), Some(param_grad), false);
        Ok(logit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Cnn {
        Cnn::new(
            CnnArch {
                input_size: 16,
                channels: vec![4, 6],
            },
            3,
        )
        .unwrap()
    }

    fn probe_image(seed: u64) -> ImageArray {
        let data = (0..3 * 16 * 16)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64) / 1000.0)
            .collect();
        ImageArray::from_vec(16, 16, data).unwrap()
    }

    #[test]
    fn layout_counts_parameters() {
        let l = Layout::new(&CnnArch::default());
        let expected = (16 * 27 + 16) + (32 * 144 + 32) + (64 * 288 + 64) + (64 * 576 + 64) + 65;
        assert_eq!(l.total, expected);
        assert_eq!(l.convs.last().unwrap().out_hw, 14);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = tiny();
        let x = probe_image(1);
        let (_, g) = net.logit_and_input_grad(&x).unwrap();
        let h = 1e-6;
        for i in (0..x.len()).step_by(37) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (net.logit(&xp).unwrap() - net.logit(&xm).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "i={i} fd={fd} an={}", g.data()[i]);
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let net = tiny();
        let x = probe_image(2);
        let mut grad = vec![0.0; net.n_params()];
        net.accumulate_param_grad(&x, |_| 1.0, &mut grad).unwrap();
        let h = 1e-6;
        for i in (0..net.n_params()).step_by(23) {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut()[i] -= h;
            let fd = (p.logit(&x).unwrap() - m.logit(&x).unwrap()) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: fd={fd} an={}", grad[i]);
        }
    }

    #[test]
    fn zero_head_gives_zero_logit_and_gradient() {
        let mut net = tiny();
        net.zero_head();
        let (z, g) = net.logit_and_input_grad(&probe_image(4)).unwrap();
        assert_eq!(z, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        assert!(matches!(
            tiny().logit(&ImageArray::zeros(8, 8)),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
