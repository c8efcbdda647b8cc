//! Dense kernels for the siamese network.
//!
//! Activations are stored channel-major as `[C, B, H, W]` so that a
//! convolution is a single GEMM over all samples of a batch:
//! `Y[cout, B*Ho*Wo] = W[cout, cin*k*k] * cols[cin*k*k, B*Ho*Wo]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the strides above describe matrices that lie entirely within the
    // slices, whose lengths are checked against m, k and n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fully connected weights `[out, in]` plus bias; convolutions reuse it with
/// `in = cin * k * k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    /// He-normal initialisation, zero bias.
    pub fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).expect("finite std");
        Self {
            out_dim,
            in_dim,
            weight: (0..out_dim * in_dim).map(|_| normal.sample(rng) as f32).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            out_dim: self.out_dim,
            in_dim: self.in_dim,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    /// `Y[out, n] = W X[in, n] + b`
    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        let mut y = vec![0.0; self.out_dim * n];
        for (row, &b) in y.chunks_exact_mut(n).zip(&self.bias) {
            row.fill(b);
        }
        gemm(self.out_dim, self.in_dim, n, &self.weight, false, x, false, 1.0, &mut y);
        y
    }

    /// Accumulate parameter gradients into `grad`; return `dX`.
    pub fn backward(&self, x: &[f32], dy: &[f32], n: usize, grad: &mut Dense, need_dx: bool) -> Option<Vec<f32>> {
        gemm(self.out_dim, n, self.in_dim, dy, false, x, true, 1.0, &mut grad.weight);
        for (gb, row) in grad.bias.iter_mut().zip(dy.chunks_exact(n)) {
            *gb += row.iter().sum::<f32>();
        }
        need_dx.then(|| {
            let mut dx = vec![0.0; self.in_dim * n];
            gemm(self.in_dim, self.out_dim, n, &self.weight, true, dy, false, 0.0, &mut dx);
            dx
        })
    }
}

/// Shape bookkeeping for one convolution (+ optional 2x2 max-pool).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub pool: bool,
}

impl ConvShape {
    pub fn out_hw(&self) -> (usize, usize) {
        if self.pool {
            (self.ho / 2, self.wo / 2)
        } else {
            (self.ho, self.wo)
        }
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

/// Unfold `[cin, b, h, w]` into `[cin*k*k, b*ho*wo]`.
pub fn im2col(x: &[f32], s: &ConvShape, batch: usize) -> Vec<f32> {
    let n = batch * s.ho * s.wo;
    let mut cols = vec![0.0; s.patch_len() * n];
    for ci in 0..s.cin {
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = (ci * s.kernel + ky) * s.kernel + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for b in 0..batch {
                    let src = &x[(ci * batch + b) * s.h * s.w..(ci * batch + b + 1) * s.h * s.w];
                    for oy in 0..s.ho {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * s.w..(iy as usize + 1) * s.w];
                        let dst_row = &mut dst[(b * s.ho + oy) * s.wo..(b * s.ho + oy + 1) * s.wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            if ix >= 0 && ix < s.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im(cols: &[f32], s: &ConvShape, batch: usize) -> Vec<f32> {
    let n = batch * s.ho * s.wo;
    let mut x = vec![0.0; s.cin * batch * s.h * s.w];
    for ci in 0..s.cin {
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = (ci * s.kernel + ky) * s.kernel + kx;
                let src = &cols[row * n..(row + 1) * n];
                for b in 0..batch {
                    let dst = &mut x[(ci * batch + b) * s.h * s.w..(ci * batch + b + 1) * s.h * s.w];
                    for oy in 0..s.ho {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for ox in 0..s.wo {
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            if ix >= 0 && ix < s.w as isize {
                                dst[iy as usize * s.w + ix as usize] += src[(b * s.ho + oy) * s.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero the gradient wherever the (post-ReLU) activation is not positive.
pub fn relu_backward(activation: &[f32], grad: &mut [f32]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 stride-2 max-pool over `[planes, h, w]`; returns output and the flat
/// input index of each maximum.
pub fn maxpool2(x: &[f32], planes: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(dy: &[f32], arg: &[u32], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0; input_len];
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i as usize] += g;
    }
    dx
}

/// Mean over each `h*w` plane: `[c, b, h, w] -> [c, b]`.
pub fn global_avg_pool(x: &[f32], planes: usize, hw: usize) -> Vec<f32> {
    x.chunks_exact(hw)
        .take(planes)
        .map(|p| p.iter().sum::<f32>() / hw as f32)
        .collect()
}

pub fn global_avg_pool_backward(dy: &[f32], hw: usize) -> Vec<f32> {
    dy.iter()
        .flat_map(|&g| std::iter::repeat_n(g / hw as f32, hw))
        .collect()
}

/// Numerically stable binary cross-entropy on logits, averaged over the
/// batch. Returns the loss and `dL/dz`.
pub fn bce_with_logits(logits: &[f32], targets: &[f32]) -> (f64, Vec<f32>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            let z64 = z as f64;
            let y64 = y as f64;
            loss += z64.max(0.0) - z64 * y64 + (-z64.abs()).exp().ln_1p();
            ((sigmoid(z64) - y64) / n) as f32
        })
        .collect();
    (loss / n, grad)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn shape(cin: usize, k: usize, stride: usize, h: usize, w: usize) -> ConvShape {
        let pad = k / 2;
        ConvShape {
            cin,
            cout: 1,
            kernel: k,
            stride,
            pad,
            h,
            w,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
            pool: false,
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let s = shape(2, 3, 2, 7, 6);
        let batch = 3;
        let x: Vec<f32> = (0..2 * batch * 42).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cols = im2col(&x, &s, batch);
        let y: Vec<f32> = (0..cols.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let back = col2im(&y, &s, batch);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = shape(2, 3, 1, 5, 4);
        let x: Vec<f32> = (0..2 * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = Dense::init(1, s.patch_len(), &mut rng);
        let y = layer.forward(&im2col(&x, &s, 1), s.ho * s.wo);
        for oy in 0..s.ho {
            for ox in 0..s.wo {
                let mut acc = layer.bias[0];
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                acc += layer.weight[(ci * 3 + ky) * 3 + kx] * x[ci * 20 + iy as usize * 4 + ix as usize];
                            }
                        }
                    }
                }
                assert!((acc - y[oy * s.wo + ox]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0];
        let (y, arg) = maxpool2(&x, 1, 2, 4);
        assert_eq!(y, vec![5.0, 9.0]);
        let dx = maxpool2_backward(&[1.0, 2.0], &arg, 8);
        assert_eq!(dx, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn bce_matches_naive_formula() {
        let (loss, grad) = bce_with_logits(&[0.3, -1.2], &[1.0, 0.0]);
        let p1 = sigmoid(0.3);
        let p2 = sigmoid(-1.2);
        let naive = (-(p1.ln()) - (1.0 - p2).ln()) / 2.0;
        assert!((loss - naive).abs() < 1e-6);
        assert!((grad[0] as f64 - (p1 - 1.0) / 2.0).abs() < 1e-6);
    }
}
