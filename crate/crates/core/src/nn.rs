//! Minimal 2D convolution toolkit with hand-written backward passes.
//!
//! Tensors are `[N, C, H, W]`, row-major. All convolutions are 3x3, stride 1,
//! with replicate padding, lowered to GEMM through an im2col buffer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "tensor {n}x{c}x{h}x{w} needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn same_shape(&self, other: &Tensor4) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }

    /// Slice holding image `n` (all channels).
    pub fn image(&self, n: usize) -> &[f64] {
        let len = self.c * self.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn image_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.c * self.plane();
        &mut self.data[n * len..(n + 1) * len]
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a`, `b` and `c`, checked by
    // the callers' shape bookkeeping; matrixmultiply reads/writes only those.
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

fn im2col(img: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let src = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = (y + ky).saturating_sub(1).min(h - 1);
                    let src_row = &src[sy * w..(sy + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = (x + kx).saturating_sub(1).min(w - 1);
                        *d = src_row[sx];
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, img: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = (y + ky).saturating_sub(1).min(h - 1);
                    for x in 0..w {
                        let sx = (x + kx).saturating_sub(1).min(w - 1);
                        dst[sy * w + sx] += row[y * w + x];
                    }
                }
            }
        }
    }
}

/// 3x3 convolution bank: weight `[cout][cin][3][3]`, bias `[cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            weight: vec![0.0; cout * cin * 9],
            bias: vec![0.0; cout],
        }
    }

    /// He-normal initialization for rectifier networks.
    pub fn he_init(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut conv = Self::zeros(cin, cout);
        for w in conv.weight.iter_mut() {
            *w = normal.sample(rng);
        }
        conv
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        if x.c != self.cin {
            return Err(Error::ChannelMismatch {
                expected: self.cin,
                actual: x.c,
            });
        }
        let hw = x.plane();
        let k = self.cin * 9;
        let mut out = Tensor4::zeros(x.n, self.cout, x.h, x.w);
        let mut cols = vec![0.0; k * hw];
        for n in 0..x.n {
            im2col(x.image(n), x.c, x.h, x.w, &mut cols);
            let dst = out.image_mut(n);
            for (co, b) in self.bias.iter().enumerate() {
                dst[co * hw..(co + 1) * hw].fill(*b);
            }
            gemm(
                self.cout,
                k,
                hw,
                &self.weight,
                k as isize,
                1,
                &cols,
                hw as isize,
                1,
                1.0,
                dst,
            );
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `dw`/`db` and returns the input
    /// gradient.
    pub fn backward(
        &self,
        x: &Tensor4,
        dy: &Tensor4,
        dw: &mut [f64],
        db: &mut [f64],
    ) -> Result<Tensor4> {
        if x.c != self.cin || dy.c != self.cout || x.n != dy.n || x.plane() != dy.plane() {
            return Err(Error::StaleCache);
        }
        let hw = x.plane();
        let k = self.cin * 9;
        let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
        let mut cols = vec![0.0; k * hw];
        let mut dcols = vec![0.0; k * hw];
        for n in 0..x.n {
            im2col(x.image(n), x.c, x.h, x.w, &mut cols);
            let g = dy.image(n);
            // dW += dY · colsᵀ
            gemm(
                self.cout,
                hw,
                k,
                g,
                hw as isize,
                1,
                &cols,
                1,
                hw as isize,
                1.0,
                dw,
            );
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
            }
            // dcols = Wᵀ · dY
            gemm(
                k,
                self.cout,
                hw,
                &self.weight,
                1,
                k as isize,
                g,
                hw as isize,
                1,
                0.0,
                &mut dcols,
            );
            col2im_add(&dcols, x.c, x.h, x.w, dx.image_mut(n));
        }
        Ok(dx)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Tensor4,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn channel_values<'a>(x: &'a Tensor4, c: usize) -> impl Iterator<Item = &'a [f64]> + 'a {
        let hw = x.plane();
        (0..x.n).map(move |n| &x.data[x.idx(n, c, 0, 0)..][..hw])
    }

    /// Batch statistics over `N x H x W`; updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor4) -> Result<(Tensor4, BatchNormCache)> {
        self.check(x)?;
        let count = (x.n * x.plane()) as f64;
        let mut y = x.clone();
        let mut xhat = x.clone();
        let mut inv_std = vec![0.0; x.c];
        for c in 0..x.c {
            let mean = Self::channel_values(x, c).flatten().sum::<f64>() / count;
            let var = Self::channel_values(x, c)
                .flatten()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / count;
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[c] = is;
            let hw = x.plane();
            for n in 0..x.n {
                let off = x.idx(n, c, 0, 0);
                for i in off..off + hw {
                    let h = (x.data[i] - mean) * is;
                    xhat.data[i] = h;
                    y.data[i] = self.gamma[c] * h + self.beta[c];
                }
            }
            let unbiased = if count > 1.0 {
                var * count / (count - 1.0)
            } else {
                var
            };
            self.running_mean[c] = BN_MOMENTUM * self.running_mean[c] + (1.0 - BN_MOMENTUM) * mean;
            self.running_var[c] =
                BN_MOMENTUM * self.running_var[c] + (1.0 - BN_MOMENTUM) * unbiased;
        }
        Ok((y, BatchNormCache { xhat, inv_std }))
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check(x)?;
        let mut y = x.clone();
        let hw = x.plane();
        for c in 0..x.c {
            let is = 1.0 / (self.running_var[c] + BN_EPS).sqrt();
            let (g, b, m) = (self.gamma[c], self.beta[c], self.running_mean[c]);
            for n in 0..x.n {
                let off = x.idx(n, c, 0, 0);
                for v in &mut y.data[off..off + hw] {
                    *v = g * (*v - m) * is + b;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        dy: &Tensor4,
        cache: &BatchNormCache,
        dgamma: &mut [f64],
        dbeta: &mut [f64],
    ) -> Result<Tensor4> {
        if !dy.same_shape(&cache.xhat) {
            return Err(Error::StaleCache);
        }
        let hw = dy.plane();
        let count = (dy.n * hw) as f64;
        let mut dx = dy.clone();
        for c in 0..dy.c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for n in 0..dy.n {
                let off = dy.idx(n, c, 0, 0);
                for i in off..off + hw {
                    sum_dy += dy.data[i];
                    sum_dy_xhat += dy.data[i] * cache.xhat.data[i];
                }
            }
            dgamma[c] += sum_dy_xhat;
            dbeta[c] += sum_dy;
            let scale = self.gamma[c] * cache.inv_std[c] / count;
            for n in 0..dy.n {
                let off = dy.idx(n, c, 0, 0);
                for i in off..off + hw {
                    dx.data[i] =
                        scale * (count * dy.data[i] - sum_dy - cache.xhat.data[i] * sum_dy_xhat);
                }
            }
        }
        Ok(dx)
    }

    fn check(&self, x: &Tensor4) -> Result<()> {
        if x.c != self.channels() {
            return Err(Error::ChannelMismatch {
                expected: self.channels(),
                actual: x.c,
            });
        }
        Ok(())
    }
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient through `max(0, x)` given the pre-activation input.
pub fn relu_backward(pre: &Tensor4, dy: &Tensor4) -> Tensor4 {
    let mut dx = dy.clone();
    for (g, &p) in dx.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    y.data
        .iter_mut()
        .for_each(|v| *v = if *v > 0.0 { *v } else { LEAKY_SLOPE * *v });
    y
}

pub fn leaky_relu_backward(pre: &Tensor4, dy: &Tensor4) -> Tensor4 {
    let mut dx = dy.clone();
    for (g, &p) in dx.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
    dx
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
