//! Primitive layers with hand-written backward passes.
//!
//! Activations are NHWC (`Array4`, `n × h × w × c`) for convolutional code and
//! row-major `(rows, features)` matrices everywhere else. Every layer caches
//! what its backward pass needs only when the forward pass runs in a recording
//! mode, so inference over large probe sets stays cheap.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{flatten_nhwc, standard, unflatten_nhwc, Float, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches recorded.
    Train,
    /// Running statistics, nothing recorded.
    Infer,
    /// Running statistics, caches recorded so gradients can flow (attacks).
    Record,
}

impl Mode {
    pub fn records(self) -> bool {
        !matches!(self, Mode::Infer)
    }
}

pub(crate) type Visitor<'a, F> = dyn FnMut(String, &mut Param<F>) + 'a;

fn kaiming<F: Float, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Param<F> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::of(normal.sample(rng))).collect();
    Param::trainable(ndarray::ArrayD::from_shape_vec(shape, data).expect("shape"))
}

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out_channels × (kernel · kernel · in_channels)`, columns ordered `(ky, kx, c)`.
    pub weight: Param<F>,
    cols: Option<Array2<F>>,
    in_dims: (usize, usize, usize, usize),
}

impl<F: Float> Conv2d<F> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: kaiming(&[out_channels, fan_in], fan_in, rng),
            cols: None,
            in_dims: (0, 0, 0, 0),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array4<F>) -> Array2<F> {
        let (n, h, w, c) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let kk = k * k * c;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut cols = Array2::<F>::zeros((n * ho * wo, kk));
        let cs = cols.as_slice_mut().expect("fresh array");
        let pad = self.padding as isize;
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((ni * ho + oy) * wo + ox) * kk;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((ni * h + iy as usize) * w + ix as usize) * c;
                            let dst = row + (ky * k + kx) * c;
                            cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<F>) -> Array4<F> {
        let (n, h, w, c) = self.in_dims;
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let kk = k * k * c;
        let mut dx = Array4::<F>::zeros((n, h, w, c));
        let ds = dx.as_slice_mut().expect("fresh array");
        let dc = dcols.as_slice().expect("standard layout");
        let pad = self.padding as isize;
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((ni * ho + oy) * wo + ox) * kk;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((ni * h + iy as usize) * w + ix as usize) * c;
                            let src = row + (ky * k + kx) * c;
                            for j in 0..c {
                                ds[dst + j] += dc[src + j];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (n, h, w, c) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let (ho, wo) = self.output_hw(h, w);
        let cols = self.im2col(x);
        let y = cols.dot(&self.weight.mat().t());
        if mode.records() {
            self.cols = Some(cols);
            self.in_dims = (n, h, w, c);
        }
        unflatten_nhwc(y, n, ho, wo)
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let cols = self.cols.take().expect("conv backward without recorded forward");
        let dy2 = flatten_nhwc(dy.clone());
        let mut grad = self.weight.grad_mat();
        general_mat_mul(F::one(), &dy2.t(), &cols, F::one(), &mut grad);
        let dcols = standard(dy2.dot(&self.weight.mat()));
        self.col2im(&dcols)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, F>) {
        f(format!("{prefix}.weight"), &mut self.weight);
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.len()
    }
}

struct NormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
    batch_stats: bool,
}

/// Batch normalisation over the channel (last) axis of a `(rows, channels)` view.
pub struct BatchNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    momentum: f64,
    eps: f64,
    cache: Option<NormCache<F>>,
}

impl<F: Float> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], F::one(), true),
            beta: Param::zeros(&[channels], true),
            running_mean: Param::zeros(&[channels], false),
            running_var: Param::filled(&[channels], F::one(), false),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward4(&mut self, x: Array4<F>, mode: Mode) -> Array4<F> {
        let (n, h, w, _) = x.dim();
        let y = self.forward(flatten_nhwc(x), mode);
        unflatten_nhwc(y, n, h, w)
    }

    pub fn backward4(&mut self, dy: &Array4<F>) -> Array4<F> {
        let (n, h, w, _) = dy.dim();
        let dx = self.backward(flatten_nhwc(dy.clone()));
        unflatten_nhwc(dx, n, h, w)
    }

    pub fn forward(&mut self, x: Array2<F>, mode: Mode) -> Array2<F> {
        let rows = x.nrows();
        let eps = F::of(self.eps);
        let (mean, inv_std) = if mode == Mode::Train {
            let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
            let mut var = Array1::<F>::zeros(mean.len());
            for row in x.rows() {
                Zip::from(&mut var).and(&row).and(&mean).for_each(|v, &xi, &m| {
                    let d = xi - m;
                    *v += d * d;
                });
            }
            var.mapv_inplace(|v| v / F::of(rows as f64));
            let m = F::of(self.momentum);
            let unbias = if rows > 1 {
                F::of(rows as f64 / (rows as f64 - 1.0))
            } else {
                F::one()
            };
            Zip::from(self.running_mean.vec_mut()).and(&mean).for_each(|r, &b| {
                *r = (F::one() - m) * *r + m * b;
            });
            Zip::from(self.running_var.vec_mut()).and(&var).for_each(|r, &b| {
                *r = (F::one() - m) * *r + m * b * unbias;
            });
            let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
            (mean, inv_std)
        } else {
            let inv_std = self.running_var.vec().mapv(|v| F::one() / (v + eps).sqrt());
            (self.running_mean.vec().to_owned(), inv_std)
        };
        let mut xhat = x;
        for mut row in xhat.rows_mut() {
            Zip::from(&mut row).and(&mean).and(&inv_std).for_each(|v, &m, &s| {
                *v = (*v - m) * s;
            });
        }
        let mut y = xhat.clone();
        let gamma = self.gamma.vec();
        let beta = self.beta.vec();
        for mut row in y.rows_mut() {
            Zip::from(&mut row).and(&gamma).and(&beta).for_each(|v, &g, &b| {
                *v = *v * g + b;
            });
        }
        if mode.records() {
            self.cache = Some(NormCache {
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            });
        }
        y
    }

    pub fn backward(&mut self, dy: Array2<F>) -> Array2<F> {
        let NormCache {
            xhat,
            inv_std,
            batch_stats,
        } = self.cache.take().expect("batchnorm backward without recorded forward");
        let rows = F::of(dy.nrows() as f64);
        let c = dy.ncols();
        let mut sum_dy = Array1::<F>::zeros(c);
        let mut sum_dy_xhat = Array1::<F>::zeros(c);
        for (dr, xr) in dy.rows().into_iter().zip(xhat.rows()) {
            Zip::from(&mut sum_dy).and(&mut sum_dy_xhat).and(&dr).and(&xr).for_each(
                |s, sx, &d, &xh| {
                    *s += d;
                    *sx += d * xh;
                },
            );
        }
        self.gamma.grad_vec().zip_mut_with(&sum_dy_xhat, |g, &v| *g += v);
        self.beta.grad_vec().zip_mut_with(&sum_dy, |g, &v| *g += v);
        let gamma = self.gamma.vec().to_owned();
        let mut dx = dy;
        if batch_stats {
            for (mut dr, xr) in dx.rows_mut().into_iter().zip(xhat.rows()) {
                Zip::from(&mut dr)
                    .and(&xr)
                    .and(&gamma)
                    .and(&inv_std)
                    .and(&sum_dy)
                    .and(&sum_dy_xhat)
                    .for_each(|d, &xh, &g, &s, &sd, &sdx| {
                        *d = g * s / rows * (rows * *d - sd - xh * sdx);
                    });
            }
        } else {
            for mut dr in dx.rows_mut() {
                Zip::from(&mut dr)
                    .and(&gamma)
                    .and(&inv_std)
                    .for_each(|d, &g, &s| *d = *d * g * s);
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, F>) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }

    pub fn param_count(&self) -> usize {
        self.gamma.value.len() + self.beta.value.len()
    }
}

/// Fully connected layer, `y = x Wᵀ + b` with `W: out × in`.
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    input: Option<Array2<F>>,
}

impl<F: Float> Linear<F> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let data: Vec<F> = (0..in_features * out_features)
            .map(|_| F::of(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            weight: Param::trainable(
                ndarray::ArrayD::from_shape_vec(vec![out_features, in_features], data)
                    .expect("shape"),
            ),
            bias: Param::zeros(&[out_features], true),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<F>, mode: Mode) -> Array2<F> {
        let mut y = x.dot(&self.weight.mat().t());
        y += &self.bias.vec();
        if mode.records() {
            self.input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array2<F> {
        let x = self.input.take().expect("linear backward without recorded forward");
        let mut grad = self.weight.grad_mat();
        general_mat_mul(F::one(), &dy.t(), &x, F::one(), &mut grad);
        let db = dy.sum_axis(Axis(0));
        self.bias.grad_vec().zip_mut_with(&db, |g, &v| *g += v);
        standard(dy.dot(&self.weight.mat()))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, F>) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }
}

/// Layer normalisation over the last axis of a `(rows, features)` matrix.
pub struct LayerNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    eps: f64,
    cache: Option<(Array2<F>, Array1<F>)>,
}

impl<F: Float> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::filled(&[dim], F::one(), true),
            beta: Param::zeros(&[dim], true),
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<F>, mode: Mode) -> Array2<F> {
        let d = F::of(x.ncols() as f64);
        let eps = F::of(self.eps);
        let mut xhat = x.clone();
        let mut inv = Array1::<F>::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / d;
            *s = F::one() / (var + eps).sqrt();
            let si = *s;
            row.mapv_inplace(|v| (v - mean) * si);
        }
        let mut y = xhat.clone();
        let gamma = self.gamma.vec();
        let beta = self.beta.vec();
        for mut row in y.rows_mut() {
            Zip::from(&mut row).and(&gamma).and(&beta).for_each(|v, &g, &b| *v = *v * g + b);
        }
        if mode.records() {
            self.cache = Some((xhat, inv));
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array2<F> {
        let (xhat, inv) = self.cache.take().expect("layernorm backward without recorded forward");
        let d = F::of(dy.ncols() as f64);
        {
            let mut gg = self.gamma.grad_vec();
            for (dr, xr) in dy.rows().into_iter().zip(xhat.rows()) {
                Zip::from(&mut gg).and(&dr).and(&xr).for_each(|g, &d, &x| *g += d * x);
            }
        }
        let db = dy.sum_axis(Axis(0));
        self.beta.grad_vec().zip_mut_with(&db, |g, &v| *g += v);
        let gamma = self.gamma.vec().to_owned();
        let mut dx = dy.clone();
        for ((mut dr, xr), &s) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv.iter()) {
            Zip::from(&mut dr).and(&gamma).for_each(|v, &g| *v *= g);
            let sum: F = dr.sum();
            let sum_x: F = dr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum();
            Zip::from(&mut dr).and(&xr).for_each(|v, &xh| {
                *v = s / d * (d * *v - sum - xh * sum_x);
            });
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, F>) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    pub fn param_count(&self) -> usize {
        self.gamma.value.len() + self.beta.value.len()
    }
}

pub(crate) fn relu4<F: Float>(mut x: Array4<F>) -> Array4<F> {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
    x
}

pub(crate) fn relu2<F: Float>(mut x: Array2<F>) -> Array2<F> {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
    x
}

/// Gradient through a ReLU given its recorded output.
pub(crate) fn relu_backward4<F: Float>(dy: &Array4<F>, out: &Array4<F>) -> Array4<F> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub(crate) fn relu_backward2<F: Float>(dy: &Array2<F>, out: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}
