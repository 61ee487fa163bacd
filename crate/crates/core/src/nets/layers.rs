//! Layers with hand-written forward and backward passes.
//!
//! Layers hold only indices into a [`ParamStore`]; the store owns every
//! tensor so optimizers, checkpoints and gradient checks can treat the
//! network as one flat list.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{gemm, Act, MatRef, Scalar};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    /// Running statistics are stored alongside weights but never optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    pub tensors: Vec<ParamTensor<T>>,
}

pub type ParamId = usize;

impl<T: Scalar> ParamStore<T> {
    fn push(&mut self, name: String, shape: Vec<usize>, values: Vec<T>, trainable: bool) -> ParamId {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.tensors.push(ParamTensor {
            name,
            shape,
            values,
            trainable,
        });
        self.tensors.len() - 1
    }

    pub(crate) fn get(&self, id: ParamId) -> &[T] {
        &self.tensors[id].values
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.tensors[id].values
    }

    /// Zero-filled gradient buffers matching every tensor.
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(|t| vec![T::ZERO; t.values.len()]).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.values.len())
            .sum()
    }
}

pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore<f64>,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn he_normal(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let values = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.store.push(name, shape, values, true)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, value: f64, trainable: bool) -> ParamId {
        let n = shape.iter().product();
        self.store.push(name, shape, vec![value; n], trainable)
    }
}

/// Square convolution with stride 1 and "same" zero padding.
#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, cin: usize, cout: usize, kernel: usize, bias: bool) -> Self {
        assert!(kernel % 2 == 1);
        let weight = init.he_normal(
            format!("{name}.weight"),
            vec![cout, cin, kernel, kernel],
            cin * kernel * kernel,
        );
        let bias = bias.then(|| init.constant(format!("{name}.bias"), vec![cout], 0.0, true));
        Self {
            cin,
            cout,
            kernel,
            weight,
            bias,
        }
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    /// Unfold into a `(cin * k * k) x (N * H * W)` matrix, overwriting all of `cols`.
    fn im2col_into<T: Scalar>(&self, x: &Act<T>, cols: &mut [T]) {
        let (k, pad) = (self.kernel, self.kernel / 2);
        let (h, w) = (x.height, x.width);
        let plane = x.plane();
        debug_assert_eq!(cols.len(), self.patch_len() * plane);
        for ci in 0..self.cin {
            let src = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let dx = kx as isize - pad as isize;
                    // Output columns x0..x1 read source columns x0+dx..x1+dx.
                    let x0 = ((-dx).max(0) as usize).min(w);
                    let x1 = ((w as isize - dx).clamp(0, w as isize) as usize).max(x0);
                    for n in 0..x.batch {
                        for y in 0..h {
                            let drow = &mut dst[(n * h + y) * w..][..w];
                            let sy = y as isize + ky as isize - pad as isize;
                            if sy < 0 || sy >= h as isize {
                                drow.fill(T::ZERO);
                                continue;
                            }
                            let srow = &src[(n * h + sy as usize) * w..][..w];
                            drow[..x0].fill(T::ZERO);
                            let s0 = (x0 as isize + dx) as usize;
                            drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                            drow[x1..].fill(T::ZERO);
                        }
                    }
                }
            }
        }
    }

    /// Fold a column matrix back, summing overlapping contributions.
    fn col2im<T: Scalar>(&self, cols: &[T], like: &Act<T>) -> Act<T> {
        let (k, pad) = (self.kernel, self.kernel / 2);
        let (h, w) = (like.height, like.width);
        let plane = like.plane();
        let mut out = Act::zeros(self.cin, like.batch, h, w);
        for ci in 0..self.cin {
            let dst = out.channel_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let dx = kx as isize - pad as isize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for n in 0..like.batch {
                        for y in 0..h {
                            let sy = y as isize + ky as isize - pad as isize;
                            if sy < 0 || sy >= h as isize || x0 >= x1 {
                                continue;
                            }
                            let srow = &src[(n * h + y) * w..][..w];
                            let drow = &mut dst[(n * h + sy as usize) * w..][..w];
                            for xx in x0..x1 {
                                drow[(xx as isize + dx) as usize] += srow[xx];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Act<T>) -> Act<T> {
        debug_assert_eq!(x.channels, self.cin);
        let plane = x.plane();
        let mut out = vec![T::ZERO; self.cout * plane];
        let weight = MatRef::new(params.get(self.weight), self.cout, self.patch_len());
        if self.kernel == 1 {
            gemm(weight, MatRef::new(&x.data, self.patch_len(), plane), T::ZERO, &mut out);
        } else {
            T::with_scratch(self.patch_len() * plane, |cols| {
                self.im2col_into(x, cols);
                gemm(weight, MatRef::new(cols, self.patch_len(), plane), T::ZERO, &mut out);
            });
        }
        if let Some(b) = self.bias {
            for (co, &bias) in params.get(b).iter().enumerate() {
                out[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v += bias);
            }
        }
        x.with_data(self.cout, out)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward<T: Scalar>(&self, params: &ParamStore<T>, grads: &mut [Vec<T>], x: &Act<T>, dy: &Act<T>) -> Act<T> {
        let plane = x.plane();
        let dy_mat = MatRef::new(&dy.data, self.cout, plane);
        let dw = &mut grads[self.weight];
        if self.kernel == 1 {
            gemm(dy_mat, MatRef::new(&x.data, self.patch_len(), plane).t(), T::ONE, dw);
        } else {
            T::with_scratch(self.patch_len() * plane, |cols| {
                self.im2col_into(x, cols);
                gemm(dy_mat, MatRef::new(cols, self.patch_len(), plane).t(), T::ONE, dw);
            });
        }
        if let Some(b) = self.bias {
            for co in 0..self.cout {
                let mut s = T::ZERO;
                for &v in dy.channel(co) {
                    s += v;
                }
                grads[b][co] += s;
            }
        }
        let mut dcols = vec![T::ZERO; self.patch_len() * plane];
        gemm(
            MatRef::new(params.get(self.weight), self.cout, self.patch_len()).t(),
            dy_mat,
            T::ZERO,
            &mut dcols,
        );
        if self.kernel == 1 {
            x.with_data(self.cin, dcols)
        } else {
            self.col2im(&dcols, x)
        }
    }
}

/// Per-channel batch normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNormCache<T> {
    pub xhat: Act<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl BatchNorm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: init.constant(format!("{name}.gamma"), vec![channels], 1.0, true),
            beta: init.constant(format!("{name}.beta"), vec![channels], 0.0, true),
            running_mean: init.constant(format!("{name}.running_mean"), vec![channels], 0.0, false),
            running_var: init.constant(format!("{name}.running_var"), vec![channels], 1.0, false),
        }
    }

    /// Running-statistics normalization followed by ReLU, in place.
    pub fn forward_eval_relu<T: Scalar>(&self, params: &ParamStore<T>, mut x: Act<T>) -> Act<T> {
        let eps = T::from_f64(BN_EPS);
        let (g, b) = (params.get(self.gamma), params.get(self.beta));
        let (rm, rv) = (params.get(self.running_mean), params.get(self.running_var));
        for c in 0..self.channels {
            let scale = g[c] / (rv[c] + eps).sqrt();
            let shift = b[c] - rm[c] * scale;
            x.channel_mut(c).iter_mut().for_each(|v| {
                let y = *v * scale + shift;
                *v = if y < T::ZERO { T::ZERO } else { y };
            });
        }
        x
    }

    pub fn forward_train<T: Scalar>(&self, params: &ParamStore<T>, x: &Act<T>) -> (Act<T>, BatchNormCache<T>) {
        let eps = T::from_f64(BN_EPS);
        let m = T::from_f64(x.plane() as f64);
        let (g, b) = (params.get(self.gamma), params.get(self.beta));
        let mut xhat = x.clone();
        let mut out = x.clone();
        let (mut means, mut vars, mut inv_stds) = (Vec::new(), Vec::new(), Vec::new());
        for c in 0..self.channels {
            let ch = x.channel(c);
            let mut mean = T::ZERO;
            for &v in ch {
                mean += v;
            }
            mean = mean / m;
            let mut var = T::ZERO;
            for &v in ch {
                let d = v - mean;
                var += d * d;
            }
            var = var / m;
            let inv_std = T::ONE / (var + eps).sqrt();
            for (h, &v) in xhat.channel_mut(c).iter_mut().zip(ch) {
                *h = (v - mean) * inv_std;
            }
            for (o, &h) in out.channel_mut(c).iter_mut().zip(xhat.channel(c)) {
                *o = g[c] * h + b[c];
            }
            means.push(mean);
            vars.push(var);
            inv_stds.push(inv_std);
        }
        (
            out,
            BatchNormCache {
                xhat,
                inv_std: inv_stds,
                mean: means,
                var: vars,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut [Vec<T>],
        cache: &BatchNormCache<T>,
        dy: &Act<T>,
    ) -> Act<T> {
        let m = T::from_f64(dy.plane() as f64);
        let g = params.get(self.gamma);
        let mut dx = dy.zeros_like();
        for c in 0..self.channels {
            let (d, xh) = (dy.channel(c), cache.xhat.channel(c));
            let (mut sum_d, mut sum_dxh) = (T::ZERO, T::ZERO);
            for (&dv, &hv) in d.iter().zip(xh) {
                sum_d += dv;
                sum_dxh += dv * hv;
            }
            grads[self.gamma][c] += sum_dxh;
            grads[self.beta][c] += sum_d;
            let k = g[c] * cache.inv_std[c] / m;
            for ((o, &dv), &hv) in dx.channel_mut(c).iter_mut().zip(d).zip(xh) {
                *o = k * (m * dv - sum_d - hv * sum_dxh);
            }
        }
        dx
    }

    /// Fold batch statistics into the running estimates.
    pub fn update_running<T: Scalar>(&self, params: &mut ParamStore<T>, cache: &BatchNormCache<T>, count: usize) {
        let mom = T::from_f64(BN_MOMENTUM);
        let keep = T::ONE - mom;
        let unbias = T::from_f64(count as f64 / (count.max(2) - 1) as f64);
        for c in 0..self.channels {
            let rm = &mut params.get_mut(self.running_mean)[c];
            *rm = keep * *rm + mom * cache.mean[c];
            let rv = &mut params.get_mut(self.running_var)[c];
            *rv = keep * *rv + mom * cache.var[c] * unbias;
        }
    }
}

/// 2x2 transposed convolution with stride 2 (learned upsampling).
#[derive(Debug, Clone)]
pub(crate) struct UpConv {
    pub cin: usize,
    pub cout: usize,
    /// Rows ordered `(cout, dy, dx)`, columns `cin`.
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            weight: init.he_normal(format!("{name}.weight"), vec![cout, 2, 2, cin], cin),
            bias: init.constant(format!("{name}.bias"), vec![cout], 0.0, true),
        }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Act<T>) -> Act<T> {
        let plane = x.plane();
        let mut z = vec![T::ZERO; self.cout * 4 * plane];
        gemm(
            MatRef::new(params.get(self.weight), self.cout * 4, self.cin),
            MatRef::new(&x.data, self.cin, plane),
            T::ZERO,
            &mut z,
        );
        let (h, w) = (x.height, x.width);
        let mut out = Act::zeros(self.cout, x.batch, 2 * h, 2 * w);
        let bias = params.get(self.bias);
        for co in 0..self.cout {
            let dst = out.channel_mut(co);
            for k in 0..4 {
                let (dy, dx) = (k / 2, k % 2);
                let src = &z[(co * 4 + k) * plane..][..plane];
                for n in 0..x.batch {
                    for y in 0..h {
                        for xx in 0..w {
                            dst[((n * 2 * h) + 2 * y + dy) * 2 * w + 2 * xx + dx] =
                                src[(n * h + y) * w + xx] + bias[co];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, params: &ParamStore<T>, grads: &mut [Vec<T>], x: &Act<T>, dout: &Act<T>) -> Act<T> {
        let plane = x.plane();
        let (h, w) = (x.height, x.width);
        let mut dz = vec![T::ZERO; self.cout * 4 * plane];
        for co in 0..self.cout {
            let src = dout.channel(co);
            let mut bsum = T::ZERO;
            for &v in src {
                bsum += v;
            }
            grads[self.bias][co] += bsum;
            for k in 0..4 {
                let (dy, dx) = (k / 2, k % 2);
                let dst = &mut dz[(co * 4 + k) * plane..][..plane];
                for n in 0..x.batch {
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(n * h + y) * w + xx] = src[((n * 2 * h) + 2 * y + dy) * 2 * w + 2 * xx + dx];
                        }
                    }
                }
            }
        }
        let dz_mat = MatRef::new(&dz, self.cout * 4, plane);
        gemm(
            dz_mat,
            MatRef::new(&x.data, self.cin, plane).t(),
            T::ONE,
            &mut grads[self.weight],
        );
        let mut dx = vec![T::ZERO; self.cin * plane];
        gemm(
            MatRef::new(params.get(self.weight), self.cout * 4, self.cin).t(),
            dz_mat,
            T::ZERO,
            &mut dx,
        );
        x.with_data(self.cin, dx)
    }
}

/// 2x2 max pooling; returns the pooled map and the winning offset (0..4) per output.
pub(crate) fn max_pool2<T: Scalar>(x: &Act<T>) -> (Act<T>, Vec<u8>) {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = Act::zeros(x.channels, x.batch, h, w);
    let mut arg = vec![0u8; out.data.len()];
    let plane_in = x.plane();
    let plane_out = out.plane();
    for c in 0..x.channels {
        let src = &x.data[c * plane_in..][..plane_in];
        for n in 0..x.batch {
            for y in 0..h {
                for xx in 0..w {
                    let base = (n * x.height + 2 * y) * x.width + 2 * xx;
                    let cand = [src[base], src[base + 1], src[base + x.width], src[base + x.width + 1]];
                    let mut best = 0;
                    for k in 1..4 {
                        if cand[k] > cand[best] {
                            best = k;
                        }
                    }
                    let o = c * plane_out + (n * h + y) * w + xx;
                    out.data[o] = cand[best];
                    arg[o] = best as u8;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool2_backward<T: Scalar>(dy: &Act<T>, arg: &[u8], input_like: &Act<T>) -> Act<T> {
    let mut dx = input_like.zeros_like();
    let (h, w) = (dy.height, dy.width);
    let (plane_in, plane_out) = (input_like.plane(), dy.plane());
    for c in 0..dy.channels {
        for n in 0..dy.batch {
            for y in 0..h {
                for xx in 0..w {
                    let o = c * plane_out + (n * h + y) * w + xx;
                    let k = arg[o] as usize;
                    let i = c * plane_in + (n * input_like.height + 2 * y + k / 2) * input_like.width + 2 * xx + k % 2;
                    dx.data[i] += dy.data[o];
                }
            }
        }
    }
    dx
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut Act<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::ZERO {
            *v = T::ZERO
        }
    });
}

/// Gradient through ReLU given its output.
pub(crate) fn relu_backward<T: Scalar>(out: &Act<T>, dy: &Act<T>) -> Act<T> {
    let data = out
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&o, &d)| if o > T::ZERO { d } else { T::ZERO })
        .collect();
    dy.with_data(dy.channels, data)
}

/// Inverted dropout mask: zero with probability `rate`, else `1 / (1 - rate)`.
pub(crate) fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::ZERO } else { keep })
        .collect()
}

pub(crate) fn apply_mask<T: Scalar>(x: &mut Act<T>, mask: &[T]) {
    x.data.iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
}

/// Softmax over the channel axis, i.e. per pixel across classes.
pub(crate) fn softmax_channels<T: Scalar>(logits: &Act<T>) -> Act<T> {
    let plane = logits.plane();
    let c = logits.channels;
    let mut out = logits.zeros_like();
    for p in 0..plane {
        let mut max = logits.data[p];
        for k in 1..c {
            let v = logits.data[k * plane + p];
            if v > max {
                max = v;
            }
        }
        let mut sum = T::ZERO;
        for k in 0..c {
            let e = (logits.data[k * plane + p] - max).exp();
            out.data[k * plane + p] = e;
            sum += e;
        }
        for k in 0..c {
            out.data[k * plane + p] = out.data[k * plane + p] / sum;
        }
    }
    out
}
