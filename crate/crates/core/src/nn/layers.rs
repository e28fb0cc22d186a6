use ndarray::{Array1, Array2, ArrayView2, Axis, Ix2, IxDyn};
use rand::Rng as _;

use super::{check_shape, init_uniform, stale, Init, Layer, LayerSpec, Mode, Module, Param, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn as2<T: Scalar>(x: &Tensor<T>) -> Result<ArrayView2<'_, T>> {
    x.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape(format!("expected a matrix, got {:?}", x.shape())))
}

/// Output size and leading pad for "same" padding: `ceil(n / s)` outputs.
fn same_pad(n: usize, k: usize, s: usize) -> (usize, usize) {
    let out = n.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(n);
    (out, total / 2)
}

fn pack_bits(bits: impl Iterator<Item = bool>, out: &mut Vec<u64>) {
    let mut word = 0u64;
    let mut n = 0;
    for b in bits {
        word |= u64::from(b) << n;
        n += 1;
        if n == 64 {
            out.push(word);
            word = 0;
            n = 0;
        }
    }
    if n > 0 {
        out.push(word);
    }
}

/// Narrow layers convolve directly from the cached input; wider ones go
/// through im2col and a matrix product.
enum ConvInput<T> {
    Cols(Array2<T>),
    Raw(Vec<T>),
}

struct ConvCache<T> {
    input: ConvInput<T>,
    in_shape: [usize; 3],
    out_hw: (usize, usize),
    pad: (usize, usize),
}

/// 2-D convolution over `[C, H, W]` with "same" padding.
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    filters: usize,
    kernel: usize,
    stride: usize,
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, filters: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = init_uniform(&[filters, in_channels, kernel, kernel], fan_in, filters * kernel * kernel, Init::He, rng);
        Self {
            weight: Param::new(w, true),
            bias: Param::new(Tensor::zeros(IxDyn(&[filters])), false),
            in_channels,
            filters,
            kernel,
            stride,
            cache: None,
        }
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize, top: usize, left: usize) -> Array2<T> {
        let k = self.kernel;
        let s = self.stride;
        let mut cols = Array2::zeros((self.in_channels * k * k, ho * wo));
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for di in 0..k {
                let (ilo, ihi) = valid_outputs(ho, di, top, s, h);
                for dj in 0..k {
                    let (jlo, jhi) = valid_outputs(wo, dj, left, s, w);
                    let mut row = cols.row_mut((c * k + di) * k + dj);
                    let row = row.as_slice_mut().expect("fresh array is contiguous");
                    for oi in ilo..ihi {
                        let src = &plane[(oi * s + di - top) * w..];
                        let dst = &mut row[oi * wo..(oi + 1) * wo];
                        if s == 1 {
                            let j0 = jlo + dj - left;
                            dst[jlo..jhi].copy_from_slice(&src[j0..j0 + jhi - jlo]);
                        } else {
                            for oj in jlo..jhi {
                                dst[oj] = src[oj * s + dj - left];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: ArrayView2<'_, T>, cache: &ConvCache<T>) -> Vec<T> {
        let [_, h, w] = cache.in_shape;
        let (ho, wo) = cache.out_hw;
        let (top, left) = cache.pad;
        let k = self.kernel;
        let s = self.stride;
        let mut dx = vec![T::zero(); self.in_channels * h * w];
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for di in 0..k {
                let (ilo, ihi) = valid_outputs(ho, di, top, s, h);
                for dj in 0..k {
                    let (jlo, jhi) = valid_outputs(wo, dj, left, s, w);
                    let row = dcols.row((c * k + di) * k + dj).to_slice().expect("standard layout");
                    for oi in ilo..ihi {
                        let dst = &mut plane[(oi * s + di - top) * w..];
                        let src = &row[oi * wo..(oi + 1) * wo];
                        for oj in jlo..jhi {
                            dst[oj * s + dj - left] += src[oj];
                        }
                    }
                }
            }
        }
        dx
    }

    fn direct(&self) -> bool {
        self.in_channels * self.filters <= DIRECT_CONV_MAX_PAIRS
    }

    fn direct_forward(&self, x: &[T], g: &Geometry) -> Vec<T> {
        let Geometry { h, w, ho, wo, top, left } = *g;
        let (k, s) = (self.kernel, self.stride);
        let weight = self.weight.value.as_slice().expect("weight is contiguous");
        let mut y = vec![T::zero(); self.filters * ho * wo];
        for (f, out) in y.chunks_exact_mut(ho * wo).enumerate() {
            out.fill(self.bias.value[f]);
            for c in 0..self.in_channels {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for di in 0..k {
                    let (ilo, ihi) = valid_outputs(ho, di, top, s, h);
                    for dj in 0..k {
                        let (jlo, jhi) = valid_outputs(wo, dj, left, s, w);
                        let wv = weight[((f * self.in_channels + c) * k + di) * k + dj];
                        for oi in ilo..ihi {
                            let src = &plane[(oi * s + di - top) * w..];
                            let dst = &mut out[oi * wo + jlo..oi * wo + jhi];
                            if s == 1 {
                                let j0 = jlo + dj - left;
                                for (d, &v) in dst.iter_mut().zip(&src[j0..j0 + jhi - jlo]) {
                                    *d += wv * v;
                                }
                            } else {
                                for (oj, d) in (jlo..jhi).zip(dst) {
                                    *d += wv * src[oj * s + dj - left];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates weight and bias gradients, returns the input gradient.
    fn direct_backward(&mut self, x: &[T], grad: &[T], g: &Geometry) -> Vec<T> {
        let Geometry { h, w, ho, wo, top, left } = *g;
        let (k, s) = (self.kernel, self.stride);
        let weight = self.weight.value.as_slice().expect("weight is contiguous");
        let dw = self.weight.grad.as_slice_mut().expect("gradient is contiguous");
        let mut dx = vec![T::zero(); self.in_channels * h * w];
        for (f, gp) in grad.chunks_exact(ho * wo).enumerate() {
            self.bias.grad[f] += gp.iter().copied().sum::<T>();
            for c in 0..self.in_channels {
                let plane = &x[c * h * w..(c + 1) * h * w];
                let dplane = &mut dx[c * h * w..(c + 1) * h * w];
                for di in 0..k {
                    let (ilo, ihi) = valid_outputs(ho, di, top, s, h);
                    for dj in 0..k {
                        let (jlo, jhi) = valid_outputs(wo, dj, left, s, w);
                        let idx = ((f * self.in_channels + c) * k + di) * k + dj;
                        let wv = weight[idx];
                        let mut acc = T::zero();
                        for oi in ilo..ihi {
                            let row = (oi * s + di - top) * w;
                            let gs = &gp[oi * wo + jlo..oi * wo + jhi];
                            if s == 1 {
                                let j0 = row + jlo + dj - left;
                                let n = jhi - jlo;
                                acc += dot(&plane[j0..j0 + n], gs);
                                for (d, &gv) in dplane[j0..j0 + n].iter_mut().zip(gs) {
                                    *d += wv * gv;
                                }
                            } else {
                                for (oj, &gv) in (jlo..jhi).zip(gs) {
                                    let j = row + oj * s + dj - left;
                                    acc += gv * plane[j];
                                    dplane[j] += wv * gv;
                                }
                            }
                        }
                        dw[idx] += acc;
                    }
                }
            }
        }
        dx
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let ckk = self.in_channels * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.filters, ckk))
            .expect("weight is contiguous")
    }
}

/// Dot product with eight independent partial sums so it vectorises.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ac, ar) = a.as_chunks::<8>();
    let (bc, br) = b.as_chunks::<8>();
    for (x, y) in ac.iter().zip(bc) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let tail: T = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
    lanes.iter().copied().sum::<T>() + tail
}

/// Above this many (input, output) channel pairs im2col + GEMM is faster.
const DIRECT_CONV_MAX_PAIRS: usize = 64;

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    top: usize,
    left: usize,
}

/// Output positions `o` in `[lo, hi)` whose input `o*s + d - pad` is inside `0..n`.
fn valid_outputs(n_out: usize, d: usize, pad: usize, s: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d).div_ceil(s);
    let hi = (n + pad).saturating_sub(d).div_ceil(s).min(n_out);
    (lo.min(hi), hi)
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Conv2d {
            in_channels: self.in_channels,
            filters: self.filters,
            kernel: self.kernel,
            stride: self.stride,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 3 || input[0] != self.in_channels || input[1] == 0 || input[2] == 0 {
            return Err(Error::Shape(format!(
                "conv2d expects [{}, H, W], got {input:?}",
                self.in_channels
            )));
        }
        Ok(vec![
            self.filters,
            input[1].div_ceil(self.stride),
            input[2].div_ceil(self.stride),
        ])
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode, _rng: &mut Rng) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(x.shape())?;
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (ho, top) = same_pad(h, self.kernel, self.stride);
        let (wo, left) = same_pad(w, self.kernel, self.stride);
        let geo = Geometry { h, w, ho, wo, top, left };
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let (y, input) = if self.direct() {
            let y = Tensor::from_shape_vec(IxDyn(&out_shape), self.direct_forward(xs, &geo)).expect("sizes match");
            (y, ConvInput::Raw(xs.to_vec()))
        } else {
            let cols = self.im2col(xs, h, w, ho, wo, top, left);
            let mut y = self.weight_matrix().dot(&cols);
            for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(self.bias.value.iter()) {
                row.mapv_inplace(|v| v + b);
            }
            let y = y.into_shape_with_order(IxDyn(&out_shape)).expect("sizes match");
            (y, ConvInput::Cols(cols))
        };
        self.cache = Some(ConvCache {
            input,
            in_shape: [self.in_channels, h, w],
            out_hw: (ho, wo),
            pad: (top, left),
        });
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(stale)?;
        let (ho, wo) = cache.out_hw;
        if let Err(e) = check_shape(grad.shape(), &[self.filters, ho, wo], "conv2d gradient") {
            self.cache = Some(cache);
            return Err(e);
        }
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().expect("standard layout");
        let [_, h, w] = cache.in_shape;
        let dx = match &cache.input {
            ConvInput::Raw(x) => {
                let (top, left) = cache.pad;
                self.direct_backward(x, gs, &Geometry { h, w, ho, wo, top, left })
            }
            ConvInput::Cols(cols) => {
                let g = ArrayView2::from_shape((self.filters, ho * wo), gs).expect("sizes match");
                let dw = g.dot(&cols.t());
                let dw = dw.into_shape_with_order(IxDyn(self.weight.value.shape())).expect("sizes match");
                self.weight.grad += &dw;
                self.bias.grad += &g.sum_axis(Axis(1)).into_dyn();
                let dcols = self.weight_matrix().t().dot(&g);
                self.col2im(dcols.as_standard_layout().view(), &cache)
            }
        };
        let shape = cache.in_shape;
        self.cache = Some(cache);
        Ok(Tensor::from_shape_vec(IxDyn(&shape), dx).expect("sizes match"))
    }
}

/// Max pooling over `[C, H, W]` without padding.
pub struct MaxPool2d {
    window: usize,
    stride: usize,
    /// Flat input index of each output's winner, plus the input shape.
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(window: usize, stride: usize) -> Self {
        Self {
            window,
            stride,
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for MaxPool2d {
    fn kink_signature(&self, out: &mut Vec<u64>) {
        if let Some((arg, _)) = &self.cache {
            out.extend(arg.iter().map(|&i| i as u64));
        }
    }
}

impl<T: Scalar> Layer<T> for MaxPool2d {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Maxpool2d {
            window: self.window,
            stride: self.stride,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 3 || input[1] < self.window || input[2] < self.window {
            return Err(Error::Shape(format!(
                "maxpool {}x{} needs [C, H, W] with H, W >= window, got {input:?}",
                self.window, self.window
            )));
        }
        let o = |n: usize| (n - self.window) / self.stride + 1;
        Ok(vec![input[0], o(input[1]), o(input[2])])
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode, _rng: &mut Rng) -> Result<Tensor<T>> {
        let shape = <Self as Layer<T>>::output_shape(self, x.shape())?;
        let (c, ho, wo) = (shape[0], shape[1], shape[2]);
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut y = Vec::with_capacity(c * ho * wo);
        let mut arg = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = ci * h * w + oi * self.stride * w + oj * self.stride;
                    for di in 0..self.window {
                        for dj in 0..self.window {
                            let idx = ci * h * w + (oi * self.stride + di) * w + oj * self.stride + dj;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(xs[best]);
                    arg.push(best);
                }
            }
        }
        self.cache = Some((arg, x.shape().to_vec()));
        Ok(Tensor::from_shape_vec(IxDyn(&shape), y).expect("sizes match"))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (arg, in_shape) = self.cache.as_ref().ok_or_else(stale)?;
        if grad.len() != arg.len() {
            return Err(Error::Shape(format!(
                "maxpool gradient has {} values, expected {}",
                grad.len(),
                arg.len()
            )));
        }
        let mut dx = Tensor::zeros(IxDyn(in_shape));
        let d = dx.as_slice_mut().expect("fresh array is contiguous");
        for (&i, &g) in arg.iter().zip(grad.iter()) {
            d[i] += g;
        }
        Ok(dx)
    }
}

/// `[C, H, W]` to `[C]` by spatial mean.
#[derive(Default)]
pub struct GlobalAvgPool {
    in_shape: Option<Vec<usize>>,
}

impl<T: Scalar> Module<T> for GlobalAvgPool {}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn spec(&self) -> LayerSpec {
        LayerSpec::GlobalAvgPool
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 3 || input[1] * input[2] == 0 {
            return Err(Error::Shape(format!("global average pool expects [C, H, W], got {input:?}")));
        }
        Ok(vec![input[0]])
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode, _rng: &mut Rng) -> Result<Tensor<T>> {
        <Self as Layer<T>>::output_shape(self, x.shape())?;
        let c = x.shape()[0];
        let flat = x.to_shape((c, x.len() / c)).expect("sizes match");
        self.in_shape = Some(x.shape().to_vec());
        Ok(flat.mean_axis(Axis(1)).expect("non-empty").into_dyn())
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.in_shape.as_ref().ok_or_else(stale)?;
        check_shape(grad.shape(), &shape[..1], "global average pool gradient")?;
        let n = T::of((shape[1] * shape[2]) as f64);
        let mut dx = Tensor::zeros(IxDyn(shape));
        for (mut plane, &g) in dx.axis_iter_mut(Axis(0)).zip(grad.iter()) {
            plane.fill(g / n);
        }
        Ok(dx)
    }
}

/// `y = x W + b` on `[in]` or `[T, in]`.
pub struct Dense<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(inputs: usize, outputs: usize, init: Init, rng: &mut Rng) -> Self {
        Self {
            weight: Param::new(init_uniform(&[inputs, outputs], inputs, outputs, init, rng), true),
            bias: Param::new(Tensor::zeros(IxDyn(&[outputs])), false),
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn w(&self) -> ArrayView2<'_, T> {
        as2(&self.weight.value).expect("dense weight is a matrix")
    }
}

impl<T: Scalar> Module<T> for Dense<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Dense {
            inputs: self.inputs(),
            outputs: self.outputs(),
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [n] if *n == self.inputs() => Ok(vec![self.outputs()]),
            [t, n] if *n == self.inputs() => Ok(vec![*t, self.outputs()]),
            _ => Err(Error::Shape(format!(
                "dense expects [{}] or [T, {}], got {input:?}",
                self.inputs(),
                self.inputs()
            ))),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode, _rng: &mut Rng) -> Result<Tensor<T>> {
        let shape = self.output_shape(x.shape())?;
        let rows = x.to_shape((x.len() / self.inputs(), self.inputs())).expect("sizes match");
        let mut y = rows.dot(&self.w());
        y += &self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("bias is a vector");
        self.input = Some(x.clone());
        Ok(y.into_shape_with_order(IxDyn(&shape)).expect("sizes match"))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(stale)?;
        check_shape(grad.shape(), &self.output_shape(x.shape())?, "dense gradient")?;
        let rows = x.to_shape((x.len() / self.inputs(), self.inputs())).expect("sizes match");
        let g = grad.to_shape((grad.len() / self.outputs(), self.outputs())).expect("sizes match");
        self.weight.grad += &rows.t().dot(&g).into_dyn();
        self.bias.grad += &g.sum_axis(Axis(0)).into_dyn();
        let dx = g.dot(&self.w().t());
        Ok(dx.into_shape_with_order(IxDyn(x.shape())).expect("sizes match"))
    }
}

#[derive(Default)]
pub struct Relu {
    positive: Option<Vec<bool>>,
}

impl<T: Scalar> Module<T> for Relu {
    fn kink_signature(&self, out: &mut Vec<u64>) {
        if let Some(p) = &self.positive {
            pack_bits(p.iter().copied(), out);
        }
    }
}

impl<T: Scalar> Layer<T> for Relu {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Relu
    }
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode, _rng: &mut Rng) -> Result<Tensor<T>> {
        self.positive = Some(x.iter().map(|&v| v > T::zero()).collect());
        Ok(x.mapv(|v| if v > T::zero() { v } else { T::zero() }))
    }
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.positive.as_ref().ok_or_else(stale)?;
        if p.len() != grad.len() {
            return Err(Error::Shape("relu gradient size differs from its input".into()));
        }
        let mut dx = grad.as_standard_layout().into_owned();
        for (d, &keep) in dx.iter_mut().zip(p) {
            if !keep {
                *d = T::zero();
            }
        }
        Ok(dx)
    }
}

const GELU_C: f64 = 0.044_715;

/// GELU with the tanh approximation.
#[derive(Default)]
pub struct Gelu<T: Scalar> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Module<T> for Gelu<T> {}

impl<T: Scalar> Layer<T> for Gelu<T> {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Gelu
    }
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode, _rng: &mut Rng) -> Result<Tensor<T>> {
        let k = T::of((2.0 / std::f64::consts::PI).sqrt());
        let c = T::of(GELU_C);
        let half = T::of(0.5);
        self.input = Some(x.clone());
        Ok(x.mapv(|v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh())))
    }
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(stale)?;
        check_shape(grad.shape(), x.shape(), "gelu gradient")?;
        let k = T::of((2.0 / std::f64::consts::PI).sqrt());
        let c = T::of(GELU_C);
        let half = T::of(0.5);
        let three = T::of(3.0);
        let mut dx = grad.to_owned();
        dx.zip_mut_with(x, |g, &v| {
            let t = (k * (v + c * v * v * v)).tanh();
            let d = half * (T::one() + t) + half * v * (T::one() - t * t) * k * (T::one() + three * c * v * v);
            *g = *g * d;
        });
        Ok(dx)
    }
}

#[derive(Default)]
pub struct Sigmoid<T: Scalar> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Module<T> for Sigmoid<T> {}

impl<T: Scalar> Layer<T> for Sigmoid<T> {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Sigmoid
    }
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode, _rng: &mut Rng) -> Result<Tensor<T>> {
        let y = x.mapv(super::sigmoid);
        self.output = Some(y.clone());
        Ok(y)
    }
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.as_ref().ok_or_else(stale)?;
        check_shape(grad.shape(), y.shape(), "sigmoid gradient")?;
        let mut dx = grad.to_owned();
        dx.zip_mut_with(y, |g, &s| *g = *g * s * (T::one() - s));
        Ok(dx)
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` in training,
/// and evaluation is the identity.
pub struct Dropout<T: Scalar> {
    rate: f64,
    mask: Option<Option<Tensor<T>>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        Self { rate, mask: None }
    }
}

impl<T: Scalar> Module<T> for Dropout<T> {}

impl<T: Scalar> Layer<T> for Dropout<T> {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Dropout { rate: self.rate }
    }
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }
    fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.mask = Some(None);
            return Ok(x.clone());
        }
        let scale = T::of(1.0 / (1.0 - self.rate));
        // P(draw < cut) = rate to within 2^-32
        let cut = (self.rate * 4_294_967_296.0).round().min(u32::MAX as f64) as u32;
        let mask = x.mapv(|_| {
            if rng.random::<u32>() < cut {
                T::zero()
            } else {
                scale
            }
        });
        let y = x * &mask;
        self.mask = Some(Some(mask));
        Ok(y)
    }
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self.mask.as_ref().ok_or_else(stale)? {
            None => Ok(grad.clone()),
            Some(m) => {
                check_shape(grad.shape(), m.shape(), "dropout gradient")?;
                Ok(grad * m)
            }
        }
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalisation over the last axis with learned gain and shift.
pub struct LayerNorm<T: Scalar> {
    pub gain: Param<T>,
    pub shift: Param<T>,
    /// Normalised input and per-row inverse std.
    cache: Option<(Array2<T>, Array1<T>, Vec<usize>)>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Param::new(Tensor::ones(IxDyn(&[dim])), false),
            shift: Param::new(Tensor::zeros(IxDyn(&[dim])), false),
            cache: None,
        }
    }

    fn dim(&self) -> usize {
        self.gain.value.len()
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gain, &self.shift]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gain, &mut self.shift]
    }
}

impl<T: Scalar> Layer<T> for LayerNorm<T> {
    fn spec(&self) -> LayerSpec {
        LayerSpec::LayerNorm { dim: self.dim() }
    }
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.last() != Some(&self.dim()) {
            return Err(Error::Shape(format!(
                "layer norm over {} features, got {input:?}",
                self.dim()
            )));
        }
        Ok(input.to_vec())
    }
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode, _rng: &mut Rng) -> Result<Tensor<T>> {
        self.output_shape(x.shape())?;
        let d = self.dim();
        let rows = x.to_shape((x.len() / d, d)).expect("sizes match");
        let n = T::of(d as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = Array2::zeros(rows.raw_dim());
        let mut inv = Array1::zeros(rows.nrows());
        for (i, row) in rows.outer_iter().enumerate() {
            let mu = row.sum() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            inv[i] = s;
            for (o, &v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
                *o = (v - mu) * s;
            }
        }
        let gain = self.gain.value.view().into_dimensionality::<ndarray::Ix1>().expect("vector");
        let shift = self.shift.value.view().into_dimensionality::<ndarray::Ix1>().expect("vector");
        let y = &xhat * &gain + shift;
        self.cache = Some((xhat, inv, x.shape().to_vec()));
        Ok(y.into_shape_with_order(IxDyn(x.shape())).expect("sizes match"))
    }
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (xhat, inv, shape) = self.cache.as_ref().ok_or_else(stale)?;
        check_shape(grad.shape(), shape, "layer norm gradient")?;
        let d = self.dim();
        let g = grad.to_shape((grad.len() / d, d)).expect("sizes match");
        self.gain.grad += &(&g * xhat).sum_axis(Axis(0)).into_dyn();
        self.shift.grad += &g.sum_axis(Axis(0)).into_dyn();
        let gain = self.gain.value.view().into_dimensionality::<ndarray::Ix1>().expect("vector");
        let n = T::of(d as f64);
        let mut dx = Array2::zeros(g.raw_dim());
        for i in 0..g.nrows() {
            let dxhat = &g.row(i) * &gain;
            let m1 = dxhat.sum() / n;
            let m2 = dxhat.iter().zip(xhat.row(i)).map(|(&a, &b)| a * b).sum::<T>() / n;
            for ((o, &a), &b) in dx.row_mut(i).iter_mut().zip(dxhat.iter()).zip(xhat.row(i)) {
                *o = inv[i] * (a - m1 - b * m2);
            }
        }
        Ok(dx.into_shape_with_order(IxDyn(shape)).expect("sizes match"))
    }
}
