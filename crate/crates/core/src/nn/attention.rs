use ndarray::{s, Array2, Ix2};

use super::layers::{Dense, Gelu, LayerNorm};
use super::{stale, Init, Layer, LayerSpec, Mode, Module, Param, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Sinusoidal position table `[n × dim]`: even columns sine, odd cosine.
pub fn positional_encoding(n: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |(t, j)| {
        let angle = t as f64 / 10_000f64.powf((j - j % 2) as f64 / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn matrix<T: Scalar>(x: Tensor<T>) -> Array2<T> {
    x.into_dimensionality::<Ix2>().expect("rank checked by caller")
}

struct AttnCache<T> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Attention weights per head, `[T × T]`.
    weights: Vec<Array2<T>>,
}

/// Multi-head self-attention over `[T, hidden]`. Keys marked invalid get
/// exactly zero weight.
pub struct MultiHeadAttention<T: Scalar> {
    pub query: Dense<T>,
    pub key: Dense<T>,
    pub value: Dense<T>,
    pub output: Dense<T>,
    heads: usize,
    mask: Option<Vec<bool>>,
    cache: Option<AttnCache<T>>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(hidden: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            query: Dense::new(hidden, hidden, Init::Xavier, rng),
            key: Dense::new(hidden, hidden, Init::Xavier, rng),
            value: Dense::new(hidden, hidden, Init::Xavier, rng),
            output: Dense::new(hidden, hidden, Init::Xavier, rng),
            heads,
            mask: None,
            cache: None,
        }
    }

    pub fn hidden(&self) -> usize {
        self.query.inputs()
    }

    /// Key validity per frame; `None` attends everywhere.
    pub fn set_mask(&mut self, valid: Option<Vec<bool>>) {
        self.mask = valid;
    }

    /// Per-head weights from the last forward pass.
    pub fn attention_weights(&self) -> Option<&[Array2<T>]> {
        self.cache.as_ref().map(|c| c.weights.as_slice())
    }
}

impl<T: Scalar> Module<T> for MultiHeadAttention<T> {
    fn params(&self) -> Vec<&Param<T>> {
        [&self.query, &self.key, &self.value, &self.output]
            .into_iter()
            .flat_map(|d| d.params())
            .collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.query.params_mut();
        out.extend(self.key.params_mut());
        out.extend(self.value.params_mut());
        out.extend(self.output.params_mut());
        out
    }
}

impl<T: Scalar> Layer<T> for MultiHeadAttention<T> {
    fn spec(&self) -> LayerSpec {
        LayerSpec::MultiheadAttention {
            hidden: self.hidden(),
            heads: self.heads,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [t, h] if *h == self.hidden() && *t > 0 => Ok(input.to_vec()),
            _ => Err(Error::Shape(format!(
                "attention expects [T, {}], got {input:?}",
                self.hidden()
            ))),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        self.output_shape(x.shape())?;
        let n = x.shape()[0];
        let valid = match &self.mask {
            Some(m) if m.len() != n => {
                return Err(Error::Shape(format!("mask has {} frames, input {n}", m.len())))
            }
            Some(m) => m.clone(),
            None => vec![true; n],
        };
        if !valid.iter().any(|&v| v) {
            return Err(Error::InvalidArgument("attention needs at least one valid frame".into()));
        }
        let q = matrix(self.query.forward(x, mode, rng)?);
        let k = matrix(self.key.forward(x, mode, rng)?);
        let v = matrix(self.value.forward(x, mode, rng)?);
        let d = self.hidden() / self.heads;
        let scale = T::of(1.0 / (d as f64).sqrt());
        let mut context = Array2::zeros((n, self.hidden()));
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * d..(h + 1) * d];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for mut row in a.outer_iter_mut() {
                let mut peak = T::neg_infinity();
                for (j, &s) in row.iter().enumerate() {
                    if valid[j] && s > peak {
                        peak = s;
                    }
                }
                let mut total = T::zero();
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if valid[j] { (*s - peak).exp() } else { T::zero() };
                    total += *s;
                }
                row.mapv_inplace(|s| s / total);
            }
            context.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            weights.push(a);
        }
        let y = self.output.forward(&context.into_dyn(), mode, rng)?;
        self.cache = Some(AttnCache { q, k, v, weights });
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(stale)?;
        let dctx = matrix(self.output.backward(grad)?);
        let n = dctx.nrows();
        let d = self.hidden() / self.heads;
        let scale = T::of(1.0 / (d as f64).sqrt());
        let mut dq = Array2::zeros((n, self.hidden()));
        let mut dk = Array2::zeros((n, self.hidden()));
        let mut dv = Array2::zeros((n, self.hidden()));
        for (h, a) in cache.weights.iter().enumerate() {
            let cols = s![.., h * d..(h + 1) * d];
            let dc = dctx.slice(cols);
            let da = dc.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dc));
            let mut ds = &da * a;
            for (mut row, arow) in ds.outer_iter_mut().zip(a.outer_iter()) {
                let dot = row.sum();
                row.zip_mut_with(&arow, |r, &w| *r = *r - w * dot);
            }
            ds.mapv_inplace(|v| v * scale);
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut dx = self.query.backward(&dq.into_dyn())?;
        dx += &self.key.backward(&dk.into_dyn())?;
        dx += &self.value.backward(&dv.into_dyn())?;
        Ok(dx)
    }
}

/// Position-wise `Dense → GELU → Dense`.
pub struct FeedForward<T: Scalar> {
    pub up: Dense<T>,
    act: Gelu<T>,
    pub down: Dense<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(hidden: usize, inner: usize, rng: &mut Rng) -> Self {
        Self {
            up: Dense::new(hidden, inner, Init::Xavier, rng),
            act: Gelu::default(),
            down: Dense::new(inner, hidden, Init::Xavier, rng),
        }
    }
}

impl<T: Scalar> Module<T> for FeedForward<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.up.params();
        out.extend(self.down.params());
        out
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.up.params_mut();
        out.extend(self.down.params_mut());
        out
    }
}

impl<T: Scalar> Layer<T> for FeedForward<T> {
    fn spec(&self) -> LayerSpec {
        LayerSpec::FeedForward {
            hidden: self.up.inputs(),
            inner: self.up.outputs(),
        }
    }
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.up.output_shape(input)?;
        Ok(input.to_vec())
    }
    fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let h = self.up.forward(x, mode, rng)?;
        let h = self.act.forward(&h, mode, rng)?;
        self.down.forward(&h, mode, rng)
    }
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.down.backward(grad)?;
        let g = self.act.backward(&g)?;
        self.up.backward(&g)
    }
}

/// Pre-norm encoder block:
/// `x1 = x + MHA(LN(x))`, `y = x1 + FFN(LN(x1))`.
pub struct TransformerBlock<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attention: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(hidden: usize, heads: usize, inner: usize, rng: &mut Rng) -> Result<Self> {
        LayerSpec::MultiheadAttention { hidden, heads }.validate()?;
        LayerSpec::FeedForward { hidden, inner }.validate()?;
        Ok(Self {
            norm1: LayerNorm::new(hidden),
            attention: MultiHeadAttention::new(hidden, heads, rng),
            norm2: LayerNorm::new(hidden),
            ffn: FeedForward::new(hidden, inner, rng),
        })
    }

    pub fn set_mask(&mut self, valid: Option<Vec<bool>>) {
        self.attention.set_mask(valid);
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        self.attention.output_shape(x.shape())?;
        let h = self.norm1.forward(x, mode, rng)?;
        let x1 = x + &self.attention.forward(&h, mode, rng)?;
        let h = self.norm2.forward(&x1, mode, rng)?;
        Ok(&x1 + &self.ffn.forward(&h, mode, rng)?)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g1 = grad + &self.norm2.backward(&self.ffn.backward(grad)?)?;
        Ok(&g1 + &self.norm1.backward(&self.attention.backward(&g1)?)?)
    }
}

impl<T: Scalar> Module<T> for TransformerBlock<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.norm1.params();
        out.extend(self.attention.params());
        out.extend(self.norm2.params());
        out.extend(self.ffn.params());
        out
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.norm1.params_mut();
        out.extend(self.attention.params_mut());
        out.extend(self.norm2.params_mut());
        out.extend(self.ffn.params_mut());
        out
    }
}
