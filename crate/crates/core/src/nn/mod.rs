//! Small deterministic neural-network engine: layers with explicit reverse
//! mode, optimisers, losses, finite-difference auditing and checkpoints.
//!
//! Layers process one example at a time. Convolutional layers take `[C, H,
//! W]` tensors, dense and sequence layers take `[features]` or `[T,
//! features]`. Gradients accumulate into each [`Param`] until cleared, so a
//! mini-batch is a loop of forward/backward calls followed by one optimiser
//! step.

mod attention;
mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod optim;
#[cfg(test)]
mod tests;

pub use attention::{positional_encoding, FeedForward, MultiHeadAttention, TransformerBlock};
pub use checkpoint::{load_params, read_checkpoint, save_params, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{gradient_check, input_gradient_check, GradCheckReport, GRADCHECK_STEP};
pub use layers::{Conv2d, Dense, Dropout, Gelu, GlobalAvgPool, LayerNorm, MaxPool2d, Relu, Sigmoid};
pub use loss::{bce_with_logits, masked_mse, sigmoid};
pub use optim::{Adamax, AdamW, LrSchedule, Optimizer};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Floating type the engine runs in: `f32` for training, `f64` for audits.
pub trait Scalar:
    Float + FromPrimitive + AddAssign + LinalgScalar + ScalarOperand + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Row-major dynamic-rank tensor.
pub type Tensor<T> = ArrayD<T>;

pub fn tensor<T: Scalar>(shape: &[usize], values: Vec<T>) -> Result<Tensor<T>> {
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| Error::Shape(format!("{shape:?}: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, decay: bool) -> Self {
        Self {
            grad: Tensor::zeros(value.raw_dim()),
            value,
            decay,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Gelu,
    Dropout {
        rate: f64,
    },
    Sigmoid,
    LayerNorm {
        dim: usize,
    },
    MultiheadAttention {
        hidden: usize,
        heads: usize,
    },
    FeedForward {
        hidden: usize,
        inner: usize,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("{self:?}: {m}")));
        match *self {
            LayerSpec::Conv2d { in_channels, filters, kernel, stride } => {
                if in_channels == 0 || filters == 0 || kernel == 0 || stride == 0 {
                    return bad("sizes and stride must be positive");
                }
            }
            LayerSpec::Maxpool2d { window, stride } => {
                if window == 0 || stride == 0 {
                    return bad("window and stride must be positive");
                }
            }
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return bad("widths must be positive");
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return bad("rate must lie in [0, 1)");
                }
            }
            LayerSpec::LayerNorm { dim } => {
                if dim == 0 {
                    return bad("dimension must be positive");
                }
            }
            LayerSpec::MultiheadAttention { hidden, heads } => {
                if heads == 0 || hidden == 0 || hidden % heads != 0 {
                    return bad("hidden size must be a positive multiple of heads");
                }
            }
            LayerSpec::FeedForward { hidden, inner } => {
                if hidden == 0 || inner == 0 {
                    return bad("widths must be positive");
                }
            }
            LayerSpec::GlobalAvgPool | LayerSpec::Relu | LayerSpec::Gelu | LayerSpec::Sigmoid => {}
        }
        Ok(())
    }

    /// Trainable parameter count.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_channels, filters, kernel, .. } => {
                filters * in_channels * kernel * kernel + filters
            }
            LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
            LayerSpec::LayerNorm { dim } => 2 * dim,
            LayerSpec::MultiheadAttention { hidden, .. } => 4 * (hidden * hidden + hidden),
            LayerSpec::FeedForward { hidden, inner } => 2 * hidden * inner + hidden + inner,
            _ => 0,
        }
    }
}

/// Anything holding trainable tensors.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    /// Appends an encoding of the piecewise-linear branch taken on the last
    /// forward pass (ReLU signs, pooling winners).
    fn kink_signature(&self, _out: &mut Vec<u64>) {}

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

pub trait Layer<T: Scalar>: Module<T> + Send + Sync {
    fn spec(&self) -> LayerSpec;

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;

    /// Forward pass, caching whatever backward needs.
    fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>>;

    /// Accumulate parameter gradients and return the input gradient.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;
}

pub(crate) fn stale() -> Error {
    Error::InvalidArgument("backward called without a matching forward pass".into())
}

pub(crate) fn check_shape(got: &[usize], want: &[usize], what: &str) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected {want:?}, got {got:?}")));
    }
    Ok(())
}

/// He-uniform for ReLU stacks; Xavier-uniform for attention and linear maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    He,
    Xavier,
}

pub(crate) fn init_uniform<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, init: Init, rng: &mut Rng) -> Tensor<T> {
    use rand::Rng as _;
    let limit = match init {
        Init::He => (6.0 / fan_in as f64).sqrt(),
        Init::Xavier => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| T::of(rng.random_range(-limit..=limit))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("shape product matches")
}

pub fn build_layer<T: Scalar>(spec: &LayerSpec, init: Init, rng: &mut Rng) -> Result<Box<dyn Layer<T>>> {
    spec.validate()?;
    Ok(match *spec {
        LayerSpec::Conv2d { in_channels, filters, kernel, stride } => {
            Box::new(Conv2d::new(in_channels, filters, kernel, stride, rng))
        }
        LayerSpec::Maxpool2d { window, stride } => Box::new(MaxPool2d::new(window, stride)),
        LayerSpec::GlobalAvgPool => Box::new(GlobalAvgPool::default()),
        LayerSpec::Dense { inputs, outputs } => Box::new(Dense::new(inputs, outputs, init, rng)),
        LayerSpec::Relu => Box::new(Relu::default()),
        LayerSpec::Gelu => Box::new(Gelu::default()),
        LayerSpec::Dropout { rate } => Box::new(Dropout::new(rate)),
        LayerSpec::Sigmoid => Box::new(Sigmoid::default()),
        LayerSpec::LayerNorm { dim } => Box::new(LayerNorm::new(dim)),
        LayerSpec::MultiheadAttention { hidden, heads } => {
            Box::new(MultiHeadAttention::new(hidden, heads, rng))
        }
        LayerSpec::FeedForward { hidden, inner } => Box::new(FeedForward::new(hidden, inner, rng)),
    })
}

/// Layers applied in order.
pub struct Sequential<T: Scalar> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Box<dyn Layer<T>>>) -> Self {
        Self { layers }
    }

    pub fn from_specs(specs: &[LayerSpec], init: Init, rng: &mut Rng) -> Result<Self> {
        Ok(Self::new(
            specs
                .iter()
                .map(|s| build_layer(s, init, rng))
                .collect::<Result<_>>()?,
        ))
    }

    pub fn layers(&self) -> &[Box<dyn Layer<T>>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer<T>>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }

    /// Output shape after each layer.
    pub fn shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shape = input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = l.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode, rng)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }
}

impl<T: Scalar> Module<T> for Sequential<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn kink_signature(&self, out: &mut Vec<u64>) {
        for l in &self.layers {
            l.kink_signature(out);
        }
    }
}

impl<T: Scalar> Module<T> for Box<dyn Layer<T>> {
    fn params(&self) -> Vec<&Param<T>> {
        (**self).params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        (**self).params_mut()
    }

    fn kink_signature(&self, out: &mut Vec<u64>) {
        (**self).kink_signature(out)
    }
}

/// Copy parameter values between models of identical structure, converting
/// the scalar type.
pub fn copy_params<A: Scalar, B: Scalar>(from: &[&Param<A>], to: &mut [&mut Param<B>]) -> Result<()> {
    if from.len() != to.len() {
        return Err(Error::Shape(format!(
            "{} source tensors for {} targets",
            from.len(),
            to.len()
        )));
    }
    for (i, (s, d)) in from.iter().zip(to.iter_mut()).enumerate() {
        check_shape(s.value.shape(), d.value.shape(), &format!("tensor {i}"))?;
        d.value = s.value.mapv(|v| B::of(v.to_f64()));
    }
    Ok(())
}
