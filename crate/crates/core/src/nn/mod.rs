//! Differentiable layer primitives with hand-written vector-Jacobian products.
//!
//! Tensors carry a leading batch axis: dense layers see `(batch, features)`,
//! convolution and pooling see `(batch, channels, height, width)`. Shapes in
//! [`LayerSpec`] are per-sample, i.e. without the batch axis.

mod conv;
mod dense;
mod pool;
mod stack;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use stack::{init_stack, stack_forward, stack_output_shape, stack_vjp};

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Arctan,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Arctan => z.atan(),
            Activation::Identity => z,
        }
    }

    /// Derivative at the pre-activation `z`. ReLU uses the subgradient 0 at 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
            Activation::Arctan => 1.0 / (1.0 + z * z),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Stride 1, "same" zero padding; `kernel` must be odd.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    /// `rate` is the drop probability.
    Dropout {
        rate: f64,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default = "identity")]
    pub activation: Activation,
}

fn identity() -> Activation {
    Activation::Identity
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense { inputs, outputs },
            activation,
        }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        activation: Activation,
    ) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            },
            activation,
        }
    }

    /// Non-overlapping max pooling (`stride == window`).
    pub fn max_pool(window: usize) -> Self {
        Self::max_pool_strided(window, window)
    }

    pub fn max_pool_strided(window: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::MaxPool2d { window, stride },
            activation: Activation::Identity,
        }
    }

    pub fn dropout(rate: f64) -> Self {
        Self {
            kind: LayerKind::Dropout { rate },
            activation: Activation::Identity,
        }
    }

    pub fn flatten() -> Self {
        Self {
            kind: LayerKind::Flatten,
            activation: Activation::Identity,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return bad(format!(
                        "dense layer needs nonzero widths, got {inputs}->{outputs}"
                    ));
                }
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                if in_channels == 0 || out_channels == 0 {
                    return bad("conv2d needs nonzero channel counts".into());
                }
                if kernel == 0 || kernel % 2 == 0 {
                    return bad(format!("conv2d kernel must be odd and >= 1, got {kernel}"));
                }
            }
            LayerKind::MaxPool2d { window, stride } => {
                if window == 0 || stride == 0 {
                    return bad("max pool window and stride must be >= 1".into());
                }
            }
            LayerKind::Dropout { rate } => {
                if !(0.0..=1.0).contains(&rate) {
                    return bad(format!("dropout rate {rate} outside [0, 1]"));
                }
            }
            LayerKind::Flatten => {}
        }
        if !self.has_params() && self.activation != Activation::Identity {
            return bad(format!("{:?} layers take no activation", self.kind));
        }
        Ok(())
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expect: &str| {
            Err(Error::Dimension(format!(
                "{:?} expects {expect}, got per-sample shape {input:?}",
                self.kind
            )))
        };
        match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return mismatch(&format!("[{inputs}]"));
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                ..
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return mismatch(&format!("[{in_channels}, h, w]"));
                }
                Ok(vec![out_channels, input[1], input[2]])
            }
            LayerKind::MaxPool2d { window, stride } => {
                if input.len() != 3 || input[1] < window || input[2] < window {
                    return mismatch(&format!("[c, h, w] with h, w >= {window}"));
                }
                Ok(vec![
                    input[0],
                    (input[1] - window) / stride + 1,
                    (input[2] - window) / stride + 1,
                ])
            }
            LayerKind::Dropout { .. } => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    fn param_shapes(&self) -> (Vec<usize>, Vec<usize>) {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => (vec![outputs, inputs], vec![outputs]),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => (
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ),
            _ => (vec![0], vec![0]),
        }
    }
}

/// Weights and bias of one layer. Parameter-free layers hold empty tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `(outputs, inputs)` for dense, `(out_channels, in_channels, k, k)` for conv.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn empty() -> Self {
        Self {
            weight: Tensor::zeros(IxDyn(&[0])),
            bias: Tensor::zeros(IxDyn(&[0])),
        }
    }

    pub fn zeros(spec: &LayerSpec) -> Self {
        let (w, b) = spec.param_shapes();
        Self {
            weight: Tensor::zeros(IxDyn(&w)),
            bias: Tensor::zeros(IxDyn(&b)),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and bias.
    pub fn init<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        if spec.has_params() {
            let bound = 1.0 / (spec.fan_in() as f64).sqrt();
            p.weight.mapv_inplace(|_| rng.random_range(-bound..=bound));
            p.bias.mapv_inplace(|_| rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.raw_dim()),
            bias: Tensor::zeros(self.bias.raw_dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }

    fn check(&self, spec: &LayerSpec) -> Result<()> {
        let (w, b) = spec.param_shapes();
        if self.weight.shape() != w.as_slice() || self.bias.shape() != b.as_slice() {
            return Err(Error::Dimension(format!(
                "{:?} expects weight {w:?} and bias {b:?}, got {:?} and {:?}",
                spec.kind,
                self.weight.shape(),
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

/// Uniform access to every trainable tensor of a parameter collection, in a
/// fixed order. Gradients use the same type as the parameters they belong to.
pub trait Params {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += a * other`.
    fn add_scaled(&mut self, a: f64, other: &Self) {
        for (x, y) in self.tensors_mut().into_iter().zip(other.tensors()) {
            x.scaled_add(a, y);
        }
    }

    fn scale(&mut self, a: f64) {
        for x in self.tensors_mut() {
            x.mapv_inplace(|v| v * a);
        }
    }

    /// All entries concatenated, for comparisons and norms.
    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect()
    }
}

impl Params for LayerParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl Params for Tensor {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![self]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![self]
    }
}

impl<P: Params> Params for Vec<P> {
    fn tensors(&self) -> Vec<&Tensor> {
        self.iter().flat_map(|p| p.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }
}

/// Everything a layer's VJP needs from its forward call.
#[derive(Debug, Clone)]
pub enum ForwardCache {
    Dense {
        input: ndarray::Array2<f64>,
        pre: ndarray::Array2<f64>,
    },
    Conv2d {
        /// im2col matrix, `(batch * h * w, in_channels * k * k)`.
        cols: ndarray::Array2<f64>,
        pre: Tensor,
    },
    MaxPool2d {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Dropout {
        /// Scaled keep mask; `None` when dropout was inactive.
        mask: Option<Tensor>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct VjpResult {
    pub grad_input: Tensor,
    pub grad_params: LayerParams,
}

fn check_input(spec: &LayerSpec, x: &Tensor) -> Result<()> {
    if x.ndim() < 2 {
        return Err(Error::Dimension(format!(
            "layer input needs a batch axis, got shape {:?}",
            x.shape()
        )));
    }
    spec.output_shape(&x.shape()[1..])?;
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite layer input ({bad}) into {:?}",
            spec.kind
        )));
    }
    Ok(())
}

/// Runs one layer on a batch. `rng` is drawn from only by active dropout.
pub fn layer_forward<R: Rng + ?Sized>(
    spec: &LayerSpec,
    params: &LayerParams,
    x: &Tensor,
    rng: &mut R,
    dropout_active: bool,
) -> Result<(Tensor, ForwardCache)> {
    spec.validate()?;
    check_input(spec, x)?;
    if spec.has_params() {
        params.check(spec)?;
    }
    match spec.kind {
        LayerKind::Dense { .. } => dense::forward(spec.activation, params, x),
        LayerKind::Conv2d { kernel, .. } => conv::forward(spec.activation, kernel, params, x),
        LayerKind::MaxPool2d { window, stride } => Ok(pool::forward(window, stride, x)),
        LayerKind::Dropout { rate } => {
            if !dropout_active || rate == 0.0 {
                return Ok((x.clone(), ForwardCache::Dropout { mask: None }));
            }
            let keep = 1.0 - rate;
            let mask = x.mapv(|_| {
                if keep == 0.0 || rng.random::<f64>() < rate {
                    0.0
                } else {
                    1.0 / keep
                }
            });
            Ok((x * &mask, ForwardCache::Dropout { mask: Some(mask) }))
        }
        LayerKind::Flatten => {
            let batch = x.shape()[0];
            let width: usize = x.shape()[1..].iter().product();
            let y = x
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&[batch, width]))
                .expect("flatten of standard layout");
            Ok((
                y,
                ForwardCache::Flatten {
                    input_shape: x.shape().to_vec(),
                },
            ))
        }
    }
}

/// Pulls `v` (shaped like the layer output) back through the layer.
pub fn layer_vjp(
    spec: &LayerSpec,
    params: &LayerParams,
    cache: &ForwardCache,
    v: &Tensor,
) -> Result<VjpResult> {
    let contract = || {
        Err(Error::Contract(format!(
            "forward cache does not belong to a {:?} layer",
            spec.kind
        )))
    };
    match (&spec.kind, cache) {
        (LayerKind::Dense { .. }, ForwardCache::Dense { input, pre }) => {
            params.check(spec)?;
            dense::vjp(spec.activation, params, input, pre, v)
        }
        (LayerKind::Conv2d { kernel, .. }, ForwardCache::Conv2d { cols, pre }) => {
            params.check(spec)?;
            conv::vjp(spec.activation, *kernel, params, cols, pre, v)
        }
        (
            LayerKind::MaxPool2d { .. },
            ForwardCache::MaxPool2d {
                argmax,
                input_shape,
            },
        ) => Ok(VjpResult {
            grad_input: pool::vjp(argmax, input_shape, v)?,
            grad_params: LayerParams::empty(),
        }),
        (LayerKind::Dropout { .. }, ForwardCache::Dropout { mask }) => {
            let grad_input = match mask {
                Some(m) => {
                    if m.shape() != v.shape() {
                        return Err(Error::Contract(
                            "dropout mask/cotangent shape mismatch".into(),
                        ));
                    }
                    v * m
                }
                None => v.clone(),
            };
            Ok(VjpResult {
                grad_input,
                grad_params: LayerParams::empty(),
            })
        }
        (LayerKind::Flatten, ForwardCache::Flatten { input_shape }) => {
            let grad_input = v
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(input_shape))
                .map_err(|e| Error::Contract(format!("flatten cotangent: {e}")))?;
            Ok(VjpResult {
                grad_input,
                grad_params: LayerParams::empty(),
            })
        }
        _ => contract(),
    }
}
