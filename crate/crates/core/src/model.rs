//! Branch–trunk operator models: the stochastic operator network and the
//! plain DeepONet baseline.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branch::{backward_adjoint, forward_branch, BranchConfig, BranchParams, SdeTrajectory};
use crate::nn::{
    init_stack, stack_forward, stack_output_shape, stack_vjp, ForwardCache, LayerParams, LayerSpec,
    Params, Tensor,
};
use crate::oracles::OperatorDataset;
use crate::{Error, Result};

/// Anything that maps input functions and query points to (possibly random) outputs.
pub trait Predictor: Sync {
    /// Per-sample branch input shape.
    fn input_shape(&self) -> &[usize];
    fn query_dim(&self) -> usize;
    fn d_out(&self) -> usize;

    /// One prediction per row: `u` is `(batch, input_shape..)`, `y` is `(batch, query_dim)`.
    /// Every row gets its own noise realization.
    fn predict(&self, u: &Tensor, y: &Array2<f64>, rng: &mut ChaCha8Rng) -> Result<Array2<f64>>;

    /// Evaluates every input function on the whole grid `y`, drawing one noise
    /// realization per function, shaped `(functions, grid, d_out)`.
    fn predict_grid(
        &self,
        u: &Tensor,
        y: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array3<f64>>;
}

/// A trainable [`Predictor`].
pub trait Operator: Predictor + Clone + Send {
    type Params: Params + Clone + Send + Sync;

    fn params(&self) -> &Self::Params;
    fn params_mut(&mut self) -> &mut Self::Params;
    /// Zero-valued parameter set with the model's shapes.
    fn zero_grads(&self) -> Self::Params;

    /// Returns the summed per-sample loss and the gradient of `weight * sum`.
    fn loss_and_grad(
        &self,
        u: &Tensor,
        y: &Array2<f64>,
        target: ArrayView2<f64>,
        weight: f64,
        rng: &mut ChaCha8Rng,
        dropout: bool,
    ) -> Result<(f64, Self::Params)>;
}

/// Branch coefficients `beta` (batch, p) and trunk outputs `tau` (batch, p * d_out)
/// combined as `value_d = sum_k beta_k tau_{d p + k} + b0`.
pub fn combine(
    beta: &Array2<f64>,
    tau: &Array2<f64>,
    b0: f64,
    d_out: usize,
) -> Result<Array2<f64>> {
    let (batch, p) = beta.dim();
    if tau.dim() != (batch, p * d_out) {
        return Err(Error::Dimension(format!(
            "beta {:?} and tau {:?} do not combine into {d_out} outputs",
            beta.dim(),
            tau.dim()
        )));
    }
    let mut out = Array2::from_elem((batch, d_out), b0);
    for d in 0..d_out {
        let block = tau.slice(ndarray::s![.., d * p..(d + 1) * p]);
        let dots = (&block * beta).sum_axis(Axis(1));
        out.column_mut(d).scaled_add(1.0, &dots);
    }
    Ok(out)
}

/// `(functions, p)` coefficients against a `(grid, p * d_out)` trunk, giving
/// `(functions, grid, d_out)`.
pub fn combine_grid(
    beta: &Array2<f64>,
    tau: &Array2<f64>,
    b0: f64,
    d_out: usize,
) -> Result<Array3<f64>> {
    let p = beta.ncols();
    if tau.ncols() != p * d_out {
        return Err(Error::Dimension(format!(
            "beta width {p} and tau width {} do not combine into {d_out} outputs",
            tau.ncols()
        )));
    }
    let mut out = Array3::from_elem((beta.nrows(), tau.nrows(), d_out), b0);
    for d in 0..d_out {
        let block = tau.slice(ndarray::s![.., d * p..(d + 1) * p]);
        let v = beta.dot(&block.t());
        let mut dst = out.index_axis_mut(Axis(2), d);
        dst += &v;
    }
    Ok(out)
}

/// Per-sample mean squared error over the output dimensions and its
/// gradients with respect to `beta`, `tau` and `b0`.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub loss: Array1<f64>,
    pub grad_beta: Array2<f64>,
    pub grad_tau: Array2<f64>,
    pub grad_b0: Array1<f64>,
}

pub fn loss_and_terminal(
    beta: &Array2<f64>,
    tau: &Array2<f64>,
    value: &Array2<f64>,
    target: ArrayView2<f64>,
) -> Result<LossTerms> {
    let (batch, d_out) = value.dim();
    let p = beta.ncols();
    if target.dim() != value.dim() {
        return Err(Error::Dimension(format!(
            "target {:?} does not match prediction {:?}",
            target.dim(),
            value.dim()
        )));
    }
    let diff = value - &target;
    let loss = diff.mapv(|v| v * v).sum_axis(Axis(1)) / d_out as f64;
    let e = diff * (2.0 / d_out as f64);
    let mut grad_beta = Array2::zeros((batch, p));
    let mut grad_tau = Array2::zeros((batch, p * d_out));
    for d in 0..d_out {
        let ed = e.column(d).insert_axis(Axis(1));
        let block = tau.slice(ndarray::s![.., d * p..(d + 1) * p]);
        grad_beta += &(&block * &ed);
        grad_tau
            .slice_mut(ndarray::s![.., d * p..(d + 1) * p])
            .assign(&(beta * &ed));
    }
    Ok(LossTerms {
        loss,
        grad_beta,
        grad_tau,
        grad_b0: e.sum_axis(Axis(1)),
    })
}

fn to_matrix(t: Tensor) -> Result<Array2<f64>> {
    t.into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::Dimension(format!("expected a (batch, width) tensor: {e}")))
}

pub fn trunk_forward(
    specs: &[LayerSpec],
    params: &[LayerParams],
    y: &Array2<f64>,
) -> Result<(Array2<f64>, Vec<ForwardCache>)> {
    // the trunk has no dropout, so this stream is never drawn from
    let mut unused = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let (tau, caches) = stack_forward(specs, params, &y.clone().into_dyn(), &mut unused, false)?;
    Ok((to_matrix(tau)?, caches))
}

fn check_trunk(trunk: &[LayerSpec], query_dim: usize, width: usize) -> Result<()> {
    let out = stack_output_shape(trunk, &[query_dim])?;
    if out != [width] {
        return Err(Error::Config(format!(
            "trunk maps {query_dim} inputs to {out:?}, expected [{width}]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SonConfig {
    pub branch: BranchConfig,
    pub trunk: Vec<LayerSpec>,
    pub query_dim: usize,
    pub d_out: usize,
    /// Dropout in the diffusion stack during prediction (training always uses it).
    #[serde(default = "yes")]
    pub dropout_at_inference: bool,
}

fn yes() -> bool {
    true
}

impl SonConfig {
    pub fn validate(&self) -> Result<()> {
        self.branch.validate()?;
        if self.d_out == 0 {
            return Err(Error::Config("d_out must be positive".into()));
        }
        check_trunk(
            &self.trunk,
            self.query_dim,
            self.branch.output_width()? * self.d_out,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SonParams {
    pub branch: BranchParams,
    pub trunk: Vec<LayerParams>,
    /// Scalar output bias, stored as a length-1 tensor.
    pub b0: Tensor,
}

impl Params for SonParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.branch.tensors();
        out.extend(self.trunk.tensors());
        out.push(&self.b0);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.branch.tensors_mut();
        out.extend(self.trunk.tensors_mut());
        out.push(&mut self.b0);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SonModel {
    pub config: SonConfig,
    pub params: SonParams,
}

/// A full SON forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub value: Array2<f64>,
    pub beta: Array2<f64>,
    pub tau: Array2<f64>,
    pub trajectory: SdeTrajectory,
    pub trunk_caches: Vec<ForwardCache>,
}

impl SonModel {
    pub fn init<R: Rng + ?Sized>(config: SonConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let branch = BranchParams::init(&config.branch, rng)?;
        let trunk = init_stack(&config.trunk, rng);
        Ok(Self {
            config,
            params: SonParams {
                branch,
                trunk,
                b0: Tensor::zeros(IxDyn(&[1])),
            },
        })
    }

    pub fn b0(&self) -> f64 {
        self.params.b0[[0]]
    }

    pub fn forward(
        &self,
        u: &Tensor,
        y: &Array2<f64>,
        rng: &mut ChaCha8Rng,
        dropout: bool,
    ) -> Result<Prediction> {
        if u.shape()[0] != y.nrows() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} queries",
                u.shape()[0],
                y.nrows()
            )));
        }
        let trajectory = forward_branch(u, &self.params.branch, &self.config.branch, rng, dropout)?;
        let beta = to_matrix(trajectory.output.clone())?;
        let (tau, trunk_caches) = trunk_forward(&self.config.trunk, &self.params.trunk, y)?;
        let value = combine(&beta, &tau, self.b0(), self.config.d_out)?;
        Ok(Prediction {
            value,
            beta,
            tau,
            trajectory,
            trunk_caches,
        })
    }
}

impl Predictor for SonModel {
    fn input_shape(&self) -> &[usize] {
        &self.config.branch.input_shape
    }

    fn query_dim(&self) -> usize {
        self.config.query_dim
    }

    fn d_out(&self) -> usize {
        self.config.d_out
    }

    fn predict(&self, u: &Tensor, y: &Array2<f64>, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        Ok(self
            .forward(u, y, rng, self.config.dropout_at_inference)?
            .value)
    }

    fn predict_grid(
        &self,
        u: &Tensor,
        y: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array3<f64>> {
        let traj = forward_branch(
            u,
            &self.params.branch,
            &self.config.branch,
            rng,
            self.config.dropout_at_inference,
        )?;
        let beta = to_matrix(traj.output)?;
        let (tau, _) = trunk_forward(&self.config.trunk, &self.params.trunk, y)?;
        combine_grid(&beta, &tau, self.b0(), self.config.d_out)
    }
}

impl Operator for SonModel {
    type Params = SonParams;

    fn params(&self) -> &SonParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut SonParams {
        &mut self.params
    }

    fn zero_grads(&self) -> SonParams {
        SonParams {
            branch: self.params.branch.zeros_like(),
            trunk: self
                .params
                .trunk
                .iter()
                .map(LayerParams::zeros_like)
                .collect(),
            b0: Tensor::zeros(IxDyn(&[1])),
        }
    }

    /// Branch gradients come from the adjoint BSDE; trunk and bias gradients
    /// are ordinary reverse-mode derivatives of the loss.
    fn loss_and_grad(
        &self,
        u: &Tensor,
        y: &Array2<f64>,
        target: ArrayView2<f64>,
        weight: f64,
        rng: &mut ChaCha8Rng,
        dropout: bool,
    ) -> Result<(f64, SonParams)> {
        let pred = self.forward(u, y, rng, dropout)?;
        let terms = loss_and_terminal(&pred.beta, &pred.tau, &pred.value, target)?;
        let b_terminal = (terms.grad_beta * weight).into_dyn();
        let adjoint = backward_adjoint(
            &pred.trajectory,
            &self.params.branch,
            &self.config.branch,
            &b_terminal,
            rng,
        )?;
        let (_, trunk) = stack_vjp(
            &self.config.trunk,
            &self.params.trunk,
            &pred.trunk_caches,
            &(terms.grad_tau * weight).into_dyn(),
        )?;
        let b0 = Tensor::from_elem(IxDyn(&[1]), terms.grad_b0.sum() * weight);
        Ok((
            terms.loss.sum(),
            SonParams {
                branch: adjoint.grads,
                trunk,
                b0,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepOnetConfig {
    pub input_shape: Vec<usize>,
    pub branch: Vec<LayerSpec>,
    pub trunk: Vec<LayerSpec>,
    pub query_dim: usize,
    pub d_out: usize,
}

impl DeepOnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_out == 0 {
            return Err(Error::Config("d_out must be positive".into()));
        }
        let p = match stack_output_shape(&self.branch, &self.input_shape)?.as_slice() {
            [p] => *p,
            other => {
                return Err(Error::Config(format!(
                    "baseline branch output must be flat, got {other:?}"
                )))
            }
        };
        check_trunk(&self.trunk, self.query_dim, p * self.d_out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepOnetParams {
    pub branch: Vec<LayerParams>,
    pub trunk: Vec<LayerParams>,
    pub b0: Tensor,
}

impl Params for DeepOnetParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.branch.tensors();
        out.extend(self.trunk.tensors());
        out.push(&self.b0);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.branch.tensors_mut();
        out.extend(self.trunk.tensors_mut());
        out.push(&mut self.b0);
        out
    }
}

/// Deterministic DeepONet trained by plain backpropagation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepOnet {
    pub config: DeepOnetConfig,
    pub params: DeepOnetParams,
}

impl DeepOnet {
    pub fn init<R: Rng + ?Sized>(config: DeepOnetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let branch = init_stack(&config.branch, rng);
        let trunk = init_stack(&config.trunk, rng);
        Ok(Self {
            config,
            params: DeepOnetParams {
                branch,
                trunk,
                b0: Tensor::zeros(IxDyn(&[1])),
            },
        })
    }

    fn forward(
        &self,
        u: &Tensor,
        y: &Array2<f64>,
        rng: &mut ChaCha8Rng,
        dropout: bool,
    ) -> Result<(
        Array2<f64>,
        Array2<f64>,
        Array2<f64>,
        Vec<ForwardCache>,
        Vec<ForwardCache>,
    )> {
        if u.shape()[0] != y.nrows() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} queries",
                u.shape()[0],
                y.nrows()
            )));
        }
        let (beta, bc) = stack_forward(&self.config.branch, &self.params.branch, u, rng, dropout)?;
        let beta = to_matrix(beta)?;
        let (tau, tc) = trunk_forward(&self.config.trunk, &self.params.trunk, y)?;
        let value = combine(&beta, &tau, self.params.b0[[0]], self.config.d_out)?;
        Ok((value, beta, tau, bc, tc))
    }
}

impl Predictor for DeepOnet {
    fn input_shape(&self) -> &[usize] {
        &self.config.input_shape
    }

    fn query_dim(&self) -> usize {
        self.config.query_dim
    }

    fn d_out(&self) -> usize {
        self.config.d_out
    }

    fn predict(&self, u: &Tensor, y: &Array2<f64>, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        Ok(self.forward(u, y, rng, false)?.0)
    }

    fn predict_grid(
        &self,
        u: &Tensor,
        y: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array3<f64>> {
        let (beta, _) = stack_forward(&self.config.branch, &self.params.branch, u, rng, false)?;
        let (tau, _) = trunk_forward(&self.config.trunk, &self.params.trunk, y)?;
        combine_grid(
            &to_matrix(beta)?,
            &tau,
            self.params.b0[[0]],
            self.config.d_out,
        )
    }
}

impl Operator for DeepOnet {
    type Params = DeepOnetParams;

    fn params(&self) -> &DeepOnetParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut DeepOnetParams {
        &mut self.params
    }

    fn zero_grads(&self) -> DeepOnetParams {
        DeepOnetParams {
            branch: self
                .params
                .branch
                .iter()
                .map(LayerParams::zeros_like)
                .collect(),
            trunk: self
                .params
                .trunk
                .iter()
                .map(LayerParams::zeros_like)
                .collect(),
            b0: Tensor::zeros(IxDyn(&[1])),
        }
    }

    fn loss_and_grad(
        &self,
        u: &Tensor,
        y: &Array2<f64>,
        target: ArrayView2<f64>,
        weight: f64,
        rng: &mut ChaCha8Rng,
        dropout: bool,
    ) -> Result<(f64, DeepOnetParams)> {
        let (value, beta, tau, bc, tc) = self.forward(u, y, rng, dropout)?;
        let terms = loss_and_terminal(&beta, &tau, &value, target)?;
        let (_, branch) = stack_vjp(
            &self.config.branch,
            &self.params.branch,
            &bc,
            &(terms.grad_beta * weight).into_dyn(),
        )?;
        let (_, trunk) = stack_vjp(
            &self.config.trunk,
            &self.params.trunk,
            &tc,
            &(terms.grad_tau * weight).into_dyn(),
        )?;
        let b0 = Tensor::from_elem(IxDyn(&[1]), terms.grad_b0.sum() * weight);
        Ok((terms.loss.sum(), DeepOnetParams { branch, trunk, b0 }))
    }
}

/// Either model, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum AnyModel {
    Son(SonModel),
    Baseline(DeepOnet),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    #[serde(flatten)]
    pub model: AnyModel,
}

impl Checkpoint {
    /// JSON with shortest round-trip float formatting, so loading is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        match &ck.model {
            AnyModel::Son(m) => {
                m.config.validate()?;
                m.params.branch.check(&m.config.branch)?;
            }
            AnyModel::Baseline(m) => m.config.validate()?,
        }
        Ok(ck)
    }
}

/// Branch inputs for the listed samples, shaped `(len, input_shape..)`.
pub fn gather_inputs(
    ds: &OperatorDataset,
    samples: &[usize],
    input_shape: &[usize],
) -> Result<Tensor> {
    let m = ds.functions.ncols();
    if input_shape.iter().product::<usize>() != m {
        return Err(Error::Config(format!(
            "model expects input {input_shape:?} but the dataset has {m} sensors"
        )));
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(input_shape);
    let mut data = Vec::with_capacity(samples.len() * m);
    for &s in samples {
        data.extend(ds.functions.row(ds.function_index[s]).iter());
    }
    Tensor::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Dimension(e.to_string()))
}

pub fn gather_rows(a: &Array2<f64>, samples: &[usize]) -> Array2<f64> {
    a.select(Axis(0), samples)
}

/// Checks that a model and a dataset agree on sensors, queries and outputs.
pub fn check_compatible<M: Predictor + ?Sized>(model: &M, ds: &OperatorDataset) -> Result<()> {
    let m: usize = model.input_shape().iter().product();
    if m != ds.functions.ncols()
        || model.query_dim() != ds.query_dim()
        || model.d_out() != ds.d_out()
    {
        return Err(Error::Config(format!(
            "model (sensors {m}, query dim {}, outputs {}) does not fit dataset (sensors {}, query dim {}, outputs {})",
            model.query_dim(),
            model.d_out(),
            ds.functions.ncols(),
            ds.query_dim(),
            ds.d_out()
        )));
    }
    Ok(())
}
