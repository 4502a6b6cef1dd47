//! The stochastic branch network.
//!
//! An optional projection stack maps the sensor values to the initial state
//! `A_0`, an Euler–Maruyama residual network carries it to `A_N`, and a final
//! projection stack flattens `A_N` into the branch coefficients. The backward
//! pass solves the discrete adjoint BSDE and returns Hamiltonian gradients.

use ndarray::{Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::{
    init_stack, stack_forward, stack_output_shape, stack_vjp, ForwardCache, LayerParams, LayerSpec,
    Params, Tensor,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffusionSpec {
    /// A trainable value per step: one scalar shared by the whole state, or
    /// one value per state entry. Initialized from `N(init_mean, init_std^2)`.
    Parameter {
        #[serde(default)]
        per_neuron: bool,
        init_mean: f64,
        init_std: f64,
    },
    /// State-dependent `sigma(A_n; theta_n)` computed by a layer stack.
    Network { layers: Vec<LayerSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    /// Per-sample sensor layout, e.g. `[100]` or `[1, 20, 20]`.
    pub input_shape: Vec<usize>,
    /// Number of Euler–Maruyama layers; the step is `h = 1 / steps`.
    pub steps: usize,
    #[serde(default)]
    pub pre_projection: Vec<LayerSpec>,
    /// Drift stack, instantiated once per step with its own parameters.
    pub drift: Vec<LayerSpec>,
    pub diffusion: DiffusionSpec,
    #[serde(default)]
    pub post_projection: Vec<LayerSpec>,
    /// Draw a fresh normal for `C_n` instead of reusing the forward increment.
    #[serde(default)]
    pub fresh_backward_noise: bool,
    /// Evaluate the state gradient of the Hamiltonian at `A_{n+1}` instead of `A_n`.
    #[serde(default)]
    pub paper_indexing: bool,
}

fn apply_shape(specs: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    if specs.is_empty() {
        Ok(input.to_vec())
    } else {
        stack_output_shape(specs, input)
    }
}

impl BranchConfig {
    pub fn h(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Shape of `A_n` (per sample).
    pub fn state_shape(&self) -> Result<Vec<usize>> {
        apply_shape(&self.pre_projection, &self.input_shape)
    }

    /// Width `p` of the flattened branch output.
    pub fn output_width(&self) -> Result<usize> {
        let out = apply_shape(&self.post_projection, &self.state_shape()?)?;
        match out.as_slice() {
            [p] => Ok(*p),
            other => Err(Error::Config(format!(
                "branch output must be flat, got per-sample shape {other:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("branch needs at least one step".into()));
        }
        if self.drift.is_empty() {
            return Err(Error::Config("drift stack is empty".into()));
        }
        let state = self.state_shape()?;
        let drift_out = stack_output_shape(&self.drift, &state)?;
        if drift_out != state {
            return Err(Error::Config(format!(
                "drift maps state {state:?} to {drift_out:?}; it must preserve the shape"
            )));
        }
        match &self.diffusion {
            DiffusionSpec::Parameter { init_std, .. } => {
                if !(*init_std >= 0.0) {
                    return Err(Error::Config("diffusion init std must be >= 0".into()));
                }
            }
            DiffusionSpec::Network { layers } => {
                if layers.is_empty() {
                    return Err(Error::Config("diffusion stack is empty".into()));
                }
                let out = stack_output_shape(layers, &state)?;
                if out != state {
                    return Err(Error::Config(format!(
                        "diffusion maps state {state:?} to {out:?}; it must preserve the shape"
                    )));
                }
            }
        }
        self.output_width()?;
        Ok(())
    }

    fn sigma_shape(&self) -> Result<Vec<usize>> {
        match self.diffusion {
            DiffusionSpec::Parameter {
                per_neuron: true, ..
            } => self.state_shape(),
            _ => Ok(vec![1]),
        }
    }
}

/// Trainable branch parameters. `sigma` is used in parameter mode,
/// `diffusion_net` in network mode; the other is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchParams {
    pub pre: Vec<LayerParams>,
    pub drift: Vec<Vec<LayerParams>>,
    pub sigma: Vec<Tensor>,
    pub diffusion_net: Vec<Vec<LayerParams>>,
    pub post: Vec<LayerParams>,
}

impl Params for BranchParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.pre.tensors();
        out.extend(self.drift.tensors());
        out.extend(self.sigma.tensors());
        out.extend(self.diffusion_net.tensors());
        out.extend(self.post.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.pre.tensors_mut();
        out.extend(self.drift.tensors_mut());
        out.extend(self.sigma.tensors_mut());
        out.extend(self.diffusion_net.tensors_mut());
        out.extend(self.post.tensors_mut());
        out
    }
}

impl BranchParams {
    pub fn init<R: Rng + ?Sized>(cfg: &BranchConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let pre = init_stack(&cfg.pre_projection, rng);
        let drift = (0..cfg.steps)
            .map(|_| init_stack(&cfg.drift, rng))
            .collect();
        let (sigma, diffusion_net) = match &cfg.diffusion {
            DiffusionSpec::Parameter {
                init_mean,
                init_std,
                ..
            } => {
                let normal = Normal::new(*init_mean, *init_std)
                    .map_err(|e| Error::Config(format!("diffusion init: {e}")))?;
                let shape = cfg.sigma_shape()?;
                let sigma = (0..cfg.steps)
                    .map(|_| Tensor::from_shape_fn(IxDyn(&shape), |_| normal.sample(rng)))
                    .collect();
                (sigma, vec![])
            }
            DiffusionSpec::Network { layers } => (
                vec![],
                (0..cfg.steps).map(|_| init_stack(layers, rng)).collect(),
            ),
        };
        let post = init_stack(&cfg.post_projection, rng);
        Ok(Self {
            pre,
            drift,
            sigma,
            diffusion_net,
            post,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<LayerParams>| v.iter().map(LayerParams::zeros_like).collect::<Vec<_>>();
        Self {
            pre: z(&self.pre),
            drift: self.drift.iter().map(z).collect(),
            sigma: self
                .sigma
                .iter()
                .map(|s| Tensor::zeros(s.raw_dim()))
                .collect(),
            diffusion_net: self.diffusion_net.iter().map(z).collect(),
            post: z(&self.post),
        }
    }

    /// Zeroes every diffusion parameter, making the branch deterministic.
    pub fn zero_diffusion(&mut self) {
        self.sigma.iter_mut().for_each(|s| s.fill(0.0));
        for stack in &mut self.diffusion_net {
            for p in stack {
                p.weight.fill(0.0);
                p.bias.fill(0.0);
            }
        }
    }

    /// Multiplies every diffusion parameter by `a`. In network mode only the
    /// last parameterized layer is scaled.
    pub fn scale_diffusion(&mut self, a: f64) {
        self.sigma
            .iter_mut()
            .for_each(|s| s.mapv_inplace(|v| v * a));
        for stack in &mut self.diffusion_net {
            if let Some(p) = stack.iter_mut().rev().find(|p| !p.weight.is_empty()) {
                p.weight.mapv_inplace(|v| v * a);
                p.bias.mapv_inplace(|v| v * a);
            }
        }
    }

    pub fn check(&self, cfg: &BranchConfig) -> Result<()> {
        let n = cfg.steps;
        let (want_sigma, want_net) = match cfg.diffusion {
            DiffusionSpec::Parameter { .. } => (n, 0),
            DiffusionSpec::Network { .. } => (0, n),
        };
        let bad = self.drift.len() != n
            || self.sigma.len() != want_sigma
            || self.diffusion_net.len() != want_net
            || self.pre.len() != cfg.pre_projection.len()
            || self.post.len() != cfg.post_projection.len();
        if bad {
            return Err(Error::Contract(
                "branch parameters do not match the branch config".into(),
            ));
        }
        let shape = cfg.sigma_shape()?;
        if self.sigma.iter().any(|s| s.shape() != shape.as_slice()) {
            return Err(Error::Contract(format!(
                "diffusion parameters must have shape {shape:?}"
            )));
        }
        Ok(())
    }
}

/// Forward record of one batch through the branch.
#[derive(Debug, Clone)]
pub struct SdeTrajectory {
    pub pre_caches: Vec<ForwardCache>,
    /// `A_0 .. A_N`, each with a leading batch axis.
    pub states: Vec<Tensor>,
    /// Standard normal increments `omega_0 .. omega_{N-1}`.
    pub increments: Vec<Tensor>,
    pub drift_caches: Vec<Vec<ForwardCache>>,
    pub diffusion_caches: Vec<Vec<ForwardCache>>,
    pub post_caches: Vec<ForwardCache>,
    /// Branch coefficients, `(batch, p)`.
    pub output: Tensor,
}

/// Backward record: `b[n]` is `B_n` for `n = 0..=N`, `c[n]` is `C_n`.
#[derive(Debug, Clone)]
pub struct AdjointPath {
    pub b: Vec<Tensor>,
    pub c: Vec<Tensor>,
    /// Summed over the batch.
    pub grads: BranchParams,
}

fn run_stack<R: Rng + ?Sized>(
    specs: &[LayerSpec],
    params: &[LayerParams],
    x: &Tensor,
    rng: &mut R,
    dropout: bool,
) -> Result<(Tensor, Vec<ForwardCache>)> {
    if specs.is_empty() {
        Ok((x.clone(), vec![]))
    } else {
        stack_forward(specs, params, x, rng, dropout)
    }
}

fn pull_stack(
    specs: &[LayerSpec],
    params: &[LayerParams],
    caches: &[ForwardCache],
    v: &Tensor,
) -> Result<(Tensor, Vec<LayerParams>)> {
    if specs.is_empty() {
        Ok((v.clone(), vec![]))
    } else {
        stack_vjp(specs, params, caches, v)
    }
}

fn batch_shape(batch: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = vec![batch];
    s.extend_from_slice(per_sample);
    s
}

/// Applies the pre-projection stack; identity when there is none.
pub fn encode_input<R: Rng + ?Sized>(
    input: &Tensor,
    params: &BranchParams,
    cfg: &BranchConfig,
    rng: &mut R,
    dropout: bool,
) -> Result<(Tensor, Vec<ForwardCache>)> {
    if input.ndim() == 0 || input.shape()[1..] != cfg.input_shape[..] {
        return Err(Error::Config(format!(
            "branch expects per-sample input {:?}, got batch shape {:?}",
            cfg.input_shape,
            input.shape()
        )));
    }
    run_stack(&cfg.pre_projection, &params.pre, input, rng, dropout)
}

enum Noise<'a, R: ?Sized> {
    Draw(&'a mut R),
    Given(&'a [Tensor]),
}

fn propagate<R: Rng + ?Sized>(
    a0: Tensor,
    params: &BranchParams,
    cfg: &BranchConfig,
    mut noise: Noise<'_, R>,
    mask_rng: &mut dyn rand::RngCore,
    dropout: bool,
) -> Result<(
    Vec<Tensor>,
    Vec<Tensor>,
    Vec<Vec<ForwardCache>>,
    Vec<Vec<ForwardCache>>,
)> {
    let h = cfg.h();
    let sqrt_h = h.sqrt();
    let mut states = Vec::with_capacity(cfg.steps + 1);
    let mut increments = Vec::with_capacity(cfg.steps);
    let mut drift_caches = Vec::with_capacity(cfg.steps);
    let mut diffusion_caches = Vec::with_capacity(cfg.steps);
    states.push(a0);
    for n in 0..cfg.steps {
        let a = &states[n];
        let (mu, dc) = stack_forward(&cfg.drift, &params.drift[n], a, mask_rng, dropout)?;
        let omega = match &mut noise {
            Noise::Draw(rng) => {
                Tensor::from_shape_fn(a.raw_dim(), |_| StandardNormal.sample(&mut **rng))
            }
            Noise::Given(w) => {
                let w = w
                    .get(n)
                    .ok_or_else(|| Error::Contract(format!("no increment for step {n}")))?;
                if w.shape() != a.shape() {
                    return Err(Error::Contract(
                        "increment shape differs from the state".into(),
                    ));
                }
                w.clone()
            }
        };
        let noise_term = match &cfg.diffusion {
            DiffusionSpec::Parameter { .. } => &omega * &params.sigma[n],
            DiffusionSpec::Network { layers } => {
                let (sigma, sc) =
                    stack_forward(layers, &params.diffusion_net[n], a, mask_rng, dropout)?;
                diffusion_caches.push(sc);
                &omega * &sigma
            }
        };
        let mut next = a + &(mu * h);
        next.scaled_add(sqrt_h, &noise_term);
        if let Some(v) = next.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite branch state ({v}) after step {n}"
            )));
        }
        drift_caches.push(dc);
        increments.push(omega);
        states.push(next);
    }
    Ok((states, increments, drift_caches, diffusion_caches))
}

/// Full branch forward: encode, Euler–Maruyama steps with fresh increments
/// drawn from `rng`, post-projection. Dropout masks also come from `rng`.
pub fn forward_branch<R: Rng>(
    input: &Tensor,
    params: &BranchParams,
    cfg: &BranchConfig,
    rng: &mut R,
    dropout: bool,
) -> Result<SdeTrajectory> {
    params.check(cfg)?;
    let (a0, pre_caches) = encode_input(input, params, cfg, rng, dropout)?;
    let mut mask_rng = ChaCha8Rng::from_rng(&mut *rng);
    let (states, increments, drift_caches, diffusion_caches) =
        propagate(a0, params, cfg, Noise::Draw(rng), &mut mask_rng, dropout)?;
    finish(
        params,
        cfg,
        pre_caches,
        states,
        increments,
        drift_caches,
        diffusion_caches,
        &mut mask_rng,
        dropout,
    )
}

/// Same as [`forward_branch`] but reuses stored increments, so a trajectory
/// can be replayed exactly (or perturbed in its parameters on a fixed path).
/// `rng` only feeds dropout.
pub fn replay_branch<R: Rng>(
    input: &Tensor,
    params: &BranchParams,
    cfg: &BranchConfig,
    increments: &[Tensor],
    rng: &mut R,
    dropout: bool,
) -> Result<SdeTrajectory> {
    params.check(cfg)?;
    let (a0, pre_caches) = encode_input(input, params, cfg, rng, dropout)?;
    let mut mask_rng = ChaCha8Rng::from_rng(&mut *rng);
    let (states, increments, drift_caches, diffusion_caches) = propagate::<R>(
        a0,
        params,
        cfg,
        Noise::Given(increments),
        &mut mask_rng,
        dropout,
    )?;
    finish(
        params,
        cfg,
        pre_caches,
        states,
        increments,
        drift_caches,
        diffusion_caches,
        &mut mask_rng,
        dropout,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    params: &BranchParams,
    cfg: &BranchConfig,
    pre_caches: Vec<ForwardCache>,
    states: Vec<Tensor>,
    increments: Vec<Tensor>,
    drift_caches: Vec<Vec<ForwardCache>>,
    diffusion_caches: Vec<Vec<ForwardCache>>,
    rng: &mut ChaCha8Rng,
    dropout: bool,
) -> Result<SdeTrajectory> {
    let last = states.last().expect("at least one state");
    let (out, post_caches) = run_stack(&cfg.post_projection, &params.post, last, rng, dropout)?;
    let batch = out.shape()[0];
    let width: usize = out.shape()[1..].iter().product();
    let output = out
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[batch, width]))
        .map_err(|e| Error::Dimension(format!("branch output: {e}")))?;
    Ok(SdeTrajectory {
        pre_caches,
        states,
        increments,
        drift_caches,
        diffusion_caches,
        post_caches,
        output,
    })
}

/// Discrete adjoint BSDE for one batch.
///
/// `b_terminal` is `dPhi/dbeta`, shaped like `traj.output`. It is pulled back
/// through the post-projection with `C = 0`, then for `n = N-1 .. 0`
///
/// ```text
/// C_n       = B_{n+1} * omega_n / sqrt(h)
/// grad_a H  = mu_a^T B_{n+1} + sigma_a^T C_n
/// B_n       = B_{n+1} + h grad_a H
/// g_theta_n = h (mu_theta^T B_{n+1} + sigma_theta^T C_n)
/// ```
///
/// Reusing the forward increments makes the result the exact derivative of the
/// loss along the sampled path. `rng` is drawn from only when
/// `fresh_backward_noise` is set.
pub fn backward_adjoint<R: Rng + ?Sized>(
    traj: &SdeTrajectory,
    params: &BranchParams,
    cfg: &BranchConfig,
    b_terminal: &Tensor,
    rng: &mut R,
) -> Result<AdjointPath> {
    params.check(cfg)?;
    let n_steps = cfg.steps;
    if traj.states.len() != n_steps + 1
        || traj.increments.len() != n_steps
        || traj.drift_caches.len() != n_steps
    {
        return Err(Error::Contract(
            "trajectory does not match the branch config".into(),
        ));
    }
    if b_terminal.shape() != traj.output.shape() {
        return Err(Error::Contract(format!(
            "terminal adjoint {:?} does not match branch output {:?}",
            b_terminal.shape(),
            traj.output.shape()
        )));
    }
    let h = cfg.h();
    let sqrt_h = h.sqrt();
    let last_shape = traj.states[n_steps].shape().to_vec();
    let post_out_shape = {
        let mut s = vec![last_shape[0]];
        s.extend(apply_shape(&cfg.post_projection, &last_shape[1..])?);
        s
    };
    let v = b_terminal
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&post_out_shape))
        .map_err(|e| Error::Contract(format!("terminal adjoint: {e}")))?;
    let (b_final, post_grads) =
        pull_stack(&cfg.post_projection, &params.post, &traj.post_caches, &v)?;

    let mut grads = params.zeros_like();
    if !post_grads.is_empty() {
        grads.post = post_grads;
    }
    let mut b = vec![Tensor::zeros(IxDyn(&[0])); n_steps + 1];
    let mut c = vec![Tensor::zeros(IxDyn(&[0])); n_steps];
    b[n_steps] = b_final;
    // dropout is off for the re-evaluation, so this stream is never drawn from
    let mut no_masks = ChaCha8Rng::seed_from_u64(0);

    for n in (0..n_steps).rev() {
        let b_next = &b[n + 1];
        let eps = if cfg.fresh_backward_noise {
            Tensor::from_shape_fn(b_next.raw_dim(), |_| StandardNormal.sample(rng))
        } else {
            traj.increments[n].clone()
        };
        let c_n = b_next * &eps / sqrt_h;

        // parameter gradients at A_n, with the stored caches
        let (mu_a, mu_theta) =
            stack_vjp(&cfg.drift, &params.drift[n], &traj.drift_caches[n], b_next)?;
        let mut grad_a = mu_a;
        let mut g_drift = mu_theta;
        g_drift.iter_mut().for_each(|g| g.scale(h));
        grads.drift[n] = g_drift;
        match &cfg.diffusion {
            DiffusionSpec::Parameter { per_neuron, .. } => {
                let mut g = c_n.sum_axis(Axis(0));
                if !per_neuron {
                    g = Tensor::from_elem(IxDyn(&[1]), g.sum());
                }
                grads.sigma[n] = g * h;
            }
            DiffusionSpec::Network { layers } => {
                let (sig_a, sig_theta) = stack_vjp(
                    layers,
                    &params.diffusion_net[n],
                    &traj.diffusion_caches[n],
                    &c_n,
                )?;
                grad_a += &sig_a;
                let mut g = sig_theta;
                g.iter_mut().for_each(|p| p.scale(h));
                grads.diffusion_net[n] = g;
            }
        }

        if cfg.paper_indexing {
            let a_next = &traj.states[n + 1];
            let (_, dc) =
                stack_forward(&cfg.drift, &params.drift[n], a_next, &mut no_masks, false)?;
            grad_a = stack_vjp(&cfg.drift, &params.drift[n], &dc, b_next)?.0;
            if let DiffusionSpec::Network { layers } = &cfg.diffusion {
                let (_, sc) = stack_forward(
                    layers,
                    &params.diffusion_net[n],
                    a_next,
                    &mut no_masks,
                    false,
                )?;
                grad_a += &stack_vjp(layers, &params.diffusion_net[n], &sc, &c_n)?.0;
            }
        }

        let mut b_n = b_next.clone();
        b_n.scaled_add(h, &grad_a);
        b[n] = b_n;
        c[n] = c_n;
    }

    if !cfg.pre_projection.is_empty() {
        grads.pre = pull_stack(&cfg.pre_projection, &params.pre, &traj.pre_caches, &b[0])?.1;
    }
    Ok(AdjointPath { b, c, grads })
}

/// Per-sample shape helper for callers building inputs.
pub fn input_batch_shape(cfg: &BranchConfig, batch: usize) -> Vec<usize> {
    batch_shape(batch, &cfg.input_shape)
}
