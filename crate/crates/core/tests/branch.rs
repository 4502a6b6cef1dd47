use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use son_core::branch::{
    backward_adjoint, encode_input, forward_branch, replay_branch, BranchConfig, BranchParams,
    DiffusionSpec,
};
use son_core::nn::{Activation, LayerSpec, Params, Tensor};
use son_core::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dense_config(
    width: usize,
    steps: usize,
    act: Activation,
    diffusion: DiffusionSpec,
) -> BranchConfig {
    BranchConfig {
        input_shape: vec![width],
        steps,
        pre_projection: vec![],
        drift: vec![LayerSpec::dense(width, width, act)],
        diffusion,
        post_projection: vec![],
        fresh_backward_noise: false,
        paper_indexing: false,
    }
}

fn scalar_sigma(mean: f64, std: f64) -> DiffusionSpec {
    DiffusionSpec::Parameter {
        per_neuron: false,
        init_mean: mean,
        init_std: std,
    }
}

/// Small conv branch: pool 6x6 -> 3x3, conv drift and conv diffusion with dropout.
fn conv_config(steps: usize) -> BranchConfig {
    BranchConfig {
        input_shape: vec![1, 6, 6],
        steps,
        pre_projection: vec![LayerSpec::max_pool(2)],
        drift: vec![LayerSpec::conv2d(1, 1, 3, Activation::Arctan)],
        diffusion: DiffusionSpec::Network {
            layers: vec![
                LayerSpec::conv2d(1, 1, 3, Activation::Arctan),
                LayerSpec::dropout(0.5),
            ],
        },
        post_projection: vec![LayerSpec::flatten()],
        fresh_backward_noise: false,
        paper_indexing: false,
    }
}

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut r = rng(seed);
    Tensor::from_shape_fn(IxDyn(shape), |_| r.random_range(-1.0..1.0))
}

fn half_sq_loss(out: &Tensor, target: &Tensor) -> f64 {
    0.5 * (out - target).mapv(|v| v * v).sum()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// Central differences of the loss along fixed increments and dropout masks.
fn fd_gradient(
    input: &Tensor,
    params: &BranchParams,
    cfg: &BranchConfig,
    increments: &[Tensor],
    target: &Tensor,
    mask_seed: u64,
    dropout: bool,
) -> Vec<f64> {
    let loss = |p: &BranchParams| {
        let t = replay_branch(input, p, cfg, increments, &mut rng(mask_seed), dropout).unwrap();
        half_sq_loss(&t.output, target)
    };
    let n = params.param_count();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let delta = 1e-6;
        let bump = |s: f64| {
            let mut p = params.clone();
            let mut seen = 0;
            for t in p.tensors_mut() {
                if k < seen + t.len() {
                    let v = t.as_slice_mut().unwrap();
                    v[k - seen] += s;
                    break;
                }
                seen += t.len();
            }
            loss(&p)
        };
        out.push((bump(delta) - bump(-delta)) / (2.0 * delta));
    }
    out
}

#[test]
fn encoding_without_projection_is_identity() {
    let cfg = dense_config(5, 2, Activation::Relu, scalar_sigma(0.0, 1.0));
    let params = BranchParams::init(&cfg, &mut rng(1)).unwrap();
    let u = random_input(&[3, 5], 2);
    let (a0, caches) = encode_input(&u, &params, &cfg, &mut rng(0), true).unwrap();
    assert_eq!(a0, u);
    assert!(caches.is_empty());
}

#[test]
fn pooling_encoding_matches_direct_max() {
    let mut cfg = conv_config(1);
    cfg.input_shape = vec![1, 20, 20];
    let params = BranchParams::init(&cfg, &mut rng(1)).unwrap();
    let u = random_input(&[2, 1, 20, 20], 3);
    let (a0, _) = encode_input(&u, &params, &cfg, &mut rng(0), false).unwrap();
    assert_eq!(a0.shape(), &[2, 1, 10, 10]);
    for b in 0..2 {
        for i in 0..10 {
            for j in 0..10 {
                let mut m = f64::NEG_INFINITY;
                for di in 0..2 {
                    for dj in 0..2 {
                        m = m.max(u[[b, 0, 2 * i + di, 2 * j + dj]]);
                    }
                }
                assert_eq!(a0[[b, 0, i, j]], m);
            }
        }
    }

    let c = Tensor::from_elem(IxDyn(&[1, 1, 20, 20]), 0.7);
    let (a0, _) = encode_input(&c, &params, &cfg, &mut rng(0), false).unwrap();
    assert!(a0.iter().all(|&v| v == 0.7));
}

#[test]
fn frozen_dynamics_keep_the_state() {
    let cfg = dense_config(4, 3, Activation::Identity, scalar_sigma(1.0, 0.5));
    let mut params = BranchParams::init(&cfg, &mut rng(1)).unwrap();
    params.zero_diffusion();
    for stack in &mut params.drift {
        stack[0] = stack[0].zeros_like();
    }
    let u = random_input(&[6, 4], 5);
    let traj = forward_branch(&u, &params, &cfg, &mut rng(9), false).unwrap();
    assert_eq!(traj.states.len(), 4);
    assert_eq!(traj.states[3], u);
    assert_eq!(traj.output, u);
}

#[test]
fn pure_noise_variance_is_sigma_squared() {
    let s = 0.8;
    let cfg = dense_config(1, 5, Activation::Identity, scalar_sigma(0.0, 1.0));
    let mut params = BranchParams::init(&cfg, &mut rng(1)).unwrap();
    for stack in &mut params.drift {
        stack[0] = stack[0].zeros_like();
    }
    params.sigma.iter_mut().for_each(|t| t.fill(s));
    let n = 10_000;
    let u = Tensor::zeros(IxDyn(&[n, 1]));
    let traj = forward_branch(&u, &params, &cfg, &mut rng(17), false).unwrap();
    let x: Vec<f64> = traj.output.iter().copied().collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((var / (s * s) - 1.0).abs() < 0.05, "variance {var}");
}

#[test]
fn zero_diffusion_ignores_the_seed() {
    let cfg = conv_config(3);
    let mut params = BranchParams::init(&cfg, &mut rng(4)).unwrap();
    params.zero_diffusion();
    let u = random_input(&[2, 1, 6, 6], 8);
    let a = forward_branch(&u, &params, &cfg, &mut rng(1), true).unwrap();
    let b = forward_branch(&u, &params, &cfg, &mut rng(2), true).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.output, b.output);
}

#[test]
fn replaying_increments_reproduces_states() {
    let cfg = conv_config(4);
    let params = BranchParams::init(&cfg, &mut rng(4)).unwrap();
    let u = random_input(&[3, 1, 6, 6], 8);
    let a = forward_branch(&u, &params, &cfg, &mut rng(11), false).unwrap();
    let b = replay_branch(&u, &params, &cfg, &a.increments, &mut rng(99), false).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.output, b.output);
    for (w, s) in a.increments.iter().zip(&a.states) {
        assert_eq!(w.shape(), s.shape());
    }
}

#[test]
fn zero_noise_adjoint_equals_resnet_backprop() {
    let w = 4;
    let cfg = dense_config(w, 2, Activation::Arctan, scalar_sigma(0.0, 1.0));
    let mut params = BranchParams::init(&cfg, &mut rng(21)).unwrap();
    params.zero_diffusion();
    let u = random_input(&[1, w], 22);
    let target = random_input(&[1, w], 23);
    let traj = forward_branch(&u, &params, &cfg, &mut rng(0), false).unwrap();
    let b_t = &traj.output - &target;
    let adj = backward_adjoint(&traj, &params, &cfg, &b_t, &mut rng(0)).unwrap();

    // hand-rolled: a_{n+1} = a_n + h atan(W_n a_n + b_n), loss 0.5 |a_2 - t|^2
    let h = 0.5;
    let mat = |n: usize| -> (Vec<Vec<f64>>, Vec<f64>) {
        let p = &params.drift[n][0];
        let wm = (0..w)
            .map(|i| (0..w).map(|j| p.weight[[i, j]]).collect())
            .collect();
        (wm, p.bias.iter().copied().collect())
    };
    let mut a: Vec<Vec<f64>> = vec![u.iter().copied().collect()];
    let mut zs = vec![];
    for n in 0..2 {
        let (wm, bv) = mat(n);
        let z: Vec<f64> = (0..w)
            .map(|i| bv[i] + (0..w).map(|j| wm[i][j] * a[n][j]).sum::<f64>())
            .collect();
        let next: Vec<f64> = (0..w).map(|i| a[n][i] + h * z[i].atan()).collect();
        zs.push(z);
        a.push(next);
    }
    let mut g: Vec<f64> = (0..w).map(|i| a[2][i] - target[[0, i]]).collect();
    for n in (0..2).rev() {
        let (wm, _) = mat(n);
        let d: Vec<f64> = (0..w).map(|i| g[i] / (1.0 + zs[n][i] * zs[n][i])).collect();
        let mut oracle = vec![];
        for i in 0..w {
            for j in 0..w {
                oracle.push(h * d[i] * a[n][j]);
            }
        }
        oracle.extend(d.iter().map(|v| h * v));
        assert!(
            rel_err(&adj.grads.drift[n].flatten(), &oracle) <= 1e-10,
            "step {n}"
        );
        g = (0..w)
            .map(|j| g[j] + h * (0..w).map(|i| wm[i][j] * d[i]).sum::<f64>())
            .collect();
    }
    let b0: Vec<f64> = adj.b[0].iter().copied().collect();
    assert!(rel_err(&b0, &g) <= 1e-10);
}

#[test]
fn adjoint_of_pure_noise_is_constant() {
    let cfg = dense_config(3, 4, Activation::Relu, scalar_sigma(0.5, 0.3));
    let mut params = BranchParams::init(&cfg, &mut rng(2)).unwrap();
    for stack in &mut params.drift {
        stack[0] = stack[0].zeros_like();
    }
    let u = random_input(&[5, 3], 3);
    let traj = forward_branch(&u, &params, &cfg, &mut rng(4), false).unwrap();
    let b_t = random_input(&[5, 3], 6);
    let adj = backward_adjoint(&traj, &params, &cfg, &b_t, &mut rng(0)).unwrap();
    assert_eq!(adj.b[4], b_t);
    for b in &adj.b {
        assert_eq!(b, &b_t);
    }
    assert_eq!(adj.c.len(), 4);
}

#[test]
fn pathwise_gradient_matches_finite_differences_dense() {
    for per_neuron in [false, true] {
        let cfg = BranchConfig {
            drift: vec![
                LayerSpec::dense(3, 5, Activation::Arctan),
                LayerSpec::dense(5, 3, Activation::Identity),
            ],
            ..dense_config(
                3,
                3,
                Activation::Identity,
                DiffusionSpec::Parameter {
                    per_neuron,
                    init_mean: 0.0,
                    init_std: 1.0,
                },
            )
        };
        let params = BranchParams::init(&cfg, &mut rng(30)).unwrap();
        let u = random_input(&[2, 3], 31);
        let target = random_input(&[2, 3], 32);
        let traj = forward_branch(&u, &params, &cfg, &mut rng(33), false).unwrap();
        let adj =
            backward_adjoint(&traj, &params, &cfg, &(&traj.output - &target), &mut rng(0)).unwrap();
        let fd = fd_gradient(&u, &params, &cfg, &traj.increments, &target, 0, false);
        let err = rel_err(&adj.grads.flatten(), &fd);
        assert!(err <= 1e-8, "per_neuron {per_neuron}: rel err {err}");
    }
}

#[test]
fn pathwise_gradient_matches_finite_differences_conv_with_dropout() {
    let cfg = conv_config(3);
    let params = BranchParams::init(&cfg, &mut rng(40)).unwrap();
    let u = random_input(&[2, 1, 6, 6], 41);
    let target = random_input(&[2, 9], 42);
    let traj = replay_branch(
        &u,
        &params,
        &cfg,
        &forward_branch(&u, &params, &cfg, &mut rng(43), true)
            .unwrap()
            .increments,
        &mut rng(44),
        true,
    )
    .unwrap();
    let adj =
        backward_adjoint(&traj, &params, &cfg, &(&traj.output - &target), &mut rng(0)).unwrap();
    let fd = fd_gradient(&u, &params, &cfg, &traj.increments, &target, 44, true);
    let err = rel_err(&adj.grads.flatten(), &fd);
    assert!(err <= 1e-8, "rel err {err}");
}

#[test]
fn adjoint_is_linear_in_the_terminal_value() {
    let cfg = conv_config(3);
    let params = BranchParams::init(&cfg, &mut rng(50)).unwrap();
    let u = random_input(&[2, 1, 6, 6], 51);
    let traj = forward_branch(&u, &params, &cfg, &mut rng(52), true).unwrap();
    let b_t = random_input(&[2, 9], 53);
    let one = backward_adjoint(&traj, &params, &cfg, &b_t, &mut rng(0)).unwrap();
    let two = backward_adjoint(&traj, &params, &cfg, &(&b_t * 2.0), &mut rng(0)).unwrap();
    for (x, y) in one.b.iter().zip(&two.b) {
        assert_eq!(&(x * 2.0), y);
    }
    for (x, y) in one.c.iter().zip(&two.c) {
        assert_eq!(&(x * 2.0), y);
    }
    let g1: Vec<f64> = one.grads.flatten().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g1, two.grads.flatten());
}

#[test]
fn adjoint_shapes_follow_state_and_parameters() {
    let cfg = conv_config(2);
    let params = BranchParams::init(&cfg, &mut rng(60)).unwrap();
    let u = random_input(&[3, 1, 6, 6], 61);
    let traj = forward_branch(&u, &params, &cfg, &mut rng(62), true).unwrap();
    let adj = backward_adjoint(
        &traj,
        &params,
        &cfg,
        &Tensor::ones(IxDyn(&[3, 9])),
        &mut rng(0),
    )
    .unwrap();
    assert_eq!(adj.b.len(), 3);
    for b in adj.b.iter().chain(&adj.c) {
        assert_eq!(b.shape(), &[3, 1, 3, 3]);
    }
    for (g, p) in adj.grads.tensors().iter().zip(params.tensors()) {
        assert_eq!(g.shape(), p.shape());
    }
}

#[test]
fn mean_gradient_matches_derivative_of_expected_loss() {
    let cfg = BranchConfig {
        input_shape: vec![2],
        steps: 3,
        pre_projection: vec![],
        drift: vec![LayerSpec::dense(2, 2, Activation::Arctan)],
        diffusion: DiffusionSpec::Network {
            layers: vec![LayerSpec::dense(2, 2, Activation::Arctan)],
        },
        post_projection: vec![],
        fresh_backward_noise: false,
        paper_indexing: false,
    };
    let params = BranchParams::init(&cfg, &mut rng(70)).unwrap();
    let paths = 10_000;
    let groups = 100;
    let one = random_input(&[1, 2], 71);
    let u = Tensor::from_shape_fn(IxDyn(&[paths, 2]), |ix| one[[0, ix[1]]]);
    let target = Tensor::from_shape_fn(IxDyn(&[paths, 2]), |ix| [0.3, -0.2][ix[1]]);
    let traj = forward_branch(&u, &params, &cfg, &mut rng(72), false).unwrap();

    // group means of the per-path gradient give its standard error
    let size = paths / groups;
    let mut group_means = vec![];
    for g in 0..groups {
        let sel: Vec<usize> = (g * size..(g + 1) * size).collect();
        let inc: Vec<Tensor> = traj
            .increments
            .iter()
            .map(|w| w.select(ndarray::Axis(0), &sel))
            .collect();
        let ug = u.select(ndarray::Axis(0), &sel);
        let tg = target.select(ndarray::Axis(0), &sel);
        let t = replay_branch(&ug, &params, &cfg, &inc, &mut rng(0), false).unwrap();
        let adj = backward_adjoint(&t, &params, &cfg, &(&t.output - &tg), &mut rng(0)).unwrap();
        group_means.push(
            adj.grads
                .flatten()
                .iter()
                .map(|v| v / size as f64)
                .collect::<Vec<_>>(),
        );
    }
    let n = params.param_count();
    let fd: Vec<f64> = fd_gradient(&u, &params, &cfg, &traj.increments, &target, 0, false)
        .iter()
        .map(|v| v / paths as f64)
        .collect();
    for k in 0..n {
        let xs: Vec<f64> = group_means.iter().map(|g| g[k]).collect();
        let mean = xs.iter().sum::<f64>() / groups as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (groups - 1) as f64;
        let se = (var / groups as f64).sqrt();
        assert!(
            (mean - fd[k]).abs() <= 3.0 * se + 1e-9,
            "param {k}: {mean} vs {}",
            fd[k]
        );
    }
}

#[test]
fn paper_indexing_agrees_for_affine_drift() {
    let mut cfg = dense_config(3, 4, Activation::Identity, scalar_sigma(0.2, 0.1));
    let params = BranchParams::init(&cfg, &mut rng(80)).unwrap();
    let u = random_input(&[2, 3], 81);
    let traj = forward_branch(&u, &params, &cfg, &mut rng(82), false).unwrap();
    let b_t = random_input(&[2, 3], 83);
    let exact = backward_adjoint(&traj, &params, &cfg, &b_t, &mut rng(0)).unwrap();
    cfg.paper_indexing = true;
    let paper = backward_adjoint(&traj, &params, &cfg, &b_t, &mut rng(0)).unwrap();
    assert!(rel_err(&paper.grads.flatten(), &exact.grads.flatten()) < 1e-14);
}

#[test]
fn fresh_backward_noise_changes_only_the_diffusion_gradient() {
    let mut cfg = dense_config(3, 3, Activation::Arctan, scalar_sigma(0.5, 0.2));
    let params = BranchParams::init(&cfg, &mut rng(90)).unwrap();
    let u = random_input(&[4, 3], 91);
    let traj = forward_branch(&u, &params, &cfg, &mut rng(92), false).unwrap();
    let b_t = random_input(&[4, 3], 93);
    let reuse = backward_adjoint(&traj, &params, &cfg, &b_t, &mut rng(0)).unwrap();
    cfg.fresh_backward_noise = true;
    let fresh = backward_adjoint(&traj, &params, &cfg, &b_t, &mut rng(0)).unwrap();
    assert_eq!(reuse.grads.drift, fresh.grads.drift);
    assert_ne!(reuse.grads.sigma, fresh.grads.sigma);
}

#[test]
fn mismatches_are_reported() {
    let cfg = conv_config(2);
    let params = BranchParams::init(&cfg, &mut rng(1)).unwrap();
    let wrong = random_input(&[2, 1, 5, 5], 2);
    assert!(matches!(
        forward_branch(&wrong, &params, &cfg, &mut rng(0), false),
        Err(Error::Config(_))
    ));

    let u = random_input(&[2, 1, 6, 6], 3);
    let traj = forward_branch(&u, &params, &cfg, &mut rng(0), false).unwrap();
    let bad_terminal = Tensor::zeros(IxDyn(&[2, 8]));
    assert!(matches!(
        backward_adjoint(&traj, &params, &cfg, &bad_terminal, &mut rng(0)),
        Err(Error::Contract(_))
    ));

    let longer = conv_config(3);
    let longer_params = BranchParams::init(&longer, &mut rng(1)).unwrap();
    let ones = Tensor::ones(IxDyn(&[2, 9]));
    assert!(matches!(
        backward_adjoint(&traj, &longer_params, &longer, &ones, &mut rng(0)),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        backward_adjoint(&traj, &longer_params, &cfg, &ones, &mut rng(0)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn overflow_names_the_step() {
    let cfg = dense_config(2, 3, Activation::Identity, scalar_sigma(0.0, 0.0));
    let mut params = BranchParams::init(&cfg, &mut rng(1)).unwrap();
    for stack in &mut params.drift {
        stack[0].weight.fill(1e200);
    }
    let u = Tensor::from_elem(IxDyn(&[1, 2]), 1e200);
    match forward_branch(&u, &params, &cfg, &mut rng(0), false) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("step 0"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = dense_config(3, 0, Activation::Relu, scalar_sigma(0.0, 1.0));
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.steps = 2;
    cfg.drift = vec![LayerSpec::dense(3, 4, Activation::Relu)];
    assert!(cfg.validate().is_err());
    let cfg = BranchConfig {
        post_projection: vec![],
        ..conv_config(2)
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}
