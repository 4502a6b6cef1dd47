//! Mean-zero Gaussian random fields with an RBF covariance kernel.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub length_scale: f64,
    pub variance: f64,
    /// Added to the diagonal; doubled on factorization failure up to 1e-4.
    pub jitter: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            length_scale: 0.2,
            variance: 1.0,
            jitter: 1e-8,
        }
    }
}

impl KernelConfig {
    pub fn new(length_scale: f64, variance: f64) -> Result<Self> {
        let cfg = Self {
            length_scale,
            variance,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::Config(format!(
                "kernel length scale must be positive, got {}",
                self.length_scale
            )));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::Config(format!(
                "kernel variance must be positive, got {}",
                self.variance
            )));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Config(format!("negative jitter {}", self.jitter)));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, sq_dist: f64) -> f64 {
        self.variance * (-sq_dist / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Fixed sensor locations shared by every input function.
///
/// Planar grids are tensor products; point `k` sits at `(xs[k / ys.len()], ys[k % ys.len()])`,
/// so a field over a plane is stored row-major with the first coordinate as the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SensorGrid {
    Line { xs: Vec<f64> },
    Plane { xs: Vec<f64>, ys: Vec<f64> },
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|x| x.is_finite())
}

impl SensorGrid {
    /// `m` equispaced sensors covering `[a, b]` including both ends.
    pub fn uniform_line(a: f64, b: f64, m: usize) -> Self {
        SensorGrid::Line {
            xs: linspace(a, b, m),
        }
    }

    /// `m x m` tensor grid over `[a, b]^2`.
    pub fn uniform_square(a: f64, b: f64, m: usize) -> Self {
        let axis = linspace(a, b, m);
        SensorGrid::Plane {
            xs: axis.clone(),
            ys: axis,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            SensorGrid::Line { xs } => !xs.is_empty() && strictly_increasing(xs),
            SensorGrid::Plane { xs, ys } => {
                !xs.is_empty()
                    && !ys.is_empty()
                    && strictly_increasing(xs)
                    && strictly_increasing(ys)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "sensor axes must be nonempty and strictly increasing".into(),
            ))
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SensorGrid::Line { xs } => xs.len(),
            SensorGrid::Plane { xs, ys } => xs.len() * ys.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            SensorGrid::Line { .. } => 1,
            SensorGrid::Plane { .. } => 2,
        }
    }

    pub fn point(&self, k: usize) -> [f64; 2] {
        match self {
            SensorGrid::Line { xs } => [xs[k], 0.0],
            SensorGrid::Plane { xs, ys } => [xs[k / ys.len()], ys[k % ys.len()]],
        }
    }

    /// Per-axis `(min, max)`.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let b = |v: &Vec<f64>| (v[0], v[v.len() - 1]);
        match self {
            SensorGrid::Line { xs } => vec![b(xs)],
            SensorGrid::Plane { xs, ys } => vec![b(xs), b(ys)],
        }
    }

    fn sq_dist(&self, i: usize, j: usize) -> f64 {
        let (p, q) = (self.point(i), self.point(j));
        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
    }
}

/// `K_ij = variance * exp(-|p_i - p_j|^2 / (2 l^2)) + jitter * [i == j]`.
pub fn rbf_covariance(grid: &SensorGrid, cfg: &KernelConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    grid.validate()?;
    let m = grid.len();
    Ok(Array2::from_shape_fn((m, m), |(i, j)| {
        cfg.eval(grid.sq_dist(i, j)) + if i == j { cfg.jitter } else { 0.0 }
    }))
}

/// Lower Cholesky factor of the kernel matrix, ready to draw many fields.
#[derive(Debug, Clone)]
pub struct GrfSampler {
    factor: Array2<f64>,
    jitter: f64,
}

impl GrfSampler {
    pub fn new(grid: &SensorGrid, cfg: &KernelConfig) -> Result<Self> {
        let base = rbf_covariance(
            grid,
            &KernelConfig {
                jitter: 0.0,
                ..*cfg
            },
        )?;
        let m = base.nrows();
        let mut jitter = cfg.jitter;
        loop {
            let k = DMatrix::from_fn(m, m, |i, j| {
                base[[i, j]] + if i == j { jitter } else { 0.0 }
            });
            if let Some(chol) = k.cholesky() {
                let l = chol.l();
                let factor = Array2::from_shape_fn((m, m), |(i, j)| l[(i, j)]);
                return Ok(Self { factor, jitter });
            }
            jitter = if jitter == 0.0 { 1e-12 } else { jitter * 2.0 };
            if jitter > MAX_JITTER {
                return Err(Error::Numeric(format!(
                    "RBF covariance (l = {}, m = {m}) not positive definite with jitter up to {MAX_JITTER}",
                    cfg.length_scale
                )));
            }
        }
    }

    pub fn factor(&self) -> &Array2<f64> {
        &self.factor
    }

    /// Diagonal jitter that made the factorization succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn sensors(&self) -> usize {
        self.factor.nrows()
    }

    /// One field `L z` with `z` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let m = self.sensors();
        let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        (0..m)
            .map(|i| {
                self.factor
                    .row(i)
                    .iter()
                    .take(i + 1)
                    .zip(&z)
                    .map(|(l, z)| l * z)
                    .sum()
            })
            .collect()
    }
}

/// `count` independent fields, one per row.
pub fn sample_grf<R: Rng + ?Sized>(
    grid: &SensorGrid,
    cfg: &KernelConfig,
    count: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let m = grid.len();
    if count == 0 {
        return Ok(Array2::zeros((0, m)));
    }
    let sampler = GrfSampler::new(grid, cfg)?;
    let mut out = Array2::zeros((count, m));
    for mut row in out.rows_mut() {
        let s = sampler.sample(rng);
        row.assign(&ndarray::ArrayView1::from(&s));
    }
    Ok(out)
}
