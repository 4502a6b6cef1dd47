//! Interpolants through sensor values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Linear,
    /// Not-a-knot cubic spline.
    #[default]
    Cubic,
}

/// A 1D interpolant, held constant outside the sensor range.
#[derive(Debug, Clone)]
pub struct Interp1d {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots; all zero for linear.
    m: Vec<f64>,
}

impl Interp1d {
    pub fn new(xs: &[f64], ys: &[f64], kind: Interpolation) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(Error::Dimension(format!(
                "interpolation needs >= 2 matching knots, got {} x and {} y",
                xs.len(),
                ys.len()
            )));
        }
        if !xs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "interpolation knots must be strictly increasing".into(),
            ));
        }
        let m = match kind {
            Interpolation::Linear => vec![0.0; xs.len()],
            Interpolation::Cubic => not_a_knot_moments(xs, ys)?,
        };
        Ok(Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            m,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.xs
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.xs.len();
        self.xs.partition_point(|&k| k <= x).clamp(1, n - 1) - 1
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let i = self.segment(x);
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = 1.0 - a;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

fn not_a_knot_moments(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    let n = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let d: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
    match n {
        2 => return Ok(vec![0.0; 2]),
        // a single parabola through three points
        3 => return Ok(vec![2.0 * (d[1] - d[0]) / (h[0] + h[1]); 3]),
        _ => {}
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for i in 1..n - 1 {
        a[(i, i - 1)] = h[i - 1];
        a[(i, i)] = 2.0 * (h[i - 1] + h[i]);
        a[(i, i + 1)] = h[i];
        rhs[i] = 6.0 * (d[i] - d[i - 1]);
    }
    // third derivative continuous across the second and second-to-last knots
    a[(0, 0)] = h[1];
    a[(0, 1)] = -(h[0] + h[1]);
    a[(0, 2)] = h[0];
    a[(n - 1, n - 3)] = h[n - 2];
    a[(n - 1, n - 2)] = -(h[n - 3] + h[n - 2]);
    a[(n - 1, n - 1)] = h[n - 3];
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("singular spline system".into()))?;
    Ok(sol.iter().copied().collect())
}

/// Bilinear interpolant over a tensor grid, constant-extrapolated from the
/// nearest boundary value outside it. `values` is row-major with `xs` as rows.
#[derive(Debug, Clone)]
pub struct Bilinear {
    xs: Vec<f64>,
    ys: Vec<f64>,
    values: Vec<f64>,
}

impl Bilinear {
    pub fn new(xs: &[f64], ys: &[f64], values: &[f64]) -> Result<Self> {
        if xs.len() < 2 || ys.len() < 2 || values.len() != xs.len() * ys.len() {
            return Err(Error::Dimension(format!(
                "bilinear grid {}x{} with {} values",
                xs.len(),
                ys.len(),
                values.len()
            )));
        }
        Ok(Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            values: values.to_vec(),
        })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub(crate) fn locate(axis: &[f64], t: f64) -> (usize, f64) {
        let n = axis.len();
        let t = t.clamp(axis[0], axis[n - 1]);
        let i = axis.partition_point(|&k| k <= t).clamp(1, n - 1) - 1;
        (i, (t - axis[i]) / (axis[i + 1] - axis[i]))
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ys.len() + j]
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let (i, s) = Self::locate(&self.xs, x);
        let (j, t) = Self::locate(&self.ys, y);
        let v = |a, b| self.value(a, b);
        (1.0 - s) * ((1.0 - t) * v(i, j) + t * v(i, j + 1))
            + s * ((1.0 - t) * v(i + 1, j) + t * v(i + 1, j + 1))
    }
}
