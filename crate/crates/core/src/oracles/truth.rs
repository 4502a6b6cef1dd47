//! Ground-truth operator values.

use super::interp::{Bilinear, Interp1d};
use super::ode::Dopri5;
use crate::{Error, Result};

fn check_domain(ys: &[f64], lo: f64, hi: f64) -> Result<()> {
    match ys.iter().find(|&&y| !(lo..=hi).contains(&y)) {
        Some(y) => Err(Error::Domain(format!("query {y} outside [{lo}, {hi}]"))),
        None => Ok(()),
    }
}

/// `s(y) = int_0^y u` for every query, on the output domain `[0, hi]`.
pub fn antiderivative_truth(
    u: &Interp1d,
    ys: &[f64],
    hi: f64,
    solver: &Dopri5,
) -> Result<Vec<f64>> {
    check_domain(ys, 0.0, hi)?;
    let out = solver.solve(|t, _, ds| ds[0] = u.eval(t), 0.0, &[0.0], u.knots(), ys)?;
    Ok(out.into_iter().map(|s| s[0]).collect())
}

/// `s' = u(y) s`, `s(0) = 1`.
pub fn exp_ode_truth(u: &Interp1d, ys: &[f64], hi: f64, solver: &Dopri5) -> Result<Vec<f64>> {
    check_domain(ys, 0.0, hi)?;
    let out = solver.solve(
        |t, s, ds| ds[0] = u.eval(t) * s[0],
        0.0,
        &[1.0],
        u.knots(),
        ys,
    )?;
    Ok(out.into_iter().map(|s| s[0]).collect())
}

/// Forced pendulum `s1' = s2`, `s2' = -sin s1 + u(y)` from rest.
pub fn pendulum_truth(u: &Interp1d, ys: &[f64], hi: f64, solver: &Dopri5) -> Result<Vec<[f64; 2]>> {
    check_domain(ys, 0.0, hi)?;
    let out = solver.solve(
        |t, s, ds| {
            ds[0] = s[1];
            ds[1] = -s[0].sin() + u.eval(t);
        },
        0.0,
        &[0.0, 0.0],
        u.knots(),
        ys,
    )?;
    Ok(out.into_iter().map(|s| [s[0], s[1]]).collect())
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule over `[0, upper]` split at `breaks`.
fn composite_rule(breaks: &[f64], upper: f64, nodes: &[f64], weights: &[f64]) -> Vec<(f64, f64)> {
    let mut cuts = vec![0.0];
    cuts.extend(breaks.iter().copied().filter(|&b| b > 0.0 && b < upper));
    cuts.push(upper);
    let mut rule = Vec::with_capacity((cuts.len() - 1) * nodes.len());
    for w in cuts.windows(2) {
        let (mid, half) = ((w[0] + w[1]) / 2.0, (w[1] - w[0]) / 2.0);
        for (x, wt) in nodes.iter().zip(weights) {
            rule.push((mid + half * x, half * wt));
        }
    }
    rule
}

/// `int_0^upper` of every clamped hat function on `axis`, by the composite rule.
fn hat_integrals(axis: &[f64], upper: f64, nodes: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; axis.len()];
    for (t, w) in composite_rule(axis, upper, nodes, weights) {
        let (i, s) = Bilinear::locate(axis, t);
        out[i] += w * (1.0 - s);
        out[i + 1] += w * s;
    }
    out
}

/// `int_0^y1 int_0^y2 u` of the bilinear interpolant, constant below the grid.
///
/// Every grid cell gets an `order`-point tensor Gauss–Legendre rule, exact for
/// bilinear pieces. The rule is applied to the separable hat basis, so each
/// query costs one pass over the grid values.
pub fn double_integral_truth(
    u: &Bilinear,
    ys: &[[f64; 2]],
    domain: (f64, f64),
    order: usize,
) -> Result<Vec<f64>> {
    for y in ys {
        check_domain(y, domain.0, domain.1)?;
    }
    if order == 0 {
        return Err(Error::Config("quadrature order must be positive".into()));
    }
    let (nodes, weights) = gauss_legendre(order);
    let ny = u.ys().len();
    Ok(ys
        .iter()
        .map(|&[y1, y2]| {
            let wx = hat_integrals(u.xs(), y1, &nodes, &weights);
            let wy = hat_integrals(u.ys(), y2, &nodes, &weights);
            wx.iter()
                .enumerate()
                .filter(|(_, a)| **a != 0.0)
                .map(|(i, a)| a * (0..ny).map(|j| wy[j] * u.value(i, j)).sum::<f64>())
                .sum()
        })
        .collect())
}

/// Thomas algorithm for `sub[i] x[i-1] + diag[i] x[i] + sup[i] x[i+1] = rhs[i]`.
pub fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if sub.len() != n || sup.len() != n || rhs.len() != n {
        return Err(Error::Dimension(
            "tridiagonal bands must share a length".into(),
        ));
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    for i in 0..n {
        let prev_c = if i == 0 { 0.0 } else { c[i - 1] };
        let prev_d = if i == 0 { 0.0 } else { d[i - 1] };
        let denom = diag[i] - sub[i] * prev_c;
        if denom.abs() < 1e-300 || !denom.is_finite() {
            return Err(Error::Numeric(format!(
                "singular tridiagonal system at row {i}"
            )));
        }
        c[i] = sup[i] / denom;
        d[i] = (rhs[i] - sub[i] * prev_d) / denom;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Conservative finite differences for `(e^b u')' = f` with Dirichlet data.
///
/// The face coefficient between nodes is the geometric mean of `e^b` at its ends.
pub fn elliptic_truth(
    xs: &[f64],
    b: &[f64],
    f: impl Fn(f64) -> f64,
    bc: (f64, f64),
) -> Result<Vec<f64>> {
    let m = xs.len();
    if m < 3 || b.len() != m {
        return Err(Error::Dimension(format!(
            "elliptic grid of {m} points with {} coefficients",
            b.len()
        )));
    }
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let face: Vec<f64> = b.windows(2).map(|w| ((w[0] + w[1]) / 2.0).exp()).collect();
    let n = m - 2;
    let (mut sub, mut diag, mut sup, mut rhs) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for r in 0..n {
        let i = r + 1;
        let width = (h[i - 1] + h[i]) / 2.0;
        let west = face[i - 1] / (h[i - 1] * width);
        let east = face[i] / (h[i] * width);
        diag[r] = -(west + east);
        rhs[r] = f(xs[i]);
        if r > 0 {
            sub[r] = west;
        } else {
            rhs[r] -= west * bc.0;
        }
        if r + 1 < n {
            sup[r] = east;
        } else {
            rhs[r] -= east * bc.1;
        }
    }
    let interior = solve_tridiagonal(&sub, &diag, &sup, &rhs)?;
    let mut u = Vec::with_capacity(m);
    u.push(bc.0);
    u.extend(interior);
    u.push(bc.1);
    Ok(u)
}
