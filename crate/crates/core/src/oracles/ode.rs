//! Adaptive Dormand–Prince 5(4) integrator.

use crate::{Error, Result};

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dopri5 {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for Dopri5 {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-9,
            max_step: f64::INFINITY,
            max_steps: 1_000_000,
        }
    }
}

impl Dopri5 {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }

    /// Integrates `y' = f(t, y)` from `t0` and returns the state at every
    /// entry of `outputs` (in the given order, each `>= t0`).
    ///
    /// Integration restarts at every `breakpoint`, so a right-hand side that is
    /// only piecewise smooth between breakpoints keeps full order.
    pub fn solve<F>(
        &self,
        mut f: F,
        t0: f64,
        y0: &[f64],
        breakpoints: &[f64],
        outputs: &[f64],
    ) -> Result<Vec<Vec<f64>>>
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        if let Some(&bad) = outputs.iter().find(|&&t| !(t >= t0) || !t.is_finite()) {
            return Err(Error::Domain(format!(
                "output time {bad} precedes start {t0}"
            )));
        }
        let t_end = outputs.iter().copied().fold(t0, f64::max);
        let mut events: Vec<f64> = breakpoints
            .iter()
            .copied()
            .filter(|&b| b > t0 && b < t_end)
            .chain(outputs.iter().copied())
            .collect();
        events.sort_by(f64::total_cmp);
        events.dedup();

        let dim = y0.len();
        let mut order: Vec<usize> = (0..outputs.len()).collect();
        order.sort_by(|&a, &b| outputs[a].total_cmp(&outputs[b]));
        let mut results = vec![Vec::new(); outputs.len()];
        let mut next_out = 0;

        let mut t = t0;
        let mut y = y0.to_vec();
        let mut h = f64::NAN;
        let mut steps = 0usize;
        let mut k = vec![vec![0.0; dim]; 7];
        let mut stage = vec![0.0; dim];
        let mut y_new = vec![0.0; dim];

        for &target in &events {
            while t < target {
                if h.is_nan() {
                    h = self.initial_step(&mut f, t, &y, target - t);
                }
                let remaining = target - t;
                let last = h >= remaining;
                let step = if last { remaining } else { h };

                f(t, &y, &mut k[0]);
                for s in 1..7 {
                    for i in 0..dim {
                        let mut acc = y[i];
                        for (j, kj) in k.iter().enumerate().take(s) {
                            acc += step * A[s][j] * kj[i];
                        }
                        stage[i] = acc;
                    }
                    if s == 6 {
                        y_new.copy_from_slice(&stage);
                    }
                    f(t + C[s] * step, &stage, &mut k[s]);
                }
                let mut err = 0.0;
                for i in 0..dim {
                    let e: f64 = (0..7).map(|s| E[s] * k[s][i]).sum::<f64>() * step;
                    let scale = self.atol + self.rtol * y[i].abs().max(y_new[i].abs());
                    err += (e / scale).powi(2);
                }
                let err = if dim == 0 {
                    0.0
                } else {
                    (err / dim as f64).sqrt()
                };
                if !err.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite RK45 error estimate at t = {t}"
                    )));
                }
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                if err <= 1.0 {
                    t = if last { target } else { t + step };
                    y.copy_from_slice(&y_new);
                    // a clipped final step says nothing about the natural size
                    if !last || factor < 1.0 {
                        h = (step * factor).min(self.max_step);
                    }
                } else {
                    h = (step * factor).min(self.max_step);
                }
                steps += 1;
                if steps > self.max_steps {
                    return Err(Error::Numeric(format!(
                        "RK45 exceeded {} steps before t = {target}",
                        self.max_steps
                    )));
                }
                if h < 1e-14 * t.abs().max(1.0) {
                    return Err(Error::Numeric(format!(
                        "RK45 step size underflow at t = {t}"
                    )));
                }
            }
            while next_out < order.len() && outputs[order[next_out]] <= t {
                results[order[next_out]] = y.clone();
                next_out += 1;
            }
        }
        while next_out < order.len() {
            results[order[next_out]] = y.clone();
            next_out += 1;
        }
        Ok(results)
    }

    fn initial_step<F>(&self, f: &mut F, t: f64, y: &[f64], span: f64) -> f64
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let mut dy = vec![0.0; y.len()];
        f(t, y, &mut dy);
        let scale = |v: f64| self.atol + self.rtol * v.abs();
        let rms = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                (v.iter()
                    .zip(y)
                    .map(|(a, b)| (a / scale(*b)).powi(2))
                    .sum::<f64>()
                    / v.len() as f64)
                    .sqrt()
            }
        };
        let (d0, d1) = (rms(y), rms(&dy));
        let h = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        h.min(span).min(self.max_step).max(1e-12)
    }
}
