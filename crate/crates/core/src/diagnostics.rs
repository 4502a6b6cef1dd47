//! Evaluation: stochastic MSE, noise recovery, ensembles and covariances.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{check_compatible, gather_inputs, gather_rows, Predictor};
use crate::nn::Tensor;
use crate::oracles::OperatorDataset;
use crate::training::substream;
use crate::{Error, Result};

/// Rows handled by one work unit.
const CHUNK: usize = 256;

fn nonempty(ds: &OperatorDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    Ok(())
}

/// Mean over samples of the per-sample loss, with one stochastic prediction
/// per sample compared against the noisy target.
pub fn eval_mse<P: Predictor>(model: &P, ds: &OperatorDataset, seed: u64) -> Result<f64> {
    nonempty(ds)?;
    check_compatible(model, ds)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let parts: Vec<Result<f64>> = idx
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, s)| {
            let u = gather_inputs(ds, s, model.input_shape())?;
            let p = model.predict(&u, &gather_rows(&ds.y, s), &mut substream(seed, 0, 0, c))?;
            let t = gather_rows(&ds.noisy, s);
            Ok((p - t).mapv(|v| v * v).sum() / ds.d_out() as f64)
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / ds.len() as f64)
}

/// MSE of the mean of `reps` predictions against the clean target.
pub fn eval_mean_mse<P: Predictor>(
    model: &P,
    ds: &OperatorDataset,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    let stats = repeated_stats(
        model,
        ds,
        &(0..ds.len()).collect::<Vec<_>>(),
        reps.max(1),
        seed,
    )?;
    let mut total = 0.0;
    for (s, (mean, _)) in stats.iter().enumerate() {
        total += (mean - &ds.clean.row(s)).mapv(|v| v * v).sum() / ds.d_out() as f64;
    }
    Ok(total / ds.len() as f64)
}

/// Per-sample mean and unbiased std over `reps` independent predictions.
fn repeated_stats<P: Predictor>(
    model: &P,
    ds: &OperatorDataset,
    samples: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<(Array1<f64>, Array1<f64>)>> {
    nonempty(ds)?;
    check_compatible(model, ds)?;
    let per_chunk = (CHUNK / reps).max(1);
    let parts: Vec<Result<Vec<(Array1<f64>, Array1<f64>)>>> = samples
        .par_chunks(per_chunk)
        .enumerate()
        .map(|(c, s)| {
            let rows: Vec<usize> = s
                .iter()
                .flat_map(|&i| std::iter::repeat_n(i, reps))
                .collect();
            let u = gather_inputs(ds, &rows, model.input_shape())?;
            let p = model.predict(
                &u,
                &gather_rows(&ds.y, &rows),
                &mut substream(seed, 1, 0, c),
            )?;
            Ok(p.axis_chunks_iter(Axis(0), reps)
                .map(|block| {
                    let mean = block.mean_axis(Axis(0)).expect("reps >= 1");
                    let std = if reps > 1 {
                        block.std_axis(Axis(0), 1.0)
                    } else {
                        Array1::zeros(mean.len())
                    };
                    (mean, std)
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub dataset: String,
    pub reps: usize,
    pub samples: usize,
    /// Mean pointwise std for each output dimension.
    pub per_dim: Vec<f64>,
    /// Average of `per_dim`.
    pub overall: f64,
}

impl NoiseReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        let rows = self
            .per_dim
            .iter()
            .enumerate()
            .map(|(d, v)| (d.to_string(), *v))
            .chain(std::iter::once(("overall".to_string(), self.overall)));
        w.write_record(["dataset", "reps", "samples", "dim", "mean_std"])
            .map_err(|e| Error::format(path, e))?;
        for (dim, v) in rows {
            w.write_record([
                self.dataset.clone(),
                self.reps.to_string(),
                self.samples.to_string(),
                dim,
                format!("{v:.16e}"),
            ])
            .map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Evenly spaced subset of at most `limit` samples.
pub fn spread_subset(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len && k > 0 => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}

/// Predicts each sample `reps` times with independent noise and averages the
/// per-sample standard deviation over samples, per output dimension.
pub fn noise_recovery<P: Predictor>(
    model: &P,
    ds: &OperatorDataset,
    reps: usize,
    limit: Option<usize>,
    seed: u64,
) -> Result<NoiseReport> {
    if reps < 2 {
        return Err(Error::Config(
            "noise recovery needs at least 2 repetitions".into(),
        ));
    }
    let samples = spread_subset(ds.len(), limit);
    let stats = repeated_stats(model, ds, &samples, reps, seed)?;
    let mut per_dim = vec![0.0; ds.d_out()];
    for (_, std) in &stats {
        for (acc, v) in per_dim.iter_mut().zip(std) {
            *acc += v;
        }
    }
    per_dim.iter_mut().for_each(|v| *v /= stats.len() as f64);
    Ok(NoiseReport {
        dataset: format!("{}:{}", ds.experiment(), ds.seed),
        reps,
        samples: samples.len(),
        overall: per_dim.iter().sum::<f64>() / per_dim.len() as f64,
        per_dim,
    })
}

/// Curves over a shared query grid: one row of `samples` per member.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub grid: Array2<f64>,
    pub samples: Array2<f64>,
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Ensemble {
    pub fn from_samples(grid: Array2<f64>, samples: Array2<f64>) -> Result<Self> {
        if samples.nrows() < 2 || samples.ncols() != grid.nrows() {
            return Err(Error::Dimension(format!(
                "ensemble of {} members over {} points for a grid of {}",
                samples.nrows(),
                samples.ncols(),
                grid.nrows()
            )));
        }
        Ok(Self {
            mean: samples.mean_axis(Axis(0)).expect("nonempty"),
            std: samples.std_axis(Axis(0), 1.0),
            grid,
            samples,
        })
    }

    /// Clean targets of a dataset whose functions all share one query grid
    /// and one output dimension.
    pub fn from_dataset(ds: &OperatorDataset) -> Result<Self> {
        let n = ds.n_functions();
        if n == 0 || !ds.len().is_multiple_of(n) || ds.d_out() != 1 {
            return Err(Error::Config(
                "ensembles need a full single-output function-by-query grid".into(),
            ));
        }
        let q = ds.len() / n;
        let grid = ds.y.slice(ndarray::s![..q, ..]).to_owned();
        for i in 0..n {
            if ds.function_index[i * q] != i
                || ds.y.slice(ndarray::s![i * q..(i + 1) * q, ..]) != grid
            {
                return Err(Error::Config(
                    "dataset functions do not share one query grid".into(),
                ));
            }
        }
        let samples = ds
            .clean
            .clone()
            .into_shape_with_order((n, q))
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::from_samples(grid, samples)
    }

    /// `mean -/+ k std`.
    pub fn band(&self, k: f64) -> (Array1<f64>, Array1<f64>) {
        (&self.mean - &(&self.std * k), &self.mean + &(&self.std * k))
    }

    /// Unbiased sample covariance between grid points.
    pub fn covariance(&self) -> Array2<f64> {
        let centered = &self.samples - &self.mean.view().insert_axis(Axis(0));
        let c = centered.t().dot(&centered) / (self.samples.nrows() - 1) as f64;
        // exact symmetry regardless of summation order
        (&c + &c.t()) * 0.5
    }

    /// Columns `y, mean, lo, hi` with `lo/hi = mean -/+ 2 std`. Uses the first
    /// query coordinate.
    pub fn write_band_csv(&self, path: &Path) -> Result<()> {
        let (lo, hi) = self.band(2.0);
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        w.write_record(["y", "mean", "lo", "hi"])
            .map_err(|e| Error::format(path, e))?;
        for g in 0..self.grid.nrows() {
            w.write_record(
                [self.grid[[g, 0]], self.mean[g], lo[g], hi[g]].map(|v| format!("{v:.16e}")),
            )
            .map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One prediction curve per input function, each from a single noise
/// realization shared across the grid.
pub fn ensemble_stats<P: Predictor>(
    model: &P,
    inputs: &Tensor,
    grid: &Array2<f64>,
    seed: u64,
) -> Result<Ensemble> {
    if model.d_out() != 1 {
        return Err(Error::Config(
            "ensembles are built for single-output models".into(),
        ));
    }
    let members = inputs.shape()[0];
    let idx: Vec<usize> = (0..members).collect();
    let per_chunk = (CHUNK * 16 / grid.nrows().max(1)).max(1);
    let parts: Vec<Result<Array2<f64>>> = idx
        .par_chunks(per_chunk)
        .enumerate()
        .map(|(c, s)| {
            let u = inputs.select(Axis(0), s);
            let v = model.predict_grid(&u, grid, &mut substream(seed, 2, 0, c))?;
            Ok(v.index_axis_move(Axis(2), 0))
        })
        .collect();
    let mut rows = Vec::with_capacity(members);
    for p in parts {
        rows.push(p?);
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let samples =
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))?;
    Ensemble::from_samples(grid.clone(), samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub reference: Array2<f64>,
    pub estimate: Array2<f64>,
    /// `estimate - reference`.
    pub difference: Array2<f64>,
    pub max_abs: f64,
    pub frobenius: f64,
    /// Max-abs difference between two independent reference ensembles.
    pub mc_floor: Option<f64>,
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn covariance_compare(
    estimate: &Ensemble,
    reference: &Ensemble,
    independent_reference: Option<&Ensemble>,
) -> Result<CovarianceReport> {
    for other in std::iter::once(estimate).chain(independent_reference) {
        if other.grid != reference.grid {
            return Err(Error::Config("ensembles are on different grids".into()));
        }
    }
    let r = reference.covariance();
    let e = estimate.covariance();
    let difference = &e - &r;
    Ok(CovarianceReport {
        max_abs: max_abs(&difference),
        frobenius: difference.mapv(|v| v * v).sum().sqrt(),
        mc_floor: independent_reference.map(|o| max_abs(&(&o.covariance() - &r))),
        reference: r,
        estimate: e,
        difference,
    })
}

pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format(path, e))?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| format!("{v:.16e}")))
            .map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl CovarianceReport {
    /// Writes `covariance_ref.csv`, `covariance_est.csv` and `covariance_diff.csv`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        write_matrix_csv(&dir.join("covariance_ref.csv"), &self.reference)?;
        write_matrix_csv(&dir.join("covariance_est.csv"), &self.estimate)?;
        write_matrix_csv(&dir.join("covariance_diff.csv"), &self.difference)
    }
}

/// Fraction of grid points where the two ensemble means agree within
/// `k` pooled standard errors.
pub fn mean_agreement(a: &Ensemble, b: &Ensemble, k: f64) -> f64 {
    let na = a.samples.nrows() as f64;
    let nb = b.samples.nrows() as f64;
    let hits = (0..a.mean.len())
        .filter(|&g| {
            let se = (a.std[g].powi(2) / na + b.std[g].powi(2) / nb).sqrt();
            (a.mean[g] - b.mean[g]).abs() <= k * se
        })
        .count();
    hits as f64 / a.mean.len() as f64
}
