//! Cartesian-product operator datasets and their on-disk layout.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::interp::{Bilinear, Interp1d, Interpolation};
use super::ode::Dopri5;
use super::truth;
use crate::grf::{GrfSampler, KernelConfig, SensorGrid};
use crate::{Error, Result};

pub const ELLIPTIC_SOURCE: f64 = 5.0;
pub const ELLIPTIC_BOUNDARY: (f64, f64) = (0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Antiderivative,
    ExpOde,
    Pendulum2d,
    DoubleIntegral,
    Elliptic,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Antiderivative,
        Experiment::ExpOde,
        Experiment::Pendulum2d,
        Experiment::DoubleIntegral,
        Experiment::Elliptic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Antiderivative => "antiderivative",
            Experiment::ExpOde => "exp_ode",
            Experiment::Pendulum2d => "pendulum2d",
            Experiment::DoubleIntegral => "double_integral",
            Experiment::Elliptic => "elliptic",
        }
    }

    pub fn query_dim(self) -> usize {
        match self {
            Experiment::DoubleIntegral => 2,
            _ => 1,
        }
    }

    pub fn d_out(self) -> usize {
        match self {
            Experiment::Pendulum2d => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'")))
    }
}

/// Where the operator output is evaluated. One query set is shared by every function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuerySpec {
    /// Independent uniform draws on `[lo, hi]`.
    Random { count: usize, lo: f64, hi: f64 },
    /// Evenly spaced, both ends included.
    Partition { count: usize, lo: f64, hi: f64 },
    /// `per_axis x per_axis` tensor grid on `[lo, hi]^2`, first coordinate slowest.
    Grid2d { per_axis: usize, lo: f64, hi: f64 },
    /// The sensor locations themselves.
    Sensors,
}

impl QuerySpec {
    fn points<R: Rng + ?Sized>(&self, sensors: &SensorGrid, rng: &mut R) -> Vec<Vec<f64>> {
        let line = |count: usize, lo: f64, hi: f64| -> Vec<f64> {
            if count == 1 {
                vec![lo]
            } else {
                (0..count)
                    .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
                    .collect()
            }
        };
        match *self {
            QuerySpec::Random { count, lo, hi } => (0..count)
                .map(|_| vec![rng.random_range(lo..=hi)])
                .collect(),
            QuerySpec::Partition { count, lo, hi } => {
                line(count, lo, hi).into_iter().map(|y| vec![y]).collect()
            }
            QuerySpec::Grid2d { per_axis, lo, hi } => {
                let axis = line(per_axis, lo, hi);
                axis.iter()
                    .flat_map(|&a| axis.iter().map(move |&b| vec![a, b]))
                    .collect()
            }
            QuerySpec::Sensors => (0..sensors.len())
                .map(|k| sensors.point(k)[..sensors.dim()].to_vec())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub experiment: Experiment,
    pub n_functions: usize,
    pub sensors: SensorGrid,
    pub kernel: KernelConfig,
    /// When set, each function draws its own length scale uniformly from this range.
    #[serde(default)]
    pub length_scale_range: Option<(f64, f64)>,
    pub queries: QuerySpec,
    /// Output domain bounds, per axis.
    pub output_domain: (f64, f64),
    pub noise_scale: f64,
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default = "default_quadrature_order")]
    pub quadrature_order: usize,
}

fn default_quadrature_order() -> usize {
    3
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.sensors.validate()?;
        self.kernel.validate()?;
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!(
                "noise scale {} must be >= 0",
                self.noise_scale
            )));
        }
        if let Some((lo, hi)) = self.length_scale_range {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Config(format!(
                    "bad length-scale range [{lo}, {hi}]"
                )));
            }
        }
        let want_dim = match self.experiment {
            Experiment::DoubleIntegral => 2,
            _ => 1,
        };
        if self.sensors.dim() != want_dim {
            return Err(Error::Config(format!(
                "{} needs a {want_dim}D sensor grid",
                self.experiment
            )));
        }
        let query_ok = match (&self.queries, self.experiment) {
            (QuerySpec::Sensors, Experiment::Elliptic) => true,
            (_, Experiment::Elliptic) | (QuerySpec::Sensors, _) => false,
            (QuerySpec::Grid2d { .. }, e) => e == Experiment::DoubleIntegral,
            (_, e) => e != Experiment::DoubleIntegral,
        };
        if !query_ok {
            return Err(Error::Config(format!(
                "query layout {:?} does not fit {}",
                self.queries, self.experiment
            )));
        }
        let (lo, hi) = self.output_domain;
        let inside = |a: f64, b: f64| a >= lo && b <= hi;
        let ok = match self.queries {
            QuerySpec::Random { lo: a, hi: b, .. }
            | QuerySpec::Partition { lo: a, hi: b, .. }
            | QuerySpec::Grid2d { lo: a, hi: b, .. } => a <= b && inside(a, b),
            QuerySpec::Sensors => true,
        };
        if !ok {
            return Err(Error::Config("query range leaves the output domain".into()));
        }
        if self.quadrature_order == 0 {
            return Err(Error::Config("quadrature order must be positive".into()));
        }
        Ok(())
    }
}

/// Samples stored column-wise; sample `s` pairs function `function_index[s]`
/// with query `y.row(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    /// One row of sensor values per input function.
    pub functions: Array2<f64>,
    pub function_index: Vec<usize>,
    pub y: Array2<f64>,
    pub clean: Array2<f64>,
    pub noisy: Array2<f64>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn truth_for(spec: &DatasetSpec, field: &[f64], queries: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let solver = Dopri5::default();
    let scalar = |q: &[Vec<f64>]| q.iter().map(|y| y[0]).collect::<Vec<f64>>();
    let hi = spec.output_domain.1;
    match (spec.experiment, &spec.sensors) {
        (
            Experiment::Antiderivative | Experiment::ExpOde | Experiment::Pendulum2d,
            SensorGrid::Line { xs },
        ) => {
            let u = Interp1d::new(xs, field, spec.interpolation)?;
            let ys = scalar(queries);
            Ok(match spec.experiment {
                Experiment::Antiderivative => truth::antiderivative_truth(&u, &ys, hi, &solver)?
                    .into_iter()
                    .map(|v| vec![v])
                    .collect(),
                Experiment::ExpOde => truth::exp_ode_truth(&u, &ys, hi, &solver)?
                    .into_iter()
                    .map(|v| vec![v])
                    .collect(),
                _ => truth::pendulum_truth(&u, &ys, hi, &solver)?
                    .into_iter()
                    .map(|v| v.to_vec())
                    .collect(),
            })
        }
        (Experiment::DoubleIntegral, SensorGrid::Plane { xs, ys }) => {
            let u = Bilinear::new(xs, ys, field)?;
            let pts: Vec<[f64; 2]> = queries.iter().map(|q| [q[0], q[1]]).collect();
            Ok(
                truth::double_integral_truth(&u, &pts, spec.output_domain, spec.quadrature_order)?
                    .into_iter()
                    .map(|v| vec![v])
                    .collect(),
            )
        }
        (Experiment::Elliptic, SensorGrid::Line { xs }) => {
            let sol = truth::elliptic_truth(xs, field, |_| ELLIPTIC_SOURCE, ELLIPTIC_BOUNDARY)?;
            Ok(sol.into_iter().map(|v| vec![v]).collect())
        }
        _ => Err(Error::Config(format!(
            "{} does not fit its sensor grid",
            spec.experiment
        ))),
    }
}

/// Draws the input functions, evaluates the truth oracle on the shared query
/// set, and adds `noise_scale * N(0, 1)` to every target component.
///
/// Queries use RNG stream 0; function `i` draws its field from stream `4i + 1`
/// and its noise from stream `4i + 2`, so the result does not depend on the
/// number of worker threads.
pub fn build_dataset(spec: &DatasetSpec, seed: u64) -> Result<OperatorDataset> {
    spec.validate()?;
    let queries = spec.queries.points(&spec.sensors, &mut stream(seed, 0));
    let d = queries.len();
    let d_out = spec.experiment.d_out();
    let m = spec.sensors.len();
    let shared = match spec.length_scale_range {
        None => Some(GrfSampler::new(&spec.sensors, &spec.kernel)?),
        Some(_) => None,
    };

    let per_function: Vec<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> = (0..spec.n_functions)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, 4 * i as u64 + 1);
            let field = match (&shared, spec.length_scale_range) {
                (Some(s), _) => s.sample(&mut rng),
                (None, Some((lo, hi))) => {
                    let l = if hi > lo {
                        rng.random_range(lo..=hi)
                    } else {
                        lo
                    };
                    let cfg = KernelConfig {
                        length_scale: l,
                        ..spec.kernel
                    };
                    GrfSampler::new(&spec.sensors, &cfg)?.sample(&mut rng)
                }
                (None, None) => unreachable!(),
            };
            let clean = truth_for(spec, &field, &queries)?;
            let mut noise_rng = stream(seed, 4 * i as u64 + 2);
            let noisy = clean
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|v| {
                            let z: f64 = noise_rng.sample(StandardNormal);
                            v + spec.noise_scale * z
                        })
                        .collect()
                })
                .collect();
            Ok((field, clean, noisy))
        })
        .collect::<Result<_>>()?;

    let n = spec.n_functions;
    let dy = spec.experiment.query_dim();
    let mut functions = Array2::zeros((n, m));
    let mut y = Array2::zeros((n * d, dy));
    let mut clean = Array2::zeros((n * d, d_out));
    let mut noisy = Array2::zeros((n * d, d_out));
    let mut function_index = Vec::with_capacity(n * d);
    for (i, (field, c, z)) in per_function.into_iter().enumerate() {
        functions
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(&field));
        for k in 0..d {
            let s = i * d + k;
            function_index.push(i);
            for j in 0..dy {
                y[[s, j]] = queries[k][j];
            }
            for j in 0..d_out {
                clean[[s, j]] = c[k][j];
                noisy[[s, j]] = z[k][j];
            }
        }
    }
    Ok(OperatorDataset {
        spec: spec.clone(),
        seed,
        functions,
        function_index,
        y,
        clean,
        noisy,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    experiment: Experiment,
    seed: u64,
    n_functions: usize,
    n_samples: usize,
    noise_scale: f64,
    spec: DatasetSpec,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl OperatorDataset {
    pub fn len(&self) -> usize {
        self.function_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_functions(&self) -> usize {
        self.functions.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.clean.ncols()
    }

    pub fn query_dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn experiment(&self) -> Experiment {
        self.spec.experiment
    }

    /// Keeps the listed samples, in the listed order.
    pub fn select(&self, samples: &[usize]) -> Self {
        Self {
            spec: self.spec.clone(),
            seed: self.seed,
            functions: self.functions.clone(),
            function_index: samples.iter().map(|&s| self.function_index[s]).collect(),
            y: self.y.select(Axis(0), samples),
            clean: self.clean.select(Axis(0), samples),
            noisy: self.noisy.select(Axis(0), samples),
        }
    }

    /// Writes `meta.json`, `functions.csv` and `samples.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = Meta {
            experiment: self.spec.experiment,
            seed: self.seed,
            n_functions: self.n_functions(),
            n_samples: self.len(),
            noise_scale: self.spec.noise_scale,
            spec: self.spec.clone(),
        };
        let meta_path = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(&meta_path, e))?;
        fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;

        let fpath = dir.join("functions.csv");
        let mut w = csv::Writer::from_path(&fpath).map_err(|e| Error::format(&fpath, e))?;
        let header: Vec<String> = (0..self.functions.ncols())
            .map(|j| format!("u{j}"))
            .collect();
        w.write_record(&header)
            .map_err(|e| Error::format(&fpath, e))?;
        for row in self.functions.rows() {
            w.write_record(row.iter().map(|&v| fmt_f64(v)))
                .map_err(|e| Error::format(&fpath, e))?;
        }
        w.flush().map_err(|e| Error::io(&fpath, e))?;

        let spath = dir.join("samples.csv");
        let mut w = csv::Writer::from_path(&spath).map_err(|e| Error::format(&spath, e))?;
        let mut header = vec!["function_index".to_string()];
        header.extend((0..self.query_dim()).map(|j| format!("y{j}")));
        header.extend((0..self.d_out()).map(|j| format!("clean{j}")));
        header.extend((0..self.d_out()).map(|j| format!("noisy{j}")));
        w.write_record(&header)
            .map_err(|e| Error::format(&spath, e))?;
        for s in 0..self.len() {
            let mut rec = vec![self.function_index[s].to_string()];
            rec.extend(self.y.row(s).iter().map(|&v| fmt_f64(v)));
            rec.extend(self.clean.row(s).iter().map(|&v| fmt_f64(v)));
            rec.extend(self.noisy.row(s).iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec).map_err(|e| Error::format(&spath, e))?;
        }
        w.flush().map_err(|e| Error::io(&spath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e))?;
        meta.spec.validate()?;

        let fpath = dir.join("functions.csv");
        let frows = read_rows(&fpath)?;
        let m = meta.spec.sensors.len();
        if frows.len() != meta.n_functions || frows.iter().any(|r| r.len() != m) {
            return Err(Error::format(
                &fpath,
                format!("expected {} rows of {m} values", meta.n_functions),
            ));
        }
        let functions = Array2::from_shape_vec((meta.n_functions, m), frows.concat())
            .map_err(|e| Error::format(&fpath, e))?;

        let spath = dir.join("samples.csv");
        let srows = read_rows(&spath)?;
        let (dy, d_out) = (
            meta.spec.experiment.query_dim(),
            meta.spec.experiment.d_out(),
        );
        let width = 1 + dy + 2 * d_out;
        if srows.len() != meta.n_samples || srows.iter().any(|r| r.len() != width) {
            return Err(Error::format(
                &spath,
                format!("expected {} rows of {width} values", meta.n_samples),
            ));
        }
        let n = srows.len();
        let mut function_index = Vec::with_capacity(n);
        let (mut y, mut clean, mut noisy) = (
            Array2::zeros((n, dy)),
            Array2::zeros((n, d_out)),
            Array2::zeros((n, d_out)),
        );
        for (s, r) in srows.iter().enumerate() {
            let f = r[0];
            if f < 0.0 || f.fract() != 0.0 || f as usize >= meta.n_functions {
                return Err(Error::format(
                    &spath,
                    format!("row {s}: bad function index {f}"),
                ));
            }
            function_index.push(f as usize);
            for j in 0..dy {
                y[[s, j]] = r[1 + j];
            }
            for j in 0..d_out {
                clean[[s, j]] = r[1 + dy + j];
                noisy[[s, j]] = r[1 + dy + d_out + j];
            }
        }
        Ok(Self {
            spec: meta.spec,
            seed: meta.seed,
            functions,
            function_index,
            y,
            clean,
            noisy,
        })
    }
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::format(path, e))?;
            rec.iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::format(path, format!("'{v}': {e}")))
                })
                .collect()
        })
        .collect()
}
