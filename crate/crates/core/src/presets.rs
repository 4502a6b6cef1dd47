//! Per-experiment datasets, architectures and training schedules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::branch::{BranchConfig, DiffusionSpec};
use crate::grf::{KernelConfig, SensorGrid};
use crate::model::{DeepOnetConfig, SonConfig};
use crate::nn::{Activation, LayerSpec};
use crate::oracles::{DatasetSpec, Experiment, QuerySpec};
use crate::training::{Batching, TrainConfig};
use crate::{Error, Result};

use Activation::{Arctan, Identity, Relu, Sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Reduced sizes that train in seconds to minutes on one core.
    #[default]
    Small,
    Paper,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Small => "small",
            Scale::Paper => "paper",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Scale::Small),
            "paper" => Ok(Scale::Paper),
            _ => Err(Error::Config(format!(
                "unknown scale '{s}' (small or paper)"
            ))),
        }
    }
}

/// Settings for the stochastic evaluation reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    /// Predictions per sample for noise recovery.
    pub noise_reps: usize,
    /// Evaluate noise recovery on at most this many evenly spaced test samples.
    #[serde(default)]
    pub noise_samples: Option<usize>,
    /// Ensemble members for the covariance study.
    #[serde(default)]
    pub ensemble_members: usize,
    /// Length scale of the fields used for the ensemble study.
    #[serde(default)]
    pub ensemble_length_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub experiment: Experiment,
    pub scale: Scale,
    pub train_data: DatasetSpec,
    pub test_data: DatasetSpec,
    pub son: SonConfig,
    pub baseline: DeepOnetConfig,
    pub train: TrainConfig,
    pub reports: ReportConfig,
}

impl ExperimentPreset {
    pub fn validate(&self) -> Result<()> {
        self.train_data.validate()?;
        self.test_data.validate()?;
        self.son.validate()?;
        self.baseline.validate()?;
        self.train.validate()?;
        for d in [&self.train_data, &self.test_data] {
            if d.experiment != self.experiment {
                return Err(Error::Config(
                    "dataset experiment differs from the preset".into(),
                ));
            }
            let m = d.sensors.len();
            for (name, shape) in [
                ("son", &self.son.branch.input_shape),
                ("baseline", &self.baseline.input_shape),
            ] {
                if shape.iter().product::<usize>() != m {
                    return Err(Error::Config(format!(
                        "{name} input {shape:?} does not fit {m} sensors"
                    )));
                }
            }
        }
        if self.reports.noise_reps < 2 {
            return Err(Error::Config("noise_reps must be >= 2".into()));
        }
        Ok(())
    }

    /// Applies a partial TOML document on top of this preset. Tables merge
    /// key by key; arrays and scalars replace.
    pub fn merge_toml(&self, text: &str) -> Result<Self> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config file: {e}")))?;
        let mut base = toml::Table::try_from(self)
            .map_err(|e| Error::Config(format!("preset to toml: {e}")))?;
        merge(&mut base, overlay);
        let out: Self = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config file: {e}")))?;
        out.validate()?;
        Ok(out)
    }

    /// Reads a complete preset written by [`ExperimentPreset::to_toml`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("preset to toml: {e}")))
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn dense_stack(widths: &[usize], hidden: Activation, last: Activation) -> Vec<LayerSpec> {
    let n = widths.len() - 1;
    (0..n)
        .map(|i| {
            LayerSpec::dense(
                widths[i],
                widths[i + 1],
                if i + 1 == n { last } else { hidden },
            )
        })
        .collect()
}

fn line_data(
    experiment: Experiment,
    functions: usize,
    queries: QuerySpec,
    domain: (f64, f64),
    noise: f64,
) -> DatasetSpec {
    DatasetSpec {
        experiment,
        n_functions: functions,
        sensors: SensorGrid::uniform_line(0.0, 5.0, 100),
        kernel: KernelConfig {
            length_scale: 0.2,
            variance: 1.0,
            jitter: 1e-8,
        },
        length_scale_range: None,
        queries,
        output_domain: domain,
        noise_scale: noise,
        interpolation: Default::default(),
        quadrature_order: 3,
    }
}

fn one_dim(experiment: Experiment, scale: Scale) -> ExperimentPreset {
    let hi = if experiment == Experiment::Antiderivative {
        5.0
    } else {
        1.0
    };
    let d_out = experiment.d_out();
    let pendulum = experiment == Experiment::Pendulum2d;
    let (train_fns, train_q, test_fns, test_q, epochs) = match scale {
        Scale::Paper => (100, 100, 1000, 1000, 2000),
        Scale::Small => (
            20,
            20,
            20,
            50,
            match experiment {
                Experiment::Antiderivative => 1000,
                Experiment::ExpOde => 700,
                _ => 500,
            },
        ),
    };
    let steps = if pendulum { 10 } else { 6 };
    // N(0, 2) is read as variance 2
    let sigma_std = if pendulum { 2f64.sqrt() } else { 1.0 };
    let son = SonConfig {
        branch: BranchConfig {
            input_shape: vec![100],
            steps,
            pre_projection: vec![],
            drift: dense_stack(&[100, 100, 100, 100], Relu, Identity),
            diffusion: DiffusionSpec::Parameter {
                per_neuron: false,
                init_mean: 0.0,
                init_std: sigma_std,
            },
            post_projection: vec![],
            fresh_backward_noise: true,
            paper_indexing: false,
        },
        trunk: dense_stack(&[1, 100, 100 * d_out], Relu, Identity),
        query_dim: 1,
        d_out,
        dropout_at_inference: true,
    };
    let baseline = DeepOnetConfig {
        input_shape: vec![100],
        branch: dense_stack(&[100, 100, 100, 100], Relu, Identity),
        trunk: dense_stack(&[1, 64, 100, 100 * d_out], Relu, Identity),
        query_dim: 1,
        d_out,
    };
    let (lr, decay_start, decay_interval, batch_size) = match scale {
        Scale::Paper => (1e-3, 1000, 500, 0),
        Scale::Small => (3e-3, epochs / 2, epochs / 10, 50),
    };
    ExperimentPreset {
        experiment,
        scale,
        train_data: line_data(
            experiment,
            train_fns,
            QuerySpec::Random {
                count: train_q,
                lo: 0.0,
                hi,
            },
            (0.0, hi),
            0.1,
        ),
        test_data: line_data(
            experiment,
            test_fns,
            QuerySpec::Partition {
                count: test_q,
                lo: 0.0,
                hi,
            },
            (0.0, hi),
            0.1,
        ),
        son,
        baseline,
        train: TrainConfig {
            epochs,
            learning_rate: lr,
            decay_factor: 0.9,
            decay_interval,
            decay_start,
            batch_size,
            ..Default::default()
        },
        reports: ReportConfig {
            noise_reps: 100,
            noise_samples: Some(2000),
            ensemble_members: 0,
            ensemble_length_scale: None,
        },
    }
}

fn double_integral(scale: Scale) -> ExperimentPreset {
    let (train_fns, test_fns, per_axis, epochs) = match scale {
        Scale::Paper => (100, 20, 30, 200),
        Scale::Small => (25, 5, 15, 200),
    };
    let data = |functions: usize| DatasetSpec {
        experiment: Experiment::DoubleIntegral,
        n_functions: functions,
        sensors: SensorGrid::uniform_square(0.5, 1.5, 20),
        kernel: KernelConfig {
            length_scale: 0.2,
            variance: 1.0,
            jitter: 1e-8,
        },
        length_scale_range: None,
        queries: QuerySpec::Grid2d {
            per_axis,
            lo: 0.5,
            hi: 1.5,
        },
        output_domain: (0.5, 1.5),
        noise_scale: 0.05,
        interpolation: Default::default(),
        quadrature_order: 3,
    };
    let steps = 5;
    let son = SonConfig {
        branch: BranchConfig {
            input_shape: vec![1, 20, 20],
            steps,
            pre_projection: vec![LayerSpec::max_pool(2)],
            drift: vec![LayerSpec::conv2d(1, 1, 3, Relu)],
            diffusion: DiffusionSpec::Network {
                layers: vec![LayerSpec::conv2d(1, 1, 3, Arctan), LayerSpec::dropout(0.9)],
            },
            post_projection: vec![LayerSpec::max_pool(2), LayerSpec::flatten()],
            fresh_backward_noise: false,
            paper_indexing: false,
        },
        trunk: dense_stack(&[2, 100, 25], Sigmoid, Identity),
        query_dim: 2,
        d_out: 1,
        dropout_at_inference: true,
    };
    let mut branch = vec![LayerSpec::max_pool(2)];
    branch.extend((0..steps).map(|_| LayerSpec::conv2d(1, 1, 3, Relu)));
    branch.extend([LayerSpec::max_pool(2), LayerSpec::flatten()]);
    let baseline = DeepOnetConfig {
        input_shape: vec![1, 20, 20],
        branch,
        trunk: dense_stack(&[2, 100, 25], Sigmoid, Identity),
        query_dim: 2,
        d_out: 1,
    };
    let queries = per_axis * per_axis;
    ExperimentPreset {
        experiment: Experiment::DoubleIntegral,
        scale,
        train_data: data(train_fns),
        test_data: data(test_fns),
        son,
        baseline,
        train: TrainConfig {
            epochs,
            learning_rate: 1e-3,
            decay_factor: 0.9,
            decay_interval: 25,
            decay_start: 0,
            // one function's queries per batch
            batch_size: queries,
            batching: Batching::Blocks,
            ..Default::default()
        },
        reports: ReportConfig {
            noise_reps: 20,
            noise_samples: None,
            ensemble_members: 0,
            ensemble_length_scale: None,
        },
    }
}

fn elliptic(scale: Scale) -> ExperimentPreset {
    let (m, train_fns, test_fns, members) = match scale {
        Scale::Paper => (100, 5000, 100, 1000),
        Scale::Small => (50, 300, 20, 1000),
    };
    let (epochs, batch_size, decay_start, decay_interval) = match scale {
        Scale::Paper => (100, 500, 20, 5),
        Scale::Small => (400, 100, 100, 15),
    };
    let data = |functions: usize| DatasetSpec {
        experiment: Experiment::Elliptic,
        n_functions: functions,
        sensors: SensorGrid::uniform_line(0.0, 1.0, m),
        kernel: KernelConfig {
            length_scale: 1.5,
            variance: 0.01,
            jitter: 1e-8,
        },
        length_scale_range: Some((1.0, 2.0)),
        queries: QuerySpec::Sensors,
        output_domain: (0.0, 1.0),
        noise_scale: 0.0,
        interpolation: Default::default(),
        quadrature_order: 3,
    };
    let son = SonConfig {
        branch: BranchConfig {
            input_shape: vec![m],
            steps: 3,
            pre_projection: vec![],
            drift: dense_stack(&[m, m, m], Arctan, Identity),
            diffusion: DiffusionSpec::Parameter {
                per_neuron: false,
                init_mean: 0.0,
                init_std: 0.01,
            },
            post_projection: vec![],
            fresh_backward_noise: false,
            paper_indexing: false,
        },
        // sigmoid units start out nearly linear on [0, 1] and fit the mean curve slowly
        trunk: dense_stack(&[1, 100, 100, m], Relu, Identity),
        query_dim: 1,
        d_out: 1,
        dropout_at_inference: true,
    };
    let baseline = DeepOnetConfig {
        input_shape: vec![m],
        branch: dense_stack(&[m, m, m, m], Arctan, Identity),
        trunk: dense_stack(&[1, 100, 100, m], Relu, Identity),
        query_dim: 1,
        d_out: 1,
    };
    ExperimentPreset {
        experiment: Experiment::Elliptic,
        scale,
        train_data: data(train_fns),
        test_data: data(test_fns),
        son,
        baseline,
        train: TrainConfig {
            epochs,
            learning_rate: 2e-3,
            decay_factor: 0.9,
            decay_interval,
            decay_start,
            batch_size,
            ..Default::default()
        },
        reports: ReportConfig {
            noise_reps: 20,
            noise_samples: Some(1000),
            ensemble_members: members,
            ensemble_length_scale: Some(1.5),
        },
    }
}

pub fn preset(experiment: Experiment, scale: Scale) -> ExperimentPreset {
    match experiment {
        Experiment::Antiderivative | Experiment::ExpOde | Experiment::Pendulum2d => {
            one_dim(experiment, scale)
        }
        Experiment::DoubleIntegral => double_integral(scale),
        Experiment::Elliptic => elliptic(scale),
    }
}

/// A baseline with one plain layer per SON drift layer, for timing comparisons
/// at matched depth.
pub fn depth_matched_baseline(p: &ExperimentPreset) -> DeepOnetConfig {
    let mut out = p.baseline.clone();
    let branch = &p.son.branch;
    let mut layers = branch.pre_projection.clone();
    for _ in 0..branch.steps {
        layers.extend(branch.drift.iter().cloned());
    }
    layers.extend(branch.post_projection.iter().cloned());
    out.branch = layers;
    out.trunk = p.son.trunk.clone();
    out
}
