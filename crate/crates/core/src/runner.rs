//! End-to-end pieces shared by the command line and the acceptance suite:
//! datasets for a preset, model construction, training and the reports.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    covariance_compare, ensemble_stats, mean_agreement, CovarianceReport, Ensemble,
};
use crate::model::{gather_inputs, AnyModel, DeepOnet, Predictor, SonModel};
use crate::nn::Tensor;
use crate::oracles::{build_dataset, DatasetSpec, OperatorDataset};
use crate::presets::ExperimentPreset;
use crate::training::{train, EpochRecord, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Son,
    Baseline,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Son => "son",
            ModelKind::Baseline => "baseline",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "son" => Ok(ModelKind::Son),
            "baseline" => Ok(ModelKind::Baseline),
            _ => Err(Error::Config(format!(
                "unknown model '{s}' (son or baseline)"
            ))),
        }
    }
}

/// Seeds of the train and test sets drawn for a run seed.
pub fn data_seeds(seed: u64) -> (u64, u64) {
    (seed, seed.wrapping_add(1))
}

pub fn generate(
    preset: &ExperimentPreset,
    seed: u64,
) -> Result<(OperatorDataset, OperatorDataset)> {
    let (a, b) = data_seeds(seed);
    Ok((
        build_dataset(&preset.train_data, a)?,
        build_dataset(&preset.test_data, b)?,
    ))
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    rng
}

pub fn build_model(preset: &ExperimentPreset, kind: ModelKind, seed: u64) -> Result<AnyModel> {
    let mut rng = init_rng(seed);
    Ok(match kind {
        ModelKind::Son => AnyModel::Son(SonModel::init(preset.son.clone(), &mut rng)?),
        ModelKind::Baseline => {
            AnyModel::Baseline(DeepOnet::init(preset.baseline.clone(), &mut rng)?)
        }
    })
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Son(_) => ModelKind::Son,
            AnyModel::Baseline(_) => ModelKind::Baseline,
        }
    }

    fn as_predictor(&self) -> &dyn Predictor {
        match self {
            AnyModel::Son(m) => m,
            AnyModel::Baseline(m) => m,
        }
    }

    /// Trains either model; `on_epoch` sees the model after each epoch.
    pub fn train(
        &mut self,
        ds: &OperatorDataset,
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochRecord, &AnyModel) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        match self {
            AnyModel::Son(m) => train(m, ds, cfg, |r, m| on_epoch(r, &AnyModel::Son(m.clone()))),
            AnyModel::Baseline(m) => train(m, ds, cfg, |r, m| {
                on_epoch(r, &AnyModel::Baseline(m.clone()))
            }),
        }
    }
}

impl Predictor for AnyModel {
    fn input_shape(&self) -> &[usize] {
        self.as_predictor().input_shape()
    }

    fn query_dim(&self) -> usize {
        self.as_predictor().query_dim()
    }

    fn d_out(&self) -> usize {
        self.as_predictor().d_out()
    }

    fn predict(&self, u: &Tensor, y: &Array2<f64>, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        self.as_predictor().predict(u, y, rng)
    }

    fn predict_grid(
        &self,
        u: &Tensor,
        y: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array3<f64>> {
        self.as_predictor().predict_grid(u, y, rng)
    }
}

/// Outcome of comparing a model ensemble with oracle ensembles.
#[derive(Debug, Clone)]
pub struct EnsembleStudy {
    pub reference: Ensemble,
    pub model: Ensemble,
    pub covariance: CovarianceReport,
    /// Fraction of grid points whose means agree within three pooled standard errors.
    pub mean_agreement: f64,
}

impl EnsembleStudy {
    pub fn floor(&self) -> f64 {
        self.covariance.mc_floor.unwrap_or(f64::NAN)
    }
}

/// Spec of the fields used for the ensemble study: fixed length scale, no
/// target noise.
pub fn ensemble_spec(preset: &ExperimentPreset, members: usize) -> Result<DatasetSpec> {
    let l = preset
        .reports
        .ensemble_length_scale
        .ok_or_else(|| Error::Config(format!("{} has no ensemble study", preset.experiment)))?;
    let mut spec = preset.test_data.clone();
    spec.n_functions = members;
    spec.kernel.length_scale = l;
    spec.length_scale_range = None;
    spec.noise_scale = 0.0;
    spec.validate()?;
    Ok(spec)
}

/// Two independent oracle ensembles give the reference and the Monte Carlo
/// floor; the model sees a third, independent set of input fields.
pub fn ensemble_study(
    model: &AnyModel,
    preset: &ExperimentPreset,
    members: usize,
    seed: u64,
) -> Result<EnsembleStudy> {
    let spec = ensemble_spec(preset, members)?;
    let reference_ds = build_dataset(&spec, seed.wrapping_add(10))?;
    let independent_ds = build_dataset(&spec, seed.wrapping_add(11))?;
    let inputs_ds = build_dataset(&spec, seed.wrapping_add(12))?;
    let reference = Ensemble::from_dataset(&reference_ds)?;
    let independent = Ensemble::from_dataset(&independent_ds)?;
    let q = reference.grid.nrows();
    let firsts: Vec<usize> = (0..members).map(|i| i * q).collect();
    let inputs = gather_inputs(&inputs_ds, &firsts, model.input_shape())?;
    let estimate = ensemble_stats(model, &inputs, &reference.grid, seed)?;
    let covariance = covariance_compare(&estimate, &reference, Some(&independent))?;
    Ok(EnsembleStudy {
        mean_agreement: mean_agreement(&estimate, &reference, 3.0),
        reference,
        model: estimate,
        covariance,
    })
}

/// Final-epoch train MSE from a history, or NaN when nothing was trained.
pub fn final_loss(history: &[EpochRecord]) -> f64 {
    history.last().map_or(f64::NAN, |r| r.mean_loss)
}
