//! Shared rollout contract for every model kind.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::baselines::arx::ArxModel;
use crate::baselines::linear::LinearModel;
use crate::baselines::recurrent::RecurrentBaseline;
use crate::baselines::residual::ResidualModel;
use crate::dataset::{Dataset, SeriesBatch, Window};
use crate::error::{Error, Result};
use crate::metrics::SequencePrediction;
use crate::params::{Bound, ParamId, ParamSet};
use crate::pcnn::PcnnModel;
use crate::topology::BuildingTopology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    XPcnn,
    MPcnn,
    SPcnn,
    Linear,
    Res,
    ResCons,
    Arx,
    Blackbox,
    Pinn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::XPcnn,
        ModelKind::MPcnn,
        ModelKind::SPcnn,
        ModelKind::Linear,
        ModelKind::Res,
        ModelKind::ResCons,
        ModelKind::Arx,
        ModelKind::Blackbox,
        ModelKind::Pinn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::XPcnn => "x-pcnn",
            ModelKind::MPcnn => "m-pcnn",
            ModelKind::SPcnn => "s-pcnn",
            ModelKind::Linear => "linear",
            ModelKind::Res => "res",
            ModelKind::ResCons => "res-cons",
            ModelKind::Arx => "arx",
            ModelKind::Blackbox => "blackbox",
            ModelKind::Pinn => "pinn",
        }
    }

    pub fn is_pcnn(self) -> bool {
        matches!(self, ModelKind::XPcnn | ModelKind::MPcnn | ModelKind::SPcnn)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown model kind '{s}'")))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RolloutOptions {
    /// Insert zero-valued leaves added to the temperature state at each
    /// free-running step, so gradients with respect to past temperatures
    /// can be read off.
    pub temperature_taps: bool,
    /// Replace every black-box increment of a PCNN by these `rows × m`
    /// values, one per free-running step.
    pub injected_drift: Option<Vec<Array2<f64>>>,
    /// The rollout serves parameter fitting rather than deployment.
    pub fitting: bool,
}

/// Tape handles produced by one rollout.
///
/// With `k0 = warm_start - 1`, index `h - 1` of `temps` holds the prediction
/// for step `k0 + h`; index `j` of `power`, `ambient`, and `taps` refers to
/// step `k0 + j`.
pub struct TapeRollout {
    pub k0: usize,
    pub temps: Vec<Var>,
    pub drift: Option<Vec<Var>>,
    pub energy: Option<Vec<Var>>,
    pub power: Vec<Var>,
    pub ambient: Vec<Var>,
    pub taps: Vec<Var>,
    pub bound: Bound,
}

impl TapeRollout {
    pub fn horizon(&self) -> usize {
        self.temps.len()
    }

    /// Predictions as `rows` sequences of `horizon × m`.
    pub fn predictions(&self, tape: &Tape) -> Vec<Array2<f64>> {
        stack_rows(tape, &self.temps)
    }
}

/// Turns per-step `rows × m` values into per-row `steps × m` arrays.
pub fn stack_rows(tape: &Tape, steps: &[Var]) -> Vec<Array2<f64>> {
    let Some(first) = steps.first() else { return Vec::new() };
    let (rows, m) = first.shape();
    (0..rows)
        .map(|r| Array2::from_shape_fn((steps.len(), m), |(h, z)| tape.value(steps[h])[[r, z]]))
        .collect()
}

/// Leaf per free-running step for power and ambient inputs.
pub(crate) fn input_leaves(tape: &mut Tape, batch: &SeriesBatch, k0: usize) -> (Vec<Var>, Vec<Var>) {
    let power = (k0..batch.len - 1).map(|k| tape.leaf(batch.power[k].clone())).collect();
    let ambient = (k0..batch.len - 1).map(|k| tape.leaf(batch.ambient[k].clone())).collect();
    (power, ambient)
}

pub(crate) fn check_batch(batch: &SeriesBatch, zones: usize) -> Result<usize> {
    if batch.zones != zones {
        return Err(Error::input(format!("batch has {} zones, model has {zones}", batch.zones)));
    }
    if batch.warm_start == 0 || batch.len < batch.warm_start + 1 {
        return Err(Error::input(format!(
            "sequence of {} steps is shorter than warm start {} + 1",
            batch.len, batch.warm_start
        )));
    }
    Ok(batch.prediction_start())
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Pcnn(PcnnModel),
    Linear(LinearModel),
    Residual(ResidualModel),
    Arx(ArxModel),
    Recurrent(RecurrentBaseline),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Pcnn(p) => p.kind(),
            AnyModel::Linear(_) => ModelKind::Linear,
            AnyModel::Residual(r) => r.kind(),
            AnyModel::Arx(_) => ModelKind::Arx,
            AnyModel::Recurrent(r) => r.kind(),
        }
    }

    pub fn topology(&self) -> &BuildingTopology {
        match self {
            AnyModel::Pcnn(p) => p.topology(),
            AnyModel::Linear(l) => l.topology(),
            AnyModel::Residual(r) => r.base().topology(),
            AnyModel::Arx(a) => a.topology(),
            AnyModel::Recurrent(r) => r.topology(),
        }
    }

    pub fn zones(&self) -> usize {
        self.topology().zone_count()
    }

    /// Parameters updated by gradient training; empty for fitted models.
    pub fn params(&self) -> &ParamSet {
        static EMPTY: std::sync::OnceLock<ParamSet> = std::sync::OnceLock::new();
        match self {
            AnyModel::Pcnn(p) => p.params(),
            AnyModel::Residual(r) => r.params(),
            AnyModel::Recurrent(r) => r.params(),
            AnyModel::Linear(_) | AnyModel::Arx(_) => EMPTY.get_or_init(ParamSet::new),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamSet> {
        match self {
            AnyModel::Pcnn(p) => Some(p.params_mut()),
            AnyModel::Residual(r) => Some(r.params_mut()),
            AnyModel::Recurrent(r) => Some(r.params_mut()),
            AnyModel::Linear(_) | AnyModel::Arx(_) => None,
        }
    }

    pub fn is_gradient_trained(&self) -> bool {
        !matches!(self, AnyModel::Linear(_) | AnyModel::Arx(_))
    }

    /// Parameter groups that are selected independently per zone during
    /// training, if any.
    pub fn zone_groups(&self) -> Option<Vec<Vec<ParamId>>> {
        match self {
            AnyModel::Pcnn(p) => p.zone_groups(),
            _ => None,
        }
    }

    /// Fits input standardization on the training windows.
    pub fn fit_scalers(&mut self, dataset: &Dataset, windows: &[Window]) -> Result<()> {
        match self {
            AnyModel::Pcnn(p) => p.fit_scalers(dataset, windows),
            AnyModel::Residual(r) => r.fit_scaler(dataset, windows),
            AnyModel::Recurrent(r) => r.fit_scaler(dataset, windows),
            AnyModel::Linear(_) | AnyModel::Arx(_) => Ok(()),
        }
    }

    pub fn rollout(&self, tape: &mut Tape, batch: &SeriesBatch, opts: &RolloutOptions) -> Result<TapeRollout> {
        match self {
            AnyModel::Pcnn(p) => p.rollout(tape, batch, opts),
            AnyModel::Linear(l) => l.rollout(tape, batch, opts),
            AnyModel::Residual(r) => r.rollout(tape, batch, opts),
            AnyModel::Arx(a) => a.rollout(tape, batch, opts),
            AnyModel::Recurrent(r) => r.rollout(tape, batch, opts),
        }
    }

    /// Free-running predictions paired with measurements, one per row.
    pub fn predict(&self, batch: &SeriesBatch) -> Result<Vec<SequencePrediction>> {
        let mut tape = Tape::new();
        let ro = self.rollout(&mut tape, batch, &RolloutOptions::default())?;
        Ok(paired(&tape, &ro, batch))
    }

    pub fn count_parameters(&self) -> usize {
        match self {
            AnyModel::Linear(l) => l.count_parameters(),
            AnyModel::Arx(a) => a.count_parameters(),
            AnyModel::Residual(r) => r.params().scalar_count() + r.base().count_parameters(),
            _ => self.params().scalar_count(),
        }
    }
}

/// Predictions of a rollout with the matching measured temperatures.
pub fn paired(tape: &Tape, ro: &TapeRollout, batch: &SeriesBatch) -> Vec<SequencePrediction> {
    let preds = ro.predictions(tape);
    let horizon = ro.horizon();
    preds
        .into_iter()
        .enumerate()
        .map(|(r, predicted)| {
            let measured = Array2::from_shape_fn((horizon, batch.zones), |(h, z)| batch.temps[ro.k0 + 1 + h][[r, z]]);
            SequencePrediction { predicted, measured }
        })
        .collect()
}

/// Per-step `D`, `E`, and `T` values of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub warm_start: usize,
    pub drift: Vec<Vec<f64>>,
    pub energy: Vec<Vec<f64>>,
    pub temps: Vec<Vec<f64>>,
}

impl Trace {
    /// Row `row` of a rollout. Warm-start steps hold the measurements with
    /// `D = T` and `E = 0`.
    pub fn from_rollout(tape: &Tape, ro: &TapeRollout, batch: &SeriesBatch, row: usize) -> Trace {
        let m = batch.zones;
        let meas = |k: usize| batch.temps[k].row(row).to_vec();
        let mut t = Trace { warm_start: batch.warm_start, drift: Vec::new(), energy: Vec::new(), temps: Vec::new() };
        for k in 0..=ro.k0 {
            t.temps.push(meas(k));
            t.drift.push(meas(k));
            t.energy.push(vec![0.0; m]);
        }
        let get = |v: Var| tape.value(v).index_axis(Axis(0), row).to_vec();
        for h in 0..ro.horizon() {
            let temp = get(ro.temps[h]);
            t.drift.push(ro.drift.as_ref().map_or_else(|| temp.clone(), |d| get(d[h])));
            t.energy.push(ro.energy.as_ref().map_or_else(|| vec![0.0; m], |e| get(e[h])));
            t.temps.push(temp);
        }
        t
    }
}
