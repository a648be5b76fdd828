//! Linear base model plus a learned additive residual.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blackbox::{BlackBoxConfig, BlackBoxNet, Standardizer};
use crate::dataset::{Dataset, FeatureSchema, SeriesBatch, Window};
use crate::error::{Error, Result};
use crate::model::{check_batch, ModelKind, RolloutOptions, TapeRollout};
use crate::params::ParamSet;

use super::linear::LinearModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    pub blackbox: BlackBoxConfig,
    /// During fitting, compute base predictions one step ahead from measured
    /// temperatures instead of along free base rollouts.
    pub one_step_base: bool,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        ResidualConfig { blackbox: BlackBoxConfig::default(), one_step_base: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualModel {
    base: LinearModel,
    consistent: bool,
    one_step_base: bool,
    schema: FeatureSchema,
    params: ParamSet,
    net: BlackBoxNet,
}

impl ResidualModel {
    /// The consistent variant's net sees exogenous features only; the other
    /// also sees temperatures, power, and ambient temperature.
    pub fn new(base: LinearModel, schema: &FeatureSchema, consistent: bool, cfg: &ResidualConfig) -> Result<Self> {
        let m = base.topology().zone_count();
        let d = schema.dim();
        let input_dim = if consistent { d } else { 2 * m + d + 1 };
        let mut params = ParamSet::new();
        let net_cfg = BlackBoxConfig { input_dim, output_dim: m, ..cfg.blackbox.clone() };
        let net = BlackBoxNet::init(&mut params, "res.", &net_cfg)?;
        Ok(ResidualModel { base, consistent, one_step_base: cfg.one_step_base, schema: schema.clone(), params, net })
    }

    pub fn kind(&self) -> ModelKind {
        if self.consistent {
            ModelKind::ResCons
        } else {
            ModelKind::Res
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.consistent
    }

    pub fn one_step_base(&self) -> bool {
        self.one_step_base
    }

    pub fn base(&self) -> &LinearModel {
        &self.base
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn net(&self) -> &BlackBoxNet {
        &self.net
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn scaler(&self) -> &Standardizer {
        self.net.scaler()
    }

    pub fn set_scaler(&mut self, s: Standardizer) -> Result<()> {
        self.net.set_scaler(s)
    }

    pub fn zero_residual(&mut self) {
        self.net.zero_output(&mut self.params);
    }

    fn input_row(&self, ds: &Dataset, k: usize) -> Vec<f64> {
        let feats = self.schema.features();
        let x = feats.iter().map(|f| ds.feature_value(k, *f));
        if self.consistent {
            return x.collect();
        }
        let mut row: Vec<f64> = ds.temps.row(k).to_vec();
        row.extend(x);
        row.extend(ds.power.row(k).iter());
        row.push(ds.ambient[k]);
        row
    }

    pub fn fit_scaler(&mut self, ds: &Dataset, windows: &[Window]) -> Result<()> {
        let mut rows = Vec::new();
        for w in windows {
            for k in w.start..w.start + w.len {
                rows.push(self.input_row(ds, k));
            }
        }
        let s = Standardizer::fit(self.net.config().input_dim, rows.iter().map(|r| r.as_slice()));
        self.net.set_scaler(s)
    }

    fn net_input(&self, tape: &mut Tape, batch: &SeriesBatch, k: usize, temp: Var, power: Var, ambient: Var) -> Result<Var> {
        let x = tape.leaf(batch.features[k].clone());
        if self.consistent {
            return Ok(x);
        }
        Ok(tape.concat(&[temp, x, power, ambient])?)
    }

    pub fn rollout(&self, tape: &mut Tape, batch: &SeriesBatch, opts: &RolloutOptions) -> Result<TapeRollout> {
        let m = self.base.topology().zone_count();
        let k0 = check_batch(batch, m)?;
        if batch.feature_dim() != self.schema.dim() {
            return Err(Error::input("batch features do not match the model's feature schema"));
        }
        let one_step = opts.fitting && self.one_step_base;
        let base_opts = RolloutOptions { temperature_taps: opts.temperature_taps, injected_drift: None, fitting: opts.fitting };
        let mut ro = self.base.rollout_with(tape, batch, &base_opts, one_step)?;
        let bound = self.params.bind(tape);
        let net = self.net.bind(tape, &bound, batch.rows)?;
        let mut state = net.initial_state(tape);
        for k in 0..k0 {
            let temp = tape.leaf(batch.temps[k].clone());
            let power = tape.leaf(batch.power[k].clone());
            let ambient = tape.leaf(batch.ambient[k].clone());
            let input = self.net_input(tape, batch, k, temp, power, ambient)?;
            net.step(tape, input, &mut state)?;
        }
        let base_temps = std::mem::take(&mut ro.temps);
        let mut prev_base = tape.leaf(batch.temps[k0].clone());
        for (j, base_next) in base_temps.into_iter().enumerate() {
            let k = k0 + j;
            let input = self.net_input(tape, batch, k, prev_base, ro.power[j], ro.ambient[j])?;
            let res = net.step(tape, input, &mut state)?;
            ro.temps.push(tape.add(base_next, res)?);
            prev_base = base_next;
        }
        ro.bound = bound;
        Ok(ro)
    }

    /// Replaces the base model, keeping the trained residual.
    pub fn with_base(mut self, base: LinearModel) -> Result<Self> {
        if base.topology() != self.base.topology() {
            return Err(Error::input("replacement base model has a different topology"));
        }
        self.base = base;
        Ok(self)
    }
}

/// Per-row one-step residual targets `T_{k+1} − T̂_{k+1}` along base
/// rollouts, `steps × m` each.
pub fn residual_targets(base: &LinearModel, batch: &SeriesBatch) -> Result<Vec<Array2<f64>>> {
    let mut tape = Tape::new();
    let ro = base.rollout(&mut tape, batch, &RolloutOptions::default())?;
    let pairs = crate::model::paired(&tape, &ro, batch);
    Ok(pairs.into_iter().map(|p| &p.measured - &p.predicted).collect())
}
