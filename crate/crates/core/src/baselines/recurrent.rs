//! Unconstrained recurrent baseline and the physics-informed loss term.

use crate::autodiff::{Tape, Var};
use crate::blackbox::{BlackBoxConfig, BlackBoxNet, Standardizer};
use crate::dataset::{Dataset, FeatureSchema, SeriesBatch, Window};
use crate::error::{Error, Result};
use crate::model::{check_batch, input_leaves, ModelKind, RolloutOptions, TapeRollout};
use crate::params::ParamSet;
use crate::topology::BuildingTopology;

pub const DEFAULT_PINN_WEIGHT: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentBaseline {
    kind: ModelKind,
    topology: BuildingTopology,
    schema: FeatureSchema,
    params: ParamSet,
    net: BlackBoxNet,
    pinn_weight: f64,
}

impl RecurrentBaseline {
    /// `T_{k+1} = T_k + f(T_k, u_k, x_k, T_out)`. A nonzero `pinn_weight`
    /// is only meaningful for the physics-informed kind.
    pub fn new(
        topology: &BuildingTopology,
        schema: &FeatureSchema,
        cfg: &BlackBoxConfig,
        physics_informed: bool,
        pinn_weight: f64,
    ) -> Result<Self> {
        if !(pinn_weight >= 0.0) || !pinn_weight.is_finite() {
            return Err(Error::config(format!("physics-loss weight must be nonnegative, got {pinn_weight}")));
        }
        let m = topology.zone_count();
        let mut params = ParamSet::new();
        let net_cfg = BlackBoxConfig { input_dim: 2 * m + schema.dim() + 1, output_dim: m, ..cfg.clone() };
        let net = BlackBoxNet::init(&mut params, "rnn.", &net_cfg)?;
        Ok(RecurrentBaseline {
            kind: if physics_informed { ModelKind::Pinn } else { ModelKind::Blackbox },
            topology: topology.clone(),
            schema: schema.clone(),
            params,
            net,
            pinn_weight: if physics_informed { pinn_weight } else { 0.0 },
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn topology(&self) -> &BuildingTopology {
        &self.topology
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

    /// λ in `L_data + λ·L_phys`; zero for the plain black-box.
    pub fn pinn_weight(&self) -> f64 {
        self.pinn_weight
    }

    pub fn scaler(&self) -> &Standardizer {
        self.net.scaler()
    }

    pub fn set_scaler(&mut self, s: Standardizer) -> Result<()> {
        self.net.set_scaler(s)
    }

    pub fn fit_scaler(&mut self, ds: &Dataset, windows: &[Window]) -> Result<()> {
        let feats = self.schema.features();
        let mut rows = Vec::new();
        for w in windows {
            for k in w.start..w.start + w.len {
                let mut row: Vec<f64> = ds.temps.row(k).to_vec();
                row.extend(ds.power.row(k).iter());
                row.extend(feats.iter().map(|f| ds.feature_value(k, *f)));
                row.push(ds.ambient[k]);
                rows.push(row);
            }
        }
        let s = Standardizer::fit(self.net.config().input_dim, rows.iter().map(|r| r.as_slice()));
        self.net.set_scaler(s)
    }

    pub fn rollout(&self, tape: &mut Tape, batch: &SeriesBatch, opts: &RolloutOptions) -> Result<TapeRollout> {
        let m = self.topology.zone_count();
        let k0 = check_batch(batch, m)?;
        if batch.feature_dim() != self.schema.dim() {
            return Err(Error::input("batch features do not match the model's feature schema"));
        }
        let rows = batch.rows;
        let bound = self.params.bind(tape);
        let net = self.net.bind(tape, &bound, rows)?;
        let mut state = net.initial_state(tape);
        for k in 0..k0 {
            let parts = [
                tape.leaf(batch.temps[k].clone()),
                tape.leaf(batch.power[k].clone()),
                tape.leaf(batch.features[k].clone()),
                tape.leaf(batch.ambient[k].clone()),
            ];
            let input = tape.concat(&parts)?;
            net.step(tape, input, &mut state)?;
        }
        let (power, ambient) = input_leaves(tape, batch, k0);
        let horizon = batch.len - 1 - k0;
        let mut out = TapeRollout {
            k0,
            temps: Vec::with_capacity(horizon),
            drift: None,
            energy: None,
            power,
            ambient,
            taps: Vec::new(),
            bound,
        };
        let mut temp = tape.leaf(batch.temps[k0].clone());
        for j in 0..horizon {
            let k = k0 + j;
            if opts.temperature_taps {
                let tap = tape.zeros(rows, m);
                temp = tape.add(temp, tap)?;
                out.taps.push(tap);
            }
            let x = tape.leaf(batch.features[k].clone());
            let input = tape.concat(&[temp, out.power[j], x, out.ambient[j]])?;
            let inc = net.step(tape, input, &mut state)?;
            temp = tape.add(temp, inc)?;
            out.temps.push(temp);
        }
        Ok(out)
    }
}

/// Mean, over series, steps, and output zones, of
/// `Σ_y relu(−∂T_L^z/∂u_k^y) + relu(−∂T_L^z/∂T_out,k)` for the final
/// prediction `T_L`. The result stays differentiable with respect to the
/// parameters.
pub fn physics_penalty(tape: &mut Tape, ro: &TapeRollout) -> Result<Var> {
    let last = *ro.temps.last().ok_or_else(|| Error::input("empty rollout"))?;
    let (rows, m) = last.shape();
    let steps = ro.power.len();
    let mut wrt = ro.power.clone();
    wrt.extend(ro.ambient.iter().copied());
    let mut total: Option<Var> = None;
    for z in 0..m {
        let col = tape.slice_cols(last, z, 1)?;
        let scalar = tape.sum(col)?;
        let grads = tape.backward_graph(scalar, &wrt)?;
        for g in grads {
            let neg = tape.neg(g)?;
            let r = tape.relu(neg)?;
            let s = tape.sum(r)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
    }
    let total = total.expect("at least one zone");
    Ok(tape.scale(total, 1.0 / (rows * steps * m) as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::Array2;

    #[test]
    fn negative_power_coefficient_penalty() {
        // T_1 = T_0 − 0.3·u_0 + 0.2·T_out,0 over one step, one zone.
        let mut tape = Tape::new();
        let t0 = tape.leaf(Array2::from_elem((1, 1), 20.0));
        let u = tape.leaf(Array2::from_elem((1, 1), 1.0));
        let tout = tape.leaf(Array2::from_elem((1, 1), 5.0));
        let a = tape.scale(u, -0.3).unwrap();
        let b = tape.scale(tout, 0.2).unwrap();
        let s = tape.add(t0, a).unwrap();
        let t1 = tape.add(s, b).unwrap();
        let ro = TapeRollout {
            k0: 0,
            temps: vec![t1],
            drift: None,
            energy: None,
            power: vec![u],
            ambient: vec![tout],
            taps: Vec::new(),
            bound: ParamSet::new().bind(&mut tape),
        };
        let p = physics_penalty(&mut tape, &ro).unwrap();
        assert!((tape.scalar_value(p) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_is_config_error() {
        let topo = BuildingTopology::chain(1).unwrap();
        let r = RecurrentBaseline::new(&topo, &FeatureSchema::standard(), &BlackBoxConfig::default(), true, -1.0);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
