//! Multi-zone PCNN variants.
//!
//! All three share the rollout `T = D + E`: the black-box module advances
//! `D` from exogenous features only, and the physics module advances `E`
//! from power, ambient, and neighbor temperatures.
//!
//! - `X`: one independent single-zone model per zone, coupling coefficients
//!   learned per direction and averaged after training.
//! - `M`: shared physics, one black-box net per zone.
//! - `S`: shared physics and one black-box net with `m` outputs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blackbox::{BlackBoxConfig, BlackBoxNet, BoundNet, Standardizer};
use crate::dataset::{Dataset, FeatureSchema, SeriesBatch, Window};
use crate::error::{Error, Result};
use crate::model::{check_batch, input_leaves, ModelKind, RolloutOptions, TapeRollout};
use crate::params::{ParamId, ParamSet};
use crate::physics::{tape_energy_step, EffectiveParams, Parametrization, PhysicsModule, Scales};
use crate::topology::BuildingTopology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    X,
    M,
    S,
}

impl Variant {
    pub fn kind(self) -> ModelKind {
        match self {
            Variant::X => ModelKind::XPcnn,
            Variant::M => ModelKind::MPcnn,
            Variant::S => ModelKind::SPcnn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcnnConfig {
    pub variant: Variant,
    pub blackbox: BlackBoxConfig,
    pub scales: Scales,
    pub parametrization: Parametrization,
    /// No black-box module: `D` stays at its initial value.
    pub physics_only: bool,
}

impl PcnnConfig {
    pub fn new(variant: Variant) -> Self {
        PcnnConfig {
            variant,
            blackbox: BlackBoxConfig::default(),
            scales: Scales::default(),
            parametrization: Parametrization::Log,
            physics_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcnnModel {
    config: PcnnConfig,
    topology: BuildingTopology,
    schema: FeatureSchema,
    params: ParamSet,
    physics: PhysicsModule,
    nets: Vec<BlackBoxNet>,
    merged: bool,
}

impl PcnnModel {
    pub fn new(topology: &BuildingTopology, schema: &FeatureSchema, config: &PcnnConfig) -> Result<Self> {
        topology.assert_connected()?;
        let m = topology.zone_count();
        let mut params = ParamSet::new();
        let physics = match config.variant {
            Variant::X => PhysicsModule::per_zone(&mut params, "phys.", topology, config.scales, config.parametrization)?,
            Variant::M | Variant::S => {
                PhysicsModule::shared(&mut params, "phys.", topology, config.scales, config.parametrization)?
            }
        };
        let mut nets = Vec::new();
        if !config.physics_only {
            let base = BlackBoxConfig { input_dim: schema.dim(), ..config.blackbox.clone() };
            match config.variant {
                Variant::X | Variant::M => {
                    for z in 0..m {
                        let cfg = BlackBoxConfig { output_dim: 1, seed: base.seed.wrapping_add(z as u64), ..base.clone() };
                        nets.push(BlackBoxNet::init(&mut params, &format!("net{z}."), &cfg)?);
                    }
                }
                Variant::S => {
                    let cfg = BlackBoxConfig { output_dim: m, ..base };
                    nets.push(BlackBoxNet::init(&mut params, "net.", &cfg)?);
                }
            }
        }
        Ok(PcnnModel {
            config: config.clone(),
            topology: topology.clone(),
            schema: schema.clone(),
            params,
            physics,
            nets,
            merged: false,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.variant.kind()
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn config(&self) -> &PcnnConfig {
        &self.config
    }

    pub fn topology(&self) -> &BuildingTopology {
        &self.topology
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn physics(&self) -> &PhysicsModule {
        &self.physics
    }

    pub fn nets(&self) -> &[BlackBoxNet] {
        &self.nets
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn set_merged(&mut self, merged: bool) {
        self.merged = merged;
    }

    pub fn effective_physics(&self) -> Result<EffectiveParams> {
        self.physics.effective(&self.params)
    }

    pub fn set_effective_physics(&mut self, eff: &EffectiveParams) -> Result<()> {
        self.physics.write_effective(&mut self.params, eff)
    }

    pub fn scalers(&self) -> Vec<Standardizer> {
        self.nets.iter().map(|n| n.scaler().clone()).collect()
    }

    pub fn set_scalers(&mut self, scalers: Vec<Standardizer>) -> Result<()> {
        if scalers.len() != self.nets.len() {
            return Err(Error::data("scaler count does not match black-box count"));
        }
        for (n, s) in self.nets.iter_mut().zip(scalers) {
            n.set_scaler(s)?;
        }
        Ok(())
    }

    pub fn fit_scalers(&mut self, dataset: &Dataset, windows: &[Window]) -> Result<()> {
        let feats = self.schema.features();
        let mut rows = Vec::new();
        for w in windows {
            for k in w.start..w.start + w.len {
                rows.push(feats.iter().map(|f| dataset.feature_value(k, *f)).collect::<Vec<f64>>());
            }
        }
        let scaler = Standardizer::fit(feats.len(), rows.iter().map(|r| r.as_slice()));
        for n in &mut self.nets {
            n.set_scaler(scaler.clone())?;
        }
        Ok(())
    }

    /// Zeroes every black-box output layer, making `f ≡ 0`.
    pub fn zero_blackbox(&mut self) {
        for n in &self.nets {
            n.zero_output(&mut self.params);
        }
    }

    /// Replaces both directional couplings of each pair by their mean.
    pub fn merge_x_pcnn(&mut self) -> Result<()> {
        if self.config.variant != Variant::X {
            return Err(Error::config("coupling merge applies to X-PCNN only"));
        }
        let eff = self.effective_physics()?.merged(&self.topology);
        self.set_effective_physics(&eff)?;
        self.merged = true;
        Ok(())
    }

    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    /// For X-PCNN, the parameters of each single-zone model.
    pub fn zone_groups(&self) -> Option<Vec<Vec<ParamId>>> {
        if self.config.variant != Variant::X {
            return None;
        }
        Some(
            (0..self.topology.zone_count())
                .map(|z| {
                    let mut ids = self.physics.zone_params(z);
                    if let Some(n) = self.nets.get(z) {
                        ids.extend(n.param_ids());
                    }
                    ids
                })
                .collect(),
        )
    }

    fn drift_step(&self, tape: &mut Tape, nets: &[BoundNet<'_>], states: &mut [crate::blackbox::RecurrentState], x: Var) -> Result<Var> {
        let parts = nets
            .iter()
            .zip(states.iter_mut())
            .map(|(n, s)| n.step(tape, x, s))
            .collect::<Result<Vec<Var>>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            Ok(tape.concat(&parts)?)
        }
    }

    pub fn rollout(&self, tape: &mut Tape, batch: &SeriesBatch, opts: &RolloutOptions) -> Result<TapeRollout> {
        let m = self.topology.zone_count();
        let k0 = check_batch(batch, m)?;
        if !self.nets.is_empty() && batch.feature_dim() != self.schema.dim() {
            return Err(Error::input("batch features do not match the model's feature schema"));
        }
        let rows = batch.rows;
        let horizon = batch.len - 1 - k0;
        if let Some(inj) = &opts.injected_drift {
            if inj.len() != horizon || inj.iter().any(|a| a.dim() != (rows, m)) {
                return Err(Error::input("injected drift must hold one rows × m array per free-running step"));
            }
        }
        let bound = self.params.bind(tape);
        let phys = self.physics.bind(tape, &bound)?;
        let ops = self.physics.operands(tape, &phys, rows)?;
        let use_nets = opts.injected_drift.is_none() && !self.nets.is_empty();
        let nets = if use_nets {
            self.nets.iter().map(|n| n.bind(tape, &bound, rows)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut states: Vec<_> = nets.iter().map(|n| n.initial_state(tape)).collect();
        for k in 0..k0 {
            if use_nets {
                let x = tape.leaf(batch.features[k].clone());
                self.drift_step(tape, &nets, &mut states, x)?;
            }
        }
        let teacher_forced = opts.fitting && self.config.variant == Variant::X && !self.merged;
        let (power, ambient) = input_leaves(tape, batch, k0);
        let mut drift = tape.leaf(batch.temps[k0].clone());
        let mut energy = tape.zeros(rows, m);
        let mut out = TapeRollout {
            k0,
            temps: Vec::with_capacity(horizon),
            drift: Some(Vec::with_capacity(horizon)),
            energy: Some(Vec::with_capacity(horizon)),
            power,
            ambient,
            taps: Vec::new(),
            bound: bound.clone(),
        };
        for j in 0..horizon {
            let k = k0 + j;
            if opts.temperature_taps {
                let tap = tape.zeros(rows, m);
                energy = tape.add(energy, tap)?;
                out.taps.push(tap);
            }
            let temp = tape.add(drift, energy)?;
            let neighbors = if teacher_forced { tape.leaf(batch.temps[k].clone()) } else { temp };
            let inc = match &opts.injected_drift {
                Some(inj) => Some(tape.leaf(inj[j].clone())),
                None if use_nets => {
                    let x = tape.leaf(batch.features[k].clone());
                    Some(self.drift_step(tape, &nets, &mut states, x)?)
                }
                None => None,
            };
            if let Some(inc) = inc {
                drift = tape.add(drift, inc)?;
            }
            energy = tape_energy_step(tape, &ops, energy, temp, neighbors, out.ambient[j], out.power[j])?;
            let next = tape.add(drift, energy)?;
            out.temps.push(next);
            out.drift.as_mut().expect("set").push(drift);
            out.energy.as_mut().expect("set").push(energy);
        }
        Ok(out)
    }
}
