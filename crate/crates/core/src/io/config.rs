//! TOML run configuration. The grammar is documented in `docs/config.md`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::arx::ArxConfig;
use crate::baselines::linear::LinearFitConfig;
use crate::baselines::recurrent::DEFAULT_PINN_WEIGHT;
use crate::blackbox::BlackBoxConfig;
use crate::dataset::FeatureSchema;
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::physics::{EffectiveParams, Parametrization, Scales};
use crate::simulator::{Controller, PlantConfig, PlantMode, PlantTruth, WeatherConfig};
use crate::topology::BuildingTopology;
use crate::training::{ModelConfig, TrainingConfig};

use super::data::ColumnSchema;
use super::read_text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Output directory for artifacts without an explicit path.
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub topology: BuildingTopology,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub blackbox: BlackBoxConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    /// Base values `s0` of the physical parameters.
    #[serde(default)]
    pub physics: Scales,
    #[serde(default)]
    pub data: DataSection,
    pub simulator: Option<SimulatorSection>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Default for `train --model`.
    pub kind: Option<ModelKind>,
    pub parametrization: Parametrization,
    pub physics_only: bool,
    pub pinn_weight: f64,
    pub one_step_base: bool,
    pub linear: LinearFitConfig,
    pub arx: ArxConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: None,
            parametrization: Parametrization::Log,
            physics_only: false,
            pinn_weight: DEFAULT_PINN_WEIGHT,
            one_step_base: false,
            linear: LinearFitConfig::default(),
            arx: ArxConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Seed of the 80/20 window split, shared by all training seeds.
    pub split_seed: u64,
    /// Column mapping; default column names when absent.
    pub columns: Option<ColumnSchema>,
    /// Black-box input features.
    pub features: FeatureSchema,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { split_seed: 0, columns: None, features: FeatureSchema::standard() }
    }
}

/// A scalar applied to every entry, or one value per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerEntry {
    All(f64),
    Each(Vec<f64>),
}

impl PerEntry {
    fn expand(&self, n: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            PerEntry::All(v) => Ok(vec![*v; n]),
            PerEntry::Each(v) if v.len() == n => Ok(v.clone()),
            PerEntry::Each(v) => Err(Error::config(format!("simulator.{what}: expected {n} values, got {}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorSection {
    pub days: usize,
    /// Defaults to the first entry of `seeds`.
    pub seed: Option<u64>,
    pub mode: PlantMode,
    pub controller: Controller,
    pub a_h: PerEntry,
    pub a_c: PerEntry,
    pub b: PerEntry,
    /// One value, or one per adjacent pair in sorted `(low, high)` order.
    pub c: PerEntry,
    pub e: PerEntry,
    pub solar_saturation: f64,
    pub occupancy_gain: f64,
    pub facade_azimuth_deg: PerEntry,
    pub noise_std: f64,
    pub initial_temperature: f64,
    pub weather: WeatherConfig,
}

impl Default for SimulatorSection {
    fn default() -> Self {
        SimulatorSection {
            days: 28,
            seed: None,
            mode: PlantMode::Linear,
            controller: Controller::default(),
            a_h: PerEntry::All(1.2e-4),
            a_c: PerEntry::All(1.2e-4),
            b: PerEntry::All(6e-3),
            c: PerEntry::All(8e-3),
            e: PerEntry::All(1e-4),
            solar_saturation: 0.01,
            occupancy_gain: 0.01,
            facade_azimuth_deg: PerEntry::All(0.0),
            noise_std: 0.02,
            initial_temperature: 21.0,
            weather: WeatherConfig::default(),
        }
    }
}

impl SimulatorSection {
    pub fn plant(&self, topology: &BuildingTopology) -> Result<PlantConfig> {
        let m = topology.zone_count();
        let pairs = topology.pairs().len();
        let mut b = self.b.expand(m, "b")?;
        for (z, bz) in b.iter_mut().enumerate() {
            if !topology.has_external_wall(z) {
                *bz = 0.0;
            }
        }
        let coefficients = EffectiveParams::with_pair_couplings(
            topology,
            self.a_h.expand(m, "a_h")?,
            self.a_c.expand(m, "a_c")?,
            b,
            &self.c.expand(pairs, "c")?,
        );
        let plant = PlantConfig {
            topology: topology.clone(),
            coefficients,
            e: self.e.expand(m, "e")?,
            mode: self.mode,
            solar_saturation: self.solar_saturation,
            occupancy_gain: self.occupancy_gain,
            facade_azimuth_deg: self.facade_azimuth_deg.expand(m, "facade_azimuth_deg")?,
            noise_std: self.noise_std,
            initial_temperature: self.initial_temperature,
            weather: self.weather.clone(),
        };
        plant.validate()?;
        Ok(plant)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A missing or unreadable file is a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path).map_err(|e| Error::config(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must be non-empty"));
        }
        self.topology.assert_connected().map_err(|e| Error::config(e.to_string()))?;
        self.blackbox.validate()?;
        self.training.validate()?;
        self.physics.validate()?;
        if !(self.model.pinn_weight >= 0.0) {
            return Err(Error::config("model.pinn_weight must be nonnegative"));
        }
        if let Some(cols) = &self.data.columns {
            let m = cols.zones()?;
            if m != self.topology.zone_count() {
                return Err(Error::config(format!(
                    "column mapping describes {m} zones, topology has {}",
                    self.topology.zone_count()
                )));
            }
        }
        if let Some(sim) = &self.simulator {
            sim.plant(&self.topology)?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            blackbox: self.blackbox.clone(),
            scales: self.physics,
            parametrization: self.model.parametrization,
            physics_only: self.model.physics_only,
            linear: self.model.linear,
            arx: self.model.arx,
            one_step_base: self.model.one_step_base,
            pinn_weight: self.model.pinn_weight,
        }
    }

    pub fn training_for_seed(&self, seed: u64) -> TrainingConfig {
        TrainingConfig { seed, ..self.training.clone() }
    }

    /// Plant, controller, and seed of the simulator block.
    pub fn truth(&self) -> Result<PlantTruth> {
        let sim = self.simulator.as_ref().ok_or_else(|| Error::config("configuration has no [simulator] block"))?;
        Ok(PlantTruth {
            plant: sim.plant(&self.topology)?,
            controller: sim.controller.clone(),
            days: sim.days,
            seed: sim.seed.unwrap_or(self.seeds[0]),
        })
    }

    /// The configuration as JSON, for checkpoint headers.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}
