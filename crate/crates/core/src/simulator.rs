//! Synthetic multi-zone thermal plant, weather, and solar geometry.

use std::f64::consts::PI;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, STEP_MINUTES};
use crate::error::{Error, Result};
use crate::physics::{check_consistency_conditions, EffectiveParams};
use crate::topology::BuildingTopology;

const STEPS_PER_DAY: usize = 24 * 60 / STEP_MINUTES as usize;

/// Solar irradiance on a vertical window of facade azimuth `theta0`.
/// Angles in radians; azimuths clockwise from east.
pub fn solar_on_window(q_sun: f64, altitude: f64, azimuth: f64, theta0: f64) -> Result<f64> {
    if q_sun <= 0.0 {
        return Ok(0.0);
    }
    if altitude <= 0.0 {
        return Err(Error::input(format!(
            "positive irradiance {q_sun} W/m² with the sun at or below the horizon"
        )));
    }
    let vertical = q_sun * altitude.cos() / altitude.sin();
    Ok((vertical * (azimuth - theta0).sin()).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeatherConfig {
    /// Daily mean ambient temperature, °C.
    pub mean_ambient: f64,
    /// Half the diurnal swing, °C.
    pub ambient_amplitude: f64,
    /// Std of the slowly varying ambient perturbation, °C.
    pub ambient_noise: f64,
    /// Clear-sky noon irradiance, W/m².
    pub peak_irradiance: f64,
    /// Daily irradiance multiplier is drawn from `[1 − cloudiness, 1]`.
    pub cloudiness: f64,
    pub sunrise_hour: f64,
    pub sunset_hour: f64,
    /// Solar altitude at noon, degrees.
    pub max_altitude_deg: f64,
}

impl Default for WeatherConfig {
    fn default() -> Self {
        WeatherConfig {
            mean_ambient: 5.0,
            ambient_amplitude: 4.0,
            ambient_noise: 1.0,
            peak_irradiance: 500.0,
            cloudiness: 0.6,
            sunrise_hour: 7.0,
            sunset_hour: 17.0,
            max_altitude_deg: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weather {
    pub ambient: Vec<f64>,
    pub solar: Vec<f64>,
    /// Solar altitude, radians; nonpositive at night.
    pub altitude: Vec<f64>,
    /// Solar azimuth clockwise from east, radians.
    pub azimuth: Vec<f64>,
}

/// Smooth diurnal ambient temperature, half-sine daytime irradiance, and a
/// sun sweeping from east to west over the day.
pub fn synthesize_weather(cfg: &WeatherConfig, days: usize, seed: u64) -> Result<Weather> {
    if days == 0 {
        return Err(Error::config("weather needs at least one day"));
    }
    if !(cfg.sunrise_hour < cfg.sunset_hour) || cfg.sunrise_hour < 0.0 || cfg.sunset_hour > 24.0 {
        return Err(Error::config("sunrise must precede sunset within the day"));
    }
    if !(0.0..=1.0).contains(&cfg.cloudiness) || cfg.max_altitude_deg <= 0.0 || cfg.max_altitude_deg > 90.0 {
        return Err(Error::config("cloudiness must be in [0, 1] and noon altitude in (0, 90] degrees"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = days * STEPS_PER_DAY;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut w = Weather { ambient: Vec::with_capacity(n), solar: Vec::with_capacity(n), altitude: Vec::with_capacity(n), azimuth: Vec::with_capacity(n) };
    // AR(1) perturbation with a correlation time of about six hours.
    let rho: f64 = (-1.0 / 24.0f64).exp();
    let innov = cfg.ambient_noise * (1.0 - rho * rho).sqrt();
    let mut drift = 0.0;
    let mut clouds = 1.0;
    for k in 0..n {
        if k % STEPS_PER_DAY == 0 {
            clouds = 1.0 - cfg.cloudiness * rng.gen::<f64>();
        }
        let hour = (k % STEPS_PER_DAY) as f64 * STEP_MINUTES as f64 / 60.0;
        drift = rho * drift + innov * noise.sample(&mut rng);
        let diurnal = -(2.0 * PI * (hour - 3.0) / 24.0).cos();
        w.ambient.push(cfg.mean_ambient + cfg.ambient_amplitude * diurnal + drift);
        let s = (hour - cfg.sunrise_hour) / (cfg.sunset_hour - cfg.sunrise_hour);
        if s > 0.0 && s < 1.0 {
            let arc = (PI * s).sin();
            w.altitude.push(cfg.max_altitude_deg.to_radians() * arc);
            w.solar.push(cfg.peak_irradiance * clouds * arc);
            w.azimuth.push(PI * s);
        } else {
            w.altitude.push(-0.1);
            w.solar.push(0.0);
            w.azimuth.push(if s <= 0.0 { 0.0 } else { PI });
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantMode {
    #[default]
    Linear,
    /// Solar gain `g·tanh(e·Q_win / g)`.
    SaturatingSolar,
    /// Extra constant gain during weekday office hours.
    OccupancyPulse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub topology: BuildingTopology,
    pub coefficients: EffectiveParams,
    pub e: Vec<f64>,
    pub mode: PlantMode,
    /// Saturation level of the solar gain, °C per step.
    pub solar_saturation: f64,
    /// Occupancy gain, °C per step.
    pub occupancy_gain: f64,
    /// Facade azimuth per zone, degrees clockwise from east, in [−180, 180).
    pub facade_azimuth_deg: Vec<f64>,
    /// Process-noise std, °C per step.
    pub noise_std: f64,
    pub initial_temperature: f64,
    pub weather: WeatherConfig,
}

impl PlantConfig {
    /// Three zones in a line, all with external walls.
    pub fn default_chain() -> Self {
        let topology = BuildingTopology::chain(3).expect("valid chain");
        Self::with_topology(topology)
    }

    pub fn with_topology(topology: BuildingTopology) -> Self {
        let m = topology.zone_count();
        PlantConfig {
            coefficients: EffectiveParams::uniform(&topology, 1.2e-4, 1.2e-4, 6e-3, 8e-3),
            e: vec![1e-4; m],
            mode: PlantMode::Linear,
            solar_saturation: 0.01,
            occupancy_gain: 0.01,
            facade_azimuth_deg: vec![0.0; m],
            noise_std: 0.02,
            initial_temperature: 21.0,
            weather: WeatherConfig::default(),
            topology,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.topology.zone_count();
        if self.e.len() != m || self.facade_azimuth_deg.len() != m {
            return Err(Error::config("plant: e and facade_azimuth_deg need one entry per zone"));
        }
        let report = check_consistency_conditions(&self.coefficients, &self.topology)?;
        if !report.pass() {
            let bad: Vec<String> = report
                .zones
                .iter()
                .filter(|z| !z.pass)
                .map(|z| format!("zone {} margin {:.4}", z.zone + 1, z.margin))
                .collect();
            return Err(Error::config(format!(
                "plant coefficients violate the consistency conditions (positivity {}; {})",
                report.positive,
                bad.join(", ")
            )));
        }
        if self.e.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::config("plant: solar gains must be nonnegative"));
        }
        if self.facade_azimuth_deg.iter().any(|t| !(-180.0..180.0).contains(t)) {
            return Err(Error::config("plant: facade azimuths must lie in [-180, 180)"));
        }
        if !(self.noise_std >= 0.0) || !(self.solar_saturation > 0.0) {
            return Err(Error::config("plant: noise_std must be >= 0 and solar_saturation > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Controller {
    Off,
    /// Full heating below 20 °C until 21 °C, full cooling above 22 °C until
    /// 21 °C.
    Thermostat { max_power: f64 },
    /// Seeded piecewise-constant power, held 1 to 6 hours.
    RandomExcitation { max_power: f64 },
    /// The same power in every step.
    Constant { power: Vec<f64> },
}

impl Default for Controller {
    fn default() -> Self {
        Controller::RandomExcitation { max_power: 1500.0 }
    }
}

pub fn simulation_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1).expect("date").and_hms_opt(0, 0, 0).expect("time")
}

fn occupied(ts: NaiveDateTime) -> bool {
    ts.weekday().num_days_from_monday() < 5 && (8..18).contains(&ts.hour())
}

/// Forward simulation; `power[k]` is applied between steps `k` and `k+1`.
pub fn simulate(cfg: &PlantConfig, controller: &Controller, days: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let topo = &cfg.topology;
    let m = topo.zone_count();
    let weather = synthesize_weather(&cfg.weather, days, seed)?;
    let n = weather.ambient.len();
    let start = simulation_start();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_c0ffee);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let theta0: Vec<f64> = cfg.facade_azimuth_deg.iter().map(|d| d.to_radians()).collect();
    let mut qwin = Array2::zeros((n, m));
    for k in 0..n {
        for z in 0..m {
            qwin[[k, z]] = solar_on_window(weather.solar[k], weather.altitude[k], weather.azimuth[k], theta0[z])?;
        }
    }
    if let Controller::Constant { power } = controller {
        if power.len() != m {
            return Err(Error::config("constant controller needs one power value per zone"));
        }
    }
    let mut temps = Array2::zeros((n, m));
    let mut power = Array2::zeros((n, m));
    let mut t = vec![cfg.initial_temperature; m];
    let mut heating = vec![0i8; m];
    let mut hold = vec![0usize; m];
    let mut level = vec![0.0; m];
    let c = &cfg.coefficients;
    let edges = topo.directed_edges();
    for k in 0..n {
        for z in 0..m {
            temps[[k, z]] = t[z];
        }
        let u: Vec<f64> = match controller {
            Controller::Off => vec![0.0; m],
            Controller::Constant { power } => power.clone(),
            Controller::Thermostat { max_power } => (0..m)
                .map(|z| {
                    if t[z] < 20.0 {
                        heating[z] = 1;
                    } else if t[z] > 22.0 {
                        heating[z] = -1;
                    } else if (heating[z] == 1 && t[z] >= 21.0) || (heating[z] == -1 && t[z] <= 21.0) {
                        heating[z] = 0;
                    }
                    heating[z] as f64 * max_power
                })
                .collect(),
            Controller::RandomExcitation { max_power } => (0..m)
                .map(|z| {
                    if hold[z] == 0 {
                        hold[z] = rng.gen_range(4..=24);
                        level[z] = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(-*max_power..=*max_power) };
                    }
                    hold[z] -= 1;
                    level[z]
                })
                .collect(),
        };
        for z in 0..m {
            power[[k, z]] = u[z];
        }
        if k + 1 == n {
            break;
        }
        let ts = start + chrono::Duration::minutes(STEP_MINUTES * k as i64);
        let mut next = t.clone();
        for z in 0..m {
            next[z] += c.a_h[z] * u[z].max(0.0) + c.a_c[z] * u[z].min(0.0);
            if topo.has_external_wall(z) {
                next[z] -= c.b[z] * (t[z] - weather.ambient[k]);
            }
            let gain = c_gain(cfg, z, qwin[[k, z]]);
            next[z] += gain;
            if cfg.mode == PlantMode::OccupancyPulse && occupied(ts) {
                next[z] += cfg.occupancy_gain;
            }
            if cfg.noise_std > 0.0 {
                next[z] += noise.sample(&mut rng);
            }
        }
        for (e, &(z, y)) in edges.iter().enumerate() {
            next[z] -= c.c_dir[e] * (t[z] - t[y]);
        }
        t = next;
    }
    Dataset::new(start, temps, power, weather.ambient, weather.solar, Some(qwin))
}

fn c_gain(cfg: &PlantConfig, z: usize, q: f64) -> f64 {
    let raw = cfg.e[z] * q;
    match cfg.mode {
        PlantMode::SaturatingSolar => cfg.solar_saturation * (raw / cfg.solar_saturation).tanh(),
        PlantMode::Linear | PlantMode::OccupancyPulse => raw,
    }
}

/// Ground truth written next to simulated datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantTruth {
    pub plant: PlantConfig,
    pub controller: Controller,
    pub days: usize,
    pub seed: u64,
}
