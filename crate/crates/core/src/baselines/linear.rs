//! Physically consistent linear gray-box model with solar gains on windows.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::{Dataset, SeriesBatch, Window};
use crate::error::{Error, Result};
use crate::model::{check_batch, input_leaves, RolloutOptions, TapeRollout};
use crate::params::ParamSet;
use crate::physics::{energy_step, step_operands, EffectiveParams, EnergyState, Scales, TapePhysics};
use crate::physics::tape_energy_step;
use crate::topology::BuildingTopology;

pub const DEFAULT_SOLAR_SCALE: f64 = 1e-4;
pub const FIT_HORIZON: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    topology: BuildingTopology,
    pub coefficients: EffectiveParams,
    /// Solar-gain scale per zone.
    pub e: Vec<f64>,
    /// Set when the fitting objective did not depend on the coefficients.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearFitConfig {
    /// Total objective evaluations per zone.
    pub budget: usize,
    /// Random-search evaluations per zone, taken from the budget first.
    pub random_points: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for LinearFitConfig {
    fn default() -> Self {
        LinearFitConfig { budget: 2300, random_points: 200, horizon: FIT_HORIZON, seed: 0 }
    }
}

impl LinearModel {
    pub fn new(topology: &BuildingTopology, coefficients: EffectiveParams, e: Vec<f64>) -> Result<Self> {
        let m = topology.zone_count();
        if e.len() != m || coefficients.a_h.len() != m || coefficients.c_dir.len() != 2 * topology.pairs().len() {
            return Err(Error::input("linear model coefficients do not match topology"));
        }
        Ok(LinearModel { topology: topology.clone(), coefficients, e, degenerate: false })
    }

    /// Default scales everywhere.
    pub fn initial(topology: &BuildingTopology, scales: &Scales) -> Self {
        LinearModel {
            topology: topology.clone(),
            coefficients: EffectiveParams::uniform(topology, scales.a_h, scales.a_c, scales.b, scales.c),
            e: vec![DEFAULT_SOLAR_SCALE; topology.zone_count()],
            degenerate: false,
        }
    }

    pub fn topology(&self) -> &BuildingTopology {
        &self.topology
    }

    pub fn count_parameters(&self) -> usize {
        4 * self.topology.zone_count() + self.topology.pairs().len()
    }

    /// One step of the linear dynamics.
    pub fn step(&self, temps: &[f64], t_out: f64, power: &[f64], qwin: &[f64]) -> Result<Vec<f64>> {
        linear_step(&self.coefficients, &self.e, &self.topology, temps, t_out, power, qwin)
    }

    pub fn rollout(&self, tape: &mut Tape, batch: &SeriesBatch, opts: &RolloutOptions) -> Result<TapeRollout> {
        self.rollout_with(tape, batch, opts, false)
    }

    /// With `one_step`, every step starts from the measured temperature.
    pub fn rollout_with(&self, tape: &mut Tape, batch: &SeriesBatch, opts: &RolloutOptions, one_step: bool) -> Result<TapeRollout> {
        let m = self.topology.zone_count();
        let k0 = check_batch(batch, m)?;
        let rows = batch.rows;
        let c = &self.coefficients;
        let mask: Vec<f64> = self
            .topology
            .external_wall()
            .iter()
            .zip(&c.b)
            .map(|(&w, &b)| if w { b } else { 0.0 })
            .collect();
        let phys = TapePhysics {
            a_h: tape.row(&c.a_h),
            a_c: tape.row(&c.a_c),
            b: tape.row(&mask),
            c_dir: if c.c_dir.is_empty() { None } else { Some(tape.row(&c.c_dir)) },
        };
        let ops = step_operands(tape, &self.topology, &phys, rows)?;
        let (power, ambient) = input_leaves(tape, batch, k0);
        let e_row = Array2::from_shape_fn((rows, m), |(_, z)| self.e[z]);
        let mut temp = tape.leaf(batch.temps[k0].clone());
        let horizon = batch.len - 1 - k0;
        let mut out = TapeRollout {
            k0,
            temps: Vec::with_capacity(horizon),
            drift: None,
            energy: None,
            power,
            ambient,
            taps: Vec::new(),
            bound: ParamSet::new().bind(tape),
        };
        for j in 0..horizon {
            let k = k0 + j;
            if one_step && j > 0 {
                temp = tape.leaf(batch.temps[k].clone());
            }
            if opts.temperature_taps {
                let tap = tape.zeros(rows, m);
                temp = tape.add(temp, tap)?;
                out.taps.push(tap);
            }
            let next = tape_energy_step(tape, &ops, temp, temp, temp, out.ambient[j], out.power[j])?;
            let solar = tape.leaf(&batch.qwin[k] * &e_row);
            temp = tape.add(next, solar)?;
            out.temps.push(temp);
        }
        Ok(out)
    }
}

pub fn linear_step(
    coefficients: &EffectiveParams,
    e: &[f64],
    topo: &BuildingTopology,
    temps: &[f64],
    t_out: f64,
    power: &[f64],
    qwin: &[f64],
) -> Result<Vec<f64>> {
    let m = topo.zone_count();
    if qwin.len() != m || e.len() != m {
        return Err(Error::input(format!("solar gains: expected length {m}")));
    }
    let inc = energy_step(&EnergyState::zeros(m), temps, t_out, power, coefficients, topo)?;
    Ok((0..m).map(|z| temps[z] + inc.0[z] + e[z] * qwin[z]).collect())
}

/// One zone's coefficients in the order searched.
#[derive(Debug, Clone)]
struct ZoneProblem<'a> {
    zone: usize,
    has_wall: bool,
    neighbors: Vec<usize>,
    dataset: &'a Dataset,
    qwin: &'a Array2<f64>,
    starts: Vec<usize>,
    horizon: usize,
}

/// Index layout of the search vector: `[a_h, a_c, b, e, c_1..c_deg]`, in
/// natural log.
const A_H: usize = 0;
const A_C: usize = 1;
const B: usize = 2;
const E: usize = 3;

fn log_box(i: usize) -> (f64, f64) {
    match i {
        A_H | A_C => (1e-6f64.ln(), 1e-2f64.ln()),
        B => (1e-5f64.ln(), 0.3f64.ln()),
        E => (1e-7f64.ln(), 1e-1f64.ln()),
        _ => (1e-5f64.ln(), 0.3f64.ln()),
    }
}

impl ZoneProblem<'_> {
    fn dims(&self) -> usize {
        4 + self.neighbors.len()
    }

    /// Dimensions actually searched; `b` is skipped for interior zones.
    fn active(&self) -> Vec<usize> {
        (0..self.dims()).filter(|&i| i != B || self.has_wall).collect()
    }

    fn objective(&self, logs: &[f64]) -> f64 {
        let p: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
        let z = self.zone;
        let ds = self.dataset;
        let mut total = 0.0;
        for &s in &self.starts {
            let mut t = ds.temps[[s, z]];
            for k in s..s + self.horizon {
                let u = ds.power[[k, z]];
                let mut next = t + p[A_H] * u.max(0.0) + p[A_C] * u.min(0.0) + p[E] * self.qwin[[k, z]];
                if self.has_wall {
                    next -= p[B] * (t - ds.ambient[k]);
                }
                for (i, &y) in self.neighbors.iter().enumerate() {
                    next -= p[4 + i] * (t - ds.temps[[k, y]]);
                }
                t = next;
                let err = t - ds.temps[[k + 1, z]];
                total += err * err;
            }
        }
        total / (self.starts.len() * self.horizon) as f64
    }
}

fn golden_section(f: &mut impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, evals: usize) -> (f64, f64) {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 2..evals {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

struct SearchResult {
    logs: Vec<f64>,
    degenerate: bool,
}

fn search_zone(problem: &ZoneProblem<'_>, init: Vec<f64>, cfg: &LinearFitConfig, rng: &mut ChaCha8Rng) -> SearchResult {
    let active = problem.active();
    let mut best = init;
    if cfg.budget == 0 {
        return SearchResult { logs: best, degenerate: false };
    }
    let mut used = 1;
    let mut best_f = problem.objective(&best);
    let (mut f_min, mut f_max) = (best_f, best_f);
    let random = cfg.random_points.min(cfg.budget - used);
    for _ in 0..random {
        let mut cand = best.clone();
        for &i in &active {
            let (lo, hi) = log_box(i);
            cand[i] = rng.gen_range(lo..hi);
        }
        let f = problem.objective(&cand);
        used += 1;
        f_min = f_min.min(f);
        f_max = f_max.max(f);
        if f < best_f {
            best_f = f;
            best = cand;
        }
    }
    const PER_LINE: usize = 14;
    let mut width = 2.0;
    while used + PER_LINE <= cfg.budget {
        for &i in &active {
            if used + PER_LINE > cfg.budget {
                break;
            }
            let (blo, bhi) = log_box(i);
            let lo = (best[i] - width).max(blo);
            let hi = (best[i] + width).min(bhi);
            let mut probe = best.clone();
            let mut f = |x: f64| {
                probe[i] = x;
                problem.objective(&probe)
            };
            let (x, fx) = golden_section(&mut f, lo, hi, PER_LINE);
            used += PER_LINE;
            f_min = f_min.min(fx);
            f_max = f_max.max(fx);
            if fx < best_f {
                best_f = fx;
                best[i] = x;
            }
        }
        width = (width * 0.7).max(0.02);
    }
    let degenerate = (f_max - f_min) <= 1e-12 * f_min.abs().max(1e-18) || f_max <= 1e-30;
    SearchResult { logs: best, degenerate }
}

/// Positive coefficients minimizing the multi-step error of each zone with
/// measured neighbor temperatures, followed by averaging of each pair's two
/// directional couplings.
pub fn fit_linear(
    dataset: &Dataset,
    windows: &[Window],
    topology: &BuildingTopology,
    scales: &Scales,
    cfg: &LinearFitConfig,
) -> Result<LinearModel> {
    let qwin = dataset
        .qwin
        .as_ref()
        .ok_or_else(|| Error::data("the linear model needs per-zone solar-window columns"))?;
    if dataset.zones() != topology.zone_count() {
        return Err(Error::input("dataset zone count does not match topology"));
    }
    let horizon = cfg.horizon.max(1);
    let mut starts = BTreeSet::new();
    for w in windows {
        if w.len > horizon {
            starts.extend(w.start..w.start + w.len - horizon);
        }
    }
    if starts.is_empty() {
        return Err(Error::input("no training data for the linear fit"));
    }
    let starts: Vec<usize> = starts.into_iter().collect();
    let mut model = LinearModel::initial(topology, scales);
    if cfg.budget == 0 {
        return Ok(model);
    }
    let edges = topology.directed_edges();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut any_degenerate = false;
    for z in 0..topology.zone_count() {
        let problem = ZoneProblem {
            zone: z,
            has_wall: topology.has_external_wall(z),
            neighbors: topology.adjacent(z).to_vec(),
            dataset,
            qwin,
            starts: starts.clone(),
            horizon,
        };
        let mut init = vec![scales.a_h.ln(), scales.a_c.ln(), scales.b.ln(), DEFAULT_SOLAR_SCALE.ln()];
        init.extend(std::iter::repeat(scales.c.ln()).take(problem.neighbors.len()));
        let res = search_zone(&problem, init, cfg, &mut rng);
        any_degenerate |= res.degenerate;
        let p: Vec<f64> = res.logs.iter().map(|l| l.exp()).collect();
        model.coefficients.a_h[z] = p[A_H];
        model.coefficients.a_c[z] = p[A_C];
        model.coefficients.b[z] = p[B];
        model.e[z] = p[E];
        for (i, &y) in problem.neighbors.iter().enumerate() {
            let e = edges.iter().position(|&ed| ed == (z, y)).expect("edge");
            model.coefficients.c_dir[e] = p[4 + i];
        }
    }
    model.coefficients = model.coefficients.merged(topology);
    model.degenerate = any_degenerate;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn topo() -> BuildingTopology {
        BuildingTopology::chain(3).unwrap()
    }

    #[test]
    fn equilibrium_is_fixed() {
        let m = LinearModel::initial(&topo(), &Scales::default());
        let t = m.step(&[20.0; 3], 20.0, &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(t, vec![20.0; 3]);
    }

    #[test]
    fn solar_gain_is_linear() {
        let mut m = LinearModel::initial(&topo(), &Scales::default());
        m.e[0] = 1e-3;
        let with = m.step(&[20.0, 21.0, 19.0], 5.0, &[100.0, 0.0, -50.0], &[100.0, 0.0, 0.0]).unwrap();
        let without = m.step(&[20.0, 21.0, 19.0], 5.0, &[100.0, 0.0, -50.0], &[0.0; 3]).unwrap();
        assert!((with[0] - without[0] - 0.1).abs() < 1e-12);
        assert_eq!(with[1], without[1]);
    }

    #[test]
    fn budget_zero_returns_initial_guess() {
        let n = 200;
        let ds = Dataset::new(
            NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
            Array2::from_elem((n, 3), 20.0),
            Array2::zeros((n, 3)),
            vec![20.0; n],
            vec![0.0; n],
            Some(Array2::zeros((n, 3))),
        )
        .unwrap();
        let w = [Window { start: 0, len: n }];
        let cfg = LinearFitConfig { budget: 0, ..Default::default() };
        let fit = fit_linear(&ds, &w, &topo(), &Scales::default(), &cfg).unwrap();
        assert_eq!(fit, LinearModel::initial(&topo(), &Scales::default()));
        let cfg = LinearFitConfig { budget: 300, ..Default::default() };
        let fit = fit_linear(&ds, &w, &topo(), &Scales::default(), &cfg).unwrap();
        assert!(fit.degenerate && fit.coefficients.all_positive());
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let mut f = |x: f64| (x - 0.3) * (x - 0.3);
        let (x, _) = golden_section(&mut f, -2.0, 2.0, 40);
        assert!((x - 0.3).abs() < 1e-6);
    }
}
