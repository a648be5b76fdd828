//! Autoregressive model with exogenous inputs, fitted by least squares.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::{Dataset, SeriesBatch, Window};
use crate::error::{Error, Result};
use crate::model::{check_batch, input_leaves, RolloutOptions, TapeRollout};
use crate::params::ParamSet;
use crate::topology::BuildingTopology;

pub const DEFAULT_LAGS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArxConfig {
    pub lags: usize,
    /// Singular values below `rcond · σ_max` count as zero.
    pub rcond: f64,
    /// Return the minimum-norm solution instead of failing on a
    /// rank-deficient design.
    pub minimum_norm: bool,
}

impl Default for ArxConfig {
    fn default() -> Self {
        ArxConfig { lags: DEFAULT_LAGS, rcond: 1e-10, minimum_norm: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArxModel {
    topology: BuildingTopology,
    pub lags: usize,
    /// `alpha[i]` multiplies `T_{k−i}`; `m × m`.
    pub alpha: Vec<Array2<f64>>,
    /// `beta[i]` multiplies the exogenous vector at `k−i`.
    pub beta: Vec<Array2<f64>>,
    /// Numerical rank of the design matrix at fit time.
    pub rank: usize,
    pub condition_number: f64,
}

/// `[u (m), T_out, Q_sun]`.
fn exogenous(ds: &Dataset, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = ds.power.row(k).to_vec();
    v.push(ds.ambient[k]);
    v.push(ds.solar[k]);
    v
}

/// Regression rows `(regressors, target)` for every usable step in the
/// windows, each step once.
fn design(ds: &Dataset, windows: &[Window], lags: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = ds.zones();
    let mut steps = BTreeSet::new();
    for w in windows {
        if w.len > lags + 1 {
            steps.extend(w.start + lags..w.start + w.len - 1);
        }
    }
    let p = (lags + 1) * (2 * m + 2);
    if steps.is_empty() {
        return Err(Error::input("no training data for the ARX fit"));
    }
    let n = steps.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DMatrix::zeros(n, m);
    for (r, &k) in steps.iter().enumerate() {
        let row = regressor_row(ds, k, lags);
        for (c, v) in row.into_iter().enumerate() {
            x[(r, c)] = v;
        }
        for z in 0..m {
            y[(r, z)] = ds.temps[[k + 1, z]];
        }
    }
    Ok((x, y))
}

/// `[T_k, …, T_{k−δ}, x̂_k, …, x̂_{k−δ}]`.
fn regressor_row(ds: &Dataset, k: usize, lags: usize) -> Vec<f64> {
    let mut row = Vec::new();
    for i in 0..=lags {
        row.extend(ds.temps.row(k - i).iter());
    }
    for i in 0..=lags {
        row.extend(exogenous(ds, k - i));
    }
    row
}

/// Ordinary least squares over stacked one-step regressions.
pub fn arx_fit(ds: &Dataset, windows: &[Window], topology: &BuildingTopology, cfg: &ArxConfig) -> Result<ArxModel> {
    let m = ds.zones();
    if m != topology.zone_count() {
        return Err(Error::input("dataset zone count does not match topology"));
    }
    let (x, y) = design(ds, windows, cfg.lags)?;
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::data("ARX design contains missing values"));
    }
    let p = x.ncols();
    if x.nrows() < p {
        return Err(Error::numerical(format!(
            "ARX design has {} rows for {p} unknowns",
            x.nrows()
        )));
    }
    let svd = x.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let condition_number = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    let tol = cfg.rcond * s_max;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank < p && !cfg.minimum_norm {
        return Err(Error::numerical(format!(
            "rank-deficient ARX design: rank {rank} of {p}, condition number {condition_number:.3e}"
        )));
    }
    let theta = svd.solve(&y, tol).map_err(|e| Error::numerical(format!("ARX solve failed: {e}")))?;
    let q = m + 2;
    let mut alpha = Vec::with_capacity(cfg.lags + 1);
    let mut beta = Vec::with_capacity(cfg.lags + 1);
    for i in 0..=cfg.lags {
        alpha.push(Array2::from_shape_fn((m, m), |(z, y)| theta[(i * m + y, z)]));
        let off = (cfg.lags + 1) * m + i * q;
        beta.push(Array2::from_shape_fn((m, q), |(z, j)| theta[(off + j, z)]));
    }
    Ok(ArxModel {
        topology: topology.clone(),
        lags: cfg.lags,
        alpha,
        beta,
        rank,
        condition_number,
    })
}

/// `‖Xᵀr‖_max / (‖X‖_F ‖y‖_F)` for the fitted model on the training design;
/// zero at an exact least-squares solution.
pub fn normal_equation_residual(model: &ArxModel, ds: &Dataset, windows: &[Window]) -> Result<f64> {
    let (x, y) = design(ds, windows, model.lags)?;
    let theta = model.theta();
    let r = &y - &x * &theta;
    let g = x.transpose() * r;
    Ok(g.amax() / (x.norm() * y.norm()).max(f64::MIN_POSITIVE))
}

impl ArxModel {
    /// Reassembles a fitted model, checking coefficient shapes.
    pub fn from_parts(
        topology: &BuildingTopology,
        alpha: Vec<Array2<f64>>,
        beta: Vec<Array2<f64>>,
        rank: usize,
        condition_number: f64,
    ) -> Result<Self> {
        let m = topology.zone_count();
        if alpha.is_empty() || alpha.len() != beta.len() {
            return Err(Error::data("ARX model needs one alpha and one beta block per lag"));
        }
        if alpha.iter().any(|a| a.dim() != (m, m)) || beta.iter().any(|b| b.dim() != (m, m + 2)) {
            return Err(Error::data(format!("ARX coefficient blocks do not match {m} zones")));
        }
        Ok(ArxModel { topology: topology.clone(), lags: alpha.len() - 1, alpha, beta, rank, condition_number })
    }

    pub fn topology(&self) -> &BuildingTopology {
        &self.topology
    }

    pub fn count_parameters(&self) -> usize {
        self.alpha.iter().chain(&self.beta).map(|a| a.len()).sum()
    }

    fn exo_dim(&self) -> usize {
        self.topology.zone_count() + 2
    }

    /// Stacked coefficients in regressor order, one column per zone.
    fn theta(&self) -> DMatrix<f64> {
        let m = self.topology.zone_count();
        let q = self.exo_dim();
        let p = (self.lags + 1) * (m + q);
        let mut theta = DMatrix::zeros(p, m);
        for i in 0..=self.lags {
            for z in 0..m {
                for y in 0..m {
                    theta[(i * m + y, z)] = self.alpha[i][[z, y]];
                }
                for j in 0..q {
                    theta[((self.lags + 1) * m + i * q + j, z)] = self.beta[i][[z, j]];
                }
            }
        }
        theta
    }

    /// Next temperature from the newest-first histories: `history[i]` is
    /// `T_{k−i}` and `exogenous[i]` the exogenous vector at `k−i`.
    pub fn predict(&self, history: &[Vec<f64>], exogenous: &[Vec<f64>]) -> Result<Vec<f64>> {
        let m = self.topology.zone_count();
        let q = self.exo_dim();
        if history.len() < self.lags + 1 || exogenous.len() < self.lags + 1 {
            return Err(Error::input(format!("ARX needs {} steps of history", self.lags + 1)));
        }
        let mut out = vec![0.0; m];
        for i in 0..=self.lags {
            if history[i].len() != m || exogenous[i].len() != q {
                return Err(Error::input("ARX history has the wrong width"));
            }
            for (z, o) in out.iter_mut().enumerate() {
                *o += (0..m).map(|y| self.alpha[i][[z, y]] * history[i][y]).sum::<f64>();
                *o += (0..q).map(|j| self.beta[i][[z, j]] * exogenous[i][j]).sum::<f64>();
            }
        }
        Ok(out)
    }

    /// One-step predictions for every step of `ds` with full history,
    /// starting at index `lags`; entry `i` predicts step `lags + i + 1`.
    pub fn one_step(&self, ds: &Dataset) -> Result<Array2<f64>> {
        let m = self.topology.zone_count();
        let n = ds.len().saturating_sub(self.lags + 1);
        let theta = self.theta();
        let mut out = Array2::zeros((n, m));
        for i in 0..n {
            let row = regressor_row(ds, self.lags + i, self.lags);
            for z in 0..m {
                out[[i, z]] = row.iter().enumerate().map(|(c, v)| v * theta[(c, z)]).sum();
            }
        }
        Ok(out)
    }

    pub fn rollout(&self, tape: &mut Tape, batch: &SeriesBatch, opts: &RolloutOptions) -> Result<TapeRollout> {
        let m = self.topology.zone_count();
        let k0 = check_batch(batch, m)?;
        if k0 < self.lags {
            return Err(Error::input(format!("warm start must cover the {} ARX lags", self.lags + 1)));
        }
        let rows = batch.rows;
        let alpha_t: Vec<Var> = self.alpha.iter().map(|a| tape.leaf(a.t().to_owned())).collect();
        let beta_t: Vec<Var> = self.beta.iter().map(|b| tape.leaf(b.t().to_owned())).collect();
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
            bound: ParamSet::new().bind(tape),
        };
        // Newest-first buffers of state and exogenous inputs.
        let mut temps: Vec<Var> = Vec::new();
        let mut exo: Vec<Var> = Vec::new();
        for k in k0 - self.lags..=k0 {
            temps.insert(0, tape.leaf(batch.temps[k].clone()));
            if k < k0 {
                let parts = [
                    tape.leaf(batch.power[k].clone()),
                    tape.leaf(batch.ambient[k].clone()),
                    tape.leaf(batch.solar[k].clone()),
                ];
                exo.insert(0, tape.concat(&parts)?);
            }
        }
        for j in 0..horizon {
            let k = k0 + j;
            if opts.temperature_taps {
                let tap = tape.zeros(rows, m);
                temps[0] = tape.add(temps[0], tap)?;
                out.taps.push(tap);
            }
            let solar = tape.leaf(batch.solar[k].clone());
            let x = tape.concat(&[out.power[j], out.ambient[j], solar])?;
            exo.insert(0, x);
            exo.truncate(self.lags + 1);
            let mut next: Option<Var> = None;
            for i in 0..=self.lags {
                let a = tape.matmul(temps[i], alpha_t[i])?;
                let b = tape.matmul(exo[i], beta_t[i])?;
                let s = tape.add(a, b)?;
                next = Some(match next {
                    Some(n) => tape.add(n, s)?,
                    None => s,
                });
            }
            let next = next.expect("at least one lag");
            out.temps.push(next);
            temps.insert(0, next);
            temps.truncate(self.lags + 1);
        }
        Ok(out)
    }
}
