//! Jacobian-based certification of physical consistency.
//!
//! Steps are counted from the last warm-start step `k0`: output step `i`
//! is the prediction for `k0 + i` (`i ≥ 1`) and input step `j` refers to
//! `k0 + j` (`j ≥ 0`), so every recorded pair has `j < i`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::SeriesBatch;
use crate::error::{Error, Result};
use crate::model::{AnyModel, RolloutOptions};
use crate::topology::BuildingTopology;

/// Structural-zero threshold.
pub const ZERO_TOL: f64 = 1e-12;
/// Strict-positivity threshold.
pub const POSITIVE_TOL: f64 = 1e-15;
/// Power inputs closer to zero than this are skipped by sign checks.
pub const MIN_POWER: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Temperature,
    Power,
    Ambient,
}

impl InputKind {
    pub fn name(self) -> &'static str {
        match self {
            InputKind::Temperature => "temperature",
            InputKind::Power => "power",
            InputKind::Ambient => "ambient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientEntry {
    pub series: usize,
    pub output_zone: usize,
    pub output_step: usize,
    pub input: InputKind,
    /// `None` for ambient temperature.
    pub input_zone: Option<usize>,
    pub input_step: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub entries: Vec<GradientEntry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignCounts {
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
}

impl SignCounts {
    pub fn total(&self) -> usize {
        self.negative + self.zero + self.positive
    }

    pub fn negative_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.negative as f64 / self.total() as f64
        }
    }
}

impl GradientReport {
    /// Counts with `|g| ≤ ZERO_TOL` treated as zero.
    pub fn counts(&self) -> SignCounts {
        let mut c = SignCounts::default();
        for e in &self.entries {
            if e.value.abs() <= ZERO_TOL {
                c.zero += 1;
            } else if e.value < 0.0 {
                c.negative += 1;
            } else {
                c.positive += 1;
            }
        }
        c
    }

    /// Merges reports and sorts entries into a canonical order.
    pub fn merge(reports: impl IntoIterator<Item = GradientReport>) -> GradientReport {
        let mut entries: Vec<GradientEntry> = reports.into_iter().flat_map(|r| r.entries).collect();
        entries.sort_by(|a, b| {
            (a.series, a.output_zone, a.output_step, a.input, a.input_zone, a.input_step)
                .cmp(&(b.series, b.output_zone, b.output_step, b.input, b.input_zone, b.input_step))
        });
        GradientReport { entries }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.value)
    }
}

/// Which output steps to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSteps {
    Final,
    All,
}

fn output_steps(horizon: usize, which: OutputSteps) -> Vec<usize> {
    match which {
        OutputSteps::Final => vec![horizon],
        OutputSteps::All => (1..=horizon).collect(),
    }
}

/// Gradients of predicted temperatures with respect to every power input,
/// every ambient temperature, and (with `temperatures`) every free-running
/// temperature state, one reverse pass per output zone and step. Rows are
/// independent sequences, so summing an output over rows yields each row's
/// gradient in its own row.
pub fn gradients(model: &AnyModel, batch: &SeriesBatch, which: OutputSteps, temperatures: bool) -> Result<GradientReport> {
    let mut tape = Tape::new();
    let opts = RolloutOptions { temperature_taps: temperatures, ..Default::default() };
    let ro = model.rollout(&mut tape, batch, &opts)?;
    let m = batch.zones;
    let mut report = GradientReport::default();
    for i in output_steps(ro.horizon(), which) {
        let out = ro.temps[i - 1];
        for z in 0..m {
            let col = tape.slice_cols(out, z, 1)?;
            let seed = tape.sum(col)?;
            let grads = tape.backward(seed)?;
            for j in 0..i {
                let gp = grads.get(ro.power[j]);
                let ga = grads.get(ro.ambient[j]);
                let gt = temperatures.then(|| grads.get(ro.taps[j]));
                for r in 0..batch.rows {
                    for y in 0..m {
                        report.entries.push(GradientEntry {
                            series: r,
                            output_zone: z,
                            output_step: i,
                            input: InputKind::Power,
                            input_zone: Some(y),
                            input_step: j,
                            value: gp[[r, y]],
                        });
                        if let Some(gt) = &gt {
                            report.entries.push(GradientEntry {
                                series: r,
                                output_zone: z,
                                output_step: i,
                                input: InputKind::Temperature,
                                input_zone: Some(y),
                                input_step: j,
                                value: gt[[r, y]],
                            });
                        }
                    }
                    report.entries.push(GradientEntry {
                        series: r,
                        output_zone: z,
                        output_step: i,
                        input: InputKind::Ambient,
                        input_zone: None,
                        input_step: j,
                        value: ga[[r, 0]],
                    });
                }
            }
        }
    }
    Ok(GradientReport::merge([report]))
}

/// Final-step gradients with respect to power and ambient inputs.
pub fn final_step_gradients(model: &AnyModel, batch: &SeriesBatch) -> Result<GradientReport> {
    gradients(model, batch, OutputSteps::Final, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputCoordinate {
    pub series: usize,
    pub input: InputKind,
    /// Ignored for ambient temperature.
    pub zone: usize,
    /// Relative to `k0`; temperature perturbations apply at step 0 only.
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteDifference {
    pub value: f64,
    pub step_used: f64,
    /// The step was reduced to keep a power input on one sign branch.
    pub shrunk: bool,
}

/// Central difference of the predicted temperature of `output_zone` at
/// output step `output_step` (default: final).
pub fn finite_difference_gradient(
    model: &AnyModel,
    batch: &SeriesBatch,
    coord: InputCoordinate,
    output_zone: usize,
    output_step: Option<usize>,
    h: f64,
) -> Result<FiniteDifference> {
    if !(h > 0.0) {
        return Err(Error::input("finite-difference step must be positive"));
    }
    let k0 = batch.prediction_start();
    let k = k0 + coord.step;
    if coord.series >= batch.rows || k + 1 >= batch.len || output_zone >= batch.zones {
        return Err(Error::input("finite-difference coordinate out of range"));
    }
    if coord.input == InputKind::Temperature && coord.step != 0 {
        return Err(Error::input("temperature perturbations are supported at the initial step only"));
    }
    let mut h = h;
    let mut shrunk = false;
    if coord.input == InputKind::Power {
        let u = batch.power[k][[coord.series, coord.zone]];
        if u != 0.0 && u.abs() <= h {
            h = u.abs() / 2.0;
            shrunk = true;
        }
    }
    let eval = |delta: f64| -> Result<f64> {
        let mut b = batch.clone();
        match coord.input {
            InputKind::Power => b.power[k][[coord.series, coord.zone]] += delta,
            InputKind::Ambient => b.ambient[k][[coord.series, 0]] += delta,
            InputKind::Temperature => b.temps[k][[coord.series, coord.zone]] += delta,
        }
        let mut tape = Tape::new();
        let ro = model.rollout(&mut tape, &b, &RolloutOptions::default())?;
        let i = output_step.unwrap_or(ro.horizon());
        if i == 0 || i > ro.horizon() {
            return Err(Error::input("output step out of range"));
        }
        Ok(tape.value(ro.temps[i - 1])[[coord.series, output_zone]])
    };
    let value = (eval(h)? - eval(-h)?) / (2.0 * h);
    Ok(FiniteDifference { value, step_used: h, shrunk })
}

/// One violated expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub entry: GradientEntry,
    pub expected: Expectation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expectation {
    Zero,
    Positive,
    Nonnegative,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub checked: usize,
    pub skipped: usize,
    pub violations: Vec<Violation>,
    /// Entries taken with respect to the initial temperature state.
    pub initial_state_entries: usize,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

fn judge(result: &mut CheckResult, entry: &GradientEntry, expected: Expectation) {
    result.checked += 1;
    let v = entry.value;
    let ok = match expected {
        Expectation::Zero => v.abs() <= ZERO_TOL,
        Expectation::Positive => v > POSITIVE_TOL,
        Expectation::Nonnegative => v >= -ZERO_TOL,
    };
    if !ok {
        result.violations.push(Violation { entry: *entry, expected });
    }
}

struct Hops {
    dist: Vec<Vec<Option<usize>>>,
}

impl Hops {
    fn new(topo: &BuildingTopology) -> Result<Self> {
        Ok(Hops { dist: (0..topo.zone_count()).map(|z| topo.distances(z)).collect::<Result<_>>()? })
    }

    fn within(&self, z: usize, y: usize, n: usize) -> bool {
        self.dist[z][y].is_some_and(|d| d <= n)
    }
}

/// Temperature gradients over lags `1..=max_lag` from a rollout with every
/// output step differentiated: positive exactly inside the lag-hop
/// neighborhood, zero outside it.
pub fn check_heat_propagation(model: &AnyModel, batch: &SeriesBatch, max_lag: usize) -> Result<CheckResult> {
    let report = gradients(model, batch, OutputSteps::All, true)?;
    let hops = Hops::new(model.topology())?;
    let mut result = CheckResult::default();
    for e in report.entries.iter().filter(|e| e.input == InputKind::Temperature) {
        let lag = e.output_step - e.input_step;
        if lag > max_lag {
            continue;
        }
        let y = e.input_zone.expect("zone");
        let expected = if hops.within(e.output_zone, y, lag) { Expectation::Positive } else { Expectation::Zero };
        if e.input_step == 0 {
            result.initial_state_entries += 1;
        }
        judge(&mut result, e, expected);
    }
    Ok(result)
}

/// Power gradients are positive exactly when `y ∈ N^(i−j−1)(z)` and zero
/// otherwise; ambient gradients are positive whenever a zone with an
/// external wall lies in `N^(i−j−1)(z)`. Powers with `|u| < MIN_POWER` are
/// skipped.
pub fn check_input_consistency(model: &AnyModel, batch: &SeriesBatch, which: OutputSteps) -> Result<CheckResult> {
    let report = gradients(model, batch, which, false)?;
    let topo = model.topology();
    let hops = Hops::new(topo)?;
    let k0 = batch.prediction_start();
    let mut result = CheckResult::default();
    for e in &report.entries {
        let reach = e.output_step - e.input_step - 1;
        match e.input {
            InputKind::Power => {
                let y = e.input_zone.expect("zone");
                if batch.power[k0 + e.input_step][[e.series, y]].abs() < MIN_POWER {
                    result.skipped += 1;
                    continue;
                }
                let expected = if hops.within(e.output_zone, y, reach) { Expectation::Positive } else { Expectation::Zero };
                judge(&mut result, e, expected);
            }
            InputKind::Ambient => {
                let exposed = (0..topo.zone_count()).any(|y| topo.has_external_wall(y) && hops.within(e.output_zone, y, reach));
                judge(&mut result, e, if exposed { Expectation::Positive } else { Expectation::Zero });
            }
            InputKind::Temperature => {}
        }
    }
    Ok(result)
}

/// Sign-magnitude histogram with decade bins from `1e-12` to `1e2` on each
/// side plus a zero bin for `|g| ≤ 1e-12`; magnitudes above `1e2` land in
/// the outermost bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

const MIN_DECADE: i32 = -12;
const MAX_DECADE: i32 = 2;

impl Histogram {
    pub fn edges() -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for d in (MIN_DECADE..MAX_DECADE).rev() {
            let lo = if d == MAX_DECADE - 1 { f64::NEG_INFINITY } else { -(10f64.powi(d + 1)) };
            out.push((lo, -(10f64.powi(d))));
        }
        out.push((-(10f64.powi(MIN_DECADE)), 10f64.powi(MIN_DECADE)));
        for d in MIN_DECADE..MAX_DECADE {
            let hi = if d == MAX_DECADE - 1 { f64::INFINITY } else { 10f64.powi(d + 1) };
            out.push((10f64.powi(d), hi));
        }
        out
    }

    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Histogram {
        let edges = Self::edges();
        let mut bins: Vec<HistogramBin> = edges.iter().map(|&(lower, upper)| HistogramBin { lower, upper, count: 0 }).collect();
        let zero = (MAX_DECADE - MIN_DECADE) as usize;
        for v in values {
            let a = v.abs();
            let idx = if a <= 10f64.powi(MIN_DECADE) {
                zero
            } else {
                let d = (a.log10().floor() as i32).clamp(MIN_DECADE, MAX_DECADE - 1);
                let off = (d - MIN_DECADE) as usize;
                if v < 0.0 {
                    zero - 1 - off
                } else {
                    zero + 1 + off
                }
            };
            bins[idx].count += 1;
        }
        Histogram { bins }
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureSchema;
    use crate::pcnn::{PcnnConfig, PcnnModel, Variant};
    use ndarray::Array2;

    fn physics_model(topo: &BuildingTopology) -> AnyModel {
        let mut cfg = PcnnConfig::new(Variant::M);
        cfg.physics_only = true;
        AnyModel::Pcnn(PcnnModel::new(topo, &FeatureSchema::standard(), &cfg).unwrap())
    }

    fn batch(m: usize, len: usize, warm: usize, u: f64) -> SeriesBatch {
        SeriesBatch {
            len,
            rows: 1,
            zones: m,
            warm_start: warm,
            temps: vec![Array2::from_elem((1, m), 21.0); len],
            power: vec![Array2::from_elem((1, m), u); len],
            ambient: vec![Array2::from_elem((1, 1), 5.0); len],
            solar: vec![Array2::zeros((1, 1)); len],
            features: vec![Array2::zeros((1, 6)); len],
            qwin: vec![Array2::zeros((1, m)); len],
        }
    }

    #[test]
    fn two_step_hand_chain_rule() {
        let topo = BuildingTopology::chain(1).unwrap();
        let model = physics_model(&topo);
        let b = batch(1, 3, 1, 200.0);
        let rep = final_step_gradients(&model, &b).unwrap();
        let g = rep
            .entries
            .iter()
            .find(|e| e.input == InputKind::Power && e.input_step == 0)
            .unwrap()
            .value;
        assert!((g - 1e-4 * (1.0 - 5e-3)).abs() < 1e-18);
    }

    #[test]
    fn chain_propagation_examples() {
        let topo = BuildingTopology::chain(3).unwrap();
        let model = physics_model(&topo);
        let b = batch(3, 5, 1, 200.0);
        let rep = gradients(&model, &b, OutputSteps::All, true).unwrap();
        let find = |i: usize, j: usize, z: usize, y: usize| {
            rep.entries
                .iter()
                .find(|e| e.input == InputKind::Temperature && e.output_step == i && e.input_step == j && e.output_zone == z && e.input_zone == Some(y))
                .unwrap()
                .value
        };
        assert_eq!(find(2, 1, 0, 2), 0.0);
        assert!((find(3, 1, 0, 2) - 5e-3 * 5e-3).abs() < 1e-15);
        let own = 1.0 - 5e-3 - 5e-3;
        assert!((find(2, 1, 0, 0) - own).abs() < 1e-15);
        assert!(check_heat_propagation(&model, &b, 3).unwrap().pass());
        assert!(check_input_consistency(&model, &b, OutputSteps::All).unwrap().pass());
    }

    #[test]
    fn finite_difference_agrees_and_guards_branch() {
        let topo = BuildingTopology::chain(2).unwrap();
        let model = physics_model(&topo);
        let b = batch(2, 6, 1, 0.0005);
        let coord = InputCoordinate { series: 0, input: InputKind::Power, zone: 0, step: 1 };
        let fd = finite_difference_gradient(&model, &b, coord, 0, None, 1e-3).unwrap();
        assert!(fd.shrunk && fd.step_used < 1e-3);
        let b = batch(2, 6, 1, 300.0);
        let coord = InputCoordinate { series: 0, input: InputKind::Ambient, zone: 0, step: 0 };
        let fd = finite_difference_gradient(&model, &b, coord, 1, None, 1e-3).unwrap();
        let rep = final_step_gradients(&model, &b).unwrap();
        let g = rep.entries.iter().find(|e| e.input == InputKind::Ambient && e.output_zone == 1 && e.input_step == 0).unwrap().value;
        assert!((fd.value - g).abs() <= 1e-4 * g.abs());
    }

    #[test]
    fn histogram_conserves_counts() {
        let vals = [0.0, 1e-13, -3e-5, 2e-3, 5.0, 1e5, -1e9];
        let h = Histogram::from_values(vals);
        assert_eq!(h.total(), vals.len());
        let single = Histogram::from_values([0.25; 10]);
        assert_eq!(single.bins.iter().filter(|b| b.count > 0).count(), 1);
        for (b, v) in [(-3e-5, -3e-5), (2e-3, 2e-3)] {
            let h = Histogram::from_values([v]);
            let bin = h.bins.iter().find(|x| x.count == 1).unwrap();
            assert!(bin.lower <= b && b <= bin.upper);
        }
    }
}
