//! Evaluation, verification, comparison, and counterfactual reports.
//!
//! Reports are JSON documents; the `*_table` functions render the same
//! content as CSV for plotting tools.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::baselines::linear::LinearModel;
use crate::dataset::{Dataset, SeriesBatch, Window, WARM_START};
use crate::error::{Error, Result};
use crate::metrics::{error_by_horizon, mae, mape, mse, mse_per_zone};
use crate::model::{AnyModel, ModelKind, RolloutOptions, Trace};
use crate::simulator::PlantTruth;
use crate::training::{predict_windows, schema_of, TrainReport};
use crate::verifier::{
    check_heat_propagation, check_input_consistency, final_step_gradients, CheckResult, GradientReport, Histogram,
    InputKind, OutputSteps, SignCounts, Violation,
};

use super::checkpoint::finite;
use super::{read_text, write_bytes};

/// Which windows a report was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: ModelKind,
    pub seed: u64,
    pub split: Split,
    pub sequences: usize,
    pub mae: f64,
    /// Percent; absent when a measured temperature is exactly 0 °C.
    pub mape: Option<f64>,
    pub mse: f64,
    pub mse_per_zone: Vec<f64>,
    /// MAE at prediction steps `1..=H`.
    pub mae_by_horizon: Vec<f64>,
    /// Fitted versus true coefficients, for linear models checked against a
    /// simulator sidecar.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<CoefficientRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub fitted: f64,
    pub truth: f64,
    pub relative_error: f64,
}

/// Every coefficient of `model` next to its true value. Couplings are
/// listed per directed edge with 1-based zones. Terms absent from the
/// plant (`b` without an external wall) are skipped.
pub fn coefficient_recovery(model: &LinearModel, truth: &PlantTruth) -> Result<Vec<CoefficientRow>> {
    if model.topology() != &truth.plant.topology {
        return Err(Error::input("model and sidecar describe different topologies"));
    }
    let fit = &model.coefficients;
    let tru = &truth.plant.coefficients;
    let mut rows = Vec::new();
    let mut push = |name: String, fitted: f64, truth: f64| {
        if truth != 0.0 {
            rows.push(CoefficientRow { name, fitted, truth, relative_error: (fitted - truth).abs() / truth.abs() });
        }
    };
    for z in 0..fit.a_h.len() {
        push(format!("a_h_{}", z + 1), fit.a_h[z], tru.a_h[z]);
        push(format!("a_c_{}", z + 1), fit.a_c[z], tru.a_c[z]);
        push(format!("b_{}", z + 1), fit.b[z], tru.b[z]);
        push(format!("e_{}", z + 1), model.e[z], truth.plant.e[z]);
    }
    for (i, (z, y)) in model.topology().directed_edges().into_iter().enumerate() {
        push(format!("c_{}_{}", z + 1, y + 1), fit.c_dir[i], tru.c_dir[i]);
    }
    Ok(rows)
}

pub fn evaluate(model: &AnyModel, ds: &Dataset, windows: &[Window], seed: u64, split: Split) -> Result<EvaluationReport> {
    if windows.is_empty() {
        return Err(Error::data("no windows to evaluate on"));
    }
    let seqs = predict_windows(model, ds, windows, &schema_of(model), 256, false)?;
    let mse_v = mse(&seqs)?;
    if !mse_v.is_finite() {
        return Err(Error::numerical(format!("{} predictions are not finite", model.kind())));
    }
    Ok(EvaluationReport {
        model: model.kind(),
        seed,
        split,
        sequences: seqs.len(),
        mae: mae(&seqs)?,
        mape: mape(&seqs).ok(),
        mse: mse_v,
        mse_per_zone: mse_per_zone(&seqs, model.zones())?,
        mae_by_horizon: error_by_horizon(&seqs)?,
        coefficients: None,
    })
}

/// `metric,value` rows followed by the per-horizon MAE.
pub fn evaluation_table(r: &EvaluationReport) -> String {
    let mut s = String::from("metric,value\n");
    let _ = writeln!(s, "mae,{}", r.mae);
    let _ = writeln!(s, "mape,{}", r.mape.map(|v| v.to_string()).unwrap_or_default());
    let _ = writeln!(s, "mse,{}", r.mse);
    for (z, v) in r.mse_per_zone.iter().enumerate() {
        let _ = writeln!(s, "mse_zone_{},{v}", z + 1);
    }
    s.push_str("\nhorizon_step,hours_ahead,mae\n");
    for (h, v) in r.mae_by_horizon.iter().enumerate() {
        let _ = writeln!(s, "{},{},{v}", h + 1, (h + 1) as f64 * 0.25);
    }
    if let Some(rows) = &r.coefficients {
        s.push_str("\ncoefficient,fitted,truth,relative_error\n");
        for c in rows {
            let _ = writeln!(s, "{},{},{},{}", c.name, c.fitted, c.truth, c.relative_error);
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    /// `None` is unbounded.
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub checked: usize,
    pub skipped: usize,
    pub violations: usize,
    pub initial_state_entries: usize,
    pub pass: bool,
    /// At most ten violations, for diagnosis.
    pub examples: Vec<Violation>,
}

impl From<&CheckResult> for CheckSummary {
    fn from(c: &CheckResult) -> Self {
        CheckSummary {
            checked: c.checked,
            skipped: c.skipped,
            violations: c.violations.len(),
            initial_state_entries: c.initial_state_entries,
            pass: c.pass(),
            examples: c.violations.iter().take(10).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    /// Longest lag checked for heat propagation.
    pub max_lag: usize,
    /// Windows used for the all-steps checks, which are cubic in length.
    pub propagation_windows: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { max_lag: 10, propagation_windows: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub model: ModelKind,
    pub seed: u64,
    pub split: Split,
    pub sequences: usize,
    /// Signs of final-step gradients with respect to every power input.
    pub power: SignCounts,
    /// Signs of final-step gradients with respect to every ambient input.
    pub ambient: SignCounts,
    pub negative_total: usize,
    pub histogram: Vec<BinRow>,
    pub heat_propagation: CheckSummary,
    pub input_consistency: CheckSummary,
    pub final_step_consistency: CheckSummary,
    pub pass: bool,
}

fn counts_for(report: &GradientReport, input: InputKind) -> SignCounts {
    GradientReport { entries: report.entries.iter().filter(|e| e.input == input).copied().collect() }.counts()
}

/// Gradient-sign analysis: final-step gradients over full `windows`, and the
/// lag-resolved propagation and consistency checks over short prefixes of
/// the first few windows.
pub fn verify(model: &AnyModel, ds: &Dataset, windows: &[Window], seed: u64, split: Split, opts: &VerifyOptions) -> Result<VerificationReport> {
    if windows.is_empty() {
        return Err(Error::data("no windows to verify on"));
    }
    let schema = schema_of(model);
    let mut sorted = windows.to_vec();
    sorted.sort_by_key(|w| (w.len, w.start));
    let mut reports = Vec::new();
    let mut final_check = CheckResult::default();
    for group in crate::dataset::bucket_by_length(&sorted, 64).into_iter().flatten() {
        let batch = SeriesBatch::from_windows(ds, &group, &schema, WARM_START)?;
        reports.push(final_step_gradients(model, &batch)?);
        let c = check_input_consistency(model, &batch, OutputSteps::Final)?;
        final_check.checked += c.checked;
        final_check.skipped += c.skipped;
        final_check.initial_state_entries += c.initial_state_entries;
        final_check.violations.extend(c.violations);
    }
    let all = GradientReport::merge(reports);
    let power = counts_for(&all, InputKind::Power);
    let ambient = counts_for(&all, InputKind::Ambient);
    let histogram = Histogram::from_values(all.values())
        .bins
        .iter()
        .map(|b| BinRow { lower: finite(b.lower), upper: finite(b.upper), count: b.count })
        .collect();
    let short_len = WARM_START + opts.max_lag + 1;
    let short: Vec<Window> = windows
        .iter()
        .take(opts.propagation_windows.max(1))
        .map(|w| Window { start: w.start, len: short_len.min(w.len) })
        .collect();
    let mut prop = CheckResult::default();
    let mut cons = CheckResult::default();
    let mut sorted_short = short;
    sorted_short.sort_by_key(|w| (w.len, w.start));
    for group in crate::dataset::bucket_by_length(&sorted_short, 64).into_iter().flatten() {
        let batch = SeriesBatch::from_windows(ds, &group, &schema, WARM_START)?;
        for (acc, c) in [
            (&mut prop, check_heat_propagation(model, &batch, opts.max_lag)?),
            (&mut cons, check_input_consistency(model, &batch, OutputSteps::All)?),
        ] {
            acc.checked += c.checked;
            acc.skipped += c.skipped;
            acc.initial_state_entries += c.initial_state_entries;
            acc.violations.extend(c.violations);
        }
    }
    let pass = prop.pass() && cons.pass() && final_check.pass();
    Ok(VerificationReport {
        model: model.kind(),
        seed,
        split,
        sequences: windows.len(),
        power,
        ambient,
        negative_total: power.negative + ambient.negative,
        histogram,
        heat_propagation: (&prop).into(),
        input_consistency: (&cons).into(),
        final_step_consistency: (&final_check).into(),
        pass,
    })
}

fn bound(v: Option<f64>, neg: bool) -> String {
    match v {
        Some(v) => v.to_string(),
        None if neg => "-inf".into(),
        None => "inf".into(),
    }
}

/// Sign counts followed by the gradient histogram.
pub fn verification_table(r: &VerificationReport) -> String {
    let mut s = String::from("input,negative,zero,positive,total\n");
    for (name, c) in [("power", r.power), ("ambient", r.ambient)] {
        let _ = writeln!(s, "{name},{},{},{},{}", c.negative, c.zero, c.positive, c.total());
    }
    s.push_str("\ncheck,checked,skipped,violations,pass\n");
    for (name, c) in [
        ("heat_propagation", &r.heat_propagation),
        ("input_consistency", &r.input_consistency),
        ("final_step_consistency", &r.final_step_consistency),
    ] {
        let _ = writeln!(s, "{name},{},{},{},{}", c.checked, c.skipped, c.violations, c.pass);
    }
    s.push_str("\nlower,upper,count\n");
    for b in &r.histogram {
        let _ = writeln!(s, "{},{},{}", bound(b.lower, true), bound(b.upper, false), b.count);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "report", rename_all = "lowercase")]
pub enum Report {
    Evaluation(EvaluationReport),
    Verification(VerificationReport),
}

impl Report {
    pub fn model(&self) -> ModelKind {
        match self {
            Report::Evaluation(r) => r.model,
            Report::Verification(r) => r.model,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Report::Evaluation(r) => r.seed,
            Report::Verification(r) => r.seed,
        }
    }
}

pub fn save_report(path: &Path, report: &Report) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::data(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn load_report(path: &Path) -> Result<Report> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::data(format!("{}: not a report: {e}", path.display())))
}

#[derive(Debug, Clone, Default, PartialEq)]
struct CompareRow {
    mae: Option<f64>,
    mape: Option<f64>,
    mse: Option<f64>,
    negative: Option<usize>,
    gradients: Option<usize>,
    pass: Option<bool>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per model and seed, merging evaluation and verification reports,
/// then per-model means of the metrics.
pub fn compare_table(reports: &[Report]) -> Result<String> {
    let mut rows: BTreeMap<(String, u64), CompareRow> = BTreeMap::new();
    for r in reports {
        let row = rows.entry((r.model().name().to_string(), r.seed())).or_default();
        match r {
            Report::Evaluation(e) => {
                if row.mae.is_some() {
                    return Err(Error::input(format!("two evaluation reports for {} seed {}", e.model, e.seed)));
                }
                row.mae = Some(e.mae);
                row.mape = e.mape;
                row.mse = Some(e.mse);
            }
            Report::Verification(v) => {
                if row.pass.is_some() {
                    return Err(Error::input(format!("two verification reports for {} seed {}", v.model, v.seed)));
                }
                row.negative = Some(v.negative_total);
                row.gradients = Some(v.power.total() + v.ambient.total());
                row.pass = Some(v.pass);
            }
        }
    }
    let mut s = String::from("model,seed,mae,mape,mse,negative_gradients,input_gradients,consistent\n");
    for ((model, seed), r) in &rows {
        let _ = writeln!(
            s,
            "{model},{seed},{},{},{},{},{},{}",
            opt(r.mae),
            opt(r.mape),
            opt(r.mse),
            opt(r.negative),
            opt(r.gradients),
            opt(r.pass)
        );
    }
    s.push_str("\nmodel,seeds,mean_mae,mean_mape,mean_mse,total_negative_gradients\n");
    let mut by_model: BTreeMap<&str, Vec<&CompareRow>> = BTreeMap::new();
    for ((model, _), r) in &rows {
        by_model.entry(model.as_str()).or_default().push(r);
    }
    for (model, rs) in by_model {
        let mean = |f: fn(&CompareRow) -> Option<f64>| {
            let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let neg: Option<usize> = rs.iter().map(|r| r.negative).sum();
        let _ = writeln!(
            s,
            "{model},{},{},{},{},{}",
            rs.len(),
            opt(mean(|r| r.mae)),
            opt(mean(|r| r.mape)),
            opt(mean(|r| r.mse)),
            opt(neg)
        );
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerPattern {
    Heat,
    Cool,
    Off,
}

impl std::str::FromStr for PowerPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat" => Ok(PowerPattern::Heat),
            "cool" => Ok(PowerPattern::Cool),
            "off" => Ok(PowerPattern::Off),
            _ => Err(Error::config(format!("pattern must be heat, cool, or off, got '{s}'"))),
        }
    }
}

/// Counterfactual rollout over `window`: zone `zone` (0-based) receives
/// `+power`, `−power`, or nothing at every step, and all other zones
/// receive nothing.
pub fn whatif(model: &AnyModel, ds: &Dataset, window: Window, zone: usize, pattern: PowerPattern, power: f64) -> Result<Trace> {
    let m = model.zones();
    if zone >= m {
        return Err(Error::input(format!("zone {} out of range 1..={m}", zone + 1)));
    }
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::config(format!("power must be positive, got {power}")));
    }
    let mut batch = SeriesBatch::from_windows(ds, &[window], &schema_of(model), WARM_START)?;
    let u = match pattern {
        PowerPattern::Heat => power,
        PowerPattern::Cool => -power,
        PowerPattern::Off => 0.0,
    };
    for p in &mut batch.power {
        p.fill(0.0);
        p[[0, zone]] = u;
    }
    let mut tape = Tape::new();
    let ro = model.rollout(&mut tape, &batch, &RolloutOptions::default())?;
    Ok(Trace::from_rollout(&tape, &ro, &batch, 0))
}

/// Step, timestamp, phase, then `T`, `D`, `E` per zone.
pub fn trace_table(trace: &Trace, ds: &Dataset, window: Window) -> String {
    let m = trace.temps.first().map_or(0, |t| t.len());
    let mut s = String::from("step,timestamp,phase");
    for prefix in ["T", "D", "E"] {
        for z in 1..=m {
            let _ = write!(s, ",{prefix}_{z}");
        }
    }
    s.push('\n');
    for (k, t) in trace.temps.iter().enumerate() {
        let phase = if k < trace.warm_start { "warm-start" } else { "predicted" };
        let ts = ds.timestamp(window.start + k).format(super::data::TIMESTAMP_FORMAT);
        let _ = write!(s, "{k},{ts},{phase}");
        for v in t.iter().chain(&trace.drift[k]).chain(&trace.energy[k]) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn history_table(report: &TrainReport) -> String {
    let mut s = String::from("epoch,train_mse,val_mse,val_mae\n");
    for r in &report.history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_mse, r.val_mse, r.val_mae);
    }
    s
}
