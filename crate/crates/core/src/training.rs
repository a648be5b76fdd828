//! Gradient training loop shared by every learned model, plus the fitting
//! pipeline that dispatches on model kind.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::baselines::arx::{arx_fit, ArxConfig};
use crate::baselines::linear::{fit_linear, LinearFitConfig};
use crate::baselines::recurrent::{physics_penalty, RecurrentBaseline, DEFAULT_PINN_WEIGHT};
use crate::baselines::residual::{ResidualConfig, ResidualModel};
use crate::blackbox::BlackBoxConfig;
use crate::dataset::{bucket_by_length, Dataset, FeatureSchema, SeriesBatch, Window, WARM_START};
use crate::error::{Error, Result};
use crate::metrics::{mae, mse, mse_per_zone, SequencePrediction};
use crate::model::{paired, AnyModel, ModelKind, RolloutOptions, TapeRollout};
use crate::optim::{Adam, AdamConfig};
use crate::pcnn::{PcnnConfig, PcnnModel, Variant};
use crate::physics::{Parametrization, Scales};
use crate::topology::BuildingTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Sequences per forward pass when evaluating.
    pub eval_batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 5e-4,
            batch_size: 64,
            epochs: 150,
            patience: 20,
            seed: 0,
            adam: AdamConfig::default(),
            eval_batch_size: 256,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning_rate must be nonnegative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Completed,
    EarlyStopped,
    /// A loss or gradient became non-finite; the best parameters so far
    /// were restored.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub outcome: Outcome,
    /// Epoch whose parameters were kept; 0 means the initial parameters.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub message: Option<String>,
}

/// Mean over rows, steps, and zones of the squared prediction error.
pub fn tape_mse(tape: &mut Tape, ro: &TapeRollout, batch: &SeriesBatch) -> Result<Var> {
    let pred = tape.concat(&ro.temps)?;
    let rows = batch.rows;
    let m = batch.zones;
    let h = ro.temps.len();
    let target = Array2::from_shape_fn((rows, h * m), |(r, c)| batch.temps[ro.k0 + 1 + c / m][[r, c % m]]);
    let target = tape.leaf(target);
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq)?)
}

/// Loss on one equal-length batch. The physics penalty enters only for a
/// nonzero weight.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub data: Var,
    pub physics: Option<Var>,
    pub total: Var,
}

pub fn pinn_loss(tape: &mut Tape, ro: &TapeRollout, batch: &SeriesBatch, weight: f64) -> Result<LossParts> {
    if !(weight >= 0.0) {
        return Err(Error::config(format!("physics-loss weight must be nonnegative, got {weight}")));
    }
    let data = tape_mse(tape, ro, batch)?;
    if weight == 0.0 {
        return Ok(LossParts { data, physics: None, total: data });
    }
    let phys = physics_penalty(tape, ro)?;
    let scaled = tape.scale(phys, weight)?;
    let total = tape.add(data, scaled)?;
    Ok(LossParts { data, physics: Some(phys), total })
}

fn physics_weight(model: &AnyModel) -> f64 {
    match model {
        AnyModel::Recurrent(r) => r.pinn_weight(),
        _ => 0.0,
    }
}

/// Training loss and parameter gradients on one equal-length batch.
pub fn loss_and_gradients(model: &AnyModel, batch: &SeriesBatch) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut tape = Tape::new();
    let opts = RolloutOptions { fitting: true, ..Default::default() };
    let ro = model.rollout(&mut tape, batch, &opts)?;
    let loss = pinn_loss(&mut tape, &ro, batch, physics_weight(model))?;
    let value = tape.scalar_value(loss.total);
    let grads = tape.backward(loss.total)?;
    Ok((value, model.params().gradients(&ro.bound, &grads)))
}

/// Predictions for every window, grouped into equal-length forward passes.
/// `fitting` selects the fitting-mode rollout (teacher-forced neighbors for
/// unmerged X-PCNN).
pub fn predict_windows(
    model: &AnyModel,
    ds: &Dataset,
    windows: &[Window],
    schema: &FeatureSchema,
    batch_size: usize,
    fitting: bool,
) -> Result<Vec<SequencePrediction>> {
    let mut sorted = windows.to_vec();
    sorted.sort_by_key(|w| (w.len, w.start));
    let mut out = Vec::with_capacity(windows.len());
    for group in bucket_by_length(&sorted, batch_size).into_iter().flatten() {
        let batch = SeriesBatch::from_windows(ds, &group, schema, WARM_START)?;
        let mut tape = Tape::new();
        let opts = RolloutOptions { fitting, ..Default::default() };
        let ro = model.rollout(&mut tape, &batch, &opts)?;
        out.extend(paired(&tape, &ro, &batch));
    }
    Ok(out)
}

/// Black-box input features the model was built with.
pub fn schema_of(model: &AnyModel) -> FeatureSchema {
    match model {
        AnyModel::Pcnn(p) => p.schema().clone(),
        AnyModel::Residual(r) => r.schema().clone(),
        AnyModel::Recurrent(r) => r.schema().clone(),
        _ => FeatureSchema::standard(),
    }
}

struct Snapshot {
    values: Vec<Array2<f64>>,
}

/// Adam with per-epoch validation, best-checkpoint restore, and early
/// stopping. For X-PCNN the parameters of each single-zone model are kept
/// from that zone's own best epoch.
pub fn train(model: &mut AnyModel, ds: &Dataset, train: &[Window], val: &[Window], cfg: &TrainingConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("no training windows"));
    }
    if !model.is_gradient_trained() {
        return Err(Error::input(format!("{} is not trained by gradient descent", model.kind())));
    }
    let schema = schema_of(model);
    let val_windows = if val.is_empty() { train } else { val };
    let groups = model.zone_groups();
    let m = model.zones();
    let mut adam = Adam::new(model.params(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let validate = |model: &AnyModel| -> Result<(f64, f64, Vec<f64>)> {
        let preds = predict_windows(model, ds, val_windows, &schema, cfg.eval_batch_size, groups.is_some())?;
        Ok((mse(&preds)?, mae(&preds)?, mse_per_zone(&preds, m)?))
    };

    let (v0, _, z0) = validate(model)?;
    let mut best = Snapshot { values: model.params().values().to_vec() };
    let mut best_val = if v0.is_finite() { v0 } else { f64::INFINITY };
    let mut best_zone = z0.iter().map(|v| if v.is_finite() { *v } else { f64::INFINITY }).collect::<Vec<_>>();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut outcome = Outcome::Completed;
    let mut message = None;
    let mut order = train.to_vec();

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        let mut train_rows = 0usize;
        for parts in bucket_by_length(&order, cfg.batch_size) {
            let total_rows: usize = parts.iter().map(|p| p.len()).sum();
            let mut acc = model.params().zeros_like();
            for part in &parts {
                let batch = SeriesBatch::from_windows(ds, part, &schema, WARM_START)?;
                let (loss, grads) = loss_and_gradients(model, &batch)?;
                if !loss.is_finite() {
                    outcome = Outcome::Diverged;
                    message = Some(format!("non-finite training loss at epoch {epoch}"));
                    break 'epochs;
                }
                let w = part.len() as f64 / total_rows as f64;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.scaled_add(w, g);
                }
                train_sum += loss * part.len() as f64;
                train_rows += part.len();
            }
            let params = model.params_mut().expect("gradient-trained model");
            if let Err(e) = adam.step(params, &acc, cfg.learning_rate) {
                match e {
                    Error::Numerical(msg) => {
                        outcome = Outcome::Diverged;
                        message = Some(msg);
                        break 'epochs;
                    }
                    other => return Err(other),
                }
            }
        }
        let (val_mse, val_mae, val_zone) = validate(model)?;
        history.push(EpochRecord { epoch, train_mse: train_sum / train_rows.max(1) as f64, val_mse, val_mae });
        if !val_mse.is_finite() {
            outcome = Outcome::Diverged;
            message = Some(format!("non-finite validation loss at epoch {epoch}"));
            break;
        }
        let improved = match &groups {
            None => {
                if val_mse < best_val {
                    best.values = model.params().values().to_vec();
                    true
                } else {
                    false
                }
            }
            Some(groups) => {
                let mut any = false;
                for (z, ids) in groups.iter().enumerate() {
                    if val_zone[z] < best_zone[z] {
                        best_zone[z] = val_zone[z];
                        for id in ids {
                            best.values[id.0] = model.params().get(*id).clone();
                        }
                        any = true;
                    }
                }
                any
            }
        };
        if improved {
            best_val = best_val.min(val_mse);
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                outcome = Outcome::EarlyStopped;
                break;
            }
        }
    }
    let params = model.params_mut().expect("gradient-trained model");
    for (p, b) in params.values_mut().iter_mut().zip(best.values) {
        *p = b;
    }
    Ok(TrainReport { history, outcome, best_epoch, best_val_mse: best_val, message })
}

/// Everything needed to build and fit any model kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub blackbox: BlackBoxConfig,
    pub scales: Scales,
    pub parametrization: Parametrization,
    /// PCNN without black-box module.
    pub physics_only: bool,
    pub linear: LinearFitConfig,
    pub arx: ArxConfig,
    /// Residual models: one-step base predictions during fitting.
    pub one_step_base: bool,
    pub pinn_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blackbox: BlackBoxConfig::default(),
            scales: Scales::default(),
            parametrization: Parametrization::Log,
            physics_only: false,
            linear: LinearFitConfig::default(),
            arx: ArxConfig::default(),
            one_step_base: false,
            pinn_weight: DEFAULT_PINN_WEIGHT,
        }
    }
}

/// Untrained model of a gradient-trained kind; the black-box seed is
/// replaced by `seed`.
pub fn init_model(kind: ModelKind, topo: &BuildingTopology, schema: &FeatureSchema, cfg: &ModelConfig, seed: u64) -> Result<AnyModel> {
    let blackbox = BlackBoxConfig { seed, ..cfg.blackbox.clone() };
    let pcnn = |variant| {
        let c = PcnnConfig {
            variant,
            blackbox: blackbox.clone(),
            scales: cfg.scales,
            parametrization: cfg.parametrization,
            physics_only: cfg.physics_only,
        };
        PcnnModel::new(topo, schema, &c).map(AnyModel::Pcnn)
    };
    match kind {
        ModelKind::XPcnn => pcnn(Variant::X),
        ModelKind::MPcnn => pcnn(Variant::M),
        ModelKind::SPcnn => pcnn(Variant::S),
        ModelKind::Blackbox => Ok(AnyModel::Recurrent(RecurrentBaseline::new(topo, schema, &blackbox, false, 0.0)?)),
        ModelKind::Pinn => Ok(AnyModel::Recurrent(RecurrentBaseline::new(topo, schema, &blackbox, true, cfg.pinn_weight)?)),
        ModelKind::Linear | ModelKind::Arx | ModelKind::Res | ModelKind::ResCons => {
            Err(Error::input(format!("{kind} needs fitted components; use fit_model")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: AnyModel,
    pub report: Option<TrainReport>,
}

/// Builds and fits `kind` on the training windows, validating on `val`.
/// X-PCNN couplings are merged after training.
#[allow(clippy::too_many_arguments)]
pub fn fit_model(
    kind: ModelKind,
    ds: &Dataset,
    topo: &BuildingTopology,
    schema: &FeatureSchema,
    model_cfg: &ModelConfig,
    train_cfg: &TrainingConfig,
    train_windows: &[Window],
    val_windows: &[Window],
) -> Result<FitOutcome> {
    train_cfg.validate()?;
    let seed = train_cfg.seed;
    match kind {
        ModelKind::Linear => {
            let cfg = LinearFitConfig { seed, ..model_cfg.linear };
            let lin = fit_linear(ds, train_windows, topo, &model_cfg.scales, &cfg)?;
            Ok(FitOutcome { model: AnyModel::Linear(lin), report: None })
        }
        ModelKind::Arx => {
            let arx = arx_fit(ds, train_windows, topo, &model_cfg.arx)?;
            Ok(FitOutcome { model: AnyModel::Arx(arx), report: None })
        }
        ModelKind::Res | ModelKind::ResCons => {
            let cfg = LinearFitConfig { seed, ..model_cfg.linear };
            let base = fit_linear(ds, train_windows, topo, &model_cfg.scales, &cfg)?;
            let rcfg = ResidualConfig {
                blackbox: BlackBoxConfig { seed, ..model_cfg.blackbox.clone() },
                one_step_base: model_cfg.one_step_base,
            };
            let res = ResidualModel::new(base, schema, kind == ModelKind::ResCons, &rcfg)?;
            let mut model = AnyModel::Residual(res);
            model.fit_scalers(ds, train_windows)?;
            let report = train(&mut model, ds, train_windows, val_windows, train_cfg)?;
            Ok(FitOutcome { model, report: Some(report) })
        }
        _ => {
            let mut model = init_model(kind, topo, schema, model_cfg, seed)?;
            model.fit_scalers(ds, train_windows)?;
            let report = train(&mut model, ds, train_windows, val_windows, train_cfg)?;
            if let AnyModel::Pcnn(p) = &mut model {
                if p.variant() == Variant::X {
                    p.merge_x_pcnn()?;
                }
            }
            Ok(FitOutcome { model, report: Some(report) })
        }
    }
}
