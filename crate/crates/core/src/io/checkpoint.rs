//! Checkpoint container.
//!
//! ```text
//! PCNNCKPT 1
//! created <RFC 3339 time>
//! header <n>
//! <n bytes of JSON>
//! tensors
//! <u64 LE value count><f64 LE values>
//! ```
//!
//! The `created` line is the only part that differs between two saves of
//! the same model.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::baselines::arx::ArxModel;
use crate::baselines::linear::LinearModel;
use crate::baselines::recurrent::RecurrentBaseline;
use crate::baselines::residual::{ResidualConfig, ResidualModel};
use crate::blackbox::{BlackBoxConfig, Standardizer};
use crate::dataset::FeatureSchema;
use crate::error::{Error, Result};
use crate::model::{AnyModel, ModelKind};
use crate::pcnn::{PcnnConfig, PcnnModel};
use crate::topology::BuildingTopology;
use crate::training::{Outcome, TrainReport};

use super::data::ColumnSchema;
use super::write_bytes;

pub const MAGIC: &str = "PCNNCKPT 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum ModelSpec {
    Pcnn { config: PcnnConfig, merged: bool, scalers: Vec<Standardizer> },
    Linear { model: LinearModel },
    Residual { base: LinearModel, consistent: bool, one_step_base: bool, blackbox: BlackBoxConfig, scaler: Standardizer },
    Arx { lags: usize, rank: usize },
    Recurrent {
        physics_informed: bool,
        pinn_weight: f64,
        /// How the physics loss obtains input gradients during training.
        physics_loss: Option<String>,
        blackbox: BlackBoxConfig,
        scaler: Standardizer,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub outcome: Outcome,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
    pub message: Option<String>,
}

impl From<&TrainReport> for TrainingSummary {
    fn from(r: &TrainReport) -> Self {
        TrainingSummary {
            outcome: r.outcome,
            epochs_run: r.history.len(),
            best_epoch: r.best_epoch,
            best_val_mse: finite(r.best_val_mse),
            message: r.message.clone(),
        }
    }
}

pub(crate) fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Run information stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Seed of the train/validation split the model was fitted on.
    pub split_seed: u64,
    /// Metric summary; non-finite values are stored as null.
    pub metrics: BTreeMap<String, Option<f64>>,
    pub training: Option<TrainingSummary>,
    /// CSV column mapping of the training data; default names when absent.
    pub columns: Option<ColumnSchema>,
    /// Echo of the configuration used.
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub topology: BuildingTopology,
    pub schema: FeatureSchema,
    pub model: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub meta: CheckpointMeta,
}

fn named_params(p: &crate::params::ParamSet) -> Vec<(String, Array2<f64>)> {
    p.names().iter().cloned().zip(p.values().iter().cloned()).collect()
}

fn split(model: &AnyModel) -> (FeatureSchema, ModelSpec, Vec<(String, Array2<f64>)>) {
    match model {
        AnyModel::Pcnn(p) => (
            p.schema().clone(),
            ModelSpec::Pcnn { config: p.config().clone(), merged: p.is_merged(), scalers: p.scalers() },
            named_params(p.params()),
        ),
        AnyModel::Linear(l) => (FeatureSchema::standard(), ModelSpec::Linear { model: l.clone() }, Vec::new()),
        AnyModel::Residual(r) => (
            r.schema().clone(),
            ModelSpec::Residual {
                base: r.base().clone(),
                consistent: r.is_consistent(),
                one_step_base: r.one_step_base(),
                blackbox: r.net().config().clone(),
                scaler: r.scaler().clone(),
            },
            named_params(r.params()),
        ),
        AnyModel::Arx(a) => {
            let mut t = Vec::new();
            for (i, al) in a.alpha.iter().enumerate() {
                t.push((format!("arx.alpha.{i}"), al.clone()));
            }
            for (i, b) in a.beta.iter().enumerate() {
                t.push((format!("arx.beta.{i}"), b.clone()));
            }
            t.push(("arx.condition_number".into(), Array2::from_elem((1, 1), a.condition_number)));
            (FeatureSchema::standard(), ModelSpec::Arx { lags: a.lags, rank: a.rank }, t)
        }
        AnyModel::Recurrent(r) => (
            r.schema().clone(),
            ModelSpec::Recurrent {
                physics_informed: r.kind() == ModelKind::Pinn,
                pinn_weight: r.pinn_weight(),
                physics_loss: (r.kind() == ModelKind::Pinn)
                    .then(|| "relu of negated input gradients, differentiated by double backward".to_string()),
                blackbox: r.net().config().clone(),
                scaler: r.scaler().clone(),
            },
            named_params(r.params()),
        ),
    }
}

/// Serializes `model` with the given `created` line content.
pub fn encode_checkpoint(model: &AnyModel, meta: &CheckpointMeta, created: &str) -> Result<Vec<u8>> {
    let (schema, spec, tensors) = split(model);
    let header = CheckpointHeader {
        kind: model.kind(),
        topology: model.topology().clone(),
        schema,
        model: spec,
        tensors: tensors
            .iter()
            .map(|(name, v)| TensorEntry { name: name.clone(), rows: v.nrows(), cols: v.ncols() })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(format!("{MAGIC}\ncreated {created}\nheader {}\n", json.len()).as_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(b"\ntensors\n");
    let count: usize = tensors.iter().map(|(_, v)| v.len()).sum();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for (_, v) in &tensors {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::data("truncated checkpoint"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::data("checkpoint header is not UTF-8"))
}

/// Parses the header without rebuilding the model.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<(String, Array2<f64>)>)> {
    let mut pos = 0;
    if take_line(bytes, &mut pos)? != MAGIC {
        return Err(Error::data("not a checkpoint file (bad magic line)"));
    }
    if !take_line(bytes, &mut pos)?.starts_with("created ") {
        return Err(Error::data("checkpoint is missing its 'created' line"));
    }
    let n: usize = take_line(bytes, &mut pos)?
        .strip_prefix("header ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::data("checkpoint is missing its header length"))?;
    let json = bytes.get(pos..pos + n).ok_or_else(|| Error::data("truncated checkpoint header"))?;
    pos += n;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
    if bytes.get(pos) != Some(&b'\n') {
        return Err(Error::data("checkpoint header length does not match"));
    }
    pos += 1;
    if take_line(bytes, &mut pos)? != "tensors" {
        return Err(Error::data("checkpoint is missing its tensor section"));
    }
    let count_bytes: [u8; 8] = bytes
        .get(pos..pos + 8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::data("truncated tensor section"))?;
    pos += 8;
    let count = u64::from_le_bytes(count_bytes) as usize;
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    if count != expected {
        return Err(Error::data(format!("tensor manifest lists {expected} values, data holds {count}")));
    }
    if bytes.len() != pos + 8 * count {
        return Err(Error::data("tensor data length does not match its prefix"));
    }
    let mut values = bytes[pos..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let tensors = header
        .tensors
        .iter()
        .map(|t| {
            let data: Vec<f64> = values.by_ref().take(t.rows * t.cols).collect();
            (t.name.clone(), Array2::from_shape_vec((t.rows, t.cols), data).expect("counted"))
        })
        .collect();
    Ok((header, tensors))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, tensors) = decode_header(bytes)?;
    let topo = &header.topology;
    let schema = &header.schema;
    let model = match header.model {
        ModelSpec::Pcnn { config, merged, scalers } => {
            if config.variant.kind() != header.kind {
                return Err(Error::data("checkpoint kind does not match its PCNN variant"));
            }
            let mut p = PcnnModel::new(topo, schema, &config)?;
            p.params_mut().load(&tensors)?;
            p.set_scalers(scalers)?;
            p.set_merged(merged);
            AnyModel::Pcnn(p)
        }
        ModelSpec::Linear { model } => {
            if model.topology() != topo {
                return Err(Error::data("linear coefficients were fitted on a different topology"));
            }
            AnyModel::Linear(LinearModel::new(topo, model.coefficients, model.e)?)
        }
        ModelSpec::Residual { base, consistent, one_step_base, blackbox, scaler } => {
            let cfg = ResidualConfig { blackbox, one_step_base };
            let mut r = ResidualModel::new(base, schema, consistent, &cfg)?;
            r.params_mut().load(&tensors)?;
            r.set_scaler(scaler)?;
            AnyModel::Residual(r)
        }
        ModelSpec::Arx { lags, rank } => {
            let get = |name: &str| {
                tensors
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, v)| v.clone())
                    .ok_or_else(|| Error::data(format!("checkpoint lacks tensor '{name}'")))
            };
            let alpha = (0..=lags).map(|i| get(&format!("arx.alpha.{i}"))).collect::<Result<Vec<_>>>()?;
            let beta = (0..=lags).map(|i| get(&format!("arx.beta.{i}"))).collect::<Result<Vec<_>>>()?;
            let cond = get("arx.condition_number")?[[0, 0]];
            AnyModel::Arx(ArxModel::from_parts(topo, alpha, beta, rank, cond)?)
        }
        ModelSpec::Recurrent { physics_informed, pinn_weight, blackbox, scaler, .. } => {
            let mut r = RecurrentBaseline::new(topo, schema, &blackbox, physics_informed, pinn_weight)?;
            r.params_mut().load(&tensors)?;
            r.set_scaler(scaler)?;
            AnyModel::Recurrent(r)
        }
    };
    if model.kind() != header.kind {
        return Err(Error::data(format!("checkpoint declares {} but holds {}", header.kind, model.kind())));
    }
    Ok(Checkpoint { model, meta: header.meta })
}

fn now_rfc3339() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0);
    chrono::DateTime::from_timestamp(secs, 0)
        .map(|t| t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_default()
}

pub fn save_checkpoint(path: &Path, model: &AnyModel, meta: &CheckpointMeta) -> Result<()> {
    write_bytes(path, &encode_checkpoint(model, meta, &now_rfc3339())?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_sequences, SeriesBatch, WARM_START};
    use crate::simulator::{simulate, Controller, PlantConfig};
    use crate::training::{init_model, ModelConfig};

    fn rollout_bits(model: &AnyModel, batch: &SeriesBatch) -> Vec<u64> {
        model
            .predict(batch)
            .unwrap()
            .iter()
            .flat_map(|s| s.predicted.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn gradient_models_round_trip_bit_exact() {
        let ds = simulate(&PlantConfig::default_chain(), &Controller::default(), 2, 1).unwrap();
        let (tr, _) = build_sequences(&ds, 0).unwrap();
        let topo = BuildingTopology::chain(3).unwrap();
        let schema = FeatureSchema::standard();
        let full: Vec<_> = tr.windows.iter().copied().filter(|w| w.len == tr.windows[0].len).take(2).collect();
        let batch = SeriesBatch::from_windows(&ds, &full, &schema, WARM_START).unwrap();
        for kind in [ModelKind::XPcnn, ModelKind::MPcnn, ModelKind::SPcnn, ModelKind::Blackbox, ModelKind::Pinn] {
            let mut model = init_model(kind, &topo, &schema, &ModelConfig::default(), 5).unwrap();
            model.fit_scalers(&ds, &tr.windows).unwrap();
            let meta = CheckpointMeta { seed: 5, ..Default::default() };
            let bytes = encode_checkpoint(&model, &meta, "t").unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back.model, model, "{kind}");
            assert_eq!(rollout_bits(&back.model, &batch), rollout_bits(&model, &batch));
            assert_eq!(back.meta, meta);
        }
    }

    #[test]
    fn corrupted_files_are_data_errors() {
        let topo = BuildingTopology::chain(2).unwrap();
        let model = init_model(ModelKind::SPcnn, &topo, &FeatureSchema::standard(), &ModelConfig::default(), 0).unwrap();
        let bytes = encode_checkpoint(&model, &CheckpointMeta::default(), "t").unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Data(_))));
        assert!(matches!(decode_checkpoint(b"hello\n"), Err(Error::Data(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::Data(_))));
    }

    #[test]
    fn only_created_line_differs() {
        let topo = BuildingTopology::chain(2).unwrap();
        let model = init_model(ModelKind::MPcnn, &topo, &FeatureSchema::standard(), &ModelConfig::default(), 0).unwrap();
        let a = encode_checkpoint(&model, &CheckpointMeta::default(), "2024-01-01T00:00:00Z").unwrap();
        let b = encode_checkpoint(&model, &CheckpointMeta::default(), "2025-06-30T12:00:00Z").unwrap();
        let strip = |v: &[u8]| {
            let s = String::from_utf8_lossy(v).to_string();
            s.lines().filter(|l| !l.starts_with("created ")).collect::<Vec<_>>().join("\n")
        };
        assert_ne!(a, b);
        assert_eq!(strip(&a), strip(&b));
    }
}
