//! CSV datasets and the simulator's truth sidecar.
//!
//! The default layout is `timestamp, temp_1..temp_m, power_1..power_m,
//! ambient, solar[, qwin_1..qwin_m]`. Empty cells are missing values.

use std::path::Path;

use chrono::NaiveDateTime;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Role, STEP_MINUTES};
use crate::error::{Error, Result};
use crate::simulator::PlantTruth;

use super::{read_text, write_bytes};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Column {
    pub name: String,
    /// Zone indices inside roles are 1-based.
    pub role: Role,
}

/// Mapping from CSV columns to roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    #[serde(default = "default_timestamp")]
    pub timestamp: String,
    pub columns: Vec<Column>,
}

fn default_timestamp() -> String {
    "timestamp".into()
}

struct Layout {
    zones: usize,
    temp: Vec<usize>,
    power: Vec<usize>,
    ambient: usize,
    solar: usize,
    qwin: Option<Vec<usize>>,
}

impl ColumnSchema {
    /// The default layout for `zones` zones.
    pub fn standard(zones: usize, with_qwin: bool) -> Self {
        let mut columns = Vec::new();
        let mut push = |name: String, role| columns.push(Column { name, role });
        for z in 1..=zones {
            push(format!("temp_{z}"), Role::ZoneTemperature(z));
        }
        for z in 1..=zones {
            push(format!("power_{z}"), Role::Power(z));
        }
        push("ambient".into(), Role::Ambient);
        push("solar".into(), Role::SolarHorizontal);
        if with_qwin {
            for z in 1..=zones {
                push(format!("qwin_{z}"), Role::SolarWindow(z));
            }
        }
        ColumnSchema { timestamp: default_timestamp(), columns }
    }

    /// Roles from default column names.
    pub fn infer(header: &[String]) -> Result<Self> {
        let mut columns = Vec::new();
        let mut timestamp = None;
        for name in header {
            let zone = |prefix: &str| -> Option<usize> {
                name.strip_prefix(prefix).and_then(|s| s.parse::<usize>().ok()).filter(|z| *z >= 1)
            };
            let role = match name.as_str() {
                "timestamp" => {
                    timestamp = Some(name.clone());
                    continue;
                }
                "ambient" => Role::Ambient,
                "solar" => Role::SolarHorizontal,
                _ => {
                    if let Some(z) = zone("temp_") {
                        Role::ZoneTemperature(z)
                    } else if let Some(z) = zone("power_") {
                        Role::Power(z)
                    } else if let Some(z) = zone("qwin_") {
                        Role::SolarWindow(z)
                    } else {
                        return Err(Error::config(format!(
                            "column '{name}' has no default role; give an explicit column mapping"
                        )));
                    }
                }
            };
            columns.push(Column { name: name.clone(), role });
        }
        let timestamp = timestamp.ok_or_else(|| Error::config("no 'timestamp' column"))?;
        Ok(ColumnSchema { timestamp, columns })
    }

    /// Number of zones described by the schema.
    pub fn zones(&self) -> Result<usize> {
        Ok(self.layout_by_position()?.zones)
    }

    fn layout_by_position(&self) -> Result<Layout> {
        let names: Vec<String> = self.columns.iter().map(|c| c.name.clone()).collect();
        self.layout(&names)
    }

    /// Column positions within `header` (timestamp excluded from `columns`).
    fn layout(&self, header: &[String]) -> Result<Layout> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) || c.name == self.timestamp {
                return Err(Error::config(format!("column '{}' mapped twice", c.name)));
            }
        }
        let pos = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::config(format!("schema column '{name}' missing from the CSV header")))
        };
        for h in header {
            if *h != self.timestamp && !self.columns.iter().any(|c| c.name == *h) {
                return Err(Error::config(format!("CSV column '{h}' is not in the schema; map it as ignored")));
            }
        }
        let max_zone = self
            .columns
            .iter()
            .filter_map(|c| match c.role {
                Role::ZoneTemperature(z) | Role::Power(z) | Role::SolarWindow(z) => Some(z),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        if self.columns.iter().any(|c| matches!(c.role, Role::ZoneTemperature(0) | Role::Power(0) | Role::SolarWindow(0))) {
            return Err(Error::config("zone indices in column roles are 1-based"));
        }
        let m = max_zone;
        if m == 0 {
            return Err(Error::config("schema has no zone columns"));
        }
        let per_zone = |pick: fn(Role) -> Option<usize>, what: &str, required: bool| -> Result<Option<Vec<usize>>> {
            let mut out = vec![None; m];
            for c in &self.columns {
                if let Some(z) = pick(c.role) {
                    if out[z - 1].is_some() {
                        return Err(Error::config(format!("zone {z} has two {what} columns")));
                    }
                    out[z - 1] = Some(pos(&c.name)?);
                }
            }
            if out.iter().all(Option::is_none) && !required {
                return Ok(None);
            }
            out.into_iter()
                .enumerate()
                .map(|(z, p)| p.ok_or_else(|| Error::config(format!("zone {} has no {what} column", z + 1))))
                .collect::<Result<Vec<_>>>()
                .map(Some)
        };
        let single = |role: Role, what: &str| -> Result<usize> {
            let cols: Vec<&Column> = self.columns.iter().filter(|c| c.role == role).collect();
            match cols.as_slice() {
                [c] => pos(&c.name),
                _ => Err(Error::config(format!("schema needs exactly one {what} column, found {}", cols.len()))),
            }
        };
        let temp = per_zone(|r| if let Role::ZoneTemperature(z) = r { Some(z) } else { None }, "temperature", true)?
            .expect("required");
        let power = per_zone(|r| if let Role::Power(z) = r { Some(z) } else { None }, "power", true)?.expect("required");
        let qwin = per_zone(|r| if let Role::SolarWindow(z) = r { Some(z) } else { None }, "solar-window", false)?;
        Ok(Layout {
            zones: m,
            temp,
            power,
            ambient: single(Role::Ambient, "ambient")?,
            solar: single(Role::SolarHorizontal, "solar-horizontal")?,
            qwin,
        })
    }
}

fn parse_cell(s: &str, line: usize, col: &str) -> Result<f64> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse::<f64>()
        .map_err(|_| Error::data(format!("line {line}, column '{col}': '{s}' is not a number")))
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn check_timestamps(stamps: &[NaiveDateTime]) -> Result<()> {
    if let Some(i) = stamps.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::data(format!("line {}: timestamps must strictly increase", i + 3)));
    }
    for (i, w) in stamps.windows(2).enumerate() {
        let dt = (w[1] - w[0]).num_seconds();
        if dt != STEP_MINUTES * 60 {
            return Err(Error::data(format!(
                "line {}: non-uniform sampling, {dt} s after the previous record (expected {} s)",
                i + 3,
                STEP_MINUTES * 60
            )));
        }
    }
    Ok(())
}

/// Reads a CSV dataset. With `schema = None` column roles come from the
/// default names.
pub fn load_dataset(path: &Path, schema: Option<&ColumnSchema>) -> Result<Dataset> {
    let text = read_text(path)?;
    parse_dataset(&text, schema)
}

pub fn parse_dataset(text: &str, schema: Option<&ColumnSchema>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::data(format!("unreadable CSV header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let inferred;
    let schema = match schema {
        Some(s) => s,
        None => {
            inferred = ColumnSchema::infer(&header)?;
            &inferred
        }
    };
    let ts_col = header
        .iter()
        .position(|h| *h == schema.timestamp)
        .ok_or_else(|| Error::config(format!("timestamp column '{}' missing from the CSV header", schema.timestamp)))?;
    let layout = schema.layout(&header)?;
    let m = layout.zones;
    let mut stamps: Vec<NaiveDateTime> = Vec::new();
    let mut temps = Vec::new();
    let mut power = Vec::new();
    let mut ambient = Vec::new();
    let mut solar = Vec::new();
    let mut qwin = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::data(format!("line {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::data(format!("line {line}: {} fields, header has {}", rec.len(), header.len())));
        }
        let ts_text = rec[ts_col].trim();
        let ts = NaiveDateTime::parse_from_str(ts_text, TIMESTAMP_FORMAT)
            .map_err(|_| Error::data(format!("line {line}: timestamp '{ts_text}' is not ISO-8601 (YYYY-MM-DDTHH:MM:SS)")))?;
        stamps.push(ts);
        let cell = |p: usize| parse_cell(&rec[p], line, &header[p]);
        for &p in &layout.temp {
            temps.push(cell(p)?);
        }
        for &p in &layout.power {
            power.push(cell(p)?);
        }
        ambient.push(cell(layout.ambient)?);
        solar.push(cell(layout.solar)?);
        if let Some(q) = &layout.qwin {
            for &p in q {
                qwin.push(cell(p)?);
            }
        }
    }
    let n = stamps.len();
    if n == 0 {
        return Err(Error::data("dataset has no records"));
    }
    check_timestamps(&stamps)?;
    let shape = |v: Vec<f64>| Array2::from_shape_vec((n, m), v).expect("row-major fill");
    Dataset::new(
        stamps[0],
        shape(temps),
        shape(power),
        ambient,
        solar,
        layout.qwin.as_ref().map(|_| shape(qwin)),
    )
}

/// CSV text in the default layout. Values use the shortest representation
/// that parses back to the same `f64`.
pub fn format_dataset(ds: &Dataset) -> String {
    let schema = ColumnSchema::standard(ds.zones(), ds.qwin.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![schema.timestamp.clone()];
    header.extend(schema.columns.iter().map(|c| c.name.clone()));
    w.write_record(&header).expect("in-memory write");
    for k in 0..ds.len() {
        let mut row = vec![ds.timestamp(k).format(TIMESTAMP_FORMAT).to_string()];
        row.extend(ds.temps.row(k).iter().map(|v| fmt_cell(*v)));
        row.extend(ds.power.row(k).iter().map(|v| fmt_cell(*v)));
        row.push(fmt_cell(ds.ambient[k]));
        row.push(fmt_cell(ds.solar[k]));
        if let Some(q) = &ds.qwin {
            row.extend(q.row(k).iter().map(|v| fmt_cell(*v)));
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_bytes(path, format_dataset(ds).as_bytes())
}

pub fn save_truth(path: &Path, truth: &PlantTruth) -> Result<()> {
    let mut text = serde_json::to_string_pretty(truth).map_err(|e| Error::data(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn load_truth(path: &Path) -> Result<PlantTruth> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}
