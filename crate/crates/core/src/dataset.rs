//! In-memory multi-zone time series, windowing, and batch assembly.

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STEP_MINUTES: i64 = 15;
pub const WARM_START: usize = 12;
pub const MIN_WINDOW: usize = 48;
pub const MAX_WINDOW: usize = 288;
pub const WINDOW_STRIDE: usize = 4;

/// Exogenous feature available to the black-box module of a PCNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feature {
    Solar,
    TimeOfDaySin,
    TimeOfDayCos,
    MonthSin,
    MonthCos,
    Weekday,
}

impl Feature {
    pub const ALL: [Feature; 6] = [
        Feature::Solar,
        Feature::TimeOfDaySin,
        Feature::TimeOfDayCos,
        Feature::MonthSin,
        Feature::MonthCos,
        Feature::Weekday,
    ];
}

/// Roles a column can play. Only `Solar` and time-derived roles may feed
/// the black-box module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    ZoneTemperature(usize),
    Power(usize),
    Ambient,
    SolarHorizontal,
    SolarWindow(usize),
    TimeDerived,
    Ignored,
}

/// Features fed to PCNN black-box modules, validated at construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Role>", into = "Vec<Role>")]
pub struct FeatureSchema {
    sources: Vec<Role>,
}

impl FeatureSchema {
    pub fn new(sources: Vec<Role>) -> Result<Self> {
        for r in &sources {
            match r {
                Role::SolarHorizontal | Role::TimeDerived => {}
                other => {
                    return Err(Error::config(format!(
                        "black-box features may only use solar-horizontal or time-derived columns, got {other:?}"
                    )))
                }
            }
        }
        if !sources.contains(&Role::SolarHorizontal) {
            return Err(Error::config("feature schema must include the solar-horizontal column"));
        }
        Ok(FeatureSchema { sources })
    }

    /// Horizontal solar plus the five time encodings.
    pub fn standard() -> Self {
        FeatureSchema { sources: vec![Role::SolarHorizontal, Role::TimeDerived] }
    }

    pub fn features(&self) -> Vec<Feature> {
        let mut out = Vec::new();
        for r in &self.sources {
            match r {
                Role::SolarHorizontal => out.push(Feature::Solar),
                Role::TimeDerived => out.extend(&Feature::ALL[1..]),
                _ => unreachable!("validated at construction"),
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.features().len()
    }
}

impl TryFrom<Vec<Role>> for FeatureSchema {
    type Error = Error;
    fn try_from(v: Vec<Role>) -> Result<Self> {
        FeatureSchema::new(v)
    }
}

impl From<FeatureSchema> for Vec<Role> {
    fn from(s: FeatureSchema) -> Self {
        s.sources
    }
}

/// Sine/cosine of time of day and month, and weekday scaled to `[0, 1]`.
pub fn time_features(ts: NaiveDateTime) -> [f64; 5] {
    let tau = std::f64::consts::TAU;
    let day = (ts.hour() as f64 * 60.0 + ts.minute() as f64) / 1440.0;
    let month = ts.month0() as f64 / 12.0;
    let weekday = ts.weekday().num_days_from_monday() as f64 / 6.0;
    [(tau * day).sin(), (tau * day).cos(), (tau * month).sin(), (tau * month).cos(), weekday]
}

/// Uniformly sampled records. Missing values are stored as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub start: NaiveDateTime,
    pub temps: Array2<f64>,
    pub power: Array2<f64>,
    pub ambient: Vec<f64>,
    pub solar: Vec<f64>,
    /// Per-zone solar gain on windows, for gray-box models.
    pub qwin: Option<Array2<f64>>,
}

impl Dataset {
    pub fn new(
        start: NaiveDateTime,
        temps: Array2<f64>,
        power: Array2<f64>,
        ambient: Vec<f64>,
        solar: Vec<f64>,
        qwin: Option<Array2<f64>>,
    ) -> Result<Self> {
        let n = temps.nrows();
        let m = temps.ncols();
        if m == 0 {
            return Err(Error::data("dataset has no zones"));
        }
        if power.dim() != (n, m) || ambient.len() != n || solar.len() != n {
            return Err(Error::data("dataset columns have inconsistent lengths"));
        }
        if let Some(q) = &qwin {
            if q.dim() != (n, m) {
                return Err(Error::data("solar-window columns have inconsistent shape"));
            }
        }
        Ok(Dataset { start, temps, power, ambient, solar, qwin })
    }

    pub fn len(&self) -> usize {
        self.temps.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zones(&self) -> usize {
        self.temps.ncols()
    }

    pub fn timestamp(&self, k: usize) -> NaiveDateTime {
        self.start + Duration::minutes(STEP_MINUTES * k as i64)
    }

    /// True when every column needed by any model is present at step `k`.
    pub fn is_valid(&self, k: usize) -> bool {
        let row_ok = |a: &Array2<f64>| a.row(k).iter().all(|v| v.is_finite());
        row_ok(&self.temps)
            && row_ok(&self.power)
            && self.ambient[k].is_finite()
            && self.solar[k].is_finite()
            && self.qwin.as_ref().map_or(true, row_ok)
    }

    pub fn feature_value(&self, k: usize, f: Feature) -> f64 {
        let tf = time_features(self.timestamp(k));
        match f {
            Feature::Solar => self.solar[k],
            Feature::TimeOfDaySin => tf[0],
            Feature::TimeOfDayCos => tf[1],
            Feature::MonthSin => tf[2],
            Feature::MonthCos => tf[3],
            Feature::Weekday => tf[4],
        }
    }

    /// Maximal runs `[start, end)` of valid steps.
    pub fn valid_segments(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut cur: Option<usize> = None;
        for k in 0..self.len() {
            match (self.is_valid(k), cur) {
                (true, None) => cur = Some(k),
                (false, Some(s)) => {
                    out.push((s, k));
                    cur = None;
                }
                _ => {}
            }
        }
        if let Some(s) = cur {
            out.push((s, self.len()));
        }
        out
    }

    /// Steps `[start, start + len)` as a new dataset.
    pub fn slice(&self, start: usize, len: usize) -> Result<Dataset> {
        if start + len > self.len() {
            return Err(Error::input("slice beyond dataset end"));
        }
        let rows = ndarray::s![start..start + len, ..];
        Dataset::new(
            self.timestamp(start),
            self.temps.slice(rows).to_owned(),
            self.power.slice(rows).to_owned(),
            self.ambient[start..start + len].to_vec(),
            self.solar[start..start + len].to_vec(),
            self.qwin.as_ref().map(|q| q.slice(rows).to_owned()),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceSet {
    pub windows: Vec<Window>,
}

impl SequenceSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Every window of at most three days starting hourly inside each gap-free
/// segment, keeping those of at least twelve hours.
pub fn enumerate_windows(dataset: &Dataset) -> Vec<Window> {
    let mut out = Vec::new();
    for (s, e) in dataset.valid_segments() {
        let mut start = s;
        while start < e {
            let len = MAX_WINDOW.min(e - start);
            if len >= MIN_WINDOW {
                out.push(Window { start, len });
            }
            start += WINDOW_STRIDE;
        }
    }
    out
}

/// Seeded 80/20 split by window.
pub fn build_sequences(dataset: &Dataset, seed: u64) -> Result<(SequenceSet, SequenceSet)> {
    if dataset.len() < MIN_WINDOW {
        return Err(Error::data(format!(
            "dataset has {} steps; at least {MIN_WINDOW} (12 h) are required",
            dataset.len()
        )));
    }
    let mut windows = enumerate_windows(dataset);
    if windows.is_empty() {
        return Err(Error::data("no gap-free window of at least 12 h"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    windows.shuffle(&mut rng);
    let n_train = if windows.len() == 1 { 1 } else { ((windows.len() as f64) * 0.8).round() as usize };
    let n_train = n_train.clamp(1, windows.len());
    let mut train: Vec<Window> = windows[..n_train].to_vec();
    let mut val: Vec<Window> = windows[n_train..].to_vec();
    train.sort();
    val.sort();
    Ok((SequenceSet { windows: train }, SequenceSet { windows: val }))
}

/// Equal-length windows laid out step by step, one row per window.
#[derive(Debug, Clone)]
pub struct SeriesBatch {
    pub len: usize,
    pub rows: usize,
    pub zones: usize,
    pub warm_start: usize,
    pub temps: Vec<Array2<f64>>,
    pub power: Vec<Array2<f64>>,
    pub ambient: Vec<Array2<f64>>,
    pub solar: Vec<Array2<f64>>,
    pub features: Vec<Array2<f64>>,
    pub qwin: Vec<Array2<f64>>,
}

impl SeriesBatch {
    pub fn from_windows(dataset: &Dataset, windows: &[Window], schema: &FeatureSchema, warm_start: usize) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::input("empty batch"))?;
        let len = first.len;
        if windows.iter().any(|w| w.len != len) {
            return Err(Error::input("batch windows must share one length"));
        }
        if len < warm_start + 1 {
            return Err(Error::input(format!("sequence of {len} steps is shorter than warm start + 1")));
        }
        if windows.iter().any(|w| w.start + w.len > dataset.len()) {
            return Err(Error::input("window extends beyond dataset"));
        }
        let rows = windows.len();
        let m = dataset.zones();
        let feats = schema.features();
        let d = feats.len();
        let mut b = SeriesBatch {
            len,
            rows,
            zones: m,
            warm_start,
            temps: Vec::with_capacity(len),
            power: Vec::with_capacity(len),
            ambient: Vec::with_capacity(len),
            solar: Vec::with_capacity(len),
            features: Vec::with_capacity(len),
            qwin: Vec::with_capacity(len),
        };
        for k in 0..len {
            let idx = |r: usize| windows[r].start + k;
            b.temps.push(Array2::from_shape_fn((rows, m), |(r, z)| dataset.temps[[idx(r), z]]));
            b.power.push(Array2::from_shape_fn((rows, m), |(r, z)| dataset.power[[idx(r), z]]));
            b.ambient.push(Array2::from_shape_fn((rows, 1), |(r, _)| dataset.ambient[idx(r)]));
            b.solar.push(Array2::from_shape_fn((rows, 1), |(r, _)| dataset.solar[idx(r)]));
            b.features.push(Array2::from_shape_fn((rows, d), |(r, j)| dataset.feature_value(idx(r), feats[j])));
            b.qwin.push(match &dataset.qwin {
                Some(q) => Array2::from_shape_fn((rows, m), |(r, z)| q[[idx(r), z]]),
                None => Array2::zeros((rows, m)),
            });
        }
        Ok(b)
    }

    /// Whole dataset as one sequence.
    pub fn whole(dataset: &Dataset, schema: &FeatureSchema, warm_start: usize) -> Result<Self> {
        Self::from_windows(dataset, &[Window { start: 0, len: dataset.len() }], schema, warm_start)
    }

    /// Last warm-start step; predictions start from here.
    pub fn prediction_start(&self) -> usize {
        self.warm_start.saturating_sub(1)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.ncols())
    }
}

/// Groups windows into batches of at most `batch_size`, each batch split
/// into equal-length parts. Order follows `windows`.
pub fn bucket_by_length(windows: &[Window], batch_size: usize) -> Vec<Vec<Vec<Window>>> {
    windows
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let mut lens: Vec<usize> = chunk.iter().map(|w| w.len).collect();
            lens.sort_unstable();
            lens.dedup();
            lens.iter()
                .map(|&l| chunk.iter().copied().filter(|w| w.len == l).collect())
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn start() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }

    fn flat(n: usize, m: usize) -> Dataset {
        Dataset::new(start(), Array2::from_elem((n, m), 20.0), Array2::zeros((n, m)), vec![10.0; n], vec![0.0; n], None)
            .unwrap()
    }

    fn brute_force(n_valid: &[bool]) -> usize {
        // every start aligned to 4 steps after a segment start
        let mut count = 0;
        let n = n_valid.len();
        let mut s = 0;
        while s < n {
            if !n_valid[s] {
                s += 1;
                continue;
            }
            let mut e = s;
            while e < n && n_valid[e] {
                e += 1;
            }
            for start in s..e {
                if (start - s) % 4 != 0 {
                    continue;
                }
                let len = (e - start).min(288);
                if len >= 48 && (start..start + len).all(|k| n_valid[k]) {
                    count += 1;
                }
            }
            s = e;
        }
        count
    }

    #[test]
    fn six_days_window_count() {
        let ds = flat(6 * 96, 1);
        let w = enumerate_windows(&ds);
        let full = w.iter().filter(|w| w.len == 288).count();
        assert_eq!(full, 1 + (6 * 96 - 288) / 4);
        assert_eq!(w.len(), brute_force(&vec![true; 6 * 96]));
        assert_eq!(w.len(), 133);
    }

    #[test]
    fn missing_value_excluded() {
        let mut ds = flat(400, 2);
        ds.power[[150, 1]] = f64::NAN;
        let w = enumerate_windows(&ds);
        assert!(w.iter().all(|w| !(w.start..w.start + w.len).contains(&150)));
        let mut mask = vec![true; 400];
        mask[150] = false;
        assert_eq!(w.len(), brute_force(&mask));
    }

    #[test]
    fn short_dataset_is_error() {
        assert!(build_sequences(&flat(47, 1), 0).is_err());
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let ds = flat(6 * 96, 1);
        let (t1, v1) = build_sequences(&ds, 3).unwrap();
        let (t2, v2) = build_sequences(&ds, 3).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!(t1.len() + v1.len(), 133);
        assert!(t1.windows.iter().all(|w| !v1.windows.contains(w)));
        assert_eq!(t1.len(), 106);
    }

    #[test]
    fn schema_rejects_state_columns() {
        assert!(FeatureSchema::new(vec![Role::SolarHorizontal, Role::Ambient]).is_err());
        assert!(FeatureSchema::new(vec![Role::SolarHorizontal, Role::Power(0)]).is_err());
        assert!(FeatureSchema::new(vec![Role::SolarHorizontal, Role::ZoneTemperature(0)]).is_err());
        assert_eq!(FeatureSchema::standard().dim(), 6);
    }

    #[test]
    fn time_features_midnight_monday() {
        let f = time_features(start());
        assert!((f[0]).abs() < 1e-15 && (f[1] - 1.0).abs() < 1e-15);
        assert_eq!(f[4], 0.0);
    }

    #[test]
    fn buckets_hold_equal_lengths() {
        let ws = vec![
            Window { start: 0, len: 288 },
            Window { start: 4, len: 100 },
            Window { start: 8, len: 288 },
        ];
        let b = bucket_by_length(&ws, 3);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 2);
        assert!(b[0].iter().all(|part| part.iter().all(|w| w.len == part[0].len)));
    }
}
