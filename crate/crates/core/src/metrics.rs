//! Error metrics over predicted sequences.
//!
//! Each sequence is a `steps × zones` pair of predicted and measured
//! temperatures, warm start already removed. Metrics average over zones and
//! steps within a sequence, then over sequences.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Predicted and measured temperatures for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePrediction {
    pub predicted: Array2<f64>,
    pub measured: Array2<f64>,
}

fn check(seqs: &[SequencePrediction]) -> Result<()> {
    for s in seqs {
        if s.predicted.dim() != s.measured.dim() {
            return Err(Error::input("prediction and target shapes differ"));
        }
    }
    Ok(())
}

fn triple_average(seqs: &[SequencePrediction], f: impl Fn(f64, f64) -> f64) -> Result<f64> {
    check(seqs)?;
    let per_seq: Vec<f64> = seqs
        .iter()
        .filter(|s| !s.predicted.is_empty())
        .map(|s| {
            let total: f64 = s.predicted.iter().zip(s.measured.iter()).map(|(p, m)| f(*p, *m)).sum();
            total / s.predicted.len() as f64
        })
        .collect();
    if per_seq.is_empty() {
        return Ok(0.0);
    }
    Ok(per_seq.iter().sum::<f64>() / per_seq.len() as f64)
}

pub fn mse(seqs: &[SequencePrediction]) -> Result<f64> {
    triple_average(seqs, |p, m| (p - m) * (p - m))
}

pub fn mae(seqs: &[SequencePrediction]) -> Result<f64> {
    triple_average(seqs, |p, m| (p - m).abs())
}

/// Mean absolute percentage error in percent, relative to °C values.
pub fn mape(seqs: &[SequencePrediction]) -> Result<f64> {
    check(seqs)?;
    if seqs.iter().any(|s| s.measured.iter().any(|m| *m == 0.0)) {
        return Err(Error::input("MAPE undefined: a measured temperature is exactly 0 °C"));
    }
    Ok(100.0 * triple_average(seqs, |p, m| ((p - m) / m).abs())?)
}

/// Per-zone mean squared error, averaged over sequences.
pub fn mse_per_zone(seqs: &[SequencePrediction], zones: usize) -> Result<Vec<f64>> {
    check(seqs)?;
    let mut out = vec![0.0; zones];
    let mut n = 0usize;
    for s in seqs.iter().filter(|s| s.predicted.nrows() > 0) {
        n += 1;
        for z in 0..zones {
            let col_p = s.predicted.column(z);
            let col_m = s.measured.column(z);
            let sq: f64 = col_p.iter().zip(col_m.iter()).map(|(p, m)| (p - m) * (p - m)).sum();
            out[z] += sq / s.predicted.nrows() as f64;
        }
    }
    if n > 0 {
        for v in &mut out {
            *v /= n as f64;
        }
    }
    Ok(out)
}

/// MAE at each prediction step `1..=H`, over the sequences reaching it.
pub fn error_by_horizon(seqs: &[SequencePrediction]) -> Result<Vec<f64>> {
    check(seqs)?;
    let horizon = seqs.iter().map(|s| s.predicted.nrows()).max().unwrap_or(0);
    let mut sum = vec![0.0; horizon];
    let mut count = vec![0usize; horizon];
    for s in seqs {
        for h in 0..s.predicted.nrows() {
            let row_p = s.predicted.row(h);
            let row_m = s.measured.row(h);
            sum[h] += row_p.iter().zip(row_m.iter()).map(|(p, m)| (p - m).abs()).sum::<f64>();
            count[h] += row_p.len();
        }
    }
    Ok(sum.iter().zip(&count).map(|(s, c)| s / *c as f64).collect())
}
