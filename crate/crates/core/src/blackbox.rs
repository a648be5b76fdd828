//! Encoder, gated recurrent cell, normalization, and decoder.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    /// Two gates (update and reset).
    #[default]
    Gru,
    /// Four gates with a separate cell state.
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlackBoxConfig {
    pub input_dim: usize,
    pub encoder_width: usize,
    pub recurrent_width: usize,
    pub recurrent_layers: usize,
    pub decoder_width: usize,
    pub output_dim: usize,
    pub cell: CellKind,
    /// Fixed multiplier on the final linear layer.
    pub output_scale: f64,
    pub seed: u64,
}

impl Default for BlackBoxConfig {
    fn default() -> Self {
        BlackBoxConfig {
            input_dim: 6,
            encoder_width: 16,
            recurrent_width: 32,
            recurrent_layers: 1,
            decoder_width: 16,
            output_dim: 1,
            cell: CellKind::Gru,
            output_scale: 0.01,
            seed: 0,
        }
    }
}

impl BlackBoxConfig {
    /// Encoder 32, two recurrent layers of 64, decoder 32.
    pub fn full_scale(input_dim: usize, output_dim: usize) -> Self {
        BlackBoxConfig {
            input_dim,
            encoder_width: 32,
            recurrent_width: 64,
            recurrent_layers: 2,
            decoder_width: 32,
            output_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("input_dim", self.input_dim),
            ("encoder_width", self.encoder_width),
            ("recurrent_width", self.recurrent_width),
            ("recurrent_layers", self.recurrent_layers),
            ("decoder_width", self.decoder_width),
            ("output_dim", self.output_dim),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::config(format!("black-box {name} must be at least 1")));
            }
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::config("black-box output_scale must be positive"));
        }
        Ok(())
    }
}

/// Per-feature standardization fitted on training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Column statistics over `rows`; near-constant columns keep unit scale.
    pub fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1;
            for j in 0..dim {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = (0..dim)
            .map(|j| {
                let var = (sq[j] / n as f64 - mean[j] * mean[j]).max(0.0);
                let s = var.sqrt();
                if s < 1e-8 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellIds {
    w_x: ParamId,
    b_x: ParamId,
    w_h: ParamId,
    b_h: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetIds {
    enc_w: ParamId,
    enc_b: ParamId,
    cells: Vec<CellIds>,
    norm_gain: ParamId,
    norm_bias: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlackBoxNet {
    config: BlackBoxConfig,
    ids: NetIds,
    scaler: Standardizer,
}

/// Hidden (and, for the four-gate cell, cell) state per layer.
#[derive(Debug, Clone)]
pub struct RecurrentState {
    pub hidden: Vec<Var>,
    pub cell: Vec<Option<Var>>,
}

/// A net's parameters bound to one tape for a batch of `rows` sequences,
/// with biases and scaler constants broadcast once.
pub struct BoundNet<'a> {
    net: &'a BlackBoxNet,
    rows: usize,
    enc_w: Var,
    enc_b: Var,
    cells: Vec<(Var, Var, Var, Var)>,
    norm_gain: Var,
    norm_bias: Var,
    dec_w: Var,
    dec_b: Var,
    out_w: Var,
    out_b: Var,
    mean: Var,
    inv_std: Var,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

impl BlackBoxNet {
    /// Registers freshly initialized weights in `params` under `prefix`.
    pub fn init(params: &mut ParamSet, prefix: &str, config: &BlackBoxConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dense = |params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = params.add(format!("{prefix}{name}.w"), uniform(rng, fan_out, fan_in, bound));
            let b = params.add(format!("{prefix}{name}.b"), uniform(rng, 1, fan_out, bound));
            (w, b)
        };
        let (enc_w, enc_b) = dense(params, &mut rng, "enc", config.input_dim, config.encoder_width);
        let h = config.recurrent_width;
        let g = config.cell.gates() * h;
        let mut cells = Vec::new();
        for layer in 0..config.recurrent_layers {
            let fan_in = if layer == 0 { config.encoder_width } else { h };
            let bound = 1.0 / (h as f64).sqrt();
            cells.push(CellIds {
                w_x: params.add(format!("{prefix}rnn{layer}.w_x"), uniform(&mut rng, g, fan_in, bound)),
                b_x: params.add(format!("{prefix}rnn{layer}.b_x"), uniform(&mut rng, 1, g, bound)),
                w_h: params.add(format!("{prefix}rnn{layer}.w_h"), uniform(&mut rng, g, h, bound)),
                b_h: params.add(format!("{prefix}rnn{layer}.b_h"), uniform(&mut rng, 1, g, bound)),
            });
        }
        let norm_gain = params.add(format!("{prefix}norm.gain"), Array2::ones((1, h)));
        let norm_bias = params.add(format!("{prefix}norm.bias"), Array2::zeros((1, h)));
        let (dec_w, dec_b) = dense(params, &mut rng, "dec", h, config.decoder_width);
        let (out_w, out_b) = dense(params, &mut rng, "out", config.decoder_width, config.output_dim);
        Ok(BlackBoxNet {
            config: config.clone(),
            ids: NetIds { enc_w, enc_b, cells, norm_gain, norm_bias, dec_w, dec_b, out_w, out_b },
            scaler: Standardizer::identity(config.input_dim),
        })
    }

    pub fn config(&self) -> &BlackBoxConfig {
        &self.config
    }

    pub fn scaler(&self) -> &Standardizer {
        &self.scaler
    }

    pub fn set_scaler(&mut self, scaler: Standardizer) -> Result<()> {
        if scaler.dim() != self.config.input_dim {
            return Err(Error::input(format!(
                "scaler has {} features, net expects {}",
                scaler.dim(),
                self.config.input_dim
            )));
        }
        self.scaler = scaler;
        Ok(())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let ids = &self.ids;
        let mut out = vec![ids.enc_w, ids.enc_b];
        for c in &ids.cells {
            out.extend([c.w_x, c.b_x, c.w_h, c.b_h]);
        }
        out.extend([ids.norm_gain, ids.norm_bias, ids.dec_w, ids.dec_b, ids.out_w, ids.out_b]);
        out
    }

    pub fn count_parameters(&self, params: &ParamSet) -> usize {
        self.param_ids().iter().map(|id| params.get(*id).len()).sum()
    }

    /// Zeroes the final layer so the net outputs exactly zero.
    pub fn zero_output(&self, params: &mut ParamSet) {
        params.get_mut(self.ids.out_w).fill(0.0);
        params.get_mut(self.ids.out_b).fill(0.0);
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape, bound: &Bound, rows: usize) -> Result<BoundNet<'a>> {
        let ids = &self.ids;
        let bias = |tape: &mut Tape, id: ParamId| tape.broadcast_rows(bound.var(id), rows);
        let mut cells = Vec::with_capacity(ids.cells.len());
        for c in &ids.cells {
            let bx = bias(tape, c.b_x)?;
            let bh = bias(tape, c.b_h)?;
            cells.push((bound.var(c.w_x), bx, bound.var(c.w_h), bh));
        }
        let d = self.config.input_dim;
        let mean = Array2::from_shape_fn((rows, d), |(_, j)| self.scaler.mean[j]);
        let inv_std = Array2::from_shape_fn((rows, d), |(_, j)| 1.0 / self.scaler.std[j]);
        Ok(BoundNet {
            net: self,
            rows,
            enc_w: bound.var(ids.enc_w),
            enc_b: bias(tape, ids.enc_b)?,
            cells,
            norm_gain: bias(tape, ids.norm_gain)?,
            norm_bias: bias(tape, ids.norm_bias)?,
            dec_w: bound.var(ids.dec_w),
            dec_b: bias(tape, ids.dec_b)?,
            out_w: bound.var(ids.out_w),
            out_b: bias(tape, ids.out_b)?,
            mean: tape.leaf(mean),
            inv_std: tape.leaf(inv_std),
        })
    }
}

impl BoundNet<'_> {
    pub fn initial_state(&self, tape: &mut Tape) -> RecurrentState {
        let h = self.net.config.recurrent_width;
        let layers = self.net.config.recurrent_layers;
        let lstm = self.net.config.cell == CellKind::Lstm;
        RecurrentState {
            hidden: (0..layers).map(|_| tape.zeros(self.rows, h)).collect(),
            cell: (0..layers).map(|_| lstm.then(|| tape.zeros(self.rows, h))).collect(),
        }
    }

    /// One step: returns `rows × output_dim` and advances `state`.
    pub fn step(&self, tape: &mut Tape, x: Var, state: &mut RecurrentState) -> Result<Var> {
        let cfg = &self.net.config;
        if x.cols() != cfg.input_dim || x.rows() != self.rows {
            return Err(Error::input(format!(
                "black-box input is {}x{}, expected {}x{}",
                x.rows(),
                x.cols(),
                self.rows,
                cfg.input_dim
            )));
        }
        let centered = tape.sub(x, self.mean)?;
        let scaled = tape.mul(centered, self.inv_std)?;
        let enc = tape.linear(scaled, self.enc_w)?;
        let enc = tape.add(enc, self.enc_b)?;
        let mut input = tape.tanh(enc)?;
        let hsize = cfg.recurrent_width;
        for (layer, &(w_x, b_x, w_h, b_h)) in self.cells.iter().enumerate() {
            let gx = tape.linear(input, w_x)?;
            let gx = tape.add(gx, b_x)?;
            let gh = tape.linear(state.hidden[layer], w_h)?;
            let gh = tape.add(gh, b_h)?;
            let h_prev = state.hidden[layer];
            let h_next = match cfg.cell {
                CellKind::Gru => {
                    let rx = tape.slice_cols(gx, 0, hsize)?;
                    let rh = tape.slice_cols(gh, 0, hsize)?;
                    let zx = tape.slice_cols(gx, hsize, hsize)?;
                    let zh = tape.slice_cols(gh, hsize, hsize)?;
                    let nx = tape.slice_cols(gx, 2 * hsize, hsize)?;
                    let nh = tape.slice_cols(gh, 2 * hsize, hsize)?;
                    let r = tape.add(rx, rh)?;
                    let r = tape.sigmoid(r)?;
                    let z = tape.add(zx, zh)?;
                    let z = tape.sigmoid(z)?;
                    let rn = tape.mul(r, nh)?;
                    let n = tape.add(nx, rn)?;
                    let n = tape.tanh(n)?;
                    let keep = tape.affine(z, -1.0, 1.0)?;
                    let fresh = tape.mul(keep, n)?;
                    let carried = tape.mul(z, h_prev)?;
                    tape.add(fresh, carried)?
                }
                CellKind::Lstm => {
                    let gates = tape.add(gx, gh)?;
                    let i = tape.slice_cols(gates, 0, hsize)?;
                    let i = tape.sigmoid(i)?;
                    let f = tape.slice_cols(gates, hsize, hsize)?;
                    let f = tape.sigmoid(f)?;
                    let g = tape.slice_cols(gates, 2 * hsize, hsize)?;
                    let g = tape.tanh(g)?;
                    let o = tape.slice_cols(gates, 3 * hsize, hsize)?;
                    let o = tape.sigmoid(o)?;
                    let c_prev = state.cell[layer].expect("lstm cell state");
                    let kept = tape.mul(f, c_prev)?;
                    let written = tape.mul(i, g)?;
                    let c = tape.add(kept, written)?;
                    state.cell[layer] = Some(c);
                    let tc = tape.tanh(c)?;
                    tape.mul(o, tc)?
                }
            };
            state.hidden[layer] = h_next;
            input = h_next;
        }
        let normed = self.layer_norm(tape, input)?;
        let dec = tape.linear(normed, self.dec_w)?;
        let dec = tape.add(dec, self.dec_b)?;
        let dec = tape.tanh(dec)?;
        let out = tape.linear(dec, self.out_w)?;
        let out = tape.add(out, self.out_b)?;
        Ok(tape.scale(out, cfg.output_scale)?)
    }

    fn layer_norm(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let width = h.cols();
        let inv_w = 1.0 / width as f64;
        let total = tape.sum_cols(h)?;
        let mean = tape.scale(total, inv_w)?;
        let mean = tape.broadcast_cols(mean, width)?;
        let centered = tape.sub(h, mean)?;
        let sq = tape.square(centered)?;
        let var = tape.sum_cols(sq)?;
        let var = tape.affine(var, inv_w, 1e-5)?;
        let inv = tape.powf(var, -0.5)?;
        let inv = tape.broadcast_cols(inv, width)?;
        let normed = tape.mul(centered, inv)?;
        let normed = tape.mul(normed, self.norm_gain)?;
        Ok(tape.add(normed, self.norm_bias)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(cell: CellKind, out: usize) -> BlackBoxConfig {
        BlackBoxConfig {
            input_dim: 3,
            encoder_width: 4,
            recurrent_width: 5,
            recurrent_layers: 2,
            decoder_width: 4,
            output_dim: out,
            cell,
            output_scale: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let mut p1 = ParamSet::new();
        let mut p2 = ParamSet::new();
        BlackBoxNet::init(&mut p1, "", &small(CellKind::Gru, 1)).unwrap();
        BlackBoxNet::init(&mut p2, "", &small(CellKind::Gru, 1)).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn output_shape_and_finite_at_zero() {
        for cell in [CellKind::Gru, CellKind::Lstm] {
            let mut p = ParamSet::new();
            let net = BlackBoxNet::init(&mut p, "", &small(cell, 3)).unwrap();
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let bn = net.bind(&mut tape, &bound, 2).unwrap();
            let mut state = bn.initial_state(&mut tape);
            let x = tape.zeros(2, 3);
            let y = bn.step(&mut tape, x, &mut state).unwrap();
            assert_eq!(y.shape(), (2, 3));
            assert!(tape.value(y).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn step_is_pure() {
        let mut p = ParamSet::new();
        let net = BlackBoxNet::init(&mut p, "", &small(CellKind::Gru, 1)).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let bn = net.bind(&mut tape, &bound, 1).unwrap();
        let s0 = bn.initial_state(&mut tape);
        let x = tape.row(&[0.3, -1.0, 2.0]);
        let (mut a, mut b) = (s0.clone(), s0);
        let ya = bn.step(&mut tape, x, &mut a).unwrap();
        let yb = bn.step(&mut tape, x, &mut b).unwrap();
        assert_eq!(tape.value(ya), tape.value(yb));
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let mut p = ParamSet::new();
        let net = BlackBoxNet::init(&mut p, "", &small(CellKind::Gru, 1)).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let bn = net.bind(&mut tape, &bound, 1).unwrap();
        let mut s = bn.initial_state(&mut tape);
        let x = tape.row(&[0.3, -1.0]);
        assert!(bn.step(&mut tape, x, &mut s).is_err());
    }

    #[test]
    fn zeroed_output_layer_gives_zero() {
        let mut p = ParamSet::new();
        let net = BlackBoxNet::init(&mut p, "", &small(CellKind::Gru, 2)).unwrap();
        net.zero_output(&mut p);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let bn = net.bind(&mut tape, &bound, 1).unwrap();
        let mut s = bn.initial_state(&mut tape);
        let x = tape.row(&[1.0, 2.0, 3.0]);
        let y = bn.step(&mut tape, x, &mut s).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn recurrent_count_grows_quadratically() {
        let count = |h: usize| {
            let mut p = ParamSet::new();
            let cfg = BlackBoxConfig { recurrent_width: h, recurrent_layers: 1, ..BlackBoxConfig::default() };
            let net = BlackBoxNet::init(&mut p, "", &cfg).unwrap();
            let ids = &net.ids.cells[0];
            p.get(ids.w_h).len()
        };
        assert_eq!(count(64), 4 * count(32));
    }

    #[test]
    fn standardizer_guards_constant_columns() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = Standardizer::fit(2, rows.iter().map(|r| r.as_slice()));
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
    }
}
