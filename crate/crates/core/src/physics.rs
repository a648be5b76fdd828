//! Energy accumulator shared by every PCNN variant and by the linear
//! gray-box model.
//!
//! Each power, loss, and coupling coefficient `s` is stored as an
//! unconstrained value `s̃` with `s = s0 · exp(s̃)`. An optional bounded form
//! `s = s_max · sigmoid(s̃ + offset)` keeps `b + Σc < 1` for every draw; the
//! offset makes `s̃ = 0` map to `s0` in both forms.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::topology::BuildingTopology;

/// Base values `s0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scales {
    pub a_h: f64,
    pub a_c: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for Scales {
    fn default() -> Self {
        Scales { a_h: 1e-4, a_c: 1e-4, b: 5e-3, c: 5e-3 }
    }
}

impl Scales {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a_h", self.a_h), ("a_c", self.a_c), ("b", self.b), ("c", self.c)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("scale {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parametrization {
    #[default]
    Log,
    Bounded,
}

/// Upper bound for `b` and `c` under the bounded form.
pub fn bounded_max(max_degree: usize) -> f64 {
    0.999 / (1 + max_degree) as f64
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy)]
enum Transform {
    Log { s0: f64 },
    Bounded { s_max: f64, offset: f64 },
}

impl Transform {
    fn new(kind: Parametrization, s0: f64, s_max: f64) -> Result<Self> {
        match kind {
            Parametrization::Log => Ok(Transform::Log { s0 }),
            Parametrization::Bounded => {
                if s0 >= s_max {
                    return Err(Error::config(format!(
                        "bounded parametrization needs s0 < {s_max:.4}, got {s0}"
                    )));
                }
                Ok(Transform::Bounded { s_max, offset: logit(s0 / s_max) })
            }
        }
    }

    fn forward(&self, raw: f64) -> f64 {
        match *self {
            Transform::Log { s0 } => s0 * raw.exp(),
            Transform::Bounded { s_max, offset } => s_max * sigmoid(raw + offset),
        }
    }

    fn inverse(&self, value: f64) -> Result<f64> {
        if !(value > 0.0) {
            return Err(Error::input(format!("coefficient must be positive, got {value}")));
        }
        match *self {
            Transform::Log { s0 } => Ok((value / s0).ln()),
            Transform::Bounded { s_max, offset } => {
                if value >= s_max {
                    return Err(Error::input(format!("coefficient {value} exceeds bound {s_max}")));
                }
                Ok(logit(value / s_max) - offset)
            }
        }
    }

    fn on_tape(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        Ok(match *self {
            Transform::Log { s0 } => {
                let e = tape.exp(raw)?;
                tape.scale(e, s0)?
            }
            Transform::Bounded { s_max, offset } => {
                let shifted = tape.affine(raw, 1.0, offset)?;
                let s = tape.sigmoid(shifted)?;
                tape.scale(s, s_max)?
            }
        })
    }
}

/// Coupling log-scales: one per unordered pair, or one per direction
/// (aligned with [`BuildingTopology::directed_edges`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Coupling {
    Symmetric(Vec<f64>),
    Directed(Vec<f64>),
}

/// Raw (log-scale) physics parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub scales: Scales,
    pub parametrization: Parametrization,
    pub a_h: Vec<f64>,
    pub a_c: Vec<f64>,
    pub b: Vec<f64>,
    pub coupling: Coupling,
}

/// Positive coefficients, `c` listed per directed edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveParams {
    pub a_h: Vec<f64>,
    pub a_c: Vec<f64>,
    pub b: Vec<f64>,
    pub c_dir: Vec<f64>,
}

struct Transforms {
    a_h: Transform,
    a_c: Transform,
    b: Transform,
    c: Transform,
}

fn transforms(scales: &Scales, kind: Parametrization, topo: &BuildingTopology) -> Result<Transforms> {
    scales.validate()?;
    let s_max = bounded_max(topo.max_degree());
    Ok(Transforms {
        a_h: Transform::new(Parametrization::Log, scales.a_h, 0.0)?,
        a_c: Transform::new(Parametrization::Log, scales.a_c, 0.0)?,
        b: Transform::new(kind, scales.b, s_max)?,
        c: Transform::new(kind, scales.c, s_max)?,
    })
}

/// Index of the unordered pair for each directed edge.
fn pair_of_edges(topo: &BuildingTopology) -> Vec<usize> {
    topo.directed_edges()
        .iter()
        .map(|&(z, y)| {
            let key = (z.min(y), z.max(y));
            topo.pairs().iter().position(|p| *p == key).expect("edge from pair")
        })
        .collect()
}

impl PhysicsParams {
    /// All raw values zero, i.e. every coefficient at its base value.
    pub fn initial(topo: &BuildingTopology, scales: Scales, parametrization: Parametrization, directed: bool) -> Self {
        let m = topo.zone_count();
        let coupling = if directed {
            Coupling::Directed(vec![0.0; 2 * topo.pairs().len()])
        } else {
            Coupling::Symmetric(vec![0.0; topo.pairs().len()])
        };
        PhysicsParams {
            scales,
            parametrization,
            a_h: vec![0.0; m],
            a_c: vec![0.0; m],
            b: vec![0.0; m],
            coupling,
        }
    }

    pub fn effective(&self, topo: &BuildingTopology) -> Result<EffectiveParams> {
        let m = topo.zone_count();
        if self.a_h.len() != m || self.a_c.len() != m || self.b.len() != m {
            return Err(Error::input("physics parameter length does not match zone count"));
        }
        let t = transforms(&self.scales, self.parametrization, topo)?;
        let c_dir = match &self.coupling {
            Coupling::Symmetric(c) => {
                if c.len() != topo.pairs().len() {
                    return Err(Error::input("coupling length does not match pair count"));
                }
                pair_of_edges(topo).iter().map(|&p| t.c.forward(c[p])).collect()
            }
            Coupling::Directed(c) => {
                if c.len() != 2 * topo.pairs().len() {
                    return Err(Error::input("coupling length does not match directed edge count"));
                }
                c.iter().map(|&v| t.c.forward(v)).collect()
            }
        };
        Ok(EffectiveParams {
            a_h: self.a_h.iter().map(|&v| t.a_h.forward(v)).collect(),
            a_c: self.a_c.iter().map(|&v| t.a_c.forward(v)).collect(),
            b: self.b.iter().map(|&v| t.b.forward(v)).collect(),
            c_dir,
        })
    }

    /// Raw values reproducing `eff`. Symmetric storage requires symmetric
    /// `eff`.
    pub fn from_effective(
        eff: &EffectiveParams,
        topo: &BuildingTopology,
        scales: Scales,
        parametrization: Parametrization,
        directed: bool,
    ) -> Result<Self> {
        let t = transforms(&scales, parametrization, topo)?;
        let inv = |tr: &Transform, v: &[f64]| v.iter().map(|&x| tr.inverse(x)).collect::<Result<Vec<_>>>();
        let coupling = if directed {
            Coupling::Directed(inv(&t.c, &eff.c_dir)?)
        } else {
            if !eff.is_symmetric(topo) {
                return Err(Error::input("symmetric storage requires c^{zy} = c^{yz}"));
            }
            let pe = pair_of_edges(topo);
            let mut per_pair = vec![0.0; topo.pairs().len()];
            for (e, &p) in pe.iter().enumerate() {
                per_pair[p] = eff.c_dir[e];
            }
            Coupling::Symmetric(inv(&t.c, &per_pair)?)
        };
        Ok(PhysicsParams {
            scales,
            parametrization,
            a_h: inv(&t.a_h, &eff.a_h)?,
            a_c: inv(&t.a_c, &eff.a_c)?,
            b: inv(&t.b, &eff.b)?,
            coupling,
        })
    }
}

impl EffectiveParams {
    /// Same value for every zone or pair.
    pub fn uniform(topo: &BuildingTopology, a_h: f64, a_c: f64, b: f64, c: f64) -> Self {
        let m = topo.zone_count();
        EffectiveParams {
            a_h: vec![a_h; m],
            a_c: vec![a_c; m],
            b: vec![b; m],
            c_dir: vec![c; 2 * topo.pairs().len()],
        }
    }

    /// Builds from per-pair symmetric couplings.
    pub fn with_pair_couplings(topo: &BuildingTopology, a_h: Vec<f64>, a_c: Vec<f64>, b: Vec<f64>, c_pairs: &[f64]) -> Self {
        let c_dir = pair_of_edges(topo).iter().map(|&p| c_pairs[p]).collect();
        EffectiveParams { a_h, a_c, b, c_dir }
    }

    /// `c^{zy}`, zero when not adjacent.
    pub fn c(&self, topo: &BuildingTopology, z: usize, y: usize) -> f64 {
        topo.directed_edges()
            .iter()
            .position(|&e| e == (z, y))
            .map(|e| self.c_dir[e])
            .unwrap_or(0.0)
    }

    /// Per-pair values, averaging the two directions.
    pub fn pair_couplings(&self, topo: &BuildingTopology) -> Vec<f64> {
        topo.pairs().iter().map(|&(a, b)| 0.5 * (self.c(topo, a, b) + self.c(topo, b, a))).collect()
    }

    pub fn is_symmetric(&self, topo: &BuildingTopology) -> bool {
        topo.pairs().iter().all(|&(a, b)| self.c(topo, a, b) == self.c(topo, b, a))
    }

    /// Both directions of each pair replaced by their arithmetic mean.
    pub fn merged(&self, topo: &BuildingTopology) -> Self {
        let per_pair = self.pair_couplings(topo);
        let c_dir = pair_of_edges(topo).iter().map(|&p| per_pair[p]).collect();
        EffectiveParams { c_dir, ..self.clone() }
    }

    fn check(&self, topo: &BuildingTopology) -> Result<()> {
        let m = topo.zone_count();
        if self.a_h.len() != m || self.a_c.len() != m || self.b.len() != m || self.c_dir.len() != 2 * topo.pairs().len() {
            return Err(Error::input("effective parameter lengths do not match topology"));
        }
        Ok(())
    }

    pub fn all_positive(&self) -> bool {
        [&self.a_h, &self.a_c, &self.b, &self.c_dir]
            .iter()
            .all(|v| v.iter().all(|x| *x > 0.0 && x.is_finite()))
    }
}

/// Accumulated temperature effect per zone.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyState(pub Vec<f64>);

impl EnergyState {
    pub fn zeros(m: usize) -> Self {
        EnergyState(vec![0.0; m])
    }
}

fn check_len(name: &str, v: &[f64], m: usize) -> Result<()> {
    if v.len() != m {
        return Err(Error::input(format!("{name}: expected length {m}, got {}", v.len())));
    }
    Ok(())
}

/// `ΔT[z] = Σ_{y adjacent} c^{zy} (T[z] − T[y])`.
pub fn delta_t(temps: &[f64], eff: &EffectiveParams, topo: &BuildingTopology) -> Result<Vec<f64>> {
    let m = topo.zone_count();
    check_len("temperatures", temps, m)?;
    eff.check(topo)?;
    let mut out = vec![0.0; m];
    for (e, &(z, y)) in topo.directed_edges().iter().enumerate() {
        out[z] += eff.c_dir[e] * (temps[z] - temps[y]);
    }
    Ok(out)
}

/// One step of the energy accumulator.
pub fn energy_step(
    energy: &EnergyState,
    temps: &[f64],
    t_out: f64,
    power: &[f64],
    eff: &EffectiveParams,
    topo: &BuildingTopology,
) -> Result<EnergyState> {
    let m = topo.zone_count();
    check_len("energy", &energy.0, m)?;
    check_len("power", power, m)?;
    let dt = delta_t(temps, eff, topo)?;
    let next = (0..m)
        .map(|z| {
            let loss = if topo.has_external_wall(z) { eff.b[z] * (temps[z] - t_out) } else { 0.0 };
            energy.0[z] + eff.a_h[z] * power[z].max(0.0) + eff.a_c[z] * power[z].min(0.0) - loss - dt[z]
        })
        .collect();
    Ok(EnergyState(next))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZoneMargin {
    pub zone: usize,
    /// `b^z + Σ_y c^{zy}`; must stay below 1.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub zones: Vec<ZoneMargin>,
    pub positive: bool,
}

impl ConsistencyReport {
    pub fn pass(&self) -> bool {
        self.positive && self.zones.iter().all(|z| z.pass)
    }
}

pub fn check_consistency_conditions(eff: &EffectiveParams, topo: &BuildingTopology) -> Result<ConsistencyReport> {
    eff.check(topo)?;
    let mut sums = vec![0.0; topo.zone_count()];
    for (e, &(z, _)) in topo.directed_edges().iter().enumerate() {
        sums[z] += eff.c_dir[e];
    }
    let zones = (0..topo.zone_count())
        .map(|z| {
            let b = if topo.has_external_wall(z) { eff.b[z] } else { 0.0 };
            let margin = b + sums[z];
            ZoneMargin { zone: z, margin, pass: margin < 1.0 }
        })
        .collect();
    Ok(ConsistencyReport { zones, positive: eff.all_positive() })
}

/// Raw-parameter storage inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PhysicsLayout {
    /// One `1 × m` tensor per quantity and one `1 × pairs` coupling tensor.
    Shared { a_h: ParamId, a_c: ParamId, b: ParamId, c: Option<ParamId> },
    /// Separate `1 × 1` tensors per zone and `1 × degree` outgoing couplings.
    PerZone(Vec<ZoneIds>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneIds {
    pub a_h: ParamId,
    pub a_c: ParamId,
    pub b: ParamId,
    pub c: Option<ParamId>,
}

/// Effective coefficients on a tape. `b` already carries the
/// external-wall mask.
#[derive(Debug, Clone, Copy)]
pub struct TapePhysics {
    pub a_h: Var,
    pub a_c: Var,
    pub b: Var,
    pub c_dir: Option<Var>,
}

/// Per-rollout operands broadcast to the batch.
#[derive(Debug, Clone, Copy)]
pub struct StepOperands {
    pub a_h: Var,
    pub a_c: Var,
    pub b: Var,
    pub degree: Var,
    /// `m × m` with entry `(z, y) = c^{zy}`.
    pub coupling: Option<Var>,
    pub zones: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsModule {
    topology: BuildingTopology,
    scales: Scales,
    parametrization: Parametrization,
    layout: PhysicsLayout,
}

impl PhysicsModule {
    fn register(
        params: &mut ParamSet,
        prefix: &str,
        topo: &BuildingTopology,
        scales: Scales,
        parametrization: Parametrization,
        per_zone: bool,
    ) -> Result<Self> {
        transforms(&scales, parametrization, topo)?;
        let m = topo.zone_count();
        let layout = if per_zone {
            PhysicsLayout::PerZone(
                (0..m)
                    .map(|z| {
                        let deg = topo.degree(z);
                        ZoneIds {
                            a_h: params.add(format!("{prefix}z{z}.a_h"), Array2::zeros((1, 1))),
                            a_c: params.add(format!("{prefix}z{z}.a_c"), Array2::zeros((1, 1))),
                            b: params.add(format!("{prefix}z{z}.b"), Array2::zeros((1, 1))),
                            c: (deg > 0).then(|| params.add(format!("{prefix}z{z}.c"), Array2::zeros((1, deg)))),
                        }
                    })
                    .collect(),
            )
        } else {
            let np = topo.pairs().len();
            PhysicsLayout::Shared {
                a_h: params.add(format!("{prefix}a_h"), Array2::zeros((1, m))),
                a_c: params.add(format!("{prefix}a_c"), Array2::zeros((1, m))),
                b: params.add(format!("{prefix}b"), Array2::zeros((1, m))),
                c: (np > 0).then(|| params.add(format!("{prefix}c"), Array2::zeros((1, np)))),
            }
        };
        Ok(PhysicsModule { topology: topo.clone(), scales, parametrization, layout })
    }

    /// Shared coefficients with symmetric coupling storage.
    pub fn shared(
        params: &mut ParamSet,
        prefix: &str,
        topo: &BuildingTopology,
        scales: Scales,
        parametrization: Parametrization,
    ) -> Result<Self> {
        Self::register(params, prefix, topo, scales, parametrization, false)
    }

    /// Per-zone coefficients with one coupling per direction.
    pub fn per_zone(
        params: &mut ParamSet,
        prefix: &str,
        topo: &BuildingTopology,
        scales: Scales,
        parametrization: Parametrization,
    ) -> Result<Self> {
        Self::register(params, prefix, topo, scales, parametrization, true)
    }

    pub fn topology(&self) -> &BuildingTopology {
        &self.topology
    }

    pub fn scales(&self) -> Scales {
        self.scales
    }

    pub fn parametrization(&self) -> Parametrization {
        self.parametrization
    }

    pub fn layout(&self) -> &PhysicsLayout {
        &self.layout
    }

    pub fn is_directed(&self) -> bool {
        matches!(self.layout, PhysicsLayout::PerZone(_))
    }

    /// Parameters owned by zone `z` (per-zone layout only).
    pub fn zone_params(&self, z: usize) -> Vec<ParamId> {
        match &self.layout {
            PhysicsLayout::PerZone(zones) => {
                let ids = &zones[z];
                let mut out = vec![ids.a_h, ids.a_c, ids.b];
                out.extend(ids.c);
                out
            }
            PhysicsLayout::Shared { .. } => Vec::new(),
        }
    }

    pub fn read(&self, params: &ParamSet) -> PhysicsParams {
        let row = |id: ParamId| params.get(id).iter().copied().collect::<Vec<f64>>();
        match &self.layout {
            PhysicsLayout::Shared { a_h, a_c, b, c } => PhysicsParams {
                scales: self.scales,
                parametrization: self.parametrization,
                a_h: row(*a_h),
                a_c: row(*a_c),
                b: row(*b),
                coupling: Coupling::Symmetric(c.map(row).unwrap_or_default()),
            },
            PhysicsLayout::PerZone(zones) => {
                let mut out = PhysicsParams::initial(&self.topology, self.scales, self.parametrization, true);
                let mut c_dir = Vec::new();
                for (z, ids) in zones.iter().enumerate() {
                    out.a_h[z] = params.get(ids.a_h)[[0, 0]];
                    out.a_c[z] = params.get(ids.a_c)[[0, 0]];
                    out.b[z] = params.get(ids.b)[[0, 0]];
                    if let Some(c) = ids.c {
                        c_dir.extend(row(c));
                    }
                }
                out.coupling = Coupling::Directed(c_dir);
                out
            }
        }
    }

    pub fn effective(&self, params: &ParamSet) -> Result<EffectiveParams> {
        self.read(params).effective(&self.topology)
    }

    /// Stores the raw values that reproduce `eff`.
    pub fn write_effective(&self, params: &mut ParamSet, eff: &EffectiveParams) -> Result<()> {
        let raw = PhysicsParams::from_effective(eff, &self.topology, self.scales, self.parametrization, self.is_directed())?;
        let to_row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
        match (&self.layout, &raw.coupling) {
            (PhysicsLayout::Shared { a_h, a_c, b, c }, Coupling::Symmetric(cv)) => {
                *params.get_mut(*a_h) = to_row(&raw.a_h);
                *params.get_mut(*a_c) = to_row(&raw.a_c);
                *params.get_mut(*b) = to_row(&raw.b);
                if let Some(c) = c {
                    *params.get_mut(*c) = to_row(cv);
                }
            }
            (PhysicsLayout::PerZone(zones), Coupling::Directed(cv)) => {
                let mut offset = 0;
                for (z, ids) in zones.iter().enumerate() {
                    params.get_mut(ids.a_h)[[0, 0]] = raw.a_h[z];
                    params.get_mut(ids.a_c)[[0, 0]] = raw.a_c[z];
                    params.get_mut(ids.b)[[0, 0]] = raw.b[z];
                    if let Some(c) = ids.c {
                        let deg = self.topology.degree(z);
                        *params.get_mut(c) = to_row(&cv[offset..offset + deg]);
                        offset += deg;
                    }
                }
            }
            _ => unreachable!("layout and coupling kind agree"),
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, bound: &Bound) -> Result<TapePhysics> {
        let t = transforms(&self.scales, self.parametrization, &self.topology)?;
        let (a_h_raw, a_c_raw, b_raw, c_raw) = match &self.layout {
            PhysicsLayout::Shared { a_h, a_c, b, c } => {
                (bound.var(*a_h), bound.var(*a_c), bound.var(*b), c.map(|c| bound.var(c)))
            }
            PhysicsLayout::PerZone(zones) => {
                let gather = |tape: &mut Tape, f: &dyn Fn(&ZoneIds) -> ParamId| -> Result<Var> {
                    let parts: Vec<Var> = zones.iter().map(|z| bound.var(f(z))).collect();
                    Ok(tape.concat(&parts)?)
                };
                let a_h = gather(tape, &|z| z.a_h)?;
                let a_c = gather(tape, &|z| z.a_c)?;
                let b = gather(tape, &|z| z.b)?;
                let cs: Vec<Var> = zones.iter().filter_map(|z| z.c.map(|c| bound.var(c))).collect();
                let c = if cs.is_empty() { None } else { Some(tape.concat(&cs)?) };
                (a_h, a_c, b, c)
            }
        };
        let a_h = t.a_h.on_tape(tape, a_h_raw)?;
        let a_c = t.a_c.on_tape(tape, a_c_raw)?;
        let b_eff = t.b.on_tape(tape, b_raw)?;
        let mask: Vec<f64> = self.topology.external_wall().iter().map(|&w| if w { 1.0 } else { 0.0 }).collect();
        let b = if mask.iter().all(|&w| w == 1.0) {
            b_eff
        } else {
            let mv = tape.row(&mask);
            tape.mul(b_eff, mv)?
        };
        let c_dir = match c_raw {
            None => None,
            Some(raw) => {
                let c = t.c.on_tape(tape, raw)?;
                Some(if self.is_directed() {
                    c
                } else {
                    let g = tape.leaf(pair_gather(&self.topology));
                    tape.matmul(c, g)?
                })
            }
        };
        Ok(TapePhysics { a_h, a_c, b, c_dir })
    }

    pub fn operands(&self, tape: &mut Tape, phys: &TapePhysics, rows: usize) -> Result<StepOperands> {
        step_operands(tape, &self.topology, phys, rows)
    }
}

/// `pairs × directed-edges` 0/1 matrix mapping pair values onto edges.
fn pair_gather(topo: &BuildingTopology) -> Array2<f64> {
    let pe = pair_of_edges(topo);
    let mut g = Array2::zeros((topo.pairs().len(), pe.len()));
    for (e, &p) in pe.iter().enumerate() {
        g[[p, e]] = 1.0;
    }
    g
}

/// Broadcasts coefficients and builds the coupling matrix for a batch of
/// `rows` sequences.
pub fn step_operands(tape: &mut Tape, topo: &BuildingTopology, phys: &TapePhysics, rows: usize) -> Result<StepOperands> {
    let m = topo.zone_count();
    let a_h = tape.broadcast_rows(phys.a_h, rows)?;
    let a_c = tape.broadcast_rows(phys.a_c, rows)?;
    let b = tape.broadcast_rows(phys.b, rows)?;
    let (degree, coupling) = match phys.c_dir {
        None => (tape.zeros(rows, m), None),
        Some(c_dir) => {
            let edges = topo.directed_edges();
            let mut src = Array2::zeros((edges.len(), m));
            let mut dst = Array2::zeros((edges.len(), m));
            for (e, &(z, y)) in edges.iter().enumerate() {
                src[[e, z]] = 1.0;
                dst[[e, y]] = 1.0;
            }
            let src = tape.leaf(src);
            let dst = tape.leaf(dst);
            let deg = tape.matmul(c_dir, src)?;
            let degree = tape.broadcast_rows(deg, rows)?;
            let c_col = tape.transpose(c_dir)?;
            let c_wide = tape.broadcast_cols(c_col, m)?;
            let weighted = tape.mul(c_wide, dst)?;
            let coupling = tape.matmul_t(src, weighted, true, false)?;
            (degree, Some(coupling))
        }
    };
    Ok(StepOperands { a_h, a_c, b, degree, coupling, zones: m })
}

/// `ΔT` on a tape for a batch. `t_self` supplies each zone's own
/// temperature and `t_neighbors` the temperatures seen across each wall.
pub fn tape_delta_t(tape: &mut Tape, ops: &StepOperands, t_self: Var, t_neighbors: Var) -> Result<Option<Var>> {
    let Some(coupling) = ops.coupling else { return Ok(None) };
    let own = tape.mul(t_self, ops.degree)?;
    let inflow = tape.matmul_t(t_neighbors, coupling, false, true)?;
    Ok(Some(tape.sub(own, inflow)?))
}

/// One accumulator step on a tape. `t_out` is `rows × 1`.
pub fn tape_energy_step(
    tape: &mut Tape,
    ops: &StepOperands,
    energy: Var,
    t_self: Var,
    t_neighbors: Var,
    t_out: Var,
    power: Var,
) -> Result<Var> {
    let heat = tape.relu(power)?;
    let heat = tape.mul(ops.a_h, heat)?;
    let cool = tape.neg_relu(power)?;
    let cool = tape.mul(ops.a_c, cool)?;
    let ambient = tape.broadcast_cols(t_out, ops.zones)?;
    let gap = tape.sub(t_self, ambient)?;
    let loss = tape.mul(ops.b, gap)?;
    let mut next = tape.add(energy, heat)?;
    next = tape.add(next, cool)?;
    next = tape.sub(next, loss)?;
    if let Some(dt) = tape_delta_t(tape, ops, t_self, t_neighbors)? {
        next = tape.sub(next, dt)?;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain3() -> BuildingTopology {
        BuildingTopology::chain(3).unwrap()
    }

    #[test]
    fn zero_raw_gives_base_values() {
        let topo = chain3();
        let p = PhysicsParams::initial(&topo, Scales::default(), Parametrization::Log, false);
        let eff = p.effective(&topo).unwrap();
        assert_eq!(eff.a_h, vec![1e-4; 3]);
        assert_eq!(eff.b, vec![5e-3; 3]);
        assert_eq!(eff.c_dir, vec![5e-3; 4]);
        let pb = PhysicsParams { parametrization: Parametrization::Bounded, ..p };
        let eb = pb.effective(&topo).unwrap();
        assert!((eb.b[0] - 5e-3).abs() < 1e-15 && (eb.c_dir[0] - 5e-3).abs() < 1e-15);
    }

    #[test]
    fn log_two_doubles_value() {
        let topo = BuildingTopology::chain(1).unwrap();
        let scales = Scales { b: 0.01, ..Scales::default() };
        let mut p = PhysicsParams::initial(&topo, scales, Parametrization::Log, false);
        p.b[0] = 2f64.ln();
        assert!((p.effective(&topo).unwrap().b[0] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn delta_t_two_zones() {
        let topo = BuildingTopology::chain(2).unwrap();
        let eff = EffectiveParams::uniform(&topo, 1e-4, 1e-4, 0.0, 0.1);
        let dt = delta_t(&[22.0, 20.0], &eff, &topo).unwrap();
        assert!((dt[0] - 0.2).abs() < 1e-12 && (dt[1] + 0.2).abs() < 1e-12);
        assert_eq!(delta_t(&[21.0, 21.0], &eff, &topo).unwrap(), vec![0.0, 0.0]);
        assert!(delta_t(&[21.0], &eff, &topo).is_err());
    }

    #[test]
    fn energy_step_examples() {
        let topo = BuildingTopology::chain(1).unwrap();
        let eff = EffectiveParams { a_h: vec![1e-4], a_c: vec![2e-4], b: vec![5e-3], c_dir: vec![] };
        let e = EnergyState::zeros(1);
        let heat = energy_step(&e, &[20.0], 20.0, &[1000.0], &eff, &topo).unwrap();
        assert!((heat.0[0] - 0.1).abs() < 1e-15);
        let cool = energy_step(&e, &[20.0], 20.0, &[-1000.0], &eff, &topo).unwrap();
        assert!((cool.0[0] + 0.2).abs() < 1e-15);
        let idle = energy_step(&EnergyState(vec![0.7]), &[20.0], 20.0, &[0.0], &eff, &topo).unwrap();
        assert_eq!(idle.0, vec![0.7]);
    }

    #[test]
    fn consistency_margins() {
        let topo = chain3();
        let eff = EffectiveParams::uniform(&topo, 1e-4, 1e-4, 0.01, 0.02);
        let r = check_consistency_conditions(&eff, &topo).unwrap();
        assert!((r.zones[1].margin - 0.05).abs() < 1e-15 && r.pass());
        let bad = EffectiveParams::uniform(&topo, 1e-4, 1e-4, 0.6, 0.25);
        assert!(!check_consistency_conditions(&bad, &topo).unwrap().pass());
        let init = PhysicsParams::initial(&topo, Scales::default(), Parametrization::Log, false);
        let r = check_consistency_conditions(&init.effective(&topo).unwrap(), &topo).unwrap();
        assert!(r.pass() && (r.zones[1].margin - 0.015).abs() < 1e-15);
    }

    #[test]
    fn merge_averages_directions() {
        let topo = BuildingTopology::chain(2).unwrap();
        let eff = EffectiveParams { a_h: vec![1e-4; 2], a_c: vec![1e-4; 2], b: vec![1e-3; 2], c_dir: vec![0.02, 0.04] };
        let merged = eff.merged(&topo);
        assert!((merged.c_dir[0] - 0.03).abs() < 1e-15 && merged.is_symmetric(&topo));
        let dt = delta_t(&[23.0, 19.0], &merged, &topo).unwrap();
        assert!((dt[0] + dt[1]).abs() < 1e-15);
    }

    #[test]
    fn raw_round_trip_through_effective() {
        let topo = chain3();
        let eff = EffectiveParams::with_pair_couplings(&topo, vec![1e-4, 2e-4, 3e-4], vec![5e-5; 3], vec![4e-3; 3], &[0.01, 0.03]);
        for kind in [Parametrization::Log, Parametrization::Bounded] {
            let raw = PhysicsParams::from_effective(&eff, &topo, Scales::default(), kind, false).unwrap();
            let back = raw.effective(&topo).unwrap();
            for (x, y) in back.c_dir.iter().zip(&eff.c_dir) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn tape_step_matches_value_step() {
        let topo = chain3();
        let mut params = ParamSet::new();
        let module = PhysicsModule::shared(&mut params, "", &topo, Scales::default(), Parametrization::Log).unwrap();
        let eff = EffectiveParams::with_pair_couplings(&topo, vec![1e-4, 2e-4, 3e-4], vec![5e-5; 3], vec![4e-3; 3], &[0.01, 0.03]);
        module.write_effective(&mut params, &eff).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let phys = module.bind(&mut tape, &bound).unwrap();
        let ops = module.operands(&mut tape, &phys, 1).unwrap();
        let e = tape.row(&[0.1, 0.0, -0.2]);
        let t = tape.row(&[21.0, 19.5, 23.0]);
        let tout = tape.row(&[5.0]);
        let u = tape.row(&[500.0, -300.0, 0.0]);
        let next = tape_energy_step(&mut tape, &ops, e, t, t, tout, u).unwrap();
        let want = energy_step(&EnergyState(vec![0.1, 0.0, -0.2]), &[21.0, 19.5, 23.0], 5.0, &[500.0, -300.0, 0.0], &module.effective(&params).unwrap(), &topo).unwrap();
        for z in 0..3 {
            assert!((tape.value(next)[[0, z]] - want.0[z]).abs() < 1e-14);
        }
    }
}
