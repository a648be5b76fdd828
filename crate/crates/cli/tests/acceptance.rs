//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcnn::autodiff::{Tape, Var};
use pcnn::baselines::arx::{arx_fit, ArxConfig};
use pcnn::baselines::linear::{fit_linear, LinearFitConfig, LinearModel};
use pcnn::baselines::recurrent::{physics_penalty, RecurrentBaseline};
use pcnn::baselines::residual::{ResidualConfig, ResidualModel};
use pcnn::blackbox::BlackBoxConfig;
use pcnn::dataset::{build_sequences, Dataset, FeatureSchema, SeriesBatch, Window, WARM_START};
use pcnn::io::checkpoint::{save_checkpoint, CheckpointMeta};
use pcnn::io::data::save_dataset;
use pcnn::io::report::{coefficient_recovery, evaluate, verify, Split, VerifyOptions};
use pcnn::model::{AnyModel, ModelKind, RolloutOptions, TapeRollout, Trace};
use pcnn::pcnn::{PcnnConfig, PcnnModel, Variant};
use pcnn::physics::{check_consistency_conditions, EffectiveParams, Scales};
use pcnn::simulator::{simulate, Controller, PlantConfig, PlantMode, PlantTruth};
use pcnn::topology::BuildingTopology;
use pcnn::training::{fit_model, init_model, loss_and_gradients, pinn_loss, tape_mse, ModelConfig, TrainingConfig};
use pcnn::verifier::{
    check_heat_propagation, check_input_consistency, finite_difference_gradient, gradients, InputCoordinate,
    InputKind, OutputSteps, MIN_POWER, POSITIVE_TOL,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: Vec<(&str, Box<dyn Fn(&mut Shared) -> Outcome>)> = vec![
        ("1 autodiff oracle", Box::new(|_| criterion_1())),
        ("2 heat propagation pattern", Box::new(|_| criterion_2())),
        ("3 input gradient pattern", Box::new(|_| criterion_3())),
        ("4 variant equivalence", Box::new(|_| criterion_4())),
        ("5 linear recovery", Box::new(|_| criterion_5())),
        ("6 relative accuracy", Box::new(criterion_6)),
        ("7 consistency separation", Box::new(criterion_7)),
        ("8 heat counterfactual", Box::new(criterion_8)),
        ("9 physics-informed penalty", Box::new(|_| criterion_9())),
        ("10 determinism", Box::new(|_| criterion_10())),
    ];
    // Optional numeric arguments select a subset of criteria.
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.parse::<u32>().is_ok()).collect();
    let criteria: Vec<_> =
        criteria.into_iter().filter(|(name, _)| only.is_empty() || only.iter().any(|o| name.split(' ').next() == Some(o))).collect();
    let mut shared = Shared::default();
    let mut failed = 0;
    for (name, run) in &criteria {
        let t = Instant::now();
        let o = run(&mut shared);
        let secs = t.elapsed().as_secs_f64();
        println!("criterion {name}: {} ({secs:.1} s) {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

fn chain3() -> BuildingTopology {
    BuildingTopology::chain(3).unwrap()
}

fn short_dataset(days: usize, seed: u64) -> Dataset {
    simulate(&PlantConfig::default_chain(), &Controller::default(), days, seed).unwrap()
}

fn equal_length(windows: &[Window], len: usize, n: usize) -> Vec<Window> {
    windows.iter().copied().filter(|w| w.len == len).take(n).collect()
}

/// Random connected topology: a random spanning tree plus extra edges.
fn random_topology(rng: &mut ChaCha8Rng) -> BuildingTopology {
    let m = rng.gen_range(1..=6);
    let mut pairs = Vec::new();
    for z in 1..m {
        pairs.push((rng.gen_range(0..z), z));
    }
    for a in 0..m {
        for b in a + 1..m {
            if rng.gen_bool(0.2) {
                pairs.push((a, b));
            }
        }
    }
    let mut walls: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.6)).collect();
    walls[rng.gen_range(0..m)] = true;
    let topo = BuildingTopology::new(m, &pairs, walls).unwrap();
    topo.assert_connected().unwrap();
    topo
}

/// Coefficients satisfying positivity and `b + Σc < 1` per zone.
fn random_coefficients(rng: &mut ChaCha8Rng, topo: &BuildingTopology) -> EffectiveParams {
    let m = topo.zone_count();
    loop {
        let a_h = (0..m).map(|_| 10f64.powf(rng.gen_range(-5.0..-3.0))).collect();
        let a_c = (0..m).map(|_| 10f64.powf(rng.gen_range(-5.0..-3.0))).collect();
        let b = (0..m).map(|_| rng.gen_range(0.001..0.15)).collect();
        let c: Vec<f64> = topo.pairs().iter().map(|_| rng.gen_range(0.001..0.2)).collect();
        let eff = EffectiveParams::with_pair_couplings(topo, a_h, a_c, b, &c);
        if check_consistency_conditions(&eff, topo).unwrap().pass() {
            return eff;
        }
    }
}

fn physics_only(topo: &BuildingTopology, variant: Variant, eff: &EffectiveParams) -> AnyModel {
    let cfg = PcnnConfig { physics_only: true, ..PcnnConfig::new(variant) };
    let mut p = PcnnModel::new(topo, &FeatureSchema::standard(), &cfg).unwrap();
    p.set_effective_physics(eff).unwrap();
    AnyModel::Pcnn(p)
}

/// Random batch of `rows` series; powers are drawn away from zero.
fn random_batch(rng: &mut ChaCha8Rng, m: usize, rows: usize, len: usize) -> SeriesBatch {
    let mat = |rng: &mut ChaCha8Rng, cols: usize, f: &dyn Fn(&mut ChaCha8Rng) -> f64| {
        Array2::from_shape_fn((rows, cols), |_| f(rng))
    };
    let power = |r: &mut ChaCha8Rng| {
        let mag = r.gen_range(50.0..1500.0);
        if r.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    };
    SeriesBatch {
        len,
        rows,
        zones: m,
        warm_start: WARM_START,
        temps: (0..len).map(|_| mat(rng, m, &|r| r.gen_range(15.0..25.0))).collect(),
        power: (0..len).map(|_| mat(rng, m, &power)).collect(),
        ambient: (0..len).map(|_| mat(rng, 1, &|r| r.gen_range(-5.0..15.0))).collect(),
        solar: (0..len).map(|_| mat(rng, 1, &|r| r.gen_range(0.0..400.0))).collect(),
        features: (0..len).map(|_| mat(rng, 6, &|r| r.gen_range(-1.0..1.0))).collect(),
        qwin: (0..len).map(|_| mat(rng, m, &|r| r.gen_range(0.0..400.0))).collect(),
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: reverse mode against central differences
// ---------------------------------------------------------------------------

fn rel_ok(g: f64, fd: f64, rel: f64, abs: f64) -> bool {
    let d = (g - fd).abs();
    d <= abs || d <= rel * g.abs().max(fd.abs())
}

/// Applies a random primitive to a random live node; returns the new node.
fn random_op(tape: &mut Tape, rng: &mut ChaCha8Rng, nodes: &[Var], leaves: &[Var]) -> Var {
    let a = nodes[rng.gen_range(0..nodes.len())];
    let same: Vec<Var> = nodes.iter().copied().filter(|v| v.shape() == a.shape()).collect();
    let b = same[rng.gen_range(0..same.len())];
    let big = tape.value(a).iter().any(|v| v.abs() > 4.0);
    if big {
        return tape.tanh(a).unwrap();
    }
    match rng.gen_range(0..15) {
        0 => tape.add(a, b).unwrap(),
        1 => tape.sub(a, b).unwrap(),
        2 => tape.mul(a, b).unwrap(),
        3 => tape.scale(a, rng.gen_range(-2.0..2.0)).unwrap(),
        4 => tape.tanh(a).unwrap(),
        5 => tape.sigmoid(a).unwrap(),
        6 => tape.exp(a).unwrap(),
        7 => tape.relu(a).unwrap(),
        8 => tape.neg_relu(a).unwrap(),
        9 => tape.square(a).unwrap(),
        10 => {
            let (r, c) = a.shape();
            let w = leaves.iter().copied().find(|l| l.shape() == (c, c));
            match w {
                Some(w) => tape.matmul(a, w).unwrap(),
                None => tape.matmul_t(a, a, false, true).map(|v| if v.shape() == (r, r) { v } else { a }).unwrap(),
            }
        }
        11 => {
            let other = nodes.iter().copied().find(|v| v.rows() == a.rows()).unwrap_or(a);
            let cat = tape.concat(&[a, other]).unwrap();
            tape.slice_cols(cat, rng.gen_range(0..=other.cols()), a.cols()).unwrap()
        }
        12 => {
            let s = tape.sum(a).unwrap();
            let (r, c) = a.shape();
            let bs = tape.broadcast_scalar(s, r, c).unwrap();
            tape.scale(bs, 0.3).unwrap()
        }
        13 => {
            let s = tape.mean(a).unwrap();
            let (r, c) = a.shape();
            tape.broadcast_scalar(s, r, c).unwrap()
        }
        _ => tape.neg(a).unwrap(),
    }
}

fn random_composition(seed: u64, values: Option<&[Array2<f64>]>) -> (Tape, Vec<Var>, Var, Vec<Array2<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(1..=3);
    let cols = rng.gen_range(1..=3);
    let init: Vec<Array2<f64>> = vec![
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.5..1.5)),
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.5..1.5)),
        Array2::from_shape_fn((cols, cols), |_| rng.gen_range(-1.0..1.0)),
    ];
    let vals = values.map(|v| v.to_vec()).unwrap_or_else(|| init.clone());
    let mut tape = Tape::new();
    let leaves: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
    let mut nodes = leaves.clone();
    let depth = rng.gen_range(1..=30);
    for _ in 0..depth {
        let n = random_op(&mut tape, &mut rng, &nodes, &leaves);
        nodes.push(n);
    }
    let last = *nodes.last().unwrap();
    let out = tape.sum(last).unwrap();
    (tape, leaves, out, init)
}

fn check_compositions(count: u64) -> (usize, usize, f64) {
    let h = 1e-6;
    let mut checked = 0;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..count {
        let (tape, leaves, out, init) = random_composition(seed, None);
        let grads = tape.backward(out).unwrap();
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.get(*leaf);
            for idx in 0..init[li].len() {
                let (r, c) = (idx / init[li].ncols(), idx % init[li].ncols());
                let eval = |delta: f64| {
                    let mut v = init.clone();
                    v[li][[r, c]] += delta;
                    let (t, _, o, _) = random_composition(seed, Some(&v));
                    t.scalar_value(o)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                checked += 1;
                let d = (g[[r, c]] - fd).abs();
                if d > 1e-8 {
                    worst = worst.max(d / g[[r, c]].abs().max(fd.abs()));
                }
                if !rel_ok(g[[r, c]], fd, 1e-5, 1e-8) {
                    failures += 1;
                }
            }
        }
    }
    (checked, failures, worst)
}

fn model_zoo(ds: &Dataset, windows: &[Window]) -> Vec<AnyModel> {
    let topo = chain3();
    let schema = FeatureSchema::standard();
    let mut models = Vec::new();
    for kind in [ModelKind::XPcnn, ModelKind::MPcnn, ModelKind::SPcnn, ModelKind::Blackbox, ModelKind::Pinn] {
        let mut m = init_model(kind, &topo, &schema, &ModelConfig::default(), 3).unwrap();
        m.fit_scalers(ds, windows).unwrap();
        models.push(m);
    }
    let mut bounded = init_model(
        ModelKind::MPcnn,
        &topo,
        &schema,
        &ModelConfig { parametrization: pcnn::physics::Parametrization::Bounded, ..Default::default() },
        4,
    )
    .unwrap();
    bounded.fit_scalers(ds, windows).unwrap();
    models.push(bounded);
    let base = LinearModel::initial(&topo, &Scales::default());
    models.push(AnyModel::Linear(base.clone()));
    for consistent in [true, false] {
        let mut r = AnyModel::Residual(
            ResidualModel::new(base.clone(), &schema, consistent, &ResidualConfig::default()).unwrap(),
        );
        r.fit_scalers(ds, windows).unwrap();
        models.push(r);
    }
    let arx = arx_fit(ds, windows, &topo, &ArxConfig { lags: 3, ..Default::default() }).unwrap();
    models.push(AnyModel::Arx(arx));
    models
}

/// Parameter gradients of the training loss and input gradients of the
/// final prediction, against central differences.
fn check_model_gradients(model: &AnyModel, batch: &SeriesBatch, rng: &mut ChaCha8Rng) -> (usize, usize, f64) {
    let mut checked = 0;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut record = |g: f64, fd: f64, abs: f64| {
        checked += 1;
        let d = (g - fd).abs();
        if d > abs {
            worst = worst.max(d / g.abs().max(fd.abs()));
        }
        if !rel_ok(g, fd, 1e-4, abs) {
            failures += 1;
        }
    };
    if !model.params().is_empty() {
        let (loss, grads) = loss_and_gradients(model, batch).unwrap();
        let abs = 1e-8 * loss.abs().max(1.0);
        let values = model.params().values().to_vec();
        for _ in 0..25 {
            let t = rng.gen_range(0..values.len());
            let idx = rng.gen_range(0..values[t].len());
            let (r, c) = (idx / values[t].ncols(), idx % values[t].ncols());
            let x = values[t][[r, c]];
            let h = 1e-6 * x.abs().max(1.0);
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().unwrap().values_mut()[t][[r, c]] = x + delta;
                loss_and_gradients(&m, batch).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            record(grads[t][[r, c]], fd, abs);
        }
    }
    let report = gradients(model, batch, OutputSteps::Final, false).unwrap();
    let horizon = batch.len - 1 - batch.prediction_start();
    // Power enters through the heating/cooling split, which has a kink at
    // u = 0; only differentiable points are sampled.
    let k0 = batch.prediction_start();
    let smooth: Vec<_> = report
        .entries
        .iter()
        .filter(|e| e.input != InputKind::Power || batch.power[k0 + e.input_step][[e.series, e.input_zone.unwrap()]].abs() >= MIN_POWER)
        .collect();
    for _ in 0..12 {
        let e = *smooth[rng.gen_range(0..smooth.len())];
        let coord = InputCoordinate { series: e.series, input: e.input, zone: e.input_zone.unwrap_or(0), step: e.input_step };
        let h = if e.input == InputKind::Power { 1e-3 } else { 1e-4 };
        let fd = finite_difference_gradient(model, batch, coord, e.output_zone, Some(horizon), h).unwrap();
        record(e.value, fd.value, 1e-8);
    }
    (checked, failures, worst)
}

fn criterion_1() -> Outcome {
    let (c_checked, c_fail, c_worst) = check_compositions(1000);
    let ds = short_dataset(3, 11);
    let (tr, _) = build_sequences(&ds, 0).unwrap();
    let windows = equal_length(&tr.windows, 288, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut m_checked = 0;
    let mut m_fail = 0;
    let mut m_worst: f64 = 0.0;
    let mut failing = Vec::new();
    for len in [24, 96] {
        let short: Vec<Window> = windows.iter().map(|w| Window { start: w.start, len }).collect();
        let batch = SeriesBatch::from_windows(&ds, &short, &FeatureSchema::standard(), WARM_START).unwrap();
        for model in model_zoo(&ds, &tr.windows) {
            let (c, f, w) = check_model_gradients(&model, &batch, &mut rng);
            m_checked += c;
            m_fail += f;
            m_worst = m_worst.max(w);
            if f > 0 {
                failing.push(format!("{}@{len}", model.kind()));
            }
        }
    }
    outcome(
        c_fail == 0 && m_fail == 0,
        format!(
            "primitives: {c_checked} entries over 1000 compositions, {c_fail} beyond 1e-5 (worst rel above floor {c_worst:.1e}); \
             models: {m_checked} entries, {m_fail} beyond 1e-4 (worst rel above floor {m_worst:.1e}) {failing:?}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Criteria 2 and 3: sign patterns of the pure physics rollout
// ---------------------------------------------------------------------------

const DRAWS: u64 = 100;
const MAX_LAG: usize = 10;

fn criterion_2() -> Outcome {
    let mut checked = 0;
    let mut violations = 0;
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
        let topo = random_topology(&mut rng);
        let eff = random_coefficients(&mut rng, &topo);
        let variant = [Variant::X, Variant::M, Variant::S][draw as usize % 3];
        let model = physics_only(&topo, variant, &eff);
        let batch = random_batch(&mut rng, topo.zone_count(), 2, WARM_START + MAX_LAG + 1);
        let r = check_heat_propagation(&model, &batch, MAX_LAG).unwrap();
        checked += r.checked;
        violations += r.violations.len();
    }
    outcome(
        violations == 0,
        format!("{DRAWS} draws, {checked} temperature gradients, {violations} mismatches with the n-hop pattern"),
    )
}

fn criterion_3() -> Outcome {
    let mut checked = 0;
    let mut violations = 0;
    let mut own = (0, 0);
    let mut ambient = (0, 0);
    let mut unreachable_ambient = 0;
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
        let topo = random_topology(&mut rng);
        let eff = random_coefficients(&mut rng, &topo);
        let variant = [Variant::X, Variant::M, Variant::S][draw as usize % 3];
        let model = physics_only(&topo, variant, &eff);
        let batch = random_batch(&mut rng, topo.zone_count(), 2, WARM_START + MAX_LAG + 1);
        let r = check_input_consistency(&model, &batch, OutputSteps::All).unwrap();
        checked += r.checked;
        violations += r.violations.len();
        let dist: Vec<Vec<Option<usize>>> = (0..topo.zone_count()).map(|z| topo.distances(z).unwrap()).collect();
        let report = gradients(&model, &batch, OutputSteps::All, false).unwrap();
        for e in &report.entries {
            let hops = e.output_step - e.input_step - 1;
            match e.input {
                InputKind::Power if e.input_zone == Some(e.output_zone) => {
                    own.0 += 1;
                    if e.value > POSITIVE_TOL {
                        own.1 += 1;
                    }
                }
                InputKind::Ambient => {
                    let reachable = (0..topo.zone_count())
                        .any(|y| topo.has_external_wall(y) && dist[e.output_zone][y].is_some_and(|d| d <= hops));
                    if reachable {
                        ambient.0 += 1;
                        if e.value > POSITIVE_TOL {
                            ambient.1 += 1;
                        }
                    } else {
                        unreachable_ambient += 1;
                    }
                }
                _ => {}
            }
        }
    }
    outcome(
        violations == 0 && own.0 == own.1 && ambient.0 == ambient.1,
        format!(
            "{checked} power/ambient gradients, {violations} pattern mismatches; own-zone power positive {}/{}; \
             ambient positive {}/{} (plus {unreachable_ambient} exactly zero before any exterior wall is reachable)",
            own.1, own.0, ambient.1, ambient.0
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 4: X, M, and S share one physical model
// ---------------------------------------------------------------------------

fn traces(model: &AnyModel, batch: &SeriesBatch, drift: &[Array2<f64>]) -> Trace {
    let mut tape = Tape::new();
    let opts = RolloutOptions { injected_drift: Some(drift.to_vec()), ..Default::default() };
    let ro: TapeRollout = model.rollout(&mut tape, batch, &opts).unwrap();
    Trace::from_rollout(&tape, &ro, batch, 0)
}

fn criterion_4() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for draw in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + draw);
        let topo = if draw == 0 { chain3() } else { random_topology(&mut rng) };
        let eff = random_coefficients(&mut rng, &topo);
        let m = topo.zone_count();
        let batch = random_batch(&mut rng, m, 1, 288);
        let horizon = 288 - WARM_START;
        let drift: Vec<Array2<f64>> =
            (0..horizon).map(|_| Array2::from_shape_fn((1, m), |_| rng.gen_range(-0.02..0.02))).collect();
        let mut models = Vec::new();
        for variant in [Variant::X, Variant::M, Variant::S] {
            let mut p = PcnnModel::new(&topo, &FeatureSchema::standard(), &PcnnConfig::new(variant)).unwrap();
            p.set_effective_physics(&eff).unwrap();
            if variant == Variant::X {
                p.merge_x_pcnn().unwrap();
            }
            models.push(AnyModel::Pcnn(p));
        }
        let t: Vec<Trace> = models.iter().map(|mo| traces(mo, &batch, &drift)).collect();
        for other in &t[1..] {
            for (a, b) in [(&t[0].energy, &other.energy), (&t[0].temps, &other.temps)] {
                for (ra, rb) in a.iter().zip(b) {
                    for (x, y) in ra.iter().zip(rb) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
        cases += 1;
    }
    outcome(worst <= 1e-12, format!("{cases} topologies, 288 steps, max |ΔE|, |ΔT| = {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// Criterion 5: coefficient recovery on noiseless linear data
// ---------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let mut plant = PlantConfig::default_chain();
    plant.noise_std = 0.0;
    plant.mode = PlantMode::Linear;
    let controller = Controller::default();
    let ds = simulate(&plant, &controller, 14, 5).unwrap();
    let truth = PlantTruth { plant: plant.clone(), controller, days: 14, seed: 5 };
    let (tr, _) = build_sequences(&ds, 0).unwrap();
    let lin = fit_linear(&ds, &tr.windows, &plan_topology(&plant), &Scales::default(), &LinearFitConfig::default()).unwrap();
    let rows = coefficient_recovery(&lin, &truth).unwrap();
    let worst = rows.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    let arx_cfg = ArxConfig { lags: 1, minimum_norm: true, ..Default::default() };
    let arx = arx_fit(&ds, &tr.windows, &plant.topology, &arx_cfg).unwrap();
    let pred = arx.one_step(&ds).unwrap();
    let sq: Vec<f64> = pred.indexed_iter().map(|((i, z), p)| (p - ds.temps[[arx.lags + i + 1, z]]).powi(2)).collect();
    let rmse = mean(sq.into_iter()).sqrt();
    outcome(
        worst <= 0.2 && rmse <= 1e-3,
        format!(
            "linear: {} coefficients, worst relative error {:.2}%; ARX lags=1 (rank {} of {}): one-step RMSE {rmse:.2e} °C",
            rows.len(),
            100.0 * worst,
            arx.rank,
            arx.alpha.len() * (2 * plant.topology.zone_count() + 2)
        ),
    )
}

fn plan_topology(plant: &PlantConfig) -> BuildingTopology {
    plant.topology.clone()
}

// ---------------------------------------------------------------------------
// Criteria 6 to 8: the saturating-solar fixture
// ---------------------------------------------------------------------------

const SEEDS: [u64; 3] = [1, 2, 3];

fn fixture_plant() -> PlantConfig {
    let mut plant = PlantConfig::default_chain();
    plant.mode = PlantMode::SaturatingSolar;
    plant.e = vec![2e-3; 3];
    plant.solar_saturation = 0.05;
    plant
}

fn fixture_training(seed: u64) -> TrainingConfig {
    TrainingConfig { learning_rate: 5e-3, epochs: 40, patience: 10, seed, ..Default::default() }
}

struct SeedRun {
    ds: Dataset,
    val: Vec<Window>,
    linear_mae: f64,
    pcnn: AnyModel,
    pcnn_mae: f64,
    pcnn_negative: usize,
    blackbox_mae: f64,
    blackbox_negative: usize,
    /// X- and M-PCNN, trained briefly for the consistency check only.
    other_pcnn_negative: Vec<usize>,
}

#[derive(Default)]
struct Shared {
    runs: Option<Vec<SeedRun>>,
}

fn run_fixture(seed: u64) -> SeedRun {
    let plant = fixture_plant();
    let ds = simulate(&plant, &Controller::Thermostat { max_power: 1000.0 }, 28, seed).unwrap();
    let (tr, va) = build_sequences(&ds, seed).unwrap();
    let schema = FeatureSchema::standard();
    let mcfg = ModelConfig::default();
    let tcfg = fixture_training(seed);
    let fit_with = |kind, tcfg: &TrainingConfig| {
        fit_model(kind, &ds, &plant.topology, &schema, &mcfg, tcfg, &tr.windows, &va.windows).unwrap().model
    };
    let fit = |kind| fit_with(kind, &tcfg);
    let brief = TrainingConfig { epochs: 3, ..tcfg.clone() };
    let mae = |m: &AnyModel| evaluate(m, &ds, &va.windows, seed, Split::Val).unwrap().mae;
    let negatives = |m: &AnyModel| {
        let opts = VerifyOptions { max_lag: MAX_LAG, propagation_windows: 2 };
        verify(m, &ds, &va.windows, seed, Split::Val, &opts).unwrap().negative_total
    };
    let linear = fit(ModelKind::Linear);
    let pcnn = fit(ModelKind::SPcnn);
    let blackbox = fit(ModelKind::Blackbox);
    SeedRun {
        linear_mae: mae(&linear),
        pcnn_mae: mae(&pcnn),
        pcnn_negative: negatives(&pcnn),
        blackbox_mae: mae(&blackbox),
        blackbox_negative: negatives(&blackbox),
        other_pcnn_negative: [ModelKind::XPcnn, ModelKind::MPcnn].map(|k| negatives(&fit_with(k, &brief))).to_vec(),
        pcnn,
        val: va.windows,
        ds,
    }
}

fn fixture_runs(shared: &mut Shared) -> &[SeedRun] {
    if shared.runs.is_none() {
        shared.runs = Some(SEEDS.iter().map(|&s| run_fixture(s)).collect());
    }
    shared.runs.as_deref().unwrap()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_6(shared: &mut Shared) -> Outcome {
    let runs = fixture_runs(shared);
    let lin = mean(runs.iter().map(|r| r.linear_mae));
    let pc = mean(runs.iter().map(|r| r.pcnn_mae));
    let per_seed: Vec<String> =
        runs.iter().map(|r| format!("{:.4}/{:.4}/{:.4}", r.linear_mae, r.pcnn_mae, r.blackbox_mae)).collect();
    let improvement = 1.0 - pc / lin;
    outcome(
        improvement >= 0.2,
        format!(
            "mean val MAE linear {lin:.4}, S-PCNN {pc:.4} ({:.1}% lower); per seed linear/S-PCNN/black-box {per_seed:?}",
            100.0 * improvement
        ),
    )
}

fn criterion_7(shared: &mut Shared) -> Outcome {
    let runs = fixture_runs(shared);
    let bb_seeds = runs.iter().filter(|r| r.blackbox_negative > 0).count();
    let pc_clean = runs.iter().all(|r| r.pcnn_negative == 0 && r.other_pcnn_negative.iter().all(|n| *n == 0));
    let bb: Vec<usize> = runs.iter().map(|r| r.blackbox_negative).collect();
    let pc: Vec<usize> = runs.iter().map(|r| r.pcnn_negative).collect();
    let others: Vec<Vec<usize>> = runs.iter().map(|r| r.other_pcnn_negative.clone()).collect();
    outcome(
        bb_seeds >= 2 && pc_clean,
        format!("negative power/ambient gradients per seed: black-box {bb:?}, S-PCNN {pc:?}, X/M-PCNN {others:?}"),
    )
}

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_pcnn"))
}

fn run_cli(args: &[&str], cwd: &Path) -> std::process::Output {
    let out = Command::new(bin()).args(args).current_dir(cwd).output().expect("run pcnn");
    assert!(out.status.success(), "pcnn {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Per-zone temperature columns of a trace table, predicted steps only.
fn read_trace(text: &str, m: usize) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').nth(2) == Some("predicted"))
        .map(|l| l.split(',').skip(3).take(m).map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn criterion_8(shared: &mut Shared) -> Outcome {
    let runs = fixture_runs(shared);
    let run = &runs[0];
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&dir.path().join("data.csv"), &run.ds).unwrap();
    let meta = CheckpointMeta { seed: SEEDS[0], split_seed: SEEDS[0], ..Default::default() };
    save_checkpoint(&dir.path().join("s.ckpt"), &run.pcnn, &meta).unwrap();
    let start = run.val.iter().find(|w| w.len == 288).unwrap().start.to_string();
    let trace = |pattern: &str| {
        let out = run_cli(
            &["whatif", "--ckpt", "s.ckpt", "--data", "data.csv", "--zone", "1", "--pattern", pattern, "--start", &start],
            dir.path(),
        );
        read_trace(&String::from_utf8(out.stdout).unwrap(), 3)
    };
    let heat = trace("heat");
    let off = trace("off");
    let heated_ok = heat.iter().zip(&off).all(|(h, o)| h[0] > o[0]);
    let mut onsets = Vec::new();
    let mut raised_after_onset = true;
    for z in 1..3 {
        let onset = heat.iter().zip(&off).position(|(h, o)| h[z] > o[z]);
        if let Some(s) = onset {
            raised_after_onset &= heat[s..].iter().zip(&off[s..]).all(|(h, o)| h[z] > o[z]);
            raised_after_onset &= heat[..s].iter().zip(&off[..s]).all(|(h, o)| h[z] == o[z]);
        }
        onsets.push(onset);
    }
    let ordered = matches!(onsets.as_slice(), [Some(a), Some(b)] if a < b);
    outcome(
        heated_ok && ordered && raised_after_onset,
        format!(
            "{} predicted steps; heated zone above 'off' at every step: {heated_ok}; first raised step for zones at \
             distance 1 and 2: {onsets:?}",
            heat.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 9: physics-informed loss mechanics
// ---------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let ds = short_dataset(3, 9);
    let (tr, _) = build_sequences(&ds, 0).unwrap();
    let windows = equal_length(&tr.windows, 288, 3);
    let short: Vec<Window> = windows.iter().map(|w| Window { start: w.start, len: 60 }).collect();
    let schema = FeatureSchema::standard();
    let batch = SeriesBatch::from_windows(&ds, &short, &schema, WARM_START).unwrap();
    let topo = chain3();
    let cfg = BlackBoxConfig::default();
    let mut plain = AnyModel::Recurrent(RecurrentBaseline::new(&topo, &schema, &cfg, false, 0.0).unwrap());
    let mut pinn0 = AnyModel::Recurrent(RecurrentBaseline::new(&topo, &schema, &cfg, true, 0.0).unwrap());
    plain.fit_scalers(&ds, &tr.windows).unwrap();
    pinn0.fit_scalers(&ds, &tr.windows).unwrap();
    let (lp, gp) = loss_and_gradients(&plain, &batch).unwrap();
    let (l0, g0) = loss_and_gradients(&pinn0, &batch).unwrap();
    let same_loss = lp.to_bits() == l0.to_bits();
    let same_grads = gp == g0;

    let mut tape = Tape::new();
    let ro = pinn0.rollout(&mut tape, &batch, &RolloutOptions { fitting: true, ..Default::default() }).unwrap();
    let parts = pinn_loss(&mut tape, &ro, &batch, 0.0).unwrap();
    let data = tape_mse(&mut tape, &ro, &batch).unwrap();
    let weight_zero = tape.scalar_value(parts.total).to_bits() == tape.scalar_value(data).to_bits();

    // Two zones, two steps: T' = T + A·u + g·T_out with A = [[0.2, -0.1], [-0.3, 0.4]]
    // and g = [0.05, -0.02]. Final-step gradients: power at step 0 through the
    // two-step product, so L_phys is computed from the entries below.
    let a = [[0.2, -0.1], [-0.3, 0.4]];
    let g = [0.05, -0.02];
    let mut tape = Tape::new();
    let t0 = tape.leaf(Array2::from_elem((1, 2), 20.0));
    let mut temp = t0;
    let mut power = Vec::new();
    let mut ambient = Vec::new();
    let mut temps = Vec::new();
    let am = tape.leaf(Array2::from_shape_fn((2, 2), |(i, j)| a[j][i]));
    let gm = tape.leaf(Array2::from_shape_vec((1, 2), g.to_vec()).unwrap());
    for step in 0..2 {
        let u = tape.leaf(Array2::from_shape_vec((1, 2), vec![100.0 + step as f64, -50.0]).unwrap());
        let tout = tape.leaf(Array2::from_elem((1, 1), 5.0));
        let au = tape.matmul(u, am).unwrap();
        let gt = tape.matmul(tout, gm).unwrap();
        let s = tape.add(temp, au).unwrap();
        temp = tape.add(s, gt).unwrap();
        power.push(u);
        ambient.push(tout);
        temps.push(temp);
    }
    let bound = pcnn::params::ParamSet::new().bind(&mut tape);
    let ro = TapeRollout { k0: 0, temps, drift: None, energy: None, power, ambient, taps: Vec::new(), bound };
    let penalty = physics_penalty(&mut tape, &ro).unwrap();
    let lphys = tape.scalar_value(penalty);
    // dT2^z/du_j^y = a[z][y] for both steps; dT2^z/dTout_j = g[z].
    let mut expected = 0.0;
    for z in 0..2 {
        for _step in 0..2 {
            for y in 0..2 {
                expected += f64::max(-a[z][y], 0.0);
            }
            expected += f64::max(-g[z], 0.0);
        }
    }
    expected /= (1 * 2 * 2) as f64;
    let hand_ok = (lphys - expected).abs() <= 1e-12;
    outcome(
        same_loss && same_grads && weight_zero && hand_ok,
        format!(
            "λ=0 loss bit-identical to black-box: {same_loss}, gradients identical: {same_grads}, total==data: {weight_zero}; \
             hand model L_phys {lphys} vs analytic {expected}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 10: reruns are byte-identical apart from the created line
// ---------------------------------------------------------------------------

const PIPELINE_CONFIG: &str = r#"
seeds = [0, 1]

[topology]
zones = 3
adjacency = [[1, 2], [2, 3]]
external_walls = [1, 2, 3]

[model]
kind = "s-pcnn"
linear = { budget = 400 }

[training]
epochs = 2
learning_rate = 5e-3

[simulator]
days = 3
mode = "saturating-solar"
controller = { kind = "thermostat", max_power = 1000.0 }
e = 2e-3
solar_saturation = 0.05
"#;

fn pipeline(dir: &Path) {
    std::fs::write(dir.join("run.toml"), PIPELINE_CONFIG).unwrap();
    run_cli(&["simulate", "--config", "run.toml", "--out", "sim"], dir);
    run_cli(&["train", "--config", "run.toml", "--data", "sim", "--out", "multi", "--seeds"], dir);
    for kind in ["x-pcnn", "m-pcnn", "linear", "res", "res-cons", "arx", "blackbox", "pinn"] {
        let ckpt = format!("{kind}.ckpt");
        run_cli(&["train", "--config", "run.toml", "--data", "sim", "--model", kind, "--out", &ckpt], dir);
        run_cli(&["evaluate", "--ckpt", &ckpt, "--data", "sim", "--out", &format!("{kind}.eval.json")], dir);
    }
    run_cli(&["evaluate", "--ckpt", "linear.ckpt", "--data", "sim", "--out", "linear.truth.json", "--truth", "sim/truth.json"], dir);
    for kind in ["m-pcnn", "blackbox"] {
        run_cli(&["verify", "--ckpt", &format!("{kind}.ckpt"), "--data", "sim", "--out", &format!("{kind}.verify.json")], dir);
    }
    run_cli(
        &["compare", "--reports", "m-pcnn.eval.json", "m-pcnn.verify.json", "blackbox.eval.json", "blackbox.verify.json", "arx.eval.json", "--out", "compare.csv"],
        dir,
    );
    let out = run_cli(&["whatif", "--ckpt", "multi/seed-1/model.ckpt", "--data", "sim", "--zone", "2", "--pattern", "cool"], dir);
    std::fs::write(dir.join("whatif.csv"), out.stdout).unwrap();
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn without_created(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut rest = bytes;
    while !rest.is_empty() {
        let end = rest.iter().position(|b| *b == b'\n').map_or(rest.len(), |p| p + 1);
        let line = &rest[..end];
        if !line.starts_with(b"created ") {
            out.extend_from_slice(line);
        }
        rest = &rest[end..];
        if line.starts_with(b"header ") {
            // Everything after the header is JSON and binary; compare verbatim.
            out.extend_from_slice(rest);
            break;
        }
    }
    out
}

fn criterion_10() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let fa = files(a.path());
    let fb = files(b.path());
    let mut differing = Vec::new();
    for (p, bytes) in &fa {
        match fb.get(p) {
            Some(other) if without_created(bytes) == without_created(other) => {}
            _ => differing.push(p.display().to_string()),
        }
    }
    let same_names = fa.keys().eq(fb.keys());
    outcome(
        differing.is_empty() && same_names && fa.len() > 20,
        format!("{} artifacts compared, differing: {differing:?}", fa.len()),
    )
}
