use std::path::{Path, PathBuf};

use pcnn::dataset::{build_sequences, enumerate_windows, Dataset, Window, MIN_WINDOW, WARM_START};
use pcnn::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, TrainingSummary};
use pcnn::io::config::RunConfig;
use pcnn::io::data::{load_dataset, load_truth, save_dataset, save_truth};
use pcnn::io::report::{
    coefficient_recovery, compare_table, evaluate as evaluate_model, evaluation_table, history_table, load_report,
    save_report, trace_table, verification_table, verify as verify_model, whatif as whatif_trace, PowerPattern, Report,
    Split, VerifyOptions,
};
use pcnn::model::{AnyModel, ModelKind};
use pcnn::simulator::simulate as run_plant;
use pcnn::training::fit_model;
use pcnn::{Error, Result};

fn data_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("data.csv")
    } else {
        path.to_path_buf()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_zones(ds: &Dataset, zones: usize) -> Result<()> {
    if ds.zones() != zones {
        return Err(Error::config(format!("dataset has {} zones, the model has {zones}", ds.zones())));
    }
    Ok(())
}

pub fn simulate(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let truth = cfg.truth()?;
    let ds = run_plant(&truth.plant, &truth.controller, truth.days, truth.seed)?;
    save_dataset(&out.join("data.csv"), &ds)?;
    save_truth(&out.join("truth.json"), &truth)?;
    println!("simulated {} steps of {} zones into {}", ds.len(), ds.zones(), out.display());
    Ok(())
}

fn train_one(
    cfg: &RunConfig,
    ds: &Dataset,
    kind: ModelKind,
    seed: u64,
    train_w: &[Window],
    val_w: &[Window],
    ckpt: &Path,
    history: &Path,
) -> Result<f64> {
    let train_cfg = cfg.training_for_seed(seed);
    let fit = fit_model(kind, ds, &cfg.topology, &cfg.data.features, &cfg.model_config(), &train_cfg, train_w, val_w)?;
    let eval = evaluate_model(&fit.model, ds, val_w, seed, Split::Val)?;
    let mut meta = CheckpointMeta {
        seed,
        split_seed: cfg.data.split_seed,
        training: fit.report.as_ref().map(TrainingSummary::from),
        columns: cfg.data.columns.clone(),
        config: Some(cfg.echo()),
        ..Default::default()
    };
    meta.metrics.insert("val_mae".into(), Some(eval.mae));
    meta.metrics.insert("val_mse".into(), Some(eval.mse));
    meta.metrics.insert("val_mape".into(), eval.mape);
    meta.metrics.insert("parameters".into(), Some(fit.model.count_parameters() as f64));
    save_checkpoint(ckpt, &fit.model, &meta)?;
    if let Some(r) = &fit.report {
        write_text(history, &history_table(r))?;
    }
    Ok(eval.mae)
}

pub fn train(config: &Path, data: &Path, model: Option<ModelKind>, out: &Path, seeds: Option<Vec<u64>>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let kind = model
        .or(cfg.model.kind)
        .ok_or_else(|| Error::config("no model kind: pass --model or set model.kind"))?;
    let ds = load_dataset(&data_file(data), cfg.data.columns.as_ref())?;
    check_zones(&ds, cfg.topology.zone_count())?;
    let (tr, va) = build_sequences(&ds, cfg.data.split_seed)?;
    match seeds {
        None => {
            let seed = cfg.seeds[0];
            let history = out.with_extension("history.csv");
            let mae = train_one(&cfg, &ds, kind, seed, &tr.windows, &va.windows, out, &history)?;
            println!("seed,val_mae\n{seed},{mae}");
        }
        Some(list) => {
            let list = if list.is_empty() { cfg.seeds.clone() } else { list };
            let results: Vec<Result<f64>> = std::thread::scope(|s| {
                let handles: Vec<_> = list
                    .iter()
                    .map(|&seed| {
                        let (cfg, ds, tr, va) = (&cfg, &ds, &tr, &va);
                        let dir = out.join(format!("seed-{seed}"));
                        s.spawn(move || {
                            train_one(cfg, ds, kind, seed, &tr.windows, &va.windows, &dir.join("model.ckpt"), &dir.join("history.csv"))
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
            });
            let mut table = String::from("seed,val_mae\n");
            for (seed, r) in list.iter().zip(results) {
                table.push_str(&format!("{seed},{}\n", r?));
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn load_for(ckpt: &Path, data: &Path) -> Result<(Checkpoint, Dataset)> {
    let ck = load_checkpoint(ckpt)?;
    let ds = load_dataset(&data_file(data), ck.meta.columns.as_ref())?;
    check_zones(&ds, ck.model.zones())?;
    Ok((ck, ds))
}

fn split_windows(ds: &Dataset, split_seed: u64, split: Split) -> Result<Vec<Window>> {
    Ok(match split {
        Split::All => enumerate_windows(ds),
        Split::Train => build_sequences(ds, split_seed)?.0.windows,
        Split::Val => build_sequences(ds, split_seed)?.1.windows,
    })
}

pub fn evaluate(ckpt: &Path, data: &Path, out: &Path, split: Split, truth: Option<&Path>) -> Result<()> {
    let (ck, ds) = load_for(ckpt, data)?;
    let windows = split_windows(&ds, ck.meta.split_seed, split)?;
    let mut report = evaluate_model(&ck.model, &ds, &windows, ck.meta.seed, split)?;
    if let Some(path) = truth {
        let truth = load_truth(path)?;
        match &ck.model {
            AnyModel::Linear(l) => report.coefficients = Some(coefficient_recovery(l, &truth)?),
            AnyModel::Residual(r) => report.coefficients = Some(coefficient_recovery(r.base(), &truth)?),
            other => {
                return Err(Error::config(format!("--truth needs a linear or residual checkpoint, got {}", other.kind())))
            }
        }
    }
    print!("{}", evaluation_table(&report));
    save_report(out, &Report::Evaluation(report))
}

pub fn verify(ckpt: &Path, data: &Path, out: &Path, split: Split, max_lag: usize, propagation_windows: usize) -> Result<()> {
    let (ck, ds) = load_for(ckpt, data)?;
    let windows = split_windows(&ds, ck.meta.split_seed, split)?;
    let opts = VerifyOptions { max_lag, propagation_windows };
    let report = verify_model(&ck.model, &ds, &windows, ck.meta.seed, split, &opts)?;
    print!("{}", verification_table(&report));
    save_report(out, &Report::Verification(report))
}

pub fn compare(reports: &[PathBuf], out: &Path) -> Result<()> {
    let loaded = reports.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
    let table = compare_table(&loaded)?;
    print!("{table}");
    write_text(out, &table)
}

fn whatif_window(ds: &Dataset, start: Option<usize>, steps: usize) -> Result<Window> {
    if steps < WARM_START + 1 {
        return Err(Error::config(format!("--steps must be at least {}", WARM_START + 1)));
    }
    let segments = ds.valid_segments();
    let (seg_start, seg_end) = match start {
        Some(k) => {
            let seg = segments
                .iter()
                .find(|(s, e)| (*s..*e).contains(&k))
                .ok_or_else(|| Error::data(format!("step {k} has missing values or lies beyond the dataset")))?;
            (k, seg.1)
        }
        None => *segments
            .iter()
            .find(|(s, e)| e - s >= MIN_WINDOW.min(steps))
            .ok_or_else(|| Error::data("no gap-free stretch long enough for a what-if run"))?,
    };
    let len = steps.min(seg_end - seg_start);
    if len < WARM_START + 1 {
        return Err(Error::data(format!("only {len} gap-free steps from step {seg_start}")));
    }
    Ok(Window { start: seg_start, len })
}

#[allow(clippy::too_many_arguments)]
pub fn whatif(
    ckpt: &Path,
    data: &Path,
    zone: usize,
    pattern: PowerPattern,
    power: f64,
    start: Option<usize>,
    steps: usize,
    out: Option<&Path>,
) -> Result<()> {
    let (ck, ds) = load_for(ckpt, data)?;
    if zone == 0 {
        return Err(Error::config("zones are 1-based"));
    }
    let window = whatif_window(&ds, start, steps)?;
    let trace = whatif_trace(&ck.model, &ds, window, zone - 1, pattern, power)?;
    let table = trace_table(&trace, &ds, window);
    match out {
        Some(p) => write_text(p, &table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}
