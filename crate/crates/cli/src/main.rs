//! `pcnn`: simulate, train, evaluate, verify, compare, and what-if runs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pcnn::io::report::{PowerPattern, Split};
use pcnn::model::ModelKind;

#[derive(Parser)]
#[command(name = "pcnn", version, about = "Physically consistent neural networks for building thermal models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset; writes `data.csv` and `truth.json` into OUT.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model and write its checkpoint and training history.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset CSV, or a directory holding `data.csv`.
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `model.kind` from the configuration.
        #[arg(long)]
        model: Option<ModelKind>,
        /// Checkpoint path; with `--seeds`, a directory of per-seed runs.
        #[arg(long)]
        out: PathBuf,
        /// Train once per seed; without values, use the configured seeds.
        #[arg(long, num_args = 0.., value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// MAE/MAPE and error-by-horizon tables.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Simulator sidecar; adds a coefficient-recovery table for linear models.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Gradient-sign analysis and consistency checks.
    Verify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long, default_value_t = 10)]
        max_lag: usize,
        /// Windows used for the lag-resolved checks.
        #[arg(long, default_value_t = 8)]
        propagation_windows: usize,
    },
    /// Merge evaluation and verification reports into one table.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Counterfactual trace with one zone heated, cooled, or off.
    Whatif {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// 1-based zone.
        #[arg(long)]
        zone: usize,
        #[arg(long, value_parser = parse_pattern)]
        pattern: PowerPattern,
        /// Heating or cooling power, W.
        #[arg(long, default_value_t = 1000.0)]
        power: f64,
        /// First dataset step of the window; defaults to the first valid one.
        #[arg(long)]
        start: Option<usize>,
        #[arg(long, default_value_t = 288)]
        steps: usize,
        /// Trace table path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::All => Split::All,
        }
    }
}

fn parse_pattern(s: &str) -> Result<PowerPattern, String> {
    s.parse().map_err(|e: pcnn::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out } => commands::simulate(&config, &out),
        Command::Train { config, data, model, out, seeds } => commands::train(&config, &data, model, &out, seeds),
        Command::Evaluate { ckpt, data, out, split, truth } => {
            commands::evaluate(&ckpt, &data, &out, split.into(), truth.as_deref())
        }
        Command::Verify { ckpt, data, out, split, max_lag, propagation_windows } => {
            commands::verify(&ckpt, &data, &out, split.into(), max_lag, propagation_windows)
        }
        Command::Compare { reports, out } => commands::compare(&reports, &out),
        Command::Whatif { ckpt, data, zone, pattern, power, start, steps, out } => {
            commands::whatif(&ckpt, &data, zone, pattern, power, start, steps, out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} code={} message={message}", e.kind(), e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
