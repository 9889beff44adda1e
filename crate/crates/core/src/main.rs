use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mimo_fl::harness::{self, ExperimentConfig, ExperimentKind, HarnessError, RunRecord};

#[derive(Parser)]
#[command(name = "mimo-fl", version, about = "Over-the-air federated learning simulator for massive MIMO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregation MSE and CRLB sweep over M, K and SNR.
    Mse(Common),
    /// Channel-correlation and imperfect-CSI studies.
    Robustness(Common),
    /// Federated training runs.
    Fl(Common),
    /// Convergence constants and bound envelope.
    Bounds(Common),
    /// Receiver wall-time comparison.
    Timing(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; built-in defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// CSV output path; stdout when omitted and the config names none.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Add the large antenna counts to the grid.
    #[arg(long)]
    full_grid: bool,
}

impl Common {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(o) = &self.out {
            cfg.output_path = Some(o.clone());
        }
        cfg.full_grid |= self.full_grid;
    }
}

fn configs(kinds: &[ExperimentKind], args: &Common) -> Result<Vec<ExperimentConfig>, HarnessError> {
    let mut cfgs = match &args.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            if !kinds.contains(&cfg.kind) {
                return Err(HarnessError::Config(format!(
                    "{}: experiment kind `{}` does not belong to this subcommand",
                    path.display(),
                    cfg.kind.label()
                )));
            }
            vec![cfg]
        }
        None => kinds.iter().map(|&k| ExperimentConfig::default_for(k)).collect(),
    };
    for cfg in &mut cfgs {
        args.apply(cfg);
        cfg.validate()?;
    }
    Ok(cfgs)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    use ExperimentKind as K;
    let (kinds, args): (&[K], _) = match &cli.command {
        Command::Mse(a) => (&[K::MseSweep], a),
        Command::Robustness(a) => (&[K::RobustnessCorrelation, K::RobustnessImperfectCsi], a),
        Command::Fl(a) => (&[K::FlRun], a),
        Command::Bounds(a) => (&[K::BoundsEval], a),
        Command::Timing(a) => (&[K::Timing], a),
    };
    let cfgs = configs(kinds, args)?;
    let mut records: Vec<RunRecord> = Vec::new();
    for cfg in &cfgs {
        records.extend(harness::run_experiment(cfg)?);
    }
    match cfgs[0].output_path.as_deref() {
        Some(path) => harness::write_csv_file(&records, path),
        None => harness::write_csv(&records, std::io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
