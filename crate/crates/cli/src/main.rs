use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sedkit::runner::{RunConfig, Runner, Stage};
use sedkit::SedError;

#[derive(Parser, Debug)]
#[command(name = "sedkit", version, about = "Semi-supervised sound event detection pipeline")]
struct Cli {
    /// JSON run configuration; unspecified fields take preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Defaults used when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Full)]
    preset: Preset,

    /// Run directory holding every stage's artifacts.
    #[arg(long, global = true, env = "SEDKIT_RUN_DIR", default_value = "run")]
    run_dir: PathBuf,

    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for clips and folds (1 = bit-reproducible order).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Weight of weak-label pseudo targets.
    #[arg(long, global = true)]
    beta_w: Option<f64>,

    /// Weight of unlabeled-clip pseudo targets.
    #[arg(long, global = true)]
    beta_u: Option<f64>,

    /// Extra β values to sweep, each applied to both β_W and β_U.
    #[arg(long, global = true, value_delimiter = ',')]
    betas: Option<Vec<f64>>,

    /// Also train the strong-only baseline set.
    #[arg(long, global = true)]
    baseline: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Full,
    Toy,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Render the synthetic training and validation corpora.
    Synth,
    /// Extract and normalise log-mel features.
    Features,
    /// Train the first-stage mean teacher.
    TrainTeacher,
    /// Decode teacher posteriors into pseudo labels.
    PseudoLabel,
    /// Train fold students for every model set.
    Train,
    /// Predict validation posteriors with fold ensembles and single folds.
    Ensemble,
    /// Turn posteriors into event lists.
    Decode,
    /// Score posteriors against the validation ground truth.
    Evaluate,
    /// Every stage in order.
    All,
    /// Print the effective configuration and exit.
    Config,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Synth => Stage::Synth,
            Command::Features => Stage::Features,
            Command::TrainTeacher => Stage::TrainTeacher,
            Command::PseudoLabel => Stage::PseudoLabel,
            Command::Train => Stage::Train,
            Command::Ensemble => Stage::Ensemble,
            Command::Decode => Stage::Decode,
            Command::Evaluate => Stage::Evaluate,
            Command::All => Stage::All,
            Command::Config => return None,
        })
    }
}

fn effective_config(cli: &Cli) -> sedkit::Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Preset::Full) => RunConfig::default(),
        (None, Preset::Toy) => RunConfig::toy(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(b) = cli.beta_w {
        cfg.train.beta_w = b;
    }
    if let Some(b) = cli.beta_u {
        cfg.train.beta_u = b;
    }
    if let Some(bs) = &cli.betas {
        cfg.train.beta_sweep = bs.clone();
    }
    if cli.baseline {
        cfg.train.strong_only_baseline = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> sedkit::Result<serde_json::Value> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(SedError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| SedError::Usage(format!("thread pool: {e}")))?;
    }
    let cfg = effective_config(cli)?;
    let Some(stage) = cli.command.stage() else {
        print!("{}", cfg.to_json());
        return Ok(serde_json::Value::Null);
    };
    let runner = Runner::new(&cli.run_dir, cfg)?;
    runner.run(stage)?;
    let mut out = serde_json::json!({
        "status": "ok",
        "stage": stage.name(),
        "run_dir": cli.run_dir.display().to_string(),
    });
    if matches!(stage, Stage::Evaluate | Stage::All) {
        let text = std::fs::read_to_string(runner.metrics_path()).map_err(|e| SedError::Io {
            path: runner.metrics_path(),
            source: e,
        })?;
        let reports: Vec<serde_json::Value> = serde_json::from_str(&text)?;
        out["summary"] = reports
            .iter()
            .map(|r| {
                serde_json::json!({
                    "model": r["model"],
                    "macro_f1": r["macro_f1"],
                    "error_rate": r["error_rate"],
                    "psds": r["psds"],
                })
            })
            .collect();
    }
    Ok(out)
}

fn error_json(e: &SedError) -> serde_json::Value {
    let mut v = serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}});
    if let SedError::MissingArtifact { path, stage } = e {
        v["error"]["path"] = path.display().to_string().into();
        v["error"]["stage"] = (*stage).into();
    }
    v
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            match e {
                SedError::MissingArtifact { .. } => ExitCode::from(3),
                SedError::Config(_) | SedError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
