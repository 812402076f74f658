use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use onconet::pipeline::{self, ModalitySel};
use onconet::PipelineConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "onconet", version, about = "U-Net feature survival pipeline on synthetic PET/CT phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-case stages. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_enum, default_value_t = Sel::Both)]
    modality: Sel,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Sel {
    Ct,
    Pet,
    Both,
}

impl From<Sel> for ModalitySel {
    fn from(s: Sel) -> Self {
        match s {
            Sel::Ct => ModalitySel::Ct,
            Sel::Pet => ModalitySel::Pet,
            Sel::Both => ModalitySel::Both,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the survival and segmentation phantom cohorts.
    Gen(Common),
    /// Train the segmentation networks.
    TrainSeg(Common),
    /// Extract bottleneck features for the survival cohort.
    Extract(Common),
    /// Cluster the features and keep the medoids.
    Select(Common),
    /// Fit the survival model on the whole cohort.
    Fit(Common),
    /// Cross-validate selection and fitting.
    Eval(Common),
    /// Write risk-map overlays and activation maxima.
    Visualize(Common),
    /// Every stage in order.
    RunAll(Common),
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

fn load(c: &Common) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::load(&c.config).with_context(|| format!("loading {}", c.config.display())).map_err(Failure::Invalid)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if c.jobs == 0 {
        return Err(Failure::Invalid(anyhow::anyhow!("--jobs must be at least 1")));
    }
    cfg.validate().map_err(|e| Failure::Invalid(e.into()))?;
    Ok(cfg)
}

fn classify(e: onconet::Error) -> Failure {
    use onconet::Error as E;
    match e {
        E::Config(_) | E::Parameter(_) | E::KOutOfRange { .. } => Failure::Invalid(e.into()),
        other => Failure::Runtime(other.into()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (name, c) = match &cli.command {
        Command::Gen(c) => ("gen", c),
        Command::TrainSeg(c) => ("train-seg", c),
        Command::Extract(c) => ("extract", c),
        Command::Select(c) => ("select", c),
        Command::Fit(c) => ("fit", c),
        Command::Eval(c) => ("eval", c),
        Command::Visualize(c) => ("visualize", c),
        Command::RunAll(c) => ("run-all", c),
    };
    let cfg = load(c)?;
    let (sel, jobs) = (ModalitySel::from(c.modality), c.jobs);
    let cfg = &cfg;
    let out = match cli.command {
        Command::Gen(_) => pipeline::run_stage(cfg, name, || pipeline::cmd_gen(cfg, jobs)),
        Command::TrainSeg(_) => pipeline::run_stage(cfg, name, || pipeline::cmd_train_seg(cfg, sel, jobs)),
        Command::Extract(_) => pipeline::run_stage(cfg, name, || pipeline::cmd_extract(cfg, sel, jobs)),
        Command::Select(_) => pipeline::run_stage(cfg, name, || pipeline::cmd_select(cfg, sel)),
        Command::Fit(_) => pipeline::run_stage(cfg, name, || pipeline::cmd_fit(cfg, sel)),
        Command::Eval(_) => pipeline::run_stage(cfg, name, || pipeline::cmd_eval(cfg, sel)),
        Command::Visualize(_) => pipeline::run_stage(cfg, name, || pipeline::cmd_visualize(cfg, sel, jobs)),
        Command::RunAll(_) => pipeline::run_all(cfg, sel, jobs),
    }
    .map_err(classify)?;
    println!("{name}: wrote {} artifacts under {}", out.len(), cfg.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
