//! `deploygap`: data generation, detector training, band attacks,
//! evaluation and reporting.
//!
//! Exit codes: 0 ok, 2 data, 3 training, 4 artifact, 5 evaluation,
//! 6 report, 1 unexpected.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deploygap_core::perturb::BandSide;
use deploygap_core::Error;

use config::{DetectorKind, Overrides, Pair};

#[derive(Parser, Debug)]
#[command(name = "deploygap", version, about = "Deployment-aware evaluation of synthetic-image detectors")]
struct Cli {
    /// Worker threads for parallel stages (outputs do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set attack.iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate or validate datasets.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Train detectors.
    Detector {
        #[command(subcommand)]
        command: DetectorCommand,
    },
    /// Optimize band perturbations.
    Attack {
        #[command(subcommand)]
        regime: AttackCommand,
    },
    /// Score the test split under clean and attacked conditions.
    Eval(EvalArgs),
    /// Metrics, plot data, figures and the comparison table.
    Report(ReportArgs),
}

#[derive(Subcommand, Debug)]
enum DataCommand {
    /// Write the procedural toy dataset.
    Toy {
        #[command(flatten)]
        common: Common,
        /// Images per class.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        prompts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Check a manifest and list every violation.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum DetectorCommand {
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<DetectorKind>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// JSON-lines embeddings (probe only).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args, Debug, Clone)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long, value_enum)]
    band: Option<Band>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Band {
    Top,
    Bottom,
}

#[derive(Subcommand, Debug)]
enum AttackCommand {
    /// One perturbation per synthetic test image.
    PerImage(AttackArgs),
    /// One perturbation shared by all images, trained on the synthetic train split.
    Universal(AttackArgs),
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Output directory of `attack per-image`.
    #[arg(long)]
    per_image: Option<PathBuf>,
    /// Output directory of `attack universal`.
    #[arg(long)]
    universal: Option<PathBuf>,
    /// Comma-separated condition:eval_mode pairs, e.g. clean:pristine,per_image:deployment.
    #[arg(long, value_delimiter = ',')]
    pairs: Vec<Pair>,
    #[arg(long)]
    n_draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// ScoreSet files.
    #[arg(long, num_args = 1..)]
    scores: Vec<PathBuf>,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    no_figures: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data = 2,
    Training = 3,
    Artifact = 4,
    Evaluation = 5,
    Report = 6,
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

/// Input-data problems exit 2 from any stage; a few variants name their own
/// stage; everything else takes the code of the stage that raised it.
fn exit_code(stage: Stage, e: &anyhow::Error) -> u8 {
    if stage == Stage::Report {
        return Stage::Report as u8;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::MalformedManifest { .. } | Error::MissingImage(_) | Error::Decode { .. }) => Stage::Data as u8,
        Some(Error::NonConvergence { .. }) => Stage::Training as u8,
        Some(Error::MalformedArtifact { .. }) => Stage::Artifact as u8,
        Some(Error::MissingArtifact(_)) => Stage::Evaluation as u8,
        _ => stage as u8,
    }
}

pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, Failure> {
        self.map_err(|e| {
            let error = e.into();
            Failure {
                code: exit_code(stage, &error),
                error,
            }
        })
    }
}

fn overrides(common: &Common) -> anyhow::Result<Overrides> {
    let mut o = Overrides::default();
    o.raw(&common.set)?;
    o.opt("paths.out", common.out.clone());
    Ok(o)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure {
                code: 1,
                error: e.into(),
            })?;
    }
    match cli.command {
        Command::Data { command } => match command {
            DataCommand::Toy {
                common,
                n,
                prompts,
                seed,
                image_size,
            } => {
                let mut o = overrides(&common).stage(Stage::Data)?;
                o.opt("data.n_per_class", n);
                o.opt("data.n_prompts", prompts);
                o.opt("data.seed", seed);
                o.opt("data.image_size", image_size);
                let cfg = config::resolve(common.config.as_deref(), o).stage(Stage::Data)?;
                commands::data_toy(&cfg)
            }
            DataCommand::Validate { common, manifest } => {
                let mut o = overrides(&common).stage(Stage::Data)?;
                o.opt("paths.manifest", manifest);
                let cfg = config::resolve(common.config.as_deref(), o).stage(Stage::Data)?;
                commands::data_validate(&cfg)
            }
        },
        Command::Detector {
            command:
                DetectorCommand::Train {
                    common,
                    kind,
                    manifest,
                    embeddings,
                    epochs,
                    seed,
                },
        } => {
            let mut o = overrides(&common).stage(Stage::Training)?;
            o.opt("train.kind", kind);
            o.opt("paths.manifest", manifest);
            o.opt("paths.embeddings", embeddings);
            o.opt("train.cnn.epochs", epochs);
            o.opt("train.cnn.seed", seed);
            let cfg = config::resolve(common.config.as_deref(), o).stage(Stage::Training)?;
            commands::detector_train(&cfg)
        }
        Command::Attack { regime } => {
            let (universal, a) = match regime {
                AttackCommand::PerImage(a) => (false, a),
                AttackCommand::Universal(a) => (true, a),
            };
            let mut o = overrides(&a.common).stage(Stage::Artifact)?;
            o.opt("paths.manifest", a.manifest);
            o.opt("paths.detector", a.detector);
            o.opt(
                "attack.band_side",
                a.band.map(|b| match b {
                    Band::Top => BandSide::Top,
                    Band::Bottom => BandSide::Bottom,
                }),
            );
            o.opt("attack.epsilon", a.epsilon);
            o.opt("attack.iterations", a.iterations);
            o.opt("attack.seed", a.seed);
            let cfg = config::resolve(a.common.config.as_deref(), o).stage(Stage::Artifact)?;
            commands::attack(&cfg, universal)
        }
        Command::Eval(a) => {
            let mut o = overrides(&a.common).stage(Stage::Evaluation)?;
            o.opt("paths.manifest", a.manifest);
            o.opt("paths.detector", a.detector);
            o.opt("paths.per_image_artifacts", a.per_image);
            o.opt("paths.universal_artifact", a.universal);
            if !a.pairs.is_empty() {
                o.set("eval.pairs", &a.pairs);
            }
            o.opt("eval.n_draws", a.n_draws);
            o.opt("eval.seed", a.seed);
            let cfg = config::resolve(a.common.config.as_deref(), o).stage(Stage::Evaluation)?;
            commands::eval(&cfg)
        }
        Command::Report(a) => {
            let mut o = overrides(&a.common).stage(Stage::Report)?;
            if !a.scores.is_empty() {
                o.set("paths.scores", &a.scores);
            }
            o.opt("report.n_resamples", a.resamples);
            if a.no_figures {
                o.set("report.figures", false);
            }
            let cfg = config::resolve(a.common.config.as_deref(), o).stage(Stage::Report)?;
            commands::report(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
