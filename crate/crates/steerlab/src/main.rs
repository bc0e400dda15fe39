//! Command-line surface: reproducible experiment pipelines from JSON
//! configs. Exit codes: 0 ok, 2 config/user error, 3 missing artifact,
//! 4 numerical divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use steerlab::pipeline::{AssetVariant, GenerateSpec, Pipeline};
use steerlab::train::SteerVariant;
use steerlab::SteerError;

#[derive(Parser)]
#[command(name = "steerlab", about = "Bottleneck-space steering laboratory for toy diffusion models", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    /// Concept + semantic modules (the full method).
    Dual,
    /// Concept module only (ablation).
    ConceptOnly,
    /// Single shared module (ablation).
    Shared,
}

impl VariantArg {
    fn asset(self) -> AssetVariant {
        match self {
            VariantArg::Dual => AssetVariant::Dual,
            VariantArg::ConceptOnly => AssetVariant::ConceptOnly,
            VariantArg::Shared => AssetVariant::Shared,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Frozen base model.
    Base,
    /// Uniform random concept per sample.
    Fair,
    /// One fixed concept (requires --concept).
    Fixed,
    /// Aggregated safety bundle.
    Safety,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base diffusion model on the world's biased dataset.
    Pretrain {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Train steering transformations for a concept (or every concept).
    Steer {
        #[arg(long, short)]
        config: PathBuf,
        /// Concept to steer toward; omit with --all.
        #[arg(long)]
        concept: Option<String>,
        /// Train every sensitive concept of the world's category.
        #[arg(long, conflicts_with = "concept")]
        all: bool,
        /// Train a single shared module on the combined loss.
        #[arg(long, conflicts_with = "concept_only")]
        shared: bool,
        /// Train the concept-alignment module only.
        #[arg(long, alias = "ram-only")]
        concept_only: bool,
    },
    /// Generate samples with the trained transformations.
    Generate {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Concept for --mode fixed.
        #[arg(long)]
        concept: Option<String>,
        /// Which trained transformation set to apply.
        #[arg(long, value_enum, default_value = "dual")]
        variant: VariantArg,
        #[arg(long)]
        n: usize,
        /// Generation seed; defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Audit the generated sample sets and write report files.
    Eval {
        /// Run directory (contains config.json and samples/).
        #[arg(long, short)]
        run: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), SteerError> {
    match cli.command {
        Command::Pretrain { config } => {
            let pipe = Pipeline::from_config_path(&config)?;
            let ckpt = pipe.pretrain()?;
            println!("wrote {}", ckpt.display());
        }
        Command::Steer {
            config,
            concept,
            all,
            shared,
            concept_only,
        } => {
            let pipe = Pipeline::from_config_path(&config)?;
            let variant = if shared {
                SteerVariant::Shared
            } else if concept_only {
                SteerVariant::ConceptOnly
            } else {
                SteerVariant::DualModule
            };
            let written = if all {
                pipe.steer_all(variant)?
            } else {
                let concept = concept.ok_or_else(|| {
                    SteerError::Config("pass --concept <name> or --all".into())
                })?;
                pipe.steer_concept(&concept, variant)?
            };
            for path in written {
                println!("wrote {}", path.display());
            }
        }
        Command::Generate {
            config,
            mode,
            concept,
            variant,
            n,
            seed,
        } => {
            let pipe = Pipeline::from_config_path(&config)?;
            let spec = match mode {
                ModeArg::Base => GenerateSpec::Base,
                ModeArg::Fair => GenerateSpec::Fair(variant.asset()),
                ModeArg::Safety => GenerateSpec::Safety(variant.asset()),
                ModeArg::Fixed => {
                    let concept = concept.ok_or_else(|| {
                        SteerError::Config("--mode fixed requires --concept <name>".into())
                    })?;
                    GenerateSpec::Fixed(concept, variant.asset())
                }
            };
            let path = pipe.generate(&spec, n, seed)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { run } => {
            let pipe = Pipeline::from_run_dir(&run)?;
            let (report, paths) = pipe.evaluate()?;
            for (tag, set) in &report.sets {
                let mut line = format!(
                    "{tag}: n={} deviation_ratio={:.4} fidelity={:.4}",
                    set.n, set.deviation_ratio, set.fidelity.mode_conditional
                );
                if let Some(rate) = set.alignment_rate {
                    line.push_str(&format!(" alignment={rate:.4}"));
                }
                if let Some(rate) = set.safety_rate {
                    line.push_str(&format!(" unsafe_rate={rate:.4}"));
                }
                println!("{line}");
            }
            println!("wrote {}", paths.json.display());
        }
    }
    Ok(())
}

fn exit_code_for(err: &SteerError) -> u8 {
    match err {
        SteerError::MissingArtifact(_) => 3,
        SteerError::NonFinite(_) | SteerError::Diverged { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
