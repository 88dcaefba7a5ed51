//! Command-line front end for `crossformer-core`: run configuration files,
//! binary checkpoints, reference figures and the `crossformer` commands.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use crossformer_core::dpb::PositionKind;
use crossformer_core::model::AttentionMode;
use crossformer_core::BackwardFault;

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod targets;

use checkpoint::CheckpointError;
use config::{parse_variant_name, ConfigError, RunConfig};
use targets::CelKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] crossformer_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    /// A verification command ran and its check did not hold.
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    /// 1 for failed checks and numerical aborts, 2 for bad input.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Model(crossformer_core::Error::NonFinite(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "crossformer", version, about = "CrossFormer accounting, verification and toy training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List the built-in variants with their stage tables.
    Variants {
        /// Also list the small test variant.
        #[arg(long)]
        include_toy: bool,
    },
    /// Count parameters and FLOPs, checked against the published figures.
    Count {
        #[command(flatten)]
        model: ModelArgs,
        /// Print the breakdown as comma-separated values.
        #[arg(long)]
        csv: bool,
    },
    /// Run one forward pass (32-bit) on random images.
    Forward {
        #[command(flatten)]
        model: ModelArgs,
        /// Load weights instead of initializing them.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Finite-difference check of the full model loss (64-bit, toy scale only).
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Images in the checked batch.
        #[arg(long, default_value_t = 2)]
        samples: usize,
        /// Entries checked per parameter tensor (0 = all).
        #[arg(long, default_value_t = 3)]
        max_per_input: usize,
        /// Uniform noise added to the initial weights before checking.
        #[arg(long, default_value_t = 0.1)]
        jitter: f64,
        /// Refuse models larger than this.
        #[arg(long, default_value_t = 2_000_000)]
        max_params: u64,
        /// Swap in a deliberately wrong backward rule.
        #[arg(long, value_enum)]
        corrupt_backward: Option<FaultArg>,
    },
    /// Train on the synthetic dataset and write a checkpoint.
    TrainToy {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        /// Print every n-th step.
        #[arg(long, default_value_t = 1)]
        log_every: usize,
        /// Stop at the first fully correct step.
        #[arg(long)]
        stop_at_full_accuracy: bool,
        /// Checkpoint path; the config is written next to it with a `.cfg`
        /// extension.
        #[arg(long, default_value = "toy.xfmr")]
        out: PathBuf,
    },
    /// Counted MACs and wall time of grouped vs full attention over grid sizes.
    Bench {
        #[arg(long, num_args = 1.., default_values_t = [14usize, 28, 56])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 7)]
        group: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Timed runs per cell; the fastest is reported.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Replace every DPB module of a checkpoint by its bias table.
    BakeDpb {
        checkpoint: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Model selection shared by most commands.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// T, S, B, L or toy; append `-dense` for the dense-prediction grouping.
    #[arg(long, conflicts_with = "config")]
    pub variant: Option<String>,
    /// Run configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub bias: Option<BiasArg>,
    #[arg(long, value_enum)]
    pub attn: Option<AttnArg>,
    /// Embedding kernels: the full cross-scale set, a single 4/2 kernel, or
    /// the two-kernel 4,8/2,4 set.
    #[arg(long, value_enum)]
    pub cel: Option<CelArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input size. Training and gradcheck build the model for it; the other
    /// commands evaluate at it.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    pub size: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BiasArg {
    Ape,
    Rpb,
    Dpb,
    DpbRes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttnArg {
    Lsda,
    SdaOnly,
    PvtLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CelArg {
    Cross,
    Single,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    Softmax,
    Matmul,
}

impl From<FaultArg> for BackwardFault {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::Softmax => BackwardFault::Softmax,
            FaultArg::Matmul => BackwardFault::MatMul,
        }
    }
}

impl ModelArgs {
    pub fn size(&self) -> Option<(usize, usize)> {
        self.size.as_deref().map(|s| (s[0], s[1]))
    }

    /// Config file, else `--variant`, else `fallback`; then the flag
    /// overrides. `--size` is left to the caller.
    pub fn resolve(&self, fallback: &str) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.variant) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, v) => {
                let (v, task) = parse_variant_name(v.as_deref().unwrap_or(fallback))?;
                RunConfig::variant(v, task)
            }
        };
        if let Some(b) = self.bias {
            cfg.model.position = match b {
                BiasArg::Ape => PositionKind::Ape,
                BiasArg::Rpb => PositionKind::Rpb,
                BiasArg::Dpb => PositionKind::Dpb,
                BiasArg::DpbRes => PositionKind::DpbResidual,
            };
        }
        if let Some(a) = self.attn {
            cfg.model.attention = match a {
                AttnArg::Lsda => AttentionMode::Lsda,
                AttnArg::SdaOnly => AttentionMode::SdaOnly,
                AttnArg::PvtLike => AttentionMode::PvtLike,
            };
        }
        if let Some(c) = self.cel {
            let kind = match c {
                CelArg::Cross => CelKind::Cross,
                CelArg::Single => CelKind::Single,
                CelArg::Two => CelKind::TwoKernel,
            };
            let (first, later) = kind.kernels();
            cfg.model = cfg.model.with_cel_kernels(first, later)?;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Like [`resolve`](Self::resolve), but a checkpoint's `.cfg` sidecar
    /// stands in for a missing `--config`/`--variant`.
    pub fn resolve_for_checkpoint(&self, checkpoint: &Path) -> Result<RunConfig> {
        let side = sidecar_path(checkpoint);
        if self.config.is_none() && self.variant.is_none() {
            if !side.exists() {
                return Err(CliError::Usage(format!(
                    "no --config or --variant given and {} does not exist",
                    side.display()
                )));
            }
            let args = ModelArgs {
                config: Some(side),
                ..self.clone()
            };
            return args.resolve("toy");
        }
        self.resolve("toy")
    }
}

/// `run.xfmr` -> `run.cfg`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("cfg")
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    use commands::*;
    match cli.command {
        Command::Variants { include_toy } => cmd_variants(out, include_toy),
        Command::Count { model, csv } => cmd_count(out, &model, csv),
        Command::Forward {
            model,
            checkpoint,
            batch,
        } => cmd_forward(out, &model, checkpoint.as_deref(), batch),
        Command::Gradcheck {
            model,
            tol,
            samples,
            max_per_input,
            jitter,
            max_params,
            corrupt_backward,
        } => cmd_gradcheck(
            out,
            &model,
            &GradcheckArgs {
                tol,
                samples,
                max_per_input: (max_per_input > 0).then_some(max_per_input),
                jitter,
                max_params,
                fault: corrupt_backward.map(Into::into),
            },
        ),
        Command::TrainToy {
            model,
            steps,
            lr,
            samples,
            classes,
            log_every,
            stop_at_full_accuracy,
            out: path,
        } => {
            let mut cfg = model.resolve("toy")?;
            if let Some(s) = model.size() {
                cfg.model.input_size = s;
            }
            let t = &mut cfg.train;
            t.steps = steps.unwrap_or(t.steps);
            t.lr = lr.unwrap_or(t.lr);
            t.samples = samples.unwrap_or(t.samples);
            t.classes = classes.unwrap_or(t.classes);
            t.stop_at_full_accuracy |= stop_at_full_accuracy;
            cmd_train_toy(out, &cfg, log_every.max(1), &path)
        }
        Command::Bench {
            sizes,
            group,
            dim,
            heads,
            seed,
            repeats,
        } => cmd_bench(out, &sizes, group, dim, heads, seed, repeats.max(1)),
        Command::BakeDpb {
            checkpoint,
            model,
            out: path,
        } => cmd_bake_dpb(out, &checkpoint, &model, &path),
    }
}
