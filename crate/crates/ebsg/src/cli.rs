//! Command-line surface.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use ebsg_core::synth::Split;
use ebsg_core::training::{Mode, Setting};

#[derive(Debug, Parser)]
#[command(name = "ebsg", version, about = "Energy-based scene graph training on synthetic relational data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ce,
    Ebm,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ce => Mode::Ce,
            ModeArg::Ebm => Mode::Ebm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    Predcls,
    Sgcls,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Predcls => Setting::Predcls,
            SettingArg::Sgcls => Setting::Sgcls,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Generate {
        /// Generator config (JSON); defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a predictor, writing per-epoch checkpoints and a JSON-lines report.
    Train {
        /// Training config (JSON) with a `data` key naming the dataset directory.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the config's epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compute recall metrics for a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Defaults to the setting the checkpoint was trained in.
        #[arg(long, value_enum)]
        setting: Option<SettingArg>,
        #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
        k: Vec<usize>,
        /// Report path; defaults to `eval_<split>_<setting>.json` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Langevin sampler from one record's prediction and dump its energy trajectory.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        record: usize,
        #[arg(long)]
        tau: usize,
        #[arg(long)]
        noise_scale: f64,
        /// Defaults to the checkpoint's sampler step size.
        #[arg(long)]
        step_lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, evaluate and inspect an ebm model for each sampler length.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,20,40")]
        taus: Vec<usize>,
        /// Test record used for the trajectory dumps.
        #[arg(long, default_value_t = 0)]
        record: usize,
    },
    /// Rerun the command recorded in a manifest and compare its outputs.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}
