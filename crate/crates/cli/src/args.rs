use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "rsfme",
    version,
    about = "Hybrid windowed-attention / CNN skin-lesion classifier toolkit"
)]
pub struct Cli {
    /// `key = value` config file; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Global seed (falls back to the config file, then RSFME_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Cap on worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write augmented copies of every original image under `<out>/<class>_aug/`.
    Augment(AugmentArgs),
    /// Print the stratified train/validation/test assignment as CSV.
    Split(SplitArgs),
    /// Train a model variant and write checkpoints plus a CSV log.
    Train(TrainArgs),
    /// Metric report from a confusion-matrix file or a checkpoint.
    Eval(EvalArgs),
    /// Class probabilities for individual images.
    Predict(PredictArgs),
    /// Finite-difference gradient checks of every op and block.
    Gradcheck(GradcheckArgs),
    /// Two-component projection of pooled features as CSV.
    Features(FeaturesArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Jpg,
    Png,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    #[value(name = "swint")]
    Swint,
    #[value(name = "swint+s")]
    SwintS,
    #[value(name = "swint+r")]
    SwintR,
    #[value(name = "rs-fme-swint")]
    Full,
}

impl VariantArg {
    pub fn name(self) -> &'static str {
        match self {
            VariantArg::Swint => "swint",
            VariantArg::SwintS => "swint+s",
            VariantArg::SwintR => "swint+r",
            VariantArg::Full => "rs-fme-swint",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Table2,
    Sec43,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Partition {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root holding one directory per class. Without it a seeded
    /// synthetic set is used.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,

    /// Fraction of each class held out for testing [default: 0.2].
    #[arg(long, value_name = "F")]
    pub test_fraction: Option<f64>,

    /// Fraction of the remainder used for validation [default: 0.2].
    #[arg(long, value_name = "F")]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,

    /// Augmentation rounds, 1 to 20 [default: 20].
    #[arg(long)]
    pub rounds: Option<usize>,

    /// Output root (defaults to the dataset root).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Output image format [default: jpg].
    #[arg(long, value_enum)]
    pub format: Option<Format>,

    /// Axis of the shear transform [default: x].
    #[arg(long, value_enum)]
    pub shear_axis: Option<Axis>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Output CSV (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Model variant [default: rs-fme-swint].
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,

    /// 32×32 inputs on a 4×4 token grid instead of the full 224×224 geometry.
    #[arg(long)]
    pub tiny: bool,

    /// Hyper-parameter profile (table2: α=1e-3, μ=0.9, 10 epochs; sec43: α=1e-4, μ=0.95, 50 epochs).
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,

    /// Epoch count (overrides the profile).
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Minibatch size [default: 16].
    #[arg(long)]
    pub batch: Option<usize>,

    /// Stop after this many epochs; the schedule still spans the full run.
    #[arg(long, value_name = "N")]
    pub stop_after_epoch: Option<usize>,

    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,

    /// Output directory [default: rsfme-run] for best.ckpt, last.ckpt and train_log.csv.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Confusion-matrix text file: class names, then one row of counts per predicted class.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["checkpoint", "data", "partition"])]
    pub matrix: Option<PathBuf>,

    #[arg(long, value_name = "CKPT", required_unless_present = "matrix")]
    pub checkpoint: Option<PathBuf>,

    /// Dataset root (defaults to the one recorded in the checkpoint).
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,

    /// Partition to evaluate [default: test].
    #[arg(long, value_enum)]
    pub partition: Option<Partition>,

    /// Directory for metrics.csv, pr.csv and confusion.txt.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,

    #[arg(required = true, value_name = "IMAGE")]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run on the small check geometries (required; full-size checks are out of reach).
    #[arg(long)]
    pub tiny: bool,

    /// Fraction of the tiny model's parameters checked [default: 0.01].
    #[arg(long, value_name = "F")]
    pub fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,

    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,

    /// Partition to evaluate [default: test].
    #[arg(long, value_enum)]
    pub partition: Option<Partition>,

    /// Output CSV (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}
