use std::path::PathBuf;

use brnlab::inference::Preset;
use brnlab::model::{Ablation, ModelPreset};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "brnlab", version, about = "Temporal action detection lab: synthetic data, training, detection and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a detector on a generated dataset.
    Train(TrainArgs),
    /// Run a trained checkpoint over a dataset split and write detections.
    Detect(DetectArgs),
    /// Score detections against annotations.
    Eval(EvalArgs),
    /// Compare baseline and scale-time detections on neighbouring instances.
    #[command(name = "diagnose-vbp")]
    DiagnoseVbp(DiagnoseArgs),
    /// Write CSV data and an SVG rendering for one figure.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// JSON synthetic-data config; missing keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; missing keys keep the desk defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub model: Option<ModelPreset>,
    /// Repeatable.
    #[arg(long)]
    pub ablate: Vec<Ablation>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    All,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Checkpoint directory (manifest.json + params.bin).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "anet")]
    pub preset: Preset,
    /// JSON inference config applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitName,
    /// Detection JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Restrict the annotations to one split of this split file.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val", requires = "split_file")]
    pub split: SplitName,
    #[arg(long, default_value = "anet")]
    pub preset: Preset,
    /// Report JSON; the text table goes next to it with a `.txt` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Detections of the baseline detector.
    #[arg(long)]
    pub baseline: PathBuf,
    /// Detections of the scale-time detector.
    #[arg(long)]
    pub brn: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val", requires = "split_file")]
    pub split: SplitName,
    #[arg(long, default_value = "anet")]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    SelectionWeights,
    DetectionsTimeline,
    LossCurve,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    /// Checkpoint for `selection-weights`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset for `selection-weights`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Video to plot; defaults to the first validation video.
    #[arg(long)]
    pub video: Option<String>,
    /// Which scale-time block to read weights from; defaults to the last.
    #[arg(long)]
    pub block: Option<usize>,
    /// Detection files for `detections-timeline` (repeatable).
    #[arg(long)]
    pub detections: Vec<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Detections per source drawn on the timeline.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// `loss_log.csv` or a run directory for `loss-curve`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Output prefix; `.csv` and `.svg` are appended.
    #[arg(long)]
    pub out: PathBuf,
}
