use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Format;

/// Detector saturation, TER calibration and higher-order correlations
/// for photon time-tag data.
#[derive(Debug, Parser)]
#[command(name = "terlab", version, about)]
pub struct Cli {
    /// RNG seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Time-tag file format for outputs.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Directory for outputs; created if missing, files are never overwritten.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a source, split it and detect each channel.
    Simulate(SimulateArgs),
    /// Apply a detector model to recorded time tags.
    Detect(DetectArgs),
    /// Split one channel over m outputs.
    Split(SplitArgs),
    /// Extract a TER curve from low-rate waiting times.
    Calibrate(CalibrateArgs),
    /// Correlate two or more channels.
    Correlate(CorrelateArgs),
    /// Predict zero-delay correlations of thermal light after saturation.
    Predict(PredictArgs),
    /// Run rate sweeps and figure presets.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override duration_s.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Override splitter_m.
    #[arg(long)]
    pub m: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DetectorArgs {
    /// Heaviside dead time in seconds.
    #[arg(long)]
    pub dead_time: Option<f64>,
    /// Tabulated TER curve (CSV with header dt_ps,eta).
    #[arg(long)]
    pub ter: Option<PathBuf>,
    /// Use the built-in smooth-recovery curve.
    #[arg(long)]
    pub reference_ter: bool,
    /// Long-time efficiency of a tabulated curve.
    #[arg(long)]
    pub eta_inf: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub intrinsic_efficiency: f64,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Time-tag files (CSV or binary); every channel is detected.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Record duration in seconds (default: latest tag).
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub m: usize,
    /// Channel to split (default: the first in the file).
    #[arg(long)]
    pub channel: Option<u8>,
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub channel: Option<u8>,
    #[arg(long, default_value_t = terlab::calibration::DEFAULT_BIN_PS)]
    pub bin_ps: u64,
    /// Start of the exponential fit window in seconds.
    #[arg(long)]
    pub t_min: Option<f64>,
    #[arg(long)]
    pub no_smooth: bool,
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// Time-tag files; channels are taken in file order.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub order: u32,
    #[arg(long, default_value_t = terlab::correlator::DEFAULT_BIN_PS)]
    pub bin_ps: u64,
    #[arg(long, default_value_t = 10_000)]
    pub max_tau_ps: u64,
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Efficiency curve CSV (header R_per_s,R_prime_per_s,epsilon).
    #[arg(long)]
    pub efficiency: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Mean no-TER rate of the thermal light.
    #[arg(long)]
    pub mean_rate: Option<f64>,
    /// Mean detected rate; the no-TER rate is solved for.
    #[arg(long)]
    pub detected_rate: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub orders: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Detected against incident rate for three sources.
    Fig1b,
    /// TER extraction round trip.
    Fig2a,
    /// Efficiency curves for a Heaviside and a smooth TER.
    Fig2c,
    /// g2, g3, g4 against detected rate.
    Fig3def,
    /// Detector-array sweep.
    Fig4,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Experiment config with an analysis list.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Multiply every Monte Carlo duration (e.g. 0.1 for a quick look).
    #[arg(long)]
    pub scale: Option<f64>,
}
