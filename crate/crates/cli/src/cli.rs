//! Argument parsing. Every setting flag is optional so that precedence can
//! be resolved as flags > `--config` file > built-in defaults.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use ensdown::data::{PeriodSpec, Season};
use ensdown::evaluation::SpatialWeighting;

use crate::commands::{
    cmd_evaluate, cmd_predict, cmd_synth, cmd_train, EvaluateSettings, PredictSettings, SweepInputs, SynthSettings,
    TrainSettings,
};
use crate::experiment::{cmd_experiment, ExperimentSettings};
use crate::manifest::load_settings;

#[derive(Parser, Debug)]
#[command(name = "ensdown", version, about = "Deep-ensemble statistical downscaling pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic pseudo-reality (coarse predictors + fine predictand)
    Synth(SynthArgs),
    /// Train an ensemble of Gaussian-head CNNs
    Train(TrainArgs),
    /// Predict mean, variance and interval bounds with a trained ensemble
    Predict(PredictArgs),
    /// Score predictions: RMSE, interval coverage, ensemble-size sweep
    Evaluate(EvaluateArgs),
    /// Run the full pipeline over several generator seeds and judge the ensemble
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// JSON settings file (or an earlier run's manifest)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub coarse_height: Option<usize>,
    #[arg(long)]
    pub coarse_width: Option<usize>,
    #[arg(long)]
    pub fine_height: Option<usize>,
    #[arg(long)]
    pub fine_width: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub start_year: Option<i32>,
    #[arg(long)]
    pub end_year: Option<i32>,
    /// Warming per decade after the trend start year
    #[arg(long)]
    pub warming_rate: Option<f64>,
    #[arg(long)]
    pub pattern_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub predictors: PathBuf,
    #[arg(long)]
    pub predictand: PathBuf,
    /// Ensemble output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ensemble size [default: 10]
    #[arg(long)]
    pub members: Option<usize>,
    /// Root seed; member seeds derive from it
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Training years, e.g. 1980-2002
    #[arg(long)]
    pub train_period: Option<PeriodSpec>,
    /// Widths of the three convolutional layers, e.g. 50,25,10
    #[arg(long, value_delimiter = ',')]
    pub conv_channels: Option<Vec<usize>>,
    /// Parallel workers (ENSDOWN_WORKERS takes precedence)
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Ensemble directory written by `train`
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long)]
    pub predictors: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Years to predict, e.g. 2071-2100 [default: whole file]
    #[arg(long)]
    pub period: Option<PeriodSpec>,
    /// all, summer, winter or months like 6+7+8 [default: all]
    #[arg(long)]
    pub season: Option<Season>,
    /// Central interval level [default: 0.95]
    #[arg(long)]
    pub level: Option<f64>,
    /// Aggregate only the first K members [default: all]
    #[arg(long)]
    pub members_used: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Prediction directories (or files) written by `predict`
    #[arg(long, num_args = 1..)]
    pub predictions: Vec<PathBuf>,
    #[arg(long)]
    pub predictand: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated periods [default: 2006-2040,2041-2070,2071-2100]
    #[arg(long, value_delimiter = ',')]
    pub periods: Option<Vec<PeriodSpec>>,
    /// [default: summer]
    #[arg(long)]
    pub season: Option<Season>,
    /// Score every ensemble size 1..=M (needs --ensemble and --predictors)
    #[arg(long)]
    pub sweep: bool,
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    #[arg(long)]
    pub predictors: Option<PathBuf>,
    /// Interval level of the sweep [default: 0.95]
    #[arg(long)]
    pub level: Option<f64>,
    /// uniform or cos-latitude (adds weighted means to the summary)
    #[arg(long)]
    pub weighting: Option<SpatialWeighting>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generator seed of the first repeat
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of generator seeds [default: 1]
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Ensemble size [default: 10]
    #[arg(long)]
    pub members: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl SynthArgs {
    pub fn resolve(&self) -> Result<SynthSettings> {
        let mut s: SynthSettings = load_settings(self.config.as_deref())?;
        set(&mut s.seed, self.seed);
        let c = &mut s.synth;
        set(&mut c.coarse_height, self.coarse_height);
        set(&mut c.coarse_width, self.coarse_width);
        set(&mut c.fine_height, self.fine_height);
        set(&mut c.fine_width, self.fine_width);
        set(&mut c.channels, self.channels);
        set(&mut c.start_year, self.start_year);
        set(&mut c.end_year, self.end_year);
        set(&mut c.warming_rate, self.warming_rate);
        set(&mut c.pattern_seed, self.pattern_seed);
        Ok(s)
    }
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<TrainSettings> {
        let mut s: TrainSettings = load_settings(self.config.as_deref())?;
        set(&mut s.seed, self.seed);
        set(&mut s.members, self.members);
        set(&mut s.train_period, self.train_period);
        set(&mut s.conv_channels, self.conv_channels.clone());
        if self.workers.is_some() {
            s.workers = self.workers;
        }
        let t = &mut s.train;
        set(&mut t.learning_rate, self.learning_rate);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.max_epochs, self.max_epochs);
        set(&mut t.patience, self.patience);
        set(&mut t.val_fraction, self.val_fraction);
        Ok(s)
    }
}

impl PredictArgs {
    pub fn resolve(&self) -> Result<PredictSettings> {
        let mut s: PredictSettings = load_settings(self.config.as_deref())?;
        if self.period.is_some() {
            s.period = self.period;
        }
        set(&mut s.season, self.season);
        set(&mut s.level, self.level);
        if self.members_used.is_some() {
            s.members_used = self.members_used;
        }
        Ok(s)
    }
}

impl EvaluateArgs {
    pub fn resolve(&self) -> Result<EvaluateSettings> {
        let mut s: EvaluateSettings = load_settings(self.config.as_deref())?;
        set(&mut s.periods, self.periods.clone());
        set(&mut s.season, self.season);
        set(&mut s.level, self.level);
        set(&mut s.weighting, self.weighting);
        s.sweep |= self.sweep;
        Ok(s)
    }
}

impl ExperimentArgs {
    pub fn resolve(&self) -> Result<ExperimentSettings> {
        let mut s: ExperimentSettings = load_settings(self.config.as_deref())?;
        set(&mut s.seed, self.seed);
        set(&mut s.repeats, self.repeats);
        set(&mut s.members, self.members);
        set(&mut s.train.max_epochs, self.max_epochs);
        set(&mut s.train.patience, self.patience);
        set(&mut s.train.learning_rate, self.learning_rate);
        if self.workers.is_some() {
            s.workers = self.workers;
        }
        Ok(s)
    }
}

/// Runs one parsed command line; returns the output directory.
pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Synth(a) => {
            cmd_synth(&a.resolve()?, &a.out)?;
            Ok(a.out)
        }
        Command::Train(a) => {
            cmd_train(&a.resolve()?, &a.predictors, &a.predictand, &a.out)?;
            Ok(a.out)
        }
        Command::Predict(a) => {
            cmd_predict(&a.resolve()?, &a.ensemble, &a.predictors, &a.out)?;
            Ok(a.out)
        }
        Command::Evaluate(a) => {
            let settings = a.resolve()?;
            let sweep = match (&a.ensemble, &a.predictors) {
                (Some(ensemble), Some(predictors)) => Some(SweepInputs { ensemble, predictors }),
                _ => None,
            };
            cmd_evaluate(&settings, &a.predictions, &a.predictand, sweep, &a.out)?;
            Ok(a.out)
        }
        Command::Experiment(a) => {
            let out = cmd_experiment(&a.resolve()?, &a.out)?;
            let m = &out.verdict.median;
            log::info!("median verdict over seeds {:?}: {}", m.seeds, if m.pass { "pass" } else { "fail" });
            Ok(a.out)
        }
    }
}
