//! The pipeline stages behind the `synth`, `train`, `predict` and `evaluate`
//! subcommands. Each takes fully resolved settings, writes one output
//! directory and returns its manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use ensdown::data::{
    align_time, generate_pseudo_reality, load_grid, save_grid, DatasetSplit, GridField, PeriodSpec, Season,
    SynthConfig,
};
use ensdown::ensemble::{load_ensemble, predictive_interval, resolve_workers, save_ensemble, train_ensemble, z_for_level};
use ensdown::evaluation::{
    coverage_map_report, coverage_maps_csv, evaluate_interval, reports_csv, summary_rows, sweep_ensemble_size,
    CoverageMapReport, EvalReport, SpatialWeighting, SummaryRow, Sweep,
};
use ensdown::fsutil::{atomic_write, read_file};
use ensdown::model::DeepEsdConfig;
use ensdown::training::TrainConfig;

use crate::manifest::{RunManifest, Staged, MANIFEST_FILE};

pub const PREDICTORS_FILE: &str = "predictors.grid";
pub const PREDICTAND_FILE: &str = "predictand.grid";
pub const GENERATOR_FILE: &str = "generator.json";
pub const TARGET_GRID_FILE: &str = "grid.json";
pub const PREDICTION_FILE: &str = "prediction.grid";
pub const REPORT_FILE: &str = "report.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const COVERAGE_MAPS_FILE: &str = "coverage_maps.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Worker-count override for member training.
pub const WORKERS_ENV: &str = "ENSDOWN_WORKERS";

const PREDICTION_VARIABLES: [&str; 4] = ["mu", "sigma2", "lower", "upper"];

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(atomic_write(path, &bytes)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub seed: u64,
    pub synth: SynthConfig,
}

pub fn cmd_synth(settings: &SynthSettings, out: &Path) -> Result<RunManifest> {
    settings.synth.validate()?;
    let staged = Staged::new(out)?;
    let reality = generate_pseudo_reality(&settings.synth, settings.seed)?;
    save_grid(&reality.predictors, &staged.path().join(PREDICTORS_FILE))?;
    save_grid(&reality.predictand, &staged.path().join(PREDICTAND_FILE))?;
    write_json(
        &staged.path().join(GENERATOR_FILE),
        &reality.manifest(&settings.synth, settings.seed),
    )?;

    let mut manifest = RunManifest::new("synth", settings)?;
    manifest.seeds.insert("generator".into(), settings.seed);
    manifest.seeds.insert("pattern".into(), settings.synth.pattern_seed);
    for (role, file) in [
        ("predictors", PREDICTORS_FILE),
        ("predictand", PREDICTAND_FILE),
        ("generator", GENERATOR_FILE),
    ] {
        manifest.outputs.insert(role.into(), file.into());
    }
    staged.commit(manifest)
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// Root seed; member seeds are derived from it.
    pub seed: u64,
    pub members: usize,
    pub train_period: PeriodSpec,
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub sigma_floor: f64,
    /// Parallel training workers; `None` means `min(members, cores)`.
    /// Does not affect the result.
    pub workers: Option<usize>,
    pub train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let model = DeepEsdConfig::new(1, 1, 1, 1);
        TrainSettings {
            seed: 0,
            members: 10,
            train_period: DatasetSplit::default().train,
            conv_channels: model.conv_channels,
            kernel_size: model.kernel_size,
            sigma_floor: model.sigma_floor,
            workers: None,
            train: TrainConfig::default(),
        }
    }
}

/// Coordinates and naming of the fine grid an ensemble predicts on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetGrid {
    pub variable: String,
    pub unit: String,
    pub lat: Vec<f64>,
    pub lon: Vec<f64>,
}

/// `ENSDOWN_WORKERS`, when set, wins over the configured worker count.
pub fn workers_from_env(configured: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .with_context(|| format!("{WORKERS_ENV}={v:?} is not a positive integer"))?;
            Ok(Some(n))
        }
        Err(_) => Ok(configured),
    }
}

pub fn cmd_train(settings: &TrainSettings, predictors: &Path, predictand: &Path, out: &Path) -> Result<RunManifest> {
    ensure!(settings.members >= 1, "--members must be at least 1");
    let x = load_grid(predictors)?;
    let y = load_grid(predictand)?;
    ensure!(
        y.n_channels() == 1,
        "predictand {} has {} channels, expected 1",
        predictand.display(),
        y.n_channels()
    );
    let period = settings.train_period;
    let (x, y) = align_time(
        &x.select_period(&period).context("selecting the training period of the predictors")?,
        &y.select_period(&period).context("selecting the training period of the predictand")?,
    )?;
    let (h, w) = x.grid_shape();
    let model_config = DeepEsdConfig {
        conv_channels: settings.conv_channels.clone(),
        kernel_size: settings.kernel_size,
        sigma_floor: settings.sigma_floor,
        ..DeepEsdConfig::new(x.n_channels(), h, w, y.n_points())
    };
    model_config.validate()?;
    let train_config = TrainConfig {
        seed: settings.seed,
        ..settings.train.clone()
    };
    train_config.validate()?;
    let workers = resolve_workers(settings.members, workers_from_env(settings.workers)?);
    log::info!(
        "training {} members on {} days ({period}) with {workers} workers",
        settings.members,
        x.n_time()
    );

    let staged = Staged::new(out)?;
    let ensemble = train_ensemble(&x, &y, &model_config, &train_config, settings.members, settings.seed, workers)?;
    save_ensemble(&ensemble, staged.path())?;
    write_json(
        &staged.path().join(TARGET_GRID_FILE),
        &TargetGrid {
            variable: y.variables()[0].clone(),
            unit: y.units()[0].clone(),
            lat: y.lat().to_vec(),
            lon: y.lon().to_vec(),
        },
    )?;

    let resolved = TrainSettings {
        workers: Some(workers),
        train: train_config,
        ..settings.clone()
    };
    let mut manifest = RunManifest::new("train", &resolved)?;
    manifest.seeds.insert("root".into(), settings.seed);
    for (i, s) in ensemble.member_seeds.iter().enumerate() {
        manifest.seeds.insert(format!("member_{i:02}"), *s);
    }
    manifest.inputs.insert("predictors".into(), predictors.to_path_buf());
    manifest.inputs.insert("predictand".into(), predictand.to_path_buf());
    manifest
        .outputs
        .insert("ensemble".into(), ensdown::ensemble::MANIFEST_FILE.into());
    manifest.outputs.insert("grid".into(), TARGET_GRID_FILE.into());
    staged.commit(manifest)
}

// ---------------------------------------------------------------- predict

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSettings {
    /// Years to predict; the whole predictor file when absent.
    pub period: Option<PeriodSpec>,
    pub season: Season,
    pub level: f64,
    /// Aggregate only the first members; all when absent.
    pub members_used: Option<usize>,
}

impl Default for PredictSettings {
    fn default() -> Self {
        PredictSettings {
            period: None,
            season: Season::all(),
            level: 0.95,
            members_used: None,
        }
    }
}

pub fn cmd_predict(settings: &PredictSettings, ensemble_dir: &Path, predictors: &Path, out: &Path) -> Result<RunManifest> {
    z_for_level(settings.level)?;
    let ensemble = load_ensemble(ensemble_dir).with_context(|| format!("loading ensemble {}", ensemble_dir.display()))?;
    let grid: TargetGrid = read_json(&ensemble_dir.join(TARGET_GRID_FILE))?;
    let k = settings.members_used.unwrap_or(ensemble.len());
    ensure!(
        (1..=ensemble.len()).contains(&k),
        "--members-used {k} not in 1..={}",
        ensemble.len()
    );
    let mut x = load_grid(predictors)?;
    if let Some(p) = settings.period {
        x = x.select_period(&p)?;
    }
    let x = x.filter_season(settings.season)?;
    let pred = ensemble.predict(&x, Some(k))?;
    let (lower, upper) = predictive_interval(&pred.mu_star, &pred.sigma2_star, settings.level)?;
    let sq_unit = format!("{}^2", grid.unit);
    let units = [grid.unit.as_str(), sq_unit.as_str(), grid.unit.as_str(), grid.unit.as_str()];
    let channels = [&pred.mu_star, &pred.sigma2_star, &lower, &upper]
        .into_iter()
        .zip(PREDICTION_VARIABLES.iter().zip(units))
        .map(|(m, (var, unit))| GridField::from_matrix(m.view(), var, unit, &grid.lat, &grid.lon, x.time().to_vec()))
        .collect::<ensdown::Result<Vec<_>>>()?;
    let field = GridField::stack_channels(&channels)?;

    let staged = Staged::new(out)?;
    save_grid(&field, &staged.path().join(PREDICTION_FILE))?;
    let resolved = PredictSettings {
        members_used: Some(k),
        ..settings.clone()
    };
    let mut manifest = RunManifest::new("predict", &resolved)?;
    manifest.seeds.insert("root".into(), ensemble.root_seed);
    manifest.inputs.insert("ensemble".into(), ensemble_dir.to_path_buf());
    manifest.inputs.insert("predictors".into(), predictors.to_path_buf());
    manifest.outputs.insert("prediction".into(), PREDICTION_FILE.into());
    staged.commit(manifest)
}

/// A prediction file with the settings it was made with.
pub struct LoadedPrediction {
    pub path: PathBuf,
    pub settings: PredictSettings,
    pub field: GridField,
}

/// Accepts either a `predict` output directory or the prediction file in it.
pub fn load_prediction(path: &Path) -> Result<LoadedPrediction> {
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(PREDICTION_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let manifest = RunManifest::load(&dir)
        .with_context(|| format!("prediction {} has no readable {MANIFEST_FILE} next to it", file.display()))?;
    ensure!(
        manifest.command == "predict",
        "{} was written by '{}', not 'predict'",
        dir.display(),
        manifest.command
    );
    let settings: PredictSettings = manifest.settings()?;
    let field = load_grid(&file)?;
    ensure!(
        field.variables() == PREDICTION_VARIABLES,
        "{} holds {:?}, expected channels {:?}",
        file.display(),
        field.variables(),
        PREDICTION_VARIABLES
    );
    Ok(LoadedPrediction {
        path: file,
        settings,
        field,
    })
}

// ---------------------------------------------------------------- evaluate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSettings {
    pub periods: Vec<PeriodSpec>,
    pub season: Season,
    /// Also score every ensemble size 1..=M (needs the ensemble and predictors).
    pub sweep: bool,
    /// Interval level for the sweep; predictions carry their own.
    pub level: f64,
    pub weighting: SpatialWeighting,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        EvaluateSettings {
            periods: DatasetSplit::default().eval,
            season: Season::summer(),
            sweep: false,
            level: 0.95,
            weighting: SpatialWeighting::Uniform,
        }
    }
}

pub struct SweepInputs<'a> {
    pub ensemble: &'a Path,
    pub predictors: &'a Path,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageMapSummary {
    pub period: String,
    pub season: String,
    pub single_m: usize,
    pub ensemble_m: usize,
    pub single_mean: f64,
    pub ensemble_mean: f64,
    pub difference_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub season: String,
    pub periods: Vec<String>,
    pub reports: Vec<SummaryRow>,
    pub sweep: Vec<SummaryRow>,
    pub coverage_maps: Vec<CoverageMapSummary>,
    /// Largest `RMSE(μ*) − mean member RMSE` over gridpoints, periods and
    /// ensemble sizes of the sweep; ≤ 0 up to rounding.
    pub max_convexity_gap: Option<f64>,
}

pub struct EvaluateOutput {
    pub reports: Vec<EvalReport>,
    pub sweep: Option<Sweep>,
    pub coverage_maps: Vec<CoverageMapReport>,
    pub summary: EvaluationSummary,
    pub manifest: RunManifest,
}

/// Single-model vs largest-ensemble coverage maps for every period that has both.
fn pair_maps(reports: &[EvalReport], periods: &[PeriodSpec]) -> Result<Vec<CoverageMapReport>> {
    let mut maps = Vec::new();
    for p in periods {
        let same = |r: &&EvalReport| r.period.start_year == p.start_year && r.period.end_year == p.end_year;
        let single = reports.iter().filter(same).find(|r| r.m == 1);
        let largest = reports.iter().filter(same).filter(|r| r.m > 1).max_by_key(|r| r.m);
        if let (Some(s), Some(e)) = (single, largest) {
            maps.push(coverage_map_report(s, e)?);
        }
    }
    Ok(maps)
}

pub fn cmd_evaluate(
    settings: &EvaluateSettings,
    predictions: &[PathBuf],
    predictand: &Path,
    sweep_inputs: Option<SweepInputs<'_>>,
    out: &Path,
) -> Result<EvaluateOutput> {
    ensure!(!settings.periods.is_empty(), "no evaluation periods given");
    ensure!(
        !predictions.is_empty() || settings.sweep,
        "nothing to evaluate: give prediction files or --sweep"
    );
    let y = load_grid(predictand)?;
    ensure!(y.n_channels() == 1, "predictand must have exactly one channel");
    let season = settings.season;

    let mut reports = Vec::new();
    for path in predictions {
        let pred = load_prediction(path)?;
        let covered = pred.settings.season.months();
        ensure!(
            season.months().iter().all(|m| covered.contains(m)),
            "{} only covers season {}, cannot score season {}",
            pred.path.display(),
            pred.settings.season,
            season
        );
        ensure!(
            pred.field.lat() == y.lat() && pred.field.lon() == y.lon(),
            "{} is not on the predictand grid",
            pred.path.display()
        );
        let (first, last) = pred.field.year_range();
        for period in &settings.periods {
            if period.start_year < first || period.end_year > last {
                log::warn!("{} does not cover {period}; skipped", pred.path.display());
                continue;
            }
            let p = period.with_season(season);
            let (pf, yf) = align_time(&pred.field.select_period(&p)?, &y.select_period(&p)?)
                .with_context(|| format!("aligning {} with the predictand", pred.path.display()))?;
            let target = yf.channel_matrix(0)?;
            let ch = |c| pf.channel_matrix(c);
            reports.push(evaluate_interval(
                ch(0)?.view(),
                ch(2)?.view(),
                ch(3)?.view(),
                target.view(),
                pred.settings.level,
                *period,
                season,
                pred.settings.members_used.unwrap_or(0),
            )?);
        }
    }
    if !predictions.is_empty() && reports.is_empty() {
        bail!("no prediction covers any of the requested periods");
    }

    let sweep = match (&sweep_inputs, settings.sweep) {
        (Some(s), true) => {
            let ensemble = load_ensemble(s.ensemble)?;
            let x = load_grid(s.predictors)?;
            Some(sweep_ensemble_size(&ensemble, &x, &y, &settings.periods, season, settings.level)?)
        }
        (None, true) => bail!("--sweep needs --ensemble and --predictors"),
        _ => None,
    };

    let mut coverage_maps = pair_maps(&reports, &settings.periods)?;
    if coverage_maps.is_empty() {
        if let Some(s) = &sweep {
            coverage_maps = pair_maps(&s.reports, &settings.periods)?;
        }
    }

    let (lat, lon) = (y.lat(), y.lon());
    let summary = EvaluationSummary {
        season: season.label(),
        periods: settings.periods.iter().map(PeriodSpec::label).collect(),
        reports: summary_rows(&reports, settings.weighting, lat, lon.len()),
        sweep: sweep
            .as_ref()
            .map(|s| summary_rows(&s.reports, settings.weighting, lat, lon.len()))
            .unwrap_or_default(),
        coverage_maps: coverage_maps
            .iter()
            .map(|c| CoverageMapSummary {
                period: c.period.label(),
                season: c.season.label(),
                single_m: c.single_m,
                ensemble_m: c.ensemble_m,
                single_mean: c.single_mean,
                ensemble_mean: c.ensemble_mean,
                difference_mean: c.difference_mean,
            })
            .collect(),
        max_convexity_gap: sweep.as_ref().map(|s| s.max_convexity_gap),
    };

    let staged = Staged::new(out)?;
    atomic_write(&staged.path().join(REPORT_FILE), reports_csv(&reports, lat, lon)?.as_bytes())?;
    atomic_write(
        &staged.path().join(COVERAGE_MAPS_FILE),
        coverage_maps_csv(&coverage_maps, lat, lon)?.as_bytes(),
    )?;
    if let Some(s) = &sweep {
        atomic_write(&staged.path().join(SWEEP_FILE), reports_csv(&s.reports, lat, lon)?.as_bytes())?;
    }
    write_json(&staged.path().join(SUMMARY_FILE), &summary)?;

    let mut manifest = RunManifest::new("evaluate", settings)?;
    for (i, p) in predictions.iter().enumerate() {
        manifest.inputs.insert(format!("prediction_{i:02}"), p.clone());
    }
    manifest.inputs.insert("predictand".into(), predictand.to_path_buf());
    if let Some(s) = &sweep_inputs {
        manifest.inputs.insert("ensemble".into(), s.ensemble.to_path_buf());
        manifest.inputs.insert("predictors".into(), s.predictors.to_path_buf());
    }
    manifest.outputs.insert("report".into(), REPORT_FILE.into());
    manifest.outputs.insert("coverage_maps".into(), COVERAGE_MAPS_FILE.into());
    manifest.outputs.insert("summary".into(), SUMMARY_FILE.into());
    if sweep.is_some() {
        manifest.outputs.insert("sweep".into(), SWEEP_FILE.into());
    }
    let manifest = staged.commit(manifest)?;
    Ok(EvaluateOutput {
        reports,
        sweep,
        coverage_maps,
        summary,
        manifest,
    })
}
