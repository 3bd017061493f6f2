//! `experiment`: synth → train → predict → evaluate over several generator
//! seeds, with a verdict on whether the ensemble beats a single member.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};

use ensdown::data::{DatasetSplit, PeriodSpec, Season, SynthConfig};
use ensdown::evaluation::EvalReport;
use ensdown::model::DeepEsdConfig;
use ensdown::training::TrainConfig;

use crate::commands::{
    cmd_evaluate, cmd_predict, cmd_synth, cmd_train, EvaluateOutput, EvaluateSettings, PredictSettings,
    SweepInputs, SynthSettings, TrainSettings, PREDICTAND_FILE, PREDICTORS_FILE,
};
use crate::manifest::{RunManifest, Staged};

pub const VERDICT_FILE: &str = "verdict.json";

/// Tolerance for the per-gridpoint `RMSE(μ*) ≤ mean member RMSE` check.
pub const CONVEXITY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    /// Generator seed of the first repeat; repeat `r` uses `seed + r`.
    pub seed: u64,
    pub repeats: usize,
    pub members: usize,
    pub season: Season,
    pub level: f64,
    pub split: DatasetSplit,
    pub synth: SynthConfig,
    pub conv_channels: Vec<usize>,
    pub train: TrainConfig,
    pub workers: Option<usize>,
}

impl Default for ExperimentSettings {
    /// Sized to finish five repeats of a ten-member ensemble on one CPU
    /// core in well under three hours.
    fn default() -> Self {
        ExperimentSettings {
            seed: 0,
            repeats: 1,
            members: 10,
            season: Season::summer(),
            level: 0.95,
            split: DatasetSplit::default(),
            synth: SynthConfig {
                coarse_height: 6,
                coarse_width: 6,
                fine_height: 12,
                fine_width: 12,
                ..SynthConfig::default()
            },
            conv_channels: DeepEsdConfig::new(1, 1, 1, 1).conv_channels,
            train: TrainConfig {
                learning_rate: 1e-3,
                max_epochs: 20,
                patience: 5,
                ..TrainConfig::default()
            },
            workers: None,
        }
    }
}

/// Spatial-mean scores per period label.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse_single: BTreeMap<String, f64>,
    pub rmse_ensemble: BTreeMap<String, f64>,
    /// `rmse_single − rmse_ensemble`; positive when the ensemble is better.
    pub rmse_gain: BTreeMap<String, f64>,
    pub coverage_single: BTreeMap<String, f64>,
    pub coverage_ensemble: BTreeMap<String, f64>,
    /// `coverage_ensemble − coverage_single`.
    pub coverage_gain: BTreeMap<String, f64>,
    /// Coverage of the first two members.
    pub coverage_pair: BTreeMap<String, f64>,
    /// Mean over gridpoints of the per-gridpoint coverage difference.
    pub coverage_map_difference: BTreeMap<String, f64>,
    pub max_convexity_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checks {
    /// Ensemble coverage ≥ single-model coverage in every period.
    pub coverage_not_worse: bool,
    /// Coverage gain in the last period > gain in the first.
    pub coverage_gain_grows: bool,
    /// Ensemble RMSE ≤ single-model RMSE in every period.
    pub rmse_not_worse: bool,
    /// Mean per-gridpoint coverage difference in the last period > 0.
    pub coverage_map_difference_positive: bool,
    /// Full ensemble covers at least as well as two members in the last period.
    pub ensemble_not_worse_than_pair: bool,
    /// Per-gridpoint RMSE of the ensemble mean never exceeds the mean member RMSE.
    pub convexity: bool,
}

impl Checks {
    pub fn all(&self) -> bool {
        self.coverage_not_worse
            && self.coverage_gain_grows
            && self.rmse_not_worse
            && self.coverage_map_difference_positive
            && self.ensemble_not_worse_than_pair
            && self.convexity
    }

    pub fn evaluate(metrics: &Metrics, periods: &[PeriodSpec]) -> Self {
        let first = periods.first().map(PeriodSpec::label).unwrap_or_default();
        let last = periods.last().map(PeriodSpec::label).unwrap_or_default();
        let get = |m: &BTreeMap<String, f64>, k: &str| m.get(k).copied().unwrap_or(f64::NAN);
        let every = |m: &BTreeMap<String, f64>| {
            periods.iter().all(|p| get(m, &p.label()) >= 0.0)
        };
        Checks {
            coverage_not_worse: every(&metrics.coverage_gain),
            coverage_gain_grows: get(&metrics.coverage_gain, &last) > get(&metrics.coverage_gain, &first),
            rmse_not_worse: every(&metrics.rmse_gain),
            coverage_map_difference_positive: get(&metrics.coverage_map_difference, &last) > 0.0,
            ensemble_not_worse_than_pair: get(&metrics.coverage_ensemble, &last) >= get(&metrics.coverage_pair, &last),
            convexity: metrics.max_convexity_gap <= CONVEXITY_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub checks: Checks,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianSummary {
    pub seeds: Vec<u64>,
    /// Per-period medians over repeats; `max_convexity_gap` is the maximum.
    #[serde(flatten)]
    pub metrics: Metrics,
    pub checks: Checks,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentVerdict {
    pub members: usize,
    pub season: String,
    pub periods: Vec<String>,
    pub verdicts: Vec<Verdict>,
    pub median: MedianSummary,
}

pub struct ExperimentOutput {
    pub verdict: ExperimentVerdict,
    pub manifest: RunManifest,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn find(reports: &[EvalReport], period: &PeriodSpec, m: usize) -> Result<EvalReport> {
    reports
        .iter()
        .find(|r| r.period.start_year == period.start_year && r.period.end_year == period.end_year && r.m == m)
        .cloned()
        .with_context(|| format!("no M={m} report for {period}"))
}

/// Scores of one repeat from its evaluation output.
pub fn metrics_from(eval: &EvaluateOutput, periods: &[PeriodSpec], members: usize) -> Result<Metrics> {
    let sweep = eval.sweep.as_ref().context("experiment evaluation ran without a sweep")?;
    let mut m = Metrics {
        max_convexity_gap: sweep.max_convexity_gap,
        ..Metrics::default()
    };
    for p in periods {
        let key = p.label();
        let single = find(&eval.reports, p, 1)?;
        let ens = find(&eval.reports, p, members)?;
        let pair = find(&sweep.reports, p, 2.min(members))?;
        let map = eval
            .coverage_maps
            .iter()
            .find(|c| c.period.label() == key)
            .with_context(|| format!("no coverage map for {p}"))?;
        m.rmse_single.insert(key.clone(), single.rmse_mean);
        m.rmse_ensemble.insert(key.clone(), ens.rmse_mean);
        m.rmse_gain.insert(key.clone(), single.rmse_mean - ens.rmse_mean);
        m.coverage_single.insert(key.clone(), single.coverage_mean);
        m.coverage_ensemble.insert(key.clone(), ens.coverage_mean);
        m.coverage_gain.insert(key.clone(), ens.coverage_mean - single.coverage_mean);
        m.coverage_pair.insert(key.clone(), pair.coverage_mean);
        m.coverage_map_difference.insert(key, map.difference_mean);
    }
    Ok(m)
}

/// Per-key medians; the convexity gap is the worst case over repeats.
pub fn median_metrics(all: &[&Metrics]) -> Metrics {
    let med = |pick: fn(&Metrics) -> &BTreeMap<String, f64>| -> BTreeMap<String, f64> {
        let Some(first) = all.first() else {
            return BTreeMap::new();
        };
        pick(first)
            .keys()
            .map(|k| {
                let vals: Vec<f64> = all.iter().map(|m| pick(m).get(k).copied().unwrap_or(f64::NAN)).collect();
                (k.clone(), median(&vals))
            })
            .collect()
    };
    Metrics {
        rmse_single: med(|m| &m.rmse_single),
        rmse_ensemble: med(|m| &m.rmse_ensemble),
        rmse_gain: med(|m| &m.rmse_gain),
        coverage_single: med(|m| &m.coverage_single),
        coverage_ensemble: med(|m| &m.coverage_ensemble),
        coverage_gain: med(|m| &m.coverage_gain),
        coverage_pair: med(|m| &m.coverage_pair),
        coverage_map_difference: med(|m| &m.coverage_map_difference),
        max_convexity_gap: all.iter().map(|m| m.max_convexity_gap).fold(f64::NEG_INFINITY, f64::max),
    }
}

fn run_repeat(settings: &ExperimentSettings, seed: u64, dir: &Path) -> Result<Verdict> {
    let stage = |name: &str| format!("stage {name} failed (generator seed {seed})");
    let periods = &settings.split.eval;
    let data = dir.join("data");
    cmd_synth(
        &SynthSettings {
            seed,
            synth: settings.synth.clone(),
        },
        &data,
    )
    .with_context(|| stage("synth"))?;
    let (predictors, predictand) = (data.join(PREDICTORS_FILE), data.join(PREDICTAND_FILE));

    let ensemble = dir.join("ensemble");
    let train = TrainSettings {
        seed,
        members: settings.members,
        train_period: settings.split.train,
        conv_channels: settings.conv_channels.clone(),
        workers: settings.workers,
        train: settings.train.clone(),
        ..TrainSettings::default()
    };
    cmd_train(&train, &predictors, &predictand, &ensemble).with_context(|| stage("train"))?;

    let span = PeriodSpec::new(
        periods.iter().map(|p| p.start_year).min().context("no evaluation periods")?,
        periods.iter().map(|p| p.end_year).max().context("no evaluation periods")?,
    )?;
    let mut prediction_dirs = Vec::new();
    for k in [1, settings.members] {
        let out = dir.join(format!("predict_m{k:02}"));
        let predict = PredictSettings {
            period: Some(span),
            season: settings.season,
            level: settings.level,
            members_used: Some(k),
        };
        cmd_predict(&predict, &ensemble, &predictors, &out).with_context(|| stage("predict"))?;
        prediction_dirs.push(out);
    }

    let evaluate = EvaluateSettings {
        periods: periods.clone(),
        season: settings.season,
        sweep: true,
        level: settings.level,
        ..EvaluateSettings::default()
    };
    let eval = cmd_evaluate(
        &evaluate,
        &prediction_dirs,
        &predictand,
        Some(SweepInputs {
            ensemble: &ensemble,
            predictors: &predictors,
        }),
        &dir.join("evaluate"),
    )
    .with_context(|| stage("evaluate"))?;

    let metrics = metrics_from(&eval, periods, settings.members)?;
    let checks = Checks::evaluate(&metrics, periods);
    let verdict = Verdict {
        seed,
        pass: checks.all(),
        metrics,
        checks,
    };
    let mut bytes = serde_json::to_vec_pretty(&verdict)?;
    bytes.push(b'\n');
    ensdown::fsutil::atomic_write(&dir.join(VERDICT_FILE), &bytes)?;
    Ok(verdict)
}

pub fn cmd_experiment(settings: &ExperimentSettings, out: &Path) -> Result<ExperimentOutput> {
    ensure!(settings.repeats >= 1, "--repeats must be at least 1");
    ensure!(settings.members >= 2, "the experiment compares M=1 with M>=2 members");
    ensure!(!settings.split.eval.is_empty(), "no evaluation periods configured");
    settings.split.validate()?;
    settings.synth.validate()?;
    settings.train.validate()?;

    let staged = Staged::new(out)?;
    let mut verdicts = Vec::with_capacity(settings.repeats);
    for r in 0..settings.repeats {
        let seed = settings.seed.wrapping_add(r as u64);
        log::info!("repeat {}/{} (generator seed {seed})", r + 1, settings.repeats);
        let v = run_repeat(settings, seed, &staged.path().join(format!("repeat_{r:02}")))?;
        log::info!("repeat {} verdict: {}", r + 1, if v.pass { "pass" } else { "fail" });
        verdicts.push(v);
    }

    let metrics = median_metrics(&verdicts.iter().map(|v| &v.metrics).collect::<Vec<_>>());
    let checks = Checks::evaluate(&metrics, &settings.split.eval);
    let verdict = ExperimentVerdict {
        members: settings.members,
        season: settings.season.label(),
        periods: settings.split.eval.iter().map(PeriodSpec::label).collect(),
        median: MedianSummary {
            seeds: verdicts.iter().map(|v| v.seed).collect(),
            pass: checks.all(),
            metrics,
            checks,
        },
        verdicts,
    };
    let mut bytes = serde_json::to_vec_pretty(&verdict)?;
    bytes.push(b'\n');
    ensdown::fsutil::atomic_write(&staged.path().join(VERDICT_FILE), &bytes)?;

    let mut manifest = RunManifest::new("experiment", settings)?;
    for v in &verdict.verdicts {
        manifest.seeds.insert(format!("repeat_{:02}", v.seed.wrapping_sub(settings.seed)), v.seed);
    }
    manifest.outputs.insert("verdict".into(), VERDICT_FILE.into());
    let manifest = staged.commit(manifest)?;
    Ok(ExperimentOutput { verdict, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    fn metrics(gains: [f64; 3]) -> Metrics {
        let keys = ["2006-2040", "2041-2070", "2071-2100"];
        let map = |v: [f64; 3]| keys.iter().map(|k| k.to_string()).zip(v).collect::<BTreeMap<_, _>>();
        Metrics {
            rmse_gain: map([0.01; 3]),
            coverage_gain: map(gains),
            coverage_ensemble: map([0.95; 3]),
            coverage_pair: map([0.94; 3]),
            coverage_map_difference: map(gains),
            max_convexity_gap: -0.1,
            ..Metrics::default()
        }
    }

    #[test]
    fn checks_follow_the_gains() {
        let periods = DatasetSplit::default().eval;
        assert!(Checks::evaluate(&metrics([0.0, 0.01, 0.03]), &periods).all());
        let flat = Checks::evaluate(&metrics([0.02, 0.02, 0.02]), &periods);
        assert!(!flat.coverage_gain_grows && flat.coverage_not_worse);
        let worse = Checks::evaluate(&metrics([-0.01, 0.01, 0.03]), &periods);
        assert!(!worse.coverage_not_worse);
    }

    #[test]
    fn median_metrics_take_worst_convexity() {
        let mut a = metrics([0.0, 0.01, 0.03]);
        let b = metrics([0.02, 0.03, 0.05]);
        let c = metrics([0.01, 0.02, 0.04]);
        a.max_convexity_gap = 1e-13;
        let m = median_metrics(&[&a, &b, &c]);
        assert_eq!(m.coverage_gain["2071-2100"], 0.04);
        assert_eq!(m.max_convexity_gap, 1e-13);
    }
}
