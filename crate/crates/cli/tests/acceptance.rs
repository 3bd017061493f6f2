//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs the full five-seed experiment, so expect roughly an
//! hour and a quarter on a single core.
//!
//! `cargo test -p ensdown-cli --test acceptance`

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{array, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ensdown::data::{generate_pseudo_reality, DatasetSplit, PeriodSpec, Season, SynthConfig};
use ensdown::ensemble::{aggregate, aggregate_second_moment};
use ensdown::evaluation::evaluate_gaussian;
use ensdown::model::{forward_on_tape, init_params, DeepEsdConfig, ModelParams, Prediction};
use ensdown::tensor::{finite_diff_check, Tape, Tensor};
use ensdown::training::{apply_standardizer, fit_standardizer, gaussian_nll, train, TrainConfig};
use ensdown_cli::experiment::{cmd_experiment, ExperimentSettings, CONVEXITY_TOLERANCE};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(results: &mut Vec<(String, bool)>, name: &str, started: Instant, o: Outcome) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("{verdict} {name}: {} [{:.1}s]", o.detail, started.elapsed().as_secs_f64());
    results.push((name.to_string(), o.pass));
}

// 1 ------------------------------------------------------------------------

fn nll_loss(params: &ModelParams, x: &Tensor, y: &[f64], grad: bool) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, grad);
    let xv = tape.leaf(x.clone());
    let (mu, s2) = forward_on_tape(&params.config, &mut tape, &vars, xv).unwrap();
    let loss = tape.gaussian_nll(mu, s2, y).unwrap();
    if !grad {
        return (tape.value(loss).data()[0], Vec::new());
    }
    let grads = tape.backward(loss).unwrap();
    let flat = vars
        .iter()
        .flat_map(|v| grads.get(*v).unwrap().data().to_vec())
        .collect();
    (grads.loss(), flat)
}

fn gradient_check() -> Outcome {
    let config = DeepEsdConfig::new(2, 4, 4, 64);
    let mut params = init_params(&config, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // non-zero biases so every parameter influences the loss
    for t in params.tensors.iter_mut().filter(|t| t.shape().len() == 1) {
        for v in t.data_mut() {
            *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let n = 2;
    let x = Tensor::new(
        vec![n, 2, 4, 4],
        (0..n * 32).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap();
    let y: Vec<f64> = (0..n * 64).map(|_| rng.sample(StandardNormal)).collect();
    let (_, analytic) = nll_loss(&params, &x, &y, true);
    let flat: Vec<f64> = params.tensors.iter().flat_map(|t| t.data().to_vec()).collect();
    let shapes: Vec<Vec<usize>> = params.tensors.iter().map(|t| t.shape().to_vec()).collect();
    let rebuild = |p: &[f64]| {
        let mut off = 0;
        let tensors = shapes
            .iter()
            .map(|s| {
                let len: usize = s.iter().product();
                let t = Tensor::new(s.clone(), p[off..off + len].to_vec()).unwrap();
                off += len;
                t
            })
            .collect();
        ModelParams {
            config: config.clone(),
            seed: 0,
            tensors,
        }
    };
    let check = finite_diff_check(|p| nll_loss(&rebuild(p), &x, &y, false).0, &flat, &analytic, 1e-6);
    // also the plain relative error where the gradient is not tiny
    let plain = analytic
        .iter()
        .zip(&check.numeric)
        .filter(|(a, _)| a.abs() > 1e-3)
        .map(|(a, n)| (a - n).abs() / a.abs())
        .fold(0.0, f64::max);
    outcome(
        check.max_relative_error < 1e-4,
        format!(
            "{} parameters, max rel err {:.2e} (unit-floored), {:.2e} over |g| > 1e-3",
            flat.len(),
            check.max_relative_error,
            plain
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn aggregation_oracle() -> Outcome {
    const DRAWS: usize = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_z, mut worst_identity) = (0.0f64, 0.0f64);
    let mut misses = 0;
    for set in 0..100 {
        let m = [2, 5, 10][set % 3];
        let mus: Vec<f64> = (0..m).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let vars: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..4.0)).collect();
        let preds: Vec<Prediction> = mus
            .iter()
            .zip(&vars)
            .map(|(&mu, &s2)| Prediction {
                mu: array![[mu]],
                sigma2: array![[s2]],
            })
            .collect();
        let agg = aggregate(&preds).unwrap();
        let (mu_star, s2_star) = (agg.mu_star[[0, 0]], agg.sigma2_star[[0, 0]]);

        let mean_var = vars.iter().sum::<f64>() / m as f64;
        let var_means = mus.iter().map(|u| (u - mu_star).powi(2)).sum::<f64>() / m as f64;
        let raw = aggregate_second_moment(&preds).unwrap().sigma2_star[[0, 0]];
        worst_identity = worst_identity
            .max((s2_star - (mean_var + var_means)).abs())
            .max((s2_star - raw).abs());

        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..DRAWS {
            let k = rng.random_range(0..m);
            let v = mus[k] + vars[k].sqrt() * rng.sample::<f64, _>(StandardNormal);
            let d = v - mu_star;
            sum += d;
            sum2 += d * d;
        }
        let n = DRAWS as f64;
        let mc_mean = mu_star + sum / n;
        let mc_var = sum2 / n - (sum / n).powi(2);
        // exact fourth central moment of the mixture about mu*
        let mu4 = mus
            .iter()
            .zip(&vars)
            .map(|(u, s2)| {
                let d = u - mu_star;
                d.powi(4) + 6.0 * d * d * s2 + 3.0 * s2 * s2
            })
            .sum::<f64>()
            / m as f64;
        let z_mean = (mc_mean - mu_star).abs() / (s2_star / n).sqrt();
        let z_var = (mc_var - s2_star).abs() / ((mu4 - s2_star * s2_star) / n).sqrt();
        if z_mean > 3.0 || z_var > 3.0 {
            misses += 1;
        }
        worst_z = worst_z.max(z_mean).max(z_var);
    }
    outcome(
        misses == 0 && worst_identity <= 1e-10,
        format!(
            "100 sets x 1e6 draws: {misses} outside 3 SE (worst {worst_z:.2} SE; ~0.54 misses expected by chance \
             over 200 two-sided tests), identity error {worst_identity:.1e}"
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn nll_closed_forms() -> Outcome {
    let a = gaussian_nll(array![[0.0]].view(), array![[1.0]].view(), array![[0.0]].view()).unwrap();
    let b = gaussian_nll(array![[0.0]].view(), array![[1.0]].view(), array![[1.0]].view()).unwrap();
    let ea = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let pass = (a - 0.918_938_5).abs() < 1e-7
        && (b - 1.418_938_5).abs() < 1e-7
        && (a - ea).abs() < 1e-9
        && (b - (ea + 0.5)).abs() < 1e-9;
    outcome(pass, format!("nll(0,1,0) = {a:.10}, nll(0,1,1) = {b:.10}"))
}

// 4 ------------------------------------------------------------------------

fn calibration() -> Outcome {
    let defaults = ExperimentSettings::default();
    let config = SynthConfig {
        warming_rate: 0.0,
        end_year: 2030,
        ..defaults.synth.clone()
    };
    let reality = generate_pseudo_reality(&config, 4).unwrap();
    let split = DatasetSplit::default();
    let x = reality.predictors.select_period(&split.train).unwrap();
    let y = reality.predictand.select_period(&split.train).unwrap();
    let (h, w) = x.grid_shape();
    let model_config = DeepEsdConfig::new(x.n_channels(), h, w, y.n_points());
    let train_config = TrainConfig {
        seed: 4,
        ..defaults.train.clone()
    };
    let model = train(&x, &y, &model_config, &train_config).unwrap();
    let test = PeriodSpec::new(2006, 2030).unwrap();
    let xt = reality.predictors.select_period(&test).unwrap();
    let yt = reality.predictand.select_period(&test).unwrap().channel_matrix(0).unwrap();
    let pred = model.predict(&xt).unwrap();
    let r = evaluate_gaussian(&pred.mu, &pred.sigma2, yt.view(), 0.95, test, Season::all(), 1).unwrap();
    outcome(
        r.n_time >= 5000 && (0.92..=0.975).contains(&r.coverage_mean),
        format!(
            "stationary data, {} test days ({test}): coverage {:.4}, RMSE {:.3}",
            r.n_time, r.coverage_mean, r.rmse_mean
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn standardization() -> Outcome {
    let config = ExperimentSettings::default().synth;
    let reality = generate_pseudo_reality(&config, 9).unwrap();
    let train = DatasetSplit::default().train;
    let stats = fit_standardizer(&reality.predictors, &train).unwrap();
    let z = apply_standardizer(&reality.predictors.select_period(&train).unwrap(), &stats).unwrap();
    let (t, c, h, w) = z.values().dim();
    let flat = z.values().view().into_shape_with_order((t, c * h * w)).unwrap();
    let mean = flat.mean_axis(Axis(0)).unwrap();
    let std = flat.std_axis(Axis(0), 0.0);
    let worst_mean = mean.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let worst_std = std.iter().fold(0.0f64, |a, v| a.max((v - 1.0).abs()));
    outcome(
        worst_mean < 1e-10 && worst_std < 1e-10,
        format!("{} features over {t} days: max |mean| {worst_mean:.1e}, max |std - 1| {worst_std:.1e}", c * h * w),
    )
}

// 8 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let defaults = ExperimentSettings::default();
    let settings = ExperimentSettings {
        seed: 8,
        members: 2,
        synth: SynthConfig {
            coarse_height: 3,
            coarse_width: 3,
            fine_height: 6,
            fine_width: 6,
            ..defaults.synth.clone()
        },
        conv_channels: vec![8, 6, 4],
        train: TrainConfig {
            max_epochs: 3,
            patience: 1,
            ..defaults.train.clone()
        },
        ..defaults
    };
    let a = cmd_experiment(&settings, &dir.path().join("a")).unwrap().manifest;
    let b = cmd_experiment(&settings, &dir.path().join("b")).unwrap().manifest;
    let same = !a.artifact_hashes.is_empty() && a.artifact_hashes == b.artifact_hashes;
    outcome(
        same,
        format!("{} artifacts hashed, identical across runs: {same}", a.artifact_hashes.len()),
    )
}

// 5, 6, 7, 10 ----------------------------------------------------------------

fn main() -> ExitCode {
    let mut results = Vec::new();

    let t = Instant::now();
    let o = gradient_check();
    let o = Outcome {
        pass: o.pass && t.elapsed() < Duration::from_secs(60),
        ..o
    };
    report(&mut results, "criterion 1 (NLL gradient vs finite differences, < 1 min)", t, o);

    let t = Instant::now();
    report(&mut results, "criterion 2 (aggregation vs Monte Carlo mixture moments)", t, aggregation_oracle());

    let t = Instant::now();
    report(&mut results, "criterion 3 (NLL closed forms)", t, nll_closed_forms());

    let t = Instant::now();
    let o = calibration();
    let o = Outcome {
        pass: o.pass && t.elapsed() < Duration::from_secs(600),
        ..o
    };
    report(&mut results, "criterion 4 (in-distribution calibration, < 10 min)", t, o);

    let t = Instant::now();
    report(&mut results, "criterion 8 (experiment determinism)", t, determinism());

    let t = Instant::now();
    report(&mut results, "criterion 9 (standardization)", t, standardization());

    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let settings = ExperimentSettings {
        repeats: 5,
        ..ExperimentSettings::default()
    };
    let run = cmd_experiment(&settings, &dir.path().join("experiment"));
    let elapsed = t.elapsed();
    match run {
        Err(e) => {
            for name in ["5", "6", "7", "10"] {
                report(&mut results, &format!("criterion {name}"), t, outcome(false, format!("experiment failed: {e:#}")));
            }
        }
        Ok(out) => {
            let v = &out.verdict;
            let med = &v.median.metrics;
            let c = &v.median.checks;
            let fmt = |m: &std::collections::BTreeMap<String, f64>| {
                m.iter().map(|(k, x)| format!("{k} {x:+.4}")).collect::<Vec<_>>().join(", ")
            };
            let within = elapsed < Duration::from_secs(3 * 3600);
            report(
                &mut results,
                "criterion 5 (summer ensemble vs single model, median of 5 seeds, < 3 h)",
                t,
                outcome(
                    c.coverage_not_worse && c.coverage_gain_grows && c.rmse_not_worse && within,
                    format!(
                        "coverage gain [{}]; RMSE gain [{}]; {:.0} min",
                        fmt(&med.coverage_gain),
                        fmt(&med.rmse_gain),
                        elapsed.as_secs_f64() / 60.0
                    ),
                ),
            );
            let last = v.periods.last().cloned().unwrap_or_default();
            report(
                &mut results,
                "criterion 6 (mean per-gridpoint coverage difference, last period)",
                t,
                outcome(
                    c.coverage_map_difference_positive,
                    format!("{last}: {:+.4}", med.coverage_map_difference.get(&last).copied().unwrap_or(f64::NAN)),
                ),
            );
            report(
                &mut results,
                "criterion 7 (M=10 vs M=2 coverage, last period)",
                t,
                outcome(
                    c.ensemble_not_worse_than_pair,
                    format!(
                        "{last}: M=10 {:.4} vs M=2 {:.4}",
                        med.coverage_ensemble.get(&last).copied().unwrap_or(f64::NAN),
                        med.coverage_pair.get(&last).copied().unwrap_or(f64::NAN)
                    ),
                ),
            );
            report(
                &mut results,
                "criterion 10 (per-gridpoint RMSE of the mean <= mean member RMSE)",
                t,
                outcome(
                    med.max_convexity_gap <= CONVEXITY_TOLERANCE,
                    format!("largest gap over all runs, periods and M: {:.3e}", med.max_convexity_gap),
                ),
            );
            for r in &v.verdicts {
                println!(
                    "  seed {}: coverage gain [{}], RMSE gain [{}], pass {}",
                    r.seed,
                    fmt(&r.metrics.coverage_gain),
                    fmt(&r.metrics.rmse_gain),
                    r.pass
                );
            }
        }
    }

    let failed: Vec<_> = results.iter().filter(|(_, p)| !p).map(|(n, _)| n.as_str()).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
