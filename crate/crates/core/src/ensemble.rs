//! Deep ensembles: independently trained members merged into one Gaussian
//! by matching the mean and variance of their equal-weight mixture.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::GridField;
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, read_file, sha256_hex};
use crate::model::{load_params, save_params, DeepEsdConfig, Prediction};
use crate::rng::member_seed;
use crate::training::{history_csv, parse_history_csv, train, StandardizationStats, TrainConfig, TrainedModel};

pub const MANIFEST_FILE: &str = "ensemble.json";

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub model_config: DeepEsdConfig,
    /// Shared training settings; each member overrides `seed` with its own.
    pub train_config: TrainConfig,
    pub root_seed: u64,
    pub member_seeds: Vec<u64>,
    pub members: Vec<TrainedModel>,
}

/// Aggregated predictive Gaussian of `m` members.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub mu_star: Array2<f64>,
    pub sigma2_star: Array2<f64>,
    pub m: usize,
}

/// Worker count: an explicit override, else `min(members, available cores)`.
pub fn resolve_workers(members: usize, requested: Option<usize>) -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    requested.unwrap_or_else(|| members.min(cores)).max(1)
}

/// Trains `m` members with seeds derived from `root_seed`, at most `workers`
/// at a time. The result does not depend on `workers`.
pub fn train_ensemble(
    x: &GridField,
    y: &GridField,
    model_config: &DeepEsdConfig,
    train_config: &TrainConfig,
    m: usize,
    root_seed: u64,
    workers: usize,
) -> Result<Ensemble> {
    if m == 0 {
        return Err(Error::InvalidConfig("an ensemble needs at least one member".into()));
    }
    let member_seeds: Vec<u64> = (0..m).map(|i| member_seed(root_seed, i)).collect();
    let run = |i: usize| {
        let config = TrainConfig {
            seed: member_seeds[i],
            ..train_config.clone()
        };
        log::info!("training member {i} (seed {})", member_seeds[i]);
        train(x, y, model_config, &config).map_err(|e| Error::Member {
            member: i,
            source: Box::new(e),
        })
    };
    let results: Vec<Result<TrainedModel>> = if workers <= 1 {
        (0..m).map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
        pool.install(|| (0..m).into_par_iter().map(run).collect())
    };
    Ok(Ensemble {
        model_config: model_config.clone(),
        train_config: train_config.clone(),
        root_seed,
        member_seeds,
        members: results.into_iter().collect::<Result<_>>()?,
    })
}

fn check_same_shape(preds: &[Prediction]) -> Result<(usize, usize)> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Empty("no member predictions to aggregate".into()))?;
    let dim = first.mu.dim();
    for (i, p) in preds.iter().enumerate() {
        if p.mu.dim() != dim || p.sigma2.dim() != dim {
            return Err(Error::shape(
                "aggregate",
                format!("member {i} is {:?}/{:?}, member 0 is {dim:?}", p.mu.dim(), p.sigma2.dim()),
            ));
        }
    }
    Ok(dim)
}

fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// `μ* = mean(μ_m)`, `σ²* = mean(σ²_m) + mean((μ_m − μ*)²)`.
///
/// Every sum runs over the member values in sorted order, so the result is
/// bitwise independent of member order.
pub fn aggregate(preds: &[Prediction]) -> Result<EnsemblePrediction> {
    let (t, g) = check_same_shape(preds)?;
    let m = preds.len();
    let inv = 1.0 / m as f64;
    let mut mu_star = Array2::zeros((t, g));
    let mut sigma2_star = Array2::zeros((t, g));
    let mut mus = vec![0.0; m];
    let mut buf = vec![0.0; m];
    for i in 0..t {
        for j in 0..g {
            for (k, p) in preds.iter().enumerate() {
                mus[k] = p.mu[[i, j]];
                buf[k] = p.sigma2[[i, j]];
            }
            let mean_var = sorted_sum(&mut buf) * inv;
            let mu = sorted_sum(&mut mus) * inv;
            for (b, &mk) in buf.iter_mut().zip(&mus) {
                *b = (mk - mu) * (mk - mu);
            }
            let spread = sorted_sum(&mut buf) * inv;
            mu_star[[i, j]] = mu;
            sigma2_star[[i, j]] = mean_var + spread;
        }
    }
    Ok(EnsemblePrediction { mu_star, sigma2_star, m })
}

/// The raw second-moment form `σ²* = mean(σ²_m + μ_m²) − μ*²`; exposed to
/// check [`aggregate`] against. Cancels badly when `|μ|` ≫ σ.
pub fn aggregate_second_moment(preds: &[Prediction]) -> Result<EnsemblePrediction> {
    let (t, g) = check_same_shape(preds)?;
    let inv = 1.0 / preds.len() as f64;
    let mut mu_star = Array2::<f64>::zeros((t, g));
    let mut second = Array2::<f64>::zeros((t, g));
    for p in preds {
        mu_star += &p.mu;
        Zip::from(&mut second)
            .and(&p.mu)
            .and(&p.sigma2)
            .for_each(|s, &mu, &s2| *s += s2 + mu * mu);
    }
    mu_star *= inv;
    let sigma2_star = second * inv - &mu_star.mapv(|v| v * v);
    Ok(EnsemblePrediction {
        mu_star,
        sigma2_star,
        m: preds.len(),
    })
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Every member's prediction for raw predictors `x`, in member order.
    pub fn member_predictions(&self, x: &GridField) -> Result<Vec<Prediction>> {
        self.members.iter().map(|m| m.predict(x)).collect()
    }

    /// Aggregate of the first `members_used` members (all when `None`).
    pub fn predict(&self, x: &GridField, members_used: Option<usize>) -> Result<EnsemblePrediction> {
        let k = members_used.unwrap_or(self.len());
        if k == 0 || k > self.len() {
            return Err(Error::OutOfRange(format!(
                "members_used {k} not in 1..={}",
                self.len()
            )));
        }
        let preds: Vec<Prediction> = self.members[..k]
            .iter()
            .map(|m| m.predict(x))
            .collect::<Result<_>>()?;
        aggregate(&preds)
    }
}

/// Two-sided standard-normal quantile for a central interval of `level`.
pub fn z_for_level(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::OutOfRange(format!("interval level {level} not in (0, 1)")));
    }
    const TABLE: [(f64, f64); 3] = [
        (0.90, 1.644_853_626_951_472_2),
        (0.95, 1.959_963_984_540_054),
        (0.99, 2.575_829_303_548_900_4),
    ];
    if let Some(&(_, z)) = TABLE.iter().find(|(l, _)| (l - level).abs() < 1e-12) {
        return Ok(z);
    }
    Ok(normal_quantile(0.5 + level / 2.0))
}

/// Inverse standard-normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    }
}

/// `μ ± z·σ` for the central interval of `level`.
pub fn predictive_interval(mu: &Array2<f64>, sigma2: &Array2<f64>, level: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    if mu.dim() != sigma2.dim() {
        return Err(Error::shape(
            "predictive_interval",
            format!("mu {:?} vs sigma2 {:?}", mu.dim(), sigma2.dim()),
        ));
    }
    if let Some(s) = sigma2.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::OutOfRange(format!("sigma2 must be positive, got {s}")));
    }
    let z = z_for_level(level)?;
    let half = sigma2.mapv(|s| z * s.sqrt());
    Ok((mu - &half, mu + &half))
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleManifest {
    members: usize,
    root_seed: u64,
    member_seeds: Vec<u64>,
    config_hash: String,
    model_config: DeepEsdConfig,
    train_config: TrainConfig,
    files: Vec<MemberFiles>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MemberFiles {
    params: String,
    history: String,
    standardizer: String,
    stopped_epoch: usize,
    best_epoch: usize,
}

/// SHA-256 of the canonical JSON of the shared model and training settings
/// (the per-member seed excluded).
pub fn config_hash(model_config: &DeepEsdConfig, train_config: &TrainConfig) -> String {
    let shared = TrainConfig {
        seed: 0,
        ..train_config.clone()
    };
    let json = serde_json::to_vec(&(model_config, shared)).expect("plain data serializes");
    sha256_hex(&json)
}

/// Writes the ensemble directory: a manifest plus params, history and
/// standardizer files per member. Each file is written atomically and the
/// manifest last, so a directory with a manifest is complete.
pub fn save_ensemble(ensemble: &Ensemble, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (i, member) in ensemble.members.iter().enumerate() {
        let entry = MemberFiles {
            params: format!("member_{i:02}.params"),
            history: format!("member_{i:02}_history.csv"),
            standardizer: format!("member_{i:02}_standardizer.json"),
            stopped_epoch: member.stopped_epoch,
            best_epoch: member.best_epoch,
        };
        atomic_write(&dir.join(&entry.params), &save_params(&member.params)?)?;
        atomic_write(&dir.join(&entry.history), history_csv(&member.history).as_bytes())?;
        atomic_write(
            &dir.join(&entry.standardizer),
            &serde_json::to_vec_pretty(&member.stats)?,
        )?;
        files.push(entry);
    }
    let manifest = EnsembleManifest {
        members: ensemble.len(),
        root_seed: ensemble.root_seed,
        member_seeds: ensemble.member_seeds.clone(),
        config_hash: config_hash(&ensemble.model_config, &ensemble.train_config),
        model_config: ensemble.model_config.clone(),
        train_config: ensemble.train_config.clone(),
        files,
    };
    atomic_write(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn load_ensemble(dir: &Path) -> Result<Ensemble> {
    let corrupt = |d: String| Error::Corrupt { kind: "ensemble", detail: d };
    let manifest: EnsembleManifest = serde_json::from_slice(&read_file(&dir.join(MANIFEST_FILE))?)?;
    if manifest.config_hash != config_hash(&manifest.model_config, &manifest.train_config) {
        return Err(corrupt("manifest config hash does not match its config".into()));
    }
    if manifest.members != manifest.files.len() || manifest.members != manifest.member_seeds.len() {
        return Err(corrupt(format!(
            "manifest lists {} members but {} file sets and {} seeds",
            manifest.members,
            manifest.files.len(),
            manifest.member_seeds.len()
        )));
    }
    let members = manifest
        .files
        .iter()
        .zip(&manifest.member_seeds)
        .map(|(f, _)| {
            let params = load_params(&read_file(&dir.join(&f.params))?, Some(&manifest.model_config))?;
            let text = String::from_utf8(read_file(&dir.join(&f.history))?)
                .map_err(|e| corrupt(e.to_string()))?;
            let stats: StandardizationStats = serde_json::from_slice(&read_file(&dir.join(&f.standardizer))?)?;
            Ok(TrainedModel {
                params,
                stats,
                history: parse_history_csv(&text)?,
                stopped_epoch: f.stopped_epoch,
                best_epoch: f.best_epoch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble {
        model_config: manifest.model_config,
        train_config: manifest.train_config,
        root_seed: manifest.root_seed,
        member_seeds: manifest.member_seeds,
        members,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn pred(mu: Array2<f64>, sigma2: Array2<f64>) -> Prediction {
        Prediction { mu, sigma2 }
    }

    fn random_preds(rng: &mut ChaCha8Rng, m: usize, t: usize, g: usize) -> Vec<Prediction> {
        (0..m)
            .map(|_| {
                pred(
                    Array2::from_shape_fn((t, g), |_| rng.random_range(-3.0..3.0)),
                    Array2::from_shape_fn((t, g), |_| rng.random_range(0.1..4.0)),
                )
            })
            .collect()
    }

    #[test]
    fn two_member_hand_case() {
        let p = [
            pred(array![[0.0]], array![[1.0]]),
            pred(array![[2.0]], array![[1.0]]),
        ];
        let agg = aggregate(&p).unwrap();
        assert_eq!((agg.mu_star[[0, 0]], agg.sigma2_star[[0, 0]], agg.m), (1.0, 2.0, 2));
        assert_eq!(aggregate_second_moment(&p).unwrap().sigma2_star[[0, 0]], 2.0);
    }

    #[test]
    fn single_and_identical_members_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_preds(&mut rng, 1, 5, 3);
        let agg = aggregate(&p).unwrap();
        assert_eq!(agg.mu_star, p[0].mu);
        assert_eq!(agg.sigma2_star, p[0].sigma2);
        let agg = aggregate(&vec![p[0].clone(); 4]).unwrap();
        assert_eq!(agg.mu_star, p[0].mu);
        assert_eq!(agg.sigma2_star, p[0].sigma2);
    }

    #[test]
    fn both_forms_agree_and_variance_dominates_mean_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for m in [2, 5, 10] {
            let p = random_preds(&mut rng, m, 20, 7);
            let a = aggregate(&p).unwrap();
            let b = aggregate_second_moment(&p).unwrap();
            assert!(a.sigma2_star.iter().zip(&b.sigma2_star).all(|(x, y)| (x - y).abs() < 1e-10));
            let mean_var = p.iter().fold(Array2::<f64>::zeros((20, 7)), |acc, q| acc + &q.sigma2) / m as f64;
            assert!(a.sigma2_star.iter().zip(&mean_var).all(|(s, v)| *s >= *v && *s > 0.0));
        }
    }

    #[test]
    fn permutation_invariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_preds(&mut rng, 7, 6, 4);
        let mut q = p.clone();
        q.reverse();
        q.swap(1, 4);
        assert_eq!(aggregate(&p).unwrap(), aggregate(&q).unwrap());
    }

    #[test]
    fn empty_or_ragged_input_is_rejected() {
        assert!(aggregate(&[]).is_err());
        let p = [
            pred(array![[0.0, 1.0]], array![[1.0, 1.0]]),
            pred(array![[0.0]], array![[1.0]]),
        ];
        assert!(matches!(aggregate(&p), Err(Error::Shape { .. })));
    }

    #[test]
    fn monte_carlo_mixture_moments() {
        // smaller version of the acceptance oracle
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for m in [2, 5, 10] {
            let p = random_preds(&mut rng, m, 1, 1);
            let agg = aggregate(&p).unwrap();
            let n = 200_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let k = rng.random_range(0..m);
                let v = p[k].mu[[0, 0]] + p[k].sigma2[[0, 0]].sqrt() * rng.sample::<f64, _>(StandardNormal);
                s1 += v;
                s2 += v * v;
            }
            let mean = s1 / n as f64;
            let var = s2 / n as f64 - mean * mean;
            let (mu, s) = (agg.mu_star[[0, 0]], agg.sigma2_star[[0, 0]]);
            assert!((mean - mu).abs() < 3.0 * (s / n as f64).sqrt());
            // Var of the sample variance ≈ (μ4 − σ⁴)/n; bound μ4 by the mixture's fourth moment
            let mu4: f64 = p
                .iter()
                .map(|q| {
                    let (d, v) = (q.mu[[0, 0]] - mu, q.sigma2[[0, 0]]);
                    d.powi(4) + 6.0 * d * d * v + 3.0 * v * v
                })
                .sum::<f64>()
                / m as f64;
            assert!((var - s).abs() < 3.0 * ((mu4 - s * s) / n as f64).sqrt());
        }
    }

    #[test]
    fn quantiles_and_intervals() {
        assert_eq!(z_for_level(0.95).unwrap(), 1.959_963_984_540_054);
        assert!((z_for_level(0.90).unwrap() - 1.644_853_626_951_472).abs() < 1e-12);
        for level in [0.5, 0.8, 0.9, 0.95, 0.99, 0.999] {
            let z = normal_quantile(0.5 + level / 2.0);
            let reference = statrs::distribution::ContinuousCDF::inverse_cdf(
                &statrs::distribution::Normal::standard(),
                0.5 + level / 2.0,
            );
            assert!((z - reference).abs() < 1e-6, "{level}: {z} vs {reference}");
        }
        for p in [1e-6, 0.01, 0.3] {
            assert!((normal_quantile(p) + normal_quantile(1.0 - p)).abs() < 1e-8);
        }
        assert!(z_for_level(0.0).is_err() && z_for_level(1.0).is_err());

        let (lo, hi) = predictive_interval(&array![[0.0, 10.0]], &array![[1.0, 4.0]], 0.95).unwrap();
        assert!((lo[[0, 0]] + 1.959964).abs() < 1e-6 && (hi[[0, 0]] - 1.959964).abs() < 1e-6);
        assert!((lo[[0, 1]] - 6.080072).abs() < 1e-6 && (hi[[0, 1]] - 13.919928).abs() < 1e-6);
        assert!(predictive_interval(&array![[0.0]], &array![[0.0]], 0.95).is_err());
    }

    #[test]
    fn worker_resolution() {
        assert_eq!(resolve_workers(10, Some(3)), 3);
        assert_eq!(resolve_workers(1, None), 1);
        assert!(resolve_workers(10, None) >= 1);
        assert_eq!(resolve_workers(4, Some(0)), 1);
    }
}
