//! RMSE, interval coverage, climatology, ensemble-size sweeps and paired
//! coverage maps, plus their tidy CSV / JSON report formats.
//!
//! CSV reports are UTF-8 with Unix newlines and columns
//! `period,season,M,gridpoint_id,lat,lon,metric,value`. Numbers use `.` as
//! the decimal separator and the shortest representation that round-trips.
//! Spatial-mean rows carry `gridpoint_id = MEAN` and empty coordinates.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{align_time, GridField, PeriodSpec, Season};
use crate::ensemble::{aggregate, predictive_interval, Ensemble};
use crate::error::{Error, Result};
use crate::model::Prediction;

fn same_dims(op: &'static str, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::Empty(format!("{op} needs at least one time step and gridpoint")));
    }
    Ok(())
}

/// How gridpoint maps are averaged into one number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialWeighting {
    #[default]
    Uniform,
    /// Weight by the cosine of each row's latitude.
    CosLatitude,
}

impl SpatialWeighting {
    /// Per-gridpoint weights summing to 1 for a row-major `lat × lon` grid.
    pub fn weights(self, lat: &[f64], n_lon: usize) -> Vec<f64> {
        let raw: Vec<f64> = match self {
            SpatialWeighting::Uniform => vec![1.0; lat.len() * n_lon],
            SpatialWeighting::CosLatitude => lat
                .iter()
                .flat_map(|l| std::iter::repeat_n(l.to_radians().cos(), n_lon))
                .collect(),
        };
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| w / total).collect()
    }
}

impl std::str::FromStr for SpatialWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(SpatialWeighting::Uniform),
            "cos-latitude" | "coslat" => Ok(SpatialWeighting::CosLatitude),
            _ => Err(Error::OutOfRange(format!("unknown weighting '{s}', expected uniform or cos-latitude"))),
        }
    }
}

pub fn spatial_mean(map: &[f64]) -> f64 {
    map.iter().sum::<f64>() / map.len() as f64
}

pub fn weighted_mean(map: &[f64], weights: &[f64]) -> f64 {
    map.iter().zip(weights).map(|(v, w)| v * w).sum()
}

/// Per-gridpoint root mean squared error over time, and its spatial mean.
pub fn rmse(mu: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<(Array1<f64>, f64)> {
    same_dims("rmse", mu, y)?;
    let t = mu.nrows() as f64;
    let map = (&mu - &y).mapv(|e| e * e).sum_axis(Axis(0)).mapv(|s| (s / t).sqrt());
    let mean = spatial_mean(map.as_slice().expect("fresh array"));
    Ok((map, mean))
}

/// Per-gridpoint fraction of time steps with `lower ≤ y ≤ upper`, and its spatial mean.
pub fn coverage_ratio(lower: ArrayView2<f64>, upper: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<(Array1<f64>, f64)> {
    same_dims("coverage_ratio", lower, y)?;
    same_dims("coverage_ratio", upper, y)?;
    if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
        return Err(Error::OutOfRange("interval lower bound above upper bound".into()));
    }
    let (t, g) = y.dim();
    let mut hits = vec![0usize; g];
    for i in 0..t {
        for (j, h) in hits.iter_mut().enumerate() {
            let v = y[[i, j]];
            if lower[[i, j]] <= v && v <= upper[[i, j]] {
                *h += 1;
            }
        }
    }
    let map: Array1<f64> = hits.iter().map(|&h| h as f64 / t as f64).collect();
    let mean = spatial_mean(map.as_slice().expect("fresh array"));
    Ok((map, mean))
}

/// Time mean per gridpoint of channel 0 over `period`.
pub fn climatology(y: &GridField, period: &PeriodSpec) -> Result<Array1<f64>> {
    let sel = y.select_period(period)?;
    sel.channel_matrix(0)?
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::Empty(format!("no time steps in {period}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub period: PeriodSpec,
    pub season: Season,
    pub m: usize,
    pub level: f64,
    pub n_time: usize,
    pub rmse_map: Vec<f64>,
    pub coverage_map: Vec<f64>,
    pub rmse_mean: f64,
    pub coverage_mean: f64,
}

/// Scores a Gaussian prediction `(mu, sigma2)` against `y`, all `[T, G]`.
pub fn evaluate_gaussian(
    mu: &Array2<f64>,
    sigma2: &Array2<f64>,
    y: ArrayView2<f64>,
    level: f64,
    period: PeriodSpec,
    season: Season,
    m: usize,
) -> Result<EvalReport> {
    let (rmse_map, rmse_mean) = rmse(mu.view(), y)?;
    let (lower, upper) = predictive_interval(mu, sigma2, level)?;
    let (coverage_map, coverage_mean) = coverage_ratio(lower.view(), upper.view(), y)?;
    Ok(EvalReport {
        period,
        season,
        m,
        level,
        n_time: y.nrows(),
        rmse_map: rmse_map.to_vec(),
        coverage_map: coverage_map.to_vec(),
        rmse_mean,
        coverage_mean,
    })
}

/// Like [`evaluate_gaussian`] but with the interval bounds given directly,
/// e.g. as read back from a prediction file.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_interval(
    mu: ArrayView2<f64>,
    lower: ArrayView2<f64>,
    upper: ArrayView2<f64>,
    y: ArrayView2<f64>,
    level: f64,
    period: PeriodSpec,
    season: Season,
    m: usize,
) -> Result<EvalReport> {
    let (rmse_map, rmse_mean) = rmse(mu, y)?;
    let (coverage_map, coverage_mean) = coverage_ratio(lower, upper, y)?;
    Ok(EvalReport {
        period,
        season,
        m,
        level,
        n_time: y.nrows(),
        rmse_map: rmse_map.to_vec(),
        coverage_map: coverage_map.to_vec(),
        rmse_mean,
        coverage_mean,
    })
}

/// Largest `RMSE(μ*) − mean_m RMSE(μ_m)` over gridpoints. Convexity of the
/// squared error makes this ≤ 0 up to rounding.
pub fn convexity_gap(members: &[Prediction], mu_star: &Array2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    let (ens, _) = rmse(mu_star.view(), y)?;
    let mut mean_member = Array1::<f64>::zeros(ens.len());
    for p in members {
        mean_member += &rmse(p.mu.view(), y)?.0;
    }
    mean_member /= members.len() as f64;
    Ok(ens
        .iter()
        .zip(&mean_member)
        .map(|(e, m)| e - m)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Output of [`sweep_ensemble_size`].
#[derive(Clone, Debug)]
pub struct Sweep {
    /// One report per (period, M), periods outermost, M = 1..=members.
    pub reports: Vec<EvalReport>,
    /// Largest convexity gap seen over all periods and ensemble sizes.
    pub max_convexity_gap: f64,
}

impl Sweep {
    pub fn report(&self, period: &PeriodSpec, m: usize) -> Option<&EvalReport> {
        self.reports
            .iter()
            .find(|r| r.period.start_year == period.start_year && r.period.end_year == period.end_year && r.m == m)
    }
}

/// For every period and every M, aggregates the first M members and scores
/// them on the `season` days of the period.
pub fn sweep_ensemble_size(
    ensemble: &Ensemble,
    x: &GridField,
    y: &GridField,
    periods: &[PeriodSpec],
    season: Season,
    level: f64,
) -> Result<Sweep> {
    let mut reports = Vec::with_capacity(periods.len() * ensemble.len());
    let mut max_gap = f64::NEG_INFINITY;
    for period in periods {
        let p = period.with_season(season);
        let (xp, yp) = align_time(&x.select_period(&p)?, &y.select_period(&p)?)?;
        let target = yp.channel_matrix(0)?;
        let preds = ensemble.member_predictions(&xp)?;
        for m in 1..=preds.len() {
            let agg = aggregate(&preds[..m])?;
            max_gap = max_gap.max(convexity_gap(&preds[..m], &agg.mu_star, target.view())?);
            reports.push(evaluate_gaussian(
                &agg.mu_star,
                &agg.sigma2_star,
                target.view(),
                level,
                *period,
                season,
                m,
            )?);
        }
    }
    Ok(Sweep {
        reports,
        max_convexity_gap: max_gap,
    })
}

/// Per-gridpoint coverage of a single model next to an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageMapReport {
    pub period: PeriodSpec,
    pub season: Season,
    pub single_m: usize,
    pub ensemble_m: usize,
    pub single: Vec<f64>,
    pub ensemble: Vec<f64>,
    /// `ensemble − single`.
    pub difference: Vec<f64>,
    pub single_mean: f64,
    pub ensemble_mean: f64,
    pub difference_mean: f64,
}

pub fn coverage_map_report(single: &EvalReport, ensemble: &EvalReport) -> Result<CoverageMapReport> {
    if single.coverage_map.len() != ensemble.coverage_map.len() {
        return Err(Error::shape(
            "coverage_map_report",
            format!(
                "{} vs {} gridpoints",
                single.coverage_map.len(),
                ensemble.coverage_map.len()
            ),
        ));
    }
    if single.period != ensemble.period || single.season != ensemble.season {
        return Err(Error::ConfigMismatch(format!(
            "reports cover {} {} and {} {}",
            single.period, single.season, ensemble.period, ensemble.season
        )));
    }
    let difference: Vec<f64> = ensemble
        .coverage_map
        .iter()
        .zip(&single.coverage_map)
        .map(|(e, s)| e - s)
        .collect();
    Ok(CoverageMapReport {
        period: single.period,
        season: single.season,
        single_m: single.m,
        ensemble_m: ensemble.m,
        single: single.coverage_map.clone(),
        ensemble: ensemble.coverage_map.clone(),
        difference_mean: spatial_mean(&difference),
        difference,
        single_mean: single.coverage_mean,
        ensemble_mean: ensemble.coverage_mean,
    })
}

pub const CSV_HEADER: &str = "period,season,M,gridpoint_id,lat,lon,metric,value";

/// Gridpoint coordinates for row-major id `p` on a `lat × lon` grid.
fn coords(lat: &[f64], lon: &[f64], p: usize) -> (f64, f64) {
    (lat[p / lon.len()], lon[p % lon.len()])
}

fn push_metric(out: &mut String, head: &str, lat: &[f64], lon: &[f64], metric: &str, map: &[f64], mean: f64) {
    for (p, v) in map.iter().enumerate() {
        let (la, lo) = coords(lat, lon, p);
        writeln!(out, "{head},{p},{la},{lo},{metric},{v}").expect("string write");
    }
    writeln!(out, "{head},MEAN,,,{metric},{mean}").expect("string write");
}

/// Tidy long CSV of `rmse` and `coverage` maps plus their spatial means.
pub fn reports_csv(reports: &[EvalReport], lat: &[f64], lon: &[f64]) -> Result<String> {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        if r.rmse_map.len() != lat.len() * lon.len() {
            return Err(Error::shape(
                "reports_csv",
                format!("{} gridpoints for a {}x{} grid", r.rmse_map.len(), lat.len(), lon.len()),
            ));
        }
        let head = format!("{},{},{}", r.period.label(), r.season, r.m);
        push_metric(&mut out, &head, lat, lon, "rmse", &r.rmse_map, r.rmse_mean);
        push_metric(&mut out, &head, lat, lon, "coverage", &r.coverage_map, r.coverage_mean);
    }
    Ok(out)
}

/// Tidy long CSV of paired coverage maps; `M` is the ensemble size.
pub fn coverage_maps_csv(maps: &[CoverageMapReport], lat: &[f64], lon: &[f64]) -> Result<String> {
    let mut out = format!("{CSV_HEADER}\n");
    for c in maps {
        if c.single.len() != lat.len() * lon.len() {
            return Err(Error::shape("coverage_maps_csv", "grid does not match maps"));
        }
        let head = format!("{},{},{}", c.period.label(), c.season, c.ensemble_m);
        push_metric(&mut out, &head, lat, lon, "coverage_single", &c.single, c.single_mean);
        push_metric(&mut out, &head, lat, lon, "coverage_ensemble", &c.ensemble, c.ensemble_mean);
        push_metric(&mut out, &head, lat, lon, "coverage_difference", &c.difference, c.difference_mean);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub period: String,
    pub season: String,
    pub m: usize,
    pub n_time: usize,
    pub rmse_mean: f64,
    pub coverage_mean: f64,
    /// Spatial means under the alternative weighting, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse_weighted: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_weighted: Option<f64>,
}

/// Spatial-mean summary rows; with a non-uniform `weighting` the weighted
/// means are added next to the unweighted ones.
pub fn summary_rows(reports: &[EvalReport], weighting: SpatialWeighting, lat: &[f64], n_lon: usize) -> Vec<SummaryRow> {
    let weights = (weighting != SpatialWeighting::Uniform).then(|| weighting.weights(lat, n_lon));
    reports
        .iter()
        .map(|r| SummaryRow {
            period: r.period.label(),
            season: r.season.label(),
            m: r.m,
            n_time: r.n_time,
            rmse_mean: r.rmse_mean,
            coverage_mean: r.coverage_mean,
            rmse_weighted: weights.as_ref().map(|w| weighted_mean(&r.rmse_map, w)),
            coverage_weighted: weights.as_ref().map(|w| weighted_mean(&r.coverage_map, w)),
        })
        .collect()
}
