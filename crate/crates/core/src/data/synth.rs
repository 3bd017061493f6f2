//! Synthetic pseudo-reality: paired coarse predictors and a fine-grid
//! predictand driven by one latent daily climate state.
//!
//! On the fine grid the latent state is
//!
//! ```text
//! L(t, p) = P(p) + A·a(p)·cos(2π(doy − 195)/365)
//!         + r·w(p)·max(0, year_fraction − trend_start)/10
//!         + Σ_k z_k(t)·φ_k(p)
//! ```
//!
//! with a smooth spatial pattern `P`, a seasonal cycle peaking mid-July, a
//! linear warming (`r` per decade) switched on at `trend_start`, and AR(1)
//! mode amplitudes `z_k` on smooth spatial modes `φ_k`. The predictand is a
//! smooth saturating map of the latent anomaly plus noise that is inflated in
//! June–August:
//!
//! ```text
//! y = m(p) + λ(p)·[(1 − ρ)·u + ρ·S·tanh(u/S)] + ε,   u = L − c
//! ```
//!
//! Each predictor channel is a gain/offset projection of the coarse
//! block-mean of `L` plus independent noise. The eastern part of the domain
//! is a "high-signal" region with larger seasonal amplitude, warming and
//! response gain; the warming map `w` equals the seasonal map `a`.

use std::f64::consts::PI;

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::calendar::{NoLeapDay, Season, DAYS_PER_YEAR};
use super::grid::GridField;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Day of year (0-based) at which the seasonal cycle peaks (15 July).
pub const SEASONAL_PEAK_DAY: f64 = 195.0;

const LEVELS: [&str; 4] = ["850", "700", "500", "250"];
const VARIABLES: [(&str, &str); 3] = [("ta", "K"), ("zg", "m"), ("hus", "g/kg")];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub coarse_height: usize,
    pub coarse_width: usize,
    pub fine_height: usize,
    pub fine_width: usize,
    pub channels: usize,
    pub start_year: i32,
    pub end_year: i32,
    /// Seasonal half-range of the latent state.
    pub seasonal_amplitude: f64,
    /// Latent warming per decade, applied from `trend_start_year`.
    pub warming_rate: f64,
    pub trend_start_year: i32,
    /// Seeds the spatial patterns and response coefficients (the "climate");
    /// the `seed` argument of the generator drives the daily weather noise.
    pub pattern_seed: u64,
    /// Standard deviation of each AR(1) mode amplitude.
    pub latent_noise: f64,
    pub latent_autocorrelation: f64,
    pub latent_modes: usize,
    pub coarse_noise: f64,
    pub fine_noise: f64,
    /// Multiplier on `fine_noise` in June–August.
    pub summer_noise_multiplier: f64,
    /// Weight ρ of the saturating part of the latent→predictand map.
    pub nonlinear_weight: f64,
    /// Saturation scale S of the latent→predictand map.
    pub saturation_scale: f64,
    /// Fraction of columns (from the east) forming the high-signal region.
    pub high_signal_fraction: f64,
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            coarse_height: 8,
            coarse_width: 8,
            fine_height: 32,
            fine_width: 32,
            channels: 12,
            start_year: 1970,
            end_year: 2100,
            seasonal_amplitude: 8.0,
            warming_rate: 1.0,
            trend_start_year: 2006,
            pattern_seed: 20_060_101,
            latent_noise: 3.0,
            latent_autocorrelation: 0.7,
            latent_modes: 4,
            coarse_noise: 0.3,
            fine_noise: 0.6,
            summer_noise_multiplier: 2.0,
            nonlinear_weight: 0.5,
            saturation_scale: 6.0,
            high_signal_fraction: 0.5,
            lat_range: (25.0, 55.0),
            lon_range: (-135.0, -100.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.coarse_height == 0 || self.coarse_width == 0 || self.channels == 0 {
            return bad("coarse grid and channel count must be positive".into());
        }
        if self.fine_height == 0
            || self.fine_width == 0
            || !self.fine_height.is_multiple_of(self.coarse_height)
            || !self.fine_width.is_multiple_of(self.coarse_width)
        {
            return bad(format!(
                "fine grid {}x{} must be an integer multiple of coarse grid {}x{}",
                self.fine_height, self.fine_width, self.coarse_height, self.coarse_width
            ));
        }
        if self.start_year > self.end_year {
            return bad(format!("start year {} after end year {}", self.start_year, self.end_year));
        }
        for (name, v) in [
            ("latent_noise", self.latent_noise),
            ("coarse_noise", self.coarse_noise),
            ("fine_noise", self.fine_noise),
            ("summer_noise_multiplier", self.summer_noise_multiplier),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.latent_autocorrelation) {
            return bad("latent_autocorrelation must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.nonlinear_weight) || self.saturation_scale <= 0.0 {
            return bad("nonlinear_weight must lie in [0, 1] and saturation_scale be positive".into());
        }
        if !(0.0..=1.0).contains(&self.high_signal_fraction) {
            return bad("high_signal_fraction must lie in [0, 1]".into());
        }
        for v in [self.seasonal_amplitude, self.warming_rate] {
            if !v.is_finite() {
                return bad("seasonal amplitude and warming rate must be finite".into());
            }
        }
        Ok(())
    }

    pub fn n_days(&self) -> usize {
        (self.end_year - self.start_year + 1) as usize * DAYS_PER_YEAR as usize
    }

    fn block(&self) -> (usize, usize) {
        (self.fine_height / self.coarse_height, self.fine_width / self.coarse_width)
    }

    /// Predictor variable names: three variables at four levels, cycled.
    pub fn channel_names(&self) -> Vec<(String, String)> {
        (0..self.channels)
            .map(|c| {
                let (v, unit) = VARIABLES[(c / LEVELS.len()) % VARIABLES.len()];
                let level = LEVELS[c % LEVELS.len()];
                let suffix = if c >= 12 { format!("_{}", c / 12) } else { String::new() };
                (format!("{v}{level}{suffix}"), unit.to_string())
            })
            .collect()
    }
}

/// Latent coefficients fixed by `pattern_seed`, exported for oracles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub fine_shape: (usize, usize),
    /// Time-invariant latent pattern `P`, row-major over the fine grid.
    pub pattern: Vec<f64>,
    pub seasonal_map: Vec<f64>,
    pub warming_map: Vec<f64>,
    pub high_signal: Vec<bool>,
    pub modes: Vec<Vec<f64>>,
    pub latent_center: f64,
    pub response_offset: Vec<f64>,
    pub response_gain: Vec<f64>,
    pub channel_gain: Vec<f64>,
    pub channel_offset: Vec<f64>,
}

impl GroundTruth {
    /// Warming term of the latent state at gridpoint `p`.
    pub fn trend(&self, config: &SynthConfig, day: NoLeapDay, p: usize) -> f64 {
        let years = (day.year_fraction() - config.trend_start_year as f64).max(0.0);
        config.warming_rate * self.warming_map[p] * years / 10.0
    }

    pub fn seasonal(&self, config: &SynthConfig, day: NoLeapDay, p: usize) -> f64 {
        config.seasonal_amplitude * self.seasonal_map[p] * seasonal_phase(day)
    }

    /// Noise-free predictand for latent value `latent` at gridpoint `p`.
    pub fn response(&self, config: &SynthConfig, p: usize, latent: f64) -> f64 {
        let u = latent - self.latent_center;
        let rho = config.nonlinear_weight;
        let s = config.saturation_scale;
        self.response_offset[p] + self.response_gain[p] * ((1.0 - rho) * u + rho * s * (u / s).tanh())
    }

    /// Standard deviation of the predictand noise on `day`.
    pub fn noise_std(&self, config: &SynthConfig, day: NoLeapDay) -> f64 {
        if Season::summer().contains(day.month()) {
            config.fine_noise * config.summer_noise_multiplier
        } else {
            config.fine_noise
        }
    }
}

fn seasonal_phase(day: NoLeapDay) -> f64 {
    (2.0 * PI * (day.day_of_year() as f64 - SEASONAL_PEAK_DAY) / DAYS_PER_YEAR as f64).cos()
}

/// Generator output.
#[derive(Clone, Debug)]
pub struct PseudoReality {
    /// `[T, channels, coarse_h, coarse_w]`.
    pub predictors: GridField,
    /// `[T, 1, fine_h, fine_w]`.
    pub predictand: GridField,
    pub truth: GroundTruth,
    /// Latent state `[T, fine_h * fine_w]`, kept only when requested.
    pub latent: Option<Array2<f64>>,
}

/// Everything needed to regenerate (and check) a synthetic data set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub generator: String,
    pub seed: u64,
    pub config: SynthConfig,
    pub truth: GroundTruth,
}

impl PseudoReality {
    pub fn manifest(&self, config: &SynthConfig, seed: u64) -> GeneratorManifest {
        GeneratorManifest {
            generator: "ensdown pseudo-reality v1".into(),
            seed,
            config: config.clone(),
            truth: self.truth.clone(),
        }
    }
}

/// Zero-mean, unit-RMS sum of a few random low-wavenumber plane waves.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, waves: usize) -> Vec<f64> {
    let mut f = vec![0.0; h * w];
    for _ in 0..waves {
        let ky = rng.random_range(0.3..1.5);
        let kx = rng.random_range(-1.5..1.5);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.5..1.0);
        for i in 0..h {
            for j in 0..w {
                let (y, x) = ((i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64);
                f[i * w + j] += amp * (2.0 * PI * (ky * y + kx * x) + phase).cos();
            }
        }
    }
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let rms = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    let rms = if rms > 0.0 { rms } else { 1.0 };
    f.iter().map(|v| (v - mean) / rms).collect()
}

fn draw_truth(config: &SynthConfig) -> GroundTruth {
    let (h, w) = (config.fine_height, config.fine_width);
    let mut rng = stream_rng(config.pattern_seed, "synth/patterns");
    let east_from = ((1.0 - config.high_signal_fraction) * w as f64).round() as usize;
    let high_signal: Vec<bool> = (0..h * w).map(|p| p % w >= east_from).collect();
    let pick = |hi: bool, high: f64, low: f64| if hi { high } else { low };

    let pattern: Vec<f64> = smooth_field(&mut rng, h, w, 4).iter().map(|v| 5.0 * v).collect();
    let wobble = smooth_field(&mut rng, h, w, 3);
    let seasonal_map: Vec<f64> = (0..h * w)
        .map(|p| pick(high_signal[p], 1.25, 0.75) + 0.1 * wobble[p])
        .collect();
    // Warming is strongest where the seasonal cycle is: continental
    // interiors heat up more than the maritime side of the domain.
    let warming_map = seasonal_map.clone();
    let modes = (0..config.latent_modes)
        .map(|_| smooth_field(&mut rng, h, w, 3))
        .collect();
    let wobble = smooth_field(&mut rng, h, w, 3);
    let response_gain = (0..h * w)
        .map(|p| pick(high_signal[p], 1.1, 0.6) + 0.05 * wobble[p])
        .collect();
    let wobble = smooth_field(&mut rng, h, w, 4);
    let response_offset = wobble.iter().map(|v| 14.0 + 3.0 * v).collect();
    let channel_gain = (0..config.channels)
        .map(|_| {
            let g: f64 = rng.random_range(0.5..1.5);
            if rng.random_bool(0.25) { -g } else { g }
        })
        .collect();
    let channel_offset = (0..config.channels).map(|_| rng.random_range(-50.0..300.0)).collect();
    let latent_center = pattern.iter().sum::<f64>() / pattern.len() as f64;
    GroundTruth {
        fine_shape: (h, w),
        pattern,
        seasonal_map,
        warming_map,
        high_signal,
        modes,
        latent_center,
        response_offset,
        response_gain,
        channel_gain,
        channel_offset,
    }
}

/// Evenly spaced cell-centre coordinates over `range`.
fn axis(range: (f64, f64), n: usize) -> Vec<f64> {
    let step = (range.1 - range.0) / n as f64;
    (0..n).map(|i| range.0 + (i as f64 + 0.5) * step).collect()
}

pub fn generate_pseudo_reality(config: &SynthConfig, seed: u64) -> Result<PseudoReality> {
    generate(config, seed, false)
}

/// As [`generate_pseudo_reality`], also returning the latent state.
pub fn generate_with_latent(config: &SynthConfig, seed: u64) -> Result<PseudoReality> {
    generate(config, seed, true)
}

fn generate(config: &SynthConfig, seed: u64, keep_latent: bool) -> Result<PseudoReality> {
    config.validate()?;
    let truth = draw_truth(config);
    let (fh, fw) = (config.fine_height, config.fine_width);
    let (ch, cw) = (config.coarse_height, config.coarse_width);
    let (bh, bw) = config.block();
    let (g, gc, n_ch) = (fh * fw, ch * cw, config.channels);
    let n_days = config.n_days();
    let time = GridField::daily_axis(NoLeapDay::year_start(config.start_year), n_days);

    let mut ar_rng = stream_rng(seed, "synth/latent");
    let mut coarse_rng = stream_rng(seed, "synth/coarse-noise");
    let mut fine_rng = stream_rng(seed, "synth/fine-noise");

    let phi = config.latent_autocorrelation;
    let innovation = config.latent_noise * (1.0 - phi * phi).sqrt();
    let mut z: Vec<f64> = (0..config.latent_modes)
        .map(|_| config.latent_noise * ar_rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut x = vec![0.0; n_days * n_ch * gc];
    let mut y = vec![0.0; n_days * g];
    let mut latent_out = keep_latent.then(|| vec![0.0; n_days * g]);
    let mut latent = vec![0.0; g];
    let mut block_mean = vec![0.0; gc];
    let block_norm = 1.0 / (bh * bw) as f64;

    for (t, &day) in time.iter().enumerate() {
        if t > 0 {
            for zk in z.iter_mut() {
                *zk = phi * *zk + innovation * ar_rng.sample::<f64, _>(StandardNormal);
            }
        }
        let season = seasonal_phase(day);
        let years = (day.year_fraction() - config.trend_start_year as f64).max(0.0);
        let trend = config.warming_rate * years / 10.0;
        for p in 0..g {
            let mut l = truth.pattern[p]
                + config.seasonal_amplitude * truth.seasonal_map[p] * season
                + trend * truth.warming_map[p];
            for (zk, mode) in z.iter().zip(&truth.modes) {
                l += zk * mode[p];
            }
            latent[p] = l;
        }
        let noise = truth.noise_std(config, day);
        let yt = &mut y[t * g..(t + 1) * g];
        for p in 0..g {
            let eps: f64 = fine_rng.sample(StandardNormal);
            yt[p] = truth.response(config, p, latent[p]) + noise * eps;
        }
        block_mean.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..fh {
            for j in 0..fw {
                block_mean[(i / bh) * cw + j / bw] += latent[i * fw + j] * block_norm;
            }
        }
        let xt = &mut x[t * n_ch * gc..(t + 1) * n_ch * gc];
        for c in 0..n_ch {
            for q in 0..gc {
                let eta: f64 = coarse_rng.sample(StandardNormal);
                xt[c * gc + q] = truth.channel_gain[c] * block_mean[q]
                    + truth.channel_offset[c]
                    + config.coarse_noise * eta;
            }
        }
        if let Some(out) = latent_out.as_mut() {
            out[t * g..(t + 1) * g].copy_from_slice(&latent);
        }
    }

    let (names, units): (Vec<_>, Vec<_>) = config.channel_names().into_iter().unzip();
    let predictors = GridField::new(
        Array4::from_shape_vec((n_days, n_ch, ch, cw), x).expect("sized above"),
        names,
        units,
        axis(config.lat_range, ch),
        axis(config.lon_range, cw),
        time.clone(),
    )?;
    let predictand = GridField::new(
        Array4::from_shape_vec((n_days, 1, fh, fw), y).expect("sized above"),
        vec!["tas".into()],
        vec!["degC".into()],
        axis(config.lat_range, fh),
        axis(config.lon_range, fw),
        time,
    )?;
    let latent = latent_out.map(|v| Array2::from_shape_vec((n_days, g), v).expect("sized above"));
    Ok(PseudoReality {
        predictors,
        predictand,
        truth,
        latent,
    })
}
