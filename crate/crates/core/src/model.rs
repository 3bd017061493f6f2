//! The DeepESD network: three same-padded conv + ReLU stages, a flatten, and
//! one dense layer emitting `[μ, s]` for every predictand gridpoint, with
//! `σ² = (softplus(s) + sigma_floor)²`.

use std::io::Read;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const PARAMS_MAGIC: &[u8] = b"ENSDOWN-PARAMS-v1";

/// Samples per forward chunk when predicting long time series.
const PREDICT_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepEsdConfig {
    pub input_channels: usize,
    pub coarse_height: usize,
    pub coarse_width: usize,
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub n_output_gridpoints: usize,
    pub sigma_floor: f64,
}

impl DeepEsdConfig {
    pub fn new(input_channels: usize, coarse_height: usize, coarse_width: usize, n_output_gridpoints: usize) -> Self {
        DeepEsdConfig {
            input_channels,
            coarse_height,
            coarse_width,
            conv_channels: vec![50, 25, 10],
            kernel_size: 3,
            n_output_gridpoints,
            sigma_floor: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.conv_channels.len() != 3 || self.conv_channels.contains(&0) {
            return bad(format!(
                "conv_channels must list three positive widths, got {:?}",
                self.conv_channels
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if !(self.sigma_floor > 0.0) || !self.sigma_floor.is_finite() {
            return bad(format!("sigma_floor must be positive, got {}", self.sigma_floor));
        }
        if self.input_channels == 0
            || self.coarse_height == 0
            || self.coarse_width == 0
            || self.n_output_gridpoints == 0
        {
            return bad("grid and channel dimensions must be positive".into());
        }
        Ok(())
    }

    pub fn flat_features(&self) -> usize {
        self.conv_channels[2] * self.coarse_height * self.coarse_width
    }

    /// Parameter tensors in storage order: `(name, shape)`.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        let mut shapes = Vec::with_capacity(8);
        let mut c_in = self.input_channels;
        for (i, &c_out) in self.conv_channels.iter().enumerate() {
            shapes.push((format!("conv{}.kernel", i + 1), vec![c_out, c_in, k, k]));
            shapes.push((format!("conv{}.bias", i + 1), vec![c_out]));
            c_in = c_out;
        }
        let out = 2 * self.n_output_gridpoints;
        shapes.push(("dense.weight".into(), vec![self.flat_features(), out]));
        shapes.push(("dense.bias".into(), vec![out]));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Every trainable tensor of one network, in [`DeepEsdConfig::layer_shapes`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: DeepEsdConfig,
    pub seed: u64,
    pub tensors: Vec<Tensor>,
}

/// Per-sample, per-gridpoint Gaussian parameters from one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mu: Array2<f64>,
    pub sigma2: Array2<f64>,
}

impl Prediction {
    pub fn n_time(&self) -> usize {
        self.mu.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.mu.ncols()
    }
}

/// He-normal weights (variance `2 / fan_in`) and zero biases, deterministic in `seed`.
pub fn init_params(config: &DeepEsdConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .layer_shapes()
        .into_iter()
        .map(|(_, shape)| {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            Tensor::new(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams {
        config: config.clone(),
        seed,
        tensors,
    })
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter tensor on `tape`.
    pub fn to_tape(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(requires_grad)))
            .collect()
    }

    /// Validates a shape `[N, C, H, W]` against the config.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match *shape {
            [_, ch, h, w] if ch == c.input_channels && h == c.coarse_height && w == c.coarse_width => Ok(()),
            _ => Err(Error::shape(
                "forward",
                format!(
                    "expected input [N, {}, {}, {}], got {shape:?}",
                    c.input_channels, c.coarse_height, c.coarse_width
                ),
            )),
        }
    }
}

/// Builds the network graph on `tape`; returns the `(μ, σ²)` nodes.
pub fn forward_on_tape(config: &DeepEsdConfig, tape: &mut Tape, params: &[Var], x: Var) -> Result<(Var, Var)> {
    let mut h = x;
    for layer in 0..3 {
        h = tape.conv2d(h, params[2 * layer], params[2 * layer + 1])?;
        h = tape.relu(h)?;
    }
    let flat = tape.flatten(h)?;
    let out = tape.dense(flat, params[6], params[7])?;
    let g = config.n_output_gridpoints;
    let mu = tape.columns(out, 0, g)?;
    let raw = tape.columns(out, g, g)?;
    let sigma = tape.softplus(raw)?;
    let sigma = tape.add_scalar(sigma, config.sigma_floor)?;
    let sigma2 = tape.square(sigma)?;
    Ok((mu, sigma2))
}

/// Inference over `x` of shape `[N, C, H, W]`, processed in fixed-size chunks.
pub fn forward(params: &ModelParams, x: &Tensor) -> Result<Prediction> {
    params.check_input(x.shape())?;
    let n = x.shape()[0];
    let per_sample: usize = x.shape()[1..].iter().product();
    let g = params.config.n_output_gridpoints;
    let mut mu = Vec::with_capacity(n * g);
    let mut sigma2 = Vec::with_capacity(n * g);
    for chunk in x.data().chunks(PREDICT_CHUNK * per_sample) {
        let rows = chunk.len() / per_sample;
        let mut shape = x.shape().to_vec();
        shape[0] = rows;
        let mut tape = Tape::new();
        let vars = params.to_tape(&mut tape, false);
        let xv = tape.leaf(Tensor::new(shape, chunk.to_vec())?);
        let (m, s) = forward_on_tape(&params.config, &mut tape, &vars, xv)?;
        mu.extend_from_slice(tape.value(m).data());
        sigma2.extend_from_slice(tape.value(s).data());
    }
    let shape = (n, g);
    Ok(Prediction {
        mu: Array2::from_shape_vec(shape, mu).expect("n*g values"),
        sigma2: Array2::from_shape_vec(shape, sigma2).expect("n*g values"),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsHeader {
    config: DeepEsdConfig,
    seed: u64,
    param_count: usize,
    layers: Vec<LayerEntry>,
    created_by: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    shape: Vec<usize>,
}

/// Magic, little-endian `u64` header length, JSON header, then the raw
/// little-endian `f64` payload in layer order.
pub fn save_params(params: &ModelParams) -> Result<Vec<u8>> {
    let header = ParamsHeader {
        config: params.config.clone(),
        seed: params.seed,
        param_count: params.param_count(),
        layers: params
            .config
            .layer_shapes()
            .into_iter()
            .map(|(name, shape)| LayerEntry { name, shape })
            .collect(),
        created_by: concat!("ensdown ", env!("CARGO_PKG_VERSION")).to_string(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PARAMS_MAGIC.len() + 8 + json.len() + 8 * header.param_count);
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a params stream; when `expected` is given the embedded config must match it.
pub fn load_params(bytes: &[u8], expected: Option<&DeepEsdConfig>) -> Result<ModelParams> {
    let corrupt = |detail: String| Error::Corrupt {
        kind: "params",
        detail,
    };
    let mut reader = bytes;
    let mut magic = [0u8; PARAMS_MAGIC.len()];
    reader
        .read_exact(&mut magic)
        .map_err(|_| corrupt("stream shorter than the magic string".into()))?;
    if magic != PARAMS_MAGIC {
        return Err(corrupt("bad magic string".into()));
    }
    let mut len = [0u8; 8];
    reader
        .read_exact(&mut len)
        .map_err(|_| corrupt("missing header length".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > reader.len() {
        return Err(corrupt(format!("header length {len} exceeds stream")));
    }
    let (json, payload) = reader.split_at(len);
    let header: ParamsHeader =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
    header.config.validate()?;
    if let Some(want) = expected {
        if *want != header.config {
            return Err(Error::ConfigMismatch(format!(
                "file was written for {:?}, expected {:?}",
                header.config, want
            )));
        }
    }
    let shapes = header.config.layer_shapes();
    let declared: Vec<_> = header.layers.iter().map(|l| l.shape.clone()).collect();
    if declared != shapes.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>() {
        return Err(corrupt("layer table disagrees with config".into()));
    }
    let count = header.config.param_count();
    if header.param_count != count || payload.len() != 8 * count {
        return Err(corrupt(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            8 * count
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = shapes
        .into_iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams {
        config: header.config,
        seed: header.seed,
        tensors,
    })
}
