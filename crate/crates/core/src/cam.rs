//! Class activation maps: Score-CAM, its two smoothed variants (noise on the
//! activation, noise on the masked input) and the Grad-CAM baseline.
//!
//! Every method ends with the same combination rule: each channel of the
//! target activation is upsampled to input resolution, weighted by its
//! channel score, summed and clamped at zero.
//!
//! Channel scores for the gradient-free methods are increases of confidence:
//! the class probability on the input masked by the normalized, upsampled
//! channel, minus the class probability on the all-zeros baseline. The
//! smoothed variants score `N` noisy versions per channel independently and
//! average the scores. Noise draws are keyed by `(seed, channel, sample)` so
//! the work can be spread over threads without changing any bit of the
//! result.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::noise::{gaussian_noise, NoiseError, NoiseSpec};
use crate::ops;
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum CamError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid explain config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "grad-cam")]
    GradCam,
    #[serde(rename = "score-cam")]
    ScoreCam,
    #[serde(rename = "ss-cam1")]
    SsCam1,
    #[serde(rename = "ss-cam2")]
    SsCam2,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::GradCam, Method::ScoreCam, Method::SsCam1, Method::SsCam2];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GradCam => "grad-cam",
            Method::ScoreCam => "score-cam",
            Method::SsCam1 => "ss-cam1",
            Method::SsCam2 => "ss-cam2",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected grad-cam, score-cam, ss-cam1 or ss-cam2)"))
    }
}

/// Which class to explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSelection {
    /// Argmax of the clean forward pass.
    Auto,
    Index(usize),
}

impl FromStr for ClassSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(ClassSelection::Auto);
        }
        s.parse()
            .map(ClassSelection::Index)
            .map_err(|_| format!("class must be `auto` or a non-negative integer, got `{s}`"))
    }
}

/// Reference input for the increase-of-confidence scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// All zeros in preprocessed units.
    #[default]
    Zeros,
}

/// Where the smoothing noise enters in the activation-smoothed variant.
/// Only the raw-activation placement is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePlacement {
    #[default]
    RawActivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub method: Method,
    pub layer: String,
    pub class: ClassSelection,
    pub n_samples: usize,
    pub sigma: f32,
    pub seed: u64,
    #[serde(default)]
    pub baseline: Baseline,
    #[serde(default)]
    pub noise_placement: NoisePlacement,
}

impl ExplainConfig {
    pub fn new(method: Method, layer: impl Into<String>) -> Self {
        Self {
            method,
            layer: layer.into(),
            class: ClassSelection::Auto,
            n_samples: 35,
            sigma: 2.0,
            seed: 0,
            baseline: Baseline::Zeros,
            noise_placement: NoisePlacement::RawActivation,
        }
    }

    pub fn with_class(mut self, class: usize) -> Self {
        self.class = ClassSelection::Index(class);
        self
    }

    pub fn with_smoothing(mut self, n_samples: usize, sigma: f32, seed: u64) -> Self {
        self.n_samples = n_samples;
        self.sigma = sigma;
        self.seed = seed;
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn validate(&self) -> Result<(), CamError> {
        if self.n_samples == 0 {
            return Err(CamError::Config("n_samples must be at least 1".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(CamError::Config(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Per-channel weights of the target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights {
    pub weights: Vec<f32>,
    pub class_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `1 x 1 x H x W` at model input resolution, all values >= 0.
    pub values: Tensor,
    pub class_index: usize,
    pub layer: String,
    pub method: Method,
    pub n_samples: usize,
    pub sigma: f32,
    pub seed: u64,
}

/// Sidecar document written next to a saved map blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMetadata {
    pub method: Method,
    pub layer: String,
    pub class_index: usize,
    pub n_samples: usize,
    pub sigma: f32,
    pub seed: u64,
    pub shape: Vec<usize>,
    pub baseline: Baseline,
    pub upsampling: String,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn metadata(&self) -> MapMetadata {
        MapMetadata {
            method: self.method,
            layer: self.layer.clone(),
            class_index: self.class_index,
            n_samples: self.n_samples,
            sigma: self.sigma,
            seed: self.seed,
            shape: self.values.shape().to_vec(),
            baseline: Baseline::Zeros,
            upsampling: crate::model::manifest::UPSAMPLING_CONVENTION.to_string(),
        }
    }
}

/// Min-max normalization to `[0, 1]`. A constant map carries no spatial
/// information and normalizes to all zeros.
pub fn normalize_map(map: &Tensor) -> Tensor {
    let lo = map.min();
    let hi = map.max();
    if !(hi > lo) {
        return map.map(|_| 0.0);
    }
    let lo64 = f64::from(lo);
    let range = f64::from(hi) - lo64;
    map.map(|v| ((f64::from(v) - lo64) / range) as f32)
}

/// Increase of confidence for one activation channel: `f_c(X * s(U(A))) - f_c(X_b)`.
pub fn compute_cic(
    model: &Model,
    input: &Tensor,
    activation_channel: &Tensor,
    class_index: usize,
) -> Result<f32, CamError> {
    let scorer = Scorer::new(model, input, class_index)?;
    let (h, w) = model.input_hw();
    let up = ops::upsample_bilinear(activation_channel, h, w)?;
    let score = scorer.cic(&input.mul_spatial_mask(&normalize_map(&up))?)?;
    Ok(score as f32)
}

/// Dispatches on `cfg.method`.
pub fn explain(model: &Model, input: &Tensor, cfg: &ExplainConfig) -> Result<SaliencyMap, CamError> {
    match cfg.method {
        Method::GradCam => grad_cam(model, input, cfg),
        Method::ScoreCam => score_cam(model, input, cfg),
        Method::SsCam1 => ss_cam1(model, input, cfg),
        Method::SsCam2 => ss_cam2(model, input, cfg),
    }
}

pub fn score_cam(model: &Model, input: &Tensor, cfg: &ExplainConfig) -> Result<SaliencyMap, CamError> {
    build_map(model, input, &cfg.clone().with_method(Method::ScoreCam))
}

pub fn ss_cam1(model: &Model, input: &Tensor, cfg: &ExplainConfig) -> Result<SaliencyMap, CamError> {
    build_map(model, input, &cfg.clone().with_method(Method::SsCam1))
}

pub fn ss_cam2(model: &Model, input: &Tensor, cfg: &ExplainConfig) -> Result<SaliencyMap, CamError> {
    build_map(model, input, &cfg.clone().with_method(Method::SsCam2))
}

pub fn grad_cam(model: &Model, input: &Tensor, cfg: &ExplainConfig) -> Result<SaliencyMap, CamError> {
    build_map(model, input, &cfg.clone().with_method(Method::GradCam))
}

/// Channel weights for `cfg.method` without forming the map.
pub fn channel_weights(model: &Model, input: &Tensor, cfg: &ExplainConfig) -> Result<ChannelWeights, CamError> {
    let target = Target::new(model, input, cfg)?;
    let weights = target.weights(model, input, cfg)?;
    Ok(ChannelWeights {
        weights,
        class_index: target.class_index,
    })
}

/// `ReLU(sum_k weights[k] * channels[k])`, summed in channel order.
pub fn combine(weights: &[f32], channels: &[Tensor]) -> Result<Tensor, CamError> {
    if weights.len() != channels.len() || channels.is_empty() {
        return Err(CamError::Config(format!(
            "{} weights for {} channels",
            weights.len(),
            channels.len()
        )));
    }
    let shape = channels[0].shape().to_vec();
    let mut acc = vec![0.0f64; channels[0].len()];
    for (&wk, ch) in weights.iter().zip(channels) {
        if ch.shape() != shape.as_slice() {
            return Err(ShapeError::ShapeMismatch {
                op: "combine",
                lhs: shape,
                rhs: ch.shape().to_vec(),
            }
            .into());
        }
        let wk = f64::from(wk);
        for (a, &v) in acc.iter_mut().zip(ch.data()) {
            *a += wk * f64::from(v);
        }
    }
    Ok(Tensor::new(shape, acc.into_iter().map(|v| v.max(0.0) as f32).collect())?)
}

fn build_map(model: &Model, input: &Tensor, cfg: &ExplainConfig) -> Result<SaliencyMap, CamError> {
    let target = Target::new(model, input, cfg)?;
    let weights = target.weights(model, input, cfg)?;
    let values = combine(&weights, &target.upsampled)?;
    Ok(SaliencyMap {
        values,
        class_index: target.class_index,
        layer: cfg.layer.clone(),
        method: cfg.method,
        n_samples: cfg.n_samples,
        sigma: cfg.sigma,
        seed: cfg.seed,
    })
}

/// Clean forward pass with the target activation captured and upsampled.
struct Target {
    activation: Tensor,
    upsampled: Vec<Tensor>,
    class_index: usize,
}

impl Target {
    fn new(model: &Model, input: &Tensor, cfg: &ExplainConfig) -> Result<Self, CamError> {
        cfg.validate()?;
        let trace = model.forward(input, Some(&cfg.layer))?;
        let activation = trace.captured.clone().expect("capture was requested");
        if activation.rank() != 4 {
            return Err(CamError::Config(format!(
                "layer `{}` output has shape {:?}; a spatial NCHW activation is required",
                cfg.layer,
                activation.shape()
            )));
        }
        let class_index = match cfg.class {
            ClassSelection::Auto => trace.predicted_class(),
            ClassSelection::Index(c) if c < model.class_count() => c,
            ClassSelection::Index(c) => {
                return Err(ModelError::ClassIndex {
                    index: c,
                    count: model.class_count(),
                }
                .into())
            }
        };
        let (h, w) = model.input_hw();
        let channels = activation.shape()[1];
        let upsampled = (0..channels)
            .map(|k| ops::upsample_bilinear(&activation.channel(k)?, h, w))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            activation,
            upsampled,
            class_index,
        })
    }

    fn weights(&self, model: &Model, input: &Tensor, cfg: &ExplainConfig) -> Result<Vec<f32>, CamError> {
        match cfg.method {
            Method::GradCam => self.gradient_weights(model, input, cfg),
            Method::ScoreCam => {
                let scorer = Scorer::new(model, input, self.class_index)?;
                self.upsampled
                    .par_iter()
                    .map(|up| {
                        let masked = input.mul_spatial_mask(&normalize_map(up))?;
                        Ok(scorer.cic(&masked)? as f32)
                    })
                    .collect()
            }
            Method::SsCam1 => {
                let scorer = Scorer::new(model, input, self.class_index)?;
                let (h, w) = model.input_hw();
                let n = cfg.n_samples;
                let k_count = self.upsampled.len();
                let scores: Vec<f64> = (0..k_count * n)
                    .into_par_iter()
                    .map(|job| {
                        let (k, i) = (job / n, job % n);
                        let raw = self.activation.channel(k)?;
                        let noise = gaussian_noise(raw.shape(), noise_spec(cfg, k, i))?;
                        let up = ops::upsample_bilinear(&raw.add(&noise)?, h, w)?;
                        scorer.cic(&input.mul_spatial_mask(&normalize_map(&up))?)
                    })
                    .collect::<Result<_, CamError>>()?;
                Ok(channel_means(&scores, n))
            }
            Method::SsCam2 => {
                let scorer = Scorer::new(model, input, self.class_index)?;
                let n = cfg.n_samples;
                let masked: Vec<Tensor> = self
                    .upsampled
                    .iter()
                    .map(|up| input.mul_spatial_mask(&normalize_map(up)))
                    .collect::<Result<_, _>>()?;
                let scores: Vec<f64> = (0..masked.len() * n)
                    .into_par_iter()
                    .map(|job| {
                        let (k, i) = (job / n, job % n);
                        let noise = gaussian_noise(masked[k].shape(), noise_spec(cfg, k, i))?;
                        scorer.cic(&masked[k].add(&noise)?)
                    })
                    .collect::<Result<_, CamError>>()?;
                Ok(channel_means(&scores, n))
            }
        }
    }

    fn gradient_weights(&self, model: &Model, input: &Tensor, cfg: &ExplainConfig) -> Result<Vec<f32>, CamError> {
        let g = model.gradient_wrt_activation(input, &cfg.layer, self.class_index)?;
        let (_, k, h, w) = g.gradient.dims4("grad_cam")?;
        let area = (h * w) as f64;
        Ok((0..k)
            .map(|c| {
                let plane = &g.gradient.data()[c * h * w..(c + 1) * h * w];
                (plane.iter().map(|&v| f64::from(v)).sum::<f64>() / area) as f32
            })
            .collect())
    }
}

fn noise_spec(cfg: &ExplainConfig, channel: usize, sample: usize) -> NoiseSpec {
    NoiseSpec::new(cfg.sigma, cfg.seed, ((channel as u64) << 32) | sample as u64)
}

/// Mean of each consecutive run of `n` scores, summed in sample order.
fn channel_means(scores: &[f64], n: usize) -> Vec<f32> {
    scores
        .chunks(n)
        .map(|run| (run.iter().sum::<f64>() / n as f64) as f32)
        .collect()
}

/// Class-probability scorer against the zero baseline.
struct Scorer<'a> {
    model: &'a Model,
    class_index: usize,
    baseline: f64,
}

impl<'a> Scorer<'a> {
    fn new(model: &'a Model, input: &Tensor, class_index: usize) -> Result<Self, CamError> {
        if class_index >= model.class_count() {
            return Err(ModelError::ClassIndex {
                index: class_index,
                count: model.class_count(),
            }
            .into());
        }
        let zeros = Tensor::zeros(input.shape().to_vec())?;
        let baseline = f64::from(model.forward(&zeros, None)?.probability(class_index));
        Ok(Self {
            model,
            class_index,
            baseline,
        })
    }

    fn cic(&self, x: &Tensor) -> Result<f64, CamError> {
        let p = self.model.forward(x, None)?.probability(self.class_index);
        Ok(f64::from(p) - self.baseline)
    }
}
