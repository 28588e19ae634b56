//! Model manifest document (JSON).

use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

/// Interpolation convention used for every activation upsampling.
pub const UPSAMPLING_CONVENTION: &str = "bilinear_half_pixel";

pub const LAYER_KINDS: &[&str] = &[
    "conv2d",
    "relu",
    "maxpool2d",
    "global_avgpool",
    "flatten",
    "linear",
    "softmax",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub input_shape: [usize; 4],
    pub class_count: usize,
    pub preprocessing: Preprocessing,
    #[serde(default = "default_upsampling")]
    pub upsampling: String,
    pub layers: Vec<LayerSpec>,
}

fn default_upsampling() -> String {
    UPSAMPLING_CONVENTION.to_string()
}

/// Per-channel normalization applied to `[0, 1]` pixel values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Preprocessing {
    pub fn imagenet() -> Self {
        Self {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// Layer kinds with their hyperparameters.
///
/// Parameterized kinds own a weight and a bias in the blob, in that order:
/// conv2d weight is `out x in x k x k`, linear weight is `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Maxpool2d {
        kernel_size: usize,
        stride: usize,
    },
    GlobalAvgpool,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
}

fn one() -> usize {
    1
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool2d { .. } => "maxpool2d",
            LayerKind::GlobalAvgpool => "global_avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Weight and bias shapes, if the layer is parameterized.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel_size, kernel_size],
                vec![out_channels],
            )),
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .unwrap_or(0)
    }
}
