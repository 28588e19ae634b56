//! CNN inference runtime: manifest loading, forward passes with activation
//! capture, and reverse-mode gradients of a class logit with respect to an
//! intermediate activation.

pub mod blob;
pub mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use manifest::{LayerKind, LayerSpec, Manifest, Preprocessing};

use crate::ops;
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path} at `{field}` (line {line}, column {column}): {message}")]
    Parse {
        path: PathBuf,
        field: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("layer #{index} ({name}) has unsupported kind `{kind}`")]
    UnsupportedLayer {
        index: usize,
        name: String,
        kind: String,
    },
    #[error("weight blob integrity: {0}")]
    Integrity(String),
    #[error("invalid model: {0}")]
    Validation(String),
    #[error("layer {layer}: {message}")]
    LayerShape { layer: String, message: String },
    #[error("unknown layer `{name}`; available layers: {}", available.join(", "))]
    UnknownLayer { name: String, available: Vec<String> },
    #[error("cannot take gradients at layer `{layer}`: {reason}")]
    UnsupportedGradientTarget { layer: String, reason: String },
    #[error("class index {index} out of range for {count} classes")]
    ClassIndex { index: usize, count: usize },
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone)]
struct Params {
    weight: Tensor,
    bias: Tensor,
}

/// A validated, immutable network.
#[derive(Debug, Clone)]
pub struct Model {
    manifest: Manifest,
    params: Vec<Option<Params>>,
    output_shapes: Vec<Vec<usize>>,
    /// Index one past the last layer whose output is the logit vector.
    logits_end: usize,
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub captured: Option<Tensor>,
}

impl ForwardTrace {
    pub fn probability(&self, class_index: usize) -> f32 {
        self.probabilities.data()[class_index]
    }

    pub fn predicted_class(&self) -> usize {
        self.probabilities.argmax()
    }
}

/// Gradient of a class logit with respect to a layer's output, together with
/// the forward pass that produced it.
#[derive(Debug, Clone)]
pub struct ActivationGradient {
    pub trace: ForwardTrace,
    pub activation: Tensor,
    pub gradient: Tensor,
}

enum Tape {
    Input(Tensor),
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Shape(Vec<usize>),
}

impl Model {
    pub fn load(manifest_path: &Path, weights_path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(manifest_path).map_err(|source| ModelError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        let manifest = parse_manifest(&text, manifest_path)?;
        let bytes = fs::read(weights_path).map_err(|source| ModelError::Io {
            path: weights_path.to_path_buf(),
            source,
        })?;
        let values = blob::decode(&bytes).map_err(|e| ModelError::Integrity(e.to_string()))?;
        Self::from_parts(manifest, &values)
    }

    /// Validates a manifest against a flat parameter vector.
    pub fn from_parts(manifest: Manifest, values: &[f32]) -> Result<Self, ModelError> {
        let expected: usize = manifest.layers.iter().map(|l| l.kind.param_count()).sum();
        if values.len() != expected {
            return Err(ModelError::Integrity(format!(
                "manifest declares {expected} parameters ({} bytes of payload), blob holds {} ({} bytes)",
                expected * 4,
                values.len(),
                values.len() * 4
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::Integrity(format!(
                "parameter #{bad} is not finite"
            )));
        }
        let output_shapes = validate(&manifest)?;
        let mut offset = 0;
        let mut params = Vec::with_capacity(manifest.layers.len());
        for layer in &manifest.layers {
            params.push(match layer.kind.param_shapes() {
                Some((ws, bs)) => {
                    let wn: usize = ws.iter().product();
                    let bn: usize = bs.iter().product();
                    let weight = Tensor::new(ws, values[offset..offset + wn].to_vec())?;
                    let bias = Tensor::new(bs, values[offset + wn..offset + wn + bn].to_vec())?;
                    offset += wn + bn;
                    Some(Params { weight, bias })
                }
                None => None,
            });
        }
        let logits_end = match manifest.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Softmax) => manifest.layers.len() - 1,
            _ => manifest.layers.len(),
        };
        Ok(Self {
            manifest,
            params,
            output_shapes,
            logits_end,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.manifest.input_shape
    }

    /// `(height, width)` of the model input.
    pub fn input_hw(&self) -> (usize, usize) {
        (self.manifest.input_shape[2], self.manifest.input_shape[3])
    }

    pub fn class_count(&self) -> usize {
        self.manifest.class_count
    }

    pub fn preprocessing(&self) -> &Preprocessing {
        &self.manifest.preprocessing
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.manifest.layers
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.manifest.layers.iter().map(|l| l.name.clone()).collect()
    }

    /// Parameters in blob order.
    pub fn flat_params(&self) -> Vec<f32> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).copied())
            .collect()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize, ModelError> {
        self.manifest
            .layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| ModelError::UnknownLayer {
                name: name.to_string(),
                available: self.layer_names(),
            })
    }

    pub fn output_shape(&self, name: &str) -> Result<&[usize], ModelError> {
        Ok(&self.output_shapes[self.layer_index(name)?])
    }

    /// Name of the last conv2d layer, the default explanation target.
    pub fn last_conv_layer(&self) -> Option<&str> {
        self.manifest
            .layers
            .iter()
            .rev()
            .find(|l| matches!(l.kind, LayerKind::Conv2d { .. }))
            .map(|l| l.name.as_str())
    }

    fn check_input(&self, input: &Tensor) -> Result<(), ModelError> {
        if input.shape() != self.manifest.input_shape {
            return Err(ModelError::InputShape {
                expected: self.manifest.input_shape.to_vec(),
                got: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor, capture: Option<&str>) -> Result<ForwardTrace, ModelError> {
        self.check_input(input)?;
        let capture_at = capture.map(|n| self.layer_index(n)).transpose()?;
        let mut captured = None;
        let mut x = input.clone();
        for idx in 0..self.logits_end {
            x = self.apply(idx, &x, None)?;
            if capture_at == Some(idx) {
                captured = Some(x.clone());
            }
        }
        self.finish(x, captured)
    }

    /// Class probabilities only.
    pub fn probabilities(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward(input, None)?.probabilities)
    }

    /// Runs the network up to and including `layer`.
    pub fn forward_until(&self, input: &Tensor, layer: &str) -> Result<Tensor, ModelError> {
        self.check_input(input)?;
        let end = self.layer_index(layer)?;
        let mut x = input.clone();
        for idx in 0..=end {
            x = self.apply(idx, &x, None)?;
        }
        Ok(x)
    }

    /// Resumes the network from the output of `layer` and returns the trace.
    pub fn forward_from(&self, layer: &str, activation: &Tensor) -> Result<ForwardTrace, ModelError> {
        let start = self.layer_index(layer)?;
        if activation.shape() != self.output_shapes[start].as_slice() {
            return Err(ModelError::InputShape {
                expected: self.output_shapes[start].clone(),
                got: activation.shape().to_vec(),
            });
        }
        let mut x = activation.clone();
        for idx in start + 1..self.logits_end {
            x = self.apply(idx, &x, None)?;
        }
        self.finish(x, None)
    }

    /// Reverse-mode gradient of the pre-softmax logit `class_index` with
    /// respect to the output of `layer`.
    pub fn gradient_wrt_activation(
        &self,
        input: &Tensor,
        layer: &str,
        class_index: usize,
    ) -> Result<ActivationGradient, ModelError> {
        self.check_input(input)?;
        if class_index >= self.class_count() {
            return Err(ModelError::ClassIndex {
                index: class_index,
                count: self.class_count(),
            });
        }
        let target = self.layer_index(layer)?;
        if self.output_shapes[target].len() != 4 || target + 1 >= self.logits_end {
            return Err(ModelError::UnsupportedGradientTarget {
                layer: layer.to_string(),
                reason: "target must be a spatial (NCHW) activation ahead of the classifier head"
                    .to_string(),
            });
        }

        let mut x = input.clone();
        for idx in 0..=target {
            x = self.apply(idx, &x, None)?;
        }
        let activation = x.clone();
        let mut tape = Vec::with_capacity(self.logits_end - target - 1);
        for idx in target + 1..self.logits_end {
            let mut entry = None;
            x = self.apply(idx, &x, Some(&mut entry))?;
            tape.push(entry.expect("apply always records when asked"));
        }
        let trace = self.finish(x, Some(activation.clone()))?;

        let c = self.class_count();
        let mut grad = Tensor::from_fn(vec![1, c], |i| if i == class_index { 1.0 } else { 0.0 })?;
        for (idx, entry) in (target + 1..self.logits_end).zip(tape).rev() {
            grad = self.backward(idx, &grad, entry)?;
        }
        Ok(ActivationGradient {
            trace,
            activation,
            gradient: grad,
        })
    }

    fn finish(&self, logits: Tensor, captured: Option<Tensor>) -> Result<ForwardTrace, ModelError> {
        let probabilities = ops::softmax(&logits)?;
        Ok(ForwardTrace {
            logits,
            probabilities,
            captured,
        })
    }

    fn apply(&self, idx: usize, x: &Tensor, record: Option<&mut Option<Tape>>) -> Result<Tensor, ModelError> {
        let layer = &self.manifest.layers[idx];
        let params = self.params[idx].as_ref();
        let wrap = |e: ShapeError| ModelError::LayerShape {
            layer: layer.name.clone(),
            message: e.to_string(),
        };
        let (out, entry) = match layer.kind {
            LayerKind::Conv2d { stride, padding, .. } => {
                let p = params.expect("validated conv params");
                let y = ops::conv2d(x, &p.weight, &p.bias, stride, padding).map_err(wrap)?;
                (y, Tape::Shape(x.shape().to_vec()))
            }
            LayerKind::Relu => (ops::relu(x), Tape::Input(x.clone())),
            LayerKind::Maxpool2d { kernel_size, stride } => {
                let pooled = ops::maxpool2d(x, kernel_size, stride).map_err(wrap)?;
                (
                    pooled.output,
                    Tape::Pool {
                        input_shape: x.shape().to_vec(),
                        argmax: pooled.argmax,
                    },
                )
            }
            LayerKind::GlobalAvgpool => (
                ops::global_avgpool(x).map_err(wrap)?,
                Tape::Shape(x.shape().to_vec()),
            ),
            LayerKind::Flatten => {
                let n = x.shape()[0];
                let f = x.len() / n;
                (x.clone().reshape(vec![n, f])?, Tape::Shape(x.shape().to_vec()))
            }
            LayerKind::Linear { .. } => {
                let p = params.expect("validated linear params");
                (
                    ops::linear(x, &p.weight, &p.bias).map_err(wrap)?,
                    Tape::Shape(x.shape().to_vec()),
                )
            }
            LayerKind::Softmax => (ops::softmax(x).map_err(wrap)?, Tape::Shape(x.shape().to_vec())),
        };
        if let Some(slot) = record {
            *slot = Some(entry);
        }
        Ok(out)
    }

    fn backward(&self, idx: usize, grad: &Tensor, entry: Tape) -> Result<Tensor, ModelError> {
        let layer = &self.manifest.layers[idx];
        let wrap = |e: ShapeError| ModelError::LayerShape {
            layer: layer.name.clone(),
            message: e.to_string(),
        };
        let out = match (&layer.kind, entry) {
            (LayerKind::Conv2d { stride, padding, .. }, Tape::Shape(shape)) => {
                let p = self.params[idx].as_ref().expect("validated conv params");
                ops::conv2d_input_grad(grad, &p.weight, &shape, *stride, *padding)
            }
            (LayerKind::Relu, Tape::Input(input)) => ops::relu_grad(grad, &input),
            (LayerKind::Maxpool2d { .. }, Tape::Pool { input_shape, argmax }) => {
                ops::maxpool2d_grad(grad, &argmax, &input_shape)
            }
            (LayerKind::GlobalAvgpool, Tape::Shape(shape)) => ops::global_avgpool_grad(grad, &shape),
            (LayerKind::Flatten, Tape::Shape(shape)) => grad.clone().reshape(shape),
            (LayerKind::Linear { .. }, Tape::Shape(_)) => {
                let p = self.params[idx].as_ref().expect("validated linear params");
                ops::linear_input_grad(grad, &p.weight)
            }
            _ => {
                return Err(ModelError::UnsupportedGradientTarget {
                    layer: layer.name.clone(),
                    reason: format!("no gradient rule for {}", layer.kind.name()),
                })
            }
        };
        out.map_err(wrap)
    }

    /// Writes the manifest (pretty JSON) and the weight blob.
    pub fn save(&self, manifest_path: &Path, weights_path: &Path) -> Result<(), ModelError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ModelError::Io { path, source }
        };
        let mut text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| ModelError::Validation(e.to_string()))?;
        text.push('\n');
        fs::write(manifest_path, text).map_err(io(manifest_path))?;
        fs::write(weights_path, blob::encode(&self.flat_params())).map_err(io(weights_path))?;
        Ok(())
    }
}

/// Parses a manifest document, reporting unknown layer kinds separately from
/// structural errors.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest, ModelError> {
    let parse_err = |field: String, e: &serde_json::Error| ModelError::Parse {
        path: path.to_path_buf(),
        field,
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    };
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| parse_err("<document>".into(), &e))?;
    if let Some(layers) = raw.get("layers").and_then(|l| l.as_array()) {
        for (index, layer) in layers.iter().enumerate() {
            if let Some(kind) = layer.get("kind").and_then(|k| k.as_str()) {
                if !manifest::LAYER_KINDS.contains(&kind) {
                    return Err(ModelError::UnsupportedLayer {
                        index,
                        name: layer
                            .get("name")
                            .and_then(|n| n.as_str())
                            .unwrap_or("<unnamed>")
                            .to_string(),
                        kind: kind.to_string(),
                    });
                }
            }
        }
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        parse_err(field, e.inner())
    })
}

/// Checks manifest-level invariants and propagates shapes through every
/// layer, returning each layer's output shape.
fn validate(m: &Manifest) -> Result<Vec<Vec<usize>>, ModelError> {
    let invalid = |msg: String| Err(ModelError::Validation(msg));
    if m.format_version != manifest::FORMAT_VERSION {
        return invalid(format!("unsupported format_version {}", m.format_version));
    }
    if m.upsampling != manifest::UPSAMPLING_CONVENTION {
        return invalid(format!("unsupported upsampling convention `{}`", m.upsampling));
    }
    let [n, c, h, w] = m.input_shape;
    if n != 1 || c == 0 || h == 0 || w == 0 {
        return invalid(format!(
            "input_shape must be [1, C, H, W] with positive dims, got {:?}",
            m.input_shape
        ));
    }
    if m.class_count == 0 {
        return invalid("class_count must be positive".into());
    }
    let p = &m.preprocessing;
    if p.mean.len() != 3 || p.std.len() != 3 {
        return invalid("preprocessing mean and std must have exactly 3 components".into());
    }
    if c != 3 {
        return invalid(format!("model input must have 3 color channels, got {c}"));
    }
    if p.std.iter().any(|&s| !(s > 0.0)) || p.mean.iter().any(|v| !v.is_finite()) {
        return invalid("preprocessing std must be positive and mean finite".into());
    }
    if m.layers.is_empty() {
        return invalid("model has no layers".into());
    }
    let mut names = std::collections::HashSet::new();
    for l in &m.layers {
        if !names.insert(l.name.as_str()) {
            return invalid(format!("duplicate layer name `{}`", l.name));
        }
    }

    let mut shape = m.input_shape.to_vec();
    let mut shapes = Vec::with_capacity(m.layers.len());
    let last = m.layers.len() - 1;
    for (idx, layer) in m.layers.iter().enumerate() {
        let err = |message: String| {
            Err(ModelError::LayerShape {
                layer: layer.name.clone(),
                message,
            })
        };
        let need4 = |shape: &[usize]| -> Result<[usize; 4], ModelError> {
            match *shape {
                [a, b, c, d] => Ok([a, b, c, d]),
                _ => Err(ModelError::LayerShape {
                    layer: layer.name.clone(),
                    message: format!(
                        "{} needs an NCHW input but receives shape {shape:?}",
                        layer.kind.name()
                    ),
                }),
            }
        };
        shape = match layer.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                padding,
            } => {
                let [n, c, h, w] = need4(&shape)?;
                if c != in_channels {
                    return err(format!("in_channels {in_channels} but input has {c} channels"));
                }
                if out_channels == 0 || kernel_size == 0 || stride == 0 {
                    return err("out_channels, kernel_size and stride must be positive".into());
                }
                if kernel_size > h + 2 * padding || kernel_size > w + 2 * padding {
                    return err(format!(
                        "kernel {kernel_size} does not fit {h}x{w} input with padding {padding}"
                    ));
                }
                vec![
                    n,
                    out_channels,
                    (h + 2 * padding - kernel_size) / stride + 1,
                    (w + 2 * padding - kernel_size) / stride + 1,
                ]
            }
            LayerKind::Relu => shape,
            LayerKind::Maxpool2d { kernel_size, stride } => {
                let [n, c, h, w] = need4(&shape)?;
                if kernel_size == 0 || stride == 0 {
                    return err("kernel_size and stride must be positive".into());
                }
                if kernel_size > h || kernel_size > w {
                    return err(format!("pool kernel {kernel_size} larger than {h}x{w} input"));
                }
                vec![n, c, (h - kernel_size) / stride + 1, (w - kernel_size) / stride + 1]
            }
            LayerKind::GlobalAvgpool => {
                let [n, c, _, _] = need4(&shape)?;
                vec![n, c]
            }
            LayerKind::Flatten => vec![shape[0], shape[1..].iter().product()],
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                if shape.len() != 2 {
                    return err(format!("linear needs an NxF input but receives {shape:?}"));
                }
                if shape[1] != in_features {
                    return err(format!(
                        "in_features {in_features} but input has {} features",
                        shape[1]
                    ));
                }
                if out_features == 0 {
                    return err("out_features must be positive".into());
                }
                vec![shape[0], out_features]
            }
            LayerKind::Softmax => {
                if idx != last {
                    return err("softmax is only supported as the final layer".into());
                }
                if shape.len() != 2 {
                    return err(format!("softmax needs an NxC input but receives {shape:?}"));
                }
                shape
            }
        };
        shapes.push(shape.clone());
    }
    if shape != [1, m.class_count] {
        return invalid(format!(
            "network output shape {shape:?} does not match [1, {}]",
            m.class_count
        ));
    }
    Ok(shapes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(layers: Vec<LayerSpec>, hw: usize, classes: usize) -> Manifest {
        Manifest {
            format_version: 1,
            input_shape: [1, 3, hw, hw],
            class_count: classes,
            preprocessing: Preprocessing::imagenet(),
            upsampling: manifest::UPSAMPLING_CONVENTION.into(),
            layers,
        }
    }

    /// 1x1 identity conv (3 -> 3), GAP, identity linear.
    fn gap_chain(hw: usize) -> Model {
        let m = manifest(
            vec![
                LayerSpec::new(
                    "conv",
                    LayerKind::Conv2d {
                        in_channels: 3,
                        out_channels: 3,
                        kernel_size: 1,
                        stride: 1,
                        padding: 0,
                    },
                ),
                LayerSpec::new("gap", LayerKind::GlobalAvgpool),
                LayerSpec::new(
                    "fc",
                    LayerKind::Linear {
                        in_features: 3,
                        out_features: 3,
                    },
                ),
            ],
            hw,
            3,
        );
        let eye = |i: usize| if i.is_multiple_of(4) { 1.0 } else { 0.0 };
        let mut params: Vec<f32> = (0..9).map(eye).collect();
        params.extend([0.0; 3]);
        params.extend((0..9).map(eye));
        params.extend([0.0; 3]);
        Model::from_parts(m, &params).unwrap()
    }

    #[test]
    fn gap_chain_gradient_is_uniform() {
        let model = gap_chain(4);
        let x = Tensor::from_fn(vec![1, 3, 4, 4], |i| (i as f32 * 0.37).sin()).unwrap();
        for class in 0..3 {
            let g = model.gradient_wrt_activation(&x, "conv", class).unwrap();
            assert_eq!(g.gradient.shape(), &[1, 3, 4, 4]);
            for (i, &v) in g.gradient.data().iter().enumerate() {
                let expect = if i / 16 == class { 1.0 / 16.0 } else { 0.0 };
                assert_eq!(v, expect);
            }
        }
    }

    #[test]
    fn relu_gate_blocks_gradient() {
        let m = manifest(
            vec![
                LayerSpec::new(
                    "conv",
                    LayerKind::Conv2d {
                        in_channels: 3,
                        out_channels: 2,
                        kernel_size: 1,
                        stride: 1,
                        padding: 0,
                    },
                ),
                LayerSpec::new("relu", LayerKind::Relu),
                LayerSpec::new("gap", LayerKind::GlobalAvgpool),
                LayerSpec::new(
                    "fc",
                    LayerKind::Linear {
                        in_features: 2,
                        out_features: 2,
                    },
                ),
            ],
            3,
            2,
        );
        // conv weights zero, bias -1: relu input is negative everywhere
        let mut params = vec![0.0; 6];
        params.extend([-1.0, -1.0]);
        params.extend([1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        let model = Model::from_parts(m, &params).unwrap();
        let x = Tensor::full(vec![1, 3, 3, 3], 0.5).unwrap();
        let g = model.gradient_wrt_activation(&x, "conv", 1).unwrap();
        assert!(g.gradient.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_target_after_flatten_rejected() {
        let model = gap_chain(2);
        let x = Tensor::zeros(vec![1, 3, 2, 2]).unwrap();
        assert!(matches!(
            model.gradient_wrt_activation(&x, "gap", 0),
            Err(ModelError::UnsupportedGradientTarget { .. })
        ));
        assert!(matches!(
            model.gradient_wrt_activation(&x, "conv", 3),
            Err(ModelError::ClassIndex { index: 3, count: 3 })
        ));
    }

    #[test]
    fn capture_and_unknown_layer() {
        let model = gap_chain(2);
        let x = Tensor::from_fn(vec![1, 3, 2, 2], |i| i as f32).unwrap();
        let t = model.forward(&x, Some("conv")).unwrap();
        assert_eq!(t.captured.as_ref().unwrap(), &x);
        assert!(model.forward(&x, None).unwrap().captured.is_none());
        match model.forward(&x, Some("conv9")) {
            Err(ModelError::UnknownLayer { available, .. }) => {
                assert_eq!(available, vec!["conv", "gap", "fc"])
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad = Tensor::zeros(vec![1, 3, 3, 3]).unwrap();
        assert!(matches!(
            model.forward(&bad, None),
            Err(ModelError::InputShape { .. })
        ));
    }

    #[test]
    fn conv_after_flatten_fails_validation() {
        let m = manifest(
            vec![
                LayerSpec::new("flat", LayerKind::Flatten),
                LayerSpec::new(
                    "conv",
                    LayerKind::Conv2d {
                        in_channels: 3,
                        out_channels: 1,
                        kernel_size: 1,
                        stride: 1,
                        padding: 0,
                    },
                ),
            ],
            2,
            1,
        );
        let err = Model::from_parts(m, &[0.0; 4]).unwrap_err();
        assert!(matches!(err, ModelError::LayerShape { ref layer, .. } if layer == "conv"));
    }

    #[test]
    fn parameter_count_mismatch() {
        let m = gap_chain(2).manifest().clone();
        assert!(matches!(
            Model::from_parts(m, &[0.0; 23]),
            Err(ModelError::Integrity(_))
        ));
    }

    #[test]
    fn unknown_kind_and_parse_context() {
        let text = r#"{"format_version":1,"input_shape":[1,3,2,2],"class_count":1,
            "preprocessing":{"mean":[0,0,0],"std":[1,1,1]},
            "layers":[{"name":"a","kind":"lstm"}]}"#;
        let err = parse_manifest(text, Path::new("m.json")).unwrap_err();
        assert!(matches!(err, ModelError::UnsupportedLayer { ref kind, .. } if kind == "lstm"));

        let text = r#"{"format_version":1,"input_shape":[1,3,2,2],"class_count":1,
            "preprocessing":{"mean":[0,0,0],"std":[1,1,1]},
            "layers":[{"name":"a","kind":"maxpool2d","kernel_size":"two","stride":2}]}"#;
        match parse_manifest(text, Path::new("m.json")).unwrap_err() {
            ModelError::Parse { field, line, .. } => {
                assert!(field.starts_with("layers[0]"), "{field}");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_softmax_is_not_part_of_logits() {
        let mut m = gap_chain(2).manifest().clone();
        m.layers.push(LayerSpec::new("prob", LayerKind::Softmax));
        let model = Model::from_parts(m, &gap_chain(2).flat_params()).unwrap();
        let x = Tensor::from_fn(vec![1, 3, 2, 2], |i| i as f32).unwrap();
        let t = model.forward(&x, None).unwrap();
        assert_eq!(t.logits.data(), &[1.5, 5.5, 9.5]);
    }
}
