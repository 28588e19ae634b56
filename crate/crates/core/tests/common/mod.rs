//! Fixture access and plain-loop reference implementations shared by the
//! integration tests.
//!
//! The oracle network below re-implements every layer with direct nested
//! loops over `f64` values. In `Rounding::F32` mode each layer output is
//! rounded to `f32`, matching the storage precision of the library, so the
//! two can be compared at tight tolerances; `Rounding::Exact` keeps full
//! `f64` precision for finite differences.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use camforge::eval::Annotation;
use camforge::imageio;
use camforge::metrics::AnnotatedSample;
use camforge::model::{LayerKind, LayerSpec, Manifest, Model, Preprocessing};
use camforge::noise::{gaussian_noise, NoiseSpec};
use camforge::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/shapes")
}

pub fn fixture_model() -> Model {
    let dir = fixture_dir();
    Model::load(&dir.join("model.json"), &dir.join("model.bin")).expect("fixture model loads")
}

pub fn fixture_annotations() -> Vec<Annotation> {
    let text = fs::read_to_string(fixture_dir().join("annotations.json")).expect("annotations");
    serde_json::from_str(&text).expect("annotations parse")
}

pub fn fixture_sample(model: &Model, ann: &Annotation) -> AnnotatedSample {
    let (h, w) = model.input_hw();
    let image = imageio::preprocess(&fixture_dir().join(&ann.file), h, w, model.preprocessing())
        .expect("fixture image decodes");
    AnnotatedSample {
        image_id: ann.image_id.clone(),
        image,
        class_index: ann.class_index,
        bbox: ann.bbox,
    }
}

pub fn fixture_samples(model: &Model) -> Vec<AnnotatedSample> {
    fixture_annotations()
        .iter()
        .map(|a| fixture_sample(model, a))
        .collect()
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    F32,
    Exact,
}

/// Dense `f64` tensor in NCHW (or N x F) layout.
#[derive(Debug, Clone)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| v as f32).collect()).unwrap()
    }

    fn round(mut self, mode: Rounding) -> Self {
        if mode == Rounding::F32 {
            for v in &mut self.data {
                *v = f64::from(*v as f32);
            }
        }
        self
    }
}

pub struct OracleNet {
    layers: Vec<(LayerSpec, Vec<f64>, Vec<f64>)>,
    pub input_hw: (usize, usize),
}

impl OracleNet {
    /// Splits the flat parameter list by declaration order: weight then bias.
    pub fn new(manifest: &Manifest, params: &[f32]) -> Self {
        let mut offset = 0;
        let mut take = |n: usize| {
            let v: Vec<f64> = params[offset..offset + n].iter().map(|&x| f64::from(x)).collect();
            offset += n;
            v
        };
        let layers = manifest
            .layers
            .iter()
            .map(|l| {
                let (w, b) = match l.kind {
                    LayerKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel_size,
                        ..
                    } => (
                        take(out_channels * in_channels * kernel_size * kernel_size),
                        take(out_channels),
                    ),
                    LayerKind::Linear {
                        in_features,
                        out_features,
                    } => (take(out_features * in_features), take(out_features)),
                    _ => (Vec::new(), Vec::new()),
                };
                (l.clone(), w, b)
            })
            .collect();
        assert_eq!(offset, params.len());
        Self {
            layers,
            input_hw: (manifest.input_shape[2], manifest.input_shape[3]),
        }
    }

    pub fn of(model: &Model) -> Self {
        Self::new(model.manifest(), &model.flat_params())
    }

    fn position(&self, layer: &str) -> usize {
        self.layers
            .iter()
            .position(|(l, _, _)| l.name == layer)
            .expect("layer exists")
    }

    /// Runs layers `from..` and returns the logits (a trailing softmax is skipped).
    fn run(&self, mut x: Arr, from: usize, until: Option<usize>, mode: Rounding) -> Arr {
        let end = until.map_or(self.layers.len(), |u| u + 1);
        for (spec, w, b) in &self.layers[from..end] {
            x = match spec.kind {
                LayerKind::Conv2d {
                    out_channels,
                    kernel_size,
                    stride,
                    padding,
                    ..
                } => conv(&x, w, b, out_channels, kernel_size, stride, padding),
                LayerKind::Relu => Arr {
                    shape: x.shape.clone(),
                    data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                },
                LayerKind::Maxpool2d { kernel_size, stride } => maxpool(&x, kernel_size, stride),
                LayerKind::GlobalAvgpool => gap(&x),
                LayerKind::Flatten => Arr {
                    shape: vec![1, x.data.len()],
                    data: x.data,
                },
                LayerKind::Linear { out_features, .. } => linear(&x, w, b, out_features),
                LayerKind::Softmax => x,
            }
            .round(mode);
        }
        x
    }

    pub fn logits(&self, input: &Arr, mode: Rounding) -> Arr {
        self.run(input.clone(), 0, None, mode)
    }

    pub fn activation(&self, input: &Arr, layer: &str, mode: Rounding) -> Arr {
        self.run(input.clone(), 0, Some(self.position(layer)), mode)
    }

    /// Logits from a given layer's output onward.
    pub fn logits_from(&self, layer: &str, activation: &Arr, mode: Rounding) -> Arr {
        self.run(activation.clone(), self.position(layer) + 1, None, mode)
    }

    pub fn probability(&self, input: &Arr, class: usize, mode: Rounding) -> f64 {
        softmax(&self.logits(input, mode).data)[class]
    }
}

fn conv(x: &Arr, w: &[f64], b: &[f64], o: usize, k: usize, stride: usize, pad: usize) -> Arr {
    let (c, h, wd) = (x.shape[1], x.shape[2], x.shape[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data[(ic * h + iy as usize) * wd + ix as usize];
                            acc += w[((oc * c + ic) * k + ky) * k + kx] * xv;
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Arr {
        shape: vec![1, o, oh, ow],
        data: out,
    }
}

fn maxpool(x: &Arr, k: usize, stride: usize) -> Arr {
    let (c, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(x.data[(ch * h + oy * stride + ky) * w + ox * stride + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    Arr {
        shape: vec![1, c, oh, ow],
        data: out,
    }
}

fn gap(x: &Arr) -> Arr {
    let c = x.shape[1];
    let plane = x.shape[2] * x.shape[3];
    Arr {
        shape: vec![1, c],
        data: x.data.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect(),
    }
}

fn linear(x: &Arr, w: &[f64], b: &[f64], o: usize) -> Arr {
    let f = x.data.len();
    Arr {
        shape: vec![1, o],
        data: (0..o)
            .map(|j| b[j] + (0..f).map(|i| w[j * f + i] * x.data[i]).sum::<f64>())
            .collect(),
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Bilinear resize of one `h x w` plane with half-pixel centers.
pub fn upsample_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, ty) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, tx) = coord(x, w, ow);
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Brute-force CAM references on top of an [`OracleNet`].
pub struct CamOracle<'a> {
    pub net: &'a OracleNet,
    pub input: Arr,
    pub layer: String,
    pub class: usize,
    pub mode: Rounding,
    channels: Vec<Vec<f64>>,
    act_hw: (usize, usize),
    baseline: f64,
}

impl<'a> CamOracle<'a> {
    pub fn new(net: &'a OracleNet, input: &Tensor, layer: &str, class: usize, mode: Rounding) -> Self {
        let input = Arr::from_tensor(input);
        let act = net.activation(&input, layer, mode);
        let (k, h, w) = (act.shape[1], act.shape[2], act.shape[3]);
        let channels = (0..k).map(|c| act.data[c * h * w..(c + 1) * h * w].to_vec()).collect();
        let zeros = Arr {
            shape: input.shape.clone(),
            data: vec![0.0; input.data.len()],
        };
        let baseline = net.probability(&zeros, class, mode);
        Self {
            net,
            input,
            layer: layer.to_string(),
            class,
            mode,
            channels,
            act_hw: (h, w),
            baseline,
        }
    }

    fn upsample(&self, plane: &[f64]) -> Vec<f64> {
        let (h, w) = self.act_hw;
        let (oh, ow) = self.net.input_hw;
        let up = upsample_plane(plane, h, w, oh, ow);
        match self.mode {
            Rounding::F32 => up.iter().map(|&v| f64::from(v as f32)).collect(),
            Rounding::Exact => up,
        }
    }

    fn masked(&self, mask: &[f64]) -> Arr {
        let plane = mask.len();
        Arr {
            shape: self.input.shape.clone(),
            data: self
                .input
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| x * mask[i % plane])
                .collect(),
        }
        .round(self.mode)
    }

    fn cic(&self, x: &Arr) -> f64 {
        self.net.probability(x, self.class, self.mode) - self.baseline
    }

    fn mask(&self, plane: &[f64]) -> Vec<f64> {
        let n = normalize(&self.upsample(plane));
        match self.mode {
            Rounding::F32 => n.iter().map(|&v| f64::from(v as f32)).collect(),
            Rounding::Exact => n,
        }
    }

    pub fn score_cam_weights(&self) -> Vec<f64> {
        self.channels
            .iter()
            .map(|a| self.cic(&self.masked(&self.mask(a))))
            .collect()
    }

    fn noise(&self, len_shape: &[usize], sigma: f32, seed: u64, k: usize, i: usize) -> Vec<f64> {
        let spec = NoiseSpec::new(sigma, seed, ((k as u64) << 32) | i as u64);
        gaussian_noise(len_shape, spec)
            .unwrap()
            .data()
            .iter()
            .map(|&v| f64::from(v))
            .collect()
    }

    pub fn ss_cam1_weights(&self, n: usize, sigma: f32, seed: u64) -> Vec<f64> {
        let (h, w) = self.act_hw;
        (0..self.channels.len())
            .map(|k| {
                let mut total = 0.0;
                for i in 0..n {
                    let noise = self.noise(&[1, 1, h, w], sigma, seed, k, i);
                    let noisy: Vec<f64> = self.channels[k]
                        .iter()
                        .zip(&noise)
                        .map(|(a, e)| f64::from((a + e) as f32))
                        .collect();
                    total += self.cic(&self.masked(&self.mask(&noisy)));
                }
                total / n as f64
            })
            .collect()
    }

    pub fn ss_cam2_weights(&self, n: usize, sigma: f32, seed: u64) -> Vec<f64> {
        (0..self.channels.len())
            .map(|k| {
                let masked = self.masked(&self.mask(&self.channels[k]));
                let mut total = 0.0;
                for i in 0..n {
                    let noise = self.noise(&masked.shape, sigma, seed, k, i);
                    let noisy = Arr {
                        shape: masked.shape.clone(),
                        data: masked.data.iter().zip(&noise).map(|(a, e)| a + e).collect(),
                    }
                    .round(self.mode);
                    total += self.cic(&noisy);
                }
                total / n as f64
            })
            .collect()
    }

    /// Spatial mean of the central-difference gradient of the class logit.
    pub fn grad_cam_weights(&self, eps: f64) -> Vec<f64> {
        let net = self.net;
        let act = net.activation(&self.input, &self.layer, Rounding::Exact);
        let plane = self.act_hw.0 * self.act_hw.1;
        (0..self.channels.len())
            .map(|k| {
                let mut total = 0.0;
                for p in 0..plane {
                    let idx = k * plane + p;
                    let mut plus = act.clone();
                    plus.data[idx] += eps;
                    let mut minus = act.clone();
                    minus.data[idx] -= eps;
                    let lp = net.logits_from(&self.layer, &plus, Rounding::Exact).data[self.class];
                    let lm = net.logits_from(&self.layer, &minus, Rounding::Exact).data[self.class];
                    total += (lp - lm) / (2.0 * eps);
                }
                total / plane as f64
            })
            .collect()
    }

    /// `ReLU(sum_k weights[k] * U(A_k))` at input resolution.
    pub fn combine(&self, weights: &[f64]) -> Vec<f64> {
        let ups: Vec<Vec<f64>> = self.channels.iter().map(|a| self.upsample(a)).collect();
        (0..ups[0].len())
            .map(|i| {
                weights
                    .iter()
                    .zip(&ups)
                    .map(|(w, u)| w * u[i])
                    .sum::<f64>()
                    .max(0.0)
            })
            .collect()
    }
}

fn conv_spec(name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel_size: k,
            stride,
            padding,
        },
    )
}

/// A small random CNN. Odd seeds end in flatten + linear, even seeds in
/// global average pooling + linear; all have conv, ReLU and max-pool before
/// the `target` conv layer's successors.
pub fn random_tiny_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=5);
    let c1 = rng.random_range(2..=4);
    let c2 = rng.random_range(2..=5);
    let mut layers = vec![
        conv_spec("conv1", 3, c1, 3, 1, 1),
        LayerSpec::new("relu1", LayerKind::Relu),
        LayerSpec::new(
            "pool1",
            LayerKind::Maxpool2d {
                kernel_size: 2,
                stride: 2,
            },
        ),
        conv_spec("target", c1, c2, 3, 1, 1),
        LayerSpec::new("relu2", LayerKind::Relu),
        conv_spec("conv3", c2, c2, 2, 2, 0),
        LayerSpec::new("relu3", LayerKind::Relu),
    ];
    let head_in = if seed % 2 == 1 {
        layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
        c2 * 2 * 2
    } else {
        layers.push(LayerSpec::new("gap", LayerKind::GlobalAvgpool));
        c2
    };
    layers.push(LayerSpec::new(
        "fc",
        LayerKind::Linear {
            in_features: head_in,
            out_features: classes,
        },
    ));
    let manifest = Manifest {
        format_version: 1,
        input_shape: [1, 3, 8, 8],
        class_count: classes,
        preprocessing: Preprocessing::imagenet(),
        upsampling: "bilinear_half_pixel".into(),
        layers,
    };
    let count: usize = manifest.layers.iter().map(|l| l.kind.param_count()).sum();
    let params: Vec<f32> = (0..count).map(|_| rng.random_range(-1.0..1.0)).collect();
    Model::from_parts(manifest, &params).expect("random model is valid")
}

pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0)).unwrap()
}

/// Outcome of checking reverse-mode gradients against central differences.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub resampled: usize,
    pub worst_relative: f64,
}

/// Compares `gradient_wrt_activation` with central differences of the
/// exact-precision oracle at `coords` random activation coordinates.
/// Coordinates whose one-sided differences disagree sit on a ReLU or
/// max-pool kink and are replaced by fresh draws.
pub fn gradient_check(model: &Model, input: &Tensor, layer: &str, class: usize, coords: usize, eps: f64, seed: u64) -> GradCheck {
    let net = OracleNet::of(model);
    let analytic = model.gradient_wrt_activation(input, layer, class).expect("gradient");
    let act = net.activation(&Arr::from_tensor(input), layer, Rounding::Exact);
    let logit = |a: &Arr| net.logits_from(layer, a, Rounding::Exact).data[class];
    let base = logit(&act);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck {
        checked: 0,
        resampled: 0,
        worst_relative: 0.0,
    };
    while out.checked < coords {
        let idx = rng.random_range(0..act.data.len());
        let mut plus = act.clone();
        plus.data[idx] += eps;
        let mut minus = act.clone();
        minus.data[idx] -= eps;
        let (lp, lm) = (logit(&plus), logit(&minus));
        let forward = (lp - base) / eps;
        let backward = (base - lm) / eps;
        if (forward - backward).abs() > 1e-6 * (1.0 + forward.abs().max(backward.abs())) {
            out.resampled += 1;
            assert!(out.resampled < 10 * coords, "too many kinks");
            continue;
        }
        let fd = (lp - lm) / (2.0 * eps);
        let g = f64::from(analytic.gradient.data()[idx]);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        out.worst_relative = out.worst_relative.max(rel);
        out.checked += 1;
    }
    out
}

/// Library-vs-oracle comparison for one method on one sample.
#[derive(Debug, Clone)]
pub struct OracleComparison {
    pub method: camforge::Method,
    /// Largest absolute map difference.
    pub max_abs: f64,
    /// Largest absolute channel-weight difference.
    pub weight_abs: f64,
    /// Peak of the oracle map.
    pub peak: f64,
}

impl OracleComparison {
    pub fn relative(&self) -> f64 {
        self.max_abs / self.peak.max(f64::MIN_POSITIVE)
    }
}

/// Runs all four methods (N = 4, sigma = 2, seed 42 for the smoothed ones)
/// through the library and through the brute-force oracles.
pub fn compare_with_oracles(model: &Model, sample: &AnnotatedSample, layer: &str) -> Vec<OracleComparison> {
    use camforge::cam::{channel_weights, explain};
    use camforge::{ExplainConfig, Method};

    let net = OracleNet::of(model);
    let oracle = CamOracle::new(&net, &sample.image, layer, sample.class_index, Rounding::F32);
    Method::ALL
        .iter()
        .map(|&method| {
            let cfg = ExplainConfig::new(method, layer)
                .with_class(sample.class_index)
                .with_smoothing(4, 2.0, 42);
            let want_w = match method {
                Method::ScoreCam => oracle.score_cam_weights(),
                Method::SsCam1 => oracle.ss_cam1_weights(4, 2.0, 42),
                Method::SsCam2 => oracle.ss_cam2_weights(4, 2.0, 42),
                Method::GradCam => oracle.grad_cam_weights(1e-3),
            };
            let want = oracle.combine(&want_w);
            let got_w = channel_weights(model, &sample.image, &cfg).unwrap().weights;
            let got = explain(model, &sample.image, &cfg).unwrap();
            let max_abs = got
                .values
                .data()
                .iter()
                .zip(&want)
                .map(|(&g, w)| (f64::from(g) - w).abs())
                .fold(0.0, f64::max);
            let weight_abs = got_w
                .iter()
                .zip(&want_w)
                .map(|(&g, w)| (f64::from(g) - w).abs())
                .fold(0.0, f64::max);
            OracleComparison {
                method,
                max_abs,
                weight_abs,
                peak: want.iter().cloned().fold(0.0, f64::max),
            }
        })
        .collect()
}
