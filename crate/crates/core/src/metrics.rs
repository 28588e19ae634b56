//! Faithfulness and localization metrics for saliency maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cam::{normalize_map, SaliencyMap};
use crate::model::{Model, ModelError};
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{0} needs at least one record")]
    Empty(&'static str),
    #[error("record {index} has clean confidence {value}; the relative drop is undefined")]
    ZeroConfidence { index: usize, value: f64 },
    #[error("paired lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("map explains class {map} but the sample is labelled {sample}")]
    ClassMismatch { map: usize, sample: usize },
    #[error("map is {map_h}x{map_w} but the image is {image_h}x{image_w}")]
    SizeMismatch {
        map_h: usize,
        map_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("bounding box {bbox:?} is not inside a {width}x{height} image")]
    InvalidBBox { bbox: BBox, width: usize, height: usize },
    #[error("saliency map has no mass; pointing-game proportion is undefined")]
    UndefinedProportion,
    #[error("saliency map contains negative values")]
    NegativeMap,
    #[error("curve steps must be positive")]
    InvalidSteps,
    #[error("pixel order has {got} entries for {expected} pixels")]
    BadOrder { got: usize, expected: usize },
    #[error(transparent)]
    Cam(#[from] crate::cam::CamError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` in model-input coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<(), MetricError> {
        if self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height {
            Ok(())
        } else {
            Err(MetricError::InvalidBBox {
                bbox: *self,
                width,
                height,
            })
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// A preprocessed image with its label.
#[derive(Debug, Clone)]
pub struct AnnotatedSample {
    pub image_id: String,
    /// `1 x 3 x H x W`, preprocessed.
    pub image: Tensor,
    pub class_index: usize,
    pub bbox: Option<BBox>,
}

impl AnnotatedSample {
    fn hw(&self) -> (usize, usize) {
        (self.image.shape()[2], self.image.shape()[3])
    }
}

/// Clean vs. explanation-masked confidence for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessRecord {
    pub image_id: String,
    /// Class probability on the clean image.
    pub clean: f64,
    /// Class probability on the image masked by the normalized map.
    pub explained: f64,
    pub drop: f64,
    pub increased: bool,
}

impl FaithfulnessRecord {
    pub fn new(image_id: impl Into<String>, clean: f64, explained: f64) -> Self {
        let drop = if clean > 0.0 {
            (clean - explained).max(0.0) / clean
        } else {
            0.0
        };
        Self {
            image_id: image_id.into(),
            clean,
            explained,
            drop,
            increased: clean < explained,
        }
    }
}

/// Mean relative confidence drop, in percent.
pub fn average_drop(records: &[FaithfulnessRecord]) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty("average drop"));
    }
    let mut sum = 0.0;
    for (index, r) in records.iter().enumerate() {
        if !(r.clean > 0.0) {
            return Err(MetricError::ZeroConfidence {
                index,
                value: r.clean,
            });
        }
        sum += (r.clean - r.explained).max(0.0) / r.clean;
    }
    Ok(100.0 * sum / records.len() as f64)
}

/// Percentage of records whose confidence strictly increased.
pub fn average_increase(records: &[FaithfulnessRecord]) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty("average increase"));
    }
    let hits = records.iter().filter(|r| r.clean < r.explained).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// Percentage of paired images where method A's drop is strictly lower than
/// method B's. Ties count half to each side.
pub fn win_rate(drops_a: &[f64], drops_b: &[f64]) -> Result<f64, MetricError> {
    if drops_a.len() != drops_b.len() {
        return Err(MetricError::LengthMismatch(drops_a.len(), drops_b.len()));
    }
    if drops_a.is_empty() {
        return Err(MetricError::Empty("win rate"));
    }
    let wins: f64 = drops_a
        .iter()
        .zip(drops_b)
        .map(|(a, b)| match a.partial_cmp(b) {
            Some(std::cmp::Ordering::Less) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        })
        .sum();
    Ok(100.0 * wins / drops_a.len() as f64)
}

fn check_map(sample: &AnnotatedSample, map: &SaliencyMap) -> Result<(), MetricError> {
    let (h, w) = sample.hw();
    if map.height() != h || map.width() != w {
        return Err(MetricError::SizeMismatch {
            map_h: map.height(),
            map_w: map.width(),
            image_h: h,
            image_w: w,
        });
    }
    Ok(())
}

/// Scores the image masked point-wise by the normalized map against the clean image.
pub fn explanation_score(
    model: &Model,
    sample: &AnnotatedSample,
    map: &SaliencyMap,
) -> Result<FaithfulnessRecord, MetricError> {
    if map.class_index != sample.class_index {
        return Err(MetricError::ClassMismatch {
            map: map.class_index,
            sample: sample.class_index,
        });
    }
    check_map(sample, map)?;
    let c = sample.class_index;
    let clean = model.forward(&sample.image, None)?.probability(c);
    let masked = sample.image.mul_spatial_mask(&normalize_map(&map.values))?;
    let explained = model.forward(&masked, None)?.probability(c);
    Ok(FaithfulnessRecord::new(
        sample.image_id.clone(),
        f64::from(clean),
        f64::from(explained),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Insertion,
    Deletion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveResult {
    pub fractions: Vec<f64>,
    pub scores: Vec<f64>,
    pub auc: f64,
}

impl CurveResult {
    /// `fraction,score` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,score\n");
        for (f, s) in self.fractions.iter().zip(&self.scores) {
            out.push_str(&format!("{f},{s}\n"));
        }
        out
    }
}

/// Trapezoidal area under `scores` over `fractions`.
pub fn trapezoid_auc(fractions: &[f64], scores: &[f64]) -> f64 {
    fractions
        .windows(2)
        .zip(scores.windows(2))
        .map(|(f, s)| (f[1] - f[0]) * (s[0] + s[1]) / 2.0)
        .sum()
}

/// Flat pixel indices sorted by saliency, highest first; equal values keep
/// row-major order.
pub fn pixel_ranking(map: &Tensor) -> Vec<usize> {
    let v = map.data();
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    order
}

pub fn insertion_curve(
    model: &Model,
    sample: &AnnotatedSample,
    map: &SaliencyMap,
    steps: usize,
) -> Result<CurveResult, MetricError> {
    check_map(sample, map)?;
    curve_with_order(
        model,
        sample,
        &pixel_ranking(&map.values),
        steps,
        CurveKind::Insertion,
    )
}

pub fn deletion_curve(
    model: &Model,
    sample: &AnnotatedSample,
    map: &SaliencyMap,
    steps: usize,
) -> Result<CurveResult, MetricError> {
    check_map(sample, map)?;
    curve_with_order(
        model,
        sample,
        &pixel_ranking(&map.values),
        steps,
        CurveKind::Deletion,
    )
}

/// Insertion or deletion curve over an explicit pixel order.
///
/// At step `t` the first `t * P / steps` pixels of `order` (all color
/// channels) are revealed on a zero canvas (insertion) or zeroed in the clean
/// image (deletion). Scores are class probabilities at fractions `t / steps`.
pub fn curve_with_order(
    model: &Model,
    sample: &AnnotatedSample,
    order: &[usize],
    steps: usize,
    kind: CurveKind,
) -> Result<CurveResult, MetricError> {
    if steps == 0 {
        return Err(MetricError::InvalidSteps);
    }
    let (n, c, h, w) = sample.image.dims4("curve")?;
    let plane = h * w;
    if order.len() != plane {
        return Err(MetricError::BadOrder {
            got: order.len(),
            expected: plane,
        });
    }
    let class = sample.class_index;
    let scores = (0..=steps)
        .into_par_iter()
        .map(|t| {
            let count = t * plane / steps;
            let mut keep = vec![kind == CurveKind::Deletion; plane];
            for &p in &order[..count] {
                keep[p] = kind == CurveKind::Insertion;
            }
            let src = sample.image.data();
            let data = (0..n * c * plane)
                .map(|i| if keep[i % plane] { src[i] } else { 0.0 })
                .collect();
            let x = Tensor::new(sample.image.shape().to_vec(), data)?;
            Ok(f64::from(model.forward(&x, None)?.probability(class)))
        })
        .collect::<Result<Vec<f64>, MetricError>>()?;
    let fractions: Vec<f64> = (0..=steps).map(|t| t as f64 / steps as f64).collect();
    let auc = trapezoid_auc(&fractions, &scores);
    Ok(CurveResult {
        fractions,
        scores,
        auc,
    })
}

/// Share of saliency mass inside the box.
pub fn pointing_game(map: &Tensor, bbox: &BBox) -> Result<f64, MetricError> {
    let (_, _, h, w) = map.dims4("pointing_game")?;
    bbox.validate(w, h)?;
    let mut inside = 0.0f64;
    let mut total = 0.0f64;
    for (i, &v) in map.data().iter().enumerate() {
        if v < 0.0 {
            return Err(MetricError::NegativeMap);
        }
        let v = f64::from(v);
        total += v;
        if bbox.contains(i % w, (i / w) % h) {
            inside += v;
        }
    }
    if !(total > 0.0) {
        return Err(MetricError::UndefinedProportion);
    }
    Ok(inside / total)
}
