//! Batch evaluation over an annotated dataset.
//!
//! Samples are processed in parallel; aggregation folds results in
//! annotation order so reports are byte-stable for a fixed configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cam::{self, Baseline, ClassSelection, ExplainConfig, Method};
use crate::metrics::{self, AnnotatedSample, BBox, CurveResult, FaithfulnessRecord, MetricError};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Average drop, average increase and win rate against Score-CAM.
    Faithfulness,
    Insertion,
    Deletion,
    Pointing,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Faithfulness,
        Metric::Insertion,
        Metric::Deletion,
        Metric::Pointing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Faithfulness => "faithfulness",
            Metric::Insertion => "insertion",
            Metric::Deletion => "deletion",
            Metric::Pointing => "pointing",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!("unknown metric `{s}` (expected faithfulness, insertion, deletion or pointing)")
            })
    }
}

/// One entry of an annotation document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub file: String,
    pub class_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub methods: Vec<Method>,
    pub metrics: BTreeSet<Metric>,
    pub layer: String,
    pub n_samples: usize,
    pub sigma: f32,
    pub seed: u64,
    pub steps: usize,
}

impl EvalSettings {
    fn explain_config(&self, method: Method, class_index: usize) -> ExplainConfig {
        ExplainConfig {
            method,
            layer: self.layer.clone(),
            class: ClassSelection::Index(class_index),
            n_samples: self.n_samples,
            sigma: self.sigma,
            seed: self.seed,
            baseline: Baseline::Zeros,
            noise_placement: Default::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    NoSamples,
    #[error("no methods selected")]
    NoMethods,
    #[error("no metrics selected")]
    NoMetrics,
    #[error("pointing metric requested but sample `{0}` has no `bbox` field")]
    MissingBBox(String),
    #[error("curve steps must be positive")]
    InvalidSteps,
    #[error("{0}")]
    Config(String),
}

/// Everything that went into the run, echoed verbatim into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    #[serde(flatten)]
    pub settings: EvalSettings,
    pub baseline: Baseline,
    pub upsampling: String,
    /// Scores for confidence-based metrics are post-softmax probabilities.
    pub score_output: String,
    /// Gradient-based weights differentiate the pre-softmax logit.
    pub gradient_target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub faithfulness: Option<FaithfulnessRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub insertion_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deletion_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointing: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub pointing_skipped: bool,
    #[serde(skip)]
    pub insertion: Option<CurveResult>,
    #[serde(skip)]
    pub deletion: Option<CurveResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub image_id: String,
    pub class_index: usize,
    /// Box area over image area: the proportion a uniform map would score.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uniform_proportion: Option<f64>,
    pub methods: Vec<MethodResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub image_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: Method,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_drop: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_increase: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub win_rate_vs_score_cam: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub insertion_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deletion_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointing: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointing_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointing_skipped: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ConfigEcho,
    pub per_sample: Vec<SampleResult>,
    pub aggregates: Vec<MethodAggregate>,
    pub failures: Vec<Failure>,
    pub warnings: usize,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is serializable");
        s.push('\n');
        s
    }

    /// Plain-text aggregate table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut out = format!(
            "{:<10} {:>7} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            "method", "samples", "avg_drop%", "avg_inc%", "win%", "ins_auc", "del_auc", "pointing"
        );
        for a in &self.aggregates {
            out.push_str(&format!(
                "{:<10} {:>7} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
                a.method.as_str(),
                a.samples,
                fmt(a.average_drop),
                fmt(a.average_increase),
                fmt(a.win_rate_vs_score_cam),
                fmt(a.insertion_auc),
                fmt(a.deletion_auc),
                fmt(a.pointing),
            ));
        }
        if !self.failures.is_empty() {
            out.push_str(&format!("{} sample(s) failed\n", self.failures.len()));
        }
        out
    }
}

/// Checks settings against the annotations before any work starts.
pub fn validate(annotations: &[Annotation], settings: &EvalSettings) -> Result<(), EvalError> {
    if annotations.is_empty() {
        return Err(EvalError::NoSamples);
    }
    if settings.methods.is_empty() {
        return Err(EvalError::NoMethods);
    }
    if settings.metrics.is_empty() {
        return Err(EvalError::NoMetrics);
    }
    if settings.steps == 0 {
        return Err(EvalError::InvalidSteps);
    }
    if settings.metrics.contains(&Metric::Pointing) {
        if let Some(a) = annotations.iter().find(|a| a.bbox.is_none()) {
            return Err(EvalError::MissingBBox(a.image_id.clone()));
        }
    }
    settings
        .explain_config(settings.methods[0], 0)
        .validate()
        .map_err(|e| EvalError::Config(e.to_string()))
}

/// Runs every selected method and metric over every sample.
///
/// `load` turns an annotation into a preprocessed image; a failure there, or
/// anywhere later for that sample, is recorded in `failures` and the sample is
/// left out of the aggregates.
pub fn batch_evaluate<F>(
    model: &Model,
    annotations: &[Annotation],
    load: F,
    settings: &EvalSettings,
) -> Result<Report, EvalError>
where
    F: Fn(&Annotation) -> Result<Tensor, String> + Sync,
{
    validate(annotations, settings)?;
    let outcomes: Vec<Result<SampleResult, Failure>> = annotations
        .par_iter()
        .map(|a| {
            let fail = |error: String| Failure {
                image_id: a.image_id.clone(),
                error,
            };
            let image = load(a).map_err(fail)?;
            let sample = AnnotatedSample {
                image_id: a.image_id.clone(),
                image,
                class_index: a.class_index,
                bbox: a.bbox,
            };
            evaluate_sample(model, &sample, settings).map_err(|e| fail(e.to_string()))
        })
        .collect();

    let mut per_sample = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => per_sample.push(r),
            Err(f) => failures.push(f),
        }
    }
    let aggregates = aggregate(&per_sample, settings);
    let warnings = failures.len()
        + aggregates
            .iter()
            .map(|a| a.pointing_skipped.unwrap_or(0))
            .sum::<usize>();
    Ok(Report {
        config: ConfigEcho {
            settings: settings.clone(),
            baseline: Baseline::Zeros,
            upsampling: crate::model::manifest::UPSAMPLING_CONVENTION.to_string(),
            score_output: "softmax_probability".to_string(),
            gradient_target: "pre_softmax_logit".to_string(),
        },
        per_sample,
        aggregates,
        failures,
        warnings,
    })
}

/// All selected methods and metrics for one sample.
pub fn evaluate_sample(
    model: &Model,
    sample: &AnnotatedSample,
    settings: &EvalSettings,
) -> Result<SampleResult, MetricError> {
    let (h, w) = model.input_hw();
    let uniform_proportion = match sample.bbox {
        Some(b) if settings.metrics.contains(&Metric::Pointing) => {
            b.validate(w, h)?;
            Some(b.area() as f64 / (h * w) as f64)
        }
        _ => None,
    };
    let mut methods = Vec::with_capacity(settings.methods.len());
    for &method in &settings.methods {
        let cfg = settings.explain_config(method, sample.class_index);
        let map = cam::explain(model, &sample.image, &cfg)?;
        let has = |m: Metric| settings.metrics.contains(&m);
        let faithfulness = if has(Metric::Faithfulness) {
            Some(metrics::explanation_score(model, sample, &map)?)
        } else {
            None
        };
        let insertion = if has(Metric::Insertion) {
            Some(metrics::insertion_curve(model, sample, &map, settings.steps)?)
        } else {
            None
        };
        let deletion = if has(Metric::Deletion) {
            Some(metrics::deletion_curve(model, sample, &map, settings.steps)?)
        } else {
            None
        };
        let (pointing, pointing_skipped) = match (has(Metric::Pointing), sample.bbox) {
            (true, Some(b)) => match metrics::pointing_game(&map.values, &b) {
                Ok(p) => (Some(p), false),
                Err(MetricError::UndefinedProportion) => (None, true),
                Err(e) => return Err(e),
            },
            _ => (None, false),
        };
        methods.push(MethodResult {
            method,
            faithfulness,
            insertion_auc: insertion.as_ref().map(|c| c.auc),
            deletion_auc: deletion.as_ref().map(|c| c.auc),
            pointing,
            pointing_skipped,
            insertion,
            deletion,
        });
    }
    Ok(SampleResult {
        image_id: sample.image_id.clone(),
        class_index: sample.class_index,
        uniform_proportion,
        methods,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn aggregate(samples: &[SampleResult], settings: &EvalSettings) -> Vec<MethodAggregate> {
    let column = |m: usize| samples.iter().map(move |s| &s.methods[m]);
    let score_cam = settings.methods.iter().position(|&m| m == Method::ScoreCam);
    settings
        .methods
        .iter()
        .enumerate()
        .map(|(mi, &method)| {
            let records: Vec<FaithfulnessRecord> =
                column(mi).filter_map(|r| r.faithfulness.clone()).collect();
            let faithful = settings.metrics.contains(&Metric::Faithfulness) && !records.is_empty();
            let drops: Vec<f64> = records.iter().map(|r| r.drop).collect();
            let win_rate_vs_score_cam = match score_cam {
                Some(si) if faithful && si != mi => {
                    let base: Vec<f64> = column(si)
                        .filter_map(|r| r.faithfulness.as_ref().map(|f| f.drop))
                        .collect();
                    metrics::win_rate(&drops, &base).ok()
                }
                _ => None,
            };
            let ins: Vec<f64> = column(mi).filter_map(|r| r.insertion_auc).collect();
            let del: Vec<f64> = column(mi).filter_map(|r| r.deletion_auc).collect();
            let pts: Vec<f64> = column(mi).filter_map(|r| r.pointing).collect();
            let pointing_on = settings.metrics.contains(&Metric::Pointing);
            MethodAggregate {
                method,
                samples: samples.len(),
                average_drop: faithful
                    .then(|| metrics::average_drop(&records).ok())
                    .flatten(),
                average_increase: faithful
                    .then(|| metrics::average_increase(&records).ok())
                    .flatten(),
                win_rate_vs_score_cam,
                insertion_auc: mean(&ins),
                deletion_auc: mean(&del),
                pointing: mean(&pts),
                pointing_count: pointing_on.then_some(pts.len()),
                pointing_skipped: pointing_on
                    .then(|| column(mi).filter(|r| r.pointing_skipped).count()),
            }
        })
        .collect()
}
