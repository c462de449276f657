//! Segmentation metrics, reports and inference with concept filters.

use std::fmt::Write as _;

use crate::concept::{build_filter, dynamic_head, ConceptFilter, GroupPrompt};
use crate::error::{dim_err, Error, Result};
use crate::kernels::sigmoid;
use crate::networks::ModelParams;
use crate::params::Forward;
use crate::synth::{Dataset, SceneSample, TaskId};
use crate::tensor::{Scalar, Tensor};

/// Per-image scores. Dice, IoU and BER use the prediction binarized at 0.5;
/// MAE uses the soft prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
    pub ber: f64,
}

pub const METRIC_NAMES: [&str; 4] = ["dice", "iou", "mae", "ber"];

impl Metrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "dice" => Some(self.dice),
            "iou" => Some(self.iou),
            "mae" => Some(self.mae),
            "ber" => Some(self.ber),
            _ => None,
        }
    }
}

/// Scores a probability map against a binary mask of the same size.
///
/// Empty prediction and empty ground truth give Dice and IoU of 1. A class
/// absent from the ground truth contributes zero error to the BER.
pub fn metrics<T: Scalar>(pred: &[T], gt: &[T]) -> Result<Metrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(dim_err!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()));
    }
    if pred.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
        return Err(Error::Contract("prediction leaves [0, 1]".into()));
    }
    let half = T::of(0.5);
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    let mut abs = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        let pb = p >= half;
        let gb = g >= half;
        match (pb, gb) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
        abs += (p.f64() - g.f64()).abs();
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let pos_err = if tp + fneg == 0 { 0.0 } else { fneg as f64 / (tp + fneg) as f64 };
    let neg_err = if tn + fp == 0 { 0.0 } else { fp as f64 / (tn + fp) as f64 };
    Ok(Metrics {
        dice: ratio(2 * tp, 2 * tp + fp + fneg),
        iou: ratio(tp, tp + fp + fneg),
        mae: abs / pred.len() as f64,
        ber: 0.5 * (pos_err + neg_err),
    })
}

/// Sigmoid probabilities `[B, 1, H, W]` of a filter on a batch of images.
pub fn predict<T: Scalar>(model: &ModelParams<T>, filter: &ConceptFilter<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let s = images.shape().to_vec();
    let mut fw = Forward::frozen(&model.store);
    let x = fw.tape.constant(images);
    let pyramid = model.encode(&mut fw, x, false)?;
    let features = model.decode(&mut fw, &pyramid)?;
    let (w, b) = filter.bind(&mut fw);
    let logits = dynamic_head(&mut fw, features, w, b, s[2], s[3])?;
    let probs = fw.tape.tensor(logits).map(sigmoid);
    if !probs.is_finite() {
        return Err(Error::Numeric(format!("prediction for {} is not finite", filter.task)));
    }
    Ok(probs)
}

/// Mean metrics of `filter` over `samples`, scored against each sample's
/// mask for `target`.
pub fn score_samples(
    model: &ModelParams<f32>,
    filter: &ConceptFilter<f32>,
    samples: &[SceneSample],
    target: TaskId,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to score".into()));
    }
    let mut sum = [0.0; 4];
    for chunk in samples.chunks(16) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let images = Dataset::stack_images(&refs)?;
        let masks = Dataset::stack_masks(&refs, target)?;
        let probs = predict(model, filter, &images)?;
        let plane = probs.numel() / chunk.len();
        for (p, g) in probs.data().chunks(plane).zip(masks.data().chunks(plane)) {
            let m = metrics(p, g)?;
            for (acc, v) in sum.iter_mut().zip([m.dice, m.iou, m.mae, m.ber]) {
                *acc += v;
            }
        }
    }
    let n = samples.len() as f64;
    Ok(Metrics {
        dice: sum[0] / n,
        iou: sum[1] / n,
        mae: sum[2] / n,
        ber: sum[3] / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

/// Per-(task, metric) values with the run's seed and configuration digest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub seed: u64,
    pub config_digest: String,
    pub rows: Vec<MetricRow>,
}

pub const REPORT_HEADER: &str = "task,metric,value,n,seed,config_digest";

impl MetricReport {
    pub fn new(seed: u64, config_digest: impl Into<String>) -> Self {
        Self {
            seed,
            config_digest: config_digest.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, task: impl Into<String>, metric: impl Into<String>, value: f64, n: usize) {
        self.rows.push(MetricRow {
            task: task.into(),
            metric: metric.into(),
            value,
            n,
        });
    }

    pub fn push_metrics(&mut self, task: &str, m: &Metrics, n: usize) {
        for name in METRIC_NAMES {
            self.push(task, name, m.get(name).expect("known metric"), n);
        }
    }

    pub fn value(&self, task: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.task == task && r.metric == metric).map(|r| r.value)
    }

    /// Mean of `metric` over all rows carrying it.
    pub fn mean(&self, metric: &str) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.metric == metric).map(|r| r.value).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.task, r.metric, r.value, r.n, self.seed, self.config_digest
            );
        }
        out
    }

    /// Checks value ranges and counts.
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if r.n == 0 {
                return Err(Error::Contract(format!("{}/{} has no samples", r.task, r.metric)));
            }
            let bounded = METRIC_NAMES.contains(&r.metric.as_str());
            if !r.value.is_finite() || (bounded && !(0.0..=1.0).contains(&r.value)) {
                return Err(Error::Numeric(format!("{}/{} = {}", r.task, r.metric, r.value)));
            }
        }
        Ok(())
    }
}

/// Builds one filter per prompt.
pub fn build_filters(model: &ModelParams<f32>, prompts: &[GroupPrompt<f32>]) -> Result<Vec<ConceptFilter<f32>>> {
    prompts.iter().map(|p| build_filter(model, p)).collect()
}

/// Mean test-split metrics of every task in `tasks`, each evaluated with the
/// filter named after it.
pub fn evaluate(
    model: &ModelParams<f32>,
    filters: &[ConceptFilter<f32>],
    datasets: &[Dataset],
    tasks: &[TaskId],
    seed: u64,
    config_digest: &str,
) -> Result<MetricReport> {
    let mut report = MetricReport::new(seed, config_digest);
    for &task in tasks {
        let filter = filters
            .iter()
            .find(|f| f.task == task.name())
            .ok_or_else(|| Error::Config(format!("no concept filter for task {task}")))?;
        let ds = datasets
            .iter()
            .find(|d| d.task == task)
            .ok_or_else(|| Error::Config(format!("no test set for task {task}")))?;
        let m = score_samples(model, filter, &ds.test, task)?;
        report.push_metrics(task.name(), &m, ds.test.len());
    }
    Ok(report)
}
