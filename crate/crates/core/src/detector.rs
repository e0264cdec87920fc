//! Per-object hallucination prediction from captured PFIs and attention maps.
//!
//! Each (capture, object) pair is summarized by six features: three from the
//! attention map and three from a matched filter run over the PFI. A
//! logistic scorer over standardized features predicts presence; a negative
//! verdict on any object is what triggers an abort.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{matched_response, Dataset, LabeledSample, Split, Splits};
use crate::diffusion::CapturedStep;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scene::{Catalog, ObjectSpec};

pub const FEATURES_PER_STEP: usize = 6;
pub const FEATURE_NAMES: [&str; FEATURES_PER_STEP] = [
    "attn_max",
    "attn_mean",
    "attn_topmass",
    "pfi_match",
    "pfi_match_gap",
    "pfi_local_energy",
];
pub const MODEL_HEADER: &str = "head-detector";
pub const MODEL_VERSION: u32 = 1;
const TOP_FRACTION: f64 = 0.05;
const ENERGY_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// PFI and attention features at a single step.
    Combined,
    /// Attention features only; PFI coordinates are zeroed.
    AttentionOnly,
    /// Combined features at several steps, concatenated in ascending order.
    MultiTimestep,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Combined => "combined",
            Variant::AttentionOnly => "attention_only",
            Variant::MultiTimestep => "multi_timestep",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(Variant::Combined),
            "attention_only" => Ok(Variant::AttentionOnly),
            "multi_timestep" => Ok(Variant::MultiTimestep),
            other => Err(Error::InvalidConfig(format!("unknown detector variant `{other}`"))),
        }
    }
}

impl Variant {
    pub fn check_steps(&self, steps: &[usize]) -> Result<()> {
        let ok = match self {
            Variant::Combined | Variant::AttentionOnly => steps.len() == 1,
            Variant::MultiTimestep => steps.len() >= 2,
        };
        let mut sorted = steps.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if !ok || sorted.len() != steps.len() {
            return Err(Error::InvalidConfig(format!(
                "variant {self} cannot use steps {steps:?}"
            )));
        }
        Ok(())
    }
}

/// The six features of one object at one capture.
pub fn step_features(capture: &CapturedStep, object: &ObjectSpec) -> Result<[f64; FEATURES_PER_STEP]> {
    let attn = capture
        .attention_for(&object.id)
        .ok_or_else(|| Error::UnknownObject(object.id.clone()))?;
    let (attn_max, attn_mean, attn_topmass) = attention_summary(attn);
    let size = capture.pfi.height();
    let mut responses: Vec<(f64, usize)> = object
        .positions
        .iter()
        .enumerate()
        .map(|(j, &p)| (matched_response(&capture.pfi, &object.placed_template(p, size)), j))
        .collect();
    responses.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (best, best_pos) = responses[0];
    let gap = responses.get(1).map_or(0.0, |second| best - second.0);
    let energy = local_energy(&capture.pfi, object.positions[best_pos].row, object.positions[best_pos].col);
    Ok([attn_max, attn_mean, attn_topmass, best, gap, energy])
}

fn attention_summary(map: &Grid) -> (f64, f64, f64) {
    let values = map.as_slice();
    let total: f64 = values.iter().sum();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((values.len() as f64 * TOP_FRACTION).ceil() as usize).max(1);
    let top: f64 = sorted[..k].iter().sum();
    let topmass = if total > 0.0 { (top / total).min(1.0) } else { 0.0 };
    let max = sorted.first().copied().unwrap_or(0.0).max(0.0);
    (max, map.mean().max(0.0), topmass)
}

fn local_energy(image: &Grid, row: usize, col: usize) -> f64 {
    let r0 = row.saturating_sub(ENERGY_RADIUS);
    let c0 = col.saturating_sub(ENERGY_RADIUS);
    let r1 = (row + ENERGY_RADIUS).min(image.height() - 1);
    let c1 = (col + ENERGY_RADIUS).min(image.width() - 1);
    let mut sum = 0.0;
    let mut n = 0;
    for r in r0..=r1 {
        for c in c0..=c1 {
            sum += image[(r, c)].powi(2);
            n += 1;
        }
    }
    sum / n as f64
}

/// Feature vector for `object` over `steps`, laid out per variant.
pub fn extract_features(
    captures: &[CapturedStep],
    object: &ObjectSpec,
    variant: Variant,
    steps: &[usize],
) -> Result<Vec<f64>> {
    let mut ordered = steps.to_vec();
    ordered.sort_unstable();
    let mut out = Vec::with_capacity(ordered.len() * FEATURES_PER_STEP);
    for step in ordered {
        let capture = captures
            .iter()
            .find(|c| c.step == step)
            .ok_or(Error::MissingCapture(step))?;
        let mut block = step_features(capture, object)?;
        if variant == Variant::AttentionOnly {
            block[3..].fill(0.0);
        }
        out.extend_from_slice(&block);
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub variant: Variant,
    pub steps: Vec<usize>,
    pub threshold: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub present: bool,
    pub score: f64,
}

impl DetectorModel {
    /// Last step consulted before the decision.
    pub fn t_last(&self) -> usize {
        *self.steps.iter().max().expect("model has steps")
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn score(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: features.len(),
            });
        }
        let logit: f64 = features
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .zip(&self.weights)
            .map(|(((x, m), s), w)| w * (x - m) / s)
            .sum::<f64>()
            + self.bias;
        Ok(sigmoid(logit))
    }

    /// Ties at the threshold count as present.
    pub fn predict_presence(&self, features: &[f64]) -> Result<Verdict> {
        let score = self.score(features)?;
        Ok(Verdict {
            present: score >= self.threshold,
            score,
        })
    }

    pub fn features(&self, captures: &[CapturedStep], object: &ObjectSpec) -> Result<Vec<f64>> {
        extract_features(captures, object, self.variant, &self.steps)
    }

    /// A detector that always answers "present".
    pub fn inert(variant: Variant, steps: Vec<usize>) -> Self {
        let dim = steps.len() * FEATURES_PER_STEP;
        Self {
            variant,
            steps,
            threshold: 0.5,
            means: vec![0.0; dim],
            stds: vec![1.0; dim],
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let steps: Vec<String> = self.steps.iter().map(|s| s.to_string()).collect();
        format!(
            "{MODEL_HEADER} {MODEL_VERSION}\nvariant {}\nsteps {}\nthreshold {}\nmeans {}\nstds {}\nweights {}\nbias {}\n",
            self.variant,
            steps.join(" "),
            self.threshold,
            join(&self.means),
            join(&self.stds),
            join(&self.weights),
            self.bias
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(m.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty model file"))?;
        let mut head = header.split_whitespace();
        if head.next() != Some(MODEL_HEADER) {
            return Err(bad("missing model header"));
        }
        let version: u32 = head
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version"))?;
        if version != MODEL_VERSION {
            return Err(bad(&format!("unsupported model version {version}")));
        }
        let mut fields: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            fields.insert(key, parts.collect());
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(&format!("missing `{k}`")));
        let floats = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad(&format!("bad number in `{k}`"))))
                .collect()
        };
        let scalar = |k: &str| -> Result<f64> {
            match floats(k)?.as_slice() {
                [x] => Ok(*x),
                _ => Err(bad(&format!("`{k}` must hold one value"))),
            }
        };
        let variant: Variant = get("variant")?
            .first()
            .ok_or_else(|| bad("empty variant"))?
            .parse()?;
        let steps: Vec<usize> = get("steps")?
            .iter()
            .map(|v| v.parse().map_err(|_| bad("bad step")))
            .collect::<Result<_>>()?;
        variant.check_steps(&steps)?;
        let model = Self {
            variant,
            steps,
            threshold: scalar("threshold")?,
            means: floats("means")?,
            stds: floats("stds")?,
            weights: floats("weights")?,
            bias: scalar("bias")?,
        };
        let dim = model.steps.len() * FEATURES_PER_STEP;
        if model.means.len() != dim || model.stds.len() != dim || model.weights.len() != dim {
            return Err(bad("parameter vectors do not match the step count"));
        }
        if model.stds.iter().any(|s| !(*s > 0.0)) {
            return Err(bad("standard deviations must be positive"));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    /// Drives the prompt-disjoint split.
    pub seed: u64,
    /// Validation recall the threshold is calibrated to; see
    /// [`calibrate_threshold`].
    pub target_recall: Option<f64>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 500,
            l2: 1e-4,
            seed: 7,
            target_recall: None,
        }
    }
}

/// Standardized logistic regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Mean log-loss on the training rows (without the penalty).
    pub loss: f64,
}

/// Full-batch gradient descent on the L2-regularized mean log-loss.
/// Zero-variance features get unit scale (they stay at zero after centering).
pub fn fit_logistic(rows: &[Vec<f64>], labels: &[u8], hyper: &TrainHyper) -> Result<LogisticFit> {
    assert_eq!(rows.len(), labels.len());
    let n = rows.len();
    if n == 0 || labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::DegenerateLabels);
    }
    let dim = rows[0].len();
    let mut means = vec![0.0; dim];
    for r in rows {
        for (m, x) in means.iter_mut().zip(r) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut stds = vec![0.0; dim];
    for r in rows {
        for ((s, x), m) in stds.iter_mut().zip(r).zip(&means) {
            *s += (x - m).powi(2);
        }
    }
    for s in &mut stds {
        *s = (*s / n as f64).sqrt();
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    }
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&means).zip(&stds).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();

    let mut weights = vec![0.0; dim];
    let mut bias = 0.0;
    let mut grad = vec![0.0; dim];
    for epoch in 0..hyper.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (xi, yi) in x.iter().zip(&y) {
            let z: f64 = xi.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>() + bias;
            let err = sigmoid(z) - yi;
            for (g, a) in grad.iter_mut().zip(xi) {
                *g += err * a;
            }
            grad_b += err;
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= hyper.lr * (g / n as f64 + hyper.l2 * *w);
        }
        bias -= hyper.lr * grad_b / n as f64;
        if !weights.iter().all(|w| w.is_finite()) || !bias.is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
    }
    let loss = x
        .iter()
        .zip(&y)
        .map(|(xi, yi)| {
            let z: f64 = xi.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>() + bias;
            // log(1 + e^z) - y z, computed stably
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            softplus - yi * z
        })
        .sum::<f64>()
        / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(hyper.epochs));
    }
    Ok(LogisticFit {
        means,
        stds,
        weights,
        bias,
        loss,
    })
}

/// Feature rows and labels for every (sample, target) pair of the given prompts.
pub fn feature_table(
    dataset: &Dataset,
    prompt_ids: &[usize],
    variant: Variant,
    steps: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<u8>, Vec<String>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut objects = Vec::new();
    for s in dataset.samples_for(prompt_ids) {
        for (id, &label) in dataset.prompts[s.prompt_id].targets.iter().zip(&s.labels) {
            let spec = dataset.catalog.require(id)?;
            rows.push(extract_features(&s.captures, spec, variant, steps)?);
            labels.push(label);
            objects.push(id.clone());
        }
    }
    Ok((rows, labels, objects))
}

#[derive(Debug, Clone)]
pub struct TrainedDetector {
    pub model: DetectorModel,
    pub splits: Splits,
    pub train_loss: f64,
}

/// Fits a detector on the training prompts of a seeded prompt-disjoint
/// split. With `target_recall`, the threshold is recalibrated on the
/// validation prompts.
pub fn train_detector(
    dataset: &Dataset,
    variant: Variant,
    steps: &[usize],
    hyper: &TrainHyper,
) -> Result<TrainedDetector> {
    variant.check_steps(steps)?;
    for s in steps {
        if !dataset.config.critical_steps.contains(s) {
            return Err(Error::MissingCapture(*s));
        }
    }
    let splits = Splits::by_prompt(dataset.prompts.len(), hyper.seed);
    let (rows, labels, _) = feature_table(dataset, &splits.train, variant, steps)?;
    let fit = fit_logistic(&rows, &labels, hyper)?;
    let mut steps = steps.to_vec();
    steps.sort_unstable();
    let mut model = DetectorModel {
        variant,
        steps,
        threshold: 0.5,
        means: fit.means,
        stds: fit.stds,
        weights: fit.weights,
        bias: fit.bias,
    };
    if let Some(target) = hyper.target_recall {
        let scored = score_split(&model, dataset, &splits.validation)?;
        model.threshold = calibrate_threshold(&scored, target);
    }
    Ok(TrainedDetector {
        model,
        splits,
        train_loss: fit.loss,
    })
}

/// `(object id, score, label)` for every pair in the given prompts.
pub fn score_split(model: &DetectorModel, dataset: &Dataset, prompt_ids: &[usize]) -> Result<Vec<(String, f64, u8)>> {
    let (rows, labels, objects) = feature_table(dataset, prompt_ids, model.variant, &model.steps)?;
    rows.iter()
        .zip(labels)
        .zip(objects)
        .map(|((r, l), o)| Ok((o, model.score(r)?, l)))
        .collect()
}

/// Largest threshold (among observed scores, or 0.5 if that already works)
/// whose recall on `scored` reaches `target`.
pub fn calibrate_threshold(scored: &[(String, f64, u8)], target: f64) -> f64 {
    let mut positives: Vec<f64> = scored.iter().filter(|s| s.2 == 1).map(|s| s.1).collect();
    if positives.is_empty() {
        return 0.5;
    }
    positives.sort_by(|a, b| b.total_cmp(a));
    let needed = ((target * positives.len() as f64).ceil() as usize).clamp(1, positives.len());
    // Scores >= threshold are present, so the needed-th highest positive
    // score is the largest threshold that keeps `needed` positives.
    positives[needed - 1].min(0.5)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub r#fn: u64,
}

impl Confusion {
    pub fn record(&mut self, predicted_present: bool, label: u8) {
        match (predicted_present, label == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.r#fn += 1,
        }
    }

    /// `TP / (TP + FN)`, absent when there are no positives.
    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.r#fn;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `TN / (TN + FP)`, absent when there are no negatives.
    pub fn tn_rate(&self) -> Option<f64> {
        let d = self.tn + self.fp;
        (d > 0).then(|| self.tn as f64 / d as f64)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.r#fn
    }

    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.r#fn += other.r#fn;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub pooled: Confusion,
    pub per_object: BTreeMap<String, Confusion>,
}

impl ConfusionReport {
    pub fn from_scored(scored: &[(String, f64, u8)], threshold: f64) -> Self {
        let mut report = Self::default();
        for (object, score, label) in scored {
            let present = *score >= threshold;
            report.pooled.record(present, *label);
            report
                .per_object
                .entry(object.clone())
                .or_default()
                .record(present, *label);
        }
        report
    }

    pub fn recall(&self) -> Option<f64> {
        self.pooled.recall()
    }

    pub fn tn_rate(&self) -> Option<f64> {
        self.pooled.tn_rate()
    }
}

/// Confusion of the model's verdicts against stored labels.
pub fn evaluate_detector(model: &DetectorModel, dataset: &Dataset, prompt_ids: &[usize]) -> Result<ConfusionReport> {
    let scored = score_split(model, dataset, prompt_ids)?;
    Ok(ConfusionReport::from_scored(&scored, model.threshold))
}

pub fn evaluate_split(trained: &TrainedDetector, dataset: &Dataset, split: Split) -> Result<ConfusionReport> {
    evaluate_detector(&trained.model, dataset, trained.splits.get(split))
}

/// Per-object verdicts for one sample.
pub fn verdicts_for(model: &DetectorModel, sample: &LabeledSample, targets: &[String], catalog: &Catalog) -> Result<Vec<Verdict>> {
    targets
        .iter()
        .map(|id| {
            let spec = catalog.require(id)?;
            model.predict_presence(&model.features(&sample.captures, spec)?)
        })
        .collect()
}
