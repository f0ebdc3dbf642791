//! Segmentation metrics, multi-scale inference, shot sweeps, reference
//! stability and the ablation harness.

mod ablation;
mod stability;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::episodes::{episode_seed, sample_episode, Episode, LabelMap, Phase, SceneSource};
use crate::error::{Error, Result};
use crate::nets::{Checkpoint, Model, HIGH_STRIDE};
use crate::tensor::{Graph, Tensor, TensorError};
use crate::train::{condition, query_forward};

pub use ablation::{
    ablation_rows, ablation_run, run_ablation_row, write_ablation_csv, AblationRow, AblationSpec, ABLATION_SHOTS,
    MULTI_SCALES,
};
pub use stability::{stability_run, StabilitySummary, StabilityTrace};

/// Intersection and union pixel counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub intersection: u64,
    pub union: u64,
}

impl Counts {
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    fn add(&mut self, other: Counts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }
}

fn counts(pred: &LabelMap, gt: &LabelMap, value: u8) -> Result<Counts> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(TensorError::shape("iou", &[pred.height, pred.width], &[gt.height, gt.width]).into());
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p == value, g == value);
        c.intersection += u64::from(p && g);
        c.union += u64::from(p || g);
    }
    Ok(c)
}

/// Pooled counts per class plus foreground/background totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IouAccumulator {
    pub per_class: BTreeMap<u8, Counts>,
    pub foreground: Counts,
    pub background: Counts,
    pub images: usize,
}

impl IouAccumulator {
    /// Adds one binary prediction of class `class_id`.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<()> {
        let fg = counts(pred, gt, 1)?;
        let bg = counts(pred, gt, 0)?;
        self.per_class.entry(class_id).or_default().add(fg);
        self.foreground.add(fg);
        self.background.add(bg);
        self.images += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (&k, &c) in &other.per_class {
            self.per_class.entry(k).or_default().add(c);
        }
        self.foreground.add(other.foreground);
        self.background.add(other.background);
        self.images += other.images;
    }

    pub fn class_iou(&self) -> BTreeMap<u8, f64> {
        self.per_class.iter().map(|(&k, c)| (k, c.iou())).collect()
    }

    /// Mean over classes of the pooled foreground IoU.
    pub fn miou(&self) -> f64 {
        if self.per_class.is_empty() {
            return 0.0;
        }
        self.per_class.values().map(Counts::iou).sum::<f64>() / self.per_class.len() as f64
    }

    pub fn fbiou(&self) -> f64 {
        0.5 * (self.foreground.iou() + self.background.iou())
    }
}

/// Mean of foreground and background IoU pooled over all images.
pub fn fbiou(preds: &[LabelMap], gts: &[LabelMap]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(
            TensorError::contract("fbiou", format!("{} predictions for {} masks", preds.len(), gts.len())).into(),
        );
    }
    let mut acc = IouAccumulator::default();
    for (p, g) in preds.iter().zip(gts) {
        acc.accumulate(p, g, 1)?;
    }
    Ok(acc.fbiou())
}

/// Anything that segments the queries of an episode.
pub trait Predictor {
    fn predict(&self, episode: &Episode) -> Result<Vec<LabelMap>>;
}

/// Returns the ground truth; used to self-test the harness.
pub struct GroundTruthPredictor;

impl Predictor for GroundTruthPredictor {
    fn predict(&self, episode: &Episode) -> Result<Vec<LabelMap>> {
        Ok(episode.queries.iter().map(|q| q.mask.clone()).collect())
    }
}

/// A trained model evaluated at one or more input scales.
pub struct ModelPredictor<'m> {
    pub model: &'m Model,
    pub scales: Vec<f64>,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, episode: &Episode) -> Result<Vec<LabelMap>> {
        predict_episode(self.model, episode, &self.scales)
    }
}

/// Side of the network input for an image of side `size` at `scale`,
/// rounded up to a multiple of 16.
pub fn scaled_size(size: usize, scale: f64) -> usize {
    let raw = (size as f64 * scale).ceil().max(1.0) as usize;
    raw.div_ceil(HIGH_STRIDE) * HIGH_STRIDE
}

fn resize_images(images: &Tensor, size: usize) -> Result<Tensor> {
    let s = images.shape();
    if s[2] == size && s[3] == size {
        return Ok(images.clone());
    }
    Ok(images.resize_bilinear(size, size)?)
}

/// Foreground/background probabilities `[M, 2, H, W]` at one scale.
pub fn episode_probabilities(model: &Model, episode: &Episode, scale: f64) -> Result<Tensor> {
    let queries = episode.query_images()?;
    let (h, w) = (queries.shape()[2], queries.shape()[3]);
    let size = scaled_size(h.max(w), scale);
    let supports = resize_images(&episode.support_images()?, size)?;
    let masks: Vec<LabelMap> = episode
        .supports
        .iter()
        .map(|s| s.mask.resize_nearest(size, size))
        .collect();
    let mask_refs: Vec<&LabelMap> = masks.iter().collect();
    let g = Graph::new();
    let bound = model.bind_frozen(&g);
    let cond = condition(&bound, &supports, &mask_refs)?;
    let pass = query_forward(&bound, &cond, &resize_images(&queries, size)?)?;
    let probs = pass.logits.softmax(1)?.value();
    if size == h && size == w {
        Ok((*probs).clone())
    } else {
        Ok(probs.resize_bilinear(h, w)?)
    }
}

/// Probabilities averaged over `scales`.
pub fn multiscale_probabilities(model: &Model, episode: &Episode, scales: &[f64]) -> Result<Tensor> {
    if scales.is_empty() {
        return Err(Error::Config("eval.scales: need at least one scale".into()));
    }
    let mut sum = episode_probabilities(model, episode, scales[0])?;
    for &s in &scales[1..] {
        let p = episode_probabilities(model, episode, s)?;
        for (a, b) in sum.data_mut().iter_mut().zip(p.data()) {
            *a += b;
        }
    }
    let inv = 1.0 / scales.len() as f64;
    if scales.len() > 1 {
        sum.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(sum)
}

/// Binary masks from the averaged probabilities; ties go to background.
pub fn predict_episode(model: &Model, episode: &Episode, scales: &[f64]) -> Result<Vec<LabelMap>> {
    let probs = multiscale_probabilities(model, episode, scales)?;
    let s = probs.shape();
    let (m, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    Ok((0..m)
        .map(|i| {
            let base = i * 2 * plane;
            let data = (0..plane)
                .map(|p| u8::from(probs.data()[base + plane + p] > probs.data()[base + p]))
                .collect();
            LabelMap::new(h, w, data)
        })
        .collect())
}

/// Evaluation results for one shot count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub split: usize,
    pub shots: usize,
    pub episodes: usize,
    pub seed: u64,
    pub scales: Vec<f64>,
    pub class_iou: BTreeMap<u8, f64>,
    pub miou: f64,
    pub fbiou: f64,
    /// mIoU change relative to the previous entry of a sweep.
    pub delta: Option<f64>,
}

/// Episode settings shared by [`evaluate`] calls.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlan {
    pub split: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
    pub scales: Vec<f64>,
}

impl EvalPlan {
    pub fn from_config(cfg: &EvalConfig, split: usize) -> Self {
        Self {
            split,
            shots: cfg.shots,
            queries: cfg.queries,
            episodes: cfg.episodes,
            seed: cfg.seed,
            scales: cfg.scales.clone(),
        }
    }
}

/// Runs `plan.episodes` test episodes. Episode `i` uses the same seed for
/// every shot count, so sweeps share their queries.
pub fn evaluate(
    predictor: &dyn Predictor,
    source: &dyn SceneSource,
    plan: &EvalPlan,
    config_hash: &str,
) -> Result<MetricsReport> {
    if source.catalog().test_classes(plan.split).is_empty() {
        return Err(Error::Config(format!(
            "eval.split: split {} has no test classes",
            plan.split
        )));
    }
    let mut acc = IouAccumulator::default();
    for i in 0..plan.episodes {
        let seed = episode_seed(plan.seed, i as u64);
        let wrap = |e: Error| Error::Episode {
            episode: i,
            seed,
            source: Box::new(e),
        };
        let episode = sample_episode(source, Phase::Test, plan.split, plan.shots, plan.queries, seed).map_err(wrap)?;
        let preds = predictor.predict(&episode).map_err(wrap)?;
        for (pred, q) in preds.iter().zip(&episode.queries) {
            acc.accumulate(pred, &q.mask, episode.class_id)?;
        }
    }
    Ok(MetricsReport {
        config_hash: config_hash.to_string(),
        split: plan.split,
        shots: plan.shots,
        episodes: plan.episodes,
        seed: plan.seed,
        scales: plan.scales.clone(),
        class_iou: acc.class_iou(),
        miou: acc.miou(),
        fbiou: acc.fbiou(),
        delta: None,
    })
}

/// Evaluates each shot count; `delta` holds successive mIoU differences.
pub fn shot_sweep(
    predictor: &dyn Predictor,
    source: &dyn SceneSource,
    plan: &EvalPlan,
    shots: &[usize],
    config_hash: &str,
) -> Result<Vec<MetricsReport>> {
    let mut reports: Vec<MetricsReport> = Vec::with_capacity(shots.len());
    for &n in shots {
        let mut report = evaluate(
            predictor,
            source,
            &EvalPlan {
                shots: n,
                ..plan.clone()
            },
            config_hash,
        )?;
        report.delta = reports.last().map(|prev| report.miou - prev.miou);
        reports.push(report);
    }
    Ok(reports)
}

/// mIoU difference between two shot counts of a sweep, if both are present.
pub fn shot_delta(reports: &[MetricsReport], from: usize, to: usize) -> Option<f64> {
    let get = |n| reports.iter().find(|r| r.shots == n).map(|r| r.miou);
    Some(get(to)? - get(from)?)
}

/// Checks that a checkpoint was trained for `split` on `source`.
pub fn check_checkpoint(ck: &Checkpoint, source: &dyn SceneSource, split: usize) -> Result<()> {
    if ck.split != split {
        return Err(Error::Config(format!(
            "eval.split: checkpoint was trained with split {}, not {split}",
            ck.split
        )));
    }
    if ck.source != source.fingerprint() {
        return Err(Error::Config(format!(
            "world: checkpoint was trained on {}, not {}",
            ck.source,
            source.fingerprint()
        )));
    }
    if ck.aux_channels != source.catalog().aux_channels(split) {
        return Err(Error::Config(
            "world: class catalog does not match the checkpoint".into(),
        ));
    }
    Ok(())
}

pub fn write_reports_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config_hash",
        "split",
        "shots",
        "episodes",
        "seed",
        "scales",
        "miou",
        "fbiou",
        "delta",
    ])?;
    for r in reports {
        let scales: Vec<String> = r.scales.iter().map(|s| s.to_string()).collect();
        w.write_record([
            r.config_hash.clone(),
            r.split.to_string(),
            r.shots.to_string(),
            r.episodes.to_string(),
            r.seed.to_string(),
            scales.join(" "),
            r.miou.to_string(),
            r.fbiou.to_string(),
            r.delta.map_or(String::new(), |d| d.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}
