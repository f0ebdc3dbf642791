use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::episodes::SceneSource;
use crate::error::Result;
use crate::tensor::Tensor;
use crate::train::{train_run, TrainOptions};

/// Episode-to-episode drift of one vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub distance: Vec<f64>,
    /// `distance / |previous| * 100`
    pub percent: Vec<f64>,
    #[serde(skip)]
    previous: Option<Vec<f64>>,
}

impl Drift {
    fn observe(&mut self, current: &[f64]) {
        if let Some(prev) = &self.previous {
            let dist = prev
                .iter()
                .zip(current)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let norm = prev.iter().map(|a| a * a).sum::<f64>().sqrt();
            self.distance.push(dist);
            self.percent.push(if norm > 0.0 { dist / norm * 100.0 } else { 0.0 });
        }
        self.previous = Some(current.to_vec());
    }

    pub fn mean_percent(&self) -> f64 {
        if self.percent.is_empty() {
            0.0
        } else {
            self.percent.iter().sum::<f64>() / self.percent.len() as f64
        }
    }
}

/// Prototype and reference drift over a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StabilityTrace {
    pub prototype_fg: Drift,
    pub prototype_bg: Drift,
    pub reference_fg: Drift,
    pub reference_bg: Drift,
}

/// Mean percentage changes and their ratio (prototype over reference;
/// `None` when the references never moved).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub prototype_fg: f64,
    pub prototype_bg: f64,
    pub reference_fg: f64,
    pub reference_bg: f64,
    pub ratio_fg: Option<f64>,
    pub ratio_bg: Option<f64>,
}

impl StabilitySummary {
    /// References drift strictly less than prototypes for both classes.
    pub fn references_more_stable(&self) -> bool {
        self.reference_fg < self.prototype_fg && self.reference_bg < self.prototype_bg
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

impl StabilityTrace {
    pub fn observe(&mut self, c_fg: &Tensor, c_bg: &Tensor, r_fg: &Tensor, r_bg: &Tensor) {
        self.prototype_fg.observe(c_fg.data());
        self.prototype_bg.observe(c_bg.data());
        self.reference_fg.observe(r_fg.data());
        self.reference_bg.observe(r_bg.data());
    }

    /// Number of recorded transitions (episodes minus one).
    pub fn len(&self) -> usize {
        self.prototype_fg.distance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn summary(&self) -> StabilitySummary {
        let s = |d: &Drift| d.mean_percent();
        StabilitySummary {
            prototype_fg: s(&self.prototype_fg),
            prototype_bg: s(&self.prototype_bg),
            reference_fg: s(&self.reference_fg),
            reference_bg: s(&self.reference_bg),
            ratio_fg: ratio(s(&self.prototype_fg), s(&self.reference_fg)),
            ratio_bg: ratio(s(&self.prototype_bg), s(&self.reference_bg)),
        }
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "episode",
            "prototype_fg_dist",
            "prototype_bg_dist",
            "reference_fg_dist",
            "reference_bg_dist",
            "prototype_fg_pct",
            "prototype_bg_pct",
            "reference_fg_pct",
            "reference_bg_pct",
        ])?;
        for t in 0..self.len() {
            let mut row = vec![(t + 1).to_string()];
            for d in [
                &self.prototype_fg,
                &self.prototype_bg,
                &self.reference_fg,
                &self.reference_bg,
            ] {
                row.push(d.distance[t].to_string());
            }
            for d in [
                &self.prototype_fg,
                &self.prototype_bg,
                &self.reference_fg,
                &self.reference_bg,
            ] {
                row.push(d.percent[t].to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains with drift recording and returns the trace.
pub fn stability_run(config: &ExperimentConfig, source: &dyn SceneSource) -> Result<StabilityTrace> {
    let outcome = train_run(
        config,
        source,
        TrainOptions {
            record_trace: true,
            ..Default::default()
        },
    )?;
    Ok(outcome.trace.unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_hand_case() {
        let mut d = Drift::default();
        d.observe(&[3.0, 4.0]);
        d.observe(&[3.0, 4.0]);
        d.observe(&[0.0, 0.0]);
        assert_eq!(d.distance, vec![0.0, 5.0]);
        assert_eq!(d.percent, vec![0.0, 100.0]);
        assert_eq!(d.mean_percent(), 50.0);
    }

    #[test]
    fn frozen_references_have_no_ratio() {
        let mut t = StabilityTrace::default();
        let r = Tensor::from_vec(vec![1.0, 0.0]);
        t.observe(
            &Tensor::from_vec(vec![1.0, 1.0]),
            &Tensor::from_vec(vec![0.0, 1.0]),
            &r,
            &r,
        );
        t.observe(
            &Tensor::from_vec(vec![2.0, 1.0]),
            &Tensor::from_vec(vec![0.0, 2.0]),
            &r,
            &r,
        );
        let s = t.summary();
        assert_eq!(t.len(), 1);
        assert_eq!(s.reference_fg, 0.0);
        assert_eq!(s.ratio_fg, None);
        assert!(s.references_more_stable());
    }
}
