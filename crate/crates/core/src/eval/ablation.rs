use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{shot_delta, shot_sweep, EvalPlan, ModelPredictor};
use crate::config::{EvalConfig, ExperimentConfig};
use crate::episodes::SceneSource;
use crate::error::Result;
use crate::nets::Model;
use crate::train::{train_run, TrainOptions};

/// Shot counts reported by the ablation table.
pub const ABLATION_SHOTS: [usize; 2] = [1, 5];
/// Input scales of the multi-scale rows.
pub const MULTI_SCALES: [f64; 3] = [0.7, 1.0, 1.3];

/// One row of the ablation: which modules are on and how it is evaluated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    pub attention: bool,
    pub aux: bool,
    pub multi_scale: bool,
    pub low_level_transform: bool,
}

impl AblationSpec {
    fn new(name: &str, attention: bool, aux: bool, multi_scale: bool, low_level_transform: bool) -> Self {
        Self {
            name: name.to_string(),
            attention,
            aux,
            multi_scale,
            low_level_transform,
        }
    }

    /// Training configuration of this row.
    pub fn train_config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.model.attention = self.attention;
        cfg.model.aux = self.aux;
        cfg.model.low_level_transform = self.low_level_transform;
        cfg
    }

    pub fn scales(&self) -> Vec<f64> {
        if self.multi_scale {
            MULTI_SCALES.to_vec()
        } else {
            vec![1.0]
        }
    }
}

/// The four cumulative rows, plus the low-level transform row on the
/// plain base when `low_level` is set.
pub fn ablation_rows(low_level: bool) -> Vec<AblationSpec> {
    let mut rows = vec![
        AblationSpec::new("taft", false, false, false, false),
        AblationSpec::new("taft+attn", true, false, false, false),
        AblationSpec::new("taft+attn+aux", true, true, false, false),
        AblationSpec::new("taft+attn+aux+ms", true, true, true, false),
    ];
    if low_level {
        rows.push(AblationSpec::new("taft+low_level", false, false, false, true));
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub attention: bool,
    pub aux: bool,
    pub multi_scale: bool,
    pub low_level_transform: bool,
    pub seed: u64,
    pub config_hash: String,
    pub miou_1shot: f64,
    pub miou_5shot: f64,
    pub fbiou_1shot: f64,
    pub fbiou_5shot: f64,
    pub delta: f64,
}

/// Trains (or reuses from `cache`) and evaluates one row.
pub fn run_ablation_row(
    base: &ExperimentConfig,
    eval: &EvalConfig,
    source: &dyn SceneSource,
    spec: &AblationSpec,
    cache: &mut BTreeMap<String, Model>,
) -> Result<AblationRow> {
    let cfg = spec.train_config(base);
    let hash = cfg.hash();
    if !cache.contains_key(&hash) {
        let outcome = train_run(&cfg, source, TrainOptions::default())?;
        cache.insert(hash.clone(), outcome.model);
    }
    let model = &cache[&hash];
    let plan = EvalPlan {
        scales: spec.scales(),
        ..EvalPlan::from_config(eval, cfg.train.split)
    };
    let predictor = ModelPredictor {
        model,
        scales: spec.scales(),
    };
    let reports = shot_sweep(&predictor, source, &plan, &ABLATION_SHOTS, &hash)?;
    Ok(AblationRow {
        name: spec.name.clone(),
        attention: spec.attention,
        aux: spec.aux,
        multi_scale: spec.multi_scale,
        low_level_transform: spec.low_level_transform,
        seed: cfg.train.seed,
        config_hash: hash,
        miou_1shot: reports[0].miou,
        miou_5shot: reports[1].miou,
        fbiou_1shot: reports[0].fbiou,
        fbiou_5shot: reports[1].fbiou,
        delta: shot_delta(&reports, 1, 5).unwrap_or(0.0),
    })
}

/// Every row; rows differing only in evaluation share one trained model.
pub fn ablation_run(
    base: &ExperimentConfig,
    eval: &EvalConfig,
    source: &dyn SceneSource,
    low_level: bool,
) -> Result<Vec<AblationRow>> {
    let mut cache = BTreeMap::new();
    ablation_rows(low_level)
        .iter()
        .map(|spec| run_ablation_row(base, eval, source, spec, &mut cache))
        .collect()
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let rows = ablation_rows(false);
        assert_eq!(rows.len(), 4);
        assert_eq!(ablation_rows(true).len(), 5);
        let base = ExperimentConfig::default();
        // The multi-scale row trains exactly what its predecessor trains.
        assert_eq!(rows[2].train_config(&base), rows[3].train_config(&base));
        assert_eq!(rows[3].scales(), vec![0.7, 1.0, 1.3]);
        let low = &ablation_rows(true)[4];
        assert!(!low.attention && !low.aux && low.low_level_transform);
    }
}
