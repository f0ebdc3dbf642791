//! Built-in numerical self-tests: backward rules, least-squares exact fit
//! and metric counting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::episodes::LabelMap;
use crate::error::Result;
use crate::eval::{fbiou, IouAccumulator};
use crate::gradcheck::{op_suite, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::taft::{build_transform, PrototypeSet, ReferenceBank};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub passed: usize,
    pub total: usize,
    /// Largest error seen (suite-specific unit).
    pub worst: f64,
}

impl SuiteResult {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

/// Finite-difference check of every differentiable operation.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    let cases = op_suite();
    for case in &cases {
        let check = case.check(seed, instances, DEFAULT_STEP)?;
        worst = worst.max(check.max_rel_error);
        passed += usize::from(check.passed(DEFAULT_TOLERANCE));
    }
    Ok(SuiteResult {
        suite: "gradients".into(),
        passed,
        total: cases.len(),
        worst,
    })
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    Tensor::from_vec((0..d).map(|_| StandardNormal.sample(rng)).collect())
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Relative residual `|P C - R|_F / |R|_F` of one random instance with
/// ridge 0.
#[allow(clippy::needless_range_loop)]
pub fn exact_fit_residual(d: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors: Vec<Tensor> = (0..4).map(|_| gaussian(&mut rng, d)).collect();
    let g = Graph::new();
    let protos = PrototypeSet {
        fg: g.constant(vectors[0].clone()),
        bg: g.constant(vectors[1].clone()),
        shots: 1,
    };
    let refs = ReferenceBank {
        fg: g.constant(vectors[2].clone()),
        bg: g.constant(vectors[3].clone()),
    };
    let p = build_transform(&protos, &refs, 0.0)?.p.value();
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..2 {
        let c = unit(vectors[k].data());
        let r = unit(vectors[k + 2].data());
        for i in 0..d {
            let pc: f64 = (0..d).map(|j| p.data()[i * d + j] * c[j]).sum();
            num += (pc - r[i]).powi(2);
            den += r[i] * r[i];
        }
    }
    Ok((num / den).sqrt())
}

/// Exact fit over random instances plus the forced-degenerate case.
pub fn exact_fit_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.gen_range(4..=64);
        let residual = exact_fit_residual(d, rng.gen())?;
        worst = worst.max(residual);
        passed += usize::from(residual < 1e-9);
    }
    let g = Graph::new();
    let v = g.constant(gaussian(&mut rng, 8));
    let protos = PrototypeSet { fg: v, bg: v, shots: 1 };
    let refs = ReferenceBank {
        fg: g.constant(gaussian(&mut rng, 8)),
        bg: g.constant(gaussian(&mut rng, 8)),
    };
    let degenerate_ok = build_transform(&protos, &refs, 1e-8).is_ok_and(|t| t.p.value().is_finite());
    passed += usize::from(degenerate_ok);
    Ok(SuiteResult {
        suite: "exact-fit".into(),
        passed,
        total: instances + 1,
        worst,
    })
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMap {
    let density: f64 = rng.gen_range(0.05..0.95);
    LabelMap::new(h, w, (0..h * w).map(|_| u8::from(rng.gen_bool(density))).collect())
}

/// Accumulated IoU against plain pixel counting on random mask pairs.
pub fn metric_suite(pairs: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let (pred, gt) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let mut acc = IouAccumulator::default();
        acc.accumulate(&pred, &gt, 1)?;
        let mut tally = [[0u64; 2]; 2];
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            tally[usize::from(p)][usize::from(g)] += 1;
        }
        let iou = |k: usize| {
            let inter = tally[k][k];
            let union = tally[k][0] + tally[k][1] + tally[0][k] + tally[1][k] - inter;
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        };
        let fb = fbiou(std::slice::from_ref(&pred), std::slice::from_ref(&gt))?;
        let err = (acc.miou() - iou(1)).abs().max((fb - 0.5 * (iou(0) + iou(1))).abs());
        worst = worst.max(err);
        passed += usize::from(err == 0.0);
    }
    Ok(SuiteResult {
        suite: "metrics".into(),
        passed,
        total: pairs,
        worst,
    })
}
