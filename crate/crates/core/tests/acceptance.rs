//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taftseg::episodes::{episode_seed, sample_episode, LabelMap, Phase, ShapeWorld};
use taftseg::eval::{
    ablation_rows, ablation_run, evaluate, run_ablation_row, shot_sweep, write_ablation_csv, EvalPlan, IouAccumulator,
    MetricsReport, ModelPredictor, StabilitySummary,
};
use taftseg::gradcheck::{op_suite, DEFAULT_STEP, DEFAULT_TOLERANCE};
use taftseg::taft::{build_transform, PrototypeSet, ReferenceBank};
use taftseg::tensor::{Graph, Tensor};
use taftseg::train::routing_check;
use taftseg::{train_run, Checkpoint, EvalConfig, ExperimentConfig, Model, SceneSource, TrainOptions, TransformMode};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed < Duration::from_secs(limit_secs)
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    let cases = op_suite();
    for (i, case) in cases.iter().enumerate() {
        let check = case.check(7000 + i as u64, 20, DEFAULT_STEP).expect("op check");
        worst = worst.max(check.max_rel_error);
        if !check.passed(DEFAULT_TOLERANCE) {
            failed.push(check.name);
        }
    }
    let elapsed = t.elapsed();
    outcome(
        failed.is_empty() && within(elapsed, 120),
        format!(
            "{} ops x 20 instances, worst rel err {worst:.2e}, failed {failed:?}, {elapsed:.1?}",
            cases.len()
        ),
    )
}

fn normal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn solve(c_fg: &[f64], c_bg: &[f64], r_fg: &[f64], r_bg: &[f64], ridge: f64) -> Option<Tensor> {
    let g = Graph::new();
    let v = |x: &[f64]| g.constant(Tensor::from_vec(x.to_vec()));
    let protos = PrototypeSet {
        fg: v(c_fg),
        bg: v(c_bg),
        shots: 1,
    };
    let refs = ReferenceBank {
        fg: v(r_fg),
        bg: v(r_bg),
    };
    build_transform(&protos, &refs, ridge)
        .ok()
        .map(|t| (*t.p.value()).clone())
}

fn exact_fit() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.gen_range(4..=64);
        let v: Vec<Vec<f64>> = (0..4).map(|_| normal(&mut rng, d)).collect();
        let Some(p) = solve(&v[0], &v[1], &v[2], &v[3], 0.0) else {
            return outcome(false, format!("solver rejected a full-rank instance (d={d})"));
        };
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..2 {
            let (c, r) = (unit(&v[k]), unit(&v[k + 2]));
            for i in 0..d {
                let pc: f64 = (0..d).map(|j| p.data()[i * d + j] * c[j]).sum();
                num += (pc - r[i]).powi(2);
                den += r[i] * r[i];
            }
        }
        worst = worst.max((num / den).sqrt());
    }
    let c = normal(&mut rng, 16);
    let (r1, r2) = (normal(&mut rng, 16), normal(&mut rng, 16));
    let degenerate = solve(&c, &c, &r1, &r2, 1e-8).is_some_and(|p| p.data().iter().all(|x| x.is_finite()));
    let elapsed = t.elapsed();
    outcome(
        worst < 1e-9 && degenerate && within(elapsed, 10),
        format!("200 instances, worst residual {worst:.2e}, degenerate finite {degenerate}, {elapsed:.1?}"),
    )
}

fn routing(world: &ShapeWorld) -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let mut cfg = ExperimentConfig::default();
        cfg.model.low_level_transform = i % 2 == 1;
        let model = Model::new(&cfg.model, world.catalog().aux_channels(0), 300 + i).expect("model");
        let ep = sample_episode(world, Phase::Train, 0, 1 + (i as usize % 2), 2, episode_seed(31, i)).expect("episode");
        worst = worst.max(routing_check(&model, &ep, world.catalog()).expect("routing").max());
    }
    let elapsed = t.elapsed();
    outcome(
        worst <= 1e-10 && within(elapsed, 60),
        format!("20 episodes, worst group gradient gap {worst:.2e}, {elapsed:.1?}"),
    )
}

fn metrics() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let class = rng.gen_range(1..=12u8);
        let pred: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let gt: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_bool(0.3))).collect();
        let mut acc = IouAccumulator::default();
        acc.accumulate(
            &LabelMap::new(h, w, pred.clone()),
            &LabelMap::new(h, w, gt.clone()),
            class,
        )
        .expect("acc");
        let count = |k: u8| {
            let inter = pred.iter().zip(&gt).filter(|(&p, &g)| p == k && g == k).count();
            let union = pred.iter().zip(&gt).filter(|(&p, &g)| p == k || g == k).count();
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        };
        if acc.miou() != count(1) || acc.fbiou() != 0.5 * (count(0) + count(1)) {
            mismatches += 1;
        }
    }
    let mut hand = IouAccumulator::default();
    let pred = LabelMap::new(1, 6, vec![1, 1, 1, 1, 0, 0]);
    let gt = LabelMap::new(1, 6, vec![0, 0, 1, 1, 0, 0]);
    hand.accumulate(&pred, &gt, 1).expect("acc");
    let hand_iou = hand.miou();
    let elapsed = t.elapsed();
    outcome(
        mismatches == 0 && hand_iou == 0.5 && within(elapsed, 5),
        format!("100 pairs, {mismatches} mismatches, hand case IoU {hand_iou}, {elapsed:.1?}"),
    )
}

struct DeskSeed {
    taft: Vec<MetricsReport>,
    identity: Vec<MetricsReport>,
    stability: StabilitySummary,
    l_s_first: f64,
    l_s_last: f64,
    elapsed: Duration,
}

fn desk_seed(world: &ShapeWorld, seed: u64) -> DeskSeed {
    let t = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.train.seed = seed;
    let eval = EvalConfig::default();
    let plan = EvalPlan::from_config(&eval, cfg.train.split);
    let sweep = |model: &Model, hash: &str| {
        let predictor = ModelPredictor {
            model,
            scales: plan.scales.clone(),
        };
        shot_sweep(&predictor, world, &plan, &[1, 3, 5], hash).expect("sweep")
    };
    let taft = train_run(
        &cfg,
        world,
        TrainOptions {
            record_trace: true,
            progress: None,
        },
    )
    .expect("taft training");
    let tenth = (taft.losses.len() / 10).max(1);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let l_s: Vec<f64> = taft.losses.iter().map(|l| l.l_s).collect();
    let taft_reports = sweep(&taft.model, &cfg.hash());

    let mut id_cfg = cfg.clone();
    id_cfg.model.transform = TransformMode::Identity;
    let identity = train_run(&id_cfg, world, TrainOptions::default()).expect("identity training");
    let identity_reports = sweep(&identity.model, &id_cfg.hash());
    DeskSeed {
        taft: taft_reports,
        identity: identity_reports,
        stability: taft.trace.expect("trace").summary(),
        l_s_first: mean(&l_s[..tenth]),
        l_s_last: mean(&l_s[l_s.len() - tenth..]),
        elapsed: t.elapsed(),
    }
}

fn learning(runs: &[DeskSeed]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let gap = 100.0 * (r.taft[0].miou - r.identity[0].miou);
        ok &= gap >= 5.0 && within(r.elapsed, 45 * 60) && r.l_s_last < r.l_s_first;
        parts.push(format!(
            "seed {seed}: taft {:.2} vs identity {:.2} (gap {gap:.2}), L_S {:.3}->{:.3}, {:.0?}",
            100.0 * r.taft[0].miou,
            100.0 * r.identity[0].miou,
            r.l_s_first,
            r.l_s_last,
            r.elapsed
        ));
    }
    outcome(ok, parts.join("; "))
}

fn shot_scaling(runs: &[DeskSeed]) -> Outcome {
    let mut all_gain = true;
    let mut monotone = 0;
    let mut parts = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let m: Vec<f64> = r.taft.iter().map(|x| x.miou).collect();
        all_gain &= m[2] >= m[0];
        monotone += usize::from(m.windows(2).all(|w| w[1] >= w[0]));
        parts.push(format!(
            "seed {seed}: {:.2}/{:.2}/{:.2}",
            100.0 * m[0],
            100.0 * m[1],
            100.0 * m[2]
        ));
    }
    outcome(
        all_gain && monotone >= 2,
        format!("mIoU at 1/3/5 shots: {}; monotone in {monotone}/3", parts.join(", ")),
    )
}

fn stability(runs: &[DeskSeed]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let s = &r.stability;
        ok &= s.reference_fg < s.prototype_fg && s.reference_bg < s.prototype_bg;
        parts.push(format!(
            "seed {seed}: fg {:.3}% vs {:.3}%, bg {:.3}% vs {:.3}%",
            s.reference_fg, s.prototype_fg, s.reference_bg, s.prototype_bg
        ));
    }
    outcome(ok, format!("reference vs prototype mean change: {}", parts.join("; ")))
}

fn small_config(seed: u64) -> (ExperimentConfig, EvalConfig) {
    let mut cfg = ExperimentConfig::default();
    cfg.train.episodes = 30;
    cfg.train.decay_point = 20;
    cfg.train.queries = 3;
    cfg.train.seed = seed;
    let eval = EvalConfig {
        episodes: 40,
        ..EvalConfig::default()
    };
    (cfg, eval)
}

fn determinism(world: &ShapeWorld) -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let (cfg, eval) = small_config(11);
    let mut artifacts = Vec::new();
    for run in 0..2 {
        let out = train_run(&cfg, world, TrainOptions::default()).expect("train");
        let path = dir.path().join(format!("checkpoint{run}.json"));
        Checkpoint::from_model(&out.model, &cfg.hash(), &world.fingerprint(), 0)
            .save(&path)
            .expect("save");
        let model = Checkpoint::load(&path).expect("load").to_model().expect("model");
        let plan = EvalPlan::from_config(&eval, 0);
        let predictor = ModelPredictor {
            model: &model,
            scales: vec![1.0],
        };
        let report = evaluate(&predictor, world, &plan, &cfg.hash()).expect("eval");
        artifacts.push((
            std::fs::read(&path).expect("read"),
            serde_json::to_vec(&report).expect("json"),
        ));
    }
    let same_ck = artifacts[0].0 == artifacts[1].0;
    let same_report = artifacts[0].1 == artifacts[1].1;
    outcome(
        same_ck && same_report,
        format!("checkpoint bytes identical {same_ck}, report bytes identical {same_report}"),
    )
}

fn ablation(world: &ShapeWorld) -> Outcome {
    let (cfg, eval) = small_config(5);
    let rows = ablation_run(&cfg, &eval, world, true).expect("ablation");
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    let expected = [
        "taft",
        "taft+attn",
        "taft+attn+aux",
        "taft+attn+aux+ms",
        "taft+low_level",
    ];
    let layout = names == expected;
    let dir = tempfile::tempdir().expect("tempdir");
    let csv_path = dir.path().join("ablation.csv");
    write_ablation_csv(&rows, &csv_path).expect("csv");
    let csv_lines = std::fs::read_to_string(&csv_path).expect("read").lines().count();
    let mut reproduced = 0;
    for (row, spec) in rows.iter().zip(ablation_rows(true)) {
        let mut base = cfg.clone();
        base.train.seed = row.seed;
        let again = run_ablation_row(&base, &eval, world, &spec, &mut BTreeMap::new()).expect("row");
        reproduced += usize::from(&again == row);
    }
    outcome(
        layout && csv_lines == 6 && reproduced == rows.len(),
        format!(
            "rows {names:?}, csv lines {csv_lines}, {reproduced}/{} cells reproduced",
            rows.len()
        ),
    )
}

fn main() {
    let world = ShapeWorld::new(Default::default()).expect("world");
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient suite", gradients()),
        ("2 exact-fit suite", exact_fit()),
        ("3 update routing", routing(&world)),
        ("4 metric oracle", metrics()),
    ];
    for (name, o) in &results {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let runs: Vec<DeskSeed> = (0..3).map(|seed| desk_seed(&world, seed)).collect();
    let later: Vec<(&str, Outcome)> = vec![
        ("5 desk-scale learning", learning(&runs)),
        ("6 shot scaling", shot_scaling(&runs)),
        ("7 stability", stability(&runs)),
        ("8 determinism", determinism(&world)),
        ("9 ablation harness", ablation(&world)),
    ];
    for (name, o) in &later {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    results.extend(later);
    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
