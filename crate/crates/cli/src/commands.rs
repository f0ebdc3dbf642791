use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use taftseg::episodes::{export_scenes, load_folder_dataset};
use taftseg::eval::{
    ablation_run, check_checkpoint, evaluate, shot_sweep, stability_run, write_ablation_csv, write_reports_csv,
    EvalPlan, ModelPredictor,
};
use taftseg::plot::{line_chart, Series};
use taftseg::selfcheck::{exact_fit_suite, gradient_suite, metric_suite};
use taftseg::train::{write_loss_log, LogRow};
use taftseg::{train_run, Checkpoint, SceneSource, ShapeWorld, TrainOptions};

use crate::config::RunConfig;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn scene_source(cfg: &RunConfig) -> Result<Box<dyn SceneSource>, CliError> {
    Ok(match &cfg.world.dataset {
        Some(ds) => Box::new(load_folder_dataset(
            &ds.images_dir,
            &ds.masks_dir,
            &ds.class_index,
            cfg.world.image_size,
        )?),
        None => Box::new(ShapeWorld::new(cfg.world.clone())?),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(taftseg::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(taftseg::Error::from)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(taftseg::Error::from)?;
    Ok(())
}

/// Creates the run directory and writes the command's manifest.
fn prepare(cfg: &RunConfig, command: &str, source: &str, artifacts: &[&str]) -> Result<PathBuf, CliError> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(taftseg::Error::from)?;
    let manifest = json!({
        "run_id": cfg.run_id(),
        "command": command,
        "code_version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.experiment().hash(),
        "seed": cfg.train.seed,
        "source": source,
        "artifacts": artifacts,
        "config": cfg,
    });
    write_json(&dir.join(format!("manifest-{command}.json")), &manifest)?;
    Ok(dir)
}

fn load_checkpoint(cfg: &RunConfig, explicit: Option<&Path>) -> Result<Checkpoint, CliError> {
    let path = explicit.map_or_else(|| cfg.run_dir().join(CHECKPOINT_FILE), Path::to_path_buf);
    if !path.exists() {
        return Err(CliError::Runtime {
            seed: None,
            message: format!(
                "no checkpoint at {}; run `train` with the same config first",
                path.display()
            ),
        });
    }
    Ok(Checkpoint::load(&path)?)
}

fn loss_chart(log: &[LogRow]) -> String {
    let pick = |f: fn(&LogRow) -> f64| log.iter().map(|r| (r.episode as f64, f(r))).collect();
    line_chart(
        "Training losses",
        "episode",
        "loss",
        &[
            Series::new("L_R", pick(|r| r.l_r)),
            Series::new("L_S", pick(|r| r.l_s)),
            Series::new("L_aux", pick(|r| r.l_aux)),
        ],
    )
}

pub fn generate_data(cfg: &RunConfig) -> Result<(), CliError> {
    let source = scene_source(cfg)?;
    let dir = prepare(cfg, "generate-data", &source.fingerprint(), &["data/"])?;
    let files = export_scenes(
        source.as_ref(),
        cfg.generate.count,
        cfg.generate.seed,
        &dir.join("data"),
    )?;
    println!(
        "run_id={} scenes={} dir={}",
        cfg.run_id(),
        files.len() / 2,
        dir.join("data").display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    let source = scene_source(cfg)?;
    let fingerprint = source.fingerprint();
    let dir = prepare(
        cfg,
        "train",
        &fingerprint,
        &[CHECKPOINT_FILE, "loss_log.csv", "loss_curve.svg"],
    )?;
    let total = cfg.train.episodes;
    let mut progress = |row: &LogRow| {
        if !quiet {
            eprintln!(
                "episode {}/{total} l_r={:.4} l_s={:.4} l_aux={:.4} lr={}",
                row.episode, row.l_r, row.l_s, row.l_aux, row.lr
            );
        }
    };
    let outcome = train_run(
        &cfg.experiment(),
        source.as_ref(),
        TrainOptions {
            record_trace: false,
            progress: Some(&mut progress),
        },
    )?;
    let ck = Checkpoint::from_model(&outcome.model, &cfg.experiment().hash(), &fingerprint, cfg.train.split);
    ck.save(&dir.join(CHECKPOINT_FILE))?;
    write_loss_log(&outcome.log, &dir.join("loss_log.csv"))?;
    write_text(&dir.join("loss_curve.svg"), &loss_chart(&outcome.log))?;
    println!(
        "run_id={} checkpoint={}",
        cfg.run_id(),
        dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let source = scene_source(cfg)?;
    let ck = load_checkpoint(cfg, checkpoint)?;
    check_checkpoint(&ck, source.as_ref(), cfg.train.split)?;
    let model = ck.to_model()?;
    let dir = prepare(
        cfg,
        "eval",
        &source.fingerprint(),
        &["eval_report.json", "eval_report.csv"],
    )?;
    let plan = EvalPlan::from_config(&cfg.eval, cfg.train.split);
    let predictor = ModelPredictor {
        model: &model,
        scales: plan.scales.clone(),
    };
    let report = evaluate(&predictor, source.as_ref(), &plan, &ck.config_hash)?;
    write_json(&dir.join("eval_report.json"), &report)?;
    write_reports_csv(std::slice::from_ref(&report), &dir.join("eval_report.csv"))?;
    println!(
        "run_id={} shots={} miou={:.4} fbiou={:.4}",
        cfg.run_id(),
        report.shots,
        report.miou,
        report.fbiou
    );
    Ok(())
}

pub fn sweep_shots(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let source = scene_source(cfg)?;
    let ck = load_checkpoint(cfg, checkpoint)?;
    check_checkpoint(&ck, source.as_ref(), cfg.train.split)?;
    let model = ck.to_model()?;
    let dir = prepare(
        cfg,
        "sweep-shots",
        &source.fingerprint(),
        &["shot_sweep.json", "shot_sweep.csv", "shot_sweep.svg"],
    )?;
    let plan = EvalPlan::from_config(&cfg.eval, cfg.train.split);
    let predictor = ModelPredictor {
        model: &model,
        scales: plan.scales.clone(),
    };
    let reports = shot_sweep(&predictor, source.as_ref(), &plan, &cfg.eval.shot_list, &ck.config_hash)?;
    write_json(&dir.join("shot_sweep.json"), &reports)?;
    write_reports_csv(&reports, &dir.join("shot_sweep.csv"))?;
    let chart = line_chart(
        "Shot sweep",
        "shots",
        "mIoU",
        &[Series::new(
            "mIoU",
            reports.iter().map(|r| (r.shots as f64, r.miou)).collect(),
        )],
    );
    write_text(&dir.join("shot_sweep.svg"), &chart)?;
    for r in &reports {
        let delta = r.delta.map_or("-".to_string(), |d| format!("{d:+.4}"));
        println!(
            "shots={} miou={:.4} fbiou={:.4} delta={delta}",
            r.shots, r.miou, r.fbiou
        );
    }
    Ok(())
}

pub fn stability(cfg: &RunConfig) -> Result<(), CliError> {
    let source = scene_source(cfg)?;
    let dir = prepare(
        cfg,
        "stability",
        &source.fingerprint(),
        &["stability.csv", "stability.json", "stability.svg"],
    )?;
    let trace = stability_run(&cfg.experiment(), source.as_ref())?;
    let summary = trace.summary();
    trace.write_csv(&dir.join("stability.csv"))?;
    write_json(
        &dir.join("stability.json"),
        &json!({ "config_hash": cfg.experiment().hash(), "episodes": cfg.train.episodes, "summary": summary }),
    )?;
    let series = |name: &str, d: &taftseg::eval::StabilityTrace, f: fn(&taftseg::eval::StabilityTrace) -> &Vec<f64>| {
        Series::new(
            name,
            f(d).iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect(),
        )
    };
    let chart = line_chart(
        "Percentage change per episode",
        "episode",
        "% change",
        &[
            series("prototype fg", &trace, |t| &t.prototype_fg.percent),
            series("prototype bg", &trace, |t| &t.prototype_bg.percent),
            series("reference fg", &trace, |t| &t.reference_fg.percent),
            series("reference bg", &trace, |t| &t.reference_bg.percent),
        ],
    );
    write_text(&dir.join("stability.svg"), &chart)?;
    let ratio = |r: Option<f64>| r.map_or("inf".to_string(), |v| format!("{v:.3}"));
    println!(
        "prototype_fg={:.4} prototype_bg={:.4} reference_fg={:.4} reference_bg={:.4} ratio_fg={} ratio_bg={}",
        summary.prototype_fg,
        summary.prototype_bg,
        summary.reference_fg,
        summary.reference_bg,
        ratio(summary.ratio_fg),
        ratio(summary.ratio_bg)
    );
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let source = scene_source(cfg)?;
    let dir = prepare(cfg, "ablate", &source.fingerprint(), &["ablation.csv", "ablation.json"])?;
    let rows = ablation_run(&cfg.experiment(), &cfg.eval, source.as_ref(), cfg.ablation.low_level)?;
    write_ablation_csv(&rows, &dir.join("ablation.csv"))?;
    write_json(&dir.join("ablation.json"), &rows)?;
    for r in &rows {
        println!(
            "{} miou_1shot={:.4} miou_5shot={:.4} seed={}",
            r.name, r.miou_1shot, r.miou_5shot, r.seed
        );
    }
    Ok(())
}

pub fn check(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = prepare(cfg, "check", "none", &["check.json"])?;
    let suites = vec![gradient_suite(20, 1)?, exact_fit_suite(200, 2)?, metric_suite(100, 3)?];
    for s in &suites {
        println!("{}: {}/{} passed (worst {:.3e})", s.suite, s.passed, s.total, s.worst);
    }
    write_json(&dir.join("check.json"), &suites)?;
    if suites.iter().all(|s| s.ok()) {
        Ok(())
    } else {
        Err(CliError::Runtime {
            seed: None,
            message: "self-check failed".into(),
        })
    }
}
