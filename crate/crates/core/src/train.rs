//! Episodic meta-training: per-episode losses, routed gradients, SGD with
//! momentum and a one-step learning-rate decay.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TrainConfig, TransformMode};
use crate::episodes::{episode_seed, sample_episode, ClassCatalog, Episode, LabelMap, Phase, SceneSource};
use crate::error::{Error, Result};
use crate::eval::StabilityTrace;
use crate::nets::{Bound, Model, ParamGroup, HIGH_STRIDE, LOW_STRIDE, REF_BG, REF_FG, REF_LOW_BG, REF_LOW_FG};
use crate::taft::{
    apply_transform, build_transform, compute_prototypes, downsize_label, regression_loss, DownsizedLabel,
    PrototypeSet, ReferenceBank, TransformMatrix,
};
use crate::tensor::{Gradients, Tensor, Var};

/// Task conditioning derived from a support set.
pub struct Conditioning<'g> {
    pub prototypes: PrototypeSet<'g>,
    pub transform: TransformMatrix<'g>,
    /// Present only when the low-level feature is transformed too.
    pub low_transform: Option<TransformMatrix<'g>>,
}

/// Query-side activations.
pub struct QueryPass<'g> {
    pub low: Var<'g>,
    /// Attended (or raw, if attention is off) high-level feature.
    pub attended: Var<'g>,
    pub task_agnostic: Var<'g>,
    /// Low-level feature as fed to the decoder.
    pub low_for_decoder: Var<'g>,
    pub logits: Var<'g>,
}

fn labels(masks: &[&LabelMap], factor: usize) -> Result<Vec<DownsizedLabel>> {
    masks.iter().map(|m| downsize_label(m, factor)).collect()
}

fn references<'g>(bound: &Bound<'g>, low: bool) -> ReferenceBank<'g> {
    if low {
        ReferenceBank {
            fg: bound.var(REF_LOW_FG),
            bg: bound.var(REF_LOW_BG),
        }
    } else {
        ReferenceBank {
            fg: bound.var(REF_FG),
            bg: bound.var(REF_BG),
        }
    }
}

fn transform_for<'g>(
    bound: &Bound<'g>,
    feats: Var<'g>,
    labels: &[DownsizedLabel],
    refs: &ReferenceBank<'g>,
) -> Result<(PrototypeSet<'g>, TransformMatrix<'g>)> {
    let cfg = bound.model().config();
    let per_shot = (0..labels.len())
        .map(|n| {
            let s = feats.shape();
            Ok(feats.narrow(0, n, 1)?.reshape(&s[1..])?)
        })
        .collect::<Result<Vec<_>>>()?;
    let protos = compute_prototypes(&per_shot, labels)?;
    let transform = match cfg.transform {
        TransformMode::Taft => build_transform(&protos, refs, cfg.ridge)?,
        TransformMode::Identity => TransformMatrix::identity(bound.graph(), feats.shape()[1]),
    };
    Ok((protos, transform))
}

/// Encodes the supports and builds the episode's transform(s).
pub fn condition<'g>(
    bound: &Bound<'g>,
    support_images: &Tensor,
    support_masks: &[&LabelMap],
) -> Result<Conditioning<'g>> {
    let cfg = bound.model().config();
    let g = bound.graph();
    let (low, high) = bound.encode(g.constant(support_images.clone()))?;
    let high = if cfg.attention { bound.attend(high)? } else { high };
    let (prototypes, transform) = transform_for(
        bound,
        high,
        &labels(support_masks, HIGH_STRIDE)?,
        &references(bound, false),
    )?;
    let low_transform = if cfg.low_level_transform {
        let (_, t) = transform_for(
            bound,
            low,
            &labels(support_masks, LOW_STRIDE)?,
            &references(bound, true),
        )?;
        Some(t)
    } else {
        None
    };
    Ok(Conditioning {
        prototypes,
        transform,
        low_transform,
    })
}

/// Runs the queries through the conditioned network.
pub fn query_forward<'g>(bound: &Bound<'g>, cond: &Conditioning<'g>, query_images: &Tensor) -> Result<QueryPass<'g>> {
    let cfg = bound.model().config();
    let g = bound.graph();
    let (low, high) = bound.encode(g.constant(query_images.clone()))?;
    let attended = if cfg.attention { bound.attend(high)? } else { high };
    let task_agnostic = apply_transform(&cond.transform, attended)?;
    let low_for_decoder = match &cond.low_transform {
        Some(t) => apply_transform(t, low)?,
        None => low,
    };
    let logits = bound.decode(task_agnostic, low_for_decoder)?;
    Ok(QueryPass {
        low,
        attended,
        task_agnostic,
        low_for_decoder,
        logits,
    })
}

/// Loss values of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_r: f64,
    pub l_s: f64,
    pub l_aux: f64,
}

impl LossBundle {
    pub fn total(&self) -> f64 {
        self.l_r + self.l_s + self.l_aux
    }

    pub fn is_finite(&self) -> bool {
        self.l_r.is_finite() && self.l_s.is_finite() && self.l_aux.is_finite()
    }
}

/// The loss graph of one training episode.
pub struct EpisodeLosses<'g> {
    pub l_r: Var<'g>,
    pub l_s: Var<'g>,
    pub l_aux: Option<Var<'g>>,
    pub total: Var<'g>,
    pub conditioning: Conditioning<'g>,
}

impl EpisodeLosses<'_> {
    pub fn values(&self) -> LossBundle {
        LossBundle {
            l_r: self.l_r.item(),
            l_s: self.l_s.item(),
            l_aux: self.l_aux.map_or(0.0, |v| v.item()),
        }
    }
}

/// Builds every loss of a training episode on `bound`'s graph.
pub fn episode_losses<'g>(bound: &Bound<'g>, episode: &Episode, catalog: &ClassCatalog) -> Result<EpisodeLosses<'g>> {
    if episode.phase != Phase::Train {
        return Err(Error::Config("training needs a train-phase episode".into()));
    }
    let cfg = bound.model().config();
    let support_masks: Vec<&LabelMap> = episode.supports.iter().map(|s| &s.mask).collect();
    let conditioning = condition(bound, &episode.support_images()?, &support_masks)?;
    let pass = query_forward(bound, &conditioning, &episode.query_images()?)?;

    let query_masks: Vec<&LabelMap> = episode.queries.iter().map(|q| &q.mask).collect();
    let mut l_r = regression_loss(
        pass.task_agnostic,
        &references(bound, false),
        &labels(&query_masks, HIGH_STRIDE)?,
    )?;
    if conditioning.low_transform.is_some() {
        let low_loss = regression_loss(
            pass.low_for_decoder,
            &references(bound, true),
            &labels(&query_masks, LOW_STRIDE)?,
        )?;
        l_r = l_r.add(low_loss)?;
    }

    let seg_targets: Vec<usize> = query_masks
        .iter()
        .flat_map(|m| m.data.iter().map(|&v| usize::from(v)))
        .collect();
    let l_s = pass.logits.softmax_cross_entropy(&seg_targets)?;

    let l_aux = if cfg.aux {
        let aux_logits = bound.decode_aux(pass.attended, pass.low)?;
        let targets: Vec<usize> = episode
            .queries
            .iter()
            .flat_map(|q| catalog.aux_targets(&q.aux, episode.split))
            .collect();
        Some(aux_logits.softmax_cross_entropy(&targets)?)
    } else {
        None
    };
    let mut total = l_r.add(l_s)?;
    if let Some(aux) = l_aux {
        total = total.add(aux)?;
    }
    Ok(EpisodeLosses {
        l_r,
        l_s,
        l_aux,
        total,
        conditioning,
    })
}

/// Result of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub losses: LossBundle,
    /// One gradient per model parameter, in parameter order.
    pub grads: Vec<Tensor>,
    /// Episode prototypes (foreground, background).
    pub prototypes: (Tensor, Tensor),
}

fn collect(grads: &Gradients, vars: &[Var<'_>]) -> Vec<Tensor> {
    vars.iter().map(|&v| grads.tensor(v)).collect()
}

/// One episode of meta-training: losses and a single backward of their sum.
pub fn episode_step(model: &Model, episode: &Episode, catalog: &ClassCatalog) -> Result<StepOutput> {
    let graph = crate::tensor::Graph::new();
    let bound = model.bind(&graph);
    let losses = episode_losses(&bound, episode, catalog)?;
    let grads = graph.backward(losses.total)?;
    Ok(StepOutput {
        losses: losses.values(),
        grads: collect(&grads, bound.vars()),
        prototypes: (
            (*losses.conditioning.prototypes.fg.value()).clone(),
            (*losses.conditioning.prototypes.bg.value()).clone(),
        ),
    })
}

/// Largest deviation, per group, between the combined gradient and the
/// gradient of the group's designated losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub encoder_attention: f64,
    pub decoder: f64,
    pub references: f64,
    pub aux_decoder: f64,
}

impl RoutingReport {
    pub fn max(&self) -> f64 {
        self.encoder_attention
            .max(self.decoder)
            .max(self.references)
            .max(self.aux_decoder)
    }
}

/// Compares the combined backward with separate per-loss backwards on the
/// same graph.
pub fn routing_check(model: &Model, episode: &Episode, catalog: &ClassCatalog) -> Result<RoutingReport> {
    let graph = crate::tensor::Graph::new();
    let bound = model.bind(&graph);
    let losses = episode_losses(&bound, episode, catalog)?;
    let total = collect(&graph.backward(losses.total)?, bound.vars());
    let by_r = collect(&graph.backward(losses.l_r)?, bound.vars());
    let by_s = collect(&graph.backward(losses.l_s)?, bound.vars());
    let by_aux = match losses.l_aux {
        Some(aux) => collect(&graph.backward(aux)?, bound.vars()),
        None => total.iter().map(|t| Tensor::zeros(t.shape())).collect(),
    };
    let mut report = RoutingReport {
        encoder_attention: 0.0,
        decoder: 0.0,
        references: 0.0,
        aux_decoder: 0.0,
    };
    for (i, p) in model.params().iter().enumerate() {
        let (slot, expected): (&mut f64, Vec<f64>) = match p.group {
            ParamGroup::EncoderAttention => (
                &mut report.encoder_attention,
                (0..total[i].numel())
                    .map(|j| by_r[i].data()[j] + by_s[i].data()[j] + by_aux[i].data()[j])
                    .collect(),
            ),
            ParamGroup::Decoder => (&mut report.decoder, by_s[i].data().to_vec()),
            ParamGroup::References => (&mut report.references, by_r[i].data().to_vec()),
            ParamGroup::AuxDecoder => (&mut report.aux_decoder, by_aux[i].data().to_vec()),
        };
        for (a, b) in total[i].data().iter().zip(&expected) {
            *slot = slot.max((a - b).abs());
        }
    }
    Ok(report)
}

fn group_multiplier(group: ParamGroup, encoder: f64) -> f64 {
    match group {
        ParamGroup::EncoderAttention => encoder,
        _ => 1.0,
    }
}

/// SGD with momentum and coupled weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    encoder_multiplier: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        Self {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            encoder_multiplier: config.encoder_lr_multiplier,
            velocity: model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn group_multiplier(&self, group: ParamGroup) -> f64 {
        group_multiplier(group, self.encoder_multiplier)
    }

    /// Applies `grads` (consumed) at base learning rate `lr`. Nothing is
    /// updated if any gradient is non-finite.
    pub fn step(&mut self, model: &mut Model, grads: Vec<Tensor>, lr: f64) -> Result<()> {
        assert_eq!(grads.len(), model.params().len(), "one gradient per parameter");
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                tensor: model.params()[i].name.clone(),
            });
        }
        let (momentum, wd) = (self.momentum, self.weight_decay);
        for ((param, grad), vel) in model.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let lr_group = lr * group_multiplier(param.group, self.encoder_multiplier);
            for ((w, g), v) in param.value.data_mut().iter_mut().zip(grad.data()).zip(vel.iter_mut()) {
                *v = momentum * *v + g + wd * *w;
                *w -= lr_group * *v;
            }
        }
        Ok(())
    }
}

/// One row of the loss log: means over the logging window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: usize,
    pub l_r: f64,
    pub l_s: f64,
    pub l_aux: f64,
    pub lr: f64,
}

pub fn write_loss_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Record prototype and reference drift every episode.
    pub record_trace: bool,
    /// Called after every log row.
    pub progress: Option<&'a mut dyn FnMut(&LogRow)>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    /// Per-episode losses.
    pub losses: Vec<LossBundle>,
    pub trace: Option<StabilityTrace>,
}

/// Seed used to initialize the model of a run.
pub fn init_seed(train_seed: u64) -> u64 {
    episode_seed(train_seed, u64::MAX)
}

/// Full meta-training run.
pub fn train_run(
    config: &ExperimentConfig,
    source: &dyn SceneSource,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let tc = &config.train;
    let catalog = source.catalog();
    let mut model = Model::new(&config.model, catalog.aux_channels(tc.split), init_seed(tc.seed))?;
    model.check_partition()?;
    let mut sgd = Sgd::new(&model, tc);
    let mut trace = options.record_trace.then(StabilityTrace::default);
    let mut losses = Vec::with_capacity(tc.episodes);
    let mut log = Vec::with_capacity(tc.episodes / tc.log_interval);
    for t in 0..tc.episodes {
        let seed = episode_seed(tc.seed, t as u64);
        let wrap = |e: Error| Error::Episode {
            episode: t,
            seed,
            source: Box::new(e),
        };
        let episode = sample_episode(source, Phase::Train, tc.split, tc.shots, tc.queries, seed).map_err(wrap)?;
        let out = episode_step(&model, &episode, catalog).map_err(wrap)?;
        if !out.losses.is_finite() {
            return Err(wrap(Error::NonFinite { tensor: "loss".into() }));
        }
        if let Some(trace) = trace.as_mut() {
            let (r_fg, r_bg) = model.references();
            trace.observe(&out.prototypes.0, &out.prototypes.1, r_fg, r_bg);
        }
        let lr = tc.lr_at(t);
        sgd.step(&mut model, out.grads, lr).map_err(wrap)?;
        losses.push(out.losses);
        if (t + 1) % tc.log_interval == 0 {
            let window = &losses[t + 1 - tc.log_interval..];
            let n = window.len() as f64;
            let row = LogRow {
                episode: t + 1,
                l_r: window.iter().map(|l| l.l_r).sum::<f64>() / n,
                l_s: window.iter().map(|l| l.l_s).sum::<f64>() / n,
                l_aux: window.iter().map(|l| l.l_aux).sum::<f64>() / n,
                lr,
            };
            if let Some(cb) = options.progress.as_mut() {
                cb(&row);
            }
            log.push(row);
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        losses,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, WorldConfig};
    use crate::episodes::ShapeWorld;

    pub(crate) fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            encoder_channels: [4, 6, 8],
            feature_dim: 8,
            aspp_channels: 4,
            low_channels: 3,
            decoder_channels: 4,
            ..Default::default()
        }
    }

    fn world() -> ShapeWorld {
        ShapeWorld::new(WorldConfig {
            image_size: 32,
            ..Default::default()
        })
        .unwrap()
    }

    fn episode(w: &ShapeWorld, seed: u64) -> Episode {
        sample_episode(w, Phase::Train, 0, 2, 2, seed).unwrap()
    }

    #[test]
    fn routing_matches_designated_losses() {
        let w = world();
        for (seed, low) in [(1, false), (2, true)] {
            let cfg = ModelConfig {
                low_level_transform: low,
                ..tiny_model_config()
            };
            let model = Model::new(&cfg, w.catalog().aux_channels(0), seed).unwrap();
            let report = routing_check(&model, &episode(&w, seed), w.catalog()).unwrap();
            assert!(report.max() < 1e-10, "{report:?}");
        }
    }

    #[test]
    fn aux_off_gives_zero_aux_grads() {
        let w = world();
        let cfg = ModelConfig {
            aux: false,
            attention: false,
            ..tiny_model_config()
        };
        let model = Model::new(&cfg, w.catalog().aux_channels(0), 3).unwrap();
        let out = episode_step(&model, &episode(&w, 3), w.catalog()).unwrap();
        assert_eq!(out.losses.l_aux, 0.0);
        for (p, g) in model.params().iter().zip(&out.grads) {
            if p.group == ParamGroup::AuxDecoder || p.name.starts_with("attn.") {
                assert!(g.data().iter().all(|v| *v == 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn references_only_get_regression_gradient() {
        let w = world();
        let model = Model::new(&tiny_model_config(), w.catalog().aux_channels(0), 4).unwrap();
        let out = episode_step(&model, &episode(&w, 4), w.catalog()).unwrap();
        let i = model.param_index(REF_FG).unwrap();
        assert!(out.grads[i].data().iter().any(|v| *v != 0.0));
        assert!(out.losses.l_r >= 0.0 && out.losses.l_r <= 1.0);
    }

    #[test]
    fn sgd_examples() {
        let w = world();
        let mut model = Model::new(&tiny_model_config(), w.catalog().aux_channels(0), 4).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            momentum: 0.0,
            ..Default::default()
        };
        let mut sgd = Sgd::new(&model, &cfg);
        let zeros: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        sgd.step(&mut model, zeros, 0.1).unwrap();
        assert_eq!(model, before);

        let ones: Vec<Tensor> = model
            .params()
            .iter()
            .map(|p| Tensor::full(p.value.shape(), 1.0))
            .collect();
        sgd.step(&mut model, ones, 0.1).unwrap();
        let i = model.param_index(REF_FG).unwrap();
        let delta = before.params()[i].value.data()[0] - model.params()[i].value.data()[0];
        assert!((delta - 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let w = world();
        let mut model = Model::new(&tiny_model_config(), w.catalog().aux_channels(0), 4).unwrap();
        let cfg = TrainConfig {
            weight_decay: 0.01,
            momentum: 0.9,
            ..Default::default()
        };
        let i = model.param_index(REF_BG).unwrap();
        let mut p = model.params()[i].value.data()[0];
        let mut v = 0.0;
        let mut sgd = Sgd::new(&model, &cfg);
        for (g, lr) in [(0.5, 0.1), (-0.25, 0.05)] {
            let grads: Vec<Tensor> = model
                .params()
                .iter()
                .map(|q| Tensor::full(q.value.shape(), g))
                .collect();
            sgd.step(&mut model, grads, lr).unwrap();
            v = 0.9 * v + g + 0.01 * p;
            p -= lr * v;
            assert!((model.params()[i].value.data()[0] - p).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_names_tensor() {
        let w = world();
        let mut model = Model::new(&tiny_model_config(), w.catalog().aux_channels(0), 4).unwrap();
        let before = model.clone();
        let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let i = model.param_index("dec.mix.weight").unwrap();
        grads[i].data_mut()[0] = f64::NAN;
        let mut sgd = Sgd::new(&model, &TrainConfig::default());
        let err = sgd.step(&mut model, grads, 0.1).unwrap_err().to_string();
        assert!(err.contains("dec.mix.weight"), "{err}");
        assert_eq!(model, before);
    }

    #[test]
    fn short_run_is_deterministic_and_logs() {
        let w = world();
        let config = ExperimentConfig {
            world: w.config().clone(),
            model: tiny_model_config(),
            train: TrainConfig {
                episodes: 6,
                decay_point: 4,
                queries: 2,
                log_interval: 2,
                ..Default::default()
            },
        };
        let a = train_run(&config, &w, TrainOptions::default()).unwrap();
        let b = train_run(&config, &w, TrainOptions::default()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log.len(), 3);
        assert_eq!(a.log[2].lr, 0.001);
    }

    #[test]
    fn test_phase_is_rejected() {
        let w = world();
        let model = Model::new(&tiny_model_config(), w.catalog().aux_channels(0), 4).unwrap();
        let ep = sample_episode(&w, Phase::Test, 0, 1, 1, 0).unwrap();
        assert!(matches!(episode_step(&model, &ep, w.catalog()), Err(Error::Config(_))));
    }
}
