//! Task-adaptive feature transform.
//!
//! Support prototypes (soft-label weighted feature means) are mapped onto
//! meta-learned reference vectors by the least-squares transform
//! `P = R (C^T C + ridge I)^-1 C^T`, which is then applied to every query
//! pixel. References enter `P` through a stop-gradient, so only the
//! regression loss moves them.

use crate::episodes::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Graph, Tensor, TensorError, Var};

/// Determinant floor of the regularized 2x2 system.
pub const MIN_DETERMINANT: f64 = 1e-12;

/// Average-pooled foreground/background planes of a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsizedLabel {
    /// `[Hs, Ws]`
    pub fg: Tensor,
    pub bg: Tensor,
}

impl DownsizedLabel {
    /// `[2, Hs, Ws]` with the foreground plane first.
    pub fn stacked(&self) -> Tensor {
        Tensor::stack(&[self.fg.clone(), self.bg.clone()]).expect("planes share a shape")
    }
}

pub fn downsize_label(mask: &LabelMap, factor: usize) -> Result<DownsizedLabel> {
    if !mask.is_binary() {
        return Err(TensorError::contract("downsize_label", "mask is not binary").into());
    }
    let fg = Tensor::new(
        vec![1, mask.height, mask.width],
        mask.data.iter().map(|&v| f64::from(v)).collect(),
    )?;
    let bg = Tensor::new(
        vec![1, mask.height, mask.width],
        mask.data.iter().map(|&v| 1.0 - f64::from(v)).collect(),
    )?;
    let (hs, ws) = (mask.height / factor.max(1), mask.width / factor.max(1));
    Ok(DownsizedLabel {
        fg: fg.avg_pool2d(factor)?.reshape(&[hs, ws])?,
        bg: bg.avg_pool2d(factor)?.reshape(&[hs, ws])?,
    })
}

/// Foreground/background prototypes of a support set.
#[derive(Debug, Clone, Copy)]
pub struct PrototypeSet<'g> {
    /// Mean over shots, shape `[d]`.
    pub fg: Var<'g>,
    pub bg: Var<'g>,
    pub shots: usize,
}

fn weighted_mean<'g>(feat: Var<'g>, weights: &Tensor, shot: usize, plane: &'static str) -> Result<Var<'g>> {
    let total: f64 = weights.data().iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateLabel { shot, plane });
    }
    let g = feat.graph();
    let w = g.constant(weights.clone().reshape(&[weights.numel(), 1])?);
    Ok(feat.matmul(w)?.scale(1.0 / total))
}

/// Per-shot prototypes from features `[d, Hs, Ws]` and matching labels,
/// averaged over shots without normalization.
pub fn compute_prototypes<'g>(feats: &[Var<'g>], labels: &[DownsizedLabel]) -> Result<PrototypeSet<'g>> {
    if feats.is_empty() || feats.len() != labels.len() {
        return Err(TensorError::contract(
            "compute_prototypes",
            format!("{} features for {} labels", feats.len(), labels.len()),
        )
        .into());
    }
    let mut fg_sum: Option<Var<'g>> = None;
    let mut bg_sum: Option<Var<'g>> = None;
    for (shot, (feat, label)) in feats.iter().zip(labels).enumerate() {
        let shape = feat.shape();
        if shape.len() != 3 || shape[1..] != *label.fg.shape() {
            return Err(TensorError::shape("compute_prototypes", &shape, label.fg.shape()).into());
        }
        let d = shape[0];
        let flat = feat.reshape(&[d, shape[1] * shape[2]])?;
        let fg = weighted_mean(flat, &label.fg, shot, "foreground")?;
        let bg = weighted_mean(flat, &label.bg, shot, "background")?;
        fg_sum = Some(match fg_sum {
            Some(acc) => acc.add(fg)?,
            None => fg,
        });
        bg_sum = Some(match bg_sum {
            Some(acc) => acc.add(bg)?,
            None => bg,
        });
    }
    let n = feats.len();
    let d = feats[0].shape()[0];
    let inv = 1.0 / n as f64;
    Ok(PrototypeSet {
        fg: fg_sum.unwrap().scale(inv).reshape(&[d])?,
        bg: bg_sum.unwrap().scale(inv).reshape(&[d])?,
        shots: n,
    })
}

/// Foreground and background reference vectors, shape `[d]` each.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceBank<'g> {
    pub fg: Var<'g>,
    pub bg: Var<'g>,
}

/// The per-episode transform and diagnostics of its 2x2 system.
#[derive(Debug, Clone, Copy)]
pub struct TransformMatrix<'g> {
    /// `[d, d]`
    pub p: Var<'g>,
    pub ridge: f64,
    pub determinant: f64,
    /// 2-norm condition number of `C^T C` (before the ridge).
    pub condition: f64,
}

impl<'g> TransformMatrix<'g> {
    pub fn identity(graph: &'g Graph, d: usize) -> Self {
        Self {
            p: graph.constant(Tensor::eye(d)),
            ridge: 0.0,
            determinant: 1.0,
            condition: 1.0,
        }
    }
}

fn normalized<'g>(v: Var<'g>, what: &str) -> Result<Var<'g>> {
    let norm = v.l2_norm();
    if norm.item() == 0.0 || !norm.item().is_finite() {
        return Err(Error::DegenerateInput(format!("{what} has zero norm")));
    }
    Ok(v.div(norm)?)
}

fn column<'g>(v: Var<'g>) -> Result<Var<'g>, TensorError> {
    let d = v.shape()[0];
    v.reshape(&[d, 1])
}

fn symmetric_condition(m: &[f64]) -> f64 {
    let (a, b, d) = (m[0], m[1], m[3]);
    let mean = 0.5 * (a + d);
    let radius = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (hi, lo) = (mean + radius, mean - radius);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Least-squares map from normalized prototypes to normalized references.
pub fn build_transform<'g>(
    protos: &PrototypeSet<'g>,
    refs: &ReferenceBank<'g>,
    ridge: f64,
) -> Result<TransformMatrix<'g>> {
    let d = protos.fg.shape()[0];
    if protos.bg.shape() != [d] || refs.fg.shape() != [d] || refs.bg.shape() != [d] {
        return Err(TensorError::shape("build_transform", &protos.fg.shape(), &refs.fg.shape()).into());
    }
    let g = protos.fg.graph();
    let c = g.concat(
        &[
            column(normalized(protos.fg, "foreground prototype")?)?,
            column(normalized(protos.bg, "background prototype")?)?,
        ],
        1,
    )?;
    let r = g.concat(
        &[
            column(normalized(refs.fg.detach(), "foreground reference")?)?,
            column(normalized(refs.bg.detach(), "background reference")?)?,
        ],
        1,
    )?;
    let ct = c.transpose()?;
    let gram = ct.matmul(c)?;
    let condition = symmetric_condition(gram.value().data());
    let system = gram.add(g.constant(Tensor::new(vec![2, 2], vec![ridge, 0.0, 0.0, ridge])?))?;
    let m = system.value();
    let m = m.data();
    let determinant = m[0] * m[3] - m[1] * m[2];
    if determinant.is_nan() || determinant.abs() < MIN_DETERMINANT {
        return Err(Error::SingularSystem { det: determinant });
    }
    let p = r.matmul(system.inverse_2x2()?)?.matmul(ct)?;
    Ok(TransformMatrix {
        p,
        ridge,
        determinant,
        condition,
    })
}

/// Multiplies every pixel of `[B, d, Hs, Ws]` by `P` (a 1x1 convolution).
pub fn apply_transform<'g>(t: &TransformMatrix<'g>, high: Var<'g>) -> Result<Var<'g>> {
    let d = t.p.shape()[0];
    let shape = high.shape();
    if shape.len() != 4 || shape[1] != d {
        return Err(TensorError::shape("apply_transform", &shape, &[0, d, 0, 0]).into());
    }
    Ok(high.conv2d(t.p.reshape(&[d, d, 1, 1])?, None, ConvSpec::POINTWISE)?)
}

/// Mean squared error between the per-pixel softmax over reference scores
/// and the soft labels, averaged over both classes, pixels and batch.
pub fn regression_loss<'g>(h_a: Var<'g>, refs: &ReferenceBank<'g>, labels: &[DownsizedLabel]) -> Result<Var<'g>> {
    let shape = h_a.shape();
    if shape.len() != 4 || shape[0] != labels.len() {
        return Err(TensorError::shape("regression_loss", &shape, &[labels.len()]).into());
    }
    let (d, hs, ws) = (shape[1], shape[2], shape[3]);
    let g = h_a.graph();
    let kernel = g.concat(&[column(refs.fg)?.transpose()?, column(refs.bg)?.transpose()?], 0)?;
    let scores = h_a.conv2d(kernel.reshape(&[2, d, 1, 1])?, None, ConvSpec::POINTWISE)?;
    let probs = scores.softmax(1)?;
    let mut target = Vec::with_capacity(labels.len() * 2 * hs * ws);
    for label in labels {
        if label.fg.shape() != [hs, ws] {
            return Err(TensorError::shape("regression_loss", label.fg.shape(), &[hs, ws]).into());
        }
        target.extend_from_slice(label.fg.data());
        target.extend_from_slice(label.bg.data());
    }
    let target = g.constant(Tensor::new(vec![labels.len(), 2, hs, ws], target)?);
    Ok(probs.sub(target)?.square().mean())
}
