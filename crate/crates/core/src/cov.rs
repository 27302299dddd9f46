//! Per-layer input second moments, empirical and estimated from task vectors.
//!
//! The empirical route averages `z zᵀ` over captured layer inputs. The
//! data-free route uses `Ĉ = ΔᵀΔ` for the layer's difference matrix `Δ`.
//! When `C = κ Ĉ` with a κ shared by all tasks, the interference-minimizing
//! merge is unchanged, so only the ratios `κ_i / κ_j` matter.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, Matrix};
use crate::stats::Quantiles;
use crate::tensor_store::{Checkpoint, DType, TaskVector, Tensor};

/// Number of samples used for the empirical side of alignment diagnostics.
pub const DEFAULT_EMPIRICAL_SAMPLES: usize = 300;

const PREFIX: &str = "cov/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CovSource {
    Empirical,
    Actmat,
}

impl CovSource {
    pub fn as_str(self) -> &'static str {
        match self {
            CovSource::Empirical => "empirical",
            CovSource::Actmat => "actmat",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "empirical" => Some(CovSource::Empirical),
            "actmat" => Some(CovSource::Actmat),
            _ => None,
        }
    }
}

/// Per-layer `D_i × D_i` second-moment matrices for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBundle {
    pub task_id: String,
    pub layer_covs: BTreeMap<String, Matrix>,
    pub source: CovSource,
    /// Number of input samples averaged (empirical bundles only).
    pub sample_count: Option<usize>,
}

impl CovarianceBundle {
    /// Serializes bundles as `cov/<task_id>/<layer>` tensors in one checkpoint.
    pub fn to_checkpoint(bundles: &[CovarianceBundle], name: &str) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(name);
        for b in bundles {
            if b.task_id.is_empty() || b.task_id.contains('/') {
                return Err(Error::InvalidInput(format!(
                    "task id {:?} must be non-empty and free of '/'",
                    b.task_id
                )));
            }
            ckpt.metadata
                .insert(format!("{PREFIX}{}/source", b.task_id), b.source.as_str().into());
            if let Some(n) = b.sample_count {
                ckpt.metadata
                    .insert(format!("{PREFIX}{}/sample_count", b.task_id), n.to_string());
            }
            for (layer, c) in &b.layer_covs {
                ckpt.insert(
                    format!("{PREFIX}{}/{layer}", b.task_id),
                    Tensor::from_matrix(c, DType::F64),
                );
            }
        }
        Ok(ckpt)
    }

    /// Inverse of [`CovarianceBundle::to_checkpoint`]; bundles come back ordered by task id.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Vec<CovarianceBundle>> {
        let mut bundles: BTreeMap<String, CovarianceBundle> = BTreeMap::new();
        for (key, value) in &ckpt.metadata {
            let Some(rest) = key.strip_prefix(PREFIX) else { continue };
            let Some((task, field)) = rest.split_once('/') else {
                continue;
            };
            let entry = bundles.entry(task.to_string()).or_insert_with(|| CovarianceBundle {
                task_id: task.to_string(),
                layer_covs: BTreeMap::new(),
                source: CovSource::Empirical,
                sample_count: None,
            });
            match field {
                "source" => {
                    entry.source = CovSource::parse(value)
                        .ok_or_else(|| Error::InvalidInput(format!("unknown covariance source {value:?}")))?
                }
                "sample_count" => {
                    entry.sample_count =
                        Some(value.parse().map_err(|_| {
                            Error::InvalidInput(format!("bad sample_count {value:?} for task {task:?}"))
                        })?)
                }
                _ => {}
            }
        }
        for (key, t) in &ckpt.tensors {
            let Some(rest) = key.strip_prefix(PREFIX) else { continue };
            let (task, layer) = rest
                .split_once('/')
                .ok_or_else(|| Error::InvalidInput(format!("bad covariance tensor name {key:?}")))?;
            let bundle = bundles
                .get_mut(task)
                .ok_or_else(|| Error::InvalidInput(format!("covariance {key:?} has no source metadata")))?;
            let m = t.to_matrix()?;
            if !m.is_square() {
                return Err(Error::Shape(format!("covariance {key:?} is not square")));
            }
            bundle.layer_covs.insert(layer.to_string(), m);
        }
        Ok(bundles.into_values().collect())
    }
}

fn outer_sum_upper(samples: &[&[f64]], dim: usize) -> Matrix {
    const LEAF: usize = 8;
    if samples.len() > LEAF {
        let (a, b) = samples.split_at(samples.len() / 2);
        return outer_sum_upper(a, dim) + outer_sum_upper(b, dim);
    }
    let mut acc = Matrix::zeros(dim, dim);
    for z in samples {
        for i in 0..dim {
            for j in i..dim {
                acc[(i, j)] += z[i] * z[j];
            }
        }
    }
    acc
}

/// `(1/L) Σ_ℓ z_ℓ z_ℓᵀ`, the uncentered second moment of the samples.
///
/// Outer products are summed in a fixed pairwise tree over the upper
/// triangle, which is then mirrored, so the result is exactly symmetric.
pub fn empirical_covariance<S: AsRef<[f64]>>(samples: &[S], dim: usize) -> Result<Matrix> {
    if samples.is_empty() {
        return Err(Error::InvalidInput(
            "empirical covariance needs at least one sample".into(),
        ));
    }
    let views: Vec<&[f64]> = samples.iter().map(AsRef::as_ref).collect();
    if let Some((i, z)) = views.iter().enumerate().find(|(_, z)| z.len() != dim) {
        return Err(Error::Shape(format!(
            "sample {i} has length {}, expected {dim}",
            z.len()
        )));
    }
    let mut c = outer_sum_upper(&views, dim) / views.len() as f64;
    for i in 0..dim {
        for j in 0..i {
            c[(i, j)] = c[(j, i)];
        }
    }
    Ok(c)
}

/// `ΔᵀΔ`, symmetrized as `(M + Mᵀ)/2`.
pub fn gram(delta: &Matrix) -> Matrix {
    let m = delta.transpose() * delta;
    (&m + m.transpose()) * 0.5
}

/// Data-free covariance estimate `Ĉ = ΔᵀΔ` for one 2D layer of a task vector.
pub fn actmat_estimate(tv: &TaskVector, layer: &str) -> Result<Matrix> {
    let t = tv
        .deltas
        .get(layer)
        .ok_or_else(|| Error::InvalidInput(format!("task vector {:?} has no layer {layer:?}", tv.task_id)))?;
    if t.ndim() != 2 {
        return Err(Error::Shape(format!(
            "layer {layer:?} has shape {:?}, expected 2D",
            t.shape()
        )));
    }
    Ok(gram(&t.to_matrix()?))
}

pub fn actmat_bundle(tv: &TaskVector, layers: &[String]) -> Result<CovarianceBundle> {
    let layer_covs = layers
        .par_iter()
        .map(|l| Ok((l.clone(), actmat_estimate(tv, l)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(CovarianceBundle {
        task_id: tv.task_id.clone(),
        layer_covs,
        source: CovSource::Actmat,
        sample_count: None,
    })
}

/// `κ = ‖C‖_F / ‖Ĉ‖_F`, the scale that best maps an estimate onto the true covariance.
pub fn kappa(c: &Matrix, c_hat: &Matrix) -> Result<f64> {
    if c.shape() != c_hat.shape() || !c.is_square() {
        return Err(Error::Shape(format!(
            "kappa needs equal square shapes, got {:?} and {:?}",
            c.shape(),
            c_hat.shape()
        )));
    }
    let denom = frobenius_norm(c_hat);
    if denom == 0.0 {
        return Err(Error::InvalidInput("kappa undefined: zero-norm estimate".into()));
    }
    Ok(frobenius_norm(c) / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaRatio {
    pub task_i: String,
    pub task_j: String,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerKappas {
    /// `(task_id, κ)` in task order.
    pub kappas: Vec<(String, f64)>,
    /// `κ_i / κ_j` for every ordered pair with `i ≠ j`.
    pub ratios: Vec<KappaRatio>,
    pub summary: Option<Quantiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaReport {
    pub layers: BTreeMap<String, LayerKappas>,
}

pub fn kappa_ratio_table(bundles_emp: &[CovarianceBundle], bundles_act: &[CovarianceBundle]) -> Result<KappaReport> {
    if bundles_emp.len() != bundles_act.len() {
        return Err(Error::InvalidInput(format!(
            "{} empirical bundles vs {} estimated",
            bundles_emp.len(),
            bundles_act.len()
        )));
    }
    let Some(first) = bundles_emp.first() else {
        return Ok(KappaReport {
            layers: BTreeMap::new(),
        });
    };
    let keys: Vec<&String> = first.layer_covs.keys().collect();
    for (e, a) in bundles_emp.iter().zip(bundles_act) {
        if e.task_id != a.task_id {
            return Err(Error::InvalidInput(format!(
                "task ids do not match: {:?} vs {:?}",
                e.task_id, a.task_id
            )));
        }
        for b in [e, a] {
            if b.layer_covs.keys().collect::<Vec<_>>() != keys {
                return Err(Error::InvalidInput(format!(
                    "layer keys of task {:?} differ from task {:?}",
                    b.task_id, first.task_id
                )));
            }
        }
    }

    let mut layers = BTreeMap::new();
    for key in keys {
        let kappas = bundles_emp
            .iter()
            .zip(bundles_act)
            .map(|(e, a)| Ok((e.task_id.clone(), kappa(&e.layer_covs[key], &a.layer_covs[key])?)))
            .collect::<Result<Vec<_>>>()
            .map_err(|err| Error::InvalidInput(format!("layer {key:?}: {err}")))?;
        let mut ratios = Vec::new();
        for (i, (ti, ki)) in kappas.iter().enumerate() {
            for (j, (tj, kj)) in kappas.iter().enumerate() {
                if i != j {
                    ratios.push(KappaRatio {
                        task_i: ti.clone(),
                        task_j: tj.clone(),
                        ratio: ki / kj,
                    });
                }
            }
        }
        let summary = Quantiles::of(&ratios.iter().map(|r| r.ratio).collect::<Vec<_>>());
        layers.insert(
            key.clone(),
            LayerKappas {
                kappas,
                ratios,
                summary,
            },
        );
    }
    Ok(KappaReport { layers })
}
