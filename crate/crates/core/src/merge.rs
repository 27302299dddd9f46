//! Merge rules.
//!
//! Every rule works on one layer at a time. At the checkpoint level, 2D
//! weight matrices selected by the [`MatrixSelector`] go through the chosen
//! rule and every other tensor (biases, norms, embeddings) is averaged.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use regex::Regex;

use crate::cov::{gram, CovarianceBundle};
use crate::error::{Error, Result};
use crate::linalg::{check_symmetric_psd, default_pinv_rtol, pinv, polar_factor, svd, Matrix};
use crate::tensor_store::{check_compatible, Checkpoint, Tensor};

pub const DEFAULT_TASK_ARITHMETIC_ALPHA: f64 = 0.4;
pub const DEFAULT_SPECTRAL_ALPHA: f64 = 1.0;

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    RegMean,
    ActMat,
    IsoC,
    Tsv,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 6] = [
        MergeMethod::Average,
        MergeMethod::TaskArithmetic,
        MergeMethod::RegMean,
        MergeMethod::ActMat,
        MergeMethod::IsoC,
        MergeMethod::Tsv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Average => "average",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::RegMean => "regmean",
            MergeMethod::ActMat => "actmat",
            MergeMethod::IsoC => "iso_c",
            MergeMethod::Tsv => "tsv",
        }
    }

    /// α used when none is configured; ignored by average, regmean and actmat.
    pub fn default_alpha(self) -> f64 {
        match self {
            MergeMethod::TaskArithmetic => DEFAULT_TASK_ARITHMETIC_ALPHA,
            MergeMethod::IsoC | MergeMethod::Tsv => DEFAULT_SPECTRAL_ALPHA,
            _ => 1.0,
        }
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == norm || (norm == "ta" && *m == MergeMethod::TaskArithmetic))
            .ok_or_else(|| Error::InvalidInput(format!("unknown merge method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerClass {
    Merge2d,
    Average,
}

/// Name-pattern rules deciding which tensors the merge rule touches.
///
/// Tensors that are not 2D are always averaged. A 2D tensor takes the class
/// of the first rule whose pattern matches its name, else `fallback_2d`.
/// With no fallback, an unmatched 2D tensor is a configuration error.
#[derive(Debug, Clone)]
pub struct MatrixSelector {
    pub rules: Vec<(Regex, LayerClass)>,
    pub fallback_2d: Option<LayerClass>,
}

impl Default for MatrixSelector {
    fn default() -> Self {
        MatrixSelector {
            rules: vec![(Regex::new("(?i)embed").unwrap(), LayerClass::Average)],
            fallback_2d: Some(LayerClass::Merge2d),
        }
    }
}

impl MatrixSelector {
    pub fn classify(&self, name: &str, tensor: &Tensor) -> Option<LayerClass> {
        if tensor.ndim() != 2 {
            return Some(LayerClass::Average);
        }
        self.rules
            .iter()
            .find(|(re, _)| re.is_match(name))
            .map(|(_, class)| *class)
            .or(self.fallback_2d)
    }
}

#[derive(Debug, Clone)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub alpha: f64,
    /// Relative pseudoinverse cutoff; `None` uses `max(m, n) · ε` per layer.
    pub pinv_rtol: Option<f64>,
    pub selector: MatrixSelector,
    /// Per-task TSV rank is `max(1, ⌊fraction · N / T⌋)`.
    pub tsv_rank_fraction: f64,
}

impl MergeConfig {
    pub fn new(method: MergeMethod) -> Self {
        MergeConfig {
            method,
            alpha: method.default_alpha(),
            pinv_rtol: None,
            selector: MatrixSelector::default(),
            tsv_rank_fraction: 1.0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::InvalidInput(format!("alpha must be finite, got {}", self.alpha)));
        }
        if let Some(r) = self.pinv_rtol {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidInput(format!("pinv_rtol must be positive, got {r}")));
            }
        }
        if !(self.tsv_rank_fraction > 0.0 && self.tsv_rank_fraction <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "tsv_rank_fraction must lie in (0, 1], got {}",
                self.tsv_rank_fraction
            )));
        }
        Ok(())
    }
}

/// A pretrained checkpoint and the experts fine-tuned from it.
#[derive(Debug, Clone)]
pub struct TaskSet {
    pub pretrained: Checkpoint,
    pub experts: Vec<Checkpoint>,
    /// Per-expert covariances, aligned with `experts` (RegMean only).
    pub covariances: Option<Vec<CovarianceBundle>>,
}

impl TaskSet {
    pub fn new(pretrained: Checkpoint, experts: Vec<Checkpoint>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::InvalidInput("a task set needs at least one expert".into()));
        }
        for e in &experts {
            check_compatible(&pretrained, e)?;
        }
        Ok(TaskSet {
            pretrained,
            experts,
            covariances: None,
        })
    }

    pub fn with_covariances(mut self, covs: Vec<CovarianceBundle>) -> Result<Self> {
        if covs.len() != self.experts.len() {
            return Err(Error::InvalidInput(format!(
                "{} covariance bundles for {} experts",
                covs.len(),
                self.experts.len()
            )));
        }
        for b in &covs {
            for (layer, c) in &b.layer_covs {
                let Some(t) = self.pretrained.get(layer) else { continue };
                if t.ndim() == 2 && c.shape() != (t.shape()[1], t.shape()[1]) {
                    return Err(Error::Shape(format!(
                        "covariance for {layer:?} of task {:?} is {:?}, layer input dim is {}",
                        b.task_id,
                        c.shape(),
                        t.shape()[1]
                    )));
                }
            }
        }
        self.covariances = Some(covs);
        Ok(self)
    }

    pub fn num_tasks(&self) -> usize {
        self.experts.len()
    }
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub checkpoint: Checkpoint,
    pub warnings: Vec<String>,
}

fn check_same_shapes(ms: &[Matrix], what: &str) -> Result<(usize, usize)> {
    let first = ms
        .first()
        .ok_or_else(|| Error::InvalidInput(format!("{what}: empty list")))?;
    if let Some((i, m)) = ms.iter().enumerate().find(|(_, m)| m.shape() != first.shape()) {
        return Err(Error::Shape(format!(
            "{what}: entry {i} is {:?}, entry 0 is {:?}",
            m.shape(),
            first.shape()
        )));
    }
    Ok(first.shape())
}

fn sum(ms: &[Matrix]) -> Matrix {
    let mut acc = ms[0].clone();
    for m in &ms[1..] {
        acc += m;
    }
    acc
}

/// `(1/T) Σ W_t`.
pub fn merge_average(ws: &[Matrix]) -> Result<Matrix> {
    check_same_shapes(ws, "average")?;
    Ok(sum(ws) / ws.len() as f64)
}

/// `W_0 + α Σ Δ_t`.
pub fn merge_task_arithmetic(w0: &Matrix, deltas: &[Matrix], alpha: f64) -> Result<Matrix> {
    let shape = check_same_shapes(deltas, "task arithmetic")?;
    if shape != w0.shape() {
        return Err(Error::Shape(format!("deltas are {shape:?}, W0 is {:?}", w0.shape())));
    }
    Ok(w0 + sum(deltas) * alpha)
}

/// Minimum-norm minimizer of `Σ_t E‖W z − W_t z‖²`: `(Σ W_t C_t)(Σ C_t)^†`.
pub fn merge_interference(ws: &[Matrix], cs: &[Matrix], rtol: Option<f64>) -> Result<Matrix> {
    let (_, d_in) = check_same_shapes(ws, "interference weights")?;
    if cs.len() != ws.len() {
        return Err(Error::InvalidInput(format!(
            "{} covariances for {} weight matrices",
            cs.len(),
            ws.len()
        )));
    }
    for (t, c) in cs.iter().enumerate() {
        if c.shape() != (d_in, d_in) {
            return Err(Error::Shape(format!(
                "covariance {t} is {:?}, expected {d_in}x{d_in}",
                c.shape()
            )));
        }
        check_symmetric_psd(c, SYMMETRY_TOL, PSD_TOL)
            .map_err(|why| Error::InvalidInput(format!("covariance of task {t}: {why}")))?;
    }
    interference_solve(ws, cs, rtol)
}

fn interference_solve(ws: &[Matrix], cs: &[Matrix], rtol: Option<f64>) -> Result<Matrix> {
    let d_in = cs[0].nrows();
    let mut b = &ws[0] * &cs[0];
    for (w, c) in ws.iter().zip(cs).skip(1) {
        b += w * c;
    }
    let a = sum(cs);
    let rtol = rtol.unwrap_or_else(|| default_pinv_rtol(d_in, d_in));
    Ok(b * pinv(&a, rtol)?)
}

/// Interference minimizer with the data-free estimates `Ĉ_t = Δ_tᵀΔ_t`.
pub fn merge_actmat(ws: &[Matrix], deltas: &[Matrix], rtol: Option<f64>) -> Result<Matrix> {
    let shape = check_same_shapes(deltas, "actmat deltas")?;
    if ws.first().map(|w| w.shape()) != Some(shape) {
        return Err(Error::Shape("actmat: weights and deltas differ in shape".into()));
    }
    if ws.len() != deltas.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} deltas",
            ws.len(),
            deltas.len()
        )));
    }
    check_same_shapes(ws, "actmat weights")?;
    // Gram matrices are symmetric PSD by construction; skip the eigen check.
    let cs: Vec<Matrix> = deltas.iter().map(gram).collect();
    if let Some(t) = cs.iter().position(|c| c.iter().any(|x| !x.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "covariance of task {t}: non-finite entries"
        )));
    }
    interference_solve(ws, &cs, rtol)
}

/// Iso-C: flatten the spectrum of `Σ Δ_t` to its mean singular value.
pub fn merge_iso_c(w0: &Matrix, deltas: &[Matrix], alpha: f64) -> Result<Matrix> {
    let shape = check_same_shapes(deltas, "iso_c")?;
    if shape != w0.shape() {
        return Err(Error::Shape(format!("deltas are {shape:?}, W0 is {:?}", w0.shape())));
    }
    let f = svd(&sum(deltas))?;
    if f.rank() == 0 {
        return Ok(w0.clone());
    }
    let mean = f.singular_values.iter().sum::<f64>() / f.rank() as f64;
    Ok(w0 + (&f.u * &f.vt) * (alpha * mean))
}

/// Pooled and orthogonalized TSV factors; the merged delta is `U diag(σ) Vᵀ`.
#[derive(Debug, Clone)]
pub struct TsvFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
    pub rank_per_task: usize,
    /// Set when `T · k` exceeds `min(m, n)`, so the pooled factors cannot
    /// all be orthonormal.
    pub over_budget: bool,
}

pub fn tsv_factors(deltas: &[Matrix], rank_fraction: f64) -> Result<TsvFactors> {
    let (m, n) = check_same_shapes(deltas, "tsv")?;
    if !(rank_fraction > 0.0 && rank_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "rank_fraction {rank_fraction} outside (0, 1]"
        )));
    }
    let t = deltas.len();
    let full = m.min(n);
    let k = (((rank_fraction * full as f64) / t as f64).floor() as usize)
        .max(1)
        .min(full);
    let pooled = t * k;

    let mut u_cat = Matrix::zeros(m, pooled);
    let mut v_cat = Matrix::zeros(n, pooled);
    let mut sigma = Vec::with_capacity(pooled);
    for (i, d) in deltas.iter().enumerate() {
        let f = svd(d)?;
        for j in 0..k {
            u_cat.set_column(i * k + j, &f.u.column(j));
            v_cat.set_column(i * k + j, &f.vt.row(j).transpose());
            sigma.push(f.singular_values[j]);
        }
    }
    Ok(TsvFactors {
        u: polar_factor(&u_cat)?,
        sigma,
        v: polar_factor(&v_cat)?,
        rank_per_task: k,
        over_budget: pooled > full,
    })
}

/// TSV: truncate each task's SVD, decorrelate the pooled singular vectors,
/// and add the reconstruction scaled by α.
pub fn merge_tsv(w0: &Matrix, deltas: &[Matrix], alpha: f64, rank_fraction: f64) -> Result<Matrix> {
    Ok(merge_tsv_with_warning(w0, deltas, alpha, rank_fraction)?.0)
}

fn merge_tsv_with_warning(
    w0: &Matrix,
    deltas: &[Matrix],
    alpha: f64,
    rank_fraction: f64,
) -> Result<(Matrix, Option<String>)> {
    let f = tsv_factors(deltas, rank_fraction)?;
    if f.u.nrows() != w0.nrows() || f.v.nrows() != w0.ncols() {
        return Err(Error::Shape(format!("tsv deltas do not match W0 {:?}", w0.shape())));
    }
    let mut us = f.u.clone();
    for (j, s) in f.sigma.iter().enumerate() {
        us.column_mut(j).scale_mut(*s);
    }
    let warning = f.over_budget.then(|| {
        format!(
            "tsv: {} tasks x rank {} exceeds min dimension {}; pooled factors are not orthonormal",
            deltas.len(),
            f.rank_per_task,
            w0.nrows().min(w0.ncols())
        )
    });
    Ok((w0 + us * f.v.transpose() * alpha, warning))
}

fn average_tensors(tensors: &[&Tensor]) -> Result<Tensor> {
    let first = tensors[0];
    let mut acc = first.to_f64();
    for t in &tensors[1..] {
        for (a, v) in acc.iter_mut().zip(t.to_f64()) {
            *a += v;
        }
    }
    let n = tensors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::from_f64(first.shape().to_vec(), acc, first.dtype())
}

/// Merges a task set layer by layer.
pub fn merge(ts: &TaskSet, cfg: &MergeConfig) -> Result<MergeOutcome> {
    cfg.validate()?;
    for e in &ts.experts {
        check_compatible(&ts.pretrained, e)?;
    }

    let mut classes = BTreeMap::new();
    let mut unhandled = Vec::new();
    for (name, t) in &ts.pretrained.tensors {
        match cfg.selector.classify(name, t) {
            Some(c) => {
                classes.insert(name.clone(), c);
            }
            None => unhandled.push(name.clone()),
        }
    }
    if !unhandled.is_empty() {
        return Err(Error::Config(format!(
            "no classification rule covers 2D tensors: {}",
            unhandled.join(", ")
        )));
    }
    if cfg.method == MergeMethod::RegMean {
        let covs = ts
            .covariances
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("regmean requires covariances".into()))?;
        let missing: Vec<String> = classes
            .iter()
            .filter(|(_, c)| **c == LayerClass::Merge2d)
            .flat_map(|(name, _)| {
                covs.iter()
                    .filter(|b| !b.layer_covs.contains_key(name))
                    .map(move |b| format!("{}:{name}", b.task_id))
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::InvalidInput(format!(
                "regmean requires covariances, missing {}",
                missing.join(", ")
            )));
        }
    }

    let results: Vec<(String, Tensor, Option<String>)> = classes
        .par_iter()
        .map(|(name, class)| {
            let experts: Vec<&Tensor> = ts.experts.iter().map(|e| &e.tensors[name]).collect();
            let (tensor, warning) = match class {
                LayerClass::Average => (average_tensors(&experts)?, None),
                LayerClass::Merge2d => {
                    let (m, w) =
                        merge_layer(ts, cfg, name).map_err(|e| Error::Numerical(format!("layer {name:?}: {e}")))?;
                    (Tensor::from_matrix(&m, ts.pretrained.tensors[name].dtype()), w)
                }
            };
            Ok((name.clone(), tensor, warning))
        })
        .collect::<Result<_>>()?;

    let mut checkpoint = Checkpoint::new(format!("merged-{}", cfg.method));
    checkpoint
        .metadata
        .insert("merge_method".into(), cfg.method.to_string());
    let mut warnings = Vec::new();
    for (name, tensor, warning) in results {
        if let Some(w) = warning {
            log::warn!("{w}");
            warnings.push(w);
        }
        checkpoint.insert(name, tensor);
    }
    Ok(MergeOutcome { checkpoint, warnings })
}

fn merge_layer(ts: &TaskSet, cfg: &MergeConfig, name: &str) -> Result<(Matrix, Option<String>)> {
    let w0 = ts.pretrained.matrix(name)?;
    let ws = ts.experts.iter().map(|e| e.matrix(name)).collect::<Result<Vec<_>>>()?;
    let deltas: Vec<Matrix> = ws.iter().map(|w| w - &w0).collect();
    let merged = match cfg.method {
        MergeMethod::Average => merge_average(&ws)?,
        MergeMethod::TaskArithmetic => merge_task_arithmetic(&w0, &deltas, cfg.alpha)?,
        MergeMethod::RegMean => {
            let covs = ts.covariances.as_ref().expect("checked by merge");
            let cs: Vec<Matrix> = covs.iter().map(|b| b.layer_covs[name].clone()).collect();
            merge_interference(&ws, &cs, cfg.pinv_rtol)?
        }
        MergeMethod::ActMat => {
            if deltas.iter().all(|d| d.iter().all(|&x| x == 0.0)) {
                let warning = format!("actmat: all task vectors of {name:?} are zero, averaging instead");
                return Ok((merge_average(&ws)?, Some(warning)));
            }
            merge_actmat(&ws, &deltas, cfg.pinv_rtol)?
        }
        MergeMethod::IsoC => merge_iso_c(&w0, &deltas, cfg.alpha)?,
        MergeMethod::Tsv => {
            return merge_tsv_with_warning(&w0, &deltas, cfg.alpha, cfg.tsv_rank_fraction);
        }
    };
    Ok((merged, None))
}
