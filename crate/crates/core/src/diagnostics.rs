//! Diagnostics for covariance estimation and negative transfer.
//!
//! Expectations are exact means over the finite batch. Reports render as
//! single-line `kind key=value ...` records and as CSV tables.

use std::io::Write;

use serde::Serialize;

use crate::cov::{CovarianceBundle, KappaReport};
use crate::error::{Error, Result};
use crate::linalg::{
    angular_distance, cosine_similarity, default_pinv_rtol, frobenius_norm, pearson, pinv, spectral_norm, Matrix,
};
use crate::merge::{merge_interference, TaskSet};
use crate::stats::Quantiles;
use crate::toy::{layer_name, Activation, TaskData, ToyNetwork, TrainTrace};

/// Slack allowed when comparing a quantity to its bound.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationAccumulators {
    pub layer: String,
    /// `Σ_k E[g zᵀ]`.
    pub g_bar: Matrix,
    /// `Σ_k E[z zᵀ ‖g‖²]`.
    pub s_bar: Matrix,
    /// `Σ_k E[z zᵀ] · E[‖g‖²]`.
    pub s_tilde: Matrix,
    /// `E[z zᵀ]` at the last iteration.
    pub c_final: Matrix,
    pub c_trajectory: Vec<Matrix>,
}

fn symmetrize(m: Matrix) -> Matrix {
    (&m + m.transpose()) * 0.5
}

pub fn accumulate_estimation_terms(trace: &TrainTrace) -> Result<EstimationAccumulators> {
    let first = trace
        .iterations
        .first()
        .ok_or_else(|| Error::InvalidInput(format!("trace for {:?} has no iterations", trace.layer)))?;
    let (d_in, d_out) = (first.z.nrows(), first.g.nrows());
    let mut g_bar = Matrix::zeros(d_out, d_in);
    let mut s_bar = Matrix::zeros(d_in, d_in);
    let mut s_tilde = Matrix::zeros(d_in, d_in);
    let mut c_trajectory = Vec::with_capacity(trace.iterations.len());
    for (k, it) in trace.iterations.iter().enumerate() {
        let l = it.z.ncols();
        if l == 0 || it.g.ncols() != l || it.z.nrows() != d_in || it.g.nrows() != d_out {
            return Err(Error::Shape(format!(
                "iteration {k} of {:?}: z is {:?}, g is {:?}",
                trace.layer,
                it.z.shape(),
                it.g.shape()
            )));
        }
        let inv = 1.0 / l as f64;
        g_bar += &it.g * it.z.transpose() * inv;
        let sq: Vec<f64> = it.g.column_iter().map(|c| c.norm_squared()).collect();
        let mut weighted = it.z.clone();
        for (j, s) in sq.iter().enumerate() {
            weighted.column_mut(j).scale_mut(*s);
        }
        s_bar += symmetrize(&weighted * it.z.transpose() * inv);
        let c = symmetrize(&it.z * it.z.transpose() * inv);
        s_tilde += &c * (sq.iter().sum::<f64>() * inv);
        c_trajectory.push(c);
    }
    Ok(EstimationAccumulators {
        layer: trace.layer.clone(),
        g_bar,
        s_bar,
        s_tilde,
        c_final: c_trajectory.last().unwrap().clone(),
        c_trajectory,
    })
}

/// The three error angles, the angle they bound, and the drift trajectory.
/// An angle involving a zero matrix is `None` and marks the report degenerate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub layer: String,
    pub eps_cross: Option<f64>,
    pub eps_corr: Option<f64>,
    pub eps_drift: Option<f64>,
    pub lhs_angle: Option<f64>,
    pub bound_satisfied: bool,
    pub degenerate: bool,
    /// `∠(C^(k), C^(K))` for every iteration `k`.
    pub drift_trajectory: Vec<Option<f64>>,
}

impl ErrorReport {
    pub fn bound(&self) -> Option<f64> {
        Some(self.eps_cross? + self.eps_corr? + self.eps_drift?)
    }
}

fn angle(a: &Matrix, b: &Matrix) -> Option<f64> {
    angular_distance(a, b).ok()
}

pub fn estimation_error_report(acc: &EstimationAccumulators, delta: &Matrix) -> Result<ErrorReport> {
    if delta.ncols() != acc.c_final.nrows() {
        return Err(Error::Shape(format!(
            "delta is {:?} but layer inputs have dimension {}",
            delta.shape(),
            acc.c_final.nrows()
        )));
    }
    let gtg = symmetrize(acc.g_bar.tr_mul(&acc.g_bar));
    let dtd = symmetrize(delta.tr_mul(delta));
    let eps_cross = angle(&gtg, &acc.s_bar);
    let eps_corr = angle(&acc.s_bar, &acc.s_tilde);
    let eps_drift = angle(&acc.s_tilde, &acc.c_final);
    let lhs_angle = angle(&dtd, &acc.c_final);
    let drift_trajectory = acc.c_trajectory.iter().map(|c| angle(c, &acc.c_final)).collect();
    let mut report = ErrorReport {
        layer: acc.layer.clone(),
        eps_cross,
        eps_corr,
        eps_drift,
        lhs_angle,
        bound_satisfied: false,
        degenerate: false,
        drift_trajectory,
    };
    match (report.lhs_angle, report.bound()) {
        (Some(lhs), Some(bound)) => report.bound_satisfied = lhs <= bound + BOUND_SLACK,
        _ => report.degenerate = true,
    }
    Ok(report)
}

/// Correlations between the entries of `z zᵀ` and `‖g‖²` across samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PearsonSummary {
    pub layer: String,
    /// `(i, j, r)` for every entry with `i ≤ j` whose correlation is defined.
    pub correlations: Vec<(usize, usize, f64)>,
    pub entries: usize,
    pub skipped: usize,
    /// Quantiles of `|r|` over the defined entries.
    pub abs_quantiles: Option<Quantiles>,
}

/// Uses the last iteration of the trace. Entries where either series is
/// constant are skipped and counted.
pub fn pearson_activation_gradnorm(trace: &TrainTrace) -> Result<PearsonSummary> {
    let last = trace
        .iterations
        .last()
        .ok_or_else(|| Error::InvalidInput(format!("trace for {:?} has no iterations", trace.layer)))?;
    let l = last.z.ncols();
    if l < 2 {
        return Err(Error::InvalidInput(format!(
            "correlations need at least 2 samples, the last iteration has {l}"
        )));
    }
    let gn: Vec<f64> = last.g.column_iter().map(|c| c.norm_squared()).collect();
    let d = last.z.nrows();
    let mut correlations = Vec::new();
    let mut skipped = 0;
    let mut series = vec![0.0; l];
    for i in 0..d {
        for j in i..d {
            for (s, col) in series.iter_mut().zip(last.z.column_iter()) {
                *s = col[i] * col[j];
            }
            match pearson(&series, &gn) {
                Ok(r) => correlations.push((i, j, r)),
                Err(_) => skipped += 1,
            }
        }
    }
    let abs: Vec<f64> = correlations.iter().map(|c| c.2.abs()).collect();
    Ok(PearsonSummary {
        layer: trace.layer.clone(),
        entries: d * (d + 1) / 2,
        skipped,
        abs_quantiles: Quantiles::of(&abs),
        correlations,
    })
}

/// Frobenius cosine of an estimate against the true covariance, next to the
/// cosine an identity matrix would score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovarianceAlignment {
    pub cosine: f64,
    pub identity_baseline: f64,
}

pub fn covariance_alignment(c_true: &Matrix, c_hat: &Matrix) -> Result<CovarianceAlignment> {
    let n = c_true.nrows();
    Ok(CovarianceAlignment {
        cosine: cosine_similarity(c_hat, c_true)?,
        identity_baseline: cosine_similarity(&Matrix::identity(n, n), c_true)?,
    })
}

/// Relative Frobenius change of the interference merge when every covariance
/// is multiplied by `c`.
pub fn scale_invariance_gap(ws: &[Matrix], cs: &[Matrix], c: f64, rtol: f64) -> Result<f64> {
    let base = merge_interference(ws, cs, Some(rtol))?;
    let scaled: Vec<Matrix> = cs.iter().map(|m| m * c).collect();
    let other = merge_interference(ws, &scaled, Some(rtol))?;
    let norm = frobenius_norm(&base);
    let gap = frobenius_norm(&(other - &base));
    Ok(if norm == 0.0 { gap } else { gap / norm })
}

/// Both sides of `‖A† − B†‖_F ≤ max(‖A†‖_F², ‖B†‖_F²) ‖A − B‖_F`.
pub fn pinv_perturbation_sides(a: &Matrix, b: &Matrix, rtol: f64) -> Result<(f64, f64)> {
    let (pa, pb) = (pinv(a, rtol)?, pinv(b, rtol)?);
    let lhs = frobenius_norm(&(&pa - &pb));
    let rhs = frobenius_norm(&pa).powi(2).max(frobenius_norm(&pb).powi(2)) * frobenius_norm(&(a - b));
    Ok((lhs, rhs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `ℓ(y) = ‖y‖`, Lipschitz with β = 1.
    Norm,
    /// `ℓ(y) = ‖y − t‖²`; β is taken as twice the largest residual norm.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferLayerTerms {
    /// Tensor name for linear layers, `act.{i}` for activations.
    pub layer: String,
    pub linear: bool,
    pub gamma: f64,
    pub gamma_tilde: f64,
    /// Mean local error of the true-covariance merge, `E[Δg*]`.
    pub local_error: f64,
    pub zeta_tilde: f64,
    pub kappa_w: f64,
    pub kappa_s_pinv: f64,
    pub s_hat_pinv_norm: f64,
    /// `‖C_t − Ĉ_t‖_F` per task.
    pub cov_gaps: Vec<f64>,
    /// `ζ̃ Σ_t ‖C_t − Ĉ_t‖ (κ_W κ_S† + κ_W max(‖S†‖², ‖Ŝ†‖²) Σ_t' ‖Ĉ_t'‖)`.
    pub cov_error_term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferBoundReport {
    pub task: usize,
    pub loss: LossKind,
    pub per_sample: Vec<f64>,
    pub expected: f64,
    pub beta: f64,
    pub beta_is_estimate: bool,
    pub layers: Vec<TransferLayerTerms>,
    pub interference_term: f64,
    pub covariance_term: f64,
    pub bound: f64,
    pub holds: bool,
}

fn layer_cov<'a>(bundle: &'a CovarianceBundle, layer: &str) -> Result<&'a Matrix> {
    bundle
        .layer_covs
        .get(layer)
        .ok_or_else(|| Error::InvalidInput(format!("covariances of task {:?} lack layer {layer:?}", bundle.task_id)))
}

fn pinv_auto(a: &Matrix, rtol: Option<f64>) -> Result<Matrix> {
    pinv(a, rtol.unwrap_or_else(|| default_pinv_rtol(a.nrows(), a.ncols())))
}

/// Evaluates both sides of the negative-transfer bound for every task.
///
/// The network is the bias-free MLP of [`ToyNetwork`]: linear layers
/// interleaved with a 1-Lipschitz activation. `merged` is the merge built
/// from `covs_hat`; the reference merge `θ*` is rebuilt from `covs_true`.
#[allow(clippy::too_many_arguments)]
pub fn negative_transfer_bound(
    activation: Activation,
    merged: &crate::tensor_store::Checkpoint,
    experts: &TaskSet,
    covs_true: &[CovarianceBundle],
    covs_hat: &[CovarianceBundle],
    data: &[TaskData],
    loss: LossKind,
    rtol: Option<f64>,
) -> Result<Vec<TransferBoundReport>> {
    let merged = ToyNetwork::from_checkpoint(merged, activation)?;
    let nets = experts
        .experts
        .iter()
        .map(|c| ToyNetwork::from_checkpoint(c, activation))
        .collect::<Result<Vec<_>>>()?;
    let t_count = nets.len();
    if covs_true.len() != t_count || covs_hat.len() != t_count || data.len() != t_count {
        return Err(Error::InvalidInput(format!(
            "{t_count} experts but {} true bundles, {} estimated bundles, {} datasets",
            covs_true.len(),
            covs_hat.len(),
            data.len()
        )));
    }
    if let Some(t) = data.iter().position(|d| d.inputs.ncols() == 0) {
        return Err(Error::InvalidInput(format!("task {t} has an empty sample set")));
    }
    let n_lin = merged.num_layers();
    if nets.iter().any(|n| n.widths() != merged.widths()) {
        return Err(Error::Shape("experts and merged network differ in architecture".into()));
    }

    // Per linear layer: θ*, γ and the covariance-error factor (task independent).
    struct LinearConsts {
        w_star: Matrix,
        gamma: f64,
        kappa_w: f64,
        kappa_s_pinv: f64,
        s_hat_pinv_norm: f64,
        cov_gaps: Vec<f64>,
        factor: f64,
    }
    let mut consts = Vec::with_capacity(n_lin);
    for l in 0..n_lin {
        let name = layer_name(l);
        let ws: Vec<Matrix> = nets.iter().map(|n| n.weights[l].clone()).collect();
        let cs = covs_true
            .iter()
            .map(|b| layer_cov(b, &name).cloned())
            .collect::<Result<Vec<_>>>()?;
        let chs = covs_hat
            .iter()
            .map(|b| layer_cov(b, &name).cloned())
            .collect::<Result<Vec<_>>>()?;
        let w_star = merge_interference(&ws, &cs, rtol)?;
        let s: Matrix = cs
            .iter()
            .fold(Matrix::zeros(ws[0].ncols(), ws[0].ncols()), |a, c| a + c);
        let s_hat: Matrix = chs
            .iter()
            .fold(Matrix::zeros(ws[0].ncols(), ws[0].ncols()), |a, c| a + c);
        let kappa_s_pinv = frobenius_norm(&pinv_auto(&s, rtol)?);
        let s_hat_pinv_norm = frobenius_norm(&pinv_auto(&s_hat, rtol)?);
        let kappa_w = ws.iter().map(frobenius_norm).fold(0.0, f64::max);
        let cov_gaps: Vec<f64> = cs.iter().zip(&chs).map(|(c, h)| frobenius_norm(&(c - h))).collect();
        let hat_sum: f64 = chs.iter().map(frobenius_norm).sum();
        let gap_sum: f64 = cov_gaps.iter().sum();
        let factor =
            gap_sum * (kappa_w * kappa_s_pinv + kappa_w * kappa_s_pinv.powi(2).max(s_hat_pinv_norm.powi(2)) * hat_sum);
        consts.push(LinearConsts {
            w_star,
            gamma: spectral_norm(&merged.weights[l])?,
            kappa_w,
            kappa_s_pinv,
            s_hat_pinv_norm,
            cov_gaps,
            factor,
        });
    }

    let mut reports = Vec::with_capacity(t_count);
    for (t, (net, task)) in nets.iter().zip(data).enumerate() {
        let expert_pass = net.forward(&task.inputs);
        let merged_out = merged.predict(&task.inputs);
        let expert_out = expert_pass.prediction();
        let (per_sample, beta, beta_is_estimate) = match loss {
            LossKind::Norm => {
                let v = merged_out
                    .column_iter()
                    .zip(expert_out.column_iter())
                    .map(|(a, b)| (a.norm() - b.norm()).abs())
                    .collect();
                (v, 1.0, false)
            }
            LossKind::Mse => {
                let rm = &merged_out - &task.targets;
                let re = expert_out - &task.targets;
                let v: Vec<f64> = rm
                    .column_iter()
                    .zip(re.column_iter())
                    .map(|(a, b)| (a.norm_squared() - b.norm_squared()).abs())
                    .collect();
                let max_r = rm
                    .column_iter()
                    .chain(re.column_iter())
                    .map(|c| c.norm())
                    .fold(0.0, f64::max);
                (v, 2.0 * max_r, true)
            }
        };
        let expected = per_sample.iter().sum::<f64>() / per_sample.len() as f64;

        // Operations in order: lin 0, act 0, lin 1, ..., lin n-1.
        let n_ops = 2 * n_lin - 1;
        let gammas: Vec<f64> = (0..n_ops)
            .map(|j| if j % 2 == 0 { consts[j / 2].gamma } else { 1.0 })
            .collect();
        let mut gamma_tilde = vec![beta; n_ops];
        for j in (0..n_ops - 1).rev() {
            gamma_tilde[j] = gamma_tilde[j + 1] * gammas[j + 1];
        }
        let mut layers = Vec::with_capacity(n_ops);
        let (mut interference_term, mut covariance_term) = (0.0, 0.0);
        for (j, &gt) in gamma_tilde.iter().enumerate() {
            if j % 2 == 1 {
                layers.push(TransferLayerTerms {
                    layer: format!("act.{}", j / 2),
                    linear: false,
                    gamma: 1.0,
                    gamma_tilde: gt,
                    local_error: 0.0,
                    zeta_tilde: 0.0,
                    kappa_w: 0.0,
                    kappa_s_pinv: 0.0,
                    s_hat_pinv_norm: 0.0,
                    cov_gaps: Vec::new(),
                    cov_error_term: 0.0,
                });
                continue;
            }
            let l = j / 2;
            let c = &consts[l];
            let z = &expert_pass.inputs[l];
            let diff = &c.w_star - &net.weights[l];
            let local_error = (&diff * z).column_iter().map(|v| v.norm()).sum::<f64>() / z.ncols() as f64;
            let mean_z = z.column_iter().map(|v| v.norm()).sum::<f64>() / z.ncols() as f64;
            let zeta_tilde = gt * mean_z;
            let cov_error_term = zeta_tilde * c.factor;
            interference_term += gt * local_error;
            covariance_term += cov_error_term;
            layers.push(TransferLayerTerms {
                layer: layer_name(l),
                linear: true,
                gamma: c.gamma,
                gamma_tilde: gt,
                local_error,
                zeta_tilde,
                kappa_w: c.kappa_w,
                kappa_s_pinv: c.kappa_s_pinv,
                s_hat_pinv_norm: c.s_hat_pinv_norm,
                cov_gaps: c.cov_gaps.clone(),
                cov_error_term,
            });
        }
        let bound = interference_term + covariance_term;
        reports.push(TransferBoundReport {
            task: t,
            loss,
            per_sample,
            expected,
            beta,
            beta_is_estimate,
            layers,
            interference_term,
            covariance_term,
            bound,
            holds: expected <= bound + BOUND_SLACK,
        });
    }
    Ok(reports)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

/// One-line `kind key=value ...` rendering.
pub trait Record {
    fn record(&self) -> String;
}

impl Record for ErrorReport {
    fn record(&self) -> String {
        format!(
            "estimation_error layer={} eps_cross={} eps_corr={} eps_drift={} lhs_angle={} bound={} bound_satisfied={} degenerate={} iterations={}",
            self.layer,
            fmt_opt(self.eps_cross),
            fmt_opt(self.eps_corr),
            fmt_opt(self.eps_drift),
            fmt_opt(self.lhs_angle),
            fmt_opt(self.bound()),
            self.bound_satisfied,
            self.degenerate,
            self.drift_trajectory.len()
        )
    }
}

impl Record for PearsonSummary {
    fn record(&self) -> String {
        let q = self.abs_quantiles;
        format!(
            "pearson layer={} entries={} skipped={} abs_min={} abs_q25={} abs_median={} abs_q75={} abs_max={}",
            self.layer,
            self.entries,
            self.skipped,
            fmt_opt(q.map(|q| q.min)),
            fmt_opt(q.map(|q| q.q25)),
            fmt_opt(q.map(|q| q.median)),
            fmt_opt(q.map(|q| q.q75)),
            fmt_opt(q.map(|q| q.max)),
        )
    }
}

impl Record for TransferBoundReport {
    fn record(&self) -> String {
        format!(
            "transfer task={} loss={} expected={} bound={} interference_term={} covariance_term={} beta={} beta_estimate={} holds={}",
            self.task,
            match self.loss {
                LossKind::Norm => "norm",
                LossKind::Mse => "mse",
            },
            self.expected,
            self.bound,
            self.interference_term,
            self.covariance_term,
            self.beta,
            self.beta_is_estimate,
            self.holds
        )
    }
}

impl Record for KappaReport {
    fn record(&self) -> String {
        self.layers
            .iter()
            .map(|(layer, lk)| {
                let q = lk.summary;
                format!(
                    "kappa layer={} tasks={} ratios={} ratio_min={} ratio_median={} ratio_max={}",
                    layer,
                    lk.kappas.len(),
                    lk.ratios.len(),
                    fmt_opt(q.map(|q| q.min)),
                    fmt_opt(q.map(|q| q.median)),
                    fmt_opt(q.map(|q| q.max)),
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("csv output failed: {e}"))
}

pub const ESTIMATION_CSV_HEADER: [&str; 8] = [
    "layer",
    "eps_cross",
    "eps_corr",
    "eps_drift",
    "lhs_angle",
    "bound",
    "bound_satisfied",
    "degenerate",
];

pub fn write_estimation_csv<W: Write>(out: W, reports: &[ErrorReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ESTIMATION_CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.layer.clone(),
            fmt_opt(r.eps_cross),
            fmt_opt(r.eps_corr),
            fmt_opt(r.eps_drift),
            fmt_opt(r.lhs_angle),
            fmt_opt(r.bound()),
            r.bound_satisfied.to_string(),
            r.degenerate.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

pub const DRIFT_CSV_HEADER: [&str; 3] = ["layer", "iteration", "angle_to_final"];

pub fn write_drift_csv<W: Write>(out: W, reports: &[ErrorReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DRIFT_CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        for (k, a) in r.drift_trajectory.iter().enumerate() {
            w.write_record([r.layer.clone(), k.to_string(), fmt_opt(*a)])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(csv_err)
}

pub const PEARSON_CSV_HEADER: [&str; 4] = ["layer", "i", "j", "pearson"];

pub fn write_pearson_csv<W: Write>(out: W, summaries: &[PearsonSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PEARSON_CSV_HEADER).map_err(csv_err)?;
    for s in summaries {
        for (i, j, r) in &s.correlations {
            w.write_record([s.layer.clone(), i.to_string(), j.to_string(), r.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(csv_err)
}

pub const TRANSFER_CSV_HEADER: [&str; 7] = [
    "task",
    "expected",
    "interference_term",
    "covariance_term",
    "bound",
    "beta",
    "holds",
];

pub fn write_transfer_csv<W: Write>(out: W, reports: &[TransferBoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRANSFER_CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.task.to_string(),
            r.expected.to_string(),
            r.interference_term.to_string(),
            r.covariance_term.to_string(),
            r.bound.to_string(),
            r.beta.to_string(),
            r.holds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

pub const KAPPA_CSV_HEADER: [&str; 4] = ["layer", "task_i", "task_j", "ratio"];

pub fn write_kappa_csv<W: Write>(out: W, report: &KappaReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(KAPPA_CSV_HEADER).map_err(csv_err)?;
    for (layer, lk) in &report.layers {
        for r in &lk.ratios {
            w.write_record([layer.clone(), r.task_i.clone(), r.task_j.clone(), r.ratio.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(csv_err)
}
