//! Seeded invariant suite behind the `verify` subcommand.
//!
//! Each check draws its own instances from a ChaCha8 stream derived from
//! the suite seed, so the PASS/FAIL output is a pure function of the seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cov::{actmat_bundle, gram, CovarianceBundle};
use crate::diagnostics::{
    accumulate_estimation_terms, estimation_error_report, negative_transfer_bound, pinv_perturbation_sides,
    scale_invariance_gap, LossKind,
};
use crate::error::Result;
use crate::flops::FlopModel;
use crate::linalg::{frobenius_norm, pinv, svd, Matrix};
use crate::merge::{
    merge, merge_actmat, merge_interference, merge_iso_c, tsv_factors, MergeConfig, MergeMethod, TaskSet,
};
use crate::tensor_store::{compute_task_vector, Checkpoint, DType, Tensor};
use crate::toy::{
    brute_force_minimizer, empirical_bundle, layer_name, scenario_from_spec, train_all, train_full_batch,
    uniform_matrix, ScenarioSpec, ToyScenario, TrainOutcome,
};

/// Relative pseudoinverse cutoff used by the suite.
pub const SUITE_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

/// Experts' weights and covariances for one layer.
#[derive(Debug, Clone)]
pub struct InterferenceInstance {
    pub ws: Vec<Matrix>,
    pub cs: Vec<Matrix>,
}

impl InterferenceInstance {
    pub fn a(&self) -> Matrix {
        self.cs.iter().skip(1).fold(self.cs[0].clone(), |acc, c| acc + c)
    }

    pub fn b(&self) -> Matrix {
        self.ws
            .iter()
            .zip(&self.cs)
            .skip(1)
            .fold(&self.ws[0] * &self.cs[0], |acc, (w, c)| acc + w * c)
    }
}

/// Random instance with `D_o, D_i ≤ 8` and `T ≤ 4`.
///
/// All covariances live in a shared `r`-dimensional subspace, so `Σ C_t` has
/// rank exactly `r`; with `rank_deficient` set, `r < D_i`. Task 0 carries a
/// ridge inside the subspace to keep the nonzero spectrum away from zero.
pub fn interference_instance(rng: &mut impl Rng, rank_deficient: bool) -> InterferenceInstance {
    let d_out = rng.random_range(1..=8);
    let d_in = rng.random_range(if rank_deficient { 2 } else { 1 }..=8);
    let t = rng.random_range(1..=4);
    let r = if rank_deficient {
        rng.random_range(1..d_in)
    } else {
        d_in
    };
    let basis = {
        let q = uniform_matrix(rng, d_in, d_in).qr().q();
        q.columns(0, r).into_owned()
    };
    let ws = (0..t).map(|_| uniform_matrix(rng, d_out, d_in)).collect();
    let cs = (0..t)
        .map(|k| {
            let m = rng.random_range(1..=r);
            let g = uniform_matrix(rng, r, m);
            let mut inner = &g * g.transpose() / m as f64;
            if k == 0 {
                inner += Matrix::identity(r, r) * 0.2;
            }
            let c = &basis * inner * basis.transpose();
            (&c + c.transpose()) * 0.5
        })
        .collect();
    InterferenceInstance { ws, cs }
}

/// `2 Σ_t (W − W_t) C_t`.
pub fn interference_gradient(w: &Matrix, inst: &InterferenceInstance) -> Matrix {
    (w * inst.a() - inst.b()) * 2.0
}

pub fn relative_gap(a: &Matrix, b: &Matrix) -> f64 {
    let scale = frobenius_norm(b);
    let gap = frobenius_norm(&(a - b));
    if scale == 0.0 {
        gap
    } else {
        gap / scale
    }
}

/// A random two-layer toy problem: pretrained net, `t` fine-tuned experts,
/// their empirical covariances and task-vector estimates.
pub struct TransferInstance {
    pub scenario: ToyScenario,
    pub outcomes: Vec<TrainOutcome>,
    pub task_set: TaskSet,
    pub covs_true: Vec<CovarianceBundle>,
    pub covs_hat: Vec<CovarianceBundle>,
}

pub fn transfer_instance(seed: u64, tasks: usize, widths: Vec<usize>, steps: usize) -> Result<TransferInstance> {
    let spec = ScenarioSpec {
        seed,
        num_tasks: tasks,
        widths,
        steps,
        samples_per_task: 32,
        ..ScenarioSpec::default()
    };
    let scenario = scenario_from_spec(&spec)?;
    let outcomes = train_all(&scenario, &[])?;
    let pre = scenario.pretrained.to_checkpoint("pretrained");
    let task_set = TaskSet::new(pre, outcomes.iter().map(|o| o.checkpoint.clone()).collect())?;
    let covs_true = outcomes
        .iter()
        .zip(&scenario.tasks)
        .enumerate()
        .map(|(t, (o, d))| empirical_bundle(&o.network, &d.inputs, &format!("task{t}")))
        .collect::<Result<Vec<_>>>()?;
    let covs_hat = task_set
        .experts
        .iter()
        .enumerate()
        .map(|(t, e)| {
            let tv = compute_task_vector(&task_set.pretrained, e, format!("task{t}"))?;
            let layers: Vec<String> = tv.deltas.keys().cloned().collect();
            actmat_bundle(&tv, &layers)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferInstance {
        scenario,
        outcomes,
        task_set,
        covs_true,
        covs_hat,
    })
}

/// Random checkpoint with mixed dtypes, ranks and names, for I/O checks.
pub fn random_checkpoint(rng: &mut impl Rng, name: &str) -> Checkpoint {
    let mut c = Checkpoint::new(name);
    let n_tensors = rng.random_range(0..6);
    for i in 0..n_tensors {
        let ndim = rng.random_range(0..4);
        let shape: Vec<usize> = (0..ndim).map(|_| rng.random_range(0..5)).collect();
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = (0..numel).map(|_| rng.random_range(-1e3..1e3)).collect();
        let dtype = if rng.random_bool(0.5) { DType::F32 } else { DType::F64 };
        let t = Tensor::from_f64(shape, values, dtype).expect("shape matches values");
        c.insert(format!("block{i}.{}", ["weight", "bias", "norm.scale"][i % 3]), t);
    }
    if rng.random_bool(0.5) {
        c.metadata
            .insert("note".into(), format!("seed-draw {}", rng.random::<u32>()));
    }
    c
}

fn check(name: &'static str, failures: usize, total: usize, extra: String) -> CheckResult {
    CheckResult {
        name,
        passed: failures == 0,
        detail: format!("failures={failures}/{total}{extra}"),
    }
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn closed_form_checks(seed: u64, n: usize) -> Vec<CheckResult> {
    let mut rng = sub_rng(seed, 1);
    let (mut gd_fail, mut stat_fail, mut worst_gd, mut worst_stat) = (0, 0, 0.0f64, 0.0f64);
    for i in 0..n {
        let inst = interference_instance(&mut rng, i % 2 == 0);
        let outcome = merge_interference(&inst.ws, &inst.cs, Some(SUITE_RTOL)).and_then(|w| {
            let oracle = brute_force_minimizer(&inst.ws, &inst.cs, 2_000_000, None)?;
            Ok((w, oracle))
        });
        match outcome {
            Ok((w, oracle)) => {
                let gap = relative_gap(&w, &oracle);
                worst_gd = worst_gd.max(gap);
                gd_fail += usize::from(gap > 1e-6);
                let scale: f64 = inst
                    .ws
                    .iter()
                    .zip(&inst.cs)
                    .map(|(w, c)| frobenius_norm(&(w * c)))
                    .sum();
                let grad = frobenius_norm(&interference_gradient(&w, &inst));
                worst_stat = worst_stat.max(grad / scale);
                stat_fail += usize::from(grad > 1e-8 * scale);
            }
            Err(_) => {
                gd_fail += 1;
                stat_fail += 1;
            }
        }
    }
    vec![
        check(
            "closed_form_matches_descent",
            gd_fail,
            n,
            format!(" worst_rel_gap={worst_gd:.3e}"),
        ),
        check(
            "stationarity",
            stat_fail,
            n,
            format!(" worst_rel_grad={worst_stat:.3e}"),
        ),
    ]
}

fn min_norm_check(seed: u64, n: usize, perturbations: usize) -> CheckResult {
    let mut rng = sub_rng(seed, 2);
    let mut failures = 0;
    for _ in 0..n {
        let inst = interference_instance(&mut rng, true);
        let Ok(w) = merge_interference(&inst.ws, &inst.cs, Some(SUITE_RTOL)) else {
            failures += 1;
            continue;
        };
        let a = inst.a();
        let Ok(ap) = pinv(&a, SUITE_RTOL) else {
            failures += 1;
            continue;
        };
        let proj = Matrix::identity(a.nrows(), a.nrows()) - &a * ap;
        let base = frobenius_norm(&w);
        for _ in 0..perturbations {
            let z = uniform_matrix(&mut rng, w.nrows(), w.ncols()) * 10.0;
            if frobenius_norm(&(&w + z * &proj)) < base - 1e-10 {
                failures += 1;
                break;
            }
        }
    }
    check("min_norm_solution", failures, n, String::new())
}

fn scale_check(seed: u64, n: usize) -> CheckResult {
    let mut rng = sub_rng(seed, 3);
    let (mut failures, mut worst) = (0, 0.0f64);
    for i in 0..n {
        let inst = interference_instance(&mut rng, i % 2 == 1);
        for c in [1e-3, 1.0, 1e3] {
            match scale_invariance_gap(&inst.ws, &inst.cs, c, SUITE_RTOL) {
                Ok(g) => {
                    worst = worst.max(g);
                    failures += usize::from(g > 1e-10);
                }
                Err(_) => failures += 1,
            }
        }
    }
    check(
        "covariance_scale_invariance",
        failures,
        3 * n,
        format!(" worst_rel_change={worst:.3e}"),
    )
}

fn pinv_check(seed: u64, n: usize) -> CheckResult {
    let mut rng = sub_rng(seed, 4);
    let mut failures = 0;
    for _ in 0..n {
        let (m, k) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let a = uniform_matrix(&mut rng, m, k);
        let b = if rng.random_bool(0.5) {
            &a + uniform_matrix(&mut rng, m, k) * 1e-2
        } else {
            uniform_matrix(&mut rng, m, k)
        };
        match pinv_perturbation_sides(&a, &b, crate::linalg::default_pinv_rtol(m, k)) {
            Ok((lhs, rhs)) => failures += usize::from(lhs > rhs * (1.0 + 1e-12) + 1e-12),
            Err(_) => failures += 1,
        }
    }
    check("pinv_perturbation", failures, n, String::new())
}

fn triangle_bound_check(seed: u64, runs: usize) -> CheckResult {
    let mut rng = sub_rng(seed, 5);
    let (mut failures, mut total, mut worst_slack) = (0, 0, f64::INFINITY);
    for _ in 0..runs {
        let spec = ScenarioSpec {
            seed: rng.random(),
            num_tasks: 1,
            widths: vec![
                rng.random_range(2..=8),
                rng.random_range(2..=8),
                rng.random_range(1..=4),
            ],
            eta: rng.random_range(0.005..0.1),
            steps: rng.random_range(1..=60),
            samples_per_task: rng.random_range(2..=32),
            ..ScenarioSpec::default()
        };
        let layers = vec![layer_name(0), layer_name(1)];
        let out = scenario_from_spec(&spec).and_then(|s| train_full_batch(&s, 0, &layers));
        let Ok(out) = out else {
            failures += 1;
            total += 1;
            continue;
        };
        for tr in out.traces.values() {
            total += 1;
            let report = accumulate_estimation_terms(tr).and_then(|acc| estimation_error_report(&acc, &tr.delta()));
            match report {
                Ok(r) if r.bound_satisfied => {
                    worst_slack = worst_slack.min(r.bound().unwrap() - r.lhs_angle.unwrap());
                }
                _ => failures += 1,
            }
        }
    }
    check(
        "estimation_triangle_bound",
        failures,
        total,
        format!(" min_slack={worst_slack:.3e}"),
    )
}

fn proportional_regime_check(seed: u64, runs: usize) -> CheckResult {
    let mut rng = sub_rng(seed, 6);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..runs {
        let spec = ScenarioSpec {
            seed: rng.random(),
            num_tasks: 1,
            widths: vec![
                rng.random_range(2..=8),
                rng.random_range(2..=8),
                rng.random_range(1..=4),
            ],
            samples_per_task: 1,
            steps: 1,
            ..ScenarioSpec::default()
        };
        let layers = vec![layer_name(0), layer_name(1)];
        let Ok(out) = scenario_from_spec(&spec).and_then(|s| train_full_batch(&s, 0, &layers)) else {
            failures += 1;
            continue;
        };
        for tr in out.traces.values() {
            let r = accumulate_estimation_terms(tr).and_then(|acc| estimation_error_report(&acc, &tr.delta()));
            let angles = r.map(|r| [r.eps_cross, r.eps_corr, r.eps_drift, r.lhs_angle]);
            match angles {
                Ok(a) if a.iter().all(|v| v.is_some_and(|v| v <= 1e-6)) => {
                    worst = a.iter().map(|v| v.unwrap()).fold(worst, f64::max);
                }
                _ => failures += 1,
            }
        }
    }
    check(
        "single_step_proportionality",
        failures,
        runs,
        format!(" worst_angle={worst:.3e}"),
    )
}

fn transfer_check(seed: u64, runs: usize) -> CheckResult {
    let mut rng = sub_rng(seed, 7);
    let (mut failures, mut exact_fail) = (0, 0);
    for _ in 0..runs {
        let widths = vec![
            rng.random_range(2..=6),
            rng.random_range(2..=8),
            rng.random_range(1..=4),
        ];
        let run = (|| -> Result<bool> {
            let inst = transfer_instance(rng.random(), 2, widths, 20)?;
            let merged = merge(&inst.task_set, &MergeConfig::new(MergeMethod::ActMat))?.checkpoint;
            let reports = negative_transfer_bound(
                inst.scenario.spec.activation,
                &merged,
                &inst.task_set,
                &inst.covs_true,
                &inst.covs_hat,
                &inst.scenario.tasks,
                LossKind::Norm,
                None,
            )?;
            let exact = negative_transfer_bound(
                inst.scenario.spec.activation,
                &merged,
                &inst.task_set,
                &inst.covs_true,
                &inst.covs_true,
                &inst.scenario.tasks,
                LossKind::Norm,
                None,
            )?;
            if exact.iter().any(|r| r.covariance_term != 0.0) {
                exact_fail += 1;
            }
            Ok(reports.iter().all(|r| r.holds))
        })();
        failures += usize::from(!matches!(run, Ok(true)));
    }
    check("negative_transfer_bound", failures + exact_fail, runs, String::new())
}

fn actmat_definition_check(seed: u64, n: usize) -> CheckResult {
    let mut rng = sub_rng(seed, 8);
    let mut failures = 0;
    for _ in 0..n {
        let (m, k, t) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=4),
        );
        let w0 = uniform_matrix(&mut rng, m, k);
        let deltas: Vec<Matrix> = (0..t).map(|_| uniform_matrix(&mut rng, m, k) * 0.1).collect();
        let ws: Vec<Matrix> = deltas.iter().map(|d| &w0 + d).collect();
        let cs: Vec<Matrix> = deltas.iter().map(gram).collect();
        let same = match (merge_actmat(&ws, &deltas, None), merge_interference(&ws, &cs, None)) {
            (Ok(a), Ok(b)) => a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        };
        failures += usize::from(!same);
    }
    check("actmat_definition", failures, n, String::new())
}

fn spectral_checks(seed: u64, n: usize) -> Vec<CheckResult> {
    let mut rng = sub_rng(seed, 9);
    let (mut iso_fail, mut tsv_fail) = (0, 0);
    for _ in 0..n {
        let (m, k, t) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=4),
        );
        let w0 = uniform_matrix(&mut rng, m, k);
        let deltas: Vec<Matrix> = (0..t).map(|_| uniform_matrix(&mut rng, m, k)).collect();
        let flat = merge_iso_c(&w0, &deltas, 1.0)
            .and_then(|w| svd(&(w - &w0)))
            .map(|f| {
                let s = f.singular_values;
                s.iter().all(|v| (v - s[0]).abs() <= 1e-9)
            })
            .unwrap_or(false);
        iso_fail += usize::from(!flat);
        let ortho = tsv_factors(&deltas, 1.0)
            .map(|f| {
                if f.over_budget {
                    return true;
                }
                [&f.u, &f.v].iter().all(|q| {
                    let g = q.tr_mul(q);
                    (g - Matrix::identity(q.ncols(), q.ncols())).amax() <= 1e-9
                })
            })
            .unwrap_or(false);
        tsv_fail += usize::from(!ortho);
    }
    vec![
        check("iso_c_flat_spectrum", iso_fail, n, String::new()),
        check("tsv_orthonormal_factors", tsv_fail, n, String::new()),
    ]
}

fn round_trip_check(seed: u64, n: usize) -> CheckResult {
    let mut rng = sub_rng(seed, 10);
    let mut failures = 0;
    for i in 0..n {
        let c = random_checkpoint(&mut rng, &format!("ckpt{i}"));
        let back = Checkpoint::from_bytes(&c.to_bytes(), "unused");
        failures += usize::from(!matches!(back, Ok(ref b) if *b == c));
    }
    check("checkpoint_round_trip", failures, n, String::new())
}

fn flops_check() -> CheckResult {
    let mut failures = 0;
    let mut total = 0;
    for t in 1..=8u64 {
        for n in [1u64, 10, 64, 512] {
            for method in MergeMethod::ALL {
                total += 1;
                let (t2, n2) = (t as i128, n as i128);
                let expected = match method {
                    MergeMethod::Average => t2 * n2.pow(2),
                    MergeMethod::TaskArithmetic => (2 * t2 + 1) * n2.pow(2),
                    MergeMethod::RegMean => (t2 + 3) * n2.pow(3) + (2 * t2 - 2) * n2.pow(2),
                    MergeMethod::ActMat => (2 * t2 + 3) * n2.pow(3) + (3 * t2 - 2) * n2.pow(2),
                    MergeMethod::IsoC => 23 * n2.pow(3) + (2 * t2 + 2) * n2.pow(2) + n2,
                    MergeMethod::Tsv => (22 * t2 + 45) * n2.pow(3) + (t2 + 3) * n2.pow(2),
                };
                let got = FlopModel::new(method, t, n, 1).and_then(|m| m.flops());
                failures += usize::from(!matches!(got, Ok(c) if c.merge as i128 == expected));
            }
        }
    }
    check("flop_formulas", failures, total, String::new())
}

/// Runs every check; results come back in a fixed order.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.extend(closed_form_checks(seed, 20));
    out.push(min_norm_check(seed, 10, 20));
    out.push(pinv_check(seed, 200));
    out.push(scale_check(seed, 20));
    out.push(triangle_bound_check(seed, 8));
    out.push(proportional_regime_check(seed, 5));
    out.push(transfer_check(seed, 6));
    out.push(actmat_definition_check(seed, 20));
    out.extend(spectral_checks(seed, 20));
    out.push(round_trip_check(seed, 30));
    out.push(flops_check());
    out
}

/// Counts of passing and failing checks by name.
pub fn summarize(results: &[CheckResult]) -> BTreeMap<&'static str, bool> {
    results.iter().map(|r| (r.name, r.passed)).collect()
}
