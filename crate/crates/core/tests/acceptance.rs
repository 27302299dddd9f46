//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary so the lines are always printed; the process
//! exits non-zero when any criterion fails. Expected values come from
//! oracles written here rather than from library code.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use actmat::cov::{actmat_bundle, gram};
use actmat::diagnostics::{
    accumulate_estimation_terms, estimation_error_report, negative_transfer_bound, pinv_perturbation_sides, LossKind,
    BOUND_SLACK,
};
use actmat::flops::FlopModel;
use actmat::linalg::default_pinv_rtol;
use actmat::merge::{
    merge, merge_actmat, merge_interference, merge_iso_c, tsv_factors, MergeConfig, MergeMethod, TaskSet,
};
use actmat::tensor_store::{compute_task_vector, load_checkpoint, save_checkpoint, Checkpoint, DType, Tensor};
use actmat::toy::{
    brute_force_minimizer, empirical_bundle, layer_name, scenario_from_spec, train_all, train_full_batch, ScenarioSpec,
    ToyNetwork, TrainTrace,
};

type M = DMatrix<f64>;
type Criterion = (&'static str, fn() -> Outcome);

/// Relative pseudoinverse cutoff used for the closed-form criteria.
const RTOL: f64 = 1e-10;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn rng(stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xACCE_0000 + stream)
}

fn uniform(rng: &mut ChaCha8Rng, m: usize, n: usize) -> M {
    M::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
}

fn fro(a: &M) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn rel(a: &M, b: &M) -> f64 {
    let s = fro(b);
    if s == 0.0 {
        fro(&(a - b))
    } else {
        fro(&(a - b)) / s
    }
}

/// Orthonormal `n × r` basis from Gram–Schmidt on random columns.
fn orthonormal(rng: &mut ChaCha8Rng, n: usize, r: usize) -> M {
    loop {
        let mut q = uniform(rng, n, r);
        let mut ok = true;
        for j in 0..r {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                let ci = q.column(i).into_owned();
                q.column_mut(j).axpy(-proj, &ci, 1.0);
            }
            let norm = q.column(j).norm();
            if norm < 1e-3 {
                ok = false;
                break;
            }
            q.column_mut(j).scale_mut(1.0 / norm);
        }
        if ok {
            return q;
        }
    }
}

struct Instance {
    ws: Vec<M>,
    cs: Vec<M>,
    /// Orthonormal basis of the range of `Σ C_t`.
    range: M,
}

impl Instance {
    fn a(&self) -> M {
        self.cs
            .iter()
            .fold(M::zeros(self.range.nrows(), self.range.nrows()), |acc, c| acc + c)
    }

    fn b(&self) -> M {
        self.ws
            .iter()
            .zip(&self.cs)
            .fold(M::zeros(self.ws[0].nrows(), self.range.nrows()), |acc, (w, c)| {
                acc + w * c
            })
    }

    fn null_projector(&self) -> M {
        let n = self.range.nrows();
        M::identity(n, n) - &self.range * self.range.transpose()
    }
}

/// Covariances share an `r`-dimensional range; `r < D_i` when rank deficient.
fn instance(rng: &mut ChaCha8Rng, rank_deficient: bool) -> Instance {
    let d_out = rng.random_range(1..=8);
    let d_in = rng.random_range(if rank_deficient { 2 } else { 1 }..=8);
    let t = rng.random_range(1..=4);
    let r = if rank_deficient {
        rng.random_range(1..d_in)
    } else {
        d_in
    };
    let range = orthonormal(rng, d_in, r);
    let ws = (0..t).map(|_| uniform(rng, d_out, d_in)).collect();
    let cs = (0..t)
        .map(|k| {
            // spectrum in [0.1, 1] on a random subspace of the shared range
            let m = if k == 0 { r } else { rng.random_range(1..=r) };
            let basis = &range * orthonormal(rng, r, m);
            let diag = M::from_diagonal(&nalgebra::DVector::from_fn(m, |_, _| rng.random_range(0.1..1.0)));
            let c = &basis * diag * basis.transpose();
            (&c + c.transpose()) * 0.5
        })
        .collect();
    Instance { ws, cs, range }
}

fn instances(stream: u64, n: usize) -> Vec<Instance> {
    let mut r = rng(stream);
    (0..n).map(|i| instance(&mut r, i % 2 == 0)).collect()
}

fn closed_form_matches_descent() -> Outcome {
    let start = Instant::now();
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for inst in instances(1, 100) {
        let got = merge_interference(&inst.ws, &inst.cs, Some(RTOL));
        let oracle = brute_force_minimizer(&inst.ws, &inst.cs, 2_000_000, None);
        match (got, oracle) {
            (Ok(w), Ok(o)) => {
                let gap = rel(&w, &o);
                worst = worst.max(gap);
                failures += usize::from(gap > 1e-6);
            }
            _ => failures += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 30.0,
        format!("failures={failures}/100 worst_rel_gap={worst:.2e} seconds={secs:.2}"),
    )
}

fn stationarity() -> Outcome {
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for inst in instances(1, 100) {
        let Ok(w) = merge_interference(&inst.ws, &inst.cs, Some(RTOL)) else {
            failures += 1;
            continue;
        };
        let grad = (&w * inst.a() - inst.b()) * 2.0;
        let scale: f64 = inst.ws.iter().zip(&inst.cs).map(|(w, c)| fro(&(w * c))).sum();
        let ratio = fro(&grad) / scale;
        worst = worst.max(ratio);
        failures += usize::from(fro(&grad) > 1e-8 * scale);
    }
    outcome(
        failures == 0,
        format!("failures={failures}/100 worst_grad_ratio={worst:.2e}"),
    )
}

fn minimum_norm_solution() -> Outcome {
    let mut r = rng(3);
    let mut failures = 0;
    let mut worst: f64 = f64::INFINITY;
    for _ in 0..50 {
        let inst = instance(&mut r, true);
        let Ok(w) = merge_interference(&inst.ws, &inst.cs, Some(RTOL)) else {
            failures += 1;
            continue;
        };
        let p = inst.null_projector();
        let base = fro(&w);
        for _ in 0..20 {
            let z = uniform(&mut r, w.nrows(), w.ncols()) * r.random_range(1e-6..10.0);
            let norm = fro(&(&w + z * &p));
            worst = worst.min(norm - base);
            failures += usize::from(norm < base - 1e-10);
        }
    }
    outcome(
        failures == 0,
        format!("failures={failures}/1000 min_norm_gain={worst:.2e}"),
    )
}

fn covariance_scale_invariance() -> Outcome {
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for inst in instances(4, 100) {
        let Ok(base) = merge_interference(&inst.ws, &inst.cs, Some(RTOL)) else {
            failures += 1;
            continue;
        };
        for c in [1e-3, 1.0, 1e3] {
            let scaled: Vec<M> = inst.cs.iter().map(|m| m * c).collect();
            match merge_interference(&inst.ws, &scaled, Some(RTOL)) {
                Ok(w) => {
                    let gap = rel(&w, &base);
                    worst = worst.max(gap);
                    failures += usize::from(gap > 1e-10);
                }
                Err(_) => failures += 1,
            }
        }
    }
    outcome(
        failures == 0,
        format!("failures={failures}/300 worst_rel_change={worst:.2e}"),
    )
}

/// Angle between two matrices as vectors, `2·asin(‖â − b̂‖ / 2)`.
fn angle(a: &M, b: &M) -> f64 {
    let d = a / fro(a) - b / fro(b);
    2.0 * (fro(&d) / 2.0).min(1.0).asin()
}

struct TraceAngles {
    cross: f64,
    corr: f64,
    drift: f64,
    lhs: f64,
}

/// Accumulates the gradient/activation moments straight from the trace.
fn trace_angles(tr: &TrainTrace) -> TraceAngles {
    let d_in = tr.iterations[0].z.nrows();
    let d_out = tr.iterations[0].g.nrows();
    let mut g_bar = M::zeros(d_out, d_in);
    let mut s_bar = M::zeros(d_in, d_in);
    let mut s_tilde = M::zeros(d_in, d_in);
    let mut c_last = M::zeros(d_in, d_in);
    for it in &tr.iterations {
        let n = it.z.ncols() as f64;
        let mut zz = M::zeros(d_in, d_in);
        let mut gsq = 0.0;
        for s in 0..it.z.ncols() {
            let z = it.z.column(s);
            let g = it.g.column(s);
            let outer = z * z.transpose();
            let g2 = g.norm_squared();
            g_bar += g * z.transpose() / n;
            s_bar += &outer * (g2 / n);
            zz += outer / n;
            gsq += g2 / n;
        }
        s_tilde += &zz * gsq;
        c_last = zz;
    }
    let delta = tr.weight_snapshots.last().unwrap() - &tr.weight_snapshots[0];
    TraceAngles {
        cross: angle(&(g_bar.transpose() * &g_bar), &s_bar),
        corr: angle(&s_bar, &s_tilde),
        drift: angle(&s_tilde, &c_last),
        lhs: angle(&(delta.transpose() * &delta), &c_last),
    }
}

fn triangle_bound() -> Outcome {
    let mut r = rng(5);
    let (mut failures, mut runs, mut layers_checked) = (0, 0, 0);
    let mut min_slack = f64::INFINITY;
    let mut worst_mismatch: f64 = 0.0;
    for _ in 0..24 {
        let spec = ScenarioSpec {
            seed: r.random(),
            num_tasks: 1,
            widths: vec![r.random_range(2..=12), r.random_range(2..=12), r.random_range(1..=6)],
            eta: r.random_range(0.005..0.1),
            steps: r.random_range(1..=150),
            samples_per_task: r.random_range(2..=48),
            ..ScenarioSpec::default()
        };
        runs += 1;
        let layers = vec![layer_name(0), layer_name(1)];
        let Ok(out) = scenario_from_spec(&spec).and_then(|s| train_full_batch(&s, 0, &layers)) else {
            failures += 1;
            continue;
        };
        for tr in out.traces.values() {
            layers_checked += 1;
            let oracle = trace_angles(tr);
            let bound = oracle.cross + oracle.corr + oracle.drift;
            min_slack = min_slack.min(bound - oracle.lhs);
            let lib = accumulate_estimation_terms(tr).and_then(|acc| estimation_error_report(&acc, &tr.delta()));
            let agrees = match &lib {
                Ok(rep) => {
                    let pairs = [
                        (rep.eps_cross, oracle.cross),
                        (rep.eps_corr, oracle.corr),
                        (rep.eps_drift, oracle.drift),
                        (rep.lhs_angle, oracle.lhs),
                    ];
                    let gap = pairs
                        .iter()
                        .map(|(a, b)| a.map_or(f64::INFINITY, |a| (a - b).abs()))
                        .fold(0.0, f64::max);
                    worst_mismatch = worst_mismatch.max(gap);
                    rep.bound_satisfied && gap <= 1e-7
                }
                Err(_) => false,
            };
            failures += usize::from(oracle.lhs > bound + BOUND_SLACK || !agrees);
        }
    }
    outcome(
        failures == 0,
        format!(
            "runs={runs} failures={failures}/{layers_checked} min_slack={min_slack:.2e} worst_library_gap={worst_mismatch:.2e}"
        ),
    )
}

fn single_step_proportionality() -> Outcome {
    let mut r = rng(6);
    let (mut failures, mut total) = (0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let spec = ScenarioSpec {
            seed: r.random(),
            num_tasks: 1,
            widths: vec![r.random_range(2..=12), r.random_range(2..=12), r.random_range(1..=6)],
            eta: r.random_range(0.005..0.1),
            samples_per_task: 1,
            steps: 1,
            ..ScenarioSpec::default()
        };
        let layers = vec![layer_name(0), layer_name(1)];
        let Ok(out) = scenario_from_spec(&spec).and_then(|s| train_full_batch(&s, 0, &layers)) else {
            failures += 1;
            total += 1;
            continue;
        };
        for tr in out.traces.values() {
            total += 1;
            let o = trace_angles(tr);
            let lib = accumulate_estimation_terms(tr).and_then(|acc| estimation_error_report(&acc, &tr.delta()));
            let lib_vals: Vec<f64> = match lib {
                Ok(rep) => [rep.eps_cross, rep.eps_corr, rep.eps_drift, rep.lhs_angle]
                    .iter()
                    .map(|v| v.unwrap_or(f64::INFINITY))
                    .collect(),
                Err(_) => vec![f64::INFINITY],
            };
            let all = [o.cross, o.corr, o.drift, o.lhs].into_iter().chain(lib_vals);
            let m = all.fold(0.0, f64::max);
            worst = worst.max(m);
            failures += usize::from(m > 1e-6);
        }
    }
    outcome(
        failures == 0,
        format!("failures={failures}/{total} worst_angle={worst:.2e}"),
    )
}

fn negative_transfer() -> Outcome {
    let mut r = rng(7);
    let (mut failures, mut exact_nonzero, mut exact_fail) = (0, 0, 0);
    let mut min_margin = f64::INFINITY;
    for _ in 0..50 {
        let spec = ScenarioSpec {
            seed: r.random(),
            num_tasks: r.random_range(2..=3),
            widths: vec![r.random_range(2..=8), r.random_range(2..=10), r.random_range(1..=4)],
            steps: r.random_range(5..=40),
            samples_per_task: 32,
            ..ScenarioSpec::default()
        };
        let run = (|| -> actmat::Result<(bool, bool, bool, f64)> {
            let scenario = scenario_from_spec(&spec)?;
            let outcomes = train_all(&scenario, &[])?;
            let pre = scenario.pretrained.to_checkpoint("pretrained");
            let ts = TaskSet::new(pre, outcomes.iter().map(|o| o.checkpoint.clone()).collect())?;
            let covs_true = outcomes
                .iter()
                .zip(&scenario.tasks)
                .enumerate()
                .map(|(t, (o, d))| empirical_bundle(&o.network, &d.inputs, &format!("expert-{t}")))
                .collect::<actmat::Result<Vec<_>>>()?;
            let covs_hat = ts
                .experts
                .iter()
                .map(|e| {
                    let tv = compute_task_vector(&ts.pretrained, e, e.name.clone())?;
                    let layers: Vec<String> = tv.deltas.keys().cloned().collect();
                    actmat_bundle(&tv, &layers)
                })
                .collect::<actmat::Result<Vec<_>>>()?;
            let act = spec.activation;
            let merged = merge(&ts, &MergeConfig::new(MergeMethod::ActMat))?.checkpoint;
            let reports = negative_transfer_bound(
                act,
                &merged,
                &ts,
                &covs_true,
                &covs_hat,
                &scenario.tasks,
                LossKind::Norm,
                None,
            )?;
            let merged_net = ToyNetwork::from_checkpoint(&merged, act)?;
            let mut holds = true;
            let mut margin = f64::INFINITY;
            for (t, rep) in reports.iter().enumerate() {
                // norm loss: |‖f_merged(x)‖ − ‖f_t(x)‖| averaged over task t's inputs
                let data = &scenario.tasks[t];
                let a = merged_net.predict(&data.inputs);
                let b = outcomes[t].network.predict(&data.inputs);
                let expected = a
                    .column_iter()
                    .zip(b.column_iter())
                    .map(|(x, y)| (x.norm() - y.norm()).abs())
                    .sum::<f64>()
                    / a.ncols() as f64;
                margin = margin.min(rep.bound - expected);
                holds &= rep.beta == 1.0 && (rep.expected - expected).abs() <= 1e-12 * (1.0 + expected);
                holds &= expected <= rep.bound;
            }
            // With exact covariances the merge is the reference merge itself.
            let exact_ts = ts.clone().with_covariances(covs_true.clone())?;
            let exact_merged = merge(&exact_ts, &MergeConfig::new(MergeMethod::RegMean))?.checkpoint;
            let exact = negative_transfer_bound(
                act,
                &exact_merged,
                &ts,
                &covs_true,
                &covs_true,
                &scenario.tasks,
                LossKind::Norm,
                None,
            )?;
            let zero_cov = exact.iter().all(|rep| rep.covariance_term == 0.0);
            let exact_holds = exact.iter().all(|rep| rep.expected <= rep.bound);
            Ok((holds, zero_cov, exact_holds, margin))
        })();
        match run {
            Ok((holds, zero_cov, exact_holds, margin)) => {
                failures += usize::from(!holds);
                exact_nonzero += usize::from(!zero_cov);
                exact_fail += usize::from(!exact_holds);
                min_margin = min_margin.min(margin);
            }
            Err(_) => failures += 1,
        }
    }
    outcome(
        failures + exact_nonzero + exact_fail == 0,
        format!(
            "failures={failures}/50 nonzero_exact_cov_terms={exact_nonzero} exact_bound_failures={exact_fail} min_margin={min_margin:.2e}"
        ),
    )
}

/// Rank-`r` matrix with singular values in `[0.5, 2]` and its analytic pseudoinverse.
fn with_pinv(u: &M, v: &M, rng: &mut ChaCha8Rng) -> (M, M) {
    let r = u.ncols();
    let s: Vec<f64> = (0..r).map(|_| rng.random_range(0.5..2.0)).collect();
    let a = u * M::from_diagonal(&nalgebra::DVector::from_vec(s.clone())) * v.transpose();
    let inv = v * M::from_diagonal(&nalgebra::DVector::from_iterator(r, s.iter().map(|x| 1.0 / x))) * u.transpose();
    (a, inv)
}

fn pinv_perturbation() -> Outcome {
    let mut r = rng(8);
    let (mut failures, mut lib_failures) = (0, 0);
    for _ in 0..1000 {
        let (m, n) = (r.random_range(1..=6), r.random_range(1..=6));
        let full = m.min(n);
        let ra = r.random_range(1..=full);
        let (ua, va) = (orthonormal(&mut r, m, ra), orthonormal(&mut r, n, ra));
        let (a, pa) = with_pinv(&ua, &va, &mut r);
        let (b, pb) = if r.random_bool(0.5) {
            // nearby factors of the same rank
            let ub = orthonormal_near(&ua, &mut r);
            let vb = orthonormal_near(&va, &mut r);
            with_pinv(&ub, &vb, &mut r)
        } else {
            let rb = r.random_range(1..=full);
            let (ub, vb) = (orthonormal(&mut r, m, rb), orthonormal(&mut r, n, rb));
            with_pinv(&ub, &vb, &mut r)
        };
        let lhs = fro(&(&pa - &pb));
        let rhs = fro(&pa).powi(2).max(fro(&pb).powi(2)) * fro(&(&a - &b));
        failures += usize::from(lhs > rhs * (1.0 + 1e-12));
        match pinv_perturbation_sides(&a, &b, default_pinv_rtol(m, n) * 1e3) {
            Ok((l, rr)) => lib_failures += usize::from(l > rr * (1.0 + 1e-12) || (l - lhs).abs() > 1e-9 * (1.0 + lhs)),
            Err(_) => lib_failures += 1,
        }
    }
    outcome(
        failures + lib_failures == 0,
        format!("violations={failures}/1000 library_violations={lib_failures}/1000"),
    )
}

fn orthonormal_near(q: &M, rng: &mut ChaCha8Rng) -> M {
    let mut p = q + uniform(rng, q.nrows(), q.ncols()) * 0.05;
    for j in 0..p.ncols() {
        for i in 0..j {
            let proj = p.column(i).dot(&p.column(j));
            let ci = p.column(i).into_owned();
            p.column_mut(j).axpy(-proj, &ci, 1.0);
        }
        let norm = p.column(j).norm();
        p.column_mut(j).scale_mut(1.0 / norm);
    }
    p
}

/// Table of `(coefficient, power of T, power of N)` monomials per method.
fn monomials(method: MergeMethod) -> Vec<(i128, u32, u32)> {
    match method {
        MergeMethod::Average => vec![(1, 1, 2)],
        MergeMethod::TaskArithmetic => vec![(2, 1, 2), (1, 0, 2)],
        MergeMethod::RegMean => vec![(1, 1, 3), (3, 0, 3), (2, 1, 2), (-2, 0, 2)],
        MergeMethod::ActMat => vec![(2, 1, 3), (3, 0, 3), (3, 1, 2), (-2, 0, 2)],
        MergeMethod::IsoC => vec![(23, 0, 3), (2, 1, 2), (2, 0, 2), (1, 0, 1)],
        MergeMethod::Tsv => vec![(22, 1, 3), (45, 0, 3), (1, 1, 2), (3, 0, 2)],
    }
}

fn flop_formulas() -> Outcome {
    let (mut failures, mut total) = (0, 0);
    for t in 1..=8u64 {
        for n in [1u64, 10, 64, 512] {
            for method in MergeMethod::ALL {
                for l in [1u64, 100] {
                    total += 1;
                    let expected: i128 = monomials(method)
                        .iter()
                        .map(|&(c, pt, pn)| c * (t as i128).pow(pt) * (n as i128).pow(pn))
                        .sum();
                    let pre: i128 = if method == MergeMethod::RegMean {
                        (2 * l as i128 - 1) * t as i128 * (n as i128).pow(2)
                    } else {
                        0
                    };
                    let got = FlopModel::new(method, t, n, l).and_then(|m| m.flops());
                    failures += usize::from(
                        !matches!(got, Ok(c) if c.merge as i128 == expected && c.preprocess as i128 == pre),
                    );
                }
            }
        }
    }
    let examples = [
        (MergeMethod::Average, 3, 10, 1, 300, 0),
        (MergeMethod::ActMat, 2, 10, 1, 7400, 0),
        (MergeMethod::RegMean, 2, 10, 100, 5200, 39800),
    ];
    for (m, t, n, l, merge_flops, pre) in examples {
        total += 1;
        let got = FlopModel::new(m, t, n, l).and_then(|f| f.flops());
        failures += usize::from(!matches!(got, Ok(c) if c.merge == merge_flops && c.preprocess == pre));
    }
    outcome(failures == 0, format!("failures={failures}/{total}"))
}

fn bitwise_equal(a: &M, b: &M) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn actmat_definition() -> Outcome {
    let mut r = rng(10);
    let (mut failures, mut total) = (0, 0);
    for i in 0..200 {
        total += 1;
        let (m, k, t) = (r.random_range(1..=10), r.random_range(1..=10), r.random_range(1..=4));
        let w0 = uniform(&mut r, m, k);
        let deltas: Vec<M> = (0..t)
            .map(|j| {
                // some tasks get low-rank or zero updates
                match (i + j) % 4 {
                    0 => M::zeros(m, k),
                    1 => uniform(&mut r, m, 1) * uniform(&mut r, 1, k) * 0.1,
                    _ => uniform(&mut r, m, k) * 0.1,
                }
            })
            .collect();
        if deltas.iter().all(|d| d.iter().all(|&x| x == 0.0)) {
            total -= 1;
            continue;
        }
        let ws: Vec<M> = deltas.iter().map(|d| &w0 + d).collect();
        let cs: Vec<M> = deltas.iter().map(gram).collect();
        // gram must be ΔᵀΔ: exactly symmetric and equal to a plain triple loop
        let gram_ok = deltas.iter().zip(&cs).all(|(d, c)| {
            let naive = M::from_fn(k, k, |a, b| (0..m).map(|row| d[(row, a)] * d[(row, b)]).sum());
            c == &c.transpose() && fro(&(c - &naive)) <= 1e-13 * (1.0 + fro(&naive))
        });
        let same = match (merge_actmat(&ws, &deltas, None), merge_interference(&ws, &cs, None)) {
            (Ok(a), Ok(b)) => bitwise_equal(&a, &b),
            _ => false,
        };
        failures += usize::from(!(same && gram_ok));
    }
    // and through the checkpoint-level driver
    for i in 0..20 {
        total += 1;
        let (m, k) = (r.random_range(1..=8), r.random_range(1..=8));
        let w0 = uniform(&mut r, m, k);
        let mut pre = Checkpoint::new("pre");
        pre.insert("fc.weight", Tensor::from_matrix(&w0, DType::F64));
        let experts: Vec<Checkpoint> = (0..3)
            .map(|t| {
                let mut e = Checkpoint::new(format!("e{i}-{t}"));
                e.insert(
                    "fc.weight",
                    Tensor::from_matrix(&(&w0 + uniform(&mut r, m, k) * 0.1), DType::F64),
                );
                e
            })
            .collect();
        let ws: Vec<M> = experts.iter().map(|e| e.matrix("fc.weight").unwrap()).collect();
        let cs: Vec<M> = ws.iter().map(|w| gram(&(w - &w0))).collect();
        let direct = merge_interference(&ws, &cs, None);
        let ts = TaskSet::new(pre, experts).unwrap();
        let via = merge(&ts, &MergeConfig::new(MergeMethod::ActMat)).and_then(|o| o.checkpoint.matrix("fc.weight"));
        failures += usize::from(!matches!((direct, via), (Ok(a), Ok(b)) if bitwise_equal(&a, &b)));
    }
    outcome(failures == 0, format!("failures={failures}/{total}"))
}

fn toy_quality_ordering() -> Outcome {
    let (mut actmat_wins, mut regmean_wins, mut errors) = (0, 0, 0);
    let mut rows = Vec::new();
    for seed in 0..20u64 {
        let spec = ScenarioSpec {
            seed,
            num_tasks: 3,
            ..ScenarioSpec::default()
        };
        let run = (|| -> actmat::Result<(f64, f64, f64)> {
            let scenario = scenario_from_spec(&spec)?;
            let outcomes = train_all(&scenario, &[])?;
            let pre = scenario.pretrained.to_checkpoint("pretrained");
            let covs = outcomes
                .iter()
                .zip(&scenario.tasks)
                .enumerate()
                .map(|(t, (o, d))| empirical_bundle(&o.network, &d.inputs, &format!("expert-{t}")))
                .collect::<actmat::Result<Vec<_>>>()?;
            let ts =
                TaskSet::new(pre, outcomes.iter().map(|o| o.checkpoint.clone()).collect())?.with_covariances(covs)?;
            let mean_loss = |method| -> actmat::Result<f64> {
                let merged = merge(&ts, &MergeConfig::new(method))?.checkpoint;
                let net = ToyNetwork::from_checkpoint(&merged, spec.activation)?;
                let total: f64 = scenario
                    .tasks
                    .iter()
                    .map(|d| {
                        let resid = net.predict(&d.inputs) - &d.targets;
                        resid.iter().map(|v| v * v).sum::<f64>() / resid.ncols() as f64
                    })
                    .sum();
                Ok(total / scenario.tasks.len() as f64)
            };
            Ok((
                mean_loss(MergeMethod::Average)?,
                mean_loss(MergeMethod::ActMat)?,
                mean_loss(MergeMethod::RegMean)?,
            ))
        })();
        match run {
            Ok((avg, act, reg)) => {
                actmat_wins += usize::from(act <= avg);
                regmean_wins += usize::from(reg <= avg && reg <= act);
                rows.push((avg, act, reg));
            }
            Err(_) => errors += 1,
        }
    }
    let med = |f: fn(&(f64, f64, f64)) -> f64| {
        let mut v: Vec<f64> = rows.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.get(v.len() / 2).copied().unwrap_or(f64::NAN)
    };
    outcome(
        errors == 0 && actmat_wins >= 14 && regmean_wins >= 14,
        format!(
            "actmat_le_average={actmat_wins}/20 regmean_le_both={regmean_wins}/20 errors={errors} median_loss average={:.4} actmat={:.4} regmean={:.4}",
            med(|r| r.0),
            med(|r| r.1),
            med(|r| r.2)
        ),
    )
}

/// Singular values of `a` from the eigenvalues of its smaller Gram matrix.
fn singular_values(a: &M) -> Vec<f64> {
    let g = if a.nrows() <= a.ncols() {
        a * a.transpose()
    } else {
        a.transpose() * a
    };
    let mut s: Vec<f64> = g
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

fn spectral_structure() -> Outcome {
    let mut r = rng(12);
    let (mut iso_fail, mut tsv_fail) = (0, 0);
    let (mut iso_worst, mut tsv_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let (m, k, t) = (r.random_range(1..=12), r.random_range(1..=12), r.random_range(1..=4));
        let w0 = uniform(&mut r, m, k);
        let deltas: Vec<M> = (0..t).map(|_| uniform(&mut r, m, k)).collect();
        match merge_iso_c(&w0, &deltas, 1.0) {
            Ok(w) => {
                let s = singular_values(&(w - &w0));
                let spread = s[0] - s[s.len() - 1];
                iso_worst = iso_worst.max(spread);
                iso_fail += usize::from(spread > 1e-9);
            }
            Err(_) => iso_fail += 1,
        }
        // more than min(m, k) orthonormal columns cannot exist, so draw
        // TSV inputs with T ≤ min(m, k)
        let (m, k) = (r.random_range(t..=12), r.random_range(t..=12));
        let deltas: Vec<M> = (0..t).map(|_| uniform(&mut r, m, k)).collect();
        match tsv_factors(&deltas, 1.0) {
            Ok(f) if !f.over_budget => {
                let err = [&f.u, &f.v]
                    .iter()
                    .map(|q| (q.transpose() * *q - M::identity(q.ncols(), q.ncols())).abs().max())
                    .fold(0.0, f64::max);
                tsv_worst = tsv_worst.max(err);
                tsv_fail += usize::from(err > 1e-9);
            }
            _ => tsv_fail += 1,
        }
    }
    outcome(
        iso_fail + tsv_fail == 0,
        format!(
            "iso_c_failures={iso_fail}/100 worst_spread={iso_worst:.2e} tsv_failures={tsv_fail}/100 worst_gram_error={tsv_worst:.2e}"
        ),
    )
}

/// Checkpoint with edge-case values: NaN payloads, signed zeros, infinities, subnormals.
fn random_checkpoint(r: &mut ChaCha8Rng, name: &str) -> Checkpoint {
    let specials64 = [
        f64::NAN,
        -0.0,
        0.0,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::MIN_POSITIVE / 8.0,
        f64::MAX,
    ];
    let specials32 = [
        f32::NAN,
        -0.0,
        f32::INFINITY,
        f32::MIN_POSITIVE / 8.0,
        f32::MAX,
        f32::from_bits(0x7fc0_1234),
    ];
    let mut c = Checkpoint::new(name);
    for i in 0..r.random_range(0..7) {
        let ndim = r.random_range(0..4);
        let shape: Vec<usize> = (0..ndim).map(|_| r.random_range(0..6)).collect();
        let numel: usize = shape.iter().product();
        let tensor = if r.random_bool(0.5) {
            let v: Vec<f64> = (0..numel)
                .map(|_| {
                    if r.random_bool(0.1) {
                        specials64[r.random_range(0..specials64.len())]
                    } else {
                        f64::from_bits(r.random::<u64>() & !(0x7ff << 52) | (r.random_range(900u64..1100) << 52))
                    }
                })
                .collect();
            Tensor::new(shape, actmat::tensor_store::TensorData::F64(v))
        } else {
            let v: Vec<f32> = (0..numel)
                .map(|_| {
                    if r.random_bool(0.1) {
                        specials32[r.random_range(0..specials32.len())]
                    } else {
                        r.random_range(-1e6f32..1e6)
                    }
                })
                .collect();
            Tensor::new(shape, actmat::tensor_store::TensorData::F32(v))
        };
        c.insert(
            format!("layers.{i}.{}", ["weight", "bias", "ln.gamma"][i % 3]),
            tensor.unwrap(),
        );
    }
    if r.random_bool(0.5) {
        c.metadata
            .insert("origin".into(), format!("draw {}", r.random::<u32>()));
    }
    c
}

fn checkpoint_round_trip() -> Outcome {
    let mut r = rng(13);
    let dir = tempfile::tempdir().expect("temp dir");
    let mut failures = 0;
    for i in 0..100 {
        let name = format!("ckpt-{i}");
        let c = random_checkpoint(&mut r, &name);
        let path = dir.path().join(format!("{name}.ckpt.st"));
        let again = dir.path().join(format!("{name}.copy.st"));
        let ok = save_checkpoint(&c, &path).is_ok()
            && matches!(load_checkpoint(&path), Ok(ref back) if *back == c
                && save_checkpoint(back, &again).is_ok()
                && std::fs::read(&path).ok() == std::fs::read(&again).ok());
        failures += usize::from(!ok);
    }
    outcome(failures == 0, format!("failures={failures}/100"))
}

fn main() {
    let criteria: [Criterion; 13] = [
        ("closed_form_matches_descent", closed_form_matches_descent),
        ("stationarity", stationarity),
        ("minimum_norm_solution", minimum_norm_solution),
        ("covariance_scale_invariance", covariance_scale_invariance),
        ("estimation_triangle_bound", triangle_bound),
        ("single_step_proportionality", single_step_proportionality),
        ("negative_transfer_bound", negative_transfer),
        ("pinv_perturbation", pinv_perturbation),
        ("flop_formulas", flop_formulas),
        ("actmat_definition", actmat_definition),
        ("toy_quality_ordering", toy_quality_ordering),
        ("spectral_structure", spectral_structure),
        ("checkpoint_round_trip", checkpoint_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "{status} criterion {:>2} {name}: {} ({:.2}s)",
            i + 1,
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
