//! Wall-clock timing of merge rules.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cov::{gram, CovSource, CovarianceBundle};
use crate::error::{Error, Result};
use crate::flops::expensive_ops;
use crate::merge::{merge, MergeConfig, MergeMethod, TaskSet};
use crate::stats::Quantiles;
use crate::tensor_store::{Checkpoint, DType, Tensor};
use crate::toy::uniform_matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    /// The method name as requested.
    pub method: String,
    pub repeats: usize,
    /// Seconds per merge; `None` when the method failed.
    pub timing: Option<Quantiles>,
    /// SVD/inverse calls per layer, when the method is known.
    pub expensive_ops: Option<u64>,
    pub error: Option<String>,
}

impl BenchRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Times `repeats` in-memory merges per method. A method that fails to
/// parse or merge yields a failed row; the others still run.
pub fn bench(ts: &TaskSet, methods: &[String], repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::InvalidInput("repeats must be at least 1".into()));
    }
    let t = ts.num_tasks() as u64;
    Ok(methods
        .iter()
        .map(|name| {
            let failed = |ops, error: Error| BenchRow {
                method: name.clone(),
                repeats,
                timing: None,
                expensive_ops: ops,
                error: Some(error.to_string()),
            };
            let method: MergeMethod = match name.parse() {
                Ok(m) => m,
                Err(e) => return failed(None, e),
            };
            let ops = Some(expensive_ops(method, t));
            let cfg = MergeConfig::new(method);
            let mut seconds = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let start = Instant::now();
                let out = merge(ts, &cfg);
                let elapsed = start.elapsed().as_secs_f64();
                if let Err(e) = out {
                    log::warn!("bench: {name} failed: {e}");
                    return failed(ops, e);
                }
                seconds.push(elapsed);
            }
            BenchRow {
                method: name.clone(),
                repeats,
                timing: Quantiles::of(&seconds),
                expensive_ops: ops,
                error: None,
            }
        })
        .collect())
}

pub const BENCH_CSV_HEADER: [&str; 9] = [
    "method",
    "status",
    "repeats",
    "median_seconds",
    "iqr_seconds",
    "q25_seconds",
    "q75_seconds",
    "expensive_ops",
    "error",
];

pub fn write_bench_csv<W: Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let err = |e: csv::Error| Error::InvalidInput(format!("csv output failed: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCH_CSV_HEADER).map_err(err)?;
    for r in rows {
        let q = r.timing;
        let num = |f: fn(&Quantiles) -> f64| q.as_ref().map(|q| f(q).to_string()).unwrap_or_default();
        w.write_record([
            r.method.clone(),
            if r.failed() { "failed" } else { "ok" }.to_string(),
            r.repeats.to_string(),
            num(|q| q.median),
            num(|q| q.iqr()),
            num(|q| q.q25),
            num(|q| q.q75),
            r.expensive_ops.map(|v| v.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidInput(format!("csv output failed: {e}")))
}

/// A pretrained `n × n` layer, `t` experts with small random offsets, and
/// one full-rank input covariance per expert so that RegMean can run.
pub fn synthetic_task_set(seed: u64, t: usize, n: usize) -> Result<TaskSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = uniform_matrix(&mut rng, n, n);
    let mut pre = Checkpoint::new("pretrained");
    pre.insert("layer.weight", Tensor::from_matrix(&w0, DType::F32));
    let experts = (0..t)
        .map(|i| {
            let mut e = Checkpoint::new(format!("expert-{i}"));
            let w = &w0 + uniform_matrix(&mut rng, n, n) * 0.05;
            e.insert("layer.weight", Tensor::from_matrix(&w, DType::F32));
            e
        })
        .collect::<Vec<_>>();
    let covs = (0..t)
        .map(|i| {
            let x = uniform_matrix(&mut rng, n, n);
            CovarianceBundle {
                task_id: format!("expert-{i}"),
                layer_covs: [("layer.weight".to_string(), gram(&x) / n as f64)].into(),
                source: CovSource::Empirical,
                sample_count: Some(n),
            }
        })
        .collect();
    TaskSet::new(pre, experts)?.with_covariances(covs)
}
