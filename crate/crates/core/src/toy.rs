//! Desk-scale fine-tuning scenarios.
//!
//! A scenario is a shared pretrained MLP plus `T` regression tasks whose
//! labels come from teacher networks of the same architecture. Each task is
//! fine-tuned with full-batch gradient descent, optionally recording the
//! per-iteration layer inputs `z` and output gradients `g` of chosen layers.
//!
//! Networks are bias-free: linear layers `layers.{i}.weight` separated by
//! an elementwise activation. Samples are stored as matrix columns.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cov::{empirical_covariance, CovSource, CovarianceBundle};
use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, Matrix};
use crate::tensor_store::{Checkpoint, DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

pub fn layer_name(i: usize) -> String {
    format!("layers.{i}.weight")
}

/// A bias-free MLP. `weights[i]` maps width `i` to width `i + 1`; the
/// activation follows every linear layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork {
    pub weights: Vec<Matrix>,
    pub activation: Activation,
}

/// Forward-pass intermediates for a batch.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input of each linear layer, `inputs[0]` being the batch itself.
    pub inputs: Vec<Matrix>,
    /// Pre-activation output of each linear layer.
    pub outputs: Vec<Matrix>,
}

impl ForwardPass {
    pub fn prediction(&self) -> &Matrix {
        self.outputs.last().expect("non-empty network")
    }
}

impl ToyNetwork {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.weights[0].ncols()];
        w.extend(self.weights.iter().map(|m| m.nrows()));
        w
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn forward(&self, x: &Matrix) -> ForwardPass {
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut outputs = Vec::with_capacity(self.weights.len());
        let mut z = x.clone();
        for (i, w) in self.weights.iter().enumerate() {
            let y = w * &z;
            inputs.push(z);
            z = if i + 1 < self.weights.len() {
                y.map(|v| self.activation.apply(v))
            } else {
                y.clone()
            };
            outputs.push(y);
        }
        ForwardPass { inputs, outputs }
    }

    pub fn predict(&self, x: &Matrix) -> Matrix {
        self.forward(x).outputs.pop().expect("non-empty network")
    }

    /// Per-sample gradients of `‖y − t‖²` with respect to every layer output.
    fn backward(&self, pass: &ForwardPass, targets: &Matrix) -> Vec<Matrix> {
        let n = self.weights.len();
        let mut grads = vec![Matrix::zeros(0, 0); n];
        grads[n - 1] = (pass.prediction() - targets) * 2.0;
        for l in (0..n - 1).rev() {
            let mut g = self.weights[l + 1].tr_mul(&grads[l + 1]);
            g.zip_apply(&pass.outputs[l], |gv, y| *gv *= self.activation.derivative(y));
            grads[l] = g;
        }
        grads
    }

    pub fn to_checkpoint(&self, name: &str) -> Checkpoint {
        let mut c = Checkpoint::new(name);
        c.metadata.insert("activation".into(), self.activation.as_str().into());
        for (i, w) in self.weights.iter().enumerate() {
            c.insert(layer_name(i), Tensor::from_matrix(w, DType::F64));
        }
        c
    }

    /// Reads `layers.{i}.weight` for consecutive `i` starting at zero.
    pub fn from_checkpoint(ckpt: &Checkpoint, activation: Activation) -> Result<Self> {
        let mut weights = Vec::new();
        while let Some(t) = ckpt.get(&layer_name(weights.len())) {
            weights.push(t.to_matrix()?);
        }
        if weights.is_empty() || weights.len() != ckpt.tensors.len() {
            return Err(Error::InvalidInput(format!(
                "checkpoint {:?} is not a layers.{{i}}.weight MLP",
                ckpt.name
            )));
        }
        for (i, pair) in weights.windows(2).enumerate() {
            if pair[1].ncols() != pair[0].nrows() {
                return Err(Error::Shape(format!(
                    "{} outputs {} values but {} expects {}",
                    layer_name(i),
                    pair[0].nrows(),
                    layer_name(i + 1),
                    pair[1].ncols()
                )));
            }
        }
        Ok(ToyNetwork { weights, activation })
    }

    /// Mean over the batch of `‖f(x) − t‖²`.
    pub fn mse(&self, inputs: &Matrix, targets: &Matrix) -> f64 {
        let diff = self.predict(inputs) - targets;
        diff.norm_squared() / inputs.ncols() as f64
    }
}

fn default_seed() -> u64 {
    0
}
fn default_tasks() -> usize {
    3
}
fn default_widths() -> Vec<usize> {
    vec![16, 16, 16]
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_samples() -> usize {
    64
}
fn default_eta() -> f64 {
    0.05
}
fn default_steps() -> usize {
    100
}
fn default_noise() -> f64 {
    0.01
}
fn default_teacher_shift() -> f64 {
    0.5
}
fn default_input_decay() -> f64 {
    0.6
}

/// Generative description of a scenario; serializes to TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_tasks")]
    pub num_tasks: usize,
    /// Layer widths including input and output, e.g. `[8, 16, 4]`.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_samples")]
    pub samples_per_task: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Number of GD updates applied during fine-tuning.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Standard deviation of the Gaussian label noise.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Relative size of each teacher's offset from the pretrained weights.
    #[serde(default = "default_teacher_shift")]
    pub teacher_shift: f64,
    /// Input standard deviations along a task's principal axes are `decay^i`.
    #[serde(default = "default_input_decay")]
    pub input_decay: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            seed: default_seed(),
            num_tasks: default_tasks(),
            widths: default_widths(),
            activation: default_activation(),
            samples_per_task: default_samples(),
            eta: default_eta(),
            steps: default_steps(),
            noise_sigma: default_noise(),
            teacher_shift: default_teacher_shift(),
            input_decay: default_input_decay(),
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::InvalidInput("num_tasks must be at least 1".into()));
        }
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "widths must list at least two positive sizes, got {:?}",
                self.widths
            )));
        }
        if self.samples_per_task == 0 {
            return Err(Error::InvalidInput("samples_per_task must be positive".into()));
        }
        for (name, v) in [
            ("eta", self.eta),
            ("noise_sigma", self.noise_sigma),
            ("teacher_shift", self.teacher_shift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.input_decay > 0.0 && self.input_decay <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "input_decay must lie in (0, 1], got {}",
                self.input_decay
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    /// `widths[0] × samples` inputs.
    pub inputs: Matrix,
    /// `widths[last] × samples` noisy teacher outputs.
    pub targets: Matrix,
    pub teacher: ToyNetwork,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScenario {
    pub spec: ScenarioSpec,
    pub pretrained: ToyNetwork,
    pub tasks: Vec<TaskData>,
}

fn gaussian(rng: &mut ChaCha8Rng, m: usize, n: usize, std: f64) -> Matrix {
    Matrix::from_fn(m, n, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    gaussian(rng, n, n, 1.0).qr().q()
}

/// Draws a scenario from its spec; identical specs give identical scenarios.
pub fn scenario_from_spec(spec: &ScenarioSpec) -> Result<ToyScenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let init = |rng: &mut ChaCha8Rng| -> Vec<Matrix> {
        spec.widths
            .windows(2)
            .map(|w| gaussian(rng, w[1], w[0], 1.0 / (w[0] as f64).sqrt()))
            .collect()
    };
    let pretrained = ToyNetwork {
        weights: init(&mut rng),
        activation: spec.activation,
    };
    let d_in = spec.widths[0];
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for _ in 0..spec.num_tasks {
        let offsets = init(&mut rng);
        let teacher = ToyNetwork {
            weights: pretrained
                .weights
                .iter()
                .zip(&offsets)
                .map(|(w, o)| w + o * spec.teacher_shift)
                .collect(),
            activation: spec.activation,
        };
        // anisotropic inputs: a task-specific rotation of a decaying spectrum
        let rotation = random_orthogonal(&mut rng, d_in);
        let scales = Matrix::from_diagonal(&nalgebra::DVector::from_fn(d_in, |i, _| {
            spec.input_decay.powi(i as i32)
        }));
        let latent = gaussian(&mut rng, d_in, spec.samples_per_task, 1.0);
        let inputs = rotation * scales * latent;
        let clean = teacher.predict(&inputs);
        let noise = gaussian(&mut rng, clean.nrows(), clean.ncols(), spec.noise_sigma);
        tasks.push(TaskData {
            inputs,
            targets: clean + noise,
            teacher,
        });
    }
    Ok(ToyScenario {
        spec: spec.clone(),
        pretrained,
        tasks,
    })
}

/// Scenario with default hyperparameters and the given seed, task count and widths.
pub fn generate_scenario(seed: u64, num_tasks: usize, widths: &[usize]) -> Result<ToyScenario> {
    scenario_from_spec(&ScenarioSpec {
        seed,
        num_tasks,
        widths: widths.to_vec(),
        ..ScenarioSpec::default()
    })
}

/// Full-batch `(z, g)` pairs of one GD iteration, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceIteration {
    pub z: Matrix,
    pub g: Matrix,
}

/// Record of one layer during fine-tuning.
///
/// `iterations[k]` holds the pairs that produced update `k`, and
/// `weight_snapshots[k]` is the weight before that update, so there is one
/// more snapshot than iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub layer: String,
    pub eta: f64,
    pub iterations: Vec<TraceIteration>,
    pub weight_snapshots: Vec<Matrix>,
}

impl TrainTrace {
    /// `−η Σ_k mean(g zᵀ)`.
    pub fn delta_from_gradients(&self) -> Matrix {
        let w0 = &self.weight_snapshots[0];
        let mut acc = Matrix::zeros(w0.nrows(), w0.ncols());
        for it in &self.iterations {
            acc += (&it.g * it.z.transpose()) / it.z.ncols() as f64;
        }
        acc * -self.eta
    }

    /// `W^(K+1) − W^(0)`.
    pub fn delta(&self) -> Matrix {
        self.weight_snapshots.last().unwrap() - &self.weight_snapshots[0]
    }

    /// Relative Frobenius gap between the two delta reconstructions.
    pub fn gd_consistency_error(&self) -> f64 {
        let (a, b) = (self.delta(), self.delta_from_gradients());
        let gap = frobenius_norm(&(&a - &b));
        let scale = frobenius_norm(&a).max(frobenius_norm(&b));
        if scale == 0.0 {
            gap
        } else {
            gap / scale
        }
    }
}

const TRACE_PREFIX: &str = "trace/";

/// Packs traces as `trace/<layer>/{z,g}/<k>` and `trace/<layer>/w/<k>` tensors.
pub fn traces_to_checkpoint(traces: &BTreeMap<String, TrainTrace>, name: &str) -> Checkpoint {
    let mut c = Checkpoint::new(name);
    for (layer, tr) in traces {
        c.metadata
            .insert(format!("{TRACE_PREFIX}{layer}/eta"), format!("{:e}", tr.eta));
        c.metadata.insert(
            format!("{TRACE_PREFIX}{layer}/iterations"),
            tr.iterations.len().to_string(),
        );
        for (k, it) in tr.iterations.iter().enumerate() {
            c.insert(
                format!("{TRACE_PREFIX}{layer}/z/{k:06}"),
                Tensor::from_matrix(&it.z, DType::F64),
            );
            c.insert(
                format!("{TRACE_PREFIX}{layer}/g/{k:06}"),
                Tensor::from_matrix(&it.g, DType::F64),
            );
        }
        for (k, w) in tr.weight_snapshots.iter().enumerate() {
            c.insert(
                format!("{TRACE_PREFIX}{layer}/w/{k:06}"),
                Tensor::from_matrix(w, DType::F64),
            );
        }
    }
    c
}

pub fn traces_from_checkpoint(ckpt: &Checkpoint) -> Result<BTreeMap<String, TrainTrace>> {
    let mut out = BTreeMap::new();
    for (key, value) in &ckpt.metadata {
        let Some(layer) = key.strip_prefix(TRACE_PREFIX).and_then(|k| k.strip_suffix("/eta")) else {
            continue;
        };
        let eta: f64 = value
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad eta {value:?} for trace {layer:?}")))?;
        let count: usize = ckpt
            .metadata
            .get(&format!("{TRACE_PREFIX}{layer}/iterations"))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::InvalidInput(format!("trace {layer:?} lacks an iteration count")))?;
        let fetch = |kind: &str, k: usize| -> Result<Matrix> {
            let name = format!("{TRACE_PREFIX}{layer}/{kind}/{k:06}");
            ckpt.get(&name)
                .ok_or_else(|| Error::InvalidInput(format!("missing trace tensor {name:?}")))?
                .to_matrix()
        };
        let iterations = (0..count)
            .map(|k| {
                Ok(TraceIteration {
                    z: fetch("z", k)?,
                    g: fetch("g", k)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let weight_snapshots = (0..=count).map(|k| fetch("w", k)).collect::<Result<Vec<_>>>()?;
        out.insert(
            layer.to_string(),
            TrainTrace {
                layer: layer.to_string(),
                eta,
                iterations,
                weight_snapshots,
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: ToyNetwork,
    pub checkpoint: Checkpoint,
    pub traces: BTreeMap<String, TrainTrace>,
    /// Mean training loss before each update and after the last one.
    pub losses: Vec<f64>,
}

/// Fine-tunes the pretrained network on one task with full-batch GD.
///
/// Every update is `W ← W − η · mean(g zᵀ)` for all layers at once, where
/// `g` is the per-sample gradient of `‖f(x) − t‖²` at the layer output.
pub fn train_full_batch(scenario: &ToyScenario, task: usize, capture: &[String]) -> Result<TrainOutcome> {
    let data = scenario
        .tasks
        .get(task)
        .ok_or_else(|| Error::InvalidInput(format!("task {task} out of range for {} tasks", scenario.tasks.len())))?;
    let mut net = scenario.pretrained.clone();
    let layer_index = |name: &String| {
        (0..net.num_layers())
            .find(|&i| layer_name(i) == *name)
            .ok_or_else(|| Error::InvalidInput(format!("no layer named {name:?} to capture")))
    };
    let captured: Vec<(String, usize)> = capture
        .iter()
        .map(|n| Ok((n.clone(), layer_index(n)?)))
        .collect::<Result<_>>()?;
    let eta = scenario.spec.eta;
    let mut traces: BTreeMap<String, TrainTrace> = captured
        .iter()
        .map(|(name, i)| {
            (
                name.clone(),
                TrainTrace {
                    layer: name.clone(),
                    eta,
                    iterations: Vec::new(),
                    weight_snapshots: vec![net.weights[*i].clone()],
                },
            )
        })
        .collect();

    let samples = data.inputs.ncols() as f64;
    let mut losses = Vec::with_capacity(scenario.spec.steps + 1);
    for k in 0..scenario.spec.steps {
        let pass = net.forward(&data.inputs);
        let loss = (pass.prediction() - &data.targets).norm_squared() / samples;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("training diverged at iteration {k}")));
        }
        losses.push(loss);
        let grads = net.backward(&pass, &data.targets);
        for (name, i) in &captured {
            traces.get_mut(name).unwrap().iterations.push(TraceIteration {
                z: pass.inputs[*i].clone(),
                g: grads[*i].clone(),
            });
        }
        for (l, w) in net.weights.iter_mut().enumerate() {
            let step = (&grads[l] * pass.inputs[l].transpose()) / samples;
            *w -= step * eta;
        }
        if net.weights.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("training diverged at iteration {k}")));
        }
        for (name, i) in &captured {
            traces
                .get_mut(name)
                .unwrap()
                .weight_snapshots
                .push(net.weights[*i].clone());
        }
    }
    let final_loss = net.mse(&data.inputs, &data.targets);
    if !final_loss.is_finite() {
        return Err(Error::Numerical(format!(
            "training diverged at iteration {}",
            scenario.spec.steps
        )));
    }
    losses.push(final_loss);
    let checkpoint = net.to_checkpoint(&format!("expert-{task}"));
    Ok(TrainOutcome {
        network: net,
        checkpoint,
        traces,
        losses,
    })
}

/// Trains every task independently, in parallel.
pub fn train_all(scenario: &ToyScenario, capture: &[String]) -> Result<Vec<TrainOutcome>> {
    (0..scenario.tasks.len())
        .into_par_iter()
        .map(|t| train_full_batch(scenario, t, capture))
        .collect()
}

/// Empirical second moments of every linear layer's inputs under `net`.
pub fn empirical_bundle(net: &ToyNetwork, inputs: &Matrix, task_id: &str) -> Result<CovarianceBundle> {
    let pass = net.forward(inputs);
    let mut layer_covs = BTreeMap::new();
    for (i, z) in pass.inputs.iter().enumerate() {
        let cols: Vec<&[f64]> = (0..z.ncols())
            .map(|j| {
                let start = j * z.nrows();
                &z.as_slice()[start..start + z.nrows()]
            })
            .collect();
        layer_covs.insert(layer_name(i), empirical_covariance(&cols, z.nrows())?);
    }
    Ok(CovarianceBundle {
        task_id: task_id.to_string(),
        layer_covs,
        source: CovSource::Empirical,
        sample_count: Some(inputs.ncols()),
    })
}

fn power_iteration_lambda_max(a: &Matrix) -> f64 {
    let n = a.nrows();
    let mut v = nalgebra::DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-14 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max((a * &v).norm())
}

/// Gradient descent on `Σ_t tr((W − W_t) C_t (W − W_t)ᵀ)` from `W = 0`.
///
/// Stops once `‖∇‖_F ≤ 1e-10`. The default step is `0.9 / λ_max(Σ C_t)`.
pub fn brute_force_minimizer(ws: &[Matrix], cs: &[Matrix], max_steps: usize, lr: Option<f64>) -> Result<Matrix> {
    if ws.is_empty() || ws.len() != cs.len() {
        return Err(Error::InvalidInput(format!(
            "{} weight matrices and {} covariances",
            ws.len(),
            cs.len()
        )));
    }
    let (m, n) = ws[0].shape();
    if ws.iter().any(|w| w.shape() != (m, n)) || cs.iter().any(|c| c.shape() != (n, n)) {
        return Err(Error::Shape("brute-force minimizer: inconsistent shapes".into()));
    }
    let mut a = cs[0].clone();
    let mut b = &ws[0] * &cs[0];
    for (w, c) in ws.iter().zip(cs).skip(1) {
        a += c;
        b += w * c;
    }
    let lr = match lr {
        Some(lr) => lr,
        None => {
            let lambda = power_iteration_lambda_max(&a);
            if lambda == 0.0 {
                return Ok(Matrix::zeros(m, n));
            }
            0.9 / lambda
        }
    };
    let mut w = Matrix::zeros(m, n);
    for _ in 0..max_steps {
        let grad = (&w * &a - &b) * 2.0;
        if grad.norm() <= 1e-10 {
            return Ok(w);
        }
        w -= grad * lr;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("brute-force minimizer diverged".into()));
        }
    }
    let grad = (&w * &a - &b) * 2.0;
    if grad.norm() <= 1e-10 {
        return Ok(w);
    }
    Err(Error::Numerical(format!(
        "brute-force minimizer did not converge in {max_steps} steps (gradient norm {:e})",
        grad.norm()
    )))
}

/// Uniform random matrix in `[-1, 1)`, for tests and synthetic benchmarks.
pub fn uniform_matrix(rng: &mut impl Rng, m: usize, n: usize) -> Matrix {
    Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
}
