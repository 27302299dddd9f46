use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use actmat::bench::{bench, synthetic_task_set, write_bench_csv};
use actmat::config::{require_existing, RunConfig};
use actmat::cov::{actmat_bundle, kappa_ratio_table, CovarianceBundle};
use actmat::diagnostics::{
    accumulate_estimation_terms, covariance_alignment, estimation_error_report, negative_transfer_bound,
    pearson_activation_gradnorm, write_drift_csv, write_estimation_csv, write_kappa_csv, write_pearson_csv,
    write_transfer_csv, LossKind, Record,
};
use actmat::flops::FlopModel;
use actmat::merge::{merge, MergeConfig, MergeMethod, TaskSet};
use actmat::tensor_store::{compute_task_vector, load_checkpoint, save_checkpoint, Checkpoint, DType, Tensor};
use actmat::toy::{
    empirical_bundle, layer_name, scenario_from_spec, traces_from_checkpoint, traces_to_checkpoint, train_all,
    Activation, ScenarioSpec, TaskData, ToyNetwork,
};
use actmat::verify::run_suite;
use actmat::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(
    name = "actmat",
    version,
    about = "Layer-wise interference-minimization model merging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge fine-tuned checkpoints that share a pretrained checkpoint.
    Merge(MergeArgs),
    /// Report covariance-estimation and negative-transfer diagnostics for a toy run.
    Diagnose(DiagnoseArgs),
    /// Generate a toy scenario and fine-tune one expert per task.
    TrainToy(TrainToyArgs),
    /// Run the seeded invariant suite and print PASS/FAIL per property.
    Verify(VerifyArgs),
    /// Time merge rules on a synthetic task set.
    Bench(BenchArgs),
    /// Print the closed-form FLOP count of a merge.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Expert checkpoint; repeat once per task.
    #[arg(long = "expert")]
    experts: Vec<PathBuf>,
    /// Covariance bundle file (required for regmean).
    #[arg(long)]
    covariances: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    pinv_rtol: Option<f64>,
    #[arg(long)]
    tsv_rank_fraction: Option<f64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `train-toy`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Where to write CSV tables; omitted means no CSV output.
    #[arg(long)]
    csv_dir: Option<PathBuf>,
    /// `norm` or `mse`.
    #[arg(long)]
    loss: Option<String>,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tasks: Option<usize>,
    /// Comma-separated layer widths, e.g. `8,16,4`.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    /// `tanh`, `relu` or `identity`.
    #[arg(long)]
    activation: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Number of synthetic experts.
    #[arg(long)]
    tasks: Option<usize>,
    /// Side length of the synthetic square layer.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the table here instead of standard output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    method: String,
    #[arg(long)]
    t: u64,
    #[arg(long)]
    n: u64,
    /// Covariance sample count, used by regmean preprocessing.
    #[arg(long, default_value_t = 1)]
    l: u64,
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) => (EXIT_USAGE, "config"),
            Error::Numerical(_) => (EXIT_NUMERICAL, "numerical"),
            Error::Io { .. } => (EXIT_INPUT, "io"),
            Error::Format { .. } => (EXIT_INPUT, "format"),
            Error::Shape(_) => (EXIT_INPUT, "shape"),
            Error::Incompatible { .. } => (EXIT_INPUT, "incompatible"),
            Error::InvalidInput(_) => (EXIT_INPUT, "input"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure {
            code: EXIT_INPUT,
            kind: "io",
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(path: &Option<PathBuf>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) if !p.is_file() => Err(Failure::usage(format!("config file {} does not exist", p.display()))),
        Some(p) => Ok(RunConfig::load(p)?),
    }
}

fn required<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| Failure::usage(format!("missing required setting --{flag}")))
}

fn stdout_line(out: &mut impl Write, line: &str) -> CliResult<()> {
    writeln!(out, "{line}")?;
    Ok(())
}

/// Pairs bundles with experts by task id, falling back to file order.
fn align_bundles(bundles: Vec<CovarianceBundle>, experts: &[Checkpoint]) -> CliResult<Vec<CovarianceBundle>> {
    let mut by_id: BTreeMap<String, CovarianceBundle> =
        bundles.iter().map(|b| (b.task_id.clone(), b.clone())).collect();
    let named: Option<Vec<CovarianceBundle>> = experts.iter().map(|e| by_id.remove(&e.name)).collect();
    match named {
        Some(v) => Ok(v),
        None if bundles.len() == experts.len() => {
            log::warn!("covariance task ids do not match expert names; pairing by order");
            Ok(bundles)
        }
        None => Err(Failure::from(Error::InvalidInput(format!(
            "{} covariance bundles for {} experts",
            bundles.len(),
            experts.len()
        )))),
    }
}

fn cmd_merge(args: MergeArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?.merge;
    let pretrained = required(args.pretrained.or(cfg.pretrained), "pretrained")?;
    let experts = if args.experts.is_empty() {
        cfg.experts
    } else {
        args.experts
    };
    if experts.is_empty() {
        return Err(Failure::usage("missing required setting --expert"));
    }
    let output = required(args.output.or(cfg.output), "output")?;
    let covariances = args.covariances.or(cfg.covariances);
    let method: MergeMethod = required(args.method.or(cfg.method), "method")?.parse()?;

    let mut inputs: Vec<&Path> = vec![pretrained.as_path()];
    inputs.extend(experts.iter().map(PathBuf::as_path));
    inputs.extend(covariances.as_deref());
    require_existing(inputs).map_err(|e| Failure {
        code: EXIT_INPUT,
        kind: "io",
        message: e.to_string(),
    })?;

    let mut merge_cfg = MergeConfig::new(method);
    if let Some(a) = args.alpha.or(cfg.alpha) {
        merge_cfg.alpha = a;
    }
    merge_cfg.pinv_rtol = args.pinv_rtol.or(cfg.pinv_rtol);
    if let Some(f) = args.tsv_rank_fraction.or(cfg.tsv_rank_fraction) {
        merge_cfg.tsv_rank_fraction = f;
    }

    let pre = load_checkpoint(&pretrained)?;
    let loaded = experts
        .iter()
        .map(load_checkpoint)
        .collect::<actmat::Result<Vec<_>>>()?;
    let mut ts = TaskSet::new(pre, loaded)?;
    if let Some(path) = covariances {
        let bundles = CovarianceBundle::from_checkpoint(&load_checkpoint(&path)?)?;
        let aligned = align_bundles(bundles, &ts.experts)?;
        ts = ts.with_covariances(aligned)?;
    }
    let outcome = merge(&ts, &merge_cfg)?;
    save_checkpoint(&outcome.checkpoint, &output)?;
    let mut out = io::stdout().lock();
    stdout_line(
        &mut out,
        &format!(
            "merged method={} tasks={} tensors={} warnings={} output={}",
            method,
            ts.num_tasks(),
            outcome.checkpoint.tensors.len(),
            outcome.warnings.len(),
            output.display()
        ),
    )
}

fn task_data_checkpoint(task: &TaskData, name: &str) -> Checkpoint {
    let mut c = Checkpoint::new(name);
    c.insert("inputs", Tensor::from_matrix(&task.inputs, DType::F64));
    c.insert("targets", Tensor::from_matrix(&task.targets, DType::F64));
    c
}

fn cmd_train_toy(args: TrainToyArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?.train_toy;
    let out_dir = required(args.out_dir.or(cfg.out_dir), "out-dir")?;
    let mut spec = cfg.scenario.unwrap_or_default();
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.tasks {
        spec.num_tasks = v;
    }
    if let Some(v) = args.widths {
        spec.widths = v;
    }
    if let Some(v) = args.steps {
        spec.steps = v;
    }
    if let Some(v) = args.eta {
        spec.eta = v;
    }
    if let Some(v) = args.samples {
        spec.samples_per_task = v;
    }
    if let Some(v) = args.activation {
        spec.activation = Activation::parse(&v).ok_or_else(|| Failure::usage(format!("unknown activation {v:?}")))?;
    }
    spec.validate()?;

    std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
        path: out_dir.clone(),
        source: e,
    })?;
    let scenario = scenario_from_spec(&spec)?;
    let layers: Vec<String> = (0..spec.widths.len() - 1).map(layer_name).collect();
    let outcomes = train_all(&scenario, &layers)?;

    let write = |name: &str, c: &Checkpoint| save_checkpoint(c, out_dir.join(name));
    std::fs::write(out_dir.join("scenario.toml"), spec.to_toml()?).map_err(|e| Error::Io {
        path: out_dir.join("scenario.toml"),
        source: e,
    })?;
    write("pretrained.ckpt.st", &scenario.pretrained.to_checkpoint("pretrained"))?;
    let mut bundles = Vec::new();
    let mut out = io::stdout().lock();
    for (t, (o, task)) in outcomes.iter().zip(&scenario.tasks).enumerate() {
        let id = format!("expert-{t}");
        write(&format!("{id}.ckpt.st"), &o.checkpoint)?;
        write(
            &format!("traces-{t}.ckpt.st"),
            &traces_to_checkpoint(&o.traces, &format!("traces-{t}")),
        )?;
        write(
            &format!("data-{t}.ckpt.st"),
            &task_data_checkpoint(task, &format!("data-{t}")),
        )?;
        bundles.push(empirical_bundle(&o.network, &task.inputs, &id)?);
        stdout_line(
            &mut out,
            &format!(
                "trained task={t} steps={} initial_loss={} final_loss={}",
                spec.steps,
                o.losses.first().unwrap(),
                o.losses.last().unwrap()
            ),
        )?;
    }
    write(
        "covariances.ckpt.st",
        &CovarianceBundle::to_checkpoint(&bundles, "covariances")?,
    )?;
    stdout_line(&mut out, &format!("wrote dir={}", out_dir.display()))
}

fn write_csv(dir: &Path, name: &str, f: impl FnOnce(File) -> actmat::Result<()>) -> CliResult<()> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    f(file)?;
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?.diagnose;
    let run_dir = required(args.run_dir.or(cfg.run_dir), "run-dir")?;
    let csv_dir = args.csv_dir.or(cfg.csv_dir);
    let loss = match args.loss.or(cfg.loss).as_deref() {
        None | Some("norm") => LossKind::Norm,
        Some("mse") => LossKind::Mse,
        Some(other) => return Err(Failure::usage(format!("unknown loss {other:?}, expected norm or mse"))),
    };
    let scenario_path = run_dir.join("scenario.toml");
    require_existing([scenario_path.as_path()]).map_err(|e| Failure {
        code: EXIT_INPUT,
        kind: "io",
        message: e.to_string(),
    })?;
    let text = std::fs::read_to_string(&scenario_path).map_err(|e| Error::Io {
        path: scenario_path.clone(),
        source: e,
    })?;
    let spec = ScenarioSpec::from_toml(&text)?;
    let pre = load_checkpoint(run_dir.join("pretrained.ckpt.st"))?;
    let mut experts = Vec::new();
    let mut data = Vec::new();
    let mut traces = Vec::new();
    for t in 0..spec.num_tasks {
        experts.push(load_checkpoint(run_dir.join(format!("expert-{t}.ckpt.st")))?);
        traces.push(traces_from_checkpoint(&load_checkpoint(
            run_dir.join(format!("traces-{t}.ckpt.st")),
        )?)?);
        let d = load_checkpoint(run_dir.join(format!("data-{t}.ckpt.st")))?;
        let net = ToyNetwork::from_checkpoint(&experts[t], spec.activation)?;
        data.push(TaskData {
            inputs: d.matrix("inputs")?,
            targets: d.matrix("targets")?,
            teacher: net,
        });
    }
    let covs_true = align_bundles(
        CovarianceBundle::from_checkpoint(&load_checkpoint(run_dir.join("covariances.ckpt.st"))?)?,
        &experts,
    )?;
    let ts = TaskSet::new(pre, experts)?;
    let covs_hat = ts
        .experts
        .iter()
        .map(|e| {
            let tv = compute_task_vector(&ts.pretrained, e, e.name.clone())?;
            let layers: Vec<String> = tv.deltas.keys().cloned().collect();
            actmat_bundle(&tv, &layers)
        })
        .collect::<actmat::Result<Vec<_>>>()?;

    let mut out = io::stdout().lock();
    let mut error_reports = Vec::new();
    let mut pearsons = Vec::new();
    for (t, task_traces) in traces.iter().enumerate() {
        for tr in task_traces.values() {
            let acc = accumulate_estimation_terms(tr)?;
            let report = estimation_error_report(&acc, &tr.delta())?;
            stdout_line(&mut out, &format!("task={t} {}", report.record()))?;
            error_reports.push(report);
            if tr.iterations.last().is_some_and(|it| it.z.ncols() >= 2) {
                let p = pearson_activation_gradnorm(tr)?;
                stdout_line(&mut out, &format!("task={t} {}", p.record()))?;
                pearsons.push(p);
            }
        }
    }
    for (t, (truth, hat)) in covs_true.iter().zip(&covs_hat).enumerate() {
        for (layer, c) in &truth.layer_covs {
            if let Some(h) = hat.layer_covs.get(layer) {
                match covariance_alignment(c, h) {
                    Ok(a) => stdout_line(
                        &mut out,
                        &format!(
                            "alignment task={t} layer={layer} cosine={} identity_baseline={}",
                            a.cosine, a.identity_baseline
                        ),
                    )?,
                    Err(e) => stdout_line(&mut out, &format!("alignment task={t} layer={layer} undefined=\"{e}\""))?,
                }
            }
        }
    }
    let hat_for_kappa: Vec<CovarianceBundle> = covs_hat
        .iter()
        .zip(&covs_true)
        .map(|(h, c)| CovarianceBundle {
            task_id: c.task_id.clone(),
            ..h.clone()
        })
        .collect();
    let kappas = kappa_ratio_table(&covs_true, &hat_for_kappa);
    match &kappas {
        Ok(k) => stdout_line(&mut out, &k.record())?,
        Err(e) => log::warn!("kappa table skipped: {e}"),
    }
    let merged = merge(&ts, &MergeConfig::new(MergeMethod::ActMat))?.checkpoint;
    let transfer = negative_transfer_bound(spec.activation, &merged, &ts, &covs_true, &covs_hat, &data, loss, None)?;
    for r in &transfer {
        stdout_line(&mut out, &r.record())?;
    }

    if let Some(dir) = csv_dir {
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        write_csv(&dir, "estimation_error.csv", |f| {
            write_estimation_csv(f, &error_reports)
        })?;
        write_csv(&dir, "drift.csv", |f| write_drift_csv(f, &error_reports))?;
        write_csv(&dir, "pearson.csv", |f| write_pearson_csv(f, &pearsons))?;
        write_csv(&dir, "transfer.csv", |f| write_transfer_csv(f, &transfer))?;
        if let Ok(k) = &kappas {
            write_csv(&dir, "kappa.csv", |f| write_kappa_csv(f, k))?;
        }
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?.verify;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let results = run_suite(seed);
    let mut out = io::stdout().lock();
    for r in &results {
        stdout_line(&mut out, &r.line())?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure {
            code: EXIT_VERIFY,
            kind: "verification",
            message: format!("{failed} of {} checks failed", results.len()),
        });
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?.bench;
    let methods = args
        .methods
        .or(cfg.methods)
        .unwrap_or_else(|| MergeMethod::ALL.iter().map(|m| m.to_string()).collect());
    let repeats = args.repeats.or(cfg.repeats).unwrap_or(5);
    let tasks = args.tasks.or(cfg.tasks).unwrap_or(8);
    let dim = args.dim.or(cfg.dim).unwrap_or(128);
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    if tasks == 0 || dim == 0 {
        return Err(Failure::usage("--tasks and --dim must be positive"));
    }
    let ts = synthetic_task_set(seed, tasks, dim)?;
    let rows = bench(&ts, &methods, repeats)?;
    match args.csv.or(cfg.csv) {
        Some(path) => {
            let file = File::create(&path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            write_bench_csv(file, &rows)?;
        }
        None => write_bench_csv(io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn cmd_flops(args: FlopsArgs) -> CliResult<()> {
    let method: MergeMethod = args.method.parse().map_err(|e: Error| Failure::usage(e.to_string()))?;
    let model = FlopModel::new(method, args.t, args.n, args.l).map_err(|e| Failure::usage(e.to_string()))?;
    let count = model.flops()?;
    let mut out = io::stdout().lock();
    stdout_line(&mut out, &count.merge.to_string())?;
    if method == MergeMethod::RegMean {
        stdout_line(&mut out, &format!("preprocess {}", count.preprocess))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Merge(a) => cmd_merge(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Flops(a) => cmd_flops(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = f.message.replace('\n', " ");
            eprintln!("error[{}]: {message}", f.kind);
            if f.code == EXIT_USAGE {
                let usage = Cli::command().render_usage().to_string();
                eprintln!("{}", usage.lines().next().unwrap_or_default());
            }
            ExitCode::from(f.code)
        }
    }
}
