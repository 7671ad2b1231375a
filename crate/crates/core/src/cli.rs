//! Command-line interface: dataset generation, training, evaluation,
//! gradient checking, explicit-vs-kernelized equivalence and timing.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or input error,
//! 3 training divergence.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{generate, load_features, save_features, ShiftKnobs, ShiftSpec};
use crate::error::{Result, SohotError};
use crate::gradcheck::{run_gradcheck, GradcheckConfig, DEFAULT_STEP};
use crate::kernel::{cost_model, kernel_frob_dist_sq, CostMode};
use crate::losses::{AlignmentConfig, ScatterPath};
use crate::model::{ModelConfig, TwoStreamModel};
use crate::tensor::{compute_scatter_in, mem_cap, tensor_frob_dist_sq, unique_coeff_count, Domain, PackedLayout};
use crate::trainer::{evaluate, predict, train, Checkpoint, ObjectiveKind, StatScope, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Largest explicit-vs-kernelized relative deviation `equiv` accepts.
pub const EQUIV_TOL: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "sohot", version, about = "Scatter-tensor alignment for domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "lowercase")]
pub enum Command {
    /// Generate a synthetic domain-shift dataset as CSV.
    Gen(GenArgs),
    /// Train the two-stream model on a feature CSV.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on one split of a feature CSV.
    Eval(EvalArgs),
    /// Compare every analytic gradient with finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare kernelized and explicit tensor distances.
    Equiv(EquivArgs),
    /// Time explicit and kernelized distances.
    Bench(BenchArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

fn parse_rot_deg(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..180.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("--rot-deg must lie in [0, 180), got {v}"))
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Rotation of every target scatter, degrees in [0, 180).
    #[arg(long, default_value_t = 30.0, value_parser = parse_rot_deg, allow_negative_numbers = true)]
    pub rot_deg: f64,
    /// Length of the tangential shift of every target class mean.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub mean_shift: f64,
    /// Multiplier of the target covariances.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub scale: f64,
    /// Source training samples per class.
    #[arg(long, default_value_t = 20)]
    pub n_src: usize,
    /// Target training samples per class.
    #[arg(long, default_value_t = 3)]
    pub n_tgt: usize,
    /// Test samples per class in each domain.
    #[arg(long, default_value_t = 200)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatScopeArg {
    MiniBatch,
    FullClass,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Feature CSV with domain,split,label,f0,... rows.
    #[arg(long)]
    pub features: PathBuf,
    /// Output directory for checkpoint.json, metrics.csv and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Highest scatter order aligned (orders 2..=order).
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    /// Learn per-class alignment weights.
    #[arg(long)]
    pub weighted: bool,
    #[arg(long, default_value_t = AlignmentConfig::DEFAULT_SIGMA1)]
    pub sigma1: f64,
    #[arg(long, default_value_t = AlignmentConfig::DEFAULT_SIGMA2)]
    pub sigma2: f64,
    #[arg(long, default_value_t = AlignmentConfig::DEFAULT_ALPHA)]
    pub alpha1: f64,
    #[arg(long, default_value_t = AlignmentConfig::DEFAULT_ALPHA)]
    pub alpha2: f64,
    /// Separate source and target classifiers coupled by beta-prime.
    #[arg(long)]
    pub dual_classifier: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub beta_prime: f64,
    #[arg(long, value_enum, default_value_t = StatScopeArg::MiniBatch)]
    pub stat_scope: StatScopeArg,
    #[arg(long, default_value_t = TrainConfig::DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::DEFAULT_MOMENTUM)]
    pub momentum: f64,
    #[arg(long, default_value_t = TrainConfig::DEFAULT_BATCH)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 16)]
    pub feat_dim: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda_star: f64,
    /// Squared feature-norm cap; defaults to 16 * feat-dim.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Keep the first layer of both streams at its initial values.
    #[arg(long)]
    pub freeze_input_layer: bool,
    /// Pooled source+target softmax without any alignment term.
    #[arg(long)]
    pub baseline: bool,
    /// Compute scatter distances from explicit tensors.
    #[arg(long)]
    pub explicit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    TargetTest,
    TargetTrain,
    SourceTest,
    SourceTrain,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::TargetTest)]
    pub split: SplitArg,
    /// Optional report file (CSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub orders: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub step: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EquivArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8")]
    pub dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub orders: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional per-trial CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "4096")]
    pub dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    pub orders: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub n_src: usize,
    #[arg(long, default_value_t = 3)]
    pub n_tgt: usize,
    /// Timed repetitions after one warm-up; the median is reported.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Record of one run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub wall_ms: f64,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// The command this manifest describes.
    pub fn to_command(&self) -> Result<Command> {
        let tagged = serde_json::json!({ "command": self.command, "config": self.config });
        Ok(serde_json::from_value(tagged)?)
    }
}

/// `data.csv` -> `data.csv.manifest.json`.
pub fn manifest_path_for(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}

fn write_manifest(
    command: &Command,
    path: &Path,
    seed: Option<u64>,
    artifacts: Vec<PathBuf>,
    started: Instant,
) -> Result<()> {
    let tagged = serde_json::to_value(command)?;
    let manifest = RunManifest {
        command: tagged["command"].as_str().unwrap_or_default().to_string(),
        config: tagged["config"].clone(),
        seed,
        artifacts,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timings: Timings {
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        },
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Result of a command that ran to completion.
enum Status {
    Ok,
    CheckFailed,
}

fn exit_code_for(err: &SohotError) -> i32 {
    match err {
        SohotError::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    run_command(cli.command, out, err)
}

pub fn run_command(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match execute(command, out, err) {
        Ok(Status::Ok) => EXIT_OK,
        Ok(Status::CheckFailed) => EXIT_CHECK_FAILED,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code_for(&e)
        }
    }
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<Status> {
    let started = Instant::now();
    match &command {
        Command::Gen(a) => cmd_gen(&command, a, out, started),
        Command::Train(a) => cmd_train(&command, a, out, started),
        Command::Eval(a) => cmd_eval(&command, a, out, started),
        Command::Gradcheck(a) => cmd_gradcheck(&command, a, out, started),
        Command::Equiv(a) => cmd_equiv(&command, a, out, started),
        Command::Bench(a) => cmd_bench(&command, a, out, err, started),
        Command::Replay(a) => {
            let manifest = RunManifest::load(&a.manifest)?;
            let inner = manifest.to_command()?;
            if matches!(inner, Command::Replay(_)) {
                return Err(SohotError::arg("a manifest cannot replay another replay"));
            }
            execute(inner, out, err)
        }
    }
}

fn cmd_gen(command: &Command, a: &GenArgs, out: &mut dyn Write, started: Instant) -> Result<Status> {
    let spec = ShiftSpec::from_knobs(&ShiftKnobs {
        classes: a.classes,
        dim: a.dim,
        rot_deg: a.rot_deg,
        mean_shift: a.mean_shift,
        scale: a.scale,
        n_src: a.n_src,
        n_tgt: a.n_tgt,
        n_test: a.n_test,
        seed: a.seed,
    })?;
    let data = generate(&spec)?;
    save_features(&data, &a.out)?;
    write_manifest(
        command,
        &manifest_path_for(&a.out),
        Some(a.seed),
        vec![a.out.clone()],
        started,
    )?;
    writeln!(out, "wrote {} rows to {}", data.total_len(), a.out.display())?;
    Ok(Status::Ok)
}

/// Name of an alignment configuration, e.g. `So+To+Fo+ζ`.
pub fn configuration_name(order: usize, weighted: bool, baseline: bool) -> String {
    if baseline {
        return "S+T".into();
    }
    let mut parts: Vec<String> = (2..=order)
        .map(|r| match r {
            2 => "So".to_string(),
            3 => "To".to_string(),
            4 => "Fo".to_string(),
            r => format!("O{r}"),
        })
        .collect();
    if weighted {
        parts.push("ζ".into());
    }
    parts.join("+")
}

impl TrainArgs {
    /// Model, training and alignment settings with every default filled in.
    pub fn resolve(&mut self, num_classes: usize) -> Result<(ModelConfig, TrainConfig)> {
        let tau = *self.tau.get_or_insert(16.0 * self.feat_dim as f64);
        if self.baseline && self.dual_classifier {
            return Err(SohotError::arg(
                "--baseline uses one shared classifier; drop --dual-classifier",
            ));
        }
        let mcfg = ModelConfig {
            hidden: self.hidden,
            feat_dim: self.feat_dim,
            lambda: self.lambda,
            lambda_star: self.lambda_star,
            beta_prime: self.beta_prime,
            tau,
            dual_classifier: self.dual_classifier,
        };
        mcfg.validate()?;
        let mut align =
            AlignmentConfig::new(num_classes, self.order, self.weighted)?.with_strengths(self.sigma1, self.sigma2);
        align.alpha1 = self.alpha1;
        align.alpha2 = self.alpha2;
        if self.explicit {
            align.path = ScatterPath::Explicit;
        }
        let tcfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            momentum: self.momentum,
            seed: self.seed,
            align,
            stat_scope: match self.stat_scope {
                StatScopeArg::MiniBatch => StatScope::MiniBatch,
                StatScopeArg::FullClass => StatScope::FullClass,
            },
            eval_every: self.eval_every,
            freeze_input_layer: self.freeze_input_layer,
            objective: if self.baseline {
                ObjectiveKind::PooledBaseline
            } else {
                ObjectiveKind::Full
            },
        };
        tcfg.validate()?;
        Ok((mcfg, tcfg))
    }
}

fn cmd_train(command: &Command, a: &TrainArgs, out: &mut dyn Write, started: Instant) -> Result<Status> {
    let data = load_features(&a.features)?;
    let mut args = a.clone();
    let (mcfg, tcfg) = args.resolve(data.num_classes.max(2))?;
    let model = TwoStreamModel::new(data.dim(), data.num_classes.max(2), mcfg, args.seed)?;
    let eval = (!data.target_test.is_empty()).then_some(&data.target_test);
    let outcome = train(model, &data.source_train, &data.target_train, eval, &tcfg)?;
    let acc = evaluate(&outcome.model, eval.unwrap_or(&data.target_train))?;

    std::fs::create_dir_all(&a.out)?;
    let ck_path = a.out.join("checkpoint.json");
    let metrics_path = a.out.join("metrics.csv");
    Checkpoint::new(&outcome, &tcfg).save(&ck_path)?;
    outcome
        .log
        .write_csv(std::io::BufWriter::new(std::fs::File::create(&metrics_path)?))?;
    let resolved = match command {
        Command::Train(_) => Command::Train(args.clone()),
        other => other.clone(),
    };
    write_manifest(
        &resolved,
        &a.out.join("manifest.json"),
        Some(args.seed),
        vec![ck_path, metrics_path],
        started,
    )?;
    writeln!(
        out,
        "configuration: {}",
        configuration_name(args.order, args.weighted, args.baseline)
    )?;
    writeln!(out, "epochs: {}", tcfg.epochs)?;
    writeln!(out, "final target accuracy: {acc}")?;
    Ok(Status::Ok)
}

fn cmd_eval(command: &Command, a: &EvalArgs, out: &mut dyn Write, started: Instant) -> Result<Status> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = load_features(&a.features)?;
    let (set, domain, name) = match a.split {
        SplitArg::TargetTest => (&data.target_test, Domain::Target, "target-test"),
        SplitArg::TargetTrain => (&data.target_train, Domain::Target, "target-train"),
        SplitArg::SourceTest => (&data.source_test, Domain::Source, "source-test"),
        SplitArg::SourceTrain => (&data.source_train, Domain::Source, "source-train"),
    };
    let acc = match domain {
        Domain::Target => evaluate(&ck.model, set)?,
        Domain::Source => {
            if set.is_empty() {
                return Err(SohotError::EmptyDataset(format!("{name} split has no samples")));
            }
            let preds = predict(&ck.model, &set.inputs, Domain::Source)?;
            preds.iter().zip(&set.labels).filter(|(p, y)| p == y).count() as f64 / set.len() as f64
        }
    };
    writeln!(out, "split: {name}")?;
    writeln!(out, "accuracy: {acc}")?;
    if let Some(path) = &a.out {
        std::fs::write(path, format!("split,accuracy\n{name},{acc}\n"))?;
        write_manifest(command, &manifest_path_for(path), None, vec![path.clone()], started)?;
    }
    Ok(Status::Ok)
}

fn cmd_gradcheck(command: &Command, a: &GradcheckArgs, out: &mut dyn Write, started: Instant) -> Result<Status> {
    if !(a.tol.is_finite() && a.tol >= 0.0) {
        return Err(SohotError::arg("--tol must be finite and >= 0"));
    }
    if !(a.step.is_finite() && a.step > 0.0) {
        return Err(SohotError::arg("--step must be finite and positive"));
    }
    let rows = run_gradcheck(&GradcheckConfig {
        seed: a.seed,
        instances: a.instances,
        orders: a.orders.clone(),
        step: a.step,
    })?;
    let mut report = String::from("block,instances,max_rel_err,status\n");
    let mut ok = true;
    for r in &rows {
        let pass = r.max_rel_err <= a.tol;
        ok &= pass;
        report.push_str(&format!(
            "{},{},{:e},{}\n",
            r.block,
            r.instances,
            r.max_rel_err,
            if pass { "pass" } else { "fail" }
        ));
    }
    out.write_all(report.as_bytes())?;
    if let Some(path) = &a.out {
        std::fs::write(path, &report)?;
        write_manifest(
            command,
            &manifest_path_for(path),
            Some(a.seed),
            vec![path.clone()],
            started,
        )?;
    }
    Ok(if ok { Status::Ok } else { Status::CheckFailed })
}

fn uniform_features(rng: &mut ChaCha8Rng, d: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0))
}

/// Explicit-tensor distance using one shared layout.
fn explicit_dist(layout: &std::sync::Arc<PackedLayout>, src: &DMatrix<f64>, tgt: &DMatrix<f64>) -> Result<f64> {
    let x = compute_scatter_in(layout, src)?;
    let y = compute_scatter_in(layout, tgt)?;
    tensor_frob_dist_sq(&x, &y)
}

fn cmd_equiv(command: &Command, a: &EquivArgs, out: &mut dyn Write, started: Instant) -> Result<Status> {
    if a.trials == 0 {
        return Err(SohotError::arg("--trials must be at least 1"));
    }
    if a.dims.is_empty() || a.dims.contains(&0) {
        return Err(SohotError::arg("--dims must list positive dimensions"));
    }
    if a.orders.is_empty() || a.orders.iter().any(|&r| r < 2) {
        return Err(SohotError::arg("--orders must list orders >= 2"));
    }
    let cap = mem_cap();
    let mut layouts = Vec::new();
    for &d in &a.dims {
        for &r in &a.orders {
            layouts.push(((d, r), PackedLayout::new(d, r, cap)?));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut csv = String::from("trial,d,r,N,N*,explicit,kernelized,rel_dev\n");
    let mut worst = 0.0_f64;
    for t in 0..a.trials {
        let d = a.dims[rng.random_range(0..a.dims.len())];
        let r = a.orders[rng.random_range(0..a.orders.len())];
        let n = rng.random_range(2..=10);
        let nt = rng.random_range(2..=10);
        let src = uniform_features(&mut rng, d, n);
        let tgt = uniform_features(&mut rng, d, nt);
        let layout = &layouts.iter().find(|(k, _)| *k == (d, r)).expect("built above").1;
        let e = explicit_dist(layout, &src, &tgt)?;
        let k = kernel_frob_dist_sq(&src, &tgt, r)?;
        let dev = (k - e).abs() / e.abs().max(f64::MIN_POSITIVE);
        worst = if dev.is_nan() { f64::NAN } else { worst.max(dev) };
        csv.push_str(&format!("{t},{d},{r},{n},{nt},{e:e},{k:e},{dev:e}\n"));
    }
    let pass = worst <= EQUIV_TOL;
    writeln!(out, "trials: {}", a.trials)?;
    writeln!(out, "max relative deviation: {worst:e}")?;
    writeln!(out, "tolerance: {EQUIV_TOL:e}")?;
    writeln!(out, "{}", if pass { "PASS" } else { "FAIL" })?;
    if let Some(path) = &a.out {
        std::fs::write(path, csv)?;
        write_manifest(
            command,
            &manifest_path_for(path),
            Some(a.seed),
            vec![path.clone()],
            started,
        )?;
    }
    Ok(if pass { Status::Ok } else { Status::CheckFailed })
}

/// One row of the timing report. `wall_ns` is `None` when the explicit
/// tensor would exceed the coefficient cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: CostMode,
    pub d: usize,
    pub n_src: usize,
    pub n_tgt: usize,
    pub order: usize,
    pub wall_ns: Option<u128>,
    pub predicted_ops: u64,
}

pub const BENCH_HEADER: &str = "mode,d,N,N*,r,wall_ns,predicted_ops";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        let wall = self.wall_ns.map_or_else(|| "infeasible".to_string(), |w| w.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.mode.as_str(),
            self.d,
            self.n_src,
            self.n_tgt,
            self.order,
            wall,
            self.predicted_ops
        )
    }
}

fn median_ns(reps: usize, mut f: impl FnMut() -> Result<f64>) -> Result<u128> {
    std::hint::black_box(f()?);
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(f()?);
        times.push(t.elapsed().as_nanos());
    }
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

/// Times both distance computations for one scenario.
pub fn bench_scenario(
    d: usize,
    n_src: usize,
    n_tgt: usize,
    order: usize,
    reps: usize,
    seed: u64,
) -> Result<[BenchRow; 2]> {
    if reps == 0 {
        return Err(SohotError::arg("--reps must be at least 1"));
    }
    if d == 0 || n_src == 0 || n_tgt == 0 || order < 2 {
        return Err(SohotError::arg("bench needs d, N, N* >= 1 and order >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = DMatrix::from_fn(d, n_src, |_, _| rng.sample::<f64, _>(StandardNormal));
    let tgt = DMatrix::from_fn(d, n_tgt, |_, _| rng.sample::<f64, _>(StandardNormal));

    let explicit_ops = cost_model(d, n_src, n_tgt, order, CostMode::Explicit)?;
    let explicit_wall = match PackedLayout::new(d, order, mem_cap()) {
        Ok(layout) => Some(median_ns(reps, || explicit_dist(&layout, &src, &tgt))?),
        Err(SohotError::Capacity { .. }) => None,
        Err(e) => return Err(e),
    };
    let kernel_ops = cost_model(d, n_src, n_tgt, order, CostMode::Kernelized)?;
    let kernel_wall = median_ns(reps, || kernel_frob_dist_sq(&src, &tgt, order))?;
    let row = |mode, wall_ns, predicted_ops| BenchRow {
        mode,
        d,
        n_src,
        n_tgt,
        order,
        wall_ns,
        predicted_ops,
    };
    Ok([
        row(CostMode::Explicit, explicit_wall, explicit_ops),
        row(CostMode::Kernelized, Some(kernel_wall), kernel_ops),
    ])
}

fn cmd_bench(
    command: &Command,
    a: &BenchArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
    started: Instant,
) -> Result<Status> {
    let mut csv = format!("{BENCH_HEADER}\n");
    for &d in &a.dims {
        for &r in &a.orders {
            let [ex, ke] = bench_scenario(d, a.n_src, a.n_tgt, r, a.reps, a.seed)?;
            csv.push_str(&ex.csv_line());
            csv.push('\n');
            csv.push_str(&ke.csv_line());
            csv.push('\n');
            let predicted = ex.predicted_ops as f64 / ke.predicted_ops as f64;
            match (ex.wall_ns, ke.wall_ns) {
                (Some(e), Some(k)) => writeln!(
                    err,
                    "d={d} N={} N*={} r={r}: measured explicit/kernelized {:.1}, cost model {:.1}",
                    a.n_src,
                    a.n_tgt,
                    e as f64 / (k.max(1)) as f64,
                    predicted
                )?,
                _ => writeln!(
                    err,
                    "d={d} N={} N*={} r={r}: explicit infeasible ({} coefficients > cap {}), cost model {:.1}",
                    a.n_src,
                    a.n_tgt,
                    unique_coeff_count(d, r).map_or_else(|_| "overflowing".into(), |c| c.to_string()),
                    mem_cap(),
                    predicted
                )?,
            }
        }
    }
    match &a.out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            write_manifest(
                command,
                &manifest_path_for(path),
                Some(a.seed),
                vec![path.clone()],
                started,
            )?;
        }
        None => out.write_all(csv.as_bytes())?,
    }
    Ok(Status::Ok)
}
