//! `bat`: command-line front end for the transducer loss kernels.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 infeasible band, 4 gradient check above tolerance.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use bat_core::bench::{self, BenchConfig, ReportFormat};
use bat_core::cif::{self, Classifier};
use bat_core::decode::{self, fmt_sig, DecodeConfig, EmissionTrace};
use bat_core::gradcheck::{self, crossing_margin, random_instance};
use bat_core::model::{self, synth_task, Dataset, Mode, SynthSpec, TrainConfig};
use bat_core::rng::{self, DetRng};
use bat_core::{
    bat_loss, build_window, gather_band, rnnt_loss, AnyTensor, BandWindow, BandedLattice, DType,
    Error, LabelSeq, LogitLattice, ModelConfig, Scalar, Tensor, ToyModel,
};

#[derive(Parser, Debug)]
#[command(
    name = "bat",
    version,
    about = "Transducer losses, banded training and emission latency tools"
)]
struct Cli {
    /// Line-delimited key=value defaults; flags given on the command line win
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for per-utterance work
    #[arg(long, global = true, default_value_t = 1, value_parser = parse_threads)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full-lattice transducer loss of one utterance
    Loss(LossArgs),
    /// Band-restricted transducer loss of one utterance
    BatLoss(BatLossArgs),
    /// Compare analytic gradients with central finite differences
    CheckGrad(CheckGradArgs),
    /// Train the toy model on a dataset
    Train(TrainArgs),
    /// Greedy-decode a dataset; report token error and emission latency
    Decode(DecodeArgs),
    /// Emission latency from a saved traces CSV
    Latency(LatencyArgs),
    /// Time and tracked memory of the full and banded losses
    Bench(BenchArgs),
    /// Write CIF weights, scaled weights and token boundaries as CSV
    DumpCif(DumpCifArgs),
    /// Generate a synthetic dataset
    Synth(SynthArgs),
}

#[derive(clap::Args, Debug)]
struct LossArgs {
    /// Log-probabilities, shape (T, U+1, V+1), f32 or f64
    #[arg(long, value_name = "FILE")]
    lattice: PathBuf,
    /// Label ids in 1..=V, shape (U)
    #[arg(long, value_name = "FILE")]
    labels: PathBuf,
    /// Write the gradient w.r.t. the lattice here
    #[arg(long, value_name = "FILE")]
    grad_out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
#[command(group = clap::ArgGroup::new("band").required(true).args(["window", "cif_weights"]))]
struct BatLossArgs {
    /// Log-probabilities, full (T, U+1, V+1) or banded (T, S, V+1)
    #[arg(long, value_name = "FILE")]
    lattice: PathBuf,
    /// Label ids in 1..=V, shape (U)
    #[arg(long, value_name = "FILE")]
    labels: PathBuf,
    /// Per-frame window starts, shape (T)
    #[arg(long, value_name = "FILE")]
    window: Option<PathBuf>,
    /// Raw per-frame CIF weights, shape (T); the window is built from them
    #[arg(long, value_name = "FILE")]
    cif_weights: Option<PathBuf>,
    /// Rows kept below the alignment
    #[arg(long, default_value_t = 2)]
    rd: usize,
    /// Rows kept above the alignment
    #[arg(long, default_value_t = 2)]
    ru: usize,
    /// Write the banded gradient, shape (T, S, V+1), here
    #[arg(long, value_name = "FILE")]
    grad_out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum GradKind {
    Rnnt,
    Bat,
    Cif,
    Model,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum ModeArg {
    Full,
    Bat,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => Mode::Full,
            ModeArg::Bat => Mode::Bat,
        }
    }
}

#[derive(clap::Args, Debug)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames
    #[arg(long, default_value_t = 4)]
    t: usize,
    /// Labels
    #[arg(long, default_value_t = 3)]
    u: usize,
    /// Non-blank vocabulary size
    #[arg(long, default_value_t = 3)]
    v: usize,
    /// Which gradient to check
    #[arg(long, value_enum, default_value_t = GradKind::Rnnt)]
    kind: GradKind,
    /// Loss used by --kind model
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    rd: usize,
    #[arg(long, default_value_t = 1)]
    ru: usize,
    /// Central-difference step
    #[arg(long, default_value_t = gradcheck::FD_STEP)]
    step: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// Dataset manifest (JSONL) written by `synth`
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
    #[arg(long, default_value_t = 2)]
    rd: usize,
    #[arg(long, default_value_t = 2)]
    ru: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Seeds initialization and batch order
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-step training log CSV
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    /// Save the trained model (JSON)
    #[arg(long, value_name = "FILE")]
    model_out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Stop after this many updates
    #[arg(long)]
    max_steps: Option<usize>,
    /// Decoupled weight decay
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Anneal the learning rate linearly to zero over --max-steps
    #[arg(long)]
    lr_decay: bool,
    #[arg(long, default_value_t = 1.0)]
    lambda_trans: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_ce: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_qua: f64,
    /// Stacked input frames, current one included
    #[arg(long, default_value_t = 3)]
    context: usize,
    #[arg(long, default_value_t = 32)]
    enc_dim: usize,
    #[arg(long, default_value_t = 16)]
    pred_dim: usize,
    #[arg(long, default_value_t = 128)]
    joint_dim: usize,
    /// Odd convolution width of the CIF weight predictor
    #[arg(long, default_value_t = 3)]
    cif_kernel: usize,
}

#[derive(clap::Args, Debug)]
struct DecodeArgs {
    /// Model JSON written by `train --model-out`
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Dataset manifest (JSONL)
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    #[arg(long, default_value_t = 40.0)]
    frame_ms: f64,
    #[arg(long, default_value_t = 10)]
    max_symbols: usize,
    /// Emission traces CSV
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Latency summary CSV
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct LatencyArgs {
    /// Traces CSV written by `decode --out`
    #[arg(long, value_name = "FILE")]
    traces: PathBuf,
    /// Dataset manifest holding the reference token end frames
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    #[arg(long, default_value_t = 40.0)]
    frame_ms: f64,
    /// Latency summary CSV
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Per-utterance latency CSV
    #[arg(long, value_name = "FILE")]
    per_utt: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum FormatArg {
    Csv,
    Text,
}

#[derive(clap::Args, Debug)]
struct BenchArgs {
    /// Lattices per timed batch
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    t: usize,
    #[arg(long, default_value_t = 50)]
    u: usize,
    #[arg(long, default_value_t = 500)]
    v: usize,
    #[arg(long, default_value_t = 2)]
    rd: usize,
    #[arg(long, default_value_t = 2)]
    ru: usize,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    dtype: DTypeArg,
    /// Timed runs per kernel, at least 3
    #[arg(long, default_value_t = 9)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file; the text report always goes to stdout
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

#[derive(clap::Args, Debug)]
struct DumpCifArgs {
    /// Raw per-frame weights, shape (T)
    #[arg(long, value_name = "FILE")]
    weights: PathBuf,
    /// Target label count
    #[arg(long)]
    u: usize,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Utterances
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Manifest path; features go next to it with a .bat1 extension
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    #[arg(long, default_value_t = 3)]
    tokens_min: usize,
    #[arg(long, default_value_t = 8)]
    tokens_max: usize,
    #[arg(long, default_value_t = 2)]
    frames_min: usize,
    #[arg(long, default_value_t = 5)]
    frames_max: usize,
    /// Gaussian noise added to the one-hot frames
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
}

fn parse_threads(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(format!("expected an integer >= 1, got {s:?}")),
    }
}

enum Failure {
    Usage(String),
    Core(Error),
    GradCheck { err: f64, tol: f64 },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::InvalidConfig(_)) => 1,
            Failure::Core(Error::BandInfeasible { .. }) => 3,
            Failure::Core(_) => 2,
            Failure::GradCheck { .. } => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::GradCheck { .. } => "grad-check",
            Failure::Core(e) => match e {
                Error::BadMagic => "bad-magic",
                Error::BadVersion(_) => "bad-version",
                Error::BadDtype(_) => "bad-dtype",
                Error::BadDims(_) => "bad-dims",
                Error::TruncatedPayload { .. } => "truncated-payload",
                Error::DtypeMismatch { .. } => "dtype-mismatch",
                Error::DimMismatch(_) => "dim-mismatch",
                Error::InvalidLabel { .. } => "invalid-label",
                Error::NonFinite(_) => "non-finite",
                Error::TooLarge(_) => "too-large",
                Error::DegenerateWeights(_) => "degenerate-weights",
                Error::FireCountMismatch { .. } => "fire-count",
                Error::BandInfeasible { .. } => "band-infeasible",
                Error::EmptySet => "empty-set",
                Error::InvalidConfig(_) => "invalid-config",
                Error::Parse(_) => "parse",
                Error::Io(_) => "io",
                Error::Csv(_) => "csv",
                Error::Json(_) => "json",
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
            Failure::GradCheck { err, tol } => format!(
                "max relative error {} exceeds tolerance {}",
                fmt_sig(*err),
                fmt_sig(*tol)
            ),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.message().replace('\n', " ");
            eprintln!("error code={} kind={}: {}", f.code(), f.kind(), msg.trim());
            ExitCode::from(f.code())
        }
    }
}

fn run(argv: Vec<String>) -> CliResult {
    let argv = apply_config_file(argv)?;
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let text = e.render().to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text);
            return Err(Failure::Usage(text.to_string()));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Failure::Usage(e.to_string()))?;
    match cli.command {
        Command::Loss(a) => cmd_loss(a),
        Command::BatLoss(a) => cmd_bat_loss(a),
        Command::CheckGrad(a) => cmd_check_grad(a),
        Command::Train(a) => cmd_train(a),
        Command::Decode(a) => cmd_decode(a, cli.threads),
        Command::Latency(a) => cmd_latency(a),
        Command::Bench(a) => cmd_bench(a),
        Command::DumpCif(a) => cmd_dump_cif(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Appends `--key value` for every config-file entry whose flag is absent
/// from `argv`. Boolean flags take `true` or `false`.
fn apply_config_file(mut argv: Vec<String>) -> CliResult<Vec<String>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(Error::from)?;
    let root = Cli::command();
    let sub = argv
        .iter()
        .skip(1)
        .find_map(|a| root.find_subcommand(a))
        .ok_or_else(|| Failure::Usage("--config needs a subcommand".into()))?;
    let given = |key: &str| {
        let flag = format!("--{key}");
        argv.iter()
            .any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
    };
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("{path}:{}: expected key=value", n + 1)))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| Failure::Usage(format!("{path}:{}: unknown key {key:?}", n + 1)))?;
        if given(&key) {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value {
                "true" => extra.push(format!("--{key}")),
                "false" => {}
                _ => {
                    return Err(Failure::Usage(format!(
                        "{path}:{}: {key} expects true or false",
                        n + 1
                    )))
                }
            }
        } else {
            extra.push(format!("--{key}"));
            extra.push(value.to_string());
        }
    }
    argv.extend(extra);
    Ok(argv)
}

fn read_labels(path: &Path, vocab: usize) -> CliResult<LabelSeq> {
    let t = AnyTensor::read(path)?;
    if t.dims().len() != 1 {
        return Err(Error::BadDims(format!("labels must be 1-D, got {:?}", t.dims())).into());
    }
    Ok(LabelSeq::from_i64(&t.to_i64()?, vocab)?)
}

fn read_vector(path: &Path) -> CliResult<Vec<f64>> {
    let t = AnyTensor::read(path)?;
    if t.dims().len() != 1 {
        return Err(Error::BadDims(format!("expected a 1-D tensor, got {:?}", t.dims())).into());
    }
    if t.dtype() == DType::I64 {
        return Err(Error::DtypeMismatch {
            expected: "f32 or f64",
            found: "i64",
        }
        .into());
    }
    Ok(t.to_f64())
}

fn lattice_vocab(t: &AnyTensor) -> CliResult<usize> {
    match t.dims() {
        [_, _, v1] if *v1 >= 2 => Ok(v1 - 1),
        dims => Err(Error::BadDims(format!("lattice must be (T, rows, V+1), got {dims:?}")).into()),
    }
}

fn cmd_loss(a: LossArgs) -> CliResult {
    let lat = AnyTensor::read(&a.lattice)?;
    let y = read_labels(&a.labels, lattice_vocab(&lat)?)?;
    let loss = match lat {
        AnyTensor::F32(t) => full_loss(t, &y, a.grad_out.as_deref())?,
        AnyTensor::F64(t) => full_loss(t, &y, a.grad_out.as_deref())?,
        AnyTensor::I64(_) => return Err(float_lattice_required()),
    };
    println!("{}", fmt_sig(loss));
    Ok(())
}

fn float_lattice_required() -> Failure {
    Error::DtypeMismatch {
        expected: "f32 or f64",
        found: "i64",
    }
    .into()
}

fn full_loss<S: Scalar>(lp: Tensor<S>, y: &LabelSeq, grad_out: Option<&Path>) -> CliResult<f64> {
    let res = rnnt_loss(&LogitLattice::new(lp)?, y)?;
    if let Some(p) = grad_out {
        res.grad.write(p)?;
    }
    Ok(res.loss)
}

fn cmd_bat_loss(a: BatLossArgs) -> CliResult {
    let lat = AnyTensor::read(&a.lattice)?;
    let y = read_labels(&a.labels, lattice_vocab(&lat)?)?;
    let (t_len, rows) = (lat.dims()[0], lat.dims()[1]);
    let u = y.len();
    let width = (a.rd + a.ru + 2).min(u + 1);
    if width < u + 1 && u > t_len + a.rd + a.ru {
        return Err(Error::BandInfeasible {
            u,
            t: t_len,
            r_d: a.rd,
            r_u: a.ru,
        }
        .into());
    }
    let window = if let Some(p) = &a.window {
        let starts = AnyTensor::read(p)?
            .to_i64()?
            .into_iter()
            .map(|o| usize::try_from(o).map_err(|_| Error::Parse(format!("negative start {o}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if starts.len() != t_len {
            return Err(Error::DimMismatch(format!(
                "window has {} starts, lattice has {t_len} frames",
                starts.len()
            ))
            .into());
        }
        BandWindow::from_starts(starts, width, u)?
    } else {
        let raw = read_vector(a.cif_weights.as_deref().expect("clap enforces the group"))?;
        if raw.len() != t_len {
            return Err(Error::DimMismatch(format!(
                "{} CIF weights, lattice has {t_len} frames",
                raw.len()
            ))
            .into());
        }
        let scaled = cif::cif_scale(&raw, u)?.scaled;
        let c = cif::cif_boundary(&cif::clamp_weights(&scaled));
        build_window(&c, u, a.rd, a.ru, t_len)?
    };
    if rows != u + 1 && rows != width {
        return Err(Error::DimMismatch(format!(
            "lattice has {rows} rows per frame, expected U+1 = {} or S = {width}",
            u + 1
        ))
        .into());
    }
    let loss = match lat {
        AnyTensor::F32(t) => banded_loss(t, window, rows == u + 1, &y, a.grad_out.as_deref())?,
        AnyTensor::F64(t) => banded_loss(t, window, rows == u + 1, &y, a.grad_out.as_deref())?,
        AnyTensor::I64(_) => return Err(float_lattice_required()),
    };
    println!("{}", fmt_sig(loss));
    Ok(())
}

fn banded_loss<S: Scalar>(
    lp: Tensor<S>,
    window: BandWindow,
    full_layout: bool,
    y: &LabelSeq,
    grad_out: Option<&Path>,
) -> CliResult<f64> {
    let band = if full_layout {
        gather_band(&LogitLattice::new(lp)?, &window)?
    } else {
        BandedLattice::new(window, lp)?
    };
    let res = bat_loss(&band, y)?;
    if let Some(p) = grad_out {
        res.grad.write(p)?;
    }
    Ok(res.loss)
}

const SAMPLE_ATTEMPTS: usize = 10_000;
const MARGIN: f64 = 1e-3;

fn normal_vec(r: &mut DetRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng::normal(r)).collect()
}

/// Raw weights whose scaled prefix sums keep `MARGIN` from every integer.
fn raw_with_margin(r: &mut DetRng, t: usize, u: usize) -> CliResult<Vec<f64>> {
    for _ in 0..SAMPLE_ATTEMPTS {
        let raw: Vec<f64> = (0..t).map(|_| rng::uniform(r, 0.1, 0.95)).collect();
        if crossing_margin(&cif::cif_scale(&raw, u)?.scaled) > MARGIN {
            return Ok(raw);
        }
    }
    Err(Error::InvalidConfig(format!(
        "no weights with crossing margin {MARGIN} for T={t} U={u}"
    ))
    .into())
}

fn random_labels(r: &mut DetRng, u: usize, v: usize) -> CliResult<LabelSeq> {
    let tokens = (0..u)
        .map(|_| 1 + (rng::uniform(r, 0.0, v as f64) as usize).min(v - 1))
        .collect();
    Ok(LabelSeq::new(tokens, v)?)
}

fn cmd_check_grad(a: CheckGradArgs) -> CliResult {
    if a.t == 0 || a.v == 0 {
        return Err(Error::InvalidConfig("t and v must be >= 1".into()).into());
    }
    if !(a.step > 0.0) {
        return Err(Error::InvalidConfig("step must be positive".into()).into());
    }
    let mut r = rng::split(a.seed, rng::stream::CHECK);
    let err = match a.kind {
        GradKind::Rnnt => {
            let (lat, y) = random_instance(&mut r, a.t, a.u, a.v);
            gradcheck::check_rnnt_grad(&lat, &y, a.step)?
        }
        GradKind::Bat => {
            let (lat, y) = random_instance(&mut r, a.t, a.u, a.v);
            let raw = raw_with_margin(&mut r, a.t, a.u)?;
            let c = cif::cif_boundary(&cif::clamp_weights(&cif::cif_scale(&raw, a.u)?.scaled));
            let w = build_window(&c, a.u, a.rd, a.ru, a.t)?;
            gradcheck::check_bat_grad(&gather_band(&lat, &w)?, &y, a.step)?
        }
        GradKind::Cif => {
            let d = 3;
            let raw = raw_with_margin(&mut r, a.t, a.u)?;
            let h = Tensor::new(vec![a.t, d], normal_vec(&mut r, a.t * d))?;
            let upstream = normal_vec(&mut r, a.u * d);
            let fire_err = gradcheck::check_cif_backward(&raw, &h, a.u, &upstream, a.step)?;
            let fired = cif::cif_fire(
                &cif::cif_scale(&raw, a.u)?.scaled,
                &h,
                a.u,
                cif::DEFAULT_THRESHOLD,
            )?;
            let clf = Classifier::random(a.v, d, &mut r);
            let y = random_labels(&mut r, a.u, a.v)?;
            fire_err.max(gradcheck::check_cif_ce(&fired, &y, &clf, a.step)?)
        }
        GradKind::Model => check_model(&a, &mut r)?,
    };
    println!("{}", fmt_sig(err));
    if err < a.tol {
        Ok(())
    } else {
        Err(Failure::GradCheck { err, tol: a.tol })
    }
}

fn check_model(a: &CheckGradArgs, r: &mut DetRng) -> CliResult<f64> {
    let config = ModelConfig {
        input_dim: 3,
        context: 2,
        enc_dim: 4,
        pred_dim: 3,
        joint_dim: 4,
        vocab: a.v,
        cif_kernel: 3,
    };
    let y = random_labels(r, a.u, a.v)?;
    let cfg = TrainConfig {
        mode: a.mode.into(),
        r_d: a.rd,
        r_u: a.ru,
        ..TrainConfig::default()
    };
    for attempt in 0..SAMPLE_ATTEMPTS as u64 {
        let m = ToyModel::new(config.clone(), a.seed.wrapping_add(attempt))?;
        let x = Tensor::new(vec![a.t, 3], normal_vec(r, a.t * 3))?;
        let raw = cif::cif_predict_weights(&m.encode(&x)?, &m.cif)?.raw;
        let total: f64 = raw.iter().sum();
        if crossing_margin(&cif::cif_scale(&raw, a.u)?.scaled) > MARGIN
            && (total - a.u as f64).abs() > MARGIN
        {
            return Ok(gradcheck::check_model_grad(&m, &x, &y, &cfg, a.step)?);
        }
    }
    Err(Error::InvalidConfig("no model sample with enough CIF crossing margin".into()).into())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let data = Dataset::load(&a.data)?;
    let config = ModelConfig {
        input_dim: data.input_dim,
        context: a.context,
        enc_dim: a.enc_dim,
        pred_dim: a.pred_dim,
        joint_dim: a.joint_dim,
        vocab: data.vocab,
        cif_kernel: a.cif_kernel,
    };
    let cfg = TrainConfig {
        mode: a.mode.into(),
        r_d: a.rd,
        r_u: a.ru,
        lambda_trans: a.lambda_trans,
        lambda_ce: a.lambda_ce,
        lambda_qua: a.lambda_qua,
        lr: a.lr,
        weight_decay: a.weight_decay,
        lr_decay: a.lr_decay,
        seed: a.seed,
        epochs: a.epochs,
        batch_size: a.batch_size,
        max_steps: a.max_steps,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let mut m = ToyModel::new(config, a.seed)?;
    let log = model::train(&mut m, &data, &cfg)?;
    if let Some(p) = &a.log {
        log.write_csv(p)?;
    }
    if let Some(p) = &a.model_out {
        m.save_json(p)?;
    }
    match log.rows.last() {
        Some(last) => println!(
            "steps {} loss_total {} loss_trans {} loss_ce {} loss_qua {} token_err {}",
            log.rows.len(),
            fmt_sig(last.losses.total),
            fmt_sig(last.losses.trans),
            fmt_sig(last.losses.ce),
            fmt_sig(last.losses.qua),
            fmt_sig(last.token_err)
        ),
        None => println!("steps 0"),
    }
    Ok(())
}

/// Decodes every utterance; `threads` workers take contiguous chunks and
/// results keep dataset order.
fn decode_all(
    m: &ToyModel,
    data: &Dataset,
    cfg: &DecodeConfig,
    threads: usize,
) -> CliResult<Vec<(LabelSeq, EmissionTrace)>> {
    let chunk = data.len().div_ceil(threads.max(1)).max(1);
    let parts: Vec<bat_core::Result<Vec<_>>> = std::thread::scope(|s| {
        let handles: Vec<_> = data
            .utts
            .chunks(chunk)
            .map(|utts| {
                s.spawn(move || {
                    utts.iter()
                        .map(|u| decode::greedy_decode(m, &u.x, cfg))
                        .collect::<bat_core::Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decode worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn reference_ends(data: &Dataset, frame_ms: f64) -> Vec<f64> {
    data.utts
        .iter()
        .map(|u| {
            u.ends
                .last()
                .map_or(0.0, |&t| decode::frame_end_ms(t, frame_ms))
        })
        .collect()
}

fn print_latency(report: &decode::LatencyReport) {
    println!(
        "avg_et_ms {} pr50_ms {} pr90_ms {} decoded {} empty {}",
        fmt_sig(report.avg_et_ms),
        fmt_sig(report.pr50_ms),
        fmt_sig(report.pr90_ms),
        report.per_utt.len(),
        report.empty
    );
}

fn cmd_decode(a: DecodeArgs, threads: usize) -> CliResult {
    if !(a.frame_ms > 0.0) {
        return Err(Error::InvalidConfig("frame-ms must be positive".into()).into());
    }
    let m = ToyModel::load_json(&a.model)?;
    let data = Dataset::load(&a.data)?;
    if data.vocab != m.config.vocab || data.input_dim != m.config.input_dim {
        return Err(Error::DimMismatch(format!(
            "dataset V={} D_in={}, model V={} D_in={}",
            data.vocab, data.input_dim, m.config.vocab, m.config.input_dim
        ))
        .into());
    }
    let cfg = DecodeConfig {
        max_symbols_per_frame: a.max_symbols,
        frame_ms: a.frame_ms,
    };
    let decoded = decode_all(&m, &data, &cfg, threads)?;
    let (mut errs, mut total) = (0, 0);
    for ((hyp, _), utt) in decoded.iter().zip(&data.utts) {
        errs += decode::edit_distance(hyp.tokens(), utt.labels.tokens());
        total += utt.labels.len();
    }
    let traces: Vec<EmissionTrace> = decoded.into_iter().map(|(_, t)| t).collect();
    if let Some(p) = &a.out {
        decode::write_traces_csv(&traces, p)?;
    }
    println!(
        "utterances {} token_err {}",
        data.len(),
        fmt_sig(errs as f64 / total.max(1) as f64)
    );
    let report = decode::latency_metrics(&traces, &reference_ends(&data, a.frame_ms))?;
    if let Some(p) = &a.report {
        report.write_csv(p)?;
    }
    print_latency(&report);
    Ok(())
}

fn cmd_latency(a: LatencyArgs) -> CliResult {
    if !(a.frame_ms > 0.0) {
        return Err(Error::InvalidConfig("frame-ms must be positive".into()).into());
    }
    let data = Dataset::load(&a.data)?;
    let traces = decode::read_traces_csv(&a.traces, a.frame_ms, data.len())?;
    let report = decode::latency_metrics(&traces, &reference_ends(&data, a.frame_ms))?;
    if let Some(p) = &a.out {
        report.write_csv(p)?;
    }
    if let Some(p) = &a.per_utt {
        report.write_per_utt_csv(p)?;
    }
    print_latency(&report);
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    let cfg = BenchConfig {
        n: a.n,
        t: a.t,
        u: a.u,
        v: a.v,
        r_d: a.rd,
        r_u: a.ru,
        dtype: match a.dtype {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        },
        repeats: a.repeats,
        warmup: a.warmup,
        seed: a.seed,
    };
    let report = bench::run_bench(&cfg)?;
    if let Some(p) = &a.out {
        let format = match a.format {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Text => ReportFormat::Text,
        };
        bench::emit_report(&report, p, format)?;
    }
    print!("{}", bench::report_text(&report));
    Ok(())
}

fn cmd_dump_cif(a: DumpCifArgs) -> CliResult {
    let raw = read_vector(&a.weights)?;
    let c = cif::write_cif_csv(&raw, a.u, &a.out)?;
    let joined: Vec<String> = c.boundary.iter().map(usize::to_string).collect();
    println!("c {}", joined.join(" "));
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let spec = SynthSpec {
        tokens_min: a.tokens_min,
        tokens_max: a.tokens_max,
        frames_min: a.frames_min,
        frames_max: a.frames_max,
        noise: a.noise,
        vocab: a.vocab,
        input_dim: a.vocab,
    };
    let data = synth_task(a.seed, a.n, &spec)?;
    data.save(&a.out)?;
    println!(
        "utterances {} manifest {} features {}",
        data.len(),
        a.out.display(),
        Dataset::features_path(&a.out).display()
    );
    Ok(())
}
