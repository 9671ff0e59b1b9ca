//! `dlf` command line: training, inference, reference operators, analysis
//! reports and the HTTP service.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use dlf_core::analysis::{count_report, effective_receptive_field, interpolation_eval, verify_multipath, weight_statistics};
use dlf_core::corpus::{load_dir, procedural_corpus};
use dlf_core::model::network_input;
use dlf_core::{checkpoint, BaseNetConfig, Error, HyperConfig, Image, Model, OperatorSpec, TrainConfig};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::Serialize;

use crate::api::{router, AppState};

/// Images in the default procedural evaluation set.
const EVAL_IMAGES: usize = 8;

#[derive(Parser)]
#[command(name = "dlf", version, about = "Decoupled weight learning for parameterized image operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory of training PNGs.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of evaluation PNGs; a procedural set is used otherwise.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Run a trained model on one image.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Go through the activation cache instead of a full forward pass.
        #[arg(long)]
        cheap: bool,
    },
    /// Run the reference implementation of an operator.
    Oracle {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Noise seed for stochastic operators.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write an analysis report.
    Analyze {
        #[command(subcommand)]
        report: Report,
    },
    /// Serve the tuning API for one checkpoint.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Args)]
struct Target {
    #[arg(long)]
    operator: String,
    /// Raw parameter values, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
    gamma: Vec<f64>,
}

#[derive(Subcommand)]
enum Report {
    /// Effective receptive field of one output pixel.
    Erf {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        input: PathBuf,
        /// Output pixel as `Y,X`.
        #[arg(long, value_delimiter = ',', num_args = 1, required = true)]
        point: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the input with the mask painted over it.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Per-layer statistics of the kernels two models use at one parameter.
    Weights {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        other: PathBuf,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-path equivalence check of the predicted kernels.
    Equiv {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter counts of an architecture.
    Counts {
        /// Training config whose `base` and `hyper` are counted; the
        /// default architecture otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the γ length.
        #[arg(long)]
        gamma_dim: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores at trained and held-out parameter values.
    Interp {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        operator: String,
        #[arg(long, value_delimiter = ',', required = true)]
        train: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        test: Vec<f64>,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
    Io(String),
    Numeric(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Core(e) => match e {
                Error::Parameter { .. }
                | Error::Config(_)
                | Error::Contract(_)
                | Error::Dimension(_)
                | Error::UnknownOperator(_)
                | Error::Json(_) => 1,
                Error::Io { .. } | Error::Image(_) | Error::Format(_) => 2,
                Error::NotConverged { .. } | Error::Diverged { .. } | Error::Tensor(_) | Error::CacheInvalid(_) => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 for usage errors, 2 for I/O errors and 3 for numeric failures.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Train {
            config,
            corpus,
            out,
            eval,
        } => train(&config, &corpus, &out, eval.as_deref()),
        Command::Apply {
            model,
            target,
            input,
            output,
            cheap,
        } => {
            let model = checkpoint::load(&model)?;
            let img = Image::load(&input)?;
            let out = if cheap {
                let prepared = model.prepare(&img)?;
                let (out, layers) = model.apply_cached(&prepared, &target.operator, &target.gamma)?;
                log::info!("recomputed {layers} layers");
                out
            } else {
                model.apply(&target.operator, &target.gamma, &img)?
            };
            Ok(out.save_png(&output)?)
        }
        Command::Oracle {
            target,
            input,
            output,
            seed,
        } => {
            let spec = OperatorSpec::lookup(&target.operator)?;
            let img = Image::load(&input)?;
            Ok(spec.apply(&img, &target.gamma, seed)?.save_png(&output)?)
        }
        Command::Analyze { report } => analyze(report),
        Command::Serve { model, port, host } => serve(model, &host, port),
    }
}

fn read_config(path: &Path) -> CliResult<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
    let has_hyper = value.get("hyper").is_some();
    let mut cfg: TrainConfig = serde_json::from_value(value).map_err(Error::from)?;
    if !has_hyper {
        let dim = dlf_core::GammaCodec::new(cfg.operators.clone())?.dim();
        cfg.hyper = HyperConfig::new(cfg.hyper.slots, dim);
    }
    Ok(cfg)
}

fn eval_images(dir: Option<&Path>, side: usize, seed: u64) -> CliResult<Vec<Image>> {
    Ok(match dir {
        Some(dir) => load_dir(dir)?,
        None => procedural_corpus(EVAL_IMAGES, side, side, seed)?,
    })
}

fn train(config: &Path, corpus: &Path, out: &Path, eval: Option<&Path>) -> CliResult {
    let cfg = read_config(config)?;
    cfg.validate()?;
    let images = load_dir(corpus)?;
    let eval_set = eval_images(eval, 2 * cfg.patch_size, cfg.seed ^ 0x5eed)?;
    let outcome = dlf_core::train(&cfg, &images, &eval_set)?;
    checkpoint::save(&outcome.model, out)?;
    if let Some(report) = outcome.reports.last() {
        print!("{}", report.json_lines());
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(|source| {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn encoded(model: &Model, target: &Target) -> CliResult<Vec<f32>> {
    Ok(model.gamma(&target.operator, &target.gamma)?.to_vec())
}

fn analyze(report: Report) -> CliResult {
    match report {
        Report::Erf {
            model,
            target,
            input,
            point,
            out,
            overlay,
        } => {
            let &[y, x] = point.as_slice() else {
                return Err(CliError::Usage(format!("--point takes Y,X, got {} value(s)", point.len())));
            };
            let model = checkpoint::load(&model)?;
            let img = Image::load(&input)?;
            let mask = effective_receptive_field(&model.net, &encoded(&model, &target)?, &network_input(&img)?, (y, x))?;
            if let Some(path) = overlay {
                mask.overlay(&img)?.save_png(&path)?;
            }
            println!("count={} degenerate={}", mask.count(), mask.degenerate);
            write_json(&out, &mask)
        }
        Report::Weights {
            model,
            other,
            target,
            out,
        } => {
            let a = checkpoint::load(&model)?;
            let b = checkpoint::load(&other)?;
            if a.net.base() != b.net.base() {
                return Err(CliError::Usage("the two models have different base architectures".into()));
            }
            let wa = a.net.predict_weights(&encoded(&a, &target)?)?;
            let wb = b.net.predict_weights(&encoded(&b, &target)?)?;
            write_json(&out, &weight_statistics(a.net.base(), &wa, &wb)?)
        }
        Report::Equiv {
            model,
            trials,
            tol,
            seed,
            out,
        } => {
            let model = checkpoint::load(&model)?;
            let report = verify_multipath(&model.net, trials, tol, &mut StdRng::seed_from_u64(seed))?;
            write_json(&out, &report)?;
            println!("worst={:e} passed={}", report.worst, report.passed);
            if report.passed {
                Ok(())
            } else {
                Err(CliError::Numeric(format!("multi-path identity violated: {:e} > {tol:e}", report.worst)))
            }
        }
        Report::Counts { config, gamma_dim, out } => {
            let (base, mut hyper) = match config {
                Some(path) => {
                    let cfg = read_config(&path)?;
                    (cfg.base, cfg.hyper)
                }
                None => (BaseNetConfig::default(), HyperConfig::default()),
            };
            if let Some(m) = gamma_dim {
                hyper.gamma_dim = m;
            }
            let r = count_report(&base, &hyper)?;
            println!(
                "conv={} norm={} bias={} predicted={} shared={} fc={} total={}",
                r.conv_count, r.norm_count, r.bias_count, r.predicted_count, r.shared_count, r.fc_count, r.total_saved
            );
            write_json(&out, &r)
        }
        Report::Interp {
            model,
            operator,
            train,
            test,
            eval,
            out,
        } => {
            let model = checkpoint::load(&model)?;
            let images = eval_images(eval.as_deref(), 96, 0x1e7a)?;
            write_json(&out, &interpolation_eval(&model, &operator, &train, &test, &images)?)
        }
    }
}

fn serve(model: PathBuf, host: &str, port: u16) -> CliResult {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address {host}:{port}: {e}")))?;
    if !model.is_file() {
        return Err(CliError::Io(format!("{}: no such checkpoint", model.display())));
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Io(format!("bind {addr}: {e}")))?;
        let state = AppState::new(None);
        let loader = Arc::clone(&state);
        tokio::task::spawn_blocking(move || match checkpoint::load(&model) {
            Ok(m) => {
                log::info!("loaded {}", model.display());
                loader.set_model(m);
            }
            Err(e) => log::error!("cannot load {}: {e}", model.display()),
        });
        eprintln!("listening on http://{addr}");
        axum::serve(listener, router(state)).await.map_err(|e| CliError::Io(e.to_string()))
    })
}
