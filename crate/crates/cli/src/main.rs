use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use bmnet::bench::{count_ops, runtime_probe};
use bmnet::bm::ExpLnLut;
use bmnet::dataio::{load_idx_pair, load_mnist_dir, load_model, save_model, Dataset, ModelMeta, SplitKind};
use bmnet::error::{Error, ErrorCategory};
use bmnet::trainer::{
    evaluate_with, results_csv, results_markdown, train_classical, train_method, EvalReport, Method, Optimizer,
    PipelineOutcome, Splits, TrainConfig,
};
use bmnet::NetworkSpec;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "bmnet", version, about = "Train, convert and evaluate bipolar morphological networks")]
struct Cli {
    /// TOML file with defaults for any long flag (flags take precedence).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classical network.
    Train(CommonArgs),
    /// Convert the first `--depth` conv/fc layers without any training.
    Convert(CommonArgs),
    /// Convert layer by layer with Method 1 or 2 fine-tuning.
    Finetune(CommonArgs),
    /// Accuracy of a saved model on a data split.
    Eval(CommonArgs),
    /// Operation counts and indicative forward latency.
    Bench(CommonArgs),
    /// Every depth up to `--max-depth` for the chosen methods.
    Sweep(CommonArgs),
    /// Print the parsed architecture and parameter shapes.
    Inspect(CommonArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Markdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum OptimizerArg {
    Adam,
    Sgd,
}

/// Flags shared by all subcommands; each subcommand checks the ones it needs.
/// Field names double as config-file keys.
#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CommonArgs {
    /// Architecture in layer notation, e.g. "conv1(30, 5, 5) - relu1 - fc1(10) - softmax1".
    #[arg(long)]
    arch: Option<String>,
    /// File holding the architecture string.
    #[arg(long)]
    arch_file: Option<PathBuf>,
    /// Input shape as C,H,W (only needed for inspect/bench without data or a model).
    #[arg(long)]
    input_shape: Option<String>,
    /// Directory with the four MNIST IDX files.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Directory with IDX files under the MNIST names but any image size and class count.
    #[arg(long)]
    idx_dir: Option<PathBuf>,
    /// Number of classes for --idx-dir.
    #[arg(long)]
    classes: Option<usize>,
    /// Input model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output model file (train, convert, finetune).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Conversion method: 1 (freeze converted layers) or 2 (train everything).
    #[arg(long)]
    method: Option<u8>,
    /// Sweep both methods.
    #[arg(long)]
    both_methods: Option<bool>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Evaluate with an exp/ln lookup table of this many bins.
    #[arg(long)]
    lut_bins: Option<usize>,
    #[arg(long)]
    lut_range: Option<f64>,
    /// Forward passes timed by bench.
    #[arg(long)]
    reps: Option<usize>,
    /// Use only the first N training images (quick runs).
    #[arg(long)]
    train_limit: Option<usize>,
}

macro_rules! merge_fields {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f; } )*
    };
}

impl CommonArgs {
    /// Fills unset flags from the config file.
    fn merge(mut self, file: CommonArgs) -> Self {
        merge_fields!(self, file; arch, arch_file, input_shape, mnist_dir, idx_dir, classes, model, out,
            report, format, method, both_methods, depth, max_depth, split, optimizer, lr, batch_size, epochs,
            restarts, seed, val_fraction, patience, lut_bins, lut_range, reps, train_limit);
        self
    }

    fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let optimizer = match self.optimizer {
            Some(OptimizerArg::Sgd) => Optimizer::Sgd { lr: 0.01, momentum: 0.9 },
            _ => d.optimizer.clone(),
        };
        let optimizer = match self.lr {
            Some(lr) => optimizer.with_lr(lr),
            None => optimizer,
        };
        TrainConfig {
            optimizer,
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            restarts: self.restarts.unwrap_or(d.restarts),
            seed: self.seed.unwrap_or(d.seed),
            val_fraction: self.val_fraction.unwrap_or(d.val_fraction),
            depth: self.depth.unwrap_or(d.depth),
            patience: match self.patience {
                Some(0) => None,
                Some(p) => Some(p),
                None => d.patience,
            },
            ..d
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

fn require<'a, T>(v: &'a Option<T>, flag: &str, cmd: &str) -> Result<&'a T, Error> {
    v.as_ref().ok_or_else(|| usage(format!("`{cmd}` requires --{flag}")))
}

struct Data {
    full_train: Dataset,
    test: Dataset,
}

impl Data {
    fn load(a: &CommonArgs, cmd: &str) -> Result<Self, Error> {
        let (full_train, test) = match (&a.mnist_dir, &a.idx_dir) {
            (Some(d), None) => load_mnist_dir(d)?,
            (None, Some(d)) => {
                let classes = *require(&a.classes, "classes", cmd)?;
                let train = load_idx_pair(
                    d.join("train-images-idx3-ubyte"),
                    d.join("train-labels-idx1-ubyte"),
                    classes,
                )?;
                let test = load_idx_pair(
                    d.join("t10k-images-idx3-ubyte"),
                    d.join("t10k-labels-idx1-ubyte"),
                    classes,
                )?;
                (train, test.with_tag(SplitKind::Test))
            }
            (Some(_), Some(_)) => return Err(usage("--mnist-dir and --idx-dir are mutually exclusive")),
            (None, None) => return Err(usage(format!("`{cmd}` requires --mnist-dir or --idx-dir"))),
        };
        let full_train = match a.train_limit {
            Some(n) => full_train.take(n),
            None => full_train,
        };
        Ok(Self { full_train, test })
    }

    fn splits(&self, cfg: &TrainConfig) -> Result<Splits, Error> {
        Splits::new(&self.full_train, self.test.clone(), cfg.val_fraction, cfg.seed)
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3], Error> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--input-shape `{s}` is not C,H,W")))?;
    <[usize; 3]>::try_from(dims).map_err(|_| usage(format!("--input-shape `{s}` is not C,H,W")))
}

fn architecture(a: &CommonArgs, cmd: &str) -> Result<String, Error> {
    match (&a.arch, &a.arch_file) {
        (Some(s), None) => Ok(s.clone()),
        (None, Some(p)) => std::fs::read_to_string(p)
            .map(|s| s.trim().to_string())
            .map_err(|e| Error::Io { path: p.clone(), source: e }),
        (Some(_), Some(_)) => Err(usage("--arch and --arch-file are mutually exclusive")),
        (None, None) => Err(usage(format!("`{cmd}` requires --arch or --arch-file"))),
    }
}

fn load(a: &CommonArgs, cmd: &str) -> Result<(NetworkSpec, ModelMeta), Error> {
    load_model(require(&a.model, "model", cmd)?)
}

fn emit(a: &CommonArgs, text: &str) -> Result<(), Error> {
    match &a.report {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io { path: p.clone(), source: e }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn eval_text(label: &str, r: &EvalReport) -> String {
    let mut s = format!(
        "{label}: accuracy {:.4}, mean loss {:.4}, samples {}\n",
        r.accuracy, r.mean_loss, r.samples
    );
    for l in &r.saturation {
        s.push_str(&format!("  saturation {}: {}/{}\n", l.layer, l.saturated, l.total));
    }
    s
}

fn table(a: &CommonArgs, outcomes: &[&PipelineOutcome]) -> Result<String, Error> {
    match a.format.unwrap_or(Format::Csv) {
        Format::Csv => results_csv(outcomes),
        Format::Markdown => Ok(results_markdown(outcomes)),
    }
}

fn meta(cfg: &TrainConfig) -> ModelMeta {
    ModelMeta {
        seed: cfg.seed,
        config_digest: cfg.digest(),
    }
}

fn run(cmd: Command, file: Option<CommonArgs>) -> Result<(), Error> {
    let (name, args) = match cmd {
        Command::Train(a) => ("train", a),
        Command::Convert(a) => ("convert", a),
        Command::Finetune(a) => ("finetune", a),
        Command::Eval(a) => ("eval", a),
        Command::Bench(a) => ("bench", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Inspect(a) => ("inspect", a),
    };
    let a = match file {
        Some(f) => args.merge(f),
        None => args,
    };
    let cfg = a.train_config();
    match name {
        "train" => {
            let arch = architecture(&a, name)?;
            let out = require(&a.out, "out", name)?;
            cfg.validate()?;
            let data = Data::load(&a, name)?;
            let net = NetworkSpec::parse(&arch, data.full_train.image_shape())?;
            let trained = train_classical(&net, &data.splits(&cfg)?, &cfg)?;
            save_model(&trained.net, &meta(&cfg), out)?;
            emit(&a, &eval_text("test", &trained.test))
        }
        "convert" => {
            let out = require(&a.out, "out", name)?;
            let depth = *require(&a.depth, "depth", name)?;
            let (mut net, m) = load(&a, name)?;
            let order = net.convertible_layers();
            if depth > order.len() {
                return Err(usage(format!("depth {depth} exceeds the {} convertible layers", order.len())));
            }
            for layer in &order[..depth] {
                if !net.layer(layer).is_some_and(|l| l.kind.is_bm()) {
                    net.convert_in_place(layer)?;
                }
            }
            save_model(&net, &m, out)?;
            emit(&a, &format!("{}\n", net.architecture()))
        }
        "finetune" | "sweep" => {
            let (net, _) = load(&a, name)?;
            let methods = match (a.method, a.both_methods.unwrap_or(false)) {
                (None, true) => vec![Method::FreezeConverted, Method::TrainAll],
                (Some(m), false) => vec![Method::from_number(m)?],
                (Some(_), true) => return Err(usage("--method and --both-methods are mutually exclusive")),
                (None, false) => return Err(usage(format!("`{name}` requires --method 1|2 or --both-methods true"))),
            };
            let cfg = if name == "sweep" {
                TrainConfig {
                    depth: *require(&a.max_depth, "max-depth", name)?,
                    ..cfg
                }
            } else {
                require(&a.depth, "depth", name)?;
                cfg
            };
            if name == "finetune" && methods.len() != 1 {
                return Err(usage("`finetune` takes a single --method"));
            }
            if name == "finetune" {
                require(&a.out, "out", name)?;
            }
            cfg.validate()?;
            let data = Data::load(&a, name)?;
            let splits = data.splits(&cfg)?;
            let outcomes = methods
                .into_iter()
                .map(|m| train_method(m, &net, &splits, &cfg))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(out) = &a.out {
                save_model(&outcomes[0].net, &meta(&cfg), out)?;
            }
            emit(&a, &table(&a, &outcomes.iter().collect::<Vec<_>>())?)
        }
        "eval" => {
            let (net, _) = load(&a, name)?;
            let data = Data::load(&a, name)?;
            let ds = match a.split.unwrap_or(SplitArg::Test) {
                SplitArg::Test => data.test.clone(),
                SplitArg::Train => data.splits(&cfg)?.train,
                SplitArg::Val => data.splits(&cfg)?.val,
            };
            let lut: Option<Arc<dyn bmnet::tensor::Activations>> = match a.lut_bins {
                Some(bins) => Some(Arc::new(ExpLnLut::new(bins, a.lut_range.unwrap_or(30.0))?)),
                None => None,
            };
            let report = evaluate_with(&net, &ds, lut, cfg.eval_batch)?;
            emit(&a, &eval_text("eval", &report))
        }
        "bench" => {
            let (net, _) = load(&a, name)?;
            let shape = match &a.input_shape {
                Some(s) => parse_shape(s)?,
                None => net.input_shape(),
            };
            let ops = count_ops(&net, shape)?;
            let mut text = match a.format.unwrap_or(Format::Csv) {
                Format::Csv => ops.to_csv(),
                Format::Markdown => ops.to_markdown(),
            };
            let reps = a.reps.unwrap_or(0);
            if reps > 0 {
                let p = runtime_probe(&net, shape, reps)?;
                text.push_str(&format!(
                    "# indicative single-image forward latency over {} reps: median {:.3} ms, stddev {}, min {:.3} ms, max {:.3} ms\n",
                    p.reps,
                    p.median * 1e3,
                    p.stddev.map_or("n/a".into(), |s| format!("{:.3} ms", s * 1e3)),
                    p.min * 1e3,
                    p.max * 1e3,
                ));
            }
            emit(&a, &text)
        }
        "inspect" => {
            let net = match (&a.model, &a.arch, &a.arch_file) {
                (Some(_), None, None) => load(&a, name)?.0,
                (None, _, _) => {
                    let arch = architecture(&a, name)?;
                    let shape = parse_shape(a.input_shape.as_deref().unwrap_or("1,28,28"))?;
                    NetworkSpec::parse(&arch, shape)?
                }
                _ => return Err(usage("give either --model or --arch/--arch-file")),
            };
            emit(&a, &format!("{net}"))
        }
        _ => unreachable!(),
    }
}

fn read_config(path: &Path) -> Result<CommonArgs, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Usage => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let file = match cli.config.as_deref().map(read_config).transpose() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    match run(cli.command, file) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
