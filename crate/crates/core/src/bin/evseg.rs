//! Command-line front end: dataset generation and corruption, training,
//! evaluation, prediction, the experiment protocols, and report rendering.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data or format error,
//! 3 numeric failure (divergence).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use evseg::data::{self, CorruptKind, GeneratorConfig, Split};
use evseg::error::{Error, Result};
use evseg::losses::EclScope;
use evseg::metrics::{evaluate, EvalReport};
use evseg::net::{DropoutScope, DualNet};
use evseg::protocol::{
    self, ProtocolConfig, ProtocolKind, ProtocolReport, ReportFormat,
};
use evseg::train::{self, AnnealUnit, FusionRule, LossKind, TrainConfig};

#[derive(Parser)]
#[command(
    name = "evseg",
    version,
    about = "Scribble-supervised evidential segmentation on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scribble-annotated dataset.
    GenerateData(GenerateArgs),
    /// Write a corrupted copy of a dataset.
    Corrupt(CorruptArgs),
    /// Train a model and write the checkpoint and run record.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Evaluate(EvaluateArgs),
    /// Write per-pixel probabilities, uncertainty, and labels for samples.
    Predict(PredictArgs),
    /// Run a full experiment protocol and write its report.
    Protocol(ProtocolArgs),
    /// Render a JSON report file as an aligned table or CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Directory the dataset is written into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total sample count, split 5/7 train, 1/7 val, 1/7 test.
    #[arg(long, default_value_t = 280)]
    n: usize,
    /// Image edge length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Shift intensities and shapes out of distribution.
    #[arg(long)]
    ood: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Noise,
    Blur,
}

impl From<KindArg> for CorruptKind {
    fn from(kind: KindArg) -> CorruptKind {
        match kind {
            KindArg::Noise => CorruptKind::Noise,
            KindArg::Blur => CorruptKind::Blur,
        }
    }
}

#[derive(Args)]
struct CorruptArgs {
    /// Dataset directory to corrupt.
    #[arg(long = "in")]
    input: PathBuf,
    /// Directory the corrupted dataset is written into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Noise: intensity standard deviation. Blur: kernel width as a
    /// fraction of the image width.
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Training knobs shared by `train` and `protocol`. Every flag overrides
/// the JSON config file, which overrides the built-in defaults.
#[derive(Args)]
struct TrainOverrides {
    /// JSON file holding a training (or protocol) config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds initialization, shuffling, augmentation, and dropout.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, value_enum)]
    anneal_unit: Option<AnnealArg>,
    /// Disable rotation/flip augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Annealing denominator of the evidence regularizer.
    #[arg(long)]
    beta: Option<f64>,
    /// Weight of the consistency term.
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long, value_enum)]
    ecl_scope: Option<EclScopeArg>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long, value_enum)]
    dropout_scope: Option<DropoutScopeArg>,
    /// Channel width of the first encoder level.
    #[arg(long)]
    base_width: Option<usize>,
    /// Encoder depth (pooling stages).
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FusionArg {
    Dempster,
    Mean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Edl,
    Ce,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AnnealArg {
    Epoch,
    Iteration,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EclScopeArg {
    All,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DropoutScopeArg {
    Bottleneck,
    AllSkips,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.net.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        if let Some(batch) = self.batch {
            cfg.batch_size = batch;
        }
        if let Some(lr) = self.lr {
            cfg.learning_rate = lr;
        }
        if let Some(momentum) = self.momentum {
            cfg.momentum = momentum;
        }
        if let Some(wd) = self.weight_decay {
            cfg.weight_decay = wd;
        }
        if let Some(fusion) = self.fusion {
            cfg.fusion = match fusion {
                FusionArg::Dempster => FusionRule::Dempster,
                FusionArg::Mean => FusionRule::Mean,
            };
        }
        if let Some(loss) = self.loss {
            cfg.loss = match loss {
                LossArg::Edl => LossKind::Edl,
                LossArg::Ce => LossKind::Ce,
            };
        }
        if let Some(unit) = self.anneal_unit {
            cfg.anneal_unit = match unit {
                AnnealArg::Epoch => AnnealUnit::Epoch,
                AnnealArg::Iteration => AnnealUnit::Iteration,
            };
        }
        if self.no_augment {
            cfg.augment = false;
        }
        if let Some(beta) = self.beta {
            cfg.loss_config.beta = beta;
        }
        if let Some(lambda_u) = self.lambda_u {
            cfg.loss_config.lambda_u = lambda_u;
        }
        if let Some(scope) = self.ecl_scope {
            cfg.loss_config.ecl_scope = match scope {
                EclScopeArg::All => EclScope::All,
                EclScopeArg::Unlabeled => EclScope::Unlabeled,
            };
        }
        if let Some(rate) = self.dropout_rate {
            cfg.net.dropout_rate = rate;
        }
        if let Some(scope) = self.dropout_scope {
            cfg.net.dropout_scope = match scope {
                DropoutScopeArg::Bottleneck => DropoutScope::Bottleneck,
                DropoutScopeArg::AllSkips => DropoutScope::AllSkips,
            };
        }
        if let Some(width) = self.base_width {
            cfg.net.base_width = width;
        }
        if let Some(depth) = self.depth {
            cfg.net.depth = depth;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Directory for model.ckpt and run.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(split: SplitArg) -> Split {
        match split {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Write the report as JSON here as well.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Calibration bin count.
    #[arg(long)]
    ece_bins: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Directory the prediction tensors are written into.
    #[arg(long)]
    out: PathBuf,
    /// Sample id; defaults to every sample of --split.
    #[arg(long)]
    id: Option<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Clean,
    Robustness,
    Ood,
    Ablation,
}

impl From<ProtocolArg> for ProtocolKind {
    fn from(kind: ProtocolArg) -> ProtocolKind {
        match kind {
            ProtocolArg::Clean => ProtocolKind::Clean,
            ProtocolArg::Robustness => ProtocolKind::Robustness,
            ProtocolArg::Ood => ProtocolKind::Ood,
            ProtocolArg::Ablation => ProtocolKind::Ablation,
        }
    }
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(value_enum)]
    kind: ProtocolArg,
    /// In-distribution dataset directory (train, val, test splits).
    #[arg(long)]
    data: PathBuf,
    /// Shifted dataset directory; required by the ood protocol.
    #[arg(long)]
    ood_data: Option<PathBuf>,
    /// Directory for the report JSON and any checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Corruption kind of the robustness protocol.
    #[arg(long, value_enum)]
    corrupt_kind: Option<KindArg>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON report file written by evaluate or protocol.
    file: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    format: FormatArg,
    /// Write the rendering here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Text,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(format: FormatArg) -> ReportFormat {
        match format {
            FormatArg::Text => ReportFormat::Text,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_train_config(overrides: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match &overrides.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn load_protocol_config(args: &ProtocolArgs) -> Result<ProtocolConfig> {
    let mut cfg = match &args.overrides.config {
        Some(path) => read_json::<ProtocolConfig>(path)?,
        None => ProtocolConfig::default(),
    };
    args.overrides.apply(&mut cfg.train);
    if let Some(kind) = args.corrupt_kind {
        cfg.corrupt_kind = kind.into();
    }
    Ok(cfg)
}

fn print_epochs(record: &train::RunRecord) {
    for row in &record.epochs {
        let val = row
            .val_dice
            .map(|d| format!("{d:.4}"))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "epoch {:>3}: loss {:.4} (sup {:.4}, ecl {:.4}, lambda {:.2}) val dice {val} [{:.1}s]",
            row.epoch, row.total, row.supervised, row.consistency, row.lambda_t, row.seconds
        );
    }
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let cfg = GeneratorConfig {
        seed: args.seed,
        n_samples: args.n,
        height: args.size,
        width: args.size,
        ood: args.ood,
        ..GeneratorConfig::default()
    };
    let dataset = data::generate(&cfg)?;
    data::write(&dataset, &args.out)?;
    let m = dataset.manifest();
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        m.samples.len(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_corrupt(args: &CorruptArgs) -> Result<()> {
    let dataset = data::read(&args.input)?;
    let corrupted =
        protocol::corrupt_dataset(&dataset, args.kind.into(), args.sigma, args.seed)?;
    data::write(&corrupted, &args.out)?;
    println!(
        "wrote corrupted copy ({:?}, sigma {}) to {}",
        args.kind,
        args.sigma,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_train_config(&args.overrides)?;
    let dataset = data::read(&args.data)?;
    let (net, mut record) = train::train(&cfg, &dataset)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let ckpt = args.out.join("model.ckpt");
    net.save_checkpoint(&ckpt)?;
    record.checkpoint = Some(ckpt.clone());
    write_json(&args.out.join("run.json"), &record)?;
    print_epochs(&record);
    println!(
        "trained {} epochs in {:.1}s; checkpoint {}",
        record.epochs.len(),
        record.seconds,
        ckpt.display()
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let dataset = data::read(&args.data)?;
    let net = DualNet::load_checkpoint(&args.model)?;
    let mut eval_cfg = evseg::metrics::EvalConfig::default();
    if let Some(bins) = args.ece_bins {
        eval_cfg.ece_bins = bins;
    }
    let samples = dataset.split(args.split.into());
    let report = evaluate(&net, &samples, &eval_cfg)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print!("{}", protocol::render_eval(&report, ReportFormat::Text));
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let dataset = data::read(&args.data)?;
    let net = DualNet::load_checkpoint(&args.model)?;
    let samples: Vec<&data::ScribbleSample> = match &args.id {
        Some(id) => vec![dataset
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("no sample named {id}")))?],
        None => dataset.split(args.split.into()),
    };
    if samples.is_empty() {
        return Err(Error::Dataset("no samples to predict".into()));
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    for sample in &samples {
        let inference = net.inference(&sample.image)?;
        let base = args.out.join(&sample.id);
        evseg::tnsr::write_f64(&base.with_extension("prob.tnsr"), &inference.prob)?;
        evseg::tnsr::write_f64(
            &base.with_extension("uncertainty.tnsr"),
            &inference.uncertainty,
        )?;
        evseg::tnsr::write_labels(&base.with_extension("labels.tnsr"), &inference.labels)?;
    }
    println!(
        "wrote predictions for {} sample(s) to {}",
        samples.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_protocol(args: &ProtocolArgs) -> Result<()> {
    let cfg = load_protocol_config(args)?;
    let dataset = data::read(&args.data)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;

    let (report, net) = match args.kind.into() {
        ProtocolKind::Clean => {
            let (net, report) = protocol::run_clean(&cfg, &dataset)?;
            (ProtocolReport::Clean(report), Some(net))
        }
        ProtocolKind::Robustness => {
            let (net, report) = protocol::run_robustness(&cfg, &dataset)?;
            (ProtocolReport::Robustness(report), Some(net))
        }
        ProtocolKind::Ood => {
            let ood_dir = args.ood_data.as_ref().ok_or_else(|| {
                Error::InvalidConfig("the ood protocol needs --ood-data".into())
            })?;
            let shifted = data::read(ood_dir)?;
            let (net, report) = protocol::run_ood(&cfg, &dataset, &shifted)?;
            (ProtocolReport::Ood(report), Some(net))
        }
        ProtocolKind::Ablation => {
            let report = protocol::run_ablation(&cfg, &dataset)?;
            (ProtocolReport::Ablation(report), None)
        }
    };

    if let Some(net) = net {
        net.save_checkpoint(&args.out.join("model.ckpt"))?;
    }
    let name = match args.kind {
        ProtocolArg::Clean => "clean.json",
        ProtocolArg::Robustness => "robustness.json",
        ProtocolArg::Ood => "ood.json",
        ProtocolArg::Ablation => "ablation.json",
    };
    let path = args.out.join(name);
    write_json(&path, &report)?;
    print!("{}", protocol::render(&report, ReportFormat::Text));
    println!("report written to {}", path.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.file).map_err(|e| Error::Io {
        path: args.file.clone(),
        source: e,
    })?;
    let format: ReportFormat = args.format.into();
    let rendered = match serde_json::from_str::<ProtocolReport>(&text) {
        Ok(report) => protocol::render(&report, format),
        Err(_) => match serde_json::from_str::<EvalReport>(&text) {
            Ok(report) => protocol::render_eval(&report, format),
            Err(e) => {
                return Err(Error::Format {
                    path: args.file.clone(),
                    detail: format!("neither a protocol report nor an evaluation report: {e}"),
                })
            }
        },
    };
    match &args.out {
        Some(out) => fs::write(out, rendered).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData(args) => cmd_generate(args),
        Command::Corrupt(args) => cmd_corrupt(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Protocol(args) => cmd_protocol(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
