use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mimalloc::MiMalloc;
use sssd_core::checkpoint::Checkpoint;
use sssd_core::config::RunConfig;
use sssd_core::data::{load_grid, save_grid, synth_dataset, Dataset, Split, SynthKind, SynthSpec};
use sssd_core::diffusion::DiffusionMode;
use sssd_core::masking::{write_mask_csv, Scenario};
use sssd_core::pipeline::{self, ImputeRequest};
use sssd_core::{Error, SeededRng, Tensor};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "sssd", version, about = "Diffusion imputation and forecasting for multichannel time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, or convert a CSV file into the dataset format.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, loss trace and the effective configuration.
    Train(TrainArgs),
    /// Draw imputations for a dataset split and score them.
    Impute(ImputeArgs),
    /// Score a prediction grid against ground truth.
    Eval(EvalArgs),
    /// Print imputation masks as CSV.
    MaskDump(MaskDumpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Sines,
    Damped,
    SquareMix,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "sines")]
    kind: Kind,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 128)]
    length: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Read rows of `--channels` consecutive channel series from this CSV instead.
    #[arg(long)]
    from_csv: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

/// Flags overriding fields of the run configuration.
#[derive(Args)]
struct Overrides {
    /// Run configuration (JSON); desk defaults when absent.
    #[arg(long, env = "SSSD_CONFIG")]
    config: Option<PathBuf>,
    /// Training scenario, e.g. `rm:0.2`, `bm:0.2`, `tf:24`.
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Evaluation scenario when it differs from the training one.
    #[arg(long)]
    eval_scenario: Option<Scenario>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<DiffusionMode>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Use a single S4 layer per residual block.
    #[arg(long)]
    single_s4: bool,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    channel_split_width: Option<usize>,
}

fn parse_mode(s: &str) -> Result<DiffusionMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "d0" => Ok(DiffusionMode::D0),
        "d1" => Ok(DiffusionMode::D1),
        _ => Err(format!("unknown mode {s:?} (expected d0 or d1)")),
    }
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(Scenario::Rm { ratio: 0.2 }),
        };
        if let Some(s) = self.scenario {
            cfg.train_scenario = s;
        }
        if let Some(s) = self.eval_scenario {
            cfg.eval_scenario = Some(s);
        }
        if let Some(v) = self.steps {
            cfg.diffusion.steps = v;
        }
        if let Some(v) = self.mode {
            cfg.diffusion.mode = v;
        }
        if let Some(v) = self.iterations {
            cfg.training.iterations = v;
        }
        if let Some(v) = self.batch_size {
            cfg.training.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.training.learning_rate = v;
        }
        if self.single_s4 {
            cfg.model.second_s4 = false;
        }
        if let Some(v) = self.samples {
            cfg.sampling.samples = v;
        }
        if self.channel_split_width.is_some() {
            cfg.channel_split_width = self.channel_split_width;
        }
        cfg.validate_static()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct ImputeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Impute only the first N samples of the split.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    m_imp: PathBuf,
    #[arg(long)]
    m_mvi: PathBuf,
}

#[derive(Args)]
struct MaskDumpArgs {
    #[arg(long)]
    scenario: Scenario,
    #[arg(long)]
    channels: usize,
    #[arg(long)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Impute(a) => impute(a),
        Command::Eval(a) => eval(a),
        Command::MaskDump(a) => mask_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NumericFailure { .. } | Error::NonFinite(_) | Error::Singular { .. }) => 3,
        _ => 2,
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let data = match &a.from_csv {
        Some(path) => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            Dataset::from_csv(BufReader::new(f), a.channels)?
        }
        None => synth_dataset(&SynthSpec {
            kind: match a.kind {
                Kind::Sines => SynthKind::Sines,
                Kind::Damped => SynthKind::Damped,
                Kind::SquareMix => SynthKind::SquareMix,
            },
            samples: a.samples,
            channels: a.channels,
            length: a.length,
            noise_sd: a.noise_sd,
            seed: a.seed,
        })?,
    };
    data.save(&a.out)?;
    let (n, k, l) = data.dims();
    log::info!("wrote {n} samples of {k} x {l} to {}", a.out.display());
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.overrides.resolve()?;
    cfg.training.seed = a.seed;
    let data = load_data(&a.data)?;
    fs::create_dir_all(&a.out_dir)?;
    let out = pipeline::train(&cfg, &data, |_| {})?;
    let (_, k, l) = data.dims();
    cfg.model = cfg.model_for(k, l)?;
    cfg.save(&a.out_dir.join("run_config.json"))?;
    out.checkpoint.save(&a.out_dir.join("checkpoint.bin"))?;
    let mut trace = BufWriter::new(File::create(a.out_dir.join("loss_trace.csv"))?);
    pipeline::write_trace_csv(&out.trace, &mut trace)?;
    trace.flush()?;
    let summary = serde_json::json!({
        "iterations": out.trace.len(),
        "final_loss": out.trace.last().map(|r| r.loss),
        "validation_loss": out.validation_loss,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn impute(a: ImputeArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))?;
    let data = load_data(&a.data)?;
    let req = ImputeRequest {
        scenario: cfg.eval_scenario(),
        samples: cfg.sampling.samples,
        quantiles: cfg.sampling.quantiles.clone(),
        seed: a.seed,
        split: match a.split {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        },
        batch_size: cfg.sampling.batch_size,
        limit: a.limit,
    };
    let out = pipeline::impute(&ck, &data, &req)?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir)?;
    let mut shape = vec![out.draws.len()];
    shape.extend_from_slice(out.truth.shape());
    let draws = Tensor::new(shape, out.draws.iter().flat_map(|d| d.data().iter().copied()).collect())?;
    save_grid(&dir.join("samples.grid"), &draws)?;
    save_grid(&dir.join("mean.grid"), &out.summary.mean)?;
    save_grid(&dir.join("truth.grid"), &out.truth)?;
    save_grid(&dir.join("m_imp.grid"), &out.m_imp)?;
    save_grid(&dir.join("m_mvi.grid"), &out.m_mvi)?;
    let mut q = BufWriter::new(File::create(dir.join("quantiles.csv"))?);
    pipeline::write_quantile_csv(&out, &mut q)?;
    q.flush()?;
    let report = serde_json::to_string_pretty(&out.report)?;
    fs::write(dir.join("report.json"), &report)?;
    let brief = serde_json::json!({
        "scenario": out.report.scenario.to_string(),
        "draws": out.report.draws,
        "n_eval": out.report.n_eval,
        "per_draw_average": out.report.per_draw_average,
        "mean_imputation": {
            "mae": out.report.mean_imputation.mae,
            "rmse": out.report.mean_imputation.rmse,
            "mre": out.report.mean_imputation.mre,
        },
    });
    println!("{}", serde_json::to_string_pretty(&brief)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let read = |p: &Path| load_grid(p).with_context(|| format!("reading grid {}", p.display()));
    let report = pipeline::evaluate(&read(&a.pred)?, &read(&a.truth)?, &read(&a.m_imp)?, &read(&a.m_mvi)?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn mask_dump(a: MaskDumpArgs) -> Result<()> {
    a.scenario.validate(a.length)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let root = SeededRng::new(a.seed);
    for i in 0..a.count {
        let mask = a.scenario.generate(a.channels, a.length, &mut root.fork(i as u64))?;
        if a.count > 1 {
            writeln!(out, "# mask {i}")?;
        }
        write_mask_csv(&mask, &mut out)?;
    }
    out.flush()?;
    Ok(())
}
