use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use xlcnet::compression::{
    compression_ratio, fine_tune, prune, quantize_model, QuantizedModel, SizeReport,
};
use xlcnet::config::{EstimatorList, ExperimentConfig, SnrList};
use xlcnet::io;
use xlcnet::nn::{gradient_suite, Component};
use xlcnet::sweep::{
    benchmark_runtime, estimate_covariance, run_snr_sweep, Estimator, SweepModels,
};
use xlcnet::xlcnet::{
    flops, make_dataset, train, Dataset, Model, ParamConvention, SnrRange, TrainReport,
};
use xlcnet::Model32;

#[derive(Parser)]
#[command(
    name = "xlcnet",
    version,
    about = "XL-MIMO channel estimation with a compressed residual CNN"
)]
struct Cli {
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true, env = "XLCNET_CONFIG")]
    config: Option<PathBuf>,
    /// Override a config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it in XLCD format.
    Generate(GenerateArgs),
    /// Train the denoiser.
    Train(TrainArgs),
    /// Globally magnitude-prune a trained model.
    Prune(PruneArgs),
    /// Retrain a pruned model with its mask frozen.
    Finetune(TrainArgs),
    /// Quantize the kernels of a (pruned) model.
    Quantize(QuantizeArgs),
    /// NMSE versus SNR for the chosen estimators, as CSV.
    Eval(EvalArgs),
    /// Parameter counts, MACs, storage sizes and optional timing.
    Report(ReportArgs),
    /// Randomized finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    /// Sample count (default: the config's count for the split).
    #[arg(long)]
    count: Option<usize>,
    /// SNR of a test split in dB.
    #[arg(long, default_value_t = 10.0)]
    snr: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Starting checkpoint (required for finetune; train starts fresh without it).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training set; simulated from the config when absent.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation set; simulated from the config when absent.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss history as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pruning ratio in (0, 1).
    #[arg(long)]
    ratio: Option<f64>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    bits: Option<u8>,
}

#[derive(Args)]
struct EvalArgs {
    /// Comma-separated: ls, lmmse, xlcnet, cxlcnet.
    #[arg(long)]
    estimators: Option<String>,
    /// `lo:hi:step` or a comma list, in dB.
    #[arg(long)]
    snr: Option<String>,
    /// Full-precision checkpoint for `xlcnet`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Quantized checkpoint for `cxlcnet`.
    #[arg(long)]
    quantized: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    /// CSV destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Full-precision checkpoint (default: a freshly built model).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Quantized checkpoint to size against the dense model.
    #[arg(long)]
    quantized: Option<PathBuf>,
    /// Also time inference.
    #[arg(long)]
    benchmark: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random shapes per component.
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn load_config(cli: &Cli, extra: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)
        .context("applying --set overrides")?;
    cfg.apply_overrides(extra)
        .context("applying command-line flags")?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<io::ModelCheckpoint> {
    if !path.exists() {
        bail!("checkpoint not found: {}", path.display());
    }
    io::load_model(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_quantized(path: &Path) -> Result<io::QuantizedCheckpoint> {
    if !path.exists() {
        bail!("quantized checkpoint not found: {}", path.display());
    }
    io::load_quantized(path)
        .with_context(|| format!("loading quantized checkpoint {}", path.display()))
}

fn load_dataset(path: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    if !path.exists() {
        bail!("dataset not found: {}", path.display());
    }
    let (data, header) =
        io::read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
    let (rows, cols) = cfg.grid()?;
    if (header.rows as usize, header.cols as usize) != (rows, cols) {
        bail!(
            "dataset {} has {}x{} grids but the config expects {rows}x{cols}",
            path.display(),
            header.rows,
            header.cols
        );
    }
    Ok(data)
}

fn simulate(
    cfg: &ExperimentConfig,
    split: Split,
    count: Option<usize>,
    snr: f64,
) -> Result<Dataset> {
    let (rows, cols) = cfg.grid()?;
    let (spec, n, range, label) = match split {
        Split::Train => (
            cfg.spec()?,
            cfg.train_samples,
            cfg.train_snr(),
            "train-data",
        ),
        Split::Val => (cfg.spec()?, cfg.val_samples, cfg.train_snr(), "val-data"),
        Split::Test => (
            cfg.test_spec()?,
            cfg.test_samples,
            SnrRange::point(snr),
            "test-data",
        ),
    };
    if let (Split::Train, Some(w)) = (split, spec.far_path_warning()) {
        log::warn!("{w}");
    }
    let n = count.unwrap_or(n);
    info!("simulating {n} samples ({label})");
    Ok(make_dataset(
        &spec,
        n,
        range,
        cfg.stage_seed(label),
        rows,
        cols,
    )?)
}

fn datasets(cfg: &ExperimentConfig, args: &TrainArgs) -> Result<(Dataset, Dataset)> {
    let tr = match &args.train {
        Some(p) => load_dataset(p, cfg)?,
        None => simulate(cfg, Split::Train, None, 0.0)?,
    };
    let va = match &args.val {
        Some(p) => load_dataset(p, cfg)?,
        None => simulate(cfg, Split::Val, None, 0.0)?,
    };
    Ok((tr, va))
}

fn write_history(path: &Path, report: &TrainReport) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    s.push_str(&format!("0,,{:.9e}\n", report.initial_val_loss));
    for e in &report.history {
        s.push_str(&format!(
            "{},{:.9e},{:.9e}\n",
            e.epoch, e.train_loss, e.val_loss
        ));
    }
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn summarize(report: &TrainReport) {
    println!(
        "validation loss {:.6} -> {:.6} over {} epochs (best epoch {})",
        report.initial_val_loss,
        report.final_val_loss(),
        report.history.len(),
        report.best_val_epoch
    );
}

/// `1234567` -> `1,234,567`.
fn grouped(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs) -> Result<()> {
    let cfg = load_config(cli, &[])?;
    let data = simulate(&cfg, args.split, args.count, args.snr)?;
    io::write_dataset(&args.out, &data, &cfg.provenance())
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} samples to {}", data.len(), args.out.display());
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let extra: Vec<String> = args
        .epochs
        .map(|e| format!("epochs={e}"))
        .into_iter()
        .collect();
    let cfg = load_config(cli, &extra)?;
    let mut model = match &args.model {
        Some(p) => load_model(p)?.model,
        None => Model::<f32>::build(&cfg.model_config(), cfg.stage_seed("init"))?,
    };
    let (tr, va) = datasets(&cfg, args)?;
    let report = train(
        &mut model,
        &tr,
        &va,
        &cfg.train_config(),
        cfg.stage_seed("train"),
        None,
        |_| {},
    )?;
    summarize(&report);
    if let Some(h) = &args.history {
        write_history(h, &report)?;
    }
    io::save_model(&args.out, &model, None, &cfg.provenance())
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("saved {}", args.out.display());
    Ok(())
}

fn cmd_prune(cli: &Cli, args: &PruneArgs) -> Result<()> {
    let extra: Vec<String> = args
        .ratio
        .map(|r| format!("prune_ratio={r}"))
        .into_iter()
        .collect();
    let cfg = load_config(cli, &extra)?;
    let ck = load_model(&args.model)?;
    let (pruned, mask, threshold) = prune(&ck.model, cfg.prune_ratio)?;
    println!(
        "threshold {threshold:.6e}: zeroed {} of {} kernel weights, {} retained (achieved ratio {:.6})",
        grouped(mask.pruned() as u64),
        grouped(mask.total() as u64),
        grouped(mask.retained() as u64),
        mask.pruned() as f64 / mask.total() as f64
    );
    io::save_model(&args.out, &pruned, Some(&mask), &cfg.provenance())
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("saved {}", args.out.display());
    Ok(())
}

fn cmd_finetune(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let extra: Vec<String> = args
        .epochs
        .map(|e| format!("finetune_epochs={e}"))
        .into_iter()
        .collect();
    let cfg = load_config(cli, &extra)?;
    let path = args
        .model
        .as_ref()
        .context("finetune needs --model with a pruned checkpoint")?;
    let ck = load_model(path)?;
    let mask = ck.mask.with_context(|| {
        format!(
            "{} carries no pruning mask; run prune first",
            path.display()
        )
    })?;
    let mut model = ck.model;
    let (tr, va) = datasets(&cfg, args)?;
    let report = fine_tune(
        &mut model,
        &mask,
        &tr,
        &va,
        &cfg.finetune_config(),
        cfg.stage_seed("finetune"),
        |_| {},
    )?;
    summarize(&report);
    if let Some(h) = &args.history {
        write_history(h, &report)?;
    }
    io::save_model(&args.out, &model, Some(&mask), &cfg.provenance())
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("saved {}", args.out.display());
    Ok(())
}

fn cmd_quantize(cli: &Cli, args: &QuantizeArgs) -> Result<()> {
    let extra: Vec<String> = args.bits.map(|b| format!("bits={b}")).into_iter().collect();
    let cfg = load_config(cli, &extra)?;
    let ck = load_model(&args.model)?;
    let q = quantize_model(&ck.model, ck.mask.as_ref(), cfg.bits)?;
    print_size(&ck.model, &q)?;
    io::save_quantized(&args.out, &q, &cfg.provenance())
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("saved {}", args.out.display());
    Ok(())
}

fn print_size(dense: &Model32, q: &QuantizedModel) -> Result<()> {
    let s = SizeReport::new(dense, q);
    let kappa = s.achieved_kappa();
    println!("bit width: {}", s.bits);
    println!(
        "kernel weights: {} retained of {} (pruned fraction {:.4})",
        grouped(s.retained_weights as u64),
        grouped(s.kernel_weights as u64),
        kappa
    );
    println!(
        "stored bits: {} codes + {} retention bitmap + {} full-precision bias/BN = {}",
        grouped(s.code_bits),
        grouped(s.bitmap_bits),
        grouped(s.exempt_bits),
        grouped(s.total_bits())
    );
    println!("dense 32-bit size: {} bits", grouped(s.dense_bits));
    println!(
        "nominal ratio 32/(b(1-kappa)): {:.2} (ignores bitmap and full-precision overhead)",
        compression_ratio(kappa, s.bits)?
    );
    println!(
        "effective ratio, kernels + bias/BN counted as weights: {:.2}",
        xlcnet::compression::effective_ratio(
            s.dense_params as f64,
            (s.retained_weights + s.exempt_params) as f64,
            s.bits
        )
    );
    println!("overall ratio including bitmap: {:.2}", s.overall_ratio());
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(e) = &args.estimators {
        extra.push(format!("estimators={e}"));
    }
    if let Some(s) = &args.snr {
        extra.push(format!("snr_sweep={s}"));
    }
    if let Some(n) = args.samples {
        extra.push(format!("test_samples={n}"));
    }
    let cfg = load_config(cli, &extra)?;
    let EstimatorList(estimators) = &cfg.estimators;
    let SnrList(snrs) = &cfg.snr_sweep;
    let spec = cfg.test_spec()?;

    let full = match &args.model {
        Some(p) => Some(load_model(p)?.model),
        None => None,
    };
    let compressed = match &args.quantized {
        Some(p) => Some(load_quantized(p)?.model.dequantize::<f32>()?),
        None => None,
    };
    if estimators.contains(&Estimator::Xlcnet) && full.is_none() {
        bail!("estimator xlcnet needs --model");
    }
    if estimators.contains(&Estimator::Cxlcnet) && compressed.is_none() {
        bail!("estimator cxlcnet needs --quantized");
    }
    let covariance = if estimators.contains(&Estimator::Lmmse) {
        info!(
            "estimating channel covariance from {} draws",
            cfg.covariance_samples
        );
        Some(estimate_covariance(
            &spec,
            cfg.covariance_samples,
            cfg.stage_seed("covariance"),
        )?)
    } else {
        None
    };
    let models = SweepModels {
        xlcnet: full.as_ref(),
        cxlcnet: compressed.as_ref(),
        covariance: covariance.as_ref(),
    };
    let result = run_snr_sweep(
        &spec,
        estimators,
        snrs,
        cfg.test_samples,
        cfg.stage_seed("sweep"),
        &models,
    )?;
    match &args.out {
        Some(p) => {
            result
                .write_csv(p)
                .with_context(|| format!("writing {}", p.display()))?;
            println!("wrote {} rows to {}", result.rows.len(), p.display());
        }
        None => print!("{}", result.to_csv()),
    }
    Ok(())
}

fn cmd_report(cli: &Cli, args: &ReportArgs) -> Result<()> {
    let cfg = load_config(cli, &[])?;
    let (model, mask) = match &args.model {
        Some(p) => {
            let ck = load_model(p)?;
            (ck.model, ck.mask)
        }
        None => (
            Model::<f32>::build(&cfg.model_config(), cfg.stage_seed("init"))?,
            None,
        ),
    };
    let m = cfg.antennas;
    println!("layers: {}", model.layers.len());
    println!(
        "kernel weights: {}",
        grouped(model.count_params(ParamConvention::KernelsOnly) as u64)
    );
    println!(
        "trainable parameters (kernels, biases, BN scale/shift): {}",
        grouped(model.count_params(ParamConvention::Trainable) as u64)
    );
    println!(
        "all parameters including BN running statistics: {}",
        grouped(model.count_params(ParamConvention::WithRunningStats) as u64)
    );
    let dense = flops(&model, m, 0.0);
    println!(
        "MACs per inference at M={m}: {} ({dense:.4e})",
        grouped(dense as u64)
    );
    if let Some(mask) = &mask {
        let kappa = mask.pruned() as f64 / mask.total() as f64;
        println!(
            "retained kernel weights: {} (pruned fraction {kappa:.4})",
            grouped(mask.retained() as u64)
        );
        let pruned = flops(&model, m, kappa);
        println!(
            "MACs on retained weights: {} ({pruned:.4e}, {:.2}x fewer)",
            grouped(pruned.round() as u64),
            dense / pruned
        );
    }
    if let Some(p) = &args.quantized {
        let q = load_quantized(p)?.model;
        print_size(&model, &q)?;
    }
    if args.benchmark {
        let stats = benchmark_runtime(&model, cfg.benchmark_batch, cfg.benchmark_repetitions)?;
        print!("{}", stats.render());
    }
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs) -> Result<()> {
    let cfg = load_config(cli, &[])?;
    let cases = gradient_suite(args.cases, cfg.stage_seed("gradcheck"))?;
    let mut failed = 0;
    for component in Component::ALL {
        let mine: Vec<_> = cases.iter().filter(|c| c.component == component).collect();
        let worst = mine
            .iter()
            .map(|c| c.report.max_rel_error)
            .fold(0.0, f64::max);
        let checked: usize = mine.iter().map(|c| c.report.checked).sum();
        let skipped: usize = mine.iter().map(|c| c.report.skipped_kinks).sum();
        let bad = mine
            .iter()
            .filter(|c| !c.report.passes(args.tolerance))
            .count();
        failed += bad;
        println!(
            "{:<16} {:>3} shapes, {:>6} partials, max relative error {:.3e}, {} kink skips, {}",
            component.name(),
            mine.len(),
            checked,
            worst,
            skipped,
            if bad == 0 { "ok" } else { "FAILED" }
        );
    }
    if failed > 0 {
        bail!(
            "{failed} gradient checks exceeded tolerance {:e}",
            args.tolerance
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Prune(a) => cmd_prune(cli, a),
        Command::Finetune(a) => cmd_finetune(cli, a),
        Command::Quantize(a) => cmd_quantize(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Report(a) => cmd_report(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
