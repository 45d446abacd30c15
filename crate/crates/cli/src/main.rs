mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use focuslite::bench::{
    estimate_scanner_throughput, model_size_report, time_patch_scoring, DEFAULT_PATCHES_PER_WSI,
    DEFAULT_WSI_COUNT, REFERENCE_SECONDS_PER_PATCH,
};
use focuslite::data::{
    dense_score_in, load_manifest, load_tiles, procedural_textures, synth_blur_dataset, LabelKind,
    Rgb8Tile,
};
use focuslite::heatmap::{jet, normalize_grid, render_overlay, score_scan, write_png, NormMode};
use focuslite::metrics::{format_metric, EvalReport};
use focuslite::training::{evaluate_parallel, run_folds, write_log_csv, TrainConfig, DEFAULT_SEED};
use focuslite::{LossKind, ModelParams};
use rand::SeedableRng;

const VERSION: &str = env!("CARGO_PKG_VERSION");
const SUBCOMMANDS: &[&str] = &["train", "eval", "score", "heatmap", "bench", "synth", "spectrum"];
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

/// Focus quality scoring for whole-slide image tiles.
#[derive(Parser, Debug)]
#[command(name = "focuslite", version, args_override_self = true)]
struct Cli {
    /// key=value file with defaults for any long flag; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for crop scoring and training (bench defaults to 1,
    /// everything else to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Seed for splits, initialization and synthetic data.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,

    /// -v for progress, -vv for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a z-level manifest (optionally over several folds).
    Train(TrainArgs),
    /// Score a manifest with a trained model and report metrics.
    Eval(EvalArgs),
    /// Dense-score image files or directories of images.
    Score(ScoreArgs),
    /// Render a colour-coded sharpness map over a scan.
    Heatmap(HeatmapArgs),
    /// Time dense scoring of one patch.
    Bench(BenchArgs),
    /// Generate a synthetic blur-ramp dataset.
    Synth(SynthArgs),
    /// Dump the 2-D Fourier magnitude and phase of a kernel.
    Spectrum(SpectrumArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    kernels: usize,
    #[arg(long, default_value = "plcc")]
    loss: LossKind,
    #[arg(long, default_value_t = 120)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 60)]
    decay_interval: usize,
    #[arg(long, default_value_t = 0.1)]
    decay_factor: f64,
    /// Independent 60/20/20 split-train-test repetitions.
    #[arg(long, default_value_t = 1)]
    folds: usize,
    /// Validation SRCC every this many epochs; 0 disables.
    #[arg(long, default_value_t = 1)]
    validate_every: usize,
    /// Also save weights at the end of each learning-rate interval.
    #[arg(long)]
    keep_checkpoints: bool,
    /// Highest z-level counted as sharp.
    #[arg(long, default_value_t = 2)]
    sharp_max: i64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ignored at inference (the weight file defines the model); warns on mismatch.
    #[arg(long)]
    kernels: Option<usize>,
    #[arg(long, default_value_t = 2)]
    sharp_max: i64,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kernels: Option<usize>,
    /// Image files or directories (scanned non-recursively, sorted by name).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    PerScan,
    Absolute,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    scan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::PerScan)]
    mode: ModeArg,
    /// Score mapped to the cold end in absolute mode.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    lo: f64,
    /// Score mapped to the hot end in absolute mode.
    #[arg(long, default_value_t = 12.0, allow_negative_numbers = true)]
    hi: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Also write the score grid as CSV.
    #[arg(long)]
    grid_csv: bool,
    #[arg(long)]
    kernels: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    out: PathBuf,
    /// Weight file; a seeded random model is timed when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Kernel count of the random model.
    #[arg(long, default_value_t = 1)]
    kernels: usize,
    /// Patch image; a seeded 1024×1024 synthetic patch when omitted.
    #[arg(long)]
    patch: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    /// Free-form host description recorded in the report.
    #[arg(long, env = "FOCUSLITE_HOST", default_value = "unspecified")]
    host: String,
    #[arg(long, default_value_t = DEFAULT_PATCHES_PER_WSI)]
    patches_per_wsi: f64,
    #[arg(long, default_value_t = DEFAULT_WSI_COUNT)]
    wsi: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    textures: usize,
    /// Comma-separated ascending blur levels.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2,3,4,6")]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Args, Debug)]
struct SpectrumArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    kernel: usize,
    #[arg(long, default_value_t = 64)]
    fft_size: usize,
}

/// Shared state of one invocation.
struct Run {
    comment: String,
    seed: u64,
    threads: Option<usize>,
    errors: Vec<String>,
}

impl Run {
    fn pool(&self, default: usize) -> Result<Option<rayon::ThreadPool>> {
        let n = self.threads.unwrap_or(default);
        if n == 0 {
            bail!("--threads must be positive");
        }
        if n == 1 {
            return Ok(None);
        }
        Ok(Some(rayon::ThreadPoolBuilder::new().num_threads(n).build()?))
    }
}

fn hardware_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let merged = match config::merge_args(argv.clone(), SUBCOMMANDS) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(merged);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let mut run = Run {
        comment: format!(
            "focuslite {VERSION} seed={} cmd={}",
            cli.seed,
            argv.join(" ")
        ),
        seed: cli.seed,
        threads: cli.threads,
        errors: Vec::new(),
    };
    match dispatch(cli.command, &mut run) {
        Ok(()) if run.errors.is_empty() => ExitCode::SUCCESS,
        Ok(()) => {
            eprintln!("{} error(s):", run.errors.len());
            for e in &run.errors {
                eprintln!("  {e}");
            }
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command, run: &mut Run) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a, run),
        Command::Eval(a) => cmd_eval(a, run),
        Command::Score(a) => cmd_score(a, run),
        Command::Heatmap(a) => cmd_heatmap(a, run),
        Command::Bench(a) => cmd_bench(a, run),
        Command::Synth(a) => cmd_synth(a, run),
        Command::Spectrum(a) => cmd_spectrum(a, run),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn set_global_threads(run: &Run) -> Result<()> {
    if let Some(n) = run.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_weights(path: &Path, kernels_flag: Option<usize>) -> Result<ModelParams> {
    let params = ModelParams::load(path)
        .with_context(|| format!("loading weights {}", path.display()))?;
    if let Some(k) = kernels_flag {
        if k != params.n_kernels() {
            log::warn!(
                "--kernels {k} ignored: {} holds a {}-kernel model",
                path.display(),
                params.n_kernels()
            );
        }
    }
    Ok(params)
}

fn print_report(report: &EvalReport, kind: LabelKind) {
    if kind == LabelKind::Binary {
        println!("note: binary labels; ROC-AUC and PR-AUC are the headline metrics, correlations are against 0/1 labels");
    }
    for (k, v) in report.summary() {
        println!("{k:<15} {v}");
    }
}

fn write_summary_csv(path: &Path, rows: &[(String, String)], comment: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# {comment}")?;
    writeln!(out, "metric,value")?;
    for (k, v) in rows {
        writeln!(out, "{k},{v}")?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_train(a: TrainArgs, run: &mut Run) -> Result<()> {
    set_global_threads(run)?;
    let manifest = load_manifest(&a.manifest)?;
    if manifest.kind != LabelKind::ZLevel {
        bail!("training needs a Z_LEVEL manifest, {} is {}", a.manifest.display(), manifest.kind.name());
    }
    let config = TrainConfig {
        loss: a.loss,
        n_kernels: a.kernels,
        learning_rate: a.lr,
        decay_interval_epochs: a.decay_interval,
        decay_factor: a.decay_factor,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: run.seed,
        validate_every: a.validate_every,
        sharp_max: a.sharp_max,
        keep_decay_checkpoints: a.keep_checkpoints,
        ..TrainConfig::default()
    };
    config.validate()?;
    create_out(&a.out)?;
    let tiles = load_tiles(&manifest)?;
    println!(
        "training {}-kernel model ({} loss) on {} tiles, {} fold(s), seed {}",
        a.kernels,
        a.loss,
        tiles.len(),
        a.folds,
        run.seed
    );
    let summary = run_folds(&config, &tiles, manifest.kind, a.folds)?;

    for f in &summary.folds {
        let dir = if a.folds == 1 {
            a.out.clone()
        } else {
            a.out.join(format!("fold_{:02}", f.fold + 1))
        };
        create_out(&dir)?;
        f.outcome.params.save(dir.join("model.flnn"))?;
        for (epoch, p) in &f.outcome.decay_checkpoints {
            p.save(dir.join(format!("model_epoch{epoch:03}.flnn")))?;
        }
        write_log_csv(&f.outcome.log, dir.join("train_log.csv"), &run.comment)?;
        f.report.write_csv(dir.join("test_predictions.csv"), &run.comment)?;
        write_summary_csv(&dir.join("test_summary.csv"), &f.report.summary(), &run.comment)?;
        let mut split = std::io::BufWriter::new(std::fs::File::create(dir.join("split.csv"))?);
        writeln!(split, "# {}", run.comment)?;
        writeln!(split, "id,part")?;
        for (part, ids) in [("train", &f.train_ids), ("val", &f.val_ids), ("test", &f.test_ids)] {
            for id in ids {
                writeln!(split, "{id},{part}")?;
            }
        }
        split.flush()?;
        println!(
            "fold {:>2} seed {}: test srcc {} plcc {} roc {} pr {}",
            f.fold + 1,
            f.seed,
            format_metric(&f.report.srcc),
            format_metric(&f.report.plcc),
            format_metric(&f.report.roc_auc),
            format_metric(&f.report.pr_auc)
        );
    }

    let mut out = std::io::BufWriter::new(std::fs::File::create(a.out.join("folds.csv"))?);
    writeln!(out, "# {}", run.comment)?;
    writeln!(out, "fold,seed,srcc,plcc,roc_auc,pr_auc")?;
    for f in &summary.folds {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            f.fold + 1,
            f.seed,
            format_metric(&f.report.srcc),
            format_metric(&f.report.plcc),
            format_metric(&f.report.roc_auc),
            format_metric(&f.report.pr_auc)
        )?;
    }
    writeln!(
        out,
        "mean,,{},{},{},{}",
        format_metric(&summary.mean_srcc),
        format_metric(&summary.mean_plcc),
        format_metric(&summary.mean_roc_auc),
        format_metric(&summary.mean_pr_auc)
    )?;
    out.flush()?;
    println!(
        "mean over {} fold(s): srcc {} plcc {} roc {} pr {}",
        a.folds,
        format_metric(&summary.mean_srcc),
        format_metric(&summary.mean_plcc),
        format_metric(&summary.mean_roc_auc),
        format_metric(&summary.mean_pr_auc)
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs, run: &mut Run) -> Result<()> {
    set_global_threads(run)?;
    let params = load_weights(&a.weights, a.kernels)?;
    let manifest = load_manifest(&a.manifest)?;
    create_out(&a.out)?;
    let tiles = load_tiles(&manifest)?;
    let report = evaluate_parallel(&params, &tiles, manifest.kind, a.sharp_max)?;
    report.write_csv(a.out.join("eval_predictions.csv"), &run.comment)?;
    let mut rows = report.summary();
    rows.insert(0, ("label_kind".into(), manifest.kind.name().into()));
    write_summary_csv(&a.out.join("eval_summary.csv"), &rows, &run.comment)?;
    print_report(&report, manifest.kind);
    Ok(())
}

/// Expands directories into their image files, sorted by name.
fn expand_inputs(inputs: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map(|rd| {
                    rd.filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|f| {
                            f.extension()
                                .and_then(|e| e.to_str())
                                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                        })
                        .collect()
                })
                .unwrap_or_default();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    out
}

fn cmd_score(a: ScoreArgs, run: &mut Run) -> Result<()> {
    let params = load_weights(&a.weights, a.kernels)?;
    let pool = run.pool(hardware_threads())?;
    create_out(&a.out)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(a.out.join("scores.csv"))?);
    writeln!(out, "# {}", run.comment)?;
    writeln!(out, "id,score,crops")?;
    for path in expand_inputs(&a.inputs) {
        let id = path.display().to_string();
        let scored = Rgb8Tile::load(&path)
            .and_then(|t| t.to_tensor())
            .and_then(|img| dense_score_in(&params, &img, pool.as_ref()));
        match scored {
            Ok((score, crops)) => {
                writeln!(out, "{id},{},{crops}", score.value)?;
                println!("{id}\t{:.6}\t{crops}", score.value);
            }
            Err(e) => run.errors.push(format!("{id}: {e}")),
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_heatmap(a: HeatmapArgs, run: &mut Run) -> Result<()> {
    let params = load_weights(&a.weights, a.kernels)?;
    let pool = run.pool(hardware_threads())?;
    let scan = Rgb8Tile::load(&a.scan)
        .and_then(|t| t.to_tensor())
        .with_context(|| format!("reading scan {}", a.scan.display()))?;
    let mode = match a.mode {
        ModeArg::PerScan => NormMode::PerScan,
        ModeArg::Absolute => NormMode::Absolute { lo: a.lo, hi: a.hi },
    };
    if a.mode == ModeArg::Absolute && params.trained_with != LossKind::Mse {
        log::warn!("absolute maps assume an MSE-trained model; this one used {}", params.trained_with);
    }
    create_out(&a.out)?;
    let grid = score_scan(&params, &scan, pool.as_ref())?;
    let norm = normalize_grid(&grid, mode)?;
    let image = render_overlay(&norm, &scan, jet, a.alpha)?;
    let stem = a
        .scan
        .file_stem()
        .map_or_else(|| "scan".to_string(), |s| s.to_string_lossy().into_owned());
    let mode_name = match a.mode {
        ModeArg::PerScan => "per_scan",
        ModeArg::Absolute => "absolute",
    };
    let png = a.out.join(format!("{stem}_heatmap_{mode_name}.png"));
    write_png(&image, &png)?;
    if a.grid_csv {
        grid.write_csv(a.out.join(format!("{stem}_grid_{mode_name}.csv")), Some(&norm), &run.comment)?;
    }
    let (lo, hi) = grid
        .scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    println!(
        "{}: {}x{} crops, scores {lo:.4}..{hi:.4}, wrote {}",
        a.scan.display(),
        grid.rows,
        grid.cols,
        png.display()
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs, run: &mut Run) -> Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(run.seed);
    let params = match &a.weights {
        Some(p) => load_weights(p, None)?,
        None => ModelParams::initialized(a.kernels, &mut rng)?,
    };
    let patch = match &a.patch {
        Some(p) => Rgb8Tile::load(p).with_context(|| format!("reading patch {}", p.display()))?,
        None => {
            let img = procedural_textures(1, 1024, run.seed)?.remove(0);
            Rgb8Tile {
                height: 1024,
                width: 1024,
                bytes: img.to_u8(),
            }
        }
    };
    create_out(&a.out)?;
    let threads = run.threads.unwrap_or(1);
    let report = time_patch_scoring(&params, &patch, a.runs, threads, &a.host)?;
    report.write_csv(a.out.join("bench.csv"), &run.comment)?;
    print!("{}", report.table());
    let size = model_size_report(&params)?;
    println!("model size       {size}");
    let measured = estimate_scanner_throughput(a.patches_per_wsi, a.wsi, report.mean_seconds)?;
    let reference = estimate_scanner_throughput(a.patches_per_wsi, a.wsi, REFERENCE_SECONDS_PER_PATCH)?;
    println!(
        "throughput       {:.2} h for {} slides x {} patches (reference {:.2} h)",
        measured, a.wsi, a.patches_per_wsi, reference
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs, run: &mut Run) -> Result<()> {
    let textures = procedural_textures(a.textures, a.size, run.seed)?;
    let mut data = synth_blur_dataset(&textures, &a.sigmas)?;
    data.manifest.source = format!("synthetic-blur; {}", run.comment);
    let manifest = data.write(&a.out)?;
    println!(
        "wrote {} images ({} textures x {} sigmas) and {}",
        data.images.len(),
        a.textures,
        a.sigmas.len(),
        manifest.display()
    );
    Ok(())
}

fn cmd_spectrum(a: SpectrumArgs, _run: &mut Run) -> Result<()> {
    let params = load_weights(&a.weights, None)?;
    let spectrum = params.kernel_spectrum(a.kernel, a.fft_size)?;
    create_out(&a.out)?;
    let files = spectrum.write_csv(&a.out, &format!("kernel{}", a.kernel))?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
