use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mednca::adapter::{adapt, AdaptOutcome};
use mednca::checkpoint;
use mednca::config::RunConfig;
use mednca::datasets::pgm::{self, GrayImage};
use mednca::datasets::synth::{generate_synthetic, SplitSizes};
use mednca::datasets::{load_manifest, load_split, ShiftSpec, Split};
use mednca::metrics::{evaluate, export_overlay, std_map_image, write_table, EvalMode, TableRow};
use mednca::nca::MedNcaModel;
use mednca::rng::{hash_str, Rng};
use mednca::tensor::{resample, ResizeMode};
use mednca::trainer::{initialize_parameters, train};
use mednca::{Error, Result};

/// Environment variable holding the default worker thread count.
const THREADS_ENV: &str = "MEDNCA_THREADS";

#[derive(Parser)]
#[command(name = "mednca", version, about = "Neural cellular automata segmentation with unsupervised domain adaptation")]
struct Cli {
    /// Worker threads (default: $MEDNCA_THREADS, else one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (and optionally a shifted twin).
    Synth(SynthArgs),
    /// Supervised pretraining on a manifest's train split.
    Train(TrainArgs),
    /// Unsupervised adaptation on a manifest split.
    Adapt(AdaptArgs),
    /// Dice evaluation of a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Segment one PGM image.
    Predict(PredictArgs),
    /// Print parameter count, file size and configuration of a checkpoint.
    Info(InfoArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Preset name (identity, cross_site, phone_capture) or a JSON spec file.
    #[arg(long)]
    shift: Option<String>,
}

/// Flags shared by commands that read a run configuration.
#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Split whose images are adapted on (masks are only used for reporting).
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    vwsl_gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Adapt on at most this many images of the split.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Ensemble,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Ensemble size for `--mode ensemble`.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Label for the train-domain column of the CSV table.
    #[arg(long, default_value = "unknown")]
    train_domain: String,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resize the input to SIZE×SIZE first.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long)]
    model: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 1 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Info(a) => info_cmd(a),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.adapt.seed = seed;
        cfg.eval.seed = seed;
    }
    Ok(cfg)
}

fn parse_shift(s: &str) -> Result<ShiftSpec> {
    if let Some(spec) = ShiftSpec::preset(s) {
        return Ok(spec);
    }
    let path = Path::new(s);
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "--shift {s:?} is neither a preset ({}) nor a file",
            ShiftSpec::PRESETS.join(", ")
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ShiftSpec::parse(&text)
}

fn synth(a: SynthArgs) -> Result<()> {
    let shift = a.shift.as_deref().map(parse_shift).transpose()?;
    create_dir(&a.out)?;
    let sizes = SplitSizes {
        train: a.train,
        val: a.val,
        test: a.test,
    };
    let out = generate_synthetic(&a.out, sizes, a.size, a.seed, shift.as_ref())?;
    let echo = serde_json::json!({
        "train": a.train, "val": a.val, "test": a.test,
        "size": a.size, "seed": a.seed, "shift": shift,
    });
    write_json(&a.out.join("config.json"), &echo)?;
    println!("samples: {}", out.count);
    println!("manifest: {}", out.manifest.display());
    if let Some(p) = out.shifted_manifest {
        println!("shifted manifest: {}", p.display());
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.patch_size {
        cfg.train.patch_size = v;
    }
    cfg.validate()?;
    let manifest = load_manifest(&a.data)?;
    let train_set = load_split(&manifest, Split::Train)?;
    let val_set = load_split(&manifest, Split::Val)?;
    create_dir(&a.out)?;
    cfg.echo(&a.out)?;
    let init = initialize_parameters(cfg.model.clone(), cfg.train.seed)?;
    let (model, report) = train(&init, &train_set, &val_set, &cfg.train, &cfg.loss, Some(&a.out))?;
    let path = a.out.join("model.ncas");
    checkpoint::save(&model, &path)?;
    write_json(&a.out.join("train_report.json"), &report)?;
    if let Some(d) = report.best_val_dice {
        println!("best validation dice: {d:.4} (epoch {})", report.best_epoch.unwrap_or(0));
    }
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn adapt_cmd(a: AdaptArgs) -> Result<()> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(v) = a.epochs {
        cfg.adapt.epochs = v;
    }
    if let Some(v) = a.vwsl_gamma {
        cfg.adapt.vwsl_gamma = v;
    }
    if let Some(v) = a.lr {
        cfg.adapt.lr = v;
    }
    if let Some(v) = a.runs {
        cfg.adapt.n_runs = v;
    }
    if let Some(v) = a.patch_size {
        cfg.adapt.patch_size = Some(v);
    }
    cfg.validate()?;
    let model = checkpoint::load(&a.model)?;
    cfg.model = model.config.clone();
    let manifest = load_manifest(&a.data)?;
    let mut images = load_split(&manifest, a.split)?;
    if let Some(n) = a.limit {
        images.truncate(n);
    }
    create_dir(&a.out)?;
    cfg.echo(&a.out)?;
    let AdaptOutcome {
        model: adapted,
        report,
        stats,
        ..
    } = adapt(&model, &images, &cfg.adapt, &cfg.loss)?;
    let maps = a.out.join("maps");
    create_dir(&maps)?;
    for (s, st) in images.iter().zip(&stats) {
        pgm::write(&maps.join(format!("{}_mean.pgm", s.id)), &GrayImage::from_tensor(&st.mean))?;
        pgm::write(&maps.join(format!("{}_std.pgm", s.id)), &std_map_image(&st.std))?;
    }
    let path = a.out.join("adapted.ncas");
    checkpoint::save(&adapted, &path)?;
    write_json(&a.out.join("adapt_report.json"), &report)?;
    if let (Some(b), Some(c)) = (report.dice_before, report.dice_after) {
        println!("dice on adaptation images: {b:.4} -> {c:.4}");
    }
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn model_id(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&a.cfg)?;
    match a.mode {
        Some(ModeArg::Single) => cfg.eval.mode = EvalMode::Single,
        Some(ModeArg::Ensemble) => cfg.eval.mode = EvalMode::EnsembleMean { n_runs: a.runs },
        None => {}
    }
    let model = checkpoint::load(&a.model)?;
    cfg.model = model.config.clone();
    cfg.validate()?;
    let manifest = load_manifest(&a.data)?;
    let samples = load_split(&manifest, a.split)?;
    create_dir(&a.out)?;
    cfg.echo(&a.out)?;
    let report = evaluate(&model, &samples, cfg.eval.seed, cfg.eval.mode, &model_id(&a.model))?;
    write_json(&a.out.join("eval_report.json"), &report)?;
    write_table(&a.out.join("eval_table.csv"), &[TableRow::from_report(&report, &a.train_domain)])?;
    println!("dice: {:.4} ± {:.4} (n = {}, {})", report.dice_mean, report.dice_std, report.n, report.domain);
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let model: MedNcaModel<f32> = checkpoint::load(&a.model)?;
    let mut image = pgm::read(&a.image)?.to_tensor();
    if let Some(s) = a.size {
        image = resample(&image, s, s, ResizeMode::Bilinear)?;
    }
    create_dir(&a.out)?;
    let cfg = RunConfig {
        model: model.config.clone(),
        ..RunConfig::default()
    };
    cfg.echo(&a.out)?;
    let stem = a
        .image
        .file_stem()
        .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    let mut rng = Rng::derive(a.seed, &[hash_str(&stem)]);
    let probs = mednca::inference::predict_probs(&model, &image, &mut rng)?;
    let mask = probs.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    // Logits are stored through the sigmoid so they fit an 8-bit image.
    pgm::write(&a.out.join(format!("{stem}_logits.pgm")), &GrayImage::from_tensor(&probs))?;
    pgm::write(&a.out.join(format!("{stem}_mask.pgm")), &GrayImage::from_tensor(&mask))?;
    pgm::write(&a.out.join(format!("{stem}_overlay.pgm")), &export_overlay(&image, &mask, None))?;
    let frac = mask.mean();
    println!("foreground fraction: {frac:.4}");
    Ok(())
}

fn info_cmd(a: InfoArgs) -> Result<()> {
    let bytes = std::fs::read(&a.model).map_err(|e| Error::io(&a.model, e))?;
    let model = checkpoint::decode(&bytes)?;
    println!("parameters: {}", model.count_parameters());
    println!("file size: {} bytes ({:.1} kB)", bytes.len(), bytes.len() as f64 / 1000.0);
    println!("crc32: {:08x}", checkpoint::stored_crc(&bytes).unwrap_or(0));
    println!("config: {}", serde_json::to_string(&model.config)?);
    Ok(())
}
