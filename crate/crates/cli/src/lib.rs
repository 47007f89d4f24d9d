//! `sllen` command-line tool.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 empty dataset,
//! 3 non-finite loss.

pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sllen_core::dataset::{list_images, scan_dataset_root, unmatched_stems};
use sllen_core::imagecore::{
    avg_gradient, encode_umap, illumination_preview, load_image, retinex_decompose, save_image, write_atomic,
    RETINEX_EPS,
};
use sllen_core::losses::itv_loss_value;
use sllen_core::metrics::{evaluate_dir, EvalMode, EvalOptions};
use sllen_core::net::{NetConfig, SllenNet, Variant};
use sllen_core::ssn::Ssn;
use sllen_core::trainer::{enhance, latest_checkpoint, loss_ablation, run_ablation, Trainer};
use sllen_core::{Error, Result};

use config::CliConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_EMPTY: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SLLEN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sllen", version, about = "Semantic-aware low-light image enhancement")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; commands write nothing outside it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on `<data>/low` and `<data>/ref`.
    Train(TrainArgs),
    /// Enhance every image in a directory.
    Enhance(EnhanceArgs),
    /// Score enhanced images against references or low-light inputs.
    Evaluate(EvaluateArgs),
    /// Train the variants (or loss subsets) and compare them.
    Ablate(AblateArgs),
    /// Histogram of per-image average gradients.
    Gradstat(GradstatArgs),
    /// Illumination maps of (low, enhanced) pairs.
    Decompose(DecomposeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    /// full, no_hsf, no_ief or unet.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Enhanced images.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference images (paired mode).
    #[arg(long = "ref", conflicts_with = "low", required_unless_present = "low")]
    pub reference: Option<PathBuf>,
    /// Low-light inputs (unpaired mode).
    #[arg(long)]
    pub low: Option<PathBuf>,
    /// Ground-truth label maps; adds the miou column.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Predicted label maps; the segmenter is run when absent.
    #[arg(long)]
    pub pred_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblateMode {
    Branch,
    Loss,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = AblateMode::Branch)]
    pub mode: AblateMode,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradstatArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Equal-width bins over [0, 1].
    #[arg(long, default_value_t = 100)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub low: PathBuf,
    #[arg(long)]
    pub enhanced: PathBuf,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::EmptyDataset(_) => EXIT_EMPTY,
        Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() {
    let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) else {
        return;
    };
    if n > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not cap threads: {e}");
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let configured = cli.config.is_some();
    let cfg = CliConfig::resolve(cli.config.as_deref(), cli.seed, cli.out.as_deref())?;
    match cli.command {
        Command::Train(a) => cmd_train(cfg, a),
        Command::Enhance(a) => cmd_enhance(cfg, configured, a),
        Command::Evaluate(a) => cmd_evaluate(cfg, a),
        Command::Ablate(a) => cmd_ablate(cfg, a),
        Command::Gradstat(a) => cmd_gradstat(cfg, a),
        Command::Decompose(a) => cmd_decompose(cfg, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} is not a directory", dir.display())))
    }
}

fn cmd_train(mut cfg: CliConfig, a: TrainArgs) -> Result<()> {
    require_dir(&a.data)?;
    let t = &mut cfg.train;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.patch {
        t.patch = v;
    }
    if let Some(v) = a.variant {
        t.variant = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    t.validate()?;
    let out = cfg.out_dir("run");
    let pairs = scan_dataset_root(&a.data)?.pairs;
    let mut trainer = match a.resume.then(|| latest_checkpoint(&out)).flatten() {
        Some(ckpt) => {
            log::info!("resuming from {}", ckpt.display());
            Trainer::resume(cfg.train.clone(), &ckpt)?
        }
        None => Trainer::new(cfg.train.clone())?,
    };
    let log = trainer.run(&pairs, Some(&out))?;
    trainer.net().save(&out.join("model.bin"))?;
    if let Some((step, b)) = log.rows.last() {
        println!("step {step} total {:.6e} l_s {:.6e}", b.total, b.l_s);
    }
    Ok(())
}

fn cmd_enhance(cfg: CliConfig, configured: bool, a: EnhanceArgs) -> Result<()> {
    let net = SllenNet::load(&a.checkpoint, None)?;
    let stored = net.config();
    // Seeds only matter for initialization, so they are not compared.
    let expected = NetConfig {
        seed: stored.seed,
        ..cfg.train.net_config()
    };
    if configured && expected != *stored {
        return Err(Error::Config(format!(
            "checkpoint network {stored:?} does not match the configured {expected:?}"
        )));
    }
    if stored.num_classes != cfg.train.ssn.num_classes {
        return Err(Error::Config(format!(
            "checkpoint expects {} classes, segmenter has {}",
            stored.num_classes, cfg.train.ssn.num_classes
        )));
    }
    let ssn = Ssn::build(cfg.train.ssn.clone())?;
    let inputs = list_images(&a.input)?;
    if inputs.is_empty() {
        return Err(Error::EmptyDataset(format!("no images in {}", a.input.display())));
    }
    let out = cfg.out_dir("enhanced");
    create_dir(&out)?;
    for (stem, path) in &inputs {
        let img = load_image(path)?;
        let o = enhance(&net, &ssn, &img)?;
        save_image(&o, &out.join(format!("{stem}.png")))?;
    }
    println!("enhanced {} images into {}", inputs.len(), out.display());
    Ok(())
}

fn cmd_evaluate(cfg: CliConfig, a: EvaluateArgs) -> Result<()> {
    let (other, mode) = match (&a.reference, &a.low) {
        (Some(r), _) => (r, EvalMode::Paired),
        (None, Some(l)) => (l, EvalMode::Unpaired),
        (None, None) => return Err(Error::Config("one of --ref or --low is required".into())),
    };
    let ssn = match (&a.labels, &a.pred_labels) {
        (Some(_), None) => Some(Ssn::build(cfg.train.ssn.clone())?),
        _ => None,
    };
    let opts = EvalOptions {
        labels_dir: a.labels.clone(),
        pred_labels_dir: a.pred_labels.clone(),
        ssn: ssn.as_ref(),
    };
    let report = evaluate_dir(&a.pred, other, mode, &opts)?;
    let out = cfg.out_dir("eval");
    create_dir(&out)?;
    let csv = report.to_csv();
    write_atomic(&out.join("metrics.csv"), csv.as_bytes())?;
    print!("{}", csv.lines().next().map(|h| format!("{h}\n")).unwrap_or_default());
    println!("{}", csv.lines().last().unwrap_or_default());
    Ok(())
}

fn cmd_ablate(mut cfg: CliConfig, a: AblateArgs) -> Result<()> {
    require_dir(&a.data)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.train.validate()?;
    let pairs = scan_dataset_root(&a.data)?.pairs;
    let out = cfg.out_dir("ablation");
    create_dir(&out)?;
    let table = match a.mode {
        AblateMode::Branch => run_ablation(&cfg.train, &pairs, Some(&out))?,
        AblateMode::Loss => loss_ablation(&cfg.train, &pairs, Some(&out))?,
    };
    let png = plot::bar_chart(&plot::columns(&table));
    let mut buf = std::io::Cursor::new(Vec::new());
    png.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Config(format!("plot encoding failed: {e}")))?;
    write_atomic(&out.join("ablation.png"), buf.get_ref())?;
    print!("{}", table.to_csv());
    Ok(())
}

/// Bin index of `v` among `bins` equal bins over [0, 1].
pub fn gradient_bin(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

fn cmd_gradstat(cfg: CliConfig, a: GradstatArgs) -> Result<()> {
    if a.bins == 0 {
        return Err(Error::Config("bins must be >= 1".into()));
    }
    let images = list_images(&a.input)?;
    if images.is_empty() {
        return Err(Error::EmptyDataset(format!("no images in {}", a.input.display())));
    }
    let mut counts = vec![0usize; a.bins];
    let mut sum = 0.0;
    for path in images.values() {
        let g = avg_gradient(&load_image(path)?.to_rgb())?;
        let v = g.iter().sum::<f64>() / g.len() as f64;
        counts[gradient_bin(v, a.bins)] += 1;
        sum += v;
    }
    let mean = sum / images.len() as f64;
    let mut csv = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in counts.iter().enumerate() {
        let lo = i as f64 / a.bins as f64;
        let hi = (i + 1) as f64 / a.bins as f64;
        writeln!(csv, "{lo:.6},{hi:.6},{c}").expect("writing to a string");
    }
    let out = cfg.out_dir("gradstat");
    create_dir(&out)?;
    write_atomic(&out.join("gradstat.csv"), csv.as_bytes())?;
    write_atomic(
        &out.join("gradstat_mean.csv"),
        format!("images,mean\n{},{mean:.9}\n", images.len()).as_bytes(),
    )?;
    println!("images {} mean {mean:.9}", images.len());
    Ok(())
}

fn cmd_decompose(cfg: CliConfig, a: DecomposeArgs) -> Result<()> {
    let lows = list_images(&a.low)?;
    let enhanced = list_images(&a.enhanced)?;
    let unmatched = unmatched_stems(&lows, &enhanced);
    if !unmatched.is_empty() {
        return Err(Error::Config(format!("unmatched stems: {}", unmatched.join(", "))));
    }
    if lows.is_empty() {
        return Err(Error::EmptyDataset(format!("no images in {}", a.low.display())));
    }
    let out = cfg.out_dir("decompose");
    create_dir(&out)?;
    for (stem, low_path) in &lows {
        let low = load_image(low_path)?.to_rgb();
        let o = load_image(&enhanced[stem])?.to_rgb();
        let u = retinex_decompose(&low, &o, RETINEX_EPS)?;
        save_image(&illumination_preview(&u), &out.join(format!("{stem}_u.png")))?;
        write_atomic(&out.join(format!("{stem}.umap")), &encode_umap(&u)?)?;
        let itv = itv_loss_value(&u.to_batch())?;
        println!("{stem} itv {itv:.9e}");
    }
    Ok(())
}
