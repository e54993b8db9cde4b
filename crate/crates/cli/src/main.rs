use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rangefuse::dataset::align_dirs;
use rangefuse::synth::{gen_set, write_set, SynthSpec};
use rangefuse::{
    deserialize_lut, estimate_lut, evaluate_set, fuse_average, fuse_with_lut, fuse_zzpm,
    load_image, save_image, serialize_lut, BinSpace, ChannelMode, EmConfig, ImageTensor, InitMode,
    ReferenceBatch, WeightLut,
};
use rayon::prelude::*;

#[derive(Parser)]
#[command(
    name = "rangefuse",
    version,
    about = "Range-wise ensemble fusion of image restoration outputs"
)]
struct Cli {
    /// Worker threads for EM and per-image work (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a weight LUT from a reference set.
    Estimate(EstimateArgs),
    /// Fuse test predictions with a LUT.
    Fuse(FuseArgs),
    /// Fuse with a global baseline (average or inverse-MSE).
    Baseline(BaselineArgs),
    /// Compute PSNR/SSIM of a prediction directory against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic reference/test set.
    Synth(SynthArgs),
    /// Time LUT fusion per image.
    Bench(BenchArgs),
}

#[derive(Args)]
struct EmArgs {
    #[arg(long, default_value_t = rangefuse::DEFAULT_BIN_WIDTH)]
    bin_width: u32,
    #[arg(long, default_value_t = 1000)]
    max_steps: usize,
    #[arg(long, default_value_t = 1e-5)]
    loglik_tol: f64,
    #[arg(long, default_value_t = 100)]
    min_pixels: usize,
    #[arg(long, default_value_t = 1e-6)]
    variance_floor: f64,
    #[arg(long, value_enum, default_value_t = InitArg::SampleVariance)]
    init_mode: InitArg,
}

impl EmArgs {
    fn config(&self) -> EmConfig {
        EmConfig {
            max_steps: self.max_steps,
            loglik_tol: self.loglik_tol,
            min_pixels: self.min_pixels,
            variance_floor: self.variance_floor,
            init_mode: match self.init_mode {
                InitArg::SampleVariance => InitMode::SampleVariance,
                InitArg::ScaledNorm => InitMode::ScaledNorm,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum InitArg {
    SampleVariance,
    #[value(alias = "paper_literal")]
    ScaledNorm,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    gt: PathBuf,
    /// One directory per model, in model order.
    #[arg(long, required = true, num_args = 1..)]
    pred: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    em: EmArgs,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long, required = true, num_args = 1..)]
    pred: Vec<PathBuf>,
    #[arg(long)]
    lut: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Average,
    Zzpm,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long, required = true, num_args = 1..)]
    pred: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    Y,
    Rgb,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value_t = ChannelArg::Y)]
    channel: ChannelArg,
    /// CSV report destination; rows are id,psnr,ssim.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator spec; without it a two-model range-biased set is generated.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    num_ref: usize,
    #[arg(long, default_value_t = 20)]
    num_test: usize,
    /// Error bias of the inaccurate model in each range.
    #[arg(long, default_value_t = 24.0)]
    bias: f64,
    /// Error noise of the inaccurate model in each range.
    #[arg(long, default_value_t = 2.0)]
    std: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, required = true, num_args = 1..)]
    pred: Vec<PathBuf>,
    /// Use an existing LUT.
    #[arg(long, conflicts_with = "gt")]
    lut: Option<PathBuf>,
    /// Estimate the LUT on the bench images themselves, against this ground truth.
    #[arg(long, required_unless_present = "lut")]
    gt: Option<PathBuf>,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(3..))]
    reps: u32,
    #[command(flatten)]
    em: EmArgs,
}

/// Inputs that contradict each other; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<rangefuse::Error>() {
            return if e.is_contract_violation() { 2 } else { 1 };
        }
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
    }
    1
}

/// Loads the aligned images of every directory: `result[d][n]`.
fn load_aligned(
    primary: &Path,
    others: &[PathBuf],
) -> Result<(Vec<String>, Vec<Vec<ImageTensor>>)> {
    let samples = align_dirs(primary, others)?;
    let ids = samples.iter().map(|s| s.id.clone()).collect();
    let per_sample = samples
        .par_iter()
        .map(|s| {
            std::iter::once(&s.primary)
                .chain(&s.others)
                .map(|p| load_image(p).map_err(anyhow::Error::from))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut by_dir = vec![Vec::with_capacity(per_sample.len()); others.len() + 1];
    for imgs in per_sample {
        for (slot, img) in by_dir.iter_mut().zip(imgs) {
            slot.push(img);
        }
    }
    Ok((ids, by_dir))
}

/// Prediction directories loaded sample-major: `result[n][m]`.
fn load_predictions(dirs: &[PathBuf]) -> Result<(Vec<String>, Vec<Vec<ImageTensor>>)> {
    let (ids, by_dir) = load_aligned(&dirs[0], &dirs[1..])?;
    let samples = (0..ids.len())
        .map(|n| by_dir.iter().map(|d| d[n].clone()).collect())
        .collect();
    Ok((ids, samples))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn save_all(out: &Path, ids: &[String], images: &[ImageTensor]) -> Result<()> {
    create_dir(out)?;
    ids.par_iter()
        .zip(images)
        .try_for_each(|(id, img)| save_image(img, out.join(format!("{id}.png"))))?;
    Ok(())
}

fn build_lut(gt: &Path, pred: &[PathBuf], em: &EmArgs) -> Result<WeightLut> {
    let cfg = em.config();
    let space = BinSpace::new(em.bin_width)?;
    let (_, mut by_dir) = load_aligned(gt, pred)?;
    let gts = by_dir.remove(0);
    let batch = ReferenceBatch::from_images(&gts, &by_dir)?;
    Ok(estimate_lut(&batch, &space, &cfg)?)
}

fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let lut = build_lut(&args.gt, &args.pred, &args.em)?;
    serialize_lut(&lut, &args.out)?;
    let c = lut.source_counts();
    println!(
        "entries={} em={} fallback_small={} fallback_undetermined={} pixels={}",
        lut.entries.len(),
        c.em,
        c.fallback_small,
        c.fallback_undetermined,
        lut.total_count()
    );
    Ok(())
}

fn cmd_fuse(args: &FuseArgs) -> Result<()> {
    let lut = deserialize_lut(&args.lut)?;
    if lut.num_models != args.pred.len() {
        bail!(Usage(format!(
            "LUT was estimated for {} models but {} prediction directories were given",
            lut.num_models,
            args.pred.len()
        )));
    }
    let (ids, samples) = load_predictions(&args.pred)?;
    let fused = samples
        .par_iter()
        .map(|preds| fuse_with_lut(preds, &lut))
        .collect::<rangefuse::Result<Vec<_>>>()?;
    save_all(&args.out, &ids, &fused)?;
    println!("fused {} images into {}", ids.len(), args.out.display());
    Ok(())
}

fn cmd_baseline(args: &BaselineArgs) -> Result<()> {
    let (ids, samples) = load_predictions(&args.pred)?;
    let fused = samples
        .par_iter()
        .map(|preds| match args.method {
            Method::Average => fuse_average(preds),
            Method::Zzpm => fuse_zzpm(preds).map(|(img, _)| img),
        })
        .collect::<rangefuse::Result<Vec<_>>>()?;
    save_all(&args.out, &ids, &fused)?;
    println!("fused {} images into {}", ids.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mode = match args.channel {
        ChannelArg::Y => ChannelMode::Y,
        ChannelArg::Rgb => ChannelMode::Rgb,
    };
    let report = evaluate_set(&args.pred, &args.gt, mode)?;
    if let Some(out) = &args.out {
        std::fs::write(out, report.to_csv())
            .with_context(|| format!("writing {}", out.display()))?;
    }
    println!("{}", report.summary_line());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            rangefuse::synth::parse_spec(&text)?
        }
        None => SynthSpec {
            height: args.size,
            width: args.size,
            num_ref: args.num_ref,
            num_test: args.num_test,
            ..SynthSpec::range_biased(0, args.bias, args.std)
        },
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let set = gen_set(&spec)?;
    write_set(&spec, &set, &args.out)?;
    println!(
        "wrote {} reference and {} test samples for {} models to {}",
        spec.num_ref,
        spec.num_test,
        spec.num_models,
        args.out.display()
    );
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let lut = match (&args.lut, &args.gt) {
        (Some(path), _) => deserialize_lut(path)?,
        (None, Some(gt)) => build_lut(gt, &args.pred, &args.em)?,
        (None, None) => bail!(Usage("either --lut or --gt is required".into())),
    };
    if lut.num_models != args.pred.len() {
        bail!(Usage(format!(
            "LUT was estimated for {} models but {} prediction directories were given",
            lut.num_models,
            args.pred.len()
        )));
    }
    let (ids, samples) = load_predictions(&args.pred)?;
    // Warm-up pass, untimed.
    for preds in &samples {
        fuse_with_lut(preds, &lut)?;
    }
    let start = Instant::now();
    for _ in 0..args.reps {
        for preds in &samples {
            std::hint::black_box(fuse_with_lut(preds, &lut)?);
        }
    }
    let per_image = start.elapsed().as_secs_f64() / (f64::from(args.reps) * ids.len() as f64);
    println!(
        "images={} reps={} bin_width={} mean_seconds_per_image={per_image:.6e}",
        ids.len(),
        args.reps,
        lut.space.bin_width()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
