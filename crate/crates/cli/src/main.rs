//! `catcnn`: synthetic data, targets, training, evaluation and prediction.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use catcnn::data::{load_dataset, load_scene, make_dataset, save_dataset, Raster, SynthConfig};
use catcnn::eval::{evaluate, export_prediction, export_targets};
use catcnn::groundtruth::{downsample_density, downsample_mask, render_density, render_mask};
use catcnn::model::checkpoint::Checkpoint;
use catcnn::model::WeightInit;
use catcnn::training::{train_with, write_trace, LrSchedule, TrainConfig};
use clap::{Args, Parser, Subcommand};
use log::info;

use config::{FileConfig, SynthFile, TrainFile};

type CmdResult = Result<(), Box<dyn std::error::Error>>;

#[derive(Debug, Parser)]
#[command(name = "catcnn", version, about = "Crowd counting with confidence-gated density maps")]
struct Cli {
    /// Seed for every random choice (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file with optional [synth] and [train] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr (RUST_LOG refines it).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory with a manifest.
    Synth(SynthArgs),
    /// Render the density map and confidence mask of one annotated image.
    Gt(GtArgs),
    /// Train on a dataset directory; writes a checkpoint and a loss CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset; prints `MAE=<v> MSE=<v>`.
    Eval(EvalArgs),
    /// Predict one image; writes rasters and prints `count=<v>`.
    Predict(PredictArgs),
    /// Check analytic gradients of every op and loss against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes [default: 20].
    #[arg(long)]
    scenes: Option<usize>,
    /// Image height in pixels [default: 64].
    #[arg(long)]
    height: Option<usize>,
    /// Image width in pixels [default: 64].
    #[arg(long)]
    width: Option<usize>,
    /// 1 (PGM) or 3 (PPM) channels [default: 1].
    #[arg(long)]
    channels: Option<usize>,
    /// Fewest heads per scene [default: 5].
    #[arg(long)]
    count_min: Option<usize>,
    /// Most heads per scene [default: 20].
    #[arg(long)]
    count_max: Option<usize>,
    /// Smallest head radius [default: 2].
    #[arg(long)]
    radius_min: Option<f64>,
    /// Largest head radius [default: 3.5].
    #[arg(long)]
    radius_max: Option<f64>,
    /// flat, gradient or clutter [default: flat].
    #[arg(long)]
    background: Option<String>,
    /// Head-like distractor blobs per 1024 px² [default: 0.5].
    #[arg(long)]
    distractor_density: Option<f64>,
}

#[derive(Debug, Args)]
struct GtArgs {
    /// Input PGM or PPM image.
    #[arg(long)]
    image: PathBuf,
    /// Dot annotation file.
    #[arg(long)]
    annotation: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Downsampling factor of the written targets (1 keeps full resolution).
    #[arg(long, default_value_t = 1)]
    divisor: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV to write [default: the checkpoint path with a .csv extension].
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Passes over the dataset [default: 100].
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Adam learning rate [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of the planned steps after which the rate drops [default: 0.75].
    #[arg(long)]
    lr_decay_at: Option<f64>,
    /// Rate multiplier after the drop; 1 keeps the rate constant [default: 0.1].
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    /// Weight of the confidence loss [default: 2].
    #[arg(long)]
    lambda1: Option<f64>,
    /// Weight of the count-group loss [default: 0.01].
    #[arg(long)]
    lambda2: Option<f64>,
    /// Crop, flip and noise augmentation [default: false].
    #[arg(long)]
    augment: Option<bool>,
    /// Patches cropped per scene [default: 9].
    #[arg(long)]
    crop_patches: Option<usize>,
    /// Horizontal flip probability [default: 0.5].
    #[arg(long)]
    flip_p: Option<f64>,
    /// Probability of adding uniform noise [default: 0.5].
    #[arg(long)]
    noise_p: Option<f64>,
    /// Half-width of the uniform noise [default: 0.04].
    #[arg(long)]
    noise_amplitude: Option<f64>,
    /// Also write `<out>_step<N>.ckpt` every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Channels per dilation branch [default: 8].
    #[arg(long)]
    base_channels: Option<usize>,
    /// Comma-separated dilations of the first-layer branches [default: 1,2,3,4].
    #[arg(long, value_delimiter = ',')]
    dilation_set: Option<Vec<usize>>,
    /// Comma-separated widths of the three trunk convolutions [default: 32,48,64].
    #[arg(long, value_delimiter = ',')]
    trunk_widths: Option<Vec<usize>>,
    /// Channels of the first feature map; must be even [default: 32].
    #[arg(long)]
    fm_channels: Option<usize>,
    /// Number of crowd-count groups [default: 5].
    #[arg(long)]
    groups: Option<usize>,
    /// Gate the density estimate with the confidence map [default: true].
    #[arg(long)]
    use_confidence: Option<bool>,
    /// Concatenate shallow features into the trunk [default: true].
    #[arg(long)]
    use_cross_layer: Option<bool>,
    /// fm1_only, fm2_only or both [default: both].
    #[arg(long)]
    fm_output: Option<String>,
    /// Gaussian weight init with this std instead of the He default.
    #[arg(long)]
    init_std: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-scene CSV to write [default: the checkpoint path with a .eval.csv extension].
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Input PGM or PPM image.
    #[arg(long)]
    image: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Random instances per op.
    #[arg(long, default_value_t = catcnn::gradsuite::MIN_INSTANCES)]
    instances: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(a, cli.seed, file.synth)?,
        Command::Gt(a) => gt(a)?,
        Command::Train(a) => train(a, cli.seed, file.train)?,
        Command::Eval(a) => eval(a)?,
        Command::Predict(a) => predict(a)?,
        Command::Gradcheck(a) => {
            let report = catcnn::gradsuite::run(cli.seed.unwrap_or(0), a.instances)?;
            println!("{report}");
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned())
}

fn synth(a: SynthArgs, seed: Option<u64>, f: SynthFile) -> CmdResult {
    let d = SynthConfig::default();
    let background = match a.background.or(f.background) {
        Some(s) => s.parse()?,
        None => d.background,
    };
    let config = SynthConfig {
        seed: seed.or(f.seed).unwrap_or(d.seed),
        height: a.height.or(f.height).unwrap_or(d.height),
        width: a.width.or(f.width).unwrap_or(d.width),
        channels: a.channels.or(f.channels).unwrap_or(d.channels),
        count_range: (
            a.count_min.or(f.count_min).unwrap_or(d.count_range.0),
            a.count_max.or(f.count_max).unwrap_or(d.count_range.1),
        ),
        head_radius_range: (
            a.radius_min.or(f.radius_min).unwrap_or(d.head_radius_range.0),
            a.radius_max.or(f.radius_max).unwrap_or(d.head_radius_range.1),
        ),
        background,
        distractor_density: a.distractor_density.or(f.distractor_density).unwrap_or(d.distractor_density),
    };
    let n = a.scenes.or(f.scenes).unwrap_or(20);
    let (scenes, manifest) = make_dataset(&config, n)?;
    save_dataset(&scenes, &manifest, &a.out)?;
    let s = manifest.stats();
    println!(
        "scenes={} total={} min={} max={} average={:.3}",
        s.num, s.total, s.min, s.max, s.average
    );
    Ok(())
}

fn gt(a: GtArgs) -> CmdResult {
    let (scene, report) = load_scene(&a.image, &a.annotation)?;
    if report.clipped_points > 0 {
        log::warn!("{} point(s) clipped to the image bounds", report.clipped_points);
    }
    let (h, w) = (scene.height(), scene.width());
    let mut density = render_density(&scene.annotation, h, w)?;
    let mut mask = render_mask(&scene.annotation, h, w)?;
    if a.divisor > 1 {
        density = downsample_density(&density, a.divisor)?;
        mask = downsample_mask(&mask, a.divisor)?;
    }
    export_targets(&density, &mask, &a.out, &stem(&a.image))?;
    println!("count={}", density.count());
    Ok(())
}

fn train_config(a: &TrainArgs, seed: Option<u64>, f: TrainFile) -> Result<TrainConfig, Box<dyn std::error::Error>> {
    let mut c = TrainConfig::default();
    c.seed = seed.or(f.seed).unwrap_or(c.seed);
    c.epochs = a.epochs.or(f.epochs).unwrap_or(c.epochs);
    c.max_steps = a.max_steps.or(f.max_steps).or(c.max_steps);
    c.adam.lr = a.lr.or(f.lr).unwrap_or(c.adam.lr);
    if let LrSchedule::StepDecay { at, factor } = &mut c.lr_schedule {
        *at = a.lr_decay_at.or(f.lr_decay_at).unwrap_or(*at);
        *factor = a.lr_decay_factor.or(f.lr_decay_factor).unwrap_or(*factor);
    }
    c.loss.lambda1 = a.lambda1.or(f.lambda1).unwrap_or(c.loss.lambda1);
    c.loss.lambda2 = a.lambda2.or(f.lambda2).unwrap_or(c.loss.lambda2);
    c.augment = a.augment.or(f.augment).unwrap_or(c.augment);
    let aug = &mut c.augmentation;
    aug.crop_patches = a.crop_patches.or(f.crop_patches).unwrap_or(aug.crop_patches);
    aug.flip_p = a.flip_p.or(f.flip_p).unwrap_or(aug.flip_p);
    aug.noise_p = a.noise_p.or(f.noise_p).unwrap_or(aug.noise_p);
    aug.noise_amplitude = a.noise_amplitude.or(f.noise_amplitude).unwrap_or(aug.noise_amplitude);
    c.checkpoint_every = a.checkpoint_every.or(f.checkpoint_every).or(c.checkpoint_every);

    let arch = &mut c.arch;
    arch.base_channels = a.base_channels.or(f.base_channels).unwrap_or(arch.base_channels);
    if let Some(d) = a.dilation_set.clone().or(f.dilation_set) {
        arch.dilation_set = d;
    }
    match (&a.trunk_widths, f.trunk_widths) {
        (Some(t), _) => {
            arch.trunk_widths = t
                .as_slice()
                .try_into()
                .map_err(|_| format!("--trunk-widths needs exactly 3 values, got {}", t.len()))?
        }
        (None, Some(t)) => arch.trunk_widths = t,
        (None, None) => {}
    }
    arch.fm_channels = a.fm_channels.or(f.fm_channels).unwrap_or(arch.fm_channels);
    arch.groups = a.groups.or(f.groups).unwrap_or(arch.groups);
    arch.use_confidence = a.use_confidence.or(f.use_confidence).unwrap_or(arch.use_confidence);
    arch.use_cross_layer = a.use_cross_layer.or(f.use_cross_layer).unwrap_or(arch.use_cross_layer);
    if let Some(s) = a.fm_output.clone().or(f.fm_output) {
        arch.fm_output = s.parse()?;
    }
    if let Some(std) = a.init_std.or(f.init_std) {
        arch.init = WeightInit::Gaussian { std };
    }
    Ok(c)
}

fn train(a: TrainArgs, seed: Option<u64>, f: TrainFile) -> CmdResult {
    let mut config = train_config(&a, seed, f)?;
    let scenes = load_dataset(&a.data)?;
    // the input layer follows the data
    if let Some(s) = scenes.first() {
        config.arch.in_channels = s.image.shape()[0];
    }
    config.validate()?;
    info!("training on {} scenes from {}", scenes.len(), a.data.display());
    let every = config.checkpoint_every;
    let out_stem = stem(&a.out);
    let out_dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    let outcome = train_with(&scenes, &config, |trainer, _| {
        if let Some(n) = every {
            let step = trainer.steps_taken();
            if n > 0 && step % n == 0 {
                trainer.checkpoint().save(out_dir.join(format!("{out_stem}_step{step}.ckpt")))?;
            }
        }
        Ok(())
    })?;
    outcome.checkpoint.save(&a.out)?;
    let trace_path = a.trace.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_trace(&outcome.trace, &trace_path)?;
    if let Some(last) = outcome.trace.last() {
        println!(
            "steps={} l_fus={:.6} l_den={:.6} l_con={:.6} l_mul={:.6} l_whole={:.6}",
            outcome.trace.len(),
            last.l_fus,
            last.l_den,
            last.l_con,
            last.l_mul,
            last.l_whole
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let scenes = load_dataset(&a.data)?;
    let report = evaluate(&scenes, &ckpt.model)?;
    let path = a.report.unwrap_or_else(|| a.checkpoint.with_extension("eval.csv"));
    std::fs::write(&path, report.to_csv())?;
    println!("{}", report.summary_line());
    Ok(())
}

fn predict(a: PredictArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let image = Raster::read(&a.image)?.to_tensor();
    let p = ckpt.model.predict(&image)?;
    export_prediction(&image, &p, &a.out, &stem(&a.image))?;
    println!("count={}", p.count());
    Ok(())
}
