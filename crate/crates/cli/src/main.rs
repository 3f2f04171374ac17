use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use codebook_iqa::codebook::{
    build_codebook, build_codebook_from_images, eigen_spectrum, BuildParams, Codebook, WhiteningKind,
};
use codebook_iqa::config::{run_config, ExperimentConfig};
use codebook_iqa::eval::desk::{desk_images, desk_videos, DeskImageParams, DeskVideoParams};
use codebook_iqa::eval::{bench_timing, image_features, Channels};
use codebook_iqa::io::{list_images, load_rgb, read_table, save_plane, write_table, write_table_file};
use codebook_iqa::preprocess::{extract_raw_luma, item_seed, rgb_to_yuv, Channel, DescriptorMatrix, RgbRaster};
use codebook_iqa::regression::{train_nusvr, KernelKind, SvrModel, SvrParams, DEFAULT_TOLERANCE};
use codebook_iqa::rng::{derive_seed, Stream};
use codebook_iqa::synthgen::{generate_image, ColorModel, Primitive, SizeSource, SynthParams};
use codebook_iqa::video::{
    bitrate_multiplier, calibrate_bitrate, frame_features, FrameDirSource, FrameSource, Pooling, SampleRate, Y4mSource,
};

#[derive(Parser)]
#[command(name = "codebook-iqa", version, about = "Codebook features for no-reference image and video quality")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "CODEBOOK_IQA_THREADS")]
    threads: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write dead-leaves images.
    SynthGen(SynthGenArgs),
    /// Whiten sampled patches and cluster them into a codebook.
    BuildCodebook(BuildCodebookArgs),
    /// Eigenvalues of raw log-contrast patch correlations.
    EigenSpectrum(EigenSpectrumArgs),
    /// Feature vector(s) of image(s) as CSV rows.
    Encode(EncodeArgs),
    /// Fit a nu-SVR model.
    Train(TrainArgs),
    /// Score feature rows with a model.
    Predict(PredictArgs),
    /// Pooled features of one video.
    VideoFeatures(VideoFeaturesArgs),
    /// Bitrate multiplier, rescaled score, or calibration of (c, k).
    Rescale(RescaleArgs),
    /// Run a configured multi-split experiment.
    Eval(EvalArgs),
    /// Time extraction, encoding and prediction; JSON on stdout.
    Bench(BenchArgs),
    /// Write the synthetic desk benchmark with a manifest.
    DeskBench(DeskBenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ColorArg {
    Binary,
    Greyscale,
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageFormat {
    Png,
    Ppm,
}

#[derive(Args)]
struct SynthGenArgs {
    #[arg(long, default_value_t = 3.3)]
    gamma: f64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Square image side; `--width`/`--height` override it.
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long, default_value_t = 4)]
    size_min: u32,
    #[arg(long)]
    size_max: Option<u32>,
    /// Every object has this size instead of a power-law size.
    #[arg(long)]
    delta: Option<u32>,
    #[arg(long, value_delimiter = ',', default_value = "square,circle")]
    primitives: Vec<String>,
    #[arg(long, value_enum, default_value_t = ColorArg::Binary)]
    color: ColorArg,
    #[arg(long, value_enum, default_value_t = ImageFormat::Png)]
    format: ImageFormat,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BuildCodebookArgs {
    /// Directory of training images.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    images: Option<PathBuf>,
    /// Build from this many default dead-leaves images instead.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value = "luma")]
    channel: Channel,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 2048)]
    per_image: usize,
    #[arg(long, default_value_t = 2048)]
    k: usize,
    #[arg(long, default_value = "zca")]
    whiten: WhiteningKind,
    #[arg(long, default_value_t = codebook_iqa::codebook::DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EigenSpectrumArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 2048)]
    per_image: usize,
    /// Skip scaling each component to unit variance.
    #[arg(long)]
    no_standardize: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    codebook: PathBuf,
    /// One row per image, in the given order.
    #[arg(long, required = true, num_args = 1..)]
    image: Vec<PathBuf>,
    /// Luma and chroma halves instead of luma only.
    #[arg(long)]
    chroma: bool,
    #[arg(long, default_value_t = 2048)]
    descriptors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    /// One label per row (first column).
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 0.5)]
    nu: f64,
    #[arg(long, default_value = "rbf")]
    kernel: KernelKind,
    #[arg(long)]
    rbf_gamma: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Avg,
    Std,
}

#[derive(Args)]
struct VideoFeaturesArgs {
    /// A `.y4m` file or a directory of numbered frames.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    /// Frames per second to keep, or `one_per_video`; default every frame.
    #[arg(long)]
    rate: Option<SampleRate>,
    #[arg(long, value_enum, default_value_t = PoolArg::Avg)]
    pool: PoolArg,
    #[arg(long, default_value_t = 1.0)]
    segment: f64,
    /// Frame rate of a frame directory.
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    #[arg(long, default_value_t = 2048)]
    descriptors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RescaleArgs {
    #[arg(long, required_unless_present = "calibrate")]
    bitrate: Option<f64>,
    #[arg(long, required_unless_present = "calibrate")]
    c: Option<f64>,
    #[arg(long, required_unless_present = "calibrate")]
    k: Option<f64>,
    /// Raw score to rescale; without it the multiplier is printed.
    #[arg(long)]
    score: Option<f64>,
    /// CSV of `score,bitrate` rows; prints the fitted `c,k`.
    #[arg(long, conflicts_with_all = ["bitrate", "c", "k", "score"])]
    calibrate: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-test-set summary table.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Directory of images; default is a few synthetic 256x256 images.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = 2048)]
    descriptors: usize,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DeskBenchArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 40)]
    references: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Write the video benchmark (Y4M) instead of images.
    #[arg(long)]
    video: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthGen(a) => synth_gen(a),
        Command::BuildCodebook(a) => build(a),
        Command::EigenSpectrum(a) => spectrum(a),
        Command::Encode(a) => encode(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::VideoFeatures(a) => video_features(a),
        Command::Rescale(a) => rescale(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::DeskBench(a) => desk_bench(a),
    }
}

fn synth_gen(a: SynthGenArgs) -> Result<()> {
    let (width, height) = (a.width.unwrap_or(a.size), a.height.unwrap_or(a.size));
    let primitives = a.primitives.iter().map(|p| p.parse::<Primitive>()).collect::<Result<Vec<_>, _>>()?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let ext = match a.format {
        ImageFormat::Png => "png",
        ImageFormat::Ppm => "ppm",
    };
    for i in 0..a.count {
        let params = SynthParams {
            width,
            height,
            gamma: a.gamma,
            size_min: a.size_min,
            size_max: a.size_max.unwrap_or(width.min(height) as u32),
            primitives: primitives.clone(),
            color_model: match a.color {
                ColorArg::Binary => ColorModel::Binary,
                ColorArg::Greyscale => ColorModel::Greyscale,
            },
            source: a.delta.map_or(SizeSource::PowerLaw, SizeSource::Delta),
            seed: derive_seed(a.seed, Stream::Synth, i as u64),
        };
        let plane = generate_image(&params)?;
        save_plane(&plane, a.out_dir.join(format!("synth_{i:05}.{ext}")))?;
    }
    Ok(())
}

fn build(a: BuildCodebookArgs) -> Result<()> {
    let params = BuildParams {
        channel: a.channel,
        patch_size: a.patch,
        per_image: a.per_image,
        codevectors: a.k,
        whitening: a.whiten,
        seed: a.seed,
        max_iter: a.max_iter,
    };
    let book = match (a.images, a.synthetic) {
        (Some(dir), _) => {
            let paths = list_images(&dir).with_context(|| format!("listing {}", dir.display()))?;
            build_codebook(&paths, &params)?
        }
        (None, Some(n)) => {
            let images = (0..n)
                .map(|i| {
                    let p =
                        SynthParams { seed: derive_seed(a.seed, Stream::Synth, i as u64), ..SynthParams::default() };
                    Ok(RgbRaster::from_grey(&generate_image(&p)?))
                })
                .collect::<Result<Vec<_>>>()?;
            build_codebook_from_images(&images, &params, "synthetic")?
        }
        (None, None) => bail!("give --images or --synthetic"),
    };
    book.save(&a.out)?;
    log::info!("codebook {} written to {}", book.id(), a.out.display());
    Ok(())
}

fn spectrum(a: EigenSpectrumArgs) -> Result<()> {
    let paths = list_images(&a.images)?;
    let parts = paths
        .iter()
        .enumerate()
        .map(|(i, p)| Ok(extract_raw_luma(&load_rgb(p)?, a.patch, a.per_image, item_seed(a.seed, i as u64))?))
        .collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        bail!("no images in {}", a.images.display());
    }
    let values = eigen_spectrum(&DescriptorMatrix::concat(&parts)?, !a.no_standardize)?;
    let rows: Vec<Vec<f64>> = values.iter().enumerate().map(|(i, &v)| vec![i as f64, v]).collect();
    write_table_file(&a.out, &rows)?;
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let book = Codebook::load(&a.codebook).with_context(|| format!("loading {}", a.codebook.display()))?;
    let channels = if a.chroma { Channels::LumaChroma } else { Channels::Luma };
    let rows = a
        .image
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let img = load_rgb(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(image_features(&book, &img, channels, a.descriptors, item_seed(a.seed, i as u64))?)
        })
        .collect::<Result<Vec<_>>>()?;
    write_table_file(&a.out, &rows)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let features = read_table(&a.features)?;
    let labels: Vec<f64> = read_table(&a.labels)?
        .into_iter()
        .map(|r| r.first().copied().context("empty label row"))
        .collect::<Result<_>>()?;
    let params = SvrParams { c: a.c, nu: a.nu, kernel: a.kernel, rbf_gamma: a.rbf_gamma, tolerance: DEFAULT_TOLERANCE };
    let model = train_nusvr(&features, &labels, &params)?;
    model.save(&a.out)?;
    log::info!("{} support vectors, {} bytes", model.support_vector_count(), model.size_bytes());
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = SvrModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let scores = model.predict_batch(&read_table(&a.features)?)?;
    let rows: Vec<Vec<f64>> = scores.into_iter().map(|s| vec![s]).collect();
    match a.out {
        Some(p) => write_table_file(p, &rows)?,
        None => write_table(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn video_features(a: VideoFeaturesArgs) -> Result<()> {
    let book = Codebook::load(&a.codebook)?;
    let mut source: Box<dyn FrameSource> = if a.frames.is_dir() {
        Box::new(FrameDirSource::open(&a.frames, a.fps)?)
    } else {
        Box::new(Y4mSource::open(&a.frames).with_context(|| format!("opening {}", a.frames.display()))?)
    };
    let rate = a.rate.unwrap_or(SampleRate::PerSecond(source.fps()));
    let series = frame_features(source.as_mut(), &book, rate, a.descriptors, a.seed)?;
    let pooling = match a.pool {
        PoolArg::Avg => Pooling::Average,
        PoolArg::Std => Pooling::Std { segment_seconds: a.segment },
    };
    write_table_file(&a.out, &[pooling.apply(&series)?])?;
    Ok(())
}

fn rescale(a: RescaleArgs) -> Result<()> {
    if let Some(path) = a.calibrate {
        let rows = read_table(&path)?;
        if rows.iter().any(|r| r.len() < 2) {
            bail!("{}: rows need `score,bitrate`", path.display());
        }
        let scores: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let rates: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let (c, k) = calibrate_bitrate(&scores, &rates)?;
        println!("{c},{k}");
        return Ok(());
    }
    let (b, c, k) = (a.bitrate.expect("required"), a.c.expect("required"), a.k.expect("required"));
    let m = bitrate_multiplier(b, c, k)?;
    println!("{}", a.score.map_or(m, |s| s * m));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let report = run_config(&cfg)?;
    std::fs::write(&a.out, report.to_json()?)?;
    if let Some(t) = a.table {
        report.write_table(std::fs::File::create(t)?)?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let book = Codebook::load(&a.codebook)?;
    let model = a.model.as_deref().map(SvrModel::load).transpose()?;
    let images = match &a.images {
        Some(dir) => list_images(dir)?.iter().map(|p| Ok(rgb_to_yuv(&load_rgb(p)?)?.0)).collect::<Result<Vec<_>>>()?,
        None => (0..3)
            .map(|i| {
                let p = SynthParams {
                    color_model: ColorModel::Greyscale,
                    seed: derive_seed(a.seed, Stream::Bench, i),
                    ..SynthParams::default()
                };
                Ok(generate_image(&p)?)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let report = bench_timing(&book, &images, model.as_ref(), a.descriptors, a.repetitions, a.seed)?;
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &report)?;
    writeln!(out)?;
    Ok(())
}

fn write_manifest(path: &Path, rows: &[(String, f64, String, String, &str)]) -> Result<()> {
    let mut text = String::from("path,mos,reference_id,distortion_type,kind\n");
    for (p, mos, r, d, kind) in rows {
        text.push_str(&format!("{p},{mos},{r},{d},{kind}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn desk_bench(a: DeskBenchArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir)?;
    let mut rows = Vec::new();
    if a.video {
        let params = DeskVideoParams {
            references: a.references,
            width: a.size,
            height: a.size,
            seed: a.seed,
            ..Default::default()
        };
        for v in desk_videos(&params)? {
            let name = format!("{}.y4m", v.name);
            write_y4m(&a.out_dir.join(&name), &v)?;
            rows.push((name, v.mos, v.reference_id.clone(), v.distortion.to_string(), "video"));
        }
    } else {
        let params = DeskImageParams { references: a.references, width: a.size, height: a.size, seed: a.seed };
        for item in desk_images(&params)? {
            let name = format!("{}.png", item.name);
            save_plane(&item.image, a.out_dir.join(&name))?;
            rows.push((name, item.mos, item.reference_id, item.distortion.to_string(), "image"));
        }
    }
    write_manifest(&a.out_dir.join("manifest.csv"), &rows)
}

fn write_y4m(path: &Path, video: &codebook_iqa::eval::desk::DeskVideo) -> Result<()> {
    let first = video.frame(0);
    let (w, h) = (first.width(), first.height());
    let fps = (video.fps() * 1000.0).round() as usize;
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = y4m::encode(w, h, y4m::Ratio::new(fps, 1000))
        .with_colorspace(y4m::Colorspace::C444)
        .write_header(file)
        .map_err(|e| anyhow::anyhow!("Y4M header: {e:?}"))?;
    let chroma = vec![128u8; w * h];
    for k in 0..video.frame_count() {
        let luma: Vec<u8> = video.frame(k).samples().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        enc.write_frame(&y4m::Frame::new([&luma, &chroma, &chroma], None))
            .map_err(|e| anyhow::anyhow!("Y4M frame: {e:?}"))?;
    }
    Ok(())
}
