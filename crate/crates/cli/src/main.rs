//! `droplet` command line: detection, scene simulation, evaluation, backend
//! parity, runtime sweeps and the HTTP service.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 when the command fails.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use droplet::bench::{self, BenchConfig, SweepAxis};
use droplet::detector::{BlobSetDocument, DEFAULT_NEIGHBORHOOD, DEFAULT_OVERLAP, DEFAULT_THRESHOLD};
use droplet::evaluate::{self, ParityRow, ParityStats, DEFAULT_IOU_THRESHOLD};
use droplet::image_core::{DEFAULT_SATURATION, DEFAULT_SMOOTH_SIGMA};
use droplet::scale_space::DEFAULT_TRUNCATE;
use droplet::synth::{self, DEFAULT_GAUSSIAN_SIGMA, DEFAULT_POISSON_SCALE};
use droplet::{
    add_noise, load_image, match_voc, render_scene, save_image, BackendKind, DetectionParams, Detector, Image,
    PreprocessParams, RenderParams, Shading,
};
use droplet_service::ServiceConfig;

#[derive(Parser, Debug)]
#[command(name = "droplet", version, about = "Scale-space DoG droplet detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Detect blobs in one image.
    Detect(DetectArgs),
    /// Render a synthetic scene with known circles.
    Simulate(SimulateArgs),
    /// Score a detection JSON against a truth CSV.
    Evaluate(EvaluateArgs),
    /// Compare two backends over a directory of scenes.
    Parity(ParityArgs),
    /// Time detection over a sweep of n_bin or max_sigma.
    Bench(BenchArgs),
    /// Serve detection over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Clone)]
struct LadderArgs {
    #[arg(long, default_value_t = 2.0)]
    min_sigma: f64,
    #[arg(long, default_value_t = 15.0)]
    max_sigma: f64,
    #[arg(long, default_value_t = 26)]
    n_bin: usize,
    /// Kernel half-width in standard deviations.
    #[arg(long, default_value_t = DEFAULT_TRUNCATE)]
    truncate: f64,
}

#[derive(Args, Debug, Clone)]
struct ParamArgs {
    #[command(flatten)]
    ladder: LadderArgs,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Normalized overlap above which blobs are merged.
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    overlap: f64,
    /// Disable overlap pruning.
    #[arg(long)]
    no_prune: bool,
    /// Side of the extremum neighborhood (odd).
    #[arg(long, default_value_t = DEFAULT_NEIGHBORHOOD)]
    neighborhood: usize,
    #[arg(long, default_value_t = BackendKind::Fft)]
    backend: BackendKind,
    /// Skip smoothing and contrast stretching.
    #[arg(long)]
    no_preprocess: bool,
    #[arg(long, default_value_t = DEFAULT_SMOOTH_SIGMA)]
    smooth_sigma: f64,
    /// Total fraction of pixels clipped by the contrast stretch.
    #[arg(long, default_value_t = DEFAULT_SATURATION)]
    saturation: f64,
}

impl ParamArgs {
    fn params(&self) -> Result<DetectionParams> {
        let p = DetectionParams {
            min_sigma: self.ladder.min_sigma,
            max_sigma: self.ladder.max_sigma,
            n_bin: self.ladder.n_bin,
            truncate: self.ladder.truncate,
            threshold: self.threshold,
            overlap: (!self.no_prune).then_some(self.overlap),
            neighborhood: self.neighborhood,
            backend: self.backend,
            preprocess: PreprocessParams {
                enabled: !self.no_preprocess,
                smooth_sigma: self.smooth_sigma,
                saturation: self.saturation,
            },
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long)]
    out_json: PathBuf,
    /// Radius histogram CSV.
    #[arg(long)]
    out_hist: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    width: usize,
    #[arg(long, default_value_t = 1000)]
    height: usize,
    #[arg(long, default_value_t = 100)]
    n_spheres: usize,
    #[arg(long)]
    r_min: f64,
    #[arg(long)]
    r_max: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_POISSON_SCALE)]
    poisson_scale: f64,
    #[arg(long, default_value_t = DEFAULT_GAUSSIAN_SIGMA)]
    gaussian_sigma: f64,
    /// Write the noise-free rendering.
    #[arg(long)]
    no_noise: bool,
    /// Allow spheres to overlap.
    #[arg(long)]
    allow_overlap: bool,
    /// Uniform disks instead of sphere-cap shading.
    #[arg(long)]
    flat: bool,
    #[arg(long)]
    out_image: PathBuf,
    #[arg(long)]
    out_truth: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Detection JSON written by `detect`.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ParityArgs {
    /// Directory of `<stem>.{png,tif,raw}` images with `<stem>.csv` truths.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, default_value_t = BackendKind::Direct)]
    backend_a: BackendKind,
    #[arg(long, default_value_t = BackendKind::Fft)]
    backend_b: BackendKind,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    sweep: SweepAxis,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    backend: BackendKind,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Image to time on. Without it a scene is rendered from `--seed`.
    #[arg(long, conflicts_with = "seed")]
    input: Option<PathBuf>,
    #[arg(long, required_unless_present = "input")]
    seed: Option<u64>,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[arg(long, default_value_t = 40)]
    n_spheres: usize,
    #[arg(long, default_value_t = 1.0)]
    min_sigma: f64,
    #[arg(long, default_value_t = 10.0)]
    max_sigma: f64,
    #[arg(long, default_value_t = 10)]
    n_bin: usize,
    #[arg(long, default_value_t = DEFAULT_TRUNCATE)]
    truncate: f64,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, env = "DROPLET_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    #[arg(long, env = "DROPLET_WORKERS")]
    workers: Option<usize>,
    /// Requests allowed to wait for a worker before 503.
    #[arg(long)]
    backlog: Option<usize>,
    #[arg(long, default_value_t = droplet_service::DEFAULT_MAX_REQUEST_BYTES)]
    max_request_bytes: usize,
    #[arg(long, default_value_t = droplet_service::DEFAULT_TIMEOUT_MS)]
    request_timeout_ms: u64,
    #[command(flatten)]
    params: ParamArgs,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run_detect(args: DetectArgs) -> Result<()> {
    let params = args.params.params()?;
    let img = load_image(&args.input)?;
    let detection = Detector::new(params)?.detect(&img)?;
    write_json(&args.out_json, &detection.blobs.to_document(file_label(&args.input)))?;
    if let Some(path) = &args.out_hist {
        let mut out = create(path)?;
        detection.histogram.write_csv(&mut out)?;
        out.flush()?;
    }
    eprintln!(
        "{}: {} blobs in {:.1} ms",
        args.input.display(),
        detection.blobs.len(),
        detection.timings.total_ms
    );
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let mut render = RenderParams::new(
        args.width,
        args.height,
        args.n_spheres,
        (args.r_min, args.r_max),
        args.seed,
    );
    render.allow_overlap = args.allow_overlap;
    render.shading = if args.flat { Shading::Flat } else { Shading::SphereCap };
    let mut scene = render_scene(&render)?;
    if !args.no_noise {
        scene = add_noise(&scene, args.poisson_scale, args.gaussian_sigma, args.seed)?;
    }
    save_image(&scene.image, &args.out_image)?;
    let mut out = create(&args.out_truth)?;
    synth::write_truths(&mut out, &scene.truths, args.seed)?;
    out.flush()?;
    Ok(())
}

fn read_truth_file(path: &Path) -> Result<Vec<droplet::GroundTruthCircle>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(synth::read_truths(BufReader::new(file))?)
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let file = File::open(&args.pred).with_context(|| format!("cannot open {}", args.pred.display()))?;
    let doc: BlobSetDocument = serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("{} is not a detection document", args.pred.display()))?;
    let truths = read_truth_file(&args.truth)?;
    let report = match_voc(&doc.blobs, &truths, args.iou)?;
    write_json(&args.out, &report)?;
    eprintln!(
        "precision {:.4} recall {:.4} (tp {} fp {} fn {})",
        report.precision, report.recall, report.tp, report.fp, report.fn_
    );
    Ok(())
}

/// Finds `<stem>.csv` truth files and their images, sorted by stem.
fn scan_scenes(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut scenes = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let image = ["png", "tif", "tiff", "raw"]
            .iter()
            .map(|ext| dir.join(format!("{stem}.{ext}")))
            .find(|p| p.is_file())
            .ok_or_else(|| anyhow!("no image found for truth file {}", path.display()))?;
        scenes.push((stem, image, path));
    }
    if scenes.is_empty() {
        bail!("no scenes (<stem>.csv with a matching image) in {}", dir.display());
    }
    scenes.sort();
    Ok(scenes)
}

fn run_parity(args: ParityArgs) -> Result<()> {
    let base = args.params.params()?;
    let params_a = DetectionParams {
        backend: args.backend_a,
        ..base.clone()
    };
    let params_b = DetectionParams {
        backend: args.backend_b,
        ..base
    };
    let scenes = scan_scenes(&args.scenes)?;
    let mut images = Vec::with_capacity(scenes.len());
    let mut truths = Vec::with_capacity(scenes.len());
    for (_, image, truth) in &scenes {
        images.push(load_image(image)?);
        truths.push(read_truth_file(truth)?);
    }
    let samples = evaluate::parity_detailed(&images, &truths, &params_a, &params_b, args.iou)?;
    let rows = scenes
        .iter()
        .zip(&samples)
        .map(|((stem, _, _), s)| ParityRow {
            image: stem.clone(),
            precision_a: s.report_a.precision,
            recall_a: s.report_a.recall,
            precision_b: s.report_b.precision,
            recall_b: s.report_b.recall,
            dp: s.report_a.precision - s.report_b.precision,
            dr: s.report_a.recall - s.report_b.recall,
        })
        .collect();
    let stats = ParityStats::from_rows(rows);
    let mut out = create(&args.out)?;
    stats.write_csv(&mut out)?;
    out.flush()?;
    eprintln!(
        "{} scenes: mean dP {:.3e} mean dR {:.3e}, identical {:.0}%",
        stats.rows.len(),
        stats.mean_dp,
        stats.mean_dr,
        100.0 * stats.identical_fraction()
    );
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let config = BenchConfig::new(args.warmup, args.reps)?;
    let fixed = DetectionParams {
        min_sigma: args.min_sigma,
        max_sigma: args.max_sigma,
        n_bin: args.n_bin,
        truncate: args.truncate,
        threshold: args.threshold,
        backend: args.backend,
        ..DetectionParams::default()
    };
    let raw: Image = match (&args.input, args.seed) {
        (Some(path), _) => load_image(path)?,
        (None, Some(seed)) => {
            let r_max = (args.width.min(args.height) as f64 / 20.0).clamp(3.0, 15.0);
            let render = RenderParams::new(args.width, args.height, args.n_spheres, (3.0, r_max), seed);
            add_noise(
                &render_scene(&render)?,
                DEFAULT_POISSON_SCALE,
                DEFAULT_GAUSSIAN_SIGMA,
                seed,
            )?
            .image
        }
        (None, None) => bail!("either --input or --seed is required"),
    };
    let img = Detector::new(fixed.clone())?.prepare(&raw)?;
    let records = bench::sweep(args.sweep, &args.values, args.backend, &fixed, &img, config)?;
    let mut out = create(&args.out)?;
    bench::write_records_csv(&mut out, &records)?;
    out.flush()?;
    for r in &records {
        eprintln!(
            "{} n_bin={} max_sigma={}: median {:.1} ms [p10 {:.1}, p90 {:.1}]",
            r.backend, r.n_bin, r.max_sigma, r.median_ms, r.p10_ms, r.p90_ms
        );
    }
    Ok(())
}

fn run_serve(args: ServeArgs) -> Result<()> {
    let mut config = ServiceConfig {
        listen: args.listen,
        params: args.params.params()?,
        max_request_bytes: args.max_request_bytes,
        request_timeout_ms: args.request_timeout_ms,
        ..ServiceConfig::default()
    };
    if let Some(workers) = args.workers {
        config.workers = workers;
        config.backlog = 2 * workers;
    }
    if let Some(backlog) = args.backlog {
        config.backlog = backlog;
    }
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(droplet_service::serve(config))?;
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Detect(a) => run_detect(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Parity(a) => run_parity(a),
        Command::Bench(a) => run_bench(a),
        Command::Serve(a) => run_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
