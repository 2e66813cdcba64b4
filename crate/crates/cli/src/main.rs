//! `tilefield`: train, bake, render, verify, serve and benchmark tiled
//! radiance field scenes.

use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tilefield_core::bake::bundle::{write_atomic, BakedBundle};
use tilefield_core::bake::{bake_scene, BakeOptions, MarchRenderer, SceneManifest};
use tilefield_core::checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
use tilefield_core::config::{load_poses, SceneConfig};
use tilefield_core::field::Aggregation;
use tilefield_core::model::Student;
use tilefield_core::render::{render_image, Image};
use tilefield_core::scene::Camera;
use tilefield_core::teacher::AnalyticTeacher;
use tilefield_core::train::{train, Dataset};
use tilefield_core::verify::{self, VerifyReport};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] tilefield_core::Error),

    #[error(transparent)]
    Server(#[from] tilefield_server::ServerError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("png: {0}")]
    Image(#[from] image::ImageError),

    #[error("{0}")]
    Usage(String),

    #[error("verification failed")]
    VerifyFailed,
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Parser, Debug)]
#[command(name = "tilefield", version, about)]
struct Cli {
    /// Worker threads for rendering and training (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Distill a scene config into a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed for initialization and batching.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the number of training steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Bake a checkpoint into per-submodel bundles.
    Bake {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a camera trajectory from baked bundles into PNG frames.
    Render {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Run the oracle checks on baked bundles or a checkpoint.
    Verify {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        bundle: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Random rays per submodel for the skip-equivalence check.
        #[arg(long, default_value_t = 1000)]
        rays: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve baked bundles over HTTP.
    Serve {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
    /// Time repeated renders of a camera trajectory.
    Bench {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        #[command(flatten)]
        view: ViewArgs,
    },
}

#[derive(Args, Debug, Clone)]
struct ViewArgs {
    /// Output size as WIDTHxHEIGHT or a single number for square frames.
    #[arg(long, default_value = "256x256", value_parser = parse_resolution)]
    resolution: (u32, u32),
    /// March every sample instead of skipping empty space.
    #[arg(long)]
    no_skip: bool,
}

fn parse_resolution(s: &str) -> std::result::Result<(u32, u32), String> {
    let parse = |t: &str| t.trim().parse::<u32>().ok().filter(|&v| v > 0);
    let r = match s.split_once(['x', 'X']) {
        Some((w, h)) => parse(w).zip(parse(h)),
        None => parse(s).map(|v| (v, v)),
    };
    r.ok_or_else(|| format!("invalid resolution `{s}`, expected WIDTHxHEIGHT"))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(tilefield_core::Error::from)?;
    println!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    submodels: usize,
    parameters: usize,
    final_loss: Option<f64>,
    final_psnr: Option<f64>,
    seconds: f64,
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>, steps: Option<usize>) -> Result<()> {
    let start = Instant::now();
    let mut cfg = SceneConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    if let Some(n) = steps {
        cfg.train.steps = n;
    }
    let base = config.parent().unwrap_or(Path::new("."));
    let cams = cfg.cameras(base)?;
    let teacher = AnalyticTeacher::new(&cfg.scene, &cams.layout);
    let mut student = Student::new(cams.layout.clone(), &cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let data = Dataset {
        cameras: cams.train.clone(),
        heldout: cams.heldout.clone(),
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut csv = Vec::new();
    let report = train(&mut student, &teacher, &data, &cfg.train, Some(&mut csv))?;
    write_atomic(&out.join("metrics.csv"), &csv)?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        layout: cams.layout,
        model: cfg.model,
        steps: cfg.train.steps,
        param_count: student.param_count(),
        cameras: cams.train,
        heldout: cams.heldout,
        scene: cfg.scene,
        final_psnr: report.final_psnr,
    };
    let ck = Checkpoint { meta, student };
    ck.write(out)?;
    print_json(&TrainSummary {
        steps: cfg.train.steps,
        submodels: ck.student.submodels.len(),
        parameters: ck.meta.param_count,
        final_loss: report.rows.last().map(|r| r.terms.total),
        final_psnr: report.final_psnr,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Serialize)]
struct BakeSummary {
    cell: String,
    occupied_voxels: usize,
    atlas_blocks: usize,
    total_blocks: usize,
}

fn cmd_bake(checkpoint: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::read(checkpoint)?;
    let stats = bake_scene(&ck.student, &ck.meta.cameras, &BakeOptions::default(), out)?;
    let summary: Vec<BakeSummary> = ck
        .student
        .submodels
        .iter()
        .zip(stats)
        .map(|(sm, s)| BakeSummary {
            cell: sm.cell.slug(),
            occupied_voxels: s.occupied,
            atlas_blocks: s.atlas_blocks,
            total_blocks: s.total_blocks,
        })
        .collect();
    print_json(&summary)
}

/// Trajectory cameras mapped into the baked scene's normalized space.
fn load_view(bundle: &Path, cameras: &Path, view: &ViewArgs) -> Result<(MarchRenderer, Vec<Camera>)> {
    let mut renderer = MarchRenderer::load(bundle)?;
    renderer.skip = !view.no_skip;
    let poses = load_poses(cameras)?;
    if poses.is_empty() {
        return Err(CliError::Usage(format!("{}: no camera poses", cameras.display())));
    }
    let (w, h) = view.resolution;
    let cams = poses
        .iter()
        .map(|p| renderer.layout.camera_to_normalized(&p.camera(50.0, w, h)))
        .collect();
    Ok((renderer, cams))
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width, img.height, img.to_rgb8()).expect("buffer matches size");
    buf.save(path)?;
    Ok(())
}

fn cmd_render(bundle: &Path, cameras: &Path, out: &Path, view: &ViewArgs) -> Result<()> {
    let (renderer, cams) = load_view(bundle, cameras, view)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut frames = Vec::new();
    for (i, cam) in cams.iter().enumerate() {
        let img = render_image(cam, &renderer.layout, &renderer)?;
        let path = out.join(format!("frame_{i:04}.png"));
        save_png(&img, &path)?;
        frames.push(path);
    }
    print_json(&frames)
}

fn cmd_verify(bundle: Option<&Path>, checkpoint: Option<&Path>, rays: usize, seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let bundles: Vec<BakedBundle> = match (bundle, checkpoint) {
        (Some(root), _) => {
            let scene = SceneManifest::read(root)?;
            let mut out = Vec::new();
            for entry in &scene.submodels {
                match BakedBundle::read_dir(&SceneManifest::submodel_dir(root, entry.cell)) {
                    Ok(b) => {
                        report.push(format!("{}/decode", entry.slug), true, "all payloads decoded");
                        out.push(b);
                    }
                    Err(e) => report.push(format!("{}/decode", entry.slug), false, e.to_string()),
                }
            }
            out
        }
        (None, Some(dir)) => {
            let ck = Checkpoint::read(dir)?;
            let finite = ck.student.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()));
            report.push("checkpoint/finite", finite, format!("{} parameters", ck.meta.param_count));
            let cases: Vec<(u64, u32, bool, Aggregation)> =
                (0..2).map(|i| (seed + i, 1 + i as u32, ck.meta.model.exposure, ck.meta.model.aggregation)).collect();
            verify::verify_gradients(&cases, &mut report);
            let mut out = Vec::new();
            for sm in &ck.student.submodels {
                let (b, _) = tilefield_core::bake::bake_submodel(sm, &ck.meta.cameras, &ck.meta.layout, &BakeOptions::default())?;
                out.push(b);
            }
            out
        }
        (None, None) => return Err(CliError::Usage("pass --bundle or --checkpoint".into())),
    };
    for (i, b) in bundles.iter().enumerate() {
        verify::verify_bundle(b, rays, seed + i as u64, &mut report);
    }
    verify::verify_filters(4, 32, seed, &mut report);
    verify::verify_quantizer(Default::default(), 100_000, seed, &mut report);
    Ok(report)
}

#[derive(Serialize)]
struct BenchSummary {
    frames: usize,
    repeats: usize,
    renders: usize,
    mean_ms: f64,
    p50_ms: f64,
    p90_ms: f64,
    p99_ms: f64,
    min_ms: f64,
    max_ms: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

fn cmd_bench(bundle: &Path, cameras: &Path, repeats: usize, view: &ViewArgs) -> Result<()> {
    if repeats == 0 {
        return Err(CliError::Usage("--repeats must be positive".into()));
    }
    let (renderer, cams) = load_view(bundle, cameras, view)?;
    let mut times = Vec::with_capacity(cams.len() * repeats);
    for cam in &cams {
        for _ in 0..repeats {
            let t = Instant::now();
            let img = render_image(cam, &renderer.layout, &renderer)?;
            std::hint::black_box(img);
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    times.sort_by(f64::total_cmp);
    print_json(&BenchSummary {
        frames: cams.len(),
        repeats,
        renders: times.len(),
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        p50_ms: percentile(&times, 0.5),
        p90_ms: percentile(&times, 0.9),
        p99_ms: percentile(&times, 0.99),
        min_ms: times[0],
        max_ms: times[times.len() - 1],
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seed, steps } => cmd_train(&config, &out, seed, steps),
        Command::Bake { checkpoint, out } => cmd_bake(&checkpoint, &out),
        Command::Render { bundle, cameras, out, view } => cmd_render(&bundle, &cameras, &out, &view),
        Command::Verify {
            bundle,
            checkpoint,
            rays,
            seed,
            out,
        } => {
            let report = cmd_verify(bundle.as_deref(), checkpoint.as_deref(), rays, seed)?;
            print_json(&report)?;
            if let Some(path) = out {
                let text = serde_json::to_vec_pretty(&report).map_err(tilefield_core::Error::from)?;
                write_atomic(&path, &text)?;
            }
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::VerifyFailed)
            }
        }
        Command::Serve { bundle, port, host } => {
            let rt = tokio::runtime::Runtime::new().map_err(io_err(&bundle))?;
            rt.block_on(tilefield_server::serve(&bundle, SocketAddr::new(host, port)))?;
            Ok(())
        }
        Command::Bench {
            bundle,
            cameras,
            repeats,
            view,
        } => cmd_bench(&bundle, &cameras, repeats, &view),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SMERF_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::FAILURE
        }
    }
}
