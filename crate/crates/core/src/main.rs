//! Command-line front end: phantoms, projection simulation, classical and
//! neural reconstruction, evaluation, and fixer dataset curation.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on usage errors.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tomoforge::curation::{generate_pairs, read_recipe};
use tomoforge::diffnr::{diffnr_optimize, write_progress_csv, DiffNrConfig, DiffNrRun};
use tomoforge::fixer::{
    serve_echo, EchoMode, ExternalFixer, IdentityFixer, OracleFixer, SliceFixer, TvDenoiseFixer,
};
use tomoforge::formats::{
    read_geometry_config, read_projections, read_volume, write_pairs, write_projections,
    write_volume, GeometryConfig, PAIR_KIND_VOXEL,
};
use tomoforge::geometry::{uniform_angles, ConeBeamGeometry};
use tomoforge::objectives::{ssim2d, ssim3d, SsimConfig};
use tomoforge::phantom::{random_ellipsoids, shepp_logan};
use tomoforge::projector::{add_photon_noise, forward_project, MarchConfig};
use tomoforge::representations::{
    default_kernel_count, init_cloud_from_volume, CloudLearningRates, TrainableCloud, VoxelField,
};
use tomoforge::solvers::{asdpocs_reconstruct, sart_reconstruct, AsdPocsConfig, SartConfig};
use tomoforge::volume::{extract_slice, psnr_volumes, ProjectionStack, SliceAxis, Volume};
use tomoforge::{Error, Result};

#[derive(Parser)]
#[command(name = "tomoforge", version, about = "Cone-beam CT reconstruction sandbox")]
struct Cli {
    /// Worker threads, 0 for one per core. The TOMOFORGE_THREADS
    /// environment variable takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic test volume.
    Phantom {
        #[arg(long, value_enum, default_value_t = PhantomKind::Shepp3d)]
        kind: PhantomKind,
        /// Grid size as N or X,Y,Z; every axis must be at least 16.
        #[arg(long, value_parser = parse_dims)]
        dims: (usize, usize, usize),
        /// Ellipsoid mixture seed (shepp3d ignores it).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },

    /// Project a volume over a uniform full orbit.
    Simulate {
        #[arg(long)]
        volume: PathBuf,
        /// Scanner description TOML; derived from the volume when absent.
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[arg(long)]
        views: usize,
        /// Mean photon count for transmission noise; noiseless when absent.
        #[arg(long)]
        noise_photons: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },

    /// Reconstruct a volume from a projection stack.
    Reconstruct {
        #[arg(long)]
        projections: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Scanner description TOML; without it the grid is assumed cubic
        /// in x/y (columns x columns x rows, unit voxels).
        #[arg(long)]
        geometry: Option<PathBuf>,
        /// Full sweeps for sart/asdpocs, optimizer steps for the neural
        /// methods.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Slice repair plugin for the neural methods:
        /// identity | tvdenoise | oracle:<volume> | exec:<command>.
        #[arg(long, default_value = "identity", value_parser = parse_fixer)]
        fixer: FixerSpec,
        /// Added noise level for oracle fixers.
        #[arg(long, default_value_t = 0.0)]
        oracle_sigma: f64,
        /// Reference-pull weight; 0 disables the fixer loop entirely.
        #[arg(long)]
        lambda_diff: Option<f64>,
        /// Iterations between reference rebuilds.
        #[arg(long)]
        ell: Option<usize>,
        /// Iterations between reference pulls.
        #[arg(long)]
        tau: Option<usize>,
        /// Kernel count for gaussnr; derived from the grid when absent.
        #[arg(long)]
        kernels: Option<usize>,
        /// Voxel learning rate for voxelnr.
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Ground truth volume; enables the metrics row and progress PSNR.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Metrics CSV destination (stdout when absent); needs --gt.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Per-iteration progress CSV for the neural methods.
        #[arg(long)]
        progress: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },

    /// Compare a reconstruction against a reference volume.
    Eval {
        #[arg(long)]
        reconstruction: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// CSV destination (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Build a paired clean/corrupted slice dataset from a recipe.
    Curate {
        /// Ground truth volume the pairs are cut from.
        #[arg(long)]
        volume: PathBuf,
        /// Recipe TOML listing the reconstruction jobs.
        #[arg(long)]
        recipe: PathBuf,
        /// Scanner description TOML; derived from the volume when absent.
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },

    /// Frame-echo worker for exercising the external fixer transport.
    #[command(hide = true)]
    FixerEcho {
        #[arg(long, value_enum, default_value_t = EchoModeArg::Echo)]
        mode: EchoModeArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PhantomKind {
    Shepp3d,
    Ellipsoids,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Sart,
    Asdpocs,
    Voxelnr,
    Gaussnr,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EchoModeArg {
    /// Answer every request with its own slice.
    Echo,
    /// Claim a full response but write only half of it, then exit.
    Truncate,
}

/// Slice repair plugin choice, parsed from `--fixer`.
#[derive(Debug, Clone)]
enum FixerSpec {
    Identity,
    TvDenoise,
    Oracle(PathBuf),
    Exec(Vec<String>),
}

fn parse_fixer(s: &str) -> std::result::Result<FixerSpec, String> {
    if s == "identity" {
        return Ok(FixerSpec::Identity);
    }
    if s == "tvdenoise" {
        return Ok(FixerSpec::TvDenoise);
    }
    if let Some(path) = s.strip_prefix("oracle:") {
        if path.is_empty() {
            return Err("oracle fixer needs a volume path, e.g. oracle:gt.vol".into());
        }
        return Ok(FixerSpec::Oracle(PathBuf::from(path)));
    }
    if let Some(cmd) = s.strip_prefix("exec:") {
        let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
        if argv.is_empty() {
            return Err("exec fixer needs a command line, e.g. exec:./worker".into());
        }
        return Ok(FixerSpec::Exec(argv));
    }
    Err(format!(
        "unknown fixer '{s}' (expected identity, tvdenoise, oracle:<volume>, or exec:<command>)"
    ))
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse = |p: &str| {
        p.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad dimension '{p}'"))
    };
    match parts.as_slice() {
        [n] => {
            let n = parse(n)?;
            Ok((n, n, n))
        }
        [x, y, z] => Ok((parse(x)?, parse(y)?, parse(z)?)),
        _ => Err(format!("expected N or X,Y,Z, got '{s}'")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match thread_count(cli.threads) {
        Ok(n) => n,
        Err(msg) => {
            eprintln!("tomoforge: {msg}");
            return ExitCode::from(2);
        }
    };
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("tomoforge: thread pool setup failed: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tomoforge: {e}");
            ExitCode::from(1)
        }
    }
}

fn thread_count(flag: usize) -> std::result::Result<usize, String> {
    match std::env::var("TOMOFORGE_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| format!("TOMOFORGE_THREADS must be a number, got '{v}'")),
        Err(std::env::VarError::NotPresent) => Ok(flag),
        Err(e) => Err(format!("TOMOFORGE_THREADS is unreadable: {e}")),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom {
            kind,
            dims,
            seed,
            out,
        } => cmd_phantom(kind, dims, seed, &out),
        Command::Simulate {
            volume,
            geometry,
            views,
            noise_photons,
            seed,
            out,
        } => cmd_simulate(&volume, geometry.as_deref(), views, noise_photons, seed, &out),
        Command::Reconstruct {
            projections,
            method,
            geometry,
            iters,
            seed,
            fixer,
            oracle_sigma,
            lambda_diff,
            ell,
            tau,
            kernels,
            lr,
            gt,
            metrics,
            progress,
            out,
        } => cmd_reconstruct(ReconstructArgs {
            projections,
            method,
            geometry,
            iters,
            seed,
            fixer,
            oracle_sigma,
            lambda_diff,
            ell,
            tau,
            kernels,
            lr,
            gt,
            metrics,
            progress,
            out,
        }),
        Command::Eval {
            reconstruction,
            reference,
            out,
        } => cmd_eval(&reconstruction, &reference, out.as_deref()),
        Command::Curate {
            volume,
            recipe,
            geometry,
            out,
        } => cmd_curate(&volume, &recipe, geometry.as_deref(), &out),
        Command::FixerEcho { mode } => {
            let mode = match mode {
                EchoModeArg::Echo => EchoMode::Echo,
                EchoModeArg::Truncate => EchoMode::Truncate,
            };
            serve_echo(std::io::stdin().lock(), std::io::stdout().lock(), mode)
        }
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

/// Reads a volume and, when a scanner config is given, checks the grid and
/// applies the configured voxel spacing (the volume container stores none).
fn load_volume(path: &Path, cfg: Option<&GeometryConfig>) -> Result<Volume> {
    let vol = read_volume(path)?;
    match cfg {
        Some(c) => {
            if vol.dims() != c.volume_dims() {
                return Err(Error::Config(format!(
                    "volume {} is {:?} but the geometry config expects {:?}",
                    path.display(),
                    vol.dims(),
                    c.volume_dims()
                )));
            }
            Ok(vol.with_spacing(c.volume_spacing()))
        }
        None => Ok(vol),
    }
}

fn build_geometry(
    cfg: Option<&GeometryConfig>,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    angles: Vec<f64>,
) -> Result<ConeBeamGeometry> {
    match cfg {
        Some(c) => c.to_geometry(angles),
        None => ConeBeamGeometry::standard(dims, spacing, angles),
    }
}

fn create_file(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// phantom

fn cmd_phantom(
    kind: PhantomKind,
    dims: (usize, usize, usize),
    seed: u64,
    out: &Path,
) -> Result<()> {
    let spacing = (1.0, 1.0, 1.0);
    let vol = match kind {
        PhantomKind::Shepp3d => shepp_logan(dims, spacing)?,
        PhantomKind::Ellipsoids => random_ellipsoids(dims, spacing, seed)?,
    };
    write_volume(out, &vol)?;
    println!(
        "wrote {} ({} x {} x {})",
        out.display(),
        dims.0,
        dims.1,
        dims.2
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

fn cmd_simulate(
    volume: &Path,
    geometry: Option<&Path>,
    views: usize,
    noise_photons: Option<f64>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let cfg = geometry.map(read_geometry_config).transpose()?;
    let vol = load_volume(volume, cfg.as_ref())?;
    let geom = build_geometry(
        cfg.as_ref(),
        vol.dims(),
        vol.spacing(),
        uniform_angles(views, TAU)?,
    )?;
    let march = MarchConfig::for_geometry(&geom);
    let mut stack = forward_project(&vol, &geom, &march)?;
    if let Some(photons) = noise_photons {
        stack = add_photon_noise(&stack, photons, seed)?;
    }
    write_projections(out, &stack)?;
    println!(
        "wrote {} ({} views, {} x {} detector)",
        out.display(),
        stack.n_views(),
        stack.rows,
        stack.cols
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// reconstruct

struct ReconstructArgs {
    projections: PathBuf,
    method: Method,
    geometry: Option<PathBuf>,
    iters: Option<usize>,
    seed: u64,
    fixer: FixerSpec,
    oracle_sigma: f64,
    lambda_diff: Option<f64>,
    ell: Option<usize>,
    tau: Option<usize>,
    kernels: Option<usize>,
    lr: f64,
    gt: Option<PathBuf>,
    metrics: Option<PathBuf>,
    progress: Option<PathBuf>,
    out: PathBuf,
}

/// Optimizer steps when --iters is absent on a neural method.
const DEFAULT_NR_ITERS: usize = 500;

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let stack = read_projections(&args.projections)?;
    let cfg = args
        .geometry
        .as_deref()
        .map(read_geometry_config)
        .transpose()?;
    let (dims, spacing) = match &cfg {
        Some(c) => (c.volume_dims(), c.volume_spacing()),
        None => ((stack.cols, stack.cols, stack.rows), (1.0, 1.0, 1.0)),
    };
    let geom = build_geometry(cfg.as_ref(), dims, spacing, stack.angles.clone())?;
    let gt = args
        .gt
        .as_deref()
        .map(|p| load_volume(p, cfg.as_ref()))
        .transpose()?;
    if args.metrics.is_some() && gt.is_none() {
        return Err(Error::Config("--metrics needs --gt".into()));
    }

    let volume = match args.method {
        Method::Sart => {
            let mut scfg = SartConfig::for_geometry(&geom);
            if let Some(n) = args.iters {
                scfg.n_iterations = n;
            }
            sart_reconstruct(&stack, &geom, &scfg)?
        }
        Method::Asdpocs => {
            let mut acfg = AsdPocsConfig::for_geometry(&geom);
            if let Some(n) = args.iters {
                acfg.sart.n_iterations = n;
            }
            asdpocs_reconstruct(&stack, &geom, &acfg)?
        }
        Method::Voxelnr | Method::Gaussnr => {
            let run = neural_reconstruct(&args, &stack, &geom, dims, spacing, gt.as_ref())?;
            if let Some(path) = &args.progress {
                write_progress_csv(&run.progress, create_file(path)?)
                    .map_err(|e| Error::io(path, e))?;
            }
            run.volume
        }
    };

    write_volume(&args.out, &volume)?;
    match &gt {
        Some(gt) => {
            let row = metrics_csv(&volume, gt)?;
            match &args.metrics {
                Some(path) => {
                    create_file(path)?
                        .write_all(row.as_bytes())
                        .map_err(|e| Error::io(path, e))?;
                }
                None => print!("{row}"),
            }
        }
        None => println!("wrote {}", args.out.display()),
    }
    Ok(())
}

fn neural_reconstruct(
    args: &ReconstructArgs,
    stack: &ProjectionStack,
    geom: &ConeBeamGeometry,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    gt: Option<&Volume>,
) -> Result<DiffNrRun> {
    let total = args.iters.unwrap_or(DEFAULT_NR_ITERS);
    let mut cfg = match args.method {
        Method::Voxelnr => DiffNrConfig::for_voxel(total, dims, spacing, args.seed),
        Method::Gaussnr => DiffNrConfig::for_cloud(total, dims, spacing, args.seed),
        _ => unreachable!("classical methods never reach the neural path"),
    };
    if let Some(l) = args.lambda_diff {
        cfg.lambda_diff = l;
    }
    if let Some(e) = args.ell {
        cfg.ref_interval = e;
    }
    if let Some(t) = args.tau {
        cfg.aug_period = t;
    }
    let mut fixer = build_fixer(&args.fixer, args.oracle_sigma, args.seed)?;

    match args.method {
        Method::Voxelnr => {
            let march = MarchConfig::for_geometry(geom);
            let mut rep = VoxelField::new(Volume::zeros(dims, spacing), march, args.lr);
            diffnr_optimize(&mut rep, stack, geom, fixer.as_mut(), &cfg, gt)
        }
        Method::Gaussnr => {
            // a short classical pass seeds kernel placement
            let coarse_cfg = SartConfig {
                n_iterations: 3,
                ..SartConfig::for_geometry(geom)
            };
            let coarse = sart_reconstruct(stack, geom, &coarse_cfg)?;
            let kernels = args.kernels.unwrap_or_else(|| default_kernel_count(dims));
            let cloud = init_cloud_from_volume(&coarse, kernels, args.seed)?;
            let mut rep = TrainableCloud::new(cloud, CloudLearningRates::default())?;
            diffnr_optimize(&mut rep, stack, geom, fixer.as_mut(), &cfg, gt)
        }
        _ => unreachable!("classical methods never reach the neural path"),
    }
}

fn build_fixer(spec: &FixerSpec, oracle_sigma: f64, seed: u64) -> Result<Box<dyn SliceFixer>> {
    match spec {
        FixerSpec::Identity => Ok(Box::new(IdentityFixer)),
        FixerSpec::TvDenoise => Ok(Box::new(TvDenoiseFixer::default())),
        FixerSpec::Oracle(path) => {
            let gt = read_volume(path)?;
            Ok(Box::new(OracleFixer::new(gt, oracle_sigma, seed)?))
        }
        FixerSpec::Exec(argv) => Ok(Box::new(ExternalFixer::spawn(&argv[0], &argv[1..])?)),
    }
}

// ---------------------------------------------------------------------------
// eval

/// One CSV row of volume metrics. SSIM uses the joint peak of both volumes
/// as its dynamic range so the values are symmetric in their arguments.
fn metrics_csv(recon: &Volume, reference: &Volume) -> Result<String> {
    let peak = recon
        .data()
        .iter()
        .chain(reference.data())
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let cfg = SsimConfig {
        dynamic_range: Some(peak),
        ..SsimConfig::default()
    };

    let psnr = psnr_volumes(recon, reference)?;
    let s3 = ssim3d(recon, reference, &cfg)?;
    let mut per_axis = Vec::with_capacity(3);
    for axis in [SliceAxis::Axial, SliceAxis::Coronal, SliceAxis::Sagittal] {
        let n = axis.extent(recon.dims());
        let mut sum = 0.0;
        for i in 0..n {
            let a = extract_slice(recon, axis, i);
            let b = extract_slice(reference, axis, i);
            sum += ssim2d(&a.image, &b.image, &cfg)?;
        }
        per_axis.push(sum / n as f64);
    }

    let psnr_text = if psnr.is_infinite() {
        "inf".to_string()
    } else {
        format!("{psnr:.6}")
    };
    Ok(format!(
        "psnr,ssim3d,ssim_axial,ssim_coronal,ssim_sagittal\n{psnr_text},{:.9},{:.9},{:.9},{:.9}\n",
        s3, per_axis[0], per_axis[1], per_axis[2]
    ))
}

fn cmd_eval(reconstruction: &Path, reference: &Path, out: Option<&Path>) -> Result<()> {
    let recon = read_volume(reconstruction)?;
    let gt = read_volume(reference)?;
    let row = metrics_csv(&recon, &gt)?;
    match out {
        Some(path) => create_file(path)?
            .write_all(row.as_bytes())
            .map_err(|e| Error::io(path, e)),
        None => {
            print!("{row}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// curate

fn cmd_curate(volume: &Path, recipe: &Path, geometry: Option<&Path>, out: &Path) -> Result<()> {
    let recipe = read_recipe(recipe)?;
    let cfg = geometry.map(read_geometry_config).transpose()?;
    let gt = load_volume(volume, cfg.as_ref())?;
    let template = build_geometry(cfg.as_ref(), gt.dims(), gt.spacing(), vec![0.0])?;
    let records = generate_pairs(&gt, &template, &recipe)?;
    let n_voxel = records
        .iter()
        .filter(|r| r.kind == PAIR_KIND_VOXEL)
        .count();
    write_pairs(out, &records)?;
    println!(
        "wrote {} ({} pairs: {} voxel-field, {} gaussian-cloud)",
        out.display(),
        records.len(),
        n_voxel,
        records.len() - n_voxel
    );
    Ok(())
}
