use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clamp_core::forward::speckle_average;
use clamp_core::io::{
    dump_config, load_config, output_path, read_real, write_point_cloud, write_projection,
    write_real, write_trace, DatasetBundle, MetricsReport, RunConfig,
};
use clamp_core::mace::run_clamp_with;
use clamp_core::metrics::{
    cloud_metrics, max_projection, psnr_scaled, rayleigh_cutoff, to_point_cloud,
};
use clamp_core::prior::{serve, PriorAgent, PriorKind, ReferenceDenoiser};
use clamp_core::sim::{make_phantom, simulate_looks_with, snr_db};
use clamp_core::theory::{run_suite, ValidationConfig};
use clamp_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "clamp",
    version,
    about = "Multi-look coherent lidar reconstruction"
)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate speckled looks of a phantom and write a dataset directory.
    Simulate(Opts),
    /// Reconstruct reflectivity from a dataset directory.
    Reconstruct(Opts),
    /// Compare a reconstruction with the dataset's ground truth.
    Evaluate {
        #[command(flatten)]
        opts: Opts,
        /// Reconstruction volume (default: <out>/reconstruction.clvx).
        #[arg(long)]
        recon: Option<PathBuf>,
    },
    /// Run the toy consensus problems and check convergence to the KKT point.
    ValidateTheory {
        #[command(flatten)]
        opts: Opts,
        /// Number of random problems in addition to the fixed ones.
        #[arg(long, default_value_t = 50)]
        problems: usize,
    },
    /// Print the resolved configuration.
    ConfigDump(Opts),
    #[command(hide = true)]
    ServeDenoiser {
        /// Gaussian smoothing width in voxels; identity if absent.
        #[arg(long)]
        gaussian: Option<f64>,
    },
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// Configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    prior: Option<PriorKind>,
    /// Zero-padding factor.
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    looks: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reconstruct with a = 1 instead of the aperture mask.
    #[arg(long)]
    no_aperture: bool,
    /// Prox strength of the data agents.
    #[arg(long)]
    sigma2: Option<f64>,
}

impl Opts {
    fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => load_config(path)?,
            (None, Some(cfg)) => cfg,
            (None, None) => RunConfig::default(),
        };
        if let Some(p) = self.prior {
            cfg.prior.kind = p;
        }
        if let Some(q) = self.q {
            cfg.forward.q = q;
        }
        if let Some(l) = self.looks {
            cfg.sim.looks = l;
        }
        if let Some(n) = self.iters {
            cfg.engine.max_iters = n;
        }
        if let Some(s) = self.seed {
            cfg.sim.seed = s;
        }
        if self.no_aperture {
            cfg.forward.aperture = false;
        }
        if let Some(s) = self.sigma2 {
            cfg.em.sigma2 = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| missing("--out"))
    }

    fn data(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| missing("--data"))
    }
}

fn missing(flag: &str) -> Error {
    Error::InvalidParameter {
        name: "arguments",
        reason: format!("{flag} is required"),
    }
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(output_path(dir, "config.toml")?, dump_config(cfg)?)?;
    Ok(())
}

fn simulate(opts: &Opts) -> Result<()> {
    let cfg = opts.resolve(None)?;
    let out = opts.out()?;
    let truth = make_phantom(&cfg.phantom()?)?;
    let params = cfg.sim_params()?;
    let op = params.operator()?;
    log::info!(
        "simulating {} looks on {:?}, alpha = {:.4}",
        params.looks,
        params.dims.shape(),
        op.alpha()
    );
    let looks = simulate_looks_with(&truth, &op, &params)?;
    let snr = snr_db(&truth, params.noise_var);
    let bundle = DatasetBundle::new(&cfg, looks, op.mask().clone(), Some(truth), snr)?;
    bundle.write(out)?;
    write_resolved(out, &cfg)?;
    log::info!("wrote dataset to {} (SNR {snr:.2} dB)", out.display());
    Ok(())
}

fn reconstruct(opts: &Opts) -> Result<()> {
    let data = opts.data()?;
    let out = opts.out()?;
    let bundle = DatasetBundle::read(data)?;
    let cfg = opts.resolve(Some(bundle.manifest.config.clone()))?;
    let op = cfg.operator_for(bundle.mask.clone())?;
    let em = cfg.em_params(&op)?;
    let prior = PriorAgent::new(cfg.prior.clone())?;
    log::info!(
        "reconstructing {} looks on {:?} with {:?} prior, aperture {}",
        bundle.looks.len(),
        bundle.dims().shape(),
        cfg.prior.kind,
        if cfg.forward.aperture {
            "modeled"
        } else {
            "ignored"
        }
    );
    let (r, trace) = run_clamp_with(
        &bundle.looks,
        Arc::new(op.clone()),
        Box::new(prior),
        &em,
        &cfg.engine,
    )?;
    let baseline = speckle_average(&bundle.looks, &op)?;
    write_real(&output_path(out, "reconstruction.clvx")?, &r)?;
    write_real(&output_path(out, "baseline.clvx")?, &baseline)?;
    write_trace(&output_path(out, "trace.tsv")?, &trace)?;
    write_resolved(out, &cfg)?;
    if let Some(last) = trace.last() {
        log::info!(
            "finished after {} iterations, convergence error {:.3e}",
            last.iteration,
            last.convergence_error
        );
    }
    Ok(())
}

fn evaluate(opts: &Opts, recon: Option<&Path>) -> Result<()> {
    let data = opts.data()?;
    let out = opts.out()?;
    let bundle = DatasetBundle::read(data)?;
    let cfg = opts.resolve(Some(bundle.manifest.config.clone()))?;
    let truth = bundle
        .truth
        .as_ref()
        .ok_or_else(|| missing("ground truth in the dataset"))?;
    let recon_path = recon
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("reconstruction.clvx"));
    let r = read_real(&recon_path)?;
    let dims = bundle.dims();
    dims.check(&r.dims())?;
    let op = cfg.operator_for(bundle.mask.clone())?;
    let threshold = cfg
        .metrics
        .threshold
        .unwrap_or(op.sigma_w2() / bundle.mask.alpha());
    let geo = cfg.metrics.geometry();
    let pitch = geo.voxel_pitch(dims, cfg.forward.aperture_fraction);
    let cutoff = rayleigh_cutoff(&geo);
    let psnr = psnr_scaled(&r, truth)?;
    let cloud = to_point_cloud(&r, threshold, pitch)?;
    let truth_cloud = to_point_cloud(truth, 0.0, pitch)?;
    let m = cloud_metrics(&cloud, &truth_cloud, cutoff)?;
    let report = MetricsReport::new(psnr, threshold, cutoff, cloud.len(), truth_cloud.len(), &m);
    fs::write(output_path(out, "metrics.toml")?, report.to_text()?)?;
    write_point_cloud(&output_path(out, "cloud.txt")?, &cloud)?;
    write_point_cloud(&output_path(out, "truth_cloud.txt")?, &truth_cloud)?;
    let (values, depth) = max_projection(&r);
    write_projection(&output_path(out, "projection.tsv")?, dims, &values, &depth)?;
    write_resolved(out, &cfg)?;
    log::info!(
        "PSNR {:.2} dB, {} points, false-positive rate {:.3}",
        psnr.db,
        cloud.len(),
        m.fp_rate
    );
    Ok(())
}

#[derive(Serialize)]
struct TheoryRow {
    name: String,
    iterations: usize,
    converged: bool,
    kkt_distance: f64,
    kkt_tolerance: f64,
    lyapunov_monotone: bool,
    lyapunov_max_increase: f64,
    plain_distance: f64,
    passed: bool,
}

#[derive(Serialize)]
struct TheoryReport {
    seed: u64,
    passed: usize,
    total: usize,
    problem: Vec<TheoryRow>,
}

fn validate_theory(opts: &Opts, problems: usize) -> Result<bool> {
    let cfg = opts.resolve(None)?;
    let out = opts.out()?;
    let results = run_suite(cfg.sim.seed, problems, &ValidationConfig::default())?;
    let rows: Vec<TheoryRow> = results
        .iter()
        .map(|s| TheoryRow {
            name: s.name.clone(),
            iterations: s.report.iterations,
            converged: s.report.converged,
            kkt_distance: s.report.kkt_distance,
            kkt_tolerance: s.kkt_tolerance,
            lyapunov_monotone: s.report.lyapunov_monotone,
            lyapunov_max_increase: s.report.lyapunov_max_increase,
            plain_distance: s.report.plain_distance,
            passed: s.passed(),
        })
        .collect();
    let passed = rows.iter().filter(|r| r.passed).count();
    for r in rows.iter().filter(|r| !r.passed) {
        log::warn!(
            "{}: KKT distance {:.3e}, Lyapunov monotone {}",
            r.name,
            r.kkt_distance,
            r.lyapunov_monotone
        );
    }
    let report = TheoryReport {
        seed: cfg.sim.seed,
        passed,
        total: rows.len(),
        problem: rows,
    };
    let text = toml::to_string(&report).map_err(io::Error::other)?;
    fs::write(output_path(out, "theory.toml")?, text)?;
    write_resolved(out, &cfg)?;
    log::info!("{passed}/{} problems passed", report.total);
    Ok(passed == report.total)
}

fn config_dump(opts: &Opts) -> Result<()> {
    let cfg = opts.resolve(None)?;
    let text = dump_config(&cfg)?;
    match &opts.out {
        Some(dir) => fs::write(output_path(dir, "config.toml")?, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParameter {
                name: "threads",
                reason: e.to_string(),
            })?;
    }
    match cli.command {
        Command::Simulate(o) => simulate(&o)?,
        Command::Reconstruct(o) => reconstruct(&o)?,
        Command::Evaluate { opts, recon } => evaluate(&opts, recon.as_deref())?,
        Command::ValidateTheory { opts, problems } => return validate_theory(&opts, problems),
        Command::ConfigDump(o) => config_dump(&o)?,
        Command::ServeDenoiser { gaussian } => {
            let d = gaussian.map_or(ReferenceDenoiser::Identity, ReferenceDenoiser::Gaussian);
            serve(io::stdin().lock(), io::stdout().lock(), d)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: theory validation failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
