//! `lfseg` subcommands.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backend::server::{serve_stdio, serve_tcp};
use crate::backend::{ExternalBackend, ExternalConfig, OracleBackend, SegmenterBackend, StubBackend, Transport};
use crate::disparity::{estimate_disparity, DisparityParams};
use crate::io::{self, Layout, LightFieldMeta, LoadedLightField};
use crate::lf::{Dims, DisparityMap};
use crate::metrics::{self, reference};
use crate::pipeline::{segment_lightfield, PipelineConfig, TimingRecord};
use crate::synthgen::{generate, SceneSpec};

#[derive(Debug, Parser)]
#[command(name = "lfseg", version, about = "Light field segmentation by constrained prompting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Estimate the middle-view disparity map.
    Disparity(DisparityArgs),
    /// Segment a light field.
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth.
    Metrics(MetricsArgs),
    /// Expose the oracle or stub backend over the wire protocol.
    Serve(ServeArgs),
}

/// `AxB` pair, as in `9x9` or `128x128`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair(pub usize, pub usize);

impl FromStr for Pair {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected AxB, got `{s}`"))?;
        let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
        Ok(Pair(parse(a)?, parse(b)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Randomly placed objects at mixed disparities.
    Random,
    /// A far square partly hidden by a near bar.
    Occluder,
    /// A single textured plane.
    Plane,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "9x9")]
    pub views: Pair,
    #[arg(long, default_value = "128x128")]
    pub size: Pair,
    #[arg(long, default_value_t = 3)]
    pub objects: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SceneKind::Random)]
    pub scene: SceneKind,
    /// Plane disparity for `--scene plane`.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub disparity: f64,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub patch_grid: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimatorArgs {
    #[arg(long, default_value_t = 0.8)]
    pub sigma_grad: f64,
    #[arg(long, default_value_t = 1.6)]
    pub sigma_tensor: f64,
    #[arg(long, default_value_t = 0.05)]
    pub coherence_min: f64,
}

#[derive(Debug, Args)]
pub struct DisparityArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub disparity_sign: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Oracle,
    Stub,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisparitySource {
    /// Structure-tensor estimate from the light field.
    Estimate,
    /// A stored map given by `--disparity-file`.
    File,
    /// The middle view of the ground-truth disparity.
    Gt,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = BackendKind::Oracle)]
    pub backend: BackendKind,
    /// Model server: a command to spawn, or `tcp://host:port`.
    #[arg(long, env = "LFSEG_SERVER")]
    pub server: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub pool_size: usize,
    #[arg(long, default_value = "hiera_small")]
    pub model: String,
    #[arg(long, default_value = "cuda")]
    pub device: String,
    /// Disable prompt-based refinement.
    #[arg(long)]
    pub no_ref: bool,
    /// Disable feature-similarity occlusion filtering.
    #[arg(long)]
    pub no_occ: bool,
    #[arg(long, default_value_t = 0.7)]
    pub t_sim: f64,
    #[arg(long, default_value_t = 0.1)]
    pub t_iou: f64,
    #[arg(long, default_value_t = 64)]
    pub points_per_side: usize,
    #[arg(long, default_value_t = 4)]
    pub min_mask_pixels: usize,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub disparity_sign: f64,
    #[arg(long, value_enum, default_value_t = DisparitySource::Estimate)]
    pub disparity: DisparitySource,
    #[arg(long)]
    pub disparity_file: Option<PathBuf>,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Patch grid of oracle features derived from labels when the scene has none.
    #[arg(long, default_value_t = 16)]
    pub oracle_patch_grid: usize,
    #[arg(long, default_value_t = 16)]
    pub oracle_embed_dim: usize,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Light field directory with ground truth.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Output directory of `lfseg segment`.
    #[arg(long, short)]
    pub pred: PathBuf,
    /// Report path; defaults to `<pred>/report.json`.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub disparity_sign: f64,
    /// Recompute every metric with the brute-force reference (scenes up to 16x16 pixels).
    #[arg(long)]
    pub brute_force_check: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Stub)]
    pub backend: BackendKind,
    /// Scene directory, required for the oracle.
    #[arg(long, short)]
    pub input: Option<PathBuf>,
    /// Listen on this address instead of stdin/stdout.
    #[arg(long)]
    pub tcp: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub oracle_patch_grid: usize,
    #[arg(long, default_value_t = 16)]
    pub oracle_embed_dim: usize,
}

/// Failure classes mapped to exit codes 2 and 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Disparity(a) => cmd_disparity(&a),
        Command::Segment(a) => cmd_segment(&a),
        Command::Metrics(a) => cmd_metrics(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let Pair(s, t) = a.views;
    let Pair(h, w) = a.size;
    if s == 0 || t == 0 || h == 0 || w == 0 {
        return Err(usage("--views and --size must be positive"));
    }
    if s < 3 && t < 3 {
        return Err(usage(format!(
            "--views {s}x{t}: propagation works with any grid but disparity estimation needs at least 3 views on one axis"
        )));
    }
    let dims = Dims::new(s, t, h, w);
    let mut spec = match a.scene {
        SceneKind::Random => SceneSpec::random(dims, a.objects, a.seed),
        SceneKind::Occluder => SceneSpec::occluder(dims, a.seed),
        SceneKind::Plane => Ok(SceneSpec::plane(dims, a.disparity, a.seed)),
    }
    .map_err(|e| usage(e.to_string()))?;
    if let Some(k) = a.feature_dim {
        spec.feature_dim = k;
    }
    if let Some(p) = a.patch_grid {
        spec.patch_grid = p;
    }
    if let Some(n) = a.noise {
        spec.noise_sigma = n;
    }
    let scene = generate(&spec).map_err(|e| usage(e.to_string()))?;
    io::save_lightfield(&a.out, &scene.lf, Some(&scene.gt), Some(&scene.features)).context("writing scene")?;
    io::write_json(&a.out.join("scene.json"), &scene.spec).context("writing scene.json")?;
    info!("wrote {} views to {}", dims.num_views(), a.out.display());
    Ok(())
}

fn estimator_params(a: &EstimatorArgs, sign: f64) -> DisparityParams {
    DisparityParams {
        sigma_grad: a.sigma_grad,
        sigma_tensor: a.sigma_tensor,
        coherence_min: a.coherence_min,
        disparity_sign: sign,
    }
}

fn load(input: &Path) -> Result<LoadedLightField, CliError> {
    io::load_lightfield(input, &Layout::canonical())
        .with_context(|| format!("loading {}", input.display()))
        .map_err(CliError::Runtime)
}

fn check_sign(sign: f64) -> Result<(), CliError> {
    if sign != 1.0 && sign != -1.0 {
        return Err(usage("--disparity-sign must be 1 or -1"));
    }
    Ok(())
}

pub fn cmd_disparity(a: &DisparityArgs) -> Result<(), CliError> {
    check_sign(a.disparity_sign)?;
    let loaded = load(&a.input)?;
    let params = estimator_params(&a.estimator, a.disparity_sign);
    let dm = estimate_disparity(&loaded.lf, &params).map_err(|e| usage(e.to_string()))?;
    let params_json = serde_json::to_value(params).context("serializing parameters")?;
    io::save_disparity(&a.out, &dm, Some(params_json)).context("writing disparity")?;
    Ok(())
}

/// Everything that determines a segmentation run, echoed into its manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: PathBuf,
    pub backend: BackendKind,
    pub server: Option<String>,
    pub disparity: DisparitySource,
    pub disparity_file: Option<PathBuf>,
    pub estimator: Option<DisparityParams>,
    pub pipeline: PipelineConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingFile {
    pub workers: usize,
    pub timing: TimingRecord,
}

fn build_backend(a: &SegmentArgs, loaded: &LoadedLightField) -> Result<Box<dyn SegmenterBackend>, CliError> {
    match a.backend {
        BackendKind::Stub => Ok(Box::new(StubBackend::new())),
        BackendKind::Oracle => Ok(Box::new(oracle_from(loaded, a.oracle_patch_grid, a.oracle_embed_dim)?)),
        BackendKind::External => {
            let server = a.server.as_deref().ok_or_else(|| usage("--backend external needs --server or LFSEG_SERVER"))?;
            let transport = Transport::from_str(server).map_err(|e| usage(e.to_string()))?;
            let config = ExternalConfig {
                transport,
                pool_size: a.pool_size.max(1),
                model: a.model.clone(),
                device: a.device.clone(),
            };
            let backend = ExternalBackend::connect(&config).context("connecting to the model server")?;
            Ok(Box::new(backend))
        }
    }
}

fn oracle_from(loaded: &LoadedLightField, patch_grid: usize, embed_dim: usize) -> Result<OracleBackend, CliError> {
    let gt = loaded.gt.as_ref().ok_or_else(|| usage("the oracle backend needs gt/labels in the input"))?;
    let backend = match &loaded.features {
        Some(features) => OracleBackend::new(&loaded.lf, gt, features.clone()),
        None => OracleBackend::with_label_features(&loaded.lf, gt, patch_grid, embed_dim),
    };
    backend.context("building the oracle backend").map_err(CliError::Runtime)
}

fn run_disparity(a: &SegmentArgs, loaded: &LoadedLightField) -> Result<DisparityMap, CliError> {
    let lf = &loaded.lf;
    let d = match a.disparity {
        DisparitySource::Estimate => {
            estimate_disparity(lf, &estimator_params(&a.estimator, a.disparity_sign)).map_err(|e| usage(e.to_string()))?
        }
        DisparitySource::File => {
            let path = a.disparity_file.as_ref().ok_or_else(|| usage("--disparity file needs --disparity-file"))?;
            io::load_disparity(path).with_context(|| format!("loading {}", path.display()))?
        }
        DisparitySource::Gt => {
            let dims = lf.dims();
            let plane = loaded
                .gt
                .as_ref()
                .and_then(|gt| gt.disparity_at(&dims, lf.middle()))
                .ok_or_else(|| anyhow!("input has no ground-truth disparity"))?;
            DisparityMap::from_values(plane.clone(), lf.middle())
        }
    };
    let dims = lf.dims();
    if d.view != lf.middle() || d.values.height() != dims.height || d.values.width() != dims.width {
        return Err(CliError::Runtime(anyhow!(
            "disparity map is anchored at {} with size {}x{}, expected the middle view {} at {}x{}",
            d.view,
            d.values.height(),
            d.values.width(),
            lf.middle(),
            dims.height,
            dims.width
        )));
    }
    Ok(d)
}

pub fn cmd_segment(a: &SegmentArgs) -> Result<(), CliError> {
    check_sign(a.disparity_sign)?;
    let cfg = PipelineConfig {
        t_sim: a.t_sim,
        t_iou: a.t_iou,
        points_per_side: a.points_per_side,
        enable_refinement: !a.no_ref,
        enable_occlusion: !a.no_occ,
        min_mask_pixels: a.min_mask_pixels,
        disparity_sign: a.disparity_sign,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if a.workers == Some(0) {
        return Err(usage("--workers must be at least 1"));
    }
    let loaded = load(&a.input)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.workers.unwrap_or(0))
        .build()
        .context("starting the worker pool")?;
    let workers = pool.current_num_threads();
    let backend = build_backend(a, &loaded)?;
    let seg = pool.install(|| -> Result<_, CliError> {
        let d = run_disparity(a, &loaded)?;
        Ok(segment_lightfield(backend.as_ref(), &loaded.lf, &d, &cfg).context("segmenting")?)
    })?;
    let run = RunConfig {
        input: a.input.clone(),
        backend: a.backend,
        server: a.server.clone().filter(|_| a.backend == BackendKind::External),
        disparity: a.disparity,
        disparity_file: a.disparity_file.clone(),
        estimator: (a.disparity == DisparitySource::Estimate).then(|| estimator_params(&a.estimator, a.disparity_sign)),
        pipeline: cfg,
        seed: a.seed,
    };
    let meta = LightFieldMeta::of(&loaded.lf);
    let manifest = io::save_masks(&a.out, meta, &seg.masks, serde_json::to_value(&run).context("serializing config")?)
        .context("writing masks")?;
    io::write_json(&a.out.join("timing.json"), &TimingFile { workers, timing: seg.timing.clone() })
        .context("writing timing")?;
    let t = manifest.stage_totals;
    info!(
        "{} segments; stages: coarse {} occluded {} refined {} fallback {} absent {}; {:.3} ms per mask per subview",
        manifest.segments.len(),
        t.coarse,
        t.occluded,
        t.refined,
        t.fallback,
        t.absent,
        seg.timing.ms_per_mask_per_subview
    );
    Ok(())
}

pub fn cmd_metrics(a: &MetricsArgs) -> Result<(), CliError> {
    check_sign(a.disparity_sign)?;
    let (masks, manifest) = io::load_masks(&a.pred).with_context(|| format!("loading masks from {}", a.pred.display()))?;
    let dims = manifest.lightfield.dims();
    let middle = manifest.lightfield.middle();
    let layout = Layout::canonical();
    let missing = io::missing_ground_truth(&a.input, &layout, dims, false);
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(CliError::Runtime(anyhow!("missing ground truth files:\n  {}", list.join("\n  "))));
    }
    let loaded = load(&a.input)?;
    let gt = loaded.gt.ok_or_else(|| anyhow!("no ground truth under {}", a.input.display()))?;
    if loaded.lf.dims() != dims {
        return Err(CliError::Runtime(anyhow!("predictions are {:?} but the light field is {:?}", dims, loaded.lf.dims())));
    }
    if a.brute_force_check && (dims.height > 16 || dims.width > 16) {
        return Err(usage(format!("--brute-force-check supports scenes up to 16x16 pixels, got {}x{}", dims.height, dims.width)));
    }
    let timing_path = a.pred.join("timing.json");
    let timing: Option<TimingFile> = if timing_path.exists() {
        let text = std::fs::read_to_string(&timing_path).with_context(|| format!("reading {}", timing_path.display()))?;
        Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", timing_path.display()))?)
    } else {
        None
    };
    let mut report = metrics::evaluate(&masks, &gt, dims, middle, timing.as_ref().map(|t| &t.timing), a.disparity_sign);
    report.config = serde_json::json!({ "prediction": manifest.config, "disparity_sign": a.disparity_sign });
    if a.brute_force_check {
        brute_force_check(&masks, &gt, dims, middle, a.disparity_sign, &report)?;
        info!("brute-force check passed");
    }
    for w in &report.warnings {
        warn!("{w}");
    }
    let out = a.out.clone().unwrap_or_else(|| a.pred.join("report.json"));
    io::write_json(&out, &report).context("writing report")?;
    Ok(())
}

fn brute_force_check(
    masks: &[crate::lf::LightFieldMask],
    gt: &crate::lf::GroundTruth,
    dims: Dims,
    middle: crate::lf::ViewIndex,
    sign: f64,
    report: &metrics::MetricsReport,
) -> Result<(), CliError> {
    let mut mismatches = Vec::new();
    if let Some(disp) = &gt.disparity {
        let (siou, per) = reference::siou(masks, disp, middle, sign);
        if siou != report.siou || per != report.per_segment_siou {
            mismatches.push(format!("siou {:?} vs {:?}", report.siou, siou));
        }
        let lpp = reference::lpp(masks, disp, middle, sign);
        if lpp != report.lpp {
            mismatches.push(format!("lpp {:?} vs {:?}", report.lpp, lpp));
        }
    }
    let aa = reference::aa(masks, &gt.labels, dims);
    if aa != report.aa {
        mismatches.push(format!("aa {:?} vs {:?}", report.aa, aa));
    }
    let ue = reference::ue(masks, &gt.labels, dims);
    if ue != report.ue {
        mismatches.push(format!("ue {} vs {}", report.ue, ue));
    }
    if !mismatches.is_empty() {
        return Err(CliError::Runtime(anyhow!("brute-force check failed: {}", mismatches.join("; "))));
    }
    Ok(())
}

pub fn cmd_serve(a: &ServeArgs) -> Result<(), CliError> {
    let backend: Arc<dyn SegmenterBackend> = match a.backend {
        BackendKind::Stub => Arc::new(StubBackend::new()),
        BackendKind::Oracle => {
            let input = a.input.as_ref().ok_or_else(|| usage("--backend oracle needs --input"))?;
            Arc::new(oracle_from(&load(input)?, a.oracle_patch_grid, a.oracle_embed_dim)?)
        }
        BackendKind::External => return Err(usage("serve supports the oracle and stub backends")),
    };
    match &a.tcp {
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            info!("listening on {}", listener.local_addr().context("reading local address")?);
            serve_tcp(backend, listener).context("serving")?;
        }
        None => {
            let stats = serve_stdio(backend.as_ref()).context("serving stdio")?;
            info!("served {} frames ({} errors)", stats.frames, stats.errors);
        }
    }
    Ok(())
}

