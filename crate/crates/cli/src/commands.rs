//! Subcommand definitions and their handlers.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use sunsplat_core::losses::LossWeights;
use sunsplat_core::scene::{load_scene, save_scene};
use sunsplat_core::shading::Sun;
use sunsplat_core::synth::{generate, SceneKind, SynthSpec};
use sunsplat_core::train::{extract_all, run_stage1, run_stage2, run_stage3, StageSchedule, TrainLog};
use sunsplat_core::ImagePlane;

use crate::dataset::{self, parent_dir, SCENE_FILE};
use crate::render::{parse_component, parse_direction, parse_numbers, Output, RenderRequest, Renderer, View};
use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "sunsplat", version, about = "Fit, bake and relight outdoor Gaussian-splat scenes")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene container and its ground-truth bundle.
    Synth(SynthArgs),
    /// Fit the ambient model and extract per-image sun visibility.
    Extract(ExtractArgs),
    /// Fit reflectance and sun/sky/indirect shading.
    Decompose(DecomposeArgs),
    /// Trace shadows and bake them into the visibility decoder.
    Bake(BakeArgs),
    /// Render one output for a camera, embedding and sun direction.
    Render(RenderArgs),
    /// Render an interpolation script to an image sequence.
    Relight(RelightArgs),
    /// Serve renders over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// plane, box-over-plane or colonnade.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML scene spec; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub sky_floaters: Option<usize>,
    #[arg(long)]
    pub transients: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Output directory.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Input scene container.
    #[arg(long)]
    pub scene: PathBuf,
    /// Output container; defaults to overwriting the input.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Iteration count for this stage.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Use the full-length schedule instead of the desk-scale one.
    #[arg(long)]
    pub paper_iters: bool,
}

impl StageArgs {
    fn schedule(&self) -> StageSchedule {
        if self.paper_iters {
            StageSchedule::paper()
        } else {
            StageSchedule::desk()
        }
    }

    fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.scene.clone())
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    /// Directory with training images and sky masks; defaults to the scene's directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory with visibility maps from `extract`; defaults to the scene's directory.
    #[arg(long)]
    pub visibility: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BakeArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    /// Number of spiral-lattice training directions.
    #[arg(long)]
    pub directions: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Training camera; also supplies intrinsics for --pose.
    #[arg(long)]
    pub camera_id: Option<usize>,
    /// Twelve comma-separated numbers: row-major world-to-camera [R | t].
    #[arg(long)]
    pub pose: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub image_id: usize,
    /// Second embedding to interpolate toward.
    #[arg(long)]
    pub image_id_b: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub t: f64,
    /// Interpolated components, comma-separated (sun,sky,ind).
    #[arg(long, default_value = "sun,sky,ind")]
    pub interp: String,
    /// composite, sun, sky, ind, reflectance or visibility.
    #[arg(long, default_value = "composite")]
    pub component: String,
    /// Sun direction "x,y,z".
    #[arg(long, conflicts_with = "cloudy")]
    pub sun: Option<String>,
    #[arg(long)]
    pub cloudy: bool,
    /// Output file; `.pfm` keeps full precision, anything else is written as PNG.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RelightArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// TOML interpolation script.
    #[arg(long)]
    pub script: PathBuf,
    /// Output directory for the frames.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Static console assets served under /ui.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

/// Relighting script: a fixed view and embedding pair, one entry per frame.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub camera: usize,
    pub pose: Option<Vec<f64>>,
    pub image_a: usize,
    pub image_b: Option<usize>,
    #[serde(default = "all_components")]
    pub components: Vec<String>,
    pub frames: Vec<Frame>,
}

fn all_components() -> Vec<String> {
    vec!["sun".into(), "sky".into(), "ind".into()]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    #[serde(default)]
    pub t: f64,
    pub sun: Option<[f64; 3]>,
    #[serde(default)]
    pub cloudy: bool,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_log(path: &Path, log: &TrainLog) -> CliResult<()> {
    std::fs::write(path, log.to_csv())?;
    Ok(())
}

fn load(path: &Path) -> CliResult<sunsplat_core::scene::Scene> {
    if !path.is_file() {
        return Err(usage(format!("scene file {} not found", path.display())));
    }
    Ok(load_scene(path)?)
}

fn save(scene: &sunsplat_core::scene::Scene, out: &Path) -> CliResult<()> {
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_scene(scene, out)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let mut spec = match &a.config {
        Some(p) => SynthSpec::load(p)?,
        None => {
            let kind = a.kind.as_deref().ok_or_else(|| usage("synth needs --kind or --config"))?;
            let kind = SceneKind::from_name(kind).ok_or_else(|| usage(format!("unknown scene kind {kind:?}")))?;
            SynthSpec::new(kind, 0)
        }
    };
    if let Some(k) = &a.kind {
        spec.kind = SceneKind::from_name(k).ok_or_else(|| usage(format!("unknown scene kind {k:?}")))?;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(w) = a.width {
        spec.width = w;
    }
    if let Some(h) = a.height {
        spec.height = h;
    }
    if let Some(n) = a.sky_floaters {
        spec.sky_floaters = n;
    }
    if let Some(n) = a.transients {
        spec.transients = n;
    }
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    let scene = generate(&spec)?;
    scene.write_bundle(&a.out)?;
    save(&scene.scene, &a.out.join(SCENE_FILE))?;
    println!("{} gaussians, {} images -> {}", scene.scene.len(), scene.images.len(), a.out.display());
    Ok(())
}

pub fn extract(a: &ExtractArgs) -> CliResult<()> {
    let mut scene = load(&a.stage.scene)?;
    let data = a.data.clone().unwrap_or_else(|| parent_dir(&a.stage.scene));
    let images = dataset::load_training_images(&scene, &data)?;
    let iters = a.stage.iters.unwrap_or(a.stage.schedule().ambient);
    let report = run_stage1(&mut scene, &images, iters)?;
    let maps = extract_all(&scene, &images)?;
    let out = a.stage.out();
    let dir = parent_dir(&out);
    dataset::write_visibility(&dir, &maps)?;
    write_log(&dir.join("stage1_log.csv"), &report.log)?;
    save(&scene, &out)?;
    println!("ambient loss {:.5} -> {:.5}", report.initial_loss, report.final_loss);
    Ok(())
}

pub fn decompose(a: &DecomposeArgs) -> CliResult<()> {
    let mut scene = load(&a.stage.scene)?;
    let data = a.data.clone().unwrap_or_else(|| parent_dir(&a.stage.scene));
    let images = dataset::load_training_images(&scene, &data)?;
    let vis_dir = a.visibility.clone().unwrap_or_else(|| parent_dir(&a.stage.scene));
    let maps = dataset::load_visibility(&vis_dir, images.len())?;
    let iters = a.stage.iters.unwrap_or(a.stage.schedule().decompose);
    let report = run_stage2(&mut scene, &images, &maps, &LossWeights::default(), iters)?;
    let out = a.stage.out();
    write_log(&parent_dir(&out).join("stage2_log.csv"), &report.stage.log)?;
    save(&scene, &out)?;
    println!(
        "decomposition loss {:.5} -> {:.5}, scl {:.4?} -> {:.4?}",
        report.stage.initial_loss, report.stage.final_loss, report.initial_scl, report.final_scl
    );
    Ok(())
}

pub fn bake(a: &BakeArgs) -> CliResult<()> {
    let mut scene = load(&a.stage.scene)?;
    let mut schedule = a.stage.schedule();
    if let Some(n) = a.stage.iters {
        schedule.bake = n;
    }
    if let Some(n) = a.directions {
        schedule.bake_directions = n;
    }
    let (report, log) = run_stage3(&mut scene, &schedule, a.seed)?;
    let out = a.stage.out();
    write_log(&parent_dir(&out).join("stage3_log.csv"), &log)?;
    save(&scene, &out)?;
    println!("visibility loss {:.5} -> {:.5}", report.initial_loss, report.final_loss);
    Ok(())
}

fn view(camera: Option<usize>, pose: Option<&[f64]>) -> CliResult<View> {
    match pose {
        Some(p) => {
            let pose: [f64; 12] = p.try_into().map_err(|_| usage(format!("pose needs 12 numbers, got {}", p.len())))?;
            Ok(View::Pose {
                pose,
                intrinsics: camera.unwrap_or(0),
            })
        }
        None => Ok(View::Camera(camera.unwrap_or(0))),
    }
}

fn write_image(img: &ImagePlane, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")) {
        img.write_pfm(path)?;
    } else {
        img.write_png(path)?;
    }
    Ok(())
}

pub fn render(a: &RenderArgs) -> CliResult<()> {
    let renderer = Renderer::new(load(&a.scene)?)?;
    let pose = a.pose.as_deref().map(parse_numbers).transpose()?;
    let output = Output::from_name(&a.component)?;
    let mut req = RenderRequest::new(view(a.camera_id, pose.as_deref())?, a.image_id, vec![output]);
    req.image_b = a.image_id_b;
    req.t = a.t;
    req.components = a.interp.split(',').filter(|s| !s.is_empty()).map(parse_component).collect::<Result<_, _>>()?;
    req.sun = if a.cloudy {
        Some(Sun::Cloudy)
    } else {
        a.sun.as_deref().map(parse_direction).transpose()?.map(Sun::Direction)
    };
    let (_, img) = renderer.render(&req)?.pop().expect("one output requested");
    write_image(&img, &a.out)
}

pub fn relight(a: &RelightArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.script)?;
    let script: Script = toml::from_str(&text).map_err(|e| usage(format!("bad relight script: {e}")))?;
    if script.frames.is_empty() {
        return Err(usage("relight script has no frames"));
    }
    let renderer = Renderer::new(load(&a.scene)?)?;
    let components = script.components.iter().map(|s| parse_component(s)).collect::<Result<Vec<_>, _>>()?;
    let view = view(Some(script.camera), script.pose.as_deref())?;
    std::fs::create_dir_all(&a.out)?;
    for (k, f) in script.frames.iter().enumerate() {
        let mut req = RenderRequest::new(view.clone(), script.image_a, vec![Output::Composite]);
        req.image_b = script.image_b;
        req.t = f.t;
        req.components = components.clone();
        req.sun = match (f.cloudy, f.sun) {
            (true, Some(_)) => return Err(usage(format!("frame {k}: sun and cloudy are exclusive"))),
            (true, None) => Some(Sun::Cloudy),
            (false, d) => d.map(Sun::Direction),
        };
        let (_, img) = renderer.render(&req)?.pop().expect("one output requested");
        write_image(&img, &a.out.join(format!("frame_{k:03}.png")))?;
    }
    println!("{} frames -> {}", script.frames.len(), a.out.display());
    Ok(())
}

pub fn serve(a: &ServeArgs) -> CliResult<()> {
    let renderer = Arc::new(Renderer::new(load(&a.scene)?)?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| usage(format!("bad listen address: {e}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(crate::server::serve(renderer, addr, a.ui_dir.clone()))
        .map_err(|e| CliError::Runtime(format!("server: {e}")))
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Extract(a) => extract(a),
        Command::Decompose(a) => decompose(a),
        Command::Bake(a) => bake(a),
        Command::Render(a) => render(a),
        Command::Relight(a) => relight(a),
        Command::Serve(a) => serve(a),
    }
}
