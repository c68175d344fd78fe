//! Three-stage fitting: ambient model, illumination decomposition, visibility bake.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::extract::{coarse_visibility, extract_visibility};
use crate::graph::{Recorder, SubPlan};
use crate::image::ImagePlane;
use crate::losses::{self, complement, image_const, mask_arc, record_region_losses, record_scl_total, LossWeights};
use crate::optim::{Adam, LearningRates};
use crate::params::{EmbeddingKind, FeatureKind, ParamKey, ParamStore};
use crate::raster::RenderPlan;
use crate::scene::{Camera, Decoders, EmbeddingSet, Scene, Stage};
use crate::shading::{compose_components, render_ambient_with, render_components_with};
use crate::shadow::{bake, fibonacci_directions, BakeConfig, BakeReport, BakeTargets};

pub const FEATURE_INIT_STD: f64 = 1.0;
pub const EMBEDDING_INIT_STD: f64 = 0.1;
pub const SEM_WEIGHT: f64 = 1.0;

/// Iteration budget per stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSchedule {
    pub ambient: usize,
    pub decompose: usize,
    pub bake: usize,
    pub bake_directions: usize,
}

impl StageSchedule {
    pub fn desk() -> Self {
        Self {
            ambient: 2_000,
            decompose: 3_000,
            bake: 4_000,
            bake_directions: 256,
        }
    }

    pub fn paper() -> Self {
        Self {
            ambient: 10_000,
            decompose: 100_000,
            bake: 20_000,
            bake_directions: 256,
        }
    }
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

/// One training photograph; its camera is `scene.cameras[index]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingImage {
    pub image: ImagePlane,
    pub sky_mask: ImagePlane,
    pub sunny: bool,
}

/// Random decoders, shading features and embeddings. Geometry, colors and
/// sky semantics are left alone.
pub fn initialize(scene: &mut Scene, sunny: &[bool], seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    scene.decoders = Decoders::random(&mut rng);
    let normal = Normal::new(0.0, FEATURE_INIT_STD).expect("valid std");
    for g in &mut scene.gaussians {
        for v in g
            .f_ref
            .iter_mut()
            .chain(&mut g.f_sun)
            .chain(&mut g.f_sky)
            .chain(&mut g.f_ind)
            .chain(&mut g.f_amb)
            .chain(&mut g.f_vis)
        {
            *v = normal.sample(&mut rng);
        }
    }
    scene.embeddings = sunny.iter().map(|&s| EmbeddingSet::random(s, EMBEDDING_INIT_STD, &mut rng)).collect();
    scene.stage = Stage::Untrained;
    scene.bake_directions.clear();
    Ok(())
}

pub const LOG_COLUMNS: [&str; 11] = [
    "total", "amb", "l1_sun", "l1_sky", "l1_ind", "sc_sun", "sc_sky", "sc_ind", "sem", "vis", "lr",
];

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub stage: u32,
    pub iteration: usize,
    /// Values aligned with [`LOG_COLUMNS`]; `None` when a term is unused.
    pub values: [Option<f64>; 11],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, stage: u32, iteration: usize, terms: &[(&str, f64)]) {
        let mut values = [None; 11];
        for (name, v) in terms {
            let i = LOG_COLUMNS.iter().position(|c| c == name).expect("known log column");
            values[i] = Some(*v);
        }
        self.rows.push(LogRow { stage, iteration, values });
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("stage,iteration,{}\n", LOG_COLUMNS.join(","));
        for r in &self.rows {
            write!(out, "{},{}", r.stage, r.iteration).unwrap();
            for v in &r.values {
                match v {
                    Some(x) => write!(out, ",{x:e}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Total loss of one stage, in iteration order.
    pub fn totals(&self, stage: u32) -> Vec<f64> {
        self.rows.iter().filter(|r| r.stage == stage).filter_map(|r| r.values[0]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub log: TrainLog,
}

fn check_images(scene: &Scene, images: &[TrainingImage]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Invalid("no training images".into()));
    }
    if images.len() != scene.cameras.len() || images.len() != scene.embeddings.len() {
        return Err(Error::Invalid(format!(
            "{} images but {} cameras and {} embeddings",
            images.len(),
            scene.cameras.len(),
            scene.embeddings.len()
        )));
    }
    for (i, (t, cam)) in images.iter().zip(&scene.cameras).enumerate() {
        if t.image.width() != cam.width || t.image.height() != cam.height || t.image.channels() != 3 {
            return Err(Error::Shape(format!("image {i} does not match its camera")));
        }
        t.sky_mask.check_size(&t.image, "sky mask")?;
        if t.sunny != scene.embeddings[i].sunny {
            return Err(Error::Invalid(format!("image {i}: weather flag disagrees with its embedding")));
        }
    }
    Ok(())
}

fn plans(scene: &Scene) -> Vec<(RenderPlan, SubPlan)> {
    scene
        .cameras
        .iter()
        .map(|c| {
            let plan = RenderPlan::for_camera(scene, c);
            let sub = SubPlan::new(&plan);
            (plan, sub)
        })
        .collect()
}

/// Fits the ambient-only model on pixels the coarse mask marks as unlit.
pub fn run_stage1(scene: &mut Scene, images: &[TrainingImage], iterations: usize) -> Result<StageReport> {
    check_images(scene, images)?;
    let coarse: Vec<ImagePlane> = images.iter().map(|t| coarse_visibility(&t.image, t.sunny)).collect();
    let views = plans(scene);
    let regions: Vec<Arc<[f64]>> = coarse.iter().map(|c| mask_arc(&complement(c))).collect();

    let mut keys = ParamKey::decoder(crate::scene::DecoderKind::Amb);
    keys.push(ParamKey::Features(FeatureKind::Amb));
    keys.extend((0..images.len()).map(|i| ParamKey::Embedding(i, EmbeddingKind::Amb)));
    let mut store = ParamStore::gather(scene, keys)?;
    let rates = LearningRates::for_steps(iterations);
    let mut adam = Adam::new();
    let mut log = TrainLog::default();

    let evaluate = |scene: &Scene| -> Result<f64> {
        let mut total = 0.0;
        for (i, t) in images.iter().enumerate() {
            let amb = render_ambient_with(&views[i].0, scene, &scene.embeddings[i])?;
            total += losses::amb_loss(&amb, &t.image, &coarse[i])?;
        }
        Ok(total / images.len() as f64)
    };
    let initial_loss = evaluate(scene)?;

    for it in 0..iterations {
        let i = it % images.len();
        let mut rec = Recorder::new(scene, &store);
        let amb = rec.ambient(i, &views[i].1)?;
        let target = image_const(&mut rec.tape, &images[i].image);
        let loss = rec.tape.l1_masked(amb, target, regions[i].clone())?;
        let value = rec.tape.scalar(loss);
        let grads = rec.tape.backward(loss)?;
        drop(rec);
        adam.step(&mut store, &grads, &rates, it);
        log.push(1, it, &[("total", value), ("amb", value), ("lr", rates.network.at(it))]);
    }
    store.scatter(scene);
    scene.stage = scene.stage.max(Stage::Ambient);
    let final_loss = evaluate(scene)?;
    Ok(StageReport {
        initial_loss,
        final_loss,
        log,
    })
}

/// Refined visibility maps for every training image.
pub fn extract_all(scene: &Scene, images: &[TrainingImage]) -> Result<Vec<ImagePlane>> {
    if scene.stage < Stage::Ambient {
        return Err(Error::Stage("visibility extraction needs the ambient stage".into()));
    }
    check_images(scene, images)?;
    images
        .iter()
        .enumerate()
        .map(|(i, t)| extract_visibility(scene, &scene.cameras[i], &scene.embeddings[i], &t.image, &t.sky_mask))
        .collect()
}

/// Recomposed render of training image `i` under visibility `v`.
pub fn recompose(scene: &Scene, i: usize, v: &ImagePlane) -> Result<ImagePlane> {
    let cam = scene
        .cameras
        .get(i)
        .ok_or_else(|| Error::Invalid(format!("no camera for image {i}")))?;
    let plan = RenderPlan::for_camera(scene, cam);
    let comps = render_components_with(&plan, scene, scene.embedding(i)?)?;
    compose_components(v, &comps)
}

/// Mean structural-consistency `(sun, sky, ind)` against reflectance over all images.
pub fn mean_scl(scene: &Scene, images: &[TrainingImage]) -> Result<[f64; 3]> {
    let mut acc = [0.0; 3];
    for (i, t) in images.iter().enumerate() {
        let plan = RenderPlan::for_camera(scene, &scene.cameras[i]);
        let c = render_components_with(&plan, scene, scene.embedding(i)?)?;
        let ground = complement(&t.sky_mask);
        for (a, s) in acc.iter_mut().zip([&c.sun, &c.sky, &c.ind]) {
            *a += losses::scl(s, &c.reflectance, &ground)?;
        }
    }
    Ok(acc.map(|a| a / images.len() as f64))
}

pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    a.check_shape(b, "psnr")?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionReport {
    pub stage: StageReport,
    pub initial_scl: [f64; 3],
    pub final_scl: [f64; 3],
}

/// Fits reflectance, sun, sky and indirect shading plus sky semantics.
pub fn run_stage2(
    scene: &mut Scene,
    images: &[TrainingImage],
    visibility: &[ImagePlane],
    weights: &LossWeights,
    iterations: usize,
) -> Result<DecompositionReport> {
    if scene.stage < Stage::Ambient {
        return Err(Error::Stage("decomposition needs the ambient stage and extracted visibility".into()));
    }
    check_images(scene, images)?;
    weights.validate()?;
    if visibility.len() != images.len() {
        return Err(Error::dim("visibility maps", images.len(), visibility.len()));
    }
    for (v, t) in visibility.iter().zip(images) {
        v.check_shape(&t.sky_mask, "visibility map")?;
    }
    let views = plans(scene);
    let sky_targets: Vec<Arc<[f64]>> = images.iter().map(|t| mask_arc(&t.sky_mask)).collect();

    use crate::scene::DecoderKind as D;
    let mut keys = Vec::new();
    for k in [D::Ref, D::Sun, D::Sky, D::Ind] {
        keys.extend(ParamKey::decoder(k));
    }
    for f in [FeatureKind::Ref, FeatureKind::Sun, FeatureKind::Sky, FeatureKind::Ind] {
        keys.push(ParamKey::Features(f));
    }
    keys.push(ParamKey::SkyLogits);
    for i in 0..images.len() {
        for e in [EmbeddingKind::Sun, EmbeddingKind::Sky, EmbeddingKind::Ind] {
            keys.push(ParamKey::Embedding(i, e));
        }
    }
    let mut store = ParamStore::gather(scene, keys)?;
    let rates = LearningRates::for_steps(iterations);
    let mut adam = Adam::new();
    let mut log = TrainLog::default();

    let evaluate = |scene: &Scene| -> Result<f64> {
        let mut total = 0.0;
        for (i, t) in images.iter().enumerate() {
            let c = render_components_with(&views[i].0, scene, &scene.embeddings[i])?;
            let composite = compose_components(&visibility[i], &c)?;
            let r = losses::region_losses(&composite, &c.sky, &c.ind, &c.reflectance, &t.image, &visibility[i], &t.sky_mask, weights)?;
            let s = losses::scl_total(&c.sun, &c.sky, &c.ind, &c.reflectance, &t.sky_mask, weights)?;
            total += r.sun + r.sky + r.ind + s;
        }
        Ok(total / images.len() as f64)
    };
    let initial_loss = evaluate(scene)?;
    let initial_scl = mean_scl(scene, images)?;

    for it in 0..iterations {
        let i = it % images.len();
        let sub = &views[i].1;
        let mut rec = Recorder::new(scene, &store);
        let comps = rec.components(i, sub)?;
        let v = image_const(&mut rec.tape, &visibility[i]);
        let composite = rec.compose(v, &comps)?;
        let target = image_const(&mut rec.tape, &images[i].image);
        let region = record_region_losses(
            &mut rec.tape,
            composite,
            comps.sky,
            comps.ind,
            comps.reflectance,
            target,
            &visibility[i],
            &images[i].sky_mask,
            weights,
        )?;
        let sc = record_scl_total(&mut rec.tape, comps.sun, comps.sky, comps.ind, comps.reflectance, &images[i].sky_mask, weights)?;
        let sky = rec.sky_mask(sub)?;
        let sem = rec.tape.bce(sky, sky_targets[i].clone())?;
        let mut terms: Vec<(crate::autodiff::Var, f64)> = region.into_iter().chain(sc).collect();
        terms.push((sem, SEM_WEIGHT));
        let loss = rec.tape.weighted_sum(&terms)?;
        let names = ["l1_sun", "l1_sky", "l1_ind", "sc_sun", "sc_sky", "sc_ind", "sem"];
        let mut row: Vec<(&str, f64)> = names.iter().zip(&terms).map(|(n, (v, _))| (*n, rec.tape.scalar(*v))).collect();
        row.push(("total", rec.tape.scalar(loss)));
        row.push(("lr", rates.network.at(it)));
        let grads = rec.tape.backward(loss)?;
        drop(rec);
        adam.step(&mut store, &grads, &rates, it);
        log.push(2, it, &row);
    }
    store.scatter(scene);
    scene.stage = scene.stage.max(Stage::Decomposed);
    let final_loss = evaluate(scene)?;
    let final_scl = mean_scl(scene, images)?;
    Ok(DecompositionReport {
        stage: StageReport {
            initial_loss,
            final_loss,
            log,
        },
        initial_scl,
        final_scl,
    })
}

/// Distinct cameras in first-use order.
pub fn distinct_cameras(scene: &Scene) -> Vec<Camera> {
    let mut out: Vec<Camera> = Vec::new();
    for c in &scene.cameras {
        if !out.contains(c) {
            out.push(c.clone());
        }
    }
    out
}

/// Traces and bakes visibility, then installs the cache into `scene`.
pub fn run_stage3(scene: &mut Scene, schedule: &StageSchedule, seed: u64) -> Result<(BakeReport, TrainLog)> {
    if scene.stage < Stage::Decomposed {
        return Err(Error::Stage("baking needs a decomposed scene".into()));
    }
    let cameras = distinct_cameras(scene);
    let directions = fibonacci_directions(schedule.bake_directions)?;
    let targets = BakeTargets::compute(scene, &cameras, &directions)?;
    let config = BakeConfig {
        iterations: schedule.bake,
        seed,
        ..BakeConfig::default()
    };
    let (cache, report) = bake(scene, &cameras, &targets, &config)?;
    cache.install(scene);
    let mut log = TrainLog::default();
    for &(it, loss, lr) in &report.curve {
        log.push(3, it, &[("total", loss), ("vis", loss), ("lr", lr)]);
    }
    Ok((report, log))
}
