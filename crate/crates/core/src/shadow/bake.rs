//! Distils traced visibility into the direction-conditioned decoder.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{occluder_set, sky_pin, splat_visibility, trace_all, BakeCache, GridTracer};
use crate::error::{Error, Result};
use crate::graph::{Recorder, SubPlan};
use crate::image::ImagePlane;
use crate::losses::{complement, mask_arc, vis_loss};
use crate::optim::{Adam, LearningRates};
use crate::params::{FeatureKind, ParamKey, ParamStore};
use crate::raster::RenderPlan;
use crate::scene::{Camera, DecoderKind, Scene};

#[derive(Clone, Debug, PartialEq)]
pub struct BakeConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Random (direction, camera) samples averaged into each step.
    pub batch: usize,
    /// Training directions evaluated for the before/after report.
    pub report_directions: usize,
}

impl Default for BakeConfig {
    fn default() -> Self {
        Self {
            iterations: 4_000,
            seed: 0,
            batch: 4,
            report_directions: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BakeReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `(iteration, loss, network learning rate)` per step.
    pub curve: Vec<(usize, f64, f64)>,
}

/// Per-camera render state shared by all directions.
struct View {
    plan: RenderPlan,
    sub: SubPlan,
    pin: ImagePlane,
    pin_arc: Arc<[f64]>,
    region: Arc<[f64]>,
}

/// Traced per-Gaussian visibility for each training direction.
pub struct BakeTargets {
    pub directions: Vec<[f64; 3]>,
    pub traced: Vec<Vec<f64>>,
    pub occluders: Vec<usize>,
}

impl BakeTargets {
    pub fn compute(scene: &Scene, cameras: &[Camera], directions: &[[f64; 3]]) -> Result<Self> {
        let occluders = occluder_set(scene, cameras);
        let tracer = GridTracer::new(scene, &occluders);
        let traced = directions.iter().map(|&d| trace_all(scene, &tracer, d)).collect::<Result<_>>()?;
        Ok(Self {
            directions: directions.to_vec(),
            traced,
            occluders,
        })
    }
}

fn views(scene: &Scene, cameras: &[Camera]) -> Vec<View> {
    cameras
        .iter()
        .map(|cam| {
            let plan = RenderPlan::for_camera(scene, cam);
            let pin = sky_pin(&plan, scene);
            View {
                sub: SubPlan::new(&plan),
                pin_arc: mask_arc(&pin),
                region: mask_arc(&complement(&pin)),
                pin,
                plan,
            }
        })
        .collect()
}

fn mean_error(scene: &Scene, cache: &BakeCache, views: &[View], targets: &BakeTargets, which: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &k in which {
        let d = targets.directions[k];
        let values = cache.decode(scene, d)?;
        for v in views {
            let pred = splat_visibility(&v.plan, &values, &v.pin)?;
            let truth = splat_visibility(&v.plan, &targets.traced[k], &v.pin)?;
            total += vis_loss(&pred, &truth, &v.pin)?;
        }
    }
    Ok(total / (which.len() * views.len()).max(1) as f64)
}

/// Trains the visibility decoder and features of `scene` against traced
/// visibility seen from `cameras`.
pub fn bake(scene: &Scene, cameras: &[Camera], targets: &BakeTargets, config: &BakeConfig) -> Result<(BakeCache, BakeReport)> {
    if cameras.is_empty() {
        return Err(Error::Invalid("baking needs at least one camera".into()));
    }
    if targets.directions.is_empty() {
        return Err(Error::Invalid("baking needs at least one direction".into()));
    }
    let views = views(scene, cameras);
    let mut keys = ParamKey::decoder(DecoderKind::Vis);
    keys.push(ParamKey::Features(FeatureKind::Vis));
    let mut store = ParamStore::gather(scene, keys)?;
    let mut work = scene.clone();
    let rates = LearningRates::for_steps(config.iterations);
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let nd = targets.directions.len();
    let stride = (nd / config.report_directions.max(1)).max(1);
    let report: Vec<usize> = (0..nd).step_by(stride).take(config.report_directions.max(1)).collect();
    let snapshot = |store: &ParamStore, work: &mut Scene| {
        store.scatter(work);
        BakeCache {
            decoder: work.decoders.vis.clone(),
            features: work.gaussians.iter().map(|g| g.f_vis).collect(),
            directions: targets.directions.clone(),
        }
    };
    let initial_loss = mean_error(scene, &snapshot(&store, &mut work), &views, targets, &report)?;

    let mut curve = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let batch = config.batch.max(1);
        let mut rec = Recorder::new(scene, &store);
        let mut terms = Vec::with_capacity(batch);
        for b in 0..batch {
            let view = &views[(it * batch + b) % views.len()];
            let k = rng.random_range(0..nd);
            let truth = splat_visibility(&view.plan, &targets.traced[k], &view.pin)?;
            let pred = rec.visibility(&view.sub, targets.directions[k], view.pin_arc.clone())?;
            let t = rec.tape.constant(truth.pixel_count(), 1, truth.into_vec());
            terms.push((rec.tape.mse_masked(pred, t, view.region.clone())?, 1.0 / batch as f64));
        }
        let loss = rec.tape.weighted_sum(&terms)?;
        let value = rec.tape.scalar(loss);
        let grads = rec.tape.backward(loss)?;
        drop(rec);
        adam.step(&mut store, &grads, &rates, it);
        curve.push((it, value, rates.network.at(it)));
    }

    let cache = snapshot(&store, &mut work);
    let final_loss = mean_error(scene, &cache, &views, targets, &report)?;
    Ok((
        cache,
        BakeReport {
            initial_loss,
            final_loss,
            curve,
        },
    ))
}
