//! Ray-traced sun visibility, occluder filtering and the baked visibility cache.

mod bake;
mod trace;

pub use bake::{bake, BakeConfig, BakeReport, BakeTargets};
pub use trace::{check_direction, trace_all, trace_visibility, BruteForceTracer, GridTracer, Ray, MIN_OCCLUDER_ALPHA, SELF_HIT_EPS};

use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::mlp::Mlp;
use crate::raster::{render_sky_mask_with, RenderPlan};
use crate::scene::{Camera, DecoderKind, Scene, Stage, VisFeature};

/// Gaussians with a sky semantic above this are not occluders.
pub const SKY_THRESHOLD: f64 = 0.5;
/// Front-filter tolerance as a fraction of the scene extent.
pub const FRONT_TOLERANCE: f64 = 0.05;

/// Indices of Gaussians not classified as sky.
pub fn sky_filter(scene: &Scene) -> Vec<usize> {
    (0..scene.len()).filter(|&i| scene.gaussians[i].sky_semantic <= SKY_THRESHOLD).collect()
}

/// Indices of Gaussians not floating in front of the rendered surface.
pub fn front_filter(scene: &Scene, camera: &Camera, depth: &ImagePlane) -> Vec<usize> {
    let tol = FRONT_TOLERANCE * scene.extent();
    (0..scene.len())
        .filter(|&i| {
            let Some((u, v, z)) = camera.project(&scene.gaussians[i].position_vec()) else {
                return true;
            };
            if u < 0.0 || v < 0.0 || u >= camera.width as f64 || v >= camera.height as f64 {
                return true;
            }
            z >= depth.get(u as usize, v as usize, 0) - tol
        })
        .collect()
}

/// Depth rendered from the non-sky Gaussians only, so that empty sky does
/// not pull silhouette depths backwards.
pub fn surface_depth(scene: &Scene, camera: &Camera) -> ImagePlane {
    let mut surface = scene.clone();
    surface.gaussians.retain(|g| g.sky_semantic <= SKY_THRESHOLD);
    crate::raster::render_depth(&surface, camera)
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Occluder set: the sky filter intersected with the front filter of
/// every camera.
pub fn occluder_set(scene: &Scene, cameras: &[Camera]) -> Vec<usize> {
    let mut set = sky_filter(scene);
    for cam in cameras {
        let depth = surface_depth(scene, cam);
        set = intersect(&set, &front_filter(scene, cam, &depth));
    }
    set
}

/// Spiral lattice on the upper hemisphere.
pub fn fibonacci_directions(n: usize) -> Result<Vec<[f64; 3]>> {
    if n == 0 {
        return Err(Error::Invalid("direction count must be at least 1".into()));
    }
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    Ok((0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = 2.0 * PI * i as f64 * (1.0 - 1.0 / golden);
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect())
}

/// Trained visibility decoder with its per-Gaussian features.
#[derive(Clone, Debug, PartialEq)]
pub struct BakeCache {
    pub decoder: Mlp,
    pub features: Vec<VisFeature>,
    /// Directions seen during training.
    pub directions: Vec<[f64; 3]>,
}

impl BakeCache {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        if scene.stage < Stage::Baked {
            return Err(Error::Stage("scene has no baked visibility; run the bake stage first".into()));
        }
        Ok(Self {
            decoder: scene.decoders.vis.clone(),
            features: scene.gaussians.iter().map(|g| g.f_vis).collect(),
            directions: scene.bake_directions.clone(),
        })
    }

    pub fn install(&self, scene: &mut Scene) {
        scene.decoders.vis = self.decoder.clone();
        for (g, f) in scene.gaussians.iter_mut().zip(&self.features) {
            g.f_vis = *f;
        }
        scene.bake_directions = self.directions.clone();
        scene.stage = Stage::Baked;
    }

    /// Per-Gaussian visibility mapped to [0, 1].
    pub fn decode(&self, scene: &Scene, d: [f64; 3]) -> Result<Vec<f64>> {
        check_direction(&Vector3::from(d))?;
        if self.features.len() != scene.len() {
            return Err(Error::dim("bake features", scene.len(), self.features.len()));
        }
        let (width, hidden, outputs, act) = DecoderKind::Vis.shape();
        self.decoder.check_shape("vis", width, hidden, outputs, act)?;
        let mut x = Vec::with_capacity(scene.len() * width);
        for (g, f) in scene.gaussians.iter().zip(&self.features) {
            x.extend_from_slice(f);
            x.extend_from_slice(&g.position);
            x.extend_from_slice(&d);
        }
        Ok(self.decoder.forward(&x, scene.len()).into_iter().map(|v| 0.5 * (v + 1.0)).collect())
    }
}

/// Pixels whose rendered sky mask exceeds one half.
pub fn sky_pin(plan: &RenderPlan, scene: &Scene) -> ImagePlane {
    render_sky_mask_with(plan, scene).map(|m| if m > 0.5 { 1.0 } else { 0.0 })
}

/// Splats per-Gaussian visibility over a lit background and pins sky to one.
pub fn splat_visibility(plan: &RenderPlan, values: &[f64], pin: &ImagePlane) -> Result<ImagePlane> {
    let mut img = plan.composite(values, 1, &[1.0])?;
    for (v, &m) in img.data_mut().iter_mut().zip(pin.data()) {
        *v = *v * (1.0 - m) + m;
    }
    Ok(img)
}

pub fn render_visibility(scene: &Scene, camera: &Camera, cache: &BakeCache, d: [f64; 3]) -> Result<ImagePlane> {
    render_visibility_with(&RenderPlan::for_camera(scene, camera), scene, cache, d)
}

pub fn render_visibility_with(plan: &RenderPlan, scene: &Scene, cache: &BakeCache, d: [f64; 3]) -> Result<ImagePlane> {
    let values = cache.decode(scene, d)?;
    splat_visibility(plan, &values, &sky_pin(plan, scene))
}

/// Splatted traced visibility, the target the cache is trained against.
pub fn render_traced_visibility(scene: &Scene, camera: &Camera, tracer: &GridTracer, d: [f64; 3]) -> Result<ImagePlane> {
    let plan = RenderPlan::for_camera(scene, camera);
    let values = trace_all(scene, tracer, d)?;
    splat_visibility(&plan, &values, &sky_pin(&plan, scene))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{quat_from_z_to, Decoders, Gaussian};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disc(p: [f64; 3], alpha: f64) -> Gaussian {
        Gaussian::new(p, [0.5, 0.5, 0.001], [1.0, 0.0, 0.0, 0.0], alpha, [0.5; 3])
    }

    fn scene(gs: Vec<Gaussian>) -> Scene {
        Scene::new(gs, Decoders::zeros())
    }

    const UP: [f64; 3] = [0.0, 0.0, 1.0];

    #[test]
    fn open_sky_is_fully_visible() {
        let s = scene(vec![disc([0.0; 3], 0.9)]);
        assert_eq!(trace_visibility(&s, &[0], 0, UP).unwrap(), 1.0);
    }

    #[test]
    fn opaque_occluder_blocks() {
        let s = scene(vec![disc([0.0; 3], 0.9), disc([0.0, 0.0, 1.0], 1.0)]);
        assert_eq!(trace_visibility(&s, &[0, 1], 0, UP).unwrap(), 0.0);
    }

    #[test]
    fn two_half_occluders_quarter() {
        let s = scene(vec![disc([0.0; 3], 0.9), disc([0.0, 0.0, 1.0], 0.5), disc([0.0, 0.0, 2.0], 0.5)]);
        assert!((trace_visibility(&s, &[0, 1, 2], 0, UP).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_unit_direction_is_rejected() {
        let s = scene(vec![disc([0.0; 3], 0.9)]);
        assert!(trace_visibility(&s, &[0], 0, [0.0, 0.0, 2.0]).is_err());
        assert!(trace_visibility(&s, &[0], 0, [0.0, 0.0, -1.0]).is_err());
    }

    #[test]
    fn fibonacci_single_direction() {
        let d = fibonacci_directions(1).unwrap();
        assert!((d[0][0] - 0.75f64.sqrt()).abs() < 1e-15 && d[0][1] == 0.0 && d[0][2] == 0.5);
        assert!(fibonacci_directions(0).is_err());
    }

    #[test]
    fn fibonacci_mean_height() {
        let d = fibonacci_directions(100).unwrap();
        let mean = d.iter().map(|v| v[2]).sum::<f64>() / 100.0;
        assert!((mean - 0.5).abs() < 1e-12);
        for v in &d {
            assert!((Vector3::from(*v).norm() - 1.0).abs() < 1e-12 && v[2] > 0.0 && v[2] <= 1.0);
        }
    }

    #[test]
    fn fibonacci_separation_shrinks_with_count() {
        let min_sep = |n| {
            let d = fibonacci_directions(n).unwrap();
            let mut best = f64::INFINITY;
            for i in 0..n {
                for j in 0..i {
                    let c = Vector3::from(d[i]).dot(&Vector3::from(d[j])).clamp(-1.0, 1.0);
                    best = best.min(c.acos());
                }
            }
            best
        };
        assert!(min_sep(16) > min_sep(64) && min_sep(64) > min_sep(256));
    }

    #[test]
    fn sky_filter_extremes() {
        let mut s = scene(vec![disc([0.0; 3], 0.9), disc([1.0; 3], 0.9)]);
        assert_eq!(sky_filter(&s), vec![0, 1]);
        s.gaussians.iter_mut().for_each(|g| g.sky_semantic = 1.0);
        assert!(sky_filter(&s).is_empty());
    }

    #[test]
    fn front_filter_rule() {
        let cam = Camera::new(10.0, 10.0, 5.0, 5.0, nalgebra::Matrix3::identity(), Vector3::zeros(), 10, 10).unwrap();
        let mut a = disc([0.0, 0.0, 1.0], 0.9);
        a.sky_semantic = 0.0;
        let b = disc([0.0, 0.0, 2.0], 0.9);
        // extent of two points one unit apart: tolerance 0.05
        let s = scene(vec![a, b]);
        let depth = ImagePlane::filled(10, 10, 1, 2.0);
        assert_eq!(front_filter(&s, &cam, &depth), vec![1]);
        let outside = disc([50.0, 0.0, 1.0], 0.9);
        let s = scene(vec![outside]);
        assert_eq!(front_filter(&s, &cam, &depth), vec![0]);
    }

    fn random_scene(seed: u64, n: usize) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gs = (0..n)
            .map(|_| {
                let n = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let q = quat_from_z_to(n.normalize());
                Gaussian::new(
                    [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..2.0)],
                    [rng.random_range(0.05..0.4), rng.random_range(0.05..0.4), rng.random_range(0.005..0.05)],
                    q,
                    rng.random_range(0.0..1.0),
                    [0.5; 3],
                )
            })
            .collect();
        scene(gs)
    }

    fn random_dir(rng: &mut ChaCha8Rng) -> [f64; 3] {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.05..1.0)).normalize();
        [v.x, v.y, v.z]
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

        #[test]
        fn grid_equals_brute_force(seed in 0u64..1000) {
            let s = random_scene(seed, 60);
            let set: Vec<usize> = (0..60).collect();
            let grid = GridTracer::new(&s, &set);
            let brute = BruteForceTracer::new(&s, &set);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            for _ in 0..20 {
                let g = rng.random_range(0..60);
                let ray = Ray::new(s.gaussians[g].position_vec(), Vector3::from(random_dir(&mut rng))).unwrap();
                proptest::prop_assert_eq!(grid.trace(&ray, Some(g)), brute.trace(&ray, Some(g)));
            }
        }

        #[test]
        fn transmittance_bounded_and_monotone(seed in 0u64..1000) {
            let s = random_scene(seed, 30);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_dir(&mut rng);
            let few: Vec<usize> = (0..15).collect();
            let all: Vec<usize> = (0..30).collect();
            for g in 0..30 {
                let a = trace_visibility(&s, &few, g, d).unwrap();
                let b = trace_visibility(&s, &all, g, d).unwrap();
                proptest::prop_assert!((0.0..=1.0).contains(&a) && b <= a);
            }
        }

        #[test]
        fn tracing_ignores_input_order(seed in 0u64..1000) {
            let s = random_scene(seed, 25);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_dir(&mut rng);
            let mut perm: Vec<usize> = (0..25).collect();
            perm.reverse();
            perm.swap(3, 17);
            let s2 = Scene::new(perm.iter().map(|&i| s.gaussians[i].clone()).collect(), Decoders::zeros());
            let all: Vec<usize> = (0..25).collect();
            for (new, &old) in perm.iter().enumerate() {
                let a = trace_visibility(&s, &all, old, d).unwrap();
                let b = trace_visibility(&s2, &all, new, d).unwrap();
                // equal up to the product order of distinct hits at identical depth
                proptest::prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }

        #[test]
        fn filters_commute(seed in 0u64..1000) {
            let mut s = random_scene(seed, 40);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for g in &mut s.gaussians {
                g.sky_semantic = rng.random_range(0.0..1.0);
            }
            let cam = Camera::look_at(Vector3::new(0.0, -6.0, 3.0), Vector3::zeros(), 24, 24, 20.0).unwrap();
            let depth = surface_depth(&s, &cam);
            let a = intersect(&sky_filter(&s), &front_filter(&s, &cam, &depth));
            let b = intersect(&front_filter(&s, &cam, &depth), &sky_filter(&s));
            proptest::prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_cache_is_an_error() {
        let s = scene(vec![disc([0.0; 3], 0.9)]);
        assert!(matches!(BakeCache::from_scene(&s), Err(Error::Stage(_))));
    }
}
