//! Software splatting: projection, depth sort and front-to-back compositing.
//!
//! Geometry is fixed, so compositing is linear in the splatted attribute:
//! a [`RenderPlan`] stores the per-pixel blending weights once and is reused
//! for every attribute and for the backward pass.

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix2x3, Vector3};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::scene::{Camera, Scene};

pub const NEAR_PLANE: f64 = 0.01;
/// Screen-space dilation added to the projected covariance diagonal (px²).
pub const DILATION: f64 = 0.3;
/// Centers beyond this multiple of the half field of view are culled.
pub const GUARD_BAND: f64 = 1.3;
pub const MAX_ALPHA: f64 = 0.99;
/// Splat contributions below this are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Pixels stop accepting splats once transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const DEPTH_BACKGROUND: f64 = 1e9;
pub const SKY_BACKGROUND: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Splat {
    pub mean: [f64; 2],
    /// Dilated 2D covariance `(xx, xy, yy)`.
    pub cov: [f64; 3],
    /// Inverse of `cov`, `(xx, xy, yy)`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    /// Pixel radius of the 3σ footprint.
    pub radius: f64,
    pub source: usize,
    tie: [f64; 2],
}

impl Splat {
    #[inline]
    pub fn alpha_at(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean[0];
        let dy = y - self.mean[1];
        let q = self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy;
        (self.opacity * (-0.5 * q).exp()).min(MAX_ALPHA)
    }
}

/// Visible splats of one camera, sorted front to back.
#[derive(Clone, Debug)]
pub struct SplatList {
    pub splats: Vec<Splat>,
    pub width: usize,
    pub height: usize,
    /// Number of Gaussians in the source scene.
    pub source_count: usize,
}

impl SplatList {
    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }
}

fn splat_order(a: &Splat, b: &Splat) -> Ordering {
    a.depth
        .total_cmp(&b.depth)
        .then(a.tie[0].total_cmp(&b.tie[0]))
        .then(a.tie[1].total_cmp(&b.tie[1]))
        .then(a.source.cmp(&b.source))
}

/// Projects every Gaussian through the local affine approximation of the
/// pinhole model and sorts the survivors by camera depth.
pub fn project(scene: &Scene, camera: &Camera) -> SplatList {
    let (w, h) = (camera.width as f64, camera.height as f64);
    let mut splats = Vec::new();
    for (index, g) in scene.gaussians.iter().enumerate() {
        let pc = camera.to_camera(&g.position_vec());
        if pc.z <= NEAR_PLANE {
            continue;
        }
        let inv_z = 1.0 / pc.z;
        let mean = [
            camera.fx * pc.x * inv_z + camera.cx,
            camera.fy * pc.y * inv_z + camera.cy,
        ];
        let (gx, gy) = (0.5 * (GUARD_BAND - 1.0) * w, 0.5 * (GUARD_BAND - 1.0) * h);
        if mean[0] < -gx || mean[0] > w + gx || mean[1] < -gy || mean[1] > h + gy {
            continue;
        }
        let jac = Matrix2x3::new(
            camera.fx * inv_z,
            0.0,
            -camera.fx * pc.x * inv_z * inv_z,
            0.0,
            camera.fy * inv_z,
            -camera.fy * pc.y * inv_z * inv_z,
        );
        let cov_cam = camera.rotation * g.covariance() * camera.rotation.transpose();
        let mut cov: Matrix2<f64> = jac * cov_cam * jac.transpose();
        cov[(0, 0)] += DILATION;
        cov[(1, 1)] += DILATION;
        let (a, b, c) = (cov[(0, 0)], 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)]);
        let det = a * c - b * b;
        if !(det > 0.0) {
            continue;
        }
        let mid = 0.5 * (a + c);
        let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
        let radius = 3.0 * lambda_max.sqrt();
        if mean[0] + radius < 0.0 || mean[0] - radius > w || mean[1] + radius < 0.0 || mean[1] - radius > h {
            continue;
        }
        splats.push(Splat {
            mean,
            cov: [a, b, c],
            conic: [c / det, -b / det, a / det],
            depth: pc.z,
            opacity: g.opacity,
            radius,
            source: index,
            tie: [pc.x, pc.y],
        });
    }
    splats.sort_by(splat_order);
    SplatList {
        splats,
        width: camera.width,
        height: camera.height,
        source_count: scene.gaussians.len(),
    }
}

/// Per-pixel compositing weights `a_k Π_{j<k}(1 − a_j)` and the residual
/// transmittance that multiplies the background.
#[derive(Clone, Debug)]
pub struct RenderPlan {
    pub width: usize,
    pub height: usize,
    pub source_count: usize,
    offsets: Vec<u32>,
    sources: Vec<u32>,
    weights: Vec<f64>,
    transmittance: Vec<f64>,
}

impl RenderPlan {
    pub fn build(list: &SplatList) -> Self {
        let (w, h) = (list.width, list.height);
        let npix = w * h;
        let mut t = vec![1.0f64; npix];
        let mut raw: Vec<(u32, u32, f64)> = Vec::new();
        for s in &list.splats {
            let x0 = ((s.mean[0] - s.radius).floor().max(0.0)) as usize;
            let y0 = ((s.mean[1] - s.radius).floor().max(0.0)) as usize;
            let x1 = ((s.mean[0] + s.radius).ceil().min(w as f64)) as usize;
            let y1 = ((s.mean[1] + s.radius).ceil().min(h as f64)) as usize;
            for py in y0..y1 {
                for px in x0..x1 {
                    let p = py * w + px;
                    if t[p] < MIN_TRANSMITTANCE {
                        continue;
                    }
                    let a = s.alpha_at(px as f64 + 0.5, py as f64 + 0.5);
                    if a < MIN_ALPHA {
                        continue;
                    }
                    raw.push((p as u32, s.source as u32, a * t[p]));
                    t[p] *= 1.0 - a;
                }
            }
        }
        // stable counting sort by pixel keeps front-to-back order per pixel
        let mut offsets = vec![0u32; npix + 1];
        for &(p, _, _) in &raw {
            offsets[p as usize + 1] += 1;
        }
        for i in 0..npix {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor: Vec<u32> = offsets[..npix].to_vec();
        let mut sources = vec![0u32; raw.len()];
        let mut weights = vec![0.0; raw.len()];
        for &(p, src, wgt) in &raw {
            let slot = &mut cursor[p as usize];
            sources[*slot as usize] = src;
            weights[*slot as usize] = wgt;
            *slot += 1;
        }
        Self {
            width: w,
            height: h,
            source_count: list.source_count,
            offsets,
            sources,
            weights,
            transmittance: t,
        }
    }

    pub fn for_camera(scene: &Scene, camera: &Camera) -> Self {
        Self::build(&project(scene, camera))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Renumbers sources to the Gaussians this plan actually touches.
    /// Returns the compact plan and the original index of each compact source.
    pub fn compact(&self) -> (RenderPlan, Vec<usize>) {
        let mut remap = vec![u32::MAX; self.source_count];
        let mut used: Vec<usize> = self.sources.iter().map(|&s| s as usize).collect();
        used.sort_unstable();
        used.dedup();
        for (i, &s) in used.iter().enumerate() {
            remap[s] = i as u32;
        }
        let plan = RenderPlan {
            width: self.width,
            height: self.height,
            source_count: used.len(),
            offsets: self.offsets.clone(),
            sources: self.sources.iter().map(|&s| remap[s as usize]).collect(),
            weights: self.weights.clone(),
            transmittance: self.transmittance.clone(),
        };
        (plan, used)
    }

    /// Total number of (pixel, splat) contributions.
    pub fn entry_count(&self) -> usize {
        self.weights.len()
    }

    /// `(source index, weight)` pairs of one pixel, front to back.
    pub fn entries(&self, pixel: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[pixel] as usize, self.offsets[pixel + 1] as usize);
        self.sources[a..b]
            .iter()
            .zip(&self.weights[a..b])
            .map(|(&s, &w)| (s as usize, w))
    }

    pub fn transmittance(&self) -> &[f64] {
        &self.transmittance
    }

    /// Accumulated opacity `1 − T` per pixel.
    pub fn alpha(&self) -> ImagePlane {
        let data = self.transmittance.iter().map(|t| 1.0 - t).collect();
        ImagePlane::from_vec(self.width, self.height, 1, data).expect("plan dims")
    }

    /// Composites a per-Gaussian attribute (`source_count × channels`).
    pub fn composite(&self, attr: &[f64], channels: usize, background: &[f64]) -> Result<ImagePlane> {
        if attr.len() != self.source_count * channels {
            return Err(Error::dim("composite attribute", self.source_count * channels, attr.len()));
        }
        if background.len() != channels {
            return Err(Error::dim("composite background", channels, background.len()));
        }
        let mut out = vec![0.0; self.pixel_count() * channels];
        self.composite_into(attr, channels, background, &mut out);
        ImagePlane::from_vec(self.width, self.height, channels, out)
    }

    pub(crate) fn composite_into(&self, attr: &[f64], channels: usize, background: &[f64], out: &mut [f64]) {
        for p in 0..self.pixel_count() {
            let px = &mut out[p * channels..(p + 1) * channels];
            for (s, w) in self.entries(p) {
                let a = &attr[s * channels..(s + 1) * channels];
                for c in 0..channels {
                    px[c] += w * a[c];
                }
            }
            let t = self.transmittance[p];
            for c in 0..channels {
                px[c] += t * background[c];
            }
        }
    }

    /// Accumulates `∂L/∂attr` given `∂L/∂image`.
    pub(crate) fn composite_backward(&self, grad_out: &[f64], channels: usize, grad_attr: &mut [f64]) {
        for p in 0..self.pixel_count() {
            let g = &grad_out[p * channels..(p + 1) * channels];
            for (s, w) in self.entries(p) {
                let ga = &mut grad_attr[s * channels..(s + 1) * channels];
                for c in 0..channels {
                    ga[c] += w * g[c];
                }
            }
        }
    }

    /// Alpha-normalized expected depth; pixels with accumulated opacity
    /// below one half read as [`DEPTH_BACKGROUND`].
    pub fn depth(&self, depths: &[f64]) -> Result<ImagePlane> {
        if depths.len() != self.source_count {
            return Err(Error::dim("depth attribute", self.source_count, depths.len()));
        }
        let data = (0..self.pixel_count())
            .map(|p| {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (s, w) in self.entries(p) {
                    acc += w * depths[s];
                    wsum += w;
                }
                if wsum >= 0.5 {
                    acc / wsum
                } else {
                    DEPTH_BACKGROUND
                }
            })
            .collect();
        ImagePlane::from_vec(self.width, self.height, 1, data)
    }
}

/// One-shot composite of a per-Gaussian attribute.
pub fn composite(splats: &SplatList, attr: &[f64], channels: usize, background: &[f64]) -> Result<ImagePlane> {
    RenderPlan::build(splats).composite(attr, channels, background)
}

/// Camera-space depth of every Gaussian center (non-positive when behind).
pub fn camera_depths(scene: &Scene, camera: &Camera) -> Vec<f64> {
    scene
        .gaussians
        .iter()
        .map(|g| camera.to_camera(&Vector3::from(g.position)).z)
        .collect()
}

pub fn render_depth(scene: &Scene, camera: &Camera) -> ImagePlane {
    let plan = RenderPlan::for_camera(scene, camera);
    render_depth_with(&plan, scene, camera)
}

pub fn render_depth_with(plan: &RenderPlan, scene: &Scene, camera: &Camera) -> ImagePlane {
    plan.depth(&camera_depths(scene, camera)).expect("plan built from scene")
}

/// Splats the sky semantic (clamped to [0, 1]) over a sky-colored background.
pub fn render_sky_mask(scene: &Scene, camera: &Camera) -> ImagePlane {
    let plan = RenderPlan::for_camera(scene, camera);
    render_sky_mask_with(&plan, scene)
}

pub fn render_sky_mask_with(plan: &RenderPlan, scene: &Scene) -> ImagePlane {
    let attr: Vec<f64> = scene.gaussians.iter().map(|g| g.sky_semantic.clamp(0.0, 1.0)).collect();
    plan.composite(&attr, 1, &[SKY_BACKGROUND])
        .expect("plan built from scene")
        .map(|v| v.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Decoders, Gaussian};

    fn camera(w: usize, h: usize, f: f64) -> Camera {
        Camera::new(f, f, w as f64 / 2.0, h as f64 / 2.0, nalgebra::Matrix3::identity(), Vector3::zeros(), w, h)
            .unwrap()
    }

    fn iso(p: [f64; 3], s: f64, alpha: f64) -> Gaussian {
        Gaussian::new(p, [s; 3], [1.0, 0.0, 0.0, 0.0], alpha, [0.5; 3])
    }

    fn scene(gs: Vec<Gaussian>) -> Scene {
        Scene::new(gs, Decoders::zeros())
    }

    fn manual_splat(mean: [f64; 2], opacity: f64, depth: f64, source: usize) -> Splat {
        // practically flat footprint: alpha equals opacity over the pixel
        let var = 1e8;
        Splat {
            mean,
            cov: [var, 0.0, var],
            conic: [1.0 / var, 0.0, 1.0 / var],
            depth,
            opacity,
            radius: 3.0,
            source,
            tie: [0.0, 0.0],
        }
    }

    fn manual(splats: Vec<Splat>, n: usize) -> SplatList {
        SplatList {
            splats,
            width: 1,
            height: 1,
            source_count: n,
        }
    }

    #[test]
    fn on_axis_gaussian_projects_to_principal_point() {
        let s = scene(vec![iso([0.0, 0.0, 4.0], 0.1, 0.8)]);
        let list = project(&s, &camera(64, 48, 50.0));
        assert_eq!(list.len(), 1);
        assert!((list.splats[0].mean[0] - 32.0).abs() < 1e-12);
        assert!((list.splats[0].mean[1] - 24.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let s = scene(vec![iso([0.0, 0.0, -1.0], 0.1, 0.8), iso([0.0, 0.0, 0.005], 0.1, 0.8)]);
        assert!(project(&s, &camera(64, 48, 50.0)).is_empty());
    }

    #[test]
    fn outside_viewport_is_culled() {
        let s = scene(vec![iso([100.0, 0.0, 1.0], 0.01, 0.8)]);
        assert!(project(&s, &camera(64, 48, 50.0)).is_empty());
    }

    #[test]
    fn isotropic_footprint_matches_pinhole_scale() {
        let (f, sc, d) = (80.0, 0.05, 2.0);
        let s = scene(vec![iso([0.0, 0.0, d], sc, 0.8)]);
        let list = project(&s, &camera(64, 64, f));
        let expected = (f * sc / d).powi(2) + DILATION;
        let cov = list.splats[0].cov;
        assert!((cov[0] - expected).abs() < 1e-12 && (cov[2] - expected).abs() < 1e-12);
        assert!(cov[1].abs() < 1e-12);
    }

    #[test]
    fn empty_scene_renders_background() {
        let s = scene(Vec::new());
        let cam = camera(4, 3, 5.0);
        let plan = RenderPlan::for_camera(&s, &cam);
        let img = plan.composite(&[], 3, &[0.0; 3]).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        assert!(render_depth(&s, &cam).data().iter().all(|&v| v == DEPTH_BACKGROUND));
        assert!(render_sky_mask(&s, &cam).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn saturated_splat_formula() {
        let list = manual(vec![manual_splat([0.5, 0.5], 1.0, 1.0, 0)], 1);
        let img = composite(&list, &[1.0], 1, &[0.3]).unwrap();
        assert!((img.data()[0] - (0.99 + 0.01 * 0.3)).abs() < 1e-12);
    }

    #[test]
    fn two_splat_expansion() {
        let list = manual(
            vec![manual_splat([0.5, 0.5], 0.5, 1.0, 0), manual_splat([0.5, 0.5], 1.0, 2.0, 1)],
            2,
        );
        let bg = 0.25;
        let img = composite(&list, &[1.0, 0.0], 1, &[bg]).unwrap();
        let expected = 0.5 * 1.0 + 0.5 * 0.99 * 0.0 + 0.5 * 0.01 * bg;
        assert!((img.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn attribute_length_is_checked() {
        let list = manual(vec![manual_splat([0.5, 0.5], 0.5, 1.0, 0)], 2);
        assert!(matches!(composite(&list, &[1.0], 1, &[0.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn compact_plan_matches_full_plan() {
        let s = random_scene(11, 15);
        let cam = camera(12, 12, 4.0);
        let mut s2 = s.clone();
        for g in &mut s2.gaussians[..5] {
            g.position[0] += 50.0;
        }
        let plan = RenderPlan::for_camera(&s2, &cam);
        let (compact, used) = plan.compact();
        assert!(used.len() <= 10 && !used.contains(&0));
        let attr: Vec<f64> = (0..15).map(|i| i as f64 * 0.1).collect();
        let sub: Vec<f64> = used.iter().map(|&i| attr[i]).collect();
        assert_eq!(plan.composite(&attr, 1, &[0.2]).unwrap(), compact.composite(&sub, 1, &[0.2]).unwrap());
    }

    #[test]
    fn opaque_splat_depth() {
        let s = scene(vec![iso([0.0, 0.0, 2.0], 5.0, 1.0)]);
        let d = render_depth(&s, &camera(1, 1, 1.0));
        assert!((d.data()[0] - 2.0).abs() / 2.0 < 0.02);
    }

    #[test]
    fn nearer_splat_dominates_depth() {
        let s = scene(vec![iso([0.0, 0.0, 5.0], 25.0, 1.0), iso([0.0, 0.0, 1.0], 5.0, 1.0)]);
        let d = render_depth(&s, &camera(1, 1, 1.0));
        assert!((d.data()[0] - 1.0).abs() < 0.05);
    }

    #[test]
    fn sky_mask_of_ground_only_scene_is_dark() {
        let mut g = iso([0.0, 0.0, 2.0], 50.0, 1.0);
        g.sky_semantic = 0.0;
        let m = render_sky_mask(&scene(vec![g]), &camera(2, 2, 1.0));
        assert!(m.data().iter().all(|&v| v < 0.011));
    }

    fn random_scene(seed: u64, n: usize) -> Scene {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let gs = (0..n)
            .map(|_| {
                let mut q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                q.iter_mut().for_each(|v| *v /= norm);
                Gaussian::new(
                    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..4.0)],
                    std::array::from_fn(|_| rng.random_range(0.05..0.4)),
                    q,
                    rng.random_range(0.2..1.0),
                    [0.5; 3],
                )
            })
            .collect();
        scene(gs)
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn weights_sum_to_at_most_one(seed in 0u64..1000) {
            let s = random_scene(seed, 12);
            let plan = RenderPlan::for_camera(&s, &camera(16, 16, 12.0));
            for p in 0..plan.pixel_count() {
                let sum: f64 = plan.entries(p).map(|e| e.1).sum::<f64>() + plan.transmittance()[p];
                proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn transparent_gaussian_changes_nothing(seed in 0u64..1000) {
            let s = random_scene(seed, 10);
            let cam = camera(16, 16, 12.0);
            let attr: Vec<f64> = (0..30).map(|i| (i as f64 * 0.13).sin().abs()).collect();
            let before = RenderPlan::for_camera(&s, &cam).composite(&attr, 3, &[0.2, 0.1, 0.4]).unwrap();
            let mut s2 = s.clone();
            let mut ghost = s.gaussians[0].clone();
            ghost.opacity = 0.0;
            ghost.position[2] -= 0.5;
            s2.gaussians.insert(3, ghost);
            let mut attr2 = attr.clone();
            attr2.splice(9..9, [9.0, 9.0, 9.0]);
            let after = RenderPlan::for_camera(&s2, &cam).composite(&attr2, 3, &[0.2, 0.1, 0.4]).unwrap();
            proptest::prop_assert_eq!(before.data(), after.data());
        }

        #[test]
        fn composite_is_linear_in_attribute(seed in 0u64..1000) {
            let s = random_scene(seed, 10);
            let plan = RenderPlan::for_camera(&s, &camera(12, 12, 10.0));
            let a: Vec<f64> = (0..10).map(|i| (i as f64 + seed as f64).sin()).collect();
            let b: Vec<f64> = (0..10).map(|i| (i as f64 * 1.7).cos()).collect();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let ia = plan.composite(&a, 1, &[0.0]).unwrap();
            let ib = plan.composite(&b, 1, &[0.0]).unwrap();
            let is = plan.composite(&sum, 1, &[0.0]).unwrap();
            for i in 0..is.data().len() {
                proptest::prop_assert!((is.data()[i] - ia.data()[i] - ib.data()[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn permuting_equal_depth_gaussians_is_invisible(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let gs: Vec<Gaussian> = (0..6)
                .map(|_| iso([rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 3.0], 0.4, 0.7))
                .collect();
            let attr: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let cam = camera(10, 10, 8.0);
            let base = RenderPlan::for_camera(&scene(gs.clone()), &cam).composite(&attr, 1, &[0.0]).unwrap();
            let perm = [3usize, 0, 5, 1, 4, 2];
            let gs2: Vec<Gaussian> = perm.iter().map(|&i| gs[i].clone()).collect();
            let attr2: Vec<f64> = perm.iter().map(|&i| attr[i]).collect();
            let other = RenderPlan::for_camera(&scene(gs2), &cam).composite(&attr2, 1, &[0.0]).unwrap();
            proptest::prop_assert_eq!(base.data(), other.data());
        }
    }
}
