//! Synthetic scenes with analytic ground truth: geometry, lighting and shadows.

use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::raster::DEPTH_BACKGROUND;
use crate::scene::{quat_from_z_to, Camera, Decoders, Gaussian, Scene};
use crate::shading::compose;

/// Half width of the ground square.
pub const PLANE_HALF: f64 = 3.5;
/// Tile spacing as a multiple of the in-plane standard deviation.
pub const SPACING_PER_SIGMA: f64 = 1.2;
/// Thickness of a surface tile relative to its in-plane scale.
pub const NORMAL_SCALE_RATIO: f64 = 0.002;
/// Box tiles shrink toward face edges, starting at this fraction of the
/// coarse spacing, so their tails barely overhang the edge.
pub const EDGE_SIGMA_FRACTION: f64 = 1.0 / 16.0;
/// Scale ratio between neighbouring rows of an edge band.
pub const EDGE_GROWTH: f64 = 1.5;
/// Around the boxes the ground is tiled finer so shadow edges stay sharp.
pub const SHADOW_ZONE_HALF: f64 = 2.0;
pub const SHADOW_ZONE_REFINEMENT: f64 = 2.0;
pub const TILE_OPACITY: f64 = 0.9;
pub const SKY_RADIUS: f64 = 20.0;
pub const SKY_SPACING: f64 = 1.2;
/// Falloff length of indirect light away from concave edges.
pub const INDIRECT_FALLOFF: f64 = 0.35;
const SURFACE_EPS: f64 = 1e-9;

pub const PLANE_REFLECTANCE: [f64; 3] = [0.55, 0.5, 0.42];
pub const BOX_REFLECTANCE: [f64; 3] = [0.75, 0.4, 0.3];
pub const SKY_REFLECTANCE: [f64; 3] = [0.9, 0.95, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Plane,
    BoxOverPlane,
    Colonnade,
}

impl SceneKind {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "plane" => Some(SceneKind::Plane),
            "box-over-plane" => Some(SceneKind::BoxOverPlane),
            "colonnade" => Some(SceneKind::Colonnade),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lighting {
    pub sun_direction: [f64; 3],
    pub sun_color: [f64; 3],
    pub sky_color: [f64; 3],
    pub indirect_gain: f64,
    pub sunny: bool,
}

impl Lighting {
    pub fn sunny(elevation_deg: f64, azimuth_deg: f64) -> Self {
        let (e, a) = (elevation_deg.to_radians(), azimuth_deg.to_radians());
        Self {
            sun_direction: [e.cos() * a.cos(), e.cos() * a.sin(), e.sin()],
            sun_color: [0.85, 0.8, 0.7],
            sky_color: [0.3, 0.35, 0.45],
            indirect_gain: 0.15,
            sunny: true,
        }
    }

    pub fn cloudy() -> Self {
        Self {
            sun_direction: [0.0, 0.0, 1.0],
            sun_color: [0.0; 3],
            sky_color: [0.55, 0.55, 0.58],
            indirect_gain: 0.05,
            sunny: false,
        }
    }

    pub fn direction(&self) -> Vector3<f64> {
        Vector3::from(self.sun_direction).normalize()
    }
}

fn default_density() -> f64 {
    30.0
}
fn default_noise() -> f64 {
    0.01
}
fn default_size() -> usize {
    128
}
fn default_cameras() -> usize {
    4
}
fn default_lighting() -> Vec<Lighting> {
    vec![
        Lighting::sunny(55.0, 30.0),
        Lighting::sunny(40.0, 150.0),
        Lighting::sunny(60.0, 100.0),
        Lighting::sunny(45.0, 60.0),
        Lighting::sunny(35.0, 120.0),
        Lighting::sunny(65.0, 45.0),
        Lighting::cloudy(),
        Lighting::cloudy(),
    ]
}

/// Generator configuration, loadable from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SceneKind,
    /// Surface tiles per unit area.
    #[serde(default = "default_density")]
    pub density: f64,
    /// Standard deviation of additive image noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_size")]
    pub height: usize,
    /// Distinct viewpoints; image `i` uses viewpoint `i % cameras`.
    #[serde(default = "default_cameras")]
    pub cameras: usize,
    #[serde(default)]
    pub sky_floaters: usize,
    #[serde(default)]
    pub transients: usize,
    #[serde(default = "default_lighting")]
    pub lighting: Vec<Lighting>,
}

impl SynthSpec {
    pub fn new(kind: SceneKind, seed: u64) -> Self {
        Self {
            kind,
            density: default_density(),
            noise: default_noise(),
            seed,
            width: default_size(),
            height: default_size(),
            cameras: default_cameras(),
            sky_floaters: 0,
            transients: 0,
            lighting: default_lighting(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::parse("synth spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synth spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::Invalid(format!("density must be positive, got {}", self.density)));
        }
        if !(0.0..=0.1).contains(&self.noise) {
            return Err(Error::Invalid(format!("noise must lie in [0, 0.1], got {}", self.noise)));
        }
        if self.width == 0 || self.height == 0 || self.cameras == 0 {
            return Err(Error::Invalid("resolution and camera count must be positive".into()));
        }
        if self.lighting.is_empty() {
            return Err(Error::Invalid("lighting script is empty".into()));
        }
        for (i, l) in self.lighting.iter().enumerate() {
            let d = Vector3::from(l.sun_direction);
            let all = l.sun_direction.iter().chain(&l.sun_color).chain(&l.sky_color).chain([&l.indirect_gain]);
            if all.clone().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("lighting entry {i}")));
            }
            if d.norm() < 1e-9 || d.z < 0.0 {
                return Err(Error::Invalid(format!("lighting entry {i}: sun direction must point into the upper hemisphere")));
            }
            if l.sun_color.iter().chain(&l.sky_color).chain([&l.indirect_gain]).any(|&v| v < 0.0) {
                return Err(Error::Invalid(format!("lighting entry {i}: colors must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::for_kind(self.kind)
    }

    /// Viewpoints on an arc in front of the scene.
    pub fn viewpoints(&self) -> Result<Vec<Camera>> {
        let n = self.cameras;
        let target = Vector3::new(0.0, 0.0, 0.5);
        let focal = 1.3 * self.width.max(self.height) as f64;
        (0..n)
            .map(|i| {
                let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
                let az = (-90.0 - 50.0 + 100.0 * t).to_radians();
                let eye = Vector3::new(6.3 * az.cos(), 6.3 * az.sin(), 3.0);
                Camera::look_at(eye, target, self.width, self.height, focal)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Material {
    Plane,
    Box,
}

impl Material {
    pub fn reflectance(self) -> [f64; 3] {
        match self {
            Material::Plane => PLANE_REFLECTANCE,
            Material::Box => BOX_REFLECTANCE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub material: Material,
}

/// Ground square at `z = 0` plus axis-aligned boxes standing on it.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub plane_half: f64,
    pub boxes: Vec<Aabb>,
}

impl Geometry {
    pub fn for_kind(kind: SceneKind) -> Self {
        let boxes = match kind {
            SceneKind::Plane => Vec::new(),
            SceneKind::BoxOverPlane => vec![Aabb {
                lo: [-0.6, -0.6, 0.0],
                hi: [0.6, 0.6, 1.2],
            }],
            SceneKind::Colonnade => [-1.5, 0.0, 1.5]
                .iter()
                .map(|&x| Aabb {
                    lo: [x - 0.2, -0.2, 0.0],
                    hi: [x + 0.2, 0.2, 1.6],
                })
                .collect(),
        };
        Self {
            plane_half: PLANE_HALF,
            boxes,
        }
    }

    fn inside_footprint(&self, x: f64, y: f64) -> bool {
        self.boxes.iter().any(|b| x > b.lo[0] && x < b.hi[0] && y > b.lo[1] && y < b.hi[1])
    }

    /// First surface hit by the ray, with the hit coordinate snapped onto its face.
    pub fn hit(&self, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |h: Hit| {
            if h.t > SURFACE_EPS && best.is_none_or(|b| h.t < b.t) {
                best = Some(h);
            }
        };
        if dir.z.abs() > 1e-12 {
            let t = -origin.z / dir.z;
            let mut p = origin + dir * t;
            p.z = 0.0;
            if p.x.abs() <= self.plane_half && p.y.abs() <= self.plane_half && !self.inside_footprint(p.x, p.y) {
                consider(Hit {
                    t,
                    point: p,
                    normal: Vector3::z(),
                    material: Material::Plane,
                });
            }
        }
        for b in &self.boxes {
            for axis in 0..3 {
                for (bound, sign) in [(b.lo[axis], -1.0), (b.hi[axis], 1.0)] {
                    if axis == 2 && sign < 0.0 {
                        continue; // box bottoms rest on the ground
                    }
                    if dir[axis].abs() < 1e-12 {
                        continue;
                    }
                    let t = (bound - origin[axis]) / dir[axis];
                    let mut p = origin + dir * t;
                    p[axis] = bound;
                    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                    if p[u] < b.lo[u] || p[u] > b.hi[u] || p[v] < b.lo[v] || p[v] > b.hi[v] {
                        continue;
                    }
                    let mut normal = Vector3::zeros();
                    normal[axis] = sign;
                    consider(Hit {
                        t,
                        point: p,
                        normal,
                        material: Material::Box,
                    });
                }
            }
        }
        best
    }

    /// Whether the ray from a surface point towards `d` passes through a box interior.
    ///
    /// Rays that only graze a face or start on the outside of one are unoccluded.
    pub fn occluded(&self, point: Vector3<f64>, d: Vector3<f64>) -> bool {
        self.boxes.iter().any(|b| {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for axis in 0..3 {
                let (o, lo, hi) = (point[axis], b.lo[axis], b.hi[axis]);
                if d[axis].abs() < 1e-12 {
                    if o <= lo + SURFACE_EPS || o >= hi - SURFACE_EPS {
                        return false;
                    }
                    continue;
                }
                let (a, c) = ((lo - o) / d[axis], (hi - o) / d[axis]);
                t0 = t0.max(a.min(c));
                t1 = t1.min(a.max(c));
            }
            t1 > SURFACE_EPS && t1 - t0.max(0.0) > SURFACE_EPS
        })
    }

    /// Distance from `p` to the nearest edge where a box meets the ground.
    pub fn concave_distance(&self, p: Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        for b in &self.boxes {
            let corners = [
                Vector3::new(b.lo[0], b.lo[1], 0.0),
                Vector3::new(b.hi[0], b.lo[1], 0.0),
                Vector3::new(b.hi[0], b.hi[1], 0.0),
                Vector3::new(b.lo[0], b.hi[1], 0.0),
            ];
            for i in 0..4 {
                best = best.min(segment_distance(p, corners[i], corners[(i + 1) % 4]));
            }
        }
        best
    }

    pub fn indirect(&self, p: Vector3<f64>, gain: f64) -> f64 {
        let d = self.concave_distance(p);
        if d.is_finite() {
            gain * (-d / INDIRECT_FALLOFF).exp()
        } else {
            0.0
        }
    }
}

fn segment_distance(p: Vector3<f64>, a: Vector3<f64>, b: Vector3<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Exact shadow test: 1 when `point` sees the sun along `d`, 0 otherwise.
pub fn oracle_shadow(spec: &SynthSpec, point: [f64; 3], d: [f64; 3]) -> f64 {
    let dir = Vector3::from(d);
    if spec.geometry().occluded(Vector3::from(point), dir / dir.norm()) {
        0.0
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaussianClass {
    Surface,
    Sky,
    SkyFloater,
    Transient,
}

/// Per-pixel analytic images for one camera and lighting entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub image: ImagePlane,
    pub visibility: ImagePlane,
    pub sun: ImagePlane,
    pub sky: ImagePlane,
    pub ind: ImagePlane,
    pub reflectance: ImagePlane,
    pub sky_mask: ImagePlane,
    /// Camera depth; infinite where the ray leaves the scene.
    pub depth: ImagePlane,
}

impl Truth {
    /// Depth mapped to `[0, 1]` disparity, 0 for sky.
    pub fn disparity(&self) -> ImagePlane {
        let near = self.depth.data().iter().copied().fold(f64::INFINITY, f64::min);
        self.depth.map(|z| if z.is_finite() { near / z } else { 0.0 })
    }

    /// Shadow mask on scene pixels; sky pixels are 0.
    pub fn shadow_mask(&self) -> ImagePlane {
        let data = self
            .visibility
            .data()
            .iter()
            .zip(self.sky_mask.data())
            .map(|(&v, &s)| if s == 0.0 && v == 0.0 { 1.0 } else { 0.0 })
            .collect();
        ImagePlane::from_vec(self.visibility.width(), self.visibility.height(), 1, data).expect("shape")
    }

    pub fn write(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.image.write_png(dir.join(format!("{prefix}_image.png")))?;
        self.visibility.write_png(dir.join(format!("{prefix}_visibility.png")))?;
        self.reflectance.write_png(dir.join(format!("{prefix}_reflectance.png")))?;
        self.sky_mask.write_png(dir.join(format!("{prefix}_sky.png")))?;
        self.image.write_pfm(dir.join(format!("{prefix}_image.pfm")))?;
        self.disparity().write_pfm(dir.join(format!("{prefix}_disparity.pfm")))?;
        self.depth
            .map(|z| if z.is_finite() { z } else { DEPTH_BACKGROUND })
            .write_pfm(dir.join(format!("{prefix}_depth.pfm")))
    }
}

/// Analytic render at pixel centers.
pub fn render_truth(spec: &SynthSpec, camera: &Camera, light: &Lighting) -> Truth {
    let geo = spec.geometry();
    let (w, h) = (camera.width, camera.height);
    let d = light.direction();
    let mut v = ImagePlane::new(w, h, 1);
    let mut sun = ImagePlane::new(w, h, 3);
    let mut sky = ImagePlane::new(w, h, 3);
    let mut ind = ImagePlane::new(w, h, 3);
    let mut r = ImagePlane::new(w, h, 3);
    let mut sky_mask = ImagePlane::new(w, h, 1);
    let mut depth = ImagePlane::new(w, h, 1);
    let origin = camera.center();
    for y in 0..h {
        for x in 0..w {
            let ray = camera.pixel_ray(x, y);
            match geo.hit(origin, ray) {
                Some(hit) => {
                    let lit = light.sunny && !geo.occluded(hit.point, d);
                    v.set(x, y, 0, if lit { 1.0 } else { 0.0 });
                    let gain = geo.indirect(hit.point, light.indirect_gain);
                    let refl = hit.material.reflectance();
                    for c in 0..3 {
                        sun.set(x, y, c, if light.sunny { light.sun_color[c] } else { 0.0 });
                        sky.set(x, y, c, light.sky_color[c]);
                        ind.set(x, y, c, gain);
                        r.set(x, y, c, refl[c]);
                    }
                    depth.set(x, y, 0, camera.to_camera(&hit.point).z);
                }
                None => {
                    v.set(x, y, 0, 1.0);
                    sky_mask.set(x, y, 0, 1.0);
                    for c in 0..3 {
                        sky.set(x, y, c, light.sky_color[c]);
                        r.set(x, y, c, SKY_REFLECTANCE[c]);
                    }
                    depth.set(x, y, 0, f64::INFINITY);
                }
            }
        }
    }
    let image = compose(&v, &sun, &sky, &ind, &r).expect("matching shapes");
    Truth {
        image,
        visibility: v,
        sun,
        sky,
        ind,
        reflectance: r,
        sky_mask,
        depth,
    }
}

/// Adds clipped Gaussian noise of standard deviation `level`.
pub fn add_noise(image: &ImagePlane, level: f64, rng: &mut ChaCha8Rng) -> ImagePlane {
    if level == 0.0 {
        return image.clone();
    }
    let normal = Normal::new(0.0, level).expect("valid noise level");
    let data = image.data().iter().map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0)).collect();
    ImagePlane::from_vec(image.width(), image.height(), image.channels(), data).expect("shape")
}

/// A generated scene with its labels and per-image training data.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub spec: SynthSpec,
    pub scene: Scene,
    pub labels: Vec<GaussianClass>,
    /// Distinct viewpoints.
    pub viewpoints: Vec<Camera>,
    /// Noise-free truth per lighting entry (image `i` uses viewpoint `i % cameras`).
    pub truth: Vec<Truth>,
    /// Noisy training images.
    pub images: Vec<ImagePlane>,
}

impl SynthScene {
    pub fn declared_count(&self) -> usize {
        self.labels.len()
    }

    pub fn sunny(&self) -> Vec<bool> {
        self.spec.lighting.iter().map(|l| l.sunny).collect()
    }

    pub fn sky_masks(&self) -> Vec<ImagePlane> {
        self.truth.iter().map(|t| crate::extract::sky_mask_from_disparity(&t.disparity())).collect()
    }

    /// Writes truth PNG/PFM files and the training images under `dir`.
    pub fn write_bundle(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("spec.toml"), self.spec.to_toml())?;
        for (i, (t, img)) in self.truth.iter().zip(&self.images).enumerate() {
            t.write(dir, &format!("truth_{i:03}"))?;
            img.write_png(dir.join(format!("image_{i:03}.png")))?;
            img.write_pfm(dir.join(format!("image_{i:03}.pfm")))?;
        }
        Ok(())
    }
}

fn tile(position: Vector3<f64>, normal: Vector3<f64>, sigma: f64, color: [f64; 3]) -> Gaussian {
    Gaussian::new(
        position.into(),
        [sigma, sigma, sigma * NORMAL_SCALE_RATIO],
        quat_from_z_to(normal),
        TILE_OPACITY,
        color,
    )
}

/// Tile with separate scales along the tangents `eu` and `normal × eu`.
fn oriented_tile(position: Vector3<f64>, normal: Vector3<f64>, eu: Vector3<f64>, su: f64, sv: f64, color: [f64; 3]) -> Gaussian {
    let ev = normal.cross(&eu);
    let basis = nalgebra::Matrix3::from_columns(&[eu, ev, normal]);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(basis));
    Gaussian::new(
        position.into(),
        [su, sv, su.min(sv) * NORMAL_SCALE_RATIO],
        [q.w, q.i, q.j, q.k],
        TILE_OPACITY,
        color,
    )
}

/// Evenly spaced centers for `n` tiles over `[lo, hi]`.
fn tile_centers(lo: f64, hi: f64, spacing: f64) -> Vec<f64> {
    let n = ((hi - lo) / spacing).round().max(1.0) as usize;
    let step = (hi - lo) / n as f64;
    (0..n).map(|k| lo + (k as f64 + 0.5) * step).collect()
}

/// Ground rows: finer where shadows fall, coarse toward the rim.
fn ground_centers(half: f64, spacing: f64) -> Vec<(f64, f64)> {
    let inner = SHADOW_ZONE_HALF.min(half);
    let fine = spacing / SHADOW_ZONE_REFINEMENT;
    let mut out = Vec::new();
    for (lo, hi, s) in [(-half, -inner, spacing), (-inner, inner, fine), (inner, half, spacing)] {
        if hi - lo > 1e-12 {
            let step = (hi - lo) / tile_centers(lo, hi, s).len() as f64;
            out.extend(tile_centers(lo, hi, s).into_iter().map(|c| (c, step / SPACING_PER_SIGMA)));
        }
    }
    out
}

/// `(center, sigma)` rows over `[lo, hi]` that shrink geometrically toward
/// both ends and use the coarse spacing in between.
fn graded_centers(lo: f64, hi: f64, spacing: f64) -> Vec<(f64, f64)> {
    let coarse = spacing / SPACING_PER_SIGMA;
    let half = 0.5 * (hi - lo);
    let mut band = Vec::new();
    let (mut sigma, mut edge) = (coarse * EDGE_SIGMA_FRACTION, 0.0);
    while sigma < coarse && edge + SPACING_PER_SIGMA * sigma <= half {
        band.push((edge + 0.5 * SPACING_PER_SIGMA * sigma, sigma));
        edge += SPACING_PER_SIGMA * sigma;
        sigma *= EDGE_GROWTH;
    }
    let mut out: Vec<(f64, f64)> = band.iter().map(|&(d, s)| (lo + d, s)).collect();
    let middle = hi - lo - 2.0 * edge;
    if middle > 1e-12 {
        let n = (middle / spacing).ceil() as usize;
        let step = middle / n as f64;
        out.extend((0..n).map(|k| (lo + edge + (k as f64 + 0.5) * step, step / SPACING_PER_SIGMA)));
    }
    out.extend(band.iter().rev().map(|&(d, s)| (hi - d, s)));
    out
}

fn surface_tiles(geo: &Geometry, spacing: f64) -> Vec<Gaussian> {
    let mut out = Vec::new();
    let ground = ground_centers(geo.plane_half, spacing);
    for &(y, sy) in &ground {
        for &(x, sx) in &ground {
            if !geo.inside_footprint(x, y) {
                out.push(oriented_tile(Vector3::new(x, y, 0.0), Vector3::z(), Vector3::x(), sx, sy, PLANE_REFLECTANCE));
            }
        }
    }
    for b in &geo.boxes {
        for axis in 0..3 {
            for (bound, sign) in [(b.lo[axis], -1.0), (b.hi[axis], 1.0)] {
                if axis == 2 && sign < 0.0 {
                    continue;
                }
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                let mut n = Vector3::zeros();
                n[axis] = sign;
                let mut eu = Vector3::zeros();
                eu[u] = 1.0;
                for &(pv, sv) in &graded_centers(b.lo[v], b.hi[v], spacing) {
                    for &(pu, su) in &graded_centers(b.lo[u], b.hi[u], spacing) {
                        let mut p = Vector3::zeros();
                        p[axis] = bound;
                        p[u] = pu;
                        p[v] = pv;
                        out.push(oriented_tile(p, n, eu, su, sv, BOX_REFLECTANCE));
                    }
                }
            }
        }
    }
    out
}

/// Backdrop tiles on a vertical cylinder, kept where some viewpoint sees them.
fn sky_tiles(geo: &Geometry, cameras: &[Camera]) -> Vec<Gaussian> {
    let sigma = SKY_SPACING / SPACING_PER_SIGMA;
    let n_theta = (std::f64::consts::TAU * SKY_RADIUS / SKY_SPACING).round() as usize;
    let color = [0.4, 0.45, 0.55];
    let mut out = Vec::new();
    for z in tile_centers(-30.0, 12.0, SKY_SPACING) {
        for k in 0..n_theta {
            let theta = std::f64::consts::TAU * k as f64 / n_theta as f64;
            let p = Vector3::new(SKY_RADIUS * theta.cos(), SKY_RADIUS * theta.sin(), z);
            let tangent = Vector3::new(-theta.sin(), theta.cos(), 0.0);
            // the center or a footprint edge must be seen past the geometry
            let probes = [Vector3::zeros(), tangent, -tangent, Vector3::z(), -Vector3::z()].map(|o| p + o * (2.0 * sigma));
            let visible = cameras.iter().any(|cam| {
                let in_view = cam.project(&p).is_some_and(|(u, v, _)| {
                    let (mx, my) = (0.15 * cam.width as f64, 0.15 * cam.height as f64);
                    u > -mx && v > -my && u < cam.width as f64 + mx && v < cam.height as f64 + my
                });
                in_view
                    && probes.iter().any(|q| {
                        let eye = cam.center();
                        geo.hit(eye, (q - eye).normalize()).is_none()
                    })
            });
            if visible {
                let mut g = tile(p, -Vector3::new(p.x, p.y, 0.0).normalize(), sigma, color);
                g.opacity = 1.0 - 1e-3;
                g.sky_semantic = 0.9;
                out.push(g);
            }
        }
    }
    out
}

/// Initial sky semantic for a generator class.
pub fn initial_semantic(class: GaussianClass) -> f64 {
    match class {
        GaussianClass::Sky | GaussianClass::SkyFloater => 0.9,
        GaussianClass::Surface | GaussianClass::Transient => 0.1,
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geo = spec.geometry();
    let viewpoints = spec.viewpoints()?;
    let spacing = 1.0 / spec.density.sqrt();

    let mut gaussians = surface_tiles(&geo, spacing);
    let mut labels = vec![GaussianClass::Surface; gaussians.len()];
    let sky = sky_tiles(&geo, &viewpoints);
    labels.extend(std::iter::repeat_n(GaussianClass::Sky, sky.len()));
    gaussians.extend(sky);

    let jitter: Normal<f64> = Normal::new(0.0, 0.25).expect("valid");
    for _ in 0..spec.sky_floaters {
        let p = Vector3::new(jitter.sample(&mut rng) * 4.0, jitter.sample(&mut rng) * 4.0, 3.5 + jitter.sample(&mut rng).abs());
        let mut g = Gaussian::new(p.into(), [0.2; 3], [1.0, 0.0, 0.0, 0.0], 0.8, [0.8, 0.85, 0.9]);
        g.sky_semantic = initial_semantic(GaussianClass::SkyFloater);
        gaussians.push(g);
        labels.push(GaussianClass::SkyFloater);
    }
    if spec.transients > 0 {
        // a ring in front of the first viewpoint, spaced so no transient hides another
        let eye = viewpoints[0].center();
        let target = Vector3::new(0.0, 0.0, 0.6);
        let toward = (eye - target).normalize();
        let side = toward.cross(&Vector3::z()).normalize();
        let up = side.cross(&toward);
        for k in 0..spec.transients {
            let angle = std::f64::consts::TAU * k as f64 / spec.transients as f64 + 0.2 * jitter.sample(&mut rng);
            let p = target + toward * (2.5 + jitter.sample(&mut rng)) + up * 0.3 + (side * angle.cos() + up * angle.sin()) * 0.9;
            let mut g = Gaussian::new(p.into(), [0.15; 3], [1.0, 0.0, 0.0, 0.0], 0.35, [0.2, 0.6, 0.2]);
            g.sky_semantic = initial_semantic(GaussianClass::Transient);
            gaussians.push(g);
            labels.push(GaussianClass::Transient);
        }
    }
    for (g, &c) in gaussians.iter_mut().zip(&labels) {
        if c == GaussianClass::Surface {
            g.sky_semantic = initial_semantic(c);
        }
    }

    let mut scene = Scene::new(gaussians, Decoders::zeros());
    let sunny: Vec<bool> = spec.lighting.iter().map(|l| l.sunny).collect();
    crate::train::initialize(&mut scene, &sunny, spec.seed)?;
    scene.cameras = (0..spec.lighting.len()).map(|i| viewpoints[i % viewpoints.len()].clone()).collect();

    let truth: Vec<Truth> = spec
        .lighting
        .iter()
        .zip(&scene.cameras)
        .map(|(l, cam)| render_truth(spec, cam, l))
        .collect();
    let images = truth.iter().map(|t| add_noise(&t.image, spec.noise, &mut rng)).collect();
    Ok(SynthScene {
        spec: spec.clone(),
        scene,
        labels,
        viewpoints,
        truth,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: SceneKind) -> SynthSpec {
        let mut s = SynthSpec::new(kind, 3);
        s.width = 48;
        s.height = 48;
        s.density = 12.0;
        s
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let spec = SynthSpec::from_toml("kind = \"box-over-plane\"\nseed = 7\n").unwrap();
        assert_eq!(spec, SynthSpec::new(SceneKind::BoxOverPlane, 7));
        assert_eq!(SynthSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        assert!(SynthSpec::from_toml("kind = \"box-over-plane\"\ndensity = 0.0\n").is_err());
        assert!(SynthSpec::from_toml("kind = \"torus\"\n").is_err());
    }

    #[test]
    fn rejects_lower_hemisphere_sun() {
        let mut spec = small(SceneKind::Plane);
        spec.lighting[0].sun_direction = [0.0, 0.6, -0.8];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn plane_sky_mask_matches_ray_misses() {
        let spec = small(SceneKind::Plane);
        let cam = &spec.viewpoints().unwrap()[0];
        let t = render_truth(&spec, cam, &spec.lighting[0]);
        let geo = spec.geometry();
        for y in 0..cam.height {
            for x in 0..cam.width {
                let ray = cam.pixel_ray(x, y);
                let p = cam.center() - ray * (cam.center().z / ray.z);
                let on_plane = ray.z < 0.0 && p.x.abs() <= geo.plane_half && p.y.abs() <= geo.plane_half;
                assert_eq!(t.sky_mask.get(x, y, 0), if on_plane { 0.0 } else { 1.0 });
            }
        }
        assert!(t.sky_mask.data().contains(&1.0) && t.sky_mask.data().contains(&0.0));
    }

    #[test]
    fn oracle_examples() {
        let plane = small(SceneKind::Plane);
        for d in [[0.0, 0.0, 1.0], [0.6, 0.0, 0.8], [1.0, 0.0, 0.0]] {
            assert_eq!(oracle_shadow(&plane, [0.3, -1.0, 0.0], d), 1.0);
        }
        let boxed = small(SceneKind::BoxOverPlane);
        assert_eq!(oracle_shadow(&boxed, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]), 0.0);
        assert_eq!(oracle_shadow(&boxed, [2.0, 0.0, 0.0], [-1.0, 0.0, 0.0]), 1.0);
        assert_eq!(oracle_shadow(&boxed, [0.0, 0.0, 1.2], [0.0, 0.0, 1.0]), 1.0);
        assert_eq!(oracle_shadow(&boxed, [0.6, 0.0, 0.5], [-0.6, 0.0, 0.8]), 0.0);
        assert_eq!(oracle_shadow(&boxed, [0.6, 0.0, 0.5], [0.6, 0.0, 0.8]), 1.0);
    }

    #[test]
    fn zenith_shadow_is_footprint() {
        let spec = small(SceneKind::BoxOverPlane);
        let geo = spec.geometry();
        for i in 0..40 {
            for j in 0..40 {
                let (x, y) = (-1.0 + 0.05 * i as f64 + 0.01, -1.0 + 0.05 * j as f64 + 0.01);
                let under = x.abs() < 0.6 && y.abs() < 0.6;
                let v = oracle_shadow(&spec, [x, y, 0.0], [0.0, 0.0, 1.0]);
                assert_eq!(v, if under { 0.0 } else { 1.0 }, "{x} {y}");
                assert_eq!(geo.inside_footprint(x, y), under);
            }
        }
    }

    #[test]
    fn shadow_offset_at_45_degrees() {
        let spec = small(SceneKind::BoxOverPlane);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // sun towards +x: the shadow reaches box height beyond the far wall
        for k in 1..100 {
            let x = -0.6 - 1.25 * k as f64 / 100.0;
            let expect = if x > -0.6 - 1.2 { 0.0 } else { 1.0 };
            assert_eq!(oracle_shadow(&spec, [x, 0.0, 0.0], [s, 0.0, s]), expect, "{x}");
        }
    }

    #[test]
    fn oracle_is_rigid_invariant() {
        let spec = small(SceneKind::BoxOverPlane);
        let shifted = Geometry {
            plane_half: PLANE_HALF,
            boxes: vec![Aabb {
                lo: [1.4, -2.6, 0.0],
                hi: [2.6, -1.4, 1.2],
            }],
        };
        let offset = Vector3::new(2.0, -2.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = rand_distr::Uniform::new(-1.5f64, 1.5).unwrap();
        for _ in 0..500 {
            let p = Vector3::new(u.sample(&mut rng), u.sample(&mut rng), 0.0);
            let d = Vector3::new(u.sample(&mut rng), u.sample(&mut rng), 0.2 + u.sample(&mut rng).abs()).normalize();
            let a = spec.geometry().occluded(p, d);
            assert_eq!(a, shifted.occluded(p + offset, d));
            // mirror through x = 0 maps the box onto itself
            let m = Vector3::new(-p.x, p.y, p.z);
            assert_eq!(a, spec.geometry().occluded(m, Vector3::new(-d.x, d.y, d.z)));
        }
    }

    #[test]
    fn cloudy_ignores_sun_color() {
        let spec = small(SceneKind::BoxOverPlane);
        let cam = &spec.viewpoints().unwrap()[1];
        let a = Lighting::cloudy();
        let mut b = a.clone();
        b.sun_color = [5.0, 0.1, 2.0];
        b.sun_direction = [0.3, 0.3, 0.9];
        let (ta, tb) = (render_truth(&spec, cam, &a), render_truth(&spec, cam, &b));
        assert_eq!(ta.image, tb.image);
        assert!(ta.visibility.data().iter().zip(ta.sky_mask.data()).all(|(&v, &s)| s == 1.0 || v == 0.0));
    }

    #[test]
    fn recomposition_and_linearity() {
        let spec = small(SceneKind::Colonnade);
        let cam = &spec.viewpoints().unwrap()[2];
        let t = render_truth(&spec, cam, &spec.lighting[0]);
        assert_eq!(compose(&t.visibility, &t.sun, &t.sky, &t.ind, &t.reflectance).unwrap(), t.image);
        let doubled = compose(&t.visibility, &t.sun, &t.sky, &t.ind, &t.reflectance.map(|r| 2.0 * r)).unwrap();
        for (a, b) in t.image.data().iter().zip(doubled.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = small(SceneKind::BoxOverPlane);
        spec.sky_floaters = 3;
        spec.transients = 4;
        let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.images, b.images);
        assert_eq!(a.declared_count(), a.scene.len());
        assert_eq!(a.labels.iter().filter(|&&c| c == GaussianClass::Transient).count(), 4);
        spec.seed += 1;
        assert_ne!(generate(&spec).unwrap().images, a.images);
    }

    #[test]
    fn tiles_are_flattened_along_normals() {
        let spec = small(SceneKind::BoxOverPlane);
        let s = generate(&spec).unwrap();
        for (g, c) in s.scene.gaussians.iter().zip(&s.labels) {
            if *c != GaussianClass::Surface {
                continue;
            }
            let n = crate::scene::gaussian_normal(g);
            let p = g.position_vec();
            let expect = if p.z == 0.0 {
                Vector3::z()
            } else if p.z == 1.2 {
                Vector3::z()
            } else if p.x.abs() == 0.6 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            assert!((n.dot(&expect).abs() - 1.0).abs() < 1e-9);
        }
    }
}
