//! Scene data model: Gaussians, cameras, per-image embeddings and decoders.

mod container;

pub use container::{load_scene, read_scene, save_scene, write_scene, MAGIC};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::mlp::{Activation, Mlp, SHADING_HIDDEN, VISIBILITY_HIDDEN};

pub const FEATURE_DIM: usize = 18;
pub const VIS_FEATURE_DIM: usize = 6;
pub const EMBEDDING_DIM: usize = 32;

pub type Feature = [f64; FEATURE_DIM];
pub type VisFeature = [f64; VIS_FEATURE_DIM];
pub type Embedding = [f64; EMBEDDING_DIM];

/// Input widths of the decoders.
pub const AMB_INPUT: usize = FEATURE_DIM + EMBEDDING_DIM;
pub const REF_INPUT: usize = FEATURE_DIM;
pub const SUN_INPUT: usize = FEATURE_DIM + EMBEDDING_DIM;
pub const SKY_INPUT: usize = FEATURE_DIM + EMBEDDING_DIM;
pub const IND_INPUT: usize = 3 + FEATURE_DIM + EMBEDDING_DIM;
pub const VIS_INPUT: usize = VIS_FEATURE_DIM + 3 + 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    /// Per-axis standard deviations, strictly positive.
    pub scale: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
    /// Degree-0 color.
    pub color: [f64; 3],
    pub f_ref: Feature,
    pub f_sun: Feature,
    pub f_sky: Feature,
    pub f_ind: Feature,
    /// Feature of the ambient-only model used for visibility extraction.
    pub f_amb: Feature,
    pub f_vis: VisFeature,
    pub sky_semantic: f64,
}

impl Gaussian {
    pub fn new(position: [f64; 3], scale: [f64; 3], rotation: [f64; 4], opacity: f64, color: [f64; 3]) -> Self {
        Self {
            position,
            scale,
            rotation,
            opacity,
            color,
            f_ref: [0.0; FEATURE_DIM],
            f_sun: [0.0; FEATURE_DIM],
            f_sky: [0.0; FEATURE_DIM],
            f_ind: [0.0; FEATURE_DIM],
            f_amb: [0.0; FEATURE_DIM],
            f_vis: [0.0; VIS_FEATURE_DIM],
            sky_semantic: 0.0,
        }
    }

    pub fn position_vec(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    /// Rotation matrix of the (re-normalized) quaternion.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.rotation)
    }

    /// World-space covariance `R S² Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s2 = Matrix3::from_diagonal(&Vector3::new(
            self.scale[0] * self.scale[0],
            self.scale[1] * self.scale[1],
            self.scale[2] * self.scale[2],
        ));
        r * s2 * r.transpose()
    }

    /// Inverse covariance `R S⁻² Rᵀ`, computed without a general inverse.
    pub fn precision(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let inv = Matrix3::from_diagonal(&Vector3::new(
            1.0 / (self.scale[0] * self.scale[0]),
            1.0 / (self.scale[1] * self.scale[1]),
            1.0 / (self.scale[2] * self.scale[2]),
        ));
        r * inv * r.transpose()
    }

    pub fn max_scale(&self) -> f64 {
        self.scale[0].max(self.scale[1]).max(self.scale[2])
    }

    /// Checks the numeric invariants; `quat_tol` bounds `| |q| − 1 |`.
    pub fn validate(&self, index: usize, quat_tol: f64) -> Result<()> {
        let rec = |field: &str| format!("gaussian[{index}].{field}");
        let finite = self.position.iter().chain(&self.scale).chain(&self.rotation).chain(&self.color)
            .chain(self.f_ref.iter()).chain(&self.f_sun).chain(&self.f_sky).chain(&self.f_ind)
            .chain(&self.f_amb).chain(&self.f_vis)
            .chain([&self.opacity, &self.sky_semantic])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!("gaussian[{index}]")));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::parse(rec("scale"), "scale must be strictly positive"));
        }
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > quat_tol {
            return Err(Error::parse(rec("rotation"), format!("quaternion norm {n}")));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::parse(rec("opacity"), format!("{} outside [0,1]", self.opacity)));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::parse(rec("color"), "channel outside [0,1]"));
        }
        if self.sky_semantic < 0.0 {
            return Err(Error::parse(rec("sky_semantic"), "must be non-negative"));
        }
        Ok(())
    }
}

pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion `(w, x, y, z)` rotating `+z` onto the unit vector `n`.
pub fn quat_from_z_to(n: Vector3<f64>) -> [f64; 4] {
    let z = Vector3::z();
    let d = z.dot(&n);
    if d < -1.0 + 1e-12 {
        return [0.0, 1.0, 0.0, 0.0];
    }
    let axis = z.cross(&n);
    let w = 1.0 + d;
    let norm = (w * w + axis.norm_squared()).sqrt();
    [w / norm, axis.x / norm, axis.y / norm, axis.z / norm]
}

/// Unoriented surface normal: the rotated axis of the smallest scale.
///
/// Ties go to the lowest axis index. The result is unit length and does not
/// change under `q → −q`.
pub fn gaussian_normal(g: &Gaussian) -> Vector3<f64> {
    let mut axis = 0;
    for i in 1..3 {
        if g.scale[i] < g.scale[axis] {
            axis = i;
        }
    }
    let col = g.rotation_matrix().column(axis).into_owned();
    col / col.norm()
}

/// Pinhole camera with a world-to-camera rigid transform (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, world `+z` up, focal length in pixels.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, width: usize, height: usize, focal: f64) -> Result<Self> {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&Vector3::z());
        if right.norm() < 1e-9 {
            right = Vector3::x();
        }
        let right = right.normalize();
        let down = forward.cross(&right).normalize();
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        )
    }

    /// Builds from a row-major 3×4 world-to-camera matrix `[R | t]`.
    pub fn from_pose(pose: &[f64; 12], intrinsics: &Camera) -> Result<Self> {
        let rotation = Matrix3::new(
            pose[0], pose[1], pose[2], pose[4], pose[5], pose[6], pose[8], pose[9], pose[10],
        );
        let translation = Vector3::new(pose[3], pose[7], pose[11]);
        Camera::new(
            intrinsics.fx,
            intrinsics.fy,
            intrinsics.cx,
            intrinsics.cy,
            rotation,
            translation,
            intrinsics.width,
            intrinsics.height,
        )
    }

    pub fn pose(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.fx, self.fy, self.cx, self.cy];
        if all.iter().chain(self.rotation.iter()).chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("camera".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Invalid("camera focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("camera resolution must be at least 1x1".into()));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).amax();
        if err > 1e-9 || self.rotation.determinant() < 0.0 {
            return Err(Error::Invalid(format!("camera rotation not orthonormal (err {err:e})")));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// World-space camera center.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pixel coordinates and depth of a world point in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    /// World-space unit direction through the center of pixel `(px, py)`.
    pub fn pixel_ray(&self, px: usize, py: usize) -> Vector3<f64> {
        let x = (px as f64 + 0.5 - self.cx) / self.fx;
        let y = (py as f64 + 0.5 - self.cy) / self.fy;
        (self.rotation.transpose() * Vector3::new(x, y, 1.0)).normalize()
    }
}

/// Per-image illumination latents.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub amb: Embedding,
    pub sun: Embedding,
    pub sky: Embedding,
    pub ind: Embedding,
    pub sunny: bool,
}

impl EmbeddingSet {
    pub fn zeros(sunny: bool) -> Self {
        Self {
            amb: [0.0; EMBEDDING_DIM],
            sun: [0.0; EMBEDDING_DIM],
            sky: [0.0; EMBEDDING_DIM],
            ind: [0.0; EMBEDDING_DIM],
            sunny,
        }
    }

    pub fn random<R: Rng>(sunny: bool, std: f64, rng: &mut R) -> Self {
        let mut e = Self::zeros(sunny);
        for v in e.amb.iter_mut().chain(&mut e.sun).chain(&mut e.sky).chain(&mut e.ind) {
            *v = std * rng.random_range(-1.0..1.0);
        }
        e
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecoderKind {
    Amb,
    Ref,
    Sun,
    Sky,
    Ind,
    Vis,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 6] = [
        DecoderKind::Amb,
        DecoderKind::Ref,
        DecoderKind::Sun,
        DecoderKind::Sky,
        DecoderKind::Ind,
        DecoderKind::Vis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Amb => "amb",
            DecoderKind::Ref => "ref",
            DecoderKind::Sun => "sun",
            DecoderKind::Sky => "sky",
            DecoderKind::Ind => "ind",
            DecoderKind::Vis => "vis",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// `(input width, hidden widths, outputs, output activation)`.
    pub fn shape(self) -> (usize, [usize; 3], usize, Activation) {
        match self {
            DecoderKind::Amb => (AMB_INPUT, SHADING_HIDDEN, 3, Activation::Sigmoid),
            DecoderKind::Ref => (REF_INPUT, SHADING_HIDDEN, 3, Activation::Sigmoid),
            DecoderKind::Sun => (SUN_INPUT, SHADING_HIDDEN, 3, Activation::Sigmoid),
            DecoderKind::Sky => (SKY_INPUT, SHADING_HIDDEN, 3, Activation::Sigmoid),
            DecoderKind::Ind => (IND_INPUT, SHADING_HIDDEN, 3, Activation::Sigmoid),
            DecoderKind::Vis => (VIS_INPUT, VISIBILITY_HIDDEN, 1, Activation::Tanh),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoders {
    pub amb: Mlp,
    pub reference: Mlp,
    pub sun: Mlp,
    pub sky: Mlp,
    pub ind: Mlp,
    pub vis: Mlp,
}

impl Decoders {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut make = |k: DecoderKind| {
            let (i, h, o, a) = k.shape();
            Mlp::new(i, h, o, a, rng)
        };
        Self {
            amb: make(DecoderKind::Amb),
            reference: make(DecoderKind::Ref),
            sun: make(DecoderKind::Sun),
            sky: make(DecoderKind::Sky),
            ind: make(DecoderKind::Ind),
            vis: make(DecoderKind::Vis),
        }
    }

    pub fn zeros() -> Self {
        let make = |k: DecoderKind| {
            let (i, h, o, a) = k.shape();
            Mlp::zeros(i, h, o, a)
        };
        Self {
            amb: make(DecoderKind::Amb),
            reference: make(DecoderKind::Ref),
            sun: make(DecoderKind::Sun),
            sky: make(DecoderKind::Sky),
            ind: make(DecoderKind::Ind),
            vis: make(DecoderKind::Vis),
        }
    }

    pub fn get(&self, kind: DecoderKind) -> &Mlp {
        match kind {
            DecoderKind::Amb => &self.amb,
            DecoderKind::Ref => &self.reference,
            DecoderKind::Sun => &self.sun,
            DecoderKind::Sky => &self.sky,
            DecoderKind::Ind => &self.ind,
            DecoderKind::Vis => &self.vis,
        }
    }

    pub fn get_mut(&mut self, kind: DecoderKind) -> &mut Mlp {
        match kind {
            DecoderKind::Amb => &mut self.amb,
            DecoderKind::Ref => &mut self.reference,
            DecoderKind::Sun => &mut self.sun,
            DecoderKind::Sky => &mut self.sky,
            DecoderKind::Ind => &mut self.ind,
            DecoderKind::Vis => &mut self.vis,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in DecoderKind::ALL {
            let (i, h, o, a) = kind.shape();
            self.get(kind).check_shape(kind.name(), i, h, o, a)?;
        }
        Ok(())
    }
}

/// Highest training stage whose outputs the scene carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Untrained = 0,
    Ambient = 1,
    Decomposed = 2,
    Baked = 3,
}

impl Stage {
    pub fn from_index(i: u32) -> Option<Self> {
        match i {
            0 => Some(Stage::Untrained),
            1 => Some(Stage::Ambient),
            2 => Some(Stage::Decomposed),
            3 => Some(Stage::Baked),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian>,
    pub decoders: Decoders,
    /// One entry per training image.
    pub embeddings: Vec<EmbeddingSet>,
    pub cameras: Vec<Camera>,
    pub stage: Stage,
    /// Directions the visibility cache was trained on.
    pub bake_directions: Vec<[f64; 3]>,
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian>, decoders: Decoders) -> Self {
        Self {
            gaussians,
            decoders,
            embeddings: Vec::new(),
            cameras: Vec::new(),
            stage: Stage::Untrained,
            bake_directions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self, quat_tol: f64) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            g.validate(i, quat_tol)?;
        }
        self.decoders.validate()?;
        for c in &self.cameras {
            c.validate()?;
        }
        Ok(())
    }

    pub fn embedding(&self, image: usize) -> Result<&EmbeddingSet> {
        self.embeddings
            .get(image)
            .ok_or_else(|| Error::Invalid(format!("no embedding for image {image}")))
    }

    /// Diagonal of the bounding box of non-sky Gaussian centers.
    pub fn extent(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for g in self.gaussians.iter().filter(|g| g.sky_semantic <= 0.5) {
            let p = g.position_vec();
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        if lo.x > hi.x {
            0.0
        } else {
            (hi - lo).norm()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn flat(rotation: [f64; 4], scale: [f64; 3]) -> Gaussian {
        Gaussian::new([0.0; 3], scale, rotation, 1.0, [0.5; 3])
    }

    #[test]
    fn normal_of_axis_aligned_gaussian() {
        let n = gaussian_normal(&flat([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.1]));
        assert!((n - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn normal_follows_rotation_about_x() {
        // 90° about x maps +z to -y
        let q = [FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0];
        let n = gaussian_normal(&flat(q, [1.0, 1.0, 0.1]));
        assert!((n.abs() - Vector3::y()).norm() < 1e-12);
        assert!((n + Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn normal_tie_breaks_to_lowest_axis() {
        let n = gaussian_normal(&flat([1.0, 0.0, 0.0, 0.0], [0.1, 0.1, 1.0]));
        assert!((n - Vector3::x()).norm() < 1e-12);
    }

    #[test]
    fn quat_from_z_maps_z() {
        for n in [Vector3::new(0.3, -0.4, 0.5).normalize(), -Vector3::z(), Vector3::z(), Vector3::x()] {
            let r = quat_to_matrix(quat_from_z_to(n));
            assert!((r * Vector3::z() - n).norm() < 1e-12);
        }
    }

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at(Vector3::new(1.0, -5.0, 3.0), Vector3::new(0.0, 0.0, 0.5), 64, 48, 50.0).unwrap();
        let (u, v, _) = cam.project(&Vector3::new(0.0, 0.0, 0.5)).unwrap();
        assert!((u - 32.0).abs() < 1e-9 && (v - 24.0).abs() < 1e-9);
        assert!((cam.center() - Vector3::new(1.0, -5.0, 3.0)).norm() < 1e-12);
        // world up appears toward smaller pixel rows
        let (_, v_up, _) = cam.project(&Vector3::new(0.0, 0.0, 1.5)).unwrap();
        assert!(v_up < 24.0);
    }

    #[test]
    fn camera_rejects_bad_rotation() {
        let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 1e-6, 0.0, 0.0, 1.0);
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, r, Vector3::zeros(), 4, 4).is_err());
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 4, 4).is_err());
    }

    proptest::proptest! {
        #[test]
        fn normal_is_unit_and_sign_invariant(
            w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
            s0 in 0.01f64..2.0, s1 in 0.01f64..2.0, s2 in 0.01f64..2.0,
        ) {
            let n = (w * w + x * x + y * y + z * z).sqrt();
            proptest::prop_assume!(n > 1e-3);
            let q = [w / n, x / n, y / n, z / n];
            let a = gaussian_normal(&flat(q, [s0, s1, s2]));
            let b = gaussian_normal(&flat(q.map(|v| -v), [s0, s1, s2]));
            proptest::prop_assert!((a.norm() - 1.0).abs() < 1e-9);
            proptest::prop_assert!((a - b).norm() < 1e-12);
        }
    }
}
