//! Request-level rendering shared by the `render` command and the service.

use sunsplat_core::raster::RenderPlan;
use sunsplat_core::scene::{Camera, Scene, Stage};
use sunsplat_core::shading::{compose_components, interpolate_embeddings, render_components_with, Component, Sun};
use sunsplat_core::shadow::{render_visibility_with, BakeCache};
use sunsplat_core::{Error, ImagePlane, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    Composite,
    Sun,
    Sky,
    Ind,
    Reflectance,
    Visibility,
}

impl Output {
    pub const ALL: [Output; 6] = [
        Output::Composite,
        Output::Sun,
        Output::Sky,
        Output::Ind,
        Output::Reflectance,
        Output::Visibility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Output::Composite => "composite",
            Output::Sun => "sun",
            Output::Sky => "sky",
            Output::Ind => "ind",
            Output::Reflectance => "reflectance",
            Output::Visibility => "visibility",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown output {s:?}")))
    }

    fn needs_sun(self) -> bool {
        matches!(self, Output::Composite | Output::Visibility)
    }
}

pub fn parse_component(s: &str) -> Result<Component> {
    Component::from_name(s).ok_or_else(|| Error::Invalid(format!("unknown component {s:?}")))
}

#[derive(Clone, Debug, PartialEq)]
pub enum View {
    Camera(usize),
    /// Row-major world-to-camera `[R | t]` with the intrinsics of a training camera.
    Pose { pose: [f64; 12], intrinsics: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderRequest {
    pub view: View,
    pub image_a: usize,
    pub image_b: Option<usize>,
    pub t: f64,
    pub components: Vec<Component>,
    /// `None` falls back to cloudy for cloudy embeddings and is an error otherwise.
    pub sun: Option<Sun>,
    pub outputs: Vec<Output>,
}

impl RenderRequest {
    pub fn new(view: View, image: usize, outputs: Vec<Output>) -> Self {
        Self {
            view,
            image_a: image,
            image_b: None,
            t: 0.0,
            components: Component::ALL.to_vec(),
            sun: None,
            outputs,
        }
    }
}

/// A loaded scene and its visibility cache, read-only after construction.
pub struct Renderer {
    scene: Scene,
    cache: Option<BakeCache>,
}

impl Renderer {
    pub fn new(scene: Scene) -> Result<Self> {
        let cache = if scene.stage >= Stage::Baked {
            Some(BakeCache::from_scene(&scene)?)
        } else {
            None
        };
        Ok(Self { scene, cache })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn is_baked(&self) -> bool {
        self.cache.is_some()
    }

    fn camera(&self, view: &View) -> Result<Camera> {
        let pick = |i: usize| {
            self.scene
                .cameras
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("camera {i} out of range ({} cameras)", self.scene.cameras.len())))
        };
        match view {
            View::Camera(i) => Ok(pick(*i)?.clone()),
            View::Pose { pose, intrinsics } => Camera::from_pose(pose, pick(*intrinsics)?),
        }
    }

    pub fn render(&self, req: &RenderRequest) -> Result<Vec<(Output, ImagePlane)>> {
        if req.outputs.is_empty() {
            return Err(Error::Invalid("no outputs requested".into()));
        }
        let camera = self.camera(&req.view)?;
        let a = self.scene.embedding(req.image_a)?;
        let emb = match req.image_b {
            Some(b) => interpolate_embeddings(a, self.scene.embedding(b)?, req.t, &req.components)?,
            None if (0.0..=1.0).contains(&req.t) => a.clone(),
            None => return Err(Error::Invalid(format!("interpolation factor {} outside [0, 1]", req.t))),
        };
        let sun = match req.sun {
            Some(Sun::Direction(d)) => Some(Sun::Direction(normalize(d)?)),
            Some(s) => Some(s),
            None if !emb.sunny => Some(Sun::Cloudy),
            None => None,
        };
        if sun.is_none() && req.outputs.iter().any(|o| o.needs_sun()) {
            return Err(Error::Invalid("a sun direction or cloudy mode is required".into()));
        }
        if matches!(sun, Some(Sun::Direction(_))) && self.cache.is_none() && req.outputs.iter().any(|o| o.needs_sun()) {
            return Err(Error::Stage("scene has no baked visibility; run the bake stage first".into()));
        }

        let plan = RenderPlan::for_camera(&self.scene, &camera);
        let comps = render_components_with(&plan, &self.scene, &emb)?;
        let visibility = match (sun, &self.cache) {
            (Some(Sun::Direction(d)), Some(cache)) if req.outputs.iter().any(|o| o.needs_sun()) => {
                Some(render_visibility_with(&plan, &self.scene, cache, d)?)
            }
            (Some(Sun::Cloudy), _) => Some(ImagePlane::new(camera.width, camera.height, 1)),
            _ => None,
        };
        let mut out = Vec::with_capacity(req.outputs.len());
        for &o in &req.outputs {
            let img = match o {
                Output::Sun => comps.sun.clone(),
                Output::Sky => comps.sky.clone(),
                Output::Ind => comps.ind.clone(),
                Output::Reflectance => comps.reflectance.clone(),
                Output::Visibility => visibility.clone().expect("checked above"),
                Output::Composite => compose_components(visibility.as_ref().expect("checked above"), &comps)?,
            };
            out.push((o, img));
        }
        Ok(out)
    }
}

/// Scales a sun direction to unit length.
pub fn normalize(d: [f64; 3]) -> Result<[f64; 3]> {
    let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !n.is_finite() || n < 1e-9 {
        return Err(Error::Invalid(format!("sun direction {d:?} has no length")));
    }
    Ok(d.map(|v| v / n))
}

/// Parses `"x,y,z"` into a direction.
pub fn parse_direction(s: &str) -> Result<[f64; 3]> {
    let v = parse_numbers(s)?;
    <[f64; 3]>::try_from(v.as_slice()).map_err(|_| Error::Invalid(format!("expected 3 numbers, got {:?}", s)))
}

pub fn parse_numbers(s: &str) -> Result<Vec<f64>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|e| Error::Invalid(format!("bad number {p:?}: {e}"))))
        .collect()
}
