//! Per-Gaussian shading decoders, component splatting and image formation.

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::mlp::Mlp;
use crate::raster::RenderPlan;
use crate::scene::{Camera, DecoderKind, EmbeddingSet, Gaussian, Scene, EMBEDDING_DIM};

/// Per-Gaussian decoded colors, each `gaussians × 3` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadingColors {
    pub reference: Vec<f64>,
    pub sun: Vec<f64>,
    pub sky: Vec<f64>,
    pub ind: Vec<f64>,
}

/// Splatted illumination components and reflectance.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub sun: ImagePlane,
    pub sky: ImagePlane,
    pub ind: ImagePlane,
    pub reflectance: ImagePlane,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sun {
    Direction([f64; 3]),
    Cloudy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Sun,
    Sky,
    Ind,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Sun, Component::Sky, Component::Ind];

    pub fn name(self) -> &'static str {
        match self {
            Component::Sun => "sun",
            Component::Sky => "sky",
            Component::Ind => "ind",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Row-major decoder input for every Gaussian: base color (indirect only),
/// then the feature, then the image embedding broadcast to all rows.
pub fn decoder_input(gaussians: &[Gaussian], kind: DecoderKind, emb: &EmbeddingSet) -> Vec<f64> {
    let (width, _, _, _) = kind.shape();
    let mut x = Vec::with_capacity(gaussians.len() * width);
    for g in gaussians {
        match kind {
            DecoderKind::Amb => {
                x.extend_from_slice(&g.f_amb);
                x.extend_from_slice(&emb.amb);
            }
            DecoderKind::Ref => x.extend_from_slice(&g.f_ref),
            DecoderKind::Sun => {
                x.extend_from_slice(&g.f_sun);
                x.extend_from_slice(&emb.sun);
            }
            DecoderKind::Sky => {
                x.extend_from_slice(&g.f_sky);
                x.extend_from_slice(&emb.sky);
            }
            DecoderKind::Ind => {
                x.extend_from_slice(&g.color);
                x.extend_from_slice(&g.f_ind);
                x.extend_from_slice(&emb.ind);
            }
            DecoderKind::Vis => panic!("visibility inputs depend on the sun direction"),
        }
    }
    x
}

fn decode(scene: &Scene, kind: DecoderKind, emb: &EmbeddingSet) -> Result<Vec<f64>> {
    let net: &Mlp = scene.decoders.get(kind);
    let (width, hidden, outputs, act) = kind.shape();
    net.check_shape(kind.name(), width, hidden, outputs, act)?;
    Ok(net.forward(&decoder_input(&scene.gaussians, kind, emb), scene.len()))
}

pub fn decode_colors(scene: &Scene, emb: &EmbeddingSet) -> Result<ShadingColors> {
    Ok(ShadingColors {
        reference: decode(scene, DecoderKind::Ref, emb)?,
        sun: decode(scene, DecoderKind::Sun, emb)?,
        sky: decode(scene, DecoderKind::Sky, emb)?,
        ind: decode(scene, DecoderKind::Ind, emb)?,
    })
}

/// Colors of the ambient-only model.
pub fn decode_ambient(scene: &Scene, emb: &EmbeddingSet) -> Result<Vec<f64>> {
    decode(scene, DecoderKind::Amb, emb)
}

pub fn render_components(scene: &Scene, camera: &Camera, emb: &EmbeddingSet) -> Result<Components> {
    render_components_with(&RenderPlan::for_camera(scene, camera), scene, emb)
}

pub fn render_components_with(plan: &RenderPlan, scene: &Scene, emb: &EmbeddingSet) -> Result<Components> {
    let colors = decode_colors(scene, emb)?;
    let bg = [0.0; 3];
    Ok(Components {
        sun: plan.composite(&colors.sun, 3, &bg)?,
        sky: plan.composite(&colors.sky, 3, &bg)?,
        ind: plan.composite(&colors.ind, 3, &bg)?,
        reflectance: plan.composite(&colors.reference, 3, &bg)?,
    })
}

pub fn render_ambient(scene: &Scene, camera: &Camera, emb: &EmbeddingSet) -> Result<ImagePlane> {
    render_ambient_with(&RenderPlan::for_camera(scene, camera), scene, emb)
}

pub fn render_ambient_with(plan: &RenderPlan, scene: &Scene, emb: &EmbeddingSet) -> Result<ImagePlane> {
    plan.composite(&decode_ambient(scene, emb)?, 3, &[0.0; 3])
}

/// `(V·S_sun + S_sky + S_ind)·R` per pixel and channel; `V` has one channel.
pub fn compose(
    v: &ImagePlane,
    sun: &ImagePlane,
    sky: &ImagePlane,
    ind: &ImagePlane,
    reflectance: &ImagePlane,
) -> Result<ImagePlane> {
    if v.channels() != 1 {
        return Err(Error::Shape(format!("visibility must have 1 channel, got {}", v.channels())));
    }
    v.check_size(sun, "visibility vs sun")?;
    sun.check_shape(sky, "sun vs sky")?;
    sun.check_shape(ind, "sun vs indirect")?;
    sun.check_shape(reflectance, "sun vs reflectance")?;
    let c = sun.channels();
    let mut out = ImagePlane::new(sun.width(), sun.height(), c);
    let (vs, ss, ks, is, rs) = (v.data(), sun.data(), sky.data(), ind.data(), reflectance.data());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o = (vs[i / c] * ss[i] + ks[i] + is[i]) * rs[i];
    }
    Ok(out)
}

pub fn compose_components(v: &ImagePlane, comps: &Components) -> Result<ImagePlane> {
    compose(v, &comps.sun, &comps.sky, &comps.ind, &comps.reflectance)
}

/// Blends the selected components of two embedding sets; the rest and the
/// sunny flag come from `a`.
pub fn interpolate_embeddings(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    t: f64,
    components: &[Component],
) -> Result<EmbeddingSet> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("interpolation factor {t} outside [0, 1]")));
    }
    let lerp = |x: &[f64; EMBEDDING_DIM], y: &[f64; EMBEDDING_DIM]| -> [f64; EMBEDDING_DIM] {
        std::array::from_fn(|i| (1.0 - t) * x[i] + t * y[i])
    };
    let mut out = a.clone();
    for c in components {
        match c {
            Component::Sun => out.sun = lerp(&a.sun, &b.sun),
            Component::Sky => out.sky = lerp(&a.sky, &b.sky),
            Component::Ind => out.ind = lerp(&a.ind, &b.ind),
        }
    }
    Ok(out)
}

/// Every output of one relighting pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub components: Components,
    pub visibility: ImagePlane,
    pub composite: ImagePlane,
}

/// Renders components, visibility and their composite from one projection.
pub fn render_frame(scene: &Scene, camera: &Camera, emb: &EmbeddingSet, sun: Sun) -> Result<Frame> {
    let plan = RenderPlan::for_camera(scene, camera);
    let components = render_components_with(&plan, scene, emb)?;
    let visibility = match sun {
        Sun::Cloudy => ImagePlane::new(camera.width, camera.height, 1),
        Sun::Direction(d) => {
            let cache = crate::shadow::BakeCache::from_scene(scene)?;
            crate::shadow::render_visibility_with(&plan, scene, &cache, d)?
        }
    };
    let composite = compose_components(&visibility, &components)?;
    Ok(Frame {
        components,
        visibility,
        composite,
    })
}

/// Final relit image; cloudy mode drops the sun term entirely.
pub fn relight(scene: &Scene, camera: &Camera, emb: &EmbeddingSet, sun: Sun) -> Result<ImagePlane> {
    Ok(render_frame(scene, camera, emb, sun)?.composite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Decoders;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plane(v: f64) -> ImagePlane {
        ImagePlane::filled(2, 2, 3, v)
    }

    #[test]
    fn compose_direct_cases() {
        let v1 = ImagePlane::filled(2, 2, 1, 1.0);
        let out = compose(&v1, &plane(0.5), &plane(0.3), &plane(0.1), &plane(1.0)).unwrap();
        assert!(out.data().iter().all(|&x| (x - 0.9).abs() < 1e-15));
        let v0 = ImagePlane::filled(2, 2, 1, 0.0);
        let out = compose(&v0, &plane(0.5), &plane(0.3), &plane(0.1), &plane(0.5)).unwrap();
        assert!(out.data().iter().all(|&x| x == (0.3 + 0.1) * 0.5));
        let out = compose(&v1, &plane(0.5), &plane(0.3), &plane(0.1), &plane(0.0)).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn compose_rejects_mismatch() {
        let v = ImagePlane::filled(3, 2, 1, 1.0);
        assert!(matches!(compose(&v, &plane(0.5), &plane(0.3), &plane(0.1), &plane(1.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_decoders_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Gaussian::new([0.0; 3], [0.1; 3], [1.0, 0.0, 0.0, 0.0], 1.0, [0.2; 3]);
        let scene = Scene::new(vec![g.clone(), g], Decoders::zeros());
        let c = decode_colors(&scene, &EmbeddingSet::random(true, 1.0, &mut rng)).unwrap();
        for v in [&c.reference, &c.sun, &c.sky, &c.ind] {
            assert!(v.iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn sun_embedding_only_moves_sun_colors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Gaussian::new([0.0; 3], [0.1; 3], [1.0, 0.0, 0.0, 0.0], 1.0, [0.2; 3]);
        g.f_sun[0] = 0.3;
        let scene = Scene::new(vec![g], Decoders::random(&mut rng));
        let a = EmbeddingSet::random(true, 1.0, &mut rng);
        let mut b = a.clone();
        b.sun[3] += 0.7;
        let (ca, cb) = (decode_colors(&scene, &a).unwrap(), decode_colors(&scene, &b).unwrap());
        assert_eq!(ca.reference, cb.reference);
        assert_eq!(ca.sky, cb.sky);
        assert_eq!(ca.ind, cb.ind);
        assert_ne!(ca.sun, cb.sun);
    }

    #[test]
    fn decoder_width_mismatch_names_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = Decoders::zeros();
        d.sky = Mlp::shading(49, &mut rng);
        let scene = Scene::new(Vec::new(), d);
        let err = decode_colors(&scene, &EmbeddingSet::zeros(true)).unwrap_err().to_string();
        assert!(err.contains("sky"), "{err}");
    }

    #[test]
    fn interpolation_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = EmbeddingSet::random(true, 1.0, &mut rng);
        let b = EmbeddingSet::random(false, 1.0, &mut rng);
        assert_eq!(interpolate_embeddings(&a, &b, 0.0, &Component::ALL).unwrap(), a);
        let one = interpolate_embeddings(&a, &b, 1.0, &Component::ALL).unwrap();
        assert_eq!((one.sun, one.sky, one.ind), (b.sun, b.sky, b.ind));
        let half = interpolate_embeddings(&a, &b, 0.5, &[Component::Sun]).unwrap();
        for i in 0..EMBEDDING_DIM {
            assert!((half.sun[i] - 0.5 * (a.sun[i] + b.sun[i])).abs() < 1e-15);
        }
        assert_eq!((half.sky, half.ind), (a.sky, a.ind));
        assert!(interpolate_embeddings(&a, &b, 1.5, &[]).is_err());
    }

    #[test]
    fn empty_scene_components_are_background() {
        let scene = Scene::new(Vec::new(), Decoders::zeros());
        let cam = Camera::look_at(Vector3::new(0.0, -3.0, 2.0), Vector3::zeros(), 8, 6, 8.0).unwrap();
        let c = render_components(&scene, &cam, &EmbeddingSet::zeros(true)).unwrap();
        for img in [&c.sun, &c.sky, &c.ind, &c.reflectance] {
            assert!(img.data().iter().all(|&v| v == 0.0));
        }
    }

    proptest::proptest! {
        #[test]
        fn compose_monotone_in_visibility(v in 0.0f64..1.0, dv in 0.0f64..1.0, s in 0.0f64..1.0,
                                          k in 0.0f64..1.0, r in 0.0f64..1.0) {
            let one = |x: f64| ImagePlane::filled(1, 1, 1, x);
            let lo = compose(&one(v), &one(s), &one(k), &one(0.1), &one(r)).unwrap();
            let hi = compose(&one((v + dv).min(1.0)), &one(s), &one(k), &one(0.1), &one(r)).unwrap();
            proptest::prop_assert!(hi.data()[0] >= lo.data()[0]);
        }

        #[test]
        fn interpolation_is_affine(t in 0.0f64..1.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = EmbeddingSet::random(true, 1.0, &mut rng);
            let b = EmbeddingSet::random(true, 1.0, &mut rng);
            let m = interpolate_embeddings(&a, &b, t, &Component::ALL).unwrap();
            for i in 0..EMBEDDING_DIM {
                proptest::prop_assert!((m.sky[i] - ((1.0 - t) * a.sky[i] + t * b.sky[i])).abs() < 1e-15);
            }
        }
    }
}
