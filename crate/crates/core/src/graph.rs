//! Records differentiable renders of a scene onto a [`Tape`].
//!
//! Tensors present in the [`ParamStore`] become trainable leaves; everything
//! else is read from the scene as a constant.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{EmbeddingKind, FeatureKind, ParamKey, ParamStore};
use crate::raster::RenderPlan;
use crate::scene::{DecoderKind, Scene};
use crate::mlp::Activation;

/// A render plan restricted to the Gaussians it touches.
#[derive(Clone, Debug)]
pub struct SubPlan {
    pub plan: Arc<RenderPlan>,
    /// Original index of each compact source.
    pub rows: Arc<[usize]>,
}

impl SubPlan {
    pub fn new(plan: &RenderPlan) -> Self {
        let (plan, rows) = plan.compact();
        Self {
            plan: Arc::new(plan),
            rows: Arc::from(rows),
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.plan.pixel_count()
    }

    pub fn width(&self) -> usize {
        self.plan.width
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ComponentVars {
    pub sun: Var,
    pub sky: Var,
    pub ind: Var,
    pub reflectance: Var,
}

pub struct Recorder<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    scene: &'a Scene,
    cache: BTreeMap<ParamKey, Var>,
}

impl<'a> Recorder<'a> {
    pub fn new(scene: &'a Scene, store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            scene,
            cache: BTreeMap::new(),
        }
    }

    pub fn var(&mut self, key: ParamKey) -> Result<Var> {
        if let Some(&v) = self.cache.get(&key) {
            return Ok(v);
        }
        let v = match self.store.id(key) {
            Some(id) => {
                let (r, c) = self.store.shape(id);
                self.tape.param(id, r, c, self.store.value(id).to_vec())
            }
            None => {
                let (value, r, c) = key.read(self.scene)?;
                self.tape.constant(r, c, value)
            }
        };
        self.cache.insert(key, v);
        Ok(v)
    }

    fn rows_of(&mut self, key: ParamKey, rows: &Arc<[usize]>) -> Result<Var> {
        let full = self.var(key)?;
        Ok(self.tape.gather(full, rows.clone()))
    }

    fn constant_rows<const N: usize>(&mut self, rows: &[usize], f: impl Fn(usize) -> [f64; N]) -> Var {
        let mut v = Vec::with_capacity(rows.len() * N);
        for &r in rows {
            v.extend_from_slice(&f(r));
        }
        self.tape.constant(rows.len(), N, v)
    }

    pub fn decoder(&mut self, kind: DecoderKind, input: Var) -> Result<Var> {
        let mut x = input;
        let layers = self.scene.decoders.get(kind).layers.len();
        let act = self.scene.decoders.get(kind).output;
        for l in 0..layers {
            let w = self.var(ParamKey::Weight(kind, l))?;
            let b = self.var(ParamKey::Bias(kind, l))?;
            let y = self.tape.linear(x, w, b)?;
            x = if l + 1 < layers {
                self.tape.relu(y)
            } else {
                match act {
                    Activation::Sigmoid => self.tape.sigmoid(y),
                    Activation::Tanh => self.tape.tanh(y),
                }
            };
        }
        Ok(x)
    }

    fn shading_input(&mut self, kind: FeatureKind, image: usize, emb: EmbeddingKind, rows: &Arc<[usize]>) -> Result<Var> {
        let f = self.rows_of(ParamKey::Features(kind), rows)?;
        let e = self.var(ParamKey::Embedding(image, emb))?;
        self.tape.concat(&[f, e])
    }

    /// Splatted sun, sky, indirect shading and reflectance for one image.
    pub fn components(&mut self, image: usize, sub: &SubPlan) -> Result<ComponentVars> {
        let bg = [0.0; 3];
        let rows = sub.rows.clone();

        let f_ref = self.rows_of(ParamKey::Features(FeatureKind::Ref), &rows)?;
        let c_ref = self.decoder(DecoderKind::Ref, f_ref)?;
        let reflectance = self.tape.composite(c_ref, sub.plan.clone(), &bg)?;

        let x = self.shading_input(FeatureKind::Sun, image, EmbeddingKind::Sun, &rows)?;
        let c_sun = self.decoder(DecoderKind::Sun, x)?;
        let sun = self.tape.composite(c_sun, sub.plan.clone(), &bg)?;

        let x = self.shading_input(FeatureKind::Sky, image, EmbeddingKind::Sky, &rows)?;
        let c_sky = self.decoder(DecoderKind::Sky, x)?;
        let sky = self.tape.composite(c_sky, sub.plan.clone(), &bg)?;

        let gs = &self.scene.gaussians;
        let base = self.constant_rows(&rows, |r| gs[r].color);
        let f_ind = self.rows_of(ParamKey::Features(FeatureKind::Ind), &rows)?;
        let e_ind = self.var(ParamKey::Embedding(image, EmbeddingKind::Ind))?;
        let x = self.tape.concat(&[base, f_ind, e_ind])?;
        let c_ind = self.decoder(DecoderKind::Ind, x)?;
        let ind = self.tape.composite(c_ind, sub.plan.clone(), &bg)?;

        Ok(ComponentVars {
            sun,
            sky,
            ind,
            reflectance,
        })
    }

    /// `(V·S_sun + S_sky + S_ind)·R`.
    pub fn compose(&mut self, v: Var, c: &ComponentVars) -> Result<Var> {
        let lit = self.tape.mul(v, c.sun)?;
        let a = self.tape.add(lit, c.sky)?;
        let b = self.tape.add(a, c.ind)?;
        self.tape.mul(b, c.reflectance)
    }

    /// Ambient-only render.
    pub fn ambient(&mut self, image: usize, sub: &SubPlan) -> Result<Var> {
        let x = self.shading_input(FeatureKind::Amb, image, EmbeddingKind::Amb, &sub.rows)?;
        let c = self.decoder(DecoderKind::Amb, x)?;
        self.tape.composite(c, sub.plan.clone(), &[0.0; 3])
    }

    /// Splatted semantic probabilities over an all-sky background.
    pub fn sky_mask(&mut self, sub: &SubPlan) -> Result<Var> {
        let z = self.rows_of(ParamKey::SkyLogits, &sub.rows)?;
        let o = self.tape.sigmoid(z);
        self.tape.composite(o, sub.plan.clone(), &[1.0])
    }

    /// Baked visibility for `direction`, with `sky_pin` pixels forced to one.
    pub fn visibility(&mut self, sub: &SubPlan, direction: [f64; 3], sky_pin: Arc<[f64]>) -> Result<Var> {
        let rows = sub.rows.clone();
        let f = self.rows_of(ParamKey::Features(FeatureKind::Vis), &rows)?;
        let gs = &self.scene.gaussians;
        let p = self.constant_rows(&rows, |r| gs[r].position);
        let d = self.tape.constant(1, 3, direction.to_vec());
        let x = self.tape.concat(&[f, p, d])?;
        let v = self.decoder(DecoderKind::Vis, x)?;
        let mapped = self.tape.affine(v, 0.5, 0.5);
        let img = self.tape.composite(mapped, sub.plan.clone(), &[1.0])?;
        self.tape.pin(img, sky_pin)
    }
}
