//! Trainable tensors of a scene, addressed by [`ParamKey`].

use std::collections::BTreeMap;

use crate::autodiff::ParamId;
use crate::error::{Error, Result};
use crate::mlp::sigmoid;
use crate::scene::{DecoderKind, Scene, EMBEDDING_DIM, FEATURE_DIM, VIS_FEATURE_DIM};

/// Sky semantics are optimized as logits of the clamped semantic.
pub const SKY_LOGIT_CLAMP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureKind {
    Ref,
    Sun,
    Sky,
    Ind,
    Amb,
    Vis,
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        if self == FeatureKind::Vis {
            VIS_FEATURE_DIM
        } else {
            FEATURE_DIM
        }
    }

    fn read(self, g: &crate::scene::Gaussian) -> &[f64] {
        match self {
            FeatureKind::Ref => &g.f_ref,
            FeatureKind::Sun => &g.f_sun,
            FeatureKind::Sky => &g.f_sky,
            FeatureKind::Ind => &g.f_ind,
            FeatureKind::Amb => &g.f_amb,
            FeatureKind::Vis => &g.f_vis,
        }
    }

    fn write(self, g: &mut crate::scene::Gaussian) -> &mut [f64] {
        match self {
            FeatureKind::Ref => &mut g.f_ref,
            FeatureKind::Sun => &mut g.f_sun,
            FeatureKind::Sky => &mut g.f_sky,
            FeatureKind::Ind => &mut g.f_ind,
            FeatureKind::Amb => &mut g.f_amb,
            FeatureKind::Vis => &mut g.f_vis,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EmbeddingKind {
    Amb,
    Sun,
    Sky,
    Ind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    Weight(DecoderKind, usize),
    Bias(DecoderKind, usize),
    Features(FeatureKind),
    SkyLogits,
    Embedding(usize, EmbeddingKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Features,
    VisFeatures,
    Network,
    Embedding,
}

impl ParamKey {
    pub fn group(self) -> ParamGroup {
        match self {
            ParamKey::Weight(..) | ParamKey::Bias(..) => ParamGroup::Network,
            ParamKey::Features(FeatureKind::Vis) => ParamGroup::VisFeatures,
            ParamKey::Features(_) | ParamKey::SkyLogits => ParamGroup::Features,
            ParamKey::Embedding(..) => ParamGroup::Embedding,
        }
    }

    /// Weight and bias keys of every layer of a decoder.
    pub fn decoder(kind: DecoderKind) -> Vec<ParamKey> {
        (0..4).flat_map(|l| [ParamKey::Weight(kind, l), ParamKey::Bias(kind, l)]).collect()
    }

    /// Reads the current value and `(rows, cols)` shape from a scene.
    pub fn read(self, scene: &Scene) -> Result<(Vec<f64>, usize, usize)> {
        let layer = |kind: DecoderKind, l: usize| {
            scene
                .decoders
                .get(kind)
                .layers
                .get(l)
                .ok_or_else(|| Error::Invalid(format!("decoder {} has no layer {l}", kind.name())))
        };
        Ok(match self {
            ParamKey::Weight(kind, l) => {
                let layer = layer(kind, l)?;
                (layer.weight.clone(), layer.outputs, layer.inputs)
            }
            ParamKey::Bias(kind, l) => {
                let layer = layer(kind, l)?;
                (layer.bias.clone(), 1, layer.outputs)
            }
            ParamKey::Features(kind) => {
                let mut v = Vec::with_capacity(scene.len() * kind.dim());
                for g in &scene.gaussians {
                    v.extend_from_slice(kind.read(g));
                }
                (v, scene.len(), kind.dim())
            }
            ParamKey::SkyLogits => {
                let v = scene
                    .gaussians
                    .iter()
                    .map(|g| {
                        let o = g.sky_semantic.clamp(SKY_LOGIT_CLAMP, 1.0 - SKY_LOGIT_CLAMP);
                        (o / (1.0 - o)).ln()
                    })
                    .collect();
                (v, scene.len(), 1)
            }
            ParamKey::Embedding(image, kind) => {
                let e = scene.embedding(image)?;
                let v = match kind {
                    EmbeddingKind::Amb => e.amb,
                    EmbeddingKind::Sun => e.sun,
                    EmbeddingKind::Sky => e.sky,
                    EmbeddingKind::Ind => e.ind,
                };
                (v.to_vec(), 1, EMBEDDING_DIM)
            }
        })
    }

    pub fn write(self, scene: &mut Scene, value: &[f64]) {
        match self {
            ParamKey::Weight(kind, l) => scene.decoders.get_mut(kind).layers[l].weight.copy_from_slice(value),
            ParamKey::Bias(kind, l) => scene.decoders.get_mut(kind).layers[l].bias.copy_from_slice(value),
            ParamKey::Features(kind) => {
                let d = kind.dim();
                for (g, chunk) in scene.gaussians.iter_mut().zip(value.chunks_exact(d)) {
                    kind.write(g).copy_from_slice(chunk);
                }
            }
            ParamKey::SkyLogits => {
                for (g, &z) in scene.gaussians.iter_mut().zip(value) {
                    g.sky_semantic = sigmoid(z);
                }
            }
            ParamKey::Embedding(image, kind) => {
                let e = &mut scene.embeddings[image];
                let dst = match kind {
                    EmbeddingKind::Amb => &mut e.amb,
                    EmbeddingKind::Sun => &mut e.sun,
                    EmbeddingKind::Sky => &mut e.sky,
                    EmbeddingKind::Ind => &mut e.ind,
                };
                dst.copy_from_slice(value);
            }
        }
    }
}

/// Working copy of the tensors being optimized.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    keys: Vec<ParamKey>,
    lookup: BTreeMap<ParamKey, ParamId>,
    values: Vec<Vec<f64>>,
    shapes: Vec<(usize, usize)>,
}

impl ParamStore {
    pub fn gather(scene: &Scene, keys: impl IntoIterator<Item = ParamKey>) -> Result<Self> {
        let mut store = Self::default();
        for key in keys {
            if store.lookup.contains_key(&key) {
                continue;
            }
            let (v, r, c) = key.read(scene)?;
            store.lookup.insert(key, store.keys.len());
            store.keys.push(key);
            store.values.push(v);
            store.shapes.push((r, c));
        }
        Ok(store)
    }

    pub fn scatter(&self, scene: &mut Scene) {
        for (key, v) in self.keys.iter().zip(&self.values) {
            key.write(scene, v);
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn id(&self, key: ParamKey) -> Option<ParamId> {
        self.lookup.get(&key).copied()
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        self.keys[id]
    }

    pub fn keys(&self) -> &[ParamKey] {
        &self.keys
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id]
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        self.shapes[id]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Decoders, EmbeddingSet, Gaussian};
    use rand::SeedableRng;

    #[test]
    fn gather_scatter_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut g = Gaussian::new([0.0; 3], [0.1; 3], [1.0, 0.0, 0.0, 0.0], 1.0, [0.2; 3]);
        g.f_sun[2] = 0.7;
        g.sky_semantic = 0.25;
        let mut scene = Scene::new(vec![g], Decoders::random(&mut rng));
        scene.embeddings.push(EmbeddingSet::random(true, 1.0, &mut rng));
        let mut keys = ParamKey::decoder(DecoderKind::Sun);
        keys.extend([
            ParamKey::Features(FeatureKind::Sun),
            ParamKey::SkyLogits,
            ParamKey::Embedding(0, EmbeddingKind::Sky),
        ]);
        let mut store = ParamStore::gather(&scene, keys).unwrap();
        assert_eq!(store.shape(store.id(ParamKey::Weight(DecoderKind::Sun, 0)).unwrap()), (64, 50));
        let before = scene.clone();
        store.scatter(&mut scene);
        assert_eq!(scene.decoders, before.decoders);
        assert!((scene.gaussians[0].sky_semantic - 0.25).abs() < 1e-15);
        let id = store.id(ParamKey::Features(FeatureKind::Sun)).unwrap();
        store.value_mut(id)[2] = -0.1;
        store.scatter(&mut scene);
        assert_eq!(scene.gaussians[0].f_sun[2], -0.1);
    }
}
