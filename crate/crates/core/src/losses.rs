//! Training objectives, evaluated directly on images.
//!
//! Every norm is a mean over the masked entries so loss weights do not
//! depend on resolution. The differentiable versions live on
//! [`crate::autodiff::Tape`] and share these conventions.

use std::sync::Arc;

use crate::autodiff::{scl_eval, Tape, Var, BCE_EPS};
use crate::error::{Error, Result};
use crate::image::ImagePlane;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1_sun: f64,
    pub l1_sky: f64,
    pub l1_ind: f64,
    pub sc_sun: f64,
    pub sc_sky: f64,
    pub sc_ind: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1_sun: 1.0,
            l1_sky: 10.0,
            l1_ind: 10.0,
            sc_sun: 0.1,
            sc_sky: 5.0,
            sc_ind: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1_sun, self.l1_sky, self.l1_ind, self.sc_sun, self.sc_sky, self.sc_ind];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionLosses {
    pub sun: f64,
    pub sky: f64,
    pub ind: f64,
}

fn mask_of(mask: &ImagePlane, img: &ImagePlane, what: &str) -> Result<()> {
    if mask.channels() != 1 {
        return Err(Error::Shape(format!("{what}: mask must have 1 channel")));
    }
    mask.check_size(img, what)
}

/// Mean of `|a − b|` over masked pixels and channels; an empty mask gives 0.
pub fn l1_masked(a: &ImagePlane, b: &ImagePlane, mask: &ImagePlane) -> Result<f64> {
    a.check_shape(b, "l1_masked")?;
    mask_of(mask, a, "l1_masked")?;
    let c = a.channels();
    let (mut sum, mut count) = (0.0, 0.0);
    for (p, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        count += c as f64;
        for k in 0..c {
            sum += m * (a.data()[p * c + k] - b.data()[p * c + k]).abs();
        }
    }
    Ok(if count > 0.0 { sum / count } else { 0.0 })
}

/// Complement of both the sunlit and sky regions.
pub fn indirect_mask(v: &ImagePlane, sky: &ImagePlane) -> Result<ImagePlane> {
    v.check_shape(sky, "indirect mask")?;
    let data = v.data().iter().zip(sky.data()).map(|(v, s)| (1.0 - v) * (1.0 - s)).collect();
    ImagePlane::from_vec(v.width(), v.height(), 1, data)
}

pub fn complement(mask: &ImagePlane) -> ImagePlane {
    mask.map(|m| 1.0 - m)
}

fn product(a: &ImagePlane, b: &ImagePlane) -> Result<ImagePlane> {
    a.check_shape(b, "product")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    ImagePlane::from_vec(a.width(), a.height(), a.channels(), data)
}

fn sum(a: &ImagePlane, b: &ImagePlane) -> Result<ImagePlane> {
    a.check_shape(b, "sum")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    ImagePlane::from_vec(a.width(), a.height(), a.channels(), data)
}

/// Weighted losses on the sunlit, sky and indirect-only regions.
#[allow(clippy::too_many_arguments)]
pub fn region_losses(
    composite: &ImagePlane,
    sky: &ImagePlane,
    ind: &ImagePlane,
    reflectance: &ImagePlane,
    target: &ImagePlane,
    v: &ImagePlane,
    sky_mask: &ImagePlane,
    w: &LossWeights,
) -> Result<RegionLosses> {
    let m_ind = indirect_mask(v, sky_mask)?;
    Ok(RegionLosses {
        sun: w.l1_sun * l1_masked(composite, target, v)?,
        sky: w.l1_sky * l1_masked(&product(sky, reflectance)?, target, sky_mask)?,
        ind: w.l1_ind * l1_masked(&product(&sum(sky, ind)?, reflectance)?, target, &m_ind)?,
    })
}

/// Mean `|∇S − ∇R|` over forward differences inside the mask.
pub fn scl(s: &ImagePlane, r: &ImagePlane, mask: &ImagePlane) -> Result<f64> {
    s.check_shape(r, "scl")?;
    mask_of(mask, s, "scl")?;
    let (total, count) = scl_eval(s.data(), r.data(), mask.data(), s.width(), s.height(), s.channels(), None);
    Ok(if count > 0.0 { total / count } else { 0.0 })
}

/// `Σ λᵢ·scl(Sᵢ, R, 1 − M_sky)` over sun, sky and indirect.
pub fn scl_total(
    sun: &ImagePlane,
    sky: &ImagePlane,
    ind: &ImagePlane,
    reflectance: &ImagePlane,
    sky_mask: &ImagePlane,
    w: &LossWeights,
) -> Result<f64> {
    let m = complement(sky_mask);
    Ok(w.sc_sun * scl(sun, reflectance, &m)? + w.sc_sky * scl(sky, reflectance, &m)? + w.sc_ind * scl(ind, reflectance, &m)?)
}

/// Mean squared visibility error over non-sky pixels.
pub fn vis_loss(v: &ImagePlane, v_rt: &ImagePlane, sky_mask: &ImagePlane) -> Result<f64> {
    v.check_shape(v_rt, "vis_loss")?;
    mask_of(sky_mask, v, "vis_loss")?;
    let (mut sum, mut count) = (0.0, 0.0);
    for (p, &s) in sky_mask.data().iter().enumerate() {
        let m = 1.0 - s;
        if m == 0.0 {
            continue;
        }
        for k in 0..v.channels() {
            let i = p * v.channels() + k;
            sum += m * (v.data()[i] - v_rt.data()[i]).powi(2);
            count += 1.0;
        }
    }
    Ok(if count > 0.0 { sum / count } else { 0.0 })
}

/// Mean binary cross-entropy of the rendered sky mask.
pub fn sem_loss(predicted: &ImagePlane, target: &ImagePlane) -> Result<f64> {
    predicted.check_shape(target, "sem_loss")?;
    let n = predicted.data().len() as f64;
    if n == 0.0 {
        return Ok(0.0);
    }
    let total: f64 = predicted
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
        })
        .sum();
    Ok(total / n)
}

/// Masked L1 of the ambient-only render, excluding coarse sunlit pixels.
pub fn amb_loss(ambient: &ImagePlane, target: &ImagePlane, coarse: &ImagePlane) -> Result<f64> {
    l1_masked(ambient, target, &complement(coarse))
}

pub(crate) fn mask_arc(mask: &ImagePlane) -> Arc<[f64]> {
    Arc::from(mask.data())
}

pub(crate) fn image_const(tape: &mut Tape, img: &ImagePlane) -> Var {
    tape.constant(img.pixel_count(), img.channels(), img.data().to_vec())
}

/// Differentiable region losses; returns `(sun, sky, ind)` weighted terms.
#[allow(clippy::too_many_arguments)]
pub fn record_region_losses(
    tape: &mut Tape,
    composite: Var,
    sky: Var,
    ind: Var,
    reflectance: Var,
    target: Var,
    v: &ImagePlane,
    sky_mask: &ImagePlane,
    w: &LossWeights,
) -> Result<[(Var, f64); 3]> {
    let m_ind = indirect_mask(v, sky_mask)?;
    let l_sun = tape.l1_masked(composite, target, mask_arc(v))?;
    let sky_r = tape.mul(sky, reflectance)?;
    let l_sky = tape.l1_masked(sky_r, target, mask_arc(sky_mask))?;
    let si = tape.add(sky, ind)?;
    let si_r = tape.mul(si, reflectance)?;
    let l_ind = tape.l1_masked(si_r, target, mask_arc(&m_ind))?;
    Ok([(l_sun, w.l1_sun), (l_sky, w.l1_sky), (l_ind, w.l1_ind)])
}

/// Differentiable structural consistency terms `(sun, sky, ind)`.
pub fn record_scl_total(
    tape: &mut Tape,
    sun: Var,
    sky: Var,
    ind: Var,
    reflectance: Var,
    sky_mask: &ImagePlane,
    w: &LossWeights,
) -> Result<[(Var, f64); 3]> {
    let m = mask_arc(&complement(sky_mask));
    let width = sky_mask.width();
    Ok([
        (tape.scl(sun, reflectance, m.clone(), width)?, w.sc_sun),
        (tape.scl(sky, reflectance, m.clone(), width)?, w.sc_sky),
        (tape.scl(ind, reflectance, m, width)?, w.sc_ind),
    ])
}
