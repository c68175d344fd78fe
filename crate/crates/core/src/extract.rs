//! Sun-visibility extraction from images and the ambient-only residual.

use crate::error::Result;
use crate::image::ImagePlane;
use crate::raster::RenderPlan;
use crate::scene::{Camera, EmbeddingSet, Scene};
use crate::shading::render_ambient_with;

/// Brightness gamma transform `max(β·V − ε, 0)^γ` and its threshold.
pub const GAMMA_BETA: f64 = 1.0 / 255.0;
pub const GAMMA_EPS: f64 = 0.1;
pub const GAMMA: f64 = 1.5;
pub const BRIGHTNESS_THRESHOLD: f64 = 0.3;
pub const DISPARITY_THRESHOLD: f64 = 0.1;

pub const MAX_ITERATIONS: usize = 100;
pub const CONVERGENCE: f64 = 1e-6;
/// Sunny images whose centroids are closer than this carry no visible sun.
pub const MIN_SEPARATION: f64 = 1e-4;

/// Gamma-transformed HSV value channel for an RGB sample in [0, 1].
pub fn gamma_value(rgb: &[f64]) -> f64 {
    let v = rgb.iter().fold(0.0f64, |m, &c| m.max(c)) * 255.0;
    (GAMMA_BETA * v - GAMMA_EPS).max(0.0).powf(GAMMA)
}

/// Bright-pixel mask; cloudy images have no sunlit pixels.
pub fn coarse_visibility(image: &ImagePlane, sunny: bool) -> ImagePlane {
    let mut out = ImagePlane::new(image.width(), image.height(), 1);
    if !sunny {
        return out;
    }
    for (p, o) in out.data_mut().iter_mut().enumerate() {
        *o = if gamma_value(image.pixel(p)) > BRIGHTNESS_THRESHOLD { 1.0 } else { 0.0 };
    }
    out
}

pub fn sky_mask_from_disparity(disparity: &ImagePlane) -> ImagePlane {
    disparity.channel(0).map(|d| if d < DISPARITY_THRESHOLD { 1.0 } else { 0.0 })
}

/// Channel mean of `|I − Î_amb|`.
pub fn ambient_residual(truth: &ImagePlane, ambient: &ImagePlane) -> Result<ImagePlane> {
    truth.check_shape(ambient, "ambient residual")?;
    let c = truth.channels();
    let data = (0..truth.pixel_count())
        .map(|p| {
            let (a, b) = (truth.pixel(p), ambient.pixel(p));
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / c as f64
        })
        .collect();
    ImagePlane::from_vec(truth.width(), truth.height(), 1, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    /// Larger (sunlit) centroid.
    pub mu1: f64,
    pub mu2: f64,
    pub assignments: ImagePlane,
    pub iterations: usize,
    pub degenerate: bool,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss: Vec<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Lloyd's algorithm with two scalar centroids over the pixels in `region`.
pub fn two_means(residual: &ImagePlane, region: Option<&ImagePlane>) -> Result<ClusterResult> {
    if let Some(r) = region {
        r.check_shape(&residual.channel(0), "cluster region")?;
    }
    let r = residual.channel(0);
    let inside: Vec<usize> = (0..r.pixel_count()).filter(|&p| region.is_none_or(|m| m.data()[p] != 0.0)).collect();
    let values: Vec<f64> = inside.iter().map(|&p| r.data()[p]).collect();
    let degenerate = |iterations, wcss| ClusterResult {
        mu1: 0.0,
        mu2: 0.0,
        assignments: ImagePlane::new(r.width(), r.height(), 1),
        iterations,
        degenerate: true,
        wcss,
    };
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() || sorted[0] == sorted[sorted.len() - 1] {
        return Ok(degenerate(0, Vec::new()));
    }
    let (mut hi, mut lo) = (percentile(&sorted, 0.75), percentile(&sorted, 0.25));
    if hi == lo {
        // heavy ties at the quartiles; fall back to the extremes
        hi = sorted[sorted.len() - 1];
        lo = sorted[0];
    }
    let mut labels = vec![false; values.len()];
    let mut wcss = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (mut s1, mut n1, mut s0, mut n0, mut cost) = (0.0, 0usize, 0.0, 0usize, 0.0);
        for (l, &x) in labels.iter_mut().zip(&values) {
            let (d1, d0) = ((x - hi).powi(2), (x - lo).powi(2));
            *l = d1 < d0;
            if *l {
                s1 += x;
                n1 += 1;
                cost += d1;
            } else {
                s0 += x;
                n0 += 1;
                cost += d0;
            }
        }
        wcss.push(cost);
        let new_hi = if n1 > 0 { s1 / n1 as f64 } else { hi };
        let new_lo = if n0 > 0 { s0 / n0 as f64 } else { lo };
        let moved = (new_hi - hi).abs().max((new_lo - lo).abs());
        hi = new_hi;
        lo = new_lo;
        if moved < CONVERGENCE {
            break;
        }
    }
    // final assignment against the converged centroids
    let mut cost = 0.0;
    for (l, &x) in labels.iter_mut().zip(&values) {
        let (d1, d0) = ((x - hi).powi(2), (x - lo).powi(2));
        *l = d1 < d0;
        cost += d1.min(d0);
    }
    wcss.push(cost);
    let (mu1, mu2) = if hi >= lo { (hi, lo) } else { (lo, hi) };
    let flip = hi < lo;
    if mu1 - mu2 < MIN_SEPARATION {
        return Ok(degenerate(iterations, wcss));
    }
    let mut assignments = ImagePlane::new(r.width(), r.height(), 1);
    for (&p, &l) in inside.iter().zip(&labels) {
        assignments.data_mut()[p] = if l != flip { 1.0 } else { 0.0 };
    }
    Ok(ClusterResult {
        mu1,
        mu2,
        assignments,
        iterations,
        degenerate: false,
        wcss,
    })
}

/// Refined visibility of one training image from the fitted ambient model.
pub fn extract_visibility(
    scene: &Scene,
    camera: &Camera,
    emb: &EmbeddingSet,
    truth: &ImagePlane,
    sky_mask: &ImagePlane,
) -> Result<ImagePlane> {
    if !emb.sunny {
        return Ok(ImagePlane::new(truth.width(), truth.height(), 1));
    }
    let plan = RenderPlan::for_camera(scene, camera);
    let ambient = render_ambient_with(&plan, scene, emb)?;
    let residual = ambient_residual(truth, &ambient)?;
    let ground = crate::losses::complement(sky_mask);
    Ok(two_means(&residual, Some(&ground))?.assignments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn row(v: &[f64]) -> ImagePlane {
        ImagePlane::from_vec(v.len(), 1, 1, v.to_vec()).unwrap()
    }

    #[test]
    fn gamma_transform_examples() {
        assert!((gamma_value(&[1.0, 0.2, 0.0]) - 0.9f64.powf(1.5)).abs() < 1e-12);
        assert_eq!(gamma_value(&[0.1, 0.05, 0.0]), 0.0);
        let img = ImagePlane::from_vec(2, 1, 3, vec![1.0, 1.0, 1.0, 0.1, 0.1, 0.1]).unwrap();
        assert_eq!(coarse_visibility(&img, true).data(), &[1.0, 0.0]);
        assert_eq!(coarse_visibility(&img, false).data(), &[0.0, 0.0]);
    }

    #[test]
    fn disparity_threshold() {
        assert_eq!(sky_mask_from_disparity(&row(&[0.05, 0.5, 0.1])).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn residual_examples() {
        let a = ImagePlane::filled(1, 1, 3, 1.0);
        let b = ImagePlane::filled(1, 1, 3, 0.4);
        assert!((ambient_residual(&a, &b).unwrap().data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(ambient_residual(&a, &a).unwrap().data()[0], 0.0);
        assert_eq!(ambient_residual(&a, &b).unwrap(), ambient_residual(&b, &a).unwrap());
    }

    #[test]
    fn separable_clusters() {
        let c = two_means(&row(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]), None).unwrap();
        assert_eq!(c.assignments.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!((c.mu1, c.mu2), (1.0, 0.0));
    }

    #[test]
    fn constant_is_degenerate() {
        let c = two_means(&row(&[0.3; 8]), None).unwrap();
        assert!(c.degenerate && c.assignments.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn region_excludes_pixels() {
        let c = two_means(&row(&[0.0, 1.0, 0.0, 1.0]), Some(&row(&[1.0, 1.0, 1.0, 0.0]))).unwrap();
        assert_eq!(c.assignments.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mixture_labels_recovered() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (a, b) = (Normal::new(0.1, 0.05).unwrap(), Normal::new(0.6, 0.05).unwrap());
        let mut vals = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10_000 {
            let sunlit = i % 3 == 0;
            vals.push(if sunlit { b.sample(&mut rng) } else { a.sample(&mut rng) });
            labels.push(sunlit);
        }
        let c = two_means(&row(&vals), None).unwrap();
        let agree = c.assignments.data().iter().zip(&labels).filter(|(m, &l)| (**m == 1.0) == l).count();
        assert!(agree as f64 / 10_000.0 >= 0.99);
        assert!(c.wcss.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0]));
    }

    proptest::proptest! {
        #[test]
        fn affine_rescaling_preserves_assignment(vals in proptest::collection::vec(0.0f64..1.0, 2..60),
                                                 scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let base = two_means(&row(&vals), None).unwrap();
            let moved: Vec<f64> = vals.iter().map(|v| v * scale + shift).collect();
            let other = two_means(&row(&moved), None).unwrap();
            proptest::prop_assert_eq!(base.degenerate, other.degenerate);
            proptest::prop_assert_eq!(base.assignments, other.assignments);
        }

        #[test]
        fn coarse_visibility_is_monotone(r in 0.0f64..1.0, g in 0.0f64..1.0, b in 0.0f64..1.0, k in 1.0f64..3.0) {
            let dim = ImagePlane::from_vec(1, 1, 3, vec![r, g, b]).unwrap();
            let bright = dim.map(|v| (v * k).min(1.0));
            proptest::prop_assert!(coarse_visibility(&bright, true).data()[0] >= coarse_visibility(&dim, true).data()[0]);
        }
    }
}
