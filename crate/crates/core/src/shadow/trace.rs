//! Transmittance along rays through Gaussians.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scene::{gaussian_normal, Scene};

/// Occluders whose peak opacity along the ray falls below this are ignored.
pub const MIN_OCCLUDER_ALPHA: f64 = 0.01;
/// Hits closer than this to the ray origin are ignored.
pub const SELF_HIT_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self> {
        check_direction(&direction)?;
        Ok(Self { origin, direction })
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

pub fn check_direction(d: &Vector3<f64>) -> Result<()> {
    if !d.iter().all(|v| v.is_finite()) || (d.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("direction {d:?} is not unit length")));
    }
    if d.z < 0.0 {
        return Err(Error::Invalid(format!("direction {d:?} points below the horizon")));
    }
    Ok(())
}

/// Per-Gaussian data needed for ray queries.
#[derive(Clone, Debug)]
pub(crate) struct Occluder {
    pub mean: Vector3<f64>,
    pub precision: Matrix3<f64>,
    pub normal: Vector3<f64>,
    pub opacity: f64,
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
}

impl Occluder {
    pub fn new(g: &crate::scene::Gaussian) -> Self {
        let mean = g.position_vec();
        let cov = g.covariance();
        // beyond this Mahalanobis radius the effective opacity is below the cutoff
        let reach = if g.opacity > MIN_OCCLUDER_ALPHA {
            (2.0 * (g.opacity / MIN_OCCLUDER_ALPHA).ln()).sqrt()
        } else {
            0.0
        };
        let half = Vector3::new(cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt(), cov[(2, 2)].sqrt()) * reach;
        let margin = Vector3::repeat(1e-9 * (1.0 + mean.abs().max()));
        Self {
            mean,
            precision: g.precision(),
            normal: gaussian_normal(g),
            opacity: g.opacity,
            lo: mean - half - margin,
            hi: mean + half + margin,
        }
    }

    /// Ray parameter of peak density and the effective opacity there.
    #[inline]
    pub fn hit(&self, ray: &Ray) -> Option<(f64, f64)> {
        let pd = self.precision * ray.direction;
        let denom = ray.direction.dot(&pd);
        if !(denom > 0.0) {
            return None;
        }
        let t = pd.dot(&(self.mean - ray.origin)) / denom;
        if !(t > SELF_HIT_EPS) {
            return None;
        }
        let delta = ray.at(t) - self.mean;
        let a = self.opacity * (-0.5 * delta.dot(&(self.precision * delta))).exp();
        if a >= MIN_OCCLUDER_ALPHA {
            Some((t, a))
        } else {
            None
        }
    }
}

/// `T ← (1 − a)·T·|n·d|` over `(t, a, index)` hits sorted by `(t, index)`.
fn transmittance(hits: &mut [(f64, f64, usize)], occluders: &[Occluder], d: &Vector3<f64>) -> f64 {
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
    let mut t = 1.0;
    for &(_, a, j) in hits.iter() {
        t *= (1.0 - a) * occluders[j].normal.dot(d).abs();
    }
    t
}

/// Reference tracer testing every occluder.
pub struct BruteForceTracer {
    occluders: Vec<Occluder>,
    /// Scene index of each occluder.
    ids: Vec<usize>,
}

impl BruteForceTracer {
    pub fn new(scene: &Scene, set: &[usize]) -> Self {
        Self {
            occluders: set.iter().map(|&i| Occluder::new(&scene.gaussians[i])).collect(),
            ids: set.to_vec(),
        }
    }

    pub fn trace(&self, ray: &Ray, exclude: Option<usize>) -> f64 {
        let mut hits = Vec::new();
        for (j, o) in self.occluders.iter().enumerate() {
            if Some(self.ids[j]) == exclude {
                continue;
            }
            if let Some((t, a)) = o.hit(ray) {
                hits.push((t, a, j));
            }
        }
        transmittance(&mut hits, &self.occluders, &ray.direction)
    }
}

/// Uniform-grid accelerated tracer; results equal [`BruteForceTracer`].
pub struct GridTracer {
    occluders: Vec<Occluder>,
    ids: Vec<usize>,
    origin: Vector3<f64>,
    cell: Vector3<f64>,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

/// Upper bound on cells per axis.
const MAX_DIM: usize = 128;

impl GridTracer {
    pub fn new(scene: &Scene, set: &[usize]) -> Self {
        let occluders: Vec<Occluder> = set.iter().map(|&i| Occluder::new(&scene.gaussians[i])).collect();
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for o in &occluders {
            lo = lo.inf(&o.lo);
            hi = hi.sup(&o.hi);
        }
        if occluders.is_empty() {
            lo = Vector3::zeros();
            hi = Vector3::repeat(1.0);
        }
        let mut reach: Vec<f64> = set.iter().map(|&i| 3.0 * scene.gaussians[i].max_scale()).collect();
        reach.sort_by(f64::total_cmp);
        let median = reach.get(reach.len() / 2).copied().unwrap_or(1.0);
        let size = (2.0 * median).max(1e-6);
        let extent = hi - lo;
        let mut dims = [1usize; 3];
        let mut cell = Vector3::zeros();
        for k in 0..3 {
            dims[k] = ((extent[k] / size).ceil() as usize).clamp(1, MAX_DIM);
            cell[k] = (extent[k] / dims[k] as f64).max(1e-12);
        }
        let mut grid = Self {
            occluders,
            ids: set.to_vec(),
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            items: Vec::new(),
        };
        grid.bin();
        grid
    }

    fn cell_range(&self, lo: &Vector3<f64>, hi: &Vector3<f64>) -> [(usize, usize); 3] {
        std::array::from_fn(|k| {
            let a = ((lo[k] - self.origin[k]) / self.cell[k]).floor().max(0.0) as usize;
            let b = ((hi[k] - self.origin[k]) / self.cell[k]).floor().max(0.0) as usize;
            (a.min(self.dims[k] - 1), b.min(self.dims[k] - 1))
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn bin(&mut self) {
        let ncell = self.dims.iter().product::<usize>();
        let mut counts = vec![0u32; ncell + 1];
        let ranges: Vec<_> = self
            .occluders
            .iter()
            .map(|o| if o.opacity <= MIN_OCCLUDER_ALPHA { None } else { Some(self.cell_range(&o.lo, &o.hi)) })
            .collect();
        for r in ranges.iter().flatten() {
            for z in r[2].0..=r[2].1 {
                for y in r[1].0..=r[1].1 {
                    for x in r[0].0..=r[0].1 {
                        counts[self.flat([x, y, z]) + 1] += 1;
                    }
                }
            }
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut cursor = counts[..ncell].to_vec();
        let mut items = vec![0u32; counts[ncell] as usize];
        for (j, r) in ranges.iter().enumerate() {
            let Some(r) = r else { continue };
            for z in r[2].0..=r[2].1 {
                for y in r[1].0..=r[1].1 {
                    for x in r[0].0..=r[0].1 {
                        let c = self.flat([x, y, z]);
                        items[cursor[c] as usize] = j as u32;
                        cursor[c] += 1;
                    }
                }
            }
        }
        self.starts = counts;
        self.items = items;
    }

    /// Parameter interval where the ray is inside the grid box.
    fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0: f64 = 0.0;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            let lo = self.origin[k];
            let hi = self.origin[k] + self.cell[k] * self.dims[k] as f64;
            let (o, d) = (ray.origin[k], ray.direction[k]);
            if d == 0.0 {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let (mut a, mut b) = ((lo - o) / d, (hi - o) / d);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 <= t1).then_some((t0, t1))
    }

    pub fn trace(&self, ray: &Ray, exclude: Option<usize>) -> f64 {
        let mut hits = Vec::new();
        let mut seen = vec![false; self.occluders.len()];
        self.visit_cells(ray, |cell| {
            for &j in &self.items[self.starts[cell] as usize..self.starts[cell + 1] as usize] {
                let j = j as usize;
                if seen[j] {
                    continue;
                }
                seen[j] = true;
                if Some(self.ids[j]) == exclude {
                    continue;
                }
                if let Some((t, a)) = self.occluders[j].hit(ray) {
                    hits.push((t, a, j));
                }
            }
        });
        transmittance(&mut hits, &self.occluders, &ray.direction)
    }

    /// 3D DDA over the cells the ray crosses.
    fn visit_cells(&self, ray: &Ray, mut f: impl FnMut(usize)) {
        let Some((t0, t1)) = self.clip(ray) else { return };
        let entry = ray.at(t0);
        let mut cell = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for k in 0..3 {
            let rel = (entry[k] - self.origin[k]) / self.cell[k];
            cell[k] = (rel.floor() as i64).clamp(0, self.dims[k] as i64 - 1);
            let d = ray.direction[k];
            if d > 0.0 {
                step[k] = 1;
                let boundary = self.origin[k] + (cell[k] + 1) as f64 * self.cell[k];
                t_max[k] = (boundary - ray.origin[k]) / d;
                t_delta[k] = self.cell[k] / d;
            } else if d < 0.0 {
                step[k] = -1;
                let boundary = self.origin[k] + cell[k] as f64 * self.cell[k];
                t_max[k] = (boundary - ray.origin[k]) / d;
                t_delta[k] = -self.cell[k] / d;
            }
        }
        loop {
            f(self.flat([cell[0] as usize, cell[1] as usize, cell[2] as usize]));
            let k = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if t_max[k] > t1 {
                break;
            }
            cell[k] += step[k];
            if cell[k] < 0 || cell[k] >= self.dims[k] as i64 {
                break;
            }
            t_max[k] += t_delta[k];
        }
    }

    pub fn cell_counts(&self) -> [usize; 3] {
        self.dims
    }
}

/// Traced transmittance from every Gaussian center along `d`, with the
/// occluders restricted to `set`.
pub fn trace_all(scene: &Scene, tracer: &GridTracer, d: [f64; 3]) -> Result<Vec<f64>> {
    let dir = Vector3::from(d);
    check_direction(&dir)?;
    Ok(scene
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let ray = Ray {
                origin: g.position_vec(),
                direction: dir,
            };
            tracer.trace(&ray, Some(i))
        })
        .collect())
}

/// Transmittance from Gaussian `g` along `d` through the occluders in `set`.
pub fn trace_visibility(scene: &Scene, set: &[usize], g: usize, d: [f64; 3]) -> Result<f64> {
    let ray = Ray::new(scene.gaussians[g].position_vec(), Vector3::from(d))?;
    Ok(GridTracer::new(scene, set).trace(&ray, Some(g)))
}
