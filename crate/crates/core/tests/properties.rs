use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sunsplat_core::extract::two_means;
use sunsplat_core::losses::{complement, indirect_mask};
use sunsplat_core::optim::ExpDecay;
use sunsplat_core::scene::{read_scene, write_scene, Camera, Decoders, EmbeddingSet, Gaussian, Scene};
use sunsplat_core::shadow::{fibonacci_directions, front_filter, sky_filter, surface_depth, SKY_THRESHOLD};
use sunsplat_core::ImagePlane;

fn random_scene(seed: u64, n: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut g = Gaussian::new(
                std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                std::array::from_fn(|_| rng.random_range(0.05..0.4)),
                if norm < 0.05 { [1.0, 0.0, 0.0, 0.0] } else { q.map(|v| v / norm) },
                rng.random_range(0.05..1.0),
                std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            );
            g.sky_semantic = rng.random_range(0.0..1.0);
            g
        })
        .collect();
    let mut scene = Scene::new(gaussians, Decoders::random(&mut rng));
    scene.embeddings.push(EmbeddingSet::random(true, 0.1, &mut rng));
    scene.cameras.push(Camera::look_at([0.0, -4.0, 1.0].into(), [0.0; 3].into(), 12, 10, 10.0).unwrap());
    scene
}

fn bytes(scene: &Scene) -> Vec<u8> {
    let mut buf = Vec::new();
    write_scene(scene, &mut buf).unwrap();
    buf
}

fn angle(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0).acos()
}

fn min_separation(n: usize) -> f64 {
    let d = fibonacci_directions(n).unwrap();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            best = best.min(angle(&d[i], &d[j]));
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn container_save_load_is_stable(seed in 0u64..10_000, n in 0usize..20) {
        let scene = random_scene(seed, n);
        let first = bytes(&scene);
        let back = read_scene(first.as_slice()).unwrap();
        prop_assert_eq!(back.len(), n);
        prop_assert_eq!(bytes(&back), first.clone());
        prop_assert_eq!(read_scene(first.as_slice()).unwrap(), back);
    }

    #[test]
    fn filters_commute(seed in 0u64..10_000) {
        let scene = random_scene(seed, 25);
        let cam = &scene.cameras[0];
        let depth = surface_depth(&scene, cam);
        let sky = sky_filter(&scene);
        let front = front_filter(&scene, cam, &depth);
        let a: Vec<usize> = sky.iter().copied().filter(|i| front.contains(i)).collect();
        let b: Vec<usize> = front.iter().copied().filter(|i| sky.contains(i)).collect();
        prop_assert_eq!(a, b);
        prop_assert!(sky.iter().all(|&i| scene.gaussians[i].sky_semantic <= SKY_THRESHOLD));
    }

    #[test]
    fn fibonacci_lattice_stays_above_horizon(n in 1usize..300) {
        let d = fibonacci_directions(n).unwrap();
        prop_assert_eq!(d.len(), n);
        for v in &d {
            prop_assert!(v[2] > 0.0);
            prop_assert!(((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn regions_partition_the_image(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..64)) {
        // sunlit pixels are never sky
        let v: Vec<f64> = bits.iter().map(|(s, k)| if *s && !*k { 1.0 } else { 0.0 }).collect();
        let sky: Vec<f64> = bits.iter().map(|(_, k)| if *k { 1.0 } else { 0.0 }).collect();
        let v = ImagePlane::from_vec(bits.len(), 1, 1, v).unwrap();
        let sky = ImagePlane::from_vec(bits.len(), 1, 1, sky).unwrap();
        let ind = indirect_mask(&v, &sky).unwrap();
        for p in 0..bits.len() {
            prop_assert_eq!(v.data()[p] + sky.data()[p] + ind.data()[p], 1.0);
        }
        prop_assert_eq!(complement(&complement(&v)), v);
    }

    #[test]
    fn decay_reaches_its_endpoint(start in 1e-5f64..1e-1, ratio in 1e-3f64..1.0, steps in 1usize..50_000) {
        let end = start * ratio;
        let d = ExpDecay::new(start, end, steps).unwrap();
        prop_assert!((d.at(0) - start).abs() <= 1e-12 * start);
        prop_assert!((d.at(steps) - end).abs() < 1e-9);
        prop_assert!(d.at(steps / 2) <= start && d.at(steps / 2) >= end);
    }

    #[test]
    fn clustering_cost_never_rises(vals in proptest::collection::vec(0.0f64..1.0, 2..200)) {
        let img = ImagePlane::from_vec(vals.len(), 1, 1, vals).unwrap();
        let r = two_means(&img, None).unwrap();
        for w in r.wcss.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0));
        }
        prop_assert!(r.assignments.data().iter().all(|&a| a == 0.0 || a == 1.0));
        if !r.degenerate {
            prop_assert!(r.mu1 >= r.mu2);
            // the terminal assignment is a fixed point: every value sits with its nearer centroid
            for (&x, &a) in img.data().iter().zip(r.assignments.data()) {
                let near_high = (x - r.mu1).powi(2) < (x - r.mu2).powi(2);
                prop_assert_eq!(a == 1.0, near_high);
            }
        }
    }
}

#[test]
fn lattice_spreads_out_as_it_thins() {
    let mut previous = 0.0;
    for n in [512, 256, 128, 64, 32, 16, 8] {
        let s = min_separation(n);
        assert!(s > previous, "n = {n}: {s} <= {previous}");
        previous = s;
    }
}
