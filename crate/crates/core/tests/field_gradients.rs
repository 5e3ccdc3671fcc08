use hugs_core::dataset::ViewDataset;
use hugs_core::field::{ray_loss_and_grad, ray_weights, train, Ray, TrainConfig, VoxelField};
use hugs_core::geometry::Aabb;
use hugs_core::raster::BinaryMask;
use hugs_core::synth::{generate_scene, SceneSpec};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SAMPLES: usize = 24;

fn random_field(rng: &mut ChaCha8Rng, res: usize) -> VoxelField {
    let mut f = VoxelField::new([res; 3], Aabb::cube(1.0), 0.0, [0.0; 3]).unwrap();
    for (i, p) in f.params_mut().iter_mut().enumerate() {
        *p = if i % 4 == 0 { rng.random_range(-3.0..2.0) } else { rng.random_range(-2.0..2.0) };
    }
    f
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// A ray from outside the unit cube that crosses it.
fn random_ray(rng: &mut ChaCha8Rng) -> Ray {
    loop {
        let origin = 2.5 * random_direction(rng);
        let aim = Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
        let dir = (aim - origin).normalize();
        if let Some((t0, t1)) = Aabb::cube(1.0).intersect(&origin, &dir) {
            if t1 - t0 > 0.2 {
                return Ray::new(origin, dir, t0.max(0.0), t1).unwrap();
            }
        }
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let h = 1e-4;
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 100 {
        let mut field = random_field(&mut rng, 4);
        let ray = random_ray(&mut rng);
        let target = [rng.random(), rng.random(), rng.random()];
        let jitter: Vec<f64> = (0..SAMPLES).map(|_| rng.random()).collect();
        let jitter = if checked % 2 == 0 { Some(jitter.as_slice()) } else { None };
        let (_, grad) = ray_loss_and_grad(&field, &ray, target, 1.0, SAMPLES, jitter).unwrap();
        let dense = grad.to_dense(field.params().len());
        let touched: Vec<usize> = (0..dense.len()).filter(|i| dense[*i].abs() > 1e-6).collect();
        if touched.is_empty() {
            continue;
        }
        let j = touched[rng.random_range(0..touched.len())];
        let base = field.params()[j];
        field.params_mut()[j] = base + h;
        let plus = ray_loss_and_grad(&field, &ray, target, 1.0, SAMPLES, jitter).unwrap().0;
        field.params_mut()[j] = base - h;
        let minus = ray_loss_and_grad(&field, &ray, target, 1.0, SAMPLES, jitter).unwrap().0;
        field.params_mut()[j] = base;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (dense[j] - numeric).abs() / dense[j].abs().max(numeric.abs());
        worst = worst.max(rel);
        assert!(rel < 1e-3, "param {j}: analytic {} numeric {numeric} rel {rel}", dense[j]);
        checked += 1;
    }
    eprintln!("worst relative error {worst:.2e}");
}

#[test]
fn weights_never_exceed_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7765_6967);
    let field = random_field(&mut rng, 6);
    let mut dense = random_field(&mut rng, 6);
    for (i, p) in dense.params_mut().iter_mut().enumerate() {
        if i % 4 == 0 {
            *p = 40.0;
        }
    }
    for k in 0..10_000 {
        let ray = random_ray(&mut rng);
        let f = if k % 2 == 0 { &field } else { &dense };
        let w = ray_weights(f, &ray, 32).unwrap();
        assert!(w.iter().all(|x| *x >= 0.0));
        let total: f64 = w.iter().sum();
        assert!(total <= 1.0 + 1e-12, "ray {k}: sum {total}");
    }
}

#[test]
fn gradient_is_linear_in_mask_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let field = random_field(&mut rng, 4);
        let ray = random_ray(&mut rng);
        let target = [rng.random(), rng.random(), rng.random()];
        let n = field.params().len();
        let g = |m: f64| ray_loss_and_grad(&field, &ray, target, m, SAMPLES, None).unwrap();
        let (l0, g0) = g(0.0);
        let (lh, gh) = g(0.5);
        let (l1, g1) = g(1.0);
        assert_eq!(l0, 0.0);
        assert!(g0.to_dense(n).iter().all(|x| *x == 0.0));
        assert!((lh - 0.5 * l1).abs() <= 1e-6 * l1.abs());
        let (gh, g1) = (gh.to_dense(n), g1.to_dense(n));
        let scale = g1.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in gh.iter().zip(&g1) {
            assert!((a - 0.5 * b).abs() <= 1e-6 * scale, "{a} vs {b}");
        }
    }
}

#[test]
fn all_zero_masks_leave_parameters_untouched() {
    let mut spec = SceneSpec::with_distractor(2);
    spec.resolution = 16;
    let dataset: ViewDataset = generate_scene(&spec).unwrap();
    let masks: Vec<BinaryMask> = dataset.train().map(|_| BinaryMask::zeros(16, 16)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut init = VoxelField::new([6; 3], Aabb::cube(2.0), 0.0, [0.0; 3]).unwrap();
    for p in init.params_mut() {
        *p = rng.random_range(-1.0..1.0);
    }
    let cfg = TrainConfig {
        iterations: 20,
        batch_rays: 128,
        samples_per_ray: 16,
        ..TrainConfig::default()
    };
    let out = train(&init, &dataset, Some(&masks), &cfg).unwrap();
    let same = out.field.params().iter().zip(init.params()).all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same, "masked-out training changed parameters");
    let moved = train(&init, &dataset, None, &cfg).unwrap();
    assert_ne!(moved.field.params(), init.params());
}

#[test]
fn training_is_deterministic() {
    let mut spec = SceneSpec::with_distractor(4);
    spec.resolution = 16;
    let dataset = generate_scene(&spec).unwrap();
    let init = VoxelField::new([6; 3], Aabb::cube(2.0), 0.0, [0.0; 3]).unwrap();
    let cfg = TrainConfig {
        iterations: 10,
        batch_rays: 200,
        samples_per_ray: 16,
        seed: 3,
        ..TrainConfig::default()
    };
    let a = train(&init, &dataset, None, &cfg).unwrap();
    let b = train(&init, &dataset, None, &cfg).unwrap();
    assert_eq!(a.field.to_bytes(), b.field.to_bytes());
    assert_eq!(a.trace.losses, b.trace.losses);
}
