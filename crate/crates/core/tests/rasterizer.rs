mod common;

use common::{check_gradients, grad_scene, intrinsics};
use nalgebra::{Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splat_slam::image::Image;
use splat_slam::lie::Pose;
use splat_slam::raster::{render, render_backward, render_reference, RenderSettings};
use splat_slam::scene::{logit, Gaussian, GaussianId, GaussianMap};

fn gaussian(p: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Gaussian {
    Gaussian {
        id: GaussianId(0),
        position: p,
        rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
        log_scale: Vector3::repeat(scale.ln()),
        opacity_logit: logit(opacity),
        color,
        mask_logit: logit(0.99),
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [1, 3, 5, 10] {
        let scene = grad_scene(&mut rng, n);
        let report = check_gradients(&scene);
        assert!(report.max() < 1e-3, "{n} Gaussians: {report:?}");
    }
}

#[test]
fn gradients_without_early_stop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut scene = grad_scene(&mut rng, 6);
    scene.settings.early_stop = None;
    let report = check_gradients(&scene);
    assert!(report.max() < 1e-3, "{report:?}");
}

#[test]
fn empty_map_renders_background() {
    let k = intrinsics(20, 10, 30.0);
    let bg = Vector3::new(0.1, 0.2, 0.3);
    let settings = RenderSettings {
        background: bg,
        ..RenderSettings::default()
    };
    let out = render(&GaussianMap::default(), &Pose::identity(), &k, &settings);
    for y in 0..10 {
        for x in 0..20 {
            assert_eq!(out.color.pixel(x, y), bg.as_slice());
            assert_eq!(out.alpha.get(x, y, 0), 0.0);
            assert_eq!(out.depth.get(x, y, 0), 0.0);
        }
    }
    let r = render_reference(&GaussianMap::default(), &Pose::identity(), &k, &bg);
    assert_eq!(r.color, out.color);
}

#[test]
fn opaque_gaussian_on_pixel() {
    let k = intrinsics(33, 33, 50.0);
    let mut map = GaussianMap::default();
    let color = Vector3::new(0.9, 0.3, 0.1);
    map.push(gaussian(
        Vector3::new(0.0, 0.0, 2.0),
        0.2,
        1.0 - 1e-9,
        color,
    ));
    let out = render(&map, &Pose::identity(), &k, &RenderSettings::default());
    for c in 0..3 {
        assert!((out.color.get(16, 16, c) - color[c]).abs() < 1e-4);
    }
    assert!((out.depth.get(16, 16, 0) - 2.0).abs() < 1e-4);
}

#[test]
fn two_layer_composite() {
    let k = intrinsics(33, 33, 50.0);
    let mut map = GaussianMap::default();
    let red = Vector3::new(1.0, 0.0, 0.0);
    let blue = Vector3::new(0.0, 0.0, 1.0);
    // large footprints so the kernel is ~1 at the center pixel
    map.push(gaussian(Vector3::new(0.0, 0.0, 1.0), 0.5, 0.5, red));
    map.push(gaussian(
        Vector3::new(0.0, 0.0, 2.0),
        1.0,
        1.0 - 1e-12,
        blue,
    ));
    let out = render(&map, &Pose::identity(), &k, &RenderSettings::default());
    let c = out.color.pixel(16, 16);
    assert!((c[0] - 0.5).abs() < 1e-3 && (c[2] - 0.5).abs() < 1e-3 && c[1].abs() < 1e-12);
    assert!((out.depth.get(16, 16, 0) - 1.5).abs() < 1e-3);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = grad_scene(&mut rng, 5);
    let out = render(&s.map, &s.pose, &s.k, &s.settings);
    let g = render_backward(
        &s.map,
        &s.pose,
        &s.k,
        &s.settings,
        &out,
        &Image::new(32, 32, 3),
        &Image::new(32, 32, 1),
        &Image::new(32, 32, 1),
    )
    .unwrap();
    assert!(g.gaussians.iter().flatten().all(|v| *v == 0.0));
    assert!(g.pose.0.iter().all(|v| *v == 0.0));
}

#[test]
fn color_gradient_is_weight_sum() {
    let k = intrinsics(32, 32, 40.0);
    let mut map = GaussianMap::default();
    map.push(gaussian(
        Vector3::new(0.1, -0.05, 3.0),
        0.15,
        0.7,
        Vector3::new(0.3, 0.3, 0.3),
    ));
    let settings = RenderSettings::default();
    let out = render(&map, &Pose::identity(), &k, &settings);
    let ones = Image::filled(32, 32, 3, 1.0);
    let g = render_backward(
        &map,
        &Pose::identity(),
        &k,
        &settings,
        &out,
        &ones,
        &Image::new(32, 32, 1),
        &Image::new(32, 32, 1),
    )
    .unwrap();
    // a lone Gaussian's weight at each pixel is the accumulated alpha
    let weight_sum: f64 = out.alpha.data().iter().sum();
    for c in 0..3 {
        assert!((g.gaussians[0][11 + c] - weight_sum).abs() < 1e-9 * weight_sum);
    }
}

#[test]
fn backward_rejects_bad_shapes() {
    let k = intrinsics(16, 16, 20.0);
    let map = GaussianMap::default();
    let settings = RenderSettings::default();
    let out = render(&map, &Pose::identity(), &k, &settings);
    let bad = Image::new(8, 16, 3);
    let r = render_backward(
        &map,
        &Pose::identity(),
        &k,
        &settings,
        &out,
        &bad,
        &Image::new(16, 16, 1),
        &Image::new(16, 16, 1),
    );
    assert!(r.is_err());
}

#[test]
fn tiled_matches_reference_and_visibility_superset() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let s = grad_scene(&mut rng, 10);
        let tiled = render(&s.map, &s.pose, &s.k, &s.settings);
        let reference = render_reference(&s.map, &s.pose, &s.k, &s.settings.background);
        let diff = tiled
            .color
            .data()
            .iter()
            .zip(reference.color.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-6, "{diff}");
        assert!(tiled.visible_ids.is_superset(&reference.visible_ids));
        for (a, c) in tiled.alpha.data().iter().zip(tiled.color.data().chunks(3)) {
            assert!((0.0..=1.0).contains(a));
            assert!(c.iter().all(|v| *v <= 1.0 + 1e-6));
        }
    }
}

#[test]
fn render_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = grad_scene(&mut rng, 8);
    let a = render(&s.map, &s.pose, &s.k, &s.settings);
    let b = render(&s.map, &s.pose, &s.k, &s.settings);
    assert_eq!(a.color, b.color);
    assert_eq!(a.depth, b.depth);
    assert_eq!(a.contrib_counts, b.contrib_counts);
}
