mod common;

use nalgebra::{Vector2, Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splat_slam::compaction::{
    densify_and_prune, discard_masks, mask_loss, mask_value, photometric_ssim_loss,
    photometric_ssim_loss_with_grad, prune, ssim, total_scene_loss, DensifyConfig,
    GradientAccumulator, MaskConfig,
};
use splat_slam::image::Image;
use splat_slam::io::psnr;
use splat_slam::io::synthetic::{
    generate_synthetic, synthetic_intrinsics, synthetic_trajectory, SyntheticSpec,
};
use splat_slam::raster::{render, RenderSettings};
use splat_slam::scene::{logit, sigmoid, Gaussian, GaussianId, GaussianMap};

fn blob(p: Vector3<f64>, scale: f64, mask_p: f64) -> Gaussian {
    Gaussian {
        id: GaussianId(0),
        position: p,
        rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
        log_scale: Vector3::repeat(scale.ln()),
        opacity_logit: logit(0.7),
        color: Vector3::new(0.2, 0.5, 0.8),
        mask_logit: logit(mask_p),
    }
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
    Image::from_fn(w, h, c, |_, _, _| rng.random_range(0.0..1.0))
}

#[test]
fn mask_forward_examples() {
    assert_eq!(mask_value(logit(0.9), 0.01).forward, 1.0);
    assert_eq!(mask_value(logit(0.005), 0.01).forward, 0.0);
    for b in [-8.0, -1.0, 0.0, 0.3, 5.0] {
        let s = 1.0 / (1.0 + f64::exp(-b));
        assert!((mask_value(b, 0.01).gradient_factor - s * (1.0 - s)).abs() < 1e-15);
    }
}

#[test]
fn mask_loss_two_gaussians() {
    let mut map = GaussianMap::default();
    map.push(Gaussian {
        mask_logit: 0.0,
        ..blob(Vector3::zeros(), 0.1, 0.5)
    });
    map.push(Gaussian {
        mask_logit: 3f64.ln(),
        ..blob(Vector3::zeros(), 0.1, 0.5)
    });
    let (loss, grad) = mask_loss(&map);
    assert!((loss - 0.625).abs() < 1e-12);
    assert!((grad[0] - 0.5 * 0.25).abs() < 1e-12);
    assert!((grad[1] - 0.5 * 0.75 * 0.25).abs() < 1e-12);

    let mut dead = GaussianMap::default();
    dead.push(Gaussian {
        mask_logit: -800.0,
        ..blob(Vector3::zeros(), 0.1, 0.5)
    });
    assert!(mask_loss(&dead).0 < 1e-300);
}

#[test]
fn photometric_loss_on_constant_images() {
    let (a, b, l1) = (0.25, 0.6, 0.2);
    let p = Image::filled(16, 16, 3, a);
    let q = Image::filled(16, 16, 3, b);
    let c1 = 0.01f64.powi(2);
    let ssim_const = (2.0 * a * b + c1) / (a * a + b * b + c1);
    let expect = (1.0 - l1) * (a - b).abs() + l1 * (1.0 - ssim_const);
    assert!((photometric_ssim_loss(&p, &q, l1).unwrap() - expect).abs() < 1e-12);
    assert_eq!(photometric_ssim_loss(&p, &p, l1).unwrap(), 0.0);
}

#[test]
fn photometric_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;
    for _ in 0..3 {
        let a = random_image(&mut rng, 8, 8, 3);
        let b = random_image(&mut rng, 8, 8, 3);
        let (_, grad) = photometric_ssim_loss_with_grad(&a, &b, 0.2).unwrap();
        for i in 0..a.data().len() {
            let mut plus = a.clone();
            plus.data_mut()[i] += h;
            let mut minus = a.clone();
            minus.data_mut()[i] -= h;
            let fd = (photometric_ssim_loss(&plus, &b, 0.2).unwrap()
                - photometric_ssim_loss(&minus, &b, 0.2).unwrap())
                / (2.0 * h);
            let an = grad.data()[i];
            assert!(
                common::rel_err(an, fd, 1e-6) < 1e-4,
                "entry {i}: {an} vs {fd}"
            );
        }
    }
}

#[test]
fn ssim_of_identical_images_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_image(&mut rng, 20, 13, 3);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn total_loss_is_component_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_image(&mut rng, 12, 12, 3);
    let b = random_image(&mut rng, 12, 12, 3);
    let mut map = GaussianMap::default();
    let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
    for &l in &logits {
        map.push(Gaussian {
            mask_logit: l,
            ..blob(Vector3::zeros(), 0.1, 0.5)
        });
    }
    let cfg = MaskConfig {
        lambda2: 0.3,
        ..MaskConfig::default()
    };
    let mask_mean = logits.iter().map(|&l| sigmoid(l)).sum::<f64>() / 4.0;
    let expect = photometric_ssim_loss(&a, &b, cfg.lambda1).unwrap() + 0.3 * mask_mean;
    assert!((total_scene_loss(&a, &b, &map, &cfg).unwrap() - expect).abs() < 1e-12);

    let zero = MaskConfig {
        lambda2: 0.0,
        ..cfg
    };
    assert_eq!(
        total_scene_loss(&a, &b, &map, &zero).unwrap(),
        photometric_ssim_loss(&a, &b, cfg.lambda1).unwrap()
    );
}

#[test]
fn densify_leaves_untouched_gaussians_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut map = GaussianMap::default();
    for _ in 0..20 {
        let p = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        map.push(blob(p, rng.random_range(0.002..0.05), 0.9));
    }
    let before: Vec<Gaussian> = map.gaussians().to_vec();
    let mut acc = GradientAccumulator::new(map.len());
    let grads: Vec<Vector2<f64>> = (0..map.len())
        .map(|i| {
            if i % 3 == 0 {
                Vector2::new(1e-3, 0.0)
            } else {
                Vector2::new(1e-5, 0.0)
            }
        })
        .collect();
    acc.add(&grads);
    let report = densify_and_prune(&mut map, &acc, &DensifyConfig::default(), &mut rng).unwrap();
    assert!(report.cloned + report.split > 0);
    map.check_invariants().unwrap();
    for (i, g) in before.iter().enumerate() {
        if i % 3 != 0 {
            let now = &map.gaussians()[map.index_of(g.id).expect("untouched survives")];
            assert_eq!(now, g);
        }
    }
}

#[test]
fn pruning_overparameterized_scene_keeps_quality() {
    let spec = SyntheticSpec::default();
    let (_, gt_map) = generate_synthetic(0, &spec);
    let k = synthetic_intrinsics(&spec);
    let poses = synthetic_trajectory(&spec);
    let settings = RenderSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut map = gt_map.clone();
    for _ in 0..150 {
        let src = gt_map.get(rng.random_range(0..gt_map.len())).clone();
        map.push(Gaussian {
            position: src.position + Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05)),
            opacity_logit: logit(0.01),
            ..src
        });
    }
    for _ in 0..50 {
        let src = gt_map.get(rng.random_range(0..gt_map.len())).clone();
        map.push(Gaussian {
            mask_logit: logit(0.001),
            ..src
        });
    }
    let views: Vec<Image> = poses
        .iter()
        .step_by(10)
        .map(|p| {
            let mut img = render(&gt_map, p, &k, &settings).color;
            img.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.02..0.02));
            img
        })
        .collect();
    let mean_psnr = |m: &GaussianMap| {
        let s: f64 = poses
            .iter()
            .step_by(10)
            .zip(&views)
            .map(|(p, gt)| psnr(&render(m, p, &k, &settings).color, gt).unwrap())
            .sum();
        s / views.len() as f64
    };
    let before = mean_psnr(&map);
    let n_before = map.len();
    let report = prune(&mut map, &DensifyConfig::default());
    assert_eq!(report.mask_pruned, 50);
    assert!(map.len() < n_before);
    let after = mean_psnr(&map);
    assert!(before - after <= 0.5, "PSNR {before} -> {after}");
}

#[test]
fn discard_keeps_render_and_drops_mask_storage() {
    let spec = SyntheticSpec::default();
    let (_, mut map) = generate_synthetic(1, &spec);
    let k = synthetic_intrinsics(&spec);
    let pose = synthetic_trajectory(&spec)[0];
    let settings = RenderSettings::default();
    let before = render(&map, &pose, &k, &settings);
    let bytes = map.storage_bytes();
    discard_masks(&mut map).unwrap();
    let after = render(&map, &pose, &k, &settings);
    assert_eq!(before.color.data(), after.color.data());
    assert_eq!(before.depth.data(), after.depth.data());
    assert_eq!(map.storage_bytes(), bytes / 15 * 14);
    discard_masks(&mut map).unwrap();
    assert_eq!(map.storage_bytes(), bytes / 15 * 14);
}

proptest! {
    #[test]
    fn mask_forward_is_binary_and_masks_opacity(b in -50.0f64..50.0, o in -10.0f64..10.0, eps in 1e-4f64..0.5) {
        let m = mask_value(b, eps).forward;
        prop_assert!(m == 0.0 || m == 1.0);
        prop_assert!(m * sigmoid(o) <= sigmoid(o));
    }

    #[test]
    fn mask_loss_in_unit_interval_and_descends(logits in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let mut map = GaussianMap::default();
        for &l in &logits {
            map.push(Gaussian { mask_logit: l, ..blob(Vector3::zeros(), 0.1, 0.5) });
        }
        let (mut prev, _) = mask_loss(&map);
        prop_assert!((0.0..=1.0).contains(&prev));
        for _ in 0..5 {
            let (_, grad) = mask_loss(&map);
            for (g, d) in map.gaussians_mut().iter_mut().zip(&grad) {
                g.mask_logit -= 50.0 * d;
            }
            let (cur, _) = mask_loss(&map);
            prop_assert!(cur < prev);
            prev = cur;
        }
    }
}
