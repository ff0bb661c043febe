//! Shared fixtures and oracles for the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splat_slam::image::Image;
use splat_slam::io::Dataset;
use splat_slam::lie::{exp, Pose, Tangent};
use splat_slam::raster::{render, render_backward, RenderSettings};
use splat_slam::scene::{
    logit, param, sigmoid, CameraIntrinsics, Gaussian, GaussianId, GaussianMap, PARAM_COUNT,
};

pub fn intrinsics(w: usize, h: usize, f: f64) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: (w as f64 - 1.0) / 2.0,
        cy: (h as f64 - 1.0) / 2.0,
        width: w,
        height: h,
        depth_scale: 5000.0,
    }
}

pub fn random_pose(rng: &mut ChaCha8Rng, trans: f64, rot: f64) -> Pose {
    let mut v = [0.0; 6];
    for (i, x) in v.iter_mut().enumerate() {
        *x = rng.random_range(-1.0..1.0) * if i < 3 { trans } else { rot };
    }
    exp(&Tangent::from_slice(&v))
}

/// A small random scene whose Gaussians sit well inside the image.
/// Opacities stay in [0.1, 0.6] so ten layers never trigger the early stop.
pub struct GradScene {
    pub map: GaussianMap,
    pub pose: Pose,
    pub k: CameraIntrinsics,
    pub settings: RenderSettings,
    pub up_color: Image,
    pub up_depth: Image,
    pub up_alpha: Image,
}

pub fn grad_scene(rng: &mut ChaCha8Rng, n: usize) -> GradScene {
    let k = intrinsics(32, 32, 40.0);
    let pose = random_pose(rng, 0.3, 0.3);
    let world_from_cam = pose.inverse();
    let mut map = GaussianMap::default();
    for _ in 0..n {
        let z = rng.random_range(2.0..4.0);
        let u = rng.random_range(9.0..23.0);
        let v = rng.random_range(9.0..23.0);
        let p_c = k.back_project(u, v, z);
        let q = UnitQuaternion::from_euler_angles(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.0..3.0),
        );
        let qv = q.into_inner().coords;
        let scale_q = rng.random_range(0.8..1.2);
        map.push(Gaussian {
            id: GaussianId(0),
            position: world_from_cam.transform_point(&p_c),
            rotation: Vector4::new(qv.w, qv.x, qv.y, qv.z) * scale_q,
            log_scale: Vector3::from_fn(|_, _| rng.random_range(0.05f64..0.25).ln()),
            opacity_logit: logit(rng.random_range(0.1..0.6)),
            color: Vector3::from_fn(|_, _| rng.random_range(0.05..0.95)),
            mask_logit: logit(rng.random_range(0.3..0.99)),
        });
    }
    let background = Vector3::from_fn(|_, _| rng.random_range(0.0..1.0));
    let rand_img = |rng: &mut ChaCha8Rng, c: usize| {
        Image::from_fn(32, 32, c, |_, _, _| rng.random_range(-1.0..1.0))
    };
    GradScene {
        map,
        pose,
        k,
        settings: RenderSettings {
            background,
            ..RenderSettings::default()
        },
        up_color: rand_img(rng, 3),
        up_depth: rand_img(rng, 1),
        up_alpha: rand_img(rng, 1),
    }
}

impl GradScene {
    pub fn loss(&self, map: &GaussianMap, pose: &Pose) -> f64 {
        let out = render(map, pose, &self.k, &self.settings);
        let dot = |a: &Image, b: &Image| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| x * y)
                .sum::<f64>()
        };
        dot(&out.color, &self.up_color)
            + dot(&out.depth, &self.up_depth)
            + dot(&out.alpha, &self.up_alpha)
    }
}

/// Largest relative error per parameter class, pose last.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub mask: f64,
    pub pose: f64,
}

impl GradReport {
    pub fn max(&self) -> f64 {
        [
            self.position,
            self.rotation,
            self.log_scale,
            self.opacity,
            self.color,
            self.mask,
            self.pose,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn merge(&mut self, o: &GradReport) {
        self.position = self.position.max(o.position);
        self.rotation = self.rotation.max(o.rotation);
        self.log_scale = self.log_scale.max(o.log_scale);
        self.opacity = self.opacity.max(o.opacity);
        self.color = self.color.max(o.color);
        self.mask = self.mask.max(o.mask);
        self.pose = self.pose.max(o.pose);
    }
}

/// Relative error with an absolute floor for gradients that are essentially zero.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_FLOOR: f64 = 1e-4;

/// Central differences on every parameter and the pose tangent versus `render_backward`.
/// The mask's forward value is binary, so its oracle combines the opacity and
/// scale differences through the straight-through rule.
pub fn check_gradients(s: &GradScene) -> GradReport {
    let out = render(&s.map, &s.pose, &s.k, &s.settings);
    let grads = render_backward(
        &s.map,
        &s.pose,
        &s.k,
        &s.settings,
        &out,
        &s.up_color,
        &s.up_depth,
        &s.up_alpha,
    )
    .expect("shapes match");
    let mut report = GradReport::default();
    let h = FD_STEP;
    for i in 0..s.map.len() {
        let base = s.map.get(i).params();
        let mut fd = [0.0; PARAM_COUNT];
        for (j, slot) in fd.iter_mut().enumerate().take(param::MASK) {
            let mut plus = s.map.clone();
            let mut minus = s.map.clone();
            let mut p = base;
            p[j] += h;
            plus.gaussians_mut()[i].set_params(&p);
            p[j] -= 2.0 * h;
            minus.gaussians_mut()[i].set_params(&p);
            *slot = (s.loss(&plus, &s.pose) - s.loss(&minus, &s.pose)) / (2.0 * h);
        }
        let so = sigmoid(base[param::OPACITY]);
        let sb = sigmoid(base[param::MASK]);
        let d_b = fd[param::OPACITY] / (1.0 - so)
            + fd[param::LOG_SCALE..param::LOG_SCALE + 3]
                .iter()
                .sum::<f64>();
        fd[param::MASK] = sb * (1.0 - sb) * d_b;

        let a = &grads.gaussians[i];
        let class = |range: std::ops::Range<usize>| {
            range
                .map(|j| rel_err(a[j], fd[j], GRAD_FLOOR))
                .fold(0.0, f64::max)
        };
        report.merge(&GradReport {
            position: class(param::POSITION..param::POSITION + 3),
            rotation: class(param::ROTATION..param::ROTATION + 4),
            log_scale: class(param::LOG_SCALE..param::LOG_SCALE + 3),
            opacity: class(param::OPACITY..param::OPACITY + 1),
            color: class(param::COLOR..param::COLOR + 3),
            mask: class(param::MASK..param::MASK + 1),
            pose: 0.0,
        });
    }
    for j in 0..6 {
        let mut d = [0.0; 6];
        d[j] = h;
        let plus = exp(&Tangent::from_slice(&d)).compose(&s.pose);
        d[j] = -h;
        let minus = exp(&Tangent::from_slice(&d)).compose(&s.pose);
        let fd = (s.loss(&s.map, &plus) - s.loss(&s.map, &minus)) / (2.0 * h);
        report.pose = report.pose.max(rel_err(grads.pose.0[j], fd, GRAD_FLOOR));
    }
    report
}

/// Smooth random texture sampled with an offset so shifted frames share content.
pub struct Texture {
    blobs: Vec<(f64, f64, f64, [f64; 3])>,
}

impl Texture {
    pub fn new(seed: u64, extent: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs = (0..400)
            .map(|_| {
                (
                    rng.random_range(-16.0..extent + 16.0),
                    rng.random_range(-16.0..extent + 16.0),
                    rng.random_range(1.5..4.0),
                    [
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ],
                )
            })
            .collect();
        Texture { blobs }
    }

    pub fn image(&self, w: usize, h: usize, dx: f64) -> Image {
        Image::from_fn(w, h, 3, |x, y, c| {
            let (px, py) = (x as f64 + dx, y as f64);
            let v: f64 = self
                .blobs
                .iter()
                .map(|(bx, by, s, col)| {
                    col[c] * (-((px - bx).powi(2) + (py - by).powi(2)) / (2.0 * s * s)).exp()
                })
                .sum();
            v.min(1.0)
        })
    }
}

/// Writes a TUM-layout directory: four 8x6 color frames, three depth frames and
/// ground truth. The fourth color frame has no depth partner. Returns the raw
/// color bytes per frame.
pub fn write_tum_fixture(root: &Path) -> Vec<Vec<u8>> {
    fs::create_dir_all(root.join("rgb")).unwrap();
    fs::create_dir_all(root.join("depth")).unwrap();
    let mut rgb_list = String::from("# color images\n");
    let mut depth_list = String::from("# depth images\n");
    let mut gt_list = String::from("# timestamp tx ty tz qx qy qz qw\n");
    let mut rgb_bytes = Vec::new();
    for (i, t) in TUM_STAMPS.iter().enumerate() {
        let raw: Vec<u8> = (0..8 * 6 * 3)
            .map(|j| ((j * 7 + i * 31) % 256) as u8)
            .collect();
        image::RgbImage::from_raw(8, 6, raw.clone())
            .unwrap()
            .save(root.join(format!("rgb/{i}.png")))
            .unwrap();
        rgb_bytes.push(raw);
        rgb_list.push_str(&format!("{t:.6} rgb/{i}.png\n"));
        if i < 3 {
            let depth: Vec<u16> = (0..8 * 6)
                .map(|j| if j == 0 { 0 } else { 5000 + j as u16 })
                .collect();
            image::ImageBuffer::<image::Luma<u16>, _>::from_raw(8, 6, depth)
                .unwrap()
                .save(root.join(format!("depth/{i}.png")))
                .unwrap();
            depth_list.push_str(&format!("{:.6} depth/{i}.png\n", t + 0.004));
        }
        gt_list.push_str(&format!(
            "{:.4} {} 0.5 -0.25 0 0 0 1\n",
            t - 0.003,
            i as f64 * 0.1
        ));
    }
    fs::write(root.join("rgb.txt"), rgb_list).unwrap();
    fs::write(root.join("depth.txt"), depth_list).unwrap();
    fs::write(root.join("groundtruth.txt"), gt_list).unwrap();
    rgb_bytes
}

pub const TUM_STAMPS: [f64; 4] = [1.0, 1.1, 1.2, 1.3];

/// Checks a loaded fixture against what `write_tum_fixture` wrote.
pub fn check_tum_fixture(ds: &Dataset, rgb_bytes: &[Vec<u8>]) -> Result<(), String> {
    if ds.len() != 3 || ds.dropped != 1 {
        return Err(format!("{} frames, {} dropped", ds.len(), ds.dropped));
    }
    if (ds.intrinsics.width, ds.intrinsics.height) != (8, 6) {
        return Err("image size not taken from the first frame".into());
    }
    let gt = ds.ground_truth.as_ref().ok_or("no ground truth")?;
    if gt.len() != 3 {
        return Err(format!("{} ground-truth poses", gt.len()));
    }
    for i in 0..3 {
        let f = ds.load_frame(i).map_err(|e| e.to_string())?;
        if f.timestamp != TUM_STAMPS[i] {
            return Err(format!("frame {i} timestamp {}", f.timestamp));
        }
        if f.rgb
            .data()
            .iter()
            .zip(&rgb_bytes[i])
            .any(|(v, raw)| *v != f64::from(*raw) / 255.0)
        {
            return Err(format!("frame {i} color differs"));
        }
        let d = f.depth.ok_or("missing depth")?;
        if d.get(0, 0, 0) != 0.0 || d.get(1, 0, 0) != 5001.0 / 5000.0 {
            return Err(format!("frame {i} depth scaling"));
        }
        if (gt[i].pose.center() - Vector3::new(i as f64 * 0.1, 0.5, -0.25)).norm() > 1e-12 {
            return Err(format!("frame {i} ground truth"));
        }
    }
    Ok(())
}
