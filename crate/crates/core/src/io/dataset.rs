//! Datasets: TUM RGB-D sequences, image folders with a trajectory file, and in-memory frames.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Result, SlamError};
use crate::image::Image;
use crate::lie::Pose;
use crate::scene::{CameraIntrinsics, Frame};

/// Association tolerance between streams, seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

/// A camera-from-world pose at a timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

#[derive(Clone, Debug)]
pub enum FrameData {
    Memory {
        rgb: Image,
        depth: Option<Image>,
    },
    Files {
        rgb: PathBuf,
        depth: Option<PathBuf>,
    },
}

#[derive(Clone, Debug)]
pub struct DatasetFrame {
    pub timestamp: f64,
    pub data: FrameData,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<DatasetFrame>,
    /// Ground truth, one entry per associated frame.
    pub ground_truth: Option<Vec<TimedPose>>,
    /// Frames dropped because a stream had no partner within tolerance.
    pub dropped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn load_frame(&self, index: usize) -> Result<Frame> {
        let f = &self.frames[index];
        let (rgb, depth) = match &f.data {
            FrameData::Memory { rgb, depth } => (rgb.clone(), depth.clone()),
            FrameData::Files { rgb, depth } => (
                read_rgb_png(rgb)?,
                depth
                    .as_ref()
                    .map(|p| read_depth_png(p, self.intrinsics.depth_scale))
                    .transpose()?,
            ),
        };
        let frame = Frame::new(index, f.timestamp, rgb, depth);
        frame.validate(&self.intrinsics)?;
        Ok(frame)
    }

    /// Timestamps must increase strictly.
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if let Some(w) = self
            .frames
            .windows(2)
            .find(|w| w[1].timestamp <= w[0].timestamp)
        {
            return Err(SlamError::Dataset(format!(
                "timestamps not increasing: {} then {}",
                w[0].timestamp, w[1].timestamp
            )));
        }
        Ok(())
    }
}

fn image_err(path: &Path, source: image::ImageError) -> SlamError {
    SlamError::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// 8- or 16-bit color PNG scaled to [0, 1].
pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageRgb16(_)
        | image::DynamicImage::ImageRgba16(_)
        | image::DynamicImage::ImageLuma16(_) => img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 65535.0)
            .collect(),
        _ => img
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 255.0)
            .collect(),
    };
    Image::from_vec(w, h, 3, data)
}

/// 16-bit depth PNG converted to meters; 0 stays invalid.
pub fn read_depth_png(path: &Path, depth_scale: f64) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let gray = img.to_luma16();
    let (w, h) = gray.dimensions();
    let data = gray
        .into_raw()
        .into_iter()
        .map(|v| f64::from(v) / depth_scale)
        .collect();
    Image::from_vec(w as usize, h as usize, 1, data)
}

pub fn write_rgb_png(img: &Image, path: &Path) -> Result<()> {
    let buf: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let out = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, buf)
        .ok_or_else(|| SlamError::contract("png writer expects 3 channels"))?;
    out.save(path).map_err(|e| image_err(path, e))
}

pub fn write_depth_png(img: &Image, path: &Path, depth_scale: f64) -> Result<()> {
    let buf: Vec<u16> = img
        .data()
        .iter()
        .map(|v| (v * depth_scale).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let out = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        img.width() as u32,
        img.height() as u32,
        buf,
    )
    .ok_or_else(|| SlamError::contract("depth writer expects 1 channel"))?;
    out.save(path).map_err(|e| image_err(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> SlamError {
    SlamError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Non-comment lines as `(line number, fields)`.
fn data_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| SlamError::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| (i + 1, l.split_whitespace().map(str::to_owned).collect()))
        .collect())
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| parse_err(path, line, format!("not a number: {s:?}")))
}

/// `timestamp filename` lines.
fn read_file_list(path: &Path) -> Result<Vec<(f64, String)>> {
    data_lines(path)?
        .into_iter()
        .map(|(n, f)| {
            if f.len() < 2 {
                return Err(parse_err(path, n, "expected `timestamp filename`"));
            }
            Ok((parse_f64(path, n, &f[0])?, f[1].clone()))
        })
        .collect()
}

/// World-from-camera TUM pose fields `tx ty tz qx qy qz qw` to a camera-from-world pose.
pub fn pose_from_tum(fields: &[f64; 7]) -> Pose {
    let [tx, ty, tz, qx, qy, qz, qw] = *fields;
    let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
    Pose::from_quaternion(&q, Vector3::new(tx, ty, tz)).inverse()
}

/// `timestamp tx ty tz qx qy qz qw` lines, world-from-camera.
pub fn read_tum_trajectory(path: &Path) -> Result<Vec<TimedPose>> {
    data_lines(path)?
        .into_iter()
        .map(|(n, f)| {
            if f.len() != 8 {
                return Err(parse_err(
                    path,
                    n,
                    format!("expected 8 fields, found {}", f.len()),
                ));
            }
            let mut v = [0.0; 8];
            for (slot, s) in v.iter_mut().zip(&f) {
                *slot = parse_f64(path, n, s)?;
            }
            let mut pose_fields = [0.0; 7];
            pose_fields.copy_from_slice(&v[1..]);
            Ok(TimedPose {
                timestamp: v[0],
                pose: pose_from_tum(&pose_fields),
            })
        })
        .collect()
}

/// Index of the entry nearest to `t` within tolerance. `sorted` must be ascending.
pub fn nearest(sorted: &[f64], t: f64, tol: f64) -> Option<usize> {
    let i = sorted.partition_point(|&x| x < t);
    [i.checked_sub(1), (i < sorted.len()).then_some(i)]
        .into_iter()
        .flatten()
        .min_by(|&a, &b| (sorted[a] - t).abs().total_cmp(&(sorted[b] - t).abs()))
        .filter(|&j| (sorted[j] - t).abs() <= tol)
}

/// Standard intrinsics of the three TUM camera families, picked by directory name.
pub fn tum_intrinsics(dir: &Path) -> CameraIntrinsics {
    let name = dir.to_string_lossy();
    let (fx, fy, cx, cy) = if name.contains("freiburg2") {
        (520.9, 521.0, 325.1, 249.7)
    } else if name.contains("freiburg3") {
        (535.4, 539.2, 320.1, 247.6)
    } else {
        (517.3, 516.5, 318.6, 255.3)
    };
    CameraIntrinsics {
        fx,
        fy,
        cx,
        cy,
        width: 640,
        height: 480,
        depth_scale: 5000.0,
    }
}

/// Loads `rgb.txt`, `depth.txt` and optional `groundtruth.txt`, associating streams
/// by nearest timestamp within 20 ms.
pub fn load_tum(dir: &Path) -> Result<Dataset> {
    let rgb_list = dir.join("rgb.txt");
    if !rgb_list.exists() {
        return Err(SlamError::Dataset(format!(
            "{} is missing",
            rgb_list.display()
        )));
    }
    let rgb = read_file_list(&rgb_list)?;
    let depth_list = dir.join("depth.txt");
    let depth = if depth_list.exists() {
        read_file_list(&depth_list)?
    } else {
        Vec::new()
    };
    let gt_path = dir.join("groundtruth.txt");
    let gt = gt_path
        .exists()
        .then(|| read_tum_trajectory(&gt_path))
        .transpose()?;

    let depth_ts: Vec<f64> = depth.iter().map(|d| d.0).collect();
    let gt_ts: Vec<f64> = gt.iter().flatten().map(|p| p.timestamp).collect();
    let mut frames = Vec::new();
    let mut gt_out = Vec::new();
    let mut dropped = 0;
    for (t, file) in &rgb {
        let d = nearest(&depth_ts, *t, ASSOCIATION_TOLERANCE);
        let g = gt
            .as_ref()
            .map(|_| nearest(&gt_ts, *t, ASSOCIATION_TOLERANCE));
        if d.is_none() || matches!(g, Some(None)) {
            dropped += 1;
            continue;
        }
        if let (Some(Some(j)), Some(list)) = (g, gt.as_ref()) {
            gt_out.push(TimedPose {
                timestamp: *t,
                pose: list[j].pose,
            });
        }
        frames.push(DatasetFrame {
            timestamp: *t,
            data: FrameData::Files {
                rgb: dir.join(file),
                depth: d.map(|j| dir.join(&depth[j].1)),
            },
        });
    }
    if dropped > 0 {
        warn!("dropped {dropped} unassociated frames in {}", dir.display());
    }
    let mut intrinsics = tum_intrinsics(dir);
    if let Some(first) = frames.first() {
        if let FrameData::Files { rgb, .. } = &first.data {
            if let Ok((w, h)) = image::image_dimensions(rgb) {
                intrinsics.width = w as usize;
                intrinsics.height = h as usize;
            }
        }
    }
    let ds = Dataset {
        intrinsics,
        frames,
        ground_truth: gt.map(|_| gt_out),
        dropped,
    };
    ds.validate()?;
    Ok(ds)
}

/// Image folder layout: `rgb/` and optional `depth/` with matching sorted file names,
/// `traj.txt` holding either 16 numbers per line (row-major camera-to-world) or TUM
/// lines, and `intrinsics.txt` with `fx fy cx cy width height depth_scale`.
pub fn load_folder(dir: &Path) -> Result<Dataset> {
    let list = |sub: &str| -> Result<Vec<PathBuf>> {
        let d = dir.join(sub);
        if !d.is_dir() {
            return Ok(Vec::new());
        }
        let mut v: Vec<PathBuf> = fs::read_dir(&d)
            .map_err(|e| SlamError::io(&d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        Ok(v)
    };
    let rgb = list("rgb")?;
    if rgb.is_empty() {
        return Err(SlamError::Dataset(format!(
            "no PNG files in {}",
            dir.join("rgb").display()
        )));
    }
    let depth = list("depth")?;
    if !depth.is_empty() && depth.len() != rgb.len() {
        return Err(SlamError::Dataset(format!(
            "{} rgb images but {} depth images",
            rgb.len(),
            depth.len()
        )));
    }
    let intr_path = dir.join("intrinsics.txt");
    let lines = data_lines(&intr_path)?;
    let (n, f) = lines
        .first()
        .ok_or_else(|| parse_err(&intr_path, 1, "empty intrinsics file"))?;
    if f.len() != 7 {
        return Err(parse_err(
            &intr_path,
            *n,
            "expected `fx fy cx cy width height depth_scale`",
        ));
    }
    let v: Vec<f64> = f
        .iter()
        .map(|s| parse_f64(&intr_path, *n, s))
        .collect::<Result<_>>()?;
    let intrinsics = CameraIntrinsics {
        fx: v[0],
        fy: v[1],
        cx: v[2],
        cy: v[3],
        width: v[4] as usize,
        height: v[5] as usize,
        depth_scale: v[6],
    };

    let traj_path = dir.join("traj.txt");
    let ground_truth = if traj_path.exists() {
        let lines = data_lines(&traj_path)?;
        let mut poses = Vec::with_capacity(lines.len());
        for (i, (n, f)) in lines.iter().enumerate() {
            let v: Vec<f64> = f
                .iter()
                .map(|s| parse_f64(&traj_path, *n, s))
                .collect::<Result<_>>()?;
            let tp = match v.len() {
                16 => {
                    let m = nalgebra::Matrix4::from_row_slice(&v);
                    let rot = m.fixed_view::<3, 3>(0, 0).into_owned();
                    let t = m.fixed_view::<3, 1>(0, 3).into_owned();
                    TimedPose {
                        timestamp: i as f64,
                        pose: Pose::new(rot, t).inverse(),
                    }
                }
                8 => TimedPose {
                    timestamp: v[0],
                    pose: pose_from_tum(&[v[1], v[2], v[3], v[4], v[5], v[6], v[7]]),
                },
                k => {
                    return Err(parse_err(
                        &traj_path,
                        *n,
                        format!("expected 16 or 8 fields, found {k}"),
                    ))
                }
            };
            poses.push(tp);
        }
        if poses.len() != rgb.len() {
            return Err(SlamError::Dataset(format!(
                "{} trajectory entries for {} frames",
                poses.len(),
                rgb.len()
            )));
        }
        Some(poses)
    } else {
        None
    };
    let frames = rgb
        .into_iter()
        .enumerate()
        .map(|(i, p)| DatasetFrame {
            timestamp: ground_truth.as_ref().map_or(i as f64, |g| g[i].timestamp),
            data: FrameData::Files {
                rgb: p,
                depth: depth.get(i).cloned(),
            },
        })
        .collect();
    let ds = Dataset {
        intrinsics,
        frames,
        ground_truth,
        dropped: 0,
    };
    ds.validate()?;
    Ok(ds)
}
