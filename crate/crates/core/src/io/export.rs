//! TUM trajectories and binary PLY maps.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use super::dataset::TimedPose;
use crate::error::{Result, SlamError};
use crate::scene::{logit, Gaussian, GaussianId, GaussianMap};

fn fixed6(v: f64) -> String {
    // avoid "-0.000000"
    let v = if v.abs() < 5e-7 { 0.0 } else { v };
    format!("{v:.6}")
}

/// One `timestamp tx ty tz qx qy qz qw` line (world-from-camera) per pose.
pub fn format_trajectory(traj: &[TimedPose]) -> String {
    let mut s = String::new();
    for p in traj {
        let wc = p.pose.inverse();
        let t = wc.translation();
        let q = wc.quaternion();
        let fields = [p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w];
        s.push_str(&fields.map(fixed6).join(" "));
        s.push('\n');
    }
    s
}

pub fn export_trajectory(traj: &[TimedPose], path: &Path) -> Result<()> {
    fs::write(path, format_trajectory(traj)).map_err(|e| SlamError::io(path, e))
}

const BASE_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
    "f_dc_0", "f_dc_1", "f_dc_2",
];

fn ply_header(map: &GaussianMap) -> String {
    let mut h = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        map.len()
    );
    for p in BASE_PROPERTIES {
        h.push_str(&format!("property float {p}\n"));
    }
    if !map.masks_discarded() {
        h.push_str("property float mask\n");
    }
    h.push_str("end_header\n");
    h
}

/// Expected file size: header plus 4 bytes per stored float.
pub fn ply_size(map: &GaussianMap) -> usize {
    ply_header(map).len() + map.storage_bytes()
}

/// Binary little-endian PLY: position, log scale, quaternion (wxyz), opacity logit,
/// color, and the mask logit until masks are discarded.
pub fn export_ply(map: &GaussianMap, path: &Path) -> Result<()> {
    let mut buf = ply_header(map).into_bytes();
    for g in map.gaussians() {
        let mut vals = vec![
            g.position.x,
            g.position.y,
            g.position.z,
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.opacity_logit,
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        if !map.masks_discarded() {
            vals.push(g.mask_logit);
        }
        for v in vals {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| SlamError::io(path, e))?;
    f.write_all(&buf).map_err(|e| SlamError::io(path, e))
}

pub fn import_ply(path: &Path, mask_epsilon: f64) -> Result<GaussianMap> {
    let file = fs::File::open(path).map_err(|e| SlamError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |line: usize, msg: &str| SlamError::Parse {
        path: path.to_path_buf(),
        line,
        message: msg.to_owned(),
    };
    let mut count = None;
    let mut props = Vec::new();
    let mut line_no = 0;
    loop {
        let mut line = String::new();
        if reader
            .read_line(&mut line)
            .map_err(|e| SlamError::io(path, e))?
            == 0
        {
            return Err(bad(line_no, "missing end_header"));
        }
        line_no += 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["end_header"] => break,
            ["ply"] | ["comment", ..] => {}
            ["format", fmt, _] if *fmt == "binary_little_endian" => {}
            ["format", ..] => return Err(bad(line_no, "only binary_little_endian is supported")),
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| bad(line_no, "bad vertex count"))?,
                );
            }
            ["property", "float", name] => props.push((*name).to_owned()),
            _ => return Err(bad(line_no, "unsupported header line")),
        }
    }
    let count = count.ok_or_else(|| bad(line_no, "no vertex element"))?;
    let index = |name: &str| props.iter().position(|p| p == name);
    let cols: Vec<usize> = BASE_PROPERTIES
        .iter()
        .map(|p| index(p).ok_or_else(|| bad(line_no, &format!("missing property {p}"))))
        .collect::<Result<_>>()?;
    let mask_col = index("mask");
    let mut body = Vec::new();
    reader
        .read_to_end(&mut body)
        .map_err(|e| SlamError::io(path, e))?;
    let stride = props.len() * 4;
    if body.len() != count * stride {
        return Err(bad(
            line_no,
            &format!("body is {} bytes, expected {}", body.len(), count * stride),
        ));
    }
    let mut map = GaussianMap::new(mask_epsilon);
    for row in body.chunks_exact(stride) {
        let v = |c: usize| {
            f64::from(f32::from_le_bytes(
                row[c * 4..c * 4 + 4].try_into().expect("4 bytes"),
            ))
        };
        let b: Vec<f64> = cols.iter().map(|&c| v(c)).collect();
        map.push(Gaussian {
            id: GaussianId(0),
            position: Vector3::new(b[0], b[1], b[2]),
            log_scale: Vector3::new(b[3], b[4], b[5]),
            rotation: Vector4::new(b[6], b[7], b[8], b[9]),
            opacity_logit: b[10],
            color: Vector3::new(b[11], b[12], b[13]),
            mask_logit: mask_col.map_or(logit(0.99), v),
        });
    }
    if mask_col.is_none() {
        map.set_masks_discarded();
    }
    Ok(map)
}
