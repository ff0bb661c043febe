//! All-pairs correlation volumes, their pyramid, and argmax flow.

use nalgebra::Vector2;

use super::features::FeatureMap;
use crate::error::{Result, SlamError};

pub const PYRAMID_LEVELS: usize = 4;
pub const LOOKUP_RADIUS: usize = 3;

/// Search half-width, in cells, for the flow argmax.
const SEARCH_RADIUS: isize = 8;
/// Peak correlation below which a cell's flow is unreliable. Unrelated noise
/// cells peak around 0.3 over the search window.
const RELIABLE_PEAK: f64 = 0.5;
/// Fraction of reliable cells below which a pair is flagged low-texture.
const MIN_RELIABLE_FRACTION: f64 = 0.25;

/// `Cor[u1 v1 u2 v2] = <f_i(u1, v1), f_j(u2, v2)>`, source-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume {
    pub rows: usize,
    pub cols: usize,
    pub target_rows: usize,
    pub target_cols: usize,
    pub data: Vec<f64>,
}

impl CorrelationVolume {
    #[inline]
    pub fn get(&self, u1: usize, v1: usize, u2: usize, v2: usize) -> f64 {
        let src = u1 * self.cols + v1;
        self.data[src * self.target_rows * self.target_cols + u2 * self.target_cols + v2]
    }

    fn slice(&self, src: usize) -> &[f64] {
        let n = self.target_rows * self.target_cols;
        &self.data[src * n..(src + 1) * n]
    }
}

pub fn correlation(fi: &FeatureMap, fj: &FeatureMap) -> Result<CorrelationVolume> {
    if fi.rows() != fj.rows() || fi.cols() != fj.cols() {
        return Err(SlamError::contract(format!(
            "feature grids {}x{} and {}x{} differ",
            fi.rows(),
            fi.cols(),
            fj.rows(),
            fj.cols()
        )));
    }
    let n = fi.cells();
    let mut data = Vec::with_capacity(n * n);
    for a in 0..n {
        let da = fi.descriptor_at(a);
        for b in 0..n {
            data.push(da.iter().zip(fj.descriptor_at(b)).map(|(x, y)| x * y).sum());
        }
    }
    Ok(CorrelationVolume {
        rows: fi.rows(),
        cols: fi.cols(),
        target_rows: fj.rows(),
        target_cols: fj.cols(),
        data,
    })
}

/// Level `k` average-pools the target dimensions of level `k - 1` by 2 (ceil sizes;
/// partial windows average the entries they contain).
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationPyramid {
    pub levels: Vec<CorrelationVolume>,
}

impl CorrelationPyramid {
    pub fn new(volume: CorrelationVolume) -> Self {
        let mut levels = vec![volume];
        for _ in 1..PYRAMID_LEVELS {
            let prev = levels.last().expect("nonempty");
            levels.push(pool_targets(prev));
        }
        CorrelationPyramid { levels }
    }
}

fn pool_targets(v: &CorrelationVolume) -> CorrelationVolume {
    let (tr, tc) = (
        v.target_rows.div_ceil(2).max(1),
        v.target_cols.div_ceil(2).max(1),
    );
    let sources = v.rows * v.cols;
    let mut data = Vec::with_capacity(sources * tr * tc);
    for src in 0..sources {
        let s = v.slice(src);
        for r in 0..tr {
            for c in 0..tc {
                let mut sum = 0.0;
                let mut count = 0;
                for rr in 2 * r..(2 * r + 2).min(v.target_rows) {
                    for cc in 2 * c..(2 * c + 2).min(v.target_cols) {
                        sum += s[rr * v.target_cols + cc];
                        count += 1;
                    }
                }
                data.push(if count > 0 { sum / count as f64 } else { 0.0 });
            }
        }
    }
    CorrelationVolume {
        rows: v.rows,
        cols: v.cols,
        target_rows: tr,
        target_cols: tc,
        data,
    }
}

fn bilinear_zero(s: &[f64], rows: usize, cols: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let fetch = |xi: f64, yi: f64| {
        if xi < 0.0 || yi < 0.0 || xi >= cols as f64 || yi >= rows as f64 {
            0.0
        } else {
            s[yi as usize * cols + xi as usize]
        }
    };
    (1.0 - fx) * (1.0 - fy) * fetch(x0, y0)
        + fx * (1.0 - fy) * fetch(x0 + 1.0, y0)
        + (1.0 - fx) * fy * fetch(x0, y0 + 1.0)
        + fx * fy * fetch(x0 + 1.0, y0 + 1.0)
}

/// Samples a `(2r+1)^2` window around each source cell's target coordinate on
/// every level. `coords[src]` is `(x = column, y = row)` in level-0 target cells.
/// Output per source: levels, then rows, then columns of the window.
pub fn pyramid_lookup(
    pyr: &CorrelationPyramid,
    coords: &[Vector2<f64>],
    radius: usize,
) -> Result<Vec<Vec<f64>>> {
    let base = &pyr.levels[0];
    if coords.len() != base.rows * base.cols {
        return Err(SlamError::contract(format!(
            "{} lookup coordinates for {} source cells",
            coords.len(),
            base.rows * base.cols
        )));
    }
    let r = radius as isize;
    Ok(coords
        .iter()
        .enumerate()
        .map(|(src, p)| {
            let mut out = Vec::with_capacity(pyr.levels.len() * (2 * radius + 1).pow(2));
            for (k, level) in pyr.levels.iter().enumerate() {
                let scale = (1u32 << k) as f64;
                let (cx, cy) = (p.x / scale, p.y / scale);
                let s = level.slice(src);
                for dy in -r..=r {
                    for dx in -r..=r {
                        out.push(bilinear_zero(
                            s,
                            level.target_rows,
                            level.target_cols,
                            cx + dx as f64,
                            cy + dy as f64,
                        ));
                    }
                }
            }
            out
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionEstimate {
    /// Per source cell displacement `(dx, dy)` in cells.
    pub flow: Vec<Vector2<f64>>,
    pub reliable: Vec<bool>,
    /// Mean displacement norm over reliable cells, in cells.
    pub mean_norm: f64,
    pub low_texture: bool,
}

/// Integer argmax flow on the finest level.
pub fn motion_vector(prev: &FeatureMap, cur: &FeatureMap) -> Result<MotionEstimate> {
    let vol = correlation(prev, cur)?;
    let (rows, cols) = (vol.target_rows as isize, vol.target_cols as isize);
    let mut flow = Vec::with_capacity(vol.rows * vol.cols);
    let mut reliable = Vec::with_capacity(vol.rows * vol.cols);
    for u in 0..vol.rows as isize {
        for v in 0..vol.cols as isize {
            let s = vol.slice((u * vol.cols as isize + v) as usize);
            let at = |r: isize, c: isize| s[(r * cols + c) as usize];
            let mut best = (f64::NEG_INFINITY, u, v);
            for r in (u - SEARCH_RADIUS).max(0)..=(u + SEARCH_RADIUS).min(rows - 1) {
                for c in (v - SEARCH_RADIUS).max(0)..=(v + SEARCH_RADIUS).min(cols - 1) {
                    // Ties (flat, degenerate descriptors) go to the smallest displacement.
                    let closer =
                        (r - u).pow(2) + (c - v).pow(2) < (best.1 - u).pow(2) + (best.2 - v).pow(2);
                    if at(r, c) > best.0 || (at(r, c) == best.0 && closer) {
                        best = (at(r, c), r, c);
                    }
                }
            }
            let (peak, r, c) = best;
            flow.push(Vector2::new((c - v) as f64, (r - u) as f64));
            reliable.push(peak >= RELIABLE_PEAK);
        }
    }
    let good: Vec<f64> = flow
        .iter()
        .zip(&reliable)
        .filter(|(_, ok)| **ok)
        .map(|(f, _)| f.norm())
        .collect();
    let low_texture = (good.len() as f64) < MIN_RELIABLE_FRACTION * flow.len() as f64;
    let mean_norm = if good.is_empty() {
        0.0
    } else {
        good.iter().sum::<f64>() / good.len() as f64
    };
    Ok(MotionEstimate {
        flow,
        reliable,
        mean_norm,
        low_texture,
    })
}
