//! Hand-crafted dense descriptors at 1/8 resolution.

use std::f64::consts::TAU;

use crate::error::{Result, SlamError};
use crate::image::Image;

pub const CELL: usize = 8;
pub const DESCRIPTOR_DIM: usize = 256;

const PATCH_LEN: usize = CELL * CELL;
const BINS: usize = 8;
const HIST_LEN: usize = 4 * BINS;

/// A `rows x cols` grid of unit-norm descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * DESCRIPTOR_DIM {
            return Err(SlamError::contract(format!(
                "feature buffer has {} values, expected {rows}x{cols}x{DESCRIPTOR_DIM}",
                data.len()
            )));
        }
        Ok(FeatureMap { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn descriptor(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.cols + col) * DESCRIPTOR_DIM;
        &self.data[i..i + DESCRIPTOR_DIM]
    }

    pub(crate) fn descriptor_at(&self, cell: usize) -> &[f64] {
        &self.data[cell * DESCRIPTOR_DIM..(cell + 1) * DESCRIPTOR_DIM]
    }
}

/// Descriptor per 8x8 cell: mean-subtracted gray patch, four 8-bin orientation
/// histograms, RGB means and standard deviations, zero padding, L2 normalization.
///
/// The histogram and color blocks are centered within the block so unrelated
/// cells do not correlate through their shared positive offset.
pub fn extract_features(rgb: &Image) -> Result<FeatureMap> {
    let (w, h) = (rgb.width(), rgb.height());
    if w < CELL || h < CELL {
        return Err(SlamError::contract(format!(
            "image {w}x{h} is smaller than one {CELL}x{CELL} cell"
        )));
    }
    if rgb.channels() != 3 {
        return Err(SlamError::contract(
            "feature extraction expects an RGB image",
        ));
    }
    let gray = rgb.to_gray();
    let at = |x: isize, y: isize| {
        gray.get(
            x.clamp(0, w as isize - 1) as usize,
            y.clamp(0, h as isize - 1) as usize,
            0,
        )
    };
    let (rows, cols) = (h / CELL, w / CELL);
    let mut data = Vec::with_capacity(rows * cols * DESCRIPTOR_DIM);
    for r in 0..rows {
        for c in 0..cols {
            let mut d = [0.0; DESCRIPTOR_DIM];
            let (x0, y0) = (c * CELL, r * CELL);

            let mut mean = 0.0;
            for dy in 0..CELL {
                for dx in 0..CELL {
                    let v = gray.get(x0 + dx, y0 + dy, 0);
                    d[dy * CELL + dx] = v;
                    mean += v;
                }
            }
            mean /= PATCH_LEN as f64;
            d[..PATCH_LEN].iter_mut().for_each(|v| *v -= mean);

            let hist = &mut d[PATCH_LEN..PATCH_LEN + HIST_LEN];
            for dy in 0..CELL {
                for dx in 0..CELL {
                    let (x, y) = ((x0 + dx) as isize, (y0 + dy) as isize);
                    let gx = 0.5 * (at(x + 1, y) - at(x - 1, y));
                    let gy = 0.5 * (at(x, y + 1) - at(x, y - 1));
                    let mag = gx.hypot(gy);
                    if mag == 0.0 {
                        continue;
                    }
                    let angle = gy.atan2(gx).rem_euclid(TAU);
                    let bin = ((angle / TAU * BINS as f64) as usize).min(BINS - 1);
                    let sub = (dy / (CELL / 2)) * 2 + dx / (CELL / 2);
                    hist[sub * BINS + bin] += mag;
                }
            }
            center(hist);

            let mut sum = [0.0; 3];
            let mut sum_sq = [0.0; 3];
            for dy in 0..CELL {
                for dx in 0..CELL {
                    for (ch, (s, q)) in sum.iter_mut().zip(&mut sum_sq).enumerate() {
                        let v = rgb.get(x0 + dx, y0 + dy, ch);
                        *s += v;
                        *q += v * v;
                    }
                }
            }
            let n = PATCH_LEN as f64;
            let base = PATCH_LEN + HIST_LEN;
            for ch in 0..3 {
                let m = sum[ch] / n;
                d[base + ch] = m;
                d[base + 3 + ch] = (sum_sq[ch] / n - m * m).max(0.0).sqrt();
            }
            center(&mut d[base..base + 3]);
            center(&mut d[base + 3..base + 6]);

            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                d.iter_mut().for_each(|v| *v /= norm);
            } else {
                d = [0.0; DESCRIPTOR_DIM];
                d[0] = 1.0;
            }
            data.extend_from_slice(&d);
        }
    }
    Ok(FeatureMap { rows, cols, data })
}

fn center(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}
