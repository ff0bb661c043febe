//! Motion filter and the sliding window of information keyframes.

use std::collections::BTreeSet;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::correlation::{motion_vector, MotionEstimate};
use super::features::{FeatureMap, CELL};
use crate::error::{Result, SlamError};
use crate::lie::Pose;
use crate::scene::GaussianId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Mean flow, in pixels, above which a frame becomes a motion keyframe.
    pub motion_threshold: f64,
    pub max_frame_interval: usize,
    pub info_threshold: f64,
    pub min_mapping_distance: usize,
    pub window_capacity: usize,
    pub oc_removal_threshold: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            motion_threshold: 2.0,
            max_frame_interval: 15,
            info_threshold: 0.15,
            min_mapping_distance: 20,
            window_capacity: 8,
            oc_removal_threshold: 0.3,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.motion_threshold >= 0.0
            && self.max_frame_interval >= 1
            && (0.0..=1.0).contains(&self.info_threshold)
            && (0.0..=1.0).contains(&self.oc_removal_threshold)
            && self.window_capacity >= 2;
        if ok {
            Ok(())
        } else {
            Err(SlamError::Config(format!("invalid window config {self:?}")))
        }
    }
}

/// `|G_i \ G_j| / |G_i U G_j|`, 0 for an empty union.
pub fn relative_complement(gi: &BTreeSet<GaussianId>, gj: &BTreeSet<GaussianId>) -> f64 {
    let inter = gi.intersection(gj).count();
    let union = gi.len() + gj.len() - inter;
    if union == 0 {
        0.0
    } else {
        (gi.len() - inter) as f64 / union as f64
    }
}

/// `|G_i n G_j| / min(|G_i|, |G_j|)`, 0 when either set is empty.
pub fn overlap_coefficient(gi: &BTreeSet<GaussianId>, gj: &BTreeSet<GaussianId>) -> f64 {
    let m = gi.len().min(gj.len());
    if m == 0 {
        0.0
    } else {
        gi.intersection(gj).count() as f64 / m as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionReason {
    First,
    Motion,
    Interval,
    LowTexture,
    Skip,
}

#[derive(Clone, Debug)]
pub struct MotionDecision {
    pub is_keyframe: bool,
    pub reason: MotionReason,
    /// Mean flow in cells (0 for the first frame).
    pub mean_norm: f64,
    pub low_texture: bool,
    /// Constant-velocity pose prediction, set for keyframes.
    pub predicted_pose: Option<Pose>,
}

/// What the motion filter remembers between frames.
#[derive(Clone, Debug, Default)]
pub struct MotionFilterState {
    last: Option<(usize, FeatureMap)>,
    /// Poses of the last two motion keyframes, newest first.
    poses: Vec<Pose>,
}

impl MotionFilterState {
    pub fn new() -> Self {
        MotionFilterState::default()
    }

    pub fn last_keyframe_index(&self) -> Option<usize> {
        self.last.as_ref().map(|(i, _)| *i)
    }

    /// Records the final pose of the latest motion keyframe.
    pub fn record_pose(&mut self, pose: Pose) {
        self.poses.insert(0, pose);
        self.poses.truncate(2);
    }

    /// `(T_{k-1} T_{k-2}^{-1}) T_{k-1}`, or the last pose, or identity.
    pub fn predict(&self) -> Pose {
        match self.poses.as_slice() {
            [] => Pose::identity(),
            [p] => *p,
            [p1, p2, ..] => p1.compose(&p2.inverse()).compose(p1),
        }
    }
}

pub fn motion_filter(
    state: &mut MotionFilterState,
    frame_index: usize,
    features: &FeatureMap,
    cfg: &WindowConfig,
) -> Result<MotionDecision> {
    let (reason, estimate) = match &state.last {
        None => (MotionReason::First, None),
        Some((last_index, last_features)) => {
            let est: MotionEstimate = motion_vector(last_features, features)?;
            let reason = if est.low_texture {
                MotionReason::LowTexture
            } else if est.mean_norm * CELL as f64 > cfg.motion_threshold {
                MotionReason::Motion
            } else if frame_index.saturating_sub(*last_index) >= cfg.max_frame_interval {
                MotionReason::Interval
            } else {
                MotionReason::Skip
            };
            (reason, Some(est))
        }
    };
    let is_keyframe = reason != MotionReason::Skip;
    if is_keyframe {
        state.last = Some((frame_index, features.clone()));
    }
    Ok(MotionDecision {
        is_keyframe,
        reason,
        mean_norm: estimate.as_ref().map_or(0.0, |e| e.mean_norm),
        low_texture: estimate.as_ref().is_some_and(|e| e.low_texture),
        predicted_pose: is_keyframe.then(|| state.predict()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowMember {
    pub frame_index: usize,
    pub visibility: BTreeSet<GaussianId>,
    pub center: Vector3<f64>,
    /// Camera-center distance to the information keyframe admitted just before it.
    pub displacement: f64,
}

/// A candidate motion keyframe offered to the window.
#[derive(Clone, Debug)]
pub struct WindowCandidate {
    pub frame_index: usize,
    pub visibility: BTreeSet<GaussianId>,
    pub center: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowDecision {
    pub admitted: bool,
    pub evicted: Option<usize>,
    /// RC against the previous information keyframe, when one exists.
    pub rc: Option<f64>,
    pub evicted_oc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct KeyframeWindow {
    capacity: usize,
    members: Vec<WindowMember>,
    last: Option<WindowMember>,
    admitted_total: usize,
}

impl KeyframeWindow {
    pub fn new(capacity: usize) -> Self {
        KeyframeWindow {
            capacity,
            members: Vec::new(),
            last: None,
            admitted_total: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn members(&self) -> &[WindowMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.frame_index).collect()
    }

    pub fn contains(&self, frame_index: usize) -> bool {
        self.members.iter().any(|m| m.frame_index == frame_index)
    }

    pub fn last_admitted(&self) -> Option<&WindowMember> {
        self.last.as_ref()
    }

    pub fn admitted_total(&self) -> usize {
        self.admitted_total
    }

    /// Replaces a member's visibility set after a fresh render.
    pub fn set_visibility(&mut self, frame_index: usize, visibility: BTreeSet<GaussianId>) {
        if let Some(m) = self
            .members
            .iter_mut()
            .find(|m| m.frame_index == frame_index)
        {
            m.visibility = visibility.clone();
        }
        if let Some(l) = self.last.as_mut().filter(|l| l.frame_index == frame_index) {
            l.visibility = visibility;
        }
    }

    pub fn set_center(&mut self, frame_index: usize, center: Vector3<f64>) {
        if let Some(m) = self
            .members
            .iter_mut()
            .find(|m| m.frame_index == frame_index)
        {
            m.center = center;
        }
    }
}

/// Admission by novelty or frame distance; eviction by low overlap, else by
/// smallest displacement.
pub fn window_update(
    window: &mut KeyframeWindow,
    candidate: WindowCandidate,
    cfg: &WindowConfig,
) -> WindowDecision {
    let rc = window
        .last
        .as_ref()
        .map(|l| relative_complement(&candidate.visibility, &l.visibility));
    let admit = match &window.last {
        _ if window.admitted_total < 2 => true,
        None => true,
        Some(l) => {
            if candidate.frame_index <= l.frame_index {
                false
            } else {
                rc.unwrap_or(0.0) > cfg.info_threshold
                    || candidate.frame_index - l.frame_index >= cfg.min_mapping_distance
            }
        }
    };
    if !admit {
        return WindowDecision {
            admitted: false,
            evicted: None,
            rc,
            evicted_oc: None,
        };
    }

    let mut evicted = None;
    let mut evicted_oc = None;
    if window.members.len() >= window.capacity {
        let low_overlap = window.members.iter().position(|m| {
            overlap_coefficient(&m.visibility, &candidate.visibility) < cfg.oc_removal_threshold
        });
        let victim = low_overlap.unwrap_or_else(|| {
            let mut best = 0;
            for (i, m) in window.members.iter().enumerate() {
                if m.displacement < window.members[best].displacement {
                    best = i;
                }
            }
            best
        });
        let m = window.members.remove(victim);
        evicted_oc = Some(overlap_coefficient(&m.visibility, &candidate.visibility));
        evicted = Some(m.frame_index);
    }

    let displacement = window
        .last
        .as_ref()
        .map_or(f64::INFINITY, |l| (candidate.center - l.center).norm());
    let member = WindowMember {
        frame_index: candidate.frame_index,
        visibility: candidate.visibility,
        center: candidate.center,
        displacement,
    };
    window.last = Some(member.clone());
    window.members.push(member);
    window.admitted_total += 1;
    WindowDecision {
        admitted: true,
        evicted,
        rc,
        evicted_oc,
    }
}
