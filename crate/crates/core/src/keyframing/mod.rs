//! Keyframe selection: dense descriptors and correlation flow decide which frames
//! to track, visibility overlap decides which ones to map.

mod correlation;
mod features;
mod window;

pub use correlation::{
    correlation, motion_vector, pyramid_lookup, CorrelationPyramid, CorrelationVolume,
    MotionEstimate, LOOKUP_RADIUS, PYRAMID_LEVELS,
};
pub use features::{extract_features, FeatureMap, CELL, DESCRIPTOR_DIM};
pub use window::{
    motion_filter, overlap_coefficient, relative_complement, window_update, KeyframeWindow,
    MotionDecision, MotionFilterState, MotionReason, WindowCandidate, WindowConfig, WindowDecision,
    WindowMember,
};
