//! The full pipeline: a tracking flow choosing and tracking keyframes and a mapping
//! flow growing and optimizing the map, run either in strict alternation or on two threads.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::thread;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{DatasetFormat, RunConfig};
use super::dataset::{load_folder, load_tum, write_rgb_png, Dataset, TimedPose};
use super::export::{export_ply, export_trajectory, ply_size};
use super::metrics::{ate_rmse, psnr, ssim, trajectory_diameter};
use super::synthetic::generate_synthetic;
use crate::error::{Result, SlamError};
use crate::keyframing::{
    extract_features, motion_filter, window_update, KeyframeWindow, MotionFilterState,
    WindowCandidate,
};
use crate::lie::Pose;
use crate::mapping::{
    color_refinement, final_refinement, insert_gaussians, map_update, MapperState,
};
use crate::raster::{render, RenderSettings};
use crate::scene::{CameraIntrinsics, ClipRange, Frame, GaussianMap};
use crate::tracking::track_keyframe;

#[derive(Clone, Debug, Serialize)]
pub struct RunMetrics {
    pub ate_rmse_cm: Option<f64>,
    pub trajectory_diameter_m: Option<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub gaussians: usize,
    pub ply_bytes: usize,
    pub frames: usize,
    pub motion_keyframes: usize,
    pub information_keyframes: usize,
    pub tracking_lost: usize,
    pub fps: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    /// One camera-from-world pose per motion keyframe; refined poses for information keyframes.
    pub trajectory: Vec<TimedPose>,
    pub metrics: RunMetrics,
    pub map: GaussianMap,
    pub keyframes: Vec<Frame>,
    pub logs: Vec<Value>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = || {
        cfg.dataset_path
            .as_deref()
            .ok_or_else(|| SlamError::Config("dataset_path is required".into()))
    };
    let mut ds = match cfg.dataset_format {
        DatasetFormat::Synthetic => generate_synthetic(cfg.seed, &cfg.synthetic).0,
        DatasetFormat::Tum => load_tum(path()?)?,
        DatasetFormat::Folder => load_folder(path()?)?,
    };
    if cfg.max_frames > 0 && ds.frames.len() > cfg.max_frames {
        ds.frames.truncate(cfg.max_frames);
        if let Some(gt) = ds.ground_truth.as_mut() {
            gt.truncate(cfg.max_frames);
        }
    }
    Ok(ds)
}

fn render_settings(cfg: &RunConfig) -> RenderSettings {
    RenderSettings {
        background: nalgebra::Vector3::zeros(),
        clip: ClipRange::default(),
        early_stop: (cfg.early_stop > 0.0).then_some(cfg.early_stop),
    }
}

fn median_depth(frame: &Frame) -> Option<f64> {
    let mut d: Vec<f64> = frame
        .depth
        .as_ref()?
        .data()
        .iter()
        .copied()
        .filter(|&v| v > 0.0)
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

/// An information keyframe handed from tracking to mapping.
struct Admission {
    frame: Frame,
    /// Window membership after admission, by frame index.
    window: Vec<usize>,
}

/// The mapping flow: sole owner and mutator of the map and the keyframe poses.
struct Mapper {
    cfg: RunConfig,
    k: CameraIntrinsics,
    settings: RenderSettings,
    map: GaussianMap,
    keyframes: Vec<Frame>,
    state: MapperState,
    logs: Vec<Value>,
}

impl Mapper {
    fn new(cfg: &RunConfig, k: CameraIntrinsics) -> Self {
        Mapper {
            cfg: cfg.clone(),
            k,
            settings: render_settings(cfg),
            map: GaussianMap::new(cfg.mask.epsilon),
            keyframes: Vec::new(),
            state: MapperState::new(cfg.seed),
            logs: Vec::new(),
        }
    }

    fn poses(&self) -> BTreeMap<usize, Pose> {
        self.keyframes.iter().map(|f| (f.index, f.pose)).collect()
    }

    fn admit(&mut self, a: Admission) -> Result<()> {
        if self.state.gauge_frame.is_none() {
            self.state.gauge_frame = Some(a.frame.index);
            self.state.scene_extent = median_depth(&a.frame).unwrap_or(1.0);
        }
        let index = a.frame.index;
        self.keyframes.push(a.frame);
        let added = insert_gaussians(
            &mut self.map,
            self.keyframes.last().expect("just pushed"),
            &self.k,
            &self.settings,
            self.cfg.mapping.insertion_stride,
        )?;
        let window: Vec<usize> = a
            .window
            .iter()
            .filter_map(|fi| self.keyframes.binary_search_by_key(fi, |f| f.index).ok())
            .collect();
        let report = map_update(
            &mut self.map,
            &mut self.keyframes,
            &window,
            &mut self.state,
            &self.cfg.mapping,
            &self.k,
            &self.settings,
        )?;
        self.logs.push(json!({
            "event": "map_update",
            "frame": index,
            "inserted": added,
            "window": a.window,
            "report": report,
        }));
        let interval = self.cfg.mapping.color_refinement_interval;
        if interval > 0 && self.state.updates().is_multiple_of(interval) {
            color_refinement(
                &mut self.map,
                &self.keyframes,
                &mut self.state,
                &self.cfg.mapping,
                &self.k,
                &self.settings,
            )?;
            self.logs
                .push(json!({"event": "color_refinement", "after_update": self.state.updates()}));
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        let report = final_refinement(
            &mut self.map,
            &self.keyframes,
            &mut self.state,
            &self.cfg.mapping,
            &self.k,
            &self.settings,
        )?;
        self.logs
            .push(json!({"event": "final_refinement", "report": report}));
        Ok(())
    }
}

/// The tracking flow: motion filter, pose tracking and window admission.
struct Tracker {
    cfg: RunConfig,
    k: CameraIntrinsics,
    settings: RenderSettings,
    motion: MotionFilterState,
    window: KeyframeWindow,
    /// `(frame index, timestamp, tracked pose)` per motion keyframe.
    motion_keyframes: Vec<(usize, f64, Pose)>,
    tracking_lost: usize,
    logs: Vec<Value>,
}

impl Tracker {
    fn new(cfg: &RunConfig, k: CameraIntrinsics) -> Self {
        Tracker {
            cfg: cfg.clone(),
            k,
            settings: render_settings(cfg),
            motion: MotionFilterState::new(),
            window: KeyframeWindow::new(cfg.window.window_capacity),
            motion_keyframes: Vec::new(),
            tracking_lost: 0,
            logs: Vec::new(),
        }
    }

    /// Processes one input frame against a map snapshot and the latest refined poses.
    fn process(
        &mut self,
        mut frame: Frame,
        map: &GaussianMap,
        refined: &BTreeMap<usize, Pose>,
    ) -> Result<Option<Admission>> {
        let features = extract_features(&frame.rgb)?;
        let decision = motion_filter(&mut self.motion, frame.index, &features, &self.cfg.window)?;
        self.logs.push(json!({
            "event": "motion_filter",
            "frame": frame.index,
            "keyframe": decision.is_keyframe,
            "reason": decision.reason,
            "mean_norm": decision.mean_norm,
        }));
        if !decision.is_keyframe {
            return Ok(None);
        }
        frame.feature_map = Some(features);
        let predicted = decision.predicted_pose.unwrap_or_else(Pose::identity);
        let pose = if map.is_empty() {
            predicted
        } else {
            match track_keyframe(
                map,
                &frame,
                &self.k,
                &predicted,
                &self.cfg.tracking,
                &self.settings,
            ) {
                Ok(r) => {
                    self.logs.push(json!({
                        "event": "tracking",
                        "frame": frame.index,
                        "iterations": r.iterations,
                        "initial_loss": r.initial_loss,
                        "final_loss": r.best_loss,
                        "pose": r.pose.log().0.as_slice(),
                        "initial_pose": predicted.log().0.as_slice(),
                    }));
                    r.pose
                }
                Err(SlamError::TrackingLost) => {
                    self.tracking_lost += 1;
                    self.logs
                        .push(json!({"event": "tracking_lost", "frame": frame.index}));
                    predicted
                }
                Err(e) => return Err(e),
            }
        };
        frame.pose = pose;
        self.motion.record_pose(pose);
        self.motion_keyframes
            .push((frame.index, frame.timestamp, pose));

        let visibility = render(map, &pose, &self.k, &self.settings).visible_ids;
        frame.visibility = Some(visibility.clone());
        // Refresh the comparison sets with the current map and refined poses.
        let refresh: Vec<usize> = if self.window.len() >= self.window.capacity() {
            self.window.frame_indices()
        } else {
            self.window
                .last_admitted()
                .map(|m| m.frame_index)
                .into_iter()
                .collect()
        };
        for fi in refresh {
            if let Some(p) = refined.get(&fi) {
                let vis = render(map, p, &self.k, &self.settings).visible_ids;
                self.window.set_visibility(fi, vis);
                self.window.set_center(fi, p.center());
            }
        }
        let wd = window_update(
            &mut self.window,
            WindowCandidate {
                frame_index: frame.index,
                visibility,
                center: pose.center(),
            },
            &self.cfg.window,
        );
        self.logs.push(json!({
            "event": "window",
            "frame": frame.index,
            "admitted": wd.admitted,
            "evicted": wd.evicted,
            "rc": wd.rc,
            "evicted_oc": wd.evicted_oc,
        }));
        Ok(wd.admitted.then(|| Admission {
            frame,
            window: self.window.frame_indices(),
        }))
    }
}

/// Published by mapping after every update; tracking reads the latest one.
struct MapSnapshot {
    map: GaussianMap,
    poses: BTreeMap<usize, Pose>,
    version: u64,
}

fn run_single_flow(ds: &Dataset, tracker: &mut Tracker, mapper: &mut Mapper) -> Result<()> {
    let mut poses = BTreeMap::new();
    for i in 0..ds.len() {
        let frame = ds.load_frame(i)?;
        if let Some(a) = tracker.process(frame, &mapper.map, &poses)? {
            mapper.admit(a)?;
            poses = mapper.poses();
        }
    }
    mapper.finish()
}

/// Latest snapshot plus a flag raised when the mapping thread stops.
struct Published {
    snapshot: Arc<MapSnapshot>,
    closed: bool,
}

fn run_threaded(ds: &Dataset, tracker: &mut Tracker, mut mapper: Mapper) -> Result<Mapper> {
    let shared = Arc::new((
        Mutex::new(Published {
            snapshot: Arc::new(MapSnapshot {
                map: mapper.map.clone(),
                poses: BTreeMap::new(),
                version: 0,
            }),
            closed: false,
        }),
        Condvar::new(),
    ));
    // A bounded queue keeps tracking at most one keyframe ahead of mapping.
    let (tx, rx) = mpsc::sync_channel::<Admission>(1);
    let remote = Arc::clone(&shared);
    let handle = thread::spawn(move || -> Result<Mapper> {
        let (lock, cvar) = &*remote;
        let mut version = 0;
        let run = || -> Result<()> {
            for a in rx {
                mapper.admit(a)?;
                version += 1;
                let snapshot = Arc::new(MapSnapshot {
                    map: mapper.map.clone(),
                    poses: mapper.poses(),
                    version,
                });
                lock.lock().expect("snapshot lock poisoned").snapshot = snapshot;
                cvar.notify_all();
            }
            mapper.finish()
        };
        let result = run();
        lock.lock().expect("snapshot lock poisoned").closed = true;
        cvar.notify_all();
        result.map(|()| mapper)
    });
    let (lock, cvar) = &*shared;
    let mut seen = 0;
    let mut sent = 0;
    for i in 0..ds.len() {
        let frame = ds.load_frame(i)?;
        let snap = {
            let mut guard = lock.lock().expect("snapshot lock poisoned");
            // tracking needs a map: wait for the first update after the first admission
            while sent > 0 && guard.snapshot.version == 0 && !guard.closed {
                guard = cvar.wait(guard).expect("snapshot lock poisoned");
            }
            if guard.closed {
                break;
            }
            Arc::clone(&guard.snapshot)
        };
        if snap.version != seen {
            seen = snap.version;
            tracker
                .logs
                .push(json!({"event": "snapshot", "version": seen, "frame": i}));
        }
        if let Some(a) = tracker.process(frame, &snap.map, &snap.poses)? {
            if tx.send(a).is_err() {
                break;
            }
            sent += 1;
        }
    }
    drop(tx);
    handle
        .join()
        .map_err(|_| SlamError::Contract("mapping thread panicked".into()))?
}

/// Runs the whole system on the configured dataset and writes outputs if an output
/// directory is configured.
pub fn run_slam(cfg: &RunConfig) -> Result<RunReport> {
    let mut cfg = cfg.clone();
    cfg.sync();
    cfg.validate()?;
    let ds = load_dataset(&cfg)?;
    ds.validate()?;
    let start = Instant::now();
    let k = ds.intrinsics;
    let mut tracker = Tracker::new(&cfg, k);
    let mut mapper = Mapper::new(&cfg, k);
    if cfg.single_thread {
        run_single_flow(&ds, &mut tracker, &mut mapper)?;
    } else {
        mapper = run_threaded(&ds, &mut tracker, mapper)?;
    }
    let wall = start.elapsed().as_secs_f64();

    let refined = mapper.poses();
    let trajectory: Vec<TimedPose> = tracker
        .motion_keyframes
        .iter()
        .map(|&(fi, timestamp, pose)| TimedPose {
            timestamp,
            pose: refined.get(&fi).copied().unwrap_or(pose),
        })
        .collect();

    let settings = render_settings(&cfg);
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut renders = Vec::with_capacity(mapper.keyframes.len());
    for f in &mapper.keyframes {
        let out = render(&mapper.map, &f.pose, &k, &settings);
        psnr_sum += psnr(&out.color, &f.rgb)?;
        ssim_sum += ssim(&out.color, &f.rgb)?;
        renders.push((f.index, out.color));
    }
    let n_kf = mapper.keyframes.len().max(1) as f64;
    let (ate, diameter) = match &ds.ground_truth {
        Some(gt) if trajectory.len() >= 3 => (
            Some(ate_rmse(&trajectory, gt)?),
            Some(trajectory_diameter(gt)),
        ),
        Some(gt) => (None, Some(trajectory_diameter(gt))),
        None => (None, None),
    };
    let metrics = RunMetrics {
        ate_rmse_cm: ate,
        trajectory_diameter_m: diameter,
        mean_psnr: psnr_sum / n_kf,
        mean_ssim: ssim_sum / n_kf,
        gaussians: mapper.map.len(),
        ply_bytes: ply_size(&mapper.map),
        frames: ds.len(),
        motion_keyframes: trajectory.len(),
        information_keyframes: mapper.keyframes.len(),
        tracking_lost: tracker.tracking_lost,
        fps: ds.len() as f64 / wall.max(1e-9),
        wall_seconds: wall,
    };
    let mut logs = tracker.logs;
    logs.append(&mut mapper.logs);

    if let Some(dir) = &cfg.output_dir {
        write_outputs(dir, &trajectory, &mapper.map, &metrics, &logs, &renders)?;
    }
    Ok(RunReport {
        trajectory,
        metrics,
        map: mapper.map,
        keyframes: mapper.keyframes,
        logs,
    })
}

fn write_outputs(
    dir: &Path,
    trajectory: &[TimedPose],
    map: &GaussianMap,
    metrics: &RunMetrics,
    logs: &[Value],
    renders: &[(usize, crate::image::Image)],
) -> Result<()> {
    let io = |p: &Path, e| SlamError::io(p, e);
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    export_trajectory(trajectory, &dir.join("trajectory.txt"))?;
    export_ply(map, &dir.join("map.ply"))?;
    let metrics_path = dir.join("metrics.json");
    let text = serde_json::to_string_pretty(metrics).expect("metrics serialize");
    fs::write(&metrics_path, text).map_err(|e| io(&metrics_path, e))?;
    let log_path = dir.join("log.jsonl");
    let lines: String = logs.iter().map(|v| format!("{v}\n")).collect();
    fs::write(&log_path, lines).map_err(|e| io(&log_path, e))?;
    let render_dir = dir.join("renders");
    fs::create_dir_all(&render_dir).map_err(|e| io(&render_dir, e))?;
    for (i, img) in renders {
        write_rgb_png(img, &render_dir.join(format!("kf_{i:05}.png")))?;
    }
    Ok(())
}
