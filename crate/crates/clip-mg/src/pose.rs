//! Skeleton sequences: parsing, temporal sampling and windowing, Gaussian
//! heatmap rasterization, and patch-relevance geometry.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// COCO-18 joint layout (OpenPose ordering).
pub const JOINT_COUNT: usize = 18;
/// Pose frames per clip after temporal sampling.
pub const POSE_FRAMES: usize = 32;
/// RGB frames per clip; one per pose window.
pub const RGB_FRAMES: usize = 8;
/// Pose frames per non-overlapping window.
pub const WINDOW_LEN: usize = POSE_FRAMES / RGB_FRAMES;

/// One joint: coordinates normalized to [0,1]², confidence in [0,1].
/// Confidence 0 marks a missing joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Joint {
    pub fn visible(&self) -> bool {
        self.confidence > 0.0
    }
}

/// One frame of J joints.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
}

/// Unsampled skeleton sequence as read from a pose file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPoseClip {
    pub id: String,
    pub label: Option<u32>,
    pub source_fps: Option<f64>,
    pub frames: Vec<Skeleton>,
}

/// Skeleton sequence after uniform sampling to exactly 32 frames.
#[derive(Debug, Clone)]
pub struct PoseClip {
    pub id: String,
    pub source_fps: Option<f64>,
    pub frames: Vec<Skeleton>,
}

/// Per-window pose summary aligned to one RGB frame.
#[derive(Debug, Clone)]
pub struct WindowSummary {
    /// Mean position over the window's visible frames, per joint; `None`
    /// when the joint is invisible for the whole window.
    pub joints: Vec<Option<(f64, f64)>>,
    /// Max pairwise distance among the joint's visible positions.
    pub displacement: Vec<f64>,
    /// True when every joint is missing in every frame of the window.
    pub missing: bool,
}

/// Heatmap stack: RGB_FRAMES × J × H × W, window-pooled along time.
#[derive(Debug, Clone)]
pub struct HeatmapVolume {
    pub data: Vec<f64>,
    pub frames: usize,
    pub joints: usize,
    pub height: usize,
    pub width: usize,
    pub sigma_px: f64,
}

impl HeatmapVolume {
    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.joints, self.height, self.width]
    }

    /// Raw little-endian f32 dump plus a JSON sidecar describing the shape.
    pub fn write_binary(&self, base: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(base.with_extension("bin"), bytes)?;
        let sidecar = serde_json::json!({
            "dtype": "f32le",
            "shape": self.shape(),
            "sigma_px": self.sigma_px,
        });
        fs::write(
            base.with_extension("json"),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }
}

// ── Pose file format ─────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct PoseFileJson {
    version: u32,
    joints: usize,
    clips: Vec<PoseClipJson>,
}

#[derive(Serialize, Deserialize)]
struct PoseClipJson {
    id: String,
    label: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fps: Option<f64>,
    frames: Vec<Vec<[f64; 3]>>,
}

pub const POSE_FILE_VERSION: u32 = 1;

/// Parsed pose file: clips plus the count of out-of-range coordinates that
/// were clamped into [0,1].
#[derive(Debug)]
pub struct PoseFile {
    pub clips: Vec<RawPoseClip>,
    pub clamped: usize,
}

pub fn parse_pose_file(path: &Path) -> Result<PoseFile> {
    let text = fs::read_to_string(path)?;
    parse_pose_str(&text)
}

pub fn parse_pose_str(text: &str) -> Result<PoseFile> {
    let file: PoseFileJson = serde_json::from_str(text)
        .map_err(|e| Error::parse(format!("pose file: {e}")))?;
    if file.version != POSE_FILE_VERSION {
        return Err(Error::parse(format!(
            "pose file version {} unsupported (expected {POSE_FILE_VERSION})",
            file.version
        )));
    }
    if file.joints != JOINT_COUNT {
        return Err(Error::parse(format!(
            "pose file declares {} joints, expected {JOINT_COUNT}",
            file.joints
        )));
    }
    let mut clamped = 0usize;
    let mut clips = Vec::with_capacity(file.clips.len());
    for clip in file.clips {
        let mut frames = Vec::with_capacity(clip.frames.len());
        for (fi, frame) in clip.frames.iter().enumerate() {
            if frame.len() != JOINT_COUNT {
                return Err(Error::parse(format!(
                    "clip '{}' frame {fi}: {} joints, expected {JOINT_COUNT}",
                    clip.id,
                    frame.len()
                )));
            }
            let mut joints = Vec::with_capacity(JOINT_COUNT);
            for (ji, &[x, y, c]) in frame.iter().enumerate() {
                if !(x.is_finite() && y.is_finite() && c.is_finite()) {
                    return Err(Error::parse(format!(
                        "clip '{}' frame {fi} joint {ji}: non-finite value",
                        clip.id
                    )));
                }
                let (cx, cy) = (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0));
                if cx != x || cy != y {
                    clamped += 1;
                }
                joints.push(Joint {
                    x: cx,
                    y: cy,
                    confidence: c.clamp(0.0, 1.0),
                });
            }
            frames.push(Skeleton { joints });
        }
        clips.push(RawPoseClip {
            id: clip.id,
            label: clip.label,
            source_fps: clip.fps,
            frames,
        });
    }
    Ok(PoseFile { clips, clamped })
}

pub fn write_pose_file(path: &Path, clips: &[RawPoseClip]) -> Result<()> {
    fs::write(path, pose_file_to_string(clips)?)?;
    Ok(())
}

pub fn pose_file_to_string(clips: &[RawPoseClip]) -> Result<String> {
    let json = PoseFileJson {
        version: POSE_FILE_VERSION,
        joints: JOINT_COUNT,
        clips: clips
            .iter()
            .map(|c| PoseClipJson {
                id: c.id.clone(),
                label: c.label,
                fps: c.source_fps,
                frames: c
                    .frames
                    .iter()
                    .map(|f| f.joints.iter().map(|j| [j.x, j.y, j.confidence]).collect())
                    .collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&json)?)
}

// ── Temporal sampling and windowing ──────────────────────────────────

/// Uniform index sampling: index_i = floor(i·len/target) for i in 0..target.
/// Shorter sequences repeat frames per the same formula.
pub fn uniform_sample_indices(len: usize, target: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::contract("cannot sample from an empty sequence"));
    }
    Ok((0..target).map(|i| i * len / target).collect())
}

/// Sample a raw clip down (or up) to exactly 32 pose frames.
pub fn sample_pose_frames(raw: &RawPoseClip) -> Result<PoseClip> {
    let idx = uniform_sample_indices(raw.frames.len(), POSE_FRAMES)?;
    Ok(PoseClip {
        id: raw.id.clone(),
        source_fps: raw.source_fps,
        frames: idx.into_iter().map(|i| raw.frames[i].clone()).collect(),
    })
}

/// Summarize the 32 pose frames as 8 non-overlapping 4-frame windows:
/// per-joint mean position over visible frames plus displacement magnitude.
pub fn temporal_windows(clip: &PoseClip) -> Result<Vec<WindowSummary>> {
    if clip.frames.len() != POSE_FRAMES {
        return Err(Error::contract(format!(
            "temporal_windows needs {POSE_FRAMES} frames, clip '{}' has {}",
            clip.id,
            clip.frames.len()
        )));
    }
    let joint_count = clip.frames[0].joints.len();
    let mut windows = Vec::with_capacity(RGB_FRAMES);
    for w in 0..RGB_FRAMES {
        let frames = &clip.frames[w * WINDOW_LEN..(w + 1) * WINDOW_LEN];
        let mut joints = Vec::with_capacity(joint_count);
        let mut displacement = Vec::with_capacity(joint_count);
        for j in 0..joint_count {
            let visible: Vec<(f64, f64)> = frames
                .iter()
                .filter(|f| f.joints[j].visible())
                .map(|f| (f.joints[j].x, f.joints[j].y))
                .collect();
            if visible.is_empty() {
                joints.push(None);
                displacement.push(0.0);
            } else {
                let n = visible.len() as f64;
                let mx = visible.iter().map(|p| p.0).sum::<f64>() / n;
                let my = visible.iter().map(|p| p.1).sum::<f64>() / n;
                joints.push(Some((mx, my)));
                let mut max_d = 0.0_f64;
                for a in 0..visible.len() {
                    for b in a + 1..visible.len() {
                        let dx = visible[a].0 - visible[b].0;
                        let dy = visible[a].1 - visible[b].1;
                        max_d = max_d.max((dx * dx + dy * dy).sqrt());
                    }
                }
                displacement.push(max_d);
            }
        }
        let missing = joints.iter().all(|j| j.is_none());
        windows.push(WindowSummary {
            joints,
            displacement,
            missing,
        });
    }
    Ok(windows)
}

// ── Rasterization ────────────────────────────────────────────────────

/// Evaluate one skeleton's per-joint Gaussians on the canvas: J × H × W.
/// Joint (x, y) maps to pixel (x·(W−1), y·(H−1)); a joint at distance d
/// from a pixel contributes exp(−d²/(2σ²)). Missing joints give zero maps.
pub fn rasterize_skeleton(
    skel: &Skeleton,
    canvas: (usize, usize),
    sigma_px: f64,
) -> Result<Vec<f64>> {
    if sigma_px <= 0.0 {
        return Err(Error::config(format!(
            "rasterize sigma must be positive, got {sigma_px}"
        )));
    }
    let (h, w) = canvas;
    if h == 0 || w == 0 {
        return Err(Error::config("rasterize canvas must be non-empty"));
    }
    let mut out = vec![0.0; skel.joints.len() * h * w];
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    let mut col_vals = vec![0.0; w];
    let mut row_vals = vec![0.0; h];
    for (j, joint) in skel.joints.iter().enumerate() {
        if !joint.visible() {
            continue;
        }
        let px = joint.x * (w - 1) as f64;
        let py = joint.y * (h - 1) as f64;
        // The Gaussian is separable: exp(-(dx²+dy²)/2σ²) = exp(-dx²/2σ²)·exp(-dy²/2σ²).
        for (i, cv) in col_vals.iter_mut().enumerate() {
            let dx = i as f64 - px;
            *cv = (-dx * dx * inv).exp();
        }
        for (i, rv) in row_vals.iter_mut().enumerate() {
            let dy = i as f64 - py;
            *rv = (-dy * dy * inv).exp();
        }
        let plane = &mut out[j * h * w..(j + 1) * h * w];
        for (r, rv) in row_vals.iter().enumerate() {
            for (c, cv) in col_vals.iter().enumerate() {
                plane[r * w + c] = rv * cv;
            }
        }
    }
    Ok(out)
}

/// Rasterize all 32 frames and average-pool the heatmaps of each 4-frame
/// window along time, yielding the 8 × J × H × W volume.
pub fn rasterize(clip: &PoseClip, canvas: (usize, usize), sigma_px: f64) -> Result<HeatmapVolume> {
    if clip.frames.len() != POSE_FRAMES {
        return Err(Error::contract(format!(
            "rasterize needs {POSE_FRAMES} frames, clip '{}' has {}",
            clip.id,
            clip.frames.len()
        )));
    }
    let (h, w) = canvas;
    let joints = clip.frames[0].joints.len();
    let plane = joints * h * w;
    let mut data = vec![0.0; RGB_FRAMES * plane];
    for (fi, frame) in clip.frames.iter().enumerate() {
        let maps = rasterize_skeleton(frame, canvas, sigma_px)?;
        let window = fi / WINDOW_LEN;
        let dst = &mut data[window * plane..(window + 1) * plane];
        for (d, m) in dst.iter_mut().zip(&maps) {
            *d += m / WINDOW_LEN as f64;
        }
    }
    Ok(HeatmapVolume {
        data,
        frames: RGB_FRAMES,
        joints,
        height: h,
        width: w,
        sigma_px,
    })
}

// ── Patch relevance ──────────────────────────────────────────────────

/// Distance-based relevance of each patch to the nearest visible joint:
/// w = exp(−min_k ‖patch − joint_k‖² / σ²) in normalized coordinates.
/// Windows with no visible joints fall back to uniform weight 1. With
/// `motion_weighting`, each weight is additionally scaled by the nearest
/// joint's window displacement over the canvas diagonal, clamped to [0,1].
pub fn patch_relevance(
    windows: &[WindowSummary],
    patch_centers: &[(f64, f64)],
    sigma_rel: f64,
    motion_weighting: bool,
) -> Result<Vec<f64>> {
    if patch_centers.is_empty() {
        return Err(Error::contract("patch_relevance: no patch centers"));
    }
    if sigma_rel <= 0.0 {
        return Err(Error::config(format!(
            "patch_relevance sigma must be positive, got {sigma_rel}"
        )));
    }
    let inv = 1.0 / (sigma_rel * sigma_rel);
    let diag = std::f64::consts::SQRT_2;
    let mut out = Vec::with_capacity(windows.len() * patch_centers.len());
    for window in windows {
        if window.missing {
            out.extend(std::iter::repeat(1.0).take(patch_centers.len()));
            continue;
        }
        for &(px, py) in patch_centers {
            let mut best_d2 = f64::INFINITY;
            let mut best_joint = 0;
            for (j, pos) in window.joints.iter().enumerate() {
                if let Some((jx, jy)) = pos {
                    let d2 = (px - jx) * (px - jx) + (py - jy) * (py - jy);
                    if d2 < best_d2 {
                        best_d2 = d2;
                        best_joint = j;
                    }
                }
            }
            let mut w = (-best_d2 * inv).exp();
            if motion_weighting {
                w *= (window.displacement[best_joint] / diag).clamp(0.0, 1.0);
            }
            out.push(w);
        }
    }
    Ok(out)
}

/// Patch-center grid for a square image: ((col+0.5)/g, (row+0.5)/g) in
/// row-major patch order.
pub fn patch_center_grid(grid: usize) -> Vec<(f64, f64)> {
    let mut centers = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        for col in 0..grid {
            centers.push(((col as f64 + 0.5) / grid as f64, (row as f64 + 0.5) / grid as f64));
        }
    }
    centers
}
