//! Structure from motion over per-frame 2D hand-keypoint detections.
//!
//! The detections are treated as observations of a stationary hand seen
//! from a moving virtual camera. Two-view initialization, incremental
//! pose registration and bundle adjustment recover the 3D joint
//! locations and the per-frame virtual camera poses, with the first
//! camera anchored at the identity to fix the gauge.

use thiserror::Error;

use crate::geom::{CameraIntrinsics, PixelPoint, Real, RigidTransform};
use crate::hand::{JointSet3D, NUM_LANDMARKS};

mod bundle;
mod register;
mod residual;
mod two_view;

pub use bundle::{bundle_adjust, reconstruct, rescale_to_metric};
pub use register::{register_frame, RegisterResult};
pub use two_view::{init_two_view, triangulate, TwoViewInit};

pub use residual::{projection_blocks, ProjectionBlocks};

pub(crate) use residual::{huber_cost, robust_weight};

/// Minimum shared landmarks for two-view initialization.
pub const MIN_TWO_VIEW_CORRESPONDENCES: usize = 8;
/// Minimum landmarks for single-frame registration.
pub const MIN_REGISTER_CORRESPONDENCES: usize = 4;
/// Minimum triangulated-in-front points for a two-view candidate.
pub const MIN_CHEIRAL_POINTS: usize = 6;

#[derive(Debug, Error)]
pub enum SfmError {
    #[error("insufficient correspondences: found {found}, need {required}")]
    InsufficientCorrespondences { found: usize, required: usize },
    #[error("degenerate motion between frames {frame_a} and {frame_b} (no parallax)")]
    DegenerateMotion { frame_a: usize, frame_b: usize },
    #[error("solver did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("invalid observations: {0}")]
    InvalidObservations(String),
}

/// One 2D landmark detection with its confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub point: PixelPoint,
    pub confidence: Real,
}

/// Detections for one frame; missing landmarks are `None`.
#[derive(Debug, Clone)]
pub struct FrameObservations {
    pub detections: [Option<Detection>; NUM_LANDMARKS],
    pub timestamp: Option<Real>,
}

impl FrameObservations {
    pub fn empty() -> Self {
        Self { detections: [None; NUM_LANDMARKS], timestamp: None }
    }

    /// Landmarks detected with confidence at or above the threshold.
    pub fn confident(&self, threshold: Real) -> impl Iterator<Item = (usize, &Detection)> {
        self.detections
            .iter()
            .enumerate()
            .filter_map(move |(k, d)| {
                d.as_ref().filter(|d| d.confidence >= threshold).map(|d| (k, d))
            })
    }

    /// Parses the per-frame keypoint document: 21 `u v confidence`
    /// lines in landmark order; confidence 0 encodes a missing
    /// detection.
    pub fn from_text(text: &str) -> Result<Self, SfmError> {
        let mut detections = [None; NUM_LANDMARKS];
        let mut count = 0;
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if count >= NUM_LANDMARKS {
                return Err(SfmError::InvalidObservations(format!(
                    "more than {NUM_LANDMARKS} keypoint lines"
                )));
            }
            let nums: Vec<Real> = line
                .split_whitespace()
                .map(|t| t.parse::<Real>())
                .collect::<Result<_, _>>()
                .map_err(|_| {
                    SfmError::InvalidObservations(format!("bad keypoint line `{line}`"))
                })?;
            if nums.len() != 3 {
                return Err(SfmError::InvalidObservations(format!(
                    "keypoint line needs `u v confidence`, got `{line}`"
                )));
            }
            if nums[2] > 0.0 {
                detections[count] = Some(Detection {
                    point: PixelPoint::new(nums[0], nums[1]),
                    confidence: nums[2],
                });
            }
            count += 1;
        }
        if count != NUM_LANDMARKS {
            return Err(SfmError::InvalidObservations(format!(
                "expected {NUM_LANDMARKS} keypoint lines, got {count}"
            )));
        }
        Ok(Self { detections, timestamp: None })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for d in &self.detections {
            match d {
                Some(det) => out.push_str(&format!(
                    "{:?} {:?} {:?}\n",
                    det.point.u, det.point.v, det.confidence
                )),
                None => out.push_str("0 0 0\n"),
            }
        }
        out
    }
}

/// All frames of detections plus the shared camera intrinsics.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    frames: Vec<FrameObservations>,
    intrinsics: CameraIntrinsics,
}

impl ObservationSet {
    /// Validates frame count, confidence ranges and that every present
    /// detection lies within the image bounds padded by 10%.
    pub fn new(
        frames: Vec<FrameObservations>,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self, SfmError> {
        if frames.len() < 2 {
            return Err(SfmError::InvalidObservations(format!(
                "need at least 2 frames, got {}",
                frames.len()
            )));
        }
        let (w, h) = (intrinsics.width as Real, intrinsics.height as Real);
        let (pad_u, pad_v) = (0.1 * w, 0.1 * h);
        for (i, frame) in frames.iter().enumerate() {
            for (k, det) in frame.detections.iter().enumerate() {
                if let Some(d) = det {
                    if !(0.0..=1.0).contains(&d.confidence) {
                        return Err(SfmError::InvalidObservations(format!(
                            "frame {i} landmark {k}: confidence {} outside [0, 1]",
                            d.confidence
                        )));
                    }
                    if !d.point.u.is_finite()
                        || !d.point.v.is_finite()
                        || d.point.u < -pad_u
                        || d.point.u > w + pad_u
                        || d.point.v < -pad_v
                        || d.point.v > h + pad_v
                    {
                        return Err(SfmError::InvalidObservations(format!(
                            "frame {i} landmark {k}: detection ({}, {}) outside padded bounds",
                            d.point.u, d.point.v
                        )));
                    }
                }
            }
        }
        Ok(Self { frames, intrinsics })
    }

    pub fn frames(&self) -> &[FrameObservations] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    /// Restriction to a frame range (used for steady-segment trimming).
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, SfmError> {
        if start >= end || end > self.frames.len() {
            return Err(SfmError::InvalidObservations(format!(
                "bad frame range [{start}, {end}) for {} frames",
                self.frames.len()
            )));
        }
        Self::new(self.frames[start..end].to_vec(), self.intrinsics)
    }

    /// Landmarks detected at or above `threshold` in both frames.
    pub fn shared_confident(&self, frame_a: usize, frame_b: usize, threshold: Real) -> Vec<usize> {
        (0..NUM_LANDMARKS)
            .filter(|&k| {
                let ok = |f: &FrameObservations| {
                    f.detections[k].map(|d| d.confidence >= threshold).unwrap_or(false)
                };
                ok(&self.frames[frame_a]) && ok(&self.frames[frame_b])
            })
            .collect()
    }
}

/// Solver configuration shared by all least-squares stages.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Initial Levenberg–Marquardt damping.
    pub initial_damping: Real,
    /// Damping bounds for the trust-region loop.
    pub min_damping: Real,
    pub max_damping: Real,
    /// Relative cost-decrease convergence threshold.
    pub cost_decrease_tol: Real,
    /// Step-norm convergence threshold.
    pub step_tol: Real,
    /// Costs below this count as an exact fit (zero-iteration exit).
    pub min_cost: Real,
    /// Huber robust-loss width in pixels.
    pub huber_width: Real,
    /// Detections below this confidence contribute nothing.
    pub confidence_threshold: Real,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_damping: 1e-4,
            min_damping: 1e-12,
            max_damping: 1e8,
            cost_decrease_tol: 1e-12,
            step_tol: 1e-12,
            min_cost: 1e-16,
            huber_width: 4.0,
            confidence_threshold: 0.2,
            seed: 0,
        }
    }
}

/// Reconstruction output: joints, camera poses and diagnostics.
///
/// `camera_poses[0]` is always the identity (gauge anchor) and
/// `final_cost` is the confidence-weighted robust reprojection cost
/// over the inlier observations, which reduces to the plain squared
/// reprojection sum when all confidences are 1 and residuals are small.
#[derive(Debug, Clone)]
pub struct SfMSolution {
    pub joints: JointSet3D,
    /// False for landmarks that never had enough observations.
    pub landmark_observed: [bool; NUM_LANDMARKS],
    pub camera_poses: Vec<RigidTransform>,
    /// False for frames excluded from the optimization.
    pub registered: Vec<bool>,
    pub final_cost: Real,
    /// Per-frame, per-landmark unweighted pixel residual norms.
    pub residuals: Vec<[Option<Real>; NUM_LANDMARKS]>,
    /// Observations that entered the cost (registered frame, observed
    /// landmark, confidence at or above the threshold).
    pub inliers: Vec<[bool; NUM_LANDMARKS]>,
    /// Per-coordinate RMS of the inlier residuals, in pixels.
    pub rms: Real,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after every accepted step.
    pub cost_history: Vec<Real>,
}

impl SfMSolution {
    pub fn num_frames(&self) -> usize {
        self.camera_poses.len()
    }
}
