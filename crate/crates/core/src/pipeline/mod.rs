//! End-to-end orchestration: input loading and validation, steady
//! segment selection, the five capture stages, pose propagation and
//! the result document.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::contact::{
    estimate_adjustment, icp_register, refine_grasp, CapsuleProxy, ContactMap, ContactWeights,
    IcpConfig, PointCloud, RefineConfig, TriMesh,
};
use crate::fit::{fit_palm_pose, joint_hand_sfm, solve_ik, IkConfig};
use crate::geom::{CameraIntrinsics, Real, RigidTransform};
use crate::hand::{
    forward_kinematics, HandParams, HandSkeleton, JointSet3D, NUM_ANGLES, NUM_LANDMARKS,
};
use crate::sfm::{
    reconstruct, rescale_to_metric, FrameObservations, ObservationSet, SolverConfig,
    MIN_REGISTER_CORRESPONDENCES,
};

pub mod docfile;
mod export;

pub use docfile::Document;
pub use export::export_hand_obj;

/// Minimum steady-suffix length accepted by automatic selection.
pub const MIN_STEADY_FRAMES: usize = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error("io: {0}")]
    Io(String),
    #[error("no steady segment: longest steady suffix has {len} frames, need {min}")]
    NoSteadySegment { len: usize, min: usize },
    #[error("stage {stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    fn stage(stage: &'static str, err: impl std::fmt::Display) -> Self {
        PipelineError::Stage { stage, message: err.to_string() }
    }
}

/// How the steady segment is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteadyMode {
    /// Longest steady suffix under the motion threshold.
    Auto,
    /// Explicit 1-based inclusive frame range.
    Range(usize, usize),
}

/// Everything a pipeline run needs: input paths, stage toggles and all
/// solver knobs.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub keypoints_dir: PathBuf,
    pub intrinsics: PathBuf,
    pub mesh: PathBuf,
    pub contact_map: Option<PathBuf>,
    pub turntable_cloud: PathBuf,
    pub grasp_cloud: PathBuf,
    /// Coarse object pose initialization document; identity if absent.
    pub object_init: Option<PathBuf>,
    /// Skeleton template override; the built-in template if absent.
    pub skeleton: Option<PathBuf>,
    pub steady: SteadyMode,
    /// Median 2D residual (pixels) below which a transition counts as
    /// steady.
    pub motion_threshold: Real,
    /// Metric scale assigned to the subject's hand relative to the
    /// template.
    pub hand_scale: Real,
    pub enable_contact_refine: bool,
    pub enable_joint_refine: bool,
    pub seed: u64,
    pub solver: SolverConfig,
    pub ik: IkConfig,
    pub icp: IcpConfig,
    pub weights: ContactWeights,
    pub refine: RefineConfig,
    /// Optional posed-skeleton OBJ dump for visual inspection.
    pub dump_skeleton: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn with_root(root: &Path) -> Self {
        Self {
            keypoints_dir: root.join("keypoints"),
            intrinsics: root.join("intrinsics.txt"),
            mesh: root.join("mesh.obj"),
            contact_map: Some(root.join("contact_map.txt")),
            turntable_cloud: root.join("turntable.xyz"),
            grasp_cloud: root.join("grasp.xyz"),
            object_init: Some(root.join("object_init.txt")),
            skeleton: None,
            steady: SteadyMode::Auto,
            motion_threshold: 2.5,
            hand_scale: 1.0,
            enable_contact_refine: true,
            enable_joint_refine: true,
            seed: 0,
            solver: SolverConfig::default(),
            ik: IkConfig::default(),
            icp: IcpConfig::default(),
            weights: ContactWeights::default(),
            refine: RefineConfig::default(),
            dump_skeleton: None,
        }
    }

    /// Parses the config document; relative paths resolve against the
    /// config file's directory.
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Io(format!("cannot read {}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_text(&text, &root)
    }

    pub fn from_text(text: &str, root: &Path) -> Result<Self, PipelineError> {
        let doc = Document::parse(text)?;
        let mut cfg = Self::with_root(root);
        cfg.contact_map = None;
        cfg.object_init = None;

        let resolve = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                root.join(p)
            }
        };
        let sec = "pipeline";
        if let Some(v) = doc.get(sec, "keypoints_dir") {
            cfg.keypoints_dir = resolve(v);
        }
        if let Some(v) = doc.get(sec, "intrinsics") {
            cfg.intrinsics = resolve(v);
        }
        if let Some(v) = doc.get(sec, "mesh") {
            cfg.mesh = resolve(v);
        }
        if let Some(v) = doc.get(sec, "contact_map") {
            cfg.contact_map = Some(resolve(v));
        }
        if let Some(v) = doc.get(sec, "turntable_cloud") {
            cfg.turntable_cloud = resolve(v);
        }
        if let Some(v) = doc.get(sec, "grasp_cloud") {
            cfg.grasp_cloud = resolve(v);
        }
        if let Some(v) = doc.get(sec, "object_init") {
            cfg.object_init = Some(resolve(v));
        }
        if let Some(v) = doc.get(sec, "skeleton") {
            cfg.skeleton = Some(resolve(v));
        }
        if let Some(v) = doc.get(sec, "steady") {
            cfg.steady = if v == "auto" {
                SteadyMode::Auto
            } else {
                let parts: Vec<&str> = v.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(PipelineError::Parse(format!(
                        "steady must be `auto` or `<first> <last>`, got `{v}`"
                    )));
                }
                let a = parts[0]
                    .parse()
                    .map_err(|_| PipelineError::Parse("bad steady range".into()))?;
                let b = parts[1]
                    .parse()
                    .map_err(|_| PipelineError::Parse("bad steady range".into()))?;
                SteadyMode::Range(a, b)
            };
        }
        if let Some(v) = doc.get(sec, "motion_threshold") {
            cfg.motion_threshold = docfile::parse_real(v)?;
        }
        if let Some(v) = doc.get(sec, "hand_scale") {
            cfg.hand_scale = docfile::parse_real(v)?;
        }
        if let Some(v) = doc.get(sec, "contact_refine") {
            cfg.enable_contact_refine = v == "true" || v == "1";
        }
        if let Some(v) = doc.get(sec, "joint_refine") {
            cfg.enable_joint_refine = v == "true" || v == "1";
        }
        if let Some(v) = doc.get(sec, "seed") {
            cfg.seed = v.parse().map_err(|_| PipelineError::Parse("bad seed".into()))?;
            cfg.solver.seed = cfg.seed;
        }
        if let Some(v) = doc.get(sec, "max_iterations") {
            cfg.solver.max_iterations =
                v.parse().map_err(|_| PipelineError::Parse("bad max_iterations".into()))?;
        }
        if let Some(v) = doc.get(sec, "huber_width") {
            cfg.solver.huber_width = docfile::parse_real(v)?;
        }
        if let Some(v) = doc.get(sec, "conf_threshold") {
            cfg.solver.confidence_threshold = docfile::parse_real(v)?;
        }
        if let Some(v) = doc.get(sec, "ik_max_iterations") {
            cfg.ik.max_iterations =
                v.parse().map_err(|_| PipelineError::Parse("bad ik_max_iterations".into()))?;
        }
        if let Some(v) = doc.get(sec, "ik_tolerance") {
            cfg.ik.position_tol = docfile::parse_real(v)?;
        }
        if let Some(v) = doc.get(sec, "ik_damping") {
            cfg.ik.damping = docfile::parse_real(v)?;
        }
        if let Some(v) = doc.get(sec, "icp_max_iterations") {
            cfg.icp.max_iterations =
                v.parse().map_err(|_| PipelineError::Parse("bad icp_max_iterations".into()))?;
        }
        if let Some(v) = doc.get(sec, "contact_threshold") {
            cfg.weights.contact_threshold = docfile::parse_real(v)?;
        }
        if let Some(v) = doc.get(sec, "attract_weight") {
            cfg.weights.attract = docfile::parse_real(v)?;
        }
        if let Some(v) = doc.get(sec, "repel_weight") {
            cfg.weights.repel = docfile::parse_real(v)?;
        }
        if let Some(v) = doc.get(sec, "penetration_weight") {
            cfg.weights.penetration = docfile::parse_real(v)?;
        }
        if let Some(v) = doc.get(sec, "repel_margin") {
            cfg.weights.repel_margin = docfile::parse_real(v)?;
        }
        if let Some(v) = doc.get(sec, "near_radius") {
            cfg.weights.near_radius = docfile::parse_real(v)?;
        }
        if let Some(v) = doc.get(sec, "refine_max_iterations") {
            cfg.refine.max_iterations = v
                .parse()
                .map_err(|_| PipelineError::Parse("bad refine_max_iterations".into()))?;
        }
        if let Some(v) = doc.get(sec, "refine_gradient_tol") {
            cfg.refine.gradient_tol = docfile::parse_real(v)?;
        }
        Ok(cfg)
    }

    /// Serializes the path and toggle fields (solver knobs at their
    /// defaults are omitted).
    pub fn to_text(&self, root: &Path) -> String {
        let rel = |p: &Path| -> String {
            p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned()
        };
        let mut doc = Document::new();
        doc.section("pipeline")
            .entry("keypoints_dir", rel(&self.keypoints_dir))
            .entry("intrinsics", rel(&self.intrinsics))
            .entry("mesh", rel(&self.mesh))
            .entry("turntable_cloud", rel(&self.turntable_cloud))
            .entry("grasp_cloud", rel(&self.grasp_cloud));
        if let Some(p) = &self.contact_map {
            doc.entry("contact_map", rel(p));
        }
        if let Some(p) = &self.object_init {
            doc.entry("object_init", rel(p));
        }
        if let Some(p) = &self.skeleton {
            doc.entry("skeleton", rel(p));
        }
        match self.steady {
            SteadyMode::Auto => doc.entry("steady", "auto"),
            SteadyMode::Range(a, b) => doc.entry("steady", format!("{a} {b}")),
        };
        doc.entry_real("motion_threshold", self.motion_threshold)
            .entry_real("hand_scale", self.hand_scale)
            .entry_bool("contact_refine", self.enable_contact_refine)
            .entry_bool("joint_refine", self.enable_joint_refine)
            .entry("seed", self.seed.to_string());
        doc.to_text()
    }
}

/// Longest steady suffix of frames: the median per-landmark
/// displacement residual after removing the best-fit 2D similarity
/// between consecutive frames must stay below the threshold.
///
/// Returns a 0-based half-open frame range. Fails with
/// [`PipelineError::NoSteadySegment`] when the suffix is shorter than
/// [`MIN_STEADY_FRAMES`]; callers must then supply an explicit range.
pub fn select_steady_frames(
    obs: &ObservationSet,
    motion_threshold: Real,
    confidence_threshold: Real,
) -> Result<std::ops::Range<usize>, PipelineError> {
    let n = obs.len();
    let mut start = n - 1;
    for i in (1..n).rev() {
        let residual = similarity_motion_residual(obs, i - 1, i, confidence_threshold);
        if residual <= motion_threshold {
            start = i - 1;
        } else {
            break;
        }
    }
    let len = n - start;
    if len < MIN_STEADY_FRAMES {
        return Err(PipelineError::NoSteadySegment { len, min: MIN_STEADY_FRAMES });
    }
    Ok(start..n)
}

/// Median displacement of shared landmarks after the best 2D
/// similarity mapping frame `a` onto frame `b`; infinite when fewer
/// than 4 landmarks are shared.
fn similarity_motion_residual(
    obs: &ObservationSet,
    a: usize,
    b: usize,
    confidence_threshold: Real,
) -> Real {
    let shared = obs.shared_confident(a, b, confidence_threshold);
    if shared.len() < 4 {
        return Real::INFINITY;
    }
    let pa: Vec<(Real, Real)> = shared
        .iter()
        .map(|&k| {
            let p = obs.frames()[a].detections[k].unwrap().point;
            (p.u, p.v)
        })
        .collect();
    let pb: Vec<(Real, Real)> = shared
        .iter()
        .map(|&k| {
            let p = obs.frames()[b].detections[k].unwrap().point;
            (p.u, p.v)
        })
        .collect();

    // Closed-form 2D similarity (no reflection): q ≈ s·R·p + t with
    // s·R = [a -b; b a].
    let n = pa.len() as Real;
    let ca = (pa.iter().map(|p| p.0).sum::<Real>() / n, pa.iter().map(|p| p.1).sum::<Real>() / n);
    let cb = (pb.iter().map(|p| p.0).sum::<Real>() / n, pb.iter().map(|p| p.1).sum::<Real>() / n);
    let mut dot = 0.0;
    let mut cross = 0.0;
    let mut norm = 0.0;
    for (p, q) in pa.iter().zip(&pb) {
        let (px, py) = (p.0 - ca.0, p.1 - ca.1);
        let (qx, qy) = (q.0 - cb.0, q.1 - cb.1);
        dot += px * qx + py * qy;
        cross += px * qy - py * qx;
        norm += px * px + py * py;
    }
    let (sa, sb) = if norm > 1e-12 { (dot / norm, cross / norm) } else { (1.0, 0.0) };

    let mut residuals: Vec<Real> = pa
        .iter()
        .zip(&pb)
        .map(|(p, q)| {
            let (px, py) = (p.0 - ca.0, p.1 - ca.1);
            let mx = sa * px - sb * py + cb.0;
            let my = sb * px + sa * py + cb.1;
            ((mx - q.0).powi(2) + (my - q.1).powi(2)).sqrt()
        })
        .collect();
    residuals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = residuals.len();
    if m % 2 == 1 {
        residuals[m / 2]
    } else {
        0.5 * (residuals[m / 2 - 1] + residuals[m / 2])
    }
}

/// Propagates the grasped-object and palm poses into every camera
/// frame: `cTo = wTc⁻¹ · T_adj · wTo` and `cTp = wTc⁻¹ · wTp`.
pub fn propagate_poses(
    camera_poses: &[RigidTransform],
    adjustment: &RigidTransform,
    object_pose: &RigidTransform,
    palm_pose: &RigidTransform,
) -> Vec<(RigidTransform, RigidTransform)> {
    let grasped = adjustment.compose(object_pose);
    camera_poses
        .iter()
        .map(|cam| {
            let inv = cam.inverse();
            (inv.compose(&grasped), inv.compose(palm_pose))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStatus {
    /// Before the steady segment (grasp adjustment phase).
    Transient,
    Registered,
    ExcludedLowConfidence,
    ExcludedUnconverged,
}

impl FrameStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrameStatus::Transient => "transient",
            FrameStatus::Registered => "registered",
            FrameStatus::ExcludedLowConfidence => "excluded_low_confidence",
            FrameStatus::ExcludedUnconverged => "excluded_unconverged",
        }
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        match text {
            "transient" => Ok(FrameStatus::Transient),
            "registered" => Ok(FrameStatus::Registered),
            "excluded_low_confidence" => Ok(FrameStatus::ExcludedLowConfidence),
            "excluded_unconverged" => Ok(FrameStatus::ExcludedUnconverged),
            other => Err(PipelineError::Parse(format!("unknown frame status `{other}`"))),
        }
    }
}

/// Disposition of one input frame.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub input_index: usize,
    pub file_name: String,
    pub status: FrameStatus,
    /// Index into the steady-segment pose lists, when applicable.
    pub steady_index: Option<usize>,
}

/// Per-stage diagnostics of a pipeline run.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub steady_start: usize,
    pub steady_end: usize,
    pub icp_rms: Real,
    pub icp_iterations: usize,
    pub icp_converged: bool,
    pub sfm_cost: Real,
    pub sfm_rms: Real,
    pub sfm_iterations: usize,
    pub sfm_converged: bool,
    pub sfm_joints: JointSet3D,
    pub landmark_observed: [bool; NUM_LANDMARKS],
    pub palm_scale_raw: Real,
    pub ik_rms: Real,
    pub ik_iterations: usize,
    pub ik_converged: bool,
    pub adjust_rms: Real,
    pub adjust_converged: bool,
    pub joint_refine: Option<JointRefineDiag>,
    pub contact_refine: Option<ContactRefineDiag>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct JointRefineDiag {
    pub initial_cost: Real,
    pub final_cost: Real,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ContactRefineDiag {
    pub initial_energy: Real,
    pub final_energy: Real,
    pub initial_penetration: Real,
    pub final_penetration: Real,
    pub mean_contacted_distance_initial: Real,
    pub mean_contacted_distance_final: Real,
    pub iterations: usize,
    pub converged: bool,
}

/// Full capture: hand, object pose, adjustment, per-frame camera poses
/// and the propagated per-frame object/palm poses, plus diagnostics.
#[derive(Debug, Clone)]
pub struct CaptureResult {
    /// Final hand (contact-refined when Stage 5 is enabled).
    pub hand: HandParams,
    /// Reprojection-consistent hand before contact refinement.
    pub hand_pre_contact: HandParams,
    /// Turntable object pose `wTo`.
    pub object_pose_world: RigidTransform,
    /// Grasp adjustment `T_adj`; the grasped pose is `T_adj · wTo`.
    pub adjustment: RigidTransform,
    /// Virtual camera poses over the steady segment; index 0 is the
    /// identity anchor.
    pub camera_poses: Vec<RigidTransform>,
    pub registered: Vec<bool>,
    pub object_in_camera: Vec<RigidTransform>,
    pub palm_in_camera: Vec<RigidTransform>,
    /// One record per input frame (transient frames included).
    pub frames: Vec<FrameRecord>,
    pub diagnostics: Diagnostics,
}

impl CaptureResult {
    /// True when every executed stage converged.
    pub fn all_converged(&self) -> bool {
        let d = &self.diagnostics;
        d.icp_converged
            && d.sfm_converged
            && d.ik_converged
            && d.adjust_converged
            && d.joint_refine.map(|j| j.converged).unwrap_or(true)
            && d.contact_refine.map(|c| c.converged).unwrap_or(true)
    }

    pub fn to_text(&self) -> String {
        let mut doc = Document::new();
        let d = &self.diagnostics;
        doc.section("capture")
            .entry_usize("schema", 1)
            .entry_usize("frames_total", self.frames.len())
            .entry_usize("steady_frames", self.camera_poses.len())
            .entry_usize("steady_start", d.steady_start)
            .entry_usize("steady_end", d.steady_end)
            .entry("seed", d.seed.to_string());

        doc.section("hand")
            .entry_pose("palm_pose", &self.hand.palm_pose)
            .entry_real("palm_scale", self.hand.palm_scale)
            .entry_reals("angles", &self.hand.angles);
        doc.section("hand_pre_contact")
            .entry_pose("palm_pose", &self.hand_pre_contact.palm_pose)
            .entry_real("palm_scale", self.hand_pre_contact.palm_scale)
            .entry_reals("angles", &self.hand_pre_contact.angles);
        doc.section("object").entry_pose("pose", &self.object_pose_world);
        doc.section("adjustment").entry_pose("pose", &self.adjustment);

        doc.section("cameras");
        for pose in &self.camera_poses {
            doc.entry_pose("pose", pose);
        }
        let reg: Vec<Real> = self.registered.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
        doc.entry_reals("registered", &reg);

        doc.section("propagated_object");
        for pose in &self.object_in_camera {
            doc.entry_pose("pose", pose);
        }
        doc.section("propagated_palm");
        for pose in &self.palm_in_camera {
            doc.entry_pose("pose", pose);
        }

        doc.section("frames");
        for f in &self.frames {
            let steady = f.steady_index.map(|i| i as i64).unwrap_or(-1);
            doc.entry(
                "frame",
                format!("{} {} {} {}", f.input_index, f.status.as_str(), steady, f.file_name),
            );
        }

        doc.section("diagnostics")
            .entry_real("icp_rms", d.icp_rms)
            .entry_usize("icp_iterations", d.icp_iterations)
            .entry_bool("icp_converged", d.icp_converged)
            .entry_real("sfm_cost", d.sfm_cost)
            .entry_real("sfm_rms", d.sfm_rms)
            .entry_usize("sfm_iterations", d.sfm_iterations)
            .entry_bool("sfm_converged", d.sfm_converged)
            .entry_real("palm_scale_raw", d.palm_scale_raw)
            .entry_real("ik_rms", d.ik_rms)
            .entry_usize("ik_iterations", d.ik_iterations)
            .entry_bool("ik_converged", d.ik_converged)
            .entry_real("adjust_rms", d.adjust_rms)
            .entry_bool("adjust_converged", d.adjust_converged);
        let joints_flat: Vec<Real> =
            d.sfm_joints.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        doc.entry_reals("sfm_joints", &joints_flat);
        let observed: Vec<Real> =
            d.landmark_observed.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        doc.entry_reals("landmark_observed", &observed);
        if let Some(j) = d.joint_refine {
            doc.section("joint_refine")
                .entry_real("initial_cost", j.initial_cost)
                .entry_real("final_cost", j.final_cost)
                .entry_usize("iterations", j.iterations)
                .entry_bool("converged", j.converged);
        }
        if let Some(c) = d.contact_refine {
            doc.section("contact_refine")
                .entry_real("initial_energy", c.initial_energy)
                .entry_real("final_energy", c.final_energy)
                .entry_real("initial_penetration", c.initial_penetration)
                .entry_real("final_penetration", c.final_penetration)
                .entry_real("mean_contacted_distance_initial", c.mean_contacted_distance_initial)
                .entry_real("mean_contacted_distance_final", c.mean_contacted_distance_final)
                .entry_usize("iterations", c.iterations)
                .entry_bool("converged", c.converged);
        }
        doc.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        let doc = Document::parse(text)?;
        let read_hand = |section: &str| -> Result<HandParams, PipelineError> {
            let palm_pose = doc.require_pose(section, "palm_pose")?;
            let palm_scale = doc.require_real(section, "palm_scale")?;
            let angles_vec = doc.require_reals(section, "angles")?;
            let angles: [Real; NUM_ANGLES] = angles_vec.try_into().map_err(|v: Vec<Real>| {
                PipelineError::Parse(format!("expected 20 angles, got {}", v.len()))
            })?;
            Ok(HandParams { palm_pose, palm_scale, angles })
        };
        let read_poses = |section: &str| -> Result<Vec<RigidTransform>, PipelineError> {
            doc.get_all(section, "pose").into_iter().map(docfile::parse_pose).collect()
        };

        let hand = read_hand("hand")?;
        let hand_pre_contact = read_hand("hand_pre_contact")?;
        let object_pose_world = doc.require_pose("object", "pose")?;
        let adjustment = doc.require_pose("adjustment", "pose")?;
        let camera_poses = read_poses("cameras")?;
        let registered: Vec<bool> = doc
            .require_reals("cameras", "registered")?
            .into_iter()
            .map(|v| v != 0.0)
            .collect();
        let object_in_camera = read_poses("propagated_object")?;
        let palm_in_camera = read_poses("propagated_palm")?;

        let mut frames = Vec::new();
        for line in doc.get_all("frames", "frame") {
            let parts: Vec<&str> = line.splitn(4, ' ').collect();
            if parts.len() != 4 {
                return Err(PipelineError::Parse(format!("bad frame record `{line}`")));
            }
            let steady: i64 =
                parts[2].parse().map_err(|_| PipelineError::Parse("bad steady index".into()))?;
            frames.push(FrameRecord {
                input_index: parts[0]
                    .parse()
                    .map_err(|_| PipelineError::Parse("bad frame index".into()))?,
                status: FrameStatus::parse(parts[1])?,
                steady_index: if steady < 0 { None } else { Some(steady as usize) },
                file_name: parts[3].to_string(),
            });
        }

        let joints_flat = doc.require_reals("diagnostics", "sfm_joints")?;
        if joints_flat.len() != 3 * NUM_LANDMARKS {
            return Err(PipelineError::Parse("bad sfm_joints length".into()));
        }
        let mut sfm_joints = JointSet3D::zeros();
        for k in 0..NUM_LANDMARKS {
            sfm_joints.points[k] = crate::geom::Vec3::new(
                joints_flat[3 * k],
                joints_flat[3 * k + 1],
                joints_flat[3 * k + 2],
            );
        }
        let observed_flat = doc.require_reals("diagnostics", "landmark_observed")?;
        let mut landmark_observed = [false; NUM_LANDMARKS];
        for (o, v) in landmark_observed.iter_mut().zip(observed_flat) {
            *o = v != 0.0;
        }

        let joint_refine = if doc.has_section("joint_refine") {
            Some(JointRefineDiag {
                initial_cost: doc.require_real("joint_refine", "initial_cost")?,
                final_cost: doc.require_real("joint_refine", "final_cost")?,
                iterations: doc.require_usize("joint_refine", "iterations")?,
                converged: doc.require_bool("joint_refine", "converged")?,
            })
        } else {
            None
        };
        let contact_refine = if doc.has_section("contact_refine") {
            Some(ContactRefineDiag {
                initial_energy: doc.require_real("contact_refine", "initial_energy")?,
                final_energy: doc.require_real("contact_refine", "final_energy")?,
                initial_penetration: doc.require_real("contact_refine", "initial_penetration")?,
                final_penetration: doc.require_real("contact_refine", "final_penetration")?,
                mean_contacted_distance_initial: doc
                    .require_real("contact_refine", "mean_contacted_distance_initial")?,
                mean_contacted_distance_final: doc
                    .require_real("contact_refine", "mean_contacted_distance_final")?,
                iterations: doc.require_usize("contact_refine", "iterations")?,
                converged: doc.require_bool("contact_refine", "converged")?,
            })
        } else {
            None
        };

        let diagnostics = Diagnostics {
            steady_start: doc.require_usize("capture", "steady_start")?,
            steady_end: doc.require_usize("capture", "steady_end")?,
            icp_rms: doc.require_real("diagnostics", "icp_rms")?,
            icp_iterations: doc.require_usize("diagnostics", "icp_iterations")?,
            icp_converged: doc.require_bool("diagnostics", "icp_converged")?,
            sfm_cost: doc.require_real("diagnostics", "sfm_cost")?,
            sfm_rms: doc.require_real("diagnostics", "sfm_rms")?,
            sfm_iterations: doc.require_usize("diagnostics", "sfm_iterations")?,
            sfm_converged: doc.require_bool("diagnostics", "sfm_converged")?,
            sfm_joints,
            landmark_observed,
            palm_scale_raw: doc.require_real("diagnostics", "palm_scale_raw")?,
            ik_rms: doc.require_real("diagnostics", "ik_rms")?,
            ik_iterations: doc.require_usize("diagnostics", "ik_iterations")?,
            ik_converged: doc.require_bool("diagnostics", "ik_converged")?,
            adjust_rms: doc.require_real("diagnostics", "adjust_rms")?,
            adjust_converged: doc.require_bool("diagnostics", "adjust_converged")?,
            joint_refine,
            contact_refine,
            seed: doc
                .require("capture", "seed")?
                .parse()
                .map_err(|_| PipelineError::Parse("bad seed".into()))?,
        };

        Ok(CaptureResult {
            hand,
            hand_pre_contact,
            object_pose_world,
            adjustment,
            camera_poses,
            registered,
            object_in_camera,
            palm_in_camera,
            frames,
            diagnostics,
        })
    }
}

/// Inputs loaded and validated before any stage runs.
pub struct PipelineInputs {
    pub skeleton: HandSkeleton,
    pub observations: ObservationSet,
    pub frame_files: Vec<String>,
    pub mesh: TriMesh,
    pub contact_map: Option<ContactMap>,
    pub turntable_cloud: PointCloud,
    pub grasp_cloud: PointCloud,
    pub object_init: RigidTransform,
}

/// Loads every input named by the config, failing fast with the
/// offending path before any stage runs.
pub fn load_inputs(config: &PipelineConfig) -> Result<PipelineInputs, PipelineError> {
    let skeleton = match &config.skeleton {
        Some(path) => HandSkeleton::from_file(path)
            .map_err(|e| PipelineError::Config(format!("skeleton {}: {e}", path.display())))?,
        None => HandSkeleton::default_template(),
    };

    let intrinsics_text = std::fs::read_to_string(&config.intrinsics).map_err(|e| {
        PipelineError::Config(format!("intrinsics {}: {e}", config.intrinsics.display()))
    })?;
    let intrinsics = CameraIntrinsics::from_text(&intrinsics_text).map_err(|e| {
        PipelineError::Config(format!("intrinsics {}: {e}", config.intrinsics.display()))
    })?;

    let (observations, frame_files) = load_observations(&config.keypoints_dir, intrinsics)?;

    let mesh = TriMesh::from_file(&config.mesh)
        .map_err(|e| PipelineError::Config(format!("mesh {}: {e}", config.mesh.display())))?;

    let contact_map = if config.enable_contact_refine {
        let path = config.contact_map.as_ref().ok_or_else(|| {
            PipelineError::Config("contact refinement enabled but no contact_map path given".into())
        })?;
        Some(
            ContactMap::from_file(path, &mesh).map_err(|e| {
                PipelineError::Config(format!("contact map {}: {e}", path.display()))
            })?,
        )
    } else {
        None
    };

    let turntable_cloud = PointCloud::from_file(&config.turntable_cloud).map_err(|e| {
        PipelineError::Config(format!("turntable cloud {}: {e}", config.turntable_cloud.display()))
    })?;
    let grasp_cloud = PointCloud::from_file(&config.grasp_cloud).map_err(|e| {
        PipelineError::Config(format!("grasp cloud {}: {e}", config.grasp_cloud.display()))
    })?;

    let object_init = match &config.object_init {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                PipelineError::Config(format!("object init {}: {e}", path.display()))
            })?;
            docfile::read_pose_document(&text).map_err(|e| {
                PipelineError::Config(format!("object init {}: {e}", path.display()))
            })?
        }
        None => RigidTransform::identity(),
    };

    Ok(PipelineInputs {
        skeleton,
        observations,
        frame_files,
        mesh,
        contact_map,
        turntable_cloud,
        grasp_cloud,
        object_init,
    })
}

/// Loads all `.txt` keypoint frames in the directory in file-name
/// order.
pub fn load_observations(
    dir: &Path,
    intrinsics: CameraIntrinsics,
) -> Result<(ObservationSet, Vec<String>), PipelineError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| PipelineError::Config(format!("keypoints dir {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "txt").unwrap_or(false))
        .collect();
    files.sort();
    if files.len() < 2 {
        return Err(PipelineError::Config(format!(
            "keypoints dir {} has {} frame files, need at least 2",
            dir.display(),
            files.len()
        )));
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut names = Vec::with_capacity(files.len());
    for path in &files {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let frame = FrameObservations::from_text(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        frames.push(frame);
        names.push(path.file_name().unwrap().to_string_lossy().into_owned());
    }
    let obs = ObservationSet::new(frames, intrinsics)
        .map_err(|e| PipelineError::Config(format!("keypoints dir {}: {e}", dir.display())))?;
    Ok((obs, names))
}

/// Runs all stages and assembles the capture result.
///
/// Stage order: object pose from the turntable cloud, steady-segment
/// selection, structure from motion with metric rescaling, palm fit
/// and inverse kinematics, grasp-adjustment estimation, the optional
/// joint hand+camera refinement (initialized from the staged fit), the
/// optional contact refinement against the grasped-object pose, and
/// finally pose propagation to every steady frame.
pub fn run_pipeline(config: &PipelineConfig) -> Result<CaptureResult, PipelineError> {
    let inputs = load_inputs(config)?;
    let skeleton = &inputs.skeleton;

    // Stage 1: object pose on the turntable.
    let icp = icp_register(&inputs.turntable_cloud, &inputs.mesh, &inputs.object_init, &config.icp)
        .map_err(|e| PipelineError::stage("object-pose", e))?;
    let object_pose = icp.pose;

    // Steady-segment selection.
    let total_frames = inputs.observations.len();
    let range = match config.steady {
        SteadyMode::Auto => select_steady_frames(
            &inputs.observations,
            config.motion_threshold,
            config.solver.confidence_threshold,
        )?,
        SteadyMode::Range(first, last) => {
            if first < 1 || last < first || last > total_frames {
                return Err(PipelineError::Config(format!(
                    "steady range {first}..{last} invalid for {total_frames} frames"
                )));
            }
            (first - 1)..last
        }
    };
    let steady_obs = inputs
        .observations
        .slice(range.start, range.end)
        .map_err(|e| PipelineError::stage("sfm", e))?;

    // Stage 2: structure from motion, then pin the scale gauge so the
    // palm-fit scale equals the configured hand scale.
    let mut solver = config.solver;
    solver.seed = config.seed;
    let solution = reconstruct(&steady_obs, &solver).map_err(|e| PipelineError::stage("sfm", e))?;
    let (_, raw_scale) =
        fit_palm_pose(&solution.joints, skeleton).map_err(|e| PipelineError::stage("sfm", e))?;
    let solution = rescale_to_metric(&solution, config.hand_scale / raw_scale);

    // Stage 3: palm pose + inverse kinematics.
    let (palm_pose, palm_scale) = fit_palm_pose(&solution.joints, skeleton)
        .map_err(|e| PipelineError::stage("fit-hand", e))?;
    let ik = solve_ik(skeleton, &palm_pose, palm_scale, &solution.joints, &config.ik);
    let staged_hand = HandParams { palm_pose, palm_scale, angles: ik.angles };

    // Grasp adjustment from the grasp-phase cloud.
    let (adjustment, adjust_icp) =
        estimate_adjustment(&inputs.grasp_cloud, &inputs.mesh, &object_pose, &config.icp)
            .map_err(|e| PipelineError::stage("adjust", e))?;

    // Optional joint hand+camera refinement (initialized from the
    // staged fit, per the two-stage-to-joint progression).
    let mut camera_poses = solution.camera_poses.clone();
    let mut pre_contact_hand = staged_hand;
    let mut joint_diag = None;
    if config.enable_joint_refine {
        let refined = joint_hand_sfm(
            &steady_obs,
            skeleton,
            &staged_hand,
            &camera_poses,
            &solution.registered,
            &solver,
        );
        joint_diag = Some(JointRefineDiag {
            initial_cost: refined.initial_cost,
            final_cost: refined.final_cost,
            iterations: refined.iterations,
            converged: refined.converged,
        });
        camera_poses = refined.camera_poses;
        pre_contact_hand = refined.params;
    }

    // Stage 5: contact-driven refinement against the grasped object.
    let mut final_hand = pre_contact_hand;
    let mut contact_diag = None;
    if config.enable_contact_refine {
        let cmap = inputs.contact_map.as_ref().expect("validated in load_inputs");
        let grasped_mesh = inputs.mesh.transformed(&adjustment.compose(&object_pose));
        let proxy = CapsuleProxy::from_skeleton(skeleton);
        let refined = refine_grasp(
            skeleton,
            &pre_contact_hand,
            &proxy,
            &grasped_mesh,
            cmap,
            &config.weights,
            &config.refine,
        );
        contact_diag = Some(ContactRefineDiag {
            initial_energy: refined.initial.total,
            final_energy: refined.final_energy.total,
            initial_penetration: refined.initial.penetration,
            final_penetration: refined.final_energy.penetration,
            mean_contacted_distance_initial: refined.initial.mean_contacted_distance,
            mean_contacted_distance_final: refined.final_energy.mean_contacted_distance,
            iterations: refined.iterations,
            converged: refined.converged,
        });
        final_hand = refined.params;
    }

    // Propagate poses to every steady frame.
    let propagated =
        propagate_poses(&camera_poses, &adjustment, &object_pose, &final_hand.palm_pose);
    let (object_in_camera, palm_in_camera): (Vec<_>, Vec<_>) = propagated.into_iter().unzip();

    // Per-input-frame dispositions.
    let frames: Vec<FrameRecord> = (0..total_frames)
        .map(|i| {
            let file_name = inputs.frame_files[i].clone();
            if i < range.start {
                return FrameRecord {
                    input_index: i,
                    file_name,
                    status: FrameStatus::Transient,
                    steady_index: None,
                };
            }
            let steady_index = i - range.start;
            let status = if solution.registered[steady_index] {
                FrameStatus::Registered
            } else {
                let usable = steady_obs.frames()[steady_index]
                    .confident(solver.confidence_threshold)
                    .filter(|(k, _)| solution.landmark_observed[*k])
                    .count();
                if usable < MIN_REGISTER_CORRESPONDENCES {
                    FrameStatus::ExcludedLowConfidence
                } else {
                    FrameStatus::ExcludedUnconverged
                }
            };
            FrameRecord { input_index: i, file_name, status, steady_index: Some(steady_index) }
        })
        .collect();

    let result = CaptureResult {
        hand: final_hand,
        hand_pre_contact: pre_contact_hand,
        object_pose_world: object_pose,
        adjustment,
        camera_poses,
        registered: solution.registered.clone(),
        object_in_camera,
        palm_in_camera,
        frames,
        diagnostics: Diagnostics {
            steady_start: range.start,
            steady_end: range.end,
            icp_rms: icp.rms,
            icp_iterations: icp.iterations,
            icp_converged: icp.converged,
            sfm_cost: solution.final_cost,
            sfm_rms: solution.rms,
            sfm_iterations: solution.iterations,
            sfm_converged: solution.converged,
            sfm_joints: solution.joints,
            landmark_observed: solution.landmark_observed,
            palm_scale_raw: raw_scale,
            ik_rms: ik.rms,
            ik_iterations: ik.iterations,
            ik_converged: ik.converged,
            adjust_rms: adjust_icp.rms,
            adjust_converged: adjust_icp.converged,
            joint_refine: joint_diag,
            contact_refine: contact_diag,
            seed: config.seed,
        },
    };

    if let Some(path) = &config.dump_skeleton {
        let proxy = CapsuleProxy::from_skeleton(skeleton);
        let joints = forward_kinematics(skeleton, &result.hand);
        export_hand_obj(skeleton, &joints, &proxy, result.hand.palm_scale, path)
            .map_err(|e| PipelineError::Io(e.to_string()))?;
    }

    Ok(result)
}
