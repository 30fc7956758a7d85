//! Ground-truth synthetic scene generation and metric evaluation: the
//! independent oracle for the whole pipeline.
//!
//! A scene holds the true hand, object poses, camera trajectory and all
//! derived inputs (keypoint observations with configurable noise, depth
//! clouds, contact map). [`write_dataset`] emits the scene in the
//! pipeline's input formats plus a ground-truth document;
//! [`evaluate`] scores a capture result against the truth with
//! gauge-aware metrics.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::contact::{capsule_distance, CapsuleProxy, ContactMap, PointCloud, TriMesh};
use crate::geom::{
    project, rotation_exp, umeyama_align_rigid, CameraIntrinsics, Mat3, PixelPoint, Real,
    RigidTransform, Vec3,
};
use crate::hand::{
    forward_kinematics, HandParams, HandSkeleton, JointSet3D, NUM_ANGLES, NUM_LANDMARKS,
};
use crate::pipeline::{
    docfile, CaptureResult, Document, PipelineConfig, PipelineError, SteadyMode,
};
use crate::sfm::{Detection, FrameObservations, ObservationSet};

mod primitives;

pub use primitives::{box_mesh, sphere_mesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    /// 10 cm cube with grid-subdivided faces.
    Box,
    /// 6 cm-radius icosphere.
    Sphere,
}

impl ObjectKind {
    pub fn mesh(&self) -> TriMesh {
        match self {
            ObjectKind::Box => box_mesh(0.10, 0.10, 0.10, 24),
            ObjectKind::Sphere => sphere_mesh(0.06, 4),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectKind::Box => "box",
            ObjectKind::Sphere => "sphere",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "box" => Some(ObjectKind::Box),
            "sphere" => Some(ObjectKind::Sphere),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    /// Steady frames (at least 10).
    pub frames: usize,
    /// Pixel noise standard deviation per coordinate.
    pub noise_sigma: Real,
    /// Probability of dropping a detection.
    pub dropout: Real,
    /// Scripted grasp-adjustment articulation frames before the steady
    /// segment.
    pub transient_frames: usize,
    /// Total camera orbit; at least 20 degrees of parallax.
    pub orbit_degrees: Real,
    /// Vertical bobbing amplitude of the orbit.
    pub tilt_degrees: Real,
    pub object: ObjectKind,
    pub palm_scale: Real,
    /// Hand centroid distance from the first camera (meters).
    pub hand_distance: Real,
    pub turntable_points: usize,
    pub grasp_points: usize,
    /// Capsule distance at which contact saturates to 1 (meters).
    pub contact_distance: Real,
    /// Falloff width beyond the contact distance (meters).
    pub contact_falloff: Real,
    /// Scripted grasp adjustment.
    pub adjustment_angle: Real,
    pub adjustment_axis: Vec3,
    pub adjustment_translation: Vec3,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 30,
            noise_sigma: 0.0,
            dropout: 0.0,
            transient_frames: 0,
            orbit_degrees: 30.0,
            tilt_degrees: 5.0,
            object: ObjectKind::Box,
            palm_scale: 1.0,
            hand_distance: 0.5,
            turntable_points: 2000,
            grasp_points: 1500,
            contact_distance: 0.0025,
            contact_falloff: 0.004,
            adjustment_angle: 5.0_f64.to_radians(),
            adjustment_axis: Vec3::new(0.3, 1.0, 0.2),
            adjustment_translation: Vec3::new(0.012, -0.008, 0.013),
        }
    }
}

/// A complete ground-truth scene plus its derived observations.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub seed: u64,
    pub config: SynthConfig,
    pub skeleton: HandSkeleton,
    pub intrinsics: CameraIntrinsics,
    /// True hand state (the steady grasp).
    pub hand: HandParams,
    pub joints: JointSet3D,
    pub object_mesh: TriMesh,
    /// Turntable object pose `wTo`.
    pub object_pose: RigidTransform,
    /// Grasp adjustment; the grasped pose is `adjustment · object_pose`.
    pub adjustment: RigidTransform,
    /// Virtual camera poses for the steady frames; index 0 is exactly
    /// the identity.
    pub camera_poses: Vec<RigidTransform>,
    /// Transient frames followed by steady frames.
    pub observations: ObservationSet,
    pub transient_frames: usize,
    pub turntable_cloud: PointCloud,
    pub grasp_cloud: PointCloud,
    pub contact_map: ContactMap,
    /// Coarse Stage-1 initialization (true pose with a scripted offset).
    pub object_init: RigidTransform,
}

impl SyntheticScene {
    pub fn grasp_pose(&self) -> RigidTransform {
        self.adjustment.compose(&self.object_pose)
    }
}

/// The curled grasp posture used for every synthetic scene.
fn grasp_angles() -> [Real; NUM_ANGLES] {
    let mut angles = [0.0; NUM_ANGLES];
    for f in 0..5 {
        angles[4 * f + 1] = 0.6;
        angles[4 * f + 2] = 0.7;
        angles[4 * f + 3] = 0.4;
    }
    angles[0] = -0.4; // thumb abduction toward opposition
    angles[1] = 0.3;
    angles
}

/// Deterministic scene generation: same seed and config, same scene.
///
/// The camera orbit always spans at least 20 degrees of parallax and
/// noiseless observations are exact projections of the true joints.
pub fn generate_scene(seed: u64, config: &SynthConfig) -> SyntheticScene {
    assert!(config.frames >= 10, "need at least 10 steady frames, got {}", config.frames);
    assert!(
        config.orbit_degrees >= 20.0,
        "orbit must guarantee at least 20 degrees of parallax"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skeleton = HandSkeleton::default_template();
    let intrinsics = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();

    // True hand: curled grasp, tilted slightly, centroid placed exactly
    // on the first camera's optical axis at the configured distance.
    let palm_rotation = rotation_exp(&Vec3::new(-0.25, 0.15, 0.1));
    let mut hand = HandParams {
        palm_pose: RigidTransform::new(palm_rotation, Vec3::zeros()),
        palm_scale: config.palm_scale,
        angles: grasp_angles(),
    };
    let centroid = centroid_of(&forward_kinematics(&skeleton, &hand));
    hand.palm_pose = RigidTransform::new(
        palm_rotation,
        Vec3::new(-centroid.x, -centroid.y, config.hand_distance - centroid.z),
    );
    let joints = forward_kinematics(&skeleton, &hand);
    let hand_center = centroid_of(&joints);

    // Grasped object: walk along the palm normal until the closest
    // capsule exactly touches the surface.
    let object_mesh = config.object.mesh();
    let proxy = CapsuleProxy::from_skeleton(&skeleton);
    let capsules = proxy.posed(&joints, hand.palm_scale);
    let palm_dir = hand.palm_pose.rotation() * Vec3::new(0.0, 0.0, 1.0);
    let palm_center = (joints[0] + joints[9]) * 0.5;
    let object_rotation = hand.palm_pose.rotation() * rotation_exp(&Vec3::new(-0.3, 0.2, 0.1));
    let mut offset = 0.08;
    let mut grasp_pose = RigidTransform::identity();
    for _ in 0..100 {
        grasp_pose = RigidTransform::new(object_rotation, palm_center + palm_dir * offset);
        let local_mesh = object_mesh.transformed(&grasp_pose);
        let min_d = capsules
            .iter()
            .map(|c| {
                let near = (0..7)
                    .map(|s| {
                        let t = s as Real / 6.0;
                        local_mesh.signed_distance(&(c.a + t * (c.b - c.a)))
                    })
                    .fold(Real::INFINITY, Real::min);
                near - c.radius
            })
            .fold(Real::INFINITY, Real::min);
        if (min_d + 1.5e-3).abs() < 1e-5 {
            break;
        }
        offset += (-1.5e-3 - min_d).clamp(-0.02, 0.02);
    }

    let adjustment = RigidTransform::new(
        rotation_exp(&(config.adjustment_axis.normalize() * config.adjustment_angle)),
        config.adjustment_translation,
    );
    let object_pose = adjustment.inverse().compose(&grasp_pose);

    // Camera orbit with frame 0 exactly at the identity.
    let camera_poses = orbit(config.frames, config.orbit_degrees, config.tilt_degrees, hand_center);

    // Observations: scripted transient articulation first, then the
    // steady frames from the orbit.
    let mut frames = Vec::with_capacity(config.transient_frames + config.frames);
    for t in 0..config.transient_frames {
        let progress = (t + 1) as Real / (config.transient_frames + 1) as Real;
        let mut wiggle = hand;
        for (j, a) in wiggle.angles.iter_mut().enumerate() {
            let swing = (1.0 - progress)
                * (0.8 * ((3.0 * t as Real + j as Real) * 1.3).sin()
                    + 0.4 * (rng.random::<Real>() - 0.5));
            *a += swing;
        }
        skeleton.clamp_angles(&mut wiggle.angles);
        let sway = RigidTransform::new(
            rotation_exp(&(Vec3::new(0.2, 0.6, -0.3) * (1.0 - progress) * 0.25)),
            Vec3::new(0.03, -0.02, 0.04) * (1.0 - progress),
        );
        wiggle.palm_pose = sway.compose(&wiggle.palm_pose);
        let wiggle_joints = forward_kinematics(&skeleton, &wiggle);
        frames.push(observe(&wiggle_joints, &RigidTransform::identity(), &intrinsics, config, &mut rng));
    }
    for pose in &camera_poses {
        frames.push(observe(&joints, pose, &intrinsics, config, &mut rng));
    }
    let observations = ObservationSet::new(frames, intrinsics).expect("generated frames valid");

    // Depth clouds: turntable scan at wTo, grasp-phase cloud at the
    // grasped pose (both in the anchored camera frame).
    let turntable_cloud = PointCloud::new(
        object_mesh
            .sample_surface(config.turntable_points, &mut rng)
            .into_iter()
            .map(|p| object_pose.transform_point(&p))
            .collect(),
    )
    .unwrap();
    let grasp_cloud = PointCloud::new(
        object_mesh
            .sample_surface(config.grasp_points, &mut rng)
            .into_iter()
            .map(|p| grasp_pose.transform_point(&p))
            .collect(),
    )
    .unwrap();

    // Contact map from the true grasp: saturated within the contact
    // distance, smooth falloff beyond.
    let grasped_mesh = object_mesh.transformed(&grasp_pose);
    let values: Vec<Real> = grasped_mesh
        .vertices()
        .iter()
        .map(|v| {
            let d = capsules
                .iter()
                .map(|c| capsule_distance(v, c))
                .fold(Real::INFINITY, Real::min);
            if d <= config.contact_distance {
                1.0
            } else {
                (1.0 - (d - config.contact_distance) / config.contact_falloff).max(0.0)
            }
        })
        .collect();
    let contact_map = ContactMap::new(values, &object_mesh).unwrap();

    // Coarse Stage-1 initialization: the truth with a fixed offset of
    // the order ICP is expected to absorb.
    let object_init = RigidTransform::new(
        rotation_exp(&(Vec3::new(0.2, 1.0, 0.3).normalize() * 8.0_f64.to_radians())),
        Vec3::new(0.006, -0.004, 0.007),
    )
    .compose(&object_pose);

    SyntheticScene {
        seed,
        config: *config,
        skeleton,
        intrinsics,
        hand,
        joints,
        object_mesh,
        object_pose,
        adjustment,
        camera_poses,
        observations,
        transient_frames: config.transient_frames,
        turntable_cloud,
        grasp_cloud,
        contact_map,
        object_init,
    }
}

fn centroid_of(joints: &JointSet3D) -> Vec3 {
    joints.points.iter().sum::<Vec3>() / NUM_LANDMARKS as Real
}

fn orbit(n: usize, total_degrees: Real, tilt_degrees: Real, center: Vec3) -> Vec<RigidTransform> {
    let total = total_degrees.to_radians();
    let tilt = tilt_degrees.to_radians();
    (0..n)
        .map(|i| {
            let s = i as Real / (n - 1) as Real;
            let phi = total * s;
            let psi = tilt * (std::f64::consts::PI * s).sin();
            let swing = rotation_exp(&(Vec3::new(0.0, 1.0, 0.0) * phi))
                * rotation_exp(&(Vec3::new(1.0, 0.0, 0.0) * psi));
            let pos = center + swing * (-center);
            let z = (center - pos).normalize();
            let x = Vec3::new(0.0, 1.0, 0.0).cross(&z).normalize();
            let y = z.cross(&x);
            RigidTransform::new(Mat3::from_columns(&[x, y, z]), pos)
        })
        .collect()
}

fn observe(
    joints: &JointSet3D,
    camera: &RigidTransform,
    intrinsics: &CameraIntrinsics,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> FrameObservations {
    let mut frame = FrameObservations::empty();
    for k in 0..NUM_LANDMARKS {
        let exact = project(&joints[k], camera, intrinsics)
            .expect("synthetic joints are in front of the camera");
        // Draw the noise and dropout in a fixed order so the stream
        // stays reproducible regardless of which branches fire.
        let (du, dv): (Real, Real) =
            (rng.sample::<Real, _>(StandardNormal), rng.sample::<Real, _>(StandardNormal));
        let drop: Real = rng.random();
        if config.dropout > 0.0 && drop < config.dropout {
            continue;
        }
        let (point, confidence) = if config.noise_sigma > 0.0 {
            let noise = Vec3::new(du * config.noise_sigma, dv * config.noise_sigma, 0.0);
            let conf = (1.0 - noise.norm() / (3.0 * config.noise_sigma)).clamp(0.1, 1.0);
            (PixelPoint::new(exact.u + noise.x, exact.v + noise.y), conf)
        } else {
            (exact, 1.0)
        };
        frame.detections[k] = Some(Detection { point, confidence });
    }
    frame
}

/// Writes the scene as a pipeline-ready dataset directory:
/// `keypoints/`, `intrinsics.txt`, `mesh.obj`, `contact_map.txt`,
/// `turntable.xyz`, `grasp.xyz`, `object_init.txt`, a `config.txt`
/// pipeline configuration and the `ground_truth.txt` document.
pub fn write_dataset(scene: &SyntheticScene, dir: &Path) -> Result<(), PipelineError> {
    let io_err = |e: std::io::Error| PipelineError::Io(e.to_string());
    std::fs::create_dir_all(dir.join("keypoints")).map_err(io_err)?;

    for (i, frame) in scene.observations.frames().iter().enumerate() {
        let path = dir.join("keypoints").join(format!("frame_{i:04}.txt"));
        std::fs::write(path, frame.to_text()).map_err(io_err)?;
    }
    std::fs::write(dir.join("intrinsics.txt"), scene.intrinsics.to_text()).map_err(io_err)?;
    std::fs::write(dir.join("mesh.obj"), scene.object_mesh.to_obj()).map_err(io_err)?;
    std::fs::write(dir.join("contact_map.txt"), scene.contact_map.to_text()).map_err(io_err)?;
    std::fs::write(dir.join("turntable.xyz"), scene.turntable_cloud.to_text()).map_err(io_err)?;
    std::fs::write(dir.join("grasp.xyz"), scene.grasp_cloud.to_text()).map_err(io_err)?;
    std::fs::write(
        dir.join("object_init.txt"),
        docfile::pose_document(&scene.object_init, None, None),
    )
    .map_err(io_err)?;

    let mut config = PipelineConfig::with_root(dir);
    config.seed = scene.seed;
    config.steady = SteadyMode::Auto;
    std::fs::write(dir.join("config.txt"), config.to_text(dir)).map_err(io_err)?;

    std::fs::write(dir.join("ground_truth.txt"), ground_truth_text(scene)).map_err(io_err)?;
    Ok(())
}

fn ground_truth_text(scene: &SyntheticScene) -> String {
    let c = &scene.config;
    let mut doc = Document::new();
    doc.section("scene")
        .entry("seed", scene.seed.to_string())
        .entry_usize("frames", c.frames)
        .entry_usize("transient_frames", scene.transient_frames)
        .entry_real("noise_sigma", c.noise_sigma)
        .entry("object", c.object.as_str())
        .entry_real("dropout", c.dropout)
        .entry_real("orbit_degrees", c.orbit_degrees)
        .entry_real("tilt_degrees", c.tilt_degrees)
        .entry_real("palm_scale", c.palm_scale)
        .entry_real("hand_distance", c.hand_distance)
        .entry_usize("turntable_points", c.turntable_points)
        .entry_usize("grasp_points", c.grasp_points)
        .entry_real("contact_distance", c.contact_distance)
        .entry_real("contact_falloff", c.contact_falloff)
        .entry_real("adjustment_angle", c.adjustment_angle)
        .entry_reals(
            "adjustment_axis",
            &[c.adjustment_axis.x, c.adjustment_axis.y, c.adjustment_axis.z],
        )
        .entry_reals(
            "adjustment_translation",
            &[
                c.adjustment_translation.x,
                c.adjustment_translation.y,
                c.adjustment_translation.z,
            ],
        );
    doc.section("truth_hand")
        .entry_pose("palm_pose", &scene.hand.palm_pose)
        .entry_real("palm_scale", scene.hand.palm_scale)
        .entry_reals("angles", &scene.hand.angles);
    doc.section("truth_object")
        .entry_pose("pose", &scene.object_pose)
        .entry_pose("adjustment", &scene.adjustment)
        .entry_pose("init", &scene.object_init);
    doc.section("truth_cameras");
    for pose in &scene.camera_poses {
        doc.entry_pose("pose", pose);
    }
    let joints_flat: Vec<Real> =
        scene.joints.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    doc.section("truth_joints").entry_reals("joints", &joints_flat);
    doc.to_text()
}

/// Ground truth reloaded from a dataset directory.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub seed: u64,
    pub config: SynthConfig,
    pub hand: HandParams,
    pub object_pose: RigidTransform,
    pub adjustment: RigidTransform,
    pub camera_poses: Vec<RigidTransform>,
    pub joints: JointSet3D,
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Io(format!("cannot read {}: {e}", path.display())))?;
    let doc = Document::parse(&text)?;
    let angles_vec = doc.require_reals("truth_hand", "angles")?;
    let angles: [Real; NUM_ANGLES] = angles_vec
        .try_into()
        .map_err(|_| PipelineError::Parse("expected 20 angles".into()))?;
    let joints_flat = doc.require_reals("truth_joints", "joints")?;
    if joints_flat.len() != 3 * NUM_LANDMARKS {
        return Err(PipelineError::Parse("bad joints length".into()));
    }
    let mut joints = JointSet3D::zeros();
    for k in 0..NUM_LANDMARKS {
        joints.points[k] =
            Vec3::new(joints_flat[3 * k], joints_flat[3 * k + 1], joints_flat[3 * k + 2]);
    }
    let vec3_of = |key: &str| -> Result<Vec3, PipelineError> {
        let v = doc.require_reals("scene", key)?;
        if v.len() != 3 {
            return Err(PipelineError::Parse(format!("`{key}` needs 3 numbers")));
        }
        Ok(Vec3::new(v[0], v[1], v[2]))
    };
    let config = SynthConfig {
        frames: doc.require_usize("scene", "frames")?,
        noise_sigma: doc.require_real("scene", "noise_sigma")?,
        dropout: doc.require_real("scene", "dropout")?,
        transient_frames: doc.require_usize("scene", "transient_frames")?,
        orbit_degrees: doc.require_real("scene", "orbit_degrees")?,
        tilt_degrees: doc.require_real("scene", "tilt_degrees")?,
        object: ObjectKind::parse(doc.require("scene", "object")?)
            .ok_or_else(|| PipelineError::Parse("bad object kind".into()))?,
        palm_scale: doc.require_real("scene", "palm_scale")?,
        hand_distance: doc.require_real("scene", "hand_distance")?,
        turntable_points: doc.require_usize("scene", "turntable_points")?,
        grasp_points: doc.require_usize("scene", "grasp_points")?,
        contact_distance: doc.require_real("scene", "contact_distance")?,
        contact_falloff: doc.require_real("scene", "contact_falloff")?,
        adjustment_angle: doc.require_real("scene", "adjustment_angle")?,
        adjustment_axis: vec3_of("adjustment_axis")?,
        adjustment_translation: vec3_of("adjustment_translation")?,
    };
    Ok(GroundTruth {
        seed: doc
            .require("scene", "seed")?
            .parse()
            .map_err(|_| PipelineError::Parse("bad seed".into()))?,
        config,
        hand: HandParams {
            palm_pose: doc.require_pose("truth_hand", "palm_pose")?,
            palm_scale: doc.require_real("truth_hand", "palm_scale")?,
            angles,
        },
        object_pose: doc.require_pose("truth_object", "pose")?,
        adjustment: doc.require_pose("truth_object", "adjustment")?,
        camera_poses: doc
            .get_all("truth_cameras", "pose")
            .into_iter()
            .map(docfile::parse_pose)
            .collect::<Result<_, _>>()?,
        joints,
    })
}

/// Regenerates the full scene for a dataset directory from its
/// ground-truth document (generation is seed-deterministic, so the
/// regenerated scene is the one the dataset was written from; the
/// stored palm pose is cross-checked to catch edited files).
pub fn load_scene(dir: &Path) -> Result<SyntheticScene, PipelineError> {
    let truth = read_ground_truth(&dir.join("ground_truth.txt"))?;
    let scene = generate_scene(truth.seed, &truth.config);
    let stored = truth.hand.palm_pose.to_matrix_row_major();
    let regen = scene.hand.palm_pose.to_matrix_row_major();
    if stored
        .iter()
        .zip(&regen)
        .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(PipelineError::Parse(
            "ground truth does not match the regenerated scene (edited dataset?)".into(),
        ));
    }
    Ok(scene)
}

/// Gauge-aware error metrics of a capture against the scene truth.
#[derive(Debug, Clone)]
pub struct EvalMetrics {
    /// RMS of the pre-contact hand's landmarks against the true joints
    /// after the best rigid alignment (meters).
    pub joint_rmse: Real,
    /// RMS of the raw reconstruction joints under the same alignment.
    pub sfm_joint_rmse: Real,
    pub palm_rotation_error: Real,
    pub palm_translation_error: Real,
    pub mean_angle_error: Real,
    pub max_angle_error: Real,
    /// Turntable pose error (measured in the shared depth frame, no
    /// gauge alignment applies).
    pub object_rotation_error: Real,
    pub object_translation_error: Real,
    /// Grasped-pose error `T_adj · wTo` vs truth.
    pub grasp_rotation_error: Real,
    pub grasp_translation_error: Real,
    pub camera_rotation_errors: Vec<Real>,
    pub camera_translation_errors: Vec<Real>,
    /// Mean |capsule distance| over contacted vertices for the final
    /// (refined) hand at the recovered grasp pose.
    pub contact_mean_distance: Real,
}

impl EvalMetrics {
    pub fn max_camera_rotation_error(&self) -> Real {
        self.camera_rotation_errors.iter().copied().fold(0.0, Real::max)
    }

    pub fn max_camera_translation_error(&self) -> Real {
        self.camera_translation_errors.iter().copied().fold(0.0, Real::max)
    }

    pub fn summary(&self) -> String {
        format!(
            "joint_rmse = {:.3e} m\nsfm_joint_rmse = {:.3e} m\npalm_rotation_error = {:.3e} rad\n\
             palm_translation_error = {:.3e} m\nmean_angle_error = {:.3e} rad\n\
             object_rotation_error = {:.3e} rad\nobject_translation_error = {:.3e} m\n\
             grasp_rotation_error = {:.3e} rad\ngrasp_translation_error = {:.3e} m\n\
             max_camera_rotation_error = {:.3e} rad\nmax_camera_translation_error = {:.3e} m\n\
             contact_mean_distance = {:.3e} m",
            self.joint_rmse,
            self.sfm_joint_rmse,
            self.palm_rotation_error,
            self.palm_translation_error,
            self.mean_angle_error,
            self.object_rotation_error,
            self.object_translation_error,
            self.grasp_rotation_error,
            self.grasp_translation_error,
            self.max_camera_rotation_error(),
            self.max_camera_translation_error(),
            self.contact_mean_distance,
        )
    }
}

/// Scores a capture result against the scene. The reconstruction's
/// remaining rigid gauge freedom is removed by aligning the recovered
/// hand landmarks onto the true joints before any pose comparison, so
/// a globally transformed but internally consistent result scores
/// zero.
pub fn evaluate(result: &CaptureResult, scene: &SyntheticScene) -> EvalMetrics {
    assert_eq!(
        result.camera_poses.len(),
        scene.camera_poses.len(),
        "result and scene steady frame counts must match"
    );
    let skeleton = &scene.skeleton;

    let recovered = forward_kinematics(skeleton, &result.hand_pre_contact);
    let align = umeyama_align_rigid(&recovered.points, &scene.joints.points)
        .unwrap_or_else(|_| RigidTransform::identity());

    let joint_rmse = {
        let sum: Real = (0..NUM_LANDMARKS)
            .map(|k| (align.transform_point(&recovered[k]) - scene.joints[k]).norm_squared())
            .sum();
        (sum / NUM_LANDMARKS as Real).sqrt()
    };
    let sfm_joint_rmse = {
        let sfm = &result.diagnostics.sfm_joints;
        let observed: Vec<usize> = (0..NUM_LANDMARKS)
            .filter(|&k| result.diagnostics.landmark_observed[k])
            .collect();
        if observed.is_empty() {
            Real::INFINITY
        } else {
            let sum: Real = observed
                .iter()
                .map(|&k| (align.transform_point(&sfm[k]) - scene.joints[k]).norm_squared())
                .sum();
            (sum / observed.len() as Real).sqrt()
        }
    };

    let palm_aligned = align.compose(&result.hand_pre_contact.palm_pose);
    let palm_rotation_error = palm_aligned.rotation_angle_to(&scene.hand.palm_pose);
    let palm_translation_error = palm_aligned.translation_distance_to(&scene.hand.palm_pose);

    let angle_errors: Vec<Real> = result
        .hand_pre_contact
        .angles
        .iter()
        .zip(&scene.hand.angles)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let mean_angle_error = angle_errors.iter().sum::<Real>() / NUM_ANGLES as Real;
    let max_angle_error = angle_errors.iter().copied().fold(0.0, Real::max);

    let object_rotation_error = result.object_pose_world.rotation_angle_to(&scene.object_pose);
    let object_translation_error =
        result.object_pose_world.translation_distance_to(&scene.object_pose);

    let grasp_rec = result.adjustment.compose(&result.object_pose_world);
    let grasp_true = scene.grasp_pose();
    let grasp_rotation_error = grasp_rec.rotation_angle_to(&grasp_true);
    let grasp_translation_error = grasp_rec.translation_distance_to(&grasp_true);

    let mut camera_rotation_errors = Vec::new();
    let mut camera_translation_errors = Vec::new();
    for (i, (rec, truth)) in result.camera_poses.iter().zip(&scene.camera_poses).enumerate() {
        if !result.registered.get(i).copied().unwrap_or(false) {
            continue;
        }
        let aligned = align.compose(rec);
        camera_rotation_errors.push(aligned.rotation_angle_to(truth));
        camera_translation_errors.push(aligned.translation_distance_to(truth));
    }

    // Contact agreement of the final hand at the recovered grasp pose.
    let proxy = CapsuleProxy::from_skeleton(skeleton);
    let final_joints = forward_kinematics(skeleton, &result.hand);
    let capsules = proxy.posed(&final_joints, result.hand.palm_scale);
    let threshold = 0.4;
    let mut dist_sum = 0.0;
    let mut count = 0usize;
    for (v, &value) in scene.object_mesh.vertices().iter().zip(scene.contact_map.values()) {
        if value < threshold {
            continue;
        }
        let world = grasp_rec.transform_point(v);
        let d = capsules
            .iter()
            .map(|c| capsule_distance(&world, c))
            .fold(Real::INFINITY, Real::min);
        dist_sum += d.abs();
        count += 1;
    }
    let contact_mean_distance = if count > 0 { dist_sum / count as Real } else { 0.0 };

    EvalMetrics {
        joint_rmse,
        sfm_joint_rmse,
        palm_rotation_error,
        palm_translation_error,
        mean_angle_error,
        max_angle_error,
        object_rotation_error,
        object_translation_error,
        grasp_rotation_error,
        grasp_translation_error,
        camera_rotation_errors,
        camera_translation_errors,
        contact_mean_distance,
    }
}

/// Builds the capture result a perfect pipeline would produce, for
/// oracle closure tests.
pub fn ground_truth_result(scene: &SyntheticScene) -> CaptureResult {
    let propagated = crate::pipeline::propagate_poses(
        &scene.camera_poses,
        &scene.adjustment,
        &scene.object_pose,
        &scene.hand.palm_pose,
    );
    let (object_in_camera, palm_in_camera): (Vec<_>, Vec<_>) = propagated.into_iter().unzip();
    let n = scene.camera_poses.len();
    CaptureResult {
        hand: scene.hand,
        hand_pre_contact: scene.hand,
        object_pose_world: scene.object_pose,
        adjustment: scene.adjustment,
        camera_poses: scene.camera_poses.clone(),
        registered: vec![true; n],
        object_in_camera,
        palm_in_camera,
        frames: Vec::new(),
        diagnostics: crate::pipeline::Diagnostics {
            steady_start: scene.transient_frames,
            steady_end: scene.transient_frames + n,
            icp_rms: 0.0,
            icp_iterations: 0,
            icp_converged: true,
            sfm_cost: 0.0,
            sfm_rms: 0.0,
            sfm_iterations: 0,
            sfm_converged: true,
            sfm_joints: scene.joints,
            landmark_observed: [true; NUM_LANDMARKS],
            palm_scale_raw: scene.hand.palm_scale,
            ik_rms: 0.0,
            ik_iterations: 0,
            ik_converged: true,
            adjust_rms: 0.0,
            adjust_converged: true,
            joint_refine: None,
            contact_refine: None,
            seed: scene.seed,
        },
    }
}
