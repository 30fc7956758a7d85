//! Markerless grasp capture from monocular hand-keypoint tracks.
//!
//! Given per-frame 2D detections of the 21 hand landmarks, the grasped
//! object's mesh, depth point clouds and a per-vertex contact map, this
//! crate recovers the full grasp: 6-DOF palm pose plus 20 joint angles,
//! 6-DOF object pose, the grasp-adjustment transform and per-frame
//! virtual camera poses, then refines the hand against observed contact.
//!
//! The pipeline runs in stages:
//!
//! 1. [`contact::icp_register`] — object pose from a depth cloud and the
//!    known mesh.
//! 2. [`sfm`] — the detections are treated as observations from a moving
//!    virtual camera watching a stationary hand; structure from motion
//!    recovers 3D joint locations and camera poses.
//! 3. [`fit`] — palm pose by similarity alignment over the six rigid
//!    hand points, then inverse kinematics for the 20 joint angles.
//! 4. [`contact::estimate_adjustment`] — the object-pose change that
//!    happened while the subject settled into the grasp.
//! 5. [`contact::refine_grasp`] — contact-map-driven refinement that
//!    attracts the hand to contacted vertices, repels it from
//!    non-contacted ones and penalizes interpenetration.
//!
//! [`pipeline::run_pipeline`] orchestrates all stages from a config file;
//! [`synth`] generates ground-truth synthetic scenes and scores results.

pub mod contact;
pub mod fit;
pub mod geom;
pub mod hand;
pub mod pipeline;
pub mod sfm;
pub mod synth;

pub use geom::{CameraIntrinsics, PixelPoint, Real, RigidTransform, SimilarityTransform, Vec3};
