//! Skeleton template file parsing and serialization.
//!
//! The template is a plain text document listing the 21 landmarks with
//! rest positions and parent indices, the 20 rotational degrees of
//! freedom with axes and limits, and the capsule collision proxy.

use super::{CapsuleSpec, DofKind, HandError, HandSkeleton, JointDof, Landmark, NUM_ANGLES, NUM_LANDMARKS};
use crate::geom::Vec3;

pub(super) const DEFAULT_TEMPLATE_V1: &str = include_str!("../../data/hand_template_v1.txt");

pub(super) fn parse(text: &str) -> Result<HandSkeleton, HandError> {
    let mut landmarks: Vec<Option<Landmark>> = vec![None; NUM_LANDMARKS];
    let mut dofs: Vec<Option<JointDof>> = (0..NUM_ANGLES).map(|_| None).collect();
    let mut capsules: Vec<CapsuleSpec> = Vec::new();
    let mut version: Option<u32> = None;

    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| HandError::Template { line: line_no + 1, msg };

        if let Some((key, value)) = line.split_once('=') {
            if key.trim() == "version" {
                version = Some(
                    value.trim().parse().map_err(|_| err(format!("bad version `{value}`")))?,
                );
            }
            continue;
        }

        let mut tokens = line.split_whitespace();
        let kind = tokens.next().unwrap_or("");
        let rest: Vec<&str> = tokens.collect();
        match kind {
            "landmark" => {
                if rest.len() != 6 {
                    return Err(err("landmark needs: index name parent x y z".into()));
                }
                let index: usize = rest[0].parse().map_err(|_| err("bad index".into()))?;
                let parent: i64 = rest[2].parse().map_err(|_| err("bad parent".into()))?;
                let coords: Vec<f64> = rest[3..6]
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| err("bad coordinate".into()))?;
                if index >= NUM_LANDMARKS {
                    return Err(err(format!("landmark index {index} out of range")));
                }
                landmarks[index] = Some(Landmark {
                    name: rest[1].to_string(),
                    parent: if parent < 0 { None } else { Some(parent as usize) },
                    rest: Vec3::new(coords[0], coords[1], coords[2]),
                });
            }
            "dof" => {
                if rest.len() != 8 {
                    return Err(err("dof needs: index landmark kind ax ay az min max".into()));
                }
                let index: usize = rest[0].parse().map_err(|_| err("bad index".into()))?;
                let landmark: usize = rest[1].parse().map_err(|_| err("bad landmark".into()))?;
                let dof_kind = match rest[2] {
                    "abduction" => DofKind::Abduction,
                    "flexion" => DofKind::Flexion,
                    other => return Err(err(format!("unknown dof kind `{other}`"))),
                };
                let nums: Vec<f64> = rest[3..8]
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| err("bad dof number".into()))?;
                if index >= NUM_ANGLES {
                    return Err(err(format!("dof index {index} out of range")));
                }
                let axis = Vec3::new(nums[0], nums[1], nums[2]);
                if axis.norm() < 1e-9 {
                    return Err(err("dof axis is zero".into()));
                }
                dofs[index] = Some(JointDof {
                    landmark,
                    kind: dof_kind,
                    axis: axis.normalize(),
                    min: nums[3].to_radians(),
                    max: nums[4].to_radians(),
                });
            }
            "capsule" => {
                if rest.len() != 4 {
                    return Err(err("capsule needs: index a b radius".into()));
                }
                let a: usize = rest[1].parse().map_err(|_| err("bad endpoint".into()))?;
                let b: usize = rest[2].parse().map_err(|_| err("bad endpoint".into()))?;
                let radius: f64 = rest[3].parse().map_err(|_| err("bad radius".into()))?;
                capsules.push(CapsuleSpec { a, b, radius });
            }
            other => return Err(err(format!("unknown record `{other}`"))),
        }
    }

    if version != Some(1) {
        return Err(HandError::Invalid(format!(
            "unsupported or missing template version {version:?}"
        )));
    }
    let landmarks: Vec<Landmark> = landmarks
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| HandError::Invalid(format!("missing landmark {i}"))))
        .collect::<Result<_, _>>()?;
    let dofs: Vec<JointDof> = dofs
        .into_iter()
        .enumerate()
        .map(|(i, d)| d.ok_or_else(|| HandError::Invalid(format!("missing dof {i}"))))
        .collect::<Result<_, _>>()?;

    HandSkeleton::from_parts(landmarks, dofs, capsules)
}

pub(super) fn serialize(skeleton: &HandSkeleton) -> String {
    let mut out = String::from("# hand skeleton template\nversion = 1\n\n");
    for (i, lm) in skeleton.landmarks().iter().enumerate() {
        let parent = lm.parent.map_or(-1, |p| p as i64);
        out.push_str(&format!(
            "landmark {i} {} {parent} {:?} {:?} {:?}\n",
            lm.name, lm.rest.x, lm.rest.y, lm.rest.z
        ));
    }
    out.push('\n');
    for (i, dof) in skeleton.dofs().iter().enumerate() {
        let kind = match dof.kind {
            DofKind::Abduction => "abduction",
            DofKind::Flexion => "flexion",
        };
        out.push_str(&format!(
            "dof {i} {} {kind} {:?} {:?} {:?} {:?} {:?}\n",
            dof.landmark,
            dof.axis.x,
            dof.axis.y,
            dof.axis.z,
            dof.min.to_degrees(),
            dof.max.to_degrees()
        ));
    }
    out.push('\n');
    for (i, c) in skeleton.capsules().iter().enumerate() {
        out.push_str(&format!("capsule {i} {} {} {:?}\n", c.a, c.b, c.radius));
    }
    out
}
