//! 2D upper-body skeletons: canonical joint set, segment tree, keypoint file
//! io, retargeting of a driving skeleton onto a reference body, and pose-map
//! rasterization.
//!
//! Coordinates are pixels in image convention (x right, y down), stored as
//! `f64` so the retargeting guarantees hold at tight tolerances. Each joint
//! carries a confidence in [0, 1]; joints below [`CONF_THRESHOLD`] are treated
//! as missing by anchor computations.

mod calibrate;
mod io;
mod render;
mod synth;

pub use calibrate::{
    adjust_proportions, anchor_translate, apply_scale, calibrate, estimate_scale, torso_center,
    CalibrationParams, ProportionOutcome,
};
pub use io::{read_keypoints, write_keypoints, KeypointDoc};
pub use render::render_pose_map;
pub use synth::{anchor_offsets, random_skeleton};

use std::collections::BTreeMap;

use thiserror::Error;

/// Joints with confidence below this are ignored by anchor computations.
pub const CONF_THRESHOLD: f64 = 0.3;

/// Virtual root of the segment tree; not a stored joint.
pub const ROOT: &str = "torso_center";

/// The five joints that define body scale and the torso center.
pub const ANCHORS: [&str; 5] = [
    "neck",
    "left_shoulder",
    "right_shoulder",
    "left_hip",
    "right_hip",
];

const BODY: [&str; 10] = [
    "nose",
    "neck",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
];

const FACE: [&str; 4] = ["left_eye", "right_eye", "left_ear", "right_ear"];

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("joint `{0}` is missing or below the confidence threshold")]
    MissingAnchor(String),
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),
    #[error("unknown joint name `{0}`")]
    UnknownJoint(String),
    #[error("unsupported keypoint schema version {0}")]
    BadSchema(u32),
    #[error("keypoint file invalid: {0}")]
    BadFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Number of keypoints per hand (root + 5 fingers × 4 joints).
pub const HAND_POINTS: usize = 21;

/// Names of one hand's keypoints, root first.
pub fn hand_joint_names(side: &str) -> Vec<String> {
    (0..HAND_POINTS).map(|i| format!("{side}_hand_{i:02}")).collect()
}

/// Full canonical joint list: body, face, then left/right hand points.
pub fn canonical_joints() -> Vec<String> {
    let mut names: Vec<String> = BODY.iter().map(|s| s.to_string()).collect();
    names.extend(FACE.iter().map(|s| s.to_string()));
    names.extend(hand_joint_names("left"));
    names.extend(hand_joint_names("right"));
    names
}

/// Face keypoints used for head-region masks: eyes, ears, and the nose.
pub fn face_joints() -> Vec<String> {
    let mut v: Vec<String> = FACE.iter().map(|s| s.to_string()).collect();
    v.push("nose".to_string());
    v
}

/// A named-joint 2D skeleton. Iteration order over joints is the sorted name
/// order, so serialized output is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton2D {
    joints: BTreeMap<String, [f64; 3]>,
}

impl Skeleton2D {
    pub fn new() -> Self {
        Skeleton2D {
            joints: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, name: &str, x: f64, y: f64, confidence: f64) {
        self.joints
            .insert(name.to_string(), [x, y, confidence.clamp(0.0, 1.0)]);
    }

    pub fn get(&self, name: &str) -> Option<(f64, f64, f64)> {
        self.joints.get(name).map(|j| (j[0], j[1], j[2]))
    }

    /// Position of a joint whose confidence clears the threshold.
    pub fn confident(&self, name: &str) -> Option<(f64, f64)> {
        self.joints
            .get(name)
            .filter(|j| j[2] >= CONF_THRESHOLD)
            .map(|j| (j[0], j[1]))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.joints.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Apply a function to every joint position, keeping confidences.
    pub fn map_positions<F: Fn(f64, f64) -> (f64, f64)>(&self, f: F) -> Skeleton2D {
        let mut out = Skeleton2D::new();
        for (name, j) in &self.joints {
            let (x, y) = f(j[0], j[1]);
            out.set(name, x, y, j[2]);
        }
        out
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Skeleton2D {
        self.map_positions(|x, y| (x + dx, y + dy))
    }
}

impl Default for Skeleton2D {
    fn default() -> Self {
        Self::new()
    }
}

/// Canonical parent→child segment list. Parents always precede their children,
/// so a single in-order pass is a valid root-to-leaf traversal. The face
/// points are deliberately absent: they translate and scale with the skeleton
/// but are never length-corrected.
pub fn canonical_segments() -> Vec<(String, String)> {
    let mut segs: Vec<(String, String)> = Vec::new();
    let own = |s: &str| s.to_string();
    segs.push((own(ROOT), own("neck")));
    segs.push((own(ROOT), own("left_hip")));
    segs.push((own(ROOT), own("right_hip")));
    segs.push((own("neck"), own("nose")));
    segs.push((own("neck"), own("left_shoulder")));
    segs.push((own("neck"), own("right_shoulder")));
    for side in ["left", "right"] {
        segs.push((format!("{side}_shoulder"), format!("{side}_elbow")));
        segs.push((format!("{side}_elbow"), format!("{side}_wrist")));
        segs.push((format!("{side}_wrist"), format!("{side}_hand_00")));
        // Five finger chains of four joints each, rooted at the hand root.
        for finger in 0..5 {
            let mut prev = format!("{side}_hand_00");
            for k in 0..4 {
                let idx = 1 + finger * 4 + k;
                let cur = format!("{side}_hand_{idx:02}");
                segs.push((prev, cur.clone()));
                prev = cur;
            }
        }
    }
    segs
}

/// Segment tree with per-segment lengths measured from a skeleton.
/// A `None` length means an endpoint was missing in the source skeleton.
#[derive(Debug, Clone)]
pub struct SegmentGraph {
    segments: Vec<(String, String)>,
    lengths: Vec<Option<f64>>,
}

impl SegmentGraph {
    /// Measure the canonical tree on a skeleton. Requires the torso anchors
    /// (the virtual root is their mean); other joints may be absent.
    pub fn from_skeleton(skel: &Skeleton2D) -> Result<SegmentGraph, SkeletonError> {
        let center = torso_center(skel)?;
        let segments = canonical_segments();
        let pos = |name: &str| -> Option<(f64, f64)> {
            if name == ROOT {
                Some(center)
            } else {
                skel.confident(name)
            }
        };
        let lengths = segments
            .iter()
            .map(|(p, c)| match (pos(p), pos(c)) {
                (Some(a), Some(b)) => Some((b.0 - a.0).hypot(b.1 - a.1)),
                _ => None,
            })
            .collect();
        Ok(SegmentGraph { segments, lengths })
    }

    pub fn segments(&self) -> &[(String, String)] {
        &self.segments
    }

    pub fn length(&self, idx: usize) -> Option<f64> {
        self.lengths[idx]
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_tree_is_parent_before_child_and_acyclic() {
        let segs = canonical_segments();
        assert_eq!(segs.len(), 52);
        let mut seen = vec![ROOT.to_string()];
        for (p, c) in &segs {
            assert!(seen.contains(p), "parent {p} appears before being introduced");
            assert!(!seen.contains(c), "joint {c} has two parents");
            seen.push(c.clone());
        }
        // Everything except the face cloud is reachable.
        let joints = canonical_joints();
        for j in &joints {
            let in_tree = seen.contains(j);
            let is_face = ["left_eye", "right_eye", "left_ear", "right_ear"]
                .contains(&j.as_str());
            assert_eq!(in_tree, !is_face, "tree membership wrong for {j}");
        }
    }

    #[test]
    fn confidence_gates_joint_visibility() {
        let mut s = Skeleton2D::new();
        s.set("nose", 5.0, 6.0, 0.29);
        s.set("neck", 1.0, 2.0, 0.31);
        assert_eq!(s.confident("nose"), None);
        assert_eq!(s.confident("neck"), Some((1.0, 2.0)));
        assert_eq!(s.get("nose"), Some((5.0, 6.0, 0.29)));
    }

    #[test]
    fn segment_graph_measures_lengths() {
        let mut s = Skeleton2D::new();
        for a in ANCHORS {
            s.set(a, 0.0, 0.0, 1.0);
        }
        s.set("neck", 0.0, 0.0, 1.0);
        s.set("nose", 3.0, 4.0, 1.0);
        let g = SegmentGraph::from_skeleton(&s).unwrap();
        let idx = g
            .segments()
            .iter()
            .position(|(p, c)| p == "neck" && c == "nose")
            .unwrap();
        assert_eq!(g.length(idx), Some(5.0));
        // left_elbow missing entirely -> that segment has no length
        let idx2 = g
            .segments()
            .iter()
            .position(|(_, c)| c == "left_elbow")
            .unwrap();
        assert_eq!(g.length(idx2), None);
    }
}
