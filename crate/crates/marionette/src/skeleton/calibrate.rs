//! Training-free retargeting of a driving skeleton onto a reference body:
//! global axis scaling, per-segment length correction, and torso-center
//! translation, applied in that order.

use std::collections::BTreeMap;

use super::{Skeleton2D, SegmentGraph, SkeletonError, ANCHORS, ROOT};

/// Everything the three-step alignment decided: the axis scales, the
/// per-segment length-correction factors, the final translation, and which
/// segments had to be skipped because their driving length was zero.
#[derive(Debug, Clone)]
pub struct CalibrationParams {
    pub r_x: f64,
    pub r_y: f64,
    /// Keyed `"parent->child"`; only segments with a defined positive factor.
    pub rho: BTreeMap<String, f64>,
    pub delta: (f64, f64),
    /// Segments whose driving length was zero but whose reference length was
    /// not (direction undefined, left at their parent-relative offset).
    pub skipped: Vec<String>,
}

/// Mean of the five torso anchors. Errors if any anchor is missing or below
/// the confidence threshold.
pub fn torso_center(skel: &Skeleton2D) -> Result<(f64, f64), SkeletonError> {
    let mut sx = 0.0;
    let mut sy = 0.0;
    for name in ANCHORS {
        let (x, y) = skel
            .confident(name)
            .ok_or_else(|| SkeletonError::MissingAnchor(name.to_string()))?;
        sx += x;
        sy += y;
    }
    let n = ANCHORS.len() as f64;
    Ok((sx / n, sy / n))
}

fn anchor_measures(skel: &Skeleton2D) -> Result<(f64, f64), SkeletonError> {
    let need = |name: &str| {
        skel.confident(name)
            .ok_or_else(|| SkeletonError::MissingAnchor(name.to_string()))
    };
    let ls = need("left_shoulder")?;
    let rs = need("right_shoulder")?;
    let neck = need("neck")?;
    let lh = need("left_hip")?;
    let rh = need("right_hip")?;
    let width = (ls.0 - rs.0).hypot(ls.1 - rs.1);
    let hip_mid = ((lh.0 + rh.0) / 2.0, (lh.1 + rh.1) / 2.0);
    let height = (neck.0 - hip_mid.0).hypot(neck.1 - hip_mid.1);
    Ok((width, height))
}

/// Horizontal scale from shoulder width, vertical scale from the
/// neck-to-hip-midpoint distance.
pub fn estimate_scale(
    reference: &Skeleton2D,
    driving: &Skeleton2D,
) -> Result<(f64, f64), SkeletonError> {
    let (ref_w, ref_h) = anchor_measures(reference)?;
    let (drv_w, drv_h) = anchor_measures(driving)?;
    if drv_w <= 0.0 {
        return Err(SkeletonError::DegeneratePose(
            "driving shoulder width is zero".into(),
        ));
    }
    if drv_h <= 0.0 {
        return Err(SkeletonError::DegeneratePose(
            "driving neck-to-hip distance is zero".into(),
        ));
    }
    Ok((ref_w / drv_w, ref_h / drv_h))
}

/// Scale every joint about `pivot`, per axis. Confidences are untouched.
pub fn apply_scale(skel: &Skeleton2D, r_x: f64, r_y: f64, pivot: (f64, f64)) -> Skeleton2D {
    skel.map_positions(|x, y| (pivot.0 + r_x * (x - pivot.0), pivot.1 + r_y * (y - pivot.1)))
}

/// Result of the per-segment length correction.
#[derive(Debug, Clone)]
pub struct ProportionOutcome {
    pub skeleton: Skeleton2D,
    pub rho: BTreeMap<String, f64>,
    pub skipped: Vec<String>,
}

/// Walk the segment tree root-to-leaf and reposition each child along its
/// original parent→child direction at the reference length. Directions come
/// from the input skeleton, so every segment keeps its orientation; positions
/// compound down the tree as parents move.
pub fn adjust_proportions(
    skel: &Skeleton2D,
    ref_lengths: &SegmentGraph,
) -> Result<ProportionOutcome, SkeletonError> {
    let root = torso_center(skel)?;
    let mut out = skel.clone();
    // Updated positions seen so far; parents are written before children.
    let mut moved: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    moved.insert(ROOT.to_string(), root);
    let mut rho = BTreeMap::new();
    let mut skipped = Vec::new();

    for (idx, (parent, child)) in ref_lengths.segments().iter().enumerate() {
        let parent_in = if parent == ROOT {
            Some(root)
        } else {
            skel.confident(parent)
        };
        let (Some(p_in), Some(c_in)) = (parent_in, skel.confident(child)) else {
            continue; // endpoint missing in the driving skeleton
        };
        let Some(l_ref) = ref_lengths.length(idx) else {
            continue; // endpoint missing in the reference skeleton
        };
        let p_new = *moved.get(parent).unwrap_or(&p_in);
        let (dx, dy) = (c_in.0 - p_in.0, c_in.1 - p_in.1);
        let l_in = dx.hypot(dy);
        let key = format!("{parent}->{child}");
        let c_new = if l_in == 0.0 {
            if l_ref > 0.0 {
                // Direction undefined: carry the (zero) offset and flag it.
                skipped.push(key);
                (p_new.0, p_new.1)
            } else {
                (p_new.0, p_new.1)
            }
        } else if l_ref == 0.0 {
            // Reference segment is degenerate: collapse onto the parent.
            (p_new.0, p_new.1)
        } else {
            let factor = l_ref / l_in;
            rho.insert(key, factor);
            (p_new.0 + dx * factor, p_new.1 + dy * factor)
        };
        moved.insert(child.clone(), c_new);
        let conf = out.get(child).map(|j| j.2).unwrap_or(1.0);
        out.set(child, c_new.0, c_new.1, conf);
    }

    Ok(ProportionOutcome {
        skeleton: out,
        rho,
        skipped,
    })
}

/// Shift the whole skeleton so its torso center lands on the reference torso
/// center. Returns the translated skeleton and the applied offset.
pub fn anchor_translate(
    skel: &Skeleton2D,
    reference: &Skeleton2D,
) -> Result<(Skeleton2D, (f64, f64)), SkeletonError> {
    let ref_c = torso_center(reference)?;
    let drv_c = torso_center(skel)?;
    let delta = (ref_c.0 - drv_c.0, ref_c.1 - drv_c.1);
    Ok((skel.translated(delta.0, delta.1), delta))
}

/// Full three-step alignment: axis scaling about the driving torso center,
/// per-segment length correction against `graph` (measured on the reference),
/// then torso-center translation.
pub fn calibrate(
    reference: &Skeleton2D,
    driving: &Skeleton2D,
    graph: &SegmentGraph,
) -> Result<(Skeleton2D, CalibrationParams), SkeletonError> {
    let (r_x, r_y) = estimate_scale(reference, driving)?;
    let pivot = torso_center(driving)?;
    let scaled = apply_scale(driving, r_x, r_y, pivot);
    let prop = adjust_proportions(&scaled, graph)?;
    let (out, delta) = anchor_translate(&prop.skeleton, reference)?;
    Ok((
        out,
        CalibrationParams {
            r_x,
            r_y,
            rho: prop.rho,
            delta,
            skipped: prop.skipped,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::super::{anchor_offsets, random_skeleton, canonical_segments};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Anchors-only skeleton from the fixed offset template.
    fn anchors_at(center: (f64, f64), scale: f64) -> Skeleton2D {
        let mut s = Skeleton2D::new();
        for (name, (ox, oy)) in anchor_offsets() {
            s.set(name, center.0 + scale * ox, center.1 + scale * oy, 1.0);
        }
        s
    }

    #[test]
    fn torso_center_is_anchor_mean_and_requires_all_anchors() {
        let s = anchors_at((10.0, 20.0), 3.0);
        let c = torso_center(&s).unwrap();
        assert!((c.0 - 10.0).abs() < 1e-12 && (c.1 - 20.0).abs() < 1e-12);

        let mut missing = s.clone();
        missing.set("left_hip", 0.0, 0.0, 0.1);
        assert!(matches!(
            torso_center(&missing),
            Err(SkeletonError::MissingAnchor(_))
        ));
    }

    #[test]
    fn identical_skeletons_scale_to_unity() {
        let s = anchors_at((5.0, 5.0), 2.0);
        assert_eq!(estimate_scale(&s, &s).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn doubling_x_about_center_halves_horizontal_scale_only() {
        // The anchor template has level shoulders and a vertical neck→hip-mid
        // axis, so stretching x about the torso center doubles the shoulder
        // distance and leaves the vertical measure alone.
        let reference = anchors_at((0.0, 0.0), 2.0);
        let widened = reference.map_positions(|x, y| (2.0 * x, y));
        let (r_x, r_y) = estimate_scale(&reference, &widened).unwrap();
        assert_eq!((r_x, r_y), (0.5, 1.0));
    }

    #[test]
    fn uniform_double_scale_gives_half_half() {
        let reference = anchors_at((3.0, -1.0), 1.5);
        let big = reference.map_positions(|x, y| (3.0 + 2.0 * (x - 3.0), -1.0 + 2.0 * (y + 1.0)));
        let (r_x, r_y) = estimate_scale(&reference, &big).unwrap();
        assert!((r_x - 0.5).abs() < 1e-12 && (r_y - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_driving_pose_is_rejected() {
        let reference = anchors_at((0.0, 0.0), 1.0);
        let mut collapsed = reference.clone();
        for name in ANCHORS {
            collapsed.set(name, 1.0, 1.0, 1.0);
        }
        assert!(matches!(
            estimate_scale(&reference, &collapsed),
            Err(SkeletonError::DegeneratePose(_))
        ));
    }

    #[test]
    fn apply_scale_arithmetic_and_composition() {
        let mut s = Skeleton2D::new();
        s.set("nose", 10.0, 20.0, 0.8);
        let out = apply_scale(&s, 0.5, 2.0, (0.0, 0.0));
        assert_eq!(out.get("nose"), Some((5.0, 40.0, 0.8)));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let skel = random_skeleton(&mut rng, 2.0, (4.0, 7.0));
        let ab = apply_scale(&apply_scale(&skel, 1.5, 0.5, (1.0, 2.0)), 2.0, 3.0, (1.0, 2.0));
        let combined = apply_scale(&skel, 3.0, 1.5, (1.0, 2.0));
        for name in skel.names() {
            let a = ab.get(name).unwrap();
            let b = combined.get(name).unwrap();
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
    }

    #[test]
    fn single_segment_shrinks_toward_parent() {
        // neck→nose driving length 10 vs reference length 5: the nose moves
        // halfway toward the neck and the factor is recorded as 0.5.
        let mut reference = anchors_at((0.0, 0.0), 1.0);
        let (nx, ny, _) = reference.get("neck").unwrap();
        reference.set("nose", nx + 5.0, ny, 1.0);
        let graph = SegmentGraph::from_skeleton(&reference).unwrap();

        let mut driving = anchors_at((0.0, 0.0), 1.0);
        driving.set("nose", nx + 10.0, ny, 1.0);
        let out = adjust_proportions(&driving, &graph).unwrap();
        let nose = out.skeleton.get("nose").unwrap();
        assert!((nose.0 - (nx + 5.0)).abs() < 1e-12 && (nose.1 - ny).abs() < 1e-12);
        assert_eq!(out.rho.get("neck->nose"), Some(&0.5));
        assert!(out.skipped.is_empty());
    }

    #[test]
    fn chained_segments_propagate_parent_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reference = random_skeleton(&mut rng, 1.0, (0.0, 0.0));
        let driving = random_skeleton(&mut rng, 1.4, (8.0, -3.0));
        let graph = SegmentGraph::from_skeleton(&reference).unwrap();
        let out = adjust_proportions(&driving, &graph).unwrap();
        // Every corrected segment ends at the reference length.
        let out_graph = SegmentGraph::from_skeleton(&out.skeleton).unwrap();
        for (idx, (p, c)) in canonical_segments().iter().enumerate() {
            // Anchor segments change when the torso center moves; check only
            // segments strictly below the root, which is the chained case.
            if p == ROOT {
                continue;
            }
            let (Some(l_ref), Some(l_out)) = (graph.length(idx), out_graph.length(idx)) else {
                continue;
            };
            assert!(
                (l_out - l_ref).abs() <= 1e-9 * l_ref.max(1.0),
                "segment {p}->{c}: got {l_out}, want {l_ref}"
            );
        }
    }

    #[test]
    fn zero_length_driving_segment_is_flagged() {
        let mut reference = anchors_at((0.0, 0.0), 1.0);
        let (nx, ny, _) = reference.get("neck").unwrap();
        reference.set("nose", nx, ny - 4.0, 1.0);
        let graph = SegmentGraph::from_skeleton(&reference).unwrap();

        let mut driving = reference.clone();
        driving.set("nose", nx, ny, 1.0); // collapsed onto the neck
        let out = adjust_proportions(&driving, &graph).unwrap();
        assert_eq!(out.skipped, vec!["neck->nose".to_string()]);
        assert!(!out.rho.contains_key("neck->nose"));
    }

    #[test]
    fn translate_aligns_torso_centers_and_is_rigid() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let reference = random_skeleton(&mut rng, 1.0, (0.0, 0.0));
        let driving = reference.translated(10.0, -5.0);
        let (out, delta) = anchor_translate(&driving, &reference).unwrap();
        assert!((delta.0 + 10.0).abs() < 1e-9 && (delta.1 - 5.0).abs() < 1e-9);
        let co = torso_center(&out).unwrap();
        let cr = torso_center(&reference).unwrap();
        assert!((co.0 - cr.0).abs() < 1e-9 && (co.1 - cr.1).abs() < 1e-9);
        // Rigid: pairwise offsets unchanged.
        for name in driving.names() {
            let a = driving.get(name).unwrap();
            let b = out.get(name).unwrap();
            assert!((b.0 - a.0 - delta.0).abs() < 1e-12);
            assert!((b.1 - a.1 - delta.1).abs() < 1e-12);
        }
    }

    #[test]
    fn self_calibration_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reference = random_skeleton(&mut rng, 1.7, (33.0, 41.0));
        let graph = SegmentGraph::from_skeleton(&reference).unwrap();
        let (out, params) = calibrate(&reference, &reference, &graph).unwrap();
        assert_eq!(params.r_x, 1.0);
        assert_eq!(params.r_y, 1.0);
        assert!(params.skipped.is_empty());
        for name in reference.names() {
            let a = reference.get(name).unwrap();
            let b = out.get(name).unwrap();
            assert!(
                (a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9,
                "joint {name} moved: {a:?} -> {b:?}"
            );
        }
    }

    #[test]
    fn forearm_stretch_is_corrected_in_isolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let reference = random_skeleton(&mut rng, 1.0, (0.0, 0.0));
        let graph = SegmentGraph::from_skeleton(&reference).unwrap();
        // Stretch the left forearm 1.5x, keeping the hand cluster rigid
        // relative to the wrist.
        let (ex, ey, _) = reference.get("left_elbow").unwrap();
        let (wx, wy, _) = reference.get("left_wrist").unwrap();
        let stretch = ((wx - ex) * 0.5, (wy - ey) * 0.5);
        let mut driving = reference.clone();
        for name in reference.names().map(String::from).collect::<Vec<_>>() {
            if name == "left_wrist" || name.starts_with("left_hand") {
                let (x, y, c) = reference.get(&name).unwrap();
                driving.set(&name, x + stretch.0, y + stretch.1, c);
            }
        }
        let (out, params) = calibrate(&reference, &driving, &graph).unwrap();
        assert!((params.rho["left_elbow->left_wrist"] - 1.0 / 1.5).abs() < 1e-9);
        for name in reference.names() {
            let a = reference.get(name).unwrap();
            let b = out.get(name).unwrap();
            assert!(
                (a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6,
                "joint {name}: {a:?} vs {b:?}"
            );
        }
    }
}
