//! Procedural upper-body skeletons for tests and synthetic datasets.
//!
//! Torso anchors come from a fixed offset template (scaled and translated per
//! skeleton) while head, arms, and fingers articulate freely. Keeping anchor
//! *directions* shared across skeletons makes retargeting exact: a calibrated
//! skeleton's torso reproduces the reference torso, so calibrating twice
//! changes nothing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Skeleton2D;

/// Fixed torso-anchor offsets from the torso center, in body units. The
/// offsets sum to zero (the template's centroid is the torso center), the
/// shoulders are level, and neck/hip-midpoint share an x coordinate.
pub fn anchor_offsets() -> [(&'static str, (f64, f64)); 5] {
    [
        ("neck", (0.0, -0.60)),
        ("left_shoulder", (-0.55, -0.30)),
        ("right_shoulder", (0.55, -0.30)),
        ("left_hip", (-0.35, 0.60)),
        ("right_hip", (0.35, 0.60)),
    ]
}

fn polar(base: (f64, f64), angle: f64, len: f64) -> (f64, f64) {
    (base.0 + angle.cos() * len, base.1 + angle.sin() * len)
}

/// A full random skeleton: template anchors at `center` scaled by `scale`,
/// articulated head/arms/hands, all confidences 1. Angles follow image
/// convention (y down), so `PI/2` points toward the bottom of the frame.
pub fn random_skeleton(rng: &mut ChaCha8Rng, scale: f64, center: (f64, f64)) -> Skeleton2D {
    let mut s = Skeleton2D::new();
    for (name, (ox, oy)) in anchor_offsets() {
        s.set(name, center.0 + scale * ox, center.1 + scale * oy, 1.0);
    }
    let (nx, ny, _) = s.get("neck").unwrap();

    // Head: nose above the neck with a small random tilt; eyes/ears rigid
    // around the nose.
    let head_dx = rng.gen_range(-0.10..0.10) * scale;
    let head_dy = -rng.gen_range(0.30..0.45) * scale;
    let nose = (nx + head_dx, ny + head_dy);
    s.set("nose", nose.0, nose.1, 1.0);
    s.set("left_eye", nose.0 - 0.08 * scale, nose.1 - 0.05 * scale, 1.0);
    s.set("right_eye", nose.0 + 0.08 * scale, nose.1 - 0.05 * scale, 1.0);
    s.set("left_ear", nose.0 - 0.16 * scale, nose.1 + 0.02 * scale, 1.0);
    s.set("right_ear", nose.0 + 0.16 * scale, nose.1 + 0.02 * scale, 1.0);

    for (side, sign) in [("left", -1.0f64), ("right", 1.0f64)] {
        let (sx, sy, _) = s.get(&format!("{side}_shoulder")).unwrap();
        // Upper arm: generally downward-outward.
        let a1 = std::f64::consts::FRAC_PI_2 + sign * rng.gen_range(-0.9..0.3);
        let elbow = polar((sx, sy), a1, rng.gen_range(0.30..0.45) * scale);
        s.set(&format!("{side}_elbow"), elbow.0, elbow.1, 1.0);
        // Forearm: independent swing.
        let a2 = a1 + rng.gen_range(-1.0..1.0);
        let wrist = polar(elbow, a2, rng.gen_range(0.25..0.40) * scale);
        s.set(&format!("{side}_wrist"), wrist.0, wrist.1, 1.0);

        let hand_angle = a2 + rng.gen_range(-0.4..0.4);
        let hand_root = polar(wrist, hand_angle, 0.06 * scale);
        s.set(&format!("{side}_hand_00"), hand_root.0, hand_root.1, 1.0);
        for finger in 0..5 {
            let spread = (finger as f64 - 2.0) * 0.28 + rng.gen_range(-0.08..0.08);
            let mut angle = hand_angle + spread;
            let mut joint = hand_root;
            for k in 0..4 {
                angle += rng.gen_range(-0.15..0.15);
                joint = polar(joint, angle, rng.gen_range(0.028..0.042) * scale);
                let idx = 1 + finger * 4 + k;
                s.set(&format!("{side}_hand_{idx:02}"), joint.0, joint.1, 1.0);
            }
        }
    }
    s
}
