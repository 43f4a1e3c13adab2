//! Rasterize a skeleton into a pose map for the conditioning encoder.
//!
//! Channels separate the sides: 0 = left arm+hand, 1 = right arm+hand,
//! 2 = shoulder girdle. Head and face are deliberately not drawn — pose maps
//! carry gesture, not head motion. Strokes have a soft 1.5 px falloff so
//! nearby poses produce nearby maps.

use ndarray::IxDyn;

use super::Skeleton2D;
use crate::tensor::Arr;

const THICKNESS: f64 = 1.5;

fn stroke(plane: &mut ndarray::ArrayViewMut2<f32>, a: (f64, f64), b: (f64, f64)) {
    let (h, w) = (plane.shape()[0] as i64, plane.shape()[1] as i64);
    let margin = THICKNESS.ceil() as i64 + 1;
    let x0 = (a.0.min(b.0).floor() as i64 - margin).max(0);
    let x1 = (a.0.max(b.0).ceil() as i64 + margin).min(w - 1);
    let y0 = (a.1.min(b.1).floor() as i64 - margin).max(0);
    let y1 = (a.1.max(b.1).ceil() as i64 + margin).min(h - 1);
    let seg = (b.0 - a.0, b.1 - a.1);
    let seg_len2 = seg.0 * seg.0 + seg.1 * seg.1;
    for py in y0..=y1 {
        for px in x0..=x1 {
            let p = (px as f64 + 0.5, py as f64 + 0.5);
            let t = if seg_len2 == 0.0 {
                0.0
            } else {
                (((p.0 - a.0) * seg.0 + (p.1 - a.1) * seg.1) / seg_len2).clamp(0.0, 1.0)
            };
            let q = (a.0 + t * seg.0, a.1 + t * seg.1);
            let d = (p.0 - q.0).hypot(p.1 - q.1);
            let v = (1.0 - d / THICKNESS).max(0.0) as f32;
            let cell = &mut plane[[py as usize, px as usize]];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

/// Draw the arm/hand chains of `skel` into a `[3, h, w]` map. Joints missing
/// or below the confidence threshold simply leave their strokes out.
pub fn render_pose_map(skel: &Skeleton2D, hw: (usize, usize)) -> Arr {
    let (h, w) = hw;
    let mut out = Arr::zeros(IxDyn(&[3, h, w]));

    let mut draw_chain = |chan: usize, names: &[String]| {
        let mut plane = out
            .view_mut()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .index_axis_move(ndarray::Axis(0), chan);
        for pair in names.windows(2) {
            let (Some(a), Some(b)) = (skel.confident(&pair[0]), skel.confident(&pair[1])) else {
                continue;
            };
            stroke(&mut plane, a, b);
        }
    };

    for (chan, side) in [(0usize, "left"), (1usize, "right")] {
        let arm: Vec<String> = [
            format!("{side}_shoulder"),
            format!("{side}_elbow"),
            format!("{side}_wrist"),
            format!("{side}_hand_00"),
        ]
        .to_vec();
        draw_chain(chan, &arm);
        for finger in 0..5 {
            let mut chain = vec![format!("{side}_hand_00")];
            for k in 0..4 {
                let idx = 1 + finger * 4 + k;
                chain.push(format!("{side}_hand_{idx:02}"));
            }
            draw_chain(chan, &chain);
        }
    }
    draw_chain(
        2,
        &[
            "left_shoulder".to_string(),
            "neck".to_string(),
            "right_shoulder".to_string(),
        ],
    );
    out
}
