//! Motion statistics over keypoint tracks.
//!
//! Both scores use the same recipe: per keypoint, the population variance
//! of each coordinate over time, summed over x and y, then averaged over
//! keypoints. They are pure functions of the track — no model state is
//! consulted — so identical keypoints always score identically.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::skeleton::{face_joints, hand_joint_names, Skeleton2D};
use crate::Arr;

/// Mean over keypoints of the summed per-coordinate temporal variance.
/// `seq` is `[frames, keypoints, 2]`.
pub fn motion_variance(seq: &Array3<f64>) -> f64 {
    let (frames, keypoints, _) = seq.dim();
    if frames == 0 || keypoints == 0 {
        return 0.0;
    }
    let inv_f = 1.0 / frames as f64;
    let mut total = 0.0;
    for k in 0..keypoints {
        for c in 0..2 {
            let mean: f64 = (0..frames).map(|f| seq[[f, k, c]]).sum::<f64>() * inv_f;
            let var: f64 = (0..frames)
                .map(|f| {
                    let d = seq[[f, k, c]] - mean;
                    d * d
                })
                .sum::<f64>()
                * inv_f;
            total += var;
        }
    }
    total / keypoints as f64
}

fn require_track(seq: &Array3<f64>, what: &str) -> Result<(), HarnessError> {
    let (frames, keypoints, _) = seq.dim();
    if frames < 2 {
        return Err(HarnessError::Config(format!(
            "{what} needs at least 2 frames, got {frames}"
        )));
    }
    if keypoints == 0 {
        return Err(HarnessError::Config(format!("{what} track has no keypoints")));
    }
    Ok(())
}

/// Hand-motion score. Canonical input is the 42-point track from
/// [`hand_sequence`] (21 keypoints per hand), `[frames, 42, 2]`.
pub fn hkv(seq: &Array3<f64>) -> Result<f64, HarnessError> {
    require_track(seq, "hand keypoint variance")?;
    Ok(motion_variance(seq))
}

/// Head-motion score over a face/nose/neck track, `[frames, K, 2]`.
pub fn hmv(seq: &Array3<f64>) -> Result<f64, HarnessError> {
    require_track(seq, "head motion variance")?;
    Ok(motion_variance(seq))
}

fn named_sequence(
    frames: &[Skeleton2D],
    names: &[String],
) -> Result<Array3<f64>, HarnessError> {
    let mut seq = Array3::zeros((frames.len(), names.len(), 2));
    for (f, skel) in frames.iter().enumerate() {
        for (k, name) in names.iter().enumerate() {
            let (x, y, _) = skel.get(name).ok_or_else(|| {
                HarnessError::Config(format!("frame {f} is missing keypoint `{name}`"))
            })?;
            seq[[f, k, 0]] = x;
            seq[[f, k, 1]] = y;
        }
    }
    Ok(seq)
}

/// Both hands' keypoints per frame, left then right: `[frames, 42, 2]`.
pub fn hand_sequence(frames: &[Skeleton2D]) -> Result<Array3<f64>, HarnessError> {
    let mut names = hand_joint_names("left");
    names.extend(hand_joint_names("right"));
    named_sequence(frames, &names)
}

/// Face, nose, and neck keypoints per frame: `[frames, 6, 2]`.
pub fn head_sequence(frames: &[Skeleton2D]) -> Result<Array3<f64>, HarnessError> {
    let mut names = face_joints();
    names.push("neck".to_string());
    named_sequence(frames, &names)
}

/// Per-frame intensity centroids of latent channels: `[F, C, S, S]` plus a
/// channel list gives `[F, len(channels), 2]` (x, y) in grid units. Mass is
/// the squared positive part, so faint background never swamps a blob; a
/// channel with no mass falls back to the grid center.
pub fn latent_com(latents: &Arr, channels: &[usize]) -> Result<Array3<f64>, HarnessError> {
    let sh = latents.shape().to_vec();
    if sh.len() != 4 {
        return Err(HarnessError::Config(format!(
            "latent clip has shape {sh:?}, expected [frames, channels, side, side]"
        )));
    }
    let (frames, chans, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    for &c in channels {
        if c >= chans {
            return Err(HarnessError::Config(format!(
                "channel {c} out of range for {chans}-channel latents"
            )));
        }
    }
    let mut out = Array3::zeros((frames, channels.len(), 2));
    for f in 0..frames {
        for (ci, &c) in channels.iter().enumerate() {
            let (mut mass, mut mx, mut my) = (0.0f64, 0.0f64, 0.0f64);
            for y in 0..h {
                for x in 0..w {
                    let v = latents[[f, c, y, x]].max(0.0) as f64;
                    let wgt = v * v;
                    mass += wgt;
                    mx += wgt * (x as f64 + 0.5);
                    my += wgt * (y as f64 + 0.5);
                }
            }
            let (cx, cy) = if mass > 1e-12 {
                (mx / mass, my / mass)
            } else {
                (w as f64 / 2.0, h as f64 / 2.0)
            };
            out[[f, ci, 0]] = cx;
            out[[f, ci, 1]] = cy;
        }
    }
    Ok(out)
}

/// Scores for one generated clip, written to the run's metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Hand-motion variance of the output's hand-blob centroids.
    pub hkv: f64,
    /// Head-motion variance of the output's head-blob centroid.
    pub hmv: f64,
    /// MSE between the generated latents and the driving clip's latents.
    pub recon_mse: f64,
    /// Fraction of codebook rows used by the reference hand crop.
    pub codebook_usage: f64,
    /// Perplexity of the crop's code assignment distribution.
    pub codebook_perplexity: f64,
    /// Free-form provenance: clip ids, seeds, guidance scales.
    pub meta: BTreeMap<String, String>,
}

impl MetricReport {
    /// Every score must be finite, and the variances non-negative.
    pub fn validate(&self) -> Result<(), HarnessError> {
        for (name, v) in [
            ("hkv", self.hkv),
            ("hmv", self.hmv),
            ("recon_mse", self.recon_mse),
            ("codebook_usage", self.codebook_usage),
            ("codebook_perplexity", self.codebook_perplexity),
        ] {
            if !v.is_finite() {
                return Err(HarnessError::Config(format!("metric {name} is not finite: {v}")));
            }
        }
        if self.hkv < 0.0 || self.hmv < 0.0 {
            return Err(HarnessError::Config("motion variances must be non-negative".into()));
        }
        Ok(())
    }
}
