//! Synthetic data for the whole pipeline: procedurally rendered hand crops
//! for the codebook, scripted half-body clips in latent space for the
//! denoiser, and the batching glue that turns clips into conditioning
//! bundles.
//!
//! Everything is a pure function of (config, seed). Datasets written twice
//! produce byte-identical files, which resume checks and provenance
//! manifests rely on.
//!
//! A clip is scripted so that each conditioning stream owns one effect:
//! the head blob oscillates vertically with the audio rhythm envelope (the
//! pose map deliberately omits the head, so timing is only recoverable
//! from audio), its brightness scales with the clip's lip level, the two
//! hand blobs ride the wrist orbits that the pose map *does* show, and a
//! per-clip texture channel is constant across frames so only the
//! reference image can explain it.

use std::path::Path;

use ndarray::{Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ClipSetConfig;
use super::HarnessError;
use crate::attention::{hand_mask_from_keypoints, head_mask_from_keypoints, RegionMask};
use crate::audio::{
    pool_windows, rhythm_envelope, synth_audio_features, AudioFeatureTensor, SynthAudioConfig,
};
use crate::codebook::{hand_tokens, CodebookConfig};
use crate::container::Container;
use crate::denoiser::{rhythm_window_rows, ConditioningBundle, DenoiserConfig, SiteMasks};
use crate::skeleton::{
    canonical_joints, face_joints, hand_joint_names, random_skeleton, render_pose_map, Skeleton2D,
};
use crate::tensor::{init_rng, name_seed, ParamSet};
use crate::Arr;

pub const HANDS_FILE: &str = "hands.mar";
pub const CLIPS_FILE: &str = "clips.mar";
pub const HAND_KIND: &str = "hand-dataset";
pub const CLIP_KIND: &str = "clip-dataset";

/// Gate dilation as a multiple of the keypoint bounding-box diagonal. The
/// face box is wide, so a modest factor covers the rendered blob; hand
/// boxes are only a couple of cells across and need a larger one.
const HEAD_DILATION: f64 = 1.5;
const HAND_DILATION: f64 = 3.0;

// ---------------------------------------------------------------------------
// Hand crops
// ---------------------------------------------------------------------------

/// Parameter ranges for the procedural hand renderer. Every `(lo, hi)`
/// pair is sampled uniformly per hand; a degenerate range pins that
/// parameter for the whole set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticHandSpec {
    pub image_size: usize,
    /// Palm semi-major axis, as a fraction of the image side.
    pub palm_radius: (f64, f64),
    /// Palm minor/major axis ratio.
    pub palm_aspect: (f64, f64),
    pub finger_count: (usize, usize),
    /// Finger capsule half-width, as a fraction of the image side.
    pub finger_width: (f64, f64),
    /// Bend angle between the two finger segments, radians.
    pub articulation: (f64, f64),
    /// Peak amplitude of the per-pixel speckle added after drawing.
    pub texture_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticHandSpec {
    fn default() -> Self {
        SyntheticHandSpec {
            image_size: 64,
            palm_radius: (0.16, 0.24),
            palm_aspect: (0.65, 1.0),
            finger_count: (3, 5),
            finger_width: (0.030, 0.055),
            articulation: (0.0, 0.9),
            texture_noise: 0.08,
            seed: 11,
        }
    }
}

impl SyntheticHandSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.image_size < 16 {
            return Err(format!("image_size {} is too small", self.image_size));
        }
        let ranges = [
            ("palm_radius", self.palm_radius, 0.01, 0.40),
            ("palm_aspect", self.palm_aspect, 0.2, 1.0),
            ("finger_width", self.finger_width, 0.005, 0.12),
            ("articulation", self.articulation, 0.0, 1.6),
        ];
        for (name, (lo, hi), min, max) in ranges {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < min || hi > max {
                return Err(format!("{name} range ({lo}, {hi}) must lie in [{min}, {max}]"));
            }
        }
        let (flo, fhi) = self.finger_count;
        if flo < 1 || fhi > 6 || flo > fhi {
            return Err(format!("finger_count ({flo}, {fhi}) must lie in [1, 6]"));
        }
        if !(0.0..=1.0).contains(&self.texture_noise) {
            return Err(format!("texture_noise {} must lie in [0, 1]", self.texture_noise));
        }
        Ok(())
    }
}

/// One sampled hand: where the palm sits and how each finger leaves it.
/// All lengths are fractions of the image side.
#[derive(Debug, Clone, PartialEq)]
pub struct HandShape {
    pub palm_center: (f64, f64),
    pub palm_radius: f64,
    pub palm_aspect: f64,
    /// Direction the finger fan points, radians, image convention (y down).
    pub orientation: f64,
    pub fingers: Vec<FingerShape>,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerShape {
    pub angle: f64,
    pub length: f64,
    pub width: f64,
    pub bend: f64,
}

/// Sample hand `index` of the set. Pure: the same `(spec, index)` always
/// yields the same shape, independent of every other index.
pub fn sample_hand_shape(spec: &SyntheticHandSpec, index: usize) -> HandShape {
    let mut rng = init_rng(spec.seed, &format!("hand.{index}"));
    let palm_center = (
        0.5 + rng.gen_range(-0.06..=0.06),
        0.52 + rng.gen_range(-0.06..=0.06),
    );
    let palm_radius = rng.gen_range(spec.palm_radius.0..=spec.palm_radius.1);
    let palm_aspect = rng.gen_range(spec.palm_aspect.0..=spec.palm_aspect.1);
    // Fingers fan upward with a random lean.
    let orientation = -std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.5..=0.5);
    let count = rng.gen_range(spec.finger_count.0..=spec.finger_count.1);
    let spread = rng.gen_range(0.25..=0.38);
    let fingers = (0..count)
        .map(|i| FingerShape {
            angle: orientation + (i as f64 - (count as f64 - 1.0) / 2.0) * spread,
            length: rng.gen_range(0.26..=0.40),
            width: rng.gen_range(spec.finger_width.0..=spec.finger_width.1),
            bend: rng.gen_range(spec.articulation.0..=spec.articulation.1),
        })
        .collect();
    HandShape {
        palm_center,
        palm_radius,
        palm_aspect,
        orientation,
        fingers,
        texture_seed: name_seed(spec.seed, &format!("hand.tex.{index}")),
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 { ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + t * abx, a.1 + t * aby);
    (p.0 - cx).hypot(p.1 - cy)
}

/// Rasterize one hand as an RGB image in `[0, 1]`, shape `[3, S, S]`.
pub fn render_hand(spec: &SyntheticHandSpec, shape: &HandShape) -> Arr {
    let s = spec.image_size;
    let sf = s as f64;
    let skin = [0.82f64, 0.63, 0.50];
    let background = 0.12f64;

    let cx = shape.palm_center.0 * sf;
    let cy = shape.palm_center.1 * sf;
    let rx = shape.palm_radius * sf;
    let ry = shape.palm_radius * shape.palm_aspect * sf;
    let (sin_o, cos_o) = shape.orientation.sin_cos();

    // Each finger: a proximal segment leaving the palm edge along the
    // finger angle and a distal segment rotated by the bend.
    struct Capsule {
        a: (f64, f64),
        b: (f64, f64),
        w: f64,
        shade: f64,
    }
    let mut capsules = Vec::new();
    for f in &shape.fingers {
        let (fs, fc) = f.angle.sin_cos();
        // Palm-ellipse radius along the finger direction (ellipse axes are
        // aligned with the orientation).
        let du = fc * cos_o + fs * sin_o;
        let dv = -fc * sin_o + fs * cos_o;
        let denom = (du / rx).powi(2) + (dv / ry).powi(2);
        let edge = if denom > 0.0 { 1.0 / denom.sqrt() } else { rx };
        let root = (cx + fc * edge, cy + fs * edge);
        let l1 = 0.55 * f.length * sf;
        let l2 = 0.45 * f.length * sf;
        let knuckle = (root.0 + fc * l1, root.1 + fs * l1);
        let (bs, bc) = (f.angle + f.bend).sin_cos();
        let tip = (knuckle.0 + bc * l2, knuckle.1 + bs * l2);
        let w = f.width * sf;
        capsules.push(Capsule { a: root, b: knuckle, w, shade: 1.0 });
        capsules.push(Capsule { a: knuckle, b: tip, w: w * 0.85, shade: 0.85 });
    }

    let mut rng = init_rng(shape.texture_seed, "hand.texture");
    let mut out = Arr::zeros(IxDyn(&[3, s, s]));
    for y in 0..s {
        for x in 0..s {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            // Palm test in ellipse coordinates.
            let (px, py) = (p.0 - cx, p.1 - cy);
            let u = px * cos_o + py * sin_o;
            let v = -px * sin_o + py * cos_o;
            let in_palm = (u / rx).powi(2) + (v / ry).powi(2) <= 1.0;
            let mut shade = if in_palm { Some(0.95) } else { None };
            for c in &capsules {
                if dist_to_segment(p, c.a, c.b) <= c.w {
                    shade = Some(shade.map_or(c.shade, |s: f64| s.max(c.shade)));
                }
            }
            let speckle = rng.gen_range(-spec.texture_noise..=spec.texture_noise);
            for ch in 0..3 {
                let base = match shade {
                    Some(k) => skin[ch] * k,
                    None => background,
                };
                out[[ch, y, x]] = ((base + speckle).clamp(0.0, 1.0)) as f32;
            }
        }
    }
    out
}

/// Render `n` hands and write them as one tensor container. The file is a
/// pure function of `(spec, n)`: rewriting it yields identical bytes.
pub fn make_synthetic_hands(
    spec: &SyntheticHandSpec,
    n: usize,
    path: &Path,
) -> Result<(), HarnessError> {
    spec.validate().map_err(HarnessError::Config)?;
    if n == 0 {
        return Err(HarnessError::Config("hand set size must be positive".into()));
    }
    let s = spec.image_size;
    let mut images = Arr::zeros(IxDyn(&[n, 3, s, s]));
    for i in 0..n {
        let shape = sample_hand_shape(spec, i);
        let img = render_hand(spec, &shape);
        images.index_axis_mut(Axis(0), i).assign(&img);
    }
    let mut c = Container::new(
        HAND_KIND,
        serde_json::json!({ "spec": spec, "n": n }),
    );
    c.push("images", images);
    c.write(path)?;
    Ok(())
}

/// Read a hand dataset back: `([n, 3, S, S] images, spec)`.
pub fn load_hands(path: &Path) -> Result<(Arr, SyntheticHandSpec), HarnessError> {
    let c = Container::read_expect(path, HAND_KIND)?;
    let spec: SyntheticHandSpec = serde_json::from_value(c.meta()["spec"].clone())
        .map_err(|e| HarnessError::Config(format!("hand dataset meta: {e}")))?;
    let images = c.require("images")?.clone();
    let sh = images.shape();
    if sh.len() != 4 || sh[1] != 3 || sh[2] != spec.image_size || sh[3] != spec.image_size {
        return Err(HarnessError::Config(format!(
            "hand images have shape {sh:?}, expected [n, 3, {0}, {0}]",
            spec.image_size
        )));
    }
    Ok((images, spec))
}

// ---------------------------------------------------------------------------
// Clips
// ---------------------------------------------------------------------------

/// Per-clip script values recorded in the dataset meta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub rhythm_hz: f64,
    pub amplitude: f32,
    pub lip_level: f32,
    /// Row of the hand dataset used as this clip's hand crop.
    pub hand_index: usize,
}

struct Orbit {
    rx: f64,
    ry: f64,
    phase0: f64,
    dphase: f64,
}

impl Orbit {
    fn offset(&self, frame: usize) -> (f64, f64) {
        let phase = self.phase0 + frame as f64 * self.dphase;
        (self.rx * phase.cos(), self.ry * phase.sin())
    }
}

struct ClipScript {
    meta: ClipMeta,
    base: Skeleton2D,
    orbits: [Orbit; 2],
    texture: Arr,
}

/// Audio token aligned with the midpoint of frame `f`; the same alignment
/// the rhythm attention window uses.
fn frame_token(frame: usize, frames: usize, tokens: usize) -> usize {
    let c = ((frame as f64 + 0.5) * tokens as f64 / frames as f64).round() as usize;
    c.min(tokens - 1)
}

/// Smooth per-clip texture: a coarse 4x4 field bilinearly upsampled.
fn smooth_texture(rng: &mut rand_chacha::ChaCha8Rng, side: usize) -> Arr {
    const COARSE: usize = 4;
    let mut grid = [[0.0f64; COARSE]; COARSE];
    for row in grid.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-0.8..=0.8);
        }
    }
    let mut out = Arr::zeros(IxDyn(&[side, side]));
    for y in 0..side {
        for x in 0..side {
            let gy = ((y as f64 + 0.5) * COARSE as f64 / side as f64 - 0.5)
                .clamp(0.0, (COARSE - 1) as f64);
            let gx = ((x as f64 + 0.5) * COARSE as f64 / side as f64 - 0.5)
                .clamp(0.0, (COARSE - 1) as f64);
            let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(COARSE - 1), (x0 + 1).min(COARSE - 1));
            let (ty, tx) = (gy - y0 as f64, gx - x0 as f64);
            let top = grid[y0][x0] * (1.0 - tx) + grid[y0][x1] * tx;
            let bot = grid[y1][x0] * (1.0 - tx) + grid[y1][x1] * tx;
            out[[y, x]] = (top * (1.0 - ty) + bot * ty) as f32;
        }
    }
    out
}

fn sample_script(cfg: &ClipSetConfig, seed: u64, index: usize, n_hands: usize) -> ClipScript {
    let mut rng = init_rng(seed, &format!("clip.{index}"));
    let hz = cfg.rhythm_hz[rng.gen_range(0..cfg.rhythm_hz.len())];
    let amplitude = rng.gen_range(cfg.amplitude.0..=cfg.amplitude.1);
    let lip_level = rng.gen_range(cfg.lip_level.0..=cfg.lip_level.1);
    let hand_index = rng.gen_range(0..n_hands);
    let s = cfg.latent_size as f64;
    let base = random_skeleton(&mut rng, s / 4.0, (s / 2.0, 0.5625 * s));
    let mut orbit = || {
        let rx = rng.gen_range(cfg.hand_orbit.0..=cfg.hand_orbit.1);
        Orbit {
            rx,
            ry: rx * rng.gen_range(0.5..=1.0),
            phase0: rng.gen_range(0.0..std::f64::consts::TAU),
            dphase: std::f64::consts::TAU * rng.gen_range(0.75..=1.5) / cfg.frames as f64,
        }
    };
    let orbits = [orbit(), orbit()];
    let texture = smooth_texture(&mut rng, cfg.latent_size);
    ClipScript {
        meta: ClipMeta { rhythm_hz: hz, amplitude, lip_level, hand_index },
        base,
        orbits,
        texture,
    }
}

/// Skeleton of frame `f`: the head rides the rhythm envelope, each hand
/// chain (wrist, palm, fingers) translates rigidly along its orbit, and
/// the elbow follows at half the offset.
fn frame_skeleton(cfg: &ClipSetConfig, script: &ClipScript, frame: usize) -> Skeleton2D {
    let token = frame_token(frame, cfg.frames, cfg.audio_tokens);
    let env = rhythm_envelope(script.meta.amplitude, script.meta.rhythm_hz, token) as f64;
    let dy = cfg.head_gain * env;
    let mut s = script.base.clone();
    for name in face_joints() {
        if let Some((x, y, c)) = script.base.get(&name).map(|(x, y, c)| (x, y, c)) {
            s.set(&name, x, y + dy, c);
        }
    }
    for (i, side) in ["left", "right"].iter().enumerate() {
        let (dx, dyh) = script.orbits[i].offset(frame);
        let mut moved = hand_joint_names(side);
        moved.push(format!("{side}_wrist"));
        for name in moved {
            if let Some((x, y, c)) = script.base.get(&name) {
                s.set(&name, x + dx, y + dyh, c);
            }
        }
        if let Some((x, y, c)) = script.base.get(&format!("{side}_elbow")) {
            s.set(&format!("{side}_elbow"), x + 0.5 * dx, y + 0.5 * dyh, c);
        }
    }
    s
}

/// Add an isotropic Gaussian blob to one channel view (y-major square).
fn splat(chan: &mut ndarray::ArrayViewMutD<'_, f32>, center: (f64, f64), sigma: f64, amp: f64) {
    let side = chan.shape()[0];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 + 0.5 - center.0;
            let dy = y as f64 + 0.5 - center.1;
            chan[[y, x]] += (amp * (-(dx * dx + dy * dy) * inv).exp()) as f32;
        }
    }
}

/// Latent frame for a posed skeleton: head blob (brightness follows the
/// lip level), one blob per hand palm, and the clip texture.
fn render_latent(cfg: &ClipSetConfig, script: &ClipScript, skel: &Skeleton2D, lips: bool) -> Arr {
    let s = cfg.latent_size;
    let mut z = Arr::zeros(IxDyn(&[cfg.latent_channels, s, s]));
    let head_amp = if lips { 2.0 * (1.0 + 0.3 * script.meta.lip_level as f64) } else { 2.0 };
    if let Some((x, y, _)) = skel.get("nose") {
        splat(&mut z.index_axis_mut(Axis(0), 0), (x, y), 1.25, head_amp);
    }
    for (ch, side) in [(1usize, "left"), (2, "right")] {
        if let Some((x, y, _)) = skel.get(&format!("{side}_hand_00")) {
            splat(&mut z.index_axis_mut(Axis(0), ch), (x, y), 1.0, 2.0);
        }
    }
    z.index_axis_mut(Axis(0), 3).assign(&script.texture);
    z
}

fn skeleton_row(kp: &mut Arr, prefix: &[usize], joints: &[String], skel: &Skeleton2D) {
    for (j, name) in joints.iter().enumerate() {
        let (x, y, c) = skel.get(name).unwrap_or((0.0, 0.0, 0.0));
        let mut idx = prefix.to_vec();
        idx.extend([j, 0]);
        kp[IxDyn(&idx)] = x as f32;
        idx[prefix.len() + 1] = 1;
        kp[IxDyn(&idx)] = y as f32;
        idx[prefix.len() + 1] = 2;
        kp[IxDyn(&idx)] = c as f32;
    }
}

/// Script and render a full clip dataset. `hands` supplies the crops
/// (`[n, 3, hs, hs]`) clips reference as their identity's hand close-up.
pub fn make_synthetic_clips(
    cfg: &ClipSetConfig,
    seed: u64,
    hands: &Arr,
    path: &Path,
) -> Result<(), HarnessError> {
    let hs = hands.shape().to_vec();
    if hs.len() != 4 || hs[1] != 3 {
        return Err(HarnessError::Config(format!(
            "hand crops have shape {hs:?}, expected [n, 3, s, s]"
        )));
    }
    if cfg.clips == 0 || cfg.frames == 0 {
        return Err(HarnessError::Config("clips and frames must be positive".into()));
    }
    let (n, f, c, s) = (cfg.clips, cfg.frames, cfg.latent_channels, cfg.latent_size);
    let (t, d) = (cfg.audio_tokens, cfg.feat_dim);
    let joints = canonical_joints();
    let j = joints.len();
    let windows = SynthAudioConfig::default().windows;

    let mut latents = Arr::zeros(IxDyn(&[n, f, c, s, s]));
    let mut ref_latents = Arr::zeros(IxDyn(&[n, c, s, s]));
    let mut audio = Arr::zeros(IxDyn(&[n, windows, t, d]));
    let mut keypoints = Arr::zeros(IxDyn(&[n, f, j, 3]));
    let mut ref_keypoints = Arr::zeros(IxDyn(&[n, j, 3]));
    let mut crops = Arr::zeros(IxDyn(&[n, 3, hs[2], hs[3]]));
    let mut metas = Vec::with_capacity(n);

    for i in 0..n {
        let script = sample_script(cfg, seed, i, hs[0]);
        let feats = synth_audio_features(
            name_seed(seed, &format!("audio.{i}")),
            script.meta.rhythm_hz,
            t,
            &SynthAudioConfig {
                windows,
                feat_dim: d,
                amplitude: script.meta.amplitude,
                lip_level: script.meta.lip_level,
                noise: cfg.audio_noise,
            },
        );
        audio
            .index_axis_mut(Axis(0), i)
            .assign(&feats.data().index_axis(Axis(0), 0));
        ref_latents
            .index_axis_mut(Axis(0), i)
            .assign(&render_latent(cfg, &script, &script.base, false));
        skeleton_row(&mut ref_keypoints, &[i], &joints, &script.base);
        for fr in 0..f {
            let skel = frame_skeleton(cfg, &script, fr);
            latents
                .index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), fr)
                .assign(&render_latent(cfg, &script, &skel, true));
            skeleton_row(&mut keypoints, &[i, fr], &joints, &skel);
        }
        crops
            .index_axis_mut(Axis(0), i)
            .assign(&hands.index_axis(Axis(0), script.meta.hand_index));
        metas.push(script.meta);
    }

    let mut out = Container::new(
        CLIP_KIND,
        serde_json::json!({
            "config": cfg,
            "seed": seed,
            "joints": joints,
            "clips": metas,
        }),
    );
    out.push("latents", latents);
    out.push("ref_latents", ref_latents);
    out.push("audio", audio);
    out.push("keypoints", keypoints);
    out.push("ref_keypoints", ref_keypoints);
    out.push("hand_crops", crops);
    out.write(path)?;
    Ok(())
}

/// A clip dataset loaded back into memory, with skeletons rebuilt and the
/// audio window axis pooled away.
#[derive(Debug, Clone)]
pub struct ClipSet {
    pub config: ClipSetConfig,
    /// `[N, F, C, S, S]` clean latent videos.
    pub latents: Arr,
    /// `[N, C, S, S]` one reference frame per clip (rest pose, no rhythm).
    pub ref_latents: Arr,
    /// `[N, W, T, D]` raw windowed audio features.
    pub audio: Arr,
    /// `[N, T, D]` window-pooled audio tokens.
    pub pooled_audio: Arr,
    /// `[N, 3, hs, hs]` hand close-up per clip.
    pub hand_crops: Arr,
    /// Per clip, per frame skeletons in latent-grid units.
    pub frames: Vec<Vec<Skeleton2D>>,
    /// Rest-pose skeleton per clip.
    pub refs: Vec<Skeleton2D>,
    pub meta: Vec<ClipMeta>,
}

impl ClipSet {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }
}

fn skeleton_from_row(joints: &[String], row: ndarray::ArrayViewD<'_, f32>) -> Skeleton2D {
    let mut s = Skeleton2D::new();
    for (j, name) in joints.iter().enumerate() {
        s.set(name, row[[j, 0]] as f64, row[[j, 1]] as f64, row[[j, 2]] as f64);
    }
    s
}

pub fn load_clips(path: &Path) -> Result<ClipSet, HarnessError> {
    let c = Container::read_expect(path, CLIP_KIND)?;
    let meta = c.meta();
    let config: ClipSetConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| HarnessError::Config(format!("clip dataset meta: {e}")))?;
    let joints: Vec<String> = serde_json::from_value(meta["joints"].clone())
        .map_err(|e| HarnessError::Config(format!("clip dataset joints: {e}")))?;
    let clip_meta: Vec<ClipMeta> = serde_json::from_value(meta["clips"].clone())
        .map_err(|e| HarnessError::Config(format!("clip dataset clips: {e}")))?;
    let (n, f, ch, s) =
        (config.clips, config.frames, config.latent_channels, config.latent_size);
    let j = joints.len();
    let latents = c.require_shaped("latents", &[n, f, ch, s, s])?.clone();
    let ref_latents = c.require_shaped("ref_latents", &[n, ch, s, s])?.clone();
    let keypoints = c.require_shaped("keypoints", &[n, f, j, 3])?.clone();
    let ref_keypoints = c.require_shaped("ref_keypoints", &[n, j, 3])?.clone();
    let audio = c.require("audio")?.clone();
    let hand_crops = c.require("hand_crops")?.clone();
    let ash = audio.shape().to_vec();
    if ash.len() != 4 || ash[0] != n || ash[2] != config.audio_tokens || ash[3] != config.feat_dim
    {
        return Err(HarnessError::Config(format!(
            "audio tensor has shape {ash:?}, expected [{n}, *, {}, {}]",
            config.audio_tokens, config.feat_dim
        )));
    }

    let mut pooled_audio = Arr::zeros(IxDyn(&[n, config.audio_tokens, config.feat_dim]));
    for i in 0..n {
        let per_clip = audio.index_axis(Axis(0), i).to_owned().insert_axis(Axis(0));
        let feats = AudioFeatureTensor::new(per_clip)?;
        pooled_audio
            .index_axis_mut(Axis(0), i)
            .assign(&pool_windows(&feats).index_axis(Axis(0), 0));
    }

    let frames = (0..n)
        .map(|i| {
            (0..f)
                .map(|fr| {
                    skeleton_from_row(
                        &joints,
                        keypoints.index_axis(Axis(0), i).index_axis(Axis(0), fr),
                    )
                })
                .collect()
        })
        .collect();
    let refs = (0..n)
        .map(|i| skeleton_from_row(&joints, ref_keypoints.index_axis(Axis(0), i)))
        .collect();

    Ok(ClipSet {
        config,
        latents,
        ref_latents,
        audio,
        pooled_audio,
        hand_crops,
        frames,
        refs,
        meta: clip_meta,
    })
}

/// Materialise both datasets under `<root>/data` with a config echo and a
/// provenance manifest. Returns `(hands_path, clips_path)`.
pub fn run_make_data(
    cfg: &super::config::RunConfig,
    root: &Path,
) -> Result<(std::path::PathBuf, std::path::PathBuf), HarnessError> {
    cfg.validate()?;
    let dir = super::RunDir::create(&super::data_dir(root))?;
    let config_path = dir.write_config(cfg)?;
    let hands_path = dir.file(HANDS_FILE);
    let clips_path = dir.file(CLIPS_FILE);
    make_synthetic_hands(&cfg.data.hands.spec, cfg.data.hands.n, &hands_path)?;
    let (images, _) = load_hands(&hands_path)?;
    // Clips may only reference the training split, so the hold-out rows the
    // codebook is scored on never leak into conditioning.
    let train_n = cfg.data.hands.n - cfg.data.hands.holdout;
    let train = images.slice_axis(Axis(0), ndarray::Slice::from(0..train_n)).to_owned();
    make_synthetic_clips(&cfg.data.clips, cfg.seed, &train, &clips_path)?;
    dir.write_manifest(
        cfg.seed,
        &[],
        &[config_path, hands_path.clone(), clips_path.clone()],
    )?;
    Ok((hands_path, clips_path))
}

/// Quantize every clip's hand crop: `[N, grid^2, code_dim]` codebook rows.
pub fn clip_hand_tokens(
    params: &ParamSet,
    cfg: &CodebookConfig,
    clips: &ClipSet,
) -> Result<Arr, HarnessError> {
    let sh = clips.hand_crops.shape().to_vec();
    if sh[1] != cfg.in_channels || sh[2] != cfg.image_size || sh[3] != cfg.image_size {
        return Err(HarnessError::Config(format!(
            "hand crops {sh:?} do not match the codebook input [*, {}, {}, {}]",
            cfg.in_channels, cfg.image_size, cfg.image_size
        )));
    }
    let n = sh[0];
    let tokens_per = cfg.grid * cfg.grid;
    let mut out = Arr::zeros(IxDyn(&[n, tokens_per, cfg.code_dim]));
    // Small batches keep the encoder's memory footprint flat.
    for start in (0..n).step_by(8) {
        let stop = (start + 8).min(n);
        let batch = clips
            .hand_crops
            .slice(ndarray::s![start..stop, .., .., ..])
            .to_owned()
            .into_dyn();
        let (tok, _codes) = hand_tokens(params, cfg, &batch);
        for (bi, i) in (start..stop).enumerate() {
            out.index_axis_mut(Axis(0), i)
                .assign(&tok.index_axis(Axis(0), bi));
        }
    }
    Ok(out)
}

/// Attention gates for one batch of skeletons at one attention resolution,
/// using the same dilation the whole pipeline trains with.
pub(super) fn masks_for_skeletons(
    skels: &[&Skeleton2D],
    latent_size: usize,
    side: usize,
) -> Result<SiteMasks, HarnessError> {
    let s = latent_size;
    let mut heads = Vec::with_capacity(skels.len());
    let mut hands = Vec::with_capacity(skels.len());
    for skel in skels {
        let (head, _) = head_mask_from_keypoints(skel, (side, side), (s, s), HEAD_DILATION)?;
        let (hand, _) = hand_mask_from_keypoints(skel, (side, side), (s, s), HAND_DILATION)?;
        heads.push(head);
        hands.push(hand);
    }
    Ok(SiteMasks { head: RegionMask::stack(&heads), hand: RegionMask::stack(&hands) })
}

fn stacked_masks(
    clips: &ClipSet,
    rows: &[(usize, usize)],
    side: usize,
) -> Result<SiteMasks, HarnessError> {
    let skels: Vec<&Skeleton2D> =
        rows.iter().map(|&(clip, frame)| &clips.frames[clip][frame]).collect();
    masks_for_skeletons(&skels, clips.config.latent_size, side)
}

/// Assemble a training/sampling batch from `(clip, frame)` rows: the
/// conditioning bundle plus the clean latents and rendered pose maps for
/// those rows.
pub fn build_bundle(
    clips: &ClipSet,
    hand_tok: &Arr,
    cfg: &DenoiserConfig,
    rows: &[(usize, usize)],
) -> Result<(ConditioningBundle, Arr, Arr), HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::Config("batch must contain at least one row".into()));
    }
    let cc = &clips.config;
    for (what, got, want) in [
        ("frames", cc.frames, cfg.frames),
        ("audio_tokens", cc.audio_tokens, cfg.audio_tokens),
        ("feat_dim", cc.feat_dim, cfg.feat_dim),
        ("latent_size", cc.latent_size, cfg.latent_size),
        ("latent_channels", cc.latent_channels, cfg.latent_channels),
    ] {
        if got != want {
            return Err(HarnessError::Config(format!(
                "clip set {what} {got} does not match the denoiser's {want}"
            )));
        }
    }
    let ts = hand_tok.shape().to_vec();
    if ts.len() != 3 || ts[0] != clips.len() || ts[2] != cfg.code_dim {
        return Err(HarnessError::Config(format!(
            "hand tokens {ts:?}, expected [{}, *, {}]",
            clips.len(),
            cfg.code_dim
        )));
    }
    for &(clip, frame) in rows {
        if clip >= clips.len() || frame >= cc.frames {
            return Err(HarnessError::Config(format!(
                "batch row (clip {clip}, frame {frame}) out of range"
            )));
        }
    }

    let b = rows.len();
    let (s, ch) = (cc.latent_size, cc.latent_channels);

    // Unique clips in first-appearance order; rhythm rows index into them.
    let mut uniq: Vec<usize> = Vec::new();
    let u_of: Vec<usize> = rows
        .iter()
        .map(|&(clip, _)| match uniq.iter().position(|&c| c == clip) {
            Some(u) => u,
            None => {
                uniq.push(clip);
                uniq.len() - 1
            }
        })
        .collect();

    let mut pooled = Arr::zeros(IxDyn(&[uniq.len(), cc.audio_tokens, cc.feat_dim]));
    for (u, &clip) in uniq.iter().enumerate() {
        pooled
            .index_axis_mut(Axis(0), u)
            .assign(&clips.pooled_audio.index_axis(Axis(0), clip));
    }

    let mut lip = Arr::zeros(IxDyn(&[b, cc.audio_tokens, cc.feat_dim]));
    let mut ref_latent = Arr::zeros(IxDyn(&[b, ch, s, s]));
    let mut tokens = Arr::zeros(IxDyn(&[b, ts[1], cfg.code_dim]));
    let mut z0 = Arr::zeros(IxDyn(&[b, ch, s, s]));
    let mut pose = Arr::zeros(IxDyn(&[b, 3, s, s]));
    for (bi, &(clip, frame)) in rows.iter().enumerate() {
        lip.index_axis_mut(Axis(0), bi)
            .assign(&clips.pooled_audio.index_axis(Axis(0), clip));
        ref_latent
            .index_axis_mut(Axis(0), bi)
            .assign(&clips.ref_latents.index_axis(Axis(0), clip));
        tokens
            .index_axis_mut(Axis(0), bi)
            .assign(&hand_tok.index_axis(Axis(0), clip));
        z0.index_axis_mut(Axis(0), bi).assign(
            &clips
                .latents
                .index_axis(Axis(0), clip)
                .index_axis(Axis(0), frame),
        );
        pose.index_axis_mut(Axis(0), bi)
            .assign(&render_pose_map(&clips.frames[clip][frame], (s, s)));
    }

    let frame_rows: Vec<(usize, usize)> =
        rows.iter().zip(&u_of).map(|(&(_, frame), &u)| (u, frame)).collect();
    let rhythm_rows =
        rhythm_window_rows(&frame_rows, cfg.frames, cfg.audio_tokens, cfg.rhythm_window);

    let mut masks = std::collections::BTreeMap::new();
    for side in [s, s / 2] {
        masks.insert(side, stacked_masks(clips, rows, side)?);
    }

    let bundle = ConditioningBundle {
        ref_latent,
        lip_context: lip,
        pooled_audio: pooled,
        rhythm_rows,
        hand_tokens: tokens,
        masks,
    };
    bundle.validate(cfg, b)?;
    Ok((bundle, z0, pose))
}

#[cfg(test)]
mod tests {
    use super::super::metrics::{head_sequence, hmv, motion_variance};
    use super::*;
    use crate::container::sha256_file;

    fn tiny_spec() -> SyntheticHandSpec {
        SyntheticHandSpec { image_size: 32, seed: 5, ..SyntheticHandSpec::default() }
    }

    fn tiny_clip_cfg() -> ClipSetConfig {
        ClipSetConfig {
            clips: 3,
            frames: 8,
            audio_tokens: 20,
            feat_dim: 8,
            ..ClipSetConfig::default()
        }
    }

    fn tiny_hands() -> Arr {
        let spec = tiny_spec();
        let mut images = Arr::zeros(IxDyn(&[2, 3, 32, 32]));
        for i in 0..2 {
            images
                .index_axis_mut(Axis(0), i)
                .assign(&render_hand(&spec, &sample_hand_shape(&spec, i)));
        }
        images
    }

    #[test]
    fn hand_datasets_are_byte_identical_run_to_run() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let a = dir.path().join("a.mar");
        let b = dir.path().join("b.mar");
        make_synthetic_hands(&spec, 6, &a).unwrap();
        make_synthetic_hands(&spec, 6, &b).unwrap();
        assert_eq!(sha256_file(&a).unwrap(), sha256_file(&b).unwrap());

        let (images, loaded) = load_hands(&a).unwrap();
        assert_eq!(loaded, spec);
        assert_eq!(images.shape(), &[6, 3, 32, 32]);
        assert!(images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn degenerate_articulation_range_pins_every_finger_bend() {
        let spec = SyntheticHandSpec { articulation: (0.4, 0.4), ..tiny_spec() };
        for i in 0..8 {
            let shape = sample_hand_shape(&spec, i);
            assert!(shape.fingers.iter().all(|f| f.bend == 0.4));
        }
        // A non-degenerate range articulates fingers independently.
        let spec = SyntheticHandSpec { articulation: (0.0, 0.9), ..tiny_spec() };
        let bends: Vec<f64> = (0..8)
            .flat_map(|i| sample_hand_shape(&spec, i).fingers.into_iter().map(|f| f.bend))
            .collect();
        assert!(bends.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn hands_differ_across_indices() {
        let spec = tiny_spec();
        let a = render_hand(&spec, &sample_hand_shape(&spec, 0));
        let b = render_hand(&spec, &sample_hand_shape(&spec, 1));
        assert_ne!(a, b);
    }

    #[test]
    fn clip_dataset_has_documented_shapes_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_clip_cfg();
        let path = dir.path().join(CLIPS_FILE);
        make_synthetic_clips(&cfg, 3, &tiny_hands(), &path).unwrap();
        let again = dir.path().join("again.mar");
        make_synthetic_clips(&cfg, 3, &tiny_hands(), &again).unwrap();
        assert_eq!(sha256_file(&path).unwrap(), sha256_file(&again).unwrap());

        let set = load_clips(&path).unwrap();
        let j = canonical_joints().len();
        assert_eq!(set.latents.shape(), &[3, 8, 4, 16, 16]);
        assert_eq!(set.ref_latents.shape(), &[3, 4, 16, 16]);
        assert_eq!(set.pooled_audio.shape(), &[3, 20, 8]);
        assert_eq!(set.hand_crops.shape(), &[3, 3, 32, 32]);
        assert_eq!(set.frames.len(), 3);
        assert_eq!(set.frames[0].len(), 8);
        assert_eq!(set.refs[0].len(), j);
        assert!(set.latents.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn head_offset_tracks_the_rhythm_envelope() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_clip_cfg();
        let path = dir.path().join(CLIPS_FILE);
        make_synthetic_clips(&cfg, 17, &tiny_hands(), &path).unwrap();
        let set = load_clips(&path).unwrap();
        for i in 0..set.len() {
            let m = &set.meta[i];
            let (_, base_y, _) = set.refs[i].get("nose").unwrap();
            for (f, skel) in set.frames[i].iter().enumerate() {
                let token = frame_token(f, cfg.frames, cfg.audio_tokens);
                let want =
                    cfg.head_gain * rhythm_envelope(m.amplitude, m.rhythm_hz, token) as f64;
                let (_, y, _) = skel.get("nose").unwrap();
                // Keypoints round-trip through f32 storage.
                assert!(((y - base_y) - want).abs() < 1e-4, "clip {i} frame {f}");
            }
        }
    }

    #[test]
    fn zero_amplitude_clips_have_exactly_zero_head_motion() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ClipSetConfig { amplitude: (0.0, 0.0), ..tiny_clip_cfg() };
        let path = dir.path().join(CLIPS_FILE);
        make_synthetic_clips(&cfg, 3, &tiny_hands(), &path).unwrap();
        let set = load_clips(&path).unwrap();
        for i in 0..set.len() {
            let seq = head_sequence(&set.frames[i]).unwrap();
            assert_eq!(hmv(&seq).unwrap(), 0.0);
        }
    }

    #[test]
    fn doubling_amplitude_strictly_increases_head_motion() {
        let dir = tempfile::tempdir().unwrap();
        let hands = tiny_hands();
        let small = ClipSetConfig { amplitude: (0.7, 0.7), ..tiny_clip_cfg() };
        let big = ClipSetConfig { amplitude: (1.4, 1.4), ..tiny_clip_cfg() };
        let pa = dir.path().join("small.mar");
        let pb = dir.path().join("big.mar");
        make_synthetic_clips(&small, 3, &hands, &pa).unwrap();
        make_synthetic_clips(&big, 3, &hands, &pb).unwrap();
        let sa = load_clips(&pa).unwrap();
        let sb = load_clips(&pb).unwrap();
        for i in 0..sa.len() {
            let a = hmv(&head_sequence(&sa.frames[i]).unwrap()).unwrap();
            let b = hmv(&head_sequence(&sb.frames[i]).unwrap()).unwrap();
            assert!(b > a, "clip {i}: {b} !> {a}");
            assert!(a > 0.0);
        }
    }

    #[test]
    fn hands_keep_moving_when_the_head_is_still() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ClipSetConfig { amplitude: (0.0, 0.0), ..tiny_clip_cfg() };
        let path = dir.path().join(CLIPS_FILE);
        make_synthetic_clips(&cfg, 3, &tiny_hands(), &path).unwrap();
        let set = load_clips(&path).unwrap();
        let seq = super::super::metrics::hand_sequence(&set.frames[0]).unwrap();
        assert!(motion_variance(&seq) > 0.0);
    }

    #[test]
    fn bundles_align_rows_with_clips_and_frames() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_clip_cfg();
        let path = dir.path().join(CLIPS_FILE);
        make_synthetic_clips(&cfg, 3, &tiny_hands(), &path).unwrap();
        let set = load_clips(&path).unwrap();

        let dcfg = DenoiserConfig {
            frames: 8,
            audio_tokens: 20,
            feat_dim: 8,
            code_dim: 6,
            ..DenoiserConfig::toy()
        };
        // Fake per-clip tokens; real ones come from the codebook encoder.
        let hand_tok = Arr::from_shape_fn(IxDyn(&[3, 4, 6]), |ix| {
            (ix[0] * 100 + ix[1] * 10 + ix[2]) as f32
        });
        let rows = [(0usize, 0usize), (1, 3), (0, 5)];
        let (bundle, z0, pose) = build_bundle(&set, &hand_tok, &dcfg, &rows).unwrap();

        assert_eq!(z0.shape(), &[3, 4, 16, 16]);
        assert_eq!(pose.shape(), &[3, 3, 16, 16]);
        // Two unique clips; the third row reuses clip 0's pooled audio row.
        assert_eq!(bundle.pooled_audio.shape()[0], 2);
        assert_eq!(bundle.rhythm_rows[0].0, 0);
        assert_eq!(bundle.rhythm_rows[1].0, 1);
        assert_eq!(bundle.rhythm_rows[2].0, 0);
        assert_eq!(
            z0.index_axis(Axis(0), 1),
            set.latents.index_axis(Axis(0), 1).index_axis(Axis(0), 3)
        );
        assert_eq!(
            bundle.hand_tokens.index_axis(Axis(0), 2),
            hand_tok.index_axis(Axis(0), 0)
        );
        // Head gates actually select cells, and select different cells when
        // the head has moved between frames.
        let m = &bundle.masks[&16];
        assert!(m.head.coverage() > 0.0 && m.head.coverage() < 1.0);
        assert!(m.hand.coverage() > 0.0);
        assert!(bundle.masks.contains_key(&8));
    }
}
