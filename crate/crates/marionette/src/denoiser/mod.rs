//! Conditioned noise predictor over video latents.
//!
//! A two-resolution U-Net maps a noisy latent frame plus a rendered pose
//! map to a noise estimate. The pose map runs through a small convolutional
//! encoder whose output is concatenated onto the latent channels; the
//! reference latent runs through a mirrored encoder that emits one token
//! array per attention resolution. Each resolution carries one attention
//! site with a fixed sublayer order: spatial self-attention,
//! reference-image attention, lip attention (both unmasked), rhythm
//! attention gated to head cells, hand-token attention gated to hand
//! cells, and a feed-forward block. Rhythm context is a short window of projected
//! audio tokens centred on the frame's position in the clip, so it is the
//! only stream that carries frame-aligned timing; lip context is the
//! clip's full pooled token sequence, shared by every frame. An optional
//! frame-axis attention layer (`d.tmp.*`) mixes the frames of one clip
//! per spatial cell; it starts as an exact identity and is the only part
//! that trains in the second stage.
//!
//! Classifier-free guidance branches are produced by swapping conditioning
//! for learned null tokens via [`CondMode`], never by re-registering
//! weights, so the three guidance passes share every parameter.

mod io;
mod sample;
mod train;

pub use io::{
    load_denoiser_checkpoint, save_denoiser_checkpoint, DenoiserCheckpoint, Stage, DENOISER_KIND,
};
pub use sample::sample_clip;
pub use train::{
    freeze_for_stage2, predict_eps, roll_mode, train_step_stage1, train_step_stage2,
    GuidanceDropout, StepReport,
};

use std::collections::BTreeMap;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    attention_weights, masked_cross_attention, register_attention, AttnError, RegionMask,
};
use crate::audio::{project_rhythm, register_rhythm_projector, AudioConfig, AudioError};
use crate::container::ContainerError;
use crate::diffusion::DiffusionError;
use crate::tensor::{init, init_rng, name_seed, ParamSet};
use crate::tensor::{Frame, Var};
use crate::Arr;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("bad denoiser config: {0}")]
    BadConfig(String),
    #[error("{what}: expected {want}, got {got:?}")]
    BadShape {
        what: &'static str,
        want: String,
        got: Vec<usize>,
    },
    #[error("no region masks registered for grid side {0}")]
    MissingMasks(usize),
    #[error("checkpoint holds {got} weights, expected {want}")]
    StageMismatch { want: Stage, got: Stage },
    #[error("bad denoiser checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Attention(#[from] AttnError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Architecture and conditioning dimensions for the noise predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Channels of the video latent.
    pub latent_channels: usize,
    /// Side length of the (square) latent grid.
    pub latent_size: usize,
    /// Channels of the rendered pose map fed to the pose encoder.
    pub pose_channels: usize,
    /// Channels of the encoded pose features concatenated onto the latent.
    pub pose_feat: usize,
    /// Feature dimension of the reference-image tokens at every site.
    pub ref_dim: usize,
    /// Width of the full-resolution trunk; the half resolution doubles it.
    pub base_width: usize,
    /// Sinusoidal timestep embedding width (even).
    pub t_embed_dim: usize,
    /// Attention head width shared by every attention sublayer.
    pub d_k: usize,
    /// Raw pooled audio feature dimension.
    pub feat_dim: usize,
    /// Rhythm embedding dimension after projection.
    pub rhythm_dim: usize,
    /// Hidden width of the rhythm projector; `None` for a single linear.
    pub rhythm_hidden: Option<usize>,
    /// Dimension of quantised hand tokens.
    pub code_dim: usize,
    /// Audio tokens per rhythm attention window.
    pub rhythm_window: usize,
    /// Audio tokens per clip.
    pub audio_tokens: usize,
    /// Frames per clip; bounds the frame-axis attention length.
    pub frames: usize,
    /// Group count for every group norm in the trunk.
    pub groups: usize,
    /// Diffusion steps the model is trained against.
    pub timesteps: usize,
    /// Linear noise schedule endpoints.
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            latent_size: 16,
            pose_channels: 3,
            pose_feat: 16,
            ref_dim: 64,
            base_width: 192,
            t_embed_dim: 128,
            d_k: 128,
            feat_dim: 384,
            rhythm_dim: 128,
            rhythm_hidden: Some(256),
            code_dim: 256,
            rhythm_window: 5,
            audio_tokens: 50,
            frames: 24,
            groups: 32,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl DenoiserConfig {
    /// Desk-scale variant that trains in minutes on one core.
    pub fn toy() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            latent_size: 16,
            pose_channels: 3,
            pose_feat: 8,
            ref_dim: 16,
            base_width: 64,
            t_embed_dim: 64,
            d_k: 64,
            feat_dim: 16,
            rhythm_dim: 32,
            rhythm_hidden: Some(64),
            code_dim: 32,
            rhythm_window: 5,
            audio_tokens: 50,
            frames: 24,
            groups: 8,
            timesteps: 50,
            beta_start: 0.004,
            beta_end: 0.36,
        }
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |msg: String| Err(DenoiserError::BadConfig(msg));
        if self.latent_size < 4 || self.latent_size % 2 != 0 {
            return bad(format!("latent_size {} must be even and >= 4", self.latent_size));
        }
        if self.base_width % self.groups != 0 {
            return bad(format!(
                "groups {} must divide base_width {}",
                self.groups, self.base_width
            ));
        }
        if self.t_embed_dim % 2 != 0 || self.t_embed_dim < 4 {
            return bad(format!("t_embed_dim {} must be even and >= 4", self.t_embed_dim));
        }
        if self.rhythm_window == 0 || self.rhythm_window > self.audio_tokens {
            return bad(format!(
                "rhythm_window {} must be in 1..={}",
                self.rhythm_window, self.audio_tokens
            ));
        }
        if self.timesteps < 2 {
            return bad(format!("timesteps {} must be >= 2", self.timesteps));
        }
        if !(self.beta_start > 0.0 && self.beta_end > self.beta_start && self.beta_end < 1.0) {
            return bad(format!(
                "beta range ({}, {}) must satisfy 0 < start < end < 1",
                self.beta_start, self.beta_end
            ));
        }
        for (name, v) in [
            ("latent_channels", self.latent_channels),
            ("pose_channels", self.pose_channels),
            ("pose_feat", self.pose_feat),
            ("ref_dim", self.ref_dim),
            ("base_width", self.base_width),
            ("d_k", self.d_k),
            ("feat_dim", self.feat_dim),
            ("rhythm_dim", self.rhythm_dim),
            ("code_dim", self.code_dim),
            ("frames", self.frames),
            ("groups", self.groups),
            ("audio_tokens", self.audio_tokens),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    fn audio_cfg(&self) -> AudioConfig {
        AudioConfig {
            windows: self.frames,
            tokens: self.audio_tokens,
            feat_dim: self.feat_dim,
            proj_dim: self.rhythm_dim,
            proj_hidden: self.rhythm_hidden,
            proj_bias: true,
        }
    }
}

/// Which conditioning streams a forward pass sees. Guidance at sampling
/// time combines all three; training drops streams at random so the null
/// branches are learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondMode {
    /// All four streams.
    Full,
    /// Reference image and hand tokens only; both audio streams nulled.
    ImageOnly,
    /// Every stream replaced by its null token.
    Uncond,
}

/// Region gates for one attention site, all sharing the site's token count.
/// The lip stream runs unmasked, so only head and hand gates exist.
#[derive(Debug, Clone)]
pub struct SiteMasks {
    pub head: RegionMask,
    pub hand: RegionMask,
}

/// Everything the denoiser conditions on, precomputed per batch.
///
/// `pooled_audio` holds one row per *clip* while the other tensors hold one
/// row per *frame*; `rhythm_rows[i] = (clip, start)` selects, for batch row
/// `i`, the clip row and the first token of its rhythm window. Masks are
/// keyed by grid side so both attention resolutions find their gates.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    /// `[B, latent_channels, size, size]` reference frame latent; the
    /// forward pass runs it through the reference encoder on the tape.
    pub ref_latent: Arr,
    /// `[B, T, feat_dim]` pooled audio tokens, identical for rows of one clip.
    pub lip_context: Arr,
    /// `[clips, T, feat_dim]` pooled audio, input to the rhythm projector.
    pub pooled_audio: Arr,
    /// Per batch row: (row of `pooled_audio`, first token of the window).
    pub rhythm_rows: Vec<(usize, usize)>,
    /// `[B, N_hand, code_dim]` quantised hand-region tokens.
    pub hand_tokens: Arr,
    /// Region gates per grid side.
    pub masks: BTreeMap<usize, SiteMasks>,
}

impl ConditioningBundle {
    /// Check every tensor against the config and the batch size.
    pub fn validate(&self, cfg: &DenoiserConfig, batch: usize) -> Result<(), DenoiserError> {
        let want3 = |what: &'static str,
                     arr: &Arr,
                     rows: Option<usize>,
                     last: usize|
         -> Result<(), DenoiserError> {
            let s = arr.shape();
            let rows_ok = rows.map_or(s.len() == 3, |r| s.len() == 3 && s[0] == r);
            if !rows_ok || s[2] != last {
                return Err(DenoiserError::BadShape {
                    what,
                    want: format!(
                        "[{}, *, {last}]",
                        rows.map_or("*".to_string(), |r| r.to_string())
                    ),
                    got: s.to_vec(),
                });
            }
            Ok(())
        };
        let rs = self.ref_latent.shape();
        let want_ref = [batch, cfg.latent_channels, cfg.latent_size, cfg.latent_size];
        if rs != want_ref {
            return Err(DenoiserError::BadShape {
                what: "ref_latent",
                want: format!("{want_ref:?}"),
                got: rs.to_vec(),
            });
        }
        want3("lip_context", &self.lip_context, Some(batch), cfg.feat_dim)?;
        want3("pooled_audio", &self.pooled_audio, None, cfg.feat_dim)?;
        want3("hand_tokens", &self.hand_tokens, Some(batch), cfg.code_dim)?;
        if self.pooled_audio.shape()[1] != cfg.audio_tokens {
            return Err(DenoiserError::BadShape {
                what: "pooled_audio",
                want: format!("[*, {}, {}]", cfg.audio_tokens, cfg.feat_dim),
                got: self.pooled_audio.shape().to_vec(),
            });
        }
        if self.rhythm_rows.len() != batch {
            return Err(DenoiserError::BadConfig(format!(
                "rhythm_rows has {} entries for batch {batch}",
                self.rhythm_rows.len()
            )));
        }
        let clips = self.pooled_audio.shape()[0];
        for &(clip, start) in &self.rhythm_rows {
            if clip >= clips || start + cfg.rhythm_window > cfg.audio_tokens {
                return Err(DenoiserError::BadConfig(format!(
                    "rhythm row (clip {clip}, start {start}) out of range"
                )));
            }
        }
        for side in [cfg.latent_size, cfg.latent_size / 2] {
            let m = self
                .masks
                .get(&side)
                .ok_or(DenoiserError::MissingMasks(side))?;
            for (name, mask) in [("head", &m.head), ("hand", &m.hand)] {
                if mask.batch() != batch || mask.n_latent() != side * side {
                    return Err(DenoiserError::BadShape {
                        what: "region mask",
                        want: format!("{name}@{side}: [{batch}, {}, 1]", side * side),
                        got: vec![mask.batch(), mask.n_latent(), 1],
                    });
                }
            }
        }
        Ok(())
    }
}

/// Map `(clip, frame)` rows to `(clip, window start)` rows: the window is
/// centred on the token aligned with the frame's midpoint and clamped to
/// the clip.
pub fn rhythm_window_rows(
    frame_rows: &[(usize, usize)],
    frames: usize,
    tokens: usize,
    window: usize,
) -> Vec<(usize, usize)> {
    assert!(window >= 1 && window <= tokens, "window must fit in the clip");
    frame_rows
        .iter()
        .map(|&(clip, frame)| {
            assert!(frame < frames, "frame {frame} out of range");
            let center = ((frame as f64 + 0.5) * tokens as f64 / frames as f64).round() as i64;
            let start = (center - window as i64 / 2).clamp(0, (tokens - window) as i64);
            (clip, start as usize)
        })
        .collect()
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`. The first half
/// holds sines, the second half cosines, over geometrically spaced
/// frequencies from 1 down to 1/10000.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Arr {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = Arr::zeros(IxDyn(&[ts.len(), dim]));
    for (b, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let exponent = if half > 1 {
                i as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let freq = (-exponent * (10_000f64).ln()).exp();
            let angle = t as f64 * freq;
            out[[b, i]] = angle.sin() as f32;
            out[[b, half + i]] = angle.cos() as f32;
        }
    }
    out
}

fn register_linear(params: &mut ParamSet, seed: u64, name: &str, d_in: usize, d_out: usize, zero: bool) {
    let w = if zero {
        init::zeros(&[d_in, d_out])
    } else {
        init::linear_xavier(&mut init_rng(name_seed(seed, name), "w"), &[d_in, d_out])
    };
    params.add(&format!("{name}.w"), w);
    params.add(&format!("{name}.b"), init::zeros(&[d_out]));
}

fn register_conv3(params: &mut ParamSet, seed: u64, name: &str, c_in: usize, c_out: usize, zero: bool) {
    let w = if zero {
        init::zeros(&[c_out, c_in, 3, 3])
    } else {
        init::conv_kaiming(&mut init_rng(name_seed(seed, name), "w"), &[c_out, c_in, 3, 3])
    };
    params.add(&format!("{name}.w"), w);
    params.add(&format!("{name}.b"), init::zeros(&[c_out]));
}

fn register_norm(params: &mut ParamSet, name: &str, c: usize) {
    params.add(&format!("{name}.g"), init::ones(&[c]));
    params.add(&format!("{name}.b"), init::zeros(&[c]));
}

/// Residual block with a per-channel timestep shift; the closing conv is
/// zero-initialised so a fresh block is the identity.
fn register_res_t(params: &mut ParamSet, seed: u64, prefix: &str, c: usize, t_dim: usize) {
    register_norm(params, &format!("{prefix}.n1"), c);
    register_conv3(params, seed, &format!("{prefix}.c1"), c, c, false);
    register_linear(params, seed, &format!("{prefix}.temb"), t_dim, c, false);
    register_norm(params, &format!("{prefix}.n2"), c);
    register_conv3(params, seed, &format!("{prefix}.c2"), c, c, true);
}

/// One attention site: five residual attention sublayers plus a
/// feed-forward block, all opening as identities (zeroed out-projections).
fn register_site(params: &mut ParamSet, seed: u64, prefix: &str, c: usize, cfg: &DenoiserConfig) {
    register_attention(params, &format!("{prefix}.selfa"), c, c, cfg.d_k, seed, true);
    register_attention(params, &format!("{prefix}.refa"), c, cfg.ref_dim, cfg.d_k, seed, true);
    register_attention(params, &format!("{prefix}.lip"), c, cfg.feat_dim, cfg.d_k, seed, true);
    register_attention(params, &format!("{prefix}.rhy"), c, cfg.rhythm_dim, cfg.d_k, seed, true);
    register_attention(params, &format!("{prefix}.code"), c, cfg.code_dim, cfg.d_k, seed, true);
    register_norm(params, &format!("{prefix}.ff.ln"), c);
    register_linear(params, seed, &format!("{prefix}.ff.l1"), c, 2 * c, false);
    register_linear(params, seed, &format!("{prefix}.ff.l2"), 2 * c, c, true);
}

/// Register every denoiser weight under the `d.` prefix.
pub fn register_denoiser(params: &mut ParamSet, cfg: &DenoiserConfig, seed: u64) {
    cfg.validate().expect("invalid denoiser config");
    let (w0, w1) = (cfg.base_width, 2 * cfg.base_width);
    let e = cfg.t_embed_dim;
    register_linear(params, seed, "d.temb.l1", e, e, false);
    register_linear(params, seed, "d.temb.l2", e, e, false);
    // Pose encoder: the closing conv starts at zero so an untrained pose
    // pathway contributes nothing.
    register_conv3(params, seed, "d.pose.c1", cfg.pose_channels, cfg.pose_feat, false);
    register_conv3(params, seed, "d.pose.c2", cfg.pose_feat, cfg.pose_feat, true);
    // Reference encoder: one feature map per attention resolution.
    register_conv3(params, seed, "d.ref.c1", cfg.latent_channels, cfg.ref_dim, false);
    register_conv3(params, seed, "d.ref.c2", cfg.ref_dim, cfg.ref_dim, false);
    register_conv3(
        params,
        seed,
        "d.stem",
        cfg.latent_channels + cfg.pose_feat,
        w0,
        false,
    );
    register_res_t(params, seed, "d.enc.res0", w0, e);
    register_site(params, seed, "d.attn.full", w0, cfg);
    register_conv3(params, seed, "d.down", w0, w1, false);
    register_res_t(params, seed, "d.mid.res1", w1, e);
    register_site(params, seed, "d.attn.half", w1, cfg);
    register_res_t(params, seed, "d.mid.res2", w1, e);
    register_conv3(params, seed, "d.up", w1, w0, false);
    register_conv3(params, seed, "d.fuse", 2 * w0, w0, false);
    register_res_t(params, seed, "d.dec.res1", w0, e);
    register_norm(params, "d.out.n", w0);
    register_conv3(params, seed, "d.out", w0, cfg.latent_channels, true);
    register_rhythm_projector(params, "d.rhy", &cfg.audio_cfg(), seed);
    params.add("d.tmp.pos", init::zeros(&[cfg.frames, w0]));
    register_attention(params, "d.tmp.attn", w0, w0, cfg.d_k, seed, true);
}

/// Encode a rendered pose map `[B, pose_channels, H, W]` into features of
/// the same spatial size, ready to be concatenated onto the noisy latent.
/// Two 3x3 convs bound the receptive field to 5x5 and the closing conv is
/// zero-initialised, so a fresh encoder maps every pose to zero features.
pub fn encode_pose(f: &Frame, pose: Var) -> Var {
    let p = |s: &str| f.p_name(&format!("d.pose.{s}"));
    let h = f.conv2d(pose, p("c1.w"), Some(p("c1.b")), 1, 1);
    let h = f.silu(h);
    f.conv2d(h, p("c2.w"), Some(p("c2.b")), 1, 1)
}

/// Turn a reference latent `[B, C, size, size]` into cross-attention
/// context, one token array per attention site: `[B, size^2, ref_dim]` for
/// the full grid, then `[B, (size/2)^2, ref_dim]` for the halved grid.
pub fn reference_features(
    f: &Frame,
    cfg: &DenoiserConfig,
    ref_latent: Var,
) -> Result<Vec<Var>, DenoiserError> {
    let s = f.shape(ref_latent);
    if s.len() != 4
        || s[1] != cfg.latent_channels
        || s[2] != cfg.latent_size
        || s[3] != cfg.latent_size
    {
        return Err(DenoiserError::BadShape {
            what: "ref_latent",
            want: format!("[*, {}, {}, {}]", cfg.latent_channels, cfg.latent_size, cfg.latent_size),
            got: s,
        });
    }
    let p = |name: &str| f.p_name(&format!("d.ref.{name}"));
    let full = f.silu(f.conv2d(ref_latent, p("c1.w"), Some(p("c1.b")), 1, 1));
    let half = f.silu(f.conv2d(full, p("c2.w"), Some(p("c2.b")), 2, 1));
    let tokens = |v: Var| {
        let vs = f.shape(v);
        let t = f.reshape(v, &[vs[0], vs[1], vs[2] * vs[3]]);
        f.permute(t, &[0, 2, 1])
    };
    Ok(vec![tokens(full), tokens(half)])
}

/// Projected contexts for one forward pass, after null substitution.
/// `refc` holds one token array per attention site, full grid first.
struct SiteCtx {
    refc: Vec<Var>,
    lip: Var,
    rhy: Var,
    code: Var,
}

fn build_contexts(
    f: &Frame,
    cfg: &DenoiserConfig,
    cond: &ConditioningBundle,
    mode: CondMode,
    batch: usize,
) -> Result<SiteCtx, DenoiserError> {
    let zeros3 = |last: usize| f.constant(init::zeros(&[batch, 1, last]));
    let refc = match mode {
        CondMode::Uncond => vec![zeros3(cfg.ref_dim), zeros3(cfg.ref_dim)],
        _ => reference_features(f, cfg, f.constant(cond.ref_latent.clone()))?,
    };
    let code = match mode {
        CondMode::Uncond => zeros3(cfg.code_dim),
        _ => f.constant(cond.hand_tokens.clone()),
    };
    let lip = match mode {
        CondMode::Full => f.constant(cond.lip_context.clone()),
        _ => zeros3(cfg.feat_dim),
    };
    let acfg = cfg.audio_cfg();
    let rhy = match mode {
        CondMode::Full => {
            let pooled = f.constant(cond.pooled_audio.clone());
            let emb = project_rhythm(f, "d.rhy", pooled, &acfg)?;
            f.gather_windows(emb, &cond.rhythm_rows, cfg.rhythm_window)
        }
        // Null rhythm: project a zero token so the projector bias becomes
        // a learned constant context.
        _ => project_rhythm(f, "d.rhy", zeros3(cfg.feat_dim), &acfg)?,
    };
    Ok(SiteCtx { refc, lip, rhy, code })
}

fn res_t(f: &Frame, prefix: &str, x: Var, temb: Var, groups: usize) -> Var {
    let p = |s: &str| f.p_name(&format!("{prefix}.{s}"));
    let h = f.group_norm(x, groups, p("n1.g"), p("n1.b"), 1e-5);
    let h = f.silu(h);
    let h = f.conv2d(h, p("c1.w"), Some(p("c1.b")), 1, 1);
    let shift = f.linear(temb, p("temb.w"), Some(p("temb.b")));
    let h = f.add_chan_bc(h, shift);
    let h = f.group_norm(h, groups, p("n2.g"), p("n2.b"), 1e-5);
    let h = f.silu(h);
    let h = f.conv2d(h, p("c2.w"), Some(p("c2.b")), 1, 1);
    f.add(x, h)
}

fn attn_site(
    f: &Frame,
    prefix: &str,
    site: usize,
    h2d: Var,
    ctx: &SiteCtx,
    masks: &SiteMasks,
) -> Result<Var, AttnError> {
    let s = f.shape(h2d);
    let (b, c, hh, ww) = (s[0], s[1], s[2], s[3]);
    let w = |name: &str| attention_weights(f, &format!("{prefix}.{name}"));
    let t = f.reshape(h2d, &[b, c, hh * ww]);
    let mut t = f.permute(t, &[0, 2, 1]);
    t = masked_cross_attention(f, t, t, None, &w("selfa"))?;
    t = masked_cross_attention(f, t, ctx.refc[site], None, &w("refa"))?;
    t = masked_cross_attention(f, t, ctx.lip, None, &w("lip"))?;
    t = masked_cross_attention(f, t, ctx.rhy, Some(&masks.head), &w("rhy"))?;
    t = masked_cross_attention(f, t, ctx.code, Some(&masks.hand), &w("code"))?;
    let p = |s: &str| f.p_name(&format!("{prefix}.ff.{s}"));
    let n = f.layer_norm(t, p("ln.g"), p("ln.b"), 1e-5);
    let u = f.linear(n, p("l1.w"), Some(p("l1.b")));
    let u = f.silu(u);
    let u = f.linear(u, p("l2.w"), Some(p("l2.b")));
    t = f.add(t, u);
    let t = f.permute(t, &[0, 2, 1]);
    Ok(f.reshape(t, &[b, c, hh, ww]))
}

/// Frame-axis attention: each spatial cell attends over the clip's frames.
/// Positions and the out-projection start at zero, so a fresh layer leaves
/// the batch untouched.
fn temporal_mix(f: &Frame, cfg: &DenoiserConfig, h: Var) -> Var {
    let s = f.shape(h);
    let (fr, c, gh, gw) = (s[0], s[1], s[2], s[3]);
    assert!(
        fr <= cfg.frames,
        "clip has {fr} frames, temporal layer supports {}",
        cfg.frames
    );
    assert_eq!(c, cfg.base_width, "temporal layer runs at base width");
    let cells = gh * gw;
    let t = f.reshape(h, &[fr, c, cells]);
    let t = f.permute(t, &[2, 0, 1]);
    // Broadcast the learned per-frame position across cells with a
    // ones-matmul so the positions still receive gradient.
    let pos = f.narrow(f.p_name("d.tmp.pos"), 0, 0, fr);
    let pos_flat = f.reshape(pos, &[1, fr * c]);
    let ones = f.constant(init::ones(&[cells, 1]));
    let pos_b = f.reshape(f.matmul2(ones, pos_flat), &[cells, fr, c]);
    let hp = f.add(t, pos_b);
    let w = attention_weights(f, "d.tmp.attn");
    let q = f.linear(hp, w.wq, None);
    let k = f.linear(hp, w.wk, None);
    let v = f.linear(hp, w.wv, None);
    let scale = 1.0 / (f.shape(q)[2] as f32).sqrt();
    let scores = f.scale(f.bmm(q, f.permute(k, &[0, 2, 1])), scale);
    let mixed = f.bmm(f.softmax_last(scores), v);
    let t = f.add(t, f.linear(mixed, w.wo, None));
    let t = f.permute(t, &[1, 2, 0]);
    f.reshape(t, &[fr, c, gh, gw])
}

/// Predict the noise in `z_t` given the pose map, per-row timesteps and
/// conditioning. `temporal: true` additionally mixes the batch rows as the
/// frames of one clip; rows must then be in frame order.
#[allow(clippy::too_many_arguments)]
pub fn denoise_forward(
    f: &Frame,
    cfg: &DenoiserConfig,
    z_t: Var,
    pose: Var,
    ts: &[usize],
    cond: &ConditioningBundle,
    mode: CondMode,
    temporal: bool,
) -> Result<Var, DenoiserError> {
    let zs = f.shape(z_t);
    let want_z = vec![ts.len(), cfg.latent_channels, cfg.latent_size, cfg.latent_size];
    if zs != want_z {
        return Err(DenoiserError::BadShape {
            what: "z_t",
            want: format!("{want_z:?}"),
            got: zs,
        });
    }
    let ps = f.shape(pose);
    let want_p = vec![ts.len(), cfg.pose_channels, cfg.latent_size, cfg.latent_size];
    if ps != want_p {
        return Err(DenoiserError::BadShape {
            what: "pose",
            want: format!("{want_p:?}"),
            got: ps,
        });
    }
    let batch = ts.len();
    cond.validate(cfg, batch)?;
    let ctx = build_contexts(f, cfg, cond, mode, batch)?;
    let masks_full = cond
        .masks
        .get(&cfg.latent_size)
        .ok_or(DenoiserError::MissingMasks(cfg.latent_size))?;
    let masks_half = cond
        .masks
        .get(&(cfg.latent_size / 2))
        .ok_or(DenoiserError::MissingMasks(cfg.latent_size / 2))?;

    let temb = f.constant(timestep_embedding(ts, cfg.t_embed_dim));
    let temb = f.linear(temb, f.p_name("d.temb.l1.w"), Some(f.p_name("d.temb.l1.b")));
    let temb = f.silu(temb);
    let temb = f.linear(temb, f.p_name("d.temb.l2.w"), Some(f.p_name("d.temb.l2.b")));

    let conv = |name: &str, x: Var, stride: usize| {
        f.conv2d(
            x,
            f.p_name(&format!("{name}.w")),
            Some(f.p_name(&format!("{name}.b"))),
            stride,
            1,
        )
    };

    let pose_feat = encode_pose(f, pose);
    let x = f.concat(1, &[z_t, pose_feat]);
    let h = conv("d.stem", x, 1);
    let h = res_t(f, "d.enc.res0", h, temb, cfg.groups);
    let h = attn_site(f, "d.attn.full", 0, h, &ctx, masks_full)?;
    let skip = h;
    let h = conv("d.down", h, 2);
    let h = res_t(f, "d.mid.res1", h, temb, cfg.groups);
    let h = attn_site(f, "d.attn.half", 1, h, &ctx, masks_half)?;
    let h = res_t(f, "d.mid.res2", h, temb, cfg.groups);
    let h = f.upsample2x(h);
    let h = conv("d.up", h, 1);
    let h = f.concat(1, &[h, skip]);
    let h = conv("d.fuse", h, 1);
    let h = res_t(f, "d.dec.res1", h, temb, cfg.groups);
    let h = if temporal { temporal_mix(f, cfg, h) } else { h };
    let h = f.group_norm(h, cfg.groups, f.p_name("d.out.n.g"), f.p_name("d.out.n.b"), 1e-5);
    let h = f.silu(h);
    Ok(conv("d.out", h, 1))
}
