//! Two-stage optimisation of the noise predictor.
//!
//! Stage one trains the spatial network on independent frames, each with
//! its own timestep, and drops conditioning streams at random so the
//! guidance null branches are learned. Stage two freezes everything except
//! the frame-axis attention (`d.tmp.*`) and trains it on whole clips with
//! one shared timestep per clip.

use ndarray::Axis;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::tensor::{init, Adam, ParamSet};
use crate::tensor::Frame;
use crate::Arr;

use super::{denoise_forward, CondMode, ConditioningBundle, DenoiserConfig, DenoiserError};

/// Probability of replacing conditioning with null tokens for a step.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceDropout {
    /// Drop every stream.
    pub p_uncond: f64,
    /// Keep the reference image and hand tokens, drop both audio streams.
    pub p_image_only: f64,
}

impl Default for GuidanceDropout {
    fn default() -> Self {
        GuidanceDropout {
            p_uncond: 0.1,
            p_image_only: 0.1,
        }
    }
}

/// Draw the conditioning mode for one training step.
pub fn roll_mode(rng: &mut ChaCha8Rng, drop: &GuidanceDropout) -> CondMode {
    let u: f64 = rng.gen();
    if u < drop.p_uncond {
        CondMode::Uncond
    } else if u < drop.p_uncond + drop.p_image_only {
        CondMode::ImageOnly
    } else {
        CondMode::Full
    }
}

/// What one optimisation step saw and produced.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub loss: f32,
    pub mode: CondMode,
}

fn check_frames(
    cfg: &DenoiserConfig,
    z0: &Arr,
    pose: &Arr,
    what: &'static str,
) -> Result<usize, DenoiserError> {
    let s = z0.shape();
    let ok = s.len() == 4
        && s[1] == cfg.latent_channels
        && s[2] == cfg.latent_size
        && s[3] == cfg.latent_size;
    if !ok {
        return Err(DenoiserError::BadShape {
            what,
            want: format!(
                "[B, {}, {}, {}]",
                cfg.latent_channels, cfg.latent_size, cfg.latent_size
            ),
            got: s.to_vec(),
        });
    }
    let p = pose.shape();
    if p != [s[0], cfg.pose_channels, cfg.latent_size, cfg.latent_size] {
        return Err(DenoiserError::BadShape {
            what: "pose",
            want: format!(
                "[{}, {}, {}, {}]",
                s[0], cfg.pose_channels, cfg.latent_size, cfg.latent_size
            ),
            got: p.to_vec(),
        });
    }
    Ok(s[0])
}

fn optimise(
    params: &mut ParamSet,
    opt: &mut Adam,
    cfg: &DenoiserConfig,
    z_t: Arr,
    pose: &Arr,
    eps: Arr,
    ts: &[usize],
    cond: &ConditioningBundle,
    mode: CondMode,
    temporal: bool,
) -> Result<f32, DenoiserError> {
    let (loss_value, grads) = {
        let f = Frame::new(params);
        let out = denoise_forward(
            &f,
            cfg,
            f.constant(z_t),
            f.constant(pose.clone()),
            ts,
            cond,
            mode,
            temporal,
        )?;
        let loss = f.mse(out, f.constant(eps));
        let value = f.value(loss)[[]];
        let mut grads = f.backward(loss);
        (value, f.param_grads(&mut grads))
    };
    for (id, g) in grads {
        params.accumulate_grad(id, g);
    }
    opt.step(params);
    Ok(loss_value)
}

/// One spatial-stage step on a batch of independent frames. Each row gets
/// its own timestep; conditioning streams are dropped per [`GuidanceDropout`].
/// Draws from `rng` in a fixed order: timesteps, noise, mode.
#[allow(clippy::too_many_arguments)]
pub fn train_step_stage1(
    params: &mut ParamSet,
    opt: &mut Adam,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    z0: &Arr,
    pose: &Arr,
    cond: &ConditioningBundle,
    drop: &GuidanceDropout,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport, DenoiserError> {
    let batch = check_frames(cfg, z0, pose, "z0")?;
    cond.validate(cfg, batch)?;
    let ts: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..sched.len())).collect();
    let eps = init::normal(rng, z0.shape(), 1.0);
    let mode = roll_mode(rng, drop);
    let mut z_t = Arr::zeros(z0.raw_dim());
    for (b, &t) in ts.iter().enumerate() {
        let z_row = z0.index_axis(Axis(0), b).to_owned().insert_axis(Axis(0));
        let e_row = eps.index_axis(Axis(0), b).to_owned().insert_axis(Axis(0));
        let noisy = forward_diffuse(sched, &z_row.into_dyn(), &e_row.into_dyn(), t)?;
        z_t.index_axis_mut(Axis(0), b)
            .assign(&noisy.index_axis(Axis(0), 0));
    }
    let loss = optimise(params, opt, cfg, z_t, pose, eps, &ts, cond, mode, false)?;
    Ok(StepReport { loss, mode })
}

/// Mark only the frame-axis attention (`d.tmp.*`) as trainable.
pub fn freeze_for_stage2(params: &mut ParamSet) {
    params.set_all_trainable(false);
    params.set_trainable_prefix("d.tmp.", true);
}

/// One temporal-stage step on a whole clip: rows of `z0` are the clip's
/// frames in order and share a single timestep, and the frame-axis
/// attention runs. Call [`freeze_for_stage2`] first so only it updates.
/// Draws from `rng` in a fixed order: timestep, noise, mode.
#[allow(clippy::too_many_arguments)]
pub fn train_step_stage2(
    params: &mut ParamSet,
    opt: &mut Adam,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    z0: &Arr,
    pose: &Arr,
    cond: &ConditioningBundle,
    drop: &GuidanceDropout,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport, DenoiserError> {
    let frames = check_frames(cfg, z0, pose, "z0")?;
    if frames > cfg.frames {
        return Err(DenoiserError::BadConfig(format!(
            "clip has {frames} frames, config supports {}",
            cfg.frames
        )));
    }
    cond.validate(cfg, frames)?;
    let t = rng.gen_range(1..sched.len());
    let ts = vec![t; frames];
    let eps = init::normal(rng, z0.shape(), 1.0);
    let mode = roll_mode(rng, drop);
    let z_t = forward_diffuse(sched, z0, &eps, t)?;
    let loss = optimise(params, opt, cfg, z_t, pose, eps, &ts, cond, mode, true)?;
    Ok(StepReport { loss, mode })
}

/// Gradient-free forward pass returning the predicted noise as a plain
/// array; the sampling loop's workhorse.
#[allow(clippy::too_many_arguments)]
pub fn predict_eps(
    params: &ParamSet,
    cfg: &DenoiserConfig,
    z_t: &Arr,
    pose: &Arr,
    ts: &[usize],
    cond: &ConditioningBundle,
    mode: CondMode,
    temporal: bool,
) -> Result<Arr, DenoiserError> {
    let f = Frame::new(params);
    let out = denoise_forward(
        &f,
        cfg,
        f.constant(z_t.clone()),
        f.constant(pose.clone()),
        ts,
        cond,
        mode,
        temporal,
    )?;
    Ok(f.value(out))
}
