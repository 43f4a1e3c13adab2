//! Noise schedule, forward corruption, ancestral reverse steps and
//! two-condition classifier-free guidance.
//!
//! Timesteps are 0-based indices into the schedule tables. The reverse chain
//! walks from `num_steps - 1` down to 1; index 0 is the data end of the chain
//! and is not a valid denoising step.


use thiserror::Error;

use crate::tensor::Arr;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("num_steps must be at least 1")]
    EmptySchedule,
    #[error("beta values must lie in (0, 1), got {0}")]
    BetaOutOfRange(f64),
    #[error("beta_start must not exceed beta_end")]
    BetaOrder,
    #[error("timestep {t} out of range for schedule of length {len}")]
    TimestepOutOfRange { t: usize, len: usize },
    #[error("denoise_step at t = 0: index 0 is the data end of the chain")]
    StepAtZero,
    #[error("shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
}

/// How betas are spaced between `beta_start` and `beta_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Precomputed schedule tables.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t >= self.len() {
            return Err(DiffusionError::TimestepOutOfRange { t, len: self.len() });
        }
        Ok(())
    }
}

/// Builds the beta table and its cumulative products.
///
/// With `Linear` spacing, betas interpolate evenly from `beta_start` to
/// `beta_end` inclusive; a single-step schedule uses `beta_start` alone.
pub fn build_schedule(
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule, DiffusionError> {
    if num_steps == 0 {
        return Err(DiffusionError::EmptySchedule);
    }
    if beta_start > beta_end {
        return Err(DiffusionError::BetaOrder);
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..num_steps)
            .map(|i| {
                if num_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
                }
            })
            .collect(),
    };
    for &b in &betas {
        if !(b > 0.0 && b < 1.0) {
            return Err(DiffusionError::BetaOutOfRange(b));
        }
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(num_steps);
    let mut acc = 1.0;
    for &a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

fn check_same_shape(a: &Arr, b: &Arr) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_finite(a: &Arr, what: &'static str) -> Result<(), DiffusionError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffusionError::NonFinite(what))
    }
}

/// Closed-form forward corruption:
/// `z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_diffuse(
    schedule: &NoiseSchedule,
    z0: &Arr,
    eps: &Arr,
    t: usize,
) -> Result<Arr, DiffusionError> {
    schedule.check_t(t)?;
    check_same_shape(z0, eps)?;
    check_finite(z0, "forward_diffuse z0")?;
    check_finite(eps, "forward_diffuse eps")?;
    let ab = schedule.alpha_bar(t);
    let (c0, c1) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let mut out = z0.mapv(|v| v * c0);
    out.zip_mut_with(eps, |o, &e| *o += c1 * e);
    check_finite(&out, "forward_diffuse output")?;
    Ok(out)
}

/// One ancestral reverse step from `z_t` to `z_{t-1}`:
/// `(z_t - beta_t / sqrt(1 - alpha_bar_t) * eps_pred) / sqrt(alpha_t) + sigma_t * noise`
/// with `sigma_t = sqrt(beta_t)`. The noise term is dropped at `t = 1`, and
/// `t = 0` is rejected.
pub fn denoise_step(
    schedule: &NoiseSchedule,
    z_t: &Arr,
    t: usize,
    eps_pred: &Arr,
    noise: Option<&Arr>,
) -> Result<Arr, DiffusionError> {
    schedule.check_t(t)?;
    if t == 0 {
        return Err(DiffusionError::StepAtZero);
    }
    check_same_shape(z_t, eps_pred)?;
    check_finite(z_t, "denoise_step z_t")?;
    check_finite(eps_pred, "denoise_step eps_pred")?;
    let beta = schedule.beta(t);
    let alpha = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let eps_coef = (beta / (1.0 - ab).sqrt()) as f32;
    let inv_sqrt_alpha = (1.0 / alpha.sqrt()) as f32;
    let mut out = z_t.clone();
    out.zip_mut_with(eps_pred, |o, &e| *o = (*o - eps_coef * e) * inv_sqrt_alpha);
    if t > 1 {
        if let Some(n) = noise {
            check_same_shape(z_t, n)?;
            check_finite(n, "denoise_step noise")?;
            let sigma = beta.sqrt() as f32;
            out.zip_mut_with(n, |o, &ni| *o += sigma * ni);
        }
    }
    check_finite(&out, "denoise_step output")?;
    Ok(out)
}

/// Mean squared error between true and predicted noise.
pub fn noise_loss(eps: &Arr, eps_pred: &Arr) -> Result<f32, DiffusionError> {
    check_same_shape(eps, eps_pred)?;
    Ok(mse_scalar(eps, eps_pred))
}

/// Shared MSE kernel; training losses reuse this exact reduction.
pub(crate) fn mse_scalar(a: &Arr, b: &Arr) -> f32 {
    let n = a.len().max(1);
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    (sum / n as f64) as f32
}

/// Guidance scales for the two-condition split.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct GuidanceConfig {
    pub image_scale: f32,
    pub audio_scale: f32,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { image_scale: 2.5, audio_scale: 2.5 }
    }
}

/// Sequential two-condition combination:
/// `uncond + image_scale * (image_only - uncond) + audio_scale * (full - image_only)`.
pub fn cfg_combine(
    uncond: &Arr,
    image_only: &Arr,
    full: &Arr,
    cfg: GuidanceConfig,
) -> Result<Arr, DiffusionError> {
    check_same_shape(uncond, image_only)?;
    check_same_shape(uncond, full)?;
    if cfg.image_scale == 0.0 && cfg.audio_scale == 0.0 {
        // both scales disabled: the unconditional branch verbatim, with no
        // arithmetic that could perturb signed zeros
        return Ok(uncond.clone());
    }
    let mut out = uncond.clone();
    ndarray::Zip::from(&mut out)
        .and(image_only)
        .and(full)
        .for_each(|o, &img, &fl| {
            *o += cfg.image_scale * (img - *o) + cfg.audio_scale * (fl - img);
        });
    check_finite(&out, "cfg_combine output")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f32) -> Arr {
        ArrayD::from_elem(IxDyn(&[1]), v)
    }

    #[test]
    fn two_step_schedule_tables() {
        let s = build_schedule(2, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert!((s.alpha_bar(0) - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(1) - 0.72).abs() < 1e-12);
    }

    #[test]
    fn single_step_schedule_uses_beta_start() {
        let s = build_schedule(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas(), &[0.5]);
    }

    #[test]
    fn thousand_step_schedule_shrinks_alpha_bar() {
        let s = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        // independent recomputation of the cumulative product
        let mut acc = 1.0f64;
        for i in 0..1000 {
            acc *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(999) - acc).abs() < 1e-15);
        assert!(s.alpha_bar(999) < 0.01);
        // monotone decreasing
        for t in 1..1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn schedule_rejects_bad_betas() {
        assert!(matches!(
            build_schedule(0, 0.1, 0.2, ScheduleKind::Linear),
            Err(DiffusionError::EmptySchedule)
        ));
        assert!(matches!(
            build_schedule(2, 0.0, 0.2, ScheduleKind::Linear),
            Err(DiffusionError::BetaOutOfRange(_))
        ));
        assert!(matches!(
            build_schedule(2, 0.1, 1.0, ScheduleKind::Linear),
            Err(DiffusionError::BetaOutOfRange(_))
        ));
        assert!(matches!(
            build_schedule(2, 0.3, 0.2, ScheduleKind::Linear),
            Err(DiffusionError::BetaOrder)
        ));
    }

    #[test]
    fn forward_diffuse_matches_hand_arithmetic() {
        // alpha_bar(1) = 0.72: z = sqrt(0.72) * 1 + sqrt(0.28) * 0.5
        let s = build_schedule(2, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        let z = forward_diffuse(&s, &scalar(1.0), &scalar(0.5), 1).unwrap();
        let expect = 0.72f64.sqrt() + 0.28f64.sqrt() * 0.5;
        assert!((z[[0]] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn forward_diffuse_zero_noise_scales_input() {
        let s = build_schedule(3, 0.1, 0.3, ScheduleKind::Linear).unwrap();
        let z = forward_diffuse(&s, &scalar(2.0), &scalar(0.0), 2).unwrap();
        assert!((z[[0]] as f64 - 2.0 * s.alpha_bar(2).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn denoise_step_matches_frozen_scalar_case() {
        // betas [0.1, 0.1]: at t = 1, beta = 0.1, alpha = 0.9, alpha_bar = 0.81.
        // Hand evaluation of (1 - 0.1 / sqrt(0.19) * 0.5) / sqrt(0.9):
        //   0.1 / 0.4358898943540674 * 0.5 = 0.1147078669352809
        //   0.8852921330647191 / 0.9486832980505138 = 0.9331795832566111
        let s = build_schedule(2, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        let z = denoise_step(&s, &scalar(1.0), 1, &scalar(0.5), None).unwrap();
        assert!((z[[0]] as f64 - 0.9331795832566111).abs() < 1e-6);
    }

    #[test]
    fn denoise_step_drops_noise_at_t1_and_rejects_t0() {
        let s = build_schedule(3, 0.1, 0.3, ScheduleKind::Linear).unwrap();
        let with_noise =
            denoise_step(&s, &scalar(1.0), 1, &scalar(0.2), Some(&scalar(100.0))).unwrap();
        let without = denoise_step(&s, &scalar(1.0), 1, &scalar(0.2), None).unwrap();
        assert_eq!(with_noise, without);
        assert!(matches!(
            denoise_step(&s, &scalar(1.0), 0, &scalar(0.2), None),
            Err(DiffusionError::StepAtZero)
        ));
    }

    #[test]
    fn oracle_noise_round_trip_recovers_z0() {
        // tiny beta_start makes the t=1 posterior mean collapse onto z0
        let s = build_schedule(2, 1e-10, 0.3, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = ArrayD::from_shape_simple_fn(IxDyn(&[8]), || rng.gen_range(-1.0f32..1.0));
        let eps = ArrayD::from_shape_simple_fn(IxDyn(&[8]), || rng.gen_range(-1.0f32..1.0));
        let z1 = forward_diffuse(&s, &z0, &eps, 1).unwrap();
        let rec = denoise_step(&s, &z1, 1, &eps, None).unwrap();
        for (a, b) in rec.iter().zip(z0.iter()) {
            assert!((a - b).abs() < 1e-4, "round trip {a} vs {b}");
        }
    }

    #[test]
    fn noise_loss_matches_hand_value_and_zero_property() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 1.0]).unwrap();
        let b = ArrayD::zeros(IxDyn(&[2]));
        assert_eq!(noise_loss(&a, &b).unwrap(), 1.0);
        assert_eq!(noise_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn cfg_combine_matches_hand_value() {
        let out = cfg_combine(
            &scalar(0.0),
            &scalar(1.0),
            &scalar(2.0),
            GuidanceConfig { image_scale: 2.5, audio_scale: 2.5 },
        )
        .unwrap();
        assert_eq!(out[[0]], 5.0);
    }

    #[test]
    fn cfg_zero_scales_reproduce_uncond_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mk = |rng: &mut ChaCha8Rng| {
            ArrayD::from_shape_simple_fn(IxDyn(&[3, 4]), || rng.gen_range(-2.0f32..2.0))
        };
        let (mut u, i, f) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        // signed zeros must survive verbatim too
        u[[0, 0]] = -0.0;
        u[[1, 1]] = 0.0;
        let out =
            cfg_combine(&u, &i, &f, GuidanceConfig { image_scale: 0.0, audio_scale: 0.0 })
                .unwrap();
        for (a, b) in out.iter().zip(u.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn forward_diffuse_rejects_bad_inputs() {
        let s = build_schedule(2, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        assert!(matches!(
            forward_diffuse(&s, &scalar(1.0), &scalar(0.0), 2),
            Err(DiffusionError::TimestepOutOfRange { .. })
        ));
        let nan = scalar(f32::NAN);
        assert!(matches!(
            forward_diffuse(&s, &nan, &scalar(0.0), 1),
            Err(DiffusionError::NonFinite(_))
        ));
        let wide = ArrayD::<f32>::zeros(IxDyn(&[2, 2]));
        assert!(matches!(
            forward_diffuse(&s, &scalar(1.0), &wide, 1),
            Err(DiffusionError::ShapeMismatch { .. })
        ));
    }
}
