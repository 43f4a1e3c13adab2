//! Audio conditioning features: windowed feature tensors, window pooling,
//! the rhythm projection network, and a seeded synthetic feature generator.
//!
//! The attention layers that consume these features live in
//! [`crate::attention`].

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{init, init_rng, name_seed, Arr, Frame, ParamSet, Var};

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("expected shape {want}, got {got:?}")]
    BadShape { want: String, got: Vec<usize> },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
}

/// Dimensions of the audio pathway. Defaults document the full-scale sizes;
/// toy runs shrink the feature dims.
#[derive(Debug, Clone)]
pub struct AudioConfig {
    /// Window count per clip; one window per video frame.
    pub windows: usize,
    /// Audio tokens per clip.
    pub tokens: usize,
    /// Raw feature dimension per token.
    pub feat_dim: usize,
    /// Rhythm embedding dimension after projection.
    pub proj_dim: usize,
    /// Hidden width of the projection network; `None` makes it a single
    /// linear map.
    pub proj_hidden: Option<usize>,
    /// Whether projection layers carry biases.
    pub proj_bias: bool,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            windows: 24,
            tokens: 50,
            feat_dim: 384,
            proj_dim: 128,
            proj_hidden: Some(256),
            proj_bias: true,
        }
    }
}

/// Windowed audio features, `[batch, windows, tokens, feat_dim]`.
#[derive(Debug, Clone)]
pub struct AudioFeatureTensor {
    data: Arr,
}

impl AudioFeatureTensor {
    pub fn new(data: Arr) -> Result<Self, AudioError> {
        if data.ndim() != 4 {
            return Err(AudioError::BadShape {
                want: "[batch, windows, tokens, feat_dim]".into(),
                got: data.shape().to_vec(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(AudioError::NonFinite("audio features"));
        }
        Ok(AudioFeatureTensor { data })
    }

    pub fn data(&self) -> &Arr {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

/// Mean over the window axis: `[B, F, T, D] -> [B, T, D]`.
pub fn pool_windows(w: &AudioFeatureTensor) -> Arr {
    let s = w.shape();
    let (b, f, t, d) = (s[0], s[1], s[2], s[3]);
    let mut out = Arr::zeros(IxDyn(&[b, t, d]));
    let inv = 1.0 / f as f64;
    for bi in 0..b {
        for ti in 0..t {
            for di in 0..d {
                let mut acc = 0.0f64;
                for fi in 0..f {
                    acc += w.data[[bi, fi, ti, di]] as f64;
                }
                out[[bi, ti, di]] = (acc * inv) as f32;
            }
        }
    }
    out
}

/// Register the rhythm projection network's parameters under `prefix`.
pub fn register_rhythm_projector(
    params: &mut ParamSet,
    prefix: &str,
    cfg: &AudioConfig,
    seed: u64,
) {
    let add_linear = |params: &mut ParamSet, name: String, d_in: usize, d_out: usize| {
        let mut rng = init_rng(name_seed(seed, &name), "w");
        params.add(&format!("{name}.w"), init::linear_xavier(&mut rng, &[d_in, d_out]));
        if cfg.proj_bias {
            params.add(&format!("{name}.b"), init::zeros(&[d_out]));
        }
    };
    match cfg.proj_hidden {
        Some(h) => {
            add_linear(params, format!("{prefix}.l1"), cfg.feat_dim, h);
            add_linear(params, format!("{prefix}.l2"), h, cfg.proj_dim);
        }
        None => add_linear(params, format!("{prefix}.l1"), cfg.feat_dim, cfg.proj_dim),
    }
}

/// Project pooled features `[B, T, feat_dim]` to the rhythm embedding
/// `[B, T, proj_dim]`.
pub fn project_rhythm(
    f: &Frame,
    prefix: &str,
    pooled: Var,
    cfg: &AudioConfig,
) -> Result<Var, AudioError> {
    let shape = f.shape(pooled);
    if shape.len() != 3 || shape[2] != cfg.feat_dim {
        return Err(AudioError::BadShape {
            want: format!("[B, T, {}]", cfg.feat_dim),
            got: shape,
        });
    }
    let bias = |name: String| -> Option<Var> {
        if cfg.proj_bias {
            Some(f.p_name(&name))
        } else {
            None
        }
    };
    let out = match cfg.proj_hidden {
        Some(_) => {
            let h = f.linear(pooled, f.p_name(&format!("{prefix}.l1.w")), bias(format!("{prefix}.l1.b")));
            let h = f.silu(h);
            f.linear(h, f.p_name(&format!("{prefix}.l2.w")), bias(format!("{prefix}.l2.b")))
        }
        None => f.linear(pooled, f.p_name(&format!("{prefix}.l1.w")), bias(format!("{prefix}.l1.b"))),
    };
    Ok(out)
}

/// Synthetic-feature knobs: the rhythm envelope lives in the first half of
/// the feature dims, a clip-level lip intensity in the second half, plus
/// seeded per-window noise.
#[derive(Debug, Clone)]
pub struct SynthAudioConfig {
    pub windows: usize,
    pub feat_dim: usize,
    /// Peak amplitude of the rhythm envelope.
    pub amplitude: f32,
    /// Constant lip-band intensity for the clip.
    pub lip_level: f32,
    /// Standard deviation of the additive noise.
    pub noise: f32,
}

impl Default for SynthAudioConfig {
    fn default() -> Self {
        SynthAudioConfig {
            windows: 24,
            feat_dim: 16,
            amplitude: 1.0,
            lip_level: 1.0,
            noise: 0.25,
        }
    }
}

/// Nominal token rate used to map token index to seconds.
pub const TOKENS_PER_SECOND: f64 = 25.0;

/// Rhythm envelope value at a token index.
pub fn rhythm_envelope(amplitude: f32, rhythm_hz: f64, token: usize) -> f32 {
    let t = token as f64 / TOKENS_PER_SECOND;
    amplitude * ((2.0 * std::f64::consts::PI * rhythm_hz * t).cos() as f32)
}

/// Deterministic windowed features: a cosine rhythm envelope at `rhythm_hz`
/// across tokens in the low feature dims, a constant lip level in the high
/// dims, and seeded Gaussian noise everywhere. Batch dimension is 1.
pub fn synth_audio_features(
    seed: u64,
    rhythm_hz: f64,
    length_tokens: usize,
    cfg: &SynthAudioConfig,
) -> AudioFeatureTensor {
    assert!(length_tokens >= 1, "need at least one token");
    let (f, d) = (cfg.windows, cfg.feat_dim);
    let half = d / 2;
    let mut rng: ChaCha8Rng = init_rng(seed, "synth-audio");
    let mut data = Arr::zeros(IxDyn(&[1, f, length_tokens, d]));
    for fi in 0..f {
        for t in 0..length_tokens {
            let env = rhythm_envelope(cfg.amplitude, rhythm_hz, t);
            for di in 0..d {
                let base = if di < half { env } else { cfg.lip_level };
                // Sum of uniforms is near-Gaussian and keeps the RNG stream
                // simple; the 1/sqrt(3) factor normalizes its variance.
                let n: f32 = (0..3).map(|_| rng.gen_range(-1.0f32..1.0)).sum();
                data[[0, fi, t, di]] = base + cfg.noise * n * 0.5773503;
            }
        }
    }
    AudioFeatureTensor::new(data).expect("synthetic features are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn rand3(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn pooling_is_mean_over_windows() {
        let mut data = Arr::zeros(IxDyn(&[2, 4, 3, 2]));
        data.fill(3.5);
        let w = AudioFeatureTensor::new(data).unwrap();
        let pooled = pool_windows(&w);
        assert_eq!(pooled.shape(), &[2, 3, 2]);
        assert!(pooled.iter().all(|&v| v == 3.5));

        // alternating 0/2 over the window axis averages to 1
        let mut alt = Arr::zeros(IxDyn(&[1, 4, 2, 1]));
        for f in 0..4 {
            for t in 0..2 {
                alt[[0, f, t, 0]] = if f % 2 == 0 { 0.0 } else { 2.0 };
            }
        }
        let pooled = pool_windows(&AudioFeatureTensor::new(alt).unwrap());
        assert!(pooled.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pooling_is_window_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = rand3(&mut rng, &[1, 5, 4, 3]);
        let perm = [3usize, 4, 0, 1, 2];
        let mut shuffled = data.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for t in 0..4 {
                for d in 0..3 {
                    shuffled[[0, dst, t, d]] = data[[0, src, t, d]];
                }
            }
        }
        let p1 = pool_windows(&AudioFeatureTensor::new(data).unwrap());
        let p2 = pool_windows(&AudioFeatureTensor::new(shuffled).unwrap());
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn rhythm_projection_shapes_and_linearity() {
        let cfg = AudioConfig {
            feat_dim: 6,
            proj_dim: 4,
            proj_hidden: None,
            proj_bias: false,
            ..Default::default()
        };
        let mut params = ParamSet::new();
        register_rhythm_projector(&mut params, "g", &cfg, 11);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand3(&mut rng, &[2, 7, 6]);

        let f = Frame::new(&params);
        let xv = f.constant(x.clone());
        let y = project_rhythm(&f, "g", xv, &cfg).unwrap();
        assert_eq!(f.shape(y), vec![2, 7, 4]);

        // linear config: G(2x) = 2 G(x)
        let x2 = f.constant(&x * 2.0);
        let y2 = project_rhythm(&f, "g", x2, &cfg).unwrap();
        for (a, b) in f.value(y).iter().zip(f.value(y2).iter()) {
            assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-5);
        }

        // zero input through the bias-free network stays zero
        let z = f.constant(Arr::zeros(IxDyn(&[1, 3, 6])));
        let yz = project_rhythm(&f, "g", z, &cfg).unwrap();
        assert!(f.value(yz).iter().all(|&v| v == 0.0));

        // wrong input dim is rejected
        let bad = f.constant(Arr::zeros(IxDyn(&[1, 3, 5])));
        assert!(project_rhythm(&f, "g", bad, &cfg).is_err());
    }

    #[test]
    fn two_layer_projector_has_expected_parameters() {
        let cfg = AudioConfig {
            feat_dim: 6,
            proj_dim: 4,
            proj_hidden: Some(5),
            proj_bias: true,
            ..Default::default()
        };
        let mut params = ParamSet::new();
        register_rhythm_projector(&mut params, "g", &cfg, 1);
        let names: Vec<&str> = params.names().collect();
        assert_eq!(names, vec!["g.l1.w", "g.l1.b", "g.l2.w", "g.l2.b"]);
        assert_eq!(params.get_by_name("g.l1.w").unwrap().shape(), &[6, 5]);
        assert_eq!(params.get_by_name("g.l2.w").unwrap().shape(), &[5, 4]);

        let f = Frame::new(&params);
        let x = f.constant(Arr::zeros(IxDyn(&[1, 3, 6])));
        let y = project_rhythm(&f, "g", x, &cfg).unwrap();
        assert_eq!(f.shape(y), vec![1, 3, 4]);
    }

    #[test]
    fn synthetic_features_are_seed_deterministic() {
        let cfg = SynthAudioConfig::default();
        let a = synth_audio_features(7, 3.0, 50, &cfg);
        let b = synth_audio_features(7, 3.0, 50, &cfg);
        assert_eq!(a.data(), b.data());
        let c = synth_audio_features(8, 3.0, 50, &cfg);
        assert_ne!(a.data(), c.data());
        assert_eq!(a.shape(), &[1, 24, 50, 16]);
    }

    #[test]
    fn zero_rhythm_rate_gives_constant_envelope() {
        let cfg = SynthAudioConfig {
            noise: 0.0,
            ..Default::default()
        };
        let w = synth_audio_features(3, 0.0, 20, &cfg);
        let pooled = pool_windows(&w);
        for t in 0..20 {
            assert_abs_diff_eq!(pooled[[0, t, 0]], cfg.amplitude, epsilon = 1e-6);
            assert_abs_diff_eq!(pooled[[0, t, 15]], cfg.lip_level, epsilon = 1e-6);
        }
    }

    #[test]
    fn pooled_spectrum_peaks_at_rhythm_bin() {
        let cfg = SynthAudioConfig {
            noise: 0.15,
            ..Default::default()
        };
        let tokens = 50;
        let hz = 3.0; // exactly bin 6 at 25 tokens/s over 50 tokens
        let w = synth_audio_features(99, hz, tokens, &cfg);
        let pooled = pool_windows(&w);
        // DFT magnitude of dim 0 across tokens
        let series: Vec<f64> = (0..tokens).map(|t| pooled[[0, t, 0]] as f64).collect();
        let mean = series.iter().sum::<f64>() / tokens as f64;
        let mut best_bin = 0;
        let mut best_mag = -1.0;
        for k in 1..tokens / 2 {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (t, v) in series.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / tokens as f64;
                re += (v - mean) * ang.cos();
                im += (v - mean) * ang.sin();
            }
            let mag = re.hypot(im);
            if mag > best_mag {
                best_mag = mag;
                best_bin = k;
            }
        }
        let expected_bin = (hz * tokens as f64 / TOKENS_PER_SECOND).round() as usize;
        assert_eq!(best_bin, expected_bin);
    }
}
