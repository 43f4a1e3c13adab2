//! The one configuration file every run resolves from.
//!
//! TOML with strict keys: an unknown or misspelled key anywhere in the file
//! is an error, and every run echoes the fully resolved config next to its
//! outputs. Defaults are the desk-scale sizes the test suite trains in
//! minutes; missing sections fall back to those defaults as a whole.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::SyntheticHandSpec;
use super::HarnessError;
use crate::codebook::CodebookConfig;
use crate::denoiser::DenoiserConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Default output root, below the `--out` flag and `MARIONETTE_OUT`.
    pub out_root: String,
    pub data: DataConfig,
    pub codebook: CodebookTrainConfig,
    pub denoiser: DenoiserConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub generate: GenerateConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_root: "runs".into(),
            data: DataConfig::default(),
            codebook: CodebookTrainConfig::default(),
            denoiser: DenoiserConfig::toy(),
            stage1: StageConfig { steps: 3000, batch: 4, lr: 2e-4, ..StageConfig::default() },
            stage2: StageConfig { steps: 2000, batch: 1, lr: 1e-4, ..StageConfig::default() },
            generate: GenerateConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub hands: HandSetConfig,
    pub clips: ClipSetConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { hands: HandSetConfig::default(), clips: ClipSetConfig::default() }
    }
}

/// How many hand crops to synthesize and with what shape variation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandSetConfig {
    pub n: usize,
    /// Images reserved from the end of the set for held-out evaluation.
    pub holdout: usize,
    pub spec: SyntheticHandSpec,
}

impl Default for HandSetConfig {
    fn default() -> Self {
        HandSetConfig { n: 2000, holdout: 256, spec: SyntheticHandSpec::default() }
    }
}

/// Paired latent-video / skeleton / audio clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipSetConfig {
    pub clips: usize,
    pub frames: usize,
    pub latent_size: usize,
    pub latent_channels: usize,
    pub audio_tokens: usize,
    pub feat_dim: usize,
    pub audio_noise: f32,
    /// Rhythm frequencies clips draw from, in Hz.
    pub rhythm_hz: Vec<f64>,
    /// Rhythm envelope peak range; the head oscillation scales with it.
    pub amplitude: (f32, f32),
    pub lip_level: (f32, f32),
    /// Head keypoint displacement per unit of envelope, in grid cells.
    pub head_gain: f64,
    /// Radius range of the scripted wrist orbits, in grid cells.
    pub hand_orbit: (f64, f64),
}

impl Default for ClipSetConfig {
    fn default() -> Self {
        ClipSetConfig {
            clips: 32,
            frames: 24,
            latent_size: 16,
            latent_channels: 4,
            audio_tokens: 50,
            feat_dim: 16,
            audio_noise: 0.25,
            rhythm_hz: vec![1.0, 1.5, 2.0],
            amplitude: (0.6, 1.4),
            lip_level: (0.2, 1.0),
            head_gain: 1.6,
            hand_orbit: (0.8, 1.6),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookTrainConfig {
    pub model: CodebookConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub checkpoint_every: usize,
}

impl Default for CodebookTrainConfig {
    fn default() -> Self {
        CodebookTrainConfig {
            model: CodebookConfig::toy(),
            steps: 5000,
            batch: 8,
            lr: 1e-3,
            checkpoint_every: 500,
        }
    }
}

/// Budget and optimiser settings shared by both denoiser stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    /// Frames per step. Stage 2 always trains one whole clip per step and
    /// ignores this.
    pub batch: usize,
    pub lr: f32,
    pub checkpoint_every: usize,
    /// Probability of training a step with every stream nulled.
    pub p_uncond: f64,
    /// Probability of training a step with only the audio streams nulled.
    pub p_image_only: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            steps: 500,
            batch: 4,
            lr: 2e-4,
            checkpoint_every: 500,
            p_uncond: 0.1,
            p_image_only: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Guidance weight on the reference-image branch.
    pub image_scale: f32,
    /// Guidance weight on the audio branch.
    pub audio_scale: f32,
    /// Clips to generate when no explicit request is given.
    pub clips: usize,
    /// Align driving skeletons to the reference before rendering pose maps.
    pub calibrate: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { image_scale: 2.5, audio_scale: 2.5, clips: 2, calibrate: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Token-grid side lengths to compare for the hand codebook.
    pub codebook_grids: Vec<usize>,
    pub codebook_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Clips generated per variant when scoring head motion.
    pub eval_clips: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            codebook_grids: vec![8, 16],
            codebook_steps: 1200,
            stage1_steps: 1500,
            stage2_steps: 300,
            eval_clips: 2,
        }
    }
}

impl RunConfig {
    /// Parse a TOML file, rejecting unknown keys, then cross-validate.
    pub fn load(path: &Path) -> Result<RunConfig, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig, HarnessError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The canonical serialized form written next to every run's outputs.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Check each module config and every cross-section size agreement.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        self.denoiser
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.codebook
            .model
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let c = &self.data.clips;
        let d = &self.denoiser;
        for (what, got, want) in [
            ("clips.frames vs denoiser.frames", c.frames, d.frames),
            ("clips.latent_size vs denoiser.latent_size", c.latent_size, d.latent_size),
            (
                "clips.latent_channels vs denoiser.latent_channels",
                c.latent_channels,
                d.latent_channels,
            ),
            ("clips.audio_tokens vs denoiser.audio_tokens", c.audio_tokens, d.audio_tokens),
            ("clips.feat_dim vs denoiser.feat_dim", c.feat_dim, d.feat_dim),
            (
                "codebook.model.code_dim vs denoiser.code_dim",
                self.codebook.model.code_dim,
                d.code_dim,
            ),
            (
                "hands.image_size vs codebook.model.image_size",
                self.data.hands.spec.image_size,
                self.codebook.model.image_size,
            ),
        ] {
            if got != want {
                return bad(format!("{what}: {got} != {want}"));
            }
        }
        if c.latent_channels != 4 {
            return bad(format!(
                "clips.latent_channels must be 4 (head, two hands, texture), got {}",
                c.latent_channels
            ));
        }
        if self.codebook.model.in_channels != 3 {
            return bad(format!(
                "codebook.model.in_channels must be 3 to match the hand renderer, got {}",
                self.codebook.model.in_channels
            ));
        }
        if c.clips == 0 || c.frames == 0 {
            return bad("clips and frames must be positive".into());
        }
        if c.rhythm_hz.is_empty() {
            return bad("clips.rhythm_hz must list at least one frequency".into());
        }
        for (name, (lo, hi)) in [("amplitude", c.amplitude), ("lip_level", c.lip_level)] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < 0.0 {
                return bad(format!("clips.{name} range ({lo}, {hi}) is invalid"));
            }
        }
        let h = &self.data.hands;
        if h.n == 0 || h.holdout >= h.n {
            return bad(format!("hands.holdout {} must be < hands.n {}", h.holdout, h.n));
        }
        h.spec.validate().map_err(HarnessError::Config)?;
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if s.steps == 0 || s.batch == 0 {
                return bad(format!("{name}.steps and {name}.batch must be positive"));
            }
            if !(s.lr.is_finite() && s.lr > 0.0) {
                return bad(format!("{name}.lr must be a positive finite number"));
            }
            let (pu, pi) = (s.p_uncond, s.p_image_only);
            if !(0.0..=1.0).contains(&pu) || !(0.0..=1.0).contains(&pi) || pu + pi > 1.0 {
                return bad(format!("{name} drop probabilities ({pu}, {pi}) are invalid"));
            }
        }
        if self.codebook.steps == 0 || self.codebook.batch == 0 {
            return bad("codebook.steps and codebook.batch must be positive".into());
        }
        if !(self.codebook.lr.is_finite() && self.codebook.lr > 0.0) {
            return bad("codebook.lr must be a positive finite number".into());
        }
        let g = &self.generate;
        if !(g.image_scale.is_finite() && g.audio_scale.is_finite())
            || g.image_scale < 0.0
            || g.audio_scale < 0.0
        {
            return bad(format!(
                "guidance scales ({}, {}) must be finite and non-negative",
                g.image_scale, g.audio_scale
            ));
        }
        if g.clips == 0 {
            return bad("generate.clips must be positive".into());
        }
        let a = &self.ablate;
        if a.codebook_grids.is_empty() {
            return bad("ablate.codebook_grids must not be empty".into());
        }
        if a.eval_clips == 0 || a.eval_clips > c.clips {
            return bad(format!(
                "ablate.eval_clips {} must be in 1..={}",
                a.eval_clips, c.clips
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.resolved_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        // The echo is canonical: serializing again yields the same bytes.
        assert_eq!(back.resolved_toml(), text);
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        let top = "velocity = 3\n";
        assert!(matches!(RunConfig::parse(top), Err(HarnessError::Config(_))));
        let nested = "[denoiser]\nwarp_factor = 9\n";
        assert!(matches!(RunConfig::parse(nested), Err(HarnessError::Config(_))));
        let deep = "[data.clips]\nfps = 60\n";
        assert!(matches!(RunConfig::parse(deep), Err(HarnessError::Config(_))));
    }

    #[test]
    fn cross_section_disagreements_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.data.clips.frames = 12;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("frames"), "got: {err}");

        let mut cfg = RunConfig::default();
        cfg.codebook.model.code_dim = 48;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.stage1.p_uncond = 0.8;
        cfg.stage1.p_image_only = 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_sections_override_only_their_keys() {
        let cfg = RunConfig::parse("seed = 99\n\n[generate]\naudio_scale = 0.0\n").unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.generate.audio_scale, 0.0);
        assert_eq!(cfg.generate.image_scale, 2.5);
        assert_eq!(cfg.denoiser, crate::denoiser::DenoiserConfig::toy());
    }

    #[test]
    fn config_errors_map_to_exit_code_two() {
        let err = RunConfig::parse("nope = 1").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
