//! Denoiser checkpoints. On top of parameters, moments and config, each
//! file records which training stage produced it, and loading can insist
//! on a stage so a spatial-only checkpoint is never sampled as if its
//! frame-axis attention had been trained.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenoiserConfig, DenoiserError};
use crate::container::Container;
use crate::tensor::ParamSet;

pub const DENOISER_KIND: &str = "denoiser-checkpoint";

/// Which training stage a checkpoint's weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Spatial network trained on independent frames.
    #[serde(rename = "stage1")]
    Stage1,
    /// Frame-axis attention trained on whole clips.
    #[serde(rename = "stage2")]
    Stage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        })
    }
}

/// A loaded checkpoint with the parameter set fully reconstructed.
pub struct DenoiserCheckpoint {
    pub config: DenoiserConfig,
    pub stage: Stage,
    pub step: u64,
    pub adam_step: u64,
    pub params: ParamSet,
}

pub fn save_denoiser_checkpoint(
    path: &Path,
    params: &ParamSet,
    cfg: &DenoiserConfig,
    stage: Stage,
    step: u64,
    adam_step: u64,
) -> Result<(), DenoiserError> {
    let meta = serde_json::json!({
        "config": cfg,
        "stage": stage,
        "step": step,
        "adam_step": adam_step,
    });
    let mut c = Container::new(DENOISER_KIND, meta);
    for name in params.names() {
        c.push(name, params.get_by_name(name).unwrap().clone());
    }
    for name in params.names() {
        let (m, v) = params.adam_state(name).unwrap();
        c.push(&format!("adam.m.{name}"), m.clone());
        c.push(&format!("adam.v.{name}"), v.clone());
    }
    c.write(path)?;
    Ok(())
}

/// Load a checkpoint; with `expect` the stage recorded in the file must
/// match or the load is refused.
pub fn load_denoiser_checkpoint(
    path: &Path,
    expect: Option<Stage>,
) -> Result<DenoiserCheckpoint, DenoiserError> {
    let c = Container::read_expect(path, DENOISER_KIND)?;
    let meta = c.meta();
    let config: DenoiserConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| DenoiserError::BadCheckpoint(format!("config: {e}")))?;
    config.validate()?;
    let stage: Stage = serde_json::from_value(meta["stage"].clone())
        .map_err(|e| DenoiserError::BadCheckpoint(format!("stage: {e}")))?;
    if let Some(want) = expect {
        if stage != want {
            return Err(DenoiserError::StageMismatch { want, got: stage });
        }
    }
    let step = meta["step"]
        .as_u64()
        .ok_or_else(|| DenoiserError::BadCheckpoint("missing step".into()))?;
    let adam_step = meta["adam_step"]
        .as_u64()
        .ok_or_else(|| DenoiserError::BadCheckpoint("missing adam_step".into()))?;

    let mut params = ParamSet::new();
    let names: Vec<String> = c
        .names()
        .filter(|n| !n.starts_with("adam."))
        .map(str::to_string)
        .collect();
    for name in &names {
        params.add(name, c.require(name)?.clone());
    }
    for name in &names {
        let m = c.require(&format!("adam.m.{name}"))?.clone();
        let v = c.require(&format!("adam.v.{name}"))?.clone();
        params.set_adam_state(name, m, v);
    }
    Ok(DenoiserCheckpoint {
        config,
        stage,
        step,
        adam_step,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::super::register_denoiser;
    use super::*;

    fn small_cfg() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 2,
            latent_size: 4,
            pose_channels: 1,
            pose_feat: 4,
            ref_dim: 6,
            base_width: 4,
            t_embed_dim: 4,
            d_k: 4,
            feat_dim: 4,
            rhythm_dim: 4,
            rhythm_hidden: None,
            code_dim: 4,
            rhythm_window: 2,
            audio_tokens: 6,
            frames: 3,
            groups: 2,
            timesteps: 8,
            beta_start: 0.01,
            beta_end: 0.2,
        }
    }

    #[test]
    fn round_trip_preserves_weights_stage_and_counters() {
        let cfg = small_cfg();
        let mut params = ParamSet::new();
        register_denoiser(&mut params, &cfg, 41);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dn.mar");
        save_denoiser_checkpoint(&path, &params, &cfg, Stage::Stage1, 17, 17).unwrap();

        let loaded = load_denoiser_checkpoint(&path, Some(Stage::Stage1)).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.stage, Stage::Stage1);
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.adam_step, 17);
        let mut want: Vec<&str> = params.names().collect();
        let mut got: Vec<&str> = loaded.params.names().collect();
        want.sort_unstable();
        got.sort_unstable();
        assert_eq!(want, got);
        for name in params.names() {
            let a = params.get_by_name(name).unwrap();
            let b = loaded.params.get_by_name(name).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn stage_mismatch_is_refused_but_untagged_load_accepts() {
        let cfg = small_cfg();
        let mut params = ParamSet::new();
        register_denoiser(&mut params, &cfg, 43);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dn.mar");
        save_denoiser_checkpoint(&path, &params, &cfg, Stage::Stage1, 0, 0).unwrap();

        match load_denoiser_checkpoint(&path, Some(Stage::Stage2)) {
            Err(DenoiserError::StageMismatch { want, got }) => {
                assert_eq!(want, Stage::Stage2);
                assert_eq!(got, Stage::Stage1);
            }
            Err(other) => panic!("unexpected error: {other}"),
            Ok(_) => panic!("stage1 weights loaded where stage2 was required"),
        }
        let any = load_denoiser_checkpoint(&path, None).unwrap();
        assert_eq!(any.stage, Stage::Stage1);
    }
}
