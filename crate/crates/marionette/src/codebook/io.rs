//! Codebook checkpoints: parameters, optimiser moments and the resolved
//! configuration in one container file.

use std::path::Path;

use super::{CodebookConfig, CodebookError};
use crate::container::Container;
use crate::tensor::ParamSet;

pub const CODEBOOK_KIND: &str = "codebook-checkpoint";

/// A loaded checkpoint: the parameter set is fully reconstructed, including
/// optimiser moments.
pub struct CodebookCheckpoint {
    pub config: CodebookConfig,
    pub step: u64,
    pub adam_step: u64,
    pub params: ParamSet,
}

pub fn save_codebook_checkpoint(
    path: &Path,
    params: &ParamSet,
    cfg: &CodebookConfig,
    step: u64,
    adam_step: u64,
) -> Result<(), CodebookError> {
    let meta = serde_json::json!({
        "config": cfg,
        "step": step,
        "adam_step": adam_step,
    });
    let mut c = Container::new(CODEBOOK_KIND, meta);
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

pub fn load_codebook_checkpoint(path: &Path) -> Result<CodebookCheckpoint, CodebookError> {
    let c = Container::read_expect(path, CODEBOOK_KIND)?;
    let meta = c.meta();
    let config: CodebookConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| CodebookError::BadCheckpoint(format!("config: {e}")))?;
    config.validate()?;
    let step = meta["step"]
        .as_u64()
        .ok_or_else(|| CodebookError::BadCheckpoint("missing step".into()))?;
    let adam_step = meta["adam_step"]
        .as_u64()
        .ok_or_else(|| CodebookError::BadCheckpoint("missing adam_step".into()))?;

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
    Ok(CodebookCheckpoint {
        config,
        step,
        adam_step,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{register_codebook_model, vq_training_step};
    use super::*;
    use crate::tensor::{Adam, Arr};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let cfg = CodebookConfig {
            codewords: 8,
            code_dim: 4,
            image_size: 8,
            grid: 4,
            in_channels: 3,
            base_width: 4,
            groups: 2,
            bottleneck_attn: true,
            beta: 0.25,
        };
        let mut params = ParamSet::new();
        register_codebook_model(&mut params, &cfg, 31);

        // a couple of real steps so the Adam moments are non-trivial
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let batch = Arr::from_shape_simple_fn(IxDyn(&[2, 3, 8, 8]), || rng.gen_range(0.0f32..1.0));
        let mut opt = Adam::new(1e-3);
        for _ in 0..2 {
            vq_training_step(&mut params, &mut opt, &cfg, &batch);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.mar");
        save_codebook_checkpoint(&path, &params, &cfg, 2, opt.step_count()).unwrap();

        let loaded = load_codebook_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.step, 2);
        assert_eq!(loaded.adam_step, 2);

        let mut want: Vec<&str> = params.names().collect();
        let mut got: Vec<&str> = loaded.params.names().collect();
        want.sort_unstable();
        got.sort_unstable();
        assert_eq!(want, got);
        for name in params.names() {
            let a = params.get_by_name(name).unwrap();
            let b = loaded.params.get_by_name(name).unwrap();
            assert_eq!(a.shape(), b.shape(), "{name}");
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
            let (m0, v0) = params.adam_state(name).unwrap();
            let (m1, v1) = loaded.params.adam_state(name).unwrap();
            assert_eq!(m0, m1, "{name} adam m");
            assert_eq!(v0, v1, "{name} adam v");
        }
    }

    #[test]
    fn wrong_container_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.mar");
        Container::new("something-else", serde_json::json!({}))
            .write(&path)
            .unwrap();
        match load_codebook_checkpoint(&path) {
            Err(CodebookError::Container(_)) => {}
            Err(other) => panic!("unexpected error: {other:?}"),
            Ok(_) => panic!("load accepted a foreign container"),
        }
    }
}
