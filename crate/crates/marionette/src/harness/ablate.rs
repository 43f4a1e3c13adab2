//! Controlled comparisons on the two claims worth isolating: quantizer
//! grid resolution (capacity of the hand tokenizer) and the head-gated
//! rhythm stream (the only frame-aligned audio path into the denoiser).
//!
//! Every variant reuses the same seed strings, so paired rows see identical
//! initial weights, batch schedules and noise draws; the only difference is
//! the knob under study. Repeating the grid reproduces every row exactly.

use std::path::{Path, PathBuf};

use rand::Rng;

use super::config::RunConfig;
use super::data::{build_bundle, load_hands, HANDS_FILE};
use super::metrics::{hmv, latent_com};
use super::train::{
    gather_rows, holdout_code_stats, holdout_mse, load_denoiser_inputs, DenoiserSetup,
};
use super::{csv_create, data_dir, HarnessError, RunDir};
use crate::attention::RegionMask;
use crate::codebook::{
    encoder_vectors, register_codebook_model, seed_codebook_from_vectors, vq_training_step,
};
use crate::denoiser::{
    freeze_for_stage2, register_denoiser, sample_clip, train_step_stage1, train_step_stage2,
    ConditioningBundle, GuidanceDropout,
};
use crate::diffusion::GuidanceConfig;
use crate::tensor::{init_rng, name_seed, Adam, ParamSet};
use crate::Arr;

const ABLATION_SCHEMA: &str = "ablation.v1";
const ABLATION_HEADER: &[&str] = &["variant", "holdout_mse", "usage", "hmv"];

/// One line of the comparison table. Cells that do not apply to a variant
/// (head motion for a tokenizer, reconstruction for a conditioning stream)
/// stay empty.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub holdout_mse: Option<f64>,
    pub usage: Option<f64>,
    pub hmv: Option<f64>,
}

/// Train and score every configured variant, writing `ablation.csv` under
/// `<root>/ablate`. Needs the datasets and the codebook checkpoint (hand
/// tokens for the denoiser variants come from the real tokenizer).
pub fn run_ablation_grid(cfg: &RunConfig, root: &Path) -> Result<Vec<AblationRow>, HarnessError> {
    cfg.validate()?;
    let hands_path = data_dir(root).join(HANDS_FILE);
    if !hands_path.is_file() {
        return Err(HarnessError::MissingArtifact {
            what: "hand dataset",
            path: hands_path,
            hint: "make-data",
        });
    }
    let (images, _) = load_hands(&hands_path)?;
    let setup = load_denoiser_inputs(cfg, root)?;

    let dir = RunDir::create(&root.join("ablate"))?;
    let config_path = dir.write_config(cfg)?;

    let mut rows = Vec::new();
    for &grid in &cfg.ablate.codebook_grids {
        let (mse, usage) = codebook_variant(cfg, &images, grid)?;
        rows.push(AblationRow {
            variant: format!("codebook-grid-{grid}"),
            holdout_mse: Some(mse),
            usage: Some(usage),
            hmv: None,
        });
    }
    for (variant, zero_head) in [("head-stream-on", false), ("head-stream-off", true)] {
        let hmv = head_variant_hmv(cfg, &setup, zero_head)?;
        rows.push(AblationRow {
            variant: variant.into(),
            holdout_mse: None,
            usage: None,
            hmv: Some(hmv),
        });
    }

    let table_path = dir.file("ablation.csv");
    let mut csv = csv_create(&table_path, ABLATION_SCHEMA, ABLATION_HEADER)?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for row in &rows {
        csv.write_record(&[
            row.variant.clone(),
            cell(row.holdout_mse),
            cell(row.usage),
            cell(row.hmv),
        ])?;
    }
    csv.flush()?;
    drop(csv);

    dir.write_manifest(
        cfg.seed,
        &[hands_path, setup.clips_path.clone(), setup.codebook_path.clone()],
        &[config_path, table_path],
    )?;
    Ok(rows)
}

/// Train the denoiser twice at the ablation budget — once as configured,
/// once with the head gates forced shut in both training and sampling —
/// and return the mean generated head-motion variance of each:
/// `(with_head_stream, without_head_stream)`.
///
/// The pose maps deliberately never draw the head, so a model whose head
/// gates are shut has no frame-aligned signal telling it *when* the head
/// sits high or low; its samples should keep the head close to the
/// reference position while the intact model swings it with the rhythm.
pub fn head_stream_ablation(cfg: &RunConfig, root: &Path) -> Result<(f64, f64), HarnessError> {
    cfg.validate()?;
    let setup = load_denoiser_inputs(cfg, root)?;
    let on = head_variant_hmv(cfg, &setup, false)?;
    let off = head_variant_hmv(cfg, &setup, true)?;
    Ok((on, off))
}

fn zero_heads(bundle: &mut ConditioningBundle) {
    for site in bundle.masks.values_mut() {
        site.head =
            RegionMask::zeros(site.head.batch(), site.head.n_latent(), site.head.region());
    }
}

fn codebook_variant(
    cfg: &RunConfig,
    images: &Arr,
    grid: usize,
) -> Result<(f64, f64), HarnessError> {
    let mut mcfg = cfg.codebook.model.clone();
    mcfg.grid = grid;
    mcfg.validate()?;
    let n = images.shape()[0];
    let holdout = cfg.data.hands.holdout.min(n.saturating_sub(1));
    let train_n = n - holdout;

    let mut params = ParamSet::new();
    register_codebook_model(&mut params, &mcfg, name_seed(cfg.seed, "codebook.init"));
    let mut opt = Adam::new(cfg.codebook.lr);
    for step in 0..cfg.ablate.codebook_steps {
        let mut rng = init_rng(cfg.seed, &format!("codebook.batch.{step}"));
        let rows: Vec<usize> =
            (0..cfg.codebook.batch).map(|_| rng.gen_range(0..train_n)).collect();
        let batch = gather_rows(images, &rows);
        if step == 0 {
            let vectors = encoder_vectors(&params, &mcfg, &batch);
            seed_codebook_from_vectors(&mut params, &vectors, name_seed(cfg.seed, "codebook.seed"));
        }
        let report = vq_training_step(&mut params, &mut opt, &mcfg, &batch);
        if !report.total.is_finite() {
            return Err(HarnessError::NanAbort {
                stage: format!("ablate codebook-grid-{grid}"),
                step: step + 1,
            });
        }
    }
    let mse = holdout_mse(&params, &mcfg, images, train_n);
    let stats = holdout_code_stats(&params, &mcfg, images, train_n);
    Ok((mse, stats.usage()))
}

fn head_variant_hmv(
    cfg: &RunConfig,
    setup: &DenoiserSetup,
    zero_head: bool,
) -> Result<f64, HarnessError> {
    let dcfg = &cfg.denoiser;
    let a = &cfg.ablate;
    let n_clips = setup.clips.len();
    let frames = dcfg.frames;
    let tag = if zero_head { "shut" } else { "open" };

    let mut params = ParamSet::new();
    register_denoiser(&mut params, dcfg, name_seed(cfg.seed, "denoiser.init"));

    let dropout1 =
        GuidanceDropout { p_uncond: cfg.stage1.p_uncond, p_image_only: cfg.stage1.p_image_only };
    let mut opt = Adam::new(cfg.stage1.lr);
    for step in 0..a.stage1_steps {
        let mut rng = init_rng(cfg.seed, &format!("ablate.stage1.{step}"));
        let rows: Vec<(usize, usize)> = (0..cfg.stage1.batch)
            .map(|_| (rng.gen_range(0..n_clips), rng.gen_range(0..frames)))
            .collect();
        let (mut bundle, z0, pose) = build_bundle(&setup.clips, &setup.hand_tok, dcfg, &rows)?;
        if zero_head {
            zero_heads(&mut bundle);
        }
        let report = train_step_stage1(
            &mut params, &mut opt, dcfg, &setup.sched, &z0, &pose, &bundle, &dropout1, &mut rng,
        )?;
        if !report.loss.is_finite() {
            return Err(HarnessError::NanAbort {
                stage: format!("ablate stage1 (head gates {tag})"),
                step: step + 1,
            });
        }
    }

    freeze_for_stage2(&mut params);
    let dropout2 =
        GuidanceDropout { p_uncond: cfg.stage2.p_uncond, p_image_only: cfg.stage2.p_image_only };
    let mut opt = Adam::new(cfg.stage2.lr);
    for step in 0..a.stage2_steps {
        let mut rng = init_rng(cfg.seed, &format!("ablate.stage2.{step}"));
        let clip = rng.gen_range(0..n_clips);
        let rows: Vec<(usize, usize)> = (0..frames).map(|f| (clip, f)).collect();
        let (mut bundle, z0, pose) = build_bundle(&setup.clips, &setup.hand_tok, dcfg, &rows)?;
        if zero_head {
            zero_heads(&mut bundle);
        }
        let report = train_step_stage2(
            &mut params, &mut opt, dcfg, &setup.sched, &z0, &pose, &bundle, &dropout2, &mut rng,
        )?;
        if !report.loss.is_finite() {
            return Err(HarnessError::NanAbort {
                stage: format!("ablate stage2 (head gates {tag})"),
                step: step + 1,
            });
        }
    }

    // Sample with the same guidance and seeds for both variants and score
    // the head travel from the generated content alone.
    let guide = GuidanceConfig {
        image_scale: cfg.generate.image_scale,
        audio_scale: cfg.generate.audio_scale,
    };
    let mut total = 0.0;
    for i in 0..a.eval_clips {
        let clip = i % n_clips;
        let rows: Vec<(usize, usize)> = (0..frames).map(|f| (clip, f)).collect();
        let (mut bundle, _, pose) = build_bundle(&setup.clips, &setup.hand_tok, dcfg, &rows)?;
        if zero_head {
            zero_heads(&mut bundle);
        }
        let mut rng = init_rng(cfg.seed, &format!("ablate.sample.{i}"));
        let z = sample_clip(&params, dcfg, &setup.sched, &pose, &bundle, &guide, true, &mut rng)?;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(HarnessError::NanAbort {
                stage: format!("ablate sampling (head gates {tag})"),
                step: i,
            });
        }
        total += hmv(&latent_com(&z, &[0])?)?;
    }
    Ok(total / a.eval_clips as f64)
}
