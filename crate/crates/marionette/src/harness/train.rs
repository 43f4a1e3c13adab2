//! The three training runs: hand codebook, spatial denoiser, temporal
//! denoiser. Each owns one stage directory under the output root with a
//! config echo, a versioned loss CSV, a checkpoint, and a manifest.
//!
//! Every batch and every stochastic draw is seeded per step, so an
//! interrupted run resumed from its last checkpoint reproduces the exact
//! byte-for-byte end state of an uninterrupted one.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Axis, IxDyn};
use rand::Rng;

use super::config::RunConfig;
use super::data::{build_bundle, clip_hand_tokens, load_clips, load_hands, ClipSet, CLIPS_FILE, HANDS_FILE};
use super::{csv_create, csv_read, data_dir, stage_dir, HarnessError, RunDir};
use crate::codebook::{
    load_codebook_checkpoint, reconstruct, reconstruction_mse, register_codebook_model,
    save_codebook_checkpoint, seed_codebook_from_vectors, vq_training_step, CodeStats,
    CodebookConfig,
};
use crate::denoiser::{
    freeze_for_stage2, load_denoiser_checkpoint, register_denoiser, save_denoiser_checkpoint,
    train_step_stage1, train_step_stage2, DenoiserConfig, GuidanceDropout, Stage,
};
use crate::diffusion::{build_schedule, NoiseSchedule, ScheduleKind};
use crate::tensor::{init_rng, name_seed, Adam, ParamSet};
use crate::Arr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    /// Vector-quantised hand autoencoder.
    Codebook,
    /// Spatial denoiser on independent frames.
    Stage1,
    /// Frame-axis attention on whole clips.
    Stage2,
}

impl TrainStage {
    pub fn name(&self) -> &'static str {
        match self {
            TrainStage::Codebook => "codebook",
            TrainStage::Stage1 => "stage1",
            TrainStage::Stage2 => "stage2",
        }
    }
}

impl fmt::Display for TrainStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "codebook" => Ok(TrainStage::Codebook),
            "stage1" => Ok(TrainStage::Stage1),
            "stage2" => Ok(TrainStage::Stage2),
            other => Err(format!(
                "unknown stage `{other}` (expected codebook, stage1 or stage2)"
            )),
        }
    }
}

/// Held-out reconstruction stats for the codebook stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodebookEval {
    /// Held-out MSE when this invocation started (untrained weights on a
    /// fresh run, the loaded checkpoint on a resumed one).
    pub initial_mse: f64,
    pub final_mse: f64,
    pub usage: f64,
    pub perplexity: f64,
    pub active: usize,
}

/// What one `run_training` invocation did.
#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Optimisation steps executed by this invocation.
    pub steps_run: usize,
    /// Step counter stored in the checkpoint afterwards.
    pub total_steps: usize,
    /// Loss of the first/last step this invocation ran (or the values from
    /// the loss CSV when there was nothing left to do).
    pub initial_loss: f64,
    pub final_loss: f64,
    pub resumed: bool,
    pub eval: Option<CodebookEval>,
}

/// Train one stage to its configured step budget, resuming from the stage
/// directory's checkpoint when one exists.
pub fn run_training(
    cfg: &RunConfig,
    stage: TrainStage,
    out_root: &Path,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    match stage {
        TrainStage::Codebook => train_codebook(cfg, out_root, None),
        TrainStage::Stage1 | TrainStage::Stage2 => train_denoiser(cfg, stage, out_root, None),
    }
}

fn require_artifact(
    path: PathBuf,
    what: &'static str,
    hint: &'static str,
) -> Result<PathBuf, HarnessError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(HarnessError::MissingArtifact { what, path, hint })
    }
}

fn weights_finite(params: &ParamSet) -> bool {
    params
        .names()
        .all(|name| params.get_by_name(name).is_some_and(|v| v.iter().all(|x| x.is_finite())))
}

/// Open the loss CSV for a (possibly resumed) run. Rows recorded after the
/// checkpoint we are resuming from are dropped, so re-run steps appear
/// exactly once.
fn reopen_loss_csv(
    path: &Path,
    schema: &str,
    header: &[&str],
    start_step: usize,
) -> Result<csv::Writer<std::fs::File>, HarnessError> {
    if !path.is_file() {
        return csv_create(path, schema, header);
    }
    let (found, rows) = csv_read(path, schema)?;
    if found != header {
        return Err(HarnessError::Config(format!(
            "{} has columns {found:?}, expected {header:?}",
            path.display()
        )));
    }
    let mut w = csv_create(path, schema, header)?;
    for row in rows {
        let step: usize = row
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| HarnessError::Config(format!("{}: bad step column", path.display())))?;
        if step <= start_step {
            w.write_record(&row)?;
        }
    }
    Ok(w)
}

fn first_and_last_losses(path: &Path, schema: &str) -> Result<(f64, f64), HarnessError> {
    let (_, rows) = csv_read(path, schema)?;
    let parse = |row: &Vec<String>| -> Option<f64> { row.get(1).and_then(|s| s.parse().ok()) };
    match (rows.first().and_then(parse), rows.last().and_then(parse)) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(HarnessError::Config(format!("{} holds no loss rows", path.display()))),
    }
}

// ---------------------------------------------------------------------------
// Codebook stage
// ---------------------------------------------------------------------------

const CODEBOOK_LOSS_SCHEMA: &str = "codebook-loss.v1";
const CODEBOOK_LOSS_HEADER: &[&str] = &["step", "total", "recon", "codebook", "commitment"];
const CODEBOOK_EVAL_SCHEMA: &str = "codebook-eval.v1";

/// Evaluation batch size; keeps peak memory flat on large hold-out sets.
const EVAL_CHUNK: usize = 16;

pub(super) fn gather_rows(images: &Arr, rows: &[usize]) -> Arr {
    let mut shape = images.shape().to_vec();
    shape[0] = rows.len();
    let mut out = Arr::zeros(IxDyn(&shape));
    for (bi, &r) in rows.iter().enumerate() {
        out.index_axis_mut(Axis(0), bi).assign(&images.index_axis(Axis(0), r));
    }
    out
}

/// Mean reconstruction MSE over a row range, evaluated in small chunks.
pub(super) fn holdout_mse(
    params: &ParamSet,
    cfg: &CodebookConfig,
    images: &Arr,
    from: usize,
) -> f64 {
    let n = images.shape()[0];
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = from;
    while start < n {
        let stop = (start + EVAL_CHUNK).min(n);
        let rows: Vec<usize> = (start..stop).collect();
        let batch = gather_rows(images, &rows);
        total += reconstruction_mse(params, cfg, &batch) * rows.len() as f64;
        count += rows.len();
        start = stop;
    }
    total / count.max(1) as f64
}

pub(super) fn holdout_code_stats(
    params: &ParamSet,
    cfg: &CodebookConfig,
    images: &Arr,
    from: usize,
) -> CodeStats {
    let n = images.shape()[0];
    let mut stats = CodeStats::new(cfg.codewords);
    let mut start = from;
    while start < n {
        let stop = (start + EVAL_CHUNK).min(n);
        let rows: Vec<usize> = (start..stop).collect();
        let (_, codes) = reconstruct(params, cfg, &gather_rows(images, &rows));
        stats.record(codes.iter().copied());
        start = stop;
    }
    stats
}

fn train_codebook(
    cfg: &RunConfig,
    root: &Path,
    interrupt_after: Option<usize>,
) -> Result<TrainOutcome, HarnessError> {
    let hands_path = require_artifact(
        data_dir(root).join(HANDS_FILE),
        "hand dataset",
        "make-data",
    )?;
    let (images, _) = load_hands(&hands_path)?;
    let n = images.shape()[0];
    let holdout = cfg.data.hands.holdout.min(n.saturating_sub(1));
    let train_n = n - holdout;

    let dir = RunDir::create(&stage_dir(root, TrainStage::Codebook))?;
    let config_path = dir.write_config(cfg)?;
    let ckpt_path = dir.file("checkpoint.mar");
    let loss_path = dir.file("loss.csv");
    let tcfg = &cfg.codebook;
    let mcfg = &tcfg.model;

    let (mut params, mut opt, start_step, resumed) = if ckpt_path.is_file() {
        let ck = load_codebook_checkpoint(&ckpt_path)?;
        if ck.config != *mcfg {
            return Err(HarnessError::Config(format!(
                "checkpoint in {} was trained with a different model config",
                dir.path().display()
            )));
        }
        let mut opt = Adam::new(tcfg.lr);
        opt.set_step_count(ck.adam_step);
        (ck.params, opt, ck.step as usize, true)
    } else {
        let mut params = ParamSet::new();
        register_codebook_model(&mut params, mcfg, name_seed(cfg.seed, "codebook.init"));
        (params, Adam::new(tcfg.lr), 0, false)
    };

    let initial_mse = holdout_mse(&params, mcfg, &images, train_n);

    if start_step >= tcfg.steps {
        let (first, last) = first_and_last_losses(&loss_path, CODEBOOK_LOSS_SCHEMA)?;
        let stats = holdout_code_stats(&params, mcfg, &images, train_n);
        return Ok(TrainOutcome {
            run_dir: dir.path().to_path_buf(),
            checkpoint: ckpt_path,
            steps_run: 0,
            total_steps: start_step,
            initial_loss: first,
            final_loss: last,
            resumed,
            eval: Some(CodebookEval {
                initial_mse,
                final_mse: initial_mse,
                usage: stats.usage(),
                perplexity: stats.perplexity(),
                active: stats.active(),
            }),
        });
    }

    let mut csv = reopen_loss_csv(&loss_path, CODEBOOK_LOSS_SCHEMA, CODEBOOK_LOSS_HEADER, start_step)?;
    let mut first_loss = None;
    let mut last_loss = 0.0f64;
    let mut interrupted = false;

    for step in start_step..tcfg.steps {
        let mut rng = init_rng(cfg.seed, &format!("codebook.batch.{step}"));
        let rows: Vec<usize> = (0..tcfg.batch).map(|_| rng.gen_range(0..train_n)).collect();
        let batch = gather_rows(&images, &rows);
        if step == 0 {
            // Data-dependent start: spread the codewords over real encoder
            // outputs so early training does not collapse onto a few rows.
            let vectors = crate::codebook::encoder_vectors(&params, mcfg, &batch);
            seed_codebook_from_vectors(&mut params, &vectors, name_seed(cfg.seed, "codebook.seed"));
        }
        let report = vq_training_step(&mut params, &mut opt, mcfg, &batch);
        if !report.total.is_finite() {
            return Err(HarnessError::NanAbort { stage: "codebook".into(), step: step + 1 });
        }
        first_loss.get_or_insert(report.total);
        last_loss = report.total;
        csv.write_record(&[
            (step + 1).to_string(),
            format!("{:.6}", report.total),
            format!("{:.6}", report.recon),
            format!("{:.6}", report.codebook),
            format!("{:.6}", report.commitment),
        ])?;
        csv.flush()?;

        let done = step + 1 == tcfg.steps;
        if (step + 1) % tcfg.checkpoint_every == 0 || done {
            if !weights_finite(&params) {
                return Err(HarnessError::NanAbort { stage: "codebook".into(), step: step + 1 });
            }
            save_codebook_checkpoint(&ckpt_path, &params, mcfg, (step + 1) as u64, opt.step_count())?;
        }
        if interrupt_after == Some(step + 1) && !done {
            interrupted = true;
            break;
        }
    }
    drop(csv);

    if interrupted {
        // Simulated kill: leave the directory exactly as a dead process
        // would — checkpoint at the last multiple, no eval, no manifest.
        return Ok(TrainOutcome {
            run_dir: dir.path().to_path_buf(),
            checkpoint: ckpt_path,
            steps_run: interrupt_after.unwrap() - start_step,
            total_steps: interrupt_after.unwrap(),
            initial_loss: first_loss.unwrap_or(f64::NAN),
            final_loss: last_loss,
            resumed,
            eval: None,
        });
    }

    let final_mse = holdout_mse(&params, mcfg, &images, train_n);
    let stats = holdout_code_stats(&params, mcfg, &images, train_n);
    let eval_path = dir.file("eval.csv");
    let mut eval_csv = csv_create(
        &eval_path,
        CODEBOOK_EVAL_SCHEMA,
        &["initial_mse", "final_mse", "usage", "perplexity", "active"],
    )?;
    eval_csv.write_record(&[
        format!("{initial_mse:.6}"),
        format!("{final_mse:.6}"),
        format!("{:.4}", stats.usage()),
        format!("{:.3}", stats.perplexity()),
        stats.active().to_string(),
    ])?;
    eval_csv.flush()?;
    drop(eval_csv);

    dir.write_manifest(
        cfg.seed,
        &[hands_path],
        &[config_path, ckpt_path.clone(), loss_path, eval_path],
    )?;

    Ok(TrainOutcome {
        run_dir: dir.path().to_path_buf(),
        checkpoint: ckpt_path,
        steps_run: tcfg.steps - start_step,
        total_steps: tcfg.steps,
        initial_loss: first_loss.unwrap_or(f64::NAN),
        final_loss: last_loss,
        resumed,
        eval: Some(CodebookEval {
            initial_mse,
            final_mse,
            usage: stats.usage(),
            perplexity: stats.perplexity(),
            active: stats.active(),
        }),
    })
}

// ---------------------------------------------------------------------------
// Denoiser stages
// ---------------------------------------------------------------------------

const STAGE1_LOSS_SCHEMA: &str = "stage1-loss.v1";
const STAGE2_LOSS_SCHEMA: &str = "stage2-loss.v1";
const DENOISER_LOSS_HEADER: &[&str] = &["step", "loss"];

/// Everything both denoiser stages need in memory.
pub(super) struct DenoiserSetup {
    pub clips: ClipSet,
    pub hand_tok: Arr,
    pub sched: NoiseSchedule,
    pub clips_path: PathBuf,
    pub codebook_path: PathBuf,
}

pub(super) fn load_denoiser_inputs(
    cfg: &RunConfig,
    root: &Path,
) -> Result<DenoiserSetup, HarnessError> {
    let clips_path = require_artifact(
        data_dir(root).join(CLIPS_FILE),
        "clip dataset",
        "make-data",
    )?;
    let codebook_path = require_artifact(
        stage_dir(root, TrainStage::Codebook).join("checkpoint.mar"),
        "codebook checkpoint",
        "train --stage codebook",
    )?;
    let clips = load_clips(&clips_path)?;
    let cb = load_codebook_checkpoint(&codebook_path)?;
    if cb.config != cfg.codebook.model {
        return Err(HarnessError::Config(
            "codebook checkpoint does not match the configured model".into(),
        ));
    }
    let hand_tok = clip_hand_tokens(&cb.params, &cb.config, &clips)?;
    let d = &cfg.denoiser;
    let sched = build_schedule(d.timesteps, d.beta_start, d.beta_end, ScheduleKind::Linear)?;
    Ok(DenoiserSetup { clips, hand_tok, sched, clips_path, codebook_path })
}

fn train_denoiser(
    cfg: &RunConfig,
    stage: TrainStage,
    root: &Path,
    interrupt_after: Option<usize>,
) -> Result<TrainOutcome, HarnessError> {
    let setup = load_denoiser_inputs(cfg, root)?;
    let dcfg = &cfg.denoiser;
    let (scfg, schema, tag) = match stage {
        TrainStage::Stage1 => (&cfg.stage1, STAGE1_LOSS_SCHEMA, Stage::Stage1),
        TrainStage::Stage2 => (&cfg.stage2, STAGE2_LOSS_SCHEMA, Stage::Stage2),
        TrainStage::Codebook => unreachable!("codebook handled separately"),
    };

    let dir = RunDir::create(&stage_dir(root, stage))?;
    let config_path = dir.write_config(cfg)?;
    let ckpt_path = dir.file("checkpoint.mar");
    let loss_path = dir.file("loss.csv");

    let mut inputs = vec![setup.clips_path.clone(), setup.codebook_path.clone()];
    let (mut params, mut opt, start_step, resumed) = if ckpt_path.is_file() {
        let ck = load_denoiser_checkpoint(&ckpt_path, Some(tag))?;
        if ck.config != *dcfg {
            return Err(HarnessError::Config(format!(
                "checkpoint in {} was trained with a different model config",
                dir.path().display()
            )));
        }
        let mut opt = Adam::new(scfg.lr);
        opt.set_step_count(ck.adam_step);
        (ck.params, opt, ck.step as usize, true)
    } else if stage == TrainStage::Stage2 {
        let stage1_path = require_artifact(
            stage_dir(root, TrainStage::Stage1).join("checkpoint.mar"),
            "spatial-stage checkpoint",
            "train --stage stage1",
        )?;
        let ck = load_denoiser_checkpoint(&stage1_path, Some(Stage::Stage1))?;
        if ck.config != *dcfg {
            return Err(HarnessError::Config(
                "spatial-stage checkpoint does not match the configured model".into(),
            ));
        }
        inputs.push(stage1_path);
        (ck.params, Adam::new(scfg.lr), 0, false)
    } else {
        let mut params = ParamSet::new();
        register_denoiser(&mut params, dcfg, name_seed(cfg.seed, "denoiser.init"));
        (params, Adam::new(scfg.lr), 0, false)
    };
    if stage == TrainStage::Stage2 {
        // Trainability flags are not stored in checkpoints; re-freeze on
        // every entry so only the frame-axis attention updates.
        freeze_for_stage2(&mut params);
    }

    if start_step >= scfg.steps {
        let (first, last) = first_and_last_losses(&loss_path, schema)?;
        return Ok(TrainOutcome {
            run_dir: dir.path().to_path_buf(),
            checkpoint: ckpt_path,
            steps_run: 0,
            total_steps: start_step,
            initial_loss: first,
            final_loss: last,
            resumed,
            eval: None,
        });
    }

    let dropout = GuidanceDropout { p_uncond: scfg.p_uncond, p_image_only: scfg.p_image_only };
    let n_clips = setup.clips.len();
    let frames = setup.clips.config.frames;
    let mut csv = reopen_loss_csv(&loss_path, schema, DENOISER_LOSS_HEADER, start_step)?;
    let mut first_loss = None;
    let mut last_loss = 0.0f64;
    let mut interrupted = false;

    for step in start_step..scfg.steps {
        let mut rng = init_rng(cfg.seed, &format!("{}.step.{step}", stage.name()));
        let rows: Vec<(usize, usize)> = match stage {
            TrainStage::Stage1 => (0..scfg.batch)
                .map(|_| (rng.gen_range(0..n_clips), rng.gen_range(0..frames)))
                .collect(),
            _ => {
                let clip = rng.gen_range(0..n_clips);
                (0..frames).map(|f| (clip, f)).collect()
            }
        };
        let (bundle, z0, pose) = build_bundle(&setup.clips, &setup.hand_tok, dcfg, &rows)?;
        let report = match stage {
            TrainStage::Stage1 => train_step_stage1(
                &mut params, &mut opt, dcfg, &setup.sched, &z0, &pose, &bundle, &dropout, &mut rng,
            )?,
            _ => train_step_stage2(
                &mut params, &mut opt, dcfg, &setup.sched, &z0, &pose, &bundle, &dropout, &mut rng,
            )?,
        };
        if !report.loss.is_finite() {
            return Err(HarnessError::NanAbort { stage: stage.name().into(), step: step + 1 });
        }
        first_loss.get_or_insert(report.loss as f64);
        last_loss = report.loss as f64;
        csv.write_record(&[(step + 1).to_string(), format!("{:.6}", report.loss)])?;
        csv.flush()?;

        let done = step + 1 == scfg.steps;
        if (step + 1) % scfg.checkpoint_every == 0 || done {
            if !weights_finite(&params) {
                return Err(HarnessError::NanAbort { stage: stage.name().into(), step: step + 1 });
            }
            save_denoiser_checkpoint(&ckpt_path, &params, dcfg, tag, (step + 1) as u64, opt.step_count())?;
        }
        if interrupt_after == Some(step + 1) && !done {
            interrupted = true;
            break;
        }
    }
    drop(csv);

    if !interrupted {
        dir.write_manifest(cfg.seed, &inputs, &[config_path, ckpt_path.clone(), loss_path])?;
    }

    Ok(TrainOutcome {
        run_dir: dir.path().to_path_buf(),
        checkpoint: ckpt_path,
        steps_run: if interrupted { interrupt_after.unwrap() - start_step } else { scfg.steps - start_step },
        total_steps: if interrupted { interrupt_after.unwrap() } else { scfg.steps },
        initial_loss: first_loss.unwrap_or(f64::NAN),
        final_loss: last_loss,
        resumed,
        eval: None,
    })
}

/// A consistent configuration small enough to train every stage in well
/// under a second; shared by the harness tests.
#[cfg(test)]
pub(super) fn tiny_run_config() -> RunConfig {
    use super::config::{ClipSetConfig, CodebookTrainConfig, HandSetConfig, StageConfig};
    use super::data::SyntheticHandSpec;

    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.data.hands = HandSetConfig {
        n: 24,
        holdout: 8,
        spec: SyntheticHandSpec { image_size: 32, seed: 5, ..SyntheticHandSpec::default() },
    };
    cfg.data.clips = ClipSetConfig {
        clips: 3,
        frames: 6,
        audio_tokens: 20,
        feat_dim: 8,
        ..ClipSetConfig::default()
    };
    cfg.codebook = CodebookTrainConfig {
        model: CodebookConfig {
            codewords: 16,
            code_dim: 8,
            image_size: 32,
            grid: 4,
            in_channels: 3,
            base_width: 8,
            groups: 2,
            bottleneck_attn: false,
            beta: 0.25,
        },
        steps: 20,
        batch: 4,
        lr: 1e-3,
        checkpoint_every: 5,
    };
    cfg.denoiser = DenoiserConfig {
        frames: 6,
        audio_tokens: 20,
        feat_dim: 8,
        code_dim: 8,
        pose_feat: 4,
        ref_dim: 6,
        base_width: 16,
        t_embed_dim: 8,
        d_k: 8,
        rhythm_dim: 8,
        rhythm_hidden: None,
        rhythm_window: 3,
        groups: 4,
        timesteps: 8,
        beta_start: 0.01,
        beta_end: 0.3,
        ..DenoiserConfig::toy()
    };
    cfg.stage1 =
        StageConfig { steps: 6, batch: 2, lr: 1e-3, checkpoint_every: 3, ..StageConfig::default() };
    cfg.stage2 =
        StageConfig { steps: 4, batch: 1, lr: 1e-3, checkpoint_every: 2, ..StageConfig::default() };
    cfg.generate.clips = 1;
    cfg.ablate.codebook_grids = vec![2, 4];
    cfg.ablate.codebook_steps = 8;
    cfg.ablate.stage1_steps = 4;
    cfg.ablate.stage2_steps = 2;
    cfg.ablate.eval_clips = 1;
    cfg.validate().expect("tiny config is consistent");
    cfg
}
