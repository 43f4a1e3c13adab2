//! Cross-reenactment: animate one clip's identity (reference frame, hand
//! tokens) with another clip's motion and audio. Driving skeletons are
//! retargeted onto the reference body before pose maps and attention gates
//! are rendered, so mismatched proportions do not smear the output.
//!
//! Outputs land in `<root>/generate`: the sampled latent videos in one
//! container, a PNG contact sheet per clip, and a motion-metric CSV whose
//! scores are computed from blob centroids recovered out of the generated
//! latents themselves.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Axis, IxDyn};
use serde_json::json;

use super::config::RunConfig;
use super::data::masks_for_skeletons;
use super::metrics::{hkv, hmv, latent_com, MetricReport};
use super::train::{load_denoiser_inputs, TrainStage};
use super::{csv_create, stage_dir, HarnessError, RunDir};
use crate::codebook::{hand_tokens, load_codebook_checkpoint, CodeStats};
use crate::container::{sha256_file, Container};
use crate::denoiser::{
    load_denoiser_checkpoint, rhythm_window_rows, sample_clip, ConditioningBundle, Stage,
};
use crate::diffusion::GuidanceConfig;
use crate::skeleton::{
    calibrate, read_keypoints, render_pose_map, write_keypoints, SegmentGraph, Skeleton2D,
};
use crate::tensor::{init_rng, name_seed};
use crate::Arr;

const METRICS_SCHEMA: &str = "generate-metrics.v1";
const METRICS_HEADER: &[&str] = &[
    "clip", "ref_clip", "drive_clip", "seed", "calibrated", "hkv", "hmv", "recon_mse",
    "codebook_usage", "codebook_perplexity",
];
const REPORT_SCHEMA: &str = "calibration-report.v1";

/// One clip to synthesise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateRequest {
    /// Clip providing the identity: reference frame and hand crop.
    pub ref_clip: usize,
    /// Clip providing the motion script and the audio.
    pub drive_clip: usize,
    pub seed: u64,
    /// Retarget driving skeletons onto the reference proportions first.
    pub calibrate: bool,
    pub guide: GuidanceConfig,
}

/// The default request list: each output reenacts clip `i` with the motion
/// and audio of its neighbour, under the configured guidance scales.
pub fn default_requests(cfg: &RunConfig) -> Vec<GenerateRequest> {
    let n = cfg.data.clips.clips;
    (0..cfg.generate.clips)
        .map(|i| GenerateRequest {
            ref_clip: i % n,
            drive_clip: (i + 1) % n,
            seed: name_seed(cfg.seed, &format!("generate.{i}")),
            calibrate: cfg.generate.calibrate,
            guide: GuidanceConfig {
                image_scale: cfg.generate.image_scale,
                audio_scale: cfg.generate.audio_scale,
            },
        })
        .collect()
}

#[derive(Debug)]
pub struct GeneratedClip {
    pub request: GenerateRequest,
    pub grid_png: PathBuf,
    pub report: MetricReport,
    /// Whether retargeting was actually applied.
    pub calibrated: bool,
    /// Why it was not, when it was not.
    pub note: Option<String>,
}

#[derive(Debug)]
pub struct GenerateOutcome {
    pub run_dir: PathBuf,
    /// Container holding every sampled latent video.
    pub output: PathBuf,
    pub output_sha256: String,
    pub metrics_csv: PathBuf,
    pub clips: Vec<GeneratedClip>,
}

/// Sample every requested clip with the trained checkpoints under `root`.
pub fn run_generate(
    cfg: &RunConfig,
    requests: &[GenerateRequest],
    root: &Path,
) -> Result<GenerateOutcome, HarnessError> {
    cfg.validate()?;
    if requests.is_empty() {
        return Err(HarnessError::Config("nothing to generate".into()));
    }
    let setup = load_denoiser_inputs(cfg, root)?;
    let stage2_path = stage_dir(root, TrainStage::Stage2).join("checkpoint.mar");
    if !stage2_path.is_file() {
        return Err(HarnessError::MissingArtifact {
            what: "temporal-stage checkpoint",
            path: stage2_path,
            hint: "train --stage stage2",
        });
    }
    let ck = load_denoiser_checkpoint(&stage2_path, Some(Stage::Stage2))?;
    if ck.config != cfg.denoiser {
        return Err(HarnessError::Config(
            "temporal-stage checkpoint does not match the configured model".into(),
        ));
    }
    let cb = load_codebook_checkpoint(&setup.codebook_path)?;

    let dcfg = &cfg.denoiser;
    let clips = &setup.clips;
    let (s, ch, f, t) = (dcfg.latent_size, dcfg.latent_channels, dcfg.frames, dcfg.audio_tokens);
    for r in requests {
        if r.ref_clip >= clips.len() || r.drive_clip >= clips.len() {
            return Err(HarnessError::Config(format!(
                "request references clip {} / {} but the dataset holds {}",
                r.ref_clip,
                r.drive_clip,
                clips.len()
            )));
        }
        if !r.guide.image_scale.is_finite() || !r.guide.audio_scale.is_finite() {
            return Err(HarnessError::Config("guidance scales must be finite".into()));
        }
    }

    let dir = RunDir::create(&root.join("generate"))?;
    let config_path = dir.write_config(cfg)?;
    let out_path = dir.file("generated.mar");
    let metrics_path = dir.file("metrics.csv");

    let mut meta_rows = Vec::new();
    let mut outputs = vec![config_path.clone()];
    let mut videos: Vec<(String, Arr)> = Vec::new();
    let mut generated = Vec::new();
    let mut csv = csv_create(&metrics_path, METRICS_SCHEMA, METRICS_HEADER)?;

    for (i, req) in requests.iter().enumerate() {
        // Retarget the driving skeletons onto the reference body.
        let ref_skel = &clips.refs[req.ref_clip];
        let driving = &clips.frames[req.drive_clip];
        let (skels, calibrated, note): (Vec<Skeleton2D>, bool, Option<String>) = if req.calibrate {
            match retarget(ref_skel, driving) {
                Ok(skels) => (skels, true, None),
                Err(e) => (
                    driving.clone(),
                    false,
                    Some(format!("calibration skipped, using raw driving pose: {e}")),
                ),
            }
        } else {
            (driving.clone(), false, Some("calibration disabled by request".into()))
        };

        // Assemble conditioning: identity from the reference clip, motion
        // and audio from the driving clip.
        let mut pose = Arr::zeros(IxDyn(&[f, 3, s, s]));
        let mut ref_latent = Arr::zeros(IxDyn(&[f, ch, s, s]));
        let mut lip = Arr::zeros(IxDyn(&[f, t, dcfg.feat_dim]));
        let tok_n = setup.hand_tok.shape()[1];
        let mut tokens = Arr::zeros(IxDyn(&[f, tok_n, dcfg.code_dim]));
        for fi in 0..f {
            pose.index_axis_mut(Axis(0), fi).assign(&render_pose_map(&skels[fi], (s, s)));
            ref_latent
                .index_axis_mut(Axis(0), fi)
                .assign(&clips.ref_latents.index_axis(Axis(0), req.ref_clip));
            lip.index_axis_mut(Axis(0), fi)
                .assign(&clips.pooled_audio.index_axis(Axis(0), req.drive_clip));
            tokens
                .index_axis_mut(Axis(0), fi)
                .assign(&setup.hand_tok.index_axis(Axis(0), req.ref_clip));
        }
        let pooled = clips
            .pooled_audio
            .index_axis(Axis(0), req.drive_clip)
            .to_owned()
            .insert_axis(Axis(0));
        let frame_rows: Vec<(usize, usize)> = (0..f).map(|fi| (0, fi)).collect();
        let rhythm_rows = rhythm_window_rows(&frame_rows, f, t, dcfg.rhythm_window);
        let mut masks = BTreeMap::new();
        let skel_refs: Vec<&Skeleton2D> = skels.iter().collect();
        for side in [s, s / 2] {
            masks.insert(side, masks_for_skeletons(&skel_refs, s, side)?);
        }
        let bundle = ConditioningBundle {
            ref_latent,
            lip_context: lip,
            pooled_audio: pooled,
            rhythm_rows,
            hand_tokens: tokens,
            masks,
        };
        bundle.validate(dcfg, f)?;

        let mut rng = init_rng(req.seed, "generate.sample");
        let z = sample_clip(&ck.params, dcfg, &setup.sched, &pose, &bundle, &req.guide, true, &mut rng)?;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(HarnessError::NanAbort { stage: "generate".into(), step: i });
        }

        // Score the sample from its own content: blob centroids give the
        // motion tracks, the reference crop gives the code statistics.
        let head_track = latent_com(&z, &[0])?;
        let hand_track = latent_com(&z, &[1, 2])?;
        let gt = clips.latents.index_axis(Axis(0), req.drive_clip);
        let recon_mse = z
            .iter()
            .zip(gt.iter())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / z.len() as f64;
        let crop = clips
            .hand_crops
            .index_axis(Axis(0), req.ref_clip)
            .to_owned()
            .insert_axis(Axis(0));
        let (_, codes) = hand_tokens(&cb.params, &cb.config, &crop);
        let mut stats = CodeStats::new(cb.config.codewords);
        stats.record(codes.iter().copied());

        let mut meta = BTreeMap::new();
        meta.insert("ref_clip".into(), req.ref_clip.to_string());
        meta.insert("drive_clip".into(), req.drive_clip.to_string());
        meta.insert("seed".into(), req.seed.to_string());
        meta.insert("image_scale".into(), req.guide.image_scale.to_string());
        meta.insert("audio_scale".into(), req.guide.audio_scale.to_string());
        meta.insert("calibrated".into(), calibrated.to_string());
        let report = MetricReport {
            hkv: hkv(&hand_track)?,
            hmv: hmv(&head_track)?,
            recon_mse,
            codebook_usage: stats.usage(),
            codebook_perplexity: stats.perplexity(),
            meta,
        };
        report.validate()?;

        csv.write_record(&[
            i.to_string(),
            req.ref_clip.to_string(),
            req.drive_clip.to_string(),
            req.seed.to_string(),
            calibrated.to_string(),
            format!("{:.6}", report.hkv),
            format!("{:.6}", report.hmv),
            format!("{:.6}", report.recon_mse),
            format!("{:.4}", report.codebook_usage),
            format!("{:.3}", report.codebook_perplexity),
        ])?;
        csv.flush()?;

        let grid_png = dir.file(&format!("clip_{i:02}.png"));
        write_frame_grid(&grid_png, &z)?;
        outputs.push(grid_png.clone());
        videos.push((format!("clip_{i:02}"), z));
        meta_rows.push(json!({
            "ref_clip": req.ref_clip,
            "drive_clip": req.drive_clip,
            "seed": req.seed,
            "image_scale": req.guide.image_scale,
            "audio_scale": req.guide.audio_scale,
            "calibrated": calibrated,
            "note": note,
        }));
        generated.push(GeneratedClip { request: *req, grid_png, report, calibrated, note });
    }
    drop(csv);

    let mut container = Container::new(
        "latent-video",
        json!({ "clips": meta_rows, "frames": f, "latent_size": s }),
    );
    for (name, z) in videos {
        container.push(&name, z);
    }
    container.write(&out_path)?;
    outputs.push(out_path.clone());
    outputs.push(metrics_path.clone());
    dir.write_manifest(
        cfg.seed,
        &[setup.clips_path.clone(), setup.codebook_path.clone(), stage2_path],
        &outputs,
    )?;

    Ok(GenerateOutcome {
        run_dir: dir.path().to_path_buf(),
        output_sha256: sha256_file(&out_path)?,
        output: out_path,
        metrics_csv: metrics_path,
        clips: generated,
    })
}

fn retarget(
    reference: &Skeleton2D,
    driving: &[Skeleton2D],
) -> Result<Vec<Skeleton2D>, crate::skeleton::SkeletonError> {
    let graph = SegmentGraph::from_skeleton(reference)?;
    driving
        .iter()
        .map(|frame| calibrate(reference, frame, &graph).map(|(skel, _)| skel))
        .collect()
}

/// Render a latent video `[F, C, s, s]` as a contact sheet: head channel in
/// red, hand channels in green, the static texture channel in blue.
pub fn write_frame_grid(path: &Path, latents: &Arr) -> Result<(), HarnessError> {
    let sh = latents.shape().to_vec();
    if sh.len() != 4 || sh[1] < 3 {
        return Err(HarnessError::Config(format!(
            "expected a latent video [frames, channels>=3, s, s], got {sh:?}"
        )));
    }
    let (f, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    const SCALE: usize = 4;
    const GAP: usize = 2;
    let cols = (f as f64).sqrt().ceil() as usize;
    let rows = f.div_ceil(cols);
    let (ph, pw) = (rows * (h * SCALE + GAP) + GAP, cols * (w * SCALE + GAP) + GAP);
    let mut img = image::RgbImage::from_pixel(pw as u32, ph as u32, image::Rgb([24, 24, 24]));
    let shade = |v: f32| (v.clamp(0.0, 2.0) * 127.5) as u8;
    for fi in 0..f {
        let (row, col) = (fi / cols, fi % cols);
        let (oy, ox) = (GAP + row * (h * SCALE + GAP), GAP + col * (w * SCALE + GAP));
        for y in 0..h {
            for x in 0..w {
                let r = shade(latents[[fi, 0, y, x]]);
                let g = shade(latents[[fi, 1, y, x]].max(latents[[fi, 2, y, x]]));
                let b = if c > 3 { shade(latents[[fi, 3, y, x]] + 1.0) } else { 0 };
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        img.put_pixel(
                            (ox + x * SCALE + dx) as u32,
                            (oy + y * SCALE + dy) as u32,
                            image::Rgb([r, g, b]),
                        );
                    }
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

#[derive(Debug)]
pub struct CalibrationFileOutcome {
    pub out: PathBuf,
    pub frames: usize,
    pub report: Option<PathBuf>,
}

/// Retarget every frame of a driving keypoint file onto the first frame of
/// a reference keypoint file, writing the result (and optionally a per-frame
/// parameter report) next to nothing in particular — the caller picks paths.
pub fn calibrate_keypoint_file(
    ref_path: &Path,
    drive_path: &Path,
    out_path: &Path,
    report_path: Option<&Path>,
) -> Result<CalibrationFileOutcome, HarnessError> {
    let (ref_doc, ref_frames) = read_keypoints(ref_path)?;
    let (_, drive_frames) = read_keypoints(drive_path)?;
    let reference = ref_frames
        .first()
        .ok_or_else(|| HarnessError::Config(format!("{} holds no frames", ref_path.display())))?;
    if drive_frames.is_empty() {
        return Err(HarnessError::Config(format!("{} holds no frames", drive_path.display())));
    }
    let graph = SegmentGraph::from_skeleton(reference)?;

    let mut out_frames = Vec::with_capacity(drive_frames.len());
    let mut rows = Vec::with_capacity(drive_frames.len());
    for (fi, frame) in drive_frames.iter().enumerate() {
        let (skel, params) = calibrate(reference, frame, &graph)?;
        rows.push([
            fi.to_string(),
            format!("{:.6}", params.r_x),
            format!("{:.6}", params.r_y),
            format!("{:.6}", params.delta.0),
            format!("{:.6}", params.delta.1),
            params.rho.len().to_string(),
            params.skipped.len().to_string(),
        ]);
        out_frames.push(skel);
    }
    write_keypoints(out_path, (ref_doc.frame_size[0], ref_doc.frame_size[1]), &out_frames)?;

    let report = match report_path {
        Some(p) => {
            let mut csv = csv_create(
                p,
                REPORT_SCHEMA,
                &["frame", "r_x", "r_y", "delta_x", "delta_y", "segments", "skipped"],
            )?;
            for row in &rows {
                csv.write_record(row)?;
            }
            csv.flush()?;
            Some(p.to_path_buf())
        }
        None => None,
    };

    Ok(CalibrationFileOutcome { out: out_path.to_path_buf(), frames: out_frames.len(), report })
}
