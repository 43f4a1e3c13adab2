//! Run orchestration: configuration, synthetic datasets, training loops,
//! the generation pipeline, motion metrics and the ablation grid.
//!
//! Every run owns one directory. The directory is claimed with a lock file
//! (concurrent runs must use distinct directories), receives the resolved
//! config that produced it, and is sealed with a manifest listing the
//! content hash of every input and output, so a run can be reproduced
//! bit-for-bit on the same platform.

mod ablate;
mod config;
mod data;
mod generate;
mod metrics;
mod train;

pub use ablate::{head_stream_ablation, run_ablation_grid, AblationRow};
pub use config::{
    AblateConfig, ClipSetConfig, CodebookTrainConfig, DataConfig, GenerateConfig, HandSetConfig,
    RunConfig, StageConfig,
};
pub use data::{
    build_bundle, clip_hand_tokens, load_clips, load_hands, make_synthetic_clips,
    make_synthetic_hands, render_hand, run_make_data, sample_hand_shape, ClipMeta, ClipSet,
    HandShape, SyntheticHandSpec, CLIPS_FILE, CLIP_KIND, HANDS_FILE, HAND_KIND,
};
pub use generate::{
    calibrate_keypoint_file, default_requests, run_generate, write_frame_grid,
    CalibrationFileOutcome, GenerateOutcome, GenerateRequest, GeneratedClip,
};
pub use metrics::{
    hand_sequence, head_sequence, hkv, hmv, latent_com, motion_variance, MetricReport,
};
pub use train::{run_training, CodebookEval, TrainOutcome, TrainStage};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::attention::AttnError;
use crate::audio::AudioError;
use crate::codebook::CodebookError;
use crate::container::{sha256_file, ContainerError};
use crate::denoiser::DenoiserError;
use crate::diffusion::DiffusionError;
use crate::skeleton::SkeletonError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MARIONETTE_OUT";

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid or inconsistent configuration; maps to exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// A loss, weight or sample stopped being finite; the run aborts
    /// without touching the last written checkpoint. Maps to exit code 3.
    #[error("{stage} aborted: a non-finite value appeared at step {step}")]
    NanAbort { stage: String, step: usize },
    #[error("{0} is locked by another run (delete the .lock file if that run is gone)")]
    Locked(PathBuf),
    #[error("missing {what}: {path} (run `{hint}` first)")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        hint: &'static str,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Attention(#[from] AttnError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code for this failure: 2 for configuration problems,
    /// 3 for anything that went wrong at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 3,
        }
    }
}

/// Pick the output root: explicit flag, then `MARIONETTE_OUT`, then the
/// configured default.
pub fn resolve_out_root(cli: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(env) = std::env::var_os(OUT_ENV) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from(&cfg.out_root)
}

/// A claimed run directory. Creation takes a lock file that other runs
/// refuse to cross; the lock is released when the value drops.
pub struct RunDir {
    path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<RunDir, HarnessError> {
        fs::create_dir_all(path)?;
        let lock = path.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(RunDir { path: path.to_path_buf(), lock }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(HarnessError::Locked(path.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Echo the exact configuration this run resolved to. A directory that
    /// already holds a different echo belongs to another configuration and
    /// is refused; re-running (resuming) with the same config keeps the
    /// echo bit-identical.
    pub fn write_config(&self, cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
        let path = self.file("config.toml");
        let text = cfg.resolved_toml();
        match fs::read_to_string(&path) {
            Ok(existing) if existing == text => {}
            Ok(_) => {
                return Err(HarnessError::Config(format!(
                    "{} was created with a different configuration; use a fresh \
                     output directory or restore the original config",
                    self.path.display()
                )))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => fs::write(&path, text)?,
            Err(e) => return Err(e.into()),
        }
        Ok(path)
    }

    /// Seal the run: a manifest with the seed and the content hash of every
    /// input and output file.
    pub fn write_manifest(
        &self,
        seed: u64,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<PathBuf, HarnessError> {
        let hash_all = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>, HarnessError> {
            let mut out = BTreeMap::new();
            for p in paths {
                out.insert(p.display().to_string(), sha256_file(p)?);
            }
            Ok(out)
        };
        let doc = serde_json::json!({
            "seed": seed,
            "inputs": hash_all(inputs)?,
            "outputs": hash_all(outputs)?,
        });
        let path = self.file("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&doc).expect("manifest is plain data"))?;
        Ok(path)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Conventional file layout under one output root.
pub fn data_dir(root: &Path) -> PathBuf {
    root.join("data")
}

pub fn stage_dir(root: &Path, stage: TrainStage) -> PathBuf {
    root.join(match stage {
        TrainStage::Codebook => "codebook",
        TrainStage::Stage1 => "stage1",
        TrainStage::Stage2 => "stage2",
    })
}

/// Start a CSV file whose first line pins its schema, e.g.
/// `# schema: stage1-loss.v1`, followed by the header row. Readers refuse
/// files whose schema line does not match what they expect.
pub(crate) fn csv_create(
    path: &Path,
    schema: &str,
    header: &[&str],
) -> Result<csv::Writer<fs::File>, HarnessError> {
    use std::io::Write as _;
    let mut file = fs::File::create(path)?;
    writeln!(file, "# schema: {schema}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    Ok(w)
}

/// Append rows to an existing versioned CSV after checking its schema line.
pub(crate) fn csv_append(path: &Path, schema: &str) -> Result<csv::Writer<fs::File>, HarnessError> {
    // Cheap schema check before blindly appending to a foreign file.
    csv_read(path, schema)?;
    let file = fs::OpenOptions::new().append(true).open(path)?;
    Ok(csv::Writer::from_writer(file))
}

/// Read a versioned CSV: verifies the schema line, returns the header and
/// rows as strings.
pub(crate) fn csv_read(
    path: &Path,
    schema: &str,
) -> Result<(Vec<String>, Vec<Vec<String>>), HarnessError> {
    let text = fs::read_to_string(path)?;
    let (first, rest) = text
        .split_once('\n')
        .ok_or_else(|| HarnessError::Config(format!("{} is empty", path.display())))?;
    let want = format!("# schema: {schema}");
    if first.trim_end() != want {
        return Err(HarnessError::Config(format!(
            "{} declares `{}`, expected `{want}`",
            path.display(),
            first.trim_end()
        )));
    }
    let mut reader = csv::Reader::from_reader(rest.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_file_serializes_directory_ownership() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let first = RunDir::create(&dir).unwrap();
        let second = RunDir::create(&dir);
        assert!(matches!(second, Err(HarnessError::Locked(_))));
        drop(first);
        let third = RunDir::create(&dir);
        assert!(third.is_ok(), "dropping the owner must release the lock");
    }

    #[test]
    fn manifest_lists_hashes_of_inputs_and_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::create(&tmp.path().join("run")).unwrap();
        let input = dir.file("in.txt");
        std::fs::write(&input, b"abc").unwrap();
        let output = dir.file("out.txt");
        std::fs::write(&output, b"xyz").unwrap();
        let manifest = dir
            .write_manifest(7, std::slice::from_ref(&input), std::slice::from_ref(&output))
            .unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
        assert_eq!(doc["seed"], 7);
        let hash = doc["inputs"][input.display().to_string()].as_str().unwrap();
        assert_eq!(hash.len(), 64);
        assert!(doc["outputs"][output.display().to_string()].is_string());
    }

    #[test]
    fn out_root_prefers_flag_over_config() {
        let cfg = RunConfig::default();
        let flagged = resolve_out_root(Some(Path::new("/tmp/x")), &cfg);
        assert_eq!(flagged, Path::new("/tmp/x"));
        // No flag and no env override: the configured root wins. The env
        // branch is covered end to end by the CLI tests.
        if std::env::var_os(OUT_ENV).is_none() {
            assert_eq!(resolve_out_root(None, &cfg), PathBuf::from(&cfg.out_root));
        }
    }
}
