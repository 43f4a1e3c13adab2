//! Keypoint files: JSON documents holding one skeleton per frame, with a
//! schema version, the frame size, and the joint vocabulary up front.
//! Readers reject unknown schema versions and joints outside the canonical
//! set.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{canonical_joints, Skeleton2D, SkeletonError};

const SCHEMA_VERSION: u32 = 1;

/// On-disk document shape. `frames[i]` maps joint name → `[x, y, confidence]`.
#[derive(Serialize, Deserialize)]
pub struct KeypointDoc {
    pub schema_version: u32,
    /// `[width, height]` of the frame the coordinates live in.
    pub frame_size: [usize; 2],
    /// Joint vocabulary used by this file.
    pub joints: Vec<String>,
    pub frames: Vec<BTreeMap<String, [f64; 3]>>,
}

pub fn write_keypoints(
    path: &Path,
    frame_size: (usize, usize),
    frames: &[Skeleton2D],
) -> Result<(), SkeletonError> {
    let mut vocab: Vec<String> = Vec::new();
    let mut out_frames = Vec::with_capacity(frames.len());
    for skel in frames {
        let mut rec = BTreeMap::new();
        for name in skel.names() {
            let (x, y, c) = skel.get(name).unwrap();
            rec.insert(name.to_string(), [x, y, c]);
            if !vocab.iter().any(|v| v == name) {
                vocab.push(name.to_string());
            }
        }
        out_frames.push(rec);
    }
    vocab.sort();
    let doc = KeypointDoc {
        schema_version: SCHEMA_VERSION,
        frame_size: [frame_size.0, frame_size.1],
        joints: vocab,
        frames: out_frames,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, serde_json::to_vec_pretty(&doc)?)?;
    Ok(())
}

pub fn read_keypoints(path: &Path) -> Result<(KeypointDoc, Vec<Skeleton2D>), SkeletonError> {
    let bytes = fs::read(path)?;
    let doc: KeypointDoc = serde_json::from_slice(&bytes)?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(SkeletonError::BadSchema(doc.schema_version));
    }
    let canonical = canonical_joints();
    for name in &doc.joints {
        if !canonical.contains(name) {
            return Err(SkeletonError::UnknownJoint(name.clone()));
        }
    }
    let mut skeletons = Vec::with_capacity(doc.frames.len());
    for (i, rec) in doc.frames.iter().enumerate() {
        let mut s = Skeleton2D::new();
        for (name, v) in rec {
            if !doc.joints.contains(name) {
                return Err(SkeletonError::BadFile(format!(
                    "frame {i} uses joint `{name}` not declared in the header"
                )));
            }
            if !(v[0].is_finite() && v[1].is_finite() && v[2].is_finite()) {
                return Err(SkeletonError::BadFile(format!(
                    "frame {i} joint `{name}` has a non-finite value"
                )));
            }
            s.set(name, v[0], v[1], v[2]);
        }
        skeletons.push(s);
    }
    Ok((doc, skeletons))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::random_skeleton;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trips_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frames: Vec<Skeleton2D> = (0..3)
            .map(|i| random_skeleton(&mut rng, 10.0, (32.0 + i as f64, 32.0)))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kp.json");
        write_keypoints(&path, (64, 64), &frames).unwrap();
        let (doc, back) = read_keypoints(&path).unwrap();
        assert_eq!(doc.frame_size, [64, 64]);
        assert_eq!(back.len(), 3);
        for (a, b) in frames.iter().zip(&back) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_future_schema_and_alien_joints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kp.json");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        write_keypoints(&path, (64, 64), &[random_skeleton(&mut rng, 5.0, (10.0, 10.0))])
            .unwrap();

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"schema_version\": 1", "\"schema_version\": 2")).unwrap();
        assert!(matches!(read_keypoints(&path), Err(SkeletonError::BadSchema(2))));

        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema_version\": 2", "\"schema_version\": 1")
            .replace("\"left_ear\"", "\"left_antenna\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            read_keypoints(&path),
            Err(SkeletonError::UnknownJoint(_)) | Err(SkeletonError::BadFile(_))
        ));
    }
}
