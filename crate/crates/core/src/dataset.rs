//! On-disk dataset: `manifest.json`, `frames.bin` (little-endian f32,
//! frame-major then channel-major) and `labels.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PoseError, Result};
use crate::sim::{
    project_keypoints, synthesize_frame, FrameLabel, RfFrame, Scene, SimConfig, NUM_CHANNELS,
    NUM_JOINTS, NUM_SAMPLES,
};

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_FILE: &str = "frames.bin";
pub const LABELS_FILE: &str = "labels.json";

const FRAME_BYTES: usize = NUM_CHANNELS * NUM_SAMPLES * 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub frame_count: usize,
    pub channels: usize,
    pub samples: usize,
    pub label_file: String,
    pub frames_file: String,
    pub sim_config_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub frames: Vec<RfFrame>,
    pub labels: Vec<FrameLabel>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames and labels at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let frames: Vec<RfFrame> = indices.iter().map(|&i| self.frames[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i].clone()).collect();
        Dataset {
            manifest: DatasetManifest {
                frame_count: frames.len(),
                ..self.manifest.clone()
            },
            frames,
            labels,
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of `cfg`.
pub fn sim_config_digest(cfg: &SimConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("SimConfig serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| PoseError::format(path, "not a file path"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| PoseError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| PoseError::io(&tmp, e))?;
    f.sync_all().map_err(|e| PoseError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| PoseError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PoseError::io(path, e))
}

pub fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Renders every scene and writes the dataset files into `out_dir`.
pub fn write_dataset(scenes: &[Scene], cfg: &SimConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let rendered: Vec<(RfFrame, FrameLabel)> = scenes
        .par_iter()
        .map(|s| Ok((synthesize_frame(s, cfg)?, project_keypoints(s, cfg))))
        .collect::<Result<_>>()?;
    let (frames, labels): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    write_frames(&frames, &labels, &sim_config_digest(cfg), out_dir)
}

/// Writes already-rendered frames and labels.
pub fn write_frames(
    frames: &[RfFrame],
    labels: &[FrameLabel],
    digest: &str,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if frames.len() != labels.len() {
        return Err(PoseError::InvalidInput(format!(
            "{} frames but {} labels",
            frames.len(),
            labels.len()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| PoseError::io(out_dir, e))?;
    let mut blob = Vec::with_capacity(frames.len() * FRAME_BYTES);
    for f in frames {
        blob.extend(f32s_to_le_bytes(f.samples()));
    }
    atomic_write(&out_dir.join(FRAMES_FILE), &blob)?;
    let labels_json = serde_json::to_vec(labels)
        .map_err(|e| PoseError::format(out_dir.join(LABELS_FILE), e.to_string()))?;
    atomic_write(&out_dir.join(LABELS_FILE), &labels_json)?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        frame_count: frames.len(),
        channels: NUM_CHANNELS,
        samples: NUM_SAMPLES,
        label_file: LABELS_FILE.into(),
        frames_file: FRAMES_FILE.into(),
        sim_config_digest: digest.into(),
    };
    let manifest_json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| PoseError::format(out_dir.join(MANIFEST_FILE), e.to_string()))?;
    atomic_write(&out_dir.join(MANIFEST_FILE), &manifest_json)?;
    Ok(manifest)
}

fn data_path(dir: &Path, name: &str) -> Result<PathBuf> {
    let rel = Path::new(name);
    if rel.is_absolute() || rel.components().count() != 1 {
        return Err(PoseError::format(
            dir.join(MANIFEST_FILE),
            format!("data file '{name}' must be a plain file name"),
        ));
    }
    Ok(dir.join(rel))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_slice(&read_bytes(&manifest_path)?)
        .map_err(|e| PoseError::format(&manifest_path, e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(PoseError::format(
            &manifest_path,
            format!("unsupported dataset version {}", manifest.version),
        ));
    }
    if manifest.channels != NUM_CHANNELS || manifest.samples != NUM_SAMPLES {
        return Err(PoseError::format(
            &manifest_path,
            format!(
                "frames are {}x{}, expected {NUM_CHANNELS}x{NUM_SAMPLES}",
                manifest.channels, manifest.samples
            ),
        ));
    }

    let frames_path = data_path(dir, &manifest.frames_file)?;
    let blob = read_bytes(&frames_path)?;
    if blob.len() != manifest.frame_count * FRAME_BYTES {
        return Err(PoseError::format(
            &frames_path,
            format!(
                "{} bytes, expected {} for {} frames",
                blob.len(),
                manifest.frame_count * FRAME_BYTES,
                manifest.frame_count
            ),
        ));
    }
    let frames = blob
        .chunks_exact(FRAME_BYTES)
        .map(|chunk| {
            RfFrame::new(le_bytes_to_f32s(chunk))
                .map_err(|e| PoseError::format(&frames_path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let labels_path = data_path(dir, &manifest.label_file)?;
    let labels: Vec<FrameLabel> = serde_json::from_slice(&read_bytes(&labels_path)?)
        .map_err(|e| PoseError::format(&labels_path, e.to_string()))?;
    if labels.len() != manifest.frame_count {
        return Err(PoseError::format(
            &labels_path,
            format!(
                "{} labels for {} frames",
                labels.len(),
                manifest.frame_count
            ),
        ));
    }
    for (i, label) in labels.iter().enumerate() {
        for person in &label.persons {
            let valid = person.len() == NUM_JOINTS
                && person.iter().flatten().all(|v| (0.0..=1.0).contains(v));
            if !valid {
                return Err(PoseError::format(
                    &labels_path,
                    format!("frame {i}: keypoints must be {NUM_JOINTS} points in [0, 1]"),
                ));
            }
        }
    }
    Ok(Dataset {
        manifest,
        frames,
        labels,
    })
}
