//! Loader for UPNA-style head-pose data described by a manifest.
//!
//! `root/manifest.toml` lists one `[[video]]` table per sequence:
//!
//! ```toml
//! pose_columns = [0, 1, 2]   # optional: yaw, pitch, roll columns in pose files
//!
//! [[video]]
//! subject = 1
//! frames = "User_01/video_01/frames"      # image files, read in name order
//! poses = "User_01/video_01/poses.txt"    # one whitespace-separated row per frame
//! boxes = "User_01/video_01/boxes.txt"    # one "x y w h" row per frame, pixels
//! ```
//!
//! Lines starting with `#` and blank lines in pose/box files are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Dataset, FaceSample, POSE_LIMIT_DEG};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "default_columns")]
    pub pose_columns: [usize; 3],
    #[serde(default)]
    pub video: Vec<ManifestEntry>,
}

fn default_columns() -> [usize; 3] {
    [0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject: u32,
    pub frames: PathBuf,
    pub poses: PathBuf,
    pub boxes: PathBuf,
}

/// Frame accounting for one load.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped_bad_box: usize,
    pub skipped_bad_pose: usize,
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| load_err(path, e.to_string()))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| load_err(path, format!("line {}: {e}", n + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| load_err(dir, e.to_string()))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| load_err(dir, e.to_string()))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Crops `img` to the box, resizes to `[H, W]` and maps bytes to `[-1, 1]`.
/// Returns `None` when the box is empty or leaves the frame.
pub(crate) fn crop_resize(img: &DynamicImage, bbox: [f64; 4], size: [usize; 2], channels: usize) -> Option<Array3<f32>> {
    let [x, y, w, h] = bbox.map(f64::round);
    if !(x >= 0.0 && y >= 0.0 && w >= 1.0 && h >= 1.0) {
        return None;
    }
    if x + w > img.width() as f64 || y + h > img.height() as f64 {
        return None;
    }
    let crop = img.crop_imm(x as u32, y as u32, w as u32, h as u32);
    let [th, tw] = size;
    let crop = if crop.width() as usize == tw && crop.height() as usize == th {
        crop
    } else {
        crop.resize_exact(tw as u32, th as u32, FilterType::Triangle)
    };
    let bytes = match channels {
        1 => crop.to_luma8().into_raw(),
        _ => crop.to_rgb8().into_raw(),
    };
    let data = bytes.into_iter().map(|b| b as f32 / 127.5 - 1.0).collect();
    Array3::from_shape_vec((th, tw, channels), data).ok()
}

/// Loads every video listed in `root/manifest.toml`.
pub fn load_upna(root: &Path, image_size: [usize; 2], channels: usize) -> Result<(Dataset, LoadReport)> {
    if channels != 1 && channels != 3 {
        return Err(Error::config(format!("channels = {channels}; expected 1 or 3")));
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| load_err(&manifest_path, e.to_string()))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| load_err(&manifest_path, e.to_string()))?;
    if manifest.video.is_empty() {
        return Err(load_err(&manifest_path, "manifest lists no videos"));
    }

    let mut report = LoadReport::default();
    let mut samples = Vec::new();
    let mut n_subjects = 0usize;
    for (vi, entry) in manifest.video.iter().enumerate() {
        if entry.subject == 0 {
            return Err(load_err(&manifest_path, format!("video {}: subjects are numbered from 1", vi + 1)));
        }
        n_subjects = n_subjects.max(entry.subject as usize);
        let pose_path = root.join(&entry.poses);
        let box_path = root.join(&entry.boxes);
        let poses = read_rows(&pose_path)?;
        let boxes = read_rows(&box_path)?;
        let frames = frame_files(&root.join(&entry.frames))?;
        if poses.len() != frames.len() {
            return Err(load_err(
                &pose_path,
                format!("{} pose rows for {} frames", poses.len(), frames.len()),
            ));
        }
        if boxes.len() != frames.len() {
            return Err(load_err(
                &box_path,
                format!("{} box rows for {} frames", boxes.len(), frames.len()),
            ));
        }
        for (i, frame) in frames.iter().enumerate() {
            let cols = manifest.pose_columns;
            let pose_row = &poses[i];
            if cols.iter().any(|&c| c >= pose_row.len()) {
                return Err(load_err(&pose_path, format!("row {} has {} columns", i + 1, pose_row.len())));
            }
            let pose = cols.map(|c| pose_row[c] as f32);
            if pose.iter().any(|a| !(-POSE_LIMIT_DEG..=POSE_LIMIT_DEG).contains(a)) {
                log::warn!("{}: pose {pose:?} outside [-90, 90], frame skipped", frame.display());
                report.skipped_bad_pose += 1;
                continue;
            }
            let b = &boxes[i];
            if b.len() < 4 {
                return Err(load_err(&box_path, format!("row {} has {} columns", i + 1, b.len())));
            }
            let img = image::open(frame).map_err(|e| load_err(frame, e.to_string()))?;
            match crop_resize(&img, [b[0], b[1], b[2], b[3]], image_size, channels) {
                Some(image) => samples.push(FaceSample {
                    image,
                    identity: entry.subject,
                    pose,
                    video_id: vi as u32 + 1,
                }),
                None => {
                    log::warn!("{}: bounding box {b:?} outside frame, skipped", frame.display());
                    report.skipped_bad_box += 1;
                }
            }
        }
    }
    report.loaded = samples.len();
    if samples.is_empty() {
        return Err(load_err(root, "no usable frames"));
    }
    let dataset = Dataset {
        samples,
        n_subjects,
        image_size: [image_size[0], image_size[1], channels],
    };
    Ok((dataset, report))
}
