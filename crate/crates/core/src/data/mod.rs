//! Face samples, datasets, the per-video train/test split and pose scaling.

mod procedural;
mod upna;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{BlobReader, BlobWriter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use procedural::{generate_procedural, render_face_proxy, ProceduralConfig, BACKGROUND};
pub use upna::{load_upna, LoadReport, Manifest, ManifestEntry};

/// Largest absolute pose angle, in degrees.
pub const POSE_LIMIT_DEG: f32 = 90.0;

/// One labelled face image.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceSample {
    /// `[H, W, C]`, values in `[-1, 1]`.
    pub image: Array3<f32>,
    /// 1-based subject label.
    pub identity: u32,
    /// Yaw, pitch, roll in degrees.
    pub pose: [f32; 3],
    pub video_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<FaceSample>,
    pub n_subjects: usize,
    /// `[H, W, C]`.
    pub image_size: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub train: Dataset,
    pub test: Dataset,
}

/// A minibatch converted to the model's scalar type.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub images: ArrayD<T>,
    pub identities: Vec<u32>,
    /// Normalized (degrees / 90), `[N, 3]`.
    pub poses: Array2<T>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks every sample against the dataset invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.shape() != self.image_size {
                return Err(Error::shape(format!(
                    "sample {i}: image shape {:?} != {:?}",
                    s.image.shape(),
                    self.image_size
                )));
            }
            if s.image.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Range(format!("sample {i}: pixel outside [-1, 1]")));
            }
            if s.pose.iter().any(|a| !(-POSE_LIMIT_DEG..=POSE_LIMIT_DEG).contains(a)) {
                return Err(Error::Range(format!("sample {i}: pose {:?} outside [-90, 90]", s.pose)));
            }
            if s.identity == 0 || s.identity as usize > self.n_subjects {
                return Err(Error::Range(format!(
                    "sample {i}: identity {} outside 1..={}",
                    s.identity, self.n_subjects
                )));
            }
        }
        Ok(())
    }

    /// Minimum and maximum pixel value over all samples.
    pub fn pixel_range(&self) -> Option<(f32, f32)> {
        let mut it = self.samples.iter().flat_map(|s| s.image.iter().copied());
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    pub fn identities(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    /// Stacks the selected samples into a batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Batch<T>> {
        let [h, w, c] = self.image_size;
        let mut images = Vec::with_capacity(indices.len() * h * w * c);
        let mut poses = Array2::zeros((indices.len(), 3));
        let mut identities = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Index(format!("sample {i} of {}", self.len())))?;
            images.extend(s.image.iter().map(|&v| T::from_f32_exact(v)));
            let p = normalize_pose::<T>(s.pose)?;
            for k in 0..3 {
                poses[[row, k]] = p[k];
            }
            identities.push(s.identity);
        }
        let images = ArrayD::from_shape_vec(IxDyn(&[indices.len(), h, w, c]), images)
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(Batch {
            images,
            identities,
            poses,
        })
    }

    pub fn all<T: Scalar>(&self) -> Result<Batch<T>> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            n_subjects: self.n_subjects,
            image_size: self.image_size,
        }
    }
}

/// Maps degrees to `[-1, 1]` by dividing by 90.
pub fn normalize_pose<T: Scalar>(angles_deg: [f32; 3]) -> Result<[T; 3]> {
    if angles_deg.iter().any(|a| !(-POSE_LIMIT_DEG..=POSE_LIMIT_DEG).contains(a)) {
        return Err(Error::Range(format!("pose {angles_deg:?} outside [-90, 90] degrees")));
    }
    let ninety = T::from_f32_exact(POSE_LIMIT_DEG);
    Ok(angles_deg.map(|a| T::from_f32_exact(a) / ninety))
}

/// Inverse of [`normalize_pose`].
pub fn denormalize_pose<T: Scalar>(normalized: [T; 3]) -> [T; 3] {
    let ninety = T::from_f32_exact(POSE_LIMIT_DEG);
    normalized.map(|v| v * ninety)
}

/// Splits every video independently: a seeded random `⌊fraction·n⌋` of its
/// frames go to train, the rest to test.
pub fn split_per_video(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitPair> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let mut videos: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        videos.entry(s.video_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (video, mut frames) in videos {
        let n = frames.len();
        if n < 2 {
            return Err(Error::Split(format!("video {video} has {n} frame(s); need at least 2")));
        }
        // Guard against products like 0.29 * 100 = 28.999999999999996.
        let k = ((train_fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n - 1);
        frames.shuffle(&mut rng);
        let (tr, te) = frames.split_at(k);
        train.extend_from_slice(tr);
        test.extend_from_slice(te);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPair {
        train: dataset.subset(&train),
        test: dataset.subset(&test),
    })
}

const DATASET_MAGIC: &str = "VEIL-DATASET v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub n_subjects: usize,
    pub image_size: [usize; 3],
    pub identities: Vec<u32>,
    pub poses: Vec<[f32; 3]>,
    pub video_ids: Vec<u32>,
    /// Generator settings when the dataset is procedural.
    pub procedural: Option<ProceduralConfig>,
}

/// Writes a dataset as a single archive (structured header + `f32` images).
pub fn save_dataset(dataset: &Dataset, path: &Path, procedural: Option<&ProceduralConfig>) -> Result<()> {
    let header = DatasetHeader {
        n_subjects: dataset.n_subjects,
        image_size: dataset.image_size,
        identities: dataset.identities(),
        poses: dataset.samples.iter().map(|s| s.pose).collect(),
        video_ids: dataset.samples.iter().map(|s| s.video_id).collect(),
        procedural: procedural.cloned(),
    };
    let mut blob = BlobWriter::default();
    let [h, w, c] = dataset.image_size;
    blob.push(
        "images",
        &[dataset.len(), h, w, c],
        dataset.samples.iter().flat_map(|s| s.image.iter().copied()),
    );
    blob.write(path, DATASET_MAGIC, &header)
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, DatasetHeader)> {
    let reader: BlobReader<DatasetHeader> = BlobReader::read(path, DATASET_MAGIC)?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let hd = &reader.header;
    let n = hd.identities.len();
    if hd.poses.len() != n || hd.video_ids.len() != n {
        return Err(corrupt("label arrays have different lengths".into()));
    }
    let (shape, data) = reader.get("images").ok_or_else(|| corrupt("missing images".into()))?;
    let [h, w, c] = hd.image_size;
    if shape != [n, h, w, c] {
        return Err(corrupt(format!("images shape {shape:?} does not match header")));
    }
    let per = h * w * c;
    let samples = (0..n)
        .map(|i| FaceSample {
            image: Array3::from_shape_vec((h, w, c), data[i * per..(i + 1) * per].to_vec()).unwrap(),
            identity: hd.identities[i],
            pose: hd.poses[i],
            video_id: hd.video_ids[i],
        })
        .collect();
    let dataset = Dataset {
        samples,
        n_subjects: hd.n_subjects,
        image_size: hd.image_size,
    };
    dataset.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok((dataset, reader.header))
}
