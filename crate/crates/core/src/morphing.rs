//! Identity replacement and latent / identity-code morphing.
//!
//! Interpolation follows the convention `k * initial + (1 - k) * final`:
//! `k = 1` yields the initial endpoint and `k = 0` the final one. Sequences
//! sweep `k` from 1 down to 0, so frame 0 is always the initial endpoint.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array1, Array2, Array3, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::model::{one_hot, IdentityCode, ModelBundle};
use crate::scalar::{lit, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MorphMode {
    #[serde(alias = "pose_morph")]
    PoseMorph,
    #[serde(alias = "identity_morph")]
    IdentityMorph,
    #[serde(alias = "identity_replace")]
    IdentityReplace,
}

impl std::str::FromStr for MorphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pose_morph" | "pose" => Ok(MorphMode::PoseMorph),
            "identity_morph" | "identity" => Ok(MorphMode::IdentityMorph),
            "identity_replace" | "replace" => Ok(MorphMode::IdentityReplace),
            _ => Err(Error::Request(format!(
                "unknown morph mode {s:?} (expected pose_morph, identity_morph or identity_replace)"
            ))),
        }
    }
}

/// A source image `[H, W, C]` together with its 1-based identity label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage<T: Scalar> {
    pub image: Array3<T>,
    pub identity: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MorphRequest<T: Scalar> {
    /// Same identity, two poses: latent codes interpolated under a fixed identity code.
    PoseMorph {
        initial: LabeledImage<T>,
        final_: LabeledImage<T>,
        steps: usize,
    },
    /// One image, two identities: identity codes interpolated under a fixed latent code.
    IdentityMorph {
        image: Array3<T>,
        initial: u32,
        final_: u32,
        steps: usize,
    },
    IdentityReplace { image: Array3<T>, target: u32 },
}

impl<T: Scalar> MorphRequest<T> {
    pub fn mode(&self) -> MorphMode {
        match self {
            MorphRequest::PoseMorph { .. } => MorphMode::PoseMorph,
            MorphRequest::IdentityMorph { .. } => MorphMode::IdentityMorph,
            MorphRequest::IdentityReplace { .. } => MorphMode::IdentityReplace,
        }
    }

    pub fn validate(&self, model: &ModelBundle<T>) -> Result<()> {
        let ns = model.n_subjects();
        let id_ok = |y: u32| {
            if y == 0 || y as usize > ns {
                Err(Error::Request(format!("identity {y} outside 1..={ns}")))
            } else {
                Ok(())
            }
        };
        let shape_ok = |im: &Array3<T>| {
            let want = model.config.image_size;
            if im.shape() != want {
                Err(Error::Request(format!(
                    "endpoint image has shape {:?}, model expects {want:?}",
                    im.shape()
                )))
            } else {
                Ok(())
            }
        };
        let steps_ok = |s: usize| {
            if s < 2 {
                Err(Error::Request(format!("steps must be at least 2, got {s}")))
            } else {
                Ok(())
            }
        };
        match self {
            MorphRequest::PoseMorph { initial, final_, steps } => {
                steps_ok(*steps)?;
                shape_ok(&initial.image)?;
                shape_ok(&final_.image)?;
                id_ok(initial.identity)?;
                id_ok(final_.identity)?;
                if initial.identity != final_.identity {
                    return Err(Error::Request(format!(
                        "pose morph needs endpoints of the same identity, got {} and {}",
                        initial.identity, final_.identity
                    )));
                }
                Ok(())
            }
            MorphRequest::IdentityMorph { image, initial, final_, steps } => {
                steps_ok(*steps)?;
                shape_ok(image)?;
                id_ok(*initial)?;
                id_ok(*final_)
            }
            MorphRequest::IdentityReplace { image, target } => {
                shape_ok(image)?;
                id_ok(*target)
            }
        }
    }
}

/// Frames of a morph, ordered from the initial endpoint (`k = 1`) to the final one.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphSequence<T: Scalar> {
    pub mode: MorphMode,
    pub ks: Vec<f64>,
    pub frames: Vec<Array3<T>>,
}

fn check_k(k: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::Range(format!("interpolation weight k = {k} outside [0, 1]")));
    }
    Ok(())
}

fn lerp<T: Scalar>(a: &Array1<T>, b: &Array1<T>, k: f64) -> Array1<T> {
    // Endpoints are returned verbatim so that signed zeros survive.
    if k == 1.0 {
        return a.clone();
    }
    if k == 0.0 {
        return b.clone();
    }
    let kt: T = lit(k);
    let rest: T = lit(1.0 - k);
    a.mapv(|v| v * kt) + &b.mapv(|v| v * rest)
}

/// `k * z_initial + (1 - k) * z_final`.
pub fn interpolate_latent<T: Scalar>(
    z_initial: &Array1<T>,
    z_final: &Array1<T>,
    k: f64,
) -> Result<Array1<T>> {
    check_k(k)?;
    if z_initial.len() != z_final.len() {
        return Err(Error::shape(format!(
            "latent lengths differ: {} vs {}",
            z_initial.len(),
            z_final.len()
        )));
    }
    Ok(lerp(z_initial, z_final, k))
}

/// `k * c_initial + (1 - k) * c_final`; stays on the simplex.
pub fn interpolate_identity<T: Scalar>(
    c_initial: &IdentityCode<T>,
    c_final: &IdentityCode<T>,
    k: f64,
) -> Result<IdentityCode<T>> {
    check_k(k)?;
    if c_initial.len() != c_final.len() {
        return Err(Error::shape(format!(
            "identity code lengths differ: {} vs {}",
            c_initial.len(),
            c_final.len()
        )));
    }
    IdentityCode::new(lerp(c_initial.as_array(), c_final.as_array(), k))
}

/// Equispaced weights from 1 down to 0 with exact endpoints.
pub fn sweep(steps: usize) -> Vec<f64> {
    let last = steps.saturating_sub(1).max(1) as f64;
    (0..steps)
        .map(|i| if i + 1 == steps { 0.0 } else { 1.0 - i as f64 / last })
        .collect()
}

fn batch1<T: Scalar>(image: &Array3<T>) -> ArrayD<T> {
    image.clone().insert_axis(Axis(0)).into_dyn()
}

fn latent_mean<T: Scalar>(model: &ModelBundle<T>, image: &Array3<T>) -> Result<Array1<T>> {
    Ok(model.encode(&batch1(image))?.mean.row(0).to_owned())
}

/// Decodes a single `(z, c)` pair to an image `[H, W, C]`.
pub fn synthesize<T: Scalar>(
    model: &ModelBundle<T>,
    z: &Array1<T>,
    code: &IdentityCode<T>,
) -> Result<Array3<T>> {
    let zr: Array2<T> = z.clone().insert_axis(Axis(0));
    let cr: Array2<T> = code.as_array().clone().insert_axis(Axis(0));
    let out = model.decode(&zr, &cr)?;
    let out = out.index_axis_move(Axis(0), 0);
    Ok(out.into_dimensionality().expect("decoder emits [N, H, W, C]"))
}

/// Re-renders `image` under identity `target` while keeping its pose.
pub fn identity_replace<T: Scalar>(
    model: &ModelBundle<T>,
    image: &Array3<T>,
    target: u32,
) -> Result<Array3<T>> {
    MorphRequest::IdentityReplace { image: image.clone(), target }.validate(model)?;
    let z = latent_mean(model, image)?;
    synthesize(model, &z, &one_hot(target, model.n_subjects())?)
}

/// Renders the frames of a morph request. Each frame is decoded on its own,
/// so frame 0 and the last frame match [`synthesize`] on the endpoints bit for bit.
pub fn morph_sequence<T: Scalar>(
    model: &ModelBundle<T>,
    request: &MorphRequest<T>,
) -> Result<MorphSequence<T>> {
    request.validate(model)?;
    let ns = model.n_subjects();
    let mode = request.mode();
    match request {
        MorphRequest::PoseMorph { initial, final_, steps } => {
            let code = one_hot(initial.identity, ns)?;
            let zi = latent_mean(model, &initial.image)?;
            let zf = latent_mean(model, &final_.image)?;
            let ks = sweep(*steps);
            let frames = ks
                .iter()
                .map(|&k| synthesize(model, &interpolate_latent(&zi, &zf, k)?, &code))
                .collect::<Result<_>>()?;
            Ok(MorphSequence { mode, ks, frames })
        }
        MorphRequest::IdentityMorph { image, initial, final_, steps } => {
            let z = latent_mean(model, image)?;
            let ci = one_hot(*initial, ns)?;
            let cf = one_hot(*final_, ns)?;
            let ks = sweep(*steps);
            let frames = ks
                .iter()
                .map(|&k| synthesize(model, &z, &interpolate_identity(&ci, &cf, k)?))
                .collect::<Result<_>>()?;
            Ok(MorphSequence { mode, ks, frames })
        }
        MorphRequest::IdentityReplace { image, target } => Ok(MorphSequence {
            mode,
            ks: vec![1.0],
            frames: vec![identity_replace(model, image, *target)?],
        }),
    }
}

/// L2 distances between consecutive frames.
pub fn step_distances<T: Scalar>(frames: &[Array3<T>]) -> Vec<f64> {
    frames
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(w[1].iter())
                .map(|(a, b)| {
                    let d = (*a - *b).to_f64_lossy();
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Largest consecutive-frame distance divided by the median one.
/// Infinite when the median is zero and some step is not.
pub fn spike_ratio(distances: &[f64]) -> f64 {
    if distances.is_empty() {
        return 0.0;
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let max = sorted[n - 1];
    if max == 0.0 {
        0.0
    } else if median == 0.0 {
        f64::INFINITY
    } else {
        max / median
    }
}

/// True when `values` never move against the first-to-last direction by more
/// than `band_fraction` of the endpoint gap, measured from the running extreme.
pub fn monotone_within(values: &[f64], band_fraction: f64) -> bool {
    let (Some(&first), Some(&last)) = (values.first(), values.last()) else {
        return true;
    };
    let dir = if last >= first { 1.0 } else { -1.0 };
    let band = band_fraction * (last - first).abs();
    let mut best = first * dir;
    for &v in values {
        let v = v * dir;
        if v < best - band {
            return false;
        }
        best = best.max(v);
    }
    true
}

fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Lays rows of equally sized `[H, W, C]` images (values in `[-1, 1]`) into one
/// grid with a `pad`-pixel white gutter; single-channel images are written as gray.
pub fn render_grid<T: Scalar>(
    rows: &[Vec<Array3<T>>],
    pad: u32,
) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::shape("image grid has no frames"))?;
    let (h, w, c) = first.dim();
    if c != 1 && c != 3 {
        return Err(Error::shape(format!("grid frames must have 1 or 3 channels, got {c}")));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let (hu, wu) = (h as u32, w as u32);
    let width = cols * wu + (cols + 1) * pad;
    let height = rows.len() as u32 * hu + (rows.len() as u32 + 1) * pad;
    let mut img = ImageBuffer::from_pixel(width, height, Rgb([255u8, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (col, frame) in row.iter().enumerate() {
            if frame.dim() != (h, w, c) {
                return Err(Error::shape(format!(
                    "grid frame has shape {:?}, expected {:?}",
                    frame.shape(),
                    [h, w, c]
                )));
            }
            let x0 = pad + col as u32 * (wu + pad);
            let y0 = pad + r as u32 * (hu + pad);
            for y in 0..h {
                for x in 0..w {
                    let px = |ch: usize| to_u8(frame[[y, x, ch.min(c - 1)]].to_f64_lossy());
                    img.put_pixel(x0 + x as u32, y0 + y as u32, Rgb([px(0), px(1), px(2)]));
                }
            }
        }
    }
    Ok(img)
}

/// Writes [`render_grid`] output as a PNG.
pub fn write_grid<T: Scalar>(path: &Path, rows: &[Vec<Array3<T>>]) -> Result<()> {
    render_grid(rows, 2)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
