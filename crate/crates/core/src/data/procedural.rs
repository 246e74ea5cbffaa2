//! Desk-scale stand-in for UPNA: rendered "face proxies".
//!
//! A tinted ellipse whose axis lengths shrink with |yaw| (horizontal) and
//! |pitch| (vertical), a bright marker displaced by the signed yaw/pitch, the
//! whole figure rotated in-plane by roll. Identity sets the hue and the
//! frequency/phase of stripes running along the figure's local x axis, so a
//! zero-pose render is mirror symmetric.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, FaceSample};
use crate::error::{Error, Result};

/// Pixel value outside the figure.
pub const BACKGROUND: f32 = -0.6;
const MARKER: f32 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProceduralConfig {
    pub n_subjects: usize,
    pub frames_per_subject: usize,
    /// `[H, W]`.
    pub image_size: [usize; 2],
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_videos")]
    pub videos_per_subject: usize,
    /// Pose angles are drawn uniformly from `[-pose_limit, pose_limit]` degrees.
    #[serde(default = "default_pose_limit")]
    pub pose_limit: f32,
    /// Standard deviation of per-pixel Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise_std: f32,
}

fn default_channels() -> usize {
    3
}
fn default_videos() -> usize {
    4
}
fn default_pose_limit() -> f32 {
    60.0
}
fn default_noise() -> f32 {
    0.02
}

impl ProceduralConfig {
    pub fn new(n_subjects: usize, frames_per_subject: usize, image_size: [usize; 2], seed: u64) -> Self {
        ProceduralConfig {
            n_subjects,
            frames_per_subject,
            image_size,
            seed,
            channels: default_channels(),
            videos_per_subject: default_videos(),
            pose_limit: default_pose_limit(),
            noise_std: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::config(format!(
                "n_subjects = {} but identity replacement needs at least 2",
                self.n_subjects
            )));
        }
        if self.image_size[0] < 16 || self.image_size[1] < 16 {
            return Err(Error::config(format!("image size {:?} is below 16x16", self.image_size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!("channels = {}; expected 1 or 3", self.channels)));
        }
        if self.videos_per_subject == 0 || self.frames_per_subject < 2 * self.videos_per_subject {
            return Err(Error::config(format!(
                "{} frames cannot fill {} videos of at least 2 frames",
                self.frames_per_subject, self.videos_per_subject
            )));
        }
        if !(self.pose_limit > 0.0 && self.pose_limit <= 90.0) {
            return Err(Error::config(format!("pose_limit {} outside (0, 90]", self.pose_limit)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(format!("noise_std {} must be finite and >= 0", self.noise_std)));
        }
        Ok(())
    }
}

struct Appearance {
    color: [f64; 3],
    stripe_freq: f64,
    stripe_phase: f64,
}

fn appearance(identity: u32, n_subjects: usize) -> Appearance {
    let k = (identity - 1) as f64;
    let hue = k / n_subjects as f64;
    Appearance {
        color: hsv_to_rgb(hue, 0.75, 0.85),
        stripe_freq: 1.0 + 0.75 * ((identity - 1) % 3) as f64,
        stripe_phase: 2.0 * PI * ((identity as f64 * 0.618_033_988_75).fract()),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Renders one noise-free proxy. `pose` is (yaw, pitch, roll) in degrees.
pub fn render_face_proxy(
    identity: u32,
    pose: [f32; 3],
    n_subjects: usize,
    image_size: [usize; 2],
    channels: usize,
) -> Array3<f32> {
    let [h, w] = image_size;
    let look = appearance(identity, n_subjects);
    let [yaw, pitch, roll] = pose.map(|a| (a as f64).to_radians());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (a0, b0) = (0.34 * w as f64, 0.42 * h as f64);
    let a = a0 * (0.45 + 0.55 * yaw.cos());
    let b = b0 * (0.45 + 0.55 * pitch.cos());
    let (mu, mv) = (0.6 * a0 * yaw.sin(), -0.6 * b0 * pitch.sin());
    let mr = 0.11 * w.min(h) as f64;
    let (cr, sr) = (roll.cos(), roll.sin());

    let mut img = Array3::from_elem((h, w, channels), BACKGROUND);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = cr * dx + sr * dy;
            let v = -sr * dx + cr * dy;
            if (u / a).powi(2) + (v / b).powi(2) > 1.0 {
                continue;
            }
            let px = img.slice_mut(ndarray::s![y, x, ..]).into_slice().unwrap();
            if (u - mu).powi(2) + (v - mv).powi(2) <= mr * mr {
                px.fill(MARKER);
                continue;
            }
            let stripe = 0.5 + 0.5 * (2.0 * PI * look.stripe_freq * v / b0 + look.stripe_phase).cos();
            let shade = 0.7 + 0.3 * stripe;
            if channels == 1 {
                let lum = 0.299 * look.color[0] + 0.587 * look.color[1] + 0.114 * look.color[2];
                px[0] = (2.0 * lum * shade - 1.0) as f32;
            } else {
                for (p, c) in px.iter_mut().zip(look.color) {
                    *p = (2.0 * c * shade - 1.0) as f32;
                }
            }
        }
    }
    img
}

/// Seeded procedural dataset; frames are grouped into videos per subject.
pub fn generate_procedural(config: &ProceduralConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0f32, config.noise_std.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::config(e.to_string()))?;
    let lim = config.pose_limit;
    let mut samples = Vec::with_capacity(config.n_subjects * config.frames_per_subject);
    for subject in 1..=config.n_subjects as u32 {
        for frame in 0..config.frames_per_subject {
            let pose = [0; 3].map(|_| rng.random_range(-lim..=lim));
            let mut image = render_face_proxy(subject, pose, config.n_subjects, config.image_size, config.channels);
            if config.noise_std > 0.0 {
                image.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(-1.0, 1.0));
            }
            let video = (frame * config.videos_per_subject / config.frames_per_subject) as u32;
            samples.push(FaceSample {
                image,
                identity: subject,
                pose,
                video_id: (subject - 1) * config.videos_per_subject as u32 + video + 1,
            });
        }
    }
    Ok(Dataset {
        samples,
        n_subjects: config.n_subjects,
        image_size: [config.image_size[0], config.image_size[1], config.channels],
    })
}
