//! Desk-scale benchmarks built from synthetic references: distorted images
//! with proxy MOS, and short videos whose distortion level drifts in time.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::ImagePlane;
use crate::rng::{self, Stream};
use crate::synthgen::{generate_image, ColorModel, Primitive, SizeSource, SynthParams};
use crate::video::FrameSource;

/// Distortion levels run `1..=LEVELS`; proxy MOS is `100·(1 − level/(LEVELS+1))`.
pub const LEVELS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    Blur,
    Noise,
    Quantization,
    DownUp,
}

impl Distortion {
    pub const ALL: [Distortion; 4] =
        [Distortion::Blur, Distortion::Noise, Distortion::Quantization, Distortion::DownUp];

    /// Strength at a level in `1..=LEVELS`: blur σ, noise σ, grey levels, or
    /// the resampling factor. Noise, quantization and resampling strengths
    /// give roughly the mean squared error of the blur at the same level.
    pub fn strength(self, level: u32) -> f64 {
        let i = (level.clamp(1, LEVELS) - 1) as usize;
        match self {
            Distortion::Blur => [1.0, 2.0, 4.0][i],
            Distortion::Noise => [16.0, 30.0, 42.0][i],
            Distortion::Quantization => [6.0, 4.0, 3.0][i],
            Distortion::DownUp => [2.0, 4.0, 7.0][i],
        }
    }

    pub fn apply<R: Rng>(self, plane: &ImagePlane, level: u32, rng: &mut R) -> ImagePlane {
        let s = self.strength(level);
        let out = match self {
            Distortion::Blur => gaussian_blur(plane, s),
            Distortion::Noise => add_noise(plane, s, rng),
            Distortion::Quantization => quantize(plane, s as u32),
            Distortion::DownUp => down_up(plane, s as usize),
        };
        to_8bit(out)
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distortion::Blur => "blur",
            Distortion::Noise => "noise",
            Distortion::Quantization => "quantization",
            Distortion::DownUp => "down_up",
        })
    }
}

impl FromStr for Distortion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Distortion::ALL
            .into_iter()
            .find(|d| d.to_string() == s)
            .ok_or_else(|| Error::param(format!("unknown distortion `{s}`")))
    }
}

pub fn proxy_mos(level: f64) -> f64 {
    100.0 * (1.0 - level / (LEVELS + 1) as f64)
}

fn to_8bit(plane: ImagePlane) -> ImagePlane {
    let (w, h) = (plane.width(), plane.height());
    let samples = plane.into_samples().into_iter().map(|v| v.round().clamp(0.0, 255.0)).collect();
    ImagePlane::new(w, h, samples).expect("rounded finite samples")
}

/// Separable Gaussian with a `⌈3σ⌉` radius and clamped borders.
pub fn gaussian_blur(plane: &ImagePlane, sigma: f64) -> ImagePlane {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (plane.width(), plane.height());
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, k) in kernel.iter().enumerate() {
                    let o = t as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + o).clamp(0, h as isize - 1) as usize)
                    };
                    acc += k * src[sy * w + sx];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let tmp = pass(plane.samples(), true);
    ImagePlane::new(w, h, pass(&tmp, false)).expect("finite blur")
}

pub fn add_noise<R: Rng>(plane: &ImagePlane, sigma: f64, rng: &mut R) -> ImagePlane {
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let samples = plane.samples().iter().map(|v| v + normal.sample(rng)).collect();
    ImagePlane::new(plane.width(), plane.height(), samples).expect("finite noise")
}

/// Snaps `[0, 255]` to `levels` evenly spaced grey values.
pub fn quantize(plane: &ImagePlane, levels: u32) -> ImagePlane {
    let step = 255.0 / (levels.max(2) - 1) as f64;
    let samples = plane.samples().iter().map(|v| (v / step).round() * step).collect();
    ImagePlane::new(plane.width(), plane.height(), samples).expect("finite quantization")
}

/// Box-average downsampling by `factor`, then bilinear upsampling back.
pub fn down_up(plane: &ImagePlane, factor: usize) -> ImagePlane {
    let (w, h) = (plane.width(), plane.height());
    let (sw, sh) = (w.div_ceil(factor), h.div_ceil(factor));
    let mut small = vec![0.0; sw * sh];
    for sy in 0..sh {
        for sx in 0..sw {
            let (mut acc, mut n) = (0.0, 0.0);
            for y in sy * factor..((sy + 1) * factor).min(h) {
                for x in sx * factor..((sx + 1) * factor).min(w) {
                    acc += plane.get(x, y);
                    n += 1.0;
                }
            }
            small[sy * sw + sx] = acc / n;
        }
    }
    let f = factor as f64;
    let coord = |p: usize, n: usize| {
        let c = ((p as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (c.floor() as usize).min(n.saturating_sub(2));
        (i, (i + 1).min(n - 1), c - i as f64)
    };
    let mut samples = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1, ty) = coord(y, sh);
        for x in 0..w {
            let (x0, x1, tx) = coord(x, sw);
            let top = small[y0 * sw + x0] * (1.0 - tx) + small[y0 * sw + x1] * tx;
            let bottom = small[y1 * sw + x0] * (1.0 - tx) + small[y1 * sw + x1] * tx;
            samples.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    ImagePlane::new(w, h, samples).expect("finite resampling")
}

/// Largest reference object; keeps edges in most 8x8 patches.
const MAX_OBJECT: u32 = 32;

fn reference_params(width: usize, height: usize, seed: u64, index: u64) -> SynthParams {
    SynthParams {
        width,
        height,
        gamma: 3.0,
        size_min: 2,
        size_max: (width.min(height) as u32).min(MAX_OBJECT),
        primitives: vec![Primitive::Square, Primitive::Circle, Primitive::Ellipse],
        color_model: ColorModel::Greyscale,
        source: SizeSource::PowerLaw,
        seed: rng::derive_seed(seed, Stream::Synth, index),
    }
}

/// Greyscale dead-leaves reference, softened by a sub-pixel blur so that
/// object borders are not aliased.
pub fn reference_image(width: usize, height: usize, seed: u64, index: u64) -> Result<ImagePlane> {
    let raw = generate_image(&reference_params(width, height, seed, index))?;
    Ok(to_8bit(gaussian_blur(&raw, 0.7)))
}

#[derive(Debug, Clone)]
pub struct DeskItem {
    pub name: String,
    pub image: ImagePlane,
    pub reference_id: String,
    pub distortion: Distortion,
    pub level: u32,
    pub mos: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskImageParams {
    pub references: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for DeskImageParams {
    fn default() -> Self {
        Self { references: 40, width: 128, height: 128, seed: 0 }
    }
}

/// Every reference under every distortion at every level.
pub fn desk_images(params: &DeskImageParams) -> Result<Vec<DeskItem>> {
    use rayon::prelude::*;
    if params.references < 2 {
        return Err(Error::param("the desk benchmark needs at least two references"));
    }
    let per_ref: Vec<Vec<DeskItem>> = (0..params.references)
        .into_par_iter()
        .map(|r| {
            let reference = reference_image(params.width, params.height, params.seed, r as u64)?;
            let mut items = Vec::new();
            for (di, d) in Distortion::ALL.into_iter().enumerate() {
                for level in 1..=LEVELS {
                    let index = (r * Distortion::ALL.len() + di) as u64 * LEVELS as u64 + level as u64;
                    let mut rng = rng::substream(params.seed, Stream::Distortion, index);
                    items.push(DeskItem {
                        name: format!("ref{r:03}_{d}_{level}"),
                        image: d.apply(&reference, level, &mut rng),
                        reference_id: format!("ref{r:03}"),
                        distortion: d,
                        level,
                        mos: proxy_mos(level as f64),
                    });
                }
            }
            Ok(items)
        })
        .collect::<Result<_>>()?;
    Ok(per_ref.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskVideoParams {
    pub references: usize,
    /// Frame size; frames are windows panning over a larger reference.
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub seconds: f64,
    pub seed: u64,
}

impl Default for DeskVideoParams {
    fn default() -> Self {
        Self { references: 12, width: 64, height: 64, fps: 30.0, seconds: 10.0, seed: 0 }
    }
}

/// One synthetic video. Its level schedule changes once per second, at a
/// per-video phase that is not aligned with the sampling grid.
#[derive(Debug, Clone)]
pub struct DeskVideo {
    pub name: String,
    pub reference_id: String,
    pub distortion: Distortion,
    pub mos: f64,
    reference: ImagePlane,
    width: usize,
    height: usize,
    fps: f64,
    frames: usize,
    phase: f64,
    schedule: Vec<u32>,
    start: (f64, f64),
    velocity: (f64, f64),
    noise_seed: u64,
    next: usize,
}

impl DeskVideo {
    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn level_at(&self, frame: usize) -> u32 {
        let t = frame as f64 / self.fps;
        let slot = ((t + self.phase).floor() as usize).min(self.schedule.len() - 1);
        self.schedule[slot]
    }

    pub fn mean_level(&self) -> f64 {
        (0..self.frames).map(|k| self.level_at(k) as f64).sum::<f64>() / self.frames as f64
    }

    pub fn frame(&self, k: usize) -> ImagePlane {
        let t = k as f64 / self.fps;
        let max_x = (self.reference.width() - self.width) as f64;
        let max_y = (self.reference.height() - self.height) as f64;
        let ox = (self.start.0 + self.velocity.0 * t).rem_euclid(2.0 * max_x.max(1.0));
        let oy = (self.start.1 + self.velocity.1 * t).rem_euclid(2.0 * max_y.max(1.0));
        // Bounce between the borders.
        let ox = (if ox > max_x { 2.0 * max_x - ox } else { ox }).round() as usize;
        let oy = (if oy > max_y { 2.0 * max_y - oy } else { oy }).round() as usize;
        let crop: Vec<f64> = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x + ox, y + oy)))
            .map(|(x, y)| self.reference.get(x, y))
            .collect();
        let crop = ImagePlane::new(self.width, self.height, crop).expect("finite crop");
        let mut rng = rng::substream(self.noise_seed, Stream::Distortion, k as u64);
        self.distortion.apply(&crop, self.level_at(k), &mut rng)
    }

    /// Restarts iteration as a [`FrameSource`].
    pub fn rewind(&mut self) {
        self.next = 0;
    }
}

impl FrameSource for DeskVideo {
    fn fps(&self) -> f64 {
        self.fps
    }

    fn next_frame(&mut self) -> Result<Option<ImagePlane>> {
        if self.next >= self.frames {
            return Ok(None);
        }
        let f = self.frame(self.next);
        self.next += 1;
        Ok(Some(f))
    }
}

/// Every reference under every distortion, once per base level; the level
/// of each one-second slot wanders one step around the base.
pub fn desk_videos(params: &DeskVideoParams) -> Result<Vec<DeskVideo>> {
    if params.references < 2 {
        return Err(Error::param("the desk benchmark needs at least two references"));
    }
    if !(params.fps > 0.0) || !(params.seconds > 0.0) || params.width < 8 || params.height < 8 {
        return Err(Error::param("desk video needs positive fps and duration and frames of at least 8x8"));
    }
    let frames = (params.fps * params.seconds).round() as usize;
    let slots = params.seconds.ceil() as usize + 1;
    let mut videos = Vec::new();
    for r in 0..params.references {
        let reference = reference_image(params.width * 3 / 2, params.height * 3 / 2, params.seed, r as u64)?;
        for (di, d) in Distortion::ALL.into_iter().enumerate() {
            for base in 1..=LEVELS {
                let index = ((r * Distortion::ALL.len() + di) as u64) * LEVELS as u64 + base as u64;
                let mut rng = rng::substream(params.seed, Stream::Bench, index);
                let schedule: Vec<u32> = (0..slots)
                    .map(|_| (base as i64 + rng.random_range(-1..=1)).clamp(1, LEVELS as i64) as u32)
                    .collect();
                let speed = params.width as f64 / 8.0;
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let mut video = DeskVideo {
                    name: format!("ref{r:03}_{d}_{base}"),
                    reference_id: format!("ref{r:03}"),
                    distortion: d,
                    mos: 0.0,
                    width: params.width,
                    height: params.height,
                    fps: params.fps,
                    frames,
                    phase: rng.random_range(0.0..1.0),
                    schedule,
                    start: (
                        rng.random_range(0.0..(reference.width() - params.width) as f64),
                        rng.random_range(0.0..(reference.height() - params.height) as f64),
                    ),
                    velocity: (speed * angle.cos(), speed * angle.sin()),
                    noise_seed: rng::derive_seed(params.seed, Stream::Distortion, index),
                    reference: reference.clone(),
                    next: 0,
                };
                video.mos = proxy_mos(video.mean_level());
                videos.push(video);
            }
        }
    }
    Ok(videos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> ImagePlane {
        ImagePlane::new(16, 8, (0..128).map(|i| (i % 16) as f64 * 16.0).collect()).unwrap()
    }

    #[test]
    fn blur_preserves_constants_and_mean_of_ramp_rows() {
        let c = ImagePlane::constant(9, 7, 42.0).unwrap();
        assert!(gaussian_blur(&c, 2.0).samples().iter().all(|&v| (v - 42.0).abs() < 1e-12));
        let b = gaussian_blur(&ramp(), 1.0);
        assert!((b.get(8, 3) - 128.0).abs() < 1e-9);
    }

    #[test]
    fn quantization_levels() {
        let q = quantize(&ramp(), 3);
        let mut vals: Vec<f64> = q.samples().to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        assert_eq!(vals, vec![0.0, 127.5, 255.0]);
    }

    #[test]
    fn down_up_keeps_size_and_constants() {
        let c = ImagePlane::constant(10, 7, 9.0).unwrap();
        let out = down_up(&c, 3);
        assert_eq!((out.width(), out.height()), (10, 7));
        assert!(out.samples().iter().all(|&v| (v - 9.0).abs() < 1e-12));
    }

    #[test]
    fn distortions_are_8bit() {
        let mut rng = rng::seeded(0);
        for d in Distortion::ALL {
            let out = d.apply(&ramp(), 2, &mut rng);
            assert!(out.samples().iter().all(|&v| v.fract() == 0.0 && (0.0..=255.0).contains(&v)));
            assert_eq!(d.to_string().parse::<Distortion>().unwrap(), d);
        }
    }

    #[test]
    fn benchmark_shape_and_labels() {
        let items = desk_images(&DeskImageParams { references: 2, width: 32, height: 32, seed: 1 }).unwrap();
        assert_eq!(items.len(), 2 * 4 * 3);
        let mut mos: Vec<f64> = items.iter().map(|i| i.mos).collect();
        mos.sort_by(f64::total_cmp);
        mos.dedup();
        assert_eq!(mos, vec![25.0, 50.0, 75.0]);
        let again = desk_images(&DeskImageParams { references: 2, width: 32, height: 32, seed: 1 }).unwrap();
        assert!(items.iter().zip(&again).all(|(a, b)| a.image == b.image));
    }

    #[test]
    fn video_frames_and_labels() {
        let p = DeskVideoParams { references: 2, width: 16, height: 16, fps: 10.0, seconds: 3.0, seed: 2 };
        let mut videos = desk_videos(&p).unwrap();
        assert_eq!(videos.len(), 2 * 4 * 3);
        let v = &mut videos[5];
        assert_eq!(v.frame_count(), 30);
        assert!((v.mos - proxy_mos(v.mean_level())).abs() < 1e-12);
        let frames: Vec<ImagePlane> = std::iter::from_fn(|| v.next_frame().unwrap()).collect();
        assert_eq!(frames.len(), 30);
        assert_eq!(frames[7], v.frame(7));
        v.rewind();
        assert_eq!(v.next_frame().unwrap().unwrap(), frames[0]);
    }
}
