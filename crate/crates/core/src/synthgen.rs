//! Dead-leaves synthetic images: opaque random shapes with power-law sizes,
//! dropped on the canvas until it is fully covered and burnt in.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::ImagePlane;
use crate::rng;

/// Placements beyond first full coverage, as a multiple of the expected
/// number of objects needed to tile the canvas once.
const BURN_IN_FACTOR: f64 = 3.0;
/// Quadrature points for the size-law moments.
const MOMENT_GRID: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Square,
    Circle,
    Ellipse,
}

impl std::str::FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(Primitive::Square),
            "circle" => Ok(Primitive::Circle),
            "ellipse" => Ok(Primitive::Ellipse),
            other => Err(Error::param(format!("unknown primitive `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorModel {
    /// Each object is either 0 or 255.
    Binary,
    /// Each object gets a uniform integer grey level in 0..=255.
    Greyscale,
}

impl std::str::FromStr for ColorModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(ColorModel::Binary),
            "greyscale" | "grayscale" => Ok(ColorModel::Greyscale),
            other => Err(Error::param(format!("unknown color model `{other}`"))),
        }
    }
}

/// Where object sizes come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeSource {
    /// Truncated `p(s) ∝ s^-γ` on `[size_min, size_max]`.
    PowerLaw,
    /// Every object has this size.
    Delta(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub gamma: f64,
    pub size_min: u32,
    pub size_max: u32,
    pub primitives: Vec<Primitive>,
    pub color_model: ColorModel,
    pub source: SizeSource,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            gamma: 3.3,
            size_min: 4,
            size_max: 256,
            primitives: vec![Primitive::Square, Primitive::Circle],
            color_model: ColorModel::Binary,
            source: SizeSource::PowerLaw,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("image dimensions must be positive"));
        }
        check_law(self.gamma, self.size_min, self.size_max)?;
        let side = self.width.min(self.height) as u32;
        if self.size_max > side {
            return Err(Error::param(format!("size_max {} exceeds the smaller image side {side}", self.size_max)));
        }
        if let SizeSource::Delta(s) = self.source {
            if s == 0 || s > side {
                return Err(Error::param(format!("delta size {s} outside [1, {side}]")));
            }
        }
        if self.primitives.is_empty() {
            return Err(Error::param("at least one primitive is required"));
        }
        Ok(())
    }
}

fn check_law(gamma: f64, size_min: u32, size_max: u32) -> Result<()> {
    if !(gamma > 1.0) || !gamma.is_finite() {
        return Err(Error::param(format!("power-law exponent must exceed 1, got {gamma}")));
    }
    if size_min < 1 || size_min > size_max {
        return Err(Error::param(format!("invalid size bounds [{size_min}, {size_max}]")));
    }
    Ok(())
}

/// Inverse CDF of the truncated power law on `[min, max]`. `u = 0` maps to
/// `min` and `u → 1` to `max`.
pub fn truncated_power_law_quantile(u: f64, gamma: f64, min: f64, max: f64) -> f64 {
    if min == max {
        return min;
    }
    let g = 1.0 - gamma;
    let lo = min.powf(g);
    let hi = max.powf(g);
    (lo - u * (lo - hi)).powf(1.0 / g).clamp(min, max)
}

/// One object size drawn by inverse-CDF sampling, rounded to whole pixels.
pub fn sample_patch_size<R: Rng + ?Sized>(gamma: f64, size_min: u32, size_max: u32, rng: &mut R) -> Result<u32> {
    check_law(gamma, size_min, size_max)?;
    let u: f64 = rng.random();
    Ok(truncated_power_law_quantile(u, gamma, size_min as f64, size_max as f64).round() as u32)
}

/// One opaque object dropped on the canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub primitive: Primitive,
    pub center: (f64, f64),
    /// Side for squares, diameter for circles, the two axes for ellipses.
    pub size: (u32, u32),
    pub angle: f64,
    pub color: f64,
}

/// Mean covered area of one object, averaged over the primitive mix.
fn mean_object_area(params: &SynthParams) -> f64 {
    let (mean, mean_sq) = match params.source {
        SizeSource::Delta(s) => (s as f64, (s as f64).powi(2)),
        SizeSource::PowerLaw => {
            let (lo, hi) = (params.size_min as f64, params.size_max as f64);
            let (mut m1, mut m2) = (0.0, 0.0);
            for i in 0..MOMENT_GRID {
                let u = (i as f64 + 0.5) / MOMENT_GRID as f64;
                let s = truncated_power_law_quantile(u, params.gamma, lo, hi);
                m1 += s;
                m2 += s * s;
            }
            (m1 / MOMENT_GRID as f64, m2 / MOMENT_GRID as f64)
        }
    };
    let quarter_pi = std::f64::consts::FRAC_PI_4;
    let total: f64 = params
        .primitives
        .iter()
        .map(|p| match p {
            Primitive::Square => mean_sq,
            Primitive::Circle => quarter_pi * mean_sq,
            Primitive::Ellipse => quarter_pi * mean * mean,
        })
        .sum();
    total / params.primitives.len() as f64
}

/// Objects needed, on average, to cover the canvas area once.
pub fn expected_cover_count(params: &SynthParams) -> f64 {
    (params.width * params.height) as f64 / mean_object_area(params)
}

pub fn generate_image(params: &SynthParams) -> Result<ImagePlane> {
    generate_with_log(params).map(|(plane, _)| plane)
}

/// Like [`generate_image`], also returning every placement in order.
pub fn generate_with_log(params: &SynthParams) -> Result<(ImagePlane, Vec<Placement>)> {
    params.validate()?;
    let (w, h) = (params.width, params.height);
    let mut rng = rng::substream(params.seed, rng::Stream::Synth, 0);
    let min_placements = (BURN_IN_FACTOR * expected_cover_count(params)).ceil() as usize;

    let mut canvas = vec![f64::NAN; w * h];
    let mut uncovered = w * h;
    let mut log = Vec::new();

    while uncovered > 0 || log.len() < min_placements {
        let primitive = *params.primitives.choose(&mut rng).expect("validated non-empty");
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> u32 {
            match params.source {
                SizeSource::Delta(s) => s,
                SizeSource::PowerLaw => {
                    sample_patch_size(params.gamma, params.size_min, params.size_max, rng).expect("validated bounds")
                }
            }
        };
        let a = draw(&mut rng);
        let (size, angle) = match primitive {
            Primitive::Ellipse => {
                let b = draw(&mut rng);
                ((a, b), rng.random_range(0.0..std::f64::consts::PI))
            }
            _ => ((a, a), 0.0),
        };
        let center = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let color = match params.color_model {
            ColorModel::Binary => {
                if rng.random_bool(0.5) {
                    255.0
                } else {
                    0.0
                }
            }
            ColorModel::Greyscale => rng.random_range(0..=255u32) as f64,
        };
        let placement = Placement { primitive, center, size, angle, color };
        paint(&mut canvas, w, h, &placement, &mut uncovered);
        log.push(placement);
    }

    Ok((ImagePlane::new(w, h, canvas)?, log))
}

/// Paints pixels whose centres fall inside the shape.
fn paint(canvas: &mut [f64], w: usize, h: usize, p: &Placement, uncovered: &mut usize) {
    let (cx, cy) = p.center;
    let reach = p.size.0.max(p.size.1) as f64 / 2.0;
    let x0 = (cx - reach - 1.0).floor().max(0.0) as usize;
    let y0 = (cy - reach - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + reach + 1.0).ceil() as usize).min(w);
    let y1 = ((cy + reach + 1.0).ceil() as usize).min(h);
    let (sin, cos) = p.angle.sin_cos();
    let (ra, rb) = (p.size.0 as f64 / 2.0, p.size.1 as f64 / 2.0);

    for y in y0..y1 {
        let dy = y as f64 + 0.5 - cy;
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let inside = match p.primitive {
                Primitive::Square => dx >= -ra && dx < ra && dy >= -ra && dy < ra,
                Primitive::Circle => dx * dx + dy * dy <= ra * ra,
                Primitive::Ellipse => {
                    let u = (dx * cos + dy * sin) / ra;
                    let v = (-dx * sin + dy * cos) / rb;
                    u * u + v * v <= 1.0
                }
            };
            if inside {
                let px = &mut canvas[y * w + x];
                if px.is_nan() {
                    *uncovered -= 1;
                }
                *px = p.color;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthParams {
        SynthParams { width: 48, height: 40, size_min: 2, size_max: 32, seed, ..SynthParams::default() }
    }

    #[test]
    fn degenerate_support_is_constant() {
        let mut rng = rng::seeded(1);
        for _ in 0..100 {
            assert_eq!(sample_patch_size(2.0, 9, 9, &mut rng).unwrap(), 9);
        }
    }

    #[test]
    fn quantile_endpoints() {
        assert_eq!(truncated_power_law_quantile(0.0, 3.3, 4.0, 256.0), 4.0);
        let top = truncated_power_law_quantile(1.0, 3.3, 4.0, 256.0);
        assert!((top - 256.0).abs() < 1e-9);
    }

    #[test]
    fn exponent_at_most_one_is_rejected() {
        let mut rng = rng::seeded(0);
        assert!(sample_patch_size(1.0, 1, 10, &mut rng).is_err());
        assert!(sample_patch_size(0.5, 1, 10, &mut rng).is_err());
    }

    #[test]
    fn larger_exponent_gives_smaller_mean_size() {
        let mean = |gamma: f64| {
            let mut rng = rng::seeded(11);
            (0..10_000).map(|_| sample_patch_size(gamma, 2, 128, &mut rng).unwrap() as f64).sum::<f64>() / 1e4
        };
        let sizes: Vec<f64> = [1.5, 2.5, 3.5, 4.5].iter().map(|&g| mean(g)).collect();
        assert!(sizes.windows(2).all(|w| w[0] > w[1]), "{sizes:?}");
    }

    #[test]
    fn binary_images_have_two_levels_and_full_coverage() {
        let img = generate_image(&small(3)).unwrap();
        assert!(img.samples().iter().all(|&v| v == 0.0 || v == 255.0));
    }

    #[test]
    fn greyscale_images_are_covered() {
        let params = SynthParams { color_model: ColorModel::Greyscale, ..small(4) };
        let img = generate_image(&params).unwrap();
        assert!(img.samples().iter().all(|v| (0.0..=255.0).contains(v)));
    }

    #[test]
    fn delta_source_places_fixed_sizes() {
        let params = SynthParams {
            source: SizeSource::Delta(8),
            primitives: vec![Primitive::Square, Primitive::Circle, Primitive::Ellipse],
            ..small(5)
        };
        let (_, log) = generate_with_log(&params).unwrap();
        assert!(log.iter().all(|p| p.size == (8, 8)));
        assert!(log.len() as f64 >= 3.0 * expected_cover_count(&params));
    }

    #[test]
    fn generation_is_deterministic() {
        let params = SynthParams { primitives: vec![Primitive::Ellipse], ..small(6) };
        assert_eq!(generate_image(&params).unwrap(), generate_image(&params).unwrap());
        assert_ne!(
            generate_image(&params).unwrap(),
            generate_image(&SynthParams { seed: 7, ..params.clone() }).unwrap()
        );
    }

    #[test]
    fn oversized_objects_are_rejected() {
        let params = SynthParams { size_max: 41, ..small(0) };
        assert!(params.validate().is_err());
    }
}
