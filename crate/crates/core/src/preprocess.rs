//! Colour conversion, log-contrast and random patch descriptors.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Patch-standard-deviation below which a patch is treated as flat.
const FLAT_PATCH_STD: f64 = 1e-10;

/// Interleaved RGB raster with real-valued samples on the 0..=255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbRaster {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl RgbRaster {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim("empty RGB image"));
        }
        if pixels.len() != width * height {
            return Err(Error::dim(format!("{} pixels for a {width}x{height} raster", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_rgb8(image: &image::RgbImage) -> Result<Self> {
        let pixels = image.pixels().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
        Self::new(image.width() as usize, image.height() as usize, pixels)
    }

    /// Grey raster with r = g = b = plane value.
    pub fn from_grey(plane: &ImagePlane) -> Self {
        let pixels = plane.samples.iter().map(|&v| [v, v, v]).collect();
        Self { width: plane.width, height: plane.height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }
}

/// A single real-valued image channel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    samples: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, samples: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim("empty plane"));
        }
        if samples.len() != width * height {
            return Err(Error::dim(format!("{} samples for a {width}x{height} plane", samples.len())));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image plane"));
        }
        Ok(Self { width, height, samples })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.samples[y * self.width + x]
    }

    /// Rounds and clamps to 8 bits, e.g. for writing PNGs.
    pub fn to_luma8(&self) -> image::GrayImage {
        let bytes = self.samples.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }
}

/// Log-contrast plane: `ln((I + 1) / I0)` with the samples summing to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastPlane(ImagePlane);

impl ContrastPlane {
    pub fn into_plane(self) -> ImagePlane {
        self.0
    }
}

impl AsRef<ImagePlane> for ContrastPlane {
    fn as_ref(&self) -> &ImagePlane {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Luma,
    Chroma,
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Channel::Luma => "luma",
            Channel::Chroma => "chroma",
        })
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "luma" => Ok(Channel::Luma),
            "chroma" => Ok(Channel::Chroma),
            other => Err(Error::param(format!("unknown channel `{other}`"))),
        }
    }
}

/// How each descriptor column was normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Each patch standardised to mean 0, std 1 (flat patches become zero).
    PerPatch,
    /// Untouched patch values, for the component-wise eigen analysis.
    Raw,
}

/// `d x m` matrix whose columns are flattened `n x n` patches.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatrix {
    data: DMatrix<f64>,
    channel: Channel,
    patch_size: usize,
    normalization: Normalization,
    whitened: bool,
}

impl DescriptorMatrix {
    /// Wraps an existing `d x m` matrix; `d` must equal `patch_size²`.
    pub fn from_matrix(
        data: DMatrix<f64>,
        patch_size: usize,
        channel: Channel,
        normalization: Normalization,
    ) -> Result<Self> {
        if data.nrows() != patch_size * patch_size {
            return Err(Error::dim(format!(
                "descriptor dimension {} does not match patch size {patch_size}",
                data.nrows()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("descriptor matrix"));
        }
        Ok(Self { data, channel, patch_size, normalization, whitened: false })
    }

    /// Dimension `d = n²`.
    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    /// Number of descriptors `m`.
    pub fn count(&self) -> usize {
        self.data.ncols()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn is_whitened(&self) -> bool {
        self.whitened
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.data.as_slice()[j * d..(j + 1) * d]
    }

    pub fn with_channel(mut self, channel: Channel) -> Self {
        self.channel = channel;
        self
    }

    pub(crate) fn replace_data(&self, data: DMatrix<f64>, whitened: bool) -> Self {
        Self { data, channel: self.channel, patch_size: self.patch_size, normalization: self.normalization, whitened }
    }

    /// Column-wise concatenation; all parts must share `d`.
    pub fn concat(parts: &[DescriptorMatrix]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("no descriptor matrices"))?;
        let d = first.dim();
        if parts.iter().any(|p| p.dim() != d || p.whitened != first.whitened) {
            return Err(Error::dim("mixed descriptor dimensions"));
        }
        let total: usize = parts.iter().map(|p| p.count()).sum();
        let mut buf = Vec::with_capacity(d * total);
        for p in parts {
            buf.extend_from_slice(p.data.as_slice());
        }
        Ok(first.replace_data(DMatrix::from_vec(d, total, buf), first.whitened))
    }
}

/// BT.601 full-range RGB → YUV. U and V are centred on 128; all three
/// outputs are clamped to `[0, 255]`.
pub fn rgb_to_yuv(image: &RgbRaster) -> Result<(ImagePlane, ImagePlane, ImagePlane)> {
    let n = image.pixels.len();
    let (mut y, mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for &[r, g, b] in &image.pixels {
        y.push((0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 255.0));
        u.push((128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b).clamp(0.0, 255.0));
        v.push((128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b).clamp(0.0, 255.0));
    }
    let (w, h) = (image.width, image.height);
    Ok((ImagePlane::new(w, h, y)?, ImagePlane::new(w, h, u)?, ImagePlane::new(w, h, v)?))
}

/// `φ(x) = ln((I(x) + 1) / I0)` where `I0` is the geometric mean of `I + 1`,
/// which is the same as subtracting the mean log.
pub fn log_contrast(plane: &ImagePlane) -> ContrastPlane {
    let mut logs: Vec<f64> = plane.samples.iter().map(|&v| (v + 1.0).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    for v in &mut logs {
        *v -= mean;
    }
    ContrastPlane(ImagePlane { width: plane.width, height: plane.height, samples: logs })
}

/// Samples `m` random `n x n` patches (uniform top-left corners, with
/// replacement) and standardises each one.
pub fn sample_patches(plane: &ImagePlane, n: usize, m: usize, seed: u64) -> Result<DescriptorMatrix> {
    let mut data = collect_patches(plane, n, m, seed)?;
    for col in data.as_mut_slice().chunks_exact_mut(n * n) {
        standardize_patch(col);
    }
    DescriptorMatrix::from_matrix(data, n, Channel::Luma, Normalization::PerPatch)
}

/// Same positions as [`sample_patches`] for a given seed, without the
/// per-patch standardisation.
pub fn sample_raw_patches(plane: &ImagePlane, n: usize, m: usize, seed: u64) -> Result<DescriptorMatrix> {
    let data = collect_patches(plane, n, m, seed)?;
    DescriptorMatrix::from_matrix(data, n, Channel::Luma, Normalization::Raw)
}

fn collect_patches(plane: &ImagePlane, n: usize, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::param("patch size must be positive"));
    }
    if m == 0 {
        return Err(Error::param("descriptor count must be positive"));
    }
    if plane.width < n || plane.height < n {
        return Err(Error::dim(format!("{}x{} plane is smaller than a {n}x{n} patch", plane.width, plane.height)));
    }
    let d = n * n;
    let mut rng = rng::seeded(seed);
    let mut buf = Vec::with_capacity(d * m);
    for _ in 0..m {
        let x0 = rng.random_range(0..=plane.width - n);
        let y0 = rng.random_range(0..=plane.height - n);
        for y in y0..y0 + n {
            let row = y * plane.width;
            buf.extend_from_slice(&plane.samples[row + x0..row + x0 + n]);
        }
    }
    Ok(DMatrix::from_vec(d, m, buf))
}

/// In-place mean-0 / std-1 (population std); flat patches become zero.
pub fn standardize_patch(patch: &mut [f64]) {
    let len = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / len;
    let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;
    let std = var.sqrt();
    if std < FLAT_PATCH_STD {
        patch.fill(0.0);
    } else {
        for v in patch.iter_mut() {
            *v = (*v - mean) / std;
        }
    }
}

/// Full per-image extraction: luma goes through log-contrast, chroma (the U
/// plane) is sampled directly.
pub fn extract_descriptors(
    image: &RgbRaster,
    channel: Channel,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<DescriptorMatrix> {
    let (y, u, _) = rgb_to_yuv(image)?;
    descriptors_from_planes(&y, &u, channel, n, m, seed)
}

/// [`extract_descriptors`] for callers that already hold Y and U planes
/// (e.g. Y4M frames).
pub fn descriptors_from_planes(
    luma: &ImagePlane,
    chroma_u: &ImagePlane,
    channel: Channel,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<DescriptorMatrix> {
    match channel {
        Channel::Luma => sample_patches(log_contrast(luma).as_ref(), n, m, seed),
        Channel::Chroma => Ok(sample_patches(chroma_u, n, m, seed)?.with_channel(Channel::Chroma)),
    }
}

/// Raw log-contrast luma patches for the eigen-spectrum path.
pub fn extract_raw_luma(image: &RgbRaster, n: usize, m: usize, seed: u64) -> Result<DescriptorMatrix> {
    let (y, _, _) = rgb_to_yuv(image)?;
    sample_raw_patches(log_contrast(&y).as_ref(), n, m, seed)
}

/// Seed for descriptor sampling of item `index` under a global seed.
pub fn item_seed(seed: u64, index: u64) -> u64 {
    rng::derive_seed(seed, rng::Stream::Patches, index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn raster(w: usize, h: usize, rgb: [f64; 3]) -> RgbRaster {
        RgbRaster::new(w, h, vec![rgb; w * h]).unwrap()
    }

    #[test]
    fn grey_is_an_achromatic_fixed_point() {
        let (y, u, v) = rgb_to_yuv(&raster(2, 2, [128.0; 3])).unwrap();
        for plane in [&y, &u, &v] {
            assert!(plane.samples().iter().all(|&s| close(s, 128.0, 1e-9)));
        }
    }

    #[test]
    fn white_has_full_luma() {
        let (y, _, _) = rgb_to_yuv(&raster(1, 1, [255.0; 3])).unwrap();
        assert!(close(y.get(0, 0), 255.0, 1e-9));
    }

    #[test]
    fn pure_red() {
        let (y, u, v) = rgb_to_yuv(&raster(1, 1, [255.0, 0.0, 0.0])).unwrap();
        assert!(close(y.get(0, 0), 76.245, 1e-9));
        assert!(close(u.get(0, 0), 84.97232, 1e-5));
        assert_eq!(v.get(0, 0), 255.0);
    }

    #[test]
    fn empty_raster_is_rejected() {
        assert!(matches!(RgbRaster::new(0, 3, vec![]), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_plane_has_zero_contrast() {
        let phi = log_contrast(&ImagePlane::constant(5, 3, 42.0).unwrap());
        assert!(phi.as_ref().samples().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn log_contrast_on_exponential_ramp() {
        let e = std::f64::consts::E;
        let plane = ImagePlane::new(2, 2, vec![0.0, e - 1.0, e * e - 1.0, e * e * e - 1.0]).unwrap();
        let phi = log_contrast(&plane);
        for (got, want) in phi.as_ref().samples().iter().zip([-1.5, -0.5, 0.5, 1.5]) {
            assert!(close(*got, want, 1e-12), "{got} vs {want}");
        }
    }

    #[test]
    fn single_position_patch() {
        let plane = ImagePlane::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = sample_patches(&plane, 2, 1, 3).unwrap();
        let s = 1.25f64.sqrt();
        let want = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
        for (got, want) in x.column(0).iter().zip(want) {
            assert!(close(*got, want, 1e-12));
        }
    }

    #[test]
    fn flat_patch_becomes_zero() {
        let plane = ImagePlane::constant(10, 10, 7.0).unwrap();
        let x = sample_patches(&plane, 4, 5, 1).unwrap();
        assert!(x.matrix().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_plane_is_a_dimension_error() {
        let plane = ImagePlane::constant(7, 20, 1.0).unwrap();
        assert!(matches!(sample_patches(&plane, 8, 4, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn sampling_is_deterministic() {
        let samples: Vec<f64> = (0..40 * 30).map(|i| ((i * 37) % 101) as f64).collect();
        let plane = ImagePlane::new(40, 30, samples).unwrap();
        let a = sample_patches(&plane, 8, 64, 99).unwrap();
        let b = sample_patches(&plane, 8, 64, 99).unwrap();
        let bits = |x: &DescriptorMatrix| x.matrix().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&sample_patches(&plane, 8, 64, 100).unwrap()));
    }

    proptest! {
        #[test]
        fn contrast_sums_to_zero(samples in prop::collection::vec(0.0f64..255.0, 12..200)) {
            let w = 4;
            let h = samples.len() / w;
            let plane = ImagePlane::new(w, h, samples[..w * h].to_vec()).unwrap();
            let phi = log_contrast(&plane);
            let sum: f64 = phi.as_ref().samples().iter().sum();
            prop_assert!(sum.abs() < 1e-6 * (w * h) as f64);
        }

        #[test]
        fn descriptors_are_standardized(
            samples in prop::collection::vec(0.0f64..255.0, 144),
            seed in any::<u64>(),
        ) {
            let plane = ImagePlane::new(12, 12, samples).unwrap();
            let x = sample_patches(log_contrast(&plane).as_ref(), 4, 16, seed).unwrap();
            for j in 0..x.count() {
                let col = x.column(j);
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
                prop_assert!(mean.abs() < 1e-6);
                prop_assert!(col.iter().all(|&v| v == 0.0) || (std - 1.0).abs() < 1e-6);
            }
        }
    }
}
