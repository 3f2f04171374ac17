//! Frame sampling, temporal pooling of per-frame features, and bitrate
//! rescaling of predicted scores.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::codebook::Codebook;
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::preprocess::{item_seed, log_contrast, sample_patches, ImagePlane};

/// Slack for floating-point bucket boundaries.
const BUCKET_EPS: f64 = 1e-9;

/// Per-frame feature rows with their timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSeries {
    fps: f64,
    timestamps: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl FrameFeatureSeries {
    pub fn new(fps: f64, timestamps: Vec<f64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::param(format!("frame rate must be positive, got {fps}")));
        }
        if timestamps.len() != rows.len() {
            return Err(Error::dim(format!("{} timestamps for {} rows", timestamps.len(), rows.len())));
        }
        if rows.is_empty() {
            return Err(Error::dim("empty frame series"));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("timestamps must be strictly increasing"));
        }
        let len = rows[0].len();
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::dim("frame feature rows differ in length"));
        }
        Ok(Self { fps, timestamps, rows })
    }

    /// Rows at frame indices `0, 1, ...` of a `fps` video.
    pub fn from_frames(fps: f64, rows: Vec<Vec<f64>>) -> Result<Self> {
        let timestamps = (0..rows.len()).map(|k| k as f64 / fps).collect();
        Self::new(fps, timestamps, rows)
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.rows[0].len()
    }

    /// Keeps the rows whose timestamp falls in the sampling grid of `rate`.
    pub fn subsample(&self, rate: SampleRate) -> Result<Self> {
        let mut keep = Vec::new();
        let mut last = None;
        for (i, &t) in self.timestamps.iter().enumerate() {
            let bucket = match rate {
                SampleRate::OnePerVideo => 0,
                SampleRate::PerSecond(r) => (t * r + BUCKET_EPS).floor() as i64,
            };
            if last != Some(bucket) {
                keep.push(i);
                last = Some(bucket);
            }
        }
        Self::new(
            self.fps,
            keep.iter().map(|&i| self.timestamps[i]).collect(),
            keep.iter().map(|&i| self.rows[i].clone()).collect(),
        )
    }
}

/// Frame sampling rate: frames per second, or a single frame per video.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleRate {
    PerSecond(f64),
    OnePerVideo,
}

impl SampleRate {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SampleRate::PerSecond(r) if !(r > 0.0 && r.is_finite()) => {
                Err(Error::param(format!("sampling rate must be positive, got {r}")))
            }
            _ => Ok(()),
        }
    }

    fn bucket(&self, frame: usize, fps: f64) -> i64 {
        match *self {
            SampleRate::OnePerVideo => 0,
            SampleRate::PerSecond(r) => (frame as f64 * r / fps + BUCKET_EPS).floor() as i64,
        }
    }

    /// Whether `frame` opens a new bucket. Depends only on the frame index,
    /// so sources can be sampled while streaming.
    pub fn selects(&self, frame: usize, fps: f64) -> bool {
        frame == 0 || self.bucket(frame, fps) != self.bucket(frame - 1, fps)
    }
}

impl fmt::Display for SampleRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleRate::PerSecond(r) => write!(f, "{r}"),
            SampleRate::OnePerVideo => f.write_str("one_per_video"),
        }
    }
}

impl FromStr for SampleRate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "one_per_video" {
            return Ok(SampleRate::OnePerVideo);
        }
        let rate = s
            .parse::<f64>()
            .map_err(|_| Error::param(format!("sampling rate `{s}` is neither a number nor one_per_video")))?;
        let rate = SampleRate::PerSecond(rate);
        rate.validate()?;
        Ok(rate)
    }
}

/// Indices of the first frame in each `1/rate`-second bucket.
pub fn sample_frames(frame_count: usize, fps: f64, rate: SampleRate) -> Result<Vec<usize>> {
    if frame_count == 0 {
        return Err(Error::dim("empty video"));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::param(format!("frame rate must be positive, got {fps}")));
    }
    rate.validate()?;
    Ok((0..frame_count).filter(|&k| rate.selects(k, fps)).collect())
}

fn mean_rows<'a>(rows: impl ExactSizeIterator<Item = &'a Vec<f64>>, len: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut acc = vec![0.0; len];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Coordinate-wise mean over all frames.
pub fn average_pool(series: &FrameFeatureSeries) -> Vec<f64> {
    mean_rows(series.rows.iter(), series.feature_len())
}

/// Per segment of `segment_seconds`, `[mean ‖ population std]`; the result is
/// the average of those concatenations. A trailing partial segment counts.
pub fn std_pool(series: &FrameFeatureSeries, segment_seconds: f64) -> Result<Vec<f64>> {
    if !(segment_seconds > 0.0 && segment_seconds.is_finite()) {
        return Err(Error::param(format!("segment length must be positive, got {segment_seconds}")));
    }
    let len = series.feature_len();
    let mut segments: Vec<Vec<&Vec<f64>>> = Vec::new();
    let mut current = None;
    for (t, row) in series.timestamps.iter().zip(&series.rows) {
        let s = (t / segment_seconds + BUCKET_EPS).floor() as i64;
        if current != Some(s) {
            segments.push(Vec::new());
            current = Some(s);
        }
        segments.last_mut().expect("pushed above").push(row);
    }
    let mut out = vec![0.0; 2 * len];
    for seg in &segments {
        let mean = mean_rows(seg.iter().copied(), len);
        for i in 0..len {
            let var = seg.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / seg.len() as f64;
            out[i] += mean[i];
            out[len + i] += var.sqrt();
        }
    }
    let n = segments.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pooling {
    Average,
    Std { segment_seconds: f64 },
}

impl Pooling {
    pub fn apply(&self, series: &FrameFeatureSeries) -> Result<Vec<f64>> {
        match *self {
            Pooling::Average => Ok(average_pool(series)),
            Pooling::Std { segment_seconds } => std_pool(series, segment_seconds),
        }
    }
}

/// `c·√b / (k + √b)`.
pub fn bitrate_multiplier(bitrate: f64, c: f64, k: f64) -> Result<f64> {
    if !(bitrate >= 0.0) || !(c > 0.0) || !(k > 0.0) {
        return Err(Error::param(format!("bitrate rescale needs b >= 0, c > 0, k > 0 (b={bitrate}, c={c}, k={k})")));
    }
    let s = bitrate.sqrt();
    Ok(if s.is_infinite() { c } else { c * s / (k + s) })
}

pub fn bitrate_rescale(raw_score: f64, bitrate: f64, c: f64, k: f64) -> Result<f64> {
    Ok(raw_score * bitrate_multiplier(bitrate, c, k)?)
}

/// Picks `k = √(median bitrate)` and the `c` that maps the largest rescaled
/// calibration score to 100. Raw scores must be nonnegative so that the
/// calibration set lands in `[0, 100]`.
pub fn calibrate_bitrate(raw_scores: &[f64], bitrates: &[f64]) -> Result<(f64, f64)> {
    if raw_scores.len() != bitrates.len() || raw_scores.is_empty() {
        return Err(Error::dim("calibration needs equally many scores and bitrates, at least one"));
    }
    if raw_scores.iter().any(|&s| !(s >= 0.0)) || bitrates.iter().any(|&b| !(b >= 0.0 && b.is_finite())) {
        return Err(Error::param("calibration scores and bitrates must be finite and nonnegative"));
    }
    let mut sorted = bitrates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 { (sorted[mid - 1] + sorted[mid]) / 2.0 } else { sorted[mid] };
    let k = median.sqrt();
    if !(k > 0.0) {
        return Err(Error::param("median calibration bitrate must be positive"));
    }
    let top = raw_scores.iter().zip(bitrates).map(|(&s, &b)| s * b.sqrt() / (k + b.sqrt())).fold(0.0, f64::max);
    if !(top > 0.0) {
        return Err(Error::param("calibration scores are all zero after the bitrate multiplier"));
    }
    Ok((100.0 / top, k))
}

/// A sequence of luma frames.
pub trait FrameSource {
    fn fps(&self) -> f64;
    /// Next frame's luma plane in `[0, 255]`, or `None` at the end.
    fn next_frame(&mut self) -> Result<Option<ImagePlane>>;
}

/// 8-bit Y4M input; only the Y plane is read.
pub struct Y4mSource {
    decoder: y4m::Decoder<BufReader<File>>,
    fps: f64,
}

fn y4m_error(e: y4m::Error) -> Error {
    match e {
        y4m::Error::IoError(e) => Error::Io(e),
        other => Error::format(format!("Y4M: {other:?}")),
    }
}

impl Y4mSource {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let decoder = y4m::decode(BufReader::new(File::open(path)?)).map_err(y4m_error)?;
        if decoder.get_bit_depth() != 8 {
            return Err(Error::format(format!("only 8-bit Y4M is supported, got {} bits", decoder.get_bit_depth())));
        }
        let rate = decoder.get_framerate();
        if rate.num == 0 || rate.den == 0 {
            return Err(Error::format("Y4M header has a zero frame rate"));
        }
        let fps = rate.num as f64 / rate.den as f64;
        Ok(Self { decoder, fps })
    }
}

impl FrameSource for Y4mSource {
    fn fps(&self) -> f64 {
        self.fps
    }

    fn next_frame(&mut self) -> Result<Option<ImagePlane>> {
        let (w, h) = (self.decoder.get_width(), self.decoder.get_height());
        match self.decoder.read_frame() {
            Ok(frame) => {
                let y = frame.get_y_plane();
                Ok(Some(ImagePlane::new(w, h, y.iter().map(|&b| b as f64).collect())?))
            }
            Err(y4m::Error::EOF) => Ok(None),
            Err(e) => Err(y4m_error(e)),
        }
    }
}

/// Numbered image files in a directory, ordered by the number in the stem.
pub struct FrameDirSource {
    paths: std::vec::IntoIter<PathBuf>,
    fps: f64,
}

impl FrameDirSource {
    pub fn open(dir: impl AsRef<Path>, fps: f64) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::param(format!("frame rate must be positive, got {fps}")));
        }
        let mut paths = crate::io::list_images(dir)?;
        let number = |p: &PathBuf| -> Option<u64> {
            let stem = p.file_stem()?.to_str()?;
            let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
            digits.parse().ok()
        };
        paths.sort_by(|a, b| number(a).cmp(&number(b)).then_with(|| a.cmp(b)));
        Ok(Self { paths: paths.into_iter(), fps })
    }
}

impl FrameSource for FrameDirSource {
    fn fps(&self) -> f64 {
        self.fps
    }

    fn next_frame(&mut self) -> Result<Option<ImagePlane>> {
        match self.paths.next() {
            Some(p) => {
                let (y, _, _) = crate::preprocess::rgb_to_yuv(&crate::io::load_rgb(p)?)?;
                Ok(Some(y))
            }
            None => Ok(None),
        }
    }
}

/// Reads the sampled frames of `source` with their frame indices.
pub fn collect_sampled(source: &mut dyn FrameSource, rate: SampleRate) -> Result<Vec<(usize, ImagePlane)>> {
    rate.validate()?;
    let fps = source.fps();
    let mut frames = Vec::new();
    let mut k = 0;
    while let Some(frame) = source.next_frame()? {
        if rate.selects(k, fps) {
            frames.push((k, frame));
        }
        k += 1;
    }
    if frames.is_empty() {
        return Err(Error::dim("empty video"));
    }
    Ok(frames)
}

/// Encodes each sampled frame's luma. Frame `k` draws its patches from the
/// sub-seed of index `k`.
pub fn frame_features(
    source: &mut dyn FrameSource,
    book: &Codebook,
    rate: SampleRate,
    descriptors: usize,
    seed: u64,
) -> Result<FrameFeatureSeries> {
    let fps = source.fps();
    let frames = collect_sampled(source, rate)?;
    let rows = frames
        .par_iter()
        .map(|(k, plane)| {
            let x = sample_patches(
                log_contrast(plane).as_ref(),
                book.patch_size(),
                descriptors,
                item_seed(seed, *k as u64),
            )?;
            Ok(encode(book, &x)?.values)
        })
        .collect::<Result<Vec<_>>>()?;
    FrameFeatureSeries::new(fps, frames.iter().map(|(k, _)| *k as f64 / fps).collect(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_rate_keeps_every_frame() {
        assert_eq!(sample_frames(7, 30.0, SampleRate::PerSecond(30.0)).unwrap(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn one_per_video() {
        assert_eq!(sample_frames(300, 30.0, SampleRate::OnePerVideo).unwrap(), vec![0]);
    }

    #[test]
    fn one_fps_over_ten_seconds() {
        let idx = sample_frames(300, 30.0, SampleRate::PerSecond(1.0)).unwrap();
        assert_eq!(idx, (0..10).map(|s| 30 * s).collect::<Vec<_>>());
    }

    #[test]
    fn fractional_frame_rate_buckets() {
        let fps = 30000.0 / 1001.0;
        let idx = sample_frames(300, fps, SampleRate::PerSecond(1.0)).unwrap();
        assert_eq!(idx, vec![0, 30, 60, 90, 120, 150, 180, 210, 240, 270]);
    }

    #[test]
    fn empty_video_and_bad_rate() {
        assert!(sample_frames(0, 30.0, SampleRate::PerSecond(1.0)).is_err());
        assert!("0".parse::<SampleRate>().is_err());
        assert_eq!("one_per_video".parse::<SampleRate>().unwrap(), SampleRate::OnePerVideo);
    }

    #[test]
    fn series_subsample_matches_index_sampling() {
        let s = FrameFeatureSeries::from_frames(30.0, (0..95).map(|k| vec![k as f64]).collect()).unwrap();
        let sub = s.subsample(SampleRate::PerSecond(2.0)).unwrap();
        let idx = sample_frames(95, 30.0, SampleRate::PerSecond(2.0)).unwrap();
        assert_eq!(sub.rows().iter().map(|r| r[0] as usize).collect::<Vec<_>>(), idx);
    }

    #[test]
    fn two_frame_pools() {
        let s = FrameFeatureSeries::from_frames(30.0, vec![vec![1.0, 4.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(average_pool(&s), vec![2.0, 2.0]);
        assert_eq!(std_pool(&s, 1.0).unwrap(), vec![2.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn constant_video_has_zero_std_block() {
        let s = FrameFeatureSeries::from_frames(25.0, vec![vec![0.5, 7.0, 0.0]; 80]).unwrap();
        assert_eq!(std_pool(&s, 1.0).unwrap(), vec![0.5, 7.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn segments_are_averaged() {
        // 1 fps, 2-second segments: {0, 1} and the partial {2}.
        let s = FrameFeatureSeries::from_frames(1.0, vec![vec![0.0], vec![2.0], vec![10.0]]).unwrap();
        assert_eq!(std_pool(&s, 2.0).unwrap(), vec![5.5, 0.5]);
    }

    #[test]
    fn timestamps_must_increase() {
        assert!(FrameFeatureSeries::new(30.0, vec![0.0, 0.0], vec![vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn bitrate_multiplier_landmarks() {
        assert_eq!(bitrate_multiplier(16.0, 3.0, 4.0).unwrap(), 1.5);
        assert_eq!(bitrate_multiplier(0.0, 3.0, 4.0).unwrap(), 0.0);
        assert_eq!(bitrate_multiplier(f64::INFINITY, 3.0, 4.0).unwrap(), 3.0);
        assert!((bitrate_multiplier(1e30, 3.0, 4.0).unwrap() - 3.0).abs() < 1e-12);
        assert!(bitrate_multiplier(-1.0, 3.0, 4.0).is_err());
    }

    #[test]
    fn calibration_maps_into_range() {
        let raw = [40.0, 55.0, 70.0, 20.0];
        let rates = [500.0, 1000.0, 4000.0, 250.0];
        let (c, k) = calibrate_bitrate(&raw, &rates).unwrap();
        let scaled: Vec<f64> = raw.iter().zip(&rates).map(|(&s, &b)| bitrate_rescale(s, b, c, k).unwrap()).collect();
        assert!(scaled.iter().all(|&v| (0.0..=100.0 + 1e-9).contains(&v)));
        assert!(scaled.iter().any(|&v| (v - 100.0).abs() < 1e-9));
    }

    #[test]
    fn y4m_source_reads_luma() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.y4m");
        {
            let file = File::create(&path).unwrap();
            let mut enc = y4m::encode(4, 2, y4m::Ratio::new(25, 1)).write_header(file).unwrap();
            for v in 0..3u8 {
                let y = [v * 10; 8];
                let uv = [128u8; 2];
                enc.write_frame(&y4m::Frame::new([&y, &uv, &uv], None)).unwrap();
            }
        }
        let mut src = Y4mSource::open(&path).unwrap();
        assert_eq!(src.fps(), 25.0);
        let frames = collect_sampled(&mut src, SampleRate::PerSecond(25.0)).unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!(frames[2].1.get(3, 1), 20.0);
    }

    #[test]
    fn frame_directory_orders_numerically() {
        let dir = tempfile::tempdir().unwrap();
        for (i, v) in [(10, 1.0), (2, 2.0), (1, 3.0)] {
            let plane = ImagePlane::constant(2, 2, v).unwrap();
            crate::io::save_plane(&plane, dir.path().join(format!("frame{i}.png"))).unwrap();
        }
        let mut src = FrameDirSource::open(dir.path(), 30.0).unwrap();
        let order: Vec<f64> = std::iter::from_fn(|| src.next_frame().unwrap()).map(|p| p.get(0, 0).round()).collect();
        assert_eq!(order, vec![3.0, 2.0, 1.0]);
    }

    proptest! {
        #[test]
        fn pools_ignore_frame_order(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut crate::rng::seeded(seed));
            let a = FrameFeatureSeries::from_frames(30.0, rows).unwrap();
            let b = FrameFeatureSeries::from_frames(30.0, shuffled).unwrap();
            for (x, y) in average_pool(&a).iter().zip(average_pool(&b)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in std_pool(&a, 1.0).unwrap().iter().zip(std_pool(&b, 1.0).unwrap()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn multiplier_is_increasing_and_bounded(b in 0.0f64..1e6, db in 1e-3f64..1e3, c in 0.1f64..10.0, k in 0.1f64..100.0) {
            let lo = bitrate_multiplier(b, c, k).unwrap();
            let hi = bitrate_multiplier(b + db, c, k).unwrap();
            prop_assert!(lo < hi && hi < c);
        }
    }
}
