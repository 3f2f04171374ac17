//! Datasets, content-independent splits, multi-split experiments and their
//! reports, and timing benchmarks.

pub mod desk;
pub mod metrics;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::encoder::{encode, encode_luma_chroma};
use crate::error::{Error, Result};
use crate::preprocess::{descriptors_from_planes, rgb_to_yuv, Channel, ImagePlane, RgbRaster};
use crate::regression::{train_nusvr, SvrModel, SvrParams};
use crate::rng::{self, Stream};

pub use metrics::{midranks, plcc, srcc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaKind {
    Image,
    Video,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub mos: f64,
    pub reference_id: String,
    pub distortion_type: String,
    pub kind: MediaKind,
    pub bitrate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct ManifestRow {
    path: String,
    mos: String,
    reference_id: String,
    distortion_type: String,
    kind: String,
    #[serde(default)]
    bitrate: Option<String>,
}

const MANIFEST_COLUMNS: [&str; 5] = ["path", "mos", "reference_id", "distortion_type", "kind"];

/// Reads a `path,mos,reference_id,distortion_type,kind[,bitrate]` CSV.
/// Relative media paths are resolved against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    for col in MANIFEST_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Manifest(format!("{}: missing column `{col}`", path.display())));
        }
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Manifest(format!("{}:{line}: {e}", path.display())))?;
        let mos: f64 = row.mos.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
            Error::Manifest(format!("{}:{line}: MOS `{}` is not a finite number", path.display(), row.mos))
        })?;
        let kind = match row.kind.as_str() {
            "image" => MediaKind::Image,
            "video" => MediaKind::Video,
            other => return Err(Error::Manifest(format!("{}:{line}: kind `{other}` (image, video)", path.display()))),
        };
        let bitrate = match row.bitrate.as_deref() {
            None | Some("") => None,
            Some(b) => Some(b.parse::<f64>().ok().filter(|v| *v >= 0.0 && v.is_finite()).ok_or_else(|| {
                Error::Manifest(format!("{}:{line}: bitrate `{b}` is not a nonnegative number", path.display()))
            })?),
        };
        if !seen.insert(row.path.clone()) {
            return Err(Error::Manifest(format!("{}:{line}: duplicate path `{}`", path.display(), row.path)));
        }
        entries.push(ManifestEntry {
            path: base.join(&row.path),
            mos,
            reference_id: row.reference_id,
            distortion_type: row.distortion_type,
            kind,
            bitrate,
        });
    }
    Ok(DatasetManifest { entries })
}

impl DatasetManifest {
    pub fn reference_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.reference_id.clone()).collect()
    }
}

/// Item indices on each side of one split, plus the reference ids behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train_refs: Vec<String>,
    pub test_refs: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions the distinct reference ids (not the items) so that
/// `round(train_fraction · ids)` of them, at least one and at most all but
/// one, go to training. `split_index` selects an independent shuffle.
pub fn content_independent_split(
    reference_ids: &[String],
    train_fraction: f64,
    seed: u64,
    split_index: u64,
) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::param(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut ids: Vec<&String> = reference_ids.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 2 {
        return Err(Error::param("a content-independent split needs at least two reference ids"));
    }
    ids.shuffle(&mut rng::substream(seed, Stream::Splits, split_index));
    let n_train = ((train_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let train_set: HashSet<&String> = ids[..n_train].iter().copied().collect();
    let mut train_refs: Vec<String> = ids[..n_train].iter().map(|s| s.to_string()).collect();
    let mut test_refs: Vec<String> = ids[n_train..].iter().map(|s| s.to_string()).collect();
    train_refs.sort();
    test_refs.sort();
    let (train, test) = (0..reference_ids.len()).partition(|&i| train_set.contains(&reference_ids[i]));
    Ok(Split { train_refs, test_refs, train, test })
}

/// Feature rows with labels and content ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledSet {
    pub name: String,
    pub features: Vec<Vec<f64>>,
    pub mos: Vec<f64>,
    pub reference_ids: Vec<String>,
}

impl LabelledSet {
    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.mos.len() || self.mos.len() != self.reference_ids.len() {
            return Err(Error::dim(format!("labelled set `{}` has mismatched column lengths", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// `None` when the correlation is undefined (constant predictions).
    pub plcc: Option<f64>,
    pub srcc: Option<f64>,
}

impl Scores {
    pub fn of(predictions: &[f64], mos: &[f64]) -> Result<Self> {
        let keep = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedCorrelation(why)) => {
                log::warn!("correlation undefined: {why}");
                Ok(None)
            }
            Err(e) => Err(e),
        };
        Ok(Self { plcc: keep(plcc(predictions, mos))?, srcc: keep(srcc(predictions, mos))? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub index: usize,
    pub train_items: usize,
    pub test_items: usize,
    pub test_references: Vec<String>,
    pub support_vectors: usize,
    /// Held-out side of the training set.
    pub test: Scores,
    /// Whole foreign datasets, by name.
    pub cross: BTreeMap<String, Scores>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub count: usize,
}

impl Stats {
    /// Population statistics over the defined values; `None` if there are none.
    pub fn of(values: &[Option<f64>]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().flatten().copied().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        v.sort_by(f64::total_cmp);
        let mid = v.len() / 2;
        let median = if v.len() % 2 == 0 { (v[mid - 1] + v[mid]) / 2.0 } else { v[mid] };
        Some(Self { mean, std, median, count: v.len() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub plcc: Option<Stats>,
    pub srcc: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeStat {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub samples: usize,
}

impl TimeStat {
    fn of(ms: &[f64]) -> Self {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        Self {
            mean_ms: mean,
            std_ms: (ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt(),
            samples: ms.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub warmup: usize,
    pub repetitions: usize,
    pub descriptors: usize,
    pub codevectors: usize,
    pub extraction: TimeStat,
    pub encoding: TimeStat,
    pub prediction: Option<TimeStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub train_set: String,
    pub splits: Vec<SplitResult>,
    /// Keyed by test-set name; the training set's own held-out side is
    /// listed under its name.
    pub aggregates: BTreeMap<String, Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timing: Option<TimingReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentOptions {
    pub splits: usize,
    pub train_fraction: f64,
    pub svr: SvrParams,
    pub seed: u64,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self { splits: 10, train_fraction: 0.8, svr: SvrParams::default(), seed: 0 }
    }
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Trains on the training side of each split and scores the held-out side
/// and every cross set in full. Splits run in parallel; results are kept
/// in split order.
pub fn run_experiment(
    train: &LabelledSet,
    cross: &[LabelledSet],
    opts: &ExperimentOptions,
    config: serde_json::Value,
) -> Result<EvalReport> {
    train.validate()?;
    for c in cross {
        c.validate()?;
        if c.name == train.name {
            return Err(Error::param(format!("cross set shares the training set's name `{}`", c.name)));
        }
    }
    if opts.splits == 0 {
        return Err(Error::param("at least one split is required"));
    }
    let splits: Vec<SplitResult> = (0..opts.splits)
        .into_par_iter()
        .map(|s| {
            let split = content_independent_split(&train.reference_ids, opts.train_fraction, opts.seed, s as u64)?;
            let model = train_nusvr(&pick(&train.features, &split.train), &pick(&train.mos, &split.train), &opts.svr)?;
            let predictions = model.predict_batch(&pick(&train.features, &split.test))?;
            let test = Scores::of(&predictions, &pick(&train.mos, &split.test))?;
            let cross = cross
                .iter()
                .map(|c| Ok((c.name.clone(), Scores::of(&model.predict_batch(&c.features)?, &c.mos)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(SplitResult {
                index: s,
                train_items: split.train.len(),
                test_items: split.test.len(),
                test_references: split.test_refs,
                support_vectors: model.support_vector_count(),
                test,
                cross,
            })
        })
        .collect::<Result<_>>()?;
    let aggregates = aggregate(&train.name, &splits);
    Ok(EvalReport { config, train_set: train.name.clone(), splits, aggregates, timing: None })
}

fn aggregate(train_name: &str, splits: &[SplitResult]) -> BTreeMap<String, Aggregate> {
    let mut per_set: BTreeMap<String, Vec<Scores>> = BTreeMap::new();
    for s in splits {
        per_set.entry(train_name.to_owned()).or_default().push(s.test);
        for (name, sc) in &s.cross {
            per_set.entry(name.clone()).or_default().push(*sc);
        }
    }
    per_set
        .into_iter()
        .map(|(name, scores)| {
            let p: Vec<Option<f64>> = scores.iter().map(|s| s.plcc).collect();
            let r: Vec<Option<f64>> = scores.iter().map(|s| s.srcc).collect();
            (name, Aggregate { plcc: Stats::of(&p), srcc: Stats::of(&r) })
        })
        .collect()
}

impl EvalReport {
    /// Whether the stored aggregates equal those recomputed from the splits.
    pub fn is_self_consistent(&self) -> bool {
        aggregate(&self.train_set, &self.splits) == self.aggregates
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One row per test set, training set first:
    /// `test_set,plcc,plcc_std,srcc,srcc_std`.
    pub fn write_table<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["test_set", "plcc", "plcc_std", "srcc", "srcc_std"])?;
        let names = std::iter::once(&self.train_set).chain(self.aggregates.keys().filter(|k| **k != self.train_set));
        let cell = |s: Option<Stats>, f: fn(&Stats) -> f64| s.map(|s| f(&s).to_string()).unwrap_or_default();
        for name in names {
            let Some(a) = self.aggregates.get(name) else { continue };
            w.write_record([
                name.clone(),
                cell(a.plcc, |s| s.mean),
                cell(a.plcc, |s| s.std),
                cell(a.srcc, |s| s.mean),
                cell(a.srcc, |s| s.std),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Which channels feed the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channels {
    #[serde(rename = "luma")]
    Luma,
    #[serde(rename = "luma+chroma")]
    LumaChroma,
}

/// Features of one image; luma and chroma patches share positions.
pub fn image_features(
    book: &Codebook,
    image: &RgbRaster,
    channels: Channels,
    descriptors: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (y, u, _) = rgb_to_yuv(image)?;
    plane_features(book, &y, Some(&u), channels, descriptors, seed)
}

pub fn plane_features(
    book: &Codebook,
    luma: &ImagePlane,
    chroma_u: Option<&ImagePlane>,
    channels: Channels,
    descriptors: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = book.patch_size();
    let xl = descriptors_from_planes(luma, luma, Channel::Luma, n, descriptors, seed)?;
    match channels {
        Channels::Luma => Ok(encode(book, &xl)?.values),
        Channels::LumaChroma => {
            let u = chroma_u.ok_or_else(|| Error::param("luma+chroma features need a chroma plane"))?;
            let xc = descriptors_from_planes(luma, u, Channel::Chroma, n, descriptors, seed)?;
            Ok(encode_luma_chroma(book, &xl, &xc)?.values)
        }
    }
}

pub const WARMUP: usize = 3;

/// Wall-clock cost per image of descriptor extraction, encoding and (with a
/// model) prediction, after [`WARMUP`] untimed passes.
pub fn bench_timing(
    book: &Codebook,
    images: &[ImagePlane],
    model: Option<&SvrModel>,
    descriptors: usize,
    repetitions: usize,
    seed: u64,
) -> Result<TimingReport> {
    if images.is_empty() {
        return Err(Error::NoInput("timing needs at least one image".into()));
    }
    if repetitions == 0 {
        return Err(Error::param("timing needs at least one repetition"));
    }
    if let Some(m) = model {
        if m.dims() != 2 * book.size() {
            return Err(Error::dim(format!("model expects {} features, codebook gives {}", m.dims(), 2 * book.size())));
        }
    }
    let (mut ext, mut enc, mut pred) = (Vec::new(), Vec::new(), Vec::new());
    let ms = |t: Instant| t.elapsed().as_secs_f64() * 1e3;
    for pass in 0..WARMUP + repetitions {
        for (i, img) in images.iter().enumerate() {
            let item_seed = rng::derive_seed(seed, Stream::Bench, i as u64);
            let t = Instant::now();
            let x = crate::preprocess::sample_patches(
                crate::preprocess::log_contrast(img).as_ref(),
                book.patch_size(),
                descriptors,
                item_seed,
            )?;
            let t_ext = ms(t);
            let t = Instant::now();
            let f = encode(book, &x)?;
            let t_enc = ms(t);
            let t_pred = match model {
                Some(m) => {
                    let t = Instant::now();
                    std::hint::black_box(m.predict(&f.values)?);
                    Some(ms(t))
                }
                None => None,
            };
            if pass >= WARMUP {
                ext.push(t_ext);
                enc.push(t_enc);
                pred.extend(t_pred);
            }
        }
    }
    Ok(TimingReport {
        warmup: WARMUP,
        repetitions,
        descriptors,
        codevectors: book.size(),
        extraction: TimeStat::of(&ext),
        encoding: TimeStat::of(&enc),
        prediction: model.map(|_| TimeStat::of(&pred)),
    })
}
