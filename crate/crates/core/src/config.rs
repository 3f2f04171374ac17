//! Experiment configuration (TOML) and the runner that turns it into a
//! report.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{
    build_codebook, build_codebook_from_images, BuildParams, Codebook, WhiteningKind, DEFAULT_MAX_ITER,
};
use crate::error::{Error, Result};
use crate::eval::desk::{desk_images, desk_videos, DeskImageParams, DeskVideoParams};
use crate::eval::{
    bench_timing, image_features, load_manifest, run_experiment, Channels, EvalReport, ExperimentOptions, LabelledSet,
    MediaKind,
};
use crate::preprocess::{item_seed, Channel, ImagePlane, RgbRaster};
use crate::regression::{KernelKind, SvrParams, DEFAULT_TOLERANCE};
use crate::rng::{self, Stream};
use crate::synthgen::{generate_image, ColorModel, Primitive, SizeSource, SynthParams};
use crate::video::{frame_features, FrameDirSource, FrameSource, Pooling, SampleRate, Y4mSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub splits: usize,
    pub train_fraction: f64,
    /// Descriptors sampled per image or frame (`m`).
    pub descriptors: usize,
    pub channels: Channels,
    /// Adds wall-clock timings to the report; they differ between runs.
    pub timing: bool,
    pub codebook: CodebookConfig,
    pub regressor: RegressorConfig,
    pub pooling: PoolingConfig,
    pub data: DataConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            splits: 10,
            train_fraction: 0.8,
            descriptors: 2048,
            channels: Channels::Luma,
            timing: false,
            codebook: CodebookConfig::default(),
            regressor: RegressorConfig::default(),
            pooling: PoolingConfig::default(),
            data: DataConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookSource {
    /// Dead-leaves images drawn from `[codebook.synthetic]`.
    Synthetic,
    /// Every image in the directory `path`.
    Images,
    /// A prebuilt codebook file at `path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    pub source: CodebookSource,
    pub path: Option<PathBuf>,
    pub codevectors: usize,
    pub patch_size: usize,
    pub whitening: WhiteningKind,
    /// Descriptors sampled per codebook image.
    pub per_image: usize,
    pub max_iter: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            source: CodebookSource::Synthetic,
            path: None,
            codevectors: 2048,
            patch_size: 8,
            whitening: WhiteningKind::Zca,
            per_image: 2048,
            max_iter: DEFAULT_MAX_ITER,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub images: usize,
    pub width: usize,
    pub height: usize,
    pub gamma: f64,
    pub size_min: u32,
    pub size_max: u32,
    pub primitives: Vec<Primitive>,
    pub color_model: ColorModel,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let p = SynthParams::default();
        Self {
            images: 10,
            width: p.width,
            height: p.height,
            gamma: p.gamma,
            size_min: p.size_min,
            size_max: p.size_max,
            primitives: p.primitives,
            color_model: p.color_model,
        }
    }
}

impl SyntheticConfig {
    pub fn params(&self, seed: u64) -> SynthParams {
        SynthParams {
            width: self.width,
            height: self.height,
            gamma: self.gamma,
            size_min: self.size_min,
            size_max: self.size_max,
            primitives: self.primitives.clone(),
            color_model: self.color_model,
            source: SizeSource::PowerLaw,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorConfig {
    pub c: f64,
    pub nu: f64,
    pub kernel: KernelKind,
    pub rbf_gamma: Option<f64>,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        let p = SvrParams::default();
        Self { c: p.c, nu: p.nu, kernel: p.kernel, rbf_gamma: p.rbf_gamma }
    }
}

impl RegressorConfig {
    pub fn params(&self) -> SvrParams {
        SvrParams {
            c: self.c,
            nu: self.nu,
            kernel: self.kernel,
            rbf_gamma: self.rbf_gamma,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    None,
    Avg,
    Std,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingConfig {
    pub mode: PoolingMode,
    /// Frames per second to sample, or `one_per_video`; absent means every
    /// frame.
    pub rate: Option<String>,
    pub segment_seconds: f64,
    /// Frame rate assumed for frame directories.
    pub frame_dir_fps: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self { mode: PoolingMode::None, rate: None, segment_seconds: 1.0, frame_dir_fps: 30.0 }
    }
}

impl PoolingConfig {
    pub fn sample_rate(&self, native_fps: f64) -> Result<SampleRate> {
        match &self.rate {
            None => Ok(SampleRate::PerSecond(native_fps)),
            Some(r) => r.parse(),
        }
    }

    pub fn pooling(&self) -> Option<Pooling> {
        match self.mode {
            PoolingMode::None => None,
            PoolingMode::Avg => Some(Pooling::Average),
            PoolingMode::Std => Some(Pooling::Std { segment_seconds: self.segment_seconds }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Builtin {
    #[serde(rename = "desk-images")]
    DeskImages,
    #[serde(rename = "desk-video")]
    DeskVideo,
}

impl Builtin {
    fn name(self) -> &'static str {
        match self {
            Builtin::DeskImages => "desk-images",
            Builtin::DeskVideo => "desk-video",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<Builtin>,
    #[serde(default)]
    pub desk_images: DeskImageParams,
    #[serde(default)]
    pub desk_video: DeskVideoParams,
}

impl Default for DataSource {
    fn default() -> Self {
        Self {
            name: None,
            manifest: None,
            builtin: Some(Builtin::DeskImages),
            desk_images: DeskImageParams::default(),
            desk_video: DeskVideoParams::default(),
        }
    }
}

impl DataSource {
    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match (&self.manifest, self.builtin) {
            (Some(m), _) => {
                m.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "manifest".into())
            }
            (None, Some(b)) => b.name().into(),
            (None, None) => "unnamed".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: DataSource,
    pub cross: Vec<DataSource>,
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), message: message.into() }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .map(|s| text[s].trim().to_string())
                .filter(|k| !k.is_empty())
                .unwrap_or_else(|| "<root>".into());
            config_err(&key, e.message())
        })?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates; relative paths resolve against the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new("")).to_path_buf())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| if v == 0 { Err(config_err(key, "must be at least 1")) } else { Ok(()) };
        positive("splits", self.splits)?;
        positive("descriptors", self.descriptors)?;
        positive("codebook.codevectors", self.codebook.codevectors)?;
        positive("codebook.patch_size", self.codebook.patch_size)?;
        positive("codebook.per_image", self.codebook.per_image)?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(config_err("train_fraction", format!("must lie in (0, 1), got {}", self.train_fraction)));
        }
        let cb = &self.codebook;
        match cb.source {
            CodebookSource::Synthetic => {
                positive("codebook.synthetic.images", cb.synthetic.images)?;
                cb.synthetic.params(0).validate().map_err(|e| config_err("codebook.synthetic", e.to_string()))?;
            }
            CodebookSource::Images | CodebookSource::File => {
                let p = cb.path.as_ref().ok_or_else(|| config_err("codebook.path", "required for this source"))?;
                let p = self.resolve(p);
                let ok = if cb.source == CodebookSource::Images { p.is_dir() } else { p.is_file() };
                if !ok {
                    return Err(config_err("codebook.path", format!("`{}` does not exist", p.display())));
                }
            }
        }
        self.regressor.params().validate().map_err(|e| config_err("regressor", e.to_string()))?;
        self.pooling.sample_rate(30.0).map_err(|e| config_err("pooling.rate", e.to_string()))?;
        if !(self.pooling.segment_seconds > 0.0) {
            return Err(config_err("pooling.segment_seconds", "must be positive"));
        }
        if !(self.pooling.frame_dir_fps > 0.0) {
            return Err(config_err("pooling.frame_dir_fps", "must be positive"));
        }
        let mut names = std::collections::BTreeSet::new();
        for (key, src) in std::iter::once(("data.train".to_string(), &self.data.train))
            .chain(self.data.cross.iter().enumerate().map(|(i, s)| (format!("data.cross[{i}]"), s)))
        {
            match (&src.manifest, src.builtin) {
                (Some(_), Some(_)) => return Err(config_err(&key, "give either `manifest` or `builtin`, not both")),
                (None, None) => return Err(config_err(&key, "needs `manifest` or `builtin`")),
                (Some(m), None) => {
                    if !self.resolve(m).is_file() {
                        return Err(config_err(
                            &format!("{key}.manifest"),
                            format!("`{}` does not exist", m.display()),
                        ));
                    }
                }
                (None, Some(Builtin::DeskVideo)) if self.pooling.mode == PoolingMode::None => {
                    return Err(config_err("pooling.mode", "video data needs avg or std pooling"));
                }
                (None, Some(_)) => {}
            }
            if !names.insert(src.display_name()) {
                return Err(config_err(&key, format!("duplicate data set name `{}`", src.display_name())));
            }
        }
        Ok(())
    }

    pub fn build_params(&self) -> BuildParams {
        BuildParams {
            channel: Channel::Luma,
            patch_size: self.codebook.patch_size,
            per_image: self.codebook.per_image,
            codevectors: self.codebook.codevectors,
            whitening: self.codebook.whitening,
            seed: self.seed,
            max_iter: self.codebook.max_iter,
        }
    }

    pub fn experiment_options(&self) -> ExperimentOptions {
        ExperimentOptions {
            splits: self.splits,
            train_fraction: self.train_fraction,
            svr: self.regressor.params(),
            seed: self.seed,
        }
    }
}

/// Codebook named by the configuration.
pub fn obtain_codebook(cfg: &ExperimentConfig) -> Result<Codebook> {
    let cb = &cfg.codebook;
    match cb.source {
        CodebookSource::File => Codebook::load(cfg.resolve(cb.path.as_ref().expect("validated"))),
        CodebookSource::Images => {
            let dir = cfg.resolve(cb.path.as_ref().expect("validated"));
            build_codebook(&crate::io::list_images(&dir)?, &cfg.build_params())
        }
        CodebookSource::Synthetic => {
            let images = (0..cb.synthetic.images)
                .into_par_iter()
                .map(|i| {
                    let seed = rng::derive_seed(cfg.seed, Stream::Synth, i as u64);
                    Ok(RgbRaster::from_grey(&generate_image(&cb.synthetic.params(seed))?))
                })
                .collect::<Result<Vec<_>>>()?;
            build_codebook_from_images(&images, &cfg.build_params(), "synthetic")
        }
    }
}

struct Computed {
    set: LabelledSet,
    /// Luma planes of up to a few images, for timing.
    samples: Vec<ImagePlane>,
}

const TIMING_IMAGES: usize = 8;

fn video_features(
    cfg: &ExperimentConfig,
    book: &Codebook,
    source: &mut dyn FrameSource,
    seed: u64,
) -> Result<Vec<f64>> {
    let pooling =
        cfg.pooling.pooling().ok_or_else(|| config_err("pooling.mode", "video data needs avg or std pooling"))?;
    let rate = cfg.pooling.sample_rate(source.fps())?;
    let series = frame_features(source, book, rate, cfg.descriptors, seed)?;
    pooling.apply(&series)
}

fn compute_set(cfg: &ExperimentConfig, book: &Codebook, src: &DataSource) -> Result<Computed> {
    let name = src.display_name();
    let m = cfg.descriptors;
    if let Some(manifest) = &src.manifest {
        let manifest = load_manifest(cfg.resolve(manifest))?;
        let rows = manifest
            .entries
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let seed = item_seed(cfg.seed, i as u64);
                match e.kind {
                    MediaKind::Image => {
                        let img = crate::io::load_rgb(&e.path)?;
                        let f = image_features(book, &img, cfg.channels, m, seed)?;
                        let plane = (i < TIMING_IMAGES)
                            .then(|| crate::preprocess::rgb_to_yuv(&img).map(|p| p.0))
                            .transpose()?;
                        Ok((f, plane))
                    }
                    MediaKind::Video => {
                        let is_y4m = e.path.extension().is_some_and(|x| x.eq_ignore_ascii_case("y4m"));
                        let f = if is_y4m {
                            video_features(cfg, book, &mut Y4mSource::open(&e.path)?, seed)?
                        } else {
                            video_features(
                                cfg,
                                book,
                                &mut FrameDirSource::open(&e.path, cfg.pooling.frame_dir_fps)?,
                                seed,
                            )?
                        };
                        Ok((f, None))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (features, planes): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        return Ok(Computed {
            set: LabelledSet {
                name,
                features,
                mos: manifest.entries.iter().map(|e| e.mos).collect(),
                reference_ids: manifest.reference_ids(),
            },
            samples: planes.into_iter().flatten().collect(),
        });
    }
    match src.builtin.expect("validated") {
        Builtin::DeskImages => {
            let items = desk_images(&src.desk_images)?;
            let features = items
                .par_iter()
                .enumerate()
                .map(|(i, it)| {
                    image_features(
                        book,
                        &RgbRaster::from_grey(&it.image),
                        cfg.channels,
                        m,
                        item_seed(cfg.seed, i as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Computed {
                set: LabelledSet {
                    name,
                    features,
                    mos: items.iter().map(|i| i.mos).collect(),
                    reference_ids: items.iter().map(|i| i.reference_id.clone()).collect(),
                },
                samples: items.iter().take(TIMING_IMAGES).map(|i| i.image.clone()).collect(),
            })
        }
        Builtin::DeskVideo => {
            let mut videos = desk_videos(&src.desk_video)?;
            let features = videos
                .par_iter_mut()
                .enumerate()
                .map(|(i, v)| video_features(cfg, book, v, item_seed(cfg.seed, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Computed {
                set: LabelledSet {
                    name,
                    features,
                    mos: videos.iter().map(|v| v.mos).collect(),
                    reference_ids: videos.iter().map(|v| v.reference_id.clone()).collect(),
                },
                samples: Vec::new(),
            })
        }
    }
}

/// Builds or loads the codebook, extracts features for every data set and
/// runs the multi-split experiment.
pub fn run_config(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let book = obtain_codebook(cfg)?;
    log::info!("codebook {} with {} codevectors", book.id(), book.size());
    let train = compute_set(cfg, &book, &cfg.data.train)?;
    let cross = cfg.data.cross.iter().map(|s| compute_set(cfg, &book, s).map(|c| c.set)).collect::<Result<Vec<_>>>()?;
    let echo = serde_json::to_value(cfg)?;
    let mut report = run_experiment(&train.set, &cross, &cfg.experiment_options(), echo)?;
    if cfg.timing {
        if train.samples.is_empty() {
            log::warn!("no still images in the training set; timing skipped");
        } else {
            let model = crate::regression::train_nusvr(&train.set.features, &train.set.mos, &cfg.regressor.params())?;
            report.timing = Some(bench_timing(&book, &train.samples, Some(&model), cfg.descriptors, 5, cfg.seed)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("", ".").unwrap();
        assert_eq!(cfg.codebook.codevectors, 2048);
        assert_eq!(cfg.codebook.patch_size, 8);
        assert_eq!(cfg.descriptors, 2048);
        assert_eq!(cfg.codebook.whitening, WhiteningKind::Zca);
        assert_eq!((cfg.regressor.c, cfg.regressor.nu, cfg.regressor.kernel), (1.0, 0.5, KernelKind::Rbf));
        assert_eq!(cfg.splits, 10);
    }

    #[test]
    fn zero_codevectors_is_rejected_with_its_key() {
        let err = ExperimentConfig::from_toml_str("[codebook]\ncodevectors = 0\n", ".").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "codebook.codevectors"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("[regressor]\nepsilon = 0.1\n", ".").unwrap_err();
        assert!(err.to_string().contains("epsilon"), "{err}");
    }

    #[test]
    fn missing_paths_are_reported() {
        let err =
            ExperimentConfig::from_toml_str("[data.train]\nmanifest = \"nope.csv\"\nbuiltin = \"desk-images\"\n", ".");
        assert!(err.is_err());
        let err = ExperimentConfig::from_toml_str("[data.train]\nmanifest = \"/no/such/file.csv\"\n", ".").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "data.train.manifest"), "{err}");
        let err = ExperimentConfig::from_toml_str("[codebook]\nsource = \"file\"\n", ".").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "codebook.path"), "{err}");
    }

    #[test]
    fn video_needs_pooling() {
        let err = ExperimentConfig::from_toml_str("[data.train]\nbuiltin = \"desk-video\"\n", ".").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "pooling.mode"), "{err}");
    }

    #[test]
    fn small_run_end_to_end() {
        let text = r#"
            descriptors = 64
            splits = 3
            [codebook]
            codevectors = 8
            per_image = 256
            [codebook.synthetic]
            images = 2
            width = 64
            height = 64
            size_max = 64
            [data.train]
            builtin = "desk-images"
            desk_images = { references = 5, width = 48, height = 48 }
        "#;
        let cfg = ExperimentConfig::from_toml_str(text, ".").unwrap();
        let a = run_config(&cfg).unwrap();
        assert_eq!(a.splits.len(), 3);
        assert!(a.is_self_consistent());
        assert_eq!(a.to_json().unwrap(), run_config(&cfg).unwrap().to_json().unwrap());
    }
}
