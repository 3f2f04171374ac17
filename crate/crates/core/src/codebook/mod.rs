//! Codebook construction: aggregate descriptors, whiten them jointly,
//! cluster with k-means, persist.

mod kmeans;
mod whitening;

pub use kmeans::{kmeans, KMeansResult, DEFAULT_MAX_ITER};
pub use whitening::{
    apply_whitening, compute_zca, fourier_whiten, zca_matrix, FourierWhitener, WhiteningKind, WhiteningTransform,
    EIGEN_FLOOR,
};

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::preprocess::{self, Channel, DescriptorMatrix, RgbRaster};

const MAGIC: &[u8; 4] = b"CBK1";
/// Component std floor for the eigen-spectrum standardisation.
const COMPONENT_STD_FLOOR: f64 = 1e-12;

/// `K` codevectors of dimension `d = n²` plus the whitening used to build
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    patch_size: usize,
    whitening: WhiteningTransform,
    codevectors: DMatrix<f64>,
    /// `K x d`, kept alongside for the encoding GEMM.
    codevectors_t: DMatrix<f64>,
    provenance: String,
    id: OnceLock<String>,
}

impl Codebook {
    pub fn new(
        patch_size: usize,
        whitening: WhiteningTransform,
        codevectors: DMatrix<f64>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let d = patch_size * patch_size;
        if patch_size == 0 || codevectors.nrows() != d || whitening.dim() != d {
            return Err(Error::dim(format!(
                "codebook of {}-dimensional codevectors with {}-dimensional whitening for patch size {patch_size}",
                codevectors.nrows(),
                whitening.dim()
            )));
        }
        if codevectors.ncols() == 0 {
            return Err(Error::param("codebook needs at least one codevector"));
        }
        if codevectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codevectors"));
        }
        let codevectors_t = codevectors.transpose();
        Ok(Self {
            patch_size,
            whitening,
            codevectors,
            codevectors_t,
            provenance: provenance.into(),
            id: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.codevectors.nrows()
    }

    /// Number of codevectors `K`.
    pub fn size(&self) -> usize {
        self.codevectors.ncols()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn whitening(&self) -> &WhiteningTransform {
        &self.whitening
    }

    /// `d x K`.
    pub fn codevectors(&self) -> &DMatrix<f64> {
        &self.codevectors
    }

    pub(crate) fn codevectors_t(&self) -> &DMatrix<f64> {
        &self.codevectors_t
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Short content hash of the serialised codebook.
    pub fn id(&self) -> &str {
        self.id.get_or_init(|| hex::encode(&Sha256::digest(self.to_bytes())[..8]))
    }

    /// `CBK1`, then `d`, `K`, `n` as u32 and the whitening tag as u8, then
    /// the `d x d` whitening matrix row-major, then the codevectors one after
    /// another, then the u32-length-prefixed UTF-8 provenance. Little-endian
    /// throughout, 64-bit floats.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (d, k) = (self.dim(), self.size());
        let mut out = Vec::with_capacity(17 + 8 * (d * d + d * k) + 4 + self.provenance.len());
        out.extend_from_slice(MAGIC);
        for v in [d as u32, k as u32, self.patch_size as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.whitening.kind().tag());
        let w = self.whitening.matrix();
        for r in 0..d {
            for c in 0..d {
                out.extend_from_slice(&w[(r, c)].to_le_bytes());
            }
        }
        for v in self.codevectors.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.provenance.len() as u32).to_le_bytes());
        out.extend_from_slice(self.provenance.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = io::ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::format("not a codebook file (bad magic)"));
        }
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let n = r.u32()? as usize;
        if n * n != d {
            return Err(Error::format(format!("header dimension {d} does not match patch size {n}")));
        }
        let kind = WhiteningKind::from_tag(r.u8()?)?;
        let mut w = DMatrix::zeros(d, d);
        for row in 0..d {
            for col in 0..d {
                w[(row, col)] = r.f64()?;
            }
        }
        let values = (0..d * k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let len = r.u32()? as usize;
        let provenance =
            String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format("provenance is not UTF-8"))?;
        if !r.is_empty() {
            return Err(Error::format("trailing bytes after codebook"));
        }
        let whitening = match kind {
            WhiteningKind::Zca => WhiteningTransform::from_parts(kind, n, w)?,
            WhiteningKind::Fourier => WhiteningTransform::fourier(n),
            WhiteningKind::None => WhiteningTransform::identity(n),
        };
        Self::new(n, whitening, DMatrix::from_vec(d, k, values), provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Knobs for [`build_codebook`].
#[derive(Debug, Clone, PartialEq)]
pub struct BuildParams {
    pub channel: Channel,
    pub patch_size: usize,
    pub per_image: usize,
    pub codevectors: usize,
    pub whitening: WhiteningKind,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            channel: Channel::Luma,
            patch_size: 8,
            per_image: 2048,
            codevectors: 2048,
            whitening: WhiteningKind::Zca,
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl BuildParams {
    fn describe(&self, source: &str, images: usize) -> String {
        format!(
            "source={source}; images={images}; channel={}; patch={}; per_image={}; k={}; whitening={}; \
             whitening_scope=joint; seed={}; max_iter={}; codevectors_l2_normalized=false",
            self.channel, self.patch_size, self.per_image, self.codevectors, self.whitening, self.seed, self.max_iter
        )
    }
}

/// Builds a codebook from image files. Unreadable files are skipped with a
/// warning; the per-image patch seed follows the position in `paths`.
pub fn build_codebook(paths: &[PathBuf], params: &BuildParams) -> Result<Codebook> {
    let loaded: Vec<(u64, RgbRaster)> = paths
        .par_iter()
        .enumerate()
        .filter_map(|(i, path)| match io::load_rgb(path) {
            Ok(img) => Some((i as u64, img)),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                None
            }
        })
        .collect();
    if loaded.is_empty() {
        return Err(Error::NoInput(format!("none of {} codebook images could be read", paths.len())));
    }
    let source = paths.first().and_then(|p| p.parent()).map(|p| p.display().to_string()).unwrap_or_default();
    let descriptors = loaded
        .par_iter()
        .map(|(i, img)| {
            let seed = preprocess::item_seed(params.seed, *i);
            preprocess::extract_descriptors(img, params.channel, params.patch_size, params.per_image, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    build_from_descriptors(&DescriptorMatrix::concat(&descriptors)?, params, params.describe(&source, loaded.len()))
}

/// Builds a codebook from in-memory images (e.g. freshly generated
/// synthetic ones).
pub fn build_codebook_from_images(images: &[RgbRaster], params: &BuildParams, source: &str) -> Result<Codebook> {
    if images.is_empty() {
        return Err(Error::NoInput("no codebook images".into()));
    }
    let descriptors = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let seed = preprocess::item_seed(params.seed, i as u64);
            preprocess::extract_descriptors(img, params.channel, params.patch_size, params.per_image, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    build_from_descriptors(&DescriptorMatrix::concat(&descriptors)?, params, params.describe(source, images.len()))
}

/// Whiten all descriptors together, then cluster.
pub fn build_from_descriptors(x: &DescriptorMatrix, params: &BuildParams, provenance: String) -> Result<Codebook> {
    let whitening = match params.whitening {
        WhiteningKind::Zca => compute_zca(x)?,
        WhiteningKind::Fourier => WhiteningTransform::fourier(x.patch_size()),
        WhiteningKind::None => WhiteningTransform::identity(x.patch_size()),
    };
    let y = apply_whitening(&whitening, x)?;
    let clusters = kmeans(y.matrix(), params.codevectors, params.seed, params.max_iter)?;
    Codebook::new(x.patch_size(), whitening, clusters.centers, provenance)
}

/// Descending eigenvalues of the descriptor correlation matrix. With
/// `per_component_standardize` each of the `d` components is first scaled to
/// mean 0 / std 1 across the sample.
pub fn eigen_spectrum(x: &DescriptorMatrix, per_component_standardize: bool) -> Result<Vec<f64>> {
    if x.count() == 0 {
        return Err(Error::dim("empty descriptor matrix"));
    }
    let mut data = x.matrix().clone();
    if per_component_standardize {
        let m = data.ncols() as f64;
        for mut row in data.row_iter_mut() {
            let mean = row.sum() / m;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let std = var.sqrt().max(COMPONENT_STD_FLOOR);
            for v in row.iter_mut() {
                *v = (*v - mean) / std;
            }
        }
    }
    let (values, _) = whitening::sorted_eigen(whitening::second_moment(&data));
    Ok(values)
}
