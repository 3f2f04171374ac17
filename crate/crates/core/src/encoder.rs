//! Soft encoding of an image's descriptors against a codebook.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::codebook::{apply_whitening, Codebook};
use crate::error::{Error, Result};
use crate::preprocess::DescriptorMatrix;

/// Descriptors per GEMM tile; bounds the `K x tile` scratch matrix.
const TILE: usize = 128;

/// Length-`2K` nonnegative feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub codebook_id: String,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `S = Oᵀ·Y`; `f[i] = max_j max(s_ij, 0)` and `f[K+i] = max_j max(-s_ij, 0)`.
///
/// Descriptors that are not yet whitened go through the codebook's
/// whitening first.
pub fn encode(book: &Codebook, x: &DescriptorMatrix) -> Result<FeatureVector> {
    let (pos, neg) = signed_maxima(book, x)?;
    let mut values = pos;
    values.extend(neg);
    Ok(FeatureVector { values, codebook_id: book.id().to_owned() })
}

/// Joint luma/chroma features with the same total length `2K` as a
/// luma-only encoding: per channel each `(f_i, f_{K+i})` pair collapses to
/// its maximum (i.e. `max_j |s_ij|`), luma block first.
pub fn encode_luma_chroma(
    book: &Codebook,
    luma: &DescriptorMatrix,
    chroma: &DescriptorMatrix,
) -> Result<FeatureVector> {
    let collapse = |x: &DescriptorMatrix| -> Result<Vec<f64>> {
        let (pos, neg) = signed_maxima(book, x)?;
        Ok(pos.into_iter().zip(neg).map(|(p, n)| p.max(n)).collect())
    };
    let mut values = collapse(luma)?;
    values.extend(collapse(chroma)?);
    Ok(FeatureVector { values, codebook_id: book.id().to_owned() })
}

fn signed_maxima(book: &Codebook, x: &DescriptorMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.dim() != book.dim() {
        return Err(Error::dim(format!("descriptors are {}-dimensional, codebook is {}", x.dim(), book.dim())));
    }
    if x.count() == 0 {
        return Err(Error::dim("no descriptors to encode"));
    }
    let whitened;
    let y = if x.is_whitened() {
        x
    } else {
        whitened = apply_whitening(book.whitening(), x)?;
        &whitened
    };

    Ok(signed_maxima_raw(book.codevectors_t(), y.matrix()))
}

/// The encoding on bare matrices: `codevectors_t` is `K x d`, `y` is
/// `d x m` (already whitened). Returns the `2K` features.
pub fn soft_encode(codevectors_t: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Vec<f64>> {
    if codevectors_t.ncols() != y.nrows() {
        return Err(Error::dim("codevector and descriptor dimensions differ"));
    }
    if y.ncols() == 0 {
        return Err(Error::dim("no descriptors to encode"));
    }
    let (mut pos, neg) = signed_maxima_raw(codevectors_t, y);
    pos.extend(neg);
    Ok(pos)
}

fn signed_maxima_raw(ot: &DMatrix<f64>, y: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let (k, d, m) = (ot.nrows(), y.nrows(), y.ncols());
    let starts: Vec<usize> = (0..m).step_by(TILE).collect();
    let zero = || (vec![0.0; k], vec![0.0; k]);
    starts
        .par_iter()
        .map(|&start| {
            let width = TILE.min(m - start);
            let mut s = DMatrix::zeros(k, width);
            s.gemm(1.0, ot, &y.view((0, start), (d, width)), 0.0);
            let (mut pos, mut neg) = zero();
            for col in s.as_slice().chunks_exact(k) {
                for ((p, n), &v) in pos.iter_mut().zip(neg.iter_mut()).zip(col) {
                    *p = f64::max(*p, v);
                    *n = f64::max(*n, -v);
                }
            }
            (pos, neg)
        })
        .reduce(zero, |(mut pa, mut na), (pb, nb)| {
            for (a, b) in pa.iter_mut().zip(pb) {
                *a = a.max(b);
            }
            for (a, b) in na.iter_mut().zip(nb) {
                *a = a.max(b);
            }
            (pa, na)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::WhiteningTransform;
    use crate::preprocess::{Channel, Normalization};

    fn whitened(data: DMatrix<f64>, n: usize) -> DescriptorMatrix {
        let x = DescriptorMatrix::from_matrix(data, n, Channel::Luma, Normalization::PerPatch).unwrap();
        apply_whitening(&WhiteningTransform::identity(n), &x).unwrap()
    }

    /// Identity codebook over `d = 4` (K = 4).
    fn identity_book() -> Codebook {
        Codebook::new(2, WhiteningTransform::identity(2), DMatrix::identity(4, 4), "test").unwrap()
    }

    #[test]
    fn hand_case_in_four_dimensions() {
        let y = whitened(DMatrix::from_column_slice(4, 1, &[0.3, -0.7, 0.0, 0.0]), 2);
        let f = encode(&identity_book(), &y).unwrap();
        assert_eq!(f.values, vec![0.3, 0.0, 0.0, 0.0, 0.0, 0.7, 0.0, 0.0]);
    }

    #[test]
    fn two_dimensional_hand_case() {
        let f = soft_encode(&DMatrix::identity(2, 2), &DMatrix::from_column_slice(2, 1, &[0.3, -0.7])).unwrap();
        assert_eq!(f, vec![0.3, 0.0, 0.0, 0.7]);
    }

    #[test]
    fn zero_descriptors_give_zero_features() {
        let f = encode(&identity_book(), &whitened(DMatrix::zeros(4, 9), 2)).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
        assert_eq!(f.len(), 8);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let book = identity_book();
        assert!(matches!(encode(&book, &whitened(DMatrix::zeros(4, 0), 2)), Err(Error::Dimension(_))));
        assert!(matches!(encode(&book, &whitened(DMatrix::zeros(9, 3), 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn tiling_does_not_change_the_result() {
        let data = DMatrix::from_fn(4, 3 * TILE + 17, |i, j| ((i * 31 + j * 17) % 23) as f64 - 11.0);
        let y = whitened(data.clone(), 2);
        let f = encode(&identity_book(), &y).unwrap();
        let mut want = vec![0.0; 8];
        for col in data.column_iter() {
            for i in 0..4 {
                want[i] = f64::max(want[i], col[i]);
                want[4 + i] = f64::max(want[4 + i], -col[i]);
            }
        }
        assert_eq!(f.values, want);
    }

    #[test]
    fn unwhitened_input_is_whitened_by_the_codebook() {
        let w = DMatrix::from_diagonal_element(4, 4, 2.0);
        let book = Codebook::new(2, WhiteningTransform::identity(2), w, "scaled").unwrap();
        let raw = DescriptorMatrix::from_matrix(
            DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 0.5, 0.0]),
            2,
            Channel::Luma,
            Normalization::PerPatch,
        )
        .unwrap();
        let f = encode(&book, &raw).unwrap();
        assert_eq!(f.values, vec![2.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn luma_chroma_layout() {
        let book = identity_book();
        let luma = whitened(DMatrix::from_column_slice(4, 1, &[0.3, -0.7, 0.0, 0.2]), 2);
        let f = encode_luma_chroma(&book, &luma, &luma).unwrap();
        assert_eq!(f.len(), 8);
        assert_eq!(&f.values[..4], &[0.3, 0.7, 0.0, 0.2]);
        assert_eq!(&f.values[..4], &f.values[4..]);
        let zero = whitened(DMatrix::zeros(4, 3), 2);
        let g = encode_luma_chroma(&book, &luma, &zero).unwrap();
        assert_eq!(&g.values[..4], &f.values[..4]);
        assert!(g.values[4..].iter().all(|&v| v == 0.0));
    }
}
