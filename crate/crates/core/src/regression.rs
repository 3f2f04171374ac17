//! nu-SVR on feature vectors: min/max scaling, an SMO solver for the dual,
//! prediction and the `SVR1` model file.
//!
//! The box uses the libsvm convention: `0 ≤ α, α* ≤ C`, `Σ(α − α*) = 0`,
//! `Σ(α + α*) = C·ν·l`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ByteReader;

const MAGIC: &[u8; 4] = b"SVR1";
const VERSION: u32 = 1;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
const TAU: f64 = 1e-12;

/// Per-dimension affine map of the training range onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    ranges: Vec<(f64, f64)>,
}

impl FeatureScaler {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let first = features.first().ok_or_else(|| Error::dim("scaler needs at least one vector"))?;
        let mut ranges: Vec<(f64, f64)> = first.iter().map(|&v| (v, v)).collect();
        for row in features {
            if row.len() != ranges.len() {
                return Err(Error::dim(format!("feature rows of length {} and {}", ranges.len(), row.len())));
            }
            for (r, &v) in ranges.iter_mut().zip(row) {
                if !v.is_finite() {
                    return Err(Error::NonFinite("training features"));
                }
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        Ok(Self { ranges })
    }

    pub fn from_ranges(ranges: Vec<(f64, f64)>) -> Self {
        Self { ranges }
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn dims(&self) -> usize {
        self.ranges.len()
    }

    /// Constant training dimensions map to 0.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ranges.len() {
            return Err(Error::dim(format!("expected {} features, got {}", self.ranges.len(), x.len())));
        }
        Ok(x.iter()
            .zip(&self.ranges)
            .map(|(&v, &(lo, hi))| if hi > lo { 2.0 * (v - lo) / (hi - lo) - 1.0 } else { 0.0 })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Rbf,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Linear => "linear",
            KernelKind::Rbf => "rbf",
        })
    }
}

impl FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(KernelKind::Linear),
            "rbf" => Ok(KernelKind::Rbf),
            other => Err(Error::param(format!("unknown kernel `{other}` (linear, rbf)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => (-gamma * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).exp(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Kernel::Linear => 0,
            Kernel::Rbf { .. } => 1,
        }
    }

    fn gamma(&self) -> f64 {
        match *self {
            Kernel::Linear => 0.0,
            Kernel::Rbf { gamma } => gamma,
        }
    }
}

/// `l x l` Gram matrix of the rows; rows are computed in parallel.
pub fn kernel_matrix(kernel: &Kernel, rows: &[Vec<f64>]) -> DMatrix<f64> {
    let l = rows.len();
    let cols: Vec<Vec<f64>> = rows.par_iter().map(|a| rows.iter().map(|b| kernel.eval(a, b)).collect()).collect();
    DMatrix::from_fn(l, l, |i, j| cols[j][i])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvrParams {
    pub c: f64,
    pub nu: f64,
    pub kernel: KernelKind,
    /// RBF width; `None` means `1 / num_features`.
    pub rbf_gamma: Option<f64>,
    pub tolerance: f64,
}

impl Default for SvrParams {
    fn default() -> Self {
        Self { c: 1.0, nu: 0.5, kernel: KernelKind::Rbf, rbf_gamma: None, tolerance: DEFAULT_TOLERANCE }
    }
}

impl SvrParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::param(format!("C must be positive, got {}", self.c)));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::param(format!("nu must lie in (0, 1], got {}", self.nu)));
        }
        if let Some(g) = self.rbf_gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::param(format!("RBF gamma must be positive, got {g}")));
            }
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::param("solver tolerance must be positive"));
        }
        Ok(())
    }
}

/// Optimum of the nu-SVR dual for a fixed Gram matrix.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub alpha_star: Vec<f64>,
    pub bias: f64,
    /// Tube half-width implied by the free multipliers.
    pub epsilon: f64,
    pub iterations: usize,
}

impl DualSolution {
    /// `α − α*`, the expansion coefficients.
    pub fn coefficients(&self) -> Vec<f64> {
        self.alpha.iter().zip(&self.alpha_star).map(|(a, s)| a - s).collect()
    }

    /// `½ βᵀKβ − yᵀβ`.
    pub fn objective(&self, gram: &DMatrix<f64>, y: &[f64]) -> f64 {
        dual_objective(gram, y, &self.coefficients())
    }
}

pub fn dual_objective(gram: &DMatrix<f64>, y: &[f64], beta: &[f64]) -> f64 {
    let b = nalgebra::DVector::from_column_slice(beta);
    0.5 * (b.transpose() * gram * &b)[(0, 0)] - y.iter().zip(beta).map(|(y, b)| y * b).sum::<f64>()
}

/// SMO over the `2l` multipliers. The pair is the maximal violating pair
/// inside one sign class, which keeps both equality constraints; ties go to
/// the lowest index.
pub fn solve_dual(gram: &DMatrix<f64>, y: &[f64], c: f64, nu: f64, tolerance: f64) -> Result<DualSolution> {
    let l = y.len();
    if gram.nrows() != l || gram.ncols() != l {
        return Err(Error::dim(format!("Gram matrix is {}x{}, labels have length {l}", gram.nrows(), gram.ncols())));
    }
    if l < 2 {
        return Err(Error::dim("nu-SVR needs at least two training samples"));
    }

    // Class 0 holds α, class 1 holds α*.
    let mut a = [vec![0.0; l], vec![0.0; l]];
    let mut sum = c * nu * l as f64 / 2.0;
    for i in 0..l {
        let v = sum.min(c);
        a[0][i] = v;
        a[1][i] = v;
        sum -= v;
    }
    // f = Kβ with β = α − α*; starts at zero because α = α*.
    let mut f = vec![0.0; l];
    let grad = |f: &[f64], class: usize, i: usize| if class == 0 { f[i] - y[i] } else { y[i] - f[i] };

    let max_iter = (100 * l).max(10_000_000);
    let mut iterations = 0;
    loop {
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for class in 0..2 {
            let (mut up, mut up_g) = (None, f64::INFINITY);
            let (mut down, mut down_g) = (None, f64::NEG_INFINITY);
            for i in 0..l {
                let g = grad(&f, class, i);
                if a[class][i] < c && g < up_g {
                    up_g = g;
                    up = Some(i);
                }
                if a[class][i] > 0.0 && g > down_g {
                    down_g = g;
                    down = Some(i);
                }
            }
            if let (Some(u), Some(v)) = (up, down) {
                let gap = down_g - up_g;
                if best.is_none_or(|b| gap > b.0) {
                    best = Some((gap, class, u, v));
                }
            }
        }
        let Some((gap, class, u, v)) = best else { break };
        if gap < tolerance || iterations >= max_iter {
            if iterations >= max_iter {
                log::warn!("nu-SVR stopped at the iteration cap with gap {gap:e}");
            }
            break;
        }
        iterations += 1;

        let curvature = gram[(u, u)] + gram[(v, v)] - 2.0 * gram[(u, v)];
        let mut t = gap / if curvature > 0.0 { curvature } else { TAU };
        t = t.min(c - a[class][u]).min(a[class][v]);
        a[class][u] += t;
        a[class][v] -= t;
        if a[class][v] < c * 1e-15 {
            a[class][v] = 0.0;
        }
        if a[class][u] > c * (1.0 - 1e-15) {
            a[class][u] = c;
        }
        // β moves by +t at u and −t at v in class 0, the reverse in class 1.
        let s = if class == 0 { t } else { -t };
        let (cu, cv) = (gram.column(u), gram.column(v));
        for i in 0..l {
            f[i] += s * (cu[i] - cv[i]);
        }
    }

    let (r0, r1) = (free_average(&a[0], c, |i| grad(&f, 0, i)), free_average(&a[1], c, |i| grad(&f, 1, i)));
    let [alpha, alpha_star] = a;
    Ok(DualSolution { alpha, alpha_star, bias: (r1 - r0) / 2.0, epsilon: -(r0 + r1) / 2.0, iterations })
}

/// Mean gradient over free multipliers, or the midpoint of the feasible
/// interval when none is free.
fn free_average(a: &[f64], c: f64, grad: impl Fn(usize) -> f64) -> f64 {
    let (mut upper, mut lower) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, &v) in a.iter().enumerate() {
        let g = grad(i);
        if v >= c {
            lower = lower.max(g);
        } else if v <= 0.0 {
            upper = upper.min(g);
        } else {
            sum += g;
            count += 1;
        }
    }
    if count > 0 {
        sum / count as f64
    } else {
        (upper + lower) / 2.0
    }
}

/// Largest KKT violation of a candidate solution, recomputed from scratch:
/// box and equality residuals, and the within-class gradient gap.
pub fn kkt_residual(gram: &DMatrix<f64>, y: &[f64], c: f64, nu: f64, sol: &DualSolution) -> f64 {
    let l = y.len();
    let beta = nalgebra::DVector::from_vec(sol.coefficients());
    let f = gram * beta;
    let mut residual: f64 = 0.0;
    for class in 0..2 {
        let a = if class == 0 { &sol.alpha } else { &sol.alpha_star };
        let (mut min_up, mut max_down) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..l {
            let g = if class == 0 { f[i] - y[i] } else { y[i] - f[i] };
            residual = residual.max(-a[i]).max(a[i] - c);
            if a[i] < c {
                min_up = min_up.min(g);
            }
            if a[i] > 0.0 {
                max_down = max_down.max(g);
            }
        }
        residual = residual.max(max_down - min_up);
    }
    let total: f64 = sol.alpha.iter().chain(&sol.alpha_star).sum();
    let balance: f64 = sol.alpha.iter().sum::<f64>() - sol.alpha_star.iter().sum::<f64>();
    residual.max(balance.abs()).max((total - c * nu * l as f64).abs())
}

/// A trained regressor. Support vectors are stored already scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrModel {
    kernel: Kernel,
    c: f64,
    nu: f64,
    bias: f64,
    scaler: FeatureScaler,
    coefficients: Vec<f64>,
    /// Row-major, `coefficients.len() x dims`.
    support_vectors: Vec<f64>,
}

pub fn train_nusvr(features: &[Vec<f64>], labels: &[f64], params: &SvrParams) -> Result<SvrModel> {
    params.validate()?;
    if features.len() != labels.len() {
        return Err(Error::dim(format!("{} feature rows but {} labels", features.len(), labels.len())));
    }
    if features.len() < 2 {
        return Err(Error::dim("nu-SVR needs at least two training samples"));
    }
    if labels.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("labels"));
    }
    let scaler = FeatureScaler::fit(features)?;
    let dims = scaler.dims();
    let scaled: Vec<Vec<f64>> = features.iter().map(|r| scaler.apply(r)).collect::<Result<_>>()?;
    let kernel = match params.kernel {
        KernelKind::Linear => Kernel::Linear,
        KernelKind::Rbf => Kernel::Rbf { gamma: params.rbf_gamma.unwrap_or(1.0 / dims.max(1) as f64) },
    };
    let gram = kernel_matrix(&kernel, &scaled);
    let sol = solve_dual(&gram, labels, params.c, params.nu, params.tolerance)?;
    log::debug!("nu-SVR converged after {} iterations, epsilon {:e}", sol.iterations, sol.epsilon);

    let mut coefficients = Vec::new();
    let mut support_vectors = Vec::new();
    for (row, beta) in scaled.iter().zip(sol.coefficients()) {
        if beta != 0.0 {
            coefficients.push(beta);
            support_vectors.extend_from_slice(row);
        }
    }
    Ok(SvrModel { kernel, c: params.c, nu: params.nu, bias: sol.bias, scaler, coefficients, support_vectors })
}

impl SvrModel {
    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn scaler(&self) -> &FeatureScaler {
        &self.scaler
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn support_vector_count(&self) -> usize {
        self.coefficients.len()
    }

    pub fn dims(&self) -> usize {
        self.scaler.dims()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let z = self.scaler.apply(x)?;
        Ok(self.predict_scaled(&z))
    }

    fn predict_scaled(&self, z: &[f64]) -> f64 {
        let d = self.dims();
        let sum: f64 = if d == 0 {
            self.coefficients.iter().map(|c| c * self.kernel.eval(&[], &[])).sum()
        } else {
            self.coefficients
                .iter()
                .zip(self.support_vectors.chunks_exact(d))
                .map(|(c, sv)| c * self.kernel.eval(sv, z))
                .sum()
        };
        sum + self.bias
    }

    pub fn predict_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.par_iter().map(|r| self.predict(r)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.size_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kernel.tag());
        for v in [self.kernel.gamma(), self.c, self.nu, self.bias] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.dims() as u32).to_le_bytes());
        for &(lo, hi) in self.scaler.ranges() {
            out.extend_from_slice(&lo.to_le_bytes());
            out.extend_from_slice(&hi.to_le_bytes());
        }
        out.extend_from_slice(&(self.coefficients.len() as u32).to_le_bytes());
        let d = self.dims();
        for (i, coef) in self.coefficients.iter().enumerate() {
            out.extend_from_slice(&coef.to_le_bytes());
            for v in &self.support_vectors[i * d..(i + 1) * d] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::format("not an SVR1 model file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported model version {version}")));
        }
        let tag = r.u8()?;
        let (gamma, c, nu, bias) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let kernel = match tag {
            0 => Kernel::Linear,
            1 => Kernel::Rbf { gamma },
            t => return Err(Error::format(format!("unknown kernel tag {t}"))),
        };
        let dims = r.u32()? as usize;
        let ranges = (0..dims).map(|_| Ok((r.f64()?, r.f64()?))).collect::<Result<Vec<_>>>()?;
        let count = r.u32()? as usize;
        let mut coefficients = Vec::with_capacity(count);
        let mut support_vectors = Vec::with_capacity(count * dims);
        for _ in 0..count {
            coefficients.push(r.f64()?);
            for _ in 0..dims {
                support_vectors.push(r.f64()?);
            }
        }
        if !r.is_empty() {
            return Err(Error::format("trailing bytes after model"));
        }
        Ok(Self { kernel, c, nu, bias, scaler: FeatureScaler::from_ranges(ranges), coefficients, support_vectors })
    }

    /// Length of the serialised model.
    pub fn size_bytes(&self) -> usize {
        let d = self.dims();
        4 + 4 + 1 + 4 * 8 + 4 + 16 * d + 4 + self.coefficients.len() * 8 * (1 + d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
