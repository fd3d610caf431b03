//! Low-rank replacement of a single linear layer.
//!
//! Two factorizations are provided. The feature-based one ([`afm_decompose`])
//! projects the layer onto the leading principal directions of its output
//! features and compensates the discarded part of the feature mean with a
//! bias. The weight-based baseline ([`svd_truncate`]) is the truncated SVD of
//! the weight itself.
//!
//! Weights are `d2 × d1` (output × input) and inputs are column-stacked
//! `d1 × n`, so a layer computes `Y = W X`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceStats;
use crate::error::{Error, Result};
pub use crate::linalg::{eig_sym_desc, SymmetricEigen};

/// Ranks are rounded to this multiple.
pub const RANK_MULTIPLE: usize = 8;
/// Smallest rank ever assigned to a compressed layer.
pub const MIN_RANK: usize = 8;
const SINGULAR_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorMethod {
    Afm,
    Svd,
}

impl FactorMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            FactorMethod::Afm => "afm",
            FactorMethod::Svd => "svd",
        }
    }
}

/// `W ≈ B A` plus an output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    /// `d2 × r`
    pub b: Array2<f64>,
    /// `r × d1`
    pub a: Array2<f64>,
    /// length `d2`; all zeros for SVD factors
    pub bias: Array1<f64>,
    pub method: FactorMethod,
}

impl LowRankFactors {
    pub fn new(b: Array2<f64>, a: Array2<f64>, bias: Array1<f64>, method: FactorMethod) -> Result<Self> {
        if b.ncols() != a.nrows() || bias.len() != b.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "factors B {:?}, A {:?}, bias {}",
                b.dim(),
                a.dim(),
                bias.len()
            )));
        }
        Ok(Self { b, a, bias, method })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    /// Output dimension `d2`.
    pub fn rows(&self) -> usize {
        self.b.nrows()
    }

    /// Input dimension `d1`.
    pub fn cols(&self) -> usize {
        self.a.ncols()
    }

    /// Stored parameters: `r (d1 + d2)`, plus `d2` for the AFM bias.
    pub fn param_count(&self) -> usize {
        let base = self.rank() * (self.rows() + self.cols());
        match self.method {
            FactorMethod::Afm => base + self.rows(),
            FactorMethod::Svd => base,
        }
    }

    /// `B (A x) + bias` on column-stacked inputs (`d1 × n`).
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.cols() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} rows, factors expect {}",
                x.nrows(),
                self.cols()
            )));
        }
        let mut out = self.b.dot(&self.a.dot(&x));
        out += &self.bias.view().insert_axis(Axis(1));
        Ok(out)
    }

    /// Same map on row-stacked inputs (`n × d1`), as used inside the model.
    pub fn apply_rows(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.cols() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, factors expect {}",
                x.ncols(),
                self.cols()
            )));
        }
        let mut out = x.dot(&self.a.t()).dot(&self.b.t());
        out += &self.bias.view().insert_axis(Axis(0));
        Ok(out)
    }

    /// Dense `B A`. Only for tests and diagnostics.
    pub fn dense(&self) -> Array2<f64> {
        self.b.dot(&self.a)
    }
}

/// Outcome of converting a compression ratio to a rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RankDecision {
    Rank(usize),
    /// Factoring at the rounded rank would not save parameters.
    Skip,
}

impl RankDecision {
    pub fn rank(self) -> Option<usize> {
        match self {
            RankDecision::Rank(r) => Some(r),
            RankDecision::Skip => None,
        }
    }
}

/// Rank at which a factored `d2 × d1` layer has exactly the original
/// parameter count.
pub fn rank_budget(d1: usize, d2: usize) -> f64 {
    (d1 as f64 * d2 as f64) / (d1 + d2) as f64
}

/// Rounds to the nearest multiple of eight, ties upward.
pub fn round_to_multiple(x: f64) -> usize {
    let m = RANK_MULTIPLE as f64;
    ((x / m + 0.5).floor().max(0.0) as usize) * RANK_MULTIPLE
}

/// `(1 - λ) d1 d2 / (d1 + d2)` rounded to a multiple of eight, at least
/// [`MIN_RANK`]; [`RankDecision::Skip`] when the rounded rank saves nothing.
pub fn rank_from_ratio(d1: usize, d2: usize, lambda: f64) -> Result<RankDecision> {
    if d1 == 0 || d2 == 0 {
        return Err(Error::InvalidDimension(format!("layer shape {d2}x{d1}")));
    }
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::InvalidRatio(lambda));
    }
    let r = round_to_multiple((1.0 - lambda) * rank_budget(d1, d2)).max(MIN_RANK);
    Ok(if r * (d1 + d2) >= d1 * d2 { RankDecision::Skip } else { RankDecision::Rank(r) })
}

/// Principal basis of a layer's output features, reusable across ranks.
#[derive(Debug, Clone)]
pub struct AfmBasis {
    eigen: SymmetricEigen,
    mean: Array1<f64>,
}

impl AfmBasis {
    pub fn from_stats(stats: &CovarianceStats) -> Result<Self> {
        let eigen = eig_sym_desc(&stats.cov)?;
        Ok(Self { eigen, mean: stats.mean.clone() })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Covariance eigenvalues in descending order, negatives clamped to zero.
    pub fn energies(&self) -> Array1<f64> {
        self.eigen.values.mapv(|v| v.max(0.0))
    }

    /// `B = U_r`, `A = U_rᵀ W`, `bias = (I - U_r U_rᵀ) E[Y]`.
    pub fn factors(&self, w: &Array2<f64>, rank: usize) -> Result<LowRankFactors> {
        if w.nrows() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: w.nrows() });
        }
        if rank == 0 || rank > w.nrows() {
            return Err(Error::RankOutOfRange { rank, max: w.nrows() });
        }
        let u = self.eigen.vectors.slice(s![.., ..rank]).to_owned();
        let a = u.t().dot(w);
        let projected = u.dot(&u.t().dot(&self.mean));
        let bias = &self.mean - &projected;
        LowRankFactors::new(u, a, bias, FactorMethod::Afm)
    }
}

/// Feature-based factorization of `w` from its output statistics.
pub fn afm_decompose(w: &Array2<f64>, stats: &CovarianceStats, rank: usize) -> Result<LowRankFactors> {
    if stats.dim() != w.nrows() {
        return Err(Error::DimensionMismatch { expected: w.nrows(), got: stats.dim() });
    }
    if rank == 0 || rank > w.nrows() {
        return Err(Error::RankOutOfRange { rank, max: w.nrows() });
    }
    AfmBasis::from_stats(stats)?.factors(w, rank)
}

/// Truncated SVD: `B = U_r Σ_r`, `A = V_rᵀ`, computed from the
/// eigendecomposition of the smaller Gram matrix.
pub fn svd_truncate(w: &Array2<f64>, rank: usize) -> Result<LowRankFactors> {
    let (d2, d1) = w.dim();
    let max = d1.min(d2);
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("weight matrix"));
    }
    let (b, a) = if d1 <= d2 {
        let gram = w.t().dot(w);
        let eig = eig_sym_desc(&gram)?;
        let sigma_max = eig.values[0].max(0.0).sqrt();
        let v = eig.vectors.slice(s![.., ..rank]).to_owned();
        let mut b = w.dot(&v);
        for k in 0..rank {
            if eig.values[k].max(0.0).sqrt() <= SINGULAR_CUTOFF * sigma_max {
                b.column_mut(k).fill(0.0);
            }
        }
        (b, v.t().to_owned())
    } else {
        let gram = w.dot(&w.t());
        let eig = eig_sym_desc(&gram)?;
        let sigma_max = eig.values[0].max(0.0).sqrt();
        let u = eig.vectors.slice(s![.., ..rank]).to_owned();
        let mut b = u.clone();
        let mut a = u.t().dot(w);
        for k in 0..rank {
            let sigma = eig.values[k].max(0.0).sqrt();
            if sigma <= SINGULAR_CUTOFF * sigma_max {
                b.column_mut(k).fill(0.0);
                a.row_mut(k).fill(0.0);
            } else {
                b.column_mut(k).mapv_inplace(|x| x * sigma);
                a.row_mut(k).mapv_inplace(|x| x / sigma);
            }
        }
        (b, a)
    };
    LowRankFactors::new(b, a, Array1::zeros(d2), FactorMethod::Svd)
}

/// `apply` for column-stacked inputs; see [`LowRankFactors::apply`].
pub fn apply_factors(f: &LowRankFactors, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    f.apply(x)
}

/// `‖W X - (B A X + bias)‖_F`.
pub fn reconstruction_error(w: &Array2<f64>, f: &LowRankFactors, x: ArrayView2<'_, f64>) -> Result<f64> {
    if w.dim() != (f.rows(), f.cols()) {
        return Err(Error::ShapeMismatch(format!("weight {:?} vs factors {}x{}", w.dim(), f.rows(), f.cols())));
    }
    let approx = f.apply(x)?;
    let exact = w.dot(&x);
    Ok((exact - approx).iter().map(|v| v * v).sum::<f64>().sqrt())
}
