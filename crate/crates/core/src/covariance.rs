//! Streaming feature statistics.
//!
//! [`CovAccumulator`] keeps Welford's running mean and scatter (M2) matrix for
//! one feature stream. Accumulators over disjoint parts of a stream can be
//! merged in any order, which is how per-group and per-worker statistics are
//! built. [`CovarianceStats`] is the finalized sample covariance, and
//! [`pooled`] averages the per-group covariances of a partitioned calibration
//! set.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

const COV_MAGIC: &[u8; 4] = b"BOLC";
const COV_VERSION: u32 = 1;

/// Running mean and scatter matrix of a feature stream.
#[derive(Debug, Clone, PartialEq)]
pub struct CovAccumulator {
    dim: usize,
    count: u64,
    mean: Array1<f64>,
    scatter: Array2<f64>,
}

impl CovAccumulator {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("accumulator dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            count: 0,
            mean: Array1::zeros(dim),
            scatter: Array2::zeros((dim, dim)),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    /// Sum of outer products of deviations from the running mean.
    pub fn scatter(&self) -> ArrayView2<'_, f64> {
        self.scatter.view()
    }

    /// Adds one sample with the Welford recurrence.
    pub fn accumulate(&mut self, sample: &[f64]) -> Result<()> {
        if sample.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: sample.len() });
        }
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance sample"));
        }
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = sample.iter().zip(self.mean.iter()).map(|(x, m)| x - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        let after: Vec<f64> = sample.iter().zip(self.mean.iter()).map(|(x, m)| x - m).collect();
        for (i, di) in delta.iter().enumerate() {
            let mut row = self.scatter.row_mut(i);
            for (s, aj) in row.iter_mut().zip(&after) {
                *s += di * aj;
            }
        }
        Ok(())
    }

    /// Adds every row of `samples` as one sample.
    ///
    /// The batch is reduced with a two-pass mean/scatter and then combined
    /// with the pairwise merge rule, which is equivalent to accumulating the
    /// rows one at a time.
    pub fn accumulate_rows(&mut self, samples: ArrayView2<'_, f64>) -> Result<()> {
        if samples.ncols() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: samples.ncols() });
        }
        if samples.nrows() == 0 {
            return Ok(());
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance sample"));
        }
        let batch = Self::from_rows(samples);
        self.merge_from(&batch)
    }

    fn from_rows(samples: ArrayView2<'_, f64>) -> Self {
        let n = samples.nrows();
        let mean = samples.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = &samples - &mean.view().insert_axis(Axis(0));
        let scatter = centered.t().dot(&centered);
        Self { dim: samples.ncols(), count: n as u64, mean, scatter }
    }

    /// Combines two accumulators as if their streams had been concatenated.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.merge_from(other)?;
        Ok(out)
    }

    pub fn merge_from(&mut self, other: &Self) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: other.dim });
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let total = na + nb;
        let delta = &other.mean - &self.mean;
        let weight = na * nb / total;
        for i in 0..self.dim {
            let di = delta[i] * weight;
            let mut row = self.scatter.row_mut(i);
            for ((s, sb), dj) in row.iter_mut().zip(other.scatter.row(i)).zip(delta.iter()) {
                *s += sb + di * dj;
            }
        }
        self.mean.scaled_add(nb / total, &delta);
        self.count += other.count;
        Ok(())
    }

    /// Sample covariance with the `n - 1` denominator.
    pub fn finalize(&self) -> Result<CovarianceStats> {
        if self.count < 2 {
            return Err(Error::InsufficientSamples { needed: 2, have: self.count });
        }
        let denom = (self.count - 1) as f64;
        let mut cov = self.scatter.mapv(|v| v / denom);
        symmetrize(&mut cov);
        Ok(CovarianceStats { mean: self.mean.clone(), cov, count: self.count })
    }
}

/// Finalized mean and covariance of one feature stream.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub count: u64,
}

impl CovarianceStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(COV_MAGIC)?;
        w.write_all(&COV_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&self.count.to_le_bytes())?;
        for v in self.mean.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        // row-major regardless of the in-memory layout
        for row in self.cov.rows() {
            for v in row.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != COV_MAGIC {
            return Err(Error::Format("not a covariance stats file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != COV_VERSION {
            return Err(Error::Format(format!("unsupported covariance file version {version}")));
        }
        let dim = read_u64(&mut r)? as usize;
        let count = read_u64(&mut r)?;
        if dim == 0 {
            return Err(Error::Format("covariance file with zero dimension".into()));
        }
        let mean = (0..dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let cov = (0..dim * dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let cov = Array2::from_shape_vec((dim, dim), cov).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { mean: Array1::from(mean), cov, count })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Pooled covariance: the unweighted mean of the group covariances.
///
/// The pooled mean is the count-weighted mean of the group means, which is
/// the global mean when the groups partition one dataset.
pub fn pooled(groups: &[CovarianceStats]) -> Result<CovarianceStats> {
    let first = groups.first().ok_or(Error::Empty("covariance groups"))?;
    let dim = first.dim();
    let mut cov = Array2::<f64>::zeros((dim, dim));
    let mut weighted_mean = Array1::<f64>::zeros(dim);
    let mut count = 0u64;
    for g in groups {
        if g.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: g.dim() });
        }
        cov += &g.cov;
        weighted_mean.scaled_add(g.count as f64, &g.mean);
        count += g.count;
    }
    cov.mapv_inplace(|v| v / groups.len() as f64);
    let mean = if count > 0 { weighted_mean / count as f64 } else { first.mean.clone() };
    Ok(CovarianceStats { mean, cov, count })
}

pub(crate) fn symmetrize(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = avg;
            m[[j, i]] = avg;
        }
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
