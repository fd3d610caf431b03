//! Feature-based low-rank compression of LLaMA-shaped transformers, with
//! per-group compression ratios chosen by Gaussian-process Bayesian
//! optimization.
//!
//! The pipeline, bottom-up:
//!
//! * [`covariance`]: streaming (Welford) feature statistics and the pooled
//!   covariance over calibration groups.
//! * [`factorize`]: feature-based (AFM) and SVD factorization of one layer,
//!   and the ratio-to-rank rule.
//! * [`model`]: a forward-only toy transformer with feature taps,
//!   perplexity, reverse KL, and layer replacement.
//! * [`surrogate`]: Matérn-5/2 GP regression and expected improvement.
//! * [`search`]: grouping schemes, budget-constrained allocations,
//!   validation selection, and the BO loop.
//! * [`posttrain`]: diagonal adapters trained to reconstruct layer outputs.

pub mod covariance;
pub mod error;
pub mod factorize;
pub mod linalg;
pub mod model;
pub mod posttrain;
pub mod rng;
pub mod search;
pub mod surrogate;

pub use covariance::{pooled, CovAccumulator, CovarianceStats};
pub use error::{Error, Result};
pub use factorize::{
    afm_decompose, apply_factors, rank_from_ratio, reconstruction_error, svd_truncate, AfmBasis, FactorMethod,
    LowRankFactors, RankDecision,
};
pub use model::{
    Category, CompressedModel, LanguageModel, LayerId, Model, ModelConfig, TokenDataset,
};
pub use search::{Allocation, GroupingScheme, SearchConfig};
pub use surrogate::{GpState, KernelParams};
