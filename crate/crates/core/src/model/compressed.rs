use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;

use super::{LanguageModel, LayerId, Model, ModelConfig};
use crate::covariance::CovarianceStats;
use crate::error::{Error, Result};
use crate::factorize::{AfmBasis, LowRankFactors};
use crate::search::Allocation;

/// A base model with some linear layers replaced by low-rank factors.
#[derive(Debug, Clone)]
pub struct CompressedModel {
    base: Arc<Model>,
    factors: BTreeMap<LayerId, LowRankFactors>,
    allocation: Option<Allocation>,
}

impl CompressedModel {
    pub fn new(base: Arc<Model>, factors: BTreeMap<LayerId, LowRankFactors>) -> Result<Self> {
        for (id, f) in &factors {
            if id.layer >= base.config().n_layers {
                return Err(Error::Format(format!("factor for unknown layer {id}")));
            }
            let (d2, d1) = id.shape(base.config());
            if (f.rows(), f.cols()) != (d2, d1) {
                return Err(Error::ShapeMismatch(format!("{id}: factors {}x{} for weight {d2}x{d1}", f.rows(), f.cols())));
            }
        }
        Ok(Self { base, factors, allocation: None })
    }

    /// No layers replaced.
    pub fn identity(base: Arc<Model>) -> Self {
        Self { base, factors: BTreeMap::new(), allocation: None }
    }

    pub fn with_allocation(mut self, allocation: Allocation) -> Self {
        self.allocation = Some(allocation);
        self
    }

    pub fn base(&self) -> &Arc<Model> {
        &self.base
    }

    pub fn factors(&self) -> &BTreeMap<LayerId, LowRankFactors> {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut BTreeMap<LayerId, LowRankFactors> {
        &mut self.factors
    }

    pub fn allocation(&self) -> Option<&Allocation> {
        self.allocation.as_ref()
    }

    pub fn param_count(&self) -> ParamCount {
        param_count(&self.base, &self.factors)
    }
}

impl LanguageModel for Model {
    fn config(&self) -> &ModelConfig {
        Model::config(self)
    }

    fn forward(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        self.forward_with(tokens, &|_| None, None)
    }
}

impl LanguageModel for CompressedModel {
    fn config(&self) -> &ModelConfig {
        self.base.config()
    }

    fn forward(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        self.base.forward_with(tokens, &|id| self.factors.get(&id), None)
    }
}

/// Parameter counts. `linear` covers the seven compressible categories;
/// the tied embedding and the norm scales are reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamCount {
    pub linear: usize,
    pub embedding: usize,
    pub norms: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.linear + self.embedding + self.norms
    }
}

/// Counts dense layers as `d1 d2` and factored layers as their stored size.
pub fn param_count(model: &Model, factors: &BTreeMap<LayerId, LowRankFactors>) -> ParamCount {
    let cfg = model.config();
    let linear = LayerId::all(cfg)
        .into_iter()
        .map(|id| match factors.get(&id) {
            Some(f) => f.param_count(),
            None => {
                let (d2, d1) = id.shape(cfg);
                d1 * d2
            }
        })
        .sum();
    ParamCount {
        linear,
        embedding: cfg.vocab * cfg.d_model,
        norms: (2 * cfg.n_layers + 1) * cfg.d_model,
    }
}

/// Replaces every layer in `ranks` with AFM factors built from `bases`.
pub fn compress_with_ranks(
    model: &Arc<Model>,
    ranks: &BTreeMap<LayerId, usize>,
    bases: &BTreeMap<LayerId, AfmBasis>,
) -> Result<CompressedModel> {
    let mut factors = BTreeMap::new();
    for (&id, &rank) in ranks {
        let basis = bases.get(&id).ok_or_else(|| Error::MissingStats(id.to_string()))?;
        factors.insert(id, basis.factors(model.weight(id), rank)?);
    }
    CompressedModel::new(Arc::clone(model), factors)
}

/// Compresses `model` under `alloc`: each layer with a derived rank is
/// replaced by its AFM factors; NA and skip-marked layers stay dense.
pub fn compress_model(
    model: &Arc<Model>,
    alloc: &Allocation,
    stats: &BTreeMap<LayerId, CovarianceStats>,
) -> Result<CompressedModel> {
    let ranks = alloc.compressed_ranks();
    let mut bases = BTreeMap::new();
    for &id in ranks.keys() {
        let s = stats.get(&id).ok_or_else(|| Error::MissingStats(id.to_string()))?;
        bases.insert(id, AfmBasis::from_stats(s)?);
    }
    Ok(compress_with_ranks(model, &ranks, &bases)?.with_allocation(alloc.clone()))
}
