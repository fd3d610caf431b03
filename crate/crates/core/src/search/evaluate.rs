use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::Array2;

use super::allocation::{Allocation, AllocationSpace};
use crate::covariance::CovarianceStats;
use crate::error::{Error, Result};
use crate::factorize::{rank_from_ratio, AfmBasis};
use crate::model::{
    compress_with_ranks, kl_rows, log_softmax_rows, per_sample_nll, perplexity, sequence_nll, Category,
    CompressedModel, LanguageModel, LayerId, Model, TokenDataset,
};
use crate::rng::substream;

/// Cached principal bases, one per layer.
pub type Bases = BTreeMap<LayerId, AfmBasis>;

pub fn build_bases<'a>(
    stats: &BTreeMap<LayerId, CovarianceStats>,
    layers: impl IntoIterator<Item = &'a LayerId>,
) -> Result<Bases> {
    layers
        .into_iter()
        .map(|id| {
            let s = stats.get(id).ok_or_else(|| Error::MissingStats(id.to_string()))?;
            Ok((*id, AfmBasis::from_stats(s)?))
        })
        .collect()
}

/// Search objective components for one allocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// `ln(ppl) + β · rkl`.
    pub h: f64,
    pub ppl: f64,
    pub rkl: f64,
}

/// Scores allocations on a fixed dataset against the uncompressed model,
/// whose log-probabilities are computed once.
pub struct Evaluator {
    model: Arc<Model>,
    bases: Bases,
    data: TokenDataset,
    reference: Vec<Array2<f64>>,
}

impl Evaluator {
    pub fn new(model: Arc<Model>, bases: Bases, data: TokenDataset) -> Result<Self> {
        let reference = data
            .sequences()
            .iter()
            .map(|seq| Ok(log_softmax_rows(model.forward(seq)?.view())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, bases, data, reference })
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn bases(&self) -> &Bases {
        &self.bases
    }

    pub fn data(&self) -> &TokenDataset {
        &self.data
    }

    pub fn compress(&self, alloc: &Allocation) -> Result<CompressedModel> {
        Ok(compress_with_ranks(&self.model, &alloc.compressed_ranks(), &self.bases)?.with_allocation(alloc.clone()))
    }

    pub fn evaluate(&self, alloc: &Allocation, beta: f64) -> Result<Evaluation> {
        if !(beta >= 0.0) {
            return Err(Error::InvalidConfig(format!("reverse-KL weight {beta} must be non-negative")));
        }
        let compressed = self.compress(alloc)?;
        let (mut nll, mut count, mut kl, mut positions) = (0.0, 0usize, 0.0, 0usize);
        for (seq, reference) in self.data.sequences().iter().zip(&self.reference) {
            let logits = compressed.forward(seq)?;
            let (s, n) = sequence_nll(logits.view(), seq)?;
            nll += s;
            count += n;
            kl += kl_rows(reference.view(), log_softmax_rows(logits.view()).view());
            positions += seq.len();
        }
        let log_ppl = nll / count as f64;
        let rkl = (kl / positions as f64).max(0.0);
        Ok(Evaluation { h: log_ppl + beta * rkl, ppl: log_ppl.exp(), rkl })
    }
}

/// `ln(ppl) + β · rkl` of `alloc` on the evaluator's data.
pub fn objective(evaluator: &Evaluator, alloc: &Allocation, beta: f64) -> Result<f64> {
    Ok(evaluator.evaluate(alloc, beta)?.h)
}

/// The sequences whose NLL varies most across probe allocations.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub data: TokenDataset,
    /// Positions of the selected sequences in the pool.
    pub indices: Vec<usize>,
    /// Variance of each selected sequence's NLL across probes, descending.
    pub sensitivity: Vec<f64>,
}

/// Ranks pool sequences by the variance of their mean NLL under the given
/// probe allocations and keeps the top `k`. Ties keep pool order.
pub fn select_validation_with(
    model: &Arc<Model>,
    pool: &TokenDataset,
    probes: &[Allocation],
    k: usize,
    bases: &Bases,
) -> Result<ValidationSet> {
    if probes.len() < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 probe allocations, got {}", probes.len())));
    }
    if k == 0 || k > pool.len() {
        return Err(Error::InvalidConfig(format!("validation size {k} not in 1..={}", pool.len())));
    }
    let mut nll = Vec::with_capacity(probes.len());
    for alloc in probes {
        let compressed = compress_with_ranks(model, &alloc.compressed_ranks(), bases)?;
        nll.push(per_sample_nll(&compressed, pool)?);
    }
    let n = probes.len() as f64;
    let variance: Vec<f64> = (0..pool.len())
        .map(|i| {
            let mean = nll.iter().map(|v| v[i]).sum::<f64>() / n;
            nll.iter().map(|v| (v[i] - mean).powi(2)).sum::<f64>() / n
        })
        .collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| variance[b].total_cmp(&variance[a]));
    order.truncate(k);
    Ok(ValidationSet {
        data: pool.subset(&order)?,
        sensitivity: order.iter().map(|&i| variance[i]).collect(),
        indices: order,
    })
}

/// [`select_validation_with`] over `n_probe` allocations sampled from `space`.
pub fn select_validation(
    model: &Arc<Model>,
    pool: &TokenDataset,
    space: &AllocationSpace,
    n_probe: usize,
    k: usize,
    bases: &Bases,
    seed: u64,
) -> Result<ValidationSet> {
    let mut rng = substream(seed, "probes");
    let probes = (0..n_probe).map(|_| space.sample(&mut rng)).collect::<Result<Vec<_>>>()?;
    select_validation_with(model, pool, &probes, k, bases)
}

/// Perplexity when only `category` is compressed, at each ratio, across
/// all layers. Layers whose rounded rank would not save parameters stay
/// dense, so ratio 0 gives the base perplexity.
pub fn sensitivity_sweep(
    model: &Arc<Model>,
    category: Category,
    ratios: &[f64],
    data: &TokenDataset,
    bases: &Bases,
) -> Result<Vec<(f64, f64)>> {
    let cfg = model.config();
    let (d2, d1) = category.shape(cfg);
    ratios
        .iter()
        .map(|&ratio| {
            let ranks: BTreeMap<LayerId, usize> = match rank_from_ratio(d1, d2, ratio)?.rank() {
                Some(r) => (0..cfg.n_layers).map(|l| (LayerId::new(l, category), r)).collect(),
                None => BTreeMap::new(),
            };
            let compressed = compress_with_ranks(model, &ranks, bases)?;
            Ok((ratio, perplexity(&compressed, data)?))
        })
        .collect()
}

/// `category,ratio,perplexity` rows, one per point.
pub fn sweep_csv(curves: &[(Category, Vec<(f64, f64)>)]) -> String {
    let mut out = String::from("category,ratio,perplexity\n");
    for (cat, curve) in curves {
        for (ratio, ppl) in curve {
            let _ = writeln!(out, "{cat},{ratio},{ppl}");
        }
    }
    out
}
