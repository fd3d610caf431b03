use std::collections::{BTreeMap, BTreeSet};

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use super::{CompressedModel, LayerId, Model, TokenDataset};
use crate::covariance::{pooled, CovAccumulator, CovarianceStats};
use crate::error::{Error, Result};
use crate::factorize::LowRankFactors;

fn check_layers(model: &Model, layers: &BTreeSet<LayerId>) -> Result<()> {
    match layers.iter().find(|id| id.layer >= model.config().n_layers) {
        Some(id) => Err(Error::Format(format!("unknown layer {id}"))),
        None => Ok(()),
    }
}

/// Streams every token position's output `Y = W X` of each selected layer
/// into that layer's accumulator.
pub fn capture_features(
    model: &Model,
    data: &TokenDataset,
    layers: &BTreeSet<LayerId>,
) -> Result<BTreeMap<LayerId, CovAccumulator>> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut grouped = capture_grouped(model, data, layers, &[all])?;
    Ok(grouped.iter_mut().map(|(id, g)| (*id, g.pop().expect("one group"))).collect())
}

/// Like [`capture_features`] with one accumulator per group of sequences;
/// `groups[k]` lists the sequence indices of group `k`.
pub fn capture_grouped(
    model: &Model,
    data: &TokenDataset,
    layers: &BTreeSet<LayerId>,
    groups: &[Vec<usize>],
) -> Result<BTreeMap<LayerId, Vec<CovAccumulator>>> {
    check_layers(model, layers)?;
    let cfg = model.config();
    let mut accs = BTreeMap::new();
    for &id in layers {
        let (d2, _) = id.shape(cfg);
        accs.insert(id, (0..groups.len()).map(|_| CovAccumulator::new(d2)).collect::<Result<Vec<_>>>()?);
    }
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            let seq = data.sequences().get(i).ok_or_else(|| Error::Format(format!("sequence index {i} out of range")))?;
            let mut failure = None;
            let mut tap = |id: LayerId, _input: ArrayView2<'_, f64>, out: ArrayView2<'_, f64>| {
                if let Some(group_accs) = accs.get_mut(&id) {
                    if let Err(e) = group_accs[g].accumulate_rows(out) {
                        failure.get_or_insert(e);
                    }
                }
            };
            model.forward_with(seq, &|_| None, Some(&mut tap))?;
            if let Some(e) = failure {
                return Err(e);
            }
        }
    }
    Ok(accs)
}

/// Finalizes each group and pools them; a single group gives the plain
/// sample covariance.
pub fn finalize_pooled(
    grouped: &BTreeMap<LayerId, Vec<CovAccumulator>>,
) -> Result<BTreeMap<LayerId, CovarianceStats>> {
    grouped
        .iter()
        .map(|(id, accs)| {
            let stats = accs.iter().map(CovAccumulator::finalize).collect::<Result<Vec<_>>>()?;
            Ok((*id, pooled(&stats)?))
        })
        .collect()
}

/// Column-stacked inputs (`d1 × n`) of each selected layer, at most
/// `max_tokens` positions, taken from sequences in order.
pub fn capture_inputs(
    model: &Model,
    data: &TokenDataset,
    layers: &BTreeSet<LayerId>,
    max_tokens: usize,
) -> Result<BTreeMap<LayerId, Array2<f64>>> {
    inputs_with(model, &BTreeMap::new(), data, layers, max_tokens)
}

/// [`capture_inputs`] inside a compressed model: the inputs each layer
/// sees once upstream layers are factored.
pub fn capture_compressed_inputs(
    model: &CompressedModel,
    data: &TokenDataset,
    layers: &BTreeSet<LayerId>,
    max_tokens: usize,
) -> Result<BTreeMap<LayerId, Array2<f64>>> {
    inputs_with(model.base(), model.factors(), data, layers, max_tokens)
}

fn inputs_with(
    model: &Model,
    factors: &BTreeMap<LayerId, LowRankFactors>,
    data: &TokenDataset,
    layers: &BTreeSet<LayerId>,
    max_tokens: usize,
) -> Result<BTreeMap<LayerId, Array2<f64>>> {
    check_layers(model, layers)?;
    let mut chunks: BTreeMap<LayerId, Vec<Array2<f64>>> = layers.iter().map(|&id| (id, Vec::new())).collect();
    let mut taken = 0usize;
    for seq in data.sequences() {
        if taken >= max_tokens {
            break;
        }
        let keep = (max_tokens - taken).min(seq.len());
        let mut tap = |id: LayerId, input: ArrayView2<'_, f64>, _out: ArrayView2<'_, f64>| {
            if let Some(c) = chunks.get_mut(&id) {
                c.push(input.slice(ndarray::s![..keep, ..]).t().to_owned());
            }
        };
        model.forward_with(seq, &|id| factors.get(&id), Some(&mut tap))?;
        taken += keep;
    }
    chunks
        .into_iter()
        .map(|(id, parts)| {
            if parts.is_empty() {
                return Ok((id, Array2::zeros((id.shape(model.config()).1, 0))));
            }
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            let x = concatenate(Axis(1), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            Ok((id, x))
        })
        .collect()
}
