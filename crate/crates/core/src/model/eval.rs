use ndarray::{Array2, ArrayView2};

use super::{ModelConfig, TokenDataset};
use crate::error::{Error, Result};

/// Anything that maps a token sequence to next-token logits.
pub trait LanguageModel {
    fn config(&self) -> &ModelConfig;

    /// `seq × vocab` logits; row `t` predicts token `t + 1`.
    fn forward(&self, tokens: &[u32]) -> Result<Array2<f64>>;
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Summed negative log-likelihood of `tokens[1..]` under `logits[..len-1]`,
/// and the number of predictions.
pub fn sequence_nll(logits: ArrayView2<'_, f64>, tokens: &[u32]) -> Result<(f64, usize)> {
    if logits.nrows() != tokens.len() || tokens.len() < 2 {
        return Err(Error::ShapeMismatch(format!("{} logit rows for {} tokens", logits.nrows(), tokens.len())));
    }
    let lp = log_softmax_rows(logits.slice(ndarray::s![..tokens.len() - 1, ..]));
    let total = tokens[1..].iter().enumerate().map(|(t, &next)| -lp[[t, next as usize]]).sum();
    Ok((total, tokens.len() - 1))
}

/// Mean next-token negative log-likelihood of each sequence.
pub fn per_sample_nll<M: LanguageModel + ?Sized>(model: &M, data: &TokenDataset) -> Result<Vec<f64>> {
    data.sequences()
        .iter()
        .map(|seq| {
            let logits = model.forward(seq)?;
            let (nll, count) = sequence_nll(logits.view(), seq)?;
            Ok(nll / count as f64)
        })
        .collect()
}

/// `exp` of the mean NLL over every next-token prediction in `data`.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, data: &TokenDataset) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in data.sequences() {
        let logits = model.forward(seq)?;
        let (nll, n) = sequence_nll(logits.view(), seq)?;
        total += nll;
        count += n;
    }
    Ok((total / count as f64).exp())
}

/// Summed `KL(p ‖ q)` over rows, where `p` and `q` are given as log-probabilities.
pub fn kl_rows(log_p: ArrayView2<'_, f64>, log_q: ArrayView2<'_, f64>) -> f64 {
    log_p
        .rows()
        .into_iter()
        .zip(log_q.rows())
        .map(|(lp, lq)| lp.iter().zip(lq.iter()).map(|(a, b)| a.exp() * (a - b)).sum::<f64>())
        .sum()
}

/// Mean over all positions of `KL(original ‖ compressed)` between the
/// next-token distributions.
pub fn rkl<A, B>(original: &A, compressed: &B, data: &TokenDataset) -> Result<f64>
where
    A: LanguageModel + ?Sized,
    B: LanguageModel + ?Sized,
{
    if original.config().vocab != compressed.config().vocab {
        return Err(Error::DimensionMismatch { expected: original.config().vocab, got: compressed.config().vocab });
    }
    let mut total = 0.0;
    let mut positions = 0usize;
    for seq in data.sequences() {
        let lp = log_softmax_rows(original.forward(seq)?.view());
        let lq = log_softmax_rows(compressed.forward(seq)?.view());
        total += kl_rows(lp.view(), lq.view());
        positions += seq.len();
    }
    Ok((total / positions as f64).max(0.0))
}
