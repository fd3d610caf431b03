//! Deterministic stand-in weights and self-sampled corpora.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::transformer::Block;
use super::{Category, LanguageModel, Model, ModelConfig, TokenDataset};
use crate::error::{Error, Result};
use crate::rng::substream;

/// Noise energy relative to the low-rank part of each weight.
const NOISE_SCALE: f64 = 0.1;
/// Per-entry standard deviation of the token embedding.
const EMBED_STD: f64 = 0.35;

/// Builds a model whose weights are a unit-gain low-rank matrix of rank
/// `⌈min(d1, d2) / 4⌉` plus Gaussian noise at 0.1 relative scale, rounded to
/// `f32` precision. The same `(config, seed)` always yields the same model.
pub fn synth_weights(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = substream(seed, "weights");
    let d = config.d_model;
    let embedding = round_f32(gaussian(config.vocab, d, &mut rng) * EMBED_STD);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let weights = Category::ALL
            .iter()
            .map(|c| {
                let (d2, d1) = c.shape(config);
                structured_weight(d2, d1, &mut rng)
            })
            .collect();
        blocks.push(Block { attn_norm: Array1::ones(d), mlp_norm: Array1::ones(d), weights });
    }
    Model::from_parts(config.clone(), embedding, blocks, Array1::ones(d))
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn round_f32(m: Array2<f64>) -> Array2<f64> {
    m.mapv(|v| f64::from(v as f32))
}

fn structured_weight(d2: usize, d1: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let k = d1.min(d2).div_ceil(4);
    let low = gaussian(d2, k, rng).dot(&gaussian(k, d1, rng));
    // unit gain: E‖W x‖² = ‖x‖² for isotropic x
    let low_norm = low.iter().map(|v| v * v).sum::<f64>().sqrt();
    let low = low * ((d1 as f64).sqrt() / low_norm);
    let noise = gaussian(d2, d1, rng);
    let noise_norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
    let noise = noise * (NOISE_SCALE * (d1 as f64).sqrt() / noise_norm);
    round_f32(low + noise)
}

/// Samples `count` sequences of `len` tokens from the model itself at the
/// given temperature, starting from uniformly drawn first tokens.
///
/// Sequences drawn this way make perplexity and reverse KL move together
/// under compression, since the data follows the base model's distribution.
pub fn sample_corpus<M: LanguageModel + ?Sized>(
    model: &M,
    count: usize,
    len: usize,
    temperature: f64,
    seed: u64,
) -> Result<TokenDataset> {
    if len < 2 || len > model.config().max_seq {
        return Err(Error::SequenceLength { len, min: 2, max: model.config().max_seq });
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("sampling temperature {temperature} must be positive")));
    }
    let vocab = model.config().vocab;
    let mut rng = substream(seed, "corpus");
    let mut sequences = Vec::with_capacity(count);
    for _ in 0..count {
        let mut seq = vec![rng.random_range(0..vocab as u32)];
        while seq.len() < len {
            // the forward pass needs two tokens; the first step conditions on a
            // duplicated start token and only the first row is read
            let ctx: Vec<u32> = if seq.len() == 1 { vec![seq[0], seq[0]] } else { seq.clone() };
            let logits = model.forward(&ctx)?;
            let row = logits.row(seq.len() - 1);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let weights: Vec<f64> = row.iter().map(|v| ((v - max) / temperature).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut next = vocab - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    next = i;
                    break;
                }
                u -= w;
            }
            seq.push(next as u32);
        }
        sequences.push(seq);
    }
    TokenDataset::new(sequences)
}
