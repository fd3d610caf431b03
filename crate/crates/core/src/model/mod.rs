//! Forward-only LLaMA-shaped transformer used as the compression target.
//!
//! Each block has the seven linear categories of the LLaMA family
//! (`attn_q`, `attn_k`, `attn_v`, `attn_o`, `mlp_gate`, `mlp_up`,
//! `mlp_down`), RMSNorm, rotary position embeddings and a SiLU-gated MLP. The
//! output head is tied to the token embedding and is never compressed.

mod bundle;
mod capture;
mod compressed;
mod eval;
mod synth;
mod transformer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bundle::{Tensor, TensorBundle, TensorData};
pub use capture::{capture_compressed_inputs, capture_features, capture_grouped, capture_inputs, finalize_pooled};
pub use compressed::{compress_model, compress_with_ranks, param_count, CompressedModel, ParamCount};
pub use eval::{
    kl_rows, log_softmax_rows, perplexity, per_sample_nll, rkl, sequence_nll, LanguageModel,
};
pub use synth::{sample_corpus, synth_weights};
pub use transformer::Model;

/// The seven linear-layer categories of a LLaMA block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpGate,
    MlpUp,
    MlpDown,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::AttnQ,
        Category::AttnK,
        Category::AttnV,
        Category::AttnO,
        Category::MlpGate,
        Category::MlpUp,
        Category::MlpDown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::AttnQ => "attn_q",
            Category::AttnK => "attn_k",
            Category::AttnV => "attn_v",
            Category::AttnO => "attn_o",
            Category::MlpGate => "mlp_gate",
            Category::MlpUp => "mlp_up",
            Category::MlpDown => "mlp_down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Category::AttnQ | Category::AttnK | Category::AttnV | Category::AttnO)
    }

    /// `(d2, d1)`: output and input width of this category's weight.
    pub fn shape(self, config: &ModelConfig) -> (usize, usize) {
        let (d, f) = (config.d_model, config.d_ff);
        match self {
            Category::AttnQ | Category::AttnK | Category::AttnV | Category::AttnO => (d, d),
            Category::MlpGate | Category::MlpUp => (f, d),
            Category::MlpDown => (d, f),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown layer category {s:?}")))
    }
}

/// One linear layer: block index plus category. Displays as
/// `layers.<i>.<category>`, which is also its file and tensor name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    pub layer: usize,
    pub category: Category,
}

impl LayerId {
    pub fn new(layer: usize, category: Category) -> Self {
        Self { layer, category }
    }

    /// Every linear layer of a model, block-major.
    pub fn all(config: &ModelConfig) -> Vec<LayerId> {
        (0..config.n_layers)
            .flat_map(|l| Category::ALL.into_iter().map(move |c| LayerId::new(l, c)))
            .collect()
    }

    pub fn shape(&self, config: &ModelConfig) -> (usize, usize) {
        self.category.shape(config)
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.category)
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad layer id {s:?}"));
        let rest = s.strip_prefix("layers.").ok_or_else(bad)?;
        let (idx, cat) = rest.split_once('.').ok_or_else(bad)?;
        Ok(LayerId { layer: idx.parse().map_err(|_| bad())?, category: cat.parse()? })
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab: 256, d_model: 64, n_heads: 4, n_layers: 4, d_ff: 176, max_seq: 256, norm_eps: 1e-5 }
    }
}

impl ModelConfig {
    /// LLaMA-2-7B shapes. Only used for rank arithmetic on published
    /// allocations; weights at this size are never materialized.
    pub fn llama2_7b() -> Self {
        Self { vocab: 32000, d_model: 4096, n_heads: 32, n_layers: 32, d_ff: 11008, max_seq: 4096, norm_eps: 1e-5 }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if [self.vocab, self.d_model, self.n_heads, self.n_layers, self.d_ff, self.max_seq].contains(&0) {
            return fail("all model dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.d_ff < self.d_model {
            return fail(format!("d_ff {} smaller than d_model {}", self.d_ff, self.d_model));
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Dense parameter count of the seven linear categories.
    pub fn linear_params(&self) -> usize {
        LayerId::all(self)
            .iter()
            .map(|id| {
                let (d2, d1) = id.shape(self);
                d1 * d2
            })
            .sum()
    }
}

/// Token sequences used for calibration and evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenDataset {
    sequences: Vec<Vec<u32>>,
}

impl TokenDataset {
    pub fn new(sequences: Vec<Vec<u32>>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Empty("token dataset"));
        }
        if let Some(s) = sequences.iter().find(|s| s.len() < 2) {
            return Err(Error::SequenceLength { len: s.len(), min: 2, max: usize::MAX });
        }
        Ok(Self { sequences })
    }

    /// Splits raw bytes into consecutive windows of `window` tokens.
    ///
    /// A trailing partial window is dropped unless it is the only data.
    pub fn from_bytes(bytes: &[u8], window: usize) -> Result<Self> {
        if window < 2 {
            return Err(Error::InvalidConfig(format!("window length {window} < 2")));
        }
        let mut seqs: Vec<Vec<u32>> =
            bytes.chunks_exact(window).map(|c| c.iter().map(|&b| u32::from(b)).collect()).collect();
        if seqs.is_empty() && bytes.len() >= 2 {
            seqs.push(bytes.iter().map(|&b| u32::from(b)).collect());
        }
        Self::new(seqs)
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Number of next-token predictions in the dataset.
    pub fn predictions(&self) -> usize {
        self.sequences.iter().map(|s| s.len() - 1).sum()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.sequences[i].clone()).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.sequences.iter().flatten().map(|&t| t as u8).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_id_round_trips() {
        let id = LayerId::new(3, Category::MlpGate);
        assert_eq!(id.to_string(), "layers.3.mlp_gate");
        assert_eq!("layers.3.mlp_gate".parse::<LayerId>().unwrap(), id);
        assert!("layers.x.attn_q".parse::<LayerId>().is_err());
        assert!("layers.1.attn_z".parse::<LayerId>().is_err());
    }

    #[test]
    fn default_shapes() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(Category::AttnQ.shape(&c), (64, 64));
        assert_eq!(Category::MlpGate.shape(&c), (176, 64));
        assert_eq!(Category::MlpDown.shape(&c), (64, 176));
        assert_eq!(LayerId::all(&c).len(), 28);
        assert_eq!(c.linear_params(), 4 * (16384 + 22528 + 11264));
    }

    #[test]
    fn config_invariants() {
        let bad = ModelConfig { n_heads: 5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { d_ff: 32, ..Default::default() };
        assert!(bad.validate().is_err());
        ModelConfig::llama2_7b().validate().unwrap();
    }

    #[test]
    fn dataset_windows() {
        let d = TokenDataset::from_bytes(b"hello world!", 4).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.predictions(), 9);
        assert_eq!(d.to_bytes(), b"hello world!");
        let short = TokenDataset::from_bytes(b"abc", 8).unwrap();
        assert_eq!(short.len(), 1);
        assert!(TokenDataset::from_bytes(b"a", 8).is_err());
        assert!(TokenDataset::new(vec![]).is_err());
        assert!(TokenDataset::new(vec![vec![1]]).is_err());
    }
}
