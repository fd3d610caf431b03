use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{Category, LayerId, ModelConfig};
use crate::error::{Error, Result};
use crate::factorize::LowRankFactors;

/// Observer for every linear layer evaluated during a forward pass:
/// `(layer, input rows, output rows)`.
pub(crate) type Tap<'t> = dyn FnMut(LayerId, ArrayView2<'_, f64>, ArrayView2<'_, f64>) + 't;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Block {
    pub attn_norm: Array1<f64>,
    pub mlp_norm: Array1<f64>,
    /// indexed by [`Category::index`]
    pub weights: Vec<Array2<f64>>,
}

/// Transformer weights. Immutable once built; compression wraps it in a
/// [`super::CompressedModel`] instead of editing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embedding: Array2<f64>,
    blocks: Vec<Block>,
    final_norm: Array1<f64>,
    rope_cos: Array2<f64>,
    rope_sin: Array2<f64>,
}

impl Model {
    pub(crate) fn from_parts(
        config: ModelConfig,
        embedding: Array2<f64>,
        blocks: Vec<Block>,
        final_norm: Array1<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let bad = |what: String| Err(Error::ShapeMismatch(what));
        if embedding.dim() != (config.vocab, d) {
            return bad(format!("embedding {:?}", embedding.dim()));
        }
        if final_norm.len() != d || blocks.len() != config.n_layers {
            return bad("final norm or block count".into());
        }
        for (l, b) in blocks.iter().enumerate() {
            if b.attn_norm.len() != d || b.mlp_norm.len() != d || b.weights.len() != 7 {
                return bad(format!("block {l} norms"));
            }
            for c in Category::ALL {
                let shape = c.shape(&config);
                if b.weights[c.index()].dim() != shape {
                    return bad(format!("layers.{l}.{c}: {:?} != {:?}", b.weights[c.index()].dim(), shape));
                }
                if b.weights[c.index()].iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("model weights"));
                }
            }
        }
        let (rope_cos, rope_sin) = rope_tables(config.max_seq, config.head_dim());
        Ok(Self { config, embedding, blocks, final_norm, rope_cos, rope_sin })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weight(&self, id: LayerId) -> &Array2<f64> {
        &self.blocks[id.layer].weights[id.category.index()]
    }

    /// Replaces one weight matrix; the shape must be unchanged.
    pub fn set_weight(&mut self, id: LayerId, w: Array2<f64>) -> Result<()> {
        let slot = &mut self.blocks[id.layer].weights[id.category.index()];
        if slot.dim() != w.dim() {
            return Err(Error::ShapeMismatch(format!("{id}: {:?} != {:?}", w.dim(), slot.dim())));
        }
        *slot = w;
        Ok(())
    }

    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    pub(crate) fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn final_norm(&self) -> &Array1<f64> {
        &self.final_norm
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() < 2 || tokens.len() > self.config.max_seq {
            return Err(Error::SequenceLength { len: tokens.len(), min: 2, max: self.config.max_seq });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::TokenOutOfVocab { token: t, vocab: self.config.vocab });
        }
        Ok(())
    }

    /// Causal forward pass returning `seq × vocab` logits.
    ///
    /// `replaced` supplies factors for layers that have been compressed;
    /// `tap` observes the input and output of every linear layer.
    pub(crate) fn forward_with<'f>(
        &self,
        tokens: &[u32],
        replaced: &dyn Fn(LayerId) -> Option<&'f LowRankFactors>,
        mut tap: Option<&mut Tap<'_>>,
    ) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let n = tokens.len();
        let mut x = Array2::<f64>::zeros((n, cfg.d_model));
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).assign(&self.embedding.row(t as usize));
        }

        for (l, block) in self.blocks.iter().enumerate() {
            let mut linear = |cat: Category, input: ArrayView2<'_, f64>| -> Result<Array2<f64>> {
                let id = LayerId::new(l, cat);
                let out = match replaced(id) {
                    Some(f) => f.apply_rows(input)?,
                    None => input.dot(&block.weights[cat.index()].t()),
                };
                if let Some(t) = tap.as_deref_mut() {
                    t(id, input, out.view());
                }
                Ok(out)
            };

            let h = rms_norm(&x, &block.attn_norm, cfg.norm_eps);
            let mut q = linear(Category::AttnQ, h.view())?;
            let mut k = linear(Category::AttnK, h.view())?;
            let v = linear(Category::AttnV, h.view())?;
            self.apply_rope(&mut q);
            self.apply_rope(&mut k);
            let att = causal_attention(&q, &k, &v, cfg.n_heads);
            x += &linear(Category::AttnO, att.view())?;

            let h = rms_norm(&x, &block.mlp_norm, cfg.norm_eps);
            let gate = linear(Category::MlpGate, h.view())?;
            let up = linear(Category::MlpUp, h.view())?;
            let act = gate.mapv(silu) * &up;
            x += &linear(Category::MlpDown, act.view())?;
        }

        let h = rms_norm(&x, &self.final_norm, cfg.norm_eps);
        Ok(h.dot(&self.embedding.t()))
    }

    /// Rotates each head's (even, odd) coordinate pairs by a
    /// position-dependent angle.
    fn apply_rope(&self, m: &mut Array2<f64>) {
        let hd = self.config.head_dim();
        let half = hd / 2;
        for (pos, mut row) in m.rows_mut().into_iter().enumerate() {
            for h in 0..self.config.n_heads {
                for i in 0..half {
                    let (c, s) = (self.rope_cos[[pos, i]], self.rope_sin[[pos, i]]);
                    let (a, b) = (h * hd + 2 * i, h * hd + 2 * i + 1);
                    let (x0, x1) = (row[a], row[b]);
                    row[a] = x0 * c - x1 * s;
                    row[b] = x0 * s + x1 * c;
                }
            }
        }
    }
}

fn rope_tables(max_seq: usize, head_dim: usize) -> (Array2<f64>, Array2<f64>) {
    let half = head_dim / 2;
    let angle = |pos: usize, i: usize| pos as f64 * 10000f64.powf(-2.0 * i as f64 / head_dim as f64);
    (
        Array2::from_shape_fn((max_seq, half), |(p, i)| angle(p, i).cos()),
        Array2::from_shape_fn((max_seq, half), |(p, i)| angle(p, i).sin()),
    )
}

fn rms_norm(x: &Array2<f64>, scale: &Array1<f64>, eps: f64) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        row.zip_mut_with(scale, |v, g| *v *= inv * g);
    }
    out
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn causal_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, n_heads: usize) -> Array2<f64> {
    let (n, d) = q.dim();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Array2::<f64>::zeros((n, d));
    for h in 0..n_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
        let mut scores = qh.dot(&kh.t());
        for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
            let max = row.iter().take(i + 1).fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j <= i { (*v * scale - max).exp() } else { 0.0 };
                total += *v;
            }
            row.mapv_inplace(|v| v / total);
        }
        out.slice_mut(cols).assign(&scores.dot(&vh));
    }
    out
}
