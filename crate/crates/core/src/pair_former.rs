//! Per-pair pooling of sketch and text tokens into `k` learnable tokens.
//!
//! Each pair is processed on its own: the shared token block `z` is
//! prepended to the pair's sketch and text tokens, a small pre-norm
//! transformer runs self-attention over the concatenation, and the outputs at
//! the positions of `z` become the pair's pooled representation. Nothing is
//! shared between pairs except parameters, so a pair's pooled tokens are
//! bit-identical no matter which other pairs are present or in what order.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, Init, LayerNorm, Linear, ParamBuilder, ParamGroup};
use crate::pair_codec::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairFormerConfig {
    /// Number of pooled tokens per pair.
    pub k: usize,
    /// Adapter width.
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    /// Add learned segment embeddings (pool / sketch / text) before attention.
    pub segment_embeddings: bool,
}

impl Default for PairFormerConfig {
    fn default() -> Self {
        Self {
            k: 32,
            d: 64,
            heads: 4,
            blocks: 2,
            ff_mult: 4,
            segment_embeddings: false,
        }
    }
}

const NORM_EPS: f64 = 1e-5;

/// Pre-norm transformer block: self-attention then feed-forward, both residual.
#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm2: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    heads: usize,
}

impl Block {
    fn new(pb: &ParamBuilder, cfg: &PairFormerConfig) -> Result<Self> {
        let d = cfg.d;
        let attn = pb.pp("attn");
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), d, NORM_EPS)?,
            q: Linear::new(&attn.pp("q"), d, d, true)?,
            k: Linear::new(&attn.pp("k"), d, d, true)?,
            v: Linear::new(&attn.pp("v"), d, d, true)?,
            out: Linear::new(&attn.pp("out"), d, d, true)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), d, NORM_EPS)?,
            ff_in: Linear::new(&pb.pp("ff_in"), d, d * cfg.ff_mult, true)?,
            ff_out: Linear::new(&pb.pp("ff_out"), d * cfg.ff_mult, d, true)?,
            heads: cfg.heads,
        })
    }

    /// `h` is `(1, L, d)`.
    fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let x = self.norm1.forward(h)?;
        let a = multi_head_attention(
            &self.q.forward(&x)?,
            &self.k.forward(&x)?,
            &self.v.forward(&x)?,
            self.heads,
            None,
        )?;
        let h = (h + self.out.forward(&a)?)?;
        let f = self.ff_out.forward(&self.ff_in.forward(&self.norm2.forward(&h)?)?.gelu()?)?;
        Ok((h + f)?)
    }
}

/// Learnable pooling tokens `z` plus the self-attention blocks.
#[derive(Debug, Clone)]
pub struct PairFormerParams {
    z: Tensor,
    segments: Option<Tensor>,
    blocks: Vec<Block>,
    cfg: PairFormerConfig,
}

impl PairFormerParams {
    pub fn new(pb: &ParamBuilder, cfg: &PairFormerConfig) -> Result<Self> {
        if cfg.k == 0 {
            return Err(Error::invalid("pair_former.k", "must be >= 1"));
        }
        if cfg.heads == 0 || cfg.d % cfg.heads != 0 {
            return Err(Error::invalid(
                "pair_former.heads",
                format!("width {} not divisible by {} heads", cfg.d, cfg.heads),
            ));
        }
        let pb = pb.group(ParamGroup::PairFormer);
        let z = pb.get(&[cfg.k, cfg.d], "z", Init::Normal { std: 0.02 })?;
        let segments = if cfg.segment_embeddings {
            Some(pb.get(&[3, cfg.d], "segments", Init::Normal { std: 0.02 })?)
        } else {
            None
        };
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(&pb.pp("blocks").pp(i), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            z,
            segments,
            blocks,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &PairFormerConfig {
        &self.cfg
    }

    pub fn k(&self) -> usize {
        self.cfg.k
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }

    /// The shared pooling tokens. Every pair reads this same tensor.
    pub fn z(&self) -> &Tensor {
        &self.z
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

/// The `k x d` pooled tokens of one pair.
#[derive(Debug, Clone)]
pub struct PooledPair {
    pub p: Tensor,
    pub pair_index: usize,
}

/// Pooled tokens of `N` pairs, row `i` coming from pair `i` alone.
#[derive(Debug, Clone)]
pub struct ConditionTensor {
    pairs: Vec<PooledPair>,
    k: usize,
    d: usize,
}

impl ConditionTensor {
    pub fn empty(k: usize, d: usize) -> Self {
        Self {
            pairs: Vec::new(),
            k,
            d,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(N, k, d)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.pairs.len(), self.k, self.d)
    }

    pub fn pairs(&self) -> &[PooledPair] {
        &self.pairs
    }

    pub fn row(&self, i: usize) -> Option<&Tensor> {
        self.pairs.get(i).map(|p| &p.p)
    }

    /// Stacked `(N, k, d)` tensor, `None` when there are no pairs.
    pub fn stacked(&self) -> Result<Option<Tensor>> {
        if self.pairs.is_empty() {
            return Ok(None);
        }
        let rows: Vec<&Tensor> = self.pairs.iter().map(|p| &p.p).collect();
        Ok(Some(Tensor::stack(&rows, 0)?))
    }

    /// All pooled tokens as one `(N * k, d)` key/value sequence.
    pub fn flattened(&self) -> Result<Option<Tensor>> {
        if self.pairs.is_empty() {
            return Ok(None);
        }
        let rows: Vec<&Tensor> = self.pairs.iter().map(|p| &p.p).collect();
        Ok(Some(Tensor::cat(&rows, 0)?))
    }
}

fn check_width(seq: &TokenSequence, d: usize, what: &'static str) -> Result<()> {
    if seq.dim() != d {
        return Err(Error::shape(what, d, seq.dim()));
    }
    Ok(())
}

/// Self-attention over `[z; hS; hT]`; returns the outputs at the positions of `z`.
///
/// Empty sketch or text sequences simply shorten the concatenation.
pub fn pool_pair(
    h_sketch: &TokenSequence,
    h_text: &TokenSequence,
    params: &PairFormerParams,
) -> Result<PooledPair> {
    pool_pair_indexed(h_sketch, h_text, params, 0)
}

fn pool_pair_indexed(
    h_sketch: &TokenSequence,
    h_text: &TokenSequence,
    params: &PairFormerParams,
    pair_index: usize,
) -> Result<PooledPair> {
    let d = params.d();
    check_width(h_sketch, d, "pair-former sketch width")?;
    check_width(h_text, d, "pair-former text width")?;
    let dtype = params.z.dtype();
    let mut parts = vec![params.z.clone()];
    let mut segment_ids = vec![0u32; params.k()];
    for (seq, id) in [(h_sketch, 1u32), (h_text, 2u32)] {
        if !seq.is_empty() {
            parts.push(seq.tokens().to_dtype(dtype)?);
            segment_ids.extend(std::iter::repeat(id).take(seq.len()));
        }
    }
    let mut h = Tensor::cat(&parts, 0)?;
    if let Some(seg) = &params.segments {
        let ids = Tensor::from_vec(segment_ids.clone(), segment_ids.len(), h.device())?;
        h = (h + seg.index_select(&ids, 0)?)?;
    }
    let mut h = h.unsqueeze(0)?;
    for block in &params.blocks {
        h = block.forward(&h)?;
    }
    let p = h.squeeze(0)?.narrow(0, 0, params.k())?;
    Ok(PooledPair { p, pair_index })
}

/// Pools every pair independently and stacks the results in input order.
pub fn build_condition_tensor(
    pairs: &[(TokenSequence, TokenSequence)],
    params: &PairFormerParams,
) -> Result<ConditionTensor> {
    let pooled = pairs
        .iter()
        .enumerate()
        .map(|(i, (s, t))| pool_pair_indexed(s, t, params, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionTensor {
        pairs: pooled,
        k: params.k(),
        d: params.d(),
    })
}

/// Ablation: `[hS_1; hT_1; ...; hS_N; hT_N]` with no pooling. `None` for `N = 0`.
pub fn no_pooling_tensor(pairs: &[(TokenSequence, TokenSequence)]) -> Result<Option<Tensor>> {
    let mut parts = Vec::new();
    for (s, t) in pairs {
        if s.dim() != t.dim() {
            return Err(Error::shape("no-pooling pair width", s.dim(), t.dim()));
        }
        for seq in [s, t] {
            if !seq.is_empty() {
                parts.push(seq.tokens().clone());
            }
        }
    }
    if parts.is_empty() {
        return Ok(None);
    }
    Ok(Some(Tensor::cat(&parts, 0)?))
}

/// Result of mean pooling, with the zero rows appended to each pair.
#[derive(Debug, Clone)]
pub struct MeanPooled {
    pub tokens: Tensor,
    /// Per pair: `(sketch rows padded, text rows padded)`.
    pub padding: Vec<(usize, usize)>,
}

/// Ablation: `(1/N) * sum_i [hS_i; hT_i]`, padding shorter sequences with zeros.
pub fn mean_pooling_tensor(pairs: &[(TokenSequence, TokenSequence)]) -> Result<MeanPooled> {
    if pairs.is_empty() {
        return Err(Error::Empty("mean pooling over zero pairs".into()));
    }
    let d = pairs[0].0.dim();
    let max_s = pairs.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
    let max_t = pairs.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
    if max_s + max_t == 0 {
        return Err(Error::Empty("mean pooling over empty sequences".into()));
    }
    let pad = |seq: &TokenSequence, to: usize| -> Result<Option<Tensor>> {
        if seq.dim() != d {
            return Err(Error::shape("mean-pooling pair width", d, seq.dim()));
        }
        if to == 0 {
            return Ok(None);
        }
        let t = seq.tokens();
        if seq.len() == to {
            return Ok(Some(t.clone()));
        }
        let zeros = Tensor::zeros((to - seq.len(), d), t.dtype(), t.device())?;
        if seq.is_empty() {
            return Ok(Some(zeros));
        }
        Ok(Some(Tensor::cat(&[t, &zeros], 0)?))
    };
    let mut sum: Option<Tensor> = None;
    let mut padding = Vec::with_capacity(pairs.len());
    for (s, t) in pairs {
        let parts: Vec<Tensor> = [pad(s, max_s)?, pad(t, max_t)?].into_iter().flatten().collect();
        let joined = Tensor::cat(&parts, 0)?;
        padding.push((max_s - s.len(), max_t - t.len()));
        sum = Some(match sum {
            None => joined,
            Some(acc) => (acc + joined)?,
        });
    }
    let tokens = (sum.expect("non-empty") / pairs.len() as f64)?;
    Ok(MeanPooled { tokens, padding })
}

/// Mean over the token axis; handy for summaries and tests.
pub fn token_mean(t: &Tensor) -> Result<Tensor> {
    Ok(t.mean_keepdim(D::Minus2)?)
}
