use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, Init, LayerNorm, Linear, ParamBuilder, ParamGroup};

/// Key/value tokens for an attention call, optionally with an additive
/// `(B, L)` mask whose excluded entries hold [`crate::nn::MASKED`].
#[derive(Debug, Clone)]
pub struct AttnContext {
    pub tokens: Tensor,
    pub mask: Option<Tensor>,
}

impl AttnContext {
    pub fn new(tokens: Tensor) -> Self {
        Self { tokens, mask: None }
    }
}

/// Pooled condition tokens fed to the paired layers.
///
/// `gate` is a `(B, 1, 1)` 0/1 tensor that silences the paired branch for
/// batch rows without pairs.
#[derive(Debug, Clone)]
pub struct PairedContext {
    pub ctx: AttnContext,
    pub gate: Option<Tensor>,
}

impl PairedContext {
    pub fn new(tokens: Tensor) -> Self {
        Self {
            ctx: AttnContext::new(tokens),
            gate: None,
        }
    }
}

/// The host cross-attention `w`: queries from image features, keys and values
/// from global-text tokens.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new(pb: &ParamBuilder, channels: usize, ctx_dim: usize, heads: usize) -> Result<Self> {
        check_heads(channels, heads)?;
        Ok(Self {
            q: Linear::new(&pb.pp("q"), channels, channels, false)?,
            k: Linear::new(&pb.pp("k"), ctx_dim, channels, false)?,
            v: Linear::new(&pb.pp("v"), ctx_dim, channels, false)?,
            out: Linear::new(&pb.pp("out"), channels, channels, true)?,
            heads,
        })
    }

    pub fn query(&self, x: &Tensor) -> Result<Tensor> {
        self.q.forward(x)
    }

    pub fn attend(&self, q: &Tensor, ctx: &AttnContext) -> Result<Tensor> {
        let a = multi_head_attention(
            q,
            &self.k.forward(&ctx.tokens)?,
            &self.v.forward(&ctx.tokens)?,
            self.heads,
            ctx.mask.as_ref(),
        )?;
        self.out.forward(&a)
    }
}

/// The added paired layer `w_hat`: own key/value/output projections over
/// pooled pair tokens, zero-initialized output.
#[derive(Debug, Clone)]
pub struct PairedAttentionLayer {
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl PairedAttentionLayer {
    pub fn new(pb: &ParamBuilder, channels: usize, d: usize, heads: usize) -> Result<Self> {
        check_heads(channels, heads)?;
        let pb = pb.group(ParamGroup::PairedAttention);
        Ok(Self {
            k: Linear::new(&pb.pp("k"), d, channels, false)?,
            v: Linear::new(&pb.pp("v"), d, channels, false)?,
            out: Linear::with_init(&pb.pp("out"), channels, channels, true, Init::Zeros)?,
            heads,
        })
    }

    pub fn key_width(&self) -> usize {
        self.k.in_dim()
    }

    /// `q` comes from the host layer's query projection.
    pub fn attend(&self, q: &Tensor, paired: &PairedContext) -> Result<Tensor> {
        let p = &paired.ctx.tokens;
        if p.dims()[p.rank() - 1] != self.key_width() {
            return Err(Error::shape(
                "paired attention key width",
                self.key_width(),
                p.dims()[p.rank() - 1],
            ));
        }
        let a = multi_head_attention(
            q,
            &self.k.forward(p)?,
            &self.v.forward(p)?,
            self.heads,
            paired.ctx.mask.as_ref(),
        )?;
        let y = self.out.forward(&a)?;
        Ok(match &paired.gate {
            Some(g) => y.broadcast_mul(g)?,
            None => y,
        })
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::invalid(
            "heads",
            format!("{channels} channels not divisible by {heads} heads"),
        ));
    }
    Ok(())
}

/// One cross-attention site of the denoiser: `w` plus, when the adapter is
/// installed, exactly one paired layer after it.
#[derive(Debug, Clone)]
pub struct CrossAttentionSite {
    norm: LayerNorm,
    w: CrossAttention,
    paired: Option<PairedAttentionLayer>,
}

impl CrossAttentionSite {
    pub fn new(
        pb: &ParamBuilder,
        channels: usize,
        text_dim: usize,
        adapter_dim: Option<usize>,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&pb.pp("norm"), channels, 1e-5)?,
            w: CrossAttention::new(&pb.pp("attn"), channels, text_dim, heads)?,
            paired: adapter_dim
                .map(|d| PairedAttentionLayer::new(&pb.pp("paired"), channels, d, heads))
                .transpose()?,
        })
    }

    pub fn host(&self) -> &CrossAttention {
        &self.w
    }

    pub fn paired(&self) -> Option<&PairedAttentionLayer> {
        self.paired.as_ref()
    }

    /// Residual site on `(B, L, C)` tokens: `x + w(n(x), hTg) + alpha * w_hat(n(x), P)`.
    pub fn forward(
        &self,
        x: &Tensor,
        text: &AttnContext,
        paired: Option<&PairedContext>,
        alpha: f64,
    ) -> Result<Tensor> {
        let h = self.norm.forward(x)?;
        Ok((x + paired_cross_attention(self, &h, text, paired, alpha)?)?)
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", format!("{alpha} is outside [0, 1]")));
    }
    Ok(())
}

/// `w(x, hTg) + alpha * w_hat(x, P)` on `(B, L, C)` feature tokens.
///
/// The paired branch is skipped entirely when `alpha == 0`, when there are no
/// condition tokens, or when the site has no paired layer, so the result is
/// then bit-identical to the host attention alone.
pub fn paired_cross_attention(
    site: &CrossAttentionSite,
    x: &Tensor,
    text: &AttnContext,
    paired: Option<&PairedContext>,
    alpha: f64,
) -> Result<Tensor> {
    check_alpha(alpha)?;
    let q = site.w.query(x)?;
    let base = site.w.attend(&q, text)?;
    match (&site.paired, paired) {
        (Some(layer), Some(p)) if alpha != 0.0 => {
            let extra = layer.attend(&q, p)?;
            Ok((base + (extra * alpha)?)?)
        }
        _ => Ok(base),
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::to_f64_vec;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn site(seed: u64, c: usize, text: usize, d: usize, heads: usize) -> (CrossAttentionSite, crate::nn::ParamStore) {
        let pb = ParamBuilder::seeded(seed, DType::F64, &Device::Cpu);
        let s = CrossAttentionSite::new(&pb.pp("site"), c, text, Some(d), heads).unwrap();
        (s, pb.store())
    }

    #[test]
    fn alpha_outside_unit_interval_rejected() {
        let (s, _) = site(0, 4, 4, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_t(&[1, 2, 4], &mut rng);
        let t = AttnContext::new(rand_t(&[1, 3, 4], &mut rng));
        for a in [-0.1, 1.5, f64::NAN] {
            let err = paired_cross_attention(&s, &x, &t, None, a).unwrap_err();
            assert!(err.to_string().contains("alpha"));
        }
    }

    #[test]
    fn alpha_zero_is_bit_identical_to_host_only() {
        let (s, store) = site(1, 8, 6, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // make the paired output non-trivial
        store
            .set("site.paired.out.weight", &rand_t(&[8, 8], &mut rng))
            .unwrap();
        let x = rand_t(&[1, 5, 8], &mut rng);
        let t = AttnContext::new(rand_t(&[1, 3, 6], &mut rng));
        let p = PairedContext::new(rand_t(&[1, 4, 4], &mut rng));
        let host = s.host().attend(&s.host().query(&x).unwrap(), &t).unwrap();
        let a0 = paired_cross_attention(&s, &x, &t, Some(&p), 0.0).unwrap();
        assert_eq!(to_f64_vec(&host).unwrap(), to_f64_vec(&a0).unwrap());
        let empty = paired_cross_attention(&s, &x, &t, None, 1.0).unwrap();
        assert_eq!(to_f64_vec(&host).unwrap(), to_f64_vec(&empty).unwrap());
        let a1 = paired_cross_attention(&s, &x, &t, Some(&p), 1.0).unwrap();
        assert_ne!(to_f64_vec(&host).unwrap(), to_f64_vec(&a1).unwrap());
    }

    #[test]
    fn zero_initialized_output_is_inert() {
        let (s, _) = site(2, 8, 6, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&[1, 5, 8], &mut rng);
        let t = AttnContext::new(rand_t(&[1, 3, 6], &mut rng));
        let p = PairedContext::new(rand_t(&[1, 4, 4], &mut rng));
        let a0 = paired_cross_attention(&s, &x, &t, None, 1.0).unwrap();
        let a1 = paired_cross_attention(&s, &x, &t, Some(&p), 1.0).unwrap();
        assert_eq!(to_f64_vec(&a0).unwrap(), to_f64_vec(&a1).unwrap());
    }

    #[test]
    fn alpha_linearity() {
        let (s, store) = site(3, 8, 6, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        store
            .set("site.paired.out.weight", &rand_t(&[8, 8], &mut rng))
            .unwrap();
        let x = rand_t(&[2, 5, 8], &mut rng);
        let t = AttnContext::new(rand_t(&[2, 3, 6], &mut rng));
        let p = PairedContext::new(rand_t(&[2, 6, 4], &mut rng));
        let at = |a| to_f64_vec(&paired_cross_attention(&s, &x, &t, Some(&p), a).unwrap()).unwrap();
        let (x0, x1) = (at(0.0), at(1.0));
        for alpha in [0.1, 0.37, 0.5, 0.9] {
            let xa = at(alpha);
            for i in 0..x0.len() {
                let lhs = xa[i] - x0[i];
                let rhs = alpha * (x1[i] - x0[i]);
                assert!((lhs - rhs).abs() <= 1e-12, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn masked_tokens_get_no_weight() {
        let (s, store) = site(4, 4, 4, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        store.set("site.paired.out.weight", &rand_t(&[4, 4], &mut rng)).unwrap();
        let x = rand_t(&[1, 2, 4], &mut rng);
        let t = AttnContext::new(rand_t(&[1, 3, 4], &mut rng));
        let real = rand_t(&[1, 2, 4], &mut rng);
        let padded = Tensor::cat(&[&real, &rand_t(&[1, 3, 4], &mut rng)], 1).unwrap();
        let mask = Tensor::new(&[[0.0f64, 0.0, crate::nn::MASKED, crate::nn::MASKED, crate::nn::MASKED]], &Device::Cpu).unwrap();
        let a = paired_cross_attention(&s, &x, &t, Some(&PairedContext::new(real)), 1.0).unwrap();
        let pc = PairedContext {
            ctx: AttnContext {
                tokens: padded,
                mask: Some(mask),
            },
            gate: None,
        };
        let b = paired_cross_attention(&s, &x, &t, Some(&pc), 1.0).unwrap();
        for (u, v) in to_f64_vec(&a).unwrap().iter().zip(to_f64_vec(&b).unwrap()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    type Mat = Vec<Vec<f64>>;

    fn lin(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
        x.iter()
            .map(|r| {
                (0..w.len())
                    .map(|o| b.map_or(0.0, |b| b[o]) + (0..r.len()).map(|i| r[i] * w[o][i]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn attn(q: &Mat, k: &Mat, v: &Mat) -> Mat {
        let d = q[0].len() as f64;
        q.iter()
            .map(|qi| {
                let s: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len())
                    .map(|c| (0..v.len()).map(|j| e[j] / z * v[j][c]).sum())
                    .collect()
            })
            .collect()
    }

    /// Single head, d = 4, two feature tokens, one pair of k = 2 pooled tokens.
    #[test]
    fn matches_loop_oracle_with_hand_set_weights() {
        let m = |rows: &[[f64; 4]]| -> Mat { rows.iter().map(|r| r.to_vec()).collect() };
        let wq = m(&[[0.5, 0.1, 0.0, -0.2], [0.0, 0.3, 0.2, 0.1], [0.4, 0.0, -0.3, 0.0], [0.1, 0.1, 0.1, 0.1]]);
        let wk = m(&[[0.2, -0.1, 0.0, 0.3], [0.1, 0.0, 0.4, 0.0], [-0.3, 0.2, 0.1, 0.0], [0.0, 0.5, 0.0, -0.1]]);
        let wv = m(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]);
        let wo = m(&[[0.3, 0.0, 0.1, 0.0], [0.0, -0.2, 0.0, 0.4], [0.2, 0.2, 0.2, 0.2], [0.0, 0.1, 0.0, -0.5]]);
        let bo = [0.01, -0.02, 0.03, 0.0];
        let pk = m(&[[0.0, 0.2, 0.1, 0.3], [0.4, 0.0, 0.0, -0.2], [0.1, 0.1, -0.1, 0.1], [0.3, -0.3, 0.2, 0.0]]);
        let pv = m(&[[0.5, 0.1, 0.0, 0.0], [0.0, 0.2, 0.3, 0.0], [0.1, 0.0, 0.4, 0.2], [0.0, 0.0, 0.1, 0.6]]);
        let po = m(&[[0.2, 0.1, 0.0, 0.0], [0.0, 0.3, -0.1, 0.0], [0.0, 0.0, 0.4, 0.1], [-0.2, 0.0, 0.0, 0.5]]);
        let pbias = [0.05, 0.0, -0.05, 0.1];
        let x = m(&[[1.0, -0.5, 0.25, 0.0], [0.3, 0.8, -1.0, 0.6]]);
        let text = m(&[[0.2, 0.4, -0.6, 0.8], [-0.1, 0.0, 0.5, 0.3], [0.9, -0.2, 0.1, 0.0]]);
        let p = m(&[[0.6, -0.4, 0.2, 0.0], [0.1, 0.7, -0.3, 0.5]]);

        let dev = Device::Cpu;
        let t = |v: &Mat| Tensor::new(v.clone(), &dev).unwrap();
        let mut map = HashMap::new();
        for (name, v) in [
            ("s.attn.q.weight", &wq),
            ("s.attn.k.weight", &wk),
            ("s.attn.v.weight", &wv),
            ("s.attn.out.weight", &wo),
            ("s.paired.k.weight", &pk),
            ("s.paired.v.weight", &pv),
            ("s.paired.out.weight", &po),
        ] {
            map.insert(name.to_string(), t(v));
        }
        map.insert("s.attn.out.bias".into(), Tensor::new(&bo, &dev).unwrap());
        map.insert("s.paired.out.bias".into(), Tensor::new(&pbias, &dev).unwrap());
        map.insert("s.norm.scale".into(), Tensor::ones(4, DType::F64, &dev).unwrap());
        map.insert("s.norm.shift".into(), Tensor::zeros(4, DType::F64, &dev).unwrap());
        let pb = ParamBuilder::from_tensors(map, DType::F64, &dev);
        let s = CrossAttentionSite::new(&pb.pp("s"), 4, 4, Some(4), 1).unwrap();

        let alpha = 0.7;
        let got = paired_cross_attention(
            &s,
            &t(&x).unsqueeze(0).unwrap(),
            &AttnContext::new(t(&text).unsqueeze(0).unwrap()),
            Some(&PairedContext::new(t(&p).unsqueeze(0).unwrap())),
            alpha,
        )
        .unwrap()
        .squeeze(0)
        .unwrap()
        .to_vec2::<f64>()
        .unwrap();

        let q = lin(&x, &wq, None);
        let host = lin(&attn(&q, &lin(&text, &wk, None), &lin(&text, &wv, None)), &wo, Some(&bo));
        let extra = lin(&attn(&q, &lin(&p, &pk, None), &lin(&p, &pv, None)), &po, Some(&pbias));
        for i in 0..2 {
            for c in 0..4 {
                let want = host[i][c] + alpha * extra[i][c];
                assert!((got[i][c] - want).abs() < 1e-6);
            }
        }
    }
}
