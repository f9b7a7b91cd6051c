//! Parameter storage and the small set of differentiable layers shared by the
//! adapter and the toy denoiser.
//!
//! Every layer is composed from primitive tensor ops so that reverse-mode
//! gradients exist for all of them, in both `f32` and `f64`.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which part of the system a parameter belongs to.
///
/// Only the adapter groups are trainable; the base denoiser and the modality
/// encoders are frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    Encoder,
    Projector,
    PairFormer,
    PairedAttention,
}

impl ParamGroup {
    pub fn is_trainable(self) -> bool {
        matches!(
            self,
            ParamGroup::Projector | ParamGroup::PairFormer | ParamGroup::PairedAttention
        )
    }

    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Base,
        ParamGroup::Encoder,
        ParamGroup::Projector,
        ParamGroup::PairFormer,
        ParamGroup::PairedAttention,
    ];
}

#[derive(Debug, Clone)]
struct Entry {
    tensor: Tensor,
    var: Option<Var>,
    group: ParamGroup,
}

/// Flat, name-ordered map of every parameter of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        self.entries.get(name).map(|e| e.group)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).and_then(|e| e.var.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParamGroup)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.tensor, e.group))
    }

    /// Trainable variables, in name order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries.values().filter_map(|e| e.var.clone()).collect()
    }

    /// Named trainable variables belonging to `group`.
    pub fn vars_in(&self, group: ParamGroup) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.group == group)
            .filter_map(|(k, e)| e.var.clone().map(|v| (k.clone(), v)))
            .collect()
    }

    /// Overwrites a trainable parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::invalid("param", format!("unknown parameter {name}")))?;
        match &entry.var {
            Some(var) => {
                var.set(&value.to_dtype(var.dtype())?)?;
                Ok(())
            }
            None => Err(Error::invalid(
                "param",
                format!("{name} is frozen and cannot be overwritten"),
            )),
        }
    }

    /// SHA-256 over the names and raw little-endian bytes of every parameter in `group`.
    pub fn checksum(&self, group: ParamGroup) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, entry) in self.entries.iter().filter(|(_, e)| e.group == group) {
            hasher.update(name.as_bytes());
            hash_tensor(&mut hasher, &entry.tensor)?;
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn parameter_count(&self, group: ParamGroup) -> usize {
        self.entries
            .values()
            .filter(|e| e.group == group)
            .map(|e| e.tensor.elem_count())
            .sum()
    }
}

pub(crate) fn hash_tensor(hasher: &mut Sha256, t: &Tensor) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F64 => {
            for v in flat.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        _ => {
            for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    Ok(())
}

/// Initializer for a freshly created parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// Uniform in `[-bound, bound]`.
    Uniform { bound: f64 },
}

impl Init {
    /// Fan-in scaled uniform initializer, as used for linear and conv weights.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }
}

enum Source {
    Seeded(u64),
    Loaded(HashMap<String, Tensor>),
}

struct BuilderState {
    store: ParamStore,
    source: Source,
}

/// Hierarchical parameter factory.
///
/// Seeded parameters draw from an RNG keyed by `(seed, full name)`, so a
/// parameter's initial value never depends on which other parameters were
/// created before it. Two models that share a base denoiser configuration
/// therefore share bit-identical base weights.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Arc<Mutex<BuilderState>>,
    prefix: Vec<String>,
    group: ParamGroup,
    dtype: DType,
    device: Device,
}

impl ParamBuilder {
    pub fn seeded(seed: u64, dtype: DType, device: &Device) -> Self {
        Self::with_source(Source::Seeded(seed), dtype, device)
    }

    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        Self::with_source(Source::Loaded(tensors), dtype, device)
    }

    fn with_source(source: Source, dtype: DType, device: &Device) -> Self {
        Self {
            state: Arc::new(Mutex::new(BuilderState {
                store: ParamStore::default(),
                source,
            })),
            prefix: Vec::new(),
            group: ParamGroup::Base,
            dtype,
            device: device.clone(),
        }
    }

    pub fn pp(&self, name: impl ToString) -> Self {
        let mut next = self.clone();
        next.prefix.push(name.to_string());
        next
    }

    pub fn group(&self, group: ParamGroup) -> Self {
        let mut next = self.clone();
        next.group = group;
        next
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    /// Creates (or loads) a parameter of the given shape.
    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut state = self.state.lock().expect("param builder poisoned");
        if state.store.entries.contains_key(&full) {
            return Err(Error::invalid("param", format!("duplicate parameter {full}")));
        }
        let tensor = match &state.source {
            Source::Seeded(seed) => {
                let count: usize = shape.iter().product();
                let values = sample_init(init, count, *seed, &full);
                Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?
            }
            Source::Loaded(map) => {
                let t = map
                    .get(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {full} has shape {:?}, expected {:?}",
                        t.dims(),
                        shape
                    )));
                }
                t.to_dtype(self.dtype)?.to_device(&self.device)?.copy()?
            }
        };
        let (tensor, var) = if self.group.is_trainable() {
            let var = Var::from_tensor(&tensor)?;
            (var.as_tensor().clone(), Some(var))
        } else {
            (tensor.detach(), None)
        };
        state.store.entries.insert(
            full,
            Entry {
                tensor: tensor.clone(),
                var,
                group: self.group,
            },
        );
        Ok(tensor)
    }

    /// Snapshot of every parameter created so far through any clone of this builder.
    pub fn store(&self) -> ParamStore {
        self.state.lock().expect("param builder poisoned").store.clone()
    }
}

fn sample_init(init: Init, count: usize, seed: u64, name: &str) -> Vec<f64> {
    let mut h = fnv::FnvHasher::default();
    h.write(name.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h.finish());
    match init {
        Init::Zeros => vec![0.0; count],
        Init::Ones => vec![1.0; count],
        Init::Normal { std } => (0..count)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect(),
        Init::Uniform { bound } => {
            let dist = rand_distr::Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..count).map(|_| dist.sample(&mut rng)).collect()
        }
    }
}

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(pb, in_dim, out_dim, bias, Init::fan_in(in_dim))
    }

    pub fn with_init(
        pb: &ParamBuilder,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = pb.get(&[out_dim, in_dim], "weight", init)?;
        let bias = if bias {
            let b_init = match init {
                Init::Zeros => Init::Zeros,
                _ => Init::fan_in(in_dim),
            };
            Some(pb.get(&[out_dim], "bias", b_init)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Normalizes over the last axis, then applies a learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    scale: Tensor,
    shift: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            scale: pb.get(&[dim], "scale", Init::Ones)?,
            shift: pb.get(&[dim], "shift", Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = normalize_last(x, self.eps)?;
        Ok(normed.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?)
    }
}

/// Zero-mean, unit-variance normalization over the last axis (biased variance).
pub fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let denom = (var + eps)?.sqrt()?;
    Ok(centered.broadcast_div(&denom)?)
}

/// Group normalization over `(B, C, H, W)` feature maps.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    scale: Tensor,
    shift: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(pb: &ParamBuilder, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid(
                "groups",
                format!("{channels} channels not divisible into {groups} groups"),
            ));
        }
        Ok(Self {
            scale: pb.get(&[1, channels, 1, 1], "scale", Init::Ones)?,
            shift: pb.get(&[1, channels, 1, 1], "shift", Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let grouped = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let normed = normalize_last(&grouped, self.eps)?.reshape((b, c, h, w))?;
        Ok(normed.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?)
    }
}

/// 2-D convolution with "same" padding for odd kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv2d {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        Ok(Self {
            weight: pb.get(&[c_out, c_in, kernel, kernel], "weight", Init::fan_in(fan_in))?,
            bias: pb.get(&[1, c_out, 1, 1], "bias", Init::fan_in(fan_in))?,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Softmax over the last axis. The row maximum is subtracted as a constant.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Additive mask value for excluded keys; `exp` of it underflows to exactly zero.
pub const MASKED: f64 = -1e9;

/// Scaled dot-product attention with `heads` heads.
///
/// Shapes: `q` is `(B, Lq, inner)`, `k` and `v` are `(B, Lk, inner)`, the
/// optional additive `mask` is `(B, Lk)`. Returns `(B, Lq, inner)`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, lq, inner) = q.dims3()?;
    let (_, lk, _) = k.dims3()?;
    if heads == 0 || inner % heads != 0 {
        return Err(Error::invalid(
            "heads",
            format!("inner width {inner} not divisible by {heads} heads"),
        ));
    }
    let dh = inner / heads;
    let split = |t: &Tensor, l: usize| -> Result<Tensor> {
        Ok(t.reshape((b, l, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let qh = split(q, lq)?;
    let kh = split(k, lk)?;
    let vh = split(v, lk)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = (qh.matmul(&kh.t()?.contiguous()?)? * scale)?;
    if let Some(mask) = mask {
        let m = mask.reshape((b, 1, 1, lk))?.to_dtype(scores.dtype())?;
        scores = scores.broadcast_add(&m)?;
    }
    let attn = softmax_last(&scores)?;
    let out = attn.matmul(&vh)?;
    Ok(out.transpose(1, 2)?.contiguous()?.reshape((b, lq, inner))?)
}

/// Host-side helper: builds a tensor from `f64` values in the requested dtype.
pub fn tensor_from_f64(values: Vec<f64>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Flattens any tensor to host `f64` values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
