use super::TokenSequence;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamBuilder, ParamGroup};

pub const PROJECTOR_EPS: f64 = 1e-5;

/// Trainable linear map into the adapter width followed by layer normalization.
#[derive(Debug, Clone)]
pub struct Projector {
    linear: Linear,
    norm: LayerNorm,
}

impl Projector {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let pb = pb.group(ParamGroup::Projector);
        Ok(Self {
            linear: Linear::new(&pb, in_dim, out_dim, true)?,
            norm: LayerNorm::new(&pb.pp("norm"), out_dim, PROJECTOR_EPS)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.linear.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn project(&self, tokens: &TokenSequence) -> Result<TokenSequence> {
        if tokens.dim() != self.in_dim() {
            return Err(Error::shape("projector input width", self.in_dim(), tokens.dim()));
        }
        let y = self.norm.forward(&self.linear.forward(tokens.tokens())?)?;
        TokenSequence::new(y, tokens.modality())
    }
}
