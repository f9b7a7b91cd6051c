use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed, parameter-free map between `[0, 1]` RGB images and latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentCodec {
    /// Three latent channels, `2x - 1` per pixel.
    Identity,
    /// Four latent channels from a seeded 3 -> 4 map with orthonormal columns.
    FixedLinear { seed: u64 },
}

impl Default for LatentCodec {
    fn default() -> Self {
        LatentCodec::FixedLinear { seed: 0 }
    }
}

impl LatentCodec {
    pub fn latent_channels(&self) -> usize {
        match self {
            LatentCodec::Identity => 3,
            LatentCodec::FixedLinear { .. } => 4,
        }
    }

    /// `4 x 3` matrix with orthonormal columns (Gram-Schmidt on a seeded Gaussian draw).
    pub fn mixing_matrix(seed: u64) -> [[f64; 3]; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols: Vec<[f64; 4]> = Vec::new();
        while cols.len() < 3 {
            let mut v = [0.0; 4];
            for x in &mut v {
                *x = StandardNormal.sample(&mut rng);
            }
            for c in &cols {
                let dot: f64 = (0..4).map(|i| v[i] * c[i]).sum();
                for i in 0..4 {
                    v[i] -= dot * c[i];
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cols.push(v.map(|x| x / norm));
            }
        }
        let mut m = [[0.0; 3]; 4];
        for (j, c) in cols.iter().enumerate() {
            for i in 0..4 {
                m[i][j] = c[i];
            }
        }
        m
    }

    /// `(B, 3, H, W)` images in `[0, 1]` to `(B, C, H, W)` latents.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = images.dims4()?;
        if c != 3 {
            return Err(Error::shape("codec input channels", 3, c));
        }
        let centered = images.affine(2.0, -1.0)?;
        match self {
            LatentCodec::Identity => Ok(centered),
            LatentCodec::FixedLinear { seed } => mix(&centered, &Self::mixing_matrix(*seed), false),
        }
    }

    /// Latents back to `(B, 3, H, W)` images clamped to `[0, 1]`.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = latents.dims4()?;
        if c != self.latent_channels() {
            return Err(Error::shape("codec latent channels", self.latent_channels(), c));
        }
        let rgb = match self {
            LatentCodec::Identity => latents.clone(),
            LatentCodec::FixedLinear { seed } => mix(latents, &Self::mixing_matrix(*seed), true)?,
        };
        Ok(((rgb + 1.0)? * 0.5)?.clamp(0.0, 1.0)?)
    }
}

/// Channel mixing with `m` (`transpose` applies `m^T`).
fn mix(x: &Tensor, m: &[[f64; 3]; 4], transpose: bool) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (rows, cols) = if transpose { (3, 4) } else { (4, 3) };
    let mut flat = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for k in 0..cols {
            flat.push(if transpose { m[k][r] } else { m[r][k] });
        }
    }
    let mat = Tensor::from_vec(flat, (rows, cols), x.device())?.to_dtype(x.dtype())?;
    let y = mat.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
    Ok(y.reshape((b, rows, h, w))?)
}
