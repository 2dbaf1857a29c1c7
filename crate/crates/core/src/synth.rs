//! Seeded random instances.
//!
//! Every consumer derives its own stream from one 64-bit seed: the first
//! eight bytes (little-endian) of `SHA-256(seed_le || purpose)` seed a
//! ChaCha8 generator. Streams for different purposes never overlap, and
//! adding a new purpose does not perturb existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::toyblock::{BlockKind, BlockModel};

pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose))
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Gaussian weights scaled by `1 / sqrt(fan_in)`. `m` is only used by the
/// linear kind; MLP hidden width is `4d` and the other kinds map `d → d`.
pub fn random_model(kind: BlockKind, d: usize, m: usize, seed: u64) -> Result<BlockModel> {
    if d == 0 || m == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    let mut rng = rng_for(seed, "model");
    let mut layer = |rows: usize, cols: usize| {
        standard_normal(rows, cols, &mut rng).scale(1.0 / (cols as f64).sqrt())
    };
    match kind {
        BlockKind::Linear => BlockModel::linear(layer(m, d)),
        BlockKind::Mlp => {
            let up = layer(4 * d, d);
            let down = layer(d, 4 * d);
            BlockModel::mlp(up, down)
        }
        BlockKind::Attention => {
            let q = layer(d, d);
            let k = layer(d, d);
            let v = layer(d, d);
            let o = layer(d, d);
            BlockModel::attention(q, k, v, o)
        }
    }
}

/// Standard-normal `d × T` calibration activations.
pub fn calibration(d: usize, tokens: usize, seed: u64) -> Matrix {
    standard_normal(d, tokens, &mut rng_for(seed, "calibration"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outlier {
    Token { index: usize, scale: f64 },
    Channel { index: usize, scale: f64 },
}

impl std::str::FromStr for Outlier {
    type Err = Error;

    /// `token:INDEX:SCALE` or `channel:INDEX:SCALE`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad outlier spec '{s}'"));
        let mut parts = s.split(':');
        let (Some(kind), Some(index), Some(scale), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let index: usize = index.parse().map_err(|_| bad())?;
        let scale: f64 = scale.parse().map_err(|_| bad())?;
        if !scale.is_finite() {
            return Err(bad());
        }
        match kind {
            "token" => Ok(Outlier::Token { index, scale }),
            "channel" => Ok(Outlier::Channel { index, scale }),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for Outlier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outlier::Token { index, scale } => write!(f, "token:{index}:{scale}"),
            Outlier::Channel { index, scale } => write!(f, "channel:{index}:{scale}"),
        }
    }
}

/// Scales one token column or one channel row in place.
pub fn inject_outlier(x: &mut Matrix, outlier: Outlier) -> Result<()> {
    match outlier {
        Outlier::Token { index, scale } => {
            if index >= x.cols() {
                return Err(Error::InvalidArgument(format!(
                    "token {index} out of range"
                )));
            }
            let col: Vec<f64> = x.column(index).iter().map(|v| v * scale).collect();
            x.set_column(index, &col);
        }
        Outlier::Channel { index, scale } => {
            if index >= x.rows() {
                return Err(Error::InvalidArgument(format!(
                    "channel {index} out of range"
                )));
            }
            for v in x.row_mut(index) {
                *v *= scale;
            }
        }
    }
    Ok(())
}
