//! Rotary positional encoding over 3D points.
//!
//! A feature vector of even dimension `d` (with `d % 6 == 0`) is split into
//! `d/2` consecutive pairs. Pair `j` (0-based) belongs to frequency block
//! `k = j/3 + 1` and is rotated in its own plane by angle `c·θ_k`, where `c`
//! cycles through the x, y, z coordinates of the point as `j % 3` and
//!
//! ```text
//! θ_k = 10000^(−6(k−1)/d),   k = 1 … d/6.
//! ```
//!
//! Writing the whole map as a block-diagonal rotation matrix `M(p)`, the
//! payoff is the relative identity
//!
//! ```text
//! (M(p_i) x_i) · (M(p_j) x_j) = x_i · M(p_j − p_i) x_j,
//! ```
//!
//! so dot products between encoded vectors depend only on the offset between
//! the two points, never on their absolute coordinates.

use crate::geom::Vec3;
use crate::scalar::Scalar;
use std::marker::PhantomData;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RotaryError {
    #[error("encoding dimension must be a positive multiple of 6, got {0}")]
    BadDim(usize),
    #[error("frequency base must be finite and > 1, got {0}")]
    BadBase(f64),
    #[error("block index {k} outside 1..={max}")]
    BlockOutOfRange { k: usize, max: usize },
    #[error("feature length {got} does not match encoding dimension {want}")]
    LengthMismatch { got: usize, want: usize },
}

/// Default frequency base: θ_k = base^(−6(k−1)/d).
pub const DEFAULT_BASE: f64 = 10000.0;

#[derive(Debug, Clone)]
pub struct Rotary3d<F> {
    dim: usize,
    /// θ_k for k = 1 … d/6, precomputed once.
    thetas: Vec<F>,
    _marker: PhantomData<F>,
}

impl<F: Scalar> Rotary3d<F> {
    pub fn new(dim: usize) -> Result<Self, RotaryError> {
        Self::with_base(dim, DEFAULT_BASE)
    }

    pub fn with_base(dim: usize, base: f64) -> Result<Self, RotaryError> {
        if dim == 0 || dim % 6 != 0 {
            return Err(RotaryError::BadDim(dim));
        }
        if !base.is_finite() || base <= 1.0 {
            return Err(RotaryError::BadBase(base));
        }
        let thetas = (1..=dim / 6)
            .map(|k| {
                let exponent = -6.0 * (k as f64 - 1.0) / dim as f64;
                F::from_f64(base.powf(exponent))
            })
            .collect();
        Ok(Self { dim, thetas, _marker: PhantomData })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_blocks(&self) -> usize {
        self.dim / 6
    }

    /// θ_k for 1-based block index `k`.
    pub fn theta(&self, k: usize) -> Result<F, RotaryError> {
        if k == 0 || k > self.thetas.len() {
            return Err(RotaryError::BlockOutOfRange { k, max: self.thetas.len() });
        }
        Ok(self.thetas[k - 1])
    }

    /// Per-pair rotation angles for point `p`: a vector of length `d/2` where
    /// entry `j` is the angle applied to feature pair `(2j, 2j+1)`.
    pub fn pair_angles(&self, p: Vec3<F>) -> Vec<F> {
        let mut angles = Vec::with_capacity(self.dim / 2);
        for t in &self.thetas {
            angles.push(p.x * *t);
            angles.push(p.y * *t);
            angles.push(p.z * *t);
        }
        angles
    }

    /// Cosines and sines of [`Self::pair_angles`], the form consumed by the
    /// attention kernels.
    pub fn pair_cos_sin(&self, p: Vec3<F>) -> (Vec<F>, Vec<F>) {
        let angles = self.pair_angles(p);
        let mut cos = Vec::with_capacity(angles.len());
        let mut sin = Vec::with_capacity(angles.len());
        for a in angles {
            let (s, c) = a.sin_cos();
            cos.push(c);
            sin.push(s);
        }
        (cos, sin)
    }

    /// Apply the encoding: rotate each feature pair of `x` by its angle.
    pub fn encode(&self, p: Vec3<F>, x: &[F]) -> Result<Vec<F>, RotaryError> {
        if x.len() != self.dim {
            return Err(RotaryError::LengthMismatch { got: x.len(), want: self.dim });
        }
        let (cos, sin) = self.pair_cos_sin(p);
        let mut out = vec![F::zero(); self.dim];
        for j in 0..self.dim / 2 {
            let (a, b) = (x[2 * j], x[2 * j + 1]);
            out[2 * j] = a * cos[j] - b * sin[j];
            out[2 * j + 1] = a * sin[j] + b * cos[j];
        }
        Ok(out)
    }

    /// Dot product between the encodings of `(p_i, x_i)` and `(p_j, x_j)`,
    /// computed directly from the relative offset `p_j − p_i`.
    pub fn relative_dot(
        &self,
        p_i: Vec3<F>,
        x_i: &[F],
        p_j: Vec3<F>,
        x_j: &[F],
    ) -> Result<F, RotaryError> {
        let rotated = self.encode(p_j - p_i, x_j)?;
        if x_i.len() != self.dim {
            return Err(RotaryError::LengthMismatch { got: x_i.len(), want: self.dim });
        }
        let mut acc = F::zero();
        for (a, b) in x_i.iter().zip(&rotated) {
            acc = acc + *a * *b;
        }
        Ok(acc)
    }

    /// The full `d×d` block-diagonal rotation matrix `M(p)`, row-major. This
    /// is the reference form of the encoding — O(d²) and only used to
    /// cross-check the pairwise kernels in tests.
    pub fn rotation_matrix(&self, p: Vec3<F>) -> Vec<F> {
        let d = self.dim;
        let mut m = vec![F::zero(); d * d];
        let (cos, sin) = self.pair_cos_sin(p);
        for j in 0..d / 2 {
            let (r, c) = (2 * j, 2 * j);
            m[r * d + c] = cos[j];
            m[r * d + c + 1] = -sin[j];
            m[(r + 1) * d + c] = sin[j];
            m[(r + 1) * d + c + 1] = cos[j];
        }
        m
    }
}
