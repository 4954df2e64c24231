//! Dual global descriptor head.
//!
//! Two pooled descriptors of the same feature map (SPoC and MAC by default)
//! are each l2-normalized and projected by a fully connected layer, then
//! concatenated and normalized again to give the embedding. Pooling is the
//! generalized mean
//!
//! ```text
//! f_c = ( mean_{v in V_c} v^p )^(1/p)
//! ```
//!
//! with `p = 1` giving SPoC (average pooling) and `p -> inf` giving MAC,
//! which is computed as an exact max rather than a large-`p` approximation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::FeatureMap;
use crate::linalg::{dot, norm, Matrix};

/// Vectors at or below this norm cannot be normalized.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DescriptorError {
    #[error("negative activation {0} in feature map")]
    NegativeActivation(f64),
    #[error("GeM exponent must be a finite value >= 1, got {0}")]
    BadExponent(f64),
    #[error("cannot normalize a vector of norm {0:e}")]
    ZeroVector(f64),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoolSpec {
    Spoc,
    Mac,
    Gem { p: f64 },
}

impl PoolSpec {
    pub fn validate(&self) -> Result<(), DescriptorError> {
        match *self {
            PoolSpec::Gem { p } if !(p.is_finite() && p >= 1.0) => {
                Err(DescriptorError::BadExponent(p))
            }
            _ => Ok(()),
        }
    }

    pub fn pool(&self, v: &FeatureMap) -> Result<Vec<f64>, DescriptorError> {
        match *self {
            PoolSpec::Spoc => gem_pool(v, 1.0),
            PoolSpec::Mac => Ok(mac_pool(v)),
            PoolSpec::Gem { p } => gem_pool(v, p),
        }
    }
}

/// Generalized-mean pooling per channel.
pub fn gem_pool(v: &FeatureMap, p: f64) -> Result<Vec<f64>, DescriptorError> {
    if !(p.is_finite() && p >= 1.0) {
        return Err(DescriptorError::BadExponent(p));
    }
    if let Some(&neg) = v.values().iter().find(|&&x| x < 0.0) {
        return Err(DescriptorError::NegativeActivation(neg));
    }
    let out = (0..v.channels())
        .map(|c| {
            let xs = v.channel(c);
            let n = xs.len() as f64;
            if p == 1.0 {
                return xs.iter().sum::<f64>() / n;
            }
            // factor out the max so v^p cannot overflow or underflow to zero
            let m = xs.iter().copied().fold(0.0, f64::max);
            if m == 0.0 {
                return 0.0;
            }
            let mean = xs.iter().map(|&x| (x / m).powf(p)).sum::<f64>() / n;
            m * mean.powf(1.0 / p)
        })
        .collect();
    Ok(out)
}

/// Exact per-channel maximum.
pub fn mac_pool(v: &FeatureMap) -> Vec<f64> {
    (0..v.channels())
        .map(|c| v.channel(c).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, DescriptorError> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(DescriptorError::ZeroVector(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// A unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v` into an embedding.
    pub fn normalized(v: &[f64]) -> Result<Self, DescriptorError> {
        l2_normalize(v).map(Embedding)
    }

    /// Wraps a vector that is already unit-norm within 1e-9.
    pub fn from_unit(v: Vec<f64>) -> Result<Self, DescriptorError> {
        let n = norm(&v);
        if (n - 1.0).abs() > 1e-9 || !n.is_finite() {
            return Err(DescriptorError::ZeroVector(n));
        }
        Ok(Embedding(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Pool, normalize, project, concatenate, normalize.
    WithFc,
    /// Drop the projections at inference: pool, normalize, concatenate,
    /// normalize.
    NoFc,
}

/// Trainable head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub branch_a: PoolSpec,
    pub branch_b: PoolSpec,
    /// `d x C` projection of branch a.
    pub w_a: Matrix,
    pub b_a: Vec<f64>,
    pub w_b: Matrix,
    pub b_b: Vec<f64>,
    /// Project before normalizing each branch instead of after.
    pub cgd_order: bool,
}

impl HeadParams {
    /// SPoC + MAC head with Gaussian weights of standard deviation
    /// `1/sqrt(channels)` and zero biases.
    pub fn random<R: Rng + ?Sized>(channels: usize, branch_dim: usize, rng: &mut R) -> Self {
        Self::random_with(PoolSpec::Spoc, PoolSpec::Mac, channels, branch_dim, rng)
    }

    pub fn random_with<R: Rng + ?Sized>(
        branch_a: PoolSpec,
        branch_b: PoolSpec,
        channels: usize,
        branch_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert!(channels > 0 && branch_dim > 0, "head dimensions must be positive");
        let scale = 1.0 / (channels as f64).sqrt();
        let mut gaussian = |n: usize| -> Vec<f64> {
            (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let w_a = Matrix::from_vec(branch_dim, channels, gaussian(branch_dim * channels));
        let w_b = Matrix::from_vec(branch_dim, channels, gaussian(branch_dim * channels));
        Self {
            branch_a,
            branch_b,
            w_a,
            b_a: vec![0.0; branch_dim],
            w_b,
            b_b: vec![0.0; branch_dim],
            cgd_order: false,
        }
    }

    /// Input channel count `C`.
    pub fn channels(&self) -> usize {
        self.w_a.cols()
    }

    /// Per-branch output dimension `d`.
    pub fn branch_dim(&self) -> usize {
        self.w_a.rows()
    }

    pub fn embedding_dim(&self, mode: EmbedMode) -> usize {
        match mode {
            EmbedMode::WithFc => 2 * self.branch_dim(),
            EmbedMode::NoFc => 2 * self.channels(),
        }
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        self.branch_a.validate()?;
        self.branch_b.validate()?;
        let (d, c) = self.w_a.shape();
        for (found, expected) in [
            (self.w_b.rows(), d),
            (self.w_b.cols(), c),
            (self.b_a.len(), d),
            (self.b_b.len(), d),
        ] {
            if found != expected {
                return Err(DescriptorError::DimensionMismatch { expected, found });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w_a.is_finite()
            && self.w_b.is_finite()
            && self.b_a.iter().chain(&self.b_b).all(|v| v.is_finite())
    }

    /// Parameter tensors in a fixed order: `w_a, b_a, w_b, b_b`.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [self.w_a.as_slice(), &self.b_a, self.w_b.as_slice(), &self.b_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_a.as_mut_slice(),
            &mut self.b_a,
            self.w_b.as_mut_slice(),
            &mut self.b_b,
        ]
    }

    /// Same head with the two branches (and their parameters) exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            branch_a: self.branch_b,
            branch_b: self.branch_a,
            w_a: self.w_b.clone(),
            b_a: self.b_b.clone(),
            w_b: self.w_a.clone(),
            b_b: self.b_a.clone(),
            cgd_order: self.cgd_order,
        }
    }
}

/// Forward-pass intermediates of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchCache {
    /// Pooled descriptor `f`.
    pub pooled: Vec<f64>,
    /// Input of the projection: `f/|f|` (default order) or `f` (CGD order).
    pub fc_in: Vec<f64>,
    /// Projection output `W x + b`.
    pub fc_out: Vec<f64>,
    /// Norm of `fc_out`; only used in CGD order.
    pub fc_out_norm: f64,
    /// Branch output placed in the concatenation.
    pub out: Vec<f64>,
}

/// Forward-pass intermediates needed for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedCache {
    pub a: BranchCache,
    pub b: BranchCache,
    /// Concatenation before the final normalization.
    pub concat: Vec<f64>,
    pub concat_norm: f64,
    pub embedding: Embedding,
}

impl EmbedCache {
    /// Re-runs the head from the cached pooled descriptors.
    pub fn replay(&self, params: &HeadParams) -> Result<Embedding, DescriptorError> {
        let a = branch_forward(&self.a.pooled, &params.w_a, &params.b_a, params.cgd_order)?;
        let b = branch_forward(&self.b.pooled, &params.w_b, &params.b_b, params.cgd_order)?;
        finish(a, b).map(|c| c.embedding)
    }
}

fn check_channels(v: &FeatureMap, params: &HeadParams) -> Result<(), DescriptorError> {
    if v.channels() != params.channels() {
        return Err(DescriptorError::DimensionMismatch {
            expected: params.channels(),
            found: v.channels(),
        });
    }
    Ok(())
}

fn branch_forward(
    pooled: &[f64],
    w: &Matrix,
    b: &[f64],
    cgd_order: bool,
) -> Result<BranchCache, DescriptorError> {
    if pooled.len() != w.cols() {
        return Err(DescriptorError::DimensionMismatch {
            expected: w.cols(),
            found: pooled.len(),
        });
    }
    let affine = |x: &[f64]| -> Vec<f64> {
        let mut y = w.matvec(x);
        y.iter_mut().zip(b).for_each(|(yi, bi)| *yi += bi);
        y
    };
    if cgd_order {
        let fc_out = affine(pooled);
        let fc_out_norm = norm(&fc_out);
        let out = l2_normalize(&fc_out)?;
        Ok(BranchCache {
            pooled: pooled.to_vec(),
            fc_in: pooled.to_vec(),
            fc_out,
            fc_out_norm,
            out,
        })
    } else {
        let fc_in = l2_normalize(pooled)?;
        let fc_out = affine(&fc_in);
        Ok(BranchCache {
            pooled: pooled.to_vec(),
            fc_in,
            out: fc_out.clone(),
            fc_out_norm: norm(&fc_out),
            fc_out,
        })
    }
}

/// Concatenates two halves and normalizes. The norm is summed per half so
/// that exchanging the halves exchanges the output halves bit-exactly.
fn concat_normalized(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, f64, Embedding), DescriptorError> {
    let concat: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = (dot(a, a) + dot(b, b)).sqrt();
    if !(n > NORM_EPS) {
        return Err(DescriptorError::ZeroVector(n));
    }
    let unit = concat.iter().map(|x| x / n).collect();
    Ok((concat, n, Embedding(unit)))
}

fn finish(a: BranchCache, b: BranchCache) -> Result<EmbedCache, DescriptorError> {
    let (concat, concat_norm, embedding) = concat_normalized(&a.out, &b.out)?;
    Ok(EmbedCache {
        a,
        b,
        concat,
        concat_norm,
        embedding,
    })
}

/// Full forward pass of the head, keeping intermediates.
pub fn embed_with_cache(v: &FeatureMap, params: &HeadParams) -> Result<EmbedCache, DescriptorError> {
    params.validate()?;
    check_channels(v, params)?;
    let a = branch_forward(&params.branch_a.pool(v)?, &params.w_a, &params.b_a, params.cgd_order)?;
    let b = branch_forward(&params.branch_b.pool(v)?, &params.w_b, &params.b_b, params.cgd_order)?;
    finish(a, b)
}

pub fn embed(v: &FeatureMap, params: &HeadParams, mode: EmbedMode) -> Result<Embedding, DescriptorError> {
    match mode {
        EmbedMode::WithFc => embed_with_cache(v, params).map(|c| c.embedding),
        EmbedMode::NoFc => {
            params.validate()?;
            check_channels(v, params)?;
            let a = l2_normalize(&params.branch_a.pool(v)?)?;
            let b = l2_normalize(&params.branch_b.pool(v)?)?;
            concat_normalized(&a, &b).map(|(_, _, e)| e)
        }
    }
}
