//! Supervised contrastive loss, the optional classification head, and
//! backpropagation through the descriptor head.
//!
//! For anchors `i` with positives `P(i)` (same label, excluding `i`) the
//! contrastive term is
//!
//! ```text
//! L = mean_i  -1/|P(i)| * sum_{p in P(i)} log( exp(z_i.z_p/tau) / sum_{j != i} exp(z_i.z_j/tau) )
//! ```
//!
//! All gradients are closed form.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{EmbedCache, HeadParams};
use crate::linalg::{axpy, dot, norm, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("anchor {0} has no positive in the batch")]
    NoPositive(usize),
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// `N` embeddings (rows) with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    embeddings: Matrix,
    labels: Vec<usize>,
}

impl Batch {
    /// Checks `N >= 2`, matching label count, and unit-norm rows.
    pub fn new(embeddings: Matrix, labels: Vec<usize>) -> Result<Self, ObjectiveError> {
        let batch = Self::from_raw(embeddings, labels)?;
        for i in 0..batch.len() {
            let n = norm(batch.embeddings.row(i));
            if (n - 1.0).abs() > 1e-9 {
                return Err(ObjectiveError::InvalidBatch(format!(
                    "embedding {i} has norm {n}"
                )));
            }
        }
        Ok(batch)
    }

    /// Like [`Batch::new`] without the unit-norm check, so losses can be
    /// probed off the sphere (finite differences).
    pub fn from_raw(embeddings: Matrix, labels: Vec<usize>) -> Result<Self, ObjectiveError> {
        if embeddings.rows() < 2 {
            return Err(ObjectiveError::InvalidBatch(format!(
                "need at least 2 embeddings, got {}",
                embeddings.rows()
            )));
        }
        if labels.len() != embeddings.rows() {
            return Err(ObjectiveError::DimensionMismatch {
                expected: embeddings.rows(),
                found: labels.len(),
            });
        }
        if !embeddings.is_finite() {
            return Err(ObjectiveError::InvalidBatch("non-finite embedding".to_string()));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self, ObjectiveError> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(ObjectiveError::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        Self::new(Matrix::from_vec(rows.len(), d, rows.concat()), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    /// Weight of the contrastive term.
    pub lambda_cr: f64,
    /// Weight of the classification term; 0 disables the classifier.
    pub lambda_ce: f64,
    /// Literal variant: include `j = i` in the softmax denominator.
    pub denominator_includes_self: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda_cr: 1.0,
            lambda_ce: 0.0,
            denominator_includes_self: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ObjectiveError::BadTemperature(self.tau));
        }
        let weights_ok = [self.lambda_cr, self.lambda_ce]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if !weights_ok {
            return Err(ObjectiveError::InvalidConfig(format!(
                "loss weights must be finite and >= 0, got cr={} ce={}",
                self.lambda_cr, self.lambda_ce
            )));
        }
        if self.lambda_cr + self.lambda_ce <= 0.0 {
            return Err(ObjectiveError::InvalidConfig(
                "lambda_cr + lambda_ce must be positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn uses_classifier(&self) -> bool {
        self.lambda_ce > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// `N x D` gradient with respect to the embeddings.
    pub grad: Matrix,
}

fn positive_sets(labels: &[usize]) -> Result<Vec<Vec<usize>>, ObjectiveError> {
    let mut by_label: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let pos: Vec<usize> = by_label[l].iter().copied().filter(|&j| j != i).collect();
            if pos.is_empty() {
                Err(ObjectiveError::NoPositive(i))
            } else {
                Ok(pos)
            }
        })
        .collect()
}

/// Supervised contrastive loss with the self term excluded from the
/// denominator.
pub fn supcon_loss(batch: &Batch, tau: f64) -> Result<LossValue, ObjectiveError> {
    supcon_loss_variant(batch, tau, false)
}

pub fn supcon_loss_variant(
    batch: &Batch,
    tau: f64,
    denominator_includes_self: bool,
) -> Result<LossValue, ObjectiveError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(ObjectiveError::BadTemperature(tau));
    }
    let positives = positive_sets(&batch.labels)?;
    let z = &batch.embeddings;
    let n = batch.len();

    // coefficient matrix G with dL/ds_ij = G_ij, s_ij = z_i.z_j / tau
    let mut coef = Matrix::zeros(n, n);
    let mut total = 0.0;
    for i in 0..n {
        let in_denominator = |j: usize| denominator_includes_self || j != i;
        let sims: Vec<f64> = (0..n).map(|j| dot(z.row(i), z.row(j)) / tau).collect();
        let shift = (0..n)
            .filter(|&j| in_denominator(j))
            .map(|j| sims[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..n)
            .map(|j| if in_denominator(j) { (sims[j] - shift).exp() } else { 0.0 })
            .collect();
        let denom: f64 = exps.iter().sum();
        let lse = shift + denom.ln();

        let pos = &positives[i];
        let inv_p = 1.0 / pos.len() as f64;
        total += inv_p * pos.iter().map(|&p| lse - sims[p]).sum::<f64>();

        let row = coef.row_mut(i);
        for j in 0..n {
            row[j] = exps[j] / denom;
        }
        for &p in pos {
            row[p] -= inv_p;
        }
    }
    let inv_n = 1.0 / n as f64;
    // dL/dz_i = sum_j (G_ij + G_ji) z_j / (N tau)
    let mut grad = Matrix::zeros(n, batch.dim());
    for i in 0..n {
        let gi = grad.row_mut(i);
        for j in 0..n {
            let c = coef.get(i, j) + coef.get(j, i);
            if c != 0.0 {
                axpy(c * inv_n / tau, z.row(j), gi);
            }
        }
    }
    Ok(LossValue {
        loss: total * inv_n,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropyValue {
    pub loss: f64,
    pub grad_embeddings: Matrix,
    /// `K x D`.
    pub grad_classifier: Matrix,
}

/// Mean softmax cross-entropy of `classifier * z_i` against each label.
pub fn cross_entropy(batch: &Batch, classifier: &Matrix) -> Result<CrossEntropyValue, ObjectiveError> {
    let (k, d) = classifier.shape();
    if d != batch.dim() {
        return Err(ObjectiveError::DimensionMismatch {
            expected: batch.dim(),
            found: d,
        });
    }
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= k) {
        return Err(ObjectiveError::LabelOutOfRange { label, classes: k });
    }
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad_z = Matrix::zeros(n, d);
    let mut grad_w = Matrix::zeros(k, d);
    for i in 0..n {
        let z = batch.embeddings.row(i);
        let logits = classifier.matvec(z);
        let shift = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - shift).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let label = batch.labels[i];
        loss += shift + denom.ln() - logits[label];

        let mut dlogits: Vec<f64> = exps.iter().map(|e| e / denom * inv_n).collect();
        dlogits[label] -= inv_n;
        grad_z.row_mut(i).copy_from_slice(&classifier.matvec_t(&dlogits));
        grad_w.add_outer(1.0, &dlogits, z);
    }
    Ok(CrossEntropyValue {
        loss: loss * inv_n,
        grad_embeddings: grad_z,
        grad_classifier: grad_w,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub loss: f64,
    pub supcon: f64,
    pub cross_entropy: Option<f64>,
    pub grad_embeddings: Matrix,
    pub grad_classifier: Option<Matrix>,
}

/// `lambda_cr * supcon + lambda_ce * cross_entropy`. A classifier must be
/// supplied exactly when `lambda_ce > 0`.
pub fn combined_loss(
    batch: &Batch,
    config: &LossConfig,
    classifier: Option<&Matrix>,
) -> Result<CombinedLoss, ObjectiveError> {
    config.validate()?;
    if config.uses_classifier() != classifier.is_some() {
        return Err(ObjectiveError::InvalidConfig(format!(
            "lambda_ce = {} but classifier {}",
            config.lambda_ce,
            if classifier.is_some() { "given" } else { "missing" }
        )));
    }
    let sc = supcon_loss_variant(batch, config.tau, config.denominator_includes_self)?;
    let mut grad = sc.grad;
    grad.as_mut_slice().iter_mut().for_each(|g| *g *= config.lambda_cr);
    let mut loss = config.lambda_cr * sc.loss;
    let (ce_loss, grad_classifier) = match classifier {
        Some(w) => {
            let ce = cross_entropy(batch, w)?;
            loss += config.lambda_ce * ce.loss;
            axpy(config.lambda_ce, ce.grad_embeddings.as_slice(), grad.as_mut_slice());
            let mut gw = ce.grad_classifier;
            gw.as_mut_slice().iter_mut().for_each(|g| *g *= config.lambda_ce);
            (Some(ce.loss), Some(gw))
        }
        None => (None, None),
    };
    Ok(CombinedLoss {
        loss,
        supcon: sc.loss,
        cross_entropy: ce_loss,
        grad_embeddings: grad,
        grad_classifier,
    })
}

/// Gradients of the head parameters, laid out like [`HeadParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w_a: Matrix,
    pub b_a: Vec<f64>,
    pub w_b: Matrix,
    pub b_b: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros_like(params: &HeadParams) -> Self {
        let (d, c) = params.w_a.shape();
        Self {
            w_a: Matrix::zeros(d, c),
            b_a: vec![0.0; d],
            w_b: Matrix::zeros(d, c),
            b_b: vec![0.0; d],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [self.w_a.as_slice(), &self.b_a, self.w_b.as_slice(), &self.b_b]
    }
}

/// `(I - u u^T) g / n` where `u = x/n`: backprop through `x -> x/|x|`.
fn normalize_backward(unit: &[f64], n: f64, g: &[f64]) -> Vec<f64> {
    let proj = dot(unit, g);
    unit.iter().zip(g).map(|(u, gi)| (gi - proj * u) / n).collect()
}

fn branch_backward(
    cache: &crate::descriptor::BranchCache,
    grad_out: &[f64],
    cgd_order: bool,
    grad_w: &mut Matrix,
    grad_b: &mut [f64],
) {
    let grad_fc = if cgd_order {
        normalize_backward(&cache.out, cache.fc_out_norm, grad_out)
    } else {
        grad_out.to_vec()
    };
    grad_w.add_outer(1.0, &grad_fc, &cache.fc_in);
    axpy(1.0, &grad_fc, grad_b);
}

/// Accumulates parameter gradients over a batch, given the loss gradient for
/// each embedding and the matching forward caches.
pub fn backprop_head(
    grad_embeddings: &Matrix,
    caches: &[EmbedCache],
    params: &HeadParams,
) -> Result<HeadGrads, ObjectiveError> {
    let d = params.branch_dim();
    if grad_embeddings.rows() != caches.len() {
        return Err(ObjectiveError::DimensionMismatch {
            expected: caches.len(),
            found: grad_embeddings.rows(),
        });
    }
    if grad_embeddings.cols() != 2 * d {
        return Err(ObjectiveError::DimensionMismatch {
            expected: 2 * d,
            found: grad_embeddings.cols(),
        });
    }
    let mut grads = HeadGrads::zeros_like(params);
    for (i, cache) in caches.iter().enumerate() {
        if cache.concat.len() != 2 * d || cache.a.fc_in.len() != params.channels() {
            return Err(ObjectiveError::DimensionMismatch {
                expected: 2 * d,
                found: cache.concat.len(),
            });
        }
        let g_concat = normalize_backward(
            cache.embedding.as_slice(),
            cache.concat_norm,
            grad_embeddings.row(i),
        );
        branch_backward(&cache.a, &g_concat[..d], params.cgd_order, &mut grads.w_a, &mut grads.b_a);
        branch_backward(&cache.b, &g_concat[d..], params.cgd_order, &mut grads.w_b, &mut grads.b_b);
    }
    Ok(grads)
}
