//! Cosine similarity and the NT-Xent contrastive loss.
//!
//! The differentiable loss lives on the tape ([`Tape::nt_xent`]); this module
//! holds the pure similarity matrix, the batch wrapper, and the naive
//! double-loop reference evaluation used as the testing oracle.

use crate::tensorgrad::{
    cosine_similarity_from_norms, row_norms, Element, Result, Tape, TensorError, TensorId,
};

/// A batch of paired projections: rows `2k` and `2k+1` are the two views of
/// source image `k`.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub z: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(z: Vec<f64>, rows: usize, dim: usize, temperature: f64) -> Result<Self> {
        if rows < 2 || !rows.is_multiple_of(2) {
            return Err(TensorError::BadContrastiveBatch { rows });
        }
        if z.len() != rows * dim {
            return Err(TensorError::DataLength { shape: vec![rows, dim], len: z.len() });
        }
        if temperature <= 0.0 {
            return Err(TensorError::InvalidTemperature { tau: temperature });
        }
        Ok(ContrastiveBatch { z, rows, dim, temperature })
    }
}

/// Pairwise cosine similarity of the rows of `z`. Symmetric with an exact
/// unit diagonal; zero-norm rows are a contract error.
pub fn similarity_matrix(z: &[f64], rows: usize, dim: usize) -> Result<Vec<f64>> {
    let norms = row_norms(z, rows, dim)?;
    let mut sim = cosine_similarity_from_norms(z, &norms, rows, dim);
    for i in 0..rows {
        sim[i * rows + i] = 1.0;
    }
    Ok(sim)
}

/// Differentiable NT-Xent on a tape tensor. Thin wrapper so callers reach the
/// loss through this module.
pub fn nt_xent<T: Element>(tape: &mut Tape<T>, z: TensorId, temperature: f64) -> Result<TensorId> {
    tape.nt_xent(z, temperature)
}

/// Naive double-loop evaluation of the per-pair loss terms, mean over all
/// ordered positive pairs. No autodiff, no log-sum-exp trick; exists solely
/// as the oracle the fast path is tested against.
pub fn nt_xent_reference(batch: &ContrastiveBatch) -> Result<f64> {
    let (rows, d, tau) = (batch.rows, batch.dim, batch.temperature);
    let norms = row_norms(&batch.z, rows, d)?;
    let sim = cosine_similarity_from_norms(&batch.z, &norms, rows, d);
    let mut total = 0.0;
    for i in 0..rows {
        let partner = i ^ 1;
        let mut denom = 0.0;
        for k in 0..rows {
            if k != i {
                denom += (sim[i * rows + k] / tau).exp();
            }
        }
        let numer = (sim[i * rows + partner] / tau).exp();
        total += -(numer / denom).ln();
    }
    Ok(total / rows as f64)
}

/// Count of negative terms each anchor faces in its denominator.
pub fn negatives_per_anchor(rows: usize) -> usize {
    // denominator has 2N-1 terms: the positive plus 2(N-1) negatives
    rows - 2
}
