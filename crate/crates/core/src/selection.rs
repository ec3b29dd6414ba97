//! Reliable sample selection: rank candidates by how far the new model's
//! logits have moved from the frozen model's, and keep the top `k`.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscrepancyScore {
    /// Row in the candidate batch.
    pub index: usize,
    /// L1 distance between the two logit rows.
    pub score: f64,
}

/// Per-row L1 distance `Σ_c |z_new[i,c] − z_old[i,c]|`.
pub fn l1_discrepancy(z_new: &Matrix, z_old: &Matrix) -> Result<Vec<DiscrepancyScore>> {
    if z_new.shape() != z_old.shape() {
        return Err(Error::shape(format!(
            "discrepancy between {:?} and {:?} logits",
            z_new.shape(),
            z_old.shape()
        )));
    }
    Ok((0..z_new.rows())
        .map(|i| DiscrepancyScore {
            index: i,
            score: z_new
                .row(i)
                .iter()
                .zip(z_old.row(i))
                .map(|(a, b)| (a - b).abs())
                .sum(),
        })
        .collect())
}

/// Higher score first, then lower index.
fn rank(a: &DiscrepancyScore, b: &DiscrepancyScore) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.index.cmp(&b.index))
}

/// Indices of the `k` highest scores, returned in ascending index order.
///
/// Ties go to the smaller index. Asking for more than are available returns
/// every candidate.
pub fn select_top_k(scores: &[DiscrepancyScore], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::domain("no candidates to select from"));
    }
    if k == 0 {
        return Err(Error::domain("k must be at least 1"));
    }
    if k > scores.len() {
        log::warn!(
            "requested {k} samples from {} candidates; selecting all",
            scores.len()
        );
    }
    let mut ranked = scores.to_vec();
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, rank);
        ranked.truncate(k);
    }
    let mut picked: Vec<usize> = ranked.into_iter().map(|s| s.index).collect();
    picked.sort_unstable();
    Ok(picked)
}
