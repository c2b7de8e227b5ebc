use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::argmax_first;
use crate::math;
use crate::rng::ChaCha8Rng;
use crate::tensor::Tensor;

/// Per-step modality statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceStats {
    /// Batch sum of the top softmax probability, per modality.
    pub s: Vec<f64>,
    /// Mean ratio of `s_k` to every other modality's score.
    pub r: Vec<f64>,
    /// Drop probability `tanh(max(r_k - 1, 0))`.
    pub drop_prob: Vec<f64>,
    /// Keep-mask: 0 where the modality is dropped from fusion.
    pub mask: Vec<f64>,
}

impl ConfidenceStats {
    pub fn dropped(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m == 0.0).collect()
    }
}

/// `s_k = sum_i max_c softmax(logits_k)_{i,c}` for each modality.
pub fn confidence_scores(uni_logits: &[Tensor]) -> Result<Vec<f64>> {
    uni_logits
        .iter()
        .map(|logits| {
            if logits.is_empty() || logits.shape().len() != 2 {
                return Err(Error::EmptyBatch);
            }
            let c = logits.last_dim();
            let mut s = 0.0;
            for row in logits.data().chunks(c) {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "uni-modal logits".into(),
                    });
                }
                // max softmax = 1 / sum_j exp(x_j - max x)
                let top = row[argmax_first(row)];
                let z: f64 = row.iter().map(|&v| math::exp(v - top)).sum();
                s += 1.0 / z;
            }
            Ok(s)
        })
        .collect()
}

/// `r_k = mean_{j != k} s_k / s_j`.
pub fn relative_speed(s: &[f64]) -> Result<Vec<f64>> {
    let m = s.len();
    if m < 2 {
        return Err(Error::InvalidConfig(
            "relative speed needs at least two modalities".into(),
        ));
    }
    if let Some(&bad) = s.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidConfig(alloc::format!(
            "confidence scores must be positive and finite, got {bad}"
        )));
    }
    Ok((0..m)
        .map(|k| {
            let total: f64 = (0..m).filter(|&j| j != k).map(|j| s[k] / s[j]).sum();
            total / (m - 1) as f64
        })
        .collect())
}

/// `p_k = tanh(max(r_k - 1, 0))`.
pub fn drop_probabilities(r: &[f64]) -> Vec<f64> {
    r.iter().map(|&rk| math::tanh((rk - 1.0).max(0.0))).collect()
}

/// Drops modality `k` with probability `p_k`; returns the keep-mask.
///
/// One uniform draw is consumed per modality whose drop probability is
/// positive.
pub fn sample_dropout_mask(r: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    drop_probabilities(r)
        .into_iter()
        .map(|p| {
            if p > 0.0 && rng.random::<f64>() < p {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}
