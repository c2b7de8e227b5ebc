use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::MultiModalBatch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::math;
use crate::model::{encode_var, fused_logits_var, Encoder, ModelParams};
use crate::tensor::Tensor;

use super::step::uni_gradients;

/// Residual of the first-order expansion
/// `L_mm(theta - alpha g_uni) ~ L_mm(theta) - alpha <g_uni, g_mm>` for an
/// arbitrary flat parameter vector.
///
/// `mm` returns the fused loss and its gradient; `uni_grad` returns the
/// uni-modal gradient. Both are evaluated at `theta`; `mm` is evaluated
/// again at the stepped point.
pub fn taylor_residual_with<F, G>(theta: &[f64], alpha: f64, mut mm: F, mut uni_grad: G) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(alpha >= 0.0) {
        return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
    }
    let (l0, g_mm) = mm(theta)?;
    let g_uni = uni_grad(theta)?;
    if g_mm.len() != theta.len() || g_uni.len() != theta.len() {
        return Err(Error::InvalidConfig("gradient length differs from parameter length".into()));
    }
    let stepped: Vec<f64> = theta.iter().zip(&g_uni).map(|(&t, &g)| t - alpha * g).collect();
    let (l1, _) = mm(&stepped)?;
    let dot: f64 = g_uni.iter().zip(&g_mm).map(|(a, b)| a * b).sum();
    Ok(math::abs(l1 - (l0 - alpha * dot)))
}

/// Fused cross-entropy (all modalities kept) and its gradient with respect
/// to each encoder.
fn fused_loss_and_grads(
    student: &ModelParams,
    encoders: &[Encoder],
    batch: &MultiModalBatch,
) -> Result<(f64, Vec<[Tensor; 4]>)> {
    let mut g = Graph::new();
    let bound: Vec<_> = encoders.iter().map(|e| e.bind(&mut g, true)).collect();
    let head = student.fused_head.bind(&mut g, false);
    let mut feats = Vec::with_capacity(bound.len());
    for (k, enc) in bound.iter().enumerate() {
        let x = g.constant(batch.modalities[k].clone());
        feats.push(encode_var(&mut g, enc, x, student.ln_eps)?);
    }
    let logits = fused_logits_var(&mut g, &head, &feats, &vec![1.0; bound.len()])?;
    let loss = g.cross_entropy(logits, &batch.labels)?;
    let grads = g.backward(loss)?;
    let per = bound.iter().map(|e| e.vars().map(|v| grads.wrt(v))).collect();
    Ok((g.value(loss).item(), per))
}

/// Taylor residual for the model: every encoder takes the inner step
/// `theta_k - alpha * grad L_uni_k`, the fused head is held fixed.
pub fn taylor_residual(student: &ModelParams, batch: &MultiModalBatch, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
    }
    let g_uni = uni_gradients(student, batch)?;
    let (l0, g_mm) = fused_loss_and_grads(student, &student.encoders, batch)?;
    let mut dot = 0.0;
    let mut stepped = student.encoders.clone();
    for ((enc, gu), gm) in stepped.iter_mut().zip(&g_uni).zip(&g_mm) {
        for ((t, u), m) in enc.tensors_mut().into_iter().zip(gu).zip(gm) {
            for ((x, &du), &dm) in t.data_mut().iter_mut().zip(u.data()).zip(m.data()) {
                *x -= alpha * du;
                dot += du * dm;
            }
        }
    }
    let (l1, _) = fused_loss_and_grads(student, &stepped, batch)?;
    Ok(math::abs(l1 - (l0 - alpha * dot)))
}
