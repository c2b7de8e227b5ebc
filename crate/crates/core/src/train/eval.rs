use alloc::vec;
use alloc::vec::Vec;

use crate::data::MultiModalBatch;
use crate::error::{Error, Result};
use crate::graph::{argmax_first, Graph};
use crate::model::{encode_with, fused_logits, uni_logits, FusedParams, ModelParams};
use crate::tensor::Tensor;

/// Split-level metrics. Predictions use the first-maximum tie rule.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub n: usize,
    pub acc_mm: f64,
    pub acc_uni: Vec<f64>,
    pub loss_mm: f64,
    pub loss_uni: Vec<f64>,
}

fn ce_and_accuracy(logits: Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax_first(logits.row(i)) == y)
        .count();
    let mut g = Graph::new();
    let l = g.constant(logits);
    let ce = g.cross_entropy(l, labels)?;
    Ok((g.value(ce).item(), hits as f64 / labels.len() as f64))
}

fn check_split(m: usize, batch: &MultiModalBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.num_modalities() != m {
        return Err(Error::InvalidConfig(alloc::format!(
            "split has {} modalities, model has {m}",
            batch.num_modalities()
        )));
    }
    Ok(())
}

/// Fused logits with every modality kept.
pub fn fused_predictor_logits(fused: &FusedParams, batch: &MultiModalBatch) -> Result<Tensor> {
    check_split(fused.modalities(), batch)?;
    let feats = (0..fused.modalities())
        .map(|k| encode_with(&fused.encoders, fused.ln_eps, &batch.modalities[k], k))
        .collect::<Result<Vec<_>>>()?;
    fused_logits(&fused.fused_head, &feats, &vec![1.0; feats.len()])
}

/// `(mean cross-entropy, accuracy)` of the fused predictor.
pub fn evaluate_fused(fused: &FusedParams, batch: &MultiModalBatch) -> Result<(f64, f64)> {
    ce_and_accuracy(fused_predictor_logits(fused, batch)?, &batch.labels)
}

/// Mean fused cross-entropy; the loss probed for flatness.
pub fn fused_loss(fused: &FusedParams, batch: &MultiModalBatch) -> Result<f64> {
    evaluate_fused(fused, batch).map(|(l, _)| l)
}

/// Uni-modal branches always come from the student (the teacher has no
/// uni-modal heads); the fused branch comes from `fused` when given.
pub fn evaluate(student: &ModelParams, fused: Option<&FusedParams>, batch: &MultiModalBatch) -> Result<EvalMetrics> {
    check_split(student.modalities(), batch)?;
    let own;
    let fused = match fused {
        Some(f) => f,
        None => {
            own = student.fused();
            &own
        }
    };
    let (loss_mm, acc_mm) = evaluate_fused(fused, batch)?;
    let mut acc_uni = Vec::with_capacity(student.modalities());
    let mut loss_uni = Vec::with_capacity(student.modalities());
    for k in 0..student.modalities() {
        let f = encode_with(&student.encoders, student.ln_eps, &batch.modalities[k], k)?;
        let (l, a) = ce_and_accuracy(uni_logits(student, &f, k)?, &batch.labels)?;
        loss_uni.push(l);
        acc_uni.push(a);
    }
    Ok(EvalMetrics {
        n: batch.len(),
        acc_mm,
        acc_uni,
        loss_mm,
        loss_uni,
    })
}
