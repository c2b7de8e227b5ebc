//! The training algorithm and its baselines.
//!
//! A step of the full method:
//!
//! 1. uni-modal forward; per-modality confidence `s_k`, relative speed `r_k`
//!    and a sampled keep-mask (adaptive modality dropout);
//! 2. a first-order inner gradient step on each encoder using its own
//!    uni-modal loss;
//! 3. fused forward at the inner-stepped encoders with the mask applied to
//!    the fused features;
//! 4. fused forward of the EMA teacher, treated as a constant;
//! 5. `loss = CE_fused + sum_k CE_uni_k + lambda * KL distillation`;
//! 6. one Adam step on every student tensor;
//! 7. EMA update of the teacher (encoders and fused head only).

mod amd;
mod distill;
mod ema;
mod eval;
mod step;
mod taylor;

pub use amd::{confidence_scores, drop_probabilities, relative_speed, sample_dropout_mask, ConfidenceStats};
pub use distill::{distillation_loss, distillation_loss_var, validate_probabilities};
pub use ema::ema_update;
pub use eval::{evaluate, evaluate_fused, fused_loss, fused_predictor_logits, EvalMetrics};
pub use step::{
    inner_update, train_step, train_step_ema_only, train_step_erm, train_step_mbcd, uni_gradients, EvalModel,
    MbcdConfig, Method, StepMetrics, TrainerState,
};
pub use taylor::{taylor_residual, taylor_residual_with};
