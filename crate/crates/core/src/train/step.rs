use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::MultiModalBatch;
use crate::error::{Error, Result};
use crate::graph::{argmax_first, Graph, Var};
use crate::model::{
    encode_var, encode_with, fused_logits, fused_logits_var, linear, BoundEncoder, Encoder, FusedParams,
    ModelParams,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, ChaCha8Rng};
use crate::tensor::Tensor;

use super::amd::{confidence_scores, drop_probabilities, relative_speed, sample_dropout_mask, ConfidenceStats};
use super::distill::distillation_loss_var;
use super::ema::ema_update;

/// Which parameters are used for fused-accuracy evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EvalModel {
    Teacher,
    Student,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    Mbcd,
    Erm,
    EmaOnly,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MbcdConfig {
    /// Distillation weight.
    pub lambda: f64,
    /// Inner-loop step size.
    pub alpha: f64,
    pub beta_ema: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` picks the teacher when EMA is enabled, else the student.
    pub eval_model: Option<EvalModel>,
    pub amd_enabled: bool,
    pub gcc_enabled: bool,
    pub distill_enabled: bool,
    pub ema_enabled: bool,
}

impl Default for MbcdConfig {
    fn default() -> Self {
        MbcdConfig {
            lambda: 1.0,
            alpha: 1e-4,
            beta_ema: 0.999,
            adam: AdamConfig::default(),
            batch_size: 16,
            epochs: 30,
            eval_model: None,
            amd_enabled: true,
            gcc_enabled: true,
            distill_enabled: true,
            ema_enabled: true,
        }
    }
}

impl MbcdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.beta_ema) {
            return bad(format!("beta_ema must be in [0, 1), got {}", self.beta_ema));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.distill_enabled && !self.ema_enabled {
            return bad("distillation needs the EMA teacher".into());
        }
        self.adam.validate()
    }

    /// Flags for the named method; hyperparameters are kept.
    pub fn for_method(&self, method: Method) -> MbcdConfig {
        let mut c = self.clone();
        let (amd, gcc, distill, ema) = match method {
            Method::Mbcd => return c,
            Method::Erm => (false, false, false, false),
            Method::EmaOnly => (false, false, false, true),
        };
        c.amd_enabled = amd;
        c.gcc_enabled = gcc;
        c.distill_enabled = distill;
        c.ema_enabled = ema;
        c
    }

    pub fn resolved_eval_model(&self) -> EvalModel {
        self.eval_model.unwrap_or(if self.ema_enabled {
            EvalModel::Teacher
        } else {
            EvalModel::Student
        })
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub student: ModelParams,
    /// EMA copy of the encoders and fused head.
    pub teacher: FusedParams,
    pub optimizer: Adam,
    pub step: u64,
    /// Dropout-mask stream; untouched unless modality dropout is enabled.
    pub rng: ChaCha8Rng,
}

impl TrainerState {
    /// The teacher starts as an exact copy of the tracked student tensors.
    pub fn new(student: ModelParams, adam: AdamConfig, dropout_seed: u64) -> Self {
        let optimizer = Adam::new(adam, student.named().into_iter().map(|(_, t)| t));
        TrainerState {
            teacher: student.fused(),
            student,
            optimizer,
            step: 0,
            rng: rng::rng(dropout_seed),
        }
    }
}

/// Per-step losses and modality statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// Step index before the update (0-based).
    pub step: u64,
    pub loss_total: f64,
    pub loss_mm: f64,
    pub loss_uni: Vec<f64>,
    /// Unweighted distillation loss; 0 when distillation is off.
    pub loss_dis: f64,
    /// Fused term of the distillation loss alone.
    pub loss_dis_fused: f64,
    /// Batch accuracy of the (masked, inner-stepped) fused prediction.
    pub acc_mm: f64,
    pub acc_uni: Vec<f64>,
    pub stats: ConfidenceStats,
}

fn speeds(s: &[f64]) -> Result<Vec<f64>> {
    if s.len() < 2 {
        Ok(vec![1.0; s.len()])
    } else {
        relative_speed(s)
    }
}

fn check_batch(student: &ModelParams, batch: &MultiModalBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.num_modalities() != student.modalities() {
        return Err(Error::InvalidConfig(format!(
            "batch has {} modalities, model has {}",
            batch.num_modalities(),
            student.modalities()
        )));
    }
    let c = student.num_classes();
    if let Some(&label) = batch.labels.iter().find(|&&y| y >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    Ok(())
}

fn check_finite(g: &Graph, v: Var, what: &str) -> Result<f64> {
    let x = g.value(v).item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { what: what.into() })
    }
}

fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax_first(logits.row(i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

fn subtract_scaled(g: &mut Graph, v: Var, grad: Tensor, alpha: f64) -> Result<Var> {
    let step = g.constant(grad.map(|x| alpha * x));
    g.sub(v, step)
}

/// `theta_k - alpha * grad` for one encoder.
fn stepped_encoder(enc: &Encoder, grads: &[Tensor; 4], alpha: f64) -> Encoder {
    let mut out = enc.clone();
    for (t, gr) in out.tensors_mut().into_iter().zip(grads) {
        for (x, &d) in t.data_mut().iter_mut().zip(gr.data()) {
            *x -= alpha * d;
        }
    }
    out
}

/// Gradient of each modality's uni-modal cross-entropy with respect to its
/// own encoder, in `[w1, b1, w2, b2]` order.
pub fn uni_gradients(student: &ModelParams, batch: &MultiModalBatch) -> Result<Vec<[Tensor; 4]>> {
    check_batch(student, batch)?;
    let mut g = Graph::new();
    let bound = student.bind(&mut g, true);
    let mut total = None;
    for k in 0..student.modalities() {
        let x = g.constant(batch.modalities[k].clone());
        let f = encode_var(&mut g, &bound.encoders[k], x, student.ln_eps)?;
        let logits = linear(&mut g, &bound.uni_heads[k], f)?;
        let ce = g.cross_entropy(logits, &batch.labels)?;
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce)?,
        });
    }
    let total = total.ok_or(Error::EmptyBatch)?;
    let grads = g.backward(total)?;
    let out: Vec<[Tensor; 4]> = bound
        .encoders
        .iter()
        .map(|e| e.vars().map(|v| grads.wrt(v)))
        .collect();
    if out.iter().flatten().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite {
            what: "inner gradient".into(),
        });
    }
    Ok(out)
}

/// One plain gradient step on encoder `k` using its uni-modal loss. The
/// uni-modal head is not changed.
pub fn inner_update(student: &ModelParams, k: usize, batch: &MultiModalBatch, alpha: f64) -> Result<Encoder> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
    }
    if k >= student.modalities() {
        return Err(Error::InvalidConfig(format!("modality index {k} out of range")));
    }
    let grads = uni_gradients(student, batch)?;
    Ok(stepped_encoder(&student.encoders[k], &grads[k], alpha))
}

/// Teacher fused probabilities with every modality kept.
fn teacher_probs(teacher: &FusedParams, batch: &MultiModalBatch) -> Result<Tensor> {
    let feats = (0..teacher.modalities())
        .map(|k| encode_with(&teacher.encoders, teacher.ln_eps, &batch.modalities[k], k))
        .collect::<Result<Vec<_>>>()?;
    let logits = fused_logits(&teacher.fused_head, &feats, &vec![1.0; feats.len()])?;
    let mut g = Graph::new();
    let l = g.constant(logits);
    let p = g.softmax_last_axis(l)?;
    Ok(g.value(p).clone())
}

/// One training step under `config`. Baselines are this step with
/// components switched off.
pub fn train_step(state: &mut TrainerState, batch: &MultiModalBatch, config: &MbcdConfig) -> Result<StepMetrics> {
    check_batch(&state.student, batch)?;
    let m = state.student.modalities();
    let eps = state.student.ln_eps;
    let mut g = Graph::new();
    let bound = state.student.bind(&mut g, true);

    // (1) uni-modal forward at theta, confidence statistics, dropout mask.
    let mut feats = Vec::with_capacity(m);
    let mut uni_logits = Vec::with_capacity(m);
    let mut uni_ce = Vec::with_capacity(m);
    for k in 0..m {
        let x = g.constant(batch.modalities[k].clone());
        let f = encode_var(&mut g, &bound.encoders[k], x, eps)?;
        let logits = linear(&mut g, &bound.uni_heads[k], f)?;
        let ce = g.cross_entropy(logits, &batch.labels)?;
        feats.push(f);
        uni_logits.push(logits);
        uni_ce.push(ce);
    }
    let logit_values: Vec<Tensor> = uni_logits.iter().map(|&v| g.value(v).clone()).collect();
    let s = confidence_scores(&logit_values)?;
    let r = speeds(&s)?;
    let drop_prob = drop_probabilities(&r);
    let mask = if config.amd_enabled {
        sample_dropout_mask(&r, &mut state.rng)
    } else {
        vec![1.0; m]
    };

    let mut uni_sum = uni_ce[0];
    for &ce in &uni_ce[1..] {
        uni_sum = g.add(uni_sum, ce)?;
    }

    // (2)-(3) inner step on each encoder, then fused forward at theta'.
    let fused_feats = if config.gcc_enabled {
        let inner = g.backward(uni_sum)?;
        let mut stepped = Vec::with_capacity(m);
        for (k, enc) in bound.encoders.iter().enumerate() {
            let mut vars = enc.vars();
            for v in vars.iter_mut() {
                let grad = inner.wrt(*v);
                if !grad.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("inner gradient of modality {}", k + 1),
                    });
                }
                *v = subtract_scaled(&mut g, *v, grad, config.alpha)?;
            }
            let x = g.constant(batch.modalities[k].clone());
            stepped.push(encode_var(&mut g, &BoundEncoder::from_vars(vars), x, eps)?);
        }
        stepped
    } else {
        feats
    };
    let fused = fused_logits_var(&mut g, &bound.fused_head, &fused_feats, &mask)?;
    let loss_mm = g.cross_entropy(fused, &batch.labels)?;
    let mut total = g.add(loss_mm, uni_sum)?;

    // (4)-(5) distillation towards the teacher's fused prediction.
    let mut dis = None;
    if config.distill_enabled {
        let pt = teacher_probs(&state.teacher, batch)?;
        let pt = g.constant(pt);
        let pf = g.softmax_last_axis(fused)?;
        let mut pu = Vec::with_capacity(m);
        for &l in &uni_logits {
            pu.push(g.softmax_last_axis(l)?);
        }
        let (d, first) = distillation_loss_var(&mut g, pt, pf, &pu)?;
        let weighted = g.scalar_mul(d, config.lambda);
        total = g.add(total, weighted)?;
        dis = Some((d, first));
    }

    let loss_mm_v = check_finite(&g, loss_mm, "loss_mm")?;
    let loss_uni = uni_ce
        .iter()
        .enumerate()
        .map(|(k, &v)| check_finite(&g, v, &format!("loss_uni_{}", k + 1)))
        .collect::<Result<Vec<_>>>()?;
    let (loss_dis, loss_dis_fused) = match dis {
        Some((d, first)) => (check_finite(&g, d, "loss_dis")?, g.value(first).item()),
        None => (0.0, 0.0),
    };
    let loss_total = check_finite(&g, total, "loss_total")?;

    // (6) optimizer step on every student tensor.
    let grads = g.backward(total)?;
    let grad_list: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.wrt(v)).collect();
    let acc_mm = batch_accuracy(g.value(fused), &batch.labels);
    let acc_uni = logit_values.iter().map(|l| batch_accuracy(l, &batch.labels)).collect();
    drop(g);
    state.optimizer.step(&mut state.student.named_mut(), &grad_list)?;

    // (7) teacher update.
    if config.ema_enabled {
        ema_update(&mut state.teacher, &state.student, config.beta_ema)?;
    }
    let step = state.step;
    state.step += 1;
    Ok(StepMetrics {
        step,
        loss_total,
        loss_mm: loss_mm_v,
        loss_uni,
        loss_dis,
        loss_dis_fused,
        acc_mm,
        acc_uni,
        stats: ConfidenceStats { s, r, drop_prob, mask },
    })
}

/// Full method; the component flags in `config` are honored.
pub fn train_step_mbcd(state: &mut TrainerState, batch: &MultiModalBatch, config: &MbcdConfig) -> Result<StepMetrics> {
    train_step(state, batch, config)
}

/// Joint cross-entropy on the fused head and every uni-modal head.
pub fn train_step_erm(state: &mut TrainerState, batch: &MultiModalBatch) -> Result<StepMetrics> {
    let config = MbcdConfig::default().for_method(Method::Erm);
    train_step(state, batch, &config)
}

/// ERM plus an EMA teacher.
pub fn train_step_ema_only(state: &mut TrainerState, batch: &MultiModalBatch, beta_ema: f64) -> Result<StepMetrics> {
    let mut config = MbcdConfig::default().for_method(Method::EmaOnly);
    config.beta_ema = beta_ema;
    train_step(state, batch, &config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, DEFAULT_LN_EPS};

    fn setup(m: usize) -> (ModelParams, MultiModalBatch) {
        let cfg = ModelConfig {
            input_dims: vec![3; m],
            hidden_dims: vec![5; m],
            feature_dims: vec![4; m],
            num_classes: 3,
            init_seed: 11,
            ln_eps: DEFAULT_LN_EPS,
        };
        let p = init_params(&cfg).unwrap();
        let mut r = rng::rng(5);
        let modalities = (0..m)
            .map(|_| Tensor::matrix(6, 3, (0..18).map(|_| rng::normal(&mut r)).collect()).unwrap())
            .collect();
        let batch = MultiModalBatch {
            modalities,
            labels: vec![0, 1, 2, 0, 1, 2],
        };
        (p, batch)
    }

    #[test]
    fn defaults_validate() {
        MbcdConfig::default().validate().unwrap();
        let d = MbcdConfig::default;
        assert!(MbcdConfig { beta_ema: 1.0, ..d() }.validate().is_err());
        assert!(MbcdConfig { alpha: 0.0, ..d() }.validate().is_err());
        assert!(MbcdConfig { lambda: -1.0, ..d() }.validate().is_err());
        assert!(MbcdConfig { batch_size: 0, ..d() }.validate().is_err());
    }

    #[test]
    fn zero_alpha_leaves_encoder_bitwise() {
        let (p, b) = setup(2);
        assert_eq!(inner_update(&p, 0, &b, 0.0).unwrap(), p.encoders[0]);
    }

    #[test]
    fn inner_update_does_not_touch_heads() {
        let (p, b) = setup(2);
        let e = inner_update(&p, 1, &b, 0.5).unwrap();
        assert_ne!(e, p.encoders[1]);
        assert!(inner_update(&p, 2, &b, 0.5).is_err());
    }

    #[test]
    fn lambda_zero_total_is_sum_of_terms() {
        let (p, b) = setup(3);
        let c = MbcdConfig {
            lambda: 0.0,
            ..MbcdConfig::default()
        };
        let mut st = TrainerState::new(p, c.adam, 1);
        let mt = train_step(&mut st, &b, &c).unwrap();
        let sum = mt.loss_mm + mt.loss_uni.iter().sum::<f64>();
        assert!((mt.loss_total - sum).abs() < 1e-12);
        assert!(mt.loss_dis >= 0.0);
    }

    #[test]
    fn fresh_teacher_gives_zero_fused_distillation() {
        // teacher == student, mask all-ones, no inner step: the fused KL
        // compares identical distributions.
        let (p, b) = setup(2);
        let c = MbcdConfig {
            amd_enabled: false,
            gcc_enabled: false,
            ..MbcdConfig::default()
        };
        let mut st = TrainerState::new(p, c.adam, 1);
        let mt = train_step(&mut st, &b, &c).unwrap();
        assert!(mt.loss_dis_fused.abs() < 1e-12);
    }

    #[test]
    fn erm_with_one_modality_trains() {
        let (p, b) = setup(1);
        let mut st = TrainerState::new(p, AdamConfig { lr: 1e-2, ..AdamConfig::default() }, 0);
        let first = train_step_erm(&mut st, &b).unwrap();
        let mut last = first.clone();
        for _ in 0..200 {
            last = train_step_erm(&mut st, &b).unwrap();
        }
        assert!(last.loss_mm < first.loss_mm);
        assert_eq!(st.step, 201);
        assert_eq!(first.stats.r, vec![1.0]);
    }

    #[test]
    fn ema_only_with_zero_decay_matches_erm() {
        let (p, b) = setup(2);
        let mut a = TrainerState::new(p.clone(), AdamConfig::default(), 3);
        let mut e = TrainerState::new(p, AdamConfig::default(), 3);
        for _ in 0..5 {
            train_step_erm(&mut a, &b).unwrap();
            train_step_ema_only(&mut e, &b, 0.0).unwrap();
        }
        assert_eq!(a.student, e.student);
        assert_eq!(e.teacher, e.student.fused());
    }

    #[test]
    fn bad_labels_are_rejected() {
        let (p, mut b) = setup(2);
        b.labels[0] = 7;
        let mut st = TrainerState::new(p, AdamConfig::default(), 0);
        assert!(matches!(
            train_step_erm(&mut st, &b),
            Err(Error::LabelOutOfRange { label: 7, .. })
        ));
        assert_eq!(st.step, 0);
    }
}
