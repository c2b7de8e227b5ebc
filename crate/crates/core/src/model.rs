//! Per-modality MLP encoders, uni-modal heads and a concatenation-fusion
//! head.
//!
//! Encoder `k` is `linear -> relu -> linear -> layer_norm`. The normalized
//! feature feeds both the uni-modal head `k` and the fused head, which sees
//! the concatenation of all (optionally masked) features.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub input_dims: Vec<usize>,
    pub hidden_dims: Vec<usize>,
    pub feature_dims: Vec<usize>,
    pub num_classes: usize,
    pub init_seed: u64,
    #[cfg_attr(feature = "serde", serde(default = "default_ln_eps"))]
    pub ln_eps: f64,
}

#[cfg(feature = "serde")]
fn default_ln_eps() -> f64 {
    DEFAULT_LN_EPS
}

impl ModelConfig {
    pub fn modalities(&self) -> usize {
        self.input_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.input_dims.len();
        if m == 0 || self.hidden_dims.len() != m || self.feature_dims.len() != m {
            return Err(Error::InvalidConfig(format!(
                "model dims must have one entry per modality: inputs {:?}, hidden {:?}, features {:?}",
                self.input_dims, self.hidden_dims, self.feature_dims
            )));
        }
        let dims = self
            .input_dims
            .iter()
            .chain(&self.hidden_dims)
            .chain(&self.feature_dims);
        if dims.into_iter().any(|&d| d == 0) || self.num_classes == 0 {
            return Err(Error::InvalidConfig("model dims must be positive".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::InvalidConfig("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let c = self.num_classes;
        let mut n = 0;
        for k in 0..self.modalities() {
            let (i, h, f) = (self.input_dims[k], self.hidden_dims[k], self.feature_dims[k]);
            n += i * h + h + h * f + f; // encoder
            n += f * c + c; // uni head
        }
        let fsum: usize = self.feature_dims.iter().sum();
        n + fsum * c + c
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut rng::ChaCha8Rng) -> Self {
        let a = math::sqrt(6.0 / (fan_in + fan_out) as f64);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-a..a))
            .collect();
        Linear {
            w: Tensor::matrix(fan_in, fan_out, data).expect("linear shape"),
            b: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(vec![fan_in, fan_out]),
            b: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLinear {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundLinear {
            w: leaf(g, &self.w),
            b: leaf(g, &self.b),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub l1: Linear,
    pub l2: Linear,
}

impl Encoder {
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.l1.w, &self.l1.b, &self.l2.w, &self.l2.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.l1.w,
            &mut self.l1.b,
            &mut self.l2.w,
            &mut self.l2.b,
        ]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            l1: self.l1.bind(g, trainable),
            l2: self.l2.bind(g, trainable),
        }
    }
}

const ENCODER_SLOTS: [&str; 4] = ["w1", "b1", "w2", "b2"];

/// Student parameters: encoders `theta_k`, uni heads `phi_k`, fused head
/// `phi_mm`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoders: Vec<Encoder>,
    pub uni_heads: Vec<Linear>,
    pub fused_head: Linear,
    pub ln_eps: f64,
}

/// The fused predictor only: encoders plus fused head. This is what the EMA
/// teacher tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedParams {
    pub encoders: Vec<Encoder>,
    pub fused_head: Linear,
    pub ln_eps: f64,
}

/// Glorot-uniform weights, zero biases, drawn in canonical tensor order.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut r = rng::rng(config.init_seed);
    let c = config.num_classes;
    let m = config.modalities();
    let mut encoders = Vec::with_capacity(m);
    for k in 0..m {
        let l1 = Linear::init(config.input_dims[k], config.hidden_dims[k], &mut r);
        let l2 = Linear::init(config.hidden_dims[k], config.feature_dims[k], &mut r);
        encoders.push(Encoder { l1, l2 });
    }
    let uni_heads = (0..m)
        .map(|k| Linear::init(config.feature_dims[k], c, &mut r))
        .collect();
    let fused_head = Linear::init(config.feature_dims.iter().sum(), c, &mut r);
    Ok(ModelParams {
        encoders,
        uni_heads,
        fused_head,
        ln_eps: config.ln_eps,
    })
}

impl ModelParams {
    pub fn modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn num_classes(&self) -> usize {
        self.fused_head.b.len()
    }

    /// Canonical `(name, tensor)` list: encoders, uni heads, fused head.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = named_encoders(&self.encoders);
        for (k, h) in self.uni_heads.iter().enumerate() {
            out.push((format!("uni.{k}.w"), &h.w));
            out.push((format!("uni.{k}.b"), &h.b));
        }
        out.push(("fused.w".into(), &self.fused_head.w));
        out.push(("fused.b".into(), &self.fused_head.b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = named_encoders_mut(&mut self.encoders);
        for (k, h) in self.uni_heads.iter_mut().enumerate() {
            out.push((format!("uni.{k}.w"), &mut h.w));
            out.push((format!("uni.{k}.b"), &mut h.b));
        }
        out.push(("fused.w".into(), &mut self.fused_head.w));
        out.push(("fused.b".into(), &mut self.fused_head.b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn fused(&self) -> FusedParams {
        FusedParams {
            encoders: self.encoders.clone(),
            fused_head: self.fused_head.clone(),
            ln_eps: self.ln_eps,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let encoders = self.encoders.iter().map(|e| e.bind(g, trainable)).collect();
        let uni_heads = self.uni_heads.iter().map(|h| h.bind(g, trainable)).collect();
        let fused_head = self.fused_head.bind(g, trainable);
        BoundModel {
            encoders,
            uni_heads,
            fused_head,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

impl FusedParams {
    pub fn modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = named_encoders(&self.encoders);
        out.push(("fused.w".into(), &self.fused_head.w));
        out.push(("fused.b".into(), &self.fused_head.b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = named_encoders_mut(&mut self.encoders);
        out.push(("fused.w".into(), &mut self.fused_head.w));
        out.push(("fused.b".into(), &mut self.fused_head.b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// All values concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.named() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`FusedParams::flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::InvalidConfig(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for (_, t) in self.named_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

fn named_encoders(encoders: &[Encoder]) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (k, e) in encoders.iter().enumerate() {
        for (slot, t) in ENCODER_SLOTS.iter().zip(e.tensors()) {
            out.push((format!("encoder.{k}.{slot}"), t));
        }
    }
    out
}

fn named_encoders_mut(encoders: &mut [Encoder]) -> Vec<(String, &mut Tensor)> {
    let mut out = Vec::new();
    for (k, e) in encoders.iter_mut().enumerate() {
        for (slot, t) in ENCODER_SLOTS.iter().zip(e.tensors_mut()) {
            out.push((format!("encoder.{k}.{slot}"), t));
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundEncoder {
    pub l1: BoundLinear,
    pub l2: BoundLinear,
}

impl BoundEncoder {
    pub fn vars(&self) -> [Var; 4] {
        [self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }

    pub fn from_vars(v: [Var; 4]) -> Self {
        BoundEncoder {
            l1: BoundLinear { w: v[0], b: v[1] },
            l2: BoundLinear { w: v[2], b: v[3] },
        }
    }
}

/// Graph handles for every student tensor, in canonical order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoders: Vec<BoundEncoder>,
    pub uni_heads: Vec<BoundLinear>,
    pub fused_head: BoundLinear,
}

impl BoundModel {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for e in &self.encoders {
            out.extend(e.vars());
        }
        for h in &self.uni_heads {
            out.push(h.w);
            out.push(h.b);
        }
        out.push(self.fused_head.w);
        out.push(self.fused_head.b);
        out
    }
}

pub fn linear(g: &mut Graph, l: &BoundLinear, x: Var) -> Result<Var> {
    let y = g.matmul(x, l.w)?;
    g.add_bias(y, l.b)
}

/// `layer_norm(W2 relu(W1 x + b1) + b2)`.
pub fn encode_var(g: &mut Graph, enc: &BoundEncoder, x: Var, ln_eps: f64) -> Result<Var> {
    let h = linear(g, &enc.l1, x)?;
    let h = g.relu(h);
    let f = linear(g, &enc.l2, h)?;
    g.layer_norm_last_axis(f, ln_eps)
}

/// Concatenation fusion; `mask[k] == 0` zeroes feature block `k`.
pub fn fused_logits_var(g: &mut Graph, head: &BoundLinear, features: &[Var], mask: &[f64]) -> Result<Var> {
    check_mask(mask, features.len())?;
    let mut gated = Vec::with_capacity(features.len());
    for (&f, &m) in features.iter().zip(mask) {
        gated.push(g.masked_scale(f, m)?);
    }
    let cat = g.concat_last_axis(&gated)?;
    linear(g, head, cat)
}

pub fn check_mask(mask: &[f64], modalities: usize) -> Result<()> {
    if mask.len() != modalities {
        return Err(Error::InvalidConfig(format!(
            "mask has {} entries for {modalities} modalities",
            mask.len()
        )));
    }
    if let Some(&value) = mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidMask { value });
    }
    Ok(())
}

fn check_input(params_in: usize, x: &Tensor) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[1] != params_in {
        return Err(Error::ShapeMismatch {
            op: crate::graph::OpKind::MatMul,
            lhs: x.shape().to_vec(),
            rhs: vec![params_in],
        });
    }
    Ok(())
}

fn check_modality(k: usize, m: usize) -> Result<()> {
    if k >= m {
        return Err(Error::InvalidConfig(format!(
            "modality index {k} out of range for {m} modalities"
        )));
    }
    Ok(())
}

/// Normalized feature of modality `k` for a batch `x_k: [B, input_dim_k]`.
pub fn encode(params: &ModelParams, x: &Tensor, k: usize) -> Result<Tensor> {
    encode_with(&params.encoders, params.ln_eps, x, k)
}

pub fn encode_with(encoders: &[Encoder], ln_eps: f64, x: &Tensor, k: usize) -> Result<Tensor> {
    check_modality(k, encoders.len())?;
    check_input(encoders[k].l1.w.shape()[0], x)?;
    let mut g = Graph::new();
    let enc = encoders[k].bind(&mut g, false);
    let xv = g.constant(x.clone());
    let f = encode_var(&mut g, &enc, xv, ln_eps)?;
    Ok(g.value(f).clone())
}

pub fn uni_logits(params: &ModelParams, feature: &Tensor, k: usize) -> Result<Tensor> {
    check_modality(k, params.modalities())?;
    check_input(params.uni_heads[k].w.shape()[0], feature)?;
    let mut g = Graph::new();
    let head = params.uni_heads[k].bind(&mut g, false);
    let f = g.constant(feature.clone());
    let y = linear(&mut g, &head, f)?;
    Ok(g.value(y).clone())
}

pub fn fused_logits(head: &Linear, features: &[Tensor], mask: &[f64]) -> Result<Tensor> {
    check_mask(mask, features.len())?;
    let mut g = Graph::new();
    let h = head.bind(&mut g, false);
    let fs: Vec<Var> = features.iter().map(|f| g.constant(f.clone())).collect();
    let y = fused_logits_var(&mut g, &h, &fs, mask)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, max_relative_error};

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dims: vec![4, 6],
            hidden_dims: vec![8, 8],
            feature_dims: vec![5, 5],
            num_classes: 3,
            init_seed: 11,
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::rng(seed);
        let data = (0..rows * cols).map(|_| rng::normal(&mut r)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&small_config()).unwrap();
        let b = init_params(&small_config()).unwrap();
        assert_eq!(a, b);
        let mut other = small_config();
        other.init_seed = 12;
        assert_ne!(a, init_params(&other).unwrap());
    }

    #[test]
    fn dimension_bookkeeping() {
        let cfg = small_config();
        let p = init_params(&cfg).unwrap();
        assert_eq!(p.fused_head.w.shape(), &[10, 3]);
        assert_eq!(p.encoders[1].l1.w.shape(), &[6, 8]);
        assert_eq!(p.uni_heads[0].w.shape(), &[5, 3]);
        assert_eq!(p.num_params(), cfg.param_count());
    }

    #[test]
    fn biases_start_at_zero_and_weights_in_range() {
        let cfg = small_config();
        let p = init_params(&cfg).unwrap();
        for (name, t) in p.named() {
            if name.ends_with(".b") || name.ends_with("b1") || name.ends_with("b2") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let s = t.shape();
                let a = (6.0 / (s[0] + s[1]) as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= a), "{name}");
            }
        }
    }

    #[test]
    fn rejects_mismatched_dims() {
        let mut cfg = small_config();
        cfg.hidden_dims.pop();
        assert!(init_params(&cfg).is_err());
    }

    #[test]
    fn encoded_rows_are_normalized() {
        let p = init_params(&small_config()).unwrap();
        let x = batch(16, 4, 1).map(|v| 10.0 * v);
        let f = encode(&p, &x, 0).unwrap();
        assert_eq!(f.shape(), &[16, 5]);
        for r in 0..16 {
            let row = f.row(r);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| v * v).sum::<f64>() / 5.0 - mean * mean;
            assert!(mean.abs() < 1e-9);
            // unit variance up to the eps correction var / (var + eps)
            assert!((var - 1.0).abs() < 1e-3, "row {r}: {var}");
        }
    }

    #[test]
    fn encode_is_batch_row_independent() {
        let p = init_params(&small_config()).unwrap();
        let x = batch(16, 6, 2);
        let full = encode(&p, &x, 1).unwrap();
        for r in [0, 7, 15] {
            let single = encode(&p, &x.gather_rows(&[r]).unwrap(), 1).unwrap();
            assert_eq!(single.data(), full.row(r));
        }
    }

    #[test]
    fn encode_input_gradient_matches_finite_differences() {
        let p = init_params(&small_config()).unwrap();
        let x = batch(3, 4, 3);
        let w = batch(3, 5, 4);
        // weighted mean so the gradient is not identically zero
        let f = |xt: &Tensor| -> Result<f64> {
            let feat = encode(&p, xt, 0)?;
            Ok(feat.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>() / 15.0)
        };
        let fd = finite_difference_gradient(f, &x, 1e-5).unwrap();
        let mut g = Graph::new();
        let enc = p.encoders[0].bind(&mut g, false);
        let xv = g.param(x.clone());
        let feat = encode_var(&mut g, &enc, xv, p.ln_eps).unwrap();
        let wv = g.constant(w.clone());
        let weighted = g.mul(feat, wv).unwrap();
        let loss = g.reduce_mean(weighted);
        let grads = g.backward(loss).unwrap();
        let err = max_relative_error(&grads.wrt(xv), &fd);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn all_ones_mask_matches_plain_concatenation() {
        let p = init_params(&small_config()).unwrap();
        let f0 = encode(&p, &batch(5, 4, 5), 0).unwrap();
        let f1 = encode(&p, &batch(5, 6, 6), 1).unwrap();
        let masked = fused_logits(&p.fused_head, &[f0.clone(), f1.clone()], &[1.0, 1.0]).unwrap();
        let mut cat = Vec::new();
        for r in 0..5 {
            cat.extend_from_slice(f0.row(r));
            cat.extend_from_slice(f1.row(r));
        }
        let cat = Tensor::matrix(5, 10, cat).unwrap();
        let mut g = Graph::new();
        let h = p.fused_head.bind(&mut g, false);
        let c = g.constant(cat);
        let y = linear(&mut g, &h, c).unwrap();
        assert_eq!(masked.data(), g.value(y).data());
    }

    #[test]
    fn dropped_modality_has_no_influence() {
        let p = init_params(&small_config()).unwrap();
        let f0 = encode(&p, &batch(5, 4, 7), 0).unwrap();
        let f1a = encode(&p, &batch(5, 6, 8), 1).unwrap();
        let f1b = encode(&p, &batch(5, 6, 9), 1).unwrap();
        let a = fused_logits(&p.fused_head, &[f0.clone(), f1a], &[1.0, 0.0]).unwrap();
        let b = fused_logits(&p.fused_head, &[f0, f1b], &[1.0, 0.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_map_gives_uniform_prediction() {
        let head = Linear::zeros(10, 3);
        let f = batch(4, 5, 10);
        let logits = fused_logits(&head, &[f.clone(), f], &[1.0, 1.0]).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let mut g = Graph::new();
        let l = g.constant(logits);
        let s = g.softmax_last_axis(l).unwrap();
        assert!(g.value(s).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn mask_entries_must_be_binary() {
        let head = Linear::zeros(10, 3);
        let f = batch(2, 5, 11);
        let err = fused_logits(&head, &[f.clone(), f], &[1.0, 0.5]).unwrap_err();
        assert_eq!(err, Error::InvalidMask { value: 0.5 });
    }

    #[test]
    fn flatten_round_trip() {
        let p = init_params(&small_config()).unwrap().fused();
        let flat = p.flatten();
        let mut q = p.clone();
        q.load_flat(&vec![0.0; flat.len()]).unwrap();
        assert_ne!(p, q);
        q.load_flat(&flat).unwrap();
        assert_eq!(p, q);
    }
}
