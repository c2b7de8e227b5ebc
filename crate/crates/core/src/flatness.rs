//! Loss-landscape flatness probe: mean loss increase under random
//! unit-norm perturbations of growing radius.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::MultiModalBatch;
use crate::error::{Error, Result};
use crate::math;
use crate::model::FusedParams;
use crate::rng::{self, derive_seed};
use crate::train::fused_loss;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlatnessCurve {
    pub radii: Vec<f64>,
    /// Mean over directions of `L(theta + r d) - L(theta)`; `+inf` when any
    /// direction produced a non-finite loss at that radius.
    pub mean_loss_increase: Vec<f64>,
    /// Directions with a non-finite loss, per radius.
    pub n_nan: Vec<usize>,
    pub n_directions: usize,
    pub seed: u64,
}

/// `{0, 0.05, ..., 0.5}`.
pub fn default_radii() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.05).collect()
}

/// Direction `index` for a `dim`-dimensional parameter vector: a standard
/// Gaussian draw scaled to unit L2 norm.
pub fn direction(dim: usize, seed: u64, index: usize) -> Vec<f64> {
    let mut r = rng::rng(derive_seed(seed, index as u64));
    let mut d: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
    let norm = math::sqrt(d.iter().map(|x| x * x).sum());
    d.iter_mut().for_each(|x| *x /= norm);
    d
}

fn check_radii(radii: &[f64]) -> Result<()> {
    if radii.is_empty() {
        return Err(Error::InvalidConfig("no radii given".into()));
    }
    if radii.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) || radii.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig(format!(
            "radii must be finite, non-negative and ascending: {radii:?}"
        )));
    }
    Ok(())
}

/// Probes `loss` around `params`. `params` is perturbed in place and
/// restored bitwise before returning, on success or error.
pub fn probe<F>(params: &mut [f64], mut loss: F, radii: &[f64], n_directions: usize, seed: u64) -> Result<FlatnessCurve>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_radii(radii)?;
    if n_directions == 0 {
        return Err(Error::InvalidConfig("n_directions must be >= 1".into()));
    }
    if params.is_empty() {
        return Err(Error::InvalidConfig("no parameters to probe".into()));
    }
    let base_params = params.to_vec();
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            what: "loss at the probe centre".into(),
        });
    }
    let mut sums = vec![0.0; radii.len()];
    let mut n_nan = vec![0usize; radii.len()];
    let mut result = Ok(());
    'dirs: for d in 0..n_directions {
        let dir = direction(params.len(), seed, d);
        for (i, &radius) in radii.iter().enumerate() {
            if radius == 0.0 {
                continue;
            }
            for ((p, &b), &u) in params.iter_mut().zip(&base_params).zip(&dir) {
                *p = b + radius * u;
            }
            match loss(params) {
                Ok(l) if l.is_finite() => sums[i] += l - base,
                Ok(_) => {
                    n_nan[i] += 1;
                    sums[i] = f64::INFINITY;
                }
                Err(e) => {
                    result = Err(e);
                    break 'dirs;
                }
            }
        }
    }
    params.copy_from_slice(&base_params);
    result?;
    let mean_loss_increase = radii
        .iter()
        .zip(&sums)
        .map(|(&r, &s)| if r == 0.0 { 0.0 } else { s / n_directions as f64 })
        .collect();
    Ok(FlatnessCurve {
        radii: radii.to_vec(),
        mean_loss_increase,
        n_nan,
        n_directions,
        seed,
    })
}

/// Probes the fused cross-entropy of `model` on `batch` over all encoder
/// and fused-head parameters.
pub fn probe_fused(
    model: &FusedParams,
    batch: &MultiModalBatch,
    radii: &[f64],
    n_directions: usize,
    seed: u64,
) -> Result<FlatnessCurve> {
    let mut flat = model.flatten();
    let mut scratch = model.clone();
    probe(
        &mut flat,
        |p| {
            scratch.load_flat(p)?;
            fused_loss(&scratch, batch)
        },
        radii,
        n_directions,
        seed,
    )
}
