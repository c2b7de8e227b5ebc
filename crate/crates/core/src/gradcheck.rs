//! Central finite-difference gradients, used as an independent oracle for
//! the analytic gradients produced by [`crate::graph::Graph::backward`].

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::rng::{self, derive_seed, ChaCha8Rng};
use crate::tensor::Tensor;

/// Estimates the gradient of `f` at `params` coordinate by coordinate with
/// `(f(p + h e_i) - f(p - h e_i)) / (2h)`.
pub fn finite_difference_gradient<F>(mut f: F, params: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = params.clone();
    let mut out = Tensor::zeros(params.shape().to_vec());
    for i in 0..params.len() {
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = math::abs(a).max(math::abs(b)).max(1e-8);
    math::abs(a - b) / denom
}

/// Largest elementwise [`relative_error`] between two equally shaped tensors.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

/// Worst-case agreement between analytic and finite-difference gradients
/// for one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
}

const FD_STEP: f64 = 1e-5;

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
fn weighted(g: &mut Graph, out: Var, weights: &Option<Tensor>) -> Result<Var> {
    match weights {
        None => Ok(out),
        Some(w) => {
            let w = g.constant(w.clone());
            let prod = g.mul(out, w)?;
            Ok(g.reduce_sum(prod))
        }
    }
}

fn run(case: &Case, inputs: &[Tensor], weights: &Option<Tensor>) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = weighted(&mut g, out, weights)?;
    Ok((g, vars, loss))
}

fn case_error(case: &Case, r: &mut ChaCha8Rng) -> Result<f64> {
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = (case.build)(&mut g, &vars)?;
        g.value(out).clone()
    };
    let weights = if probe.len() == 1 && probe.shape().len() <= 1 {
        None
    } else {
        let w = (0..probe.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        Some(Tensor::new(probe.shape().to_vec(), w)?)
    };
    let (g, vars, loss) = run(case, &case.inputs, &weights)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        let numeric = finite_difference_gradient(
            |t| {
                let mut ins = case.inputs.clone();
                ins[i] = t.clone();
                let (g, _, loss) = run(case, &ins, &weights)?;
                Ok(g.value(loss).item())
            },
            &case.inputs[i],
            FD_STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn gaussian(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(r)).collect()).expect("shape")
}

/// Gaussian entries pushed at least `gap` away from zero (keeps finite
/// differences off the relu kink).
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    gaussian(r, shape).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// Rows whose largest entry leads the runner-up by at least `gap`.
fn clear_max(r: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    let mut t = gaussian(r, &[rows, cols]);
    for row in t.data_mut().chunks_mut(cols) {
        let j = crate::graph::argmax_first(row);
        row[j] += gap;
    }
    t
}

fn probabilities(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = gaussian(r, &[rows, cols]).map(math::exp);
    for row in t.data_mut().chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (r.random_range(1..5), r.random_range(2..6), r.random_range(1..5))
}

/// Names of the primitives covered by [`check_primitives`].
pub const PRIMITIVES: [&str; 17] = [
    "matmul",
    "add",
    "sub",
    "add_bias",
    "mul",
    "scalar_mul",
    "relu",
    "concat_last_axis",
    "reduce_mean",
    "reduce_sum",
    "softmax_last_axis",
    "log_softmax_last_axis",
    "layer_norm_last_axis",
    "cross_entropy",
    "kl_divergence",
    "max_last_axis",
    "masked_scale",
];

fn make_case(name: &str, r: &mut ChaCha8Rng) -> Case {
    let (m, k, n) = dims(r);
    match name {
        "matmul" => Case {
            inputs: vec![gaussian(r, &[m, k]), gaussian(r, &[k, n])],
            build: Box::new(|g, v| g.matmul(v[0], v[1])),
        },
        "add" => Case {
            inputs: vec![gaussian(r, &[m, k]), gaussian(r, &[m, k])],
            build: Box::new(|g, v| g.add(v[0], v[1])),
        },
        "sub" => {
            // Alternate between same-shape and scalar right operand.
            let rhs = if r.random::<bool>() {
                gaussian(r, &[m, k])
            } else {
                Tensor::scalar(rng::normal(r))
            };
            Case {
                inputs: vec![gaussian(r, &[m, k]), rhs],
                build: Box::new(|g, v| g.sub(v[0], v[1])),
            }
        }
        "add_bias" => Case {
            inputs: vec![gaussian(r, &[m, k]), gaussian(r, &[k])],
            build: Box::new(|g, v| g.add_bias(v[0], v[1])),
        },
        "mul" => Case {
            inputs: vec![gaussian(r, &[m, k]), gaussian(r, &[m, k])],
            build: Box::new(|g, v| g.mul(v[0], v[1])),
        },
        "scalar_mul" => {
            let c = rng::normal(r);
            Case {
                inputs: vec![gaussian(r, &[m, k])],
                build: Box::new(move |g, v| Ok(g.scalar_mul(v[0], c))),
            }
        }
        "relu" => Case {
            inputs: vec![away_from_zero(r, &[m, k], 0.01)],
            build: Box::new(|g, v| Ok(g.relu(v[0]))),
        },
        "concat_last_axis" => Case {
            inputs: vec![gaussian(r, &[m, k]), gaussian(r, &[m, n]), gaussian(r, &[m, 2])],
            build: Box::new(|g, v| g.concat_last_axis(v)),
        },
        "reduce_mean" => Case {
            inputs: vec![gaussian(r, &[m, k])],
            build: Box::new(|g, v| Ok(g.reduce_mean(v[0]))),
        },
        "reduce_sum" => Case {
            inputs: vec![gaussian(r, &[m, k])],
            build: Box::new(|g, v| Ok(g.reduce_sum(v[0]))),
        },
        "softmax_last_axis" => Case {
            inputs: vec![gaussian(r, &[m, k])],
            build: Box::new(|g, v| g.softmax_last_axis(v[0])),
        },
        "log_softmax_last_axis" => Case {
            inputs: vec![gaussian(r, &[m, k])],
            build: Box::new(|g, v| g.log_softmax_last_axis(v[0])),
        },
        "layer_norm_last_axis" => Case {
            inputs: vec![gaussian(r, &[m, k + 1])],
            build: Box::new(|g, v| g.layer_norm_last_axis(v[0], 1e-5)),
        },
        "cross_entropy" => {
            let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..k)).collect();
            Case {
                inputs: vec![gaussian(r, &[m, k])],
                build: Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
            }
        }
        "kl_divergence" => Case {
            inputs: vec![probabilities(r, m, k), probabilities(r, m, k)],
            build: Box::new(|g, v| g.kl_divergence(v[0], v[1])),
        },
        "max_last_axis" => Case {
            inputs: vec![clear_max(r, m, k, 0.01)],
            build: Box::new(|g, v| g.max_last_axis(v[0])),
        },
        "masked_scale" => {
            let gate = if r.random::<bool>() { 1.0 } else { 0.0 };
            Case {
                inputs: vec![gaussian(r, &[m, k])],
                build: Box::new(move |g, v| g.masked_scale(v[0], gate)),
            }
        }
        _ => unreachable!("unknown primitive {name}"),
    }
}

/// Compares analytic and central-difference gradients for every primitive
/// over `cases` random inputs each.
pub fn check_primitives(cases: usize, seed: u64) -> Result<Vec<PrimitiveReport>> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut r = rng::rng(derive_seed(seed, i as u64));
            let mut worst: f64 = 0.0;
            for _ in 0..cases {
                let case = make_case(name, &mut r);
                worst = worst.max(case_error(&case, &mut r)?);
            }
            Ok(PrimitiveReport {
                name,
                cases,
                max_rel_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(alloc::vec![3.0]).unwrap();
        let g = finite_difference_gradient(|p| Ok(p.data()[0] * p.data()[0]), &x, 1e-4).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_gradient(|p| Ok(p.item()), &x, 0.0).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
