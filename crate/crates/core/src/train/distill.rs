use crate::error::{Error, Result};
use crate::graph::{kl_term, Graph, Var};
use crate::math;
use crate::tensor::Tensor;

/// Every row must be non-negative and sum to one within `1e-6`.
pub fn validate_probabilities(p: &Tensor) -> Result<()> {
    for (row, vals) in p.data().chunks(p.last_dim()).enumerate() {
        let sum: f64 = vals.iter().sum();
        if vals.iter().any(|&v| !(v >= 0.0)) || math::abs(sum - 1.0) > 1e-6 {
            return Err(Error::InvalidDistribution { row, sum });
        }
    }
    Ok(())
}

fn batch_kl(p: &Tensor, q: &Tensor) -> Result<f64> {
    if !p.same_shape(q) {
        return Err(Error::ShapeMismatch {
            op: crate::graph::OpKind::KlDivergence,
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let total: f64 = p.data().iter().zip(q.data()).map(|(&a, &b)| kl_term(a, b)).sum();
    Ok(total / p.rows() as f64)
}

/// `KL(p_teacher || p_fused) + sum_m KL(p_teacher || p_uni_m)`, each term
/// averaged over the batch.
pub fn distillation_loss(teacher: &Tensor, fused: &Tensor, uni: &[Tensor]) -> Result<f64> {
    validate_probabilities(teacher)?;
    validate_probabilities(fused)?;
    let mut total = batch_kl(teacher, fused)?;
    for p in uni {
        validate_probabilities(p)?;
        total += batch_kl(teacher, p)?;
    }
    Ok(total)
}

/// Graph form of [`distillation_loss`]. `teacher` should be a constant so
/// no gradient reaches the teacher.
///
/// Returns `(total, fused term)`.
pub fn distillation_loss_var(g: &mut Graph, teacher: Var, fused: Var, uni: &[Var]) -> Result<(Var, Var)> {
    let first = g.kl_divergence(teacher, fused)?;
    let mut total = first;
    for &p in uni {
        let term = g.kl_divergence(teacher, p)?;
        total = g.add(total, term)?;
    }
    Ok((total, first))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn identical_distributions_give_zero() {
        let p = row(&[0.2, 0.3, 0.5]);
        assert_eq!(distillation_loss(&p, &p, &[p.clone(), p.clone()]).unwrap(), 0.0);
    }

    #[test]
    fn documented_two_class_case() {
        let t = row(&[1.0, 0.0]);
        let s = row(&[0.5, 0.5]);
        let v = distillation_loss(&t, &s, core::slice::from_ref(&s)).unwrap();
        assert!((v - 2.0 * core::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let t = row(&[0.7, 0.7]);
        let s = row(&[0.5, 0.5]);
        assert!(matches!(
            distillation_loss(&t, &s, &[]),
            Err(Error::InvalidDistribution { row: 0, .. })
        ));
        assert!(distillation_loss(&s, &s, &[t]).is_err());
    }

    #[test]
    fn graph_form_matches_value_form() {
        let t = Tensor::matrix(2, 3, vec![0.1, 0.6, 0.3, 0.3, 0.3, 0.4]).unwrap();
        let f = Tensor::matrix(2, 3, vec![0.2, 0.5, 0.3, 0.25, 0.25, 0.5]).unwrap();
        let u = Tensor::matrix(2, 3, vec![0.3, 0.3, 0.4, 0.1, 0.8, 0.1]).unwrap();
        let mut g = Graph::new();
        let (tv, fv, uv) = (g.constant(t.clone()), g.param(f.clone()), g.param(u.clone()));
        let (total, first) = distillation_loss_var(&mut g, tv, fv, &[uv]).unwrap();
        let expect = distillation_loss(&t, &f, core::slice::from_ref(&u)).unwrap();
        assert!((g.value(total).item() - expect).abs() < 1e-15);
        assert!((g.value(first).item() - distillation_loss(&t, &f, &[]).unwrap()).abs() < 1e-15);
    }
}
