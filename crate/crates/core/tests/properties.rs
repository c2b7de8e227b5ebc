use mbcd_core::graph::{kl_term, Graph};
use mbcd_core::model::{init_params, ModelConfig, DEFAULT_LN_EPS};
use mbcd_core::rng;
use mbcd_core::train::{confidence_scores, distillation_loss, drop_probabilities, ema_update, relative_speed, sample_dropout_mask};
use mbcd_core::Tensor;
use proptest::prelude::*;

fn rows(m: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-20.0f64..20.0, m * c).prop_map(move |d| Tensor::matrix(m, c, d).unwrap())
}

fn softmax(t: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let p = g.softmax_last_axis(v).unwrap();
    g.value(p).clone()
}

/// Independent scalar form of the confidence score: the batch sum of the
/// largest softmax probability, computed by plain exponentiation.
fn confidence_oracle(logits: &[f64], cols: usize) -> f64 {
    logits
        .chunks(cols)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().cloned().fold(0.0, f64::max) / z
        })
        .sum()
}

fn speed_oracle(s: &[f64]) -> Vec<f64> {
    let m = s.len();
    (0..m)
        .map(|k| {
            let mut acc = 0.0;
            for j in 0..m {
                if j != k {
                    acc += s[k] / s[j];
                }
            }
            acc / (m as f64 - 1.0)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_rows_are_distributions(x in (1usize..5, 2usize..7).prop_flat_map(|(m, c)| rows(m, c))) {
        let p = softmax(&x);
        for i in 0..p.rows() {
            let r = p.row(i);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative(a in rows(3, 4), b in rows(3, 4)) {
        let (p, q) = (softmax(&a), softmax(&b));
        let mut g = Graph::new();
        let (pv, qv) = (g.constant(p.clone()), g.constant(q.clone()));
        let kl = g.kl_divergence(pv, qv).unwrap();
        // The log floor on q can make tiny probabilities contribute -1e-14.
        prop_assert!(g.value(kl).item() >= -1e-12);
        let self_kl: f64 = p.data().iter().map(|&v| kl_term(v, v)).sum();
        prop_assert!(self_kl.abs() < 1e-12);
    }

    #[test]
    fn confidence_matches_scalar_oracle(
        (m, x) in (1usize..17, 2usize..9).prop_flat_map(|(b, c)| (Just(c), rows(b, c)))
    ) {
        let s = confidence_scores(std::slice::from_ref(&x)).unwrap()[0];
        prop_assert!((s - confidence_oracle(x.data(), m)).abs() < 1e-12);
        let b = x.rows() as f64;
        prop_assert!(s > b / m as f64 - 1e-12 && s <= b + 1e-12);
    }

    #[test]
    fn relative_speed_matches_oracle(s in prop::collection::vec(0.01f64..50.0, 2..6)) {
        let r = relative_speed(&s).unwrap();
        for (a, b) in r.iter().zip(speed_oracle(&s)) {
            prop_assert!((a - b).abs() < 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn relative_speed_is_permutation_equivariant(s in prop::collection::vec(0.01f64..50.0, 2..6), rot in 0usize..5) {
        let mut p = s.clone();
        let k = rot % s.len();
        p.rotate_left(k);
        let mut r = relative_speed(&s).unwrap();
        r.rotate_left(k);
        let rp = relative_speed(&p).unwrap();
        for (a, b) in r.iter().zip(&rp) {
            prop_assert!((a - b).abs() < 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn least_confident_modality_is_never_dropped(s in prop::collection::vec(0.01f64..50.0, 2..5)) {
        let r = relative_speed(&s).unwrap();
        let p = drop_probabilities(&r);
        let k = (0..s.len()).min_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        prop_assert_eq!(p[k], 0.0);
        // tanh saturates to exactly 1.0 for large speed ratios.
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if s.len() == 2 {
            prop_assert!(p.iter().filter(|&&v| v > 0.0).count() <= 1);
        }
        let mut g = rng::rng(s.len() as u64);
        for _ in 0..20 {
            prop_assert_eq!(sample_dropout_mask(&r, &mut g)[k], 1.0);
        }
    }

    #[test]
    fn drop_probability_is_monotone(a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let p = drop_probabilities(&[a, b]);
        if a <= b {
            prop_assert!(p[0] <= p[1]);
        }
        if a <= 1.0 {
            prop_assert_eq!(p[0], 0.0);
        }
    }

    #[test]
    fn distillation_is_non_negative(t in rows(4, 3), f in rows(4, 3), u in prop::collection::vec(rows(4, 3), 1..4)) {
        let uni: Vec<Tensor> = u.iter().map(softmax).collect();
        let l = distillation_loss(&softmax(&t), &softmax(&f), &uni).unwrap();
        prop_assert!(l >= -1e-15);
    }
}

#[test]
fn drop_frequency_matches_probability() {
    let r = [2.0, 0.5];
    let mut g = rng::rng(77);
    let n = 10_000;
    let mut dropped = [0usize; 2];
    for _ in 0..n {
        let mask = sample_dropout_mask(&r, &mut g);
        for k in 0..2 {
            if mask[k] == 0.0 {
                dropped[k] += 1;
            }
        }
    }
    let p = 1f64.tanh();
    let freq = dropped[0] as f64 / n as f64;
    assert!((freq - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "{freq}");
    assert_eq!(dropped[1], 0);
}

#[test]
fn distillation_is_zero_only_for_equal_distributions() {
    let p = Tensor::matrix(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]).unwrap();
    assert_eq!(distillation_loss(&p, &p, &[p.clone(), p.clone()]).unwrap(), 0.0);
    let mut q = p.clone();
    q.data_mut()[0] = 0.25;
    q.data_mut()[1] = 0.25;
    assert!(distillation_loss(&p, &p, &[p.clone(), q.clone()]).unwrap() > 0.0);
    assert!(distillation_loss(&p, &q, std::slice::from_ref(&p)).unwrap() > 0.0);
    let t = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let h = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
    let v = distillation_loss(&t, &h, std::slice::from_ref(&h)).unwrap();
    assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn ema_matches_closed_form_after_100_steps() {
    let cfg = ModelConfig {
        input_dims: vec![3, 2],
        hidden_dims: vec![4, 3],
        feature_dims: vec![2, 2],
        num_classes: 3,
        init_seed: 1,
        ln_eps: DEFAULT_LN_EPS,
    };
    for beta in [0.0, 0.9, 0.999] {
        let mut student = init_params(&cfg).unwrap();
        let mut teacher = student.fused();
        let theta0 = teacher.flatten();
        let mut history = Vec::new();
        let mut g = rng::rng(5);
        for _ in 0..100 {
            for (_, t) in student.named_mut() {
                t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng::normal(&mut g));
            }
            history.push(student.fused().flatten());
            ema_update(&mut teacher, &student, beta).unwrap();
        }
        let t = history.len();
        let closed: Vec<f64> = (0..theta0.len())
            .map(|j| {
                let mut v = beta.powi(t as i32) * theta0[j];
                for (i, h) in history.iter().enumerate() {
                    v += (1.0 - beta) * beta.powi((t - 1 - i) as i32) * h[j];
                }
                v
            })
            .collect();
        let worst = teacher
            .flatten()
            .iter()
            .zip(&closed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-10, "beta {beta}: {worst:e}");
    }
}
