use std::path::Path;

use mbcd_lab::config::ExperimentConfig;
use mbcd_lab::table::{mean_std, num, Table};
use proptest::prelude::*;

proptest! {
    #[test]
    fn numbers_round_trip_bitwise(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        let back: f64 = num(v).parse().unwrap();
        if v.is_nan() {
            prop_assert!(back.is_nan());
        } else {
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn tables_round_trip(rows in prop::collection::vec(prop::collection::vec("[a-z0-9 ,\"_.-]{0,8}", 3), 0..6)) {
        let mut t = Table::new(["a", "b", "c"]);
        for r in rows {
            t.push(r);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        t.save(&path).unwrap();
        prop_assert_eq!(Table::load(&path).unwrap(), t);
    }

    #[test]
    fn std_is_shift_invariant(v in prop::collection::vec(-1e3f64..1e3, 2..10), shift in -1e3f64..1e3) {
        let (m0, s0) = mean_std(&v);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let (m1, s1) = mean_std(&shifted);
        prop_assert!((m1 - m0 - shift).abs() < 1e-9);
        prop_assert!((s1 - s0).abs() < 1e-9);
        prop_assert!(s0 >= 0.0);
    }

    #[test]
    fn overrides_set_scalar_fields(lambda in 0.0f64..10.0, epochs in 1usize..50) {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[format!("mbcd.lambda={}", num(lambda)), format!("mbcd.epochs={epochs}")])
            .unwrap();
        prop_assert_eq!(cfg.mbcd.lambda, lambda);
        prop_assert_eq!(cfg.mbcd.epochs, epochs);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("x")).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
