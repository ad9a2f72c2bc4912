use proptest::prelude::*;
use ridgepoison::mnist::{labels_to_bytes, parse_idx_images, parse_idx_labels, IdxImages};
use ridgepoison::sweep::{aggregate, ColumnSummary, EmpiricalColumn};
use ridgepoison::theory::{alignment_coefficient, predict, predict_ridgeless};
use ridgepoison::{Centering, ModelParams, SimShape, SweepRecord};

fn params() -> impl Strategy<Value = ModelParams> {
    (0.05f64..3.0, 1e-3f64..5.0, 0.0f64..=1.0, 0.0f64..5.0)
        .prop_map(|(c, lambda, theta, v_norm)| ModelParams::new(c, lambda, theta, v_norm).unwrap())
}

proptest! {
    #[test]
    fn mean_nonnegative_and_proportional(p in params()) {
        let t = predict(&p).unwrap();
        prop_assert!(t.mu >= 0.0);
        prop_assert!(t.sigma_sq >= 0.0);
        prop_assert!((0.5..=1.0).contains(&t.eta));
        let c = alignment_coefficient(&p).unwrap();
        prop_assert!((t.mu - c * p.v_norm * p.v_norm).abs() <= 1e-14 * t.mu.abs().max(1e-300));
    }

    #[test]
    fn zero_poison_or_trigger_gives_zero_mean(p in params()) {
        let mut a = p;
        a.theta = 0.0;
        prop_assert_eq!(predict(&a).unwrap().mu, 0.0);
        let mut b = p;
        b.v_norm = 0.0;
        prop_assert_eq!(predict(&b).unwrap().mu, 0.0);
    }

    #[test]
    fn ridgeless_limit(c in 0.05f64..0.8, theta in 0.01f64..0.3, v in 0.1f64..3.0) {
        let p = ModelParams::new(c, 1e-8, theta, v).unwrap();
        let reg = predict(&p).unwrap();
        let lim = predict_ridgeless(&p).unwrap();
        prop_assert!((reg.mu - lim.mu).abs() <= 1e-3 * lim.mu);
        prop_assert!((reg.sigma_sq - lim.sigma_sq).abs() <= 1e-3 * lim.sigma_sq);
    }

    #[test]
    fn quartiles_are_ordered(values in prop::collection::vec(-1e6f64..1e6, 1..200)) {
        let s = ColumnSummary::of(&values);
        prop_assert!(s.q25 <= s.median && s.median <= s.q75);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= s.q25 && s.q75 <= hi);
        prop_assert!(lo <= s.mean + 1e-6 && s.mean <= hi + 1e-6);
    }

    #[test]
    fn aggregate_excludes_error_rows(mus in prop::collection::vec(-5.0f64..5.0, 2..40), bad in 0usize..40) {
        let params = ModelParams::defaults();
        let shape = SimShape::new(10, 100, 0).unwrap();
        let pred = predict(&params).unwrap();
        let mut recs: Vec<SweepRecord> = mus.iter().enumerate().map(|(t, &mu)| {
            let mut r = SweepRecord::from_parts(&params, &shape, &pred, Centering::Population);
            r.trial_index = t;
            r.mu_emp = mu;
            r
        }).collect();
        let bad = bad % recs.len();
        recs[bad].status = "error: injected".into();
        let rows = aggregate(&recs).unwrap();
        prop_assert_eq!(rows.len(), 1);
        prop_assert_eq!(rows[0].trials, mus.len() - 1);
        prop_assert_eq!(rows[0].error_rows, 1);
        let kept: Vec<f64> = mus.iter().enumerate().filter(|(i, _)| *i != bad).map(|(_, m)| *m).collect();
        prop_assert_eq!(rows[0].summary(EmpiricalColumn::Mu), ColumnSummary::of(&kept));
    }

    #[test]
    fn idx_round_trip(count in 0usize..5, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..count * rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
        let img = IdxImages { count, rows, cols, pixels };
        let bytes = img.to_bytes();
        let parsed = parse_idx_images(&bytes).unwrap();
        prop_assert_eq!(parsed.to_bytes(), bytes);
        let labels: Vec<u8> = (0..count).map(|i| (i % 10) as u8).collect();
        let lb = labels_to_bytes(&labels);
        prop_assert_eq!(parse_idx_labels(&lb).unwrap(), labels);
    }
}
