use mdacl_core::hcg::{
    correlation, loss_da, loss_distill, loss_rw, loss_struct, reproject, scale_factor, w_sem, DistillWeights,
    QKProjection,
};
use mdacl_core::{FeatureMap, Matrix};
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=4, 2usize..=8, 2usize..=8)
}

fn map_of((c, h, w): (usize, usize, usize), r: f64) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(-r..r, c * h * w).prop_map(move |d| FeatureMap::new(c, h, w, d).unwrap())
}

fn pair() -> impl Strategy<Value = (FeatureMap, FeatureMap)> {
    shape().prop_flat_map(|s| (map_of(s, 2.0), map_of(s, 2.0)))
}

fn projection(c: usize) -> impl Strategy<Value = QKProjection> {
    (1..=c).prop_flat_map(move |d| {
        let m = move || prop::collection::vec(-2.0f64..2.0, d * c).prop_map(move |v| Matrix::new(d, c, v).unwrap());
        (m(), m()).prop_map(|(q, k)| QKProjection::new(q, k).unwrap())
    })
}

fn weights() -> impl Strategy<Value = DistillWeights> {
    (0.01f64..2.0, 0.01f64..2.0, 0.01f64..2.0).prop_map(|(a, b, g)| DistillWeights::new(a, b, g).unwrap())
}

fn per_channel_bounds(f: &FeatureMap) -> Vec<(f64, f64)> {
    (0..f.channels())
        .map(|c| {
            let ch = f.channel(c);
            (ch.iter().copied().fold(f64::INFINITY, f64::min), ch.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn correlation_rows_sum_to_one(
        (f_non, f_dom, proj) in pair().prop_flat_map(|(a, b)| {
            let c = a.channels();
            (Just(a), Just(b), projection(c))
        })
    ) {
        let corr = correlation(&f_non, &f_dom, &proj).unwrap();
        prop_assert_eq!(corr.shape(), (f_non.pixels(), f_non.pixels()));
        for r in 0..corr.rows() {
            let s: f64 = corr.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12, "row {r} sums to {s}");
            prop_assert!(corr.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn reproject_stays_within_channel_bounds(
        (f_non, f_dom, proj) in pair().prop_flat_map(|(a, b)| {
            let c = a.channels();
            (Just(a), Just(b), projection(c))
        })
    ) {
        let out = reproject(&correlation(&f_non, &f_dom, &proj).unwrap(), &f_non).unwrap();
        for (c, (lo, hi)) in per_channel_bounds(&f_non).into_iter().enumerate() {
            for &v in out.channel(c) {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn losses_vanish_when_student_equals_teacher(f in shape().prop_flat_map(|s| map_of(s, 2.0)), w in weights()) {
        prop_assert_eq!(loss_rw(&f, &f).unwrap().0, 0.0);
        prop_assert_eq!(loss_struct(&f, &f).unwrap().0, 0.0);
        prop_assert!(loss_da(&f, &f).unwrap().0.abs() <= 1e-12);
        let d = loss_distill(&f, &f, &w).unwrap();
        prop_assert!(d.loss.abs() <= 1e-12 * w.beta.max(1.0));
    }

    #[test]
    fn losses_positive_for_distinct_features((s, t) in pair(), w in weights()) {
        prop_assume!(s != t);
        prop_assert!(loss_rw(&s, &t).unwrap().0 > 0.0);
        prop_assert!(loss_distill(&s, &t, &w).unwrap().loss > 0.0);
        // Cosine and gradient-magnitude terms only see direction and roughness.
        let da = loss_da(&s, &t).unwrap().0;
        prop_assert!(da > 0.0 || s.channels() == 1);
        let st = loss_struct(&s, &t).unwrap().0;
        prop_assert!(st >= 0.0);
    }

    #[test]
    fn da_is_bounded_and_scale_invariant(
        (s, t, k) in shape().prop_flat_map(|sh| {
            let (_, h, w) = sh;
            (map_of(sh, 2.0), map_of(sh, 2.0), prop::collection::vec(0.01f64..100.0, h * w))
        })
    ) {
        let base = loss_da(&s, &t).unwrap().0;
        prop_assert!((0.0..=2.0).contains(&base), "{base}");
        let n = s.pixels();
        let scaled = FeatureMap::from_fn(s.channels(), s.height(), s.width(), |c, y, x| {
            let p = y * s.width() + x;
            s.data()[c * n + p] * k[p]
        });
        let again = loss_da(&scaled, &t).unwrap().0;
        prop_assert!((base - again).abs() <= 1e-12, "{base} vs {again}");
    }

    #[test]
    fn da_of_opposite_is_two(t in shape().prop_flat_map(|s| map_of(s, 2.0))) {
        prop_assume!(t.data().iter().any(|v| v.abs() > 1e-3));
        let v = loss_da(&t.scale(-1.0), &t).unwrap().0;
        prop_assert!((v - 2.0).abs() <= 1e-12, "{v}");
    }

    #[test]
    fn scale_factor_is_decreasing_and_bounded(a in 0.0f64..700.0, b in 0.0f64..700.0) {
        prop_assume!(a < b);
        let (fa, fb) = (scale_factor(a), scale_factor(b));
        prop_assert!(fa > fb);
        prop_assert!(fa <= 1.0 && fb > 0.0);
    }

    #[test]
    fn w_sem_has_unit_mean(t in shape().prop_flat_map(|s| map_of(s, 5.0))) {
        prop_assume!(t.data().iter().any(|&v| v != 0.0));
        let w = w_sem(&t);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() <= 1e-12, "{mean}");
    }
}
