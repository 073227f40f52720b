use proptest::prelude::*;
use xgpa_core::temporal::top_k_delays;
use xgpa_core::{Tape, Tensor};

fn rows() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..7).prop_flat_map(|(r, c)| {
        (Just(r), Just(c), prop::collection::vec(-20.0f64..20.0, r * c))
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((r, c, v) in rows()) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([r, c], v).unwrap());
        let s = t.softmax(x, 1).unwrap();
        for row in t.value(s).data().chunks(c) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_a_shift((r, c, v) in rows(), shift in -50.0f64..50.0) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([r, c], v.clone()).unwrap());
        let y = t.constant(Tensor::new([r, c], v.iter().map(|a| a + shift).collect()).unwrap());
        let a = t.softmax(x, 1).unwrap();
        let b = t.softmax(y, 1).unwrap();
        prop_assert!(t.value(a).max_abs_diff(t.value(b)).unwrap() < 1e-12);
    }

    #[test]
    fn segment_softmax_normalizes_each_segment(
        v in prop::collection::vec(-10.0f64..10.0, 1..20),
        cuts in prop::collection::vec(0usize..20, 0..4),
    ) {
        let n = v.len();
        let mut offs: Vec<usize> = cuts.into_iter().map(|c| c % n).filter(|&c| c > 0).collect();
        offs.push(0);
        offs.push(n);
        offs.sort_unstable();
        offs.dedup();
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(v));
        let s = t.segment_softmax(x, &offs).unwrap();
        let d = t.value(s).data();
        for w in offs.windows(2) {
            prop_assert!((d[w[0]..w[1]].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn roll_is_a_bijection(v in prop::collection::vec(-5.0f64..5.0, 1..30), shift in 0usize..60) {
        let n = v.len();
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([1, n], v.clone()).unwrap());
        let y = t.roll(x, 1, shift).unwrap();
        let back = t.roll(y, 1, n - shift % n).unwrap();
        prop_assert_eq!(t.value(back).data(), v.as_slice());
        let mut sorted = t.value(y).data().to_vec();
        let mut orig = v.clone();
        sorted.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        prop_assert_eq!(sorted, orig);
    }

    #[test]
    fn top_k_picks_distinct_best_delays(r in prop::collection::vec(-3.0f64..3.0, 2..40), k in 1usize..6) {
        let l = r.len();
        let k = k.min(l - 1);
        let picked = top_k_delays(&r, k);
        prop_assert_eq!(picked.len(), k);
        let mut d = picked.clone();
        d.sort_unstable();
        d.dedup();
        prop_assert_eq!(d.len(), k);
        prop_assert!(picked.iter().all(|&tau| (1..=l).contains(&tau)));
        let worst = picked.iter().map(|&tau| r[tau % l]).fold(f64::INFINITY, f64::min);
        for tau in 1..=l {
            if !picked.contains(&tau) {
                prop_assert!(r[tau % l] <= worst + 1e-9 * 3.0);
            }
        }
        prop_assert_eq!(top_k_delays(&r, k), picked);
    }
}
