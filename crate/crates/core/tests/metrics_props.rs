use atlas_replay::metrics::{bwt, confusion_metrics, dice, fwt, ConfusionCounts, DiceMatrix};
use atlas_replay::Grid;
use proptest::prelude::*;

fn matrix_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (2usize..7).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(0.0f64..=1.0, n), n),
            prop::collection::vec(0.0f64..=1.0, n),
        )
    })
}

fn mask_strategy(len: usize) -> impl Strategy<Value = Grid> {
    prop::collection::vec(prop::bool::ANY, len)
        .prop_map(move |b| Grid::new(1, len, b.into_iter().map(|v| v as u8 as f32).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bwt_matches_brute_force((d, _) in matrix_strategy()) {
        let n = d.len();
        let m = DiceMatrix::new(d.clone(), None).unwrap();
        let got = bwt(&m).unwrap();
        let mut sum = 0.0;
        for p in 1..n {
            let term = d[n - 1][p - 1] - d[p - 1][p - 1];
            let (idx, v) = got.per_task[p - 1];
            prop_assert_eq!(idx, p);
            prop_assert!((v - term).abs() < 1e-7);
            sum += term;
        }
        prop_assert!((got.mean - sum / (n - 1) as f64).abs() < 1e-7);
    }

    #[test]
    fn fwt_matches_brute_force((d, s) in matrix_strategy()) {
        let n = d.len();
        let m = DiceMatrix::new(d.clone(), Some(s.clone())).unwrap();
        let got = fwt(&m).unwrap();
        let mut sum = 0.0;
        for p in 2..=n {
            let term = d[p - 2][p - 1] - s[p - 1];
            let (idx, v) = got.per_task[p - 2];
            prop_assert_eq!(idx, p);
            prop_assert!((v - term).abs() < 1e-7);
            sum += term;
        }
        prop_assert!((got.mean - sum / (n - 1) as f64).abs() < 1e-7);
    }

    #[test]
    fn constant_columns_mean_no_forgetting(v in prop::collection::vec(0.0f64..=1.0, 2..6)) {
        let n = v.len();
        let d = vec![v.clone(); n];
        let m = DiceMatrix::new(d, Some(v)).unwrap();
        prop_assert_eq!(bwt(&m).unwrap().mean, 0.0);
        prop_assert_eq!(fwt(&m).unwrap().mean, 0.0);
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in mask_strategy(40), b in mask_strategy(40)) {
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn dice_ignores_pixel_order(a in mask_strategy(30), b in mask_strategy(30), rot in 0usize..30) {
        let rotate = |g: &Grid| {
            let mut v = g.data().to_vec();
            v.rotate_left(rot);
            Grid::new(1, v.len(), v).unwrap()
        };
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&rotate(&a), &rotate(&b)).unwrap());
    }

    #[test]
    fn rates_stay_in_range(tp in 0u64..50, tn in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
        let r = confusion_metrics(&ConfusionCounts { tp, tn, fp, fn_ });
        for v in [r.sensitivity, r.specificity, r.precision].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let Some(m) = r.mcc {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&m));
        }
    }
}

#[test]
fn mcc_fixture() {
    let r = confusion_metrics(&ConfusionCounts { tp: 3, tn: 5, fp: 1, fn_: 1 });
    // (15 - 1) / sqrt(4 * 4 * 6 * 6) = 14 / 24
    assert!((r.mcc.unwrap() - 0.583_333_333).abs() < 1e-6);
    assert_eq!(r.sensitivity, Some(0.75));
    assert_eq!(r.precision, Some(0.75));
    assert!((r.specificity.unwrap() - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn perfect_and_inverted_classifiers() {
    let perfect = confusion_metrics(&ConfusionCounts { tp: 4, tn: 6, fp: 0, fn_: 0 });
    assert_eq!(perfect.mcc, Some(1.0));
    let inverted = confusion_metrics(&ConfusionCounts { tp: 0, tn: 0, fp: 6, fn_: 4 });
    assert_eq!(inverted.mcc, Some(-1.0));
    let wrong = confusion_metrics(&ConfusionCounts { tp: 0, tn: 0, fp: 3, fn_: 3 });
    assert_eq!(wrong.sensitivity, Some(0.0));
}

#[test]
fn dice_rejects_shape_mismatch() {
    assert!(dice(&Grid::zeros(2, 3), &Grid::zeros(3, 2)).is_err());
}
