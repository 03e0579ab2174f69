use east::grid::Grid;
use east::losses::{angle_loss, balance_factor, balanced_xent, iou_loss, quad_loss_coords};
use proptest::prelude::*;
use std::f64::consts::{FRAC_PI_4, PI};

fn distances() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(0.1..50.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn beta_is_a_fraction(bits in prop::collection::vec(any::<bool>(), 1..64)) {
        let gt = Grid::from_vec(1, bits.len(), bits.iter().map(|&b| b as u8 as f64).collect());
        let beta = balance_factor(&gt);
        prop_assert!((0.0..=1.0).contains(&beta));
        let positives = bits.iter().filter(|&&b| b).count() as f64;
        prop_assert!((beta - (1.0 - positives / bits.len() as f64)).abs() < 1e-12);
    }

    #[test]
    fn xent_is_non_negative(
        cells in prop::collection::vec((any::<bool>(), 0.0..1.0f64), 1..32),
    ) {
        let gt = Grid::from_vec(1, cells.len(), cells.iter().map(|c| c.0 as u8 as f64).collect());
        let pred = Grid::from_vec(1, cells.len(), cells.iter().map(|c| c.1).collect());
        prop_assert!(balanced_xent(&pred, &gt, 1e-7).unwrap().loss >= 0.0);
    }

    #[test]
    fn iou_loss_is_non_negative(a in distances(), b in distances()) {
        prop_assert!(iou_loss(&a, &b, 1e-9).unwrap().loss >= 0.0);
    }

    #[test]
    fn iou_loss_vanishes_on_exact_match(a in distances()) {
        prop_assert!(iou_loss(&a, &a, 1e-9).unwrap().loss.abs() < 1e-12);
    }

    #[test]
    fn iou_loss_is_scale_invariant(a in distances(), b in distances(), k in prop::sample::select(vec![0.1, 7.0, 1000.0])) {
        let base = iou_loss(&a, &b, 1e-12).unwrap().loss;
        let scaled = iou_loss(&a.map(|v| v * k), &b.map(|v| v * k), 1e-12).unwrap().loss;
        prop_assert!((base - scaled).abs() < 1e-9, "{} vs {}", base, scaled);
    }

    #[test]
    fn angle_loss_is_symmetric_and_periodic(a in -FRAC_PI_4..FRAC_PI_4, b in -FRAC_PI_4..FRAC_PI_4, k in -3i32..3) {
        let (l, _) = angle_loss(a, b);
        prop_assert!((l - angle_loss(b, a).0).abs() < 1e-12);
        prop_assert!((l - angle_loss(a + 2.0 * PI * k as f64, b).0).abs() < 1e-9);
        prop_assert!((0.0..=2.0).contains(&l));
    }

    #[test]
    fn quad_loss_ignores_where_the_target_starts(
        q_hat in prop::array::uniform8(-50.0..50.0f64),
        q_star in prop::array::uniform8(-50.0..50.0f64),
        shift in 0usize..4,
        n in 1.0..40.0f64,
    ) {
        let rotated: [f64; 8] = std::array::from_fn(|i| q_star[(i + 2 * shift) % 8]);
        let a = quad_loss_coords(&q_hat, &q_star, n).unwrap().loss;
        let b = quad_loss_coords(&q_hat, &rotated, n).unwrap().loss;
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }
}
