use num_bigint::BigInt;
use num_rational::BigRational;
use proptest::prelude::*;

use droplet_core::{escape_sequence, prohorov_distance, FloatMeasure, Measure};

fn normalized(weights: Vec<u32>) -> FloatMeasure {
    let total: f64 = weights.iter().map(|&w| w as f64 + 1.0).sum();
    FloatMeasure::from_entries(
        1,
        weights
            .iter()
            .enumerate()
            .map(|(i, &w)| (i as u64 + 1, (w as f64 + 1.0) / total)),
    )
    .unwrap()
}

proptest! {
    // the ball statements lean on this being a metric
    #[test]
    fn prohorov_satisfies_the_triangle_inequality(
        a in prop::collection::vec(0u32..50, 4),
        b in prop::collection::vec(0u32..50, 4),
        c in prop::collection::vec(0u32..50, 4),
    ) {
        let (a, b, c) = (normalized(a), normalized(b), normalized(c));
        let ab = prohorov_distance(&a, &b);
        let bc = prohorov_distance(&b, &c);
        let ac = prohorov_distance(&a, &c);
        prop_assert!(ac <= ab + bc + 1e-12);
        prop_assert!(prohorov_distance(&a, &a) == 0.0);
        prop_assert!((ab - prohorov_distance(&b, &a)).abs() < 1e-15);
    }

    // blending toward a far atom must keep the first moment exactly on c
    #[test]
    fn escape_blend_preserves_the_mean_exactly(
        w1 in 1u32..20,
        w2 in 1u32..20,
        far in 8u64..200,
    ) {
        let total = i64::from(w1 + w2);
        let theta = Measure::from_entries(1, [
            (1, BigRational::new(BigInt::from(w1), BigInt::from(total))),
            (2, BigRational::new(BigInt::from(w2), BigInt::from(total))),
        ]).unwrap();
        let c = BigRational::new(BigInt::from(5), BigInt::from(2));
        let blended = escape_sequence(&theta, &c, far).unwrap();
        prop_assert_eq!(blended.mean(), c);
        let ones: BigRational = blended.entries().values().sum();
        prop_assert_eq!(ones, BigRational::from_integer(BigInt::from(1)));
    }
}
