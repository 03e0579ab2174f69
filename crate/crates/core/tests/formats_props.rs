use east::formats::{format_quad_file, parse_quad_file, QuadRecord, TensorFile};
use proptest::prelude::*;

fn record() -> impl Strategy<Value = QuadRecord> {
    (prop::array::uniform8(-1e4..1e4f64), prop::option::of(0.0..1e3f64)).prop_map(|(c, s)| QuadRecord {
        coords: c.map(|v| (v * 1e3).round() / 1e3),
        score: s.map(|v| (v * 1e6).round() / 1e6),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn quad_files_round_trip(records in prop::collection::vec(record(), 10_000)) {
        let parsed = parse_quad_file(&format_quad_file(&records)).unwrap();
        prop_assert_eq!(parsed.len(), records.len());
        for (a, b) in parsed.iter().zip(&records) {
            for (x, y) in a.coords.iter().zip(&b.coords) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            match (a.score, b.score) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-6),
                (None, None) => {}
                _ => prop_assert!(false, "score presence changed"),
            }
        }
    }
}

proptest! {
    #[test]
    fn tensors_round_trip_and_reject_truncation(
        dims in prop::collection::vec(1usize..5, 1..4),
        cut in 1usize..8,
    ) {
        let n: usize = dims.iter().product();
        let t = TensorFile::new(dims, (0..n).map(|i| i as f32 * 0.25 - 1.0).collect());
        let bytes = t.encode();
        prop_assert_eq!(TensorFile::decode(&bytes).unwrap(), t);
        prop_assert!(TensorFile::decode(&bytes[..bytes.len() - cut.min(bytes.len())]).is_err());
    }
}

#[test]
fn malformed_lines_are_rejected() {
    for bad in ["1,2,3,4,5,6,7", "1,2,3,4,5,6,7,x", "1,2,3,4,5,6,7,8,9,10"] {
        assert!(parse_quad_file(bad).is_err(), "{bad}");
    }
}
