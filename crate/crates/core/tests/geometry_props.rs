mod common;

use common::{convex_quad, rect, rotated_rect};
use east::geometry::{
    convex_intersection_area, min_area_rect, polygon_area, quad_iou, rbox_to_quad, Point, Quad, RBoxGeom,
};
use proptest::prelude::*;

fn perpendicular(o: Point, a: Point, b: Point) -> f64 {
    ((b - a).cross(o - a) / (b - a).norm()).abs()
}

/// Smallest bounding-box area over a sweep of rotations.
fn sweep_area(q: &Quad) -> f64 {
    let mut best = f64::INFINITY;
    let mut phi = 0.0;
    while phi < std::f64::consts::FRAC_PI_2 {
        let pts = q.points().map(|p| p.rotate(-phi));
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().map(|p| (p.x, p.y)).unzip();
        let span = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        best = best.min(span(&xs) * span(&ys));
        phi += 0.001;
    }
    best
}

proptest! {
    #[test]
    fn iou_with_itself_is_one(q in convex_quad()) {
        prop_assert!((quad_iou(&q, &q).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric(a in convex_quad(), b in convex_quad()) {
        let ab = quad_iou(&a, &b).unwrap();
        let ba = quad_iou(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn intersection_is_bounded_by_both_areas(a in convex_quad(), b in convex_quad()) {
        let inter = convex_intersection_area(&a, &b).unwrap();
        prop_assert!(inter <= a.area().min(b.area()) + 1e-9);
    }

    #[test]
    fn rbox_distances_round_trip(
        o in (0.0..100.0f64, 0.0..100.0f64),
        d in prop::array::uniform4(0.5..40.0f64),
        theta in -0.78..0.78f64,
    ) {
        let origin = Point::new(o.0, o.1);
        for theta in [0.0, theta] {
            let q = rbox_to_quad(origin, &RBoxGeom { d, theta }).unwrap();
            let p = q.points();
            for k in 0..4 {
                prop_assert!((perpendicular(origin, p[k], p[(k + 1) % 4]) - d[k]).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn min_rect_encloses_at_least_the_polygon_area(q in convex_quad()) {
        let r = min_area_rect(&q).unwrap();
        prop_assert!(r.quad.area() >= polygon_area(q.points()) * (1.0 - 1e-12));
    }

    #[test]
    fn min_rect_of_a_rectangle_is_itself(q in rotated_rect()) {
        let r = min_area_rect(&q).unwrap();
        prop_assert!((r.quad.area() - q.area()).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn min_rect_matches_a_rotation_sweep(q in convex_quad()) {
        let calipers = min_area_rect(&q).unwrap().quad.area();
        let sweep = sweep_area(&q);
        prop_assert!(calipers <= sweep * (1.0 + 1e-9));
        prop_assert!((sweep - calipers) / calipers < 1e-3);
    }
}

#[test]
fn sweep_agrees_on_an_axis_aligned_box() {
    let q = rect(Point::new(10.0, 10.0), 8.0, 2.0, 0.0);
    assert!((sweep_area(&q) - 16.0).abs() < 1e-9);
}
