#![allow(dead_code)]

use std::f64::consts::{FRAC_PI_4, PI};

use east::geometry::{Point, Quad};
use proptest::prelude::*;

pub fn rect(center: Point, w: f64, h: f64, theta: f64) -> Quad {
    let pts = [(-w, -h), (w, -h), (w, h), (-w, h)].map(|(x, y)| center + Point::new(x / 2.0, y / 2.0).rotate(theta));
    Quad::new(pts).expect("positive sides")
}

/// Rotated rectangles that fit well inside a 128 x 128 image.
pub fn rotated_rect() -> impl Strategy<Value = Quad> {
    (40.0..88.0f64, 40.0..88.0f64, 8.0..56.0f64, 1.0..6.0f64, -FRAC_PI_4..FRAC_PI_4)
        .prop_map(|(x, y, long, aspect, theta)| rect(Point::new(x, y), long, long / aspect, theta))
}

/// Convex quads: four points on a circle at well-separated angles, then
/// stretched and rotated.
pub fn convex_quad() -> impl Strategy<Value = Quad> {
    (
        prop::array::uniform4(0.4..2.0f64),
        0.0..(2.0 * PI),
        (5.0..30.0f64, 0.3..1.0f64),
        -PI..PI,
        (40.0..88.0f64, 40.0..88.0f64),
    )
        .prop_map(|(gaps, start, (r, squash), rot, (cx, cy))| {
            let total: f64 = gaps.iter().sum();
            let mut a = start;
            let pts = gaps.map(|g| {
                let p = Point::new(r * a.cos(), r * squash * a.sin()).rotate(rot);
                a += g / total * 2.0 * PI;
                Point::new(cx, cy) + p
            });
            Quad::new(pts).expect("points on a convex curve in angular order")
        })
}

/// Rectangles wide enough that their shrunk core always covers a cell.
pub fn roundtrip_rect() -> impl Strategy<Value = Quad> {
    (50.0..78.0f64, 50.0..78.0f64, 14.0..30.0f64, 1.0..3.0f64, -FRAC_PI_4..FRAC_PI_4)
        .prop_map(|(x, y, short, aspect, theta)| rect(Point::new(x, y), short * aspect, short, theta))
}
