//! Planar primitives shared by the rest of the pipeline.
//!
//! Coordinates follow the image convention: `x` grows to the right and `y`
//! grows downward. A quad is "clockwise" when it looks clockwise on screen,
//! which is the same thing as a strictly positive shoelace sum
//! `Σ (x_i y_{i+1} - x_{i+1} y_i) / 2` computed on the raw coordinates.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::ops::{Add, Mul, Sub};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("coordinate is not finite")]
    NonFinite,
    #[error("polygon is not convex")]
    NonConvexInput,
    #[error("geometry has zero area")]
    ZeroArea,
    #[error("quad vertices are not in clockwise order")]
    NotClockwise,
    #[error("quad has coincident vertices")]
    CoincidentVertices,
    #[error("negative box distance {0}")]
    NegativeDistance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z component of the 3-D cross product.
    pub fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point) -> f64 {
        (self - other).norm()
    }

    /// Rotates about the origin by `theta` using `[[cos, -sin], [sin, cos]]`.
    pub fn rotate(self, theta: f64) -> Point {
        let (s, c) = theta.sin_cos();
        Point::new(self.x * c - self.y * s, self.x * s + self.y * c)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

/// Signed shoelace area; positive for clockwise (image convention) rings.
pub fn signed_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n).map(|i| pts[i].cross(pts[(i + 1) % n])).sum();
    0.5 * twice
}

/// Absolute shoelace area of a closed ring. Degenerate rings give 0.
pub fn polygon_area(pts: &[Point]) -> f64 {
    signed_area(pts).abs()
}

/// A text region: four vertices, clockwise on screen, strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quad {
    pts: [Point; 4],
}

impl Quad {
    pub fn new(pts: [Point; 4]) -> Result<Self, GeometryError> {
        if !pts.iter().all(|p| p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                if pts[i] == pts[j] {
                    return Err(GeometryError::CoincidentVertices);
                }
            }
        }
        let area = signed_area(&pts);
        if area == 0.0 {
            return Err(GeometryError::ZeroArea);
        }
        if area < 0.0 {
            return Err(GeometryError::NotClockwise);
        }
        Ok(Self { pts })
    }

    /// Builds a quad from `[x1, y1, x2, y2, x3, y3, x4, y4]`.
    pub fn from_coords(c: [f64; 8]) -> Result<Self, GeometryError> {
        Self::new([
            Point::new(c[0], c[1]),
            Point::new(c[2], c[3]),
            Point::new(c[4], c[5]),
            Point::new(c[6], c[7]),
        ])
    }

    /// Axis-aligned rectangle with top-left corner `(x, y)`.
    pub fn axis_aligned(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::from_coords([x, y, x + w, y, x + w, y + h, x, y + h])
    }

    pub fn points(&self) -> &[Point; 4] {
        &self.pts
    }

    pub fn coords(&self) -> [f64; 8] {
        let mut c = [0.0; 8];
        for (i, p) in self.pts.iter().enumerate() {
            c[2 * i] = p.x;
            c[2 * i + 1] = p.y;
        }
        c
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.pts)
    }

    /// Length of edge `<p_i, p_{i+1}>` for `i = 0..4`.
    pub fn edge_lengths(&self) -> [f64; 4] {
        std::array::from_fn(|i| self.pts[i].distance(self.pts[(i + 1) % 4]))
    }

    pub fn shortest_edge(&self) -> f64 {
        self.edge_lengths().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// True when every turn bends the same way as the ring orientation.
    /// Collinear triples are tolerated.
    pub fn is_convex(&self) -> bool {
        is_convex_ring(&self.pts)
    }

    /// Inclusive point-in-quad test. Only meaningful for convex quads.
    pub fn contains(&self, p: Point) -> bool {
        let scale = self.scale();
        let tol = 1e-12 * scale * scale;
        (0..4).all(|i| {
            let a = self.pts[i];
            let b = self.pts[(i + 1) % 4];
            (b - a).cross(p - a) >= -tol
        })
    }

    pub fn translate(&self, by: Point) -> Quad {
        Quad {
            pts: self.pts.map(|p| p + by),
        }
    }

    /// Same ring starting at vertex `k` instead of vertex 0.
    pub fn rotate_start(&self, k: usize) -> Quad {
        Quad {
            pts: std::array::from_fn(|i| self.pts[(i + k) % 4]),
        }
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = self.pts[0];
        let mut hi = self.pts[0];
        for p in &self.pts[1..] {
            lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        (lo, hi)
    }

    fn scale(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi.x - lo.x).max(hi.y - lo.y).max(1e-300)
    }

    pub(crate) fn from_points_unchecked(pts: [Point; 4]) -> Quad {
        Quad { pts }
    }
}

fn is_convex_ring(pts: &[Point]) -> bool {
    let n = pts.len();
    let area = signed_area(pts);
    if area == 0.0 {
        return false;
    }
    let sign = area.signum();
    let scale = pts
        .iter()
        .map(|p| p.x.abs().max(p.y.abs()))
        .fold(0.0_f64, f64::max)
        .max(1e-300);
    let tol = 1e-12 * scale * scale;
    (0..n).all(|i| {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        let c = pts[(i + 2) % n];
        sign * (b - a).cross(c - b) >= -tol
    })
}

/// Keeps the part of `subject` on the inner side of the directed line `a -> b`.
fn clip_half_plane(subject: &[Point], a: Point, b: Point) -> Vec<Point> {
    let n = subject.len();
    let mut out = Vec::with_capacity(n + 1);
    let dir = b - a;
    for i in 0..n {
        let s = subject[i];
        let e = subject[(i + 1) % n];
        let sd = dir.cross(s - a);
        let ed = dir.cross(e - a);
        let s_in = sd >= 0.0;
        let e_in = ed >= 0.0;
        if s_in != e_in {
            let t = sd / (sd - ed);
            out.push(s + (e - s) * t);
        }
        if e_in {
            out.push(e);
        }
    }
    out
}

/// Area of `a ∩ b` for convex quads, via Sutherland-Hodgman clipping.
pub fn convex_intersection_area(a: &Quad, b: &Quad) -> Result<f64, GeometryError> {
    if !a.is_convex() || !b.is_convex() {
        return Err(GeometryError::NonConvexInput);
    }
    let mut poly: Vec<Point> = a.pts.to_vec();
    for i in 0..4 {
        poly = clip_half_plane(&poly, b.pts[i], b.pts[(i + 1) % 4]);
        if poly.len() < 3 {
            return Ok(0.0);
        }
    }
    Ok(signed_area(&poly).max(0.0))
}

pub fn quad_iou(a: &Quad, b: &Quad) -> Result<f64, GeometryError> {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return Err(GeometryError::ZeroArea);
    }
    let inter = convex_intersection_area(a, b)?;
    let union = area_a + area_b - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Per-pixel rotated-box geometry: distances to the top, right, bottom and
/// left sides of the box, plus its rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RBoxGeom {
    pub d: [f64; 4],
    pub theta: f64,
}

/// A rectangle together with the rotation of its designated top edge.
///
/// The quad starts at the top-left corner and runs clockwise. `theta` lies in
/// `[-π/4, π/4)`; the edge whose direction falls in that range is "top".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub quad: Quad,
    pub theta: f64,
}

impl OrientedRect {
    /// Top edge length.
    pub fn width(&self) -> f64 {
        self.quad.pts[0].distance(self.quad.pts[1])
    }

    /// Left edge length.
    pub fn height(&self) -> f64 {
        self.quad.pts[0].distance(self.quad.pts[3])
    }

    /// Signed perpendicular distances from `p` to the top, right, bottom and
    /// left edges. All are non-negative when `p` lies inside.
    pub fn distances_from(&self, p: Point) -> [f64; 4] {
        let u = Point::new(1.0, 0.0).rotate(self.theta);
        let v = Point::new(0.0, 1.0).rotate(self.theta);
        let rel = p - self.quad.pts[0];
        let du = rel.dot(u);
        let dv = rel.dot(v);
        [dv, self.width() - du, self.height() - dv, du]
    }
}

/// Wraps an edge direction into `[-π/4, π/4)`.
pub fn normalize_rect_angle(phi: f64) -> f64 {
    let t = (phi + FRAC_PI_4).rem_euclid(FRAC_PI_2) - FRAC_PI_4;
    // rem_euclid can round up to exactly π/2 for inputs just below a multiple.
    if t >= FRAC_PI_4 {
        t - FRAC_PI_2
    } else {
        t
    }
}

/// Andrew's monotone chain. Returns the hull with positive orientation and
/// no collinear points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                if (b - a).cross(p - b) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Minimum-area enclosing rectangle by rotating calipers over the convex hull.
pub fn min_area_rect(q: &Quad) -> Result<OrientedRect, GeometryError> {
    min_area_rect_points(q.points())
}

pub fn min_area_rect_points(points: &[Point]) -> Result<OrientedRect, GeometryError> {
    if !points.iter().all(|p| p.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let hull = convex_hull(points);
    if hull.len() < 3 || signed_area(&hull) <= 0.0 {
        return Err(GeometryError::ZeroArea);
    }
    let n = hull.len();
    let edge_dir = |i: usize| {
        let d = hull[(i + 1) % n] - hull[i];
        d * (1.0 / d.norm())
    };
    let along = |i: usize, k: usize| (hull[k] - hull[i]).dot(edge_dir(i));
    let across = |i: usize, k: usize| {
        let e = edge_dir(i);
        (hull[k] - hull[i]).dot(Point::new(-e.y, e.x))
    };

    // Caliper indices for the first edge: farthest forward, farthest inward,
    // farthest backward.
    let argmax = |f: &dyn Fn(usize) -> f64| {
        (0..n).fold(0, |best, k| if f(k) > f(best) { k } else { best })
    };
    let mut fwd = argmax(&|k| along(0, k));
    let mut top = argmax(&|k| across(0, k));
    let mut back = argmax(&|k| -along(0, k));

    let mut best: Option<(f64, usize, f64, f64, f64)> = None;
    for i in 0..n {
        // On a convex ring each projection is unimodal, so the calipers only
        // ever move forward.
        for _ in 0..n {
            if along(i, (fwd + 1) % n) > along(i, fwd) {
                fwd = (fwd + 1) % n;
            } else {
                break;
            }
        }
        for _ in 0..n {
            if across(i, (top + 1) % n) > across(i, top) {
                top = (top + 1) % n;
            } else {
                break;
            }
        }
        for _ in 0..n {
            if along(i, (back + 1) % n) < along(i, back) {
                back = (back + 1) % n;
            } else {
                break;
            }
        }
        let hi = along(i, fwd);
        let lo = along(i, back);
        let h = across(i, top);
        let area = (hi - lo) * h;
        if best.is_none_or(|b| area < b.0) {
            best = Some((area, i, lo, hi, h));
        }
    }

    let (_, i, lo, hi, h) = best.expect("hull has at least three edges");
    let e = edge_dir(i);
    let nrm = Point::new(-e.y, e.x);
    let base = hull[i];
    let corners = [
        base + e * lo,
        base + e * hi,
        base + e * hi + nrm * h,
        base + e * lo + nrm * h,
    ];
    Ok(rect_from_corners(&corners, e.y.atan2(e.x)))
}

/// Relabels a rectangle so the edge with direction in `[-π/4, π/4)` is top.
fn rect_from_corners(corners: &[Point; 4], edge_angle: f64) -> OrientedRect {
    let theta = normalize_rect_angle(edge_angle);
    let u = Point::new(1.0, 0.0).rotate(theta);
    let v = Point::new(0.0, 1.0).rotate(theta);
    let (mut umin, mut umax, mut vmin, mut vmax) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in corners {
        umin = umin.min(c.dot(u));
        umax = umax.max(c.dot(u));
        vmin = vmin.min(c.dot(v));
        vmax = vmax.max(c.dot(v));
    }
    let at = |a: f64, b: f64| u * a + v * b;
    OrientedRect {
        quad: Quad::from_points_unchecked([
            at(umin, vmin),
            at(umax, vmin),
            at(umax, vmax),
            at(umin, vmax),
        ]),
        theta,
    }
}

/// Rebuilds the box a pixel at `origin` describes. The pixel is the pivot of
/// the rotation, so it keeps its position inside the box.
pub fn rbox_to_quad(origin: Point, g: &RBoxGeom) -> Result<Quad, GeometryError> {
    if !origin.is_finite() || !g.theta.is_finite() || !g.d.iter().all(|d| d.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    if let Some(&neg) = g.d.iter().find(|&&d| d < 0.0) {
        return Err(GeometryError::NegativeDistance(neg));
    }
    let [d1, d2, d3, d4] = g.d;
    if d1 + d3 <= 0.0 || d2 + d4 <= 0.0 {
        return Err(GeometryError::ZeroArea);
    }
    let local = [
        Point::new(-d4, -d1),
        Point::new(d2, -d1),
        Point::new(d2, d3),
        Point::new(-d4, d3),
    ];
    let pts = local.map(|p| origin + p.rotate(g.theta));
    Quad::new(pts)
}

/// A scored quad: the unit flowing through decoding, NMS and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub quad: Quad,
    pub score: f64,
}

impl Detection {
    pub fn new(quad: Quad, score: f64) -> Self {
        Self { quad, score }
    }
}
