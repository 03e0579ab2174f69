//! The eight symmetries of a square scene (quarter turns and a mirror),
//! applied consistently to images and ground-truth quads.

use crate::geometry::{GeometryError, Point, Quad};
use crate::tensor::{Tensor, TensorError};

/// A symmetry of the square: an optional left-right mirror followed by
/// `turns` quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub mirror: bool,
    pub turns: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { mirror: false, turns: 0 };

    /// Element `code % 8`; code 0 is the identity.
    pub fn from_code(code: u8) -> Self {
        Self {
            mirror: code & 4 != 0,
            turns: code & 3,
        }
    }

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Self::from_code(i as u8))
    }

    pub fn is_identity(self) -> bool {
        self == Self::IDENTITY
    }

    /// Maps a point of the `[0, size]²` square.
    pub fn apply_point(self, p: Point, size: f64) -> Point {
        let mut p = if self.mirror { Point::new(size - p.x, p.y) } else { p };
        for _ in 0..self.turns {
            p = Point::new(size - p.y, p.x);
        }
        p
    }

    /// Maps a quad, reversing the vertex order after a mirror so the result
    /// stays clockwise.
    pub fn apply_quad(self, q: &Quad, size: f64) -> Result<Quad, GeometryError> {
        let mut pts = q.points().map(|p| self.apply_point(p, size));
        if self.mirror {
            pts.reverse();
        }
        Quad::new(pts)
    }

    /// Maps every channel of a `(N, C, S, S)` tensor. Pixel centres land on
    /// pixel centres, so this is a pure permutation.
    pub fn apply_image(self, t: &Tensor) -> Result<Tensor, TensorError> {
        let [n, c, h, w] = t.shape();
        if h != w {
            return Err(TensorError::BadShape(format!("augmentation needs a square image, got {h}x{w}")));
        }
        if self.is_identity() {
            return Ok(t.clone());
        }
        let s = h as f64;
        let mut out = Tensor::zeros(t.shape());
        for b in 0..n {
            for ch in 0..c {
                let src = t.channel(b, ch);
                let dst = out.channel_mut(b, ch);
                for r in 0..h {
                    for col in 0..w {
                        let p = self.apply_point(Point::new(col as f64 + 0.5, r as f64 + 0.5), s);
                        dst[p.y as usize * w + p.x as usize] = src[r * w + col];
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(s: usize) -> Tensor {
        Tensor::from_vec([1, 1, s, s], (0..s * s).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn group_elements_are_distinct_permutations() {
        let img = ramp(4);
        let mut seen = Vec::new();
        for g in Dihedral::all() {
            let out = g.apply_image(&img).unwrap();
            let mut sorted = out.data().to_vec();
            sorted.sort_by(f32::total_cmp);
            assert_eq!(sorted, img.data());
            assert!(!seen.contains(&out.data().to_vec()));
            seen.push(out.data().to_vec());
        }
    }

    #[test]
    fn quarter_turn_moves_top_left_to_top_right() {
        let g = Dihedral::from_code(1);
        let out = g.apply_image(&ramp(3)).unwrap();
        assert_eq!(out.data(), &[6.0, 3.0, 0.0, 7.0, 4.0, 1.0, 8.0, 5.0, 2.0]);
        let p = g.apply_point(Point::new(0.5, 0.5), 3.0);
        assert_eq!((p.x, p.y), (2.5, 0.5));
    }

    #[test]
    fn quads_follow_their_pixels() {
        let q = Quad::axis_aligned(1.0, 2.0, 5.0, 2.0).unwrap();
        let mut img = Tensor::zeros([1, 1, 8, 8]);
        for r in 2..4 {
            for c in 1..6 {
                img.data_mut()[r * 8 + c] = 1.0;
            }
        }
        for g in Dihedral::all() {
            let tq = g.apply_quad(&q, 8.0).unwrap();
            assert!((tq.area() - q.area()).abs() < 1e-12);
            let ti = g.apply_image(&img).unwrap();
            for r in 0..8 {
                for c in 0..8 {
                    let inside = tq.contains(Point::new(c as f64 + 0.5, r as f64 + 0.5));
                    assert_eq!(ti.data()[r * 8 + c] == 1.0, inside, "{g:?} at {r},{c}");
                }
            }
        }
    }

    #[test]
    fn rejects_non_square() {
        assert!(Dihedral::from_code(3).apply_image(&Tensor::zeros([1, 1, 4, 8])).is_err());
    }
}
