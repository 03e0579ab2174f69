//! Synthetic text-like scenes with exact ground truth, and a greedy
//! precision / recall / F evaluator.

use std::f64::consts::FRAC_PI_4;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{convex_intersection_area, quad_iou, Detection, Point, Quad};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("could not place a box after {0} attempts")]
    ConfigInfeasible(usize),
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
}

pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Inclusive range of boxes per image.
    pub boxes_per_image: (usize, usize),
    /// Long-side length range in pixels.
    pub size_range: (f64, f64),
    /// Long side over short side.
    pub aspect_range: (f64, f64),
    pub angle_range: (f64, f64),
    pub noise_level: f64,
    /// Minimum distance from any box to the image border.
    pub margin: f64,
    /// Minimum spacing between boxes.
    pub gap: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            boxes_per_image: (1, 3),
            size_range: (16.0, 56.0),
            aspect_range: (2.0, 6.0),
            angle_range: (-FRAC_PI_4, FRAC_PI_4),
            noise_level: 0.1,
            margin: 2.0,
            gap: 2.0,
            seed: 42,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if self.image_size == 0 {
            return bad("image size must be positive");
        }
        if self.boxes_per_image.0 > self.boxes_per_image.1 {
            return bad("boxes_per_image range is reversed");
        }
        if !range_ok(self.size_range) || self.size_range.0 <= 0.0 {
            return bad("size range must be positive and ordered");
        }
        if !range_ok(self.aspect_range) || self.aspect_range.0 < 1.0 {
            return bad("aspect range must be ordered and at least 1");
        }
        if !range_ok(self.angle_range) {
            return bad("angle range must be ordered");
        }
        if !(self.noise_level >= 0.0 && self.margin >= 0.0 && self.gap >= 0.0) {
            return bad("noise, margin and gap must be non-negative");
        }
        Ok(())
    }
}

/// A grayscale `(1, 1, S, S)` image in `[0, 1]` and its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub gts: Vec<Quad>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn rect_quad(center: Point, long: f64, short: f64, theta: f64) -> Quad {
    let (hl, hs) = (long / 2.0, short / 2.0);
    let pts = [(-hl, -hs), (hl, -hs), (hl, hs), (-hl, hs)].map(|(x, y)| center + Point::new(x, y).rotate(theta));
    Quad::new(pts).expect("a rotated rectangle with positive sides is valid")
}

struct Placed {
    quad: Quad,
    padded: Quad,
    center: Point,
    theta: f64,
    period: f64,
    phase: f64,
}

/// Deterministic in `(cfg.seed, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<Scene, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let size = cfg.image_size as f64;
    let count = rng.random_range(cfg.boxes_per_image.0..=cfg.boxes_per_image.1);

    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut attempts = 0;
        loop {
            if attempts == MAX_ATTEMPTS {
                return Err(SynthError::ConfigInfeasible(MAX_ATTEMPTS));
            }
            attempts += 1;
            let long = uniform(&mut rng, cfg.size_range);
            let short = long / uniform(&mut rng, cfg.aspect_range);
            let theta = uniform(&mut rng, cfg.angle_range);
            let (c, s) = (theta.cos().abs(), theta.sin().abs());
            let ex = 0.5 * (long * c + short * s) + cfg.margin;
            let ey = 0.5 * (long * s + short * c) + cfg.margin;
            if 2.0 * ex >= size || 2.0 * ey >= size {
                continue;
            }
            let center = Point::new(rng.random_range(ex..size - ex), rng.random_range(ey..size - ey));
            let quad = rect_quad(center, long, short, theta);
            let padded = rect_quad(center, long + cfg.gap, short + cfg.gap, theta);
            let clear = placed.iter().all(|p| {
                convex_intersection_area(&padded, &p.padded).map_or(false, |a| a <= 0.0)
                    && convex_intersection_area(&quad, &p.quad).map_or(false, |a| a <= 0.0)
            });
            if !clear {
                continue;
            }
            let period = rng.random_range(3.0..5.0);
            let phase = rng.random_range(0.0..period);
            placed.push(Placed {
                quad,
                padded,
                center,
                theta,
                period,
                phase,
            });
            break;
        }
    }

    let s = cfg.image_size;
    let mut pixels = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
            let base = match placed.iter().find(|b| b.quad.contains(p)) {
                Some(b) => {
                    // Position along the long axis picks the stripe.
                    let u = (p - b.center).rotate(-b.theta).x + b.phase;
                    if (u / b.period).rem_euclid(1.0) < 0.5 {
                        0.9
                    } else {
                        0.1
                    }
                }
                None => 0.5,
            };
            let noise = cfg.noise_level * (2.0 * rng.random::<f64>() - 1.0) * 3f64.sqrt();
            pixels.push((base + noise).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(Scene {
        image: Tensor::from_vec([1, 1, s, s], pixels).expect("pixel count matches"),
        gts: placed.into_iter().map(|b| b.quad).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// `(detection index, gt index, iou)`.
    pub matches: Vec<(usize, usize, f64)>,
}

/// Running totals for micro-averaging over many images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub detections: usize,
    pub gts: usize,
    pub matched: usize,
}

impl EvalCounts {
    pub fn add(&mut self, detections: usize, gts: usize, matched: usize) {
        self.detections += detections;
        self.gts += gts;
        self.matched += matched;
    }

    /// `(precision, recall, f)`. An empty side scores 1 only if the other
    /// side is empty too.
    pub fn metrics(&self) -> (f64, f64, f64) {
        let ratio = |num: usize, den: usize, other: usize| {
            if den == 0 {
                if other == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                num as f64 / den as f64
            }
        };
        let p = ratio(self.matched, self.detections, self.gts);
        let r = ratio(self.matched, self.gts, self.detections);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    }
}

/// Greedy one-to-one matching in descending score order (ties by index);
/// each detection takes the unmatched gt of highest IoU if it reaches the
/// threshold. Pairs whose IoU cannot be computed count as IoU 0.
pub fn evaluate(dets: &[Detection], gts: &[Quad], iou_threshold: f64) -> EvalResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::new();
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let iou = quad_iou(&dets[di].quad, gt).unwrap_or(0.0);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            taken[gi] = true;
            matches.push((di, gi, iou));
        }
    }
    let counts = EvalCounts {
        detections: dets.len(),
        gts: gts.len(),
        matched: matches.len(),
    };
    let (precision, recall, f_score) = counts.metrics();
    EvalResult {
        precision,
        recall,
        f_score,
        matches,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_boxes_gives_noise_only() {
        let cfg = SceneConfig {
            boxes_per_image: (0, 0),
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, 3).unwrap();
        assert!(scene.gts.is_empty());
        let mean: f32 = scene.image.data().iter().sum::<f32>() / scene.image.len() as f32;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn deterministic_per_index() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 17).unwrap();
        assert_eq!(a, generate_scene(&cfg, 17).unwrap());
        assert_ne!(a, generate_scene(&cfg, 18).unwrap());
    }

    #[test]
    fn infeasible_configs_fail() {
        let cfg = SceneConfig {
            size_range: (200.0, 300.0),
            ..SceneConfig::default()
        };
        assert_eq!(generate_scene(&cfg, 0), Err(SynthError::ConfigInfeasible(MAX_ATTEMPTS)));
        let crowded = SceneConfig {
            boxes_per_image: (40, 40),
            size_range: (50.0, 56.0),
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(&crowded, 0), Err(SynthError::ConfigInfeasible(_))));
    }

    #[test]
    fn scene_property_scan() {
        let cfg = SceneConfig::default();
        let lim = cfg.image_size as f64 - cfg.margin;
        for i in 0..1000 {
            let scene = generate_scene(&cfg, i).unwrap();
            for (a, q) in scene.gts.iter().enumerate() {
                assert!(q.is_convex());
                let (lo, hi) = q.bounds();
                assert!(lo.x >= cfg.margin && lo.y >= cfg.margin && hi.x <= lim && hi.y <= lim);
                for b in &scene.gts[a + 1..] {
                    assert_eq!(quad_iou(q, b).unwrap(), 0.0);
                }
            }
        }
    }

    #[test]
    fn texture_differs_inside_boxes() {
        let cfg = SceneConfig {
            noise_level: 0.0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, 5).unwrap();
        let values: std::collections::BTreeSet<u32> = scene.image.data().iter().map(|v| v.to_bits()).collect();
        let expected: std::collections::BTreeSet<u32> = [0.1f32, 0.5, 0.9].iter().map(|v| v.to_bits()).collect();
        assert_eq!(values, expected);
    }

    fn sq(x: f64) -> Quad {
        Quad::axis_aligned(x, 0.0, 10.0, 10.0).unwrap()
    }

    #[test]
    fn evaluate_examples() {
        let gts = vec![sq(0.0), sq(50.0)];
        let exact: Vec<Detection> = gts.iter().map(|q| Detection::new(q.clone(), 0.9)).collect();
        let r = evaluate(&exact, &gts, 0.5);
        assert_eq!((r.precision, r.recall, r.f_score), (1.0, 1.0, 1.0));

        let r = evaluate(&[], &gts, 0.5);
        assert_eq!((r.precision, r.recall, r.f_score), (0.0, 0.0, 0.0));
        let r = evaluate(&[], &[], 0.5);
        assert_eq!((r.precision, r.recall, r.f_score), (1.0, 1.0, 1.0));

        let half = vec![Detection::new(sq(0.0), 0.9), Detection::new(sq(200.0), 0.8)];
        let r = evaluate(&half, &gts, 0.5);
        assert_eq!((r.precision, r.recall, r.f_score), (0.5, 0.5, 0.5));
        assert_eq!(r.matches, vec![(0, 0, 1.0)]);
    }

    #[test]
    fn duplicates_count_once() {
        let gts = vec![sq(0.0)];
        let mut dets = vec![Detection::new(sq(0.0), 0.9)];
        let mut last_f = evaluate(&dets, &gts, 0.5).f_score;
        for _ in 0..3 {
            dets.push(Detection::new(sq(1.0), 0.8));
            let r = evaluate(&dets, &gts, 0.5);
            assert_eq!(r.matches.len(), 1);
            assert!(r.f_score < last_f);
            last_f = r.f_score;
        }
    }

    #[test]
    fn higher_score_claims_gt_first() {
        let gts = vec![sq(0.0)];
        let dets = vec![Detection::new(sq(2.0), 0.5), Detection::new(sq(1.0), 0.7)];
        assert_eq!(evaluate(&dets, &gts, 0.5).matches[0].0, 1);
    }
}
