//! Locality-aware NMS.
//!
//! Candidates arrive in row-major cell order. Each one is either folded into
//! the running candidate (score-weighted vertex average, scores added) or
//! starts a new one. The survivors then go through a standard greedy NMS,
//! which now ranks by accumulated score.

use std::cmp::Ordering;

use thiserror::Error;

use crate::geometry::{quad_iou, Detection, GeometryError, Point, Quad};

pub const DEFAULT_MERGE_IOU: f64 = 0.3;
pub const DEFAULT_FINAL_NMS_IOU: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NmsError {
    #[error("detection score {0} is not positive")]
    NonPositiveScore(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeConfig {
    /// Two candidates merge when their IoU reaches this value.
    pub merge_iou_threshold: f64,
    /// IoU at which the final pass suppresses a lower-scored survivor.
    pub final_nms_iou_threshold: f64,
    pub counters_enabled: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            merge_iou_threshold: DEFAULT_MERGE_IOU,
            final_nms_iou_threshold: DEFAULT_FINAL_NMS_IOU,
            counters_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MergeStats {
    pub weighted_merge_calls: u64,
    pub pairwise_iou_evaluations: u64,
}

impl MergeStats {
    fn count_iou(&mut self, enabled: bool) {
        if enabled {
            self.pairwise_iou_evaluations += 1;
        }
    }
}

/// Cyclic shift of `p` that best lines its vertices up with `g`.
fn best_alignment(g: &Quad, p: &Quad) -> usize {
    let cost = |k: usize| -> f64 {
        let q = p.rotate_start(k);
        g.points()
            .iter()
            .zip(q.points())
            .map(|(a, b)| {
                let d = *a - *b;
                d.dot(d)
            })
            .sum()
    };
    (1..4).fold(0, |best, k| if cost(k) < cost(best) { k } else { best })
}

/// Score-weighted vertex average; the merged score is the sum of both.
///
/// `p` is relabeled cyclically to line up with `g` before averaging, so two
/// descriptions of the same box that start at different corners still merge
/// into that box.
pub fn weighted_merge(g: &Detection, p: &Detection) -> Result<Detection, NmsError> {
    for s in [g.score, p.score] {
        if !(s > 0.0) {
            return Err(NmsError::NonPositiveScore(s));
        }
    }
    let aligned = p.quad.rotate_start(best_alignment(&g.quad, &p.quad));
    let total = g.score + p.score;
    let pts: [Point; 4] = std::array::from_fn(|i| {
        let a = g.quad.points()[i];
        let b = aligned.points()[i];
        Point::new(
            (g.score * a.x + p.score * b.x) / total,
            (g.score * a.y + p.score * b.y) / total,
        )
    });
    Ok(Detection::new(Quad::new(pts)?, total))
}

pub fn should_merge(g: &Detection, p: &Detection, cfg: &MergeConfig) -> Result<bool, GeometryError> {
    Ok(quad_iou(&g.quad, &p.quad)? >= cfg.merge_iou_threshold)
}

/// The row-merge pass alone: returns the merged set before the final NMS.
pub fn row_merge(
    dets: &[Detection],
    cfg: &MergeConfig,
    stats: &mut MergeStats,
) -> Result<Vec<Detection>, NmsError> {
    let mut merged = Vec::new();
    let mut current: Option<Detection> = None;
    for g in dets {
        current = Some(match current {
            Some(p) => {
                stats.count_iou(cfg.counters_enabled);
                if should_merge(g, &p, cfg)? {
                    if cfg.counters_enabled {
                        stats.weighted_merge_calls += 1;
                    }
                    weighted_merge(g, &p)?
                } else {
                    merged.push(p);
                    *g
                }
            }
            None => *g,
        });
    }
    merged.extend(current);
    Ok(merged)
}

/// Row-merge pass followed by [`standard_nms`] on the survivors.
pub fn locality_aware_nms(
    dets: &[Detection],
    cfg: &MergeConfig,
) -> Result<(Vec<Detection>, MergeStats), NmsError> {
    let mut stats = MergeStats::default();
    let merged = row_merge(dets, cfg, &mut stats)?;
    let kept = standard_nms_counted(&merged, cfg.final_nms_iou_threshold, cfg.counters_enabled, &mut stats)?;
    Ok((kept, stats))
}

fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Stable sort keeps equal scores in input order.
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    order
}

/// Greedy NMS: highest score first, keep a detection only if its IoU with
/// every kept one is below `iou_threshold`.
pub fn standard_nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>, GeometryError> {
    let mut stats = MergeStats::default();
    standard_nms_counted(dets, iou_threshold, false, &mut stats)
}

pub fn standard_nms_counted(
    dets: &[Detection],
    iou_threshold: f64,
    count: bool,
    stats: &mut MergeStats,
) -> Result<Vec<Detection>, GeometryError> {
    let mut kept: Vec<Detection> = Vec::new();
    'candidates: for i in score_order(dets) {
        let d = &dets[i];
        for k in &kept {
            stats.count_iou(count);
            if quad_iou(&d.quad, &k.quad)? >= iou_threshold {
                continue 'candidates;
            }
        }
        kept.push(*d);
    }
    Ok(kept)
}

/// Textbook quadratic NMS: every pairwise IoU is computed up front (kept as
/// a bitset of suppressing pairs), then the same greedy selection as
/// [`standard_nms`] runs over it. Returns the kept detections and the number
/// of IoU evaluations.
pub fn all_pairs_nms(dets: &[Detection], iou_threshold: f64) -> Result<(Vec<Detection>, u64), GeometryError> {
    let n = dets.len();
    let words = n.div_ceil(64);
    let mut overlaps = vec![0u64; n * words];
    let mut evals = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            evals += 1;
            if quad_iou(&dets[i].quad, &dets[j].quad)? >= iou_threshold {
                overlaps[i * words + j / 64] |= 1 << (j % 64);
                overlaps[j * words + i / 64] |= 1 << (i % 64);
            }
        }
    }
    let overlapping = |i: usize, k: usize| overlaps[i * words + k / 64] & (1 << (k % 64)) != 0;
    let mut kept_idx: Vec<usize> = Vec::new();
    for i in score_order(dets) {
        if !kept_idx.iter().any(|&k| overlapping(i, k)) {
            kept_idx.push(i);
        }
    }
    Ok((kept_idx.into_iter().map(|i| dets[i]).collect(), evals))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, y: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection::new(Quad::axis_aligned(x, y, w, h).unwrap(), score)
    }

    #[test]
    fn merge_identical() {
        let a = det(1.0, 2.0, 5.0, 3.0, 1.0);
        let m = weighted_merge(&a, &a).unwrap();
        assert_eq!(m.quad, a.quad);
        assert_eq!(m.score, 2.0);
    }

    #[test]
    fn merge_weights_by_score() {
        let a = det(0.0, 0.0, 10.0, 4.0, 3.0);
        let b = det(2.0, 1.0, 10.0, 4.0, 1.0);
        let m = weighted_merge(&a, &b).unwrap();
        let expected: Vec<f64> = a
            .quad
            .coords()
            .iter()
            .zip(b.quad.coords())
            .map(|(x, y)| (3.0 * x + y) / 4.0)
            .collect();
        for (got, want) in m.quad.coords().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(m.score, 4.0);
        let back = weighted_merge(&b, &a).unwrap();
        for (x, y) in m.quad.coords().iter().zip(back.quad.coords()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_aligns_vertex_labels() {
        let a = det(0.0, 0.0, 10.0, 4.0, 1.0);
        let relabeled = Detection::new(a.quad.rotate_start(2), 1.0);
        let m = weighted_merge(&a, &relabeled).unwrap();
        assert_eq!(m.quad, a.quad);
    }

    #[test]
    fn merge_rejects_non_positive_scores() {
        let a = det(0.0, 0.0, 1.0, 1.0, 1.0);
        let z = det(0.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(weighted_merge(&a, &z), Err(NmsError::NonPositiveScore(0.0)));
    }

    #[test]
    fn should_merge_examples() {
        let cfg = MergeConfig::default();
        let a = det(0.0, 0.0, 1.0, 1.0, 1.0);
        assert!(should_merge(&a, &a, &MergeConfig { merge_iou_threshold: 0.999, ..cfg }).unwrap());
        assert!(!should_merge(&a, &det(5.0, 5.0, 1.0, 1.0, 1.0), &cfg).unwrap());
        let b = det(0.5, 0.5, 1.0, 1.0, 1.0);
        assert!(!should_merge(&a, &b, &cfg).unwrap());
        assert!(should_merge(&a, &b, &MergeConfig { merge_iou_threshold: 0.1, ..cfg }).unwrap());
        assert_eq!(should_merge(&a, &b, &cfg), should_merge(&b, &a, &cfg));
    }

    #[test]
    fn empty_input() {
        let (out, stats) = locality_aware_nms(&[], &MergeConfig::default()).unwrap();
        assert!(out.is_empty());
        assert_eq!(stats, MergeStats::default());
    }

    #[test]
    fn thousand_duplicates_collapse() {
        let a = det(3.25, 7.5, 20.0, 6.0, 1.0);
        let dets = vec![a; 1000];
        let (out, stats) = locality_aware_nms(&dets, &MergeConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].score - 1000.0).abs() < 1e-9);
        for (x, y) in out[0].quad.coords().iter().zip(a.quad.coords()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(stats.weighted_merge_calls, 999);
        assert_eq!(stats.pairwise_iou_evaluations, 999);
    }

    #[test]
    fn two_clusters() {
        let a = det(0.0, 0.0, 10.0, 4.0, 1.0);
        let b = det(100.0, 100.0, 10.0, 4.0, 1.0);
        let mut dets = vec![a; 500];
        dets.extend(vec![b; 500]);
        let (out, stats) = locality_aware_nms(&dets, &MergeConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(stats.weighted_merge_calls, 998);
    }

    #[test]
    fn counters_can_be_disabled() {
        let a = det(0.0, 0.0, 10.0, 4.0, 1.0);
        let cfg = MergeConfig { counters_enabled: false, ..Default::default() };
        let (out, stats) = locality_aware_nms(&[a, a, a], &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(stats, MergeStats::default());
    }

    #[test]
    fn standard_nms_examples() {
        let a = det(0.0, 0.0, 4.0, 4.0, 2.0);
        assert_eq!(standard_nms(&[a], 0.2).unwrap(), vec![a]);
        let weaker = Detection::new(a.quad, 1.0);
        assert_eq!(standard_nms(&[weaker, a], 0.2).unwrap(), vec![a]);
        let far = det(50.0, 50.0, 4.0, 4.0, 3.0);
        assert_eq!(standard_nms(&[a, far], 0.2).unwrap(), vec![far, a]);
    }

    #[test]
    fn standard_nms_breaks_ties_by_index() {
        let a = det(0.0, 0.0, 4.0, 4.0, 1.0);
        let b = det(0.5, 0.0, 4.0, 4.0, 1.0);
        assert_eq!(standard_nms(&[a, b], 0.2).unwrap(), vec![a]);
        assert_eq!(standard_nms(&[b, a], 0.2).unwrap(), vec![b]);
    }

    #[test]
    fn all_pairs_matches_greedy() {
        let dets: Vec<Detection> = (0..30)
            .map(|i| {
                let f = i as f64;
                det((f * 1.7) % 13.0, (f * 2.3) % 11.0, 4.0 + f % 3.0, 3.0, 1.0 + (f * 0.37) % 1.0)
            })
            .collect();
        let (all, evals) = all_pairs_nms(&dets, 0.2).unwrap();
        assert_eq!(all, standard_nms(&dets, 0.2).unwrap());
        assert_eq!(evals, 30 * 29 / 2);
    }
}
