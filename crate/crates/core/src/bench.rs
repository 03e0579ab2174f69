//! Workloads and measurements for comparing locality-aware NMS against the
//! quadratic all-pairs baseline.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::geometry::{Detection, Point, Quad};
use crate::nms::{all_pairs_nms, locality_aware_nms, MergeConfig, MergeStats, NmsError};

/// Candidates per simulated text box in [`clustered`].
pub const CLUSTER_SIZE: usize = 64;
pub const DEFAULT_SIZES: [usize; 4] = [1000, 2000, 4000, 8000];

fn base_quad() -> Quad {
    Quad::axis_aligned(10.0, 20.0, 40.0, 12.0).expect("valid box")
}

/// `n` copies of one box, each with score 1.
pub fn duplicates(n: usize) -> Vec<Detection> {
    vec![Detection::new(base_quad(), 1.0); n]
}

/// Decoder-like input: boxes laid out on a grid, each contributing
/// [`CLUSTER_SIZE`] consecutive candidates jittered by up to half a pixel.
pub fn clustered(n: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_row = 16;
    (0..n)
        .map(|i| {
            let cluster = i / CLUSTER_SIZE;
            let origin = Point::new((cluster % per_row) as f64 * 60.0, (cluster / per_row) as f64 * 30.0);
            let pts = base_quad()
                .points()
                .map(|p| p + origin + Point::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)));
            let quad = Quad::new(pts).expect("jitter keeps the box valid");
            Detection::new(quad, rng.random_range(0.8..1.0))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub weighted_merge_calls: u64,
    pub pairwise_iou_evaluations: u64,
    pub wall_ms: f64,
    pub naive_wall_ms: f64,
}

/// Runs both algorithms once on `dets`. The naive run is skipped (reported
/// as 0 ms) unless `with_naive` is set.
pub fn measure(dets: &[Detection], cfg: &MergeConfig, with_naive: bool) -> Result<(BenchRow, usize), NmsError> {
    let t = Instant::now();
    let (kept, stats): (Vec<Detection>, MergeStats) = locality_aware_nms(dets, cfg)?;
    let wall_ms = t.elapsed().as_secs_f64() * 1e3;
    let naive_wall_ms = if with_naive {
        let t = Instant::now();
        all_pairs_nms(dets, cfg.final_nms_iou_threshold)?;
        t.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    Ok((
        BenchRow {
            n: dets.len(),
            weighted_merge_calls: stats.weighted_merge_calls,
            pairwise_iou_evaluations: stats.pairwise_iou_evaluations,
            wall_ms,
            naive_wall_ms,
        },
        kept.len(),
    ))
}

pub const CSV_HEADER: &str = "n,weighted_merge_calls,pairwise_iou_evaluations,wall_ms,naive_wall_ms";

pub fn format_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.3},{:.3}\n",
            r.n, r.weighted_merge_calls, r.pairwise_iou_evaluations, r.wall_ms, r.naive_wall_ms
        ));
    }
    s
}

/// Least-squares line through the points: `(slope, intercept, r_squared)`.
/// A perfect fit, including a constant series, has `r_squared = 1`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len().min(ys.len()) as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, intercept, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_a_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
        let (m, b, r2) = linear_fit(&xs, &ys);
        assert!((m - 3.0).abs() < 1e-12 && (b + 1.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
        let (_, _, r2) = linear_fit(&xs, &[1.0, 4.0, 1.0, 4.0]);
        assert!(r2 < 0.5);
    }

    #[test]
    fn duplicate_counters_are_linear() {
        let cfg = MergeConfig::default();
        for n in [10, 100, 1000] {
            let (row, kept) = measure(&duplicates(n), &cfg, false).unwrap();
            assert_eq!(kept, 1);
            assert_eq!(row.weighted_merge_calls, n as u64 - 1);
            assert_eq!(row.pairwise_iou_evaluations, n as u64 - 1);
        }
    }

    #[test]
    fn clustered_collapses_to_one_box_per_cluster() {
        let n = 10 * CLUSTER_SIZE;
        let dets = clustered(n, 3);
        assert_eq!(dets, clustered(n, 3));
        let (row, kept) = measure(&dets, &MergeConfig::default(), true).unwrap();
        assert_eq!(kept, 10);
        assert_eq!(row.weighted_merge_calls, (n - 10) as u64);
        let (naive, _) = all_pairs_nms(&dets, MergeConfig::default().final_nms_iou_threshold).unwrap();
        assert_eq!(naive.len(), 10);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let row = BenchRow {
            n: 5,
            weighted_merge_calls: 4,
            pairwise_iou_evaluations: 4,
            wall_ms: 0.5,
            naive_wall_ms: 1.25,
        };
        assert_eq!(format_csv(&[row]), format!("{CSV_HEADER}\n5,4,4,0.500,1.250\n"));
    }
}
