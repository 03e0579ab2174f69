//! Training objectives with closed-form analytic gradients.
//!
//! The score map uses class-balanced cross-entropy. RBOX geometry uses the
//! IoU loss on the four distances plus a cosine angle loss; QUAD geometry
//! uses a smoothed-L1 loss normalized by the shortest ground-truth edge and
//! minimized over the cyclic vertex orderings of the ground truth.
//!
//! All functions here work in `f64`.

use thiserror::Error;

use crate::decode::{QuadOffsetMaps, RBoxMaps};
use crate::geometry::Quad;
use crate::grid::{pairwise_sum, Grid, ScoreMap};
use crate::labelgen::{QuadTargetMaps, RBoxTargetMaps};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("degenerate ground truth: {0}")]
    DegenerateGt(String),
    #[error("negative predicted distance {0}")]
    NegativePrediction(f64),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Divide the geometry loss sum by the number of map cells.
    MeanOverPixels,
    /// Divide the geometry loss sum by the number of positive cells.
    #[default]
    MeanOverPositives,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the geometry loss in the total.
    pub lambda_g: f64,
    /// Weight of the angle term inside the RBOX geometry loss.
    pub lambda_theta: f64,
    /// Floor applied to every log argument.
    pub clamp_eps: f64,
    /// Geometry-loss reduction. The score loss is always a mean over cells.
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_g: 1.0,
            lambda_theta: 10.0,
            clamp_eps: 1e-7,
            reduction: Reduction::MeanOverPositives,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda_g > 0.0 && self.lambda_theta > 0.0) {
            return Err(LossError::InvalidConfig("loss weights must be positive".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 1e-3) {
            return Err(LossError::InvalidConfig(format!(
                "clamp eps {} outside (0, 1e-3)",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

fn same_shape<A, B>(a: &Grid<A>, b: &Grid<B>) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancedXentResult {
    pub loss: f64,
    /// One minus the positive fraction of the ground truth.
    pub beta: f64,
    pub grad: Grid<f64>,
}

/// Balancing factor: `1 - Σy* / |Y*|`.
pub fn balance_factor(gt: &ScoreMap) -> f64 {
    if gt.is_empty() {
        return 1.0;
    }
    1.0 - pairwise_sum(gt.as_slice()) / gt.len() as f64
}

fn xent_terms(y_hat: f64, y: f64, beta: f64, eps: f64) -> f64 {
    let p = y_hat.clamp(eps, 1.0 - eps);
    -beta * y * p.ln() - (1.0 - beta) * (1.0 - y) * (1.0 - p).ln()
}

/// Class-balanced cross-entropy over probabilities, averaged over every
/// cell. Where the clamp is active the gradient is zero, matching the
/// clamped forward value.
pub fn balanced_xent(pred: &ScoreMap, gt: &ScoreMap, eps: f64) -> Result<BalancedXentResult, LossError> {
    same_shape(pred, gt)?;
    let beta = balance_factor(gt);
    let n = pred.len().max(1) as f64;
    let per: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .map(|(&p, &y)| xent_terms(p, y, beta, eps))
        .collect();
    let grad = Grid::from_vec(
        pred.height(),
        pred.width(),
        pred.iter()
            .zip(gt.iter())
            .map(|(&p, &y)| {
                if p <= eps || p >= 1.0 - eps {
                    0.0
                } else {
                    (-beta * y / p + (1.0 - beta) * (1.0 - y) / (1.0 - p)) / n
                }
            })
            .collect(),
    );
    Ok(BalancedXentResult {
        loss: pairwise_sum(&per) / n,
        beta,
        grad,
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Balanced cross-entropy evaluated on `sigmoid(logits)`, with the gradient
/// taken with respect to the logits.
///
/// The log-probabilities come from a stable softplus rather than a clamp, so
/// the value matches [`balanced_xent`] wherever its clamp is idle, and the
/// fused gradient is the exact derivative of the value everywhere.
pub fn balanced_xent_logits(logits: &Grid<f64>, gt: &ScoreMap) -> Result<BalancedXentResult, LossError> {
    same_shape(logits, gt)?;
    let beta = balance_factor(gt);
    let n = logits.len().max(1) as f64;
    let per: Vec<f64> = logits
        .iter()
        .zip(gt.iter())
        .map(|(&z, &y)| beta * y * softplus(-z) + (1.0 - beta) * (1.0 - y) * softplus(z))
        .collect();
    let grad = Grid::from_vec(
        logits.height(),
        logits.width(),
        logits
            .iter()
            .zip(gt.iter())
            .map(|(&z, &y)| {
                let p = sigmoid(z);
                (-beta * y * (1.0 - p) + (1.0 - beta) * (1.0 - y) * p) / n
            })
            .collect(),
    );
    Ok(BalancedXentResult {
        loss: pairwise_sum(&per) / n,
        beta,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IoUBreakdown {
    pub w_i: f64,
    pub h_i: f64,
    pub intersect: f64,
    pub union: f64,
    pub loss: f64,
    /// d loss / d d_hat.
    pub grad_d: [f64; 4],
}

/// `-ln(|R̂ ∩ R*| / |R̂ ∪ R*|)` for two boxes that share the pixel, each
/// given by its distances to the top, right, bottom and left sides.
///
/// `min` ties are differentiated along the prediction branch.
pub fn iou_loss(d_hat: &[f64; 4], d_star: &[f64; 4], eps: f64) -> Result<IoUBreakdown, LossError> {
    if let Some(&bad) = d_star.iter().find(|&&d| !(d > 0.0)) {
        return Err(LossError::DegenerateGt(format!("target distance {bad}")));
    }
    if let Some(&bad) = d_hat.iter().find(|&&d| !(d >= 0.0)) {
        return Err(LossError::NegativePrediction(bad));
    }
    let [p1, p2, p3, p4] = *d_hat;
    let [t1, t2, t3, t4] = *d_star;
    let area_hat = (p1 + p3) * (p2 + p4);
    let area_star = (t1 + t3) * (t2 + t4);
    let w_i = p2.min(t2) + p4.min(t4);
    let h_i = p1.min(t1) + p3.min(t3);
    let intersect = w_i * h_i;
    let union = area_hat + area_star - intersect;
    let ratio = intersect / union;
    if ratio < eps {
        return Ok(IoUBreakdown {
            w_i,
            h_i,
            intersect,
            union,
            loss: -eps.ln(),
            grad_d: [0.0; 4],
        });
    }
    let pick = |p: f64, t: f64| if p <= t { 1.0 } else { 0.0 };
    let d_inter = [
        w_i * pick(p1, t1),
        h_i * pick(p2, t2),
        w_i * pick(p3, t3),
        h_i * pick(p4, t4),
    ];
    let d_area = [p2 + p4, p1 + p3, p2 + p4, p1 + p3];
    // loss = ln U - ln I
    let grad_d = std::array::from_fn(|k| (d_area[k] - d_inter[k]) / union - d_inter[k] / intersect);
    Ok(IoUBreakdown {
        w_i,
        h_i,
        intersect,
        union,
        loss: -ratio.ln(),
        grad_d,
    })
}

/// `1 - cos(θ̂ - θ*)` and its derivative in `θ̂`.
pub fn angle_loss(theta_hat: f64, theta_star: f64) -> (f64, f64) {
    let diff = theta_hat - theta_star;
    (1.0 - diff.cos(), diff.sin())
}

fn reduce_count(reduction: Reduction, positives: usize, cells: usize) -> f64 {
    match reduction {
        Reduction::MeanOverPositives => positives as f64,
        Reduction::MeanOverPixels => cells as f64,
    }
}

/// IoU + `λ_θ`·angle loss averaged over the target's valid cells. Returns the
/// loss and its gradient with respect to every prediction channel.
pub fn rbox_geometry_loss(
    pred: &RBoxMaps,
    target: &RBoxTargetMaps,
    cfg: &LossConfig,
) -> Result<(f64, RBoxMaps), LossError> {
    let (h, w) = target.shape();
    for g in pred.d.iter().chain(std::iter::once(&pred.theta)) {
        same_shape(g, &target.theta)?;
    }
    let mut grads = RBoxMaps::zeros(h, w);
    let positives = target.valid.iter().filter(|&&v| v).count();
    if positives == 0 {
        return Ok((0.0, grads));
    }
    let norm = reduce_count(cfg.reduction, positives, h * w);
    let mut per = Vec::with_capacity(positives);
    for r in 0..h {
        for c in 0..w {
            if !target.valid[(r, c)] {
                continue;
            }
            let d_hat: [f64; 4] = std::array::from_fn(|k| pred.d[k][(r, c)]);
            let d_star: [f64; 4] = std::array::from_fn(|k| target.d[k][(r, c)]);
            let iou = iou_loss(&d_hat, &d_star, cfg.clamp_eps)?;
            let (lt, gt) = angle_loss(pred.theta[(r, c)], target.theta[(r, c)]);
            per.push(iou.loss + cfg.lambda_theta * lt);
            for k in 0..4 {
                grads.d[k][(r, c)] = iou.grad_d[k] / norm;
            }
            grads.theta[(r, c)] = cfg.lambda_theta * gt / norm;
        }
    }
    Ok((pairwise_sum(&per) / norm, grads))
}

/// `0.5 x²` inside the unit interval, `|x| - 0.5` outside.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadLoss {
    pub loss: f64,
    pub grad: [f64; 8],
    /// Starting vertex of the ground-truth ordering that attained the minimum.
    pub ordering: usize,
}

/// Normalized smoothed-L1 between a predicted coordinate list and the best
/// cyclic relabeling of the ground truth. Coordinates are
/// `[x1, y1, ..., x4, y4]`; both may be absolute or relative to the same
/// origin.
pub fn quad_loss_coords(q_hat: &[f64; 8], q_star: &[f64; 8], n_star: f64) -> Result<QuadLoss, LossError> {
    if !(n_star > 0.0) {
        return Err(LossError::DegenerateGt(format!("normalizer {n_star}")));
    }
    let norm = 8.0 * n_star;
    let mut best: Option<QuadLoss> = None;
    for k in 0..4 {
        let mut sum = 0.0;
        let mut grad = [0.0; 8];
        for i in 0..4 {
            let j = (i + k) % 4;
            for a in 0..2 {
                let diff = q_hat[2 * i + a] - q_star[2 * j + a];
                sum += smooth_l1(diff);
                grad[2 * i + a] = smooth_l1_grad(diff) / norm;
            }
        }
        let loss = sum / norm;
        if best.is_none_or(|b| loss < b.loss) {
            best = Some(QuadLoss { loss, grad, ordering: k });
        }
    }
    Ok(best.expect("four orderings"))
}

pub fn quad_loss(q_hat: &[f64; 8], q_star: &Quad, n_star: f64) -> Result<QuadLoss, LossError> {
    quad_loss_coords(q_hat, &q_star.coords(), n_star)
}

/// QUAD loss averaged over valid cells, in offset space.
pub fn quad_geometry_loss(
    pred: &QuadOffsetMaps,
    target: &QuadTargetMaps,
    cfg: &LossConfig,
) -> Result<(f64, QuadOffsetMaps), LossError> {
    let (h, w) = target.shape();
    for g in &pred.offsets {
        same_shape(g, &target.valid)?;
    }
    let mut grads = QuadOffsetMaps::zeros(h, w);
    let positives = target.valid.iter().filter(|&&v| v).count();
    if positives == 0 {
        return Ok((0.0, grads));
    }
    let norm = reduce_count(cfg.reduction, positives, h * w);
    let mut per = Vec::with_capacity(positives);
    for r in 0..h {
        for c in 0..w {
            if !target.valid[(r, c)] {
                continue;
            }
            let q_hat: [f64; 8] = std::array::from_fn(|k| pred.offsets[k][(r, c)]);
            let q_star: [f64; 8] = std::array::from_fn(|k| target.offsets[k][(r, c)]);
            let ql = quad_loss_coords(&q_hat, &q_star, target.shortest_edge[(r, c)])?;
            per.push(ql.loss);
            for k in 0..8 {
                grads.offsets[k][(r, c)] = ql.grad[k] / norm;
            }
        }
    }
    Ok((pairwise_sum(&per) / norm, grads))
}

/// `L_s + λ_g L_g`.
pub fn total_loss(score_part: f64, geom_part: f64, cfg: &LossConfig) -> f64 {
    score_part + cfg.lambda_g * geom_part
}

/// Compares an analytic gradient against central differences.
///
/// `loss_fn` returns `(value, gradient)`. The result is the largest
/// `|a - f| / max(1e-8, |a| + |f|)` over coordinates.
pub fn finite_difference_check<F>(loss_fn: F, inputs: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(inputs);
    let mut x = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + step;
        let (plus, _) = loss_fn(&x);
        x[k] = orig - step;
        let (minus, _) = loss_fn(&x);
        x[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[k];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}
