//! Finite-difference verification of every analytic gradient: the four
//! losses in `f64`, and the whole network end to end in `f32`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::geometry::{Point, Quad};
use crate::grid::Grid;
use crate::labelgen::{generate_labels, LabelConfig};
use crate::losses::{angle_loss, balanced_xent, finite_difference_check, iou_loss, quad_loss_coords, LossConfig};
use crate::tensor::Tensor;
use crate::tinynet::{loss_and_grads, Head, NetConfig, NetError, TinyNet};

pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const NET_TOLERANCE: f64 = 1e-2;
pub const DEFAULT_POINTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

const STEP: f64 = 1e-6;
// Points closer than this to a kink (clamp, min branch, ordering switch) are
// redrawn.
const TIE_MARGIN: f64 = 1e-3;

fn xent_points(rng: &mut ChaCha8Rng, points: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let n = 9;
        let mut gt: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
        gt[0] = 1.0;
        gt[1] = 0.0;
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
        let gt = Grid::from_vec(3, 3, gt);
        let f = |x: &[f64]| {
            let r = balanced_xent(&Grid::from_vec(3, 3, x.to_vec()), &gt, 1e-7).expect("same shapes");
            (r.loss, r.grad.into_vec())
        };
        worst = worst.max(finite_difference_check(f, &pred, STEP));
    }
    worst
}

fn iou_points(rng: &mut ChaCha8Rng, points: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < points {
        let d_hat: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.5..30.0));
        let d_star: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.5..30.0));
        if d_hat.iter().zip(&d_star).any(|(a, b)| (a - b).abs() < TIE_MARGIN) {
            continue;
        }
        let f = |x: &[f64]| {
            let r = iou_loss(&[x[0], x[1], x[2], x[3]], &d_star, 1e-7).expect("positive inputs");
            (r.loss, r.grad_d.to_vec())
        };
        worst = worst.max(finite_difference_check(f, &d_hat, STEP));
        done += 1;
    }
    worst
}

fn angle_points(rng: &mut ChaCha8Rng, points: usize) -> f64 {
    let q = std::f64::consts::FRAC_PI_4;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < points {
        let a = rng.random_range(-q..q);
        let b = rng.random_range(-q..q);
        if (a - b).abs() < TIE_MARGIN {
            continue;
        }
        let f = |x: &[f64]| {
            let (l, g) = angle_loss(x[0], b);
            (l, vec![g])
        };
        worst = worst.max(finite_difference_check(f, &[a], STEP));
        done += 1;
    }
    worst
}

fn quad_points(rng: &mut ChaCha8Rng, points: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < points {
        let c = Point::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let (w, h) = (rng.random_range(4.0..30.0), rng.random_range(2.0..10.0));
        let theta = rng.random_range(-0.7..0.7);
        let star = [(-w, -h), (w, -h), (w, h), (-w, h)].map(|(x, y)| c + Point::new(x / 2.0, y / 2.0).rotate(theta));
        let q_star: [f64; 8] = std::array::from_fn(|i| if i % 2 == 0 { star[i / 2].x } else { star[i / 2].y });
        let n_star = w.min(h);
        let q_hat: [f64; 8] = std::array::from_fn(|i| q_star[i] + rng.random_range(-4.0..4.0));
        let eval = |x: &[f64]| quad_loss_coords(&std::array::from_fn(|i| x[i]), &q_star, n_star).expect("n > 0");
        // Redraw near a smooth-L1 joint or an ordering switch.
        let base = eval(&q_hat);
        let near_joint = (0..4).any(|i| {
            let j = (i + base.ordering) % 4;
            (0..2).any(|a| ((q_hat[2 * i + a] - q_star[2 * j + a]).abs() - 1.0).abs() < TIE_MARGIN)
        });
        let switches = (0..8).any(|k| {
            [-TIE_MARGIN, TIE_MARGIN].iter().any(|&s| {
                let mut x = q_hat;
                x[k] += s;
                eval(&x).ordering != base.ordering
            })
        });
        if near_joint || switches {
            continue;
        }
        let f = |x: &[f64]| {
            let r = eval(x);
            (r.loss, r.grad.to_vec())
        };
        worst = worst.max(finite_difference_check(f, &q_hat, STEP));
        done += 1;
    }
    worst
}

/// Max relative error for each loss over `points` random points.
pub fn check_losses(seed: u64, points: usize) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut push = |name, err| {
        rows.push(CheckRow {
            name,
            points,
            max_rel_error: err,
            tolerance: LOSS_TOLERANCE,
        })
    };
    push("balanced_xent", xent_points(&mut rng, points));
    push("iou_loss", iou_points(&mut rng, points));
    push("angle_loss", angle_points(&mut rng, points));
    push("quad_loss", quad_points(&mut rng, points));
    rows
}

/// Microscopic network used for the end-to-end check.
pub fn micro_config(head: Head) -> NetConfig {
    NetConfig {
        stem_channels: [2, 2, 2, 2],
        merge_channels: [2, 2, 2],
        final_channels: 2,
        head,
        d_max: 16.0,
        input_size: 32,
    }
}

/// End-to-end check of the network gradient against central differences of
/// the full training loss, over `points` randomly chosen parameters.
///
/// A coordinate counts only where no ReLU or max-pool switches inside the
/// stencil and the central difference is stable between two step sizes; the
/// latter also screens out min-branch switches inside the losses.
/// Biases start slightly positive so the tiny net is not dead.
pub fn check_network(cfg: &NetConfig, seed: u64, points: usize) -> Result<CheckRow, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.input_size;
    let mut net = TinyNet::new(cfg.clone(), seed)?;
    for p in net.params_mut() {
        if p.name.ends_with(".bias") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(0.05..0.3));
        }
    }
    let s = size as f64;
    let c = Point::new(s * rng.random_range(0.4..0.6), s * rng.random_range(0.4..0.6));
    let (w, h) = (s * rng.random_range(0.4..0.6), s * rng.random_range(0.2..0.3));
    let theta = rng.random_range(-0.5..0.5);
    let pts = [(-w, -h), (w, -h), (w, h), (-w, h)].map(|(x, y)| c + Point::new(x / 2.0, y / 2.0).rotate(theta));
    let gt = Quad::new(pts).expect("rectangle is valid");
    let labels = generate_labels(&[gt], &LabelConfig::new(size, size)).map_err(|e| NetError::InvalidConfig(e.to_string()))?;
    let image = Tensor::from_vec([1, 1, size, size], (0..size * size).map(|_| rng.random::<f32>()).collect())?;
    let loss_cfg = LossConfig::default();

    net.forward_train(&image)?;
    let out = net.forward(&image)?;
    let (_, d_logits, d_geo) = loss_and_grads(&out, &[&labels], &loss_cfg)?;
    let grads = net.backward(&d_logits, &d_geo)?;

    let loss_at = |net: &TinyNet| -> Result<f64, NetError> {
        let out = net.forward(&image)?;
        Ok(loss_and_grads(&out, &[&labels], &loss_cfg)?.0.total)
    };
    let central = |net: &mut TinyNet, pi: usize, k: usize, h: f32| -> Result<f64, NetError> {
        let orig = net.params()[pi].data[k];
        let (hi, lo) = (orig + h, orig - h);
        net.params_mut()[pi].data[k] = hi;
        let up = loss_at(net)?;
        net.params_mut()[pi].data[k] = lo;
        let down = loss_at(net)?;
        net.params_mut()[pi].data[k] = orig;
        Ok((up - down) / (hi as f64 - lo as f64))
    };

    let n_params = net.params().len();
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut tries = 0;
    while done < points {
        tries += 1;
        if tries > 100 * points {
            return Err(NetError::InvalidConfig("too few well-conditioned parameters".into()));
        }
        let pi = rng.random_range(0..n_params);
        let k = rng.random_range(0..net.params()[pi].data.len());
        let analytic = grads.values[pi][k] as f64;
        if analytic.abs() < 5e-3 {
            continue;
        }
        let base = net.switch_pattern(&image)?;
        let mut crosses = false;
        for h in [-1e-3f32, 1e-3] {
            let orig = net.params()[pi].data[k];
            net.params_mut()[pi].data[k] = orig + h;
            crosses |= net.switch_pattern(&image)? != base;
            net.params_mut()[pi].data[k] = orig;
        }
        if crosses {
            continue;
        }
        let coarse = central(&mut net, pi, k, 1e-3)?;
        let fd = central(&mut net, pi, k, 5e-4)?;
        if (coarse - fd).abs() > 1e-3 * (coarse.abs() + fd.abs()) {
            continue;
        }
        let err = (analytic - fd).abs() / (analytic.abs() + fd.abs());
        worst = worst.max(err);
        done += 1;
    }
    Ok(CheckRow {
        name: "network",
        points,
        max_rel_error: worst,
        tolerance: NET_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_pass() {
        for row in check_losses(7, 25) {
            assert!(row.passed(), "{row:?}");
        }
    }

    #[test]
    fn micro_network_passes() {
        for head in [Head::Rbox, Head::Quad] {
            let row = check_network(&micro_config(head), 3, 20).unwrap();
            assert!(row.passed(), "{row:?}");
        }
    }
}
