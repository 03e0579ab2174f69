//! Thresholding dense outputs into scored quads.

use crate::geometry::{rbox_to_quad, Detection, GeometryError, Point, Quad, RBoxGeom};
use crate::grid::{Grid, ScoreMap};
use crate::labelgen::cell_center;

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.8;

/// RBOX prediction channels: distances (top, right, bottom, left) and angle.
#[derive(Debug, Clone, PartialEq)]
pub struct RBoxMaps {
    pub d: [Grid<f64>; 4],
    pub theta: Grid<f64>,
}

impl RBoxMaps {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            d: std::array::from_fn(|_| Grid::filled(height, width, 0.0)),
            theta: Grid::filled(height, width, 0.0),
        }
    }
}

/// QUAD prediction channels: `(Δx_i, Δy_i)` from the cell center to vertex `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadOffsetMaps {
    pub offsets: [Grid<f64>; 8],
}

impl QuadOffsetMaps {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            offsets: std::array::from_fn(|_| Grid::filled(height, width, 0.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryMaps {
    Rbox(RBoxMaps),
    Quad(QuadOffsetMaps),
}

impl GeometryMaps {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            GeometryMaps::Rbox(m) => m.theta.shape(),
            GeometryMaps::Quad(m) => m.offsets[0].shape(),
        }
    }

    pub fn channels(&self) -> Vec<&Grid<f64>> {
        match self {
            GeometryMaps::Rbox(m) => m.d.iter().chain(std::iter::once(&m.theta)).collect(),
            GeometryMaps::Quad(m) => m.offsets.iter().collect(),
        }
    }
}

/// Score map plus geometry channels at a common output stride.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOutputs {
    pub score: ScoreMap,
    pub geometry: GeometryMaps,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub score_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Row-major over qualifying cells.
    pub detections: Vec<Detection>,
    /// Qualifying cells whose geometry could not form a valid convex quad.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecodeError {
    #[error("score map {0:?} and geometry {1:?} differ in shape")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("score threshold {0} outside (0, 1)")]
    BadThreshold(f64),
}

fn cell_geometry(geometry: &GeometryMaps, r: usize, c: usize, center: Point) -> Result<Quad, GeometryError> {
    let quad = match geometry {
        GeometryMaps::Rbox(m) => {
            let g = RBoxGeom {
                d: std::array::from_fn(|k| m.d[k][(r, c)]),
                theta: m.theta[(r, c)],
            };
            rbox_to_quad(center, &g)?
        }
        GeometryMaps::Quad(m) => {
            let pts = std::array::from_fn(|i| {
                center + Point::new(m.offsets[2 * i][(r, c)], m.offsets[2 * i + 1][(r, c)])
            });
            Quad::new(pts)?
        }
    };
    if !quad.is_convex() {
        return Err(GeometryError::NonConvexInput);
    }
    Ok(quad)
}

/// Emits one detection per cell scoring at least the threshold, in row-major
/// cell order. Cells with malformed geometry are skipped and counted.
pub fn decode(outputs: &DenseOutputs, cfg: &DecodeConfig) -> Result<Decoded, DecodeError> {
    if !(cfg.score_threshold > 0.0 && cfg.score_threshold < 1.0) {
        return Err(DecodeError::BadThreshold(cfg.score_threshold));
    }
    let shape = outputs.score.shape();
    if outputs.geometry.shape() != shape {
        return Err(DecodeError::ShapeMismatch(shape, outputs.geometry.shape()));
    }
    let (h, w) = shape;
    let mut detections = Vec::new();
    let mut skipped = 0;
    for r in 0..h {
        for c in 0..w {
            let score = outputs.score[(r, c)];
            if !(score >= cfg.score_threshold) {
                continue;
            }
            let center = cell_center(r, c, outputs.stride);
            match cell_geometry(&outputs.geometry, r, c, center) {
                Ok(quad) => detections.push(Detection::new(quad, score)),
                Err(_) => skipped += 1,
            }
        }
    }
    Ok(Decoded { detections, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{min_area_rect, quad_iou};
    use crate::labelgen::{generate_labels, LabelConfig};

    fn rbox_outputs(h: usize, w: usize) -> DenseOutputs {
        DenseOutputs {
            score: Grid::filled(h, w, 0.0),
            geometry: GeometryMaps::Rbox(RBoxMaps::zeros(h, w)),
            stride: 4,
        }
    }

    #[test]
    fn nothing_above_threshold() {
        let mut out = rbox_outputs(4, 4);
        out.score = Grid::filled(4, 4, 0.79);
        let d = decode(&out, &DecodeConfig::default()).unwrap();
        assert!(d.detections.is_empty());
        assert_eq!(d.skipped, 0);
    }

    #[test]
    fn single_cell() {
        let mut out = rbox_outputs(4, 4);
        out.score[(2, 1)] = 0.9;
        if let GeometryMaps::Rbox(m) = &mut out.geometry {
            for k in 0..4 {
                m.d[k][(2, 1)] = 2.0;
            }
        }
        let d = decode(&out, &DecodeConfig::default()).unwrap();
        assert_eq!(d.detections.len(), 1);
        assert_eq!(d.detections[0].score, 0.9);
        // Cell (2, 1) has center (6, 10).
        assert_eq!(d.detections[0].quad.coords(), [4.0, 8.0, 8.0, 8.0, 8.0, 12.0, 4.0, 12.0]);
    }

    #[test]
    fn malformed_cells_are_skipped_and_counted() {
        let mut out = rbox_outputs(2, 2);
        out.score = Grid::filled(2, 2, 1.0);
        if let GeometryMaps::Rbox(m) = &mut out.geometry {
            for k in 0..4 {
                m.d[k] = Grid::filled(2, 2, 1.0);
            }
            m.d[1][(0, 1)] = -3.0;
            m.d[0][(1, 0)] = f64::NAN;
        }
        let d = decode(&out, &DecodeConfig::default()).unwrap();
        assert_eq!(d.detections.len(), 2);
        assert_eq!(d.skipped, 2);
    }

    #[test]
    fn quad_head_decodes_offsets() {
        let mut offsets = QuadOffsetMaps::zeros(2, 2);
        let rel = [-1.0, -1.0, 3.0, -1.0, 3.0, 2.0, -1.0, 2.0];
        for (k, v) in rel.iter().enumerate() {
            offsets.offsets[k][(1, 1)] = *v;
        }
        let mut score = Grid::filled(2, 2, 0.0);
        score[(1, 1)] = 0.95;
        let out = DenseOutputs {
            score,
            geometry: GeometryMaps::Quad(offsets),
            stride: 4,
        };
        let d = decode(&out, &DecodeConfig::default()).unwrap();
        assert_eq!(d.detections.len(), 1);
        assert_eq!(d.detections[0].quad.coords(), [5.0, 5.0, 9.0, 5.0, 9.0, 8.0, 5.0, 8.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let out = rbox_outputs(2, 2);
        let bad = DecodeConfig { score_threshold: 1.0 };
        assert_eq!(decode(&out, &bad), Err(DecodeError::BadThreshold(1.0)));
        let mut mismatched = out.clone();
        mismatched.score = Grid::filled(3, 2, 0.0);
        assert!(matches!(
            decode(&mismatched, &DecodeConfig::default()),
            Err(DecodeError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn label_round_trip() {
        let theta = 0.35;
        let c = Point::new(40.0, 36.0);
        let pts = [(-24.0, -7.0), (24.0, -7.0), (24.0, 7.0), (-24.0, 7.0)]
            .map(|(x, y)| c + Point::new(x, y).rotate(theta));
        let q = Quad::new(pts).unwrap();
        let labels = generate_labels(&[q], &LabelConfig::new(80, 80)).unwrap();
        let out = DenseOutputs {
            score: labels.score.clone(),
            geometry: GeometryMaps::Rbox(RBoxMaps {
                d: labels.rbox.d.clone(),
                theta: labels.rbox.theta.clone(),
            }),
            stride: 4,
        };
        let d = decode(&out, &DecodeConfig { score_threshold: 0.5 }).unwrap();
        let positives = labels.score.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(d.detections.len(), positives);
        let rect = min_area_rect(&q).unwrap();
        for det in &d.detections {
            assert!(quad_iou(&det.quad, &rect.quad).unwrap() >= 0.99);
        }
    }
}
