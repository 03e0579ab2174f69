//! Dense training targets from quadrangle annotations.
//!
//! Each annotation is shrunk toward its interior; output cells whose centers
//! fall inside a shrunk quad are positive. Positive cells then receive
//! geometry targets describing the full (unshrunk) region as seen from the
//! cell center: distances and angle of the minimum-area rectangle (RBOX), or
//! offsets to the four vertices (QUAD).

use thiserror::Error;

use crate::geometry::{min_area_rect, signed_area, GeometryError, OrientedRect, Point, Quad};
use crate::grid::{Grid, ScoreMap};

pub const DEFAULT_SHRINK_RATIO: f64 = 0.3;
pub const DEFAULT_OUTPUT_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("invalid label config: {0}")]
    InvalidConfig(String),
    #[error("annotation {index} has a vertex outside the image")]
    OutOfBounds { index: usize },
    #[error("annotation {index} is not convex")]
    NonConvex { index: usize },
    #[error("shrunk quad collapsed")]
    CollapsedQuad,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelConfig {
    pub shrink_ratio: f64,
    pub output_stride: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl LabelConfig {
    pub fn new(image_height: usize, image_width: usize) -> Self {
        Self {
            shrink_ratio: DEFAULT_SHRINK_RATIO,
            output_stride: DEFAULT_OUTPUT_STRIDE,
            image_height,
            image_width,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.output_stride = stride;
        self
    }

    pub fn with_shrink_ratio(mut self, ratio: f64) -> Self {
        self.shrink_ratio = ratio;
        self
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        if !(0.0..0.5).contains(&self.shrink_ratio) {
            return Err(LabelError::InvalidConfig(format!(
                "shrink ratio {} outside [0, 0.5)",
                self.shrink_ratio
            )));
        }
        if ![1, 2, 4].contains(&self.output_stride) {
            return Err(LabelError::InvalidConfig(format!(
                "output stride {} not in {{1, 2, 4}}",
                self.output_stride
            )));
        }
        let s = self.output_stride;
        if self.image_height == 0
            || self.image_width == 0
            || self.image_height % s != 0
            || self.image_width % s != 0
        {
            return Err(LabelError::InvalidConfig(format!(
                "image {}x{} not a positive multiple of stride {s}",
                self.image_height, self.image_width
            )));
        }
        Ok(())
    }

    pub fn map_height(&self) -> usize {
        self.image_height / self.output_stride
    }

    pub fn map_width(&self) -> usize {
        self.image_width / self.output_stride
    }
}

/// Center of output cell `(row, col)` in input-image pixels.
pub fn cell_center(row: usize, col: usize, stride: usize) -> Point {
    let s = stride as f64;
    Point::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
}

/// `r_i`: the shorter of the two edges meeting at vertex `i`.
pub fn reference_lengths(q: &Quad) -> [f64; 4] {
    let e = q.edge_lengths();
    // Edge i runs from p_i to p_{i+1}, so vertex i touches edges i-1 and i.
    std::array::from_fn(|i| e[i].min(e[(i + 3) % 4]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkPlan {
    pub reference_lengths: [f64; 4],
    /// True when edges `<p1p2>, <p3p4>` form the longer pair and go first.
    pub longer_pair_first: bool,
}

pub fn shrink_plan(q: &Quad) -> ShrinkPlan {
    let e = q.edge_lengths();
    ShrinkPlan {
        reference_lengths: reference_lengths(q),
        // Equal means go to the first pair.
        longer_pair_first: e[0] + e[2] >= e[1] + e[3],
    }
}

/// Pulls edge `i` in from both ends: `p_i` by `ratio·r_i`, `p_{i+1}` by
/// `ratio·r_{i+1}`, along the edge's current direction.
fn shrink_edge(pts: &mut [Point; 4], r: &[f64; 4], ratio: f64, i: usize) {
    let j = (i + 1) % 4;
    let d = pts[j] - pts[i];
    let len = d.norm();
    if len == 0.0 {
        return;
    }
    let dir = d * (1.0 / len);
    pts[i] = pts[i] + dir * (ratio * r[i]);
    pts[j] = pts[j] - dir * (ratio * r[j]);
}

/// Shrinks the longer opposite-edge pair first, then the shorter pair along
/// the already-moved edges.
pub fn shrink_quad(q: &Quad, ratio: f64) -> Result<Quad, LabelError> {
    if !(0.0..0.5).contains(&ratio) {
        return Err(LabelError::InvalidConfig(format!("shrink ratio {ratio} outside [0, 0.5)")));
    }
    let plan = shrink_plan(q);
    let r = plan.reference_lengths;
    let mut pts = *q.points();
    let order: [usize; 4] = if plan.longer_pair_first {
        [0, 2, 1, 3]
    } else {
        [1, 3, 0, 2]
    };
    for &edge in &order {
        shrink_edge(&mut pts, &r, ratio, edge);
    }
    if signed_area(&pts) <= 0.0 {
        return Err(LabelError::CollapsedQuad);
    }
    let shrunk = Quad::new(pts).map_err(|_| LabelError::CollapsedQuad)?;
    if !shrunk.is_convex() {
        return Err(LabelError::CollapsedQuad);
    }
    Ok(shrunk)
}

/// Which annotation, if any, owns each output cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOwnership {
    pub owner: Grid<Option<usize>>,
    /// Annotations whose shrunk quad collapsed. They own no cells.
    pub collapsed: Vec<usize>,
}

fn check_annotations(quads: &[Quad], cfg: &LabelConfig) -> Result<(), LabelError> {
    cfg.validate()?;
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    for (index, q) in quads.iter().enumerate() {
        let inside = q
            .points()
            .iter()
            .all(|p| (0.0..=w).contains(&p.x) && (0.0..=h).contains(&p.y));
        if !inside {
            return Err(LabelError::OutOfBounds { index });
        }
        if !q.is_convex() {
            return Err(LabelError::NonConvex { index });
        }
    }
    Ok(())
}

/// Marks cells whose centers lie in a shrunk annotation. Where shrunk quads
/// overlap, the annotation with the smallest area wins (ties: lower index).
pub fn assign_cells(quads: &[Quad], cfg: &LabelConfig) -> Result<CellOwnership, LabelError> {
    check_annotations(quads, cfg)?;
    let (mh, mw) = (cfg.map_height(), cfg.map_width());
    let stride = cfg.output_stride;
    let s = stride as f64;
    let mut owner = Grid::filled(mh, mw, None);
    let mut collapsed = Vec::new();

    let mut order: Vec<usize> = (0..quads.len()).collect();
    order.sort_by(|&a, &b| quads[a].area().total_cmp(&quads[b].area()).then(a.cmp(&b)));

    for idx in order {
        let shrunk = match shrink_quad(&quads[idx], cfg.shrink_ratio) {
            Ok(q) => q,
            Err(LabelError::CollapsedQuad) => {
                collapsed.push(idx);
                continue;
            }
            Err(e) => return Err(e),
        };
        let (lo, hi) = shrunk.bounds();
        let r0 = ((lo.y / s - 0.5).floor().max(0.0)) as usize;
        let r1 = ((hi.y / s - 0.5).ceil().max(0.0) as usize).min(mh.saturating_sub(1));
        let c0 = ((lo.x / s - 0.5).floor().max(0.0)) as usize;
        let c1 = ((hi.x / s - 0.5).ceil().max(0.0) as usize).min(mw.saturating_sub(1));
        for r in r0..=r1 {
            for c in c0..=c1 {
                if owner[(r, c)].is_none() && shrunk.contains(cell_center(r, c, stride)) {
                    owner[(r, c)] = Some(idx);
                }
            }
        }
    }
    collapsed.sort_unstable();
    Ok(CellOwnership { owner, collapsed })
}

/// 1 where a cell center lies in some shrunk annotation, else 0.
pub fn generate_score_map(quads: &[Quad], cfg: &LabelConfig) -> Result<ScoreMap, LabelError> {
    let own = assign_cells(quads, cfg)?;
    Ok(score_from_owner(&own.owner))
}

fn score_from_owner(owner: &Grid<Option<usize>>) -> ScoreMap {
    owner.map(|o| if o.is_some() { 1.0 } else { 0.0 })
}

/// RBOX targets. Distances are in input-image pixels; all channels are zero
/// outside `valid`.
#[derive(Debug, Clone, PartialEq)]
pub struct RBoxTargetMaps {
    /// Top, right, bottom, left.
    pub d: [Grid<f64>; 4],
    pub theta: Grid<f64>,
    pub valid: Grid<bool>,
}

impl RBoxTargetMaps {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            d: std::array::from_fn(|_| Grid::filled(height, width, 0.0)),
            theta: Grid::filled(height, width, 0.0),
            valid: Grid::filled(height, width, false),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.theta.shape()
    }
}

pub fn generate_rbox_maps(quads: &[Quad], cfg: &LabelConfig) -> Result<RBoxTargetMaps, LabelError> {
    let own = assign_cells(quads, cfg)?;
    rbox_from_owner(quads, &own.owner, cfg.output_stride)
}

fn rbox_from_owner(
    quads: &[Quad],
    owner: &Grid<Option<usize>>,
    stride: usize,
) -> Result<RBoxTargetMaps, LabelError> {
    let rects: Vec<OrientedRect> = quads.iter().map(min_area_rect).collect::<Result<_, _>>()?;
    let (h, w) = owner.shape();
    let mut maps = RBoxTargetMaps::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let Some(idx) = owner[(r, c)] else { continue };
            let rect = &rects[idx];
            let d = rect.distances_from(cell_center(r, c, stride));
            for k in 0..4 {
                maps.d[k][(r, c)] = d[k].max(0.0);
            }
            maps.theta[(r, c)] = rect.theta;
            maps.valid[(r, c)] = true;
        }
    }
    Ok(maps)
}

/// QUAD targets: channel `2i` holds `x_i - cx`, channel `2i + 1` holds
/// `y_i - cy`, in input-image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadTargetMaps {
    pub offsets: [Grid<f64>; 8],
    /// Shortest edge of the owning annotation, the loss normalizer.
    pub shortest_edge: Grid<f64>,
    pub valid: Grid<bool>,
}

impl QuadTargetMaps {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            offsets: std::array::from_fn(|_| Grid::filled(height, width, 0.0)),
            shortest_edge: Grid::filled(height, width, 0.0),
            valid: Grid::filled(height, width, false),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.valid.shape()
    }
}

pub fn generate_quad_maps(quads: &[Quad], cfg: &LabelConfig) -> Result<QuadTargetMaps, LabelError> {
    let own = assign_cells(quads, cfg)?;
    Ok(quad_from_owner(quads, &own.owner, cfg.output_stride))
}

fn quad_from_owner(quads: &[Quad], owner: &Grid<Option<usize>>, stride: usize) -> QuadTargetMaps {
    let (h, w) = owner.shape();
    let mut maps = QuadTargetMaps::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let Some(idx) = owner[(r, c)] else { continue };
            let q = &quads[idx];
            let center = cell_center(r, c, stride);
            for (i, p) in q.points().iter().enumerate() {
                maps.offsets[2 * i][(r, c)] = p.x - center.x;
                maps.offsets[2 * i + 1][(r, c)] = p.y - center.y;
            }
            maps.shortest_edge[(r, c)] = q.shortest_edge();
            maps.valid[(r, c)] = true;
        }
    }
    maps
}

/// Every target for one image, sharing a single ownership pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub score: ScoreMap,
    pub rbox: RBoxTargetMaps,
    pub quad: QuadTargetMaps,
    pub collapsed: Vec<usize>,
}

pub fn generate_labels(quads: &[Quad], cfg: &LabelConfig) -> Result<Labels, LabelError> {
    let own = assign_cells(quads, cfg)?;
    Ok(Labels {
        score: score_from_owner(&own.owner),
        rbox: rbox_from_owner(quads, &own.owner, cfg.output_stride)?,
        quad: quad_from_owner(quads, &own.owner, cfg.output_stride),
        collapsed: own.collapsed,
    })
}
