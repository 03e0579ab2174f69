//! End-to-end glue: scenes to training samples, and images to detections.

use std::ops::Range;

use thiserror::Error;

use crate::decode::{decode, DecodeConfig, DecodeError, DenseOutputs, GeometryMaps, QuadOffsetMaps, RBoxMaps};
use crate::formats::TensorFile;
use crate::geometry::Detection;
use crate::grid::Grid;
use crate::labelgen::{LabelError, Labels};
use crate::nms::{locality_aware_nms, MergeConfig, NmsError};
use crate::synth::{evaluate, generate_scene, EvalCounts, Scene, SceneConfig, SynthError};
use crate::tensor::Tensor;
use crate::tinynet::{Head, NetError, Sample, TinyNet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Nms(#[from] NmsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("bad map tensor: {0}")]
    MapShape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectConfig {
    pub decode: DecodeConfig,
    pub merge: MergeConfig,
}

pub fn scenes(cfg: &SceneConfig, indices: Range<u64>) -> Result<Vec<Scene>, SynthError> {
    indices.map(|i| generate_scene(cfg, i)).collect()
}

pub fn samples(scenes: &[Scene]) -> Result<Vec<Sample>, NetError> {
    scenes.iter().map(|s| Sample::new(s.image.clone(), s.gts.clone())).collect()
}

/// Runs the network on a `(1, 1, S, S)` image, thresholds the score map and
/// merges the surviving cells.
pub fn detect(net: &TinyNet, image: &Tensor, cfg: &DetectConfig) -> Result<Vec<Detection>, PipelineError> {
    let out = net.forward(image)?;
    let decoded = decode(&out.dense(0), &cfg.decode)?;
    let (dets, _) = locality_aware_nms(&decoded.detections, &cfg.merge)?;
    Ok(dets)
}

/// Detections per scene plus micro-averaged counts.
pub fn evaluate_net(
    net: &TinyNet,
    scenes: &[Scene],
    cfg: &DetectConfig,
    iou_threshold: f64,
) -> Result<(EvalCounts, Vec<Vec<Detection>>), PipelineError> {
    let mut counts = EvalCounts::default();
    let mut all = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let dets = detect(net, &scene.image, cfg)?;
        let r = evaluate(&dets, &scene.gts, iou_threshold);
        counts.add(dets.len(), scene.gts.len(), r.matches.len());
        all.push(dets);
    }
    Ok((counts, all))
}

/// Label maps viewed as perfect network outputs.
pub fn label_outputs(labels: &Labels, head: Head, stride: usize) -> DenseOutputs {
    let geometry = match head {
        Head::Rbox => GeometryMaps::Rbox(RBoxMaps {
            d: labels.rbox.d.clone(),
            theta: labels.rbox.theta.clone(),
        }),
        Head::Quad => GeometryMaps::Quad(QuadOffsetMaps {
            offsets: labels.quad.offsets.clone(),
        }),
    };
    DenseOutputs {
        score: labels.score.clone(),
        geometry,
        stride,
    }
}

fn grid_to_f32(g: &Grid<f64>) -> impl Iterator<Item = f32> + '_ {
    g.iter().map(|&v| v as f32)
}

/// Score map as `(H, W)` and geometry as `(C, H, W)` tensors.
pub fn outputs_to_tensors(out: &DenseOutputs) -> (TensorFile, TensorFile) {
    let (h, w) = out.score.shape();
    let score = TensorFile::new(vec![h, w], grid_to_f32(&out.score).collect());
    let channels = out.geometry.channels();
    let geometry = TensorFile::new(
        vec![channels.len(), h, w],
        channels.iter().flat_map(|g| grid_to_f32(g)).collect(),
    );
    (score, geometry)
}

/// Inverse of [`outputs_to_tensors`]; leading unit dimensions are ignored.
pub fn tensors_to_outputs(
    score: &TensorFile,
    geometry: &TensorFile,
    head: Head,
    stride: usize,
) -> Result<DenseOutputs, PipelineError> {
    let squeeze = |dims: &[usize]| -> Vec<usize> {
        let first = dims.iter().position(|&d| d != 1).unwrap_or(dims.len());
        dims[first.min(dims.len().saturating_sub(2))..].to_vec()
    };
    let sd = squeeze(&score.dims);
    let [h, w] = sd[..] else {
        return Err(PipelineError::MapShape(format!("score dims {:?} are not (H, W)", score.dims)));
    };
    let c = head.channels();
    if geometry.dims.iter().product::<usize>() != c * h * w || geometry.dims.last() != Some(&w) {
        return Err(PipelineError::MapShape(format!(
            "geometry dims {:?} do not hold {c} channels of {h}x{w}",
            geometry.dims
        )));
    }
    let to_grid = |data: &[f32]| Grid::from_vec(h, w, data.iter().map(|&v| v as f64).collect());
    let plane = |k: usize| to_grid(&geometry.data[k * h * w..(k + 1) * h * w]);
    let geometry = match head {
        Head::Rbox => GeometryMaps::Rbox(RBoxMaps {
            d: std::array::from_fn(plane),
            theta: plane(4),
        }),
        Head::Quad => GeometryMaps::Quad(QuadOffsetMaps {
            offsets: std::array::from_fn(plane),
        }),
    };
    Ok(DenseOutputs {
        score: to_grid(&score.data),
        geometry,
        stride,
    })
}
