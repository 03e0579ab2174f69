//! A small fully-convolutional detector trained from scratch on the CPU.
//!
//! Layout: a plain conv stem that yields features at 1/4 .. 1/32 of the
//! input, a merging branch that walks back up (unpool, concat with the stem
//! feature at that scale, 1x1 conv, 3x3 conv), a final 3x3 conv, and 1x1
//! heads for the score map and geometry.

use std::borrow::Cow;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{DenseOutputs, GeometryMaps, QuadOffsetMaps, RBoxMaps};
use crate::formats::{FormatError, TensorFile};
use crate::grid::{pairwise_sum, Grid};
use crate::augment::Dihedral;
use crate::geometry::{GeometryError, Quad};
use crate::labelgen::{generate_labels, LabelConfig, LabelError, Labels};
use crate::losses::{
    balanced_xent_logits, quad_geometry_loss, rbox_geometry_loss, sigmoid, total_loss, LossConfig, LossError,
};
use crate::tensor::{
    add_inplace, concat_channels, conv2d, conv2d_backward, max_pool2, max_pool2_backward, relu_backward_inplace,
    relu_inplace, split_channels, unpool2, unpool2_backward, ConvShape, Tensor, TensorError,
};

pub const OUTPUT_STRIDE: usize = 4;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    BadShape(#[from] TensorError),
    #[error("backward called without a cached forward pass")]
    MissingCache,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("bad checkpoint manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Rbox,
    Quad,
}

impl Head {
    pub fn channels(self) -> usize {
        match self {
            Head::Rbox => 5,
            Head::Quad => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Stem widths at 1/4, 1/8, 1/16 and 1/32 of the input.
    pub stem_channels: [usize; 4],
    /// Merge widths, coarsest stage first.
    pub merge_channels: [usize; 3],
    /// Width of the last 3x3 conv that feeds both heads.
    pub final_channels: usize,
    pub head: Head,
    /// Scale of the distance (and quad offset) outputs, in pixels.
    pub d_max: f64,
    pub input_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            stem_channels: [8, 16, 32, 64],
            merge_channels: [32, 16, 8],
            final_channels: 32,
            head: Head::Rbox,
            d_max: 64.0,
            input_size: 128,
        }
    }
}

impl NetConfig {
    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(NetError::InvalidConfig(format!(
                "input size {} is not a positive multiple of 32",
                self.input_size
            )));
        }
        if self.stem_channels.contains(&0) || self.merge_channels.contains(&0) || self.final_channels == 0 {
            return Err(NetError::InvalidConfig("channel counts must be positive".into()));
        }
        if !(self.d_max.is_finite() && self.d_max > 0.0) {
            return Err(NetError::InvalidConfig(format!("d_max {} must be positive", self.d_max)));
        }
        Ok(())
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    shape: ConvShape,
    weight: usize,
    bias: usize,
    relu: bool,
}

// Conv indices in execution order.
const STEM: usize = 0; // 8 convs, two per stage
const MERGE: usize = 8; // 6 convs, (1x1, 3x3) per stage
const FINAL: usize = 14;
const SCORE_HEAD: usize = 15;
const GEO_HEAD: usize = 16;
const NUM_CONVS: usize = 17;
const INPUT_MEAN: f32 = 0.5;

#[derive(Debug, Clone)]
struct Cache {
    /// Input and output of every conv.
    io: Vec<Option<(Tensor, Tensor)>>,
    pools: Vec<(Vec<u32>, [usize; 4])>,
    /// Channels contributed by the unpooled branch to each concat.
    concat_split: [usize; 3],
}

/// Raw network outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub score_logits: Tensor,
    pub score: Tensor,
    /// Activated geometry channels: RBOX distances and angle, or QUAD offsets.
    pub geometry: Tensor,
    head: Head,
}

impl NetOutput {
    /// Dense maps for batch item `n`, in `f64`.
    pub fn dense(&self, n: usize) -> DenseOutputs {
        let [_, _, h, w] = self.score.shape();
        let grid = |t: &Tensor, c: usize| Grid::from_vec(h, w, t.channel(n, c).iter().map(|&v| v as f64).collect());
        let geometry = match self.head {
            Head::Rbox => GeometryMaps::Rbox(RBoxMaps {
                d: std::array::from_fn(|k| grid(&self.geometry, k)),
                theta: grid(&self.geometry, 4),
            }),
            Head::Quad => GeometryMaps::Quad(QuadOffsetMaps {
                offsets: std::array::from_fn(|k| grid(&self.geometry, k)),
            }),
        };
        DenseOutputs {
            score: grid(&self.score, 0),
            geometry,
            stride: OUTPUT_STRIDE,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.score.shape()[0]
    }
}

/// Per-parameter gradients, aligned with [`TinyNet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct TinyNet {
    config: NetConfig,
    params: Vec<Param>,
    convs: Vec<Conv>,
    cache: Option<Cache>,
}

impl TinyNet {
    /// Weights drawn uniformly from `±sqrt(6 / fan_in)`, biases zero.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        let mut net = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &net.convs {
            let bound = (6.0 / (conv.shape.cin * conv.shape.k * conv.shape.k) as f64).sqrt() as f32;
            for v in &mut net.params[conv.weight].data {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// All weights and biases zero.
    pub fn zeroed(config: NetConfig) -> Result<Self, NetError> {
        config.validate()?;
        let s = config.stem_channels;
        let m = config.merge_channels;
        let mut specs: Vec<(String, ConvShape, bool)> = Vec::with_capacity(NUM_CONVS);
        let mut cin = 1;
        for (stage, &c) in s.iter().enumerate() {
            specs.push((format!("stem{}a", stage + 1), ConvShape { cin, cout: c, k: 3 }, true));
            specs.push((format!("stem{}b", stage + 1), ConvShape { cin: c, cout: c, k: 3 }, true));
            cin = c;
        }
        let mut prev = s[3];
        for (i, &c) in m.iter().enumerate() {
            let lateral = s[2 - i];
            specs.push((format!("merge{}_1x1", i + 1), ConvShape { cin: prev + lateral, cout: c, k: 1 }, true));
            specs.push((format!("merge{}_3x3", i + 1), ConvShape { cin: c, cout: c, k: 3 }, true));
            prev = c;
        }
        specs.push(("final_3x3".into(), ConvShape { cin: prev, cout: config.final_channels, k: 3 }, true));
        let prev = config.final_channels;
        specs.push(("score_head".into(), ConvShape { cin: prev, cout: 1, k: 1 }, false));
        specs.push((
            "geometry_head".into(),
            ConvShape {
                cin: prev,
                cout: config.head.channels(),
                k: 1,
            },
            false,
        ));

        let mut params = Vec::new();
        let mut convs = Vec::new();
        for (name, shape, relu) in specs {
            params.push(Param {
                name: format!("{name}.weight"),
                shape: vec![shape.cout, shape.cin, shape.k, shape.k],
                data: vec![0.0; shape.weight_len()],
            });
            params.push(Param {
                name: format!("{name}.bias"),
                shape: vec![shape.cout],
                data: vec![0.0; shape.cout],
            });
            convs.push(Conv {
                shape,
                weight: params.len() - 2,
                bias: params.len() - 1,
                relu,
            });
        }
        Ok(Self {
            config,
            params,
            convs,
            cache: None,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            values: self.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// Inference pass; nothing is cached.
    pub fn forward(&self, input: &Tensor) -> Result<NetOutput, NetError> {
        self.run(input, None)
    }

    /// Forward pass that keeps the activations needed by [`TinyNet::backward`].
    pub fn forward_train(&mut self, input: &Tensor) -> Result<NetOutput, NetError> {
        let mut cache = Cache {
            io: vec![None; NUM_CONVS],
            pools: Vec::with_capacity(5),
            concat_split: [0; 3],
        };
        let out = self.run(input, Some(&mut cache))?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Which ReLUs are active and which max-pool inputs won, for one input.
    /// Two parameter settings with equal patterns sit on the same smooth
    /// piece of the network function.
    pub(crate) fn switch_pattern(&self, input: &Tensor) -> Result<Vec<u32>, NetError> {
        let mut cache = Cache {
            io: vec![None; NUM_CONVS],
            pools: Vec::with_capacity(5),
            concat_split: [0; 3],
        };
        self.run(input, Some(&mut cache))?;
        let mut pattern = Vec::new();
        for (id, io) in cache.io.iter().enumerate() {
            if let (true, Some((_, y))) = (self.convs[id].relu, io) {
                pattern.extend(y.data().iter().map(|&v| u32::from(v > 0.0)));
            }
        }
        for (idx, _) in &cache.pools {
            pattern.extend_from_slice(idx);
        }
        Ok(pattern)
    }

    fn conv(&self, id: usize, x: Tensor, cache: &mut Option<&mut Cache>) -> Result<Tensor, NetError> {
        let c = self.convs[id];
        let mut y = conv2d(&x, c.shape, &self.params[c.weight].data, &self.params[c.bias].data)?;
        if c.relu {
            relu_inplace(&mut y);
        }
        if let Some(cache) = cache.as_deref_mut() {
            cache.io[id] = Some((x, y.clone()));
        }
        Ok(y)
    }

    fn pool(x: &Tensor, cache: &mut Option<&mut Cache>) -> Result<Tensor, NetError> {
        let (y, idx) = max_pool2(x)?;
        if let Some(cache) = cache.as_deref_mut() {
            cache.pools.push((idx, x.shape()));
        }
        Ok(y)
    }

    fn run(&self, input: &Tensor, mut cache: Option<&mut Cache>) -> Result<NetOutput, NetError> {
        let [_, c, h, w] = input.shape();
        if c != 1 || h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(NetError::BadShape(TensorError::BadShape(format!(
                "input {:?} must be single-channel with sides divisible by 32",
                input.shape()
            ))));
        }
        let cache = &mut cache;

        // Centre on mid-gray so the zero padding of every conv looks like
        // plain background rather than a dark edge.
        let mut centred = input.clone();
        centred.data_mut().iter_mut().for_each(|v| *v -= INPUT_MEAN);

        // Stem: f[0] at 1/4 ... f[3] at 1/32.
        let a = self.conv(STEM, centred, cache)?;
        let p = Self::pool(&a, cache)?;
        let a = self.conv(STEM + 1, p, cache)?;
        let mut f = vec![Self::pool(&a, cache)?];
        for stage in 1..4 {
            let p = Self::pool(&f[stage - 1], cache)?;
            let a = self.conv(STEM + 2 * stage, p, cache)?;
            f.push(self.conv(STEM + 2 * stage + 1, a, cache)?);
        }

        // Merge branch, coarsest first.
        let mut hmap = f[3].clone();
        for i in 0..3 {
            let g = unpool2(&hmap);
            if let Some(cache) = cache.as_deref_mut() {
                cache.concat_split[i] = g.shape()[1];
            }
            let cat = concat_channels(&g, &f[2 - i])?;
            let a = self.conv(MERGE + 2 * i, cat, cache)?;
            hmap = self.conv(MERGE + 2 * i + 1, a, cache)?;
        }
        let features = self.conv(FINAL, hmap, cache)?;
        let score_logits = self.conv(SCORE_HEAD, features.clone(), cache)?;
        let raw = self.conv(GEO_HEAD, features, cache)?;

        let mut score = score_logits.clone();
        for v in score.data_mut() {
            *v = sigmoid(*v as f64) as f32;
        }
        let geometry = self.activate_geometry(&raw);
        for (t, what) in [(&score_logits, "score logits"), (&geometry, "geometry")] {
            if !t.all_finite() {
                return Err(NetError::NonFinite(what));
            }
        }
        Ok(NetOutput {
            score_logits,
            score,
            geometry,
            head: self.config.head,
        })
    }

    fn activate_geometry(&self, raw: &Tensor) -> Tensor {
        let mut out = raw.clone();
        let [n, c, _, _] = raw.shape();
        let d_max = self.config.d_max;
        for b in 0..n {
            for ch in 0..c {
                let plane = out.channel_mut(b, ch);
                match (self.config.head, ch) {
                    (Head::Rbox, 0..=3) => plane.iter_mut().for_each(|v| *v = (sigmoid(*v as f64) * d_max) as f32),
                    (Head::Rbox, _) => plane
                        .iter_mut()
                        .for_each(|v| *v = ((sigmoid(*v as f64) - 0.5) * FRAC_PI_2) as f32),
                    (Head::Quad, _) => plane.iter_mut().for_each(|v| *v = (*v as f64 * d_max) as f32),
                }
            }
        }
        out
    }

    /// Chain rule through the geometry activations.
    fn geometry_raw_grad(&self, raw: &Tensor, d_act: &Tensor) -> Tensor {
        let mut out = d_act.clone();
        let [n, c, _, _] = raw.shape();
        let d_max = self.config.d_max;
        for b in 0..n {
            for ch in 0..c {
                let z = raw.channel(b, ch);
                let scale = match (self.config.head, ch) {
                    (Head::Rbox, 0..=3) => d_max,
                    (Head::Rbox, _) => FRAC_PI_2,
                    (Head::Quad, _) => d_max,
                };
                let g = out.channel_mut(b, ch);
                for (gv, &zv) in g.iter_mut().zip(z) {
                    let slope = match self.config.head {
                        Head::Rbox => {
                            let s = sigmoid(zv as f64);
                            s * (1.0 - s)
                        }
                        Head::Quad => 1.0,
                    };
                    *gv = (*gv as f64 * scale * slope) as f32;
                }
            }
        }
        out
    }

    /// Backpropagates gradients of the loss with respect to the score logits
    /// and the activated geometry outputs. Consumes the cached forward pass.
    pub fn backward(&mut self, d_logits: &Tensor, d_geometry: &Tensor) -> Result<Gradients, NetError> {
        let mut cache = self.cache.take().ok_or(NetError::MissingCache)?;
        let (_, logits) = cache.io[SCORE_HEAD].as_ref().ok_or(NetError::MissingCache)?;
        if logits.shape() != d_logits.shape() {
            return Err(NetError::ShapeMismatch(format!(
                "score grad {:?} vs output {:?}",
                d_logits.shape(),
                logits.shape()
            )));
        }
        let (_, raw) = cache.io[GEO_HEAD].as_ref().ok_or(NetError::MissingCache)?;
        if raw.shape() != d_geometry.shape() {
            return Err(NetError::ShapeMismatch(format!(
                "geometry grad {:?} vs output {:?}",
                d_geometry.shape(),
                raw.shape()
            )));
        }
        let d_raw = self.geometry_raw_grad(raw, d_geometry);
        let mut grads = self.zero_gradients();

        let mut d_feat = self.conv_back(GEO_HEAD, d_raw, &mut cache, &mut grads, true).unwrap();
        let d_feat2 = self.conv_back(SCORE_HEAD, d_logits.clone(), &mut cache, &mut grads, true).unwrap();
        add_inplace(&mut d_feat, &d_feat2);
        let mut d_h = self.conv_back(FINAL, d_feat, &mut cache, &mut grads, true).unwrap();

        let mut d_f: [Option<Tensor>; 4] = Default::default();
        for i in (0..3).rev() {
            let d_a = self.conv_back(MERGE + 2 * i + 1, d_h, &mut cache, &mut grads, true).unwrap();
            let d_cat = self.conv_back(MERGE + 2 * i, d_a, &mut cache, &mut grads, true).unwrap();
            let (d_g, d_lat) = split_channels(&d_cat, cache.concat_split[i]);
            accumulate(&mut d_f[2 - i], d_lat);
            d_h = unpool2_backward(&d_g);
        }
        accumulate(&mut d_f[3], d_h);

        for stage in (1..4).rev() {
            let d = d_f[stage].take().expect("every stem stage feeds the merge branch");
            let d_a = self.conv_back(STEM + 2 * stage + 1, d, &mut cache, &mut grads, true).unwrap();
            let d_p = self.conv_back(STEM + 2 * stage, d_a, &mut cache, &mut grads, true).unwrap();
            let (idx, shape) = &cache.pools[stage + 1];
            accumulate(&mut d_f[stage - 1], max_pool2_backward(&d_p, idx, *shape));
        }
        let d = d_f[0].take().expect("stage one feeds the merge branch");
        let (idx, shape) = &cache.pools[1];
        let d = max_pool2_backward(&d, idx, *shape);
        let d = self.conv_back(STEM + 1, d, &mut cache, &mut grads, true).unwrap();
        let (idx, shape) = &cache.pools[0];
        let d = max_pool2_backward(&d, idx, *shape);
        self.conv_back(STEM, d, &mut cache, &mut grads, false);

        if grads.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("gradients"));
        }
        Ok(grads)
    }

    fn conv_back(
        &self,
        id: usize,
        mut dy: Tensor,
        cache: &mut Cache,
        grads: &mut Gradients,
        want_dx: bool,
    ) -> Option<Tensor> {
        let c = self.convs[id];
        let (x, y) = cache.io[id].take().expect("conv ran during the cached forward pass");
        if c.relu {
            relu_backward_inplace(&mut dy, &y);
        }
        let (lo, hi) = grads.values.split_at_mut(c.bias);
        conv2d_backward(
            &x,
            &dy,
            c.shape,
            &self.params[c.weight].data,
            &mut lo[c.weight],
            &mut hi[0],
            want_dx,
        )
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => add_inplace(acc, &t),
        None => *slot = Some(t),
    }
}

/// Loss components for one batch, averaged over its items.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub score: f64,
    pub geometry: f64,
}

/// Loss for a batch and its gradients with respect to the score logits and
/// activated geometry outputs.
pub fn loss_and_grads(
    out: &NetOutput,
    labels: &[&Labels],
    cfg: &LossConfig,
) -> Result<(LossParts, Tensor, Tensor), NetError> {
    let n = out.batch_size();
    if labels.len() != n {
        return Err(NetError::ShapeMismatch(format!("{} label sets for batch of {n}", labels.len())));
    }
    let [_, _, h, w] = out.score.shape();
    let mut d_logits = Tensor::zeros(out.score_logits.shape());
    let mut d_geo = Tensor::zeros(out.geometry.shape());
    let (mut scores, mut geoms) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let inv = 1.0 / n as f64;
    for (b, lab) in labels.iter().enumerate() {
        if lab.score.shape() != (h, w) {
            return Err(NetError::ShapeMismatch(format!(
                "labels {:?} vs outputs {:?}",
                lab.score.shape(),
                (h, w)
            )));
        }
        let logits = Grid::from_vec(h, w, out.score_logits.channel(b, 0).iter().map(|&v| v as f64).collect());
        let xent = balanced_xent_logits(&logits, &lab.score)?;
        for (d, g) in d_logits.channel_mut(b, 0).iter_mut().zip(xent.grad.iter()) {
            *d = (g * inv) as f32;
        }
        let (geo_loss, grad_channels): (f64, Vec<Grid<f64>>) = match out.dense(b).geometry {
            GeometryMaps::Rbox(pred) => {
                let (l, g) = rbox_geometry_loss(&pred, &lab.rbox, cfg)?;
                (l, g.d.into_iter().chain(std::iter::once(g.theta)).collect())
            }
            GeometryMaps::Quad(pred) => {
                let (l, g) = quad_geometry_loss(&pred, &lab.quad, cfg)?;
                (l, g.offsets.into_iter().collect())
            }
        };
        for (ch, g) in grad_channels.iter().enumerate() {
            for (d, v) in d_geo.channel_mut(b, ch).iter_mut().zip(g.iter()) {
                *d = (cfg.lambda_g * v * inv) as f32;
            }
        }
        scores.push(xent.loss);
        geoms.push(geo_loss);
    }
    let score = pairwise_sum(&scores) * inv;
    let geometry = pairwise_sum(&geoms) * inv;
    Ok((
        LossParts {
            total: total_loss(score, geometry, cfg),
            score,
            geometry,
        },
        d_logits,
        d_geo,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_every: u64,
    pub decay_factor: f64,
    pub lr_floor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_every: 1000,
            decay_factor: 0.1,
            lr_floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Rate for the next step.
    pub lr: f64,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Param]) -> Self {
        Self {
            config,
            lr: config.lr,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// Step decay, never below the floor.
    pub fn scheduled_lr(config: &AdamConfig, steps_done: u64) -> f64 {
        let decays = steps_done.checked_div(config.decay_every).unwrap_or(0);
        (config.lr * config.decay_factor.powi(decays.min(i32::MAX as u64) as i32)).max(config.lr_floor)
    }
}

/// One bias-corrected Adam update, followed by the learning-rate schedule.
pub fn adam_step(params: &mut [Param], grads: &Gradients, state: &mut AdamState) -> Result<(), NetError> {
    if params.len() != grads.values.len() || params.len() != state.m.len() {
        return Err(NetError::ShapeMismatch(format!(
            "{} params, {} grads, {} optimizer slots",
            params.len(),
            grads.values.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(&grads.values).enumerate() {
        if p.data.len() != g.len() || p.data.len() != state.m[i].len() {
            return Err(NetError::ShapeMismatch(format!("parameter {}", p.name)));
        }
    }
    let c = state.config;
    state.t += 1;
    let corr1 = 1.0 - c.beta1.powi(state.t as i32);
    let corr2 = 1.0 - c.beta2.powi(state.t as i32);
    let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(&grads.values)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] as f64 / corr1;
            let v_hat = v[i] as f64 / corr2;
            p.data[i] -= (state.lr * m_hat / (v_hat.sqrt() + c.eps)) as f32;
        }
    }
    state.lr = AdamState::scheduled_lr(&c, state.t);
    Ok(())
}

/// One training example: a `(1, 1, S, S)` image, the quads it shows, and
/// their label maps.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub gts: Vec<Quad>,
    pub labels: Labels,
}

impl Sample {
    /// Labels the quads with the default label settings.
    pub fn new(image: Tensor, gts: Vec<Quad>) -> Result<Self, NetError> {
        let [_, _, h, w] = image.shape();
        let labels = generate_labels(&gts, &LabelConfig::new(h, w))?;
        Ok(Self { image, gts, labels })
    }

    /// The sample seen through a symmetry of the square, relabelled from
    /// the mapped quads.
    pub fn transformed(&self, g: Dihedral) -> Result<Self, NetError> {
        if g.is_identity() {
            return Ok(self.clone());
        }
        let size = self.image.shape()[3] as f64;
        let gts = self
            .gts
            .iter()
            .map(|q| g.apply_quad(q, size))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(g.apply_image(&self.image)?, gts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Show each batch item under a random mirror and half turn.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            seed: 42,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub score: f64,
    pub geometry: f64,
}

/// Iterates epochs of shuffled indices.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Trains a fresh network. `progress` sees every log entry as it is made.
pub fn train(
    dataset: &[Sample],
    net_cfg: &NetConfig,
    loss_cfg: &LossConfig,
    adam_cfg: &AdamConfig,
    train_cfg: &TrainConfig,
    mut progress: impl FnMut(&LogEntry),
) -> Result<(TinyNet, Vec<LogEntry>), NetError> {
    if dataset.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    if train_cfg.batch_size == 0 {
        return Err(NetError::InvalidConfig("batch size must be positive".into()));
    }
    loss_cfg.validate()?;
    let mut net = TinyNet::new(net_cfg.clone(), train_cfg.seed)?;
    let mut adam = AdamState::new(*adam_cfg, net.params());
    let mut batcher = Batcher::new(dataset.len(), train_cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    aug_rng.set_stream(2);
    let mut log = Vec::with_capacity(train_cfg.steps as usize);
    for step in 1..=train_cfg.steps {
        let idx = batcher.next_batch(train_cfg.batch_size);
        let mut batch = Vec::with_capacity(idx.len());
        for &i in &idx {
            if train_cfg.augment {
                // Mirrors and half turns only: a quarter turn would stand long
                // boxes on end, which the scenes never do.
                let g = Dihedral::from_code(2 * aug_rng.random_range(0..4));
                if !g.is_identity() {
                    batch.push(Cow::Owned(dataset[i].transformed(g)?));
                    continue;
                }
            }
            batch.push(Cow::Borrowed(&dataset[i]));
        }
        let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
        let labels: Vec<&Labels> = batch.iter().map(|s| &s.labels).collect();
        let input = Tensor::stack(&images)?;
        let out = net.forward_train(&input)?;
        let (parts, d_logits, d_geo) = loss_and_grads(&out, &labels, loss_cfg)?;
        let lr = adam.lr;
        let grads = net.backward(&d_logits, &d_geo)?;
        adam_step(&mut net.params, &grads, &mut adam)?;
        let entry = LogEntry {
            step,
            lr,
            total: parts.total,
            score: parts.score,
            geometry: parts.geometry,
        };
        progress(&entry);
        log.push(entry);
    }
    Ok((net, log))
}

pub fn format_loss_log(log: &[LogEntry]) -> String {
    let mut s = String::from("step,lr,total,score,geometry\n");
    for e in log {
        s.push_str(&format!(
            "{},{:e},{:.9},{:.9},{:.9}\n",
            e.step, e.lr, e.total, e.score, e.geometry
        ));
    }
    s
}

pub const CHECKPOINT_WEIGHTS: &str = "model.tnsr";
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: NetConfig,
    params: Vec<ManifestEntry>,
}

impl TinyNet {
    /// Writes `model.tnsr` (all parameters, flattened) and `manifest.json`
    /// (config plus name, shape and offset of each parameter) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), NetError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(FormatError::from)?;
        let mut flat = Vec::with_capacity(self.param_count());
        let mut entries = Vec::with_capacity(self.params.len());
        for p in &self.params {
            entries.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset: flat.len(),
            });
            flat.extend_from_slice(&p.data);
        }
        TensorFile::new(vec![flat.len()], flat).write(dir.join(CHECKPOINT_WEIGHTS))?;
        let manifest = Manifest {
            config: self.config.clone(),
            params: entries,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| NetError::Manifest(e.to_string()))?;
        std::fs::write(dir.join(CHECKPOINT_MANIFEST), json + "\n").map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, NetError> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join(CHECKPOINT_MANIFEST)).map_err(FormatError::from)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| NetError::Manifest(e.to_string()))?;
        let weights = TensorFile::read(dir.join(CHECKPOINT_WEIGHTS))?;
        if weights.dims.len() != 1 {
            return Err(NetError::Manifest(format!("weights have rank {}", weights.dims.len())));
        }
        let mut net = TinyNet::zeroed(manifest.config)?;
        if manifest.params.len() != net.params.len() {
            return Err(NetError::Manifest(format!(
                "{} parameters listed, architecture has {}",
                manifest.params.len(),
                net.params.len()
            )));
        }
        for (p, e) in net.params.iter_mut().zip(&manifest.params) {
            if p.name != e.name || p.shape != e.shape {
                return Err(NetError::Manifest(format!(
                    "entry {} {:?} does not match {} {:?}",
                    e.name, e.shape, p.name, p.shape
                )));
            }
            let end = e.offset + p.data.len();
            let src = weights
                .data
                .get(e.offset..end)
                .ok_or_else(|| NetError::Manifest(format!("{} lies outside the weights", e.name)))?;
            p.data.copy_from_slice(src);
        }
        Ok(net)
    }
}
