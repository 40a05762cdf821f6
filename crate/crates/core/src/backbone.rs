//! A small stage-structured frame-wise 2D video backbone (`stem`, `s2` …
//! `s5`) that can be cut at any interior stage boundary into a front
//! feature extractor and a back-end.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{graph_shift, Element, Graph, Init, NodeId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Stem,
    S2,
    S3,
    S4,
    S5,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Stem, Stage::S2, Stage::S3, Stage::S4, Stage::S5];

    /// Stages at which the network may be split.
    pub const SPLITTABLE: [Stage; 3] = [Stage::S2, Stage::S3, Stage::S4];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stem => "stem",
            Stage::S2 => "s2",
            Stage::S3 => "s3",
            Stage::S4 => "s4",
            Stage::S5 => "s5",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Convolution followed by a per-channel scale/offset.
    Conv2d,
    Relu,
    /// Non-overlapping average pooling with window `kernel`.
    AvgPool,
    TemporalShift,
    /// Two `k×k` convolutions (the first strided) with per-channel
    /// scale/offset, a projection shortcut when the shape changes, and a
    /// closing ReLU.
    Residual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    /// Parameter-name prefix.
    pub name: String,
    pub kind: LayerKind,
    pub stage: Stage,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Channel fraction moved each way by a temporal shift layer.
    pub shift_fraction: f64,
}

impl LayerSpec {
    fn new(name: String, kind: LayerKind, stage: Stage, cin: usize, cout: usize) -> Self {
        Self {
            name,
            kind,
            stage,
            in_channels: cin,
            out_channels: cout,
            kernel: 1,
            stride: 1,
            padding: 0,
            shift_fraction: 0.0,
        }
    }

    pub fn has_projection(&self) -> bool {
        self.kind == LayerKind::Residual
            && (self.in_channels != self.out_channels || self.stride != 1)
    }

    /// Names and shapes of this layer's parameters (2D layout).
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (ci, co, k) = (self.in_channels, self.out_channels, self.kernel);
        let n = &self.name;
        match self.kind {
            LayerKind::Conv2d => vec![
                (format!("{n}.weight"), vec![co, ci, k, k]),
                (format!("{n}.scale"), vec![co]),
                (format!("{n}.shift"), vec![co]),
            ],
            LayerKind::Residual => {
                let mut v = vec![
                    (format!("{n}.conv1.weight"), vec![co, ci, k, k]),
                    (format!("{n}.conv1.scale"), vec![co]),
                    (format!("{n}.conv1.shift"), vec![co]),
                    (format!("{n}.conv2.weight"), vec![co, co, k, k]),
                    (format!("{n}.conv2.scale"), vec![co]),
                    (format!("{n}.conv2.shift"), vec![co]),
                ];
                if self.has_projection() {
                    v.push((format!("{n}.proj.weight"), vec![co, ci, 1, 1]));
                    v.push((format!("{n}.proj.scale"), vec![co]));
                    v.push((format!("{n}.proj.shift"), vec![co]));
                }
                v
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    pub kernel: usize,
    /// Temporal shift fraction at the start of each residual stage; 0
    /// disables the shift layers.
    pub shift_fraction: f64,
    /// Optional average-pool window appended to each residual stage.
    pub pool: Option<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let st = |stage, out_channels, stride| StageConfig {
            stage,
            out_channels,
            stride,
        };
        Self {
            in_channels: 3,
            stages: vec![
                st(Stage::Stem, 16, 2),
                st(Stage::S2, 32, 1),
                st(Stage::S3, 64, 2),
                st(Stage::S4, 96, 2),
                st(Stage::S5, 128, 2),
            ],
            kernel: 3,
            shift_fraction: 0.125,
            pool: None,
        }
    }
}

impl BackboneConfig {
    /// Total spatial downsampling through the end of `stage`.
    pub fn stride_through(&self, stage: Stage) -> usize {
        let pool = self.pool.unwrap_or(1);
        self.stages
            .iter()
            .filter(|s| s.stage <= stage)
            .map(|s| s.stride * if s.stage == Stage::Stem { 1 } else { pool })
            .product()
    }

    pub fn channels_at(&self, stage: Stage) -> Option<usize> {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .map(|s| s.out_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.in_channels, |s| s.out_channels)
    }
}

/// Expands a config into the layer list of the whole network.
pub fn build_backbone(cfg: &BackboneConfig) -> Result<Vec<LayerSpec>> {
    if cfg.in_channels == 0 {
        return Err(Error::Config("backbone input channels must be positive".into()));
    }
    if cfg.kernel % 2 == 0 {
        return Err(Error::Config(format!("kernel size {} must be odd", cfg.kernel)));
    }
    if !(0.0..=0.5).contains(&cfg.shift_fraction) {
        return Err(Error::Config(format!(
            "shift fraction {} outside [0, 0.5]",
            cfg.shift_fraction
        )));
    }
    if cfg.stages.is_empty() {
        return Err(Error::Config("backbone needs at least one stage".into()));
    }
    let mut layers = Vec::new();
    let mut cin = cfg.in_channels;
    let mut prev: Option<Stage> = None;
    for sc in &cfg.stages {
        if sc.out_channels == 0 {
            return Err(Error::Config(format!("stage {} has zero channels", sc.stage)));
        }
        if sc.stride == 0 {
            return Err(Error::Config(format!("stage {} has zero stride", sc.stage)));
        }
        if prev.is_some_and(|p| p >= sc.stage) {
            return Err(Error::Config(format!("stage {} out of order", sc.stage)));
        }
        prev = Some(sc.stage);
        let pad = cfg.kernel / 2;
        let tag = sc.stage.as_str();
        if sc.stage == Stage::Stem {
            let mut conv = LayerSpec::new(format!("{tag}.conv"), LayerKind::Conv2d, sc.stage, cin, sc.out_channels);
            conv.kernel = cfg.kernel;
            conv.stride = sc.stride;
            conv.padding = pad;
            layers.push(conv);
            layers.push(LayerSpec::new(format!("{tag}.relu"), LayerKind::Relu, sc.stage, sc.out_channels, sc.out_channels));
        } else {
            if cfg.shift_fraction > 0.0 {
                let mut shift = LayerSpec::new(format!("{tag}.shift"), LayerKind::TemporalShift, sc.stage, cin, cin);
                shift.shift_fraction = cfg.shift_fraction;
                layers.push(shift);
            }
            let mut block = LayerSpec::new(format!("{tag}.block"), LayerKind::Residual, sc.stage, cin, sc.out_channels);
            block.kernel = cfg.kernel;
            block.stride = sc.stride;
            block.padding = pad;
            layers.push(block);
            if let Some(k) = cfg.pool {
                let mut pool = LayerSpec::new(format!("{tag}.pool"), LayerKind::AvgPool, sc.stage, sc.out_channels, sc.out_channels);
                pool.kernel = k;
                pool.stride = k;
                layers.push(pool);
            }
        }
        cin = sc.out_channels;
    }
    Ok(layers)
}

/// Initialises every parameter of `layers` into `store`.
pub fn init_layers<E: Element, R: Rng + ?Sized>(layers: &[LayerSpec], store: &mut ParamStore<E>, rng: &mut R) {
    for layer in layers {
        for (name, dims) in layer.param_shapes() {
            let init = if name.ends_with(".weight") {
                Init::He {
                    fan_in: dims[1..].iter().product(),
                }
            } else if name.ends_with(".scale") {
                Init::Ones
            } else {
                Init::Zeros
            };
            store.init(name, dims, init, rng);
        }
    }
}

/// Classifier head on top of the last stage: global average pool and a
/// dense layer.
pub fn init_head<E: Element, R: Rng + ?Sized>(
    prefix: &str,
    in_features: usize,
    classes: usize,
    store: &mut ParamStore<E>,
    rng: &mut R,
) {
    let bound = 1.0 / (in_features as f64).sqrt();
    store.init(format!("{prefix}.weight"), [classes, in_features], Init::Uniform(bound), rng);
    store.init(format!("{prefix}.bias"), [classes], Init::Zeros, rng);
}

fn conv_affine<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    x: NodeId,
    prefix: &str,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let s = g.param(store, &format!("{prefix}.scale"))?;
    let b = g.param(store, &format!("{prefix}.shift"))?;
    let y = g.conv2d(x, w, stride, padding)?;
    g.channel_affine(y, Some(s), b)
}

/// Runs 2D `layers` on a `C×T×H×W` feature node.
pub fn forward_layers<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    layers: &[LayerSpec],
    mut x: NodeId,
) -> Result<NodeId> {
    for layer in layers {
        x = match layer.kind {
            LayerKind::Conv2d => conv_affine(g, store, x, &layer.name, layer.stride, layer.padding)?,
            LayerKind::Relu => g.relu(x),
            LayerKind::AvgPool => g.avg_pool(x, layer.kernel)?,
            LayerKind::TemporalShift => g.temporal_shift(x, layer.shift_fraction)?,
            LayerKind::Residual => {
                let n = &layer.name;
                let h = conv_affine(g, store, x, &format!("{n}.conv1"), layer.stride, layer.padding)?;
                let h = g.relu(h);
                let h = conv_affine(g, store, h, &format!("{n}.conv2"), 1, layer.padding)?;
                let skip = if layer.has_projection() {
                    conv_affine(g, store, x, &format!("{n}.proj"), layer.stride, 0)?
                } else {
                    x
                };
                let y = g.add(h, skip)?;
                g.relu(y)
            }
        };
    }
    Ok(x)
}

/// Global average pooling followed by the dense head `prefix`.
pub fn forward_head<E: Element>(g: &mut Graph<E>, store: &ParamStore<E>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let pooled = g.global_avg_pool(x)?;
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    g.dense(pooled, w, b)
}

/// Shifts the first `⌊fraction·C⌋` channels of `x: C×T×…` one frame
/// forward (frame 0 zero-filled) and the next `⌊fraction·C⌋` one frame
/// backward; remaining channels are unchanged.
pub fn temporal_shift<E: Element>(x: &Tensor<E>, fraction: f64) -> Result<Tensor<E>> {
    if x.rank() < 2 {
        return Err(Error::Rank {
            op: "temporal_shift",
            expected: ">= 2",
            found: x.dims().to_vec(),
        });
    }
    if !(0.0..=0.5).contains(&fraction) {
        return Err(Error::invalid(format!("temporal_shift: fraction {fraction} outside [0, 0.5]")));
    }
    let fold = (fraction * x.dims()[0] as f64).floor() as usize;
    Ok(graph_shift(x, fold, false))
}

/// The backbone cut after stage `stage`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSplit {
    pub stage: Stage,
    pub front: Vec<LayerSpec>,
    pub back: Vec<LayerSpec>,
}

impl NetworkSplit {
    /// Channel width of the separating feature map.
    pub fn split_channels(&self) -> usize {
        self.front.last().map_or(0, |l| l.out_channels)
    }
}

/// Splits `layers` after the last layer tagged `stage`.
pub fn split_at(layers: &[LayerSpec], stage: Stage) -> Result<NetworkSplit> {
    if !Stage::SPLITTABLE.contains(&stage) {
        return Err(Error::Config(format!(
            "cannot split at `{stage}`: only interior stages (s2, s3, s4) separate the network"
        )));
    }
    let cut = layers
        .iter()
        .rposition(|l| l.stage == stage)
        .ok_or_else(|| Error::Config(format!("network has no stage `{stage}`")))?;
    if cut + 1 == layers.len() {
        return Err(Error::Config(format!("stage `{stage}` is the last stage; nothing left to compact")));
    }
    Ok(NetworkSplit {
        stage,
        front: layers[..=cut].to_vec(),
        back: layers[cut + 1..].to_vec(),
    })
}

/// `X_l = F(clip)` for a `C×T×H×W` input node.
pub fn forward_features<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    split: &NetworkSplit,
    clip: NodeId,
) -> Result<NodeId> {
    forward_layers(g, store, &split.front, clip)
}

/// Stage-1 model: the full backbone plus a pooled dense classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

pub const HEAD: &str = "head.fc";

impl Backbone {
    pub fn new(config: BackboneConfig, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let layers = build_backbone(&config)?;
        Ok(Self {
            config,
            layers,
            classes,
        })
    }

    pub fn init_params<E: Element, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<E> {
        let mut store = ParamStore::new();
        init_layers(&self.layers, &mut store, rng);
        init_head(HEAD, self.config.out_channels(), self.classes, &mut store, rng);
        store
    }

    /// Logits for a `C×T×H×W` clip node.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, store: &ParamStore<E>, clip: NodeId) -> Result<NodeId> {
        let x = forward_layers(g, store, &self.layers, clip)?;
        forward_head(g, store, x, HEAD)
    }
}
